//! The classifier as an energy model over `(x, y)`.
//!
//! `E(x, y) = ||phi(x) - mu_y||^2 / (2 gamma^2)`. Training runs with
//! `gamma^2 = 1`; the variance is estimated from the training set afterwards
//! and used for posteriors and scores.

use crate::centroids::{argmin, CentroidSet};
use crate::data::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::net::{Network, NetworkSpec, ParameterVector};

/// Which `gamma^2` an energy evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gamma2Mode {
    /// `gamma^2 = 1`, as during training.
    Unit,
    /// The post-training estimate.
    Estimated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmcModel {
    net: Network,
    centroids: CentroidSet,
    gamma2: Option<f64>,
}

impl GmmcModel {
    pub fn new(net: Network, centroids: CentroidSet) -> Result<Self> {
        check_dim(
            "centroid feature dimension",
            net.output_dim(),
            centroids.feature_dim(),
        )?;
        Ok(GmmcModel {
            net,
            centroids,
            gamma2: None,
        })
    }

    pub fn from_parts(
        spec: NetworkSpec,
        params: ParameterVector,
        centroids: CentroidSet,
        gamma2: Option<f64>,
    ) -> Result<Self> {
        let m = Self::new(Network::new(spec, params)?, centroids)?;
        match gamma2 {
            Some(g) => m.with_gamma2(g),
            None => Ok(m),
        }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn centroids(&self) -> &CentroidSet {
        &self.centroids
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn gamma2(&self) -> Option<f64> {
        self.gamma2
    }

    /// Returns a copy with `gamma^2` set.
    pub fn with_gamma2(mut self, gamma2: f64) -> Result<Self> {
        if !(gamma2 > 0.0) || !gamma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gamma^2 must be positive and finite, got {gamma2}"
            )));
        }
        self.gamma2 = Some(gamma2);
        Ok(self)
    }

    pub fn clear_gamma2(&mut self) {
        self.gamma2 = None;
    }

    pub fn resolve_gamma2(&self, mode: Gamma2Mode) -> Result<f64> {
        match mode {
            Gamma2Mode::Unit => Ok(1.0),
            Gamma2Mode::Estimated => self.gamma2.ok_or(Error::GammaUnestimated),
        }
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    /// `||phi(x) - mu_y||^2` for every class.
    pub fn sq_distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.centroids.sq_distances(&self.features(x)?)
    }

    pub fn energy(&self, x: &[f64], y: usize, mode: Gamma2Mode) -> Result<f64> {
        self.centroids.check_class(y)?;
        let gamma2 = self.resolve_gamma2(mode)?;
        let phi = self.features(x)?;
        let mu = self.centroids.mean(y);
        let d2: f64 = phi.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(d2 / (2.0 * gamma2))
    }

    /// Energies of `x` under every class.
    pub fn energies(&self, x: &[f64], mode: Gamma2Mode) -> Result<Vec<f64>> {
        let gamma2 = self.resolve_gamma2(mode)?;
        Ok(self
            .sq_distances(x)?
            .into_iter()
            .map(|d2| d2 / (2.0 * gamma2))
            .collect())
    }

    /// Class posterior `p(y|x)`, a softmax over negative energies.
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax_neg(&self.energies(x, Gamma2Mode::Estimated)?))
    }

    /// Nearest-centroid decision; does not depend on `gamma^2`.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(argmin(&self.sq_distances(x)?))
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        for (x, y) in ds.iter() {
            if self.classify(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// `gamma^2 = (1/d) * mean_i ||phi(x_i) - mu_{y_i}||^2` over `train`.
    pub fn estimate_gamma2(&self, train: &LabeledDataset) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for (x, y) in train.iter() {
            self.centroids.check_class(y)?;
            let phi = self.features(x)?;
            total += phi
                .iter()
                .zip(self.centroids.mean(y))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let gamma2 = total / train.len() as f64 / self.centroids.feature_dim() as f64;
        if gamma2 > 0.0 {
            Ok(gamma2)
        } else {
            Err(Error::DegenerateGamma)
        }
    }

    /// `log sum_y exp(-E(x, y))`, the unnormalized log-density of `x`.
    pub fn logpx_score(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp_neg(&self.energies(x, Gamma2Mode::Estimated)?))
    }

    /// Input gradient of `logpx_score`.
    pub fn logpx_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let gamma2 = self.resolve_gamma2(Gamma2Mode::Estimated)?;
        let trace = self.net.trace(x)?;
        let phi = trace.output();
        let d2 = self.centroids.sq_distances(phi)?;
        let energies: Vec<f64> = d2.iter().map(|v| v / (2.0 * gamma2)).collect();
        let post = softmax_neg(&energies);
        // d/dphi logsumexp(-E) = -sum_y p_y (phi - mu_y) / gamma^2
        let mut upstream = vec![0.0; phi.len()];
        for (y, p) in post.iter().enumerate() {
            for ((u, f), m) in upstream.iter_mut().zip(phi).zip(self.centroids.mean(y)) {
                *u -= p * (f - m) / gamma2;
            }
        }
        Ok(self
            .net
            .backward(&trace, &upstream, None, true)?
            .expect("input gradient requested"))
    }

    /// `-||d logpx / dx||_2`.
    pub fn approx_mass_score(&self, x: &[f64]) -> Result<f64> {
        let g = self.logpx_grad(x)?;
        Ok(-g.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// `max_y p(y|x)`.
    pub fn predictive_score(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .posterior(x)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// `softmax(-e)` with a max shift.
pub(crate) fn softmax_neg(energies: &[f64]) -> Vec<f64> {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out: Vec<f64> = energies.iter().map(|e| (min - e).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `log sum exp(-e)` with a max shift.
pub(crate) fn log_sum_exp_neg(energies: &[f64]) -> f64 {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let total: f64 = energies.iter().map(|e| (min - e).exp()).sum();
    total.ln() - min
}
