//! Chain samplers for `p(x | y)` and the persistent replay buffer.
//!
//! Three update rules are provided:
//!
//! * **staged**: draw a feature-space target `z ~ N(mu_y, gamma^2 I)` once,
//!   then run plain gradient descent on `||phi(x) - z||^2 / (2 gamma^2)`.
//! * **noise-injected**: redraw `z = mu_y + gamma * eps` at every step, which
//!   adds a Jacobian-modulated noise term to the descent on `E(x, y)`.
//! * **sgld**: `x <- x - (alpha / 2) dE/dx + alpha * eps` with
//!   per-coordinate `eps ~ N(0, 1)`.
//!
//! Chains live in `[-1, 1]^D`; clipping after each step is on by default.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::model::{Gamma2Mode, GmmcModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Staged,
    NoiseInjected,
    Sgld,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(SamplerMode::Staged),
            "noise_injected" | "noise-injected" => Ok(SamplerMode::NoiseInjected),
            "sgld" => Ok(SamplerMode::Sgld),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Staged => "staged",
            SamplerMode::NoiseInjected => "noise_injected",
            SamplerMode::Sgld => "sgld",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub step_size: f64,
    pub mode: SamplerMode,
    pub clip_to_domain: bool,
    /// `gamma^2` used for targets and energies. Training uses `Unit`.
    pub gamma2_mode: Gamma2Mode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 20,
            step_size: 1.0,
            mode: SamplerMode::Staged,
            clip_to_domain: true,
            gamma2_mode: Gamma2Mode::Unit,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::InvalidArgument(
                "sampler needs at least one step".into(),
            ));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sampler step size must be non-negative, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Source of standard-normal draws for the samplers.
pub trait NoiseSource {
    fn fill_standard_normal(&mut self, out: &mut [f64]);
}

impl<R: RngCore> NoiseSource for R {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(self);
        }
    }
}

/// Always yields zeros; turns the stochastic samplers into their
/// deterministic skeletons.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn clip(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::ChainDiverged { step })
    }
}

/// Gradient of `||phi(x) - target||^2 / (2 gamma^2)` with respect to `x`.
pub fn target_energy_grad(
    model: &GmmcModel,
    x: &[f64],
    target: &[f64],
    gamma2: f64,
) -> Result<Vec<f64>> {
    let trace = model.net().trace(x)?;
    check_dim("sampling target", trace.output().len(), target.len())?;
    let upstream: Vec<f64> = trace
        .output()
        .iter()
        .zip(target)
        .map(|(f, t)| (f - t) / gamma2)
        .collect();
    Ok(model
        .net()
        .backward(&trace, &upstream, None, true)?
        .expect("input gradient requested"))
}

/// Gradient of `E(x, y)` with respect to `x`.
pub fn energy_grad_input(model: &GmmcModel, x: &[f64], y: usize, gamma2: f64) -> Result<Vec<f64>> {
    model.centroids().check_class(y)?;
    target_energy_grad(model, x, model.centroids().mean(y), gamma2)
}

/// One unclipped staged update `x - alpha * dE/dx` toward `target`.
pub fn staged_step(
    model: &GmmcModel,
    x: &[f64],
    target: &[f64],
    alpha: f64,
    gamma2: f64,
) -> Result<Vec<f64>> {
    let g = target_energy_grad(model, x, target, gamma2)?;
    Ok(x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect())
}

fn check_start(model: &GmmcModel, x0: &[f64], y: usize, cfg: &SamplerConfig) -> Result<f64> {
    cfg.validate()?;
    check_dim("chain start", model.input_dim(), x0.len())?;
    model.centroids().check_class(y)?;
    model.resolve_gamma2(cfg.gamma2_mode)
}

/// Staged sampling: fixed target `z ~ N(mu_y, gamma^2 I)` and `num_steps`
/// noiseless descent steps.
pub fn staged_sample<N: NoiseSource + ?Sized>(
    model: &GmmcModel,
    x0: &[f64],
    y: usize,
    cfg: &SamplerConfig,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let gamma2 = check_start(model, x0, y, cfg)?;
    let gamma = gamma2.sqrt();
    let mut target = vec![0.0; model.centroids().feature_dim()];
    noise.fill_standard_normal(&mut target);
    for (t, m) in target.iter_mut().zip(model.centroids().mean(y)) {
        *t = m + gamma * *t;
    }
    let mut x = x0.to_vec();
    for step in 0..cfg.num_steps {
        x = staged_step(model, &x, &target, cfg.step_size, gamma2)?;
        check_finite(&x, step + 1)?;
        if cfg.clip_to_domain {
            clip(&mut x);
        }
    }
    Ok(x)
}

/// Noise-injected sampling: a fresh `z ~ N(0, I)` every step and
/// `x <- x - alpha dE(x, y)/dx + (alpha / gamma) J^T z`.
pub fn noise_injected_sample<N: NoiseSource + ?Sized>(
    model: &GmmcModel,
    x0: &[f64],
    y: usize,
    cfg: &SamplerConfig,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let gamma2 = check_start(model, x0, y, cfg)?;
    let gamma = gamma2.sqrt();
    let mu = model.centroids().mean(y);
    let mut z = vec![0.0; mu.len()];
    let mut x = x0.to_vec();
    for step in 0..cfg.num_steps {
        noise.fill_standard_normal(&mut z);
        let trace = model.net().trace(&x)?;
        // (phi - mu)/gamma^2 - z/gamma: the energy pull plus the noise term.
        let upstream: Vec<f64> = trace
            .output()
            .iter()
            .zip(mu)
            .zip(&z)
            .map(|((f, m), zi)| (f - m) / gamma2 - zi / gamma)
            .collect();
        let g = model
            .net()
            .backward(&trace, &upstream, None, true)?
            .expect("input gradient requested");
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= cfg.step_size * gi;
        }
        check_finite(&x, step + 1)?;
        if cfg.clip_to_domain {
            clip(&mut x);
        }
    }
    Ok(x)
}

/// Langevin-style reference sampler `x <- x - (alpha/2) dE/dx + alpha eps`.
pub fn sgld_sample<N: NoiseSource + ?Sized>(
    model: &GmmcModel,
    x0: &[f64],
    y: usize,
    cfg: &SamplerConfig,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let gamma2 = check_start(model, x0, y, cfg)?;
    let alpha = cfg.step_size;
    let mut eps = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for step in 0..cfg.num_steps {
        let g = energy_grad_input(model, &x, y, gamma2)?;
        noise.fill_standard_normal(&mut eps);
        for ((xi, gi), e) in x.iter_mut().zip(&g).zip(&eps) {
            *xi += -0.5 * alpha * gi + alpha * e;
        }
        check_finite(&x, step + 1)?;
        if cfg.clip_to_domain {
            clip(&mut x);
        }
    }
    Ok(x)
}

/// Runs the sampler selected by `cfg.mode`.
pub fn sample_chain<N: NoiseSource + ?Sized>(
    model: &GmmcModel,
    x0: &[f64],
    y: usize,
    cfg: &SamplerConfig,
    noise: &mut N,
) -> Result<Vec<f64>> {
    match cfg.mode {
        SamplerMode::Staged => staged_sample(model, x0, y, cfg, noise),
        SamplerMode::NoiseInjected => noise_injected_sample(model, x0, y, cfg, noise),
        SamplerMode::Sgld => sgld_sample(model, x0, y, cfg, noise),
    }
}

/// Starting point of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStart {
    pub x: Vec<f64>,
    pub label: usize,
    /// Buffer slot the chain was drawn from; `None` for a fresh start.
    pub slot: Option<usize>,
}

impl ChainStart {
    pub fn from_buffer(&self) -> bool {
        self.slot.is_some()
    }
}

/// Persistent pool of `(x, y)` chain states.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    reinit_prob: f64,
    seed: u64,
    rng: ChaCha8Rng,
    xs: Vec<f64>,
    labels: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize, reinit_prob: f64, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "buffer capacity must be positive".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "buffer dimension must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::InvalidArgument(format!(
                "reinitialization probability must lie in [0, 1], got {reinit_prob}"
            )));
        }
        Ok(ReplayBuffer {
            capacity,
            dim,
            reinit_prob,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            xs: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reinit_prob(&self) -> f64 {
        self.reinit_prob
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entry(&self, slot: usize) -> (&[f64], usize) {
        (
            &self.xs[slot * self.dim..(slot + 1) * self.dim],
            self.labels[slot],
        )
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.xs
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// Word position of the internal generator, for checkpointing.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Rebuilds a buffer from checkpointed parts.
    pub fn restore(
        capacity: usize,
        dim: usize,
        reinit_prob: f64,
        seed: u64,
        rng_word_pos: u128,
        entries: Vec<(Vec<f64>, usize)>,
    ) -> Result<Self> {
        let mut buf = Self::new(capacity, dim, reinit_prob, seed)?;
        if entries.len() > capacity {
            return Err(Error::Format(
                "buffer holds more entries than its capacity".into(),
            ));
        }
        buf.rng.set_word_pos(rng_word_pos);
        for (x, y) in entries {
            check_dim("buffer entry", dim, x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite buffer entry".into()));
            }
            buf.xs.extend(x);
            buf.labels.push(y);
        }
        Ok(buf)
    }

    /// Draws a chain start: a stored entry with probability `1 - rho` when
    /// the buffer is non-empty, otherwise `x ~ U(-1, 1)^D` and a uniform label.
    pub fn init_chain(&mut self, num_classes: usize) -> Result<ChainStart> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let fresh = self.is_empty() || self.rng.random::<f64>() < self.reinit_prob;
        if fresh {
            let x = (0..self.dim)
                .map(|_| self.rng.random_range(-1.0..=1.0))
                .collect();
            let label = self.rng.random_range(0..num_classes);
            Ok(ChainStart {
                x,
                label,
                slot: None,
            })
        } else {
            let slot = self.rng.random_range(0..self.len());
            let (x, label) = self.entry(slot);
            Ok(ChainStart {
                x: x.to_vec(),
                label,
                slot: Some(slot),
            })
        }
    }

    /// Writes a finished chain back: replaces its origin slot, or appends a
    /// fresh chain (evicting a uniformly chosen entry when full).
    pub fn put(&mut self, x: &[f64], label: usize, slot: Option<usize>) -> Result<()> {
        check_dim("buffer entry", self.dim, x.len())?;
        let target = match slot {
            Some(s) if s < self.len() => Some(s),
            Some(s) => {
                return Err(Error::InvalidArgument(format!(
                    "buffer slot {s} out of range for {} entries",
                    self.len()
                )))
            }
            None if self.len() < self.capacity => None,
            None => Some(self.rng.random_range(0..self.len())),
        };
        let clipped = x.iter().map(|v| v.clamp(-1.0, 1.0));
        match target {
            Some(s) => {
                for (dst, v) in self.xs[s * self.dim..(s + 1) * self.dim]
                    .iter_mut()
                    .zip(clipped)
                {
                    *dst = v;
                }
                self.labels[s] = label;
            }
            None => {
                self.xs.extend(clipped);
                self.labels.push(label);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::generate_opt_means;
    use crate::net::{Activation, Network, NetworkSpec, ParameterVector};
    use approx::assert_abs_diff_eq;

    fn identity_model(c: usize, d: usize, s: f64) -> GmmcModel {
        let spec = NetworkSpec::new(d, vec![d], vec![], 0).unwrap();
        let mut p = ParameterVector::zeros(&spec);
        for i in 0..d {
            p.weights_mut(0)[i * d + i] = 1.0;
        }
        GmmcModel::new(
            Network::new(spec, p).unwrap(),
            generate_opt_means(c, d, s).unwrap(),
        )
        .unwrap()
    }

    fn random_model(seed: u64) -> GmmcModel {
        let spec = NetworkSpec::mlp(3, &[6], 2, Activation::Tanh, seed).unwrap();
        GmmcModel::new(
            Network::initialized(spec),
            generate_opt_means(3, 2, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn cfg(mode: SamplerMode, steps: usize, alpha: f64, clip: bool) -> SamplerConfig {
        SamplerConfig {
            num_steps: steps,
            step_size: alpha,
            mode,
            clip_to_domain: clip,
            gamma2_mode: Gamma2Mode::Unit,
        }
    }

    /// Records every draw so tests can replay the target.
    struct Recorder<R>(R, Vec<f64>);

    impl<R: RngCore> NoiseSource for Recorder<R> {
        fn fill_standard_normal(&mut self, out: &mut [f64]) {
            self.0.fill_standard_normal(out);
            self.1.extend_from_slice(out);
        }
    }

    #[test]
    fn staged_identity_single_step_lands_on_target() {
        let m = identity_model(2, 2, 1.0);
        let x0 = [0.3, -0.4];
        let mut rec = Recorder(ChaCha8Rng::seed_from_u64(1), Vec::new());
        let x1 = staged_sample(
            &m,
            &x0,
            1,
            &cfg(SamplerMode::Staged, 1, 1.0, false),
            &mut rec,
        )
        .unwrap();
        let mu = m.centroids().mean(1);
        let z: Vec<f64> = mu.iter().zip(&rec.1).map(|(m, e)| m + e).collect();
        for (a, b) in x1.iter().zip(&z) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_step_size_is_stationary() {
        let m = random_model(4);
        let x0 = [0.1, 0.2, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [
            SamplerMode::Staged,
            SamplerMode::NoiseInjected,
            SamplerMode::Sgld,
        ] {
            let x = sample_chain(&m, &x0, 0, &cfg(mode, 5, 0.0, true), &mut rng).unwrap();
            assert_eq!(x, x0.to_vec(), "{mode}");
        }
    }

    #[test]
    fn staged_update_identity_holds_exactly() {
        let m = random_model(5);
        let target = [0.4, -0.2];
        let mut x = vec![0.5, -0.5, 0.25];
        for _ in 0..10 {
            let g = target_energy_grad(&m, &x, &target, 1.0).unwrap();
            let next = staged_step(&m, &x, &target, 0.3, 1.0).unwrap();
            for k in 0..3 {
                assert_eq!(next[k], x[k] - 0.3 * g[k]);
            }
            x = next;
        }
    }

    #[test]
    fn noise_injected_with_zero_noise_is_staged_toward_mean() {
        let m = random_model(6);
        let x0 = [0.2, 0.1, -0.6];
        let c = cfg(SamplerMode::NoiseInjected, 7, 0.2, true);
        let a = noise_injected_sample(&m, &x0, 2, &c, &mut ZeroNoise).unwrap();
        let b = staged_sample(
            &m,
            &x0,
            2,
            &SamplerConfig {
                mode: SamplerMode::Staged,
                ..c
            },
            &mut ZeroNoise,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_injected_identity_one_step_matches_expansion() {
        let m = identity_model(3, 2, 1.0);
        let x0 = [0.5, -0.25];
        let alpha = 0.4;
        let mut rec = Recorder(ChaCha8Rng::seed_from_u64(3), Vec::new());
        let x1 = noise_injected_sample(
            &m,
            &x0,
            1,
            &cfg(SamplerMode::NoiseInjected, 1, alpha, false),
            &mut rec,
        )
        .unwrap();
        let mu = m.centroids().mean(1);
        for k in 0..2 {
            let expect = x0[k] - alpha * (x0[k] - mu[k]) + alpha * rec.1[k];
            assert!((x1[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_network_chain_is_stationary_under_noise_injection() {
        let spec = NetworkSpec::mlp(3, &[4], 2, Activation::Tanh, 0).unwrap();
        let p = ParameterVector::zeros(&spec);
        let m = GmmcModel::new(
            Network::new(spec, p).unwrap(),
            generate_opt_means(2, 2, 1.0).unwrap(),
        )
        .unwrap();
        let x0 = [0.1, -0.9, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = noise_injected_sample(
            &m,
            &x0,
            0,
            &cfg(SamplerMode::NoiseInjected, 10, 1.0, false),
            &mut rng,
        )
        .unwrap();
        assert_eq!(x, x0.to_vec());
    }

    #[test]
    fn noiseless_sgld_with_double_step_is_one_staged_step() {
        let m = random_model(8);
        let x0 = [0.3, 0.3, -0.1];
        let alpha = 0.25;
        let sgld = sgld_sample(
            &m,
            &x0,
            1,
            &cfg(SamplerMode::Sgld, 1, 2.0 * alpha, false),
            &mut ZeroNoise,
        )
        .unwrap();
        let staged = staged_step(&m, &x0, m.centroids().mean(1), alpha, 1.0).unwrap();
        for k in 0..3 {
            assert!((sgld[k] - staged[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn sgld_noise_has_step_size_std() {
        let m = random_model(11);
        let alpha = 0.05;
        let c = cfg(SamplerMode::Sgld, 1, alpha, false);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut init = ChaCha8Rng::seed_from_u64(13);
        let mut resid = Vec::new();
        for _ in 0..10_000 {
            let x0: Vec<f64> = (0..3).map(|_| init.random_range(-1.0..1.0)).collect();
            let x1 = sgld_sample(&m, &x0, 0, &c, &mut rng).unwrap();
            let g = energy_grad_input(&m, &x0, 0, 1.0).unwrap();
            for k in 0..3 {
                resid.push(x1[k] - x0[k] + 0.5 * alpha * g[k]);
            }
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - alpha).abs() < 0.05 * alpha, "std {std}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let m = identity_model(2, 2, 1.0);
        let c = cfg(SamplerMode::Staged, 3, f64::MAX, false);
        let err = staged_sample(&m, &[0.9, 0.9], 0, &c, &mut ZeroNoise).unwrap_err();
        assert!(matches!(err, Error::ChainDiverged { step } if step >= 1));
    }

    #[test]
    fn sampler_argument_errors() {
        let m = identity_model(2, 2, 1.0);
        let good = cfg(SamplerMode::Staged, 1, 0.1, true);
        assert!(staged_sample(&m, &[0.0], 0, &good, &mut ZeroNoise).is_err());
        assert!(staged_sample(&m, &[0.0, 0.0], 2, &good, &mut ZeroNoise).is_err());
        let zero_steps = cfg(SamplerMode::Staged, 0, 0.1, true);
        assert!(staged_sample(&m, &[0.0, 0.0], 0, &zero_steps, &mut ZeroNoise).is_err());
        let est = SamplerConfig {
            gamma2_mode: Gamma2Mode::Estimated,
            ..good
        };
        assert!(matches!(
            staged_sample(&m, &[0.0, 0.0], 0, &est, &mut ZeroNoise),
            Err(Error::GammaUnestimated)
        ));
    }

    #[test]
    fn clipping_keeps_chains_in_domain() {
        let m = random_model(21);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [
            SamplerMode::Staged,
            SamplerMode::NoiseInjected,
            SamplerMode::Sgld,
        ] {
            let x = sample_chain(
                &m,
                &[0.9, -0.9, 0.0],
                1,
                &cfg(mode, 20, 5.0, true),
                &mut rng,
            )
            .unwrap();
            assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn buffer_reinit_extremes() {
        let mut always = ReplayBuffer::new(10, 2, 1.0, 0).unwrap();
        always.put(&[0.1, 0.2], 1, None).unwrap();
        for _ in 0..100 {
            assert!(!always.init_chain(3).unwrap().from_buffer());
        }
        let mut never = ReplayBuffer::new(10, 2, 0.0, 0).unwrap();
        assert!(!never.init_chain(3).unwrap().from_buffer());
        never.put(&[0.1, 0.2], 1, None).unwrap();
        for _ in 0..100 {
            let s = never.init_chain(3).unwrap();
            assert_eq!(s.slot, Some(0));
            assert_eq!(s.x, vec![0.1, 0.2]);
            assert_eq!(s.label, 1);
        }
    }

    #[test]
    fn buffer_fresh_rate_matches_rho() {
        let mut buf = ReplayBuffer::new(10, 1, 0.025, 77).unwrap();
        buf.put(&[0.0], 0, None).unwrap();
        let n = 100_000;
        let fresh = (0..n)
            .filter(|_| !buf.init_chain(2).unwrap().from_buffer())
            .count();
        let frac = fresh as f64 / n as f64;
        assert!((0.020..=0.030).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn fresh_starts_are_uniform_in_box() {
        let mut buf = ReplayBuffer::new(10, 4, 1.0, 5).unwrap();
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            let s = buf.init_chain(3).unwrap();
            assert!(s.x.iter().all(|v| (-1.0..=1.0).contains(v)));
            seen[s.label] += 1;
        }
        assert!(seen.iter().all(|&c| c > 900));
    }

    #[test]
    fn buffer_put_semantics() {
        let mut buf = ReplayBuffer::new(3, 2, 0.5, 1).unwrap();
        buf.put(&[0.1, 0.1], 0, None).unwrap();
        buf.put(&[0.2, 0.2], 1, None).unwrap();
        assert_eq!(buf.len(), 2);
        buf.put(&[0.5, 2.0], 1, Some(0)).unwrap();
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.entry(0), (&[0.5, 1.0][..], 1));
        buf.put(&[0.3, 0.3], 0, None).unwrap();
        assert_eq!(buf.len(), 3);
        buf.put(&[0.4, 0.4], 0, None).unwrap();
        assert_eq!(buf.len(), 3);
        assert!(buf.entries().any(|(x, _)| x == [0.4, 0.4]));
        assert!(buf.put(&[0.0, 0.0], 0, Some(7)).is_err());
        assert!(buf.put(&[0.0], 0, None).is_err());
    }

    #[test]
    fn eviction_is_uniform_over_slots() {
        let cap = 10;
        let trials = 20_000;
        let mut counts = vec![0usize; cap];
        let mut buf = ReplayBuffer::new(cap, 1, 0.0, 3).unwrap();
        for k in 0..cap {
            buf.put(&[k as f64 / 10.0], 0, None).unwrap();
        }
        for _ in 0..trials {
            let before: Vec<f64> = buf.entries().map(|(x, _)| x[0]).collect();
            buf.put(&[-0.5], 1, None).unwrap();
            let slot = (0..cap).find(|&s| buf.entry(s).1 == 1).unwrap();
            counts[slot] += 1;
            buf.put(&[before[slot]], 0, Some(slot)).unwrap();
        }
        let p = 1.0 / cap as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - trials as f64 * p).abs() < 4.0 * sigma,
                "count {c}"
            );
        }
    }

    #[test]
    fn seeded_buffers_reproduce_draws() {
        let mut a = ReplayBuffer::new(5, 3, 0.3, 42).unwrap();
        let mut b = ReplayBuffer::new(5, 3, 0.3, 42).unwrap();
        for _ in 0..50 {
            let sa = a.init_chain(4).unwrap();
            let sb = b.init_chain(4).unwrap();
            assert_eq!(sa, sb);
            a.put(&sa.x, sa.label, sa.slot).unwrap();
            b.put(&sb.x, sb.label, sb.slot).unwrap();
        }
        let restored = ReplayBuffer::restore(
            5,
            3,
            0.3,
            42,
            a.rng_word_pos(),
            a.entries().map(|(x, y)| (x.to_vec(), y)).collect(),
        )
        .unwrap();
        assert_eq!(restored, a);
    }
}
