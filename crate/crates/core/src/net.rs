//! Small fully-connected feature extractor with hand-written reverse-mode
//! gradients.
//!
//! Parameters live in one flat `f64` buffer. Layer `l` owns a row-major
//! `fan_out x fan_in` weight block followed by its `fan_out` bias entries.
//! Hidden layers apply an activation; the last layer is linear.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

/// Architecture of the feature extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input_dim: usize,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    init_seed: u64,
}

impl NetworkSpec {
    /// `widths` lists every layer's output size, ending with the feature
    /// dimension; `activations` has one entry per hidden layer.
    pub fn new(
        input_dim: usize,
        widths: Vec<usize>,
        activations: Vec<Activation>,
        init_seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument(
                "input dimension must be positive".into(),
            ));
        }
        if widths.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        check_dim(
            "hidden-layer activations",
            widths.len() - 1,
            activations.len(),
        )?;
        Ok(NetworkSpec {
            input_dim,
            widths,
            activations,
            init_seed,
        })
    }

    /// MLP with the same activation on every hidden layer.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        activation: Activation,
        init_seed: u64,
    ) -> Result<Self> {
        let mut widths = hidden.to_vec();
        widths.push(feature_dim);
        Self::new(input_dim, widths, vec![activation; hidden.len()], init_seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::with_capacity(self.widths.len());
        let mut fan_in = self.input_dim;
        let mut offset = 0;
        for &fan_out in &self.widths {
            let w = offset..offset + fan_in * fan_out;
            let b = w.end..w.end + fan_out;
            offset = b.end;
            slots.push(LayerSlot {
                fan_in,
                fan_out,
                weights: w,
                bias: b,
            });
            fan_in = fan_out;
        }
        slots
    }

    pub fn num_params(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut n = 0;
        for &fan_out in &self.widths {
            n += fan_in * fan_out + fan_out;
            fan_in = fan_out;
        }
        n
    }

    fn activation(&self, layer: usize) -> Option<Activation> {
        self.activations.get(layer).copied()
    }
}

/// Where one layer's weights and biases sit in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Flat parameter (or gradient) buffer with its per-layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<LayerSlot>,
}

impl ParameterVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParameterVector {
            values: vec![0.0; spec.num_params()],
            layout: spec.layout(),
        }
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector", spec.num_params(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(ParameterVector {
            values,
            layout: spec.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layout[layer].weights.clone()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layout[layer].bias.clone()]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout[layer].weights.clone();
        &mut self.values[r]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout[layer].bias.clone();
        &mut self.values[r]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParameterVector) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }
}

/// Glorot-uniform weights, zero biases, seeded by `spec.init_seed`.
pub fn init_params(spec: &NetworkSpec) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut params = ParameterVector::zeros(spec);
    for l in 0..spec.num_layers() {
        let slot = &params.layout[l];
        let limit = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
        let range = slot.weights.clone();
        for w in &mut params.values[range] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    params
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is `x`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

/// A network spec paired with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: ParameterVector,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: ParameterVector) -> Result<Self> {
        check_dim("parameter vector", spec.num_params(), params.len())?;
        Ok(Network { spec, params })
    }

    pub fn initialized(spec: NetworkSpec) -> Self {
        let params = init_params(&spec);
        Network { spec, params }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn zero_grad(&self) -> ParameterVector {
        ParameterVector::zeros(&self.spec)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.spec.input_dim, x.len())?;
        let mut a = x.to_vec();
        for l in 0..self.spec.num_layers() {
            let mut z = self.affine(l, &a);
            if let Some(act) = self.spec.activation(l) {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        check_dim("network input", self.spec.input_dim, x.len())?;
        let n = self.spec.num_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut a = x.to_vec();
        for l in 0..n {
            let z = self.affine(l, &a);
            let out = match self.spec.activation(l) {
                Some(act) => z.iter().map(|&v| act.apply(v)).collect(),
                None => z.clone(),
            };
            inputs.push(std::mem::replace(&mut a, out));
            pre.push(z);
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: a,
        })
    }

    fn affine(&self, layer: usize, a: &[f64]) -> Vec<f64> {
        let slot = &self.params.layout[layer];
        let w = &self.params.values[slot.weights.clone()];
        let b = &self.params.values[slot.bias.clone()];
        w.chunks_exact(slot.fan_in)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>())
            .collect()
    }

    /// Reverse pass for `upstream^T phi(x)`.
    ///
    /// Adds `scale * d/dtheta` into `param_grad` when given, and returns the
    /// input gradient when `want_input` is set.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        mut param_grad: Option<(&mut ParameterVector, f64)>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let n = self.spec.num_layers();
        let mut delta = upstream.to_vec();
        for l in (0..n).rev() {
            if let Some(act) = self.spec.activation(l) {
                let z = &trace.pre[l];
                // The output of hidden layer l is the input of layer l + 1.
                let a = &trace.inputs[l + 1];
                for k in 0..delta.len() {
                    delta[k] *= act.derivative(z[k], a[k]);
                }
            }
            let slot = &self.params.layout[l];
            let input = &trace.inputs[l];
            if let Some((grad, scale)) = param_grad.as_mut() {
                let s = *scale;
                let gw = &mut grad.values[slot.weights.clone()];
                for (row, &dk) in gw.chunks_exact_mut(slot.fan_in).zip(&delta) {
                    let sd = s * dk;
                    if sd != 0.0 {
                        for (g, &xi) in row.iter_mut().zip(input) {
                            *g += sd * xi;
                        }
                    }
                }
                let gb = &mut grad.values[slot.bias.clone()];
                for (g, &dk) in gb.iter_mut().zip(&delta) {
                    *g += s * dk;
                }
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            let w = &self.params.values[slot.weights.clone()];
            let mut next = vec![0.0; slot.fan_in];
            for (row, &dk) in w.chunks_exact(slot.fan_in).zip(&delta) {
                if dk != 0.0 {
                    for (nx, &wi) in next.iter_mut().zip(row) {
                        *nx += dk * wi;
                    }
                }
            }
            delta = next;
        }
        Ok(Some(delta))
    }

    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<ParameterVector> {
        let trace = self.trace(x)?;
        let mut g = self.zero_grad();
        self.backward(&trace, upstream, Some((&mut g, 1.0)), false)?;
        Ok(g)
    }

    pub fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(x)?;
        Ok(self
            .backward(&trace, upstream, None, true)?
            .expect("input gradient requested"))
    }
}

/// `phi(x)` for a bare spec/parameter pair.
pub fn forward(params: &ParameterVector, spec: &NetworkSpec, x: &[f64]) -> Result<Vec<f64>> {
    Network::new(spec.clone(), params.clone())?.forward(x)
}

/// `d(upstream^T phi(x)) / dtheta`.
pub fn grad_params(
    params: &ParameterVector,
    spec: &NetworkSpec,
    x: &[f64],
    upstream: &[f64],
) -> Result<ParameterVector> {
    Network::new(spec.clone(), params.clone())?.grad_params(x, upstream)
}

/// `d(upstream^T phi(x)) / dx`.
pub fn grad_input(
    params: &ParameterVector,
    spec: &NetworkSpec,
    x: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    Network::new(spec.clone(), params.clone())?.grad_input(x, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(d: usize) -> Network {
        let spec = NetworkSpec::new(d, vec![d], vec![], 0).unwrap();
        let mut p = ParameterVector::zeros(&spec);
        for i in 0..d {
            p.weights_mut(0)[i * d + i] = 1.0;
        }
        Network::new(spec, p).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(0, vec![2], vec![], 0).is_err());
        assert!(NetworkSpec::new(2, vec![], vec![], 0).is_err());
        assert!(NetworkSpec::new(2, vec![3, 0], vec![Activation::Tanh], 0).is_err());
        assert!(NetworkSpec::new(2, vec![3, 2], vec![], 0).is_err());
        let s = NetworkSpec::mlp(4, &[8, 6], 3, Activation::Relu, 1).unwrap();
        assert_eq!(s.num_params(), 4 * 8 + 8 + 8 * 6 + 6 + 6 * 3 + 3);
        assert_eq!(s.output_dim(), 3);
        let layout = s.layout();
        assert_eq!(layout.last().unwrap().bias.end, s.num_params());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let s = NetworkSpec::mlp(5, &[7], 3, Activation::Tanh, 42).unwrap();
        let a = init_params(&s);
        let b = init_params(&s);
        assert_eq!(a, b);
        for l in 0..2 {
            assert!(a.bias(l).iter().all(|&v| v == 0.0));
            let slot = &a.layout()[l];
            let lim = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            assert!(a.weights(l).iter().all(|w| w.abs() <= lim));
        }
        let other = NetworkSpec::mlp(5, &[7], 3, Activation::Tanh, 43).unwrap();
        assert_ne!(init_params(&other), a);
    }

    #[test]
    fn init_weight_mean_is_centered() {
        // Uniform(-L, L) has std L/sqrt(3); the mean of n draws has std L/sqrt(3n).
        let s = NetworkSpec::mlp(100, &[100], 100, Activation::Tanh, 7).unwrap();
        let p = init_params(&s);
        let w: Vec<f64> = (0..2).flat_map(|l| p.weights(l).to_vec()).collect();
        assert!(w.len() >= 10_000);
        let lim = (6.0f64 / 200.0).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sigma = lim / (3.0 * w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn identity_and_constant_networks() {
        let net = identity_net(3);
        let x = [0.3, -0.7, 0.1];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
        assert_eq!(
            net.grad_input(&x, &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );

        let spec = NetworkSpec::mlp(3, &[4], 2, Activation::Tanh, 0).unwrap();
        let mut p = ParameterVector::zeros(&spec);
        p.bias_mut(1).copy_from_slice(&[1.5, -2.0]);
        let net = Network::new(spec, p).unwrap();
        assert_eq!(net.forward(&x).unwrap(), vec![1.5, -2.0]);
        assert_eq!(net.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(net.grad_input(&x, &[1.0, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let spec = NetworkSpec::new(3, vec![2], vec![], 9).unwrap();
        let net = Network::initialized(spec);
        let x = [0.5, -1.0, 2.0];
        let u = [0.25, -3.0];
        let g = net.grad_params(&x, &u).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(g.weights(0)[i * 3 + j], u[i] * x[j]);
            }
        }
        assert_eq!(g.bias(0), &u);
        let z = net.grad_params(&x, &[0.0, 0.0]).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let spec = NetworkSpec::new(1, vec![1, 1], vec![Activation::Relu], 0).unwrap();
        let p = ParameterVector::from_values(&spec, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let net = Network::new(spec, p).unwrap();
        assert_eq!(net.grad_input(&[0.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(net.grad_input(&[0.5], &[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn dimension_errors() {
        let net = identity_net(2);
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.grad_input(&[1.0, 2.0], &[1.0]).is_err());
        assert!(net.grad_params(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn free_functions_match_methods() {
        let spec = NetworkSpec::mlp(4, &[5], 3, Activation::Tanh, 3).unwrap();
        let p = init_params(&spec);
        let net = Network::new(spec.clone(), p.clone()).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        let u = [1.0, -1.0, 0.5];
        assert_eq!(forward(&p, &spec, &x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(
            grad_input(&p, &spec, &x, &u).unwrap(),
            net.grad_input(&x, &u).unwrap()
        );
        assert_eq!(
            grad_params(&p, &spec, &x, &u).unwrap(),
            net.grad_params(&x, &u).unwrap()
        );
        assert_eq!(
            net.trace(&x).unwrap().output(),
            net.forward(&x).unwrap().as_slice()
        );
    }
}
