//! Analytic gradients against central finite differences.

mod common;

use std::time::Instant;

use common::{random_input, random_model, rng};
use gmmc::model::{Gamma2Mode, GmmcModel};
use gmmc::net::Activation;
use gmmc::sampler::energy_grad_input;
use gmmc::train::{generative_loss_and_grad, mean_energy_and_grad, SampledBatch};
use rand::Rng;

const H: f64 = 1e-5;
const MODELS: u64 = 50;

/// `max |a - b| / max(max |b|, 1e-8)`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

fn central_diff_params(model: &GmmcModel, f: impl Fn(&GmmcModel) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    (0..model.net().params().len())
        .map(|i| {
            let orig = m.net().params().as_slice()[i];
            m.net_mut().params_mut().as_mut_slice()[i] = orig + H;
            let up = f(&m);
            m.net_mut().params_mut().as_mut_slice()[i] = orig - H;
            let down = f(&m);
            m.net_mut().params_mut().as_mut_slice()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn central_diff_input(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

const SMOOTH: [Activation; 2] = [Activation::Tanh, Activation::Identity];

#[test]
fn energy_parameter_and_input_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut r = rng(11);
    for case in 0..MODELS {
        let model = random_model(&mut r, &SMOOTH, 0.8);
        let gamma2 = r.random_range(0.5..2.0);
        let model = model.with_gamma2(gamma2).unwrap();
        let x = random_input(&mut r, model.input_dim());
        let y = r.random_range(0..model.num_classes());

        // Training uses unit gamma.
        let (_, g) = mean_energy_and_grad(&model, [(x.as_slice(), y)], 1).unwrap();
        let fd = central_diff_params(&model, |m| m.energy(&x, y, Gamma2Mode::Unit).unwrap());
        let e = rel_err(g.as_slice(), &fd);
        assert!(e < 1e-4, "case {case}: parameter gradient rel err {e}");

        for mode in [Gamma2Mode::Unit, Gamma2Mode::Estimated] {
            let g2 = model.resolve_gamma2(mode).unwrap();
            let gx = energy_grad_input(&model, &x, y, g2).unwrap();
            let fd = central_diff_input(&x, |p| model.energy(p, y, mode).unwrap());
            let e = rel_err(&gx, &fd);
            assert!(
                e < 1e-4,
                "case {case}: input gradient rel err {e} ({mode:?})"
            );
        }
    }
    assert!(
        start.elapsed().as_secs_f64() < 30.0,
        "took {:?}",
        start.elapsed()
    );
}

#[test]
fn relu_gradients_match_away_from_kinks() {
    let mut r = rng(12);
    let mut checked = 0;
    while checked < 20 {
        let model = random_model(&mut r, &[Activation::Relu], 0.8);
        let x = random_input(&mut r, model.input_dim());
        let y = r.random_range(0..model.num_classes());
        let gx = energy_grad_input(&model, &x, y, 1.0).unwrap();
        let fd = central_diff_input(&x, |p| model.energy(p, y, Gamma2Mode::Unit).unwrap());
        // A kink inside the stencil shows up as a one-sided mismatch; resample.
        let fd_half: Vec<f64> = {
            let f = |p: &[f64]| model.energy(p, y, Gamma2Mode::Unit).unwrap();
            (0..x.len())
                .map(|i| {
                    let mut p = x.clone();
                    p[i] += H / 2.0;
                    let up = f(&p);
                    p[i] = x[i] - H / 2.0;
                    (up - f(&p)) / H
                })
                .collect()
        };
        if rel_err(&fd, &fd_half) > 1e-6 {
            continue;
        }
        let e = rel_err(&gx, &fd);
        assert!(e < 1e-4, "relu input gradient rel err {e}");
        checked += 1;
    }
}

#[test]
fn generative_loss_gradient_matches_finite_differences() {
    let mut r = rng(13);
    for case in 0..20 {
        let model = random_model(&mut r, &SMOOTH, 0.8);
        let c = model.num_classes();
        let d = model.input_dim();
        let real: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| (random_input(&mut r, d), r.random_range(0..c)))
            .collect();
        let sampled = SampledBatch {
            xs: (0..3).map(|_| random_input(&mut r, d)).collect(),
            labels: (0..3).map(|_| r.random_range(0..c)).collect(),
        };
        let beta = r.random_range(0.0..1.0);
        let real_refs: Vec<(&[f64], usize)> =
            real.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (lr, ls, g) = generative_loss_and_grad(&model, &real_refs, &sampled, beta).unwrap();

        let loss = |m: &GmmcModel| {
            let mean = |pairs: &mut dyn Iterator<Item = (&[f64], usize)>, n: usize| {
                pairs
                    .map(|(x, y)| m.energy(x, y, Gamma2Mode::Unit).unwrap())
                    .sum::<f64>()
                    / n as f64
            };
            let er = mean(&mut real_refs.iter().copied(), real_refs.len());
            let es = mean(
                &mut sampled
                    .xs
                    .iter()
                    .map(Vec::as_slice)
                    .zip(sampled.labels.iter().copied()),
                sampled.xs.len(),
            );
            er - beta * es
        };
        assert!((lr - beta * ls - loss(&model)).abs() < 1e-9 * (1.0 + loss(&model).abs()));
        let fd = central_diff_params(&model, loss);
        let e = rel_err(g.as_slice(), &fd);
        assert!(e < 1e-4, "case {case}: generative gradient rel err {e}");
    }
}

#[test]
fn matching_sampled_and_real_batches_cancel_at_unit_beta() {
    let mut r = rng(14);
    for _ in 0..10 {
        let model = random_model(&mut r, &SMOOTH, 0.8);
        let c = model.num_classes();
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| random_input(&mut r, model.input_dim()))
            .collect();
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..c)).collect();
        let real: Vec<(&[f64], usize)> = xs
            .iter()
            .map(Vec::as_slice)
            .zip(labels.iter().copied())
            .collect();
        let sampled = SampledBatch {
            xs: xs.clone(),
            labels,
        };
        let (lr, ls, g) = generative_loss_and_grad(&model, &real, &sampled, 1.0).unwrap();
        assert_eq!(lr, ls);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }
}
