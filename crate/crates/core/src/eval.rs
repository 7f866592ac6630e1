//! Calibration error, AUROC over out-of-distribution scores, and
//! gradient-based adversarial attacks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::model::{softmax_neg, Gamma2Mode, GmmcModel};

pub const DEFAULT_BUCKETS: usize = 20;
pub const DEFAULT_PGD_STEPS: usize = 40;
pub const DEFAULT_HALVINGS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInput {
    pub confidences: Vec<f64>,
    pub correct: Vec<bool>,
    pub num_buckets: usize,
}

impl CalibrationInput {
    pub fn new(confidences: Vec<f64>, correct: Vec<bool>) -> Self {
        CalibrationInput {
            confidences,
            correct,
            num_buckets: DEFAULT_BUCKETS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_buckets == 0 {
            return Err(Error::InvalidArgument(
                "bucket count must be positive".into(),
            ));
        }
        if self.confidences.len() != self.correct.len() {
            return Err(Error::Dimension {
                what: "correctness flags",
                expected: self.confidences.len(),
                got: self.correct.len(),
            });
        }
        if self.confidences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(c) = self.confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Index of the bucket `[m/M, (m+1)/M)` holding `c`; the last bucket is closed.
pub fn bucket_index(c: f64, num_buckets: usize) -> usize {
    let m = num_buckets as f64;
    let mut k = ((c * m).floor() as usize).min(num_buckets - 1);
    // Compare against the same edges the bucket definition uses.
    while k > 0 && c < k as f64 / m {
        k -= 1;
    }
    while k + 1 < num_buckets && c >= (k + 1) as f64 / m {
        k += 1;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStat {
    pub count: usize,
    /// Fraction correct; 0 for an empty bucket.
    pub acc: f64,
    /// Mean confidence; 0 for an empty bucket.
    pub conf: f64,
}

pub fn calibration_buckets(ci: &CalibrationInput) -> Result<Vec<BucketStat>> {
    ci.validate()?;
    let m = ci.num_buckets;
    let mut counts = vec![0usize; m];
    let mut hits = vec![0usize; m];
    let mut conf = vec![0.0; m];
    for (&c, &ok) in ci.confidences.iter().zip(&ci.correct) {
        let k = bucket_index(c, m);
        counts[k] += 1;
        hits[k] += ok as usize;
        conf[k] += c;
    }
    Ok((0..m)
        .map(|k| match counts[k] {
            0 => BucketStat {
                count: 0,
                acc: 0.0,
                conf: 0.0,
            },
            n => BucketStat {
                count: n,
                acc: hits[k] as f64 / n as f64,
                conf: conf[k] / n as f64,
            },
        })
        .collect())
}

/// `sum_m |B_m|/n * |acc(B_m) - conf(B_m)|`.
pub fn ece(ci: &CalibrationInput) -> Result<f64> {
    let buckets = calibration_buckets(ci)?;
    let n = ci.confidences.len() as f64;
    Ok(buckets
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.acc - b.conf).abs())
        .sum())
}

/// Max-posterior confidences and correctness of the model on `ds`.
pub fn calibration_input(
    model: &GmmcModel,
    ds: &LabeledDataset,
    num_buckets: usize,
) -> Result<CalibrationInput> {
    let mut confidences = Vec::with_capacity(ds.len());
    let mut correct = Vec::with_capacity(ds.len());
    for (x, y) in ds.iter() {
        let p = model.posterior(x)?;
        confidences.push(p.iter().copied().fold(0.0, f64::max).min(1.0));
        correct.push(model.classify(x)? == y);
    }
    Ok(CalibrationInput {
        confidences,
        correct,
        num_buckets,
    })
}

/// Mann-Whitney statistic `(#{in > out} + #{in = out}/2) / (n_in * n_out)`,
/// counted exactly in integers.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if scores_in.iter().chain(scores_out).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut out = scores_out.to_vec();
    out.sort_by(f64::total_cmp);
    let mut twice_wins: u128 = 0;
    for &s in scores_in {
        let below = out.partition_point(|&o| o < s);
        let not_above = out.partition_point(|&o| o <= s);
        twice_wins += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * scores_in.len() as u128 * scores_out.len() as u128;
    Ok(twice_wins as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFn {
    Logpx,
    Predictive,
    ApproxMass,
}

impl ScoreFn {
    pub const ALL: [ScoreFn; 3] = [ScoreFn::Logpx, ScoreFn::Predictive, ScoreFn::ApproxMass];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFn::Logpx => "logpx",
            ScoreFn::Predictive => "predictive",
            ScoreFn::ApproxMass => "approx_mass",
        }
    }

    pub fn score(self, model: &GmmcModel, x: &[f64]) -> Result<f64> {
        match self {
            ScoreFn::Logpx => model.logpx_score(x),
            ScoreFn::Predictive => model.predictive_score(x),
            ScoreFn::ApproxMass => model.approx_mass_score(x),
        }
    }
}

impl std::str::FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFn::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown score function {s:?}")))
    }
}

impl std::fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Counts of two score sets over shared, equally spaced bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts_in: Vec<usize>,
    pub counts_out: Vec<usize>,
}

impl Histogram {
    pub fn shared(scores_in: &[f64], scores_out: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("bin count must be positive".into()));
        }
        let all = scores_in.iter().chain(scores_out);
        if all.clone().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite score".into()));
        }
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = match (lo.is_finite(), lo < hi) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let count = |scores: &[f64]| {
            let mut c = vec![0usize; bins];
            for &s in scores {
                let k = edges[1..bins].partition_point(|&e| e <= s);
                c[k] += 1;
            }
            c
        };
        Ok(Histogram {
            counts_in: count(scores_in),
            counts_out: count(scores_out),
            edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodResult {
    pub score: ScoreFn,
    pub auroc: f64,
    pub scores_in: Vec<f64>,
    pub scores_out: Vec<f64>,
    pub histogram: Histogram,
}

/// Scores both sets with `score` and reports AUROC with in-distribution as
/// the positive class.
pub fn ood_evaluate(
    model: &GmmcModel,
    in_set: &LabeledDataset,
    out_set: &LabeledDataset,
    score: ScoreFn,
    bins: usize,
) -> Result<OodResult> {
    model.resolve_gamma2(Gamma2Mode::Estimated)?;
    let eval = |ds: &LabeledDataset| -> Result<Vec<f64>> {
        ds.iter().map(|(x, _)| score.score(model, x)).collect()
    };
    let scores_in = eval(in_set)?;
    let scores_out = eval(out_set)?;
    Ok(OodResult {
        score,
        auroc: auroc(&scores_in, &scores_out)?,
        histogram: Histogram::shared(&scores_in, &scores_out, bins)?,
        scores_in,
        scores_out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl AttackConfig {
    /// 40-step L-infinity PGD with step `epsilon / 10` and no random start.
    pub fn linf(epsilon: f64) -> Self {
        AttackConfig {
            norm: Norm::Linf,
            epsilon,
            steps: DEFAULT_PGD_STEPS,
            step_size: epsilon / 10.0,
            random_start: false,
        }
    }

    /// L2 PGD with step `2.5 * epsilon / steps`.
    pub fn l2(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            norm: Norm::L2,
            epsilon,
            steps,
            step_size: 2.5 * epsilon / steps.max(1) as f64,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument(
                "attack steps must be positive".into(),
            ));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack step size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Input gradient of the cross-entropy `-log p(y|x)` under estimated `gamma^2`.
pub fn cross_entropy_grad(model: &GmmcModel, x: &[f64], y: usize) -> Result<Vec<f64>> {
    model.centroids().check_class(y)?;
    let gamma2 = model.resolve_gamma2(Gamma2Mode::Estimated)?;
    let trace = model.net().trace(x)?;
    let phi = trace.output();
    let d2 = model.centroids().sq_distances(phi)?;
    let energies: Vec<f64> = d2.iter().map(|v| v / (2.0 * gamma2)).collect();
    let post = softmax_neg(&energies);
    // d/dphi [E_y + logsumexp(-E)] = (sum_k p_k mu_k - mu_y) / gamma^2
    let mut upstream: Vec<f64> = model
        .centroids()
        .mean(y)
        .iter()
        .map(|m| -m / gamma2)
        .collect();
    for (k, p) in post.iter().enumerate() {
        for (u, m) in upstream.iter_mut().zip(model.centroids().mean(k)) {
            *u += p * m / gamma2;
        }
    }
    let g = model
        .net()
        .backward(&trace, &upstream, None, true)?
        .expect("input gradient requested");
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(g)
}

/// A positive multiple of `cross_entropy_grad` that survives softmax
/// saturation. The true gradient is `sum_{k != y} p_k (mu_k - mu_y) / gamma^2`;
/// renormalizing the weights over `k != y` keeps them representable when
/// every `p_k` underflows, without changing the direction.
pub fn attack_direction(model: &GmmcModel, x: &[f64], y: usize) -> Result<Vec<f64>> {
    model.centroids().check_class(y)?;
    let gamma2 = model.resolve_gamma2(Gamma2Mode::Estimated)?;
    let trace = model.net().trace(x)?;
    let d2 = model.centroids().sq_distances(trace.output())?;
    let others: Vec<usize> = (0..d2.len()).filter(|&k| k != y).collect();
    let energies: Vec<f64> = others.iter().map(|&k| d2[k] / (2.0 * gamma2)).collect();
    let weights = softmax_neg(&energies);
    let mu_y = model.centroids().mean(y);
    let mut upstream = vec![0.0; mu_y.len()];
    for (&k, w) in others.iter().zip(&weights) {
        for ((u, m), my) in upstream.iter_mut().zip(model.centroids().mean(k)).zip(mu_y) {
            *u += w * (m - my);
        }
    }
    let g = model
        .net()
        .backward(&trace, &upstream, None, true)?
        .expect("input gradient requested");
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(g)
}

/// Per-coordinate bounds of the intersection of the L-infinity ball around
/// `x0` with `[-1, 1]`, tightened so `|b - x0| <= eps` holds in floating point.
fn linf_bounds(x0: f64, eps: f64) -> (f64, f64) {
    let mut lo = x0 - eps;
    while x0 - lo > eps {
        lo = lo.next_up();
    }
    let mut hi = x0 + eps;
    while hi - x0 > eps {
        hi = hi.next_down();
    }
    (lo.max(-1.0), hi.min(1.0))
}

fn project_l2(x: &mut [f64], x0: &[f64], eps: f64) {
    let norm = x
        .iter()
        .zip(x0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if norm > eps {
        let s = eps / norm;
        for (a, b) in x.iter_mut().zip(x0) {
            *a = b + (*a - b) * s;
        }
    }
    for a in x.iter_mut() {
        *a = a.clamp(-1.0, 1.0);
    }
}

fn check_domain(x: &[f64]) -> Result<()> {
    match x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::InvalidArgument(format!(
            "input value {v} outside [-1, 1]"
        ))),
        None => Ok(()),
    }
}

/// Projected gradient ascent on the cross-entropy at `y_true`. L-infinity
/// steps follow the gradient sign, L2 steps the normalized gradient; both
/// use `attack_direction`. L2 attacks stop as soon as the point is
/// misclassified.
pub fn pgd_attack<R: RngCore + ?Sized>(
    model: &GmmcModel,
    x: &[f64],
    y_true: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dim("attack input", model.input_dim(), x.len())?;
    check_domain(x)?;
    model.centroids().check_class(y_true)?;
    model.resolve_gamma2(Gamma2Mode::Estimated)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let eps = cfg.epsilon;
    let mut adv = x.to_vec();
    match cfg.norm {
        Norm::Linf => {
            let bounds: Vec<(f64, f64)> = x.iter().map(|&v| linf_bounds(v, eps)).collect();
            if cfg.random_start {
                for (a, &(lo, hi)) in adv.iter_mut().zip(&bounds) {
                    *a = rng.random_range(lo..=hi);
                }
            }
            for _ in 0..cfg.steps {
                let g = attack_direction(model, &adv, y_true)?;
                for ((a, gi), &(lo, hi)) in adv.iter_mut().zip(&g).zip(&bounds) {
                    let sign = if *gi > 0.0 {
                        1.0
                    } else if *gi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *a = (*a + cfg.step_size * sign).clamp(lo, hi);
                }
            }
        }
        Norm::L2 => {
            if cfg.random_start {
                let dir: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    let r = eps * rng.random::<f64>();
                    for (a, d) in adv.iter_mut().zip(&dir) {
                        *a += r * d / n;
                    }
                    project_l2(&mut adv, x, eps);
                }
            }
            for _ in 0..cfg.steps {
                if model.classify(&adv)? != y_true {
                    break;
                }
                let g = attack_direction(model, &adv, y_true)?;
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    break;
                }
                for (a, gi) in adv.iter_mut().zip(&g) {
                    *a += cfg.step_size * gi / n;
                }
                project_l2(&mut adv, x, eps);
            }
        }
    }
    Ok(adv)
}

/// Fraction of `ds` still classified correctly after `pgd_attack`.
pub fn robust_accuracy(
    model: &GmmcModel,
    ds: &LabeledDataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for (x, y) in ds.iter() {
        let adv = pgd_attack(model, x, y, cfg, &mut rng)?;
        correct += (model.classify(&adv)? == y) as usize;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Robust accuracy at each of `epsilons` (ascending). An example counts as
/// broken at `eps` if an attack at any budget up to `eps` succeeded, since
/// every smaller ball lies inside the larger one.
pub fn robustness_curve(
    model: &GmmcModel,
    ds: &LabeledDataset,
    epsilons: &[f64],
    make_cfg: impl Fn(f64) -> AttackConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if epsilons.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "epsilons must be strictly increasing".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut broken = vec![false; ds.len()];
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = make_cfg(eps);
        for (i, (x, y)) in ds.iter().enumerate() {
            if !broken[i] {
                let adv = pgd_attack(model, x, y, &cfg, &mut rng)?;
                broken[i] = model.classify(&adv)? != y;
            }
        }
        let robust = broken.iter().filter(|b| !**b).count();
        out.push((eps, robust as f64 / ds.len() as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinL2Config {
    /// Largest budget tried; failing here means no adversarial point was found.
    pub max_epsilon: f64,
    pub halvings: usize,
    pub steps: usize,
}

impl Default for MinL2Config {
    fn default() -> Self {
        MinL2Config {
            max_epsilon: 4.0,
            halvings: DEFAULT_HALVINGS,
            steps: DEFAULT_PGD_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinL2Result {
    pub x_adv: Vec<f64>,
    pub l2: f64,
    pub epsilon: f64,
}

/// Bisects the L2 budget over L2 PGD, keeping the smallest-norm successful
/// adversarial point seen. `None` when the largest budget fails.
pub fn min_l2_perturbation(
    model: &GmmcModel,
    x: &[f64],
    y_true: usize,
    cfg: &MinL2Config,
) -> Result<Option<MinL2Result>> {
    if !(cfg.max_epsilon > 0.0 && cfg.max_epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "maximum epsilon must be > 0, got {}",
            cfg.max_epsilon
        )));
    }
    if model.classify(x)? != y_true {
        return Err(Error::Precondition(format!(
            "input is already misclassified (true class {y_true})"
        )));
    }
    let mut rng = ZeroRng;
    let mut attempt = |eps: f64| -> Result<Option<MinL2Result>> {
        let adv = pgd_attack(
            model,
            x,
            y_true,
            &AttackConfig::l2(eps, cfg.steps),
            &mut rng,
        )?;
        if model.classify(&adv)? == y_true {
            return Ok(None);
        }
        let l2 = adv
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(Some(MinL2Result {
            x_adv: adv,
            l2,
            epsilon: eps,
        }))
    };
    let mut best = match attempt(cfg.max_epsilon)? {
        Some(r) => r,
        None => return Ok(None),
    };
    let (mut lo, mut hi) = (0.0, cfg.max_epsilon);
    for _ in 0..cfg.halvings {
        let mid = 0.5 * (lo + hi);
        match attempt(mid)? {
            Some(r) => {
                if r.l2 < best.l2 {
                    best = r;
                }
                hi = mid;
            }
            None => lo = mid,
        }
    }
    Ok(Some(best))
}

/// Attacks without random starts never draw; this keeps the type honest.
struct ZeroRng;

impl RngCore for ZeroRng {
    fn next_u32(&mut self) -> u32 {
        0
    }

    fn next_u64(&mut self) -> u64 {
        0
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}
