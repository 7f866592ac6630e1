//! Discriminative, generative and joint training loops.
//!
//! All training-time energies use unit `gamma^2`. The discriminative loss is
//! the batch mean of `E(x, y)`; the generative loss is
//! `mean E(x, y) - beta * mean E(x', y')` with the sampled `x'` held fixed.
//! `fit` estimates `gamma^2` on the training set once training finishes.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Gamma2Mode, GmmcModel};
use crate::net::ParameterVector;
use crate::optim::Adam;
use crate::sampler::{sample_chain, ReplayBuffer, SamplerConfig, SamplerMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Discriminative,
    Generative,
    Joint,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminative" | "dis" => Ok(TrainMode::Discriminative),
            "generative" | "gen" => Ok(TrainMode::Generative),
            "joint" => Ok(TrainMode::Joint),
            other => Err(Error::InvalidArgument(format!(
                "unknown training mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Discriminative => "discriminative",
            TrainMode::Generative => "generative",
            TrainMode::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// 1-based epochs after which the learning rate is multiplied by `lr_decay`.
    pub decay_epochs: Vec<usize>,
    pub beta: f64,
    /// First epoch (1-based) that runs generative steps in joint mode.
    pub joint_switch_epoch: usize,
    pub beta_ramp_epochs: usize,
    pub sampler: SamplerConfig,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Discriminative,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-4,
            lr_decay: 0.3,
            decay_epochs: Vec::new(),
            beta: 0.5,
            joint_switch_epoch: 1,
            beta_ramp_epochs: 5,
            sampler: SamplerConfig::default(),
            buffer_capacity: 10_000,
            reinit_prob: 0.025,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!(
                "lr decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing".into());
        }
        if self.decay_epochs.iter().any(|&e| e < 1 || e > self.epochs) {
            return bad(format!("decay epochs must lie in [1, {}]", self.epochs));
        }
        if self.mode == TrainMode::Joint && self.joint_switch_epoch < 1 {
            return bad("joint switch epoch is 1-based".into());
        }
        if self.mode != TrainMode::Discriminative {
            self.sampler.validate()?;
            if self.sampler.mode == SamplerMode::Sgld {
                return bad("generative training uses staged or noise-injected sampling".into());
            }
            if self.buffer_capacity == 0 {
                return bad("buffer capacity must be positive".into());
            }
            if !(0.0..=1.0).contains(&self.reinit_prob) {
                return bad(format!(
                    "reinit probability must lie in [0, 1], got {}",
                    self.reinit_prob
                ));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e < epoch).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }

    /// `beta` in effect during `epoch` (1-based); `None` means a purely
    /// discriminative epoch.
    pub fn beta_at(&self, epoch: usize) -> Option<f64> {
        match self.mode {
            TrainMode::Discriminative => None,
            TrainMode::Generative => Some(self.beta),
            TrainMode::Joint => joint_beta(
                epoch,
                self.joint_switch_epoch,
                self.beta_ramp_epochs,
                self.beta,
            ),
        }
    }
}

/// Linear ramp from 0 at the switch epoch to `beta` after `ramp` epochs.
pub fn joint_beta(epoch: usize, switch: usize, ramp: usize, beta: f64) -> Option<f64> {
    if epoch < switch {
        None
    } else if ramp == 0 {
        Some(beta)
    } else {
        let frac = ((epoch - switch) as f64 / ramp as f64).min(1.0);
        Some(beta * frac)
    }
}

/// Optimizer state plus the step counter used in diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub adam: Adam,
    pub lr: f64,
    pub epoch: usize,
    pub batch: usize,
}

impl OptState {
    pub fn new(model: &GmmcModel, lr: f64) -> Self {
        OptState {
            adam: Adam::new(model.net().params().len()),
            lr,
            epoch: 0,
            batch: 0,
        }
    }
}

/// Losses observed by one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_real: f64,
    pub loss_sampled: Option<f64>,
}

/// Mean unit-`gamma` energy of `(x, y)` pairs and its parameter gradient.
pub fn mean_energy_and_grad<'a, I>(
    model: &GmmcModel,
    batch: I,
    n: usize,
) -> Result<(f64, ParameterVector)>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let net = model.net();
    let mut grad = net.zero_grad();
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (x, y) in batch {
        model.centroids().check_class(y)?;
        let trace = net.trace(x)?;
        let mu = model.centroids().mean(y);
        let resid: Vec<f64> = trace.output().iter().zip(mu).map(|(f, m)| f - m).collect();
        total += 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
        net.backward(&trace, &resid, Some((&mut grad, inv_n)), false)?;
    }
    Ok((total * inv_n, grad))
}

fn apply_update(model: &mut GmmcModel, grad: &ParameterVector, opt: &mut OptState) -> Result<()> {
    let params = model.net_mut().params_mut();
    opt.adam
        .step(params.as_mut_slice(), grad.as_slice(), opt.lr);
    if !params.all_finite() {
        return Err(Error::NonFiniteParams {
            epoch: opt.epoch,
            batch: opt.batch,
        });
    }
    Ok(())
}

/// One Adam step on the mean energy of a labeled batch.
pub fn disc_step(
    model: &mut GmmcModel,
    batch: &[(&[f64], usize)],
    opt: &mut OptState,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (loss, grad) = mean_energy_and_grad(model, batch.iter().copied(), batch.len())?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: opt.epoch,
            batch: opt.batch,
        });
    }
    apply_update(model, &grad, opt)?;
    Ok(StepStats {
        loss_real: loss,
        loss_sampled: None,
    })
}

/// Chains drawn for one generative step, after sampling.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Initializes `n` chains from the buffer, runs the sampler on each, and
/// writes the results back.
pub fn draw_samples(
    model: &GmmcModel,
    buffer: &mut ReplayBuffer,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampledBatch> {
    let c = model.num_classes();
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let start = buffer.init_chain(c)?;
        let x = sample_chain(model, &start.x, start.label, cfg, rng)?;
        buffer.put(&x, start.label, start.slot)?;
        labels.push(start.label);
        xs.push(x);
    }
    Ok(SampledBatch { xs, labels })
}

/// Gradient of `mean E(real) - beta * mean E(sampled)` at fixed samples.
pub fn generative_loss_and_grad(
    model: &GmmcModel,
    real: &[(&[f64], usize)],
    sampled: &SampledBatch,
    beta: f64,
) -> Result<(f64, f64, ParameterVector)> {
    let (loss_real, mut grad) = mean_energy_and_grad(model, real.iter().copied(), real.len())?;
    let (loss_sampled, grad_sampled) = mean_energy_and_grad(
        model,
        sampled
            .xs
            .iter()
            .map(Vec::as_slice)
            .zip(sampled.labels.iter().copied()),
        sampled.xs.len(),
    )?;
    grad.axpy(-beta, &grad_sampled);
    Ok((loss_real, loss_sampled, grad))
}

/// One generative step: sample chains, then one Adam update on
/// `mean E(real) - beta * mean E(sampled)`.
pub fn gen_step(
    model: &mut GmmcModel,
    real: &[(&[f64], usize)],
    buffer: &mut ReplayBuffer,
    sampler: &SamplerConfig,
    beta: f64,
    opt: &mut OptState,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if real.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if sampler.mode == SamplerMode::Sgld {
        return Err(Error::InvalidArgument(
            "generative steps use staged or noise-injected sampling".into(),
        ));
    }
    let sampled = draw_samples(model, buffer, sampler, real.len(), rng)?;
    let (loss_real, loss_sampled, grad) = generative_loss_and_grad(model, real, &sampled, beta)?;
    let loss = loss_real - beta * loss_sampled;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: opt.epoch,
            batch: opt.batch,
        });
    }
    apply_update(model, &grad, opt)?;
    Ok(StepStats {
        loss_real,
        loss_sampled: Some(loss_sampled),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: TrainMode,
    /// `None` for discriminative epochs.
    pub beta: Option<f64>,
    pub lr: f64,
    pub loss_real: f64,
    pub loss_sampled: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
    /// Set on the final, partial record of an aborted run.
    pub diverged: bool,
    /// First generative epoch of a joint run.
    pub switch: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub switch_epoch: Option<usize>,
}

/// Training stopped early; the report covers the completed epochs.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub report: TrainReport,
    pub model: GmmcModel,
    pub buffer: Option<ReplayBuffer>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted after {} epochs: {}",
            self.report.epochs.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Outcome of a successful run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GmmcModel,
    pub report: TrainReport,
    pub buffer: Option<ReplayBuffer>,
}

/// Hook invoked after every completed epoch.
pub trait EpochObserver {
    fn on_epoch(
        &mut self,
        record: &EpochRecord,
        model: &GmmcModel,
        buffer: Option<&ReplayBuffer>,
    ) -> Result<()>;
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &GmmcModel, _: Option<&ReplayBuffer>) -> Result<()> {
        Ok(())
    }
}

impl<F> EpochObserver for F
where
    F: FnMut(&EpochRecord, &GmmcModel, Option<&ReplayBuffer>) -> Result<()>,
{
    fn on_epoch(
        &mut self,
        record: &EpochRecord,
        model: &GmmcModel,
        buffer: Option<&ReplayBuffer>,
    ) -> Result<()> {
        self(record, model, buffer)
    }
}

/// Joint mode is `fit` with the ramped `beta` schedule.
pub fn joint_train(
    model: GmmcModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    if cfg.mode != TrainMode::Joint {
        return Err(Box::new(TrainFailure {
            error: Error::InvalidArgument("joint_train requires joint mode".into()),
            report: TrainReport::default(),
            model,
            buffer: None,
        }));
    }
    fit(model, train, test, cfg, None, &mut ())
}

/// Runs the configured training mode for `cfg.epochs` epochs, then estimates
/// `gamma^2` on `train`. `buffer` resumes generative training from a saved
/// replay buffer.
pub fn fit(
    model: GmmcModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    buffer: Option<ReplayBuffer>,
    observer: &mut dyn EpochObserver,
) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    let mut model = model;
    let mut buffer = buffer;
    let mut report = TrainReport::default();
    let result = fit_inner(
        &mut model,
        &mut buffer,
        &mut report,
        train,
        test,
        cfg,
        observer,
    );
    match result {
        Ok(()) => Ok(TrainOutcome {
            model,
            report,
            buffer,
        }),
        Err(error) => Err(Box::new(TrainFailure {
            error,
            report,
            model,
            buffer,
        })),
    }
}

fn fit_inner(
    model: &mut GmmcModel,
    buffer: &mut Option<ReplayBuffer>,
    report: &mut TrainReport,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ds in [train, test] {
        crate::error::check_dim("dataset dimension", model.input_dim(), ds.dim())?;
        if ds.num_classes() > model.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "dataset {} has {} classes, model has {}",
                ds.name(),
                ds.num_classes(),
                model.num_classes()
            )));
        }
    }
    if cfg.mode != TrainMode::Discriminative && buffer.is_none() {
        *buffer = Some(ReplayBuffer::new(
            cfg.buffer_capacity,
            model.input_dim(),
            cfg.reinit_prob,
            cfg.seed ^ 0x0B0F_FE12,
        )?);
    }
    // Training runs in unit-gamma mode; any previous estimate is stale.
    model.clear_gamma2();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut opt = OptState::new(model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        opt.lr = cfg.lr_at(epoch);
        opt.epoch = epoch;
        let beta = cfg.beta_at(epoch);
        let switch = cfg.mode == TrainMode::Joint && epoch == cfg.joint_switch_epoch;
        if switch {
            report.switch_epoch = Some(epoch);
        }
        order.shuffle(&mut shuffle_rng);
        let mut sum_real = 0.0;
        let mut sum_sampled = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            opt.batch = b;
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (train.input(i), train.label(i)))
                .collect();
            let step = match beta {
                None => disc_step(model, &batch, &mut opt),
                Some(beta) => gen_step(
                    model,
                    &batch,
                    buffer
                        .as_mut()
                        .expect("buffer created for generative modes"),
                    &cfg.sampler,
                    beta,
                    &mut opt,
                    &mut noise_rng,
                ),
            };
            let stats = match step {
                Ok(stats) => stats,
                Err(e) => {
                    if e.is_divergence() {
                        log::warn!("training diverged in epoch {epoch}, batch {b}: {e}");
                        let n = batches.max(1) as f64;
                        report.epochs.push(EpochRecord {
                            epoch,
                            mode: cfg.mode,
                            beta,
                            lr: opt.lr,
                            loss_real: if batches > 0 { sum_real / n } else { f64::NAN },
                            loss_sampled: beta.map(|_| {
                                if batches > 0 {
                                    sum_sampled / n
                                } else {
                                    f64::NAN
                                }
                            }),
                            train_acc: f64::NAN,
                            test_acc: f64::NAN,
                            seconds: start.elapsed().as_secs_f64(),
                            diverged: true,
                            switch,
                        });
                    }
                    return Err(e);
                }
            };
            sum_real += stats.loss_real;
            sum_sampled += stats.loss_sampled.unwrap_or(0.0);
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            mode: cfg.mode,
            beta,
            lr: opt.lr,
            loss_real: sum_real / batches as f64,
            loss_sampled: beta.map(|_| sum_sampled / batches as f64),
            train_acc: model.accuracy(train)?,
            test_acc: if test.is_empty() {
                f64::NAN
            } else {
                model.accuracy(test)?
            },
            seconds: start.elapsed().as_secs_f64(),
            diverged: false,
            switch,
        };
        info!(
            "epoch {epoch}: loss_real {:.4} train_acc {:.4} test_acc {:.4}",
            record.loss_real, record.train_acc, record.test_acc
        );
        observer.on_epoch(&record, model, buffer.as_ref())?;
        report.epochs.push(record);
    }

    let gamma2 = model.estimate_gamma2(train)?;
    *model = model.clone().with_gamma2(gamma2)?;
    Ok(())
}

/// Mean unit-gamma energy over a dataset.
pub fn mean_energy(model: &GmmcModel, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, y) in ds.iter() {
        total += model.energy(x, y, Gamma2Mode::Unit)?;
    }
    Ok(total / ds.len() as f64)
}
