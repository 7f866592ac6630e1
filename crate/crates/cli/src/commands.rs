//! Command implementations behind the `gmmc` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmmc::centroids::{generate_opt_means, pairwise_cosines};
use gmmc::checkpoint::Checkpoint;
use gmmc::data::{read_csv_file, LabeledDataset};
use gmmc::eval::{
    calibration_buckets, calibration_input, ece, min_l2_perturbation, ood_evaluate,
    robustness_curve, AttackConfig, MinL2Config, ScoreFn,
};
use gmmc::model::{Gamma2Mode, GmmcModel};
use gmmc::sampler::{sample_chain, ReplayBuffer, SamplerConfig, SamplerMode};
use gmmc::train::{fit, EpochRecord};

use crate::config::{sha256_hex, EvalSection, LoadedConfig};
use crate::report::{calibration_csv, epoch_csv, histogram_csv, ppm_grid, Csv, Stamp};

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Runtime,
    Usage,
    Diverged,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Runtime => 1,
            ExitKind::Usage => 2,
            ExitKind::Diverged => 3,
        }
    }
}

#[derive(Debug)]
pub struct CommandError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CommandError {}

fn usage(e: impl Into<anyhow::Error>) -> CommandError {
    CommandError {
        kind: ExitKind::Usage,
        error: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CommandError {
    CommandError {
        kind: ExitKind::Runtime,
        error: e.into(),
    }
}

fn create_dir(dir: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(runtime)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CommandError> {
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn write_csv(csv: &Csv, path: &Path) -> Result<(), CommandError> {
    write_file(path, csv.as_str())
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), CommandError> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(runtime)
}

fn load_model(path: &Path) -> Result<(GmmcModel, String), CommandError> {
    let bytes = fs::read(path)
        .with_context(|| format!("cannot read checkpoint {}", path.display()))
        .map_err(usage)?;
    let model = Checkpoint::decode(&bytes)
        .and_then(|c| c.model())
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .map_err(usage)?;
    Ok((model, sha256_hex(&bytes)))
}

#[derive(Debug, Clone)]
pub struct MeansArgs {
    pub classes: usize,
    pub dim: usize,
    pub scale: f64,
    pub out: PathBuf,
}

/// Writes the centroid file and prints the pairwise cosine matrix.
pub fn cmd_means(args: &MeansArgs, out: &mut dyn Write) -> Result<Vec<Vec<f64>>, CommandError> {
    let cs = generate_opt_means(args.classes, args.dim, args.scale).map_err(usage)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, cs.to_text())?;
    let cos = pairwise_cosines(&cs);
    say(
        out,
        format_args!(
            "pairwise cosines ({} classes, dim {}):",
            args.classes, args.dim
        ),
    )?;
    for row in &cos {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>9.6}")).collect();
        say(out, format_args!("{}", cells.join(" ")))?;
    }
    if args.classes > 1 {
        say(
            out,
            format_args!(
                "off-diagonal target {:.6}",
                -1.0 / (args.classes as f64 - 1.0)
            ),
        )?;
    }
    Ok(cos)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub gamma2: f64,
    pub test_acc: f64,
}

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const GAMMA_FILE: &str = "gamma2.txt";
pub const STATUS_FILE: &str = "status.txt";

/// Trains per config. Writes the epoch CSV, final checkpoint, `gamma^2`
/// record and a status line under the output directory.
pub fn cmd_train(
    config: &Path,
    out_override: Option<&Path>,
    out: &mut dyn Write,
) -> Result<TrainSummary, CommandError> {
    let cfg = LoadedConfig::load(config).map_err(usage)?;
    let train_cfg = cfg.train_config().map_err(usage)?;
    let data = cfg.experiment_data().map_err(usage)?;
    let model = cfg
        .build_model(data.train.dim(), data.train.num_classes())
        .map_err(usage)?;
    let dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir());
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), &cfg.text)?;
    let stamp = Stamp {
        config_hash: cfg.hash.clone(),
        seed: cfg.config.seed,
    };
    let wall_time = cfg.config.train.record_wall_time;
    let every = cfg.config.train.checkpoint_every;
    say(
        out,
        format_args!(
            "training {} on {} examples ({} test), {} epochs",
            train_cfg.mode,
            data.train.len(),
            data.test.len(),
            train_cfg.epochs
        ),
    )?;

    let ckpt_dir = dir.clone();
    let mut observer =
        |r: &EpochRecord, m: &GmmcModel, b: Option<&ReplayBuffer>| -> gmmc::Result<()> {
            if every > 0 && r.epoch.is_multiple_of(every) {
                Checkpoint::from_model(m, b)
                    .save(&ckpt_dir.join(format!("model-epoch{:04}.ckpt", r.epoch)))?;
            }
            Ok(())
        };
    let result = fit(
        model,
        &data.train,
        &data.test,
        &train_cfg,
        None,
        &mut observer,
    );

    match result {
        Ok(outcome) => {
            write_csv(
                &epoch_csv(&stamp, &outcome.report.epochs, wall_time),
                &dir.join(EPOCHS_CSV),
            )?;
            Checkpoint::from_model(&outcome.model, outcome.buffer.as_ref())
                .save(&dir.join(MODEL_FILE))
                .map_err(runtime)?;
            let gamma2 = outcome.model.gamma2().expect("fit estimates gamma^2");
            write_file(&dir.join(GAMMA_FILE), format!("{gamma2:.16e}\n"))?;
            write_file(&dir.join(STATUS_FILE), "completed\n")?;
            let test_acc = if data.test.is_empty() {
                f64::NAN
            } else {
                outcome.model.accuracy(&data.test).map_err(runtime)?
            };
            say(
                out,
                format_args!(
                    "done: test_acc {test_acc:.4}, gamma^2 {gamma2:.6}, output {}",
                    dir.display()
                ),
            )?;
            Ok(TrainSummary {
                output_dir: dir,
                records: outcome.report.epochs,
                gamma2,
                test_acc,
            })
        }
        Err(failure) => {
            write_csv(
                &epoch_csv(&stamp, &failure.report.epochs, wall_time),
                &dir.join(EPOCHS_CSV),
            )?;
            write_file(
                &dir.join(STATUS_FILE),
                format!("failed: {}\n", failure.error),
            )?;
            let kind = if failure.error.is_divergence() {
                ExitKind::Diverged
            } else {
                ExitKind::Runtime
            };
            Err(CommandError {
                kind,
                error: anyhow!(*failure),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub class: usize,
    pub count: usize,
    pub mode: String,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub seed: u64,
    /// Sample under the estimated `gamma^2` instead of unit `gamma`.
    pub estimated_gamma: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub initial_energy: f64,
    /// `None` when the chain diverged.
    pub final_energy: Option<f64>,
    pub diverged_at: Option<usize>,
    pub x: Option<Vec<f64>>,
}

pub const SAMPLES_CSV: &str = "samples.csv";
pub const ENERGIES_CSV: &str = "energies.csv";
pub const SAMPLES_PPM: &str = "samples.ppm";

/// Runs `count` class-conditional chains from uniform starts.
pub fn cmd_sample(
    args: &SampleArgs,
    out: &mut dyn Write,
) -> Result<Vec<SampleOutcome>, CommandError> {
    let (model, ckpt_hash) = load_model(&args.checkpoint)?;
    model.centroids().check_class(args.class).map_err(usage)?;
    let mode: SamplerMode = args.mode.parse().map_err(usage)?;
    let gamma2_mode = if args.estimated_gamma {
        Gamma2Mode::Estimated
    } else {
        Gamma2Mode::Unit
    };
    model.resolve_gamma2(gamma2_mode).map_err(usage)?;
    let defaults = SamplerConfig::default();
    let cfg = SamplerConfig {
        num_steps: args.steps.unwrap_or(defaults.num_steps),
        step_size: args.step_size.unwrap_or(defaults.step_size),
        mode,
        gamma2_mode,
        ..defaults
    };
    cfg.validate().map_err(usage)?;
    create_dir(&args.out)?;

    let canonical = format!(
        "sample checkpoint={ckpt_hash} class={} count={} mode={} steps={} step_size={} gamma={:?}",
        args.class, args.count, cfg.mode, cfg.num_steps, cfg.step_size, gamma2_mode
    );
    let stamp = Stamp {
        config_hash: sha256_hex(canonical.as_bytes()),
        seed: args.seed,
    };
    let dim = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut outcomes = Vec::with_capacity(args.count);
    for _ in 0..args.count {
        let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let initial_energy = model
            .energy(&x0, args.class, gamma2_mode)
            .map_err(runtime)?;
        match sample_chain(&model, &x0, args.class, &cfg, &mut rng) {
            Ok(x) => outcomes.push(SampleOutcome {
                initial_energy,
                final_energy: Some(model.energy(&x, args.class, gamma2_mode).map_err(runtime)?),
                diverged_at: None,
                x: Some(x),
            }),
            Err(gmmc::Error::ChainDiverged { step }) => outcomes.push(SampleOutcome {
                initial_energy,
                final_energy: None,
                diverged_at: Some(step),
                x: None,
            }),
            Err(e) => return Err(runtime(e)),
        }
    }

    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((1..=dim).map(|i| format!("x{i}")))
        .collect();
    let mut samples = Csv::new(&stamp, &header.join(","));
    let mut energies = Csv::new(&stamp, "sample,status,initial_energy,final_energy");
    for (i, o) in outcomes.iter().enumerate() {
        let status = match o.diverged_at {
            None => "ok".to_string(),
            Some(step) => format!("diverged@{step}"),
        };
        energies.row([
            i.to_string(),
            status,
            o.initial_energy.to_string(),
            o.final_energy.map(|e| e.to_string()).unwrap_or_default(),
        ]);
        if let Some(x) = &o.x {
            samples.row(
                std::iter::once(args.class.to_string()).chain(x.iter().map(|v| v.to_string())),
            );
        }
    }
    write_csv(&samples, &args.out.join(SAMPLES_CSV))?;
    write_csv(&energies, &args.out.join(ENERGIES_CSV))?;
    let images: Vec<&[f64]> = outcomes.iter().filter_map(|o| o.x.as_deref()).collect();
    if dim >= 4 {
        if let Some(ppm) = ppm_grid(&images) {
            write_file(&args.out.join(SAMPLES_PPM), ppm)?;
        }
    }

    let ok: Vec<&SampleOutcome> = outcomes.iter().filter(|o| o.x.is_some()).collect();
    let diverged = outcomes.len() - ok.len();
    if diverged > 0 {
        warn!("{diverged} of {} chains diverged", outcomes.len());
    }
    if !ok.is_empty() {
        let n = ok.len() as f64;
        say(
            out,
            format_args!(
                "{} samples of class {}: mean energy {:.4} -> {:.4}, {} diverged",
                ok.len(),
                args.class,
                ok.iter().map(|o| o.initial_energy).sum::<f64>() / n,
                ok.iter().filter_map(|o| o.final_energy).sum::<f64>() / n,
                diverged
            ),
        )?;
    } else {
        say(
            out,
            format_args!("no samples written ({diverged} diverged)"),
        )?;
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Calibration,
    Ood,
    Robustness,
    All,
}

impl std::str::FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "calibration" => Suite::Calibration,
            "ood" => Suite::Ood,
            "robustness" => Suite::Robustness,
            "all" => Suite::All,
            other => return Err(anyhow!("unknown suite {other:?}")),
        })
    }
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// A labeled CSV, or an experiment config whose test split is evaluated.
    pub dataset: PathBuf,
    pub suite: Suite,
    pub out: PathBuf,
    /// Out-of-distribution CSV; defaults to the config's held-out classes.
    pub ood: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSummary {
    pub ece: Option<f64>,
    pub auroc: Vec<(ScoreFn, f64)>,
    pub robustness: Vec<(f64, f64)>,
    /// `(example index, norm)`; `None` when no adversarial point was found.
    pub perturbations: Vec<(usize, Option<f64>)>,
}

pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const OOD_CSV: &str = "ood.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const PERTURBATIONS_CSV: &str = "perturbations.csv";

struct EvalInputs {
    eval_set: LabeledDataset,
    ood: Option<LabeledDataset>,
    gamma_set: LabeledDataset,
    section: EvalSection,
    stamp: Stamp,
}

fn eval_inputs(
    args: &EvalArgs,
    model: &GmmcModel,
    ckpt_hash: &str,
) -> Result<EvalInputs, CommandError> {
    let is_config = args.dataset.extension().is_some_and(|e| e == "toml");
    let mut inputs = if is_config {
        let cfg = LoadedConfig::load(&args.dataset).map_err(usage)?;
        let data = cfg.experiment_data().map_err(usage)?;
        EvalInputs {
            eval_set: data.test,
            ood: data.ood,
            gamma_set: data.train,
            section: cfg.config.eval.clone(),
            stamp: Stamp {
                config_hash: cfg.hash.clone(),
                seed: cfg.config.seed,
            },
        }
    } else {
        let ds = read_csv_file(&args.dataset, Some(model.num_classes())).map_err(usage)?;
        let canonical = format!(
            "eval checkpoint={ckpt_hash} dataset={}",
            sha256_hex(&fs::read(&args.dataset).map_err(usage)?)
        );
        EvalInputs {
            gamma_set: ds.clone(),
            eval_set: ds,
            ood: None,
            section: EvalSection::default(),
            stamp: Stamp {
                config_hash: sha256_hex(canonical.as_bytes()),
                seed: args.seed,
            },
        }
    };
    if let Some(path) = &args.ood {
        inputs.ood = Some(read_csv_file(path, None).map_err(usage)?);
    }
    for ds in std::iter::once(&inputs.eval_set).chain(inputs.ood.as_ref()) {
        if ds.dim() != model.input_dim() {
            return Err(usage(anyhow!(
                "dataset {} has dimension {}, model expects {}",
                ds.name(),
                ds.dim(),
                model.input_dim()
            )));
        }
    }
    if inputs.eval_set.is_empty() {
        return Err(usage(anyhow!("evaluation set is empty")));
    }
    Ok(inputs)
}

/// Runs the selected evaluation suites and writes their CSV reports.
pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalSummary, CommandError> {
    let (mut model, ckpt_hash) = load_model(&args.checkpoint)?;
    let inputs = eval_inputs(args, &model, &ckpt_hash)?;
    if model.gamma2().is_none() {
        warn!(
            "checkpoint has no gamma^2; estimating it on {}",
            inputs.gamma_set.name()
        );
        let g = model.estimate_gamma2(&inputs.gamma_set).map_err(usage)?;
        model = model.with_gamma2(g).map_err(usage)?;
    }
    if args.suite.includes(Suite::Ood) && inputs.ood.is_none() {
        return Err(usage(anyhow!(
            "the ood suite needs --ood or a config with held_out classes"
        )));
    }
    create_dir(&args.out)?;
    let sec = &inputs.section;
    let stamp = &inputs.stamp;
    let ds = &inputs.eval_set;
    let mut summary = EvalSummary::default();

    say(out, format_args!("{:<28} {:>10}", "metric", "value"))?;
    say(
        out,
        format_args!(
            "{:<28} {:>10.4}",
            "clean accuracy",
            model.accuracy(ds).map_err(runtime)?
        ),
    )?;

    if args.suite.includes(Suite::Calibration) {
        let ci = calibration_input(&model, ds, sec.buckets).map_err(runtime)?;
        let buckets = calibration_buckets(&ci).map_err(runtime)?;
        let e = ece(&ci).map_err(runtime)?;
        write_csv(
            &calibration_csv(stamp, &buckets),
            &args.out.join(CALIBRATION_CSV),
        )?;
        say(out, format_args!("{:<28} {:>10.4}", "ECE", e))?;
        summary.ece = Some(e);
    }

    if args.suite.includes(Suite::Ood) {
        let ood = inputs.ood.as_ref().expect("checked above");
        let mut csv = Csv::new(stamp, "score_fn,auroc");
        for f in ScoreFn::ALL {
            let r = ood_evaluate(&model, ds, ood, f, sec.ood_bins).map_err(runtime)?;
            csv.row([f.name().to_string(), r.auroc.to_string()]);
            write_csv(
                &histogram_csv(stamp, &r.histogram),
                &args.out.join(format!("ood_hist_{}.csv", f.name())),
            )?;
            say(
                out,
                format_args!("{:<28} {:>10.4}", format!("AUROC {}", f.name()), r.auroc),
            )?;
            summary.auroc.push((f, r.auroc));
        }
        write_csv(&csv, &args.out.join(OOD_CSV))?;
    }

    if args.suite.includes(Suite::Robustness) {
        let n = match sec.max_attack_examples {
            0 => ds.len(),
            k => k.min(ds.len()),
        };
        let idx: Vec<usize> = (0..n).collect();
        let attacked = ds.subset(ds.name().to_string(), &idx);
        let steps = sec.attack_steps;
        let curve = robustness_curve(
            &model,
            &attacked,
            &sec.epsilons,
            |e| AttackConfig {
                steps,
                ..AttackConfig::linf(e)
            },
            stamp.seed,
        )
        .map_err(runtime)?;
        let mut csv = Csv::new(stamp, "epsilon,robust_acc");
        for (e, acc) in &curve {
            csv.row([e.to_string(), acc.to_string()]);
            say(
                out,
                format_args!("{:<28} {:>10.4}", format!("robust acc eps={e}"), acc),
            )?;
        }
        write_csv(&csv, &args.out.join(ROBUSTNESS_CSV))?;
        summary.robustness = curve;

        let search = MinL2Config {
            max_epsilon: sec.min_l2_max_epsilon,
            halvings: sec.min_l2_halvings,
            steps,
        };
        let mut csv = Csv::new(stamp, "example_id,l2");
        for (i, (x, y)) in ds.iter().enumerate() {
            if summary.perturbations.len() >= sec.min_l2_examples {
                break;
            }
            if model.classify(x).map_err(runtime)? != y {
                continue;
            }
            let r = min_l2_perturbation(&model, x, y, &search).map_err(runtime)?;
            let l2 = r.map(|r| r.l2);
            csv.row([i.to_string(), l2.map(|v| v.to_string()).unwrap_or_default()]);
            summary.perturbations.push((i, l2));
        }
        write_csv(&csv, &args.out.join(PERTURBATIONS_CSV))?;
        let found: Vec<f64> = summary.perturbations.iter().filter_map(|p| p.1).collect();
        if !found.is_empty() {
            let mean = found.iter().sum::<f64>() / found.len() as f64;
            say(
                out,
                format_args!("{:<28} {:>10.4}", "mean min-L2 perturbation", mean),
            )?;
        }
    }
    Ok(summary)
}
