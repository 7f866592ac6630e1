//! Experiment configuration documents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use gmmc::centroids::{generate_opt_means, DEFAULT_SCALE};
use gmmc::data::{
    embed, load_idx_pair, make_ood_pair, read_csv_file, split, synth_mixture, LabeledDataset,
};
use gmmc::model::GmmcModel;
use gmmc::net::{Activation, Network, NetworkSpec};
use gmmc::sampler::{SamplerConfig, SamplerMode};
use gmmc::train::{TrainConfig, TrainMode};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "GMMC_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Library(#[from] gmmc::Error),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        spread: f64,
        /// Pads the mixture to this many coordinates of small noise.
        embed_dim: Option<usize>,
        #[serde(default)]
        embed_noise: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` examples.
        limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Classes withheld from training and used as out-of-distribution data.
    #[serde(default)]
    pub held_out: Vec<usize>,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: String,
    pub scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![64],
            feature_dim: 16,
            activation: "tanh".into(),
            scale: DEFAULT_SCALE,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub beta: f64,
    pub joint_switch_epoch: usize,
    pub beta_ramp_epochs: usize,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Fill the `seconds` column; makes the epoch CSV run-dependent.
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.mode.to_string(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_epochs: t.decay_epochs,
            beta: t.beta,
            joint_switch_epoch: t.joint_switch_epoch,
            beta_ramp_epochs: t.beta_ramp_epochs,
            buffer_capacity: t.buffer_capacity,
            reinit_prob: t.reinit_prob,
            checkpoint_every: 0,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub mode: String,
    pub num_steps: usize,
    pub step_size: f64,
    pub clip_to_domain: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            mode: s.mode.to_string(),
            num_steps: s.num_steps,
            step_size: s.step_size,
            clip_to_domain: s.clip_to_domain,
        }
    }
}

impl SamplerSection {
    pub fn to_config(&self) -> Result<SamplerConfig, ConfigError> {
        let cfg = SamplerConfig {
            num_steps: self.num_steps,
            step_size: self.step_size,
            mode: self.mode.parse::<SamplerMode>()?,
            clip_to_domain: self.clip_to_domain,
            ..SamplerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub buckets: usize,
    pub ood_bins: usize,
    /// L-infinity budgets in input units, where the domain has width 2.
    pub epsilons: Vec<f64>,
    pub attack_steps: usize,
    /// Cap on attacked examples; 0 attacks the whole test set.
    pub max_attack_examples: usize,
    pub min_l2_examples: usize,
    pub min_l2_max_epsilon: f64,
    pub min_l2_halvings: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            buckets: gmmc::eval::DEFAULT_BUCKETS,
            ood_bins: 20,
            epsilons: vec![0.0, 0.05, 0.1, 0.2],
            attack_steps: gmmc::eval::DEFAULT_PGD_STEPS,
            max_attack_examples: 0,
            min_l2_examples: 10,
            min_l2_max_epsilon: 4.0,
            min_l2_halvings: gmmc::eval::DEFAULT_HALVINGS,
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.buckets == 0 || self.ood_bins == 0 || self.attack_steps == 0 {
            return Err(ConfigError::Invalid(
                "eval bucket, bin and step counts must be positive".into(),
            ));
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite()))
            || self.epsilons.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ConfigError::Invalid(
                "eval epsilons must be non-negative and strictly increasing".into(),
            ));
        }
        if !(self.min_l2_max_epsilon > 0.0) {
            return Err(ConfigError::Invalid(
                "min_l2_max_epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A parsed config together with its origin and content hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub text: String,
    pub hash: String,
}

/// Train/test data derived from a config.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Held-out classes, when configured.
    pub ood: Option<LabeledDataset>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(path, text)
    }

    pub fn parse(path: &Path, text: String) -> Result<Self, ConfigError> {
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let loaded = LoadedConfig {
            hash: sha256_hex(text.as_bytes()),
            config,
            path: path.to_path_buf(),
            text,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Resolves a config-relative input path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        match &c.dataset.source {
            DatasetSource::Idx { images, labels, .. } => {
                for p in [images, labels] {
                    let p = self.resolve(p);
                    if !p.is_file() {
                        return Err(ConfigError::Invalid(format!(
                            "dataset file {} not found",
                            p.display()
                        )));
                    }
                }
            }
            DatasetSource::Csv { path, .. } => {
                let p = self.resolve(path);
                if !p.is_file() {
                    return Err(ConfigError::Invalid(format!(
                        "dataset file {} not found",
                        p.display()
                    )));
                }
            }
            DatasetSource::Synthetic { .. } => {}
        }
        if !(c.dataset.test_fraction > 0.0 && c.dataset.test_fraction < 1.0) {
            return Err(ConfigError::Invalid(
                "test_fraction must lie in (0, 1)".into(),
            ));
        }
        if c.network.feature_dim == 0 {
            return Err(ConfigError::Invalid("feature_dim must be positive".into()));
        }
        if !(c.network.scale > 0.0 && c.network.scale.is_finite()) {
            return Err(ConfigError::Invalid(
                "centroid scale must be positive".into(),
            ));
        }
        c.network.activation.parse::<Activation>()?;
        self.train_config()?;
        c.eval.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.config.train;
        if t.epochs == 0 && !t.decay_epochs.is_empty() {
            return Err(ConfigError::Invalid(
                "decay epochs given for a zero-epoch run".into(),
            ));
        }
        let cfg = TrainConfig {
            mode: t.mode.parse::<TrainMode>()?,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_epochs: t.decay_epochs.clone(),
            beta: t.beta,
            joint_switch_epoch: t.joint_switch_epoch,
            beta_ramp_epochs: t.beta_ramp_epochs,
            sampler: self.config.sampler.to_config()?,
            buffer_capacity: t.buffer_capacity,
            reinit_prob: t.reinit_prob,
            seed: self.config.seed,
        };
        if !(cfg.learning_rate > 0.0) {
            return Err(ConfigError::Invalid(
                "learning_rate must be positive".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output directory; relative paths sit under `$GMMC_OUTPUT_ROOT` when set.
    pub fn output_dir(&self) -> PathBuf {
        let p = &self.config.output_dir;
        if p.is_absolute() {
            return p.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(p),
            None => p.clone(),
        }
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset, ConfigError> {
        let seed = self.config.seed;
        Ok(match &self.config.dataset.source {
            DatasetSource::Synthetic {
                classes,
                dim,
                n_per_class,
                spread,
                embed_dim,
                embed_noise,
            } => {
                let ds = synth_mixture(*classes, *dim, *n_per_class, *spread, seed)?;
                match embed_dim {
                    Some(d) => embed(&ds, *d, *embed_noise, seed.wrapping_add(1))?,
                    None => ds,
                }
            }
            DatasetSource::Idx {
                images,
                labels,
                limit,
            } => {
                let ds = load_idx_pair(&self.resolve(images), &self.resolve(labels))?;
                match limit {
                    Some(n) if *n < ds.len() => {
                        let idx: Vec<usize> = (0..*n).collect();
                        ds.subset(ds.name().to_string(), &idx)
                    }
                    _ => ds,
                }
            }
            DatasetSource::Csv { path, classes } => read_csv_file(&self.resolve(path), *classes)?,
        })
    }

    /// Loads the dataset, removes held-out classes and splits the rest.
    pub fn experiment_data(&self) -> Result<ExperimentData, ConfigError> {
        let ds = self.load_dataset()?;
        let (in_set, ood) = if self.config.dataset.held_out.is_empty() {
            (ds, None)
        } else {
            let (i, o) = make_ood_pair(&ds, &self.config.dataset.held_out)?;
            (i, Some(o))
        };
        let (train, test) = split(&in_set, self.config.dataset.test_fraction, self.config.seed)?;
        Ok(ExperimentData { train, test, ood })
    }

    /// Freshly initialized model for `input_dim` inputs and `num_classes` classes.
    pub fn build_model(
        &self,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<GmmcModel, ConfigError> {
        let n = &self.config.network;
        let spec = NetworkSpec::mlp(
            input_dim,
            &n.hidden,
            n.feature_dim,
            n.activation.parse()?,
            self.config.seed,
        )?;
        let centroids = generate_opt_means(num_classes, n.feature_dim, n.scale)?;
        Ok(GmmcModel::new(Network::initialized(spec), centroids)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
output_dir = "out"

[dataset]
kind = "synthetic"
classes = 3
dim = 4
n_per_class = 10
spread = 0.1
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = LoadedConfig::parse(Path::new("x.toml"), MINIMAL.into()).unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.mode, TrainMode::Discriminative);
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.sampler.num_steps, 20);
        assert_eq!(c.config.dataset.test_fraction, 0.2);
        let data = c.experiment_data().unwrap();
        assert_eq!(data.train.len() + data.test.len(), 30);
        assert!(data.ood.is_none());
        let m = c.build_model(4, 3).unwrap();
        assert_eq!(m.num_classes(), 3);
    }

    #[test]
    fn hash_tracks_text() {
        let a = LoadedConfig::parse(Path::new("x.toml"), MINIMAL.into()).unwrap();
        let b = LoadedConfig::parse(Path::new("x.toml"), format!("{MINIMAL}\n")).unwrap();
        assert_eq!(a.hash.len(), 64);
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn rejects_bad_values() {
        for extra in [
            "[train]\nbeta = 2.0\n",
            "[train]\nmode = \"bogus\"\n",
            "[train]\nepochs = 3\ndecay_epochs = [5]\n",
            "[sampler]\nnum_steps = 0\n",
            "[network]\nactivation = \"swish\"\n",
            "[eval]\nepsilons = [0.1, 0.05]\n",
            "[unknown]\nx = 1\n",
            "[dataset]\nkind = \"synthetic\"\nclasses = 3\ndim = 4\nn_per_class = 10\nspread = 0.1\ntypo = 1\n",
        ] {
            let text = format!("{MINIMAL}{extra}");
            assert!(LoadedConfig::parse(Path::new("x.toml"), text).is_err(), "{extra}");
        }
    }

    #[test]
    fn missing_idx_file_is_rejected() {
        let text = "seed = 1\noutput_dir = \"o\"\n[dataset]\nkind = \"idx\"\nimages = \"nope\"\nlabels = \"nope\"\n";
        assert!(matches!(
            LoadedConfig::parse(Path::new("/nonexistent/x.toml"), text.into()),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn held_out_classes_form_ood_set() {
        let text = format!("{MINIMAL}held_out = [1]\n");
        let c = LoadedConfig::parse(Path::new("x.toml"), text).unwrap();
        let data = c.experiment_data().unwrap();
        assert_eq!(data.train.num_classes(), 2);
        assert_eq!(data.ood.unwrap().len(), 10);
    }
}
