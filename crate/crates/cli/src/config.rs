//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use terngrad::cluster::{Batching, ClusterConfig};
use terngrad::codec::{Bucketing, CodecConfig};
use terngrad::numerics::{load_idx_dataset, make_synthetic, Architecture, Dataset, Model, SyntheticTask};
use terngrad::optimizer::{LrSchedule, Rule};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub iterations: u64,
    #[serde(default)]
    pub eval_every: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub cluster: ClusterSection,
    #[serde(default)]
    pub codec: CodecSection,
    pub optimizer: OptimizerSection,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    Linear,
    Mlp,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchName,
    #[serde(default)]
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    Blobs,
    LinearSeparable,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        task: TaskName,
        samples: usize,
        dim: usize,
        classes: usize,
        eval_samples: usize,
    },
    Idx {
        classes: usize,
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    Strong,
    Weak,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub workers: usize,
    pub scaling: Scaling,
    /// Global batch under strong scaling, per-worker batch under weak.
    pub batch: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub ternarize: bool,
    pub clipping: bool,
    pub clip_factor: f32,
    pub scaler_sharing: bool,
    /// `per-tensor`, `global`, or a positive bucket size.
    pub bucketing: BucketingName,
    pub passthrough: Vec<String>,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            ternarize: true,
            clipping: true,
            clip_factor: 2.5,
            scaler_sharing: true,
            bucketing: BucketingName::Named(BucketingKind::PerTensor),
            passthrough: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(untagged)]
pub enum BucketingName {
    Named(BucketingKind),
    Size(usize),
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BucketingKind {
    PerTensor,
    Global,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    Vanilla,
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Constant,
    Polynomial,
    Staircase,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub rule: RuleName,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub base_lr: f64,
    pub schedule: ScheduleName,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_step")]
    pub decay_step: u64,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_ema")]
    pub ema_decay: f32,
    #[serde(default = "default_true")]
    pub ema_warmup: bool,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_power() -> f64 {
    0.5
}
fn default_factor() -> f64 {
    0.1
}
fn default_step() -> u64 {
    1000
}
fn default_ema() -> f32 {
    0.999
}
fn default_true() -> bool {
    true
}

/// A parsed config plus what is needed to reproduce and label its outputs.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub hash: String,
    pub seed: u64,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path, seed_override: Option<u64>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let seed = seed_override.unwrap_or(config.seed);
        Ok(Self {
            hash: content_hash(text.as_bytes()),
            seed,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            config,
        })
    }

    pub fn architecture(&self) -> anyhow::Result<Architecture> {
        match self.config.model.arch {
            ArchName::Linear => Ok(Architecture::LinearSoftmax),
            ArchName::Mlp if self.config.model.hidden == 0 => anyhow::bail!("model.hidden must be positive for mlp"),
            ArchName::Mlp => Ok(Architecture::MlpOneHidden {
                hidden: self.config.model.hidden,
            }),
        }
    }

    /// Training and evaluation sets.
    pub fn datasets(&self) -> anyhow::Result<(Dataset, Dataset)> {
        match &self.config.data {
            DataSection::Synthetic {
                task,
                samples,
                dim,
                classes,
                eval_samples,
            } => {
                let task = match task {
                    TaskName::Blobs => SyntheticTask::Blobs,
                    TaskName::LinearSeparable => SyntheticTask::LinearSeparable,
                };
                if *eval_samples == 0 {
                    anyhow::bail!("data.eval_samples must be positive");
                }
                let all = make_synthetic(task, samples + eval_samples, *dim, *classes, self.seed)?;
                Ok(all.split_tail(*eval_samples))
            }
            DataSection::Idx {
                classes,
                train_images,
                train_labels,
                eval_images,
                eval_labels,
            } => {
                let at = |p: &PathBuf| self.base_dir.join(p);
                Ok((
                    load_idx_dataset(at(train_images), at(train_labels), *classes)?,
                    load_idx_dataset(at(eval_images), at(eval_labels), *classes)?,
                ))
            }
        }
    }

    pub fn model(&self, dim: usize, classes: usize) -> anyhow::Result<Model> {
        Ok(Model::init(self.architecture()?, dim, classes, self.seed))
    }

    pub fn cluster(&self) -> anyhow::Result<ClusterConfig> {
        let c = &self.config;
        let o = &c.optimizer;
        let codec = CodecConfig {
            ternarize: c.codec.ternarize,
            clip_factor: c.codec.clip_factor,
            clipping: c.codec.clipping,
            bucketing: match c.codec.bucketing {
                BucketingName::Named(BucketingKind::PerTensor) => Bucketing::PerTensor,
                BucketingName::Named(BucketingKind::Global) => Bucketing::Global,
                BucketingName::Size(k) => Bucketing::FixedSize(k),
            },
            scaler_sharing: c.codec.scaler_sharing,
            passthrough: c.codec.passthrough.iter().cloned().collect::<BTreeSet<_>>(),
            seed: self.seed,
        };
        let timeout = c.cluster.timeout_secs;
        if !(timeout > 0.0 && timeout.is_finite()) {
            anyhow::bail!("cluster.timeout_secs must be positive");
        }
        let cfg = ClusterConfig {
            workers: c.cluster.workers,
            batching: match c.cluster.scaling {
                Scaling::Strong => Batching::Strong { total: c.cluster.batch },
                Scaling::Weak => Batching::Weak {
                    per_worker: c.cluster.batch,
                },
            },
            codec,
            rule: match o.rule {
                RuleName::Vanilla => Rule::Vanilla,
                RuleName::Momentum => Rule::Momentum { mu: o.momentum },
                RuleName::Adam => Rule::adam(),
            },
            schedule: match o.schedule {
                ScheduleName::Constant => LrSchedule::Constant { base: o.base_lr },
                ScheduleName::Polynomial => LrSchedule::Polynomial {
                    base: o.base_lr,
                    power: o.power,
                    max_iter: c.iterations,
                },
                ScheduleName::Staircase => LrSchedule::Staircase {
                    base: o.base_lr,
                    factor: o.decay_factor,
                    step: o.decay_step,
                },
            },
            weight_decay: o.weight_decay,
            ema_decay: o.ema_decay,
            ema_warmup: o.ema_warmup,
            iterations: c.iterations,
            eval_every: c.eval_every,
            barrier_timeout: Some(Duration::from_secs_f64(timeout)),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}
