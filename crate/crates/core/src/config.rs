//! Flat `key=value` run configuration with dotted namespaces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::NoisePolicy;
use crate::error::{Error, Result};
use crate::evaluate::{Averaging, ReportConfig};
use crate::model::{BranchKind, ModelConfig, Role};
use crate::selftrain::SelfTrainConfig;
use crate::train::{AdamConfig, TrainConfig, TrainMode};

pub const CACHE_ENV: &str = "EMOTAG_CACHE";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub vocab: PathBuf,
    pub cache_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub run_id: Option<String>,
    pub seed: u64,
    pub threads: usize,

    pub mode: TrainMode,
    pub branch: BranchKind,
    pub noisy: bool,

    pub mel_channels: Vec<usize>,
    pub hpcp_channels: Vec<usize>,
    pub rnn_hidden: usize,
    pub fusion_hidden: usize,
    pub gem_p_init: f64,
    pub stochastic_blocks: usize,
    pub bypass_prob: f64,
    pub dropout: f64,

    pub mask_lo: Option<usize>,
    pub mask_hi: Option<usize>,
    pub gaussian_weight: Option<f64>,
    /// Noise stream seed; the run seed when unset.
    pub augment_seed: Option<u64>,
    pub time_masks: usize,
    pub freq_masks: usize,

    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub chunks_per_track: usize,

    pub thresholds: String,
    pub mix_ratio: f64,
    pub iterations: usize,

    pub objective: String,
    pub decision_threshold: f64,
    pub averaging: Averaging,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            manifest: "manifest.tsv".into(),
            vocab: "vocab.txt".into(),
            cache_dir: "cache".into(),
            runs_dir: "runs".into(),
            run_id: None,
            seed: 0,
            threads: 0,
            mode: TrainMode::Short,
            branch: BranchKind::Hpcp,
            noisy: false,
            mel_channels: m.mel_channels,
            hpcp_channels: m.hpcp_channels,
            rnn_hidden: m.rnn_hidden,
            fusion_hidden: m.fusion_hidden,
            gem_p_init: m.gem_p_init,
            stochastic_blocks: m.stochastic_blocks,
            bypass_prob: m.bypass_prob,
            dropout: m.dropout,
            mask_lo: None,
            mask_hi: None,
            gaussian_weight: None,
            augment_seed: None,
            time_masks: 1,
            freq_masks: 1,
            max_epochs: 100,
            patience: 5,
            batch_size: 16,
            lr: 1e-4,
            chunks_per_track: 1,
            thresholds: "calibrated".into(),
            mix_ratio: 1.0,
            iterations: 1,
            objective: "pr_auc".into(),
            decision_threshold: 0.5,
            averaging: Averaging::Macro,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "paths.manifest",
        "paths.vocab",
        "paths.cache_dir",
        "paths.runs_dir",
        "run_id",
        "seed",
        "threads",
        "train.mode",
        "model.branch",
        "augment.noisy",
        "model.mel_channels",
        "model.hpcp_channels",
        "model.rnn_hidden",
        "model.fusion_hidden",
        "model.gem_p_init",
        "model.stochastic_blocks",
        "model.bypass_prob",
        "model.dropout",
        "augment.mask_lo",
        "augment.mask_hi",
        "augment.gaussian_weight",
        "augment.seed",
        "augment.time_masks",
        "augment.freq_masks",
        "train.max_epochs",
        "train.patience",
        "train.batch_size",
        "train.lr",
        "train.chunks_per_track",
        "selftrain.thresholds",
        "selftrain.mix_ratio",
        "selftrain.iterations",
        "ensemble.objective",
        "evaluate.threshold",
        "evaluate.averaging",
    ];

    /// Set one key. Unknown keys and malformed values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got `{v}`"));
        let uint = || v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let float = || v.parse::<f64>().map_err(|_| bad("a number"));
        let flag = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let uints = || {
            v.split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("a comma-separated list of integers"))
        };
        match key {
            "paths.manifest" => self.manifest = v.into(),
            "paths.vocab" => self.vocab = v.into(),
            "paths.cache_dir" => self.cache_dir = v.into(),
            "paths.runs_dir" => self.runs_dir = v.into(),
            "run_id" => self.run_id = (!v.is_empty()).then(|| v.to_owned()),
            "seed" => self.seed = v.parse().map_err(|_| bad("an unsigned integer"))?,
            "threads" => self.threads = uint()?,
            "train.mode" => self.mode = v.parse()?,
            "model.branch" => self.branch = v.parse()?,
            "augment.noisy" => self.noisy = flag()?,
            "model.mel_channels" => self.mel_channels = uints()?,
            "model.hpcp_channels" => self.hpcp_channels = uints()?,
            "model.rnn_hidden" => self.rnn_hidden = uint()?,
            "model.fusion_hidden" => self.fusion_hidden = uint()?,
            "model.gem_p_init" => self.gem_p_init = float()?,
            "model.stochastic_blocks" => self.stochastic_blocks = uint()?,
            "model.bypass_prob" => self.bypass_prob = float()?,
            "model.dropout" => self.dropout = float()?,
            "augment.mask_lo" => self.mask_lo = if v.is_empty() { None } else { Some(uint()?) },
            "augment.mask_hi" => self.mask_hi = if v.is_empty() { None } else { Some(uint()?) },
            "augment.gaussian_weight" => self.gaussian_weight = if v.is_empty() { None } else { Some(float()?) },
            "augment.seed" => {
                self.augment_seed = if v.is_empty() {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad("an unsigned integer"))?)
                }
            }
            "augment.time_masks" => self.time_masks = uint()?,
            "augment.freq_masks" => self.freq_masks = uint()?,
            "train.max_epochs" => self.max_epochs = uint()?,
            "train.patience" => self.patience = uint()?,
            "train.batch_size" => self.batch_size = uint()?,
            "train.lr" => self.lr = float()?,
            "train.chunks_per_track" => self.chunks_per_track = uint()?,
            "selftrain.thresholds" => self.thresholds = v.to_owned(),
            "selftrain.mix_ratio" => self.mix_ratio = float()?,
            "selftrain.iterations" => self.iterations = uint()?,
            "ensemble.objective" => self.objective = v.to_owned(),
            "evaluate.threshold" => self.decision_threshold = float()?,
            "evaluate.averaging" => {
                self.averaging = match v {
                    "macro" => Averaging::Macro,
                    "micro" => Averaging::Micro,
                    _ => return Err(bad("macro or micro")),
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}` (known: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "paths.manifest" => self.manifest.display().to_string(),
            "paths.vocab" => self.vocab.display().to_string(),
            "paths.cache_dir" => self.cache_dir.display().to_string(),
            "paths.runs_dir" => self.runs_dir.display().to_string(),
            "run_id" => opt(&self.run_id),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "train.mode" => self.mode.to_string(),
            "model.branch" => self.branch.to_string(),
            "augment.noisy" => self.noisy.to_string(),
            "model.mel_channels" => list(&self.mel_channels),
            "model.hpcp_channels" => list(&self.hpcp_channels),
            "model.rnn_hidden" => self.rnn_hidden.to_string(),
            "model.fusion_hidden" => self.fusion_hidden.to_string(),
            "model.gem_p_init" => self.gem_p_init.to_string(),
            "model.stochastic_blocks" => self.stochastic_blocks.to_string(),
            "model.bypass_prob" => self.bypass_prob.to_string(),
            "model.dropout" => self.dropout.to_string(),
            "augment.mask_lo" => opt(&self.mask_lo),
            "augment.mask_hi" => opt(&self.mask_hi),
            "augment.gaussian_weight" => opt(&self.gaussian_weight),
            "augment.seed" => opt(&self.augment_seed),
            "augment.time_masks" => self.time_masks.to_string(),
            "augment.freq_masks" => self.freq_masks.to_string(),
            "train.max_epochs" => self.max_epochs.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.chunks_per_track" => self.chunks_per_track.to_string(),
            "selftrain.thresholds" => self.thresholds.clone(),
            "selftrain.mix_ratio" => self.mix_ratio.to_string(),
            "selftrain.iterations" => self.iterations.to_string(),
            "ensemble.objective" => self.objective.clone(),
            "evaluate.threshold" => self.decision_threshold.to_string(),
            "evaluate.averaging" => match self.averaging {
                Averaging::Macro => "macro".into(),
                Averaging::Micro => "micro".into(),
            },
            _ => return None,
        })
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Every key, one per line, in a stable order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("known key"));
        }
        out
    }

    /// Honour the cache-directory environment override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
            self.cache_dir = dir.into();
        }
    }

    pub fn noise_policy(&self) -> NoisePolicy {
        let seed = self.augment_seed.unwrap_or(self.seed);
        let base = if self.noisy {
            NoisePolicy::noisy(seed)
        } else {
            NoisePolicy::normal(seed)
        };
        NoisePolicy {
            mask_lo: self.mask_lo.unwrap_or(base.mask_lo),
            mask_hi: self.mask_hi.unwrap_or(base.mask_hi),
            gaussian_weight: self.gaussian_weight.unwrap_or(base.gaussian_weight),
            time_masks: self.time_masks,
            freq_masks: self.freq_masks,
            ..base
        }
    }

    pub fn model_config(&self, num_tags: usize, role: Role) -> ModelConfig {
        ModelConfig {
            num_tags,
            branch: self.branch,
            role,
            mel_channels: self.mel_channels.clone(),
            hpcp_channels: self.hpcp_channels.clone(),
            rnn_hidden: self.rnn_hidden,
            fusion_hidden: self.fusion_hidden,
            gem_p_init: self.gem_p_init,
            stochastic_blocks: self.stochastic_blocks,
            bypass_prob: self.bypass_prob,
            dropout: self.dropout,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            noise: self.noise_policy(),
            seed: self.seed,
            chunks_per_track: self.chunks_per_track,
        }
    }

    pub fn selftrain_config(&self) -> SelfTrainConfig {
        SelfTrainConfig {
            mix_ratio: self.mix_ratio,
            iterations: self.iterations,
        }
    }

    pub fn report_config(&self) -> ReportConfig {
        ReportConfig {
            averaging: self.averaging,
            threshold: self.decision_threshold,
            tuned_thresholds: None,
        }
    }

    /// Run naming: `<mode>-<branch>`, plus `-noisy` for noised runs.
    pub fn default_run_id(&self) -> String {
        let mut id = format!("{}-{}", self.mode, self.branch);
        if self.noisy {
            id.push_str("-noisy");
        }
        id
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.default_run_id())
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_dir.join(run_id)
    }
}
