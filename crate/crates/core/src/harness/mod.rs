//! Experiment plumbing: configs, the model stack, the defense × attack matrix, ablations and plots.

mod ablation;
mod eval;
mod plots;

pub use ablation::{run_ablation, AblationKnob, AblationReport, AblationRow};
pub use eval::{
    craft_input, evaluate_cell, run_matrix, run_robust_acc, run_robust_acc_star, run_standard_acc, select_clips, write_report,
    CellReport, ClipOutcome, EvalReport, GridRow, MetricAverages, SCHEMA_VERSION,
};
pub use plots::{emit_ablation_plot, emit_plots};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, BpdaMode};
use crate::container::{load_dataset, save_dataset};
use crate::diffusion::{RespacedSchedule, ScheduleConfig};
use crate::nn::train::{
    train_autoencoder, train_classifier, train_epsilon_model, AutoencoderTrainConfig, ClassifierTrainConfig,
    DiffusionTrainConfig,
};
use crate::nn::{Autoencoder, EpsilonModel, LatentCodec, Model, VideoClassifier};
use crate::purify::{
    DdimInversionBaseline, DiffpureDdim, DiffpureDdpm, DiffusionParts, IdentityPurifier, Jpeg, Purifier,
    TemporalShuffle, VideoPure, VideoPureConfig, WaveletDenoise,
};
use crate::video::{generate_split, DatasetManifest, LabeledClip, Split};
use crate::{Error, Result};

/// Environment variable that replaces the config's master seed.
pub const SEED_ENV: &str = "VIDEOPURE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DefenseSpec {
    None,
    Videopure(VideoPureConfig),
    DiffpureDdpm { t_star: usize },
    DiffpureDdim { t_star: usize },
    DdimInversion { t_star: usize },
    Jpeg { quality: u8 },
    Wavelet,
    TemporalShuffle,
}

impl DefenseSpec {
    pub fn label(&self) -> String {
        match self {
            DefenseSpec::None => "none".into(),
            DefenseSpec::Videopure(_) => "videopure".into(),
            DefenseSpec::DiffpureDdpm { .. } => "diffpure_ddpm".into(),
            DefenseSpec::DiffpureDdim { .. } => "diffpure_ddim".into(),
            DefenseSpec::DdimInversion { .. } => "ddim_inversion".into(),
            DefenseSpec::Jpeg { .. } => "jpeg".into(),
            DefenseSpec::Wavelet => "wavelet".into(),
            DefenseSpec::TemporalShuffle => "temporal_shuffle".into(),
        }
    }

    fn needs_diffusion(&self) -> bool {
        matches!(
            self,
            DefenseSpec::Videopure(_)
                | DefenseSpec::DiffpureDdpm { .. }
                | DefenseSpec::DiffpureDdim { .. }
                | DefenseSpec::DdimInversion { .. }
        )
    }

    /// The defenses compared in the main table, with their default parameters.
    pub fn standard_set() -> Vec<DefenseSpec> {
        vec![
            DefenseSpec::None,
            DefenseSpec::Jpeg { quality: 75 },
            DefenseSpec::Wavelet,
            DefenseSpec::TemporalShuffle,
            DefenseSpec::DiffpureDdpm { t_star: 101 },
            DefenseSpec::DiffpureDdim { t_star: 6 },
            DefenseSpec::DdimInversion { t_star: 6 },
            DefenseSpec::Videopure(VideoPureConfig::default()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// No attack: standard accuracy.
    Clean,
    /// Crafted against the classifier alone: Robust Acc*.
    GrayBox,
    /// Crafted through the defense with an identity backward: Robust Acc.
    Bpda {
        #[serde(default)]
        mode: BpdaMode,
    },
    EotBpda {
        #[serde(default)]
        mode: BpdaMode,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    StandardAcc,
    RobustAccStar,
    RobustAcc,
}

impl AttackKind {
    pub fn metric(&self) -> Metric {
        match self {
            AttackKind::Clean => Metric::StandardAcc,
            AttackKind::GrayBox => Metric::RobustAccStar,
            AttackKind::Bpda { .. } | AttackKind::EotBpda { .. } => Metric::RobustAcc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub config: AttackConfig,
}

impl AttackSpec {
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Clean => "clean".into(),
            AttackKind::GrayBox => "pgd".into(),
            AttackKind::Bpda { mode: BpdaMode::MeanSoftmax } => "pgd_bpda".into(),
            AttackKind::Bpda { mode: BpdaMode::FinalCandidate } => "pgd_bpda_final".into(),
            AttackKind::EotBpda { mode: BpdaMode::MeanSoftmax } => "eot_bpda".into(),
            AttackKind::EotBpda { mode: BpdaMode::FinalCandidate } => "eot_bpda_final".into(),
        }
    }

    pub fn clean() -> Self {
        Self { kind: AttackKind::Clean, config: AttackConfig::default() }
    }

    pub fn gray_box() -> Self {
        Self { kind: AttackKind::GrayBox, config: AttackConfig::default() }
    }

    pub fn bpda() -> Self {
        Self { kind: AttackKind::Bpda { mode: BpdaMode::MeanSoftmax }, config: AttackConfig::default() }
    }

    pub fn eot_bpda() -> Self {
        Self { kind: AttackKind::EotBpda { mode: BpdaMode::MeanSoftmax }, config: AttackConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoints {
    pub classifier: PathBuf,
    pub epsilon_model: PathBuf,
    /// Latent-space diffusion when set; pixel space otherwise.
    #[serde(default)]
    pub autoencoder: Option<PathBuf>,
    /// Second classifier used as the transfer-attack surrogate.
    #[serde(default)]
    pub surrogate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingConfig {
    #[serde(default)]
    pub classifier: ClassifierTrainConfig,
    #[serde(default)]
    pub diffusion: DiffusionTrainConfig,
    #[serde(default)]
    pub autoencoder: AutoencoderTrainConfig,
}

/// One run, fully described; results are a function of this plus the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetManifest,
    /// Directory holding `train.vpt` and `test.vpt`; clips are regenerated from the manifest when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub checkpoints: Checkpoints,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "DefenseSpec::standard_set")]
    pub defenses: Vec<DefenseSpec>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "one")]
    pub clips_per_class: usize,
    /// Record per-iteration attack losses for adaptive cells.
    #[serde(default)]
    pub loss_curves: bool,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn default_attacks() -> Vec<AttackSpec> {
    vec![AttackSpec::clean(), AttackSpec::gray_box(), AttackSpec::bpda()]
}

impl ExperimentConfig {
    /// A config with default sections rooted at `dir`.
    pub fn rooted_at(dir: &Path) -> Self {
        Self {
            seed: 0,
            dataset: DatasetManifest::default(),
            data_dir: Some(dir.join("data")),
            checkpoints: Checkpoints {
                classifier: dir.join("models/classifier.vpt"),
                epsilon_model: dir.join("models/epsilon.vpt"),
                autoencoder: None,
                surrogate: None,
            },
            schedule: ScheduleConfig::default(),
            defenses: DefenseSpec::standard_set(),
            attacks: default_attacks(),
            clips_per_class: 1,
            loss_curves: false,
            workers: 1,
            training: TrainingConfig::default(),
            output_dir: dir.join("out"),
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("bad experiment config: {e}")))
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&bytes)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.clips_per_class == 0 {
            return Err(Error::Config("clips_per_class must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        for a in &self.attacks {
            a.config.validate()?;
        }
        Ok(())
    }

    /// Fails before any compute if a checkpoint the run needs is missing.
    pub fn check_checkpoints(&self) -> Result<()> {
        let mut need = vec![&self.checkpoints.classifier];
        if self.defenses.iter().any(DefenseSpec::needs_diffusion) {
            need.push(&self.checkpoints.epsilon_model);
            if let Some(ae) = &self.checkpoints.autoencoder {
                need.push(ae);
            }
        }
        for p in need {
            if !p.is_file() {
                return Err(Error::Config(format!("missing checkpoint {}", p.display())));
            }
        }
        Ok(())
    }

    /// Train or test clips: read from `data_dir` when present, otherwise regenerated.
    pub fn clips(&self, split: Split) -> Result<Vec<LabeledClip>> {
        if let Some(dir) = &self.data_dir {
            let p = dir.join(split_file(split));
            if p.is_file() {
                return load_dataset(&p);
            }
        }
        generate_split(&self.dataset, split)
    }
}

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => "train.vpt",
        Split::Test => "test.vpt",
    }
}

/// Writes both splits of the manifest to `dir`.
pub fn generate_data(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        save_dataset(&generate_split(manifest, split)?, Some(manifest), &dir.join(split_file(split)))?;
    }
    Ok(())
}

/// Frozen models a run evaluates.
pub struct Stack {
    pub classifier: VideoClassifier,
    pub eps: Option<Arc<EpsilonModel>>,
    pub codec: Arc<LatentCodec>,
    pub sched: Arc<RespacedSchedule>,
}

impl Stack {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.check_checkpoints()?;
        let ck = &cfg.checkpoints;
        let classifier = VideoClassifier::load(&ck.classifier)?;
        let diffusion = cfg.defenses.iter().any(DefenseSpec::needs_diffusion);
        let eps = if diffusion { Some(Arc::new(EpsilonModel::load(&ck.epsilon_model)?)) } else { None };
        let codec = match (&ck.autoencoder, diffusion) {
            (Some(p), true) => LatentCodec::Autoencoder(Box::new(Autoencoder::load(p)?)),
            _ => LatentCodec::Identity,
        };
        Ok(Self { classifier, eps, codec: Arc::new(codec), sched: cfg.schedule.build()? })
    }

    pub fn defense(&self, spec: &DefenseSpec) -> Result<Box<dyn Purifier>> {
        let parts = || -> Result<DiffusionParts> {
            let eps = self.eps.clone().ok_or_else(|| Error::Config("diffusion defense without an epsilon model".into()))?;
            Ok(DiffusionParts { eps, codec: self.codec.clone(), sched: self.sched.clone() })
        };
        Ok(match spec {
            DefenseSpec::None => Box::new(IdentityPurifier),
            DefenseSpec::Videopure(c) => {
                let p = parts()?;
                Box::new(VideoPure::new(p.eps, p.codec, p.sched, *c)?)
            }
            DefenseSpec::DiffpureDdpm { t_star } => Box::new(DiffpureDdpm::new(parts()?, *t_star)?),
            DefenseSpec::DiffpureDdim { t_star } => Box::new(DiffpureDdim::new(parts()?, *t_star)?),
            DefenseSpec::DdimInversion { t_star } => Box::new(DdimInversionBaseline::new(parts()?, *t_star)?),
            DefenseSpec::Jpeg { quality } => Box::new(Jpeg { quality: *quality }),
            DefenseSpec::Wavelet => Box::new(WaveletDenoise),
            DefenseSpec::TemporalShuffle => Box::new(TemporalShuffle),
        })
    }
}

/// Trains whatever checkpoints are missing; existing files are kept.
pub fn ensure_models(cfg: &ExperimentConfig) -> Result<()> {
    let ck = &cfg.checkpoints;
    let need_clf = !ck.classifier.is_file();
    let need_eps = !ck.epsilon_model.is_file();
    let need_ae = ck.autoencoder.as_ref().is_some_and(|p| !p.is_file());
    if !(need_clf || need_eps || need_ae) {
        return Ok(());
    }
    let train = cfg.clips(Split::Train)?;
    let test = cfg.clips(Split::Test)?;
    if need_clf {
        log::info!("training classifier");
        let (m, r) = train_classifier(&train, &test, &cfg.training.classifier)?;
        m.save(&ck.classifier, &r)?;
    }
    if need_ae {
        log::info!("training autoencoder");
        let (m, r) = train_autoencoder(&train, &test, &cfg.training.autoencoder)?;
        m.save(ck.autoencoder.as_ref().expect("checked above"), &r)?;
    }
    if need_eps {
        log::info!("training epsilon model");
        let codec = match &ck.autoencoder {
            Some(p) => LatentCodec::Autoencoder(Box::new(Autoencoder::load(p)?)),
            None => LatentCodec::Identity,
        };
        let sched = cfg.schedule.build()?;
        let (m, r) = train_epsilon_model(&train, &test, &codec, sched.base(), &cfg.training.diffusion)?;
        m.save(&ck.epsilon_model, &r)?;
    }
    Ok(())
}
