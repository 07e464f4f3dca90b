use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{emit_plots, AttackKind, AttackSpec, ExperimentConfig, Metric, Stack};
use crate::attack::{adaptive_loss_curve, pgd, AttackTarget, Bpda, Eot, GrayBox};
use crate::container::write_atomic;
use crate::nn::VideoClassifier;
use crate::purify::Purifier;
use crate::rng::{derive_seed, rng_from_seed};
use crate::video::{LabeledClip, Split, VideoTensor};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub clip_id: String,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub candidate_predictions: Vec<usize>,
    pub candidate_timesteps: Vec<usize>,
    /// Attack loss before the first step and after each step, when tracked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<Vec<f64>>,
    pub attack_seconds: f64,
    pub purify_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub defense: String,
    pub attack: String,
    pub metric: Metric,
    pub accuracy: f64,
    pub clips: Vec<ClipOutcome>,
    pub purify_seconds_per_clip: f64,
}

impl CellReport {
    /// Mean loss curve over clips, if every clip tracked one.
    pub fn mean_loss_curve(&self) -> Option<Vec<f64>> {
        let curves: Vec<&Vec<f64>> = self.clips.iter().map(|c| c.loss_curve.as_ref()).collect::<Option<_>>()?;
        let n = curves.first()?.len();
        if curves.iter().any(|c| c.len() != n) {
            return None;
        }
        Some((0..n).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub defense: String,
    /// One accuracy per attack column.
    pub accuracies: Vec<f64>,
    /// Arithmetic mean of the row.
    pub average: f64,
    pub purify_seconds_per_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAverages {
    pub defense: String,
    pub standard_acc: Option<f64>,
    pub robust_acc_star: Option<f64>,
    pub robust_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub clip_ids: Vec<String>,
    pub defenses: Vec<String>,
    pub attacks: Vec<String>,
    pub grid: Vec<GridRow>,
    pub metric_averages: Vec<MetricAverages>,
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    /// Copy with every wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.grid {
            row.purify_seconds_per_clip = 0.0;
        }
        for c in &mut r.cells {
            c.purify_seconds_per_clip = 0.0;
            for o in &mut c.clips {
                o.attack_seconds = 0.0;
                o.purify_seconds = 0.0;
            }
        }
        r
    }

    pub fn cell(&self, defense: &str, attack: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.defense == defense && c.attack == attack)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("defense,{},average,seconds_per_clip\n", self.attacks.join(","));
        for r in &self.grid {
            let acc: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
            s += &format!("{},{},{:.4},{:.3}\n", r.defense, acc.join(","), r.average, r.purify_seconds_per_clip);
        }
        s
    }
}

/// `per_class` clips of every class, chosen by a seeded shuffle; ordered by class.
pub fn select_clips(clips: &[LabeledClip], per_class: usize, seed: u64) -> Result<Vec<LabeledClip>> {
    let mut by_class: BTreeMap<usize, Vec<&LabeledClip>> = BTreeMap::new();
    for c in clips {
        by_class.entry(c.label).or_default().push(c);
    }
    let mut out = Vec::new();
    for (label, mut v) in by_class {
        if v.len() < per_class {
            return Err(Error::Config(format!("class {label} has {} clips, {per_class} requested", v.len())));
        }
        v.shuffle(&mut rng_from_seed(derive_seed(seed, "select-clips", label as u64)));
        out.extend(v.into_iter().take(per_class).cloned());
    }
    Ok(out)
}

fn clip_seed(master: u64, clip_id: &str) -> u64 {
    derive_seed(master, &format!("clip/{clip_id}"), 0)
}

/// The input the defense sees for `clip` under `attack`, plus the attack loss curve when tracked.
pub fn craft_input(
    defense: &dyn Purifier,
    clf: &VideoClassifier,
    clip: &LabeledClip,
    attack: &AttackSpec,
    master_seed: u64,
    track_loss: bool,
) -> Result<(VideoTensor, Option<Vec<f64>>)> {
    let seed = clip_seed(master_seed, &clip.clip_id);
    let mut cfg = attack.config;
    cfg.seed = derive_seed(seed, "attack", attack.config.seed);
    let flow = Some(&clip.flow);
    let gray = GrayBox { classifier: clf };
    let bpda = |mode| Bpda { defense, classifier: clf, mode };
    let run = |target: &dyn AttackTarget| -> Result<(VideoTensor, Option<Vec<f64>>)> {
        if track_loss {
            let o = adaptive_loss_curve(&clip.video, flow, clip.label, target, &cfg)?;
            let mut curve = vec![o.initial_loss];
            curve.extend(o.losses);
            Ok((o.adversarial, Some(curve)))
        } else {
            Ok((pgd(&clip.video, flow, clip.label, target, &cfg)?, None))
        }
    };
    match attack.kind {
        AttackKind::Clean => Ok((clip.video.clone(), None)),
        AttackKind::GrayBox => run(&gray),
        AttackKind::Bpda { mode } => run(&bpda(mode)),
        AttackKind::EotBpda { mode } => run(&Eot { inner: &bpda(mode), reps: cfg.eot_reps }),
    }
}

fn evaluate_clip(
    defense: &dyn Purifier,
    clf: &VideoClassifier,
    clip: &LabeledClip,
    attack: &AttackSpec,
    master_seed: u64,
    track_loss: bool,
) -> Result<ClipOutcome> {
    let t0 = Instant::now();
    let (x, loss_curve) = craft_input(defense, clf, clip, attack, master_seed, track_loss)?;
    let attack_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let seed = clip_seed(master_seed, &clip.clip_id);
    let rec = defense.predict(&x, Some(&clip.flow), clf, derive_seed(seed, "defense", 0))?;
    let purify_seconds = t1.elapsed().as_secs_f64();
    Ok(ClipOutcome {
        clip_id: clip.clip_id.clone(),
        label: clip.label,
        predicted: rec.voted,
        correct: rec.voted == clip.label,
        candidate_predictions: rec.predictions,
        candidate_timesteps: rec.timesteps,
        loss_curve,
        attack_seconds,
        purify_seconds,
    })
}

/// Attacks (if any) and classifies every clip through `defense`.
pub fn evaluate_cell(
    defense: &dyn Purifier,
    clf: &VideoClassifier,
    clips: &[LabeledClip],
    attack: &AttackSpec,
    master_seed: u64,
    track_loss: bool,
    workers: usize,
) -> Result<CellReport> {
    if clips.is_empty() {
        return Err(Error::Config("no clips to evaluate".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let clips_out: Vec<ClipOutcome> = pool.install(|| {
        clips
            .par_iter()
            .map(|c| evaluate_clip(defense, clf, c, attack, master_seed, track_loss))
            .collect::<Result<Vec<_>>>()
    })?;
    let n = clips_out.len() as f64;
    let accuracy = clips_out.iter().filter(|c| c.correct).count() as f64 / n;
    let purify_seconds_per_clip = clips_out.iter().map(|c| c.purify_seconds).sum::<f64>() / n;
    Ok(CellReport {
        defense: defense.name(),
        attack: attack.label(),
        metric: attack.kind.metric(),
        accuracy,
        clips: clips_out,
        purify_seconds_per_clip,
    })
}

/// Fraction of clean clips the defended classifier gets right.
pub fn run_standard_acc(defense: &dyn Purifier, clf: &VideoClassifier, clips: &[LabeledClip], seed: u64) -> Result<f64> {
    Ok(evaluate_cell(defense, clf, clips, &AttackSpec::clean(), seed, false, 1)?.accuracy)
}

/// Accuracy on examples crafted against the classifier alone, evaluated through the defense.
pub fn run_robust_acc_star(
    defense: &dyn Purifier,
    clf: &VideoClassifier,
    clips: &[LabeledClip],
    attack: &crate::attack::AttackConfig,
    seed: u64,
) -> Result<f64> {
    let spec = AttackSpec { kind: AttackKind::GrayBox, config: *attack };
    Ok(evaluate_cell(defense, clf, clips, &spec, seed, false, 1)?.accuracy)
}

/// Accuracy under an adaptive (BPDA or EOT+BPDA) attack through the defense.
pub fn run_robust_acc(
    defense: &dyn Purifier,
    clf: &VideoClassifier,
    clips: &[LabeledClip],
    attack: &crate::attack::AttackConfig,
    kind: AttackKind,
    seed: u64,
) -> Result<f64> {
    if kind.metric() != Metric::RobustAcc {
        return Err(Error::Config(format!("{kind:?} is not an adaptive attack")));
    }
    Ok(evaluate_cell(defense, clf, clips, &AttackSpec { kind, config: *attack }, seed, false, 1)?.accuracy)
}

fn unique_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    labels
        .into_iter()
        .map(|l| {
            let n = seen.entry(l.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                l
            } else {
                format!("{l}#{n}")
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// The defense × attack grid with per-clip detail, row averages and timing.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let stack = Stack::load(cfg)?;
    let defenses = cfg.defenses.iter().map(|d| stack.defense(d)).collect::<Result<Vec<_>>>()?;
    let clips = select_clips(&cfg.clips(Split::Test)?, cfg.clips_per_class, cfg.seed)?;
    let d_labels = unique_labels(cfg.defenses.iter().map(|d| d.label()).collect());
    let a_labels = unique_labels(cfg.attacks.iter().map(|a| a.label()).collect());
    let mut cells = Vec::new();
    let mut grid = Vec::new();
    let mut metric_averages = Vec::new();
    for (d, dl) in defenses.iter().zip(&d_labels) {
        let mut row = Vec::new();
        let mut by_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut secs = Vec::new();
        for (a, al) in cfg.attacks.iter().zip(&a_labels) {
            log::info!("evaluating {dl} under {al}");
            let track = cfg.loss_curves && a.kind.metric() == Metric::RobustAcc;
            let mut cell = evaluate_cell(d.as_ref(), &stack.classifier, &clips, a, cfg.seed, track, cfg.workers)?;
            cell.defense = dl.clone();
            cell.attack = al.clone();
            row.push(cell.accuracy);
            secs.push(cell.purify_seconds_per_clip);
            let key = match a.kind.metric() {
                Metric::StandardAcc => "standard",
                Metric::RobustAccStar => "star",
                Metric::RobustAcc => "robust",
            };
            by_metric.entry(key).or_default().push(cell.accuracy);
            cells.push(cell);
        }
        grid.push(GridRow {
            defense: dl.clone(),
            average: mean(&row).unwrap_or(0.0),
            accuracies: row,
            purify_seconds_per_clip: mean(&secs).unwrap_or(0.0),
        });
        let get = |k: &str| by_metric.get(k).and_then(|v| mean(v));
        metric_averages.push(MetricAverages {
            defense: dl.clone(),
            standard_acc: get("standard"),
            robust_acc_star: get("star"),
            robust_acc: get("robust"),
        });
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        clip_ids: clips.iter().map(|c| c.clip_id.clone()).collect(),
        defenses: d_labels,
        attacks: a_labels,
        grid,
        metric_averages,
        cells,
    })
}

/// Writes `results.json` and `summary.csv`, then the plots; a plotting failure is logged, not fatal.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("results.json");
    write_atomic(&json, &serde_json::to_vec_pretty(report)?)?;
    let csv = dir.join("summary.csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    let mut written = vec![json, csv];
    match emit_plots(report, &dir.join("plots")) {
        Ok(p) => written.extend(p),
        Err(e) => log::warn!("plotting failed: {e}"),
    }
    Ok(written)
}
