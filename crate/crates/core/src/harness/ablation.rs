use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate_cell, select_clips, DefenseSpec, ExperimentConfig, Stack, SCHEMA_VERSION};
use crate::purify::{VideoPure, VideoPureConfig, VoteMode};
use crate::video::Split;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKnob {
    TStar,
    AlphaS,
    SingleStepK,
    Losses,
    ZtReplace,
}

impl FromStr for AblationKnob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown ablation knob {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub config: VideoPureConfig,
    /// One accuracy per attack column.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub knob: AblationKnob,
    pub attacks: Vec<String>,
    pub rows: Vec<AblationRow>,
    /// The unablated configuration, for sweeps whose rows exclude it.
    pub reference: Option<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("setting,{}\n", self.attacks.join(","));
        for r in self.rows.iter().chain(self.reference.iter()) {
            let acc: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
            s += &format!("{},{}\n", r.setting, acc.join(","));
        }
        s
    }
}

fn settings(base: &VideoPureConfig, knob: AblationKnob, values: Option<&[f64]>) -> Result<Vec<(String, VideoPureConfig)>> {
    let pick = |default: &[f64]| values.map(<[f64]>::to_vec).unwrap_or_else(|| default.to_vec());
    Ok(match knob {
        AblationKnob::TStar => pick(&[2.0, 4.0, 6.0, 8.0, 10.0])
            .into_iter()
            .map(|v| {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("t_star must be a non-negative integer, got {v}")));
                }
                Ok((format!("t_star={v}"), VideoPureConfig { t_star: v as usize, ..*base }))
            })
            .collect::<Result<_>>()?,
        AblationKnob::AlphaS => pick(&[0.0, -1.0, -2.0, -4.0, -8.0])
            .into_iter()
            .map(|v| {
                let mut c = *base;
                c.guidance.alpha_s = v;
                (format!("alpha_s={v}"), c)
            })
            .collect(),
        AblationKnob::SingleStepK => (0..=base.t_star)
            .map(|k| (format!("single_k={k}"), VideoPureConfig { vote: VoteMode::Single { index: k }, ..*base }))
            .collect(),
        AblationKnob::Losses => {
            let mut temporal = *base;
            temporal.guidance.lambda2 = 0.0;
            let mut spatial = *base;
            spatial.guidance.lambda1 = 0.0;
            let mut none = *base;
            none.guidance.alpha_s = 0.0;
            vec![
                ("both".into(), *base),
                ("temporal_only".into(), temporal),
                ("spatial_only".into(), spatial),
                ("none".into(), none),
            ]
        }
        AblationKnob::ZtReplace => vec![
            ("zt_replace=false".into(), VideoPureConfig { zt_replace: false, ..*base }),
            ("zt_replace=true".into(), VideoPureConfig { zt_replace: true, ..*base }),
        ],
    })
}

/// Sweeps one VideoPure knob under every attack of the config.
///
/// The base configuration is the config's first VideoPure defense (defaults otherwise).
pub fn run_ablation(cfg: &ExperimentConfig, knob: AblationKnob, values: Option<&[f64]>) -> Result<AblationReport> {
    cfg.validate()?;
    let base = cfg
        .defenses
        .iter()
        .find_map(|d| match d {
            DefenseSpec::Videopure(c) => Some(*c),
            _ => None,
        })
        .unwrap_or_default();
    let mut run_cfg = cfg.clone();
    run_cfg.defenses = vec![DefenseSpec::Videopure(base)];
    let stack = Stack::load(&run_cfg)?;
    let eps = stack.eps.clone().ok_or_else(|| Error::Config("ablation needs an epsilon model".into()))?;
    let clips = select_clips(&cfg.clips(Split::Test)?, cfg.clips_per_class, cfg.seed)?;
    let eval = |setting: String, c: VideoPureConfig| -> Result<AblationRow> {
        let vp = VideoPure::new(eps.clone(), stack.codec.clone(), stack.sched.clone(), c)?;
        let mut accuracies = Vec::new();
        for a in &cfg.attacks {
            log::info!("ablation {setting} under {}", a.label());
            accuracies.push(evaluate_cell(&vp, &stack.classifier, &clips, a, cfg.seed, false, cfg.workers)?.accuracy);
        }
        Ok(AblationRow { setting, config: c, accuracies })
    };
    let rows = settings(&base, knob, values)?
        .into_iter()
        .map(|(s, c)| eval(s, c))
        .collect::<Result<Vec<_>>>()?;
    let reference = match knob {
        AblationKnob::SingleStepK => Some(eval("vote".into(), VideoPureConfig { vote: VoteMode::All, ..base })?),
        _ => None,
    };
    Ok(AblationReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        knob,
        attacks: cfg.attacks.iter().map(|a| a.label()).collect(),
        rows,
        reference,
    })
}
