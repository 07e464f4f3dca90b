//! Purifiers: the VideoPure defense and the baselines it is compared with.

mod baselines;
mod videopure;

pub use baselines::{
    haar_soft_threshold, jpeg_compress, DdimInversionBaseline, DiffusionParts, DiffpureDdim, DiffpureDdpm, IdentityPurifier, Jpeg,
    TemporalShuffle, WaveletDenoise,
};
pub use videopure::{VideoPure, VideoPureConfig, VoteMode};

use serde::{Deserialize, Serialize};

use crate::guidance::GuidanceTrace;
use crate::nn::{classify, VideoClassifier};
use crate::video::{FlowField, VideoTensor};
use crate::{Error, Result};

/// Output of `purify`: decoded candidates in vote-list order.
#[derive(Debug, Clone)]
pub struct Purified {
    pub candidates: Vec<VideoTensor>,
    /// Diffusion timestep each candidate came from (0 for the final one or non-diffusion defenses).
    pub timesteps: Vec<usize>,
    pub trace: GuidanceTrace,
}

impl Purified {
    pub fn single(video: VideoTensor) -> Self {
        Self { candidates: vec![video], timesteps: vec![0], trace: GuidanceTrace::default() }
    }
}

/// Everything one defended prediction produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurificationRecord {
    pub purifier: String,
    pub timesteps: Vec<usize>,
    pub predictions: Vec<usize>,
    pub voted: usize,
    pub trace: GuidanceTrace,
    #[serde(skip)]
    pub candidates: Vec<VideoTensor>,
}

/// A preprocessing defense `P(·)`.
///
/// `flow` is the clip's ground-truth flow when known; `seed` drives any randomness.
pub trait Purifier: Send + Sync {
    fn name(&self) -> String;

    /// True when `purify` ignores `seed`.
    fn is_deterministic(&self) -> bool;

    fn purify(&self, x: &VideoTensor, flow: Option<&FlowField>, seed: u64) -> Result<Purified>;

    /// Purifies, classifies every candidate and votes.
    fn predict(
        &self,
        x: &VideoTensor,
        flow: Option<&FlowField>,
        classifier: &VideoClassifier,
        seed: u64,
    ) -> Result<PurificationRecord> {
        let p = self.purify(x, flow, seed)?;
        let predictions = p.candidates.iter().map(|c| Ok(classify(classifier, c)?.1)).collect::<Result<Vec<_>>>()?;
        let voted = vote(&predictions)?;
        Ok(PurificationRecord {
            purifier: self.name(),
            timesteps: p.timesteps,
            predictions,
            voted,
            trace: p.trace,
            candidates: p.candidates,
        })
    }
}

/// Plurality vote; ties go to the class seen earliest in the list.
pub fn vote(classes: &[usize]) -> Result<usize> {
    if classes.is_empty() {
        return Err(Error::invalid("cannot vote over an empty list"));
    }
    let mut best = (classes[0], 0usize);
    for (i, &c) in classes.iter().enumerate() {
        if classes[..i].contains(&c) {
            continue;
        }
        let count = classes.iter().filter(|&&v| v == c).count();
        if count > best.1 {
            best = (c, count);
        }
    }
    Ok(best.0)
}
