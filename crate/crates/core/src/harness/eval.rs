//! Evaluation runner over the test split.

use candle_core::{DType, Device};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Section};
use super::train::{Models, RESTORER, STDC};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::video::{Dataset, Split, VideoClip};

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Evaluate even when the checkpoint was trained under another config.
    pub allow_hash_mismatch: bool,
    pub label: Option<String>,
}

/// Restored clips of every test clip, in dataset order.
pub fn restore_test_split(models: &Models, ds: &Dataset, device: &Device) -> Result<Vec<(String, VideoClip)>> {
    let mut out = Vec::new();
    for rec in ds.split(Split::Test) {
        let x = rec.lq.to_tensor(device, DType::F32)?.unsqueeze(0)?;
        let y = models.restorer.one_step_restore(&x, &models.stdc)?;
        out.push((rec.name.clone(), VideoClip::from_tensor(&y.get(0)?)?.with_name(rec.name.clone())));
    }
    Ok(out)
}

/// Restores every test clip with a finished Stage-2 checkpoint and scores it
/// against the HQ reference.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if ckpt.header.stage != "stage2" || !ckpt.is_complete() {
        return Err(Error::Config(format!(
            "evaluation needs a finished stage2 checkpoint, got {} at {}/{}",
            ckpt.header.stage, ckpt.header.iteration, ckpt.header.total_iterations
        )));
    }
    let hash = cfg.hash(Section::Run);
    if !opts.allow_hash_mismatch {
        ckpt.require_hash(Section::Run.key(), &hash)?;
    }
    if ckpt.group(STDC).is_empty() || ckpt.group(RESTORER).is_empty() {
        return Err(Error::Config("checkpoint lacks model parameters".into()));
    }
    let device = Device::Cpu;
    let models = Models::from_checkpoint(cfg, ckpt, &device)?;
    let restored = restore_test_split(&models, ds, &device)?;
    let mut rows = Vec::new();
    for (rec, (_, clip)) in ds.split(Split::Test).zip(&restored) {
        rows.push(EvalReport::evaluate_clip(&rec.name, clip, &rec.hq, &rec.flows)?);
    }
    let label = opts.label.clone().unwrap_or_else(|| format!("restored-{}", priors_label(cfg)));
    EvalReport::from_rows(label, hash, rows)
}

pub fn priors_label(cfg: &RunConfig) -> &'static str {
    use crate::fusion::PriorsMode::*;
    match cfg.restorer.fusion.priors {
        None => "none",
        Spatial => "spatial",
        Temporal => "temporal",
        Both => "both",
    }
}

/// Scores the LQ inputs themselves.
pub fn evaluate_lq(cfg: &RunConfig, ds: &Dataset) -> Result<EvalReport> {
    let rows = ds
        .split(Split::Test)
        .map(|r| EvalReport::evaluate_clip(&r.name, &r.lq, &r.hq, &r.flows))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows("lq", cfg.hash(Section::Run), rows)
}

/// Identity restorer applied to the HQ clips.
pub fn evaluate_bypass(cfg: &RunConfig, ds: &Dataset) -> Result<EvalReport> {
    let rows = ds
        .split(Split::Test)
        .map(|r| EvalReport::evaluate_clip(&r.name, &r.hq, &r.hq, &r.flows))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows("bypass", cfg.hash(Section::Run), rows)
}
