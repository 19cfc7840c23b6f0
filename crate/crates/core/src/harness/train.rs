//! Training loops for Stage 0 (latent autoencoder), Stage 1 (codebooks),
//! Stage 1' (code prediction on LQ input) and Stage 2 (restoration).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use super::checkpoint::{Checkpoint, HistoryEntry};
use super::config::{RunConfig, Schedule, Section};
use crate::backbone::{groups as bgroups, Restorer};
use crate::error::{Error, Result};
use crate::fusion::PriorsMode;
use crate::losses::{
    discriminator_step, stage1_loss, stage1p_loss, stage2_loss, Discriminator, FeatureExtractor, LossReport, TemporalPlan,
};
use crate::metrics::psnr;
use crate::nn::{mse, scalar, AdamW, ParamStore};
use crate::rng::keyed_rng;
use crate::stdc::{argmax, groups as sgroups, Priors, StdcModel};
use crate::video::{Dataset, Split, VideoClip};

pub const STDC: &str = "stdc/";
pub const RESTORER: &str = "restorer/";
pub const DISC: &str = "disc/";
pub const OPT: &str = "opt/";
pub const DISC_OPT: &str = "dopt/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    Stage0,
    Stage1,
    Stage1p,
    Stage2,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Stage0 => "stage0",
            StageId::Stage1 => "stage1",
            StageId::Stage1p => "stage1p",
            StageId::Stage2 => "stage2",
        }
    }

    pub fn schedule(self, cfg: &RunConfig) -> &Schedule {
        match self {
            StageId::Stage0 => &cfg.stage0,
            StageId::Stage1 => &cfg.stage1,
            StageId::Stage1p => &cfg.stage1p,
            StageId::Stage2 => &cfg.stage2,
        }
    }

    /// Config sections a checkpoint of this stage depends on.
    fn sections(self) -> &'static [Section] {
        match self {
            StageId::Stage0 => &[Section::Vae],
            StageId::Stage1 | StageId::Stage1p => &[Section::Stdc],
            StageId::Stage2 => &[Section::Run, Section::Stdc, Section::Vae],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from a partial checkpoint of the same stage.
    pub resume: Option<Checkpoint>,
    /// Stop (and return a partial checkpoint) after this many iterations.
    pub stop_after: Option<usize>,
}

/// Every trainable model of the pipeline, each on its own parameter store.
pub struct Models {
    pub stdc_store: ParamStore,
    pub stdc: StdcModel,
    pub restorer_store: ParamStore,
    pub restorer: Restorer,
    pub disc_store: ParamStore,
    pub disc: Discriminator,
}

impl Models {
    /// Builds freshly initialised models; `restorer_seed` seeds the restorer
    /// store and everything else uses the Stage-1 seed.
    pub fn new(cfg: &RunConfig, restorer_seed: u64, device: &Device) -> Result<Self> {
        let seed = cfg.stage_seed(&cfg.stage1);
        let stdc_store = ParamStore::new(seed, "stdc", DType::F32, device);
        let stdc = StdcModel::new(&cfg.stdc, &stdc_store)?;
        let restorer_store = ParamStore::new(restorer_seed, "restorer", DType::F32, device);
        let restorer = Restorer::new(&cfg.restorer, &cfg.stdc, &restorer_store)?;
        let disc_store = ParamStore::new(seed, "disc", DType::F32, device);
        let disc = Discriminator::new(&disc_store, cfg.discriminator_width)?;
        Ok(Self { stdc_store, stdc, restorer_store, restorer, disc_store, disc })
    }

    /// Rebuilds the models of a finished Stage-2 checkpoint.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        let m = Self::new(cfg, cfg.stage_seed(&cfg.stage2), device)?;
        m.stdc_store.load_arrays(&ckpt.group(STDC), &[])?;
        m.restorer_store.load_arrays(&ckpt.group(RESTORER), &[])?;
        Ok(m)
    }
}

/// Clip tensors of a dataset, `(1, T, 3, H, W)` each.
pub struct TrainData {
    pub names: Vec<String>,
    pub hq: Vec<Tensor>,
    pub lq: Vec<Tensor>,
    pub plans: Vec<TemporalPlan>,
    pub test_hq: Vec<VideoClip>,
}

impl TrainData {
    pub fn new(ds: &Dataset, device: &Device) -> Result<Self> {
        let mut d = Self { names: vec![], hq: vec![], lq: vec![], plans: vec![], test_hq: vec![] };
        for rec in ds.split(Split::Train) {
            d.names.push(rec.name.clone());
            d.hq.push(rec.hq.to_tensor(device, DType::F32)?.unsqueeze(0)?);
            d.lq.push(rec.lq.to_tensor(device, DType::F32)?.unsqueeze(0)?);
            d.plans.push(TemporalPlan::new(&rec.flows, DType::F32, device)?);
        }
        if d.hq.is_empty() {
            return Err(Error::Config("dataset has no training clips".into()));
        }
        d.test_hq = ds.split(Split::Test).map(|r| r.hq.clone()).collect();
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.hq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hq.is_empty()
    }
}

/// Clip indices of the batch drawn at `iteration`: a keyed shuffle, so a
/// resumed run sees exactly the batches of an uninterrupted one.
pub fn batch_indices(seed: u64, stage: StageId, iteration: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = keyed_rng(seed, iteration as u64, &format!("batch:{}", stage.name()));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    (0..batch).map(|i| order[i % n]).collect()
}

fn gather(ts: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<&Tensor> = idx.iter().map(|&i| &ts[i]).collect();
    Ok(Tensor::cat(&picked, 0)?)
}

fn gather_priors(ps: &[Priors], idx: &[usize]) -> Result<Priors> {
    let cat = |f: fn(&Priors) -> &Tensor| -> Result<Tensor> {
        let picked: Vec<&Tensor> = idx.iter().map(|&i| f(&ps[i])).collect();
        Ok(Tensor::cat(&picked, 0)?)
    };
    Ok(Priors { f_s: cat(|p| &p.f_s)?, f_t: cat(|p| &p.f_t)?, idx_s: cat(|p| &p.idx_s)?, idx_t: cat(|p| &p.idx_t)? })
}

/// Fraction of `(B, N, K)` logits whose argmax equals the target index.
pub fn code_accuracy(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let k = logits.dim(2)?;
    let rows: Vec<Vec<f64>> = logits.detach().to_dtype(DType::F64)?.reshape(((), k))?.to_vec2()?;
    let t: Vec<u32> = targets.flatten_all()?.to_vec1()?;
    if t.len() != rows.len() {
        return Err(Error::Shape(format!("{} targets for {} rows", t.len(), rows.len())));
    }
    let hits = rows.iter().zip(&t).filter(|(r, &s)| argmax(r) == s as usize).count();
    Ok(hits as f64 / rows.len().max(1) as f64)
}

fn hashes(cfg: &RunConfig, stage: StageId) -> BTreeMap<String, String> {
    stage.sections().iter().map(|s| (s.key().to_string(), cfg.hash(*s))).collect()
}

/// A finished checkpoint of `stage` whose recorded hash of `section` matches.
fn require_done(ckpt: &Checkpoint, stage: StageId, cfg: &RunConfig, section: Section) -> Result<()> {
    if ckpt.header.stage != stage.name() {
        return Err(Error::Config(format!("expected a {} checkpoint, got {}", stage.name(), ckpt.header.stage)));
    }
    if !ckpt.is_complete() {
        return Err(Error::Config(format!(
            "{} checkpoint is partial ({}/{} iterations)",
            stage.name(),
            ckpt.header.iteration,
            ckpt.header.total_iterations
        )));
    }
    ckpt.require_hash(section.key(), &cfg.hash(section))
}

fn divergence(stage: StageId, iteration: usize) -> Error {
    Error::Divergence { stage: stage.name().into(), iteration }
}

fn step(opt: &mut AdamW, loss: &Tensor, stage: StageId, iteration: usize) -> Result<f64> {
    let grads = loss.backward()?;
    opt.step(&grads).map_err(|_| divergence(stage, iteration))
}

/// Shared bookkeeping of one stage run.
struct Run {
    stage: StageId,
    seed: u64,
    ckpt: Checkpoint,
    start: usize,
    end: usize,
}

impl Run {
    fn begin(cfg: &RunConfig, stage: StageId, opts: &TrainOptions) -> Result<Self> {
        let sched = stage.schedule(cfg);
        let mut ckpt = Checkpoint::new(stage.name(), sched.iterations);
        ckpt.header.hashes = hashes(cfg, stage);
        if let Some(r) = &opts.resume {
            if r.header.stage != stage.name() {
                return Err(Error::Config(format!("cannot resume {} from a {} checkpoint", stage.name(), r.header.stage)));
            }
            for (k, v) in &ckpt.header.hashes {
                r.require_hash(k, v)?;
            }
            ckpt = r.clone();
        }
        let start = ckpt.header.iteration;
        let end = opts.stop_after.map_or(sched.iterations, |s| s.min(sched.iterations));
        Ok(Self { stage, seed: cfg.stage_seed(sched), ckpt, start, end })
    }

    fn resumed(&self) -> bool {
        self.start > 0
    }

    fn batch(&self, it: usize, n: usize, b: usize) -> Vec<usize> {
        batch_indices(self.seed, self.stage, it, n, b)
    }

    fn record(&mut self, it: usize, report: LossReport, grad_norm: f64, accuracy: Option<[f64; 2]>, log_every: usize) -> Result<()> {
        if !report.is_finite() {
            return Err(divergence(self.stage, it));
        }
        if log_every > 0 && it % log_every == 0 {
            log::info!("{} iter {it}: total {:.5} |g| {:.3}", self.stage.name(), report.total, grad_norm);
        }
        self.ckpt.header.history.push(HistoryEntry { iteration: it, report, grad_norm, accuracy });
        self.ckpt.header.iteration = it + 1;
        Ok(())
    }

    /// Loads stores and optimizer moments from a resumed checkpoint.
    fn restore(&self, groups: &[(&str, &ParamStore)], opts: &mut [(&str, &mut AdamW)]) -> Result<()> {
        if !self.resumed() {
            return Ok(());
        }
        for (prefix, store) in groups {
            store.load_arrays(&self.ckpt.group(prefix), &[])?;
        }
        for (prefix, opt) in opts.iter_mut() {
            opt.load_state(&self.ckpt.group(prefix))?;
        }
        Ok(())
    }

    fn finish(mut self, groups: &[(&str, &ParamStore)], opts: &[(&str, &AdamW)]) -> Result<Checkpoint> {
        self.ckpt.arrays.clear();
        for (prefix, store) in groups {
            self.ckpt.insert_group(prefix, store.to_arrays(&[])?);
        }
        for (prefix, opt) in opts {
            self.ckpt.insert_group(prefix, opt.state_arrays()?);
        }
        Ok(self.ckpt)
    }
}

/// Stage 0: per-frame latent autoencoder on the HQ training clips.
pub fn train_stage0(cfg: &RunConfig, data: &TrainData, opts: &TrainOptions) -> Result<Checkpoint> {
    let stage = StageId::Stage0;
    let sched = &cfg.stage0;
    let device = data.hq[0].device().clone();
    let mut run = Run::begin(cfg, stage, opts)?;
    let models = Models::new(cfg, run.seed, &device)?;
    let store = &models.restorer_store;
    let vae = &models.restorer.vae;
    let mut opt = AdamW::new(store.vars(&[bgroups::VAE_ENCODER, bgroups::VAE_DECODER]), cfg.optimizer.adamw(sched.lr))?;
    run.restore(&[(RESTORER, store)], &mut [(OPT, &mut opt)])?;
    for it in run.start..run.end {
        let x = gather(&data.hq, &run.batch(it, data.len(), sched.batch_size))?;
        let loss = mse(&vae.decode_raw(&vae.encode(&x)?)?, &x)?;
        let v = scalar(&loss)?;
        let report = LossReport { rec_pixel: v, total: v, ..Default::default() };
        if !report.is_finite() {
            return Err(divergence(stage, it));
        }
        let g = step(&mut opt, &loss, stage, it)?;
        run.record(it, report, g, None, sched.log_every)?;
    }
    if run.ckpt.is_complete() && !data.test_hq.is_empty() {
        let mut total = 0.0;
        for clip in &data.test_hq {
            let x = clip.to_tensor(&device, DType::F32)?.unsqueeze(0)?;
            let y = VideoClip::from_tensor(&vae.decode(&vae.encode(&x)?)?.get(0)?)?;
            total += psnr(&y, clip)?;
        }
        run.ckpt.header.extra.insert("heldout_psnr".into(), total / data.test_hq.len() as f64);
    }
    run.finish(&[(RESTORER, store)], &[(OPT, &opt)])
}

/// Mean absolute error of clamped Stage-1 reconstructions of every
/// training clip.
pub fn stage1_reconstruction_l1(stdc: &StdcModel, data: &TrainData) -> Result<f64> {
    let mut total = 0.0;
    for x in &data.hq {
        let y = stdc.autoencode(x)?.recon.detach().clamp(0.0, 1.0)?;
        total += scalar(&(y - x)?.abs()?.mean_all()?)?;
    }
    Ok(total / data.len() as f64)
}

/// Stage 1: dual-codebook autoencoder on HQ clips, alternating with the
/// discriminator once the adversarial term is active.
pub fn train_stage1(cfg: &RunConfig, data: &TrainData, opts: &TrainOptions) -> Result<Checkpoint> {
    let stage = StageId::Stage1;
    let sched = &cfg.stage1;
    let w = &cfg.weights;
    let device = data.hq[0].device().clone();
    let mut run = Run::begin(cfg, stage, opts)?;
    let models = Models::new(cfg, run.seed, &device)?;
    let (stdc, disc) = (&models.stdc, &models.disc);
    let trainable = [sgroups::ENCODER, sgroups::TEMPORAL, sgroups::SPATIAL, sgroups::CODEBOOK_S, sgroups::CODEBOOK_T, sgroups::DECODER];
    let mut opt = AdamW::new(models.stdc_store.vars(&trainable), cfg.optimizer.adamw(sched.lr))?;
    let mut dopt = AdamW::new(models.disc_store.vars(&[]), cfg.optimizer.adamw(sched.lr))?;
    let stores = [(STDC, &models.stdc_store), (DISC, &models.disc_store)];
    run.restore(&stores, &mut [(OPT, &mut opt), (DISC_OPT, &mut dopt)])?;
    let fe = FeatureExtractor::new(cfg.feature_seed, DType::F32, &device)?;
    for it in run.start..run.end {
        let x = gather(&data.hq, &run.batch(it, data.len(), sched.batch_size))?;
        let fwd = stdc.autoencode(&x)?;
        let adv = w.lambda_adv > 0.0 && it >= sched.adv_start;
        let loss = stage1_loss(&fwd.recon, &x, &fwd.feature_pairs(), adv.then_some(disc), &fe, w)?;
        let mut report = loss.report;
        if !report.is_finite() {
            return Err(divergence(stage, it));
        }
        let g = step(&mut opt, &loss.total, stage, it)?;
        if adv {
            let d = discriminator_step(&x, &fwd.recon, disc)?;
            report.adv_d = scalar(&d)?;
            step(&mut dopt, &d, stage, it)?;
        }
        run.record(it, report, g, None, sched.log_every)?;
    }
    if run.ckpt.is_complete() {
        let l1 = stage1_reconstruction_l1(stdc, data)?;
        run.ckpt.header.extra.insert("final_l1".into(), l1);
        let (qs, qt) = stdc.nearest_codes(&Tensor::cat(&data.hq.iter().collect::<Vec<_>>(), 0)?)?;
        for (key, q) in [("codes_used_s", qs), ("codes_used_t", qt)] {
            let mut idx: Vec<u32> = q.indices.flatten_all()?.to_vec1()?;
            idx.sort_unstable();
            idx.dedup();
            run.ckpt.header.extra.insert(key.into(), idx.len() as f64);
        }
    }
    run.finish(&stores, &[(OPT, &opt), (DISC_OPT, &dopt)])
}

/// HQ code indices and quantized values of each training clip under the
/// given (frozen Stage-1) model.
pub struct CodeTargets {
    pub idx_s: Vec<Tensor>,
    pub idx_t: Vec<Tensor>,
    pub val_s: Vec<Tensor>,
    pub val_t: Vec<Tensor>,
}

impl CodeTargets {
    pub fn new(stdc: &StdcModel, data: &TrainData) -> Result<Self> {
        let mut c = Self { idx_s: vec![], idx_t: vec![], val_s: vec![], val_t: vec![] };
        for x in &data.hq {
            let (qs, qt) = stdc.nearest_codes(x)?;
            c.idx_s.push(qs.indices);
            c.idx_t.push(qt.indices);
            c.val_s.push(qs.values.detach());
            c.val_t.push(qt.values.detach());
        }
        Ok(c)
    }
}

/// Spatial and temporal code accuracy on LQ inputs over every training clip.
pub fn stage1p_accuracy(stdc: &StdcModel, data: &TrainData, targets: &CodeTargets) -> Result<[f64; 2]> {
    let mut acc = [0.0; 2];
    for (i, x) in data.lq.iter().enumerate() {
        let (ls, lt, _, _) = stdc.code_logits(x)?;
        acc[0] += code_accuracy(&ls, &targets.idx_s[i])?;
        acc[1] += code_accuracy(&lt, &targets.idx_t[i])?;
    }
    Ok(acc.map(|a| a / data.len() as f64))
}

pub const STAGE1P_FROZEN: [&str; 3] = [sgroups::DECODER, sgroups::CODEBOOK_S, sgroups::CODEBOOK_T];

fn check_frozen(before: &BTreeMap<String, Vec<u8>>, after: &BTreeMap<String, Vec<u8>>, what: &str) -> Result<()> {
    let changed: Vec<&String> = before.iter().filter(|(k, v)| after.get(*k) != Some(v)).map(|(k, _)| k).collect();
    if changed.is_empty() && before.len() == after.len() {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what}: frozen parameters changed: {changed:?}")))
    }
}

/// Stage 1': finetunes the encoder paths and trains both code transformers
/// on LQ input against the HQ codes of the Stage-1 model; decoder and
/// codebooks stay fixed.
pub fn train_stage1p(cfg: &RunConfig, data: &TrainData, stage1: &Checkpoint, opts: &TrainOptions) -> Result<Checkpoint> {
    let stage = StageId::Stage1p;
    let sched = &cfg.stage1p;
    require_done(stage1, StageId::Stage1, cfg, Section::Stdc)?;
    let device = data.hq[0].device().clone();
    let mut run = Run::begin(cfg, stage, opts)?;
    let models = Models::new(cfg, run.seed, &device)?;
    let store = &models.stdc_store;
    let stdc = &models.stdc;
    store.load_arrays(&stage1.group(STDC), &[])?;
    let targets = CodeTargets::new(stdc, data)?;
    let frozen = store.fingerprint(&STAGE1P_FROZEN)?;
    let trainable = [sgroups::ENCODER, sgroups::TEMPORAL, sgroups::SPATIAL, sgroups::TRANSFORMER_S, sgroups::TRANSFORMER_T];
    let mut opt = AdamW::new(store.vars(&trainable), cfg.optimizer.adamw(sched.lr))?;
    run.restore(&[(STDC, store)], &mut [(OPT, &mut opt)])?;
    for it in run.start..run.end {
        let idx = run.batch(it, data.len(), sched.batch_size);
        let x = gather(&data.lq, &idx)?;
        let (s_s, s_t) = (gather(&targets.idx_s, &idx)?, gather(&targets.idx_t, &idx)?);
        let (v_s, v_t) = (gather(&targets.val_s, &idx)?, gather(&targets.val_t, &idx)?);
        let (ls, lt, z_s, z_t) = stdc.code_logits(&x)?;
        let loss = stage1p_loss(&ls, &lt, &s_s, &s_t, &[(z_s, v_s), (z_t, v_t)], &cfg.weights)?;
        let acc = [code_accuracy(&ls, &s_s)?, code_accuracy(&lt, &s_t)?];
        if !loss.report.is_finite() {
            return Err(divergence(stage, it));
        }
        let g = step(&mut opt, &loss.total, stage, it)?;
        run.record(it, loss.report, g, Some(acc), sched.log_every)?;
    }
    check_frozen(&frozen, &store.fingerprint(&STAGE1P_FROZEN)?, "stage1p")?;
    if run.ckpt.is_complete() {
        let [a_s, a_t] = stage1p_accuracy(stdc, data, &targets)?;
        run.ckpt.header.extra.insert("accuracy_s".into(), a_s);
        run.ckpt.header.extra.insert("accuracy_t".into(), a_t);
    }
    run.finish(&[(STDC, store)], &[(OPT, &opt)])
}

/// Largest absolute difference between two tensors of equal shape.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    scalar(&(a - b)?.abs()?.flatten_all()?.max(0)?)
}

/// Iteration-0 contract of Stage 2: with the zero-initialised velocity head
/// the restoration of `x_lq` equals the autoencoder round trip of `x_lq`.
/// Returns the largest deviation.
pub fn zero_velocity_deviation(restorer: &Restorer, x_lq: &Tensor, priors: Option<&Priors>) -> Result<f64> {
    let parts = restorer.restore_parts(x_lq, priors)?;
    let round_trip = restorer.vae.decode_raw(&restorer.vae_encode(x_lq)?)?;
    Ok(max_abs_diff(&parts.velocity, &parts.velocity.zeros_like()?)?.max(max_abs_diff(&parts.x_raw, &round_trip)?))
}

pub const STAGE2_FROZEN_RESTORER: [&str; 1] = [bgroups::VAE_ENCODER];
pub const STAGE2_TRAINABLE: [&str; 3] = [bgroups::DIT, bgroups::VAE_DECODER, bgroups::FUSION];

/// Stage 2: velocity transformer, latent decoder and fusion on LQ/HQ pairs
/// with the prior extractor and latent encoder frozen.
pub fn train_stage2(
    cfg: &RunConfig,
    data: &TrainData,
    stdc_ckpt: &Checkpoint,
    vae_ckpt: &Checkpoint,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    let stage = StageId::Stage2;
    let sched = &cfg.stage2;
    require_done(stdc_ckpt, StageId::Stage1p, cfg, Section::Stdc)?;
    require_done(vae_ckpt, StageId::Stage0, cfg, Section::Vae)?;
    let device = data.hq[0].device().clone();
    let mut run = Run::begin(cfg, stage, opts)?;
    let models = Models::new(cfg, run.seed, &device)?;
    let (stdc, restorer) = (&models.stdc, &models.restorer);
    models.stdc_store.load_arrays(&stdc_ckpt.group(STDC), &[])?;
    let vae_arrays = vae_ckpt.group(RESTORER);
    models.restorer_store.load_arrays(&vae_arrays, &[bgroups::VAE_ENCODER, bgroups::VAE_DECODER])?;
    let mut opt = AdamW::new(models.restorer_store.vars(&STAGE2_TRAINABLE), cfg.optimizer.adamw(sched.lr))?;
    let stores = [(STDC, &models.stdc_store), (RESTORER, &models.restorer_store)];
    run.restore(&stores, &mut [(OPT, &mut opt)])?;
    let frozen_stdc = models.stdc_store.fingerprint(&[])?;
    let frozen_vae = models.restorer_store.fingerprint(&STAGE2_FROZEN_RESTORER)?;
    let initial_trainable = models.restorer_store.fingerprint(&STAGE2_TRAINABLE)?;

    let use_priors = cfg.restorer.fusion.priors != PriorsMode::None;
    let mut z_hq = Vec::with_capacity(data.len());
    let mut priors = Vec::with_capacity(data.len());
    for (x, y) in data.lq.iter().zip(&data.hq) {
        z_hq.push(restorer.vae_encode(y)?.detach());
        if use_priors {
            priors.push(stdc.extract_priors(x)?);
        }
    }
    if !run.resumed() {
        let first = priors.first();
        let dev = zero_velocity_deviation(restorer, &data.lq[0], first)?;
        run.ckpt.header.extra.insert("init_zero_velocity_deviation".into(), dev);
        if dev > 1e-6 {
            return Err(Error::Contract(format!("stage2 iteration 0 restoration deviates from the autoencoder round trip by {dev:e}")));
        }
    }
    let fe = FeatureExtractor::new(cfg.feature_seed, DType::F32, &device)?;
    for it in run.start..run.end {
        let idx = run.batch(it, data.len(), sched.batch_size);
        let x = gather(&data.lq, &idx)?;
        let y = gather(&data.hq, &idx)?;
        let zy = gather(&z_hq, &idx)?;
        let p = if use_priors { Some(gather_priors(&priors, &idx)?) } else { None };
        let plans: Vec<&TemporalPlan> = idx.iter().map(|&i| &data.plans[i]).collect();
        let parts = restorer.restore_parts(&x, p.as_ref())?;
        let loss = stage2_loss(&parts.z_hat, &zy, &parts.x_raw, &y, &plans, &fe, &cfg.weights)?;
        if !loss.report.is_finite() {
            return Err(divergence(stage, it));
        }
        let g = step(&mut opt, &loss.total, stage, it)?;
        run.record(it, loss.report, g, None, sched.log_every)?;
    }
    check_frozen(&frozen_stdc, &models.stdc_store.fingerprint(&[])?, "stage2 prior extractor")?;
    check_frozen(&frozen_vae, &models.restorer_store.fingerprint(&STAGE2_FROZEN_RESTORER)?, "stage2 latent encoder")?;
    let after = models.restorer_store.fingerprint(&STAGE2_TRAINABLE)?;
    let changed = initial_trainable.iter().filter(|(k, v)| after.get(*k) != Some(v)).count();
    run.ckpt.header.extra.insert("trainable_changed".into(), changed as f64);
    run.finish(&stores, &[(OPT, &opt)])
}
