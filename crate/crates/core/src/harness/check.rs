//! Property-check runner: builds tiny fixtures and evaluates every
//! mechanism-level invariant, reporting instead of raising.

use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{self, TrainData, TrainOptions, RESTORER, STDC};
use crate::backbone::{noise_inject, one_step_update, DitConfig, Restorer, RestorerConfig, VaeConfig};
use crate::error::{Error, Result};
use crate::flow::{warp, FlowField, FlowFieldSequence, Frame};
use crate::fusion::{Fusion, FusionConfig, ModulationSharing};
use crate::gradcheck::{check_gradient, relative_error};
use crate::losses::{code_cross_entropy, code_feature_loss, feat_loss, stage2_loss, temporal_loss, FeatureExtractor, LossWeights, TemporalPlan};
use crate::nn::{mse, scalar, ParamStore};
use crate::rng::keyed_rng;
use crate::stdc::{groups as sgroups, quantize, Codebook, StdcConfig, StdcModel};
use crate::video::{generate_dataset, make_toy_clip, DegradeConfig, MotionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Algebra,
    Gradients,
    Oracles,
    Freeze,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "algebra" => Ok(Suite::Algebra),
            "gradients" => Ok(Suite::Gradients),
            "oracles" => Ok(Suite::Oracles),
            "freeze" => Ok(Suite::Freeze),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite {other:?} (algebra|gradients|oracles|freeze|all)")),
        }
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Algebra => "algebra",
            Suite::Gradients => "gradients",
            Suite::Oracles => "oracles",
            Suite::Freeze => "freeze",
            Suite::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    /// Measured quantity; the check passes when `value <= threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.outcomes.iter().find(|o| o.name == name)
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            s.push_str(&format!(
                "{} {}/{} value={:.3e} threshold={:.1e} ({:.2}s){}\n",
                if o.passed { "PASS" } else { "FAIL" },
                o.suite,
                o.name,
                o.value,
                o.threshold,
                o.seconds,
                if o.detail.is_empty() { String::new() } else { format!(" {}", o.detail) }
            ));
        }
        s
    }
}

type CheckFn = fn() -> Result<(f64, String)>;

fn run_one(suite: Suite, name: &str, threshold: f64, f: CheckFn) -> CheckOutcome {
    let start = Instant::now();
    let (passed, value, detail) = match f() {
        Ok((v, d)) => (v <= threshold, v, d),
        Err(e) => (false, f64::NAN, format!("error: {e}")),
    };
    let o = CheckOutcome {
        suite: suite.name().into(),
        name: name.into(),
        passed,
        value,
        threshold,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("{} {}/{} {:.3e} in {:.2}s", if passed { "pass" } else { "FAIL" }, o.suite, o.name, value, o.seconds);
    o
}

/// `(suite, name, threshold, check)` for every registered check.
pub fn registry() -> Vec<(Suite, &'static str, f64, CheckFn)> {
    vec![
        (Suite::Algebra, "one_step_oracle_inversion", 1e-6, one_step_oracle_inversion),
        (Suite::Algebra, "zero_init_transparency", 1e-6, zero_init_transparency),
        (Suite::Algebra, "zero_head_round_trip", 0.0, zero_head_round_trip),
        (Suite::Gradients, "fuse_shared", 1e-4, fuse_gradients_shared),
        (Suite::Gradients, "fuse_per_layer", 1e-4, fuse_gradients_per_layer),
        (Suite::Gradients, "feat_routing_codebook_s", 1e-4, || feat_routing(sgroups::CODEBOOK_S)),
        (Suite::Gradients, "feat_routing_codebook_t", 1e-4, || feat_routing(sgroups::CODEBOOK_T)),
        (Suite::Gradients, "feat_routing_spatial", 1e-4, || feat_routing(sgroups::SPATIAL)),
        (Suite::Gradients, "feat_routing_temporal", 1e-4, || feat_routing(sgroups::TEMPORAL)),
        (Suite::Gradients, "feat_routing_encoder", 1e-4, || feat_routing(sgroups::ENCODER)),
        (Suite::Gradients, "cf_codebook_blocked", 0.0, cf_codebook_blocked),
        (Suite::Gradients, "cf_encoder_side", 1e-4, cf_encoder_side),
        (Suite::Gradients, "stage2_loss_pixels", 1e-4, stage2_gradient_pixels),
        (Suite::Gradients, "stage2_loss_latent", 1e-4, stage2_gradient_latent),
        (Suite::Oracles, "quantization_exhaustive", 0.0, quantization_exhaustive),
        (Suite::Oracles, "quantization_ties", 0.0, quantization_ties),
        (Suite::Oracles, "temporal_static_zero", 0.0, temporal_static_zero),
        (Suite::Oracles, "temporal_scalar_loop", 1e-6, temporal_scalar_loop),
        (Suite::Oracles, "warp_integer_exact", 0.0, warp_integer_exact),
        (Suite::Oracles, "cross_entropy_uniform", 1e-9, cross_entropy_uniform),
        (Suite::Freeze, "stage1p_freeze", 0.0, stage1p_freeze),
        (Suite::Freeze, "stage2_freeze", 0.0, stage2_freeze),
    ]
}

pub fn run(suite: Suite) -> CheckReport {
    let outcomes = registry()
        .into_iter()
        .filter(|(s, ..)| suite == Suite::All || *s == suite)
        .map(|(s, name, thr, f)| run_one(s, name, thr, f))
        .collect();
    CheckReport { outcomes }
}

// ---------------------------------------------------------------------------
// Fixtures

pub fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = keyed_rng(seed, 0, "check");
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn tiny_stdc_config() -> StdcConfig {
    StdcConfig {
        codebook_size: 8,
        code_dim: 4,
        spatial_stride: 4,
        temporal_stride: 1,
        encoder_width: 6,
        temporal_heads: 1,
        transformer_layers: 1,
        transformer_heads: 1,
        transformer_width: 8,
        max_grid: [4, 4, 4],
    }
}

pub fn tiny_restorer_config() -> RestorerConfig {
    RestorerConfig {
        vae: VaeConfig { latent_dim: 2, stride: 4, width: 6 },
        dit: DitConfig { layers: 2, width: 8, heads: 2, max_grid: [4, 4, 4], embed_kernel: 3 },
        fusion: FusionConfig { mlp_hidden: 8, attn_width: 8, ..Default::default() },
        t_star: 1.0,
    }
}

/// Overwrites every parameter under `prefixes` with scaled uniform noise.
fn randomise(store: &ParamStore, prefixes: &[&str], seed: u64, scale: f64) -> Result<()> {
    for (i, (name, v)) in store.vars(prefixes).into_iter().enumerate() {
        store.set(&name, &(rand_tensor(v.dims(), seed + i as u64, v.dtype())? * scale)?)?;
    }
    Ok(())
}

/// A run config small enough for a pipeline pass in seconds.
pub fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.dataset.frames = 3;
    cfg.dataset.height = 16;
    cfg.dataset.width = 16;
    cfg.dataset.train_clips = 2;
    cfg.dataset.test_clips = 1;
    cfg.dataset.degrade = DegradeConfig::fixed(1.0, 0.02, 2, 60, 0);
    for s in [&mut cfg.stage0, &mut cfg.stage1, &mut cfg.stage1p, &mut cfg.stage2] {
        s.iterations = 2;
        s.batch_size = 2;
        s.log_every = 0;
    }
    cfg.stage1.adv_start = 0;
    cfg
}

// ---------------------------------------------------------------------------
// Algebra

fn one_step_oracle_inversion() -> Result<(f64, String)> {
    let mut rng = keyed_rng(11, 0, "tstar");
    let mut worst = 0.0f64;
    for k in 0..10 {
        let z = rand_tensor(&[1, 3, 4, 4, 8], 100 + k, DType::F64)?;
        let e = rand_tensor(&[1, 3, 4, 4, 8], 200 + k, DType::F64)?;
        let t: f64 = rng.gen_range(1e-3..=1.0);
        let zt = noise_inject(&z, &e, t)?;
        let v = (&e - &z)?;
        let back = one_step_update(&zt, &v, t)?;
        worst = worst.max(max_abs(&values(&back)?, &values(&z)?));
    }
    Ok((worst, "10 random (z, eps, t*) triples".into()))
}

fn tiny_restorer(dtype: DType, seed: u64, fusion: FusionConfig) -> Result<(Restorer, ParamStore)> {
    let store = ParamStore::new(seed, "restorer", dtype, &Device::Cpu);
    let cfg = RestorerConfig { fusion, ..tiny_restorer_config() };
    Ok((Restorer::new(&cfg, &tiny_stdc_config(), &store)?, store))
}

/// Velocity with freshly initialised fusion against the fusion-free
/// forward, with a non-zero velocity head so the comparison is not vacuous.
fn zero_init_transparency() -> Result<(f64, String)> {
    let (r, store) = tiny_restorer(DType::F32, 3, tiny_restorer_config().fusion)?;
    randomise(&store, &["dit.head"], 40, 1.0)?;
    let z = rand_tensor(&[2, 3, 4, 4, 2], 5, DType::F32)?;
    let fs = rand_tensor(&[2, 3, 4, 4, 4], 6, DType::F32)?;
    let ft = rand_tensor(&[2, 3, 4, 4, 4], 7, DType::F32)?;
    let with = values(&r.predict_velocity(&z, 1.0, Some((&fs, &ft)))?)?;
    let without = values(&r.predict_velocity(&z, 1.0, None)?)?;
    if with.iter().all(|v| *v == 0.0) {
        return Err(Error::Contract("velocity is identically zero; comparison would be vacuous".into()));
    }
    Ok((max_abs(&with, &without), "f32, 2 blocks, shared modulation".into()))
}

fn zero_head_round_trip() -> Result<(f64, String)> {
    let (r, _) = tiny_restorer(DType::F32, 4, tiny_restorer_config().fusion)?;
    let ss = ParamStore::new(5, "stdc", DType::F32, &Device::Cpu);
    let stdc = StdcModel::new(&tiny_stdc_config(), &ss)?;
    let x = rand_tensor(&[1, 3, 3, 16, 16], 8, DType::F32)?.affine(0.5, 0.5)?;
    let before = r.velocity_evals();
    let out = r.one_step_restore(&x, &stdc)?;
    let evals = r.velocity_evals() - before;
    let rt = r.vae_decode(&r.vae_encode(&x)?)?;
    let diff = max_abs(&values(&out)?, &values(&rt)?);
    Ok((diff + (evals as f64 - 1.0).abs(), format!("{evals} velocity evaluation(s)")))
}

// ---------------------------------------------------------------------------
// Gradients

fn fuse_gradients(sharing: ModulationSharing) -> Result<(f64, String)> {
    let cfg = FusionConfig { sharing, mlp_hidden: 5, attn_width: 4, ..Default::default() };
    let store = ParamStore::new(2, "fusion", DType::F64, &Device::Cpu);
    let f = Fusion::new(&store, &cfg, 3, 6, 2)?;
    randomise(&store, &[], 90, 1.0)?;
    let x = rand_tensor(&[1, 4, 6], 1, DType::F64)?;
    let fs = rand_tensor(&[1, 1, 2, 2, 3], 2, DType::F64)?;
    let ft = rand_tensor(&[1, 1, 2, 2, 3], 3, DType::F64)?;
    let w = rand_tensor(&[1, 4, 6], 4, DType::F64)?;
    let loss = |x: &Tensor, fs: &Tensor, ft: &Tensor| -> Result<Tensor> {
        let ctx = f.context(fs, ft)?;
        let y = f.fuse(1, &f.fuse(0, x, &ctx)?, &ctx)?;
        Ok((y * &w)?.sum_all()?)
    };
    let r = [
        check_gradient(&|v| loss(v, &fs, &ft), &x, 1e-5)?.rel_error,
        check_gradient(&|v| loss(&x, v, &ft), &fs, 1e-5)?.rel_error,
        check_gradient(&|v| loss(&x, &fs, v), &ft, 1e-5)?.rel_error,
    ];
    Ok((r.iter().cloned().fold(0.0, f64::max), format!("tokens/f_s/f_t rel err {:.1e}/{:.1e}/{:.1e}", r[0], r[1], r[2])))
}

fn fuse_gradients_shared() -> Result<(f64, String)> {
    fuse_gradients(ModulationSharing::Shared)
}

fn fuse_gradients_per_layer() -> Result<(f64, String)> {
    fuse_gradients(ModulationSharing::PerLayer)
}

/// Compares the autograd gradient of `full` with respect to parameter
/// `name` against central differences of `routed`, over at most 24 evenly
/// spaced elements of the parameter.
fn param_gradient_error(
    store: &ParamStore,
    name: &str,
    full: &dyn Fn() -> Result<Tensor>,
    routed: &dyn Fn() -> Result<f64>,
    h: f64,
) -> Result<f64> {
    let var = store.var(name).ok_or_else(|| Error::Shape(format!("no parameter {name}")))?;
    let grads = full()?.backward()?;
    let analytic_all = match grads.get(var.as_tensor()) {
        Some(g) => values(g)?,
        None => vec![0.0; var.elem_count()],
    };
    let base = values(var.as_tensor())?;
    let dims = var.dims().to_vec();
    let n = base.len();
    let picks: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|i| i * n / 24).collect() };
    let set = |v: &[f64]| -> Result<()> { store.set(name, &Tensor::from_slice(v, dims.as_slice(), &Device::Cpu)?) };
    let mut numeric = Vec::with_capacity(picks.len());
    let mut x = base.clone();
    for &i in &picks {
        x[i] = base[i] + h;
        set(&x)?;
        let fp = routed()?;
        x[i] = base[i] - h;
        set(&x)?;
        let fm = routed()?;
        x[i] = base[i];
        numeric.push((fp - fm) / (2.0 * h));
    }
    set(&base)?;
    let analytic: Vec<f64> = picks.iter().map(|&i| analytic_all[i]).collect();
    if numeric.iter().all(|v| *v == 0.0) {
        return Err(Error::Contract(format!("{name}: routed term has zero gradient; check would be vacuous")));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn tiny_stdc(seed: u64) -> Result<(StdcModel, ParamStore)> {
    let store = ParamStore::new(seed, "stdc", DType::F64, &Device::Cpu);
    let m = StdcModel::new(&tiny_stdc_config(), &store)?;
    // spread the codebooks so several entries are in use
    randomise(&store, &[sgroups::CODEBOOK_S, sgroups::CODEBOOK_T], 70, 0.5)?;
    Ok((m, store))
}

/// The parameter of `group` with the largest gradient norm under `full`,
/// so the finite-difference comparison is not drowned in rounding noise.
fn strongest_param(store: &ParamStore, group: &str, full: &dyn Fn() -> Result<Tensor>) -> Result<String> {
    let grads = full()?.backward()?;
    let mut best: Option<(f64, String)> = None;
    for (name, v) in store.vars(&[group]) {
        let norm = match grads.get(v.as_tensor()) {
            Some(g) => scalar(&g.sqr()?.sum_all()?)?.sqrt(),
            None => 0.0,
        };
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, name));
        }
    }
    best.map(|(_, n)| n).ok_or_else(|| Error::Shape(format!("no parameters under {group}")))
}

/// Codebook-side parameters must receive exactly the gradient of the
/// codebook term, encoder-side parameters exactly `beta` times the gradient
/// of the commitment term.
fn feat_routing(group: &'static str) -> Result<(f64, String)> {
    let (m, store) = tiny_stdc(21)?;
    let x = rand_tensor(&[1, 3, 3, 8, 8], 22, DType::F64)?.affine(0.5, 0.5)?;
    let beta = LossWeights::default().beta;
    let base = m.autoencode(&x)?;
    let (idx_s, idx_t) = (base.q_s.indices.clone(), base.q_t.indices.clone());
    let (zs0, zt0) = (base.z_s.detach(), base.z_t.detach());
    let (qs0, qt0) = (base.q_s.values.detach(), base.q_t.values.detach());
    let full = || -> Result<Tensor> {
        let f = m.autoencode(&x)?;
        feat_loss(&f.feature_pairs(), beta)
    };
    let codebook_side = group == sgroups::CODEBOOK_S || group == sgroups::CODEBOOK_T;
    let routed = || -> Result<f64> {
        if codebook_side {
            let a = mse(&zs0, &m.codebook_s.lookup(&idx_s)?)?;
            let b = mse(&zt0, &m.codebook_t.lookup(&idx_t)?)?;
            scalar(&(a + b)?)
        } else {
            let (_, z_s, z_t) = m.paths(&x)?;
            scalar(&((mse(&z_s, &qs0)? + mse(&z_t, &qt0)?)? * beta)?)
        }
    };
    let name = strongest_param(&store, group, &full)?;
    let err = param_gradient_error(&store, &name, &full, &routed, 1e-6)?;
    let term = if codebook_side { "codebook term" } else { "beta * commitment term" };
    Ok((err, format!("{name} vs {term}")))
}

fn cf_fixture() -> Result<(StdcModel, ParamStore, Tensor, Tensor, Tensor)> {
    let (m, store) = tiny_stdc(31)?;
    let hq = rand_tensor(&[1, 3, 3, 8, 8], 32, DType::F64)?.affine(0.5, 0.5)?;
    let lq = (&hq + (rand_tensor(&[1, 3, 3, 8, 8], 33, DType::F64)? * 0.1)?)?;
    let (qs, qt) = m.nearest_codes(&hq)?;
    // keep the lookup attached to the codebook graph so a missing stop
    // gradient would show up as a codebook gradient
    let vs = m.codebook_s.lookup(&qs.indices)?;
    let vt = m.codebook_t.lookup(&qt.indices)?;
    Ok((m, store, lq, vs, vt))
}

fn cf_codebook_blocked() -> Result<(f64, String)> {
    let (m, store, lq, vs, vt) = cf_fixture()?;
    let (_, z_s, z_t) = m.paths(&lq)?;
    let loss = code_feature_loss(&[(z_s, vs), (z_t, vt)])?;
    let grads = loss.backward()?;
    let mut worst = 0.0f64;
    for (_, v) in store.vars(&[sgroups::CODEBOOK_S, sgroups::CODEBOOK_T]) {
        if let Some(g) = grads.get(v.as_tensor()) {
            worst = worst.max(values(g)?.iter().fold(0.0, |a, b| a.max(b.abs())));
        }
    }
    Ok((worst, "max |dL_cf/d codebook|".into()))
}

fn cf_encoder_side() -> Result<(f64, String)> {
    let (m, store, lq, vs, vt) = cf_fixture()?;
    let (vs0, vt0) = (vs.detach(), vt.detach());
    let full = || -> Result<Tensor> {
        let (_, z_s, z_t) = m.paths(&lq)?;
        code_feature_loss(&[(z_s, vs.clone()), (z_t, vt.clone())])
    };
    let routed = || -> Result<f64> {
        let (_, z_s, z_t) = m.paths(&lq)?;
        scalar(&(mse(&z_s, &vs0)? + mse(&z_t, &vt0)?)?)
    };
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for g in [sgroups::ENCODER, sgroups::SPATIAL, sgroups::TEMPORAL] {
        let name = strongest_param(&store, g, &full)?;
        worst = worst.max(param_gradient_error(&store, &name, &full, &routed, 1e-6)?);
        names.push(name);
    }
    Ok((worst, names.join(", ")))
}

struct Stage2Fixture {
    fe: FeatureExtractor,
    plan: TemporalPlan,
    x: Tensor,
    xh: Tensor,
    z: Tensor,
    zh: Tensor,
    w: LossWeights,
}

fn stage2_fixture() -> Result<Stage2Fixture> {
    let fe = FeatureExtractor::new(2, DType::F64, &Device::Cpu)?;
    let (clip, flows) = make_toy_clip(&MotionSpec::translate(0.5, 0.25), 3, 16, 16, 1)?;
    let x = clip.to_tensor(&Device::Cpu, DType::F64)?.narrow(2, 4, 8)?.narrow(3, 4, 8)?;
    let crop = |f: &FlowField| FlowField::from_fn(8, 8, |y, xx| f.at(y + 4, xx + 4));
    let flows = FlowFieldSequence {
        forward: flows.forward.iter().map(crop).collect(),
        backward: flows.backward.iter().map(crop).collect(),
    };
    let plan = TemporalPlan::new(&flows, DType::F64, &Device::Cpu)?;
    let x = x.unsqueeze(0)?.contiguous()?;
    let xh = (&x + (rand_tensor(&[1, 3, 3, 8, 8], 3, DType::F64)? * 0.1)?)?;
    Ok(Stage2Fixture {
        fe,
        plan,
        x,
        xh,
        z: rand_tensor(&[1, 3, 2, 2, 2], 1, DType::F64)?,
        zh: rand_tensor(&[1, 3, 2, 2, 2], 2, DType::F64)?,
        w: LossWeights { lambda_temp: 1.0, ..Default::default() },
    })
}

fn stage2_gradient_pixels() -> Result<(f64, String)> {
    let f = stage2_fixture()?;
    let r = check_gradient(&|xh| Ok(stage2_loss(&f.zh, &f.z, xh, &f.x, &[&f.plan], &f.fe, &f.w)?.total), &f.xh, 1e-6)?;
    Ok((r.rel_error, "d total / d x_hat, 3x8x8 clip, lambda_temp = 1".into()))
}

fn stage2_gradient_latent() -> Result<(f64, String)> {
    let f = stage2_fixture()?;
    let r = check_gradient(&|zh| Ok(stage2_loss(zh, &f.z, &f.xh, &f.x, &[&f.plan], &f.fe, &f.w)?.total), &f.zh, 1e-6)?;
    Ok((r.rel_error, "d total / d z_hat".into()))
}

// ---------------------------------------------------------------------------
// Oracles

/// Index of the nearest row, first index among equal distances.
pub fn exhaustive_nearest(token: &[f64], entries: &[Vec<f64>]) -> usize {
    let dist = |e: &Vec<f64>| token.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut order: Vec<(f64, usize)> = entries.iter().map(dist).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order[0].1
}

fn dual_lookup_mismatches(z: &Tensor, cb: &Codebook) -> Result<usize> {
    let q = quantize(z, cb)?;
    let d = cb.dim();
    let entries: Vec<Vec<f64>> = values(&cb.entries)?.chunks(d).map(|c| c.to_vec()).collect();
    let tokens = values(z)?;
    let idx: Vec<u32> = q.indices.flatten_all()?.to_vec1()?;
    let vals = values(&q.values)?;
    let st = values(&q.st)?;
    let mut bad = 0;
    for (i, tok) in tokens.chunks(d).enumerate() {
        let want = exhaustive_nearest(tok, &entries);
        let row_ok = vals[i * d..(i + 1) * d] == entries[want][..];
        let st_ok = max_abs(&st[i * d..(i + 1) * d], &entries[want]) <= 1e-12;
        if idx[i] as usize != want || !row_ok || !st_ok {
            bad += 1;
        }
    }
    Ok(bad)
}

fn quantization_exhaustive() -> Result<(f64, String)> {
    let mut bad = 0;
    for g in 0..100u64 {
        let cb_s = Codebook::new(rand_tensor(&[16, 8], 1000 + g, DType::F64)?)?;
        let cb_t = Codebook::new(rand_tensor(&[16, 8], 2000 + g, DType::F64)?)?;
        bad += dual_lookup_mismatches(&rand_tensor(&[1, 2, 3, 3, 8], 3000 + g, DType::F64)?, &cb_s)?;
        bad += dual_lookup_mismatches(&rand_tensor(&[1, 2, 3, 3, 8], 4000 + g, DType::F64)?, &cb_t)?;
    }
    Ok((bad as f64, "100 grids per codebook, K=16, d=8".into()))
}

fn quantization_ties() -> Result<(f64, String)> {
    // duplicated rows and a token equidistant from two distinct rows
    let e = Tensor::new(&[[1f64, 0.], [0., 1.], [1., 0.], [-1., 0.]], &Device::Cpu)?;
    let cb = Codebook::new(e)?;
    let z = Tensor::new(&[[2f64, 0.], [0., 0.], [0., 3.]], &Device::Cpu)?.reshape((1, 1, 1, 3, 2))?;
    let got: Vec<u32> = quantize(&z, &cb)?.indices.flatten_all()?.to_vec1()?;
    let want = [0u32, 0, 1];
    let bad = got.iter().zip(want).filter(|(a, b)| **a != *b).count() + dual_lookup_mismatches(&z, &cb)?;
    Ok((bad as f64, format!("indices {got:?}")))
}

fn temporal_static_zero() -> Result<(f64, String)> {
    let frame = rand_tensor(&[1, 3, 8, 8], 9, DType::F64)?;
    let x = Tensor::cat(&[&frame, &frame, &frame, &frame], 0)?;
    let v = scalar(&temporal_loss(&x, &FlowFieldSequence::zeros(3, 8, 8))?)?;
    let (clip, flows) = make_toy_clip(&MotionSpec::stationary(), 4, 16, 16, 3)?;
    let w = scalar(&temporal_loss(&clip.to_tensor(&Device::Cpu, DType::F64)?, &flows)?)?;
    Ok((v.abs().max(w.abs()), "static clip with zero flow and a stationary toy clip".into()))
}

/// Scalar-loop temporal term on a `(T, 3, H, W)` array.
pub fn temporal_loss_scalar(x: &[f64], t: usize, h: usize, w: usize, flows: &FlowFieldSequence) -> f64 {
    let at = |f: usize, c: usize, y: i64, xx: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let xx = xx.clamp(0, w as i64 - 1) as usize;
        x[((f * 3 + c) * h + y) * w + xx]
    };
    let mut total = 0.0;
    for i in 1..t - 1 {
        for (src, dst, flow) in [(i, i + 1, &flows.forward[i]), (i, i - 1, &flows.backward[i - 1])] {
            let mut sum = 0.0;
            let mut count = 0usize;
            for y in 0..h {
                for xx in 0..w {
                    let (dx, dy) = flow.at(y, xx);
                    let sx = xx as f64 + dx as f64;
                    let sy = y as f64 + dy as f64;
                    if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
                        continue;
                    }
                    count += 1;
                    let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
                    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
                    for c in 0..3 {
                        let top = at(src, c, y0, x0) * (1.0 - ax) + at(src, c, y0, x0 + 1) * ax;
                        let bottom = at(src, c, y0 + 1, x0) * (1.0 - ax) + at(src, c, y0 + 1, x0 + 1) * ax;
                        let v = top * (1.0 - ay) + bottom * ay;
                        sum += (v - at(dst, c, y as i64, xx as i64)).abs();
                    }
                }
            }
            if count > 0 {
                total += sum / (3 * count) as f64;
            }
        }
    }
    total
}

fn temporal_scalar_loop() -> Result<(f64, String)> {
    let mut rng = keyed_rng(4, 0, "check-flows");
    let mut worst = 0.0f64;
    for k in 0..10 {
        let x = rand_tensor(&[3, 3, 8, 8], 20 + k, DType::F64)?;
        let mut f = || FlowField::from_fn(8, 8, |_, _| (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)));
        let flows = FlowFieldSequence { forward: vec![f(), f()], backward: vec![f(), f()] };
        let got = scalar(&temporal_loss(&x, &flows)?)?;
        worst = worst.max((got - temporal_loss_scalar(&values(&x)?, 3, 8, 8, &flows)).abs());
    }
    Ok((worst, "10 random 3-frame 8x8 instances".into()))
}

fn warp_integer_exact() -> Result<(f64, String)> {
    let mut rng = keyed_rng(5, 0, "check-warp");
    let (h, w) = (8, 8);
    let frame = Frame::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect())?;
    let mut worst = 0.0f64;
    for (dx, dy) in [(1i64, 0i64), (-2, 1), (3, -3), (0, 0)] {
        let (out, valid) = warp(&frame, &FlowField::constant(h, w, dx as f32, dy as f32))?;
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                let inside = (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy);
                if inside != valid[y * w + x] {
                    worst = f64::INFINITY;
                }
                if inside {
                    for c in 0..3 {
                        let d = out.at(y, x, c) - frame.at(sy as usize, sx as usize, c);
                        worst = worst.max(d.abs() as f64);
                    }
                }
            }
        }
    }
    Ok((worst, "bit-exact copies for integer shifts".into()))
}

fn cross_entropy_uniform() -> Result<(f64, String)> {
    let (b, n, k) = (2, 6, 16);
    let logits = Tensor::zeros((b, n, k), DType::F64, &Device::Cpu)?;
    let targets = Tensor::from_vec((0..(b * n) as u32).map(|i| i % k as u32).collect::<Vec<_>>(), (b, n), &Device::Cpu)?;
    let ce = scalar(&code_cross_entropy(&logits, &targets)?)?;
    Ok(((ce / n as f64 - (k as f64).ln()).abs(), "per-token CE of uniform logits vs ln K".into()))
}

// ---------------------------------------------------------------------------
// Freeze contracts

fn changed(a: &std::collections::BTreeMap<String, crate::array_io::Array>, b: &std::collections::BTreeMap<String, crate::array_io::Array>, prefixes: &[&str]) -> (usize, usize) {
    let mut total = 0;
    let mut diff = 0;
    for (k, v) in a {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            total += 1;
            if b.get(k) != Some(v) {
                diff += 1;
            }
        }
    }
    (diff, total)
}

fn fixture_data(cfg: &RunConfig) -> Result<TrainData> {
    TrainData::new(&generate_dataset(&cfg.dataset)?, &Device::Cpu)
}

fn stage1p_freeze() -> Result<(f64, String)> {
    let cfg = fixture_config();
    let data = fixture_data(&cfg)?;
    let s1 = train::train_stage1(&cfg, &data, &TrainOptions::default())?;
    let s1p = train::train_stage1p(&cfg, &data, &s1, &TrainOptions::default())?;
    let (a, b) = (s1.group(STDC), s1p.group(STDC));
    let (frozen, nf) = changed(&a, &b, &train::STAGE1P_FROZEN);
    let (moved, nt) = changed(&a, &b, &[sgroups::ENCODER, sgroups::TRANSFORMER_S, sgroups::TRANSFORMER_T]);
    if moved == 0 {
        return Err(Error::Contract("no trainable parameter moved; freeze check would be vacuous".into()));
    }
    Ok((frozen as f64, format!("{frozen}/{nf} frozen tensors changed, {moved}/{nt} trainable tensors changed")))
}

fn stage2_freeze() -> Result<(f64, String)> {
    let cfg = fixture_config();
    let data = fixture_data(&cfg)?;
    let s0 = train::train_stage0(&cfg, &data, &TrainOptions::default())?;
    let s1 = train::train_stage1(&cfg, &data, &TrainOptions::default())?;
    let s1p = train::train_stage1p(&cfg, &data, &s1, &TrainOptions::default())?;
    let s2 = train::train_stage2(&cfg, &data, &s1p, &s0, &TrainOptions::default())?;
    let (stdc_changed, ns) = changed(&s1p.group(STDC), &s2.group(STDC), &[""]);
    let (enc_changed, ne) = changed(&s0.group(RESTORER), &s2.group(RESTORER), &train::STAGE2_FROZEN_RESTORER);
    let moved = s2.header.extra.get("trainable_changed").copied().unwrap_or(0.0);
    if moved == 0.0 {
        return Err(Error::Contract("no trainable parameter moved; freeze check would be vacuous".into()));
    }
    Ok((
        (stdc_changed + enc_changed) as f64,
        format!("prior extractor {stdc_changed}/{ns}, latent encoder {enc_changed}/{ne} changed; {moved} trainable tensors moved"),
    ))
}
