//! Training objectives for the codebook, code-prediction and restoration
//! stages, the adversarial discriminator and the flow-warped temporal term.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::flow::{warp_taps, FlowField, FlowFieldSequence};
use crate::nn::{log_softmax_last, mse, scalar, ParamStore};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_adv: f64,
    pub lambda_ce: f64,
    pub lambda_temp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.25, lambda_adv: 0.8, lambda_ce: 0.5, lambda_temp: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage1p,
    Stage2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub per: f64,
    pub feat: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub ce_s: f64,
    pub ce_t: f64,
    pub cf: f64,
    pub rec_latent: f64,
    pub rec_pixel: f64,
    pub temp: f64,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum of the constituents active in `stage`.
    pub fn weighted_total(&self, stage: Stage, w: &LossWeights) -> f64 {
        match stage {
            Stage::Stage1 => self.l1 + self.per + self.feat + w.lambda_adv * self.adv_g,
            Stage::Stage1p => self.cf + w.lambda_ce * (self.ce_s + self.ce_t),
            Stage::Stage2 => self.rec_latent + self.rec_pixel + self.per + w.lambda_temp * self.temp,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l1, self.per, self.feat, self.adv_g, self.adv_d, self.ce_s, self.ce_t, self.cf, self.rec_latent,
            self.rec_pixel, self.temp, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A differentiable total together with its scalar breakdown.
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: Tensor,
    pub report: LossReport,
}

/// Fixed random conv pyramid used as the perceptual feature map. Its
/// weights are plain tensors, never registered as trainable.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    levels: Vec<Conv2d>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = keyed_rng(seed, 0, "feature-extractor");
        let specs = [(3usize, 8usize, 1usize), (8, 16, 2), (16, 32, 2)];
        let mut levels = Vec::new();
        for (cin, cout, stride) in specs {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            let w = Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?;
            let cfg = Conv2dConfig { padding: 1, stride, ..Default::default() };
            levels.push(Conv2d::new(w, None, cfg));
        }
        Ok(Self { levels })
    }

    /// Feature maps of `(N, 3, H, W)` images, one per level.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x.clone();
        for c in &self.levels {
            h = leaky_relu(&c.forward(&h)?, 0.2)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Sum over levels of the mean squared feature difference of two
    /// `(B, T, 3, H, W)` videos.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(shape_err!("perceptual inputs {:?} vs {:?}", a.dims(), b.dims()));
        }
        let (bb, t, c, h, w) = a.dims5()?;
        let fa = self.features(&a.reshape((bb * t, c, h, w))?)?;
        let fb = self.features(&b.reshape((bb * t, c, h, w))?)?;
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for (x, y) in fa.iter().zip(&fb) {
            total = (total + mse(x, y)?)?;
        }
        Ok(total)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.maximum(&(x * slope)?)
}

/// Per-frame conv classifier producing one logit per frame.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(p: &ParamStore, width: usize) -> Result<Self> {
        let chans = [(3, width, 2), (width, 2 * width, 2), (2 * width, 2 * width, 2), (2 * width, 1, 1)];
        let convs = chans
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| p.conv2d(&format!("conv{i}"), a, b, 3, s))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    /// `(B, T, 3, H, W)` to `(B * T)` logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let mut y = x.reshape((b * t, c, h, w))?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if i < last {
                y = leaky_relu(&y, 0.2)?;
            }
        }
        Ok(y.flatten_from(1)?.mean(1)?)
    }
}

pub const PROB_CLAMP: f64 = 1e-6;

fn clamped_prob(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(logits)?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// `-[log D(real) + log(1 - D(fake))]`, frame means, from logits.
pub fn discriminator_loss_from_logits(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let lr = clamped_prob(real)?.log()?.mean_all()?;
    let lf = clamped_prob(fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((lr + lf)?.neg()?)
}

/// Discriminator objective with the generator output detached.
pub fn discriminator_step(x_hq: &Tensor, x_hat: &Tensor, disc: &Discriminator) -> Result<Tensor> {
    discriminator_loss_from_logits(&disc.logits(x_hq)?, &disc.logits(&x_hat.detach())?)
}

/// Non-saturating generator term `-log D(x_hat)`.
pub fn generator_adv_loss(x_hat: &Tensor, disc: &Discriminator) -> Result<Tensor> {
    Ok(clamped_prob(&disc.logits(x_hat)?)?.log()?.mean_all()?.neg()?)
}

/// `sum over paths of MSE(sg(z), z_q) + beta * MSE(z, sg(z_q))`.
pub fn feat_loss(pairs: &[(Tensor, Tensor)], beta: f64) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (z, zq) in pairs {
        let codebook = mse(&z.detach(), zq)?;
        let commit = (mse(z, &zq.detach())? * beta)?;
        let term = (codebook + commit)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| shape_err!("no latent pairs"))
}

/// `sum over paths of MSE(z, sg(z_q))`.
pub fn code_feature_loss(pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (z, zq) in pairs {
        let term = mse(z, &zq.detach())?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| shape_err!("no latent pairs"))
}

/// Cross-entropy of `(B, N, K)` logits against `(B, N)` or `(B, t, h, w)`
/// `u32` targets, summed over tokens and averaged over the batch.
pub fn code_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, n, k) = logits.dims3()?;
    if targets.elem_count() != b * n {
        return Err(shape_err!("{} targets for {b}x{n} tokens", targets.elem_count()));
    }
    let t: Vec<u32> = targets.flatten_all()?.to_vec1()?;
    if let Some(bad) = t.iter().find(|&&v| v as usize >= k) {
        return Err(shape_err!("target index {bad} outside [0, {k})"));
    }
    let logp = log_softmax_last(&logits.reshape((b * n, k))?)?;
    let picked = logp.gather(&targets.flatten_all()?.unsqueeze(1)?, 1)?;
    Ok((picked.sum_all()?.neg()? / b as f64)?)
}

/// Stage-1 objective on a decoded reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss(
    x_hat: &Tensor,
    x_hq: &Tensor,
    pairs: &[(Tensor, Tensor)],
    disc: Option<&Discriminator>,
    fe: &FeatureExtractor,
    w: &LossWeights,
) -> Result<Loss> {
    if x_hat.dims() != x_hq.dims() {
        return Err(shape_err!("reconstruction {:?} vs target {:?}", x_hat.dims(), x_hq.dims()));
    }
    let l1 = (x_hat - x_hq)?.abs()?.mean_all()?;
    let per = fe.distance(x_hat, x_hq)?;
    let feat = feat_loss(pairs, w.beta)?;
    let mut total = ((&l1 + &per)? + &feat)?;
    let mut report = LossReport { l1: scalar(&l1)?, per: scalar(&per)?, feat: scalar(&feat)?, ..Default::default() };
    if let Some(d) = disc {
        let adv = generator_adv_loss(x_hat, d)?;
        report.adv_g = scalar(&adv)?;
        total = (total + (adv * w.lambda_adv)?)?;
    }
    report.total = scalar(&total)?;
    Ok(Loss { total, report })
}

/// Stage-1' objective: code cross-entropies plus the latent-matching term.
pub fn stage1p_loss(
    logits_s: &Tensor,
    logits_t: &Tensor,
    s_s: &Tensor,
    s_t: &Tensor,
    pairs: &[(Tensor, Tensor)],
    w: &LossWeights,
) -> Result<Loss> {
    let ce_s = code_cross_entropy(logits_s, s_s)?;
    let ce_t = code_cross_entropy(logits_t, s_t)?;
    let cf = code_feature_loss(pairs)?;
    let total = (&cf + ((&ce_s + &ce_t)? * w.lambda_ce)?)?;
    let report = LossReport {
        ce_s: scalar(&ce_s)?,
        ce_t: scalar(&ce_t)?,
        cf: scalar(&cf)?,
        total: scalar(&total)?,
        ..Default::default()
    };
    Ok(Loss { total, report })
}

/// Precomputed bilinear taps for one flow field, as tensors.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    index: [Tensor; 4],
    weight: [Tensor; 4],
    mask: Tensor,
    valid: usize,
}

impl WarpPlan {
    pub fn new(flow: &FlowField, dtype: DType, device: &Device) -> Result<Self> {
        let taps = warp_taps(flow);
        let n = flow.h * flow.w;
        let mut index = Vec::with_capacity(4);
        let mut weight = Vec::with_capacity(4);
        for k in 0..4 {
            index.push(Tensor::from_slice(&taps.index[k], n, device)?);
            weight.push(Tensor::from_slice(&taps.weight[k], (1, n), device)?.to_dtype(dtype)?);
        }
        let m: Vec<f64> = taps.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let as_array = |v: Vec<Tensor>| -> [Tensor; 4] { v.try_into().expect("four taps") };
        Ok(Self {
            index: as_array(index),
            weight: as_array(weight),
            mask: Tensor::from_vec(m, (1, n), device)?.to_dtype(dtype)?,
            valid: taps.valid.iter().filter(|&&v| v).count(),
        })
    }

    /// Warps a `(C, H, W)` frame; differentiable in the frame.
    pub fn warp(&self, frame: &Tensor) -> Result<Tensor> {
        let (c, h, w) = frame.dims3()?;
        let flat = frame.reshape((c, h * w))?;
        let mut out = flat.index_select(&self.index[0], 1)?.broadcast_mul(&self.weight[0])?;
        for k in 1..4 {
            out = (out + flat.index_select(&self.index[k], 1)?.broadcast_mul(&self.weight[k])?)?;
        }
        Ok(out.reshape((c, h, w))?)
    }

    /// Mean absolute difference over valid pixels and channels; zero when
    /// no sample is valid.
    pub fn masked_l1(&self, warped: &Tensor, target: &Tensor) -> Result<Tensor> {
        let (c, h, w) = target.dims3()?;
        if self.valid == 0 {
            return Ok(Tensor::zeros((), target.dtype(), target.device())?);
        }
        let diff = (warped - target)?.abs()?.reshape((c, h * w))?.broadcast_mul(&self.mask)?;
        Ok((diff.sum_all()? / (c * self.valid) as f64)?)
    }
}

/// Warp plans for every forward and backward flow of a clip.
#[derive(Debug, Clone)]
pub struct TemporalPlan {
    pub forward: Vec<WarpPlan>,
    pub backward: Vec<WarpPlan>,
}

impl TemporalPlan {
    pub fn new(flows: &FlowFieldSequence, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            forward: flows.forward.iter().map(|f| WarpPlan::new(f, dtype, device)).collect::<Result<_>>()?,
            backward: flows.backward.iter().map(|f| WarpPlan::new(f, dtype, device)).collect::<Result<_>>()?,
        })
    }
}

/// Flow-warped temporal term on one `(T, 3, H, W)` clip. For every interior
/// frame `i`, frame `i` is warped with `forward[i]` and compared with frame
/// `i + 1`, and warped with `backward[i - 1]` and compared with frame `i - 1`.
pub fn temporal_loss_planned(x_hat: &Tensor, plan: &TemporalPlan) -> Result<Tensor> {
    let t = x_hat.dim(0)?;
    if t < 3 {
        return Err(shape_err!("temporal loss needs at least 3 frames, got {t}"));
    }
    if plan.forward.len() != t - 1 || plan.backward.len() != t - 1 {
        return Err(shape_err!("{} frames but {} / {} flows", t, plan.forward.len(), plan.backward.len()));
    }
    let mut total = Tensor::zeros((), x_hat.dtype(), x_hat.device())?;
    for i in 1..t - 1 {
        let cur = x_hat.get(i)?;
        let fw = plan.forward[i].warp(&cur)?;
        let bw = plan.backward[i - 1].warp(&cur)?;
        total = (total + plan.forward[i].masked_l1(&fw, &x_hat.get(i + 1)?)?)?;
        total = (total + plan.backward[i - 1].masked_l1(&bw, &x_hat.get(i - 1)?)?)?;
    }
    Ok(total)
}

pub fn temporal_loss(x_hat: &Tensor, flows: &FlowFieldSequence) -> Result<Tensor> {
    let (t, _, h, w) = x_hat.dims4()?;
    flows.validate(t, h, w)?;
    temporal_loss_planned(x_hat, &TemporalPlan::new(flows, x_hat.dtype(), x_hat.device())?)
}

/// Stage-2 objective on a `(B, T, 3, H, W)` batch with one plan per clip;
/// the temporal term is averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    z_hat: &Tensor,
    z_hq: &Tensor,
    x_hat: &Tensor,
    x_hq: &Tensor,
    plans: &[&TemporalPlan],
    fe: &FeatureExtractor,
    w: &LossWeights,
) -> Result<Loss> {
    if z_hat.dims() != z_hq.dims() || x_hat.dims() != x_hq.dims() {
        return Err(shape_err!("stage-2 shapes: latent {:?}/{:?}, pixels {:?}/{:?}", z_hat.dims(), z_hq.dims(), x_hat.dims(), x_hq.dims()));
    }
    let b = x_hat.dim(0)?;
    if plans.len() != b {
        return Err(shape_err!("{} flow plans for a batch of {b}", plans.len()));
    }
    let rec_latent = mse(z_hat, z_hq)?;
    let rec_pixel = mse(x_hat, x_hq)?;
    let per = fe.distance(x_hat, x_hq)?;
    let mut temp = Tensor::zeros((), x_hat.dtype(), x_hat.device())?;
    for (i, plan) in plans.iter().enumerate() {
        temp = (temp + temporal_loss_planned(&x_hat.get(i)?, plan)?)?;
    }
    let temp = (temp / b as f64)?;
    let total = (((&rec_latent + &rec_pixel)? + &per)? + (&temp * w.lambda_temp)?)?;
    let report = LossReport {
        rec_latent: scalar(&rec_latent)?,
        rec_pixel: scalar(&rec_pixel)?,
        per: scalar(&per)?,
        temp: scalar(&temp)?,
        total: scalar(&total)?,
        ..Default::default()
    };
    Ok(Loss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::video::{make_toy_clip, MotionSpec};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = keyed_rng(seed, 0, "loss-test");
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn zero_residuals_give_zero_losses() {
        let fe = FeatureExtractor::new(0, DType::F64, &Device::Cpu).unwrap();
        let x = rand_tensor(&[1, 3, 3, 8, 8], 1);
        let z = rand_tensor(&[1, 3, 2, 2, 4], 2);
        let l = stage1_loss(&x, &x, &[(z.clone(), z.clone())], None, &fe, &LossWeights::default()).unwrap();
        assert_eq!((l.report.l1, l.report.per, l.report.feat), (0.0, 0.0, 0.0));
    }

    #[test]
    fn feat_loss_arithmetic() {
        let ones = Tensor::ones((1, 2, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert!((s(&feat_loss(&[(ones, zeros)], 0.25).unwrap()) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn discriminator_loss_values() {
        let zero = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let d = s(&discriminator_loss_from_logits(&zero, &zero).unwrap());
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((d - 1.3863).abs() < 1e-4);
        let big = Tensor::full(60f64, 4, &Device::Cpu).unwrap();
        let perfect = s(&discriminator_loss_from_logits(&big, &big.neg().unwrap()).unwrap());
        assert!((perfect - (-2.0 * (1.0 - PROB_CLAMP).ln())).abs() < 1e-12);
        assert!(perfect < 1e-5);
    }

    #[test]
    fn discriminator_step_gives_generator_no_gradient() {
        let store = ParamStore::new(0, "disc", DType::F64, &Device::Cpu);
        let disc = Discriminator::new(&store, 4).unwrap();
        let gen = candle_core::Var::from_tensor(&rand_tensor(&[1, 2, 3, 16, 16], 3)).unwrap();
        let x_hat = (gen.as_tensor() * 0.9).unwrap();
        let x_hq = rand_tensor(&[1, 2, 3, 16, 16], 4);
        let loss = discriminator_step(&x_hq, &x_hat, &disc).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(gen.as_tensor()).is_none());
        assert!(store.vars(&[]).iter().all(|(_, v)| grads.get(v.as_tensor()).is_some()));
    }

    #[test]
    fn cross_entropy_limits() {
        let dev = Device::Cpu;
        let targets = Tensor::new(&[[3u32, 0, 63, 17]], &dev).unwrap();
        let uniform = Tensor::zeros((1, 4, 64), DType::F64, &dev).unwrap();
        let ce = s(&code_cross_entropy(&uniform, &targets).unwrap());
        assert!((ce / 4.0 - 64f64.ln()).abs() < 1e-12);
        assert!((64f64.ln() - 4.1589).abs() < 1e-4);
        let mut v = vec![0f64; 4 * 64];
        for (n, &t) in [3usize, 0, 63, 17].iter().enumerate() {
            v[n * 64 + t] = 20.0;
        }
        let confident = Tensor::from_vec(v, (1, 4, 64), &dev).unwrap();
        // margin 20 over 63 rivals leaves 63 e^-20 per token
        let ce = s(&code_cross_entropy(&confident, &targets).unwrap()) / 4.0;
        assert!(ce <= 1e-6 * 64.0 && ce < 2e-7 * 63.0, "{ce}");
        let bad = Tensor::new(&[[64u32, 0, 0, 0]], &dev).unwrap();
        assert!(code_cross_entropy(&uniform, &bad).is_err());
    }

    #[test]
    fn feat_loss_gradient_routing() {
        // the codebook side only sees the first term; the encoder side only
        // sees beta times the second
        let z0 = rand_tensor(&[1, 2, 2, 1, 3], 5);
        let q0 = rand_tensor(&[1, 2, 2, 1, 3], 6);
        let beta = 0.25;
        let wrt_q = check_gradient(&|q| feat_loss(&[(z0.clone(), q.clone())], beta), &q0, 1e-6).unwrap();
        let first = check_gradient(&|q| Ok(mse(&z0, q)?), &q0, 1e-6).unwrap();
        assert!(crate::gradcheck::relative_error(&wrt_q.analytic, &first.numeric) <= 1e-4);

        let wrt_z = check_gradient(&|z| feat_loss(&[(z.clone(), q0.clone())], beta), &z0, 1e-6).unwrap();
        let second = check_gradient(&|z| Ok((mse(z, &q0)? * beta)?), &z0, 1e-6).unwrap();
        assert!(crate::gradcheck::relative_error(&wrt_z.analytic, &second.numeric) <= 1e-4);
    }

    #[test]
    fn code_feature_loss_blocks_quantized_side() {
        let z0 = rand_tensor(&[1, 2, 2, 1, 3], 7);
        let q0 = rand_tensor(&[1, 2, 2, 1, 3], 8);
        let r = check_gradient(&|q| code_feature_loss(&[(z0.clone(), q.clone())]), &q0, 1e-6).unwrap();
        assert!(r.analytic.iter().all(|g| *g == 0.0));
        let r = check_gradient(&|z| code_feature_loss(&[(z.clone(), q0.clone())]), &z0, 1e-6).unwrap();
        assert!(r.rel_error <= 1e-4);
    }

    #[test]
    fn stage2_arithmetic_and_total() {
        let fe = FeatureExtractor::new(1, DType::F64, &Device::Cpu).unwrap();
        let z = rand_tensor(&[1, 3, 2, 2, 2], 1);
        let zh = (&z + 0.1).unwrap();
        let x = rand_tensor(&[1, 3, 3, 8, 8], 2);
        let plan = TemporalPlan::new(&FlowFieldSequence::zeros(2, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let l = stage2_loss(&zh, &z, &x, &x, &[&plan], &fe, &LossWeights::default()).unwrap();
        assert!((l.report.rec_latent - 0.01).abs() < 1e-12);
        assert_eq!(l.report.rec_pixel, 0.0);

        let xh = rand_tensor(&[1, 3, 3, 8, 8], 3);
        let w = LossWeights::default();
        let l = stage2_loss(&zh, &z, &xh, &x, &[&plan], &fe, &w).unwrap();
        let want_lat = {
            let a: Vec<f64> = zh.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = z.flatten_all().unwrap().to_vec1().unwrap();
            a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64
        };
        let want_pix = {
            let a: Vec<f64> = xh.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
            a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64
        };
        assert!((l.report.rec_latent - want_lat).abs() < 1e-12);
        assert!((l.report.rec_pixel - want_pix).abs() < 1e-12);
        let recomputed = want_lat + want_pix + l.report.per + w.lambda_temp * l.report.temp;
        assert!((l.report.total - recomputed).abs() < 1e-6);
        assert!((l.report.weighted_total(Stage::Stage2, &w) - l.report.total).abs() < 1e-9);
    }

    fn temporal_oracle(x: &[f64], t: usize, h: usize, w: usize, flows: &FlowFieldSequence) -> f64 {
        let c = 3;
        let px = |f: usize, ch: usize, y: usize, xx: usize| x[((f * c + ch) * h + y) * w + xx];
        let sample = |f: usize, ch: usize, sx: f64, sy: f64| {
            let cl = |v: f64, m: usize| v.clamp(0.0, (m - 1) as f64) as usize;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            (1.0 - fy) * (1.0 - fx) * px(f, ch, cl(y0, h), cl(x0, w))
                + (1.0 - fy) * fx * px(f, ch, cl(y0, h), cl(x0 + 1.0, w))
                + fy * (1.0 - fx) * px(f, ch, cl(y0 + 1.0, h), cl(x0, w))
                + fy * fx * px(f, ch, cl(y0 + 1.0, h), cl(x0 + 1.0, w))
        };
        let term = |src: usize, dst: usize, flow: &FlowField| {
            let (mut acc, mut n) = (0.0, 0usize);
            for y in 0..h {
                for xx in 0..w {
                    let (dx, dy) = flow.at(y, xx);
                    let (sx, sy) = (xx as f64 + dx as f64, y as f64 + dy as f64);
                    if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                        continue;
                    }
                    n += 1;
                    for ch in 0..c {
                        acc += (sample(src, ch, sx, sy) - px(dst, ch, y, xx)).abs();
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                acc / (n * c) as f64
            }
        };
        (1..t - 1).map(|i| term(i, i + 1, &flows.forward[i]) + term(i, i - 1, &flows.backward[i - 1])).sum()
    }

    #[test]
    fn temporal_loss_static_and_offset_frame() {
        let flows = FlowFieldSequence::zeros(3, 8, 8);
        let frame = rand_tensor(&[1, 3, 8, 8], 9);
        let x = Tensor::cat(&[&frame, &frame, &frame, &frame], 0).unwrap();
        assert_eq!(s(&temporal_loss(&x, &flows).unwrap()), 0.0);
        // frame 2 shifted by c: it participates as a source in i=2 (two
        // terms) and as a target in i=1 (forward) and i=3 does not exist
        let c = 0.05;
        let shifted = Tensor::cat(&[&frame, &frame, &(&frame + c).unwrap(), &frame], 0).unwrap();
        let got = s(&temporal_loss(&shifted, &flows).unwrap());
        let xv: Vec<f64> = shifted.flatten_all().unwrap().to_vec1().unwrap();
        let want = temporal_oracle(&xv, 4, 8, 8, &flows);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 3.0 * c).abs() < 1e-12);
    }

    #[test]
    fn temporal_loss_matches_scalar_loop_on_random_instances() {
        let mut rng = keyed_rng(4, 0, "flows");
        for k in 0..5 {
            let x = rand_tensor(&[3, 3, 8, 8], 20 + k);
            let mut f = || FlowField::from_fn(8, 8, |_, _| (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)));
            let flows = FlowFieldSequence { forward: vec![f(), f()], backward: vec![f(), f()] };
            let got = s(&temporal_loss(&x, &flows).unwrap());
            let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
            assert!((got - temporal_oracle(&xv, 3, 8, 8, &flows)).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_loss_on_translation_ground_truth() {
        let (clip, flows) = make_toy_clip(&MotionSpec::translate(1.0, -1.0), 4, 16, 16, 5).unwrap();
        let x = clip.to_tensor(&Device::Cpu, DType::F64).unwrap();
        assert!(s(&temporal_loss(&x, &flows).unwrap()) <= 1e-6);
        let short = x.narrow(0, 0, 2).unwrap();
        assert!(temporal_loss(&short, &FlowFieldSequence::zeros(1, 16, 16)).is_err());
        assert!(temporal_loss(&x, &FlowFieldSequence::zeros(2, 16, 16)).is_err());
    }

    #[test]
    fn stage2_gradient_matches_finite_differences() {
        let fe = FeatureExtractor::new(2, DType::F64, &Device::Cpu).unwrap();
        let (clip, flows) = make_toy_clip(&MotionSpec::translate(0.5, 0.25), 3, 16, 16, 1).unwrap();
        let x = clip.to_tensor(&Device::Cpu, DType::F64).unwrap().narrow(2, 4, 8).unwrap().narrow(3, 4, 8).unwrap();
        let crop = |f: &FlowField| FlowField::from_fn(8, 8, |y, xx| f.at(y + 4, xx + 4));
        let flows = FlowFieldSequence {
            forward: flows.forward.iter().map(crop).collect(),
            backward: flows.backward.iter().map(crop).collect(),
        };
        let plan = TemporalPlan::new(&flows, DType::F64, &Device::Cpu).unwrap();
        let x = x.unsqueeze(0).unwrap().contiguous().unwrap();
        let z = rand_tensor(&[1, 3, 2, 2, 2], 1);
        let zh = rand_tensor(&[1, 3, 2, 2, 2], 2);
        let xh0 = (&x + (rand_tensor(&[1, 3, 3, 8, 8], 3) * 0.1).unwrap()).unwrap();
        let w = LossWeights { lambda_temp: 1.0, ..Default::default() };
        let r = check_gradient(&|xh| Ok(stage2_loss(&zh, &z, xh, &x, &[&plan], &fe, &w)?.total), &xh0, 1e-6).unwrap();
        assert!(r.rel_error <= 1e-4, "{}", r.rel_error);
    }
}
