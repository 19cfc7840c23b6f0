//! Latent autoencoder stand-in, the velocity transformer and one-step
//! restoration.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionContext, PriorsMode};
use crate::nn::{grid_to_maps, maps_to_grid, Attention, Init, LayerNorm, Mlp, ParamStore};
use crate::stdc::{ConvDecoder, ConvEncoder, Priors, StdcConfig, StdcModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub stride: usize,
    pub width: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_dim: 8, stride: 4, width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_grid: [usize; 3],
    /// Per-frame spatial kernel of the patch embedding; 1 is a pointwise
    /// linear map.
    pub embed_kernel: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self { layers: 4, width: 128, heads: 4, max_grid: [8, 16, 16], embed_kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorerConfig {
    pub vae: VaeConfig,
    pub dit: DitConfig,
    pub fusion: FusionConfig,
    pub t_star: f64,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self { vae: VaeConfig::default(), dit: DitConfig::default(), fusion: FusionConfig::default(), t_star: 1.0 }
    }
}

impl RestorerConfig {
    /// Fails unless the prior grid of `stdc` coincides with the token grid.
    pub fn validate(&self, stdc: &StdcConfig) -> Result<()> {
        if !(self.t_star > 0.0 && self.t_star <= 1.0) {
            return Err(config_err!("t* = {} outside (0, 1]", self.t_star));
        }
        if !self.vae.stride.is_power_of_two() {
            return Err(config_err!("latent stride {} is not a power of two", self.vae.stride));
        }
        if self.dit.width % self.dit.heads != 0 {
            return Err(config_err!("transformer width {} not divisible by {} heads", self.dit.width, self.dit.heads));
        }
        if self.dit.embed_kernel % 2 == 0 {
            return Err(config_err!("patch embedding kernel {} must be odd", self.dit.embed_kernel));
        }
        if self.fusion.priors != PriorsMode::None {
            if stdc.spatial_stride != self.vae.stride || stdc.temporal_stride != 1 {
                return Err(config_err!(
                    "prior grid strides (t {}, s {}) differ from token grid strides (t 1, s {})",
                    stdc.temporal_stride,
                    stdc.spatial_stride,
                    self.vae.stride
                ));
            }
            if stdc.max_grid != self.dit.max_grid {
                return Err(config_err!("prior grid capacity {:?} differs from token grid capacity {:?}", stdc.max_grid, self.dit.max_grid));
            }
        }
        Ok(())
    }
}

/// Parameter-group prefixes within the restorer store.
pub mod groups {
    pub const VAE_ENCODER: &str = "vae.encoder";
    pub const VAE_DECODER: &str = "vae.decoder";
    pub const DIT: &str = "dit";
    pub const FUSION: &str = "fusion";
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub encoder: ConvEncoder,
    pub decoder: ConvDecoder,
    pub cfg: VaeConfig,
}

impl Vae {
    pub fn new(p: &ParamStore, cfg: &VaeConfig) -> Result<Self> {
        Ok(Self {
            encoder: ConvEncoder::new(&p.pp("encoder"), 3, cfg.width, cfg.latent_dim, cfg.stride)?,
            decoder: ConvDecoder::new(&p.pp("decoder"), cfg.latent_dim, cfg.width, 3, cfg.stride)?,
            cfg: cfg.clone(),
        })
    }

    /// `(B, T, 3, H, W)` to `(B, T, H/s, W/s, d_v)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let s = self.cfg.stride;
        if h % s != 0 || w % s != 0 {
            return Err(shape_err!("frame {h}x{w} not divisible by latent stride {s}"));
        }
        if c != 3 {
            return Err(shape_err!("expected 3 channels, got {c}"));
        }
        let z = self.encoder.forward(&x.reshape((b * t, c, h, w))?)?;
        maps_to_grid(&z, b).map_err(Error::from)
    }

    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (b, t, _, _, _) = z.dims5()?;
        let y = self.decoder.forward(&grid_to_maps(z)?)?;
        let (_, c, h, w) = y.dims4()?;
        Ok(y.reshape((b, t, c, h, w))?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(0.0, 1.0)?)
    }
}

/// `t * eps + (1 - t) * z_hq`.
pub fn noise_inject(z_hq: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(config_err!("noise level {t} outside [0, 1]"));
    }
    if z_hq.dims() != eps.dims() {
        return Err(shape_err!("latent {:?} vs noise {:?}", z_hq.dims(), eps.dims()));
    }
    Ok(((eps * t)? + (z_hq * (1.0 - t))?)?)
}

/// `z_t - t * v`.
pub fn one_step_update(z_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    Ok((z_t - (v * t)?)?)
}

/// Sinusoidal embedding of a scalar timestep, `dim` values.
pub fn timestep_embedding(t: f64, dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0f64; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        v[i] = arg.sin();
        v[half + i] = arg.cos();
    }
    Ok(Tensor::from_vec(v, (1, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln_c: LayerNorm,
    pub cross: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl DitBlock {
    fn new(p: &ParamStore, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: p.layer_norm("ln1", width)?,
            attn: Attention::new(&p.pp("attn"), width, width, width, width, heads)?,
            ln_c: p.layer_norm("ln_c", width)?,
            cross: Attention::new(&p.pp("cross"), width, width, width, width, heads)?,
            ln2: p.layer_norm("ln2", width)?,
            mlp: Mlp::new(&p.pp("mlp"), width, 2 * width, width)?,
        })
    }

    fn forward(&self, x: &Tensor, text: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let x = (&x + self.cross.forward(&self.ln_c.forward(&x)?, text)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dit {
    pub embed: Conv2d,
    pub pos_t: Tensor,
    pub pos_h: Tensor,
    pub pos_w: Tensor,
    pub time_mlp: Mlp,
    /// Learned null-prompt embedding, `(1, width)`.
    pub c_text: Tensor,
    pub blocks: Vec<DitBlock>,
    pub ln_out: LayerNorm,
    pub head: Linear,
    pub width: usize,
}

impl Dit {
    fn new(p: &ParamStore, cfg: &DitConfig, latent_dim: usize) -> Result<Self> {
        let wd = cfg.width;
        let [mt, mh, mw] = cfg.max_grid;
        Ok(Self {
            embed: p.conv2d("embed", latent_dim, wd, cfg.embed_kernel, 1)?,
            pos_t: p.tensor("pos_t", &[mt, wd], Init::Normal(0.02))?,
            pos_h: p.tensor("pos_h", &[mh, wd], Init::Normal(0.02))?,
            pos_w: p.tensor("pos_w", &[mw, wd], Init::Normal(0.02))?,
            time_mlp: Mlp::new(&p.pp("time"), wd, wd, wd)?,
            c_text: p.tensor("c_text", &[1, wd], Init::Normal(0.02))?,
            blocks: (0..cfg.layers).map(|i| DitBlock::new(&p.pp(&format!("block{i}")), wd, cfg.heads)).collect::<Result<_>>()?,
            ln_out: p.layer_norm("ln_out", wd)?,
            head: p.linear_zero("head", wd, latent_dim)?,
            width: wd,
        })
    }

    fn positions(&self, t: usize, h: usize, w: usize) -> Result<Tensor> {
        let (mt, wd) = self.pos_t.dims2()?;
        let (mh, mw) = (self.pos_h.dim(0)?, self.pos_w.dim(0)?);
        if t > mt || h > mh || w > mw {
            return Err(Error::Capacity(format!("latent grid {t}x{h}x{w} exceeds token capacity {mt}x{mh}x{mw}")));
        }
        let pt = self.pos_t.narrow(0, 0, t)?.reshape((t, 1, 1, wd))?;
        let ph = self.pos_h.narrow(0, 0, h)?.reshape((1, h, 1, wd))?;
        let pw = self.pos_w.narrow(0, 0, w)?.reshape((1, 1, w, wd))?;
        Ok(pt.broadcast_add(&ph)?.broadcast_add(&pw)?.reshape((t * h * w, wd))?)
    }

    fn forward(&self, z: &Tensor, t: f64, fusion: Option<(&Fusion, &FusionContext)>) -> Result<Tensor> {
        let (b, gt, gh, gw, d) = z.dims5()?;
        let temb = timestep_embedding(t, self.width, z.device(), z.dtype())?;
        let temb = self.time_mlp.forward(&temb)?;
        let mut x = maps_to_grid(&self.embed.forward(&grid_to_maps(z)?)?, b)?
            .reshape((b, gt * gh * gw, self.width))?
            .broadcast_add(&self.positions(gt, gh, gw)?)?
            .broadcast_add(&temb)?;
        let text = self.c_text.unsqueeze(0)?.broadcast_as((b, 1, self.width))?.contiguous()?;
        for (i, blk) in self.blocks.iter().enumerate() {
            if let Some((f, ctx)) = fusion {
                x = f.fuse(i, &x, ctx)?;
            }
            x = blk.forward(&x, &text)?;
        }
        let v = self.head.forward(&self.ln_out.forward(&x)?)?;
        Ok(v.reshape((b, gt, gh, gw, d))?)
    }
}

/// Intermediate tensors of a one-step restoration.
#[derive(Debug, Clone)]
pub struct RestoreParts {
    pub z_lq: Tensor,
    pub velocity: Tensor,
    pub z_hat: Tensor,
    /// Unclamped decoder output.
    pub x_raw: Tensor,
}

#[derive(Debug)]
pub struct Restorer {
    pub cfg: RestorerConfig,
    pub vae: Vae,
    pub dit: Dit,
    pub fusion: Fusion,
    velocity_evals: AtomicUsize,
}

impl Restorer {
    pub fn new(cfg: &RestorerConfig, stdc: &StdcConfig, p: &ParamStore) -> Result<Self> {
        cfg.validate(stdc)?;
        Ok(Self {
            vae: Vae::new(&p.pp("vae"), &cfg.vae)?,
            dit: Dit::new(&p.pp(groups::DIT), &cfg.dit, cfg.vae.latent_dim)?,
            fusion: Fusion::new(&p.pp(groups::FUSION), &cfg.fusion, stdc.code_dim, cfg.dit.width, cfg.dit.layers)?,
            cfg: cfg.clone(),
            velocity_evals: AtomicUsize::new(0),
        })
    }

    pub fn velocity_evals(&self) -> usize {
        self.velocity_evals.load(Ordering::SeqCst)
    }

    pub fn vae_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.vae.encode(x)
    }

    pub fn vae_decode(&self, z: &Tensor) -> Result<Tensor> {
        self.vae.decode(z)
    }

    /// Velocity at `(z, t)`; priors are ignored when the fusion mode is `none`.
    pub fn predict_velocity(&self, z: &Tensor, t: f64, priors: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        self.velocity_evals.fetch_add(1, Ordering::SeqCst);
        let ctx = match priors {
            Some((f_s, f_t)) if self.fusion.cfg.priors != PriorsMode::None => {
                let (b, gt, gh, gw, _) = z.dims5()?;
                let (pb, pt, ph, pw, _) = f_s.dims5()?;
                if (b, gt, gh, gw) != (pb, pt, ph, pw) || f_s.dims() != f_t.dims() {
                    return Err(shape_err!("prior grid {:?} does not align with latent grid {:?}", f_s.dims(), z.dims()));
                }
                Some(self.fusion.context(f_s, f_t)?)
            }
            _ => None,
        };
        self.dit.forward(z, t, ctx.as_ref().map(|c| (&self.fusion, c)))
    }

    pub fn restore_parts(&self, x_lq: &Tensor, priors: Option<&Priors>) -> Result<RestoreParts> {
        let t = self.cfg.t_star;
        // the encoder is never trained through a restoration
        let z_lq = self.vae_encode(x_lq)?.detach();
        let velocity = self.predict_velocity(&z_lq, t, priors.map(|p| (&p.f_s, &p.f_t)))?;
        let z_hat = one_step_update(&z_lq, &velocity, t)?;
        let x_raw = self.vae.decode_raw(&z_hat)?;
        Ok(RestoreParts { z_lq, velocity, z_hat, x_raw })
    }

    /// Encode, extract priors from the LQ pixels, take one velocity step at
    /// `t*` and decode. Exactly one velocity evaluation per call.
    pub fn one_step_restore(&self, x_lq: &Tensor, stdc: &StdcModel) -> Result<Tensor> {
        let before = self.velocity_evals();
        let priors = match self.cfg.fusion.priors {
            PriorsMode::None => None,
            _ => Some(stdc.extract_priors(x_lq)?),
        };
        let parts = self.restore_parts(x_lq, priors.as_ref())?;
        let evals = self.velocity_evals() - before;
        if evals != 1 {
            return Err(Error::Shape(format!("one-step contract violated: {evals} velocity evaluations")));
        }
        Ok(parts.x_raw.clamp(0.0, 1.0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = crate::rng::keyed_rng(seed, 0, "backbone-test");
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn tiny() -> (RestorerConfig, StdcConfig) {
        let stdc = StdcConfig {
            codebook_size: 8,
            code_dim: 4,
            encoder_width: 6,
            temporal_heads: 1,
            transformer_layers: 1,
            transformer_heads: 1,
            transformer_width: 8,
            max_grid: [4, 4, 4],
            ..Default::default()
        };
        let cfg = RestorerConfig {
            vae: VaeConfig { latent_dim: 2, stride: 4, width: 6 },
            dit: DitConfig { layers: 2, width: 8, heads: 2, max_grid: [4, 4, 4], embed_kernel: 3 },
            fusion: FusionConfig { mlp_hidden: 8, attn_width: 8, ..Default::default() },
            t_star: 1.0,
        };
        (cfg, stdc)
    }

    #[test]
    fn latent_shape_arithmetic_and_decode_range() {
        let store = ParamStore::new(0, "vae", DType::F32, &Device::Cpu);
        let vae = Vae::new(&store, &VaeConfig { latent_dim: 8, stride: 4, width: 4 }).unwrap();
        let x = rand_tensor(&[1, 8, 3, 32, 32], 1, DType::F32);
        let z = vae.encode(&x).unwrap();
        assert_eq!(z.dims(), &[1, 8, 8, 8, 8]);
        let y = vae.decode(&(z * 50.0).unwrap()).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(vec_of(&y).iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(vae.encode(&rand_tensor(&[1, 2, 3, 30, 32], 1, DType::F32)).is_err());
    }

    #[test]
    fn noise_injection_examples() {
        let z = rand_tensor(&[1, 2, 2, 2, 2], 1, DType::F64);
        let e = rand_tensor(&[1, 2, 2, 2, 2], 2, DType::F64);
        assert_eq!(vec_of(&noise_inject(&z, &e, 0.0).unwrap()), vec_of(&z));
        assert_eq!(vec_of(&noise_inject(&z, &e, 1.0).unwrap()), vec_of(&e));
        let zero = Tensor::zeros((1, 2, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let two = Tensor::full(2f64, (1, 2, 2, 2, 2), &Device::Cpu).unwrap();
        assert!(vec_of(&noise_inject(&zero, &two, 0.5).unwrap()).iter().all(|v| *v == 1.0));
        assert!(noise_inject(&z, &e, 1.5).is_err());
        assert!(noise_inject(&z, &e, -0.1).is_err());
    }

    #[test]
    fn oracle_velocity_inverts_noise_injection() {
        let mut rng = crate::rng::keyed_rng(3, 0, "tstar");
        for k in 0..10 {
            let z = rand_tensor(&[1, 2, 3, 3, 4], 10 + k, DType::F64);
            let e = rand_tensor(&[1, 2, 3, 3, 4], 100 + k, DType::F64);
            let t: f64 = rng.gen_range(1e-3..=1.0);
            let zt = noise_inject(&z, &e, t).unwrap();
            let v = (&e - &z).unwrap();
            let back = one_step_update(&zt, &v, t).unwrap();
            let err = vec_of(&(back - &z).unwrap()).iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-6, "t={t} err={err}");
        }
    }

    #[test]
    fn grid_misalignment_fails_at_construction() {
        let (cfg, stdc) = tiny();
        let store = ParamStore::new(0, "r", DType::F32, &Device::Cpu);
        let bad = StdcConfig { spatial_stride: 2, ..stdc.clone() };
        assert!(matches!(Restorer::new(&cfg, &bad, &store), Err(Error::Config(_))));
        let bad = RestorerConfig { t_star: 0.0, ..cfg.clone() };
        assert!(Restorer::new(&bad, &stdc, &ParamStore::new(0, "r", DType::F32, &Device::Cpu)).is_err());
    }

    #[test]
    fn zero_head_means_vae_round_trip_and_one_evaluation() {
        let (cfg, stdc_cfg) = tiny();
        let rs = ParamStore::new(0, "r", DType::F32, &Device::Cpu);
        let r = Restorer::new(&cfg, &stdc_cfg, &rs).unwrap();
        let ss = ParamStore::new(1, "s", DType::F32, &Device::Cpu);
        let stdc = StdcModel::new(&stdc_cfg, &ss).unwrap();
        let x = rand_tensor(&[1, 3, 3, 16, 16], 4, DType::F32).affine(0.5, 0.5).unwrap();
        let out = r.one_step_restore(&x, &stdc).unwrap();
        assert_eq!(r.velocity_evals(), 1);
        let rt = r.vae_decode(&r.vae_encode(&x).unwrap()).unwrap();
        assert_eq!(vec_of(&out), vec_of(&rt));
        let again = r.one_step_restore(&x, &stdc).unwrap();
        assert_eq!(r.velocity_evals(), 2);
        assert_eq!(vec_of(&out), vec_of(&again));
    }

    #[test]
    fn fresh_fusion_is_transparent_in_the_full_forward() {
        let (cfg, stdc_cfg) = tiny();
        let rs = ParamStore::new(0, "r", DType::F32, &Device::Cpu);
        let r = Restorer::new(&cfg, &stdc_cfg, &rs).unwrap();
        for (_, v) in rs.vars(&["dit.head"]) {
            v.set(&rand_tensor(v.dims(), 9, DType::F32)).unwrap();
        }
        let z = rand_tensor(&[1, 3, 4, 4, 2], 5, DType::F32);
        let fs = rand_tensor(&[1, 3, 4, 4, 4], 6, DType::F32);
        let ft = rand_tensor(&[1, 3, 4, 4, 4], 7, DType::F32);
        let with = vec_of(&r.predict_velocity(&z, 1.0, Some((&fs, &ft))).unwrap());
        let without = vec_of(&r.predict_velocity(&z, 1.0, None).unwrap());
        assert!(with.iter().any(|v| *v != 0.0));
        let diff = with.iter().zip(&without).fold(0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-6);
        let bad = rand_tensor(&[1, 3, 2, 2, 4], 6, DType::F32);
        assert!(r.predict_velocity(&z, 1.0, Some((&bad, &bad))).is_err());
    }

    #[test]
    fn velocity_gradient_matches_finite_differences() {
        let (cfg, stdc_cfg) = tiny();
        let rs = ParamStore::new(0, "r", DType::F64, &Device::Cpu);
        let r = Restorer::new(&cfg, &stdc_cfg, &rs).unwrap();
        for (i, (_, v)) in rs.vars(&["dit.head", "fusion"]).into_iter().enumerate() {
            v.set(&rand_tensor(v.dims(), 30 + i as u64, DType::F64).affine(0.5, 0.0).unwrap()).unwrap();
        }
        let fs = rand_tensor(&[1, 2, 2, 2, 4], 1, DType::F64);
        let ft = rand_tensor(&[1, 2, 2, 2, 4], 2, DType::F64);
        let w = rand_tensor(&[1, 2, 2, 2, 2], 3, DType::F64);
        let z = rand_tensor(&[1, 2, 2, 2, 2], 4, DType::F64);
        let rep = check_gradient(&|z| Ok((r.predict_velocity(z, 0.7, Some((&fs, &ft)))? * &w)?.sum_all()?), &z, 1e-5).unwrap();
        assert!(rep.rel_error <= 1e-4, "{rep:?}");
    }
}
