//! Asymmetric spatio-temporal fusion: a global `(gamma, beta)` modulation
//! from the pooled temporal prior, plus a per-block residual in which the
//! temporal prior queries the spatial prior.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{attention, ParamStore};

/// Which priors reach the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorsMode {
    None,
    Spatial,
    Temporal,
    #[default]
    Both,
}

impl PriorsMode {
    pub fn uses_spatial(self) -> bool {
        matches!(self, PriorsMode::Spatial | PriorsMode::Both)
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, PriorsMode::Temporal | PriorsMode::Both)
    }
}

impl std::str::FromStr for PriorsMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "spatial" => Ok(Self::Spatial),
            "temporal" => Ok(Self::Temporal),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown priors mode {other:?} (none|spatial|temporal|both)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationSharing {
    #[default]
    Shared,
    PerLayer,
}

/// `Refined` uses cross-attention with the temporal prior as query;
/// `Simple` adds a projection of the spatial prior directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialInjection {
    #[default]
    Refined,
    Simple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub priors: PriorsMode,
    pub sharing: ModulationSharing,
    pub injection: SpatialInjection,
    pub mlp_hidden: usize,
    pub attn_width: usize,
    pub attn_heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            priors: PriorsMode::Both,
            sharing: ModulationSharing::Shared,
            injection: SpatialInjection::Refined,
            mlp_hidden: 128,
            attn_width: 128,
            attn_heads: 1,
        }
    }
}

/// Per-channel scale and shift, each `(B, C)`.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `(1 + gamma) * x + beta` on `(B, N, C)` tokens.
pub fn apply_modulation(x: &Tensor, m: &Modulation) -> Result<Tensor> {
    let c = x.dim(2)?;
    if m.gamma.dim(1)? != c || m.beta.dim(1)? != c {
        return Err(shape_err!("modulation width {} vs token width {c}", m.gamma.dim(1)?));
    }
    let g = (m.gamma.unsqueeze(1)? + 1.0)?;
    Ok(x.broadcast_mul(&g)?.broadcast_add(&m.beta.unsqueeze(1)?)?)
}

/// Mean over `(t, h, w)` of a `(B, t, h, w, d)` grid.
pub fn pool(f: &Tensor) -> Result<Tensor> {
    let (b, t, h, w, d) = f.dims5()?;
    Ok(f.reshape((b, t * h * w, d))?.mean(1)?)
}

#[derive(Debug, Clone)]
pub struct ModulationMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

impl ModulationMlp {
    fn new(p: &ParamStore, d: usize, hidden: usize, width: usize) -> Result<Self> {
        Ok(Self { fc1: p.linear("fc1", d, hidden, true)?, fc2: p.linear_zero("fc2", hidden, 2 * width)?, width })
    }

    pub fn compute(&self, f_t: &Tensor) -> Result<Modulation> {
        let y = self.fc2.forward(&self.fc1.forward(&pool(f_t)?)?.silu()?)?;
        Ok(Modulation { gamma: y.narrow(1, 0, self.width)?, beta: y.narrow(1, self.width, self.width)? })
    }
}

/// Per-block projections; `q`, `k`, `v` are bias-free, `proj` starts at zero.
#[derive(Debug, Clone)]
pub struct CrossRefine {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl CrossRefine {
    fn new(p: &ParamStore, d: usize, cfg: &FusionConfig, width: usize) -> Result<Self> {
        Ok(Self {
            q: p.linear("q", d, cfg.attn_width, false)?,
            k: p.linear("k", d, cfg.attn_width, false)?,
            v: p.linear("v", d, cfg.attn_width, false)?,
            proj: p.linear_zero("proj", cfg.attn_width, width)?,
            heads: cfg.attn_heads,
        })
    }

    /// Attention residual before the output projection, `(B, t*h*w, attn_width)`.
    pub fn cross_refine(&self, f_t: &Tensor, f_s: &Tensor) -> Result<Tensor> {
        if f_t.dims() != f_s.dims() {
            return Err(shape_err!("prior grids differ: {:?} vs {:?}", f_t.dims(), f_s.dims()));
        }
        let (b, t, h, w, d) = f_t.dims5()?;
        let ft = f_t.reshape((b, t * h * w, d))?;
        let fs = f_s.reshape((b, t * h * w, d))?;
        Ok(attention(&self.q.forward(&ft)?, &self.k.forward(&fs)?, &self.v.forward(&fs)?, self.heads)?)
    }

    /// Projected spatial prior without attention, `(B, t*h*w, attn_width)`.
    pub fn simple(&self, f_s: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, d) = f_s.dims5()?;
        Ok(self.v.forward(&f_s.reshape((b, t * h * w, d))?)?)
    }
}

/// Fusion parameters for all `L` backbone blocks.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub cfg: FusionConfig,
    /// One MLP when shared, `L` otherwise.
    pub modulation: Vec<ModulationMlp>,
    pub blocks: Vec<CrossRefine>,
}

/// Per-forward fusion inputs: priors and the modulation each block uses.
#[derive(Debug, Clone)]
pub struct FusionContext {
    pub f_s: Tensor,
    pub f_t: Tensor,
    pub mods: Vec<Modulation>,
}

impl FusionContext {
    /// Modulation used by `block`; with sharing every block gets the same value.
    pub fn modulation(&self, block: usize) -> Option<&Modulation> {
        match self.mods.len() {
            0 => None,
            1 => Some(&self.mods[0]),
            _ => self.mods.get(block),
        }
    }
}

impl Fusion {
    pub fn new(p: &ParamStore, cfg: &FusionConfig, prior_dim: usize, width: usize, layers: usize) -> Result<Self> {
        if cfg.attn_width % cfg.attn_heads != 0 {
            return Err(config_err!("fusion attention width {} not divisible by {} heads", cfg.attn_width, cfg.attn_heads));
        }
        let n_mod = match cfg.sharing {
            ModulationSharing::Shared => 1,
            ModulationSharing::PerLayer => layers,
        };
        let modulation = if cfg.priors.uses_temporal() {
            (0..n_mod)
                .map(|i| ModulationMlp::new(&p.pp(&format!("modulation{i}")), prior_dim, cfg.mlp_hidden, width))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let blocks = if cfg.priors.uses_spatial() {
            (0..layers).map(|i| CrossRefine::new(&p.pp(&format!("block{i}")), prior_dim, cfg, width)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { cfg: cfg.clone(), modulation, blocks })
    }

    /// Computes modulations once for the whole forward pass.
    pub fn context(&self, f_s: &Tensor, f_t: &Tensor) -> Result<FusionContext> {
        let mods = self.modulation.iter().map(|m| m.compute(f_t)).collect::<Result<_>>()?;
        Ok(FusionContext { f_s: f_s.clone(), f_t: f_t.clone(), mods })
    }

    /// Fused token stream for `block`: modulate, then add the projected
    /// spatial residual. Transparent when the mode disables both parts.
    pub fn fuse(&self, block: usize, x: &Tensor, ctx: &FusionContext) -> Result<Tensor> {
        let mut y = match ctx.modulation(block) {
            Some(m) => apply_modulation(x, m)?,
            None => x.clone(),
        };
        if let Some(cr) = self.blocks.get(block) {
            let delta = match self.cfg.injection {
                SpatialInjection::Refined if self.cfg.priors == PriorsMode::Both => cr.cross_refine(&ctx.f_t, &ctx.f_s)?,
                _ => cr.simple(&ctx.f_s)?,
            };
            if delta.dim(1)? != x.dim(1)? {
                return Err(shape_err!("prior tokens {} vs backbone tokens {}", delta.dim(1)?, x.dim(1)?));
            }
            y = (y + cr.proj.forward(&delta)?)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::keyed_rng(seed, 0, "fusion-test");
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn small_cfg() -> FusionConfig {
        FusionConfig { mlp_hidden: 5, attn_width: 4, ..Default::default() }
    }

    fn build(cfg: &FusionConfig, layers: usize) -> (Fusion, ParamStore) {
        let store = ParamStore::new(2, "fusion", DType::F64, &Device::Cpu);
        (Fusion::new(&store, cfg, 3, 6, layers).unwrap(), store)
    }

    fn randomise(store: &ParamStore, seed: u64) {
        for (i, (_, v)) in store.vars(&[]).into_iter().enumerate() {
            v.set(&rand_tensor(v.dims(), seed + i as u64)).unwrap();
        }
    }

    #[test]
    fn fresh_parameters_are_transparent() {
        let (f, _) = build(&small_cfg(), 3);
        let x = rand_tensor(&[2, 8, 6], 1);
        let ctx = f.context(&rand_tensor(&[2, 2, 2, 2, 3], 2), &rand_tensor(&[2, 2, 2, 2, 3], 3)).unwrap();
        for b in 0..3 {
            assert_eq!(vec_of(&f.fuse(b, &x, &ctx).unwrap()), vec_of(&x));
        }
        let m = &ctx.mods[0];
        assert!(vec_of(&m.gamma).iter().chain(vec_of(&m.beta).iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn modulation_formula() {
        let x = rand_tensor(&[1, 4, 3], 5);
        let zero = Modulation { gamma: Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap(), beta: Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap() };
        assert_eq!(vec_of(&apply_modulation(&x, &zero).unwrap()), vec_of(&x));
        let one = Modulation { gamma: Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap(), ..zero.clone() };
        let y = vec_of(&apply_modulation(&x, &one).unwrap());
        assert!(y.iter().zip(vec_of(&x)).all(|(a, b)| *a == 2.0 * b));

        let (g, bt) = (rand_tensor(&[2, 3], 6), rand_tensor(&[2, 3], 7));
        let xs = rand_tensor(&[2, 4, 3], 8);
        let got = vec_of(&apply_modulation(&xs, &Modulation { gamma: g.clone(), beta: bt.clone() }).unwrap());
        let (xv, gv, bv) = (vec_of(&xs), vec_of(&g), vec_of(&bt));
        for b in 0..2 {
            for n in 0..4 {
                for c in 0..3 {
                    let i = (b * 4 + n) * 3 + c;
                    let want = (1.0 + gv[b * 3 + c]) * xv[i] + bv[b * 3 + c];
                    assert!((got[i] - want).abs() < 1e-15);
                }
            }
        }
        let bad = Modulation { gamma: Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap(), beta: Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap() };
        assert!(apply_modulation(&x, &bad).is_err());
    }

    #[test]
    fn one_layer_mlp_matches_manual_computation() {
        let ft = Tensor::new(&[0.4f64, -0.7], &Device::Cpu).unwrap().reshape((1, 1, 1, 1, 2)).unwrap();
        let store2 = ParamStore::new(0, "m", DType::F64, &Device::Cpu);
        let mlp = ModulationMlp::new(&store2, 2, 2, 1).unwrap();
        let w1 = [[0.5, -1.0], [2.0, 0.25]];
        let b1 = [0.1, -0.2];
        let w2 = [[1.0, -0.5], [0.3, 0.7]];
        let b2 = [0.05, 0.0];
        store2.set("fc1.weight", &Tensor::new(&w1, &Device::Cpu).unwrap()).unwrap();
        store2.set("fc1.bias", &Tensor::new(&b1, &Device::Cpu).unwrap()).unwrap();
        store2.set("fc2.weight", &Tensor::new(&w2, &Device::Cpu).unwrap()).unwrap();
        store2.set("fc2.bias", &Tensor::new(&b2, &Device::Cpu).unwrap()).unwrap();
        let m = mlp.compute(&ft).unwrap();
        let p = [0.4, -0.7];
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let hdn: Vec<f64> = (0..2).map(|i| silu(w1[i][0] * p[0] + w1[i][1] * p[1] + b1[i])).collect();
        let out: Vec<f64> = (0..2).map(|i| w2[i][0] * hdn[0] + w2[i][1] * hdn[1] + b2[i]).collect();
        assert!((vec_of(&m.gamma)[0] - out[0]).abs() < 1e-14);
        assert!((vec_of(&m.beta)[0] - out[1]).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn modulation_is_invariant_to_token_permutation(seed in any::<u64>()) {
            let (f, store) = build(&small_cfg(), 2);
            randomise(&store, seed % 1000);
            let ft = rand_tensor(&[1, 2, 2, 2, 3], seed);
            let perm = Tensor::new(&[1u32, 0], &Device::Cpu).unwrap();
            let fp = ft.index_select(&perm, 2).unwrap().index_select(&perm, 3).unwrap();
            let a = f.modulation[0].compute(&ft).unwrap();
            let b = f.modulation[0].compute(&fp).unwrap();
            for (x, y) in vec_of(&a.gamma).iter().zip(vec_of(&b.gamma)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in vec_of(&a.beta).iter().zip(vec_of(&b.beta)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_refine_examples() {
        let (f, store) = build(&small_cfg(), 1);
        randomise(&store, 40);
        let cr = &f.blocks[0];
        let ft = rand_tensor(&[1, 1, 2, 2, 3], 1);
        let zeros = Tensor::zeros((1, 1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(vec_of(&cr.cross_refine(&ft, &zeros).unwrap()).iter().all(|v| *v == 0.0));

        let ft1 = rand_tensor(&[1, 1, 1, 1, 3], 2);
        let fs1 = rand_tensor(&[1, 1, 1, 1, 3], 3);
        let d = cr.cross_refine(&ft1, &fs1).unwrap();
        assert_eq!(vec_of(&d), vec_of(&cr.v.forward(&fs1.reshape((1, 1, 3)).unwrap()).unwrap()));

        assert!(cr.cross_refine(&ft, &fs1).is_err());
    }

    #[test]
    fn cross_refine_three_tokens_matches_manual_attention() {
        let (f, store) = build(&small_cfg(), 1);
        randomise(&store, 50);
        let cr = &f.blocks[0];
        let ft = rand_tensor(&[1, 3, 1, 1, 3], 4);
        let fs = rand_tensor(&[1, 1, 3, 1, 3], 5).reshape((1, 3, 1, 1, 3)).unwrap();
        let got = vec_of(&cr.cross_refine(&ft, &fs).unwrap());
        let wq: Vec<Vec<f64>> = cr.q.weight().to_vec2().unwrap();
        let wk: Vec<Vec<f64>> = cr.k.weight().to_vec2().unwrap();
        let wv: Vec<Vec<f64>> = cr.v.weight().to_vec2().unwrap();
        let (tv, sv) = (vec_of(&ft), vec_of(&fs));
        let proj = |w: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> { w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
        for i in 0..3 {
            let q = proj(&wq, &tv[i * 3..i * 3 + 3]);
            let s: Vec<f64> = (0..3)
                .map(|j| proj(&wk, &sv[j * 3..j * 3 + 3]).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..3).map(|j| e[j] / z * proj(&wv, &sv[j * 3..j * 3 + 3])[c]).sum();
                assert!((got[i * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn proj_only_decomposition_and_asymmetry() {
        let (f, store) = build(&small_cfg(), 2);
        randomise(&store, 60);
        for (_, v) in store.vars(&["modulation0.fc2"]) {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = rand_tensor(&[1, 8, 6], 1);
        let fs = rand_tensor(&[1, 2, 2, 2, 3], 2);
        let ft = rand_tensor(&[1, 2, 2, 2, 3], 3);
        let ctx = f.context(&fs, &ft).unwrap();
        let y = f.fuse(1, &x, &ctx).unwrap();
        let want = f.blocks[1].proj.forward(&f.blocks[1].cross_refine(&ft, &fs).unwrap()).unwrap();
        let diff = vec_of(&(y - &x).unwrap());
        for (a, b) in diff.iter().zip(vec_of(&want)) {
            assert!((a - b).abs() < 1e-12);
        }

        // with (gamma, beta) live, one f_t token moves every output token
        randomise(&store, 70);
        let base = vec_of(&f.fuse(0, &x, &f.context(&fs, &ft).unwrap()).unwrap());
        let mut ftv = vec_of(&ft);
        ftv[0] += 0.5;
        let ft2 = Tensor::from_vec(ftv, (1, 2, 2, 2, 3), &Device::Cpu).unwrap();
        let ctx2 = f.context(&fs, &ft2).unwrap();
        assert_ne!(vec_of(&ctx2.mods[0].gamma), vec_of(&f.context(&fs, &ft).unwrap().mods[0].gamma));
        let moved = vec_of(&f.fuse(0, &x, &ctx2).unwrap());
        for n in 0..8 {
            assert!((0..6).any(|c| base[n * 6 + c] != moved[n * 6 + c]), "token {n} unchanged");
        }
    }

    #[test]
    fn shared_modulation_is_one_value_for_all_blocks() {
        let (f, store) = build(&small_cfg(), 4);
        randomise(&store, 80);
        assert_eq!(f.modulation.len(), 1);
        let ctx = f.context(&rand_tensor(&[1, 2, 2, 2, 3], 1), &rand_tensor(&[1, 2, 2, 2, 3], 2)).unwrap();
        let a = ctx.modulation(0).unwrap();
        let b = ctx.modulation(3).unwrap();
        assert!(std::ptr::eq(a, b));
        let (per, _) = build(&FusionConfig { sharing: ModulationSharing::PerLayer, ..small_cfg() }, 4);
        assert_eq!(per.modulation.len(), 4);
    }

    #[test]
    fn ablation_modes_select_parts() {
        let (none, _) = build(&FusionConfig { priors: PriorsMode::None, ..small_cfg() }, 2);
        assert!(none.modulation.is_empty() && none.blocks.is_empty());
        let (sp, _) = build(&FusionConfig { priors: PriorsMode::Spatial, ..small_cfg() }, 2);
        assert!(sp.modulation.is_empty() && sp.blocks.len() == 2);
        let (tp, _) = build(&FusionConfig { priors: PriorsMode::Temporal, ..small_cfg() }, 2);
        assert!(tp.modulation.len() == 1 && tp.blocks.is_empty());
        assert_eq!("temporal".parse::<PriorsMode>().unwrap(), PriorsMode::Temporal);
        assert!("bogus".parse::<PriorsMode>().is_err());
    }

    #[test]
    fn fuse_gradients_match_finite_differences() {
        let (f, store) = build(&small_cfg(), 1);
        randomise(&store, 90);
        let x = rand_tensor(&[1, 4, 6], 1);
        let fs = rand_tensor(&[1, 1, 2, 2, 3], 2);
        let ft = rand_tensor(&[1, 1, 2, 2, 3], 3);
        let w = rand_tensor(&[1, 4, 6], 4);
        let loss = |x: &Tensor, fs: &Tensor, ft: &Tensor| -> Result<Tensor> {
            let ctx = f.context(fs, ft)?;
            Ok((f.fuse(0, x, &ctx)? * &w)?.sum_all()?)
        };
        let rx = check_gradient(&|v| loss(v, &fs, &ft), &x, 1e-5).unwrap();
        let rs = check_gradient(&|v| loss(&x, v, &ft), &fs, 1e-5).unwrap();
        let rt = check_gradient(&|v| loss(&x, &fs, v), &ft, 1e-5).unwrap();
        for r in [rx, rs, rt] {
            assert!(r.rel_error <= 1e-4, "{r:?}");
        }
    }
}
