//! Parameter store with seeded initialisation, the small set of layers the
//! models share, and a checkpointable AdamW.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::array_io::Array;
use crate::error::{shape_err, Error, Result};
use crate::rng::{keyed_rng, KeyedRng};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: KeyedRng,
    dtype: DType,
    device: Device,
}

/// Named trainable parameters. Cloning shares the underlying storage;
/// [`ParamStore::pp`] scopes names with a dotted prefix.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.lock().unwrap().vars.len();
        write!(f, "ParamStore(prefix={:?}, vars={n})", self.prefix)
    }
}

impl ParamStore {
    pub fn new(seed: u64, tag: &str, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: keyed_rng(seed, 0, &format!("init:{tag}")),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Self { inner: self.inner.clone(), prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    pub fn tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        let mut inner = self.inner.lock().unwrap();
        if inner.vars.contains_key(&full) {
            return Err(shape_err!("parameter {full} registered twice"));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.gen_range(-b..=b)).collect(),
            Init::Normal(s) => {
                let normal = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    pub fn linear(&self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let b = 1.0 / (fan_in as f64).sqrt();
        let p = self.pp(name);
        let w = p.tensor("weight", &[fan_out, fan_in], Init::Uniform(b))?;
        let bias = if bias { Some(p.tensor("bias", &[fan_out], Init::Uniform(b))?) } else { None };
        Ok(Linear::new(w, bias))
    }

    /// Zero weight and bias, so the layer starts as the constant zero map.
    pub fn linear_zero(&self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let p = self.pp(name);
        let w = p.tensor("weight", &[fan_out, fan_in], Init::Zeros)?;
        let b = p.tensor("bias", &[fan_out], Init::Zeros)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(&self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv2d> {
        let b = 1.0 / ((cin * k * k) as f64).sqrt();
        let p = self.pp(name);
        let w = p.tensor("weight", &[cout, cin, k, k], Init::Uniform(b))?;
        let bias = p.tensor("bias", &[cout], Init::Uniform(b))?;
        let cfg = Conv2dConfig { padding: k / 2, stride, ..Default::default() };
        Ok(Conv2d::new(w, Some(bias), cfg))
    }

    pub fn layer_norm(&self, name: &str, dim: usize) -> Result<LayerNorm> {
        let p = self.pp(name);
        Ok(LayerNorm {
            weight: p.tensor("weight", &[dim], Init::Ones)?,
            bias: p.tensor("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// All variables whose full name starts with one of `prefixes`
    /// (an empty list selects everything).
    pub fn vars(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().vars.keys().cloned().collect()
    }

    pub fn num_params(&self, prefixes: &[&str]) -> usize {
        self.vars(prefixes).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a registered parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name).ok_or_else(|| shape_err!("unknown parameter {name}"))?;
        if var.dims() != value.dims() {
            return Err(shape_err!("{name}: shape {:?} vs {:?}", var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn to_arrays(&self, prefixes: &[&str]) -> Result<BTreeMap<String, Array>> {
        self.vars(prefixes)
            .into_iter()
            .map(|(k, v)| Ok((k, Array::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Loads every registered parameter from `arrays`; missing names fail.
    pub fn load_arrays(&self, arrays: &BTreeMap<String, Array>, prefixes: &[&str]) -> Result<()> {
        let device = self.device();
        for (name, _) in self.vars(prefixes) {
            let a = arrays.get(&name).ok_or_else(|| shape_err!("checkpoint lacks parameter {name}"))?;
            self.set(&name, &a.to_tensor(&device)?)?;
        }
        Ok(())
    }

    /// Byte-level fingerprint of the selected parameters for freeze checks.
    pub fn fingerprint(&self, prefixes: &[&str]) -> Result<BTreeMap<String, Vec<u8>>> {
        Ok(self.to_arrays(prefixes)?.into_iter().map(|(k, a)| (k, a.to_bytes())).collect())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Softmax over the last dimension; the max shift is detached so the
/// gradient is exactly the softmax Jacobian.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Multi-head scaled dot-product attention on `(B, N, H*dh)` projections.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, nq, c) = q.dims3()?;
    let nk = k.dim(1)?;
    let cv = v.dim(2)?;
    let dh = c / heads;
    let split = |x: &Tensor, n: usize, width: usize| -> candle_core::Result<Tensor> {
        x.reshape((b, n, heads, width / heads))?.transpose(1, 2)?.contiguous()
    };
    let (qh, kh, vh) = (split(q, nq, c)?, split(k, nk, c)?, split(v, nk, cv)?);
    let scores = (qh.matmul(&kh.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    let w = softmax_last(&scores)?;
    w.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, cv))
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Option<Linear>,
    pub heads: usize,
}

impl Attention {
    pub fn new(p: &ParamStore, dim_q: usize, dim_kv: usize, width: usize, out_dim: usize, heads: usize) -> Result<Self> {
        if width % heads != 0 {
            return Err(shape_err!("attention width {width} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: p.linear("q", dim_q, width, true)?,
            k: p.linear("k", dim_kv, width, true)?,
            v: p.linear("v", dim_kv, width, true)?,
            out: Some(p.linear("out", width, out_dim, true)?),
            heads,
        })
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> candle_core::Result<Tensor> {
        let y = attention(&self.q.forward(xq)?, &self.k.forward(xkv)?, &self.v.forward(xkv)?, self.heads)?;
        match &self.out {
            Some(o) => o.forward(&y),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(p: &ParamStore, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self { fc1: p.linear("fc1", dim, hidden, true)?, fc2: p.linear("fc2", hidden, out, true)? })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Pre-norm transformer block: self-attention then MLP, both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(p: &ParamStore, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: p.layer_norm("ln1", width)?,
            attn: Attention::new(&p.pp("attn"), width, width, width, width, heads)?,
            ln2: p.layer_norm("ln2", width)?,
            mlp: Mlp::new(&p.pp("mlp"), width, 2 * width, width)?,
        })
    }
}

impl Module for TransformerBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        &x + self.mlp.forward(&self.ln2.forward(&x)?)?
    }
}

/// `(B, T, h, w, d)` to `(B*T, d, h, w)`.
pub fn grid_to_maps(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, d) = x.dims5()?;
    x.reshape((b * t, h, w, d))?.permute((0, 3, 1, 2))?.contiguous()
}

/// `(B*T, d, h, w)` to `(B, T, h, w, d)`.
pub fn maps_to_grid(x: &Tensor, b: usize) -> candle_core::Result<Tensor> {
    let (bt, d, h, w) = x.dims4()?;
    x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b, bt / b, h, w, d))
}

pub fn mse(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.sqr()?.mean_all()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

/// Decoupled-weight-decay Adam whose moments can be saved and restored.
pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: usize,
    pub cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { params, m, v, steps: 0, cfg })
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update and returns the pre-clipping global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for (_, p) in &self.params {
            if let Some(g) = grads.get(p.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Shape("non-finite gradient norm".into()));
        }
        let scale = match self.cfg.clip_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            // conv kernel gradients can arrive still attached to the graph;
            // without the detach the moments would chain every iteration
            let g = (g.detach() * scale)?;
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let decayed = (p.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            p.set(&(decayed - (update * c.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    pub fn state_arrays(&self) -> Result<BTreeMap<String, Array>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adam.m.{name}"), Array::from_tensor(&self.m[i])?);
            out.insert(format!("adam.v.{name}"), Array::from_tensor(&self.v[i])?);
        }
        let steps = Array::new(vec![1], crate::array_io::ArrayData::I64(vec![self.steps as i64]))
            .map_err(Error::Shape)?;
        out.insert("adam.steps".into(), steps);
        Ok(out)
    }

    pub fn load_state(&mut self, arrays: &BTreeMap<String, Array>) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let get = |k: String| arrays.get(&k).ok_or_else(|| shape_err!("optimizer state lacks {k}"));
            self.m[i] = get(format!("adam.m.{name}"))?.to_tensor(p.device())?;
            self.v[i] = get(format!("adam.v.{name}"))?.to_tensor(p.device())?;
        }
        match arrays.get("adam.steps").map(|a| &a.data) {
            Some(crate::array_io::ArrayData::I64(v)) if v.len() == 1 => self.steps = v[0] as usize,
            _ => return Err(shape_err!("optimizer state lacks step count")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_seeded_and_scoped() {
        let a = ParamStore::new(3, "m", DType::F32, &Device::Cpu);
        let b = ParamStore::new(3, "m", DType::F32, &Device::Cpu);
        let la = a.pp("enc").linear("fc", 4, 2, true).unwrap();
        let lb = b.pp("enc").linear("fc", 4, 2, true).unwrap();
        let va: Vec<f32> = la.weight().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = lb.weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.names(), vec!["enc.fc.bias", "enc.fc.weight"]);
        assert!(a.pp("enc").linear("fc", 4, 2, true).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2., 3.], [-5., 0., 100.]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls: Vec<Vec<f64>> = log_softmax_last(&x).unwrap().exp().unwrap().to_vec2().unwrap();
        assert!((ls[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[[0.3f64, -1.0], [2.0, 0.5]]], &dev).unwrap();
        let k = Tensor::new(&[[[1.0f64, 1.0]]], &dev).unwrap();
        let v = Tensor::new(&[[[4.0f64, -2.0]]], &dev).unwrap();
        let y: Vec<Vec<Vec<f64>>> = attention(&q, &k, &v, 1).unwrap().to_vec3().unwrap();
        assert_eq!(y[0], vec![vec![4.0, -2.0], vec![4.0, -2.0]]);
    }

    #[test]
    fn adamw_moments_stay_off_the_graph_for_conv_kernels() {
        let store = ParamStore::new(0, "c", DType::F32, &Device::Cpu);
        let w = store.tensor("w", &[2, 3, 3, 3], Init::Uniform(0.3)).unwrap();
        let x = Tensor::ones((1, 3, 6, 6), DType::F32, &Device::Cpu).unwrap();
        let mut opt = AdamW::new(store.vars(&[]), AdamWConfig::default()).unwrap();
        for _ in 0..2 {
            let loss = x.conv2d(&w, 1, 1, 1, 1).unwrap().sqr().unwrap().mean_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!(opt.m.iter().chain(&opt.v).all(|t| !t.track_op()));
    }

    #[test]
    fn adamw_minimises_a_quadratic_and_round_trips_state() {
        let store = ParamStore::new(0, "q", DType::F64, &Device::Cpu);
        let x = store.tensor("x", &[3], Init::Uniform(1.0)).unwrap();
        let target = Tensor::new(&[0.5f64, -0.25, 2.0], &Device::Cpu).unwrap();
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, clip_norm: None, ..Default::default() };
        let mut opt = AdamW::new(store.vars(&[]), cfg).unwrap();
        for _ in 0..400 {
            let loss = mse(&x, &target).unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let got: Vec<f64> = store.var("x").unwrap().as_tensor().to_vec1().unwrap();
        for (g, w) in got.iter().zip([0.5, -0.25, 2.0]) {
            assert!((g - w).abs() < 1e-2, "{got:?}");
        }
        let state = opt.state_arrays().unwrap();
        let mut opt2 = AdamW::new(store.vars(&[]), cfg).unwrap();
        opt2.load_state(&state).unwrap();
        assert_eq!(opt2.steps(), 400);
        assert_eq!(opt2.state_arrays().unwrap(), state);
    }

    #[test]
    fn grid_maps_round_trip() {
        let x = Tensor::arange(0f32, 2. * 3. * 2. * 2. * 4., &Device::Cpu).unwrap().reshape((2, 3, 2, 2, 4)).unwrap();
        let m = grid_to_maps(&x).unwrap();
        assert_eq!(m.dims(), &[6, 4, 2, 2]);
        let back = maps_to_grid(&m, 2).unwrap();
        let (a, b): (Vec<f32>, Vec<f32>) = (x.flatten_all().unwrap().to_vec1().unwrap(), back.flatten_all().unwrap().to_vec1().unwrap());
        assert_eq!(a, b);
    }
}
