//! Spatio-temporal dual-codebook prior extractor.
//!
//! Grids are `(B, t, h, w, d)` tensors; videos enter as `(B, T, 3, H, W)`.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Conv2d, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{grid_to_maps, maps_to_grid, Attention, Init, LayerNorm, ParamStore, TransformerBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StdcConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub encoder_width: usize,
    pub temporal_heads: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_width: usize,
    /// Positional tables cover grids up to `(t, h, w)`.
    pub max_grid: [usize; 3],
}

impl Default for StdcConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 32,
            spatial_stride: 4,
            temporal_stride: 1,
            encoder_width: 64,
            temporal_heads: 4,
            transformer_layers: 4,
            transformer_heads: 4,
            transformer_width: 128,
            max_grid: [8, 16, 16],
        }
    }
}

impl StdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(config_err!("codebook size must be at least 2"));
        }
        if !self.spatial_stride.is_power_of_two() {
            return Err(config_err!("spatial stride {} is not a power of two", self.spatial_stride));
        }
        if self.temporal_stride == 0 {
            return Err(config_err!("temporal stride must be positive"));
        }
        if self.code_dim % self.temporal_heads != 0 {
            return Err(config_err!("code dim {} not divisible by {} heads", self.code_dim, self.temporal_heads));
        }
        if self.transformer_width % self.transformer_heads != 0 {
            return Err(config_err!("transformer width not divisible by heads"));
        }
        Ok(())
    }

    /// Latent grid `(t, h, w)` for a `T x H x W` video.
    pub fn grid_dims(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let s = self.spatial_stride;
        if h % s != 0 {
            return Err(shape_err!("height {h} not divisible by spatial stride {s}"));
        }
        if w % s != 0 {
            return Err(shape_err!("width {w} not divisible by spatial stride {s}"));
        }
        if t % self.temporal_stride != 0 {
            return Err(shape_err!("frame count {t} not divisible by temporal stride {}", self.temporal_stride));
        }
        Ok((t / self.temporal_stride, h / s, w / s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodePath {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let (k, _) = entries.dims2()?;
        if k < 2 {
            return Err(shape_err!("codebook needs at least two entries, got {k}"));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.dim(0).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.entries.dim(1).unwrap_or(0)
    }

    pub fn lookup(&self, indices: &Tensor) -> Result<Tensor> {
        let dims = indices.dims().to_vec();
        let flat = indices.flatten_all()?;
        let rows = self.entries.index_select(&flat, 0)?;
        let mut out = dims;
        out.push(self.dim());
        Ok(rows.reshape(out)?)
    }
}

/// Quantized grid: `values` are codebook rows; `st` is the straight-through
/// output `z + sg(values - z)`; `indices` is a `u32` grid without the `d` axis.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub values: Tensor,
    pub st: Tensor,
    pub indices: Tensor,
}

/// Exhaustive nearest-neighbour indices, smallest index on ties.
pub fn nearest_indices(tokens: &[f64], entries: &[f64], d: usize) -> Vec<u32> {
    let k = entries.len() / d;
    tokens
        .chunks_exact(d)
        .map(|z| {
            let mut best = (f64::INFINITY, 0u32);
            for j in 0..k {
                let c = &entries[j * d..(j + 1) * d];
                let dist: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, j as u32);
                }
            }
            best.1
        })
        .collect()
}

pub fn quantize(z: &Tensor, cb: &Codebook) -> Result<Quantized> {
    let dims = z.dims().to_vec();
    let d = *dims.last().ok_or_else(|| shape_err!("cannot quantize a scalar"))?;
    if d != cb.dim() {
        return Err(shape_err!("latent dim {d} does not match codebook dim {}", cb.dim()));
    }
    let tokens: Vec<f64> = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let entries: Vec<f64> = cb.entries.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let idx = nearest_indices(&tokens, &entries, d);
    let indices = Tensor::from_vec(idx, &dims[..dims.len() - 1], z.device())?;
    let values = cb.lookup(&indices)?.to_dtype(z.dtype())?;
    let st = (z + (&values - z)?.detach())?;
    Ok(Quantized { values, st, indices })
}

/// Fraction of positions where two index grids agree.
pub fn index_agreement(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("index grids {:?} vs {:?}", a.dims(), b.dims()));
    }
    let a: Vec<u32> = a.flatten_all()?.to_vec1()?;
    let b: Vec<u32> = b.flatten_all()?.to_vec1()?;
    let hits = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Ok(hits as f64 / a.len().max(1) as f64)
}

/// `x[i] - x[i-1]` along `t`, zero for the first frame.
pub fn frame_diff(z: &Tensor) -> Result<Tensor> {
    let t = z.dim(1)?;
    let first = z.narrow(1, 0, 1)?.zeros_like()?;
    if t == 1 {
        return Ok(first);
    }
    let diff = (z.narrow(1, 1, t - 1)? - z.narrow(1, 0, t - 1)?)?;
    Ok(Tensor::cat(&[&first, &diff], 1)?)
}

#[derive(Debug, Clone)]
pub struct TemporalAttn {
    pub attn: Attention,
}

impl TemporalAttn {
    /// Attends over `t` independently at every spatial position.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, d) = z.dims5()?;
        let seq = z.permute((0, 2, 3, 1, 4))?.contiguous()?.reshape((b * h * w, t, d))?;
        let y = self.attn.forward(&seq, &seq)?;
        Ok(y.reshape((b, h, w, t, d))?.permute((0, 3, 1, 2, 4))?.contiguous()?)
    }
}

#[derive(Debug, Clone)]
pub struct SpatialPath {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl SpatialPath {
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let b = z.dim(0)?;
        let y = self.conv2.forward(&self.conv1.forward(&grid_to_maps(z)?)?.silu()?)?;
        Ok(maps_to_grid(&y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct CodeTransformer {
    pub input: Linear,
    pub pos_t: Tensor,
    pub pos_h: Tensor,
    pub pos_w: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub head: Linear,
}

impl CodeTransformer {
    fn new(p: &ParamStore, cfg: &StdcConfig) -> Result<Self> {
        let wd = cfg.transformer_width;
        let [mt, mh, mw] = cfg.max_grid;
        Ok(Self {
            input: p.linear("input", cfg.code_dim, wd, true)?,
            pos_t: p.tensor("pos_t", &[mt, wd], Init::Normal(0.02))?,
            pos_h: p.tensor("pos_h", &[mh, wd], Init::Normal(0.02))?,
            pos_w: p.tensor("pos_w", &[mw, wd], Init::Normal(0.02))?,
            blocks: (0..cfg.transformer_layers)
                .map(|i| TransformerBlock::new(&p.pp(&format!("block{i}")), wd, cfg.transformer_heads))
                .collect::<Result<_>>()?,
            ln: p.layer_norm("ln", wd)?,
            head: p.linear("head", wd, cfg.codebook_size, true)?,
        })
    }

    /// Positional table for a `(t, h, w)` grid, flattened to `(t*h*w, width)`.
    pub fn positions(&self, t: usize, h: usize, w: usize) -> Result<Tensor> {
        let (mt, wd) = self.pos_t.dims2()?;
        let (mh, mw) = (self.pos_h.dim(0)?, self.pos_w.dim(0)?);
        if t > mt || h > mh || w > mw {
            return Err(Error::Capacity(format!(
                "grid {t}x{h}x{w} ({} tokens) exceeds configured maximum {mt}x{mh}x{mw} ({} tokens)",
                t * h * w,
                mt * mh * mw
            )));
        }
        let pt = self.pos_t.narrow(0, 0, t)?.reshape((t, 1, 1, wd))?;
        let ph = self.pos_h.narrow(0, 0, h)?.reshape((1, h, 1, wd))?;
        let pw = self.pos_w.narrow(0, 0, w)?.reshape((1, 1, w, wd))?;
        Ok(pt.broadcast_add(&ph)?.broadcast_add(&pw)?.reshape((t * h * w, wd))?)
    }

    /// Logits for explicit `(B, N, d)` tokens and `(N, width)` positions.
    pub fn forward_tokens(&self, tokens: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let mut x = self.input.forward(tokens)?.broadcast_add(pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        Ok(self.head.forward(&self.ln.forward(&x)?)?)
    }

    /// `(B, t, h, w, d)` grid to `(B, t*h*w, K)` logits.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, d) = z.dims5()?;
        let pos = self.positions(t, h, w)?;
        self.forward_tokens(&z.reshape((b, t * h * w, d))?, &pos)
    }
}

#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub proj: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub proj: Conv2d,
    pub up: Vec<Conv2d>,
    pub out: Conv2d,
}

impl ConvEncoder {
    pub fn new(p: &ParamStore, cin: usize, width: usize, cout: usize, stride: usize) -> Result<Self> {
        let n = stride.trailing_zeros() as usize;
        Ok(Self {
            stem: p.conv2d("stem", cin, width, 3, 1)?,
            down: (0..n).map(|i| p.conv2d(&format!("down{i}"), width, width, 3, 2)).collect::<Result<_>>()?,
            proj: p.conv2d("proj", width, cout, 1, 1)?,
        })
    }

    /// `(N, C, H, W)` maps to `(N, cout, H/s, W/s)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.stem.forward(x)?.silu()?;
        for c in &self.down {
            y = c.forward(&y)?.silu()?;
        }
        Ok(self.proj.forward(&y)?)
    }
}

impl ConvDecoder {
    pub fn new(p: &ParamStore, cin: usize, width: usize, cout: usize, stride: usize) -> Result<Self> {
        let n = stride.trailing_zeros() as usize;
        Ok(Self {
            proj: p.conv2d("proj", cin, width, 1, 1)?,
            up: (0..n).map(|i| p.conv2d(&format!("up{i}"), width, width, 3, 1)).collect::<Result<_>>()?,
            out: p.conv2d("out", width, cout, 3, 1)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut y = self.proj.forward(z)?.silu()?;
        for c in &self.up {
            let (_, _, h, w) = y.dims4()?;
            y = c.forward(&y.upsample_nearest2d(2 * h, 2 * w)?)?.silu()?;
        }
        Ok(self.out.forward(&y)?)
    }
}

/// All intermediate tensors of one pass through the dual-codebook autoencoder.
#[derive(Debug, Clone)]
pub struct StdcForward {
    pub z_l: Tensor,
    pub z_s: Tensor,
    pub z_t: Tensor,
    pub q_s: Quantized,
    pub q_t: Quantized,
    /// Unclamped decoder output, `(B, T, 3, H, W)`.
    pub recon: Tensor,
}

impl StdcForward {
    /// `(pre-quantization, quantized)` pairs for the two codebooks.
    pub fn feature_pairs(&self) -> [(Tensor, Tensor); 2] {
        [(self.z_s.clone(), self.q_s.values.clone()), (self.z_t.clone(), self.q_t.values.clone())]
    }
}

/// Priors selected from predicted code indices.
#[derive(Debug, Clone)]
pub struct Priors {
    pub f_s: Tensor,
    pub f_t: Tensor,
    pub idx_s: Tensor,
    pub idx_t: Tensor,
}

/// Parameter-group prefixes, relative to the store the model was built on.
pub mod groups {
    pub const ENCODER: &str = "encoder";
    pub const TEMPORAL: &str = "temporal";
    pub const SPATIAL: &str = "spatial";
    pub const CODEBOOK_S: &str = "codebook_s";
    pub const CODEBOOK_T: &str = "codebook_t";
    pub const TRANSFORMER_S: &str = "transformer_s";
    pub const TRANSFORMER_T: &str = "transformer_t";
    pub const DECODER: &str = "decoder";
}

#[derive(Debug, Clone)]
pub struct StdcModel {
    pub cfg: StdcConfig,
    pub encoder: ConvEncoder,
    pub temporal: TemporalAttn,
    pub spatial: SpatialPath,
    pub codebook_s: Codebook,
    pub codebook_t: Codebook,
    pub transformer_s: CodeTransformer,
    pub transformer_t: CodeTransformer,
    pub decoder: ConvDecoder,
}

impl StdcModel {
    pub fn new(cfg: &StdcConfig, p: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (k, d) = (cfg.codebook_size, cfg.code_dim);
        let bound = 1.0 / k as f64;
        let sp = p.pp(groups::SPATIAL);
        Ok(Self {
            cfg: cfg.clone(),
            encoder: ConvEncoder::new(&p.pp(groups::ENCODER), 3, cfg.encoder_width, d, cfg.spatial_stride)?,
            temporal: TemporalAttn { attn: Attention::new(&p.pp(groups::TEMPORAL), d, d, d, d, cfg.temporal_heads)? },
            spatial: SpatialPath { conv1: sp.conv2d("conv1", d, d, 3, 1)?, conv2: sp.conv2d("conv2", d, d, 3, 1)? },
            codebook_s: Codebook::new(p.pp(groups::CODEBOOK_S).tensor("entries", &[k, d], Init::Uniform(bound))?)?,
            codebook_t: Codebook::new(p.pp(groups::CODEBOOK_T).tensor("entries", &[k, d], Init::Uniform(bound))?)?,
            transformer_s: CodeTransformer::new(&p.pp(groups::TRANSFORMER_S), cfg)?,
            transformer_t: CodeTransformer::new(&p.pp(groups::TRANSFORMER_T), cfg)?,
            decoder: ConvDecoder::new(&p.pp(groups::DECODER), d, cfg.encoder_width, 3, cfg.spatial_stride)?,
        })
    }

    /// `(B, T, 3, H, W)` video to `(B, t, h, w, d)` latent grid.
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = video.dims5()?;
        if c != 3 {
            return Err(shape_err!("expected 3 channels, got {c}"));
        }
        let (gt, _, _) = self.cfg.grid_dims(t, h, w)?;
        let maps = self.encoder.forward(&video.reshape((b * t, c, h, w))?)?;
        let grid = maps_to_grid(&maps, b)?;
        let st = self.cfg.temporal_stride;
        if st == 1 {
            return Ok(grid);
        }
        let (_, _, gh, gw, d) = grid.dims5()?;
        Ok(grid.reshape((b, gt, st, gh, gw, d))?.mean(2)?)
    }

    pub fn temporal_interaction(&self, z_l: &Tensor) -> Result<Tensor> {
        let t = z_l.dim(1)?;
        if t < 2 {
            return Err(shape_err!("temporal interaction needs at least two latent frames, got {t}"));
        }
        Ok((self.temporal.forward(z_l)? + frame_diff(z_l)?)?)
    }

    pub fn spatial_path(&self, z_l: &Tensor) -> Result<Tensor> {
        self.spatial.forward(z_l)
    }

    pub fn codebook(&self, which: CodePath) -> &Codebook {
        match which {
            CodePath::Spatial => &self.codebook_s,
            CodePath::Temporal => &self.codebook_t,
        }
    }

    pub fn predict_codes(&self, z: &Tensor, which: CodePath) -> Result<Tensor> {
        match which {
            CodePath::Spatial => self.transformer_s.forward(z),
            CodePath::Temporal => self.transformer_t.forward(z),
        }
    }

    /// `(B, t, h, w, d)` grid to unclamped `(B, T, 3, H, W)` video.
    pub fn decode_raw(&self, z_q: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, d) = z_q.dims5()?;
        let st = self.cfg.temporal_stride;
        let z = if st == 1 {
            z_q.clone()
        } else {
            z_q.unsqueeze(2)?.broadcast_as((b, t, st, h, w, d))?.reshape((b, t * st, h, w, d))?
        };
        let y = self.decoder.forward(&grid_to_maps(&z)?)?;
        let (n, c, hh, ww) = y.dims4()?;
        Ok(y.reshape((b, n / b, c, hh, ww))?)
    }

    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z_q)?.clamp(0.0, 1.0)?)
    }

    /// Encode, split into both paths, quantize each with its own codebook
    /// and decode `st_s + st_t`.
    pub fn autoencode(&self, video: &Tensor) -> Result<StdcForward> {
        let z_l = self.encode(video)?;
        let z_s = self.spatial_path(&z_l)?;
        let z_t = self.temporal_interaction(&z_l)?;
        let q_s = quantize(&z_s, &self.codebook_s)?;
        let q_t = quantize(&z_t, &self.codebook_t)?;
        let recon = self.decode_raw(&(&q_s.st + &q_t.st)?)?;
        Ok(StdcForward { z_l, z_s, z_t, q_s, q_t, recon })
    }

    /// Encoder latents for both paths without quantization.
    pub fn paths(&self, video: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let z_l = self.encode(video)?;
        let z_s = self.spatial_path(&z_l)?;
        let z_t = self.temporal_interaction(&z_l)?;
        Ok((z_l, z_s, z_t))
    }

    /// Direct nearest-neighbour codes of a (typically HQ) video.
    pub fn nearest_codes(&self, video: &Tensor) -> Result<(Quantized, Quantized)> {
        let (_, z_s, z_t) = self.paths(video)?;
        Ok((quantize(&z_s.detach(), &self.codebook_s)?, quantize(&z_t.detach(), &self.codebook_t)?))
    }

    /// Code logits `(B, t*h*w, K)` for both paths of a video.
    pub fn code_logits(&self, video: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let (_, z_s, z_t) = self.paths(video)?;
        let ls = self.predict_codes(&z_s, CodePath::Spatial)?;
        let lt = self.predict_codes(&z_t, CodePath::Temporal)?;
        Ok((ls, lt, z_s, z_t))
    }

    pub fn extract_priors(&self, x_lq: &Tensor) -> Result<Priors> {
        let (b, t, _, h, w) = x_lq.dims5()?;
        let (gt, gh, gw) = self.cfg.grid_dims(t, h, w)?;
        let (ls, lt, _, _) = self.code_logits(x_lq)?;
        let pick = |logits: &Tensor| -> Result<Tensor> {
            let logits = logits.detach().to_dtype(DType::F64)?;
            let rows: Vec<Vec<f64>> = logits.reshape(((), self.cfg.codebook_size))?.to_vec2()?;
            let idx: Vec<u32> = rows.iter().map(|r| argmax(r) as u32).collect();
            Ok(Tensor::from_vec(idx, (b, gt, gh, gw), x_lq.device())?)
        };
        let idx_s = pick(&ls)?;
        let idx_t = pick(&lt)?;
        Ok(Priors {
            f_s: self.codebook_s.lookup(&idx_s)?.detach(),
            f_t: self.codebook_t.lookup(&idx_t)?.detach(),
            idx_s,
            idx_t,
        })
    }
}

/// First index of the maximum; NaN never wins.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn softmax_rows_sum(logits: &Tensor) -> Result<Vec<f64>> {
    let p = crate::nn::softmax_last(&logits.to_dtype(DType::F64)?)?;
    Ok(p.sum(D::Minus1)?.flatten_all()?.to_vec1()?)
}
