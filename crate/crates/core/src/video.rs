//! Synthetic face-like video clips with analytic motion, the degradation
//! pipeline that turns them into low-quality inputs, and on-disk datasets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_io::{parse_array, Array, ArrayData};
use crate::error::{config_err, shape_err, Error, Result};
use crate::flow::{FlowField, FlowFieldSequence, Frame};
use crate::rng::{derive_seed, keyed_rng};

pub const CHANNELS: usize = 3;

/// `T x H x W x 3` frame sequence with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
    pub name: Option<String>,
}

impl VideoClip {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if t < 2 {
            return Err(shape_err!("a clip needs at least 2 frames, got {t}"));
        }
        if data.len() != t * h * w * CHANNELS {
            return Err(shape_err!("clip {t}x{h}x{w}x3 needs {} values, got {}", t * h * w * CHANNELS, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(shape_err!("clip value {v} outside [0, 1]"));
        }
        Ok(Self { t, h, w, data, name: None })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w, data: vec![0.0; t * h * w * CHANNELS], name: None }
    }

    pub fn filled(t: usize, h: usize, w: usize, value: f32) -> Self {
        Self { t, h, w, data: vec![value.clamp(0.0, 1.0); t * h * w * CHANNELS], name: None }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn frames(&self) -> usize {
        self.t
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, CHANNELS)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * CHANNELS
    }

    pub fn frame_data(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame(&self, i: usize) -> Frame {
        Frame { h: self.h, w: self.w, c: CHANNELS, data: self.frame_data(i).to_vec() }
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| shape_err!("no frames"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if (f.h, f.w, f.c) != (first.h, first.w, CHANNELS) {
                return Err(shape_err!("inconsistent frame geometry"));
            }
            data.extend_from_slice(&f.data);
        }
        Self::new(frames.len(), first.h, first.w, data)
    }

    /// `(T, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.t, self.h, self.w, CHANNELS), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Builds a clip from a `(T, 3, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (frames, c, h, w) = t.dims4()?;
        if c != CHANNELS {
            return Err(shape_err!("expected 3 channels, got {c}"));
        }
        let data: Vec<f32> = t
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(frames, h, w, data)
    }

    /// Mutable access for in-place edits that keep the range invariant.
    pub fn map_values(&self, f: impl Fn(usize, f32) -> f32) -> Self {
        let fl = self.frame_len();
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i / fl, v).clamp(0.0, 1.0)).collect();
        Self { data, ..self.clone() }
    }
}

/// Stacks equally sized clips into a `(B, T, 3, H, W)` tensor.
pub fn stack_clips(clips: &[&VideoClip], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = clips.first().ok_or_else(|| shape_err!("empty clip batch"))?;
    let dims = first.dims();
    let mut ts = Vec::with_capacity(clips.len());
    for c in clips {
        if c.dims() != dims {
            return Err(shape_err!("clip {:?} has shape {:?}, batch expects {:?}", c.name, c.dims(), dims));
        }
        ts.push(c.to_tensor(device, dtype)?);
    }
    Ok(Tensor::stack(&ts, 0)?)
}

/// Inverse of [`stack_clips`], clamping values into `[0, 1]`.
pub fn unstack_clips(t: &Tensor) -> Result<Vec<VideoClip>> {
    let b = t.dim(0)?;
    (0..b).map(|i| VideoClip::from_tensor(&t.get(i)?)).collect()
}

// ---------------------------------------------------------------------------
// Motion and toy content

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Translate,
    Rotate,
    Scale,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Grating period in pixels.
    pub period: f64,
    /// Grating amplitude, 0 gives a plain background.
    pub contrast: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self { period: 13.7, contrast: 0.18 }
    }
}

/// Per-frame motion. A frame `k` samples the underlying content at
/// `M_k(p) = c + s^k R(k θ) (p - c) + k v`, with `c` the frame centre, so the
/// flow from frame `k + 1` into frame `k` is `M_k^{-1} M_{k+1} p - p`. For a
/// pure translation this is exactly `v` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionKind,
    /// px/frame
    pub velocity: (f64, f64),
    /// rad/frame
    pub angular_rate: f64,
    /// relative scale change per frame
    pub scale_rate: f64,
    pub background: Background,
}

impl MotionSpec {
    pub fn translate(vx: f64, vy: f64) -> Self {
        Self {
            kind: MotionKind::Translate,
            velocity: (vx, vy),
            angular_rate: 0.0,
            scale_rate: 0.0,
            background: Background::default(),
        }
    }

    pub fn stationary() -> Self {
        Self::translate(0.0, 0.0)
    }

    pub fn rotate(rate: f64) -> Self {
        Self { kind: MotionKind::Rotate, angular_rate: rate, ..Self::stationary() }
    }

    pub fn scale(rate: f64) -> Self {
        Self { kind: MotionKind::Scale, scale_rate: rate, ..Self::stationary() }
    }

    pub fn composite(velocity: (f64, f64), angular_rate: f64, scale_rate: f64) -> Self {
        Self { kind: MotionKind::Composite, velocity, angular_rate, scale_rate, ..Self::stationary() }
    }

    fn effective(&self) -> ((f64, f64), f64, f64) {
        match self.kind {
            MotionKind::Translate => (self.velocity, 0.0, 0.0),
            MotionKind::Rotate => ((0.0, 0.0), self.angular_rate, 0.0),
            MotionKind::Scale => ((0.0, 0.0), 0.0, self.scale_rate),
            MotionKind::Composite => (self.velocity, self.angular_rate, self.scale_rate),
        }
    }

    fn frame_map(&self, k: usize, centre: (f64, f64)) -> Affine {
        let ((vx, vy), theta, rate) = self.effective();
        let k = k as f64;
        let s = (1.0 + rate).powf(k);
        let (sin, cos) = (theta * k).sin_cos();
        let a = [[s * cos, -s * sin], [s * sin, s * cos]];
        // c + A (p - c) + k v
        let b = [
            centre.0 - a[0][0] * centre.0 - a[0][1] * centre.1 + k * vx,
            centre.1 - a[1][0] * centre.0 - a[1][1] * centre.1 + k * vy,
        ];
        Affine { a, b }
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    a: [[f64; 2]; 2],
    b: [f64; 2],
}

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.b[0],
            self.a[1][0] * x + self.a[1][1] * y + self.b[1],
        )
    }

    fn inverse(&self) -> Affine {
        let [[p, q], [r, s]] = self.a;
        let det = p * s - q * r;
        let a = [[s / det, -q / det], [-r / det, p / det]];
        let b = [
            -(a[0][0] * self.b[0] + a[0][1] * self.b[1]),
            -(a[1][0] * self.b[0] + a[1][1] * self.b[1]),
        ];
        Affine { a, b }
    }

    /// `self ∘ other`
    fn compose(&self, other: &Affine) -> Affine {
        let m = |i: usize, j: usize| self.a[i][0] * other.a[0][j] + self.a[i][1] * other.a[1][j];
        let a = [[m(0, 0), m(0, 1)], [m(1, 0), m(1, 1)]];
        let (bx, by) = self.apply(other.b[0], other.b[1]);
        Affine { a, b: [bx, by] }
    }
}

/// Flow on frame `to`'s grid pointing into frame `from`.
fn analytic_flow(spec: &MotionSpec, from: usize, to: usize, h: usize, w: usize) -> FlowField {
    let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let map = spec.frame_map(from, centre).inverse().compose(&spec.frame_map(to, centre));
    let translation = spec.effective().1 == 0.0 && spec.effective().2 == 0.0;
    let (vx, vy) = spec.effective().0;
    let sign = if to > from { 1.0 } else { -1.0 };
    FlowField::from_fn(h, w, |y, x| {
        if translation {
            // exact, no rounding through the affine composition
            ((sign * vx) as f32, (sign * vy) as f32)
        } else {
            let (sx, sy) = map.apply(x as f64, y as f64);
            ((sx - x as f64) as f32, (sy - y as f64) as f32)
        }
    })
}

/// Smooth face-like composite: ellipse head with shading, two eyes and a
/// mouth arc over a sinusoidal grating. Defined on the continuous plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyFace {
    head_centre: (f64, f64),
    head_radii: (f64, f64),
    skin: [f64; 3],
    eye: [f64; 3],
    mouth: [f64; 3],
    bg: [f64; 3],
    bg_angle: f64,
    bg_phase: f64,
    background: Background,
    edge: f64,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ToyFace {
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize, background: Background) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let mut colour = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let skin = colour(0.45, 0.85);
        let eye = colour(0.05, 0.2);
        let mouth = colour(0.25, 0.45);
        let bg = colour(0.2, 0.7);
        Self {
            head_centre: (
                (wf - 1.0) / 2.0 + rng.gen_range(-0.06..0.06) * wf,
                (hf - 1.0) / 2.0 + rng.gen_range(-0.06..0.06) * hf,
            ),
            head_radii: (rng.gen_range(0.22..0.30) * wf, rng.gen_range(0.28..0.36) * hf),
            skin,
            eye,
            mouth,
            bg,
            bg_angle: rng.gen_range(0.0..PI),
            bg_phase: rng.gen_range(0.0..2.0 * PI),
            background,
            edge: 0.6 * (hf / 32.0).max(1.0),
        }
    }

    pub fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let (cx, cy) = self.head_centre;
        let (rx, ry) = self.head_radii;
        let bgp = self.background;
        let (s, c) = self.bg_angle.sin_cos();
        let u = x * c + y * s;
        let v = -x * s + y * c;
        let grating = bgp.contrast
            * (0.7 * (2.0 * PI * u / bgp.period + self.bg_phase).sin()
                + 0.3 * (2.0 * PI * v / (bgp.period * 1.618)).cos());
        let mut px = [0f64; 3];
        for ch in 0..3 {
            px[ch] = self.bg[ch] + grating * (1.0 - 0.3 * ch as f64);
        }

        let (nx, ny) = ((x - cx) / rx, (y - cy) / ry);
        let r = (nx * nx + ny * ny).sqrt();
        let head = logistic((1.0 - r) * rx.min(ry) / self.edge);
        let shade = 1.0 - 0.25 * (0.6 * nx + 0.8 * ny + 0.3 * r * r);
        for ch in 0..3 {
            px[ch] = px[ch] * (1.0 - head) + self.skin[ch] * shade * head;
        }

        let eye_r = 0.16 * rx;
        for side in [-1.0, 1.0] {
            let (ex, ey) = (cx + side * 0.38 * rx, cy - 0.22 * ry);
            let d = ((x - ex).powi(2) + (y - ey).powi(2)).sqrt();
            let m = logistic((eye_r - d) / self.edge) * head;
            for ch in 0..3 {
                px[ch] = px[ch] * (1.0 - m) + self.eye[ch] * m;
            }
        }

        // mouth: band around a parabola below the centre
        let mx = (x - cx) / rx;
        let curve = cy + 0.38 * ry + 0.25 * ry * mx * mx;
        let band = (0.07 * ry - (y - curve).abs()) / self.edge;
        let width = (0.5 - mx.abs()) * rx / self.edge;
        let m = logistic(band) * logistic(width) * head;
        for ch in 0..3 {
            px[ch] = px[ch] * (1.0 - m) + self.mouth[ch] * m;
        }
        px.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Renders a clip whose frame-to-frame motion is exactly `spec`, together
/// with the analytic forward/backward flows.
pub fn make_toy_clip(spec: &MotionSpec, t: usize, h: usize, w: usize, seed: u64) -> Result<(VideoClip, FlowFieldSequence)> {
    if t < 3 {
        return Err(config_err!("toy clips need at least 3 frames, got {t}"));
    }
    if h < 16 || w < 16 {
        return Err(config_err!("toy clips need H, W >= 16, got {h}x{w}"));
    }
    let values = [spec.velocity.0, spec.velocity.1, spec.angular_rate, spec.scale_rate];
    if values.iter().any(|v| !v.is_finite()) || spec.scale_rate <= -1.0 {
        return Err(config_err!("invalid motion parameters {spec:?}"));
    }
    let mut forward = Vec::with_capacity(t - 1);
    let mut backward = Vec::with_capacity(t - 1);
    let bound = h as f32 / 4.0;
    for i in 0..t - 1 {
        let fw = analytic_flow(spec, i, i + 1, h, w);
        let bw = analytic_flow(spec, i + 1, i, h, w);
        let worst = fw.max_magnitude().max(bw.max_magnitude());
        if worst > bound {
            return Err(config_err!("motion displaces {worst:.2} px between frames {i} and {}, limit is H/4 = {bound}", i + 1));
        }
        forward.push(fw);
        backward.push(bw);
    }

    let mut rng = keyed_rng(seed, 0, "content");
    let face = ToyFace::sample(&mut rng, h, w, spec.background);
    let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(t * h * w * CHANNELS);
    for k in 0..t {
        let map = spec.frame_map(k, centre);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = map.apply(x as f64, y as f64);
                data.extend(face.at(sx, sy).iter().map(|&v| v as f32));
            }
        }
    }
    let clip = VideoClip::new(t, h, w, data)?;
    Ok((clip, FlowFieldSequence { forward, backward }))
}

// ---------------------------------------------------------------------------
// Degradation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub downscale_factors: Vec<usize>,
    pub jpeg_like_quality_range: [u32; 2],
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.8, 1.8],
            noise_sigma_range: [0.01, 0.04],
            downscale_factors: vec![2],
            jpeg_like_quality_range: [40, 80],
            seed: 0,
        }
    }
}

impl DegradeConfig {
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: [0.0, 0.0],
            noise_sigma_range: [0.0, 0.0],
            downscale_factors: vec![1],
            jpeg_like_quality_range: [100, 100],
            seed: 0,
        }
    }

    pub fn fixed(blur: f64, noise: f64, factor: usize, quality: u32, seed: u64) -> Self {
        Self {
            blur_sigma_range: [blur, blur],
            noise_sigma_range: [noise, noise],
            downscale_factors: vec![factor],
            jpeg_like_quality_range: [quality, quality],
            seed,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let [b0, b1] = self.blur_sigma_range;
        let [n0, n1] = self.noise_sigma_range;
        let [q0, q1] = self.jpeg_like_quality_range;
        if !(0.0 <= b0 && b0 <= b1 && b1.is_finite()) {
            return Err(config_err!("blur sigma range {:?}", self.blur_sigma_range));
        }
        if !(0.0 <= n0 && n0 <= n1 && n1 <= 1.0) {
            return Err(config_err!("noise sigma range {:?}", self.noise_sigma_range));
        }
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(config_err!("quality range {:?}", self.jpeg_like_quality_range));
        }
        if self.downscale_factors.is_empty() {
            return Err(config_err!("no downscale factors"));
        }
        for &f in &self.downscale_factors {
            if f == 0 || h % f != 0 || w % f != 0 {
                return Err(config_err!("downscale factor {f} must divide {h}x{w}"));
            }
        }
        Ok(())
    }
}

/// The parameters actually drawn for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeLog {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub downscale_factor: usize,
    pub quality: u32,
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// blur -> downscale -> noise -> block-DCT quantisation -> upscale -> clamp.
/// A pure function of `(clip, cfg)`.
pub fn degrade(clip: &VideoClip, cfg: &DegradeConfig) -> Result<(VideoClip, DegradeLog)> {
    cfg.validate(clip.h, clip.w)?;
    let mut rng = keyed_rng(cfg.seed, 0, "degrade");
    let blur_sigma = draw(&mut rng, cfg.blur_sigma_range);
    let noise_sigma = draw(&mut rng, cfg.noise_sigma_range);
    let downscale_factor = cfg.downscale_factors[rng.gen_range(0..cfg.downscale_factors.len())];
    let [q0, q1] = cfg.jpeg_like_quality_range;
    let quality = rng.gen_range(q0..=q1);
    let log = DegradeLog { blur_sigma, noise_sigma, downscale_factor, quality };
    log::debug!("degrade {:?}: {log:?}", clip.name);

    let mut noise_rng = keyed_rng(cfg.seed, 1, "degrade-noise");
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let (h, w) = (clip.h, clip.w);
    let mut out = Vec::with_capacity(clip.data.len());
    for i in 0..clip.t {
        let mut planes: Vec<Plane> = (0..CHANNELS).map(|ch| Plane::from_frame(clip.frame_data(i), h, w, ch)).collect();
        for p in planes.iter_mut() {
            if blur_sigma > 0.0 {
                *p = p.gaussian_blur(blur_sigma);
            }
            if downscale_factor > 1 {
                *p = p.box_downscale(downscale_factor);
            }
            if noise_sigma > 0.0 {
                p.data.iter_mut().for_each(|v| *v += normal.sample(&mut noise_rng));
            }
            if quality < 100 {
                *p = p.dct_quantise(quality);
            }
            if downscale_factor > 1 {
                *p = p.bilinear_resize(h, w);
            }
        }
        for y in 0..h {
            for x in 0..w {
                for p in &planes {
                    out.push(p.data[y * w + x].clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let mut lq = VideoClip::new(clip.t, h, w, out)?;
    lq.name = clip.name.clone();
    Ok((lq, log))
}

#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_frame(frame: &[f32], h: usize, w: usize, ch: usize) -> Self {
        let data = (0..h * w).map(|p| frame[p * CHANNELS + ch] as f64).collect();
        Self { h, w, data }
    }

    fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn gaussian_blur(&self, sigma: f64) -> Self {
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r).map(|i| k[(i + r) as usize] * self.at_clamped(y as isize, x as isize + i)).sum();
            }
        }
        let tmp = Plane { h, w, data: tmp };
        let mut out = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = (-r..=r).map(|i| k[(i + r) as usize] * tmp.at_clamped(y as isize + i, x as isize)).sum();
            }
        }
        Plane { h, w, data: out }
    }

    fn box_downscale(&self, f: usize) -> Self {
        let (h, w) = (self.h / f, self.w / f);
        let norm = (f * f) as f64;
        let mut data = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += self.data[(y * f + dy) * self.w + x * f + dx];
                    }
                }
                data[y * w + x] = acc / norm;
            }
        }
        Plane { h, w, data }
    }

    fn bilinear_resize(&self, h: usize, w: usize) -> Self {
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        let mut data = vec![0f64; h * w];
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = fy.floor();
            let wy = fy - y0;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = fx.floor();
                let wx = fx - x0;
                let (y0, x0) = (y0 as isize, x0 as isize);
                data[y * w + x] = (1.0 - wy) * ((1.0 - wx) * self.at_clamped(y0, x0) + wx * self.at_clamped(y0, x0 + 1))
                    + wy * ((1.0 - wx) * self.at_clamped(y0 + 1, x0) + wx * self.at_clamped(y0 + 1, x0 + 1));
            }
        }
        Plane { h, w, data }
    }

    /// 8x8 orthonormal DCT-II, quantised with the standard luminance table
    /// scaled by the IJG quality rule, then inverted. Partial edge blocks are
    /// replicate-padded.
    fn dct_quantise(&self, quality: u32) -> Self {
        let table = quant_table(quality);
        let basis = dct_basis();
        let (h, w) = (self.h, self.w);
        let mut out = self.data.clone();
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0f64; 8]; 8];
                for (u, row) in block.iter_mut().enumerate() {
                    for (v, val) in row.iter_mut().enumerate() {
                        *val = self.at_clamped((by + u) as isize, (bx + v) as isize) - 0.5;
                    }
                }
                let mut coef = [[0f64; 8]; 8];
                for (k, crow) in coef.iter_mut().enumerate() {
                    for (l, c) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += basis[k][u] * basis[l][v] * block[u][v];
                            }
                        }
                        let step = table[k][l] / 255.0;
                        *c = (acc / step).round() * step;
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        if by + u >= h || bx + v >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..8 {
                            for l in 0..8 {
                                acc += basis[k][u] * basis[l][v] * coef[k][l];
                            }
                        }
                        out[(by + u) * w + bx + v] = acc + 0.5;
                    }
                }
            }
        }
        Plane { h, w, data: out }
    }
}

const LUMA_TABLE: [[f64; 8]; 8] = [
    [16., 11., 10., 16., 24., 40., 51., 61.],
    [12., 12., 14., 19., 26., 58., 60., 55.],
    [14., 13., 16., 24., 40., 57., 69., 56.],
    [14., 17., 22., 29., 51., 87., 80., 62.],
    [18., 22., 37., 56., 68., 109., 103., 77.],
    [24., 35., 55., 64., 81., 104., 113., 92.],
    [49., 64., 78., 87., 103., 121., 120., 101.],
    [72., 92., 95., 98., 112., 100., 103., 99.],
];

fn quant_table(quality: u32) -> [[f64; 8]; 8] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_TABLE.map(|row| row.map(|v| ((v * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0)))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0f64; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub seed: u64,
    /// Upper bound on translation speed, px/frame.
    pub max_speed: f64,
    pub max_angular_rate: f64,
    pub max_scale_rate: f64,
    pub degrade: DegradeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            train_clips: 16,
            test_clips: 4,
            seed: 0,
            max_speed: 1.5,
            max_angular_rate: 0.03,
            max_scale_rate: 0.015,
            degrade: DegradeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub motion: MotionSpec,
    pub hq: VideoClip,
    pub lq: VideoClip,
    pub flows: FlowFieldSequence,
    pub degradation: DegradeLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<ClipRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

pub fn sample_motion(rng: &mut impl Rng, cfg: &DatasetConfig) -> MotionSpec {
    let kinds = [MotionKind::Translate, MotionKind::Rotate, MotionKind::Scale, MotionKind::Composite];
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let velocity = (sym(cfg.max_speed), sym(cfg.max_speed));
    let angular_rate = sym(cfg.max_angular_rate);
    let scale_rate = sym(cfg.max_scale_rate);
    MotionSpec { kind, velocity, angular_rate, scale_rate, background: Background::default() }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let total = cfg.train_clips + cfg.test_clips;
    let mut clips = Vec::with_capacity(total);
    for index in 0..total {
        let split = if index < cfg.train_clips { Split::Train } else { Split::Test };
        let seed = derive_seed(cfg.seed, index as u64, "clip");
        let motion = sample_motion(&mut keyed_rng(cfg.seed, index as u64, "motion"), cfg);
        let name = format!("clip_{index:04}");
        let (hq, flows) = make_toy_clip(&motion, cfg.frames, cfg.height, cfg.width, seed)?;
        let hq = hq.with_name(name.clone());
        let dcfg = DegradeConfig { seed: derive_seed(cfg.degrade.seed ^ cfg.seed, index as u64, "degrade"), ..cfg.degrade.clone() };
        let (lq, degradation) = degrade(&hq, &dcfg)?;
        clips.push(ClipRecord { name, split, seed, motion, hq, lq, flows, degradation });
    }
    Ok(Dataset { clips })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestClip {
    name: String,
    split: Split,
    seed: u64,
    shape: [usize; 4],
    motion: MotionSpec,
    degradation: DegradeLog,
    files: BTreeMap<String, String>,
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    clips: Vec<ManifestClip>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const FILE_KINDS: [&str; 4] = ["hq", "lq", "flow_forward", "flow_backward"];

fn clip_array(clip: &VideoClip) -> Array {
    Array { shape: vec![clip.t, clip.h, clip.w, CHANNELS], data: ArrayData::F32(clip.data.clone()) }
}

fn flow_array(fields: &[FlowField]) -> Array {
    let (h, w) = fields.first().map(|f| (f.h, f.w)).unwrap_or((0, 0));
    let data = fields.iter().flat_map(|f| f.data.iter().copied()).collect();
    Array { shape: vec![fields.len(), h, w, 2], data: ArrayData::F32(data) }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clips = Vec::with_capacity(dataset.clips.len());
    for rec in &dataset.clips {
        let arrays = [
            clip_array(&rec.hq),
            clip_array(&rec.lq),
            flow_array(&rec.flows.forward),
            flow_array(&rec.flows.backward),
        ];
        let mut files = BTreeMap::new();
        let mut checksums = BTreeMap::new();
        for (kind, array) in FILE_KINDS.iter().zip(arrays.iter()) {
            let file = format!("{}_{kind}.dpa", rec.name);
            let bytes = array.to_bytes();
            let path = dir.join(&file);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            checksums.insert(kind.to_string(), sha256_hex(&bytes));
            files.insert(kind.to_string(), file);
        }
        clips.push(ManifestClip {
            name: rec.name.clone(),
            split: rec.split,
            seed: rec.seed,
            shape: [rec.hq.t, rec.hq.h, rec.hq.w, CHANNELS],
            motion: rec.motion,
            degradation: rec.degradation,
            files,
            checksums,
        });
    }
    let manifest = Manifest { format_version: 1, clips };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format { path: mpath.clone(), detail: e.to_string() })?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for mc in manifest.clips {
        let mut arrays = BTreeMap::new();
        for kind in FILE_KINDS {
            let file = mc.files.get(kind).ok_or_else(|| Error::Format {
                path: mpath.clone(),
                detail: format!("clip {} lists no {kind} file", mc.name),
            })?;
            let path: PathBuf = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let want = mc.checksums.get(kind).map(String::as_str).unwrap_or("");
            let got = sha256_hex(&bytes);
            if got != want {
                return Err(Error::Integrity { path, detail: format!("sha256 {got} != manifest {want}") });
            }
            arrays.insert(kind, (path.clone(), parse_array(&path, &bytes)?));
        }
        let [t, h, w, _] = mc.shape;
        let as_clip = |(path, a): &(PathBuf, Array)| -> Result<VideoClip> {
            let data = a.as_f32().ok_or_else(|| Error::Format { path: path.clone(), detail: "expected f32".into() })?;
            if a.shape != [t, h, w, CHANNELS] {
                return Err(Error::Format { path: path.clone(), detail: format!("shape {:?} != manifest {:?}", a.shape, mc.shape) });
            }
            Ok(VideoClip::new(t, h, w, data.to_vec())?.with_name(mc.name.clone()))
        };
        let as_flows = |(path, a): &(PathBuf, Array)| -> Result<Vec<FlowField>> {
            let data = a.as_f32().ok_or_else(|| Error::Format { path: path.clone(), detail: "expected f32".into() })?;
            if a.shape != [t - 1, h, w, 2] {
                return Err(Error::Format { path: path.clone(), detail: format!("flow shape {:?}", a.shape) });
            }
            Ok(data.chunks_exact(h * w * 2).map(|c| FlowField { h, w, data: c.to_vec() }).collect())
        };
        clips.push(ClipRecord {
            hq: as_clip(&arrays["hq"])?,
            lq: as_clip(&arrays["lq"])?,
            flows: FlowFieldSequence {
                forward: as_flows(&arrays["flow_forward"])?,
                backward: as_flows(&arrays["flow_backward"])?,
            },
            name: mc.name,
            split: mc.split,
            seed: mc.seed,
            motion: mc.motion,
            degradation: mc.degradation,
        });
    }
    Ok(Dataset { clips })
}
