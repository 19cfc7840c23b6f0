//! Fidelity and temporal-consistency metrics: PSNR, SSIM and warping error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{warp, FlowFieldSequence};
use crate::video::VideoClip;

/// Reported for frames with zero error.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Scale applied to the masked MSE in [`warping_error`].
pub const EWARP_SCALE: f64 = 1e3;

fn same_shape(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("clip shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean over frames of `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    same_shape(a, b)?;
    let t = a.frames();
    let total: f64 = (0..t)
        .map(|i| {
            let (fa, fb) = (a.frame_data(i), b.frame_data(i));
            let mse = fa.iter().zip(fb).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / fa.len() as f64;
            frame_psnr(mse)
        })
        .sum();
    Ok(total / t as f64)
}

fn frame_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0f64; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-region separable Gaussian filter.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, unit dynamic range),
/// averaged over channels and frames.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    same_shape(a, b)?;
    let (t, h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for i in 0..t {
        let (fa, fb) = (a.frame_data(i), b.frame_data(i));
        for ch in 0..c {
            let x: Vec<f64> = (0..h * w).map(|p| fa[p * c + ch] as f64).collect();
            let y: Vec<f64> = (0..h * w).map(|p| fb[p * c + ch] as f64).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let (mx, oh, ow) = filter_valid(&x, h, w, &g);
            let (my, ..) = filter_valid(&y, h, w, &g);
            let (sxx, ..) = filter_valid(&xx, h, w, &g);
            let (syy, ..) = filter_valid(&yy, h, w, &g);
            let (sxy, ..) = filter_valid(&xy, h, w, &g);
            let mut acc = 0.0;
            for p in 0..oh * ow {
                let (ux, uy) = (mx[p], my[p]);
                let vx = sxx[p] - ux * ux;
                let vy = syy[p] - uy * uy;
                let cxy = sxy[p] - ux * uy;
                acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            total += acc / (oh * ow) as f64;
        }
    }
    Ok(total / (t * c) as f64)
}

/// Mean over frame pairs of the masked MSE between `warp(frame_i,
/// forward_i)` and `frame_{i+1}`, scaled by [`EWARP_SCALE`].
pub fn warping_error(clip: &VideoClip, flows: &FlowFieldSequence) -> Result<f64> {
    let (t, h, w, c) = clip.dims();
    flows.validate(t, h, w)?;
    let mut total = 0.0;
    for i in 0..t - 1 {
        let (warped, mask) = warp(&clip.frame(i), &flows.forward[i])?;
        let target = clip.frame_data(i + 1);
        let (mut se, mut n) = (0f64, 0usize);
        for (p, &m) in mask.iter().enumerate() {
            if m {
                for ch in 0..c {
                    se += (warped.data[p * c + ch] as f64 - target[p * c + ch] as f64).powi(2);
                }
                n += c;
            }
        }
        total += if n > 0 { se / n as f64 } else { 0.0 };
    }
    Ok(EWARP_SCALE * total / (t - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ewarp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub ewarp: f64,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub rows: Vec<ClipMetrics>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn from_rows(label: impl Into<String>, config_hash: impl Into<String>, rows: Vec<ClipMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(shape_err!("an evaluation report needs at least one clip"));
        }
        if rows.iter().any(|r| !(r.psnr.is_finite() && r.ssim.is_finite() && r.ewarp.is_finite())) {
            return Err(shape_err!("non-finite metric in report rows"));
        }
        let n = rows.len() as f64;
        let aggregate = Aggregate {
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            ewarp: rows.iter().map(|r| r.ewarp).sum::<f64>() / n,
            clips: rows.len(),
        };
        Ok(Self { label: label.into(), config_hash: config_hash.into(), rows, aggregate })
    }

    pub fn evaluate_clip(name: &str, restored: &VideoClip, reference: &VideoClip, flows: &FlowFieldSequence) -> Result<ClipMetrics> {
        Ok(ClipMetrics {
            name: name.to_string(),
            psnr: psnr(restored, reference)?,
            ssim: ssim(restored, reference)?,
            ewarp: warping_error(restored, flows)?,
        })
    }

    /// One JSON object per clip row.
    pub fn to_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Writes `<stem>.jsonl` (rows) and `<stem>.summary.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = dir.join(format!("{stem}.jsonl"));
        std::fs::write(&rows, self.to_lines()?).map_err(|e| Error::io(&rows, e))?;
        let summary = dir.join(format!("{stem}.summary.json"));
        std::fs::write(&summary, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&summary, e))
    }

    pub fn read_summary(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowField;
    use crate::rng::keyed_rng;
    use crate::video::{make_toy_clip, MotionSpec};
    use rand::Rng;

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> VideoClip {
        let mut r = keyed_rng(seed, 0, "metrics");
        VideoClip::new(t, h, w, (0..t * h * w * 3).map(|_| r.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_identity_and_constant_offset() {
        let a = random_clip(1, 2, 12, 12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let z = VideoClip::zeros(2, 4, 4);
        let o = VideoClip::filled(2, 4, 4, 0.1);
        assert!((psnr(&z, &o).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let (a, b) = (random_clip(2, 3, 8, 8), random_clip(3, 3, 8, 8));
        let mut acc = 0.0;
        for i in 0..3 {
            let mut se = 0.0;
            for j in 0..8 * 8 * 3 {
                let d = a.data()[i * 192 + j] as f64 - b.data()[i * 192 + j] as f64;
                se += d * d;
            }
            acc += -10.0 * (se / 192.0).log10();
        }
        assert!((psnr(&a, &b).unwrap() - acc / 3.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let (a, b) = (random_clip(4, 2, 16, 16), random_clip(5, 2, 16, 16));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let inv = a.map_values(|_, v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < -0.5);
        assert!(ssim(&VideoClip::zeros(2, 8, 8), &VideoClip::zeros(2, 8, 8)).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_loop() {
        let (a, b) = (random_clip(6, 2, 13, 12), random_clip(7, 2, 13, 12));
        let g = gaussian_window();
        let (h, w) = (13, 12);
        let mut total = 0.0;
        for i in 0..2 {
            for ch in 0..3 {
                let px = |c: &VideoClip, y: usize, x: usize| c.frame_data(i)[(y * w + x) * 3 + ch] as f64;
                let mut acc = 0.0;
                let mut n = 0;
                for y0 in 0..=h - 11 {
                    for x0 in 0..=w - 11 {
                        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for dy in 0..11 {
                            for dx in 0..11 {
                                let wt = g[dy] * g[dx];
                                let (p, q) = (px(&a, y0 + dy, x0 + dx), px(&b, y0 + dy, x0 + dx));
                                mx += wt * p;
                                my += wt * q;
                                sxx += wt * p * p;
                                syy += wt * q * q;
                                sxy += wt * p * q;
                            }
                        }
                        let (c1, c2) = (1e-4, 9e-4);
                        acc += ((2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2))
                            / ((mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2));
                        n += 1;
                    }
                }
                total += acc / n as f64;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / 6.0).abs() < 1e-6);
    }

    #[test]
    fn warping_error_static_and_translation() {
        let (clip, flows) = make_toy_clip(&MotionSpec::stationary(), 4, 16, 16, 0).unwrap();
        assert_eq!(warping_error(&clip, &flows).unwrap(), 0.0);
        let (clip, flows) = make_toy_clip(&MotionSpec::translate(1.0, -1.0), 4, 16, 16, 0).unwrap();
        assert!(warping_error(&clip, &flows).unwrap() <= 1e-6);
        let (clip, flows) = make_toy_clip(&MotionSpec::rotate(0.03), 4, 16, 16, 0).unwrap();
        assert!(warping_error(&clip, &flows).unwrap() <= 1.0);
    }

    #[test]
    fn warping_error_grows_with_flicker() {
        let (clip, flows) = make_toy_clip(&MotionSpec::translate(1.0, 0.0), 5, 16, 16, 8).unwrap();
        let errs: Vec<f64> = [0.01f32, 0.05, 0.1]
            .iter()
            .map(|&c| {
                let flick = clip.map_values(|i, v| if i % 2 == 0 { v + c } else { v - c });
                warping_error(&flick, &flows).unwrap()
            })
            .collect();
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    }

    #[test]
    fn warping_error_length_mismatch() {
        let clip = VideoClip::zeros(3, 4, 4);
        let flows = FlowFieldSequence { forward: vec![FlowField::zeros(4, 4)], backward: vec![FlowField::zeros(4, 4)] };
        assert!(warping_error(&clip, &flows).is_err());
    }

    #[test]
    fn report_aggregate_is_row_mean() {
        let rows = vec![
            ClipMetrics { name: "a".into(), psnr: 30.0, ssim: 0.9, ewarp: 1.0 },
            ClipMetrics { name: "b".into(), psnr: 20.0, ssim: 0.5, ewarp: 3.0 },
        ];
        let r = EvalReport::from_rows("x", "h", rows).unwrap();
        assert!((r.aggregate.psnr - 25.0).abs() < 1e-9);
        assert!((r.aggregate.ssim - 0.7).abs() < 1e-9);
        assert!((r.aggregate.ewarp - 2.0).abs() < 1e-9);
        assert_eq!(r.to_lines().unwrap().lines().count(), 2);
    }
}
