//! Dense flow fields, backward warping and an exhaustive block-matching
//! flow estimator.
//!
//! Convention: `forward[i]` is defined on the pixel grid of frame `i + 1` and
//! points into frame `i`, so `warp(frame_i, forward[i])` reconstructs frame
//! `i + 1`. `backward[i]` is defined on frame `i` and points into frame
//! `i + 1`, so `warp(frame_{i+1}, backward[i])` reconstructs frame `i`.

use crate::error::{shape_err, Error, Result};
use crate::video::VideoClip;

/// A single `H x W x C` frame, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err!("frame {h}x{w}x{c} needs {} values, got {}", h * w * c, data.len()));
        }
        Ok(Self { h, w, c, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w * 2] }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        let data = (0..h * w).flat_map(|_| [dx, dy]).collect();
        Self { h, w, data }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.w + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn max_magnitude(&self) -> f32 {
        self.data.chunks_exact(2).map(|d| d[0].hypot(d[1])).fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowFieldSequence {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

impl FlowFieldSequence {
    pub fn zeros(pairs: usize, h: usize, w: usize) -> Self {
        Self {
            forward: vec![FlowField::zeros(h, w); pairs],
            backward: vec![FlowField::zeros(h, w); pairs],
        }
    }

    pub fn pairs(&self) -> usize {
        self.forward.len()
    }

    pub fn validate(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        if self.forward.len() != self.backward.len() {
            return Err(shape_err!(
                "forward has {} fields, backward has {}",
                self.forward.len(),
                self.backward.len()
            ));
        }
        if self.forward.len() + 1 != frames {
            return Err(shape_err!("{} flow pairs for a {frames}-frame clip", self.forward.len()));
        }
        let bound = h.max(w) as f32;
        for f in self.forward.iter().chain(&self.backward) {
            if f.h != h || f.w != w {
                return Err(shape_err!("flow is {}x{}, clip is {h}x{w}", f.h, f.w));
            }
            if f.data.iter().any(|v| !v.is_finite() || v.abs() > bound) {
                return Err(shape_err!("flow values must be finite and within {bound} px"));
            }
        }
        Ok(())
    }
}

/// Bilinear sample positions for backward warping: for every output pixel,
/// the four source indices (border-replicated) with their weights, plus
/// whether the sample point lies inside the frame.
#[derive(Debug, Clone)]
pub struct WarpTaps {
    pub index: [Vec<u32>; 4],
    pub weight: [Vec<f64>; 4],
    pub valid: Vec<bool>,
}

pub fn warp_taps(flow: &FlowField) -> WarpTaps {
    let (h, w) = (flow.h, flow.w);
    let n = h * w;
    let mut index: [Vec<u32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    let mut weight: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    let mut valid = Vec::with_capacity(n);
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let sx = x as f64 + dx as f64;
            let sy = y as f64 + dy as f64;
            valid.push((0.0..=wmax).contains(&sx) && (0.0..=hmax).contains(&sy));
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let cx = |v: f64| v.clamp(0.0, wmax) as usize;
            let cy = |v: f64| v.clamp(0.0, hmax) as usize;
            let corners = [
                (cy(y0), cx(x0), (1.0 - fy) * (1.0 - fx)),
                (cy(y0), cx(x0 + 1.0), (1.0 - fy) * fx),
                (cy(y0 + 1.0), cx(x0), fy * (1.0 - fx)),
                (cy(y0 + 1.0), cx(x0 + 1.0), fy * fx),
            ];
            for (k, (yy, xx, wt)) in corners.into_iter().enumerate() {
                index[k].push((yy * w + xx) as u32);
                weight[k].push(wt);
            }
        }
    }
    WarpTaps { index, weight, valid }
}

/// Backward warp: `out(p) = frame(p + flow(p))`, bilinear with
/// border-replicate padding. The mask marks samples that fall inside the
/// frame.
pub fn warp(frame: &Frame, flow: &FlowField) -> Result<(Frame, Vec<bool>)> {
    if frame.h != flow.h || frame.w != flow.w {
        return Err(shape_err!("frame {}x{} vs flow {}x{}", frame.h, frame.w, flow.h, flow.w));
    }
    let taps = warp_taps(flow);
    let c = frame.c;
    let mut out = vec![0f32; frame.data.len()];
    for p in 0..frame.h * frame.w {
        for ch in 0..c {
            let mut acc = 0f64;
            for k in 0..4 {
                let wt = taps.weight[k][p];
                if wt != 0.0 {
                    acc += wt * frame.data[taps.index[k][p] as usize * c + ch] as f64;
                }
            }
            out[p * c + ch] = acc as f32;
        }
    }
    Ok((Frame { h: frame.h, w: frame.w, c, data: out }, taps.valid))
}

/// Exhaustive integer block matching. Candidates keep the whole displaced
/// block inside the frame; among equal SAD the smallest displacement
/// magnitude wins, then the lexicographically smallest `(dx, dy)`.
pub fn block_match_flow(clip: &VideoClip, block: usize, radius: usize) -> Result<FlowFieldSequence> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::Config(format!("block {block} must divide {h}x{w}")));
    }
    if radius > block {
        return Err(Error::Config(format!("radius {radius} exceeds block {block}")));
    }
    let frames: Vec<Frame> = (0..t).map(|i| clip.frame(i)).collect();
    let mut forward = Vec::with_capacity(t - 1);
    let mut backward = Vec::with_capacity(t - 1);
    for i in 0..t - 1 {
        forward.push(match_pair(&frames[i + 1], &frames[i], block, radius));
        backward.push(match_pair(&frames[i], &frames[i + 1], block, radius));
    }
    Ok(FlowFieldSequence { forward, backward })
}

/// Flow on `target`'s grid pointing into `source`.
fn match_pair(target: &Frame, source: &Frame, block: usize, radius: usize) -> FlowField {
    let (h, w, c) = (target.h, target.w, target.c);
    let r = radius as isize;
    let mut flow = FlowField::zeros(h, w);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let mut best: Option<(f64, isize, isize, isize)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y0, x0) = (by as isize + dy, bx as isize + dx);
                    if y0 < 0 || x0 < 0 || y0 as usize + block > h || x0 as usize + block > w {
                        continue;
                    }
                    let mut sad = 0f64;
                    for yy in 0..block {
                        for xx in 0..block {
                            for ch in 0..c {
                                let a = target.at(by + yy, bx + xx, ch) as f64;
                                let b = source.at(y0 as usize + yy, x0 as usize + xx, ch) as f64;
                                sad += (a - b).abs();
                            }
                        }
                    }
                    let mag = dx * dx + dy * dy;
                    let better = match best {
                        None => true,
                        Some((s, m, bdx, bdy)) => {
                            sad < s || (sad == s && (mag < m || (mag == m && (dx, dy) < (bdx, bdy))))
                        }
                    };
                    if better {
                        best = Some((sad, mag, dx, dy));
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("zero displacement is always a candidate");
            for yy in by..by + block {
                for xx in bx..bx + block {
                    let i = (yy * w + xx) * 2;
                    flow.data[i] = dx as f32;
                    flow.data[i + 1] = dy as f32;
                }
            }
        }
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ramp(h: usize, w: usize) -> Frame {
        let data = (0..h).flat_map(|_| (0..w).map(|x| x as f32)).collect();
        Frame::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = crate::rng::keyed_rng(1, 0, "t");
        let data = (0..6 * 5 * 3).map(|_| rng.gen::<f32>()).collect();
        let f = Frame::new(6, 5, 3, data).unwrap();
        let (out, mask) = warp(&f, &FlowField::zeros(6, 5)).unwrap();
        assert_eq!(out, f);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn unit_shift_on_column_ramp() {
        let f = ramp(4, 6);
        let (out, mask) = warp(&f, &FlowField::constant(4, 6, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.at(y, x, 0), (x + 1) as f32);
                assert!(mask[y * 6 + x]);
            }
            assert!(!mask[y * 6 + 5]);
            // border replicate
            assert_eq!(out.at(y, 5, 0), 5.0);
        }
    }

    #[test]
    fn smooth_flow_on_bilinear_ramp_matches_closed_form() {
        // f(x, y) = 0.3 + 0.02 x - 0.015 y + 0.001 x y is exactly bilinear,
        // so bilinear sampling reproduces it at any interior point.
        let (h, w) = (9, 11);
        let g = |x: f64, y: f64| 0.3 + 0.02 * x - 0.015 * y + 0.001 * x * y;
        let data = (0..h).flat_map(|y| (0..w).map(move |x| g(x as f64, y as f64) as f32)).collect();
        let frame = Frame::new(h, w, 1, data).unwrap();
        let flow = FlowField::from_fn(h, w, |y, x| {
            ((0.7 * (y as f32 * 0.4).sin()), (0.5 * (x as f32 * 0.3).cos()))
        });
        let (out, mask) = warp(&frame, &flow).unwrap();
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    continue;
                }
                let (dx, dy) = flow.at(y, x);
                let want = g(x as f64 + dx as f64, y as f64 + dy as f64);
                assert!((out.at(y, x, 0) as f64 - want).abs() < 1e-5, "({y},{x})");
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(warp(&ramp(4, 4), &FlowField::zeros(4, 5)).is_err());
    }

    #[test]
    fn block_geometry_errors() {
        let clip = VideoClip::zeros(3, 8, 8);
        assert!(matches!(block_match_flow(&clip, 3, 1), Err(Error::Config(_))));
        assert!(matches!(block_match_flow(&clip, 2, 3), Err(Error::Config(_))));
    }

    #[test]
    fn static_clip_has_zero_flow() {
        let clip = VideoClip::zeros(3, 8, 8);
        let f = block_match_flow(&clip, 4, 2).unwrap();
        assert_eq!(f, FlowFieldSequence::zeros(2, 8, 8));
    }
}
