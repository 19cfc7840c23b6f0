//! PNG report figures drawn directly into pixel buffers: loss curves,
//! per-clip metric bars and temporal-slice strips.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::checkpoint::HistoryEntry;
use crate::error::{shape_err, Result};
use crate::metrics::EvalReport;
use crate::video::VideoClip;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn canvas(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, BG)
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=n {
        let x = x0 + (x1 - x0) * i / n;
        let y = y0 + (y1 - y0) * i / n;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn frame_axes(img: &mut RgbImage, m: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for k in 1..5 {
        let y = m + (h - 2 * m) * k / 5;
        line(img, (m, y), (w - m, y), GRID);
    }
    line(img, (m, h - m), (w - m, h - m), AXIS);
    line(img, (m, m), (m, h - m), AXIS);
}

/// Log-scale curves of the named loss components over iterations.
pub fn loss_curves(history: &[HistoryEntry], components: &[&str]) -> Result<RgbImage> {
    let (w, h, m) = (640u32, 360u32, 30i64);
    let mut img = canvas(w, h);
    frame_axes(&mut img, m);
    if history.is_empty() {
        return Ok(img);
    }
    let pick = |e: &HistoryEntry, name: &str| -> Option<f64> {
        let r = &e.report;
        let v = match name {
            "total" => r.total,
            "l1" => r.l1,
            "per" => r.per,
            "feat" => r.feat,
            "adv_g" => r.adv_g,
            "adv_d" => r.adv_d,
            "ce_s" => r.ce_s,
            "ce_t" => r.ce_t,
            "cf" => r.cf,
            "rec_latent" => r.rec_latent,
            "rec_pixel" => r.rec_pixel,
            "temp" => r.temp,
            _ => return None,
        };
        (v > 0.0 && v.is_finite()).then(|| v.log10())
    };
    let all: Vec<f64> = history.iter().flat_map(|e| components.iter().filter_map(move |c| pick(e, c))).collect();
    if all.is_empty() {
        return Ok(img);
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let last = history.last().map_or(1, |e| e.iteration.max(1)) as f64;
    let px = |it: usize| m + ((w as i64 - 2 * m) as f64 * it as f64 / last) as i64;
    let py = |v: f64| (h as i64 - m) - ((h as i64 - 2 * m) as f64 * (v - lo) / (hi - lo)) as i64;
    for (ci, name) in components.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for e in history {
            if let Some(v) = pick(e, name) {
                let p = (px(e.iteration), py(v));
                if let Some(q) = prev {
                    line(&mut img, q, p, color);
                }
                prev = Some(p);
            }
        }
        rect(&mut img, (w - 20) as u32 - 12 * ci as u32, 6, (w - 12) as u32 - 12 * ci as u32, 14, color);
    }
    Ok(img)
}

/// Grouped bars of per-clip PSNR, one colour per report.
pub fn metric_bars(reports: &[&EvalReport]) -> Result<RgbImage> {
    let (w, h, m) = (640u32, 320u32, 30i64);
    let mut img = canvas(w, h);
    frame_axes(&mut img, m);
    let Some(first) = reports.first() else { return Ok(img) };
    let clips = first.rows.len();
    if reports.iter().any(|r| r.rows.len() != clips) {
        return Err(shape_err!("reports cover different clip counts"));
    }
    let vals: Vec<f64> = reports.iter().flat_map(|r| r.rows.iter().map(|x| x.psnr)).collect();
    let hi = vals.iter().cloned().fold(0.0, f64::max).max(1.0);
    let slot = (w as i64 - 2 * m) / (clips.max(1) as i64);
    let bar = (slot / (reports.len() as i64 + 1)).max(1);
    for (ri, r) in reports.iter().enumerate() {
        for (ci, row) in r.rows.iter().enumerate() {
            let x0 = m + slot * ci as i64 + bar * ri as i64 + bar / 2;
            let top = (h as i64 - m) - ((h as i64 - 2 * m) as f64 * row.psnr.max(0.0) / hi) as i64;
            rect(&mut img, x0 as u32, top as u32, (x0 + bar) as u32, (h as i64 - m) as u32, PALETTE[ri % PALETTE.len()]);
        }
    }
    Ok(img)
}

/// Row `y` of every frame stacked top to bottom, each pixel scaled by
/// `zoom`; the clips are placed side by side with a gap.
pub fn temporal_slices(clips: &[&VideoClip], y: usize, zoom: u32) -> Result<RgbImage> {
    let Some(first) = clips.first() else { return Err(shape_err!("no clips to slice")) };
    let (t, h, w, _) = first.dims();
    if y >= h {
        return Err(shape_err!("row {y} outside a clip of height {h}"));
    }
    if clips.iter().any(|c| c.dims() != first.dims()) {
        return Err(shape_err!("clips differ in shape"));
    }
    let gap = 4;
    let width = (w as u32 * zoom + gap) * clips.len() as u32 - gap;
    let mut img = canvas(width, t as u32 * zoom);
    for (k, clip) in clips.iter().enumerate() {
        let x_off = k as u32 * (w as u32 * zoom + gap);
        for f in 0..t {
            let data = clip.frame_data(f);
            for x in 0..w {
                let p = &data[(y * w + x) * 3..(y * w + x) * 3 + 3];
                let c = Rgb([0, 1, 2].map(|i| (p[i].clamp(0.0, 1.0) * 255.0).round() as u8));
                rect(&mut img, x_off + x as u32 * zoom, f as u32 * zoom, x_off + (x as u32 + 1) * zoom, (f as u32 + 1) * zoom, c);
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}
