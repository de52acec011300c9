//! PNG output: per-slice panels and ROC overlays. Rendering is plain pixel
//! drawing; colours of the ROC curves are listed in a JSON legend next to
//! each overlay.

use super::{load_maps, Layout, Report};
use crate::data::{self, GroundTruth, Slice};
use crate::error::{Error, Result};
use crate::eval::DifferenceMap;
use image::{Rgb, RgbImage};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Curve colours, cycled.
pub const PALETTE: [[u8; 3]; 14] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 128],
    [128, 0, 0],
    [0, 128, 128],
    [255, 215, 0],
];

const SEPARATOR: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

/// Black, red, yellow, white.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(v), c(v - 1.0), c(v - 2.0)])
}

fn blit(canvas: &mut RgbImage, col: u32, tile: u32, scale: u32, dim: (usize, usize), px: impl Fn(usize, usize) -> Rgb<u8>) {
    let x0 = col * (tile + SEPARATOR);
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            let p = px(r, c);
            for dy in 0..scale {
                for dx in 0..scale {
                    canvas.put_pixel(x0 + c as u32 * scale + dx, r as u32 * scale + dy, p);
                }
            }
        }
    }
}

/// Input, ground truth, then one map per detector, left to right. The input
/// is stretched over its in-mask range; each map over `[0, max]`.
pub fn render_panel(input: &Slice, gt: &GroundTruth, maps: &[&DifferenceMap], scale: u32) -> RgbImage {
    let (h, w) = input.dim();
    let scale = scale.max(1);
    let tile = w as u32 * scale;
    let cols = 2 + maps.len() as u32;
    let mut canvas = RgbImage::from_pixel(cols * tile + (cols - 1) * SEPARATOR, h as u32 * scale, BACKGROUND);
    let vals = input.masked_values();
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    blit(&mut canvas, 0, tile, scale, (h, w), |r, c| {
        if input.mask[[r, c]] {
            gray((input.pixels[[r, c]] as f64 - lo) / span)
        } else {
            gray(0.0)
        }
    });
    blit(&mut canvas, 1, tile, scale, (h, w), |r, c| match (gt.labels[[r, c]], input.mask[[r, c]]) {
        (true, _) => gray(1.0),
        (false, true) => gray(0.25),
        (false, false) => gray(0.0),
    });
    for (k, m) in maps.iter().enumerate() {
        let max = m.max();
        blit(&mut canvas, 2 + k as u32, tile, scale, (h, w), |r, c| {
            heat(if max > 0.0 { m.scores[[r, c]] / max } else { 0.0 })
        });
    }
    canvas
}

fn put_thick(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for dy in 0..2 {
        for dx in 0..2 {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Bresenham segment; `dash` draws `dash` pixels on, `dash` off.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, dash: Option<i64>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err, mut step) = (x0, y0, dx + dy, 0i64);
    loop {
        if dash.is_none_or(|d| (step / d) % 2 == 0) {
            put_thick(img, x, y, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        step += 1;
    }
}

/// ROC curves on the unit square with the dashed chance diagonal. Curve `k`
/// uses `PALETTE[k % PALETTE.len()]`.
pub fn render_roc(curves: &[Vec<(f64, f64)>], size: u32) -> RgbImage {
    let margin = 16i64;
    let size = size.max(64);
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let side = size as i64 - 2 * margin;
    let to_px = |fpr: f64, tpr: f64| {
        (margin + (fpr.clamp(0.0, 1.0) * side as f64).round() as i64, margin + side - (tpr.clamp(0.0, 1.0) * side as f64).round() as i64)
    };
    let black = Rgb([0, 0, 0]);
    let corners = [to_px(0.0, 0.0), to_px(1.0, 0.0), to_px(1.0, 1.0), to_px(0.0, 1.0)];
    for i in 0..4 {
        line(&mut img, corners[i], corners[(i + 1) % 4], black, None);
    }
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), black, Some(6));
    for (k, pts) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for w in pts.windows(2) {
            line(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), color, None);
        }
    }
    img
}

fn read_roc(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingestion { path: path.into(), message: e.to_string() })?;
    let mut pts = Vec::new();
    for rec in r.deserialize::<(f64, f64, f64)>() {
        let (fpr, tpr, _) = rec.map_err(|e| Error::Integrity { path: path.into(), message: e.to_string() })?;
        pts.push((fpr, tpr));
    }
    Ok(pts)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_err(path, e))
}

/// Panels (`<dataset>_panel_<i>.png`, first `max_panels` test slices) and
/// ROC overlays (`<dataset>_roc.png` + `<dataset>_roc.json` legend) under
/// `out/plots`. Returns the written PNG paths.
pub fn emit_plots(report: &Report, out: &Path, max_panels: Option<usize>) -> Result<Vec<PathBuf>> {
    let dir = Layout::new(out).plots();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (dataset, test_rel) in &report.test_sets {
        let refs: Vec<_> = report.maps.iter().filter(|m| &m.dataset == dataset).collect();
        if refs.is_empty() {
            continue;
        }
        let test_path = out.join(test_rel);
        let test = data::read_manifest(&test_path)?.load(test_path.parent().unwrap_or(out))?;
        let maps: Vec<Vec<DifferenceMap>> = refs.iter().map(|r| Ok(load_maps(&out.join(&r.maps))?.1)).collect::<Result<_>>()?;
        let n = max_panels.map_or(test.len(), |m| m.min(test.len()));
        for (i, (s, gt)) in test.iter().take(n).enumerate() {
            let Some(gt) = gt else { continue };
            let row: Vec<&DifferenceMap> = maps.iter().filter_map(|m| m.get(i)).collect();
            let path = dir.join(format!("{dataset}_panel_{i:05}.png"));
            save(&render_panel(s, gt, &row, 2), &path)?;
            written.push(path);
        }
        let curves = refs.iter().map(|r| read_roc(&out.join(&r.roc))).collect::<Result<Vec<_>>>()?;
        let path = dir.join(format!("{dataset}_roc.png"));
        save(&render_roc(&curves, 480), &path)?;
        written.push(path);
        let legend: BTreeMap<&str, String> = refs
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let [cr, cg, cb] = PALETTE[k % PALETTE.len()];
                (r.detector.as_str(), format!("#{cr:02x}{cg:02x}{cb:02x}"))
            })
            .collect();
        fs::write(dir.join(format!("{dataset}_roc.json")), serde_json::to_vec_pretty(&legend)?)?;
    }
    Ok(written)
}
