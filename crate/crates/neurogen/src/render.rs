//! PNG rendering of topography rows with a JSON sidecar describing the scales.
//!
//! Each row is drawn left to right, one disk per time window, followed by a
//! vertical colour bar. Colours run from blue (−scale) through white (0) to
//! red (+scale), where `scale` is the row's largest absolute value.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use neurogen_core::topo::TopoRow;
use serde::Serialize;

use crate::error::{Error, Result};

const ZOOM: u32 = 2;
const PAD: u32 = 8;
const BAR: u32 = 14;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([20, 20, 20]);

const ANCHORS: [[f64; 3]; 5] = [[5.0, 48.0, 97.0], [67.0, 147.0, 195.0], [247.0, 247.0, 247.0], [214.0, 96.0, 77.0], [103.0, 0.0, 31.0]];

/// Diverging colour for `v` in [−1, 1]; values outside are clamped.
pub fn diverging(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let pos = (v + 1.0) * 2.0;
    let i = (pos.floor() as usize).min(3);
    let f = pos - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    Rgb(std::array::from_fn(|k| (a[k] + f * (b[k] - a[k])).round() as u8))
}

fn scaled(v: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        v / scale
    } else {
        0.0
    }
}

/// Rasterizes rows that share a grid resolution and frame count.
pub fn render_rows(rows: &[TopoRow]) -> Result<RgbImage> {
    let Some(first) = rows.first() else { return Err(Error::Data("nothing to render".into())) };
    let frames = first.frames.len();
    let res = first.frames.first().map(|f| f.grid.res).ok_or_else(|| Error::Data("rows have no frames".into()))? as u32;
    if rows.iter().any(|r| r.frames.len() != frames || r.frames.iter().any(|f| f.grid.res as u32 != res)) {
        return Err(Error::Data("rows differ in frame count or grid resolution".into()));
    }
    let tile = res * ZOOM;
    let width = PAD + frames as u32 * (tile + PAD) + BAR + PAD;
    let height = PAD + rows.len() as u32 * (tile + PAD);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let radius = tile as f64 / 2.0;
    for (ri, row) in rows.iter().enumerate() {
        let y0 = PAD + ri as u32 * (tile + PAD);
        for (fi, frame) in row.frames.iter().enumerate() {
            let x0 = PAD + fi as u32 * (tile + PAD);
            for py in 0..tile {
                for px in 0..tile {
                    let (dx, dy) = (px as f64 + 0.5 - radius, py as f64 + 0.5 - radius);
                    let d = (dx * dx + dy * dy).sqrt();
                    let colour = if (d - (radius - 1.0)).abs() < 1.0 {
                        INK
                    } else if let Some(v) = frame.grid.get((py / ZOOM) as usize, (px / ZOOM) as usize) {
                        if d < radius { diverging(scaled(v, row.scale)) } else { WHITE }
                    } else {
                        WHITE
                    };
                    img.put_pixel(x0 + px, y0 + py, colour);
                }
            }
            // nose mark at the top of the head
            for k in 0..3 {
                img.put_pixel(x0 + tile / 2, y0 + k, INK);
            }
        }
        let bx = PAD + frames as u32 * (tile + PAD);
        for py in 0..tile {
            let v = 1.0 - 2.0 * (py as f64 + 0.5) / tile as f64;
            for px in 0..BAR {
                img.put_pixel(bx + px, y0 + py, diverging(v));
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameInfo {
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowInfo {
    pub label: String,
    /// The colour bar spans [−scale, +scale].
    pub scale: f64,
    pub frames: Vec<FrameInfo>,
}

/// Sidecar written next to each PNG.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopoSidecar {
    pub dataset_id: String,
    pub subject: String,
    pub units: Option<String>,
    pub window_ms: f64,
    pub sampling_rate_hz: f64,
    pub grid_res: usize,
    pub rows: Vec<RowInfo>,
}

impl TopoSidecar {
    pub fn rows_of(rows: &[TopoRow]) -> Vec<RowInfo> {
        rows.iter()
            .map(|r| RowInfo {
                label: r.label.clone(),
                scale: r.scale,
                frames: r.frames.iter().map(|f| FrameInfo { start_ms: f.start_ms, end_ms: f.end_ms }).collect(),
            })
            .collect()
    }
}

/// Writes `<stem>.png` and `<stem>.json`.
pub fn write_topography(dir: &Path, stem: &str, rows: &[TopoRow], sidecar: &TopoSidecar) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let png = dir.join(format!("{stem}.png"));
    render_rows(rows)?.save(&png).map_err(|e| Error::Data(format!("writing {}: {e}", png.display())))?;
    let json = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(&json, text).map_err(Error::io(&json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurogen_core::topo::{comparison, Montage, TopoParams};
    use neurogen_core::Tensor;

    #[test]
    fn colour_map_endpoints() {
        assert_eq!(diverging(0.0), Rgb([247, 247, 247]));
        assert_eq!(diverging(-1.0), Rgb([5, 48, 97]));
        assert_eq!(diverging(1.0), Rgb([103, 0, 31]));
        assert_eq!(diverging(7.0), diverging(1.0));
    }

    #[test]
    fn renders_four_rows() {
        let m = Montage::new(vec!["a".into(), "b".into(), "c".into()], vec![(-0.5, 0.0), (0.5, 0.0), (0.0, 0.5)]).unwrap();
        let x = Tensor::new(&[3, 20], (0..60).map(|i| (i as f64).sin()).collect()).unwrap();
        let p = TopoParams { window_ms: 40.0, rate_hz: 100.0, grid_res: 16, onset_ms: 0.0 };
        let rows = comparison(&x, &x, &x, &m, &p).unwrap();
        let img = render_rows(&rows).unwrap();
        assert_eq!(img.height(), PAD + 4 * (32 + PAD));
        assert_eq!(img.width(), PAD + 5 * (32 + PAD) + BAR + PAD);
        // the difference row is zero, so its disk centre is the neutral colour
        let y = PAD + 3 * (32 + PAD) + 16;
        assert_eq!(*img.get_pixel(PAD + 16, y), diverging(0.0));
    }
}
