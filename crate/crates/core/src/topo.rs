//! Scalp topographies: window averaging, inverse-distance interpolation onto a
//! disk grid, and the train / test / generated / difference comparison rows.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Default interpolation grid resolution.
pub const GRID_RES: usize = 64;
const IDW_POWER: i32 = 2;

/// Channel names with planar positions in the unit disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    pub names: Vec<String>,
    pub coords: Vec<(f64, f64)>,
}

impl Montage {
    pub fn new(names: Vec<String>, coords: Vec<(f64, f64)>) -> Result<Self> {
        if names.len() != coords.len() {
            bail!(Montage, "{} names but {} coordinates", names.len(), coords.len());
        }
        for (n, &(x, y)) in names.iter().zip(&coords) {
            if !(x.is_finite() && y.is_finite() && libm::fabs(x) <= 1.0 && libm::fabs(y) <= 1.0) {
                bail!(Montage, "channel `{n}` at ({x}, {y}) lies outside [-1, 1]²");
            }
        }
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                if names[i] == names[j] {
                    bail!(Montage, "duplicate channel name `{}`", names[i]);
                }
                if coords[i] == coords[j] {
                    bail!(Montage, "channels `{}` and `{}` share coordinates {:?}", names[i], names[j], coords[i]);
                }
            }
        }
        Ok(Self { names, coords })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Checks that the montage lists exactly `channel_names`, in order.
    pub fn expect_channels(&self, channel_names: &[String]) -> Result<()> {
        if self.names != channel_names {
            let first = self.names.iter().zip(channel_names).position(|(a, b)| a != b);
            bail!(
                Montage,
                "montage has {} channels, data has {}{}",
                self.names.len(),
                channel_names.len(),
                first.map(|i| alloc::format!("; first mismatch at index {i}")).unwrap_or_default()
            );
        }
        Ok(())
    }

    /// Same montage with channels reordered by `perm` (new index i takes old `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(perm.iter().map(|&i| self.names[i].clone()).collect(), perm.iter().map(|&i| self.coords[i]).collect())
    }
}

/// Per-channel means over consecutive windows of ⌊window_ms·rate/1000⌋ samples;
/// a trailing partial window is dropped.
pub fn window_average(signal: &Tensor, window_ms: f64, rate_hz: f64) -> Result<Vec<Vec<f64>>> {
    let s = signal.shape();
    if s.len() != 2 {
        bail!(Shape, "expected channels × time, got {:?}", s);
    }
    let len = libm::floor(window_ms * rate_hz / 1000.0 + 1e-9);
    if !(len >= 1.0) {
        bail!(Config, "a {window_ms} ms window at {rate_hz} Hz holds no samples");
    }
    let len = len as usize;
    let (nc, nt) = (s[0], s[1]);
    if len > nt {
        bail!(Config, "window of {len} samples is longer than the {nt}-sample epoch");
    }
    Ok((0..nt / len)
        .map(|w| {
            (0..nc)
                .map(|c| {
                    let row = &signal.data()[c * nt + w * len..c * nt + (w + 1) * len];
                    row.iter().sum::<f64>() / len as f64
                })
                .collect()
        })
        .collect())
}

/// Inverse-distance-weighted value at `(x, y)`; a point on a channel takes its value.
pub fn idw_at(values: &[f64], montage: &Montage, x: f64, y: f64) -> Result<f64> {
    if values.len() != montage.len() || values.is_empty() {
        bail!(Shape, "{} values for a {}-channel montage", values.len(), montage.len());
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&v, &(cx, cy)) in values.iter().zip(&montage.coords) {
        let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        if d2 == 0.0 {
            return Ok(v);
        }
        let w = 1.0 / libm::pow(d2, IDW_POWER as f64 / 2.0);
        num += w * v;
        den += w;
    }
    Ok(num / den)
}

/// A square field over [-1, 1]²; points outside the unit disk are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub res: usize,
    pub values: Vec<Option<f64>>,
}

impl Grid {
    /// Coordinate of grid index `i` along either axis.
    pub fn coord(res: usize, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (res - 1) as f64
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.res + col]
    }

    pub fn in_disk(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    /// (min, max) over in-disk points.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.in_disk().fold(None, |acc, v| Some(acc.map_or((v, v), |(a, b): (f64, f64)| (a.min(v), b.max(v)))))
    }
}

/// Interpolates channel values onto a `grid_res × grid_res` grid. Row 0 is the
/// top of the head (y = +1), column 0 the left (x = −1).
pub fn interpolate_scalp(values: &[f64], montage: &Montage, grid_res: usize) -> Result<Grid> {
    if montage.len() < 3 {
        bail!(Montage, "interpolation needs at least 3 channels, montage has {}", montage.len());
    }
    if grid_res < 2 {
        bail!(Config, "grid resolution must be at least 2");
    }
    let mut out = Vec::with_capacity(grid_res * grid_res);
    for r in 0..grid_res {
        let y = -Grid::coord(grid_res, r);
        for c in 0..grid_res {
            let x = Grid::coord(grid_res, c);
            out.push(if x * x + y * y <= 1.0 { Some(idw_at(values, montage, x, y)?) } else { None });
        }
    }
    Ok(Grid { res: grid_res, values: out })
}

/// One time window of a row.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub start_ms: f64,
    pub end_ms: f64,
    pub channel_values: Vec<f64>,
    pub grid: Grid,
}

/// Frames of one signal with a colour scale symmetric about zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoRow {
    pub label: String,
    pub frames: Vec<Frame>,
    /// Half-width of the shared scale: max |value| over all frames.
    pub scale: f64,
}

/// Window timing and grid choices for a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopoParams {
    pub window_ms: f64,
    pub rate_hz: f64,
    pub grid_res: usize,
    /// Time of sample 0 relative to stimulus onset.
    pub onset_ms: f64,
}

impl Default for TopoParams {
    fn default() -> Self {
        Self { window_ms: 100.0, rate_hz: 250.0, grid_res: GRID_RES, onset_ms: 0.0 }
    }
}

pub fn topo_series(label: &str, signal: &Tensor, montage: &Montage, p: &TopoParams) -> Result<TopoRow> {
    if signal.shape().len() != 2 || signal.shape()[0] != montage.len() {
        bail!(Data, "signal {:?} does not match a {}-channel montage", signal.shape(), montage.len());
    }
    let windows = window_average(signal, p.window_ms, p.rate_hz)?;
    let step_ms = libm::floor(p.window_ms * p.rate_hz / 1000.0 + 1e-9) * 1000.0 / p.rate_hz;
    let mut scale: f64 = 0.0;
    let frames = windows
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let grid = interpolate_scalp(&v, montage, p.grid_res)?;
            scale = grid.in_disk().chain(v.iter().copied()).fold(scale, |s, x| s.max(libm::fabs(x)));
            let start_ms = p.onset_ms + i as f64 * step_ms;
            Ok(Frame { start_ms, end_ms: start_ms + step_ms, channel_values: v, grid })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TopoRow { label: String::from(label), frames, scale })
}

/// Elementwise `a − b`.
pub fn difference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.sub(b)
}

/// Train, test, generated and difference (train − test) rows.
pub fn comparison(train: &Tensor, test: &Tensor, generated: &Tensor, montage: &Montage, p: &TopoParams) -> Result<[TopoRow; 4]> {
    if train.shape() != test.shape() || train.shape() != generated.shape() {
        bail!(Data, "train {:?}, test {:?} and generated {:?} shapes differ", train.shape(), test.shape(), generated.shape());
    }
    let diff = difference(train, test)?;
    Ok([
        topo_series("train", train, montage, p)?,
        topo_series("test", test, montage, p)?,
        topo_series("generated", generated, montage, p)?,
        topo_series("difference", &diff, montage, p)?,
    ])
}
