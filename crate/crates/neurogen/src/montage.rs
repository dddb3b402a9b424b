//! Montage files: UTF-8 lines `name,x,y` with coordinates in the unit disk
//! (x to the right ear, y to the nose). An optional `name,x,y` header line is skipped.

use std::fs;
use std::path::Path;

use neurogen_core::topo::Montage;

use crate::error::{Error, Result};

const EEG_63: &str = include_str!("../montages/eeg-63.csv");
const MEG_271: &str = include_str!("../montages/meg-271.csv");

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 2] = ["eeg-63", "meg-271"];

pub fn parse_montage(text: &str, origin: &Path) -> Result<Montage> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let (mut names, mut coords) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(origin, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::format(origin, format!("line {}: expected `name,x,y`, got {} fields", i + 1, rec.len())));
        }
        if i == 0 && &rec[0] == "name" && &rec[1] == "x" {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(origin, format!("line {}: `{s}` is not a number", i + 1)));
        names.push(rec[0].to_string());
        coords.push((num(&rec[1])?, num(&rec[2])?));
    }
    Montage::new(names, coords).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_montage(path: impl AsRef<Path>) -> Result<Montage> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_montage(&text, path)
}

/// One of the montages shipped with the crate.
pub fn builtin(name: &str) -> Result<Montage> {
    let text = match name {
        "eeg-63" => EEG_63,
        "meg-271" => MEG_271,
        other => return Err(Error::Config(format!("unknown built-in montage `{other}` (expected one of {})", BUILTINS.join(", ")))),
    };
    parse_montage(text, Path::new(name))
}

/// A path, or `builtin:<name>` for a shipped montage.
pub fn load_montage(spec: &str) -> Result<Montage> {
    match spec.strip_prefix("builtin:") {
        Some(name) => builtin(name),
        None => read_montage(spec),
    }
}

pub fn write_montage(path: impl AsRef<Path>, montage: &Montage) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (n, (x, y)) in montage.names.iter().zip(&montage.coords) {
        out.push_str(&format!("{n},{x:.4},{y:.4}\n"));
    }
    fs::write(path, out).map_err(Error::io(path))
}

/// Sunflower layout of `names` inside radius 0.95; distinct positions for any count.
pub fn spread_montage(names: Vec<String>) -> Result<Montage> {
    let n = names.len();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let coords = (0..n)
        .map(|i| {
            let r = 0.95 * ((i as f64 + 0.5) / n as f64).sqrt();
            let a = i as f64 * golden + std::f64::consts::FRAC_PI_2;
            ((r * a.cos() * 1e4).round() / 1e4, (r * a.sin() * 1e4).round() / 1e4)
        })
        .collect();
    Ok(Montage::new(names, coords)?)
}
