//! Signal similarity metrics and the report aggregates built from them.

use alloc::string::String;
use alloc::vec::Vec;

use crate::conditioning::FusionMode;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Pearson correlation of the flattened tensors.
pub fn pcc(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        bail!(Metric, "pcc undefined: {} input has zero variance", if saa == 0.0 { "first" } else { "second" });
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor n−1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    libm::sqrt(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Half-up rounding to `digits` decimals. Values within 1e-9 (relative) of a
/// tie are treated as the tie, so binary representation error in e.g. 0.7625
/// does not flip the decimal result.
pub fn round_half_up(x: f64, digits: i32) -> f64 {
    let p = libm::pow(10.0, digits as f64);
    let s = libm::fabs(x) * p;
    let r = libm::floor(s + 0.5 + 1e-9 * s.max(1.0));
    libm::copysign(r / p, x)
}

/// Formats at 3 decimals with half-up rounding.
pub fn fmt3(x: f64) -> String {
    alloc::format!("{:.3}", round_half_up(x, 3))
}

/// Per-subject MSE and PCC.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub subjects: Vec<String>,
    pub mse: Vec<f64>,
    pub pcc: Vec<f64>,
}

impl MetricReport {
    pub fn push(&mut self, subject: impl Into<String>, mse: f64, pcc: f64) {
        self.subjects.push(subject.into());
        self.mse.push(mse);
        self.pcc.push(pcc);
    }

    pub fn mse_average(&self) -> f64 {
        mean(&self.mse)
    }

    pub fn pcc_average(&self) -> f64 {
        mean(&self.pcc)
    }

    pub fn is_finite(&self) -> bool {
        self.mse.iter().chain(&self.pcc).all(|v| v.is_finite())
    }

    /// `metric,<subjects...>,Avg` with one row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for s in &self.subjects {
            out.push(',');
            out.push_str(s);
        }
        out.push_str(",Avg\n");
        for (name, vals, avg) in [("MSE", &self.mse, self.mse_average()), ("PCC", &self.pcc, self.pcc_average())] {
            out.push_str(name);
            for v in vals {
                out.push(',');
                out.push_str(&fmt3(*v));
            }
            out.push(',');
            out.push_str(&fmt3(avg));
            out.push('\n');
        }
        out
    }
}

/// Mean of the per-image metrics between generated and target signals.
pub fn evaluate_pairs<'a, I>(pairs: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
{
    let (mut m, mut p, mut n) = (0.0, 0.0, 0usize);
    for (g, t) in pairs {
        m += mse(g, t)?;
        p += pcc(g, t)?;
        n += 1;
    }
    if n == 0 {
        bail!(Data, "no generated/target pairs to evaluate");
    }
    Ok((m / n as f64, p / n as f64))
}

/// Model trained on a source subject evaluated on every other subject.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrossSubjectMatrix {
    pub subjects: Vec<String>,
    /// `values[source][target]`; the diagonal is `None`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CrossSubjectMatrix {
    pub fn new(subjects: Vec<String>) -> Self {
        let n = subjects.len();
        Self { subjects, values: alloc::vec![alloc::vec![None; n]; n] }
    }

    /// Builds from rows that omit the diagonal (the usual table layout).
    pub fn from_off_diagonal(subjects: Vec<String>, rows: &[&[f64]]) -> Result<Self> {
        let n = subjects.len();
        if rows.len() != n || rows.iter().any(|r| r.len() + 1 != n) {
            bail!(Shape, "expected {n} rows of {} off-diagonal values", n.saturating_sub(1));
        }
        let mut m = Self::new(subjects);
        for (s, row) in rows.iter().enumerate() {
            let mut it = row.iter();
            for t in 0..n {
                if t != s {
                    m.values[s][t] = it.next().copied();
                }
            }
        }
        Ok(m)
    }

    pub fn set(&mut self, source: usize, target: usize, v: f64) -> Result<()> {
        if source == target {
            bail!(Index, "diagonal entry ({source}, {target}) is not part of a cross-subject matrix");
        }
        self.values[source][target] = Some(v);
        Ok(())
    }

    fn row(&self, s: usize) -> Vec<f64> {
        self.values[s].iter().flatten().copied().collect()
    }

    fn col(&self, t: usize) -> Vec<f64> {
        self.values.iter().filter_map(|r| r[t]).collect()
    }

    /// (mean, sample std) over targets for one source.
    pub fn source_stats(&self, s: usize) -> (f64, f64) {
        let r = self.row(s);
        (mean(&r), sample_std(&r))
    }

    /// (mean, sample std) over sources for one target.
    pub fn target_stats(&self, t: usize) -> (f64, f64) {
        let c = self.col(t);
        (mean(&c), sample_std(&c))
    }

    pub fn grand_mean(&self) -> f64 {
        let all: Vec<f64> = self.values.iter().flatten().flatten().copied().collect();
        mean(&all)
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().enumerate().all(|(s, r)| r.iter().enumerate().all(|(t, v)| (s == t) == v.is_none()))
    }

    /// Table layout: a row per source with mean and std columns, then target mean/std rows.
    pub fn to_csv(&self) -> String {
        let n = self.subjects.len();
        let mut out = String::from("train\\test");
        for s in &self.subjects {
            out.push(',');
            out.push_str(s);
        }
        out.push_str(",Mean,Std\n");
        for s in 0..n {
            out.push_str(&self.subjects[s]);
            for v in &self.values[s] {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&fmt3(*v));
                } else {
                    out.push('-');
                }
            }
            let (m, sd) = self.source_stats(s);
            out.push_str(&alloc::format!(",{},{}\n", fmt3(m), fmt3(sd)));
        }
        for (label, pick) in [("Target Mean", 0usize), ("Target Std", 1)] {
            out.push_str(label);
            for t in 0..n {
                let st = self.target_stats(t);
                out.push(',');
                out.push_str(&fmt3(if pick == 0 { st.0 } else { st.1 }));
            }
            if pick == 0 {
                out.push_str(&alloc::format!(",{},\n", fmt3(self.grand_mean())));
            } else {
                out.push_str(",,\n");
            }
        }
        out
    }
}

/// Within-subject reports per fusion mode.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StrategyTable {
    pub rows: Vec<(FusionMode, MetricReport)>,
}

impl StrategyTable {
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|(_, r)| r.is_finite())
    }

    /// One line per (mode, metric): per-subject values then the average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric");
        if let Some((_, r)) = self.rows.first() {
            for s in &r.subjects {
                out.push(',');
                out.push_str(s);
            }
        }
        out.push_str(",Avg\n");
        for (mode, r) in &self.rows {
            for (name, vals, avg) in [("MSE", &r.mse, r.mse_average()), ("PCC", &r.pcc, r.pcc_average())] {
                out.push_str(&alloc::format!("{},{name}", mode.label()));
                for v in vals {
                    out.push(',');
                    out.push_str(&fmt3(*v));
                }
                out.push(',');
                out.push_str(&fmt3(avg));
                out.push('\n');
            }
        }
        out
    }
}
