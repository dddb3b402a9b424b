//! Signal preprocessing shared by training and evaluation: per-channel
//! z-scoring, repetition averaging and seeded batching.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{bail, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Per-channel mean and sample standard deviation (divisor n−1).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_label(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| alloc::format!("#{c}"))
}

impl NormalizationStats {
    /// Statistics over every trial and time point of each channel.
    /// `names` labels channels in error messages and may be empty.
    pub fn fit<'a, I>(trials: I, names: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut shift: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut shape: Option<[usize; 2]> = None;
        for x in trials {
            let s = x.shape();
            if s.len() != 2 {
                bail!(Shape, "trial must be channels × time, got {:?}", s);
            }
            let s = [s[0], s[1]];
            match shape {
                None => {
                    shape = Some(s);
                    // shifted sums keep the variance accurate for large offsets
                    shift = (0..s[0]).map(|c| x.data()[c * s[1]]).collect();
                    sum = alloc::vec![0.0; s[0]];
                    sq = alloc::vec![0.0; s[0]];
                }
                Some(prev) if prev != s => bail!(Shape, "trial shape {:?} differs from {:?}", s, prev),
                _ => {}
            }
            for c in 0..s[0] {
                for &v in &x.data()[c * s[1]..(c + 1) * s[1]] {
                    let d = v - shift[c];
                    sum[c] += d;
                    sq[c] += d * d;
                }
            }
            count += s[1];
        }
        let Some(_) = shape else { bail!(Data, "cannot compute statistics from zero trials") };
        if count < 2 {
            bail!(Data, "need at least two samples per channel for a sample standard deviation");
        }
        let n = count as f64;
        let mut mean = Vec::with_capacity(sum.len());
        let mut std = Vec::with_capacity(sum.len());
        for c in 0..sum.len() {
            let m = sum[c] / n;
            let var = ((sq[c] - n * m * m) / (n - 1.0)).max(0.0);
            let sd = libm::sqrt(var);
            if !(sd > 1e-12 * (1.0 + libm::fabs(m + shift[c]))) {
                bail!(Data, "channel {} has zero standard deviation over the training split", channel_label(names, c));
            }
            mean.push(m + shift[c]);
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 2 || s[0] != self.channels() {
            bail!(Shape, "expected {} channels × time, got {:?}", self.channels(), s);
        }
        Ok(s[1])
    }

    /// (x − mean) / std per channel.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / w;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(out)
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / w;
            *v = *v * self.std[c] + self.mean[c];
        }
        Ok(out)
    }
}

fn mean_of(trials: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = trials.first() else { bail!(Data, "cannot average an empty group") };
    let mut acc = Tensor::zeros(first.shape());
    for t in trials {
        first.expect_same_shape(t)?;
        acc.add_assign(t);
    }
    Ok(acc.scale(1.0 / trials.len() as f64))
}

/// Repetition averages keyed by image id, plus the grand average of all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionAverages {
    pub by_image: BTreeMap<String, Tensor>,
    pub grand: Tensor,
}

/// Arithmetic mean over repetitions per image id.
pub fn average_repetitions<'a, I>(trials: I) -> Result<RepetitionAverages>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut groups: BTreeMap<String, Vec<&Tensor>> = BTreeMap::new();
    let mut all = Vec::new();
    for (id, t) in trials {
        groups.entry(String::from(id)).or_default().push(t);
        all.push(t);
    }
    let grand = mean_of(&all)?;
    let by_image = groups.into_iter().map(|(k, v)| Ok((k, mean_of(&v)?))).collect::<Result<_>>()?;
    Ok(RepetitionAverages { by_image, grand })
}

/// Seeded shuffle of `0..n` cut into batches; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        bail!(Config, "batch_size must be at least 1");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Batching, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_normalization() {
        let x = t2(&[&[1.0, 3.0]]);
        let s = NormalizationStats::fit([&x], &[]).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (2.0, libm::sqrt(2.0)));
        // sample std of {1,3} is √2; spread over two trials of one sample each gives the same
        let a = t2(&[&[1.0]]);
        let b = t2(&[&[3.0]]);
        let s = NormalizationStats::fit([&a, &b], &[]).unwrap();
        assert_eq!(s.normalize(&a).unwrap().data(), &[-1.0 / libm::sqrt(2.0)]);
    }

    #[test]
    fn normalized_training_split_is_standard() {
        let mut r = rng::stream(1, Stream::Synthetic, 0);
        let trials: Vec<Tensor> = (0..6).map(|_| rng::normal_tensor(&[3, 20], &mut r).map(|v| 5.0 + 2.0 * v)).collect();
        let s = NormalizationStats::fit(&trials, &[]).unwrap();
        let normed: Vec<Tensor> = trials.iter().map(|t| s.normalize(t).unwrap()).collect();
        let again = NormalizationStats::fit(&normed, &[]).unwrap();
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-6 && (again.std[c] - 1.0).abs() < 1e-6);
        }
        for (n, t) in normed.iter().zip(&trials) {
            let back = s.denormalize(n).unwrap();
            assert!(back.sub(t).unwrap().max_abs() < 1e-12);
            assert!(again.normalize(n).unwrap().sub(n).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn zero_std_channel_is_named() {
        let x = t2(&[&[1.0, 2.0], &[4.0, 4.0]]);
        let names = vec![String::from("Fp1"), String::from("Cz")];
        let err = NormalizationStats::fit([&x], &names).unwrap_err();
        assert!(alloc::format!("{err}").contains("Cz"));
    }

    #[test]
    fn repetition_averages() {
        let ones = Tensor::full(&[2, 3], 1.0);
        let threes = Tensor::full(&[2, 3], 3.0);
        let avg = average_repetitions([("a", &ones), ("a", &threes), ("b", &ones)]).unwrap();
        assert_eq!(avg.by_image["a"], Tensor::full(&[2, 3], 2.0));
        assert_eq!(avg.by_image["b"], ones);
        assert!((avg.grand.data()[0] - 5.0 / 3.0).abs() < 1e-15);
        assert!(average_repetitions(core::iter::empty()).is_err());
    }

    #[test]
    fn batches_cover_each_trial_once() {
        let b = make_batches(10, 4, 7, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 4, 7, 0).unwrap());
        assert_ne!(b, make_batches(10, 4, 7, 1).unwrap());
    }
}
