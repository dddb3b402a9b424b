//! Plain tensor-in, tensor-out forms of the differentiable operations.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

use super::tape::Tape;

/// `y = x·W + b` for `x[N×d_in]`, `W[d_in×d_out]`, `b[d_out]`.
pub fn affine_map(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        bail!(Shape, "affine_map: input {:?} incompatible with weight {:?}", x.shape(), w.shape());
    }
    if b.len() != w.shape()[1] {
        bail!(Shape, "affine_map: bias {:?} incompatible with weight {:?}", b.shape(), w.shape());
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.affine(xv, wv, Some(bv))?;
    Ok(tape.value(y).clone())
}

/// Cross-correlation of `x[C_in×H×W]` with `kernel[C_out×C_in×k×k]`, no bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        bail!(Config, "conv2d stride must be at least 1");
    }
    let mut tape = Tape::new();
    let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(kernel.clone()));
    let y = tape.conv2d(xv, kv, None, stride, pad)?;
    Ok(tape.value(y).clone())
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if !m.is_finite() {
        bail!(Numeric, "softmax_rows needs finite input");
    }
    let mut tape = Tape::new();
    let v = tape.leaf(m.clone());
    let y = tape.softmax_rows(v)?;
    Ok(tape.value(y).clone())
}

/// Group count for a normalization over `channels`: 32, or the channel count below 32.
pub fn norm_groups(channels: usize) -> Result<usize> {
    if channels < 32 {
        return Ok(channels);
    }
    if channels % 32 != 0 {
        bail!(Config, "{channels} channels are not divisible into 32 normalization groups");
    }
    Ok(32)
}

#[cfg(test)]
mod tests {
    use alloc::string::ToString;
    use super::*;
    use alloc::vec;

    #[test]
    fn affine_examples() {
        let x = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let y = affine_map(&x, &eye, &Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = affine_map(&x, &eye, &Tensor::new(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let w = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, -1.0]]).unwrap();
        let y = affine_map(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[3.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn affine_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let err = affine_map(&x, &w, &Tensor::zeros(&[2])).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|v| v as f64 * 0.37 - 2.0).collect()).unwrap();
        let one = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &one, 1, 0).unwrap(), x);

        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let zeros = Tensor::zeros(&[2, 5, 5]);
        let k = Tensor::new(&[3, 2, 3, 3], (0..54).map(|v| v as f64).collect()).unwrap();
        assert!(conv2d(&zeros, &k, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_padding_and_stride() {
        // 3x3 all-ones kernel with pad 1 counts in-bounds neighbours.
        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&ones, &k, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let y = conv2d(&x, &k, 2, 1);
        // (4 + 2 - 3) / 2 is not integral
        assert!(matches!(y, Err(crate::Error::Shape(_))));
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&Tensor::from_rows(&[&[-123.4]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let y = softmax_rows(&Tensor::from_rows(&[&[0.0, libm::log(3.0)]]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let y = softmax_rows(&Tensor::from_rows(&[&[1000.0, 999.0, -1000.0]]).unwrap()).unwrap();
        assert!(y.is_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(8).unwrap(), 8);
        assert_eq!(norm_groups(128).unwrap(), 32);
        assert_eq!(norm_groups(768).unwrap(), 32);
        assert!(norm_groups(40).is_err());
    }
}
