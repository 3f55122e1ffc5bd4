//! Dense f64 tensors and the forward primitives of the one-conv classifier.
//!
//! Everything here is row-major with explicit shapes; nothing broadcasts.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected shape compatible with {expected:?}, got {actual:?}")]
    Mismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: {reason} (shape {shape:?})")]
    Invalid {
        op: &'static str,
        reason: &'static str,
        shape: Vec<usize>,
    },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        if shape.contains(&0) {
            return Err(ShapeError::Invalid {
                op: "Tensor::new",
                reason: "dimensions must be positive",
                shape,
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(ShapeError::DataLength { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
///
/// `input` is `[C, H, W]`, `kernels` is `[F, C, kh, kw]` with odd kernel sides,
/// `bias` is `[F]`. Output is `[F, H, W]`.
pub fn conv2d_same(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, ShapeError> {
    let (c, h, w) = match input.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(ShapeError::Invalid {
                op: "conv2d_same",
                reason: "input must be rank 3 [C, H, W]",
                shape: s.to_vec(),
            })
        }
    };
    let (f, kc, kh, kw) = match kernels.shape() {
        &[f, kc, kh, kw] => (f, kc, kh, kw),
        s => {
            return Err(ShapeError::Invalid {
                op: "conv2d_same",
                reason: "kernels must be rank 4 [F, C, kh, kw]",
                shape: s.to_vec(),
            })
        }
    };
    if kc != c {
        return Err(ShapeError::Mismatch {
            op: "conv2d_same",
            expected: input.shape().to_vec(),
            actual: kernels.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 || kh > h || kw > w {
        return Err(ShapeError::Invalid {
            op: "conv2d_same",
            reason: "kernel sides must be odd and no larger than the input",
            shape: kernels.shape().to_vec(),
        });
    }
    if bias.shape() != [f] {
        return Err(ShapeError::Mismatch {
            op: "conv2d_same",
            expected: vec![f],
            actual: bias.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; f * h * w];
    conv2d_same_raw(input.data(), c, h, w, kernels.data(), f, kh, kw, bias.data(), &mut out);
    Tensor::new(vec![f, h, w], out)
}

/// Unchecked kernel shared by the model's hot paths. Shapes are trusted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_same_raw(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    filters: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    for fi in 0..filters {
        let plane = &mut out[fi * h * w..(fi + 1) * h * w];
        for (r, row) in plane.chunks_exact_mut(w).enumerate() {
            for (col, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ci in 0..channels {
                    let img = &input[ci * h * w..(ci + 1) * h * w];
                    let ker = &kernels[(fi * channels + ci) * kh * kw..(fi * channels + ci + 1) * kh * kw];
                    for dr in 0..kh {
                        let rr = r as isize + dr as isize - ph;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        let img_row = &img[rr as usize * w..(rr as usize + 1) * w];
                        let ker_row = &ker[dr * kw..(dr + 1) * kw];
                        for (dc, &k) in ker_row.iter().enumerate() {
                            let cc = col as isize + dc as isize - pw;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            acc += k * img_row[cc as usize];
                        }
                    }
                }
                *o = acc + bias[fi];
            }
        }
    }
}

/// `output[k] = sum_d weights[k, d] * input[d] + bias[k]`.
pub fn dense_affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, ShapeError> {
    let d = input.len();
    let k = match weights.shape() {
        &[k, wd] if wd == d => k,
        s => {
            return Err(ShapeError::Mismatch {
                op: "dense_affine",
                expected: vec![bias.len(), d],
                actual: s.to_vec(),
            })
        }
    };
    if bias.shape() != [k] {
        return Err(ShapeError::Mismatch {
            op: "dense_affine",
            expected: vec![k],
            actual: bias.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; k];
    dense_affine_raw(input.data(), weights.data(), bias.data(), &mut out);
    Ok(Tensor::from_vec(out))
}

pub(crate) fn dense_affine_raw(input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let d = input.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &weights[k * d..(k + 1) * d];
        let mut acc = 0.0;
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        *o = acc + bias[k];
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &Tensor) -> Result<Tensor, ShapeError> {
    if logits.shape().len() != 1 {
        return Err(ShapeError::Invalid {
            op: "softmax",
            reason: "logits must be rank 1",
            shape: logits.shape().to_vec(),
        });
    }
    Ok(Tensor::from_vec(softmax_slice(logits.data())))
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective was not finite ({value}) when perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },
}

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
///
/// This is the oracle every analytic gradient in the crate is checked against.
pub fn finite_difference_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(GradCheckError::BadStep(eps));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point);
        if !plus.is_finite() {
            return Err(GradCheckError::NonFinite {
                coordinate: i,
                value: plus,
            });
        }
        point[i] = orig - eps;
        let minus = f(&point);
        if !minus.is_finite() {
            return Err(GradCheckError::NonFinite {
                coordinate: i,
                value: minus,
            });
        }
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error used by the gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(ShapeError::DataLength { .. })
        ));
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let input = Tensor::zeros(&[1, 5, 5]);
        let kernels = t(&[2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.3 - 2.0).collect());
        let out = conv2d_same(&input, &kernels, &Tensor::from_vec(vec![0.5, -1.5])).unwrap();
        assert_eq!(out.shape(), &[2, 5, 5]);
        assert!(out.data()[..25].iter().all(|&v| v == 0.5));
        assert!(out.data()[25..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_identity_kernel() {
        let data: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let input = t(&[1, 5, 6], data.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let out = conv2d_same(&input, &t(&[1, 1, 3, 3], k), &Tensor::from_vec(vec![0.0])).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn conv_constant_input_ones_kernel() {
        let v = 0.7;
        let input = t(&[1, 4, 4], vec![v; 16]);
        let out = conv2d_same(&input, &t(&[1, 1, 3, 3], vec![1.0; 9]), &Tensor::from_vec(vec![0.0])).unwrap();
        let at = |r: usize, c: usize| out.data()[r * 4 + c];
        assert!((at(1, 1) - 9.0 * v).abs() < 1e-12);
        assert!((at(2, 2) - 9.0 * v).abs() < 1e-12);
        for (r, c) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            assert!((at(r, c) - 4.0 * v).abs() < 1e-12);
        }
        assert!((at(0, 1) - 6.0 * v).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let err = conv2d_same(
            &Tensor::zeros(&[2, 4, 4]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
        )
        .unwrap_err();
        match err {
            ShapeError::Mismatch { expected, actual, .. } => {
                assert_eq!(expected, vec![2, 4, 4]);
                assert_eq!(actual, vec![1, 1, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        assert!(conv2d_same(
            &Tensor::zeros(&[1, 4, 4]),
            &Tensor::zeros(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1])
        )
        .is_err());
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let out = dense_affine(
            &x,
            &t(&[2, 2], vec![1.0, 1.0, 0.0, 3.0]),
            &Tensor::from_vec(vec![0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);

        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = Tensor::from_vec(vec![0.25, -4.0, 9.5]);
        assert_eq!(dense_affine(&x, &eye, &Tensor::zeros(&[3])).unwrap().data(), x.data());

        let b = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        assert_eq!(dense_affine(&Tensor::zeros(&[3]), &eye, &b).unwrap().data(), b.data());
    }

    #[test]
    fn dense_rejects_mismatch() {
        let err = dense_affine(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(ShapeError::Mismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::from_vec(vec![0.3; 10])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let p = softmax(&Tensor::from_vec(vec![0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
        let big = softmax(&Tensor::from_vec(vec![1000.0, 1000.0])).unwrap();
        assert!(big.is_finite());
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let g = finite_difference_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 4.0).abs() < 1e-8);
        let g = finite_difference_grad(|_| 3.5, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn fd_reports_coordinate() {
        let err = finite_difference_grad(|x| if x[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3).unwrap_err();
        assert_eq!(
            err.to_string(),
            GradCheckError::NonFinite {
                coordinate: 1,
                value: f64::NAN
            }
            .to_string()
        );
        assert!(finite_difference_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn conv_is_linear(
            x in prop::collection::vec(-1.0f64..1.0, 2 * 36),
            y in prop::collection::vec(-1.0f64..1.0, 2 * 36),
            k in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let kern = t(&[3, 2, 3, 3], k);
            let zero = Tensor::zeros(&[3]);
            let xt = t(&[2, 6, 6], x.clone());
            let yt = t(&[2, 6, 6], y.clone());
            let mix = t(&[2, 6, 6], x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect());
            let lhs = conv2d_same(&mix, &kern, &zero).unwrap();
            let cx = conv2d_same(&xt, &kern, &zero).unwrap();
            let cy = conv2d_same(&yt, &kern, &zero).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }

        #[test]
        fn softmax_is_distribution_and_shift_invariant(
            l in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&Tensor::from_vec(l.clone())).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            let q = softmax(&Tensor::from_vec(l.iter().map(|v| v + c).collect())).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
