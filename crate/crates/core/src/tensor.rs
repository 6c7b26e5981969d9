//! Dense matrices and the handful of differentiable primitives the scorers
//! are built from.
//!
//! Everything is `f64`. Exported operations check their outputs and fail
//! with [`Error::Numeric`] instead of handing back NaN or infinity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) {:?}", self.rows, self.cols, self.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "declared dims",
                format!("{rows}x{cols}"),
                "data length",
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "row 0",
                    cols,
                    "row",
                    format!("{i} of length {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero, and a 0-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::Numeric(format!(
                "{what} has non-finite entry {} at ({}, {})",
                self.data[pos],
                pos / self.cols.max(1),
                pos % self.cols.max(1)
            ))),
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "left",
                format!("{}x{}", self.rows, self.cols),
                "right",
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// `out = op(a) · op(b) + beta · out`, where `op` optionally transposes.
/// Shapes are the caller's responsibility; this panics on mismatch.
pub(crate) fn gemm(
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    out: &mut Matrix,
    beta: f64,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the pointers cover exactly the row-major buffers described by
    // the strides above, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// `input · weights + bias`, with `bias` broadcast over rows.
pub fn dense_forward(input: &Matrix, weights: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if input.cols != weights.rows {
        return Err(Error::shape(
            "input",
            format!("{}x{}", input.rows, input.cols),
            "weights",
            format!("{}x{}", weights.rows, weights.cols),
        ));
    }
    if bias.rows != 1 || bias.cols != weights.cols {
        return Err(Error::shape(
            "bias",
            format!("{}x{}", bias.rows, bias.cols),
            "weights",
            format!("{}x{}", weights.rows, weights.cols),
        ));
    }
    let mut out = Matrix::zeros(input.rows, weights.cols);
    for i in 0..out.rows {
        out.row_mut(i).copy_from_slice(&bias.data);
    }
    gemm(input, false, weights, false, &mut out, 1.0);
    out.check_finite("dense output")?;
    Ok(out)
}

/// `log Σ exp(z_i)`, shifted by the maximum.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Usage("empty logit vector".into()));
    }
    match logits.iter().position(|z| !z.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!("logit {i} is {}", logits[i]))),
    }
}

/// Temperature softmax, `exp((z - max z)/τ) / Σ exp((z - max z)/τ)`.
pub fn stable_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_logits(logits)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, params: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = params.clone();
    let mut grad = Matrix::zeros(params.rows, params.cols);
    for i in 0..params.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = f(&probe);
        probe.data[i] = orig - step;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite when perturbing coordinate ({}, {})",
                i / params.cols.max(1),
                i % params.cols.max(1)
            )));
        }
        grad.data[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Nonlinearity applied between dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    /// `1.7159 · tanh(2x/3)`.
    ScaledTanh,
}

const SCALED_TANH_A: f64 = 1.7159;
const SCALED_TANH_B: f64 = 2.0 / 3.0;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::ScaledTanh => "scaled_tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "scaled_tanh" => Some(Activation::ScaledTanh),
            _ => None,
        }
    }

    pub fn apply_in_place(self, values: &mut [f64]) {
        match self {
            Activation::Tanh => values.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::ScaledTanh => values
                .iter_mut()
                .for_each(|v| *v = SCALED_TANH_A * (SCALED_TANH_B * *v).tanh()),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::ScaledTanh => {
                let t = y / SCALED_TANH_A;
                SCALED_TANH_A * SCALED_TANH_B * (1.0 - t * t)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One affine layer, `x · weights + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols
    }

    pub fn param_count(&self) -> usize {
        self.weights.data.len() + self.bias.data.len()
    }
}

/// First layer of a pair scorer: the input of pair `(i, j)` is the
/// concatenation `[images[i], texts[j]]`, so the product splits into an
/// image block and a text block that are each computed once per row.
pub fn pair_dense_forward(
    layer: &DenseLayer,
    images: &Matrix,
    texts: &Matrix,
    pairs: &[(usize, usize)],
) -> Result<Matrix> {
    let (img_proj, txt_proj) = project_pair_inputs(layer, images, texts)?;
    combine_pair_projections(&img_proj, &txt_proj, &layer.bias, pairs)
}

/// Splits `layer.weights` into its image and text row blocks and applies
/// each to its own modality.
pub(crate) fn project_pair_inputs(
    layer: &DenseLayer,
    images: &Matrix,
    texts: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (di, dt) = (images.cols, texts.cols);
    if di + dt != layer.fan_in() {
        return Err(Error::shape(
            "image+text features",
            format!("{di}+{dt}"),
            "first layer",
            format!("{}x{}", layer.fan_in(), layer.fan_out()),
        ));
    }
    let h = layer.fan_out();
    let w = layer.weights.as_slice();
    let top = Matrix::new(di, h, w[..di * h].to_vec())?;
    let bottom = Matrix::new(dt, h, w[di * h..].to_vec())?;
    Ok((images.matmul(&top)?, texts.matmul(&bottom)?))
}

pub(crate) fn combine_pair_projections(
    img_proj: &Matrix,
    txt_proj: &Matrix,
    bias: &Matrix,
    pairs: &[(usize, usize)],
) -> Result<Matrix> {
    let h = bias.cols;
    let mut out = Matrix::zeros(pairs.len(), h);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        if i >= img_proj.rows || j >= txt_proj.rows {
            return Err(Error::shape(
                "pair",
                format!("({i}, {j})"),
                "feature rows",
                format!("{} images, {} texts", img_proj.rows, txt_proj.rows),
            ));
        }
        let (a, t) = (img_proj.row(i), txt_proj.row(j));
        for (((o, x), y), b) in out.row_mut(p).iter_mut().zip(a).zip(t).zip(&bias.data) {
            *o = (x + y) + b;
        }
    }
    out.check_finite("pair layer output")?;
    Ok(out)
}

#[derive(Debug, Clone)]
enum TapeOp {
    PairDense {
        layer: usize,
        images: Matrix,
        texts: Matrix,
        pairs: Vec<(usize, usize)>,
    },
    Dense {
        layer: usize,
        input: Matrix,
    },
    Activation {
        kind: Activation,
        output: Matrix,
    },
}

/// Record of the primitives applied during one forward pass, replayed in
/// reverse to accumulate parameter gradients.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    ops: Vec<TapeOp>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Applies `layers[layer]` to `input`, recording the input.
    pub fn dense(&mut self, layers: &[DenseLayer], layer: usize, input: Matrix) -> Result<Matrix> {
        let l = &layers[layer];
        let out = dense_forward(&input, &l.weights, &l.bias)?;
        self.ops.push(TapeOp::Dense { layer, input });
        Ok(out)
    }

    /// Applies a pair layer (see [`pair_dense_forward`]), recording its inputs.
    pub fn pair_dense(
        &mut self,
        layers: &[DenseLayer],
        layer: usize,
        images: Matrix,
        texts: Matrix,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Matrix> {
        let out = pair_dense_forward(&layers[layer], &images, &texts, &pairs)?;
        self.ops.push(TapeOp::PairDense {
            layer,
            images,
            texts,
            pairs,
        });
        Ok(out)
    }

    pub fn activation(&mut self, kind: Activation, mut input: Matrix) -> Matrix {
        kind.apply_in_place(&mut input.data);
        self.ops.push(TapeOp::Activation {
            kind,
            output: input.clone(),
        });
        input
    }

    /// Accumulates `d loss / d layer` for every layer, given the gradient
    /// with respect to the last recorded output. Layers the tape never
    /// touched get zero gradients.
    pub fn backward(&self, layers: &[DenseLayer], upstream: Matrix) -> Result<Vec<DenseLayer>> {
        let mut grads: Vec<DenseLayer> = layers
            .iter()
            .map(|l| DenseLayer::zeros(l.fan_in(), l.fan_out()))
            .collect();
        let mut delta = upstream;
        for (pos, op) in self.ops.iter().enumerate().rev() {
            match op {
                TapeOp::Activation { kind, output } => {
                    if output.shape() != delta.shape() {
                        return Err(Error::shape(
                            "activation output",
                            format!("{:?}", output.shape()),
                            "upstream gradient",
                            format!("{:?}", delta.shape()),
                        ));
                    }
                    for (d, &y) in delta.data.iter_mut().zip(&output.data) {
                        *d *= kind.derivative_from_output(y);
                    }
                }
                TapeOp::PairDense {
                    layer,
                    images,
                    texts,
                    pairs,
                } => {
                    let l = &layers[*layer];
                    if delta.rows != pairs.len() || delta.cols != l.fan_out() {
                        return Err(Error::shape(
                            "pair layer output",
                            format!("{}x{}", pairs.len(), l.fan_out()),
                            "upstream gradient",
                            format!("{}x{}", delta.rows, delta.cols),
                        ));
                    }
                    let h = l.fan_out();
                    let mut per_image = Matrix::zeros(images.rows, h);
                    let mut per_text = Matrix::zeros(texts.rows, h);
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let d = delta.row(p);
                        per_image
                            .row_mut(i)
                            .iter_mut()
                            .zip(d)
                            .for_each(|(a, b)| *a += b);
                        per_text
                            .row_mut(j)
                            .iter_mut()
                            .zip(d)
                            .for_each(|(a, b)| *a += b);
                    }
                    let mut top = Matrix::zeros(images.cols, h);
                    gemm(images, true, &per_image, false, &mut top, 0.0);
                    let mut bottom = Matrix::zeros(texts.cols, h);
                    gemm(texts, true, &per_text, false, &mut bottom, 0.0);
                    let g = &mut grads[*layer];
                    let split = images.cols * h;
                    for (acc, v) in g.weights.data[..split].iter_mut().zip(&top.data) {
                        *acc += v;
                    }
                    for (acc, v) in g.weights.data[split..].iter_mut().zip(&bottom.data) {
                        *acc += v;
                    }
                    for row in delta.iter_rows() {
                        for (b, d) in g.bias.data.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                    // A pair layer has no differentiable input upstream of it.
                }
                TapeOp::Dense { layer, input } => {
                    let l = &layers[*layer];
                    if delta.rows != input.rows || delta.cols != l.fan_out() {
                        return Err(Error::shape(
                            "layer output",
                            format!("{}x{}", input.rows, l.fan_out()),
                            "upstream gradient",
                            format!("{}x{}", delta.rows, delta.cols),
                        ));
                    }
                    let g = &mut grads[*layer];
                    gemm(input, true, &delta, false, &mut g.weights, 1.0);
                    for row in delta.iter_rows() {
                        for (b, d) in g.bias.data.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                    if pos > 0 {
                        let mut next = Matrix::zeros(delta.rows, l.fan_in());
                        gemm(&delta, false, &l.weights, true, &mut next, 0.0);
                        delta = next;
                    }
                }
            }
        }
        for g in &grads {
            g.weights.check_finite("weight gradient")?;
            g.bias.check_finite("bias gradient")?;
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Matrix::row_vector(vec![1.0, 2.0]);
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero = Matrix::zeros(1, 2);
        assert_eq!(
            dense_forward(&x, &eye, &zero).unwrap().as_slice(),
            &[1.0, 2.0]
        );

        let w = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 0.1, 0.0]]).unwrap();
        let b = Matrix::row_vector(vec![0.5, -0.25, 7.0]);
        let out = dense_forward(&Matrix::zeros(1, 2), &w, &b).unwrap();
        assert_eq!(out.as_slice(), b.as_slice());
    }

    #[test]
    fn dense_hand_multiply() {
        let x = Matrix::row_vector(vec![1.0, 1.0]);
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = dense_forward(&x, &w, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out.as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_shape_error_names_operands() {
        let x = Matrix::zeros(1, 3);
        let w = Matrix::zeros(2, 2);
        let err = dense_forward(&x, &w, &Matrix::zeros(1, 2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("input") && err.contains("weights"), "{err}");
        let err = dense_forward(&Matrix::zeros(1, 2), &w, &Matrix::zeros(1, 3))
            .unwrap_err()
            .to_string();
        assert!(err.contains("bias"), "{err}");
    }

    #[test]
    fn dense_rejects_overflow() {
        let x = Matrix::row_vector(vec![f64::MAX, f64::MAX]);
        let w = Matrix::from_rows(&[vec![2.0], vec![2.0]]).unwrap();
        assert!(matches!(
            dense_forward(&x, &w, &Matrix::zeros(1, 1)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.0; 4], 1.0).unwrap();
        assert!(p.iter().all(|&v| close(v, 0.25, 1e-15)));

        for c in [-700.0, -3.0, 0.0, 12.5, 650.0] {
            let p = stable_softmax(&[c, c + 3f64.ln()], 1.0).unwrap();
            assert!(
                close(p[0], 0.25, 1e-12) && close(p[1], 0.75, 1e-12),
                "{c}: {p:?}"
            );
        }

        // σ(1) = 1 / (1 + e^-1)
        let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
        let p = stable_softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!(close(p[0], sigma1, 1e-15) && close(p[0], 0.7311, 1e-4));
        assert!(close(p[1], 0.2689, 1e-4));
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            stable_softmax(&[0.0, f64::NAN], 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            stable_softmax(&[0.0, f64::INFINITY], 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(stable_softmax(&[0.0], 0.0), Err(Error::Config(_))));
        assert!(stable_softmax(&[], 1.0).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let theta = Matrix::row_vector(vec![1.0, -2.0]);
        let g =
            finite_diff_grad(|p| p.as_slice().iter().map(|v| v * v).sum(), &theta, 1e-5).unwrap();
        assert!(close(g.get(0, 0), 2.0, 1e-6) && close(g.get(0, 1), -4.0, 1e-6));

        let g = finite_diff_grad(|_| 3.5, &theta, 1e-5).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);

        let theta = Matrix::row_vector(vec![3.0, 5.0]);
        let g = finite_diff_grad(|p| p.get(0, 0) * p.get(0, 1), &theta, 1e-5).unwrap();
        assert!(close(g.get(0, 0), 5.0, 1e-6) && close(g.get(0, 1), 3.0, 1e-6));
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let theta = Matrix::row_vector(vec![1.0, 1e-7]);
        let err = finite_diff_grad(|p| p.get(0, 1).ln(), &theta, 1e-5).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
        assert!(finite_diff_grad(|_| 0.0, &theta, 0.0).is_err());
    }

    #[test]
    fn empty_tape_gives_zero_grads() {
        let layers = vec![DenseLayer::zeros(3, 2), DenseLayer::zeros(2, 1)];
        let grads = GradTape::new()
            .backward(&layers, Matrix::zeros(4, 1))
            .unwrap();
        assert_eq!(grads.len(), 2);
        for (g, l) in grads.iter().zip(&layers) {
            assert_eq!(g.weights.shape(), l.weights.shape());
            assert!(g
                .weights
                .as_slice()
                .iter()
                .chain(g.bias.as_slice())
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tape_matches_finite_differences() {
        let layers = vec![
            DenseLayer {
                weights: Matrix::from_rows(&[vec![0.2, -0.4, 0.1], vec![0.7, 0.3, -0.5]]).unwrap(),
                bias: Matrix::row_vector(vec![0.05, -0.1, 0.2]),
            },
            DenseLayer {
                weights: Matrix::from_rows(&[vec![0.6], vec![-0.8], vec![0.9]]).unwrap(),
                bias: Matrix::row_vector(vec![0.3]),
            },
        ];
        let x = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0]]).unwrap();
        let forward = |layers: &[DenseLayer]| -> f64 {
            let mut tape = GradTape::new();
            let h = tape.dense(layers, 0, x.clone()).unwrap();
            let h = tape.activation(Activation::ScaledTanh, h);
            let out = tape.dense(layers, 1, h).unwrap();
            out.as_slice().iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let mut tape = GradTape::new();
        let h = tape.dense(&layers, 0, x.clone()).unwrap();
        let h = tape.activation(Activation::ScaledTanh, h);
        let out = tape.dense(&layers, 1, h).unwrap();
        let grads = tape.backward(&layers, out).unwrap();

        let w0 = layers[0].weights.clone();
        let numeric = finite_diff_grad(
            |w| {
                let mut l = layers.clone();
                l[0].weights = w.clone();
                forward(&l)
            },
            &w0,
            1e-6,
        )
        .unwrap();
        for (a, n) in grads[0].weights.as_slice().iter().zip(numeric.as_slice()) {
            assert!(close(*a, *n, 1e-8), "{a} vs {n}");
        }
        let b1 = layers[1].bias.clone();
        let numeric = finite_diff_grad(
            |b| {
                let mut l = layers.clone();
                l[1].bias = b.clone();
                forward(&l)
            },
            &b1,
            1e-6,
        )
        .unwrap();
        assert!(close(grads[1].bias.get(0, 0), numeric.get(0, 0), 1e-8));
    }

    #[test]
    fn pair_dense_matches_concatenation() {
        let layer = DenseLayer {
            weights: Matrix::new(5, 2, (0..10).map(|v| 0.1 * v as f64 - 0.4).collect()).unwrap(),
            bias: Matrix::row_vector(vec![0.5, -0.5]),
        };
        let images = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let texts = Matrix::from_rows(&[
            vec![0.3, 0.0, 1.0],
            vec![2.0, -2.0, 0.25],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap();
        let pairs = vec![(0, 2), (1, 0), (1, 1), (0, 0)];
        let out = pair_dense_forward(&layer, &images, &texts, &pairs).unwrap();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mut x = images.row(i).to_vec();
            x.extend_from_slice(texts.row(j));
            let want = dense_forward(&Matrix::row_vector(x), &layer.weights, &layer.bias).unwrap();
            for (a, b) in out.row(p).iter().zip(want.as_slice()) {
                assert!(close(*a, *b, 1e-12));
            }
        }
        let bad = Matrix::zeros(2, 4);
        assert!(pair_dense_forward(&layer, &images, &bad, &pairs).is_err());
        assert!(pair_dense_forward(&layer, &images, &texts, &[(2, 0)]).is_err());
    }

    #[test]
    fn pair_dense_backward_matches_finite_differences() {
        let layers = vec![
            DenseLayer {
                weights: Matrix::new(
                    4,
                    3,
                    (0..12).map(|v| ((v * 7 % 5) as f64 - 2.0) * 0.2).collect(),
                )
                .unwrap(),
                bias: Matrix::row_vector(vec![0.1, 0.0, -0.1]),
            },
            DenseLayer {
                weights: Matrix::from_rows(&[vec![0.5], vec![-0.7], vec![0.2]]).unwrap(),
                bias: Matrix::row_vector(vec![0.0]),
            },
        ];
        let images = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.3, 0.8]]).unwrap();
        let texts = Matrix::from_rows(&[vec![0.2, 0.4], vec![-1.0, 0.6], vec![0.9, -0.1]]).unwrap();
        let pairs = vec![(0, 0), (0, 1), (1, 2), (1, 0), (0, 2)];
        let run = |layers: &[DenseLayer], tape: &mut GradTape| -> Matrix {
            let h = tape
                .pair_dense(layers, 0, images.clone(), texts.clone(), pairs.clone())
                .unwrap();
            let h = tape.activation(Activation::Tanh, h);
            tape.dense(layers, 1, h).unwrap()
        };
        let loss = |out: &Matrix| {
            out.as_slice()
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * v)
                .sum::<f64>()
        };
        let mut tape = GradTape::new();
        let out = run(&layers, &mut tape);
        let upstream =
            Matrix::new(out.rows(), 1, (1..=out.rows()).map(|v| v as f64).collect()).unwrap();
        let grads = tape.backward(&layers, upstream).unwrap();
        let numeric = finite_diff_grad(
            |w| {
                let mut l = layers.clone();
                l[0].weights = w.clone();
                loss(&run(&l, &mut GradTape::new()))
            },
            &layers[0].weights,
            1e-6,
        )
        .unwrap();
        for (a, n) in grads[0].weights.as_slice().iter().zip(numeric.as_slice()) {
            assert!(close(*a, *n, 1e-8), "{a} vs {n}");
        }
    }

    #[test]
    fn matmul_transposed_variants() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut out = Matrix::zeros(3, 2);
        gemm(&a, true, &b, false, &mut out, 0.0);
        assert_eq!(out.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut out = Matrix::zeros(2, 2);
        gemm(&a, false, &a, true, &mut out, 0.0);
        assert_eq!(out.as_slice(), &[14.0, 32.0, 32.0, 77.0]);
    }
}
