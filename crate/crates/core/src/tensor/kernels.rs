//! Forward kernels on plain tensors.
//!
//! These do not touch any tape; the tape calls them for forward values and
//! the encoder stub uses them directly for its frozen computation.

use super::{Result, Tensor, TensorError};

/// `sqrt(2/pi)` and the cubic coefficient of the tanh GELU approximation.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Contract {
            op,
            msg: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2("matmul_nt", a)?;
    let (n, k2) = require_rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_rank2("matmul_tn", a)?;
    let (k2, n) = require_rank2("matmul_tn", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Adds a length-`n` vector to every row of an `[m,n]` matrix.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = require_rank2("add_row", a)?;
    if bias.numel() != n || bias.rank() > 1 {
        return Err(TensorError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn scalar_mul(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] * s)
}

/// Softmax along the last axis. `-inf` entries receive zero probability.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(TensorError::Contract {
            op: "softmax",
            msg: "softmax needs at least one axis".into(),
        });
    }
    let n = a.cols();
    let mut out = Vec::with_capacity(a.numel());
    for row in a.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(a.shape(), out)
}

/// Per-row statistics kept by layer norm for its backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormStats)> {
    let n = x.cols();
    if gamma.numel() != n || beta.numel() != n {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstds = Vec::with_capacity(x.rows());
    for row in x.data().chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstds.push(rstd);
        for (j, v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            out.push(h * gamma.data()[j] + beta.data()[j]);
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        NormStats {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd: rstds,
        },
    ))
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| gelu_scalar(a.data()[i]))
}

pub fn tanh(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i].tanh())
}

/// Geometry of a 1-D convolution over the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// `floor((T + 2·padding − kernel) / stride) + 1`, or `None` when the padded
/// input is shorter than one kernel window.
pub fn conv1d_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = t + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Time-major convolution: `x[T, C_in]`, `w[C_out, C_in, K]`, `b[C_out]` → `[T_out, C_out]`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (t, cin) = require_rank2("conv1d", x)?;
    if w.rank() != 3 || w.shape()[1] != cin || b.numel() != w.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let tout = conv1d_out_len(t, k, geom.stride, geom.padding).ok_or_else(|| {
        TensorError::Contract {
            op: "conv1d",
            msg: format!(
                "input length {t} is shorter than kernel {k} with padding {}; need at least {}",
                geom.padding,
                k.saturating_sub(2 * geom.padding)
            ),
        }
    })?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; tout * cout];
    for to in 0..tout {
        for o in 0..cout {
            let mut acc = b.data()[o];
            for kk in 0..k {
                let Some(i) = (to * geom.stride + kk).checked_sub(geom.padding) else {
                    continue;
                };
                if i >= t {
                    continue;
                }
                for c in 0..cin {
                    acc += wd[(o * cin + c) * k + kk] * xd[i * cin + c];
                }
            }
            out[to * cout + o] = acc;
        }
    }
    Tensor::new(&[tout, cout], out)
}

pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, d) = require_rank2("embedding", table)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for (position, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(TensorError::IndexOutOfRange { position, id, rows });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), d], out)
}

/// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(TensorError::Contract {
            op: "concat",
            msg: "nothing to concatenate".into(),
        });
    };
    let (_, c0) = require_rank2("concat", first)?;
    let r0 = first.rows();
    for p in parts {
        require_rank2("concat", p)?;
        let ok = match axis {
            0 => p.cols() == c0,
            1 => p.rows() == r0,
            _ => false,
        };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    if axis == 0 {
        let rows = parts.iter().map(|p| p.rows()).sum::<usize>();
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        Tensor::new(&[rows, c0], data)
    } else {
        let cols = parts.iter().map(|p| p.cols()).sum::<usize>();
        let mut data = Vec::with_capacity(r0 * cols);
        for r in 0..r0 {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(&[r0, cols], data)
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("transpose", a)?;
    let d = a.data();
    Tensor::new(&[n, m], (0..m * n).map(|i| d[(i % m) * n + i / m]).collect())
}

pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = require_rank2("slice_rows", a)?;
    if start > end || end > m {
        return Err(TensorError::Contract {
            op: "slice_rows",
            msg: format!("range {start}..{end} out of bounds for {m} rows"),
        });
    }
    Tensor::new(&[end - start, n], a.data()[start * n..end * n].to_vec())
}

pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = require_rank2("slice_cols", a)?;
    if start > end || end > n {
        return Err(TensorError::Contract {
            op: "slice_cols",
            msg: format!("range {start}..{end} out of bounds for {n} columns"),
        });
    }
    let w = end - start;
    let mut data = Vec::with_capacity(m * w);
    for r in 0..m {
        data.extend_from_slice(&a.row(r)[start..end]);
    }
    Tensor::new(&[m, w], data)
}

/// Sets entry `(i, j)` to `-inf` whenever `j > i + offset`.
pub fn causal_mask(a: &Tensor, offset: usize) -> Result<Tensor> {
    let (_, n) = require_rank2("causal_mask", a)?;
    let mut out = a.clone();
    for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if j > i + offset {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// Row-wise log-softmax.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax(&t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_handles_negative_infinity() {
        let s = softmax(&t(&[1, 3], &[0.0, f64::NEG_INFINITY, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.7 - 2.0);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64).cos());
        let direct = matmul(&a, &b).unwrap();
        let nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        let tn = matmul_tn(&transpose(&a).unwrap(), &b).unwrap();
        assert!(direct.max_abs_diff(&nt) < 1e-14);
        assert!(direct.max_abs_diff(&tn) < 1e-14);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_length_formula() {
        assert_eq!(conv1d_out_len(1500, 5, 5, 0), Some(300));
        assert_eq!(conv1d_out_len(300, 5, 5, 0), Some(60));
        assert_eq!(conv1d_out_len(4, 5, 5, 0), None);
        assert_eq!(conv1d_out_len(4, 5, 1, 1), Some(2));
    }

    #[test]
    fn conv1d_matches_manual_sum() {
        let x = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2], &[1.0, -1.0]);
        let b = t(&[1], &[0.5]);
        let y = conv1d(&x, &w, &b, ConvGeometry { stride: 2, padding: 0 }).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[1.0 - 2.0 + 0.5, 3.0 - 4.0 + 0.5]);
    }

    #[test]
    fn conv1d_too_short_has_hint() {
        let err = conv1d(
            &Tensor::zeros(&[3, 2]),
            &Tensor::zeros(&[2, 2, 5]),
            &Tensor::zeros(&[2]),
            ConvGeometry { stride: 5, padding: 0 },
        )
        .unwrap_err();
        assert!(err.to_string().contains("need at least 5"));
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let (y, _) = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_both_axes() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[3.0, 4.0]);
        assert_eq!(concat(&[&a, &b], 0).unwrap().data(), &[1., 2., 3., 4.]);
        assert_eq!(concat(&[&a, &b], 1).unwrap().shape(), &[1, 4]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(&Tensor::zeros(&[2, 3]), 1).unwrap();
        assert_eq!(m.data()[0..3], [0.0, 0.0, f64::NEG_INFINITY]);
        assert_eq!(m.data()[3..6], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let err = embedding(&Tensor::zeros(&[3, 2]), &[0, 3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::IndexOutOfRange {
                position: 1,
                id: 3,
                rows: 3
            }
        );
    }
}
