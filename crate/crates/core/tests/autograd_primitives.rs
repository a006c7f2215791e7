//! Every primitive's tape gradient against central finite differences of
//! its forward kernel, on randomized small shapes.

use desta_core::tensor::kernels;
use desta_core::tensor::{ParamStore, Result, Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element contributes.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out)?.numel();
    let flat = tape.reshape(out, &[1, n])?;
    let w = Tensor::from_fn(&[n, 1], |i| ((i as f64) * 0.77 + 0.3).sin());
    let w = tape.constant(w);
    let s = tape.matmul(flat, w)?;
    tape.reshape(s, &[])
}

fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let s = reduce(&mut tape, out).unwrap();
        tape.value(s).unwrap().item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = reduce(&mut tape, out).unwrap();
    let grads = tape.backward(s, &mut ParamStore::new()).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < TOL, "input {k} elem {i}: autograd {a} vs fd {numeric}");
        }
    }
}

fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |i| {
        let x = (i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233;
        (x.sin() * 43758.5453).fract() * 2.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_grad(m in 1usize..4, k in 1usize..4, n in 1usize..4, s in 0u64..1000) {
        check(vec![mat(m, k, s), mat(k, n, s + 1)], |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn matmul_nt_grad(m in 1usize..4, k in 1usize..4, n in 1usize..4, s in 0u64..1000) {
        check(vec![mat(m, k, s), mat(n, k, s + 1)], |t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn add_and_row_bias_grad(m in 1usize..4, n in 1usize..5, s in 0u64..1000) {
        check(vec![mat(m, n, s), mat(m, n, s + 2)], |t, v| t.add(v[0], v[1]));
        let bias = mat(1, n, s + 3).reshape(&[n]).unwrap();
        check(vec![mat(m, n, s), bias], |t, v| t.add_row(v[0], v[1]));
    }

    #[test]
    fn softmax_grad(m in 1usize..4, n in 1usize..6, s in 0u64..1000) {
        check(vec![mat(m, n, s)], |t, v| t.softmax(v[0]));
    }

    #[test]
    fn layer_norm_grad(m in 1usize..4, n in 2usize..6, s in 0u64..1000) {
        let g = mat(1, n, s + 5).reshape(&[n]).unwrap();
        let b = mat(1, n, s + 6).reshape(&[n]).unwrap();
        check(vec![mat(m, n, s), g, b], |t, v| t.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn gelu_tanh_scalar_grad(m in 1usize..4, n in 1usize..5, s in 0u64..1000, k in -3.0f64..3.0) {
        check(vec![mat(m, n, s)], |t, v| {
            let x = t.scalar_mul(v[0], k)?;
            t.gelu(x)
        });
        check(vec![mat(m, n, s)], |t, v| t.tanh(v[0]));
    }

    #[test]
    fn conv1d_grad(t_len in 3usize..12, cin in 1usize..3, cout in 1usize..3,
                   kernel in 1usize..4, stride in 1usize..3, pad in 0usize..2, s in 0u64..1000) {
        prop_assume!(t_len + 2 * pad >= kernel);
        let w = mat(cout, cin * kernel, s + 1).reshape(&[cout, cin, kernel]).unwrap();
        let b = mat(1, cout, s + 2).reshape(&[cout]).unwrap();
        check(vec![mat(t_len, cin, s), w, b], |t, v| t.conv1d(v[0], v[1], v[2], stride, pad));
    }

    #[test]
    fn embedding_grad(rows in 2usize..6, d in 1usize..4, s in 0u64..1000) {
        let ids: Vec<usize> = (0..5).map(|i| (i * 7 + s as usize) % rows).collect();
        check(vec![mat(rows, d, s)], move |t, v| t.embedding(v[0], &ids));
    }

    #[test]
    fn concat_slice_transpose_grad(m in 1usize..4, n in 2usize..5, s in 0u64..1000) {
        check(vec![mat(m, n, s), mat(m, n, s + 1)], |t, v| {
            let rows = t.concat(&[v[0], v[1]], 0)?;
            let cols = t.concat(&[v[0], v[1]], 1)?;
            let a = t.slice_rows(rows, 1, 2 * m)?;
            let b = t.slice_cols(cols, 1, 2 * n)?;
            let bt = t.transpose(b)?;
            let p = t.matmul_nt(a, a)?;
            let flat_p = t.reshape(p, &[1, (2 * m - 1) * (2 * m - 1)])?;
            let flat_q = t.reshape(bt, &[1, (2 * n - 1) * m])?;
            t.concat(&[flat_p, flat_q], 1)
        });
    }

    #[test]
    fn causal_softmax_grad(n in 2usize..5, extra in 0usize..3, s in 0u64..1000) {
        check(vec![mat(n, n + extra, s)], move |t, v| {
            let m = t.causal_mask(v[0], extra)?;
            t.softmax(m)
        });
    }

    #[test]
    fn cross_entropy_grad(tlen in 1usize..5, vocab in 2usize..6, s in 0u64..1000) {
        let targets: Vec<usize> = (0..tlen).map(|i| (i * 3 + s as usize) % vocab).collect();
        let mask: Vec<bool> = (0..tlen).map(|i| (i + s as usize) % 3 != 0).collect();
        check(vec![mat(tlen, vocab, s)], move |t, v| {
            let out = t.cross_entropy_masked(v[0], &targets, &mask)?;
            t.reshape(out.loss, &[1, 1])
        });
    }

    #[test]
    fn softmax_rows_sum_to_one(m in 1usize..5, n in 1usize..8, s in 0u64..1000, k in 0.1f64..50.0) {
        let x = kernels::scalar_mul(&mat(m, n, s), k);
        let y = kernels::softmax(&x).unwrap();
        for row in y.data().chunks(n) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_length_formula(t_len in 1usize..2000, kernel in 1usize..9, stride in 1usize..9, pad in 0usize..4) {
        let out = kernels::conv1d_out_len(t_len, kernel, stride, pad);
        if t_len + 2 * pad < kernel {
            prop_assert!(out.is_none());
        } else {
            // count window starts directly
            let mut count = 0;
            let mut start = 0;
            while start + kernel <= t_len + 2 * pad {
                count += 1;
                start += stride;
            }
            prop_assert_eq!(out, Some(count));
        }
    }
}

#[test]
fn masked_loss_matches_direct_loop() {
    let logits = mat(6, 5, 42);
    let targets = [1usize, 4, 0, 2, 3, 1];
    let mask = [true, false, true, false, true, false];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = tape.cross_entropy_masked(l, &targets, &mask).unwrap();
    let got = tape.value(out.loss).unwrap().item();

    let mut total = 0.0;
    let mut n = 0.0;
    for r in 0..6 {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[targets[r]].exp() / z).ln();
        n += 1.0;
    }
    assert!((got - total / n).abs() < 1e-12);
    assert_eq!(out.selected, 3);
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.constant(mat(4, 6, 1));
        let b = tape.constant(mat(6, 3, 2));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c).unwrap();
        let e = tape.softmax(d).unwrap();
        tape.value(e).unwrap().to_le_bytes()
    };
    assert_eq!(run(), run());
}
