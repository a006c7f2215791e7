//! Layers shared by the adapters and the language model. Each layer owns
//! parameter ids into a [`ParamStore`] and records its forward on a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::rng::normal_tensor;
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Affine map on rows: `x·W + b`, `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[d_in, d_out], std), frozen)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), frozen)?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Plain-tensor forward, used where no gradient is needed.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = crate::tensor::kernels::matmul(x, store.tensor(self.w))?;
        crate::tensor::kernels::add_row(&y, store.tensor(self.b))
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, frozen: bool) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), frozen)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), frozen)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`,
/// split into `heads` column groups. With `causal`, query `i` sees keys
/// `0..=i`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = tape.shape(q)?[1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Contract {
            op: "attention",
            msg: format!("width {d} is not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let s = tape.matmul_nt(qh, kh)?;
        let mut s = tape.scalar_mul(s, scale)?;
        if causal {
            s = tape.causal_mask(s, 0)?;
        }
        let p = tape.softmax(s)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Position-wise `W2·gelu(W1·x)` block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng, frozen)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng, frozen)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.down.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn linear_matches_loop() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(3, "t");
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng, false).unwrap();
        store.get_mut(lin.b).tensor = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &store, xv).unwrap();
        let y = tape.value(y).unwrap();
        let w = store.tensor(lin.w).data();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = store.tensor(lin.b).data()[j];
                for k in 0..3 {
                    acc += x.data()[i * 3 + k] * w[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(multi_head_attention(&mut tape, x, x, x, 4, false).is_err());
        assert!(multi_head_attention(&mut tape, x, x, x, 3, true).is_ok());
    }
}
