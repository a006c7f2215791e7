//! Wengert-list reverse mode.
//!
//! Forward ops append a node holding the computed value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the list in
//! reverse once. A tape is meant to live for a single step and be reset.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, NormStats};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    /// Position of the node on its tape.
    pub fn tape_id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    ScalarMul(usize, f64),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: NormStats,
    },
    Gelu(usize),
    Tanh(usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Transpose(usize),
    Reshape(usize),
    SliceRows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        end: usize,
    },
    CausalMask {
        a: usize,
        offset: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Result of [`Tape::cross_entropy_masked`].
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// Number of positions selected by the mask.
    pub selected: usize,
}

impl LossOutput {
    /// Set when the mask selected nothing and the loss is a plain zero.
    pub fn empty_mask(&self) -> bool {
        self.selected == 0
    }
}

/// Gradients of every node reached by a backward pass.
#[derive(Debug)]
pub struct Grads {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(&self.shapes[v.id], g.clone()).ok()
    }
}

#[derive(Debug)]
pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            uid: fresh_tape_id(),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// Drops every recorded node. Vars from before the reset become detached.
    pub fn reset(&mut self) {
        self.uid = fresh_tape_id();
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.uid || v.id >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.uid,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (read back through [`Grads`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter. Repeated calls within one step share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var {
                id: i,
                tape: self.uid,
            };
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), !p.frozen);
        self.params.insert(id, v.id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::MatMul(ia, ib), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = kernels::matmul_nt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::MatMulNt(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = kernels::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Add(ia, ib), rg))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let v = kernels::add_row(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::AddRow(ia, ib), rg))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::scalar_mul(&self.nodes[ia].value, s);
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::ScalarMul(ia, s), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::softmax(&self.nodes[ia].value)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Softmax(ia), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (v, stats) = kernels::layer_norm(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        )?;
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                stats,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::gelu(&self.nodes[ia].value);
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Gelu(ia), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::tanh(&self.nodes[ia].value);
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Tanh(ia), rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let geom = ConvGeometry { stride, padding };
        let v = kernels::conv1d(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
            geom,
        )?;
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(
            v,
            Op::Conv1d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let v = kernels::embedding(&self.nodes[it].value, ids)?;
        let rg = self.rg(&[it]);
        Ok(self.push(
            v,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let v = kernels::concat(&values, axis)?;
        let rg = self.rg(&ids);
        Ok(self.push(v, Op::Concat { parts: ids, axis }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::transpose(&self.nodes[ia].value)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Transpose(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Reshape(ia), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::slice_rows(&self.nodes[ia].value, start, end)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::SliceRows { a: ia, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::slice_cols(&self.nodes[ia].value, start, end)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::SliceCols { a: ia, start, end }, rg))
    }

    /// Masks attention scores so row `i` only sees columns `<= i + offset`.
    pub fn causal_mask(&mut self, a: Var, offset: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = kernels::causal_mask(&self.nodes[ia].value, offset)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::CausalMask { a: ia, offset }, rg))
    }

    /// Mean negative log-likelihood of `targets` over the positions where
    /// `mask` is set. Targets at masked-out positions are ignored entirely.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<LossOutput> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        if lv.rank() != 2 || targets.len() != lv.rows() || mask.len() != lv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let vocab = lv.cols();
        let mut probs = Tensor::zeros(lv.shape());
        let mut total = 0.0;
        let mut count = 0;
        for (position, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if tgt >= vocab {
                return Err(TensorError::TargetOutOfVocab {
                    position,
                    id: tgt,
                    vocab,
                });
            }
            let logp = kernels::log_softmax_row(lv.row(position));
            total -= logp[tgt];
            count += 1;
            let prow = &mut probs.data_mut()[position * vocab..(position + 1) * vocab];
            for (p, lp) in prow.iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let value = if count == 0 {
            log::warn!("cross_entropy_masked: mask selects no positions, loss is 0");
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(&[il]);
        let loss = self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        );
        Ok(LossOutput {
            loss,
            selected: count,
        })
    }

    /// Reverse pass from a scalar `loss`. Gradients of non-frozen parameters
    /// are added into `store`; every node gradient is returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[il].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(Grads {
            tape: self.uid,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn node_vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gt = || Tensor::new(out_shape, g.to_vec());
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let gt = gt()?;
                if self.wants(*a) {
                    let da = kernels::matmul_nt(&gt, &self.nodes[*b].value)?;
                    self.accumulate(grads, *a, da.into_data());
                }
                if self.wants(*b) {
                    let db = kernels::matmul_tn(&self.nodes[*a].value, &gt)?;
                    self.accumulate(grads, *b, db.into_data());
                }
            }
            Op::MatMulNt(a, b) => {
                let gt = gt()?;
                if self.wants(*a) {
                    let da = kernels::matmul(&gt, &self.nodes[*b].value)?;
                    self.accumulate(grads, *a, da.into_data());
                }
                if self.wants(*b) {
                    let db = kernels::matmul_tn(&gt, &self.nodes[*a].value)?;
                    self.accumulate(grads, *b, db.into_data());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ScalarMul(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * s).collect());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let n = node.value.cols();
                let gam = self.nodes[*gamma].value.data();
                let xhat = stats.xhat.data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((gr, xr), dr)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let gh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_g = gh.iter().sum::<f64>() / n as f64;
                        let mean_gx =
                            gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dr[j] = stats.rstd[r] * (gh[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(xv, gv)| gv * kernels::gelu_grad_scalar(*xv))
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx = y.iter().zip(g).map(|(yv, gv)| gv * (1.0 - yv * yv)).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Conv1d { x, w, b, geom } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (t, cin) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let tout = node.value.shape()[0];
                let (xd, wd) = (xv.data(), wv.data());
                let (need_x, need_w) = (self.wants(*x), self.wants(*w));
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; cout];
                for to in 0..tout {
                    for o in 0..cout {
                        let gv = g[to * cout + o];
                        db[o] += gv;
                        if gv == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            let Some(ix) = (to * geom.stride + kk).checked_sub(geom.padding)
                            else {
                                continue;
                            };
                            if ix >= t {
                                continue;
                            }
                            for c in 0..cin {
                                let wi = (o * cin + c) * k + kk;
                                if need_x {
                                    dx[ix * cin + c] += gv * wd[wi];
                                }
                                if need_w {
                                    dw[wi] += gv * xd[ix * cin + c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[*table].value;
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.numel();
                        self.accumulate(grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                } else {
                    let total_cols = node.value.cols();
                    let rows = node.value.rows();
                    let mut col = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total_cols + col..r * total_cols + col + c]);
                        }
                        self.accumulate(grads, p, dp);
                        col += c;
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = kernels::transpose(&gt()?)?;
                self.accumulate(grads, *a, gt.into_data());
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::SliceRows { a, start } => {
                let src = &self.nodes[*a].value;
                let n = src.cols();
                let mut da = vec![0.0; src.numel()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start, end } => {
                let src = &self.nodes[*a].value;
                let n = src.cols();
                let w = end - start;
                let mut da = vec![0.0; src.numel()];
                for r in 0..src.rows() {
                    da[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::CausalMask { a, offset } => {
                let n = node.value.cols();
                let mut da = g.to_vec();
                for (r, row) in da.chunks_mut(n).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        if j > r + offset {
                            *v = 0.0;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let vocab = probs.cols();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.numel()];
                for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..vocab {
                        dl[r * vocab + j] = scale * probs.data()[r * vocab + j];
                    }
                    dl[r * vocab + tgt] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}
