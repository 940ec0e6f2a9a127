use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<F: Real> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

enum Op<F: Real> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: F,
    },
    MulConst {
        a: usize,
        c: Vec<F>,
    },
    Relu {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        mq: usize,
        mk: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Conv {
        x: usize,
        kernel: usize,
        bias: usize,
        t_in: usize,
        geom: ConvGeom,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Rows {
        a: usize,
        start: usize,
    },
    Column {
        a: usize,
        col: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    Ctc {
        log_probs: usize,
        grad: Vec<F>,
    },
    SelectSum {
        a: usize,
        idx: Vec<usize>,
    },
    SegmentPool {
        states: usize,
        blank: Option<usize>,
        segments: Vec<(usize, usize)>,
        mu: F,
        weights: Vec<F>,
    },
}

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it and a reverse sweep is a valid topological order. A fresh tape is
/// built for every forward pass.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter leaf into its tensor's accumulator.
    pub fn accumulate_into(&self, tape: &Tape<F>, store: &mut ParamStore<F>) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &self.grads[i] {
                    if store.get(id).requires_grad {
                        store.get_mut(id).accumulate_grad(g);
                    }
                }
            }
        }
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], i: usize, len: usize) -> &mut Vec<F> {
    grads[i].get_or_insert_with(|| vec![F::zero(); len])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Leaf holding a copy of `t`; differentiable iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(&t))
    }

    /// Leaf bound to a stored parameter; its gradient flows back into `store`.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).to_vec();
        kernels::add_in_place(&mut value, self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(
            self.shape(a).to_vec(),
            value,
            Op::Add { a: a.0, b: b.0 },
            ng,
        ))
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        if self.value(bias).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut value = self.value(a).to_vec();
        kernels::add_bias(&mut value, self.value(bias));
        let ng = self.ng(a.0) || self.ng(bias.0);
        Ok(self.push(
            self.shape(a).to_vec(),
            value,
            Op::AddRow {
                a: a.0,
                bias: bias.0,
            },
            ng,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(
            self.shape(a).to_vec(),
            value,
            Op::Mul { a: a.0, b: b.0 },
            ng,
        ))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a.0);
        self.push(self.shape(a).to_vec(), value, Op::Scale { a: a.0, c }, ng)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let value = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a.0);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MulConst { a: a.0, c }, ng))
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let s = F::of(1.0 / keep);
        let mask = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { s } else { F::zero() })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).to_vec();
        kernels::relu_in_place(&mut value);
        let ng = self.ng(a.0);
        self.push(self.shape(a).to_vec(), value, Op::Relu { a: a.0 }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a.0);
        self.push(vec![], vec![s], Op::Sum { a: a.0 }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let s = self.value(a).iter().copied().sum::<F>() / F::of(n as f64);
        let ng = self.ng(a.0);
        Ok(self.push(vec![], vec![s], Op::Mean { a: a.0 }, ng))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        if n == 0 {
            return Err(Error::Empty("softmax over empty axis"));
        }
        let x = self.value(a);
        let mut value = vec![F::zero(); x.len()];
        let mut buf = vec![F::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = x[(o * n + j) * inner + i];
                }
                if log {
                    kernels::log_softmax_row(&mut buf);
                } else {
                    kernels::softmax_row(&mut buf);
                }
                for j in 0..n {
                    value[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        let ng = self.ng(a.0);
        let op = if log {
            Op::LogSoftmax {
                a: a.0,
                outer,
                n,
                inner,
            }
        } else {
            Op::Softmax {
                a: a.0,
                outer,
                n,
                inner,
            }
        };
        Ok(self.push(shape, value, op, ng))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::invalid(format!(
                "layer_norm needs width >= 2, got {d}"
            )));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias));
        let ng = self.ng(x.0) || self.ng(gain.0) || self.ng(bias.0);
        Ok(self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention with `heads` heads; `mask[i*mk + j]`
    /// says whether query `i` may attend key `j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (mq, mk, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if mask.len() != mq * mk {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![mq, mk],
                rhs: vec![mask.len()],
            });
        }
        if let Some(i) = (0..mq).find(|&i| !mask[i * mk..(i + 1) * mk].iter().any(|&b| b)) {
            return Err(Error::invalid(format!(
                "attention mask row {i} allows no keys"
            )));
        }
        let (out, probs) = kernels::attention(
            self.value(q),
            self.value(k),
            self.value(v),
            mq,
            mk,
            d,
            heads,
            |i, j| mask[i * mk + j],
        );
        let ng = self.ng(q.0) || self.ng(k.0) || self.ng(v.0);
        Ok(self.push(
            vec![mq, d],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                mq,
                mk,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Look-ahead convolution over `x[T×c_in]` with kernel `width×c_in×c_out`.
    /// Output frame `t` reads inputs up to `t·stride + lookahead`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        lookahead: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[1] {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let (t_in, width) = (sx[0], sk[0]);
        if lookahead >= width {
            return Err(Error::invalid(format!(
                "lookahead {lookahead} needs a kernel wider than {width}"
            )));
        }
        let geom = ConvGeom {
            width,
            c_in: sk[1],
            c_out: sk[2],
            stride,
            lookahead,
        };
        if t_in + geom.left() + lookahead < width || t_in == 0 {
            return Err(Error::invalid(format!(
                "kernel width {width} exceeds padded input of {t_in} frames"
            )));
        }
        if self.value(bias).len() != geom.c_out {
            return Err(Error::Shape {
                op: "conv1d bias",
                lhs: sk,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let t_out = geom.out_len(t_in);
        let value = kernels::conv1d_rows(
            self.value(x),
            t_in,
            self.value(kernel),
            self.value(bias),
            geom,
            0,
            t_out,
        );
        let ng = self.ng(x.0) || self.ng(kernel.0) || self.ng(bias.0);
        Ok(self.push(
            vec![t_out, geom.c_out],
            value,
            Op::Conv {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                t_in,
                geom,
            },
            ng,
        ))
    }

    /// Rows of a `V×d` table selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::invalid("gather needs a 2-D table"));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("row {bad} out of range for {v} rows")));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table.0);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Rows `[start, end)` of a 2-D value.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[0] {
            return Err(Error::invalid(format!(
                "row range {start}..{end} invalid for shape {s:?}"
            )));
        }
        let d = s[1];
        let value = self.value(a)[start * d..end * d].to_vec();
        let ng = self.ng(a.0);
        Ok(self.push(vec![end - start, d], value, Op::Rows { a: a.0, start }, ng))
    }

    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || col >= s[1] {
            return Err(Error::invalid(format!(
                "column {col} out of range for shape {s:?}"
            )));
        }
        let (m, cols) = (s[0], s[1]);
        let x = self.value(a);
        let value = (0..m).map(|i| x[i * cols + col]).collect();
        let ng = self.ng(a.0);
        Ok(self.push(vec![m], value, Op::Column { a: a.0, col, cols }, ng))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// skipping positions equal to `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (s[0], s[1]);
        let mut tg = Vec::with_capacity(n);
        for &t in targets {
            if t == pad {
                tg.push(None);
            } else if t >= v {
                return Err(Error::invalid(format!("target {t} out of range for {v} classes")));
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("cross entropy over padding only"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = F::zero();
        for (i, t) in tg.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            kernels::log_softmax_row(row);
            if let Some(t) = *t {
                total -= row[t];
            }
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        let loss = total / F::of(count as f64);
        let ng = self.ng(logits.0);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: tg,
                probs,
                count,
            },
            ng,
        ))
    }

    /// CTC negative log-likelihood of `labels` given per-frame log-probabilities
    /// `T×C` whose last column is blank.
    pub fn ctc_nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(log_probs);
        if s.len() != 2 {
            return Err(Error::invalid("ctc needs a 2-D grid"));
        }
        let (t, c) = (s[0], s[1]);
        let (nll, occupancy) =
            crate::ctc::forward_backward(self.value(log_probs), t, c, labels)?;
        let grad = occupancy.into_iter().map(|g| -g).collect();
        let ng = self.ng(log_probs.0);
        Ok(self.push(
            vec![],
            vec![nll],
            Op::Ctc {
                log_probs: log_probs.0,
                grad,
            },
            ng,
        ))
    }

    /// Sum of the flat entries `idx` of `a`.
    pub fn select_sum(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::invalid(format!("index {bad} out of range")));
        }
        let s = idx.iter().map(|&i| x[i]).sum();
        let ng = self.ng(a.0);
        Ok(self.push(
            vec![],
            vec![s],
            Op::SelectSum {
                a: a.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Per-segment softmax pooling: each `[s, e)` in `segments` becomes
    /// `Σ_t softmax_t(mu·(1 − blank_t)) · states_t`.
    pub fn segment_pool(
        &mut self,
        states: Var,
        blank: Var,
        segments: &[(usize, usize)],
        mu: F,
    ) -> Result<Var> {
        let t = self.check_pool(states, segments)?;
        if self.value(blank).len() != t {
            return Err(Error::Shape {
                op: "segment_pool",
                lhs: self.shape(states).to_vec(),
                rhs: self.shape(blank).to_vec(),
            });
        }
        let weights = crate::shrink::segment_weights(self.value(blank), segments, mu);
        let ng = self.ng(states.0) || self.ng(blank.0);
        Ok(self.pool_with(states, Some(blank.0), segments, mu, weights, ng))
    }

    /// Per-segment pooling with fixed weights (no gradient to the weights).
    pub fn segment_pool_fixed(
        &mut self,
        states: Var,
        segments: &[(usize, usize)],
        weights: Vec<F>,
    ) -> Result<Var> {
        let t = self.check_pool(states, segments)?;
        if weights.len() != t {
            return Err(Error::Shape {
                op: "segment_pool_fixed",
                lhs: vec![t],
                rhs: vec![weights.len()],
            });
        }
        let ng = self.ng(states.0);
        Ok(self.pool_with(states, None, segments, F::zero(), weights, ng))
    }

    fn check_pool(&self, states: Var, segments: &[(usize, usize)]) -> Result<usize> {
        let s = self.shape(states);
        if s.len() != 2 {
            return Err(Error::invalid("segment pooling needs 2-D states"));
        }
        let t = s[0];
        if segments.is_empty() {
            return Err(Error::Empty("no segments"));
        }
        for &(a, b) in segments {
            if a >= b || b > t {
                return Err(Error::invalid(format!(
                    "segment [{a}, {b}) invalid for {t} frames"
                )));
            }
        }
        Ok(t)
    }

    fn pool_with(
        &mut self,
        states: Var,
        blank: Option<usize>,
        segments: &[(usize, usize)],
        mu: F,
        weights: Vec<F>,
        ng: bool,
    ) -> Var {
        let d = self.shape(states)[1];
        let value = crate::shrink::pool_rows(self.value(states), d, segments, &weights);
        self.push(
            vec![segments.len(), d],
            value,
            Op::SegmentPool {
                states: states.0,
                blank,
                segments: segments.to_vec(),
                mu,
                weights,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.nodes[loss.0].shape.clone(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass whose parameter gradients accumulate into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store);
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let len = |i: usize| nodes[i].value.len();
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.ng(a) {
                    let da = kernels::matmul_bt(g, &nodes[b].value, m, n, k);
                    kernels::add_in_place(acc(grads, a, m * k), &da);
                }
                if self.ng(b) {
                    kernels::matmul_at_acc(&nodes[a].value, g, m, k, n, acc(grads, b, k * n));
                }
            }
            &Op::Add { a, b } => {
                for x in [a, b] {
                    if self.ng(x) {
                        kernels::add_in_place(acc(grads, x, g.len()), g);
                    }
                }
            }
            &Op::AddRow { a, bias } => {
                if self.ng(a) {
                    kernels::add_in_place(acc(grads, a, g.len()), g);
                }
                if self.ng(bias) {
                    let n = len(bias);
                    let db = acc(grads, bias, n);
                    for row in g.chunks(n) {
                        kernels::add_in_place(db, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.ng(a) {
                    let da = acc(grads, a, g.len());
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&nodes[b].value) {
                        *d += gv * bv;
                    }
                }
                if self.ng(b) {
                    let db = acc(grads, b, g.len());
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&nodes[a].value) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale { a, c } => {
                let da = acc(grads, a, g.len());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::MulConst { a, c } => {
                let da = acc(grads, *a, g.len());
                for ((d, &gv), &cv) in da.iter_mut().zip(g).zip(c) {
                    *d += gv * cv;
                }
            }
            &Op::Relu { a } => {
                let da = acc(grads, a, g.len());
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(&node.value) {
                    if y > F::zero() {
                        *d += gv;
                    }
                }
            }
            &Op::Sum { a } => {
                let da = acc(grads, a, len(a));
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean { a } => {
                let n = len(a);
                let s = g[0] / F::of(n as f64);
                acc(grads, a, n).iter_mut().for_each(|d| *d += s);
            }
            &Op::Softmax { a, outer, n, inner } => {
                let y = &node.value;
                let da = acc(grads, a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dotp: F = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            da[idx(j)] += y[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a, outer, n, inner } => {
                let y = &node.value;
                let da = acc(grads, a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gs: F = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            da[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = len(gain);
                let gv = &nodes[gain].value;
                let dn = F::of(d as f64);
                if self.ng(x) {
                    let dx = acc(grads, x, g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] += rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
                if self.ng(gain) {
                    let dg = acc(grads, gain, d);
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gv * h;
                    }
                }
                if self.ng(bias) {
                    let db = acc(grads, bias, d);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mq,
                mk,
                heads,
                probs,
            } => {
                let (q, k, v, mq, mk, heads) = (*q, *k, *v, *mq, *mk, *heads);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = F::one() / F::of(dh as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
                let mut dq = vec![F::zero(); mq * d];
                let mut dk = vec![F::zero(); mk * d];
                let mut dv = vec![F::zero(); mk * d];
                let mut ds = vec![F::zero(); mk];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..mq {
                        let p = &probs[(h * mq + i) * mk..(h * mq + i + 1) * mk];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut dotp = F::zero();
                        for j in 0..mk {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            let dp = kernels::dot(gi, vj);
                            ds[j] = dp;
                            dotp += dp * p[j];
                            if p[j] != F::zero() {
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (a, &b) in dvj.iter_mut().zip(gi) {
                                    *a += p[j] * b;
                                }
                            }
                        }
                        for j in 0..mk {
                            let s = p[j] * (ds[j] - dotp) * scale;
                            if s == F::zero() {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += s * kv[j * d + off + c];
                                dk[j * d + off + c] += s * qv[i * d + off + c];
                            }
                        }
                    }
                }
                for (x, dx) in [(q, dq), (k, dk), (v, dv)] {
                    if self.ng(x) {
                        kernels::add_in_place(acc(grads, x, dx.len()), &dx);
                    }
                }
            }
            &Op::Conv {
                x,
                kernel,
                bias,
                t_in,
                geom,
            } => {
                let co = geom.c_out;
                let ci = geom.c_in;
                let t_out = node.shape[0];
                if self.ng(bias) {
                    let db = acc(grads, bias, co);
                    for row in g.chunks(co) {
                        kernels::add_in_place(db, row);
                    }
                }
                if self.ng(kernel) {
                    let xv = &nodes[x].value;
                    let dk = acc(grads, kernel, geom.width * ci * co);
                    for t in 0..t_out {
                        let gr = &g[t * co..(t + 1) * co];
                        for w in 0..geom.width {
                            let Some(i) = geom.tap(t, w, t_in) else { continue };
                            for c in 0..ci {
                                let xval = xv[i * ci + c];
                                if xval == F::zero() {
                                    continue;
                                }
                                let krow = &mut dk[(w * ci + c) * co..(w * ci + c + 1) * co];
                                for (a, &b) in krow.iter_mut().zip(gr) {
                                    *a += xval * b;
                                }
                            }
                        }
                    }
                }
                if self.ng(x) {
                    let kv = &nodes[kernel].value;
                    let dx = acc(grads, x, t_in * ci);
                    for t in 0..t_out {
                        let gr = &g[t * co..(t + 1) * co];
                        for w in 0..geom.width {
                            let Some(i) = geom.tap(t, w, t_in) else { continue };
                            for c in 0..ci {
                                let krow = &kv[(w * ci + c) * co..(w * ci + c + 1) * co];
                                dx[i * ci + c] += kernels::dot(krow, gr);
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                let dt = acc(grads, *table, len(*table));
                for (r, &i) in ids.iter().enumerate() {
                    kernels::add_in_place(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            &Op::Rows { a, start } => {
                let d = node.shape[1];
                let da = acc(grads, a, len(a));
                kernels::add_in_place(&mut da[start * d..start * d + g.len()], g);
            }
            &Op::Column { a, col, cols } => {
                let da = acc(grads, a, len(a));
                for (i, &gv) in g.iter().enumerate() {
                    da[i * cols + col] += gv;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = nodes[*logits].shape[1];
                let s = g[0] / F::of(*count as f64);
                let dl = acc(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        dl[i * v + j] += s * probs[i * v + j];
                    }
                    dl[i * v + t] -= s;
                }
            }
            Op::Ctc { log_probs, grad } => {
                let dl = acc(grads, *log_probs, grad.len());
                for (d, &gv) in dl.iter_mut().zip(grad) {
                    *d += gv * g[0];
                }
            }
            Op::SelectSum { a, idx } => {
                let da = acc(grads, *a, len(*a));
                for &i in idx {
                    da[i] += g[0];
                }
            }
            Op::SegmentPool {
                states,
                blank,
                segments,
                mu,
                weights,
            } => {
                let d = node.shape[1];
                let hv = &nodes[*states].value;
                if self.ng(*states) {
                    let dh = acc(grads, *states, hv.len());
                    for (si, &(a, b)) in segments.iter().enumerate() {
                        let gs = &g[si * d..(si + 1) * d];
                        for t in a..b {
                            let w = weights[t];
                            for (x, &gv) in dh[t * d..(t + 1) * d].iter_mut().zip(gs) {
                                *x += w * gv;
                            }
                        }
                    }
                }
                if let Some(bl) = *blank {
                    if self.ng(bl) {
                        let db = acc(grads, bl, weights.len());
                        for (si, &(a, b)) in segments.iter().enumerate() {
                            let gs = &g[si * d..(si + 1) * d];
                            let dw: Vec<F> = (a..b)
                                .map(|t| kernels::dot(gs, &hv[t * d..(t + 1) * d]))
                                .collect();
                            let mean: F = (a..b).map(|t| weights[t] * dw[t - a]).sum();
                            for t in a..b {
                                let dlogit = weights[t] * (dw[t - a] - mean);
                                db[t] -= *mu * dlogit;
                            }
                        }
                    }
                }
            }
        }
    }
}
