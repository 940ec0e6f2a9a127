use rand::{Rng, RngCore};

use crate::error::Result;
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// One forward pass on a fresh tape, binding each parameter at most once.
pub(crate) struct Fwd<'a, 'r> {
    pub tape: Tape<f32>,
    store: &'a ParamStore<f32>,
    bound: Vec<Option<Var>>,
    dropout: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'a, 'r> Fwd<'a, 'r> {
    /// Dropout is active only when `rng` is given.
    pub fn new(store: &'a ParamStore<f32>, dropout: f64, rng: Option<&'r mut dyn RngCore>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout,
            rng,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }

    /// Adds fixed sinusoidal encodings for positions `0..rows`.
    pub fn add_positions(&mut self, x: Var) -> Result<Var> {
        let (m, d) = (self.tape.shape(x)[0], self.tape.shape(x)[1]);
        let pe: Vec<f32> = (0..m).flat_map(|p| kernels::position_encoding::<f32>(p, d)).collect();
        let c = self.tape.constant(vec![m, d], pe)?;
        self.tape.add(x, c)
    }
}

fn data(s: &ParamStore<f32>, id: ParamId) -> &[f32] {
    s.get(id).data()
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(s: &mut ParamStore<f32>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = s.add(format!("{name}.w"), Tensor::uniform_fan_in(vec![d_in, d_out], d_in, rng));
        let b = s.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.tape.matmul(x, w)?;
        f.tape.add_row(y, b)
    }

    pub fn rows(&self, s: &ParamStore<f32>, x: &[f32]) -> Vec<f32> {
        let m = x.len() / self.d_in;
        let mut y = kernels::matmul(x, data(s, self.w), m, self.d_in, self.d_out);
        kernels::add_bias(&mut y, data(s, self.b));
        y
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    pub fn new(s: &mut ParamStore<f32>, name: &str, d: usize) -> Self {
        let g = s.add(format!("{name}.g"), Tensor::new(vec![d], vec![1.0; d]).expect("shape"));
        let b = s.add(format!("{name}.b"), Tensor::zeros(vec![d]));
        Self { g, b }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.g), f.p(self.b));
        f.tape.layer_norm(x, g, b)
    }

    pub fn rows(&self, s: &ParamStore<f32>, x: &[f32]) -> Vec<f32> {
        kernels::layer_norm(x, data(s, self.g), data(s, self.b)).0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(s: &mut ParamStore<f32>, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(s, &format!("{name}.l1"), d, d_ff, rng),
            l2: Linear::new(s, &format!("{name}.l2"), d_ff, d, rng),
        }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.l1.tape(f, x)?;
        let h = f.tape.relu(h);
        self.l2.tape(f, h)
    }

    pub fn rows(&self, s: &ParamStore<f32>, x: &[f32]) -> Vec<f32> {
        let mut h = self.l1.rows(s, x);
        kernels::relu_in_place(&mut h);
        self.l2.rows(s, &h)
    }
}

/// Keys and values seen so far by one attention layer.
#[derive(Debug, Clone, Default)]
pub(crate) struct KvCache {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d: usize,
}

impl MultiHead {
    pub fn new(s: &mut ParamStore<f32>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(s, &format!("{name}.q"), d, d, rng),
            k: Linear::new(s, &format!("{name}.k"), d, d, rng),
            v: Linear::new(s, &format!("{name}.v"), d, d, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var, mem: Var, mask: &[bool]) -> Result<Var> {
        let q = self.q.tape(f, x)?;
        let k = self.k.tape(f, mem)?;
        let v = self.v.tape(f, mem)?;
        let a = f.tape.attention(q, k, v, mask, self.heads)?;
        self.o.tape(f, a)
    }

    /// Projects memory rows to keys and values and appends them to `cache`.
    pub fn extend_cache(&self, s: &ParamStore<f32>, cache: &mut KvCache, mem: &[f32]) {
        cache.k.extend(self.k.rows(s, mem));
        cache.v.extend(self.v.rows(s, mem));
        cache.len += mem.len() / self.d;
    }

    /// Attention of new query rows over the first `keys` cached entries.
    /// Query `i` sees key `j` iff `allowed(i, j)`.
    pub fn attend(
        &self,
        s: &ParamStore<f32>,
        x: &[f32],
        cache: &KvCache,
        keys: usize,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Vec<f32> {
        let m = x.len() / self.d;
        let q = self.q.rows(s, x);
        let (a, _) = kernels::attention(
            &q,
            &cache.k[..keys * self.d],
            &cache.v[..keys * self.d],
            m,
            keys,
            self.d,
            self.heads,
            allowed,
        );
        self.o.rows(s, &a)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    ln1: Norm,
    attn: MultiHead,
    ln2: Norm,
    ff: FeedForward,
    d: usize,
}

pub(crate) fn causal_mask(m: usize) -> Vec<bool> {
    (0..m * m).map(|x| x % m <= x / m).collect()
}

impl EncoderLayer {
    pub fn new(s: &mut ParamStore<f32>, name: &str, d: usize, heads: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: Norm::new(s, &format!("{name}.ln1"), d),
            attn: MultiHead::new(s, &format!("{name}.attn"), d, heads, rng),
            ln2: Norm::new(s, &format!("{name}.ln2"), d),
            ff: FeedForward::new(s, &format!("{name}.ff"), d, d_ff, rng),
            d,
        }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var, causal: bool) -> Result<Var> {
        let m = f.tape.shape(x)[0];
        let mask = if causal { causal_mask(m) } else { vec![true; m * m] };
        let h = self.ln1.tape(f, x)?;
        let a = self.attn.tape(f, h, h, &mask)?;
        let a = f.dropout(a)?;
        let x = f.tape.add(x, a)?;
        let h = self.ln2.tape(f, x)?;
        let y = self.ff.tape(f, h)?;
        let y = f.dropout(y)?;
        f.tape.add(x, y)
    }

    /// Processes rows appended after those already in `cache`. With
    /// `causal` false the call must cover the whole sequence at once.
    pub fn rows(&self, s: &ParamStore<f32>, cache: &mut KvCache, x: &[f32], causal: bool) -> Vec<f32> {
        let off = cache.len;
        let h = self.ln1.rows(s, x);
        self.attn.extend_cache(s, cache, &h);
        let keys = cache.len;
        let a = self.attn.attend(s, &h, cache, keys, |i, j| !causal || j <= off + i);
        let mut x = x.to_vec();
        kernels::add_in_place(&mut x, &a);
        let y = self.ff.rows(s, &self.ln2.rows(s, &x));
        kernels::add_in_place(&mut x, &y);
        debug_assert_eq!(x.len() % self.d, 0);
        x
    }
}

/// Pre-norm decoder block: causal self-attention, masked cross-attention
/// and a feed-forward layer.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    ln1: Norm,
    self_attn: MultiHead,
    ln2: Norm,
    cross: MultiHead,
    ln3: Norm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(s: &mut ParamStore<f32>, name: &str, d: usize, heads: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: Norm::new(s, &format!("{name}.ln1"), d),
            self_attn: MultiHead::new(s, &format!("{name}.self"), d, heads, rng),
            ln2: Norm::new(s, &format!("{name}.ln2"), d),
            cross: MultiHead::new(s, &format!("{name}.cross"), d, heads, rng),
            ln3: Norm::new(s, &format!("{name}.ln3"), d),
            ff: FeedForward::new(s, &format!("{name}.ff"), d, d_ff, rng),
        }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var, mem: Var, cross_mask: &[bool]) -> Result<Var> {
        let m = f.tape.shape(x)[0];
        let h = self.ln1.tape(f, x)?;
        let a = self.self_attn.tape(f, h, h, &causal_mask(m))?;
        let a = f.dropout(a)?;
        let x = f.tape.add(x, a)?;
        let h = self.ln2.tape(f, x)?;
        let c = self.cross.tape(f, h, mem, cross_mask)?;
        let c = f.dropout(c)?;
        let x = f.tape.add(x, c)?;
        let h = self.ln3.tape(f, x)?;
        let y = self.ff.tape(f, h)?;
        let y = f.dropout(y)?;
        f.tape.add(x, y)
    }

    pub fn extend_memory(&self, s: &ParamStore<f32>, cache: &mut KvCache, mem: &[f32]) {
        self.cross.extend_cache(s, cache, mem);
    }

    /// One new target row attending its own history and the first
    /// `visible` memory rows.
    pub fn step(
        &self,
        s: &ParamStore<f32>,
        self_cache: &mut KvCache,
        memory: &KvCache,
        visible: usize,
        x: &[f32],
    ) -> Vec<f32> {
        let h = self.ln1.rows(s, x);
        self.self_attn.extend_cache(s, self_cache, &h);
        let keys = self_cache.len;
        let a = self.self_attn.attend(s, &h, self_cache, keys, |_, _| true);
        let mut x = x.to_vec();
        kernels::add_in_place(&mut x, &a);
        let h = self.ln2.rows(s, &x);
        let c = self.cross.attend(s, &h, memory, visible, |_, _| true);
        kernels::add_in_place(&mut x, &c);
        let y = self.ff.rows(s, &self.ln3.rows(s, &x));
        kernels::add_in_place(&mut x, &y);
        x
    }
}

/// Conv layer with ReLU; stride-1 convs that keep the width add a residual.
#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    pub geom: ConvGeom,
    residual: bool,
}

impl ConvLayer {
    pub fn new(s: &mut ParamStore<f32>, name: &str, geom: ConvGeom, rng: &mut impl Rng) -> Self {
        let fan_in = geom.width * geom.c_in;
        let kernel = s.add(
            format!("{name}.kernel"),
            Tensor::uniform_fan_in(vec![geom.width, geom.c_in, geom.c_out], fan_in, rng),
        );
        let bias = s.add(format!("{name}.b"), Tensor::zeros(vec![geom.c_out]));
        let residual = geom.stride == 1 && geom.c_in == geom.c_out;
        Self { kernel, bias, geom, residual }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (k, b) = (f.p(self.kernel), f.p(self.bias));
        let y = f.tape.conv1d(x, k, b, self.geom.stride, self.geom.lookahead)?;
        let y = f.tape.relu(y);
        if self.residual {
            f.tape.add(x, y)
        } else {
            Ok(y)
        }
    }

    /// Output frames `[t0, t1)` given the first `t_in` input frames.
    pub fn rows(&self, s: &ParamStore<f32>, x: &[f32], t_in: usize, t0: usize, t1: usize) -> Vec<f32> {
        let g = self.geom;
        let mut y = kernels::conv1d_rows(x, t_in, data(s, self.kernel), data(s, self.bias), g, t0, t1);
        kernels::relu_in_place(&mut y);
        if self.residual {
            let mut r = x[t0 * g.c_in..t1 * g.c_in].to_vec();
            kernels::add_in_place(&mut r, &y);
            y = r;
        }
        y
    }

    /// Output frames computable from `avail` input frames, or all of them
    /// once the input has ended.
    pub fn ready(&self, avail: usize, ended: bool) -> usize {
        let g = self.geom;
        if ended {
            g.out_len(avail)
        } else if avail > g.lookahead {
            ((avail - 1 - g.lookahead) / g.stride + 1).min(g.out_len(avail))
        } else {
            0
        }
    }
}
