//! Layers with explicit forward and backward passes.
//!
//! Sequence batches are stored time-major as `[steps * batch, width]`, so row
//! `t * batch + b` holds step `t` of sequence `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{Float, Grads, ParamId, ParamStore};

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `c += a^T b`
fn add_at_b<F: Float>(c: &mut Array2<F>, a: &ArrayView2<F>, b: &ArrayView2<F>) {
    general_mat_mul(F::one(), &a.t(), b, F::one(), c);
}

fn add_col_sums<F: Float>(g: &mut Array2<F>, dy: &ArrayView2<F>) {
    let sums = dy.sum_axis(Axis(0));
    g.row_mut(0).zip_mut_with(&sums, |a, &b| *a += b);
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_uniform(format!("{name}.w"), input, output, input, rng),
            b: store.add_const(format!("{name}.b"), 1, output, 0.0),
            input,
            output,
        }
    }

    pub fn forward<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>) -> Array2<F> {
        x.dot(p.get(self.w)) + p.get(self.b)
    }

    pub fn backward<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>, dy: &ArrayView2<F>, g: &mut Grads<F>) -> Array2<F> {
        add_at_b(g.get_mut(self.w), x, dy);
        add_col_sums(g.get_mut(self.b), dy);
        dy.dot(&p.get(self.w).t())
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: store.add_uniform(format!("{name}.table"), rows, dim, 1, rng),
            rows,
            dim,
        }
    }

    fn row(&self, index: usize) -> usize {
        index.min(self.rows - 1)
    }

    pub fn forward<F: Float>(&self, p: &ParamStore<F>, indices: &[usize]) -> Array2<F> {
        let table = p.get(self.table);
        let mut out = Array2::zeros((indices.len(), self.dim));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            row.assign(&table.row(self.row(i)));
        }
        out
    }

    pub fn backward<F: Float>(&self, indices: &[usize], dy: &ArrayView2<F>, g: &mut Grads<F>) {
        let table = g.get_mut(self.table);
        for (row, &i) in dy.rows().into_iter().zip(indices) {
            table.row_mut(self.row(i)).zip_mut_with(&row, |a, &b| *a += b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_const(format!("{name}.bias"), 1, dim, 0.0),
            dim,
        }
    }

    pub fn forward<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let n = F::of(self.dim as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            *s = F::one() / (var + eps).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| v * inv);
        }
        let y = &xhat * p.get(self.gain) + p.get(self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<F: Float>(&self, p: &ParamStore<F>, cache: &LayerNormCache<F>, dy: &ArrayView2<F>, g: &mut Grads<F>) -> Array2<F> {
        let prod = dy * &cache.xhat;
        add_col_sums(g.get_mut(self.gain), &prod.view());
        add_col_sums(g.get_mut(self.bias), dy);
        let n = F::of(self.dim as f64);
        let mut dx = dy * p.get(self.gain);
        for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let sum = row.sum();
            let dot = row.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut row).and(&xhat).for_each(|d, &h| {
                *d = inv * (*d - sum / n - h * dot / n);
            });
        }
        dx
    }
}

/// Inverted dropout. Returns the scaled mask applied, if any.
pub fn dropout<F: Float, R: Rng>(x: Array2<F>, rate: f64, rng: Option<&mut R>) -> (Array2<F>, Option<Array2<F>>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = F::of(1.0 / (1.0 - rate));
            let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < rate { F::zero() } else { keep });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

pub fn dropout_backward<F: Float>(dy: Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

/// Single-direction LSTM with gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct LstmCache<F> {
    x: Array2<F>,
    gates: Array2<F>,
    c: Array2<F>,
    h: Array2<F>,
    steps: usize,
    batch: usize,
}

/// Recurrent state for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub h: Array2<F>,
    pub c: Array2<F>,
}

impl<F: Float> LstmState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Array2::zeros((batch, hidden)),
            c: Array2::zeros((batch, hidden)),
        }
    }
}

impl Lstm {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = store.add_uniform(format!("{name}.wx"), input, 4 * hidden, hidden, rng);
        let wh = store.add_uniform(format!("{name}.wh"), hidden, 4 * hidden, hidden, rng);
        let mut bias = Array2::zeros((1, 4 * hidden));
        bias.slice_mut(s![.., hidden..2 * hidden]).fill(F::one());
        let b = store.add(format!("{name}.b"), bias);
        Self { wx, wh, b, input, hidden }
    }

    /// Applies the gate nonlinearities and the cell update to `z` in place.
    fn cell<F: Float>(&self, z: &mut Array2<F>, state: &mut LstmState<F>) {
        let h = self.hidden;
        for ((mut zr, mut cr), mut hr) in z.rows_mut().into_iter().zip(state.c.rows_mut()).zip(state.h.rows_mut()) {
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let g = zr[2 * h + j].tanh();
                let o = sigmoid(zr[3 * h + j]);
                zr[j] = i;
                zr[h + j] = f;
                zr[2 * h + j] = g;
                zr[3 * h + j] = o;
                cr[j] = f * cr[j] + i * g;
                hr[j] = o * cr[j].tanh();
            }
        }
    }

    /// Advances `state` by one step for each row of `x`.
    pub fn step<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>, state: &mut LstmState<F>) {
        let mut z = x.dot(p.get(self.wx)) + p.get(self.b);
        general_mat_mul(F::one(), &state.h, p.get(self.wh), F::one(), &mut z);
        self.cell(&mut z, state);
    }

    pub fn forward<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>, steps: usize, batch: usize) -> (Array2<F>, LstmCache<F>) {
        let n = steps * batch;
        let hd = self.hidden;
        let mut gates = x.dot(p.get(self.wx)) + p.get(self.b);
        let mut c = Array2::zeros((n, hd));
        let mut h = Array2::zeros((n, hd));
        let mut state = LstmState::zeros(batch, hd);
        for t in 0..steps {
            let rows = t * batch..(t + 1) * batch;
            let mut z = gates.slice(s![rows.clone(), ..]).to_owned();
            general_mat_mul(F::one(), &state.h, p.get(self.wh), F::one(), &mut z);
            self.cell(&mut z, &mut state);
            gates.slice_mut(s![rows.clone(), ..]).assign(&z);
            c.slice_mut(s![rows.clone(), ..]).assign(&state.c);
            h.slice_mut(s![rows, ..]).assign(&state.h);
        }
        let out = h.clone();
        (
            out,
            LstmCache {
                x: x.to_owned(),
                gates,
                c,
                h,
                steps,
                batch,
            },
        )
    }

    pub fn backward<F: Float>(&self, p: &ParamStore<F>, cache: &LstmCache<F>, dh: &ArrayView2<F>, g: &mut Grads<F>) -> Array2<F> {
        let (steps, batch, hd) = (cache.steps, cache.batch, self.hidden);
        let one = F::one();
        let wh = p.get(self.wh);
        let mut dz = Array2::zeros(cache.gates.raw_dim());
        let mut dh_next: Array2<F> = Array2::zeros((batch, hd));
        let mut dc_next: Array2<F> = Array2::zeros((batch, hd));
        let zero_state = Array2::zeros((batch, hd));
        for t in (0..steps).rev() {
            let rows = t * batch..(t + 1) * batch;
            let c_prev = if t == 0 {
                zero_state.view()
            } else {
                cache.c.slice(s![(t - 1) * batch..t * batch, ..])
            };
            let c_t = cache.c.slice(s![rows.clone(), ..]);
            let gates = cache.gates.slice(s![rows.clone(), ..]);
            let dh_t = &dh.slice(s![rows.clone(), ..]) + &dh_next;
            let mut dz_t = dz.slice_mut(s![rows, ..]);
            for b in 0..batch {
                for j in 0..hd {
                    let (i, f, gg, o) = (gates[[b, j]], gates[[b, hd + j]], gates[[b, 2 * hd + j]], gates[[b, 3 * hd + j]]);
                    let tc = c_t[[b, j]].tanh();
                    let dht = dh_t[[b, j]];
                    let dc = dc_next[[b, j]] + dht * o * (one - tc * tc);
                    dz_t[[b, j]] = dc * gg * i * (one - i);
                    dz_t[[b, hd + j]] = dc * c_prev[[b, j]] * f * (one - f);
                    dz_t[[b, 2 * hd + j]] = dc * i * (one - gg * gg);
                    dz_t[[b, 3 * hd + j]] = dht * tc * o * (one - o);
                    dc_next[[b, j]] = dc * f;
                }
            }
            dh_next = dz_t.dot(&wh.t());
        }
        add_at_b(g.get_mut(self.wx), &cache.x.view(), &dz.view());
        if steps > 1 {
            add_at_b(
                g.get_mut(self.wh),
                &cache.h.slice(s![..(steps - 1) * batch, ..]),
                &dz.slice(s![batch.., ..]),
            );
        }
        add_col_sums(g.get_mut(self.b), &dz.view());
        dz.dot(&p.get(self.wx).t())
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    ctx: Array2<F>,
    /// Softmax weights per `(sequence, head)`, restricted to valid steps.
    probs: Vec<Array2<F>>,
    batch: usize,
    lengths: Vec<usize>,
}

impl Attention {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale<F: Float>(&self) -> F {
        F::of(1.0 / (self.head_dim() as f64).sqrt())
    }

    /// Row-wise softmax of `scores`, with entries above the diagonal excluded
    /// when `causal`.
    fn softmax_rows<F: Float>(scores: &mut Array2<F>, causal: bool) {
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let limit = if causal { i + 1 } else { row.len() };
            let max = row.iter().take(limit).fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j < limit { (*v - max).exp() } else { F::zero() };
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
    }

    /// `lengths[b]` is the number of valid steps of sequence `b`; padded
    /// steps are neither attended to nor attend (their context is zero).
    pub fn forward<F: Float>(
        &self,
        p: &ParamStore<F>,
        x: &ArrayView2<F>,
        batch: usize,
        lengths: &[usize],
        causal: bool,
    ) -> (Array2<F>, AttentionCache<F>) {
        let (q, k, v) = (self.q.forward(p, x), self.k.forward(p, x), self.v.forward(p, x));
        let dh = self.head_dim();
        let scale: F = self.scale();
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(batch * self.heads);
        for (b, &len) in lengths.iter().enumerate() {
            if len == 0 {
                continue;
            }
            let rows = s![b..=b + (len - 1) * batch; batch, ..];
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(rows).slice_move(s![.., cols.clone()]);
                let kh = k.slice(rows).slice_move(s![.., cols.clone()]);
                let vh = v.slice(rows).slice_move(s![.., cols.clone()]);
                let mut att = qh.dot(&kh.t()) * scale;
                Self::softmax_rows(&mut att, causal);
                ctx.slice_mut(rows).slice_mut(s![.., cols]).assign(&att.dot(&vh));
                probs.push(att);
            }
        }
        let y = self.o.forward(p, &ctx.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                q,
                k,
                v,
                ctx,
                probs,
                batch,
                lengths: lengths.to_vec(),
            },
        )
    }

    pub fn backward<F: Float>(&self, p: &ParamStore<F>, cache: &AttentionCache<F>, dy: &ArrayView2<F>, g: &mut Grads<F>) -> Array2<F> {
        let dctx = self.o.backward(p, &cache.ctx.view(), dy, g);
        let dh = self.head_dim();
        let scale: F = self.scale();
        let batch = cache.batch;
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let mut probs = cache.probs.iter();
        for (b, &len) in cache.lengths.iter().enumerate() {
            if len == 0 {
                continue;
            }
            let rows = s![b..=b + (len - 1) * batch; batch, ..];
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let att = probs.next().expect("one softmax per head");
                let qh = cache.q.slice(rows).slice_move(s![.., cols.clone()]);
                let kh = cache.k.slice(rows).slice_move(s![.., cols.clone()]);
                let vh = cache.v.slice(rows).slice_move(s![.., cols.clone()]);
                let dc = dctx.slice(rows).slice_move(s![.., cols.clone()]);
                let mut datt = dc.dot(&vh.t());
                for (mut drow, prow) in datt.rows_mut().into_iter().zip(att.rows()) {
                    let dot = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum::<F>();
                    Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot) * scale);
                }
                dq.slice_mut(rows).slice_mut(s![.., cols.clone()]).assign(&datt.dot(&kh));
                dk.slice_mut(rows).slice_mut(s![.., cols.clone()]).assign(&datt.t().dot(&qh));
                dv.slice_mut(rows).slice_mut(s![.., cols]).assign(&att.t().dot(&dc));
            }
        }
        let x = cache.x.view();
        let mut dx = self.q.backward(p, &x, &dq.view(), g);
        dx += &self.k.backward(p, &x, &dk.view(), g);
        dx += &self.v.backward(p, &x, &dv.view(), g);
        dx
    }
}

/// Key/value history of one attention layer for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    keys: Vec<Array1<F>>,
    values: Vec<Array1<F>>,
}

impl<F: Float> Default for KvCache<F> {
    fn default() -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<F: Float> KvCache<F> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn clear(&mut self) {
        self.keys.clear();
        self.values.clear();
    }
}

impl Attention {
    /// Causal attention for one new step, appending its key and value.
    pub fn step<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>, cache: &mut KvCache<F>) -> Array2<F> {
        let q = self.q.forward(p, x);
        cache.keys.push(self.k.forward(p, x).row(0).to_owned());
        cache.values.push(self.v.forward(p, x).row(0).to_owned());
        let n = cache.len();
        let dh = self.head_dim();
        let scale: F = self.scale();
        let mut keys = Array2::zeros((n, self.dim));
        let mut values = Array2::zeros((n, self.dim));
        for (i, (k, v)) in cache.keys.iter().zip(&cache.values).enumerate() {
            keys.row_mut(i).assign(k);
            values.row_mut(i).assign(v);
        }
        let mut ctx = Array2::zeros((1, self.dim));
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let mut att = qh.dot(&keys.slice(s![.., cols.clone()]).t()) * scale;
            Self::softmax_rows(&mut att, false);
            ctx.slice_mut(s![.., cols.clone()]).assign(&att.dot(&values.slice(s![.., cols])));
        }
        self.o.forward(p, &ctx.view())
    }
}

/// Two-layer position-wise network with a ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<F> {
    x: Array2<F>,
    hidden: Array2<F>,
}

impl FeedForward {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, inner: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, inner, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, dim, rng),
        }
    }

    pub fn forward<F: Float>(&self, p: &ParamStore<F>, x: &ArrayView2<F>) -> (Array2<F>, FeedForwardCache<F>) {
        let hidden = self.up.forward(p, x).mapv(|v| v.max(F::zero()));
        let y = self.down.forward(p, &hidden.view());
        (y, FeedForwardCache { x: x.to_owned(), hidden })
    }

    pub fn backward<F: Float>(&self, p: &ParamStore<F>, cache: &FeedForwardCache<F>, dy: &ArrayView2<F>, g: &mut Grads<F>) -> Array2<F> {
        let mut dh = self.down.backward(p, &cache.hidden.view(), dy, g);
        Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
            if h <= F::zero() {
                *d = F::zero();
            }
        });
        self.up.backward(p, &cache.x.view(), &dh.view(), g)
    }
}

/// Result of a masked softmax cross-entropy.
#[derive(Clone, Debug)]
pub struct CrossEntropy<F> {
    /// Mean loss over rows with a target.
    pub loss: F,
    /// Gradient of `loss` with respect to the logits.
    pub dlogits: Array2<F>,
    pub correct: usize,
    pub count: usize,
}

/// Rows whose target is `None` are ignored.
pub fn softmax_cross_entropy<F: Float>(logits: &ArrayView2<F>, targets: &[Option<usize>]) -> CrossEntropy<F> {
    let count = targets.iter().filter(|t| t.is_some()).count();
    let norm = F::of(count.max(1) as f64);
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = F::zero();
    let mut correct = 0;
    for ((row, mut drow), target) in logits.rows().into_iter().zip(dlogits.rows_mut()).zip(targets) {
        let Some(target) = *target else { continue };
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().map(|&v| (v - max).exp()).sum::<F>();
        loss += sum.ln() + max - row[target];
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - max).exp() / sum / norm;
        }
        drow[target] -= F::one() / norm;
        let best = crate::types::argmax(row.iter().map(|v| v.as_f64()));
        if best == target {
            correct += 1;
        }
    }
    CrossEntropy {
        loss: loss / norm,
        dlogits,
        correct,
        count,
    }
}
