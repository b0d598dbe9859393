//! Sequence labelers: LSTM, bidirectional LSTM and Transformer encoder and
//! decoder, all sharing one input encoder and one output head.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    dropout, dropout_backward, softmax_cross_entropy, Attention, AttentionCache, CrossEntropy, Embedding, FeedForward,
    FeedForwardCache, KvCache, LayerNorm, LayerNormCache, Linear, Lstm, LstmCache, LstmState,
};
use super::params::{Float, Grads, ParamStore};
use crate::error::{Error, Result};
use crate::features::{encode, parse_pairs, FeatureConfig, FeatureTensor, Hints, TimeColumns, TimeEncoding};
use crate::types::{argmax, Mixture, Prediction, MAX_PITCH};

/// Longest sequence processed in one piece at inference time.
pub const EVAL_WINDOW: usize = 2000;

/// Pitch hint offsets are clipped to this many octaves.
const PITCH_HINT_CLIP: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Causal: each label depends only on the notes so far.
    #[default]
    Online,
    Offline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Online => "online",
            Mode::Offline => "offline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "online" => Ok(Mode::Online),
            "offline" => Ok(Mode::Offline),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Arch {
    #[default]
    Lstm,
    BiLstm,
    TransformerEnc,
    TransformerDec,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Lstm, Arch::BiLstm, Arch::TransformerEnc, Arch::TransformerDec];

    pub fn mode(self) -> Mode {
        match self {
            Arch::Lstm | Arch::TransformerDec => Mode::Online,
            Arch::BiLstm | Arch::TransformerEnc => Mode::Offline,
        }
    }

    pub fn is_online(self) -> bool {
        self.mode() == Mode::Online
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Arch::TransformerEnc | Arch::TransformerDec)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::BiLstm => "bilstm",
            Arch::TransformerEnc => "transformer_enc",
            Arch::TransformerDec => "transformer_dec",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_parts: usize,
    /// Width of every hidden layer (both LSTM directions together).
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub features: FeatureConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Lstm,
            num_parts: 4,
            hidden: 128,
            layers: 3,
            heads: 8,
            ffn: 256,
            embed_dim: 16,
            dropout: 0.2,
            features: FeatureConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ModelConfig {
    pub fn new(arch: Arch, num_parts: usize) -> Self {
        Self {
            arch,
            num_parts,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.num_parts < 2 {
            return Err(Error::Config(format!("need at least two parts, got {}", self.num_parts)));
        }
        if self.hidden == 0 || self.layers == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.arch == Arch::BiLstm && self.hidden % 2 != 0 {
            return Err(Error::Config("bidirectional width must be even".into()));
        }
        if self.arch.is_transformer() && (self.heads == 0 || self.hidden % self.heads != 0 || self.ffn == 0) {
            return Err(Error::Config(format!(
                "width {} must split evenly over {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![
            ("arch", self.arch.to_string()),
            ("num_parts", self.num_parts.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("dropout", self.dropout.to_string()),
        ];
        pairs.extend(self.features.to_pairs());
        pairs
    }

    /// Applies one `key=value` setting, including feature keys. Returns
    /// `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "arch" => self.arch = value.parse()?,
            "num_parts" => self.num_parts = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ffn" => self.ffn = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            _ => return self.features.set(key, value),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (key, value) in parse_pairs(text)? {
            if !config.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key {key:?}")));
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn scalar_inputs(&self) -> usize {
        let f = &self.features;
        let emb = f.use_embeddings;
        let time = match f.time_encoding {
            TimeEncoding::RawTime => 1,
            TimeEncoding::RawBeatPosition => 2,
            TimeEncoding::TimeEmbedding => usize::from(!emb),
            TimeEncoding::BeatPositionEmbedding => 2 * usize::from(!emb),
        };
        let hints = self.num_parts * (usize::from(f.use_entry_hints) + usize::from(f.use_pitch_hints));
        1 + usize::from(!emb) + time + usize::from(f.use_duration && !emb) + hints
    }
}

/// Lookup indices of a time-major batch; padded rows use index 0.
#[derive(Clone, Debug, Default)]
struct Indices {
    pitch: Vec<usize>,
    time: Vec<usize>,
    beat: Vec<usize>,
    position: Vec<usize>,
    duration: Vec<usize>,
}

#[derive(Clone, Debug)]
struct InputEncoder {
    pitch: Option<Embedding>,
    time: Option<Embedding>,
    beat: Option<Embedding>,
    position: Option<Embedding>,
    duration: Option<Embedding>,
    scalars: usize,
    proj: Linear,
}

impl InputEncoder {
    fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, config: &ModelConfig, rng: &mut R) -> Self {
        let f = &config.features;
        let e = config.embed_dim;
        let emb = f.use_embeddings;
        let mut make = |on: bool, name: &str, rows: usize| on.then(|| Embedding::new(store, name, rows, e, rng));
        let pitch = make(emb, "input.pitch", MAX_PITCH as usize + 1);
        let time = make(
            emb && f.time_encoding == TimeEncoding::TimeEmbedding,
            "input.time",
            f.time_clip as usize + 1,
        );
        let beat_pos = emb && f.time_encoding == TimeEncoding::BeatPositionEmbedding;
        let beat = make(beat_pos, "input.beat", f.beat_clip as usize + 1);
        let position = make(beat_pos, "input.position", f.resolution as usize);
        let duration = make(emb && f.use_duration, "input.duration", f.duration_clip as usize + 1);
        let scalars = config.scalar_inputs();
        let tables = [&pitch, &time, &beat, &position, &duration].iter().filter(|t| t.is_some()).count();
        let proj = Linear::new(store, "input.proj", tables * e + scalars, config.hidden, rng);
        Self {
            pitch,
            time,
            beat,
            position,
            duration,
            scalars,
            proj,
        }
    }

    fn tables(&self) -> [(&Option<Embedding>, fn(&Indices) -> &Vec<usize>); 5] {
        [
            (&self.pitch, |i| &i.pitch),
            (&self.time, |i| &i.time),
            (&self.beat, |i| &i.beat),
            (&self.position, |i| &i.position),
            (&self.duration, |i| &i.duration),
        ]
    }

    /// Gathers lookups and scalar columns for a time-major batch.
    fn gather<F: Float>(&self, batch: &[&FeatureTensor], steps: usize, config: &ModelConfig) -> (Indices, Array2<F>) {
        let b = batch.len();
        let n = steps * b;
        let f = &config.features;
        let mut idx = Indices {
            pitch: vec![0; n],
            time: vec![0; n],
            beat: vec![0; n],
            position: vec![0; n],
            duration: vec![0; n],
        };
        let mut scalars = Array2::zeros((n, self.scalars));
        let k = config.num_parts;
        for (j, ft) in batch.iter().enumerate() {
            for t in 0..ft.len() {
                let r = t * b + j;
                let mut row = scalars.row_mut(r);
                let mut c = 0;
                let mut push = |v: f64| {
                    row[c] = F::of(v);
                    c += 1;
                };
                push(f64::from(ft.frequency[t]) / 440.0);
                idx.pitch[r] = ft.pitch[t] as usize;
                if self.pitch.is_none() {
                    push(f64::from(ft.pitch[t]) / f64::from(MAX_PITCH));
                }
                match &ft.time {
                    TimeColumns::RawTime(v) => push(f64::from(v[t])),
                    TimeColumns::RawBeatPosition(bt, p) => {
                        push(f64::from(bt[t]));
                        push(f64::from(p[t]));
                    }
                    TimeColumns::TimeIndex(v) => {
                        idx.time[r] = v[t] as usize;
                        if self.time.is_none() {
                            push(f64::from(v[t]) / f64::from(f.time_clip));
                        }
                    }
                    TimeColumns::BeatPositionIndex(bt, p) => {
                        idx.beat[r] = bt[t] as usize;
                        idx.position[r] = p[t] as usize;
                        if self.beat.is_none() {
                            push(f64::from(bt[t]) / f64::from(f.beat_clip));
                            push(f64::from(p[t]) / f64::from(f.resolution));
                        }
                    }
                }
                if let Some(d) = &ft.duration {
                    idx.duration[r] = d[t] as usize;
                    if self.duration.is_none() {
                        push(f64::from(d[t]) / f64::from(f.duration_clip));
                    }
                }
                if let Some(e) = &ft.entry_hints {
                    for part in 0..k {
                        push(f64::from(e[[t, part]]));
                    }
                }
                // Relative to the current note, in octaves, so "closest part"
                // is one comparison. Unused parts (mean 0) read 0.
                if let Some(p) = &ft.pitch_hints {
                    for part in 0..k {
                        let offset = if p[part] > 0.0 {
                            ((f64::from(p[part]) - f64::from(ft.pitch[t])) / 12.0).clamp(-PITCH_HINT_CLIP, PITCH_HINT_CLIP)
                        } else {
                            0.0
                        };
                        push(offset);
                    }
                }
                debug_assert_eq!(c, self.scalars);
            }
        }
        (idx, scalars)
    }

    fn concat<F: Float>(&self, p: &ParamStore<F>, idx: &Indices, scalars: &Array2<F>) -> Array2<F> {
        let mut parts: Vec<Array2<F>> = self
            .tables()
            .iter()
            .filter_map(|(table, field)| table.as_ref().map(|t| t.forward(p, field(idx))))
            .collect();
        parts.push(scalars.clone());
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        concatenate(Axis(1), &views).expect("rows agree")
    }

    fn backward<F: Float>(&self, idx: &Indices, dconcat: &Array2<F>, g: &mut Grads<F>) {
        let mut col = 0;
        for (table, field) in self.tables() {
            if let Some(t) = table {
                t.backward(field(idx), &dconcat.slice(s![.., col..col + t.dim]), g);
                col += t.dim;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Lstm { cell: Lstm, norm: LayerNorm },
    BiLstm { fwd: Lstm, bwd: Lstm, norm: LayerNorm },
    Block { ln1: LayerNorm, att: Attention, ln2: LayerNorm, ffn: FeedForward },
}

#[derive(Clone, Debug)]
enum LayerCache<F> {
    Lstm {
        cell: LstmCache<F>,
        norm: LayerNormCache<F>,
        mask: Option<Array2<F>>,
    },
    BiLstm {
        fwd: LstmCache<F>,
        bwd: LstmCache<F>,
        norm: LayerNormCache<F>,
        mask: Option<Array2<F>>,
    },
    Block {
        ln1: LayerNormCache<F>,
        att: AttentionCache<F>,
        mask1: Option<Array2<F>>,
        ln2: LayerNormCache<F>,
        ffn: FeedForwardCache<F>,
        mask2: Option<Array2<F>>,
    },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    steps: usize,
    lengths: Vec<usize>,
    indices: Indices,
    concat: Array2<F>,
    input_mask: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
    final_norm: Option<LayerNormCache<F>>,
    head_in: Array2<F>,
}

/// Row permutation reversing every sequence within its own length.
fn reversal(steps: usize, lengths: &[usize]) -> Vec<usize> {
    let b = lengths.len();
    let mut perm: Vec<usize> = (0..steps * b).collect();
    for (j, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            perm[t * b + j] = (len - 1 - t) * b + j;
        }
    }
    perm
}

fn permute_rows<F: Float>(x: &Array2<F>, perm: &[usize]) -> Array2<F> {
    x.select(Axis(0), perm)
}

/// Incremental inference state for the online architectures.
#[derive(Clone, Debug)]
pub struct OnlineState<F> {
    lstm: Vec<LstmState<F>>,
    kv: Vec<KvCache<F>>,
    seen: usize,
    window: usize,
}

impl<F> OnlineState<F> {
    pub fn notes_seen(&self) -> usize {
        self.seen
    }
}

/// Picks the best part, restricted to parts flagged in `allowed` when any
/// flag is set. Ties go to the lower part.
pub fn choose_part<F: Float>(scores: ArrayView1<F>, allowed: Option<ArrayView1<f32>>) -> usize {
    if let Some(allowed) = allowed {
        if allowed.iter().any(|&a| a > 0.5) {
            let masked = scores.iter().zip(allowed).map(|(&s, &a)| if a > 0.5 { s } else { F::neg_infinity() });
            return argmax(masked);
        }
    }
    argmax(scores.iter().copied())
}

#[derive(Clone, Debug)]
pub struct Model<F = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    input: InputEncoder,
    layers: Vec<Layer>,
    final_norm: Option<LayerNorm>,
    head: Linear,
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = InputEncoder::new(&mut store, &config, &mut rng);
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|i| match config.arch {
                Arch::Lstm => Layer::Lstm {
                    cell: Lstm::new(&mut store, &format!("lstm{i}"), h, h, &mut rng),
                    norm: LayerNorm::new(&mut store, &format!("lstm{i}.norm"), h),
                },
                Arch::BiLstm => Layer::BiLstm {
                    fwd: Lstm::new(&mut store, &format!("lstm{i}.fwd"), h, h / 2, &mut rng),
                    bwd: Lstm::new(&mut store, &format!("lstm{i}.bwd"), h, h / 2, &mut rng),
                    norm: LayerNorm::new(&mut store, &format!("lstm{i}.norm"), h),
                },
                Arch::TransformerEnc | Arch::TransformerDec => Layer::Block {
                    ln1: LayerNorm::new(&mut store, &format!("block{i}.ln1"), h),
                    att: Attention::new(&mut store, &format!("block{i}.att"), h, config.heads, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("block{i}.ln2"), h),
                    ffn: FeedForward::new(&mut store, &format!("block{i}.ffn"), h, config.ffn, &mut rng),
                },
            })
            .collect();
        let final_norm = config.arch.is_transformer().then(|| LayerNorm::new(&mut store, "final.norm", h));
        let head = Linear::new(&mut store, "head", h, config.num_parts, &mut rng);
        Ok(Self {
            config,
            params: store,
            input,
            layers,
            final_norm,
            head,
        })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config,
            params: self.params.cast(),
            input: self.input.clone(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }

    /// Checks that an encoded tensor carries exactly the columns this model
    /// was built for.
    pub fn check_features(&self, ft: &FeatureTensor) -> Result<()> {
        let f = &self.config.features;
        let time_ok = matches!(
            (&ft.time, f.time_encoding),
            (TimeColumns::RawTime(_), TimeEncoding::RawTime)
                | (TimeColumns::RawBeatPosition(..), TimeEncoding::RawBeatPosition)
                | (TimeColumns::TimeIndex(_), TimeEncoding::TimeEmbedding)
                | (TimeColumns::BeatPositionIndex(..), TimeEncoding::BeatPositionEmbedding)
        );
        let mismatch = if ft.num_parts != self.config.num_parts {
            Some(format!("{} parts, model has {}", ft.num_parts, self.config.num_parts))
        } else if !time_ok {
            Some(format!("time columns do not match {}", f.time_encoding))
        } else if ft.duration.is_some() != f.use_duration {
            Some(format!("duration column present = {}, model expects {}", ft.duration.is_some(), f.use_duration))
        } else if ft.entry_hints.is_some() != f.use_entry_hints {
            Some(format!("entry hints present = {}, model expects {}", ft.entry_hints.is_some(), f.use_entry_hints))
        } else if ft.pitch_hints.is_some() != f.use_pitch_hints {
            Some(format!("pitch hints present = {}, model expects {}", ft.pitch_hints.is_some(), f.use_pitch_hints))
        } else {
            None
        };
        mismatch.map_or(Ok(()), |m| Err(Error::ModelMismatch(m)))
    }

    /// Batched forward pass. Passing an RNG enables dropout.
    pub fn forward<R: Rng>(&self, batch: &[&FeatureTensor], mut rng: Option<&mut R>) -> Result<(Array2<F>, ForwardCache<F>)> {
        for ft in batch {
            self.check_features(ft)?;
        }
        let p = &self.params;
        let lengths: Vec<usize> = batch.iter().map(|f| f.len()).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let b = batch.len();
        let rate = self.config.dropout;
        let (indices, scalars) = self.input.gather::<F>(batch, steps, &self.config);
        let concat = self.input.concat(p, &indices, &scalars);
        let x = self.input.proj.forward(p, &concat.view());
        let (mut x, input_mask) = if self.config.arch.is_transformer() {
            dropout(x, rate, rng.as_deref_mut())
        } else {
            (x, None)
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Lstm { cell, norm } => {
                    let (h, cell_cache) = cell.forward(p, &x.view(), steps, b);
                    let (n, norm_cache) = norm.forward(p, &h.view());
                    let (y, mask) = dropout(n, rate, rng.as_deref_mut());
                    x = y;
                    caches.push(LayerCache::Lstm {
                        cell: cell_cache,
                        norm: norm_cache,
                        mask,
                    });
                }
                Layer::BiLstm { fwd, bwd, norm } => {
                    let perm = reversal(steps, &lengths);
                    let (hf, fwd_cache) = fwd.forward(p, &x.view(), steps, b);
                    let xr = permute_rows(&x, &perm);
                    let (hb, bwd_cache) = bwd.forward(p, &xr.view(), steps, b);
                    let h = concatenate(Axis(1), &[hf.view(), permute_rows(&hb, &perm).view()]).expect("rows agree");
                    let (n, norm_cache) = norm.forward(p, &h.view());
                    let (y, mask) = dropout(n, rate, rng.as_deref_mut());
                    x = y;
                    caches.push(LayerCache::BiLstm {
                        fwd: fwd_cache,
                        bwd: bwd_cache,
                        norm: norm_cache,
                        mask,
                    });
                }
                Layer::Block { ln1, att, ln2, ffn } => {
                    let causal = self.config.arch == Arch::TransformerDec;
                    let (a, ln1_cache) = ln1.forward(p, &x.view());
                    let (a, att_cache) = att.forward(p, &a.view(), b, &lengths, causal);
                    let (a, mask1) = dropout(a, rate, rng.as_deref_mut());
                    let h = x + &a;
                    let (c, ln2_cache) = ln2.forward(p, &h.view());
                    let (c, ffn_cache) = ffn.forward(p, &c.view());
                    let (c, mask2) = dropout(c, rate, rng.as_deref_mut());
                    x = h + &c;
                    caches.push(LayerCache::Block {
                        ln1: ln1_cache,
                        att: att_cache,
                        mask1,
                        ln2: ln2_cache,
                        ffn: ffn_cache,
                        mask2,
                    });
                }
            }
        }
        let final_norm = self.final_norm.as_ref().map(|norm| {
            let (y, cache) = norm.forward(p, &x.view());
            x = y;
            cache
        });
        let logits = self.head.forward(p, &x.view());
        Ok((
            logits,
            ForwardCache {
                steps,
                lengths,
                indices,
                concat,
                input_mask,
                layers: caches,
                final_norm,
                head_in: x,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &Array2<F>, g: &mut Grads<F>) {
        let p = &self.params;
        let steps = cache.steps;
        let mut dx = self.head.backward(p, &cache.head_in.view(), &dlogits.view(), g);
        if let (Some(norm), Some(nc)) = (&self.final_norm, &cache.final_norm) {
            dx = norm.backward(p, nc, &dx.view(), g);
        }
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dx = match (layer, lc) {
                (Layer::Lstm { cell, norm }, LayerCache::Lstm { cell: cc, norm: nc, mask }) => {
                    let d = dropout_backward(dx, mask);
                    let d = norm.backward(p, nc, &d.view(), g);
                    cell.backward(p, cc, &d.view(), g)
                }
                (Layer::BiLstm { fwd, bwd, norm }, LayerCache::BiLstm { fwd: fc, bwd: bc, norm: nc, mask }) => {
                    let perm = reversal(steps, &cache.lengths);
                    let d = dropout_backward(dx, mask);
                    let d = norm.backward(p, nc, &d.view(), g);
                    let half = d.ncols() / 2;
                    let mut out = fwd.backward(p, fc, &d.slice(s![.., ..half]), g);
                    let db = permute_rows(&d.slice(s![.., half..]).to_owned(), &perm);
                    let dxr = bwd.backward(p, bc, &db.view(), g);
                    out += &permute_rows(&dxr, &perm);
                    out
                }
                (
                    Layer::Block { ln1, att, ln2, ffn },
                    LayerCache::Block {
                        ln1: c1,
                        att: ca,
                        mask1,
                        ln2: c2,
                        ffn: cf,
                        mask2,
                    },
                ) => {
                    let dc = dropout_backward(dx.clone(), mask2);
                    let dc = ffn.backward(p, cf, &dc.view(), g);
                    let dh = dx + &ln2.backward(p, c2, &dc.view(), g);
                    let da = dropout_backward(dh.clone(), mask1);
                    let da = att.backward(p, ca, &da.view(), g);
                    dh + &ln1.backward(p, c1, &da.view(), g)
                }
                _ => unreachable!("cache matches layer"),
            };
        }
        let dx = dropout_backward(dx, &cache.input_mask);
        let dconcat = self.input.proj.backward(p, &cache.concat.view(), &dx.view(), g);
        self.input.backward(&cache.indices, &dconcat, g);
    }

    /// Mean cross-entropy over all labeled notes of a batch and its gradients.
    pub fn loss_and_grads<R: Rng>(
        &self,
        batch: &[&FeatureTensor],
        labels: &[&[usize]],
        rng: Option<&mut R>,
    ) -> Result<(CrossEntropy<F>, Grads<F>)> {
        let (logits, cache) = self.forward(batch, rng)?;
        let targets = time_major_targets(labels, cache.steps);
        let ce = softmax_cross_entropy(&logits.view(), &targets);
        let mut grads = self.params.zero_grads();
        self.backward(&cache, &ce.dlogits, &mut grads);
        Ok((ce, grads))
    }

    /// Scores of one sequence in a single pass, without dropout.
    pub fn scores(&self, ft: &FeatureTensor) -> Result<Array2<F>> {
        Ok(self.forward::<ChaCha8Rng>(&[ft], None)?.0)
    }

    pub fn start_stream(&self) -> Result<OnlineState<F>> {
        self.start_stream_windowed(EVAL_WINDOW)
    }

    /// Like [`Model::start_stream`], restarting attention context every
    /// `window` notes.
    pub fn start_stream_windowed(&self, window: usize) -> Result<OnlineState<F>> {
        if !self.config.arch.is_online() {
            return Err(Error::ModelMismatch(format!("{} cannot run online", self.config.arch)));
        }
        let h = self.config.hidden;
        Ok(OnlineState {
            lstm: match self.config.arch {
                Arch::Lstm => vec![LstmState::zeros(1, h); self.layers.len()],
                _ => Vec::new(),
            },
            kv: match self.config.arch {
                Arch::TransformerDec => vec![KvCache::default(); self.layers.len()],
                _ => Vec::new(),
            },
            seen: 0,
            window: window.max(1),
        })
    }

    /// Scores the next note given a one-row feature tensor. Recurrent state
    /// carries over indefinitely; attention context restarts at every window
    /// boundary.
    pub fn stream_step(&self, state: &mut OnlineState<F>, row: &FeatureTensor) -> Result<Array1<F>> {
        self.check_features(row)?;
        if row.len() != 1 {
            return Err(Error::LengthMismatch {
                what: "streamed rows",
                left: row.len(),
                right: 1,
            });
        }
        if state.seen > 0 && state.seen % state.window == 0 {
            state.kv.iter_mut().for_each(KvCache::clear);
        }
        let p = &self.params;
        let (indices, scalars) = self.input.gather::<F>(&[row], 1, &self.config);
        let concat = self.input.concat(p, &indices, &scalars);
        let mut x = self.input.proj.forward(p, &concat.view());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Lstm { cell, norm } => {
                    let st = &mut state.lstm[i];
                    cell.step(p, &x.view(), st);
                    x = norm.forward(p, &st.h.view()).0;
                }
                Layer::Block { ln1, att, ln2, ffn } => {
                    let a = ln1.forward(p, &x.view()).0;
                    let h = x + &att.step(p, &a.view(), &mut state.kv[i]);
                    let c = ln2.forward(p, &h.view()).0;
                    x = h + &ffn.forward(p, &c.view()).0;
                }
                Layer::BiLstm { .. } => unreachable!("offline layers are rejected in start_stream"),
            }
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(p, &x.view()).0;
        }
        state.seen += 1;
        Ok(self.head.forward(p, &x.view()).row(0).to_owned())
    }

    /// Labels a whole mixture. Online architectures run note by note through
    /// the streaming engine; offline ones see windows of [`EVAL_WINDOW`]
    /// notes. With entry hints, predictions are restricted to entered parts.
    pub fn predict(&self, mixture: &Mixture, hints: &Hints, mode: Mode) -> Result<Prediction> {
        self.predict_windowed(mixture, hints, mode, EVAL_WINDOW)
    }

    pub fn predict_windowed(&self, mixture: &Mixture, hints: &Hints, mode: Mode, window: usize) -> Result<Prediction> {
        let window = window.max(1);
        if mode != self.config.arch.mode() {
            return Err(Error::ModelMismatch(format!("{} is not an {mode} architecture", self.config.arch)));
        }
        if mixture.num_parts != self.config.num_parts {
            return Err(Error::ModelMismatch(format!(
                "mixture has {} parts, model has {}",
                mixture.num_parts, self.config.num_parts
            )));
        }
        let ft = encode(mixture, hints, &self.config.features)?;
        let n = ft.len();
        let mut scores = Array2::<f32>::zeros((n, self.config.num_parts));
        if mode == Mode::Online {
            let mut state = self.start_stream_windowed(window)?;
            for i in 0..n {
                let s = self.stream_step(&mut state, &ft.slice(i, i + 1))?;
                scores.row_mut(i).assign(&s.mapv(|v| v.as_f64() as f32));
            }
        } else {
            for start in (0..n).step_by(window) {
                let end = (start + window).min(n);
                let s = self.scores(&ft.slice(start, end))?;
                scores.slice_mut(s![start..end, ..]).assign(&s.mapv(|v| v.as_f64() as f32));
            }
        }
        let labels = (0..n)
            .map(|i| choose_part(scores.row(i), ft.entry_hints.as_ref().map(|e| e.row(i))))
            .collect();
        Ok(Prediction {
            labels,
            scores: Some(scores),
        })
    }
}

/// Flattens per-sequence labels into time-major targets, `None` for padding.
pub fn time_major_targets(labels: &[&[usize]], steps: usize) -> Vec<Option<usize>> {
    let b = labels.len();
    let mut out = vec![None; steps * b];
    for (j, l) in labels.iter().enumerate() {
        for (t, &label) in l.iter().enumerate().take(steps) {
            out[t * b + j] = Some(label);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Note;

    fn mixture(n: usize, k: usize) -> Mixture {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut tagged: Vec<(Note, usize)> = (0..n)
            .map(|i| {
                let label = i % k;
                let note = Note {
                    time: rng.random_range(0..200),
                    pitch: 40 + 12 * label as u8 + rng.random_range(0..12),
                    duration: rng.random_range(1..30),
                };
                (note, label)
            })
            .collect();
        tagged.sort();
        let (notes, labels) = tagged.into_iter().unzip();
        Mixture::new(notes, labels, k).unwrap()
    }

    fn small(arch: Arch) -> ModelConfig {
        ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 4,
            ffn: 24,
            embed_dim: 4,
            ..ModelConfig::new(arch, 3)
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = small(Arch::TransformerEnc);
        c.features.use_duration = true;
        c.dropout = 0.1;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("bogus=1").is_err());
        assert!("gru".parse::<Arch>().is_err());
    }

    #[test]
    fn stream_matches_batch_forward() {
        for arch in [Arch::Lstm, Arch::TransformerDec] {
            let model = Model::<f64>::new(small(arch), 7).unwrap();
            let m = mixture(40, 3);
            let ft = encode(&m, &Hints::none(), &model.config.features).unwrap();
            let batch = model.scores(&ft).unwrap();
            let mut state = model.start_stream().unwrap();
            for i in 0..ft.len() {
                let row = model.stream_step(&mut state, &ft.slice(i, i + 1)).unwrap();
                let diff = (&row - &batch.row(i)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
                assert!(diff < 1e-9, "{arch} step {i}: {diff}");
            }
        }
    }

    #[test]
    fn online_outputs_ignore_the_future() {
        for arch in [Arch::Lstm, Arch::TransformerDec] {
            let model = Model::<f64>::new(small(arch), 3).unwrap();
            let m = mixture(30, 3);
            let ft = encode(&m, &Hints::none(), &model.config.features).unwrap();
            let full = model.scores(&ft).unwrap();
            let head = model.scores(&ft.slice(0, 12)).unwrap();
            assert!((&full.slice(s![..12, ..]) - &head).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn padding_does_not_change_outputs() {
        for arch in Arch::ALL {
            let model = Model::<f64>::new(small(arch), 5).unwrap();
            let (a, b) = (mixture(25, 3), mixture(9, 3));
            let fa = encode(&a, &Hints::none(), &model.config.features).unwrap();
            let fb = encode(&b, &Hints::none(), &model.config.features).unwrap();
            let alone = model.scores(&fb).unwrap();
            let (batched, _) = model.forward::<ChaCha8Rng>(&[&fa, &fb], None).unwrap();
            for t in 0..fb.len() {
                let diff = (&batched.row(2 * t + 1) - &alone.row(t)).mapv(f64::abs).sum();
                assert!(diff < 1e-9, "{arch} step {t}: {diff}");
            }
        }
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let model = Model::<f32>::new(small(Arch::Lstm), 0).unwrap();
        let m = mixture(10, 3);
        let mut with_duration = model.config.features;
        with_duration.use_duration = true;
        let ft = encode(&m, &Hints::none(), &with_duration).unwrap();
        assert!(matches!(model.scores(&ft), Err(Error::ModelMismatch(_))));
        assert!(model.predict(&m, &Hints::none(), Mode::Offline).is_err());
    }

    #[test]
    fn entry_hints_restrict_choices() {
        let scores = ndarray::array![0.1f32, 0.9, 0.5];
        let allowed = ndarray::array![1.0f32, 0.0, 1.0];
        assert_eq!(choose_part(scores.view(), Some(allowed.view())), 2);
        assert_eq!(choose_part(scores.view(), Some(ndarray::array![0.0f32, 0.0, 0.0].view())), 1);
        assert_eq!(choose_part(scores.view(), None), 1);
    }

    #[test]
    fn prediction_shapes() {
        for arch in Arch::ALL {
            let model = Model::<f32>::new(small(arch), 1).unwrap();
            let m = mixture(33, 3);
            let p = model.predict(&m, &Hints::none(), arch.mode()).unwrap();
            assert_eq!(p.len(), 33);
            assert!(p.labels.iter().all(|&l| l < 3));
            assert_eq!(p.scores.unwrap().dim(), (33, 3));
        }
    }
}
