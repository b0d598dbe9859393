//! Finite-difference checks of the analytic gradients, in `f64`.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{softmax_cross_entropy, Attention, Embedding, LayerNorm, Linear, Lstm};
use super::model::{Arch, Model, ModelConfig};
use super::params::{Grads, ParamStore};
use crate::error::Result;
use crate::features::{encode, Hints};
use crate::types::{Mixture, Note};

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;
const KINK_TRIGGER: f64 = 1e-4;
const KINK_GAP: f64 = 1e-5;
const KINK_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries where the step straddled a kink and was shrunk.
    pub kinks: usize,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} max rel err {:.2e} over {} entries", self.name, self.max_rel_error, self.checked)?;
        if self.kinks > 0 {
            write!(f, " ({} at kinks)", self.kinks)?;
        }
        Ok(())
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences for up to
/// `per_tensor` entries of every parameter (entries with a nonzero analytic
/// gradient first).
pub fn check_store<L>(name: &str, store: &ParamStore<f64>, per_tensor: usize, seed: u64, mut loss: L) -> GradReport
where
    L: FnMut(&ParamStore<f64>) -> (f64, Grads<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = loss(store);
    let mut work = store.clone();
    let mut worst = 0f64;
    let mut checked = 0;
    let mut kinks = 0;
    for id in store.ids() {
        let g = grads.get(id);
        let (mut hot, mut cold): (Vec<usize>, Vec<usize>) = (0..g.len()).partition(|&i| g.as_slice().expect("contiguous")[i] != 0.0);
        hot.shuffle(&mut rng);
        cold.shuffle(&mut rng);
        let picks = hot.into_iter().chain(cold.into_iter().take(2)).take(per_tensor);
        for flat in picks {
            let cols = g.ncols();
            let at = [flat / cols, flat % cols];
            let orig = store.get(id)[at];
            let mut shifted = |h: f64| {
                work.get_mut(id)[at] = orig + h;
                let value = loss(&work).0;
                work.get_mut(id)[at] = orig;
                value
            };
            let (up, down) = (shifted(FD_STEP), shifted(-FD_STEP));
            let mut numeric = (up - down) / (2.0 * FD_STEP);
            if rel_error(g[at], numeric) > KINK_TRIGGER {
                // A ReLU switching inside the step bends the difference
                // quotient; on smooth ground a 100x smaller step changes it by
                // far less than this gap, and a wrong gradient stays wrong.
                let fine = (shifted(KINK_STEP) - shifted(-KINK_STEP)) / (2.0 * KINK_STEP);
                if rel_error(fine, numeric) > KINK_GAP {
                    numeric = fine;
                    kinks += 1;
                }
            }
            worst = worst.max(rel_error(g[at], numeric));
            checked += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
        kinks,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// `sum(y * r)` has gradient `r` with respect to `y`.
fn weighted_sum(y: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (y * r).sum()
}

pub fn check_layer_norm(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    // perturb away from the identity initialization
    *store.get_mut(ln.gain) = random(&mut rng, 1, 6);
    *store.get_mut(ln.bias) = random(&mut rng, 1, 6);
    let x = random(&mut rng, 5, 6);
    let r = random(&mut rng, 5, 6);
    check_store("layer norm", &store, usize::MAX, seed, |p| {
        let mut g = p.zero_grads();
        let (y, cache) = ln.forward(p, &x.view());
        ln.backward(p, &cache, &r.view(), &mut g);
        (weighted_sum(&y, &r), g)
    })
}

pub fn check_embedding(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 7, 4, &mut rng);
    let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng);
    let idx = [0usize, 3, 3, 6, 2, 9];
    let targets: Vec<Option<usize>> = idx.iter().map(|&i| Some(i % 3)).collect();
    check_store("embedding + linear", &store, usize::MAX, seed, |p| {
        let mut g = p.zero_grads();
        let e = emb.forward(p, &idx);
        let y = lin.forward(p, &e.view());
        let ce = softmax_cross_entropy(&y.view(), &targets);
        let de = lin.backward(p, &e.view(), &ce.dlogits.view(), &mut g);
        emb.backward(&idx, &de.view(), &mut g);
        (ce.loss, g)
    })
}

pub fn check_lstm(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng);
    let (steps, batch) = (5, 2);
    let x = random(&mut rng, steps * batch, 3);
    let r = random(&mut rng, steps * batch, 4);
    check_store("lstm cell", &store, usize::MAX, seed, |p| {
        let mut g = p.zero_grads();
        let (h, cache) = lstm.forward(p, &x.view(), steps, batch);
        lstm.backward(p, &cache, &r.view(), &mut g);
        (weighted_sum(&h, &r), g)
    })
}

pub fn check_attention(seed: u64, causal: bool) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "att", 8, 2, &mut rng);
    let lengths = [4, 2];
    let x = random(&mut rng, 8, 8);
    let mut r = random(&mut rng, 8, 8);
    // padded rows carry no loss
    for t in 2..4 {
        r.row_mut(t * 2 + 1).fill(0.0);
    }
    let name = if causal { "causal attention" } else { "attention" };
    check_store(name, &store, usize::MAX, seed, |p| {
        let mut g = p.zero_grads();
        let (y, cache) = att.forward(p, &x.view(), 2, &lengths, causal);
        att.backward(p, &cache, &r.view(), &mut g);
        (weighted_sum(&y, &r), g)
    })
}

/// Small copy of an architecture with every optional input switched on.
pub fn tiny_config(arch: Arch) -> ModelConfig {
    let mut config = ModelConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 12,
        embed_dim: 3,
        dropout: 0.0,
        ..ModelConfig::new(arch, 3)
    };
    config.features.use_duration = true;
    config.features.use_entry_hints = true;
    config.features.use_pitch_hints = true;
    config
}

fn tiny_mixture(rng: &mut ChaCha8Rng, n: usize) -> Mixture {
    let mut tagged: Vec<(Note, usize)> = (0..n)
        .map(|i| {
            let label = i % 3;
            let note = Note {
                time: rng.random_range(0..60),
                pitch: 48 + 7 * label as u8 + rng.random_range(0..10),
                duration: rng.random_range(1..20),
            };
            (note, label)
        })
        .collect();
    tagged.sort();
    let (notes, labels) = tagged.into_iter().unzip();
    Mixture::new(notes, labels, 3).expect("canonical")
}

/// Whole-model check on a padded batch of two sequences.
pub fn check_model(arch: Arch, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(tiny_config(arch), seed)?;
    let mixtures = [tiny_mixture(&mut rng, 6), tiny_mixture(&mut rng, 4)];
    let features = mixtures
        .iter()
        .map(|m| encode(m, &Hints::from_mixture(m), &model.config.features))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<_> = features.iter().collect();
    let labels: Vec<&[usize]> = mixtures.iter().map(|m| m.labels.as_slice()).collect();
    let mut probe = model.clone();
    Ok(check_store(&format!("{arch} model"), &model.params, usize::MAX, seed, move |p| {
        probe.params = p.clone();
        let (ce, g) = probe
            .loss_and_grads::<ChaCha8Rng>(&batch, &labels, None)
            .expect("validated inputs");
        (ce.loss, g)
    }))
}

/// Every standard check; used by the command line and the test suite.
pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    let mut reports = vec![
        check_layer_norm(seed),
        check_embedding(seed),
        check_lstm(seed),
        check_attention(seed, false),
        check_attention(seed, true),
    ];
    for arch in Arch::ALL {
        reports.push(check_model(arch, seed)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_gradients() {
        let r = check_layer_norm(1);
        assert!(r.max_rel_error < 1e-6, "{r}");
    }

    #[test]
    fn component_gradients() {
        for r in [check_embedding(2), check_lstm(3), check_attention(4, false), check_attention(5, true)] {
            assert!(r.max_rel_error < 1e-4, "{r}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn model_gradients() {
        for arch in Arch::ALL {
            let r = check_model(arch, 6).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r}");
        }
    }

    #[test]
    fn model_gradients_across_seeds() {
        for seed in 0..4 {
            for r in run_all(seed).unwrap() {
                assert!(r.max_rel_error < 1e-4, "seed {seed}: {r}");
            }
        }
    }

    #[test]
    fn kink_handling_still_catches_wrong_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 3), 0.5));
        // relu(w) summed, but with the gradient off by 10%
        let r = check_store("wrong", &store, usize::MAX, 0, |p| {
            let w = p.get(id);
            let mut g = p.zero_grads();
            *g.get_mut(id) = w.mapv(|x| if x > 0.0 { 1.1 } else { 0.0 });
            (w.mapv(|x| x.max(0.0)).sum(), g)
        });
        assert!(r.max_rel_error > 0.05, "{r}");

        // a kink exactly at the evaluation point is re-measured on one side
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 3e-5));
        let r = check_store("kink", &store, usize::MAX, 0, |p| {
            let w = p.get(id);
            let mut g = p.zero_grads();
            *g.get_mut(id) = w.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            (w.mapv(|x| x.max(0.0)).sum(), g)
        });
        assert!(r.max_rel_error < 1e-6 && r.kinks == 1, "{r}");
    }
}
