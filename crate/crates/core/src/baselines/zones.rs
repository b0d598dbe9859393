//! Keyboard-style zoning: each part owns a contiguous pitch range.

use std::fmt;

use crate::error::{Error, Result};
use crate::features::parse_pairs;
use crate::types::{Mixture, Prediction};

const PITCHES: usize = 128;

/// `K - 1` ascending boundary pitches split `0..128` into `K` zones; zone `z`
/// covers `[boundaries[z - 1], boundaries[z])` and plays part `order[z]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZoneSet {
    pub boundaries: Vec<u8>,
    pub order: Vec<usize>,
}

impl ZoneSet {
    pub fn new(boundaries: Vec<u8>, order: Vec<usize>) -> Result<Self> {
        if order.len() != boundaries.len() + 1 {
            return Err(Error::Config(format!(
                "{} boundaries need {} zones, got {}",
                boundaries.len(),
                boundaries.len() + 1,
                order.len()
            )));
        }
        let ascending = boundaries.windows(2).all(|w| w[0] < w[1]);
        let in_range = boundaries.iter().all(|&b| (1..=127).contains(&b));
        if !ascending || !in_range {
            return Err(Error::Config(format!("bad zone boundaries {boundaries:?}")));
        }
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..order.len()).collect::<Vec<_>>() {
            return Err(Error::Config(format!("zone order {order:?} is not a permutation")));
        }
        Ok(Self { boundaries, order })
    }

    pub fn num_parts(&self) -> usize {
        self.order.len()
    }

    pub fn zone_of(&self, pitch: u8) -> usize {
        self.boundaries.partition_point(|&b| b <= pitch)
    }

    pub fn part_of(&self, pitch: u8) -> usize {
        self.order[self.zone_of(pitch)]
    }

    pub fn predict(&self, mixture: &Mixture) -> Prediction {
        Prediction::from_labels(mixture.notes.iter().map(|n| self.part_of(n.pitch)).collect())
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        format!(
            "kind=zones\nboundaries={}\norder={}\n",
            join(self.boundaries.iter().map(|b| b.to_string()).collect()),
            join(self.order.iter().map(|o| o.to_string()).collect())
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        if pairs.get("kind").map(String::as_str) != Some("zones") {
            return Err(Error::Config("not a zone file".into()));
        }
        fn list<T: std::str::FromStr>(v: Option<&String>) -> Result<Vec<T>> {
            v.map(String::as_str)
                .unwrap_or("")
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad zone value {s:?}")))
                })
                .collect()
        }
        Self::new(list(pairs.get("boundaries"))?, list(pairs.get("order"))?)
    }
}

impl fmt::Display for ZoneSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut lo = 0u8;
        for (z, &part) in self.order.iter().enumerate() {
            let hi = self.boundaries.get(z).map_or(127, |&b| b - 1);
            if z > 0 {
                write!(f, ", ")?;
            }
            write!(f, "part {}: {lo}..={hi}", part + 1)?;
            lo = hi.saturating_add(1);
        }
        Ok(())
    }
}

/// Note counts per `(pitch, part)`.
#[derive(Clone, Debug)]
pub struct PitchHistogram {
    counts: Vec<Vec<u64>>,
    parts: usize,
}

impl PitchHistogram {
    pub fn new(parts: usize) -> Self {
        Self {
            counts: vec![vec![0; parts]; PITCHES],
            parts,
        }
    }

    pub fn from_mixtures<'a>(mixtures: impl IntoIterator<Item = &'a Mixture>, parts: usize) -> Self {
        let mut h = Self::new(parts);
        for m in mixtures {
            h.add(m);
        }
        h
    }

    pub fn add(&mut self, mixture: &Mixture) {
        for (note, &label) in mixture.notes.iter().zip(&mixture.labels) {
            if label < self.parts {
                self.counts[note.pitch as usize][label] += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Parts ordered by ascending mean pitch; parts without notes go last.
    pub fn order_by_mean(&self) -> Vec<usize> {
        let mean = |k: usize| {
            let (sum, n) = self
                .counts
                .iter()
                .enumerate()
                .fold((0u64, 0u64), |(s, n), (p, c)| (s + p as u64 * c[k], n + c[k]));
            if n == 0 {
                f64::INFINITY
            } else {
                sum as f64 / n as f64
            }
        };
        let mut order: Vec<usize> = (0..self.parts).collect();
        order.sort_by(|&a, &b| mean(a).total_cmp(&mean(b)).then(a.cmp(&b)));
        order
    }

    /// Notes a zone set labels correctly.
    pub fn score(&self, zones: &ZoneSet) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(p, c)| c[zones.part_of(p as u8)])
            .sum()
    }
}

/// Best boundaries for a fixed zone order. Among equally good placements the
/// lexicographically lowest boundary vector wins.
fn best_boundaries(hist: &PitchHistogram, order: &[usize]) -> (Vec<u8>, u64) {
    let zones = order.len();
    // prefix[z][p] = notes of part order[z] with pitch < p
    let prefix: Vec<Vec<u64>> = order
        .iter()
        .map(|&k| {
            let mut acc = vec![0u64; PITCHES + 1];
            for p in 0..PITCHES {
                acc[p + 1] = acc[p] + hist.counts[p][k];
            }
            acc
        })
        .collect();
    let gain = |z: usize, a: usize, b: usize| prefix[z][b] - prefix[z][a];

    // best[z][a]: max notes for zones z.. covering [a, 128), zone z starting at a
    let mut best = vec![vec![None::<u64>; PITCHES + 1]; zones];
    for a in 0..PITCHES {
        best[zones - 1][a] = Some(gain(zones - 1, a, PITCHES));
    }
    for z in (0..zones - 1).rev() {
        for a in 0..PITCHES {
            best[z][a] = (a + 1..PITCHES)
                .filter_map(|b| best[z + 1][b].map(|rest| gain(z, a, b) + rest))
                .max();
        }
    }

    let total = best[0][0].expect("128 pitches always fit up to 128 zones");
    let mut boundaries = Vec::with_capacity(zones - 1);
    let mut a = 0;
    let mut remaining = total;
    for z in 0..zones - 1 {
        let b = (a + 1..PITCHES)
            .find(|&b| best[z + 1][b].is_some_and(|rest| gain(z, a, b) + rest == remaining))
            .expect("optimum is reachable");
        remaining -= gain(z, a, b);
        boundaries.push(b as u8);
        a = b;
    }
    (boundaries, total)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for i in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(i, n - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Options for the zone search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ZoneSearch {
    /// Also search part-to-zone assignments (only for `K <= 5`). The default
    /// fixes the order by ascending mean pitch.
    pub permute: bool,
}

pub fn fit_zones_histogram(hist: &PitchHistogram, search: ZoneSearch) -> Result<ZoneSet> {
    if hist.parts == 0 || hist.parts > PITCHES {
        return Err(Error::Config(format!("cannot zone {} parts", hist.parts)));
    }
    let base = hist.order_by_mean();
    let (mut boundaries, mut score) = best_boundaries(hist, &base);
    let mut order = base.clone();
    if search.permute && hist.parts <= 5 {
        for perm in permutations(hist.parts) {
            let candidate: Vec<usize> = perm.iter().map(|&i| base[i]).collect();
            let (b, s) = best_boundaries(hist, &candidate);
            if s > score {
                boundaries = b;
                score = s;
                order = candidate;
            }
        }
    }
    ZoneSet::new(boundaries, order)
}

/// Zones maximizing note accuracy over the training mixtures.
pub fn fit_zones(train: &[&Mixture], search: ZoneSearch) -> Result<ZoneSet> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let parts = train.iter().map(|m| m.num_parts).max().unwrap_or(0);
    fit_zones_histogram(&PitchHistogram::from_mixtures(train.iter().copied(), parts), search)
}

/// Zones fit to the single sample being evaluated.
pub fn oracle_zones(sample: &Mixture, search: ZoneSearch) -> Result<ZoneSet> {
    fit_zones(&[sample], search)
}
