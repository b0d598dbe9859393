use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Song;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub split: Split,
    pub note_count: usize,
    pub parts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitTotals {
    pub files: usize,
    pub notes: usize,
}

impl DatasetManifest {
    pub fn totals(&self, split: Split) -> SplitTotals {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .fold(SplitTotals::default(), |acc, e| SplitTotals {
                files: acc.files + 1,
                notes: acc.notes + e.note_count,
            })
    }

    pub fn split_of(&self, source_id: &str) -> Option<Split> {
        self.entries
            .iter()
            .find(|e| e.source_id == source_id)
            .map(|e| e.split)
    }

    pub fn assignments(&self) -> HashMap<String, Split> {
        self.entries
            .iter()
            .map(|e| (e.source_id.clone(), e.split))
            .collect()
    }

    /// Writes the manifest as CSV with columns
    /// `source_id,split,note_count,parts`.
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let entries = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { entries })
    }
}

fn round_share(n: usize, part: u32, whole: u32) -> usize {
    ((2 * n as u64 * u64::from(part) + u64::from(whole)) / (2 * u64::from(whole))) as usize
}

/// Assigns each song to one split by a seeded shuffle of the file list.
///
/// Validation and test sizes are the rounded shares of `ratio`; training takes
/// the remainder. Songs named in `fixed` keep their given split and are not
/// counted towards the shares.
pub fn split_corpus(
    songs: &[Song],
    ratio: [u32; 3],
    seed: u64,
    fixed: Option<&HashMap<String, Split>>,
) -> Result<DatasetManifest> {
    if songs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if ratio.contains(&0) {
        return Err(Error::Config(format!("split ratio {ratio:?} must be positive")));
    }
    let fixed_split = |s: &Song| fixed.and_then(|f| f.get(&s.source_id).copied());
    let mut free: Vec<usize> = (0..songs.len()).filter(|&i| fixed_split(&songs[i]).is_none()).collect();
    free.sort_by(|&a, &b| songs[a].source_id.cmp(&songs[b].source_id));
    free.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let whole: u32 = ratio.iter().sum();
    let n_valid = round_share(free.len(), ratio[1], whole);
    let n_test = round_share(free.len(), ratio[2], whole).min(free.len() - n_valid);
    let mut assigned: HashMap<usize, Split> = HashMap::new();
    for (rank, &i) in free.iter().enumerate() {
        let split = if rank < n_valid {
            Split::Valid
        } else if rank < n_valid + n_test {
            Split::Test
        } else {
            Split::Train
        };
        assigned.insert(i, split);
    }
    let entries = songs
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestEntry {
            source_id: s.source_id.clone(),
            split: fixed_split(s).unwrap_or_else(|| assigned[&i]),
            note_count: s.note_count(),
            parts: s.num_parts,
        })
        .collect();
    Ok(DatasetManifest { entries })
}
