//! Line-oriented dataset files.
//!
//! ```text
//! # partsep-dataset v1
//! # profile=chorale
//! # resolution=24
//! # parts=soprano|alto|tenor|bass
//! source_id,split,note_index,time,pitch,duration,label,K
//! bwv1.6,train,0,0,53,12,3,4
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::{DatasetManifest, ManifestEntry, Split};
use super::{CorpusConfig, GenreProfile};
use crate::error::{Error, Result};
use crate::types::{downmix, Mixture, Note, Song};

const MAGIC: &str = "# partsep-dataset v1";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub source_id: String,
    pub split: Split,
    pub mixture: Mixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub profile: GenreProfile,
    pub resolution: u32,
    pub part_names: Vec<String>,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    source_id: String,
    split: Split,
    note_index: usize,
    time: u32,
    pitch: u8,
    duration: u32,
    label: usize,
    #[serde(rename = "K")]
    parts: usize,
}

impl Dataset {
    pub fn from_songs(songs: &[Song], manifest: &DatasetManifest, config: &CorpusConfig) -> Result<Self> {
        let assignments = manifest.assignments();
        let mut entries = Vec::with_capacity(songs.len());
        for song in songs {
            let split = *assignments
                .get(&song.source_id)
                .ok_or_else(|| Error::Config(format!("{} missing from manifest", song.source_id)))?;
            entries.push(DatasetEntry {
                source_id: song.source_id.clone(),
                split,
                mixture: downmix(song)?,
            });
        }
        let num_parts = songs.iter().map(|s| s.num_parts).max().unwrap_or(0);
        let part_names = config.profile.ensemble().unwrap_or_else(|| {
            (0..num_parts)
                .map(|k| {
                    songs
                        .iter()
                        .flat_map(|s| &s.tracks)
                        .find(|t| t.part_id == k)
                        .map(|t| t.name.clone())
                        .unwrap_or_else(|| format!("part {}", k + 1))
                })
                .collect()
        });
        Ok(Self {
            profile: config.profile,
            resolution: config.resolution,
            part_names,
            entries,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn mixtures(&self, split: Split) -> Vec<&Mixture> {
        self.split(split).map(|e| &e.mixture).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    source_id: e.source_id.clone(),
                    split: e.split,
                    note_count: e.mixture.len(),
                    parts: e.mixture.num_parts,
                })
                .collect(),
        }
    }

    pub fn note_count(&self) -> usize {
        self.entries.iter().map(|e| e.mixture.len()).sum()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "# profile={}", self.profile)?;
        writeln!(out, "# resolution={}", self.resolution)?;
        writeln!(out, "# parts={}", self.part_names.join("|"))?;
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            for (i, (note, &label)) in e.mixture.notes.iter().zip(&e.mixture.labels).enumerate() {
                w.serialize(Record {
                    source_id: e.source_id.clone(),
                    split: e.split,
                    note_index: i,
                    time: note.time,
                    pitch: note.pitch,
                    duration: note.duration,
                    label,
                    parts: e.mixture.num_parts,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = fs::File::create(&tmp)?;
            self.write(std::io::BufWriter::new(file))?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(fs::File::open(path)?)
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        let mut header_lines = 0;
        let mut profile = GenreProfile::Generic;
        let mut resolution = 24;
        let mut part_names = Vec::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Dataset {
                line: 1,
                msg: "missing dataset header".into(),
            });
        }
        header_lines += 1;
        let mut body = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            header_lines += 1;
            let Some(meta) = line.strip_prefix("# ") else {
                body.push_str(&line);
                header_lines -= 1;
                break;
            };
            let (key, value) = meta.trim_end().split_once('=').ok_or_else(|| Error::Dataset {
                line: header_lines,
                msg: "expected `# key=value`".into(),
            })?;
            match key {
                "profile" => profile = value.parse()?,
                "resolution" => {
                    resolution = value.parse().map_err(|_| Error::Dataset {
                        line: header_lines,
                        msg: format!("bad resolution {value:?}"),
                    })?
                }
                "parts" => part_names = value.split('|').map(str::to_string).collect(),
                _ => {}
            }
        }
        reader.read_to_string(&mut body)?;

        let mut grouped: BTreeMap<String, (usize, Split, usize, Vec<Note>, Vec<usize>)> = BTreeMap::new();
        let mut order = 0;
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let headers = r.headers()?.clone();
        let mut raw = csv::StringRecord::new();
        while r.read_record(&mut raw)? {
            let here = raw.position().map_or(0, |p| p.line() as usize) + header_lines;
            let rec: Record = raw.deserialize(Some(&headers)).map_err(|e| Error::Dataset {
                line: here,
                msg: e.to_string(),
            })?;
            let entry = grouped.entry(rec.source_id.clone()).or_insert_with(|| {
                order += 1;
                (order, rec.split, rec.parts, Vec::new(), Vec::new())
            });
            if entry.3.len() != rec.note_index || entry.1 != rec.split || entry.2 != rec.parts {
                return Err(Error::Dataset {
                    line: here,
                    msg: format!("inconsistent record for {}", rec.source_id),
                });
            }
            let note = Note::new(rec.time, rec.pitch, rec.duration).map_err(|e| Error::Dataset {
                line: here,
                msg: e.to_string(),
            })?;
            entry.3.push(note);
            entry.4.push(rec.label);
        }
        let mut entries: Vec<(usize, DatasetEntry)> = Vec::with_capacity(grouped.len());
        for (source_id, (order, split, parts, notes, labels)) in grouped {
            let mixture = Mixture::new(notes, labels, parts).map_err(|e| Error::Dataset {
                line: 0,
                msg: format!("{source_id}: {e}"),
            })?;
            entries.push((order, DatasetEntry { source_id, split, mixture }));
        }
        entries.sort_by_key(|(o, _)| *o);
        let entries: Vec<DatasetEntry> = entries.into_iter().map(|(_, e)| e).collect();
        if part_names.is_empty() {
            let k = entries.iter().map(|e| e.mixture.num_parts).max().unwrap_or(0);
            part_names = (1..=k).map(|k| format!("part {k}")).collect();
        }
        Ok(Self {
            profile,
            resolution,
            part_names,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::split_corpus;
    use crate::types::Track;

    fn corpus() -> Vec<Song> {
        (0..10)
            .map(|i| {
                let a = (0..5).map(|j| Note { time: j * 12, pitch: 70 + (i % 3) as u8, duration: 12 }).collect();
                let b = (0..3).map(|j| Note { time: j * 24, pitch: 50, duration: 24 }).collect();
                Song::new(format!("s{i}"), 24, vec![Track::new(0, "hi", a), Track::new(1, "lo", b)])
            })
            .collect()
    }

    #[test]
    fn text_round_trip() {
        let songs = corpus();
        let config = CorpusConfig::default();
        let manifest = split_corpus(&songs, config.split_ratio, 1, None).unwrap();
        let ds = Dataset::from_songs(&songs, &manifest, &config).unwrap();
        assert_eq!(ds.part_names, vec!["hi", "lo"]);
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first_record = text.lines().nth(5).unwrap();
        assert!(text.lines().nth(4).unwrap() == "source_id,split,note_index,time,pitch,duration,label,K");
        assert!(first_record.starts_with("s0,"), "{first_record}");
        let back = Dataset::read(&buf[..]).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.manifest(), manifest);
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let text = format!("{MAGIC}\n# parts=a|b\nsource_id,split,note_index,time,pitch,duration,label,K\nx,train,0,0,60,0,0,2\n");
        match Dataset::read(text.as_bytes()) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected error, got {other:?}"),
        }
        assert!(Dataset::read("nonsense\n".as_bytes()).is_err());
    }
}
