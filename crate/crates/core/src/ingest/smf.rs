//! Standard MIDI File reading and writing (formats 0 and 1).
//!
//! Reading pairs note-on/note-off events first-in first-out per
//! `(track chunk, channel, pitch)` and groups the resulting notes into one
//! [`Track`] per `(channel, program)`. Writing emits format 1 with a conductor
//! track followed by one track chunk per part (more if a part holds
//! overlapping notes of equal pitch, which a single channel cannot express).

use std::collections::{BTreeMap, HashMap, VecDeque};

use log::warn;

use crate::error::{Error, Result};
use crate::types::{Note, Song, TempoChange, Track, DEFAULT_MICROS_PER_QUARTER};

pub const DRUM_CHANNEL: u8 = 9;

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Discard everything on MIDI channel 10 (index 9).
    pub drop_drums: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EventKind {
    NoteOn { pitch: u8, velocity: u8 },
    NoteOff { pitch: u8 },
    Program(u8),
    Tempo(u32),
    TrackName,
    EndOfTrack,
    Other,
}

#[derive(Clone, Debug)]
struct RawEvent {
    tick: u32,
    chunk: usize,
    seq: usize,
    channel: u8,
    kind: EventKind,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Midi {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or_else(|| self.err("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(self.err(format!("need {len} bytes, found {}", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::Midi {
            offset: start,
            msg: "variable-length quantity longer than 4 bytes".into(),
        })
    }

    fn data_byte(&mut self) -> Result<u8> {
        let at = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(Error::Midi {
                offset: at,
                msg: format!("expected data byte, found status 0x{b:02X}"),
            });
        }
        Ok(b)
    }
}

struct ParsedTrack {
    name: Option<String>,
    events: Vec<RawEvent>,
}

fn parse_track(bytes: &[u8], start: usize, len: usize, chunk: usize) -> Result<ParsedTrack> {
    let end = start + len;
    let mut r = Reader::new(&bytes[..end], start);
    let mut tick = 0u32;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    let mut name = None;
    let mut seq = 0;
    while r.pos < end {
        tick = tick
            .checked_add(r.vlq()?)
            .ok_or_else(|| r.err("tick counter overflow"))?;
        let status_at = r.pos;
        let first = r.u8()?;
        let (status, data0) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    return Err(Error::Midi {
                        offset: status_at,
                        msg: format!("data byte 0x{first:02X} without running status"),
                    })
                }
            }
        };
        let kind;
        let mut channel = 0;
        match status {
            0xFF => {
                running = None;
                let meta = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                kind = match meta {
                    0x51 if len == 3 => {
                        EventKind::Tempo(u32::from_be_bytes([0, data[0], data[1], data[2]]))
                    }
                    0x03 => {
                        if name.is_none() {
                            name = Some(String::from_utf8_lossy(data).trim().to_string());
                        }
                        EventKind::TrackName
                    }
                    0x2F => EventKind::EndOfTrack,
                    _ => EventKind::Other,
                };
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
                kind = EventKind::Other;
            }
            0xF1..=0xFE => {
                return Err(Error::Midi {
                    offset: status_at,
                    msg: format!("system message 0x{status:02X} is not allowed in a file"),
                })
            }
            _ => {
                running = Some(status);
                channel = status & 0x0F;
                let a = match data0 {
                    Some(b) => b,
                    None => r.data_byte()?,
                };
                kind = match status >> 4 {
                    0x8 => {
                        r.data_byte()?;
                        EventKind::NoteOff { pitch: a }
                    }
                    0x9 => {
                        let velocity = r.data_byte()?;
                        if velocity == 0 {
                            EventKind::NoteOff { pitch: a }
                        } else {
                            EventKind::NoteOn { pitch: a, velocity }
                        }
                    }
                    0xC => EventKind::Program(a),
                    0xD => EventKind::Other,
                    _ => {
                        r.data_byte()?;
                        EventKind::Other
                    }
                };
            }
        }
        events.push(RawEvent {
            tick,
            chunk,
            seq,
            channel,
            kind,
        });
        seq += 1;
        if kind == EventKind::EndOfTrack {
            break;
        }
    }
    Ok(ParsedTrack { name, events })
}

/// Parses a Standard MIDI File into a song in raw tick units.
///
/// Notes left open at the end of their track are closed at the track's last
/// event. The song's `resolution` is the file's ticks per quarter note.
pub fn parse_smf(bytes: &[u8], source_id: &str, opts: ParseOptions) -> Result<Song> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4).map_err(|_| r.err("file too short for a header"))? != b"MThd" {
        return Err(Error::Midi {
            offset: 0,
            msg: "missing MThd header".into(),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err(format!("header length {header_len} < 6")));
    }
    let header_at = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    r.pos = header_at + header_len;
    if format > 1 {
        return Err(Error::Midi {
            offset: header_at,
            msg: format!("unsupported format {format}"),
        });
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(Error::Midi {
            offset: header_at + 4,
            msg: format!("unsupported time division 0x{division:04X}"),
        });
    }

    let mut tracks = Vec::new();
    while r.pos < bytes.len() && tracks.len() < ntracks as usize {
        let chunk_at = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if r.pos + len > bytes.len() {
            return Err(Error::Midi {
                offset: chunk_at,
                msg: format!("chunk length {len} runs past end of file"),
            });
        }
        if id == b"MTrk" {
            tracks.push(parse_track(bytes, r.pos, len, tracks.len())?);
        }
        r.pos += len;
    }
    if tracks.len() < ntracks as usize {
        warn!(
            "{source_id}: header announces {ntracks} tracks, found {}",
            tracks.len()
        );
    }

    let track_end: Vec<u32> = tracks
        .iter()
        .map(|t| t.events.last().map_or(0, |e| e.tick))
        .collect();
    let names: Vec<Option<String>> = tracks.iter().map(|t| t.name.clone()).collect();
    let mut events: Vec<RawEvent> = tracks.into_iter().flat_map(|t| t.events).collect();
    events.sort_by_key(|e| (e.tick, e.chunk, e.seq));

    let mut program = [0u8; 16];
    let mut tempo_map = Vec::new();
    // open notes: (chunk, channel, pitch) -> queue of (start tick, program)
    let mut open: HashMap<(usize, u8, u8), VecDeque<(u32, u8)>> = HashMap::new();
    // (channel, program) -> (first chunk, notes)
    let mut groups: BTreeMap<(u8, u8), (usize, Vec<Note>)> = BTreeMap::new();
    let push = |groups: &mut BTreeMap<(u8, u8), (usize, Vec<Note>)>,
                    chunk: usize,
                    channel: u8,
                    prog: u8,
                    start: u32,
                    end: u32,
                    pitch: u8| {
        let entry = groups.entry((channel, prog)).or_insert((chunk, Vec::new()));
        entry.0 = entry.0.min(chunk);
        entry.1.push(Note {
            time: start,
            pitch,
            duration: end.saturating_sub(start).max(1),
        });
    };
    for e in &events {
        match e.kind {
            EventKind::Tempo(mpq) => tempo_map.push(TempoChange {
                tick: e.tick,
                micros_per_quarter: mpq,
            }),
            EventKind::Program(p) => program[e.channel as usize] = p,
            EventKind::NoteOn { pitch, .. } => {
                if opts.drop_drums && e.channel == DRUM_CHANNEL {
                    continue;
                }
                open.entry((e.chunk, e.channel, pitch))
                    .or_default()
                    .push_back((e.tick, program[e.channel as usize]));
            }
            EventKind::NoteOff { pitch } => {
                if let Some((start, prog)) = open
                    .get_mut(&(e.chunk, e.channel, pitch))
                    .and_then(|q| q.pop_front())
                {
                    push(&mut groups, e.chunk, e.channel, prog, start, e.tick, pitch);
                }
            }
            _ => {}
        }
    }
    let mut dangling: Vec<_> = open.into_iter().filter(|(_, q)| !q.is_empty()).collect();
    dangling.sort_by_key(|(k, _)| *k);
    for ((chunk, channel, pitch), queue) in dangling {
        warn!(
            "{source_id}: {} note-on(s) without note-off (channel {}, pitch {pitch}); closing at track end",
            queue.len(),
            channel + 1
        );
        for (start, prog) in queue {
            push(&mut groups, chunk, channel, prog, start, track_end[chunk], pitch);
        }
    }

    let mut ordered: Vec<((u8, u8), (usize, Vec<Note>))> = groups.into_iter().collect();
    ordered.sort_by_key(|((channel, prog), (chunk, _))| (*chunk, *channel, *prog));
    let tracks = ordered
        .into_iter()
        .enumerate()
        .map(|(part, ((channel, prog), (chunk, notes)))| {
            let name = names[chunk]
                .clone()
                .filter(|n| !n.is_empty())
                .unwrap_or_else(|| format!("channel {} program {}", channel + 1, prog));
            Track::new(part, name, notes).with_program(prog)
        })
        .collect();
    let mut song = Song::new(source_id, u32::from(division), tracks);
    song.tempo_map = tempo_map;
    Ok(song)
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = ((value & 0x7F) as u8) | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn meta(out: &mut Vec<u8>, kind: u8, data: &[u8]) {
    write_vlq(out, 0);
    out.extend_from_slice(&[0xFF, kind]);
    write_vlq(out, data.len() as u32);
    out.extend_from_slice(data);
}

fn chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Splits notes into lanes so that no two notes of equal pitch overlap within
/// a lane, which keeps note-on/note-off pairing unambiguous.
fn lanes(notes: &[Note]) -> Vec<Vec<Note>> {
    let mut lanes: Vec<(HashMap<u8, u32>, Vec<Note>)> = Vec::new();
    for &note in notes {
        let slot = lanes
            .iter()
            .position(|(busy, _)| busy.get(&note.pitch).is_none_or(|&end| end <= note.time));
        let slot = slot.unwrap_or_else(|| {
            lanes.push((HashMap::new(), Vec::new()));
            lanes.len() - 1
        });
        lanes[slot].0.insert(note.pitch, note.end());
        lanes[slot].1.push(note);
    }
    lanes.into_iter().map(|(_, n)| n).collect()
}

fn channel_for(part: usize) -> Option<u8> {
    let ch = if part < DRUM_CHANNEL as usize { part } else { part + 1 };
    (ch < 16).then_some(ch as u8)
}

/// Serializes a song as a format-1 Standard MIDI File at `song.resolution`
/// ticks per quarter note. Part `k` is written to channel `k` (skipping the
/// drum channel), so at most 15 parts are supported.
pub fn write_smf(song: &Song) -> Result<Vec<u8>> {
    if song.resolution == 0 || song.resolution > 0x7FFF {
        return Err(Error::Config(format!(
            "resolution {} cannot be stored in a MIDI header",
            song.resolution
        )));
    }
    let mut chunks: Vec<Vec<u8>> = Vec::new();

    let mut conductor = Vec::new();
    let tempos = if song.tempo_map.is_empty() {
        vec![TempoChange {
            tick: 0,
            micros_per_quarter: DEFAULT_MICROS_PER_QUARTER,
        }]
    } else {
        song.tempo_map.clone()
    };
    let mut last = 0;
    for t in &tempos {
        write_vlq(&mut conductor, t.tick - last);
        last = t.tick;
        conductor.extend_from_slice(&[0xFF, 0x51, 0x03]);
        conductor.extend_from_slice(&t.micros_per_quarter.to_be_bytes()[1..]);
    }
    meta(&mut conductor, 0x2F, &[]);
    chunks.push(conductor);

    for track in &song.tracks {
        let channel = channel_for(track.part_id).ok_or_else(|| {
            Error::Config(format!("part {} exceeds the 15 writable channels", track.part_id))
        })?;
        let program = track.program.unwrap_or(0);
        for lane in lanes(&track.notes) {
            // (tick, is_on, pitch); offs sort before ons at equal ticks
            let mut events: Vec<(u32, bool, u8)> = lane
                .iter()
                .flat_map(|n| [(n.time, true, n.pitch), (n.end(), false, n.pitch)])
                .collect();
            events.sort_unstable();
            let mut body = Vec::new();
            meta(&mut body, 0x03, track.name.as_bytes());
            write_vlq(&mut body, 0);
            body.extend_from_slice(&[0xC0 | channel, program & 0x7F]);
            let mut last = 0;
            for (tick, on, pitch) in events {
                write_vlq(&mut body, tick - last);
                last = tick;
                if on {
                    body.extend_from_slice(&[0x90 | channel, pitch, 80]);
                } else {
                    body.extend_from_slice(&[0x80 | channel, pitch, 0]);
                }
            }
            meta(&mut body, 0x2F, &[]);
            chunks.push(body);
        }
    }

    let mut out = Vec::new();
    let mut header = Vec::new();
    header.extend_from_slice(&1u16.to_be_bytes());
    header.extend_from_slice(&(chunks.len() as u16).to_be_bytes());
    header.extend_from_slice(&(song.resolution as u16).to_be_bytes());
    chunk(&mut out, b"MThd", &header);
    for body in &chunks {
        chunk(&mut out, b"MTrk", body);
    }
    Ok(out)
}
