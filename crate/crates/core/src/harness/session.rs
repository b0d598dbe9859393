//! Live labeling sessions and their JSON wire protocol.
//!
//! Client frames: `{"t":"note","ms":..,"pitch":..}`,
//! `{"t":"switch","part":..,"on":..}` and `{"t":"reset"}`. Every note gets a
//! `{"t":"label","pitch":..,"part":..,"scores":[..]}` reply; bad input gets
//! `{"t":"err","msg":..}` and the session carries on.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{encode, Hints};
use crate::neural::{choose_part, Model, OnlineState};
use crate::types::{Mixture, Note, Prediction};

/// 125 quarter notes per minute at 24 steps per beat.
pub const DEFAULT_MS_PER_STEP: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(tag = "t", rename_all = "lowercase")]
pub enum ClientFrame {
    Note { ms: i64, pitch: i64 },
    Switch { part: i64, on: bool },
    Reset,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(tag = "t", rename_all = "lowercase")]
pub enum ServerFrame {
    Label { pitch: u8, part: usize, scores: Vec<f32> },
    Err { msg: String },
}

impl ServerFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames serialize")
    }

    fn err(msg: impl Into<String>) -> Self {
        ServerFrame::Err { msg: msg.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionConfig {
    pub ms_per_step: f64,
    /// Client time that maps to step 0.
    pub origin_ms: i64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            ms_per_step: DEFAULT_MS_PER_STEP,
            origin_ms: 0,
        }
    }
}

/// One client's running context: model state, instrument switches and clock.
pub struct Session {
    pub id: String,
    model: Arc<Model<f32>>,
    config: SessionConfig,
    state: OnlineState<f32>,
    switches: Vec<bool>,
    last_ms: Option<i64>,
}

/// Rejects models that cannot run live: offline architectures, and inputs a
/// live performance cannot supply (durations, pitch hints).
pub fn check_live_model(model: &Model<f32>) -> Result<()> {
    let f = &model.config.features;
    if !model.config.arch.is_online() {
        return Err(Error::ModelMismatch(format!("{} needs the whole sequence", model.config.arch)));
    }
    if f.use_duration {
        return Err(Error::ModelMismatch("live notes carry no duration".into()));
    }
    if f.use_pitch_hints {
        return Err(Error::ModelMismatch("pitch hints are not available live".into()));
    }
    Ok(())
}

impl Session {
    pub fn new(id: impl Into<String>, model: Arc<Model<f32>>, config: SessionConfig) -> Result<Self> {
        check_live_model(&model)?;
        if !(config.ms_per_step > 0.0) {
            return Err(Error::Config("ms_per_step must be positive".into()));
        }
        let state = model.start_stream()?;
        let k = model.config.num_parts;
        Ok(Self {
            id: id.into(),
            model,
            config,
            state,
            switches: vec![true; k],
            last_ms: None,
        })
    }

    pub fn switches(&self) -> &[bool] {
        &self.switches
    }

    pub fn reset(&mut self) {
        self.state = self.model.start_stream().expect("checked at construction");
        self.switches.fill(true);
        self.last_ms = None;
    }

    /// Handles one text frame; switches and resets produce no reply.
    pub fn handle_text(&mut self, text: &str) -> Option<ServerFrame> {
        match serde_json::from_str::<ClientFrame>(text) {
            Ok(frame) => self.handle(frame),
            Err(e) => Some(ServerFrame::err(format!("malformed message: {e}"))),
        }
    }

    pub fn handle(&mut self, frame: ClientFrame) -> Option<ServerFrame> {
        match frame {
            ClientFrame::Note { ms, pitch } => Some(self.note(ms, pitch).unwrap_or_else(|e| ServerFrame::err(e.to_string()))),
            ClientFrame::Switch { part, on } => match usize::try_from(part).ok().filter(|&p| p < self.switches.len()) {
                Some(p) => {
                    self.switches[p] = on;
                    None
                }
                None => Some(ServerFrame::err(format!("no part {part}"))),
            },
            ClientFrame::Reset => {
                self.reset();
                None
            }
        }
    }

    fn note(&mut self, ms: i64, pitch: i64) -> Result<ServerFrame> {
        let pitch = u8::try_from(pitch)
            .ok()
            .filter(|&p| p <= 127)
            .ok_or_else(|| Error::Protocol(format!("pitch {pitch} outside 0..=127")))?;
        if ms < self.config.origin_ms {
            return Err(Error::Protocol(format!("time {ms} ms precedes the session origin")));
        }
        if self.last_ms.is_some_and(|last| ms < last) {
            return Err(Error::Protocol("timestamps must not decrease".into()));
        }
        if !self.switches.iter().any(|&s| s) {
            return Err(Error::Protocol("every part is switched off".into()));
        }
        let step = ((ms - self.config.origin_ms) as f64 / self.config.ms_per_step).floor();
        let step = u32::try_from(step as i64).map_err(|_| Error::Protocol("time out of range".into()))?;
        let k = self.model.config.num_parts;
        let mixture = Mixture::new(vec![Note::new(step, pitch, 1)?], vec![0], k)?;
        let allowed = Array2::from_shape_fn((1, k), |(_, p)| if self.switches[p] { 1.0 } else { 0.0 });
        let hints = Hints {
            entry: Some(allowed.clone()),
            pitch: None,
        };
        let row = encode(&mixture, &hints, &self.model.config.features)?;
        let scores = self.model.stream_step(&mut self.state, &row)?;
        let part = choose_part(scores.view(), Some(allowed.row(0)));
        self.last_ms = Some(ms);
        let probs = Prediction::from_scores(scores.insert_axis(ndarray::Axis(0)))
            .probabilities()
            .expect("scores present");
        Ok(ServerFrame::Label {
            pitch,
            part,
            scores: probs.row(0).to_vec(),
        })
    }
}

/// Client frames that replay a recorded mixture note by note. With
/// `entry_switches`, every part starts switched off and is switched on at
/// its first onset, mirroring entry hints.
pub fn replay_script(mixture: &Mixture, ms_per_step: f64, entry_switches: bool) -> Vec<ClientFrame> {
    let mut frames = Vec::with_capacity(mixture.len() + 2 * mixture.num_parts);
    let mut first = vec![None; mixture.num_parts];
    for (n, &l) in mixture.notes.iter().zip(&mixture.labels) {
        first[l].get_or_insert(n.time);
    }
    let mut on = vec![false; mixture.num_parts];
    if entry_switches {
        for part in 0..mixture.num_parts {
            frames.push(ClientFrame::Switch { part: part as i64, on: false });
        }
    }
    for n in &mixture.notes {
        if entry_switches {
            for (part, f) in first.iter().enumerate() {
                if !on[part] && f.is_some_and(|t| t <= n.time) {
                    on[part] = true;
                    frames.push(ClientFrame::Switch { part: part as i64, on: true });
                }
            }
        }
        frames.push(ClientFrame::Note {
            ms: (f64::from(n.time) * ms_per_step).round() as i64,
            pitch: i64::from(n.pitch),
        });
    }
    frames
}
