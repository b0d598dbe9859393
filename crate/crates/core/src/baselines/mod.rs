//! Non-neural and simple learned baselines.

mod closest;
mod mlp;
mod zones;

pub use closest::{closest_pitch, ClosestPitch, Onsets, MONO_PENALTY};
pub use zones::{fit_zones, fit_zones_histogram, oracle_zones, PitchHistogram, ZoneSearch, ZoneSet};
pub use mlp::{evaluate_mlp, train_mlp, Mlp, MlpConfig, MlpTrainConfig, MLP_KIND};
