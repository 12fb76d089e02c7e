//! Synthetic moving-source scenes for a two-microphone array.
//!
//! Scenes are drawn uniformly from the simulation parameter ranges (room
//! size, RT60, SNR, azimuth), rendered with a free-field propagation model
//! plus optional first-order wall reflections, and labelled per STFT frame
//! with Cartesian unit direction vectors in the array frame.

mod dataset;
mod noise;
mod render;
mod signal;

pub use dataset::{
    generate_dataset, labels_to_container, load_clip, read_manifest, scene_for, write_manifest, DatasetSpec, ManifestRecord,
    SplitCounts, StoredClip,
};
pub use noise::{add_noise, coherence, noise_pair};
pub use render::{
    add_reflections, mic_positions, propagation_delays, reflection_coefficient, render_freefield, render_scene,
    source_position, SPEED_OF_SOUND,
};
pub use signal::synth_source;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};
use crate::features::StftConfig;
use crate::numerics::Rng;

/// Slots in every label tensor; at most this many sources per scene.
pub const MAX_SOURCES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Diffuse,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Diffuse];
}

/// One source moving along piecewise-linear azimuth knots at fixed range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTrack {
    /// `(time in seconds, azimuth in degrees)`, strictly increasing in time.
    pub knots: Vec<(f64, f64)>,
    /// Horizontal distance from the array centre in metres.
    pub distance: f64,
    /// Seed of the synthetic source signal.
    pub signal_seed: u64,
}

impl SourceTrack {
    /// Linearly interpolated azimuth in degrees, clamped to the knot span.
    pub fn azimuth_at(&self, time: f64) -> f64 {
        let k = &self.knots;
        if time <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((t0, a0), (t1, a1)) = (w[0], w[1]);
            if time <= t1 {
                return a0 + (a1 - a0) * (time - t0) / (t1 - t0);
            }
        }
        k[k.len() - 1].1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Room extents `(Lx, Ly, Lz)` in metres.
    pub room: [f64; 3],
    pub rt60: f64,
    pub snr_db: f64,
    pub noise: NoiseKind,
    pub mic_center: [f64; 3],
    /// Horizontal unit vector from microphone 0 to microphone 1.
    pub mic_axis: [f64; 3],
    pub mic_spacing: f64,
    pub sample_rate: u32,
    pub duration: f64,
    pub sources: Vec<SourceTrack>,
    /// Reflection order rendered into the clip (0 or 1).
    pub reflection_order: u8,
    pub seed: u64,
}

/// Uniform sampling intervals for scene parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRanges {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub rt60: (f64, f64),
    pub snr_db: (f64, f64),
    pub azimuth: (f64, f64),
    /// Largest azimuth change over one clip, degrees.
    pub max_sweep: f64,
    pub distance: (f64, f64),
    /// Horizontal clearance between the array centre and the walls.
    pub wall_margin: f64,
    pub height: (f64, f64),
    pub duration: f64,
    pub sample_rate: u32,
    pub mic_spacing: f64,
    pub n_sources: usize,
    pub reflection_order: u8,
}

impl Default for SceneRanges {
    fn default() -> Self {
        SceneRanges {
            room_min: [4.0, 5.0, 3.0],
            room_max: [10.0, 8.0, 6.0],
            rt60: (0.2, 1.3),
            snr_db: (-5.0, 15.0),
            azimuth: (0.0, 180.0),
            max_sweep: 90.0,
            distance: (0.5, 1.4),
            wall_margin: 1.5,
            height: (1.0, 1.8),
            duration: 4.0,
            sample_rate: 16_000,
            mic_spacing: 0.08,
            n_sources: 1,
            reflection_order: 0,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<(), Error> {
        let ordered = |(a, b): (f64, f64)| a <= b;
        if !(1..=MAX_SOURCES).contains(&self.n_sources) {
            return Err(invalid("scene ranges", format!("n_sources {} not in 1..={MAX_SOURCES}", self.n_sources)));
        }
        if self.reflection_order > 1 {
            return Err(invalid("scene ranges", "reflection order must be 0 or 1"));
        }
        if !(ordered(self.rt60) && ordered(self.snr_db) && ordered(self.azimuth) && ordered(self.distance) && ordered(self.height))
            || (0..3).any(|i| self.room_min[i] > self.room_max[i])
        {
            return Err(invalid("scene ranges", "every interval needs lo <= hi"));
        }
        if self.distance.1 + 0.05 > self.wall_margin || 2.0 * self.wall_margin > self.room_min[0].min(self.room_min[1]) {
            return Err(invalid("scene ranges", "source range does not fit inside the smallest room"));
        }
        if self.duration <= 0.0 || self.max_sweep < 0.0 {
            return Err(invalid("scene ranges", "duration must be positive and sweep non-negative"));
        }
        Ok(())
    }
}

/// Draws a scene uniformly from `ranges`.
pub fn sample_scene(rng: &mut Rng, ranges: &SceneRanges) -> Result<SceneConfig, Error> {
    ranges.validate()?;
    let seed = rng.next_u64();
    let room = [0, 1, 2].map(|i| rng.uniform_range(ranges.room_min[i], ranges.room_max[i]));
    let rt60 = rng.uniform_range(ranges.rt60.0, ranges.rt60.1);
    let snr_db = rng.uniform_range(ranges.snr_db.0, ranges.snr_db.1);
    let noise = NoiseKind::ALL[rng.below(NoiseKind::ALL.len())];
    let m = ranges.wall_margin;
    let height_hi = ranges.height.1.min(room[2] - 0.5);
    let mic_center = [
        rng.uniform_range(m, room[0] - m),
        rng.uniform_range(m, room[1] - m),
        rng.uniform_range(ranges.height.0, height_hi),
    ];
    let phi = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let mic_axis = [phi.cos(), phi.sin(), 0.0];
    let (lo, hi) = ranges.azimuth;
    let sources = (0..ranges.n_sources)
        .map(|_| {
            let start = rng.uniform_range(lo, hi);
            let end = rng.uniform_range((start - ranges.max_sweep).max(lo), (start + ranges.max_sweep).min(hi));
            SourceTrack {
                knots: vec![(0.0, start), (ranges.duration, end)],
                distance: rng.uniform_range(ranges.distance.0, ranges.distance.1),
                signal_seed: rng.next_u64(),
            }
        })
        .collect();
    Ok(SceneConfig {
        room,
        rt60,
        snr_db,
        noise,
        mic_center,
        mic_axis,
        mic_spacing: ranges.mic_spacing,
        sample_rate: ranges.sample_rate,
        duration: ranges.duration,
        sources,
        reflection_order: ranges.reflection_order,
        seed,
    })
}

/// A rendered clip with per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    /// `2 × n` samples.
    pub waveform: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub frames: usize,
    /// `frames × MAX_SOURCES` unit vectors; inactive slots hold `(1, 0, 0)`.
    pub labels: Vec<[f64; 3]>,
    /// `frames × MAX_SOURCES` activity flags.
    pub active: Vec<bool>,
}

impl LabeledClip {
    pub fn label(&self, t: usize, s: usize) -> [f64; 3] {
        self.labels[t * MAX_SOURCES + s]
    }

    pub fn is_active(&self, t: usize, s: usize) -> bool {
        self.active[t * MAX_SOURCES + s]
    }

    pub fn labels_flat(&self) -> Vec<f64> {
        self.labels.iter().flatten().copied().collect()
    }

    pub fn mask_flat(&self) -> Vec<f64> {
        self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }
}

/// Unit direction in the array frame for an azimuth in degrees (planar: z = 0).
pub fn azimuth_to_vector(deg: f64) -> [f64; 3] {
    let r = deg.to_radians();
    [r.cos(), r.sin(), 0.0]
}

/// Labels for every STFT frame centre of a clip of `samples` samples.
pub fn frame_labels(scene: &SceneConfig, samples: usize, stft: &StftConfig) -> (usize, Vec<[f64; 3]>, Vec<bool>) {
    let frames = stft.frame_count(samples);
    let mut labels = vec![[1.0, 0.0, 0.0]; frames * MAX_SOURCES];
    let mut active = vec![false; frames * MAX_SOURCES];
    for t in 0..frames {
        let time = stft.frame_center(t);
        for (s, src) in scene.sources.iter().enumerate().take(MAX_SOURCES) {
            labels[t * MAX_SOURCES + s] = azimuth_to_vector(src.azimuth_at(time));
            active[t * MAX_SOURCES + s] = true;
        }
    }
    (frames, labels, active)
}

impl SceneConfig {
    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// Checks the parameter intervals of the simulated data.
    pub fn validate(&self) -> Result<(), Error> {
        let within = |v: f64, lo: f64, hi: f64| v >= lo - 1e-9 && v <= hi + 1e-9;
        let r = SceneRanges::default();
        if !(0..3).all(|i| within(self.room[i], r.room_min[i], r.room_max[i])) {
            return Err(invalid("scene", format!("room {:?} outside the simulated range", self.room)));
        }
        if !within(self.rt60, r.rt60.0, r.rt60.1) || !within(self.snr_db, r.snr_db.0, r.snr_db.1) {
            return Err(invalid("scene", "rt60 or snr outside the simulated range"));
        }
        if self.sources.is_empty() || self.sources.len() > MAX_SOURCES {
            return Err(invalid("scene", format!("{} sources", self.sources.len())));
        }
        for s in &self.sources {
            if s.knots.is_empty() || s.knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(invalid("scene", "trajectory knots must be non-empty and increasing in time"));
            }
            if s.knots.iter().any(|k| !within(k.1, 0.0, 180.0)) {
                return Err(invalid("scene", "azimuth outside [0, 180] degrees"));
            }
        }
        if self.mic_axis[2].abs() > 1e-12 {
            return Err(invalid("scene", "microphones must lie in a horizontal plane"));
        }
        Ok(())
    }
}
