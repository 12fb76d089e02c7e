//! Free-field propagation with time-varying fractional delays, and
//! first-order image sources for wall reflections.

use super::{frame_labels, signal::synth_source, LabeledClip, SceneConfig};
use crate::error::{invalid, Error};
use crate::features::StftConfig;
use crate::numerics::Rng;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width in samples of the windowed-sinc interpolator.
const SINC_HALF_WIDTH: isize = 16;

/// Closest allowed approach between a (possibly image) source and a microphone.
const MIN_DISTANCE: f64 = 1e-3;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Hann-windowed sinc interpolation of `x` at fractional index `pos`
/// (zero outside the signal).
fn interpolate(x: &[f64], pos: f64) -> f64 {
    let base = pos.floor() as isize;
    let lo = (base - SINC_HALF_WIDTH + 1).max(0);
    let hi = (base + SINC_HALF_WIDTH).min(x.len() as isize - 1);
    let mut acc = 0.0;
    for k in lo..=hi {
        let u = pos - k as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * u / SINC_HALF_WIDTH as f64).cos());
        acc += x[k as usize] * sinc(u) * w;
    }
    acc
}

pub fn mic_positions(scene: &SceneConfig) -> [[f64; 3]; 2] {
    let h = scene.mic_spacing / 2.0;
    let (c, a) = (scene.mic_center, scene.mic_axis);
    [
        [c[0] - h * a[0], c[1] - h * a[1], c[2] - h * a[2]],
        [c[0] + h * a[0], c[1] + h * a[1], c[2] + h * a[2]],
    ]
}

/// Room position of source `s` at `time`: range `distance` at the track's
/// azimuth, measured in the horizontal plane from the array axis.
pub fn source_position(scene: &SceneConfig, s: usize, time: f64) -> [f64; 3] {
    let src = &scene.sources[s];
    let az = src.azimuth_at(time).to_radians();
    let a = scene.mic_axis;
    let perp = [-a[1], a[0], 0.0];
    let (ca, sa) = (az.cos(), az.sin());
    let c = scene.mic_center;
    [
        c[0] + src.distance * (ca * a[0] + sa * perp[0]),
        c[1] + src.distance * (ca * a[1] + sa * perp[1]),
        c[2],
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Propagation delay in samples from source `s` to each microphone at `time`.
pub fn propagation_delays(scene: &SceneConfig, s: usize, time: f64) -> [f64; 2] {
    let p = source_position(scene, s, time);
    let fs = scene.sample_rate as f64;
    mic_positions(scene).map(|m| dist(p, m) / SPEED_OF_SOUND * fs)
}

/// Renders `signal` emitted from the moving point `position(time)` with gain
/// `gain / distance` and a time-varying fractional delay into `out`.
fn render_point(
    scene: &SceneConfig,
    signal: &[f64],
    gain: f64,
    position: impl Fn(f64) -> [f64; 3],
    out: &mut [Vec<f64>],
) -> Result<(), Error> {
    let fs = scene.sample_rate as f64;
    let mics = mic_positions(scene);
    let n = out[0].len();
    for i in 0..n {
        let p = position(i as f64 / fs);
        for (c, m) in mics.iter().enumerate() {
            let d = dist(p, *m);
            if d < MIN_DISTANCE {
                return Err(invalid("scene", format!("source within {MIN_DISTANCE} m of microphone {c}")));
            }
            let delay = d / SPEED_OF_SOUND * fs;
            out[c][i] += gain * interpolate(signal, i as f64 - delay) / d;
        }
    }
    Ok(())
}

fn empty_clip(scene: &SceneConfig, stft: &StftConfig) -> LabeledClip {
    let n = scene.samples();
    let (frames, labels, active) = frame_labels(scene, n, stft);
    LabeledClip { waveform: vec![vec![0.0; n]; 2], sample_rate: scene.sample_rate, frames, labels, active }
}

/// Direct-path rendering of every source, summed, with frame labels.
pub fn render_freefield(scene: &SceneConfig, stft: &StftConfig) -> Result<LabeledClip, Error> {
    if scene.sources.is_empty() {
        return Err(invalid("scene", "no sources"));
    }
    let mut clip = empty_clip(scene, stft);
    let n = scene.samples();
    for s in 0..scene.sources.len() {
        let signal = synth_source(scene.sources[s].signal_seed, n, scene.sample_rate);
        render_point(scene, &signal, 1.0, |t| source_position(scene, s, t), &mut clip.waveform)?;
    }
    Ok(clip)
}

/// Wall reflection coefficient from RT60 through Sabine's formula:
/// `alpha = 0.161 V / (S * RT60)`, `beta = sqrt(1 - alpha)`.
pub fn reflection_coefficient(room: [f64; 3], rt60: f64) -> f64 {
    let [x, y, z] = room;
    let volume = x * y * z;
    let surface = 2.0 * (x * y + x * z + y * z);
    let alpha = (0.161 * volume / (surface * rt60)).clamp(0.0, 1.0);
    (1.0 - alpha).sqrt()
}

/// Mirror of `p` across each of the six walls.
fn first_order_images(room: [f64; 3], p: [f64; 3]) -> [[f64; 3]; 6] {
    let mut out = [p; 6];
    for axis in 0..3 {
        out[2 * axis][axis] = -p[axis];
        out[2 * axis + 1][axis] = 2.0 * room[axis] - p[axis];
    }
    out
}

/// Adds the six first-order image sources of every source. Labels are not
/// changed: ground truth is the direct path.
pub fn add_reflections(clip: &LabeledClip, scene: &SceneConfig, order: u8) -> Result<LabeledClip, Error> {
    match order {
        0 => return Ok(clip.clone()),
        1 => {}
        _ => return Err(invalid("reflection order", format!("{order} is not 0 or 1"))),
    }
    let beta = reflection_coefficient(scene.room, scene.rt60);
    let mut out = clip.clone();
    let n = clip.waveform[0].len();
    for s in 0..scene.sources.len() {
        let signal = synth_source(scene.sources[s].signal_seed, n, scene.sample_rate);
        for wall in 0..6 {
            let position = |t| first_order_images(scene.room, source_position(scene, s, t))[wall];
            render_point(scene, &signal, beta, position, &mut out.waveform)?;
        }
    }
    Ok(out)
}

/// Full render: direct path, reflections of the scene's order, then noise
/// at the scene's SNR drawn from a stream keyed by the scene seed.
pub fn render_scene(scene: &SceneConfig, stft: &StftConfig) -> Result<LabeledClip, Error> {
    let direct = render_freefield(scene, stft)?;
    let reverberant = add_reflections(&direct, scene, scene.reflection_order)?;
    let mut rng = Rng::labeled(scene.seed, "noise");
    super::add_noise(&reverberant, scene.snr_db, scene.noise, scene.mic_spacing, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{NoiseKind, SourceTrack};

    pub(crate) fn scene_at(azimuth: f64, distance: f64) -> SceneConfig {
        SceneConfig {
            room: [6.0, 6.0, 3.0],
            rt60: 0.5,
            snr_db: 10.0,
            noise: NoiseKind::White,
            mic_center: [3.0, 3.0, 1.5],
            mic_axis: [1.0, 0.0, 0.0],
            mic_spacing: 0.08,
            sample_rate: 16000,
            duration: 0.5,
            sources: vec![SourceTrack { knots: vec![(0.0, azimuth), (0.5, azimuth)], distance, signal_seed: 11 }],
            reflection_order: 0,
            seed: 1,
        }
    }

    #[test]
    fn broadside_has_no_delay() {
        let s = scene_at(90.0, 1.0);
        let d = propagation_delays(&s, 0, 0.1);
        assert!((d[0] - d[1]).abs() < 1e-12);
        let clip = render_freefield(&s, &StftConfig::default()).unwrap();
        for (a, b) in clip.waveform[0].iter().zip(&clip.waveform[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn far_endfire_delay_matches_spacing() {
        let s = scene_at(0.0, 1000.0);
        let d = propagation_delays(&s, 0, 0.0);
        let expected = 0.08 / SPEED_OF_SOUND * 16000.0;
        assert!((d[0] - d[1] - expected).abs() < 1e-5, "{} vs {expected}", d[0] - d[1]);
        assert!((expected - 3.7318).abs() < 1e-3);
    }

    #[test]
    fn two_sources_sum_linearly() {
        let mut s = scene_at(30.0, 1.0);
        let mut second = s.sources[0].clone();
        second.knots = vec![(0.0, 120.0), (0.5, 140.0)];
        second.signal_seed = 99;
        s.sources.push(second.clone());
        let cfg = StftConfig::default();
        let both = render_freefield(&s, &cfg).unwrap();
        let a = render_freefield(&scene_at(30.0, 1.0), &cfg).unwrap();
        let mut only_b = scene_at(0.0, 1.0);
        only_b.sources = vec![second];
        let b = render_freefield(&only_b, &cfg).unwrap();
        for c in 0..2 {
            for i in 0..both.waveform[c].len() {
                assert!((both.waveform[c][i] - a.waveform[c][i] - b.waveform[c][i]).abs() < 1e-12);
            }
        }
        assert!(both.is_active(0, 1) && !a.is_active(0, 1));
    }

    #[test]
    fn colocated_source_is_rejected() {
        let s = scene_at(0.0, 0.04);
        assert!(render_freefield(&s, &StftConfig::default()).is_err());
    }

    #[test]
    fn order_zero_is_identity() {
        let s = scene_at(45.0, 1.0);
        let clip = render_freefield(&s, &StftConfig::default()).unwrap();
        assert_eq!(add_reflections(&clip, &s, 0).unwrap(), clip);
        assert!(add_reflections(&clip, &s, 2).is_err());
    }

    #[test]
    fn reflection_coefficient_grows_with_rt60() {
        let room = [6.0, 6.0, 3.0];
        let b: Vec<f64> = [0.3, 0.7, 1.2].iter().map(|&t| reflection_coefficient(room, t)).collect();
        assert!(b[0] < b[1] && b[1] < b[2] && b[2] < 1.0);
    }

    #[test]
    fn images_mirror_walls() {
        let imgs = first_order_images([4.0, 5.0, 3.0], [1.0, 2.0, 1.5]);
        assert_eq!(imgs[0], [-1.0, 2.0, 1.5]);
        assert_eq!(imgs[1], [7.0, 2.0, 1.5]);
        assert_eq!(imgs[5], [1.0, 2.0, 4.5]);
    }
}
