//! On-disk datasets: one float WAV and one label container per clip, indexed
//! by a JSON-lines manifest per split.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render_scene, sample_scene, LabeledClip, SceneConfig, SceneRanges, MAX_SOURCES};
use crate::error::{invalid, io_err, Error};
use crate::features::StftConfig;
use crate::numerics::{Rng, TensorFile};
use crate::wav::{read_wav, write_wav, SampleFormat, Waveform};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { train: 205, val: 20, test: 10 }
    }
}

impl SplitCounts {
    pub fn splits(&self) -> [(&'static str, usize); 3] {
        [("train", self.train), ("val", self.val), ("test", self.test)]
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub out_dir: PathBuf,
    pub counts: SplitCounts,
    pub seed: u64,
    pub ranges: SceneRanges,
    pub stft: StftConfig,
    /// Worker threads for rendering; clips are independent.
    pub jobs: usize,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub wav_path: String,
    pub label_path: String,
    #[serde(flatten)]
    pub scene: SceneConfig,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<(), Error> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| invalid("manifest record", e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, Error> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: format!("manifest {}", path.display()),
            reason: format!("line {}: {e}", i + 1),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Label container for a clip: `labels` is `T × S × 3`, `mask` is `T × S`.
pub fn labels_to_container(clip: &LabeledClip) -> TensorFile {
    let mut f = TensorFile::new();
    f.push_meta("kind", "labels");
    f.push_meta("frames", clip.frames);
    f.push("labels", &[clip.frames, MAX_SOURCES, 3], clip.labels_flat());
    f.push("mask", &[clip.frames, MAX_SOURCES], clip.mask_flat());
    f
}

/// Clip audio and ground truth loaded back from disk.
#[derive(Clone, Debug)]
pub struct StoredClip {
    pub waveform: Waveform,
    pub frames: usize,
    /// Flattened `frames × MAX_SOURCES × 3`.
    pub labels: Vec<f64>,
    /// Flattened `frames × MAX_SOURCES`.
    pub mask: Vec<f64>,
}

pub fn load_clip(base: &Path, rec: &ManifestRecord) -> Result<StoredClip, Error> {
    let waveform = read_wav(base.join(&rec.wav_path))?;
    let label_path = base.join(&rec.label_path);
    let file = TensorFile::load(&label_path)?;
    let malformed = |reason: &str| Error::Format { what: format!("label file {}", label_path.display()), reason: reason.into() };
    let labels = file.get("labels").ok_or_else(|| malformed("missing labels tensor"))?;
    let mask = file.get("mask").ok_or_else(|| malformed("missing mask tensor"))?;
    if labels.shape.len() != 3 || labels.shape[1] != MAX_SOURCES || labels.shape[2] != 3 {
        return Err(malformed("labels must be frames × 2 × 3"));
    }
    let frames = labels.shape[0];
    if mask.shape != [frames, MAX_SOURCES] {
        return Err(malformed("mask shape does not match labels"));
    }
    if waveform.channels.len() != 2 {
        return Err(Error::Format { what: format!("audio {}", rec.wav_path), reason: "expected two channels".into() });
    }
    Ok(StoredClip { waveform, frames, labels: labels.data.clone(), mask: mask.data.clone() })
}

/// The scene for clip `index` of `split`, drawn from its own stream.
pub fn scene_for(seed: u64, split: &str, index: usize, ranges: &SceneRanges) -> Result<SceneConfig, Error> {
    let mut rng = Rng::labeled(seed, &format!("scene/{split}/{index}"));
    sample_scene(&mut rng, ranges)
}

fn render_one(spec: &DatasetSpec, split: &str, index: usize) -> Result<ManifestRecord, Error> {
    let scene = scene_for(spec.seed, split, index, &spec.ranges)?;
    let clip = render_scene(&scene, &spec.stft)?;
    let stem = format!("{split}/{index:05}");
    let wav_path = format!("{stem}.wav");
    let label_path = format!("{stem}.labels");
    let wave = Waveform { sample_rate: clip.sample_rate, channels: clip.waveform.clone() };
    write_wav(spec.out_dir.join(&wav_path), &wave, SampleFormat::Float64)?;
    labels_to_container(&clip).save(spec.out_dir.join(&label_path))?;
    Ok(ManifestRecord { wav_path, label_path, scene })
}

/// Renders every split and writes `<split>.jsonl` manifests under `out_dir`.
/// Returns the manifest paths in train, val, test order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<PathBuf>, Error> {
    spec.ranges.validate()?;
    spec.stft.validate()?;
    let mut manifests = Vec::new();
    for (split, count) in spec.counts.splits() {
        let dir = spec.out_dir.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let jobs = spec.jobs.clamp(1, count.max(1));
        let mut slots: Vec<Option<Result<ManifestRecord, Error>>> = (0..count).map(|_| None).collect();
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(count.div_ceil(jobs).max(1)).enumerate() {
                let start = w * count.div_ceil(jobs).max(1);
                s.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(render_one(spec, split, start + k));
                    }
                });
            }
        });
        let records = slots.into_iter().map(|r| r.expect("every clip rendered")).collect::<Result<Vec<_>, _>>()?;
        let path = spec.out_dir.join(format!("{split}.jsonl"));
        write_manifest(&path, &records)?;
        manifests.push(path);
    }
    Ok(manifests)
}
