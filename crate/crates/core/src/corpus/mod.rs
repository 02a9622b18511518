//! Deterministic synthetic multi-speaker lip-reading corpus.

pub mod files;
pub mod grammar;
pub mod profile;
pub mod split;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grammar::{sample_sentence, Sentence};
pub use profile::SpeakerProfile;
pub use split::{split_dataset, Split, SplitMode};
pub use synth::{place_track, render_clip, synthesize_sample, Pose};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::vocab::Utterance;

/// Lip landmarks per frame (68-point indices 49–68).
pub const NUM_LANDMARKS: usize = 20;
/// 68-point index of the first lip landmark.
pub const FIRST_LIP_INDEX: usize = 49;

/// Grayscale frames in [0, 1], stored T×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FrameClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width || frames == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "clip {frames}×{height}×{width} cannot hold {} pixels",
                data.len()
            )));
        }
        Ok(FrameClip {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn constant(frames: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(frames, height, width, vec![value; frames * height * width]).expect("valid extents")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> f32 {
        self.data[(t * self.height + y) * self.width + x]
    }
}

/// Per-frame (x, y) pixel coordinates of K landmarks, stored T×K×2.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkTrack {
    frames: usize,
    landmarks: usize,
    data: Vec<f32>,
}

impl LandmarkTrack {
    pub fn new(frames: usize, landmarks: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * landmarks * 2 || frames == 0 || landmarks == 0 {
            return Err(Error::dim(format!(
                "track {frames}×{landmarks} cannot hold {} values",
                data.len()
            )));
        }
        Ok(LandmarkTrack {
            frames,
            landmarks,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn point(&self, t: usize, i: usize) -> (f64, f64) {
        let o = (t * self.landmarks + i) * 2;
        (self.data[o] as f64, self.data[o + 1] as f64)
    }

    /// Track with every coordinate shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f32, dy: f32) -> Self {
        let data = self
            .data
            .chunks(2)
            .flat_map(|p| [p[0] + dx, p[1] + dy])
            .collect();
        LandmarkTrack {
            data,
            ..self.clone()
        }
    }
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: FrameClip,
    pub track: LandmarkTrack,
    pub transcript: Utterance,
    pub speaker: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub speakers: usize,
    pub samples_per_speaker: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            speakers: 8,
            samples_per_speaker: 150,
            frames: 64,
            height: 96,
            width: 96,
        }
    }
}

/// A corpus record: the track is stored, the clip is rendered on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: String,
    pub speaker: usize,
    pub transcript: Utterance,
    pub track: LandmarkTrack,
    pub height: usize,
    pub width: usize,
    noise_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub profiles: Vec<SpeakerProfile>,
    pub entries: Vec<Entry>,
}

const PLACE_TAG: u64 = 0x504c_4143;
const NOISE_TAG: u64 = 0x4e4f_4953;

impl Corpus {
    /// Pure function of the config.
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        if config.speakers == 0 || config.samples_per_speaker == 0 {
            return Err(Error::arg("corpus needs at least one speaker and one sample"));
        }
        let profiles: Vec<SpeakerProfile> = (0..config.speakers)
            .map(|s| SpeakerProfile::derive(config.seed, s))
            .collect();
        let mut entries = Vec::with_capacity(config.speakers * config.samples_per_speaker);
        for profile in &profiles {
            let s = profile.speaker_id;
            for i in 0..config.samples_per_speaker {
                let mut rng = stream(config.seed, &[PLACE_TAG, s as u64, i as u64]);
                let sentence = sample_sentence(&mut rng);
                let text = sentence.text();
                let track = place_track(profile, &text, config.frames, config.height, config.width, &mut rng)?;
                entries.push(Entry {
                    id: format!("s{s:02}_{i:04}"),
                    speaker: s,
                    transcript: Utterance::new(&text)?,
                    track,
                    height: config.height,
                    width: config.width,
                    noise_seed: crate::rng::derive_seed(config.seed, &[NOISE_TAG, s as u64, i as u64]),
                });
            }
        }
        Ok(Corpus {
            config: config.clone(),
            profiles,
            entries,
        })
    }

    /// Corpus built from ingested landmark records; clips are rendered from the
    /// tracks with the appearance of each record's speaker profile.
    pub fn from_records(config: &CorpusConfig, records: Vec<files::LandmarkRecord>) -> Result<Self> {
        let speakers = records.iter().map(|r| r.speaker + 1).max().unwrap_or(0);
        let profiles = (0..speakers).map(|s| SpeakerProfile::derive(config.seed, s)).collect();
        let entries = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(Entry {
                    id: format!("rec{i:05}"),
                    speaker: r.speaker,
                    transcript: Utterance::new(&r.transcript)?,
                    track: r.track,
                    height: r.height,
                    width: r.width,
                    noise_seed: crate::rng::derive_seed(config.seed, &[NOISE_TAG, u64::MAX, i as u64]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            config: CorpusConfig {
                speakers,
                ..config.clone()
            },
            profiles,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn speaker_count(&self) -> usize {
        self.profiles.len()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.speaker).collect()
    }

    /// Renders entry `i` into a full sample.
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::arg(format!("sample index {i} out of range {}", self.len())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(e.noise_seed);
        let clip = render_clip(&e.track, &self.profiles[e.speaker], e.height, e.width, &mut rng)?;
        Ok(Sample {
            clip,
            track: e.track.clone(),
            transcript: e.transcript.clone(),
            speaker: e.speaker,
        })
    }
}
