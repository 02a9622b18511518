//! Landmark-track files and corpus manifests.
//!
//! Landmark file layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "LMTK" | version | K | T | H | W | speaker_id | transcript_len
//! transcript (UTF-8, transcript_len bytes)
//! T·K pairs of little-endian f32 (x, y), frame-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Corpus, CorpusConfig, Entry, LandmarkTrack, NUM_LANDMARKS};
use crate::error::{Error, Result};

pub const LANDMARK_MAGIC: &[u8; 4] = b"LMTK";
pub const LANDMARK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRecord {
    pub track: LandmarkTrack,
    pub transcript: String,
    pub speaker: usize,
    pub height: usize,
    pub width: usize,
}

pub fn encode_landmarks(rec: &LandmarkRecord) -> Vec<u8> {
    let text = rec.transcript.as_bytes();
    let mut out = Vec::with_capacity(32 + text.len() + rec.track.raw().len() * 4);
    out.extend_from_slice(LANDMARK_MAGIC);
    for v in [
        LANDMARK_VERSION,
        rec.track.landmarks() as u32,
        rec.track.frames() as u32,
        rec.height as u32,
        rec.width as u32,
        rec.speaker as u32,
        text.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(text);
    for v in rec.track.raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse(format!("{}: truncated {what}", self.name)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses a landmark record; `name` identifies the record in error messages.
pub fn decode_landmarks(bytes: &[u8], name: &str) -> Result<LandmarkRecord> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        name,
    };
    if r.take(4, "magic")? != LANDMARK_MAGIC {
        return Err(Error::Parse(format!("{name}: malformed header (bad magic)")));
    }
    let version = r.u32("version")?;
    if version != LANDMARK_VERSION {
        return Err(Error::Parse(format!("{name}: malformed header (unsupported version {version})")));
    }
    let k = r.u32("landmark count")? as usize;
    if k != NUM_LANDMARKS {
        return Err(Error::Parse(format!(
            "{name}: landmark count {k}, expected {NUM_LANDMARKS}"
        )));
    }
    let t = r.u32("frame count")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    if t == 0 || height == 0 || width == 0 {
        return Err(Error::Parse(format!("{name}: malformed header (zero extent)")));
    }
    let speaker = r.u32("speaker id")? as usize;
    let len = r.u32("transcript length")? as usize;
    let transcript = std::str::from_utf8(r.take(len, "transcript")?)
        .map_err(|_| Error::Parse(format!("{name}: transcript is not UTF-8")))?
        .to_string();
    let payload = r.take(t * k * 8, "coordinate payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("{name}: {} trailing bytes", bytes.len() - r.pos)));
    }
    let mut data = Vec::with_capacity(t * k * 2);
    for (n, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            let (frame, lm) = (n / 2 / k, (n / 2) % k);
            return Err(Error::Parse(format!(
                "{name}: non-finite coordinate at frame {frame}, landmark {}",
                super::FIRST_LIP_INDEX + lm
            )));
        }
        data.push(v);
    }
    Ok(LandmarkRecord {
        track: LandmarkTrack::new(t, k, data)?,
        transcript,
        speaker,
        height,
        width,
    })
}

pub fn write_landmark_file(path: &Path, rec: &LandmarkRecord) -> Result<()> {
    fs::write(path, encode_landmarks(rec)).map_err(|e| Error::io(path, e))
}

pub fn load_landmark_file(path: &Path) -> Result<LandmarkRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_landmarks(&bytes, &path.display().to_string())
}

/// One manifest line: `path<TAB>speaker<TAB>split`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub speaker: usize,
    pub split: String,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\n", r.path.display(), r.speaker, r.split));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Parse(format!("{}:{}: expected path, speaker, split", path.display(), n + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(ManifestRecord {
                path: PathBuf::from(cols[0]),
                speaker: cols[1].parse().map_err(|_| bad())?,
                split: cols[2].to_string(),
            })
        })
        .collect()
}

pub fn record_of(entry: &Entry) -> LandmarkRecord {
    LandmarkRecord {
        track: entry.track.clone(),
        transcript: entry.transcript.text.clone(),
        speaker: entry.speaker,
        height: entry.height,
        width: entry.width,
    }
}

/// Writes `landmarks/<id>.lmk` for every entry plus `manifest.tsv` under
/// `dir`; manifest paths are relative to `dir`.
pub fn export_corpus(corpus: &Corpus, dir: &Path, split_of: &dyn Fn(usize) -> String) -> Result<Vec<ManifestRecord>> {
    let lm = dir.join("landmarks");
    fs::create_dir_all(&lm).map_err(|e| Error::io(&lm, e))?;
    let mut records = Vec::with_capacity(corpus.len());
    for (i, e) in corpus.entries.iter().enumerate() {
        let rel = PathBuf::from("landmarks").join(format!("{}.lmk", e.id));
        write_landmark_file(&dir.join(&rel), &record_of(e))?;
        records.push(ManifestRecord {
            path: rel,
            speaker: e.speaker,
            split: split_of(i),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &records)?;
    Ok(records)
}

/// Corpus from a manifest of landmark files; relative paths resolve
/// against the manifest's directory.
pub fn ingest_manifest(config: &CorpusConfig, manifest: &Path) -> Result<Corpus> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?
        .iter()
        .map(|m| {
            let rec = load_landmark_file(&base.join(&m.path))?;
            if rec.speaker != m.speaker {
                return Err(Error::Parse(format!(
                    "{}: speaker {} disagrees with manifest speaker {}",
                    m.path.display(),
                    rec.speaker,
                    m.speaker
                )));
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_records(config, records)
}
