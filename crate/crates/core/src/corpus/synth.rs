//! Articulatory pose model, lip-contour placement and contour rasterisation.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::function::erf::erf;

use super::grammar::Sentence;
use super::profile::SpeakerProfile;
use super::{FrameClip, LandmarkTrack, Sample, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::vocab::Utterance;

/// Lip configuration; every component lies in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub opening: f64,
    pub width: f64,
    pub rounding: f64,
}

const fn pose(opening: f64, width: f64, rounding: f64) -> Pose {
    Pose {
        opening,
        width,
        rounding,
    }
}

pub const REST: Pose = pose(0.15, 0.5, 0.0);

/// Frozen character → pose table. Vowels open, bilabials closed, rounded
/// vowels narrow. Characters outside a–z map to the rest pose.
pub fn pose_for(c: char) -> Pose {
    match c {
        'a' => pose(1.0, 0.65, 0.0),
        'e' => pose(0.65, 0.85, 0.0),
        'i' => pose(0.45, 1.0, 0.0),
        'o' => pose(0.8, 0.3, 0.85),
        'u' => pose(0.35, 0.2, 1.0),
        'y' => pose(0.45, 0.9, 0.1),
        'b' => pose(0.0, 0.5, 0.0),
        'm' => pose(0.0, 0.55, 0.05),
        'p' => pose(0.0, 0.45, 0.0),
        'f' => pose(0.12, 0.6, 0.0),
        'v' => pose(0.12, 0.55, 0.05),
        'w' => pose(0.2, 0.15, 0.95),
        'q' => pose(0.25, 0.25, 0.8),
        't' => pose(0.3, 0.6, 0.0),
        'd' => pose(0.32, 0.58, 0.05),
        'n' => pose(0.28, 0.55, 0.1),
        'l' => pose(0.4, 0.55, 0.1),
        's' => pose(0.2, 0.8, 0.0),
        'z' => pose(0.22, 0.75, 0.05),
        'r' => pose(0.3, 0.35, 0.6),
        'c' => pose(0.35, 0.7, 0.0),
        'k' => pose(0.4, 0.6, 0.05),
        'g' => pose(0.42, 0.55, 0.1),
        'h' => pose(0.55, 0.6, 0.0),
        'j' => pose(0.3, 0.4, 0.5),
        'x' => pose(0.3, 0.7, 0.2),
        _ => REST,
    }
}

fn lerp(a: Pose, b: Pose, u: f64) -> Pose {
    pose(
        a.opening + (b.opening - a.opening) * u,
        a.width + (b.width - a.width) * u,
        a.rounding + (b.rounding - a.rounding) * u,
    )
}

/// Per-frame poses: character `c` peaks at frame `(c + ½)·T/L`, linear in between.
pub fn pose_sequence(text: &str, frames: usize) -> Result<Vec<Pose>> {
    let keys: Vec<Pose> = text.chars().map(pose_for).collect();
    let l = keys.len();
    if l == 0 {
        return Ok(vec![REST; frames]);
    }
    if frames < 2 * l {
        return Err(Error::Capacity(format!(
            "{frames} frames cannot carry {l} characters (need at least {})",
            2 * l
        )));
    }
    let step = frames as f64 / l as f64;
    Ok((0..frames)
        .map(|t| {
            let pos = (t as f64) / step - 0.5;
            if pos <= 0.0 {
                keys[0]
            } else if pos >= (l - 1) as f64 {
                keys[l - 1]
            } else {
                let i = pos.floor() as usize;
                lerp(keys[i], keys[i + 1], pos - i as f64)
            }
        })
        .collect())
}

/// Geometry of one frame in pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub center: (f64, f64),
    pub scale: f64,
}

/// The 20 lip landmarks (68-point indices 49–68) for a pose.
/// Outer ring: 49 left corner, 52 top, 55 right corner, 58 bottom.
/// Inner ring: 61 left corner, 63 top, 65 right corner, 67 bottom.
pub fn place_landmarks(p: Pose, profile: &SpeakerProfile, at: Placement) -> [(f64, f64); NUM_LANDMARKS] {
    let rate = profile.articulation_rate;
    let e = |rest: f64, v: f64| (rest + rate * (v - rest)).clamp(0.0, 1.0);
    let opening = e(REST.opening, p.opening);
    let width = e(REST.width, p.width);
    let rounding = e(REST.rounding, p.rounding);
    let aj = profile.aspect_jitter;
    let half_w = 0.5 * profile.base_width * at.scale * (1.0 + aj) * (0.8 + 0.4 * width) * (1.0 - 0.3 * rounding);
    let half_h_outer = 0.5 * profile.base_height * at.scale * (1.0 - aj) * (0.55 + 0.45 * opening);
    let half_h_inner = 0.5 * profile.base_height * at.scale * (1.0 - aj) * 0.85 * opening;
    let half_w_inner = half_w * (0.75 - 0.15 * rounding);
    let (cx, cy) = at.center;
    let mut pts = [(0.0, 0.0); NUM_LANDMARKS];
    for (k, pt) in pts.iter_mut().take(12).enumerate() {
        let th = std::f64::consts::PI - 2.0 * std::f64::consts::PI * k as f64 / 12.0;
        *pt = (cx + half_w * th.cos(), cy - half_h_outer * th.sin());
    }
    for j in 0..8 {
        let th = std::f64::consts::PI - 2.0 * std::f64::consts::PI * j as f64 / 8.0;
        pts[12 + j] = (cx + half_w_inner * th.cos(), cy - half_h_inner * th.sin());
    }
    pts
}

/// Lays out the landmark track for a transcript. Consumes two normal draws
/// from `rng` for the per-sample head offset.
pub fn place_track<R: Rng + ?Sized>(
    profile: &SpeakerProfile,
    text: &str,
    frames: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<LandmarkTrack> {
    let poses = pose_sequence(text, frames)?;
    let scale = width as f64 / 96.0;
    let jitter = Normal::new(0.0, scale).expect("positive sd");
    let (jx, jy): (f64, f64) = (jitter.sample(rng), jitter.sample(rng));
    let center = (
        width as f64 / 2.0 + profile.center_offset.0 * width as f64 + jx,
        height as f64 / 2.0 + profile.center_offset.1 * height as f64 + jy,
    );
    let at = Placement { center, scale };
    let mut data = Vec::with_capacity(frames * NUM_LANDMARKS * 2);
    for p in poses {
        for (x, y) in place_landmarks(p, profile, at) {
            data.push(x.clamp(0.0, (width - 1) as f64) as f32);
            data.push(y.clamp(0.0, (height - 1) as f64) as f32);
        }
    }
    LandmarkTrack::new(frames, NUM_LANDMARKS, data)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + u * dx - p.0, a.1 + u * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Distance to the closed polygon boundary, positive inside.
fn signed_distance(p: (f64, f64), poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut dist = f64::INFINITY;
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        dist = dist.min(segment_distance(p, a, b));
        if (a.1 > p.1) != (b.1 > p.1) {
            let x = a.0 + (p.1 - a.1) / (b.1 - a.1) * (b.0 - a.0);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    if inside {
        dist
    } else {
        -dist
    }
}

const EDGE_SIGMA: f64 = 0.7;

fn coverage(d: f64) -> f64 {
    0.5 * (1.0 + erf(d / (EDGE_SIGMA * std::f64::consts::SQRT_2)))
}

/// Rasterises the outer and inner lip rings of every frame with a Gaussian
/// edge profile, then adds `profile.noise_level` pixel noise from `rng`.
pub fn render_clip<R: Rng + ?Sized>(
    track: &LandmarkTrack,
    profile: &SpeakerProfile,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<FrameClip> {
    if track.landmarks() != NUM_LANDMARKS {
        return Err(Error::arg(format!(
            "rendering needs {NUM_LANDMARKS} landmarks, track has {}",
            track.landmarks()
        )));
    }
    let frames = track.frames();
    let mut data = vec![profile.skin_tone as f32; frames * height * width];
    let margin = 4.0 * EDGE_SIGMA + 1.0;
    for t in 0..frames {
        let pts: Vec<(f64, f64)> = (0..NUM_LANDMARKS).map(|i| track.point(t, i)).collect();
        let (outer, inner) = pts.split_at(12);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in outer {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let xa = ((x0 - margin).floor().max(0.0)) as usize;
        let xb = ((x1 + margin).ceil().min((width - 1) as f64)) as usize;
        let ya = ((y0 - margin).floor().max(0.0)) as usize;
        let yb = ((y1 + margin).ceil().min((height - 1) as f64)) as usize;
        let frame = &mut data[t * height * width..(t + 1) * height * width];
        for y in ya..=yb {
            for x in xa..=xb {
                let p = (x as f64, y as f64);
                let c_out = coverage(signed_distance(p, outer));
                let c_in = coverage(signed_distance(p, inner));
                let v = profile.skin_tone
                    + (profile.lip_tone - profile.skin_tone) * c_out
                    + (profile.interior_tone - profile.lip_tone) * c_in.min(c_out);
                frame[y * width + x] = v as f32;
            }
        }
    }
    if profile.noise_level > 0.0 {
        for v in data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = (*v as f64 + profile.noise_level * z).clamp(0.0, 1.0) as f32;
        }
    }
    FrameClip::new(frames, height, width, data)
}

/// Full synthetic sample: track placement followed by rendering, both drawing
/// from `rng` in that order.
pub fn synthesize_sample<R: Rng + ?Sized>(
    profile: &SpeakerProfile,
    sentence: &Sentence,
    frames: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Sample> {
    let text = sentence.text();
    let track = place_track(profile, &text, frames, height, width, rng)?;
    let clip = render_clip(&track, profile, height, width, rng)?;
    Ok(Sample {
        clip,
        track,
        transcript: Utterance::new(&text)?,
        speaker: profile.speaker_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::grammar::sample_sentence;
    use crate::rng::stream;

    fn sentence() -> Sentence {
        Sentence::parse("place white with z seven please").unwrap()
    }

    #[test]
    fn noiseless_synthesis_is_bit_identical() {
        let p = SpeakerProfile::derive(5, 2).noiseless();
        let a = synthesize_sample(&p, &sentence(), 64, 96, 96, &mut stream(1, &[])).unwrap();
        let b = synthesize_sample(&p, &sentence(), 64, 96, 96, &mut stream(1, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_frames_is_capacity_error() {
        let p = SpeakerProfile::derive(5, 0);
        let r = synthesize_sample(&p, &sentence(), 40, 96, 96, &mut stream(1, &[]));
        assert!(matches!(r, Err(Error::Capacity(_))));
    }

    #[test]
    fn profiles_share_poses_but_not_coordinates() {
        let s = sentence();
        let poses = pose_sequence(&s.text(), 64).unwrap();
        assert_eq!(poses, pose_sequence(&s.text(), 64).unwrap());
        let a = place_track(&SpeakerProfile::derive(5, 0), &s.text(), 64, 96, 96, &mut stream(2, &[])).unwrap();
        let b = place_track(&SpeakerProfile::derive(5, 1), &s.text(), 64, 96, 96, &mut stream(2, &[])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn open_vowel_has_taller_inner_lip_than_bilabial() {
        let at = Placement {
            center: (48.0, 48.0),
            scale: 1.0,
        };
        for s in 0..32 {
            let p = SpeakerProfile::derive(9, s);
            let open = place_landmarks(pose_for('a'), &p, at);
            let closed = place_landmarks(pose_for('b'), &p, at);
            // 63 (top) and 67 (bottom) sit at offsets 14 and 18 of the lip block
            let h = |pts: &[(f64, f64)]| (pts[18].1 - pts[14].1).abs();
            assert!(h(&open) > h(&closed), "speaker {s}");
        }
    }

    #[test]
    fn samples_respect_bounds() {
        let mut rng = stream(4, &[]);
        for spk in 0..4 {
            let p = SpeakerProfile::derive(3, spk);
            let s = synthesize_sample(&p, &sample_sentence(&mut rng), 64, 96, 96, &mut rng).unwrap();
            assert_eq!(s.clip.frames(), s.track.frames());
            assert!(s.clip.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for t in 0..64 {
                for i in 0..NUM_LANDMARKS {
                    let (x, y) = s.track.point(t, i);
                    assert!((0.0..=95.0).contains(&x) && (0.0..=95.0).contains(&y));
                }
            }
        }
    }

    #[test]
    fn re_rendering_stored_track_reproduces_clip() {
        let p = SpeakerProfile::derive(8, 1).noiseless();
        let s = synthesize_sample(&p, &sentence(), 64, 96, 96, &mut stream(3, &[])).unwrap();
        let again = render_clip(&s.track, &p, 96, 96, &mut stream(99, &[])).unwrap();
        assert_eq!(again, s.clip);
    }
}
