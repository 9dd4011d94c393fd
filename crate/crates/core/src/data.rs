//! Deterministic synthetic "visual word" corpus.
//!
//! Each class renders an anti-aliased ellipse (the "mouth") whose interior
//! carries a fine aperture pattern, moving along a class-specific trajectory.
//! The class structure mirrors the ambiguity the model is built for:
//!
//! * texture-pair classes (the first half) share their motion program
//!   pairwise and differ only in the frame-level aperture pattern, which
//!   flips polarity every frame so temporal smoothing washes it out;
//! * motion-pair classes (the second half) share one texture program and
//!   differ only in orbital speed, with uniformly random start phase and
//!   random direction, so single frames carry no class information.
//!
//! Horizontal flipping is label-preserving by construction: oscillation
//! phases and orbit directions are uniformly random per sample.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor_from, write_tensor_to};
use crate::tensor::Tensor;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"MGSQ";
pub const SEQUENCE_VERSION: u32 = 1;

/// One labeled grayscale video sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub label: usize,
    /// Derived seed that fully determined this sample's jitter.
    pub seed: u64,
    /// `[1, T, H, W]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
}

/// Corpus geometry and determinism root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Additive pixel noise sigma.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            t: 8,
            h: 32,
            w: 32,
            train_per_class: 120,
            val_per_class: 30,
            noise: 0.02,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(format!("dataset spec parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 4 || self.classes % 4 != 0 {
            return Err(Error::InvalidConfig(
                "classes must be a positive multiple of 4 (half texture pairs, half motion pairs)".into(),
            ));
        }
        if self.t < 2 || self.h < 16 || self.w < 16 {
            return Err(Error::InvalidConfig("corpus needs t >= 2 and at least 16x16 frames".into()));
        }
        Ok(())
    }

    /// Class ids of the motion-pair group (separable only by motion).
    pub fn motion_classes(&self) -> std::ops::Range<usize> {
        self.classes / 2..self.classes
    }

    /// Class ids of the texture-pair group (pairs share motion).
    pub fn texture_classes(&self) -> std::ops::Range<usize> {
        0..self.classes / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureKind {
    Stripes,
    Checks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureProgram {
    pub kind: TextureKind,
    /// Pattern polarity alternates every frame.
    pub flicker: bool,
    pub period: f64,
    pub amp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionKind {
    /// Horizontal oscillation, amplitude in pixels, frequency in cycles/frame.
    OscillateX { amp: f64, freq: f64 },
    /// Vertical oscillation.
    OscillateY { amp: f64, freq: f64 },
    /// Circular orbit at `step` radians per frame; direction is per-sample.
    Orbit { radius: f64, step: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassProgram {
    pub motion: MotionKind,
    pub texture: TextureProgram,
    /// Classes sharing this id draw identical motion jitter per sample index.
    pub motion_stream: u64,
}

/// Orbital speeds (radians/frame) cycled by the motion-pair classes.
const ORBIT_STEPS: [f64; 4] = [0.21, 0.42, 0.66, 0.96];

/// The per-class motion and texture programs.
pub fn class_program(spec: &DatasetSpec, class_id: usize) -> Result<ClassProgram> {
    if class_id >= spec.classes {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range 0..{}",
            spec.classes
        )));
    }
    let tex = |kind| TextureProgram {
        kind,
        flicker: true,
        period: 4.5,
        amp: 0.22,
    };
    let half = spec.classes / 2;
    if class_id < half {
        // texture group: pair 2k/2k+1 shares one oscillation, alternating axes
        let pair = class_id / 2;
        let motion = if pair % 2 == 0 {
            MotionKind::OscillateX { amp: 6.0, freq: 0.125 }
        } else {
            MotionKind::OscillateY { amp: 6.0, freq: 0.125 }
        };
        let kind = if class_id % 2 == 0 {
            TextureKind::Stripes
        } else {
            TextureKind::Checks
        };
        Ok(ClassProgram {
            motion,
            texture: tex(kind),
            motion_stream: 1_000 + pair as u64,
        })
    } else {
        // motion group: one shared texture, orbital speed is the class
        let idx = class_id - half;
        let step = ORBIT_STEPS[idx % ORBIT_STEPS.len()] * (1.0 + (idx / ORBIT_STEPS.len()) as f64);
        Ok(ClassProgram {
            motion: MotionKind::Orbit { radius: 7.0, step },
            texture: tex(TextureKind::Stripes),
            motion_stream: 2_000 + class_id as u64,
        })
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^ (h >> 33)
}

fn stream_rng(seed: u64, a: u64, b: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed, a), b), tag))
}

struct SampleJitter {
    phase: f64,
    direction: f64,
    center_dx: f64,
    center_dy: f64,
    scale: f64,
}

fn draw_jitter(rng: &mut ChaCha8Rng) -> SampleJitter {
    SampleJitter {
        phase: rng.random::<f64>() * std::f64::consts::TAU,
        direction: if rng.random::<bool>() { 1.0 } else { -1.0 },
        center_dx: rng.random::<f64>() * 2.0 - 1.0,
        center_dy: rng.random::<f64>() * 2.0 - 1.0,
        scale: 0.9 + rng.random::<f64>() * 0.2,
    }
}

/// Ellipse center at frame `t` for a motion program with given jitter.
fn center_at(motion: &MotionKind, j: &SampleJitter, spec: &DatasetSpec, t: usize) -> (f64, f64) {
    let cx0 = spec.w as f64 / 2.0 - 0.5 + j.center_dx;
    let cy0 = spec.h as f64 / 2.0 - 0.5 + j.center_dy;
    let tf = t as f64;
    match *motion {
        MotionKind::OscillateX { amp, freq } => (
            cx0 + amp * (std::f64::consts::TAU * freq * tf + j.phase).sin(),
            cy0,
        ),
        MotionKind::OscillateY { amp, freq } => (
            cx0,
            cy0 + amp * (std::f64::consts::TAU * freq * tf + j.phase).sin(),
        ),
        MotionKind::Orbit { radius, step } => {
            let ang = j.phase + j.direction * step * tf;
            (cx0 + radius * ang.cos(), cy0 + radius * ang.sin())
        }
    }
}

const BACKGROUND: f64 = 0.08;
const FILL_BASE: f64 = 0.75;
const ELLIPSE_RX: f64 = 6.5;
const ELLIPSE_RY: f64 = 4.2;

/// Renders one fully deterministic sample.
///
/// All jitter derives from `(spec.seed, class, index)`; texture-pair classes
/// share their motion jitter stream so paired samples trace identical
/// centroids.
pub fn generate_sample(spec: &DatasetSpec, class_id: usize, sample_index: usize) -> Result<SampleRecord> {
    spec.validate()?;
    let program = class_program(spec, class_id)?;
    let mut motion_rng = stream_rng(spec.seed, program.motion_stream, sample_index as u64, 1);
    let mut tex_rng = stream_rng(spec.seed, class_id as u64, sample_index as u64, 2);
    let jitter = draw_jitter(&mut motion_rng);
    let pattern_phase = tex_rng.random::<f64>() * program.texture.period;
    let start_polarity = if tex_rng.random::<bool>() { 1.0 } else { -1.0 };

    let (t_n, h, w) = (spec.t, spec.h, spec.w);
    let mut data = vec![0f32; t_n * h * w];
    let rx = ELLIPSE_RX * jitter.scale;
    let ry = ELLIPSE_RY * jitter.scale;

    for t in 0..t_n {
        let (cx, cy) = center_at(&program.motion, &jitter, spec, t);
        let polarity = if program.texture.flicker {
            start_polarity * if t % 2 == 0 { 1.0 } else { -1.0 }
        } else {
            start_polarity
        };
        let frame = &mut data[t * h * w..][..h * w];
        // bounding box of the ellipse, clamped to the frame
        let y0 = ((cy - ry).floor().max(0.0)) as usize;
        let y1 = ((cy + ry).ceil().min(h as f64 - 1.0)) as usize;
        let x0 = ((cx - rx).floor().max(0.0)) as usize;
        let x1 = ((cx + rx).ceil().min(w as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                // 4x4 subpixel coverage
                let mut hits = 0u32;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                        let dy = (py - cy) / ry;
                        let dx = (px - cx) / rx;
                        if dx * dx + dy * dy <= 1.0 {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f64 / 16.0;
                let tau = std::f64::consts::TAU;
                let p = program.texture.period;
                let pat = match program.texture.kind {
                    TextureKind::Stripes => (tau * ((y as f64 - cy + pattern_phase) / p)).sin(),
                    TextureKind::Checks => {
                        (tau * ((y as f64 - cy + pattern_phase) / p)).sin()
                            * (tau * ((x as f64 - cx + pattern_phase) / p)).sin()
                            * std::f64::consts::SQRT_2
                    }
                };
                let fill = FILL_BASE + program.texture.amp * polarity * pat;
                frame[y * w + x] = (cov * (fill - BACKGROUND)) as f32;
            }
        }
    }
    // background + noise + clamp
    for v in data.iter_mut() {
        let noise = crate::nn::init::normal(&mut tex_rng) * spec.noise;
        *v = ((*v as f64 + BACKGROUND + noise).clamp(0.0, 1.0)) as f32;
    }

    Ok(SampleRecord {
        label: class_id,
        seed: mix(mix(spec.seed, class_id as u64), sample_index as u64),
        frames: Tensor::from_vec(&[1, t_n, h, w], data)?,
    })
}

/// Mirrors every frame about the vertical axis; the label is unchanged.
pub fn flip_horizontal(rec: &SampleRecord) -> SampleRecord {
    let [c, t_n, h, w] = *rec.frames.shape() else {
        unreachable!("SampleRecord frames are rank 4");
    };
    let src = rec.frames.data();
    let mut data = vec![0f32; src.len()];
    for ct in 0..c * t_n {
        for y in 0..h {
            let row = ct * h * w + y * w;
            for x in 0..w {
                data[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    SampleRecord {
        label: rec.label,
        seed: rec.seed,
        frames: Tensor::from_vec(rec.frames.shape(), data).expect("same shape"),
    }
}

/// Threshold-mask centroid of the bright region of frame `t` (x, y in pixels).
pub fn bright_centroid(rec: &SampleRecord, t: usize) -> (f64, f64) {
    let [_, t_n, h, w] = *rec.frames.shape() else {
        unreachable!();
    };
    assert!(t < t_n);
    let frame = &rec.frames.data()[t * h * w..][..h * w];
    let (mut sx, mut sy, mut n) = (0f64, 0f64, 0f64);
    for y in 0..h {
        for x in 0..w {
            if frame[y * w + x] > 0.4 {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n.max(1.0), sy / n.max(1.0))
}

// ---------------------------------------------------------------------------
// corpus generation and file formats
// ---------------------------------------------------------------------------

/// All train and val records of the corpus, class-balanced, with disjoint
/// sample-index ranges (val indices start at `train_per_class`).
pub fn generate_corpus(spec: &DatasetSpec) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    let mut val = Vec::with_capacity(spec.classes * spec.val_per_class);
    for class in 0..spec.classes {
        for i in 0..spec.train_per_class {
            train.push(generate_sample(spec, class, i)?);
        }
        for i in 0..spec.val_per_class {
            val.push(generate_sample(spec, class, spec.train_per_class + i)?);
        }
    }
    Ok((train, val))
}

pub fn write_sequence_to<W: Write>(w: &mut W, rec: &SampleRecord) -> Result<()> {
    w.write_all(SEQUENCE_MAGIC)?;
    w.write_all(&SEQUENCE_VERSION.to_le_bytes())?;
    w.write_all(&(rec.label as u32).to_le_bytes())?;
    w.write_all(&rec.seed.to_le_bytes())?;
    write_tensor_to(w, &rec.frames)?;
    Ok(())
}

pub fn read_sequence_from<R: Read>(r: &mut R, path: &str) -> Result<SampleRecord> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::TruncatedPayload {
        path: path.to_string(),
        detail: "file ended while reading magic".to_string(),
    })?;
    if &magic != SEQUENCE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: "MGSQ",
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| truncated(path, "version"))?;
    let version = u32::from_le_bytes(b4);
    if version != SEQUENCE_VERSION {
        return Err(Error::BadVersion {
            path: path.to_string(),
            found: version,
            expected: SEQUENCE_VERSION,
        });
    }
    r.read_exact(&mut b4).map_err(|_| truncated(path, "label"))?;
    let label = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| truncated(path, "seed"))?;
    let seed = u64::from_le_bytes(b8);
    let frames: Tensor<f32> = read_tensor_from(r, path)?;
    if frames.rank() != 4 || frames.extent(0) != 1 {
        return Err(Error::ExtentMismatch {
            path: path.to_string(),
            detail: format!("sequence tensor must be [1,T,H,W], got {:?}", frames.shape()),
        });
    }
    Ok(SampleRecord { label, seed, frames })
}

fn truncated(path: &str, what: &str) -> Error {
    Error::TruncatedPayload {
        path: path.to_string(),
        detail: format!("file ended while reading {what}"),
    }
}

pub fn write_sequence(path: &Path, rec: &SampleRecord) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sequence_to(&mut f, rec)?;
    f.flush()?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<SampleRecord> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_sequence_from(&mut f, &path.display().to_string())
}

/// Writes the corpus as `train/*.mgsq` and `val/*.mgsq` plus `train.txt` /
/// `val.txt` manifests (one `<relative path> <label>` per line). Returns the
/// manifest paths.
pub fn write_corpus(spec: &DatasetSpec, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, val) = generate_corpus(spec)?;
    let write_split = |name: &str, records: &[SampleRecord]| -> Result<PathBuf> {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        let mut manifest = String::new();
        for rec in records {
            let idx = rec.seed; // unique per (class, index)
            let rel = format!("{name}/c{}_{:016x}.mgsq", rec.label, idx);
            write_sequence(&out.join(&rel), rec)?;
            manifest.push_str(&format!("{rel} {}\n", rec.label));
        }
        let manifest_path = out.join(format!("{name}.txt"));
        std::fs::write(&manifest_path, manifest)?;
        Ok(manifest_path)
    };
    let train_manifest = write_split("train", &train)?;
    let val_manifest = write_split("val", &val)?;
    Ok((train_manifest, val_manifest))
}

/// Reads a manifest and loads every referenced sequence (paths are relative
/// to the manifest's directory).
pub fn load_manifest(manifest: &Path) -> Result<Vec<SampleRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(rel), Some(label)) = (parts.next(), parts.next()) else {
            return Err(Error::ExtentMismatch {
                path: manifest.display().to_string(),
                detail: format!("line {} is not `<path> <label>`", lineno + 1),
            });
        };
        let label: usize = label.parse().map_err(|_| Error::ExtentMismatch {
            path: manifest.display().to_string(),
            detail: format!("bad label on line {}", lineno + 1),
        })?;
        let rec = read_sequence(&base.join(rel))?;
        if rec.label != label {
            return Err(Error::ExtentMismatch {
                path: manifest.display().to_string(),
                detail: format!("label {label} on line {} disagrees with file label {}", lineno + 1, rec.label),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(manifest.display().to_string()));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            train_per_class: 4,
            val_per_class: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_sample(&spec, 3, 7).unwrap();
        let b = generate_sample(&spec, 3, 7).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        assert_eq!(a.seed, b.seed);
        let c = generate_sample(&spec, 3, 8).unwrap();
        assert_ne!(a.frames.data(), c.frames.data());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let spec = small_spec();
        for class in 0..spec.classes {
            for i in 0..12 {
                let rec = generate_sample(&spec, class, i).unwrap();
                for &v in rec.frames.data() {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn texture_pairs_share_centroids() {
        // classes 2k/2k+1 with the same index trace the same bright-region
        // centroid within half a pixel
        let spec = small_spec();
        for pair in 0..spec.classes / 4 {
            let (a_id, b_id) = (2 * pair, 2 * pair + 1);
            for idx in 0..4 {
                let a = generate_sample(&spec, a_id, idx).unwrap();
                let b = generate_sample(&spec, b_id, idx).unwrap();
                for t in 0..spec.t {
                    let ca = bright_centroid(&a, t);
                    let cb = bright_centroid(&b, t);
                    let d = ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt();
                    assert!(d <= 0.5, "classes {a_id}/{b_id} idx {idx} frame {t}: {d:.3}px");
                }
            }
        }
    }

    #[test]
    fn flip_is_involution_and_mirrors_trajectory() {
        let spec = small_spec();
        let rec = generate_sample(&spec, 0, 1).unwrap();
        let flipped = flip_horizontal(&rec);
        assert_eq!(flipped.label, rec.label);
        let twice = flip_horizontal(&flipped);
        assert_eq!(twice.frames.data(), rec.frames.data());

        // mirrored centroid: x -> (W-1) - x
        for t in 0..spec.t {
            let (cx, cy) = bright_centroid(&rec, t);
            let (fx, fy) = bright_centroid(&flipped, t);
            assert!((fx - (spec.w as f64 - 1.0 - cx)).abs() < 0.3, "frame {t}");
            assert!((fy - cy).abs() < 0.3);
        }

        // a column-symmetric frame is a fixed point
        let mut sym = rec.clone();
        let [_, t_n, h, w] = *sym.frames.shape() else { unreachable!() };
        let data = sym.frames.data_mut();
        for t in 0..t_n {
            for y in 0..h {
                for x in 0..w / 2 {
                    let row = t * h * w + y * w;
                    data[row + (w - 1 - x)] = data[row + x];
                }
            }
        }
        let fs = flip_horizontal(&sym);
        assert_eq!(fs.frames.data(), sym.frames.data());
    }

    #[test]
    fn corpus_is_balanced_and_disjoint() {
        let spec = small_spec();
        let (train, val) = generate_corpus(&spec).unwrap();
        assert_eq!(train.len(), spec.classes * spec.train_per_class);
        assert_eq!(val.len(), spec.classes * spec.val_per_class);
        for class in 0..spec.classes {
            let n = train.iter().filter(|r| r.label == class).count();
            assert_eq!(n, spec.train_per_class);
        }
        // disjoint index ranges imply disjoint derived seeds
        let train_seeds: std::collections::HashSet<u64> = train.iter().map(|r| r.seed).collect();
        assert!(val.iter().all(|r| !train_seeds.contains(&r.seed)));
    }

    #[test]
    fn sequence_roundtrip_and_errors() {
        let spec = small_spec();
        let rec = generate_sample(&spec, 5, 0).unwrap();
        let mut buf = Vec::new();
        write_sequence_to(&mut buf, &rec).unwrap();

        let back = read_sequence_from(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back, rec);

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert_eq!(
            read_sequence_from(&mut bad.as_slice(), "mem").unwrap_err().code(),
            "bad_magic"
        );

        let mut vbad = buf.clone();
        vbad[4] = 9;
        assert_eq!(
            read_sequence_from(&mut vbad.as_slice(), "mem").unwrap_err().code(),
            "bad_version"
        );

        // declared extents exceeding the payload: cut the tail
        let mut cut = buf.clone();
        cut.truncate(buf.len() - 7);
        assert_eq!(
            read_sequence_from(&mut cut.as_slice(), "mem").unwrap_err().code(),
            "truncated_payload"
        );
    }

    #[test]
    fn manifest_roundtrip() {
        let spec = DatasetSpec {
            train_per_class: 2,
            val_per_class: 1,
            ..DatasetSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (train_m, val_m) = write_corpus(&spec, dir.path()).unwrap();
        let train = load_manifest(&train_m).unwrap();
        let val = load_manifest(&val_m).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(val.len(), 8);
        let direct = generate_sample(&spec, 0, 0).unwrap();
        let loaded = train.iter().find(|r| r.seed == direct.seed).unwrap();
        assert_eq!(loaded.frames.data(), direct.frames.data());
    }

    #[test]
    fn frame_means_carry_no_motion_class_signal() {
        // The homopheme fixture: a logistic classifier on frame means cannot
        // separate the motion-pair classes (stays within 10 points of chance).
        let spec = DatasetSpec {
            train_per_class: 40,
            val_per_class: 20,
            ..DatasetSpec::default()
        };
        let motion: Vec<usize> = spec.motion_classes().collect();
        let k = motion.len();
        let feats = |idx_range: std::ops::Range<usize>| -> (Vec<Vec<f64>>, Vec<usize>) {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (ci, &class) in motion.iter().enumerate() {
                for i in idx_range.clone() {
                    let rec = generate_sample(&spec, class, i).unwrap();
                    let hw = spec.h * spec.w;
                    let means: Vec<f64> = (0..spec.t)
                        .map(|t| {
                            rec.frames.data()[t * hw..][..hw]
                                .iter()
                                .map(|&v| v as f64)
                                .sum::<f64>()
                                / hw as f64
                        })
                        .collect();
                    xs.push(means);
                    ys.push(ci);
                }
            }
            (xs, ys)
        };
        let (train_x, train_y) = feats(0..spec.train_per_class);
        let (val_x, val_y) = feats(spec.train_per_class..spec.train_per_class + spec.val_per_class);

        // standardize features
        let d = spec.t;
        let n = train_x.len() as f64;
        let mut mu = vec![0f64; d];
        let mut sd = vec![0f64; d];
        for x in &train_x {
            for (m, v) in mu.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        for x in &train_x {
            for j in 0..d {
                sd[j] += (x[j] - mu[j]).powi(2) / n;
            }
        }
        for s in sd.iter_mut() {
            *s = s.sqrt().max(1e-9);
        }
        let norm = |x: &Vec<f64>| -> Vec<f64> {
            (0..d).map(|j| (x[j] - mu[j]) / sd[j]).collect()
        };
        let train_x: Vec<Vec<f64>> = train_x.iter().map(norm).collect();
        let val_x: Vec<Vec<f64>> = val_x.iter().map(norm).collect();

        // multinomial logistic regression, full-batch gradient descent
        let mut w = vec![0f64; k * (d + 1)];
        for _ in 0..400 {
            let mut grad = vec![0f64; k * (d + 1)];
            for (x, &y) in train_x.iter().zip(&train_y) {
                let mut z: Vec<f64> = (0..k)
                    .map(|c| {
                        let row = &w[c * (d + 1)..][..d + 1];
                        row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                for c in 0..k {
                    z[c] = (z[c] - m).exp() / denom;
                }
                for c in 0..k {
                    let err = z[c] - if c == y { 1.0 } else { 0.0 };
                    let g = &mut grad[c * (d + 1)..][..d + 1];
                    for j in 0..d {
                        g[j] += err * x[j];
                    }
                    g[d] += err;
                }
            }
            for (wv, gv) in w.iter_mut().zip(&grad) {
                *wv -= 0.5 * gv / n;
            }
        }
        let mut correct = 0usize;
        for (x, &y) in val_x.iter().zip(&val_y) {
            let best = (0..k)
                .map(|c| {
                    let row = &w[c * (d + 1)..][..d + 1];
                    row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            if best == y {
                correct += 1;
            }
        }
        let acc = correct as f64 / val_x.len() as f64;
        let chance = 1.0 / k as f64;
        assert!(
            (acc - chance).abs() <= 0.10,
            "frame-mean classifier at {acc:.3} vs chance {chance:.3}"
        );
    }
}
