//! Synthetic head-and-neck phantoms, sample files, resizing and
//! patient-level fold splitting.
//!
//! Sample file layout (little-endian):
//!
//! ```text
//! "SECPIMG" | u8 version=1 | u8 kind (0 = f32 image, 1 = u8 mask) | u32 H | u32 W | payload
//! ```
//!
//! A dataset directory holds one image and one mask file per slice plus a
//! `manifest.json` listing them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Classes including background.
pub const NUM_CLASSES: usize = 14;

/// Label names indexed by class id.
pub const LABELS: [&str; NUM_CLASSES] = [
    "background",
    "eye_L",
    "eye_R",
    "temporal_lobe_L",
    "temporal_lobe_R",
    "mandible_L",
    "mandible_R",
    "brainstem",
    "parotid_L",
    "parotid_R",
    "spinal_cord",
    "submandibular_L",
    "submandibular_R",
    "thyroid",
];

pub fn label_name(label: usize) -> &'static str {
    LABELS.get(label).copied().unwrap_or("?")
}

/// One CT-like slice: intensities in `[0, 1]`, labels and the owning patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]`.
    pub mask: Mask,
    pub patient_id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Mask, patient_id: impl Into<String>) -> Result<Self> {
        let [c, h, w] = match image.shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::Data(format!("sample image must be [C, H, W], got {s:?}"))),
        };
        if c != 1 || mask.shape() != [1, h, w] {
            return Err(Error::Data(format!(
                "image {:?} and mask {:?} disagree",
                image.shape(),
                mask.shape()
            )));
        }
        let max = mask.max_label();
        if max as usize >= NUM_CLASSES {
            return Err(Error::Data(format!("mask label {max} is out of range")));
        }
        Ok(Self { image, mask, patient_id: patient_id.into() })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Copy with every label passed through `map`.
    pub fn relabel(&self, map: impl Fn(u8) -> u8) -> Sample {
        let mut mask = self.mask.clone();
        for l in mask.labels_mut() {
            *l = map(*l);
        }
        Sample { image: self.image.clone(), mask, patient_id: self.patient_id.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { rx: f64, ry: f64 },
    /// Segment from the center offset `(-dx, -dy)` to `(dx, dy)` with radius `r`.
    Capsule { dx: f64, dy: f64, r: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Organ {
    label: u8,
    /// Center in normalized coordinates (`x` right, `y` down, both in `[-1, 1]`).
    cx: f64,
    cy: f64,
    shape: Shape,
    intensity: f64,
    presence: f64,
}

/// Right/left pairs are generated from the left entry by mirroring `x`.
/// `_L` organs sit on the image's right half (radiological display convention).
const ORGANS: [(u8, Option<u8>, f64, f64, Shape, f64, f64, f64); 9] = [
    // label_L, label_R, cx, cy, shape, intensity_L, intensity_R, presence
    (3, Some(4), 0.42, -0.30, Shape::Ellipse { rx: 0.20, ry: 0.26 }, 0.45, 0.50, 0.9),
    (5, Some(6), 0.41, 0.46, Shape::Capsule { dx: 0.09, dy: -0.16, r: 0.06 }, 0.95, 0.90, 0.85),
    (8, Some(9), 0.62, 0.12, Shape::Ellipse { rx: 0.10, ry: 0.14 }, 0.35, 0.38, 0.85),
    (7, None, 0.0, -0.20, Shape::Ellipse { rx: 0.12, ry: 0.15 }, 0.55, 0.0, 0.8),
    (10, None, 0.0, 0.30, Shape::Ellipse { rx: 0.06, ry: 0.06 }, 0.70, 0.0, 0.95),
    (11, Some(12), 0.18, 0.58, Shape::Ellipse { rx: 0.07, ry: 0.06 }, 0.60, 0.63, 0.8),
    (13, None, 0.0, 0.80, Shape::Ellipse { rx: 0.10, ry: 0.05 }, 0.75, 0.0, 0.7),
    (1, Some(2), 0.35, -0.72, Shape::Ellipse { rx: 0.09, ry: 0.08 }, 0.85, 0.80, 0.85),
    (0, None, 0.0, 0.0, Shape::Ellipse { rx: 0.0, ry: 0.0 }, 0.0, 0.0, 0.0),
];

const BODY_INTENSITY: f64 = 0.2;
const NOISE_STD: f64 = 0.02;

fn organ_list() -> Vec<Organ> {
    let mut out = Vec::new();
    for &(l, r, cx, cy, shape, il, ir, presence) in ORGANS.iter().filter(|o| o.0 != 0) {
        out.push(Organ { label: l, cx, cy, shape, intensity: il, presence });
        if let Some(r) = r {
            let mirrored = match shape {
                Shape::Capsule { dx, dy, r } => Shape::Capsule { dx: -dx, dy, r },
                s => s,
            };
            out.push(Organ { label: r, cx: -cx, cy, shape: mirrored, intensity: ir, presence });
        }
    }
    out
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
        Shape::Capsule { dx, dy, r } => {
            // distance from (u, v) to the segment (-dx, -dy)..(dx, dy)
            let (ax, ay) = (-dx, -dy);
            let (bx, by) = (2.0 * dx, 2.0 * dy);
            let t = (((u - ax) * bx + (v - ay) * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
            let (px, py) = (ax + t * bx - u, ay + t * by - v);
            px * px + py * py <= r * r
        }
    }
}

fn scale_shape(shape: Shape, s: f64) -> Shape {
    match shape {
        Shape::Ellipse { rx, ry } => Shape::Ellipse { rx: rx * s, ry: ry * s },
        Shape::Capsule { dx, dy, r } => Shape::Capsule { dx: dx * s, dy: dy * s, r: r * s },
    }
}

/// Deterministic multi-organ phantom dataset.
///
/// Each patient gets a global scale and a vertical offset; each slice adds a
/// small jitter and drops organs at random (sides of a bilateral pair
/// independently). Pairs stay mirror images of each other about the
/// vertical midline. Intensities are a per-organ base value plus Gaussian
/// noise, clamped to `[0, 1]`.
pub fn generate_phantom(seed: u64, n_patients: usize, slices_per_patient: usize, size: usize) -> Result<Vec<Sample>> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Config(format!("phantom size {size} must be a positive multiple of 16")));
    }
    let organs = organ_list();
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_patients * slices_per_patient);
    for p in 0..n_patients {
        let patient = format!("P{p:04}");
        let scale = rng.random_range(0.92..1.08);
        let shift_y = rng.random_range(-0.04..0.04);
        for _ in 0..slices_per_patient {
            let jitter = rng.random_range(-0.02..0.02);
            let present: Vec<bool> = organs.iter().map(|o| rng.random_bool(o.presence)).collect();
            let mut labels = vec![0u8; size * size];
            let mut base = vec![0.0f64; size * size];
            for y in 0..size {
                let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                for x in 0..size {
                    let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                    let i = y * size + x;
                    if (u / 0.85).powi(2) + (v / 0.95).powi(2) <= 1.0 {
                        base[i] = BODY_INTENSITY;
                    }
                    // later organs are painted over earlier ones
                    for (o, _) in organs.iter().zip(&present).filter(|(_, &on)| on) {
                        let cx = o.cx * scale;
                        let cy = o.cy * scale + shift_y + jitter;
                        if inside(scale_shape(o.shape, scale), u - cx, v - cy) {
                            labels[i] = o.label;
                            base[i] = o.intensity;
                        }
                    }
                }
            }
            let pixels: Vec<f32> = base.iter().map(|&b| (b + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect();
            let image = Tensor::new([1, size, size], pixels)?;
            samples.push(Sample::new(image, Mask::from_slice(size, size, labels)?, patient.clone())?);
        }
    }
    Ok(samples)
}

/// Symmetric zero padding to a square, then resampling to `target × target`:
/// bilinear for the image, nearest-neighbour for the mask.
pub fn resize_to(sample: &Sample, target: usize) -> Result<Sample> {
    if target == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    if h == target && w == target {
        return Ok(sample.clone());
    }
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let mut img = vec![0.0f32; side * side];
    let mut lab = vec![0u8; side * side];
    for y in 0..h {
        let dst = (y + top) * side + left;
        img[dst..dst + w].copy_from_slice(&sample.image.data()[y * w..(y + 1) * w]);
        lab[dst..dst + w].copy_from_slice(&sample.mask.labels()[y * w..(y + 1) * w]);
    }

    let ratio = side as f64 / target as f64;
    let taps: Vec<(usize, usize, f32)> = (0..target)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(side - 1);
            let i1 = (i0 + 1).min(side - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect();
    let nearest: Vec<usize> =
        (0..target).map(|o| (((o as f64 + 0.5) * ratio).floor() as usize).min(side - 1)).collect();

    let mut out_img = Vec::with_capacity(target * target);
    let mut out_lab = Vec::with_capacity(target * target);
    for oy in 0..target {
        let (y0, y1, fy) = taps[oy];
        for ox in 0..target {
            let (x0, x1, fx) = taps[ox];
            let top = img[y0 * side + x0] * (1.0 - fx) + img[y0 * side + x1] * fx;
            let bot = img[y1 * side + x0] * (1.0 - fx) + img[y1 * side + x1] * fx;
            out_img.push(top * (1.0 - fy) + bot * fy);
            out_lab.push(lab[nearest[oy] * side + nearest[ox]]);
        }
    }
    Sample::new(
        Tensor::new([1, target, target], out_img)?,
        Mask::from_slice(target, target, out_lab)?,
        sample.patient_id.clone(),
    )
}

/// Patient → fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignment.get(patient).copied()
    }

    /// Patients of fold `f`, sorted.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(p, _)| p.as_str()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.assignment.values() {
            s[f] += 1;
        }
        s
    }

    /// `(train, test)` samples for fold `fold`: the fold is the test set.
    pub fn partition<'a>(&self, samples: &'a [Sample], fold: usize) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
        if fold >= self.k {
            return Err(Error::Usage(format!("fold {fold} out of range for k = {}", self.k)));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in samples {
            match self.fold_of(&s.patient_id) {
                Some(f) if f == fold => test.push(s),
                Some(_) => train.push(s),
                None => return Err(Error::Data(format!("patient `{}` is not in the split", s.patient_id))),
            }
        }
        Ok((train, test))
    }
}

/// Seeded shuffle of the distinct patient ids, then round-robin over `k` folds.
pub fn split_folds<S: AsRef<str>>(patient_ids: &[S], k: usize, seed: u64) -> Result<FoldSplit> {
    let unique: BTreeSet<&str> = patient_ids.iter().map(AsRef::as_ref).collect();
    if k == 0 || k > unique.len() {
        return Err(Error::Config(format!("cannot split {} patients into {k} folds", unique.len())));
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order.into_iter().enumerate().map(|(i, p)| (p.to_owned(), i % k)).collect();
    Ok(FoldSplit { k, assignment })
}

const SAMPLE_MAGIC: &[u8; 7] = b"SECPIMG";
const SAMPLE_VERSION: u8 = 1;
const KIND_IMAGE: u8 = 0;
const KIND_MASK: u8 = 1;

fn header(kind: u8, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(17);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.push(SAMPLE_VERSION);
    out.push(kind);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

/// Encodes a `[1, H, W]` (or `[H, W]`) image.
pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::Usage(format!("cannot encode image of shape {s:?}"))),
    };
    let mut out = header(KIND_IMAGE, h, w);
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    if mask.shape()[0] != 1 {
        return Err(Error::Usage(format!("cannot encode a batch of {} masks", mask.shape()[0])));
    }
    let mut out = header(KIND_MASK, mask.height(), mask.width());
    out.extend_from_slice(mask.labels());
    Ok(out)
}

fn read_header(r: &mut Reader<'_>, want: u8) -> Result<(usize, usize)> {
    r.expect_magic(SAMPLE_MAGIC)?;
    let version_at = r.offset();
    let version = r.u8("version")?;
    if version != SAMPLE_VERSION {
        return Err(Error::Format { offset: version_at, message: format!("unsupported sample version {version}") });
    }
    let kind_at = r.offset();
    let kind = r.u8("kind")?;
    if kind != want {
        return Err(Error::Format { offset: kind_at, message: format!("file kind {kind}, expected {want}") });
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h == 0 || w == 0 {
        return r.fail(format!("empty extent {h}×{w}"));
    }
    Ok((h, w))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    let (h, w) = read_header(&mut r, KIND_IMAGE)?;
    let data = r.f32s(h * w, "image payload")?;
    r.finish()?;
    Tensor::new([1, h, w], data)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let mut r = Reader::new(bytes);
    let (h, w) = read_header(&mut r, KIND_MASK)?;
    let start = r.offset();
    let labels = r.take(h * w, "mask payload")?.to_vec();
    r.finish()?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Data(format!(
            "mask value {} at byte {} exceeds the highest label {}",
            labels[i],
            start + i,
            NUM_CLASSES - 1
        )));
    }
    Mask::from_slice(h, w, labels)
}

pub fn save_sample(sample: &Sample, image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(image_path, encode_image(&sample.image)?)?;
    std::fs::write(mask_path, encode_mask(&sample.mask)?)?;
    Ok(())
}

pub fn load_sample(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>, patient_id: &str) -> Result<Sample> {
    let image = decode_image(&std::fs::read(image_path)?)?;
    let mask = decode_mask(&std::fs::read(mask_path)?)?;
    Sample::new(image, mask, patient_id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub patient: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub mask_path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub labels: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every sample and `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let n = per_patient.entry(&s.patient_id).or_default();
        let id = format!("{}_s{:03}", s.patient_id, n);
        *n += 1;
        let image_path = format!("images/{id}.img");
        let mask_path = format!("masks/{id}.mask");
        save_sample(s, dir.join(&image_path), dir.join(&mask_path))?;
        entries.push(ManifestEntry { id, patient: s.patient_id.clone(), image_path, mask_path });
    }
    let manifest = Manifest { labels: LABELS.iter().map(|s| s.to_string()).collect(), samples: entries };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Accepts either a manifest file or the directory containing `manifest.json`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Manifest, Vec<Sample>)> {
    let path = path.as_ref();
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
    if manifest.labels.len() != NUM_CLASSES {
        return Err(Error::Data(format!("manifest lists {} labels, expected {NUM_CLASSES}", manifest.labels.len())));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .iter()
        .map(|e| load_sample(root.join(&e.image_path), root.join(&e.mask_path), &e.patient))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
