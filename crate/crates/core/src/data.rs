//! Synthetic forgery corpus generation and on-disk dataset ingestion.
//!
//! A corpus directory looks like
//!
//! ```text
//! labels.csv               video_id,label,manipulation,corresponding_video_id
//! real/<video_id>/<frame_idx>.png
//! fake/<video_id>_f/<frame_idx>.png
//! mask/<video_id>_f/<frame_idx>.png   ground-truth changed pixels (not read back)
//! ```
//!
//! Each fake video is its source real video with one region transplanted from a
//! donor real video; fake frame `t` corresponds to real frame `t`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::imageops::{self, Image};

/// Suffix appended to a real video id to name its forged counterpart.
pub const FAKE_SUFFIX: &str = "_f";

/// Patch count the default view policy shuffles with; image sizes must divide by it.
pub const DEFAULT_PATCH_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ManipKind {
    SpliceRect,
    SpliceEllipse,
    WarpPatch,
}

impl ManipKind {
    pub const ALL: [ManipKind; 3] = [ManipKind::SpliceRect, ManipKind::SpliceEllipse, ManipKind::WarpPatch];

    pub fn as_str(self) -> &'static str {
        match self {
            ManipKind::SpliceRect => "SPLICE_RECT",
            ManipKind::SpliceEllipse => "SPLICE_ELLIPSE",
            ManipKind::WarpPatch => "WARP_PATCH",
        }
    }
}

impl fmt::Display for ManipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManipKind {
    type Err = DclError;

    fn from_str(s: &str) -> Result<Self> {
        ManipKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DclError::invalid(format!("unknown manipulation family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub manipulation_families: Vec<ManipKind>,
    /// Feather radius of the splice boundary, in pixels.
    pub blend_softness: f32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_videos: 64,
            frames_per_video: 4,
            image_size: 96,
            manipulation_families: vec![ManipKind::SpliceRect],
            blend_softness: 2.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos < 2 {
            return Err(DclError::invalid(format!(
                "n_videos = {} leaves no donor video; need at least 2",
                self.n_videos
            )));
        }
        if self.frames_per_video < 1 {
            return Err(DclError::invalid("frames_per_video must be >= 1"));
        }
        if self.image_size == 0 || self.image_size % DEFAULT_PATCH_K != 0 {
            return Err(DclError::invalid(format!(
                "image_size {} must be a positive multiple of {DEFAULT_PATCH_K}",
                self.image_size
            )));
        }
        if self.manipulation_families.is_empty() {
            return Err(DclError::invalid("manipulation_families is empty"));
        }
        if !(self.blend_softness >= 0.0) {
            return Err(DclError::invalid("blend_softness must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub label: Label,
    pub video_id: String,
    pub frame_idx: usize,
    pub corresponding_video_id: Option<String>,
}

impl Sample {
    /// Id of the real video this sample derives from (itself for real samples).
    pub fn source_video_id(&self) -> &str {
        self.corresponding_video_id.as_deref().unwrap_or(&self.video_id)
    }
}

/// Immutable collection of samples plus a `video_id -> sample indices` index
/// ordered by frame.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    videos: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(DclError::Dataset("no samples".into()));
        }
        let shape = samples[0].image.dim();
        let mut videos: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.image.dim() != shape {
                return Err(DclError::shape(format!(
                    "{}/{} has shape {:?}, expected {:?}",
                    s.video_id,
                    s.frame_idx,
                    s.image.dim(),
                    shape
                )));
            }
            if s.label.is_fake() != s.corresponding_video_id.is_some() {
                return Err(DclError::Dataset(format!(
                    "{}: corresponding_video_id must be present exactly for fake samples",
                    s.video_id
                )));
            }
            videos.entry(s.video_id.clone()).or_default().push(i);
        }
        for frames in videos.values_mut() {
            frames.sort_by_key(|&i| samples[i].frame_idx);
        }
        let dataset = Dataset { samples, videos };
        for s in dataset.samples.iter().filter(|s| s.label.is_fake()) {
            let source = s.source_video_id();
            let resolved = dataset
                .frame(source, s.frame_idx)
                .filter(|r| r.label == Label::Real);
            if resolved.is_none() {
                return Err(DclError::Dataset(format!(
                    "fake video {} references missing corresponding video {} (frame {})",
                    s.video_id, source, s.frame_idx
                )));
            }
        }
        Ok(dataset)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Sample indices of one video, ordered by frame.
    pub fn video_frames(&self, video_id: &str) -> Option<&[usize]> {
        self.videos.get(video_id).map(Vec::as_slice)
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn frame(&self, video_id: &str, frame_idx: usize) -> Option<&Sample> {
        self.videos
            .get(video_id)?
            .iter()
            .map(|&i| &self.samples[i])
            .find(|s| s.frame_idx == frame_idx)
    }

    /// Index of the sample at `(video_id, frame_idx)`.
    pub fn frame_index(&self, video_id: &str, frame_idx: usize) -> Option<usize> {
        self.videos
            .get(video_id)?
            .iter()
            .copied()
            .find(|&i| self.samples[i].frame_idx == frame_idx)
    }

    /// The real frame a fake sample was forged from.
    pub fn corresponding_real(&self, sample: &Sample) -> Option<&Sample> {
        let source = sample.corresponding_video_id.as_deref()?;
        self.frame(source, sample.frame_idx)
    }

    pub fn source_video_ids(&self) -> BTreeSet<String> {
        self.samples
            .iter()
            .map(|s| s.source_video_id().to_string())
            .collect()
    }

    /// Keep only samples whose source real video is in `sources`.
    pub fn restrict_to_sources(&self, sources: &BTreeSet<String>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .filter(|s| sources.contains(s.source_video_id()))
            .cloned()
            .collect();
        Dataset::new(samples)
    }

    /// Split by source video so a real video and its forgery never straddle
    /// train and test. Returns `(train, test)`.
    pub fn split_by_source(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(DclError::invalid("test_fraction must be in [0, 1)"));
        }
        let mut sources: Vec<String> = self.source_video_ids().into_iter().collect();
        sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((sources.len() as f64) * test_fraction).ceil() as usize;
        let n_test = n_test.clamp(1, sources.len().saturating_sub(1).max(1));
        let test: BTreeSet<String> = sources[..n_test].iter().cloned().collect();
        let train: BTreeSet<String> = sources[n_test..].iter().cloned().collect();
        Ok((self.restrict_to_sources(&train)?, self.restrict_to_sources(&test)?))
    }
}

/// One generated video, real or forged.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub label: Label,
    pub manipulation: Option<ManipKind>,
    pub corresponding_video_id: Option<String>,
    pub frames: Vec<Image>,
    /// Changed-pixel support per frame; empty for real videos.
    pub truth: Vec<Array2<bool>>,
}

fn stream_seed(seed: u64, video: u64, stream: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed
        ^ video.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
enum PrimShape {
    Ellipse,
    Rect,
}

#[derive(Clone, Debug)]
struct Primitive {
    shape: PrimShape,
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    color: [f32; 3],
}

impl Primitive {
    fn contains(&self, y: f32, x: f32) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.shape {
            PrimShape::Ellipse => dy * dy + dx * dx <= 1.0,
            PrimShape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

/// Base composition of a real video: smooth background plus 2-4 "facial" primitives.
#[derive(Clone, Debug)]
struct Scene {
    bg_from: [f32; 3],
    bg_to: [f32; 3],
    bg_dir: (f32, f32),
    wave_freq: f32,
    wave_phase: f32,
    wave_amp: f32,
    primitives: Vec<Primitive>,
}

const SENSOR_NOISE: f64 = 0.12;

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Scene {
    fn sample(size: usize, rng: &mut impl Rng) -> Scene {
        let s = size as f32;
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let mut primitives = vec![Primitive {
            shape: PrimShape::Ellipse,
            cy: s * rng.gen_range(0.45..0.55),
            cx: s * rng.gen_range(0.45..0.55),
            ry: s * rng.gen_range(0.30..0.38),
            rx: s * rng.gen_range(0.22..0.30),
            color: random_color(rng, 0.35, 0.85),
        }];
        let mut features = vec![
            Primitive {
                shape: PrimShape::Ellipse,
                cy: s * rng.gen_range(0.36..0.42),
                cx: s * rng.gen_range(0.36..0.42),
                ry: s * rng.gen_range(0.03..0.06),
                rx: s * rng.gen_range(0.05..0.08),
                color: random_color(rng, 0.05, 0.4),
            },
            Primitive {
                shape: PrimShape::Ellipse,
                cy: s * rng.gen_range(0.36..0.42),
                cx: s * rng.gen_range(0.58..0.64),
                ry: s * rng.gen_range(0.03..0.06),
                rx: s * rng.gen_range(0.05..0.08),
                color: random_color(rng, 0.05, 0.4),
            },
            Primitive {
                shape: PrimShape::Rect,
                cy: s * rng.gen_range(0.64..0.70),
                cx: s * rng.gen_range(0.46..0.54),
                ry: s * rng.gen_range(0.02..0.04),
                rx: s * rng.gen_range(0.08..0.14),
                color: random_color(rng, 0.1, 0.6),
            },
        ];
        features.shuffle(rng);
        let n_features = rng.gen_range(1..=3);
        primitives.extend(features.into_iter().take(n_features));
        Scene {
            bg_from: random_color(rng, 0.0, 1.0),
            bg_to: random_color(rng, 0.0, 1.0),
            bg_dir: (angle.sin(), angle.cos()),
            wave_freq: rng.gen_range(0.5..2.0) * std::f32::consts::TAU / s,
            wave_phase: rng.gen_range(0.0..std::f32::consts::TAU),
            wave_amp: rng.gen_range(0.0..0.08),
            primitives,
        }
    }

    fn render(&self, size: usize, rng: &mut impl Rng) -> Image {
        let s = size as f32;
        let (gy, gx) = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
        let prims: Vec<Primitive> = self
            .primitives
            .iter()
            .map(|p| Primitive {
                cy: p.cy + gy + rng.gen_range(-1.0..1.0f32),
                cx: p.cx + gx + rng.gen_range(-1.0..1.0f32),
                ..p.clone()
            })
            .collect();
        let noise = Normal::new(0.0, SENSOR_NOISE).expect("valid sigma");
        let mut image = Image::zeros((size, size, 3));
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
                let t = ((fy / s - 0.5) * self.bg_dir.0 + (fx / s - 0.5) * self.bg_dir.1 + 0.5).clamp(0.0, 1.0);
                let wave = self.wave_amp * (self.wave_freq * (fy + fx) + self.wave_phase).sin();
                let mut color = [0.0f32; 3];
                for ch in 0..3 {
                    color[ch] = self.bg_from[ch] * (1.0 - t) + self.bg_to[ch] * t + wave;
                }
                for p in &prims {
                    if p.contains(fy, fx) {
                        color = p.color;
                    }
                }
                for ch in 0..3 {
                    image[[y, x, ch]] = color[ch] + noise.sample(rng) as f32;
                }
            }
        }
        imageops::quantize(&mut image);
        image
    }
}

/// Region geometry of one manipulation, fixed per fake video.
#[derive(Clone, Debug)]
pub struct Region {
    kind: ManipKind,
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
    wobble: f32,
    wobble_phase: f32,
}

impl Region {
    pub fn sample(kind: ManipKind, size: usize, rng: &mut impl Rng) -> Region {
        let s = size as f32;
        let (ry, rx, angle, wobble) = match kind {
            ManipKind::SpliceRect => (s * rng.gen_range(0.14..0.24), s * rng.gen_range(0.14..0.24), 0.0, 0.0),
            ManipKind::SpliceEllipse => (s * rng.gen_range(0.16..0.26), s * rng.gen_range(0.16..0.26), 0.0, 0.0),
            ManipKind::WarpPatch => (
                s * rng.gen_range(0.16..0.26),
                s * rng.gen_range(0.12..0.20),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(0.05..0.2),
            ),
        };
        Region {
            kind,
            cy: s * rng.gen_range(0.35..0.65),
            cx: s * rng.gen_range(0.35..0.65),
            ry,
            rx,
            angle,
            wobble,
            wobble_phase: rng.gen_range(0.0..std::f32::consts::TAU),
        }
    }

    /// Approximate distance in pixels outside the region; 0 inside.
    fn outside_distance(&self, y: f32, x: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ManipKind::SpliceRect => {
                let oy = (dy.abs() - self.ry).max(0.0);
                let ox = (dx.abs() - self.rx).max(0.0);
                (oy * oy + ox * ox).sqrt()
            }
            ManipKind::SpliceEllipse | ManipKind::WarpPatch => {
                let (sin, cos) = self.angle.sin_cos();
                let ly = cos * dy - sin * dx;
                let lx = sin * dy + cos * dx;
                let phi = ly.atan2(lx);
                let scale = 1.0 + self.wobble * (3.0 * phi + self.wobble_phase).sin();
                let rho = ((ly / self.ry).powi(2) + (lx / self.rx).powi(2)).sqrt() / scale;
                if rho <= 1.0 {
                    0.0
                } else {
                    (rho - 1.0) * scale * self.ry.min(self.rx)
                }
            }
        }
    }

    /// Distance in pixels to the rectangle edge from inside; `None` outside or for other shapes.
    fn rect_inside_distance(&self, y: f32, x: f32) -> Option<f32> {
        if self.kind != ManipKind::SpliceRect {
            return None;
        }
        let d = (self.ry - (y - self.cy).abs()).min(self.rx - (x - self.cx).abs());
        (d > 0.0).then_some(d)
    }

    fn alpha(&self, y: f32, x: f32, softness: f32) -> f32 {
        let d = self.outside_distance(y, x);
        if d <= 0.0 {
            1.0
        } else if softness > 0.0 && d < softness {
            1.0 - d / softness
        } else {
            0.0
        }
    }
}

/// Alpha-composite `donor` over `real` inside `region`, feathered by `softness` pixels.
pub fn composite(real: &Image, donor: &Image, region: &Region, softness: f32) -> Result<(Image, Array2<bool>)> {
    if real.dim() != donor.dim() {
        return Err(DclError::shape(format!(
            "real frame {:?} vs donor frame {:?}",
            real.dim(),
            donor.dim()
        )));
    }
    let (h, w, c) = real.dim();
    let mut fake = real.clone();
    let mut truth = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let a = region.alpha(y as f32 + 0.5, x as f32 + 0.5, softness);
            if a <= 0.0 {
                continue;
            }
            for ch in 0..c {
                let r = real[[y, x, ch]];
                let v = r + a * (donor[[y, x, ch]] - r);
                fake[[y, x, ch]] = v;
                if v != real[[y, x, ch]] {
                    truth[[y, x]] = true;
                }
            }
        }
    }
    Ok((fake, truth))
}

/// Forge `real_frame` by blending in `donor_frame` over a region drawn from `rng`.
///
/// Pixels outside the feathered region are left bit-identical; `truth` marks
/// exactly the pixels whose value changed.
pub fn forge_frame(
    real_frame: &Image,
    donor_frame: &Image,
    kind: ManipKind,
    blend_softness: f32,
    rng: &mut impl Rng,
) -> Result<(Image, Array2<bool>)> {
    let (h, _, _) = real_frame.dim();
    let region = Region::sample(kind, h, rng);
    let (mut fake, mut truth) = composite(real_frame, donor_frame, &region, blend_softness)?;
    let (_, w, c) = fake.dim();
    for y in 0..h {
        for x in 0..w {
            if truth[[y, x]] && region.rect_inside_distance(y as f32 + 0.5, x as f32 + 0.5).is_some_and(|d| d < SEAM_WIDTH) {
                for ch in 0..c {
                    fake[[y, x, ch]] *= SEAM_GAIN;
                }
                truth[[y, x]] = (0..c).any(|ch| fake[[y, x, ch]] != real_frame[[y, x, ch]]);
            }
        }
    }
    Ok((fake, truth))
}

/// Darkened band just inside a rectangular splice edge, applied only to
/// pixels the composite already changed.
const SEAM_WIDTH: f32 = 2.0;
const SEAM_GAIN: f32 = 0.7;

/// Geometric resampling applied to donor content before compositing; fixed per fake video.
#[derive(Clone, Debug)]
struct DonorWarp {
    zoom: f32,
    blur: f32,
    /// Std of fresh noise added to the resampled donor.
    renoise: f64,
    angle: f32,
    ripple_amp: f32,
    ripple_freq: f32,
    ripple_phase: f32,
}

impl DonorWarp {
    fn sample(kind: ManipKind, size: usize, rng: &mut impl Rng) -> DonorWarp {
        match kind {
            ManipKind::SpliceRect | ManipKind::SpliceEllipse => DonorWarp {
                zoom: rng.gen_range(1.15..1.35),
                blur: 1.5,
                renoise: 0.0,
                angle: 0.0,
                ripple_amp: 0.0,
                ripple_freq: 0.0,
                ripple_phase: 0.0,
            },
            ManipKind::WarpPatch => DonorWarp {
                zoom: rng.gen_range(0.9..1.1),
                blur: 1.5,
                renoise: 0.06,
                angle: rng.gen_range(-0.35..0.35),
                ripple_amp: rng.gen_range(0.8..1.6),
                ripple_freq: std::f32::consts::TAU / (size as f32 * rng.gen_range(0.15..0.3)),
                ripple_phase: rng.gen_range(0.0..std::f32::consts::TAU),
            },
        }
    }

    fn apply(&self, donor: &Image) -> Image {
        let (h, w, c) = donor.dim();
        let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
        let (sin, cos) = self.angle.sin_cos();
        let mut out = Image::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let mut sy = (cos * dy - sin * dx) / self.zoom + cy;
                let mut sx = (sin * dy + cos * dx) / self.zoom + cx;
                if self.ripple_amp > 0.0 {
                    sy += self.ripple_amp * (self.ripple_freq * x as f32 + self.ripple_phase).sin();
                    sx += self.ripple_amp * (self.ripple_freq * y as f32 + self.ripple_phase).cos();
                }
                for ch in 0..c {
                    out[[y, x, ch]] = imageops::bilinear(donor, sy, sx, ch);
                }
            }
        }
        imageops::gaussian_blur(&out, self.blur)
    }
}

/// Generate the whole corpus in memory: real videos first, then one fake per real video.
pub fn synthesize(spec: &CorpusSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let n = spec.n_videos;
    let size = spec.image_size;
    let reals: Vec<SyntheticVideo> = (0..n)
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, v as u64, 0));
            let scene = Scene::sample(size, &mut rng);
            let frames = (0..spec.frames_per_video)
                .map(|_| scene.render(size, &mut rng))
                .collect();
            SyntheticVideo {
                video_id: format!("v{v:03}"),
                label: Label::Real,
                manipulation: None,
                corresponding_video_id: None,
                frames,
                truth: Vec::new(),
            }
        })
        .collect();

    let mut fakes = Vec::with_capacity(n);
    for v in 0..n {
        let kind = spec.manipulation_families[v % spec.manipulation_families.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, v as u64, 1 + kind as u64));
        let donor = (v + rng.gen_range(1..n)) % n;
        let warp = DonorWarp::sample(kind, size, &mut rng);
        let region_seed: u64 = rng.gen();
        let mut frames = Vec::with_capacity(spec.frames_per_video);
        let mut truth = Vec::with_capacity(spec.frames_per_video);
        for (real, donor_frame) in reals[v].frames.iter().zip(&reals[donor].frames) {
            let mut prepared = warp.apply(donor_frame);
            if warp.renoise > 0.0 {
                let noise = Normal::new(0.0, warp.renoise).expect("valid sigma");
                prepared.mapv_inplace(|v| v + noise.sample(&mut rng) as f32);
            }
            let mut region_rng = ChaCha8Rng::seed_from_u64(region_seed);
            let (mut fake, _) = forge_frame(real, &prepared, kind, spec.blend_softness, &mut region_rng)?;
            imageops::quantize(&mut fake);
            let changed = Array2::from_shape_fn((size, size), |(y, x)| {
                (0..3).any(|ch| fake[[y, x, ch]] != real[[y, x, ch]])
            });
            frames.push(fake);
            truth.push(changed);
        }
        fakes.push(SyntheticVideo {
            video_id: format!("{}{FAKE_SUFFIX}", reals[v].video_id),
            label: Label::Fake,
            manipulation: Some(kind),
            corresponding_video_id: Some(reals[v].video_id.clone()),
            frames,
            truth,
        });
    }
    let mut videos = reals;
    videos.extend(fakes);
    Ok(videos)
}

impl Dataset {
    pub fn from_videos(videos: &[SyntheticVideo]) -> Result<Dataset> {
        let samples = videos
            .iter()
            .flat_map(|v| {
                v.frames.iter().enumerate().map(move |(t, img)| Sample {
                    image: img.clone(),
                    label: v.label,
                    video_id: v.video_id.clone(),
                    frame_idx: t,
                    corresponding_video_id: v.corresponding_video_id.clone(),
                })
            })
            .collect();
        Dataset::new(samples)
    }
}

const LABELS_HEADER: [&str; 4] = ["video_id", "label", "manipulation", "corresponding_video_id"];

fn class_dir(label: Label) -> &'static str {
    match label {
        Label::Real => "real",
        Label::Fake => "fake",
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| DclError::io(path, e))
}

/// Synthesize a corpus and write it under `out` (which must be empty or absent).
pub fn generate_corpus(spec: &CorpusSpec, out: &Path) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| DclError::io(out, e))?;
        if entries.next().is_some() {
            return Err(DclError::invalid(format!("output directory {} is not empty", out.display())));
        }
    }
    let videos = synthesize(spec)?;
    create_dir(out)?;
    let labels_path = out.join("labels.csv");
    let mut writer = csv::Writer::from_path(&labels_path)?;
    writer.write_record(LABELS_HEADER)?;
    for video in &videos {
        let dir = out.join(class_dir(video.label)).join(&video.video_id);
        create_dir(&dir)?;
        for (t, frame) in video.frames.iter().enumerate() {
            imageops::write_png(frame, &dir.join(format!("{t}.png")))?;
        }
        if !video.truth.is_empty() {
            let mask_dir = out.join("mask").join(&video.video_id);
            create_dir(&mask_dir)?;
            for (t, truth) in video.truth.iter().enumerate() {
                imageops::write_mask_png(truth, &mask_dir.join(format!("{t}.png")))?;
            }
        }
        writer.write_record([
            video.video_id.as_str(),
            if video.label.is_fake() { "1" } else { "0" },
            video.manipulation.map(ManipKind::as_str).unwrap_or("NONE"),
            video.corresponding_video_id.as_deref().unwrap_or(""),
        ])?;
    }
    writer.flush().map_err(|e| DclError::io(&labels_path, e))?;
    Ok(videos)
}

fn list_frames(dir: &Path, video_id: &str) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Err(DclError::Dataset(format!(
            "video {video_id} listed in labels.csv has no directory {}",
            dir.display()
        )));
    }
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DclError::io(dir, e))? {
        let path = entry.map_err(|e| DclError::io(dir, e))?.path();
        let idx = path
            .extension()
            .filter(|ext| *ext == "png")
            .and_then(|_| path.file_stem())
            .and_then(|stem| stem.to_str())
            .and_then(|stem| stem.parse::<usize>().ok());
        match idx {
            Some(idx) => frames.push((idx, path)),
            None => {
                return Err(DclError::Dataset(format!(
                    "non-image file {} in video {video_id}",
                    path.display()
                )))
            }
        }
    }
    frames.sort();
    Ok(frames)
}

/// Load a corpus directory in the layout written by [`generate_corpus`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let labels_path = root.join("labels.csv");
    if !labels_path.exists() {
        let empty = fs::read_dir(root)
            .map(|mut d| d.next().is_none())
            .unwrap_or(true);
        return Err(DclError::Dataset(if empty {
            "no samples".into()
        } else {
            format!("missing {}", labels_path.display())
        }));
    }
    let mut reader = csv::Reader::from_path(&labels_path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(LABELS_HEADER.iter().copied()) {
        return Err(DclError::Dataset(format!(
            "labels.csv header must be {}, got {}",
            LABELS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut samples = Vec::new();
    let mut known: BTreeMap<String, Label> = BTreeMap::new();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 4 {
            return Err(DclError::Dataset(format!("labels.csv row {} has {} fields", line + 2, record.len())));
        }
        let video_id = record[0].to_string();
        let label = record[1]
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| DclError::Dataset(format!("row {}: bad label `{}`", line + 2, &record[1])))?;
        let corresponding = match (label, record[3].trim()) {
            (Label::Real, _) => None,
            (Label::Fake, "") => {
                return Err(DclError::Dataset(format!(
                    "fake video {video_id} has no corresponding_video_id"
                )))
            }
            (Label::Fake, id) => Some(id.to_string()),
        };
        known.insert(video_id.clone(), label);
        rows.push((video_id, label, corresponding));
    }
    for (video_id, _, corresponding) in &rows {
        if let Some(source) = corresponding {
            if known.get(source) != Some(&Label::Real) {
                return Err(DclError::Dataset(format!(
                    "fake video {video_id} references missing corresponding video {source}"
                )));
            }
        }
    }
    for (video_id, label, corresponding) in rows {
        let dir = root.join(class_dir(label)).join(&video_id);
        for (frame_idx, path) in list_frames(&dir, &video_id)? {
            samples.push(Sample {
                image: imageops::read_png(&path)?,
                label,
                video_id: video_id.clone(),
                frame_idx,
                corresponding_video_id: corresponding.clone(),
            });
        }
    }
    Dataset::new(samples)
}
