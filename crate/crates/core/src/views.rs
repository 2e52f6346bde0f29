//! Stochastic view generation: RandomPatch, SRM high-frequency enhancement,
//! frame shift, corresponding mixup, and the common flip/blur augmentations.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Sample};
use crate::error::{DclError, Result};
use crate::imageops::{self, reflect_index, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewPolicy {
    pub patch_k: usize,
    pub p_patch: f64,
    pub srm_lambda: f32,
    pub p_srm: f64,
    pub p_frameshift: f64,
    pub mixup_range: (f32, f32),
    pub p_mixup: f64,
    pub p_flip: f64,
    pub p_blur: f64,
    pub blur_sigma_range: (f32, f32),
}

impl Default for ViewPolicy {
    fn default() -> Self {
        ViewPolicy {
            patch_k: 3,
            p_patch: 0.7,
            srm_lambda: 1.0,
            p_srm: 0.3,
            p_frameshift: 0.5,
            mixup_range: (0.5, 0.9),
            p_mixup: 0.5,
            p_flip: 0.5,
            p_blur: 0.2,
            blur_sigma_range: (0.0, 1.0),
        }
    }
}

impl ViewPolicy {
    /// Every transform disabled; views equal the sample image.
    pub fn identity() -> Self {
        ViewPolicy {
            p_patch: 0.0,
            p_srm: 0.0,
            p_frameshift: 0.0,
            p_mixup: 0.0,
            p_flip: 0.0,
            p_blur: 0.0,
            ..ViewPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_patch", self.p_patch),
            ("p_srm", self.p_srm),
            ("p_frameshift", self.p_frameshift),
            ("p_mixup", self.p_mixup),
            ("p_flip", self.p_flip),
            ("p_blur", self.p_blur),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(DclError::config(format!("views.{name}"), format!("{p} is not a probability")));
            }
        }
        if self.patch_k == 0 {
            return Err(DclError::config("views.patch_k", "must be >= 1"));
        }
        if !(self.srm_lambda >= 0.0) {
            return Err(DclError::config("views.srm_lambda", "must be >= 0"));
        }
        let (lo, hi) = self.mixup_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DclError::config("views.mixup_range", "must satisfy 0 < lo <= hi <= 1"));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(DclError::config("views.blur_sigma_range", "must satisfy 0 <= lo <= hi"));
        }
        Ok(())
    }
}

/// Spatial rearrangement applied to a view, replayed on pixel-aligned maps
/// (the forgery difference map) so they stay registered with the view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewGeometry {
    /// `(k, perm)`: output tile `i` holds input tile `perm[i]`.
    pub tile_perm: Option<(usize, Vec<usize>)>,
    pub flipped: bool,
}

impl ViewGeometry {
    pub fn apply_to_map(&self, map: &Array2<f32>) -> Result<Array2<f32>> {
        let mut out = match &self.tile_perm {
            Some((k, perm)) => permute_tiles_2d(map, *k, perm)?,
            None => map.clone(),
        };
        if self.flipped {
            out = imageops::flip_map_horizontal(&out);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    pub label: Label,
    /// Index of the source sample in the dataset.
    pub sample_index: usize,
    /// Dataset index of the frame each view was built from (differs after frame shift).
    pub base1: usize,
    pub base2: usize,
    pub geometry1: ViewGeometry,
    pub geometry2: ViewGeometry,
}

fn check_tiles(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(DclError::shape(format!("{h}x{w} image is not divisible into {k}x{k} patches")));
    }
    Ok(())
}

fn check_perm(k: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; k * k];
    if perm.len() != k * k || perm.iter().any(|&p| p >= k * k || std::mem::replace(&mut seen[p], true)) {
        return Err(DclError::invalid(format!("not a permutation of {} tiles", k * k)));
    }
    Ok(())
}

/// Rearrange the `k x k` tiles of `image`: output tile `i` takes input tile `perm[i]`.
pub fn permute_tiles(image: &Image, k: usize, perm: &[usize]) -> Result<Image> {
    let (h, w, _) = image.dim();
    check_tiles(h, w, k)?;
    check_perm(k, perm)?;
    let (th, tw) = (h / k, w / k);
    let mut out = image.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / k * th, dst % k * tw);
        let (sy, sx) = (src / k * th, src % k * tw);
        out.slice_mut(s![dy..dy + th, dx..dx + tw, ..])
            .assign(&image.slice(s![sy..sy + th, sx..sx + tw, ..]));
    }
    Ok(out)
}

fn permute_tiles_2d(map: &Array2<f32>, k: usize, perm: &[usize]) -> Result<Array2<f32>> {
    let (h, w) = map.dim();
    check_tiles(h, w, k)?;
    check_perm(k, perm)?;
    let (th, tw) = (h / k, w / k);
    let mut out = map.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / k * th, dst % k * tw);
        let (sy, sx) = (src / k * th, src % k * tw);
        out.slice_mut(s![dy..dy + th, dx..dx + tw])
            .assign(&map.slice(s![sy..sy + th, sx..sx + tw]));
    }
    Ok(out)
}

/// Shuffle the `k x k` tiles of `image` with a uniformly random permutation.
pub fn random_patch(image: &Image, k: usize, rng: &mut impl Rng) -> Result<Image> {
    random_patch_traced(image, k, rng).map(|(img, _)| img)
}

fn random_patch_traced(image: &Image, k: usize, rng: &mut impl Rng) -> Result<(Image, Vec<usize>)> {
    let (h, w, _) = image.dim();
    check_tiles(h, w, k)?;
    let mut perm: Vec<usize> = (0..k * k).collect();
    perm.shuffle(rng);
    Ok((permute_tiles(image, k, &perm)?, perm))
}

/// A zero-sum high-pass kernel with its normaliser folded in.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub taps: Array2<f32>,
}

impl Kernel {
    fn new(rows: &[&[f32]], scale: f32) -> Kernel {
        let (h, w) = (rows.len(), rows[0].len());
        Kernel {
            taps: Array2::from_shape_fn((h, w), |(y, x)| rows[y][x] / scale),
        }
    }

    /// 5x5 second-order "KV" residual kernel.
    pub fn square5() -> Kernel {
        Kernel::new(
            &[
                &[-1.0, 2.0, -2.0, 2.0, -1.0],
                &[2.0, -6.0, 8.0, -6.0, 2.0],
                &[-2.0, 8.0, -12.0, 8.0, -2.0],
                &[2.0, -6.0, 8.0, -6.0, 2.0],
                &[-1.0, 2.0, -2.0, 2.0, -1.0],
            ],
            12.0,
        )
    }

    pub fn square3() -> Kernel {
        Kernel::new(&[&[-1.0, 2.0, -1.0], &[2.0, -4.0, 2.0], &[-1.0, 2.0, -1.0]], 4.0)
    }

    /// Second-order horizontal kernel `[1, -2, 1] / 2`.
    pub fn horizontal() -> Kernel {
        Kernel::new(&[&[1.0, -2.0, 1.0]], 2.0)
    }

    pub fn srm_bank() -> [Kernel; 3] {
        [Kernel::square5(), Kernel::square3(), Kernel::horizontal()]
    }

    /// The bank averaged into one centred 5x5 kernel; filtering is linear.
    pub fn srm_mean() -> Kernel {
        let bank = Kernel::srm_bank();
        let mut taps = Array2::zeros((5, 5));
        for k in &bank {
            let (kh, kw) = k.taps.dim();
            let (oy, ox) = ((5 - kh) / 2, (5 - kw) / 2);
            taps.slice_mut(s![oy..oy + kh, ox..ox + kw]).scaled_add(1.0 / bank.len() as f32, &k.taps);
        }
        Kernel { taps }
    }
}

/// Per-channel correlation with reflect padding.
pub fn filter_reflect(image: &Image, kernel: &Kernel) -> Image {
    let (h, w, c) = image.dim();
    let (kh, kw) = kernel.taps.dim();
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let src = image.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let rows: Vec<Vec<usize>> = (0..kh)
        .map(|ty| (0..h).map(|y| reflect_index(y as isize + ty as isize - ry, h)).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..kw)
        .map(|tx| (0..w).map(|x| reflect_index(x as isize + tx as isize - rx, w)).collect())
        .collect();
    let taps: Vec<(usize, usize, f32)> = kernel
        .taps
        .indexed_iter()
        .filter(|(_, &t)| t != 0.0)
        .map(|((ty, tx), &t)| (ty, tx, t))
        .collect();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        let dst = &mut out[y * w * c..(y + 1) * w * c];
        for &(ty, tx, tap) in &taps {
            let row = &src[rows[ty][y] * w * c..(rows[ty][y] + 1) * w * c];
            for (x, &xx) in cols[tx].iter().enumerate() {
                for ch in 0..c {
                    dst[x * c + ch] += tap * row[xx * c + ch];
                }
            }
        }
    }
    Image::from_shape_vec((h, w, c), out).expect("shape matches buffer")
}

/// Mean response of the three SRM kernels, per channel.
pub fn srm_residual(image: &Image) -> Image {
    filter_reflect(image, &Kernel::srm_mean())
}

/// `clamp(image + lambda * srm_residual(image), 0, 1)`.
pub fn srm_enhance(image: &Image, lambda: f32) -> Result<Image> {
    if !(lambda >= 0.0) {
        return Err(DclError::invalid(format!("srm lambda {lambda} must be >= 0")));
    }
    if lambda == 0.0 {
        return Ok(image.clone());
    }
    let residual = srm_residual(image);
    Ok(ndarray::Zip::from(image)
        .and(&residual)
        .map_collect(|&v, &r| (v + lambda * r).clamp(0.0, 1.0)))
}

/// Index of a uniformly chosen other frame of the same video; the sample itself
/// when its video has a single frame.
pub fn frame_shift_index(dataset: &Dataset, sample_index: usize, rng: &mut impl Rng) -> Result<usize> {
    let sample = dataset.get(sample_index);
    let frames = dataset
        .video_frames(&sample.video_id)
        .ok_or_else(|| DclError::Dataset(format!("video {} is not indexed", sample.video_id)))?;
    let others: Vec<usize> = frames.iter().copied().filter(|&i| i != sample_index).collect();
    Ok(others.choose(rng).copied().unwrap_or(sample_index))
}

pub fn frame_shift<'a>(dataset: &'a Dataset, sample_index: usize, rng: &mut impl Rng) -> Result<&'a Sample> {
    frame_shift_index(dataset, sample_index, rng).map(|i| dataset.get(i))
}

/// `lambda * fake + (1 - lambda) * real`, elementwise.
pub fn corresponding_mixup(fake: &Image, real: &Image, lambda: f32) -> Result<Image> {
    if fake.dim() != real.dim() {
        return Err(DclError::shape(format!("mixup of {:?} with {:?}", fake.dim(), real.dim())));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(DclError::invalid(format!("mixup lambda {lambda} outside (0, 1]")));
    }
    Ok(ndarray::Zip::from(fake)
        .and(real)
        .map_collect(|&f, &r| (lambda * f + (1.0 - lambda) * r).clamp(f.min(r), f.max(r))))
}

fn make_view(
    dataset: &Dataset,
    sample_index: usize,
    policy: &ViewPolicy,
    rng: &mut impl Rng,
) -> Result<(Image, usize, ViewGeometry)> {
    let base = if rng.gen_bool(policy.p_frameshift) {
        frame_shift_index(dataset, sample_index, rng)?
    } else {
        sample_index
    };
    let sample = dataset.get(base);
    let mut image = sample.image.clone();
    let mut geometry = ViewGeometry::default();

    if sample.label.is_fake() && rng.gen_bool(policy.p_mixup) {
        let real = dataset
            .corresponding_real(sample)
            .ok_or_else(|| DclError::Dataset(format!("{} has no corresponding real frame", sample.video_id)))?;
        let (lo, hi) = policy.mixup_range;
        let lambda = rng.gen_range(lo..=hi);
        image = corresponding_mixup(&image, &real.image, lambda)?;
    }
    if rng.gen_bool(policy.p_srm) {
        image = srm_enhance(&image, policy.srm_lambda)?;
    }
    if rng.gen_bool(policy.p_patch) {
        let (shuffled, perm) = random_patch_traced(&image, policy.patch_k, rng)?;
        image = shuffled;
        geometry.tile_perm = Some((policy.patch_k, perm));
    }
    if rng.gen_bool(policy.p_flip) {
        image = imageops::flip_horizontal(&image);
        geometry.flipped = true;
    }
    if rng.gen_bool(policy.p_blur) {
        let (lo, hi) = policy.blur_sigma_range;
        let sigma = rng.gen_range(lo..=hi);
        image = imageops::gaussian_blur(&image, sigma);
    }
    Ok((image, base, geometry))
}

/// Two independently augmented views of one sample.
pub fn make_views(dataset: &Dataset, sample_index: usize, policy: &ViewPolicy, rng: &mut impl Rng) -> Result<ViewPair> {
    policy.validate()?;
    let (view1, base1, geometry1) = make_view(dataset, sample_index, policy, rng)?;
    let (view2, base2, geometry2) = make_view(dataset, sample_index, policy, rng)?;
    Ok(ViewPair {
        view1,
        view2,
        label: dataset.get(sample_index).label,
        sample_index,
        base1,
        base2,
        geometry1,
        geometry2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, CorpusSpec, ManipKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(frames: usize) -> Dataset {
        let spec = CorpusSpec {
            n_videos: 3,
            frames_per_video: frames,
            image_size: 48,
            manipulation_families: vec![ManipKind::SpliceRect],
            blend_softness: 1.0,
            seed: 11,
        };
        Dataset::from_videos(&synthesize(&spec).unwrap()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_shape_fn((h, w, 3), |(y, x, c)| ((y * w + x) * 3 + c) as f32 / (h * w * 3) as f32)
    }

    fn sorted(image: &Image) -> Vec<f32> {
        let mut v: Vec<f32> = image.iter().copied().collect();
        v.sort_by(f32::total_cmp);
        v
    }

    #[test]
    fn single_patch_is_identity() {
        let image = ramp(12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_patch(&image, 1, &mut rng).unwrap(), image);
    }

    #[test]
    fn identity_permutation_is_identity() {
        let image = ramp(12, 12);
        assert_eq!(permute_tiles(&image, 3, &(0..9).collect::<Vec<_>>()).unwrap(), image);
    }

    #[test]
    fn patch_shuffle_preserves_pixel_multiset_on_96() {
        let image = ramp(96, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = random_patch(&image, 3, &mut rng).unwrap();
        assert_eq!(sorted(&out), sorted(&image));
    }

    #[test]
    fn patch_rejects_non_divisible_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(random_patch(&ramp(10, 12), 3, &mut rng), Err(DclError::Shape(_))));
    }

    #[test]
    fn srm_of_constant_image_is_identity() {
        let image = Image::from_elem((16, 16, 3), 0.4);
        let out = srm_enhance(&image, 1.0).unwrap();
        for (a, b) in out.iter().zip(image.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(srm_enhance(&ramp(8, 8), 0.0).unwrap(), ramp(8, 8));
    }

    #[test]
    fn srm_kernels_are_zero_sum() {
        for k in Kernel::srm_bank() {
            assert!(k.taps.sum().abs() < 1e-6);
        }
    }

    #[test]
    fn srm_residual_is_mean_of_bank_responses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = Image::from_shape_simple_fn((9, 11, 3), || rng.gen::<f32>());
        let bank = Kernel::srm_bank();
        let mut expect = Image::zeros(image.dim());
        for k in &bank {
            expect += &filter_reflect(&image, k);
        }
        expect /= bank.len() as f32;
        for (a, b) in srm_residual(&image).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn square3_impulse_response_at_center() {
        let mut image = Image::zeros((7, 7, 3));
        image[[3, 3, 0]] = 1.0;
        let response = filter_reflect(&image, &Kernel::square3());
        assert_eq!(response[[3, 3, 0]], -1.0);
        assert_eq!(response[[2, 3, 0]], 0.5);
        assert_eq!(response[[2, 2, 0]], -0.25);
    }

    #[test]
    fn srm_rejects_negative_lambda() {
        assert!(srm_enhance(&ramp(4, 4), -0.1).is_err());
    }

    #[test]
    fn frame_shift_single_frame_returns_sample() {
        let ds = dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..ds.len() {
            assert_eq!(frame_shift_index(&ds, i, &mut rng).unwrap(), i);
        }
    }

    #[test]
    fn frame_shift_two_frames_picks_the_other() {
        let ds = dataset(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..ds.len() {
            for _ in 0..5 {
                let j = frame_shift_index(&ds, i, &mut rng).unwrap();
                assert_ne!(i, j);
                assert_eq!(ds.get(i).video_id, ds.get(j).video_id);
                assert_eq!(ds.get(i).label, ds.get(j).label);
            }
        }
    }

    #[test]
    fn mixup_arithmetic() {
        let fake = Image::from_elem((2, 2, 3), 0.2);
        let real = Image::from_elem((2, 2, 3), 0.6);
        let out = corresponding_mixup(&fake, &real, 0.5).unwrap();
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert_eq!(corresponding_mixup(&fake, &real, 1.0).unwrap(), fake);
        let near_real = corresponding_mixup(&fake, &real, 1e-6).unwrap();
        assert!(near_real.iter().all(|v| (v - 0.6).abs() < 1e-5));
        assert!(corresponding_mixup(&fake, &real, 0.0).is_err());
        assert!(corresponding_mixup(&fake, &Image::zeros((2, 3, 3)), 0.5).is_err());
    }

    #[test]
    fn identity_policy_returns_sample_image() {
        let ds = dataset(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..ds.len() {
            let pair = make_views(&ds, i, &ViewPolicy::identity(), &mut rng).unwrap();
            assert_eq!(pair.view1, ds.get(i).image);
            assert_eq!(pair.view2, ds.get(i).image);
        }
    }

    #[test]
    fn real_samples_never_mixed() {
        let ds = dataset(3);
        let policy = ViewPolicy {
            p_mixup: 1.0,
            ..ViewPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in (0..ds.len()).filter(|&i| ds.get(i).label == Label::Real) {
            let pair = make_views(&ds, i, &policy, &mut rng).unwrap();
            assert_eq!(pair.view1, ds.get(i).image);
        }
    }

    #[test]
    fn views_are_deterministic_given_seed() {
        let ds = dataset(3);
        let policy = ViewPolicy::default();
        let a = make_views(&ds, 4, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_views(&ds, 4, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.view1, b.view1);
        assert_eq!(a.view2, b.view2);
        assert_eq!(a.geometry1, b.geometry1);
    }

    #[test]
    fn geometry_replays_patch_and_flip_on_maps() {
        let image = ramp(12, 12);
        let perm = vec![3, 1, 2, 0, 8, 5, 6, 7, 4];
        let geometry = ViewGeometry {
            tile_perm: Some((3, perm.clone())),
            flipped: true,
        };
        let view = imageops::flip_horizontal(&permute_tiles(&image, 3, &perm).unwrap());
        let channel0 = image.slice(s![.., .., 0]).to_owned();
        let replayed = geometry.apply_to_map(&channel0).unwrap();
        assert_eq!(replayed, view.slice(s![.., .., 0]));
    }

    proptest! {
        #[test]
        fn mixup_never_touches_real_samples(seed in any::<u64>(), p_mixup in 0.0f64..=1.0, p_shift in 0.0f64..=1.0) {
            let ds = dataset(2);
            let policy = ViewPolicy { p_mixup, p_frameshift: p_shift, p_srm: 0.0, p_patch: 0.0, p_flip: 0.0, p_blur: 0.0, ..ViewPolicy::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (0..ds.len()).filter(|&i| ds.get(i).label == Label::Real) {
                let pair = make_views(&ds, i, &policy, &mut rng).unwrap();
                prop_assert_eq!(&pair.view1, &ds.get(pair.base1).image);
                prop_assert_eq!(&pair.view2, &ds.get(pair.base2).image);
            }
        }

        #[test]
        fn views_keep_shape_and_range(seed in any::<u64>()) {
            let ds = dataset(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = (seed % ds.len() as u64) as usize;
            let pair = make_views(&ds, i, &ViewPolicy::default(), &mut rng).unwrap();
            for view in [&pair.view1, &pair.view2] {
                prop_assert_eq!(view.dim(), ds.get(i).image.dim());
                prop_assert!(view.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert_eq!(pair.label, ds.get(i).label);
        }

        #[test]
        fn patch_shuffle_preserves_multiset(seed in any::<u64>(), k in 1usize..=4) {
            let image = ramp(24, 24);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = random_patch(&image, k, &mut rng).unwrap();
            prop_assert_eq!(sorted(&out), sorted(&image));
        }
    }
}
