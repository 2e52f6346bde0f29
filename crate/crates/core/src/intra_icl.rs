//! Intra-instance contrastive learning.
//!
//! A fake frame's feature map is split into real and forged locations using
//! the pixel difference to its corresponding real frame. The fake-sample loss
//! pulls real locations together and pushes forged locations away from them;
//! forged locations are never contrasted with each other. The real-sample
//! loss drives every location of a real frame toward a common direction.
//!
//! All losses take the feature map as a `(H' * W') x C` matrix of location
//! rows (see [`crate::encoder::feature_rows`]).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{DclError, Result};
use crate::imageops::Image;
use crate::similarity::{normalize_rows, normalize_rows_backward};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntraConfig {
    /// Temperature used by both intra losses.
    pub tau: f64,
    /// Block-mean difference above which a feature cell counts as forged.
    pub bin_threshold: f32,
    /// Keep `i = j` pairs in the real-real sum.
    pub include_self_pairs: bool,
}

impl Default for IntraConfig {
    fn default() -> Self {
        IntraConfig {
            tau: 0.07,
            bin_threshold: 0.02,
            include_self_pairs: true,
        }
    }
}

impl IntraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(DclError::config("intra.tau", "must be > 0"));
        }
        if !(self.bin_threshold >= 0.0) {
            return Err(DclError::config("intra.bin_threshold", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-feature-cell real/fake partition; `true` marks a forged cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub feat_h: usize,
    pub feat_w: usize,
    /// Row-major `feat_h x feat_w`.
    pub grid: Vec<bool>,
    pub n_real: usize,
    pub n_fake: usize,
}

impl RegionMask {
    pub fn from_grid(feat_h: usize, feat_w: usize, grid: Vec<bool>) -> Result<RegionMask> {
        if grid.len() != feat_h * feat_w {
            return Err(DclError::shape(format!("{} cells for a {feat_h}x{feat_w} mask", grid.len())));
        }
        let n_fake = grid.iter().filter(|&&g| g).count();
        Ok(RegionMask {
            feat_h,
            feat_w,
            n_real: grid.len() - n_fake,
            n_fake,
            grid,
        })
    }

    pub fn all_real(feat_h: usize, feat_w: usize) -> RegionMask {
        RegionMask::from_grid(feat_h, feat_w, vec![false; feat_h * feat_w]).expect("sized grid")
    }
}

/// Channel-mean absolute difference `|fake - real|`, `H x W`.
pub fn difference_map(fake: &Image, real: &Image) -> Result<Array2<f32>> {
    if fake.dim() != real.dim() {
        return Err(DclError::shape(format!("mask of {:?} against {:?}", fake.dim(), real.dim())));
    }
    let (h, w, c) = fake.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ch| (fake[[y, x, ch]] - real[[y, x, ch]]).abs()).sum::<f32>() / c as f32
    }))
}

/// Block-average a difference map to the feature grid and threshold it.
pub fn mask_from_difference(diff: &Array2<f32>, feat_h: usize, feat_w: usize, bin_threshold: f32) -> Result<RegionMask> {
    let (h, w) = diff.dim();
    if feat_h == 0 || feat_w == 0 || h % feat_h != 0 || w % feat_w != 0 {
        return Err(DclError::shape(format!("{h}x{w} difference map does not tile a {feat_h}x{feat_w} grid")));
    }
    let (bh, bw) = (h / feat_h, w / feat_w);
    let grid = (0..feat_h * feat_w)
        .map(|cell| {
            let (r, c) = (cell / feat_w, cell % feat_w);
            let block = diff.slice(ndarray::s![r * bh..(r + 1) * bh, c * bw..(c + 1) * bw]);
            block.mean().unwrap_or(0.0) > bin_threshold
        })
        .collect();
    RegionMask::from_grid(feat_h, feat_w, grid)
}

pub fn make_mask(fake_image: &Image, real_image: &Image, feat_h: usize, feat_w: usize, bin_threshold: f32) -> Result<RegionMask> {
    mask_from_difference(&difference_map(fake_image, real_image)?, feat_h, feat_w, bin_threshold)
}

/// Location rows of one feature map split by a mask, in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSet {
    pub real_parts: Array2<f64>,
    pub fake_parts: Array2<f64>,
    pub real_locations: Vec<usize>,
    pub fake_locations: Vec<usize>,
}

pub fn segment_parts(rows: ArrayView2<f64>, mask: &RegionMask) -> Result<PartSet> {
    if rows.nrows() != mask.grid.len() {
        return Err(DclError::shape(format!(
            "feature map has {} locations, mask has {}",
            rows.nrows(),
            mask.grid.len()
        )));
    }
    let (fake_locations, real_locations): (Vec<usize>, Vec<usize>) = (0..rows.nrows()).partition(|&i| mask.grid[i]);
    let gather = |locs: &[usize]| rows.select(ndarray::Axis(0), locs);
    Ok(PartSet {
        real_parts: gather(&real_locations),
        fake_parts: gather(&fake_locations),
        real_locations,
        fake_locations,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(DclError::invalid(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

/// Loss for a fake sample's parts and its gradients with respect to the raw
/// real and fake part rows.
///
/// `-log( S_rr / (S_rr + S_fr) )` with `S_rr = sum_ij exp(d(r_i, r_j)/tau)`
/// over real pairs and `S_fr = sum exp(d(f_j, r_i)/tau)` over fake x real
/// pairs. Zero when there are no fake parts.
pub fn intra_loss_fake_grad(parts: &PartSet, tau: f64, include_self_pairs: bool) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_tau(tau)?;
    let n = parts.real_parts.nrows();
    let k = parts.fake_parts.nrows();
    let c = parts.real_parts.ncols().max(parts.fake_parts.ncols());
    if n == 0 {
        return Err(DclError::invalid("fully forged mask: no real parts to contrast against"));
    }
    if !include_self_pairs && n < 2 {
        return Err(DclError::invalid("a single real part has no pairs without self pairs"));
    }
    if k == 0 {
        return Ok((0.0, Array2::zeros((n, c)), Array2::zeros((0, c))));
    }
    let (r, r_norm) = normalize_rows(parts.real_parts.view())?;
    let (f, f_norm) = normalize_rows(parts.fake_parts.view())?;
    // Shift by the maximum possible similarity 1/tau.
    let shift = 1.0 / tau;
    let mut a = r.dot(&r.t()).mapv(|s| (s / tau - shift).exp());
    if !include_self_pairs {
        a.diag_mut().fill(0.0);
    }
    let b = f.dot(&r.t()).mapv(|s| (s / tau - shift).exp());
    let (sa, sb) = (a.sum(), b.sum());
    let loss = (sa + sb).ln() - sa.ln();

    // dL/dS_rr = a (1/(A+B) - 1/A) / tau, dL/dS_fr = b / ((A+B) tau)
    let g_rr = &a * ((1.0 / (sa + sb) - 1.0 / sa) / tau);
    let g_fr = &b * (1.0 / ((sa + sb) * tau));
    let d_r_unit = (&g_rr + &g_rr.t()).dot(&r) + g_fr.t().dot(&f);
    let d_f_unit = g_fr.dot(&r);
    Ok((
        loss.max(0.0),
        normalize_rows_backward(&r, &r_norm, &d_r_unit),
        normalize_rows_backward(&f, &f_norm, &d_f_unit),
    ))
}

pub fn intra_loss_fake(parts: &PartSet, tau: f64, include_self_pairs: bool) -> Result<f64> {
    intra_loss_fake_grad(parts, tau, include_self_pairs).map(|(l, _, _)| l)
}

/// Gram matrix of row-normalised location vectors.
pub fn normalized_gram(rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (x, _) = normalize_rows(rows)?;
    Ok(x.dot(&x.t()))
}

/// Loss for a real sample, `-log sum_uv exp(G_uv / tau)` over the normalised
/// gram matrix, and its gradient with respect to the raw location rows.
/// Can be negative; its minimum is reached when all locations align.
pub fn intra_loss_real_grad(rows: ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let (x, norms) = normalize_rows(rows).map_err(|e| DclError::invalid(format!("dead feature location: {e}")))?;
    let shift = 1.0 / tau;
    let e = x.dot(&x.t()).mapv(|g| (g / tau - shift).exp());
    let s = e.sum();
    let loss = -(shift + s.ln());
    // dL/dG = -e / (s tau); G symmetric so dX = 2 dG X
    let d_x = (&e * (-2.0 / (s * tau))).dot(&x);
    Ok((loss, normalize_rows_backward(&x, &norms, &d_x)))
}

pub fn intra_loss_real(rows: ArrayView2<f64>, tau: f64) -> Result<f64> {
    intra_loss_real_grad(rows, tau).map(|(l, _)| l)
}

/// Nudge exactly-zero location rows so normalisation stays defined.
pub fn perturb_dead_rows(rows: &mut Array2<f64>) -> usize {
    let mut fixed = 0;
    for mut row in rows.rows_mut() {
        if row.iter().all(|&v| v == 0.0) {
            row.fill(1e-6);
            fixed += 1;
        }
    }
    fixed
}

pub struct IntraItem<'a> {
    pub rows: ArrayView2<'a, f64>,
    pub label: Label,
    pub mask: Option<&'a RegionMask>,
}

/// Batch intra loss: mean over real samples plus mean over fake samples that
/// have at least one real part. Returns per-item gradients of that value
/// (`None` for fake samples whose term was skipped).
pub fn intra_loss_batch_grad(items: &[IntraItem<'_>], tau: f64, include_self_pairs: bool) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    check_tau(tau)?;
    let mut per_item: Vec<Option<(f64, Array2<f64>)>> = Vec::with_capacity(items.len());
    for item in items {
        let term = match item.label {
            Label::Real => Some(intra_loss_real_grad(item.rows, tau)?),
            Label::Fake => {
                let mask = item
                    .mask
                    .ok_or_else(|| DclError::invalid("fake sample has no region mask"))?;
                let parts = segment_parts(item.rows, mask)?;
                let usable = mask.n_real > if include_self_pairs { 0 } else { 1 };
                if usable {
                    let (loss, d_real, d_fake) = intra_loss_fake_grad(&parts, tau, include_self_pairs)?;
                    let mut grad = Array2::zeros(item.rows.dim());
                    for (row, &loc) in d_real.rows().into_iter().zip(&parts.real_locations) {
                        grad.row_mut(loc).assign(&row);
                    }
                    for (row, &loc) in d_fake.rows().into_iter().zip(&parts.fake_locations) {
                        grad.row_mut(loc).assign(&row);
                    }
                    Some((loss, grad))
                } else {
                    None
                }
            }
        };
        per_item.push(term);
    }
    let count = |label: Label| {
        items
            .iter()
            .zip(&per_item)
            .filter(|(it, t)| it.label == label && t.is_some())
            .count()
    };
    let (n_real, n_fake) = (count(Label::Real), count(Label::Fake));
    let mut total = 0.0;
    let grads = items
        .iter()
        .zip(per_item)
        .map(|(item, term)| {
            term.map(|(loss, grad)| {
                let n = if item.label == Label::Real { n_real } else { n_fake } as f64;
                total += loss / n;
                grad / n
            })
        })
        .collect();
    Ok((total, grads))
}

pub fn intra_loss_batch(items: &[IntraItem<'_>], tau: f64, include_self_pairs: bool) -> Result<f64> {
    intra_loss_batch_grad(items, tau, include_self_pairs).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn parts(real: Array2<f64>, fake: Array2<f64>) -> PartSet {
        let n = real.nrows();
        let k = fake.nrows();
        PartSet {
            real_parts: real,
            fake_parts: fake,
            real_locations: (0..n).collect(),
            fake_locations: (n..n + k).collect(),
        }
    }

    #[test]
    fn identical_frames_give_empty_mask() {
        let img = Image::from_elem((12, 12, 3), 0.3);
        let m = make_mask(&img, &img, 6, 6, 0.0).unwrap();
        assert_eq!(m.n_fake, 0);
        assert_eq!(m.n_real, 36);
    }

    #[test]
    fn top_left_quadrant_difference_maps_to_top_left_cells() {
        let real = Image::zeros((96, 96, 3));
        let mut fake = real.clone();
        fake.slice_mut(ndarray::s![..48, ..48, ..]).fill(0.5);
        let m = make_mask(&fake, &real, 6, 6, 0.0).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m.grid[r * 6 + c], r < 3 && c < 3);
            }
        }
        assert_eq!(m.n_fake, 9);
    }

    #[test]
    fn everything_different_is_all_fake() {
        let real = Image::zeros((12, 12, 3));
        let fake = Image::from_elem((12, 12, 3), 0.9);
        let m = make_mask(&fake, &real, 6, 6, 0.5).unwrap();
        assert_eq!(m.n_real, 0);
        assert!(make_mask(&fake, &Image::zeros((12, 6, 3)), 6, 6, 0.5).is_err());
    }

    #[test]
    fn segmentation_examples() {
        let rows = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let none = RegionMask::all_real(2, 2);
        let p = segment_parts(rows.view(), &none).unwrap();
        assert_eq!(p.fake_parts.nrows(), 0);
        assert_eq!(p.real_parts.nrows(), 4);
        let first = RegionMask::from_grid(2, 2, vec![true, false, false, false]).unwrap();
        let p = segment_parts(rows.view(), &first).unwrap();
        assert_eq!(p.fake_parts, array![[1.0, 2.0, 3.0]]);
        assert_eq!(p.real_parts.nrows() + p.fake_parts.nrows(), 4);
        assert!(segment_parts(rows.view(), &RegionMask::all_real(3, 3)).is_err());
    }

    #[test]
    fn fake_loss_examples() {
        let no_fake = parts(array![[1.0, 0.0]], Array2::zeros((0, 2)));
        assert_eq!(intra_loss_fake(&no_fake, 0.07, true).unwrap(), 0.0);

        let e = 1f64.exp();
        let p = parts(array![[1.0, 0.0], [1.0, 0.0]], array![[0.0, 1.0]]);
        let l = intra_loss_fake(&p, 1.0, true).unwrap();
        assert!((l - (-(4.0 * e / (4.0 * e + 2.0)).ln())).abs() < 1e-12);
        assert!((l - 0.16885).abs() < 1e-5);

        let p = parts(array![[1.0, 1.0]], array![[2.0, 2.0]]);
        let l = intra_loss_fake(&p, 1.0, true).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let all_fake = parts(Array2::zeros((0, 2)), array![[1.0, 0.0]]);
        assert!(intra_loss_fake(&all_fake, 1.0, true).is_err());
        assert!(intra_loss_fake(&p, 0.0, true).is_err());
    }

    #[test]
    fn real_loss_examples() {
        assert!((intra_loss_real(array![[0.3, 0.4]].view(), 1.0).unwrap() + 1.0).abs() < 1e-12);
        let four = Array2::from_elem((4, 3), 1.0);
        let l = intra_loss_real(four.view(), 1.0).unwrap();
        assert!((l + (1.0 + 16f64.ln())).abs() < 1e-12);
        assert!((l + 3.77259).abs() < 1e-5);
        let ortho = array![[1.0, 0.0], [0.0, 1.0]];
        let l = intra_loss_real(ortho.view(), 1.0).unwrap();
        assert!((l + (2.0 * 1f64.exp() + 2.0).ln()).abs() < 1e-12);
        assert!((l + 2.00641).abs() < 1e-5);
        assert!(intra_loss_real(array![[0.0, 0.0], [1.0, 0.0]].view(), 1.0).is_err());
    }

    #[test]
    fn batch_means_per_class() {
        let real_rows = array![[1.0, 0.0], [0.0, 1.0]];
        let fake_rows = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = RegionMask::from_grid(1, 2, vec![false, true]).unwrap();
        let real_item = || IntraItem { rows: real_rows.view(), label: Label::Real, mask: None };
        let fake_item = || IntraItem { rows: fake_rows.view(), label: Label::Fake, mask: Some(&mask) };
        let lr = intra_loss_real(real_rows.view(), 0.5).unwrap();
        let lf = intra_loss_fake(&segment_parts(fake_rows.view(), &mask).unwrap(), 0.5, true).unwrap();

        let only_real = intra_loss_batch(&[real_item(), real_item()], 0.5, true).unwrap();
        assert!((only_real - lr).abs() < 1e-12);
        let only_fake = intra_loss_batch(&[fake_item()], 0.5, true).unwrap();
        assert!((only_fake - lf).abs() < 1e-12);
        let mixed = intra_loss_batch(&[real_item(), fake_item(), fake_item()], 0.5, true).unwrap();
        assert!((mixed - (lr + lf)).abs() < 1e-12);

        let missing = IntraItem { rows: fake_rows.view(), label: Label::Fake, mask: None };
        assert!(intra_loss_batch(&[missing], 0.5, true).is_err());
    }

    #[test]
    fn fully_forged_sample_is_skipped() {
        let rows = array![[1.0, 0.0], [0.0, 1.0]];
        let mask = RegionMask::from_grid(1, 2, vec![true, true]).unwrap();
        let item = IntraItem { rows: rows.view(), label: Label::Fake, mask: Some(&mask) };
        let (loss, grads) = intra_loss_batch_grad(&[item], 0.5, true).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads[0].is_none());
    }

    #[test]
    fn fake_fake_similarity_has_no_gradient() {
        // Moving two fake parts relative to each other, with their similarity to
        // every real part held fixed, must not change the loss.
        let real = array![[1.0, 0.0, 0.0, 0.0], [0.8, 0.6, 0.0, 0.0]];
        let base = array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let apart = array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let a = intra_loss_fake(&parts(real.clone(), base), 0.1, true).unwrap();
        let b = intra_loss_fake(&parts(real, apart), 0.1, true).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fake_loss_is_non_negative_and_permutation_invariant(
            seed in any::<u64>(), n in 1usize..=4, k in 0usize..=4, c in 2usize..=8,
        ) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let real = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
            let fake = Array2::from_shape_fn((k, c), |_| rng.gen_range(-1.0..1.0));
            let l = intra_loss_fake(&parts(real.clone(), fake.clone()), 0.3, true).unwrap();
            prop_assert!(l >= 0.0);
            let mut pr: Vec<usize> = (0..n).collect();
            pr.shuffle(&mut rng);
            let mut pf: Vec<usize> = (0..k).collect();
            pf.shuffle(&mut rng);
            let lp = intra_loss_fake(&parts(real.select(ndarray::Axis(0), &pr), fake.select(ndarray::Axis(0), &pf)), 0.3, true).unwrap();
            prop_assert!((l - lp).abs() < 1e-10);
        }

        #[test]
        fn real_loss_invariant_to_row_permutation_and_scaling(seed in any::<u64>(), n in 1usize..=9, c in 2usize..=8) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
            let l = intra_loss_real(rows.view(), 0.2).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut moved = rows.select(ndarray::Axis(0), &perm);
            for mut row in moved.rows_mut() {
                let s = rng.gen_range(0.1..10.0);
                row.mapv_inplace(|v| v * s);
            }
            prop_assert!((intra_loss_real(moved.view(), 0.2).unwrap() - l).abs() < 1e-9);
        }
    }
}
