//! Query-path inference, ROC metrics, the gram self-similarity statistic and
//! report artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::encoder::{feature_rows, sigmoid, EncoderPair};
use crate::error::{DclError, Result};
use crate::imageops::write_rgb8_png;
use crate::intra_icl::{normalized_gram, perturb_dead_rows};
use crate::trainer::load_checkpoint;

/// Fake-probability scores with their labels and ids, one entry per frame or video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub sample_ids: Vec<String>,
    pub video_ids: Vec<String>,
}

impl ScoreSet {
    /// Anonymous score set; each entry is its own video.
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<ScoreSet> {
        if scores.len() != labels.len() {
            return Err(DclError::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        let ids: Vec<String> = (0..scores.len()).map(|i| i.to_string()).collect();
        Ok(ScoreSet {
            scores,
            labels,
            sample_ids: ids.clone(),
            video_ids: ids,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.scores, &self.labels)
    }

    pub fn eer(&self) -> Result<f64> {
        eer(&self.scores, &self.labels)
    }

    /// One entry per video, scored by the mean of its frames.
    pub fn by_video(&self) -> ScoreSet {
        let mut groups: BTreeMap<&str, (f64, usize, Label)> = BTreeMap::new();
        for ((s, l), v) in self.scores.iter().zip(&self.labels).zip(&self.video_ids) {
            let g = groups.entry(v.as_str()).or_insert((0.0, 0, *l));
            g.0 += s;
            g.1 += 1;
        }
        let mut out = ScoreSet {
            scores: Vec::new(),
            labels: Vec::new(),
            sample_ids: Vec::new(),
            video_ids: Vec::new(),
        };
        for (v, (sum, n, l)) in groups {
            out.scores.push(sum / n as f64);
            out.labels.push(l);
            out.sample_ids.push(v.to_string());
            out.video_ids.push(v.to_string());
        }
        out
    }
}

fn check_binary(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(DclError::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DclError::invalid("NaN score"));
    }
    let n_fake = labels.iter().filter(|l| l.is_fake()).count();
    let n_real = labels.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(DclError::invalid("AUC/EER need both real and fake samples"));
    }
    Ok((n_real, n_fake))
}

/// Probability that a random fake outscores a random real, ties counting
/// one half. Mid-ranks are kept doubled so the computation stays in integers.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (n_real, n_fake) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the mid-rank (i + 1 + j) / 2
        let doubled_mid = (i + 1 + j) as u128;
        let fakes = order[i..j].iter().filter(|&&k| labels[k].is_fake()).count() as u128;
        doubled_rank_sum += doubled_mid * fakes;
        i = j;
    }
    let nf = n_fake as u128;
    let doubled_u = doubled_rank_sum - nf * (nf + 1);
    Ok(doubled_u as f64 / (2 * nf * n_real as u128) as f64)
}

/// Equal error rate over the sweep "predict fake when score >= t".
///
/// Operating points are taken at every distinct score plus `+inf`; when no
/// point has FPR = FNR, the two points bracketing the sign change of
/// FNR - FPR are joined linearly.
pub fn eer(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (n_real, n_fake) = check_binary(scores, labels)?;
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, l)| (s, l.is_fake())).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // At the lowest threshold everything is predicted fake.
    let mut fp = n_real;
    let mut fn_ = 0usize;
    let mut points = vec![(1.0, 0.0)];
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                fn_ += 1;
            } else {
                fp -= 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_real as f64, fn_ as f64 / n_fake as f64));
        i = j;
    }
    let mut prev = points[0];
    for &(fpr, fnr) in &points {
        let d = fnr - fpr;
        if d == 0.0 {
            return Ok(fpr);
        }
        if d > 0.0 {
            let d_prev = prev.1 - prev.0;
            let w = -d_prev / (d - d_prev);
            return Ok(prev.0 + w * (fpr - prev.0));
        }
        prev = (fpr, fnr);
    }
    unreachable!("the sweep ends at FPR 0, FNR 1")
}

/// Mean off-diagonal entry of the normalised gram matrix of location rows.
/// A single-location map has no off-diagonal entries and returns 1.
pub fn self_similarity_stat(rows: ArrayView2<f64>) -> Result<f64> {
    let n = rows.nrows();
    if n == 0 {
        return Err(DclError::invalid("feature map has no locations"));
    }
    if n == 1 {
        return Ok(1.0);
    }
    let g = normalized_gram(rows)?;
    let off = g.sum() - g.diag().sum();
    Ok(off / (n * (n - 1)) as f64)
}

/// Per-frame inference outputs used by the metrics and the report.
#[derive(Clone, Debug)]
pub struct Inference {
    pub score: f64,
    pub pooled: Vec<f32>,
    pub self_similarity: f64,
}

/// Query encoder and classifier only; no view augmentation.
pub fn infer(model: &EncoderPair, dataset: &Dataset) -> Result<Vec<Inference>> {
    dataset
        .samples()
        .par_iter()
        .map(|s| {
            let out = model.forward_query(&s.image)?;
            let mut rows = feature_rows(&out.feature_map).mapv(f64::from);
            perturb_dead_rows(&mut rows);
            let self_similarity = self_similarity_stat(rows.view())?;
            Ok(Inference {
                score: sigmoid(out.logit as f64),
                pooled: out.pooled.to_vec(),
                self_similarity,
            })
        })
        .collect()
}

fn score_set(dataset: &Dataset, scores: Vec<f64>) -> ScoreSet {
    ScoreSet {
        scores,
        labels: dataset.samples().iter().map(|s| s.label).collect(),
        sample_ids: dataset
            .samples()
            .iter()
            .map(|s| format!("{}/{}", s.video_id, s.frame_idx))
            .collect(),
        video_ids: dataset.samples().iter().map(|s| s.video_id.clone()).collect(),
    }
}

pub fn predict(model: &EncoderPair, dataset: &Dataset) -> Result<ScoreSet> {
    let inf = infer(model, dataset)?;
    Ok(score_set(dataset, inf.into_iter().map(|i| i.score).collect()))
}

pub fn predict_checkpoint(checkpoint: &Path, dataset: &Dataset) -> Result<ScoreSet> {
    predict(&load_checkpoint(checkpoint)?.model, dataset)
}

/// Self-similarity used as a detector: lower self-similarity means fake, so
/// the score is `1 - stat`.
pub fn self_similarity_scores(model: &EncoderPair, dataset: &Dataset) -> Result<ScoreSet> {
    let inf = infer(model, dataset)?;
    Ok(score_set(dataset, inf.into_iter().map(|i| 1.0 - i.self_similarity).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc_frame: f64,
    pub eer_frame: f64,
    pub auc_video: f64,
    pub eer_video: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

impl Metrics {
    pub fn from_scores(frames: &ScoreSet) -> Result<Metrics> {
        let videos = frames.by_video();
        let n_fake = frames.labels.iter().filter(|l| l.is_fake()).count();
        Ok(Metrics {
            auc_frame: frames.auc()?,
            eer_frame: frames.eer()?,
            auc_video: videos.auc()?,
            eer_video: videos.eer()?,
            n_real: frames.len() - n_fake,
            n_fake,
        })
    }
}

pub fn evaluate(model: &EncoderPair, dataset: &Dataset) -> Result<Metrics> {
    Metrics::from_scores(&predict(model, dataset)?)
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| DclError::io(path, e))
}

/// Overlaid two-colour histogram of real (blue) and fake (red) values.
pub fn write_histogram(real: &[f64], fake: &[f64], bins: usize, path: &Path) -> Result<()> {
    let (w, h) = (320usize, 200usize);
    let all = real.iter().chain(fake);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let count = |vals: &[f64]| {
        let mut c = vec![0usize; bins];
        for &v in vals {
            let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as isize;
            c[b.clamp(0, bins as isize - 1) as usize] += 1;
        }
        c
    };
    let (cr, cf) = (count(real), count(fake));
    let peak = cr.iter().chain(&cf).copied().max().unwrap_or(1).max(1);
    let mut px = vec![255u8; w * h * 3];
    let bar_w = w / bins;
    for (counts, color, offset) in [(&cr, [40u8, 90, 220], 0usize), (&cf, [220, 50, 40], bar_w / 2)] {
        for (b, &c) in counts.iter().enumerate() {
            let bar_h = c * (h - 10) / peak;
            for y in (h - bar_h)..h {
                for x in (b * bar_w + offset)..(b * bar_w + offset + bar_w / 2).min(w) {
                    px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    write_rgb8_png(&px, w, h, path)
}

/// Write metrics.json, selfsim_{real,fake}.csv, embeddings.csv and two
/// histogram images into `out_dir`.
pub fn report(model: &EncoderPair, dataset: &Dataset, out_dir: &Path) -> Result<Metrics> {
    fs::create_dir_all(out_dir).map_err(|e| DclError::io(out_dir, e))?;
    let inf = infer(model, dataset)?;
    let frames = score_set(dataset, inf.iter().map(|i| i.score).collect());
    let metrics = Metrics::from_scores(&frames)?;
    let metrics_path = out_dir.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?).map_err(|e| DclError::io(&metrics_path, e))?;

    let samples = dataset.samples();
    for (label, name) in [(Label::Real, "selfsim_real.csv"), (Label::Fake, "selfsim_fake.csv")] {
        let rows = samples
            .iter()
            .zip(&inf)
            .filter(move |(s, _)| s.label == label)
            .map(|(s, i)| vec![s.video_id.clone(), s.frame_idx.to_string(), format!("{}", i.self_similarity)]);
        let header = ["video_id", "frame_idx", "self_similarity"].map(String::from);
        write_csv(&out_dir.join(name), &header, rows)?;
    }

    let c = model.config.channels;
    let mut header: Vec<String> = ["video_id", "frame_idx", "label"].map(String::from).to_vec();
    header.extend((0..c).map(|j| format!("f{j}")));
    let rows = samples.iter().zip(&inf).map(|(s, i)| {
        let mut r = vec![s.video_id.clone(), s.frame_idx.to_string(), (s.label as u8).to_string()];
        r.extend(i.pooled.iter().map(|v| format!("{v}")));
        r
    });
    write_csv(&out_dir.join("embeddings.csv"), &header, rows)?;

    let split = |f: &dyn Fn(&Inference) -> f64| -> (Vec<f64>, Vec<f64>) {
        let mut real = Vec::new();
        let mut fake = Vec::new();
        for (s, i) in samples.iter().zip(&inf) {
            if s.label.is_fake() { &mut fake } else { &mut real }.push(f(i));
        }
        (real, fake)
    };
    let (r, f) = split(&|i| i.self_similarity);
    write_histogram(&r, &f, 20, &out_dir.join("selfsim_hist.png"))?;
    let (r, f) = split(&|i| i.score);
    write_histogram(&r, &f, 20, &out_dir.join("score_hist.png"))?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&b| Label::from_u8(b).unwrap()).collect()
    }

    #[test]
    fn auc_examples() {
        let l = labels(&[0, 0, 1, 1]);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &labels(&[1, 1])).is_err());
    }

    #[test]
    fn eer_examples() {
        let l = labels(&[0, 0, 1, 1]);
        assert_eq!(eer(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 0.0);
        assert_eq!(eer(&[0.8, 0.9, 0.1, 0.2], &l).unwrap(), 1.0);
        // Sweep for [0.1, 0.4, 0.35, 0.8]: at t = 0.4 FPR = FNR = 0.5.
        assert_eq!(eer(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.5);
        assert!(eer(&[0.3], &labels(&[0])).is_err());
    }

    #[test]
    fn self_similarity_examples() {
        assert!((self_similarity_stat(array![[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]].view()).unwrap() - 1.0).abs() < 1e-12);
        assert!(self_similarity_stat(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap().abs() < 1e-12);
        let c = 60f64.to_radians();
        let s = self_similarity_stat(array![[1.0, 0.0], [c.cos(), c.sin()]].view()).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        assert_eq!(self_similarity_stat(array![[0.3, 0.1]].view()).unwrap(), 1.0);
    }

    #[test]
    fn video_aggregation_is_mean() {
        let set = ScoreSet {
            scores: vec![0.2, 0.4, 0.9],
            labels: labels(&[0, 0, 1]),
            sample_ids: vec!["a/0".into(), "a/1".into(), "b/0".into()],
            video_ids: vec!["a".into(), "a".into(), "b".into()],
        };
        let v = set.by_video();
        assert_eq!(v.len(), 2);
        assert!((v.scores[0] - 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant_and_complementary(raw in proptest::collection::vec((0u32..1000, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 1000.0).collect();
            let mut l: Vec<Label> = raw.iter().map(|r| if r.1 { Label::Fake } else { Label::Real }).collect();
            l[0] = Label::Real;
            l[1] = Label::Fake;
            let a = auc(&scores, &l).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(a, auc(&warped, &l).unwrap());
            let flipped: Vec<Label> = l.iter().map(|x| if x.is_fake() { Label::Real } else { Label::Fake }).collect();
            prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn self_similarity_ignores_row_scale(seed in any::<u64>(), n in 2usize..10) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows = ndarray::Array2::from_shape_fn((n, 4), |_| rng.gen_range(0.1..1.0));
            let mut scaled = rows.clone();
            for mut r in scaled.rows_mut() {
                let s = rng.gen_range(0.1..10.0);
                r.mapv_inplace(|v| v * s);
            }
            let a = self_similarity_stat(rows.view()).unwrap();
            let b = self_similarity_stat(scaled.view()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
