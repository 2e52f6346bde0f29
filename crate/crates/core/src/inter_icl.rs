//! Inter-instance contrastive learning: cosine similarity, the InfoNCE loss
//! against the class-opposite negative queue, EMA class prototypes, and the
//! prototype gate that admits only hard keys into the queues.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{DclError, Result};
use crate::similarity::{l2_norm, log_sum_exp, normalize, normalize_rows, normalize_rows_backward};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    pub queue_capacity: usize,
    /// Total enqueues before the prototype gate starts filtering.
    pub warmup_fill: u64,
    /// Prototype EMA coefficient.
    pub alpha: f64,
    pub gate_threshold: f64,
    /// `false` admits every key (plain MoCo-style queues).
    pub gate_enabled: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.07,
            queue_capacity: 2048,
            warmup_fill: 256,
            alpha: 0.9,
            gate_threshold: 0.5,
            gate_enabled: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(DclError::config("contrast.tau", "must be > 0"));
        }
        if self.queue_capacity == 0 {
            return Err(DclError::config("contrast.queue_capacity", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DclError::config("contrast.alpha", "must lie in [0, 1]"));
        }
        if !self.gate_threshold.is_finite() {
            return Err(DclError::config("contrast.gate_threshold", "must be finite"));
        }
        Ok(())
    }
}

/// `u/|u| . v/|v|`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DclError::shape(format!("cosine of length {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if !(nu > 0.0 && nv > 0.0) {
        return Err(DclError::invalid("cosine similarity of a zero-norm vector"));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(DclError::invalid(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

/// InfoNCE of one query against its positive key and a set of negative rows.
pub fn inter_loss(q: &[f64], k: &[f64], negatives: ArrayView2<f64>, tau: f64) -> Result<f64> {
    inter_loss_grad(q, k, negatives, tau).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the raw (unnormalised) query.
/// Key and negatives are constants.
pub fn inter_loss_grad(q: &[f64], k: &[f64], negatives: ArrayView2<f64>, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    let d = q.len();
    if k.len() != d || (negatives.nrows() > 0 && negatives.ncols() != d) {
        return Err(DclError::shape("query, key and negatives must share a dimension"));
    }
    let q_mat = ndarray::ArrayView2::from_shape((1, d), q).expect("1 x d");
    let (q_unit, q_norm) = normalize_rows(q_mat)?;
    let k_unit = Array1::from(normalize(k)?);
    let neg_unit = if negatives.nrows() > 0 {
        normalize_rows(negatives)?.0
    } else {
        Array2::zeros((0, d))
    };
    let qv = q_unit.row(0);
    let pos = qv.dot(&k_unit) / tau;
    let negs = neg_unit.dot(&qv) / tau;
    let mut logits = Vec::with_capacity(negs.len() + 1);
    logits.push(pos);
    logits.extend(negs.iter().copied());
    let lse = log_sum_exp(&logits);
    let loss = (lse - pos).max(0.0);

    let p_neg = negs.mapv(|s| (s - lse).exp() / tau);
    let p_pos = ((pos - lse).exp() - 1.0) / tau;
    let mut d_unit = &k_unit * p_pos;
    d_unit += &neg_unit.t().dot(&p_neg);
    let d_q = normalize_rows_backward(&q_unit, &q_norm, &d_unit.insert_axis(Axis(0)));
    Ok((loss, d_q.row(0).to_vec()))
}

/// Mean InfoNCE over a batch. Real queries contrast against `fake_queue`,
/// fake queries against `real_queue`. Returns the mean loss and the gradient
/// of the mean with respect to each raw query row.
pub fn inter_loss_batch(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    labels: &[Label],
    real_queue: ArrayView2<f64>,
    fake_queue: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let (b, d) = queries.dim();
    if keys.dim() != (b, d) || labels.len() != b {
        return Err(DclError::shape("queries, keys and labels disagree on batch size"));
    }
    if b == 0 {
        return Ok((0.0, Array2::zeros((0, d))));
    }
    let unit_or_empty = |m: ArrayView2<f64>| -> Result<Array2<f64>> {
        if m.nrows() == 0 {
            Ok(Array2::zeros((0, d)))
        } else if m.ncols() != d {
            Err(DclError::shape("queue dimension differs from query dimension"))
        } else {
            Ok(normalize_rows(m)?.0)
        }
    };
    let (q_unit, q_norms) = normalize_rows(queries)?;
    let (k_unit, _) = normalize_rows(keys)?;
    let real_unit = unit_or_empty(real_queue)?;
    let fake_unit = unit_or_empty(fake_queue)?;

    let pos = (&q_unit * &k_unit).sum_axis(Axis(1)) / tau;
    let s_real = q_unit.dot(&real_unit.t()) / tau;
    let s_fake = q_unit.dot(&fake_unit.t()) / tau;

    let mut w_real = Array2::zeros(s_real.dim());
    let mut w_fake = Array2::zeros(s_fake.dim());
    let mut w_pos = Array1::zeros(b);
    let mut total = 0.0;
    for i in 0..b {
        let (negs, mut w) = match labels[i] {
            Label::Real => (s_fake.row(i), w_fake.row_mut(i)),
            Label::Fake => (s_real.row(i), w_real.row_mut(i)),
        };
        let mut logits = Vec::with_capacity(negs.len() + 1);
        logits.push(pos[i]);
        logits.extend(negs.iter().copied());
        let lse = log_sum_exp(&logits);
        total += (lse - pos[i]).max(0.0);
        w.assign(&negs.mapv(|s| (s - lse).exp() / tau));
        w_pos[i] = ((pos[i] - lse).exp() - 1.0) / tau;
    }
    let mut d_unit = &k_unit * &w_pos.view().insert_axis(Axis(1));
    d_unit += &w_real.dot(&real_unit);
    d_unit += &w_fake.dot(&fake_unit);
    let mut d_q = normalize_rows_backward(&q_unit, &q_norms, &d_unit);
    d_q /= b as f64;
    Ok((total / b as f64, d_q))
}

/// Fixed-capacity FIFO ring of unit-normalised, detached key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    dim: usize,
    capacity: usize,
    buffer: Vec<f32>,
    len: usize,
    /// Next slot to write.
    head: usize,
}

impl FeatureQueue {
    pub fn new(dim: usize, capacity: usize) -> FeatureQueue {
        FeatureQueue {
            dim,
            capacity,
            buffer: vec![0.0; dim * capacity],
            len: 0,
            head: 0,
        }
    }

    /// Rebuild from checkpointed parts.
    pub fn from_raw(dim: usize, capacity: usize, buffer: Vec<f32>, len: usize, head: usize) -> Result<FeatureQueue> {
        if buffer.len() != dim * capacity || len > capacity || head >= capacity.max(1) {
            return Err(DclError::Checkpoint(format!(
                "queue state inconsistent: {} values for {capacity}x{dim}, len {len}, head {head}",
                buffer.len()
            )));
        }
        Ok(FeatureQueue {
            dim,
            capacity,
            buffer,
            len,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn raw_buffer(&self) -> &[f32] {
        &self.buffer
    }

    /// Append a normalised copy of `key`, evicting the oldest entry when full.
    pub fn push(&mut self, key: &[f32]) -> Result<()> {
        if key.len() != self.dim {
            return Err(DclError::shape(format!("queue of dim {} given key of len {}", self.dim, key.len())));
        }
        let unit = normalize(&key.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        let slot = &mut self.buffer[self.head * self.dim..(self.head + 1) * self.dim];
        for (dst, v) in slot.iter_mut().zip(unit) {
            *dst = v as f32;
        }
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        let start = (self.head + self.capacity - self.len) % self.capacity;
        (0..self.len).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.buffer[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Snapshot as an `len x dim` matrix, oldest first.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len, self.dim));
        for (mut row, entry) in m.rows_mut().into_iter().zip(self.iter()) {
            row.iter_mut().zip(entry).for_each(|(d, &s)| *d = s as f64);
        }
        m
    }
}

/// EMA class prototypes used to decide which keys are hard enough to enqueue.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub p_real: Vec<f32>,
    pub p_fake: Vec<f32>,
    pub real_initialized: bool,
    pub fake_initialized: bool,
    pub alpha: f64,
    pub gate_threshold: f64,
}

impl PrototypeBank {
    pub fn new(dim: usize, alpha: f64, gate_threshold: f64) -> PrototypeBank {
        PrototypeBank {
            p_real: vec![0.0; dim],
            p_fake: vec![0.0; dim],
            real_initialized: false,
            fake_initialized: false,
            alpha,
            gate_threshold,
        }
    }

    pub fn prototype(&self, label: Label) -> Option<&[f32]> {
        match label {
            Label::Real if self.real_initialized => Some(&self.p_real),
            Label::Fake if self.fake_initialized => Some(&self.p_fake),
            _ => None,
        }
    }

    /// Fold keys into their class prototype in batch order, re-normalising after
    /// every step. The first key of a class initialises its prototype.
    pub fn update(&mut self, keys: &[(&[f32], Label)]) -> Result<()> {
        for &(key, label) in keys {
            let unit = normalize(&key.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
            let alpha = self.alpha;
            let (proto, init) = match label {
                Label::Real => (&mut self.p_real, &mut self.real_initialized),
                Label::Fake => (&mut self.p_fake, &mut self.fake_initialized),
            };
            if proto.len() != unit.len() {
                return Err(DclError::shape("prototype and key dimensions differ"));
            }
            let next: Vec<f64> = if *init {
                proto
                    .iter()
                    .zip(&unit)
                    .map(|(&p, &k)| alpha * p as f64 + (1.0 - alpha) * k)
                    .collect()
            } else {
                unit.clone()
            };
            // An exactly cancelling update has no direction; fall back to the key.
            let next = normalize(&next).unwrap_or(unit);
            proto.iter_mut().zip(next).for_each(|(p, v)| *p = v as f32);
            *init = true;
        }
        Ok(())
    }
}

pub fn update_prototypes(bank: &mut PrototypeBank, keys: &[(&[f32], Label)]) -> Result<()> {
    bank.update(keys)
}

/// The two class queues plus the warm-up counter of the hard-sample gate.
#[derive(Clone, Debug, PartialEq)]
pub struct HardNegativeQueues {
    pub real: FeatureQueue,
    pub fake: FeatureQueue,
    pub total_enqueued: u64,
    pub warmup_fill: u64,
    pub gate_enabled: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateStats {
    pub enqueued_real: usize,
    pub enqueued_fake: usize,
    pub rejected: usize,
}

impl HardNegativeQueues {
    pub fn new(dim: usize, config: &ContrastConfig) -> HardNegativeQueues {
        HardNegativeQueues {
            real: FeatureQueue::new(dim, config.queue_capacity),
            fake: FeatureQueue::new(dim, config.queue_capacity),
            total_enqueued: 0,
            warmup_fill: config.warmup_fill,
            gate_enabled: config.gate_enabled,
        }
    }

    pub fn queue(&self, label: Label) -> &FeatureQueue {
        match label {
            Label::Real => &self.real,
            Label::Fake => &self.fake,
        }
    }

    /// A fake key is admitted when it resembles the real prototype by more
    /// than the threshold, a real key when it resembles the fake prototype.
    /// The gate is bypassed while warming up or before the opposite
    /// prototype exists.
    pub fn gate_and_enqueue(&mut self, bank: &PrototypeBank, keys: &[(&[f32], Label)]) -> Result<GateStats> {
        let mut stats = GateStats::default();
        for &(key, label) in keys {
            let opposite = match label {
                Label::Real => Label::Fake,
                Label::Fake => Label::Real,
            };
            let admit = match bank.prototype(opposite) {
                _ if !self.gate_enabled || self.total_enqueued < self.warmup_fill => true,
                None => true,
                Some(proto) => {
                    let k: Vec<f64> = key.iter().map(|&v| v as f64).collect();
                    let p: Vec<f64> = proto.iter().map(|&v| v as f64).collect();
                    cosine_sim(&k, &p)? > bank.gate_threshold
                }
            };
            if !admit {
                stats.rejected += 1;
                continue;
            }
            match label {
                Label::Real => {
                    self.real.push(key)?;
                    stats.enqueued_real += 1;
                }
                Label::Fake => {
                    self.fake.push(key)?;
                    stats.enqueued_fake += 1;
                }
            }
            self.total_enqueued += 1;
        }
        Ok(stats)
    }
}

pub fn gate_and_enqueue(
    queues: &mut HardNegativeQueues,
    bank: &PrototypeBank,
    keys: &[(&[f32], Label)],
) -> Result<GateStats> {
    queues.gate_and_enqueue(bank, keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn empty(d: usize) -> Array2<f64> {
        Array2::zeros((0, d))
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn inter_loss_examples() {
        let q = [1.0, 0.0, 0.0];
        let l = inter_loss(&q, &q, empty(3).view(), 0.07).unwrap();
        assert_eq!(l, 0.0);
        let one = array![[0.0, 1.0, 0.0]];
        let l = inter_loss(&q, &q, one.view(), 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
        let two = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let l = inter_loss(&q, &q, two.view(), 1.0).unwrap();
        assert!((l - 0.55144).abs() < 1e-5);
        assert!(inter_loss(&q, &q, two.view(), 0.0).is_err());
    }

    #[test]
    fn batch_routes_negatives_by_opposite_class() {
        let q = array![[1.0, 0.0], [1.0, 0.0]];
        let real_queue = array![[1.0, 0.0]];
        let fake_queue = empty(2);
        let (loss, _) = inter_loss_batch(
            q.view(),
            q.view(),
            &[Label::Real, Label::Fake],
            real_queue.view(),
            fake_queue.view(),
            1.0,
        )
        .unwrap();
        // real query sees no negatives (0), fake query sees one identical negative (ln 2).
        assert!((loss - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn prototype_examples() {
        let mut bank = PrototypeBank::new(2, 0.9, 0.5);
        let init = [1.0f32, 0.0];
        bank.update(&[(&init, Label::Real)]).unwrap();
        let key = [0.0f32, 1.0];
        bank.update(&[(&key, Label::Real)]).unwrap();
        assert!((bank.p_real[0] - 0.99388).abs() < 1e-5);
        assert!((bank.p_real[1] - 0.11043).abs() < 1e-5);
        assert!(!bank.fake_initialized);

        let mut frozen = PrototypeBank::new(2, 1.0, 0.5);
        frozen.update(&[(&init, Label::Fake)]).unwrap();
        frozen.update(&[(&key, Label::Fake), (&key, Label::Fake)]).unwrap();
        assert_eq!(frozen.p_fake, vec![1.0, 0.0]);
        assert_eq!(frozen.p_real, vec![0.0, 0.0]);
    }

    fn primed(threshold: f64) -> (HardNegativeQueues, PrototypeBank) {
        let cfg = ContrastConfig {
            warmup_fill: 0,
            queue_capacity: 4,
            gate_threshold: threshold,
            ..ContrastConfig::default()
        };
        let mut bank = PrototypeBank::new(2, 0.9, threshold);
        bank.update(&[(&[1.0, 0.0], Label::Real), (&[1.0, 0.0], Label::Fake)]).unwrap();
        (HardNegativeQueues::new(2, &cfg), bank)
    }

    #[test]
    fn gate_admits_hard_fake_above_threshold() {
        let (mut queues, bank) = primed(0.5);
        let key = [0.6f32, 0.8];
        let stats = queues.gate_and_enqueue(&bank, &[(&key, Label::Fake)]).unwrap();
        assert_eq!(stats.enqueued_fake, 1);
        assert_eq!(queues.fake.len(), 1);
    }

    #[test]
    fn gate_is_strict_at_threshold() {
        let (mut queues, bank) = primed(0.5);
        let key = [0.5f32, (0.75f32).sqrt()];
        let cos = cosine_sim(&[0.5, (0.75f32).sqrt() as f64], &[1.0, 0.0]).unwrap();
        let mut bank = bank;
        // pin the threshold to the exact similarity the gate will compute
        bank.gate_threshold = cos;
        let stats = queues.gate_and_enqueue(&bank, &[(&key, Label::Fake)]).unwrap();
        assert_eq!(stats.rejected, 1);
        assert!(queues.fake.is_empty());
    }

    #[test]
    fn queue_evicts_oldest_at_capacity() {
        let mut q = FeatureQueue::new(1, 3);
        for v in [1.0f32, -1.0, 1.0, -1.0] {
            q.push(&[v]).unwrap();
        }
        assert_eq!(q.len(), 3);
        let entries: Vec<f32> = q.iter().map(|e| e[0]).collect();
        assert_eq!(entries, vec![-1.0, 1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(u in prop::collection::vec(-5.0f64..5.0, 4), v in prop::collection::vec(-5.0f64..5.0, 4), a in 0.01f64..100.0, b in 0.01f64..100.0) {
            prop_assume!(l2_norm(&u) > 1e-3 && l2_norm(&v) > 1e-3);
            let base = cosine_sim(&u, &v).unwrap();
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine_sim(&su, &sv).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn inter_loss_is_non_negative(seed in any::<u64>(), m in 0usize..10) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let negs = Array2::from_shape_fn((m, 5), |_| rng.gen_range(-1.0..1.0));
            prop_assert!(inter_loss(&q, &k, negs.view(), 0.2).unwrap() >= 0.0);
        }

        #[test]
        fn prototypes_stay_unit_norm(keys in prop::collection::vec((prop::collection::vec(-3.0f32..3.0, 6), any::<bool>()), 1..40), alpha in 0.0f64..=1.0) {
            let mut bank = PrototypeBank::new(6, alpha, 0.5);
            for (k, fake) in &keys {
                if k.iter().map(|v| v * v).sum::<f32>() < 1e-6 { continue; }
                let label = if *fake { Label::Fake } else { Label::Real };
                bank.update(&[(k.as_slice(), label)]).unwrap();
                let p = bank.prototype(label).unwrap();
                let n = p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}
