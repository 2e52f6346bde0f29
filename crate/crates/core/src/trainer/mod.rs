//! Training loop: cross-entropy plus inter- and intra-instance contrastive
//! terms, weighted by an epoch-level schedule.
//!
//! One step runs, in order: view generation, train-mode query/key forward
//! passes (batch norm uses the statistics of each side's own batch), the
//! three losses (negatives come from the queue snapshot taken before the
//! step), backprop and an optimizer step on the query side and classifier,
//! running-statistics updates, the key-side EMA, prototype updates from every
//! key in the batch, and finally gated enqueueing. Enqueueing last means a key
//! never serves as its own negative.

pub mod adam;
pub mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::encoder::{bce_batch, feature_rows, EncoderConfig, EncoderPair, Upstream};
use crate::imageops::Image;
use crate::error::{DclError, Result};
use crate::inter_icl::{inter_loss_batch, ContrastConfig, GateStats, HardNegativeQueues, PrototypeBank};
use crate::intra_icl::{difference_map, intra_loss_batch_grad, mask_from_difference, perturb_dead_rows, IntraConfig, IntraItem, RegionMask};
use crate::views::{make_views, ViewGeometry, ViewPolicy};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Contrastive weight during the first `warm_epochs` epochs.
    pub phi_warm: f64,
    pub phi_main: f64,
    pub warm_epochs: usize,
    pub seed: u64,
    /// Extra checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            phi_warm: 0.1,
            phi_main: 0.5,
            warm_epochs: 5,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DclError::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(DclError::config("train.learning_rate", "must be a positive number"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DclError::config("train.weight_decay", "must be >= 0"));
        }
        for (key, phi) in [("train.phi_warm", self.phi_warm), ("train.phi_main", self.phi_main)] {
            if !(0.0..=1.0).contains(&phi) {
                return Err(DclError::config(key, format!("{phi} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "train")]
    pub run: RunConfig,
    pub encoder: EncoderConfig,
    pub views: ViewPolicy,
    pub contrast: ContrastConfig,
    pub intra: IntraConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.encoder.validate()?;
        self.views.validate()?;
        self.contrast.validate()?;
        self.intra.validate()
    }

    /// The cross-entropy-only comparison arm: contrastive weight zero
    /// throughout and the hard-sample gate disabled.
    pub fn ce_baseline(&self) -> TrainConfig {
        let mut cfg = self.clone();
        cfg.run.phi_warm = 0.0;
        cfg.run.phi_main = 0.0;
        cfg.contrast.gate_enabled = false;
        cfg
    }
}

/// Contrastive weight for a 1-based epoch.
pub fn phi_schedule(epoch: usize, config: &RunConfig) -> f64 {
    if epoch <= config.warm_epochs {
        config.phi_warm
    } else {
        config.phi_main
    }
}

pub fn total_loss(l_ce: f64, l_inter: f64, l_intra: f64, phi: f64) -> f64 {
    phi * (l_inter + l_intra) + (1.0 - phi) * l_ce
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
    pub phi: f64,
    pub gate: GateStats,
}

/// One line of the loss log: epoch means plus queue occupancy at epoch end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub phi: f64,
    pub ce: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
    pub queue_real: usize,
    pub queue_fake: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: EncoderPair,
    pub optimizer: Adam,
    pub prototypes: PrototypeBank,
    pub queues: HardNegativeQueues,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
        let model = EncoderPair::new(config.encoder.clone(), &mut rng)?;
        let sizes: Vec<usize> = model.trainable_params().iter().map(|p| p.data.len()).collect();
        let optimizer = Adam::new(
            AdamConfig {
                learning_rate: config.run.learning_rate,
                weight_decay: config.run.weight_decay,
                ..AdamConfig::default()
            },
            &sizes,
        );
        let dim = config.encoder.locations();
        let prototypes = PrototypeBank::new(dim, config.contrast.alpha, config.contrast.gate_threshold);
        let queues = HardNegativeQueues::new(dim, &config.contrast);
        Ok(TrainState {
            config,
            model,
            optimizer,
            prototypes,
            queues,
            rng,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }
}

/// Region mask for a view built from dataset sample `base`, registered with
/// the view's tile shuffle and flip. `None` for real frames.
pub fn view_mask(
    dataset: &Dataset,
    base: usize,
    geometry: &ViewGeometry,
    feature_size: usize,
    bin_threshold: f32,
) -> Result<Option<RegionMask>> {
    let sample = dataset.get(base);
    if !sample.label.is_fake() {
        return Ok(None);
    }
    let real = dataset
        .corresponding_real(sample)
        .ok_or_else(|| DclError::Dataset(format!("{} has no corresponding real frame", sample.video_id)))?;
    let diff = geometry.apply_to_map(&difference_map(&sample.image, &real.image)?)?;
    mask_from_difference(&diff, feature_size, feature_size, bin_threshold).map(Some)
}

struct Prepared {
    view1: Image,
    view2: Image,
    label: Label,
    mask: Option<RegionMask>,
}

fn check_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<()> {
    if dataset.count(Label::Real) == 0 || dataset.count(Label::Fake) == 0 {
        return Err(DclError::Dataset("training needs both real and fake samples".into()));
    }
    let n = config.encoder.input_size;
    let dim = dataset.get(0).image.dim();
    if dim != (n, n, 3) {
        return Err(DclError::shape(format!(
            "dataset frames are {dim:?} but encoder.input_size is {n}"
        )));
    }
    Ok(())
}

/// One optimisation step on the samples at `batch`.
pub fn train_step(state: &mut TrainState, dataset: &Dataset, batch: &[usize]) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(DclError::invalid("empty batch"));
    }
    let config = &state.config;
    let feat = config.encoder.feature_size();
    let dim = config.encoder.locations();
    let seeds: Vec<u64> = batch.iter().map(|_| state.rng.gen()).collect();

    let model = &state.model;
    let prepared: Vec<Prepared> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&idx, &seed)| -> Result<Prepared> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = make_views(dataset, idx, &config.views, &mut rng)?;
            let mask = view_mask(dataset, pair.base1, &pair.geometry1, feat, config.intra.bin_threshold)?;
            Ok(Prepared {
                view1: pair.view1,
                view2: pair.view2,
                label: pair.label,
                mask,
            })
        })
        .collect::<Result<_>>()?;
    let view1: Vec<&Image> = prepared.iter().map(|p| &p.view1).collect();
    let view2: Vec<&Image> = prepared.iter().map(|p| &p.view2).collect();
    let forward = model.forward_query_batch(&view1)?;
    let (key_embeddings, key_stats) = model.forward_key_batch(&view2)?;
    let keys: Vec<Vec<f32>> = key_embeddings.into_iter().map(|k| k.values).collect();
    let outs = &forward.outputs;

    let b = outs.len();
    let labels: Vec<Label> = prepared.iter().map(|p| p.label).collect();
    let logits: Vec<f64> = outs.iter().map(|o| o.logit as f64).collect();
    let (ce, d_logits) = bce_batch(&logits, &labels);

    let queries = Array2::from_shape_fn((b, dim), |(i, j)| outs[i].query.values[j] as f64);
    let keys_m = Array2::from_shape_fn((b, dim), |(i, j)| keys[i][j] as f64);
    let real_queue = state.queues.real.to_matrix();
    let fake_queue = state.queues.fake.to_matrix();
    let (inter, d_queries) = inter_loss_batch(
        queries.view(),
        keys_m.view(),
        &labels,
        real_queue.view(),
        fake_queue.view(),
        config.contrast.tau,
    )?;

    let rows: Vec<Array2<f64>> = outs
        .iter()
        .map(|o| {
            let mut r = feature_rows(&o.feature_map).mapv(f64::from);
            perturb_dead_rows(&mut r);
            r
        })
        .collect();
    let items: Vec<IntraItem<'_>> = prepared
        .iter()
        .zip(&rows)
        .map(|(p, r)| IntraItem {
            rows: r.view(),
            label: p.label,
            mask: p.mask.as_ref(),
        })
        .collect();
    let (intra, d_rows) = intra_loss_batch_grad(&items, config.intra.tau, config.intra.include_self_pairs)?;

    let phi = phi_schedule(state.epoch + 1, &config.run);
    let total = total_loss(ce, inter, intra, phi);

    let d_features: Vec<Option<Array2<f32>>> = d_rows
        .iter()
        .map(|g| g.as_ref().filter(|_| phi > 0.0).map(|g| g.mapv(|v| (v * phi) as f32)))
        .collect();
    let d_query: Vec<Vec<f32>> = (0..b)
        .map(|i| d_queries.row(i).iter().map(|&v| (v * phi) as f32).collect())
        .collect();
    let upstream: Vec<Upstream<'_>> = (0..b)
        .map(|i| Upstream {
            d_features: d_features[i].as_ref(),
            d_query: (phi > 0.0).then_some(d_query[i].as_slice()),
            d_logit: (d_logits[i] * (1.0 - phi)) as f32,
        })
        .collect();
    let grad = model.backward(&forward, &upstream)?;

    let grad_views = grad.params();
    let grad_slices: Vec<&[f32]> = grad_views.iter().map(|p| p.data).collect();
    state.optimizer.step(state.model.trainable_slices_mut(), &grad_slices)?;
    state.model.query.update_running_stats(&forward.stats)?;
    state.model.key.update_running_stats(&key_stats)?;
    state.model.ema_update(state.config.encoder.beta)?;

    let key_refs: Vec<(&[f32], Label)> = keys.iter().zip(&labels).map(|(k, &l)| (k.as_slice(), l)).collect();
    state.prototypes.update(&key_refs)?;
    let gate = state.queues.gate_and_enqueue(&state.prototypes, &key_refs)?;
    state.step += 1;

    Ok(StepLosses {
        ce,
        inter,
        intra,
        total,
        phi,
        gate,
    })
}

/// One pass over a freshly shuffled dataset.
pub fn run_epoch(state: &mut TrainState, dataset: &Dataset) -> Result<EpochLog> {
    check_dataset(dataset, &state.config)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut state.rng);
    let mut sums = [0.0f64; 4];
    let mut steps = 0usize;
    let phi = phi_schedule(state.epoch + 1, &state.config.run);
    for batch in order.chunks(state.config.run.batch_size) {
        let l = train_step(state, dataset, batch)?;
        for (s, v) in sums.iter_mut().zip([l.ce, l.inter, l.intra, l.total]) {
            *s += v;
        }
        steps += 1;
    }
    state.epoch += 1;
    let n = steps as f64;
    let row = EpochLog {
        epoch: state.epoch,
        step: state.step,
        phi,
        ce: sums[0] / n,
        inter: sums[1] / n,
        intra: sums[2] / n,
        total: sums[3] / n,
        queue_real: state.queues.real.len(),
        queue_fake: state.queues.fake.len(),
    };
    log::info!(
        "epoch {} phi {:.2} ce {:.4} inter {:.4} intra {:.4} total {:.4} queues {}/{}",
        row.epoch,
        row.phi,
        row.ce,
        row.inter,
        row.intra,
        row.total,
        row.queue_real,
        row.queue_fake
    );
    state.history.push(row.clone());
    Ok(row)
}

/// Where a run writes its artifacts. Unset paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines loss log, one row per epoch.
    pub loss_log: Option<PathBuf>,
}

/// Path of the periodic checkpoint written after `epoch`.
pub fn epoch_checkpoint_path(path: &Path, epoch: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.epoch{epoch:04}.{}", ext.to_string_lossy()),
        None => format!("{stem}.epoch{epoch:04}"),
    };
    path.with_file_name(name)
}

pub fn train(config: TrainConfig, dataset: &Dataset, outputs: &TrainOutputs) -> Result<TrainState> {
    resume(TrainState::new(config)?, dataset, outputs)
}

/// Continue `state` until `config.run.epochs` epochs are complete. A fresh
/// loss log is created for a state at epoch 0 and appended to otherwise.
pub fn resume(mut state: TrainState, dataset: &Dataset, outputs: &TrainOutputs) -> Result<TrainState> {
    check_dataset(dataset, &state.config)?;
    let mut log = match &outputs.loss_log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| DclError::io(dir, e))?;
            }
            let file = if state.epoch == 0 {
                File::create(path)
            } else {
                OpenOptions::new().create(true).append(true).open(path)
            };
            Some((BufWriter::new(file.map_err(|e| DclError::io(path, e))?), path.clone()))
        }
        None => None,
    };
    let every = state.config.run.checkpoint_every;
    while state.epoch < state.config.run.epochs {
        let row = run_epoch(&mut state, dataset)?;
        if let Some((writer, path)) = log.as_mut() {
            serde_json::to_writer(&mut *writer, &row)?;
            writer
                .write_all(b"\n")
                .and_then(|_| writer.flush())
                .map_err(|e| DclError::io(path.as_path(), e))?;
        }
        if let Some(path) = &outputs.checkpoint {
            if every > 0 && state.epoch % every == 0 && state.epoch < state.config.run.epochs {
                save_checkpoint(&state, &epoch_checkpoint_path(path, state.epoch))?;
            }
        }
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(&state, path)?;
    }
    Ok(state)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| DclError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DclError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, CorpusSpec, ManipKind};

    fn tiny_dataset() -> Dataset {
        let spec = CorpusSpec {
            n_videos: 4,
            frames_per_video: 2,
            image_size: 48,
            manipulation_families: vec![ManipKind::SpliceRect],
            blend_softness: 1.0,
            seed: 5,
        };
        Dataset::from_videos(&synthesize(&spec).unwrap()).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            run: RunConfig {
                epochs: 2,
                batch_size: 6,
                warm_epochs: 1,
                ..RunConfig::default()
            },
            encoder: EncoderConfig {
                channels: 16,
                blocks: 3,
                input_size: 48,
                beta: 0.99,
            },
            contrast: ContrastConfig {
                queue_capacity: 16,
                warmup_fill: 4,
                ..ContrastConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn phi_schedule_examples() {
        let cfg = RunConfig::default();
        assert_eq!(phi_schedule(1, &cfg), 0.1);
        assert_eq!(phi_schedule(5, &cfg), 0.1);
        assert_eq!(phi_schedule(6, &cfg), 0.5);
        let no_warm = RunConfig { warm_epochs: 0, ..RunConfig::default() };
        assert_eq!(phi_schedule(1, &no_warm), 0.5);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(3.0, 1.0, 2.0, 0.0), 3.0);
        assert_eq!(total_loss(3.0, 1.0, 2.0, 1.0), 3.0);
        assert_eq!(total_loss(2.0, 1.0, 1.0, 0.5), 2.0);
    }

    #[test]
    fn step_keeps_loss_identity_and_ema() {
        let ds = tiny_dataset();
        let mut state = TrainState::new(tiny_config()).unwrap();
        let key_before = state.model.key.clone();
        let l = train_step(&mut state, &ds, &[0, 1, 8, 9]).unwrap();
        assert!((l.total - total_loss(l.ce, l.inter, l.intra, l.phi)).abs() < 1e-6);
        let beta = state.config.encoder.beta as f32;
        for ((k_new, k_old), q) in state
            .model
            .key
            .params()
            .iter()
            .zip(key_before.params())
            .zip(state.model.query.params())
        {
            for ((&a, &b), &c) in k_new.data.iter().zip(k_old.data).zip(q.data) {
                assert_eq!(a, beta * b + (1.0 - beta) * c);
            }
        }
        assert_eq!(state.step, 1);
        assert_eq!(state.queues.real.len() + state.queues.fake.len(), 4);
    }

    #[test]
    fn zero_phi_step_is_a_plain_bce_step() {
        let ds = tiny_dataset();
        let cfg = tiny_config().ce_baseline();
        let mut state = TrainState::new(cfg).unwrap();
        let mut manual = state.clone();
        let batch = [0usize, 1, 8, 9];
        train_step(&mut state, &ds, &batch).unwrap();

        let seeds: Vec<u64> = batch.iter().map(|_| manual.rng.gen()).collect();
        let views: Vec<Image> = batch
            .iter()
            .zip(&seeds)
            .map(|(&idx, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                make_views(&ds, idx, &manual.config.views, &mut rng).unwrap().view1
            })
            .collect();
        let refs: Vec<&Image> = views.iter().collect();
        let fwd = manual.model.forward_query_batch(&refs).unwrap();
        let logits: Vec<f64> = fwd.outputs.iter().map(|o| o.logit as f64).collect();
        let labels: Vec<Label> = batch.iter().map(|&i| ds.get(i).label).collect();
        let (_, d) = bce_batch(&logits, &labels);
        let upstream: Vec<Upstream<'_>> = d
            .iter()
            .map(|&g| Upstream {
                d_logit: g as f32,
                ..Upstream::default()
            })
            .collect();
        let grad = manual.model.backward(&fwd, &upstream).unwrap();
        let gv = grad.params();
        let gs: Vec<&[f32]> = gv.iter().map(|p| p.data).collect();
        manual.optimizer.step(manual.model.trainable_slices_mut(), &gs).unwrap();
        manual.model.query.update_running_stats(&fwd.stats).unwrap();
        assert_eq!(state.model.query, manual.model.query);
        assert_eq!(state.model.classifier, manual.model.classifier);
    }

    #[test]
    fn optimizer_never_touches_queues() {
        let ds = tiny_dataset();
        let mut state = TrainState::new(tiny_config()).unwrap();
        train_step(&mut state, &ds, &[0, 8]).unwrap();
        let snapshot = state.queues.clone();
        let fwd = state.model.forward_query_batch(&[&ds.get(0).image]).unwrap();
        let grads_zero = state.model.backward(&fwd, &[Upstream::default()]).unwrap();
        assert!(grads_zero.params().iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
        assert_eq!(snapshot, state.queues);
    }

    #[test]
    fn training_is_deterministic_and_single_class_is_rejected() {
        let ds = tiny_dataset();
        let a = train(tiny_config(), &ds, &TrainOutputs::default()).unwrap();
        let b = train(tiny_config(), &ds, &TrainOutputs::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 2);

        let reals: Vec<_> = ds.samples().iter().filter(|s| s.label == Label::Real).cloned().collect();
        let only_real = Dataset::new(reals).unwrap();
        assert!(train(tiny_config(), &only_real, &TrainOutputs::default()).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.run.epochs = 0;
        let state = train(cfg.clone(), &ds, &TrainOutputs::default()).unwrap();
        assert_eq!(state, TrainState::new(cfg).unwrap());
    }

    #[test]
    fn epoch_checkpoint_names() {
        assert_eq!(epoch_checkpoint_path(Path::new("/x/run.dclk"), 5), PathBuf::from("/x/run.epoch0005.dclk"));
        assert_eq!(epoch_checkpoint_path(Path::new("/x/run"), 12), PathBuf::from("/x/run.epoch0012"));
    }
}
