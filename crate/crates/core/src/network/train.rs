use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax_rows, error_net_forward, init_error_net, transfer_encoder, GraphBatch, ModelConfig};
use crate::autodiff::{cosine_lr, save_checkpoint, AdamW, AdamWConfig, Checkpoint, ParamStore, RngState, Tape};
use crate::error::{Error, Result};
use crate::graphbuild::{GraphSample, NUM_CLASSES};
use crate::rng::rng_for;

/// Random access to stored graph samples.
pub trait SampleLoader: Sync {
    fn num_records(&self) -> usize;
    fn structure_of(&self, record: usize) -> u32;
    fn class_histogram(&self, record: usize) -> [u64; NUM_CLASSES];
    fn load(&self, record: usize) -> Result<GraphSample>;

    /// Records of one ground-truth structure, in storage order.
    fn records_of(&self, structure: u32) -> Vec<usize> {
        (0..self.num_records())
            .filter(|&r| self.structure_of(r) == structure)
            .collect()
    }
}

/// Samples kept in memory; the structure id comes from each provenance.
#[derive(Debug, Clone, Default)]
pub struct InMemorySamples(pub Vec<GraphSample>);

impl SampleLoader for InMemorySamples {
    fn num_records(&self) -> usize {
        self.0.len()
    }

    fn structure_of(&self, record: usize) -> u32 {
        self.0[record].provenance.structure_id
    }

    fn class_histogram(&self, record: usize) -> [u64; NUM_CLASSES] {
        self.0[record].class_histogram().map(|c| c as u64)
    }

    fn load(&self, record: usize) -> Result<GraphSample> {
        self.0.get(record).cloned().ok_or(Error::Index {
            context: "in-memory samples",
            index: record,
            len: self.0.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Inverse class frequency, clipped to [0.2, 5] and rescaled to mean 1.
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub perturbations_per_structure: usize,
    pub val_perturbations_per_structure: usize,
    pub pretext_batch_size: usize,
    pub pretext_samples_per_epoch: usize,
    pub pretext_max_epochs: usize,
    pub pretext_val_patches: usize,
    /// Wall-clock cap on pretext training in seconds.
    pub pretext_time_budget_s: Option<f64>,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            max_epochs: 50,
            perturbations_per_structure: 25,
            val_perturbations_per_structure: 10,
            pretext_batch_size: 64,
            pretext_samples_per_epoch: 512,
            pretext_max_epochs: 500,
            pretext_val_patches: 512,
            pretext_time_budget_s: None,
            seed: 0,
            class_weighting: ClassWeighting::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("perturbations_per_structure", self.perturbations_per_structure),
            ("pretext_batch_size", self.pretext_batch_size),
            ("pretext_samples_per_epoch", self.pretext_samples_per_epoch),
            ("pretext_max_epochs", self.pretext_max_epochs),
            ("pretext_val_patches", self.pretext_val_patches),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train: {name} must be > 0")));
        }
        if matches!(self.pretext_time_budget_s, Some(t) if !(t > 0.0)) {
            return Err(Error::Config("train: pretext_time_budget_s must be > 0".into()));
        }
        Ok(())
    }
}

/// Learning rate for update `step` of `total`: cosine from `lr0` at the
/// first update down to `eta_min` at the last.
pub fn schedule_lr(step: usize, total: usize, cfg: &AdamWConfig) -> Result<f64> {
    if total <= 1 {
        return Ok(cfg.lr0);
    }
    cosine_lr(step, total - 1, cfg.lr0, cfg.eta_min)
}

pub fn class_weights(hist: &[u64; NUM_CLASSES], mode: ClassWeighting) -> [f64; NUM_CLASSES] {
    if mode == ClassWeighting::Uniform {
        return [1.0; NUM_CLASSES];
    }
    let total: u64 = hist.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for (wc, &n) in w.iter_mut().zip(hist) {
        *wc = if n == 0 {
            5.0
        } else {
            (total as f64 / (NUM_CLASSES as f64 * n as f64)).clamp(0.2, 5.0)
        };
    }
    let mean = w.iter().sum::<f64>() / NUM_CLASSES as f64;
    w.map(|v| v / mean)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

pub enum Init<'a> {
    Random,
    PretrainedEncoder(&'a ParamStore<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: ParamStore<f32>,
    pub last: ParamStore<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub final_lr: f64,
    pub class_weights: [f64; NUM_CLASSES],
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc);
    }
    s
}

fn checkpoint(store: &ParamStore<f32>, meta: serde_json::Value) -> Checkpoint {
    Checkpoint {
        params: store.clone(),
        optimizer: None,
        rng: None,
        meta,
    }
}

/// Perturbation records drawn for one epoch, shuffled.
fn epoch_records(per_structure: &[Vec<usize>], take: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for recs in per_structure {
        if recs.is_empty() {
            continue;
        }
        if recs.len() >= take {
            out.extend(sample(rng, recs.len(), take).into_iter().map(|i| recs[i]));
        } else {
            out.extend_from_slice(recs);
            for _ in recs.len()..take {
                out.push(recs[rng.random_range(0..recs.len())]);
            }
        }
    }
    out.shuffle(rng);
    out
}

/// Optimizer steps reject non-finite gradients before touching `store`, so
/// it still holds the last finite parameters here.
fn save_diverged(
    out_dir: Option<&Path>,
    store: &ParamStore<f32>,
    opt: &AdamW<f32>,
    rng: &RngState,
    epoch: usize,
    step: usize,
) -> Result<()> {
    if let Some(dir) = out_dir {
        let mut ck = checkpoint(store, serde_json::json!({"epoch": epoch, "step": step}));
        ck.optimizer = Some(opt.state.clone());
        ck.rng = Some(rng.clone());
        save_checkpoint(&ck, dir.join("diverged.ckpt"))?;
    }
    Ok(())
}

fn load_batch(loader: &dyn SampleLoader, records: &[usize]) -> Result<Vec<GraphSample>> {
    records.iter().map(|&r| loader.load(r)).collect()
}

/// Weighted loss and accuracy in inference mode.
fn evaluate_loss(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    loader: &dyn SampleLoader,
    records: &[usize],
    weights: &[f32],
    batch_size: usize,
    blind: bool,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut nodes) = (0.0, 0usize, 0usize);
    for chunk in records.chunks(batch_size) {
        let samples = load_batch(loader, chunk)?;
        let refs: Vec<&GraphSample> = samples.iter().collect();
        let batch = GraphBatch::<f32>::new(&refs, model, blind)?;
        let mut tape = Tape::new();
        let logits = error_net_forward(&mut tape, store, model, &batch, false)?;
        let pred = argmax_rows(tape.value(logits));
        correct += pred
            .iter()
            .zip(&batch.labels)
            .filter(|(&p, &t)| p as usize == t)
            .count();
        let l = tape.softmax_cross_entropy(logits, &batch.labels, weights)?;
        loss += tape.value(l).item() as f64 * batch.num_nodes() as f64;
        nodes += batch.num_nodes();
    }
    if nodes == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((loss / nodes as f64, correct as f64 / nodes as f64))
}

/// Trains the node classifier on the structures of `split`.
///
/// Each epoch draws `perturbations_per_structure` records per training
/// structure, shuffles them and steps AdamW once per batch of graphs.
/// With `out_dir` set, `history.csv`, `best.ckpt` and `last.ckpt` are
/// written there; a non-finite loss writes `diverged.ckpt` holding the last
/// finite parameters and returns [`Error::Diverged`].
#[allow(clippy::too_many_arguments)]
pub fn train_error_net(
    loader: &dyn SampleLoader,
    split: &TrainSplit,
    model: &ModelConfig,
    cfg: &TrainConfig,
    init: Init<'_>,
    blind: bool,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Dataset("no training structures".into()));
    }
    let per_structure: Vec<Vec<usize>> = split.train.iter().map(|&s| loader.records_of(s)).collect();
    if per_structure.iter().all(|r| r.is_empty()) {
        return Err(Error::Dataset("training structures have no records".into()));
    }
    let val_records: Vec<usize> = split
        .val
        .iter()
        .flat_map(|&s| {
            let mut r = loader.records_of(s);
            r.truncate(cfg.val_perturbations_per_structure);
            r
        })
        .collect();

    let mut hist = [0u64; NUM_CLASSES];
    for &r in per_structure.iter().flatten() {
        for (h, c) in hist.iter_mut().zip(loader.class_histogram(r)) {
            *h += c;
        }
    }
    let weights64 = class_weights(&hist, cfg.class_weighting);
    let weights: Vec<f32> = weights64.iter().map(|&w| w as f32).collect();
    log::info!("stage=train class_histogram={hist:?} class_weights={weights64:?}");

    let mut store = init_error_net::<f32>(model, cfg.seed)?;
    if let Init::PretrainedEncoder(enc) = init {
        let n = transfer_encoder(enc, &mut store)?;
        log::info!("stage=train transferred_encoder_tensors={n}");
    }
    let mut opt = AdamW::new(cfg.optimizer, &store);

    let live = per_structure.iter().filter(|r| !r.is_empty()).count();
    let per_epoch = live * cfg.perturbations_per_structure;
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.max_epochs;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, store.clone(), 0usize);
    let mut step = 0;
    let mut lr = cfg.optimizer.lr0;
    for epoch in 0..cfg.max_epochs {
        let mut rng = rng_for(cfg.seed, &[0x7472, epoch as u64]);
        let rng_state = RngState::capture(&rng);
        let records = epoch_records(&per_structure, cfg.perturbations_per_structure, &mut rng);
        let mut loss_sum = 0.0;
        let mut loss_nodes = 0usize;
        for chunk in records.chunks(cfg.batch_size) {
            let samples = load_batch(loader, chunk)?;
            let refs: Vec<&GraphSample> = samples.iter().collect();
            let batch = GraphBatch::<f32>::new(&refs, model, blind)?;
            let mut tape = Tape::new();
            let logits = error_net_forward(&mut tape, &store, model, &batch, true)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels, &weights)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                save_diverged(out_dir, &store, &opt, &rng_state, epoch, step)?;
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            store.zero_grad();
            tape.backward(loss)?.accumulate(&mut store);
            lr = schedule_lr(step, total, &cfg.optimizer)?;
            if let Err(e) = opt.step(&mut store, lr) {
                if matches!(e, Error::Diverged(_)) {
                    save_diverged(out_dir, &store, &opt, &rng_state, epoch, step)?;
                }
                return Err(e);
            }
            store.apply_bn_updates(&tape.bn_updates, model.bn_momentum);
            loss_sum += lv * batch.num_nodes() as f64;
            loss_nodes += batch.num_nodes();
            step += 1;
        }
        let train_loss = loss_sum / loss_nodes.max(1) as f64;
        let (val_loss, val_acc) = if val_records.is_empty() {
            (train_loss, f64::NAN)
        } else {
            evaluate_loss(&store, model, loader, &val_records, &weights, cfg.batch_size, blind)?
        };
        log::info!(
            "stage=train epoch={epoch} lr={lr:.3e} train_loss={train_loss:.4} val_loss={val_loss:.4} val_acc={val_acc:.4}"
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc,
        });
        if val_loss < best.0 {
            best = (val_loss, store.clone(), epoch);
            if let Some(dir) = out_dir {
                let meta = serde_json::json!({"epoch": epoch, "val_loss": val_loss, "model": model});
                save_checkpoint(&checkpoint(&store, meta), dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = out_dir {
            let p = dir.join("history.csv");
            fs::write(&p, history_csv(&history)).map_err(|e| Error::io(&p, e))?;
            let mut ck = checkpoint(&store, serde_json::json!({"epoch": epoch, "model": model}));
            ck.optimizer = Some(opt.state.clone());
            ck.rng = Some(rng_state);
            save_checkpoint(&ck, dir.join("last.ckpt"))?;
        }
    }
    if best.0.is_infinite() {
        best = (f64::NAN, store.clone(), cfg.max_epochs.saturating_sub(1));
    }
    Ok(TrainOutcome {
        best: best.1,
        last: store,
        best_epoch: best.2,
        history,
        steps: step,
        final_lr: lr,
        class_weights: weights64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_clip_and_normalize() {
        let w = class_weights(&[10, 100, 1000, 100, 0], ClassWeighting::InverseFrequency);
        let raw = [5.0, 2.42, 0.242, 2.42, 5.0];
        let mean = raw.iter().sum::<f64>() / 5.0;
        for (a, b) in w.iter().zip(raw) {
            assert!((a - b / mean).abs() < 1e-12);
        }
        assert_eq!(class_weights(&[1, 2, 3, 4, 5], ClassWeighting::Uniform), [1.0; 5]);
    }

    #[test]
    fn schedule_ends_at_eta_min() {
        let c = AdamWConfig::default();
        assert_eq!(schedule_lr(0, 10, &c).unwrap(), c.lr0);
        assert!((schedule_lr(9, 10, &c).unwrap() - c.eta_min).abs() < 1e-15);
        assert_eq!(schedule_lr(0, 1, &c).unwrap(), c.lr0);
    }

    #[test]
    fn epoch_draws_fixed_count_per_structure() {
        let per = vec![(0..40).collect::<Vec<_>>(), vec![100, 101]];
        let mut rng = rng_for(1, &[]);
        let recs = epoch_records(&per, 25, &mut rng);
        assert_eq!(recs.len(), 50);
        assert_eq!(recs.iter().filter(|&&r| r >= 100).count(), 25);
        let first: std::collections::HashSet<_> = recs.iter().filter(|&&r| r < 100).collect();
        assert_eq!(first.len(), 25);
    }
}
