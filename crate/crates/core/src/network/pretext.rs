use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;

use super::model::{init_pretext, pretext_forward, ModelConfig};
use super::train::{schedule_lr, EpochRecord, TrainConfig};
use crate::autodiff::{AdamW, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graphbuild::{extract_patch, PATCH_SIZE, PATCH_VOXELS};
use crate::grid::{BinaryMask, Volume};
use crate::rng::rng_for;

/// Minimum city-block distance from the boundary for "off" centres.
pub const OFF_MIN_DISTANCE: u32 = 3;

/// Candidate patch centres of one labelled volume.
#[derive(Debug, Clone)]
pub struct PretextSampler {
    pub boundary: Vec<usize>,
    pub off: Vec<usize>,
}

impl PretextSampler {
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        let g = mask.grid;
        let d = g.dims;
        let mut dist = vec![u32::MAX; g.len()];
        let mut queue = VecDeque::new();
        let mut boundary = Vec::new();
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    if mask.is_boundary(i, j, k) {
                        let idx = g.index(i, j, k);
                        boundary.push(idx);
                        dist[idx] = 0;
                        queue.push_back(idx);
                    }
                }
            }
        }
        if boundary.is_empty() {
            return Err(Error::DegenerateMask("mask has no boundary voxels"));
        }
        while let Some(idx) = queue.pop_front() {
            let c = g.coords(idx);
            for a in 0..3 {
                for s in [-1i64, 1] {
                    let n = c[a] as i64 + s;
                    if n < 0 || n >= d[a] as i64 {
                        continue;
                    }
                    let mut q = c;
                    q[a] = n as usize;
                    let qi = g.index(q[0], q[1], q[2]);
                    if dist[qi] == u32::MAX {
                        dist[qi] = dist[idx] + 1;
                        queue.push_back(qi);
                    }
                }
            }
        }
        let off: Vec<usize> = (0..g.len()).filter(|&i| dist[i] >= OFF_MIN_DISTANCE).collect();
        if off.is_empty() {
            return Err(Error::DegenerateMask("no voxels far enough from the boundary"));
        }
        Ok(Self { boundary, off })
    }

    /// `n / 2` "on" centres followed by `n - n / 2` "off" centres.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> (Vec<usize>, bool) {
        let n_on = n / 2;
        let n_off = n - n_on;
        let (mut centres, r1) = pick(&self.boundary, n_on, rng);
        let (off, r2) = pick(&self.off, n_off, rng);
        centres.extend(off);
        let replacement = r1 || r2;
        (centres, replacement)
    }
}

fn pick(pool: &[usize], count: usize, rng: &mut impl Rng) -> (Vec<usize>, bool) {
    if pool.len() >= count {
        (sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect(), false)
    } else {
        ((0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect(), true)
    }
}

/// Labelled patches; label 1 marks a boundary centre.
#[derive(Debug, Clone, Default)]
pub struct PretextSet {
    /// `n * 125` normalized intensities.
    pub patches: Vec<f32>,
    pub labels: Vec<f32>,
    /// Linear voxel index of each centre.
    pub centers: Vec<usize>,
    /// Set when a pool was smaller than requested.
    pub with_replacement: bool,
}

impl PretextSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn extend(&mut self, other: PretextSet) {
        self.patches.extend(other.patches);
        self.labels.extend(other.labels);
        self.centers.extend(other.centers);
        self.with_replacement |= other.with_replacement;
    }

    fn tensor(&self, rows: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(rows.len() * PATCH_VOXELS);
        for &r in rows {
            data.extend_from_slice(&self.patches[r * PATCH_VOXELS..(r + 1) * PATCH_VOXELS]);
        }
        Tensor {
            shape: vec![rows.len(), PATCH_SIZE, PATCH_SIZE, PATCH_SIZE, 1],
            data,
        }
    }
}

fn patches_at(ct: &Volume, sampler: &PretextSampler, n: usize, rng: &mut impl Rng) -> PretextSet {
    let (centers, with_replacement) = sampler.draw(n, rng);
    let n_on = n / 2;
    let mut patches = Vec::with_capacity(n * PATCH_VOXELS);
    for &c in &centers {
        let p = ct.grid.index_to_world(ct.grid.coords(c));
        patches.extend_from_slice(&extract_patch(ct, p));
    }
    let labels = (0..n).map(|i| if i < n_on { 1.0 } else { 0.0 }).collect();
    PretextSet {
        patches,
        labels,
        centers,
        with_replacement,
    }
}

pub fn sample_pretext_patches(ct: &Volume, mask: &BinaryMask, n: usize, seed: u64) -> Result<PretextSet> {
    ct.grid.ensure_matches(&mask.grid)?;
    let sampler = PretextSampler::new(mask)?;
    let mut rng = rng_for(seed, &[0x7074]);
    Ok(patches_at(ct, &sampler, n, &mut rng))
}

/// Balanced patches drawn evenly across a corpus.
fn corpus_patches(
    corpus: &[(&Volume, PretextSampler)],
    n: usize,
    rng: &mut impl Rng,
) -> PretextSet {
    let per = n.div_ceil(corpus.len()).div_ceil(2) * 2;
    let mut set = PretextSet::default();
    for (ct, sampler) in corpus {
        set.extend(patches_at(ct, sampler, per, rng));
    }
    set
}

fn samplers<'a>(set: &[(&'a Volume, &BinaryMask)]) -> Result<Vec<(&'a Volume, PretextSampler)>> {
    set.iter()
        .map(|(ct, m)| {
            ct.grid.ensure_matches(&m.grid)?;
            Ok((*ct, PretextSampler::new(m)?))
        })
        .collect()
}

/// Fraction of patches whose logit sign matches the label.
pub fn pretext_accuracy(store: &ParamStore<f32>, cfg: &ModelConfig, set: &PretextSet) -> Result<f64> {
    Ok(pretext_eval(store, cfg, set, 256)?.1)
}

fn pretext_eval(store: &ParamStore<f32>, cfg: &ModelConfig, set: &PretextSet, batch: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(batch) {
        let mut tape = Tape::new();
        let x = tape.constant(set.tensor(chunk));
        let logits = pretext_forward(&mut tape, store, cfg, x, false)?;
        let targets: Vec<f32> = chunk.iter().map(|&r| set.labels[r]).collect();
        for (z, t) in tape.value(logits).data.iter().zip(&targets) {
            correct += usize::from((*z > 0.0) == (*t > 0.5));
        }
        let l = tape.bce_with_logits(logits, &targets)?;
        loss += tape.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Pretext parameters from the epoch with the best held-out accuracy.
    pub params: ParamStore<f32>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub elapsed_s: f64,
    /// Set when a corpus volume had to be sampled with replacement.
    pub with_replacement: bool,
}

impl PretrainOutcome {
    /// Encoder tensors only, for transfer into the node classifier.
    pub fn encoder(&self) -> ParamStore<f32> {
        self.params.subset("enc.")
    }
}

/// Trains the encoder on boundary-patch classification.
///
/// `val` volumes supply a fixed held-out set; when empty, a fixed set is
/// drawn from `train` with a separate stream.
pub fn pretrain_encoder(
    train: &[(&Volume, &BinaryMask)],
    val: &[(&Volume, &BinaryMask)],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty pretext corpus".into()));
    }
    let train_s = samplers(train)?;
    let val_s = if val.is_empty() { samplers(train)? } else { samplers(val)? };
    let mut vrng = rng_for(cfg.seed, &[0x7076]);
    let val_set = corpus_patches(&val_s, cfg.pretext_val_patches, &mut vrng);

    let mut store = init_pretext::<f32>(model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let steps_per_epoch = cfg.pretext_samples_per_epoch.div_ceil(cfg.pretext_batch_size);
    let total = steps_per_epoch * cfg.pretext_max_epochs;
    let start = Instant::now();
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, store.clone(), 0usize);
    let mut with_replacement = val_set.with_replacement;
    let mut step = 0;
    for epoch in 0..cfg.pretext_max_epochs {
        let mut rng = rng_for(cfg.seed, &[0x7065, epoch as u64]);
        let set = corpus_patches(&train_s, cfg.pretext_samples_per_epoch, &mut rng);
        with_replacement |= set.with_replacement;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.pretext_samples_per_epoch);
        let (mut loss_sum, mut lr) = (0.0, cfg.optimizer.lr0);
        for chunk in order.chunks(cfg.pretext_batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(set.tensor(chunk));
            let logits = pretext_forward(&mut tape, &store, model, x, true)?;
            let targets: Vec<f32> = chunk.iter().map(|&r| set.labels[r]).collect();
            let loss = tape.bce_with_logits(logits, &targets)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("pretext loss non-finite at epoch {epoch}")));
            }
            store.zero_grad();
            tape.backward(loss)?.accumulate(&mut store);
            lr = schedule_lr(step, total, &cfg.optimizer)?;
            opt.step(&mut store, lr)?;
            store.apply_bn_updates(&tape.bn_updates, model.bn_momentum);
            loss_sum += lv * chunk.len() as f64;
            step += 1;
        }
        let (val_loss, val_acc) = pretext_eval(&store, model, &val_set, 256)?;
        let train_loss = loss_sum / order.len() as f64;
        log::info!(
            "stage=pretrain epoch={epoch} lr={lr:.3e} train_loss={train_loss:.4} val_loss={val_loss:.4} val_acc={val_acc:.4}"
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc,
        });
        if val_acc > best.0 {
            best = (val_acc, store.clone(), epoch);
        }
        if let Some(budget) = cfg.pretext_time_budget_s {
            if start.elapsed().as_secs_f64() > budget {
                log::info!("stage=pretrain stop=time_budget epoch={epoch}");
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        params: best.1,
        best_epoch: best.2,
        val_accuracy: best.0,
        history,
        elapsed_s: start.elapsed().as_secs_f64(),
        with_replacement,
    })
}
