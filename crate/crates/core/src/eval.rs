//! Node-classification metrics, cross-validation folds and ablation runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graphbuild::{GraphSample, NUM_CLASSES};
use crate::mesh::export_ply;
use crate::network::{
    pretrain_encoder, predict_classes, train_error_net, Init, ModelConfig, SampleLoader, TrainConfig, TrainSplit,
};
use crate::rng::rng_for;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix5 {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            context: what.into(),
            detail: format!("{a} predictions, {b} truths"),
        });
    }
    Ok(())
}

fn check_class(c: u8) -> Result<usize> {
    if (c as usize) < NUM_CLASSES {
        Ok(c as usize)
    } else {
        Err(Error::Index {
            context: "class id",
            index: c as usize,
            len: NUM_CLASSES,
        })
    }
}

impl ConfusionMatrix5 {
    pub fn from_predictions(preds: &[u8], truths: &[u8]) -> Result<Self> {
        let mut m = Self::default();
        m.accumulate(preds, truths)?;
        Ok(m)
    }

    pub fn accumulate(&mut self, preds: &[u8], truths: &[u8]) -> Result<()> {
        check_lengths(preds.len(), truths.len(), "confusion")?;
        for (&p, &t) in preds.iter().zip(truths) {
            self.counts[check_class(t)?][check_class(p)?] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// `None` when the class never occurs.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let n = self.row_total(class);
        (n > 0).then(|| self.counts[class][class] as f64 / n as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum::<u64>() as f64 / n as f64)
    }

    /// Mean recall over the classes that occur.
    pub fn macro_recall(&self) -> Option<f64> {
        let r: Vec<f64> = (0..NUM_CLASSES).filter_map(|c| self.recall(c)).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Accuracy of always predicting the most frequent true class.
    pub fn majority_baseline(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (0..NUM_CLASSES).map(|c| self.row_total(c)).max().unwrap() as f64 / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred,0,1,2,3,4\n");
        for (c, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{c},{}", cells.join(","));
        }
        s
    }
}

/// Which predictions of an edge class count as correct for precision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionRule {
    /// True class is an error of the same sign (`{3, 4}` or `{0, 1}`).
    #[default]
    SameSignClass,
    /// Raw signed distance has the predicted sign.
    RawSign,
}

/// Tallies for one edge class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub predicted: u64,
    pub precision_hits: u64,
    pub actual: u64,
    pub recall_hits: u64,
}

impl EdgeCounts {
    /// `None` when nothing was predicted in this class.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.precision_hits as f64 / self.predicted as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.actual > 0).then(|| self.recall_hits as f64 / self.actual as f64)
    }

    fn merge(&mut self, o: &Self) {
        self.predicted += o.predicted;
        self.precision_hits += o.precision_hits;
        self.actual += o.actual;
        self.recall_hits += o.recall_hits;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTally {
    pub internal: EdgeCounts,
    pub external: EdgeCounts,
}

impl EdgeTally {
    pub fn merge(&mut self, o: &Self) {
        self.internal.merge(&o.internal);
        self.external.merge(&o.external);
    }

    /// Strict recall pooled over both edge classes.
    pub fn edge_recall(&self) -> Option<f64> {
        let a = self.internal.actual + self.external.actual;
        (a > 0).then(|| (self.internal.recall_hits + self.external.recall_hits) as f64 / a as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePrecisionRecall {
    pub internal: PrecisionRecall,
    pub external: PrecisionRecall,
}

impl From<&EdgeTally> for EdgePrecisionRecall {
    fn from(t: &EdgeTally) -> Self {
        let pr = |c: &EdgeCounts| PrecisionRecall {
            precision: c.precision(),
            recall: c.recall(),
        };
        Self {
            internal: pr(&t.internal),
            external: pr(&t.external),
        }
    }
}

pub fn edge_tally(preds: &[u8], truths: &[u8], signed_distances: &[f32], rule: PrecisionRule) -> Result<EdgeTally> {
    check_lengths(preds.len(), truths.len(), "edge_precision_recall")?;
    check_lengths(preds.len(), signed_distances.len(), "edge_precision_recall")?;
    let last = (NUM_CLASSES - 1) as u8;
    let mut t = EdgeTally::default();
    for ((&p, &y), &d) in preds.iter().zip(truths).zip(signed_distances) {
        check_class(p)?;
        check_class(y)?;
        let (int_ok, ext_ok) = match rule {
            PrecisionRule::SameSignClass => (y <= 1, y >= last - 1),
            PrecisionRule::RawSign => (d < 0.0, d > 0.0),
        };
        if p == 0 {
            t.internal.predicted += 1;
            t.internal.precision_hits += u64::from(int_ok);
        }
        if p == last {
            t.external.predicted += 1;
            t.external.precision_hits += u64::from(ext_ok);
        }
        if y == 0 {
            t.internal.actual += 1;
            t.internal.recall_hits += u64::from(p == 0);
        }
        if y == last {
            t.external.actual += 1;
            t.external.recall_hits += u64::from(p == last);
        }
    }
    Ok(t)
}

/// Sign-lenient precision and strict recall of the two edge classes.
pub fn edge_precision_recall(
    preds: &[u8],
    truths: &[u8],
    signed_distances: &[f32],
    rule: PrecisionRule,
) -> Result<EdgePrecisionRecall> {
    Ok((&edge_tally(preds, truths, signed_distances, rule)?).into())
}

/// Sum of per-node agreement fractions over non-isolated nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub sum: f64,
    pub nodes: u64,
    pub isolated: u64,
}

impl Agreement {
    pub fn value(&self) -> Option<f64> {
        (self.nodes > 0).then(|| self.sum / self.nodes as f64)
    }

    pub fn merge(&mut self, o: &Self) {
        self.sum += o.sum;
        self.nodes += o.nodes;
        self.isolated += o.isolated;
    }
}

/// Mean over nodes of the fraction of distinct neighbours whose class is
/// within one of the node's own. Isolated nodes are counted but excluded.
pub fn neighbor_agreement(edges: &[[u32; 2]], preds: &[u8]) -> Result<Agreement> {
    let n = preds.len();
    let mut nbrs = vec![Vec::new(); n];
    for &[a, b] in edges {
        let (a, b) = (a as usize, b as usize);
        if a >= n || b >= n {
            return Err(Error::Index {
                context: "neighbor_agreement edges",
                index: a.max(b),
                len: n,
            });
        }
        if a != b {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
    }
    let mut out = Agreement::default();
    for (i, list) in nbrs.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        if list.is_empty() {
            out.isolated += 1;
            continue;
        }
        let ok = list.iter().filter(|&&j| preds[i].abs_diff(preds[j]) <= 1).count();
        out.sum += ok as f64 / list.len() as f64;
        out.nodes += 1;
    }
    if out.isolated > 0 {
        log::warn!("neighbor_agreement: {} isolated nodes excluded", out.isolated);
    }
    Ok(out)
}

/// Assignment of ground-truth structures to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Structure ids of each fold.
    pub folds: Vec<Vec<u32>>,
    /// Fraction of non-test structures held out for validation.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl FoldSplit {
    pub fn train_split(&self) -> TrainSplit {
        TrainSplit {
            train: self.train.clone(),
            val: self.val.clone(),
        }
    }
}

pub const DEFAULT_VAL_FRACTION: f64 = 1.0 / 9.0;

/// Shuffles `ids` and deals them round-robin into `k` folds.
pub fn make_folds(ids: &[u32], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if k > ids.len() {
        return Err(Error::Config(format!("{k} folds for {} structures", ids.len())));
    }
    ids.shuffle(&mut rng_for(seed, &[0x666f6c64]));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan {
        k,
        seed,
        folds,
        val_fraction: DEFAULT_VAL_FRACTION,
    })
}

impl FoldPlan {
    pub fn fold_of(&self) -> BTreeMap<u32, usize> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(f, ids)| ids.iter().map(move |&id| (id, f)))
            .collect()
    }

    pub fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range for k = {}", self.k)));
        }
        Ok(())
    }

    /// Test = fold `fold`; validation = a seeded `val_fraction` of the rest.
    pub fn split(&self, fold: usize) -> Result<FoldSplit> {
        self.check_fold(fold)?;
        let test = self.folds[fold].clone();
        let mut rest: Vec<u32> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect();
        rest.sort_unstable();
        rest.shuffle(&mut rng_for(self.seed, &[0x76616c, fold as u64]));
        let n_val = ((rest.len() as f64 * self.val_fraction).round() as usize).min(rest.len().saturating_sub(1));
        let val = rest[..n_val].to_vec();
        let train = rest[n_val..].to_vec();
        let s = FoldSplit { fold, train, val, test };
        s.check_disjoint()?;
        Ok(s)
    }
}

impl FoldSplit {
    /// Fails when a structure id appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &id in ids {
                if let Some(prev) = seen.insert(id, name) {
                    return Err(Error::Dataset(format!("structure {id} in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    BlindCt,
    NoGnn,
    NoPretrain,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::BlindCt, Ablation::NoGnn, Ablation::NoPretrain];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::BlindCt => "blind_ct",
            Ablation::NoGnn => "no_gnn",
            Ablation::NoPretrain => "no_pretrain",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        if self == Ablation::NoGnn {
            m.use_gnn = false;
        }
        m
    }

    /// Patches replaced by the normalized mid-value 0.
    pub fn blind(self) -> bool {
        self == Ablation::BlindCt
    }

    pub fn pretrained(self) -> bool {
        self != Ablation::NoPretrain
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}' (full, blind_ct, no_gnn, no_pretrain)")))
    }
}

/// Per-mesh score used to pick showcase meshes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub record: usize,
    pub structure_id: u32,
    pub perturbation: u32,
    pub macro_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub nodes: u64,
    pub confusion: ConfusionMatrix5,
    pub recall: Vec<Option<f64>>,
    pub accuracy: Option<f64>,
    pub macro_recall: Option<f64>,
    pub majority_baseline: Option<f64>,
    pub edge: EdgePrecisionRecall,
    pub edge_tally: EdgeTally,
    /// Strict recall pooled over both edge classes.
    pub edge_recall: Option<f64>,
    /// Fraction of nodes whose true class is an edge class.
    pub edge_prior: f64,
    pub neighbor_agreement: Option<f64>,
    pub isolated_nodes: u64,
    pub samples: Vec<SampleScore>,
}

/// Inference over `records` and pooled metrics.
pub fn evaluate_records(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    loader: &dyn SampleLoader,
    records: &[usize],
    blind: bool,
    rule: PrecisionRule,
    fold: usize,
) -> Result<(FoldMetrics, Vec<(usize, GraphSample, Vec<u8>)>)> {
    let mut confusion = ConfusionMatrix5::default();
    let mut tally = EdgeTally::default();
    let mut agree = Agreement::default();
    let mut samples = Vec::new();
    let mut preds_all = Vec::new();
    for &r in records {
        let s = loader.load(r)?;
        let pred = predict_classes(store, model, &s, blind)?;
        confusion.accumulate(&pred, &s.labels)?;
        tally.merge(&edge_tally(&pred, &s.labels, &s.signed_distances, rule)?);
        agree.merge(&neighbor_agreement(&s.edges, &pred)?);
        let own = ConfusionMatrix5::from_predictions(&pred, &s.labels)?;
        samples.push(SampleScore {
            record: r,
            structure_id: s.provenance.structure_id,
            perturbation: s.provenance.perturbation,
            macro_recall: own.macro_recall().unwrap_or(0.0),
        });
        preds_all.push((r, s, pred));
    }
    let nodes = confusion.total();
    let edge_nodes = confusion.row_total(0) + confusion.row_total(NUM_CLASSES - 1);
    let m = FoldMetrics {
        fold,
        nodes,
        recall: (0..NUM_CLASSES).map(|c| confusion.recall(c)).collect(),
        accuracy: confusion.accuracy(),
        macro_recall: confusion.macro_recall(),
        majority_baseline: confusion.majority_baseline(),
        edge: (&tally).into(),
        edge_recall: tally.edge_recall(),
        edge_prior: if nodes > 0 { edge_nodes as f64 / nodes as f64 } else { 0.0 },
        edge_tally: tally,
        neighbor_agreement: agree.value(),
        isolated_nodes: agree.isolated,
        confusion,
        samples,
    };
    Ok((m, preds_all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> Summary {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return Summary { mean: None, std: None };
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    Summary {
        mean: Some(mean),
        std: Some(var.sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Summary,
    pub macro_recall: Summary,
    pub edge_recall: Summary,
    pub internal_precision: Summary,
    pub internal_recall: Summary,
    pub external_precision: Summary,
    pub external_recall: Summary,
    pub neighbor_agreement: Summary,
}

impl Aggregate {
    pub fn from_folds(folds: &[FoldMetrics]) -> Self {
        let f = |g: fn(&FoldMetrics) -> Option<f64>| summarize(folds.iter().map(g));
        Self {
            accuracy: f(|m| m.accuracy),
            macro_recall: f(|m| m.macro_recall),
            edge_recall: f(|m| m.edge_recall),
            internal_precision: f(|m| m.edge.internal.precision),
            internal_recall: f(|m| m.edge.internal.recall),
            external_precision: f(|m| m.edge.external.precision),
            external_recall: f(|m| m.edge.external.recall),
            neighbor_agreement: f(|m| m.neighbor_agreement),
        }
    }
}

pub const REPORT_VERSION: u32 = 1;

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub version: u32,
    pub ablation: Ablation,
    pub precision_rule: PrecisionRule,
    pub fold_seed: u64,
    pub train_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: Aggregate,
}

impl Report {
    pub fn new(
        ablation: Ablation,
        rule: PrecisionRule,
        plan: &FoldPlan,
        model: &ModelConfig,
        train: &TrainConfig,
        folds: Vec<FoldMetrics>,
    ) -> Self {
        Self {
            version: REPORT_VERSION,
            ablation,
            precision_rule: rule,
            fold_seed: plan.seed,
            train_seed: train.seed,
            model: model.clone(),
            train: train.clone(),
            aggregate: Aggregate::from_folds(&folds),
            folds,
        }
    }

    /// Checks the structural rules `report.json` promises.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("report: {m}")));
        if self.version != REPORT_VERSION {
            return bad(format!("version {}", self.version));
        }
        for f in &self.folds {
            if f.confusion.total() != f.nodes {
                return bad(format!("fold {} confusion total != node count", f.fold));
            }
            if f.recall.len() != NUM_CLASSES {
                return bad(format!("fold {} has {} recalls", f.fold, f.recall.len()));
            }
            let unit = |v: Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
            let all = f.recall.iter().copied().chain([
                f.accuracy,
                f.macro_recall,
                f.edge.internal.precision,
                f.edge.internal.recall,
                f.edge.external.precision,
                f.edge.external.recall,
                f.neighbor_agreement,
            ]);
            if !all.into_iter().all(unit) {
                return bad(format!("fold {} has a rate outside [0, 1]", f.fold));
            }
        }
        Ok(())
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            let _ = writeln!(s, "# fold {}", f.fold);
            s.push_str(&f.confusion.to_csv());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("confusion.csv");
        fs::write(&p, self.confusion_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Writes class-coloured PLYs of the worst and best `n` test meshes.
pub fn export_showcase(dir: &Path, evaluated: &[(usize, GraphSample, Vec<u8>)], scores: &[SampleScore], n: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].macro_recall.total_cmp(&scores[b].macro_recall).then(a.cmp(&b)));
    let worst = order.iter().take(n).map(|&i| ("worst", i));
    let best = order.iter().rev().take(n).map(|&i| ("best", i));
    for (rank, (tag, i)) in worst.enumerate().chain(best.enumerate()) {
        let (_, s, pred) = &evaluated[i];
        let sc = &scores[i];
        let name = format!("{tag}{rank}_s{:03}_p{:03}", sc.structure_id, sc.perturbation);
        export_ply(&s.mesh(), Some(pred), dir.join(format!("{name}_pred.ply")))?;
        export_ply(&s.mesh(), Some(&s.labels), dir.join(format!("{name}_true.ply")))?;
    }
    Ok(())
}

/// Parameters of one trained model plus its fold metrics.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub metrics: FoldMetrics,
    pub params: ParamStore<f32>,
}

/// Pretext training on the training phantoms of one fold.
pub fn pretrain_fold(
    data: &Dataset,
    split: &FoldSplit,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<crate::network::PretrainOutcome> {
    let load = |ids: &[u32]| -> Result<Vec<_>> { ids.iter().map(|&id| data.phantom(id)).collect() };
    let tr = load(&split.train)?;
    let va = load(&split.val)?;
    let tr_refs: Vec<_> = tr.iter().map(|(c, m)| (c, m)).collect();
    let va_refs: Vec<_> = va.iter().map(|(c, m)| (c, m)).collect();
    pretrain_encoder(&tr_refs, &va_refs, model, train)
}

pub struct AblationOptions<'a> {
    pub rule: PrecisionRule,
    /// Reused instead of pretraining when set.
    pub encoder: Option<&'a ParamStore<f32>>,
    pub out_dir: Option<&'a Path>,
    pub showcase: usize,
}

impl Default for AblationOptions<'_> {
    fn default() -> Self {
        Self {
            rule: PrecisionRule::default(),
            encoder: None,
            out_dir: None,
            showcase: 5,
        }
    }
}

/// Trains and tests one configuration on one fold.
pub fn run_fold(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    which: Ablation,
    base_model: &ModelConfig,
    train: &TrainConfig,
    opts: &AblationOptions<'_>,
) -> Result<FoldRun> {
    let split = plan.split(fold)?;
    let model = which.model_config(base_model);
    let fold_dir = opts.out_dir.map(|d| d.join(format!("fold{fold}")));
    let pretrained;
    let init = if which.pretrained() {
        let enc = match opts.encoder {
            Some(e) => e,
            None => {
                pretrained = pretrain_fold(data, &split, base_model, train)?.encoder();
                &pretrained
            }
        };
        Init::PretrainedEncoder(enc)
    } else {
        Init::Random
    };
    let out = train_error_net(data, &split.train_split(), &model, train, init, which.blind(), fold_dir.as_deref())?;
    let test: Vec<usize> = split.test.iter().flat_map(|&s| data.records_of(s)).collect();
    let (metrics, evaluated) = evaluate_records(&out.best, &model, data, &test, which.blind(), opts.rule, fold)?;
    if let (Some(dir), true) = (&fold_dir, opts.showcase > 0) {
        export_showcase(&dir.join("meshes"), &evaluated, &metrics.samples, opts.showcase)?;
    }
    Ok(FoldRun {
        metrics,
        params: out.best,
    })
}

/// Cross-validated run of one ablation over `folds`; writes the report
/// when `opts.out_dir` is set.
pub fn run_ablation(
    data: &Dataset,
    plan: &FoldPlan,
    folds: &[usize],
    which: Ablation,
    model: &ModelConfig,
    train: &TrainConfig,
    opts: &AblationOptions<'_>,
) -> Result<Report> {
    let mut metrics = Vec::new();
    for &f in folds {
        log::info!("stage=ablation which={} fold={f}", which.name());
        metrics.push(run_fold(data, plan, f, which, model, train, opts)?.metrics);
    }
    let report = Report::new(which, opts.rule, plan, &which.model_config(model), train, metrics);
    report.validate()?;
    if let Some(dir) = opts.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_identity_and_constant() {
        let t = [0, 1, 2, 3, 4, 2, 2];
        let m = ConfusionMatrix5::from_predictions(&t, &t).unwrap();
        assert!((0..5).all(|c| m.recall(c) == Some(1.0)));
        let c = ConfusionMatrix5::from_predictions(&[2; 7], &t).unwrap();
        assert_eq!(c.recall(2), Some(1.0));
        assert!([0, 1, 3, 4].iter().all(|&k| c.recall(k) == Some(0.0)));
        assert!((0..5).all(|r| (0..5).all(|k| k == 2 || c.counts[r][k] == 0)));
        assert!(ConfusionMatrix5::from_predictions(&[1], &[1, 2]).is_err());
        assert!(ConfusionMatrix5::from_predictions(&[5], &[1]).is_err());
    }

    #[test]
    fn confusion_matches_independent_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<u8> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let t: Vec<u8> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let m = ConfusionMatrix5::from_predictions(&p, &t).unwrap();
        for r in 0..5u8 {
            for c in 0..5u8 {
                let n = p.iter().zip(&t).filter(|&(&a, &b)| a == c && b == r).count() as u64;
                assert_eq!(m.counts[r as usize][c as usize], n);
            }
        }
        assert_eq!(m.total(), 1000);
    }

    #[test]
    fn edge_precision_hand_tally() {
        // 10 predicted 4: 6 true 4, 2 true 3, 2 true 2; 12 true 4 overall.
        let mut p = vec![4u8; 10];
        let mut t = vec![4, 4, 4, 4, 4, 4, 3, 3, 2, 2];
        p.extend([2u8; 6]);
        t.extend([4u8; 6]);
        let d: Vec<f32> = t.iter().map(|&c| c as f32 - 2.0).collect();
        let r = edge_precision_recall(&p, &t, &d, PrecisionRule::SameSignClass).unwrap();
        assert_eq!(r.external.precision, Some(0.8));
        assert_eq!(r.external.recall, Some(0.5));
        assert_eq!(r.internal.precision, None);
        assert_eq!(r.internal.recall, None);
    }

    #[test]
    fn edge_sign_rule() {
        let r = edge_precision_recall(&[4], &[3], &[1.0], PrecisionRule::SameSignClass).unwrap();
        assert_eq!(r.external.precision, Some(1.0));
        assert_eq!(r.external.recall, None);
        let perfect = [0u8, 1, 2, 3, 4];
        let r = edge_precision_recall(&perfect, &perfect, &[-3.0, -1.0, 0.0, 1.0, 3.0], PrecisionRule::SameSignClass)
            .unwrap();
        assert_eq!(r.internal.precision, Some(1.0));
        assert_eq!(r.internal.recall, Some(1.0));
        assert_eq!(r.external.precision, Some(1.0));
        assert_eq!(r.external.recall, Some(1.0));
        let raw = edge_precision_recall(&[4], &[2], &[0.3], PrecisionRule::RawSign).unwrap();
        assert_eq!(raw.external.precision, Some(1.0));
    }

    #[test]
    fn strict_recall_bounded_by_lenient_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<u8> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let t: Vec<u8> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let d = vec![0.0; 500];
        let e = edge_tally(&p, &t, &d, PrecisionRule::SameSignClass).unwrap();
        assert!(e.external.recall_hits <= e.external.precision_hits);
        assert!(e.internal.recall_hits <= e.internal.precision_hits);
    }

    #[test]
    fn neighbor_agreement_cases() {
        let tri = [[0, 1], [1, 2], [2, 0]];
        assert_eq!(neighbor_agreement(&tri, &[3, 3, 3]).unwrap().value(), Some(1.0));
        assert_eq!(neighbor_agreement(&[[0, 1]], &[0, 4]).unwrap().value(), Some(0.0));
        let square = [[0, 1], [1, 2], [2, 3], [3, 0]];
        assert_eq!(neighbor_agreement(&square, &[2, 3, 2, 3]).unwrap().value(), Some(1.0));
        let a = neighbor_agreement(&[[0, 1]], &[1, 1, 4]).unwrap();
        assert_eq!(a.isolated, 1);
        assert_eq!(a.value(), Some(1.0));
    }

    #[test]
    fn neighbor_agreement_reversal_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let edges: Vec<[u32; 2]> = (0..60).map(|_| [rng.random_range(0..20), rng.random_range(0..20)]).collect();
        let p: Vec<u8> = (0..20).map(|_| rng.random_range(0..5)).collect();
        let q: Vec<u8> = p.iter().map(|&c| 4 - c).collect();
        let a = neighbor_agreement(&edges, &p).unwrap().value().unwrap();
        let b = neighbor_agreement(&edges, &q).unwrap().value().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folds_partition_and_sizes() {
        let ids: Vec<u32> = (0..68).collect();
        let plan = make_folds(&ids, 5, 7).unwrap();
        assert_eq!(plan, make_folds(&ids, 5, 7).unwrap());
        let mut all: Vec<u32> = plan.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        for f in 0..5 {
            let s = plan.split(f).unwrap();
            s.check_disjoint().unwrap();
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), 68);
            let (test, val, train) = (s.test.len() * 100, s.val.len() * 100, s.train.len() * 100);
            assert!((1300..=1400).contains(&test), "{test}");
            assert!((500..=700).contains(&val), "{val}");
            assert!((4700..=4900).contains(&train), "{train}");
        }
        assert!(make_folds(&ids[..3], 5, 0).is_err());
        assert!(plan.split(7).is_err());
    }

    #[test]
    fn leakage_detected() {
        let s = FoldSplit {
            fold: 0,
            train: vec![1, 2],
            val: vec![3],
            test: vec![2],
        };
        assert!(s.check_disjoint().is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("none".parse::<Ablation>().is_err());
        assert!(!Ablation::NoGnn.model_config(&ModelConfig::default()).use_gnn);
    }
}
