//! Joint optimization of both branches and F1 evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::docmodel::{Document, KEY_LABEL, OTHER_LABEL};
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::inference::{CategoryMapper, ExtractionResult, InferenceConfig, LabelScheme, ANSWER_LABEL, QUESTION_LABEL, UNKNOWN_CATEGORY};
use crate::model::{Model, PreparedDoc};
use crate::params::{Adam, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda_entity: f64,
    pub lambda_re: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_kv_branch: bool,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            lambda_entity: 1.0,
            lambda_re: 1.0,
            epochs: 30,
            batch_size: 1,
            seed: 42,
            use_kv_branch: true,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.lambda_entity >= 0.0 && self.lambda_entity.is_finite()) {
            return Err(Error::config("train.lambda_entity", "must be non-negative"));
        }
        if !(self.lambda_re >= 0.0 && self.lambda_re.is_finite()) {
            return Err(Error::config("train.lambda_re", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// `λ_entity · L_entity + λ_re · L_re`, the pair term dropped when the pair
/// branch is off.
pub fn joint_loss(entity: f64, re: f64, cfg: &TrainConfig) -> Result<f64> {
    if !entity.is_finite() || !re.is_finite() {
        return Err(Error::NonFinite(format!("branch losses entity={entity} re={re}")));
    }
    let pair = if cfg.use_kv_branch { cfg.lambda_re * re } else { 0.0 };
    Ok(cfg.lambda_entity * entity + pair)
}

/// Tape version of [`joint_loss`].
pub fn joint_loss_node(tape: &mut Tape, entity: Var, re: Option<Var>, cfg: &TrainConfig) -> Result<Var> {
    let e = tape.scale(entity, cfg.lambda_entity);
    let total = match re {
        Some(r) if cfg.use_kv_branch => {
            let r = tape.scale(r, cfg.lambda_re);
            tape.add(e, r)
        }
        _ => e,
    };
    let v = tape.scalar(total);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "joint loss {v} (entity {}, re {:?})",
            tape.scalar(entity),
            re.map(|r| tape.scalar(r))
        )));
    }
    Ok(total)
}

/// One optimizer step, as written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_entity: f64,
    pub loss_re: f64,
    pub pair_f1: Option<f64>,
    pub entity_f1: Option<f64>,
}

/// Where training writes its artifacts, and what it evaluates on.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Evaluated after every epoch; the result fills the F1 fields of the
    /// epoch's last step record.
    pub eval: Option<(&'a [Document], &'a InferenceConfig)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_reports: Vec<EvalReport>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss_total).collect()
    }
}

/// Gradients and loss parts of one document.
pub fn document_gradients(
    model: &Model,
    prep: &PreparedDoc,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(ParamStore, f64, f64, f64)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, prep)?;
    let parts = model.losses(&mut tape, &bound, prep, &out, loss.pair_weights())?;
    let total = joint_loss_node(&mut tape, parts.entity, parts.pair, cfg)?;
    let mut grads = tape.backward(total);
    let g = bound.collect(&tape, &mut grads);
    let re = parts.pair.map_or(0.0, |p| tape.scalar(p));
    Ok((g, tape.scalar(total), tape.scalar(parts.entity), re))
}

/// Trains `model` in place with Adam. Batches are sets of whole documents
/// drawn from a seeded shuffle each epoch; gradients are averaged over the
/// batch and clipped to `clip_norm`. A non-finite loss aborts with an error,
/// leaving the last written checkpoint untouched.
pub fn train(
    model: &mut Model,
    docs: &[Document],
    cfg: &TrainConfig,
    loss: &LossConfig,
    options: &TrainOptions,
) -> Result<TrainHistory> {
    cfg.validate()?;
    loss.validate()?;
    if cfg.use_kv_branch != model.config.use_kv_branch {
        return Err(Error::config(
            "train.use_kv_branch",
            "differs from the model's pair-branch setting",
        ));
    }
    let prepared: Vec<PreparedDoc> = docs
        .iter()
        .map(|d| model.prepare(d))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.num_tokens() > 0)
        .collect();
    if prepared.is_empty() {
        return Err(Error::InvalidInput("training corpus has no tokens".into()));
    }
    let mut metrics = match &options.metrics_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<ParamStore> = None;
            let (mut lt, mut le, mut lr) = (0.0, 0.0, 0.0);
            for &i in batch {
                let (g, t, e, r) = document_gradients(model, &prepared[i], cfg, loss)?;
                lt += t;
                le += e;
                lr += r;
                match &mut acc {
                    Some(a) => a.add_assign(&g),
                    None => acc = Some(g),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("gradients at epoch {epoch} step {step}")));
            }
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(&mut model.params, &grads);
            history.steps.push(StepRecord {
                epoch,
                step,
                loss_total: lt * scale,
                loss_entity: le * scale,
                loss_re: lr * scale,
                pair_f1: None,
                entity_f1: None,
            });
            step += 1;
        }
        if let Some((eval_docs, infer)) = options.eval {
            let report = evaluate(model, eval_docs, infer)?;
            if let Some(last) = history.steps.last_mut() {
                last.pair_f1 = Some(report.pair.f1);
                last.entity_f1 = Some(report.entity.f1);
            }
            history.epoch_reports.push(report);
        }
        let epoch_steps = history.steps.iter().filter(|s| s.epoch == epoch);
        let (sum, count) = epoch_steps.fold((0.0, 0), |(s, c), r| (s + r.loss_total, c + 1));
        info!("epoch {epoch}: mean loss {:.5} over {count} steps", sum / count.max(1) as f64);
        if let Some(f) = &mut metrics {
            for rec in history.steps.iter().filter(|s| s.epoch == epoch) {
                let line = serde_json::to_string(rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(options.metrics_path.clone().unwrap_or_default(), e))?;
            }
        }
        if let Some(path) = &options.checkpoint_path {
            checkpoint::save(model, epoch + 1, path)?;
        }
    }
    Ok(history)
}

/// Precision, recall and F1 from counts; every ratio with a zero
/// denominator is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    /// Scores a predicted set against a gold set.
    pub fn from_sets<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Self {
        let tp = pred.intersection(gold).count();
        Self::from_counts(tp, pred.len() - tp, gold.len() - tp)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entity: Prf,
    pub pair: Prf,
    pub per_category: BTreeMap<String, Prf>,
    pub documents: usize,
}

impl EvalReport {
    /// Fixed-width per-category table followed by the micro and pair rows.
    pub fn format_table(&self) -> String {
        let mut out = format!("{:<16} {:>9} {:>9} {:>9} {:>6}\n", "category", "precision", "recall", "f1", "gold");
        let row = |name: &str, p: &Prf| {
            format!(
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>6}\n",
                name,
                p.precision,
                p.recall,
                p.f1,
                p.tp + p.fn_
            )
        };
        for (cat, p) in &self.per_category {
            out.push_str(&row(cat, p));
        }
        out.push_str(&row("micro (entity)", &self.entity));
        out.push_str(&row("pairs", &self.pair));
        out
    }
}

/// One scored item: document index, category, and a segment id or a
/// token range.
type EntityKey = (usize, String, usize, usize);

fn gold_entities(doc_idx: usize, doc: &Document, scheme: LabelScheme) -> BTreeSet<EntityKey> {
    let spans = doc.token_spans();
    doc.segments
        .iter()
        .zip(spans)
        .filter(|(s, _)| s.label != OTHER_LABEL)
        .filter_map(|(s, (a, b))| match scheme {
            LabelScheme::Categorical if s.label != KEY_LABEL => Some((doc_idx, s.label.clone(), s.id, s.id)),
            LabelScheme::Categorical => None,
            LabelScheme::Funsd => (b > a).then(|| (doc_idx, s.label.clone(), a, b)),
        })
        .collect()
}

fn predicted_entities(doc_idx: usize, doc: &Document, result: &ExtractionResult, scheme: LabelScheme) -> BTreeSet<EntityKey> {
    let mut out = BTreeSet::new();
    match scheme {
        LabelScheme::Categorical => {
            for p in &result.pairs {
                if p.category != UNKNOWN_CATEGORY && p.category != KEY_LABEL {
                    out.insert((doc_idx, p.category.clone(), p.value, p.value));
                }
            }
            for s in &result.standalone {
                if s.category != KEY_LABEL {
                    out.insert((doc_idx, s.category.clone(), s.segment_id, s.segment_id));
                }
            }
        }
        LabelScheme::Funsd => {
            let spans = doc.token_spans();
            let whole = |id: usize, label: &str| {
                let (a, b) = spans[id];
                (b > a).then(|| (doc_idx, label.to_string(), a, b))
            };
            for p in &result.pairs {
                out.extend(whole(p.key, QUESTION_LABEL));
                out.extend(whole(p.value, ANSWER_LABEL));
            }
            for s in &result.standalone {
                let offset = spans[s.segment_id].0;
                for (cat, a, b) in &s.spans {
                    out.insert((doc_idx, cat.clone(), offset + a, offset + b));
                }
            }
        }
    }
    out
}

/// Scores extraction results against gold annotations.
///
/// Categorical scheme: one entity per labelled segment, the key role
/// excluded. FUNSD scheme: labelled token spans, keys included.
pub fn score_extractions(docs: &[Document], results: &[ExtractionResult], scheme: LabelScheme) -> Result<EvalReport> {
    if docs.len() != results.len() {
        return Err(Error::InvalidInput(format!("{} results for {} documents", results.len(), docs.len())));
    }
    let (mut gold_e, mut pred_e) = (BTreeSet::new(), BTreeSet::new());
    let (mut gold_p, mut pred_p) = (BTreeSet::new(), BTreeSet::new());
    for (i, (doc, res)) in docs.iter().zip(results).enumerate() {
        gold_e.extend(gold_entities(i, doc, scheme));
        pred_e.extend(predicted_entities(i, doc, res, scheme));
        gold_p.extend(doc.links().into_iter().map(|l| (i, l.key, l.value)));
        pred_p.extend(res.pairs.iter().map(|p| (i, p.key, p.value)));
    }
    let categories: BTreeSet<String> = gold_e.iter().chain(&pred_e).map(|k| k.1.clone()).collect();
    let per_category = categories
        .into_iter()
        .map(|c| {
            let pick = |s: &BTreeSet<EntityKey>| s.iter().filter(|k| k.1 == c).cloned().collect::<BTreeSet<_>>();
            let prf = Prf::from_sets(&pick(&pred_e), &pick(&gold_e));
            (c, prf)
        })
        .collect();
    Ok(EvalReport {
        entity: Prf::from_sets(&pred_e, &gold_e),
        pair: Prf::from_sets(&pred_p, &gold_p),
        per_category,
        documents: docs.len(),
    })
}

/// Runs the full extraction pipeline on `docs` and scores it. Fails when a
/// gold label is not one of the model's categories.
pub fn evaluate(model: &Model, docs: &[Document], cfg: &InferenceConfig) -> Result<EvalReport> {
    let mapper = model.mapper(cfg)?;
    evaluate_with(model, docs, cfg, &mapper)
}

pub fn evaluate_with(model: &Model, docs: &[Document], cfg: &InferenceConfig, mapper: &CategoryMapper) -> Result<EvalReport> {
    let known: BTreeSet<&str> = model.scheme.categories().iter().map(String::as_str).collect();
    for doc in docs {
        for seg in &doc.segments {
            if seg.label != OTHER_LABEL && !known.contains(seg.label.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "category `{}` in document {} is not among the checkpoint categories {:?}",
                    seg.label,
                    doc.id,
                    model.scheme.categories()
                )));
            }
        }
    }
    let results = docs
        .iter()
        .map(|d| model.extract(d, cfg, mapper).map(|e| e.result))
        .collect::<Result<Vec<_>>>()?;
    if results.iter().all(|r| r.pairs.is_empty()) && model.config.use_kv_branch {
        warn!("no pairs predicted on {} documents", docs.len());
    }
    score_extractions(docs, &results, cfg.label_scheme)
}
