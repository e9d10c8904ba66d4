//! Prediction heads: pair relevancy with focal loss, token tagging with a
//! linear-chain CRF.

pub mod bioes;
pub mod crf;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tape::{Tape, Var};

pub use bioes::{Span, TagKind, TagScheme, TagSequence, OUTSIDE};
pub use crf::{crf_log_partition, crf_nll, crf_nll_grads, crf_score, crf_viterbi, CrfGrads, CrfParams};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.75, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub use_focal: bool,
    pub focal: FocalConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_focal: true,
            focal: FocalConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.focal.alpha) {
            return Err(Error::config("loss.focal.alpha", "must lie in [0, 1]"));
        }
        if !(self.focal.gamma >= 0.0 && self.focal.gamma.is_finite()) {
            return Err(Error::config("loss.focal.gamma", "must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Focal weighting, or plain cross-entropy with unit class weights when
    /// focal loss is switched off.
    pub fn pair_weights(&self) -> BinaryLossWeights {
        if self.use_focal {
            BinaryLossWeights::focal(self.focal.alpha, self.focal.gamma)
        } else {
            BinaryLossWeights::cross_entropy()
        }
    }
}

/// Per-entry loss `−pos (1−p)^γ ln p` for positives and
/// `−neg p^γ ln(1−p)` for negatives, with `p` clamped to `[1e−7, 1−1e−7]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryLossWeights {
    pub pos: f64,
    pub neg: f64,
    pub gamma: f64,
}

impl BinaryLossWeights {
    pub fn focal(alpha: f64, gamma: f64) -> Self {
        Self {
            pos: alpha,
            neg: 1.0 - alpha,
            gamma,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            pos: 1.0,
            neg: 1.0,
            gamma: 0.0,
        }
    }

    pub fn term(&self, p: f64, positive: bool) -> f64 {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if positive {
            -self.pos * (1.0 - p).powf(self.gamma) * p.ln()
        } else {
            -self.neg * p.powf(self.gamma) * (1.0 - p).ln()
        }
    }

    /// `d term / d p`; zero where the clamp is active.
    pub fn term_grad(&self, p: f64, positive: bool) -> f64 {
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            return 0.0;
        }
        let g = self.gamma;
        if positive {
            let q = 1.0 - p;
            let focus = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * p.ln() };
            -self.pos * (q.powf(g) / p - focus)
        } else {
            let focus = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) * (1.0 - p).ln() };
            -self.neg * (focus - p.powf(g) / (1.0 - p))
        }
    }
}

/// Positive-class probabilities `p′_ij` for all ordered segment pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub probs: Array2<f64>,
}

impl MatchMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() != probs.ncols() {
            return Err(Error::shape("MatchMatrix", "square matrix", format!("{:?}", probs.dim())));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("match probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { probs })
    }

    /// From the `[N*N, 1]` pair column produced by [`match_probabilities`].
    pub fn from_pair_column(col: &Array2<f64>, n: usize) -> Result<Self> {
        if col.dim() != (n * n, 1) {
            return Err(Error::shape("MatchMatrix", format!("({}, 1)", n * n), format!("{:?}", col.dim())));
        }
        Self::new(Array2::from_shape_fn((n, n), |(i, j)| col[[i * n + j, 0]]))
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }
}

/// Mean pair loss over the off-diagonal entries; 0 when `N < 2`.
pub fn pair_loss(probs: &MatchMatrix, labels: &Array2<f64>, weights: BinaryLossWeights) -> Result<f64> {
    let n = probs.n();
    if labels.dim() != (n, n) {
        return Err(Error::shape("pair_loss", format!("({n}, {n})"), format!("{:?}", labels.dim())));
    }
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += weights.term(probs.probs[[i, j]], labels[[i, j]] > 0.5);
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

pub fn focal_loss(probs: &MatchMatrix, labels: &Array2<f64>, alpha: f64, gamma: f64) -> Result<f64> {
    pair_loss(probs, labels, BinaryLossWeights::focal(alpha, gamma))
}

/// Tape version of [`pair_loss`] over a `[N*N, 1]` probability column.
pub fn pair_loss_node(
    tape: &mut Tape,
    probs: Var,
    labels: &Array2<f64>,
    weights: BinaryLossWeights,
) -> Result<Var> {
    let n = labels.nrows();
    if labels.ncols() != n || tape.shape(probs) != (n * n, 1) {
        return Err(Error::shape(
            "pair_loss",
            format!("({}, 1) for {n}x{n} labels", n * n),
            format!("{:?}", tape.shape(probs)),
        ));
    }
    let p = tape.value(probs);
    let mut grad = Array2::zeros((n * n, 1));
    let mut total = 0.0;
    if n >= 2 {
        let norm = 1.0 / (n * (n - 1)) as f64;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let r = i * n + j;
                let y = labels[[i, j]] > 0.5;
                total += weights.term(p[[r, 0]], y) * norm;
                grad[[r, 0]] = weights.term_grad(p[[r, 0]], y) * norm;
            }
        }
    }
    Ok(tape.fused_scalar(total, &[probs], vec![grad]))
}

pub fn init_params<R: Rng>(d_ctx: usize, d_edge: usize, num_tags: usize, rng: &mut R, store: &mut ParamStore) {
    store.insert("heads/match/w1", glorot(rng, d_edge, d_edge));
    store.insert("heads/match/b1", Array2::zeros((1, d_edge)));
    store.insert("heads/match/w2", glorot(rng, d_edge, 2));
    store.insert("heads/match/b2", Array2::zeros((1, 2)));
    store.insert("heads/entity/w1", glorot(rng, d_ctx, d_ctx));
    store.insert("heads/entity/b1", Array2::zeros((1, d_ctx)));
    store.insert("heads/entity/w2", glorot(rng, d_ctx, num_tags));
    store.insert("heads/entity/b2", Array2::zeros((1, num_tags)));
    store.insert("heads/crf/transitions", Array2::zeros((num_tags, num_tags)));
    store.insert("heads/crf/start", Array2::zeros((1, num_tags)));
    store.insert("heads/crf/end", Array2::zeros((1, num_tags)));
}

fn mlp2(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Var {
    let h = tape.matmul(x, params.var(&format!("{prefix}/w1")));
    let h = tape.add_row(h, params.var(&format!("{prefix}/b1")));
    let h = tape.relu(h);
    let o = tape.matmul(h, params.var(&format!("{prefix}/w2")));
    tape.add_row(o, params.var(&format!("{prefix}/b2")))
}

/// Two logits per edge, `[N*N, 2]`.
pub fn edge_logits(tape: &mut Tape, params: &Bound, edges: Var) -> Var {
    mlp2(tape, params, "heads/match", edges)
}

/// Softmax over the two logits, keeping the positive class as `[N*N, 1]`.
pub fn match_probabilities(tape: &mut Tape, logits: Var) -> Var {
    let p = tape.softmax_rows(logits, None);
    tape.slice_cols(p, 1, 2)
}

/// Per-token tag emissions, `[L, num_tags]`.
pub fn bioes_logits(tape: &mut Tape, params: &Bound, ctx: Var) -> Var {
    mlp2(tape, params, "heads/entity", ctx)
}

/// Summed CRF negative log-likelihood of independent per-segment chains.
/// Empty spans are skipped.
pub fn crf_nll_node(
    tape: &mut Tape,
    params: &Bound,
    emissions: Var,
    spans: &[(usize, usize)],
    gold: &[usize],
) -> Result<Var> {
    let em = tape.value(emissions);
    if gold.len() != em.nrows() {
        return Err(Error::InvalidInput(format!(
            "gold tag count {} differs from token count {}",
            gold.len(),
            em.nrows()
        )));
    }
    let (tv, sv, ev) = (
        params.var("heads/crf/transitions"),
        params.var("heads/crf/start"),
        params.var("heads/crf/end"),
    );
    let crf = CrfParams {
        transitions: tape.value(tv).clone(),
        start: tape.value(sv).row(0).to_owned(),
        end: tape.value(ev).row(0).to_owned(),
    };
    let nt = crf.num_tags();
    let mut d_em = Array2::zeros(em.dim());
    let mut d_tr = Array2::zeros((nt, nt));
    let mut d_st = Array1::zeros(nt);
    let mut d_en = Array1::zeros(nt);
    let mut total = 0.0;
    for &(a, b) in spans {
        if b <= a {
            continue;
        }
        let chain = em.slice(ndarray::s![a..b, ..]).to_owned();
        let g = crf_nll_grads(&chain, &gold[a..b], &crf)?;
        total += g.nll;
        d_em.slice_mut(ndarray::s![a..b, ..]).assign(&g.emissions);
        d_tr += &g.transitions;
        d_st += &g.start;
        d_en += &g.end;
    }
    let row = |v: Array1<f64>| v.insert_axis(ndarray::Axis(0));
    Ok(tape.fused_scalar(total, &[emissions, tv, sv, ev], vec![d_em, d_tr, row(d_st), row(d_en)]))
}

/// Viterbi tags for each span, concatenated in token order.
pub fn decode_tags(emissions: &Array2<f64>, spans: &[(usize, usize)], crf: &CrfParams) -> Result<Vec<Vec<usize>>> {
    spans
        .iter()
        .map(|&(a, b)| {
            if b <= a {
                Ok(Vec::new())
            } else {
                crf_viterbi(&emissions.slice(ndarray::s![a..b, ..]).to_owned(), crf)
            }
        })
        .collect()
}
