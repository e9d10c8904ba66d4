use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear-chain CRF potentials over `T` tags.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// `transitions[[i, j]]` scores tag `i` followed by tag `j`.
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// Gradients of the negative log-likelihood.
#[derive(Debug, Clone)]
pub struct CrfGrads {
    pub nll: f64,
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl CrfParams {
    pub fn zeros(num_tags: usize) -> Self {
        Self {
            transitions: Array2::zeros((num_tags, num_tags)),
            start: Array1::zeros(num_tags),
            end: Array1::zeros(num_tags),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    /// Reads `heads/crf/{transitions,start,end}`.
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            transitions: store.expect("heads/crf/transitions").clone(),
            start: store.expect("heads/crf/start").row(0).to_owned(),
            end: store.expect("heads/crf/end").row(0).to_owned(),
        }
    }

    fn check(&self, emissions: &Array2<f64>) -> Result<()> {
        let t = self.num_tags();
        if emissions.ncols() != t || self.transitions.dim() != (t, t) || self.end.len() != t {
            return Err(Error::shape(
                "crf",
                format!("{t} tags"),
                format!("emissions {:?}, transitions {:?}", emissions.dim(), self.transitions.dim()),
            ));
        }
        if emissions.nrows() == 0 {
            return Err(Error::InvalidInput("crf sequence must be non-empty".into()));
        }
        Ok(())
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Unnormalized score of one tag path.
pub fn crf_score(emissions: &Array2<f64>, tags: &[usize], crf: &CrfParams) -> Result<f64> {
    crf.check(emissions)?;
    if tags.len() != emissions.nrows() {
        return Err(Error::InvalidInput(format!(
            "gold length {} differs from sequence length {}",
            tags.len(),
            emissions.nrows()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= crf.num_tags()) {
        return Err(Error::InvalidInput(format!("tag id {bad} out of range")));
    }
    let mut s = crf.start[tags[0]] + crf.end[tags[tags.len() - 1]];
    for (t, &y) in tags.iter().enumerate() {
        s += emissions[[t, y]];
        if t > 0 {
            s += crf.transitions[[tags[t - 1], y]];
        }
    }
    Ok(s)
}

fn forward(emissions: &Array2<f64>, crf: &CrfParams) -> Array2<f64> {
    let (len, nt) = emissions.dim();
    let mut alpha = Array2::zeros((len, nt));
    for j in 0..nt {
        alpha[[0, j]] = crf.start[j] + emissions[[0, j]];
    }
    for t in 1..len {
        for j in 0..nt {
            let prev = alpha.row(t - 1);
            let trans = crf.transitions.column(j);
            alpha[[t, j]] = logsumexp((0..nt).map(|i| prev[i] + trans[i])) + emissions[[t, j]];
        }
    }
    alpha
}

fn backward(emissions: &Array2<f64>, crf: &CrfParams) -> Array2<f64> {
    let (len, nt) = emissions.dim();
    let mut beta = Array2::zeros((len, nt));
    beta.row_mut(len - 1).assign(&crf.end);
    for t in (0..len - 1).rev() {
        for i in 0..nt {
            let next: ArrayView1<f64> = beta.row(t + 1);
            let v = logsumexp((0..nt).map(|j| crf.transitions[[i, j]] + emissions[[t + 1, j]] + next[j]));
            beta[[t, i]] = v;
        }
    }
    beta
}

/// `log Σ_paths exp(score)` by the forward recursion.
pub fn crf_log_partition(emissions: &Array2<f64>, crf: &CrfParams) -> Result<f64> {
    crf.check(emissions)?;
    let alpha = forward(emissions, crf);
    let last = alpha.row(emissions.nrows() - 1);
    Ok(logsumexp((0..crf.num_tags()).map(|j| last[j] + crf.end[j])))
}

pub fn crf_nll(emissions: &Array2<f64>, gold: &[usize], crf: &CrfParams) -> Result<f64> {
    Ok(crf_log_partition(emissions, crf)? - crf_score(emissions, gold, crf)?)
}

/// NLL and its gradient with respect to every potential, from
/// forward-backward marginals.
pub fn crf_nll_grads(emissions: &Array2<f64>, gold: &[usize], crf: &CrfParams) -> Result<CrfGrads> {
    let score = crf_score(emissions, gold, crf)?;
    let (len, nt) = emissions.dim();
    let alpha = forward(emissions, crf);
    let beta = backward(emissions, crf);
    let log_z = logsumexp((0..nt).map(|j| alpha[[len - 1, j]] + crf.end[j]));

    let mut d_em = Array2::zeros((len, nt));
    for t in 0..len {
        for j in 0..nt {
            d_em[[t, j]] = (alpha[[t, j]] + beta[[t, j]] - log_z).exp();
        }
    }
    let mut d_start = d_em.row(0).to_owned();
    let mut d_end = d_em.row(len - 1).to_owned();
    let mut d_trans = Array2::zeros((nt, nt));
    for t in 0..len.saturating_sub(1) {
        for i in 0..nt {
            for j in 0..nt {
                let lp = alpha[[t, i]] + crf.transitions[[i, j]] + emissions[[t + 1, j]] + beta[[t + 1, j]] - log_z;
                d_trans[[i, j]] += lp.exp();
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        d_em[[t, y]] -= 1.0;
        if t > 0 {
            d_trans[[gold[t - 1], y]] -= 1.0;
        }
    }
    d_start[gold[0]] -= 1.0;
    d_end[gold[len - 1]] -= 1.0;
    Ok(CrfGrads {
        nll: log_z - score,
        emissions: d_em,
        transitions: d_trans,
        start: d_start,
        end: d_end,
    })
}

/// Highest-scoring tag path. Among equal scores the lowest tag id wins, both
/// for the final tag and for every back-pointer.
pub fn crf_viterbi(emissions: &Array2<f64>, crf: &CrfParams) -> Result<Vec<usize>> {
    crf.check(emissions)?;
    let (len, nt) = emissions.dim();
    let mut delta: Vec<f64> = (0..nt).map(|j| crf.start[j] + emissions[[0, j]]).collect();
    let mut back = vec![vec![0usize; nt]; len];
    for t in 1..len {
        let mut next = vec![0.0; nt];
        for j in 0..nt {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (i, &d) in delta.iter().enumerate() {
                let v = d + crf.transitions[[i, j]];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + emissions[[t, j]];
            back[t][j] = arg;
        }
        delta = next;
    }
    let (mut best, mut last) = (f64::NEG_INFINITY, 0);
    for (j, &d) in delta.iter().enumerate() {
        if d + crf.end[j] > best {
            best = d + crf.end[j];
            last = j;
        }
    }
    let mut path = vec![last; len];
    for t in (1..len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}
