//! Hierarchical cross-entropy, the transition confusion loss, and their sum.
//!
//! Both terms are sums over samples. [`LossBreakdown`] keeps the summed
//! values and reports per-sample means for logging; the optimizer works on
//! the per-sample mean of the total.

use serde::{Deserialize, Serialize};

use crate::diff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Mode, PredictionChain, TapeChain};

/// Trade-off weight used when none is configured.
pub const DEFAULT_LAMBDA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch mean of the cross-entropy at each level, finest first.
    pub ce_per_level: Vec<f64>,
    /// Sum over samples and levels.
    pub ce_total: f64,
    /// Sum over samples of the column-averaged negative entropies.
    pub conf_total: f64,
    pub lambda: f64,
    /// `ce_total + lambda * conf_total`.
    pub total: f64,
    pub batch_size: usize,
}

impl LossBreakdown {
    pub fn new(ce_level_sums: &[f64], conf_total: f64, lambda: f64, batch_size: usize) -> Result<Self> {
        let ce_total: f64 = ce_level_sums.iter().sum();
        let total = total_loss(ce_total, conf_total, lambda)?;
        let n = batch_size.max(1) as f64;
        Ok(LossBreakdown {
            ce_per_level: ce_level_sums.iter().map(|s| s / n).collect(),
            ce_total,
            conf_total,
            lambda,
            total,
            batch_size,
        })
    }

    pub fn mean_total(&self) -> f64 {
        self.total / self.batch_size.max(1) as f64
    }

    pub fn mean_ce(&self) -> f64 {
        self.ce_total / self.batch_size.max(1) as f64
    }

    pub fn mean_conf(&self) -> f64 {
        self.conf_total / self.batch_size.max(1) as f64
    }
}

/// `L = L_CE + lambda * L_Conf`.
pub fn total_loss(ce: f64, conf: f64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(ce + lambda * conf)
}

/// Summed cross-entropy over a batch, returned with its per-level sums.
pub fn hierarchical_ce(chains: &[PredictionChain], labels: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
    if chains.len() != labels.len() {
        return Err(Error::shape(
            "hierarchical_ce",
            format!("{} predictions for {} label chains", chains.len(), labels.len()),
        ));
    }
    let levels = chains.first().map(|c| c.probs.len()).unwrap_or(0);
    let mut per_level = vec![0.0; levels];
    for (chain, y) in chains.iter().zip(labels) {
        if chain.probs.len() != levels {
            return Err(Error::shape("hierarchical_ce", "chains with different depths"));
        }
        if y.len() != levels {
            return Err(Error::InvalidChain { chain: y.clone() });
        }
        for ((acc, p), &label) in per_level.iter_mut().zip(&chain.probs).zip(y) {
            if label >= p.len() {
                return Err(Error::InvalidChain { chain: y.clone() });
            }
            *acc += diff::cross_entropy_index(p, label)?;
        }
    }
    Ok((per_level.iter().sum(), per_level))
}

/// Sum over samples and transition matrices of the column-mean negative entropy.
pub fn confusion_loss(chains: &[PredictionChain]) -> Result<f64> {
    let mut total = 0.0;
    for chain in chains {
        if !chain.mode.has_transitions() {
            return Err(Error::ModeMismatch {
                op: "confusion_loss",
                mode: chain.mode.to_string(),
            });
        }
        for t in &chain.transitions {
            total += diff::column_neg_entropy_mean(t)?;
        }
    }
    Ok(total)
}

/// Value-level breakdown for a batch of chains.
pub fn breakdown(chains: &[PredictionChain], labels: &[Vec<usize>], lambda: f64) -> Result<LossBreakdown> {
    let (_, per_level) = hierarchical_ce(chains, labels)?;
    let conf = match chains.first() {
        Some(c) if c.mode.has_transitions() => confusion_loss(chains)?,
        _ => 0.0,
    };
    LossBreakdown::new(&per_level, conf, lambda, chains.len())
}

/// Loss nodes recorded for one sample.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub ce: Vec<Var>,
    pub conf: Option<Var>,
}

/// Records every cross-entropy term and, for modes with transition
/// matrices, the confusion term of one sample.
pub fn record_sample_loss(tape: &mut Tape, chain: &TapeChain, labels: &[usize]) -> Result<SampleLoss> {
    if labels.len() != chain.probs.len() {
        return Err(Error::InvalidChain { chain: labels.to_vec() });
    }
    let ce = chain
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| tape.cross_entropy(p, y))
        .collect::<Result<Vec<_>>>()?;
    let conf = if chain.mode.has_transitions() && !chain.transitions.is_empty() {
        let terms = chain
            .transitions
            .iter()
            .map(|&t| tape.column_neg_entropy_mean(t))
            .collect::<Result<Vec<_>>>()?;
        Some(tape.sum(&terms)?)
    } else {
        None
    };
    Ok(SampleLoss { ce, conf })
}

/// Mean over the batch of `sum_k CE + lambda * conf`, as a tape node.
pub fn record_batch_objective(tape: &mut Tape, samples: &[SampleLoss], lambda: f64) -> Result<Var> {
    total_loss(0.0, 0.0, lambda)?;
    let mut terms = Vec::new();
    let mut conf_terms = Vec::new();
    for s in samples {
        terms.extend_from_slice(&s.ce);
        conf_terms.extend(s.conf);
    }
    if !conf_terms.is_empty() && lambda != 0.0 {
        let conf = tape.sum(&conf_terms)?;
        terms.push(tape.scale(conf, lambda)?);
    }
    let total = tape.sum(&terms)?;
    tape.scale(total, 1.0 / samples.len().max(1) as f64)
}

/// Mode-level sanity check used by callers that need a confusion term.
pub fn require_transitions(mode: Mode) -> Result<()> {
    if mode.has_transitions() {
        Ok(())
    } else {
        Err(Error::ModeMismatch {
            op: "confusion_loss",
            mode: mode.to_string(),
        })
    }
}
