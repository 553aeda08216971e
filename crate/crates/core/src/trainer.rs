//! Training-signal construction for utility-oriented rewriting.
//!
//! Nothing here updates model parameters. Rejection sampling scores sampled
//! rewrites by retrieval utility and keeps the best one as a supervision
//! target; the GRPO functions evaluate rewards, group-normalized advantages
//! and the clipped surrogate loss from token log-probabilities produced by
//! an external training stack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{QrelsTable, RankedList};
use crate::error::{Error, Result};
use crate::metrics::{ndcg_at_k, recall_at_k, utility_delta, NDCG_CUTOFF, RECALL_CUTOFF};
use crate::rewrite::RewriteCandidate;

/// Standard deviation below which a group is treated as having no signal.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub query_id: String,
    pub instruction: String,
    pub query: String,
    pub passages: Vec<String>,
    pub target: String,
    pub utility: f64,
    pub retriever: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: RewriteCandidate,
    /// Utility of every candidate, in sample order. Failed retrievals are
    /// `-inf`.
    pub utilities: Vec<f64>,
}

/// Scores each candidate by the NDCG@10 change its ranking produces relative
/// to `baseline` and returns the argmax, ties going to the lowest sample
/// index. A candidate whose retrieval fails gets utility `-inf`.
pub fn rejection_sample_best<F>(
    candidates: &[RewriteCandidate],
    retrieve: F,
    baseline: &RankedList,
    qrels: &QrelsTable,
) -> Result<Selection>
where
    F: Fn(&str) -> Result<RankedList> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Invalid(format!(
            "no candidates to select from for `{}`",
            baseline.query_id()
        )));
    }
    let mut ordered: Vec<&RewriteCandidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.sample_index);

    let utilities: Vec<f64> = ordered
        .par_iter()
        .map(|c| match retrieve(&c.text) {
            Ok(ranking) => utility_delta(&ranking, baseline, qrels),
            Err(e) => {
                warn!(query_id = %baseline.query_id(), sample_index = c.sample_index, error = %e, "candidate retrieval failed");
                Ok(f64::NEG_INFINITY)
            }
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, &u) in utilities.iter().enumerate() {
        if u > utilities[best] {
            best = i;
        }
    }
    Ok(Selection {
        best: ordered[best].clone(),
        utilities,
    })
}

/// Keeps records with `utility >= min_utility`, sorted by utility descending
/// (ties by query id, then target), truncated to `top_n`.
pub fn build_sft_dataset<I>(records: I, top_n: usize, min_utility: f64) -> Vec<SftRecord>
where
    I: IntoIterator<Item = SftRecord>,
{
    let mut kept: Vec<SftRecord> = records
        .into_iter()
        .filter(|r| r.utility >= min_utility)
        .collect();
    kept.sort_by(|a, b| {
        b.utility
            .total_cmp(&a.utility)
            .then_with(|| a.query_id.cmp(&b.query_id))
            .then_with(|| a.target.cmp(&b.target))
    });
    kept.truncate(top_n);
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Weight of Recall@100 in the reward.
    pub lambda: f64,
    /// Clip range of the importance ratio.
    pub epsilon: f64,
    /// KL penalty weight.
    pub kl_beta: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            lambda: 1.0,
            epsilon: 0.2,
            kl_beta: 1e-3,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.epsilon > 0.0) || !(self.kl_beta >= 0.0) {
            return Err(Error::Config(format!(
                "invalid GRPO settings: lambda={}, epsilon={}, kl_beta={}",
                self.lambda, self.epsilon, self.kl_beta
            )));
        }
        Ok(())
    }
}

/// `NDCG@10 + lambda * Recall@100`.
pub fn compute_reward(ranking: &RankedList, qrels: &QrelsTable, config: &GrpoConfig) -> f64 {
    ndcg_at_k(ranking, qrels, NDCG_CUTOFF)
        + config.lambda * recall_at_k(ranking, qrels, RECALL_CUTOFF)
}

/// Group-normalized advantages `(r - mean) / std` with the population
/// standard deviation. Groups with `std < 1e-8` get all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Invalid(format!(
            "advantages need a group of at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Invalid("rewards must be finite".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < ADVANTAGE_STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub reward: f64,
    pub logp_theta: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    /// Optional reward components, checked against `reward` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub samples: Vec<RolloutSample>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Invalid(format!(
                "a rollout group needs at least 2 samples, got {}",
                self.samples.len()
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let len = s.logp_theta.len();
            if len == 0 || s.logp_old.len() != len || s.logp_ref.len() != len {
                return Err(Error::Invalid(format!(
                    "sample {i}: log-prob lists must be non-empty and of equal length ({}/{}/{})",
                    len,
                    s.logp_old.len(),
                    s.logp_ref.len()
                )));
            }
            let all = s.logp_theta.iter().chain(&s.logp_old).chain(&s.logp_ref);
            if all.clone().any(|&lp| !(lp <= 0.0) || !lp.is_finite()) {
                return Err(Error::Invalid(format!(
                    "sample {i}: log-probs must be finite and <= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }
}

/// Per-token KL estimator `exp(d) - d - 1` with `d = logp_ref - logp_theta`.
pub fn kl_estimate(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

/// Clipped-surrogate GRPO loss with a KL penalty toward the reference policy:
///
/// `-(1/|G|) sum_i (1/|y_i|) sum_t min(r A_i, clip(r, 1-eps, 1+eps) A_i)`
/// `+ beta * (1/|G|) sum_i (1/|y_i|) sum_t KL_t`,
///
/// where `r = exp(logp_theta - logp_old)` per token.
pub fn grpo_loss(group: &RolloutGroup, advantages: &[f64], config: &GrpoConfig) -> Result<f64> {
    group.validate()?;
    config.validate()?;
    if advantages.len() != group.samples.len() {
        return Err(Error::Invalid(format!(
            "{} advantages for {} samples",
            advantages.len(),
            group.samples.len()
        )));
    }
    let (lo, hi) = (1.0 - config.epsilon, 1.0 + config.epsilon);
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for (s, &adv) in group.samples.iter().zip(advantages) {
        let len = s.logp_theta.len() as f64;
        let mut s_sur = 0.0;
        let mut s_kl = 0.0;
        for t in 0..s.logp_theta.len() {
            let ratio = (s.logp_theta[t] - s.logp_old[t]).exp();
            s_sur += (ratio * adv).min(ratio.clamp(lo, hi) * adv);
            s_kl += kl_estimate(s.logp_theta[t], s.logp_ref[t]);
        }
        surrogate += s_sur / len;
        kl += s_kl / len;
    }
    let g = group.samples.len() as f64;
    Ok(-(surrogate / g) + config.kl_beta * (kl / g))
}

/// Sequence negative log-likelihood: `-sum(logp)`.
pub fn sft_nll(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Invalid("NLL needs at least one token".into()));
    }
    if let Some(bad) = token_logprobs.iter().find(|&&lp| !(lp <= 0.0)) {
        return Err(Error::Invalid(format!(
            "log-probability {bad} is positive or NaN"
        )));
    }
    Ok(-token_logprobs.iter().sum::<f64>())
}

/// One line of a rollout file: a group plus the values an external trainer
/// claims to have computed for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub id: String,
    pub samples: Vec<RolloutSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutCheck {
    pub id: String,
    pub advantages: Vec<f64>,
    pub loss: f64,
    /// Largest deviation between recomputed and claimed values.
    pub max_error: f64,
    pub mismatches: Vec<String>,
}

impl RolloutCheck {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recomputes rewards (when components are given), advantages and loss for
/// a rollout record and compares them with its claimed values.
pub fn check_rollout(
    record: &RolloutRecord,
    config: &GrpoConfig,
    tolerance: f64,
) -> Result<RolloutCheck> {
    let group = RolloutGroup {
        samples: record.samples.clone(),
    };
    group
        .validate()
        .map_err(|e| Error::Invalid(format!("group `{}`: {e}", record.id)))?;
    let mut mismatches = Vec::new();
    let mut max_error: f64 = 0.0;
    let mut compare = |mismatches: &mut Vec<String>, what: String, got: f64, claimed: f64| {
        let err = (got - claimed).abs();
        max_error = max_error.max(err);
        if !(err <= tolerance) {
            mismatches.push(format!("{what}: computed {got}, claimed {claimed}"));
        }
    };
    for (i, s) in record.samples.iter().enumerate() {
        if let (Some(n), Some(r)) = (s.ndcg, s.recall) {
            compare(
                &mut mismatches,
                format!("reward[{i}]"),
                n + config.lambda * r,
                s.reward,
            );
        }
    }
    let advantages = compute_advantages(&group.rewards())?;
    if let Some(claimed) = &record.advantages {
        if claimed.len() != advantages.len() {
            mismatches.push(format!(
                "advantages: {} claimed for {} samples",
                claimed.len(),
                advantages.len()
            ));
        } else {
            for (i, (a, c)) in advantages.iter().zip(claimed).enumerate() {
                compare(&mut mismatches, format!("advantage[{i}]"), *a, *c);
            }
        }
    }
    let loss = grpo_loss(&group, &advantages, config)?;
    if let Some(claimed) = record.loss {
        compare(&mut mismatches, "loss".into(), loss, claimed);
    }
    Ok(RolloutCheck {
        id: record.id.clone(),
        advantages,
        loss,
        max_error,
        mismatches,
    })
}
