//! Threshold membership attacks against a plain audited model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::RecordSet;
use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy, predict_logits};
use crate::nets::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub sample_id: usize,
    /// Higher means more member-like.
    pub score: f64,
    pub true_membership: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ScoreAboveIsMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub threshold: f64,
    pub direction: Direction,
    pub calibration_accuracy: f64,
    /// Set when every calibration score was identical.
    pub degenerate: bool,
}

impl ThresholdRule {
    pub fn predicts_member(&self, score: f64) -> bool {
        match self.direction {
            Direction::ScoreAboveIsMember => score > self.threshold,
        }
    }
}

/// Per-row log-softmax in f64.
fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let lse = m + row.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z as f64 - lse).collect()
}

/// Negative cross-entropy of each row against its label.
pub fn loss_scores(logits: &[f32], num_classes: usize, labels: &[usize]) -> Vec<f64> {
    labels.iter().enumerate().map(|(i, &y)| log_softmax_row(&logits[i * num_classes..(i + 1) * num_classes])[y]).collect()
}

/// Largest softmax probability of each row.
pub fn confidence_scores(logits: &[f32], num_classes: usize) -> Vec<f64> {
    logits.chunks(num_classes).map(|row| log_softmax_row(row).into_iter().fold(f64::NEG_INFINITY, f64::max).exp()).collect()
}

fn score_sets(
    model: &Backbone<f32>,
    members: &RecordSet,
    externals: &RecordSet,
    f: impl Fn(&[f32], usize, &[usize]) -> Vec<f64>,
) -> Result<Vec<AttackScore>> {
    let k = model.spec.num_classes;
    let mut out = Vec::with_capacity(members.len() + externals.len());
    for (set, membership) in [(members, 1u8), (externals, 0u8)] {
        let ids = set.ids();
        let labels: Vec<usize> = set.records.iter().map(|r| r.class_label).collect();
        let logits = predict_logits(model, &set.pool, &ids)?;
        for (id, score) in ids.into_iter().zip(f(&logits, k, &labels)) {
            if !score.is_finite() {
                return Err(Error::Numeric(format!("non-finite attack score for sample {id}")));
            }
            out.push(AttackScore { sample_id: id, score, true_membership: membership });
        }
    }
    Ok(out)
}

/// Loss-threshold attack: score = −cross-entropy of the true class.
pub fn score_loss_attack(model: &Backbone<f32>, members: &RecordSet, externals: &RecordSet) -> Result<Vec<AttackScore>> {
    score_sets(model, members, externals, loss_scores)
}

/// Confidence-threshold attack: score = maximum softmax probability.
pub fn score_confidence_attack(model: &Backbone<f32>, members: &RecordSet, externals: &RecordSet) -> Result<Vec<AttackScore>> {
    score_sets(model, members, externals, |l, k, _| confidence_scores(l, k))
}

/// Picks the cut maximizing balanced accuracy among midpoints of adjacent
/// distinct scores (plus one cut below every score). Ties go to the
/// smaller threshold.
pub fn calibrate_threshold(scores: &[AttackScore]) -> Result<ThresholdRule> {
    let pos = scores.iter().filter(|s| s.true_membership == 1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("calibration needs both members and externals".into()));
    }
    if scores.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Numeric("calibration scores must be finite".into()));
    }
    let mut sorted: Vec<(f64, u8)> = scores.iter().map(|s| (s.score, s.true_membership)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.first().map(|s| s.0) == sorted.last().map(|s| s.0) {
        log::warn!("all calibration scores are identical; the threshold rule is at chance");
        return Ok(ThresholdRule {
            threshold: sorted[0].0,
            direction: Direction::ScoreAboveIsMember,
            calibration_accuracy: 0.5,
            degenerate: true,
        });
    }
    // Sweep upward: everything at or below the cut is predicted external.
    let (pos, neg) = (pos as f64, neg as f64);
    let (mut tp, mut tn) = (pos, 0.0);
    let mut best_thr = sorted[0].0 - 1.0;
    let mut best_acc = 0.5;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 == 1 {
                tp -= 1.0;
            } else {
                tn += 1.0;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let acc = 0.5 * (tp / pos + tn / neg);
        if acc > best_acc {
            best_acc = acc;
            best_thr = 0.5 * (v + sorted[i].0);
        }
    }
    Ok(ThresholdRule { threshold: best_thr, direction: Direction::ScoreAboveIsMember, calibration_accuracy: best_acc, degenerate: false })
}

/// Balanced accuracy of `rule` on evaluation scores.
pub fn evaluate_attack(rule: &ThresholdRule, scores: &[AttackScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("attack evaluation needs a nonempty EVAL set".into()));
    }
    if rule.degenerate {
        return Ok(0.5);
    }
    let pred: Vec<bool> = scores.iter().map(|s| rule.predicts_member(s.score)).collect();
    let truth: Vec<u8> = scores.iter().map(|s| s.true_membership).collect();
    balanced_accuracy(&pred, &truth)
}

pub fn write_scores_csv(path: &Path, scores: &[AttackScore]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_id,score,true_membership")?;
    let mut sorted = scores.to_vec();
    sorted.sort_by_key(|s| s.sample_id);
    for s in sorted {
        writeln!(f, "{},{:.9},{}", s.sample_id, s.score, s.true_membership)?;
    }
    f.flush()?;
    Ok(())
}
