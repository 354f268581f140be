//! Per-level accuracy, confusion matrices, per-class tables and mistake severity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::model::{LhtModel, Mode};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Decoded label chain for one input. The `vanilla` baseline backtracks its
/// fine prediction; every other mode takes the argmax at each level.
pub fn predict(model: &LhtModel, x: &[f64]) -> Result<Vec<usize>> {
    let chain = model.forward(x)?;
    match model.mode() {
        Mode::Vanilla => model.hierarchy().backtrack(argmax(&chain.probs[0])),
        _ => Ok(chain.probs.iter().map(|p| argmax(p)).collect()),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeverityHistogram {
    /// `counts[h - 1]` mistakes whose lowest common ancestor sits at height `h`.
    pub counts: Vec<usize>,
    pub mistakes: usize,
    /// Mean height over mistakes, 0 when there are none.
    pub mean: f64,
}

/// LCA heights of every wrong fine prediction.
pub fn mistake_severity(hier: &LabelHierarchy, truth: &[usize], predicted: &[usize]) -> SeverityHistogram {
    let k = hier.num_levels();
    let mut counts = vec![0; k];
    let mut total = 0usize;
    let mut mistakes = 0usize;
    for (&t, &p) in truth.iter().zip(predicted) {
        if t != p {
            let h = hier.lca_height(t, p);
            counts[h - 1] += 1;
            total += h;
            mistakes += 1;
        }
    }
    let mean = if mistakes == 0 {
        0.0
    } else {
        total as f64 / mistakes as f64
    };
    SeverityHistogram { counts, mistakes, mean }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hierarchy_hash: String,
    pub num_samples: usize,
    /// Fraction correct per level, finest first.
    pub acc: Vec<f64>,
    /// Unweighted mean of `acc`.
    pub avg_acc: f64,
    /// `per_class_acc[k][c]`, 0 for classes without samples.
    pub per_class_acc: Vec<Vec<f64>>,
    pub class_counts: Vec<Vec<usize>>,
    /// `confusion[k][truth][predicted]`.
    pub confusion: Vec<Vec<Vec<usize>>>,
    pub severity: SeverityHistogram,
}

impl MetricsReport {
    /// Builds a report from true and decoded label chains.
    pub fn from_predictions(hier: &LabelHierarchy, truth: &[Vec<usize>], predicted: &[Vec<usize>]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "metrics",
                format!("{} label chains, {} predictions", truth.len(), predicted.len()),
            ));
        }
        let sizes = hier.level_sizes();
        let k = sizes.len();
        let mut confusion: Vec<Vec<Vec<usize>>> = sizes.iter().map(|&c| vec![vec![0; c]; c]).collect();
        for (t, p) in truth.iter().zip(predicted) {
            if t.len() != k || p.len() != k {
                return Err(Error::InvalidChain { chain: t.clone() });
            }
            for level0 in 0..k {
                if t[level0] >= sizes[level0] || p[level0] >= sizes[level0] {
                    return Err(Error::IndexOutOfRange {
                        level: level0 + 1,
                        index: t[level0].max(p[level0]),
                        size: sizes[level0],
                    });
                }
                confusion[level0][t[level0]][p[level0]] += 1;
            }
        }
        let n = truth.len();
        let mut acc = Vec::with_capacity(k);
        let mut per_class_acc = Vec::with_capacity(k);
        let mut class_counts = Vec::with_capacity(k);
        for m in &confusion {
            let correct: usize = (0..m.len()).map(|c| m[c][c]).sum();
            acc.push(if n == 0 { 0.0 } else { correct as f64 / n as f64 });
            let counts: Vec<usize> = m.iter().map(|row| row.iter().sum()).collect();
            per_class_acc.push(
                counts
                    .iter()
                    .enumerate()
                    .map(|(c, &cnt)| if cnt == 0 { 0.0 } else { m[c][c] as f64 / cnt as f64 })
                    .collect(),
            );
            class_counts.push(counts);
        }
        let avg_acc = acc.iter().sum::<f64>() / k as f64;
        let fine_truth: Vec<usize> = truth.iter().map(|t| t[0]).collect();
        let fine_pred: Vec<usize> = predicted.iter().map(|p| p[0]).collect();
        Ok(MetricsReport {
            hierarchy_hash: hier.structure_hash(),
            num_samples: n,
            acc,
            avg_acc,
            per_class_acc,
            class_counts,
            confusion,
            severity: mistake_severity(hier, &fine_truth, &fine_pred),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Decoded predictions for every sample of `dataset`.
pub fn predict_all(model: &LhtModel, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
    check_hierarchy(model.hierarchy(), &dataset.hierarchy)?;
    dataset.samples.iter().map(|s| predict(model, &s.features)).collect()
}

fn check_hierarchy(a: &LabelHierarchy, b: &LabelHierarchy) -> Result<()> {
    if a.structure_hash() != b.structure_hash() {
        return Err(Error::HierarchyMismatch(format!(
            "levels {:?} vs {:?} or differing parent maps",
            a.level_sizes(),
            b.level_sizes()
        )));
    }
    Ok(())
}

pub fn evaluate(model: &LhtModel, dataset: &Dataset) -> Result<MetricsReport> {
    let predicted = predict_all(model, dataset)?;
    MetricsReport::from_predictions(&dataset.hierarchy, &dataset.labels(), &predicted)
}

/// Accuracy at 1-based `level` of `full` obtained by backtracking fine
/// predictions, for models trained without that level.
pub fn backtracked_accuracy(
    full: &LabelHierarchy,
    fine_pred: &[usize],
    truth: &[Vec<usize>],
    level: usize,
) -> Result<f64> {
    if level == 0 || level > full.num_levels() {
        return Err(Error::InvalidLevel {
            level,
            reason: "outside the hierarchy".into(),
        });
    }
    if fine_pred.len() != truth.len() {
        return Err(Error::shape(
            "backtracked_accuracy",
            "prediction and label counts differ",
        ));
    }
    let mut correct = 0usize;
    for (&p, t) in fine_pred.iter().zip(truth) {
        if full.ancestor(1, p, level) == t[level - 1] {
            correct += 1;
        }
    }
    Ok(if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    /// `delta[k][c] = acc_a - acc_b` for class `c` at level `k`.
    pub delta: Vec<Vec<f64>>,
    pub class_counts: Vec<Vec<usize>>,
}

/// Per-class accuracy differences between two reports on the same data.
pub fn per_class_delta(a: &MetricsReport, b: &MetricsReport) -> Result<ClassDelta> {
    if a.hierarchy_hash != b.hierarchy_hash || a.class_counts != b.class_counts {
        return Err(Error::HierarchyMismatch(
            "reports cover different hierarchies or datasets".into(),
        ));
    }
    let delta = a
        .per_class_acc
        .iter()
        .zip(&b.per_class_acc)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect();
    Ok(ClassDelta {
        delta,
        class_counts: a.class_counts.clone(),
    })
}

impl ClassDelta {
    /// `level,class,count,delta` rows, levels 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,class,count,delta\n");
        for (k, (row, counts)) in self.delta.iter().zip(&self.class_counts).enumerate() {
            for (c, (d, n)) in row.iter().zip(counts).enumerate() {
                writeln!(out, "{},{c},{n},{d}", k + 1).expect("writing to a String");
            }
        }
        out
    }

    /// Count-weighted mean delta at 0-based `level0`.
    pub fn weighted(&self, level0: usize) -> f64 {
        let n: usize = self.class_counts[level0].iter().sum();
        if n == 0 {
            return 0.0;
        }
        self.delta[level0]
            .iter()
            .zip(&self.class_counts[level0])
            .map(|(d, &c)| d * c as f64)
            .sum::<f64>()
            / n as f64
    }
}
