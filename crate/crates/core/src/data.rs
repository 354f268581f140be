//! Hierarchical Gaussian-mixture data and CSV interchange.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// `(y^1, ..., y^K)`, finest first, 0-based class indices.
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub hierarchy: LabelHierarchy,
    pub split: Split,
    pub dim: usize,
}

/// Noise level of the default benchmark, calibrated with a multinomial
/// logistic-regression probe (see `tests/calibration.rs`).
pub const DEFAULT_NOISE_SIGMA: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    /// Per-level center spread, coarsest level first.
    pub center_scales: Vec<f64>,
    pub seed: u64,
}

impl SyntheticConfig {
    /// The `[8, 4, 2]` benchmark: 16 features, 100 train and 100 test
    /// samples per fine class.
    pub fn benchmark(seed: u64) -> Self {
        SyntheticConfig {
            dim: 16,
            train_per_class: 100,
            test_per_class: 100,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            center_scales: default_center_scales(3),
            seed,
        }
    }
}

fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `(2^{K-1}, ..., 2, 1)`: each level's spread halves going finer.
pub fn default_center_scales(levels: usize) -> Vec<f64> {
    (0..levels).rev().map(|i| 2f64.powi(i as i32)).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(|s| s.features.as_slice())
    }

    pub fn labels(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    /// Checks dimensions and that every chain follows the hierarchy.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: s.features.len(),
                });
            }
            if !self.hierarchy.is_consistent_chain(&s.labels) {
                return Err(Error::InconsistentChain {
                    line: i + 2,
                    chain: s.labels.clone(),
                });
            }
        }
        Ok(())
    }

    /// Re-derives coarse labels from the fine labels under `hierarchy`.
    pub fn relabel(&self, hierarchy: &LabelHierarchy) -> Result<Dataset> {
        if hierarchy.fine_size() != self.hierarchy.fine_size() {
            return Err(Error::HierarchyMismatch(format!(
                "{} fine classes vs {}",
                hierarchy.fine_size(),
                self.hierarchy.fine_size()
            )));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    features: s.features.clone(),
                    labels: hierarchy.backtrack(s.labels[0])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            hierarchy: hierarchy.clone(),
            split: self.split,
            dim: self.dim,
        })
    }

    /// Removes 1-based `level` from the hierarchy and from every label chain.
    pub fn drop_level(&self, level: usize) -> Result<Dataset> {
        let hierarchy = self.hierarchy.drop_level(level)?;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut labels = s.labels.clone();
                labels.remove(level - 1);
                Sample {
                    features: s.features.clone(),
                    labels,
                }
            })
            .collect();
        Ok(Dataset {
            samples,
            hierarchy,
            split: self.split,
            dim: self.dim,
        })
    }

    pub fn to_csv_string(&self) -> String {
        let k = self.hierarchy.num_levels();
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim)
            .map(|i| format!("f{i}"))
            .chain((1..=k).map(|l| format!("y{l}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            for v in &s.features {
                // Display prints the shortest round-tripping decimal, never exponents.
                write!(out, "{v},").expect("writing to a String");
            }
            let labels: Vec<String> = s.labels.iter().map(|y| y.to_string()).collect();
            out.push_str(&labels.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Hierarchical Gaussian mixture: coarsest centers at scale `s_K`, every
/// child center offset from its parent at its own level's scale, samples
/// drawn around fine centers with isotropic noise. Train and test samples
/// are separate draws.
pub fn generate_synthetic(hier: &LabelHierarchy, cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    hier.validate()?;
    let k = hier.num_levels();
    let scales = &cfg.center_scales;
    let decreasing = scales.windows(2).all(|w| w[0] > w[1]);
    if scales.len() != k || !decreasing || scales.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::InvalidScales(scales.clone()));
    }
    if cfg.dim < k {
        return Err(Error::InvalidConfig(format!(
            "feature dimension {} below the number of levels {k}",
            cfg.dim
        )));
    }
    if !cfg.noise_sigma.is_finite() || cfg.noise_sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "noise sigma must be positive, got {}",
            cfg.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gauss = |scale: f64| -> Vec<f64> { (0..cfg.dim).map(|_| scale * standard_normal(&mut rng)).collect() };
    // centers[level0][class]; scales are listed coarsest first.
    let mut centers: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    centers[k - 1] = (0..hier.level_size(k)).map(|_| gauss(scales[0])).collect();
    for level0 in (0..k - 1).rev() {
        let scale = scales[k - 1 - level0];
        let map = &hier.parent_maps()[level0];
        centers[level0] = map
            .iter()
            .map(|&p| {
                let offset = gauss(scale);
                centers[level0 + 1][p].iter().zip(offset).map(|(c, o)| c + o).collect()
            })
            .collect();
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut draw = |per_class: usize, split: Split| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(per_class * hier.fine_size());
        for (fine, center) in centers[0].iter().enumerate() {
            let labels = hier.backtrack(fine)?;
            for _ in 0..per_class {
                let features = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
                samples.push(Sample {
                    features,
                    labels: labels.clone(),
                });
            }
        }
        Ok(Dataset {
            samples,
            hierarchy: hier.clone(),
            split,
            dim: cfg.dim,
        })
    };
    let train = draw(cfg.train_per_class, Split::Train)?;
    let test = draw(cfg.test_per_class, Split::Test)?;
    Ok((train, test))
}

/// Parses a `f0..f{d-1},y1..yK` CSV and validates every chain against `hier`.
pub fn load_csv(path: impl AsRef<Path>, hier: &LabelHierarchy, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, hier, split)
}

pub fn parse_csv(text: &str, hier: &LabelHierarchy, split: Split) -> Result<Dataset> {
    let k = hier.num_levels();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
        Some(r) => r.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?,
    };
    if header.len() < k + 1 {
        return Err(Error::DimensionMismatch {
            expected: k + 1,
            found: header.len(),
        });
    }
    let dim = header.len() - k;
    for (i, name) in header.iter().enumerate() {
        let expected = if i < dim {
            format!("f{i}")
        } else {
            format!("y{}", i - dim + 1)
        };
        if name.trim() != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {i} is {name:?}, expected {expected:?}"),
            });
        }
    }
    let mut samples = Vec::new();
    for record in records {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != dim + k {
            return Err(Error::DimensionMismatch {
                expected: dim + k,
                found: record.len(),
            });
        }
        let features = record
            .iter()
            .take(dim)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("{f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let labels = record
            .iter()
            .skip(dim)
            .map(|f| {
                f.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line,
                    message: format!("label {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        if !hier.is_consistent_chain(&labels) {
            return Err(Error::InconsistentChain { line, chain: labels });
        }
        samples.push(Sample { features, labels });
    }
    Ok(Dataset {
        samples,
        hierarchy: hier.clone(),
        split,
        dim,
    })
}
