//! K-level label taxonomies.
//!
//! Levels are numbered from 1 (finest) to K (coarsest) at every public
//! boundary. Storage is 0-based: `level_sizes[0]` is C_1 and `parents[0]`
//! maps level-1 classes to level-2 classes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// A validated K-level label taxonomy, described by parent maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelHierarchy {
    level_sizes: Vec<usize>,
    /// `parents[k][j]` is the parent (at level k+2) of class `j` at level k+1.
    parents: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<Vec<String>>>,
}

/// The 0/1 parent-indicator matrix between levels k-1 and k.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveTransitionMatrix {
    /// 1-based level of the rows (the coarser side of the pair).
    pub level: usize,
    pub matrix: Tensor,
}

impl LabelHierarchy {
    pub fn new(level_sizes: Vec<usize>, parents: Vec<Vec<usize>>) -> Result<Self> {
        let hier = LabelHierarchy {
            level_sizes,
            parents,
            level_names: None,
            class_names: None,
        };
        hier.validate()?;
        Ok(hier)
    }

    /// Groups consecutive classes evenly: class `j` at level k-1 goes to
    /// `j * C_k / C_{k-1}` at level k. For `[8, 4, 2]` this is `j / 2`.
    pub fn balanced(level_sizes: &[usize]) -> Result<Self> {
        let parents = level_sizes
            .windows(2)
            .map(|w| (0..w[0]).map(|j| j * w[1] / w[0]).collect())
            .collect();
        Self::new(level_sizes.to_vec(), parents)
    }

    pub fn with_names(
        mut self,
        level_names: Option<Vec<String>>,
        class_names: Option<Vec<Vec<String>>>,
    ) -> Result<Self> {
        if let Some(names) = &level_names {
            if names.len() != self.num_levels() {
                return Err(Error::DimensionMismatch {
                    expected: self.num_levels(),
                    found: names.len(),
                });
            }
        }
        if let Some(names) = &class_names {
            if names.len() != self.num_levels() {
                return Err(Error::DimensionMismatch {
                    expected: self.num_levels(),
                    found: names.len(),
                });
            }
            for (level, (names, &size)) in names.iter().zip(&self.level_sizes).enumerate() {
                if names.len() != size {
                    return Err(Error::InvalidLevel {
                        level: level + 1,
                        reason: format!("{} class names for {} classes", names.len(), size),
                    });
                }
            }
        }
        self.level_names = level_names;
        self.class_names = class_names;
        Ok(self)
    }

    /// Checks every taxonomy invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        let k = self.level_sizes.len();
        if k < 2 {
            return Err(Error::TooFewLevels(k));
        }
        for (i, w) in self.level_sizes.windows(2).enumerate() {
            if w[1] >= w[0] || w[1] == 0 {
                return Err(Error::NonDecreasingSizes {
                    level: i + 1,
                    size: w[0],
                    next: i + 2,
                    next_size: w[1],
                });
            }
        }
        if self.parents.len() != k - 1 {
            // A missing map leaves every class of that level without a parent.
            let level = self.parents.len().min(k - 1) + 1;
            return Err(Error::OrphanClass { level, class: 0 });
        }
        for (i, map) in self.parents.iter().enumerate() {
            let child_size = self.level_sizes[i];
            let parent_size = self.level_sizes[i + 1];
            if map.len() < child_size {
                return Err(Error::OrphanClass {
                    level: i + 1,
                    class: map.len(),
                });
            }
            if map.len() > child_size {
                return Err(Error::IndexOutOfRange {
                    level: i + 1,
                    index: child_size,
                    size: child_size,
                });
            }
            let mut has_child = vec![false; parent_size];
            for &p in map {
                if p >= parent_size {
                    return Err(Error::IndexOutOfRange {
                        level: i + 2,
                        index: p,
                        size: parent_size,
                    });
                }
                has_child[p] = true;
            }
            if let Some(class) = has_child.iter().position(|&c| !c) {
                return Err(Error::ChildlessParent { level: i + 2, class });
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    /// Class count of 1-based `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.level_sizes[level - 1]
    }

    pub fn fine_size(&self) -> usize {
        self.level_sizes[0]
    }

    /// Parent maps, finest first.
    pub fn parent_maps(&self) -> &[Vec<usize>] {
        &self.parents
    }

    pub fn level_names(&self) -> Option<&[String]> {
        self.level_names.as_deref()
    }

    pub fn class_names(&self) -> Option<&[Vec<String>]> {
        self.class_names.as_deref()
    }

    /// Parent at level `level + 1` of `class` at 1-based `level`.
    pub fn parent(&self, level: usize, class: usize) -> usize {
        self.parents[level - 1][class]
    }

    fn check_level(&self, level: usize, lo: usize) -> Result<()> {
        if level < lo || level > self.num_levels() {
            return Err(Error::InvalidLevel {
                level,
                reason: format!("expected {lo}..={}", self.num_levels()),
            });
        }
        Ok(())
    }

    /// T̃^k for 1-based `level` k in 2..=K: a C_k x C_{k-1} matrix with
    /// entry (i, j) equal to 1 iff class j at level k-1 has parent i.
    pub fn naive_transition(&self, level: usize) -> Result<NaiveTransitionMatrix> {
        self.check_level(level, 2)?;
        let rows = self.level_size(level);
        let cols = self.level_size(level - 1);
        let mut data = vec![0.0; rows * cols];
        for (j, &i) in self.parents[level - 2].iter().enumerate() {
            data[i * cols + j] = 1.0;
        }
        Ok(NaiveTransitionMatrix {
            level,
            matrix: Tensor::matrix(rows, cols, data)?,
        })
    }

    /// Full label chain `(y^1, ..., y^K)` for a fine label, as a 0-indexed vector.
    pub fn backtrack(&self, fine_label: usize) -> Result<Vec<usize>> {
        if fine_label >= self.fine_size() {
            return Err(Error::IndexOutOfRange {
                level: 1,
                index: fine_label,
                size: self.fine_size(),
            });
        }
        let mut chain = Vec::with_capacity(self.num_levels());
        let mut cur = fine_label;
        chain.push(cur);
        for map in &self.parents {
            cur = map[cur];
            chain.push(cur);
        }
        Ok(chain)
    }

    /// Ancestor of `class` (at 1-based `from`) at level `to >= from`.
    pub fn ancestor(&self, from: usize, class: usize, to: usize) -> usize {
        (from..to).fold(class, |c, level| self.parents[level - 1][c])
    }

    pub fn is_consistent_chain(&self, chain: &[usize]) -> bool {
        chain.len() == self.num_levels()
            && chain[0] < self.fine_size()
            && self.backtrack(chain[0]).map(|c| c == chain).unwrap_or(false)
    }

    /// Height of the lowest common ancestor of two fine classes: 0 when
    /// equal, h when they first meet at level h+1, K when they never meet.
    pub fn lca_height(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        if a == b {
            return 0;
        }
        for (h, map) in self.parents.iter().enumerate() {
            a = map[a];
            b = map[b];
            if a == b {
                return h + 1;
            }
        }
        self.num_levels()
    }

    /// Keeps level 1 fixed and redraws every parent map uniformly at random,
    /// resampling a map until each parent has at least one child.
    pub fn randomize(&self, seed: u64) -> LabelHierarchy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = self
            .level_sizes
            .windows(2)
            .map(|w| loop {
                let map: Vec<usize> = (0..w[0]).map(|_| rng.random_range(0..w[1])).collect();
                let mut seen = vec![false; w[1]];
                map.iter().for_each(|&p| seen[p] = true);
                if seen.iter().all(|&s| s) {
                    break map;
                }
            })
            .collect();
        LabelHierarchy {
            level_sizes: self.level_sizes.clone(),
            parents,
            level_names: self.level_names.clone(),
            class_names: None,
        }
    }

    /// Removes 1-based `level` (2..=K-1) and composes the adjacent parent maps.
    pub fn drop_level(&self, level: usize) -> Result<LabelHierarchy> {
        let k = self.num_levels();
        if level < 2 || level + 1 > k || k - 1 < 2 {
            return Err(Error::InvalidLevel {
                level,
                reason: format!("only interior levels 2..={} can be dropped", k - 1),
            });
        }
        let mut level_sizes = self.level_sizes.clone();
        level_sizes.remove(level - 1);
        let mut parents = self.parents.clone();
        let upper = parents.remove(level - 1);
        let composed = parents[level - 2].iter().map(|&p| upper[p]).collect();
        parents[level - 2] = composed;
        let level_names = self.level_names.clone().map(|mut n| {
            n.remove(level - 1);
            n
        });
        let class_names = self.class_names.clone().map(|mut n| {
            n.remove(level - 1);
            n
        });
        let hier = LabelHierarchy {
            level_sizes,
            parents,
            level_names,
            class_names,
        };
        hier.validate()?;
        Ok(hier)
    }

    /// Hex SHA-256 of the structural content (sizes and parent maps).
    pub fn structure_hash(&self) -> String {
        let canonical =
            serde_json::to_vec(&(&self.level_sizes, &self.parents)).expect("plain integer vectors serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hier: LabelHierarchy = serde_json::from_str(text)?;
        hier.validate()?;
        let LabelHierarchy {
            level_sizes,
            parents,
            level_names,
            class_names,
        } = hier;
        LabelHierarchy::new(level_sizes, parents)?.with_names(level_names, class_names)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced() -> LabelHierarchy {
        LabelHierarchy::balanced(&[8, 4, 2]).unwrap()
    }

    #[test]
    fn balanced_grouping_is_valid() {
        let h = balanced();
        assert_eq!(h.parent_maps()[0], vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(h.parent_maps()[1], vec![0, 0, 1, 1]);
        h.validate().unwrap();
    }

    #[test]
    fn equal_sizes_rejected() {
        let err = LabelHierarchy::new(vec![8, 4, 4], vec![vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 1, 2, 3]]).unwrap_err();
        assert!(matches!(err, Error::NonDecreasingSizes { level: 2, .. }), "{err}");
    }

    #[test]
    fn validation_errors() {
        let err = LabelHierarchy::new(vec![4, 2], vec![vec![0, 0, 1]]).unwrap_err();
        assert!(matches!(err, Error::OrphanClass { level: 1, class: 3 }));
        let err = LabelHierarchy::new(vec![4, 2], vec![vec![0, 0, 0, 0]]).unwrap_err();
        assert!(matches!(err, Error::ChildlessParent { level: 2, class: 1 }));
        let err = LabelHierarchy::new(vec![4, 2], vec![vec![0, 0, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { level: 2, index: 2, .. }));
        let err = LabelHierarchy::new(vec![4], vec![]).unwrap_err();
        assert!(matches!(err, Error::TooFewLevels(1)));
        let err = LabelHierarchy::new(vec![4, 2, 1], vec![vec![0, 0, 1, 1]]).unwrap_err();
        assert!(matches!(err, Error::OrphanClass { level: 2, .. }));
    }

    #[test]
    fn cub_shaped_hierarchy_is_valid() {
        // 200 species, 38 families, 13 orders with complete parent maps.
        let species: Vec<usize> = (0..200).map(|j| j % 38).collect();
        let families: Vec<usize> = (0..38).map(|j| j % 13).collect();
        LabelHierarchy::new(vec![200, 38, 13], vec![species, families]).unwrap();
    }

    #[test]
    fn naive_transition_for_four_families() {
        let h = LabelHierarchy::new(vec![4, 2], vec![vec![0, 0, 1, 1]]).unwrap();
        let t = h.naive_transition(2).unwrap().matrix;
        assert_eq!(t.data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!((t.rows(), t.cols()), (2, 4));
    }

    #[test]
    fn naive_transition_identity_slice() {
        // Square parent map; only reachable by bypassing validation.
        let h = LabelHierarchy {
            level_sizes: vec![3, 3],
            parents: vec![vec![0, 1, 2]],
            level_names: None,
            class_names: None,
        };
        let t = h.naive_transition(2).unwrap().matrix;
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn naive_transition_balanced_pairs() {
        let h = balanced();
        let t = h.naive_transition(2).unwrap().matrix;
        for j in 0..8 {
            for i in 0..4 {
                assert_eq!(t.get(i, j), if i == j / 2 { 1.0 } else { 0.0 });
            }
        }
        assert!(matches!(h.naive_transition(1), Err(Error::InvalidLevel { .. })));
        assert!(matches!(h.naive_transition(4), Err(Error::InvalidLevel { .. })));
    }

    #[test]
    fn backtrack_examples() {
        let h = balanced();
        assert_eq!(h.backtrack(5).unwrap(), vec![5, 2, 1]);
        assert_eq!(h.backtrack(0).unwrap(), vec![0, 0, 0]);
        assert!(matches!(h.backtrack(8), Err(Error::IndexOutOfRange { index: 8, .. })));
    }

    #[test]
    fn naive_matrices_map_one_hot_chains() {
        let h = balanced();
        for fine in 0..8 {
            let chain = h.backtrack(fine).unwrap();
            for k in 2..=3 {
                let t = h.naive_transition(k).unwrap().matrix;
                let mut onehot = vec![0.0; h.level_size(k - 1)];
                onehot[chain[k - 2]] = 1.0;
                let out = t.matvec(&onehot).unwrap();
                let mut expected = vec![0.0; h.level_size(k)];
                expected[chain[k - 1]] = 1.0;
                assert_eq!(out, expected);
            }
        }
    }

    #[test]
    fn randomize_is_deterministic_and_valid() {
        let h = balanced();
        let a = h.randomize(7);
        let b = h.randomize(7);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.level_sizes(), h.level_sizes());
    }

    #[test]
    fn randomize_changes_parents_across_seeds() {
        let h = balanced();
        let changed = (0..100)
            .filter(|&s| h.randomize(s).parent_maps() != h.parent_maps())
            .count();
        assert!(changed >= 99, "{changed}/100 seeds changed the hierarchy");
    }

    #[test]
    fn drop_middle_level() {
        let h = balanced();
        let d = h.drop_level(2).unwrap();
        assert_eq!(d.level_sizes(), &[8, 2]);
        assert_eq!(d.parent_maps()[0], vec![0, 0, 0, 0, 1, 1, 1, 1]);
        for fine in 0..8 {
            assert_eq!(d.backtrack(fine).unwrap()[1], h.backtrack(fine).unwrap()[2]);
        }
        assert!(h.drop_level(1).is_err());
        assert!(h.drop_level(3).is_err());
    }

    #[test]
    fn lca_heights() {
        let h = balanced();
        assert_eq!(h.lca_height(4, 5), 1);
        assert_eq!(h.lca_height(0, 7), 3);
        assert_eq!(h.lca_height(0, 3), 2);
        assert_eq!(h.lca_height(6, 6), 0);
    }

    #[test]
    fn json_round_trip() {
        let h = balanced()
            .with_names(Some(vec!["species".into(), "family".into(), "order".into()]), None)
            .unwrap();
        let text = h.to_json();
        let back = LabelHierarchy::from_json(&text).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.structure_hash(), balanced().structure_hash());
    }

    #[test]
    fn json_loader_validates() {
        let text = r#"{"level_sizes":[4,2],"parents":[[0,0,0,0]]}"#;
        assert!(matches!(
            LabelHierarchy::from_json(text),
            Err(Error::ChildlessParent { .. })
        ));
    }
}
