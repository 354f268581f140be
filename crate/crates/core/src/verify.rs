//! Executable checks: finite-difference gradients, the naive-transition
//! collapse, the large-lambda limit and the chain-rule factorisation of the
//! hierarchical cross-entropy.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, Sample, Split, SyntheticConfig};
use crate::diff::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::losses;
use crate::model::{propagate, LhtModel, Mode, ModelConfig};
use crate::training::{self, TrainConfig};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error threshold for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Machine-readable verdict of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    /// Measured quantity compared against `threshold`.
    pub measured: f64,
    /// Headroom `threshold - measured`; negative on failure.
    pub margin: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl CheckRecord {
    /// Passes when `measured < threshold`.
    pub fn below(name: impl Into<String>, measured: f64, threshold: f64, seed: u64) -> Self {
        CheckRecord {
            name: name.into(),
            pass: measured < threshold,
            measured,
            margin: threshold - measured,
            threshold,
            seed,
        }
    }

    /// A yes/no property: `measured` is 0 on success, 1 on failure.
    pub fn holds(name: impl Into<String>, ok: bool, seed: u64) -> Self {
        CheckRecord {
            name: name.into(),
            pass: ok,
            measured: if ok { 0.0 } else { 1.0 },
            margin: if ok { 1.0 } else { -1.0 },
            threshold: 1.0,
            seed,
        }
    }
}

fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Max relative error between `analytic` and central differences of `f`
/// over the listed coordinates of `point`.
pub fn finite_difference_error<F>(mut f: F, point: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Differentiable primitives covered by [`grad_check_primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Affine,
    Relu,
    Softmax,
    ColumnSoftmax,
    Reshape,
    Slice,
    MatVec,
    CrossEntropy,
    NegEntropy,
    ColumnNegEntropyMean,
    Sum,
    Scale,
}

impl Primitive {
    pub const ALL: [Primitive; 12] = [
        Primitive::Affine,
        Primitive::Relu,
        Primitive::Softmax,
        Primitive::ColumnSoftmax,
        Primitive::Reshape,
        Primitive::Slice,
        Primitive::MatVec,
        Primitive::CrossEntropy,
        Primitive::NegEntropy,
        Primitive::ColumnNegEntropyMean,
        Primitive::Sum,
        Primitive::Scale,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Affine => "affine",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::ColumnSoftmax => "column_softmax",
            Primitive::Reshape => "reshape",
            Primitive::Slice => "slice",
            Primitive::MatVec => "matvec",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::NegEntropy => "neg_entropy",
            Primitive::ColumnNegEntropyMean => "column_neg_entropy_mean",
            Primitive::Sum => "sum",
            Primitive::Scale => "scale",
        }
    }

    /// Input shapes as (rows, cols); rows = 0 marks a vector of `cols`.
    fn inputs(&self) -> Vec<(usize, usize)> {
        match self {
            Primitive::Affine => vec![(0, 5), (4, 5), (0, 4)],
            Primitive::MatVec => vec![(3, 5), (0, 5)],
            Primitive::ColumnSoftmax | Primitive::ColumnNegEntropyMean => vec![(0, 12)],
            Primitive::Sum => vec![(0, 1), (0, 1), (0, 1)],
            Primitive::Scale => vec![(0, 6)],
            _ => vec![(0, 7)],
        }
    }

    /// Records the primitive (composed with softmax where it needs
    /// simplex inputs) and projects the result to a scalar with `proj`.
    fn record(&self, tape: &mut Tape, x: &[Var], proj: &[f64]) -> Result<Var> {
        let out = match self {
            Primitive::Affine => tape.affine(x[0], x[1], x[2])?,
            Primitive::Relu => tape.relu(x[0])?,
            Primitive::Softmax => tape.softmax(x[0])?,
            Primitive::ColumnSoftmax => {
                let m = tape.reshape(x[0], 4, 3)?;
                tape.column_softmax(m)?
            }
            Primitive::Reshape => tape.reshape(x[0], 1, 7)?,
            Primitive::Slice => tape.slice(x[0], 2, 4)?,
            Primitive::MatVec => tape.matvec(x[0], x[1])?,
            Primitive::CrossEntropy => {
                let p = tape.softmax(x[0])?;
                return tape.cross_entropy(p, 3);
            }
            Primitive::NegEntropy => {
                let p = tape.softmax(x[0])?;
                return tape.neg_entropy(p);
            }
            Primitive::ColumnNegEntropyMean => {
                let m = tape.reshape(x[0], 4, 3)?;
                let t = tape.column_softmax(m)?;
                return tape.column_neg_entropy_mean(t);
            }
            Primitive::Sum => return tape.sum(x),
            Primitive::Scale => {
                let s = tape.scale(x[0], -1.7)?;
                let p = tape.softmax(s)?;
                return tape.cross_entropy(p, 1);
            }
        };
        project(tape, out, proj)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `<proj, out>` as a scalar node, flattening matrices row-major.
fn project(tape: &mut Tape, out: Var, proj: &[f64]) -> Result<Var> {
    let flat = match tape.value(out).shape() {
        diff::Shape::Matrix(r, c) => {
            // M p_cols, then a row vector times the result
            let pc = tape.constant(Tensor::vector(proj[..c].to_vec()));
            let mv = tape.matvec(out, pc)?;
            let pr = tape.constant(Tensor::matrix(1, r, proj[c..c + r].to_vec())?);
            tape.matvec(pr, mv)?
        }
        diff::Shape::Vector(n) => {
            let pr = tape.constant(Tensor::matrix(1, n, proj[..n].to_vec())?);
            tape.matvec(pr, out)?
        }
    };
    tape.sum(&[flat])
}

/// Max relative gradient error of one primitive at a random point.
pub fn grad_check_primitive(prim: Primitive, seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = prim.inputs();
    let sizes: Vec<usize> = shapes.iter().map(|&(r, c)| if r == 0 { c } else { r * c }).collect();
    let total: usize = sizes.iter().sum();
    let point: Vec<f64> = (0..total).map(|_| StandardNormal.sample(&mut rng)).collect();
    let proj: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eval = |flat: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut vars = Vec::new();
        for (&(r, c), &n) in shapes.iter().zip(&sizes) {
            let data = flat[offset..offset + n].to_vec();
            let t = if r == 0 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(r, c, data)?
            };
            vars.push(tape.leaf(t));
            offset += n;
        }
        let y = prim.record(&mut tape, &vars, &proj)?;
        let value = tape.value(y).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(y)?;
        let grad = vars.iter().flat_map(|&v| g.wrt(v).into_data()).collect();
        Ok((value, grad))
    };
    let (_, analytic) = eval(&point, true)?;
    let coords: Vec<usize> = (0..total).collect();
    finite_difference_error(|x| eval(x, false).map(|r| r.0), &point, &analytic, &coords, h)
}

/// Levels whose cross-entropy carries gradient in `mode`; the `vanilla`
/// baseline coarsens its fine prediction outside the gradient path.
pub fn trained_levels(mode: Mode, levels: usize) -> usize {
    match mode {
        Mode::Vanilla => 1,
        _ => levels,
    }
}

/// Value of the training objective (batch mean) computed without the tape.
pub fn objective_value(model: &LhtModel, batch: &[Sample], lambda: f64) -> Result<f64> {
    let levels = trained_levels(model.mode(), model.num_levels());
    let mut total = 0.0;
    for s in batch {
        let chain = model.forward(&s.features)?;
        for (p, &y) in chain.probs.iter().zip(&s.labels).take(levels) {
            total += diff::cross_entropy_index(p, y)?;
        }
        if model.mode().has_transitions() {
            total += lambda * losses::confusion_loss(std::slice::from_ref(&chain))?;
        }
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Smallest distance from zero allowed for a hidden pre-activation in the
/// gradient-check problems; far above any `FD_STEP` perturbation.
const KINK_MARGIN: f64 = 1e-2;

/// A small network and batch on `[8, 4, 2]` for gradient checks.
pub fn tiny_problem(mode: Mode, seed: u64) -> Result<(LhtModel, Dataset)> {
    let hier = LabelHierarchy::balanced(&[8, 4, 2])?;
    let config = ModelConfig {
        input_dim: 5,
        hidden: vec![7],
        embed_dim: 9,
        ..ModelConfig::new(5, mode)
    };
    let mut model = LhtModel::new(config, hier.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Random non-zero biases so no unit sits exactly at a kink.
    for p in model.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.3 * standard_normal(&mut rng);
        }
    }
    // Redraw inputs whose hidden pre-activations come close enough to the
    // ReLU kink for a finite-difference step to straddle it.
    let params = model.parameters();
    let (w0, b0) = (params[0].2, params[1].2);
    let clear_of_kink = |x: &[f64]| -> Result<bool> {
        let z = w0.matvec(x)?;
        Ok(z.iter().zip(b0.data()).all(|(a, b)| (a + b).abs() > KINK_MARGIN))
    };
    let mut samples = Vec::with_capacity(4);
    while samples.len() < 4 {
        let fine = rng.random_range(0..8);
        let features: Vec<f64> = (0..5).map(|_| 1.5 * standard_normal(&mut rng)).collect();
        if clear_of_kink(&features)? {
            samples.push(Sample {
                features,
                labels: hier.backtrack(fine)?,
            });
        }
    }
    let data = Dataset {
        samples,
        hierarchy: hier,
        split: Split::Train,
        dim: 5,
    };
    Ok((model, data))
}

/// Max relative error of the full training-objective gradient for `mode`,
/// over every parameter coordinate or a random subset of `max_coords`.
pub fn grad_check_model(mode: Mode, seed: u64, h: f64, max_coords: Option<usize>) -> Result<f64> {
    let (model, data) = tiny_problem(mode, seed)?;
    let lambda = 2.0;
    let all: Vec<usize> = (0..data.len()).collect();
    let (_, grads) = training::batch_gradients(&model, &data, &all, lambda)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let point: Vec<f64> = model
        .parameters()
        .iter()
        .flat_map(|(_, _, t)| t.data().to_vec())
        .collect();
    let n = point.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let mut idx = sample_indices(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let mut probe = model.clone();
    let f = |x: &[f64]| -> Result<f64> {
        let mut offset = 0;
        for p in probe.parameters_mut() {
            let len = p.len();
            p.data_mut().copy_from_slice(&x[offset..offset + len]);
            offset += len;
        }
        objective_value(&probe, &data.samples, lambda)
    };
    finite_difference_error(f, &point, &analytic, &coords, h)
}

/// Gradient checks for every primitive and every mode at one seed.
pub fn grad_check_suite(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for prim in Primitive::ALL {
        let err = grad_check_primitive(prim, seed, FD_STEP)?;
        out.push(CheckRecord::below(format!("grad/{prim}"), err, GRAD_TOL, seed));
    }
    for mode in Mode::ALL {
        let err = grad_check_model(mode, seed, FD_STEP, None)?;
        out.push(CheckRecord::below(format!("grad/loss/{mode}"), err, GRAD_TOL, seed));
    }
    Ok(out)
}

/// Coarse probabilities by summing fine mass over each class's descendants.
pub fn descendant_mass(hier: &LabelHierarchy, fine: &[f64], level: usize) -> Vec<f64> {
    let mut out = vec![0.0; hier.level_size(level)];
    for (f, &p) in fine.iter().enumerate() {
        out[hier.ancestor(1, f, level)] += p;
    }
    out
}

/// Plain matrix product of row-major tensors.
fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", format!("{m}x{k} times {}x{n}", b.rows())));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// Largest disagreement between the three routes to each coarse CE.
    pub identity_error: f64,
    /// `(margin, L_CE)` pairs for the one-hot limit.
    pub margin_losses: Vec<(f64, f64)>,
    pub margin_monotone: bool,
    pub margin_bounded: bool,
    /// Grid points minimising the all-level objective and the fine-only one.
    pub grid_argmin_hierarchical: Vec<(f64, f64)>,
    pub grid_argmin_fine: Vec<(f64, f64)>,
    /// Both objectives strictly decrease with the margin along the grid.
    pub grid_monotone: bool,
}

/// Sum of cross-entropies over the naive chain started at `fine`.
fn naive_chain_ce(hier: &LabelHierarchy, fine: &[f64], labels: &[usize]) -> Result<f64> {
    let naive = (2..=hier.num_levels())
        .map(|l| hier.naive_transition(l).map(|t| t.matrix))
        .collect::<Result<Vec<_>>>()?;
    let chain = propagate(fine, &naive)?;
    chain
        .iter()
        .zip(labels)
        .map(|(p, &y)| diff::cross_entropy_index(p, y))
        .sum()
}

/// Checks that naive transitions reduce the hierarchical objective to the
/// fine-level one. `samples` sets how many random parameter draws the
/// identity is checked on.
pub fn theorem1_oracle(hier: &LabelHierarchy, samples: usize, seed: u64) -> Result<Theorem1Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = hier.num_levels();
    let c1 = hier.fine_size();
    let dim = 6;

    // (a) random lht_naive networks: model chain, descendant sums, and the
    // explicit product of naive matrices must agree.
    let model_seed = rng.random();
    let config = ModelConfig {
        hidden: vec![8],
        embed_dim: 3 * k,
        ..ModelConfig::new(dim, Mode::LhtNaive)
    };
    let model = LhtModel::new(config, hier.clone(), model_seed)?;
    let mut identity_error: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..dim).map(|_| 2.0 * standard_normal(&mut rng)).collect();
        let fine_label = rng.random_range(0..c1);
        let labels = hier.backtrack(fine_label)?;
        let chain = model.forward(&x)?;
        let fine = &chain.probs[0];
        let mut product: Option<Tensor> = None;
        for level in 2..=k {
            let t = hier.naive_transition(level)?.matrix;
            product = Some(match product {
                None => t,
                Some(p) => matmul(&t, &p)?,
            });
            let via_product = product.as_ref().expect("set above").matvec(fine)?;
            let via_sum = descendant_mass(hier, fine, level);
            let y = labels[level - 1];
            let ce_model = diff::cross_entropy_index(&chain.probs[level - 1], y)?;
            let ce_product = diff::cross_entropy_index(&via_product, y)?;
            let ce_sum = diff::cross_entropy_index(&via_sum, y)?;
            identity_error = identity_error
                .max((ce_model - ce_product).abs())
                .max((ce_model - ce_sum).abs());
        }
    }

    // (b) one-hot limit: logit m on the true fine class, 0 elsewhere.
    let y = hier.backtrack(rng.random_range(0..c1))?;
    let mut margin_losses = Vec::new();
    let mut margin_bounded = true;
    for m in [5.0, 10.0, 20.0] {
        let mut z = vec![0.0; c1];
        z[y[0]] = m;
        let fine = diff::softmax(&z)?;
        let total = naive_chain_ce(hier, &fine, &y)?;
        let fine_ce = diff::cross_entropy_index(&fine, y[0])?;
        margin_bounded &= total <= k as f64 * fine_ce + 1e-15;
        margin_losses.push((m, total));
    }
    let margin_monotone = margin_losses.windows(2).all(|w| w[1].1 < w[0].1);

    // (c) one sample, true-class logit a and shared off-class logit b.
    let grid: Vec<f64> = (-100..=100).map(|i| i as f64 / 10.0).collect();
    let mut hier_vals = Vec::new();
    let mut fine_vals = Vec::new();
    for &a in &grid {
        for &b in &grid {
            let mut z = vec![b; c1];
            z[y[0]] = a;
            let fine = diff::softmax(&z)?;
            hier_vals.push(((a, b), naive_chain_ce(hier, &fine, &y)?));
            fine_vals.push(((a, b), diff::cross_entropy_index(&fine, y[0])?));
        }
    }
    let argmin = |vals: &[((f64, f64), f64)]| -> Vec<(f64, f64)> {
        let best = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        vals.iter().filter(|v| v.1 <= best).map(|v| v.0).collect()
    };
    // Along b = 0 the margin is a; both objectives must strictly decrease.
    let along = |f: &dyn Fn(&[f64]) -> Result<f64>| -> Result<bool> {
        let mut prev = f64::INFINITY;
        for &a in &grid {
            let mut z = vec![0.0; c1];
            z[y[0]] = a;
            let v = f(&diff::softmax(&z)?)?;
            if v.is_nan() || v >= prev {
                return Ok(false);
            }
            prev = v;
        }
        Ok(true)
    };
    let grid_monotone = along(&|p| naive_chain_ce(hier, p, &y))? && along(&|p| diff::cross_entropy_index(p, y[0]))?;
    Ok(Theorem1Report {
        identity_error,
        margin_losses,
        margin_monotone,
        margin_bounded,
        grid_argmin_hierarchical: argmin(&hier_vals),
        grid_argmin_fine: argmin(&fine_vals),
        grid_monotone,
    })
}

pub fn theorem1_records(hier: &LabelHierarchy, seed: u64) -> Result<Vec<CheckRecord>> {
    let r = theorem1_oracle(hier, 200, seed)?;
    let last = r.margin_losses.last().map(|v| v.1).unwrap_or(f64::INFINITY);
    Ok(vec![
        CheckRecord::below("theorem1/identity", r.identity_error, 1e-12, seed),
        CheckRecord::below("theorem1/margin20", last, 1e-7, seed),
        CheckRecord::holds("theorem1/margin_monotone", r.margin_monotone && r.margin_bounded, seed),
        CheckRecord::holds(
            "theorem1/grid_argmin",
            r.grid_monotone
                && r.grid_argmin_hierarchical == r.grid_argmin_fine
                && r.grid_argmin_fine == vec![(10.0, -10.0)],
            seed,
        ),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// Per transition, the largest `|T_ij - 1/C|` over the dataset.
    pub column_deviation: Vec<f64>,
    /// Per coarse level, `|mean CE - ln C_k|`.
    pub ce_deviation: Vec<f64>,
    pub column_tol: f64,
    pub ce_tol: f64,
}

impl Lemma1Report {
    pub fn max_column_deviation(&self) -> f64 {
        self.column_deviation.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_ce_deviation(&self) -> f64 {
        self.ce_deviation.iter().copied().fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.max_column_deviation() <= self.column_tol && self.max_ce_deviation() <= self.ce_tol
    }
}

pub const LEMMA1_COLUMN_TOL: f64 = 0.01;
pub const LEMMA1_CE_TOL: f64 = 0.02;

/// Distance of a trained model from the large-lambda limit: uniform
/// transition columns and coarse cross-entropy `ln C_k`.
pub fn lemma1_measure(model: &LhtModel, dataset: &Dataset) -> Result<Lemma1Report> {
    losses::require_transitions(model.mode())?;
    if model.mode() == Mode::LhtNaive {
        return Err(Error::ModeMismatch {
            op: "lemma1",
            mode: model.mode().to_string(),
        });
    }
    let sizes = model.hierarchy().level_sizes().to_vec();
    let k = sizes.len();
    let mut column_deviation = vec![0.0f64; k - 1];
    let mut ce_sums = vec![0.0; k];
    for s in &dataset.samples {
        let chain = model.forward(&s.features)?;
        for (i, t) in chain.transitions.iter().enumerate() {
            let uniform = 1.0 / t.rows() as f64;
            let dev = t.data().iter().map(|v| (v - uniform).abs()).fold(0.0, f64::max);
            column_deviation[i] = column_deviation[i].max(dev);
        }
        for (level0, (p, &y)) in chain.probs.iter().zip(&s.labels).enumerate() {
            ce_sums[level0] += diff::cross_entropy_index(p, y)?;
        }
    }
    let n = dataset.len().max(1) as f64;
    // The base prediction's level carries no lemma target.
    let base = if model.mode() == Mode::LhtC2f { k - 1 } else { 0 };
    let ce_deviation = (0..k)
        .filter(|&l| l != base)
        .map(|l| (ce_sums[l] / n - (sizes[l] as f64).ln()).abs())
        .collect();
    Ok(Lemma1Report {
        column_deviation,
        ce_deviation,
        column_tol: LEMMA1_COLUMN_TOL,
        ce_tol: LEMMA1_CE_TOL,
    })
}

/// [`lemma1_measure`], failing with `NotConverged` when a tolerance is exceeded.
pub fn lemma1_check(model: &LhtModel, dataset: &Dataset) -> Result<Lemma1Report> {
    let report = lemma1_measure(model, dataset)?;
    if !report.pass() {
        return Err(Error::NotConverged(format!(
            "max column deviation {:.3e}, max coarse CE deviation {:.3e}",
            report.max_column_deviation(),
            report.max_ce_deviation()
        )));
    }
    Ok(report)
}

/// Lambda at which the default learning rates stay stable for the
/// confusion term; larger lambdas scale both rates down proportionally.
pub const LEMMA1_RATE_LAMBDA: f64 = 6.0;

/// Training recipe for the large-lambda run. The confusion term's curvature
/// grows linearly in lambda, so the default rates are multiplied by
/// `LEMMA1_RATE_LAMBDA / lambda`.
pub fn lemma1_train_config(lambda: f64, seed: u64, max_steps: usize) -> TrainConfig {
    let base = TrainConfig::default();
    let shrink = (LEMMA1_RATE_LAMBDA / lambda).min(1.0);
    TrainConfig {
        lambda,
        seed,
        max_steps,
        mode: Mode::LhtF2c,
        lr_backbone: base.lr_backbone * shrink,
        lr_heads: base.lr_heads * shrink,
        ..base
    }
}

/// Trains `lht_f2c` on the benchmark with `lambda` and measures the limit.
pub fn lemma1_run(lambda: f64, seed: u64, max_steps: usize) -> Result<(Lemma1Report, LhtModel)> {
    let hier = LabelHierarchy::balanced(&[8, 4, 2])?;
    let (train, test) = generate_synthetic(&hier, &SyntheticConfig::benchmark(seed))?;
    let mut model = LhtModel::new(ModelConfig::new(train.dim, Mode::LhtF2c), hier, seed)?;
    training::train(&mut model, &train, &lemma1_train_config(lambda, seed, max_steps))?;
    Ok((lemma1_measure(&model, &test)?, model))
}

/// Largest `|-ln prod_k p^k[y^k] - sum_k CE(p^k, y^k)|` over random cases.
pub fn appendix_a_check(hier: &LabelHierarchy, n_cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_cases {
        let mut product = 1.0;
        let mut ce_sum = 0.0;
        for &c in hier.level_sizes() {
            let z: Vec<f64> = (0..c).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            let p = diff::softmax(&z)?;
            let mut y = vec![0.0; c];
            let label = rng.random_range(0..c);
            y[label] = 1.0;
            product *= p[label];
            ce_sum += diff::cross_entropy(&p, &y)?;
        }
        worst = worst.max((-product.ln() - ce_sum).abs());
    }
    Ok(worst)
}

/// Checks runnable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Grad,
    Theorem1,
    Lemma1,
    AppendixA,
}

impl CheckName {
    pub const ALL: [CheckName; 4] = [
        CheckName::Grad,
        CheckName::Theorem1,
        CheckName::Lemma1,
        CheckName::AppendixA,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckName::Grad => "grad",
            CheckName::Theorem1 => "theorem1",
            CheckName::Lemma1 => "lemma1",
            CheckName::AppendixA => "appendixA",
        }
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckName::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s) || s.eq_ignore_ascii_case(&c.as_str().replace('A', "_a")))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown check {s:?}")))
    }
}

/// Step budget of the large-lambda check when run from the suite.
pub const LEMMA1_FAST_STEPS: usize = 6000;
pub const LEMMA1_LAMBDA: f64 = 1e4;

pub fn run_check(name: CheckName, seed: u64) -> Result<Vec<CheckRecord>> {
    match name {
        CheckName::Grad => grad_check_suite(seed),
        CheckName::Theorem1 => theorem1_records(&LabelHierarchy::balanced(&[8, 4, 2])?, seed),
        CheckName::Lemma1 => {
            let (r, _) = lemma1_run(LEMMA1_LAMBDA, seed, LEMMA1_FAST_STEPS)?;
            Ok(vec![
                CheckRecord::below("lemma1/columns", r.max_column_deviation(), LEMMA1_COLUMN_TOL, seed),
                CheckRecord::below("lemma1/coarse_ce", r.max_ce_deviation(), LEMMA1_CE_TOL, seed),
            ])
        }
        CheckName::AppendixA => {
            let worst = appendix_a_check(&LabelHierarchy::balanced(&[8, 4, 2])?, 1000, seed)?;
            Ok(vec![CheckRecord::below("appendixA/nll_vs_ce", worst, 1e-10, seed)])
        }
    }
}
