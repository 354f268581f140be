//! Mini-batch momentum SGD with cosine-annealed, per-group learning rates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossBreakdown};
use crate::model::{LhtModel, Mode, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Evaluate on the monitor set every this many steps; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale budget: 80 epochs of 800 samples at batch 64.
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_steps: 1000,
            lr_backbone: 0.01,
            lr_heads: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: losses::DEFAULT_LAMBDA,
            seed: 0,
            mode: Mode::LhtF2c,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::NegativeLambda(self.lambda));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        let rates = [
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Heads => self.lr_heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(model: &LhtModel) -> Self {
        OptimizerState {
            velocity: model
                .parameters()
                .into_iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
        }
    }
}

/// `lr0 * (1 + cos(pi * step / max_steps)) / 2`.
pub fn cosine_lr(step: usize, max_steps: usize, lr0: f64) -> Result<f64> {
    if step > max_steps || max_steps == 0 {
        return Err(Error::StepOutOfRange { step, max_steps });
    }
    let t = step as f64 / max_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One coupled-weight-decay momentum step: `v = mu v + g + wd p`, `p -= lr v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lrs: &[f64],
    state: &mut OptimizerState,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != lrs.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} rates, {} buffers",
                params.len(),
                grads.len(),
                lrs.len(),
                state.velocity.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.velocity[i].shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { op: "sgd_step" });
        }
    }
    for ((p, g), (v, &lr)) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut().zip(lrs)) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Batch-mean cross-entropy per level, finest first.
    pub ce_per_level: Vec<f64>,
    pub ce: f64,
    pub conf: f64,
    pub lambda: f64,
    /// Batch mean of `ce + lambda * conf`.
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_avg_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<StepRecord>,
}

impl History {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("history records serialize") + "\n")
            .collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }
}

/// Epoch-wise shuffled batch indices.
#[derive(Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, cursor: 0, rng }
    }

    /// The next `size` indices; a new permutation starts when one runs out.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Loss and gradients of the batch-mean objective.
pub fn batch_gradients(
    model: &LhtModel,
    dataset: &Dataset,
    indices: &[usize],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let mut samples = Vec::with_capacity(indices.len());
    let k = model.num_levels();
    let mut ce_sums = vec![0.0; k];
    let mut conf_sum = 0.0;
    for &i in indices {
        let s = &dataset.samples[i];
        let chain = model.forward_on_tape(&mut tape, &params, &s.features)?;
        let loss = losses::record_sample_loss(&mut tape, &chain, &s.labels)?;
        for (acc, &v) in ce_sums.iter_mut().zip(&loss.ce) {
            *acc += tape.value(v).item();
        }
        if let Some(c) = loss.conf {
            conf_sum += tape.value(c).item();
        }
        samples.push(loss);
    }
    let objective = losses::record_batch_objective(&mut tape, &samples, lambda)?;
    let grads = tape.backward(objective)?;
    let breakdown = LossBreakdown::new(&ce_sums, conf_sum, lambda, indices.len())?;
    Ok((breakdown, params.vars().into_iter().map(|v| grads.wrt(v)).collect()))
}

/// Runs `config.max_steps` optimizer steps on `dataset`.
pub fn train(model: &mut LhtModel, dataset: &Dataset, config: &TrainConfig) -> Result<History> {
    train_monitored(model, dataset, None, config)
}

/// [`train`], additionally evaluating on `monitor` every `eval_every` steps.
pub fn train_monitored(
    model: &mut LhtModel,
    dataset: &Dataset,
    monitor: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if model.mode() != config.mode {
        return Err(Error::ModeMismatch {
            op: "train",
            mode: format!("model is {}, config asks for {}", model.mode(), config.mode),
        });
    }
    if model.hierarchy().structure_hash() != dataset.hierarchy.structure_hash() {
        return Err(Error::HierarchyMismatch("model and training data disagree".into()));
    }
    if dataset.dim != model.config().input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.config().input_dim,
            found: dataset.dim,
        });
    }
    let mut history = History::default();
    if config.max_steps == 0 {
        return Ok(history);
    }
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let groups: Vec<ParamGroup> = model.parameters().into_iter().map(|(_, g, _)| g).collect();
    let mut state = OptimizerState::new(model);
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    for step in 0..config.max_steps {
        let wrap = |e: Error| Error::Training {
            step,
            source: Box::new(e),
        };
        let lr_backbone = cosine_lr(step, config.max_steps, config.lr_backbone).map_err(wrap)?;
        let lr_heads = cosine_lr(step, config.max_steps, config.lr_heads).map_err(wrap)?;
        let batch = sampler.next_batch(config.batch_size);
        let (loss, grads) = batch_gradients(model, dataset, &batch, config.lambda).map_err(wrap)?;
        let lrs: Vec<f64> = groups
            .iter()
            .map(|g| match g {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Heads => lr_heads,
            })
            .collect();
        let mut params = model.parameters_mut();
        sgd_step(
            &mut params,
            &grads,
            &lrs,
            &mut state,
            config.momentum,
            config.weight_decay,
        )
        .map_err(wrap)?;
        let eval_avg_acc = match monitor {
            Some(m) if config.eval_every > 0 && (step + 1) % config.eval_every == 0 => {
                Some(eval::evaluate(model, m).map_err(wrap)?.avg_acc)
            }
            _ => None,
        };
        history.records.push(StepRecord {
            step,
            lr_backbone,
            lr_heads,
            ce: loss.mean_ce(),
            conf: loss.mean_conf(),
            total: loss.mean_total(),
            ce_per_level: loss.ce_per_level,
            lambda: config.lambda,
            eval_avg_acc,
        });
    }
    Ok(history)
}

/// Loss breakdown of the whole dataset, without updating anything.
pub fn dataset_loss(model: &LhtModel, dataset: &Dataset, lambda: f64) -> Result<LossBreakdown> {
    let chains = dataset
        .samples
        .iter()
        .map(|s| model.forward(&s.features))
        .collect::<Result<Vec<_>>>()?;
    losses::breakdown(&chains, &dataset.labels(), lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::hierarchy::LabelHierarchy;
    use crate::model::ModelConfig;

    fn setup(mode: Mode) -> (LhtModel, Dataset) {
        let h = LabelHierarchy::balanced(&[8, 4, 2]).unwrap();
        let cfg = SyntheticConfig {
            train_per_class: 20,
            test_per_class: 1,
            ..SyntheticConfig::benchmark(11)
        };
        let (train, _) = generate_synthetic(&h, &cfg).unwrap();
        let model = LhtModel::new(ModelConfig::new(16, mode), h, 3).unwrap();
        (model, train)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.1), Err(Error::StepOutOfRange { .. })));
    }

    fn single(p: Vec<f64>) -> Tensor {
        Tensor::vector(p)
    }

    #[test]
    fn sgd_plain_descent() {
        let mut p = single(vec![1.0, -2.0]);
        let g = single(vec![0.5, 0.25]);
        let mut state = OptimizerState {
            velocity: vec![Tensor::zeros(p.shape())],
            step: 0,
        };
        sgd_step(&mut [&mut p], &[g], &[0.1], &mut state, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = single(vec![1.0, -2.0]);
        let mut state = OptimizerState {
            velocity: vec![Tensor::zeros(p.shape())],
            step: 0,
        };
        sgd_step(&mut [&mut p], &[single(vec![0.0, 0.0])], &[0.1], &mut state, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_unrolls() {
        let mut p = single(vec![0.0]);
        let g = single(vec![1.0]);
        let mut state = OptimizerState {
            velocity: vec![Tensor::zeros(p.shape())],
            step: 0,
        };
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), &[0.1], &mut state, 0.9, 0.0).unwrap();
        let after_first = p.data()[0];
        sgd_step(&mut [&mut p], &[g], &[0.1], &mut state, 0.9, 0.0).unwrap();
        assert!((after_first - p.data()[0] - 0.1 * 1.9).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn sgd_weight_decay_is_coupled() {
        let mut p = single(vec![2.0]);
        let mut state = OptimizerState {
            velocity: vec![Tensor::zeros(p.shape())],
            step: 0,
        };
        sgd_step(&mut [&mut p], &[single(vec![0.0])], &[0.5], &mut state, 0.9, 0.1).unwrap();
        assert!((p.data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
        assert!((state.velocity[0].data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_errors() {
        let mut p = single(vec![1.0, 2.0]);
        let mut state = OptimizerState {
            velocity: vec![Tensor::zeros(p.shape())],
            step: 0,
        };
        let r = sgd_step(&mut [&mut p], &[single(vec![1.0])], &[0.1], &mut state, 0.9, 0.0);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
        let r = sgd_step(&mut [&mut p], &[], &[0.1], &mut state, 0.9, 0.0);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch(64).len(), 10);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let (mut model, data) = setup(Mode::LhtF2c);
        let before = model.clone();
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &data, &cfg).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            max_steps: 30,
            seed: 5,
            ..TrainConfig::default()
        };
        let (mut a, data) = setup(Mode::LhtF2c);
        let mut b = a.clone();
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn rejects_bad_configs() {
        let (mut model, data) = setup(Mode::LhtF2c);
        let cfg = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &cfg), Err(Error::NegativeLambda(_))));
        let cfg = TrainConfig {
            mode: Mode::Vanilla,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &data, &cfg),
            Err(Error::ModeMismatch { .. })
        ));
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn every_mode_reduces_training_loss() {
        for mode in Mode::ALL {
            let (mut model, data) = setup(mode);
            let before = dataset_loss(&model, &data, 0.0).unwrap().mean_ce();
            let cfg = TrainConfig {
                max_steps: 150,
                mode,
                ..TrainConfig::default()
            };
            train(&mut model, &data, &cfg).unwrap();
            let after = dataset_loss(&model, &data, 0.0).unwrap().mean_ce();
            assert!(after < before, "{mode}: {before} -> {after}");
        }
    }

    #[test]
    fn history_lines_are_json() {
        let (mut model, data) = setup(Mode::LhtC2f);
        let cfg = TrainConfig {
            max_steps: 3,
            mode: Mode::LhtC2f,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &data, &cfg).unwrap();
        let text = history.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        for line in text.lines() {
            let r: StepRecord = serde_json::from_str(line).unwrap();
            assert_eq!(r.ce_per_level.len(), 3);
            assert!((r.total - (r.ce + r.lambda * r.conf)).abs() < 1e-9);
        }
    }
}
