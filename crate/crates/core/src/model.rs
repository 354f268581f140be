//! The hierarchy-transition network.
//!
//! An MLP backbone produces an embedding that is split uniformly into K
//! slices. A classifier head turns one slice into base-level logits; in the
//! transition modes, one affine head per adjacent level pair emits a
//! column-softmaxed transition matrix, and coarser (or finer) predictions are
//! obtained by multiplying that matrix into the neighbouring prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{self, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One fine-level head; coarse levels backtracked through the taxonomy.
    Vanilla,
    /// One independent head per level.
    VanillaSingle,
    /// Fine head plus learned fine-to-coarse transitions.
    LhtF2c,
    /// Coarse head plus learned coarse-to-fine transitions.
    LhtC2f,
    /// Fine head plus the fixed 0/1 parent matrices.
    LhtNaive,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Vanilla,
        Mode::VanillaSingle,
        Mode::LhtF2c,
        Mode::LhtC2f,
        Mode::LhtNaive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::VanillaSingle => "vanilla_single",
            Mode::LhtF2c => "lht_f2c",
            Mode::LhtC2f => "lht_c2f",
            Mode::LhtNaive => "lht_naive",
        }
    }

    /// Modes whose transition matrices come from a network.
    pub fn learns_transitions(&self) -> bool {
        matches!(self, Mode::LhtF2c | Mode::LhtC2f)
    }

    /// Modes that carry transition matrices in their prediction chains.
    pub fn has_transitions(&self) -> bool {
        matches!(self, Mode::LhtF2c | Mode::LhtC2f | Mode::LhtNaive)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

/// What the transition heads read from the embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionInput {
    /// The slice whose index matches the level the head predicts.
    #[default]
    Slice,
    Full,
}

impl FromStr for TransitionInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice" => Ok(TransitionInput::Slice),
            "full" => Ok(TransitionInput::Full),
            _ => Err(Error::InvalidConfig(format!("unknown transition input {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub mode: Mode,
    #[serde(default)]
    pub transition_input: TransitionInput,
}

impl ModelConfig {
    pub fn new(input_dim: usize, mode: Mode) -> Self {
        ModelConfig {
            input_dim,
            hidden: vec![64],
            embed_dim: 60,
            mode,
            transition_input: TransitionInput::Slice,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`, row-major.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::matrix(fan_out, fan_in, data).expect("sizes agree"),
            bias: Tensor::zeros(Shape::Vector(fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Per-level predictions of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionChain {
    pub mode: Mode,
    /// `probs[k]` is the prediction at 1-based level k+1.
    pub probs: Vec<Vec<f64>>,
    /// Transition matrices in application order. Fine-to-coarse: entry i maps
    /// level i+1 to level i+2. Coarse-to-fine: entry i maps level i+2 to i+1.
    pub transitions: Vec<Tensor>,
}

/// Tape handles for a forward pass.
#[derive(Clone, Debug)]
pub struct TapeChain {
    pub mode: Mode,
    pub probs: Vec<Var>,
    pub transitions: Vec<Var>,
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    backbone: Vec<(Var, Var)>,
    heads: Vec<(Var, Var)>,
    transitions: Vec<(Var, Var)>,
}

impl BoundParams {
    /// Handles in [`LhtModel::parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .chain(&self.heads)
            .chain(&self.transitions)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LhtModel {
    config: ModelConfig,
    hierarchy: LabelHierarchy,
    backbone: Vec<Linear>,
    heads: Vec<Linear>,
    transitions: Vec<Linear>,
    naive: Vec<Tensor>,
}

impl LhtModel {
    /// Builds a model with fan-in-scaled uniform weights and zero biases.
    pub fn new(config: ModelConfig, hierarchy: LabelHierarchy, seed: u64) -> Result<Self> {
        hierarchy.validate()?;
        let k = hierarchy.num_levels();
        if config.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if config.embed_dim < k {
            return Err(Error::InvalidConfig(format!(
                "embedding of {} cannot be split into {k} slices",
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut width = config.input_dim;
        for &h in config.hidden.iter().chain(std::iter::once(&config.embed_dim)) {
            if h == 0 {
                return Err(Error::InvalidConfig("zero-width layer".into()));
            }
            backbone.push(Linear::init(&mut rng, width, h));
            width = h;
        }
        let sizes = hierarchy.level_sizes().to_vec();
        let slice_len = |level0: usize| slice_bounds(config.embed_dim, k, level0).1;
        let trans_in = |level0: usize| match config.transition_input {
            TransitionInput::Slice => slice_len(level0),
            TransitionInput::Full => config.embed_dim,
        };
        let (heads, transitions) = match config.mode {
            Mode::Vanilla | Mode::LhtNaive => (vec![Linear::init(&mut rng, slice_len(0), sizes[0])], vec![]),
            Mode::VanillaSingle => (
                (0..k).map(|l| Linear::init(&mut rng, slice_len(l), sizes[l])).collect(),
                vec![],
            ),
            Mode::LhtF2c => {
                let head = Linear::init(&mut rng, slice_len(0), sizes[0]);
                let trans = (1..k)
                    .map(|l| Linear::init(&mut rng, trans_in(l), sizes[l] * sizes[l - 1]))
                    .collect();
                (vec![head], trans)
            }
            Mode::LhtC2f => {
                let head = Linear::init(&mut rng, slice_len(k - 1), sizes[k - 1]);
                let trans = (0..k - 1)
                    .map(|l| Linear::init(&mut rng, trans_in(l), sizes[l] * sizes[l + 1]))
                    .collect();
                (vec![head], trans)
            }
        };
        let naive = (2..=k)
            .map(|level| hierarchy.naive_transition(level).map(|t| t.matrix))
            .collect::<Result<_>>()?;
        Ok(LhtModel {
            config,
            hierarchy,
            backbone,
            heads,
            transitions,
            naive,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn hierarchy(&self) -> &LabelHierarchy {
        &self.hierarchy
    }

    pub fn num_levels(&self) -> usize {
        self.hierarchy.num_levels()
    }

    fn layers(&self) -> impl Iterator<Item = (String, ParamGroup, &Linear)> {
        let bb = self
            .backbone
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("backbone.{i}"), ParamGroup::Backbone, l));
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("head.{i}"), ParamGroup::Heads, l));
        let trans = self
            .transitions
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("transition.{i}"), ParamGroup::Heads, l));
        bb.chain(heads).chain(trans)
    }

    /// Every parameter tensor with its name and learning-rate group.
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        self.layers()
            .flat_map(|(name, group, l)| {
                [
                    (format!("{name}.weight"), group, &l.weight),
                    (format!("{name}.bias"), group, &l.bias),
                ]
            })
            .collect()
    }

    /// Mutable parameters in [`LhtModel::parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut())
            .chain(self.transitions.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn naive_transitions(&self) -> &[Tensor] {
        &self.naive
    }

    pub fn base_heads(&self) -> &[Linear] {
        &self.heads
    }

    pub fn base_heads_mut(&mut self) -> &mut [Linear] {
        &mut self.heads
    }

    pub fn transition_heads(&self) -> &[Linear] {
        &self.transitions
    }

    pub fn transition_heads_mut(&mut self) -> &mut [Linear] {
        &mut self.transitions
    }

    /// Registers parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut reg = |l: &Linear| {
            if trainable {
                (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            }
        };
        BoundParams {
            backbone: self.backbone.iter().map(&mut reg).collect(),
            heads: self.heads.iter().map(&mut reg).collect(),
            transitions: self.transitions.iter().map(&mut reg).collect(),
        }
    }

    /// Records a forward pass of `x` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &BoundParams, x: &[f64]) -> Result<TapeChain> {
        if x.len() != self.config.input_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} features, model expects {}",
                    x.len(),
                    self.config.input_dim
                ),
            ));
        }
        let k = self.num_levels();
        let sizes = self.hierarchy.level_sizes();
        let mut h = tape.constant(Tensor::vector(x.to_vec()));
        let last = params.backbone.len() - 1;
        for (i, &(w, b)) in params.backbone.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let embed = h;
        let e = self.config.embed_dim;
        let slice = |tape: &mut Tape, level0: usize| {
            let (start, len) = slice_bounds(e, k, level0);
            tape.slice(embed, start, len)
        };
        let trans_input = |tape: &mut Tape, level0: usize| -> Result<Var> {
            match self.config.transition_input {
                TransitionInput::Slice => {
                    let (start, len) = slice_bounds(e, k, level0);
                    tape.slice(embed, start, len)
                }
                TransitionInput::Full => Ok(embed),
            }
        };
        let mode = self.config.mode;
        let mut probs = Vec::with_capacity(k);
        let mut transitions = Vec::new();
        match mode {
            Mode::Vanilla => {
                let s = slice(tape, 0)?;
                let (w, b) = params.heads[0];
                let z = tape.affine(s, w, b)?;
                probs.push(tape.softmax(z)?);
                for t in &self.naive {
                    // Deterministic coarsening, outside the gradient path.
                    let prev = tape.value(*probs.last().expect("fine level")).clone();
                    let prev = tape.constant(prev);
                    let t = tape.constant(t.clone());
                    probs.push(tape.matvec(t, prev)?);
                }
            }
            Mode::VanillaSingle => {
                for (level0, &(w, b)) in params.heads.iter().enumerate() {
                    let s = slice(tape, level0)?;
                    let z = tape.affine(s, w, b)?;
                    probs.push(tape.softmax(z)?);
                }
            }
            Mode::LhtF2c | Mode::LhtNaive => {
                let s = slice(tape, 0)?;
                let (w, b) = params.heads[0];
                let z = tape.affine(s, w, b)?;
                probs.push(tape.softmax(z)?);
                for level0 in 1..k {
                    let t = if mode == Mode::LhtNaive {
                        tape.constant(self.naive[level0 - 1].clone())
                    } else {
                        let (w, b) = params.transitions[level0 - 1];
                        let input = trans_input(tape, level0)?;
                        let logits = tape.affine(input, w, b)?;
                        let logits = tape.reshape(logits, sizes[level0], sizes[level0 - 1])?;
                        tape.column_softmax(logits)?
                    };
                    let prev = *probs.last().expect("previous level");
                    probs.push(tape.matvec(t, prev)?);
                    transitions.push(t);
                }
            }
            Mode::LhtC2f => {
                let s = slice(tape, k - 1)?;
                let (w, b) = params.heads[0];
                let z = tape.affine(s, w, b)?;
                let mut rev = vec![tape.softmax(z)?];
                for level0 in (0..k - 1).rev() {
                    let (w, b) = params.transitions[level0];
                    let input = trans_input(tape, level0)?;
                    let logits = tape.affine(input, w, b)?;
                    let logits = tape.reshape(logits, sizes[level0], sizes[level0 + 1])?;
                    let t = tape.column_softmax(logits)?;
                    let prev = *rev.last().expect("previous level");
                    rev.push(tape.matvec(t, prev)?);
                    transitions.push(t);
                }
                rev.reverse();
                probs = rev;
            }
        }
        Ok(TapeChain {
            mode,
            probs,
            transitions,
        })
    }

    fn chain_values(tape: &Tape, chain: &TapeChain) -> PredictionChain {
        PredictionChain {
            mode: chain.mode,
            probs: chain.probs.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            transitions: chain.transitions.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    /// Prediction chain for any mode.
    pub fn forward(&self, x: &[f64]) -> Result<PredictionChain> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let chain = self.forward_on_tape(&mut tape, &params, x)?;
        Ok(Self::chain_values(&tape, &chain))
    }

    fn require(&self, op: &'static str, allowed: &[Mode]) -> Result<()> {
        if allowed.contains(&self.mode()) {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                op,
                mode: self.mode().to_string(),
            })
        }
    }

    /// Fine-to-coarse recursion (`lht_f2c` or `lht_naive`).
    pub fn forward_f2c(&self, x: &[f64]) -> Result<PredictionChain> {
        self.require("forward_f2c", &[Mode::LhtF2c, Mode::LhtNaive])?;
        self.forward(x)
    }

    /// Coarse-to-fine recursion (`lht_c2f`).
    pub fn forward_c2f(&self, x: &[f64]) -> Result<PredictionChain> {
        self.require("forward_c2f", &[Mode::LhtC2f])?;
        self.forward(x)
    }

    /// Baselines (`vanilla` or `vanilla_single`).
    pub fn forward_vanilla(&self, x: &[f64]) -> Result<PredictionChain> {
        self.require("forward_vanilla", &[Mode::Vanilla, Mode::VanillaSingle])?;
        self.forward(x)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            hierarchy_hash: self.hierarchy.structure_hash(),
            params: self
                .parameters()
                .into_iter()
                .map(|(name, _, t)| NamedParam {
                    name,
                    shape: t.shape(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model, checking the hierarchy hash and every shape.
    pub fn from_checkpoint(ckpt: &Checkpoint, hierarchy: LabelHierarchy) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("format {} v{}", ckpt.format, ckpt.version)));
        }
        let hash = hierarchy.structure_hash();
        if hash != ckpt.hierarchy_hash {
            return Err(Error::HierarchyMismatch(format!(
                "checkpoint hierarchy {} does not match {}",
                ckpt.hierarchy_hash, hash
            )));
        }
        let mut model = LhtModel::new(ckpt.config.clone(), hierarchy, 0)?;
        let names: Vec<(String, Shape)> = model.parameters().into_iter().map(|(n, _, t)| (n, t.shape())).collect();
        if names.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ckpt.params.len()
            )));
        }
        for ((slot, (name, shape)), saved) in model.parameters_mut().into_iter().zip(names).zip(&ckpt.params) {
            if saved.name != name || saved.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {name} {shape:?}",
                    saved.name, saved.shape
                )));
            }
            *slot = Tensor::from_shape(shape, saved.values.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, hierarchy: LabelHierarchy) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt, hierarchy)
    }
}

/// (start, len) of 0-based embedding slice `index` out of `parts`.
pub fn slice_bounds(embed_dim: usize, parts: usize, index: usize) -> (usize, usize) {
    let start = index * embed_dim / parts;
    let end = (index + 1) * embed_dim / parts;
    (start, end - start)
}

/// Applies transition matrices in order starting from a base prediction.
pub fn propagate(base: &[f64], transitions: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![base.to_vec()];
    for t in transitions {
        let next = diff::matvec(t, out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "lht-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub hierarchy_hash: String,
    pub params: Vec<NamedParam>,
}
