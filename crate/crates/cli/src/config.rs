//! TOML run configuration merged with command-line flags.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use lht::model::TransitionInput;
use lht::{Mode, TrainConfig};

use crate::error::{CliError, Result};
use crate::TrainFlags;

/// Keys accepted in a `--config` file. All optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_backbone: Option<f64>,
    pub lr_heads: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub eval_every: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub embed_dim: Option<usize>,
    pub transition_input: Option<TransitionInput>,
    pub drop_level: Option<usize>,
    pub random_hierarchy: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub transition_input: TransitionInput,
    pub drop_level: Option<usize>,
    pub random_hierarchy: Option<u64>,
}

pub fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

/// Flags win over the config file, which wins over defaults.
pub fn resolve(flags: &TrainFlags, lambda: Option<f64>, seed: Option<u64>) -> Result<RunSpec> {
    let file = match &flags.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let d = TrainConfig::default();
    let hidden = match &flags.hidden {
        Some(h) => parse_list(h, "hidden width")?,
        None => file.hidden.clone().unwrap_or_else(|| vec![64]),
    };
    let train = TrainConfig {
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        max_steps: flags.steps.or(file.max_steps).unwrap_or(d.max_steps),
        lr_backbone: flags.lr_backbone.or(file.lr_backbone).unwrap_or(d.lr_backbone),
        lr_heads: flags.lr_heads.or(file.lr_heads).unwrap_or(d.lr_heads),
        momentum: flags.momentum.or(file.momentum).unwrap_or(d.momentum),
        weight_decay: flags.weight_decay.or(file.weight_decay).unwrap_or(d.weight_decay),
        lambda: lambda.or(file.lambda).unwrap_or(d.lambda),
        seed: seed.or(file.seed).unwrap_or(d.seed),
        mode: flags.mode.or(file.mode).unwrap_or(d.mode),
        eval_every: flags.eval_every.or(file.eval_every).unwrap_or(d.eval_every),
    };
    train.validate()?;
    Ok(RunSpec {
        train,
        hidden,
        embed_dim: flags.embed_dim.or(file.embed_dim).unwrap_or(60),
        transition_input: flags.transition_input.or(file.transition_input).unwrap_or_default(),
        drop_level: flags.drop_level.or(file.drop_level),
        random_hierarchy: flags.random_hierarchy.or(file.random_hierarchy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "mode = \"lht_c2f\"\nlambda = 5.0\nmax_steps = 10\nhidden = [8, 8]\n",
        )
        .unwrap();
        let flags = TrainFlags {
            config: Some(path),
            steps: Some(20),
            ..TrainFlags::default()
        };
        let spec = resolve(&flags, Some(1.0), None).unwrap();
        assert_eq!(spec.train.mode, Mode::LhtC2f);
        assert_eq!(spec.train.lambda, 1.0);
        assert_eq!(spec.train.max_steps, 20);
        assert_eq!(spec.hidden, vec![8, 8]);
        assert_eq!(spec.train.lr_heads, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "lamda = 1.0\n").unwrap();
        let flags = TrainFlags {
            config: Some(path),
            ..TrainFlags::default()
        };
        assert!(matches!(resolve(&flags, None, None), Err(CliError::Config(_))));
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let r = resolve(&TrainFlags::default(), Some(-1.0), None);
        assert!(matches!(r, Err(CliError::Core(lht::Error::NegativeLambda(_)))));
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<f64>("0, 0.5,2", "lambda").unwrap(), vec![0.0, 0.5, 2.0]);
        assert!(parse_list::<u64>("1,x", "seed").is_err());
    }
}
