//! Run configuration: a TOML file layered over preset defaults.

use std::path::{Path, PathBuf};

use moflow_core::eval::{Property, RegressorConfig, DELTA_GRID};
use moflow_core::model::{ModelConfig, TrainConfig, DEFAULT_TEMPERATURE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Qm9,
    Zinc250k,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    pub temperature: f64,
    pub correction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreSection {
    pub interpolation_count: usize,
    pub grid_per_side: usize,
    pub grid_extent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub property: Property,
    pub lambda: f64,
    pub steps: usize,
    pub deltas: Vec<f64>,
    /// Dataset molecules used as seeds when no `--smiles` is given.
    pub seeds: usize,
    pub regressor: RegressorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfcheckSection {
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub explore: ExploreSection,
    pub optimize: OptimizeSection,
    pub selfcheck: SelfcheckSection,
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        Self {
            preset,
            seed: None,
            dataset: None,
            checkpoint: None,
            out: None,
            model: match preset {
                Preset::Qm9 => ModelConfig::qm9(),
                Preset::Zinc250k => ModelConfig::zinc250k(),
            },
            train: TrainConfig::default(),
            generate: GenerateSection { count: 10_000, temperature: DEFAULT_TEMPERATURE, correction: true },
            explore: ExploreSection { interpolation_count: 10, grid_per_side: 5, grid_extent: 2.0 },
            optimize: OptimizeSection {
                property: Property::HeavyAtoms,
                lambda: 0.5,
                steps: 20,
                deltas: DELTA_GRID.to_vec(),
                seeds: 20,
                regressor: RegressorConfig::default(),
            },
            selfcheck: SelfcheckSection { trials: 10 },
        }
    }

    /// Load `path` over the defaults of its `preset` (qm9 when absent).
    /// Errors name the offending field path.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let user = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {} is not valid TOML: {e}", p.display())))?
            }
        };
        Self::from_table(user)
    }

    pub fn from_table(user: toml::Table) -> CliResult<Self> {
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(v) => v.clone().try_into().map_err(|e| CliError::Usage(format!("config field `preset`: {e}")))?,
        };
        let defaults = toml::Value::try_from(Self::defaults(preset)).expect("defaults serialize");
        let mut merged = match defaults {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut merged, user);
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(merged))
            .map_err(|e| CliError::Usage(format!("config field `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| CliError::Usage(format!("config field `model`: {e}")))?;
        self.train.validate().map_err(|e| CliError::Usage(format!("config field `train`: {e}")))?;
        if self.generate.temperature.is_nan() || self.generate.temperature < 0.0 {
            return Err(CliError::Usage("config field `generate.temperature`: must be non-negative".into()));
        }
        if let Some(d) = self.optimize.deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(CliError::Usage(format!("config field `optimize.deltas`: {d} is outside [0, 1]")));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing. File locations are left out: inputs
    /// are hashed by content and the output directory does not affect results.
    pub fn canonical_json(&self) -> String {
        let stripped = Self { dataset: None, checkpoint: None, out: None, ..self.clone() };
        serde_json::to_string(&stripped).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> CliResult<RunConfig> {
        RunConfig::from_table(s.parse().unwrap())
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig::defaults(Preset::Qm9));
        assert_eq!(c.model.atom.n_coupling_layers, 27);
        assert_eq!(c.train.batch_size, 256);
    }

    #[test]
    fn overrides_merge_into_sections() {
        let c = parse("preset = \"zinc250k\"\nseed = 3\n[model.bond]\nn_coupling_layers = 2\n[train]\nepochs = 4").unwrap();
        assert_eq!(c.model.bond.n_coupling_layers, 2);
        assert_eq!(c.model.bond.conv_hidden_dims, vec![512, 512]);
        assert_eq!(c.model.atom.n_coupling_layers, 38);
        assert_eq!((c.seed, c.train.epochs, c.train.batch_size), (Some(3), 4, 256));
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse("[model.atom]\ngconv_dim = \"wide\"").unwrap_err();
        assert!(e.to_string().contains("model.atom.gconv_dim"), "{e}");
        let e = parse("[train]\nepoch = 3").unwrap_err();
        assert!(e.to_string().contains("train"), "{e}");
        assert_eq!(e.exit_code(), 1);
        let e = parse("[optimize]\ndeltas = [0.5, 1.5]").unwrap_err();
        assert!(e.to_string().contains("optimize.deltas"), "{e}");
    }
}
