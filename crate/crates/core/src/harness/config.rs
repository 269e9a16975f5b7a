use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::flows::{Architecture, FlowHyperparameters};
use crate::samplers::SamplerConfig;
use crate::targets::TargetSpec;

/// One experiment: target, sampler, optional flow, budgets and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub target: TargetSpec,
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSpec>,
    /// Where `run` writes the report when `--out` is not given. Relative
    /// paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Directory relative dataset, reference and output paths resolve
    /// against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
}

/// `"default"` or an explicit grid entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Hyperparameters {
    #[default]
    Default,
    Explicit(FlowHyperparameters),
}

impl Hyperparameters {
    pub fn values(&self) -> FlowHyperparameters {
        match self {
            Hyperparameters::Default => FlowHyperparameters::default(),
            Hyperparameters::Explicit(h) => h.clone(),
        }
    }
}

impl Serialize for Hyperparameters {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Hyperparameters::Default => s.serialize_str("default"),
            Hyperparameters::Explicit(h) => h.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Hyperparameters {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Hyperparameters;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"default\" or a hyperparameter object")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                if v == "default" {
                    Ok(Hyperparameters::Default)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                FlowHyperparameters::deserialize(de::value::MapAccessDeserializer::new(map))
                    .map(Hyperparameters::Explicit)
            }
        }
        d.deserialize_any(V)
    }
}

impl ExperimentConfig {
    /// Parses and validates config JSON. Errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { String::new() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler
            .validate()
            .map_err(|(field, msg)| Error::config(format!("sampler.{field}"), msg))?;
        let kind = self.sampler.kind;
        match (&self.flow, kind.needs_flow()) {
            (None, true) => return Err(Error::config("flow", format!("{kind} needs a flow spec"))),
            (Some(_), false) => return Err(Error::config("flow", format!("{kind} takes no flow"))),
            _ => {}
        }
        if let Some(f) = &self.flow {
            let h = f.hyperparameters.values();
            if h.seed != 0 {
                return Err(Error::config(
                    "flow.hyperparameters.seed",
                    "the flow is seeded from the experiment seed",
                ));
            }
            h.resolve(f.architecture)
                .map_err(|e| Error::config("flow.hyperparameters", e.to_string()))?;
        }
        Ok(())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Resolved hyperparameters of the flow, seeded from the experiment.
    pub fn flow_hyperparameters(&self) -> Option<Result<FlowHyperparameters>> {
        self.flow.as_ref().map(|f| {
            let mut h = f.hyperparameters.values().resolve(f.architecture)?;
            h.seed = self.seed;
            Ok(h)
        })
    }

    /// `sampler` or `sampler/architecture/hyperparameter-id`.
    pub fn method(&self) -> String {
        match &self.flow {
            None => self.sampler.kind.to_string(),
            Some(f) => {
                let id = f
                    .hyperparameters
                    .values()
                    .resolve(f.architecture)
                    .map(|h| h.id())
                    .unwrap_or_else(|_| "invalid".into());
                format!("{}/{}/{id}", self.sampler.kind, f.architecture)
            }
        }
    }
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("", format!("cannot read {}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    config.base_dir = Some(path.parent().map(Path::to_path_buf).unwrap_or_default());
    Ok(config)
}
