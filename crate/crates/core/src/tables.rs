//! Hyperparameter and per-layer-type component tables.
//!
//! Every random construction decision in a run is driven by these tables:
//! graph sizes, layer types, concrete layer parameters and training
//! hyperparameters. Tables are parsed once from the run configuration and
//! stay immutable for the whole run.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A concrete sampled value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{}", v),
            ParamValue::Float(v) => write!(f, "{}", v),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

/// How a parameter is decided when sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    #[serde(rename = "fixed")]
    Fixed,
    #[serde(rename = "random-integer")]
    RandomInteger,
    #[serde(rename = "random-float")]
    RandomFloat,
    #[serde(rename = "random-choice")]
    RandomChoice,
}

/// One named decision: its kind plus its options (a choice list, or an
/// inclusive `[low, high]` interval for the random-integer/float kinds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub options: Vec<ParamValue>,
}

impl ParamSpec {
    /// Structural checks: fixed has exactly one option, intervals are
    /// numeric two-element `low <= high` pairs, choices are non-empty.
    pub fn check(&self) -> Result<(), ParseError> {
        let key = self.name.clone();
        match self.kind {
            ParamKind::Fixed => {
                if self.options.len() != 1 {
                    return Err(ParseError::BadOptions {
                        key,
                        reason: format!("fixed needs exactly 1 option, got {}", self.options.len()),
                    });
                }
            }
            ParamKind::RandomChoice => {
                if self.options.is_empty() {
                    return Err(ParseError::BadOptions {
                        key,
                        reason: "random-choice needs at least 1 option".into(),
                    });
                }
            }
            ParamKind::RandomInteger => {
                let (lo, hi) = self.interval_ints().ok_or_else(|| ParseError::BadOptions {
                    key: key.clone(),
                    reason: "random-integer needs an integer [low, high] pair".into(),
                })?;
                if lo > hi {
                    return Err(ParseError::BadOptions {
                        key,
                        reason: format!("empty interval [{}, {}]", lo, hi),
                    });
                }
            }
            ParamKind::RandomFloat => {
                let (lo, hi) = self.interval_floats().ok_or_else(|| ParseError::BadOptions {
                    key: key.clone(),
                    reason: "random-float needs a numeric [low, high] pair".into(),
                })?;
                if lo > hi {
                    return Err(ParseError::BadOptions {
                        key,
                        reason: format!("empty interval [{}, {}]", lo, hi),
                    });
                }
            }
        }
        Ok(())
    }

    fn interval_ints(&self) -> Option<(i64, i64)> {
        if self.options.len() != 2 {
            return None;
        }
        Some((self.options[0].as_int()?, self.options[1].as_int()?))
    }

    fn interval_floats(&self) -> Option<(f64, f64)> {
        if self.options.len() != 2 {
            return None;
        }
        Some((self.options[0].as_float()?, self.options[1].as_float()?))
    }

    /// Draws one value: fixed returns the single option, intervals sample
    /// uniformly (integers inclusive), choices sample uniformly.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> ParamValue {
        match self.kind {
            ParamKind::Fixed => self.options[0].clone(),
            ParamKind::RandomChoice => self.options[rng.random_range(0..self.options.len())].clone(),
            ParamKind::RandomInteger => {
                let (lo, hi) = self.interval_ints().expect("checked at parse time");
                ParamValue::Int(rng.random_range(lo..=hi))
            }
            ParamKind::RandomFloat => {
                let (lo, hi) = self.interval_floats().expect("checked at parse time");
                if lo == hi {
                    ParamValue::Float(lo)
                } else {
                    ParamValue::Float(rng.random_range(lo..hi))
                }
            }
        }
    }

    /// Whether `value` could have been produced by this spec.
    pub fn admits(&self, value: &ParamValue) -> bool {
        match self.kind {
            ParamKind::Fixed | ParamKind::RandomChoice => self.options.contains(value),
            ParamKind::RandomInteger => {
                let (lo, hi) = match self.interval_ints() {
                    Some(p) => p,
                    None => return false,
                };
                value.as_int().is_some_and(|v| lo <= v && v <= hi)
            }
            ParamKind::RandomFloat => {
                let (lo, hi) = match self.interval_floats() {
                    Some(p) => p,
                    None => return false,
                };
                value.as_float().is_some_and(|v| lo <= v && v <= hi)
            }
        }
    }

    /// Inclusive integer interval, for specs used as size ranges.
    pub fn as_size_range(&self) -> Option<(usize, usize)> {
        let (lo, hi) = self.interval_ints().or_else(|| {
            // A fixed size is a degenerate interval.
            if self.kind == ParamKind::Fixed {
                let v = self.options[0].as_int()?;
                Some((v, v))
            } else {
                None
            }
        })?;
        if lo < 0 || hi < 0 {
            return None;
        }
        Some((lo as usize, hi as usize))
    }
}

/// The seven global decisions every run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamTable {
    pub module_size: ParamSpec,
    pub blueprint_size: ParamSpec,
    pub intermediate_component_types: ParamSpec,
    pub output_component_types: ParamSpec,
    pub loss_functions: ParamSpec,
    pub optimizers: ParamSpec,
    pub evaluation_metrics: ParamSpec,
}

pub const HYPER_ENTRIES: [&str; 7] = [
    "module_size",
    "blueprint_size",
    "intermediate_component_types",
    "output_component_types",
    "loss_functions",
    "optimizers",
    "evaluation_metrics",
];

impl HyperparamTable {
    pub fn entry(&self, name: &str) -> Option<&ParamSpec> {
        match name {
            "module_size" => Some(&self.module_size),
            "blueprint_size" => Some(&self.blueprint_size),
            "intermediate_component_types" => Some(&self.intermediate_component_types),
            "output_component_types" => Some(&self.output_component_types),
            "loss_functions" => Some(&self.loss_functions),
            "optimizers" => Some(&self.optimizers),
            "evaluation_metrics" => Some(&self.evaluation_metrics),
            _ => None,
        }
    }
}

/// Parameter specs for one layer type (e.g. filters/kernel/stride/activation
/// /dropout for convolutional layers, units/activation for dense layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentTable {
    pub layer_type: String,
    pub params: Vec<ParamSpec>,
}

impl ComponentTable {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// A concrete layer: its type plus fully sampled parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_type: String,
    pub params: BTreeMap<String, ParamValue>,
}

impl LayerSpec {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    /// Short human-readable form used in DOT labels and logs.
    pub fn summary(&self) -> String {
        let params: Vec<String> =
            self.params.iter().map(|(k, v)| format!("{}={}", k, v)).collect();
        format!("{}({})", self.layer_type, params.join(", "))
    }
}

/// Scalar training settings not covered by the tables themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingDefaults {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        TrainingDefaults { learning_rate: 1e-3, epochs: 4, batch_size: 64 }
    }
}

/// Training hyperparameters bound to one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub loss: String,
    pub optimizer: String,
    pub metrics: Vec<String>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        let d = TrainingDefaults::default();
        TrainingHyperparams {
            loss: "categorical_crossentropy".to_string(),
            optimizer: "adam".to_string(),
            metrics: vec!["accuracy".to_string()],
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

/// The full immutable table set for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterTables {
    pub hyper: HyperparamTable,
    pub components: Vec<ComponentTable>,
    pub training: TrainingDefaults,
}

impl ParameterTables {
    pub fn component(&self, layer_type: &str) -> Option<&ComponentTable> {
        self.components.iter().find(|c| c.layer_type == layer_type)
    }

    /// Samples a concrete layer of a type drawn from the intermediate
    /// component types.
    pub fn sample_intermediate_layer<R: Rng>(&self, rng: &mut R) -> LayerSpec {
        let ty = self.hyper.intermediate_component_types.sample(rng);
        let ty = ty.as_str().expect("component types are names");
        let table = self
            .component(ty)
            .unwrap_or_else(|| panic!("no component table for layer type {ty:?}"));
        sample_layer(table, rng)
    }

    /// Samples the training hyperparameters for one individual.
    pub fn sample_training_hyperparams<R: Rng>(&self, rng: &mut R) -> TrainingHyperparams {
        let loss = self.hyper.loss_functions.sample(rng).to_string();
        let optimizer = self.hyper.optimizers.sample(rng).to_string();
        let metrics = vec![self.hyper.evaluation_metrics.sample(rng).to_string()];
        TrainingHyperparams {
            loss,
            optimizer,
            metrics,
            learning_rate: self.training.learning_rate,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
        }
    }
}

/// Samples every parameter of a component table independently.
pub fn sample_layer<R: Rng>(table: &ComponentTable, rng: &mut R) -> LayerSpec {
    let params = table
        .params
        .iter()
        .map(|spec| (spec.name.clone(), spec.sample(rng)))
        .collect();
    LayerSpec { layer_type: table.layer_type.clone(), params }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("configuration is not valid TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("param.{key}: unknown kind {kind:?} (expected fixed, random-integer, random-float or random-choice)")]
    UnknownKind { key: String, kind: String },
    #[error("param.{key}: {reason}")]
    BadOptions { key: String, reason: String },
    #[error("param.hyper is missing required entry {name:?}")]
    MissingHyperEntry { name: String },
    #[error("param.{key}: expected a table with `kind` and `options`")]
    MalformedSpec { key: String },
}

#[derive(Debug, Deserialize, Serialize)]
struct RawSpec {
    kind: String,
    options: Vec<ParamValue>,
}

/// Parses the `[param.*]` and `[training]` sections of a configuration
/// document. `param.hyper.<name>` entries populate the hyperparameter
/// table; any other scope becomes a component table for that layer type.
pub fn parse_tables(config_text: &str) -> Result<ParameterTables, ParseError> {
    let doc: toml::Value = toml::from_str(config_text)?;
    parse_tables_value(&doc)
}

/// Same as [`parse_tables`] but over an already-parsed TOML document, so
/// the run configuration can share one file with the tables.
pub fn parse_tables_value(doc: &toml::Value) -> Result<ParameterTables, ParseError> {
    let empty = toml::map::Map::new();
    let param = doc
        .get("param")
        .and_then(|v| v.as_table())
        .unwrap_or(&empty);

    let mut hyper_specs: BTreeMap<String, ParamSpec> = BTreeMap::new();
    let mut components = Vec::new();

    for (scope, entries) in param {
        let entries = entries
            .as_table()
            .ok_or_else(|| ParseError::MalformedSpec { key: scope.clone() })?;
        let mut specs = Vec::new();
        for (name, raw) in entries {
            let key = format!("{}.{}", scope, name);
            let raw: RawSpec = raw
                .clone()
                .try_into()
                .map_err(|_| ParseError::MalformedSpec { key: key.clone() })?;
            let kind = match raw.kind.as_str() {
                "fixed" => ParamKind::Fixed,
                "random-integer" => ParamKind::RandomInteger,
                "random-float" => ParamKind::RandomFloat,
                "random-choice" => ParamKind::RandomChoice,
                other => {
                    return Err(ParseError::UnknownKind { key, kind: other.to_string() })
                }
            };
            let spec = ParamSpec { name: name.clone(), kind, options: raw.options };
            spec.check().map_err(|e| match e {
                ParseError::BadOptions { reason, .. } => ParseError::BadOptions { key, reason },
                other => other,
            })?;
            specs.push(spec);
        }
        if scope == "hyper" {
            for spec in specs {
                hyper_specs.insert(spec.name.clone(), spec);
            }
        } else {
            components.push(ComponentTable { layer_type: scope.clone(), params: specs });
        }
    }

    let mut take = |name: &str| {
        hyper_specs
            .remove(name)
            .ok_or_else(|| ParseError::MissingHyperEntry { name: name.to_string() })
    };
    let hyper = HyperparamTable {
        module_size: take("module_size")?,
        blueprint_size: take("blueprint_size")?,
        intermediate_component_types: take("intermediate_component_types")?,
        output_component_types: take("output_component_types")?,
        loss_functions: take("loss_functions")?,
        optimizers: take("optimizers")?,
        evaluation_metrics: take("evaluation_metrics")?,
    };

    let training = match doc.get("training") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|_| ParseError::MalformedSpec { key: "training".into() })?,
        None => TrainingDefaults::default(),
    };

    Ok(ParameterTables { hyper, components, training })
}

/// Serializes tables back into the configuration grammar. Parsing the
/// result yields an equivalent table set.
pub fn serialize_tables(tables: &ParameterTables) -> String {
    let mut doc = toml::map::Map::new();
    let mut param = toml::map::Map::new();

    let mut hyper = toml::map::Map::new();
    for name in HYPER_ENTRIES {
        let spec = tables.hyper.entry(name).unwrap();
        hyper.insert(name.to_string(), spec_to_toml(spec));
    }
    param.insert("hyper".into(), toml::Value::Table(hyper));

    for comp in &tables.components {
        let mut entries = toml::map::Map::new();
        for spec in &comp.params {
            entries.insert(spec.name.clone(), spec_to_toml(spec));
        }
        param.insert(comp.layer_type.clone(), toml::Value::Table(entries));
    }

    doc.insert("param".into(), toml::Value::Table(param));
    doc.insert(
        "training".into(),
        toml::Value::try_from(tables.training).expect("defaults serialize"),
    );
    toml::to_string_pretty(&toml::Value::Table(doc)).expect("tables serialize")
}

fn spec_to_toml(spec: &ParamSpec) -> toml::Value {
    let kind = match spec.kind {
        ParamKind::Fixed => "fixed",
        ParamKind::RandomInteger => "random-integer",
        ParamKind::RandomFloat => "random-float",
        ParamKind::RandomChoice => "random-choice",
    };
    let options: Vec<toml::Value> = spec
        .options
        .iter()
        .map(|v| match v {
            ParamValue::Int(i) => toml::Value::Integer(*i),
            ParamValue::Float(f) => toml::Value::Float(*f),
            ParamValue::Str(s) => toml::Value::String(s.clone()),
        })
        .collect();
    let mut t = toml::map::Map::new();
    t.insert("kind".into(), toml::Value::String(kind.into()));
    t.insert("options".into(), toml::Value::Array(options));
    toml::Value::Table(t)
}
