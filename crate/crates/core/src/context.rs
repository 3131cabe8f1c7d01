//! Contextual data states: schema, per-kind normalization and encoding of
//! context windows into model-ready matrices.
//!
//! Four kinds of state are supported. Ranged states are projected linearly
//! onto `[0, 1]`, unlimited states are squashed with `tanh(v / soft_max)`,
//! boolean states map to `0`/`1` in schema order and enumerated states become
//! one-hot vectors (fewer than ten categories) or rows of a trainable
//! embedding table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::EmbedSlot;
use crate::error::{CatpError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Enumerated states with at least this many categories use a trainable embedding.
pub const ONE_HOT_LIMIT: usize = 10;

/// A raw data-state value as recorded in a data frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateValue {
    Number(f64),
    Category(String),
}

impl StateValue {
    pub fn category(s: impl Into<String>) -> Self {
        Self::Category(s.into())
    }
}

impl From<f64> for StateValue {
    fn from(v: f64) -> Self {
        Self::Number(v)
    }
}

impl From<&str> for StateValue {
    fn from(v: &str) -> Self {
        Self::Category(v.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateKind {
    Ranged { min: f64, max: f64 },
    Unlimited { soft_max: f64 },
    /// The first category encodes as 0, the second as 1.
    Boolean { categories: [String; 2] },
    Enumerated { categories: Vec<String>, embedding_len: usize },
}

/// Declaration of one contextual data state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStateSpec", into = "RawStateSpec")]
pub struct DataStateSpec {
    pub name: String,
    pub kind: StateKind,
}

/// Flat on-disk form of [`DataStateSpec`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RawStateSpec {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    soft_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_len: Option<usize>,
}

impl TryFrom<RawStateSpec> for DataStateSpec {
    type Error = CatpError;

    fn try_from(raw: RawStateSpec) -> Result<Self> {
        let missing = |field: &str| CatpError::config(format!("state '{}' ({}) is missing '{field}'", raw.name, raw.kind));
        let kind = match raw.kind.as_str() {
            "ranged" => StateKind::Ranged {
                min: raw.min.ok_or_else(|| missing("min"))?,
                max: raw.max.ok_or_else(|| missing("max"))?,
            },
            "unlimited" => StateKind::Unlimited {
                soft_max: raw.soft_max.ok_or_else(|| missing("soft_max"))?,
            },
            "boolean" => {
                let cats = raw.categories.clone().ok_or_else(|| missing("categories"))?;
                let [a, b]: [String; 2] = cats.try_into().map_err(|c: Vec<String>| {
                    CatpError::config(format!("boolean state '{}' needs exactly 2 categories, got {}", raw.name, c.len()))
                })?;
                StateKind::Boolean { categories: [a, b] }
            }
            "enumerated" => {
                let categories = raw.categories.clone().ok_or_else(|| missing("categories"))?;
                let embedding_len = match raw.embedding_len {
                    Some(le) => le,
                    None if categories.len() < ONE_HOT_LIMIT => categories.len(),
                    None => return Err(missing("embedding_len")),
                };
                StateKind::Enumerated {
                    categories,
                    embedding_len,
                }
            }
            other => return Err(CatpError::config(format!("unknown state kind '{other}' for '{}'", raw.name))),
        };
        let spec = DataStateSpec { name: raw.name, kind };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<DataStateSpec> for RawStateSpec {
    fn from(spec: DataStateSpec) -> Self {
        let mut raw = RawStateSpec {
            name: spec.name,
            ..Default::default()
        };
        match spec.kind {
            StateKind::Ranged { min, max } => {
                raw.kind = "ranged".into();
                raw.min = Some(min);
                raw.max = Some(max);
            }
            StateKind::Unlimited { soft_max } => {
                raw.kind = "unlimited".into();
                raw.soft_max = Some(soft_max);
            }
            StateKind::Boolean { categories } => {
                raw.kind = "boolean".into();
                raw.categories = Some(categories.to_vec());
            }
            StateKind::Enumerated {
                categories,
                embedding_len,
            } => {
                raw.kind = "enumerated".into();
                raw.categories = Some(categories);
                raw.embedding_len = Some(embedding_len);
            }
        }
        raw
    }
}

impl DataStateSpec {
    pub fn ranged(name: &str, min: f64, max: f64) -> Result<Self> {
        Self::checked(name, StateKind::Ranged { min, max })
    }

    pub fn unlimited(name: &str, soft_max: f64) -> Result<Self> {
        Self::checked(name, StateKind::Unlimited { soft_max })
    }

    pub fn boolean(name: &str, first: &str, second: &str) -> Result<Self> {
        Self::checked(
            name,
            StateKind::Boolean {
                categories: [first.to_string(), second.to_string()],
            },
        )
    }

    /// One-hot when fewer than ten categories, otherwise an embedding of `embedding_len`.
    pub fn enumerated(name: &str, categories: &[&str], embedding_len: Option<usize>) -> Result<Self> {
        let embedding_len = embedding_len.unwrap_or(categories.len());
        Self::checked(
            name,
            StateKind::Enumerated {
                categories: categories.iter().map(|c| c.to_string()).collect(),
                embedding_len,
            },
        )
    }

    fn checked(name: &str, kind: StateKind) -> Result<Self> {
        let s = Self {
            name: name.to_string(),
            kind,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CatpError::config(format!("state '{}': {msg}", self.name)));
        match &self.kind {
            StateKind::Ranged { min, max } => {
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return bad(format!("ranged bounds must satisfy MIN < MAX (got {min}, {max})"));
                }
            }
            StateKind::Unlimited { soft_max } => {
                if !(soft_max.is_finite() && *soft_max > 0.0) {
                    return bad(format!("soft_max must be positive (got {soft_max})"));
                }
            }
            StateKind::Boolean { categories } => {
                if categories[0] == categories[1] {
                    return bad("boolean categories must differ".into());
                }
            }
            StateKind::Enumerated {
                categories,
                embedding_len,
            } => {
                let n = categories.len();
                if n == 0 {
                    return bad("enumerated state needs categories".into());
                }
                let mut sorted = categories.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != n {
                    return bad("duplicate categories".into());
                }
                if n < ONE_HOT_LIMIT {
                    if *embedding_len != n {
                        return bad(format!("one-hot state with {n} categories needs embedding_len = {n}"));
                    }
                } else if !(1 < *embedding_len && *embedding_len < n) {
                    return bad(format!("embedding_len must lie strictly between 1 and {n}"));
                }
            }
        }
        Ok(())
    }

    /// Number of encoded columns this state occupies.
    pub fn encoded_len(&self) -> usize {
        match &self.kind {
            StateKind::Enumerated { embedding_len, .. } => *embedding_len,
            _ => 1,
        }
    }

    /// True when the state is encoded through a trainable embedding table.
    pub fn is_trainable(&self) -> bool {
        matches!(&self.kind, StateKind::Enumerated { categories, .. } if categories.len() >= ONE_HOT_LIMIT)
    }
}

/// What to do with an enumerated value outside the declared categories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownCategory {
    Error,
    /// All-zero one-hot vector, or a dedicated extra embedding row.
    #[default]
    Reserved,
}

/// Ordered schema of the `N` contextual data states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub states: Vec<DataStateSpec>,
    #[serde(default)]
    pub unknown_category: UnknownCategory,
}

/// Shape of one trainable embedding table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableShape {
    pub state: String,
    /// Categories plus the reserved unknown row.
    pub rows: usize,
    pub cols: usize,
}

impl ContextSpec {
    pub fn new(states: Vec<DataStateSpec>) -> Result<Self> {
        let spec = Self {
            states,
            unknown_category: UnknownCategory::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(CatpError::config("context schema declares no states"));
        }
        let mut names: Vec<&str> = self.states.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.states.len() {
            return Err(CatpError::config("duplicate state names in context schema"));
        }
        self.states.iter().try_for_each(DataStateSpec::validate)
    }

    /// Reads a JSON or TOML schema file (by extension; JSON otherwise).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let spec: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| CatpError::config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| CatpError::config(format!("{}: {e}", path.display())))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    /// `N + Σ(LE_i − 1)` over enumerated states.
    pub fn encoded_width(&self) -> usize {
        self.states.iter().map(DataStateSpec::encoded_len).sum()
    }

    /// Starting column of each state in an encoded frame.
    pub fn column_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.states.len());
        let mut acc = 0;
        for s in &self.states {
            offsets.push(acc);
            acc += s.encoded_len();
        }
        offsets
    }

    pub fn trainable_tables(&self) -> Vec<TableShape> {
        self.states
            .iter()
            .filter(|s| s.is_trainable())
            .map(|s| match &s.kind {
                StateKind::Enumerated {
                    categories,
                    embedding_len,
                } => TableShape {
                    state: s.name.clone(),
                    rows: categories.len() + 1,
                    cols: *embedding_len,
                },
                _ => unreachable!("trainable states are enumerated"),
            })
            .collect()
    }
}

fn finite(value: f64, name: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CatpError::invalid(format!("state '{name}' has non-finite value {value}")))
    }
}

/// `(v − MIN) / (MAX − MIN)`, with `v` clamped to `[MIN, MAX]` first.
pub fn normalize_ranged(value: f64, spec: &DataStateSpec) -> Result<f64> {
    let StateKind::Ranged { min, max } = spec.kind else {
        return Err(CatpError::invalid(format!("state '{}' is not ranged", spec.name)));
    };
    let v = finite(value, &spec.name)?.clamp(min, max);
    Ok((v - min) / (max - min))
}

/// `tanh(v / soft_max)` for `v ≥ 0`.
pub fn normalize_unlimited(value: f64, spec: &DataStateSpec) -> Result<f64> {
    let StateKind::Unlimited { soft_max } = spec.kind else {
        return Err(CatpError::invalid(format!("state '{}' is not unlimited", spec.name)));
    };
    let v = finite(value, &spec.name)?;
    if v < 0.0 {
        return Err(CatpError::invalid(format!("unlimited state '{}' must be non-negative, got {v}", spec.name)));
    }
    Ok((v / soft_max).tanh())
}

pub fn normalize_boolean(value: &StateValue, spec: &DataStateSpec) -> Result<f64> {
    let StateKind::Boolean { categories } = &spec.kind else {
        return Err(CatpError::invalid(format!("state '{}' is not boolean", spec.name)));
    };
    match value {
        StateValue::Category(c) if *c == categories[0] => Ok(0.0),
        StateValue::Category(c) if *c == categories[1] => Ok(1.0),
        StateValue::Number(n) if *n == 0.0 || *n == 1.0 => Ok(*n),
        other => Err(CatpError::invalid(format!("unknown state {other:?} for boolean '{}'", spec.name))),
    }
}

/// Position of `value` in the category list, `None` for unseen categories.
pub fn category_index(value: &StateValue, spec: &DataStateSpec) -> Result<Option<usize>> {
    let StateKind::Enumerated { categories, .. } = &spec.kind else {
        return Err(CatpError::invalid(format!("state '{}' is not enumerated", spec.name)));
    };
    Ok(match value {
        StateValue::Category(c) => categories.iter().position(|x| x == c),
        StateValue::Number(n) => categories.iter().position(|x| x.parse::<f64>().ok() == Some(*n)),
    })
}

/// Trainable embedding tables, keyed by state name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables<T> {
    pub tables: BTreeMap<String, Tensor<T>>,
}

/// Encodes an enumerated value: the one-hot vector, or the current embedding row.
pub fn encode_enumerated<T: Scalar>(
    value: &StateValue,
    spec: &DataStateSpec,
    unknown: UnknownCategory,
    tables: &EmbeddingTables<T>,
) -> Result<Vec<T>> {
    let idx = resolve_category(value, spec, unknown)?;
    let StateKind::Enumerated { categories, embedding_len } = &spec.kind else {
        unreachable!("checked by resolve_category");
    };
    if spec.is_trainable() {
        let table = tables
            .tables
            .get(&spec.name)
            .ok_or_else(|| CatpError::invalid(format!("no embedding table for '{}'", spec.name)))?;
        let row = idx.unwrap_or(categories.len());
        Ok(table.row(row).to_vec())
    } else {
        let mut v = vec![T::zero(); *embedding_len];
        if let Some(i) = idx {
            v[i] = T::one();
        }
        Ok(v)
    }
}

fn resolve_category(value: &StateValue, spec: &DataStateSpec, unknown: UnknownCategory) -> Result<Option<usize>> {
    match category_index(value, spec)? {
        Some(i) => Ok(Some(i)),
        None if unknown == UnknownCategory::Reserved => Ok(None),
        None => Err(CatpError::invalid(format!("unseen category {value:?} for '{}'", spec.name))),
    }
}

/// The last `LC` data frames; each frame holds one value per schema state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub frames: Vec<Vec<StateValue>>,
}

/// A context window with its constant part encoded and the trainable
/// embedding lookups left as slots for the manager to fill on its tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedContext<T> {
    pub dense: Tensor<T>,
    /// One entry per trainable table, in schema order.
    pub lookups: Vec<(String, Vec<EmbedSlot>)>,
}

impl<T: Scalar> EncodedContext<T> {
    pub fn frames(&self) -> usize {
        self.dense.rows()
    }

    pub fn width(&self) -> usize {
        self.dense.cols()
    }

    /// Fills the embedding slots from `tables`.
    pub fn materialize(&self, tables: &EmbeddingTables<T>) -> Result<Tensor<T>> {
        let mut out = self.dense.clone();
        for (name, slots) in &self.lookups {
            let table = tables
                .tables
                .get(name)
                .ok_or_else(|| CatpError::invalid(format!("no embedding table for '{name}'")))?;
            for s in slots {
                out.row_mut(s.row)[s.col..s.col + table.cols()].copy_from_slice(table.row(s.table_row));
            }
        }
        Ok(out)
    }
}

/// Encodes `window` up to the trainable embedding lookups.
pub fn encode_context_slots<T: Scalar>(window: &ContextWindow, schema: &ContextSpec) -> Result<EncodedContext<T>> {
    if window.frames.is_empty() {
        return Err(CatpError::invalid("context window has no frames"));
    }
    let width = schema.encoded_width();
    let offsets = schema.column_offsets();
    let mut dense = Tensor::zeros(window.frames.len(), width);
    let mut lookups: Vec<(String, Vec<EmbedSlot>)> = schema
        .states
        .iter()
        .filter(|s| s.is_trainable())
        .map(|s| (s.name.clone(), Vec::new()))
        .collect();
    let empty = EmbeddingTables::<T>::default();
    for (r, frame) in window.frames.iter().enumerate() {
        if frame.len() != schema.len() {
            return Err(CatpError::invalid(format!(
                "frame {r} has {} states, schema declares {}",
                frame.len(),
                schema.len()
            )));
        }
        let mut table_idx = 0;
        for ((spec, value), &col) in schema.states.iter().zip(frame).zip(&offsets) {
            let number = |v: &StateValue| match v {
                StateValue::Number(n) => Ok(*n),
                StateValue::Category(c) => c
                    .parse::<f64>()
                    .map_err(|_| CatpError::invalid(format!("state '{}' expects a number, got '{c}'", spec.name))),
            };
            match &spec.kind {
                StateKind::Ranged { .. } => dense.set(r, col, T::lit(normalize_ranged(number(value)?, spec)?)),
                StateKind::Unlimited { .. } => dense.set(r, col, T::lit(normalize_unlimited(number(value)?, spec)?)),
                StateKind::Boolean { .. } => dense.set(r, col, T::lit(normalize_boolean(value, spec)?)),
                StateKind::Enumerated { categories, .. } => {
                    if spec.is_trainable() {
                        let idx = resolve_category(value, spec, schema.unknown_category)?;
                        lookups[table_idx].1.push(EmbedSlot {
                            row: r,
                            col,
                            table_row: idx.unwrap_or(categories.len()),
                        });
                        table_idx += 1;
                    } else {
                        let v = encode_enumerated(value, spec, schema.unknown_category, &empty)?;
                        dense.row_mut(r)[col..col + v.len()].copy_from_slice(&v);
                    }
                }
            }
        }
    }
    Ok(EncodedContext { dense, lookups })
}

/// Encodes `window` into an `LC × (N + Σ(LE_i − 1))` matrix, in schema order.
pub fn encode_context<T: Scalar>(
    window: &ContextWindow,
    schema: &ContextSpec,
    tables: &EmbeddingTables<T>,
) -> Result<Tensor<T>> {
    encode_context_slots(window, schema)?.materialize(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hero_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("hero{i}")).collect()
    }

    #[test]
    fn ranged_examples() {
        let spec = DataStateSpec::ranged("health", 0.0, 3000.0).unwrap();
        assert_eq!(normalize_ranged(1500.0, &spec).unwrap(), 0.5);
        assert_eq!(normalize_ranged(0.0, &spec).unwrap(), 0.0);
        assert_eq!(normalize_ranged(2250.0, &spec).unwrap(), 0.75);
        assert_eq!(normalize_ranged(-10.0, &spec).unwrap(), 0.0);
        assert_eq!(normalize_ranged(1e9, &spec).unwrap(), 1.0);
        assert!(normalize_ranged(f64::NAN, &spec).is_err());
    }

    #[test]
    fn unlimited_examples() {
        let spec = DataStateSpec::unlimited("respawn", 60.0).unwrap();
        assert_eq!(normalize_unlimited(0.0, &spec).unwrap(), 0.0);
        // tanh(1) = 0.76159415595576488812 (series oracle below)
        let tanh1 = tanh_series(1.0);
        assert!((normalize_unlimited(60.0, &spec).unwrap() - tanh1).abs() < 1e-12);
        assert!((normalize_unlimited(60.0, &spec).unwrap() - 0.761594).abs() < 1e-6);
        assert!((normalize_unlimited(600.0, &spec).unwrap() - 1.0).abs() < 1e-8);
        assert!(normalize_unlimited(-1.0, &spec).is_err());
    }

    /// tanh via exp series, independent of the std implementation.
    fn tanh_series(x: f64) -> f64 {
        let exp = |y: f64| {
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..60 {
                term *= y / k as f64;
                sum += term;
            }
            sum
        };
        (exp(x) - exp(-x)) / (exp(x) + exp(-x))
    }

    #[test]
    fn boolean_examples() {
        let spec = DataStateSpec::boolean("daylight", "daytime", "nighttime").unwrap();
        assert_eq!(normalize_boolean(&"daytime".into(), &spec).unwrap(), 0.0);
        assert_eq!(normalize_boolean(&"nighttime".into(), &spec).unwrap(), 1.0);
        assert_eq!(
            normalize_boolean(&"nighttime".into(), &spec).unwrap(),
            normalize_boolean(&"nighttime".into(), &spec).unwrap()
        );
        assert!(normalize_boolean(&"dusk".into(), &spec).is_err());
    }

    #[test]
    fn enumerated_one_hot_and_embedding() {
        let spec = DataStateSpec::enumerated("terrain", &["grass", "sand", "rock"], None).unwrap();
        let empty = EmbeddingTables::<f64>::default();
        let v = encode_enumerated(&"sand".into(), &spec, UnknownCategory::Error, &empty).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
        let w = encode_enumerated(&"rock".into(), &spec, UnknownCategory::Error, &empty).unwrap();
        assert_ne!(v, w);
        assert!(encode_enumerated(&"lava".into(), &spec, UnknownCategory::Error, &empty).is_err());
        let z = encode_enumerated(&"lava".into(), &spec, UnknownCategory::Reserved, &empty).unwrap();
        assert_eq!(z, vec![0.0; 3]);

        let names = hero_names(120);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let heroes = DataStateSpec::enumerated("hero", &refs, Some(5)).unwrap();
        assert!(heroes.is_trainable());
        let mut tables = EmbeddingTables::default();
        let table = Tensor::from_vec(121, 5, (0..605).map(|i| i as f64).collect());
        tables.tables.insert("hero".to_string(), table);
        let e = encode_enumerated(&"hero3".into(), &heroes, UnknownCategory::Reserved, &tables).unwrap();
        assert_eq!(e, vec![15.0, 16.0, 17.0, 18.0, 19.0]);
        let unk = encode_enumerated(&"nobody".into(), &heroes, UnknownCategory::Reserved, &tables).unwrap();
        assert_eq!(unk, vec![600.0, 601.0, 602.0, 603.0, 604.0]);
    }

    #[test]
    fn enumerated_validation() {
        assert!(DataStateSpec::enumerated("e", &["a", "b", "c"], Some(2)).is_err());
        let names = hero_names(12);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        assert!(DataStateSpec::enumerated("e", &refs, Some(12)).is_err());
        assert!(DataStateSpec::enumerated("e", &refs, Some(1)).is_err());
        assert!(DataStateSpec::enumerated("e", &refs, Some(4)).is_ok());
        assert!(DataStateSpec::ranged("r", 1.0, 1.0).is_err());
        assert!(DataStateSpec::unlimited("u", 0.0).is_err());
    }

    #[test]
    fn encode_context_shapes() {
        let two = ContextSpec::new(vec![
            DataStateSpec::ranged("a", 0.0, 1.0).unwrap(),
            DataStateSpec::unlimited("b", 2.0).unwrap(),
        ])
        .unwrap();
        let window = ContextWindow {
            frames: vec![vec![0.5.into(), 1.0.into()]; 5],
        };
        let m = encode_context::<f64>(&window, &two, &EmbeddingTables::default()).unwrap();
        assert_eq!(m.shape(), (5, 2));

        let three = ContextSpec::new(vec![
            DataStateSpec::ranged("a", 0.0, 1.0).unwrap(),
            DataStateSpec::enumerated("e", &["w", "x", "y", "z"], None).unwrap(),
            DataStateSpec::boolean("b", "off", "on").unwrap(),
        ])
        .unwrap();
        assert_eq!(three.encoded_width(), 6);
        let window = ContextWindow {
            frames: vec![vec![0.25.into(), "y".into(), "on".into()]],
        };
        let m = encode_context::<f64>(&window, &three, &EmbeddingTables::default()).unwrap();
        assert_eq!(m.data(), &[0.25, 0.0, 0.0, 1.0, 0.0, 1.0]);

        let empty = ContextWindow { frames: vec![] };
        assert!(encode_context::<f64>(&empty, &three, &EmbeddingTables::default()).is_err());
        let short = ContextWindow {
            frames: vec![vec![0.25.into()]],
        };
        assert!(encode_context::<f64>(&short, &three, &EmbeddingTables::default()).is_err());
    }

    #[test]
    fn schema_file_field_names() {
        let json = r#"{"states": [
            {"name": "hp", "kind": "ranged", "min": 0, "max": 3000},
            {"name": "respawn", "kind": "unlimited", "soft_max": 60},
            {"name": "light", "kind": "boolean", "categories": ["daytime", "nighttime"]},
            {"name": "terrain", "kind": "enumerated", "categories": ["a", "b", "c"]}
        ]}"#;
        let spec: ContextSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.encoded_width(), 6);
        assert_eq!(spec.unknown_category, UnknownCategory::Reserved);
        let back: ContextSpec = serde_json::from_str(&spec.to_json().unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"states": [{"name": "hp", "kind": "ranged", "min": 5, "max": 1}]}"#;
        assert!(serde_json::from_str::<ContextSpec>(bad).is_err());
        let missing = r#"{"states": [{"name": "hp", "kind": "unlimited"}]}"#;
        assert!(serde_json::from_str::<ContextSpec>(missing).is_err());
    }

    fn arb_state(i: usize) -> impl Strategy<Value = DataStateSpec> {
        prop_oneof![
            (-100.0..100.0f64, 0.1..50.0f64)
                .prop_map(move |(lo, w)| DataStateSpec::ranged(&format!("r{i}"), lo, lo + w).unwrap()),
            (0.1..100.0f64).prop_map(move |m| DataStateSpec::unlimited(&format!("u{i}"), m).unwrap()),
            Just(DataStateSpec::boolean(&format!("b{i}"), "no", "yes").unwrap()),
            (1usize..9).prop_map(move |n| {
                let cats = hero_names(n);
                let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
                DataStateSpec::enumerated(&format!("e{i}"), &refs, None).unwrap()
            }),
            (10usize..30, 2usize..9).prop_map(move |(n, le)| {
                let cats = hero_names(n);
                let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
                DataStateSpec::enumerated(&format!("t{i}"), &refs, Some(le)).unwrap()
            }),
        ]
    }

    fn arb_schema() -> impl Strategy<Value = ContextSpec> {
        (1usize..6)
            .prop_flat_map(|n| (0..n).map(arb_state).collect::<Vec<_>>())
            .prop_map(|states| ContextSpec::new(states).unwrap())
    }

    fn value_for(spec: &DataStateSpec, u: f64) -> StateValue {
        match &spec.kind {
            StateKind::Ranged { min, max } => StateValue::Number(min + (max - min) * (u * 1.4 - 0.2)),
            StateKind::Unlimited { soft_max } => StateValue::Number(soft_max * u * 3.0),
            StateKind::Boolean { categories } => StateValue::Category(categories[(u * 2.0) as usize % 2].clone()),
            StateKind::Enumerated { categories, .. } => {
                StateValue::Category(categories[(u * categories.len() as f64) as usize % categories.len()].clone())
            }
        }
    }

    proptest! {
        #[test]
        fn encoded_width_matches_formula(schema in arb_schema(), lc in 1usize..6, u in 0.0..1.0f64) {
            let n = schema.len();
            let extra: usize = schema.states.iter().map(|s| s.encoded_len() - 1).sum();
            let mut tables = EmbeddingTables::<f64>::default();
            for t in schema.trainable_tables() {
                tables.tables.insert(t.state.clone(), Tensor::filled(t.rows, t.cols, 0.25));
            }
            let frames = (0..lc)
                .map(|f| schema.states.iter().map(|s| value_for(s, (u + f as f64 * 0.37) % 1.0)).collect())
                .collect();
            let m = encode_context(&ContextWindow { frames }, &schema, &tables).unwrap();
            prop_assert_eq!(m.shape(), (lc, n + extra));
            prop_assert!(m.is_finite());
            prop_assert!(m.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn ranged_is_monotone(a in -1e4..1e4f64, b in -1e4..1e4f64) {
            let spec = DataStateSpec::ranged("r", -500.0, 700.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_ranged(lo, &spec).unwrap() <= normalize_ranged(hi, &spec).unwrap());
        }

        #[test]
        fn unlimited_is_increasing(a in 0.0..50.0f64, d in 1e-3..50.0f64) {
            let spec = DataStateSpec::unlimited("u", 10.0).unwrap();
            let x = normalize_unlimited(a, &spec).unwrap();
            let y = normalize_unlimited(a + d, &spec).unwrap();
            prop_assert!(x < y);
            prop_assert!((0.0..1.0).contains(&y));
        }
    }
}
