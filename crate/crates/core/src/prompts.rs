//! Balanced avatar descriptions from attribute sets.
//!
//! Each attribute advances through its value list with its own cyclic stride
//! and seed-derived offset. With strides coprime to the list lengths every
//! value is visited once per cycle, so counts stay balanced and the full
//! assignment tuple only repeats after the lcm of the list lengths.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Attribute names in the order the sentence grammar uses them.
pub const DEFAULT_ATTRIBUTES: [&str; 8] = [
    "ethnicity",
    "hair type",
    "hair length",
    "hair color",
    "clothing color",
    "clothing pattern",
    "body type",
    "age group",
];

const DEFAULT_SPACE_JSON: &str = include_str!("../assets/attributes.json");

/// Ordered attribute name → ordered value list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpace {
    pub attributes: Vec<(String, Vec<String>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub assignment: BTreeMap<String, String>,
    pub scenario: String,
    pub sentence: String,
    pub index: usize,
}

impl AttributeSpace {
    /// Parses `{name: [values...]}` keeping document order.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("attribute space: {e}")))?;
        let mut attributes = Vec::with_capacity(doc.len());
        for (name, values) in doc {
            let values: Vec<String> = serde_json::from_value(values)
                .map_err(|e| Error::InvalidArgument(format!("attribute {name:?}: {e}")))?;
            attributes.push((name, values));
        }
        let space = AttributeSpace { attributes };
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }

    /// The shipped default attribute lists.
    pub fn default_space() -> Self {
        Self::from_json_str(DEFAULT_SPACE_JSON).expect("bundled attribute space is valid")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .attributes
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, values) in &self.attributes {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!(
                    "attribute {name:?} listed twice"
                )));
            }
            if values.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "attribute {name:?} has no values"
                )));
            }
            let unique: std::collections::BTreeSet<_> = values.iter().collect();
            if unique.len() != values.len() {
                return Err(Error::InvalidArgument(format!(
                    "attribute {name:?} has duplicate values"
                )));
            }
        }
        Ok(())
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.attributes.iter().map(|(_, v)| v.len()).collect()
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Smallest stride greater than one that is coprime to `len`.
pub fn default_stride(len: usize) -> usize {
    (2..=len.max(2)).find(|s| gcd(*s, len) == 1).unwrap_or(1)
}

pub fn generate_prompts(
    space: &AttributeSpace,
    n: usize,
    scenario: &str,
    strides: Option<&[usize]>,
    seed: u64,
) -> Result<Vec<PromptTemplate>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "prompt count must be at least 1".into(),
        ));
    }
    space.validate()?;
    let strides: Vec<usize> = match strides {
        Some(s) => {
            if s.len() != space.attributes.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} strides for {} attributes",
                    s.len(),
                    space.attributes.len()
                )));
            }
            for ((name, values), &stride) in space.attributes.iter().zip(s) {
                if stride == 0 || gcd(stride, values.len()) != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "stride {stride} for attribute {name:?} is not coprime with its {} values",
                        values.len()
                    )));
                }
            }
            s.to_vec()
        }
        None => space.lengths().into_iter().map(default_stride).collect(),
    };
    let mut r = rng::stream(seed, "prompts/offsets", 0);
    let offsets: Vec<usize> = space
        .attributes
        .iter()
        .map(|(_, v)| r.random_range(0..v.len()))
        .collect();

    (0..n)
        .map(|i| {
            let assignment: BTreeMap<String, String> = space
                .attributes
                .iter()
                .zip(offsets.iter().zip(&strides))
                .map(|((name, values), (&off, &stride))| {
                    let idx = (off + i * stride) % values.len();
                    (name.clone(), values[idx].clone())
                })
                .collect();
            let sentence = render_sentence(space, &assignment, scenario)?;
            Ok(PromptTemplate {
                assignment,
                scenario: scenario.to_string(),
                sentence,
                index: i,
            })
        })
        .collect()
}

/// Fills the fixed description grammar. Spaces that carry all default
/// attributes use the full sentence; any further attributes are appended as
/// `name: value` pairs.
pub fn render_sentence(
    space: &AttributeSpace,
    assignment: &BTreeMap<String, String>,
    scenario: &str,
) -> Result<String> {
    for (name, _) in &space.attributes {
        if !assignment.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "assignment is missing attribute {name:?}"
            )));
        }
    }
    let has_defaults = DEFAULT_ATTRIBUTES
        .iter()
        .all(|a| assignment.contains_key(*a));
    let extras: Vec<String> = space
        .attributes
        .iter()
        .filter(|(name, _)| !has_defaults || !DEFAULT_ATTRIBUTES.contains(&name.as_str()))
        .map(|(name, _)| format!("{name}: {}", assignment[name]))
        .collect();
    let mut sentence = if has_defaults {
        let a = |k: &str| assignment[k].as_str();
        format!(
            "A {} {} {} person with {} {} {} hair, wearing a {} {} {} uniform",
            a("age group"),
            a("ethnicity"),
            a("body type"),
            a("hair length"),
            a("hair color"),
            a("hair type"),
            a("clothing color"),
            a("clothing pattern"),
            scenario
        )
    } else {
        format!("A person in a {scenario} setting")
    };
    if !extras.is_empty() {
        sentence.push_str(if has_defaults { ", with " } else { " with " });
        sentence.push_str(&extras.join(", "));
    }
    Ok(sentence)
}

/// One JSON object per line.
pub fn write_prompts_jsonl(path: &Path, prompts: &[PromptTemplate]) -> Result<()> {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::json(path, e))?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_prompts_jsonl(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Convenience reader for the default-or-file attribute space.
pub fn load_space(path: Option<&Path>) -> Result<AttributeSpace> {
    match path {
        Some(p) => AttributeSpace::load(p),
        None => Ok(AttributeSpace::default_space()),
    }
}
