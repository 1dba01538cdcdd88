//! Discrete search spaces and the model specs sampled from them.
//!
//! A [`SearchSpace`] is an ordered list of named dimensions, each holding a
//! finite list of opaque option labels. A [`ModelSpec`] picks one option index
//! per dimension.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const TEXT_PRESET: &str = include_str!("../presets/text.toml");
const IMAGE_PRESET: &str = include_str!("../presets/image.toml");

/// Names of the bundled presets accepted by [`SearchSpace::preset`].
pub const PRESETS: &[&str] = &["text", "image"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("search space has no dimensions")]
    NoDimensions,
    #[error("dimension `{0}` has no options")]
    EmptyDimension(String),
    #[error("duplicate dimension name `{0}`")]
    DuplicateDimension(String),
    #[error("dimension `{dimension}` lists option `{option}` more than once")]
    DuplicateOption { dimension: String, option: String },
    #[error("spec has {got} choices but the space has {expected} dimensions")]
    LengthMismatch { expected: usize, got: usize },
    #[error("choice {index} is out of range for dimension {position} (`{dimension}`, {count} options)")]
    OutOfRange {
        position: usize,
        dimension: String,
        index: usize,
        count: usize,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("search space cardinality does not fit in 128 bits")]
    TooLarge,
    #[error("invalid space definition: {0}")]
    Parse(String),
}

/// One named axis of the search space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub options: Vec<String>,
}

impl Dimension {
    pub fn new(name: impl Into<String>, options: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            name: name.into(),
            options: options.into_iter().map(Into::into).collect(),
        }
    }
}

/// Unvalidated space definition, as it appears in a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDefinition {
    pub dimensions: Vec<Dimension>,
}

/// A validated, immutable search space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    dimensions: Vec<Dimension>,
    hash: [u8; 32],
}

/// One option index per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSpec {
    pub choices: Vec<usize>,
}

impl ModelSpec {
    pub fn new(choices: Vec<usize>) -> Self {
        Self { choices }
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }
}

impl From<Vec<usize>> for ModelSpec {
    fn from(choices: Vec<usize>) -> Self {
        Self { choices }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.choices.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

impl SearchSpace {
    /// Validates a definition and builds the space.
    pub fn build(definition: SpaceDefinition) -> Result<Self, SpaceError> {
        let dimensions = definition.dimensions;
        if dimensions.is_empty() {
            return Err(SpaceError::NoDimensions);
        }
        let mut names = HashSet::new();
        for dim in &dimensions {
            if dim.options.is_empty() {
                return Err(SpaceError::EmptyDimension(dim.name.clone()));
            }
            if !names.insert(dim.name.as_str()) {
                return Err(SpaceError::DuplicateDimension(dim.name.clone()));
            }
            let mut seen = HashSet::new();
            for opt in &dim.options {
                if !seen.insert(opt.as_str()) {
                    return Err(SpaceError::DuplicateOption {
                        dimension: dim.name.clone(),
                        option: opt.clone(),
                    });
                }
            }
        }
        dimensions
            .iter()
            .try_fold(1u128, |acc, d| acc.checked_mul(d.options.len() as u128))
            .ok_or(SpaceError::TooLarge)?;
        let hash = content_hash(&dimensions);
        Ok(Self { dimensions, hash })
    }

    /// Builds a space with anonymous dimensions `dim0, dim1, ...` and options
    /// `0..count`. Handy for tests and synthetic experiments.
    pub fn from_counts(counts: &[usize]) -> Result<Self, SpaceError> {
        let dimensions = counts
            .iter()
            .enumerate()
            .map(|(d, &n)| Dimension::new(format!("dim{d}"), (0..n).map(|o| o.to_string())))
            .collect();
        Self::build(SpaceDefinition { dimensions })
    }

    /// Loads one of the bundled presets (`text` or `image`).
    pub fn preset(name: &str) -> Result<Self, SpaceError> {
        let src = match name {
            "text" => TEXT_PRESET,
            "image" => IMAGE_PRESET,
            other => return Err(SpaceError::UnknownPreset(other.to_string())),
        };
        Self::from_toml(src)
    }

    pub fn from_toml(src: &str) -> Result<Self, SpaceError> {
        let def: SpaceDefinition = toml::from_str(src).map_err(|e| SpaceError::Parse(e.to_string()))?;
        Self::build(def)
    }

    /// Renders the space in the same TOML layout [`SearchSpace::from_toml`] reads.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.definition()).expect("space definitions always serialize")
    }

    pub fn definition(&self) -> SpaceDefinition {
        SpaceDefinition {
            dimensions: self.dimensions.clone(),
        }
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    pub fn option_counts(&self) -> Vec<usize> {
        self.dimensions.iter().map(|d| d.options.len()).collect()
    }

    /// SHA-256 over a length-prefixed canonical encoding of names and options.
    pub fn content_hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn content_hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    /// Exact number of distinct specs. Construction guarantees this fits.
    pub fn cardinality(&self) -> u128 {
        self.dimensions
            .iter()
            .try_fold(1u128, |acc, d| acc.checked_mul(d.options.len() as u128))
            .expect("checked at construction")
    }

    pub fn validate_spec(&self, spec: &ModelSpec) -> Result<(), SpaceError> {
        if spec.len() != self.len() {
            return Err(SpaceError::LengthMismatch {
                expected: self.len(),
                got: spec.len(),
            });
        }
        for (position, (dim, &index)) in self.dimensions.iter().zip(&spec.choices).enumerate() {
            if index >= dim.options.len() {
                return Err(SpaceError::OutOfRange {
                    position,
                    dimension: dim.name.clone(),
                    index,
                    count: dim.options.len(),
                });
            }
        }
        Ok(())
    }

    /// Draws every dimension independently and uniformly.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelSpec {
        let choices = self
            .dimensions
            .iter()
            .map(|d| rng.random_range(0..d.options.len()))
            .collect();
        ModelSpec { choices }
    }

    pub fn spec_to_labels(&self, spec: &ModelSpec) -> Result<Vec<(String, String)>, SpaceError> {
        self.validate_spec(spec)?;
        Ok(self
            .dimensions
            .iter()
            .zip(&spec.choices)
            .map(|(d, &i)| (d.name.clone(), d.options[i].clone()))
            .collect())
    }

    /// Iterates over every spec in lexicographic order. Only sensible for
    /// small spaces.
    pub fn enumerate(&self) -> SpecIter {
        SpecIter {
            counts: self.option_counts(),
            next: Some(vec![0; self.len()]),
        }
    }
}

/// Iterator returned by [`SearchSpace::enumerate`].
pub struct SpecIter {
    counts: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl Iterator for SpecIter {
    type Item = ModelSpec;

    fn next(&mut self) -> Option<ModelSpec> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut d = succ.len();
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            succ[d] += 1;
            if succ[d] < self.counts[d] {
                self.next = Some(succ);
                break;
            }
            succ[d] = 0;
        }
        Some(ModelSpec { choices: current })
    }
}

fn content_hash(dimensions: &[Dimension]) -> [u8; 32] {
    fn put_str(h: &mut Sha256, s: &str) {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    let mut h = Sha256::new();
    h.update(b"taml-space/1");
    h.update((dimensions.len() as u64).to_le_bytes());
    for dim in dimensions {
        put_str(&mut h, &dim.name);
        h.update((dim.options.len() as u64).to_le_bytes());
        for opt in &dim.options {
            put_str(&mut h, opt);
        }
    }
    h.finalize().into()
}
