//! Named f32 tensors and the key filter that selects the merge domain.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major f32 tensor. An empty shape denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::DataLength {
                name: String::new(),
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: alloc::vec![value],
        }
    }

    /// One-dimensional tensor holding `data`.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: alloc::vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality, so that NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Element count for a shape; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// An ordered collection of named tensors plus optional string metadata.
///
/// Iteration is lexicographic by name. Values may be non-finite in memory;
/// finiteness is enforced where checkpoints cross the file boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, returning the previous one with the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Total number of scalar elements across all tensors.
    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Name of the first tensor (in name order) holding a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Include/exclude glob lists over tensor names.
///
/// A name is selected when it matches at least one include pattern (an empty
/// include list matches everything) and no exclude pattern. Patterns support
/// `*` (any run of characters) and `?` (exactly one character); `**` behaves
/// like `*` since names are flat strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFilter {
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl KeyFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn new<I, E, S, T>(include: I, exclude: E) -> Self
    where
        I: IntoIterator<Item = S>,
        E: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            include: include.into_iter().map(Into::into).collect(),
            exclude: exclude.into_iter().map(Into::into).collect(),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        let included = self.include.is_empty() || self.include.iter().any(|p| glob_match(p, name));
        included && !self.exclude.iter().any(|p| glob_match(p, name))
    }
}

/// Matches `text` against a pattern made of literals, `*` and `?`.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let pat: Vec<char> = pattern.chars().collect();
    let txt: Vec<char> = text.chars().collect();
    let (mut p, mut t) = (0, 0);
    // position of the last `*` in the pattern and the text index it was tried at
    let mut backtrack: Option<(usize, usize)> = None;
    while t < txt.len() {
        if p < pat.len() && pat[p] == '*' {
            while p < pat.len() && pat[p] == '*' {
                p += 1;
            }
            backtrack = Some((p, t));
        } else if p < pat.len() && (pat[p] == '?' || pat[p] == txt[t]) {
            p += 1;
            t += 1;
        } else if let Some((star_p, star_t)) = backtrack {
            p = star_p;
            t = star_t + 1;
            backtrack = Some((star_p, star_t + 1));
        } else {
            return false;
        }
    }
    pat[p..].iter().all(|&c| c == '*')
}

/// The merge domain: tensor names selected by `filter` that every map holds
/// with an identical shape.
///
/// Names are taken from the union of all maps, so the result does not depend
/// on the order of `maps`. An empty result is not an error here.
pub fn aligned_keys(maps: &[&TensorMap], filter: &KeyFilter) -> Result<Vec<String>> {
    if maps.is_empty() {
        return Err(crate::error::invalid(
            "maps",
            "at least one map is required",
        ));
    }
    let names: BTreeSet<&str> = maps
        .iter()
        .flat_map(|m| m.names())
        .filter(|n| filter.matches(n))
        .collect();
    for &name in &names {
        let mut expected: Option<&[usize]> = None;
        for (map_index, map) in maps.iter().enumerate() {
            let tensor = map.get(name).ok_or_else(|| Error::MissingKey {
                map_index,
                name: name.to_string(),
            })?;
            match expected {
                None => expected = Some(tensor.shape()),
                Some(shape) if shape != tensor.shape() => {
                    return Err(Error::ShapeMismatch {
                        map_index,
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        found: tensor.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
    }
    Ok(names.into_iter().map(String::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn map(entries: &[(&str, Vec<usize>)]) -> TensorMap {
        entries
            .iter()
            .map(|(n, s)| {
                let len = numel(s);
                (
                    n.to_string(),
                    Tensor::new(s.clone(), vec![0.0; len]).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::new(vec![], vec![1.0]).unwrap().numel(), 1);
        assert!(Tensor::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn glob_semantics() {
        assert!(glob_match("*", ""));
        assert!(glob_match("a*", "abc"));
        assert!(glob_match("a?c", "abc"));
        assert!(!glob_match("a?c", "ac"));
        assert!(glob_match("model.**.weight", "model.layers.0.weight"));
        assert!(glob_match("*.weight", "x.weight"));
        assert!(!glob_match("*.weight", "x.bias"));
        assert!(glob_match("a*b*c", "aXXbYYc"));
        assert!(!glob_match("a*b*c", "aXXbYY"));
        assert!(glob_match("llm.*", "llm.a.b"));
        assert!(!glob_match("llm.*", "vision.a"));
    }

    #[test]
    fn filter_include_and_exclude() {
        let f = KeyFilter::new(["llm.*"], ["*.bias"]);
        assert!(f.matches("llm.w"));
        assert!(!f.matches("llm.bias"));
        assert!(!f.matches("vision.w"));
        assert!(KeyFilter::all().matches("anything"));
    }

    #[test]
    fn aligned_keys_filters() {
        let a = map(&[("a", vec![2]), ("b", vec![3])]);
        let b = map(&[("a", vec![2]), ("b", vec![3])]);
        let keys = aligned_keys(&[&a, &b], &KeyFilter::new(["a*"], [] as [&str; 0])).unwrap();
        assert_eq!(keys, vec!["a".to_string()]);
        let none = aligned_keys(&[&a, &b], &KeyFilter::new([] as [&str; 0], ["*"])).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn aligned_keys_shape_mismatch_names_map_and_key() {
        let a = map(&[("a", vec![2])]);
        let b = map(&[("a", vec![3])]);
        match aligned_keys(&[&a, &b], &KeyFilter::all()) {
            Err(Error::ShapeMismatch {
                map_index, name, ..
            }) => {
                assert_eq!(map_index, 1);
                assert_eq!(name, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aligned_keys_missing_key() {
        let a = map(&[("a", vec![2]), ("b", vec![1])]);
        let b = map(&[("a", vec![2])]);
        assert!(matches!(
            aligned_keys(&[&a, &b], &KeyFilter::all()),
            Err(Error::MissingKey { map_index: 1, .. })
        ));
        assert!(matches!(
            aligned_keys(&[&b, &a], &KeyFilter::all()),
            Err(Error::MissingKey { map_index: 0, .. })
        ));
        // excluded keys do not need to be present everywhere
        let ok = aligned_keys(&[&a, &b], &KeyFilter::new([] as [&str; 0], ["b"])).unwrap();
        assert_eq!(ok, vec!["a".to_string()]);
    }
}
