//! Optimizer checkpoint file.
//!
//! A JSON object holding the CMA-ES parameters and counters, with every
//! vector and matrix stored as base64 of little-endian f64 bytes so that a
//! reload is bit-exact:
//!
//! ```json
//! {"format_version":1,"params":{..},"generation":12,"evaluations":120,
//!  "sigma":0.08,"mean":"<b64>","covariance":"<b64>","path_sigma":"<b64>",
//!  "path_c":"<b64>","eigenvectors":"<b64>","axis_lengths":"<b64>",
//!  "eigen_generation":10,"eigen_resets":0,
//!  "rng":{"seed":7,"generation":12},
//!  "best":{"genotype":"<b64>","fitness":-0.01,"generation":11}}
//! ```
//!
//! The sampler for generation `g` is seeded from `(seed, g)`, so `rng` is the
//! complete random state.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use evomerge_core::cmaes::{BestSoFar, CmaParams, CmaSnapshot, CmaState};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::archive::write_atomic;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Serde adapter for `Vec<f64>` as base64 of little-endian bytes.
pub mod b64_f64 {
    use super::*;

    pub fn encode(values: &[f64]) -> String {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> std::result::Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!(
                "{} bytes is not a whole number of f64 values",
                bytes.len()
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        decode(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub generation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    #[serde(with = "b64_f64")]
    pub genotype: Vec<f64>,
    pub fitness: f64,
    pub generation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: CmaParams,
    pub generation: usize,
    pub evaluations: usize,
    pub sigma: f64,
    #[serde(with = "b64_f64")]
    pub mean: Vec<f64>,
    #[serde(with = "b64_f64")]
    pub covariance: Vec<f64>,
    #[serde(with = "b64_f64")]
    pub path_sigma: Vec<f64>,
    #[serde(with = "b64_f64")]
    pub path_c: Vec<f64>,
    #[serde(with = "b64_f64")]
    pub eigenvectors: Vec<f64>,
    #[serde(with = "b64_f64")]
    pub axis_lengths: Vec<f64>,
    pub eigen_generation: usize,
    pub eigen_resets: usize,
    pub rng: RngRecord,
    pub best: Option<BestRecord>,
}

impl Checkpoint {
    pub fn from_state(state: &CmaState) -> Self {
        let s = state.snapshot();
        Checkpoint {
            format_version: FORMAT_VERSION,
            rng: RngRecord {
                seed: s.params.seed,
                generation: s.generation,
            },
            params: s.params,
            generation: s.generation,
            evaluations: s.evaluations,
            sigma: s.sigma,
            mean: s.mean,
            covariance: s.covariance,
            path_sigma: s.path_sigma,
            path_c: s.path_c,
            eigenvectors: s.eigenvectors,
            axis_lengths: s.axis_lengths,
            eigen_generation: s.eigen_generation,
            eigen_resets: s.eigen_resets,
            best: s.best.map(|b| BestRecord {
                genotype: b.genotype,
                fitness: b.fitness,
                generation: b.generation,
            }),
        }
    }

    pub fn into_state(self) -> Result<CmaState> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.rng.seed != self.params.seed || self.rng.generation != self.generation {
            return Err(Error::Data(
                "checkpoint rng record disagrees with its parameters".into(),
            ));
        }
        let snap = CmaSnapshot {
            params: self.params,
            generation: self.generation,
            evaluations: self.evaluations,
            mean: self.mean,
            sigma: self.sigma,
            covariance: self.covariance,
            path_sigma: self.path_sigma,
            path_c: self.path_c,
            eigenvectors: self.eigenvectors,
            axis_lengths: self.axis_lengths,
            eigen_generation: self.eigen_generation,
            eigen_resets: self.eigen_resets,
            best: self.best.map(|b| BestSoFar {
                genotype: b.genotype,
                fitness: b.fitness,
                generation: b.generation,
            }),
        };
        CmaState::from_snapshot(snap).map_err(|e| Error::Data(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b64_round_trip_is_bit_exact() {
        let values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, 1.0 / 3.0];
        let back = b64_f64::decode(&b64_f64::encode(&values)).unwrap();
        assert_eq!(
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(b64_f64::decode("AAAA").is_err());
    }

    #[test]
    fn state_survives_file_round_trip() {
        let mut state = CmaState::new(CmaParams::new(3, 11)).unwrap();
        for _ in 0..4 {
            let xs = state.ask();
            let told: Vec<_> = xs
                .into_iter()
                .map(|x| {
                    let f = -x.iter().map(|v| v * v).sum::<f64>();
                    (x, f)
                })
                .collect();
            state.tell(&told).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_state(&state).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_state().unwrap();
        assert_eq!(back, state);
        assert_eq!(back.ask(), state.ask());
    }

    #[test]
    fn inconsistent_rng_record_is_rejected() {
        let state = CmaState::new(CmaParams::new(2, 1)).unwrap();
        let mut ck = Checkpoint::from_state(&state);
        ck.rng.generation = 5;
        assert!(ck.clone().into_state().is_err());
        ck.rng.generation = 0;
        ck.format_version = 99;
        assert!(ck.into_state().is_err());
    }
}
