//! Named parameter matrices with reproducible initialization.
//!
//! Each parameter records the scheme and seed that produced it, so a store
//! can be rebuilt bit for bit from its metadata alone. Seeds are derived
//! from the model seed and the parameter name, which keeps initial values
//! independent of registration order.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mat::{Mat, SharedMat};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `U(-limit, limit)` with `limit = sqrt(6 / (rows + cols))`.
    XavierUniform,
    Zeros,
    /// Zero bias row except ones on the forget-gate block, which keeps early
    /// recurrent gradients alive.
    LstmGateBias { forget: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitRecord {
    pub scheme: InitScheme,
    pub seed: u64,
}

/// FNV-1a hash of the parameter name mixed with the model seed.
pub fn param_seed(model_seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ model_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn materialize(rows: usize, cols: usize, record: InitRecord) -> Mat {
    match record.scheme {
        InitScheme::XavierUniform => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(record.seed);
            Mat::uniform(rows, cols, limit, &mut rng)
        }
        InitScheme::Zeros => Mat::zeros(rows, cols),
        InitScheme::LstmGateBias { forget } => {
            assert_eq!(rows, 1, "gate bias is a row vector");
            assert_eq!(cols % 4, 0, "gate bias packs four gates");
            let hidden = cols / 4;
            let mut m = Mat::zeros(1, cols);
            for j in hidden..2 * hidden {
                m[(0, j)] = forget;
            }
            m
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<SharedMat>,
    inits: Vec<InitRecord>,
    // Lookup only; numeric paths iterate by index.
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register and materialize a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, record: InitRecord) -> usize {
        self.add_mat(name, materialize(rows, cols, record), record)
    }

    /// Register a parameter with an explicit value, e.g. from a checkpoint.
    pub fn add_mat(&mut self, name: &str, mat: Mat, record: InitRecord) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name:?}"
        );
        let index = self.mats.len();
        self.names.push(name.to_string());
        self.mats.push(Arc::new(mat));
        self.inits.push(record);
        self.by_name.insert(name.to_string(), index);
        index
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn mat(&self, index: usize) -> &SharedMat {
        &self.mats[index]
    }

    pub fn init(&self, index: usize) -> InitRecord {
        self.inits[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Replace a parameter value; the old `Arc` stays alive for any tape
    /// that captured it.
    pub fn set_mat(&mut self, index: usize, mat: Mat) {
        assert_eq!(
            self.mats[index].shape(),
            mat.shape(),
            "parameter {:?} changed shape",
            self.names[index]
        );
        self.mats[index] = Arc::new(mat);
    }

    pub fn num_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.mats.iter().all(|m| m.is_finite())
    }
}
