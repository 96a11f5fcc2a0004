//! Named parameter storage with deterministic initialization.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// How a parameter is filled at registration time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian scaled by 1/sqrt(fan_in); the default for weight matrices.
    ScaledNormal,
    /// Gaussian scaled by `gain`/sqrt(fan_in); small gains keep residual
    /// branches subordinate to their trunk at init.
    ScaledNormalGain(f64),
}

/// Ordered map of named parameter matrices.
///
/// Initialization draws from a stream derived from `(seed, name)`, so the
/// values of one parameter never depend on how many others were registered
/// before it. Immutable during evaluation; optimizer steps take `&mut`.
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn name_rng(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, mixed into the store seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }

    /// Register a fresh parameter. Registering the same name twice is an error.
    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let mut rng = self.name_rng(name);
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::from_elem((rows, cols), 1.0),
            Init::Normal(std) => {
                Array2::from_shape_simple_fn((rows, cols), || std * normal_sample(&mut rng))
            }
            Init::ScaledNormal => {
                let std = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || std * normal_sample(&mut rng))
            }
            Init::ScaledNormalGain(gain) => {
                let std = gain / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || std * normal_sample(&mut rng))
            }
        };
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Overwrite a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.dim() != value.dim() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                expected: format!("{:?}", slot.dim()),
                got: format!("{:?}", value.dim()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Box-Muller standard normal draw from a uniform RNG.
pub(crate) fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
