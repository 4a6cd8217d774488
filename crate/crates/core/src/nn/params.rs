//! Seeded parameter storage.
//!
//! candle's `VarMap` draws initial values from the thread RNG. `ParamStore`
//! wraps a `VarMap` but fills missing variables from a ChaCha stream keyed by
//! `(seed, variable name)`, so initialisation is reproducible and independent
//! of construction order.

use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{VarBuilder, VarMap};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::rng;

#[derive(Clone)]
pub struct ParamStore {
    map: VarMap,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("vars", &self.names().len())
            .finish()
    }
}

struct SeededBackend(ParamStore);

fn init_values(init: Init, shape: &Shape, seed: u64, name: &str) -> Vec<f64> {
    let n = shape.elem_count();
    let mut r = rng::stream(seed, &[rng::name_id(name)]);
    match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => (0..n).map(|_| r.random_range(lo..up)).collect(),
        Init::Randn { mean, stdev } => rng::normal_vec(&mut r, n)
            .into_iter()
            .map(|v| mean + stdev * v)
            .collect(),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = match fan {
                FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
            };
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => rng::normal_vec(&mut r, n)
                    .into_iter()
                    .map(|v| std * v)
                    .collect(),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| r.random_range(-bound..bound)).collect()
                }
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.0.map.data().lock().unwrap();
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let values = init_values(h, &s, self.0.seed, name);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.0.map.data().lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no variable named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.0.map.data().lock().unwrap().contains_key(name)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            map: VarMap::new(),
            seed,
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(SeededBackend(self.clone())), dtype, device.clone())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.map.data().lock().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    /// Variables sorted by name.
    pub fn vars(&self) -> Vec<Var> {
        let data = self.map.data().lock().unwrap();
        let mut pairs: Vec<(&String, &Var)> = data.iter().collect();
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f64 values, sorted by name.
    pub fn digest(&self) -> Result<String> {
        let data = self.map.data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let mut h = Sha256::new();
        for name in names {
            let t = data[name].as_tensor();
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.map.save(path)?;
        Ok(())
    }

    /// Overwrites every existing variable with the stored values.
    pub fn load(&self, path: &Path) -> Result<()> {
        let mut map = self.map.clone();
        map.load(path)?;
        Ok(())
    }

    /// Copies current values into the variables of `other` (same names).
    pub fn copy_into(&self, other: &ParamStore) -> Result<()> {
        let src = self.map.data().lock().unwrap();
        let dst = other.map.data().lock().unwrap();
        for (name, var) in dst.iter() {
            match src.get(name) {
                Some(s) => var.set(s.as_tensor())?,
                None => return Err(crate::error::validation(format!("no variable named {name} to copy from"))),
            }
        }
        Ok(())
    }
}
