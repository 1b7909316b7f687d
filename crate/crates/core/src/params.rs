//! Named parameters with per-name deterministic initialization, and the
//! checkpoint archive format.
//!
//! Each parameter draws its initial values from a stream seeded by the root
//! seed and its own name, so adding or removing a module never perturbs the
//! initialization of the others.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal with the given fan-in.
    FanIn(usize),
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the parameter `name`, creating it on first use. A later
    /// request with a different shape is a configuration error.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter '{name}' exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => sample_normal(rng::derive_seed_str(self.seed, name), std, n),
            Init::FanIn(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                sample_normal(rng::derive_seed_str(self.seed, name), std, n)
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Parameters whose name starts with any of `prefixes`, in name order.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Overwrites the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter named '{name}'")))?;
        if var.dims() != value.dims() {
            return Err(Error::Config(format!(
                "parameter '{name}' has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Order-independent digest of the parameters under `prefixes`, used to
    /// check that an update left a group bit-unchanged.
    pub fn fingerprint(&self, prefixes: &[&str]) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, var) in self.vars_with_prefix(prefixes) {
            let bytes: Vec<u64> = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
                .into_iter()
                .map(f64::to_bits)
                .collect();
            for b in name.bytes().map(u64::from).chain(bytes) {
                h ^= b;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Ok(h)
    }

    /// Writes all parameters and string metadata to one safetensors file.
    pub fn save(&self, path: &Path, metadata: &HashMap<String, String>) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(tensors, Some(metadata.clone()), path)?;
        Ok(())
    }

    /// Copies values from a checkpoint into this store. Every parameter of
    /// the store must be present; extra checkpoint entries are an error too,
    /// since they indicate a different model configuration.
    pub fn load_values(&self, ckpt: &Checkpoint) -> Result<()> {
        for name in self.vars.keys() {
            if !ckpt.tensors.contains_key(name) {
                return Err(Error::format(
                    &ckpt.path,
                    format!("checkpoint lacks parameter '{name}'"),
                ));
            }
        }
        for (name, t) in &ckpt.tensors {
            if !self.vars.contains_key(name) {
                return Err(Error::format(
                    &ckpt.path,
                    format!("checkpoint parameter '{name}' does not belong to this model"),
                ));
            }
            self.set(name, t)?;
        }
        Ok(())
    }
}

fn sample_normal(seed: u64, std: f64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, 0);
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(&mut r)).collect()
}

/// A checkpoint read back from disk.
#[derive(Debug)]
pub struct Checkpoint {
    pub path: std::path::PathBuf,
    pub tensors: HashMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            path: path.to_path_buf(),
            tensors,
            metadata,
        })
    }
}
