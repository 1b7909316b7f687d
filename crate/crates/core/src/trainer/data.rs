//! Splits loaded once into batched tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::dataio::{LoadOptions, SampleSource, SplitRole};
use crate::error::{Error, Result};
use crate::tensor_ops::array3_to_tensor;

use super::model::Inputs;

/// All samples of one split as `(N, 3, H, W)` tensors plus host-side labels.
#[derive(Debug, Clone)]
pub struct TensorSet {
    pub role: SplitRole,
    pub ids: Vec<String>,
    pub rgb: Tensor,
    pub sn: Option<Tensor>,
    /// Present only for splits whose labels may be read.
    pub labels: Option<Vec<Array2<u8>>>,
    pub height: usize,
    pub width: usize,
}

impl TensorSet {
    /// Loads every sample of `source` in order. Labels are requested only
    /// when `with_labels` is set, so target-train labels are never touched.
    pub fn load(source: &dyn SampleSource, with_labels: bool, with_normals: bool, dtype: DType) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Input(format!("split {} is empty", source.role())));
        }
        let device = Device::Cpu;
        let opts = LoadOptions {
            need_normals: with_normals,
            with_label: with_labels,
        };
        let mut ids = Vec::with_capacity(source.len());
        let mut rgb = Vec::with_capacity(source.len());
        let mut sn = Vec::new();
        let mut labels = Vec::new();
        let mut size = None;
        for i in 0..source.len() {
            let s = source.load(i, opts)?;
            let dims = (s.height(), s.width());
            if *size.get_or_insert(dims) != dims {
                return Err(Error::Input(format!(
                    "sample '{}' is {}x{}, expected {:?}",
                    s.id, dims.0, dims.1, size
                )));
            }
            rgb.push(array3_to_tensor(&s.rgb, dtype, &device)?);
            if with_normals {
                let n = s.normals.as_ref().expect("normals requested");
                sn.push(array3_to_tensor(n.channels(), dtype, &device)?);
            }
            if with_labels {
                labels.push(s.label.expect("label requested"));
            }
            ids.push(s.id);
        }
        let (height, width) = size.expect("non-empty");
        Ok(Self {
            role: source.role(),
            ids,
            rgb: Tensor::stack(&rgb, 0)?,
            sn: if with_normals { Some(Tensor::stack(&sn, 0)?) } else { None },
            labels: with_labels.then_some(labels),
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_tensor(idx: &[usize]) -> Result<Tensor> {
        let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
    }

    pub fn inputs(&self, idx: &[usize]) -> Result<Inputs> {
        let t = Self::index_tensor(idx)?;
        Ok(Inputs {
            rgb: self.rgb.index_select(&t, 0)?,
            sn: self.sn.as_ref().map(|s| s.index_select(&t, 0)).transpose()?,
        })
    }

    pub fn label(&self, i: usize) -> Result<&Array2<u8>> {
        self.labels
            .as_ref()
            .map(|l| &l[i])
            .ok_or_else(|| Error::Contract(format!("labels of {} are not available", self.role)))
    }
}
