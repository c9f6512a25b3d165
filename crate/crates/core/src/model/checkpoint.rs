use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, MultiTaskNet, NetConfig, NetParams};
use crate::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk form of a network: config echo plus named flat arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: NetConfig,
    pub dropout_seed: u64,
    pub arrays: BTreeMap<String, NamedArray>,
    /// Free-form provenance (epoch, validation AUC, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_net<T: Scalar>(net: &MultiTaskNet<T>) -> Self {
        let mut arrays = BTreeMap::new();
        for t in net.params.tensors() {
            arrays.insert(t.name, NamedArray { shape: t.shape, data: t.data.iter().map(|v| v.as_f64()).collect() });
        }
        let k = net.config.head_hidden;
        for (t, (m, v)) in net.running_mean.iter().zip(&net.running_var).enumerate() {
            arrays.insert(format!("head{t}.bn.running_mean"), NamedArray { shape: vec![k], data: m.iter().map(|x| x.as_f64()).collect() });
            arrays.insert(format!("head{t}.bn.running_var"), NamedArray { shape: vec![k], data: v.iter().map(|x| x.as_f64()).collect() });
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: net.config.clone(),
            dropout_seed: net.dropout_seed(),
            arrays,
            meta: BTreeMap::new(),
        }
    }

    /// Rebuilds a network in eval mode, validating every array against the
    /// config.
    pub fn to_net<T: Scalar>(&self) -> Result<MultiTaskNet<T>, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.config.validate()?;
        let mut params = NetParams::<T>::zeros(&self.config);
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let k = self.config.head_hidden;
        let n_expected = expected.len() + 2 * self.config.tasks;
        if self.arrays.len() != n_expected {
            return Err(ModelError::Checkpoint(format!("expected {n_expected} arrays, found {}", self.arrays.len())));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<&NamedArray, ModelError> {
            let a = self.arrays.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing array {name}")))?;
            let len: usize = shape.iter().product();
            if a.shape != shape || a.data.len() != len {
                return Err(ModelError::Checkpoint(format!(
                    "array {name}: shape {:?} with {} values, expected {shape:?}",
                    a.shape,
                    a.data.len()
                )));
            }
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Checkpoint(format!("array {name} has non-finite values")));
            }
            Ok(a)
        };
        for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
            let a = fetch(name, shape)?;
            for (d, s) in dst.data.iter_mut().zip(&a.data) {
                *d = T::lit(*s);
            }
        }
        let mut net = MultiTaskNet::from_parts(self.config.clone(), params, self.dropout_seed);
        for t in 0..self.config.tasks {
            let m = fetch(&format!("head{t}.bn.running_mean"), &[k])?;
            let v = fetch(&format!("head{t}.bn.running_var"), &[k])?;
            if v.data.iter().any(|&x| x <= 0.0) {
                return Err(ModelError::Checkpoint(format!("head{t} running variance must be > 0")));
            }
            net.running_mean[t] = m.data.iter().map(|&x| T::lit(x)).collect();
            net.running_var[t] = v.data.iter().map(|&x| T::lit(x)).collect();
        }
        net.set_mode(super::Mode::Eval);
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
