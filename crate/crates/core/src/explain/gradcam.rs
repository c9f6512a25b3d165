use std::io::{Read, Write};

use super::ExplainError;
use crate::imaging::{resize_plane, BinaryMask, GrayImage};
use crate::model::{ForwardCache, ModelError, MultiTaskNet};
use crate::{Scalar, Task};

/// Normalized attention at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub task: Task,
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
    /// Set when the raw map was flat; `values` are then all zero.
    pub degenerate: bool,
}

/// `ReLU(sum_k alpha_k F_k)` at feature resolution, with
/// `alpha_k` the spatial mean of `dz_t / dF_k`.
pub fn grad_cam_raw<T: Scalar>(
    net: &MultiTaskNet<T>,
    cache: &ForwardCache<T>,
    sample: usize,
    task: Task,
) -> Result<(Vec<T>, usize, usize), ModelError> {
    let b = cache.samples.len();
    if sample >= b || task.index() >= net.config.tasks {
        return Err(ModelError::StaleCache(format!("no sample {sample} / task {task} in cache")));
    }
    let mut dz = vec![vec![T::zero(); net.config.tasks]; b];
    dz[sample][task.index()] = T::one();
    let grads = net.feature_map_gradients(cache, &dz)?;
    let g = &grads[task.index()][sample];
    let f = cache.samples[sample].feature_maps();
    let n = f.height * f.width;
    let mut raw = vec![T::zero(); n];
    for k in 0..f.channels {
        let alpha = g.plane(k).iter().copied().sum::<T>() / T::from_count(n);
        for (r, &v) in raw.iter_mut().zip(f.plane(k)) {
            *r += alpha * v;
        }
    }
    for r in &mut raw {
        *r = r.max(T::zero());
    }
    Ok((raw, f.width, f.height))
}

/// Grad-CAM for one sample of an eval-mode forward cache: the raw map is
/// upsampled bilinearly to the input size and min-max normalized.
pub fn grad_cam<T: Scalar>(net: &MultiTaskNet<T>, cache: &ForwardCache<T>, sample: usize, task: Task) -> Result<AttentionMap, ModelError> {
    let (raw, fw, fh) = grad_cam_raw(net, cache, sample, task)?;
    let (w, h) = (net.config.input_width, net.config.input_height);
    Ok(normalize_attention(task, &raw, fw, fh, w, h))
}

pub(crate) fn normalize_attention<T: Scalar>(task: Task, raw: &[T], fw: usize, fh: usize, w: usize, h: usize) -> AttentionMap {
    let (lo, hi) = raw.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return AttentionMap { task, width: w, height: h, values: vec![0.0; w * h], degenerate: true };
    }
    let up = resize_plane(raw, fw, fh, w, h);
    let (lo, hi) = up.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let values = up.iter().map(|&v| ((v - lo) / span).as_f64().clamp(0.0, 1.0) as f32).collect();
    AttentionMap { task, width: w, height: h, values, degenerate: false }
}

/// `A >= tau`; degenerate maps give an empty mask.
pub fn threshold_attention(a: &AttentionMap, tau: f32) -> BinaryMask {
    if a.degenerate {
        return BinaryMask::empty(a.width, a.height);
    }
    BinaryMask::from_fn(a.width, a.height, |x, y| a.values[y * a.width + x] >= tau)
}

pub const ATTENTION_THRESHOLD: f32 = 0.5;

const RAW_MAGIC: &[u8; 4] = b"ATN1";

impl AttentionMap {
    /// 8-bit rendering, `round(255 A)`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    /// Lossless sidecar: magic, task index, degenerate flag, width and
    /// height as little-endian u32, then the f32 values.
    pub fn write_raw(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(RAW_MAGIC)?;
        for v in [self.task.index() as u32, self.degenerate as u32, self.width as u32, self.height as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw(mut input: impl Read) -> Result<Self, ExplainError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| ExplainError::Format(e.to_string()))?;
        if bytes.len() < 20 || &bytes[..4] != RAW_MAGIC {
            return Err(ExplainError::Format("not an attention sidecar".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let task = Task::from_index(word(0)).ok_or_else(|| ExplainError::Format("bad task index".into()))?;
        let (degenerate, width, height) = (word(1) != 0, word(2), word(3));
        let body = &bytes[20..];
        if body.len() != 4 * width * height {
            return Err(ExplainError::Format(format!("expected {} values, found {} bytes", width * height, body.len())));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(AttentionMap { task, width, height, values, degenerate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::PlaneTensor;
    use crate::model::{NetConfig, NetParams};
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    /// One conv block with two maps; head computes `z = h_1 - h_2` exactly
    /// while the hidden unit stays active.
    fn toy_net() -> MultiTaskNet<f64> {
        let eps = 2f64.powi(-40);
        let cfg = NetConfig { conv_channels: vec![2], head_hidden: 1, tasks: 1, bn_eps: eps, ..NetConfig::with_input(8) };
        let mut params = NetParams::<f64>::zeros(&cfg);
        let mut r = rng::stream(3, &[]);
        for w in &mut params.conv[0].weight {
            *w = StandardNormal.sample(&mut r);
        }
        let h = &mut params.heads[0];
        h.fc_weight = vec![1.0, -1.0];
        h.bn_gamma = vec![1.0];
        h.bn_beta = vec![100.0];
        h.out_weight = vec![1.0];
        let mut net = MultiTaskNet::from_parts(cfg, params, 0);
        net.running_var[0][0] = 1.0 - eps;
        net
    }

    fn input(seed: u64) -> PlaneTensor<f64> {
        let mut r = rng::stream(seed, &[]);
        PlaneTensor::new(3, 8, 8, (0..192).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn toy_raw_map_is_relu_of_difference() {
        let net = toy_net();
        assert_eq!((net.running_var[0][0] + net.config.bn_eps).sqrt(), 1.0);
        let cache = net.forward_eval(&[input(4)]).unwrap();
        let (raw, fw, fh) = grad_cam_raw(&net, &cache, 0, Task::Hba1c).unwrap();
        assert_eq!((fw, fh), (4, 4));
        let f = cache.samples[0].feature_maps();
        for i in 0..16 {
            let expected = ((f.plane(0)[i] - f.plane(1)[i]) / 16.0).max(0.0);
            assert_eq!(raw[i], expected);
        }
    }

    #[test]
    fn zero_features_give_degenerate_map() {
        let mut net = toy_net();
        net.params.conv[0].weight.fill(0.0);
        let cache = net.forward_eval(&[input(5)]).unwrap();
        let a = grad_cam(&net, &cache, 0, Task::Hba1c).unwrap();
        assert!(a.degenerate);
        assert!(a.values.iter().all(|&v| v == 0.0));
        assert!(threshold_attention(&a, 0.0).is_empty());
    }

    #[test]
    fn normalized_map_spans_unit_interval() {
        let net = MultiTaskNet::<f64>::init(NetConfig::with_input(16), 8).unwrap();
        let mut r = rng::stream(9, &[]);
        let x = PlaneTensor::new(3, 16, 16, (0..768).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let cache = net.forward_eval(&[x]).unwrap();
        for task in Task::ALL {
            let a = grad_cam(&net, &cache, 0, task).unwrap();
            assert_eq!(a.values.len(), 256);
            if !a.degenerate {
                let max = a.values.iter().cloned().fold(f32::MIN, f32::max);
                let min = a.values.iter().cloned().fold(f32::MAX, f32::min);
                assert_eq!((min, max), (0.0, 1.0));
            }
        }
    }

    #[test]
    fn thresholding() {
        let a = AttentionMap { task: Task::Kidney, width: 2, height: 1, values: vec![0.2, 0.7], degenerate: false };
        assert_eq!(threshold_attention(&a, 0.5).data(), &[0, 1]);
        assert_eq!(threshold_attention(&a, 0.0).count(), 2);
        let mut last = usize::MAX;
        for k in 0..=10 {
            let c = threshold_attention(&a, k as f32 / 10.0).count();
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn raw_sidecar_round_trip() {
        let a = AttentionMap { task: Task::Multi, width: 3, height: 2, values: vec![0.0, 0.1, 0.25, 1.0, 0.333, 0.9], degenerate: false };
        let mut buf = Vec::new();
        a.write_raw(&mut buf).unwrap();
        assert_eq!(AttentionMap::read_raw(&buf[..]).unwrap(), a);
        assert!(AttentionMap::read_raw(&buf[..buf.len() - 1]).is_err());
        assert_eq!(a.to_gray().data, vec![0, 26, 64, 255, 85, 230]);
    }
}
