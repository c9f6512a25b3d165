use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv3x3_backward, conv3x3_forward, gated_pool_forward, global_avg_pool, global_avg_pool_backward, relu_maxpool_backward, relu_maxpool_forward,
};
use super::ModelError;
use crate::imaging::PlaneTensor;
use crate::rng::{self, Rng};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each conv block; the last entry is the embedding
    /// dimension.
    pub conv_channels: Vec<usize>,
    pub head_hidden: usize,
    pub dropout: f64,
    pub tasks: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_height: 224,
            input_width: 224,
            conv_channels: vec![8, 16, 32],
            head_hidden: 16,
            dropout: 0.4,
            tasks: crate::TASK_COUNT,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn with_input(size: usize) -> Self {
        NetConfig { input_height: size, input_width: size, ..NetConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive".into());
        }
        let div = 1usize << self.conv_channels.len();
        if self.input_height == 0 || self.input_width == 0 || self.input_height % div != 0 || self.input_width % div != 0 {
            return bad(format!("input {}x{} must be positive multiples of {div}", self.input_height, self.input_width));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.tasks == 0 || self.head_hidden == 0 {
            return bad("tasks and head_hidden must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.conv_channels.last().expect("validated")
    }

    /// Spatial size of the final feature maps.
    pub fn feature_shape(&self) -> (usize, usize) {
        let div = 1usize << self.conv_channels.len();
        (self.input_height / div, self.input_width / div)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Which optimizer group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv and linear weights; subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    /// `[hidden, embedding]`
    pub fc_weight: Vec<T>,
    pub fc_bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub out_weight: Vec<T>,
    pub out_bias: Vec<T>,
}

/// All trainable tensors. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    pub conv: Vec<ConvBlock<T>>,
    pub heads: Vec<Head<T>>,
}

/// Named view of one tensor.
pub struct ParamView<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [T],
}

impl<T: Scalar> NetParams<T> {
    pub fn zeros(config: &NetConfig) -> Self {
        let mut conv = Vec::new();
        let mut cin = 3;
        for &cout in &config.conv_channels {
            conv.push(ConvBlock {
                in_channels: cin,
                out_channels: cout,
                weight: vec![T::zero(); cout * cin * 9],
                bias: vec![T::zero(); cout],
            });
            cin = cout;
        }
        let (d, k) = (config.embedding_dim(), config.head_hidden);
        let heads = (0..config.tasks)
            .map(|_| Head {
                fc_weight: vec![T::zero(); k * d],
                fc_bias: vec![T::zero(); k],
                bn_gamma: vec![T::zero(); k],
                bn_beta: vec![T::zero(); k],
                out_weight: vec![T::zero(); k],
                out_bias: vec![T::zero(); 1],
            })
            .collect();
        NetParams { conv, heads }
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        for (i, b) in self.conv.iter().enumerate() {
            out.push(ParamView {
                name: format!("conv{i}.weight"),
                kind: ParamKind::Weight,
                shape: vec![b.out_channels, b.in_channels, 3, 3],
                data: &b.weight,
            });
            out.push(ParamView { name: format!("conv{i}.bias"), kind: ParamKind::Bias, shape: vec![b.out_channels], data: &b.bias });
        }
        for (t, h) in self.heads.iter().enumerate() {
            let k = h.fc_bias.len();
            let d = h.fc_weight.len() / k.max(1);
            let entries: [(&str, ParamKind, Vec<usize>, &[T]); 6] = [
                ("fc.weight", ParamKind::Weight, vec![k, d], &h.fc_weight),
                ("fc.bias", ParamKind::Bias, vec![k], &h.fc_bias),
                ("bn.gamma", ParamKind::Norm, vec![k], &h.bn_gamma),
                ("bn.beta", ParamKind::Norm, vec![k], &h.bn_beta),
                ("out.weight", ParamKind::Weight, vec![1, k], &h.out_weight),
                ("out.bias", ParamKind::Bias, vec![1], &h.out_bias),
            ];
            for (name, kind, shape, data) in entries {
                out.push(ParamView { name: format!("head{t}.{name}"), kind, shape, data });
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamViewMut<'_, T>> {
        let mut out = Vec::new();
        for (i, b) in self.conv.iter_mut().enumerate() {
            out.push(ParamViewMut { name: format!("conv{i}.weight"), kind: ParamKind::Weight, data: &mut b.weight });
            out.push(ParamViewMut { name: format!("conv{i}.bias"), kind: ParamKind::Bias, data: &mut b.bias });
        }
        for (t, h) in self.heads.iter_mut().enumerate() {
            let entries: [(&str, ParamKind, &mut [T]); 6] = [
                ("fc.weight", ParamKind::Weight, &mut h.fc_weight),
                ("fc.bias", ParamKind::Bias, &mut h.fc_bias),
                ("bn.gamma", ParamKind::Norm, &mut h.bn_gamma),
                ("bn.beta", ParamKind::Norm, &mut h.bn_beta),
                ("out.weight", ParamKind::Weight, &mut h.out_weight),
                ("out.bias", ParamKind::Bias, &mut h.out_bias),
            ];
            for (name, kind, data) in entries {
                out.push(ParamViewMut { name: format!("head{t}.{name}"), kind, data });
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &NetParams<T>) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += *s;
            }
        }
    }
}

/// Activations of one conv block for one sample.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    /// Post-ReLU conv output at the block's input resolution.
    pub activated: Vec<T>,
    pub pooled: Vec<T>,
    argmax: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct SampleCache<T> {
    pub input: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
    /// Global-average-pooled embedding `h`.
    pub embedding: Vec<T>,
}

impl<T: Scalar> SampleCache<T> {
    /// Final conv feature maps `F`, shape `(channels, h, w)`.
    pub fn feature_maps(&self) -> PlaneTensor<T> {
        let last = self.blocks.last().expect("at least one block");
        PlaneTensor {
            channels: self.embedding.len(),
            height: last.height / 2,
            width: last.width / 2,
            data: last.pooled.clone(),
        }
    }
}

/// Which side of every kink the network sits on: ReLU gates and max-pool
/// winners of the backbone, and the head ReLU gates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    /// `[sample][block]` gate per conv activation.
    pub conv_gates: Vec<Vec<Vec<bool>>>,
    /// `[sample][block]` winning index (0..4) per pooling window.
    pub pool_winners: Vec<Vec<Vec<u8>>>,
    /// `[task]` gate per `batch x hidden` unit.
    pub head_gates: Vec<Vec<bool>>,
}

/// Per-head activations over the batch, each `batch x hidden`.
#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    pub pre_norm: Vec<T>,
    pub normalized: Vec<T>,
    /// `1 / sqrt(var + eps)` per hidden unit, from batch or running stats.
    pub inv_std: Vec<T>,
    pub activated: Vec<T>,
    pub dropout_scale: Vec<T>,
    pub hidden: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub mode: Mode,
    pub samples: Vec<SampleCache<T>>,
    pub heads: Vec<HeadCache<T>>,
    /// `batch x tasks`
    pub logits: Vec<Vec<T>>,
    frozen: bool,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn activation_pattern(&self) -> ActivationPattern {
        ActivationPattern {
            conv_gates: self
                .samples
                .iter()
                .map(|s| s.blocks.iter().map(|b| b.activated.iter().map(|&a| a > T::zero()).collect()).collect())
                .collect(),
            pool_winners: self.samples.iter().map(|s| s.blocks.iter().map(|b| b.argmax.clone()).collect()).collect(),
            head_gates: self.heads.iter().map(|h| h.activated.iter().map(|&a| a > T::zero()).collect()).collect(),
        }
    }

    pub fn probabilities(&self) -> Vec<Vec<T>> {
        self.logits.iter().map(|row| row.iter().map(|&z| sigmoid(z)).collect()).collect()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: NetParams<T>,
    /// `[task][sample]` gradients of each logit w.r.t. the final feature
    /// maps, with the other heads detached. Present when requested.
    pub feature_maps: Option<Vec<Vec<PlaneTensor<T>>>>,
}

/// The shared-backbone multi-task network.
#[derive(Clone, Debug)]
pub struct MultiTaskNet<T> {
    pub config: NetConfig,
    pub params: NetParams<T>,
    pub running_mean: Vec<Vec<T>>,
    pub running_var: Vec<Vec<T>>,
    pub mode: Mode,
    dropout_rng: Rng,
    dropout_seed: u64,
}

impl<T: Scalar> MultiTaskNet<T> {
    /// He-uniform weights, zero biases, unit BN scale, running stats (0, 1).
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = NetParams::zeros(&config);
        let mut r = rng::stream(seed, &[0x1417]);
        let mut fill = |data: &mut [T], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in data.iter_mut() {
                *v = T::lit(r.random_range(-bound..=bound));
            }
        };
        for b in &mut params.conv {
            fill(&mut b.weight, b.in_channels * 9);
        }
        let d = config.embedding_dim();
        for h in &mut params.heads {
            fill(&mut h.fc_weight, d);
            fill(&mut h.out_weight, config.head_hidden);
            h.bn_gamma.fill(T::one());
        }
        Ok(Self::from_parts(config, params, seed))
    }

    pub(crate) fn from_parts(config: NetConfig, params: NetParams<T>, dropout_seed: u64) -> Self {
        let k = config.head_hidden;
        MultiTaskNet {
            running_mean: vec![vec![T::zero(); k]; config.tasks],
            running_var: vec![vec![T::one(); k]; config.tasks],
            config,
            params,
            mode: Mode::Train,
            dropout_rng: rng::stream(dropout_seed, &[0xd409]),
            dropout_seed,
        }
    }

    pub fn dropout_seed(&self) -> u64 {
        self.dropout_seed
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_batch(&self, batch: &[PlaneTensor<T>]) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let want = (3, self.config.input_height, self.config.input_width);
        for x in batch {
            if x.shape() != want || x.data.len() != want.0 * want.1 * want.2 {
                return Err(ModelError::InputShape { expected: want, actual: x.shape() });
            }
        }
        Ok(())
    }

    /// Forward pass in the current mode. Train mode updates BN running
    /// statistics and advances the dropout stream.
    pub fn forward(&mut self, batch: &[PlaneTensor<T>]) -> Result<(ForwardCache<T>, Vec<Vec<T>>), ModelError> {
        let cache = match self.mode {
            Mode::Eval => self.run_forward(batch, Mode::Eval, None)?,
            Mode::Train => {
                let mut r = self.dropout_rng.clone();
                let cache = self.run_forward(batch, Mode::Train, Some(&mut r))?;
                self.dropout_rng = r;
                self.update_running_stats(&cache);
                cache
            }
        };
        let probs = cache.probabilities();
        Ok((cache, probs))
    }

    /// Eval-mode forward pass; a pure function of `(self, batch)`.
    pub fn forward_eval(&self, batch: &[PlaneTensor<T>]) -> Result<ForwardCache<T>, ModelError> {
        self.run_forward(batch, Mode::Eval, None)
    }

    /// Eval-mode probabilities, `batch x tasks`.
    pub fn predict(&self, batch: &[PlaneTensor<T>]) -> Result<Vec<Vec<T>>, ModelError> {
        Ok(self.forward_eval(batch)?.probabilities())
    }

    fn backbone_forward(&self, x: &PlaneTensor<T>, frozen: Option<(&[Vec<bool>], &[Vec<u8>])>) -> SampleCache<T> {
        let (mut h, mut w) = (self.config.input_height, self.config.input_width);
        let mut blocks = Vec::with_capacity(self.params.conv.len());
        let mut current: &[T] = &x.data;
        for (l, block) in self.params.conv.iter().enumerate() {
            let mut act = vec![T::zero(); block.out_channels * h * w];
            conv3x3_forward(current, block.in_channels, h, w, &block.weight, &block.bias, block.out_channels, &mut act);
            let (pooled, argmax) = match frozen {
                None => relu_maxpool_forward(&mut act, block.out_channels, h, w),
                Some((gates, winners)) => {
                    let pooled = gated_pool_forward(&act, &gates[l], &winners[l], block.out_channels, h, w);
                    for (a, &g) in act.iter_mut().zip(&gates[l]) {
                        if !g {
                            *a = T::zero();
                        }
                    }
                    (pooled, winners[l].clone())
                }
            };
            blocks.push(BlockCache { activated: act, pooled, argmax, height: h, width: w });
            h /= 2;
            w /= 2;
            current = &blocks.last().expect("pushed").pooled;
        }
        let embedding = global_avg_pool(current, self.config.embedding_dim(), h * w);
        SampleCache { input: x.data.clone(), blocks, embedding }
    }

    /// Eval-mode forward with every ReLU gate and pooling winner taken from
    /// `pattern` rather than recomputed. On the region where the pattern does
    /// not change this coincides with [`Self::forward_eval`]; it is smooth in
    /// the parameters everywhere, which makes it the reference function for
    /// finite-difference gradient checks. The returned cache is rejected by
    /// [`Self::backward`].
    pub fn forward_eval_with_pattern(
        &self,
        batch: &[PlaneTensor<T>],
        pattern: &ActivationPattern,
    ) -> Result<ForwardCache<T>, ModelError> {
        let nblocks = self.params.conv.len();
        if pattern.conv_gates.len() != batch.len()
            || pattern.pool_winners.len() != batch.len()
            || pattern.conv_gates.iter().any(|g| g.len() != nblocks)
            || pattern.pool_winners.iter().any(|g| g.len() != nblocks)
            || pattern.head_gates.len() != self.config.tasks
            || pattern.head_gates.iter().any(|g| g.len() != batch.len() * self.config.head_hidden)
        {
            return Err(ModelError::StaleCache("activation pattern does not match the batch".into()));
        }
        self.run_forward_inner(batch, Mode::Eval, None, Some(pattern))
    }

    fn run_forward(&self, batch: &[PlaneTensor<T>], mode: Mode, dropout: Option<&mut Rng>) -> Result<ForwardCache<T>, ModelError> {
        self.run_forward_inner(batch, mode, dropout, None)
    }

    fn run_forward_inner(
        &self,
        batch: &[PlaneTensor<T>],
        mode: Mode,
        mut dropout: Option<&mut Rng>,
        pattern: Option<&ActivationPattern>,
    ) -> Result<ForwardCache<T>, ModelError> {
        self.check_batch(batch)?;
        let b = batch.len();
        if mode == Mode::Train && b < 2 {
            return Err(ModelError::BatchTooSmallForBN);
        }
        let samples: Vec<SampleCache<T>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                self.backbone_forward(x, pattern.map(|p| (p.conv_gates[i].as_slice(), p.pool_winners[i].as_slice())))
            })
            .collect();

        let (d, k) = (self.config.embedding_dim(), self.config.head_hidden);
        let eps = T::lit(self.config.bn_eps);
        let p = self.config.dropout;
        let keep_scale = T::lit(1.0 / (1.0 - p));
        let mut heads = Vec::with_capacity(self.config.tasks);
        let mut logits = vec![vec![T::zero(); self.config.tasks]; b];
        for (t, head) in self.params.heads.iter().enumerate() {
            let mut pre = vec![T::zero(); b * k];
            for (s, sample) in samples.iter().enumerate() {
                for j in 0..k {
                    pre[s * k + j] = head.fc_bias[j] + crate::scalar::dot(&head.fc_weight[j * d..(j + 1) * d], &sample.embedding);
                }
            }
            let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
                Mode::Train => {
                    let nb = T::from_count(b);
                    (0..k)
                        .map(|j| {
                            let m = (0..b).map(|s| pre[s * k + j]).sum::<T>() / nb;
                            let v = (0..b).map(|s| (pre[s * k + j] - m).powi(2)).sum::<T>() / nb;
                            (m, T::one() / (v + eps).sqrt())
                        })
                        .unzip()
                }
                Mode::Eval => (
                    self.running_mean[t].clone(),
                    self.running_var[t].iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
                ),
            };
            let mut normalized = vec![T::zero(); b * k];
            let mut activated = vec![T::zero(); b * k];
            let mut scale = vec![T::one(); b * k];
            let mut hidden = vec![T::zero(); b * k];
            for s in 0..b {
                for j in 0..k {
                    let i = s * k + j;
                    normalized[i] = (pre[i] - mean[j]) * inv_std[j];
                    let y = head.bn_gamma[j] * normalized[i] + head.bn_beta[j];
                    activated[i] = match pattern {
                        None => y.max(T::zero()),
                        Some(p) if p.head_gates[t][i] => y,
                        Some(_) => T::zero(),
                    };
                    if mode == Mode::Train && p > 0.0 {
                        let r = dropout.as_deref_mut().expect("train mode carries a dropout stream");
                        scale[i] = if r.random::<f64>() < p { T::zero() } else { keep_scale };
                    }
                    hidden[i] = activated[i] * scale[i];
                }
                logits[s][t] = head.out_bias[0] + crate::scalar::dot(&head.out_weight, &hidden[s * k..(s + 1) * k]);
            }
            heads.push(HeadCache { pre_norm: pre, normalized, inv_std, activated, dropout_scale: scale, hidden });
        }
        Ok(ForwardCache { mode, samples, heads, logits, frozen: pattern.is_some() })
    }

    fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let b = cache.samples.len();
        let k = self.config.head_hidden;
        let m = T::lit(self.config.bn_momentum);
        let nb = T::from_count(b);
        let unbias = nb / T::from_count(b - 1);
        for (t, hc) in cache.heads.iter().enumerate() {
            for j in 0..k {
                let mean = (0..b).map(|s| hc.pre_norm[s * k + j]).sum::<T>() / nb;
                let var = (0..b).map(|s| (hc.pre_norm[s * k + j] - mean).powi(2)).sum::<T>() / nb;
                self.running_mean[t][j] = (T::one() - m) * self.running_mean[t][j] + m * mean;
                self.running_var[t][j] = (T::one() - m) * self.running_var[t][j] + m * var * unbias;
            }
        }
    }

    /// Head gradients plus `[task][sample]` embedding gradients.
    #[allow(clippy::type_complexity)]
    fn heads_backward(&self, cache: &ForwardCache<T>, dlogits: &[Vec<T>]) -> Result<(NetParams<T>, Vec<Vec<Vec<T>>>), ModelError> {
        let b = cache.samples.len();
        let (d, k, tasks) = (self.config.embedding_dim(), self.config.head_hidden, self.config.tasks);
        if dlogits.len() != b || dlogits.iter().any(|r| r.len() != tasks) {
            return Err(ModelError::StaleCache(format!("upstream gradient is not {b} x {tasks}")));
        }
        if cache.frozen {
            return Err(ModelError::StaleCache("cache came from a frozen-pattern forward".into()));
        }
        if cache.heads.len() != tasks
            || cache.heads.iter().any(|h| h.pre_norm.len() != b * k)
            || cache.samples.iter().any(|s| s.embedding.len() != d || s.blocks.len() != self.params.conv.len())
            || cache.samples.iter().any(|s| s.input.len() != 3 * self.config.input_height * self.config.input_width)
        {
            return Err(ModelError::StaleCache("cache shapes do not match the network".into()));
        }

        let mut grads = NetParams::zeros(&self.config);
        // per-task embedding gradients, [task][sample][d]
        let mut dh_task = vec![vec![vec![T::zero(); d]; b]; tasks];
        let nb = T::from_count(b);
        for t in 0..tasks {
            let (head, hc, g) = (&self.params.heads[t], &cache.heads[t], &mut grads.heads[t]);
            let mut dpre = vec![T::zero(); b * k];
            let mut dxhat = vec![T::zero(); b * k];
            for s in 0..b {
                let dz = dlogits[s][t];
                g.out_bias[0] += dz;
                for j in 0..k {
                    let i = s * k + j;
                    g.out_weight[j] += dz * hc.hidden[i];
                    let dact = dz * head.out_weight[j] * hc.dropout_scale[i];
                    let dbn = if hc.activated[i] > T::zero() { dact } else { T::zero() };
                    g.bn_gamma[j] += dbn * hc.normalized[i];
                    g.bn_beta[j] += dbn;
                    dxhat[i] = dbn * head.bn_gamma[j];
                }
            }
            match cache.mode {
                Mode::Eval => {
                    for s in 0..b {
                        for j in 0..k {
                            dpre[s * k + j] = dxhat[s * k + j] * hc.inv_std[j];
                        }
                    }
                }
                Mode::Train => {
                    for j in 0..k {
                        let sum_d = (0..b).map(|s| dxhat[s * k + j]).sum::<T>();
                        let sum_dx = (0..b).map(|s| dxhat[s * k + j] * hc.normalized[s * k + j]).sum::<T>();
                        for s in 0..b {
                            let i = s * k + j;
                            dpre[i] = hc.inv_std[j] / nb * (nb * dxhat[i] - sum_d - hc.normalized[i] * sum_dx);
                        }
                    }
                }
            }
            for s in 0..b {
                let emb = &cache.samples[s].embedding;
                for j in 0..k {
                    let g_u = dpre[s * k + j];
                    g.fc_bias[j] += g_u;
                    crate::scalar::axpy(g_u, emb, &mut g.fc_weight[j * d..(j + 1) * d]);
                    crate::scalar::axpy(g_u, &head.fc_weight[j * d..(j + 1) * d], &mut dh_task[t][s]);
                }
            }
        }
        Ok((grads, dh_task))
    }

    /// Per-task gradients of the logits with respect to the final feature
    /// maps, `[task][sample]`, each task's head taken alone. Only the heads
    /// are differentiated.
    pub fn feature_map_gradients(&self, cache: &ForwardCache<T>, dlogits: &[Vec<T>]) -> Result<Vec<Vec<PlaneTensor<T>>>, ModelError> {
        let (_, dh_task) = self.heads_backward(cache, dlogits)?;
        Ok(self.embedding_to_feature_grads(&dh_task))
    }

    fn embedding_to_feature_grads(&self, dh_task: &[Vec<Vec<T>>]) -> Vec<Vec<PlaneTensor<T>>> {
        let (fh, fw) = self.config.feature_shape();
        let d = self.config.embedding_dim();
        dh_task
            .iter()
            .map(|per_sample| {
                per_sample
                    .iter()
                    .map(|dh| PlaneTensor { channels: d, height: fh, width: fw, data: global_avg_pool_backward(dh, fh * fw) })
                    .collect()
            })
            .collect()
    }

    /// Reverse-mode gradients of `sum_{b,t} dlogits[b][t] * z[b][t]`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &[Vec<T>],
        feature_maps: bool,
    ) -> Result<Gradients<T>, ModelError> {
        let (mut grads, dh_task) = self.heads_backward(cache, dlogits)?;
        let b = cache.samples.len();
        let d = self.config.embedding_dim();
        let (fh, fw) = self.config.feature_shape();
        let n = fh * fw;
        let per_sample: Vec<Vec<ConvBlock<T>>> = (0..b)
            .into_par_iter()
            .map(|s| {
                let mut dh = vec![T::zero(); d];
                for task in &dh_task {
                    for (acc, v) in dh.iter_mut().zip(&task[s]) {
                        *acc += *v;
                    }
                }
                self.backbone_backward(&cache.samples[s], global_avg_pool_backward(&dh, n))
            })
            .collect();
        for sample in per_sample {
            for (dst, src) in grads.conv.iter_mut().zip(sample) {
                for (a, v) in dst.weight.iter_mut().zip(&src.weight) {
                    *a += *v;
                }
                for (a, v) in dst.bias.iter_mut().zip(&src.bias) {
                    *a += *v;
                }
            }
        }

        let feature_grads = feature_maps.then(|| self.embedding_to_feature_grads(&dh_task));
        Ok(Gradients { params: grads, feature_maps: feature_grads })
    }

    fn backbone_backward(&self, sample: &SampleCache<T>, dfeat: Vec<T>) -> Vec<ConvBlock<T>> {
        let nblocks = self.params.conv.len();
        let mut out: Vec<ConvBlock<T>> = self
            .params
            .conv
            .iter()
            .map(|c| ConvBlock {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                weight: vec![T::zero(); c.weight.len()],
                bias: vec![T::zero(); c.bias.len()],
            })
            .collect();
        let mut dpooled = dfeat;
        for l in (0..nblocks).rev() {
            let (block, bc) = (&self.params.conv[l], &sample.blocks[l]);
            let (h, w) = (bc.height, bc.width);
            let dact = relu_maxpool_backward(&dpooled, &bc.argmax, &bc.activated, block.out_channels, h, w);
            let input: &[T] = if l == 0 { &sample.input } else { &sample.blocks[l - 1].pooled };
            let mut dinput = if l > 0 { Some(vec![T::zero(); block.in_channels * h * w]) } else { None };
            let g = &mut out[l];
            conv3x3_backward(
                input,
                block.in_channels,
                h,
                w,
                &block.weight,
                block.out_channels,
                &dact,
                &mut g.weight,
                &mut g.bias,
                dinput.as_deref_mut(),
            );
            if let Some(di) = dinput {
                dpooled = di;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(n: usize, size: usize, seed: u64) -> Vec<PlaneTensor<f64>> {
        let mut r = rng::stream(seed, &[]);
        (0..n)
            .map(|_| {
                let data = (0..3 * size * size).map(|_| StandardNormal.sample(&mut r)).collect();
                PlaneTensor::new(3, size, size, data).unwrap()
            })
            .collect()
    }

    /// Eval-mode net with non-trivial BN state so every head parameter matters.
    fn perturbed_net(size: usize, seed: u64) -> MultiTaskNet<f64> {
        let mut net = MultiTaskNet::<f64>::init(NetConfig::with_input(size), seed).unwrap();
        let mut r = rng::stream(seed, &[7]);
        for b in &mut net.params.conv {
            for v in &mut b.bias {
                *v = r.random_range(-0.1..0.1);
            }
        }
        // running stats near the statistics of a reference batch
        let cache = net.forward_eval(&random_batch(8, size, seed ^ 0xabc)).unwrap();
        let k = net.config.head_hidden;
        for t in 0..net.config.tasks {
            for j in 0..k {
                let col: Vec<f64> = (0..8).map(|s| cache.heads[t].pre_norm[s * k + j]).collect();
                let m = col.iter().sum::<f64>() / 8.0;
                let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 8.0;
                net.running_mean[t][j] = m + r.random_range(-0.1..0.1) * v.sqrt();
                net.running_var[t][j] = v * r.random_range(0.8..1.2);
                net.params.heads[t].bn_beta[j] = r.random_range(-0.2..0.2);
                net.params.heads[t].bn_gamma[j] = r.random_range(0.5..1.5);
            }
            net.params.heads[t].out_bias[0] = r.random_range(-0.1..0.1);
        }
        net.set_mode(Mode::Eval);
        net
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MultiTaskNet::<f64>::init(NetConfig::with_input(16), 5).unwrap();
        let b = MultiTaskNet::<f64>::init(NetConfig::with_input(16), 5).unwrap();
        let c = MultiTaskNet::<f64>::init(NetConfig::with_input(16), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!((bound - 0.4714).abs() < 1e-4);
        assert!(a.params.conv[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.params.conv[0].bias.iter().all(|&b| b == 0.0));
        assert!(a.params.heads.iter().all(|h| h.bn_gamma.iter().all(|&g| g == 1.0) && h.bn_beta.iter().all(|&g| g == 0.0)));
        assert!(a.running_var.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let cfg = NetConfig::with_input(8);
        let net = MultiTaskNet::<f64>::from_parts(cfg.clone(), NetParams::zeros(&cfg), 0);
        let p = net.predict(&random_batch(3, 8, 1)).unwrap();
        assert_eq!(p, vec![vec![0.5; 3]; 3]);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::with_input(12).validate().is_err());
        assert!(NetConfig { dropout: 1.0, ..NetConfig::with_input(8) }.validate().is_err());
        assert!(NetConfig::with_input(96).validate().is_ok());
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let mut net = MultiTaskNet::<f64>::init(NetConfig::with_input(8), 1).unwrap();
        assert!(matches!(net.forward(&random_batch(1, 8, 1)), Err(ModelError::BatchTooSmallForBN)));
        net.set_mode(Mode::Eval);
        assert!(net.forward(&random_batch(1, 8, 1)).is_ok());
        let wrong = random_batch(2, 16, 1);
        assert!(matches!(net.forward(&wrong), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn eval_forward_is_pure_and_shaped() {
        let net = perturbed_net(16, 2);
        let x = random_batch(5, 16, 3);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|r| r.len() == 3 && r.iter().all(|&p| p > 0.0 && p < 1.0)));
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = MultiTaskNet::<f64>::init(NetConfig::with_input(8), 1).unwrap();
        let before = net.running_var.clone();
        net.forward(&random_batch(4, 8, 2)).unwrap();
        assert_ne!(net.running_var, before);
        assert!(net.running_var.iter().flatten().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = perturbed_net(8, 4);
        let x = random_batch(2, 8, 5);
        let cache = net.forward_eval(&x).unwrap();
        let g = net.backward(&cache, &vec![vec![0.0; 3]; 2], false).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_is_detected() {
        let net = perturbed_net(8, 4);
        let cache = net.forward_eval(&random_batch(2, 8, 5)).unwrap();
        assert!(matches!(net.backward(&cache, &vec![vec![0.0; 3]; 3], false), Err(ModelError::StaleCache(_))));
        let other = perturbed_net(16, 4);
        assert!(matches!(other.backward(&cache, &vec![vec![0.0; 3]; 2], false), Err(ModelError::StaleCache(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = perturbed_net(8, 11);
        let x = random_batch(4, 8, 12);
        // a random linear functional of the logits; backward only sees dL/dz
        let mut r = rng::stream(13, &[]);
        let dz: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let cache = net.forward_eval(&x).unwrap();
        let pattern = cache.activation_pattern();
        let analytic = net.backward(&cache, &dz, false).unwrap().params;
        let flat: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let loss = |c: &ForwardCache<f64>| -> f64 {
            c.logits.iter().zip(&dz).flat_map(|(zr, cr)| zr.iter().zip(cr).map(|(z, c)| z * c)).sum()
        };
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

        let eps = 1e-3;
        let (mut worst_frozen, mut worst_smooth, mut crossings) = (0.0f64, 0.0f64, 0);
        let mut offset = 0;
        for ti in 0..net.params.tensors().len() {
            let len = net.params.tensors()[ti].data.len();
            for i in 0..len {
                let orig = net.params.tensors_mut()[ti].data[i];
                let mut eval = |v: f64| {
                    net.params.tensors_mut()[ti].data[i] = v;
                    let plain = net.forward_eval(&x).unwrap();
                    let frozen = net.forward_eval_with_pattern(&x, &pattern).unwrap();
                    (loss(&plain), plain.activation_pattern() == pattern, loss(&frozen))
                };
                let (up, up_same, up_frozen) = eval(orig + eps);
                let (down, down_same, down_frozen) = eval(orig - eps);
                net.params.tensors_mut()[ti].data[i] = orig;
                let a = flat[offset + i];
                let nf = (up_frozen - down_frozen) / (2.0 * eps);
                worst_frozen = worst_frozen.max(rel(a, nf));
                if up_same && down_same {
                    worst_smooth = worst_smooth.max(rel(a, (up - down) / (2.0 * eps)));
                } else {
                    crossings += 1;
                }
            }
            offset += len;
        }
        assert!(worst_frozen < 1e-4, "frozen-pattern max relative error {worst_frozen:e}");
        assert!(worst_smooth < 1e-4, "kink-free max relative error {worst_smooth:e}");
        assert!(crossings < offset / 10, "{crossings} of {offset} perturbations cross a kink");
    }

    #[test]
    fn frozen_pattern_forward_matches_plain_forward_at_base_point() {
        let net = perturbed_net(8, 3);
        let x = random_batch(3, 8, 4);
        let c = net.forward_eval(&x).unwrap();
        let f = net.forward_eval_with_pattern(&x, &c.activation_pattern()).unwrap();
        assert_eq!(c.logits, f.logits);
        assert!(matches!(net.backward(&f, &vec![vec![0.0; 3]; 3], false), Err(ModelError::StaleCache(_))));
    }

    #[test]
    fn train_mode_batch_norm_gradient_matches_finite_differences() {
        // dropout off so the train-mode forward is deterministic
        let cfg = NetConfig { dropout: 0.0, ..NetConfig::with_input(8) };
        let mut net = MultiTaskNet::<f64>::init(cfg, 21).unwrap();
        let x = random_batch(4, 8, 22);
        let loss = |net: &MultiTaskNet<f64>| -> f64 {
            let c = net.run_forward(&x, Mode::Train, None).unwrap();
            c.logits.iter().enumerate().map(|(s, r)| r.iter().enumerate().map(|(t, z)| z * (1.0 + s as f64 - t as f64)).sum::<f64>()).sum()
        };
        let cache = net.run_forward(&x, Mode::Train, None).unwrap();
        let dz: Vec<Vec<f64>> = (0..4).map(|s| (0..3).map(|t| 1.0 + s as f64 - t as f64).collect()).collect();
        let g = net.backward(&cache, &dz, false).unwrap().params;
        let eps = 1e-4;
        for j in 0..net.config.head_hidden {
            for (k, a) in [(j * 32, g.heads[1].fc_weight[j * 32]), (j * 32 + 5, g.heads[1].fc_weight[j * 32 + 5])] {
                let orig = net.params.heads[1].fc_weight[k];
                net.params.heads[1].fc_weight[k] = orig + eps;
                let up = loss(&net);
                net.params.heads[1].fc_weight[k] = orig - eps;
                let down = loss(&net);
                net.params.heads[1].fc_weight[k] = orig;
                let n = (up - down) / (2.0 * eps);
                assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn head_contributions_are_additive() {
        let net = perturbed_net(16, 31);
        let x = random_batch(3, 16, 32);
        let cache = net.forward_eval(&x).unwrap();
        let up: Vec<Vec<f64>> = (0..3).map(|s| (0..3).map(|t| 0.3 + 0.2 * s as f64 - 0.4 * t as f64).collect()).collect();
        let full = net.backward(&cache, &up, false).unwrap().params;
        let mut sum = NetParams::<f64>::zeros(&net.config);
        for t in 0..3 {
            let only: Vec<Vec<f64>> = up.iter().map(|r| (0..3).map(|u| if u == t { r[t] } else { 0.0 }).collect()).collect();
            sum.accumulate(&net.backward(&cache, &only, false).unwrap().params);
        }
        for (a, b) in full.conv.iter().zip(&sum.conv) {
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn feature_map_gradient_through_gap_and_linear() {
        // one block, zero hidden bias path: dz/dF_k(i,j) = w_eff_k / (h w)
        let cfg = NetConfig { conv_channels: vec![2], head_hidden: 1, tasks: 1, ..NetConfig::with_input(4) };
        let mut params = NetParams::<f64>::zeros(&cfg);
        let h = &mut params.heads[0];
        h.fc_weight = vec![1.0, -1.0];
        h.bn_gamma = vec![1.0];
        h.bn_beta = vec![10.0];
        h.out_weight = vec![1.0];
        let net = MultiTaskNet::from_parts(cfg, params, 0);
        let cache = net.forward_eval(&random_batch(1, 4, 9)).unwrap();
        let g = net.backward(&cache, &[vec![1.0]], true).unwrap();
        let fm = &g.feature_maps.unwrap()[0][0];
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(fm.shape(), (2, 2, 2));
        for (c, w) in [(0, 1.0), (1, -1.0)] {
            for v in fm.plane(c) {
                assert!((v - w * scale / 4.0).abs() < 1e-15);
            }
        }
    }
}
