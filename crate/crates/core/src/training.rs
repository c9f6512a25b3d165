//! Losses, optimizer, schedule and the epoch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{ClassWeightPair, ClassWeights};
use crate::imaging::{augment, to_tensor_normalized, AugmentParams, NormStats, PlaneTensor, RasterImage};
use crate::metrics::{roc_auc, scored_samples};
use crate::model::{Mode, ModelError, MultiTaskNet, NetParams, ParamKind};
use crate::rng;
use crate::{Scalar, Task, TaskLabels, TASK_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("image {index} is {actual:?}, network expects {expected:?}")]
    ImageSize { index: usize, expected: (usize, usize), actual: (usize, usize) },
}

/// Clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct BceOutput<T> {
    pub loss: T,
    /// Gradient with respect to each logit.
    pub dlogits: Vec<T>,
    pub labeled: usize,
    pub all_missing: bool,
}

/// Class-weighted binary cross-entropy averaged over labeled samples.
pub fn weighted_bce<T: Scalar>(p: &[T], y: &[Option<bool>], w: &ClassWeightPair) -> BceOutput<T> {
    assert_eq!(p.len(), y.len(), "probabilities and labels differ in length");
    let labeled = y.iter().filter(|l| l.is_some()).count();
    if labeled == 0 {
        return BceOutput { loss: T::zero(), dlogits: vec![T::zero(); p.len()], labeled, all_missing: true };
    }
    let count = T::from_count(labeled);
    let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
    let mut loss = T::zero();
    let dlogits = p
        .iter()
        .zip(y)
        .map(|(&pi, yi)| match *yi {
            None => T::zero(),
            Some(pos) => {
                let wi = T::lit(w.for_label(pos));
                let pc = pi.max(lo).min(hi);
                loss -= wi * if pos { pc.ln() } else { (T::one() - pc).ln() };
                let target = if pos { T::one() } else { T::zero() };
                wi * (pi - target) / count
            }
        })
        .collect();
    BceOutput { loss: loss / count, dlogits, labeled, all_missing: false }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `sum_t lambda_t L_t`
    #[default]
    LambdaSum,
    /// `sum_t exp(-2 s_t) L_t + s_t` with learnable `s_t = log sigma_t`.
    UncertaintyWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub task_weights: [f64; TASK_COUNT],
    pub variant: LossVariant,
    /// Inverse-frequency class weights from the training split when set;
    /// unit weights otherwise.
    pub class_weighting: bool,
    #[serde(skip)]
    pub class_weights: Option<ClassWeights>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { task_weights: [1.0; TASK_COUNT], variant: LossVariant::LambdaSum, class_weighting: true, class_weights: None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.task_weights.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(TrainError::InvalidConfig("task weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn class_weights(&self) -> ClassWeights {
        self.class_weights.unwrap_or_else(ClassWeights::unit)
    }
}

/// Combined loss and its partial derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss<T> {
    pub value: T,
    /// `d total / d L_t`
    pub task_scale: [T; TASK_COUNT],
    /// `d total / d s_t` for the uncertainty variant; zeros otherwise.
    pub dlog_sigma: [T; TASK_COUNT],
}

pub fn total_loss<T: Scalar>(losses: &[T; TASK_COUNT], config: &LossConfig, log_sigma: &[T; TASK_COUNT]) -> TotalLoss<T> {
    let mut out = TotalLoss { value: T::zero(), task_scale: [T::zero(); TASK_COUNT], dlog_sigma: [T::zero(); TASK_COUNT] };
    for t in 0..TASK_COUNT {
        match config.variant {
            LossVariant::LambdaSum => {
                let l = T::lit(config.task_weights[t]);
                out.value += l * losses[t];
                out.task_scale[t] = l;
            }
            LossVariant::UncertaintyWeighted => {
                let s = log_sigma[t];
                let inv_var = (-(s + s)).exp();
                out.value += inv_var * losses[t] + s;
                out.task_scale[t] = inv_var;
                out.dlog_sigma[t] = T::one() - (inv_var + inv_var) * losses[t];
            }
        }
    }
    out
}

/// Scales all tensors in place when their joint L2 norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: T) -> Result<T, TrainError> {
    let mut sq = T::zero();
    for g in grads.iter() {
        for &v in g.iter() {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteGradient);
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t_max: usize,
    pub clip_max_norm: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t_max: 50,
            clip_max_norm: 1.0,
            patience: 8,
            max_epochs: 50,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.patience == 0 || self.t_max == 0 || self.max_epochs == 0 {
            return bad("patience, t_max and max_epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for batch norm");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) || !(self.clip_max_norm > 0.0) {
            return bad("weight_decay >= 0, eps > 0 and clip_max_norm > 0 required");
        }
        Ok(())
    }
}

/// Cosine annealing from `lr` to 0 over `t_max` epochs; later epochs stay at 0.
pub fn cosine_lr(epoch: usize, config: &OptimConfig) -> f64 {
    let e = epoch.min(config.t_max) as f64;
    0.5 * config.lr * (1.0 + (std::f64::consts::PI * e / config.t_max as f64).cos())
}

/// One AdamW update of a single tensor at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    t: u64,
    config: &OptimConfig,
    decay: bool,
) {
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::one() - T::lit(config.beta1.powi(t as i32));
    let c2 = T::one() - T::lit(config.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(lr), T::lit(config.eps));
    let wd = if decay { T::lit(config.weight_decay) } else { T::zero() };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * theta[i]);
    }
}

/// Moment buffers for the network tensors plus the loss's `log sigma`.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &NetParams<T>) -> Self {
        let mut sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        sizes.push(TASK_COUNT);
        AdamW { m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(), v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Weight decay applies to [`ParamKind::Weight`] tensors only.
    pub fn step(&mut self, params: &mut NetParams<T>, grads: &NetParams<T>, log_sigma: Option<(&mut [T; TASK_COUNT], &[T; TASK_COUNT])>, lr: f64, config: &OptimConfig) {
        self.step += 1;
        let t = self.step;
        let n = self.m.len() - 1;
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut self.m[..n]).zip(&mut self.v[..n]) {
            adamw_update(p.data, g.data, m, v, lr, t, config, p.kind == ParamKind::Weight);
        }
        if let Some((s, g)) = log_sigma {
            adamw_update(s, g, &mut self.m[n], &mut self.v[n], lr, t, config, false);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience counter over a maximized metric; strict improvement resets it.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: None, bad_epochs: 0 }
    }

    /// `value` is `None` when the metric is undefined; it never improves.
    pub fn update(&mut self, epoch: usize, value: Option<f64>) -> StopDecision {
        let improved = match (value, self.best) {
            (Some(v), None) => v.is_finite(),
            (Some(v), Some(b)) => v > b,
            (None, _) => false,
        };
        if improved {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: [f64; TASK_COUNT],
    pub auc: [Option<f64>; TASK_COUNT],
    pub mean_auc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss_hba1c,loss_kidney,loss_multi,auc_hba1c,auc_kidney,auc_multi,mean_auc,lr";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.loss[0],
                r.loss[1],
                r.loss[2],
                opt(r.auc[0]),
                opt(r.auc[1]),
                opt(r.auc[2]),
                opt(r.mean_auc),
                r.lr
            );
        }
        out
    }

    pub fn best_mean_auc(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|r| r.epoch == best)?.mean_auc
    }
}

/// Images at network resolution with their labels.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub images: &'a [RasterImage],
    pub labels: &'a [TaskLabels],
}

impl<'a> Dataset<'a> {
    pub fn new(images: &'a [RasterImage], labels: &'a [TaskLabels]) -> Self {
        assert_eq!(images.len(), labels.len(), "images and labels differ in length");
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn check_size(&self, expected: (usize, usize)) -> Result<(), TrainError> {
        for (index, img) in self.images.iter().enumerate() {
            let actual = (img.width(), img.height());
            if actual != expected {
                return Err(TrainError::ImageSize { index, expected, actual });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentParams,
    pub norm: NormStats,
    /// Images per eval-mode forward call.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentParams::default(),
            norm: NormStats::IMAGENET,
            eval_batch: 64,
        }
    }
}

pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the highest mean validation AUC, in
    /// eval mode.
    pub best: MultiTaskNet<T>,
    pub log: TrainLog,
    pub log_sigma: [T; TASK_COUNT],
}

/// Splits `0..n` into batches of `size`; a trailing batch of one joins the
/// previous batch so batch norm always sees two samples.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// Eval-mode probabilities for every image, `n x tasks`.
pub fn predict_dataset<T: Scalar>(net: &MultiTaskNet<T>, images: &[RasterImage], norm: &NormStats, batch: usize) -> Result<Vec<Vec<T>>, ModelError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let tensors: Vec<PlaneTensor<T>> = chunk.iter().map(|img| to_tensor_normalized(img, norm)).collect();
        out.extend(net.predict(&tensors)?);
    }
    Ok(out)
}

/// Per-task AUC of `probs` against `labels`; `None` where undefined.
pub fn task_aucs<T: Scalar>(probs: &[Vec<T>], labels: &[TaskLabels]) -> [Option<f64>; TASK_COUNT] {
    let mut out = [None; TASK_COUNT];
    for task in Task::ALL {
        let t = task.index();
        let scores: Vec<T> = probs.iter().map(|p| p[t]).collect();
        let y: Vec<Option<bool>> = labels.iter().map(|l| l.get(task)).collect();
        out[t] = roc_auc(&scored_samples(&scores, &y)).ok().map(|a| a.value());
    }
    out
}

/// Mean over the tasks whose AUC is defined.
pub fn mean_auc(aucs: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aucs.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Runs the epoch loop and returns the best-validation network.
pub fn train<T: Scalar>(mut net: MultiTaskNet<T>, train_set: Dataset<'_>, val_set: Dataset<'_>, config: &TrainConfig) -> Result<TrainOutcome<T>, TrainError> {
    config.loss.validate()?;
    config.optim.validate()?;
    config.augment.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    if train_set.len() < 2 {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let dims = (net.config.input_width, net.config.input_height);
    train_set.check_size(dims)?;
    val_set.check_size(dims)?;

    let opt = &config.optim;
    let weights = config.loss.class_weights();
    let mut adam = AdamW::new(&net.params);
    let mut log_sigma = [T::zero(); TASK_COUNT];
    let mut stopper = EarlyStopping::new(opt.patience);
    let mut log = TrainLog::default();
    let mut best = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=opt.max_epochs {
        let lr = cosine_lr(epoch - 1, opt);
        net.set_mode(Mode::Train);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(opt.seed, &[0x5ffe, epoch as u64]));
        let mut loss_sum = [0.0f64; TASK_COUNT];
        let mut loss_batches = [0usize; TASK_COUNT];
        for range in batch_ranges(order.len(), opt.batch_size) {
            let idx = &order[range];
            let batch: Vec<PlaneTensor<T>> = idx
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(config.augment.rng_seed, &[epoch as u64, i as u64]);
                    to_tensor_normalized(&augment(&train_set.images[i], &config.augment, &mut r), &config.norm)
                })
                .collect();
            let (cache, probs) = net.forward(&batch)?;
            let mut per_task = [T::zero(); TASK_COUNT];
            let mut dz_task = Vec::with_capacity(TASK_COUNT);
            for task in Task::ALL {
                let t = task.index();
                let p: Vec<T> = probs.iter().map(|r| r[t]).collect();
                let y: Vec<Option<bool>> = idx.iter().map(|&i| train_set.labels[i].get(task)).collect();
                let out = weighted_bce(&p, &y, &weights.task(task));
                if !out.all_missing {
                    loss_sum[t] += out.loss.as_f64();
                    loss_batches[t] += 1;
                }
                per_task[t] = out.loss;
                dz_task.push(out.dlogits);
            }
            let total = total_loss(&per_task, &config.loss, &log_sigma);
            let dlogits: Vec<Vec<T>> = (0..idx.len()).map(|s| (0..TASK_COUNT).map(|t| dz_task[t][s] * total.task_scale[t]).collect()).collect();
            let mut grads = net.backward(&cache, &dlogits, false)?.params;
            let mut dsigma = total.dlog_sigma;
            {
                let mut views: Vec<&mut [T]> = grads.tensors_mut().into_iter().map(|v| v.data).collect();
                if config.loss.variant == LossVariant::UncertaintyWeighted {
                    views.push(&mut dsigma);
                }
                clip_grad_norm(&mut views, T::lit(opt.clip_max_norm))?;
            }
            let sigma = (config.loss.variant == LossVariant::UncertaintyWeighted).then_some((&mut log_sigma, &dsigma));
            adam.step(&mut net.params, &grads, sigma, lr, opt);
            if !net.params.all_finite() {
                return Err(TrainError::NonFiniteGradient);
            }
        }

        net.set_mode(Mode::Eval);
        let probs = predict_dataset(&net, val_set.images, &config.norm, config.eval_batch)?;
        let auc = task_aucs(&probs, val_set.labels);
        let mean = mean_auc(&auc);
        let loss = std::array::from_fn(|t| if loss_batches[t] == 0 { 0.0 } else { loss_sum[t] / loss_batches[t] as f64 });
        log.epochs.push(EpochRecord { epoch, loss, auc, mean_auc: mean, lr });
        let decision = stopper.update(epoch, mean);
        log::info!(
            "epoch {epoch}: loss {:.4}/{:.4}/{:.4} val auc {:?} mean {:?}",
            loss[0],
            loss[1],
            loss[2],
            auc,
            mean
        );
        if decision == StopDecision::Improved || best.is_none() {
            best = Some(net.clone());
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch;
    let mut best = best.expect("at least one epoch ran");
    best.set_mode(Mode::Eval);
    Ok(TrainOutcome { best, log, log_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const UNIT: ClassWeightPair = ClassWeightPair::UNIT;

    #[test]
    fn bce_examples() {
        let out = weighted_bce(&[0.5f64], &[Some(true)], &UNIT);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        let w = ClassWeightPair { negative: 1.0, positive: 2.0, missing_class: false };
        let out = weighted_bce(&[0.9f64], &[Some(true)], &w);
        assert!((out.loss - (-2.0 * 0.9f64.ln())).abs() < 1e-15);
        assert!((out.loss - 0.2107).abs() < 1e-4);

        let single = weighted_bce(&[0.3f64], &[Some(false)], &UNIT);
        let mixed = weighted_bce(&[0.3f64, 0.8], &[Some(false), None], &UNIT);
        assert_eq!(mixed.loss, single.loss);
        assert_eq!(mixed.dlogits[1], 0.0);

        let none = weighted_bce(&[0.3f64, 0.8], &[None, None], &UNIT);
        assert!(none.all_missing && none.loss == 0.0 && none.dlogits == vec![0.0, 0.0]);

        // clamping keeps the loss finite at p = 1
        let out = weighted_bce(&[1.0f64], &[Some(false)], &UNIT);
        assert!((out.loss + (PROB_CLAMP).ln()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let l = [0.2f64, 0.3, 0.5];
        let cfg = LossConfig::default();
        assert!((total_loss(&l, &cfg, &[0.0; 3]).value - 1.0).abs() < 1e-15);
        let cfg2 = LossConfig { task_weights: [2.0, 0.0, 0.0], ..LossConfig::default() };
        assert!((total_loss(&l, &cfg2, &[0.0; 3]).value - 0.4).abs() < 1e-15);
        let unc = LossConfig { variant: LossVariant::UncertaintyWeighted, ..LossConfig::default() };
        assert_eq!(total_loss(&l, &unc, &[0.0; 3]).value, total_loss(&l, &cfg, &[0.0; 3]).value);
    }

    #[test]
    fn uncertainty_log_sigma_gradient_matches_difference() {
        let l = [0.2f64, 0.3, 0.5];
        let unc = LossConfig { variant: LossVariant::UncertaintyWeighted, ..LossConfig::default() };
        let s = [0.1, -0.2, 0.3];
        let g = total_loss(&l, &unc, &s).dlog_sigma;
        for t in 0..3 {
            let mut up = s;
            up[t] += 1e-6;
            let mut dn = s;
            dn[t] -= 1e-6;
            let n = (total_loss(&l, &unc, &up).value - total_loss(&l, &unc, &dn).value) / 2e-6;
            assert!((n - g[t]).abs() < 1e-8);
        }
    }

    #[test]
    fn clip_examples() {
        let mut a = vec![0.3f64, 0.4];
        let mut b: Vec<f64> = vec![];
        let n = clip_grad_norm(&mut [&mut a, &mut b], 1.0).unwrap();
        assert_eq!((n, a.clone()), (0.5, vec![0.3, 0.4]));

        // norms 1.2 and 1.6 -> global 2.0
        let mut a = vec![1.2f64];
        let mut b = vec![0.0f64, 1.6];
        let n = clip_grad_norm(&mut [&mut a, &mut b], 1.0).unwrap();
        assert!((n - 2.0).abs() < 1e-15);
        assert_eq!(a, vec![0.6]);
        assert!((b[1] - 0.8).abs() < 1e-15);

        let mut z = vec![0.0f64; 3];
        assert_eq!(clip_grad_norm(&mut [&mut z], 1.0).unwrap(), 0.0);
        assert_eq!(z, vec![0.0; 3]);

        let mut bad = vec![f64::NAN];
        assert!(matches!(clip_grad_norm(&mut [&mut bad], 1.0), Err(TrainError::NonFiniteGradient)));
    }

    #[test]
    fn adamw_examples() {
        let cfg = OptimConfig::default();
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut theta, &[0.0], &mut m, &mut v, 1e-4, 1, &cfg, true);
        assert!((theta[0] - (1.0 - 1e-8)).abs() < 1e-16);

        let cfg0 = OptimConfig { weight_decay: 0.0, ..cfg.clone() };
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut theta, &[0.5], &mut m, &mut v, 1e-2, 1, &cfg0, true);
        let expected = 1.0 - 1e-2 * 0.5 / (0.5 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
        assert!((theta[0] - 0.99).abs() < 1e-9);

        // decay skipped when disabled
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut theta, &[0.0], &mut m, &mut v, 1e-4, 1, &cfg, false);
        assert_eq!(theta[0], 1.0);
    }

    #[test]
    fn cosine_examples() {
        let cfg = OptimConfig::default();
        assert_eq!(cosine_lr(0, &cfg), 1e-4);
        assert!(cosine_lr(50, &cfg).abs() < 1e-20);
        assert!((cosine_lr(25, &cfg) - 5e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(70, &cfg), cosine_lr(50, &cfg));
        for e in 0..50 {
            assert!(cosine_lr(e + 1, &cfg) <= cosine_lr(e, &cfg));
        }
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(8);
        let seq = [0.60, 0.61, 0.61, 0.5, 0.6, 0.61, 0.55, 0.3, 0.4, 0.61, 0.9];
        let mut stopped = None;
        for (i, &v) in seq.iter().enumerate() {
            if s.update(i + 1, Some(v)) == StopDecision::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(10));
        assert_eq!(s.best_epoch, Some(2));

        let mut s = EarlyStopping::new(2);
        assert_eq!(s.update(1, None), StopDecision::NoImprovement);
        assert_eq!(s.update(2, Some(0.5)), StopDecision::Improved);
        assert_eq!(s.update(3, Some(0.7)), StopDecision::Improved);
        assert_eq!(s.update(4, Some(0.7)), StopDecision::NoImprovement);
    }

    #[test]
    fn batches_never_end_with_a_single_sample() {
        assert_eq!(batch_ranges(10, 3), vec![0..3, 3..6, 6..10]);
        assert_eq!(batch_ranges(9, 3), vec![0..3, 3..6, 6..9]);
        assert_eq!(batch_ranges(2, 32), vec![0..2]);
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            epochs: vec![EpochRecord { epoch: 1, loss: [0.5, 0.25, 1.0], auc: [Some(0.5), None, Some(0.75)], mean_auc: Some(0.625), lr: 1e-4 }],
            best_epoch: Some(1),
        };
        assert_eq!(log.to_csv(), format!("{TRAIN_LOG_HEADER}\n1,0.5,0.25,1,0.5,,0.75,0.625,0.0001\n"));
        assert_eq!(log.best_mean_auc(), Some(0.625));
        assert_eq!(mean_auc(&[None, None]), None);
    }

    proptest! {
        #[test]
        fn bce_gradient_matches_difference(
            z in prop::collection::vec(-4.0f64..4.0, 1..8),
            y in prop::collection::vec(prop::option::of(any::<bool>()), 8),
            wn in 0.2f64..3.0,
            wp in 0.2f64..3.0,
        ) {
            let w = ClassWeightPair { negative: wn, positive: wp, missing_class: false };
            let y = &y[..z.len()];
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let p: Vec<f64> = z.iter().map(|&v| sig(v)).collect();
            let out = weighted_bce(&p, y, &w);
            for i in 0..z.len() {
                let h = 1e-6;
                let at = |d: f64| {
                    let mut pz = p.clone();
                    pz[i] = sig(z[i] + d);
                    weighted_bce(&pz, y, &w).loss
                };
                let n = (at(h) - at(-h)) / (2.0 * h);
                let a = out.dlogits[i];
                prop_assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-6), "{} vs {}", a, n);
            }
        }

        #[test]
        fn missing_samples_change_nothing(
            p in prop::collection::vec(0.01f64..0.99, 1..8),
            extra in prop::collection::vec(0.01f64..0.99, 0..5),
        ) {
            let y: Vec<Option<bool>> = (0..p.len()).map(|i| Some(i % 2 == 0)).collect();
            let base = weighted_bce(&p, &y, &UNIT);
            let mut p2 = p.clone();
            p2.extend(&extra);
            let mut y2 = y.clone();
            y2.extend(extra.iter().map(|_| None));
            let more = weighted_bce(&p2, &y2, &UNIT);
            prop_assert_eq!(base.loss, more.loss);
            prop_assert_eq!(&base.dlogits[..], &more.dlogits[..p.len()]);
            prop_assert!(more.dlogits[p.len()..].iter().all(|&g| g == 0.0));
        }

        #[test]
        fn clipped_norm_is_bounded_and_aligned(g in prop::collection::vec(-10.0f64..10.0, 1..20), max in 0.1f64..5.0) {
            let orig = g.clone();
            let mut c = g;
            let before = clip_grad_norm(&mut [&mut c], max).unwrap();
            let after = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(after <= max + 1e-12);
            if before > 0.0 {
                let dot: f64 = orig.iter().zip(&c).map(|(a, b)| a * b).sum();
                prop_assert!((dot / (before * after) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn lambda_sum_is_linear(l in prop::array::uniform3(0.0f64..3.0), lam in prop::array::uniform3(0.0f64..3.0), k in 0.0f64..4.0) {
            let cfg = LossConfig { task_weights: lam, ..LossConfig::default() };
            let scaled = LossConfig { task_weights: lam.map(|x| x * k), ..LossConfig::default() };
            let a = total_loss(&l, &cfg, &[0.0; 3]).value;
            let b = total_loss(&l, &scaled, &[0.0; 3]).value;
            prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
