//! Losses, the Adam optimiser, the training loop and parameter interpolation
//! between trained networks.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::datagen::{SyntheticSequence, TRAIN_TIMES};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::psnr;
use crate::model::{forward, forward_graph, ModelParams, TimeStep};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Charbonnier,
    CharbonnierFeature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub epsilon: f64,
    pub feature_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Charbonnier,
            epsilon: 1e-6,
            feature_weight: 0.01,
        }
    }
}

/// Mean Charbonnier penalty between two equally shaped tensors.
pub fn charbonnier_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone())?;
    let t = g.input(gt.clone())?;
    let l = g.charbonnier(p, t, T::lit(eps))?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Frozen stack of four stride-2 3x3 convolutions with ReLU, standing in for
/// a pretrained perceptual network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> FeatureExtractor<T> {
    pub const WIDTHS: [usize; 4] = [8, 16, 16, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (9 * cin) as f64).sqrt();
                let w = Tensor::uniform([cout, cin, 3, 3], -bound, bound, &mut rng);
                cin = cout;
                (w, Tensor::zeros([1, 1, 1, cout]))
            })
            .collect();
        FeatureExtractor { layers }
    }

    pub fn features(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (w, b) in &self.layers {
            let w = g.input(w.clone())?;
            let b = g.input(b.clone())?;
            h = g.conv2d(h, w, b, 2, 1)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }

    /// Mean squared distance between the features of `pred` and `gt`.
    pub fn loss_node(&self, g: &mut Graph<T>, pred: NodeId, gt: NodeId) -> Result<NodeId> {
        let fp = self.features(g, pred)?;
        let fg = self.features(g, gt)?;
        g.mse(fp, fg)
    }
}

pub fn feature_loss<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone())?;
    let t = g.input(gt.clone())?;
    let l = extractor.loss_node(&mut g, p, t)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Records the configured training loss.
pub fn loss_node<T: Real>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    extractor: Option<&FeatureExtractor<T>>,
    pred: NodeId,
    gt: NodeId,
) -> Result<NodeId> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("loss epsilon must be positive".into()));
    }
    let c = g.charbonnier(pred, gt, T::lit(cfg.epsilon))?;
    match (cfg.kind, extractor) {
        (LossKind::Charbonnier, _) => Ok(c),
        (LossKind::CharbonnierFeature, Some(fx)) => {
            let f = fx.loss_node(g, pred, gt)?;
            let f = g.scale(f, T::lit(cfg.feature_weight))?;
            g.add(c, f)
        }
        (LossKind::CharbonnierFeature, None) => {
            Err(Error::Config("feature loss needs an extractor".into()))
        }
    }
}

/// Adam moments and hyperparameters for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows parameter order.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam",
                format!("gradient {} for {} {}", g.shape(), name, p.shape()),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", name)));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (state.lr, state.eps);
    for (i, ((_, p), g)) in params.tensors_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let upd = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = T::lit(w.as_f64() - upd);
        }
    }
    Ok(())
}

/// One input pair with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame1: Frame,
    pub frame2: Frame,
    pub target: Frame,
    pub t: f64,
}

impl Sample {
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Sample {
        let f = |x: &Frame| {
            let x = if horizontal { x.flip_horizontal() } else { x.clone() };
            if vertical {
                x.flip_vertical()
            } else {
                x
            }
        };
        Sample {
            frame1: f(&self.frame1),
            frame2: f(&self.frame2),
            target: f(&self.target),
            t: self.t,
        }
    }

    /// The same `size x size` window of all three frames.
    pub fn cropped(&self, x: usize, y: usize, size: usize) -> Result<Sample> {
        Ok(Sample {
            frame1: self.frame1.crop(x, y, size, size)?,
            frame2: self.frame2.crop(x, y, size, size)?,
            target: self.target.crop(x, y, size, size)?,
            t: self.t,
        })
    }
}

/// The sample of `seq` targeting time `t`, which must have been rendered.
pub fn sample_at(seq: &SyntheticSequence, t: f64) -> Result<Sample> {
    let target = seq
        .at(t)
        .ok_or_else(|| Error::invalid(format!("sequence has no frame at t={}", t)))?;
    Ok(Sample {
        frame1: seq.first().clone(),
        frame2: seq.last().clone(),
        target: target.clone(),
        t,
    })
}

/// Plain average of the inputs.
pub fn overlay(a: &Frame, b: &Frame) -> Frame {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Frame::from_planes(a.width(), a.height(), data).expect("same size")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate halves after every this many epochs; 0 disables.
    pub halve_every: usize,
    pub batch: usize,
    pub loss: LossConfig,
    pub flip: bool,
    /// Side of a random square training crop; `None` trains on whole frames.
    pub crop: Option<usize>,
    pub seed: u64,
    /// Targets for multi-time models; single-time models always use 0.5.
    pub times: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 1e-3,
            halve_every: 20,
            batch: 4,
            loss: LossConfig::default(),
            flip: true,
            crop: None,
            seed: 0,
            times: TRAIN_TIMES.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = if self.halve_every == 0 { 0 } else { epoch / self.halve_every };
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
    /// How many batches used each entry of the configured times.
    pub t_counts: Vec<usize>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {:e}, {:.6}, {:.4}",
            self.epoch, self.lr, self.train_loss, self.val_psnr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ModelParams<T>,
    pub log: Vec<EpochLog>,
    pub diverged: Option<String>,
}

/// Mean PSNR of the clamped predictions.
pub fn evaluate_psnr<T: Real>(params: &ModelParams<T>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        let pred = predict(params, &s.frame1, &s.frame2, s.t)?;
        total += psnr(&pred.clamped(), &s.target, 1.0)?;
    }
    Ok(total / samples.len() as f64)
}

/// Runs the model on one pair, passing `t` only to multi-time models.
pub fn predict<T: Real>(params: &ModelParams<T>, i1: &Frame, i2: &Frame, t: f64) -> Result<Frame> {
    let ts = if params.config().multi_time {
        Some(TimeStep::new(t)?)
    } else {
        None
    };
    let (out, _) = forward(params, &i1.to_tensor::<T>(), &i2.to_tensor::<T>(), ts)?;
    Frame::from_tensor(&out, 0)
}

fn batch_loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    batch: &[Sample],
    t: Option<TimeStep>,
    loss: &LossConfig,
    extractor: Option<&FeatureExtractor<T>>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = params.register(&mut g)?;
    let f1: Vec<&Frame> = batch.iter().map(|s| &s.frame1).collect();
    let f2: Vec<&Frame> = batch.iter().map(|s| &s.frame2).collect();
    let gt: Vec<&Frame> = batch.iter().map(|s| &s.target).collect();
    let i1 = g.input(Frame::batch(&f1)?)?;
    let i2 = g.input(Frame::batch(&f2)?)?;
    let target = g.input(Frame::batch(&gt)?)?;
    let out = forward_graph(&mut g, params.config(), &p, i1, i2, t)?;
    let l = loss_node(&mut g, loss, extractor, out.output, target)?;
    let value = g.value(l).data()[0].as_f64();
    let mut grads = g.backward(l)?;
    let grads = p
        .ids()
        .iter()
        .zip(params.iter())
        .map(|(&id, (_, t))| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Trains in place on `train`, validating on `val` after each epoch.
///
/// Every epoch visits each training sequence once in shuffled order. A
/// single-time model always targets the midpoint; a multi-time model gives
/// each batch one of `cfg.times`, cycling so an epoch with at least as many
/// batches as times covers all of them. `on_epoch` sees each log entry as it
/// is produced.
pub fn train<T: Real>(
    mut params: ModelParams<T>,
    train: &[SyntheticSequence],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(size) = cfg.crop {
        let m = params.config().resolution_multiple();
        if size == 0 || size % m != 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of {}", size, m)));
        }
    }
    let multi = params.config().multi_time;
    let times: Vec<f64> = if multi { cfg.times.clone() } else { vec![0.5] };
    if times.is_empty() {
        return Err(Error::Config("no training times".into()));
    }
    for &t in &times {
        TimeStep::new(t)?;
        if train.iter().any(|s| s.at(t).is_none()) {
            return Err(Error::invalid(format!("training sequences lack a frame at t={}", t)));
        }
    }
    let extractor = match cfg.loss.kind {
        LossKind::CharbonnierFeature => Some(FeatureExtractor::new(cfg.seed ^ 0xfea7)),
        LossKind::Charbonnier => None,
    };
    let mut state = OptimState::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut offset = 0usize;
    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut t_counts = vec![0; times.len()];
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let ti = offset % times.len();
            offset += 1;
            let t = times[ti];
            t_counts[ti] += 1;
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut s = sample_at(&train[i], t)?;
                if let Some(size) = cfg.crop {
                    let x = rng.gen_range(0..=s.frame1.width().saturating_sub(size));
                    let y = rng.gen_range(0..=s.frame1.height().saturating_sub(size));
                    s = s.cropped(x, y, size)?;
                }
                let (h, v) = if cfg.flip { (rng.gen_bool(0.5), rng.gen_bool(0.5)) } else { (false, false) };
                batch.push(s.flipped(h, v));
            }
            let ts = if multi { Some(TimeStep::new(t)?) } else { None };
            let step = batch_loss_and_grads(&params, &batch, ts, &cfg.loss, extractor.as_ref())
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("training loss".into()));
                    }
                    let mut next = params.clone();
                    adam_step(&mut next, &grads, &mut state)?;
                    for (name, t) in next.iter() {
                        t.ensure_finite(name)?;
                    }
                    Ok((loss, next))
                });
            match step {
                Ok((loss, next)) => {
                    params = next;
                    loss_sum += loss;
                    batches += 1;
                }
                Err(Error::NonFinite(what)) => {
                    return Ok(TrainOutcome {
                        params,
                        log,
                        diverged: Some(format!("epoch {}: non-finite {}", epoch, what)),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let entry = EpochLog {
            epoch,
            lr: state.lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_psnr: evaluate_psnr(&params, val)?,
            t_counts,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        log,
        diverged: None,
    })
}

/// Elementwise `(1 - alpha) a + alpha b`.
pub fn dni_interpolate<T: Real>(
    a: &ModelParams<T>,
    b: &ModelParams<T>,
    alpha: f64,
) -> Result<ModelParams<T>> {
    let mut ca = a.config().clone();
    ca.seed = b.config().seed;
    if &ca != b.config() || a.names() != b.names() {
        return Err(Error::Config("cannot interpolate different architectures".into()));
    }
    if !alpha.is_finite() {
        return Err(Error::invalid("interpolation coefficient must be finite"));
    }
    let w = T::lit(alpha);
    let v = T::lit(1.0 - alpha);
    let mut bi = b.iter();
    Ok(a.map_tensors(|_, ta| {
        let (_, tb) = bi.next().expect("same length");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| v * x + w * y).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }))
}

/// Evaluation samples at `t` from held-out sequences.
pub fn samples_at(seqs: &[SyntheticSequence], t: f64) -> Result<Vec<Sample>> {
    seqs.iter().map(|s| sample_at(s, t)).collect()
}
