//! Losses, the AdamW optimizer, the augmentation pipeline, and the
//! training loop.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Co2Output, Model, Variant};
use crate::params::{ParamStore, ParamTensors};
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;
use crate::tensor::{backward, Gradients, Tape, Tensor};

fn d_lr() -> f64 {
    3e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_label_smoothing() -> f64 {
    0.1
}
fn d_lambda() -> f64 {
    1.0
}
fn d_batch_size() -> usize {
    8
}
fn d_steps() -> u64 {
    0
}
fn d_seed() -> u64 {
    0
}
fn d_eval_every() -> u64 {
    50
}
fn d_augment() -> bool {
    true
}
fn d_crop_pad() -> usize {
    4
}
fn d_flip_prob() -> f64 {
    0.5
}
fn d_bc_range() -> [f64; 2] {
    [0.8, 1.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_lambda")]
    pub lambda_seg: f64,
    #[serde(default = "d_lambda")]
    pub lambda_cls: f64,
    #[serde(default = "d_lambda")]
    pub lambda_reg: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_augment")]
    pub augment: bool,
    #[serde(default = "d_crop_pad")]
    pub crop_pad: usize,
    #[serde(default = "d_flip_prob")]
    pub flip_prob: f64,
    #[serde(default = "d_bc_range")]
    pub brightness_range: [f64; 2],
    #[serde(default = "d_bc_range")]
    pub contrast_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        for (name, l) in [
            ("lambda_seg", self.lambda_seg),
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
        ] {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        for (name, r) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::config(format!("{name} must satisfy 0 < lo <= hi")));
            }
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy against logits [K]:
/// q_k = (1-eps)*[k == true_class] + eps/K, loss = -sum q_k log softmax_k.
pub fn smoothed_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    true_class: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    if logits.rank() != 1 || logits.shape()[0] < 2 {
        return Err(Error::contract(format!(
            "classification logits must be [K >= 2], got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[0];
    if true_class >= k {
        return Err(Error::contract(format!(
            "true class {true_class} out of range for {k} classes"
        )));
    }
    let q: Vec<T> = (0..k)
        .map(|i| {
            let on = if i == true_class { 1.0 - eps } else { 0.0 };
            T::from_f64(on + eps / k as f64)
        })
        .collect();
    let q = Tensor::from_vec(vec![k], q)?;
    let lp = logits.log_softmax(0)?;
    Ok(lp.mul(&q)?.sum_all().scale(-1.0))
}

/// Mean over pixels of per-pixel smoothed cross-entropy. `mask` holds
/// integer class indices stored as floats.
pub fn segmentation_loss<T: Scalar>(
    logits: &Tensor<T>,
    mask: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if logits.rank() != 3 {
        return Err(Error::contract(format!(
            "segmentation logits must be [C, H, W], got {:?}",
            logits.shape()
        )));
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if c < 2 {
        return Err(Error::contract("segmentation needs at least 2 classes"));
    }
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "segmentation_loss",
            lhs: logits.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let n = h * w;
    let uniform = eps / c as f64;
    let mut q = vec![T::from_f64(0.0); n * c];
    for (px, &m) in mask.data().iter().enumerate() {
        let mf = m.as_f64();
        let cls = mf as usize;
        if mf.fract() != 0.0 || mf < 0.0 || cls >= c {
            return Err(Error::contract(format!(
                "mask value {mf} at pixel {px} is not a class index below {c}"
            )));
        }
        for k in 0..c {
            let on = if k == cls { 1.0 - eps } else { 0.0 };
            q[px * c + k] = T::from_f64(on + uniform);
        }
    }
    let q = Tensor::from_vec(vec![n, c], q)?;
    let lp = logits.reshape(&[c, n])?.transpose()?.log_softmax(1)?;
    Ok(lp.mul(&q)?.sum_all().scale(-1.0 / n as f64))
}

/// Squared error of a rank-0 prediction against a constant target.
pub fn mse_scalar<T: Scalar>(pred: &Tensor<T>, target: f64) -> Result<Tensor<T>> {
    if !pred.shape().is_empty() {
        return Err(Error::contract(format!(
            "regression output must be rank 0, got {:?}",
            pred.shape()
        )));
    }
    let diff = pred.sub(&Tensor::scalar(T::from_f64(target)))?;
    diff.mul(&diff)
}

/// Unweighted per-task loss values for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompositeBreakdown {
    pub seg: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Weighted multitask objective for the CO2 variant. Tasks with zero weight
/// are left out of the sum entirely.
pub fn composite_loss<T: Scalar>(
    out: &Co2Output<T>,
    mask: &Tensor<T>,
    fuel_class: usize,
    std_target: f64,
    cfg: &TrainConfig,
) -> Result<(Tensor<T>, CompositeBreakdown)> {
    let l_seg = segmentation_loss(&out.seg_logits, mask, cfg.label_smoothing)?;
    let l_cls = smoothed_cross_entropy(&out.fuel_logits, fuel_class, cfg.label_smoothing)?;
    let l_reg = mse_scalar(&out.power, std_target)?;
    let breakdown = CompositeBreakdown {
        seg: l_seg.item()?.as_f64(),
        cls: l_cls.item()?.as_f64(),
        reg: l_reg.item()?.as_f64(),
    };
    let mut total: Option<Tensor<T>> = None;
    for (weight, term) in [
        (cfg.lambda_seg, l_seg),
        (cfg.lambda_cls, l_cls),
        (cfg.lambda_reg, l_reg),
    ] {
        if weight == 0.0 {
            continue;
        }
        let scaled = term.scale(weight);
        total = Some(match total {
            None => scaled,
            Some(t) => t.add(&scaled)?,
        });
    }
    Ok((
        total.unwrap_or_else(|| Tensor::scalar(T::from_f64(0.0))),
        breakdown,
    ))
}

/// One AdamW update over every parameter. Weight decay is decoupled: the
/// parameter is scaled by (1 - lr*wd) before the moment-based update is
/// subtracted, never folded into the gradient.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    pt: &ParamTensors<T>,
    grads: &Gradients<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let t = store.step_count() + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.wrt(pt.get(id)).ok_or_else(|| {
            Error::contract(format!(
                "adamw: no gradient materialized for parameter \"{}\"",
                store.get(id).name
            ))
        })?;
        let entry = store.get(id);
        let shape = entry.value.shape().to_vec();
        let n = entry.value.numel();
        let mut theta = Vec::with_capacity(n);
        let mut ms = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        let g = g.data();
        let value = entry.value.data();
        let m0 = entry.m.data();
        let v0 = entry.v.data();
        for i in 0..n {
            let gi = g[i].as_f64();
            let m = cfg.beta1 * m0[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let v = cfg.beta2 * v0[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            theta.push(T::from_f64(value[i].as_f64() * decay - update));
            ms.push(T::from_f64(m));
            vs.push(T::from_f64(v));
        }
        store.set_value(id, Tensor::from_vec(shape.clone(), theta)?)?;
        store.set_optimizer_state(
            id,
            Tensor::from_vec(shape.clone(), ms)?,
            Tensor::from_vec(shape, vs)?,
        )?;
    }
    store.set_step_count(t);
    Ok(())
}

/// The per-sample augmentation decisions, drawn once and applied jointly to
/// every image and the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraws {
    /// Crop offset into the reflect-padded image, [0, 2*pad].
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraws {
    /// Draws that leave the sample bitwise unchanged.
    pub fn identity(pad: usize) -> Self {
        AugmentDraws {
            dy: pad,
            dx: pad,
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Self {
        AugmentDraws {
            dy: rng.random_range(0..=2 * cfg.crop_pad),
            dx: rng.random_range(0..=2 * cfg.crop_pad),
            flip: rng.random_bool(cfg.flip_prob),
            brightness: rng.random_range(cfg.brightness_range[0]..=cfg.brightness_range[1]),
            contrast: rng.random_range(cfg.contrast_range[0]..=cfg.contrast_range[1]),
        }
    }
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!((0..n).contains(&i));
    i as usize
}

/// Gather the spatial transform (reflect-pad crop + optional flip) for one
/// [bands, H, W] tensor. Pure index remapping, no arithmetic on values.
fn spatial_transform<T: Scalar>(t: &Tensor<T>, d: &AugmentDraws, pad: usize) -> Tensor<T> {
    let (bands, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..bands {
        let base = b * h * w;
        for y in 0..h {
            let sy = reflect(y as isize + d.dy as isize - pad as isize, h);
            for x in 0..w {
                let fx = if d.flip { w - 1 - x } else { x };
                let sx = reflect(fx as isize + d.dx as isize - pad as isize, w);
                out.push(src[base + sy * w + sx]);
            }
        }
    }
    Tensor::from_data(t.shape().to_vec(), out)
}

/// Brightness/contrast around the band mean: pixel <- (pixel - mean)*c + mean*b.
fn adjust_bands<T: Scalar>(t: &Tensor<T>, brightness: f64, contrast: f64) -> Tensor<T> {
    let (bands, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..bands {
        let band = &src[b * h * w..(b + 1) * h * w];
        let mean = band.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
        for v in band {
            out.push(T::from_f64((v.as_f64() - mean) * contrast + mean * brightness));
        }
    }
    Tensor::from_data(t.shape().to_vec(), out)
}

/// Apply fixed augmentation decisions. Images and mask share the spatial
/// map; brightness/contrast touch image bands only; labels pass through.
pub fn augment_with<T: Scalar>(s: &Sample<T>, d: &AugmentDraws, pad: usize) -> Sample<T> {
    let photometric = d.brightness != 1.0 || d.contrast != 1.0;
    let image = |t: &Tensor<T>| {
        let moved = spatial_transform(t, d, pad);
        if photometric {
            adjust_bands(&moved, d.brightness, d.contrast)
        } else {
            moved
        }
    };
    let mask = s.mask.as_ref().map(|m| {
        let as3d = m.reshape(&[1, m.shape()[0], m.shape()[1]]).expect("mask rank 2");
        let moved = spatial_transform(&as3d, d, pad);
        moved
            .reshape(&[m.shape()[0], m.shape()[1]])
            .expect("shape preserved")
            .detach()
    });
    Sample {
        s2: image(&s.s2),
        weather: s.weather.clone(),
        s5p: s.s5p.as_ref().map(&image),
        mask,
        fuel_class: s.fuel_class,
        target: s.target,
    }
}

/// Draw augmentation decisions from `rng` and apply them.
pub fn augment<T: Scalar>(s: &Sample<T>, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Sample<T> {
    augment_with(s, &AugmentDraws::sample(rng, cfg), cfg.crop_pad)
}

/// One training-history record; written as a JSON line per logged step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_seg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
    /// Running best eval R2 seen so far in this run ("top" score).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_r2: Option<f64>,
}

/// Parameter snapshot at the best evaluation seen during a run, selected by
/// segmentation IoU for CO2 and by R2 for NO2.
pub struct BestSnapshot<T: Scalar> {
    pub step: u64,
    pub score: f64,
    pub report: MetricsReport,
    pub store: ParamStore<T>,
}

pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<StepRecord>,
    pub best: Option<BestSnapshot<T>>,
}

/// Run `cfg.steps` optimization steps. Batches follow a seeded epoch
/// shuffle; augmentation draws derive from the global step number, so a
/// resumed run replays exactly the schedule of an uninterrupted one.
/// `on_record` sees every history record as it is produced.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.variant() != ds.variant {
        return Err(Error::contract(format!(
            "model variant {} does not match dataset variant {}",
            model.variant(),
            ds.variant
        )));
    }
    let mut history = Vec::new();
    let mut best: Option<BestSnapshot<T>> = None;
    let mut best_r2: Option<f64> = None;
    if cfg.steps == 0 {
        return Ok(TrainOutcome { history, best });
    }
    let n_train = ds.train_count();
    if n_train == 0 {
        return Err(Error::contract("training needs a nonempty train split"));
    }

    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();

    for _ in 0..cfg.steps {
        let step = model.store().step_count() + 1;
        let mut aug_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::STEP, step));

        let tape = Tape::new();
        let pt = model.store().tracked(&tape);
        let mut batch_loss: Option<Tensor<T>> = None;
        let mut seg_sum = 0.0;
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;

        for j in 0..cfg.batch_size as u64 {
            let g = (step - 1) * cfg.batch_size as u64 + j;
            let epoch = g / n_train as u64;
            if epoch != perm_epoch {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::EPOCH, epoch));
                perm = (0..n_train).collect();
                for i in (1..n_train).rev() {
                    let k = rng.random_range(0..=i);
                    perm.swap(i, k);
                }
                perm_epoch = epoch;
            }
            let sample = &ds.samples[perm[(g % n_train as u64) as usize]];
            let owned;
            let s = if cfg.augment {
                owned = augment(sample, &mut aug_rng, cfg);
                &owned
            } else {
                sample
            };

            let std_target = ds.norm.standardize(s.target);
            let loss = match &*model {
                Model::Co2(m) => {
                    let weather = s.weather.as_ref().ok_or_else(|| {
                        Error::contract("co2 training sample lacks a weather vector")
                    })?;
                    let mask = s
                        .mask
                        .as_ref()
                        .ok_or_else(|| Error::contract("co2 training sample lacks a mask"))?;
                    let out = m.forward(&pt, &s.s2, weather)?;
                    let (loss, br) = composite_loss(&out, mask, s.fuel_class, std_target, cfg)?;
                    seg_sum += br.seg;
                    cls_sum += br.cls;
                    reg_sum += br.reg;
                    loss
                }
                Model::No2(m) => {
                    let s5p = s.s5p.as_ref().ok_or_else(|| {
                        Error::contract("no2 training sample lacks an s5p image")
                    })?;
                    let out = m.forward(&pt, &s.s2, s5p)?;
                    mse_scalar(&out.concentration, std_target)?
                }
            };
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => acc.add(&loss)?,
            });
        }

        let total = batch_loss.expect("batch_size >= 1").scale(1.0 / cfg.batch_size as f64);
        let loss_val = total.item()?.as_f64();
        if !loss_val.is_finite() {
            return Err(Error::numerical(format!(
                "training aborted at step {step}: loss is {loss_val}"
            )));
        }
        let grads = backward(&total)?;
        adamw_step(model.store_mut(), &pt, &grads, cfg)?;

        let b = cfg.batch_size as f64;
        let mut record = StepRecord {
            step,
            loss: loss_val,
            loss_seg: matches!(model, Model::Co2(_)).then_some(seg_sum / b),
            loss_cls: matches!(model, Model::Co2(_)).then_some(cls_sum / b),
            loss_reg: matches!(model, Model::Co2(_)).then_some(reg_sum / b),
            eval: None,
            best_r2,
        };

        if step % cfg.eval_every == 0 && ds.eval().len() >= 2 {
            let report = evaluate(model, ds.eval(), &ds.norm)?;
            best_r2 = Some(best_r2.map_or(report.r2, |b| b.max(report.r2)));
            let score = match model.variant() {
                Variant::Co2 => report.seg_iou.expect("co2 report carries iou"),
                Variant::No2 => report.r2,
            };
            if best.as_ref().map_or(true, |b| score > b.score) {
                best = Some(BestSnapshot {
                    step,
                    score,
                    report: report.clone(),
                    store: model.store().clone(),
                });
            }
            record.eval = Some(report);
            record.best_r2 = best_r2;
        }

        on_record(&record)?;
        history.push(record);
    }
    Ok(TrainOutcome { history, best })
}
