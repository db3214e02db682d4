//! Evaluation metrics: plume-class IoU, classification accuracy, and
//! regression quality in original target units.

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_accuracy: Option<f64>,
    pub r2: f64,
    pub mae: f64,
    pub mse: f64,
}

fn binary_pixels<T: Scalar>(mask: &Tensor<T>, what: &str) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(mask.numel());
    for &v in mask.data() {
        let f = v.as_f64();
        if f == 0.0 {
            out.push(false);
        } else if f == 1.0 {
            out.push(true);
        } else {
            return Err(Error::contract(format!("{what} mask holds non-binary value {f}")));
        }
    }
    Ok(out)
}

/// Intersection over union for the positive class; 1.0 when both masks are
/// empty.
pub fn compute_iou<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "compute_iou",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let p = binary_pixels(pred, "predicted")?;
    let t = binary_pixels(truth, "true")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in p.iter().zip(&t) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of matching class predictions.
pub fn compute_accuracy(preds: &[usize], trues: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != trues.len() {
        return Err(Error::contract(format!(
            "accuracy needs equal nonzero lengths, got {} and {}",
            preds.len(),
            trues.len()
        )));
    }
    let hits = preds.iter().zip(trues).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// (r2, mae, mse). R² is undefined (an error) when the true values are all
/// identical.
pub fn compute_regression_metrics(preds: &[f64], trues: &[f64]) -> Result<(f64, f64, f64)> {
    if preds.len() != trues.len() || preds.len() < 2 {
        return Err(Error::contract(format!(
            "regression metrics need matching lengths of at least 2, got {} and {}",
            preds.len(),
            trues.len()
        )));
    }
    let n = trues.len() as f64;
    let mean = trues.iter().sum::<f64>() / n;
    let ss_tot: f64 = trues.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::contract(
            "R^2 is undefined: true values are all identical",
        ));
    }
    let mut ss_res = 0.0;
    let mut abs_sum = 0.0;
    for (p, t) in preds.iter().zip(trues) {
        let r = t - p;
        ss_res += r * r;
        abs_sum += r.abs();
    }
    Ok((1.0 - ss_res / ss_tot, abs_sum / n, ss_res / n))
}

/// Index of the largest value; first wins on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax over class logits [C, H, W] into a binary plume mask
/// (class 1 vs class 0 for two classes; any nonzero class counts as plume).
pub fn logits_to_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if logits.rank() != 3 {
        return Err(Error::contract("segmentation logits must be [C, H, W]"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = logits.data();
    let mut mask = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let mut best = 0usize;
        for cls in 1..c {
            if data[cls * h * w + px] > data[best * h * w + px] {
                best = cls;
            }
        }
        mask.push(if best == 0 { T::from_f64(0.0) } else { T::from_f64(1.0) });
    }
    Tensor::from_vec(vec![h, w], mask)
}

/// Run the frozen model over samples and aggregate metrics. Regression is
/// reported in original units via `norm`; IoU is averaged per sample.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    norm: &NormStats,
) -> Result<MetricsReport> {
    if samples.len() < 2 {
        return Err(Error::contract(format!(
            "evaluation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let pt = model.store().frozen();
    let mut preds = Vec::with_capacity(samples.len());
    let mut trues = Vec::with_capacity(samples.len());
    match model {
        Model::Co2(m) => {
            let mut iou_sum = 0.0;
            let mut fuel_preds = Vec::with_capacity(samples.len());
            let mut fuel_trues = Vec::with_capacity(samples.len());
            for s in samples {
                s.validate(Variant::Co2)?;
                let weather = s.weather.as_ref().expect("validated");
                let out = m.forward(&pt, &s.s2, weather)?;
                let pred_mask = logits_to_mask(&out.seg_logits)?;
                iou_sum += compute_iou(&pred_mask, s.mask.as_ref().expect("validated"))?;
                fuel_preds.push(argmax(out.fuel_logits.data()));
                fuel_trues.push(s.fuel_class);
                preds.push(norm.destandardize(out.power.data()[0].as_f64()));
                trues.push(s.target);
            }
            let (r2, mae, mse) = compute_regression_metrics(&preds, &trues)?;
            Ok(MetricsReport {
                n_samples: samples.len(),
                seg_iou: Some(iou_sum / samples.len() as f64),
                cls_accuracy: Some(compute_accuracy(&fuel_preds, &fuel_trues)?),
                r2,
                mae,
                mse,
            })
        }
        Model::No2(m) => {
            for s in samples {
                s.validate(Variant::No2)?;
                let s5p = s.s5p.as_ref().expect("validated");
                let out = m.forward(&pt, &s.s2, s5p)?;
                preds.push(norm.destandardize(out.concentration.data()[0].as_f64()));
                trues.push(s.target);
            }
            let (r2, mae, mse) = compute_regression_metrics(&preds, &trues)?;
            Ok(MetricsReport {
                n_samples: samples.len(),
                seg_iou: None,
                cls_accuracy: None,
                r2,
                mae,
                mse,
            })
        }
    }
}
