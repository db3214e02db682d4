//! Whole-model gradient verification: analytic gradients from one backward
//! pass against central finite differences of the training loss, probed at
//! seeded coordinates of every parameter tensor.
//!
//! Runs a reduced 64-bit configuration (16px images, 4px patches, width 32,
//! two blocks, two heads) so the probe count stays in the hundreds and the
//! whole check finishes in seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_co2_sample, generate_no2_sample, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::ParamTensors;
use crate::rng::{derive_seed, streams};
use crate::tensor::{backward, Tape, Tensor};
use crate::train::{composite_loss, mse_scalar, TrainConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
const COORDS_PER_PARAM: usize = 6;

/// Relative error denominators are floored so finite-difference noise on
/// near-zero gradients cannot dominate the ratio. Central differences at
/// this step size carry ~1e-10 absolute noise (f64 rounding of a loss of
/// order 1 divided by 2h); the floor turns the check on tiny gradients
/// into an absolute gate of TOLERANCE * REL_FLOOR = 1e-8, two orders above
/// that noise, while any corrupted backward rule still shifts gradients in
/// proportion to their magnitude and trips the gate.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub params_checked: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn sample_loss(
    model: &Model<f64>,
    pt: &ParamTensors<f64>,
    s: &Sample<f64>,
    tc: &TrainConfig,
) -> Result<Tensor<f64>> {
    match model {
        Model::Co2(m) => {
            let weather = s.weather.as_ref().expect("co2 sample carries weather");
            let mask = s.mask.as_ref().expect("co2 sample carries a mask");
            let out = m.forward(pt, &s.s2, weather)?;
            Ok(composite_loss(&out, mask, s.fuel_class, s.target, tc)?.0)
        }
        Model::No2(m) => {
            let s5p = s.s5p.as_ref().expect("no2 sample carries an s5p image");
            let out = m.forward(pt, &s.s2, s5p)?;
            mse_scalar(&out.concentration, s.target)
        }
    }
}

pub fn run_gradcheck(variant: Variant, seed: u64) -> Result<GradcheckReport> {
    let mut cfg = ModelConfig::tiny(variant);
    cfg.s2_bands = 12;
    let mut model = Model::<f64>::new(cfg.clone())?;
    model.init(derive_seed(seed, streams::INIT, 0));

    let sample_seed = derive_seed(seed, streams::SAMPLE, 0);
    let sample: Sample<f64> = match variant {
        Variant::Co2 => generate_co2_sample(&cfg, sample_seed)?.0,
        Variant::No2 => generate_no2_sample(&cfg, sample_seed)?.0,
    };
    let tc = TrainConfig::default();

    // one analytic backward pass over the full loss
    let tape = Tape::new();
    let tracked = model.store().tracked(&tape);
    let loss = sample_loss(&model, &tracked, &sample, &tc)?;
    let grads = backward(&loss)?;
    let analytic: Vec<(crate::params::ParamId, String, Vec<f64>)> = model
        .store()
        .iter()
        .map(|(id, entry)| {
            let g = grads.wrt(tracked.get(id)).ok_or_else(|| {
                Error::contract(format!(
                    "gradcheck: parameter \"{}\" received no gradient",
                    entry.name
                ))
            })?;
            Ok((id, entry.name.clone(), g.to_vec()))
        })
        .collect::<Result<_>>()?;
    drop(tracked);
    drop(tape);

    let mut report = GradcheckReport {
        variant,
        params_checked: analytic.len(),
        coords_checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (pi, (id, name, grad)) in analytic.iter().enumerate() {
        let numel = grad.len();
        let coords: Vec<usize> = if numel <= COORDS_PER_PARAM {
            (0..numel).collect()
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::GRADCHECK, pi as u64));
            rand::seq::index::sample(&mut rng, numel, COORDS_PER_PARAM).into_vec()
        };
        let original = model.store().get(*id).value.clone();
        for &coord in &coords {
            model.store_mut().nudge(*id, coord, FD_STEP);
            let f_plus = sample_loss(&model, &model.store().frozen(), &sample, &tc)?
                .item()?;
            model.store_mut().nudge(*id, coord, -2.0 * FD_STEP);
            let f_minus = sample_loss(&model, &model.store().frozen(), &sample, &tc)?
                .item()?;
            model.store_mut().set_value(*id, original.clone())?;

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = grad[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_coord = coord;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
