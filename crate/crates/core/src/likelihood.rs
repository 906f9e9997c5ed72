//! Observation model: probabilities of rounded, possibly censored assay
//! readings given the latent true MIC and DIA.
//!
//! The MIC assay reports `ceil(m + ε)` and the DIA assay `round(d + δ)`, with
//! Normal measurement errors of known SD.

use crate::curves::CurveModel;
use crate::data::{AssayDataset, Censor, Isolate};
use crate::normal::{ln_interval, LOG_PROB_FLOOR};
use crate::{Error, Result};

/// ln P(observed MIC = x | true MIC m).
pub fn mic_obs_logprob(x: i32, m: f64, sigma_m: f64, censor: Censor) -> f64 {
    let upper = (x as f64 - m) / sigma_m;
    let lower = (x as f64 - 1.0 - m) / sigma_m;
    censored_interval(lower, upper, censor)
}

/// ln P(observed DIA = y | true DIA d).
pub fn dia_obs_logprob(y: i32, d: f64, sigma_d: f64, censor: Censor) -> f64 {
    let upper = (y as f64 + 0.5 - d) / sigma_d;
    let lower = (y as f64 - 0.5 - d) / sigma_d;
    censored_interval(lower, upper, censor)
}

#[inline]
fn censored_interval(lower: f64, upper: f64, censor: Censor) -> f64 {
    let lp = match censor {
        Censor::None => ln_interval(lower, upper),
        Censor::Left => ln_interval(f64::NEG_INFINITY, upper),
        Censor::Right => ln_interval(lower, f64::INFINITY),
    };
    if lp.is_nan() {
        lp
    } else {
        lp.max(LOG_PROB_FLOOR)
    }
}

/// Known assay error SDs plus the censoring switch, bundled for per-isolate
/// evaluation inside the sampler.
#[derive(Debug, Clone, Copy)]
pub struct ObservationModel {
    pub sigma_m: f64,
    pub sigma_d: f64,
    pub censoring: bool,
}

impl ObservationModel {
    pub fn new(data: &AssayDataset, censoring: bool) -> Self {
        Self { sigma_m: data.sigma_m(), sigma_d: data.sigma_d(), censoring }
    }

    #[inline]
    fn censor(&self, c: Censor) -> Censor {
        if self.censoring {
            c
        } else {
            Censor::None
        }
    }

    #[inline]
    pub fn mic_logprob(&self, iso: &Isolate, m: f64) -> f64 {
        mic_obs_logprob(iso.mic, m, self.sigma_m, self.censor(iso.mic_censor))
    }

    #[inline]
    pub fn dia_logprob(&self, iso: &Isolate, d: f64) -> f64 {
        dia_obs_logprob(iso.dia, d, self.sigma_d, self.censor(iso.dia_censor))
    }
}

/// Complete-data log-likelihood: one latent MIC per isolate, in the order of
/// [`AssayDataset::isolates`].
pub fn dataset_loglik(
    data: &AssayDataset,
    m: &[f64],
    curve: &CurveModel,
    censoring_enabled: bool,
) -> Result<f64> {
    let isolates = data.isolates();
    if isolates.len() != m.len() {
        return Err(Error::Contract(format!(
            "expected {} latent MICs, got {}",
            isolates.len(),
            m.len()
        )));
    }
    let obs = ObservationModel::new(data, censoring_enabled);
    Ok(isolates
        .iter()
        .zip(m)
        .map(|(iso, &mi)| obs.mic_logprob(iso, mi) + obs.dia_logprob(iso, curve.eval(mi)))
        .sum())
}
