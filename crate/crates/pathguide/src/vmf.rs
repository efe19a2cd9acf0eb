//! Von Mises-Fisher lobes and mixtures: density, sampling, closed-form
//! products, and derivatives with respect to the raw (pre-activation)
//! parameterization produced by the decoder network.
//!
//! A single lobe is `v(ω | μ, κ) = κ / (4π sinh κ) · exp(κ μᵀω)`. All
//! evaluations use the overflow-safe form
//! `κ · exp(κ(μᵀω − 1)) / (2π (1 − exp(−2κ)))`, which is identical
//! analytically but never exponentiates a positive argument.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{uniform_sphere, vec3, Onb, Vec3, FRAC_1_4PI};

/// Below this concentration a lobe is treated as the uniform sphere.
pub const KAPPA_UNIFORM: f64 = 1e-5;
/// Concentration ceiling applied after activation.
pub const KAPPA_MAX: f64 = 1e5;
/// Densities are floored at this value before any log or division.
pub const PDF_FLOOR: f64 = 1e-30;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error, PartialEq)]
pub enum VmfError {
    #[error("mean direction is not unit length (|mu| = {0})")]
    NonUnitMu(f64),
    #[error("concentration must be finite and non-negative, got {0}")]
    BadKappa(f64),
    #[error("mixture weights must sum to 1, got {0}")]
    BadWeightSum(f64),
    #[error("mixture must have at least one lobe")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmfLobe {
    pub mu: Vec3,
    pub kappa: f64,
}

impl VmfLobe {
    pub fn new(mu: Vec3, kappa: f64) -> Result<VmfLobe, VmfError> {
        if !mu.is_unit(1e-6) {
            return Err(VmfError::NonUnitMu(mu.length()));
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(VmfError::BadKappa(kappa));
        }
        Ok(VmfLobe { mu, kappa })
    }

    pub fn uniform() -> VmfLobe {
        VmfLobe {
            mu: vec3(0.0, 0.0, 1.0),
            kappa: 0.0,
        }
    }

    /// log of the normalization constant C(κ) = κ / (2π (1 − e^{−2κ})).
    pub fn log_norm(&self) -> f64 {
        log_norm_for(self.kappa)
    }
}

fn log_norm_for(kappa: f64) -> f64 {
    if kappa < KAPPA_UNIFORM {
        FRAC_1_4PI.ln()
    } else {
        kappa.ln() - (TWO_PI * (1.0 - (-2.0 * kappa).exp())).ln()
    }
}

/// Density of a single vMF lobe at a unit direction.
pub fn vmf_pdf(omega: Vec3, lobe: &VmfLobe) -> f64 {
    debug_assert!(omega.is_unit(1e-4));
    if lobe.kappa < KAPPA_UNIFORM {
        return FRAC_1_4PI;
    }
    let t = lobe.mu.dot(omega).clamp(-1.0, 1.0);
    let norm = lobe.kappa / (TWO_PI * (1.0 - (-2.0 * lobe.kappa).exp()));
    norm * (lobe.kappa * (t - 1.0)).exp()
}

/// Draw a direction from a vMF lobe using the numerically stable inversion
/// `w = 1 + log(u₁ + (1 − u₁) e^{−2κ}) / κ` for the cosine around μ.
pub fn vmf_sample(lobe: &VmfLobe, u1: f64, u2: f64) -> Vec3 {
    if lobe.kappa < KAPPA_UNIFORM {
        return uniform_sphere(u1, u2);
    }
    let w = 1.0 + (u1 + (1.0 - u1) * (-2.0 * lobe.kappa).exp()).ln() / lobe.kappa;
    let w = w.clamp(-1.0, 1.0);
    let r = (1.0 - w * w).max(0.0).sqrt();
    let phi = TWO_PI * u2;
    let local = vec3(r * phi.cos(), r * phi.sin(), w);
    Onb::from_normal(lobe.mu).to_world(local)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfMixture {
    pub lobes: Vec<VmfLobe>,
    pub weights: Vec<f64>,
}

impl VmfMixture {
    pub fn new(lobes: Vec<VmfLobe>, weights: Vec<f64>) -> Result<VmfMixture, VmfError> {
        if lobes.is_empty() || lobes.len() != weights.len() {
            return Err(VmfError::Empty);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|w| *w < 0.0) {
            return Err(VmfError::BadWeightSum(sum));
        }
        Ok(VmfMixture { lobes, weights })
    }

    pub fn uniform(k: usize) -> VmfMixture {
        VmfMixture {
            lobes: vec![VmfLobe::uniform(); k],
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn lobe_count(&self) -> usize {
        self.lobes.len()
    }

    /// Renormalizes the mixture after multiplying each lobe by a per-lobe
    /// scale in log space (used for closed-form products).
    fn reweight_log(&mut self, log_scales: &[f64]) {
        let max = log_scales.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (w, ls) in self.weights.iter_mut().zip(log_scales) {
            *w *= (ls - max).exp();
            sum += *w;
        }
        for w in &mut self.weights {
            *w /= sum;
        }
    }

    /// Pointwise product of this mixture with a single lobe, renormalized
    /// back to a valid mixture.
    pub fn product_with_lobe(&self, lobe: &VmfLobe) -> VmfMixture {
        let mut out = self.clone();
        let mut log_scales = Vec::with_capacity(self.lobes.len());
        for l in &mut out.lobes {
            let (p, log_scale) = vmf_product(l, lobe);
            *l = p;
            log_scales.push(log_scale);
        }
        out.reweight_log(&log_scales);
        out
    }
}

/// Mixture density `V(ω) = Σᵢ λᵢ v(ω | μᵢ, κᵢ)`.
pub fn mixture_pdf(omega: Vec3, mix: &VmfMixture) -> f64 {
    let mut pdf = 0.0;
    for (lobe, w) in mix.lobes.iter().zip(&mix.weights) {
        pdf += w * vmf_pdf(omega, lobe);
    }
    pdf
}

/// Samples a lobe by the weight CDF with u₁ and the selected lobe with
/// (u₂, u₃). The returned pdf is the full mixture density at ω.
pub fn mixture_sample(mix: &VmfMixture, u1: f64, u2: f64, u3: f64) -> (Vec3, f64) {
    let mut acc = 0.0;
    let mut idx = mix.lobes.len() - 1;
    for (i, w) in mix.weights.iter().enumerate() {
        acc += w;
        if u1 < acc {
            idx = i;
            break;
        }
    }
    let omega = vmf_sample(&mix.lobes[idx], u2, u3);
    let pdf = mixture_pdf(omega, mix);
    (omega, pdf)
}

/// Raw (pre-activation) mixture parameters as emitted by the decoder.
///
/// Layout for K lobes: `[λ'₀..λ'ₖ | κ'₀..κ'ₖ | θ'₀..θ'ₖ | φ'₀..φ'ₖ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMixtureParams(pub Vec<f64>);

impl RawMixtureParams {
    pub fn zeros(k: usize) -> RawMixtureParams {
        RawMixtureParams(vec![0.0; 4 * k])
    }

    pub fn lobe_count(&self) -> usize {
        self.0.len() / 4
    }
}

pub fn raw_param_len(k: usize) -> usize {
    4 * k
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// μ from normalized spherical coordinates (θ, φ) ∈ [0,1]².
fn mu_from_angles(theta: f64, phi: f64) -> Vec3 {
    let pt = std::f64::consts::PI * theta;
    let tp = TWO_PI * phi;
    vec3(pt.sin() * tp.cos(), pt.sin() * tp.sin(), pt.cos())
}

/// Maps raw network outputs to a valid mixture: softmax over λ',
/// exponential for κ (clamped to [KAPPA_UNIFORM, KAPPA_MAX]), logistic
/// spherical coordinates for μ.
pub fn activate_params(raw: &[f64]) -> VmfMixture {
    let k = raw.len() / 4;
    debug_assert_eq!(raw.len(), 4 * k);
    let (lambda_raw, rest) = raw.split_at(k);
    let (kappa_raw, rest) = rest.split_at(k);
    let (theta_raw, phi_raw) = rest.split_at(k);

    let max_l = lambda_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = lambda_raw.iter().map(|l| (l - max_l).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }

    let lobes = (0..k)
        .map(|i| {
            let kappa = kappa_raw[i].exp().clamp(KAPPA_UNIFORM, KAPPA_MAX);
            let mu = mu_from_angles(logistic(theta_raw[i]), logistic(phi_raw[i]));
            VmfLobe { mu, kappa }
        })
        .collect();
    VmfMixture { lobes, weights }
}

/// Gradient with respect to the activated parameters (λ, κ, μ), with μ
/// treated as a free 3-vector; `activate_backward` chains it through the
/// spherical-coordinate construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub d_weight: Vec<f64>,
    pub d_kappa: Vec<f64>,
    pub d_mu: Vec<Vec3>,
}

impl MixtureGrad {
    pub fn zeros(k: usize) -> MixtureGrad {
        MixtureGrad {
            d_weight: vec![0.0; k],
            d_kappa: vec![0.0; k],
            d_mu: vec![Vec3::ZERO; k],
        }
    }
}

/// Exact Jacobian-vector product of `activate_params`; writes the raw
/// parameter gradient into `out` (same layout as the raw vector).
pub fn activate_backward(raw: &[f64], grad: &MixtureGrad, out: &mut [f64]) {
    let k = raw.len() / 4;
    debug_assert_eq!(out.len(), raw.len());
    let (lambda_raw, rest) = raw.split_at(k);
    let (kappa_raw, rest) = rest.split_at(k);
    let (theta_raw, phi_raw) = rest.split_at(k);

    // Softmax backward: dλ'ᵢ = λᵢ (dλᵢ − Σⱼ λⱼ dλⱼ).
    let max_l = lambda_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lambda: Vec<f64> = lambda_raw.iter().map(|l| (l - max_l).exp()).collect();
    let sum: f64 = lambda.iter().sum();
    for l in &mut lambda {
        *l /= sum;
    }
    let inner: f64 = lambda
        .iter()
        .zip(&grad.d_weight)
        .map(|(l, d)| l * d)
        .sum();
    for i in 0..k {
        out[i] = lambda[i] * (grad.d_weight[i] - inner);
    }

    for i in 0..k {
        // Exponential: κ = exp(κ'); zero when the clamp is active.
        let kappa = kappa_raw[i].exp();
        out[k + i] = if (KAPPA_UNIFORM..=KAPPA_MAX).contains(&kappa) {
            grad.d_kappa[i] * kappa
        } else {
            0.0
        };

        // μ(θ, φ) chain followed by the logistic.
        let theta = logistic(theta_raw[i]);
        let phi = logistic(phi_raw[i]);
        let pt = std::f64::consts::PI * theta;
        let tp = TWO_PI * phi;
        let (sin_t, cos_t) = pt.sin_cos();
        let (sin_p, cos_p) = tp.sin_cos();
        let dmu_dtheta = vec3(cos_t * cos_p, cos_t * sin_p, -sin_t) * std::f64::consts::PI;
        let dmu_dphi = vec3(-sin_t * sin_p, sin_t * cos_p, 0.0) * TWO_PI;
        let d_theta = grad.d_mu[i].dot(dmu_dtheta);
        let d_phi = grad.d_mu[i].dot(dmu_dphi);
        out[2 * k + i] = d_theta * theta * (1.0 - theta);
        out[3 * k + i] = d_phi * phi * (1.0 - phi);
    }
}

/// log V(ω | Θ) and ∂log V / ∂(raw params) in one pass.
///
/// The gradient is assembled in activated space and chained through
/// `activate_backward`; V is floored at `PDF_FLOOR` before the log.
pub fn mixture_logpdf_grad(omega: Vec3, raw: &[f64], grad_out: &mut [f64]) -> f64 {
    let k = raw.len() / 4;
    let mix = activate_params(raw);

    let mut component = vec![0.0; k];
    let mut v = 0.0;
    for i in 0..k {
        component[i] = vmf_pdf(omega, &mix.lobes[i]);
        v += mix.weights[i] * component[i];
    }
    let v = v.max(PDF_FLOOR);

    let mut act = MixtureGrad::zeros(k);
    for i in 0..k {
        let lobe = &mix.lobes[i];
        act.d_weight[i] = component[i] / v;
        if lobe.kappa >= KAPPA_UNIFORM {
            let t = lobe.mu.dot(omega).clamp(-1.0, 1.0);
            let e = (-2.0 * lobe.kappa).exp();
            // d log v / dκ = 1/κ + (t − 1) − 2 e^{−2κ} / (1 − e^{−2κ})
            let dlogv_dkappa = 1.0 / lobe.kappa + (t - 1.0) - 2.0 * e / (1.0 - e);
            let coef = mix.weights[i] * component[i] / v;
            act.d_kappa[i] = coef * dlogv_dkappa;
            act.d_mu[i] = omega * (coef * lobe.kappa);
        }
    }
    activate_backward(raw, &act, grad_out);
    v.ln()
}

/// Closed-form product of two vMF densities: an unnormalized vMF with
/// `κ_p μ_p = κ_a μ_a + κ_b μ_b`. Returns the normalized lobe and the log
/// of the scalar factor such that
/// `exp(log_scale) · v(ω | product) = v(ω | a) · v(ω | b)`.
pub fn vmf_product(a: &VmfLobe, b: &VmfLobe) -> (VmfLobe, f64) {
    let combined = a.mu * a.kappa + b.mu * b.kappa;
    let kappa_p = combined.length();
    let lobe = if kappa_p < KAPPA_UNIFORM {
        VmfLobe::uniform()
    } else {
        VmfLobe {
            mu: combined / kappa_p,
            kappa: kappa_p,
        }
    };
    let log_scale =
        log_norm_for(a.kappa) + log_norm_for(b.kappa) - a.kappa - b.kappa + kappa_p
            - log_norm_for(lobe.kappa);
    (lobe, log_scale)
}
