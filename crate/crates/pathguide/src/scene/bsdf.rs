//! Material models: Lambertian, GGX microfacet (half-vector sampling,
//! Smith masking), and smooth specular mirrors (delta).
//!
//! Conventions: `n` is the shading normal oriented so that `n·ω_o > 0`
//! (surfaces are two-sided); all directions point away from the surface.

use serde::{Deserialize, Serialize};

use crate::math::{vec3, Onb, Vec3};

/// Glossy roughness floor; keeps GGX pdfs finite.
pub const ROUGHNESS_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaterialKind {
    Lambertian,
    GgxGlossy { roughness: f64 },
    SmoothSpecular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    #[serde(flatten)]
    pub kind: MaterialKind,
    #[serde(default = "default_albedo")]
    pub albedo: Vec3,
    #[serde(default)]
    pub emission: Vec3,
}

fn default_albedo() -> Vec3 {
    vec3(0.5, 0.5, 0.5)
}

impl Material {
    pub fn is_emissive(&self) -> bool {
        self.emission.max_component() > 0.0
    }

    pub fn is_delta(&self) -> bool {
        matches!(self.kind, MaterialKind::SmoothSpecular)
    }

    /// Roughness fed to the guiding model as an auxiliary feature;
    /// 1 for diffuse, 0 for mirrors.
    pub fn guide_roughness(&self) -> f64 {
        match self.kind {
            MaterialKind::Lambertian => 1.0,
            MaterialKind::GgxGlossy { roughness } => roughness.max(ROUGHNESS_FLOOR),
            MaterialKind::SmoothSpecular => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BsdfSample {
    pub omega_i: Vec3,
    /// f_s for non-delta samples; the throughput weight (f·cos/pdf folded)
    /// for delta samples.
    pub f: Vec3,
    /// Solid-angle pdf; 1 in the discrete measure for delta samples.
    pub pdf: f64,
    pub delta: bool,
}

fn reflect(v: Vec3, n: Vec3) -> Vec3 {
    n * (2.0 * v.dot(n)) - v
}

fn ggx_alpha(roughness: f64) -> f64 {
    let r = roughness.max(ROUGHNESS_FLOOR);
    r * r
}

fn ggx_d(alpha: f64, cos_h: f64) -> f64 {
    if cos_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let d = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * d * d)
}

fn smith_g1(alpha: f64, cos_v: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * cos_v / (cos_v + (a2 + (1.0 - a2) * cos_v * cos_v).sqrt())
}

/// BSDF value f_s(ω_o, ω_i). Zero below the horizon and for deltas.
pub fn bsdf_eval(material: &Material, n: Vec3, omega_o: Vec3, omega_i: Vec3) -> Vec3 {
    let cos_o = n.dot(omega_o);
    let cos_i = n.dot(omega_i);
    if cos_o <= 0.0 || cos_i <= 0.0 {
        return Vec3::ZERO;
    }
    match material.kind {
        MaterialKind::Lambertian => material.albedo / std::f64::consts::PI,
        MaterialKind::GgxGlossy { roughness } => {
            let alpha = ggx_alpha(roughness);
            let h = (omega_o + omega_i).normalized();
            let d = ggx_d(alpha, n.dot(h));
            let g = smith_g1(alpha, cos_o) * smith_g1(alpha, cos_i);
            material.albedo * (d * g / (4.0 * cos_o * cos_i))
        }
        MaterialKind::SmoothSpecular => Vec3::ZERO,
    }
}

/// Solid-angle pdf of `bsdf_sample`. Zero below the horizon and for deltas.
pub fn bsdf_pdf(material: &Material, n: Vec3, omega_o: Vec3, omega_i: Vec3) -> f64 {
    let cos_o = n.dot(omega_o);
    let cos_i = n.dot(omega_i);
    if cos_o <= 0.0 || cos_i <= 0.0 {
        return 0.0;
    }
    match material.kind {
        MaterialKind::Lambertian => cos_i / std::f64::consts::PI,
        MaterialKind::GgxGlossy { roughness } => {
            let alpha = ggx_alpha(roughness);
            let h = (omega_o + omega_i).normalized();
            let cos_h = n.dot(h);
            let d = ggx_d(alpha, cos_h);
            // Half-vector sampling: p(ω_i) = D(h) cosθ_h / (4 ω_o·h)
            d * cos_h / (4.0 * omega_o.dot(h).max(1e-12))
        }
        MaterialKind::SmoothSpecular => 0.0,
    }
}

/// Importance-sample the BSDF. Returns `None` when the sampled direction
/// falls below the horizon (the path dies at this vertex).
pub fn bsdf_sample(
    material: &Material,
    n: Vec3,
    omega_o: Vec3,
    u1: f64,
    u2: f64,
) -> Option<BsdfSample> {
    let cos_o = n.dot(omega_o);
    if cos_o <= 0.0 {
        return None;
    }
    match material.kind {
        MaterialKind::Lambertian => {
            // Cosine-weighted hemisphere.
            let r = u1.sqrt();
            let phi = 2.0 * std::f64::consts::PI * u2;
            let local = vec3(r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt());
            let omega_i = Onb::from_normal(n).to_world(local);
            let pdf = local.z / std::f64::consts::PI;
            if pdf <= 0.0 {
                return None;
            }
            Some(BsdfSample {
                omega_i,
                f: material.albedo / std::f64::consts::PI,
                pdf,
                delta: false,
            })
        }
        MaterialKind::GgxGlossy { roughness } => {
            let alpha = ggx_alpha(roughness);
            let cos_h = ((1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1))
                .max(0.0)
                .sqrt();
            let sin_h = (1.0 - cos_h * cos_h).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * u2;
            let h = Onb::from_normal(n).to_world(vec3(sin_h * phi.cos(), sin_h * phi.sin(), cos_h));
            let omega_i = reflect(omega_o, h);
            if n.dot(omega_i) <= 0.0 {
                return None;
            }
            let pdf = bsdf_pdf(material, n, omega_o, omega_i);
            if pdf <= 0.0 {
                return None;
            }
            Some(BsdfSample {
                omega_i,
                f: bsdf_eval(material, n, omega_o, omega_i),
                pdf,
                delta: false,
            })
        }
        MaterialKind::SmoothSpecular => Some(BsdfSample {
            omega_i: reflect(omega_o, n),
            f: material.albedo,
            pdf: 1.0,
            delta: true,
        }),
    }
}
