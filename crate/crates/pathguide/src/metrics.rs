//! Error metrics against a reference image.

use crate::image::ImageBuffer;

/// Denominator offset guarding near-black reference pixels.
pub const METRIC_EPS: f64 = 0.01;

/// Mean over pixels and channels of (I - R)^2 / (R^2 + 0.01).
pub fn rel_mse(img: &ImageBuffer, reference: &ImageBuffer) -> f64 {
    per_channel_mean(img, reference, |i, r| {
        let d = i - r;
        d * d / (r * r + METRIC_EPS)
    })
}

/// Mean over pixels and channels of |I - R| / (R + 0.01).
pub fn mape(img: &ImageBuffer, reference: &ImageBuffer) -> f64 {
    per_channel_mean(img, reference, |i, r| (i - r).abs() / (r + METRIC_EPS))
}

fn per_channel_mean(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    assert_eq!(
        (img.width, img.height),
        (reference.width, reference.height),
        "image dimensions differ from reference"
    );
    let mut acc = 0.0;
    for (p, r) in img.pixels.iter().zip(&reference.pixels) {
        acc += f(p.x, r.x) + f(p.y, r.y) + f(p.z, r.z);
    }
    acc / (img.pixels.len() * 3) as f64
}
