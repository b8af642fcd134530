//! Photometric and ground-depth losses, in plain form and recorded on a
//! tape for a batch of rays.

use crate::error::{Error, Result};
use crate::field::{Appearance, QueryScratch, RadianceField};
use crate::geometry::Ray;
use crate::render::Samples;
use crate::tape::{NodeId, Tape};

/// Squared L2 colour error summed over channels.
pub fn loss_rgb(c: &[f64; 3], gt: &[f64; 3]) -> f64 {
    (0..3).map(|k| (c[k] - gt[k]) * (c[k] - gt[k])).sum()
}

/// Shape of the per-bin weight-density target around a known depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthTarget {
    /// All mass on the first sample at or beyond the depth.
    #[default]
    Dirac,
    /// Gaussian of one bin width, renormalised over the bins.
    Gaussian,
}

/// Target weight density per bin for surface depth `d`.
pub fn depth_target(samples: &Samples, near: f64, far: f64, d: f64, shape: DepthTarget) -> Result<Vec<f64>> {
    if !(d > near && d < far) {
        return Err(Error::DepthOutOfRange { depth: d, near, far });
    }
    let k = samples.terminal_of(near, d).ok_or(Error::DepthOutOfRange { depth: d, near, far })?;
    let n = samples.len();
    let mut target = vec![0.0; n];
    match shape {
        DepthTarget::Dirac => target[k] = 1.0 / samples.delta[k],
        DepthTarget::Gaussian => {
            let s = samples.delta[k];
            let mut mass = 0.0;
            for i in 0..n {
                let z = (samples.t[i] - d) / s;
                target[i] = (-0.5 * z * z).exp();
                mass += target[i] * samples.delta[i];
            }
            target.iter_mut().for_each(|v| *v /= mass);
        }
    }
    Ok(target)
}

/// `Σ Δ_i (w_i / Δ_i − target_i)²`, the binned form of `∫ (w(t) − δ(t − d))² dt`.
pub fn loss_depth(samples: &Samples, weights: &[f64], near: f64, far: f64, d: f64, shape: DepthTarget) -> Result<f64> {
    let target = depth_target(samples, near, far, d, shape)?;
    Ok((0..samples.len())
        .map(|i| {
            let e = weights[i] / samples.delta[i] - target[i];
            samples.delta[i] * e * e
        })
        .sum())
}

/// One supervised ray with its quadrature samples fixed.
#[derive(Debug, Clone)]
pub struct RayTarget {
    pub ray: Ray,
    pub appearance: Appearance,
    pub samples: Samples,
    pub color: Option<[f64; 3]>,
    /// Per-bin target density; see [`depth_target`].
    pub depth_target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_depth: f64,
    /// Divides the whole batch loss.
    pub normalizer: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub rgb: f64,
    pub depth: f64,
}

fn record_ray(
    field: &RadianceField,
    tape: &mut Tape,
    r: &RayTarget,
    scratch: &mut QueryScratch,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let n = r.samples.len();
    let mut sigmas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    if let Some(gt) = &r.color {
        let ctx = field.ray_context_on_tape(tape, &r.ray.direction, r.appearance)?;
        for &t in &r.samples.t {
            let (s, c) = field.sample_on_tape(tape, &r.ray.at(t), ctx, scratch);
            sigmas.push(s);
            colors.push(c);
        }
        let sigma = tape.concat(&sigmas);
        let rgb = tape.concat(&colors);
        let w = tape.volume_weights(sigma, &r.samples.delta);
        let c = tape.weighted_sum(w, rgb, 3);
        let l_rgb = tape.squared_error(c, gt);
        let l_d = r.depth_target.as_ref().map(|t| tape.density_match(w, &r.samples.delta, t));
        Ok((Some(l_rgb), l_d))
    } else if let Some(target) = &r.depth_target {
        for &t in &r.samples.t {
            sigmas.push(field.density_on_tape(tape, &r.ray.at(t), scratch));
        }
        let sigma = tape.concat(&sigmas);
        let w = tape.volume_weights(sigma, &r.samples.delta);
        Ok((None, Some(tape.density_match(w, &r.samples.delta, target))))
    } else {
        Ok((None, None))
    }
}

/// Batch loss `(Σ L_rgb + λ_d Σ L_d) / normalizer`; when `grad` is given the
/// gradient of that loss is accumulated into it. Rays are processed one at
/// a time in order, so the result does not depend on threading.
pub fn batch_loss(
    field: &RadianceField,
    rays: &[RayTarget],
    weights: LossWeights,
    mut grad: Option<&mut [f64]>,
    tape: &mut Tape,
) -> Result<BatchLoss> {
    let mut scratch = QueryScratch::default();
    let mut out = BatchLoss::default();
    for r in rays {
        tape.clear();
        let (l_rgb, l_d) = record_ray(field, tape, r, &mut scratch)?;
        let mut parts = Vec::with_capacity(2);
        let mut coeffs = Vec::with_capacity(2);
        if let Some(l) = l_rgb {
            out.rgb += tape.scalar(l);
            parts.push(l);
            coeffs.push(1.0 / weights.normalizer);
        }
        if let Some(l) = l_d {
            out.depth += tape.scalar(l);
            if weights.lambda_depth != 0.0 {
                parts.push(l);
                coeffs.push(weights.lambda_depth / weights.normalizer);
            }
        }
        if parts.is_empty() {
            continue;
        }
        let root = tape.combine(&parts, &coeffs);
        if let Some(g) = grad.as_deref_mut() {
            tape.backward(root, field.params(), g);
        }
    }
    out.total = (out.rgb + weights.lambda_depth * out.depth) / weights.normalizer;
    Ok(out)
}
