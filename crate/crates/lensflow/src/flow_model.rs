//! The trainable diffeomorphism on S^1 x D^2: disk<->plane diffeomorphism,
//! affine coupling layers with analytic log-Jacobians, the von Mises x
//! truncated-Gaussian prior, and reverse-mode gradient accumulation.

use crate::lens_geometry::{wrap_angle, Chart, TorusPoint, TAU};
use crate::special::bessel_i0;
use crate::target_densities::TorusLogDensity;
use rand::Rng;
use thiserror::Error;

pub const HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("input length {got} does not match d_in {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("point outside S^1 x D^2: disk norm^2 = {0}")]
    OutsideDomain(f64),
    #[error("rejection sampler exceeded {0} attempts")]
    RejectionCapExceeded(usize),
    #[error("non-finite loss at batch sample {0}")]
    NonFiniteLoss(usize),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("kappa must be non-negative, got {0}")]
    BadPriorKappa(f64),
}

/// Output activation of the conditioner networks: the scale nets are
/// tanh-capped, the translate nets are linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OutputCap {
    WithTanh,
    Linear,
}

/// A two-layer perceptron Linear(d_in, 64) -> ReLU -> Linear(64, d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub d_in: usize,
    pub d_out: usize,
    /// HIDDEN x d_in, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// d_out x HIDDEN, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        MlpParams {
            d_in,
            d_out,
            w1: vec![0.0; HIDDEN * d_in],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; d_out * HIDDEN],
            b2: vec![0.0; d_out],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Forward-pass cache of one MLP evaluation (inputs are at most 2-dimensional,
/// outputs at most 3).
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: [f64; 2],
    /// post-ReLU hidden activations
    pub act: [f64; HIDDEN],
    /// pre-cap output
    pub out_pre: [f64; 3],
    pub out: [f64; 3],
}

impl Default for MlpCache {
    fn default() -> Self {
        MlpCache {
            input: [0.0; 2],
            act: [0.0; HIDDEN],
            out_pre: [0.0; 3],
            out: [0.0; 3],
        }
    }
}

/// Evaluate the MLP, filling the cache for a later backward pass.
pub fn mlp_forward_cached(m: &MlpParams, u: &[f64], cap: OutputCap, cache: &mut MlpCache) {
    debug_assert_eq!(u.len(), m.d_in);
    cache.input = [u[0], *u.get(1).unwrap_or(&0.0)];
    for k in 0..HIDDEN {
        let mut h = m.b1[k];
        for (i, ui) in u.iter().enumerate() {
            h += m.w1[k * m.d_in + i] * ui;
        }
        cache.act[k] = h.max(0.0);
    }
    for j in 0..m.d_out {
        let mut o = m.b2[j];
        let row = &m.w2[j * HIDDEN..(j + 1) * HIDDEN];
        for k in 0..HIDDEN {
            o += row[k] * cache.act[k];
        }
        cache.out_pre[j] = o;
        cache.out[j] = match cap {
            OutputCap::WithTanh => o.tanh(),
            OutputCap::Linear => o,
        };
    }
}

/// W2 relu(W1 u + b1) + b2, tanh-capped elementwise iff cap = WithTanh.
pub fn mlp_forward(m: &MlpParams, u: &[f64], cap: OutputCap) -> Result<Vec<f64>, FlowError> {
    if u.len() != m.d_in {
        return Err(FlowError::ShapeMismatch {
            got: u.len(),
            want: m.d_in,
        });
    }
    let mut cache = MlpCache::default();
    mlp_forward_cached(m, u, cap, &mut cache);
    Ok(cache.out[..m.d_out].to_vec())
}

/// Gradient accumulator mirroring [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(m: &MlpParams) -> Self {
        MlpGrads {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }
}

/// Reverse pass of one MLP: accumulates parameter gradients and returns the
/// cotangent of the input.
pub fn mlp_backward(
    m: &MlpParams,
    cap: OutputCap,
    cache: &MlpCache,
    cotangent: &[f64],
    grads: &mut MlpGrads,
) -> [f64; 2] {
    debug_assert!(cotangent.len() >= m.d_out);
    let mut go = [0.0; 3];
    for j in 0..m.d_out {
        go[j] = match cap {
            OutputCap::WithTanh => {
                let t = cache.out[j];
                cotangent[j] * (1.0 - t * t)
            }
            OutputCap::Linear => cotangent[j],
        };
    }
    let mut gact = [0.0; HIDDEN];
    for j in 0..m.d_out {
        let g = go[j];
        if g == 0.0 {
            continue;
        }
        grads.b2[j] += g;
        let row = &m.w2[j * HIDDEN..(j + 1) * HIDDEN];
        let grow = &mut grads.w2[j * HIDDEN..(j + 1) * HIDDEN];
        for k in 0..HIDDEN {
            grow[k] += g * cache.act[k];
            gact[k] += g * row[k];
        }
    }
    let mut gu = [0.0; 2];
    for k in 0..HIDDEN {
        if cache.act[k] <= 0.0 {
            continue; // ReLU gate
        }
        let gh = gact[k];
        grads.b1[k] += gh;
        for i in 0..m.d_in {
            grads.w1[k * m.d_in + i] += gh * cache.input[i];
            gu[i] += gh * m.w1[k * m.d_in + i];
        }
    }
    gu
}

/// Cap on the sinusoidal amplitude of circle layers; keeps the circle-map
/// derivative 1 + a cos(.) bounded away from zero.
pub const CIRCLE_AMP_CAP: f64 = 0.95;

/// Which coordinate block a coupling layer holds fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerKind {
    /// Fixes the circle coordinate, transforms the disk (plane) block.
    FixCircle,
    /// Fixes the disk block, transforms the circle coordinate.
    FixDisk,
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub kind: LayerKind,
    pub scale: MlpParams,
    pub translate: MlpParams,
}

impl CouplingLayer {
    pub fn zeros(kind: LayerKind) -> Self {
        // FixCircle conditions on (cos theta, sin theta) so the conditioner
        // is well defined on the circle; FixDisk conditions on (x, y) and
        // produces (amplitude) and (translation, phase).
        let (d_in, d_scale, d_translate) = match kind {
            LayerKind::FixCircle => (2, 2, 2),
            // scale -> raw harmonic amplitudes (u1, u2),
            // translate -> (rotation t, phases phi1, phi2)
            LayerKind::FixDisk => (2, 2, 3),
        };
        CouplingLayer {
            kind,
            scale: MlpParams::zeros(d_in, d_scale),
            translate: MlpParams::zeros(d_in, d_translate),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub s_cache: MlpCache,
    pub t_cache: MlpCache,
    pub in_theta: f64,
    pub in_v: [f64; 2],
}

/// One affine coupling step on (theta, v) in R x R^2 with cache.
/// Returns (theta', v', logdet).
pub fn coupling_forward_cached(
    layer: &CouplingLayer,
    theta: f64,
    v: [f64; 2],
    cache: &mut LayerCache,
) -> (f64, [f64; 2], f64) {
    cache.in_theta = theta;
    cache.in_v = v;
    match layer.kind {
        LayerKind::FixCircle => {
            let u = [theta.cos(), theta.sin()];
            mlp_forward_cached(&layer.scale, &u, OutputCap::WithTanh, &mut cache.s_cache);
            mlp_forward_cached(&layer.translate, &u, OutputCap::Linear, &mut cache.t_cache);
            let s = cache.s_cache.out;
            let t = cache.t_cache.out;
            let v_out = [v[0] * s[0].exp() + t[0], v[1] * s[1].exp() + t[1]];
            (theta, v_out, s[0] + s[1])
        }
        LayerKind::FixDisk => {
            // Disk-conditioned circle diffeomorphism with two harmonics:
            //   theta' = theta + t(v) + a1 sin(theta + phi1) + a2/2 sin(2 theta + phi2),
            // wrapped per layer. Amplitudes are allocated so |a1| + |a2| <= CAP < 1,
            // hence the derivative 1 + a1 cos(.) + a2 cos(.) stays positive: each
            // layer is a bijection of the solid torus and the change-of-variables
            // density is exact. (A multiplicative update theta * e^s would stretch
            // the circle image past one period; the final wrap then overcounts and
            // the training loss becomes unbounded below.)
            mlp_forward_cached(&layer.scale, &v, OutputCap::WithTanh, &mut cache.s_cache);
            mlp_forward_cached(&layer.translate, &v, OutputCap::Linear, &mut cache.t_cache);
            let u = cache.s_cache.out;
            let a1 = CIRCLE_AMP_CAP * u[0];
            let a2 = CIRCLE_AMP_CAP * (1.0 - u[0].abs()) * u[1];
            let t = cache.t_cache.out[0];
            let psi1 = theta + cache.t_cache.out[1];
            let psi2 = 2.0 * theta + cache.t_cache.out[2];
            let theta_out = wrap_angle(theta + t + a1 * psi1.sin() + 0.5 * a2 * psi2.sin());
            let den = 1.0 + a1 * psi1.cos() + a2 * psi2.cos();
            (theta_out, v, den.ln())
        }
    }
}

/// Coupling step without a caller-provided cache.
pub fn coupling_forward(layer: &CouplingLayer, theta: f64, v: [f64; 2]) -> (f64, [f64; 2], f64) {
    let mut cache = LayerCache::default();
    coupling_forward_cached(layer, theta, v, &mut cache)
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub scale: MlpGrads,
    pub translate: MlpGrads,
}

/// Reverse pass of one coupling layer. `g_theta`/`g_v` are cotangents of the
/// outputs, `g_logdet` the cotangent of this layer's log-determinant
/// contribution. Returns cotangents of the inputs.
pub fn coupling_backward(
    layer: &CouplingLayer,
    cache: &LayerCache,
    g_theta: f64,
    g_v: [f64; 2],
    g_logdet: f64,
    grads: &mut LayerGrads,
) -> (f64, [f64; 2]) {
    match layer.kind {
        LayerKind::FixCircle => {
            let s = cache.s_cache.out;
            let e0 = s[0].exp();
            let e1 = s[1].exp();
            let g_s = [
                g_v[0] * cache.in_v[0] * e0 + g_logdet,
                g_v[1] * cache.in_v[1] * e1 + g_logdet,
            ];
            let g_t = g_v;
            let gs_in = mlp_backward(
                &layer.scale,
                OutputCap::WithTanh,
                &cache.s_cache,
                &g_s,
                &mut grads.scale,
            );
            let gt_in = mlp_backward(
                &layer.translate,
                OutputCap::Linear,
                &cache.t_cache,
                &g_t,
                &mut grads.translate,
            );
            // chain through the (cos theta, sin theta) conditioner features
            let (sin_t, cos_t) = cache.in_theta.sin_cos();
            let g_theta_in =
                g_theta + (gs_in[0] + gt_in[0]) * (-sin_t) + (gs_in[1] + gt_in[1]) * cos_t;
            (g_theta_in, [g_v[0] * e0, g_v[1] * e1])
        }
        LayerKind::FixDisk => {
            let u = cache.s_cache.out;
            let a1 = CIRCLE_AMP_CAP * u[0];
            let a2 = CIRCLE_AMP_CAP * (1.0 - u[0].abs()) * u[1];
            let psi1 = cache.in_theta + cache.t_cache.out[1];
            let psi2 = 2.0 * cache.in_theta + cache.t_cache.out[2];
            let (sin1, cos1) = psi1.sin_cos();
            let (sin2, cos2) = psi2.sin_cos();
            let den = 1.0 + a1 * cos1 + a2 * cos2;
            // theta' = theta + t + a1 sin(psi1) + a2/2 sin(psi2), ld = ln(den)
            let g_a1 = g_theta * sin1 + g_logdet * cos1 / den;
            let g_a2 = g_theta * 0.5 * sin2 + g_logdet * cos2 / den;
            let g_phi1 = (g_theta * cos1 - g_logdet * sin1 / den) * a1;
            let g_phi2 = (g_theta * 0.5 * cos2 - g_logdet * sin2 / den) * a2;
            let g_s = [
                CIRCLE_AMP_CAP * (g_a1 - u[0].signum() * u[1] * g_a2),
                CIRCLE_AMP_CAP * (1.0 - u[0].abs()) * g_a2,
            ];
            let g_t = [g_theta, g_phi1, g_phi2];
            let gs_in = mlp_backward(
                &layer.scale,
                OutputCap::WithTanh,
                &cache.s_cache,
                &g_s,
                &mut grads.scale,
            );
            let gt_in = mlp_backward(
                &layer.translate,
                OutputCap::Linear,
                &cache.t_cache,
                &g_t,
                &mut grads.translate,
            );
            let g_theta_in = g_theta * den - g_logdet * (a1 * sin1 + 2.0 * a2 * sin2) / den;
            (
                g_theta_in,
                [g_v[0] + gs_in[0] + gt_in[0], g_v[1] + gs_in[1] + gt_in[1]],
            )
        }
    }
}

const BOUNDARY_EPS: f64 = 1e-12;

/// psi: R^2 -> int(D^2), w = v / (1 + |v|). logdet = -3 log(1 + |v|).
pub fn plane_to_disk(v: [f64; 2]) -> ([f64; 2], f64) {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let scale = 1.0 / (1.0 + n);
    ([v[0] * scale, v[1] * scale], -3.0 * (1.0 + n).ln())
}

/// Inverse of [`plane_to_disk`]: v = w / (1 - |w|), logdet = -3 log(1 - |w|).
/// The input norm is clamped to 1 - 1e-12; the clamped flag is returned.
pub fn disk_to_plane(w: [f64; 2]) -> ([f64; 2], f64, bool) {
    let n = (w[0] * w[0] + w[1] * w[1]).sqrt();
    let (n, clamped) = if n >= 1.0 - BOUNDARY_EPS {
        (1.0 - BOUNDARY_EPS, true)
    } else {
        (n, false)
    };
    let scale = 1.0 / (1.0 - n);
    let w = if clamped {
        let raw = (w[0] * w[0] + w[1] * w[1]).sqrt();
        [w[0] / raw * n, w[1] / raw * n]
    } else {
        w
    };
    ([w[0] * scale, w[1] * scale], -3.0 * (1.0 - n).ln(), clamped)
}

/// Stack of coupling layers alternating FixCircle, FixDisk.
#[derive(Debug, Clone)]
pub struct FlowTransform {
    pub layers: Vec<CouplingLayer>,
}

impl FlowTransform {
    pub fn zeros(n_pairs: usize) -> Self {
        let mut layers = Vec::with_capacity(2 * n_pairs);
        for _ in 0..n_pairs {
            layers.push(CouplingLayer::zeros(LayerKind::FixCircle));
            layers.push(CouplingLayer::zeros(LayerKind::FixDisk));
        }
        FlowTransform { layers }
    }

    pub fn n_pairs(&self) -> usize {
        self.layers.len() / 2
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale.n_params() + l.translate.n_params())
            .sum()
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads> {
        self.layers
            .iter()
            .map(|l| LayerGrads {
                scale: MlpGrads::zeros_like(&l.scale),
                translate: MlpGrads::zeros_like(&l.translate),
            })
            .collect()
    }
}

/// Full forward-pass cache of the flow for one sample.
#[derive(Debug, Clone, Default)]
pub struct FlowCache {
    pub layers: Vec<LayerCache>,
    /// plane coordinates entering the layer stack
    pub v0: [f64; 2],
    /// plane coordinates leaving the layer stack
    pub v_c: [f64; 2],
    pub theta_c: f64,
    pub out: [f64; 3],
    pub logdet: f64,
    pub clamped: bool,
}

impl FlowCache {
    pub fn for_flow(flow: &FlowTransform) -> Self {
        FlowCache {
            layers: vec![LayerCache::default(); flow.layers.len()],
            ..Default::default()
        }
    }
}

/// F_theta: map disk to plane, run the coupling stack in (theta in R, v in
/// R^2), wrap theta mod 2 pi and map the plane back to the disk. The total
/// log-determinant sums both disk-map terms and every layer term.
pub fn flow_forward_cached(flow: &FlowTransform, z: [f64; 3], cache: &mut FlowCache) {
    debug_assert_eq!(cache.layers.len(), flow.layers.len());
    let (v, ld_in, clamped) = disk_to_plane([z[1], z[2]]);
    cache.v0 = v;
    cache.clamped = clamped;
    let mut theta = z[0];
    let mut v = v;
    let mut logdet = ld_in;
    for (layer, lc) in flow.layers.iter().zip(cache.layers.iter_mut()) {
        let (t2, v2, ld) = coupling_forward_cached(layer, theta, v, lc);
        theta = t2;
        v = v2;
        logdet += ld;
    }
    cache.theta_c = theta;
    cache.v_c = v;
    let (w, ld_out) = plane_to_disk(v);
    logdet += ld_out;
    cache.out = [wrap_angle(theta), w[0], w[1]];
    cache.logdet = logdet;
}

/// Forward map, returning ((theta, x, y), total_logdet).
pub fn flow_forward(flow: &FlowTransform, z: [f64; 3]) -> ([f64; 3], f64) {
    let mut cache = FlowCache::for_flow(flow);
    flow_forward_cached(flow, z, &mut cache);
    (cache.out, cache.logdet)
}

/// Reverse pass through the whole flow for one sample.
///
/// `g_out` is the cotangent of the output torus coordinates, `g_logdet` the
/// cotangent of the total log-determinant. The input is a fixed prior
/// sample, so nothing propagates past the initial disk-to-plane map.
pub fn flow_backward(
    flow: &FlowTransform,
    cache: &FlowCache,
    g_out: [f64; 3],
    g_logdet: f64,
    grads: &mut [LayerGrads],
) {
    // final plane_to_disk: w = v/(1+n); J is symmetric.
    let v = cache.v_c;
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let gw = [g_out[1], g_out[2]];
    let mut gv = if n < 1e-300 {
        gw
    } else {
        let a = 1.0 / (1.0 + n);
        let vg = v[0] * gw[0] + v[1] * gw[1];
        let coef = vg / (n * (1.0 + n) * (1.0 + n));
        [gw[0] * a - v[0] * coef, gw[1] * a - v[1] * coef]
    };
    if n >= 1e-300 {
        // d/dv of -3 log(1+n)
        let c = -3.0 * g_logdet / (n * (1.0 + n));
        gv[0] += c * v[0];
        gv[1] += c * v[1];
    }
    let mut gtheta = g_out[0];
    for ((layer, lc), lg) in flow
        .layers
        .iter()
        .zip(cache.layers.iter())
        .zip(grads.iter_mut())
        .rev()
    {
        let (gt, gvv) = coupling_backward(layer, lc, gtheta, gv, g_logdet, lg);
        gtheta = gt;
        gv = gvv;
    }
}

/// von Mises (kappa) x truncated bivariate normal (sigma) prior on
/// S^1 x D^2.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PriorParams {
    pub kappa: f64,
    pub sigma: f64,
}

impl PriorParams {
    pub fn new(kappa: f64, sigma: f64) -> Result<Self, FlowError> {
        if kappa < 0.0 {
            return Err(FlowError::BadPriorKappa(kappa));
        }
        if sigma <= 0.0 {
            return Err(FlowError::BadSigma(sigma));
        }
        Ok(PriorParams { kappa, sigma })
    }

    /// log prior density at (theta, x, y) with respect to d theta dx dy.
    pub fn logpdf(&self, z: [f64; 3]) -> Result<f64, FlowError> {
        let rsq = z[1] * z[1] + z[2] * z[2];
        if !(rsq <= 1.0 + 1e-12) || !z[0].is_finite() {
            return Err(FlowError::OutsideDomain(rsq));
        }
        Ok(self.logpdf_unchecked(z))
    }

    pub fn logpdf_unchecked(&self, z: [f64; 3]) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.kappa * z[0].cos() - (TAU * bessel_i0(self.kappa)).ln()
            - (z[1] * z[1] + z[2] * z[2]) / (2.0 * s2)
            - self.log_disk_norm()
    }

    /// log of the normalization constant of the disk factor alone.
    pub fn log_disk_norm(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        (TAU * s2 * (1.0 - (-1.0 / (2.0 * s2)).exp())).ln()
    }
}

const REJECTION_CAP: usize = 100_000;

/// Draw theta from the von Mises distribution VM(0, kappa) on [0, 2 pi) by
/// Best-Fisher rejection sampling.
pub fn sample_von_mises(kappa: f64, rng: &mut impl Rng) -> Result<f64, FlowError> {
    if kappa == 0.0 {
        return Ok(rng.gen::<f64>() * TAU);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    for _ in 0..REJECTION_CAP {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (std::f64::consts::PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.gen();
            let angle = if u3 > 0.5 { f.acos() } else { -f.acos() };
            return Ok(wrap_angle(angle));
        }
    }
    Err(FlowError::RejectionCapExceeded(REJECTION_CAP))
}

/// Draw (x, y) from N(0, sigma^2 I) truncated to the unit disk by rejection.
pub fn sample_truncated_disk(sigma: f64, rng: &mut impl Rng) -> Result<[f64; 2], FlowError> {
    for _ in 0..REJECTION_CAP {
        // Box-Muller pair
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt() * sigma;
        let (s, c) = (TAU * u2).sin_cos();
        let x = r * c;
        let y = r * s;
        if x * x + y * y <= 1.0 {
            return Ok([x, y]);
        }
    }
    Err(FlowError::RejectionCapExceeded(REJECTION_CAP))
}

/// Sample n prior points on S^1 x D^2.
pub fn prior_sample(
    prior: &PriorParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<[f64; 3]>, FlowError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = sample_von_mises(prior.kappa, rng)?;
        let xy = sample_truncated_disk(prior.sigma, rng)?;
        out.push([theta, xy[0], xy[1]]);
    }
    Ok(out)
}

/// Per-batch loss statistics; `loss = kl - anneal_weight * entropy` exactly.
#[derive(Debug, Clone, Copy)]
pub struct LossStats {
    pub loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub anneal_weight: f64,
}

/// Reverse-KL loss and parameter gradients over a prior batch.
///
/// Per sample, kl = log p_Z(z) - log|det J| - log q(F(z)) and the entropy
/// estimate is -(log p_Z(z) - log|det J|); the loss is their annealed
/// combination. The target enters through its value and its gradient at
/// the mapped point.
pub fn flow_backward_gradients(
    flow: &FlowTransform,
    prior: &PriorParams,
    target: &dyn TorusLogDensity,
    chart: Chart,
    batch: &[[f64; 3]],
    anneal_weight: f64,
) -> Result<(Vec<LayerGrads>, LossStats), FlowError> {
    let mut grads = flow.zero_grads();
    let mut cache = FlowCache::for_flow(flow);
    let inv_n = 1.0 / batch.len() as f64;
    let mut kl_sum = 0.0;
    let mut ent_sum = 0.0;
    for (i, z) in batch.iter().enumerate() {
        flow_forward_cached(flow, *z, &mut cache);
        let log_pz = prior.logpdf_unchecked(*z);
        let t = TorusPoint::new(chart, cache.out[0], cache.out[1], cache.out[2]);
        let log_q = target.logpdf(&t);
        let kl = log_pz - cache.logdet - log_q;
        if !kl.is_finite() {
            return Err(FlowError::NonFiniteLoss(i));
        }
        kl_sum += kl;
        ent_sum += -(log_pz - cache.logdet);
        // d loss / d out = -(1/n) grad log q; d loss / d logdet = -(1+beta)/n
        let gq = target.grad(&t);
        let g_out = [-inv_n * gq[0], -inv_n * gq[1], -inv_n * gq[2]];
        let g_logdet = -(1.0 + anneal_weight) * inv_n;
        flow_backward(flow, &cache, g_out, g_logdet, &mut grads);
    }
    let kl = kl_sum * inv_n;
    let entropy = ent_sum * inv_n;
    let loss = kl - anneal_weight * entropy;
    if !loss.is_finite() {
        return Err(FlowError::NonFiniteLoss(0));
    }
    Ok((
        grads,
        LossStats {
            loss,
            kl,
            entropy,
            anneal_weight,
        },
    ))
}
