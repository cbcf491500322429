//! Target log-densities on S^3 (von Mises-Fisher mixtures and a Boltzmann
//! density for molecular orientation), deck-group symmetrization, and the
//! pushforward density on the two Heegaard tori with MC normalizers.

use crate::lens_geometry::{
    deck_matrix, sphere_jacobian, torus_to_sphere, Chart, LensSpace, SpherePoint, TorusPoint, TAU,
};
use crate::special::log_bessel_i1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("kappa must be positive, got {0}")]
    BadKappa(f64),
    #[error("vector must be unit norm, |v| = {0}")]
    NotUnit(f64),
    #[error("mixture weights sum to {0}, expected 1")]
    BadWeights(f64),
    #[error("mixture must have at least one component")]
    EmptyMixture,
    #[error("normalizer estimation needs n >= {min}, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("non-finite density encountered at sample {0}")]
    NonFiniteDensity(usize),
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// One von Mises-Fisher component on S^3.
#[derive(Debug, Clone)]
pub struct VmfComponent {
    pub mu: [f64; 4],
    pub kappa: f64,
    pub weight: f64,
}

/// log vMF(x; mu, kappa) on S^3 with respect to d vol:
/// log kappa - log(4 pi^2) - log I_1(kappa) + kappa (mu . x).
pub fn vmf_logpdf(x: &[f64; 4], mu: &[f64; 4], kappa: f64) -> Result<f64, TargetError> {
    if kappa <= 0.0 {
        return Err(TargetError::BadKappa(kappa));
    }
    Ok(vmf_log_const(kappa) + kappa * dot4(mu, x))
}

fn vmf_log_const(kappa: f64) -> f64 {
    kappa.ln() - (4.0 * std::f64::consts::PI * std::f64::consts::PI).ln() - log_bessel_i1(kappa)
}

/// Parameters of the lifted Maier-Saupe + 6-fold hindered rotor potential.
#[derive(Debug, Clone)]
pub struct BoltzmannParams {
    pub kappa: f64,
    pub c: [f64; 3],
    pub barrier: f64,
    pub x0: [f64; 3],
    pub y0: [f64; 3],
    pub basis_e2: [f64; 3],
    pub basis_e3: [f64; 3],
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn check_unit3(v: &[f64; 3]) -> Result<(), TargetError> {
    let n = dot3(v, v).sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return Err(TargetError::NotUnit(n));
    }
    Ok(())
}

impl BoltzmannParams {
    /// Builds the rotor basis {e2, e3} of the plane normal to c so that
    /// {c, e2, e3} is a right-handed orthonormal frame. For c = e1 this is
    /// the standard basis pair.
    pub fn new(
        kappa: f64,
        c: [f64; 3],
        barrier: f64,
        x0: [f64; 3],
        y0: [f64; 3],
    ) -> Result<Self, TargetError> {
        check_unit3(&c)?;
        check_unit3(&x0)?;
        check_unit3(&y0)?;
        let seed = if c[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let d = dot3(&seed, &c);
        let mut e2 = [seed[0] - d * c[0], seed[1] - d * c[1], seed[2] - d * c[2]];
        let n = dot3(&e2, &e2).sqrt();
        e2 = [e2[0] / n, e2[1] / n, e2[2] / n];
        let e3 = cross(&c, &e2);
        Ok(BoltzmannParams {
            kappa,
            c,
            barrier,
            x0,
            y0,
            basis_e2: e2,
            basis_e3: e3,
        })
    }
}

/// The SO(3) rotation matrix of a unit quaternion q = (w, x, y, z).
pub fn rotation_from_quaternion(q: &[f64; 4]) -> Result<[[f64; 3]; 3], TargetError> {
    let n = dot4(q, q).sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return Err(TargetError::NotUnit(n));
    }
    Ok(rotation_matrix_unchecked(q))
}

fn rotation_matrix_unchecked(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// dR/dq_a for a = w, x, y, z, with R as printed above.
fn rotation_matrix_derivatives(q: &[f64; 4]) -> [[[f64; 3]; 3]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = 2.0;
    [
        [
            [0.0, -two * z, two * y],
            [two * z, 0.0, -two * x],
            [-two * y, two * x, 0.0],
        ],
        [
            [0.0, two * y, two * z],
            [two * y, -2.0 * two * x, -two * w],
            [two * z, two * w, -2.0 * two * x],
        ],
        [
            [-2.0 * two * y, two * x, two * w],
            [two * x, 0.0, two * z],
            [-two * w, two * z, -2.0 * two * y],
        ],
        [
            [-2.0 * two * z, -two * w, two * x],
            [two * w, -2.0 * two * z, two * y],
            [two * x, two * y, 0.0],
        ],
    ]
}

fn mat_vec3(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

const DEGENERATE_PROJ: f64 = 1e-12;

/// Rotor angle phi(q; y0): rotate y0 by R(q), project onto the rotor basis,
/// take atan2 of the coefficients. Errors when the projection is degenerate
/// (rotated y0 parallel to c).
pub fn hindered_angle(q: &[f64; 4], params: &BoltzmannParams) -> Result<f64, TargetError> {
    let r = rotation_from_quaternion(q)?;
    let y_rot = mat_vec3(&r, &params.y0);
    let m2 = dot3(&y_rot, &params.basis_e2);
    let m3 = dot3(&y_rot, &params.basis_e3);
    if m2.abs() < DEGENERATE_PROJ && m3.abs() < DEGENERATE_PROJ {
        return Err(TargetError::NotUnit(0.0));
    }
    Ok(m3.atan2(m2))
}

/// The lifted potential
/// U(q) = -kappa (n.c)^2 + (n.c)^2 V (1 - cos 6 phi), n = R(q) x0.
///
/// At the measure-zero degenerate set (R(q) y0 parallel to c) phi is taken
/// as 0.
pub fn boltzmann_potential(q: &[f64; 4], params: &BoltzmannParams) -> f64 {
    let r = rotation_matrix_unchecked(q);
    let n = mat_vec3(&r, &params.x0);
    let a = dot3(&n, &params.c);
    let y_rot = mat_vec3(&r, &params.y0);
    let m2 = dot3(&y_rot, &params.basis_e2);
    let m3 = dot3(&y_rot, &params.basis_e3);
    let phi = if m2.abs() < DEGENERATE_PROJ && m3.abs() < DEGENERATE_PROJ {
        0.0
    } else {
        m3.atan2(m2)
    };
    a * a * (-params.kappa + params.barrier * (1.0 - (6.0 * phi).cos()))
}

/// Gradient of [`boltzmann_potential`] in the ambient R^4 coordinates of q.
pub fn boltzmann_potential_grad(q: &[f64; 4], params: &BoltzmannParams) -> [f64; 4] {
    let r = rotation_matrix_unchecked(q);
    let dr = rotation_matrix_derivatives(q);
    let n = mat_vec3(&r, &params.x0);
    let a = dot3(&n, &params.c);
    let y_rot = mat_vec3(&r, &params.y0);
    let m2 = dot3(&y_rot, &params.basis_e2);
    let m3 = dot3(&y_rot, &params.basis_e3);
    let msq = m2 * m2 + m3 * m3;
    let degenerate = m2.abs() < DEGENERATE_PROJ && m3.abs() < DEGENERATE_PROJ;
    let phi = if degenerate { 0.0 } else { m3.atan2(m2) };
    let b = params.barrier * (1.0 - (6.0 * phi).cos());
    let mut grad = [0.0; 4];
    for (i, g) in grad.iter_mut().enumerate() {
        let dn = mat_vec3(&dr[i], &params.x0);
        let da = dot3(&dn, &params.c);
        *g = 2.0 * a * da * (-params.kappa + b);
        if !degenerate {
            let dy = mat_vec3(&dr[i], &params.y0);
            let dm2 = dot3(&dy, &params.basis_e2);
            let dm3 = dot3(&dy, &params.basis_e3);
            let dphi = (m2 * dm3 - m3 * dm2) / msq;
            *g += a * a * params.barrier * 6.0 * (6.0 * phi).sin() * dphi;
        }
    }
    grad
}

/// Unnormalized Boltzmann log-density on S^3: log p = U(q) up to -log C.
pub fn boltzmann_logpdf_unnorm(q: &[f64; 4], params: &BoltzmannParams) -> f64 {
    boltzmann_potential(q, params)
}

/// An evaluable S^3 log-density. `symmetric` records whether the density is
/// already invariant under the deck action of the lens space it will be
/// pushed through; symmetric targets skip the deck average.
#[derive(Debug, Clone)]
pub enum TargetKind {
    /// Constant density 1/(2 pi^2) with respect to d vol.
    UniformS3,
    VmfMixture(Vec<VmfComponent>),
    /// Unnormalized: log-density known only up to the Boltzmann constant.
    Boltzmann(BoltzmannParams),
}

#[derive(Debug, Clone)]
pub struct TargetDensity {
    pub kind: TargetKind,
    pub symmetric: bool,
}

impl TargetDensity {
    pub fn uniform() -> Self {
        TargetDensity {
            kind: TargetKind::UniformS3,
            symmetric: true,
        }
    }

    pub fn vmf_mixture(components: Vec<VmfComponent>) -> Result<Self, TargetError> {
        if components.is_empty() {
            return Err(TargetError::EmptyMixture);
        }
        let wsum: f64 = components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(TargetError::BadWeights(wsum));
        }
        for c in &components {
            if c.kappa <= 0.0 {
                return Err(TargetError::BadKappa(c.kappa));
            }
            let n = dot4(&c.mu, &c.mu).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(TargetError::NotUnit(n));
            }
        }
        Ok(TargetDensity {
            kind: TargetKind::VmfMixture(components),
            symmetric: false,
        })
    }

    pub fn boltzmann(params: BoltzmannParams, symmetric: bool) -> Self {
        TargetDensity {
            kind: TargetKind::Boltzmann(params),
            symmetric,
        }
    }

    /// Whether the density is normalized with respect to d vol on S^3.
    pub fn is_normalized(&self) -> bool {
        !matches!(self.kind, TargetKind::Boltzmann(_))
    }

    /// Log-density at an ambient R^4 point (evaluated on the unit sphere).
    pub fn logpdf(&self, x: &[f64; 4]) -> f64 {
        match &self.kind {
            TargetKind::UniformS3 => {
                -(2.0 * std::f64::consts::PI * std::f64::consts::PI).ln()
            }
            TargetKind::VmfMixture(comps) => {
                let logs: Vec<f64> = comps
                    .iter()
                    .map(|c| c.weight.ln() + vmf_log_const(c.kappa) + c.kappa * dot4(&c.mu, x))
                    .collect();
                logsumexp(&logs)
            }
            TargetKind::Boltzmann(p) => boltzmann_logpdf_unnorm(x, p),
        }
    }

    /// Gradient of [`Self::logpdf`] in ambient R^4 coordinates.
    pub fn grad_logpdf(&self, x: &[f64; 4]) -> [f64; 4] {
        match &self.kind {
            TargetKind::UniformS3 => [0.0; 4],
            TargetKind::VmfMixture(comps) => {
                let logs: Vec<f64> = comps
                    .iter()
                    .map(|c| c.weight.ln() + vmf_log_const(c.kappa) + c.kappa * dot4(&c.mu, x))
                    .collect();
                let total = logsumexp(&logs);
                let mut grad = [0.0; 4];
                for (c, l) in comps.iter().zip(logs.iter()) {
                    let u = (l - total).exp();
                    for i in 0..4 {
                        grad[i] += u * c.kappa * c.mu[i];
                    }
                }
                grad
            }
            TargetKind::Boltzmann(p) => boltzmann_potential_grad(x, p),
        }
    }

    /// Numerically checks deck invariance of the log-density on random
    /// sphere points.
    pub fn is_deck_invariant(&self, lens: &LensSpace, n: usize, seed: u64, tol: f64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n {
            let z = random_sphere_point(&mut rng);
            let base = self.logpdf(&z.r4);
            for k in 1..lens.p() {
                let gz = crate::lens_geometry::deck_apply(lens, &z, k);
                if (self.logpdf(&gz.r4) - base).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Uniform point of S^3 by normalizing a 4D Gaussian sample.
pub fn random_sphere_point(rng: &mut impl Rng) -> SpherePoint {
    loop {
        let mut v = [0.0f64; 4];
        let mut n2 = 0.0;
        for a in v.iter_mut() {
            // Box-Muller pairs would also do; a rejection ball sample keeps
            // the dependency surface small.
            *a = rng.gen::<f64>() * 2.0 - 1.0;
            n2 += *a * *a;
        }
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return SpherePoint::from_r4([v[0] / n, v[1] / n, v[2] / n, v[3] / n]);
        }
    }
}

/// Deck-group average of the target log-density, computed in log space.
/// Already-symmetric targets are returned unchanged.
pub fn symmetrize_logpdf(lens: &LensSpace, target: &TargetDensity, z: &SpherePoint) -> f64 {
    if target.symmetric {
        return target.logpdf(&z.r4);
    }
    let p = lens.p();
    let logs: Vec<f64> = (0..p)
        .map(|k| {
            let gz = crate::lens_geometry::deck_apply(lens, z, k);
            target.logpdf(&gz.r4)
        })
        .collect();
    logsumexp(&logs) - (p as f64).ln()
}

/// Gradient of [`symmetrize_logpdf`] with respect to the ambient R^4 point.
pub fn symmetrize_grad(lens: &LensSpace, target: &TargetDensity, z: &SpherePoint) -> [f64; 4] {
    if target.symmetric {
        return target.grad_logpdf(&z.r4);
    }
    let p = lens.p();
    let mut logs = Vec::with_capacity(p as usize);
    let mut grads = Vec::with_capacity(p as usize);
    for k in 0..p {
        let m = deck_matrix(lens, k);
        let gz = crate::lens_geometry::deck_apply(lens, z, k);
        let g = target.grad_logpdf(&gz.r4);
        // pull back through the linear deck map: m^T g
        let mut pulled = [0.0; 4];
        for col in 0..4 {
            for row in 0..4 {
                pulled[col] += m[row][col] * g[row];
            }
        }
        logs.push(target.logpdf(&gz.r4));
        grads.push(pulled);
    }
    let total = logsumexp(&logs);
    let mut grad = [0.0; 4];
    for (l, g) in logs.iter().zip(grads.iter()) {
        let u = (l - total).exp();
        for i in 0..4 {
            grad[i] += u * g[i];
        }
    }
    grad
}

/// Log of the pushforward density p_1 u_A p_2 on the torus of chart i,
/// with respect to d theta dx dy: log(1/2) + p_sym at the lifted point.
pub fn pushforward_logpdf(lens: &LensSpace, target: &TargetDensity, t: &TorusPoint) -> f64 {
    let z = torus_to_sphere(lens, t);
    (0.5f64).ln() + symmetrize_logpdf(lens, target, &z)
}

/// Gradient of [`pushforward_logpdf`] with respect to (theta, x, y).
pub fn pushforward_grad(lens: &LensSpace, target: &TargetDensity, t: &TorusPoint) -> [f64; 3] {
    let z = torus_to_sphere(lens, t);
    let gx = symmetrize_grad(lens, target, &z);
    let jac = sphere_jacobian(lens, t);
    let mut g = [0.0; 3];
    for col in 0..3 {
        for row in 0..4 {
            g[col] += jac[row][col] * gx[row];
        }
    }
    g
}

/// MC normalizers of the pushforward density over each torus.
#[derive(Debug, Clone)]
pub struct Normalizers {
    pub i1: f64,
    pub i2: f64,
    pub stderr1: f64,
    pub stderr2: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl Normalizers {
    pub fn i(&self, chart: Chart) -> f64 {
        match chart {
            Chart::One => self.i1,
            Chart::Two => self.i2,
        }
    }

    /// Bernoulli mixture weight w = I_2 / (I_1 + I_2).
    pub fn mixture_weight(&self) -> f64 {
        self.i2 / (self.i1 + self.i2)
    }
}

/// Draw a uniform point of [0, 2 pi) x D^2 (disk via sqrt-radius polar).
pub fn uniform_torus_point(chart: Chart, rng: &mut impl Rng) -> TorusPoint {
    let theta = rng.gen::<f64>() * TAU;
    let rho = rng.gen::<f64>().sqrt();
    let phi = rng.gen::<f64>() * TAU;
    TorusPoint::new(chart, theta, rho * phi.cos(), rho * phi.sin())
}

/// Estimate I_i = (2 pi * pi) * E_uniform[exp(pushforward log-density)] per
/// chart with n samples each, plus standard errors.
pub fn estimate_normalizers(
    lens: &LensSpace,
    target: &TargetDensity,
    n: usize,
    seed: u64,
) -> Result<Normalizers, TargetError> {
    const MIN_N: usize = 10_000;
    if n < MIN_N {
        return Err(TargetError::TooFewSamples { min: MIN_N, got: n });
    }
    let volume = TAU * std::f64::consts::PI;
    let mut out = [(0.0, 0.0); 2];
    for chart in [Chart::One, Chart::Two] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((chart.label() as u64) << 32));
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let t = uniform_torus_point(chart, &mut rng);
            let v = pushforward_logpdf(lens, target, &t).exp();
            if !v.is_finite() {
                return Err(TargetError::NonFiniteDensity(i));
            }
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        out[chart.index()] = (volume * mean, volume * (var / n as f64).sqrt());
    }
    Ok(Normalizers {
        i1: out[0].0,
        i2: out[1].0,
        stderr1: out[0].1,
        stderr2: out[1].1,
        n_mc: n,
        seed,
    })
}

/// The pushforward density together with its per-torus normalizers; its
/// normalized restriction to chart i is the training target q_i.
#[derive(Debug, Clone)]
pub struct PushforwardDensity {
    pub lens: LensSpace,
    pub target: TargetDensity,
    pub normalizers: Normalizers,
}

impl PushforwardDensity {
    pub fn estimate(
        lens: LensSpace,
        target: TargetDensity,
        n_mc: usize,
        seed: u64,
    ) -> Result<Self, TargetError> {
        let normalizers = estimate_normalizers(&lens, &target, n_mc, seed)?;
        Ok(PushforwardDensity {
            lens,
            target,
            normalizers,
        })
    }

    pub fn logpdf(&self, t: &TorusPoint) -> f64 {
        pushforward_logpdf(&self.lens, &self.target, t)
    }

    /// log q_i(t) = pushforward log-density minus log I_{chart(t)}.
    pub fn normalized_logpdf(&self, t: &TorusPoint) -> f64 {
        self.logpdf(t) - self.normalizers.i(t.chart).ln()
    }

    pub fn grad(&self, t: &TorusPoint) -> [f64; 3] {
        pushforward_grad(&self.lens, &self.target, t)
    }
}

/// A log-density on one solid torus with an analytic gradient; the
/// interface the trainer and evaluator consume.
pub trait TorusLogDensity {
    fn logpdf(&self, t: &TorusPoint) -> f64;
    fn grad(&self, t: &TorusPoint) -> [f64; 3];
}

/// The normalized training target q_i on a fixed chart.
pub struct NormalizedTarget<'a> {
    pub pushforward: &'a PushforwardDensity,
    pub chart: Chart,
}

impl TorusLogDensity for NormalizedTarget<'_> {
    fn logpdf(&self, t: &TorusPoint) -> f64 {
        debug_assert_eq!(t.chart, self.chart);
        self.pushforward.normalized_logpdf(t)
    }

    fn grad(&self, t: &TorusPoint) -> [f64; 3] {
        self.pushforward.grad(t)
    }
}

/// Hamilton product of two quaternions in (w, x, y, z) order.
pub fn quaternion_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// The five-component vMF mixture of the first experiment (L(3;2) setting):
/// weights 1/4, 1/4 on the c-centers and 1/6 each on the b-centers, all
/// with kappa = 35.
pub fn experiment1_mixture() -> TargetDensity {
    let k = 35.0;
    let c1 = [1.0, 0.0, 0.0, 0.0];
    let c2 = [
        (std::f64::consts::PI / 3.0).cos(),
        (std::f64::consts::PI / 3.0).sin(),
        0.0,
        0.0,
    ];
    let b1 = [0.0, 0.0, 1.0, 0.0];
    let b2 = [
        0.0,
        0.0,
        (std::f64::consts::PI / 4.0).cos(),
        (std::f64::consts::PI / 4.0).sin(),
    ];
    let b3 = [
        0.0,
        0.0,
        (std::f64::consts::PI / 2.0).cos(),
        (std::f64::consts::PI / 2.0).sin(),
    ];
    TargetDensity::vmf_mixture(vec![
        VmfComponent { mu: c1, kappa: k, weight: 0.25 },
        VmfComponent { mu: c2, kappa: k, weight: 0.25 },
        VmfComponent { mu: b1, kappa: k, weight: 1.0 / 6.0 },
        VmfComponent { mu: b2, kappa: k, weight: 1.0 / 6.0 },
        VmfComponent { mu: b3, kappa: k, weight: 1.0 / 6.0 },
    ])
    .expect("experiment 1 mixture is valid")
}

/// The four-component vMF mixture of the second experiment (L(7;3)
/// setting): outer weights 1/3 and 2/3 over the two chart groups, inner
/// weights (1/3, 2/3) and (2/3, 1/3), kappas (65, 55, 65, 80).
pub fn experiment2_mixture() -> TargetDensity {
    let pi = std::f64::consts::PI;
    let c1 = [(2.0f64 / 3.0).sqrt(), 0.0, (1.0f64 / 3.0).sqrt(), 0.0];
    let c2 = [
        (3.0f64 / 4.0).sqrt() * (pi / 7.0).cos(),
        (3.0f64 / 4.0).sqrt() * (pi / 7.0).sin(),
        (1.0f64 / 4.0).sqrt(),
        0.0,
    ];
    let b1 = [0.0, (1.0f64 / 4.0).sqrt(), (3.0f64 / 4.0).sqrt(), 0.0];
    let b2 = [
        (1.0f64 / 7.0).sqrt(),
        (1.0f64 / 7.0).sqrt(),
        (5.0f64 / 7.0).sqrt() * (4.0 * pi / 21.0).cos(),
        (5.0f64 / 7.0).sqrt() * (4.0 * pi / 21.0).sin(),
    ];
    TargetDensity::vmf_mixture(vec![
        VmfComponent { mu: c1, kappa: 65.0, weight: 1.0 / 9.0 },
        VmfComponent { mu: c2, kappa: 55.0, weight: 2.0 / 9.0 },
        VmfComponent { mu: b1, kappa: 65.0, weight: 4.0 / 9.0 },
        VmfComponent { mu: b2, kappa: 80.0, weight: 2.0 / 9.0 },
    ])
    .expect("experiment 2 mixture is valid")
}

/// The benzene Boltzmann target U(q; 5, e1, 20, e1, e2) on S^3, symmetric
/// under the L(12;1) deck action.
pub fn benzene_boltzmann() -> TargetDensity {
    let params = BoltzmannParams::new(
        5.0,
        [1.0, 0.0, 0.0],
        20.0,
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    )
    .expect("benzene parameters are valid");
    TargetDensity::boltzmann(params, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens_geometry::deck_apply;
    use crate::special::{bessel_i1, log_bessel_i1};

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn vmf_logpdf_examples() {
        let mu = [1.0, 0.0, 0.0, 0.0];
        let perp = [0.0, 1.0, 0.0, 0.0];
        let v = vmf_logpdf(&perp, &mu, 35.0).unwrap();
        let expected = (35.0 / (4.0 * PI * PI * bessel_i1(35.0))).ln();
        assert!((v - expected).abs() <= 1e-12);
        let v = vmf_logpdf(&mu, &mu, 35.0).unwrap();
        let expected = 35.0f64.ln() + 35.0 - (4.0 * PI * PI).ln() - log_bessel_i1(35.0);
        assert!((v - expected).abs() <= 1e-12);
        assert!(vmf_logpdf(&mu, &mu, -1.0).is_err());
    }

    #[test]
    fn vmf_normalizes_on_s3() {
        // Uniform-S^3 MC oracle: E_unif[f] * vol(S^3) = 1.
        let mu = [0.3f64, -0.5, 0.2, 0.79];
        let n = dot4(&mu, &mu).sqrt();
        let mu = [mu[0] / n, mu[1] / n, mu[2] / n, mu[3] / n];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vol = 2.0 * PI * PI;
        // Uniform-sampling relative stderr is ~1%/sqrt(n/1e6) at kappa=35,
        // so 1e7 samples bring 3 sigma under the 0.01 tolerance.
        for (kappa, m) in [(5.0, 1_000_000), (35.0, 10_000_000)] {
            let mut sum = 0.0;
            for _ in 0..m {
                let z = random_sphere_point(&mut rng);
                sum += vmf_logpdf(&z.r4, &mu, kappa).unwrap().exp();
            }
            let integral = vol * sum / m as f64;
            assert!((integral - 1.0).abs() <= 0.01, "kappa={kappa}: {integral}");
        }
    }

    #[test]
    fn mixture_single_component_equals_vmf() {
        let mu = [0.0, 0.0, 1.0, 0.0];
        let t = TargetDensity::vmf_mixture(vec![VmfComponent {
            mu,
            kappa: 12.0,
            weight: 1.0,
        }])
        .unwrap();
        let x = [0.5, 0.5, 0.5, 0.5];
        assert!((t.logpdf(&x) - vmf_logpdf(&x, &mu, 12.0).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let mu = [1.0, 0.0, 0.0, 0.0];
        assert!(TargetDensity::vmf_mixture(vec![VmfComponent {
            mu,
            kappa: 1.0,
            weight: 0.7
        }])
        .is_err());
        assert!(TargetDensity::vmf_mixture(vec![]).is_err());
    }

    #[test]
    fn experiment1_dominated_by_c1_component_at_c1() {
        let t = experiment1_mixture();
        let c1 = [1.0, 0.0, 0.0, 0.0];
        let v = t.logpdf(&c1);
        let lead = (0.25f64).ln() + vmf_logpdf(&c1, &c1, 35.0).unwrap();
        // remaining components contribute a factor e^{-kappa (1 - mu.c1)} each
        assert!(v >= lead && v - lead <= 0.01, "v={v} lead={lead}");
    }

    #[test]
    fn experiment_mixtures_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vol = 2.0 * PI * PI;
        for t in [experiment1_mixture(), experiment2_mixture()] {
            let m = 10_000_000;
            let mut sum = 0.0;
            for _ in 0..m {
                let z = random_sphere_point(&mut rng);
                sum += t.logpdf(&z.r4).exp();
            }
            let integral = vol * sum / m as f64;
            assert!((integral - 1.0).abs() <= 0.01, "integral={integral}");
        }
    }

    #[test]
    fn rotation_examples() {
        let r = rotation_from_quaternion(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for (i, row) in r.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() <= 1e-15);
            }
        }
        let r = rotation_from_quaternion(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        let diag = [r[0][0], r[1][1], r[2][2]];
        assert_eq!(diag, [1.0, -1.0, -1.0]);
        assert!(rotation_from_quaternion(&[1.0, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rotation_is_orthogonal_and_double_covers() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let q = random_sphere_point(&mut rng).r4;
            let r = rotation_from_quaternion(&q).unwrap();
            // R^T R = I
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((v - expected).abs() <= 1e-9);
                }
            }
            // det R = 1
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() <= 1e-9);
            // R(-q) = R(q)
            let neg = [-q[0], -q[1], -q[2], -q[3]];
            let rn = rotation_from_quaternion(&neg).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r[i][j] - rn[i][j]).abs() <= 1e-15);
                }
            }
        }
    }

    fn benzene_params() -> BoltzmannParams {
        BoltzmannParams::new(
            5.0,
            [1.0, 0.0, 0.0],
            20.0,
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn hindered_angle_identity() {
        let p = benzene_params();
        let phi = hindered_angle(&[1.0, 0.0, 0.0, 0.0], &p).unwrap();
        assert!(phi.abs() <= 1e-15);
    }

    #[test]
    fn hindered_angle_rotation_about_axis() {
        // rotation by alpha about e1 applied to identity gives phi = alpha
        let p = benzene_params();
        for alpha in [0.3f64, 1.0, 2.5, 4.0, 6.0] {
            let q = [(alpha / 2.0).cos(), (alpha / 2.0).sin(), 0.0, 0.0];
            let phi = hindered_angle(&q, &p).unwrap();
            let d = (phi - alpha).rem_euclid(TAU);
            let d = d.min(TAU - d);
            assert!(d <= 1e-12, "alpha={alpha} phi={phi}");
        }
    }

    #[test]
    fn hindered_angle_shifts_under_deck_generator() {
        // The L(12;1) deck generator is left multiplication by the unit
        // quaternion with angle 2 pi / 12, which rotates the (e2, e3) plane
        // by pi/3: phi(g q) = phi(q) + pi/3 (mod 2 pi).
        let p = benzene_params();
        let g = [(PI / 6.0).cos(), (PI / 6.0).sin(), 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let q = random_sphere_point(&mut rng).r4;
            let (a, b) = match (hindered_angle(&q, &p), hindered_angle(&quaternion_mul(&g, &q), &p))
            {
                (Ok(a), Ok(b)) => (a, b),
                _ => continue,
            };
            let d = (b - a - PI / 3.0).rem_euclid(TAU);
            let d = d.min(TAU - d);
            assert!(d <= 1e-9, "shift violated: {a} -> {b}");
        }
    }

    #[test]
    fn deck_generator_is_quaternion_left_multiplication() {
        // sanity for the test above: left mult by g equals deck_apply k=1
        let lens = LensSpace::new(12, 1).unwrap();
        let g = [(PI / 6.0).cos(), (PI / 6.0).sin(), 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let z = random_sphere_point(&mut rng);
            let a = deck_apply(&lens, &z, 1);
            let b = quaternion_mul(&g, &z.r4);
            for i in 0..4 {
                assert!((a.r4[i] - b[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn boltzmann_potential_examples() {
        let p = benzene_params();
        assert!((boltzmann_potential(&[1.0, 0.0, 0.0, 0.0], &p) + 5.0).abs() <= 1e-12);
        // 90 degree rotation about e3 sends x0 = e1 to e2, so n . c = 0
        let q = [(PI / 4.0).cos(), 0.0, 0.0, (PI / 4.0).sin()];
        assert!(boltzmann_potential(&q, &p).abs() <= 1e-12);
    }

    #[test]
    fn boltzmann_deck_invariance() {
        let p = benzene_params();
        let lens = LensSpace::new(12, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut max_dev: f64 = 0.0;
        for _ in 0..10_000 {
            let z = random_sphere_point(&mut rng);
            let u = boltzmann_potential(&z.r4, &p);
            for k in 1..12 {
                let gz = deck_apply(&lens, &z, k);
                max_dev = max_dev.max((boltzmann_potential(&gz.r4, &p) - u).abs());
            }
        }
        assert!(max_dev <= 1e-9, "max deviation {max_dev}");
    }

    #[test]
    fn boltzmann_maximum_structure() {
        // Random-search oracle: the maximum of U sits near (n.c)^2 = 1 with
        // the rotor factor 1 - cos(6 phi) at its peak value 2.
        let p = benzene_params();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut best = f64::NEG_INFINITY;
        let mut best_q = [0.0; 4];
        for _ in 0..1_000_000 {
            let q = random_sphere_point(&mut rng).r4;
            let u = boltzmann_potential(&q, &p);
            if u > best {
                best = u;
                best_q = q;
            }
        }
        let r = rotation_from_quaternion(&best_q).unwrap();
        let n = mat_vec3(&r, &p.x0);
        let align = dot3(&n, &p.c).powi(2);
        let phi = hindered_angle(&best_q, &p).unwrap();
        assert!(best > 34.0, "best U = {best}");
        assert!(align > 0.99, "alignment {align}");
        assert!((6.0 * phi).cos() < -0.99, "rotor angle {phi}");
    }

    #[test]
    fn boltzmann_grad_matches_finite_differences() {
        let p = benzene_params();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let h = 1e-6;
        for _ in 0..200 {
            let q = random_sphere_point(&mut rng).r4;
            let g = boltzmann_potential_grad(&q, &p);
            for i in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[i] += h;
                qm[i] -= h;
                let fd = (boltzmann_potential(&qp, &p) - boltzmann_potential(&qm, &p)) / (2.0 * h);
                let scale = fd.abs().max(1.0);
                assert!((fd - g[i]).abs() / scale <= 1e-5, "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn symmetrize_fixed_point_and_reindexing() {
        let lens = LensSpace::new(3, 2).unwrap();
        let sym = TargetDensity::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = random_sphere_point(&mut rng);
        assert_eq!(symmetrize_logpdf(&lens, &sym, &z), sym.logpdf(&z.r4));
        let t = experiment1_mixture();
        for _ in 0..200 {
            let z = random_sphere_point(&mut rng);
            let base = symmetrize_logpdf(&lens, &t, &z);
            for k in 0..3 {
                let gz = deck_apply(&lens, &z, k);
                assert!((symmetrize_logpdf(&lens, &t, &gz) - base).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn symmetrize_single_vmf_explicit() {
        let lens = LensSpace::new(3, 2).unwrap();
        let mu = [0.3f64, 0.1, -0.7, 0.64];
        let n = dot4(&mu, &mu).sqrt();
        let mu = [mu[0] / n, mu[1] / n, mu[2] / n, mu[3] / n];
        let kappa = 7.0;
        let t = TargetDensity::vmf_mixture(vec![VmfComponent {
            mu,
            kappa,
            weight: 1.0,
        }])
        .unwrap();
        let z = SpherePoint::from_r4(mu);
        let mut sum = 0.0;
        for k in 0..3 {
            let gz = deck_apply(&lens, &z, k);
            sum += vmf_logpdf(&gz.r4, &mu, kappa).unwrap().exp();
        }
        let expected = (sum / 3.0).ln();
        assert!((symmetrize_logpdf(&lens, &t, &z) - expected).abs() <= 1e-12);
    }

    #[test]
    fn pushforward_of_uniform_is_constant() {
        let lens = LensSpace::new(7, 3).unwrap();
        let t = TargetDensity::uniform();
        let expected = (1.0 / (4.0 * PI * PI)).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..100 {
            for chart in [Chart::One, Chart::Two] {
                let pt = uniform_torus_point(chart, &mut rng);
                assert!((pushforward_logpdf(&lens, &t, &pt) - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pushforward_continuous_across_gluing() {
        let lens = LensSpace::new(3, 2).unwrap();
        let t = experiment1_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let theta = rng.gen::<f64>() * TAU;
            let phi = rng.gen::<f64>() * TAU;
            let a = TorusPoint::new(Chart::One, theta, phi.cos(), phi.sin());
            let (t2, f2) = crate::lens_geometry::boundary_glue(&lens, theta, phi);
            let b = TorusPoint::new(Chart::Two, t2, f2.cos(), f2.sin());
            let va = pushforward_logpdf(&lens, &t, &a);
            let vb = pushforward_logpdf(&lens, &t, &b);
            assert!((va - vb).abs() <= 1e-9, "{va} vs {vb}");
        }
    }

    #[test]
    fn pushforward_value_at_b1_image() {
        let lens = LensSpace::new(3, 2).unwrap();
        let t = experiment1_mixture();
        let b1 = SpherePoint::from_r4([0.0, 0.0, 1.0, 0.0]);
        let (theta, rho, phi) = crate::lens_geometry::chart_inverse(&lens, Chart::One, &b1).unwrap();
        let pt = TorusPoint::new(Chart::One, theta, rho * phi.cos(), rho * phi.sin());
        let expected = (0.5f64).ln() + symmetrize_logpdf(&lens, &t, &b1);
        assert!((pushforward_logpdf(&lens, &t, &pt) - expected).abs() <= 1e-9);
    }

    #[test]
    fn pushforward_grad_matches_finite_differences() {
        let lens = LensSpace::new(3, 2).unwrap();
        let t = experiment1_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = 1e-6;
        for _ in 0..200 {
            let mut pt = uniform_torus_point(Chart::One, &mut rng);
            pt.x *= 0.95;
            pt.y *= 0.95;
            let g = pushforward_grad(&lens, &t, &pt);
            for i in 0..3 {
                let mut pp = pt;
                let mut pm = pt;
                match i {
                    0 => {
                        pp.theta += h;
                        pm.theta -= h;
                    }
                    1 => {
                        pp.x += h;
                        pm.x -= h;
                    }
                    _ => {
                        pp.y += h;
                        pm.y -= h;
                    }
                }
                let fd = (pushforward_logpdf(&lens, &t, &pp) - pushforward_logpdf(&lens, &t, &pm))
                    / (2.0 * h);
                let scale = fd.abs().max(1.0);
                assert!((fd - g[i]).abs() / scale <= 1e-4, "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn normalizers_uniform_target() {
        let lens = LensSpace::new(3, 2).unwrap();
        let t = TargetDensity::uniform();
        let n = estimate_normalizers(&lens, &t, 20_000, 7).unwrap();
        assert!((n.i1 - 0.5).abs() <= 1e-9);
        assert!((n.i2 - 0.5).abs() <= 1e-9);
        assert!((n.mixture_weight() - 0.5).abs() <= 1e-9);
    }

    #[test]
    fn normalizers_reject_small_n() {
        let lens = LensSpace::new(3, 2).unwrap();
        assert!(estimate_normalizers(&lens, &TargetDensity::uniform(), 100, 0).is_err());
    }

    #[test]
    fn normalizers_sum_to_one_for_normalized_targets() {
        let lens1 = LensSpace::new(3, 2).unwrap();
        let n = estimate_normalizers(&lens1, &experiment1_mixture(), 200_000, 7).unwrap();
        let se = (n.stderr1 * n.stderr1 + n.stderr2 * n.stderr2).sqrt();
        assert!(
            (n.i1 + n.i2 - 1.0).abs() <= 3.0 * se,
            "I1+I2 = {} +- {se}",
            n.i1 + n.i2
        );
        assert!((n.i2 - 0.5).abs() <= 0.05, "exp1 I2 = {}", n.i2);
        let lens2 = LensSpace::new(7, 3).unwrap();
        let n = estimate_normalizers(&lens2, &experiment2_mixture(), 200_000, 7).unwrap();
        let se = (n.stderr1 * n.stderr1 + n.stderr2 * n.stderr2).sqrt();
        assert!((n.i1 + n.i2 - 1.0).abs() <= 3.0 * se);
        assert!((n.i2 - 0.3).abs() <= 0.05, "exp2 I2 = {}", n.i2);
    }

    #[test]
    fn normalized_logpdf_uniform() {
        let lens = LensSpace::new(3, 2).unwrap();
        let pf =
            PushforwardDensity::estimate(lens, TargetDensity::uniform(), 20_000, 3).unwrap();
        let pt = TorusPoint::new(Chart::One, 1.0, 0.2, -0.3);
        let expected = (1.0 / (2.0 * PI * PI)).ln();
        assert!((pf.normalized_logpdf(&pt) - expected).abs() <= 1e-9);
    }

    #[test]
    fn boltzmann_mixture_weight_near_half() {
        let lens = LensSpace::new(12, 1).unwrap();
        let n = estimate_normalizers(&lens, &benzene_boltzmann(), 200_000, 7).unwrap();
        let w = n.mixture_weight();
        assert!((w - 0.5).abs() <= 0.05, "boltz w = {w}");
    }
}
