//! Exact arithmetic and differential-geometry kernels for the lens space
//! L(p;q): deck action, Heegaard chart maps and inverses, boundary gluing,
//! and coordinate conversions between C^2 and R^4 representations of S^3.

use num_complex::Complex64;
use thiserror::Error;

pub const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Unit-norm tolerance for sphere points.
pub const UNIT_TOL: f64 = 1e-9;
/// Tolerance for quotient (fiber) equality.
pub const QUOTIENT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid lens parameters p={p}, q={q}: {reason}")]
    BadLens { p: i64, q: i64, reason: String },
    #[error("rho={0} outside [0,1]")]
    RhoOutOfRange(f64),
    #[error("point outside chart {chart} region: |z_{chart}|^2 = {norm_sq}")]
    OutsideChart { chart: u8, norm_sq: f64 },
    #[error("point not on S^3: |z|^2 = {0}")]
    NotOnSphere(f64),
}

/// Reduce an angle to [0, 2*pi) by floored modulus.
pub fn wrap_angle(t: f64) -> f64 {
    let w = t.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// The lens space L(p;q) together with the derived integers r = q^{-1} mod p
/// and s = (r*q - 1)/p. The gluing matrix is A = [[r, p], [s, q]] with det 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LensSpace {
    p: i64,
    q: i64,
    r: i64,
    s: i64,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl LensSpace {
    pub fn new(p: i64, q: i64) -> Result<Self, GeometryError> {
        if p < 2 {
            return Err(GeometryError::BadLens {
                p,
                q,
                reason: "p must be >= 2".into(),
            });
        }
        if q < 1 || q >= p {
            return Err(GeometryError::BadLens {
                p,
                q,
                reason: "q must satisfy 1 <= q < p".into(),
            });
        }
        if gcd(p, q) != 1 {
            return Err(GeometryError::BadLens {
                p,
                q,
                reason: "gcd(p,q) != 1: the Z_p action is not free".into(),
            });
        }
        let r = (0..p)
            .find(|&r| (r * q).rem_euclid(p) == 1)
            .expect("inverse exists when gcd(p,q)=1");
        let s = (r * q - 1) / p;
        debug_assert_eq!(r * q - p * s, 1);
        Ok(LensSpace { p, q, r, s })
    }

    pub fn p(&self) -> i64 {
        self.p
    }
    pub fn q(&self) -> i64 {
        self.q
    }
    pub fn r(&self) -> i64 {
        self.r
    }
    pub fn s(&self) -> i64 {
        self.s
    }

    /// det A = r*q - p*s.
    pub fn gluing_det(&self) -> i64 {
        self.r * self.q - self.p * self.s
    }
}

/// A point of S^3 carried in both C^2-pair and R^4 (quaternion) coordinates.
///
/// The fixed identification is psi: (z1, z2) = (w + i x, y + i z).
#[derive(Debug, Clone, Copy)]
pub struct SpherePoint {
    pub c2: [Complex64; 2],
    pub r4: [f64; 4],
}

/// psi: C^2 coordinates to cartesian, (z1,z2) = (w+ix, y+iz).
pub fn c2_to_r4(z: [Complex64; 2]) -> [f64; 4] {
    [z[0].re, z[0].im, z[1].re, z[1].im]
}

/// Inverse of [`c2_to_r4`]; exact bit-level roundtrip.
pub fn r4_to_c2(v: [f64; 4]) -> [Complex64; 2] {
    [Complex64::new(v[0], v[1]), Complex64::new(v[2], v[3])]
}

impl SpherePoint {
    pub fn from_c2(z: [Complex64; 2]) -> Self {
        SpherePoint {
            c2: z,
            r4: c2_to_r4(z),
        }
    }

    pub fn from_r4(v: [f64; 4]) -> Self {
        SpherePoint {
            c2: r4_to_c2(v),
            r4: v,
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.r4.iter().map(|a| a * a).sum()
    }

    pub fn check_unit(&self) -> Result<(), GeometryError> {
        let n = self.norm_sq();
        if (n - 1.0).abs() <= UNIT_TOL {
            Ok(())
        } else {
            Err(GeometryError::NotOnSphere(n))
        }
    }

    pub fn dist(&self, other: &SpherePoint) -> f64 {
        self.r4
            .iter()
            .zip(other.r4.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Chart index of the genus-1 Heegaard splitting: chart 1 covers
/// {|z1|^2 <= 1/2}, chart 2 covers {|z2|^2 <= 1/2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Chart {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Chart {
    pub fn index(&self) -> usize {
        match self {
            Chart::One => 0,
            Chart::Two => 1,
        }
    }

    pub fn label(&self) -> u8 {
        match self {
            Chart::One => 1,
            Chart::Two => 2,
        }
    }

    pub fn other(&self) -> Chart {
        match self {
            Chart::One => Chart::Two,
            Chart::Two => Chart::One,
        }
    }
}

/// A point of the solid torus S^1 x D^2 of one chart, with the disk in
/// cartesian coordinates.
#[derive(Debug, Clone, Copy)]
pub struct TorusPoint {
    pub chart: Chart,
    pub theta: f64,
    pub x: f64,
    pub y: f64,
}

impl TorusPoint {
    pub fn new(chart: Chart, theta: f64, x: f64, y: f64) -> Self {
        TorusPoint { chart, theta, x, y }
    }

    pub fn disk_norm_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn is_valid(&self) -> bool {
        self.theta.is_finite()
            && self.x.is_finite()
            && self.y.is_finite()
            && self.disk_norm_sq() <= 1.0 + 1e-12
    }
}

/// Apply the generating Z_p deck transformation k times:
/// (z1, z2) -> (e^{2 pi i k / p} z1, e^{2 pi i k q / p} z2).
pub fn deck_apply(lens: &LensSpace, z: &SpherePoint, k: i64) -> SpherePoint {
    let k = k.rem_euclid(lens.p);
    let a = TAU * k as f64 / lens.p as f64;
    let g1 = Complex64::from_polar(1.0, a);
    let g2 = Complex64::from_polar(1.0, a * lens.q as f64);
    SpherePoint::from_c2([z.c2[0] * g1, z.c2[1] * g2])
}

/// The deck rotation as a 4x4 block-rotation matrix in R^4 coordinates.
pub fn deck_matrix(lens: &LensSpace, k: i64) -> [[f64; 4]; 4] {
    let k = k.rem_euclid(lens.p);
    let a = TAU * k as f64 / lens.p as f64;
    let b = a * lens.q as f64;
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    [
        [ca, -sa, 0.0, 0.0],
        [sa, ca, 0.0, 0.0],
        [0.0, 0.0, cb, -sb],
        [0.0, 0.0, sb, cb],
    ]
}

/// Lift a chart point to S^3 (the maps f_i with the quotient brackets removed).
///
/// chart 1: ( sqrt(1/2) rho e^{i (phi + (r/p) theta)},
///            sqrt(1 - rho^2/2) e^{i theta / p} )
/// chart 2: ( sqrt(1 - rho^2/2) e^{i theta / p},
///            sqrt(1/2) rho e^{i (-phi + (q/p) theta)} )
pub fn chart_lift(
    lens: &LensSpace,
    chart: Chart,
    theta: f64,
    rho: f64,
    phi: f64,
) -> Result<SpherePoint, GeometryError> {
    if !(0.0..=1.0 + 1e-12).contains(&rho) {
        return Err(GeometryError::RhoOutOfRange(rho));
    }
    let rho = rho.min(1.0);
    let p = lens.p as f64;
    let small = (0.5f64).sqrt() * rho;
    let big = (1.0 - 0.5 * rho * rho).sqrt();
    let z = match chart {
        Chart::One => {
            let z1 = Complex64::from_polar(small, phi + (lens.r as f64 / p) * theta);
            let z2 = Complex64::from_polar(big, theta / p);
            [z1, z2]
        }
        Chart::Two => {
            let z1 = Complex64::from_polar(big, theta / p);
            let z2 = Complex64::from_polar(small, -phi + (lens.q as f64 / p) * theta);
            [z1, z2]
        }
    };
    Ok(SpherePoint::from_c2(z))
}

/// Inverse chart map h_i down to the quotient torus coordinates
/// (theta, rho, phi), each angle reduced to [0, 2*pi).
///
/// phi is assembled from both arguments before wrapping so that the result
/// is invariant along fibers of the covering map. At the core circle
/// (rho = 0) the fiber coordinate phi is degenerate and returned as 0.
pub fn chart_inverse(
    lens: &LensSpace,
    chart: Chart,
    z: &SpherePoint,
) -> Result<(f64, f64, f64), GeometryError> {
    z.check_unit()?;
    let p = lens.p as f64;
    let (inner, outer) = match chart {
        Chart::One => (z.c2[0], z.c2[1]),
        Chart::Two => (z.c2[1], z.c2[0]),
    };
    let nsq = inner.norm_sqr();
    if nsq > 0.5 + UNIT_TOL {
        return Err(GeometryError::OutsideChart {
            chart: chart.label(),
            norm_sq: nsq,
        });
    }
    let rho = (2.0 * nsq).sqrt().min(1.0);
    let theta = wrap_angle(p * outer.arg());
    let phi = if rho < 1e-15 {
        0.0
    } else {
        match chart {
            Chart::One => wrap_angle(inner.arg() - lens.r as f64 * outer.arg()),
            Chart::Two => wrap_angle(lens.q as f64 * outer.arg() - inner.arg()),
        }
    };
    Ok((theta, rho, phi))
}

/// The boundary gluing A: (theta, phi) -> (r theta + p phi, s theta + q phi),
/// both reduced mod 2*pi.
pub fn boundary_glue(lens: &LensSpace, theta: f64, phi: f64) -> (f64, f64) {
    let t = lens.r as f64 * theta + lens.p as f64 * phi;
    let f = lens.s as f64 * theta + lens.q as f64 * phi;
    (wrap_angle(t), wrap_angle(f))
}

/// True iff a and b lie in the same fiber of the covering map, i.e. some
/// deck image of a is within [`QUOTIENT_TOL`] of b.
pub fn quotient_equal(lens: &LensSpace, a: &SpherePoint, b: &SpherePoint) -> bool {
    (0..lens.p).any(|k| deck_apply(lens, a, k).dist(b) <= QUOTIENT_TOL)
}

/// Lift a torus point to S^3: convert the disk coordinates to polar, then
/// apply [`chart_lift`]. At rho = 0 the fiber angle is taken as 0.
pub fn torus_to_sphere(lens: &LensSpace, t: &TorusPoint) -> SpherePoint {
    let rho = t.disk_norm_sq().sqrt().min(1.0);
    let phi = if rho < 1e-15 {
        0.0
    } else {
        t.y.atan2(t.x)
    };
    chart_lift(lens, t.chart, t.theta, rho, phi).expect("rho clamped to [0,1]")
}

/// Jacobian of [`torus_to_sphere`] in R^4 coordinates: 4 rows (w,x,y,z) by
/// 3 columns (theta, x, y).
///
/// Uses the cartesian form of the charts: for chart 1,
///   z1 = sqrt(1/2) (x + i y) e^{i (r/p) theta},  z2 = g e^{i theta/p},
/// with g = sqrt(1 - (x^2+y^2)/2), and symmetrically for chart 2 with
/// z2 = sqrt(1/2) (x - i y) e^{i (q/p) theta}.
pub fn sphere_jacobian(lens: &LensSpace, t: &TorusPoint) -> [[f64; 3]; 4] {
    let p = lens.p as f64;
    let half = (0.5f64).sqrt();
    let g = (1.0 - 0.5 * t.disk_norm_sq()).sqrt();
    let (so, co) = (t.theta / p).sin_cos(); // outer factor e^{i theta/p}
    let dg_dx = -0.5 * t.x / g;
    let dg_dy = -0.5 * t.y / g;
    // outer = g e^{i theta/p}: rows (re, im)
    let outer_rows = |row_re: usize, row_im: usize, jac: &mut [[f64; 3]; 4]| {
        jac[row_re][0] = -g * so / p;
        jac[row_im][0] = g * co / p;
        jac[row_re][1] = dg_dx * co;
        jac[row_im][1] = dg_dx * so;
        jac[row_re][2] = dg_dy * co;
        jac[row_im][2] = dg_dy * so;
    };
    let mut jac = [[0.0; 3]; 4];
    match t.chart {
        Chart::One => {
            let a = lens.r as f64 / p;
            let (sa, ca) = (a * t.theta).sin_cos();
            // z1 = half (x + i y)(ca + i sa)
            // re = half (x ca - y sa), im = half (x sa + y ca)
            jac[0][0] = half * a * (-t.x * sa - t.y * ca);
            jac[1][0] = half * a * (t.x * ca - t.y * sa);
            jac[0][1] = half * ca;
            jac[1][1] = half * sa;
            jac[0][2] = -half * sa;
            jac[1][2] = half * ca;
            outer_rows(2, 3, &mut jac);
        }
        Chart::Two => {
            let b = lens.q as f64 / p;
            let (sb, cb) = (b * t.theta).sin_cos();
            // z2 = half (x - i y)(cb + i sb)
            // re = half (x cb + y sb), im = half (x sb - y cb)
            jac[2][0] = half * b * (-t.x * sb + t.y * cb);
            jac[3][0] = half * b * (t.x * cb + t.y * sb);
            jac[2][1] = half * cb;
            jac[3][1] = half * sb;
            jac[2][2] = half * sb;
            jac[3][2] = -half * cb;
            outer_rows(0, 1, &mut jac);
        }
    }
    jac
}
