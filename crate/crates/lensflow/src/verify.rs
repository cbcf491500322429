//! Self-contained property suites behind the `verify` subcommand: each
//! check re-derives an invariant from scratch and reports pass/fail, so a
//! build can be sanity-checked without the test harness.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::builtin_experiment;
use crate::flow_model::{
    flow_forward, prior_sample, FlowTransform, PriorParams,
};
use crate::lens_geometry::{
    boundary_glue, chart_inverse, chart_lift, deck_apply, quotient_equal, torus_to_sphere, Chart,
    LensSpace, SpherePoint, TorusPoint, TAU,
};
use crate::target_densities::{
    boltzmann_potential, random_sphere_point, uniform_torus_point, BoltzmannParams,
    PushforwardDensity, TargetDensity,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Densities,
    Flow,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometry" => Ok(Suite::Geometry),
            "densities" => Ok(Suite::Densities),
            "flow" => Ok(Suite::Flow),
            "all" => Ok(Suite::All),
            other => Err(format!(
                "unknown suite '{other}' (expected geometry, densities, flow, or all)"
            )),
        }
    }
}

#[derive(Debug)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(results: &mut Vec<PropertyResult>, name: &str, passed: bool, detail: String) {
    results.push(PropertyResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

const LENSES: [(i64, i64); 4] = [(3, 2), (7, 3), (12, 1), (2, 1)];

fn random_torus(rng: &mut impl Rng) -> TorusPoint {
    let chart = if rng.gen::<bool>() { Chart::One } else { Chart::Two };
    uniform_torus_point(chart, rng)
}

pub fn geometry_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4101);
    for (p, q) in LENSES {
        let lens = LensSpace::new(p, q).expect("valid lens parameters");
        let tag = format!("L({p};{q})");

        check(
            &mut out,
            &format!("{tag} gluing matrix is unimodular"),
            lens.gluing_det() == 1,
            format!("det A = {}", lens.gluing_det()),
        );

        let mut order_ok = true;
        let mut free_ok = true;
        for _ in 0..200 {
            let x = random_sphere_point(&mut rng);
            let back = deck_apply(&lens, &x, p);
            if back.dist(&x) > 1e-12 {
                order_ok = false;
            }
            for k in 1..p {
                if deck_apply(&lens, &x, k).dist(&x) < 1e-6 {
                    free_ok = false;
                }
            }
        }
        check(
            &mut out,
            &format!("{tag} deck action has order p"),
            order_ok,
            "g^p = id on 200 random points".into(),
        );
        check(
            &mut out,
            &format!("{tag} deck action is free"),
            free_ok,
            "g^k moves every point for 0 < k < p".into(),
        );

        let mut roundtrip_ok = true;
        let mut fiber_ok = true;
        for _ in 0..300 {
            let t = random_torus(&mut rng);
            let lift = torus_to_sphere(&lens, &t);
            let (bt, br, bp) = chart_inverse(&lens, t.chart, &lift).expect("in chart");
            let lift2 = chart_lift(&lens, t.chart, bt, br, bp).expect("valid");
            if !quotient_equal(&lens, &lift, &lift2) {
                roundtrip_ok = false;
            }
            for k in 0..p {
                let moved = deck_apply(&lens, &lift, k);
                let (mt, mr, mp) = chart_inverse(&lens, t.chart, &moved).expect("in chart");
                let d_theta = (mt - bt).abs().min(TAU - (mt - bt).abs());
                let d_phi = (mp - bp).abs().min(TAU - (mp - bp).abs());
                if d_theta > 1e-8 || (mr - br).abs() > 1e-8 || d_phi > 1e-8 {
                    fiber_ok = false;
                }
            }
        }
        check(
            &mut out,
            &format!("{tag} chart roundtrip closes"),
            roundtrip_ok,
            "f_i^-1 then f_i lands in the same fiber, 300 points".into(),
        );
        check(
            &mut out,
            &format!("{tag} chart inverse is fiber-invariant"),
            fiber_ok,
            "same coordinates from every deck translate".into(),
        );

        let mut glue_ok = true;
        for _ in 0..300 {
            let theta = rng.gen::<f64>() * TAU;
            let phi = rng.gen::<f64>() * TAU;
            let (theta2, phi2) = boundary_glue(&lens, theta, phi);
            let a = chart_lift(&lens, Chart::One, theta, 1.0, phi).expect("boundary point");
            let b = chart_lift(&lens, Chart::Two, theta2, 1.0, phi2).expect("boundary point");
            if !quotient_equal(&lens, &a, &b) {
                glue_ok = false;
            }
        }
        check(
            &mut out,
            &format!("{tag} boundary gluing is consistent"),
            glue_ok,
            "f1 and f2 agree on the boundary torus through A, 300 points".into(),
        );
    }

    // negative control: a chart-2 convention with the disk phase sign
    // flipped must break the gluing consistency
    let lens = LensSpace::new(3, 2).unwrap();
    let corrupted_f2 = |theta: f64, phi: f64| -> SpherePoint {
        let p = lens.p() as f64;
        let q = lens.q() as f64;
        let z1 = Complex64::from_polar((0.5f64).sqrt(), theta / p);
        // wrong sign: +phi instead of -phi
        let z2 = Complex64::from_polar((0.5f64).sqrt(), phi + q / p * theta);
        SpherePoint::from_c2([z1, z2])
    };
    let mut rng2 = ChaCha8Rng::seed_from_u64(4102);
    let mut mismatch_seen = false;
    for _ in 0..100 {
        let theta = rng2.gen::<f64>() * TAU;
        let phi = rng2.gen::<f64>() * TAU;
        let a = chart_lift(&lens, Chart::One, theta, 1.0, phi).expect("boundary point");
        let (theta2, phi2) = boundary_glue(&lens, theta, phi);
        let b = corrupted_f2(theta2, phi2);
        if !quotient_equal(&lens, &a, &b) {
            mismatch_seen = true;
        }
    }
    check(
        &mut out,
        "negative control: corrupted chart convention is caught",
        mismatch_seen,
        "sign-flipped chart 2 fails gluing consistency".into(),
    );

    out
}

fn normalization_check(
    out: &mut Vec<PropertyResult>,
    name: &str,
    target: TargetDensity,
    lens: LensSpace,
    expected_w: f64,
    check_sum: bool,
) {
    let pf = PushforwardDensity::estimate(lens, target, 200_000, 2718).expect("estimate");
    let nz = &pf.normalizers;
    if check_sum {
        let sum = nz.i1 + nz.i2;
        let sigma = (nz.stderr1 * nz.stderr1 + nz.stderr2 * nz.stderr2).sqrt();
        check(
            out,
            &format!("{name}: I1 + I2 = 1"),
            (sum - 1.0).abs() <= 3.0 * sigma,
            format!("I1 + I2 = {sum:.5} (3 sigma = {:.5})", 3.0 * sigma),
        );
    }
    let w = nz.mixture_weight();
    check(
        out,
        &format!("{name}: mixture weight near {expected_w}"),
        (w - expected_w).abs() <= 0.05,
        format!("w = {w:.4}"),
    );
}

pub fn densities_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();

    let exp1 = builtin_experiment("exp1").unwrap();
    normalization_check(
        &mut out,
        "exp1",
        exp1.target.build().unwrap(),
        exp1.lens_space().unwrap(),
        0.5,
        true,
    );
    let exp2 = builtin_experiment("exp2").unwrap();
    normalization_check(
        &mut out,
        "exp2",
        exp2.target.build().unwrap(),
        exp2.lens_space().unwrap(),
        0.3,
        true,
    );
    let boltz = builtin_experiment("boltz").unwrap();
    normalization_check(
        &mut out,
        "boltz",
        boltz.target.build().unwrap(),
        boltz.lens_space().unwrap(),
        0.5,
        false, // Boltzmann target is unnormalized on S^3
    );

    // deck invariance of the Boltzmann potential under the L(12;1) action
    let params = BoltzmannParams::new(5.0, [1.0, 0.0, 0.0], 20.0, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        .unwrap();
    let lens = LensSpace::new(12, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4103);
    let mut max_diff = 0.0f64;
    for _ in 0..10_000 {
        let x = random_sphere_point(&mut rng);
        let u = boltzmann_potential(&x.r4, &params);
        for k in 1..12 {
            let moved = deck_apply(&lens, &x, k);
            max_diff = max_diff.max((boltzmann_potential(&moved.r4, &params) - u).abs());
        }
    }
    check(
        &mut out,
        "boltzmann potential is deck-invariant on L(12;1)",
        max_diff <= 1e-9,
        format!("max |U(gq) - U(q)| = {max_diff:.2e} over 10^4 points"),
    );

    // pushforward gradient against central differences
    let pf = PushforwardDensity::estimate(
        exp1.lens_space().unwrap(),
        exp1.target.build().unwrap(),
        20_000,
        2718,
    )
    .unwrap();
    let mut grad_ok = true;
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..50 {
        let t = random_torus(&mut rng);
        if t.disk_norm_sq() > 0.96 {
            continue;
        }
        let g = pf.grad(&t);
        let coords = [t.theta, t.x, t.y];
        for i in 0..3 {
            let mut cp = coords;
            let mut cm = coords;
            cp[i] += h;
            cm[i] -= h;
            let fp = pf.logpdf(&TorusPoint::new(t.chart, cp[0], cp[1], cp[2]));
            let fm = pf.logpdf(&TorusPoint::new(t.chart, cm[0], cm[1], cm[2]));
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1.0);
            worst = worst.max(rel);
            if rel > 1e-4 {
                grad_ok = false;
            }
        }
    }
    check(
        &mut out,
        "pushforward gradient matches finite differences",
        grad_ok,
        format!("worst relative error {worst:.2e} over 50 points"),
    );

    out
}

pub fn flow_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4104);

    let flow = FlowTransform::zeros(6);
    let mut identity_ok = true;
    for _ in 0..200 {
        let t = uniform_torus_point(Chart::One, &mut rng);
        let (o, ld) = flow_forward(&flow, [t.theta, t.x, t.y]);
        if (o[0] - t.theta).abs() > 1e-12
            || (o[1] - t.x).abs() > 1e-12
            || (o[2] - t.y).abs() > 1e-12
            || ld.abs() > 1e-12
        {
            identity_ok = false;
        }
    }
    check(
        &mut out,
        "zero-initialized flow is the identity",
        identity_ok,
        "exact identity with zero log-determinant, 200 points".into(),
    );

    let mut logdet_ok = true;
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..20 {
        let mut flow = FlowTransform::zeros(2);
        for layer in flow.layers.iter_mut() {
            for w in layer
                .scale
                .w1
                .iter_mut()
                .chain(layer.scale.w2.iter_mut())
                .chain(layer.translate.w1.iter_mut())
                .chain(layer.translate.w2.iter_mut())
            {
                *w = (rng.gen::<f64>() - 0.5) * 0.8;
            }
        }
        let z = [
            rng.gen::<f64>() * TAU,
            (rng.gen::<f64>() - 0.5) * 0.9,
            (rng.gen::<f64>() - 0.5) * 0.9,
        ];
        if z[1] * z[1] + z[2] * z[2] >= 0.9 {
            continue;
        }
        let (_, ld) = flow_forward(&flow, z);
        let mut jac = [[0.0; 3]; 3];
        for col in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[col] += h;
            zm[col] -= h;
            let (op, _) = flow_forward(&flow, zp);
            let (om, _) = flow_forward(&flow, zm);
            let dtheta = op[0] - om[0];
            jac[0][col] = (dtheta - TAU * (dtheta / TAU).round()) / (2.0 * h);
            for row in 1..3 {
                jac[row][col] = (op[row] - om[row]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
        let rel = (det.abs().ln() - ld).abs() / ld.abs().max(1.0);
        worst = worst.max(rel);
        if rel > 1e-4 {
            logdet_ok = false;
        }
    }
    check(
        &mut out,
        "flow log-determinant matches finite differences",
        logdet_ok,
        format!("worst relative error {worst:.2e} over 20 random flows"),
    );

    let prior = PriorParams::new(5.0, 0.25).expect("valid prior");
    let n = 200_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let t = uniform_torus_point(Chart::One, &mut rng);
        sum += prior.logpdf([t.theta, t.x, t.y]).expect("in domain").exp();
    }
    let integral = TAU * std::f64::consts::PI * sum / n as f64;
    check(
        &mut out,
        "prior density integrates to one",
        (integral - 1.0).abs() <= 0.02,
        format!("MC integral = {integral:.4} at n = {n}"),
    );

    let mut domain_ok = true;
    let samples = prior_sample(&prior, 50_000, &mut rng).expect("sampling");
    for z in &samples {
        if !(0.0..TAU).contains(&z[0]) || z[1] * z[1] + z[2] * z[2] > 1.0 {
            domain_ok = false;
        }
    }
    check(
        &mut out,
        "prior samples stay in the solid torus",
        domain_ok,
        "50,000 samples".into(),
    );

    out
}

pub fn run_suite(suite: Suite) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Geometry | Suite::All) {
        out.extend(geometry_suite());
    }
    if matches!(suite, Suite::Densities | Suite::All) {
        out.extend(densities_suite());
    }
    if matches!(suite, Suite::Flow | Suite::All) {
        out.extend(flow_suite());
    }
    out
}
