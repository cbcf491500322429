use lensflow::lens_geometry::{Chart, LensSpace, TorusPoint, TAU};
use lensflow::target_densities::{experiment2_mixture, PushforwardDensity};

// grid over one chart: theta x disk (polar), returns (logq, theta, x, y, cell_mass_weight)
fn grid(pf: &PushforwardDensity, chart: Chart) -> Vec<(f64, f64, f64, f64, f64)> {
    let (nt, nr, na) = (96, 20, 48);
    let mut out = Vec::with_capacity(nt * nr * na);
    for it in 0..nt {
        let theta = TAU * (it as f64 + 0.5) / nt as f64;
        for ir in 0..nr {
            let r0 = ir as f64 / nr as f64;
            let r1 = (ir + 1) as f64 / nr as f64;
            let r = 0.5 * (r0 + r1);
            let area = 0.5 * (r1 * r1 - r0 * r0) * TAU / na as f64 * TAU / nt as f64;
            for ia in 0..na {
                let ang = TAU * (ia as f64 + 0.5) / na as f64;
                let t = TorusPoint { chart, theta, x: r * ang.cos(), y: r * ang.sin() };
                out.push((pf.normalized_logpdf(&t), theta, t.x, t.y, area));
            }
        }
    }
    out
}

fn main() {
    let lens = LensSpace::new(7, 3).unwrap();
    let pf = PushforwardDensity::estimate(lens, experiment2_mixture(), 200_000, 99).unwrap();
    for (chart, dom, sec) in [(Chart::One, 0.0f64, 4.19f64), (Chart::Two, 3.14, 0.0)] {
        let g = grid(&pf, chart);
        println!("chart {:?}", chart);
        for beta in [0.0, 0.1, 0.2, 0.3, 0.5] {
            let inv = 1.0 / (1.0 + beta);
            // tempered model logpdf up to constant: inv * logq; normalize on grid
            let mut lm: Vec<f64> = g.iter().map(|c| inv * c.0).collect();
            let logz = {
                let m = lm.iter().cloned().fold(f64::MIN, f64::max);
                m + g.iter().zip(&lm).map(|(c, l)| (l - m).exp() * c.4).sum::<f64>().ln()
            };
            for l in lm.iter_mut() { *l -= logz; }
            // KL(model||target), cutoff = 99th pct of logq under model mass
            let mut kl = 0.0;
            let mut cells: Vec<(f64, f64)> = Vec::with_capacity(g.len()); // (logq, model mass)
            for (c, l) in g.iter().zip(&lm) {
                let pm = (*l).exp() * c.4;
                kl += pm * (*l - c.0);
                cells.push((c.0, pm));
            }
            cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut acc = 0.0;
            let mut cutoff = f64::NAN;
            for (lq, pm) in &cells {
                acc += pm;
                if acc >= 0.01 { cutoff = *lq; break; }
            }
            // kept model mass near each mode (torus distance on theta only, window 1.0)
            let (mut mdom, mut msec, mut moth) = (0.0, 0.0, 0.0);
            for (c, l) in g.iter().zip(&lm) {
                if c.0 >= cutoff {
                    let pm = (*l).exp() * c.4;
                    let dd = {
                        let d = (c.1 - dom).rem_euclid(TAU);
                        d.min(TAU - d)
                    };
                    let ds = {
                        let d = (c.1 - sec).rem_euclid(TAU);
                        d.min(TAU - d)
                    };
                    if dd < 1.0 { mdom += pm } else if ds < 1.0 { msec += pm } else { moth += pm }
                }
            }
            let tot = mdom + msec + moth;
            println!(
                "  beta {beta:.1}: KL(temper||target) {kl:.3}  cutoff {cutoff:.3}  kept split dom {:.3} sec {:.3} other {:.3}",
                mdom / tot, msec / tot, moth / tot
            );
        }
    }
}
