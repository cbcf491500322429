//! Training loop for one solid-torus flow: initialization, Adam, and the
//! annealed reverse-KL objective.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_model::{
    flow_backward_gradients, prior_sample, CouplingLayer, FlowError, FlowTransform, LayerGrads, LayerKind,
    MlpParams, PriorParams, HIDDEN,
};
use crate::lens_geometry::Chart;
use crate::target_densities::TorusLogDensity;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("training aborted after {0} consecutive non-finite epochs")]
    Diverged(usize),
    #[error("invalid training configuration: {0}")]
    BadConfig(&'static str),
}

/// Hyperparameters of one training run (shared by both tori).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta0: f64,
    pub t_anneal: usize,
    pub n_pairs: usize,
    pub prior_kappa: f64,
    pub prior_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            batch: 6000,
            lr: 1e-3,
            beta0: 0.5,
            t_anneal: 300,
            n_pairs: 6,
            prior_kappa: 5.0,
            prior_sigma: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be positive"));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive"));
        }
        if !(self.beta0.is_finite() && self.beta0 >= 0.0) {
            return Err(TrainError::BadConfig("beta0 must be non-negative"));
        }
        if self.n_pairs == 0 {
            return Err(TrainError::BadConfig("n_pairs must be positive"));
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<PriorParams, TrainError> {
        Ok(PriorParams::new(self.prior_kappa, self.prior_sigma)?)
    }

    /// Independent RNG stream for one torus, derived from the master seed.
    pub fn torus_seed(&self, chart: Chart) -> u64 {
        self.seed ^ ((chart.label() as u64) << 40)
    }
}

/// Entropy-annealing weight at epoch `t` (0-based): beta0 * max(0, 1 - t/T).
pub fn anneal_weight(beta0: f64, t: usize, t_anneal: usize) -> f64 {
    if t_anneal == 0 {
        return 0.0;
    }
    beta0 * (1.0 - t as f64 / t_anneal as f64).max(0.0)
}

/// Fill `w` (rows x cols, row-major, cols <= rows) with a matrix whose
/// columns are orthonormal, via Gram-Schmidt on Gaussian draws.
fn orthogonal_columns(w: &mut [f64], rows: usize, cols: usize, rng: &mut impl Rng) {
    assert!(cols <= rows && w.len() == rows * cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut col: Vec<f64> = (0..rows).map(|_| gaussian(rng)).collect();
        for prev in &basis {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm: f64 = col.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // essentially degenerate draw; retry
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
        basis.push(col);
    }
    for (j, col) in basis.iter().enumerate() {
        for i in 0..rows {
            w[i * cols + j] = col[i];
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; the cos branch alone is enough here
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn init_mlp(m: &mut MlpParams, gain: f64, rng: &mut impl Rng) {
    orthogonal_columns(&mut m.w1, HIDDEN, m.d_in, rng);
    // output layer: Xavier uniform scaled well below 1 so the flow starts
    // near the identity
    let bound = gain * (6.0 / (HIDDEN + m.d_out) as f64).sqrt();
    for w in m.w2.iter_mut() {
        *w = rng.gen_range(-bound..bound);
    }
    // biases stay zero
}

/// Near-identity initialization: orthogonal hidden weights, small Xavier
/// uniform output weights (gain 0.01), zero biases.
pub fn init_flow(n_pairs: usize, rng: &mut impl Rng) -> FlowTransform {
    const GAIN: f64 = 0.01;
    // Circle translations start large on purpose: the prior's circle
    // marginal is narrow, and with near-identity rotations the model never
    // places mass on far-away circle modes, which reverse KL then cannot
    // recover. A steep disk-conditioned rotation at init spreads the circle
    // marginal over all periods so every mode receives gradient signal.
    const ROTATION_GAIN: f64 = 3.0;
    // Disk translations likewise start non-trivial: targets whose disk mass
    // sits away from the center (near the torus boundary) are invisible to a
    // centered prior blob. A theta-dependent plane translation at init sweeps
    // the blob around the disk so off-center modes get covered too.
    const DISK_GAIN: f64 = 1.5;
    let mut flow = FlowTransform::zeros(n_pairs);
    for layer in flow.layers.iter_mut() {
        let t_gain = match layer.kind {
            LayerKind::FixCircle => DISK_GAIN,
            LayerKind::FixDisk => ROTATION_GAIN,
        };
        init_mlp(&mut layer.scale, GAIN, rng);
        init_mlp(&mut layer.translate, t_gain, rng);
    }
    flow
}

/// First and second moment buffers mirroring one MLP.
#[derive(Debug, Clone)]
struct MlpMoments {
    m: MlpGradsFlat,
    v: MlpGradsFlat,
}

#[derive(Debug, Clone)]
struct MlpGradsFlat {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpGradsFlat {
    fn zeros_like(p: &MlpParams) -> Self {
        MlpGradsFlat {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }
}

/// Adam state for the full flow (one moment pair per parameter).
#[derive(Debug, Clone)]
pub struct AdamState {
    moments: Vec<(MlpMoments, MlpMoments)>, // (scale, translate) per layer
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn for_flow(flow: &FlowTransform) -> Self {
        let moments = flow
            .layers
            .iter()
            .map(|l| {
                (
                    MlpMoments {
                        m: MlpGradsFlat::zeros_like(&l.scale),
                        v: MlpGradsFlat::zeros_like(&l.scale),
                    },
                    MlpMoments {
                        m: MlpGradsFlat::zeros_like(&l.translate),
                        v: MlpGradsFlat::zeros_like(&l.translate),
                    },
                )
            })
            .collect();
        AdamState { moments, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

fn adam_update_mlp(p: &mut MlpParams, g: &crate::flow_model::MlpGrads, mo: &mut MlpMoments, lr: f64, t: u64) {
    adam_update(&mut p.w1, &g.w1, &mut mo.m.w1, &mut mo.v.w1, lr, t);
    adam_update(&mut p.b1, &g.b1, &mut mo.m.b1, &mut mo.v.b1, lr, t);
    adam_update(&mut p.w2, &g.w2, &mut mo.m.w2, &mut mo.v.w2, lr, t);
    adam_update(&mut p.b2, &g.b2, &mut mo.m.b2, &mut mo.v.b2, lr, t);
}

fn grads_finite(grads: &[LayerGrads]) -> bool {
    grads.iter().all(|g| {
        [&g.scale.w1, &g.scale.b1, &g.scale.w2, &g.scale.b2]
            .iter()
            .chain([&g.translate.w1, &g.translate.b1, &g.translate.w2, &g.translate.b2].iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    })
}

/// One bias-corrected Adam step over every flow parameter.
pub fn adam_step(
    flow: &mut FlowTransform,
    grads: &[LayerGrads],
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step;
    for ((layer, g), (mo_s, mo_t)) in flow
        .layers
        .iter_mut()
        .zip(grads)
        .zip(state.moments.iter_mut())
    {
        adam_update_mlp(&mut layer.scale, &g.scale, mo_s, lr, t);
        adam_update_mlp(&mut layer.translate, &g.translate, mo_t, lr, t);
    }
}

/// Per-epoch history row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub anneal_weight: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub flow: FlowTransform,
    pub history: Vec<EpochRecord>,
    pub skipped_epochs: usize,
}

const MAX_CONSECUTIVE_BAD: usize = 10;

/// Train one torus flow against `target` (an unnormalized or normalized
/// log-density on the given chart). Deterministic for a fixed config.
pub fn train_torus(
    target: &dyn TorusLogDensity,
    chart: Chart,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let prior = config.prior()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.torus_seed(chart));
    let mut flow = init_flow(config.n_pairs, &mut rng);
    let mut adam = AdamState::for_flow(&flow);
    let mut history = Vec::with_capacity(config.epochs);
    let mut skipped = 0usize;
    let mut consecutive_bad = 0usize;

    for epoch in 0..config.epochs {
        let beta = anneal_weight(config.beta0, epoch, config.t_anneal);
        // full rate while the entropy bonus is active, then cosine decay to
        // 5%: the model reorganizes when the bonus ends, and a constant rate
        // afterwards leaves the batch-noise floor too high to settle
        let tail = (config.epochs - config.t_anneal.min(config.epochs)).max(1) as f64;
        let progress = (epoch.saturating_sub(config.t_anneal)) as f64 / tail;
        let lr = config.lr * (0.05 + 0.475 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let batch = prior_sample(&prior, config.batch, &mut rng)?;
        let (grads, stats) =
            flow_backward_gradients(&flow, &prior, target, chart, &batch, beta)?;
        let ok = stats.loss.is_finite() && grads_finite(&grads);
        if ok {
            adam_step(&mut flow, &grads, &mut adam, lr);
            consecutive_bad = 0;
        } else {
            skipped += 1;
            consecutive_bad += 1;
            if consecutive_bad >= MAX_CONSECUTIVE_BAD {
                return Err(TrainError::Diverged(consecutive_bad));
            }
        }
        history.push(EpochRecord {
            epoch,
            loss: stats.loss,
            kl: stats.kl,
            entropy: stats.entropy,
            anneal_weight: beta,
        });
    }

    Ok(TrainOutcome {
        flow,
        history,
        skipped_epochs: skipped,
    })
}

/// CouplingLayer is re-exported here for consumers that build optimizers by
/// hand in tests.
pub fn layer_param_count(layer: &CouplingLayer) -> usize {
    layer.scale.n_params() + layer.translate.n_params()
}
