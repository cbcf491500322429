//! Experiment orchestration: estimate normalizers, train both torus flows,
//! evaluate, and emit the artifact set for one run directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::evaluator::{
    count_modes, global_kl, kl_decomposition, local_kl, sample_model, top_percentile_filter,
    KlEstimate, LabeledSample,
};
use crate::flow_model::{FlowError, FlowTransform};
use crate::lens_geometry::Chart;
use crate::target_densities::{NormalizedTarget, PushforwardDensity, TargetError};
use crate::trainer::{train_torus, EpochRecord, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("target error: {0}")]
    Target(#[from] TargetError),
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("i/o error writing artifacts: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}

impl RunError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Target(_) => 2,
            RunError::Train(_) | RunError::Flow(_) => 3,
            RunError::Io(_) | RunError::Checkpoint(_) => 4,
        }
    }
}

/// Default output root, overridable with the LENSFLOW_OUT environment
/// variable or --out.
pub const OUT_ENV: &str = "LENSFLOW_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Everything metrics.json records about one trained run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub lens_p: i64,
    pub lens_q: i64,
    pub seed: u64,
    pub kl_t1: KlEstimate,
    pub kl_t2: KlEstimate,
    pub kl_global: KlEstimate,
    pub kl_decomposition: f64,
    pub initial_kl_t1: f64,
    pub initial_kl_t2: f64,
    pub i1: f64,
    pub i2: f64,
    pub i1_stderr: f64,
    pub i2_stderr: f64,
    pub mixture_weight: f64,
    pub mode_count_t1: usize,
    pub mode_count_t2: usize,
    pub n_eval_samples: usize,
    pub n_normalizer_samples: usize,
    pub skipped_epochs_t1: usize,
    pub skipped_epochs_t2: usize,
}

/// In-memory results of one seed's run, before artifact emission.
pub struct RunResult {
    pub config: ExperimentConfig,
    pub flow1: FlowTransform,
    pub flow2: FlowTransform,
    pub history1: Vec<EpochRecord>,
    pub history2: Vec<EpochRecord>,
    pub samples: Vec<LabeledSample>,
    pub metrics: MetricsReport,
}

/// Train and evaluate one seed. Pure given the config (all RNG derived from
/// config seeds).
pub fn execute(config: &ExperimentConfig) -> Result<RunResult, RunError> {
    config.validate()?;
    let lens = config.lens_space()?;
    let target = config.target.build()?;
    let pushforward = PushforwardDensity::estimate(
        lens,
        target,
        config.normalizer.n_mc,
        config.normalizer.seed,
    )?;
    let w = pushforward.normalizers.mixture_weight();

    let target1 = NormalizedTarget {
        pushforward: &pushforward,
        chart: Chart::One,
    };
    let target2 = NormalizedTarget {
        pushforward: &pushforward,
        chart: Chart::Two,
    };
    let out1 = train_torus(&target1, Chart::One, &config.train)?;
    let out2 = train_torus(&target2, Chart::Two, &config.train)?;

    let prior = config.train.prior()?;
    let n_eval = config.eval.n_samples;
    // evaluation stream independent of the training streams
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5eed_0e7a);
    let kl_t1 = local_kl(&out1.flow, &prior, &target1, Chart::One, n_eval, &mut rng)?;
    let kl_t2 = local_kl(&out2.flow, &prior, &target2, Chart::Two, n_eval, &mut rng)?;
    let kl_global = global_kl(&out1.flow, &out2.flow, &prior, &pushforward, n_eval, &mut rng)?;
    let samples = sample_model(&out1.flow, &out2.flow, &prior, &pushforward, n_eval, &mut rng)?;
    let kept = top_percentile_filter(&samples, config.eval.keep_fraction);
    let modes1 = count_modes(
        &kept,
        Chart::One,
        config.eval.mode_radius,
        config.eval.mode_min_count,
    );
    let modes2 = count_modes(
        &kept,
        Chart::Two,
        config.eval.mode_radius,
        config.eval.mode_min_count,
    );

    let metrics = MetricsReport {
        experiment: config.name.clone(),
        lens_p: config.lens.p,
        lens_q: config.lens.q,
        seed: config.train.seed,
        kl_t1,
        kl_t2,
        kl_global,
        kl_decomposition: kl_decomposition(kl_t1.mean, kl_t2.mean, w),
        initial_kl_t1: out1.history.first().map(|r| r.kl).unwrap_or(f64::NAN),
        initial_kl_t2: out2.history.first().map(|r| r.kl).unwrap_or(f64::NAN),
        i1: pushforward.normalizers.i1,
        i2: pushforward.normalizers.i2,
        i1_stderr: pushforward.normalizers.stderr1,
        i2_stderr: pushforward.normalizers.stderr2,
        mixture_weight: w,
        mode_count_t1: modes1,
        mode_count_t2: modes2,
        n_eval_samples: n_eval,
        n_normalizer_samples: config.normalizer.n_mc,
        skipped_epochs_t1: out1.skipped_epochs,
        skipped_epochs_t2: out2.skipped_epochs,
    };

    Ok(RunResult {
        config: config.clone(),
        flow1: out1.flow,
        flow2: out2.flow,
        history1: out1.history,
        history2: out2.history,
        samples,
        metrics,
    })
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,kl,entropy,anneal_weight\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss, r.kl, r.entropy, r.anneal_weight
        ));
    }
    s
}

fn samples_csv(samples: &[LabeledSample]) -> String {
    let mut s = String::from("chart,theta,x,y,log_q,log_model\n");
    for r in samples {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.chart.label(),
            r.theta,
            r.x,
            r.y,
            r.log_q,
            r.log_model
        ));
    }
    s
}

/// Linear two-segment color ramp (dark violet -> teal -> yellow) over a
/// quantile u in [0, 1].
fn ramp_color(u: f64) -> String {
    let stops = [(68.0, 1.0, 84.0), (33.0, 145.0, 140.0), (253.0, 231.0, 37.0)];
    let (a, b, t) = if u < 0.5 {
        (stops[0], stops[1], u * 2.0)
    } else {
        (stops[1], stops[2], (u - 0.5) * 2.0)
    };
    let mix = |x: f64, y: f64| (x + (y - x) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

const SCATTER_MAX_POINTS: usize = 4000;

/// Scatter of (theta, atan2(y, x)) for one chart, colored by log_q
/// quantile, as a standalone SVG.
pub fn scatter_svg(samples: &[LabeledSample], chart: Chart) -> String {
    let own: Vec<&LabeledSample> = samples.iter().filter(|s| s.chart == chart).collect();
    // quantile rank of each kept point among the chart's samples
    let mut order: Vec<usize> = (0..own.len()).collect();
    order.sort_by(|&a, &b| own[a].log_q.partial_cmp(&own[b].log_q).unwrap());
    let mut rank = vec![0usize; own.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let stride = (own.len() / SCATTER_MAX_POINTS).max(1);
    let (width, height, margin) = (640.0, 480.0, 40.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">torus {} : theta vs atan2(y, x), colored by log_q quantile</text>\n",
        width / 2.0,
        chart.label()
    ));
    let pi = std::f64::consts::PI;
    for (i, s) in own.iter().enumerate() {
        if i % stride != 0 {
            continue;
        }
        let u = if own.len() > 1 {
            rank[i] as f64 / (own.len() - 1) as f64
        } else {
            0.5
        };
        let px = margin + s.theta / (2.0 * pi) * (width - 2.0 * margin);
        let phi = s.y.atan2(s.x);
        let py = height - margin - (phi + pi) / (2.0 * pi) * (height - 2.0 * margin);
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"1.6\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            ramp_color(u)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"black\"/>\n",
        width - 2.0 * margin,
        height - 2.0 * margin
    ));
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Write every artifact of a finished run into `dir` and return the
/// manifest (also written as manifest.json).
pub fn emit_artifacts(result: &RunResult, dir: &Path) -> Result<RunManifest, RunError> {
    fs::create_dir_all(dir)?;
    let run_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut files: Vec<(String, Vec<u8>)> = vec![
        (
            "metrics.json".into(),
            serde_json::to_string_pretty(&result.metrics)
                .expect("metrics serialize")
                .into_bytes(),
        ),
        ("config.json".into(), result.config.to_json().into_bytes()),
        (
            "history_T1.csv".into(),
            history_csv(&result.history1).into_bytes(),
        ),
        (
            "history_T2.csv".into(),
            history_csv(&result.history2).into_bytes(),
        ),
        (
            "samples.csv".into(),
            samples_csv(&result.samples).into_bytes(),
        ),
        (
            "scatter_T1.svg".into(),
            scatter_svg(&result.samples, Chart::One).into_bytes(),
        ),
        (
            "scatter_T2.svg".into(),
            scatter_svg(&result.samples, Chart::Two).into_bytes(),
        ),
    ];

    save_checkpoint(&dir.join("checkpoint_T1"), &result.flow1)?;
    save_checkpoint(&dir.join("checkpoint_T2"), &result.flow2)?;
    for ckpt in ["checkpoint_T1", "checkpoint_T2"] {
        for file in ["params.bin", "manifest.json"] {
            let rel = format!("{ckpt}/{file}");
            files.push((rel.clone(), fs::read(dir.join(&rel))?));
        }
    }

    let mut entries = Vec::with_capacity(files.len());
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if !rel.contains('/') {
            fs::write(&path, bytes)?;
        }
        entries.push(ManifestEntry {
            path: rel.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = RunManifest {
        run_id,
        files: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serialize"),
    )?;
    Ok(manifest)
}

/// Table-1-style row for one run: Flow-T1, Flow-T2, Flow-L(p;q).
pub fn summary_line(m: &MetricsReport) -> String {
    format!(
        "{:<8} Flow-T1 {:.3} ± {:.3}   Flow-T2 {:.3} ± {:.3}   Flow-L({};{}) {:.3} ± {:.3}   modes ({}, {})",
        m.experiment,
        m.kl_t1.mean,
        m.kl_t1.stderr,
        m.kl_t2.mean,
        m.kl_t2.stderr,
        m.lens_p,
        m.lens_q,
        m.kl_global.mean,
        m.kl_global.stderr,
        m.mode_count_t1,
        m.mode_count_t2
    )
}

/// Mean ± sample std over seeds for the three KL columns.
pub fn multi_seed_summary(reports: &[MetricsReport]) -> String {
    fn mean_std(vals: &[f64]) -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    }
    let t1 = mean_std(&reports.iter().map(|r| r.kl_t1.mean).collect::<Vec<_>>());
    let t2 = mean_std(&reports.iter().map(|r| r.kl_t2.mean).collect::<Vec<_>>());
    let g = mean_std(&reports.iter().map(|r| r.kl_global.mean).collect::<Vec<_>>());
    format!(
        "{} seeds  Flow-T1 {:.3} ± {:.3}   Flow-T2 {:.3} ± {:.3}   Flow-L({};{}) {:.3} ± {:.3}",
        reports.len(),
        t1.0,
        t1.1,
        t2.0,
        t2.1,
        reports[0].lens_p,
        reports[0].lens_q,
        g.0,
        g.1
    )
}
