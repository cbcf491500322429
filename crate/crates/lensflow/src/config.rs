//! Experiment configuration: a single JSON document describing the lens
//! space, the target on S^3, training hyperparameters, and evaluation
//! settings, plus the three built-in experiments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lens_geometry::{GeometryError, LensSpace};
use crate::target_densities::{
    benzene_boltzmann, experiment1_mixture, experiment2_mixture, BoltzmannParams, TargetDensity,
    TargetError, TargetKind, VmfComponent,
};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown experiment name '{0}' (expected exp1, exp2, or boltz)")]
    UnknownExperiment(String),
    #[error("invalid lens block: {0}")]
    Lens(#[from] GeometryError),
    #[error("invalid target block: {0}")]
    Target(#[from] TargetError),
    #[error("invalid eval block: {0}")]
    Eval(&'static str),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LensConfig {
    pub p: i64,
    pub q: i64,
}

/// One vMF mixture component as it appears in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VmfComponentConfig {
    pub center: [f64; 4],
    pub kappa: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetConfig {
    VmfMixture {
        components: Vec<VmfComponentConfig>,
    },
    Boltzmann {
        kappa: f64,
        c: [f64; 3],
        barrier: f64,
        x0: [f64; 3],
        y0: [f64; 3],
    },
    Uniform,
}

impl TargetConfig {
    pub fn build(&self) -> Result<TargetDensity, ConfigError> {
        Ok(match self {
            TargetConfig::VmfMixture { components } => TargetDensity::vmf_mixture(
                components
                    .iter()
                    .map(|c| VmfComponent {
                        mu: c.center,
                        kappa: c.kappa,
                        weight: c.weight,
                    })
                    .collect(),
            )?,
            TargetConfig::Boltzmann {
                kappa,
                c,
                barrier,
                x0,
                y0,
            } => TargetDensity::boltzmann(
                BoltzmannParams::new(*kappa, *c, *barrier, *x0, *y0)?,
                true,
            ),
            TargetConfig::Uniform => TargetDensity::uniform(),
        })
    }

    fn from_density(target: &TargetDensity) -> Self {
        match &target.kind {
            TargetKind::UniformS3 => TargetConfig::Uniform,
            TargetKind::VmfMixture(components) => TargetConfig::VmfMixture {
                components: components
                    .iter()
                    .map(|c| VmfComponentConfig {
                        center: c.mu,
                        kappa: c.kappa,
                        weight: c.weight,
                    })
                    .collect(),
            },
            TargetKind::Boltzmann(p) => TargetConfig::Boltzmann {
                kappa: p.kappa,
                c: p.c,
                barrier: p.barrier,
                x0: p.x0,
                y0: p.y0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// model samples drawn for KL, mode counting, and the samples CSV
    pub n_samples: usize,
    pub keep_fraction: f64,
    pub mode_radius: f64,
    pub mode_min_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 100_000,
            keep_fraction: 0.01,
            mode_radius: 0.4,
            mode_min_count: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizerConfig {
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        NormalizerConfig {
            n_mc: 200_000,
            seed: 2718,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub lens: LensConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub normalizer: NormalizerConfig,
}

impl ExperimentConfig {
    pub fn lens_space(&self) -> Result<LensSpace, ConfigError> {
        Ok(LensSpace::new(self.lens.p, self.lens.q)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.lens_space()?;
        self.target.build()?;
        if self.eval.n_samples == 0 {
            return Err(ConfigError::Eval("n_samples must be positive"));
        }
        if !(self.eval.keep_fraction > 0.0 && self.eval.keep_fraction <= 1.0) {
            return Err(ConfigError::Eval("keep_fraction must be in (0, 1]"));
        }
        if self.eval.mode_radius <= 0.0 {
            return Err(ConfigError::Eval("mode_radius must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// The three experiments with their published targets and defaults.
pub fn builtin_experiment(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let (lens, target) = match name {
        "exp1" => (LensConfig { p: 3, q: 2 }, experiment1_mixture()),
        "exp2" => (LensConfig { p: 7, q: 3 }, experiment2_mixture()),
        "boltz" => (LensConfig { p: 12, q: 1 }, benzene_boltzmann()),
        other => return Err(ConfigError::UnknownExperiment(other.to_string())),
    };
    Ok(ExperimentConfig {
        name: name.to_string(),
        lens,
        target: TargetConfig::from_density(&target),
        train: TrainConfig::default(),
        eval: EvalConfig::default(),
        normalizer: NormalizerConfig::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_lens_parameters() {
        assert_eq!(builtin_experiment("exp1").unwrap().lens.p, 3);
        assert_eq!(builtin_experiment("exp1").unwrap().lens.q, 2);
        assert_eq!(builtin_experiment("exp2").unwrap().lens.p, 7);
        assert_eq!(builtin_experiment("exp2").unwrap().lens.q, 3);
        assert_eq!(builtin_experiment("boltz").unwrap().lens.p, 12);
        assert_eq!(builtin_experiment("boltz").unwrap().lens.q, 1);
        assert!(builtin_experiment("exp3").is_err());
    }

    #[test]
    fn builtin_exp2_kappas() {
        let config = builtin_experiment("exp2").unwrap();
        match &config.target {
            TargetConfig::VmfMixture { components } => {
                let kappas: Vec<f64> = components.iter().map(|c| c.kappa).collect();
                assert_eq!(kappas, vec![65.0, 55.0, 65.0, 80.0]);
            }
            _ => panic!("exp2 must be a vMF mixture"),
        }
    }

    #[test]
    fn builtin_boltz_parameters() {
        let config = builtin_experiment("boltz").unwrap();
        match &config.target {
            TargetConfig::Boltzmann {
                kappa,
                c,
                barrier,
                x0,
                y0,
            } => {
                assert_eq!(*kappa, 5.0);
                assert_eq!(*c, [1.0, 0.0, 0.0]);
                assert_eq!(*barrier, 20.0);
                assert_eq!(*x0, [1.0, 0.0, 0.0]);
                assert_eq!(*y0, [0.0, 1.0, 0.0]);
            }
            _ => panic!("boltz must be a Boltzmann target"),
        }
        assert_eq!(config.train.prior_kappa, 5.0);
        assert_eq!(config.train.prior_sigma, 0.25);
    }

    #[test]
    fn json_roundtrip_preserves_config() {
        let config = builtin_experiment("exp1").unwrap();
        let text = config.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back.name, "exp1");
        assert_eq!(back.lens.p, 3);
        assert_eq!(back.train.batch, config.train.batch);
        assert_eq!(back.eval.mode_radius, 0.4);
    }

    #[test]
    fn missing_lens_block_fails_parse() {
        let text = r#"{"name": "x", "target": {"kind": "uniform"}}"#;
        assert!(matches!(
            ExperimentConfig::from_json(text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn defaults_fill_optional_blocks() {
        let text = r#"{
            "name": "mini",
            "lens": {"p": 2, "q": 1},
            "target": {"kind": "uniform"}
        }"#;
        let config = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(config.train.epochs, 3000);
        assert_eq!(config.train.batch, 6000);
        assert_eq!(config.normalizer.n_mc, 200_000);
    }

    #[test]
    fn bad_weights_rejected() {
        let text = r#"{
            "name": "bad",
            "lens": {"p": 3, "q": 2},
            "target": {"kind": "vmf-mixture", "components": [
                {"center": [1.0, 0.0, 0.0, 0.0], "kappa": 10.0, "weight": 0.7}
            ]}
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json(text),
            Err(ConfigError::Target(_))
        ));
    }
}
