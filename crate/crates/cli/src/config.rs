//! TOML run configuration. Every command reads one [`RunConfig`]; CLI flags
//! override the file's values after parsing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modalsurv_core::data::synth::SynthParams;
use modalsurv_core::data::ImputeKind;
use modalsurv_core::encoders::EncoderConfig;
use modalsurv_core::metrics::TieCredit;
use modalsurv_core::pretrain::{PretrainConfig, PretrainSetup};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Cohort manifest consumed by pretrain/train/evaluate/ablate.
    pub manifest: PathBuf,
    /// Directory receiving all emitted artifacts.
    pub out_dir: PathBuf,
    /// Master seed; every stochastic component derives its stream from it.
    pub seed: u64,
    /// Worker threads for fold parallelism; 0 keeps the library default.
    pub threads: usize,
    pub encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub survival: SurvivalSection,
    pub metrics: MetricsSection,
    pub ablation: AblationSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("cohort/manifest.json"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            encoder: EncoderSection::default(),
            pretrain: PretrainSection::default(),
            survival: SurvivalSection::default(),
            metrics: MetricsSection::default(),
            ablation: AblationSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub volume_patch_size: [usize; 3],
    pub transformer_blocks: usize,
    pub model_width: usize,
    pub rna_hidden_layers: Vec<usize>,
    pub projection_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            volume_patch_size: [4, 8, 8],
            transformer_blocks: 1,
            model_width: 32,
            rna_hidden_layers: vec![32],
            projection_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kmeans_refresh_every: usize,
    pub prototype_count: usize,
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-4,
            kmeans_refresh_every: 1,
            prototype_count: 8,
            tau1: 0.1,
            tau2: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSection {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Width of the optional tanh layer before the linear predictor;
    /// omit for a purely linear head.
    pub fc_width: Option<usize>,
    pub fold_count: usize,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 300,
            fc_width: None,
            fold_count: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// "strict" counts score ties as failures; "half" credits them 0.5.
    pub tie_credit: String,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            tie_credit: "strict".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Percent of patients whose RNA embedding is replaced, one table row per
    /// entry.
    pub percentages: Vec<u32>,
    /// Replacement strategy: "zero", "average", or "predicted".
    pub impute: String,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            percentages: vec![10, 20, 30, 40],
            impute: "average".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub effect_size: f64,
    pub censor_rate: f64,
    pub latent_dim: usize,
    pub volume_shape: [usize; 3],
    pub gene_count: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 200,
            effect_size: 2.0,
            censor_rate: 0.2,
            latent_dim: 4,
            volume_shape: [8, 16, 16],
            gene_count: 200,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.ablation.percentages.iter().find(|&&p| p > 100) {
            bail!("ablation percentage {p} exceeds 100");
        }
        self.impute_kind()?;
        self.tie_credit()?;
        if self.survival.fold_count < 2 {
            bail!("fold_count must be at least 2");
        }
        if !(self.survival.learning_rate > 0.0) || self.survival.epochs == 0 {
            bail!("survival learning_rate and epochs must be positive");
        }
        Ok(())
    }

    pub fn impute_kind(&self) -> Result<ImputeKind> {
        Ok(ImputeKind::parse(&self.ablation.impute)?)
    }

    pub fn tie_credit(&self) -> Result<TieCredit> {
        match self.metrics.tie_credit.as_str() {
            "strict" => Ok(TieCredit::Strict),
            "half" => Ok(TieCredit::Half),
            other => bail!("unknown tie_credit {other:?}, expected strict or half"),
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        let s = &self.synth;
        let mut p = SynthParams::new(s.n, s.effect_size, s.censor_rate, self.seed);
        p.latent_dim = s.latent_dim;
        p.volume_shape = (s.volume_shape[0], s.volume_shape[1], s.volume_shape[2]);
        p.gene_count = s.gene_count;
        p
    }

    /// Assemble the stage-1 setup for a cohort with the given tensor shapes.
    pub fn pretrain_setup(
        &self,
        volume_shape: (usize, usize, usize),
        gene_count: usize,
    ) -> PretrainSetup {
        let e = &self.encoder;
        let p = &self.pretrain;
        PretrainSetup {
            encoder: EncoderConfig {
                volume_patch_size: (
                    e.volume_patch_size[0],
                    e.volume_patch_size[1],
                    e.volume_patch_size[2],
                ),
                transformer_blocks: e.transformer_blocks,
                model_width: e.model_width,
                rna_hidden_layers: e.rna_hidden_layers.clone(),
                projection_dim: e.projection_dim,
                seed: self.seed,
            },
            volume_shape,
            gene_count,
            prototype_count: p.prototype_count,
            tau1: p.tau1,
            tau2: p.tau2,
            pretrain: PretrainConfig {
                alpha1: p.alpha1,
                alpha2: p.alpha2,
                epochs: p.epochs,
                batch_size: p.batch_size,
                learning_rate: p.learning_rate,
                kmeans_refresh_every: p.kmeans_refresh_every,
                seed: self.seed,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 9
            [pretrain]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.batch_size, 4);
        assert_eq!(cfg.survival.learning_rate, 5e-5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<RunConfig>("unknown_key = 1").unwrap_err();
        assert!(err.to_string().contains("unknown_key"));
    }

    #[test]
    fn bad_percentage_rejected() {
        let mut cfg = RunConfig::default();
        cfg.ablation.percentages = vec![10, 120];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_impute_rejected() {
        let mut cfg = RunConfig::default();
        cfg.ablation.impute = "nearest".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tie_credit_parses_both_variants() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.tie_credit().unwrap(), TieCredit::Strict));
        cfg.metrics.tie_credit = "half".into();
        assert!(matches!(cfg.tie_credit().unwrap(), TieCredit::Half));
    }

    #[test]
    fn seed_feeds_every_stage() {
        let mut cfg = RunConfig::default();
        cfg.seed = 77;
        assert_eq!(cfg.synth_params().seed, 77);
        let setup = cfg.pretrain_setup((8, 16, 16), 200);
        assert_eq!(setup.encoder.seed, 77);
        assert_eq!(setup.pretrain.seed, 77);
    }
}
