//! Evaluation pipeline shared by the commands: embed a cohort with a
//! pretrained model, fuse modality subsets, cross-validate the Cox head,
//! and apply the two ablation protocols (slice dropping and RNA
//! replacement).

use anyhow::{anyhow, bail, Context, Result};
use modalsurv_core::data::{
    impute_missing_modality, make_folds, CohortManifest, ImputeKind, ImputePlan, Modality,
    ModalityRegressor, PartialTriplet, RegressorOptions,
};
use modalsurv_core::encoders::ProjectedTriplet;
use modalsurv_core::metrics::{concordance_index_with, ScoredCohort, TieCredit};
use modalsurv_core::numeric::DenseVector;
use modalsurv_core::pretrain::PretrainModel;
use modalsurv_core::survival::{
    predict_risk, train_cox_head, CoxHead, CoxTrainOptions, FusedEmbedding, SurvivalLabel,
};
use modalsurv_core::CoreError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Distinct RNG streams derived from the master seed.
fn subseed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const STREAM_FOLDS: u64 = 4;
const STREAM_REPLACEMENT: u64 = 5;
const STREAM_HEAD: u64 = 6;
const STREAM_REGRESSOR: u64 = 7;

/// Unit-norm projected embeddings for one patient; a missing modality stays
/// `None` until an imputation pass fills it.
#[derive(Debug, Clone)]
pub struct EmbeddedPatient {
    pub id: String,
    pub label: SurvivalLabel,
    pub t: Option<DenseVector>,
    pub p: Option<DenseVector>,
    pub r: Option<DenseVector>,
}

impl EmbeddedPatient {
    pub fn triplet(&self) -> Option<ProjectedTriplet> {
        match (&self.t, &self.p, &self.r) {
            (Some(t), Some(p), Some(r)) => Some(ProjectedTriplet {
                t_tilde: t.clone(),
                p_tilde: p.clone(),
                r_tilde: r.clone(),
            }),
            _ => None,
        }
    }
}

/// Encode and project every present modality of every patient.
pub fn embed_cohort(model: &PretrainModel, cohort: &CohortManifest) -> Result<Vec<EmbeddedPatient>> {
    (0..cohort.len())
        .into_par_iter()
        .map(|i| {
            let rec = cohort.load_record(i)?;
            let t = match &rec.ct {
                Some(v) => Some(model.head_t.project(&model.ct.encode(v)?)?),
                None => None,
            };
            let p = match &rec.pet {
                Some(v) => Some(model.head_p.project(&model.pet.encode(v)?)?),
                None => None,
            };
            let r = match &rec.rna {
                Some(x) => Some(model.head_r.project(&model.rna.encode(x)?)?),
                None => None,
            };
            Ok(EmbeddedPatient {
                id: rec.id,
                label: rec.label,
                t,
                p,
                r,
            })
        })
        .collect::<modalsurv_core::Result<Vec<_>>>()
        .context("embedding cohort")
}

pub fn labels(patients: &[EmbeddedPatient]) -> Vec<SurvivalLabel> {
    patients.iter().map(|p| p.label).collect()
}

/// Fill every missing modality slot in place, training a per-target
/// regressor on the complete patients when the strategy demands one.
/// Returns the number of slots filled.
pub fn complete_embeddings(
    patients: &mut [EmbeddedPatient],
    kind: ImputeKind,
    seed: u64,
) -> Result<usize> {
    let complete: Vec<ProjectedTriplet> = patients.iter().filter_map(|p| p.triplet()).collect();
    let mut regressors: Vec<(Modality, ModalityRegressor)> = Vec::new();
    let mut filled = 0;
    for i in 0..patients.len() {
        if patients[i].triplet().is_some() {
            continue;
        }
        let partial = PartialTriplet {
            t: patients[i].t.clone(),
            p: patients[i].p.clone(),
            r: patients[i].r.clone(),
        };
        let result = match kind {
            ImputeKind::Zero => impute_missing_modality(&partial, &ImputePlan::Zero)?,
            ImputeKind::Average => impute_missing_modality(&partial, &ImputePlan::Average)?,
            ImputeKind::Predicted => {
                let target = partial.missing()?;
                if !regressors.iter().any(|(m, _)| *m == target) {
                    if complete.is_empty() {
                        bail!("predicted imputation needs at least one complete patient");
                    }
                    let opts = RegressorOptions {
                        seed: subseed(seed, STREAM_REGRESSOR),
                        ..RegressorOptions::default()
                    };
                    let reg = ModalityRegressor::train(&complete, target, opts)?;
                    regressors.push((target, reg));
                }
                let reg = &regressors.iter().find(|(m, _)| *m == target).unwrap().1;
                impute_missing_modality(&partial, &ImputePlan::Predicted(reg))?
            }
        };
        patients[i].t = Some(result.triplet.t_tilde);
        patients[i].p = Some(result.triplet.p_tilde);
        patients[i].r = Some(result.triplet.r_tilde);
        filled += 1;
    }
    Ok(filled)
}

/// Modality subsets evaluated by the drop-slice ablation. Two-modality rows
/// shrink the fused vector instead of imputing the absent slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalitySubset {
    All,
    CtPet,
    CtRna,
    PetRna,
}

impl ModalitySubset {
    pub const TABLE2: [ModalitySubset; 4] = [
        ModalitySubset::All,
        ModalitySubset::CtPet,
        ModalitySubset::CtRna,
        ModalitySubset::PetRna,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ModalitySubset::All => "ct+pet+rna",
            ModalitySubset::CtPet => "ct+pet",
            ModalitySubset::CtRna => "ct+rna",
            ModalitySubset::PetRna => "pet+rna",
        }
    }

    fn includes(&self) -> (bool, bool, bool) {
        match self {
            ModalitySubset::All => (true, true, true),
            ModalitySubset::CtPet => (true, true, false),
            ModalitySubset::CtRna => (true, false, true),
            ModalitySubset::PetRna => (false, true, true),
        }
    }
}

/// Concatenate the subset's slices in (t, p, r) order.
pub fn fuse_subset(patient: &EmbeddedPatient, subset: ModalitySubset) -> Result<FusedEmbedding> {
    let (want_t, want_p, want_r) = subset.includes();
    let mut values = Vec::new();
    for (want, slice, name) in [
        (want_t, &patient.t, "ct"),
        (want_p, &patient.p, "pet"),
        (want_r, &patient.r, "rna"),
    ] {
        if !want {
            continue;
        }
        let slice = slice
            .as_ref()
            .ok_or_else(|| anyhow!("patient {} is missing the {name} embedding", patient.id))?;
        values.extend_from_slice(slice.values());
    }
    Ok(FusedEmbedding::from_vector(DenseVector::new(values)?))
}

pub fn fuse_all(patients: &[EmbeddedPatient], subset: ModalitySubset) -> Result<Vec<FusedEmbedding>> {
    patients.iter().map(|p| fuse_subset(p, subset)).collect()
}

/// One RNA-replacement level of the missing-modality ablation: a seeded
/// uniform draw (floor rounding) picks the patients whose RNA slice is
/// rebuilt from CT and PET via the configured strategy.
pub fn replace_rna_level(
    patients: &[EmbeddedPatient],
    percent: u32,
    kind: ImputeKind,
    seed: u64,
) -> Result<(Vec<EmbeddedPatient>, Vec<usize>)> {
    if percent > 100 {
        bail!("replacement percentage {percent} exceeds 100");
    }
    let n = patients.len();
    let count = n * percent as usize / 100;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, STREAM_REPLACEMENT + percent as u64));
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(count).collect();
    chosen.sort_unstable();

    let mut out = patients.to_vec();
    if count == 0 {
        return Ok((out, chosen));
    }

    let regressor = match kind {
        ImputeKind::Predicted => {
            let training: Vec<ProjectedTriplet> = patients
                .iter()
                .enumerate()
                .filter(|(i, _)| !chosen.contains(i))
                .filter_map(|(_, p)| p.triplet())
                .collect();
            if training.is_empty() {
                bail!("predicted imputation needs unreplaced complete patients");
            }
            let opts = RegressorOptions {
                seed: subseed(seed, STREAM_REGRESSOR + percent as u64),
                ..RegressorOptions::default()
            };
            Some(ModalityRegressor::train(&training, Modality::Rna, opts)?)
        }
        _ => None,
    };

    for &i in &chosen {
        let partial = PartialTriplet {
            t: out[i].t.clone(),
            p: out[i].p.clone(),
            r: None,
        };
        let plan = match (&kind, &regressor) {
            (ImputeKind::Zero, _) => ImputePlan::Zero,
            (ImputeKind::Average, _) => ImputePlan::Average,
            (ImputeKind::Predicted, Some(reg)) => ImputePlan::Predicted(reg),
            (ImputeKind::Predicted, None) => unreachable!("regressor trained above"),
        };
        let result = impute_missing_modality(&partial, &plan)?;
        out[i].r = Some(result.triplet.r_tilde);
    }
    Ok((out, chosen))
}

#[derive(Debug, Clone, Copy)]
pub struct CvOptions {
    pub fold_count: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub fc_width: Option<usize>,
    pub tie: TieCredit,
}

impl CvOptions {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Result<Self> {
        Ok(Self {
            fold_count: cfg.survival.fold_count,
            seed: cfg.seed,
            learning_rate: cfg.survival.learning_rate,
            epochs: cfg.survival.epochs,
            fc_width: cfg.survival.fc_width,
            tie: cfg.tie_credit()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub n_test: usize,
    /// None when the held-out fold has no comparable pairs.
    pub c_index: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
    /// Out-of-fold scores oriented larger = longer predicted survival,
    /// aligned with the input patient order.
    pub scores: Vec<f64>,
}

/// Train one Cox head per fold on its training split and score the held-out
/// patients. Folds run in parallel; results are assembled in fold order.
pub fn cross_validate(
    fused: &[FusedEmbedding],
    labels: &[SurvivalLabel],
    opts: &CvOptions,
) -> Result<CvOutcome> {
    if fused.len() != labels.len() {
        bail!("{} embeddings but {} labels", fused.len(), labels.len());
    }
    let n = fused.len();
    let split = make_folds(n, opts.fold_count, subseed(opts.seed, STREAM_FOLDS))?;
    let dim = fused[0].dim();

    let per_fold: Vec<(FoldResult, Vec<(usize, f64)>)> = (0..opts.fold_count)
        .into_par_iter()
        .map(|fold| -> Result<_> {
            let train_idx = split.train_indices(fold);
            let test_idx = split.test_indices(fold);
            let train_fused: Vec<FusedEmbedding> =
                train_idx.iter().map(|&i| fused[i].clone()).collect();
            let train_labels: Vec<SurvivalLabel> = train_idx.iter().map(|&i| labels[i]).collect();

            let mut rng = ChaCha8Rng::seed_from_u64(subseed(opts.seed, STREAM_HEAD + fold as u64));
            let mut head = CoxHead::init(dim, opts.fc_width, &mut rng)?;
            let train_opts = CoxTrainOptions {
                lr: opts.learning_rate,
                epochs: opts.epochs,
            };
            train_cox_head(&train_fused, &train_labels, &mut head, &train_opts)?;

            let scored: Vec<(usize, f64)> = test_idx
                .iter()
                .map(|&i| Ok((i, -predict_risk(&fused[i], &head)?)))
                .collect::<modalsurv_core::Result<_>>()?;
            let test_labels: Vec<SurvivalLabel> = test_idx.iter().map(|&i| labels[i]).collect();
            let cohort =
                ScoredCohort::new(scored.iter().map(|(_, s)| *s).collect(), test_labels)?;
            let c_index = match concordance_index_with(&cohort, opts.tie) {
                Ok(v) => Some(v),
                Err(CoreError::NoComparablePairs) => {
                    log::warn!("fold {fold} has no comparable pairs, excluded from the mean");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            Ok((
                FoldResult {
                    fold,
                    n_test: test_idx.len(),
                    c_index,
                },
                scored,
            ))
        })
        .collect::<Result<_>>()?;

    let valid: Vec<f64> = per_fold.iter().filter_map(|(f, _)| f.c_index).collect();
    if valid.is_empty() {
        bail!("every fold was excluded: no comparable pairs anywhere");
    }
    let (mean, std) = modalsurv_core::metrics::aggregate_folds(&valid)?;

    let mut scores = vec![0.0; n];
    for (_, scored) in &per_fold {
        for &(i, s) in scored {
            scores[i] = s;
        }
    }
    Ok(CvOutcome {
        folds: per_fold.into_iter().map(|(f, _)| f).collect(),
        mean,
        std,
        scores,
    })
}

/// Per-fold concordance of externally supplied scores over the same fold
/// splits `cross_validate` would use. No training happens; this backs the
/// oracle-injection path of the evaluate command.
pub fn score_folds(
    scores: &[f64],
    labels: &[SurvivalLabel],
    opts: &CvOptions,
) -> Result<CvOutcome> {
    if scores.len() != labels.len() {
        bail!("{} scores but {} labels", scores.len(), labels.len());
    }
    let split = make_folds(scores.len(), opts.fold_count, subseed(opts.seed, STREAM_FOLDS))?;
    let mut folds = Vec::with_capacity(opts.fold_count);
    for fold in 0..opts.fold_count {
        let test_idx = split.test_indices(fold);
        let cohort = ScoredCohort::new(
            test_idx.iter().map(|&i| scores[i]).collect(),
            test_idx.iter().map(|&i| labels[i]).collect(),
        )?;
        let c_index = match concordance_index_with(&cohort, opts.tie) {
            Ok(v) => Some(v),
            Err(CoreError::NoComparablePairs) => {
                log::warn!("fold {fold} has no comparable pairs, excluded from the mean");
                None
            }
            Err(e) => return Err(e.into()),
        };
        folds.push(FoldResult {
            fold,
            n_test: test_idx.len(),
            c_index,
        });
    }
    let valid: Vec<f64> = folds.iter().filter_map(|f| f.c_index).collect();
    if valid.is_empty() {
        bail!("every fold was excluded: no comparable pairs anywhere");
    }
    let (mean, std) = modalsurv_core::metrics::aggregate_folds(&valid)?;
    Ok(CvOutcome {
        folds,
        mean,
        std,
        scores: scores.to_vec(),
    })
}

/// Train one head on the whole cohort (the stage-2 `train` command).
/// Returns the head and its per-epoch loss history.
pub fn train_full_head(
    fused: &[FusedEmbedding],
    labels: &[SurvivalLabel],
    opts: &CvOptions,
) -> Result<(CoxHead, Vec<f64>)> {
    if fused.is_empty() {
        bail!("empty cohort");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(opts.seed, STREAM_HEAD + 0xFFFF));
    let mut head = CoxHead::init(fused[0].dim(), opts.fc_width, &mut rng)?;
    let train_opts = CoxTrainOptions {
        lr: opts.learning_rate,
        epochs: opts.epochs,
    };
    let history = train_cox_head(fused, labels, &mut head, &train_opts)?;
    Ok((head, history))
}

/// Concordance of stored ground-truth latents against the labels; the
/// latent drives the hazard upward, so its negation predicts survival.
pub fn oracle_c_index(
    u: &[f64],
    labels: &[SurvivalLabel],
    tie: TieCredit,
) -> Result<f64> {
    let scores: Vec<f64> = u.iter().map(|v| -v).collect();
    let cohort = ScoredCohort::new(scores, labels.to_vec())?;
    Ok(concordance_index_with(&cohort, tie)?)
}
