//! Command implementations. Each command assembles its artifacts in a
//! staging directory next to the target and moves them into place only
//! after every file has been written, so interrupted runs leave no
//! partial output behind.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modalsurv_core::data::synth::{read_latents, synthesize_cohort};
use modalsurv_core::data::{load_cohort, CohortManifest};
use modalsurv_core::metrics::{kaplan_meier, logrank_test, stratify_risk, ScoredCohort};
use modalsurv_core::pretrain::checkpoint::Checkpoint;
use modalsurv_core::pretrain::{
    complete_examples, run_pretraining, PretrainModel, PretrainSetup,
};
use modalsurv_core::survival::{breslow_baseline, predict_risk, SurvivalLabel};

use crate::config::RunConfig;
use crate::pipeline::{
    self, cross_validate, embed_cohort, fuse_all, score_folds, train_full_head, CvOptions,
    CvOutcome, EmbeddedPatient, ModalitySubset,
};

/// Write everything into a fresh staging directory beside `out_dir`, then
/// move the files in. Rename within one filesystem keeps each move atomic.
fn stage_outputs<F>(out_dir: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)
        .with_context(|| format!("creating {}", parent.display()))?;
    let stage = tempfile::Builder::new()
        .prefix(".stage-")
        .tempdir_in(&parent)
        .context("creating staging directory")?;
    write(stage.path())?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    for entry in std::fs::read_dir(stage.path())? {
        let entry = entry?;
        let dest = out_dir.join(entry.file_name());
        std::fs::rename(entry.path(), &dest)
            .with_context(|| format!("moving {} into place", dest.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn opt_float(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Generate the synthetic cohort into the output directory and prove the
/// manifest loads back.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let params = cfg.synth_params();
    stage_outputs(&cfg.out_dir, |stage| {
        let out = synthesize_cohort(&params, stage).context("synthesizing cohort")?;
        let cohort = load_cohort(&out.manifest_path).context("validating manifest")?;
        log::info!(
            "synthesized {} patients into {}",
            cohort.len(),
            cfg.out_dir.display()
        );
        Ok(())
    })
}

struct LoadedCheckpoint {
    setup: PretrainSetup,
    model: PretrainModel,
}

fn load_checkpoint_model(path: &Path) -> Result<LoadedCheckpoint> {
    let ckpt =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = PretrainModel::from_sections(&ckpt.meta.setup, &ckpt.sections)
        .context("rebuilding model from checkpoint")?;
    Ok(LoadedCheckpoint {
        setup: ckpt.meta.setup.clone(),
        model,
    })
}

fn open_cohort(cfg: &RunConfig) -> Result<CohortManifest> {
    load_cohort(&cfg.manifest)
        .with_context(|| format!("loading cohort manifest {}", cfg.manifest.display()))
}

fn check_cohort_matches(setup: &PretrainSetup, cohort: &CohortManifest) -> Result<()> {
    if cohort.target_shape() != setup.volume_shape {
        bail!(
            "cohort volume shape {:?} does not match the checkpoint's {:?}",
            cohort.target_shape(),
            setup.volume_shape
        );
    }
    Ok(())
}

fn loss_history_csv(ckpt: &Checkpoint) -> String {
    let mut csv = String::from("epoch,l_mpe,l_cpm,l_total\n");
    for e in &ckpt.meta.loss_history {
        writeln!(csv, "{},{},{},{}", e.epoch, e.l_mpe, e.l_cpm, e.l_total).expect("string write");
    }
    csv
}

/// Stage-1 pretraining: reads the cohort, trains, and writes the checkpoint
/// plus a per-epoch loss history CSV.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let cohort = open_cohort(cfg)?;
    let records = cohort.load_all().context("loading patient records")?;
    let (examples, skipped) = complete_examples(&records);
    if !skipped.is_empty() {
        log::warn!(
            "{} of {} patients lack a complete triplet and are excluded from pretraining",
            skipped.len(),
            records.len()
        );
    }
    if examples.is_empty() {
        bail!("no complete modality triplets to pretrain on");
    }
    let gene_count = examples[0].rna.gene_count();
    let setup = cfg.pretrain_setup(cohort.target_shape(), gene_count);

    let resume_ckpt = match resume {
        Some(p) => Some(
            Checkpoint::load(p).with_context(|| format!("loading resume checkpoint {}", p.display()))?,
        ),
        None => None,
    };
    let outcome = run_pretraining(&examples, &setup, resume_ckpt.as_ref())
        .context("pretraining failed")?;

    stage_outputs(&cfg.out_dir, |stage| {
        outcome.checkpoint.save(&stage.join("checkpoint.ckpt"))?;
        write_text(&stage.join("loss_history.csv"), &loss_history_csv(&outcome.checkpoint))
    })
}

/// Embed the cohort behind a checkpoint and fill any missing modality slots
/// with the configured imputation strategy.
fn embed_and_complete(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(PretrainSetup, Vec<EmbeddedPatient>)> {
    let loaded = load_checkpoint_model(checkpoint)?;
    let cohort = open_cohort(cfg)?;
    check_cohort_matches(&loaded.setup, &cohort)?;
    let mut patients = embed_cohort(&loaded.model, &cohort)?;
    let filled = pipeline::complete_embeddings(&mut patients, cfg.impute_kind()?, cfg.seed)?;
    if filled > 0 {
        log::info!("imputed {filled} missing modality embeddings");
    }
    Ok((loaded.setup, patients))
}

#[derive(serde::Serialize)]
struct SurvivalModelFile {
    fc_w: Option<Vec<Vec<f64>>>,
    fc_b: Option<Vec<f64>>,
    beta: Vec<f64>,
    baseline: modalsurv_core::survival::BaselineHazard,
    train_c_index: f64,
}

/// Stage-2 training on the full cohort: fit the Cox head over fused
/// embeddings and persist it with its Breslow baseline.
pub fn cmd_train(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (_, patients) = embed_and_complete(cfg, checkpoint)?;
    let fused = fuse_all(&patients, ModalitySubset::All)?;
    let labels = pipeline::labels(&patients);
    let opts = CvOptions::from_config(cfg)?;
    let (head, history) = train_full_head(&fused, &labels, &opts)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("cox loss {first:.6} -> {last:.6} over {} epochs", history.len());
    }

    let baseline = breslow_baseline(&fused, &labels, &head)?;
    let scores: Vec<f64> = fused
        .iter()
        .map(|f| Ok(-predict_risk(f, &head)?))
        .collect::<modalsurv_core::Result<_>>()?;
    let cohort = ScoredCohort::new(scores, labels)?;
    let train_c_index =
        modalsurv_core::metrics::concordance_index_with(&cohort, opts.tie)?;

    let file = SurvivalModelFile {
        fc_w: head
            .fc
            .as_ref()
            .map(|(w, _)| w.rows().into_iter().map(|r| r.to_vec()).collect()),
        fc_b: head.fc.as_ref().map(|(_, b)| b.row(0).to_vec()),
        beta: head.beta.values().to_vec(),
        baseline,
        train_c_index,
    };
    let json = serde_json::to_string_pretty(&file)?;
    stage_outputs(&cfg.out_dir, |stage| {
        write_text(&stage.join("survival_model.json"), &(json + "\n"))
    })
}

fn folds_csv(cv: &CvOutcome) -> String {
    let mut csv = String::from("fold,n_test,c_index,valid\n");
    for f in &cv.folds {
        writeln!(
            csv,
            "{},{},{},{}",
            f.fold,
            f.n_test,
            opt_float(f.c_index),
            f.c_index.is_some()
        )
        .expect("string write");
    }
    csv
}

/// KM curves for the median-split risk groups plus the log-rank comparison.
/// Returns the CSV body and the (chi_square, p_value) pair when both groups
/// are populated.
fn km_csv(
    scores: &[f64],
    labels: &[SurvivalLabel],
) -> Result<(String, Option<(f64, f64)>)> {
    // stratify on predicted risk: higher risk = shorter predicted survival
    let risk: Vec<f64> = scores.iter().map(|s| -s).collect();
    let groups = stratify_risk(&ScoredCohort::new(risk, labels.to_vec())?)?;
    let mut csv = String::from("group,time,survival,at_risk,events\n");
    let mut curves = Vec::new();
    for (name, idx) in [("low", &groups.low), ("high", &groups.high)] {
        if idx.is_empty() {
            continue;
        }
        let group_labels: Vec<SurvivalLabel> = idx.iter().map(|&i| labels[i]).collect();
        let curve = kaplan_meier(&group_labels)?;
        for k in 0..curve.times.len() {
            writeln!(
                csv,
                "{},{},{},{},{}",
                name, curve.times[k], curve.survival[k], curve.at_risk[k], curve.events[k]
            )
            .expect("string write");
        }
        curves.push(group_labels);
    }
    let logrank = if groups.degenerate || curves.len() < 2 {
        log::warn!("risk stratification degenerate; skipping the log-rank test");
        None
    } else {
        Some(logrank_test(&curves[0], &curves[1])?)
    };
    Ok((csv, logrank))
}

#[derive(serde::Serialize)]
struct EvalSummary {
    mean_c_index: f64,
    std_c_index: f64,
    fold_count: usize,
    valid_folds: usize,
    tie_credit: String,
    oracle: bool,
    logrank_chi_square: Option<f64>,
    logrank_p_value: Option<f64>,
}

fn write_eval_outputs(
    out_dir: &Path,
    cv: &CvOutcome,
    labels: &[SurvivalLabel],
    tie_credit: &str,
    oracle: bool,
) -> Result<()> {
    let (km, logrank) = km_csv(&cv.scores, labels)?;
    let summary = EvalSummary {
        mean_c_index: cv.mean,
        std_c_index: cv.std,
        fold_count: cv.folds.len(),
        valid_folds: cv.folds.iter().filter(|f| f.c_index.is_some()).count(),
        tie_credit: tie_credit.to_string(),
        oracle,
        logrank_chi_square: logrank.map(|(chi, _)| chi),
        logrank_p_value: logrank.map(|(_, p)| p),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    stage_outputs(out_dir, |stage| {
        write_text(&stage.join("folds.csv"), &folds_csv(cv))?;
        write_text(&stage.join("summary.json"), &(json + "\n"))?;
        write_text(&stage.join("km_curves.csv"), &km)
    })
}

/// Cross-validated evaluation. With `oracle_latents` the model's scores are
/// replaced by the stored ground-truth latents (negated), turning the run
/// into a pure metric check over the same fold splits.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    oracle_latents: Option<&Path>,
) -> Result<()> {
    let (_, patients) = embed_and_complete(cfg, checkpoint)?;
    let labels = pipeline::labels(&patients);
    let opts = CvOptions::from_config(cfg)?;

    let cv = match oracle_latents {
        None => {
            let fused = fuse_all(&patients, ModalitySubset::All)?;
            cross_validate(&fused, &labels, &opts)?
        }
        Some(path) => {
            let latents = read_latents(path)
                .with_context(|| format!("reading latents {}", path.display()))?;
            let by_id: HashMap<&str, f64> =
                latents.iter().map(|(id, u)| (id.as_str(), *u)).collect();
            let scores: Vec<f64> = patients
                .iter()
                .map(|p| {
                    by_id
                        .get(p.id.as_str())
                        .map(|u| -u)
                        .ok_or_else(|| anyhow::anyhow!("no latent for patient {}", p.id))
                })
                .collect::<Result<_>>()?;
            score_folds(&scores, &labels, &opts)?
        }
    };
    log::info!("mean C-index {:.4} +/- {:.4}", cv.mean, cv.std);
    write_eval_outputs(
        &cfg.out_dir,
        &cv,
        &labels,
        &cfg.metrics.tie_credit,
        oracle_latents.is_some(),
    )
}

/// Both ablation tables: modality subsets with dropped fusion slices, and
/// RNA replacement at each configured percentage.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (_, patients) = embed_and_complete(cfg, checkpoint)?;
    let labels = pipeline::labels(&patients);
    let opts = CvOptions::from_config(cfg)?;
    let kind = cfg.impute_kind()?;

    let mut table2 = String::from("modalities,mean_c_index,std_c_index\n");
    for subset in ModalitySubset::TABLE2 {
        let fused = fuse_all(&patients, subset)?;
        let cv = cross_validate(&fused, &labels, &opts)?;
        writeln!(table2, "{},{},{}", subset.label(), cv.mean, cv.std).expect("string write");
        log::info!("{}: {:.4} +/- {:.4}", subset.label(), cv.mean, cv.std);
    }

    let mut table3 = String::from("percent,imputation,replaced,mean_c_index,std_c_index\n");
    for &percent in &cfg.ablation.percentages {
        let (replaced, chosen) = pipeline::replace_rna_level(&patients, percent, kind, cfg.seed)?;
        let fused = fuse_all(&replaced, ModalitySubset::All)?;
        let cv = cross_validate(&fused, &labels, &opts)?;
        writeln!(
            table3,
            "{},{},{},{},{}",
            percent,
            cfg.ablation.impute,
            chosen.len(),
            cv.mean,
            cv.std
        )
        .expect("string write");
        log::info!(
            "{percent}% replaced ({} patients): {:.4} +/- {:.4}",
            chosen.len(),
            cv.mean,
            cv.std
        );
    }

    stage_outputs(&cfg.out_dir, |stage| {
        write_text(&stage.join("table2.csv"), &table2)?;
        write_text(&stage.join("table3.csv"), &table3)
    })
}
