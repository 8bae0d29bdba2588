//! Stage-1 self-supervised pretraining: joint optimization of the combined
//! alignment loss over complete modality triplets, with periodic prototype
//! cluster-target refreshes and exact checkpoint resume.

pub mod checkpoint;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cpm::{cpm_loss_node, kmeans_cluster, ClusterAssignments, PrototypeBank};
use crate::data::PatientRecord;
use crate::encoders::{
    project, EmbeddingTriplet, EncoderConfig, ExpressionEncoder, ExpressionVector,
    ProjectedTriplet, ProjectionHead, VolumeEncoder, VolumeTensor,
};
use crate::error::{CoreError, Result};
use crate::mpe::mpe_loss_node;
use crate::numeric::tape::{NodeId, Tape};
use crate::optim::{collect_named_grads, round_array_f32, Adam, AdamConfig};
use checkpoint::{Checkpoint, CheckpointMeta, EpochLoss, StoredAssignments};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kmeans_refresh_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-4,
            kmeans_refresh_every: 1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1.is_finite() && self.alpha2.is_finite())
            || self.alpha1 < 0.0
            || self.alpha2 < 0.0
        {
            return Err(CoreError::InvalidConfig(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.alpha1 == 0.0 && self.alpha2 == 0.0 {
            return Err(CoreError::InvalidConfig(
                "at least one loss weight must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::InvalidConfig(
                "batch_size must be at least 2".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.kmeans_refresh_every == 0 {
            return Err(CoreError::InvalidConfig(
                "kmeans_refresh_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model and continue training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainSetup {
    pub encoder: EncoderConfig,
    pub volume_shape: (usize, usize, usize),
    pub gene_count: usize,
    pub prototype_count: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub pretrain: PretrainConfig,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        if self.gene_count == 0 {
            return Err(CoreError::InvalidConfig("gene_count must be positive".into()));
        }
        if self.prototype_count == 0 {
            return Err(CoreError::InvalidConfig(
                "prototype_count must be positive".into(),
            ));
        }
        if !(self.tau1 > 0.0) {
            return Err(CoreError::NonPositiveTemperature(self.tau1));
        }
        if !(self.tau2 > 0.0) {
            return Err(CoreError::NonPositiveTemperature(self.tau2));
        }
        Ok(())
    }
}

/// One complete modality triplet ready for pretraining.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub ct: VolumeTensor,
    pub pet: VolumeTensor,
    pub rna: ExpressionVector,
}

/// Keep complete records; return skipped indices alongside.
pub fn complete_examples(records: &[PatientRecord]) -> (Vec<TrainingExample>, Vec<usize>) {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match (&r.ct, &r.pet, &r.rna) {
            (Some(ct), Some(pet), Some(rna)) => examples.push(TrainingExample {
                ct: ct.clone(),
                pet: pet.clone(),
                rna: rna.clone(),
            }),
            _ => skipped.push(i),
        }
    }
    (examples, skipped)
}

/// All trainable stage-1 state: three encoders, three projection heads, and
/// the prototype bank.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub ct: VolumeEncoder,
    pub pet: VolumeEncoder,
    pub rna: ExpressionEncoder,
    pub head_t: ProjectionHead,
    pub head_p: ProjectionHead,
    pub head_r: ProjectionHead,
    pub bank: PrototypeBank,
}

impl PretrainModel {
    /// All weight draws come from the encoder seed, with the prototype bank
    /// drawn last so encoder weights do not depend on the prototype count.
    pub fn init(setup: &PretrainSetup) -> Result<Self> {
        setup.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.encoder.seed);
        let ct = VolumeEncoder::init(&setup.encoder, setup.volume_shape, &mut rng)?;
        let pet = VolumeEncoder::init(&setup.encoder, setup.volume_shape, &mut rng)?;
        let rna = ExpressionEncoder::init(&setup.encoder, setup.gene_count, &mut rng)?;
        let width = setup.encoder.model_width;
        let pdim = setup.encoder.projection_dim;
        let head_t = ProjectionHead::init(width, pdim, &mut rng);
        let head_p = ProjectionHead::init(width, pdim, &mut rng);
        let head_r = ProjectionHead::init(width, pdim, &mut rng);
        let bank = PrototypeBank::init(setup.prototype_count, pdim, setup.tau2, &mut rng)?;
        let mut model = Self {
            ct,
            pet,
            rna,
            head_t,
            head_p,
            head_r,
            bank,
        };
        for (_, p) in model.named_params_mut() {
            round_array_f32(p);
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.ct.named_params("ct");
        out.extend(self.pet.named_params("pet"));
        out.extend(self.rna.named_params("rna"));
        out.push(("proj_t.w".to_string(), &self.head_t.w));
        out.push(("proj_p.w".to_string(), &self.head_p.w));
        out.push(("proj_r.w".to_string(), &self.head_r.w));
        out.push(("prototypes".to_string(), self.bank.prototypes()));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.ct.named_params_mut("ct");
        out.extend(self.pet.named_params_mut("pet"));
        out.extend(self.rna.named_params_mut("rna"));
        out.push(("proj_t.w".to_string(), &mut self.head_t.w));
        out.push(("proj_p.w".to_string(), &mut self.head_p.w));
        out.push(("proj_r.w".to_string(), &mut self.head_r.w));
        out.push(("prototypes".to_string(), self.bank.prototypes_mut()));
        out
    }

    pub fn to_sections(&self) -> BTreeMap<String, Array2<f64>> {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.clone()))
            .collect()
    }

    /// Rebuild from checkpoint sections; shapes come from the setup.
    pub fn from_sections(
        setup: &PretrainSetup,
        sections: &BTreeMap<String, Array2<f64>>,
    ) -> Result<Self> {
        let mut model = Self::init(setup)?;
        for (name, p) in model.named_params_mut() {
            let stored = sections
                .get(&name)
                .ok_or_else(|| CoreError::MissingSection(name.clone()))?;
            if stored.dim() != p.dim() {
                return Err(CoreError::DimMismatch {
                    context: "checkpoint section shape",
                    expected: p.len(),
                    got: stored.len(),
                });
            }
            p.assign(stored);
        }
        Ok(model)
    }

    pub fn embed_example(&self, ex: &TrainingExample) -> Result<EmbeddingTriplet> {
        Ok(EmbeddingTriplet {
            t: self.ct.encode(&ex.ct)?,
            p: self.pet.encode(&ex.pet)?,
            r: self.rna.encode(&ex.rna)?,
        })
    }

    /// Evaluation-mode unit-norm projections for one example.
    pub fn project_example(&self, ex: &TrainingExample) -> Result<ProjectedTriplet> {
        let e = self.embed_example(ex)?;
        project(&e, &self.head_t, &self.head_p, &self.head_r)
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub checkpoint: Checkpoint,
}

struct StagedModel {
    ct: crate::encoders::VolumeEncoderNodes,
    pet: crate::encoders::VolumeEncoderNodes,
    rna: crate::encoders::ExpressionEncoderNodes,
    head_t: NodeId,
    head_p: NodeId,
    head_r: NodeId,
    prototypes: NodeId,
    named: Vec<(String, NodeId)>,
}

fn stage_model(tape: &mut Tape, model: &PretrainModel) -> StagedModel {
    let (ct, mut named) = model.ct.stage(tape, "ct");
    let (pet, n2) = model.pet.stage(tape, "pet");
    named.extend(n2);
    let (rna, n3) = model.rna.stage(tape, "rna");
    named.extend(n3);
    let (head_t, n4) = model.head_t.stage(tape, "proj_t");
    named.extend(n4);
    let (head_p, n5) = model.head_p.stage(tape, "proj_p");
    named.extend(n5);
    let (head_r, n6) = model.head_r.stage(tape, "proj_r");
    named.extend(n6);
    let prototypes = tape.leaf(model.bank.prototypes().clone());
    named.push(("prototypes".to_string(), prototypes));
    StagedModel {
        ct,
        pet,
        rna,
        head_t,
        head_p,
        head_r,
        prototypes,
        named,
    }
}

/// Forward a batch through staged weights: (t_tilde, p_tilde, r_tilde) nodes,
/// each batch x projection_dim with unit-norm rows.
fn forward_batch(
    tape: &mut Tape,
    model: &PretrainModel,
    staged: &StagedModel,
    examples: &[TrainingExample],
    batch: &[usize],
) -> Result<(NodeId, NodeId, NodeId)> {
    let mut t_rows = Vec::with_capacity(batch.len());
    let mut p_rows = Vec::with_capacity(batch.len());
    for &i in batch {
        t_rows.push(model.ct.forward(tape, &staged.ct, &examples[i].ct)?);
        p_rows.push(model.pet.forward(tape, &staged.pet, &examples[i].pet)?);
    }
    let t = tape.concat_rows(&t_rows);
    let p = tape.concat_rows(&p_rows);

    let genes = model.rna.gene_count;
    let mut x = Array2::zeros((batch.len(), genes));
    for (row, &i) in batch.iter().enumerate() {
        let values = examples[i].rna.values().values();
        if values.len() != genes {
            return Err(CoreError::DimMismatch {
                context: "pretraining expression batch",
                expected: genes,
                got: values.len(),
            });
        }
        for (col, v) in values.iter().enumerate() {
            x[[row, col]] = *v;
        }
    }
    let xc = tape.constant(x);
    let r = model.rna.forward(tape, &staged.rna, xc)?;

    let t_tilde = model.head_t.forward(tape, staged.head_t, t)?;
    let p_tilde = model.head_p.forward(tape, staged.head_p, p)?;
    let r_tilde = model.head_r.forward(tape, staged.head_r, r)?;
    Ok((t_tilde, p_tilde, r_tilde))
}

/// Value-only loss evaluation on constants, used to keep the history complete
/// for a term whose weight is zero without touching any gradient path.
fn loss_value_only(
    t: &Array2<f64>,
    p: &Array2<f64>,
    r: &Array2<f64>,
    setup: &PretrainSetup,
    bank: &PrototypeBank,
    assigns: Option<&ClusterAssignments>,
    want_mpe: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let tn = tape.constant(t.clone());
    let pn = tape.constant(p.clone());
    let rn = tape.constant(r.clone());
    let node = if want_mpe {
        mpe_loss_node(&mut tape, tn, pn, rn, setup.tau1)?
    } else {
        let proto = tape.constant(bank.prototypes().clone());
        let assigns = assigns.expect("assignments exist whenever cpm value is requested");
        cpm_loss_node(&mut tape, tn, pn, rn, proto, setup.tau2, assigns)?
    };
    Ok(tape.scalar(node))
}

fn refresh_assignments(
    model: &PretrainModel,
    examples: &[TrainingExample],
) -> Result<ClusterAssignments> {
    let n = examples.len();
    let mut points = Vec::with_capacity(3 * n);
    let mut p_part = Vec::with_capacity(n);
    let mut r_part = Vec::with_capacity(n);
    for ex in examples {
        let pt = model.project_example(ex)?;
        points.push(pt.t_tilde);
        p_part.push(pt.p_tilde);
        r_part.push(pt.r_tilde);
    }
    points.extend(p_part);
    points.extend(r_part);
    let k = model.bank.k();
    let outcome = kmeans_cluster(&points, k, Some(model.bank.prototypes()), 50, 1e-6)?;
    let a = outcome.assignments;
    ClusterAssignments::new(a[..n].to_vec(), a[n..2 * n].to_vec(), a[2 * n..].to_vec(), k)
}

fn epoch_shuffle(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

fn adam_sections(adam: &Adam) -> BTreeMap<String, Array2<f64>> {
    let (m, v) = adam.moments();
    let mut out = BTreeMap::new();
    for (name, a) in m {
        out.insert(format!("adam.m.{name}"), a.clone());
    }
    for (name, a) in v {
        out.insert(format!("adam.v.{name}"), a.clone());
    }
    out
}

fn adam_from_sections(
    sections: &BTreeMap<String, Array2<f64>>,
    cfg: AdamConfig,
    step: u64,
) -> Adam {
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, a) in sections {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), a.clone());
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), a.clone());
        }
    }
    Adam::restore(cfg, step, m, v)
}

/// Train from scratch, or continue from `resume` (same setup, possibly with
/// a larger epoch target). The returned checkpoint contains the full model,
/// optimizer state, loss history, and current cluster targets, and resuming
/// from it reproduces an uninterrupted run exactly.
pub fn run_pretraining(
    examples: &[TrainingExample],
    setup: &PretrainSetup,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    setup.validate()?;
    if examples.is_empty() {
        return Err(CoreError::EmptyInput("pretraining examples"));
    }
    for ex in examples {
        if ex.ct.shape() != setup.volume_shape || ex.pet.shape() != setup.volume_shape {
            return Err(CoreError::VolumeShapeMismatch {
                expected: setup.volume_shape,
                got: if ex.ct.shape() != setup.volume_shape {
                    ex.ct.shape()
                } else {
                    ex.pet.shape()
                },
            });
        }
        if ex.rna.gene_count() != setup.gene_count {
            return Err(CoreError::DimMismatch {
                context: "pretraining gene count",
                expected: setup.gene_count,
                got: ex.rna.gene_count(),
            });
        }
    }

    let n = examples.len();
    let cfg = &setup.pretrain;
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);

    let (mut model, mut adam, start_epoch, mut history, mut assignments) = match resume {
        None => (
            PretrainModel::init(setup)?,
            Adam::new(adam_cfg),
            0,
            Vec::new(),
            None,
        ),
        Some(ck) => {
            let mut stored_setup = ck.meta.setup.clone();
            stored_setup.pretrain.epochs = setup.pretrain.epochs;
            if stored_setup != *setup {
                return Err(CoreError::InvalidConfig(
                    "resume setup differs from the checkpoint (only epochs may change)".into(),
                ));
            }
            let model = PretrainModel::from_sections(setup, &ck.sections)?;
            let adam = adam_from_sections(&ck.sections, adam_cfg, ck.meta.adam_step);
            let assignments = match &ck.meta.assignments {
                None => None,
                Some(sa) => {
                    if sa.z_t.len() != n {
                        return Err(CoreError::BatchMismatch {
                            left: sa.z_t.len(),
                            right: n,
                        });
                    }
                    Some(ClusterAssignments::new(
                        sa.z_t.clone(),
                        sa.z_p.clone(),
                        sa.z_r.clone(),
                        sa.k,
                    )?)
                }
            };
            (
                model,
                adam,
                ck.meta.epochs_completed,
                ck.meta.loss_history.clone(),
                assignments,
            )
        }
    };

    let use_mpe = cfg.alpha1 > 0.0;
    let use_cpm = cfg.alpha2 > 0.0;

    for epoch in start_epoch..cfg.epochs {
        if epoch % cfg.kmeans_refresh_every == 0 || assignments.is_none() {
            assignments = Some(refresh_assignments(&model, examples)?);
        }
        let assigns = assignments.as_ref().expect("assignments refreshed above");

        let order = epoch_shuffle(cfg.seed, epoch, n);
        let mut sum_mpe = 0.0;
        let mut sum_cpm = 0.0;
        let mut sum_total = 0.0;
        let mut batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let staged = stage_model(&mut tape, &model);
            let (t, p, r) = forward_batch(&mut tape, &model, &staged, examples, batch)?;

            let batch_assigns = ClusterAssignments::new(
                batch.iter().map(|&i| assigns.z_t[i]).collect(),
                batch.iter().map(|&i| assigns.z_p[i]).collect(),
                batch.iter().map(|&i| assigns.z_r[i]).collect(),
                assigns.k,
            )?;

            let mpe_node = if use_mpe {
                Some(mpe_loss_node(&mut tape, t, p, r, setup.tau1)?)
            } else {
                None
            };
            let cpm_node = if use_cpm {
                Some(cpm_loss_node(
                    &mut tape,
                    t,
                    p,
                    r,
                    staged.prototypes,
                    setup.tau2,
                    &batch_assigns,
                )?)
            } else {
                None
            };

            // value of a structurally skipped term, for the history only
            let value_only = |want_mpe: bool| -> Result<f64> {
                loss_value_only(
                    tape.value(t),
                    tape.value(p),
                    tape.value(r),
                    setup,
                    &model.bank,
                    Some(&batch_assigns),
                    want_mpe,
                )
            };
            let l_mpe = match mpe_node {
                Some(id) => tape.scalar(id),
                None => value_only(true)?,
            };
            let l_cpm = match cpm_node {
                Some(id) => tape.scalar(id),
                None => value_only(false)?,
            };
            if !l_mpe.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    term: "l_mpe",
                    epoch,
                });
            }
            if !l_cpm.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    term: "l_cpm",
                    epoch,
                });
            }

            let root = match (mpe_node, cpm_node) {
                (Some(m), Some(c)) => {
                    let ms = tape.scale(m, cfg.alpha1);
                    let cs = tape.scale(c, cfg.alpha2);
                    tape.add(ms, cs)
                }
                (Some(m), None) => tape.scale(m, cfg.alpha1),
                (None, Some(c)) => tape.scale(c, cfg.alpha2),
                (None, None) => unreachable!("validated: at least one weight positive"),
            };
            let l_total = cfg.alpha1 * l_mpe + cfg.alpha2 * l_cpm;
            if !tape.scalar(root).is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    term: "l_total",
                    epoch,
                });
            }

            let grads = tape.backward(root);
            let grad_map = collect_named_grads(&grads, &staged.named);
            let mut params = model.named_params_mut();
            adam.step(&mut params, &grad_map);
            drop(params);
            if use_cpm {
                model.bank.renormalize_rounded()?;
            }

            sum_mpe += l_mpe;
            sum_cpm += l_cpm;
            sum_total += l_total;
            batches += 1;
        }

        history.push(EpochLoss {
            epoch,
            l_mpe: sum_mpe / batches as f64,
            l_cpm: sum_cpm / batches as f64,
            l_total: sum_total / batches as f64,
        });
    }

    let mut sections = model.to_sections();
    sections.extend(adam_sections(&adam));
    let stored_assignments = assignments.map(|a| StoredAssignments {
        z_t: a.z_t,
        z_p: a.z_p,
        z_r: a.z_r,
        k: a.k,
    });
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            setup: setup.clone(),
            epochs_completed: cfg.epochs,
            adam_step: adam.step_count(),
            loss_history: history,
            assignments: stored_assignments,
            extra: serde_json::Map::new(),
        },
        sections,
    };
    Ok(PretrainOutcome { model, checkpoint })
}
