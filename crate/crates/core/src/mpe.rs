//! Batch-wise contrastive alignment between modality pairs: a directional
//! InfoNCE term per ordered pair, averaged over the three cyclic directions.

use ndarray::Array2;

use crate::encoders::ProjectedTriplet;
use crate::error::{CoreError, Result};
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::{row_vector, stack_rows, DenseVector, GradientRecord};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MpeConfig {
    pub tau1: f64,
}

impl Default for MpeConfig {
    fn default() -> Self {
        Self { tau1: 0.1 }
    }
}

impl MpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0) {
            return Err(CoreError::NonPositiveTemperature(self.tau1));
        }
        Ok(())
    }
}

/// Batch of projected triplets.
#[derive(Debug, Clone)]
pub struct ModalityBatch {
    rows: Vec<ProjectedTriplet>,
}

impl ModalityBatch {
    pub fn new(rows: Vec<ProjectedTriplet>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptyInput("ModalityBatch"));
        }
        let d = rows[0].t_tilde.dim();
        for r in &rows {
            if r.t_tilde.dim() != d || r.p_tilde.dim() != d || r.r_tilde.dim() != d {
                return Err(CoreError::DimMismatch {
                    context: "ModalityBatch",
                    expected: d,
                    got: r.t_tilde.dim().min(r.p_tilde.dim()).min(r.r_tilde.dim()),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ProjectedTriplet] {
        &self.rows
    }

    pub fn stack_t(&self) -> Array2<f64> {
        stack_rows(&self.rows.iter().map(|r| r.t_tilde.clone()).collect::<Vec<_>>())
            .expect("validated batch")
    }

    pub fn stack_p(&self) -> Array2<f64> {
        stack_rows(&self.rows.iter().map(|r| r.p_tilde.clone()).collect::<Vec<_>>())
            .expect("validated batch")
    }

    pub fn stack_r(&self) -> Array2<f64> {
        stack_rows(&self.rows.iter().map(|r| r.r_tilde.clone()).collect::<Vec<_>>())
            .expect("validated batch")
    }
}

/// Build the directional loss on the tape from staged anchor/positive nodes
/// (each B x d): mean over rows of `lse(S_i.) - S_ii` with
/// `S = normalize(A) normalize(P)^T / tau`.
pub fn pairwise_loss_node(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(CoreError::NonPositiveTemperature(tau));
    }
    let b = tape.value(anchors).nrows();
    if tape.value(positives).nrows() != b {
        return Err(CoreError::BatchMismatch {
            left: b,
            right: tape.value(positives).nrows(),
        });
    }
    let an = tape.row_l2_normalize(anchors)?;
    let pn = tape.row_l2_normalize(positives)?;
    let pt = tape.transpose(pn);
    let sims = tape.matmul(an, pt);
    let logits = tape.scale(sims, 1.0 / tau);
    let lse = tape.row_log_sum_exp(logits);
    let lse_sum = tape.sum_all(lse);
    let diag = tape.mul_mask(logits, Array2::eye(b));
    let diag_sum = tape.sum_all(diag);
    let total = tape.sub(lse_sum, diag_sum);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Directional InfoNCE between an anchor list and a positive list.
///
/// Gradients are keyed `anchor[i]` and `positive[i]`.
pub fn pairwise_contrastive_loss(
    anchor: &[DenseVector],
    positive: &[DenseVector],
    cfg: &MpeConfig,
) -> Result<GradientRecord> {
    cfg.validate()?;
    if anchor.len() != positive.len() {
        return Err(CoreError::BatchMismatch {
            left: anchor.len(),
            right: positive.len(),
        });
    }
    if anchor.is_empty() {
        return Err(CoreError::EmptyInput("pairwise_contrastive_loss"));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(stack_rows(anchor)?);
    let p = tape.leaf(stack_rows(positive)?);
    let loss = pairwise_loss_node(&mut tape, a, p, cfg.tau1)?;
    let grads = tape.backward(loss);

    let mut record = GradientRecord::new(tape.scalar(loss));
    let ga = grads.wrt(a).expect("anchor gradient");
    let gp = grads.wrt(p).expect("positive gradient");
    for i in 0..anchor.len() {
        record.grads.insert(format!("anchor[{i}]"), row_vector(ga, i));
        record
            .grads
            .insert(format!("positive[{i}]"), row_vector(gp, i));
    }
    Ok(record)
}

/// Mean of the three directional losses t->p, p->r, r->t.
///
/// Gradients are keyed `t[i]`, `p[i]`, `r[i]`.
pub fn mpe_loss(batch: &ModalityBatch, cfg: &MpeConfig) -> Result<GradientRecord> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let t = tape.leaf(batch.stack_t());
    let p = tape.leaf(batch.stack_p());
    let r = tape.leaf(batch.stack_r());
    let loss = mpe_loss_node(&mut tape, t, p, r, cfg.tau1)?;
    let grads = tape.backward(loss);

    let mut record = GradientRecord::new(tape.scalar(loss));
    for (name, id) in [("t", t), ("p", p), ("r", r)] {
        let g = grads.wrt(id).expect("modality gradient");
        for i in 0..batch.len() {
            record.grads.insert(format!("{name}[{i}]"), row_vector(g, i));
        }
    }
    Ok(record)
}

/// Tape composition of the three directions from staged modality nodes.
pub fn mpe_loss_node(
    tape: &mut Tape,
    t: NodeId,
    p: NodeId,
    r: NodeId,
    tau: f64,
) -> Result<NodeId> {
    let l_tp = pairwise_loss_node(tape, t, p, tau)?;
    let l_pr = pairwise_loss_node(tape, p, r, tau)?;
    let l_rt = pairwise_loss_node(tape, r, t, tau)?;
    let s1 = tape.add(l_tp, l_pr);
    let s2 = tape.add(s1, l_rt);
    Ok(tape.scale(s2, 1.0 / 3.0))
}
