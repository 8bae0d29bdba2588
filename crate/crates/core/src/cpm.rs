//! Cross-patient prototype alignment: a trainable unit-norm prototype bank,
//! spherical K-means assignments over pooled modality embeddings, and a
//! cyclic cross-entropy that pulls each modality toward the cluster of the
//! next one.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::mpe::ModalityBatch;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::{
    cosine_similarity, row_vector, softmax_temperature, stack_rows, DenseVector, GradientRecord,
};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    prototypes: Array2<f64>,
    pub tau2: f64,
}

impl PrototypeBank {
    /// Random unit-norm prototypes.
    pub fn init(k: usize, dim: usize, tau2: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(CoreError::InvalidConfig(
                "prototype bank needs k >= 1 and dim >= 1".into(),
            ));
        }
        let raw = Array2::from_shape_fn((k, dim), |_| rng.gen_range(-1.0..1.0));
        Self::from_matrix(raw, tau2)
    }

    /// Normalizes rows; errors on a zero row or bad temperature.
    pub fn from_matrix(mut prototypes: Array2<f64>, tau2: f64) -> Result<Self> {
        if !(tau2 > 0.0) {
            return Err(CoreError::NonPositiveTemperature(tau2));
        }
        normalize_rows(&mut prototypes)?;
        Ok(Self { prototypes, tau2 })
    }

    pub fn k(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn prototype(&self, k: usize) -> DenseVector {
        row_vector(&self.prototypes, k)
    }

    /// Replace raw prototype values (e.g. after a gradient step) and restore
    /// the unit-norm invariant.
    pub fn set_prototypes(&mut self, raw: Array2<f64>) -> Result<()> {
        if raw.dim() != self.prototypes.dim() {
            return Err(CoreError::DimMismatch {
                context: "set_prototypes",
                expected: self.prototypes.ncols(),
                got: raw.ncols(),
            });
        }
        let mut raw = raw;
        normalize_rows(&mut raw)?;
        self.prototypes = raw;
        Ok(())
    }

    /// Raw storage for optimizer updates. Callers must restore the unit-norm
    /// invariant afterwards, e.g. via [`PrototypeBank::renormalize_rounded`].
    pub(crate) fn prototypes_mut(&mut self) -> &mut Array2<f64> {
        &mut self.prototypes
    }

    /// Renormalize rows, then snap to the f32 grid used by checkpoints. The
    /// residual norm error is bounded by f32 rounding, well inside 1e-6.
    pub fn renormalize_rounded(&mut self) -> Result<()> {
        normalize_rows(&mut self.prototypes)?;
        crate::optim::round_array_f32(&mut self.prototypes);
        Ok(())
    }
}

fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut row in m.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= 0.0 || !n.is_finite() {
            return Err(CoreError::ZeroNorm {
                context: "prototype row",
            });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(())
}

/// Per-patient cluster indices for the three modalities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignments {
    pub z_t: Vec<usize>,
    pub z_p: Vec<usize>,
    pub z_r: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignments {
    pub fn new(z_t: Vec<usize>, z_p: Vec<usize>, z_r: Vec<usize>, k: usize) -> Result<Self> {
        if z_t.len() != z_p.len() || z_p.len() != z_r.len() {
            return Err(CoreError::BatchMismatch {
                left: z_t.len(),
                right: z_p.len().max(z_r.len()),
            });
        }
        for &z in z_t.iter().chain(&z_p).chain(&z_r) {
            if z >= k {
                return Err(CoreError::InvalidConfig(format!(
                    "cluster index {z} out of range for k = {k}"
                )));
            }
        }
        Ok(Self { z_t, z_p, z_r, k })
    }

    pub fn len(&self) -> usize {
        self.z_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_t.is_empty()
    }

    pub fn z_t_one_hot(&self, i: usize) -> DenseVector {
        one_hot(self.z_t[i], self.k)
    }

    pub fn z_p_one_hot(&self, i: usize) -> DenseVector {
        one_hot(self.z_p[i], self.k)
    }

    pub fn z_r_one_hot(&self, i: usize) -> DenseVector {
        one_hot(self.z_r[i], self.k)
    }
}

pub fn one_hot(index: usize, k: usize) -> DenseVector {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    DenseVector::from(v)
}

fn one_hot_matrix(indices: &[usize], k: usize) -> Array2<f64> {
    let mut m = Array2::zeros((indices.len(), k));
    for (i, &z) in indices.iter().enumerate() {
        m[[i, z]] = 1.0;
    }
    m
}

/// Softmax over cosine similarities to every prototype.
pub fn prototype_probabilities(e: &DenseVector, bank: &PrototypeBank) -> Result<DenseVector> {
    if e.dim() != bank.dim() {
        return Err(CoreError::DimMismatch {
            context: "prototype_probabilities",
            expected: bank.dim(),
            got: e.dim(),
        });
    }
    let sims: Vec<f64> = (0..bank.k())
        .map(|k| cosine_similarity(e, &bank.prototype(k)))
        .collect::<Result<_>>()?;
    Ok(DenseVector::from(softmax_temperature(&sims, bank.tau2)?))
}

#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, first entry before any update.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

/// Spherical K-means under cosine distance (1 - cosine similarity).
///
/// `init` seeds the centroids (rows are normalized); without it a
/// deterministic farthest-point sweep over the input is used, which requires
/// at least `k` points. Empty clusters are re-seeded with the point currently
/// farthest from its own centroid.
pub fn kmeans_cluster(
    points: &[DenseVector],
    k: usize,
    init: Option<&Array2<f64>>,
    max_iters: usize,
    tol: f64,
) -> Result<KmeansOutcome> {
    if points.is_empty() {
        return Err(CoreError::EmptyInput("kmeans_cluster"));
    }
    if k == 0 {
        return Err(CoreError::InvalidConfig("k must be >= 1".into()));
    }
    let mut p = stack_rows(points)?;
    normalize_rows(&mut p).map_err(|_| CoreError::ZeroNorm {
        context: "kmeans_cluster point",
    })?;
    let n = p.nrows();

    let mut c = match init {
        Some(m) => {
            if m.ncols() != p.ncols() || m.nrows() != k {
                return Err(CoreError::DimMismatch {
                    context: "kmeans_cluster init",
                    expected: p.ncols(),
                    got: m.ncols(),
                });
            }
            let mut c = m.clone();
            normalize_rows(&mut c)?;
            c
        }
        None => {
            if n < k {
                return Err(CoreError::TooFewPoints { k, points: n });
            }
            farthest_point_init(&p, k)
        }
    };

    let assign = |p: &Array2<f64>, c: &Array2<f64>| -> Vec<usize> {
        (0..p.nrows())
            .map(|i| {
                let mut best = 0;
                let mut best_dot = f64::NEG_INFINITY;
                for kk in 0..c.nrows() {
                    let dot: f64 = p.row(i).dot(&c.row(kk));
                    if dot > best_dot {
                        best_dot = dot;
                        best = kk;
                    }
                }
                best
            })
            .collect()
    };
    let inertia_of = |p: &Array2<f64>, c: &Array2<f64>, a: &[usize]| -> f64 {
        a.iter()
            .enumerate()
            .map(|(i, &kk)| 1.0 - p.row(i).dot(&c.row(kk)))
            .sum()
    };

    let mut assignments = assign(&p, &c);
    let mut trace = vec![inertia_of(&p, &c, &assignments)];
    let mut iterations = 0;

    for _ in 0..max_iters {
        // update step: normalized mean per cluster, empty clusters re-seeded
        let mut new_c = Array2::zeros(c.dim());
        let mut counts = vec![0usize; k];
        for (i, &kk) in assignments.iter().enumerate() {
            for j in 0..p.ncols() {
                new_c[[kk, j]] += p[[i, j]];
            }
            counts[kk] += 1;
        }
        let mut claimed = vec![false; n];
        for kk in 0..k {
            if counts[kk] == 0 {
                let far = (0..n)
                    .filter(|&i| !claimed[i])
                    .max_by(|&a, &b| {
                        let da = 1.0 - p.row(a).dot(&c.row(assignments[a]));
                        let db = 1.0 - p.row(b).dot(&c.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .expect("nonempty point set");
                claimed[far] = true;
                for j in 0..p.ncols() {
                    new_c[[kk, j]] = p[[far, j]];
                }
            } else {
                let norm = new_c
                    .row(kk)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > 0.0 {
                    for j in 0..p.ncols() {
                        new_c[[kk, j]] /= norm;
                    }
                } else {
                    // members cancel exactly; keep the previous centroid
                    for j in 0..p.ncols() {
                        new_c[[kk, j]] = c[[kk, j]];
                    }
                }
            }
        }

        let shift = (0..k)
            .map(|kk| {
                (0..p.ncols())
                    .map(|j| (new_c[[kk, j]] - c[[kk, j]]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        c = new_c;
        iterations += 1;

        let new_assignments = assign(&p, &c);
        trace.push(inertia_of(&p, &c, &new_assignments));
        let unchanged = new_assignments == assignments;
        assignments = new_assignments;
        if unchanged || shift < tol {
            break;
        }
    }

    Ok(KmeansOutcome {
        centroids: c,
        inertia: *trace.last().expect("at least one inertia"),
        assignments,
        inertia_trace: trace,
        iterations,
    })
}

/// Deterministic maximin seeding: start from point 0, then repeatedly take
/// the point farthest (cosine distance) from the chosen set.
fn farthest_point_init(p: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = p.nrows();
    let mut chosen = vec![0usize];
    let mut min_dist: Vec<f64> = (0..n).map(|i| 1.0 - p.row(i).dot(&p.row(0))).collect();
    while chosen.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| min_dist[a].partial_cmp(&min_dist[b]).unwrap())
            .expect("nonempty");
        chosen.push(next);
        for i in 0..n {
            min_dist[i] = min_dist[i].min(1.0 - p.row(i).dot(&p.row(next)));
        }
    }
    let mut c = Array2::zeros((k, p.ncols()));
    for (kk, &i) in chosen.iter().enumerate() {
        for j in 0..p.ncols() {
            c[[kk, j]] = p[[i, j]];
        }
    }
    c
}

/// Cross-entropy of a probability vector against a one-hot target.
///
/// A zero probability at the hot index is clamped to [`LOG_FLOOR`] and
/// reported through the warning channel instead of producing NaN.
pub fn alignment_loss(p: &DenseVector, z: &DenseVector) -> Result<GradientRecord> {
    if p.dim() != z.dim() {
        return Err(CoreError::DimMismatch {
            context: "alignment_loss",
            expected: z.dim(),
            got: p.dim(),
        });
    }
    let mut hot = None;
    for (i, &v) in z.values().iter().enumerate() {
        if v == 1.0 {
            if hot.replace(i).is_some() {
                return Err(CoreError::NotOneHot);
            }
        } else if v != 0.0 {
            return Err(CoreError::NotOneHot);
        }
    }
    let hot = hot.ok_or(CoreError::NotOneHot)?;
    if p.values().iter().any(|&v| v < 0.0) {
        return Err(CoreError::NotProbability("negative entry".into()));
    }
    let sum: f64 = p.values().iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CoreError::NotProbability(format!("sums to {sum}")));
    }

    let raw = p.values()[hot];
    let clamped = raw.max(LOG_FLOOR);
    let mut record = GradientRecord::new(-clamped.ln());
    if raw < LOG_FLOOR {
        record.warning = Some(format!(
            "probability {raw:.3e} at hot index {hot} clamped to {LOG_FLOOR:.0e}"
        ));
    }
    let mut grad = vec![0.0; p.dim()];
    grad[hot] = -1.0 / clamped;
    record.grads.insert("p".into(), DenseVector::from(grad));
    Ok(record)
}

/// Tape composition of one alignment direction: embeddings (B x d) against
/// the prototype node under `targets`, summed over the batch.
fn direction_node(
    tape: &mut Tape,
    embeddings: NodeId,
    prototypes_t: NodeId,
    tau2: f64,
    targets: &[usize],
    k: usize,
) -> Result<NodeId> {
    let en = tape.row_l2_normalize(embeddings)?;
    let sims = tape.matmul(en, prototypes_t);
    let logits = tape.scale(sims, 1.0 / tau2);
    let lse = tape.row_log_sum_exp(logits);
    let lse_sum = tape.sum_all(lse);
    let hot = tape.mul_mask(logits, one_hot_matrix(targets, k));
    let hot_sum = tape.sum_all(hot);
    Ok(tape.sub(lse_sum, hot_sum))
}

/// Tape composition of the full loss from staged modality and prototype
/// nodes; returns the scalar node.
pub fn cpm_loss_node(
    tape: &mut Tape,
    t: NodeId,
    p: NodeId,
    r: NodeId,
    prototypes: NodeId,
    tau2: f64,
    assigns: &ClusterAssignments,
) -> Result<NodeId> {
    if !(tau2 > 0.0) {
        return Err(CoreError::NonPositiveTemperature(tau2));
    }
    let b = tape.value(t).nrows();
    if assigns.len() != b {
        return Err(CoreError::MissingAssignment {
            row: assigns.len().min(b),
        });
    }
    let k = assigns.k;
    let cn = tape.row_l2_normalize(prototypes)?;
    let ct = tape.transpose(cn);
    let term_t = direction_node(tape, t, ct, tau2, &assigns.z_p, k)?;
    let term_p = direction_node(tape, p, ct, tau2, &assigns.z_r, k)?;
    let term_r = direction_node(tape, r, ct, tau2, &assigns.z_t, k)?;
    let s1 = tape.add(term_t, term_p);
    let s2 = tape.add(s1, term_r);
    Ok(tape.scale(s2, 1.0 / (3.0 * b as f64)))
}

/// Mean over patients of the three cyclic alignment cross-entropies.
///
/// Gradients are keyed `t[i]`, `p[i]`, `r[i]` and `prototype[k]`; the
/// assignments act as constants.
pub fn cpm_loss(
    batch: &ModalityBatch,
    bank: &PrototypeBank,
    assigns: &ClusterAssignments,
) -> Result<GradientRecord> {
    if assigns.len() != batch.len() {
        return Err(CoreError::MissingAssignment {
            row: assigns.len().min(batch.len()),
        });
    }
    if assigns.k != bank.k() {
        return Err(CoreError::DimMismatch {
            context: "cpm_loss",
            expected: bank.k(),
            got: assigns.k,
        });
    }
    let mut tape = Tape::new();
    let t = tape.leaf(batch.stack_t());
    let p = tape.leaf(batch.stack_p());
    let r = tape.leaf(batch.stack_r());
    let c = tape.leaf(bank.prototypes().clone());
    let loss = cpm_loss_node(&mut tape, t, p, r, c, bank.tau2, assigns)?;
    let grads = tape.backward(loss);

    let mut record = GradientRecord::new(tape.scalar(loss));
    for (name, id) in [("t", t), ("p", p), ("r", r)] {
        let g = grads.wrt(id).expect("modality gradient");
        for i in 0..batch.len() {
            record.grads.insert(format!("{name}[{i}]"), row_vector(g, i));
        }
    }
    let gc = grads.wrt(c).expect("prototype gradient");
    for kk in 0..bank.k() {
        record
            .grads
            .insert(format!("prototype[{kk}]"), row_vector(gc, kk));
    }
    Ok(record)
}
