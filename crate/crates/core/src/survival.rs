//! Cox proportional-hazards output stage: fused embeddings, negative partial
//! likelihood, Breslow baseline hazard, and survival curves.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::encoders::ProjectedTriplet;
use crate::error::{CoreError, Result};
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::{row_vector, DenseVector, GradientRecord};
use crate::optim::{collect_named_grads, round_params_f32, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "survival time must be positive and finite, got {time}"
            )));
        }
        Ok(Self { time, event })
    }

    pub fn delta(&self) -> f64 {
        if self.event {
            1.0
        } else {
            0.0
        }
    }
}

/// Concatenation of the projected triplet in fixed (t, p, r) order.
#[derive(Debug, Clone)]
pub struct FusedEmbedding {
    f: DenseVector,
}

impl FusedEmbedding {
    pub fn from_vector(f: DenseVector) -> Self {
        Self { f }
    }

    pub fn values(&self) -> &DenseVector {
        &self.f
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    /// Recover the three slices.
    pub fn split(&self) -> Result<(DenseVector, DenseVector, DenseVector)> {
        if self.f.dim() % 3 != 0 {
            return Err(CoreError::DimMismatch {
                context: "FusedEmbedding::split",
                expected: self.f.dim() / 3 * 3,
                got: self.f.dim(),
            });
        }
        let d = self.f.dim() / 3;
        let v = self.f.values();
        Ok((
            DenseVector::from(v[..d].to_vec()),
            DenseVector::from(v[d..2 * d].to_vec()),
            DenseVector::from(v[2 * d..].to_vec()),
        ))
    }
}

pub fn fuse_embeddings(pt: &ProjectedTriplet) -> Result<FusedEmbedding> {
    let d = pt.t_tilde.dim();
    if pt.p_tilde.dim() != d || pt.r_tilde.dim() != d {
        return Err(CoreError::DimMismatch {
            context: "fuse_embeddings",
            expected: d,
            got: pt.p_tilde.dim().min(pt.r_tilde.dim()),
        });
    }
    let mut f = Vec::with_capacity(3 * d);
    f.extend_from_slice(pt.t_tilde.values());
    f.extend_from_slice(pt.p_tilde.values());
    f.extend_from_slice(pt.r_tilde.values());
    Ok(FusedEmbedding::from_vector(DenseVector::from(f)))
}

/// Cox output layer: optional tanh FC stage, then a linear predictor beta.
#[derive(Debug, Clone)]
pub struct CoxHead {
    pub fc: Option<(Array2<f64>, Array2<f64>)>,
    pub beta: DenseVector,
}

pub struct CoxHeadNodes {
    fc: Option<(NodeId, NodeId)>,
    beta: NodeId,
}

impl CoxHead {
    /// `fc_width = Some(w)` inserts a tanh layer in_dim -> w before beta.
    /// Beta starts at zero so an untrained head scores everyone equally.
    pub fn init(in_dim: usize, fc_width: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if in_dim == 0 {
            return Err(CoreError::InvalidConfig("in_dim must be positive".into()));
        }
        use rand::Rng;
        let (fc, beta_dim) = match fc_width {
            Some(w) => {
                if w == 0 {
                    return Err(CoreError::InvalidConfig("fc width must be positive".into()));
                }
                let bound = 1.0 / (in_dim as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((in_dim, w), |_| rng.gen_range(-bound..bound));
                (Some((weights, Array2::zeros((1, w)))), w)
            }
            None => (None, in_dim),
        };
        Ok(Self {
            fc,
            beta: DenseVector::zeros(beta_dim),
        })
    }

    pub fn in_dim(&self) -> usize {
        match &self.fc {
            Some((w, _)) => w.nrows(),
            None => self.beta.dim(),
        }
    }

    fn beta_column(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.beta.dim(), 1), self.beta.values().to_vec())
            .expect("column shape")
    }

    pub fn stage(&self, tape: &mut Tape, prefix: &str) -> (CoxHeadNodes, Vec<(String, NodeId)>) {
        let mut named = Vec::new();
        let fc = self.fc.as_ref().map(|(w, b)| {
            let wid = tape.leaf(w.clone());
            let bid = tape.leaf(b.clone());
            named.push((format!("{prefix}.fc.w"), wid));
            named.push((format!("{prefix}.fc.b"), bid));
            (wid, bid)
        });
        let beta = tape.leaf(self.beta_column());
        named.push((format!("{prefix}.beta"), beta));
        (CoxHeadNodes { fc, beta }, named)
    }

    /// Risk scores for staged fused embeddings (n x in_dim) as an n x 1 node.
    pub fn eta_node(&self, tape: &mut Tape, nodes: &CoxHeadNodes, fused: NodeId) -> Result<NodeId> {
        let got = tape.value(fused).ncols();
        if got != self.in_dim() {
            return Err(CoreError::DimMismatch {
                context: "predict_risk",
                expected: self.in_dim(),
                got,
            });
        }
        let h = match nodes.fc {
            Some((w, b)) => {
                let lin = tape.matmul(fused, w);
                let shifted = tape.add_row(lin, b);
                tape.tanh(shifted)
            }
            None => fused,
        };
        Ok(tape.matmul(h, nodes.beta))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.fc {
            out.push((format!("{prefix}.fc.w"), w.clone()));
            out.push((format!("{prefix}.fc.b"), b.clone()));
        }
        out.push((format!("{prefix}.beta"), self.beta_column()));
        out
    }

    /// Overwrite parameters from named matrices (checkpoint load).
    pub fn set_param(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        match name {
            "fc.w" => match &mut self.fc {
                Some((w, _)) if w.dim() == value.dim() => *w = value,
                _ => return Err(CoreError::InvalidConfig(format!("unexpected section {name}"))),
            },
            "fc.b" => match &mut self.fc {
                Some((_, b)) if b.dim() == value.dim() => *b = value,
                _ => return Err(CoreError::InvalidConfig(format!("unexpected section {name}"))),
            },
            "beta" => {
                if value.dim() != (self.beta.dim(), 1) {
                    return Err(CoreError::DimMismatch {
                        context: "CoxHead::set_param beta",
                        expected: self.beta.dim(),
                        got: value.nrows(),
                    });
                }
                self.beta = DenseVector::from(value.column(0).to_vec());
            }
            _ => return Err(CoreError::InvalidConfig(format!("unexpected section {name}"))),
        }
        Ok(())
    }
}

/// Linear predictor eta for one fused embedding.
pub fn predict_risk(fused: &FusedEmbedding, head: &CoxHead) -> Result<f64> {
    let mut tape = Tape::new();
    let (nodes, _) = head.stage(&mut tape, "eval");
    let f = tape.constant(
        Array2::from_shape_vec((1, fused.dim()), fused.values().values().to_vec())
            .expect("row shape"),
    );
    let eta = head.eta_node(&mut tape, &nodes, f)?;
    Ok(tape.value(eta)[[0, 0]])
}

fn stack_fused(fused: &[FusedEmbedding]) -> Result<Array2<f64>> {
    if fused.is_empty() {
        return Err(CoreError::EmptyInput("cox_loss"));
    }
    let d = fused[0].dim();
    let mut m = Array2::zeros((fused.len(), d));
    for (i, f) in fused.iter().enumerate() {
        if f.dim() != d {
            return Err(CoreError::DimMismatch {
                context: "stack_fused",
                expected: d,
                got: f.dim(),
            });
        }
        for (j, v) in f.values().values().iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    Ok(m)
}

fn risk_mask(labels: &[SurvivalLabel]) -> Array2<f64> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if labels[j].time >= labels[i].time {
            1.0
        } else {
            0.0
        }
    })
}

/// Negative partial likelihood node over staged fused embeddings.
/// Ties share risk sets through `T_j >= T_i` (Breslow grouping).
/// Returns None when no subject has an event.
pub fn cox_loss_node(
    tape: &mut Tape,
    head: &CoxHead,
    nodes: &CoxHeadNodes,
    fused: NodeId,
    labels: &[SurvivalLabel],
) -> Result<Option<NodeId>> {
    let n = tape.value(fused).nrows();
    if labels.len() != n {
        return Err(CoreError::BatchMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if labels.iter().all(|l| !l.event) {
        return Ok(None);
    }
    let eta = head.eta_node(tape, nodes, fused)?;
    let ones = tape.constant(Array2::from_elem((n, 1), 1.0));
    let eta_t = tape.transpose(eta);
    let spread = tape.matmul(ones, eta_t);
    let lse = tape.masked_row_log_sum_exp(spread, risk_mask(labels))?;
    let diff = tape.sub(eta, lse);
    let delta = Array2::from_shape_fn((n, 1), |(i, _)| labels[i].delta());
    let masked = tape.mul_mask(diff, delta);
    let total = tape.sum_all(masked);
    Ok(Some(tape.scale(total, -1.0)))
}

/// Negative partial likelihood with gradients.
///
/// Gradients are keyed `beta` (and `fc.w`, `fc.b` when present, flattened
/// row-major) plus `fused[i]`. An all-censored cohort yields value 0 with a
/// warning and zero gradients.
pub fn cox_loss(
    fused: &[FusedEmbedding],
    labels: &[SurvivalLabel],
    head: &CoxHead,
) -> Result<GradientRecord> {
    let f = stack_fused(fused)?;
    if labels.len() != fused.len() {
        return Err(CoreError::BatchMismatch {
            left: fused.len(),
            right: labels.len(),
        });
    }
    let mut tape = Tape::new();
    let (nodes, named) = head.stage(&mut tape, "head");
    let fnode = tape.leaf(f);
    let Some(loss) = cox_loss_node(&mut tape, head, &nodes, fnode, labels)? else {
        let mut record = GradientRecord::new(0.0);
        record.warning = Some("all subjects censored; partial likelihood is empty".into());
        record
            .grads
            .insert("beta".into(), DenseVector::zeros(head.beta.dim()));
        if let Some((w, b)) = &head.fc {
            record
                .grads
                .insert("fc.w".into(), DenseVector::zeros(w.len()));
            record
                .grads
                .insert("fc.b".into(), DenseVector::zeros(b.len()));
        }
        for i in 0..fused.len() {
            record
                .grads
                .insert(format!("fused[{i}]"), DenseVector::zeros(fused[0].dim()));
        }
        return Ok(record);
    };
    let grads = tape.backward(loss);
    let mut record = GradientRecord::new(tape.scalar(loss));
    for (name, id) in &named {
        let flat = grads
            .wrt(*id)
            .map(|g| g.iter().cloned().collect::<Vec<_>>())
            .unwrap_or_else(|| vec![0.0; tape.value(*id).len()]);
        let key = name.strip_prefix("head.").unwrap_or(name);
        record.grads.insert(key.to_string(), DenseVector::from(flat));
    }
    let gf = grads.wrt(fnode).expect("fused gradient");
    for i in 0..fused.len() {
        record.grads.insert(format!("fused[{i}]"), row_vector(gf, i));
    }
    Ok(record)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BaselineHazard {
    pub event_times: Vec<f64>,
    pub cumulative_hazard: Vec<f64>,
}

/// Breslow estimator: H0(t) = sum over event times t_k <= t of
/// d_k / sum_{j in R(t_k)} exp(eta_j).
pub fn breslow_baseline(
    fused: &[FusedEmbedding],
    labels: &[SurvivalLabel],
    head: &CoxHead,
) -> Result<BaselineHazard> {
    if fused.len() != labels.len() {
        return Err(CoreError::BatchMismatch {
            left: fused.len(),
            right: labels.len(),
        });
    }
    if labels.iter().all(|l| !l.event) {
        return Err(CoreError::NoEvents);
    }
    let etas: Vec<f64> = fused
        .iter()
        .map(|f| predict_risk(f, head))
        .collect::<Result<_>>()?;
    let m = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut event_times: Vec<f64> = labels
        .iter()
        .filter(|l| l.event)
        .map(|l| l.time)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    event_times.dedup();

    let mut cumulative = Vec::with_capacity(event_times.len());
    let mut h = 0.0;
    for &tk in &event_times {
        let d_k = labels
            .iter()
            .filter(|l| l.event && l.time == tk)
            .count() as f64;
        let denom: f64 = labels
            .iter()
            .zip(&etas)
            .filter(|(l, _)| l.time >= tk)
            .map(|(_, &e)| (e - m).exp())
            .sum();
        h += d_k / (denom * m.exp());
        cumulative.push(h);
    }
    Ok(BaselineHazard {
        event_times,
        cumulative_hazard: cumulative,
    })
}

/// S(t) = exp(-H0(t) * exp(eta)) along a nondecreasing grid.
pub fn survival_function(h: &BaselineHazard, eta: f64, time_grid: &[f64]) -> Result<Vec<f64>> {
    if time_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(CoreError::InvalidConfig(
            "time grid must be nondecreasing".into(),
        ));
    }
    let scale = eta.exp();
    Ok(time_grid
        .iter()
        .map(|&t| {
            let mut h0 = 0.0;
            for (tk, hk) in h.event_times.iter().zip(&h.cumulative_hazard) {
                if *tk <= t {
                    h0 = *hk;
                } else {
                    break;
                }
            }
            (-h0 * scale).exp()
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct CoxTrainOptions {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for CoxTrainOptions {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            epochs: 300,
        }
    }
}

/// Full-batch Adam on the head parameters with frozen fused inputs.
/// Returns the per-epoch loss history.
pub fn train_cox_head(
    fused: &[FusedEmbedding],
    labels: &[SurvivalLabel],
    head: &mut CoxHead,
    opts: &CoxTrainOptions,
) -> Result<Vec<f64>> {
    let f = stack_fused(fused)?;
    if labels.len() != fused.len() {
        return Err(CoreError::BatchMismatch {
            left: fused.len(),
            right: labels.len(),
        });
    }
    // optimizer works on matrix views; beta is hoisted to a column
    let mut fc = head.fc.clone();
    let mut beta = head.beta_column();
    {
        let mut params: Vec<(String, &mut Array2<f64>)> =
            vec![("head.beta".to_string(), &mut beta)];
        if let Some((w, b)) = fc.as_mut() {
            params.push(("head.fc.w".to_string(), w));
            params.push(("head.fc.b".to_string(), b));
        }
        round_params_f32(&mut params);
    }

    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        head.fc = fc.clone();
        head.beta = DenseVector::from(beta.column(0).to_vec());

        let mut tape = Tape::new();
        let (nodes, named) = head.stage(&mut tape, "head");
        let fnode = tape.constant(f.clone());
        let Some(loss) = cox_loss_node(&mut tape, head, &nodes, fnode, labels)? else {
            history.push(0.0);
            continue;
        };
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss { term: "cox", epoch });
        }
        let grads = tape.backward(loss);
        let named_grads = collect_named_grads(&grads, &named);
        let mut params: Vec<(String, &mut Array2<f64>)> =
            vec![("head.beta".to_string(), &mut beta)];
        if let Some((w, b)) = fc.as_mut() {
            params.push(("head.fc.w".to_string(), w));
            params.push(("head.fc.b".to_string(), b));
        }
        adam.step(&mut params, &named_grads);
        history.push(value);
    }
    head.fc = fc;
    head.beta = DenseVector::from(beta.column(0).to_vec());
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_check, FD_EPS};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn label(t: f64, e: bool) -> SurvivalLabel {
        SurvivalLabel::new(t, e).unwrap()
    }

    fn fused(v: Vec<f64>) -> FusedEmbedding {
        FusedEmbedding::from_vector(DenseVector::from(v))
    }

    fn plain_head(beta: Vec<f64>) -> CoxHead {
        CoxHead {
            fc: None,
            beta: DenseVector::from(beta),
        }
    }

    #[test]
    fn fuse_concatenates_in_order() {
        let pt = ProjectedTriplet {
            t_tilde: DenseVector::from(vec![1.0, 0.0]),
            p_tilde: DenseVector::from(vec![0.0, 1.0]),
            r_tilde: DenseVector::from(vec![1.0, 0.0]),
        };
        let f = fuse_embeddings(&pt).unwrap();
        assert_eq!(f.values().values(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let (t, p, r) = f.split().unwrap();
        assert_eq!(t.values(), pt.t_tilde.values());
        assert_eq!(p.values(), pt.p_tilde.values());
        assert_eq!(r.values(), pt.r_tilde.values());

        let swapped = ProjectedTriplet {
            t_tilde: pt.t_tilde.clone(),
            p_tilde: pt.r_tilde.clone(),
            r_tilde: pt.p_tilde.clone(),
        };
        assert_ne!(
            fuse_embeddings(&swapped).unwrap().values().values(),
            f.values().values()
        );
    }

    #[test]
    fn predict_risk_basics() {
        let head = plain_head(vec![0.0, 0.0]);
        assert_eq!(predict_risk(&fused(vec![3.0, -2.0]), &head).unwrap(), 0.0);

        let head = plain_head(vec![1.0, 0.0]);
        assert_relative_eq!(
            predict_risk(&fused(vec![2.0, 5.0]), &head).unwrap(),
            2.0,
            epsilon = 1e-12
        );

        let doubled = plain_head(vec![2.0, 0.0]);
        let a = predict_risk(&fused(vec![2.0, 5.0]), &doubled).unwrap();
        assert_relative_eq!(a, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn single_event_subject_zero_loss() {
        let head = plain_head(vec![0.7]);
        let rec = cox_loss(&[fused(vec![1.5])], &[label(3.0, true)], &head).unwrap();
        assert_relative_eq!(rec.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn all_censored_returns_zero_with_warning() {
        let head = plain_head(vec![0.5]);
        let rec = cox_loss(
            &[fused(vec![1.0]), fused(vec![2.0])],
            &[label(1.0, false), label(2.0, false)],
            &head,
        )
        .unwrap();
        assert_eq!(rec.value, 0.0);
        assert!(rec.warning.is_some());
        assert!(rec.grad("beta").unwrap().values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_subject_hand_value() {
        // T=[1,2], delta=[1,0], eta=[1,0]:
        // loss = -(1 - ln(e + 1)) = ln(1 + e) - 1
        let head = plain_head(vec![1.0]);
        let rec = cox_loss(
            &[fused(vec![1.0]), fused(vec![0.0])],
            &[label(1.0, true), label(2.0, false)],
            &head,
        )
        .unwrap();
        assert_relative_eq!(rec.value, 0.31326168751822286, epsilon = 1e-12);
    }

    #[test]
    fn loss_invariant_to_constant_shift() {
        // risk sets only see eta differences: shift fused values through a
        // beta with an intercept-like extra coordinate fed constant 1
        let head = plain_head(vec![1.0, 1.0]);
        let base = cox_loss(
            &[
                fused(vec![0.3, 0.0]),
                fused(vec![-0.5, 0.0]),
                fused(vec![1.1, 0.0]),
            ],
            &[label(1.0, true), label(2.0, true), label(3.0, false)],
            &head,
        )
        .unwrap();
        let shifted = cox_loss(
            &[
                fused(vec![0.3, 7.0]),
                fused(vec![-0.5, 7.0]),
                fused(vec![1.1, 7.0]),
            ],
            &[label(1.0, true), label(2.0, true), label(3.0, false)],
            &head,
        )
        .unwrap();
        assert_relative_eq!(base.value, shifted.value, epsilon = 1e-9);
    }

    #[test]
    fn cox_gradient_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = CoxHead::init(4, Some(3), &mut rng).unwrap();
        let mut head = head;
        // nonzero beta so gradients flow
        head.beta = DenseVector::from(vec![0.3, -0.2, 0.5]);
        let fs = vec![
            fused(vec![0.5, -0.1, 0.3, 0.9]),
            fused(vec![-0.2, 0.4, -0.6, 0.1]),
            fused(vec![0.8, 0.2, 0.0, -0.3]),
            fused(vec![0.1, -0.7, 0.4, 0.5]),
        ];
        let labels = vec![
            label(5.0, true),
            label(2.0, true),
            label(8.0, false),
            label(3.0, true),
        ];
        let rec = cox_loss(&fs, &labels, &head).unwrap();

        // w.r.t. beta
        let point = head.beta.values().to_vec();
        let analytic = rec.grad("beta").unwrap().values().to_vec();
        let f = |b: &[f64]| {
            let mut h2 = head.clone();
            h2.beta = DenseVector::from(b.to_vec());
            cox_loss(&fs, &labels, &h2).unwrap().value
        };
        let err = finite_difference_check(f, &point, &analytic, FD_EPS).unwrap();
        assert!(err < 1e-4, "beta gradient error {err}");

        // w.r.t. fc weights
        let (w0, _) = head.fc.as_ref().unwrap();
        let point: Vec<f64> = w0.iter().cloned().collect();
        let analytic = rec.grad("fc.w").unwrap().values().to_vec();
        let dim = w0.dim();
        let f = |w: &[f64]| {
            let mut h2 = head.clone();
            h2.fc.as_mut().unwrap().0 = Array2::from_shape_vec(dim, w.to_vec()).unwrap();
            cox_loss(&fs, &labels, &h2).unwrap().value
        };
        let err = finite_difference_check(f, &point, &analytic, FD_EPS).unwrap();
        assert!(err < 1e-4, "fc.w gradient error {err}");

        // w.r.t. one fused embedding
        let point = fs[1].values().values().to_vec();
        let analytic = rec.grad("fused[1]").unwrap().values().to_vec();
        let f = |x: &[f64]| {
            let mut fs2 = fs.clone();
            fs2[1] = fused(x.to_vec());
            cox_loss(&fs2, &labels, &head).unwrap().value
        };
        let err = finite_difference_check(f, &point, &analytic, FD_EPS).unwrap();
        assert!(err < 1e-4, "fused gradient error {err}");
    }

    #[test]
    fn breslow_hand_cases() {
        let head = plain_head(vec![0.0]);
        // single event, eta = 0
        let h = breslow_baseline(&[fused(vec![1.0])], &[label(2.0, true)], &head).unwrap();
        assert_eq!(h.event_times, vec![2.0]);
        assert_relative_eq!(h.cumulative_hazard[0], 1.0, epsilon = 1e-12);

        // three subjects, all events, eta = 0
        let fs = vec![fused(vec![0.0]), fused(vec![0.0]), fused(vec![0.0])];
        let labels = vec![label(1.0, true), label(2.0, true), label(3.0, true)];
        let h = breslow_baseline(&fs, &labels, &head).unwrap();
        assert_eq!(h.event_times, vec![1.0, 2.0, 3.0]);
        assert_relative_eq!(h.cumulative_hazard[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(h.cumulative_hazard[1], 1.0 / 3.0 + 1.0 / 2.0, epsilon = 1e-12);
        assert_relative_eq!(
            h.cumulative_hazard[2],
            1.0 / 3.0 + 1.0 / 2.0 + 1.0,
            epsilon = 1e-12
        );

        assert!(matches!(
            breslow_baseline(&fs, &[label(1.0, false); 3], &head),
            Err(CoreError::NoEvents)
        ));
    }

    #[test]
    fn survival_function_basics() {
        let h = BaselineHazard {
            event_times: vec![5.0, 10.0],
            cumulative_hazard: vec![0.5, 1.2],
        };
        let s = survival_function(&h, 0.0, &[1.0, 5.0, 7.0, 10.0, 20.0]).unwrap();
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], 0.6065306597126334, epsilon = 1e-12);
        assert_relative_eq!(s[2], 0.6065306597126334, epsilon = 1e-12);
        assert!(s.windows(2).all(|w| w[1] <= w[0] + 1e-15));

        let near_one = survival_function(&h, -30.0, &[20.0]).unwrap();
        assert_relative_eq!(near_one[0], 1.0, epsilon = 1e-9);

        assert!(survival_function(&h, 0.0, &[5.0, 1.0]).is_err());
    }
}
