//! Cohort manifests, record loading, fold assignment, and embedding-space
//! imputation of missing modalities.

pub mod synth;
pub mod volio;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{ExpressionVector, ProjectedTriplet, VolumeTensor};
use crate::error::{CoreError, Result};
use crate::numeric::tape::Tape;
use crate::numeric::{l2_normalize, DenseVector};
use crate::optim::{collect_named_grads, Adam, AdamConfig};
use crate::survival::SurvivalLabel;
use volio::Normalization;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pet_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rna_path: Option<String>,
    pub time_days: f64,
    pub event: u8,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestPreprocessing {
    pub shape: [usize; 3],
    pub normalization: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestFile {
    pub patients: Vec<ManifestPatient>,
    pub preprocessing: ManifestPreprocessing,
}

/// A validated manifest bound to the directory it was loaded from. Patient
/// files are read lazily through [`CohortManifest::load_record`].
#[derive(Debug, Clone)]
pub struct CohortManifest {
    root: PathBuf,
    file: ManifestFile,
    normalization: Normalization,
}

/// One patient with preprocessed modalities. Absent modalities stay `None`.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub id: String,
    pub ct: Option<VolumeTensor>,
    pub pet: Option<VolumeTensor>,
    pub rna: Option<ExpressionVector>,
    pub label: SurvivalLabel,
}

impl PatientRecord {
    pub fn is_complete(&self) -> bool {
        self.ct.is_some() && self.pet.is_some() && self.rna.is_some()
    }
}

pub fn load_cohort(manifest_path: &Path) -> Result<CohortManifest> {
    let bytes = std::fs::read(manifest_path).map_err(|e| CoreError::io(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_slice(&bytes)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    if file.patients.is_empty() {
        return Err(CoreError::EmptyInput("manifest patient list"));
    }
    let normalization = Normalization::parse(&file.preprocessing.normalization)?;
    if file.preprocessing.shape.iter().any(|&a| a == 0) {
        return Err(CoreError::Manifest("preprocessing shape axes must be positive".into()));
    }

    let mut seen = BTreeSet::new();
    for p in &file.patients {
        if !seen.insert(p.id.clone()) {
            return Err(CoreError::DuplicateId(p.id.clone()));
        }
        let present = [&p.ct_path, &p.pet_path, &p.rna_path]
            .iter()
            .filter(|o| o.is_some())
            .count();
        if present < 2 {
            return Err(CoreError::InvalidRecord {
                id: p.id.clone(),
                message: format!("only {present} modality present, at least two required"),
            });
        }
        if !(p.time_days.is_finite() && p.time_days > 0.0) {
            return Err(CoreError::InvalidRecord {
                id: p.id.clone(),
                message: format!("time_days must be positive and finite, got {}", p.time_days),
            });
        }
        if p.event > 1 {
            return Err(CoreError::InvalidRecord {
                id: p.id.clone(),
                message: format!("event must be 0 or 1, got {}", p.event),
            });
        }
        for rel in [&p.ct_path, &p.pet_path, &p.rna_path].into_iter().flatten() {
            let full = root.join(rel);
            if !full.is_file() {
                return Err(CoreError::InvalidRecord {
                    id: p.id.clone(),
                    message: format!("referenced file {} does not exist", full.display()),
                });
            }
        }
    }

    Ok(CohortManifest {
        root,
        file,
        normalization,
    })
}

impl CohortManifest {
    pub fn len(&self) -> usize {
        self.file.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file.patients.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.file.patients.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn target_shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.file.preprocessing.shape;
        (d, h, w)
    }

    pub fn patient(&self, index: usize) -> &ManifestPatient {
        &self.file.patients[index]
    }

    /// Read and preprocess one patient. Volumes are resampled to the manifest
    /// shape and normalized; expression vectors are taken as stored.
    pub fn load_record(&self, index: usize) -> Result<PatientRecord> {
        let p = &self.file.patients[index];
        let target = self.target_shape();
        let load_vol = |rel: &Option<String>| -> Result<Option<VolumeTensor>> {
            match rel {
                None => Ok(None),
                Some(rel) => {
                    let (raw, _spacing) = volio::read_volume(&self.root.join(rel))?;
                    let (v, degenerate) = volio::preprocess_volume(&raw, target, self.normalization)?;
                    if degenerate {
                        log::warn!("patient {}: volume {} has zero variance", p.id, rel);
                    }
                    Ok(Some(v))
                }
            }
        };
        let ct = load_vol(&p.ct_path)?;
        let pet = load_vol(&p.pet_path)?;
        let rna = match &p.rna_path {
            None => None,
            Some(rel) => Some(volio::read_expression(&self.root.join(rel))?),
        };
        Ok(PatientRecord {
            id: p.id.clone(),
            ct,
            pet,
            rna,
            label: SurvivalLabel::new(p.time_days, p.event == 1)?,
        })
    }

    /// Load every record and check that all expression vectors agree on the
    /// gene count.
    pub fn load_all(&self) -> Result<Vec<PatientRecord>> {
        let mut records = Vec::with_capacity(self.len());
        let mut gene_count: Option<usize> = None;
        for i in 0..self.len() {
            let rec = self.load_record(i)?;
            if let Some(rna) = &rec.rna {
                let d = rna.gene_count();
                match gene_count {
                    None => gene_count = Some(d),
                    Some(g) if g != d => {
                        return Err(CoreError::InvalidRecord {
                            id: rec.id.clone(),
                            message: format!("expression has {d} genes, cohort uses {g}"),
                        })
                    }
                    _ => {}
                }
            }
            records.push(rec);
        }
        Ok(records)
    }
}

/// Patient-to-fold assignment from a seeded shuffle followed by round-robin
/// dealing, so fold sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    assignment: Vec<usize>,
    fold_count: usize,
}

pub fn make_folds(n: usize, fold_count: usize, seed: u64) -> Result<FoldSplit> {
    if fold_count < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "fold_count must be at least 2, got {fold_count}"
        )));
    }
    if fold_count > n {
        return Err(CoreError::TooFewSubjects {
            needed: fold_count,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % fold_count;
    }
    Ok(FoldSplit {
        assignment,
        fold_count,
    })
}

impl FoldSplit {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn fold_of(&self, index: usize) -> usize {
        self.assignment[index]
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Pet,
    Rna,
}

/// Imputation strategy name as it appears in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeKind {
    Zero,
    Average,
    Predicted,
}

impl ImputeKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "zero" => Ok(Self::Zero),
            "average" => Ok(Self::Average),
            "predicted" => Ok(Self::Predicted),
            other => Err(CoreError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Projected embeddings with exactly one modality missing.
#[derive(Debug, Clone)]
pub struct PartialTriplet {
    pub t: Option<DenseVector>,
    pub p: Option<DenseVector>,
    pub r: Option<DenseVector>,
}

impl PartialTriplet {
    /// The single absent modality; errors unless exactly two are present.
    pub fn missing(&self) -> Result<Modality> {
        let present = [self.t.is_some(), self.p.is_some(), self.r.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if present != 2 {
            return Err(CoreError::WrongMissingCount { present });
        }
        Ok(if self.t.is_none() {
            Modality::Ct
        } else if self.p.is_none() {
            Modality::Pet
        } else {
            Modality::Rna
        })
    }

    /// The two present vectors in (t, p, r) order.
    fn present_pair(&self) -> (&DenseVector, &DenseVector) {
        let mut it = [&self.t, &self.p, &self.r].into_iter().flatten();
        let a = it.next().expect("validated by missing()");
        let b = it.next().expect("validated by missing()");
        (a, b)
    }
}

#[derive(Debug)]
pub enum ImputePlan<'a> {
    Zero,
    Average,
    Predicted(&'a ModalityRegressor),
}

#[derive(Debug, Clone)]
pub struct ImputeResult {
    pub triplet: ProjectedTriplet,
    pub zero_imputed: bool,
    pub filled: Modality,
}

/// Fill the single missing entry of a projected triplet. `average` uses the
/// renormalized mean of the present pair, `zero` substitutes a zero vector
/// and flags it, `predicted` runs a trained regressor on the present pair.
pub fn impute_missing_modality(partial: &PartialTriplet, plan: &ImputePlan) -> Result<ImputeResult> {
    let missing = partial.missing()?;
    let (a, b) = partial.present_pair();
    if a.dim() != b.dim() {
        return Err(CoreError::DimMismatch {
            context: "imputation input pair",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut zero_imputed = false;
    let filled: DenseVector = match plan {
        ImputePlan::Zero => {
            zero_imputed = true;
            DenseVector::zeros(a.dim())
        }
        ImputePlan::Average => {
            let mean: Vec<f64> = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            l2_normalize(&DenseVector::new(mean)?)?
        }
        ImputePlan::Predicted(reg) => {
            if reg.target() != missing {
                return Err(CoreError::InvalidConfig(format!(
                    "regressor predicts {:?} but {:?} is missing",
                    reg.target(),
                    missing
                )));
            }
            reg.predict(a, b)?
        }
    };
    let (t, p, r) = match missing {
        Modality::Ct => (&filled, a, b),
        Modality::Pet => (a, &filled, b),
        Modality::Rna => (a, b, &filled),
    };
    Ok(ImputeResult {
        triplet: ProjectedTriplet {
            t_tilde: t.clone(),
            p_tilde: p.clone(),
            r_tilde: r.clone(),
        },
        zero_imputed,
        filled: missing,
    })
}

/// One-hidden-layer regressor mapping the concatenated present pair to the
/// missing modality's embedding. Output is L2-renormalized at prediction.
#[derive(Debug, Clone)]
pub struct ModalityRegressor {
    target: Modality,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RegressorOptions {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RegressorOptions {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

impl ModalityRegressor {
    /// Inputs for `target` are the remaining two modalities in (t, p, r) order.
    fn split_example(triplet: &ProjectedTriplet, target: Modality) -> (Vec<f64>, Vec<f64>) {
        let (a, b, y) = match target {
            Modality::Ct => (&triplet.p_tilde, &triplet.r_tilde, &triplet.t_tilde),
            Modality::Pet => (&triplet.t_tilde, &triplet.r_tilde, &triplet.p_tilde),
            Modality::Rna => (&triplet.t_tilde, &triplet.p_tilde, &triplet.r_tilde),
        };
        let mut x = a.values().to_vec();
        x.extend_from_slice(b.values());
        (x, y.values().to_vec())
    }

    /// Fit on complete triplets by full-batch mean squared error.
    pub fn train(
        triplets: &[ProjectedTriplet],
        target: Modality,
        opts: RegressorOptions,
    ) -> Result<Self> {
        if triplets.is_empty() {
            return Err(CoreError::EmptyInput("regressor training set"));
        }
        if opts.hidden == 0 || opts.epochs == 0 {
            return Err(CoreError::InvalidConfig(
                "regressor hidden width and epochs must be positive".into(),
            ));
        }
        let dim = triplets[0].t_tilde.dim();
        let n = triplets.len();
        let mut x = Array2::zeros((n, 2 * dim));
        let mut y = Array2::zeros((n, dim));
        for (i, tr) in triplets.iter().enumerate() {
            let (xi, yi) = Self::split_example(tr, target);
            for (j, v) in xi.iter().enumerate() {
                x[[i, j]] = *v;
            }
            for (j, v) in yi.iter().enumerate() {
                y[[i, j]] = *v;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut w1 = crate::encoders::uniform_fan_in(&mut rng, 2 * dim, opts.hidden, 2 * dim);
        let mut b1 = Array2::zeros((1, opts.hidden));
        let mut w2 = crate::encoders::uniform_fan_in(&mut rng, opts.hidden, dim, opts.hidden);
        let mut b2 = Array2::zeros((1, dim));

        let mut adam = Adam::new(AdamConfig::with_lr(opts.learning_rate));
        for _ in 0..opts.epochs {
            let mut tape = Tape::new();
            let xc = tape.constant(x.clone());
            let yc = tape.constant(y.clone());
            let n1 = tape.leaf(w1.clone());
            let n2 = tape.leaf(b1.clone());
            let n3 = tape.leaf(w2.clone());
            let n4 = tape.leaf(b2.clone());
            let h_lin = tape.matmul(xc, n1);
            let h_aff = tape.add_row(h_lin, n2);
            let h = tape.tanh(h_aff);
            let p_lin = tape.matmul(h, n3);
            let pred = tape.add_row(p_lin, n4);
            let diff = tape.sub(pred, yc);
            let sq = tape.mul_elem(diff, diff);
            let total = tape.sum_all(sq);
            let loss = tape.scale(total, 1.0 / n as f64);
            let grads = tape.backward(loss);
            let named = [
                ("w1".to_string(), n1),
                ("b1".to_string(), n2),
                ("w2".to_string(), n3),
                ("b2".to_string(), n4),
            ];
            let grad_map = collect_named_grads(&grads, &named);
            let mut params: Vec<(String, &mut Array2<f64>)> = vec![
                ("w1".to_string(), &mut w1),
                ("b1".to_string(), &mut b1),
                ("w2".to_string(), &mut w2),
                ("b2".to_string(), &mut b2),
            ];
            adam.step(&mut params, &grad_map);
        }
        Ok(Self {
            target,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn target(&self) -> Modality {
        self.target
    }

    pub fn predict(&self, a: &DenseVector, b: &DenseVector) -> Result<DenseVector> {
        let expected = self.w1.nrows();
        if a.dim() + b.dim() != expected {
            return Err(CoreError::DimMismatch {
                context: "regressor input",
                expected,
                got: a.dim() + b.dim(),
            });
        }
        let mut x = Array2::zeros((1, expected));
        for (j, v) in a.values().iter().chain(b.values()).enumerate() {
            x[[0, j]] = *v;
        }
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let out = h.dot(&self.w2) + &self.b2;
        let raw = DenseVector::new(out.row(0).to_vec())?;
        l2_normalize(&raw)
    }
}
