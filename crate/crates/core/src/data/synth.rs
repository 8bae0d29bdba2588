//! Synthetic multi-modal cohorts with a known latent risk.
//!
//! The risk latent u decomposes into a shared component plus one private
//! component per modality, u = u_s + u_t + u_p + u_r, and the hazard rate is
//! exp(effect_size * u) times a baseline. Each modality observes the shared
//! component plus only its own private one: the CT blob width follows
//! u_s + u_t, the PET uptake ratio between two foci follows u_s + u_p, and
//! an additive signature over the first tenth of the genes follows
//! u_s + u_r. No modality subset carries the full hazard, so dropping or
//! imputing a modality costs real information. The remaining latent
//! components add survival-irrelevant variation. Ground truth u goes to
//! latents.csv so evaluations can compare against an oracle.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{volio, ManifestFile, ManifestPatient, ManifestPreprocessing};
use crate::encoders::VolumeTensor;
use crate::error::{CoreError, Result};
use crate::survival::SurvivalLabel;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub latent_dim: usize,
    pub effect_size: f64,
    pub censor_rate: f64,
    pub seed: u64,
    pub volume_shape: (usize, usize, usize),
    pub gene_count: usize,
    /// Baseline hazard per day; the default gives a 400-day mean at u = 0.
    pub lambda0: f64,
}

impl SynthParams {
    pub fn new(n: usize, effect_size: f64, censor_rate: f64, seed: u64) -> Self {
        Self {
            n,
            latent_dim: 4,
            effect_size,
            censor_rate,
            seed,
            volume_shape: (8, 16, 16),
            gene_count: 200,
            lambda0: 1.0 / 400.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(CoreError::TooFewSubjects {
                needed: 8,
                got: self.n,
            });
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(CoreError::InvalidConfig(format!(
                "censor_rate must lie in [0, 1), got {}",
                self.censor_rate
            )));
        }
        if self.latent_dim == 0 {
            return Err(CoreError::InvalidConfig("latent_dim must be positive".into()));
        }
        if !self.effect_size.is_finite() {
            return Err(CoreError::InvalidConfig("effect_size must be finite".into()));
        }
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return Err(CoreError::InvalidConfig("lambda0 must be positive".into()));
        }
        let (d, h, w) = self.volume_shape;
        if d < 2 || h < 2 || w < 2 {
            return Err(CoreError::InvalidConfig(
                "volume_shape axes must be at least 2".into(),
            ));
        }
        if self.gene_count < 10 {
            return Err(CoreError::InvalidConfig(
                "gene_count must be at least 10".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub latents_path: PathBuf,
    pub ids: Vec<String>,
    pub u: Vec<f64>,
    pub labels: Vec<SurvivalLabel>,
}

/// Normalized voxel-center coordinate in [0, 1].
fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

fn gaussian_blob(
    shape: (usize, usize, usize),
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
) -> Array3<f64> {
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let dz = coord(z, shape.0) - center[0];
        let dy = coord(y, shape.1) - center[1];
        let dx = coord(x, shape.2) - center[2];
        let d2 = dz * dz + dy * dy + dx * dx;
        amplitude * (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

pub fn synthesize_cohort(params: &SynthParams, out_dir: &Path) -> Result<SynthOutput> {
    params.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");

    let g = params.gene_count;
    let sig_len = (g / 10).max(1);
    let baseline: Vec<f64> = (0..g).map(|_| standard.sample(&mut rng)).collect();
    let risk_sig: Vec<f64> = (0..sig_len).map(|_| standard.sample(&mut rng)).collect();
    let nuisance_sig: Vec<f64> = (0..sig_len).map(|_| standard.sample(&mut rng)).collect();

    let shape = params.volume_shape;
    let mut patients = Vec::with_capacity(params.n);
    let mut ids = Vec::with_capacity(params.n);
    let mut us = Vec::with_capacity(params.n);
    let mut labels = Vec::with_capacity(params.n);
    let mut latents_csv = String::from("id,u\n");

    for i in 0..params.n {
        let id = format!("p{i:04}");
        let u_s: f64 = rng.gen_range(-1.8..1.8);
        let u_t: f64 = rng.gen_range(-1.2..1.2);
        let u_p: f64 = rng.gen_range(-1.2..1.2);
        let u_r: f64 = rng.gen_range(-1.8..1.8);
        let u = u_s + u_t + u_p + u_r;
        let nuisance: Vec<f64> = (1..params.latent_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let nz = |k: usize| nuisance.get(k).copied().unwrap_or(0.0);

        // event time from an exponential with rate lambda0 * exp(effect * u)
        let quantile = 1.0 - rng.gen::<f64>();
        let rate = params.lambda0 * (params.effect_size * u).exp();
        let event_time = (-quantile.ln() / rate).max(1e-3);
        let censored = rng.gen::<f64>() < params.censor_rate;
        let (time, event) = if censored {
            ((event_time * rng.gen::<f64>()).max(1e-3), false)
        } else {
            (event_time, true)
        };

        // CT: one blob whose width grows with the CT-visible latent
        let ct_sigma = 0.16 * (1.0 + 0.6 * ((u_s + u_t) / 2.0).tanh());
        let ct_center = [
            0.5 + 0.08 * nz(0),
            0.5 + 0.08 * nz(0),
            0.5 - 0.08 * nz(0),
        ];
        let mut ct = gaussian_blob(shape, ct_center, ct_sigma, 1.0);
        ct.mapv_inplace(|v| v + 0.02 * standard.sample(&mut rng));

        // PET: two foci whose uptake ratio tracks the PET-visible latent
        let ratio = 0.4 + 0.35 * ((u_s + u_p) / 2.0).tanh();
        let off = 0.06 * nz(1);
        let a = gaussian_blob(shape, [0.35 + off, 0.35, 0.35], 0.12, 1.0);
        let b = gaussian_blob(shape, [0.65, 0.65 + off, 0.65], 0.12, ratio);
        let mut pet = a + b;
        pet.mapv_inplace(|v| v + 0.02 * standard.sample(&mut rng));

        // RNA: baseline plus a risk signature and a nuisance signature
        let mut rna = baseline.clone();
        for (gidx, s) in risk_sig.iter().enumerate() {
            rna[gidx] += 0.8 * (u_s + u_r) * s;
        }
        for (gidx, s) in nuisance_sig.iter().enumerate() {
            rna[sig_len + gidx] += 0.8 * nz(2) * s;
        }
        for v in rna.iter_mut() {
            *v += 0.15 * standard.sample(&mut rng);
        }

        let ct_path = format!("{id}_ct.raw");
        let pet_path = format!("{id}_pet.raw");
        let rna_path = format!("{id}_rna.tsv");
        volio::write_volume(&out_dir.join(&ct_path), &VolumeTensor::new(ct)?, [1.0; 3])?;
        volio::write_volume(&out_dir.join(&pet_path), &VolumeTensor::new(pet)?, [1.0; 3])?;
        volio::write_expression(&out_dir.join(&rna_path), &rna)?;

        latents_csv.push_str(&format!("{id},{u}\n"));
        patients.push(ManifestPatient {
            id: id.clone(),
            ct_path: Some(ct_path),
            pet_path: Some(pet_path),
            rna_path: Some(rna_path),
            time_days: time,
            event: u8::from(event),
        });
        labels.push(SurvivalLabel::new(time, event)?);
        ids.push(id);
        us.push(u);
    }

    let manifest = ManifestFile {
        patients,
        preprocessing: ManifestPreprocessing {
            shape: [shape.0, shape.1, shape.2],
            normalization: "zscore".into(),
        },
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| CoreError::io(&manifest_path, e))?;
    let latents_path = out_dir.join("latents.csv");
    std::fs::write(&latents_path, latents_csv).map_err(|e| CoreError::io(&latents_path, e))?;

    Ok(SynthOutput {
        manifest_path,
        latents_path,
        ids,
        u: us,
        labels,
    })
}

/// Read a latents.csv written by [`synthesize_cohort`].
pub fn read_latents(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,u") => {}
        _ => {
            return Err(CoreError::Manifest(format!(
                "{}: latents file must start with an id,u header",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, u) = line.split_once(',').ok_or_else(|| {
            CoreError::Manifest(format!("{}: malformed latents row {line:?}", path.display()))
        })?;
        let u: f64 = u.parse().map_err(|_| {
            CoreError::Manifest(format!("{}: non-numeric latent {u:?}", path.display()))
        })?;
        out.push((id.to_string(), u));
    }
    Ok(out)
}
