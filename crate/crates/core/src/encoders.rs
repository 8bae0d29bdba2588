//! Trainable encoders: a small 3-D patch transformer for volumetric
//! modalities, a fully connected net for expression vectors, and bias-free
//! projection heads onto the unit sphere.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::DenseVector;

/// Preprocessed 3-D intensity volume, shape (depth, height, width).
#[derive(Debug, Clone)]
pub struct VolumeTensor {
    voxels: Array3<f64>,
}

impl VolumeTensor {
    pub fn new(voxels: Array3<f64>) -> Result<Self> {
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("VolumeTensor".into()));
        }
        Ok(Self { voxels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.voxels.dim();
        (d.0, d.1, d.2)
    }

    pub fn voxels(&self) -> &Array3<f64> {
        &self.voxels
    }
}

/// Standardized gene-expression vector.
#[derive(Debug, Clone)]
pub struct ExpressionVector {
    values: DenseVector,
}

impl ExpressionVector {
    pub fn new(values: DenseVector) -> Self {
        Self { values }
    }

    pub fn gene_count(&self) -> usize {
        self.values.dim()
    }

    pub fn values(&self) -> &DenseVector {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub volume_patch_size: (usize, usize, usize),
    pub transformer_blocks: usize,
    pub model_width: usize,
    pub rna_hidden_layers: Vec<usize>,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            volume_patch_size: (4, 16, 16),
            transformer_blocks: 2,
            model_width: 64,
            rna_hidden_layers: vec![64, 64],
            projection_dim: 128,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (pd, ph, pw) = self.volume_patch_size;
        if pd == 0 || ph == 0 || pw == 0 {
            return Err(CoreError::InvalidConfig(
                "volume_patch_size axes must be positive".into(),
            ));
        }
        if self.model_width == 0 {
            return Err(CoreError::InvalidConfig("model_width must be positive".into()));
        }
        if self.projection_dim == 0 {
            return Err(CoreError::InvalidConfig(
                "projection_dim must be positive".into(),
            ));
        }
        if self.rna_hidden_layers.len() > 6 {
            return Err(CoreError::InvalidConfig(format!(
                "rna_hidden_layers allows at most 6 layers, got {}",
                self.rna_hidden_layers.len()
            )));
        }
        if self.rna_hidden_layers.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig(
                "rna_hidden_layers widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pre-projection latents for one patient.
#[derive(Debug, Clone)]
pub struct EmbeddingTriplet {
    pub t: DenseVector,
    pub p: DenseVector,
    pub r: DenseVector,
}

/// Unit-norm projected embeddings for one patient.
#[derive(Debug, Clone)]
pub struct ProjectedTriplet {
    pub t_tilde: DenseVector,
    pub p_tilde: DenseVector,
    pub r_tilde: DenseVector,
}

pub(crate) fn uniform_fan_in(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl BlockWeights {
    fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        let hidden = 2 * width;
        Self {
            wq: uniform_fan_in(rng, width, width, width),
            bq: Array2::zeros((1, width)),
            wk: uniform_fan_in(rng, width, width, width),
            bk: Array2::zeros((1, width)),
            wv: uniform_fan_in(rng, width, width, width),
            bv: Array2::zeros((1, width)),
            wo: uniform_fan_in(rng, width, width, width),
            bo: Array2::zeros((1, width)),
            w1: uniform_fan_in(rng, width, hidden, width),
            b1: Array2::zeros((1, hidden)),
            w2: uniform_fan_in(rng, hidden, width, hidden),
            b2: Array2::zeros((1, width)),
        }
    }
}

pub struct BlockNodes {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// 3-D patch transformer over a fixed preprocessed volume shape.
#[derive(Debug, Clone)]
pub struct VolumeEncoder {
    pub volume_shape: (usize, usize, usize),
    pub patch_size: (usize, usize, usize),
    pub model_width: usize,
    pub patch_w: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_w: Array2<f64>,
    pub final_b: Array2<f64>,
}

pub struct VolumeEncoderNodes {
    patch_w: NodeId,
    pos: NodeId,
    blocks: Vec<BlockNodes>,
    final_w: NodeId,
    final_b: NodeId,
}

impl VolumeEncoder {
    pub fn init(
        cfg: &EncoderConfig,
        volume_shape: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, h, w) = volume_shape;
        let (pd, ph, pw) = cfg.volume_patch_size;
        if d == 0 || h == 0 || w == 0 {
            return Err(CoreError::InvalidConfig("volume shape axes must be positive".into()));
        }
        if d % pd != 0 || h % ph != 0 || w % pw != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "volume shape {volume_shape:?} not divisible by patch {0:?}",
                cfg.volume_patch_size
            )));
        }
        let num_patches = (d / pd) * (h / ph) * (w / pw);
        let patch_voxels = pd * ph * pw;
        let width = cfg.model_width;
        let blocks = (0..cfg.transformer_blocks)
            .map(|_| BlockWeights::init(rng, width))
            .collect();
        Ok(Self {
            volume_shape,
            patch_size: cfg.volume_patch_size,
            model_width: width,
            patch_w: uniform_fan_in(rng, patch_voxels, width, patch_voxels),
            pos: uniform_fan_in(rng, num_patches, width, width),
            blocks,
            final_w: uniform_fan_in(rng, width, width, width),
            final_b: Array2::zeros((1, width)),
        })
    }

    /// Rows are flattened patches in (z, y, x) patch-grid order.
    pub fn patchify(&self, v: &VolumeTensor) -> Result<Array2<f64>> {
        if v.shape() != self.volume_shape {
            return Err(CoreError::VolumeShapeMismatch {
                expected: self.volume_shape,
                got: v.shape(),
            });
        }
        let (pd, ph, pw) = self.patch_size;
        let (d, h, w) = self.volume_shape;
        let (gd, gh, gw) = (d / pd, h / ph, w / pw);
        let mut x = Array2::zeros((gd * gh * gw, pd * ph * pw));
        let vox = v.voxels();
        let mut row = 0;
        for iz in 0..gd {
            for iy in 0..gh {
                for ix in 0..gw {
                    let mut col = 0;
                    for dz in 0..pd {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                x[[row, col]] =
                                    vox[[iz * pd + dz, iy * ph + dy, ix * pw + dx]];
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Ok(x)
    }

    pub fn stage(&self, tape: &mut Tape, prefix: &str) -> (VolumeEncoderNodes, Vec<(String, NodeId)>) {
        let mut named = Vec::new();
        let mut put = |tape: &mut Tape, name: String, value: &Array2<f64>| {
            let id = tape.leaf(value.clone());
            named.push((name, id));
            id
        };
        let patch_w = put(tape, format!("{prefix}.patch_w"), &self.patch_w);
        let pos = put(tape, format!("{prefix}.pos"), &self.pos);
        let mut blocks = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            blocks.push(BlockNodes {
                wq: put(tape, format!("{prefix}.block{i}.wq"), &b.wq),
                bq: put(tape, format!("{prefix}.block{i}.bq"), &b.bq),
                wk: put(tape, format!("{prefix}.block{i}.wk"), &b.wk),
                bk: put(tape, format!("{prefix}.block{i}.bk"), &b.bk),
                wv: put(tape, format!("{prefix}.block{i}.wv"), &b.wv),
                bv: put(tape, format!("{prefix}.block{i}.bv"), &b.bv),
                wo: put(tape, format!("{prefix}.block{i}.wo"), &b.wo),
                bo: put(tape, format!("{prefix}.block{i}.bo"), &b.bo),
                w1: put(tape, format!("{prefix}.block{i}.w1"), &b.w1),
                b1: put(tape, format!("{prefix}.block{i}.b1"), &b.b1),
                w2: put(tape, format!("{prefix}.block{i}.w2"), &b.w2),
                b2: put(tape, format!("{prefix}.block{i}.b2"), &b.b2),
            });
        }
        let final_w = put(tape, format!("{prefix}.final_w"), &self.final_w);
        let final_b = put(tape, format!("{prefix}.final_b"), &self.final_b);
        (
            VolumeEncoderNodes {
                patch_w,
                pos,
                blocks,
                final_w,
                final_b,
            },
            named,
        )
    }

    /// Forward one volume through staged weights; output node is 1 x width.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &VolumeEncoderNodes,
        v: &VolumeTensor,
    ) -> Result<NodeId> {
        let x = tape.constant(self.patchify(v)?);
        let embedded = tape.matmul(x, nodes.patch_w);
        let mut h = tape.add(embedded, nodes.pos);
        let scale = 1.0 / (self.model_width as f64).sqrt();
        for b in &nodes.blocks {
            let a_in = tape.row_standardize(h);
            let q0 = tape.matmul(a_in, b.wq);
            let q = tape.add_row(q0, b.bq);
            let k0 = tape.matmul(a_in, b.wk);
            let k = tape.add_row(k0, b.bk);
            let v0 = tape.matmul(a_in, b.wv);
            let vv = tape.add_row(v0, b.bv);
            let kt = tape.transpose(k);
            let logits0 = tape.matmul(q, kt);
            let logits = tape.scale(logits0, scale);
            let attn = tape.row_softmax(logits);
            let mixed = tape.matmul(attn, vv);
            let o0 = tape.matmul(mixed, b.wo);
            let o = tape.add_row(o0, b.bo);
            h = tape.add(h, o);

            let m_in = tape.row_standardize(h);
            let m0 = tape.matmul(m_in, b.w1);
            let m1 = tape.add_row(m0, b.b1);
            let m2 = tape.tanh(m1);
            let m3 = tape.matmul(m2, b.w2);
            let m4 = tape.add_row(m3, b.b2);
            h = tape.add(h, m4);
        }
        let pooled = tape.mean_rows(h);
        let out0 = tape.matmul(pooled, nodes.final_w);
        Ok(tape.add_row(out0, nodes.final_b))
    }

    /// Evaluation-mode embedding (no gradients retained).
    pub fn encode(&self, v: &VolumeTensor) -> Result<DenseVector> {
        let mut tape = Tape::new();
        let (nodes, _) = self.stage(&mut tape, "eval");
        let out = self.forward(&mut tape, &nodes, v)?;
        Ok(DenseVector::from(tape.value(out).row(0).to_vec()))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            (format!("{prefix}.patch_w"), &self.patch_w),
            (format!("{prefix}.pos"), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.wq"), &b.wq));
            out.push((format!("{prefix}.block{i}.bq"), &b.bq));
            out.push((format!("{prefix}.block{i}.wk"), &b.wk));
            out.push((format!("{prefix}.block{i}.bk"), &b.bk));
            out.push((format!("{prefix}.block{i}.wv"), &b.wv));
            out.push((format!("{prefix}.block{i}.bv"), &b.bv));
            out.push((format!("{prefix}.block{i}.wo"), &b.wo));
            out.push((format!("{prefix}.block{i}.bo"), &b.bo));
            out.push((format!("{prefix}.block{i}.w1"), &b.w1));
            out.push((format!("{prefix}.block{i}.b1"), &b.b1));
            out.push((format!("{prefix}.block{i}.w2"), &b.w2));
            out.push((format!("{prefix}.block{i}.b2"), &b.b2));
        }
        out.push((format!("{prefix}.final_w"), &self.final_w));
        out.push((format!("{prefix}.final_b"), &self.final_b));
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            (format!("{prefix}.patch_w"), &mut self.patch_w),
            (format!("{prefix}.pos"), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}.block{i}.wq"), &mut b.wq));
            out.push((format!("{prefix}.block{i}.bq"), &mut b.bq));
            out.push((format!("{prefix}.block{i}.wk"), &mut b.wk));
            out.push((format!("{prefix}.block{i}.bk"), &mut b.bk));
            out.push((format!("{prefix}.block{i}.wv"), &mut b.wv));
            out.push((format!("{prefix}.block{i}.bv"), &mut b.bv));
            out.push((format!("{prefix}.block{i}.wo"), &mut b.wo));
            out.push((format!("{prefix}.block{i}.bo"), &mut b.bo));
            out.push((format!("{prefix}.block{i}.w1"), &mut b.w1));
            out.push((format!("{prefix}.block{i}.b1"), &mut b.b1));
            out.push((format!("{prefix}.block{i}.w2"), &mut b.w2));
            out.push((format!("{prefix}.block{i}.b2"), &mut b.b2));
        }
        out.push((format!("{prefix}.final_w"), &mut self.final_w));
        out.push((format!("{prefix}.final_b"), &mut self.final_b));
        out
    }
}

/// Fully connected encoder: tanh hidden layers, linear output.
#[derive(Debug, Clone)]
pub struct ExpressionEncoder {
    pub gene_count: usize,
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
}

pub struct ExpressionEncoderNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl ExpressionEncoder {
    pub fn init(cfg: &EncoderConfig, gene_count: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if gene_count == 0 {
            return Err(CoreError::InvalidConfig("gene_count must be positive".into()));
        }
        let mut dims = vec![gene_count];
        dims.extend(cfg.rna_hidden_layers.iter().copied());
        dims.push(cfg.model_width);
        let layers = dims
            .windows(2)
            .map(|w| {
                (
                    uniform_fan_in(rng, w[0], w[1], w[0]),
                    Array2::zeros((1, w[1])),
                )
            })
            .collect();
        Ok(Self { gene_count, layers })
    }

    pub fn stage(
        &self,
        tape: &mut Tape,
        prefix: &str,
    ) -> (ExpressionEncoderNodes, Vec<(String, NodeId)>) {
        let mut named = Vec::new();
        let mut layers = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wid = tape.leaf(w.clone());
            let bid = tape.leaf(b.clone());
            named.push((format!("{prefix}.l{i}.w"), wid));
            named.push((format!("{prefix}.l{i}.b"), bid));
            layers.push((wid, bid));
        }
        (ExpressionEncoderNodes { layers }, named)
    }

    /// Forward a batch (rows are patients); output node is B x width.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &ExpressionEncoderNodes,
        x: NodeId,
    ) -> Result<NodeId> {
        let got = tape.value(x).ncols();
        if got != self.gene_count {
            return Err(CoreError::DimMismatch {
                context: "encode_expression",
                expected: self.gene_count,
                got,
            });
        }
        let mut h = x;
        let last = nodes.layers.len() - 1;
        for (i, (w, b)) in nodes.layers.iter().enumerate() {
            let lin = tape.matmul(h, *w);
            h = tape.add_row(lin, *b);
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn encode(&self, x: &ExpressionVector) -> Result<DenseVector> {
        let mut tape = Tape::new();
        let (nodes, _) = self.stage(&mut tape, "eval");
        let row = tape.constant(
            Array2::from_shape_vec((1, x.gene_count()), x.values().values().to_vec())
                .expect("row shape"),
        );
        let out = self.forward(&mut tape, &nodes, row)?;
        Ok(DenseVector::from(tape.value(out).row(0).to_vec()))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.l{i}.w"), w));
            out.push((format!("{prefix}.l{i}.b"), b));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.l{i}.w"), w));
            out.push((format!("{prefix}.l{i}.b"), b));
        }
        out
    }
}

/// Bias-free linear map followed by row L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub w: Array2<f64>,
}

impl ProjectionHead {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: uniform_fan_in(rng, in_dim, out_dim, in_dim),
        }
    }

    pub fn stage(&self, tape: &mut Tape, prefix: &str) -> (NodeId, Vec<(String, NodeId)>) {
        let id = tape.leaf(self.w.clone());
        (id, vec![(format!("{prefix}.w"), id)])
    }

    /// Input B x in_dim, output B x out_dim with unit-norm rows.
    pub fn forward(&self, tape: &mut Tape, w: NodeId, x: NodeId) -> Result<NodeId> {
        let lin = tape.matmul(x, w);
        tape.row_l2_normalize(lin)
    }

    pub fn project(&self, e: &DenseVector) -> Result<DenseVector> {
        let mut tape = Tape::new();
        let (w, _) = self.stage(&mut tape, "eval");
        let x = tape.constant(
            Array2::from_shape_vec((1, e.dim()), e.values().to_vec()).expect("row shape"),
        );
        let out = self.forward(&mut tape, w, x)?;
        Ok(DenseVector::from(tape.value(out).row(0).to_vec()))
    }
}

/// Project a latent triplet onto the sphere with three separate heads.
pub fn project(
    e: &EmbeddingTriplet,
    head_t: &ProjectionHead,
    head_p: &ProjectionHead,
    head_r: &ProjectionHead,
) -> Result<ProjectedTriplet> {
    Ok(ProjectedTriplet {
        t_tilde: head_t.project(&e.t)?,
        p_tilde: head_p.project(&e.p)?,
        r_tilde: head_r.project(&e.r)?,
    })
}
