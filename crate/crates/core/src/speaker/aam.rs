use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::{BackwardOp, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

/// Bound on |cos θ| so the margin term stays differentiable.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AamConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            scale: 30.0,
            margin: 0.2,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Domain(format!("invalid AAM parameters {:?}", self)));
        }
        Ok(())
    }
}

/// Class-weight matrix `[embed_dim, n_classes]`.
#[derive(Clone, Debug)]
pub struct AamHead {
    pub weight: String,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub cfg: AamConfig,
}

impl AamHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        embed_dim: usize,
        n_classes: usize,
        cfg: AamConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let weight = format!("{name}.weight");
        store.init_xavier(rng, &weight, &[embed_dim, n_classes], embed_dim, n_classes);
        Ok(AamHead {
            weight,
            embed_dim,
            n_classes,
            cfg,
        })
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, e: Var, labels: &[usize]) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        aam_logits(g, e, w, labels, &self.cfg)
    }

    pub fn loss(&self, g: &mut Graph, store: &ParamStore, e: Var, labels: &[usize]) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        aam_softmax_loss(g, e, w, labels, &self.cfg)
    }
}

/// Clamps cosines and turns the target column into `s·cos(θ+m)`, the
/// others into `s·cos θ`.
struct MarginOp {
    labels: Vec<usize>,
    scale: f64,
    margin: f64,
}

impl MarginOp {
    fn forward(&self, cos: &Tensor) -> Tensor {
        let k = cos.cols();
        let (sm, cm) = self.margin.sin_cos();
        let mut out = cos.data().to_vec();
        for (i, row) in out.chunks_mut(k).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let c = v.clamp(-COS_CLAMP, COS_CLAMP);
                *v = if j == self.labels[i] {
                    let s = (1.0 - c * c).max(0.0).sqrt().min(1.0);
                    self.scale * (c * cm - s * sm)
                } else {
                    self.scale * c
                };
            }
        }
        Tensor::new(cos.shape(), out).expect("same shape")
    }
}

impl BackwardOp for MarginOp {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let cos = inputs[0];
        let k = cos.cols();
        let (sm, cm) = self.margin.sin_cos();
        let mut g = grad_out.data().to_vec();
        for (i, (row, crow)) in g.chunks_mut(k).zip(cos.data().chunks(k)).enumerate() {
            for (j, (gv, &c)) in row.iter_mut().zip(crow).enumerate() {
                if c.abs() > COS_CLAMP {
                    *gv = 0.0;
                } else if j == self.labels[i] {
                    let s = (1.0 - c * c).sqrt();
                    *gv *= self.scale * (cm + c / s * sm);
                } else {
                    *gv *= self.scale;
                }
            }
        }
        vec![Some(Tensor::new(cos.shape(), g).expect("same shape"))]
    }
}

/// Cosines between the rows of `e` (`[N, D]`) and the columns of `w`
/// (`[D, K]`), both L2-normalised.
pub fn cosine_matrix(g: &mut Graph, e: Var, w: Var) -> Result<Var> {
    let en = g.l2_normalize_rows(e);
    let wt = g.transpose(w);
    let wn = g.l2_normalize_rows(wt);
    Ok(g.matmul_t(en, wn, false, true)?)
}

/// Margin-adjusted, scaled logits `[N, K]`.
pub fn aam_logits(g: &mut Graph, e: Var, w: Var, labels: &[usize], cfg: &AamConfig) -> Result<Var> {
    cfg.validate()?;
    let cos = cosine_matrix(g, e, w)?;
    let (n, k) = {
        let c = g.value(cos);
        (c.rows(), c.cols())
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {} embeddings", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let op = MarginOp {
        labels: labels.to_vec(),
        scale: cfg.scale,
        margin: cfg.margin,
    };
    let value = op.forward(g.value(cos));
    Ok(g.custom(&[cos], value, Box::new(op)))
}

/// Mean cross entropy of the margin logits.
pub fn aam_softmax_loss(g: &mut Graph, e: Var, w: Var, labels: &[usize], cfg: &AamConfig) -> Result<Var> {
    let z = aam_logits(g, e, w, labels, cfg)?;
    Ok(g.cross_entropy(z, labels)?)
}
