//! DLRM-style click model with hand-derived gradients.
//!
//! Dense features pass through a bottom MLP to a vector `b` of size
//! `embedding_dim`. Every sparse field contributes one embedding (the history
//! field by mean pooling). All pairwise dot products among `{b, e_1..e_F}` are
//! concatenated after `b` and fed to a one-hidden-layer top MLP whose scalar
//! output is the click logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureSchema, Interaction, SparseSlot};
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::{Matrix, ParamTensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub bottom_hidden: usize,
    pub top_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            bottom_hidden: 16,
            top_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.bottom_hidden == 0 || self.top_hidden == 0 {
            return Err(Error::invalid("model dimensions must be >= 1"));
        }
        Ok(())
    }
}

/// Channel-reduced sub-model: the top MLP hidden layer keeps its leading
/// `round(channel_fraction * top_hidden)` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubModelSpec {
    pub channel_fraction: f64,
}

impl SubModelSpec {
    pub fn new(channel_fraction: f64) -> Self {
        Self { channel_fraction }
    }

    /// Width of the sliced hidden layer; errors unless it is a positive
    /// integer not exceeding `top_hidden`.
    pub fn sliced_width(&self, top_hidden: usize) -> Result<usize> {
        let f = self.channel_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!(
                "channel fraction {f} not in (0, 1]"
            )));
        }
        let exact = f * top_hidden as f64;
        let width = exact.round();
        if (exact - width).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "channel fraction {f} of top_hidden {top_hidden} is not an integral width"
            )));
        }
        if width < 1.0 {
            return Err(Error::invalid(format!(
                "channel fraction {f} leaves no hidden units"
            )));
        }
        Ok(width as usize)
    }
}

/// A configured click model. Parameters are held separately so many workers
/// can score and differentiate against shared read-only [`ParamTensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dlrm {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    slots: Vec<SparseSlot>,
}

struct Activations {
    bottom_hidden: Vec<f64>,
    /// `b` followed by one embedding per sparse field.
    vectors: Vec<Vec<f64>>,
    interaction: Vec<f64>,
    top_hidden: Vec<f64>,
    logit: f64,
}

impl Dlrm {
    pub fn new(schema: FeatureSchema, config: ModelConfig) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let slots = schema.slots();
        Ok(Self {
            config,
            schema,
            slots,
        })
    }

    pub fn n_sparse(&self) -> usize {
        self.slots.len()
    }

    pub fn dense_dim(&self) -> usize {
        self.schema.dense_fields.len()
    }

    /// `embedding_dim + F(F+1)/2` with `F` sparse fields.
    pub fn interaction_dim(&self) -> usize {
        let f = self.n_sparse();
        self.config.embedding_dim + f * (f + 1) / 2
    }

    /// Zero-valued parameters of the full model.
    pub fn zeros(&self) -> ParamTensors {
        let d = self.config.embedding_dim;
        let bh = self.config.bottom_hidden;
        let th = self.config.top_hidden;
        ParamTensors {
            embeddings: self
                .schema
                .sparse_fields
                .iter()
                .map(|f| Matrix::zeros(f.cardinality as usize, d))
                .collect(),
            bottom_w1: Matrix::zeros(self.dense_dim(), bh),
            bottom_b1: Matrix::zeros(1, bh),
            bottom_w2: Matrix::zeros(bh, d),
            bottom_b2: Matrix::zeros(1, d),
            top_w1: Matrix::zeros(self.interaction_dim(), th),
            top_b1: Matrix::zeros(1, th),
            top_w2: Matrix::zeros(th, 1),
            top_b2: Matrix::zeros(1, 1),
        }
    }

    /// Embeddings uniform in `±1/sqrt(embedding_dim)`, weights uniform in
    /// `±1/sqrt(fan_in)`, biases zero.
    pub fn init(&self, seed: u64) -> ParamTensors {
        let mut rng = rng_from(&[seed, stream::INIT]);
        let mut p = self.zeros();
        let emb_bound = 1.0 / (self.config.embedding_dim as f64).sqrt();
        for t in p.embeddings.iter_mut() {
            fill_uniform(&mut rng, t, emb_bound);
        }
        for w in [
            &mut p.bottom_w1,
            &mut p.bottom_w2,
            &mut p.top_w1,
            &mut p.top_w2,
        ] {
            let bound = 1.0 / (w.rows.max(1) as f64).sqrt();
            fill_uniform(&mut rng, w, bound);
        }
        p
    }

    /// Errors unless `params` has this model's shapes (any top width).
    pub fn check_params(&self, params: &ParamTensors) -> Result<()> {
        let full = self.zeros();
        let th = params.top_b1.cols;
        let ok = params.embeddings.len() == full.embeddings.len()
            && params
                .embeddings
                .iter()
                .zip(&full.embeddings)
                .all(|(a, b)| a.shape() == b.shape())
            && params.bottom_w1.shape() == full.bottom_w1.shape()
            && params.bottom_b1.shape() == full.bottom_b1.shape()
            && params.bottom_w2.shape() == full.bottom_w2.shape()
            && params.bottom_b2.shape() == full.bottom_b2.shape()
            && th >= 1
            && th <= self.config.top_hidden
            && params.top_w1.shape() == (self.interaction_dim(), th)
            && params.top_b1.shape() == (1, th)
            && params.top_w2.shape() == (th, 1)
            && params.top_b2.shape() == (1, 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "parameters do not match the model config".into(),
            ))
        }
    }

    fn check_batch(&self, batch: &[Interaction]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        for i in batch {
            i.check(&self.schema)?;
            if !i.dense_values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("dense input".into()));
            }
        }
        Ok(())
    }

    fn forward_one(&self, p: &ParamTensors, x: &Interaction) -> Activations {
        let d = self.config.embedding_dim;
        let bh = p.bottom_b1.cols;

        let mut hidden = p.bottom_b1.data.clone();
        for (k, &xv) in x.dense_values.iter().enumerate() {
            axpy(&mut hidden, xv, p.bottom_w1.row(k));
        }
        relu(&mut hidden);
        let mut b = p.bottom_b2.data.clone();
        for (j, &hv) in hidden.iter().enumerate().take(bh) {
            axpy(&mut b, hv, p.bottom_w2.row(j));
        }

        let mut vectors = Vec::with_capacity(self.n_sparse() + 1);
        vectors.push(b);
        for (f, slot) in self.slots.iter().enumerate() {
            let table = &p.embeddings[f];
            let e = match slot {
                SparseSlot::History => {
                    let mut e = vec![0.0; d];
                    if !x.history.is_empty() {
                        let w = 1.0 / x.history.len() as f64;
                        for &h in &x.history {
                            axpy(&mut e, w, table.row(h as usize));
                        }
                    }
                    e
                }
                s => table
                    .row(x.sparse_index(*s).expect("single-valued slot") as usize)
                    .to_vec(),
            };
            vectors.push(e);
        }

        let mut interaction = vectors[0].clone();
        for i in 0..vectors.len() {
            for j in i + 1..vectors.len() {
                interaction.push(dot(&vectors[i], &vectors[j]));
            }
        }

        let mut top_hidden = p.top_b1.data.clone();
        for (k, &v) in interaction.iter().enumerate() {
            axpy(&mut top_hidden, v, p.top_w1.row(k));
        }
        relu(&mut top_hidden);
        let logit = p.top_b2.data[0] + dot(&top_hidden, &p.top_w2.data);

        Activations {
            bottom_hidden: hidden,
            vectors,
            interaction,
            top_hidden,
            logit,
        }
    }

    pub fn logits(&self, params: &ParamTensors, batch: &[Interaction]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        Ok(batch
            .iter()
            .map(|x| self.forward_one(params, x).logit)
            .collect())
    }

    /// Click probabilities for every interaction of `batch`.
    pub fn forward(&self, params: &ParamTensors, batch: &[Interaction]) -> Result<Vec<f64>> {
        Ok(self
            .logits(params, batch)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Mean binary cross-entropy and its gradient with respect to every
    /// parameter, in the shape of `params`. Embedding rows the batch does not
    /// touch get exactly zero gradient.
    pub fn loss_and_grad(
        &self,
        params: &ParamTensors,
        batch: &[Interaction],
    ) -> Result<(f64, ParamTensors)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let d = self.config.embedding_dim;
        let mut g = params.zeros_like();
        let mut loss = 0.0;

        for x in batch {
            let act = self.forward_one(params, x);
            let y = f64::from(x.label);
            let z = act.logit;
            loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            let dz = (sigmoid(z) - y) / n;

            // Top MLP.
            g.top_b2.data[0] += dz;
            axpy(&mut g.top_w2.data, dz, &act.top_hidden);
            let mut d_hidden: Vec<f64> = params.top_w2.data.iter().map(|w| w * dz).collect();
            for (dh, &h) in d_hidden.iter_mut().zip(&act.top_hidden) {
                if h <= 0.0 {
                    *dh = 0.0;
                }
            }
            axpy(&mut g.top_b1.data, 1.0, &d_hidden);
            let mut d_inter = vec![0.0; act.interaction.len()];
            for (k, &v) in act.interaction.iter().enumerate() {
                axpy(g.top_w1.row_mut(k), v, &d_hidden);
                d_inter[k] = dot(params.top_w1.row(k), &d_hidden);
            }

            // Pairwise dot products.
            let mut d_vec: Vec<Vec<f64>> = vec![vec![0.0; d]; act.vectors.len()];
            d_vec[0].copy_from_slice(&d_inter[..d]);
            let mut k = d;
            for i in 0..act.vectors.len() {
                for j in i + 1..act.vectors.len() {
                    let s = d_inter[k];
                    k += 1;
                    if s != 0.0 {
                        axpy(&mut d_vec[i], s, &act.vectors[j]);
                        axpy(&mut d_vec[j], s, &act.vectors[i]);
                    }
                }
            }

            // Bottom MLP.
            let db = &d_vec[0];
            axpy(&mut g.bottom_b2.data, 1.0, db);
            let mut d_bh = vec![0.0; act.bottom_hidden.len()];
            for (j, &h) in act.bottom_hidden.iter().enumerate() {
                axpy(g.bottom_w2.row_mut(j), h, db);
                d_bh[j] = if h > 0.0 {
                    dot(params.bottom_w2.row(j), db)
                } else {
                    0.0
                };
            }
            axpy(&mut g.bottom_b1.data, 1.0, &d_bh);
            for (kk, &xv) in x.dense_values.iter().enumerate() {
                axpy(g.bottom_w1.row_mut(kk), xv, &d_bh);
            }

            // Embeddings.
            for (f, slot) in self.slots.iter().enumerate() {
                let de = &d_vec[f + 1];
                let table = &mut g.embeddings[f];
                match slot {
                    SparseSlot::History => {
                        if !x.history.is_empty() {
                            let w = 1.0 / x.history.len() as f64;
                            for &h in &x.history {
                                axpy(table.row_mut(h as usize), w, de);
                            }
                        }
                    }
                    s => {
                        let row = x.sparse_index(*s).expect("single-valued slot") as usize;
                        axpy(table.row_mut(row), 1.0, de);
                    }
                }
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((loss, g))
    }

    /// Copies the leading `sliced_width` hidden units of the top MLP; every
    /// other tensor is kept as is.
    pub fn extract_submodel(
        &self,
        params: &ParamTensors,
        spec: SubModelSpec,
    ) -> Result<ParamTensors> {
        self.check_params(params)?;
        let w = spec.sliced_width(self.config.top_hidden)?;
        if params.top_b1.cols != self.config.top_hidden {
            return Err(Error::Shape(
                "extract_submodel expects full-width parameters".into(),
            ));
        }
        let mut out = params.clone();
        out.top_w1 = params.top_w1.leading_cols(w);
        out.top_b1 = params.top_b1.leading_cols(w);
        out.top_w2 = params.top_w2.leading_rows(w);
        Ok(out)
    }

    /// Places a sub-model gradient into full shape. Returns the embedded
    /// gradient (zero outside the slice) and a 0/1 mask of covered
    /// coordinates.
    pub fn embed_subgradient(
        &self,
        grad: &ParamTensors,
        spec: SubModelSpec,
    ) -> Result<(ParamTensors, ParamTensors)> {
        let w = spec.sliced_width(self.config.top_hidden)?;
        let sliced_shape = self.extract_submodel(&self.zeros(), spec)?;
        grad.check_same_shape(&sliced_shape, "embed_subgradient")?;
        let mut full = self.zeros();
        let mut mask = full.filled_like(1.0);
        for (dst, src) in full.embeddings.iter_mut().zip(&grad.embeddings) {
            dst.data.copy_from_slice(&src.data);
        }
        full.bottom_w1 = grad.bottom_w1.clone();
        full.bottom_b1 = grad.bottom_b1.clone();
        full.bottom_w2 = grad.bottom_w2.clone();
        full.bottom_b2 = grad.bottom_b2.clone();
        full.top_b2 = grad.top_b2.clone();

        let th = self.config.top_hidden;
        for r in 0..full.top_w1.rows {
            full.top_w1.row_mut(r)[..w].copy_from_slice(grad.top_w1.row(r));
            mask.top_w1.row_mut(r)[w..]
                .iter_mut()
                .for_each(|m| *m = 0.0);
        }
        full.top_b1.data[..w].copy_from_slice(&grad.top_b1.data);
        mask.top_b1.data[w..th].iter_mut().for_each(|m| *m = 0.0);
        full.top_w2.data[..w].copy_from_slice(&grad.top_w2.data);
        mask.top_w2.data[w..th].iter_mut().for_each(|m| *m = 0.0);
        Ok((full, mask))
    }
}

fn fill_uniform<R: Rng>(rng: &mut R, m: &mut Matrix, bound: f64) {
    for v in m.data.iter_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}
