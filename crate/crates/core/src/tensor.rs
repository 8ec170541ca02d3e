//! Dense row-major matrices and the named tensor collection shared by model
//! parameters, gradients, client deltas and coverage masks.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Leading `cols` columns of every row.
    pub fn leading_cols(&self, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[..cols]);
        }
        out
    }

    /// Leading `rows` rows.
    pub fn leading_rows(&self, rows: usize) -> Matrix {
        Matrix {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Identifies one tensor of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorId {
    Embedding(usize),
    BottomW1,
    BottomB1,
    BottomW2,
    BottomB2,
    TopW1,
    TopB1,
    TopW2,
    TopB2,
}

impl TensorId {
    pub fn name(self) -> String {
        match self {
            TensorId::Embedding(i) => format!("embedding.{i}"),
            TensorId::BottomW1 => "bottom.w1".into(),
            TensorId::BottomB1 => "bottom.b1".into(),
            TensorId::BottomW2 => "bottom.w2".into(),
            TensorId::BottomB2 => "bottom.b2".into(),
            TensorId::TopW1 => "top.w1".into(),
            TensorId::TopB1 => "top.b1".into(),
            TensorId::TopW2 => "top.w2".into(),
            TensorId::TopB2 => "top.b2".into(),
        }
    }

    fn parse(name: &str) -> Option<TensorId> {
        Some(match name {
            "bottom.w1" => TensorId::BottomW1,
            "bottom.b1" => TensorId::BottomB1,
            "bottom.w2" => TensorId::BottomW2,
            "bottom.b2" => TensorId::BottomB2,
            "top.w1" => TensorId::TopW1,
            "top.b1" => TensorId::TopB1,
            "top.w2" => TensorId::TopW2,
            "top.b2" => TensorId::TopB2,
            other => TensorId::Embedding(other.strip_prefix("embedding.")?.parse().ok()?),
        })
    }
}

const MLP_IDS: [TensorId; 8] = [
    TensorId::BottomW1,
    TensorId::BottomB1,
    TensorId::BottomW2,
    TensorId::BottomB2,
    TensorId::TopW1,
    TensorId::TopB1,
    TensorId::TopW2,
    TensorId::TopB2,
];

/// All trainable tensors of the click model. The same layout holds
/// gradients, client deltas and binary coverage masks.
///
/// Weight matrices are stored `(fan_in, fan_out)`; biases are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    /// One `(cardinality, embedding_dim)` table per sparse field.
    pub embeddings: Vec<Matrix>,
    pub bottom_w1: Matrix,
    pub bottom_b1: Matrix,
    pub bottom_w2: Matrix,
    pub bottom_b2: Matrix,
    pub top_w1: Matrix,
    pub top_b1: Matrix,
    pub top_w2: Matrix,
    pub top_b2: Matrix,
}

pub type ModelParams = ParamTensors;
pub type GradientTensors = ParamTensors;

impl ParamTensors {
    pub fn ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        (0..self.embeddings.len())
            .map(TensorId::Embedding)
            .chain(MLP_IDS)
    }

    pub fn n_tensors(&self) -> usize {
        self.embeddings.len() + MLP_IDS.len()
    }

    pub fn get(&self, id: TensorId) -> &Matrix {
        match id {
            TensorId::Embedding(i) => &self.embeddings[i],
            TensorId::BottomW1 => &self.bottom_w1,
            TensorId::BottomB1 => &self.bottom_b1,
            TensorId::BottomW2 => &self.bottom_w2,
            TensorId::BottomB2 => &self.bottom_b2,
            TensorId::TopW1 => &self.top_w1,
            TensorId::TopB1 => &self.top_b1,
            TensorId::TopW2 => &self.top_w2,
            TensorId::TopB2 => &self.top_b2,
        }
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut Matrix {
        match id {
            TensorId::Embedding(i) => &mut self.embeddings[i],
            TensorId::BottomW1 => &mut self.bottom_w1,
            TensorId::BottomB1 => &mut self.bottom_b1,
            TensorId::BottomW2 => &mut self.bottom_w2,
            TensorId::BottomB2 => &mut self.bottom_b2,
            TensorId::TopW1 => &mut self.top_w1,
            TensorId::TopB1 => &mut self.top_b1,
            TensorId::TopW2 => &mut self.top_w2,
            TensorId::TopB2 => &mut self.top_b2,
        }
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.ids().map(|id| self.get(id)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let Self {
            embeddings,
            bottom_w1,
            bottom_b1,
            bottom_w2,
            bottom_b2,
            top_w1,
            top_b1,
            top_w2,
            top_b2,
        } = self;
        embeddings
            .iter_mut()
            .chain([
                bottom_w1, bottom_b1, bottom_w2, bottom_b2, top_w1, top_b1, top_w2, top_b2,
            ])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn filled_like(&self, v: f64) -> Self {
        self.map(|_| v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let m = |x: &Matrix| Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        Self {
            embeddings: self.embeddings.iter().map(m).collect(),
            bottom_w1: m(&self.bottom_w1),
            bottom_b1: m(&self.bottom_b1),
            bottom_w2: m(&self.bottom_w2),
            bottom_b2: m(&self.bottom_b2),
            top_w1: m(&self.top_w1),
            top_b1: m(&self.top_b1),
            top_w2: m(&self.top_w2),
            top_b2: m(&self.top_b2),
        }
    }

    pub fn n_coords(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.embeddings.len() == other.embeddings.len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: tensor shapes differ")))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes a checkpoint: magic, tensor count, then per tensor its name,
    /// shape and little-endian `f64` payload.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.n_tensors() as u32).to_le_bytes())?;
        for id in self.ids() {
            let t = self.get(id);
            let name = id.name();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows as u64).to_le_bytes())?;
            w.write_all(&(t.cols as u64).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Shape("not a tierfl checkpoint".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let mut embeddings: Vec<Option<Matrix>> = Vec::new();
        let mut mlp: [Option<Matrix>; 8] = Default::default();
        for _ in 0..n {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Shape("tensor name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let m = Matrix { rows, cols, data };
            match TensorId::parse(&name) {
                Some(TensorId::Embedding(i)) => {
                    if embeddings.len() <= i {
                        embeddings.resize(i + 1, None);
                    }
                    embeddings[i] = Some(m);
                }
                Some(id) => {
                    let pos = MLP_IDS.iter().position(|&x| x == id).expect("mlp id");
                    mlp[pos] = Some(m);
                }
                None => return Err(Error::Shape(format!("unknown tensor `{name}`"))),
            }
        }
        let embeddings = embeddings
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| Error::Shape(format!("missing embedding.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut it = mlp
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or_else(|| Error::Shape(format!("missing {}", MLP_IDS[i].name()))));
        let mut next = || it.next().expect("eight mlp tensors");
        Ok(Self {
            embeddings,
            bottom_w1: next()?,
            bottom_b1: next()?,
            bottom_w2: next()?,
            bottom_b2: next()?,
            top_w1: next()?,
            top_b1: next()?,
            top_w2: next()?,
            top_b2: next()?,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TFLCKPT1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
