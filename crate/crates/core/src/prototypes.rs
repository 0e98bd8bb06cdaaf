//! Category prototypes: class-mean initialization, momentum refinement and
//! cosine scoring.

use thiserror::Error;

use crate::numerics::Tensor;
use crate::pseudo_labels::{CosineScores, LabelMap};

/// Default momentum for prototype refinement.
pub const DEFAULT_MOMENTUM: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrototypeError {
    #[error("no labeled pixels for categories {0:?}; cannot initialize prototypes")]
    EmptyCategories(Vec<usize>),
    #[error("feature map {index} is {got} but its labels are {want}")]
    Mismatch { index: usize, got: String, want: String },
    #[error("feature dimension {got} does not match prototype dimension {want}")]
    Dimension { got: usize, want: usize },
    #[error("feature at pixel {0} has zero norm")]
    ZeroFeature(usize),
    #[error("prototype for category {0} has zero norm")]
    ZeroPrototype(usize),
    #[error("momentum {0} outside [0, 1]")]
    Momentum(f64),
    #[error("invalid feature map: {0}")]
    Shape(String),
}

/// Per-pixel embeddings of one image, stored as `[H*W, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Tensor) -> Result<Self, PrototypeError> {
        if values.rank() != 2 || values.shape()[0] != height * width {
            return Err(PrototypeError::Shape(format!(
                "expected [{}, d] for {height}x{width}, got {:?}",
                height * width,
                values.shape()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.values.last_dim()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let d = self.dim();
        &self.values.data()[p * d..(p + 1) * d]
    }
}

/// Running per-category sums of labeled pixel features.
#[derive(Clone, Debug)]
pub struct ClassMeans {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl ClassMeans {
    pub fn new(num_categories: usize, dim: usize) -> Self {
        Self {
            dim,
            sums: vec![0.0; num_categories * dim],
            counts: vec![0; num_categories],
        }
    }

    pub fn add(&mut self, index: usize, features: &FeatureMap, labels: &LabelMap) -> Result<(), PrototypeError> {
        if features.height != labels.height() || features.width != labels.width() {
            return Err(PrototypeError::Mismatch {
                index,
                got: format!("{}x{}", features.height, features.width),
                want: format!("{}x{}", labels.height(), labels.width()),
            });
        }
        if features.dim() != self.dim {
            return Err(PrototypeError::Dimension {
                got: features.dim(),
                want: self.dim,
            });
        }
        if labels.num_categories() != self.counts.len() {
            return Err(PrototypeError::Mismatch {
                index,
                got: format!("{} categories", labels.num_categories()),
                want: format!("{} categories", self.counts.len()),
            });
        }
        let d = self.dim;
        for (p, c) in labels.assigned() {
            for (s, v) in self.sums[c * d..(c + 1) * d].iter_mut().zip(features.pixel(p)) {
                *s += v;
            }
            self.counts[c] += 1;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Mean feature of category `c`, or `None` if it has no pixels.
    pub fn mean(&self, c: usize) -> Option<Vec<f64>> {
        let n = self.counts[c];
        (n > 0).then(|| {
            self.sums[c * self.dim..(c + 1) * self.dim]
                .iter()
                .map(|s| s / n as f64)
                .collect()
        })
    }
}

/// The `L x d` prototype matrix with its refinement counter.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    vectors: Tensor,
    iteration: u64,
    momentum: f64,
}

impl PrototypeSet {
    pub fn new(vectors: Tensor, iteration: u64, momentum: f64) -> Result<Self, PrototypeError> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(PrototypeError::Momentum(momentum));
        }
        if vectors.rank() != 2 {
            return Err(PrototypeError::Shape(format!(
                "prototypes must be [L, d], got {:?}",
                vectors.shape()
            )));
        }
        Ok(Self {
            vectors,
            iteration,
            momentum,
        })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn num_categories(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[c * d..(c + 1) * d]
    }

    /// Row-normalized copy of the prototype matrix.
    pub fn normalized(&self) -> Result<Tensor, PrototypeError> {
        let d = self.dim();
        let mut out = self.vectors.clone();
        for (c, row) in out.data_mut().chunks_mut(d).enumerate() {
            let n = norm(row);
            if n == 0.0 {
                return Err(PrototypeError::ZeroPrototype(c));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Class means of labeled source features; every category needs a pixel.
pub fn init_prototypes(
    features: &[FeatureMap],
    labels: &[LabelMap],
    momentum: f64,
) -> Result<PrototypeSet, PrototypeError> {
    let (Some(f0), Some(l0)) = (features.first(), labels.first()) else {
        return Err(PrototypeError::EmptyCategories(Vec::new()));
    };
    let mut acc = ClassMeans::new(l0.num_categories(), f0.dim());
    for (i, (f, l)) in features.iter().zip(labels).enumerate() {
        acc.add(i, f, l)?;
    }
    prototypes_from_means(&acc, momentum)
}

/// Finish an initialization from accumulated class sums.
pub fn prototypes_from_means(acc: &ClassMeans, momentum: f64) -> Result<PrototypeSet, PrototypeError> {
    let l = acc.counts.len();
    let empty: Vec<usize> = (0..l).filter(|&c| acc.counts[c] == 0).collect();
    if !empty.is_empty() {
        return Err(PrototypeError::EmptyCategories(empty));
    }
    let data = (0..l).flat_map(|c| acc.mean(c).expect("non-empty")).collect();
    let set = PrototypeSet::new(Tensor::new(vec![l, acc.dim], data).expect("shape"), 0, momentum)?;
    for c in 0..l {
        if norm(set.prototype(c)) == 0.0 {
            return Err(PrototypeError::ZeroPrototype(c));
        }
    }
    Ok(set)
}

/// Move each prototype toward the batch mean of its category:
/// `c <- a c + (1 - a) mean`. Categories absent from the batch are kept.
pub fn refine_prototypes(
    protos: &PrototypeSet,
    features: &[FeatureMap],
    labels: &[LabelMap],
) -> Result<PrototypeSet, PrototypeError> {
    let mut acc = ClassMeans::new(protos.num_categories(), protos.dim());
    for (i, (f, l)) in features.iter().zip(labels).enumerate() {
        acc.add(i, f, l)?;
    }
    let a = protos.momentum;
    let mut next = protos.clone();
    let d = protos.dim();
    for c in 0..protos.num_categories() {
        if let Some(mean) = acc.mean(c) {
            let row = &mut next.vectors.data_mut()[c * d..(c + 1) * d];
            for (v, m) in row.iter_mut().zip(mean) {
                *v = a * *v + (1.0 - a) * m;
            }
        }
    }
    next.iteration += 1;
    Ok(next)
}

/// Cosine similarity of every pixel feature with every prototype.
pub fn cosine_scores(features: &FeatureMap, protos: &PrototypeSet) -> Result<CosineScores, PrototypeError> {
    if features.dim() != protos.dim() {
        return Err(PrototypeError::Dimension {
            got: features.dim(),
            want: protos.dim(),
        });
    }
    let cn = protos.normalized()?;
    let l = protos.num_categories();
    let d = protos.dim();
    let pixels = features.height * features.width;
    let mut out = Vec::with_capacity(pixels * l);
    for p in 0..pixels {
        let f = features.pixel(p);
        let n = norm(f);
        if n == 0.0 {
            return Err(PrototypeError::ZeroFeature(p));
        }
        for c in 0..l {
            let dot: f64 = f.iter().zip(&cn.data()[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
            out.push((dot / n).clamp(-1.0, 1.0));
        }
    }
    Ok(CosineScores {
        height: features.height,
        width: features.width,
        values: Tensor::new(vec![pixels, l], out).expect("shape"),
    })
}
