//! Per-pixel label maps and self-paced pseudo-label selection.

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("label map needs {expected} entries for {height}x{width}, got {actual}")]
    Size {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("pixel {pixel} has category {category}, but only {num_categories} categories exist")]
    CategoryOutOfRange {
        pixel: usize,
        category: usize,
        num_categories: usize,
    },
    #[error("ground-truth pixel {pixel} is unassigned")]
    Unassigned { pixel: usize },
    #[error("pixel {pixel} row is not one-hot or zero: {row:?}")]
    NotOneHot { pixel: usize, row: Vec<f64> },
    #[error("pseudo-labels need at least 2 categories, got {0}")]
    TooFewCategories(usize),
    #[error("score matrix must be [{pixels}, L], got {shape:?}")]
    ScoreShape { pixels: usize, shape: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    GroundTruth,
    Pseudo,
}

/// One-hot-or-empty category assignment per pixel, stored compactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_categories: usize,
    labels: Vec<Option<usize>>,
    kind: LabelKind,
}

impl LabelMap {
    /// Fully labeled map from category indices in row-major order.
    pub fn ground_truth(
        height: usize,
        width: usize,
        num_categories: usize,
        categories: &[usize],
    ) -> Result<Self, LabelError> {
        let labels = categories.iter().map(|&c| Some(c)).collect();
        Self::build(height, width, num_categories, labels, LabelKind::GroundTruth)
    }

    /// Map where `None` marks an unassigned pixel.
    pub fn pseudo(
        height: usize,
        width: usize,
        num_categories: usize,
        labels: Vec<Option<usize>>,
    ) -> Result<Self, LabelError> {
        Self::build(height, width, num_categories, labels, LabelKind::Pseudo)
    }

    /// Decode an `[H*W, L]` matrix whose rows must be one-hot or all zero.
    pub fn from_one_hot(height: usize, width: usize, matrix: &Tensor, kind: LabelKind) -> Result<Self, LabelError> {
        let l = matrix.last_dim();
        let mut labels = Vec::with_capacity(height * width);
        for (pixel, row) in matrix.data().chunks(l.max(1)).enumerate() {
            let ones: Vec<usize> = (0..row.len()).filter(|&i| row[i] == 1.0).collect();
            let clean = row.iter().all(|&v| v == 0.0 || v == 1.0);
            match (clean, ones.as_slice()) {
                (true, []) => labels.push(None),
                (true, [c]) => labels.push(Some(*c)),
                _ => {
                    return Err(LabelError::NotOneHot {
                        pixel,
                        row: row.to_vec(),
                    })
                }
            }
        }
        Self::build(height, width, l, labels, kind)
    }

    fn build(
        height: usize,
        width: usize,
        num_categories: usize,
        labels: Vec<Option<usize>>,
        kind: LabelKind,
    ) -> Result<Self, LabelError> {
        if labels.len() != height * width {
            return Err(LabelError::Size {
                height,
                width,
                expected: height * width,
                actual: labels.len(),
            });
        }
        for (pixel, l) in labels.iter().enumerate() {
            match *l {
                Some(category) if category >= num_categories => {
                    return Err(LabelError::CategoryOutOfRange {
                        pixel,
                        category,
                        num_categories,
                    })
                }
                None if kind == LabelKind::GroundTruth => return Err(LabelError::Unassigned { pixel }),
                _ => {}
            }
        }
        Ok(Self {
            height,
            width,
            num_categories,
            labels,
            kind,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn get(&self, pixel: usize) -> Option<usize> {
        self.labels[pixel]
    }

    pub fn assigned_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// `(pixel, category)` for assigned pixels in pixel order.
    pub fn assigned(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(p, l)| l.map(|c| (p, c)))
    }

    /// Dense `[H*W, L]` one-hot-or-zero matrix.
    pub fn to_one_hot(&self) -> Tensor {
        let l = self.num_categories;
        let mut t = Tensor::zeros(&[self.labels.len(), l]);
        for (p, c) in self.assigned() {
            t.data_mut()[p * l + c] = 1.0;
        }
        t
    }

    /// Pixel count per category.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_categories];
        for (_, k) in self.assigned() {
            c[k] += 1;
        }
        c
    }
}

/// Per-pixel cosine similarity of features to each prototype, `[H*W, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineScores {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

impl CosineScores {
    pub fn num_categories(&self) -> usize {
        self.values.last_dim()
    }
}

/// Top-two bookkeeping behind a pseudo-label decision.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceReport {
    pub top_index: Vec<usize>,
    pub second_index: Vec<usize>,
    /// `r[I1] - r[I2]`, never negative.
    pub difference: Vec<f64>,
    pub selected: Vec<bool>,
}

/// Assign the argmax category to pixels whose top-two similarity gap exceeds
/// `delta_th`; every other pixel is left unassigned.
///
/// Several maxima give a gap of exactly zero, so such pixels stay unassigned
/// for any non-negative threshold.
pub fn assign_pseudo_labels(scores: &CosineScores, delta_th: f64) -> Result<(LabelMap, ConfidenceReport), LabelError> {
    let l = scores.num_categories();
    let pixels = scores.height * scores.width;
    if scores.values.rank() != 2 || scores.values.shape()[0] != pixels {
        return Err(LabelError::ScoreShape {
            pixels,
            shape: scores.values.shape().to_vec(),
        });
    }
    if l < 2 {
        return Err(LabelError::TooFewCategories(l));
    }
    let mut report = ConfidenceReport {
        top_index: Vec::with_capacity(pixels),
        second_index: Vec::with_capacity(pixels),
        difference: Vec::with_capacity(pixels),
        selected: Vec::with_capacity(pixels),
    };
    let mut labels = Vec::with_capacity(pixels);
    for row in scores.values.data().chunks(l) {
        let (mut i1, mut i2) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
        for (i, &v) in row.iter().enumerate().skip(2) {
            if v > row[i1] {
                i2 = i1;
                i1 = i;
            } else if v > row[i2] {
                i2 = i;
            }
        }
        let diff = row[i1] - row[i2];
        let keep = diff > delta_th;
        report.top_index.push(i1);
        report.second_index.push(i2);
        report.difference.push(diff);
        report.selected.push(keep);
        labels.push(keep.then_some(i1));
    }
    let map = LabelMap::pseudo(scores.height, scores.width, l, labels)?;
    Ok((map, report))
}
