//! Dice, 2D average symmetric surface distance and prototype-angle histograms.

use std::f64::consts::PI;

use thiserror::Error;

use crate::prototypes::{cosine_scores, FeatureMap, PrototypeError, PrototypeSet};
use crate::pseudo_labels::LabelMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask sizes differ: {0} vs {1} pixels")]
    Size(usize, usize),
    #[error("mask is {len} pixels, not {height}x{width}")]
    Shape { len: usize, height: usize, width: usize },
    #[error("undefined surface distance: category {category} is empty in the {which} mask")]
    EmptySurface { category: u8, which: &'static str },
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

/// `100 * 2|P & G| / (|P| + |G|)`; two empty sets score 100.
pub fn dice_coefficient(pred: &[u8], gt: &[u8], category: u8) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Size(pred.len(), gt.len()));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == category, b == category);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// Pixels of `category` with a 4-neighbour outside it; the image border
/// counts as outside.
pub fn boundary(mask: &[u8], height: usize, width: usize, category: u8) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize] == category
    };
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            if inside(y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dy, dx)| !inside(y + dy, x + dx))
            {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest site, separable
/// lower-envelope algorithm of Felzenszwalb and Huttenlocher.
fn squared_distance_transform(sites: &[(usize, usize)], height: usize, width: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid = vec![INF; height * width];
    for &(y, x) in sites {
        grid[y * width + x] = 0.0;
    }
    let n = height.max(width);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut pass = |f: &[f64], d: &mut [f64], len: usize| {
        let mut k = 0;
        v[0] = 0;
        z[0] = -INF;
        z[1] = INF;
        for q in 1..len {
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else if s <= z[k] {
                    // k == 0 and the new parabola dominates from the start
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = INF;
                    break;
                }
            }
        }
        k = 0;
        for (q, dq) in d.iter_mut().enumerate().take(len) {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            *dq = (q as f64 - p as f64).powi(2) + f[p];
        }
    };
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        pass(&f, &mut d, height);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        pass(&f, &mut d, width);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

/// Average symmetric surface distance in pixels between the `category`
/// regions of two masks.
pub fn asd_2d(pred: &[u8], gt: &[u8], height: usize, width: usize, category: u8) -> Result<f64, MetricsError> {
    for m in [pred, gt] {
        if m.len() != height * width {
            return Err(MetricsError::Shape {
                len: m.len(),
                height,
                width,
            });
        }
    }
    let bp = boundary(pred, height, width, category);
    let bg = boundary(gt, height, width, category);
    if bp.is_empty() {
        return Err(MetricsError::EmptySurface {
            category,
            which: "first",
        });
    }
    if bg.is_empty() {
        return Err(MetricsError::EmptySurface {
            category,
            which: "second",
        });
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let dt = squared_distance_transform(to, height, width);
        from.iter().map(|&(y, x)| dt[y * width + x].sqrt()).sum::<f64>() / from.len() as f64
    };
    Ok(0.5 * (directed(&bp, &bg) + directed(&bg, &bp)))
}

/// Histogram over [0, pi] of angles between assigned pixel features and their
/// labeled prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Sum of all binned angles, for the mean.
    pub angle_sum: f64,
    /// Angles strictly below pi/4.
    pub below_quarter_pi: usize,
}

impl AngleHistogram {
    pub fn empty(bins: usize) -> Result<Self, MetricsError> {
        if bins == 0 {
            return Err(MetricsError::NoBins);
        }
        Ok(Self {
            edges: (0..=bins).map(|i| PI * i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            angle_sum: 0.0,
            below_quarter_pi: 0,
        })
    }

    pub fn add(&mut self, theta: f64) {
        let bins = self.counts.len();
        let b = ((theta / PI * bins as f64) as usize).min(bins - 1);
        self.counts[b] += 1;
        self.angle_sum += theta;
        if theta < PI / 4.0 {
            self.below_quarter_pi += 1;
        }
    }

    pub fn merge(&mut self, other: &AngleHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.angle_sum += other.angle_sum;
        self.below_quarter_pi += other.below_quarter_pi;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Mean angle in radians (NaN when empty).
    pub fn mean(&self) -> f64 {
        self.angle_sum / self.total() as f64
    }

    pub fn fraction_below_quarter_pi(&self) -> f64 {
        self.below_quarter_pi as f64 / self.total() as f64
    }
}

pub fn angle_histogram(
    features: &FeatureMap,
    labels: &LabelMap,
    protos: &PrototypeSet,
    bins: usize,
) -> Result<AngleHistogram, MetricsError> {
    let mut h = AngleHistogram::empty(bins)?;
    let scores = cosine_scores(features, protos)?;
    let l = scores.num_categories();
    for (p, c) in labels.assigned() {
        h.add(scores.values.data()[p * l + c].clamp(-1.0, 1.0).acos());
    }
    Ok(h)
}

/// Per-category scores averaged over images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Percent, one entry per category including background.
    pub dice: Vec<f64>,
    /// Pixels; `None` where no image had both surfaces.
    pub asd: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_asd: Option<f64>,
    pub images: usize,
}

impl EvalReport {
    /// CSV with one row per category and a final foreground-mean row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("category,dice,asd\n");
        for (c, (d, a)) in self.dice.iter().zip(&self.asd).enumerate() {
            s += &format!("{c},{d:.6},{}\n", fmt(*a));
        }
        s += &format!("mean,{:.6},{}\n", self.mean_dice, fmt(self.mean_asd));
        s
    }
}

/// Dice per image then averaged; ASD averaged over images where defined.
/// Means run over foreground categories `1..L`.
pub fn evaluate_masks(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    height: usize,
    width: usize,
    num_categories: usize,
) -> Result<EvalReport, MetricsError> {
    let n = preds.len();
    if n != gts.len() {
        return Err(MetricsError::Size(n, gts.len()));
    }
    let mut dice = vec![0.0; num_categories];
    let mut asd_sum = vec![0.0; num_categories];
    let mut asd_n = vec![0usize; num_categories];
    for (p, g) in preds.iter().zip(gts) {
        for c in 0..num_categories {
            dice[c] += dice_coefficient(p, g, c as u8)?;
            match asd_2d(p, g, height, width, c as u8) {
                Ok(v) => {
                    asd_sum[c] += v;
                    asd_n[c] += 1;
                }
                Err(MetricsError::EmptySurface { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let dice: Vec<f64> = dice.iter().map(|d| if n == 0 { 0.0 } else { d / n as f64 }).collect();
    let asd: Vec<Option<f64>> = (0..num_categories)
        .map(|c| (asd_n[c] > 0).then(|| asd_sum[c] / asd_n[c] as f64))
        .collect();
    let fg = 1..num_categories;
    let mean_dice = dice[fg.clone()].iter().sum::<f64>() / fg.len().max(1) as f64;
    let defined: Vec<f64> = asd[fg].iter().flatten().copied().collect();
    let mean_asd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        dice,
        asd,
        mean_dice,
        mean_asd,
        images: n,
    })
}

/// Mean foreground Dice only, skipping the surface distances.
pub fn mean_foreground_dice(preds: &[Vec<u8>], gts: &[Vec<u8>], num_categories: usize) -> Result<f64, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Size(preds.len(), gts.len()));
    }
    if preds.is_empty() || num_categories < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        for c in 1..num_categories {
            total += dice_coefficient(p, g, c as u8)?;
        }
    }
    Ok(total / (preds.len() * (num_categories - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let gt = [1, 1, 1, 1, 0, 0];
        assert_eq!(dice_coefficient(&gt, &gt, 1).unwrap(), 100.0);
        assert_eq!(dice_coefficient(&[0, 0, 0, 0, 1, 1], &gt, 1).unwrap(), 0.0);
        let half = [1, 1, 0, 0, 0, 0];
        assert!((dice_coefficient(&half, &gt, 1).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice_coefficient(&[0; 6], &[0; 6], 3).unwrap(), 100.0);
    }

    #[test]
    fn single_pixels_three_apart() {
        let mut a = vec![0u8; 25];
        let mut b = vec![0u8; 25];
        a[5 * 2] = 1;
        b[5 * 2 + 3] = 1;
        assert_eq!(asd_2d(&a, &b, 5, 5, 1).unwrap(), 3.0);
    }

    #[test]
    fn identical_masks_have_zero_distance() {
        let m: Vec<u8> = (0..64).map(|i| ((i / 8 + i % 8) % 3 == 0) as u8).collect();
        assert_eq!(asd_2d(&m, &m, 8, 8, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_surface_is_an_error() {
        let a = vec![0u8; 16];
        let mut b = vec![0u8; 16];
        b[3] = 2;
        assert!(matches!(
            asd_2d(&a, &b, 4, 4, 2),
            Err(MetricsError::EmptySurface { which: "first", .. })
        ));
    }

    #[test]
    fn report_has_one_row_per_category_plus_mean() {
        let m = vec![vec![0u8, 1, 2, 2]];
        let r = evaluate_masks(&m, &m, 2, 2, 3).unwrap();
        assert_eq!(r.to_csv().lines().count(), 1 + 3 + 1);
        assert_eq!(r.mean_dice, 100.0);
    }
}
