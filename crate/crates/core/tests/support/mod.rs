//! Oracles and random instance builders shared by the integration tests and
//! the acceptance report.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use uda_core::data::Pgm;
use uda_core::losses::{
    bce_domain_loss, category_weights, discriminator_loss, generator_adversarial_loss, margin_contrastive_loss,
    margin_contrastive_loss_reduced, segmentation_loss, self_information_map, soft_dice_loss, total_generator_loss,
    weighted_cross_entropy, LossError, LossWeights, Reduction,
};
use uda_core::models::Discriminator;
use uda_core::numerics::{finite_diff_gradients, FdComparison, Graph, NumericsError, Tensor, Var};
use uda_core::prototypes::PrototypeSet;
use uda_core::pseudo_labels::{CosineScores, LabelMap};
use uda_core::training::Checkpoint;

pub const GRID: usize = 4;
pub const DIM: usize = 8;
pub const CATS: usize = 5;
/// Central-difference step used by the gradient suite. Near the cube root of
/// machine epsilon, where truncation and roundoff error balance.
pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn full_labels(rng: &mut ChaCha8Rng, pixels: usize, l: usize) -> LabelMap {
    let cats: Vec<usize> = (0..pixels).map(|_| rng.gen_range(0..l)).collect();
    LabelMap::ground_truth(GRID, pixels / GRID, l, &cats).unwrap()
}

/// Roughly `keep` of the pixels carry a label, the rest are unassigned.
pub fn partial_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, keep: f64) -> LabelMap {
    let labels = (0..h * w)
        .map(|_| rng.gen_bool(keep).then(|| rng.gen_range(0..l)))
        .collect();
    LabelMap::pseudo(h, w, l, labels).unwrap()
}

pub fn prototypes(rng: &mut ChaCha8Rng, l: usize, d: usize) -> PrototypeSet {
    PrototypeSet::new(normal(rng, &[l, d]), 0, 0.2).unwrap()
}

fn num(e: LossError) -> NumericsError {
    match e {
        LossError::Numerics(n) => n,
        other => NumericsError::InvalidArgument {
            op: "loss",
            message: other.to_string(),
        },
    }
}

/// Worst finite-difference errors of one loss across the suite's instances.
#[derive(Debug, Clone)]
pub struct GradientRow {
    pub name: &'static str,
    /// Largest per-component relative error.
    pub component: f64,
    /// Largest relative error of the whole gradient vector.
    pub normwise: f64,
}

impl GradientRow {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            component: 0.0,
            normwise: 0.0,
        }
    }

    fn record(&mut self, c: &FdComparison) {
        self.component = self.component.max(c.max_relative());
        self.normwise = self.normwise.max(c.normwise_relative());
    }
}

/// Worst relative finite-difference error of every loss over `cases` random
/// instances. Prediction losses are differentiated through a softmax of the
/// logits, so probabilities stay in the interior of the simplex.
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<GradientRow>, NumericsError> {
    let mut r = rng(seed);
    let mut worst: Vec<GradientRow> = [
        "weighted_cross_entropy",
        "soft_dice_loss",
        "segmentation_loss",
        "self_information_map",
        "margin_contrastive_loss",
        "bce_domain_loss",
        "discriminator_loss",
        "generator_adversarial_loss",
        "total_generator_loss",
    ]
    .into_iter()
    .map(GradientRow::new)
    .collect();
    let p = GRID * GRID;
    for _ in 0..cases {
        let labels = full_labels(&mut r, p, CATS);
        let weights: Vec<f64> = (0..CATS).map(|_| r.gen_range(0.2..3.0)).collect();
        let logits = normal(&mut r, &[p, CATS]);
        let mix = normal(&mut r, &[p, CATS]);

        let e = finite_diff_gradients(
            |g, x| {
                let s = g.softmax(x)?;
                weighted_cross_entropy(g, s, &labels, &weights).map_err(num)
            },
            &logits,
            FD_STEP,
        )?;
        worst[0].record(&e);
        let e = finite_diff_gradients(
            |g, x| {
                let s = g.softmax(x)?;
                soft_dice_loss(g, s, &labels).map_err(num)
            },
            &logits,
            FD_STEP,
        )?;
        worst[1].record(&e);
        let bw = category_weights(&[&labels]);
        let e = finite_diff_gradients(
            |g, x| {
                let s = g.softmax(x)?;
                segmentation_loss(g, s, &labels, &bw).map_err(num)
            },
            &logits,
            FD_STEP,
        )?;
        worst[2].record(&e);
        let e = finite_diff_gradients(
            |g, x| {
                let s = g.softmax(x)?;
                let info = self_information_map(g, s).map_err(num)?;
                weighted_sum(g, info, &mix)
            },
            &logits,
            FD_STEP,
        )?;
        worst[3].record(&e);

        let feats = normal(&mut r, &[p, DIM]);
        let protos = prototypes(&mut r, CATS, DIM);
        let pl = partial_labels(&mut r, GRID, GRID, CATS, 0.7);
        let m = [0.0, 0.2, 0.4][r.gen_range(0..3)];
        let tau = r.gen_range(0.5..2.0);
        let e = finite_diff_gradients(
            |g, x| margin_contrastive_loss(g, x, &pl, &protos, m, tau).map_err(num),
            &feats,
            FD_STEP,
        )?;
        worst[4].record(&e);

        let patch = normal(&mut r, &[2, 2, 1]);
        let as_source = r.gen_bool(0.5);
        let e = finite_diff_gradients(
            |g, x| {
                let s = g.sigmoid(x)?;
                bce_domain_loss(g, s, as_source).map_err(num)
            },
            &patch,
            FD_STEP,
        )?;
        worst[5].record(&e);

        // the discriminator needs sides divisible by 8; the check runs on
        // the self-information input directly
        let disc = Discriminator::new(CATS, &mut r);
        let pair = uniform(&mut r, &[2, 8, 8, CATS], 0.0, 3.0);
        let e = finite_diff_gradients(
            |g, x| {
                let a = g.slice_rows(x, 0, 1)?;
                let b = g.slice_rows(x, 1, 1)?;
                let bound = disc.bind(g, false);
                discriminator_loss(g, &disc, &bound, a, b).map_err(num)
            },
            &pair,
            FD_STEP,
        )?;
        worst[6].record(&e);
        let single = uniform(&mut r, &[1, 8, 8, CATS], 0.0, 3.0);
        let e = finite_diff_gradients(
            |g, x| generator_adversarial_loss(g, &disc, x).map_err(num),
            &single,
            FD_STEP,
        )?;
        worst[7].record(&e);

        let parts = normal(&mut r, &[4]);
        let w = LossWeights {
            gamma: r.gen_range(0.0..2.0),
            beta: r.gen_range(0.0..2.0),
            lambda: r.gen_range(0.0..2.0),
        };
        let e = finite_diff_gradients(
            |g, x| {
                let mut s = Vec::new();
                for i in 0..4 {
                    let v = g.slice_rows(x, i, 1)?;
                    s.push(g.reshape(v, &[])?);
                }
                total_generator_loss(g, s[0], s[1], s[2], s[3], &w).map_err(num)
            },
            &parts,
            FD_STEP,
        )?;
        worst[8].record(&e);
    }
    Ok(worst)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape")
}

pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var, NumericsError> {
    let c = g.constant(w.clone());
    let p = g.mul(x, c)?;
    g.sum(p)
}

/// Contrastive loss evaluated on constants, for value-only checks.
pub fn contrastive_value(
    features: &Tensor,
    labels: &LabelMap,
    protos: &PrototypeSet,
    m: f64,
    tau: f64,
    reduction: Reduction,
) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let v = margin_contrastive_loss_reduced(&mut g, f, labels, protos, m, tau, reduction).unwrap();
    g.value(v).item().unwrap()
}

/// Independent softmax cross-entropy over prototype cosine similarities.
pub fn softmax_ce_oracle(features: &Tensor, labels: &LabelMap, protos: &PrototypeSet) -> f64 {
    let d = protos.dim();
    let l = protos.num_categories();
    let mut total = 0.0;
    for (p, y) in labels.assigned() {
        let f = &features.data()[p * d..(p + 1) * d];
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sims: Vec<f64> = (0..l)
            .map(|c| {
                let c = protos.prototype(c);
                let cnorm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (fnorm * cnorm)
            })
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - sims[y];
    }
    total
}

/// Score rows where about half are quantized so that ties occur often.
pub fn random_scores(rng: &mut ChaCha8Rng, rows: usize, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * l);
    for _ in 0..rows {
        let quantize = rng.gen_bool(0.5);
        for _ in 0..l {
            let v: f64 = rng.gen_range(-1.0..1.0);
            out.push(if quantize { (v * 4.0).round() / 4.0 } else { v });
        }
    }
    out
}

/// Literal rule: sort each row descending, take the top index, keep it when
/// the gap to the runner-up exceeds the threshold.
pub fn pseudo_label_oracle(scores: &[f64], l: usize, delta: f64) -> Vec<Option<usize>> {
    scores
        .chunks(l)
        .map(|row| {
            let mut idx: Vec<usize> = (0..l).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            (row[idx[0]] - row[idx[1]] > delta).then_some(idx[0])
        })
        .collect()
}

pub fn cosine_table(height: usize, width: usize, l: usize, values: Vec<f64>) -> CosineScores {
    CosineScores {
        height,
        width,
        values: Tensor::new(vec![height * width, l], values).unwrap(),
    }
}

/// Boundary pixels and their all-pairs nearest distances, computed the slow
/// way.
pub fn asd_oracle(pred: &[u8], gt: &[u8], h: usize, w: usize, c: u8) -> Option<f64> {
    let edge = |m: &[u8]| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if m[y * w + x] != c {
                    continue;
                }
                let outside = y == 0
                    || x == 0
                    || y == h - 1
                    || x == w - 1
                    || m[(y - 1) * w + x] != c
                    || m[(y + 1) * w + x] != c
                    || m[y * w + x - 1] != c
                    || m[y * w + x + 1] != c;
                if outside {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let (a, b) = (edge(pred), edge(gt));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Some(0.5 * (directed(&a, &b) + directed(&b, &a)))
}

/// Blobby random mask: a few random rectangles and discs over background.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, cats: u8) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.gen_range(1..6) {
        let c = rng.gen_range(1..cats);
        let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        let r = rng.gen_range(1.0..(h.min(w) as f64 / 2.0).max(1.5));
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= r * 0.7
                };
                if inside {
                    m[y * w + x] = c;
                }
            }
        }
    }
    // speckle so boundaries are not all smooth
    for _ in 0..rng.gen_range(0..h * w / 20 + 1) {
        let i = rng.gen_range(0..h * w);
        m[i] = rng.gen_range(0..cats);
    }
    m
}

pub fn random_pgm(rng: &mut ChaCha8Rng) -> Pgm {
    let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let maxval: u16 = *[1u16, 7, 255, 256, 1000, 65535].choose(rng).unwrap();
    let pixels = (0..w * h)
        .map(|_| {
            if rng.gen_bool(0.1) {
                maxval
            } else {
                rng.gen_range(0..=maxval)
            }
        })
        .collect();
    Pgm {
        width: w,
        height: h,
        maxval,
        pixels,
    }
}

/// Checkpoint with random tensors (including extreme floats), config text
/// and optional prototypes.
pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let specials = [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, -f64::MAX, 1e-300, f64::EPSILON];
    let mut tensors = Vec::new();
    for i in 0..rng.gen_range(0..6) {
        let rank = rng.gen_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..5)).collect();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    *specials.choose(rng).unwrap()
                } else {
                    f64::from_bits(rng.gen::<u64>() & !(0x7ff << 52)) * rng.gen_range(-1e6..1e6)
                }
            })
            .collect();
        tensors.push((format!("t{i}.w\u{e9}"), Tensor::new(shape, data).unwrap()));
    }
    let config = (0..rng.gen_range(0..4))
        .map(|i| format!("k{i} = {}\n", rng.gen::<f64>()))
        .collect();
    let prototypes = rng.gen_bool(0.5).then(|| {
        let l = rng.gen_range(2..6);
        let d = rng.gen_range(1..9);
        PrototypeSet::new(normal(rng, &[l, d]), rng.gen(), rng.gen_range(0.0..1.0)).unwrap()
    });
    Checkpoint {
        tensors,
        config,
        iteration: rng.gen(),
        prototypes,
    }
}
