//! Scalar objectives, built as differentiable graph expressions.
//!
//! Per-image losses take probabilities or features flattened to `[H*W, L]`
//! and `[H*W, d]`; the rows line up with the pixels of the [`LabelMap`].

use std::f64::consts::PI;

use thiserror::Error;

use crate::models::{Discriminator, ModelError};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::prototypes::{PrototypeError, PrototypeSet};
use crate::pseudo_labels::LabelMap;

/// Lower clamp for every log argument.
pub const LOG_EPS: f64 = 1e-7;
/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Margin kept from +-1 before taking arccos.
pub const ACOS_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("predictions {actual:?} do not match {pixels} labeled pixels x {categories} categories")]
    Shape {
        actual: Vec<usize>,
        pixels: usize,
        categories: usize,
    },
    #[error("pixel {0} has no label; cross-entropy needs every pixel labeled")]
    Unlabeled(usize),
    #[error("expected {expected} positive category weights, got {actual:?}")]
    Weights { expected: usize, actual: Vec<f64> },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("feature at pixel {0} has zero norm")]
    ZeroFeature(usize),
    #[error("prototype for category {0} has zero norm")]
    ZeroPrototype(usize),
    #[error("feature dimension {got} does not match prototype dimension {want}")]
    Dimension { got: usize, want: usize },
}

impl From<PrototypeError> for LossError {
    fn from(e: PrototypeError) -> Self {
        match e {
            PrototypeError::ZeroPrototype(c) => LossError::ZeroPrototype(c),
            PrototypeError::ZeroFeature(p) => LossError::ZeroFeature(p),
            PrototypeError::Dimension { got, want } => LossError::Dimension { got, want },
            other => LossError::Numerics(NumericsError::InvalidArgument {
                op: "prototypes",
                message: other.to_string(),
            }),
        }
    }
}

fn check_pred(g: &Graph, probs: Var, labels: &LabelMap) -> Result<(), LossError> {
    let s = g.shape(probs);
    if s != [labels.pixels(), labels.num_categories()] {
        return Err(LossError::Shape {
            actual: s.to_vec(),
            pixels: labels.pixels(),
            categories: labels.num_categories(),
        });
    }
    Ok(())
}

/// Inverse category frequency over a batch of label maps, with counts floored
/// at one pixel and the weights rescaled to mean 1.
pub fn category_weights(labels: &[&LabelMap]) -> Vec<f64> {
    let l = labels.first().map_or(0, |m| m.num_categories());
    let mut counts = vec![0usize; l];
    for m in labels {
        for (c, n) in m.counts().into_iter().enumerate() {
            counts[c] += n;
        }
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / l.max(1) as f64;
    inv.iter().map(|w| w / mean).collect()
}

/// `-sum_l w[y_l] log p[l, y_l] / sum_l w[y_l]`.
pub fn weighted_cross_entropy(g: &mut Graph, probs: Var, labels: &LabelMap, weights: &[f64]) -> Result<Var, LossError> {
    check_pred(g, probs, labels)?;
    if weights.len() != labels.num_categories() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(LossError::Weights {
            expected: labels.num_categories(),
            actual: weights.to_vec(),
        });
    }
    let mut target = Vec::with_capacity(labels.pixels());
    for (p, l) in labels.labels().iter().enumerate() {
        target.push(l.ok_or(LossError::Unlabeled(p))?);
    }
    let pixel_w: Vec<f64> = target.iter().map(|&c| weights[c]).collect();
    let total: f64 = pixel_w.iter().sum();
    let clamped = g.clamp(probs, LOG_EPS, 1.0)?;
    let logp = g.log(clamped)?;
    let picked = g.gather_last(logp, &target)?;
    let w = g.constant(Tensor::from_vec(pixel_w));
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -1.0 / total)?)
}

/// Mean over categories of `1 - (2 |p y| + eps) / (|p| + |y| + eps)`.
pub fn soft_dice_loss(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var, LossError> {
    check_pred(g, probs, labels)?;
    let y = g.constant(labels.to_one_hot());
    let py = g.mul(probs, y)?;
    let inter = g.sum_leading(py)?;
    let psum = g.sum_leading(probs)?;
    let ysum = g.constant(Tensor::from_vec(labels.counts().iter().map(|&n| n as f64).collect()));
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.add(psum, ysum)?;
    let den = g.add_scalar(den, DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio)?;
    let neg = g.scale(mean, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// Cross-entropy plus soft Dice, equally weighted.
pub fn segmentation_loss(g: &mut Graph, probs: Var, labels: &LabelMap, weights: &[f64]) -> Result<Var, LossError> {
    let ce = weighted_cross_entropy(g, probs, labels, weights)?;
    let dice = soft_dice_loss(g, probs, labels)?;
    Ok(g.add(ce, dice)?)
}

/// Elementwise `-p log p`, with the log argument clamped at [`LOG_EPS`].
pub fn self_information_map(g: &mut Graph, probs: Var) -> Result<Var, LossError> {
    let clamped = g.clamp(probs, LOG_EPS, 1.0)?;
    let logp = g.log(clamped)?;
    let plogp = g.mul(probs, logp)?;
    Ok(g.scale(plogp, -1.0)?)
}

/// How per-pixel contrastive terms are combined within one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown reduction {other:?}; expected sum or mean")),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

/// Margin-preserving prototype contrastive loss, summed over assigned pixels.
pub fn margin_contrastive_loss(
    g: &mut Graph,
    features: Var,
    labels: &LabelMap,
    protos: &PrototypeSet,
    m: f64,
    tau: f64,
) -> Result<Var, LossError> {
    margin_contrastive_loss_reduced(g, features, labels, protos, m, tau, Reduction::Sum)
}

/// [`margin_contrastive_loss`] with a choice of per-image reduction.
///
/// For each assigned pixel with label `y`, the positive cosine `cos t` is
/// replaced by `cos(min(t + m, pi))` in both the numerator and the softmax
/// denominator; negatives keep their plain cosine.
pub fn margin_contrastive_loss_reduced(
    g: &mut Graph,
    features: Var,
    labels: &LabelMap,
    protos: &PrototypeSet,
    m: f64,
    tau: f64,
    reduction: Reduction,
) -> Result<Var, LossError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::Temperature(tau));
    }
    let s = g.shape(features).to_vec();
    if s.len() != 2 || s[0] != labels.pixels() {
        return Err(LossError::Shape {
            actual: s,
            pixels: labels.pixels(),
            categories: labels.num_categories(),
        });
    }
    let d = s[1];
    if d != protos.dim() {
        return Err(LossError::Dimension {
            got: d,
            want: protos.dim(),
        });
    }
    let l = protos.num_categories();
    let cn = protos.normalized()?;
    let (rows, target): (Vec<usize>, Vec<usize>) = labels.assigned().unzip();
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let fv = g.value(features).data();
    if let Some(&p) = rows.iter().find(|&&p| fv[p * d..(p + 1) * d].iter().all(|&v| v == 0.0)) {
        return Err(LossError::ZeroFeature(p));
    }
    let k = rows.len();

    let f = g.select_rows(features, &rows)?;
    let sq = g.mul(f, f)?;
    let n2 = g.sum_last(sq)?;
    let norm = g.sqrt(n2)?;
    let norm = g.broadcast_last(norm, d)?;
    let fhat = g.div(f, norm)?;

    let mut ct = Tensor::zeros(&[d, l]);
    for c in 0..l {
        for j in 0..d {
            ct.data_mut()[j * l + c] = cn.data()[c * d + j];
        }
    }
    let ct = g.constant(ct);
    let r = g.matmul(fhat, ct)?;

    let pos = g.gather_last(r, &target)?;
    let pos_c = g.clamp(pos, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS)?;
    let theta = g.acos(pos_c)?;
    let theta = g.add_scalar(theta, m)?;
    let theta = g.clamp(theta, f64::NEG_INFINITY, PI)?;
    let margined = g.cos(theta)?;

    // swap the positive column for its margined value
    let delta = g.sub(margined, pos)?;
    let delta = g.broadcast_last(delta, l)?;
    let mut onehot = Tensor::zeros(&[k, l]);
    for (i, &c) in target.iter().enumerate() {
        onehot.data_mut()[i * l + c] = 1.0;
    }
    let onehot = g.constant(onehot);
    let shift = g.mul(delta, onehot)?;
    let logits = g.add(r, shift)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let lse = g.log_sum_exp_last(logits)?;
    let num = g.scale(margined, 1.0 / tau)?;
    let per_pixel = g.sub(lse, num)?;
    let total = g.sum(per_pixel)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / k as f64)?,
    })
}

/// Mean binary cross-entropy of patch probabilities against a constant label.
pub fn bce_domain_loss(g: &mut Graph, disc_output: Var, target_is_source: bool) -> Result<Var, LossError> {
    let o = g.clamp(disc_output, LOG_EPS, 1.0 - LOG_EPS)?;
    let arg = if target_is_source {
        o
    } else {
        let neg = g.scale(o, -1.0)?;
        g.add_scalar(neg, 1.0)?
    };
    let log = g.log(arg)?;
    let mean = g.mean(log)?;
    Ok(g.scale(mean, -1.0)?)
}

/// Discriminator objective: source maps labeled 1, target maps labeled 0.
///
/// `params` decides what receives gradients; bind them trainable for the
/// discriminator update.
pub fn discriminator_loss(
    g: &mut Graph,
    disc: &Discriminator,
    params: &crate::models::Bound,
    info_src: Var,
    info_trg: Var,
) -> Result<Var, LossError> {
    let ds = disc.forward(g, params, info_src)?;
    let dt = disc.forward(g, params, info_trg)?;
    let ls = bce_domain_loss(g, ds, true)?;
    let lt = bce_domain_loss(g, dt, false)?;
    Ok(g.add(ls, lt)?)
}

/// Generator's adversarial term: target maps should look like source.
///
/// The discriminator is bound as constants, so only the generator side of
/// the graph receives gradients.
pub fn generator_adversarial_loss(g: &mut Graph, disc: &Discriminator, info_trg: Var) -> Result<Var, LossError> {
    let frozen = disc.bind(g, false);
    let dt = disc.forward(g, &frozen, info_trg)?;
    bce_domain_loss(g, dt, true)
}

/// Weights of the generator objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            beta: 0.1,
            lambda: 0.003,
        }
    }
}

/// `seg + gamma c_src + beta c_trg + lambda adv`.
pub fn total_generator_loss(
    g: &mut Graph,
    seg: Var,
    c_src: Var,
    c_trg: Var,
    adv: Var,
    w: &LossWeights,
) -> Result<Var, LossError> {
    let a = g.scale(c_src, w.gamma)?;
    let b = g.scale(c_trg, w.beta)?;
    let c = g.scale(adv, w.lambda)?;
    let t = g.add(seg, a)?;
    let t = g.add(t, b)?;
    Ok(g.add(t, c)?)
}
