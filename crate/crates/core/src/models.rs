//! Small convolutional generator and patch discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::prototypes::FeatureMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("input must be [n, h, w, {channels}] with positive h, w divisible by {multiple}; got {shape:?}")]
    Input {
        shape: Vec<usize>,
        channels: usize,
        multiple: usize,
    },
    #[error("parameter {name}: expected shape {expected:?}, got {actual:?}")]
    Param {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace values by name, checking shapes.
    pub fn load<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<(), ModelError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(ModelError::Param {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    actual: src.shape().to_vec(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Insert every tensor into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Graph handles of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    /// Gradients of every bound parameter after `backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()])
            })
            .collect()
    }
}

fn conv_params(set: &mut ParamSet, name: &str, k: usize, ci: usize, co: usize, rng: &mut ChaCha8Rng) {
    let fan_in = (k * k * ci) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let w = (0..k * k * ci * co).map(|_| rng.gen_range(-bound..bound)).collect();
    set.push(
        format!("{name}.weight"),
        Tensor::new(vec![k, k, ci, co], w).expect("shape"),
    );
    set.push(format!("{name}.bias"), Tensor::zeros(&[co]));
}

/// Slope of every leaky rectifier in both networks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub num_categories: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: [16, 32, 32],
            feature_dim: 32,
            num_categories: 5,
        }
    }
}

/// Encoder with one 2x pool/upsample pair, then a 1x1 classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

/// Graph outputs of one generator pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// `[n, h, w, d]`
    pub features: Var,
    /// `[n, h, w, L]`
    pub logits: Var,
    /// `[n, h, w, L]`
    pub probs: Var,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2, c3] = config.channels;
        let d = config.feature_dim;
        let mut params = ParamSet::default();
        conv_params(&mut params, "enc1", 3, config.in_channels, c1, rng);
        conv_params(&mut params, "enc2", 3, c1, c2, rng);
        conv_params(&mut params, "enc3", 3, c2, c3, rng);
        conv_params(&mut params, "enc4", 3, c3, d, rng);
        conv_params(&mut params, "cls", 1, d, config.num_categories, rng);
        Self { config, params }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Run the generator on `images` (`[n, h, w, 1]`, h and w even).
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<GeneratorOutput, ModelError> {
        let s = g.shape(images);
        if s.len() != 4
            || s[1] == 0
            || s[2] == 0
            || !s[1].is_multiple_of(2)
            || !s[2].is_multiple_of(2)
            || s[3] != self.config.in_channels
        {
            return Err(ModelError::Input {
                shape: s.to_vec(),
                channels: self.config.in_channels,
                multiple: 2,
            });
        }
        let w = &p.0;
        let mut h = g.conv2d(images, w[0], w[1], 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = g.max_pool2(h)?;
        h = g.conv2d(h, w[2], w[3], 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = g.conv2d(h, w[4], w[5], 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = g.conv2d(h, w[6], w[7], 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let features = g.upsample_nearest(h, 2)?;
        let logits = g.conv2d(features, w[8], w[9], 1, 0)?;
        let probs = g.softmax(logits)?;
        Ok(GeneratorOutput {
            features,
            logits,
            probs,
        })
    }

    /// Gradient-free pass returning per-image feature maps and the
    /// probability tensor `[n, h, w, L]`.
    pub fn infer(&self, images: &Tensor) -> Result<(Vec<FeatureMap>, Tensor), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &p, x)?;
        let s = g.shape(out.features).to_vec();
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        let feats = g
            .value(out.features)
            .data()
            .chunks(h * w * d)
            .map(|c| FeatureMap::new(h, w, Tensor::new(vec![h * w, d], c.to_vec()).expect("shape")).expect("shape"))
            .collect::<Vec<_>>();
        debug_assert_eq!(feats.len(), n);
        Ok((feats, g.value(out.probs).clone()))
    }
}

/// Three stride-2 4x4 convolutions ending in a sigmoid patch map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    num_categories: usize,
    params: ParamSet,
}

impl Discriminator {
    pub fn new(num_categories: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::default();
        conv_params(&mut params, "disc1", 4, num_categories, 16, rng);
        conv_params(&mut params, "disc2", 4, 16, 32, rng);
        conv_params(&mut params, "disc3", 4, 32, 1, rng);
        Self { num_categories, params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Patch probabilities `[n, h/8, w/8, 1]` for self-information maps
    /// `[n, h, w, L]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, info: Var) -> Result<Var, ModelError> {
        let s = g.shape(info);
        if s.len() != 4
            || s[1] == 0
            || s[2] == 0
            || !s[1].is_multiple_of(8)
            || !s[2].is_multiple_of(8)
            || s[3] != self.num_categories
        {
            return Err(ModelError::Input {
                shape: s.to_vec(),
                channels: self.num_categories,
                multiple: 8,
            });
        }
        let w = &p.0;
        let mut h = g.conv2d(info, w[0], w[1], 2, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = g.conv2d(h, w[2], w[3], 2, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        h = g.conv2d(h, w[4], w[5], 2, 1)?;
        Ok(g.sigmoid(h)?)
    }
}
