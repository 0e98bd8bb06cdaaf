//! Synthetic two-modality scenes with shared anatomy.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DataError;

/// Domain A mean intensity per category (index 0 is background).
pub const MEANS_A: [f64; 5] = [0.05, 0.2, 0.45, 0.65, 0.85];
pub const NOISE_A: f64 = 0.03;
pub const NOISE_B: f64 = 0.05;
/// Amplitude of domain B's multiplicative bias field.
pub const BIAS_AMPLITUDE: f64 = 0.12;

/// Sub-region placement inside the outer ellipse, one row per category
/// 2, 3, 4: (offset along major axis / a, offset across / b, semi-axes / b).
const LAYOUT: [(f64, f64, f64, f64); 3] = [
    (0.38, 0.05, 0.50, 0.46),
    (-0.52, 0.15, 0.42, 0.28),
    (-0.05, -0.58, 0.28, 0.28),
];

/// Domain B mean for a category: inverted and compressed into [0.15, 0.9].
pub fn mean_b(category: usize) -> f64 {
    0.15 + 0.75 * (1.0 - MEANS_A[category])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
}

impl SceneSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            height: 64,
            width: 64,
            num_categories: 5,
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }
}

/// One label mask rendered in both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    pub image_a: Vec<f64>,
    pub image_b: Vec<f64>,
}

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    amp: f64,
    phase: f64,
}

impl Blob {
    /// Ellipse with a 3-lobed radial wobble.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let ang = v.atan2(u);
        let r = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        r <= 1.0 + self.amp * (3.0 * ang + self.phase).sin()
    }
}

/// Render one scene. Identical specs give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, DataError> {
    let (h, w) = (spec.height, spec.width);
    if h < 16 || w < 16 {
        return Err(DataError::SceneSize { height: h, width: w });
    }
    if !(2..=MEANS_A.len()).contains(&spec.num_categories) {
        return Err(DataError::Categories(spec.num_categories));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = h as f64 / 64.0;
    let cx = w as f64 / 2.0 + rng.gen_range(-5.0..5.0) * s;
    let cy = h as f64 / 2.0 + rng.gen_range(-5.0..5.0) * s;
    let a = rng.gen_range(19.0..25.0) * s;
    let b = rng.gen_range(15.0..21.0) * s;
    let rot = rng.gen_range(0.0..PI);
    let outer = Blob {
        cx,
        cy,
        a,
        b,
        rot,
        amp: rng.gen_range(0.0..0.08),
        phase: rng.gen_range(0.0..2.0 * PI),
    };
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if outer.contains(x as f64, y as f64) {
                mask[y * w + x] = 1;
            }
        }
    }
    for (j, &(ou, ov, fa, fb)) in LAYOUT.iter().take(spec.num_categories - 2).enumerate() {
        let u = (ou + rng.gen_range(-0.06..0.06)) * a;
        let v = (ov + rng.gen_range(-0.06..0.06)) * b;
        let (sr, cr) = rot.sin_cos();
        let sub = Blob {
            cx: cx + u * cr - v * sr,
            cy: cy + u * sr + v * cr,
            a: fa * b * rng.gen_range(0.9..1.1),
            b: fb * b * rng.gen_range(0.9..1.1),
            rot: rot + rng.gen_range(-0.3..0.3),
            amp: rng.gen_range(0.0..0.1),
            phase: rng.gen_range(0.0..2.0 * PI),
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // sub-regions only claim pixels still owned by the outer region
                if mask[i] == 1 && sub.contains(x as f64, y as f64) {
                    mask[i] = 2 + j as u8;
                }
            }
        }
    }

    let noise_a = Normal::new(0.0, NOISE_A).expect("valid sigma");
    let image_a = mask
        .iter()
        .map(|&c| (MEANS_A[c as usize] + noise_a.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();

    let fx = rng.gen_range(0.5..1.5);
    let fy = rng.gen_range(0.5..1.5);
    let p1 = rng.gen_range(0.0..2.0 * PI);
    let p2 = rng.gen_range(0.0..2.0 * PI);
    let noise_b = Normal::new(0.0, NOISE_B).expect("valid sigma");
    let mut image_b = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let bias = 1.0
                + BIAS_AMPLITUDE
                    * (2.0 * PI * fx * x as f64 / w as f64 + p1).sin()
                    * (2.0 * PI * fy * y as f64 / h as f64 + p2).cos();
            let mu = mean_b(mask[y * w + x] as usize);
            image_b.push((mu * bias + noise_b.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    Ok(Scene {
        height: h,
        width: w,
        mask,
        image_a,
        image_b,
    })
}
