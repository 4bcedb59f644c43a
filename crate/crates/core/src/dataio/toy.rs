//! Synthetic 2-D "PAMI" point cloud.
//!
//! Each letter is a fixed set of polyline strokes; points are drawn
//! uniformly by arc length along a letter's strokes and then jittered with
//! isotropic Gaussian noise. Letters are 1 unit tall and the word is
//! centred on the origin.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;
use crate::rng;

/// Default jitter standard deviation.
pub const DEFAULT_NOISE: f64 = 0.01;

/// Horizontal/vertical shift applied so the word is centred on the origin.
const CENTER: (f64, f64) = (1.35, 0.5);

#[derive(Debug, Clone)]
pub struct ToyLetter {
    pub name: char,
    pub strokes: Vec<Vec<(f64, f64)>>,
}

impl ToyLetter {
    fn segments(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        self.strokes
            .iter()
            .flat_map(|s| s.windows(2).map(|w| (w[0], w[1])))
    }

    /// Total stroke length.
    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| seg_len(a, b)).sum()
    }

    /// Euclidean distance from `p` to the closest stroke segment.
    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        self.segments()
            .map(|(a, b)| {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
                ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        let total = self.length();
        let mut u = rng.random::<f64>() * total;
        let mut last = None;
        for (a, b) in self.segments() {
            let l = seg_len(a, b);
            if u < l {
                let t = u / l;
                return (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            }
            u -= l;
            last = Some(b);
        }
        last.expect("letter has at least one segment")
    }
}

fn seg_len(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
}

fn shifted(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|&(x, y)| (x - CENTER.0, y - CENTER.1))
        .collect()
}

/// Stroke skeletons of P, A, M and I in generator coordinates.
pub fn letter_skeletons() -> Vec<ToyLetter> {
    // P: stem plus a bowl closed by a half circle of radius 0.25
    let mut bowl = vec![(0.0, 1.0), (0.4, 1.0)];
    let arc_steps = 12;
    for s in 1..arc_steps {
        let theta = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * s as f64 / arc_steps as f64;
        bowl.push((0.4 + 0.25 * theta.cos(), 0.75 + 0.25 * theta.sin()));
    }
    bowl.extend([(0.4, 0.5), (0.0, 0.5)]);
    let p = vec![vec![(0.0, 0.0), (0.0, 1.0)], bowl];
    let a = vec![
        vec![(0.85, 0.0), (1.15, 1.0), (1.45, 0.0)],
        vec![(0.94, 0.3), (1.36, 0.3)],
    ];
    let m = vec![vec![(1.7, 0.0), (1.7, 1.0), (2.05, 0.4), (2.4, 1.0), (2.4, 0.0)]];
    let i = vec![
        vec![(2.65, 0.0), (2.65, 1.0)],
        vec![(2.55, 1.0), (2.75, 1.0)],
        vec![(2.55, 0.0), (2.75, 0.0)],
    ];
    [('P', p), ('A', a), ('M', m), ('I', i)]
        .into_iter()
        .map(|(name, strokes)| ToyLetter {
            name,
            strokes: strokes.iter().map(|s| shifted(s)).collect(),
        })
        .collect()
}

/// Samples `points_per_letter` points per letter; label = letter index.
pub fn generate_toy(points_per_letter: usize, noise_sigma: f64, seed: u64) -> Result<FeatureMatrix> {
    if points_per_letter == 0 {
        return Err(Error::param("points_per_letter must be at least 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::param(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let letters = letter_skeletons();
    let mut rng = rng::seeded(seed);
    let jitter = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let n = points_per_letter * letters.len();
    let mut data = Vec::with_capacity(2 * n);
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (label, letter) in letters.iter().enumerate() {
        for p in 0..points_per_letter {
            let (x, y) = letter.sample(&mut rng);
            let (jx, jy) = if noise_sigma > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            data.push((x + jx) as f32);
            data.push((y + jy) as f32);
            ids.push(format!("{}{p}", letter.name));
            labels.push(label as i32);
        }
    }
    FeatureMatrix::new(DenseMatrix::from_vec(n, 2, data)?, ids, Some(labels))
}
