//! Convex-hull membership of pool embeddings relative to the K-shot set.
//!
//! Membership of `u` is decided by the simplex-constrained least squares
//! problem `min ||sum_i l_i v_i - u||` with `l >= 0`, `sum l = 1`. It is
//! solved with pairwise Frank-Wolfe on the Gram matrix, then polished by an
//! exact solve restricted to the active support.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, solve};
use crate::types::EmbeddingMatrix;

pub const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct HullFit {
    /// `||sum l_i v_i - u||`, computed explicitly from the weights.
    pub residual: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// Frank-Wolfe gap on the squared residual at exit.
    pub gap: f64,
}

/// Anchor points of a convex hull with their Gram matrix.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    anchors: Vec<Vec<f64>>,
    gram: Vec<f64>,
}

impl ConvexHull {
    pub fn new(anchors: Vec<Vec<f64>>) -> Result<Self> {
        let k = anchors.len();
        if k < 2 {
            return Err(Error::DegenerateHull { points: k });
        }
        let dim = anchors[0].len();
        if anchors.iter().any(|a| a.len() != dim) {
            return Err(Error::Shape("hull anchors differ in dimension".into()));
        }
        let mut gram = alloc::vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let g = dot(&anchors[i], &anchors[j]);
                gram[i * k + j] = g;
                gram[j * k + i] = g;
            }
        }
        Ok(Self { anchors, gram })
    }

    pub fn from_embeddings(m: &EmbeddingMatrix) -> Result<Self> {
        Self::new(
            (0..m.len())
                .map(|i| m.row(i).iter().map(|&x| x as f64).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    fn g(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.len() + j]
    }

    fn residual_of(&self, weights: &[f64], point: &[f64]) -> f64 {
        let mut r: Vec<f64> = point.iter().map(|x| -x).collect();
        for (w, a) in weights.iter().zip(&self.anchors) {
            if *w != 0.0 {
                for (ri, ai) in r.iter_mut().zip(a) {
                    *ri += w * ai;
                }
            }
        }
        norm(&r)
    }

    /// Closest point of the hull to `point`. Stops once the gap falls under
    /// `gap_tol` or after [`MAX_ITERATIONS`].
    pub fn fit(&self, point: &[f64], gap_tol: f64) -> HullFit {
        let k = self.len();
        let b: Vec<f64> = self.anchors.iter().map(|a| dot(a, point)).collect();

        let start = (0..k)
            .min_by(|&i, &j| (self.g(i, i) - 2.0 * b[i]).total_cmp(&(self.g(j, j) - 2.0 * b[j])))
            .unwrap_or(0);
        let mut w = alloc::vec![0.0; k];
        w[start] = 1.0;
        // gw = G w
        let mut gw: Vec<f64> = (0..k).map(|i| self.g(i, start)).collect();

        let mut iterations = 0;
        let mut gap;
        loop {
            let grad: Vec<f64> = (0..k).map(|i| gw[i] - b[i]).collect();
            let toward = (0..k).min_by(|&i, &j| grad[i].total_cmp(&grad[j])).unwrap_or(0);
            let away = (0..k)
                .filter(|&i| w[i] > 0.0)
                .max_by(|&i, &j| grad[i].total_cmp(&grad[j]))
                .unwrap_or(start);
            let wg: f64 = w.iter().zip(&grad).map(|(a, g)| a * g).sum();
            // Gradient of the squared residual is 2 * grad.
            gap = 2.0 * (wg - grad[toward]);
            if gap <= gap_tol || iterations >= MAX_ITERATIONS || toward == away {
                break;
            }
            let curvature = self.g(toward, toward) + self.g(away, away) - 2.0 * self.g(toward, away);
            let max_step = w[away];
            let step = if curvature > 0.0 {
                ((grad[away] - grad[toward]) / curvature).clamp(0.0, max_step)
            } else {
                max_step
            };
            if step == 0.0 {
                break;
            }
            w[toward] += step;
            w[away] -= step;
            if w[away] < 1e-15 {
                w[toward] += w[away];
                w[away] = 0.0;
            }
            for (i, g) in gw.iter_mut().enumerate() {
                *g += step * (self.g(i, toward) - self.g(i, away));
            }
            iterations += 1;
        }

        let mut residual = self.residual_of(&w, point);
        if let Some(polished) = self.polish(&w, &b) {
            let r = self.residual_of(&polished, point);
            if r < residual {
                residual = r;
                w = polished;
            }
        }
        HullFit {
            residual,
            weights: w,
            iterations,
            gap,
        }
    }

    /// Exact equality-constrained least squares on the support of `w`,
    /// dropping members whose weight turns negative.
    fn polish(&self, w: &[f64], b: &[f64]) -> Option<Vec<f64>> {
        let mut support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        while !support.is_empty() {
            let s = support.len();
            let n = s + 1;
            let mut a = alloc::vec![0.0; n * n];
            let mut rhs = alloc::vec![0.0; n];
            for (r, &i) in support.iter().enumerate() {
                for (c, &j) in support.iter().enumerate() {
                    a[r * n + c] = self.g(i, j);
                }
                a[r * n + s] = 1.0;
                a[s * n + r] = 1.0;
                rhs[r] = b[i];
            }
            rhs[s] = 1.0;
            let x = solve(a, rhs)?;
            let (worst, &min) = x[..s]
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))?;
            if min >= 0.0 {
                let mut out = alloc::vec![0.0; w.len()];
                for (r, &i) in support.iter().enumerate() {
                    out[i] = x[r];
                }
                return Some(out);
            }
            support.remove(worst);
        }
        None
    }

    /// `residual < epsilon * ||point||`.
    pub fn contains(&self, point: &[f64], epsilon: f64) -> (bool, HullFit) {
        let scale = norm(point);
        let tol = (epsilon * scale) * (epsilon * scale) / 10.0;
        let fit = self.fit(point, tol);
        (fit.residual < epsilon * scale, fit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HullSample {
    /// Sampled ids, in draw order.
    pub ids: Vec<String>,
    /// Residual of every pool row, in pool order.
    pub residuals: Vec<f64>,
    pub inside: usize,
    pub warnings: Vec<String>,
}

/// Uniformly sample `c` pool ids among those inside the hull of `shots`.
pub fn convex_hull_sample(
    shots: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    c: usize,
    epsilon: f64,
    seed: u64,
) -> Result<HullSample> {
    if shots.dim() != pool.dim() {
        return Err(Error::Shape(format!(
            "shot dim {} vs pool dim {}",
            shots.dim(),
            pool.dim()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be positive, got {epsilon}")));
    }
    let hull = ConvexHull::from_embeddings(shots)?;
    let mut inside_idx = Vec::new();
    let mut residuals = Vec::with_capacity(pool.len());
    for j in 0..pool.len() {
        let u: Vec<f64> = pool.row(j).iter().map(|&x| x as f64).collect();
        let (inside, fit) = hull.contains(&u, epsilon);
        residuals.push(fit.residual);
        if inside {
            inside_idx.push(j);
        }
    }
    let mut warnings = Vec::new();
    let chosen: Vec<usize> = if inside_idx.len() <= c {
        if inside_idx.len() < c {
            warnings.push(format!(
                "only {} pool items lie inside the hull, fewer than the budget {c}",
                inside_idx.len()
            ));
        }
        inside_idx.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, inside_idx.len(), c)
            .into_iter()
            .map(|i| inside_idx[i])
            .collect()
    };
    Ok(HullSample {
        ids: chosen.iter().map(|&j| pool.ids()[j].clone()).collect(),
        residuals,
        inside: inside_idx.len(),
        warnings,
    })
}
