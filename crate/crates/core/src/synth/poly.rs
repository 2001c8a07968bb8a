//! Polynomial regression over patch intensities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::patch::TrainingSet;
use crate::error::{Error, Result};
use crate::par;
use crate::serial::f17_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expansion {
    /// Every monomial of total degree up to the order, cross terms included.
    Full,
    /// Powers of each feature separately, no cross terms.
    PerFeature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyOptions {
    pub degree: u8,
    pub expansion: Expansion,
    /// Ridge weight relative to the mean diagonal of the normal matrix.
    pub ridge: f64,
    /// Iterated-Tikhonov refinement steps that pull the ridge solution back
    /// towards the plain least-squares one.
    pub refine: usize,
}

impl Default for PolyOptions {
    fn default() -> Self {
        PolyOptions {
            degree: 3,
            expansion: Expansion::Full,
            ridge: 1e-8,
            refine: 3,
        }
    }
}

/// Exponent vectors of the expansion, constant term first.
pub fn expansion_terms(p: usize, degree: u8, expansion: Expansion) -> Vec<Vec<u8>> {
    let mut terms = vec![vec![0u8; p]];
    match expansion {
        Expansion::PerFeature => {
            for d in 1..=degree {
                for f in 0..p {
                    let mut t = vec![0u8; p];
                    t[f] = d;
                    terms.push(t);
                }
            }
        }
        Expansion::Full => {
            // graded: all exponent vectors of total degree d, for d = 1..=degree
            fn fill(p: usize, from: usize, left: u8, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
                if left == 0 {
                    out.push(cur.clone());
                    return;
                }
                for f in from..p {
                    cur[f] += 1;
                    fill(p, f, left - 1, cur, out);
                    cur[f] -= 1;
                }
            }
            for d in 1..=degree {
                fill(p, 0, d, &mut vec![0u8; p], &mut terms);
            }
        }
    }
    terms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyModel {
    pub degree: u8,
    pub expansion: Expansion,
    /// Features are standardized with these before expansion.
    #[serde(with = "f17_vec")]
    pub feature_mean: Vec<f64>,
    #[serde(with = "f17_vec")]
    pub feature_scale: Vec<f64>,
    pub terms: Vec<Vec<u8>>,
    #[serde(with = "f17_vec")]
    pub coefficients: Vec<f64>,
    /// Coefficient of determination on the training rows.
    pub training_r2: f64,
}

/// Sparse form of a term table for fast evaluation.
struct Evaluator {
    sparse: Vec<Vec<(usize, usize)>>,
    degree: usize,
}

impl Evaluator {
    fn new(terms: &[Vec<u8>]) -> Self {
        let sparse: Vec<Vec<(usize, usize)>> = terms
            .iter()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(f, &e)| (f, e as usize))
                    .collect()
            })
            .collect();
        let degree = terms
            .iter()
            .flat_map(|t| t.iter())
            .copied()
            .max()
            .unwrap_or(0) as usize;
        Evaluator { sparse, degree }
    }

    /// Writes every term of standardized row `z` into `out`; `pow` is scratch.
    fn expand(&self, z: &[f64], pow: &mut Vec<f64>, out: &mut [f64]) {
        let d1 = self.degree + 1;
        pow.clear();
        for &x in z {
            let mut acc = 1.0;
            for _ in 0..d1 {
                pow.push(acc);
                acc *= x;
            }
        }
        for (o, t) in out.iter_mut().zip(&self.sparse) {
            *o = t.iter().map(|&(f, e)| pow[f * d1 + e]).product();
        }
    }
}

impl PolyModel {
    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }

    pub(crate) fn predictor(&self) -> impl Fn(&[f64]) -> f64 + Sync + '_ {
        let ev = Evaluator::new(&self.terms);
        move |x: &[f64]| {
            let z: Vec<f64> = x
                .iter()
                .zip(self.feature_mean.iter().zip(&self.feature_scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect();
            let mut pow = Vec::with_capacity(z.len() * (ev.degree + 1));
            let mut t = vec![0.0; self.terms.len()];
            ev.expand(&z, &mut pow, &mut t);
            t.iter().zip(&self.coefficients).map(|(a, c)| a * c).sum()
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        (self.predictor())(x)
    }
}

/// Least-squares polynomial fit through the normal equations, solved by
/// Cholesky with a small ridge and a few refinement steps.
pub fn poly_fit(ts: &TrainingSet, opts: PolyOptions) -> Result<PolyModel> {
    let p = ts.n_features;
    let n = ts.len();
    if opts.degree == 0 {
        return Err(Error::invalid("polynomial degree must be at least 1"));
    }
    let terms = expansion_terms(p, opts.degree, opts.expansion);
    let t = terms.len();
    if n <= t {
        return Err(Error::invalid(format!(
            "{n} training rows cannot determine {t} polynomial terms"
        )));
    }

    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(ts.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut scale = vec![0.0; p];
    for i in 0..n {
        for ((s, x), m) in scale.iter_mut().zip(ts.row(i)).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }

    let ev = Evaluator::new(&terms);
    let expand_row = |i: usize, pow: &mut Vec<f64>, z: &mut Vec<f64>, row: &mut [f64]| {
        z.clear();
        z.extend(ts.row(i).iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s));
        ev.expand(z, pow, row);
    };

    // upper triangle of X^T X plus X^T y, accumulated in fixed chunk order
    let (gram, rhs) = par::reduce_chunks(
        n,
        (vec![0.0; t * t], vec![0.0; t]),
        |range| {
            let mut g = vec![0.0; t * t];
            let mut r = vec![0.0; t];
            let (mut pow, mut z, mut row) = (Vec::new(), Vec::new(), vec![0.0; t]);
            for i in range {
                expand_row(i, &mut pow, &mut z, &mut row);
                let y = ts.targets[i];
                for a in 0..t {
                    let ra = row[a];
                    r[a] += ra * y;
                    let ga = &mut g[a * t..(a + 1) * t];
                    for b in a..t {
                        ga[b] += ra * row[b];
                    }
                }
            }
            (g, r)
        },
        |(mut g, mut r), (g2, r2)| {
            g.iter_mut().zip(&g2).for_each(|(a, b)| *a += b);
            r.iter_mut().zip(&r2).for_each(|(a, b)| *a += b);
            (g, r)
        },
    );
    let g = DMatrix::from_fn(t, t, |a, b| if a <= b { gram[a * t + b] } else { gram[b * t + a] });
    let r = DVector::from_vec(rhs);
    let lambda = opts.ridge * g.trace() / t as f64;
    let mut damped = g.clone();
    for d in 0..t {
        damped[(d, d)] += lambda;
    }
    let chol = damped
        .cholesky()
        .ok_or_else(|| Error::Degenerate("polynomial design is rank deficient beyond ridge repair".into()))?;
    let mut beta = chol.solve(&r);
    for _ in 0..opts.refine {
        let resid = &r - &g * &beta;
        beta += chol.solve(&resid);
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Degenerate("polynomial coefficients are not finite".into()));
    }

    let mut model = PolyModel {
        degree: opts.degree,
        expansion: opts.expansion,
        feature_mean: mean,
        feature_scale: scale,
        terms,
        coefficients: beta.iter().copied().collect(),
        training_r2: 0.0,
    };
    let r2 = {
        let predict = model.predictor();
        let y_mean = ts.targets.iter().sum::<f64>() / n as f64;
    let (ss_res, ss_tot) = (0..n).fold((0.0, 0.0), |(res, tot), i| {
        let y = ts.targets[i];
        (res + (y - predict(ts.row(i))).powi(2), tot + (y - y_mean).powi(2))
    });
        if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    log::debug!("polynomial fit: {t} terms, training R^2 {r2:.6}");
    model.training_r2 = r2;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, p: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(200.0..1200.0)).collect();
        let y = x.chunks(p).map(&f).collect();
        TrainingSet::from_rows(x, p, y).unwrap()
    }

    fn max_train_error(m: &PolyModel, ts: &TrainingSet) -> f64 {
        (0..ts.len()).fold(0.0f64, |acc, i| acc.max((m.predict_row(ts.row(i)) - ts.targets[i]).abs()))
    }

    #[test]
    fn term_counts() {
        assert_eq!(expansion_terms(7, 3, Expansion::Full).len(), 120);
        assert_eq!(expansion_terms(25, 3, Expansion::Full).len(), 3276);
        assert_eq!(expansion_terms(7, 3, Expansion::PerFeature).len(), 22);
        for t in expansion_terms(5, 3, Expansion::Full) {
            assert!(t.iter().map(|&e| e as u32).sum::<u32>() <= 3);
        }
        let all = expansion_terms(4, 3, Expansion::Full);
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn linear_targets_reproduced() {
        let ts = random_rows(2000, 7, 1, |x| 2.0 * x[0] + 1.0);
        let m = poly_fit(&ts, PolyOptions::default()).unwrap();
        assert!(max_train_error(&m, &ts) < 1e-6);
        assert!((m.training_r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_with_cross_term_reproduced() {
        let ts = random_rows(3000, 7, 2, |x| x[0] * x[0] - x[1] * x[2]);
        let m = poly_fit(&ts, PolyOptions::default()).unwrap();
        let err = max_train_error(&m, &ts);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cubic_reproduced() {
        let ts = random_rows(3000, 7, 3, |x| {
            1e-6 * x[0] * x[3] * x[6] - 2e-4 * x[1].powi(2) + 0.3 * x[5] - 40.0
        });
        let m = poly_fit(&ts, PolyOptions::default()).unwrap();
        let err = max_train_error(&m, &ts);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn per_feature_mode_misses_cross_terms() {
        let ts = random_rows(2000, 3, 4, |x| x[0] * x[1] * 1e-3);
        let opts = PolyOptions {
            expansion: Expansion::PerFeature,
            ..PolyOptions::default()
        };
        let m = poly_fit(&ts, opts).unwrap();
        assert_eq!(m.terms.len(), 10);
        assert!(m.training_r2 < 0.999);
        let full = poly_fit(&ts, PolyOptions::default()).unwrap();
        assert!(max_train_error(&full, &ts) < 1e-6);
    }

    #[test]
    fn noise_targets_report_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..1500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ts = random_rows(1500, 7, 6, |_| 0.0);
        let ts = TrainingSet::from_rows(ts.features, 7, noise).unwrap();
        let m = poly_fit(&ts, PolyOptions::default()).unwrap();
        assert!(m.training_r2 > 0.0 && m.training_r2 < 0.3, "{}", m.training_r2);
    }

    #[test]
    fn constant_feature_handled_by_ridge() {
        let ts = random_rows(1000, 3, 7, |x| 3.0 * x[1]);
        let mut f = ts.features.clone();
        for r in f.chunks_mut(3) {
            r[2] = 5.0;
        }
        let ts = TrainingSet::from_rows(f, 3, ts.targets).unwrap();
        let m = poly_fit(&ts, PolyOptions::default()).unwrap();
        assert!(max_train_error(&m, &ts) < 1e-6);
    }

    #[test]
    fn too_few_rows() {
        let ts = random_rows(100, 7, 8, |x| x[0]);
        assert!(poly_fit(&ts, PolyOptions::default()).is_err());
    }

    #[test]
    fn parallel_matches_sequential() {
        let ts = random_rows(9000, 7, 9, |x| x[0].sqrt() + x[1]);
        let a = poly_fit(&ts, PolyOptions::default()).unwrap();
        let b = par::sequential(|| poly_fit(&ts, PolyOptions::default())).unwrap();
        assert_eq!(a, b);
    }
}
