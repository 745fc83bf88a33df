//! Scale-aware combined-margin softmax loss.
//!
//! The target logit is `s_p * (cos(m1 * theta + m2) - m3)` and every other
//! logit is `s_n * cos(theta_k)`, where the angles are taken between the
//! normalized embedding and normalized class weights.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosines are clamped to this distance from ±1 before `acos`.
pub const COS_CLAMP: f64 = 1e-12;
/// Angles are clamped to `[THETA_CLAMP, π − THETA_CLAMP]` before differentiating.
pub const THETA_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub s_p: f64,
    pub s_n: f64,
}

impl LossParams {
    /// Plain softmax on `s`-scaled cosines.
    pub fn plain(s: f64) -> Self {
        Self {
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
            s_p: s,
            s_n: s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.m1, self.m2, self.m3, self.s_p, self.s_n].iter().all(|v| v.is_finite());
        if !finite || self.s_p <= 0.0 || self.s_n <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid loss parameters {self:?}")));
        }
        Ok(())
    }
}

/// `cos(m1 * theta + m2) - m3`.
pub fn margin_fn(p: &LossParams, theta: f64) -> f64 {
    (p.m1 * theta + p.m2).cos() - p.m3
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// b × K logits fed to the softmax.
    pub logits: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub grad_x: Array2<f64>,
    pub grad_w: Array2<f64>,
    /// Number of target angles that had to be clamped away from 0 or π.
    pub clamped: usize,
}

struct Normalized {
    units: Array2<f64>,
    norms: Array1<f64>,
}

fn normalize(m: &Array2<f64>) -> Result<Normalized> {
    let mut units = m.clone();
    let mut norms = Array1::zeros(m.nrows());
    for (row, mut r) in units.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateEmbedding { row });
        }
        norms[row] = n;
        r.mapv_inplace(|v| v / n);
    }
    Ok(Normalized { units, norms })
}

fn check_shapes(x: &Array2<f64>, y: &[usize], w: &Array2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if w.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if x.nrows() != y.len() || x.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "x {:?}, {} labels, W {:?}",
            x.dim(),
            y.len(),
            w.dim()
        )));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= w.nrows()) {
        return Err(Error::InvalidArgument(format!("label {l} >= {}", w.nrows())));
    }
    Ok(())
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

fn log_sum_exp(z: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = z.clone().fold(f64::NEG_INFINITY, f64::max);
    m + z.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn loss_forward(x: &Array2<f64>, y: &[usize], w: &Array2<f64>, p: &LossParams) -> Result<LossOutput> {
    check_shapes(x, y, w)?;
    p.validate()?;
    let xn = normalize(x)?;
    let wn = normalize(w)?;
    let mut logits = xn.units.dot(&wn.units.t());
    let mut total = 0.0;
    for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
        let target = y[i];
        for (k, z) in row.iter_mut().enumerate() {
            *z = if k == target {
                p.s_p * margin_fn(p, clamp_cos(*z).acos())
            } else {
                p.s_n * *z
            };
        }
        total += log_sum_exp(row.iter().copied()) - row[target];
    }
    Ok(LossOutput {
        loss: total / x.nrows() as f64,
        logits,
    })
}

/// Exact gradients of the mean loss with respect to raw embeddings and raw
/// class weights.
pub fn loss_backward(x: &Array2<f64>, y: &[usize], w: &Array2<f64>, p: &LossParams) -> Result<LossGrads> {
    check_shapes(x, y, w)?;
    p.validate()?;
    let (b, kc) = (x.nrows(), w.nrows());
    let xn = normalize(x)?;
    let wn = normalize(w)?;
    let cos = xn.units.dot(&wn.units.t());

    // g[i][k] = d(mean loss)/d cos_ik
    let mut g = Array2::<f64>::zeros((b, kc));
    let mut total = 0.0;
    let mut clamped = 0;
    let mut z = vec![0.0; kc];
    for i in 0..b {
        let target = y[i];
        let raw_theta = clamp_cos(cos[[i, target]]).acos();
        let exact_theta = cos[[i, target]].clamp(-1.0, 1.0).acos();
        if !(THETA_CLAMP..=std::f64::consts::PI - THETA_CLAMP).contains(&exact_theta) {
            clamped += 1;
        }
        let theta = raw_theta.clamp(THETA_CLAMP, std::f64::consts::PI - THETA_CLAMP);
        for k in 0..kc {
            z[k] = if k == target {
                p.s_p * margin_fn(p, raw_theta)
            } else {
                p.s_n * cos[[i, k]]
            };
        }
        let lse = log_sum_exp(z.iter().copied());
        total += lse - z[target];
        // dz_y/dcos_y = s_p * m1 * sin(m1 theta + m2) / sin(theta)
        let dzy = p.s_p * p.m1 * (p.m1 * theta + p.m2).sin() / theta.sin();
        for k in 0..kc {
            let prob = (z[k] - lse).exp();
            g[[i, k]] = if k == target {
                (prob - 1.0) * dzy
            } else {
                prob * p.s_n
            } / b as f64;
        }
    }

    // Through the cosine: d cos_ik / d xhat_i = what_k and vice versa.
    let grad_xhat = g.dot(&wn.units);
    let grad_what = g.t().dot(&xn.units);

    let grad_x = project_out(&grad_xhat, &xn);
    let grad_w = project_out(&grad_what, &wn);
    Ok(LossGrads {
        loss: total / b as f64,
        grad_x,
        grad_w,
        clamped,
    })
}

/// Back-propagates through `v / |v|`: (g − u (u·g)) / |v| row-wise.
fn project_out(grad_unit: &Array2<f64>, n: &Normalized) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let u = n.units.row(i);
        let along = u.dot(&row);
        row.zip_mut_with(&u, |g, &uv| *g -= along * uv);
        row.mapv_inplace(|v| v / n.norms[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rng: &mut util::Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn identity_margin_is_cosine() {
        let p = LossParams::plain(1.0);
        for t in [0.0, 0.3, 1.0, 2.5, std::f64::consts::PI] {
            assert_eq!(margin_fn(&p, t), t.cos());
        }
    }

    #[test]
    fn searched_margin_value() {
        let p = LossParams {
            m1: 1.15,
            m2: 0.22,
            m3: 0.0,
            s_p: 40.0,
            s_n: 48.0,
        };
        // cos(0.795), evaluated at 30 digits.
        assert!((margin_fn(&p, 0.5) - 0.700_284_766_041_039_7).abs() < 1e-15);
    }

    #[test]
    fn cosine_margin_at_zero() {
        let p = LossParams { m3: 0.35, ..LossParams::plain(1.0) };
        assert!((margin_fn(&p, 0.0) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn uniform_cosines_give_log_k() {
        // Every class weight orthogonal to x: all cosines equal 0.
        let x = array![[0.0, 0.0, 0.0, 0.0, 1.0]];
        let w = array![
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0]
        ];
        let out = loss_forward(&x, &[2], &w, &LossParams::plain(1.0)).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_rows() {
        let x = array![[0.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            loss_forward(&x, &[0], &w, &LossParams::plain(1.0)),
            Err(Error::DegenerateEmbedding { row: 0 })
        ));
        let x = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(loss_backward(&x, &[0], &w, &LossParams::plain(1.0)).is_err());
    }

    /// Direct transcription of the loss formula, one sample at a time.
    fn direct_loss(x: &Array2<f64>, y: &[usize], w: &Array2<f64>, p: &LossParams) -> f64 {
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let xi: Vec<f64> = x.row(i).to_vec();
            let nx = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut num = 0.0;
            let mut neg = 0.0;
            for k in 0..w.nrows() {
                let wk: Vec<f64> = w.row(k).to_vec();
                let nw = wk.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c = xi.iter().zip(&wk).map(|(a, b)| a * b).sum::<f64>() / (nx * nw);
                if k == y[i] {
                    let theta = c.acos();
                    num = (p.s_p * ((p.m1 * theta + p.m2).cos() - p.m3)).exp();
                } else {
                    neg += (p.s_n * c).exp();
                }
            }
            total += -(num / (num + neg)).ln();
        }
        total / x.nrows() as f64
    }

    #[test]
    fn matches_direct_evaluator_on_fixture() {
        let p = LossParams {
            m1: 1.0,
            m2: 0.32,
            m3: 0.0,
            s_p: 40.0,
            s_n: 40.0,
        };
        let x = array![[0.9, 0.1, -0.2], [0.1, 0.8, 0.3], [-0.4, 0.2, 0.7]];
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]];
        let y = [0, 1, 2];
        let got = loss_forward(&x, &y, &w, &p).unwrap().loss;
        let want = direct_loss(&x, &y, &w, &p);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    fn fd_check(p: &LossParams, seed: u64) -> f64 {
        let mut rng = util::rng(seed);
        let b = rng.random_range(1..5);
        let k = rng.random_range(2..5);
        let d = rng.random_range(2..6);
        let x = random(&mut rng, b, d);
        let w = random(&mut rng, k, d);
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let g = loss_backward(&x, &y, &w, p).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        };
        for idx in ndarray::indices(x.dim()) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            check(
                g.grad_x[idx],
                loss_forward(&xp, &y, &w, p).unwrap().loss,
                loss_forward(&xm, &y, &w, p).unwrap().loss,
            );
        }
        for idx in ndarray::indices(w.dim()) {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[idx] += h;
            wm[idx] -= h;
            check(
                g.grad_w[idx],
                loss_forward(&x, &y, &wp, p).unwrap().loss,
                loss_forward(&x, &y, &wm, p).unwrap().loss,
            );
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = LossParams {
            m1: 1.15,
            m2: 0.22,
            m3: 0.1,
            s_p: 4.0,
            s_n: 4.8,
        };
        for seed in 0..10 {
            let err = fd_check(&p, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn scaling_a_row_keeps_loss_and_direction() {
        let p = LossParams {
            m1: 1.1,
            m2: 0.2,
            m3: 0.05,
            s_p: 8.0,
            s_n: 10.0,
        };
        let x = array![[0.3, -0.5, 0.8], [0.6, 0.2, -0.1]];
        let w = array![[1.0, 0.2, 0.0], [0.0, 1.0, 0.4], [0.3, 0.0, -1.0]];
        let y = [1, 2];
        let mut x10 = x.clone();
        x10.row_mut(0).mapv_inplace(|v| v * 10.0);
        let a = loss_backward(&x, &y, &w, &p).unwrap();
        let b = loss_backward(&x10, &y, &w, &p).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        let (na, nb) = (a.grad_w.iter().map(|v| v * v).sum::<f64>().sqrt(), b.grad_w.iter().map(|v| v * v).sum::<f64>().sqrt());
        for (u, v) in a.grad_w.iter().zip(b.grad_w.iter()) {
            assert!((u / na - v / nb).abs() < 1e-12);
        }
        // The scaled row's own gradient shrinks by the same factor.
        for j in 0..3 {
            assert!((a.grad_x[[0, j]] - 10.0 * b.grad_x[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_target_angle_at_endpoints() {
        let x = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let p = LossParams {
            m1: 1.2,
            m2: 0.1,
            ..LossParams::plain(2.0)
        };
        let g = loss_backward(&x, &[0], &w, &p).unwrap();
        assert_eq!(g.clamped, 1);
        assert!(g.grad_x.iter().chain(g.grad_w.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn margin_never_exceeds_cosine_for_valid_margins() {
        for &(m1, m2, m3) in &[(1.0, 0.0, 0.0), (1.15, 0.22, 0.0), (1.3, 0.5, 0.4), (1.0, 0.32, 0.0)] {
            let p = LossParams { m1, m2, m3, s_p: 1.0, s_n: 1.0 };
            for i in 0..=1000 {
                let t = std::f64::consts::PI * i as f64 / 1000.0;
                let f = margin_fn(&p, t);
                // cos is decreasing on [0, π] only; m1θ + m2 may pass π, where the bound
                // is known to fail for angular margins. Restrict to the monotone region.
                if m1 * t + m2 <= std::f64::consts::PI {
                    assert!(f <= t.cos() + 1e-15, "{m1} {m2} {m3} θ={t}");
                }
            }
        }
    }

    #[test]
    fn loss_is_monotone_in_target_angle() {
        let p = LossParams {
            m1: 1.15,
            m2: 0.22,
            m3: 0.0,
            s_p: 40.0,
            s_n: 48.0,
        };
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut prev = f64::INFINITY;
        // Rotate x from the y/z plane towards class 0; negative cosines stay fixed in ratio.
        for i in 0..50 {
            let t = 1.5 - i as f64 * 0.03;
            let x = array![[t.cos(), t.sin() / 2f64.sqrt(), t.sin() / 2f64.sqrt()]];
            let l = loss_forward(&x, &[0], &w, &p).unwrap().loss;
            assert!(l <= prev);
            if prev > 1e-10 {
                assert!(l < prev);
            }
            prev = l;
        }
    }
}
