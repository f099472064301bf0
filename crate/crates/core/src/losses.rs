//! Loss terms on the autodiff graph, with plain-value twins used by
//! evaluation code and tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{xlogx, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Weights of the total loss `λ·L_f + (1−λ)·L_m + γ·L_a + ζ·R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub zeta: f64,
    /// Gaussian-kernel bandwidth; `None` picks the median pairwise distance
    /// of each batch's pooled embeddings.
    pub sigma: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5, gamma: 1.0, zeta: 1.0, sigma: None }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda)
            && self.gamma >= 0.0
            && self.zeta >= 0.0
            && self.sigma.map_or(true, |s| s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid loss weights {self:?}")))
        }
    }
}

fn mse(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean squared error of the mixture output.
pub fn loss_final(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    if g.shape(pred)[0] == 0 {
        return Err(Error::Invalid("loss over an empty batch".into()));
    }
    mse(g, pred, truth)
}

/// Mean over cities of each expert's MSE.
pub fn loss_experts(g: &mut Graph, preds: &[Var], truth: Var) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::Invalid("expert loss without experts".into()));
    }
    let mut acc = None;
    for &p in preds {
        let m = loss_final(g, p, truth)?;
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / preds.len() as f64))
}

/// Squared MMD between the rows of `x` and `y` with kernel
/// `exp(-‖a−b‖² / 2σ²)`; within-set sums skip the diagonal, the cross term
/// keeps every pair.
pub fn mmd_squared(g: &mut Graph, x: Var, y: Var, sigma: f64) -> Result<Var> {
    let (n, m) = (g.shape(x)[0], g.shape(y)[0]);
    if n < 2 || m < 2 {
        return Err(Error::Invalid(format!("MMD needs at least two points per set, got {n} and {m}")));
    }
    let c = -1.0 / (2.0 * sigma * sigma);
    let kernel_sum = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = g.sq_dist(a, b)?;
        let s = g.scale(d, c);
        let k = g.exp(s);
        Ok(g.sum(k))
    };
    let kxx = kernel_sum(g, x, x)?;
    let kyy = kernel_sum(g, y, y)?;
    let kxy = kernel_sum(g, x, y)?;
    // The diagonal is exactly exp(0) = 1.
    let (nf, mf) = (n as f64, m as f64);
    let kxx = g.add_scalar(kxx, -nf);
    let t1 = g.scale(kxx, 1.0 / (nf * (nf - 1.0)));
    let kyy = g.add_scalar(kyy, -mf);
    let t2 = g.scale(kyy, 1.0 / (mf * (mf - 1.0)));
    let cross = g.scale(kxy, 2.0 / (nf * mf));
    let within = g.add(t1, t2)?;
    g.sub(within, cross)
}

/// MMD² between the pooled source-station embeddings and the meta-target
/// station embeddings.
pub fn loss_adversarial(g: &mut Graph, sources: &[Var], target: Var, sigma: f64) -> Result<Var> {
    if sources.is_empty() {
        return Err(Error::Invalid("adversarial loss without source embeddings".into()));
    }
    let pooled = g.concat_rows(sources)?;
    mmd_squared(g, pooled, target, sigma)
}

/// `Σ β log β`, averaged over rows of a `batch x cities` weight matrix.
pub fn entropy_reg(g: &mut Graph, beta: Var) -> Var {
    let rows = g.shape(beta)[0].max(1);
    let e = g.xlogx(beta);
    let s = g.sum(e);
    g.scale(s, 1.0 / rows as f64)
}

pub fn total_loss(g: &mut Graph, l_f: Var, l_m: Var, l_a: Var, r: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(l_f, w.lambda);
    let b = g.scale(l_m, 1.0 - w.lambda);
    let c = g.scale(l_a, w.gamma);
    let d = g.scale(r, w.zeta);
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

/// Plain-value counterparts.
pub mod values {
    use super::*;

    pub fn loss_final(pred: &[f64], truth: &[f64]) -> Result<f64> {
        if pred.is_empty() || pred.len() != truth.len() {
            return Err(Error::Invalid(format!("loss over {} predictions and {} truths", pred.len(), truth.len())));
        }
        Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
    }

    pub fn loss_experts(preds: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
        if preds.is_empty() {
            return Err(Error::Invalid("expert loss without experts".into()));
        }
        let mut total = 0.0;
        for p in preds {
            total += loss_final(p, truth)?;
        }
        Ok(total / preds.len() as f64)
    }

    pub fn mmd_squared(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> Result<f64> {
        let mut g = Graph::new();
        let vx = g.constant(Tensor::from_rows(x)?);
        let vy = g.constant(Tensor::from_rows(y)?);
        let v = super::mmd_squared(&mut g, vx, vy, sigma)?;
        Ok(g.value(v).item())
    }

    pub fn entropy_reg(beta: &[f64]) -> f64 {
        beta.iter().map(|&b| xlogx(b)).sum()
    }

    pub fn total_loss(l_f: f64, l_m: f64, l_a: f64, r: f64, w: &LossWeights) -> f64 {
        w.lambda * l_f + (1.0 - w.lambda) * l_m + w.gamma * l_a + w.zeta * r
    }
}

/// Median pairwise Euclidean distance between rows of `x`; 1.0 when it is
/// zero or undefined.
pub fn median_bandwidth(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row_slice(i).iter().zip(x.row_slice(j)).map(|(a, b)| (a - b).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::values as v;
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn final_loss_cases() {
        assert_eq!(v::loss_final(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(v::loss_final(&[5.0], &[3.0]).unwrap(), 4.0);
        assert_eq!(v::loss_final(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 2.5);
        assert!(v::loss_final(&[], &[]).is_err());
        let mut g = Graph::new();
        let p = g.constant(Tensor::column(&[1.0, 0.0]));
        let t = g.constant(Tensor::column(&[0.0, 2.0]));
        let l = loss_final(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).item(), 2.5);
    }

    #[test]
    fn expert_loss_cases() {
        let truth = [1.0, -1.0];
        assert_eq!(v::loss_experts(&[truth.to_vec(), truth.to_vec()], &truth).unwrap(), 0.0);
        // MSEs 2 and 4.
        let a = vec![1.0 + 2f64.sqrt(), -1.0 - 2f64.sqrt()];
        let b = vec![3.0, 1.0];
        assert!((v::loss_experts(&[a, b], &truth).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn expert_loss_matches_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, n) = (4, 7);
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let preds: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let mut oracle = 0.0;
        for p in &preds {
            let mut s = 0.0;
            for i in 0..n {
                s += (p[i] - truth[i]) * (p[i] - truth[i]);
            }
            oracle += s / n as f64;
        }
        oracle /= k as f64;
        let mut g = Graph::new();
        let t = g.constant(Tensor::column(&truth));
        let pv: Vec<Var> = preds.iter().map(|p| g.constant(Tensor::column(p))).collect();
        let l = loss_experts(&mut g, &pv, t).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }

    fn gauss(a: &[f64], b: &[f64], sigma: f64) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    }

    fn within(x: &[Vec<f64>], sigma: f64) -> f64 {
        let n = x.len() as f64;
        let mut t = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    t += gauss(&x[i], &x[j], sigma);
                }
            }
        }
        t / (n * (n - 1.0))
    }

    fn oracle_mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
        let mut cross = 0.0;
        for a in x {
            for b in y {
                cross += gauss(a, b, sigma);
            }
        }
        within(x, sigma) + within(y, sigma) - 2.0 * cross / (x.len() * y.len()) as f64
    }

    fn set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) + shift).collect()).collect()
    }

    #[test]
    fn mmd_three_vs_three_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (set(&mut rng, 3, 4, 0.0), set(&mut rng, 3, 4, 0.5));
        let a = v::mmd_squared(&x, &y, 1.0).unwrap();
        assert!((a - oracle_mmd(&x, &y, 1.0)).abs() < 1e-12);
        assert!((a - v::mmd_squared(&y, &x, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mmd_of_identical_points_is_exactly_zero() {
        let p = vec![vec![0.3, -1.7, 2.0]; 4];
        let q = vec![vec![0.3, -1.7, 2.0]; 3];
        assert_eq!(v::mmd_squared(&p, &q, 0.7).unwrap(), 0.0);
        assert!(v::mmd_squared(&p[..1], &q, 1.0).is_err());
    }

    #[test]
    fn separated_clusters_lose_the_cross_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (set(&mut rng, 5, 2, 0.0), set(&mut rng, 4, 2, 50.0));
        let a = v::mmd_squared(&x, &y, 1.0).unwrap();
        let cross_free = within(&x, 1.0) + within(&y, 1.0);
        assert!((a - oracle_mmd(&x, &y, 1.0)).abs() < 1e-12);
        assert!((a - cross_free).abs() < 1e-12, "{a} vs {cross_free}");
    }

    #[test]
    fn adversarial_loss_pools_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s1, s2, t) = (set(&mut rng, 2, 3, 0.0), set(&mut rng, 3, 3, 0.2), set(&mut rng, 3, 3, 1.0));
        let mut g = Graph::new();
        let (a, b) = (g.constant(Tensor::from_rows(&s1).unwrap()), g.constant(Tensor::from_rows(&s2).unwrap()));
        let tv = g.constant(Tensor::from_rows(&t).unwrap());
        let l = loss_adversarial(&mut g, &[a, b], tv, 0.8).unwrap();
        let pooled: Vec<Vec<f64>> = s1.iter().chain(&s2).cloned().collect();
        assert!((g.value(l).item() - oracle_mmd(&pooled, &t, 0.8)).abs() < 1e-12);

        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&t).unwrap());
        let q = g.constant(Tensor::from_rows(&t).unwrap());
        let l = loss_adversarial(&mut g, &[p], q, 1.0).unwrap();
        // Same points on both sides: within terms equal the cross term minus
        // its diagonal, which is not zero for this estimator.
        let expect = oracle_mmd(&t, &t, 1.0);
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn mmd_gradient_passes_the_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_rows(&set(&mut rng, 4, 3, 0.0)).unwrap();
        let y = Tensor::from_rows(&set(&mut rng, 3, 3, 0.4)).unwrap();
        let r = finite_diff_check(|g, p| mmd_squared(g, p[0], p[1], 0.9), &[x, y], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn entropy_reg_cases() {
        assert!((v::entropy_reg(&[0.25; 4]) + 4f64.ln()).abs() < 1e-12);
        assert_eq!(v::entropy_reg(&[0.0, 1.0, 0.0]), 0.0);
        let expect = 0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln();
        assert!((v::entropy_reg(&[0.25, 0.75]) - expect).abs() < 1e-15);
        assert!((expect + 0.5623).abs() < 1e-4);
        let mut g = Graph::new();
        let b = g.constant(Tensor::new(2, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap());
        let r = entropy_reg(&mut g, b);
        assert!((g.value(r).item() - (expect - 2f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_and_total_gradients_pass_the_check() {
        let logits = Tensor::new(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.3]).unwrap();
        let r = finite_diff_check(
            |g, p| {
                let b = g.softmax_rows(p[0]);
                Ok(entropy_reg(g, b))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let parts = vec![Tensor::scalar(1.3), Tensor::scalar(0.2), Tensor::scalar(-0.4), Tensor::scalar(2.0)];
        let w = LossWeights { lambda: 0.3, gamma: 0.7, zeta: 1.5, sigma: None };
        let r = finite_diff_check(|g, p| total_loss(g, p[0], p[1], p[2], p[3], &w), &parts, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn total_loss_cases() {
        let only_final = LossWeights { lambda: 1.0, gamma: 0.0, zeta: 0.0, sigma: None };
        assert_eq!(v::total_loss(3.5, 9.0, 4.0, -1.0, &only_final), 3.5);
        let even = LossWeights { lambda: 0.5, gamma: 0.0, zeta: 0.0, sigma: None };
        assert_eq!(v::total_loss(2.0, 2.0, 7.0, -3.0, &even), 2.0);
        assert_eq!(v::total_loss(1.0, 2.0, 0.5, -1.0, &LossWeights::default()), 1.0);
        let mut g = Graph::new();
        let vals: Vec<Var> = [1.0, 2.0, 0.5, -1.0].iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let t = total_loss(&mut g, vals[0], vals[1], vals[2], vals[3], &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 1.0);
        assert!(LossWeights { lambda: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        // Distances 1, 3, 2.
        assert_eq!(median_bandwidth(&x), 2.0);
        assert_eq!(median_bandwidth(&Tensor::zeros(3, 2)), 1.0);
        assert_eq!(median_bandwidth(&Tensor::zeros(1, 2)), 1.0);
    }

    proptest! {
        #[test]
        fn mmd_matches_oracle_and_is_symmetric(
            n in 2usize..=6, m in 2usize..=6, d in 1usize..=4, seed in any::<u64>(), sigma in 0.3f64..3.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (set(&mut rng, n, d, 0.0), set(&mut rng, m, d, 0.3));
            let a = v::mmd_squared(&x, &y, sigma).unwrap();
            prop_assert!((a - oracle_mmd(&x, &y, sigma)).abs() < 1e-12);
            prop_assert!((a - v::mmd_squared(&y, &x, sigma).unwrap()).abs() < 1e-12);
            prop_assert!(a >= -2.0 / n.min(m) as f64);
        }

        #[test]
        fn uniform_beta_minimizes_the_regularizer(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 0.0);
            let beta: Vec<f64> = raw.iter().map(|r| r / s).collect();
            let k = beta.len();
            prop_assert!(v::entropy_reg(&vec![1.0 / k as f64; k]) <= v::entropy_reg(&beta) + 1e-15);
        }
    }
}
