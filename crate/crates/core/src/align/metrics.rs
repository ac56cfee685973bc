use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ardm::{draw_token_noise, Sequence, VelocityModel};
use crate::error::{Error, Result};
use crate::netcore::{logistic, Rng};

/// Key identifying a sequence by content, so per-sequence noise does not
/// depend on where the sequence sits in a list.
fn content_key(seq: &Sequence) -> u64 {
    seq.prompt
        .iter()
        .chain(seq.tokens.data())
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3).rotate_left(17)
        })
}

/// Per-sequence terms of [`kl_metric`], in the order of `seqs`.
pub fn kl_terms<A: VelocityModel, B: VelocityModel>(
    theta: &A,
    reference: &B,
    seqs: &[Sequence],
    rng: &Rng,
    samples_per_token: usize,
) -> Result<Vec<f64>> {
    if seqs.is_empty() || samples_per_token == 0 {
        return Err(Error::invalid("KL metric needs sequences and at least one sample"));
    }
    let d = theta.token_dim();
    if reference.token_dim() != d {
        return Err(Error::invalid("models disagree on token dimension"));
    }
    seqs.par_iter()
        .map(|seq| {
            let mut r = rng.derive(content_key(seq));
            let mut acc = 0.0;
            for _ in 0..samples_per_token {
                let noise = draw_token_noise(&mut r, seq.len(), d);
                let (xt, _) = noise.perturb(seq);
                let mut diff = theta.predict(seq, &xt, &noise.t, true)?;
                diff.scaled_add_assign(-1.0, &reference.predict(seq, &xt, &noise.t, true)?);
                acc += diff.sq_norm() / seq.len() as f64;
            }
            Ok(acc / (samples_per_token * d) as f64)
        })
        .collect()
}

/// Token-average drift between two velocity models.
///
/// For every sequence and each of `samples_per_token` repeats, every token
/// receives its own time and noise; the metric is the mean of
/// `|v_theta - v_ref|^2 / d` over sequences, tokens and repeats. Noise is
/// keyed by sequence content and the per-sequence terms are summed in sorted
/// order, so the result does not depend on the order of `seqs`.
pub fn kl_metric<A: VelocityModel, B: VelocityModel>(
    theta: &A,
    reference: &B,
    seqs: &[Sequence],
    rng: &Rng,
    samples_per_token: usize,
) -> Result<f64> {
    let mut terms = kl_terms(theta, reference, seqs, rng, samples_per_token)?;
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / seqs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BradleyTerryCheck {
    /// Mean of `sigmoid(margin)`.
    pub implied_probability: f64,
    /// Fraction of margins strictly above zero.
    pub accuracy: f64,
    /// Every margin is exactly zero.
    pub degenerate: bool,
}

pub fn bradley_terry_check(margins: &[f64]) -> Result<BradleyTerryCheck> {
    if margins.is_empty() {
        return Err(Error::invalid("no margins"));
    }
    let n = margins.len() as f64;
    Ok(BradleyTerryCheck {
        implied_probability: margins.iter().map(|&m| logistic(m)).sum::<f64>() / n,
        accuracy: margins.iter().filter(|&&m| m > 0.0).count() as f64 / n,
        degenerate: margins.iter().all(|&m| m == 0.0),
    })
}

/// Log-likelihood of `(winner, loser)` comparisons under strengths `s`.
pub fn bradley_terry_log_likelihood(strengths: &[f64], comparisons: &[(usize, usize)]) -> f64 {
    comparisons
        .iter()
        .map(|&(w, l)| logistic(strengths[w] - strengths[l]).ln())
        .sum()
}

/// Maximum-likelihood Bradley-Terry strengths with item 0 pinned at zero,
/// by Newton's method on the free strengths.
pub fn bradley_terry_mle(items: usize, comparisons: &[(usize, usize)]) -> Result<Vec<f64>> {
    if items < 2 || comparisons.iter().any(|&(w, l)| w >= items || l >= items || w == l) {
        return Err(Error::invalid("comparisons must reference distinct items in range"));
    }
    let m = items - 1;
    let mut s = vec![0.0; items];
    for _ in 0..100 {
        let mut grad = vec![0.0; m];
        let mut hess = vec![0.0; m * m];
        for &(w, l) in comparisons {
            let p = logistic(s[w] - s[l]);
            let q = 1.0 - p;
            let h = p * q;
            if w > 0 {
                grad[w - 1] += q;
            }
            if l > 0 {
                grad[l - 1] -= q;
            }
            for (a, b, sign) in [(w, w, 1.0), (l, l, 1.0), (w, l, -1.0), (l, w, -1.0)] {
                if a > 0 && b > 0 {
                    hess[(a - 1) * m + (b - 1)] += sign * h;
                }
            }
        }
        let step = solve(&mut hess, &mut grad, m)
            .ok_or_else(|| Error::invalid("comparison graph does not identify all strengths"))?;
        let mut biggest: f64 = 0.0;
        for i in 0..m {
            s[i + 1] += step[i];
            biggest = biggest.max(step[i].abs());
        }
        if s.iter().any(|v| !v.is_finite() || v.abs() > 50.0) {
            return Err(Error::invalid("Bradley-Terry likelihood has no finite maximum"));
        }
        if biggest < 1e-12 {
            break;
        }
    }
    Ok(s)
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
        }
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Some(x)
}

/// Mean and standard error of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }

    /// `z` statistic of `self.mean - other.mean` for independent samples.
    pub fn z_over(&self, other: &Summary) -> f64 {
        let se = (self.std_err.powi(2) + other.std_err.powi(2)).sqrt();
        (self.mean - other.mean) / se
    }
}

/// Paired `z` statistic of `mean(a - b)`.
pub fn paired_z(a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = Summary::of(&diffs);
    s.mean / s.std_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{gaussian, Tensor};

    /// `v(x_t) = c x_t`, ignoring history and time.
    struct Linear(f64);

    impl VelocityModel for Linear {
        fn token_dim(&self) -> usize {
            2
        }
        fn predict(&self, _: &Sequence, xt: &Tensor, _: &[f64], _: bool) -> Result<Tensor> {
            let mut v = xt.clone();
            v.scale(self.0);
            Ok(v)
        }
    }

    fn seqs(n: usize, len: usize, seed: u64) -> Vec<Sequence> {
        let mut rng = Rng::new(seed, 0);
        (0..n)
            .map(|_| Sequence::new(vec![], gaussian(&mut rng, &[len, 2])).unwrap())
            .collect()
    }

    #[test]
    fn identical_models_have_zero_drift() {
        let s = seqs(5, 4, 1);
        assert_eq!(
            kl_metric(&Linear(0.3), &Linear(0.3), &s, &Rng::new(2, 0), 3).unwrap(),
            0.0
        );
    }

    #[test]
    fn linear_models_match_closed_form() {
        // E|c x_t|^2 / d with x_t = (1-t) x0 + t x1, t ~ U(0,1):
        // c^2 (|x0|^2 / 3 + d / 3) / d per token.
        let c = 0.5;
        let s = seqs(1000, 10, 3);
        let got = kl_metric(&Linear(1.0 + c), &Linear(1.0), &s, &Rng::new(4, 0), 10).unwrap();
        let mean_sq: f64 = s.iter().map(|q| q.tokens.sq_norm() / q.len() as f64).sum::<f64>() / s.len() as f64;
        let want = c * c * (mean_sq / 3.0 + 2.0 / 3.0) / 2.0;
        assert!((got / want - 1.0).abs() < 0.01, "{got} vs {want}");
    }

    #[test]
    fn order_invariant() {
        let s = seqs(20, 3, 5);
        let mut r = s.clone();
        r.reverse();
        r.swap(3, 11);
        let a = kl_metric(&Linear(1.2), &Linear(1.0), &s, &Rng::new(6, 0), 2).unwrap();
        let b = kl_metric(&Linear(1.2), &Linear(1.0), &r, &Rng::new(6, 0), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn more_samples_shrink_spread() {
        let s = seqs(4, 4, 7);
        let spread = |k: usize| {
            let vals: Vec<f64> = (0..400)
                .map(|i| kl_metric(&Linear(1.3), &Linear(1.0), &s, &Rng::new(100 + i, 0), k).unwrap())
                .collect();
            let m = Summary::of(&vals);
            m.std_err * (vals.len() as f64).sqrt()
        };
        let ratio = spread(2) / spread(4);
        assert!((ratio - 2f64.sqrt()).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn bradley_terry_check_examples() {
        let z = bradley_terry_check(&[0.0, 0.0]).unwrap();
        assert_eq!(z.implied_probability, 0.5);
        assert_eq!(z.accuracy, 0.0);
        assert!(z.degenerate);
        let big = bradley_terry_check(&[800.0, 1e3]).unwrap();
        assert_eq!(big.implied_probability, 1.0);
        assert_eq!(big.accuracy, 1.0);
        assert!(!big.degenerate);
        assert!(bradley_terry_check(&[]).is_err());
    }

    #[test]
    fn mle_agrees_with_grid_search_and_truth() {
        let delta = 0.8;
        let truth = [0.0, delta, 2.0 * delta];
        let mut rng = Rng::new(8, 0);
        let mut comps = Vec::new();
        for _ in 0..6000 {
            let i = rng.below(3);
            let j = (i + 1 + rng.below(2)) % 3;
            if rng.bernoulli(logistic(truth[i] - truth[j])) {
                comps.push((i, j));
            } else {
                comps.push((j, i));
            }
        }
        let mle = bradley_terry_mle(3, &comps).unwrap();
        // Brute-force oracle on a grid refined twice around the best cell.
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let (mut c1, mut c2, mut half) = (1.0, 1.0, 3.0);
        for _ in 0..3 {
            let steps = 120;
            for a in 0..=steps {
                for b in 0..=steps {
                    let s1 = c1 - half + 2.0 * half * a as f64 / steps as f64;
                    let s2 = c2 - half + 2.0 * half * b as f64 / steps as f64;
                    let ll = bradley_terry_log_likelihood(&[0.0, s1, s2], &comps);
                    if ll > best.0 {
                        best = (ll, s1, s2);
                    }
                }
            }
            c1 = best.1;
            c2 = best.2;
            half /= 40.0;
        }
        assert!(
            (mle[1] - best.1).abs() < 1e-3 && (mle[2] - best.2).abs() < 1e-3,
            "{mle:?} vs {best:?}"
        );
        // Recovered gap is within a generous confidence band of the truth.
        assert!(
            (mle[1] - delta).abs() < 0.15 && (mle[2] - 2.0 * delta).abs() < 0.2,
            "{mle:?}"
        );
    }

    #[test]
    fn separable_comparisons_have_no_mle() {
        assert!(bradley_terry_mle(2, &[(1, 0), (1, 0)]).is_err());
        assert!(bradley_terry_mle(2, &[(1, 1)]).is_err());
    }

    #[test]
    fn summaries() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std_err - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(paired_z(&[2.0, 3.1, 4.0], &[1.0, 2.0, 3.0]) > 10.0);
    }
}
