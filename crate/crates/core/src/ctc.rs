//! Connectionist temporal classification: loss with analytic gradient via
//! log-space forward-backward, and greedy decoding.
//!
//! Logit rows are `T x (V + 1)` with the blank at column 0; labels live in
//! `1..=V`.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;

#[derive(Debug, Clone)]
pub struct CtcResult {
    /// Negative log-likelihood in nats.
    pub loss: f64,
    /// d loss / d logits, same shape as the logits.
    pub grad: Array2<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= min_frames(target)
}

/// `-log p(target | logits)` summed over all alignments, with its gradient.
pub fn ctc_loss(logits: ArrayView2<f64>, target: &[usize]) -> Result<CtcResult> {
    let (t_len, classes) = logits.dim();
    if classes < 2 {
        return Err(Error::Shape(format!(
            "CTC needs a blank plus at least one label, got {classes} columns"
        )));
    }
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab: classes,
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("CTC logits"));
    }
    let needed = min_frames(target);
    if t_len < needed {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            needed,
            frames: t_len,
        });
    }

    let log_probs: Vec<Vec<f64>> = logits.outer_iter().map(log_softmax_row).collect();
    let mut grad = Array2::zeros((t_len, classes));
    if t_len == 0 {
        return Ok(CtcResult { loss: 0.0, grad });
    }

    // Extended lattice: blank, l1, blank, l2, ..., lL, blank.
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg_inf = f64::NEG_INFINITY;

    // alpha[t][s]: log prob of prefixes ending in lattice state s at frame t,
    // including frame t's emission.
    let mut alpha = vec![vec![neg_inf; s_len]; t_len];
    alpha[0][0] = log_probs[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != neg_inf {
                alpha[t][s] = acc + log_probs[t][ext[s]];
            }
        }
    }

    // beta[t][s]: log prob of completing from state s at frame t, excluding
    // frame t's emission.
    let mut beta = vec![vec![neg_inf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + log_probs[t + 1][ext[s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1] + log_probs[t + 1][ext[s + 1]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + log_probs[t + 1][ext[s + 2]]);
            }
            beta[t][s] = acc;
        }
    }

    let mut log_likelihood = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_likelihood = log_add(log_likelihood, alpha[t_len - 1][s_len - 2]);
    }
    if log_likelihood == neg_inf {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            needed,
            frames: t_len,
        });
    }

    let mut occupancy = vec![neg_inf; classes];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = neg_inf);
        for s in 0..s_len {
            let joint = alpha[t][s] + beta[t][s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], joint);
        }
        for k in 0..classes {
            let posterior = (occupancy[k] - log_likelihood).exp();
            grad[[t, k]] = log_probs[t][k].exp() - posterior;
        }
    }
    Ok(CtcResult {
        loss: -log_likelihood,
        grad,
    })
}

/// Per-frame argmax (lowest index wins ties), collapse repeats, drop blanks.
pub fn ctc_greedy_decode(logits: ArrayView2<f64>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.outer_iter() {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if prev != Some(best) && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for (i, &p) in path.iter().enumerate() {
            if p != BLANK && (i == 0 || path[i - 1] != p) {
                out.push(p);
            }
        }
        out
    }

    /// Exhaustive sum over all (V+1)^T alignments.
    fn brute_force_loss(logits: &Array2<f64>, target: &[usize]) -> f64 {
        let (t_len, classes) = logits.dim();
        let lp: Vec<Vec<f64>> = logits.outer_iter().map(log_softmax_row).collect();
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            if collapse(&path) == target {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| lp[t][k])
                    .sum::<f64>()
                    .exp();
            }
            let mut i = 0;
            loop {
                if i == t_len {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn single_frame() {
        let logits = array![[0.3, -1.0, 2.0]];
        let r = ctc_loss(logits.view(), &[2]).unwrap();
        let lp = log_softmax_row(logits.row(0));
        assert!((r.loss + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn three_paths_of_two_frames() {
        let logits = Array2::zeros((2, 3));
        let r = ctc_loss(logits.view(), &[1]).unwrap();
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
        assert!((brute_force_loss(&logits, &[1]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-2.0..2.0));
        let r = ctc_loss(logits.view(), &[]).unwrap();
        let expected: f64 = -logits
            .outer_iter()
            .map(|row| log_softmax_row(row)[BLANK])
            .sum::<f64>();
        assert!((r.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_invalid_targets() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            ctc_loss(logits.view(), &[1, 1]),
            Err(Error::InfeasibleTarget {
                needed: 3,
                frames: 2,
                ..
            })
        ));
        assert!(ctc_loss(logits.view(), &[0]).is_err());
        assert!(ctc_loss(logits.view(), &[3]).is_err());
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn matches_enumeration_and_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let t_len = rng.gen_range(1..=6);
            let v = rng.gen_range(1..=3);
            let l = rng.gen_range(0..=3);
            let target: Vec<usize> = (0..l).map(|_| rng.gen_range(1..=v)).collect();
            if !is_feasible(t_len, &target) {
                continue;
            }
            let logits = Array2::from_shape_fn((t_len, v + 1), |_| rng.gen_range(-3.0..3.0));
            let r = ctc_loss(logits.view(), &target).unwrap();
            assert!((r.loss - brute_force_loss(&logits, &target)).abs() < 1e-9);
            assert!(r.loss >= 0.0);
            for row in r.grad.outer_iter() {
                assert!(row.sum().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t_len = rng.gen_range(3..=12);
            let v = rng.gen_range(1..=5);
            let target: Vec<usize> = (0..rng.gen_range(0..=t_len / 2))
                .map(|_| rng.gen_range(1..=v))
                .collect();
            if !is_feasible(t_len, &target) {
                continue;
            }
            let logits = Array2::from_shape_fn((t_len, v + 1), |_| rng.gen_range(-2.0..2.0));
            let r = ctc_loss(logits.view(), &target).unwrap();
            let eps = 1e-4;
            for t in 0..t_len {
                for k in 0..=v {
                    let mut plus = logits.clone();
                    plus[[t, k]] += eps;
                    let mut minus = logits.clone();
                    minus[[t, k]] -= eps;
                    let numeric = (ctc_loss(plus.view(), &target).unwrap().loss
                        - ctc_loss(minus.view(), &target).unwrap().loss)
                        / (2.0 * eps);
                    let analytic = r.grad[[t, k]];
                    let rel =
                        (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel <= 1e-3, "t={t} k={k}: {analytic} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn row_shift_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Array2::from_shape_fn((8, 4), |_| rng.gen_range(-2.0..2.0));
        let base = ctc_loss(logits.view(), &[1, 3, 3]).unwrap().loss;
        let mut shifted = logits.clone();
        shifted.row_mut(3).mapv_inplace(|x| x + 7.5);
        let moved = ctc_loss(shifted.view(), &[1, 3, 3]).unwrap().loss;
        assert!((base - moved).abs() <= 1e-9);
    }

    fn one_hot_path(path: &[usize], classes: usize) -> Array2<f64> {
        let mut logits = Array2::zeros((path.len(), classes));
        for (t, &k) in path.iter().enumerate() {
            logits[[t, k]] = 1.0;
        }
        logits
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(
            ctc_greedy_decode(one_hot_path(&[0, 1, 1, 0, 2], 3).view()),
            vec![1, 2]
        );
        assert!(ctc_greedy_decode(one_hot_path(&[0, 0, 0], 3).view()).is_empty());
        assert_eq!(
            ctc_greedy_decode(one_hot_path(&[1, 0, 1], 3).view()),
            vec![1, 1]
        );
        // Ties go to the lowest index, here the blank.
        assert!(ctc_greedy_decode(Array2::zeros((4, 3)).view()).is_empty());
    }

    #[test]
    fn greedy_equals_collapse_of_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let t_len = rng.gen_range(0..20);
            let logits = Array2::from_shape_fn((t_len, 4), |_| rng.gen_range(0..3) as f64);
            let argmax: Vec<usize> = logits
                .outer_iter()
                .map(|r| {
                    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    r.iter().position(|&x| x == m).unwrap()
                })
                .collect();
            let decoded = ctc_greedy_decode(logits.view());
            assert_eq!(decoded, collapse(&argmax));
            assert!(!decoded.contains(&BLANK));
        }
    }
}
