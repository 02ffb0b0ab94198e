//! Small exact-test toolbox for trend assertions.
//!
//! Trend claims are checked with one-sided sign tests over paired cases
//! rather than absolute score targets, so results transfer across model
//! scales. All arithmetic is `f64` and loop-deterministic.

use alloc::vec::Vec;

/// Natural log of n! by direct summation (n stays in the low thousands).
fn ln_factorial(n: usize) -> f64 {
    let mut acc = 0.0f64;
    for i in 2..=n {
        acc += libm::log(i as f64);
    }
    acc
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// One-sided exact binomial tail: P[Binom(n, 0.5) >= wins].
pub fn binom_tail_half(wins: usize, n: usize) -> f64 {
    if wins > n {
        return 0.0;
    }
    let ln_half_n = n as f64 * libm::log(0.5);
    let mut p = 0.0f64;
    for k in wins..=n {
        p += libm::exp(ln_choose(n, k) + ln_half_n);
    }
    p.min(1.0)
}

/// Result of a paired one-sided sign test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// P-value for H1: "positive differences dominate".
    pub p_value: f64,
}

/// Sign test on paired differences; positive values support the hypothesis,
/// ties are dropped.
pub fn sign_test_greater(diffs: &[f64]) -> SignTest {
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for &d in diffs {
        if d > 0.0 {
            wins += 1;
        } else if d < 0.0 {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 { 1.0 } else { binom_tail_half(wins, n) };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

/// Paired sign test over two aligned score vectors, H1: `a > b`.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> SignTest {
    debug_assert_eq!(a.len(), b.len());
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    sign_test_greater(&diffs)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
