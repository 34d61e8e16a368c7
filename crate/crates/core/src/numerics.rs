//! Small numerical helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent RNG stream for chunk `chunk` of a run seeded with `seed`.
pub(crate) fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Well-mixed child seed for a labelled sub-run (SplitMix64 finalizer).
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed-shape pairwise reduction; the result depends only on the input order.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// `max{1 - exp(eps - y), 0}` without cancellation near zero.
#[inline]
pub(crate) fn hockey_term(eps: f64, y: f64) -> f64 {
    if y > eps {
        -(eps - y).exp_m1()
    } else {
        0.0
    }
}

/// Outcome of a bracketed root solve.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Root {
    /// Endpoint of the final bracket on the `f <= target` side.
    pub upper_side: f64,
    pub value_at_upper_side: f64,
}

/// Brent's method for `f(x) = target` where `f(lo) > target >= f(hi)`.
///
/// Stops once the bracket is narrower than `rel_tol * |x|` or after `max_iter`
/// evaluations, and returns the endpoint whose value is `<= target`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn brent_decreasing<F>(
    mut f: F,
    lo: f64,
    hi: f64,
    f_lo: f64,
    f_hi: f64,
    target: f64,
    rel_tol: f64,
    max_iter: usize,
) -> Root
where
    F: FnMut(f64) -> f64,
{
    // g > 0 on the lo side, g <= 0 on the hi side.
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f_lo - target, f_hi - target);
    let (mut raw_a, mut raw_b) = (f_lo, f_hi);
    let mut c = a;
    let mut fc = fa;
    let mut raw_c = raw_a;
    let mut d = b - a;
    let mut e = d;
    let mut iterations = 0;

    loop {
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            raw_c = raw_a;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
            raw_a = raw_b;
            raw_b = raw_c;
            raw_c = raw_a;
        }
        let tol = 0.5 * rel_tol * b.abs().max(f64::MIN_POSITIVE);
        let half = 0.5 * (c - b);
        if half.abs() <= tol || fb == 0.0 || iterations >= max_iter {
            let (x, v) = if fb <= 0.0 { (b, raw_b) } else { (c, raw_c) };
            return Root {
                upper_side: x,
                value_at_upper_side: v,
            };
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * half * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * half * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * half * q - (tol * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = half;
                e = d;
            }
        } else {
            d = half;
            e = d;
        }
        a = b;
        fa = fb;
        raw_a = raw_b;
        b += if d.abs() > tol { d } else { tol.copysign(half) };
        raw_b = f(b);
        fb = raw_b - target;
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 55.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn hockey_term_clamps() {
        assert_eq!(hockey_term(1.0, 0.5), 0.0);
        assert!((hockey_term(0.0, 1.0) - (1.0 - (-1f64).exp())).abs() < 1e-16);
        assert!(hockey_term(1.0, 1.0 + 1e-12) > 0.0);
    }

    #[test]
    fn brent_finds_decreasing_root() {
        let f = |x: f64| (-x).exp();
        let root = brent_decreasing(f, 0.0, 10.0, 1.0, (-10f64).exp(), 0.25, 1e-12, 200);
        assert!((root.upper_side - 4f64.ln()).abs() < 1e-10);
        assert!(root.value_at_upper_side <= 0.25);
    }
}
