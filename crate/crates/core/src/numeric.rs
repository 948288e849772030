//! Small log-domain helpers shared by the samplers.

/// `C(k, 2)` as a float: the coalescence rate with `k` lineages alive.
#[inline]
pub fn pair_count(k: usize) -> f64 {
    (k * k.saturating_sub(1) / 2) as f64
}

/// `log(sum(exp(xs)))` with max shift. Returns `-inf` for an empty slice or all `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place into linear probabilities, returning the log of the total.
pub fn normalize_log_weights(log_w: &[f64], out: &mut Vec<f64>) -> f64 {
    let total = log_sum_exp(log_w);
    out.clear();
    if total == f64::NEG_INFINITY {
        // every weight underflowed: fall back to uniform
        let p = 1.0 / log_w.len() as f64;
        out.extend(std::iter::repeat_n(p, log_w.len()));
    } else {
        out.extend(log_w.iter().map(|&x| (x - total).exp()));
    }
    total
}

/// Draws an index from a probability vector given a uniform draw `u` in `[0, 1)`.
pub fn pick_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver at the top; return the last index with positive mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}
