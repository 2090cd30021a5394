//! Reference computations for the distance functions.

use rand::Rng;

/// Σ |CDF_p − CDF_q| over the support points below the last one, where
/// both CDFs are 1 by definition.
pub fn cdf_wasserstein(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() - 1 {
        let cp: f64 = p[..=i].iter().sum();
        let cq: f64 = q[..=i].iter().sum();
        total += (cp - cq).abs();
    }
    total
}

fn draw_counts(d: &[f64], n: usize, rng: &mut impl Rng) -> Vec<u64> {
    let mut counts = vec![0u64; d.len()];
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = d.len() - 1;
        for (i, &w) in d.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        counts[k] += 1;
    }
    counts
}

fn pair_mean(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let mut total = 0.0;
    for (i, &ca) in a.iter().enumerate() {
        for (j, &cb) in b.iter().enumerate() {
            total += (ca as f64) * (cb as f64) * (i as f64 - j as f64).abs();
        }
    }
    total / (na * nb)
}

/// Energy statistic of `n` draws from each distribution: every
/// expectation is the mean over all sample pairs.
pub fn monte_carlo_energy(p: &[f64], q: &[f64], n: usize, rng: &mut impl Rng) -> f64 {
    let x = draw_counts(p, n, rng);
    let y = draw_counts(q, n, rng);
    let radicand = 2.0 * pair_mean(&x, &y) - pair_mean(&x, &x) - pair_mean(&y, &y);
    radicand.max(0.0).sqrt()
}

pub fn random_distribution(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}
