//! Two-sample rank-sum test (Mann-Whitney U), exact by enumeration for
//! small pooled sizes, normal approximation with tie and continuity
//! corrections otherwise.

use crate::error::{Error, Result};
use statrs::distribution::{ContinuousCDF, Normal};

/// Pooled size at or below which the exact permutation path runs.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct RankSumResult {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub n1: usize,
    pub n2: usize,
    pub exact: bool,
}

/// Average ranks of the pooled samples, first-sample ranks first.
fn pooled_ranks(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len() + ys.len();
    let mut order: Vec<usize> = (0..n).collect();
    let value = |i: usize| if i < xs.len() { xs[i] } else { ys[i - xs.len()] };
    order.sort_by(|&a, &b| value(a).partial_cmp(&value(b)).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && value(order[j]) == value(order[i]) {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &slot in &order[i..j] {
            ranks[slot] = avg;
        }
        i = j;
    }
    ranks
}

fn u_statistic(ranks: &[f64], n1: usize) -> f64 {
    let r1: f64 = ranks[..n1].iter().sum();
    r1 - (n1 * (n1 + 1)) as f64 / 2.0
}

fn validate(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidConfig("rank_sum needs nonempty samples".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("rank_sum on non-finite values".into()));
    }
    Ok(())
}

/// Exact two-sided p by enumerating every assignment of pooled ranks to
/// the first sample: p = min(1, 2 * min(P(U' <= u), P(U' >= u))).
pub fn rank_sum_exact(xs: &[f64], ys: &[f64]) -> Result<RankSumResult> {
    validate(xs, ys)?;
    let (n1, n2) = (xs.len(), ys.len());
    let n = n1 + n2;
    if n > 24 {
        return Err(Error::InvalidConfig(format!(
            "exact rank_sum enumeration capped at pooled size 24, got {}",
            n
        )));
    }
    let ranks = pooled_ranks(xs, ys);
    let u_obs = u_statistic(&ranks, n1);
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;

    let mut count_le = 0u64;
    let mut count_ge = 0u64;
    let mut total = 0u64;
    // Lexicographic enumeration of n1-subsets of rank positions.
    let mut idx: Vec<usize> = (0..n1).collect();
    loop {
        let u = idx.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
        total += 1;
        if u <= u_obs + 1e-9 {
            count_le += 1;
        }
        if u >= u_obs - 1e-9 {
            count_ge += 1;
        }
        // Advance.
        let mut pos = n1;
        while pos > 0 {
            pos -= 1;
            if idx[pos] < n - (n1 - pos) {
                idx[pos] += 1;
                for k in pos + 1..n1 {
                    idx[k] = idx[k - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                let tail = count_le.min(count_ge) as f64;
                let p = (2.0 * tail / total as f64).min(1.0);
                return Ok(RankSumResult {
                    u: u_obs,
                    p,
                    n1,
                    n2,
                    exact: true,
                });
            }
        }
        if n1 == 0 {
            unreachable!("empty first sample rejected above");
        }
    }
}

/// Normal approximation with tie correction and a 0.5 continuity
/// correction toward the mean.
pub fn rank_sum_approx(xs: &[f64], ys: &[f64]) -> Result<RankSumResult> {
    validate(xs, ys)?;
    let (n1, n2) = (xs.len(), ys.len());
    let n = n1 + n2;
    let ranks = pooled_ranks(xs, ys);
    let u = u_statistic(&ranks, n1);
    let mean = (n1 * n2) as f64 / 2.0;

    // Tie correction from the multiplicities of pooled values.
    let mut pooled: Vec<f64> = xs.iter().chain(ys).cloned().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[j] == pooled[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let nf = n as f64;
    let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        // Continuity correction of half a lattice step toward the mean;
        // zero exactly at the center so the two-sided p caps at 1.
        let cc = if u > mean {
            0.5
        } else if u < mean {
            -0.5
        } else {
            0.0
        };
        let z = (u - mean - cc) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
    };
    Ok(RankSumResult {
        u,
        p,
        n1,
        n2,
        exact: false,
    })
}

/// Exact enumeration for small pooled sizes, normal approximation above.
pub fn rank_sum(xs: &[f64], ys: &[f64]) -> Result<RankSumResult> {
    if xs.len() + ys.len() <= EXACT_LIMIT {
        rank_sum_exact(xs, ys)
    } else {
        rank_sum_approx(xs, ys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: recursive subset enumeration with its own rank
    /// assignment, returning integer tail counts.
    fn oracle_exact(xs: &[f64], ys: &[f64]) -> (f64, f64) {
        let n1 = xs.len();
        let mut pooled: Vec<f64> = xs.iter().chain(ys).cloned().collect();
        let n = pooled.len();
        let mut sorted = pooled.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank_of = |v: f64| -> f64 {
            let lo = sorted.partition_point(|&x| x < v);
            let hi = sorted.partition_point(|&x| x <= v);
            (lo + 1 + hi) as f64 / 2.0
        };
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ranks: Vec<f64> = pooled.iter().map(|&v| rank_of(v)).collect();
        let u_obs: f64 =
            xs.iter().map(|&v| rank_of(v)).sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;

        fn rec(ranks: &[f64], start: usize, left: usize, acc: f64, out: &mut Vec<f64>) {
            if left == 0 {
                out.push(acc);
                return;
            }
            for i in start..=ranks.len() - left {
                rec(ranks, i + 1, left - 1, acc + ranks[i], out);
            }
        }
        let mut sums = Vec::new();
        rec(&ranks, 0, n1, 0.0, &mut sums);
        let offset = (n1 * (n1 + 1)) as f64 / 2.0;
        let total = sums.len() as f64;
        let le = sums.iter().filter(|&&s| s - offset <= u_obs + 1e-9).count() as f64;
        let ge = sums.iter().filter(|&&s| s - offset >= u_obs - 1e-9).count() as f64;
        let _ = n;
        (u_obs, (2.0 * le.min(ge) / total).min(1.0))
    }

    #[test]
    fn identical_multisets_p_one() {
        let xs = vec![3.0, 1.0, 2.0];
        let ys = vec![1.0, 2.0, 3.0];
        let r = rank_sum(&xs, &ys).unwrap();
        assert!(r.exact);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn fully_separated_three_vs_three() {
        let r = rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(r.exact);
        assert_eq!(r.u, 0.0);
        assert!((r.p - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn oracle_agreement_all_small_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for n1 in 1..=7usize {
            for n2 in 1..=7usize {
                if n1 + n2 > 8 {
                    continue;
                }
                for _ in 0..30 {
                    // Integer-ish values force frequent ties.
                    let xs: Vec<f64> = (0..n1).map(|_| rng.gen_range(0..5) as f64).collect();
                    let ys: Vec<f64> = (0..n2).map(|_| rng.gen_range(0..5) as f64).collect();
                    let mine = rank_sum_exact(&xs, &ys).unwrap();
                    let (u_oracle, p_oracle) = oracle_exact(&xs, &ys);
                    assert!((mine.u - u_oracle).abs() <= 1e-12);
                    assert!(
                        (mine.p - p_oracle).abs() <= 1e-12,
                        "n1={} n2={} xs={:?} ys={:?}: {} vs {}",
                        n1,
                        n2,
                        xs,
                        ys,
                        mine.p,
                        p_oracle
                    );
                }
            }
        }
    }

    #[test]
    fn approx_close_to_exact_at_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut worst = 0.0f64;
        for _ in 0..60 {
            let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let exact = rank_sum_exact(&xs, &ys).unwrap();
            let approx = rank_sum_approx(&xs, &ys).unwrap();
            worst = worst.max((exact.p - approx.p).abs());
        }
        assert!(worst <= 0.02, "worst exact-approx gap {}", worst);
    }

    #[test]
    fn u_bounded_by_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ys: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = rank_sum(&xs, &ys).unwrap();
            assert!(r.u >= 0.0 && r.u <= (r.n1 * r.n2) as f64);
            assert!((0.0..=1.0).contains(&r.p));
        }
    }

    #[test]
    fn null_p_values_roughly_uniform() {
        // 500 null experiments at n1=n2=200; the empirical CDF of p should
        // track the uniform within a loose Kolmogorov-Smirnov band.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut ps = Vec::with_capacity(500);
        for _ in 0..500 {
            let xs: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ys: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
            ps.push(rank_sum(&xs, &ys).unwrap().p);
        }
        ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, &p) in ps.iter().enumerate() {
            let ecdf_hi = (i + 1) as f64 / 500.0;
            let ecdf_lo = i as f64 / 500.0;
            ks = ks.max((ecdf_hi - p).abs()).max((p - ecdf_lo).abs());
        }
        assert!(ks <= 0.07, "KS distance to uniform {}", ks);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(rank_sum(&[], &[1.0]).is_err());
        assert!(rank_sum(&[1.0], &[]).is_err());
    }

    #[test]
    fn clear_separation_large_n_significant() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let ys: Vec<f64> = (0..100).map(|i| 2.0 + i as f64 * 0.01).collect();
        let r = rank_sum(&xs, &ys).unwrap();
        assert!(!r.exact);
        assert!(r.p < 1e-6);
    }
}
