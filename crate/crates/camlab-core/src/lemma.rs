//! Monte Carlo checks of the aggregator analysis under the residual-logit
//! model: the extreme-value approximation for the expected top competitor,
//! the variance comparison across aggregators, and the second-order
//! agreement between the smooth and mean baselines for peaked residuals.
//!
//! Trials partition across a fixed set of seeded streams and reduce in
//! partition order, so every estimate is byte-reproducible regardless of
//! thread count.

use crate::cam::{beta_of_competitors, Aggregator};
use crate::error::{Error, Result};
use crate::seeds;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualDistribution {
    Gaussian,
    Uniform,
    Logistic,
}

impl ResidualDistribution {
    pub fn name(self) -> &'static str {
        match self {
            ResidualDistribution::Gaussian => "gaussian",
            ResidualDistribution::Uniform => "uniform",
            ResidualDistribution::Logistic => "logistic",
        }
    }
}

/// The i.i.d. model of the non-target logits, plus an independent Gaussian
/// law for the target logit itself.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualModel {
    pub distribution: ResidualDistribution,
    pub mean: f64,
    pub std: f64,
    pub class_count: usize,
    pub true_logit_mean: f64,
    pub true_logit_std: f64,
    pub seed: u64,
}

impl ResidualModel {
    pub fn gaussian(mean: f64, std: f64, class_count: usize, seed: u64) -> ResidualModel {
        ResidualModel {
            distribution: ResidualDistribution::Gaussian,
            mean,
            std,
            class_count,
            true_logit_mean: 2.0,
            true_logit_std: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std <= 0.0 || self.true_logit_std < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "residual std must be positive, got {}",
                self.std
            )));
        }
        if self.class_count <= 2 {
            return Err(Error::InvalidConfig(format!(
                "residual model needs class_count > 2, got {}",
                self.class_count
            )));
        }
        Ok(())
    }

    fn sample_residual(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.distribution {
            ResidualDistribution::Gaussian => {
                Normal::new(self.mean, self.std).unwrap().sample(rng)
            }
            ResidualDistribution::Uniform => {
                let half_width = self.std * 3.0f64.sqrt();
                self.mean + rng.gen_range(-half_width..half_width)
            }
            ResidualDistribution::Logistic => {
                let scale = self.std * 3.0f64.sqrt() / std::f64::consts::PI;
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                self.mean + scale * (u / (1.0 - u)).ln()
            }
        }
    }

    fn sample_true_logit(&self, rng: &mut ChaCha8Rng) -> f64 {
        Normal::new(self.true_logit_mean, self.true_logit_std)
            .unwrap()
            .sample(rng)
    }
}

/// Mean plus its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Unbiased sample variance plus a distribution-free standard error
/// (from the fourth central moment).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpectedMaxReport {
    pub mc: MeanEstimate,
    /// The extreme-value closed form: mean + std * sqrt(2 ln(C-1)).
    pub closed_form: f64,
    /// |mc - closed| / closed, recorded so the validity regime is visible.
    pub relative_gap: f64,
}

/// Aggregate report of one (C, sigma) configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub trials: usize,
    pub class_count: usize,
    pub sigma: f64,
    pub distribution: ResidualDistribution,
    /// Per-aggregator mean and variance of the contrastive logit.
    pub delta: Vec<(Aggregator, VarianceEstimate)>,
    /// Per-aggregator variance of the baseline itself.
    pub beta: Vec<(Aggregator, VarianceEstimate)>,
    pub expected_max: ExpectedMaxReport,
}

const PARTITIONS: u64 = 64;
const MIN_TRIALS: usize = 1000;

/// Run `trials` seeded draws of `f`, partitioned for parallelism but
/// reduced in fixed order.
fn mc_samples<F>(seed: u64, stream: u64, trials: usize, f: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let base = trials / PARTITIONS as usize;
    let extra = trials % PARTITIONS as usize;
    let mut chunks: Vec<(u64, usize)> = Vec::new();
    for p in 0..PARTITIONS {
        let count = base + usize::from((p as usize) < extra);
        if count > 0 {
            chunks.push((p, count));
        }
    }
    chunks
        .into_par_iter()
        .map(|(p, count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, stream, p, 0));
            (0..count).map(|_| f(&mut rng)).collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

fn mean_estimate(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    MeanEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        trials: n,
    }
}

fn variance_estimate(xs: &[f64]) -> VarianceEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    let s2 = m2 * n / (n - 1.0);
    // Asymptotic variance of the sample variance.
    let var_of_s2 = ((m4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n).max(0.0);
    VarianceEstimate {
        mean,
        variance: s2,
        stderr: var_of_s2.sqrt(),
        trials: xs.len(),
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "estimates need at least {} trials, got {}",
            MIN_TRIALS, trials
        )));
    }
    Ok(())
}

/// Monte Carlo estimate of the expected top competitor logit, next to the
/// extreme-value closed form it approximates.
pub fn expected_max(rm: &ResidualModel, trials: usize) -> Result<ExpectedMaxReport> {
    rm.validate()?;
    check_trials(trials)?;
    let samples = mc_samples(rm.seed, 1, trials, |rng| {
        let mut best = f64::NEG_INFINITY;
        for _ in 0..rm.class_count - 1 {
            best = best.max(rm.sample_residual(rng));
        }
        best
    });
    let mc = mean_estimate(&samples);
    let closed_form = rm.mean + rm.std * (2.0 * ((rm.class_count - 1) as f64).ln()).sqrt();
    Ok(ExpectedMaxReport {
        mc,
        closed_form,
        relative_gap: (mc.mean - closed_form).abs() / closed_form.abs().max(1e-12),
    })
}

fn delta_samples(rm: &ResidualModel, agg: Aggregator, trials: usize) -> Vec<f64> {
    mc_samples(rm.seed, 2, trials, |rng| {
        let y_true = rm.sample_true_logit(rng);
        let comp: Vec<f64> = (0..rm.class_count - 1)
            .map(|_| rm.sample_residual(rng))
            .collect();
        y_true - beta_of_competitors(&comp, agg)
    })
}

/// Sample variance of the contrastive logit under fresh draws of both the
/// target logit and the competitor set.
pub fn delta_variance(rm: &ResidualModel, agg: Aggregator, trials: usize) -> Result<VarianceEstimate> {
    rm.validate()?;
    check_trials(trials)?;
    Ok(variance_estimate(&delta_samples(rm, agg, trials)))
}

/// Sample variance of the baseline itself (no target logit involved).
pub fn beta_variance(rm: &ResidualModel, agg: Aggregator, trials: usize) -> Result<VarianceEstimate> {
    rm.validate()?;
    check_trials(trials)?;
    let samples = mc_samples(rm.seed, 3, trials, |rng| {
        let comp: Vec<f64> = (0..rm.class_count - 1)
            .map(|_| rm.sample_residual(rng))
            .collect();
        beta_of_competitors(&comp, agg)
    });
    Ok(variance_estimate(&samples))
}

/// Mean absolute gap between the smooth and mean baselines on Gaussian
/// residuals; second-order theory puts it near sigma^2/2 for peaked draws.
pub fn lse_mean_gap(sigma: f64, class_count: usize, trials: usize, seed: u64) -> Result<MeanEstimate> {
    let rm = ResidualModel::gaussian(0.0, sigma, class_count, seed);
    rm.validate()?;
    check_trials(trials)?;
    let samples = mc_samples(seed, 4, trials, |rng| {
        let comp: Vec<f64> = (0..class_count - 1)
            .map(|_| rm.sample_residual(rng))
            .collect();
        (beta_of_competitors(&comp, Aggregator::Lse) - beta_of_competitors(&comp, Aggregator::Mean))
            .abs()
    });
    Ok(mean_estimate(&samples))
}

/// Run every estimator for one configuration.
pub fn run_report(rm: &ResidualModel, trials: usize) -> Result<McReport> {
    rm.validate()?;
    check_trials(trials)?;
    let mut delta = Vec::new();
    let mut beta = Vec::new();
    for agg in Aggregator::ALL {
        delta.push((agg, delta_variance(rm, agg, trials)?));
        beta.push((agg, beta_variance(rm, agg, trials)?));
    }
    Ok(McReport {
        trials,
        class_count: rm.class_count,
        sigma: rm.std,
        distribution: rm.distribution,
        delta,
        beta,
        expected_max: expected_max(rm, trials)?,
    })
}

/// The variance table as comma-separated text: aggregator, C, sigma,
/// variance, stderr.
pub fn variance_csv(reports: &[McReport]) -> String {
    let mut out = String::from("aggregator,C,sigma,variance,stderr\n");
    for report in reports {
        for (agg, est) in &report.delta {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                agg.name(),
                report.class_count,
                report.sigma,
                est.variance,
                est.stderr
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_determinism() {
        let rm = ResidualModel::gaussian(0.0, 1.0, 20, 99);
        let a = expected_max(&rm, 5000).unwrap();
        let b = expected_max(&rm, 5000).unwrap();
        assert_eq!(a.mc.mean.to_bits(), b.mc.mean.to_bits());
        let va = delta_variance(&rm, Aggregator::Lse, 5000).unwrap();
        let vb = delta_variance(&rm, Aggregator::Lse, 5000).unwrap();
        assert_eq!(va.variance.to_bits(), vb.variance.to_bits());
    }

    #[test]
    fn expected_max_degenerate_sigma() {
        let rm = ResidualModel::gaussian(1.5, 1e-6, 100, 3);
        let report = expected_max(&rm, 2000).unwrap();
        assert!((report.mc.mean - 1.5).abs() <= 1e-4);
        assert!((report.closed_form - 1.5).abs() <= 1e-4);
    }

    #[test]
    fn expected_max_small_c_gap_recorded() {
        // The closed form overshoots at small C; the report records the gap.
        let rm = ResidualModel::gaussian(0.0, 1.0, 3, 11);
        let report = expected_max(&rm, 20000).unwrap();
        // E[max of 2 std normals] = 1/sqrt(pi) ~ 0.5642.
        assert!((report.mc.mean - 0.5642).abs() <= 0.02);
        assert!(report.relative_gap > 0.3);
    }

    #[test]
    fn mean_baseline_variance_closed_form() {
        // Var[beta_mean] = sigma^2/(C-1).
        let rm = ResidualModel::gaussian(0.0, 2.0, 101, 5);
        let est = beta_variance(&rm, Aggregator::Mean, 30000).unwrap();
        let expect = 4.0 / 100.0;
        assert!(
            (est.variance - expect).abs() <= 0.1 * expect,
            "measured {} vs {}",
            est.variance,
            expect
        );
    }

    #[test]
    fn heavy_tail_regime_prefers_mean() {
        let rm = ResidualModel::gaussian(0.0, 3.0, 300, 21);
        let mean = delta_variance(&rm, Aggregator::Mean, 20000).unwrap();
        let max = delta_variance(&rm, Aggregator::Max, 20000).unwrap();
        let lse = delta_variance(&rm, Aggregator::Lse, 20000).unwrap();
        let margin_max = max.variance - mean.variance;
        let margin_lse = lse.variance - mean.variance;
        let se_max = (max.stderr * max.stderr + mean.stderr * mean.stderr).sqrt();
        let se_lse = (lse.stderr * lse.stderr + mean.stderr * mean.stderr).sqrt();
        assert!(margin_max > 5.0 * se_max, "{} vs {}", margin_max, se_max);
        assert!(margin_lse > 5.0 * se_lse, "{} vs {}", margin_lse, se_lse);
    }

    #[test]
    fn degenerate_residuals_equalize_aggregators() {
        let rm = ResidualModel::gaussian(0.5, 1e-6, 50, 8);
        let mean = delta_variance(&rm, Aggregator::Mean, 20000).unwrap();
        let max = delta_variance(&rm, Aggregator::Max, 20000).unwrap();
        let lse = delta_variance(&rm, Aggregator::Lse, 20000).unwrap();
        let se = |a: &VarianceEstimate, b: &VarianceEstimate| {
            (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
        };
        assert!((mean.variance - max.variance).abs() <= 2.0 * se(&mean, &max));
        assert!((mean.variance - lse.variance).abs() <= 2.0 * se(&mean, &lse));
    }

    #[test]
    fn lse_mean_gap_second_order() {
        let sigma = 0.05;
        let gap = lse_mean_gap(sigma, 50, 20000, 13).unwrap();
        let s2 = sigma * sigma;
        assert!(
            gap.mean >= 0.4 * s2 && gap.mean <= 0.6 * s2,
            "gap {} outside [{}, {}]",
            gap.mean,
            0.4 * s2,
            0.6 * s2
        );
        let half = lse_mean_gap(sigma / 2.0, 50, 20000, 13).unwrap();
        let ratio = gap.mean / half.mean;
        assert!((3.2..=4.8).contains(&ratio), "quadratic scaling ratio {}", ratio);
    }

    #[test]
    fn identical_competitors_zero_gap() {
        // LSE of constants is the constant exactly; the mean accumulates at
        // most an ulp of summation rounding.
        let comp = vec![1.7; 12];
        assert_eq!(beta_of_competitors(&comp, Aggregator::Lse), 1.7);
        let gap = beta_of_competitors(&comp, Aggregator::Lse)
            - beta_of_competitors(&comp, Aggregator::Mean);
        assert!(gap.abs() <= 1e-15);
    }

    #[test]
    fn per_trial_jensen_ordering() {
        let rm = ResidualModel::gaussian(0.0, 2.0, 40, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5000 {
            let comp: Vec<f64> = (0..rm.class_count - 1)
                .map(|_| rm.sample_residual(&mut rng))
                .collect();
            let mean = beta_of_competitors(&comp, Aggregator::Mean);
            let lse = beta_of_competitors(&comp, Aggregator::Lse);
            let max = beta_of_competitors(&comp, Aggregator::Max);
            assert!(mean <= lse && lse <= max);
        }
    }

    #[test]
    fn uniform_and_logistic_samplers_match_moments() {
        for dist in [ResidualDistribution::Uniform, ResidualDistribution::Logistic] {
            let rm = ResidualModel {
                distribution: dist,
                mean: 1.0,
                std: 0.7,
                class_count: 3,
                true_logit_mean: 0.0,
                true_logit_std: 0.0,
                seed: 4,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let n = 200000;
            let xs: Vec<f64> = (0..n).map(|_| rm.sample_residual(&mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            assert!((mean - 1.0).abs() <= 0.01, "{:?} mean {}", dist, mean);
            assert!((var.sqrt() - 0.7).abs() <= 0.01, "{:?} std {}", dist, var.sqrt());
        }
    }

    #[test]
    fn too_few_trials_rejected() {
        let rm = ResidualModel::gaussian(0.0, 1.0, 10, 1);
        assert!(expected_max(&rm, 10).is_err());
        assert!(ResidualModel::gaussian(0.0, 1.0, 2, 1).validate().is_err());
        assert!(ResidualModel::gaussian(0.0, 0.0, 10, 1).validate().is_err());
    }

    #[test]
    fn csv_has_per_aggregator_rows() {
        let rm = ResidualModel::gaussian(0.0, 1.0, 10, 6);
        let report = run_report(&rm, 2000).unwrap();
        let csv = variance_csv(&[report]);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "aggregator,C,sigma,variance,stderr");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("Mean,10,1,"));
    }
}
