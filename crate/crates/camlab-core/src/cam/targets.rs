//! Contrastive logit targets: the aggregators over non-target logits, the
//! contrastive difference they induce, and the tape subgraph that makes
//! either target differentiable.

use super::{Aggregator, TargetSpec};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// A logit vector together with its designated class. The competitor set
/// is every other entry.
#[derive(Debug, Clone)]
pub struct LogitVector {
    values: Vec<f64>,
    class: usize,
}

impl LogitVector {
    pub fn new(values: Vec<f64>, class: usize) -> Result<LogitVector> {
        if values.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "logit vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if class >= values.len() {
            return Err(Error::InvalidConfig(format!(
                "class {} out of range for {} logits",
                class,
                values.len()
            )));
        }
        Ok(LogitVector { values, class })
    }

    pub fn class_count(&self) -> usize {
        self.values.len()
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn target_logit(&self) -> f64 {
        self.values[self.class]
    }

    pub fn competitors(&self) -> Vec<f64> {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.class)
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Aggregate a competitor slice.
///
/// Mean averages, Max takes the largest, LSE is `log((1/(C-1)) sum exp)`
/// computed with the max-shift trick so huge logits cannot overflow.
pub fn beta_of_competitors(competitors: &[f64], agg: Aggregator) -> f64 {
    debug_assert!(!competitors.is_empty());
    match agg {
        Aggregator::Mean => competitors.iter().sum::<f64>() / competitors.len() as f64,
        Aggregator::Max => competitors.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Lse => {
            let m = competitors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean_exp = competitors.iter().map(|&v| (v - m).exp()).sum::<f64>()
                / competitors.len() as f64;
            m + mean_exp.ln()
        }
    }
}

/// Aggregate the non-target logits of a logit vector.
pub fn beta(logits: &LogitVector, agg: Aggregator) -> f64 {
    beta_of_competitors(&logits.competitors(), agg)
}

/// The contrastive logit: target logit minus the aggregated competitors.
pub fn delta(logits: &LogitVector, agg: Aggregator) -> f64 {
    logits.target_logit() - beta(logits, agg)
}

/// `delta` on a raw slice.
pub fn delta_of(values: &[f64], class: usize, agg: Aggregator) -> Result<f64> {
    Ok(delta(&LogitVector::new(values.to_vec(), class)?, agg))
}

/// Binary softmax probability of the first logit, computed two ways: via
/// max-shifted softmax and via the sigmoid of the logit difference. Both
/// are overflow-safe for any finite pair.
pub fn softmax_sigmoid_identity(logits: [f64; 2]) -> (f64, f64) {
    let [a, b] = logits;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let p_softmax = ea / (ea + eb);

    let d = a - b;
    let p_sigmoid = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    (p_softmax, p_sigmoid)
}

/// Append the target scalar to a tape holding a 1-D logits node.
///
/// For a contrastive target with two classes, all three aggregators reduce
/// to the plain logit difference bit-for-bit.
pub fn build_target(tape: &mut Tape, logits_id: NodeId, spec: &TargetSpec) -> Result<NodeId> {
    let class_count = tape.value(logits_id).numel();
    spec.validate(class_count)?;
    match spec {
        TargetSpec::SingleLogit(c) => {
            let picked = tape.gather(logits_id, &[*c])?;
            tape.reshape(picked, vec![])
        }
        TargetSpec::Contrastive(c, agg) => {
            let picked = tape.gather(logits_id, &[*c])?;
            let yc = tape.reshape(picked, vec![])?;
            let comp_idx: Vec<usize> = (0..class_count).filter(|i| i != c).collect();
            let comp = tape.gather(logits_id, &comp_idx)?;
            let inv = 1.0 / comp_idx.len() as f64;
            let beta_id = match agg {
                Aggregator::Mean => {
                    let s = tape.sum_all(comp)?;
                    tape.scale(s, inv)
                }
                Aggregator::Max => tape.max_over(comp, 0)?,
                Aggregator::Lse => {
                    let m = tape.max_over(comp, 0)?;
                    let z = tape.sub_bcast(comp, m)?;
                    let e = tape.exp(z);
                    let s = tape.sum_all(e)?;
                    let mean = tape.scale(s, inv);
                    let l = tape.log(mean);
                    tape.add(m, l)?
                }
            };
            tape.sub(yc, beta_id)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beta_examples() {
        let lv = LogitVector::new(vec![1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(beta(&lv, Aggregator::Mean), 2.5);
        assert_eq!(beta(&lv, Aggregator::Max), 3.0);

        let flat = LogitVector::new(vec![0.0, 0.0, 0.0], 0).unwrap();
        assert!(beta(&flat, Aggregator::Lse).abs() <= 1e-15);
    }

    #[test]
    fn delta_three_class_mean() {
        let (y1, y2, y3) = (1.7, -0.4, 2.2);
        let lv = LogitVector::new(vec![y1, y2, y3], 0).unwrap();
        let expect = y1 - (y2 + y3) / 2.0;
        assert!((delta(&lv, Aggregator::Mean) - expect).abs() <= 1e-15);
    }

    #[test]
    fn delta_binary_all_aggregators() {
        let (a, b) = (0.9, -1.3);
        for agg in Aggregator::ALL {
            let lv = LogitVector::new(vec![a, b], 0).unwrap();
            assert_eq!(delta(&lv, agg), a - b);
        }
    }

    #[test]
    fn delta_equal_competitors() {
        let lv = LogitVector::new(vec![5.0, 1.0, 1.0, 1.0], 0).unwrap();
        for agg in Aggregator::ALL {
            assert!((delta(&lv, agg) - 4.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_sigmoid_pointwise() {
        let (s, g) = softmax_sigmoid_identity([0.0, 0.0]);
        assert_eq!(s, 0.5);
        assert_eq!(g, 0.5);

        let (s, g) = softmax_sigmoid_identity([3.0, 1.0]);
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((s - expect).abs() <= 1e-15);
        assert!((g - expect).abs() <= 1e-15);
        assert!((expect - 0.880797).abs() <= 1e-6);

        let (s, g) = softmax_sigmoid_identity([1000.0, 0.0]);
        assert!(s.is_finite() && g.is_finite());
        assert!((s - g).abs() <= 1e-12);
    }

    #[test]
    fn softmax_sigmoid_identity_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let pair = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            let (s, g) = softmax_sigmoid_identity(pair);
            worst = worst.max((s - g).abs());
        }
        assert!(worst <= 1e-12, "worst gap {}", worst);
    }

    #[test]
    fn jensen_ordering_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &c in &[3usize, 10, 100] {
            for _ in 0..2000 {
                let comp: Vec<f64> = (0..c - 1).map(|_| rng.gen_range(-8.0..8.0)).collect();
                let mean = beta_of_competitors(&comp, Aggregator::Mean);
                let lse = beta_of_competitors(&comp, Aggregator::Lse);
                let max = beta_of_competitors(&comp, Aggregator::Max);
                assert!(mean <= lse && lse <= max, "{} {} {}", mean, lse, max);
            }
        }
    }

    #[test]
    fn jensen_equality_only_when_all_equal() {
        let comp = vec![2.5; 6];
        let mean = beta_of_competitors(&comp, Aggregator::Mean);
        let lse = beta_of_competitors(&comp, Aggregator::Lse);
        let max = beta_of_competitors(&comp, Aggregator::Max);
        assert!((mean - lse).abs() <= 1e-12 && (lse - max).abs() <= 1e-12);

        let comp = vec![2.5, 2.5, 2.6];
        assert!(beta_of_competitors(&comp, Aggregator::Mean) < beta_of_competitors(&comp, Aggregator::Lse));
        assert!(beta_of_competitors(&comp, Aggregator::Lse) < beta_of_competitors(&comp, Aggregator::Max));
    }

    #[test]
    fn delta_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let values: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let shift = rng.gen_range(-20.0..20.0);
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            for agg in Aggregator::ALL {
                let d0 = delta_of(&values, 2, agg).unwrap();
                let d1 = delta_of(&shifted, 2, agg).unwrap();
                assert!((d0 - d1).abs() <= 1e-12, "{:?}: {} vs {}", agg, d0, d1);
            }
        }
    }

    #[test]
    fn inflating_a_competitor_decreases_delta() {
        let values = vec![3.0, 1.0, 0.5, -0.2, 2.0];
        let class = 0;
        // Large inflation beats the running max, so all three aggregators
        // move strictly; Mean moves by exactly t/(C-1).
        let m = 3;
        let t = 4.0;
        let mut inflated = values.clone();
        inflated[m] += t;
        for agg in Aggregator::ALL {
            let before = delta_of(&values, class, agg).unwrap();
            let after = delta_of(&inflated, class, agg).unwrap();
            assert!(after < before, "{:?}", agg);
        }
        let before = delta_of(&values, class, Aggregator::Mean).unwrap();
        let after = delta_of(&inflated, class, Aggregator::Mean).unwrap();
        assert!((before - after - t / 4.0).abs() <= 1e-12);

        // Small inflation below the max: Mean and LSE still move strictly.
        let t = 0.1;
        let mut inflated = values.clone();
        inflated[m] += t;
        for agg in [Aggregator::Mean, Aggregator::Lse] {
            let before = delta_of(&values, class, agg).unwrap();
            let after = delta_of(&inflated, class, agg).unwrap();
            assert!(after < before, "{:?}", agg);
        }
    }

    #[test]
    fn tape_target_matches_pure_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let values: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let class = rng.gen_range(0..6);
            for agg in Aggregator::ALL {
                let mut tape = Tape::new();
                let logits = tape.leaf(Tensor::from_vec(values.clone()));
                let t = build_target(&mut tape, logits, &TargetSpec::Contrastive(class, agg)).unwrap();
                let pure = delta_of(&values, class, agg).unwrap();
                assert!((tape.value(t).item() - pure).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tape_contrastive_gradient_matches_finite_differences() {
        // A random 3-class linear head: logits = W x + b, target delta^0.
        use crate::tape::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let point = Tensor::from_vec((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for agg in Aggregator::ALL {
            let w = w.clone();
            let b = b.clone();
            let report = finite_diff_check(
                move |tape, x| {
                    let wn = tape.leaf(Tensor::new(vec![3, 4], w.clone())?);
                    let bn = tape.leaf(Tensor::from_vec(b.clone()));
                    let logits = tape.dense(x, wn, bn)?;
                    build_target(tape, logits, &TargetSpec::Contrastive(0, agg))
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_error <= 1e-6,
                "{:?}: rel err {}",
                agg,
                report.max_rel_error
            );
        }
    }
}
