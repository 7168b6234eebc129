//! The experiment protocols: saliency-similarity and susceptibility
//! studies, accuracy and runtime measurement, significance testing, and
//! report plumbing.

mod export;
mod stats;

pub use export::{
    color_ramp, read_csv_rows, render_heatmap, report_from_json, write_csv, write_json,
};
pub use stats::{rank_sum, rank_sum_approx, rank_sum_exact, RankSumResult, EXACT_LIMIT};

use crate::cam::{self, Aggregator, CamMethod, SaliencyMap, TargetSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub model_id: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairTest {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub seed: u64,
    /// Echo of the effective configuration the run used.
    pub config: Vec<(String, String)>,
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<Aggregate>,
    pub tests: Vec<PairTest>,
}

fn compute_aggregates(rows: &[MetricRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for row in rows {
        let key = (row.method.clone(), row.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, metric)| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            Aggregate {
                method,
                metric,
                mean,
                std,
                n,
            }
        })
        .collect()
}

impl ExperimentReport {
    pub fn new(
        kind: &str,
        seed: u64,
        config: Vec<(String, String)>,
        rows: Vec<MetricRow>,
        tests: Vec<PairTest>,
    ) -> ExperimentReport {
        let aggregates = compute_aggregates(&rows);
        ExperimentReport {
            kind: kind.into(),
            seed,
            config,
            rows,
            aggregates,
            tests,
        }
    }

    /// Recompute aggregates from the raw rows and compare.
    pub fn verify_aggregates(&self) -> Result<()> {
        let fresh = compute_aggregates(&self.rows);
        if fresh.len() != self.aggregates.len() {
            return Err(Error::Format("aggregate group count drifted".into()));
        }
        for (a, b) in self.aggregates.iter().zip(&fresh) {
            if a.method != b.method
                || a.metric != b.metric
                || a.n != b.n
                || (a.mean - b.mean).abs() > 1e-12
                || (a.std - b.std).abs() > 1e-12
            {
                return Err(Error::Format(format!(
                    "aggregate for {}/{} does not match its rows",
                    a.method, a.metric
                )));
            }
        }
        Ok(())
    }

    pub fn aggregate(&self, method: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.metric == metric)
    }

    pub fn values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn test_for(&self, a: &str, b: &str) -> Option<&PairTest> {
        self.tests
            .iter()
            .find(|t| (t.method_a == a && t.method_b == b) || (t.method_a == b && t.method_b == a))
    }
}

/// Mean squared difference between two normalized maps of the same grid.
pub fn mse(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if a.normalized.shape() != b.normalized.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: a.normalized.shape().to_vec(),
            rhs: b.normalized.shape().to_vec(),
        });
    }
    let n = a.normalized.numel() as f64;
    Ok(a.normalized
        .data()
        .iter()
        .zip(b.normalized.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Top-1 accuracy over a dataset.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("accuracy of empty dataset".into()));
    }
    let hits: Vec<bool> = dataset
        .images
        .par_iter()
        .zip(&dataset.labels)
        .map(|(image, &label)| Ok(model.predict(image)? == label))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairedAccuracy {
    pub plain: f64,
    pub sham: f64,
    pub gap: f64,
}

/// Accuracy of both training regimes on the same dataset.
pub fn paired_accuracy_report(
    plain: &Model,
    shammed: &Model,
    dataset: &Dataset,
) -> Result<PairedAccuracy> {
    let a = accuracy(plain, dataset)?;
    let b = accuracy(shammed, dataset)?;
    Ok(PairedAccuracy {
        plain: a,
        sham: b,
        gap: (a - b).abs(),
    })
}

fn image_id(i: usize) -> String {
    format!("img_{:04}", i)
}

fn architectures_match(a: &Model, b: &Model) -> bool {
    let (ca, cb) = (&a.config, &b.config);
    ca.input_size == cb.input_size
        && ca.input_channels == cb.input_channels
        && ca.conv_widths == cb.conv_widths
        && ca.cam_size == cb.cam_size
        && ca.class_count == cb.class_count
}

/// For each image: the difference-logit maps against their plain-target
/// baselines, per aggregator, for both the first-order and higher-order
/// families. Pairwise significance of Mean against the other aggregators.
pub fn similarity_study(
    model: &Model,
    dataset: &Dataset,
    aggregators: &[Aggregator],
    model_id: &str,
    seed: u64,
) -> Result<ExperimentReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("similarity study on empty dataset".into()));
    }
    const METRIC: &str = "similarity_mse";
    let per_image: Vec<Vec<MetricRow>> = dataset
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let class = argmax(model.logits(image)?.data());
            let base = cam::gradcam(model, image, &TargetSpec::SingleLogit(class))?;
            let base_pp = cam::gradcam_pp(model, image, &TargetSpec::SingleLogit(class))?;
            let mut rows = Vec::with_capacity(aggregators.len() * 2);
            for &agg in aggregators {
                let target = TargetSpec::Contrastive(class, agg);
                let dgc = cam::gradcam(model, image, &target)?;
                rows.push(MetricRow {
                    image_id: image_id(i),
                    model_id: model_id.into(),
                    method: CamMethod::DiffGradCam(agg).name(),
                    metric: METRIC.into(),
                    value: mse(&dgc, &base)?,
                });
                let dgc_pp = cam::gradcam_pp(model, image, &target)?;
                rows.push(MetricRow {
                    image_id: image_id(i),
                    model_id: model_id.into(),
                    method: CamMethod::DiffGradCamPp(agg).name(),
                    metric: METRIC.into(),
                    value: mse(&dgc_pp, &base_pp)?,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricRow> = per_image.into_iter().flatten().collect();

    let mut tests = Vec::new();
    if aggregators.contains(&Aggregator::Mean) {
        for &other in aggregators.iter().filter(|&&a| a != Aggregator::Mean) {
            for family in [
                |a: Aggregator| CamMethod::DiffGradCam(a),
                |a: Aggregator| CamMethod::DiffGradCamPp(a),
            ] {
                let name_a = family(Aggregator::Mean).name();
                let name_b = family(other).name();
                let xs: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == name_a)
                    .map(|r| r.value)
                    .collect();
                let ys: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == name_b)
                    .map(|r| r.value)
                    .collect();
                let rs = rank_sum(&xs, &ys)?;
                tests.push(PairTest {
                    method_a: name_a,
                    method_b: name_b,
                    metric: METRIC.into(),
                    u: rs.u,
                    p: rs.p,
                    exact: rs.exact,
                });
            }
        }
    }
    let config = vec![
        ("model_id".into(), model_id.into()),
        ("images".into(), dataset.len().to_string()),
        (
            "aggregators".into(),
            aggregators
                .iter()
                .map(|a| a.name())
                .collect::<Vec<_>>()
                .join("+"),
        ),
    ];
    Ok(ExperimentReport::new("similarity", seed, config, rows, tests))
}

/// For each image and method: the MSE between the maps the clean and the
/// fooled model produce, targeting the clean model's prediction. The most
/// robust method is rank-sum tested against every other, and the
/// contrastive-vs-baseline pairs are always included.
pub fn susceptibility_study(
    clean: &Model,
    fooled: &Model,
    dataset: &Dataset,
    methods: &[CamMethod],
    model_id: &str,
    seed: u64,
) -> Result<ExperimentReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig(
            "susceptibility study on empty dataset".into(),
        ));
    }
    if !architectures_match(clean, fooled) {
        return Err(Error::InvalidConfig(
            "clean and fooled models have different architectures".into(),
        ));
    }
    const METRIC: &str = "susceptibility_mse";
    let per_image: Vec<Vec<MetricRow>> = dataset
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let class = argmax(clean.logits(image)?.data());
            let mut rows = Vec::with_capacity(methods.len());
            for &method in methods {
                let map_clean = cam::compute(clean, image, method, class)?;
                let map_fooled = cam::compute(fooled, image, method, class)?;
                rows.push(MetricRow {
                    image_id: image_id(i),
                    model_id: model_id.into(),
                    method: method.name(),
                    metric: METRIC.into(),
                    value: mse(&map_clean, &map_fooled)?,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricRow> = per_image.into_iter().flatten().collect();

    let aggregates = compute_aggregates(&rows);
    let best = aggregates
        .iter()
        .min_by(|a, b| a.mean.partial_cmp(&b.mean).unwrap())
        .map(|a| a.method.clone())
        .unwrap();

    let mut pairs: Vec<(String, String)> = methods
        .iter()
        .map(|m| m.name())
        .filter(|name| *name != best)
        .map(|name| (best.clone(), name))
        .collect();
    for (a, b) in [
        (
            CamMethod::DiffGradCam(Aggregator::Mean).name(),
            CamMethod::GradCam.name(),
        ),
        (
            CamMethod::DiffGradCamPp(Aggregator::Mean).name(),
            CamMethod::GradCamPp.name(),
        ),
    ] {
        let have_both = methods.iter().any(|m| m.name() == a) && methods.iter().any(|m| m.name() == b);
        let dup = pairs
            .iter()
            .any(|(x, y)| (x == &a && y == &b) || (x == &b && y == &a));
        if have_both && !dup {
            pairs.push((a, b));
        }
    }

    let mut tests = Vec::new();
    for (a, b) in pairs {
        let xs: Vec<f64> = rows.iter().filter(|r| r.method == a).map(|r| r.value).collect();
        let ys: Vec<f64> = rows.iter().filter(|r| r.method == b).map(|r| r.value).collect();
        let rs = rank_sum(&xs, &ys)?;
        tests.push(PairTest {
            method_a: a,
            method_b: b,
            metric: METRIC.into(),
            u: rs.u,
            p: rs.p,
            exact: rs.exact,
        });
    }
    let config = vec![
        ("model_id".into(), model_id.into()),
        ("images".into(), dataset.len().to_string()),
        ("methods".into(), methods.len().to_string()),
    ];
    Ok(ExperimentReport::new(
        "susceptibility",
        seed,
        config,
        rows,
        tests,
    ))
}

/// Wall-clock per-map cost of each method: `n` runs, first `discard`
/// dropped, one row per kept run.
pub fn runtime_bench(
    model: &Model,
    image: &Tensor,
    methods: &[CamMethod],
    n: usize,
    discard: usize,
    model_id: &str,
    seed: u64,
) -> Result<ExperimentReport> {
    if n <= discard {
        return Err(Error::InvalidConfig(format!(
            "bench needs n > discard, got n={} discard={}",
            n, discard
        )));
    }
    let class = argmax(model.logits(image)?.data());
    let mut rows = Vec::new();
    for &method in methods {
        let mut kept = Vec::with_capacity(n - discard);
        for run in 0..n {
            let start = Instant::now();
            let map = cam::compute(model, image, method, class)?;
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            // Touch the output so the measured call cannot collapse.
            debug_assert!(map.normalized.numel() > 0);
            if run >= discard {
                kept.push(elapsed_ms);
            }
        }
        for (run, ms) in kept.into_iter().enumerate() {
            rows.push(MetricRow {
                image_id: format!("run_{:03}", run + discard),
                model_id: model_id.into(),
                method: method.name(),
                metric: "runtime_ms".into(),
                value: ms,
            });
        }
    }
    let config = vec![
        ("model_id".into(), model_id.into()),
        ("n".into(), n.to_string()),
        ("discard".into(), discard.to_string()),
    ];
    Ok(ExperimentReport::new("runtime", seed, config, rows, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GlyphFamily, SyntheticSpec};
    use crate::model::ModelConfig;

    fn toy_setup(classes: usize) -> (Model, Dataset) {
        let mut spec = SyntheticSpec::new(classes, GlyphFamily::Geometric, 3);
        spec.train_per_class = 1;
        spec.val_per_class = 1;
        spec.test_per_class = 2;
        let splits = generate(&spec).unwrap();
        let model =
            Model::build(ModelConfig::new(classes, 5).with_widths(vec![8, 12, 12])).unwrap();
        (model, splits.test)
    }

    fn map_of(values: Vec<f64>, shape: &[usize]) -> SaliencyMap {
        SaliencyMap::new(
            Tensor::new(shape.to_vec(), values).unwrap(),
            CamMethod::GradCam,
            None,
        )
    }

    #[test]
    fn mse_basics() {
        let a = map_of(vec![0.0, 0.5, 1.0, 0.25], &[2, 2]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);

        // Normalization maps the all-zero and all-one rasters to zeros and
        // a 0/1 checkerboard to itself.
        let zeros = map_of(vec![0.0; 4], &[2, 2]);
        let checker = map_of(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]);
        let inverse = map_of(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(mse(&checker, &inverse).unwrap(), 1.0);
        assert_eq!(mse(&checker, &zeros).unwrap(), 0.5);

        let bad = map_of(vec![0.0; 9], &[3, 3]);
        assert!(mse(&a, &bad).is_err());
        assert!((mse(&a, &checker).unwrap() - mse(&checker, &a).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn accuracy_chance_level_on_constant_logits() {
        let (mut model, data) = toy_setup(4);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        // All logits zero: argmax is class 0, balanced data gives 1/C.
        let acc = accuracy(&model, &data).unwrap();
        assert!((acc - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn binary_collapse_in_similarity_rows() {
        let (model, data) = toy_setup(2);
        let report =
            similarity_study(&model, &data, &Aggregator::ALL, "toy", 1).unwrap();
        report.verify_aggregates().unwrap();
        let mean_rows = report.values("MeanDiffGradCAM", "similarity_mse");
        for other in ["MaxDiffGradCAM", "LSEDiffGradCAM"] {
            assert_eq!(mean_rows, report.values(other, "similarity_mse"));
        }
    }

    #[test]
    fn similarity_single_image_cardinality() {
        let (model, mut data) = toy_setup(3);
        data.images.truncate(1);
        data.labels.truncate(1);
        if let Some(masks) = &mut data.masks {
            masks.truncate(1);
        }
        let report = similarity_study(&model, &data, &Aggregator::ALL, "toy", 1).unwrap();
        // One row per aggregator per family.
        assert_eq!(report.rows.len(), 6);
    }

    #[test]
    fn susceptibility_identity_is_zero() {
        let (model, data) = toy_setup(3);
        let methods = CamMethod::all();
        let report =
            susceptibility_study(&model, &model, &data, &methods, "toy", 2).unwrap();
        assert!(report.rows.iter().all(|r| r.value == 0.0));
        // Contrastive-vs-baseline pairs are always reported.
        assert!(report.test_for("MeanDiffGradCAM", "GradCAM").is_some());
        assert!(report.test_for("MeanDiffGradCAM++", "GradCAM++").is_some());
    }

    #[test]
    fn susceptibility_rejects_architecture_mismatch() {
        let (model, data) = toy_setup(3);
        let other =
            Model::build(ModelConfig::new(3, 5).with_widths(vec![8, 12, 16])).unwrap();
        assert!(susceptibility_study(&model, &other, &data, &[CamMethod::GradCam], "x", 0).is_err());
    }

    #[test]
    fn eigencam_rows_ignore_target_class() {
        let (model, data) = toy_setup(3);
        let image = &data.images[0];
        let a = cam::compute(&model, image, CamMethod::EigenCam, 0).unwrap();
        let b = cam::compute(&model, image, CamMethod::EigenCam, 2).unwrap();
        assert_eq!(a.normalized.data(), b.normalized.data());
    }

    #[test]
    fn bench_honors_discard() {
        let (model, data) = toy_setup(3);
        let report = runtime_bench(
            &model,
            &data.images[0],
            &[CamMethod::GradCam, CamMethod::HiResCam],
            7,
            2,
            "toy",
            0,
        )
        .unwrap();
        let gradcam_runs = report.values("GradCAM", "runtime_ms");
        assert_eq!(gradcam_runs.len(), 5);
        assert!(report.rows.iter().all(|r| r.value >= 0.0));
        assert!(runtime_bench(&model, &data.images[0], &[CamMethod::GradCam], 2, 2, "t", 0).is_err());
    }

    #[test]
    fn aggregates_match_rows_to_1e12() {
        let (model, data) = toy_setup(3);
        let report = similarity_study(&model, &data, &[Aggregator::Mean], "toy", 1).unwrap();
        report.verify_aggregates().unwrap();
        let agg = report.aggregate("MeanDiffGradCAM", "similarity_mse").unwrap();
        let values = report.values("MeanDiffGradCAM", "similarity_mse");
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((agg.mean - mean).abs() <= 1e-12);
    }

    #[test]
    fn paired_accuracy_gap() {
        let (model, data) = toy_setup(3);
        let report = paired_accuracy_report(&model, &model, &data).unwrap();
        assert_eq!(report.gap, 0.0);
        assert_eq!(report.plain, report.sham);
    }
}
