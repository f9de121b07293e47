//! Downstream tasks on a frozen model: linear-SVM classification over
//! global features, same-label retrieval with mAP and PR curves, upsampling
//! through the dense local reconstruction, and attention summaries.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape};
use crate::dataset::Sample;
use crate::decoder::{self, InterpolationConfig};
use crate::encoder;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_group, PointCloud};
use crate::model::Model;
use crate::parallel;

/// Pyramid sampling seed shared by every evaluation path, so features are a
/// pure function of (cloud, parameters).
pub const EVAL_PYRAMID_SEED: u64 = 0;

#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    /// One row per cloud, `global_dim` columns.
    pub features: Mat,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

fn encode_global(model: &Model, cloud: &PointCloud) -> Result<Vec<f64>> {
    let centroids = farthest_point_sample(cloud, model.config.num_regions, EVAL_PYRAMID_SEED)?;
    let pyramid = knn_group(cloud, &centroids, &model.config.scales)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = encoder::encode(model, &mut tape, &bound, cloud, &pyramid, false)?;
    Ok(tape.value(enc.global).data().to_vec())
}

/// One global feature per sample; items run concurrently, output order is
/// input order.
pub fn extract_features(model: &Model, samples: &[&Sample]) -> Result<FeatureTable> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to featurize"));
    }
    for s in samples {
        if s.cloud.len() != model.config.points_per_cloud {
            return Err(Error::Checkpoint(format!(
                "model expects {} points per cloud, sample {} has {}",
                model.config.points_per_cloud,
                s.cloud.id,
                s.cloud.len()
            )));
        }
    }
    let rows: Vec<Result<Vec<f64>>> =
        parallel::map_indices(samples.len(), |i| encode_global(model, &samples[i].cloud));
    let mut features = Mat::zeros(samples.len(), model.config.global_dim);
    for (i, row) in rows.into_iter().enumerate() {
        features.row_mut(i).copy_from_slice(&row?);
    }
    Ok(FeatureTable {
        ids: samples.iter().map(|s| s.cloud.id.clone()).collect(),
        labels: samples.iter().map(|s| s.label.clone()).collect(),
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub regularization: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            regularization: 1e-3,
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
        }
    }
}

/// One-vs-rest linear classifiers over standardized features. Prediction is
/// the argmax margin; ties resolve to the lower class index.
#[derive(Debug, Clone)]
pub struct LinearSvm {
    pub classes: Vec<String>,
    /// One weight row per class.
    pub weights: Mat,
    pub biases: Vec<f64>,
    /// Column standardization learned from the training table.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LinearSvm {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        let z = self.standardize(features);
        (0..self.classes.len())
            .map(|c| {
                let w = self.weights.row(c);
                w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + self.biases[c]
            })
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let scores = self.scores(features);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        best
    }

    pub fn predict_label(&self, features: &[f64]) -> &str {
        &self.classes[self.predict(features)]
    }

    pub fn accuracy(&self, table: &FeatureTable) -> f64 {
        let hits = (0..table.len())
            .filter(|&i| self.predict_label(table.row(i)) == table.labels[i])
            .count();
        hits as f64 / table.len() as f64
    }
}

/// Seeded stochastic subgradient descent on the hinge loss with L2 penalty,
/// one binary problem per class. Classes train concurrently; each problem's
/// sample order comes from its own seeded stream.
pub fn train_linear_svm(table: &FeatureTable, config: SvmConfig) -> Result<LinearSvm> {
    let mut classes: Vec<String> = table.labels.clone();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let n = table.len();
    let d = table.dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(table.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let dv = table.row(i)[j] - mean[j];
            std[j] += dv * dv / n as f64;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-9);
    }
    let standardized: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            table
                .row(i)
                .iter()
                .zip(mean.iter().zip(&std))
                .map(|(&v, (&m, &s))| (v - m) / s)
                .collect()
        })
        .collect();

    let trained: Vec<(Vec<f64>, f64)> = parallel::map_indices(classes.len(), |c| {
        let targets: Vec<f64> = table
            .labels
            .iter()
            .map(|l| if *l == classes[c] { 1.0 } else { -1.0 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (c as u64) << 32);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let lr = config.learning_rate / (1.0 + 0.01 * epoch as f64);
            for &i in &order {
                let x = &standardized[i];
                let y = targets[i];
                let margin = y * (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b);
                for (wj, &xj) in w.iter_mut().zip(x) {
                    let hinge = if margin < 1.0 { -y * xj } else { 0.0 };
                    *wj -= lr * (hinge + 2.0 * config.regularization * *wj);
                }
                if margin < 1.0 {
                    b -= lr * -y;
                }
            }
        }
        (w, b)
    });

    let mut weights = Mat::zeros(classes.len(), d);
    let mut biases = Vec::with_capacity(classes.len());
    for (c, (w, b)) in trained.into_iter().enumerate() {
        weights.row_mut(c).copy_from_slice(&w);
        biases.push(b);
    }
    Ok(LinearSvm {
        classes,
        weights,
        biases,
        mean,
        std,
    })
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Per query, all other row indices by ascending feature distance.
    pub rankings: Vec<Vec<usize>>,
    /// Per query; None when the query has no same-label item to find.
    pub average_precision: Vec<Option<f64>>,
    pub map: f64,
    /// (recall, precision) averaged over queries at each rank depth.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Rank every row against every other by Euclidean feature distance and
/// score same-label retrieval.
pub fn retrieval_map(table: &FeatureTable) -> Result<RetrievalResult> {
    let n = table.len();
    if n < 2 {
        return Err(Error::invalid("retrieval needs at least two rows"));
    }
    let rankings: Vec<Vec<usize>> = parallel::map_indices(n, |q| {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&i| i != q)
            .map(|i| {
                let d2: f64 = table
                    .row(q)
                    .iter()
                    .zip(table.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, i)
            })
            .collect();
        others.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).expect("finite distances"));
        others.into_iter().map(|(_, i)| i).collect()
    });

    let mut average_precision = Vec::with_capacity(n);
    for q in 0..n {
        let relevant = rankings[q]
            .iter()
            .filter(|&&i| table.labels[i] == table.labels[q])
            .count();
        if relevant == 0 {
            average_precision.push(None);
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in rankings[q].iter().enumerate() {
            if table.labels[i] == table.labels[q] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        average_precision.push(Some(ap / relevant as f64));
    }
    let scored: Vec<f64> = average_precision.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::invalid("no query has a relevant item"));
    }
    let map = scored.iter().sum::<f64>() / scored.len() as f64;

    let depth = n - 1;
    let mut pr_curve = Vec::with_capacity(depth);
    for rank in 0..depth {
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut queries = 0usize;
        for q in 0..n {
            let relevant = rankings[q]
                .iter()
                .filter(|&&i| table.labels[i] == table.labels[q])
                .count();
            if relevant == 0 {
                continue;
            }
            queries += 1;
            let hits = rankings[q][..=rank]
                .iter()
                .filter(|&&i| table.labels[i] == table.labels[q])
                .count();
            precision += hits as f64 / (rank + 1) as f64;
            recall += hits as f64 / relevant as f64;
        }
        pr_curve.push((recall / queries as f64, precision / queries as f64));
    }
    Ok(RetrievalResult {
        rankings,
        average_precision,
        map,
        pr_curve,
    })
}

/// Reconstructed per-scale areas of every region, pooled into one cloud of
/// `M * sum(K_t)` points.
pub fn dense_reconstruction(model: &Model, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    let centroids = farthest_point_sample(cloud, model.config.num_regions, seed)?;
    let pyramid = knn_group(cloud, &centroids, &model.config.scales)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = encoder::encode(model, &mut tape, &bound, cloud, &pyramid, false)?;
    let cents: Vec<[f64; 3]> = centroids.iter().map(|&i| cloud.points[i]).collect();
    let dec = decoder::decode(
        model,
        &mut tape,
        &bound,
        enc.global,
        &enc.region_features,
        &cents,
        InterpolationConfig::default(),
    )?;
    let mut points = Vec::with_capacity(model.config.num_regions * model.config.sum_scales());
    for region_areas in &dec.areas {
        for &area in region_areas {
            points.extend(tape.value(area).to_points());
        }
    }
    Ok(PointCloud::new(format!("{}-dense", cloud.id), points))
}

/// Upsample by decoding the overlapping local areas into a dense pool, then
/// farthest-point downsampling to exactly `target_n` points.
pub fn upsample(model: &Model, cloud: &PointCloud, target_n: usize, seed: u64) -> Result<PointCloud> {
    let pool_size = model.config.num_regions * model.config.sum_scales();
    if target_n > pool_size {
        return Err(Error::invalid(format!(
            "target {target_n} exceeds the dense pool of {pool_size} points"
        )));
    }
    let dense = dense_reconstruction(model, cloud, EVAL_PYRAMID_SEED)?;
    let picked = farthest_point_sample(&dense, target_n, seed)?;
    let points = picked.iter().map(|&i| dense.points[i]).collect();
    Ok(PointCloud::new(format!("{}-up{target_n}", cloud.id), points))
}

/// Column sums of a square attention map.
pub fn attention_summary(map: &Mat) -> Result<Vec<f64>> {
    if map.rows() != map.cols() {
        return Err(Error::shape(format!(
            "attention map must be square, got {}x{}",
            map.rows(),
            map.cols()
        )));
    }
    let mut sums = vec![0.0; map.cols()];
    for i in 0..map.rows() {
        for (s, v) in sums.iter_mut().zip(map.row(i)) {
            *s += v;
        }
    }
    Ok(sums)
}

pub fn features_csv(table: &FeatureTable) -> String {
    let mut out = String::from("id,label");
    for j in 1..=table.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..table.len() {
        let _ = write!(out, "{},{}", table.ids[i], table.labels[i]);
        for v in table.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn pr_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("recall,precision\n");
    for &(r, p) in curve {
        let _ = writeln!(out, "{r},{p}");
    }
    out
}

/// Headerless comma matrix, one row per line.
pub fn matrix_csv(m: &Mat) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Reconstruction artifacts of one cloud: the decoded cloud plus, per
/// scale, the areas of all regions pooled together.
pub fn reconstruct_cloud(
    model: &Model,
    cloud: &PointCloud,
) -> Result<(PointCloud, Vec<PointCloud>)> {
    let centroids = farthest_point_sample(cloud, model.config.num_regions, EVAL_PYRAMID_SEED)?;
    let pyramid = knn_group(cloud, &centroids, &model.config.scales)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = encoder::encode(model, &mut tape, &bound, cloud, &pyramid, false)?;
    let cents: Vec<[f64; 3]> = centroids.iter().map(|&i| cloud.points[i]).collect();
    let dec = decoder::decode(
        model,
        &mut tape,
        &bound,
        enc.global,
        &enc.region_features,
        &cents,
        InterpolationConfig::default(),
    )?;
    let recon = PointCloud::new(
        format!("{}-recon", cloud.id),
        tape.value(dec.cloud).to_points(),
    );
    let mut per_scale = Vec::with_capacity(model.config.num_scales());
    for t in 0..model.config.num_scales() {
        let mut points = Vec::with_capacity(model.config.num_regions * model.config.scales[t]);
        for region_areas in &dec.areas {
            points.extend(tape.value(region_areas[t]).to_points());
        }
        per_scale.push(PointCloud::new(format!("{}-scale{t}", cloud.id), points));
    }
    Ok((recon, per_scale))
}

/// Forward pass that keeps the attention maps of one cloud.
pub fn attention_of(model: &Model, cloud: &PointCloud) -> Result<encoder::AttentionMaps> {
    let centroids = farthest_point_sample(cloud, model.config.num_regions, EVAL_PYRAMID_SEED)?;
    let pyramid = knn_group(cloud, &centroids, &model.config.scales)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = encoder::encode(model, &mut tape, &bound, cloud, &pyramid, true)?;
    Ok(enc.attention)
}

/// Chamfer distance from fixed reference points, shared by reporting paths.
pub fn chamfer_to(reference: &PointCloud, cloud: &PointCloud) -> Result<f64> {
    crate::geometry::chamfer_distance(reference, cloud)
}

/// Random cloud drawn uniformly from the unit ball; the upsampling baseline.
pub fn uniform_ball_cloud(n: usize, seed: u64) -> PointCloud {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let p = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            points.push(p);
        }
    }
    PointCloud::new(format!("ball-{seed}"), points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::fixtures;
    use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};

    fn toy_table() -> FeatureTable {
        FeatureTable {
            ids: (0..4).map(|i| format!("s{i}")).collect(),
            labels: vec!["a".into(), "a".into(), "b".into(), "b".into()],
            features: Mat::from_rows(&[
                vec![0.0, 0.0],
                vec![0.1, 0.0],
                vec![1.0, 1.0],
                vec![1.1, 1.0],
            ]),
        }
    }

    #[test]
    fn extract_features_contract() {
        let model = Model::new(ModelConfig::toy(1)).unwrap();
        let cloud = fixtures::overfit_cloud(64, 5);
        let a = Sample {
            cloud: cloud.clone(),
            label: "x".into(),
            split: Split::Train,
        };
        let mut dup = a.clone();
        dup.cloud.id = "copy".into();
        let table = extract_features(&model, &[&a, &dup]).unwrap();
        assert_eq!(table.dim(), model.config.global_dim);
        assert_eq!(table.len(), 2);
        assert_eq!(table.row(0), table.row(1));

        let again = extract_features(&model, &[&a, &dup]).unwrap();
        assert_eq!(table.features.data(), again.features.data());
    }

    #[test]
    fn extract_features_survives_checkpoint_round_trip() {
        let model = Model::new(ModelConfig::toy(2)).unwrap();
        let cloud = fixtures::overfit_cloud(64, 6);
        let sample = Sample {
            cloud,
            label: "x".into(),
            split: Split::Train,
        };
        let before = extract_features(&model, &[&sample]).unwrap();
        let path = std::env::temp_dir().join("pcae-eval-ckpt.pcae");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let after = extract_features(&loaded, &[&sample]).unwrap();
        assert_eq!(before.features.data(), after.features.data());
    }

    #[test]
    fn extract_features_rejects_size_mismatch() {
        let model = Model::new(ModelConfig::toy(3)).unwrap();
        let sample = Sample {
            cloud: fixtures::overfit_cloud(32, 7),
            label: "x".into(),
            split: Split::Train,
        };
        assert!(matches!(
            extract_features(&model, &[&sample]),
            Err(Error::Checkpoint(_))
        ));
    }

    fn blob_table(per_class: usize) -> FeatureTable {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (label, center) in [("left", [-2.0, 0.0]), ("right", [2.0, 1.0])] {
            for i in 0..per_class {
                ids.push(format!("{label}{i}"));
                labels.push(label.to_string());
                rows.push(vec![
                    center[0] + rng.random_range(-0.5..0.5),
                    center[1] + rng.random_range(-0.5..0.5),
                ]);
            }
        }
        FeatureTable {
            ids,
            labels,
            features: Mat::from_rows(&rows),
        }
    }

    #[test]
    fn svm_separates_blobs() {
        let table = blob_table(20);
        let svm = train_linear_svm(&table, SvmConfig::default()).unwrap();
        assert_eq!(svm.classes.len(), 2);
        assert_eq!(svm.accuracy(&table), 1.0);
    }

    #[test]
    fn svm_identical_features_fall_back_to_majority() {
        // Majority class sorts after the minority one, so a majority win is
        // not a tie-break artifact.
        let n = 9;
        let table = FeatureTable {
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            labels: (0..n)
                .map(|i| if i < 6 { "zebra".into() } else { "ant".into() })
                .collect(),
            features: Mat::from_rows(&vec![vec![0.5, -0.25, 3.0]; n]),
        };
        let svm = train_linear_svm(&table, SvmConfig::default()).unwrap();
        let acc = svm.accuracy(&table);
        assert!((acc - 6.0 / 9.0).abs() < 1e-12, "accuracy {acc}");
    }

    #[test]
    fn svm_one_classifier_per_class_and_tie_breaks_low() {
        let table = FeatureTable {
            ids: (0..6).map(|i| format!("s{i}")).collect(),
            labels: vec![
                "a".into(),
                "b".into(),
                "c".into(),
                "a".into(),
                "b".into(),
                "c".into(),
            ],
            features: Mat::from_rows(&[
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.1, 0.1],
                vec![0.9, 0.1],
                vec![0.1, 0.9],
            ]),
        };
        let svm = train_linear_svm(&table, SvmConfig::default()).unwrap();
        assert_eq!(svm.classes, vec!["a", "b", "c"]);
        assert_eq!(svm.weights.rows(), 3);

        // A manually built classifier with all-equal scores predicts class 0.
        let tied = LinearSvm {
            classes: vec!["a".into(), "b".into(), "c".into()],
            weights: Mat::zeros(3, 2),
            biases: vec![0.7, 0.7, 0.7],
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        assert_eq!(tied.predict(&[5.0, -3.0]), 0);
    }

    #[test]
    fn svm_argmax_ignores_positive_score_scaling() {
        let table = blob_table(10);
        let svm = train_linear_svm(&table, SvmConfig::default()).unwrap();
        let mut scaled = svm.clone();
        scaled.weights = scaled.weights.scale(3.0);
        for b in &mut scaled.biases {
            *b *= 3.0;
        }
        for i in 0..table.len() {
            assert_eq!(svm.predict(table.row(i)), scaled.predict(table.row(i)));
        }
    }

    #[test]
    fn svm_rejects_single_class() {
        let table = FeatureTable {
            ids: vec!["a".into(), "b".into()],
            labels: vec!["same".into(), "same".into()],
            features: Mat::from_rows(&[vec![0.0], vec![1.0]]),
        };
        assert!(train_linear_svm(&table, SvmConfig::default()).is_err());
    }

    #[test]
    fn retrieval_single_label_is_perfect() {
        let mut table = toy_table();
        table.labels = vec!["x".into(); 4];
        let r = retrieval_map(&table).unwrap();
        assert_eq!(r.map, 1.0);
        for (recall, precision) in r.pr_curve {
            assert!(precision == 1.0 && recall > 0.0);
        }
    }

    #[test]
    fn retrieval_hand_computed_ap() {
        // Query 0 at the origin: ranked others are 1 (d=0.1, label a),
        // 2 (d~1.41, b), 3 (d~1.49, b). One relevant item at rank 1: AP = 1.
        // Query 2: ranked 3 (0.1, b), 1 (~1.35, a), 0 (~1.41, a): AP = 1.
        // Symmetric for the rest, so mAP = 1 despite mixed labels.
        let table = toy_table();
        let r = retrieval_map(&table).unwrap();
        assert_eq!(r.rankings[0], vec![1, 2, 3]);
        assert_eq!(r.rankings[2], vec![3, 1, 0]);
        assert_eq!(r.average_precision[0], Some(1.0));
        assert_eq!(r.map, 1.0);

        // Push 1 away so query 0 ranks it last: AP = 1/3.
        let mut spread = table.clone();
        spread.features.row_mut(1).copy_from_slice(&[5.0, 5.0]);
        let r = retrieval_map(&spread).unwrap();
        assert_eq!(r.rankings[0], vec![2, 3, 1]);
        assert_eq!(r.average_precision[0], Some(1.0 / 3.0));
    }

    #[test]
    fn retrieval_excludes_queries_without_relevant_items() {
        let mut table = toy_table();
        table.labels = vec!["a".into(), "a".into(), "b".into(), "c".into()];
        let r = retrieval_map(&table).unwrap();
        assert_eq!(r.average_precision[2], None);
        assert_eq!(r.average_precision[3], None);
        let expected = (r.average_precision[0].unwrap() + r.average_precision[1].unwrap()) / 2.0;
        assert_eq!(r.map, expected);
    }

    #[test]
    fn retrieval_rankings_survive_feature_rotation() {
        let table = blob_table(8);
        let before = retrieval_map(&table).unwrap();
        // Rotate every feature row by a fixed angle.
        let (s, c) = (0.6f64.sin(), 0.6f64.cos());
        let mut rotated = table.clone();
        for i in 0..rotated.len() {
            let [x, y] = [rotated.row(i)[0], rotated.row(i)[1]];
            rotated
                .features
                .row_mut(i)
                .copy_from_slice(&[c * x - s * y, s * x + c * y]);
        }
        let after = retrieval_map(&rotated).unwrap();
        assert_eq!(before.rankings, after.rankings);
        assert!((before.map - after.map).abs() < 1e-12);
    }

    #[test]
    fn upsample_contract() {
        let model = Model::new(ModelConfig::toy(5)).unwrap();
        let cloud = fixtures::overfit_cloud(64, 11);
        let pool = model.config.num_regions * model.config.sum_scales();
        assert_eq!(pool, 96);

        let up = upsample(&model, &cloud, 50, 3).unwrap();
        assert_eq!(up.points.len(), 50);

        // Every output point comes from the dense pool.
        let dense = dense_reconstruction(&model, &cloud, EVAL_PYRAMID_SEED).unwrap();
        assert_eq!(dense.points.len(), pool);
        for p in &up.points {
            assert!(dense.points.iter().any(|q| q == p));
        }

        assert!(upsample(&model, &cloud, pool + 1, 3).is_err());
    }

    #[test]
    fn attention_summary_examples() {
        let map = Mat::from_rows(&[vec![0.2, 0.7], vec![0.8, 0.3]]);
        assert_eq!(attention_summary(&map).unwrap(), vec![1.0, 1.0]);

        let uniform = Mat::from_vec(3, 3, vec![1.0 / 3.0; 9]);
        let sums = attention_summary(&uniform).unwrap();
        assert!(sums.iter().all(|&s| (s - 1.0).abs() < 1e-12));

        let wide = Mat::zeros(2, 3);
        assert!(matches!(attention_summary(&wide), Err(Error::Shape(_))));
    }

    #[test]
    fn csv_formats() {
        let table = toy_table();
        let f = features_csv(&table);
        assert!(f.starts_with("id,label,f1,f2\n"));
        assert!(f.contains("s0,a,0,0\n"));
        assert_eq!(f.lines().count(), 5);

        let pr = pr_csv(&[(0.5, 1.0), (1.0, 0.75)]);
        assert_eq!(pr, "recall,precision\n0.5,1\n1,0.75\n");
    }

    #[test]
    fn uniform_ball_stays_in_the_ball() {
        let cloud = uniform_ball_cloud(200, 4);
        assert_eq!(cloud.points.len(), 200);
        for p in &cloud.points {
            assert!(p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 + 1e-12);
        }
        assert_eq!(uniform_ball_cloud(200, 4).points, cloud.points);
    }
}
