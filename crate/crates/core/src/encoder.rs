//! Hierarchical feature abstraction over region pyramids.
//!
//! Features climb three levels: each group's points produce a per-scale
//! feature, the T scale features of a region collapse to a region feature,
//! and the M region features collapse to the cloud-level feature. Every
//! level runs the same recipe: optional self-attention, a shared per-row
//! MLP, then a column max pool.

use crate::autodiff::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RegionPyramid};
use crate::model::{AttnIds, Bound, LayerIds, Model};

/// Attention maps snapshotted during a forward pass, for inspection and
/// summaries. Every map is row-stochastic: row `j` holds the mixing weights
/// of output `j`, so a column sum is the total influence of one input row.
#[derive(Debug, Clone, Default)]
pub struct AttentionMaps {
    /// One `K_t x K_t` map per (region, scale), region-major.
    pub point: Vec<Vec<Mat>>,
    /// One `T x T` map per region.
    pub scale: Vec<Mat>,
    /// One `M x M` map.
    pub region: Option<Mat>,
}

pub struct EncoderOutput {
    /// Per-(region, scale) features, each `1 x D`.
    pub scale_features: Vec<Vec<NodeId>>,
    /// Per-region features, each `1 x D`.
    pub region_features: Vec<NodeId>,
    /// Cloud-level feature, `1 x D_global`.
    pub global: NodeId,
    /// Populated only when map retention is requested.
    pub attention: AttentionMaps,
}

/// Self-attention over the rows of `x`:
/// project to `f`, `g`, `h`; form pairwise scores `s = f g^T`; normalize
/// each score column to a distribution; mix `h` rows by those weights; and
/// concatenate the mixed features onto the input. Disabled blocks pass `x`
/// through untouched.
///
/// Returns the output node and, when `retain` is set, a snapshot of the
/// normalized map in output-major orientation: entry `[j][i]` weights row
/// `i`'s contribution to mixed row `j`, so each retained row is a
/// distribution and column sums measure per-row influence.
pub fn self_attention_block(
    tape: &mut Tape,
    bound: &Bound,
    ids: Option<&AttnIds>,
    x: NodeId,
    retain: bool,
) -> (NodeId, Option<Mat>) {
    let Some(ids) = ids else {
        return (x, None);
    };
    let wf = bound.node(ids.wf);
    let wg = bound.node(ids.wg);
    let wh = bound.node(ids.wh);
    let f = tape.matmul(x, wf);
    let g = tape.matmul(x, wg);
    let h = tape.matmul(x, wh);
    let s = tape.matmul_nt(f, g);
    let map = tape.softmax_cols(s);
    let r = tape.matmul_tn(map, h);
    let snapshot = retain.then(|| tape.value(map).transpose());
    let o = tape.concat_cols(&[x, r]);
    (o, snapshot)
}

/// Shared per-row MLP: affine layers with a relu after each.
pub fn mlp_forward(tape: &mut Tape, bound: &Bound, layers: &[LayerIds], mut x: NodeId) -> NodeId {
    for layer in layers {
        let w = bound.node(layer.w);
        let b = bound.node(layer.b);
        let z = tape.matmul(x, w);
        let zb = tape.add_row(z, b);
        x = tape.relu(zb);
    }
    x
}

/// Per-row MLP followed by a column max pool, collapsing the rows into one
/// feature vector.
pub fn aggregate(tape: &mut Tape, bound: &Bound, layers: &[LayerIds], x: NodeId) -> NodeId {
    let features = mlp_forward(tape, bound, layers, x);
    tape.max_pool_rows(features)
}

/// Full hierarchical encoding of one cloud.
pub fn encode(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    cloud: &PointCloud,
    pyramid: &RegionPyramid,
    retain_maps: bool,
) -> Result<EncoderOutput> {
    let cfg = &model.config;
    if cloud.len() != cfg.points_per_cloud {
        return Err(Error::shape(format!(
            "cloud has {} points, model expects {}",
            cloud.len(),
            cfg.points_per_cloud
        )));
    }
    if pyramid.num_regions() != cfg.num_regions || pyramid.scales != cfg.scales {
        return Err(Error::shape(format!(
            "pyramid ({} regions, scales {:?}) does not match model ({}, {:?})",
            pyramid.num_regions(),
            pyramid.scales,
            cfg.num_regions,
            cfg.scales
        )));
    }

    let mut attention = AttentionMaps::default();
    let mut scale_features = Vec::with_capacity(cfg.num_regions);
    let mut region_features = Vec::with_capacity(cfg.num_regions);

    for m in 0..cfg.num_regions {
        let centroid = cloud.points[pyramid.centroid_indices[m]];
        let mut per_scale = Vec::with_capacity(cfg.num_scales());
        let mut point_maps = Vec::new();
        for t in 0..cfg.num_scales() {
            let mut pts = pyramid.gather(cloud, m, t);
            if cfg.centroid_relative {
                for p in &mut pts {
                    for k in 0..3 {
                        p[k] -= centroid[k];
                    }
                }
            }
            let x = tape.constant(Mat::from_points(&pts));
            let (o, map) =
                self_attention_block(tape, bound, model.ids.point_attn.as_ref(), x, retain_maps);
            if let Some(map) = map {
                point_maps.push(map);
            }
            per_scale.push(aggregate(tape, bound, &model.ids.point_mlp, o));
        }
        if !point_maps.is_empty() {
            attention.point.push(point_maps);
        }

        let stacked = tape.concat_rows(&per_scale);
        let (o, map) =
            self_attention_block(tape, bound, model.ids.scale_attn.as_ref(), stacked, retain_maps);
        if let Some(map) = map {
            attention.scale.push(map);
        }
        region_features.push(aggregate(tape, bound, &model.ids.scale_mlp, o));
        scale_features.push(per_scale);
    }

    let stacked = tape.concat_rows(&region_features);
    let (o, map) =
        self_attention_block(tape, bound, model.ids.region_attn.as_ref(), stacked, retain_maps);
    attention.region = map;
    let global = aggregate(tape, bound, &model.ids.region_mlp, o);

    Ok(EncoderOutput {
        scale_features,
        region_features,
        global,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{farthest_point_sample, knn_group};
    use crate::model::ModelConfig;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        PointCloud::new(format!("cloud-{seed}"), points)
    }

    fn pyramid_for(model: &Model, cloud: &PointCloud, seed: u64) -> RegionPyramid {
        let centroids =
            farthest_point_sample(cloud, model.config.num_regions, seed).unwrap();
        knn_group(cloud, &centroids, &model.config.scales).unwrap()
    }

    /// Direct loop evaluation of the attention equations, independent of the
    /// tape operations.
    fn attention_oracle(x: &Mat, wf: &Mat, wg: &Mat, wh: &Mat) -> Mat {
        let d1 = x.rows();
        let c = wf.cols();
        let proj = |w: &Mat| {
            let mut out = vec![vec![0.0; c]; d1];
            for i in 0..d1 {
                for j in 0..c {
                    for k in 0..x.cols() {
                        out[i][j] += x[(i, k)] * w[(k, j)];
                    }
                }
            }
            out
        };
        let f = proj(wf);
        let g = proj(wg);
        let h = proj(wh);
        // s[i][j] = f_i . g_j; beta_{j,i} = exp(s[i][j]) / sum_i exp(s[i][j])
        let mut beta = vec![vec![0.0; d1]; d1];
        for j in 0..d1 {
            let mut denom = 0.0;
            for i in 0..d1 {
                let s: f64 = (0..c).map(|k| f[i][k] * g[j][k]).sum();
                beta[j][i] = s.exp();
                denom += beta[j][i];
            }
            for i in 0..d1 {
                beta[j][i] /= denom;
            }
        }
        // r_j = sum_i beta_{j,i} h_i; output row j = x_j concat r_j
        let mut out = Mat::zeros(d1, x.cols() + c);
        for j in 0..d1 {
            for k in 0..x.cols() {
                out[(j, k)] = x[(j, k)];
            }
            for k in 0..c {
                let mut r = 0.0;
                for i in 0..d1 {
                    r += beta[j][i] * h[i][k];
                }
                out[(j, x.cols() + k)] = r;
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn attention_block_matches_equation_oracle() {
        // Tiny standalone model so the block has parameters to use.
        let model = Model::new(ModelConfig::toy(42)).unwrap();
        let ids = model.ids.point_attn.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..100 {
            let rows = rng.random_range(2..7);
            let x = Mat::uniform(rows, 3, 1.0, &mut rng);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let (o, map) = self_attention_block(&mut tape, &bound, Some(&ids), xn, true);
            let expected = attention_oracle(
                &x,
                model.store.mat(ids.wf),
                model.store.mat(ids.wg),
                model.store.mat(ids.wh),
            );
            let got = tape.value(o);
            assert_eq!(got.shape(), expected.shape());
            for i in 0..got.rows() {
                for j in 0..got.cols() {
                    assert!(
                        rel_err(got[(i, j)], expected[(i, j)]) < 1e-10,
                        "trial {trial} mismatch at ({i},{j})"
                    );
                }
            }
            // Rows of the retained map are distributions.
            let map = map.unwrap();
            for i in 0..map.rows() {
                let s: f64 = map.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_score_weights_give_uniform_attention() {
        let mut model = Model::new(ModelConfig::toy(1)).unwrap();
        let ids = model.ids.point_attn.unwrap();
        let c = model.config.attention_channels();
        model.store.set_mat(ids.wf, Mat::zeros(3, c));
        model.store.set_mat(ids.wg, Mat::zeros(3, c));
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::uniform(5, 3, 1.0, &mut rng);
        let xn = tape.constant(x.clone());
        let (o, map) = self_attention_block(&mut tape, &bound, Some(&ids), xn, true);
        let map = map.unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((map[(i, j)] - 0.2).abs() < 1e-15, "map not uniform");
            }
        }
        // With uniform weights every mixed row is the column mean of h.
        let h = x.matmul(model.store.mat(ids.wh));
        let mean = h.sum_rows().scale(1.0 / 5.0);
        let v = tape.value(o);
        for j in 0..5 {
            for k in 0..c {
                assert!(rel_err(v[(j, 3 + k)], mean[(0, k)]) < 1e-12);
            }
        }
    }

    #[test]
    fn identical_rows_produce_identical_outputs() {
        let model = Model::new(ModelConfig::toy(3)).unwrap();
        let ids = model.ids.point_attn.unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let row = vec![0.3, -0.7, 0.5];
        let x = tape.constant(Mat::from_rows(&[row.clone(), row.clone(), row]));
        let (o, _) = self_attention_block(&mut tape, &bound, Some(&ids), x, false);
        let v = tape.value(o);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
    }

    #[test]
    fn disabled_block_is_identity() {
        let model = Model::new(ModelConfig::toy(4)).unwrap();
        let mut tape = Tape::new();
        let _bound = model.bind(&mut tape);
        let x = tape.constant(Mat::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let (o, map) = self_attention_block(&mut tape, &_bound, None, x, true);
        assert_eq!(o, x);
        assert!(map.is_none());
    }

    #[test]
    fn aggregate_single_row_is_the_mlp_of_that_row() {
        let model = Model::new(ModelConfig::toy(5)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row = Mat::uniform(1, 4, 1.0, &mut rng);
        let x = tape.constant(row.clone());
        let agg = aggregate(&mut tape, &bound, &model.ids.point_mlp, x);
        let mlp_only = mlp_forward(&mut tape, &bound, &model.ids.point_mlp, x);
        assert_eq!(tape.value(agg).data(), tape.value(mlp_only).data());

        // Duplicated rows pool to the same feature.
        let dup = tape.constant(Mat::from_rows(&[
            row.row(0).to_vec(),
            row.row(0).to_vec(),
            row.row(0).to_vec(),
        ]));
        let agg_dup = aggregate(&mut tape, &bound, &model.ids.point_mlp, dup);
        assert_eq!(tape.value(agg_dup).data(), tape.value(agg).data());
    }

    #[test]
    fn encode_shape_contract_at_default_size() {
        let model = Model::new(ModelConfig::desk(0)).unwrap();
        let cloud = random_cloud(256, 7);
        let pyramid = pyramid_for(&model, &cloud, 0);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = encode(&model, &mut tape, &bound, &cloud, &pyramid, true).unwrap();
        assert_eq!(out.scale_features.len(), 32);
        for per_scale in &out.scale_features {
            assert_eq!(per_scale.len(), 4);
            for &f in per_scale {
                assert_eq!(tape.shape(f), (1, 64));
            }
        }
        assert_eq!(out.region_features.len(), 32);
        for &f in &out.region_features {
            assert_eq!(tape.shape(f), (1, 64));
        }
        assert_eq!(tape.shape(out.global), (1, 256));
        // Retained maps: per-(region, scale) point maps, per-region scale
        // maps, one region map.
        assert_eq!(out.attention.point.len(), 32);
        assert_eq!(out.attention.point[0].len(), 4);
        assert_eq!(out.attention.point[0][1].shape(), (8, 8));
        assert_eq!(out.attention.scale.len(), 32);
        assert_eq!(out.attention.scale[0].shape(), (4, 4));
        assert_eq!(out.attention.region.as_ref().unwrap().shape(), (32, 32));
    }

    #[test]
    fn encode_without_retention_keeps_no_maps() {
        let model = Model::new(ModelConfig::toy(0)).unwrap();
        let cloud = random_cloud(64, 8);
        let pyramid = pyramid_for(&model, &cloud, 0);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = encode(&model, &mut tape, &bound, &cloud, &pyramid, false).unwrap();
        assert!(out.attention.point.is_empty());
        assert!(out.attention.scale.is_empty());
        assert!(out.attention.region.is_none());
    }

    #[test]
    fn bias_only_network_reaches_a_closed_form_global() {
        // Zero weights block all input flow; relu(bias) propagates through
        // each level, so the global feature is relu of the region-MLP bias.
        let mut zeroed = Model::new(ModelConfig::toy(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for i in 0..zeroed.store.len() {
            let (rows, cols) = zeroed.store.mat(i).shape();
            let name = zeroed.store.name(i).to_string();
            if name.starts_with("enc.") && name.ends_with(".b") {
                zeroed
                    .store
                    .set_mat(i, Mat::uniform(rows, cols, 1.0, &mut rng));
            } else {
                zeroed.store.set_mat(i, Mat::zeros(rows, cols));
            }
        }
        let cloud = random_cloud(64, 9);
        let pyramid = pyramid_for(&zeroed, &cloud, 0);
        let mut tape = Tape::new();
        let bound = zeroed.bind(&mut tape);
        let out = encode(&zeroed, &mut tape, &bound, &cloud, &pyramid, false).unwrap();
        let region_bias = zeroed.store.mat(zeroed.ids.region_mlp[0].b);
        let got = tape.value(out.global);
        for j in 0..got.cols() {
            assert_eq!(got[(0, j)], region_bias[(0, j)].max(0.0));
        }
    }

    #[test]
    fn within_group_permutation_leaves_scale_features_unchanged() {
        let model = Model::new(ModelConfig::toy(2)).unwrap();
        let cloud = random_cloud(64, 10);
        let pyramid = pyramid_for(&model, &cloud, 0);

        let mut shuffled = pyramid.clone();
        // Reverse the non-centroid tail of every group; keeps group contents.
        for groups in &mut shuffled.groups {
            for g in groups.iter_mut() {
                g[1..].reverse();
            }
        }

        let run = |pyr: &RegionPyramid| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let out = encode(&model, &mut tape, &bound, &cloud, pyr, false).unwrap();
            let feats: Vec<Vec<f64>> = out
                .scale_features
                .iter()
                .flat_map(|per_scale| {
                    per_scale
                        .iter()
                        .map(|&f| tape.value(f).data().to_vec())
                        .collect::<Vec<_>>()
                })
                .collect();
            feats
        };
        let base = run(&pyramid);
        let perm = run(&shuffled);
        for (a, b) in base.iter().zip(&perm) {
            for (x, y) in a.iter().zip(b) {
                assert!(
                    (x - y).abs() < 1e-12,
                    "scale feature moved under within-group permutation"
                );
            }
        }
    }

    #[test]
    fn encode_rejects_mismatched_inputs() {
        let model = Model::new(ModelConfig::toy(0)).unwrap();
        let cloud = random_cloud(64, 11);
        let wrong_cloud = random_cloud(32, 11);
        let pyramid = pyramid_for(&model, &cloud, 0);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        assert!(encode(&model, &mut tape, &bound, &wrong_cloud, &pyramid, false).is_err());
        let mut bad = pyramid.clone();
        bad.scales = vec![4, 9];
        assert!(encode(&model, &mut tape, &bound, &cloud, &bad, false).is_err());
    }
}
