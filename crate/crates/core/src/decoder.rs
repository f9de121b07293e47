//! Local-to-global reconstruction.
//!
//! The global feature is spread back to regions by a distance-based scaling,
//! fused with the encoder's region features through a skip link, unrolled
//! into per-scale area features by a recurrent layer, and turned into points
//! by per-scale affine heads plus one cloud-level affine map.

use crate::autodiff::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Bound, Model};

/// Constants of the global-to-region interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationConfig {
    /// Numerator constant of the distance weight.
    pub c: f64,
    /// Lower clamp on the squared distance, guarding centroids at the
    /// origin.
    pub epsilon: f64,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig {
            c: 1e-10,
            epsilon: 1e-12,
        }
    }
}

pub struct DecoderOutput {
    /// Fused per-region features, each `1 x D`.
    pub region_features: Vec<NodeId>,
    /// Per-(region, scale) area features, each `1 x D`.
    pub area_features: Vec<Vec<NodeId>>,
    /// Reconstructed per-(region, scale) point sets, each `K_t x 3`.
    pub areas: Vec<Vec<NodeId>>,
    /// Flattened `1 x 3K_t` versions of the same areas in (region-major,
    /// scale-minor) order, the exact operand order of the cloud-level map.
    pub area_flats: Vec<NodeId>,
    /// Reconstructed cloud, `N x 3`.
    pub cloud: NodeId,
}

/// Scale the global feature into one feature row per region centroid:
/// `l_m = (c / max(|p_m|^2, epsilon)) * g`, with distances measured from the
/// origin (the centroid of a normalized cloud).
pub fn interpolate_regions(
    tape: &mut Tape,
    global: NodeId,
    centroids: &[[f64; 3]],
    config: InterpolationConfig,
) -> Result<NodeId> {
    if centroids.is_empty() {
        return Err(Error::invalid("no centroids to interpolate to"));
    }
    let rows: Vec<NodeId> = centroids
        .iter()
        .map(|p| {
            let d2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            let w = config.c / d2.max(config.epsilon);
            tape.scale(global, w)
        })
        .collect();
    Ok(tape.concat_rows(&rows))
}

/// Concatenate interpolated and encoder region features row-wise and project
/// to `M x D` through the fuse MLP.
pub fn fuse_skip(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    interp: NodeId,
    encoder_regions: NodeId,
) -> Result<NodeId> {
    let (mi, _) = tape.shape(interp);
    let (me, _) = tape.shape(encoder_regions);
    if mi != me {
        return Err(Error::shape(format!(
            "interpolated rows {mi} != encoder region rows {me}"
        )));
    }
    let cat = tape.concat_cols(&[interp, encoder_regions]);
    Ok(crate::encoder::mlp_forward(
        tape,
        bound,
        &model.ids.fuse_mlp,
        cat,
    ))
}

/// Feed `T` copies of a region feature through the recurrent cell and map
/// each hidden state to an area feature.
pub fn rnn_decode_region(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    region_feature: NodeId,
) -> Vec<NodeId> {
    let hidden = model.config.global_dim;
    let wx = bound.node(model.ids.lstm_wx);
    let wh = bound.node(model.ids.lstm_wh);
    let b = bound.node(model.ids.lstm_b);
    let head = bound.node(model.ids.head_w);
    let mut h = tape.constant(Mat::zeros(1, hidden));
    let mut c = tape.constant(Mat::zeros(1, hidden));
    let mut out = Vec::with_capacity(model.config.num_scales());
    for _ in 0..model.config.num_scales() {
        let (h_next, c_next) = tape.lstm_step(region_feature, h, c, wx, wh, b, hidden);
        h = h_next;
        c = c_next;
        out.push(tape.matmul(h, head));
    }
    out
}

/// Affine map from an area feature to the `K_t` points of scale `t`.
/// Returns the flat `1 x 3K_t` row and its `K_t x 3` reshape.
pub fn reconstruct_area(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    area_feature: NodeId,
    t: usize,
) -> Result<(NodeId, NodeId)> {
    let Some(layer) = model.ids.area.get(t) else {
        return Err(Error::invalid(format!(
            "scale index {t} out of range for {} scales",
            model.config.num_scales()
        )));
    };
    let k = model.config.scales[t];
    let w = bound.node(layer.w);
    let b = bound.node(layer.b);
    let z = tape.matmul(area_feature, w);
    let flat = tape.add_row(z, b);
    let points = tape.reshape(flat, k, 3);
    Ok((flat, points))
}

/// One affine map from every reconstructed area (region-major, scale-minor)
/// to the full cloud.
pub fn reconstruct_global(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    area_flats: &[NodeId],
) -> Result<NodeId> {
    let expected = model.config.num_regions * model.config.num_scales();
    if area_flats.len() != expected {
        return Err(Error::invalid(format!(
            "expected {expected} areas, got {}",
            area_flats.len()
        )));
    }
    let cat = tape.concat_cols(area_flats);
    let w = bound.node(model.ids.global.w);
    let b = bound.node(model.ids.global.b);
    let z = tape.matmul(cat, w);
    let flat = tape.add_row(z, b);
    Ok(tape.reshape(flat, model.config.points_per_cloud, 3))
}

/// Full decode from an encoded cloud back to areas and the cloud itself.
pub fn decode(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    global: NodeId,
    encoder_regions: &[NodeId],
    centroids: &[[f64; 3]],
    interp: InterpolationConfig,
) -> Result<DecoderOutput> {
    if centroids.len() != model.config.num_regions {
        return Err(Error::shape(format!(
            "{} centroids for {} regions",
            centroids.len(),
            model.config.num_regions
        )));
    }
    let interp_rows = interpolate_regions(tape, global, centroids, interp)?;
    let enc_regions = tape.concat_rows(encoder_regions);
    let fused = fuse_skip(tape, bound, model, interp_rows, enc_regions)?;

    let d = model.config.feature_dim;
    let fused_flat = tape.reshape(fused, 1, model.config.num_regions * d);
    let mut region_features = Vec::with_capacity(model.config.num_regions);
    let mut area_features = Vec::with_capacity(model.config.num_regions);
    let mut areas = Vec::with_capacity(model.config.num_regions);
    let mut area_flats = Vec::with_capacity(model.config.num_regions * model.config.num_scales());
    for m in 0..model.config.num_regions {
        let feature = tape.slice_cols(fused_flat, m * d, d);
        region_features.push(feature);
        let feats = rnn_decode_region(tape, bound, model, feature);
        let mut region_areas = Vec::with_capacity(feats.len());
        for (t, &a) in feats.iter().enumerate() {
            let (flat, points) = reconstruct_area(tape, bound, model, a, t)?;
            area_flats.push(flat);
            region_areas.push(points);
        }
        area_features.push(feats);
        areas.push(region_areas);
    }
    let cloud = reconstruct_global(tape, bound, model, &area_flats)?;
    Ok(DecoderOutput {
        region_features,
        area_features,
        areas,
        area_flats,
        cloud,
    })
}
