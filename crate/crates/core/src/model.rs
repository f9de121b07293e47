//! Model configuration, parameter registry, and checkpoints.
//!
//! Parameters are registered in one fixed order with stable dotted names, so
//! a checkpoint can be validated name by name and a store can be rebuilt
//! exactly from `(config, seed)`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{param_seed, InitRecord, InitScheme, Mat, ParamStore};
use crate::error::{Error, Result};

/// Widths of the shared per-point feature layers; the final layer lands on
/// `feature_dim`.
const POINT_MLP_HIDDEN: [usize; 2] = [64, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Points per input cloud (N).
    pub points_per_cloud: usize,
    /// Sampled region centroids per cloud (M).
    pub num_regions: usize,
    /// Strictly increasing neighborhood sizes, one per scale (K_1..K_T).
    pub scales: Vec<usize>,
    /// Width of per-scale and per-region features (D).
    pub feature_dim: usize,
    /// Width of the cloud-level feature (D_global).
    pub global_dim: usize,
    pub point_attention: bool,
    pub scale_attention: bool,
    pub region_attention: bool,
    /// Feed point-level blocks centroid-relative coordinates instead of
    /// absolute ones. Experimental; reconstruction targets stay absolute.
    pub centroid_relative: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Smallest useful configuration; cheap enough for finite-difference
    /// checks over every parameter.
    pub fn toy(seed: u64) -> ModelConfig {
        ModelConfig {
            points_per_cloud: 64,
            num_regions: 8,
            scales: vec![4, 8],
            feature_dim: 16,
            global_dim: 32,
            point_attention: true,
            scale_attention: true,
            region_attention: true,
            centroid_relative: false,
            seed,
        }
    }

    /// Default size for training and evaluation on a single CPU.
    pub fn desk(seed: u64) -> ModelConfig {
        ModelConfig {
            points_per_cloud: 256,
            num_regions: 32,
            scales: vec![4, 8, 16, 32],
            feature_dim: 64,
            global_dim: 256,
            point_attention: true,
            scale_attention: true,
            region_attention: true,
            centroid_relative: false,
            seed,
        }
    }

    /// Full-size configuration. Constructible, but far too slow to train in
    /// the test suite.
    pub fn full(seed: u64) -> ModelConfig {
        ModelConfig {
            points_per_cloud: 1024,
            num_regions: 256,
            scales: vec![16, 32, 64, 128],
            feature_dim: 256,
            global_dim: 1024,
            point_attention: true,
            scale_attention: true,
            region_attention: true,
            centroid_relative: false,
            seed,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn sum_scales(&self) -> usize {
        self.scales.iter().sum()
    }

    /// Attention channel width, an eighth of the region count.
    pub fn attention_channels(&self) -> usize {
        (self.num_regions / 8).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud == 0 {
            return Err(Error::invalid("points_per_cloud must be positive"));
        }
        if self.num_regions == 0 || self.num_regions > self.points_per_cloud {
            return Err(Error::invalid(format!(
                "num_regions {} must be in 1..={}",
                self.num_regions, self.points_per_cloud
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::invalid("at least one scale is required"));
        }
        if !self.scales.windows(2).all(|w| w[0] < w[1]) || self.scales[0] == 0 {
            return Err(Error::invalid(format!(
                "scales must be positive and strictly increasing, got {:?}",
                self.scales
            )));
        }
        if *self.scales.last().expect("non-empty") > self.points_per_cloud {
            return Err(Error::invalid(format!(
                "largest scale {} exceeds cloud size {}",
                self.scales.last().expect("non-empty"),
                self.points_per_cloud
            )));
        }
        if self.feature_dim == 0 || self.global_dim == 0 {
            return Err(Error::invalid("feature widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wf: usize,
    pub wg: usize,
    pub wh: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub w: usize,
    pub b: usize,
}

/// Store indices of every parameter, resolved once at construction.
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub point_attn: Option<AttnIds>,
    pub point_mlp: Vec<LayerIds>,
    pub scale_attn: Option<AttnIds>,
    pub scale_mlp: Vec<LayerIds>,
    pub region_attn: Option<AttnIds>,
    pub region_mlp: Vec<LayerIds>,
    pub fuse_mlp: Vec<LayerIds>,
    pub lstm_wx: usize,
    pub lstm_wh: usize,
    pub lstm_b: usize,
    pub head_w: usize,
    pub area: Vec<LayerIds>,
    pub global: LayerIds,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
}

/// Tape leaves for every parameter of a model, in store order. Creating the
/// leaves is cheap; they alias the store's matrices.
pub struct Bound {
    nodes: Vec<crate::autodiff::NodeId>,
}

impl Bound {
    pub fn node(&self, index: usize) -> crate::autodiff::NodeId {
        self.nodes[index]
    }
}

impl Model {
    /// Register every parameter on the tape once, so forward passes can look
    /// leaves up by store index.
    pub fn bind(&self, tape: &mut crate::autodiff::Tape) -> Bound {
        Bound {
            nodes: (0..self.store.len())
                .map(|i| tape.param(&self.store, i))
                .collect(),
        }
    }
}

/// Widths of each encoder MLP given its input width; every layer is followed
/// by a relu.
fn mlp_widths(level: Level, config: &ModelConfig) -> (usize, Vec<usize>) {
    let c = config.attention_channels();
    match level {
        Level::Point => {
            let input = 3 + if config.point_attention { c } else { 0 };
            let mut widths = POINT_MLP_HIDDEN.to_vec();
            widths.push(config.feature_dim);
            (input, widths)
        }
        Level::Scale => {
            let input = config.feature_dim + if config.scale_attention { c } else { 0 };
            (input, vec![config.feature_dim])
        }
        Level::Region => {
            let input = config.feature_dim + if config.region_attention { c } else { 0 };
            (input, vec![config.global_dim])
        }
        Level::Fuse => (
            config.global_dim + config.feature_dim,
            vec![config.feature_dim],
        ),
    }
}

#[derive(Clone, Copy)]
enum Level {
    Point,
    Scale,
    Region,
    Fuse,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.store.add(
            name,
            rows,
            cols,
            InitRecord {
                scheme: InitScheme::XavierUniform,
                seed: param_seed(self.seed, name),
            },
        )
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.store.add(
            name,
            rows,
            cols,
            InitRecord {
                scheme: InitScheme::Zeros,
                seed: param_seed(self.seed, name),
            },
        )
    }

    fn attn(&mut self, prefix: &str, input: usize, channels: usize) -> AttnIds {
        AttnIds {
            wf: self.xavier(&format!("{prefix}.wf"), input, channels),
            wg: self.xavier(&format!("{prefix}.wg"), input, channels),
            wh: self.xavier(&format!("{prefix}.wh"), input, channels),
        }
    }

    fn mlp(&mut self, prefix: &str, mut input: usize, widths: &[usize]) -> Vec<LayerIds> {
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerIds {
                w: self.xavier(&format!("{prefix}.{i}.w"), input, w),
                b: self.zeros(&format!("{prefix}.{i}.b"), 1, w),
            });
            input = w;
        }
        layers
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ids = build_params(&config, &mut store);
        Ok(Model { config, store, ids })
    }

    /// Rebuild a model around an existing store, e.g. one read back from a
    /// checkpoint. Every expected parameter must be present with the right
    /// shape; extras are rejected.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Model> {
        config.validate()?;
        let mut reference = ParamStore::new();
        let _ = build_params(&config, &mut reference);
        if reference.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.len(),
                store.len()
            )));
        }
        for i in 0..reference.len() {
            let name = reference.name(i);
            let Some(j) = store.index_of(name) else {
                return Err(Error::Checkpoint(format!("missing parameter {name:?}")));
            };
            if store.mat(j).shape() != reference.mat(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    store.mat(j).shape(),
                    reference.mat(i).shape()
                )));
            }
        }
        let ids = resolve_ids(&config, &store)?;
        Ok(Model { config, store, ids })
    }
}

fn build_params(config: &ModelConfig, store: &mut ParamStore) -> ParamIds {
    let c = config.attention_channels();
    let d = config.feature_dim;
    let dg = config.global_dim;
    let mut b = Builder {
        store,
        seed: config.seed,
    };

    let point_attn = config.point_attention.then(|| b.attn("enc.point.attn", 3, c));
    let (in_w, widths) = mlp_widths(Level::Point, config);
    let point_mlp = b.mlp("enc.point.mlp", in_w, &widths);

    let scale_attn = config.scale_attention.then(|| b.attn("enc.scale.attn", d, c));
    let (in_w, widths) = mlp_widths(Level::Scale, config);
    let scale_mlp = b.mlp("enc.scale.mlp", in_w, &widths);

    let region_attn = config
        .region_attention
        .then(|| b.attn("enc.region.attn", d, c));
    let (in_w, widths) = mlp_widths(Level::Region, config);
    let region_mlp = b.mlp("enc.region.mlp", in_w, &widths);

    let (in_w, widths) = mlp_widths(Level::Fuse, config);
    let fuse_mlp = b.mlp("dec.fuse.mlp", in_w, &widths);

    let lstm_wx = b.xavier("dec.lstm.wx", d, 4 * dg);
    let lstm_wh = b.xavier("dec.lstm.wh", dg, 4 * dg);
    let lstm_b = b.store.add(
        "dec.lstm.b",
        1,
        4 * dg,
        InitRecord {
            scheme: InitScheme::LstmGateBias { forget: 1.0 },
            seed: param_seed(config.seed, "dec.lstm.b"),
        },
    );
    let head_w = b.xavier("dec.head.w", dg, d);

    let area = config
        .scales
        .iter()
        .enumerate()
        .map(|(t, &k)| LayerIds {
            w: b.xavier(&format!("dec.area.{t}.w"), d, 3 * k),
            b: b.zeros(&format!("dec.area.{t}.b"), 1, 3 * k),
        })
        .collect();

    let concat_width = 3 * config.num_regions * config.sum_scales();
    let global = LayerIds {
        w: b.xavier("dec.global.w", concat_width, 3 * config.points_per_cloud),
        b: b.zeros("dec.global.b", 1, 3 * config.points_per_cloud),
    };

    ParamIds {
        point_attn,
        point_mlp,
        scale_attn,
        scale_mlp,
        region_attn,
        region_mlp,
        fuse_mlp,
        lstm_wx,
        lstm_wh,
        lstm_b,
        head_w,
        area,
        global,
    }
}

fn resolve_ids(config: &ModelConfig, store: &ParamStore) -> Result<ParamIds> {
    let find = |name: &str| {
        store
            .index_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    };
    let find_attn = |prefix: &str| -> Result<AttnIds> {
        Ok(AttnIds {
            wf: find(&format!("{prefix}.wf"))?,
            wg: find(&format!("{prefix}.wg"))?,
            wh: find(&format!("{prefix}.wh"))?,
        })
    };
    let find_mlp = |prefix: &str, layers: usize| -> Result<Vec<LayerIds>> {
        (0..layers)
            .map(|i| {
                Ok(LayerIds {
                    w: find(&format!("{prefix}.{i}.w"))?,
                    b: find(&format!("{prefix}.{i}.b"))?,
                })
            })
            .collect()
    };

    Ok(ParamIds {
        point_attn: if config.point_attention {
            Some(find_attn("enc.point.attn")?)
        } else {
            None
        },
        point_mlp: find_mlp("enc.point.mlp", POINT_MLP_HIDDEN.len() + 1)?,
        scale_attn: if config.scale_attention {
            Some(find_attn("enc.scale.attn")?)
        } else {
            None
        },
        scale_mlp: find_mlp("enc.scale.mlp", 1)?,
        region_attn: if config.region_attention {
            Some(find_attn("enc.region.attn")?)
        } else {
            None
        },
        region_mlp: find_mlp("enc.region.mlp", 1)?,
        fuse_mlp: find_mlp("dec.fuse.mlp", 1)?,
        lstm_wx: find("dec.lstm.wx")?,
        lstm_wh: find("dec.lstm.wh")?,
        lstm_b: find("dec.lstm.b")?,
        head_w: find("dec.head.w")?,
        area: find_mlp("dec.area", config.num_scales())?,
        global: LayerIds {
            w: find("dec.global.w")?,
            b: find("dec.global.b")?,
        },
    })
}

const CKPT_MAGIC: &[u8; 8] = b"PCAECKP1";

/// Write the model (config and every parameter) to a binary checkpoint.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let cfg = &model.config;
    write_u32(&mut w, cfg.points_per_cloud as u32)?;
    write_u32(&mut w, cfg.num_regions as u32)?;
    write_u32(&mut w, cfg.scales.len() as u32)?;
    for &k in &cfg.scales {
        write_u32(&mut w, k as u32)?;
    }
    write_u32(&mut w, cfg.feature_dim as u32)?;
    write_u32(&mut w, cfg.global_dim as u32)?;
    let flags = (cfg.point_attention as u8)
        | (cfg.scale_attention as u8) << 1
        | (cfg.region_attention as u8) << 2
        | (cfg.centroid_relative as u8) << 3;
    w.write_all(&[flags])?;
    w.write_all(&cfg.seed.to_le_bytes())?;

    write_u32(&mut w, model.store.len() as u32)?;
    for i in 0..model.store.len() {
        let name = model.store.name(i).as_bytes();
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name)?;
        let mat = model.store.mat(i);
        write_u32(&mut w, mat.rows() as u32)?;
        write_u32(&mut w, mat.cols() as u32)?;
        let init = model.store.init(i);
        let (tag, aux) = match init.scheme {
            InitScheme::XavierUniform => (0u8, 0.0),
            InitScheme::Zeros => (1, 0.0),
            InitScheme::LstmGateBias { forget } => (2, forget),
        };
        w.write_all(&[tag])?;
        w.write_all(&aux.to_le_bytes())?;
        w.write_all(&init.seed.to_le_bytes())?;
        for v in mat.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into a validated model.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let points_per_cloud = read_u32(&mut r)? as usize;
    let num_regions = read_u32(&mut r)? as usize;
    let num_scales = read_u32(&mut r)? as usize;
    if num_scales > 64 {
        return Err(Error::Checkpoint(format!(
            "implausible scale count {num_scales}"
        )));
    }
    let scales = (0..num_scales)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let feature_dim = read_u32(&mut r)? as usize;
    let global_dim = read_u32(&mut r)? as usize;
    let mut flags = [0u8; 1];
    r.read_exact(&mut flags)?;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let config = ModelConfig {
        points_per_cloud,
        num_regions,
        scales,
        feature_dim,
        global_dim,
        point_attention: flags[0] & 1 != 0,
        scale_attention: flags[0] & 2 != 0,
        region_attention: flags[0] & 4 != 0,
        centroid_relative: flags[0] & 8 != 0,
        seed: u64::from_le_bytes(seed),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;

    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let mut aux = [0u8; 8];
        r.read_exact(&mut aux)?;
        let mut init_seed = [0u8; 8];
        r.read_exact(&mut init_seed)?;
        let scheme = match tag[0] {
            0 => InitScheme::XavierUniform,
            1 => InitScheme::Zeros,
            2 => InitScheme::LstmGateBias {
                forget: f64::from_le_bytes(aux),
            },
            other => {
                return Err(Error::Checkpoint(format!("unknown init scheme {other}")));
            }
        };
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for {name:?}")))?;
            *v = f64::from_le_bytes(buf);
        }
        store.add_mat(
            &name,
            Mat::from_vec(rows, cols, data),
            InitRecord {
                scheme,
                seed: u64::from_le_bytes(init_seed),
            },
        );
    }
    Model::from_parts(config, store)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(buf))
}
