//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!   magic "NPGD", version u32
//!   config: u32 length + JSON document
//!   world bounds: 6 x f64 (min, max)
//!   grid section: levels u32, resolutions u32 x L, feature dim u32,
//!     feature count u64, features f32 (level order, coarsest first)
//!   net section: layer count u32, (in, out) u32 pairs, parameter count
//!     u64, parameters f32 (per layer: weights input-major, then biases)
//!   optimizer: step count u64, first and second moments f32 (full layout)
//!   EMA shadow parameters f32 (full layout)
//!
//! Parameters are held in f64 in memory and rounded to f32 on disk; a
//! load therefore snaps the model to f32 precision. The loader is
//! bounds-checked end to end and never panics on malformed bytes.

use std::path::Path;

use thiserror::Error;

use crate::encoding::{GridEmbedding, ShEncoding};
use crate::guiding::{GuideMode, ModelConfig, NpmModel};
use crate::math::{vec3, Aabb};
use crate::nn::{AdamState, DecoderNet};
use crate::vmf::raw_param_len;

pub const MAGIC: [u8; 4] = *b"NPGD";
pub const VERSION: u32 = 1;

// Sanity caps so a hostile header can't request huge allocations.
const MAX_LEVELS: usize = 32;
const MAX_RESOLUTION: u32 = 512;
const MAX_FEATURES: usize = 64;
const MAX_LAYERS: usize = 64;
const MAX_LAYER_DIM: usize = 1 << 16;
const MAX_CONFIG_LEN: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error("non-finite value in {0} section")]
    NonFinite(&'static str),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_array(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 4)?;
        let mut out = Vec::with_capacity(n);
        for c in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite(section));
            }
            out.push(v as f64);
        }
        Ok(out)
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode(model: &NpmModel) -> Vec<u8> {
    let (emb, _sh, net, params, ema, adam, net_len) = model.raw_parts();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let config = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);

    let aabb = emb.aabb();
    for v in [
        aabb.min.x, aabb.min.y, aabb.min.z, aabb.max.x, aabb.max.y, aabb.max.z,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }

    out.extend_from_slice(&(emb.levels() as u32).to_le_bytes());
    for d in emb.resolutions() {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(emb.feature_dim() as u32).to_le_bytes());
    let grid = &params[net_len..];
    out.extend_from_slice(&(grid.len() as u64).to_le_bytes());
    push_f32s(&mut out, grid);

    out.extend_from_slice(&(net.dims().len() as u32).to_le_bytes());
    for (i, o) in net.dims() {
        out.extend_from_slice(&(*i as u32).to_le_bytes());
        out.extend_from_slice(&(*o as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net_len as u64).to_le_bytes());
    push_f32s(&mut out, &params[..net_len]);

    out.extend_from_slice(&adam.t.to_le_bytes());
    push_f32s(&mut out, &adam.m);
    push_f32s(&mut out, &adam.v);
    push_f32s(&mut out, ema);
    out
}

/// Parses and validates a checkpoint from raw bytes.
pub fn decode(bytes: &[u8]) -> Result<NpmModel, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let config_len = r.u32()? as usize;
    if config_len > MAX_CONFIG_LEN {
        return Err(CheckpointError::BadConfig("oversized config".into()));
    }
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    if config.lobes == 0 || config.lobes > 64 {
        return Err(CheckpointError::BadConfig(format!(
            "lobe count {} out of range",
            config.lobes
        )));
    }
    if !(config.sh_bands >= 1 && config.sh_bands <= 4) {
        return Err(CheckpointError::BadConfig(format!(
            "sh bands {} out of range",
            config.sh_bands
        )));
    }
    if !(config.selection_prob.is_finite()
        && (0.0..=1.0).contains(&config.selection_prob)
        && config.learning_rate.is_finite()
        && config.learning_rate > 0.0
        && config.ema_decay.is_finite()
        && (0.0..1.0).contains(&config.ema_decay))
    {
        return Err(CheckpointError::BadConfig("bad scalar hyperparameter".into()));
    }

    let aabb = {
        let vals: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_, _>>()?;
        let aabb = Aabb::new(
            vec3(vals[0], vals[1], vals[2]),
            vec3(vals[3], vals[4], vals[5]),
        );
        if !aabb.is_valid() {
            return Err(CheckpointError::Inconsistent("invalid world bounds".into()));
        }
        aabb
    };

    let levels = r.u32()? as usize;
    if levels == 0 || levels > MAX_LEVELS || levels != config.levels {
        return Err(CheckpointError::Inconsistent(format!(
            "level count {levels} disagrees with config {}",
            config.levels
        )));
    }
    let mut resolutions = Vec::with_capacity(levels);
    for _ in 0..levels {
        let d = r.u32()?;
        if !(2..=MAX_RESOLUTION).contains(&d) {
            return Err(CheckpointError::Inconsistent(format!(
                "grid resolution {d} out of range"
            )));
        }
        resolutions.push(d);
    }
    let feature_dim = r.u32()? as usize;
    if feature_dim == 0 || feature_dim > MAX_FEATURES || feature_dim != config.grid_features {
        return Err(CheckpointError::Inconsistent(format!(
            "feature dim {feature_dim} disagrees with config {}",
            config.grid_features
        )));
    }
    let emb = GridEmbedding::with_resolutions(resolutions, feature_dim, aabb)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let grid_count = r.u64()? as usize;
    if grid_count != emb.param_count() {
        return Err(CheckpointError::Inconsistent(format!(
            "grid parameter count {grid_count} != expected {}",
            emb.param_count()
        )));
    }
    let grid = r.f32_array(grid_count, "grid")?;

    let layer_count = r.u32()? as usize;
    if layer_count == 0 || layer_count > MAX_LAYERS {
        return Err(CheckpointError::Inconsistent(format!(
            "layer count {layer_count} out of range"
        )));
    }
    let mut dims = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let i = r.u32()? as usize;
        let o = r.u32()? as usize;
        if i == 0 || o == 0 || i > MAX_LAYER_DIM || o > MAX_LAYER_DIM {
            return Err(CheckpointError::Inconsistent("bad layer dims".into()));
        }
        if let Some(&(_, prev_out)) = dims.last() {
            if prev_out != i {
                return Err(CheckpointError::Inconsistent(
                    "layer widths do not chain".into(),
                ));
            }
        }
        dims.push((i, o));
    }
    let sh = ShEncoding::new(config.sh_bands);
    let expect_input = match config.mode {
        GuideMode::Radiance => emb.output_dim(),
        GuideMode::Product => emb.output_dim() + 2 * sh.output_dim() + 1,
    };
    if dims[0].0 != expect_input {
        return Err(CheckpointError::Inconsistent(format!(
            "net input width {} != encoding width {expect_input}",
            dims[0].0
        )));
    }
    if dims[layer_count - 1].1 != raw_param_len(config.lobes) {
        return Err(CheckpointError::Inconsistent(format!(
            "net output width {} != {} raw mixture parameters",
            dims[layer_count - 1].1,
            raw_param_len(config.lobes)
        )));
    }
    let net = DecoderNet::from_dims(dims);
    let net_count = r.u64()? as usize;
    if net_count != net.param_count() {
        return Err(CheckpointError::Inconsistent(format!(
            "net parameter count {net_count} != expected {}",
            net.param_count()
        )));
    }
    let mut params = r.f32_array(net_count, "net")?;
    let net_len = params.len();
    params.extend_from_slice(&grid);
    let total = params.len();

    let t = r.u64()?;
    let m = r.f32_array(total, "optimizer")?;
    let v = r.f32_array(total, "optimizer")?;
    if v.iter().any(|x| *x < 0.0) {
        return Err(CheckpointError::Inconsistent(
            "negative second moment".into(),
        ));
    }
    let ema = r.f32_array(total, "ema")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }

    let mut adam = AdamState::new(0, config.learning_rate);
    adam.m = m;
    adam.v = v;
    adam.t = t;
    Ok(NpmModel::from_raw_parts(
        config, emb, sh, net, params, ema, adam, net_len,
    ))
}

pub fn save(model: &NpmModel, path: &Path) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, encode(model))?)
}

pub fn load(path: &Path) -> Result<NpmModel, CheckpointError> {
    decode(&std::fs::read(path)?)
}
