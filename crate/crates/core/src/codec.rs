//! The `.tinc` container and the compress / decompress pipelines.
//!
//! Layout (all little-endian):
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"TINC"`       |
//! | version      | u8 = 1          |
//! | coord dim    | u8 = 3          |
//! | levels       | u8              |
//! | hyper depth  | u8              |
//! | dims (z,y,x) | 3 × u32         |
//! | dtype        | u8              |
//! | d_min, d_max | 2 × f64         |
//! | intra mode   | u8 (0 even, 1 importance) |
//! | inter ratio  | f32 (NaN for per-level ratios) |
//! | node count   | u32             |
//! | widths       | u16 × nodes, breadth-first |
//! | param dtype  | u8 (0 = f32)    |
//! | param count  | u64             |
//! | payload      | f32 × count, canonical order |
//! | CRC-32       | u32 over every preceding byte |

use serde::Serialize;

use crate::error::{ConfigError, Error, FormatError, Result};
use crate::exec::Executor;
use crate::metrics::{MetricReport, MetricSpec};
use crate::net::TincNet;
use crate::octree::{
    importance_weights, minimal_feasible_budget, plan_tree, realized_params, AllocationPolicy,
    IntraLevel, TreeConfig, COORD_DIM,
};
use crate::train::{fit, TrainConfig, TrainReport};
use crate::volume::{denormalize_intensity, partition_octree, Dtype, Volume};

pub const MAGIC: &[u8; 4] = b"TINC";
pub const VERSION: u8 = 1;
pub const PARAM_F32: u8 = 0;
const FIXED_BEFORE_WIDTHS: usize = 46;
const FIXED_AFTER_WIDTHS: usize = 9;
const CRC_LEN: usize = 4;
/// Absorbs float rounding when a ratio was itself computed as `raw / bytes`.
const RATIO_SLACK: f64 = 1e-6;

/// Header size in bytes for a tree with `levels` levels.
pub fn header_len(levels: u32) -> usize {
    let nodes = (8usize.pow(levels) - 1) / 7;
    FIXED_BEFORE_WIDTHS + 2 * nodes + FIXED_AFTER_WIDTHS
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub coord_dim: u8,
    pub tree: TreeConfig,
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub d_min: f64,
    pub d_max: f64,
    pub intra_level: IntraLevel,
    pub inter_ratio: f32,
    pub widths: Vec<u16>,
    pub param_count: u64,
}

impl Header {
    pub fn byte_len(&self) -> usize {
        FIXED_BEFORE_WIDTHS + 2 * self.widths.len() + FIXED_AFTER_WIDTHS
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.coord_dim);
        out.push(self.tree.levels as u8);
        out.push(self.tree.hyper_depth as u8);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.dtype.code());
        out.extend_from_slice(&self.d_min.to_le_bytes());
        out.extend_from_slice(&self.d_max.to_le_bytes());
        out.push(self.intra_level.code());
        out.extend_from_slice(&self.inter_ratio.to_le_bytes());
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.push(PARAM_F32);
        out.extend_from_slice(&self.param_count.to_le_bytes());
    }
}

/// Little-endian cursor that reports truncation against the whole file.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A parsed or freshly built `.tinc` file.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedArtifact {
    pub header: Header,
    pub params: Vec<f32>,
}

impl CompressedArtifact {
    pub fn from_net(net: &TincNet, volume: &Volume, policy: &AllocationPolicy) -> Result<Self, ConfigError> {
        let widths = net
            .widths()
            .iter()
            .map(|&w| {
                u16::try_from(w).map_err(|_| ConfigError::Invalid(format!("width {w} exceeds u16")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for d in volume.dims() {
            if u32::try_from(d).is_err() {
                return Err(ConfigError::Invalid(format!("axis size {d} exceeds u32")));
            }
        }
        Ok(Self {
            header: Header {
                coord_dim: COORD_DIM as u8,
                tree: *net.cfg(),
                dims: volume.dims(),
                dtype: volume.dtype(),
                d_min: volume.d_min(),
                d_max: volume.d_max(),
                intra_level: policy.intra_level,
                inter_ratio: policy.inter_level_ratio.header_value(),
                widths,
                param_count: net.param_count() as u64,
            },
            params: net.params().iter().map(|&p| p as f32).collect(),
        })
    }

    pub fn file_size(&self) -> usize {
        self.header.byte_len() + 4 * self.params.len() + CRC_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_size());
        self.header.write(&mut out);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a file: magic and version first, then enough of the header to
    /// know the expected length, then the checksum, then semantic checks.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic { expected: "TINC" });
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u8()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let coord_dim = r.u8()?;
        let levels = r.u8()?;
        let hyper_depth = r.u8()?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let dtype_code = r.u8()?;
        let d_min = r.f64()?;
        let d_max = r.f64()?;
        let intra_code = r.u8()?;
        let inter_ratio = r.f32()?;
        let node_count = r.u32()? as usize;
        // Bound the allocation before trusting node_count.
        if FIXED_BEFORE_WIDTHS + 2 * node_count > bytes.len() {
            return Err(FormatError::Truncated {
                expected: FIXED_BEFORE_WIDTHS + 2 * node_count + FIXED_AFTER_WIDTHS + CRC_LEN,
                actual: bytes.len(),
            });
        }
        let widths = (0..node_count).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
        let param_dtype = r.u8()?;
        let param_count = r.u64()?;

        let header_end = r.pos;
        let expected = (param_count as u128) * 4 + header_end as u128 + CRC_LEN as u128;
        if (bytes.len() as u128) < expected {
            return Err(FormatError::Truncated {
                expected: expected.min(usize::MAX as u128) as usize,
                actual: bytes.len(),
            });
        }
        if bytes.len() as u128 > expected {
            return Err(FormatError::TrailingBytes {
                extra: (bytes.len() as u128 - expected) as usize,
            });
        }
        let body = &bytes[..bytes.len() - CRC_LEN];
        let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }

        if coord_dim as usize != COORD_DIM {
            return Err(FormatError::Malformed(format!("coordinate dimension {coord_dim}")));
        }
        let tree = TreeConfig::new(levels as u32, hyper_depth as u32)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        if node_count != tree.node_count() {
            return Err(FormatError::Malformed(format!(
                "{node_count} widths for a {levels}-level tree"
            )));
        }
        if widths.contains(&0) {
            return Err(FormatError::Malformed("zero layer width".into()));
        }
        let dtype = Dtype::from_code(dtype_code)
            .ok_or_else(|| FormatError::Malformed(format!("dtype code {dtype_code}")))?;
        let intra_level = IntraLevel::from_code(intra_code)
            .ok_or_else(|| FormatError::Malformed(format!("allocation mode {intra_code}")))?;
        if param_dtype != PARAM_F32 {
            return Err(FormatError::Malformed(format!("parameter dtype {param_dtype}")));
        }
        if !(d_min.is_finite() && d_max.is_finite() && d_min <= d_max) {
            return Err(FormatError::Malformed(format!("intensity range [{d_min}, {d_max}]")));
        }
        partition_octree(dims, tree.levels).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let wide: Vec<u32> = widths.iter().map(|&w| u32::from(w)).collect();
        if realized_params(&tree, &wide) != param_count {
            return Err(FormatError::Malformed(format!(
                "parameter count {param_count} does not match the declared widths"
            )));
        }
        let params = body[header_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            header: Header {
                coord_dim,
                tree,
                dims,
                dtype,
                d_min,
                d_max,
                intra_level,
                inter_ratio,
                widths,
                param_count,
            },
            params,
        })
    }

    /// Rebuilds the network described by the header and loads the payload.
    pub fn to_net(&self) -> Result<TincNet, FormatError> {
        let widths: Vec<u32> = self.header.widths.iter().map(|&w| u32::from(w)).collect();
        let mut net = TincNet::zeros(self.header.tree, &widths, self.header.dims)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        if net.param_count() != self.params.len() {
            return Err(FormatError::Malformed("payload length mismatch".into()));
        }
        for (dst, &src) in net.params_mut().iter_mut().zip(&self.params) {
            *dst = f64::from(src);
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioPlan {
    pub target_ratio: f64,
    pub raw_bytes: usize,
    pub header_bytes: usize,
    pub param_budget: u64,
}

/// Parameter budget `floor((raw / ratio - header - 4) / 4)` for a target ratio.
pub fn plan_ratio(
    volume: &Volume,
    target_ratio: f64,
    cfg: &TreeConfig,
    policy: &AllocationPolicy,
    importance: Option<&[f64]>,
) -> Result<RatioPlan> {
    if !(target_ratio.is_finite() && target_ratio >= 1.0) {
        return Err(ConfigError::Invalid(format!("target ratio must be >= 1, got {target_ratio}")).into());
    }
    cfg.validate()?;
    let raw_bytes = volume.raw_byte_len();
    let header_bytes = header_len(cfg.levels);
    let allowed = raw_bytes as f64 / target_ratio;
    let budget = ((allowed - header_bytes as f64 - CRC_LEN as f64) / 4.0 + RATIO_SLACK).floor();
    let param_budget = if budget > 0.0 { budget as u64 } else { 0 };
    let minimal = minimal_feasible_budget(cfg, policy, importance)?;
    if param_budget < minimal {
        let smallest_file = header_bytes as f64 + 4.0 * minimal as f64 + CRC_LEN as f64;
        return Err(ConfigError::InfeasibleRatio {
            target: target_ratio,
            max_feasible: raw_bytes as f64 / smallest_file,
        }
        .into());
    }
    Ok(RatioPlan {
        target_ratio,
        raw_bytes,
        header_bytes,
        param_budget,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressOptions {
    pub tree: TreeConfig,
    pub policy: AllocationPolicy,
    pub train: TrainConfig,
    /// Metrics computed on the decompressed result; empty skips evaluation.
    pub metrics: Vec<MetricSpec>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            policy: AllocationPolicy::default(),
            train: TrainConfig::default(),
            metrics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressReport {
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub raw_bytes: usize,
    pub file_bytes: usize,
    pub header_bytes: usize,
    pub param_budget: u64,
    pub param_count: u64,
    pub budget_utilization: f64,
    pub widths: Vec<u32>,
    pub leaf_budgets: Vec<u64>,
    pub final_loss: f64,
    pub training: TrainReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

/// Plans the budget, allocates it over the octree, fits the network and
/// packs the result. The returned file never exceeds `raw / target_ratio`.
pub fn compress(
    volume: &Volume,
    target_ratio: f64,
    opts: &CompressOptions,
) -> Result<(CompressedArtifact, CompressReport)> {
    let tree = opts.tree;
    tree.validate()?;
    opts.train.validate()?;
    let regions = partition_octree(volume.dims(), tree.levels)?;
    let importance = match opts.policy.intra_level {
        IntraLevel::Importance => Some(importance_weights(
            volume,
            &regions,
            opts.policy.importance_threshold,
        )),
        IntraLevel::Even => None,
    };
    let plan = plan_ratio(volume, target_ratio, &tree, &opts.policy, importance.as_deref())?;
    let nodes = plan_tree(plan.param_budget, &tree, &opts.policy, importance.as_deref())?;
    let widths: Vec<u32> = nodes.iter().map(|n| n.solved_width).collect();

    let mut net = TincNet::init_siren(tree, &widths, volume.dims(), opts.train.seed)?;
    let training = fit(&mut net, volume, &opts.train)?;
    net.quantize_f32();

    let artifact = CompressedArtifact::from_net(&net, volume, &opts.policy)?;
    let file_bytes = artifact.file_size();
    if file_bytes as f64 > plan.raw_bytes as f64 / target_ratio + RATIO_SLACK {
        return Err(ConfigError::Invalid(format!(
            "internal budget error: {file_bytes} bytes exceed the target"
        ))
        .into());
    }

    let metrics = if opts.metrics.is_empty() {
        None
    } else {
        let restored = decompress_with(&artifact, &Executor::new(opts.train.threads))?;
        Some(MetricReport::evaluate(volume, &restored, &opts.metrics)?)
    };

    let first_leaf = tree.level_start(tree.levels);
    let report = CompressReport {
        target_ratio,
        achieved_ratio: plan.raw_bytes as f64 / file_bytes as f64,
        raw_bytes: plan.raw_bytes,
        file_bytes,
        header_bytes: plan.header_bytes,
        param_budget: plan.param_budget,
        param_count: net.param_count() as u64,
        budget_utilization: net.param_count() as f64 / plan.param_budget as f64,
        widths,
        leaf_budgets: nodes[first_leaf..].iter().map(|n| n.param_budget).collect(),
        final_loss: training.final_loss,
        training,
        metrics,
    };
    Ok((artifact, report))
}

pub fn decompress(artifact: &CompressedArtifact) -> Result<Volume> {
    decompress_with(artifact, &Executor::sequential())
}

/// Evaluates every voxel through its leaf and maps back to raw intensities.
pub fn decompress_with(artifact: &CompressedArtifact, exec: &Executor) -> Result<Volume> {
    let net = artifact.to_net()?;
    let h = &artifact.header;
    let dense = net.dense_eval(exec);
    let raw = dense.mapv(|v| denormalize_intensity(v, h.d_min, h.d_max, h.dtype));
    Volume::from_array(raw, h.dtype).map_err(|e| match e {
        Error::MalformedInput(m) => FormatError::Malformed(m).into(),
        other => other,
    })
}
