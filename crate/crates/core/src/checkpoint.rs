//! Model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        b"SASV"
//! version      u16 = 1
//! kind         u8   (0 = fusion, 1 = baseline2)
//! dim_a        u32  (fusion: CM input width; baseline2: ASV embedding width)
//! dim_b        u32  (fusion: number of SV scores; baseline2: CM embedding width)
//! hidden_count u32, then hidden_count x u32 widths
//! leaky_slope  f64
//! parameters   f64 values; per layer, weights (row-major out x in) then bias;
//!              fusion stores the CM layers first, then the prediction layer
//! has_adam     u8; if 1: step u64, first moments, second moments (f64,
//!              same tensor order as the parameters)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::baselines::Baseline2Params;
use crate::fusionnet::{AdamState, FusionDims, FusionParams, Mlp, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SASV";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown model kind {0}")]
    UnknownKind(u8),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("trailing bytes after checkpoint")]
    TrailingBytes,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Fusion(FusionParams),
    Baseline2(Baseline2Params),
}

impl SavedModel {
    fn kind(&self) -> u8 {
        match self {
            SavedModel::Fusion(_) => 0,
            SavedModel::Baseline2(_) => 1,
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            SavedModel::Fusion(p) => p.tensors(),
            SavedModel::Baseline2(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            SavedModel::Fusion(p) => p.tensors_mut(),
            SavedModel::Baseline2(p) => p.tensors_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SavedModel,
    pub adam: Option<AdamState>,
}

fn truncated(_: io::Error) -> CheckpointError {
    CheckpointError::Truncated
}

fn slope_of(net: &Mlp) -> f64 {
    net.layers
        .iter()
        .find_map(|l| match l.activation {
            crate::fusionnet::Activation::LeakyRelu(s) => Some(s),
            crate::fusionnet::Activation::Identity => None,
        })
        .unwrap_or(crate::fusionnet::DEFAULT_LEAKY_SLOPE)
}

impl Checkpoint {
    pub fn new(model: SavedModel) -> Self {
        Self { model, adam: None }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(self.model.kind())?;
        let (a, b, hidden, slope) = match &self.model {
            SavedModel::Fusion(p) => {
                let d = p.dims();
                (d.cm_input_dim, d.num_sv, d.hidden, d.leaky_slope)
            }
            SavedModel::Baseline2(p) => (p.asv_dim, p.cm_dim, p.hidden(), slope_of(&p.net)),
        };
        w.write_u32::<LittleEndian>(a as u32)?;
        w.write_u32::<LittleEndian>(b as u32)?;
        w.write_u32::<LittleEndian>(hidden.len() as u32)?;
        for h in &hidden {
            w.write_u32::<LittleEndian>(*h as u32)?;
        }
        w.write_f64::<LittleEndian>(slope)?;
        for t in self.model.tensors() {
            for &x in t {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        match &self.adam {
            None => w.write_u8(0)?,
            Some(state) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(state.step)?;
                for buf in state.m.iter().chain(&state.v) {
                    for &x in buf {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let kind = r.read_u8().map_err(truncated)?;
        let a = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let b = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let n_hidden = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if n_hidden > 64 {
            return Err(CheckpointError::Invalid(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden)
            .map(|_| r.read_u32::<LittleEndian>().map(|h| h as usize).map_err(truncated))
            .collect::<Result<Vec<_>, _>>()?;
        let slope = r.read_f64::<LittleEndian>().map_err(truncated)?;
        let invalid = |e: String| CheckpointError::Invalid(e);

        let mut model = match kind {
            0 => {
                let dims = FusionDims { cm_input_dim: a, num_sv: b, hidden, leaky_slope: slope };
                SavedModel::Fusion(FusionParams::zeros(&dims).map_err(|e| invalid(e.to_string()))?)
            }
            1 => {
                let mut widths = vec![2 * a + b];
                widths.extend(&hidden);
                widths.push(2);
                if a == 0 || widths.contains(&0) {
                    return Err(invalid("zero width".into()));
                }
                SavedModel::Baseline2(Baseline2Params { asv_dim: a, cm_dim: b, net: Mlp::zeros(&widths, slope) })
            }
            k => return Err(CheckpointError::UnknownKind(k)),
        };
        let expected: usize = model.tensors().iter().map(|t| t.len()).sum();
        if r.len() < expected * 8 {
            return Err(CheckpointError::Truncated);
        }
        for t in model.tensors_mut() {
            for x in t.iter_mut() {
                *x = r.read_f64::<LittleEndian>().map_err(truncated)?;
            }
        }
        let adam = match r.read_u8().map_err(truncated)? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>().map_err(truncated)?;
                let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
                if r.len() < 2 * expected * 8 {
                    return Err(CheckpointError::Truncated);
                }
                let mut read_bufs = || -> Result<Vec<Vec<f64>>, CheckpointError> {
                    shapes
                        .iter()
                        .map(|&n| (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(truncated)).collect())
                        .collect()
                };
                let m = read_bufs()?;
                let v = read_bufs()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(invalid(format!("adam flag {f}"))),
        };
        if !r.is_empty() {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok(Self { model, adam })
    }
}
