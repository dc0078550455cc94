//! `BTCK` checkpoint files.
//!
//! ```text
//! 0   "BTCK"
//! 4   u32 version
//! 8   u64 header length n
//! 16  n bytes of JSON header (configs, step, parameter specs, dtype)
//!     parameters, raw little-endian in header order
//!     Adam first moments, then second moments (only if the header says so)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserModel};
use crate::optim::AdamState;
use crate::params::{ParamSpec, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::schedule::ScheduleParams;
use crate::train::TrainConfig;

pub const BTCK_MAGIC: &[u8; 4] = b"BTCK";
pub const BTCK_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: DenoiserModel<T>,
    pub schedule: ScheduleParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamState<T>>,
}

pub type Checkpoint32 = Checkpoint<f32>;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: DType,
    step: u64,
    model: DenoiserConfig,
    schedule: ScheduleParams,
    train: Option<TrainConfig>,
    params: Vec<ParamSpec>,
    optimizer_step: Option<u64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE,
            step: self.step,
            model: self.model.config.clone(),
            schedule: self.schedule,
            train: self.train.clone(),
            params: self.model.params.specs(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(BTCK_MAGIC);
        out.extend_from_slice(&BTCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        self.model.params.encode(&mut out);
        if let Some(o) = &self.optimizer {
            o.m.encode(&mut out);
            o.v.encode(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 4 || &bytes[..4] != BTCK_MAGIC {
            return Err(fail(0, "bad magic, expected \"BTCK\"".into()));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != BTCK_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = PREFIX_LEN.checked_add(n).filter(|&e| e <= bytes.len());
        let body = body.ok_or_else(|| fail(8, format!("header length {n} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..body])
            .map_err(|e| fail(PREFIX_LEN, format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(fail(PREFIX_LEN, format!("stored as {:?}, requested {:?}", header.dtype, T::DTYPE)));
        }
        header.model.validate()?;
        let mut off = body;
        let mut take = |what: &str| -> Result<ParamStore<T>> {
            let (store, used) =
                ParamStore::decode(&header.params, &bytes[off..]).map_err(|e| fail(off, format!("{what}: {e}")))?;
            off += used;
            Ok(store)
        };
        let params = take("parameters")?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: take("first moments")?,
                v: take("second moments")?,
            }),
            None => None,
        };
        if off != bytes.len() {
            return Err(fail(off, format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(Checkpoint {
            model: DenoiserModel {
                config: header.model,
                params,
            },
            schedule: header.schedule,
            step: header.step,
            train: header.train,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
