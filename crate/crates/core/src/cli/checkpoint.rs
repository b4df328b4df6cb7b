//! KMCK checkpoints.
//!
//! Layout: the magic `KMCK`, a `u32` format version, the strategy tag and
//! the run configuration text (each a `u32` byte length then UTF-8), then
//! named tensors until end of file. A tensor is a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u32` dims and the little-endian `f32`
//! values. All integers are little-endian.
//!
//! Tensor names are `<group>/<name>` for parameters, `adam_m/<group>/<name>`
//! and `adam_v/<group>/<name>` for optimizer moments, and `state/counters`
//! holding the completed epochs and Adam steps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::{Adam, Strategy, TrainState};
use crate::model::{ParameterSet, GROUPS};
use crate::numerics::{Scalar, Tensor, TensorMap};

const MAGIC: &[u8; 4] = b"KMCK";
pub const FORMAT_VERSION: u32 = 1;
const COUNTERS: &str = "state/counters";
/// Largest counter stored exactly in an `f32`.
const MAX_COUNTER: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub strategy: Strategy,
    /// Canonical run configuration text.
    pub config: String,
    pub state: TrainState<f32>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "KMCK checkpoint",
        detail: detail.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_str(out, name)?;
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    Ok(())
}

fn put_set<T: Scalar>(out: &mut Vec<u8>, prefix: &str, set: &ParameterSet<T>) -> Result<()> {
    for (group, map) in set.groups() {
        for (name, t) in map.iter() {
            put_tensor(out, &format!("{prefix}{group}/{name}"), t)?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor too large"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((
            name.clone(),
            Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?,
        ))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn group_index(group: &str) -> Result<usize> {
    GROUPS
        .iter()
        .position(|g| *g == group)
        .ok_or_else(|| bad(format!("unknown parameter group `{group}`")))
}

impl Checkpoint {
    pub fn new(strategy: Strategy, config: String, state: TrainState<f32>) -> Self {
        Checkpoint {
            strategy,
            config,
            state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let st = &self.state;
        for (what, v) in [("epoch", st.epoch), ("Adam step", st.adam.step)] {
            if v > MAX_COUNTER {
                return Err(bad(format!("{what} counter {v} exceeds {MAX_COUNTER}")));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, self.strategy.tag())?;
        put_str(&mut out, &self.config)?;
        put_set(&mut out, "", &st.params)?;
        put_set(&mut out, "adam_m/", &st.adam.m)?;
        put_set(&mut out, "adam_v/", &st.adam.v)?;
        let counters = Tensor::new([2], vec![st.epoch as f32, st.adam.step as f32])?;
        put_tensor(&mut out, COUNTERS, &counters)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing KMCK header"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let strategy: Strategy = r.string()?.parse()?;
        let config = r.string()?;
        let mut sets = [ParameterSet::empty(), ParameterSet::empty(), ParameterSet::empty()];
        let mut counters = None;
        while !r.done() {
            let (name, t) = r.tensor()?;
            if name == COUNTERS {
                if t.shape() != [2] {
                    return Err(bad(format!("{COUNTERS} has shape {:?}", t.shape())));
                }
                counters = Some((t.data()[0], t.data()[1]));
                continue;
            }
            let (slot, rest) = match name.split_once('/') {
                Some(("adam_m", rest)) => (1, rest),
                Some(("adam_v", rest)) => (2, rest),
                _ => (0, name.as_str()),
            };
            let (group, tensor_name) = rest
                .split_once('/')
                .ok_or_else(|| bad(format!("tensor name `{name}`")))?;
            let map: &mut TensorMap<f32> = sets[slot].groups_mut()[group_index(group)?].1;
            map.insert(tensor_name, t)?;
        }
        let (epoch, step) = counters.ok_or_else(|| bad(format!("missing {COUNTERS}")))?;
        let counter = |v: f32| -> Result<u64> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(bad(format!("counter {v} is not a non-negative integer")))
            }
        };
        let [params, m, v] = sets;
        for moments in [&m, &v] {
            params
                .check_layout(moments)
                .map_err(|e| bad(format!("optimizer moments do not match parameters: {e}")))?;
        }
        Ok(Checkpoint {
            strategy,
            config,
            state: TrainState {
                params,
                adam: Adam {
                    m,
                    v,
                    step: counter(step)?,
                },
                epoch: counter(epoch)?,
            },
        })
    }

    /// Writes through a temporary file so a failed save keeps the old one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("kmck.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Incompatible(m) => Error::Incompatible(format!("{}: {m}", path.display())),
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    /// Fails unless the stored parameters have the layout `expected`.
    pub fn check_compatible(&self, strategy: Strategy, expected: &ParameterSet<f32>) -> Result<()> {
        if strategy != self.strategy {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with strategy {}, config asks for {}",
                self.strategy, strategy
            )));
        }
        expected
            .check_layout(&self.state.params)
            .map_err(|e| Error::Incompatible(format!("parameter layout differs from the config: {e}")))
    }
}
