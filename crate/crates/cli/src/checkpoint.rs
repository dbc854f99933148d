//! `DFT1` parameter checkpoints.
//!
//! Layout: the magic `DFT1`, then records until end of file. Each record is
//! name length (u32 LE), name bytes, rank (u32 LE), extents (u32 LE each) and
//! the raw little-endian scalars. Parameters are f32. Records whose name
//! starts with `__` are metadata: their scalars are the bytes of a UTF-8
//! `key=value` text block. `__config__` holds the model layout and
//! `__train__` the mode and forward process the weights were trained under.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ditune_core::finetune::{select_trainable, ScheduleSpec, TrainMode};
use ditune_core::model::{DiT, ModelLayout};
use ditune_core::Tensor;

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 4] = b"DFT1";
pub const CONFIG_RECORD: &str = "__config__";
pub const TRAIN_RECORD: &str = "__train__";

/// How the stored weights were produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMeta {
    pub mode: TrainMode,
    pub schedule: ScheduleSpec,
}

impl TrainMeta {
    pub fn to_text(&self) -> String {
        let (name, power) = schedule_parts(&self.schedule);
        let mut s = format!("mode={}\nschedule={name}\n", self.mode.name());
        if let Some(p) = power {
            s.push_str(&format!("power={p}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut mode = None;
        let mut schedule = None;
        let mut power = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line {line:?}"))?;
            match k.trim() {
                "mode" => mode = Some(TrainMode::parse(v.trim()).map_err(|e| e.to_string())?),
                "schedule" => schedule = Some(v.trim().to_string()),
                "power" => power = Some(v.trim().parse::<f64>().map_err(|_| format!("bad power {v:?}"))?),
                other => return Err(format!("unknown key {other}")),
            }
        }
        let schedule = match (schedule.as_deref(), power) {
            (Some("linear"), None) => ScheduleSpec::Linear,
            (Some("cos"), Some(p)) => ScheduleSpec::CosinePower(p),
            (Some("scos"), Some(p)) => ScheduleSpec::Scos(p),
            (Some("progressive_scos"), None) => ScheduleSpec::ProgressiveScos,
            (s, p) => return Err(format!("inconsistent schedule {s:?} / power {p:?}")),
        };
        Ok(Self {
            mode: mode.ok_or("missing mode")?,
            schedule,
        })
    }
}

pub fn schedule_parts(spec: &ScheduleSpec) -> (&'static str, Option<f64>) {
    match *spec {
        ScheduleSpec::Linear => ("linear", None),
        ScheduleSpec::CosinePower(p) => ("cos", Some(p)),
        ScheduleSpec::Scos(p) => ("scos", Some(p)),
        ScheduleSpec::ProgressiveScos => ("progressive_scos", None),
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_record(buf: &mut Vec<u8>, name: &str, extents: &[usize], payload: impl Iterator<Item = [u8; 4]>) {
    push_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, extents.len());
    extents.iter().for_each(|&e| push_u32(buf, e));
    payload.for_each(|b| buf.extend_from_slice(&b));
}

fn push_text(buf: &mut Vec<u8>, name: &str, text: &str) {
    push_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, 1);
    push_u32(buf, text.len());
    buf.extend_from_slice(text.as_bytes());
}

pub fn encode(model: &DiT<f32>, meta: &TrainMeta) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    push_text(&mut buf, CONFIG_RECORD, &model.layout().to_text());
    push_text(&mut buf, TRAIN_RECORD, &meta.to_text());
    for p in model.params().iter() {
        push_record(
            &mut buf,
            &p.name,
            p.value.shape(),
            p.value.data().iter().map(|v| v.to_le_bytes()),
        );
    }
    buf
}

enum Payload<'a> {
    Text(&'a str),
    Tensor(Tensor<f32>),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {} (need {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn record(&mut self) -> std::result::Result<(String, Payload<'a>), String> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| "record name is not UTF-8".to_string())?;
        let rank = self.u32()?;
        if rank > 8 {
            return Err(format!("record {name}: implausible rank {rank}"));
        }
        let extents = (0..rank)
            .map(|_| self.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = extents
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| format!("record {name}: extents overflow"))?;
        if name.starts_with("__") {
            if rank != 1 {
                return Err(format!("metadata record {name} must have rank 1"));
            }
            let text = std::str::from_utf8(self.take(count)?).map_err(|_| format!("record {name} is not UTF-8"))?;
            return Ok((name.to_string(), Payload::Text(text)));
        }
        let raw = self.take(count.checked_mul(4).ok_or("record too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&extents, data).map_err(|e| format!("record {name}: {e}"))?;
        Ok((name.to_string(), Payload::Tensor(t)))
    }
}

/// Parses a checkpoint; the model comes back with the trainable set of the
/// stored mode selected.
pub fn decode(bytes: &[u8]) -> std::result::Result<(DiT<f32>, TrainMeta), String> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err("unknown magic (expected DFT1)".into());
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut texts = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let (name, payload) = r.record()?;
        let dup = match payload {
            Payload::Text(t) => texts.insert(name.clone(), t).is_some(),
            Payload::Tensor(t) => tensors.insert(name.clone(), t).is_some(),
        };
        if dup {
            return Err(format!("duplicate record {name}"));
        }
    }
    if let Some(extra) = texts.keys().find(|k| *k != CONFIG_RECORD && *k != TRAIN_RECORD) {
        return Err(format!("unknown metadata record {extra}"));
    }
    let layout = texts.get(CONFIG_RECORD).ok_or("missing __config__ record")?;
    let layout = ModelLayout::from_text(layout).map_err(|e| e.to_string())?;
    let meta = TrainMeta::from_text(texts.get(TRAIN_RECORD).ok_or("missing __train__ record")?)?;
    let mut model = DiT::from_layout(&layout).map_err(|e| e.to_string())?;
    let expected: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    if let Some(missing) = expected.iter().find(|n| !tensors.contains_key(*n)) {
        return Err(format!("missing parameter {missing}"));
    }
    if tensors.len() != expected.len() {
        let extra = tensors.keys().find(|k| !expected.contains(k)).unwrap();
        return Err(format!("unexpected parameter {extra}"));
    }
    for (name, t) in tensors {
        model.set_param(&name, t).map_err(|e| e.to_string())?;
    }
    select_trainable(&mut model, meta.mode).map_err(|e| e.to_string())?;
    Ok((model, meta))
}

pub fn save(path: &Path, model: &DiT<f32>, meta: &TrainMeta) -> Result<()> {
    fs::write(path, encode(model, meta)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<(DiT<f32>, TrainMeta)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|d| format_err(path, d))
}
