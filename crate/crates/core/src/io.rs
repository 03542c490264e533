//! Dataset and checkpoint files.
//!
//! Both start with a text header of `key: value` lines closed by
//! `end_header`, followed by a binary payload of little-endian `u64` counts
//! and `f64` values. Floats in the header use the shortest representation
//! that parses back to the same bits, so save, load and save again produces
//! identical bytes.
//!
//! Dataset payload, per sequence in header order:
//! each frame as `len: u64` then `len` floats; then the number of annotated
//! frames, and for each `frame: u64`, `count: u64` and per object
//! `class: u64, cx, cy, w, h`.
//!
//! Checkpoint payload: every tensor listed in the header, then the optimizer
//! cache and velocity buffers in the same order when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::grid::{LabeledObject, ModelConfig};
use crate::optimizer::{OptState, RmsPropConfig};
use crate::rnn::{Candidate, GruNetwork, NetworkDims};

pub const DATASET_MAGIC: &str = "VIDREFINE-DATASET";
pub const CHECKPOINT_MAGIC: &str = "VIDREFINE-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "end_header";

struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Header(format!("missing key `{key}`")))
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Header(format!("bad value for `{key}`: {v:?}")))
    }
}

/// Splits `bytes` into header and payload, checking magic and version.
fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Header, &'a [u8])> {
    let mut pos = 0;
    let mut next_line = || -> Result<&'a str> {
        let rest = &bytes[pos..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Header("header is not terminated".into()))?;
        pos += n + 1;
        std::str::from_utf8(&rest[..n]).map_err(|_| Error::Header("header is not UTF-8".into()))
    };

    let first = next_line().map_err(|_| Error::Format(format!("not a {magic} file")))?;
    if first != magic {
        return Err(Error::Format(format!("bad magic: expected {magic}, found {first:?}")));
    }
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == END {
            break;
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::Header(format!("expected `key: value`, got {line:?}")))?;
        entries.push((k.to_string(), v.to_string()));
    }
    let header = Header { entries };
    let version: u32 = header.parse("format_version")?;
    if version > FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    Ok((header, &bytes[pos..]))
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("payload is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} unexpected trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains('\n') || id.trim() != id {
        return Err(Error::Format(format!(
            "sequence id {id:?} must be non-empty, on one line and without surrounding whitespace"
        )));
    }
    Ok(())
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut head = format!(
        "{DATASET_MAGIC}\nformat_version: {FORMAT_VERSION}\nS: {}\nB: {}\nC: {}\nT: {}\nsequences: {}\n",
        ds.s,
        ds.b,
        ds.c,
        ds.t,
        ds.sequences.len()
    );
    for seq in &ds.sequences {
        check_id(&seq.id)?;
        head.push_str(&format!("sequence: {}\n", seq.id));
    }
    head.push_str(END);
    head.push('\n');

    let mut out = head.into_bytes();
    for seq in &ds.sequences {
        for f in &seq.frames {
            put_u64(&mut out, f.len() as u64);
            put_f64s(&mut out, f);
        }
        put_u64(&mut out, seq.annotations.len() as u64);
        for (&frame, objs) in &seq.annotations {
            put_u64(&mut out, frame as u64);
            put_u64(&mut out, objs.len() as u64);
            for o in objs {
                put_u64(&mut out, o.class_id as u64);
                put_f64s(&mut out, &[o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h]);
            }
        }
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let (h, payload) = split_header(bytes, DATASET_MAGIC)?;
    let (s, b, c, t): (usize, usize, usize, usize) = (h.parse("S")?, h.parse("B")?, h.parse("C")?, h.parse("T")?);
    let count: usize = h.parse("sequences")?;
    let ids: Vec<&str> = h.all("sequence").collect();
    if ids.len() != count {
        return Err(Error::Header(format!(
            "header declares {count} sequences but names {}",
            ids.len()
        )));
    }
    let frame_len = s * s * (5 * b + c);
    let mut p = Payload { bytes: payload, pos: 0 };
    let mut sequences = Vec::with_capacity(count);
    for id in ids {
        let mut frames = Vec::with_capacity(t);
        for frame in 0..t {
            let len = p.usize()?;
            if len != frame_len {
                return Err(Error::FrameLength {
                    seq_id: id.to_string(),
                    frame,
                    expected: frame_len,
                    got: len,
                });
            }
            frames.push(p.f64s(len)?);
        }
        let mut annotations = BTreeMap::new();
        for _ in 0..p.usize()? {
            let frame = p.usize()?;
            if frame >= t {
                return Err(Error::Format(format!("sequence {id} annotates frame {frame} of {t}")));
            }
            let n = p.usize()?;
            let mut objs = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let class_id = p.usize()?;
                let v = p.f64s(4)?;
                objs.push(LabeledObject {
                    class_id,
                    bbox: BoxGeometry::new(v[0], v[1], v[2], v[3]),
                });
            }
            if annotations.insert(frame, objs).is_some() {
                return Err(Error::Format(format!("sequence {id} annotates frame {frame} twice")));
            }
        }
        sequences.push(Sequence {
            id: id.to_string(),
            frames,
            annotations,
        });
    }
    p.finish()?;
    Ok(Dataset { s, b, c, t, sequences })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

/// Trained (or freshly initialised) model plus what is needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub net: GruNetwork,
    pub optimizer: Option<OptState>,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub epochs_done: usize,
}

fn opt_line(o: &Option<f64>) -> String {
    o.map_or_else(|| "none".to_string(), |v| v.to_string())
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.model.validate()?;
    ck.net.validate()?;
    let m = &ck.model;
    let hidden: Vec<String> = ck.net.layers.iter().map(|l| l.hidden.to_string()).collect();
    let mut head = String::new();
    let mut kv = |k: &str, v: String| {
        head.push_str(k);
        head.push_str(": ");
        head.push_str(&v);
        head.push('\n');
    };
    kv("format_version", FORMAT_VERSION.to_string());
    kv("S", m.s.to_string());
    kv("B", m.b.to_string());
    kv("C", m.c.to_string());
    kv("T", m.t.to_string());
    kv("alpha", m.alpha.to_string());
    kv("beta", m.beta.to_string());
    kv("gamma", m.gamma.to_string());
    kv("lambda_coord", m.lambda_coord.to_string());
    kv("lambda_noobj", m.lambda_noobj.to_string());
    kv("detect_threshold", m.detect_threshold.to_string());
    kv("nms_iou", m.nms_iou.to_string());
    kv("input", ck.net.input_dim().to_string());
    kv("hidden", hidden.join(","));
    kv("candidate", ck.net.candidate.name().to_string());
    kv("dropout", ck.net.dropout.to_string());
    kv("init_seed", ck.init_seed.to_string());
    kv("shuffle_seed", ck.shuffle_seed.to_string());
    kv("epochs_done", ck.epochs_done.to_string());
    match &ck.optimizer {
        None => kv("optimizer", "none".into()),
        Some(st) => {
            let c = &st.config;
            kv("optimizer", "rmsprop".into());
            kv("lr", c.lr.to_string());
            kv("rho", c.rho.to_string());
            kv("momentum", c.momentum.to_string());
            kv("eps", c.eps.to_string());
            kv("clip", opt_line(&c.clip));
            kv("steps", st.steps.to_string());
        }
    }
    let tensors = ck.net.tensors();
    for (name, _, [r, c]) in &tensors {
        kv("tensor", format!("{name} {r} {c}"));
    }
    let mut out = format!("{CHECKPOINT_MAGIC}\n{head}{END}\n").into_bytes();
    for (_, t, _) in &tensors {
        put_f64s(&mut out, t);
    }
    if let Some(st) = &ck.optimizer {
        if st.cache.len() != tensors.len() || st.velocity.len() != tensors.len() {
            return Err(Error::dim("optimizer buffers", tensors.len(), st.cache.len()));
        }
        for (buf, (name, t, _)) in st.cache.iter().chain(&st.velocity).zip(tensors.iter().cycle()) {
            if buf.len() != t.len() {
                return Err(Error::dim(format!("optimizer buffer for {name}"), t.len(), buf.len()));
            }
            put_f64s(&mut out, buf);
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (h, payload) = split_header(bytes, CHECKPOINT_MAGIC)?;
    let model = ModelConfig {
        s: h.parse("S")?,
        b: h.parse("B")?,
        c: h.parse("C")?,
        t: h.parse("T")?,
        alpha: h.parse("alpha")?,
        beta: h.parse("beta")?,
        gamma: h.parse("gamma")?,
        lambda_coord: h.parse("lambda_coord")?,
        lambda_noobj: h.parse("lambda_noobj")?,
        detect_threshold: h.parse("detect_threshold")?,
        nms_iou: h.parse("nms_iou")?,
    };
    model.validate().map_err(|e| Error::Header(e.to_string()))?;
    let hidden_text = h.get("hidden")?;
    let hidden = if hidden_text.is_empty() {
        Vec::new()
    } else {
        hidden_text
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Header(format!("bad hidden size {v:?}"))))
            .collect::<Result<Vec<usize>>>()?
    };
    let dims = NetworkDims {
        input: h.parse("input")?,
        hidden,
    };
    let mut net = GruNetwork::zeros(&dims);
    net.candidate = Candidate::parse(h.get("candidate")?)
        .ok_or_else(|| Error::Header(format!("unknown candidate activation {:?}", h.get("candidate").unwrap_or(""))))?;
    net.dropout = h.parse("dropout")?;

    let declared: Vec<&str> = h.all("tensor").collect();
    let expected: Vec<String> = net
        .tensors()
        .iter()
        .map(|(n, _, [r, c])| format!("{n} {r} {c}"))
        .collect();
    if declared != expected {
        return Err(Error::Header(format!(
            "tensor table does not match the declared architecture ({} entries, expected {})",
            declared.len(),
            expected.len()
        )));
    }

    let mut p = Payload { bytes: payload, pos: 0 };
    for t in net.tensors_mut() {
        let v = p.f64s(t.len())?;
        t.copy_from_slice(&v);
    }
    let optimizer = match h.get("optimizer")? {
        "none" => None,
        "rmsprop" => {
            let clip = match h.get("clip")? {
                "none" => None,
                _ => Some(h.parse("clip")?),
            };
            let config = RmsPropConfig {
                lr: h.parse("lr")?,
                rho: h.parse("rho")?,
                momentum: h.parse("momentum")?,
                eps: h.parse("eps")?,
                clip,
            };
            let sizes: Vec<usize> = net.tensors().iter().map(|(_, t, _)| t.len()).collect();
            let mut st = OptState::new(config, &sizes);
            st.steps = h.parse("steps")?;
            for buf in st.cache.iter_mut().chain(st.velocity.iter_mut()) {
                let v = p.f64s(buf.len())?;
                buf.copy_from_slice(&v);
            }
            Some(st)
        }
        other => return Err(Error::Header(format!("unknown optimizer {other:?}"))),
    };
    p.finish()?;
    net.validate()?;
    Ok(Checkpoint {
        model,
        net,
        optimizer,
        init_seed: h.parse("init_seed")?,
        shuffle_seed: h.parse("shuffle_seed")?,
        epochs_done: h.parse("epochs_done")?,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}
