//! On-disk artifacts: binary PPM/PGM dumps, checkpoints, JSON and CSV reports.
//! Every writer goes through [`write_atomic`].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::protocol::{EpochLoss, MetricsReport};
use crate::segnet::{ArchConfig, ConvBlock, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"HRHF1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Config hash and seed stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    fn comment(&self) -> String {
        format!("config {} seed {}", self.config_hash, self.seed)
    }
}

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// `[0, 1]` to a byte, rounding half up. Out-of-range values saturate.
pub fn quantize(v: f64) -> Result<u8> {
    if !v.is_finite() {
        return Err(Error::Invalid(format!("non-finite pixel {v}")));
    }
    Ok((v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
}

/// Binary PPM (P6, maxval 255) of a `[3, H, W]` image.
pub fn encode_ppm(image: &Tensor, stamp: &Stamp) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Shape(format!("ppm wants [3, H, W], got {:?}", image.shape())));
    };
    let d = image.data();
    let hw = h * w;
    let mut out = format!("P6\n# {}\n{w} {h}\n255\n", stamp.comment()).into_bytes();
    out.reserve(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push(quantize(d[c * hw + p])?);
        }
    }
    Ok(out)
}

/// Binary PGM (P5, maxval 255) of raw label indices.
pub fn encode_pgm(labels: &[u8], height: usize, width: usize, stamp: &Stamp) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Shape(format!("{} labels for {height}x{width}", labels.len())));
    }
    let mut out = format!("P5\n# {}\n{width} {height}\n255\n", stamp.comment()).into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

/// Parsed PNM: magic, comments, dimensions and raw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub magic: String,
    pub comments: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u8>,
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let bad = |m: &str| Error::Format(format!("pnm: {m}"));
    let mut pos = 0;
    let mut comments = Vec::new();
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let magic = tokens[0].clone();
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("unsupported magic")),
    };
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    Ok(Pnm { magic, comments, width, height, samples: bytes[pos..pos + n].to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    arch: ArchConfig,
    step: usize,
    classes: usize,
    universe: Vec<u8>,
    stamp: Stamp,
    arrays: Vec<ArrayEntry>,
}

/// A model plus the class universe it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    /// Global class ids of the head channels after background.
    pub universe: Vec<u8>,
    pub stamp: Stamp,
}

fn named_arrays(m: &ModelState) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = m.param_names().into_iter().zip(m.params()).collect();
    for (i, b) in m.blocks.iter().enumerate() {
        out.push((format!("block{i}.bn.running_mean"), &b.running_mean));
        out.push((format!("block{i}.bn.running_var"), &b.running_var));
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let arrays = named_arrays(&ck.model);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in &arrays {
        entries.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.len();
    }
    let header = CheckpointHeader {
        arch: ck.model.arch,
        step: ck.model.step,
        classes: ck.model.classes(),
        universe: ck.universe.clone(),
        stamp: ck.stamp.clone(),
        arrays: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(17 + json.len() + 8 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 17 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic".into()));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(17..).filter(|b| b.len() >= hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    let data = &body[hlen..];
    if data.len() % 8 != 0 {
        return Err(bad("data section not a multiple of 8 bytes".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let take = |name: &str| -> Result<Tensor> {
        let e = header
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing array {name}")))?;
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(format!("array {name} out of bounds")))?;
        Ok(Tensor::new(e.shape.clone(), slice.to_vec())?)
    };
    let mut blocks = Vec::with_capacity(header.arch.blocks);
    for i in 0..header.arch.blocks {
        blocks.push(ConvBlock {
            weight: take(&format!("block{i}.conv.weight"))?,
            gamma: take(&format!("block{i}.bn.gamma"))?,
            beta: take(&format!("block{i}.bn.beta"))?,
            running_mean: take(&format!("block{i}.bn.running_mean"))?,
            running_var: take(&format!("block{i}.bn.running_var"))?,
        });
    }
    let model = ModelState {
        arch: header.arch,
        blocks,
        head_weight: take("head.weight")?,
        head_bias: take("head.bias")?,
        step: header.step,
    };
    if model.classes() != header.classes || header.universe.len() + 1 != header.classes {
        return Err(bad(format!(
            "{} head channels, header says {} over universe {:?}",
            model.classes(),
            header.classes,
            header.universe
        )));
    }
    let expected: usize = named_arrays(&model).iter().map(|(_, t)| t.len()).sum();
    if expected != values.len() {
        return Err(bad(format!("{} stored values, {expected} used", values.len())));
    }
    if model.blocks.iter().any(|b| b.running_var.data().iter().any(|&v| !(v > 0.0))) {
        return Err(bad("non-positive running variance".into()));
    }
    Ok(Checkpoint { model, universe: header.universe, stamp: header.stamp })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// One row per (step, epoch). Floats use shortest round-trip formatting.
pub fn loss_csv(curve: &[EpochLoss], stamp: &Stamp) -> String {
    let mut s = format!("# {}\nstep,epoch,kd,seg,total\n", stamp.comment());
    for c in curve {
        s.push_str(&format!("{},{},{:?},{:?},{:?}\n", c.step, c.epoch, c.kd, c.seg, c.total));
    }
    s
}

/// One row per step: grouped mIoU then per-channel IoU, blank when undefined.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let stamp = Stamp { config_hash: report.config_hash.clone(), seed: report.seed };
    let width = report.history.iter().map(|h| h.iou.len()).max().unwrap_or(0);
    let mut s = format!("# {} method {}\nstep,old_miou,new_miou,all_miou", stamp.comment(), report.method.name());
    for c in 0..width {
        s.push_str(&format!(",iou_{c}"));
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for h in &report.history {
        s.push_str(&format!("{},{},{},{}", h.step, cell(h.old_miou), cell(h.new_miou), cell(h.all_miou)));
        for c in 0..width {
            s.push(',');
            s.push_str(&cell(h.iou.get(c).copied().flatten()));
        }
        s.push('\n');
    }
    s
}
