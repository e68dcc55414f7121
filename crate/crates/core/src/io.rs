//! Binary and text file formats.
//!
//! All binary integers and floats are little-endian. Writes go to a temporary
//! sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{Linear, MlpModel, OptimizerState};
use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;
use crate::scoring::GaussianFit;
use crate::trainer::{Checkpoint, TrainConfig};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PALM";
pub const MODEL_MAGIC: &[u8; 8] = b"PALMMODL";
pub const FORMAT_VERSION: u32 = 1;

const EMBEDDING_HEADER: usize = 4 + 4 + 8 + 4 + 1;

const SECTION_CONFIG: u8 = 1;
const SECTION_ENCODER: u8 = 2;
const SECTION_BANK: u8 = 3;
const SECTION_GAUSSIAN: u8 = 4;
const SECTION_OPTIMIZER: u8 = 5;

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn finish(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// ---------------------------------------------------------------------------
// Embedding files

/// Encodes a dataset; values are stored as `f32`.
pub fn encode_embeddings(data: &Dataset) -> Result<Vec<u8>> {
    let (n, d) = data.inputs.dim();
    let labeled = data.labels.is_some();
    let mut out = Vec::with_capacity(EMBEDDING_HEADER + n * (4 * d + 4 * labeled as usize));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    put_u32(&mut out, d)?;
    out.push(labeled as u8);
    for (i, row) in data.inputs.rows().into_iter().enumerate() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(labels) = &data.labels {
            let l = i32::try_from(labels[i]).map_err(|_| Error::Format(format!("label {} too large", labels[i])))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::Format("not an embedding file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported embedding format version {version}")));
    }
    let count = r.u64()?;
    let dim = r.usize32()?;
    let labeled = match r.u8()? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad label flag {f}"))),
    };
    let record = 4 * dim as u64 + if labeled { 4 } else { 0 };
    let expected = count
        .checked_mul(record)
        .and_then(|b| b.checked_add(EMBEDDING_HEADER as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::Format(format!(
            "declared {count} records of dimension {dim} but file has {} bytes",
            bytes.len()
        )));
    }
    let n = count as usize;
    let mut inputs = Array2::zeros((n, dim));
    let mut labels = labeled.then(|| Vec::with_capacity(n));
    for i in 0..n {
        for j in 0..dim {
            inputs[[i, j]] = f32::from_le_bytes(r.array()?) as f64;
        }
        if let Some(ls) = labels.as_mut() {
            let l = i32::from_le_bytes(r.array()?);
            if l < 0 {
                return Err(Error::Format(format!("record {i} has negative label {l}")));
            }
            ls.push(l as usize);
        }
    }
    r.finish()?;
    Dataset::new(inputs, labels).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_embeddings(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, &encode_embeddings(data)?)
}

pub fn read_embeddings(path: &Path) -> Result<Dataset> {
    decode_embeddings(&fs::read(path)?)
}

/// Parses `v1,…,vD[,label]` lines. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_csv_dataset(text: &str, labeled: bool) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Format(format!("line {}: {m}", lineno + 1));
        let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if labeled {
            let l = fields.pop().unwrap_or_default();
            labels.push(l.parse::<usize>().map_err(|_| err(format!("bad label {l:?}")))?);
        }
        if *dim.get_or_insert(fields.len()) != fields.len() || fields.is_empty() {
            return Err(err(format!("expected {} values, found {}", dim.unwrap(), fields.len())));
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value {f:?}")));
            }
            values.push(v);
        }
    }
    let dim = dim.ok_or_else(|| Error::Format("no records".into()))?;
    let inputs = Array2::from_shape_vec((values.len() / dim, dim), values).expect("row widths checked");
    Dataset::new(inputs, labeled.then_some(labels))
}

/// Reads a `.csv` file as text records, anything else as an embedding file.
pub fn read_dataset(path: &Path, csv_labeled: bool) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_csv_dataset(&fs::read_to_string(path)?, csv_labeled)
    } else {
        read_embeddings(path)
    }
}

// ---------------------------------------------------------------------------
// Model files

/// A trained checkpoint with an optional fitted Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub checkpoint: Checkpoint,
    pub gaussian: Option<GaussianFit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigSection {
    config: TrainConfig,
    config_hash: String,
    epoch: usize,
}

fn put_section(out: &mut Vec<u8>, tag: u8, payload: Vec<u8>) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
}

fn put_tensor2(out: &mut Vec<u8>, t: &Array2<f64>) -> Result<()> {
    put_u32(out, 2)?;
    out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
    put_f64s(out, t.iter());
    Ok(())
}

fn put_tensor1(out: &mut Vec<u8>, t: &Array1<f64>) -> Result<()> {
    put_u32(out, 1)?;
    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
    put_f64s(out, t.iter());
    Ok(())
}

fn read_shape(r: &mut Reader, ndim: u32) -> Result<Vec<usize>> {
    let got = r.u32()?;
    if got != ndim {
        return Err(Error::Format(format!("expected a {ndim}-d tensor, found {got}-d")));
    }
    (0..ndim)
        .map(|_| usize::try_from(r.u64()?).map_err(|_| Error::Format("tensor too large".into())))
        .collect()
}

fn read_tensor2(r: &mut Reader) -> Result<Array2<f64>> {
    let s = read_shape(r, 2)?;
    let n = s[0]
        .checked_mul(s[1])
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    Ok(Array2::from_shape_vec((s[0], s[1]), r.f64s(n)?).expect("length matches shape"))
}

fn read_tensor1(r: &mut Reader) -> Result<Array1<f64>> {
    let s = read_shape(r, 1)?;
    Ok(Array1::from(r.f64s(s[0])?))
}

fn put_layers(out: &mut Vec<u8>, layers: &[Linear]) -> Result<()> {
    put_u32(out, layers.len())?;
    for l in layers {
        put_tensor2(out, &l.weight)?;
        put_tensor1(out, &l.bias)?;
    }
    Ok(())
}

fn read_layers(r: &mut Reader) -> Result<Vec<Linear>> {
    let n = r.usize32()?;
    (0..n)
        .map(|_| {
            Ok(Linear {
                weight: read_tensor2(r)?,
                bias: read_tensor1(r)?,
            })
        })
        .collect()
}

pub fn encode_model(file: &ModelFile) -> Result<Vec<u8>> {
    let ck = &file.checkpoint;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, 4 + file.gaussian.is_some() as usize)?;

    let config = ConfigSection {
        config: ck.config.clone(),
        config_hash: ck.config_hash.clone(),
        epoch: ck.epoch,
    };
    put_section(&mut out, SECTION_CONFIG, serde_json::to_vec(&config)?);

    let mut enc = Vec::new();
    put_u32(&mut enc, ck.model.encoder_layers)?;
    put_layers(&mut enc, &ck.model.layers)?;
    put_section(&mut out, SECTION_ENCODER, enc);

    let bank = &ck.bank;
    let mut b = Vec::new();
    put_u32(&mut b, bank.classes())?;
    put_u32(&mut b, bank.per_class())?;
    put_u32(&mut b, bank.dim())?;
    put_f64s(&mut b, [bank.alpha()].iter());
    put_f64s(&mut b, bank.rows().iter());
    put_section(&mut out, SECTION_BANK, b);

    if let Some(fit) = &file.gaussian {
        let mut g = Vec::new();
        put_u32(&mut g, fit.classes())?;
        put_u32(&mut g, fit.dim())?;
        put_f64s(&mut g, [fit.shrinkage()].iter());
        put_f64s(&mut g, fit.means().iter());
        put_f64s(&mut g, fit.covariance().iter());
        put_section(&mut out, SECTION_GAUSSIAN, g);
    }

    let opt = &ck.optimizer;
    let mut o = Vec::new();
    put_f64s(&mut o, [opt.base_lr, opt.momentum, opt.weight_decay].iter());
    o.extend_from_slice(&(opt.epoch as u64).to_le_bytes());
    o.extend_from_slice(&(opt.total_epochs as u64).to_le_bytes());
    put_layers(&mut o, &opt.buffers)?;
    put_section(&mut out, SECTION_OPTIMIZER, o);
    Ok(out)
}

fn read_bank(r: &mut Reader) -> Result<PrototypeBank> {
    let (c, k, d) = (r.usize32()?, r.usize32()?, r.usize32()?);
    let alpha = r.f64()?;
    let n = c
        .checked_mul(k)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::Format("bank too large".into()))?;
    let rows = Array2::from_shape_vec((c * k, d), r.f64s(n)?).expect("length matches shape");
    PrototypeBank::from_unit_rows(c, k, rows, alpha).map_err(|e| Error::Format(format!("prototype bank: {e}")))
}

fn read_gaussian(r: &mut Reader) -> Result<GaussianFit> {
    let (c, e) = (r.usize32()?, r.usize32()?);
    let shrinkage = r.f64()?;
    let means = Array2::from_shape_vec((c, e), r.f64s(c * e)?).expect("length matches shape");
    let cov = Array2::from_shape_vec((e, e), r.f64s(e * e)?).expect("length matches shape");
    GaussianFit::new(means, cov, shrinkage)
}

fn read_optimizer(r: &mut Reader) -> Result<OptimizerState> {
    let (base_lr, momentum, weight_decay) = (r.f64()?, r.f64()?, r.f64()?);
    let epoch = r.u64()? as usize;
    let total_epochs = r.u64()? as usize;
    Ok(OptimizerState {
        buffers: read_layers(r)?,
        base_lr,
        momentum,
        weight_decay,
        epoch,
        total_epochs,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let count = r.u32()?;
    let (mut config, mut model, mut bank, mut gaussian, mut optimizer) = (None, None, None, None, None);
    let mut last_tag = 0;
    for _ in 0..count {
        let tag = r.u8()?;
        if tag <= last_tag {
            return Err(Error::Format(format!("section {tag} out of order")));
        }
        last_tag = tag;
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("section too large".into()))?;
        let mut s = Reader::new(r.take(len)?);
        match tag {
            SECTION_CONFIG => {
                let c: ConfigSection = serde_json::from_slice(s.take(len)?)?;
                c.config.validate()?;
                config = Some(c);
            }
            SECTION_ENCODER => {
                let encoder_layers = s.usize32()?;
                model = Some(MlpModel::from_layers(read_layers(&mut s)?, encoder_layers)?);
            }
            SECTION_BANK => bank = Some(read_bank(&mut s)?),
            SECTION_GAUSSIAN => gaussian = Some(read_gaussian(&mut s)?),
            SECTION_OPTIMIZER => optimizer = Some(read_optimizer(&mut s)?),
            other => return Err(Error::Format(format!("unknown section tag {other}"))),
        }
        s.finish()?;
    }
    r.finish()?;
    let missing = |what: &str| Error::Format(format!("model file lacks the {what} section"));
    let config = config.ok_or_else(|| missing("config"))?;
    let model = model.ok_or_else(|| missing("encoder"))?;
    let bank = bank.ok_or_else(|| missing("prototype bank"))?;
    let optimizer = optimizer.unwrap_or_else(|| {
        let c = &config.config;
        let mut o = OptimizerState::new(&model, c.base_lr, c.momentum, c.weight_decay, c.epochs);
        o.epoch = config.epoch;
        o
    });
    if bank.dim() != model.output_dim() {
        return Err(Error::Format("prototype dimension does not match the projector".into()));
    }
    Ok(ModelFile {
        checkpoint: Checkpoint {
            config: config.config,
            model,
            bank,
            optimizer,
            epoch: config.epoch,
            config_hash: config.config_hash,
        },
        gaussian,
    })
}

pub fn write_model(path: &Path, file: &ModelFile) -> Result<()> {
    write_atomic(path, &encode_model(file)?)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    decode_model(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Score files

/// `index,score` lines with a header.
pub fn format_scores(values: &[f64]) -> String {
    let mut s = String::from("index,score\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

/// Parses a scores CSV, returning values in file order. A header line is
/// optional.
pub fn parse_scores(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line == "index,score") {
            continue;
        }
        let err = |m: &str| Error::Format(format!("line {}: {m}", lineno + 1));
        let (idx, score) = line.split_once(',').ok_or_else(|| err("expected `index,score`"))?;
        idx.trim().parse::<usize>().map_err(|_| err("bad index"))?;
        let v: f64 = score.trim().parse().map_err(|_| err("bad score"))?;
        if !v.is_finite() {
            return Err(err("non-finite score"));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Format("no scores".into()));
    }
    Ok(out)
}
