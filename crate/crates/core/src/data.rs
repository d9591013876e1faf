//! IDX datasets, input normalization, CSV tables and the JSON experiment
//! configuration and manifest documents.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::rng;
use crate::stats::Entry;
use crate::theory::NormPair;
use crate::train::TrainSpec;

pub const CONFIG_SCHEMA: &str = "mfadvlab-config/1";
pub const MANIFEST_SCHEMA: &str = "mfadvlab-manifest/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One image per row, pixel values in [0, 1].
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f64> {
        self.images.row(i)
    }

    /// The first `n` examples, or `n` examples drawn without replacement by a
    /// seeded shuffle.
    pub fn subset(&self, n: usize, shuffle_seed: Option<u64>) -> Dataset {
        let n = n.min(self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut rng::stream(seed, 0, rng::domain::SHUFFLE));
        }
        idx.truncate(n);
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image/label pair; gzip-compressed files are accepted.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path.as_ref())?;
    parse_idx(&img, &lab, images_path.file_stem().and_then(|s| s.to_str()).unwrap_or("idx"))
}

pub fn parse_idx(img: &[u8], lab: &[u8], name: &str) -> Result<Dataset> {
    let magic = be_u32(img, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!("image file has magic {magic:#010x}, expected 0x00000803")));
    }
    let lmagic = be_u32(lab, 0)?;
    if lmagic != 0x0000_0801 {
        return Err(Error::Format(format!("label file has magic {lmagic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(img, 4)? as usize;
    let rows = be_u32(img, 8)? as usize;
    let cols = be_u32(img, 12)? as usize;
    let ln = be_u32(lab, 4)? as usize;
    if n != ln {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    let d = rows.checked_mul(cols).ok_or_else(|| Error::Format("image size overflows".into()))?;
    let need = n.checked_mul(d).and_then(|v| v.checked_add(16)).ok_or_else(|| Error::Format("image count overflows".into()))?;
    if img.len() < need {
        return Err(Error::Format(format!("image file truncated: {} of {need} bytes", img.len())));
    }
    if lab.len() < 8 + n {
        return Err(Error::Format(format!("label file truncated: {} of {} bytes", lab.len(), 8 + n)));
    }
    let pixels: Vec<f64> = img[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Array2::from_shape_vec((n, d), pixels).expect("length checked");
    let labels = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    Ok(Dataset { images, labels, name: name.to_string() })
}

/// Encodes a dataset back into IDX bytes (images, labels).
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::Dimension { what: "IDX image size", expected: ds.dim(), got: rows * cols });
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [0x803u32, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [0x801u32, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

/// Rescales `x` to Euclidean norm `sqrt(d)`.
pub fn normalize_sqrt_d(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Precondition("cannot normalize a zero or non-finite vector".into()));
    }
    let s = (x.len() as f64).sqrt() / n;
    Ok(x.iter().map(|v| v * s).collect())
}

/// 17 significant digits, enough for an exact f64 round trip.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
}

pub trait CsvRecord {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub train_acc: f64,
    pub fr_diag: f64,
    pub chi_ratio: f64,
}

impl CsvRecord for TraceRow {
    const HEADER: &'static [&'static str] = &["step", "t", "sigma_w2", "sigma_b2", "train_acc", "fr_diag", "chi_ratio"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            fmt_f64(self.t),
            fmt_f64(self.sigma_w2),
            fmt_f64(self.sigma_b2),
            fmt_f64(self.train_acc),
            fmt_f64(self.fr_diag),
            fmt_f64(self.chi_ratio),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundSweepRow {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub l: usize,
    pub pair: NormPair,
    pub eps: f64,
    pub sample_mean: f64,
    pub sample_std: f64,
    pub bound: f64,
}

impl CsvRecord for BoundSweepRow {
    const HEADER: &'static [&'static str] = &["d", "K", "N", "L", "p", "q", "eps", "sample_mean", "sample_std", "bound"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.d.to_string(),
            self.k.to_string(),
            self.n.to_string(),
            self.l.to_string(),
            self.pair.p.to_string(),
            self.pair.q.to_string(),
            fmt_f64(self.eps),
            fmt_f64(self.sample_mean),
            fmt_f64(self.sample_std),
            fmt_f64(self.bound),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MCSampleRow {
    pub replicate: usize,
    pub probe: usize,
    pub value: f64,
}

impl CsvRecord for MCSampleRow {
    const HEADER: &'static [&'static str] = &["replicate", "probe", "value"];
    fn fields(&self) -> Vec<String> {
        vec![self.replicate.to_string(), self.probe.to_string(), fmt_f64(self.value)]
    }
}

pub fn write_csv<R: CsvRecord>(records: &[R], path: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<Vec<String>> = records.iter().map(CsvRecord::fields).collect();
    write_table(path, R::HEADER, &rows)
}

/// Writes a header row and data rows; values must not contain commas.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV file".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Keep only this many training examples.
    #[serde(default)]
    pub subset: Option<usize>,
    /// Shuffle with this seed before truncating; first-n otherwise.
    #[serde(default)]
    pub subset_seed: Option<u64>,
    /// Without test files, the last `holdout` examples form the test set.
    #[serde(default)]
    pub holdout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSection {
    pub replicates: usize,
    /// Number of random probe inputs of norm sqrt(d).
    #[serde(default = "one_usize")]
    pub inputs: usize,
    /// Entries recorded at every probe input.
    pub entries: Vec<Entry>,
}

fn one_usize() -> usize {
    1
}

/// Axis values and knobs for the sweep-style subcommands. Every field has a
/// default so each subcommand reads only what it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub d_values: Vec<usize>,
    pub l_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub eps_values: Vec<f64>,
    pub pairs: Vec<NormPair>,
    pub samples: usize,
    pub m_lower: f64,
    pub m_upper: f64,
    pub lr_values: Vec<f64>,
    pub t_values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            d_values: Vec::new(),
            l_values: Vec::new(),
            n_values: Vec::new(),
            eps_values: Vec::new(),
            pairs: NormPair::SUPPORTED.to_vec(),
            samples: 30,
            m_lower: 1e-4,
            m_upper: 1e4,
            lr_values: Vec::new(),
            t_values: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: String,
    pub seed: u64,
    pub network: NetworkConfig,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(seed: u64, network: NetworkConfig) -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA.into(),
            seed,
            network,
            attack: None,
            train: None,
            mc: None,
            data: None,
            sweep: SweepSection::default(),
            output_dir: default_out(),
        }
    }
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(CONFIG_SCHEMA) => {}
        other => return Err(Error::Schema(other.unwrap_or("<missing>").to_string())),
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)?;
    cfg.network.validate()?;
    Ok(cfg)
}

pub fn write_config(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub subcommand: String,
    pub artifact_version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::Schema(m.schema));
    }
    Ok(m)
}
