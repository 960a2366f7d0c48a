// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats: the EMB1 tensor container with its JSON manifest, run
//! reports, trace CSV files and 16-bit PGM attention maps.
//!
//! EMB1 layout, all integers little-endian:
//!
//! | bytes        | content                                 |
//! |--------------|-----------------------------------------|
//! | 4            | magic `EMB1`                            |
//! | 2            | version, `u16 = 1`                      |
//! | 1            | dtype, `0 = f32`, `1 = f64`             |
//! | 1            | `ndim`                                  |
//! | `8 * ndim`   | dims as `u64`                           |
//! | rest         | row-major payload                       |
//!
//! An embedding matrix is stored with dims `[M, N]`, so each row holds one
//! feature across all tokens. The manifest lives next to the tensor at
//! `<path>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::{partition, TextEmbeddings, TokenPartition};
use crate::error::{Error, FormatError, Result};
use crate::metrics::Field2D;

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> std::result::Result<Self, FormatError> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(FormatError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded EMB1 tensor. `data` is row-major and always `f64`; `dtype`
/// records what was on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(m.row(i).iter().copied());
        }
        Self {
            dims: vec![rows as u64, cols as u64],
            dtype: Dtype::F64,
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims.as_slice() {
            &[rows, cols] => Ok(DMatrix::from_row_slice(rows as usize, cols as usize, &self.data)),
            dims => Err(Error::Shape(format!("expected a 2-D tensor, got dims {dims:?}"))),
        }
    }
}

fn truncated(section: &'static str, expected: usize, found: usize) -> FormatError {
    FormatError::Truncated {
        section,
        expected: expected as u64,
        found: found as u64,
    }
}

/// Serialize a tensor. `f32` output rounds each value to nearest.
pub fn encode_emb1(dims: &[u64], data: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let ndim = u8::try_from(dims.len()).map_err(|_| Error::Shape(format!("{} dims do not fit in u8", dims.len())))?;
    let count = element_count(dims).ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
    if count != data.len() as u64 {
        return Err(Error::Shape(format!("dims {dims:?} hold {count} values, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dims.len() + data.len() * dtype.size());
    out.extend_from_slice(&EMB1_MAGIC);
    out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.push(ndim);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    Ok(out)
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// Parse a complete EMB1 buffer. Nothing is returned unless every check passes.
pub fn decode_emb1(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    if bytes.len() < 4 {
        return Err(truncated("magic", 4, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != EMB1_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated("header", HEADER_LEN, bytes.len()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMB1_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_tag(bytes[6])?;
    let ndim = bytes[7] as usize;

    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(truncated("dims", dims_end, bytes.len()));
    }
    let dims: Vec<u64> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let available = (bytes.len() - dims_end) as u64;
    let payload_len = element_count(&dims)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .ok_or_else(|| FormatError::Truncated {
            section: "payload",
            expected: u64::MAX,
            found: available,
        })?;
    if available < payload_len {
        return Err(FormatError::Truncated {
            section: "payload",
            expected: payload_len,
            found: available,
        });
    }
    if available > payload_len {
        return Err(FormatError::TrailingBytes(available - payload_len));
    }

    let payload = &bytes[dims_end..];
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
    };
    Ok(Tensor { dims, dtype, data })
}

fn io_error(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(decode_emb1(&bytes)?)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_emb1(&tensor.dims, &tensor.data, tensor.dtype)?;
    fs::write(path, bytes).map_err(|e| io_error(path, e).into())
}

/// Encoder layer the embeddings were taken from, by index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerRef {
    Index(i64),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSource {
    pub encoder_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<LayerRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub prompt_text: String,
    /// Token strings for every column, or empty when unknown.
    #[serde(default)]
    pub tokens: Vec<String>,
    pub prompt_len: usize,
    #[serde(default)]
    pub ne_positions: Vec<usize>,
    pub source: ManifestSource,
}

impl Manifest {
    /// Manifest for embeddings that did not come from an encoder.
    pub fn synthetic(prompt_len: usize, ne_positions: Vec<usize>) -> Self {
        Self {
            prompt_text: String::new(),
            tokens: Vec::new(),
            prompt_len,
            ne_positions,
            source: ManifestSource {
                encoder_name: "synthetic".into(),
                layer: None,
            },
        }
    }

    /// Check the manifest against a tensor shape `[M, N]`.
    pub fn check_against(&self, dims: &[u64]) -> std::result::Result<(), FormatError> {
        let inconsistent = |msg: String| Err(FormatError::ManifestInconsistent(msg));
        let &[m, n] = dims else {
            return inconsistent(format!("embeddings must be 2-D, tensor has dims {dims:?}"));
        };
        if m == 0 {
            return inconsistent("embedding dimension is 0".into());
        }
        let n = n as usize;
        if self.prompt_len + 2 > n {
            return inconsistent(format!(
                "prompt_len {} needs at least {} tokens, tensor has {n}",
                self.prompt_len,
                self.prompt_len + 2
            ));
        }
        if !self.tokens.is_empty() && self.tokens.len() != n {
            return inconsistent(format!("{} token strings for {n} columns", self.tokens.len()));
        }
        let mut seen = vec![false; self.prompt_len + 1];
        for &pos in &self.ne_positions {
            if pos == 0 || pos > self.prompt_len {
                return inconsistent(format!("ne position {pos} outside prompt 1..={}", self.prompt_len));
            }
            if std::mem::replace(&mut seen[pos], true) {
                return inconsistent(format!("ne position {pos} listed twice"));
            }
        }
        Ok(())
    }

    /// The manifest's own negative targets as a partition, if it lists any.
    pub fn partition(&self, token_count: usize) -> Result<Option<TokenPartition>> {
        if self.ne_positions.is_empty() {
            return Ok(None);
        }
        partition(self.prompt_len, token_count, &self.ne_positions).map(Some)
    }
}

/// Sidecar manifest path: the tensor path with `.json` appended.
pub fn manifest_path(emb_path: &Path) -> PathBuf {
    let mut s = emb_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|source| {
        FormatError::Json {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e).into())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(path, manifest)
}

/// Read an embedding matrix and its sidecar manifest.
pub fn read_emb(path: &Path) -> Result<(TextEmbeddings, Manifest)> {
    let tensor = read_tensor(path)?;
    let manifest = read_manifest(&manifest_path(path))?;
    manifest.check_against(&tensor.dims)?;
    let emb = TextEmbeddings::new(tensor.to_matrix()?, manifest.prompt_len)?;
    Ok((emb, manifest))
}

/// Write embeddings as `f64` plus the sidecar manifest.
pub fn write_emb(path: &Path, emb: &TextEmbeddings, manifest: &Manifest) -> Result<()> {
    write_emb_as(path, emb, manifest, Dtype::F64)
}

pub fn write_emb_as(path: &Path, emb: &TextEmbeddings, manifest: &Manifest, dtype: Dtype) -> Result<()> {
    let tensor = Tensor {
        dtype,
        ..Tensor::from_matrix(emb.data())
    };
    manifest.check_against(&tensor.dims)?;
    if manifest.prompt_len != emb.prompt_len() {
        return Err(FormatError::ManifestInconsistent(format!(
            "manifest prompt_len {} but embeddings have {}",
            manifest.prompt_len,
            emb.prompt_len()
        ))
        .into());
    }
    write_tensor(path, &tensor)?;
    write_manifest(&manifest_path(path), manifest)
}

/// An `f64` that also survives JSON when it is infinite or NaN, written as
/// the strings `"inf"`, `"-inf"` and `"nan"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsonF64(pub f64);

impl Serialize for JsonF64 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for JsonF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(JsonF64(v)),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(JsonF64(f64::INFINITY)),
                "-inf" => Ok(JsonF64(f64::NEG_INFINITY)),
                "nan" => Ok(JsonF64(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub rule: crate::swr::SpectrumRule,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// `min(M, cols(chi))`, the number of singular values actually computed.
    pub rank_bound: usize,
    /// `min(M, N - p - 1)`, the count that ignores the negative-target columns.
    pub reference_rank_bound: usize,
    pub ne_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceSection {
    pub metric: crate::eot_analysis::DistanceMetric,
    /// Token indices labelling rows and columns of `matrix`.
    pub tokens: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<crate::eot_analysis::SeparationStats>,
}

/// Where one attention map was dumped and how to undo its normalization:
/// `value = min + sample / 65535 * (max - min)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDump {
    pub token: usize,
    pub label: String,
    pub path: String,
    pub min: f64,
    pub max: f64,
}

/// Versioned record of a single command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// The effective configuration, echoed verbatim.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_curve: Option<crate::eot_analysis::RankCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<DistanceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppression: Option<crate::ito::SuppressionReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, JsonF64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maps: Vec<MapDump>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: "eots".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            spectrum: None,
            rank_curve: None,
            distance: None,
            suppression: None,
            metrics: BTreeMap::new(),
            maps: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Structural checks beyond what the field types enforce.
    pub fn validate(&self) -> std::result::Result<(), FormatError> {
        let bad = |msg: String| Err(FormatError::ManifestInconsistent(msg));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(FormatError::SchemaVersion {
                found: self.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        if let Some(s) = &self.spectrum {
            if s.before.len() != s.rank_bound || s.after.len() != s.rank_bound {
                return bad(format!(
                    "spectrum has {} / {} values for rank bound {}",
                    s.before.len(),
                    s.after.len(),
                    s.rank_bound
                ));
            }
        }
        if let Some(c) = &self.rank_curve {
            if c.points.len() != c.singular_values.len() + 1 {
                return bad(format!(
                    "rank curve has {} points for {} singular values",
                    c.points.len(),
                    c.singular_values.len()
                ));
            }
        }
        if let Some(d) = &self.distance {
            let n = d.tokens.len();
            if d.matrix.len() != n || d.matrix.iter().any(|row| row.len() != n) {
                return bad(format!("distance matrix is not {n}x{n}"));
            }
        }
        Ok(())
    }
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    report.validate()?;
    write_json(path, report)
}

/// Read a report, rejecting other schema versions and unknown fields.
pub fn read_report(path: &Path) -> Result<Report> {
    let value: serde_json::Value = read_json(path)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64());
    if found != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(FormatError::SchemaVersion {
            found: found.map_or(0, |v| v.min(u32::MAX as u64) as u32),
            expected: REPORT_SCHEMA_VERSION,
        }
        .into());
    }
    let report: Report = serde_json::from_value(value).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    report.validate()?;
    Ok(report)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    io_error(path, source).into()
}

/// One CSV row per record, with a header taken from the field names.
pub fn write_records_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e).into())
}

pub fn read_records_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// A labelled square matrix, first row and column holding the labels.
pub fn write_matrix_csv(path: &Path, labels: &[usize], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![String::new()];
    header.extend(labels.iter().map(|l| l.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e).into())
}

pub const PGM_MAXVAL: u16 = 65535;

/// Min-max scale `field` to 16 bits. Returns the samples plus `(min, max)`;
/// a constant field maps to all zeros.
pub fn quantize_u16(field: &Field2D) -> (Vec<u16>, f64, f64) {
    let (lo, hi) = (field.min(), field.max());
    let span = hi - lo;
    let samples = field
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * PGM_MAXVAL as f64).round().clamp(0.0, PGM_MAXVAL as f64) as u16
            } else {
                0
            }
        })
        .collect();
    (samples, lo, hi)
}

pub fn encode_pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{PGM_MAXVAL}\n").into_bytes();
    out.reserve(samples.len() * 2);
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// Write `field` as a binary 16-bit PGM and return its `(min, max)`.
pub fn write_pgm16(path: &Path, field: &Field2D) -> Result<(f64, f64)> {
    let (samples, lo, hi) = quantize_u16(field);
    fs::write(path, encode_pgm16(field.width(), field.height(), &samples)).map_err(|e| io_error(path, e))?;
    Ok((lo, hi))
}

/// Parse a P5 file with maxval 65535 into `(width, height, samples)`.
pub fn decode_pgm16(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u16>), FormatError> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(truncated("pgm header", 4, fields.len()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        let mut found = [0u8; 4];
        let head = fields[0].as_bytes();
        found[..head.len().min(4)].copy_from_slice(&head[..head.len().min(4)]);
        return Err(FormatError::BadMagic { found });
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| FormatError::ManifestInconsistent(format!("bad pgm header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != PGM_MAXVAL as usize {
        return Err(FormatError::ManifestInconsistent(format!("pgm maxval {maxval}, expected 65535")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 2 * w * h {
        return Err(truncated("pgm samples", 2 * w * h, body.len()));
    }
    let samples = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_emb(seed: u64, m: usize, n: usize, p: usize) -> TextEmbeddings {
        let mut rng = SeededRng::new(seed);
        TextEmbeddings::new(DMatrix::from_fn(m, n, |_, _| rng.normal()), p).unwrap()
    }

    fn code(e: Error) -> &'static str {
        match e {
            Error::Format(f) => f.code(),
            other => panic!("not a format error: {other}"),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_emb1(&[2, 3], &[0.0; 6], Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 2]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 16 + 48);
    }

    #[test]
    fn row_major_payload() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Tensor::from_matrix(&m);
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.to_matrix().unwrap(), m);
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let emb = random_emb(7, 768, 77, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb1");
        write_emb(&path, &emb, &Manifest::synthetic(4, vec![4])).unwrap();
        let (back, manifest) = read_emb(&path).unwrap();
        assert_eq!(manifest.ne_positions, vec![4]);
        assert!(back
            .data()
            .iter()
            .zip(emb.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn special_values_survive() {
        let data = [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, 1e-310, -1.5];
        let t = decode_emb1(&encode_emb1(&[6], &data, Dtype::F64).unwrap()).unwrap();
        for (a, b) in t.data.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_widens_exactly() {
        let vals: Vec<f32> = vec![0.1, -3.25, 1e-30, 16777217.0];
        let data: Vec<f64> = vals.iter().map(|&v| f64::from(v)).collect();
        let t = decode_emb1(&encode_emb1(&[2, 2], &data, Dtype::F32).unwrap()).unwrap();
        assert_eq!(t.dtype, Dtype::F32);
        for (a, v) in t.data.iter().zip(&vals) {
            assert_eq!(*a, f64::from(*v));
        }
    }

    #[test]
    fn malformed_buffers() {
        let good = encode_emb1(&[2, 2], &[1.0, 2.0, 3.0, 4.0], Dtype::F64).unwrap();
        let check = |bytes: &[u8], want: &str| {
            let err = decode_emb1(bytes).unwrap_err();
            assert_eq!(err.code(), want, "{err}");
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        check(&bad, "E_BAD_MAGIC");
        check(b"EM", "E_TRUNCATED");
        check(&good[..6], "E_TRUNCATED");
        check(&good[..12], "E_TRUNCATED");
        check(&good[..good.len() - 1], "E_TRUNCATED");
        let mut bad = good.clone();
        bad[4] = 2;
        check(&bad, "E_VERSION");
        let mut bad = good.clone();
        bad[6] = 9;
        check(&bad, "E_DTYPE");
        let mut bad = good.clone();
        bad.push(0);
        check(&bad, "E_TRAILING");
        // dims whose product overflows
        let huge = encode_emb1(&[1], &[0.0], Dtype::F64).unwrap();
        let mut bad = huge[..8].to_vec();
        bad[7] = 2;
        bad.extend_from_slice(&u64::MAX.to_le_bytes());
        bad.extend_from_slice(&3u64.to_le_bytes());
        check(&bad, "E_TRUNCATED");
    }

    #[test]
    fn manifest_checks() {
        let m = Manifest::synthetic(4, vec![4]);
        assert!(m.check_against(&[8, 6]).is_ok());
        assert_eq!(m.check_against(&[8, 5]).unwrap_err().code(), "E_MANIFEST");
        assert_eq!(m.check_against(&[8, 6, 1]).unwrap_err().code(), "E_MANIFEST");
        assert_eq!(Manifest::synthetic(4, vec![5]).check_against(&[8, 6]).unwrap_err().code(), "E_MANIFEST");
        assert_eq!(Manifest::synthetic(4, vec![0]).check_against(&[8, 6]).unwrap_err().code(), "E_MANIFEST");
        assert_eq!(Manifest::synthetic(4, vec![2, 2]).check_against(&[8, 6]).unwrap_err().code(), "E_MANIFEST");
        let mut with_tokens = Manifest::synthetic(4, vec![4]);
        with_tokens.tokens = vec!["a".into(); 5];
        assert_eq!(with_tokens.check_against(&[8, 6]).unwrap_err().code(), "E_MANIFEST");
    }

    #[test]
    fn manifest_json_shape() {
        let text = r#"{"prompt_text":"a man without glasses","tokens":[],"prompt_len":4,
            "ne_positions":[4],"source":{"encoder_name":"clip-vit-l-14","layer":"final"}}"#;
        let m: Manifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.source.layer, Some(LayerRef::Name("final".into())));
        let m2: Manifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn read_emb_error_codes() {
        let dir = tempfile::tempdir().unwrap();
        let emb = random_emb(1, 4, 6, 2);
        let path = dir.path().join("e.emb1");
        assert_eq!(code(read_emb(&path).unwrap_err()), "E_IO");

        write_emb(&path, &emb, &Manifest::synthetic(2, vec![1])).unwrap();
        write_manifest(&manifest_path(&path), &Manifest::synthetic(5, vec![1])).unwrap();
        assert_eq!(code(read_emb(&path).unwrap_err()), "E_MANIFEST");

        fs::write(manifest_path(&path), "{not json").unwrap();
        assert_eq!(code(read_emb(&path).unwrap_err()), "E_JSON");

        fs::remove_file(manifest_path(&path)).unwrap();
        assert_eq!(code(read_emb(&path).unwrap_err()), "E_IO");

        assert_eq!(
            code(write_emb(&path, &emb, &Manifest::synthetic(3, vec![1])).unwrap_err()),
            "E_MANIFEST"
        );
    }

    #[test]
    fn json_f64_specials() {
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.1, -2.5e-300] {
            let s = serde_json::to_string(&JsonF64(v)).unwrap();
            assert_eq!(serde_json::from_str::<JsonF64>(&s).unwrap().0, v);
        }
        let s = serde_json::to_string(&JsonF64(f64::NAN)).unwrap();
        assert!(serde_json::from_str::<JsonF64>(&s).unwrap().0.is_nan());
        assert!(serde_json::from_str::<JsonF64>("\"big\"").is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut r = Report::new("suppress", Some(3), serde_json::json!({"gamma": 0.1}));
        r.metrics.insert("psnr".into(), JsonF64(f64::INFINITY));
        r.metrics.insert("third".into(), JsonF64(1.0 / 3.0));
        r.spectrum = Some(SpectrumSection {
            rule: crate::swr::SpectrumRule::default(),
            before: vec![3.0, 1.0 / 7.0],
            after: vec![0.1, 0.2],
            rank_bound: 2,
            reference_rank_bound: 1,
            ne_positions: vec![1],
        });
        write_report(&path, &r).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
    }

    #[test]
    fn report_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = Report::new("analyze", None, serde_json::Value::Null);
        let mut v = serde_json::to_value(&r).unwrap();
        v["schema_version"] = 2.into();
        fs::write(&path, v.to_string()).unwrap();
        assert_eq!(code(read_report(&path).unwrap_err()), "E_SCHEMA");

        let mut v = serde_json::to_value(&r).unwrap();
        v["surprise"] = 1.into();
        fs::write(&path, v.to_string()).unwrap();
        assert_eq!(code(read_report(&path).unwrap_err()), "E_JSON");
    }

    #[test]
    fn pgm_round_trip() {
        let f = Field2D::from_fn(3, 4, |y, x| (y * 4 + x) as f64 * 0.5 - 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let (lo, hi) = write_pgm16(&path, &f).unwrap();
        assert_eq!((lo, hi), (-1.0, 4.5));
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n65535\n"));
        let (w, h, s) = decode_pgm16(&bytes).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(s[0], 0);
        assert_eq!(s[11], 65535);
        for (q, v) in s.iter().zip(f.data()) {
            let back = lo + *q as f64 / 65535.0 * (hi - lo);
            assert!((back - v).abs() <= (hi - lo) / 65535.0);
        }
    }

    #[test]
    fn constant_map_quantizes_to_zero() {
        let f = Field2D::new(2, 2, vec![0.25; 4]).unwrap();
        let (s, lo, hi) = quantize_u16(&f);
        assert_eq!(s, vec![0; 4]);
        assert_eq!((lo, hi), (0.25, 0.25));
    }

    #[test]
    fn records_csv_round_trip() {
        #[derive(Debug, PartialEq, Serialize, Deserialize)]
        struct Row {
            a: usize,
            b: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![Row { a: 1, b: 0.1 }, Row { a: 2, b: 1.0 / 3.0 }];
        write_records_csv(&path, &rows).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("a,b\n"));
        assert_eq!(read_records_csv::<Row>(&path).unwrap(), rows);
    }
}
