//! `.tfwa` — versioned binary container for model weights, sized for the
//! cloud-to-device transmission story.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "TFWA"
//! version  u32      1
//! cfg_len  u32      length of the JSON config blob
//! cfg      cfg_len  UTF-8 TFormerConfig, round-trips to an equal config
//! count    u32      number of tensor records
//! records  count x  [name_len u16][name utf-8][dtype u8][rank u8]
//!                   [dims u32 x rank][values little-endian row-major]
//! crc      u32      CRC-32 (poly 0xEDB88320 reflected, init & xor-out
//!                   0xFFFFFFFF) over every preceding byte
//! ```
//!
//! Records are sorted by name bytewise, so exporting the same model twice is
//! byte-identical and successive snapshots diff cleanly. No compression in
//! v1: the byte accounting stays transparent (compression is a natural v2).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TFormerConfig, TFormerModel};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TFWA";
pub const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// crc32

const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = build_crc_table();

/// Reflected CRC-32, init `0xFFFFFFFF`, final xor `0xFFFFFFFF`
/// (`crc32("123456789") == 0xCBF43926`).
pub fn crc32(data: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = CRC_TABLE[((c ^ u32::from(b)) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---------------------------------------------------------------------------
// export

fn config_blob(config: &TFormerConfig) -> Result<Vec<u8>> {
    serde_json::to_vec(config).map_err(|e| Error::ConfigBlob(e.to_string()))
}

/// Serializes the model to bytes.
pub fn export_to_vec<T: Scalar>(model: &TFormerModel<T>) -> Result<Vec<u8>> {
    let mut records: Vec<(String, &Tensor<T>)> = model
        .named_params()
        .into_iter()
        .map(|(name, _, t)| (name, t))
        .collect();
    records.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));

    let cfg = config_blob(&model.config)?;
    let mut out = Vec::with_capacity(archive_size(model)? as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());

    for (name, tensor) in records {
        for &v in tensor.data() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("weight tensor {name}")));
            }
        }
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(T::DTYPE.tag());
        out.push(tensor.rank() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }

    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes the archive to any sink, returning bytes written.
pub fn export<T: Scalar, W: Write>(model: &TFormerModel<T>, sink: &mut W) -> Result<u64> {
    let bytes = export_to_vec(model)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

pub fn export_to_file<T: Scalar>(model: &TFormerModel<T>, path: &Path) -> Result<u64> {
    let mut file = fs::File::create(path)?;
    let n = export(model, &mut file)?;
    file.flush()?;
    Ok(n)
}

/// Closed-form archive size:
/// `16 + cfg_len + sum(2 + name + 1 + 1 + 4*rank + elem*numel) + 4`.
pub fn archive_size<T: Scalar>(model: &TFormerModel<T>) -> Result<u64> {
    let cfg = config_blob(&model.config)?;
    let mut size = (4 + 4 + 4 + cfg.len() + 4) as u64;
    for (name, _, t) in model.named_params() {
        size += 2 + name.len() as u64 + 1 + 1 + 4 * t.rank() as u64;
        size += (T::DTYPE.size_bytes() * t.len()) as u64;
    }
    Ok(size + 4)
}

// ---------------------------------------------------------------------------
// import

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Malformed(format!(
                "truncated while reading {what} ({} of {n} bytes left)",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses an archive and reconstructs the model bit-exactly.
///
/// Validation order: magic, version, CRC over the whole payload, then
/// structure. Every failure mode has its own error variant so a flipped
/// byte is always diagnosable.
pub fn import_from_slice<T: Scalar>(bytes: &[u8]) -> Result<TFormerModel<T>> {
    if bytes.len() < 4 {
        return Err(Error::Malformed("shorter than the magic".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Malformed("shorter than the fixed header".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes([
        bytes[body_len],
        bytes[body_len + 1],
        bytes[body_len + 2],
        bytes[body_len + 3],
    ]);
    let computed = crc32(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: 8,
    };
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config blob")?;
    let config: TFormerConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| Error::ConfigBlob(e.to_string()))?;
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut records: Vec<(String, Tensor<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Malformed(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                got: dtype.name().to_string(),
                want: T::DTYPE.name().to_string(),
            });
        }
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::Malformed(format!("record rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * T::DTYPE.size_bytes(), "tensor payload")?;
        let data: Vec<T> = payload
            .chunks_exact(T::DTYPE.size_bytes())
            .map(T::read_le)
            .collect();
        records.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != body_len {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last record",
            body_len - r.pos
        )));
    }

    let mut by_name = std::collections::HashMap::with_capacity(records.len());
    for (name, tensor) in records {
        if by_name.insert(name.clone(), tensor).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
    }

    let mut model = TFormerModel::<T>::zeros(config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(name, _, t)| (name, t.dims().to_vec()))
        .collect();
    for (slot, (name, dims)) in model.params_mut().into_iter().zip(expected) {
        match by_name.remove(&name) {
            Some(tensor) if tensor.dims() == dims.as_slice() => *slot = tensor,
            Some(tensor) => {
                return Err(Error::TensorShape {
                    name,
                    got: tensor.dims().to_vec(),
                    want: dims,
                });
            }
            None => return Err(Error::MissingTensor(name)),
        }
    }
    if let Some(name) = by_name.into_keys().min() {
        return Err(Error::UnknownTensor(name));
    }
    Ok(model)
}

pub fn import_from_file<T: Scalar>(path: &Path) -> Result<TFormerModel<T>> {
    import_from_slice(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// transmission report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub reference: String,
    pub reference_params: u64,
    /// `reference_params / model_params` — how many times smaller this model is.
    pub param_ratio: f64,
    /// `1 - model_params / reference_params`.
    pub fewer_frac: f64,
}

/// Payload accounting for one model: archive bytes, parameter count, wire
/// bytes per parameter, and savings against named reference models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReport {
    pub variant: String,
    pub dtype: String,
    pub payload_bytes: u64,
    pub param_count: u64,
    pub bytes_per_param: f64,
    pub savings: Vec<SavingsRow>,
}

impl TransmissionReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "variant {}  dtype {}\npayload_bytes {}\nparam_count {}\nbytes_per_param {:.4}\n",
            self.variant, self.dtype, self.payload_bytes, self.param_count, self.bytes_per_param
        );
        for row in &self.savings {
            out.push_str(&format!(
                "vs {} ({} params): {:.2}x smaller, {:.1}% fewer parameters\n",
                row.reference,
                row.reference_params,
                row.param_ratio,
                100.0 * row.fewer_frac
            ));
        }
        out
    }
}

/// Builds the transmission report. `references` are `(name, param count)`
/// pairs of models to compare against.
pub fn payload_report<T: Scalar>(
    model: &TFormerModel<T>,
    references: &[(String, u64)],
) -> Result<TransmissionReport> {
    let payload_bytes = archive_size(model)?;
    let (param_count, _) = model.count_parameters(true);
    let savings = references
        .iter()
        .map(|(name, ref_params)| SavingsRow {
            reference: name.clone(),
            reference_params: *ref_params,
            param_ratio: *ref_params as f64 / param_count as f64,
            fewer_frac: 1.0 - param_count as f64 / *ref_params as f64,
        })
        .collect();
    Ok(TransmissionReport {
        variant: model.config.variant.clone(),
        dtype: T::DTYPE.name().to_string(),
        payload_bytes,
        param_count,
        bytes_per_param: payload_bytes as f64 / param_count as f64,
        savings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::rng::Rng;

    #[test]
    fn crc32_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    fn micro() -> TFormerModel<f32> {
        TFormerModel::build_variant(Variant::Micro, 4, &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn archive_starts_with_magic() {
        let bytes = export_to_vec(&micro()).unwrap();
        assert_eq!(&bytes[0..4], &[0x54, 0x46, 0x57, 0x41]);
        assert_eq!(u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]), 1);
    }

    #[test]
    fn size_formula_matches_bytes_written() {
        let model = micro();
        let bytes = export_to_vec(&model).unwrap();
        assert_eq!(bytes.len() as u64, archive_size(&model).unwrap());
    }

    #[test]
    fn export_is_deterministic() {
        let model = micro();
        assert_eq!(export_to_vec(&model).unwrap(), export_to_vec(&model).unwrap());
    }

    #[test]
    fn export_rejects_non_finite_weights() {
        let mut model = micro();
        model.head.proj_weight.data_mut()[0] = f32::NAN;
        assert!(matches!(
            export_to_vec(&model),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn payload_report_counts() {
        let model = micro();
        let report = payload_report(
            &model,
            &[("reference-a".to_string(), 100_000u64)],
        )
        .unwrap();
        assert_eq!(report.payload_bytes, archive_size(&model).unwrap());
        assert_eq!(report.param_count, model.count_parameters(true).0);
        assert_eq!(report.savings.len(), 1);
        assert!(report.bytes_per_param > 4.0);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("payload_bytes"));
    }
}
