//! The SPCT binary model file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SPCT"  magic
//! u16     version (1 = float model, 2 = float model + INT8 table)
//! config  8 × u32 dims, f64 dropout, u8 attention flag, u8 gru flag, u64 seed
//! u32     tensor count, then per tensor:
//!         u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f32 data
//! [v2]    u8 quant mode, u32 entry count, then per entry:
//!         u16 name length, UTF-8 name, f32 scale, i8 zero point,
//!         u32 payload length, i8 payload
//! u32     CRC-32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{FormatError, Result, SpectraError};
use crate::model::{build_model, ModelParams, SpectraConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPCT";
pub const VERSION_FLOAT: u16 = 1;
pub const VERSION_QUANT: u16 = 2;

/// Raw INT8 table as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSection {
    pub mode: u8,
    pub entries: Vec<QuantEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantEntry {
    pub name: String,
    pub scale: f32,
    pub zero_point: i8,
    pub payload: Vec<i8>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| SpectraError::Usage(format!("tensor name too long: {s}")))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn dim(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| SpectraError::Usage(format!("dimension {v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn flag(&mut self) -> Result<bool, FormatError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(FormatError::Malformed(format!("flag byte {v} at offset {}", self.pos - 1))),
        }
    }
    fn name(&mut self) -> Result<String, FormatError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FormatError::Malformed(format!("non UTF-8 name at offset {}", self.pos - len)))
    }
}

fn write_config(w: &mut Writer, c: &SpectraConfig) -> Result<()> {
    for v in [
        c.window_len,
        c.channels,
        c.classes,
        c.n_fft,
        c.hop,
        c.kernel_size,
        c.conv_features,
        c.hidden,
    ] {
        w.dim(v)?;
    }
    w.f64(c.dropout);
    w.u8(c.use_channel_attention as u8);
    w.u8(c.use_gru as u8);
    w.u64(c.seed);
    Ok(())
}

fn read_config(r: &mut Reader) -> Result<SpectraConfig, FormatError> {
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    Ok(SpectraConfig {
        window_len: dims[0],
        channels: dims[1],
        classes: dims[2],
        n_fft: dims[3],
        hop: dims[4],
        kernel_size: dims[5],
        conv_features: dims[6],
        hidden: dims[7],
        dropout: r.f64()?,
        use_channel_attention: r.flag()?,
        use_gru: r.flag()?,
        seed: r.u64()?,
    })
}

/// Serializes a model, optionally with an INT8 table (version 2).
pub fn encode(model: &ModelParams, quant: Option<&QuantSection>) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u16(if quant.is_some() { VERSION_QUANT } else { VERSION_FLOAT });
    write_config(&mut w, &model.config)?;
    let tensors: Vec<(String, &Tensor)> =
        model.named_params().into_iter().chain(model.named_buffers()).collect();
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.name(&name)?;
        w.u8(t.rank() as u8);
        for &d in t.shape() {
            w.dim(d)?;
        }
        for &v in t.data() {
            w.f32(v as f32);
        }
    }
    if let Some(q) = quant {
        w.u8(q.mode);
        w.u32(q.entries.len() as u32);
        for e in &q.entries {
            w.name(&e.name)?;
            w.f32(e.scale);
            w.u8(e.zero_point as u8);
            w.u32(e.payload.len() as u32);
            w.buf.extend(e.payload.iter().map(|&v| v as u8));
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn parse_body(
    r: &mut Reader,
    version: u16,
) -> Result<(SpectraConfig, Vec<(String, Tensor)>, Option<QuantSection>), FormatError> {
    let config = read_config(r)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            FormatError::Malformed(format!("tensor {name} has an overflowing shape {dims:?}"))
        })?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| {
            FormatError::Malformed(format!("tensor {name} is too large"))
        })?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect();
        let t = Tensor::new(&dims, data)
            .map_err(|e| FormatError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    let quant = if version == VERSION_QUANT {
        let mode = r.u8()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.name()?;
            let scale = r.f32()?;
            let zero_point = r.u8()? as i8;
            let len = r.u32()? as usize;
            let payload = r.take(len)?.iter().map(|&b| b as i8).collect();
            entries.push(QuantEntry {
                name,
                scale,
                zero_point,
                payload,
            });
        }
        Some(QuantSection { mode, entries })
    } else {
        None
    };
    Ok((config, tensors, quant))
}

/// Decodes a model file accepting only the listed versions.
pub fn decode(bytes: &[u8], supported: &'static [u16]) -> Result<(ModelParams, Option<QuantSection>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = r.u16()?;
    if !supported.contains(&version) {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported,
        }
        .into());
    }
    if bytes.len() < r.pos + 4 {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: r.pos + 4 - bytes.len(),
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let mut r = Reader { buf: body, pos: r.pos };
    let parsed = parse_body(&mut r, version);
    if stored != computed {
        // Truncation takes precedence over the mismatch it causes.
        return Err(match parsed {
            Err(e @ FormatError::Truncated { .. }) => e,
            _ => FormatError::CrcMismatch { stored, computed },
        }
        .into());
    }
    let (config, tensors, quant) = parsed?;
    if r.pos != body.len() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - r.pos
        ))
        .into());
    }
    let model = assemble(config, tensors)?;
    Ok((model, quant))
}

fn assemble(config: SpectraConfig, tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    let mut model = build_model(&config)
        .map_err(|e| FormatError::Malformed(format!("stored config rejected: {e}")))?;
    let expected = model.named_params().len() + model.named_buffers().len();
    if tensors.len() != expected {
        return Err(FormatError::Malformed(format!(
            "expected {expected} tensors for this config, found {}",
            tensors.len()
        ))
        .into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(FormatError::Malformed(format!("duplicate tensor {name}")).into());
        }
        let slot = model
            .get_mut(&name)
            .ok_or_else(|| FormatError::Malformed(format!("unexpected tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(FormatError::Malformed(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            ))
            .into());
        }
        *slot = t;
    }
    Ok(model)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| SpectraError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| SpectraError::io(path, e))
}

pub fn save_model(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode(model, None)?)
}

/// Loads a float (version 1) model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    Ok(decode(&read_file(path.as_ref())?, &[VERSION_FLOAT])?.0)
}

/// Reads the version field without validating the rest of the file.
pub fn peek_version(path: impl AsRef<Path>) -> Result<u16> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    Ok(r.u16()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let mut m = build_model(&SpectraConfig {
            dropout: 0.123456789,
            seed: u64::MAX - 3,
            ..Default::default()
        })
        .unwrap();
        m.norm_mean.data_mut()[2] = 0.75;
        m
    }

    #[test]
    fn round_trip_preserves_config_and_tensors() {
        let m = model();
        let (back, q) = decode(&encode(&m, None).unwrap(), &[VERSION_FLOAT]).unwrap();
        assert!(q.is_none());
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m
            .named_params()
            .into_iter()
            .chain(m.named_buffers())
            .zip(back.named_params().into_iter().chain(back.named_buffers()))
        {
            assert_eq!(na, nb);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30), "{na}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn corrupted_inputs_get_named_errors() {
        let bytes = encode(&model(), None).unwrap();

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            decode(&flipped, &[VERSION_FLOAT]),
            Err(SpectraError::Format(FormatError::CrcMismatch { .. }))
        ));

        for cut in [5, 40, bytes.len() - 100, bytes.len() - 1] {
            assert!(
                matches!(
                    decode(&bytes[..cut], &[VERSION_FLOAT]),
                    Err(SpectraError::Format(FormatError::Truncated { .. }))
                ),
                "cut at {cut}"
            );
        }

        let mut bumped = bytes.clone();
        bumped[4] += 1;
        assert!(matches!(
            decode(&bumped, &[VERSION_FLOAT]),
            Err(SpectraError::Format(FormatError::UnsupportedVersion { found: 2, .. }))
        ));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            decode(&magic, &[VERSION_FLOAT]),
            Err(SpectraError::Format(FormatError::BadMagic(_)))
        ));
    }

    #[test]
    fn quant_section_round_trips() {
        let q = QuantSection {
            mode: 1,
            entries: vec![
                QuantEntry {
                    name: "clf.w".into(),
                    scale: 0.25,
                    zero_point: -3,
                    payload: vec![-128, 0, 127],
                },
                QuantEntry {
                    name: "act.clf_in".into(),
                    scale: 1e-3,
                    zero_point: 12,
                    payload: vec![],
                },
            ],
        };
        let bytes = encode(&model(), Some(&q)).unwrap();
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION_QUANT);
        let (_, back) = decode(&bytes, &[VERSION_QUANT]).unwrap();
        assert_eq!(back.unwrap(), q);
        assert!(decode(&bytes, &[VERSION_FLOAT]).is_err());
    }

    #[test]
    fn file_helpers_and_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spct");
        let m = model();
        save_model(&m, &p).unwrap();
        assert_eq!(peek_version(&p).unwrap(), VERSION_FLOAT);
        assert_eq!(load_model(&p).unwrap().config, m.config);
        assert!(matches!(
            load_model(dir.path().join("missing.spct")),
            Err(SpectraError::Io { .. })
        ));
    }
}
