use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{MilError, Result};

pub const BAG_MAGIC: &[u8; 4] = b"MILB";
pub const BAG_FORMAT_VERSION: u32 = 1;

/// A labeled bag: one row of `features` per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag {
    pub bag_id: String,
    pub label: usize,
    pub features: Tensor,
    /// Grid position (row, col) of each instance, when known.
    pub coords: Option<Vec<(u32, u32)>>,
    /// Row index of each instance in the bag it was originally read from.
    pub original_indices: Vec<usize>,
}

impl InstanceBag {
    pub fn new(
        bag_id: impl Into<String>,
        label: usize,
        features: Tensor,
        coords: Option<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        let n = features.rows();
        let bag = InstanceBag {
            bag_id: bag_id.into(),
            label,
            features,
            coords,
            original_indices: (0..n).collect(),
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.features.rows();
        if m == 0 {
            return Err(MilError::TooFewInstances(format!("bag {} is empty", self.bag_id)));
        }
        if let Some(coords) = &self.coords {
            if coords.len() != m {
                return Err(MilError::shape(
                    format!("bag {}", self.bag_id),
                    format!("{} coordinates for {m} instances", coords.len()),
                ));
            }
        }
        if self.original_indices.len() != m {
            return Err(MilError::shape(
                format!("bag {}", self.bag_id),
                "original_indices length differs from instance count",
            ));
        }
        let mut seen = self.original_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(MilError::InvalidValue(format!(
                "bag {} has repeated original indices",
                self.bag_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// The sub-bag made of the given rows (positions in this bag).
    pub fn subset(&self, rows: &[usize]) -> InstanceBag {
        InstanceBag {
            bag_id: self.bag_id.clone(),
            label: self.label,
            features: self.features.select_rows(rows),
            coords: self.coords.as_ref().map(|c| rows.iter().map(|&i| c[i]).collect()),
            original_indices: rows.iter().map(|&i| self.original_indices[i]).collect(),
        }
    }
}

pub fn encode_bag(bag: &InstanceBag) -> Result<Vec<u8>> {
    let id = bag.bag_id.as_bytes();
    let id_len =
        u16::try_from(id.len()).map_err(|_| MilError::Format(format!("bag id of {} bytes is too long", id.len())))?;
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| MilError::Format(format!("{what} {v} exceeds u32")));
    let m = to_u32(bag.len(), "instance count")?;
    let d = to_u32(bag.dim(), "feature dim")?;
    let label = to_u32(bag.label, "label")?;

    let coords_len = bag.coords.as_ref().map_or(0, |c| c.len() * 8);
    let mut out = Vec::with_capacity(23 + id.len() + bag.features.len() * 8 + coords_len);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(u8::from(bag.coords.is_some()));
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    for v in bag.features.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(coords) = &bag.coords {
        for &(r, c) in coords {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                MilError::Format(format!(
                    "truncated: need {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| MilError::Format("string is not valid UTF-8".into()))
    }

    /// `count` little-endian f64 values, after checking they fit.
    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| MilError::Format(format!("payload of {count} floats overflows")))?;
        if bytes > self.remaining() {
            return Err(MilError::Format(format!(
                "declared {count} floats but only {} bytes remain",
                self.remaining()
            )));
        }
        (0..count).map(|_| self.f64()).collect()
    }
}

pub fn decode_bag(bytes: &[u8]) -> Result<InstanceBag> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != BAG_MAGIC {
        return Err(MilError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != BAG_FORMAT_VERSION {
        return Err(MilError::Format(format!("unsupported bag format version {version}")));
    }
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let has_coords = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(MilError::Format(format!("has_coords byte {other}"))),
    };
    let label = r.u32()? as usize;
    let bag_id = r.string()?;
    let count = m
        .checked_mul(d)
        .ok_or_else(|| MilError::Format(format!("{m}x{d} feature matrix overflows")))?;
    let values = r.f64s(count)?;
    let features = Tensor::new(m, d, values).map_err(|e| MilError::Format(e.to_string()))?;
    let coords = if has_coords {
        if m.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(MilError::Format("truncated coordinate payload".into()));
        }
        let mut c = Vec::with_capacity(m);
        for _ in 0..m {
            c.push((r.u32()?, r.u32()?));
        }
        Some(c)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(MilError::Format(format!("{} trailing bytes", r.remaining())));
    }
    InstanceBag::new(bag_id, label, features, coords).map_err(|e| MilError::Format(e.to_string()))
}

pub fn write_bag(bag: &InstanceBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_bag(path: &Path) -> Result<InstanceBag> {
    let bytes = std::fs::read(path)?;
    decode_bag(&bytes).map_err(|e| match e {
        MilError::Format(msg) => MilError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
