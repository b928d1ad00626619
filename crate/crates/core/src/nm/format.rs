//! `NMC1` binary encoding of [`NmCompressed`].
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NMC1"
//! 4       4     rows (u32)
//! 8       4     cols (u32)
//! 12      1     n
//! 13      1     m
//! 14      1     dtype tag (1 = f32, 2 = f64)
//! 15      1     reserved, 0
//! 16      ...   index codes
//! ...     ...   values
//! ```
//!
//! Codes section: for each row, the `cols / m` group codes are written as
//! `b = ceil(log2(C(m, n)))`-bit unsigned integers, least significant bit
//! first, into a bit stream that fills each byte from bit 0 upward. Every
//! row starts on a fresh byte, so a row occupies `ceil(groups * b / 8)`
//! bytes and unused high bits of its last byte are zero. For `n == m`
//! (`b = 0`) the section is empty.
//!
//! Values section: `rows * (cols / m) * n` values in row-major group order,
//! each group's `n` values in ascending column order, encoded as IEEE-754
//! little-endian of the declared dtype. Nothing follows the values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nm::compressed::NmCompressed;
use crate::nm::pattern::NmPattern;
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 4] = b"NMC1";
pub const HEADER_LEN: usize = 16;

fn row_code_bytes(groups: usize, bits: u32) -> usize {
    (groups * bits as usize).div_ceil(8)
}

/// Encodes `matrix` into the `NMC1` byte layout.
pub fn encode<T: Scalar>(matrix: &NmCompressed<T>) -> Result<Vec<u8>> {
    let (rows, cols) = matrix.shape();
    let rows32 = u32::try_from(rows).map_err(|_| Error::Format("rows exceed u32".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Format("cols exceed u32".into()))?;
    let pattern = matrix.pattern();
    let bits = pattern.index_bits();
    let groups = matrix.groups_per_row();
    let code_bytes = row_code_bytes(groups, bits);
    let mut out = Vec::with_capacity(
        HEADER_LEN + rows * code_bytes + matrix.values().len() * T::DTYPE.size_bytes(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    out.push(pattern.n() as u8);
    out.push(pattern.m() as u8);
    out.push(T::DTYPE.tag());
    out.push(0);
    for row_codes in matrix.codes().chunks(groups.max(1)).take(rows) {
        let start = out.len();
        out.resize(start + code_bytes, 0);
        let mut bit = 0usize;
        for &code in row_codes {
            for b in 0..bits as usize {
                if code >> b & 1 == 1 {
                    out[start + (bit + b) / 8] |= 1 << ((bit + b) % 8);
                }
            }
            bit += bits as usize;
        }
    }
    for &v in matrix.values() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes an `NMC1` stream. The dtype tag must match `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<NmCompressed<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let rows = u32_at(4);
    let cols = u32_at(8);
    let pattern = NmPattern::new(bytes[12] as usize, bytes[13] as usize)
        .map_err(|e| Error::Format(e.to_string()))?;
    let dtype = Dtype::from_tag(bytes[14])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[14])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "stream holds {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    if bytes[15] != 0 {
        return Err(Error::Format("reserved header byte is not zero".into()));
    }
    if cols % pattern.m() != 0 {
        return Err(Error::Format(format!("cols {cols} not divisible by m {}", pattern.m())));
    }
    let bits = pattern.index_bits();
    let groups = cols / pattern.m();
    let code_bytes = row_code_bytes(groups, bits);
    let value_count = rows * groups * pattern.n();
    let expected = HEADER_LEN + rows * code_bytes + value_count * dtype.size_bytes();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut codes = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        let row = &bytes[HEADER_LEN + r * code_bytes..HEADER_LEN + (r + 1) * code_bytes];
        for g in 0..groups {
            let mut code = 0u64;
            for b in 0..bits as usize {
                let bit = g * bits as usize + b;
                if row[bit / 8] >> (bit % 8) & 1 == 1 {
                    code |= 1 << b;
                }
            }
            codes.push(code);
        }
        let used = groups * bits as usize;
        if !used.is_multiple_of(8) && row[code_bytes - 1] >> (used % 8) != 0 {
            return Err(Error::Format(format!("row {r} has nonzero padding bits")));
        }
    }
    let value_start = HEADER_LEN + rows * code_bytes;
    let values = bytes[value_start..]
        .chunks(dtype.size_bytes())
        .map(T::read_le)
        .collect();
    NmCompressed::from_parts(rows, cols, pattern, codes, values)
}

pub fn write_to<T: Scalar>(matrix: &NmCompressed<T>, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(matrix)?)?;
    Ok(())
}

pub fn read_from<T: Scalar>(mut r: impl Read) -> Result<NmCompressed<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}
