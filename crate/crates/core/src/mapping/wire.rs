//! Compact grid encoding shared by the map topics and the operator gateway.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "OGR1"
//! width      u32
//! height     u32
//! resolution f64
//! origin     f64 x, f64 y, f64 theta
//! runs       u32      number of runs
//! run*       LEB128 varint of (length << 2 | class)
//! ```
//!
//! Cells are visited row-major from cell (0, 0). `class` is 0 unknown,
//! 1 free, 2 occupied, using the ±0.4 log-odds classification.

use thiserror::Error;

use super::grid::{classify, CellClass, OccupancyGrid};
use crate::geometry::Pose2;

pub const MAGIC: &[u8; 4] = b"OGR1";
/// Log-odds magnitude given to decoded free and occupied cells.
pub const DECODED_LOGODDS: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated grid message")]
    Truncated,
    #[error("invalid cell class {0}")]
    BadClass(u8),
    #[error("runs cover {got} cells, header says {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

fn class_code(c: CellClass) -> u8 {
    match c {
        CellClass::Unknown => 0,
        CellClass::Free => 1,
        CellClass::Occupied => 2,
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Run-length encoding of the classified grid.
pub fn encode(grid: &OccupancyGrid) -> Vec<u8> {
    let mut runs: Vec<(u8, u64)> = Vec::new();
    for &l in grid.cells() {
        let c = class_code(classify(l));
        match runs.last_mut() {
            Some((rc, n)) if *rc == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    let mut out = Vec::with_capacity(48 + runs.len() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&grid.resolution().to_le_bytes());
    let o = grid.origin();
    for v in [o.x, o.y, o.theta] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for (c, n) in runs {
        put_varint(&mut out, (n << 2) | c as u64);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn varint(&mut self) -> Result<u64, WireError> {
        let mut v = 0u64;
        let mut shift = 0;
        loop {
            let b = self.take(1)?[0];
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
            shift += 7;
            if shift > 63 {
                return Err(WireError::Truncated);
            }
        }
    }
}

/// Decodes into a grid with `±DECODED_LOGODDS` for known cells.
pub fn decode(bytes: &[u8]) -> Result<OccupancyGrid, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(WireError::BadMagic);
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let res = r.f64()?;
    let origin = Pose2::new(r.f64()?, r.f64()?, r.f64()?);
    let nruns = r.u32()? as usize;
    let expected = w * h;
    let mut grid = OccupancyGrid::new(origin, res, w, h);
    let mut idx = 0usize;
    for _ in 0..nruns {
        let v = r.varint()?;
        let class = (v & 0x3) as u8;
        let n = (v >> 2) as usize;
        let l = match class {
            0 => 0.0,
            1 => -DECODED_LOGODDS,
            2 => DECODED_LOGODDS,
            c => return Err(WireError::BadClass(c)),
        };
        if idx + n > expected {
            return Err(WireError::LengthMismatch { got: idx + n, expected });
        }
        if l != 0.0 {
            for k in idx..idx + n {
                grid.set(k % w, k / w, l);
            }
        }
        idx += n;
    }
    if idx != expected {
        return Err(WireError::LengthMismatch { got: idx, expected });
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let g = OccupancyGrid::new(Pose2::new(1.0, 2.0, 0.0), 0.1, 3, 2);
        let b = encode(&g);
        assert_eq!(&b[0..4], b"OGR1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[12..20].try_into().unwrap()), 0.1);
        // One unknown run of six cells.
        assert_eq!(u32::from_le_bytes(b[44..48].try_into().unwrap()), 1);
        assert_eq!(b[48], 6 << 2);
        assert_eq!(b.len(), 49);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let g = OccupancyGrid::new(Pose2::IDENTITY, 0.1, 4, 4);
        let b = encode(&g);
        assert_eq!(decode(&b[..b.len() - 1]), Err(WireError::Truncated));
        assert_eq!(decode(b"XXXX"), Err(WireError::BadMagic));
    }

    proptest! {
        #[test]
        fn classification_survives_round_trip(cells in proptest::collection::vec(-3i8..=3, 1..200), w in 1usize..20) {
            let h = cells.len().div_ceil(w);
            let mut g = OccupancyGrid::new(Pose2::new(0.5, -1.0, 0.3), 0.05, w, h);
            for (k, v) in cells.iter().enumerate() {
                g.set(k % w, k / w, *v as f64 * 0.5);
            }
            let back = decode(&encode(&g)).unwrap();
            prop_assert_eq!(back.width(), w);
            prop_assert_eq!(back.origin(), g.origin());
            for (x, y) in g.cells().iter().zip(back.cells()) {
                prop_assert_eq!(classify(*x), classify(*y));
            }
        }
    }
}
