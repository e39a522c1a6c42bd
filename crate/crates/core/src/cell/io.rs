//! Binary ("NLHF") and CSV field dumps.

use std::io::Write;

use super::PeriodicField;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NLHF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
/// Largest grid accepted by the decoder, to bound allocations on hostile input.
pub const MAX_DUMP_N: u32 = 1024;

/// Encodes a field as `NLHF | version | n | c | f64 LE payload`.
pub fn encode(field: &PeriodicField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * field.data().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(field.n() as u32).to_le_bytes());
    out.extend_from_slice(&(field.components() as u32).to_le_bytes());
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a dump produced by [`encode`]. Every header field is validated
/// before the payload is touched.
pub fn decode(bytes: &[u8]) -> Result<PeriodicField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "dump is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"NLHF\"".into()));
    }
    let word = |k: usize| u32::from_le_bytes([bytes[k], bytes[k + 1], bytes[k + 2], bytes[k + 3]]);
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let n = word(8);
    let c = word(12);
    if n == 0 || n > MAX_DUMP_N {
        return Err(Error::Format(format!("grid size {n} outside 1..={MAX_DUMP_N}")));
    }
    if !(1..=3).contains(&c) {
        return Err(Error::Format(format!("component count {c} outside 1..=3")));
    }
    let count = (n as u64).pow(3) * c as u64;
    let expected = HEADER_LEN as u64 + 8 * count;
    if bytes.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    PeriodicField::from_data(n as usize, c as usize, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_dump(path: &std::path::Path, field: &PeriodicField) -> Result<()> {
    std::fs::write(path, encode(field))?;
    Ok(())
}

pub fn read_dump(path: &std::path::Path) -> Result<PeriodicField> {
    decode(&std::fs::read(path)?)
}

/// CSV with header `i1,i2,i3,comp,value`, one row per entry in layout order.
pub fn write_csv<W: Write>(mut w: W, field: &PeriodicField) -> Result<()> {
    writeln!(w, "i1,i2,i3,comp,value")?;
    for s in 0..field.sites() {
        let [i1, i2, i3] = field.site_coords(s);
        for k in 0..field.components() {
            writeln!(w, "{i1},{i2},{i3},{k},{:.16e}", field.get(s, k))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PeriodicField {
        PeriodicField::from_fn(3, 2, |i, k| (i[0] + 3 * i[1] + 9 * i[2]) as f64 * 0.1 - k as f64 / 3.0)
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let g = decode(&encode(&f)).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let good = encode(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[12] = 4;
        assert!(decode(&bad).is_err());
        assert!(decode(&good[..good.len() - 1]).is_err());
        assert!(decode(&good[..10]).is_err());
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut bytes = encode(&sample());
        bytes[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("i1,i2,i3,comp,value"));
        assert_eq!(lines.next(), Some("0,0,0,0,0.0000000000000000e0"));
        assert_eq!(text.lines().count(), 1 + 2 * 27);
    }
}
