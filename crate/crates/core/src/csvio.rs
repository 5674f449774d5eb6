//! CSV writing helpers: explicit headers, full double precision scientific
//! notation, and a small content checksum for run manifests.

use crate::error::Result;
use std::path::Path;

/// Full-precision scientific notation; round-trips any f64 bit pattern.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.17e}")
}

/// One CSV table: header names plus rows of floats.
pub fn table_to_string(header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            out.push_str(&fmt_float(v));
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<()> {
    std::fs::write(path, table_to_string(header, rows))?;
    Ok(())
}

/// FNV-1a, 64 bit; stable content fingerprint for manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
