//! JSON reports with fixed-precision numbers and an embedded run manifest.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Writes every float with 17 significant digits (`d.dddddddddddddddde±x`),
/// so reports round-trip exactly and compare byte-for-byte.
#[derive(Debug, Default)]
pub struct FixedFormatter {
    indent: usize,
    has_value: bool,
}

fn newline<W: ?Sized + Write>(w: &mut W, indent: usize) -> io::Result<()> {
    w.write_all(b"\n")?;
    for _ in 0..indent {
        w.write_all(b"  ")?;
    }
    Ok(())
}

impl Formatter for FixedFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    // Pretty layout, as in serde_json's PrettyFormatter.
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.indent += 1;
        self.has_value = false;
        w.write_all(b"[")
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.indent -= 1;
        if self.has_value {
            newline(w, self.indent)?;
        }
        w.write_all(b"]")
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        newline(w, self.indent)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        self.has_value = true;
        Ok(())
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.indent += 1;
        self.has_value = false;
        w.write_all(b"{")
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.indent -= 1;
        if self.has_value {
            newline(w, self.indent)?;
        }
        w.write_all(b"}")
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if !first {
            w.write_all(b",")?;
        }
        newline(w, self.indent)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        w.write_all(b": ")
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        self.has_value = true;
        Ok(())
    }
}

pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFormatter::default());
    value
        .serialize(&mut ser)
        .map_err(|e| crate::Error::InvalidArgument(format!("cannot serialise report: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What produced a report. Timings are only recorded on request, since
/// they would make otherwise identical reports differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub input_sha256: String,
    pub options: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl RunManifest {
    pub fn new(subcommand: &str, input: &[u8], options: serde_json::Value) -> Self {
        Self {
            tool: "potentia".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            input_sha256: sha256_hex(input),
            options,
            seeds: BTreeMap::new(),
            timings: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub manifest: &'a RunManifest,
    pub result: &'a T,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_digits() {
        let s = String::from_utf8(to_json_bytes(&[1.0, 0.1, -2.5e-300]).unwrap()).unwrap();
        assert!(s.contains("1.0000000000000000e0"));
        assert!(s.contains("1.0000000000000001e-1"));
        assert!(s.contains("-2.5000000000000000e-300"));
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![1.0, 0.1, -2.5e-300]);
    }

    #[test]
    fn manifest_hashes_input() {
        let m = RunManifest::new("verify", b"abc", serde_json::json!({}));
        assert_eq!(
            m.input_sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let s = String::from_utf8(to_json_bytes(&m).unwrap()).unwrap();
        assert!(!s.contains("timings"));
    }
}
