//! Checkpoint container.
//!
//! ```text
//! bggan-ckpt-1
//! meta <key> <escaped value>
//! array <name> f32 <d0>x<d1>x... <offset> <byte length> <crc32 hex>
//! end
//! <raw little-endian f32 data, offsets relative to the byte after "end\n">
//! ```
//!
//! Metadata values escape `%`, whitespace and control characters as `%XX`.
//! The same container holds pretrained extractor weights.

use std::fmt::Write as _;
use std::path::Path;

use bokeh_core::checkpoint::{Checkpoint, FORMAT_VERSION};
use bokeh_core::Tensor;

use crate::error::{AppError, Result};

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b == b'%' || b.is_ascii_whitespace() || b.is_ascii_control() {
            let _ = write!(out, "%{b:02X}");
        } else {
            out.push(b as char);
        }
    }
    if out.is_empty() {
        out.push_str("%00");
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    if s == "%00" {
        return Some(String::new());
    }
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut head = format!("{FORMAT_VERSION}\n");
    for (k, v) in &ckpt.meta {
        let _ = writeln!(head, "meta {} {}", escape(k), escape(v));
    }
    let mut body = Vec::new();
    for (name, t) in &ckpt.arrays {
        let start = body.len();
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let dims = t.shape().0.map(|d| d.to_string()).join("x");
        let crc = crc32fast::hash(&body[start..]);
        let _ = writeln!(head, "array {} f32 {dims} {start} {} {crc:08x}", escape(name), body.len() - start);
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&body);
    out
}

fn parse_shape(s: &str) -> Option<[usize; 4]> {
    let dims: Vec<usize> = s.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
    if dims.is_empty() || dims.len() > 4 {
        return None;
    }
    let mut shape = [1; 4];
    shape[4 - dims.len()..].copy_from_slice(&dims);
    Some(shape)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let mut next_line = |section: &str| -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| AppError::ckpt(section, "unexpected end of file"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| AppError::ckpt(section, "not valid UTF-8"))
    };
    let version = next_line("header")?;
    if version != FORMAT_VERSION {
        return Err(AppError::ckpt("header", format!("unsupported version {version:?}, expected {FORMAT_VERSION:?}")));
    }
    let mut ckpt = Checkpoint::new();
    let mut arrays = Vec::new();
    let mut line_no = 1;
    loop {
        line_no += 1;
        let section = format!("manifest line {line_no}");
        let line = next_line(&section)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = |what: &str| AppError::ckpt(section.clone(), format!("{what} in {line:?}"));
        match fields.as_slice() {
            ["end"] => break,
            ["meta", k, v] => {
                let k = unescape(k).ok_or_else(|| bad("bad key escape"))?;
                let v = unescape(v).ok_or_else(|| bad("bad value escape"))?;
                ckpt.meta.insert(k, v);
            }
            ["array", name, dtype, shape, offset, len, crc] => {
                if *dtype != "f32" {
                    return Err(bad("unsupported dtype"));
                }
                let name = unescape(name).ok_or_else(|| bad("bad name escape"))?;
                let shape = parse_shape(shape).ok_or_else(|| bad("bad shape"))?;
                let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
                let len: usize = len.parse().map_err(|_| bad("bad length"))?;
                let crc = u32::from_str_radix(crc, 16).map_err(|_| bad("bad checksum"))?;
                if len != shape.iter().product::<usize>() * 4 {
                    return Err(bad("length does not match shape"));
                }
                arrays.push((name, shape, offset, len, crc));
            }
            _ => return Err(bad("unrecognized entry")),
        }
    }
    let body = &bytes[pos..];
    for (name, shape, offset, len, crc) in arrays {
        let section = format!("array {name}");
        let raw = offset
            .checked_add(len)
            .and_then(|end| body.get(offset..end))
            .ok_or_else(|| AppError::ckpt(&section, format!("data truncated: need bytes {offset}..{}, have {}", offset + len, body.len())))?;
        if crc32fast::hash(raw) != crc {
            return Err(AppError::ckpt(&section, "checksum mismatch"));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| AppError::ckpt(&section, e.to_string()))?;
        ckpt.arrays.insert(name, t);
    }
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    std::fs::write(path, encode(ckpt)).map_err(|e| AppError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes)
}
