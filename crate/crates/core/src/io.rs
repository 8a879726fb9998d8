//! On-disk formats: the `DAFT` raw tensor file and 8-bit binary PGM images,
//! plus the little-endian byte cursor shared with the checkpoint format.
//!
//! `DAFT` layout, all little-endian:
//!
//! ```text
//! "DAFT" | version: u32 | rank: u32 | dims: rank x u64 | data: prod(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DAFT_MAGIC: &[u8; 4] = b"DAFT";
pub const DAFT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for x in t.data() {
            self.f64(*x);
        }
    }
}

/// Cursor over a byte buffer; every failure reports the absolute offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0, base: 0 }
    }

    /// A reader whose reported offsets start at `base`.
    pub fn with_base(buf: &'a [u8], base: u64) -> Self {
        ByteReader { buf, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let at = self.offset();
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(elem as u64).is_none_or(|b| b > left) {
            return Err(Error::format(at, format!("length {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let at = self.offset();
        let n = self.len_prefix(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(at, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::format(at, format!("tensor shape {shape:?} does not fit the file")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(DAFT_MAGIC);
    w.u32(DAFT_VERSION);
    w.tensor(t);
    w.buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != DAFT_MAGIC {
        return Err(Error::format(0, "bad magic, expected DAFT"));
    }
    let version = r.u32()?;
    if version != DAFT_VERSION {
        return Err(Error::format(4, format!("unsupported DAFT version {version}")));
    }
    let t = r.tensor()?;
    if !r.is_done() {
        return Err(Error::format(r.offset(), "trailing bytes after tensor data"));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Decode a binary (P5) PGM with maxval <= 255 into values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    let parse = |(at, s): (usize, &str)| {
        s.parse::<usize>()
            .map_err(|_| Error::format(at as u64, format!("bad PGM header field {s:?}")))
    };
    let width = parse(fields[1])?;
    let height = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if width == 0 || height == 0 {
        return Err(Error::format(fields[1].0 as u64, "empty PGM image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(fields[3].0 as u64, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::format(bytes.len() as u64, "truncated PGM raster"));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Tensor::new(vec![height, width], data)
}

/// Encode a 2-D tensor with values in `[0, 1]` as an 8-bit P5 PGM.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

/// Load an image from either a PGM or a DAFT file, by extension.
pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        _ => read_tensor(path),
    }
}
