//! Reader and writer for the NPY v1.0 format.
//!
//! Only the subset exchanged with activation exporters is supported: C order,
//! little-endian `<f4`, `<f8` and `<i8`. Anything else is rejected rather than
//! converted.

use crate::tensor::{DType, TensorBuffer, TensorData};

/// The npy magic string.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NpyError {
    #[error("MalformedHeader: {0}")]
    MalformedHeader(String),
    #[error("UnsupportedDtype: {0}")]
    UnsupportedDtype(String),
    #[error("SizeMismatch: payload has {actual} bytes, shape requires {expected}")]
    SizeMismatch { expected: usize, actual: usize },
}

fn malformed(msg: impl Into<String>) -> NpyError {
    NpyError::MalformedHeader(msg.into())
}

fn descr_of(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "<f4",
        DType::F64 => "<f8",
        DType::I64 => "<i8",
    }
}

fn dtype_of(descr: &str) -> Result<DType, NpyError> {
    match descr {
        "<f4" => Ok(DType::F32),
        "<f8" => Ok(DType::F64),
        "<i8" => Ok(DType::I64),
        other => Err(NpyError::UnsupportedDtype(other.to_string())),
    }
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Minimal parser for the python dict literal in an npy header.
struct DictParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> DictParser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), NpyError> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            other => Err(malformed(format!(
                "expected '{}' at byte {}, found {:?}",
                c as char,
                self.pos,
                other.map(|b| b as char)
            ))),
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(malformed("expected quoted string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err(malformed("unterminated string"));
        }
        let out = std::str::from_utf8(&self.s[start..self.pos])
            .map_err(|_| malformed("non-utf8 string"))?
            .to_string();
        self.pos += 1;
        Ok(out)
    }

    fn ident(&mut self) -> Result<&'a str, NpyError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos]).map_err(|_| malformed("bad token"))
    }

    fn boolean(&mut self) -> Result<bool, NpyError> {
        match self.ident()? {
            "True" => Ok(true),
            "False" => Ok(false),
            other => Err(malformed(format!("expected True/False, found {other:?}"))),
        }
    }

    fn shape(&mut self) -> Result<Vec<usize>, NpyError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            if self.peek() == Some(b')') {
                self.pos += 1;
                break;
            }
            let tok = self.ident()?;
            let dim = tok
                .parse::<usize>()
                .map_err(|_| malformed(format!("bad shape entry {tok:?}")))?;
            dims.push(dim);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {}
                _ => return Err(malformed("expected ',' or ')' in shape")),
            }
        }
        Ok(dims)
    }

    fn parse(mut self) -> Result<HeaderDict, NpyError> {
        self.expect(b'{')?;
        let mut descr = None;
        let mut fortran = None;
        let mut shape = None;
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            match key.as_str() {
                "descr" => descr = Some(self.string()?),
                "fortran_order" => fortran = Some(self.boolean()?),
                "shape" => shape = Some(self.shape()?),
                other => return Err(malformed(format!("unknown header key {other:?}"))),
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(malformed("expected ',' or '}' in header dict")),
            }
        }
        if self.peek().is_some() {
            return Err(malformed("trailing bytes after header dict"));
        }
        Ok(HeaderDict {
            descr: descr.ok_or_else(|| malformed("missing 'descr'"))?,
            fortran_order: fortran.ok_or_else(|| malformed("missing 'fortran_order'"))?,
            shape: shape.ok_or_else(|| malformed("missing 'shape'"))?,
        })
    }
}

/// Decodes an NPY v1.0 byte string.
pub fn read_npy(bytes: &[u8]) -> Result<TensorBuffer, NpyError> {
    if bytes.len() < PREAMBLE_LEN || bytes[..6] != MAGIC {
        return Err(malformed("bad magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(malformed(format!(
            "unsupported version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(malformed("header extends past end of input"));
    }
    let header = &bytes[PREAMBLE_LEN..data_start];
    if !header.is_ascii() {
        return Err(malformed("header is not ascii"));
    }
    if header.last() != Some(&b'\n') {
        return Err(malformed("header not terminated by newline"));
    }
    let dict = DictParser { s: header, pos: 0 }.parse()?;
    if dict.fortran_order {
        return Err(malformed("fortran_order=True is not supported"));
    }
    let dtype = dtype_of(&dict.descr)?;

    let count = dict
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("shape overflows"))?;
    let payload = &bytes[data_start..];
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| malformed("shape overflows"))?;
    if payload.len() != expected {
        return Err(NpyError::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I64 => TensorData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(TensorBuffer::new(dict.shape, data).expect("element count checked above"))
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// Encodes a tensor as NPY v1.0, padding the header to a 64-byte boundary.
pub fn write_npy(tensor: &TensorBuffer) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        descr_of(tensor.dtype()),
        shape_literal(tensor.shape())
    );
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len() + tensor.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match tensor.data() {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}
