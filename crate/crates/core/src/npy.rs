//! Reading and writing rank-3 `float32` arrays in the numpy npy format.
//!
//! Writing always produces format version 1.0, little-endian, C order. Reading
//! accepts versions 1.0 and 2.0 and either byte order; Fortran-order files and
//! any dtype other than 4-byte floats are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NafError, Result};
use crate::tensor::Tensor3;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

pub fn load_npy(path: impl AsRef<Path>) -> Result<Tensor3> {
    let mut reader = BufReader::new(File::open(path)?);
    read_npy(&mut reader)
}

pub fn save_npy(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_npy(&mut writer, t)?;
    writer.flush()?;
    Ok(())
}

pub fn write_npy<W: Write>(writer: &mut W, t: &Tensor3) -> Result<()> {
    let (h, w, c) = t.dims();
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({h}, {w}, {c}), }}");
    // magic + version + u16 length + dict + '\n', padded to the alignment
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + pad + 1;

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header_len as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    writer.write_all(&vec![b' '; pad])?;
    writer.write_all(b"\n")?;
    for v in t.data() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<Tensor3> {
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| format_err("file too short for magic string"))?;
    if &magic != MAGIC {
        return Err(format_err("bad magic string"));
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| format_err("missing version"))?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader
                .read_exact(&mut b)
                .map_err(|_| format_err("missing header length"))?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            reader
                .read_exact(&mut b)
                .map_err(|_| format_err("missing header length"))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(format_err(format!("unsupported format version {v}"))),
    };
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|_| format_err("truncated header"))?;
    let header = std::str::from_utf8(&header).map_err(|_| format_err("header is not ASCII"))?;
    let dict = HeaderDict::parse(header)?;

    let little_endian = match dict.descr.as_str() {
        "<f4" | "|f4" | "=f4" => true,
        ">f4" => false,
        other => {
            return Err(NafError::UnsupportedTensor(format!(
                "dtype {other:?} is not float32"
            )))
        }
    };
    if dict.fortran_order {
        return Err(NafError::UnsupportedTensor(
            "Fortran-order arrays are not supported".into(),
        ));
    }
    let &[h, w, c] = dict.shape.as_slice() else {
        return Err(NafError::UnsupportedTensor(format!(
            "expected rank 3, found rank {} (shape {:?})",
            dict.shape.len(),
            dict.shape
        )));
    };
    let count = h * w * c;
    let mut bytes = vec![0u8; count * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| format_err(format!("expected {count} float32 values, data is truncated")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    Tensor3::new(h, w, c, data).map_err(|e| NafError::UnsupportedTensor(e.to_string()))
}

fn format_err(msg: impl Into<String>) -> NafError {
    NafError::Format(msg.into())
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the python dict literal written by numpy, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3, 4), }`.
    fn parse(header: &str) -> Result<Self> {
        let s = header.trim();
        let inner = s
            .strip_prefix('{')
            .and_then(|s| s.trim_end().strip_suffix('}'))
            .ok_or_else(|| format_err("header is not a dict literal"))?;

        let descr = value_after(inner, "descr")?;
        let descr = descr
            .strip_prefix('\'')
            .or_else(|| descr.strip_prefix('"'))
            .and_then(|d| d.split(['\'', '"']).next())
            .ok_or_else(|| format_err("descr is not a string"))?
            .to_string();

        let fortran = value_after(inner, "fortran_order")?;
        let fortran_order = if fortran.starts_with("True") {
            true
        } else if fortran.starts_with("False") {
            false
        } else {
            return Err(format_err("fortran_order is not a bool"));
        };

        let shape = value_after(inner, "shape")?;
        let shape = shape
            .strip_prefix('(')
            .and_then(|s| s.split(')').next())
            .ok_or_else(|| format_err("shape is not a tuple"))?;
        let shape = shape
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.trim_end_matches('L')
                    .parse::<usize>()
                    .map_err(|_| format_err(format!("bad shape entry {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            descr,
            fortran_order,
            shape,
        })
    }
}

fn value_after<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    for quote in ['\'', '"'] {
        let needle = format!("{quote}{key}{quote}");
        if let Some(pos) = dict.find(&needle) {
            let rest = dict[pos + needle.len()..].trim_start();
            let rest = rest
                .strip_prefix(':')
                .ok_or_else(|| format_err(format!("missing ':' after {key}")))?;
            return Ok(rest.trim_start());
        }
    }
    Err(format_err(format!("header has no {key:?} key")))
}
