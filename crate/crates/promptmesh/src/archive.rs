//! Named-array binary container.
//!
//! One file holds an ordered list of named entries, each a dtyped n-d array
//! or a UTF-8 string. Used for body templates, checkpoints, dataset records
//! and mesh dumps. Layout (all little-endian):
//!
//! ```text
//! magic   b"PMAR"
//! u32     format version (1)
//! u32     entry count
//! entry*  u16 name_len, name bytes,
//!         u8 dtype (0=f32 1=f64 2=i64 3=u8 4=str),
//!         u8 ndim, u64 dims[ndim],
//!         payload (row-major, LE)
//! ```
//!
//! Writes are in insertion order with no timestamps, so equal content
//! produces byte-identical files.

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PMAR";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub enum Entry {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
    U8(ArrayD<u8>),
    Str(String),
}

impl Entry {
    fn dtype(&self) -> Dtype {
        match self {
            Entry::F32(_) => Dtype::F32,
            Entry::F64(_) => Dtype::F64,
            Entry::I64(_) => Dtype::I64,
            Entry::U8(_) => Dtype::U8,
            Entry::Str(_) => Dtype::Str,
        }
    }
}

/// In-memory archive: ordered named entries with index lookup.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = entry;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, entry));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn set_scalar<S: Scalar>(&mut self, name: impl Into<String>, arr: &ArrayD<S>) {
        match S::DTYPE {
            Dtype::F32 => self.push(
                name,
                Entry::F32(arr.mapv(|x| x.to_f64_() as f32)),
            ),
            _ => self.push(name, Entry::F64(arr.mapv(|x| x.to_f64_()))),
        }
    }

    pub fn set_arr2<S: Scalar>(&mut self, name: impl Into<String>, arr: &Array2<S>) {
        self.set_scalar(name, &arr.clone().into_dyn());
    }

    pub fn set_str(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.push(name, Entry::Str(value.into()));
    }

    pub fn set_i64(&mut self, name: impl Into<String>, value: i64) {
        self.push(
            name,
            Entry::I64(ArrayD::from_elem(IxDyn(&[]), value)),
        );
    }

    pub fn get_str(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Entry::Str(s)) => Ok(s),
            Some(_) => Err(Error::Data(format!("entry '{name}' is not a string"))),
            None => Err(Error::Data(format!("missing entry '{name}'"))),
        }
    }

    pub fn get_i64(&self, name: &str) -> Result<i64> {
        match self.get(name) {
            Some(Entry::I64(a)) if a.len() == 1 => Ok(*a.iter().next().unwrap()),
            Some(_) => Err(Error::Data(format!("entry '{name}' is not an i64 scalar"))),
            None => Err(Error::Data(format!("missing entry '{name}'"))),
        }
    }

    /// Fetch an array entry converted to scalar type `S`.
    pub fn get_scalar<S: Scalar>(&self, name: &str) -> Result<ArrayD<S>> {
        match self.get(name) {
            Some(Entry::F32(a)) => Ok(a.mapv(|x| S::of_f64(f64::from(x)))),
            Some(Entry::F64(a)) => Ok(a.mapv(S::of_f64)),
            Some(Entry::I64(a)) => Ok(a.mapv(|x| S::of_f64(x as f64))),
            Some(Entry::U8(a)) => Ok(a.mapv(|x| S::of_f64(f64::from(x)))),
            Some(Entry::Str(_)) => Err(Error::Data(format!("entry '{name}' is a string"))),
            None => Err(Error::Data(format!("missing entry '{name}'"))),
        }
    }

    pub fn get_arr2<S: Scalar>(&self, name: &str) -> Result<Array2<S>> {
        let a = self.get_scalar::<S>(name)?;
        let shape = a.shape().to_vec();
        a.into_dimensionality::<ndarray::Ix2>().map_err(|_| {
            Error::Data(format!("entry '{name}' has shape {shape:?}, expected 2-d"))
        })
    }

    pub fn get_u8(&self, name: &str) -> Result<ArrayD<u8>> {
        match self.get(name) {
            Some(Entry::U8(a)) => Ok(a.clone()),
            Some(_) => Err(Error::Data(format!("entry '{name}' is not u8"))),
            None => Err(Error::Data(format!("missing entry '{name}'"))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, entry) in &self.entries {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(entry.dtype().code())?;
            match entry {
                Entry::Str(sv) => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(sv.len() as u64)?;
                    w.write_all(sv.as_bytes())?;
                }
                Entry::F32(a) => {
                    write_dims(&mut w, a.shape())?;
                    for &x in a.iter() {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
                Entry::F64(a) => {
                    write_dims(&mut w, a.shape())?;
                    for &x in a.iter() {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                Entry::I64(a) => {
                    write_dims(&mut w, a.shape())?;
                    for &x in a.iter() {
                        w.write_i64::<LittleEndian>(x)?;
                    }
                }
                Entry::U8(a) => {
                    write_dims(&mut w, a.shape())?;
                    for &x in a.iter() {
                        w.write_u8(x)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Data("truncated archive: missing magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Data("not a named-array archive".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut out = Archive::new();
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::Data("truncated archive: entry name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("entry name is not UTF-8".into()))?;
            let dtype = Dtype::from_code(r.read_u8()?)
                .ok_or_else(|| Error::Data(format!("unknown dtype for entry '{name}'")))?;
            let ndim = r.read_u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = dims.iter().product();
            let entry = match dtype {
                Dtype::Str => {
                    let len = dims.first().copied().unwrap_or(0);
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Data(format!("truncated archive in '{name}'")))?;
                    Entry::Str(String::from_utf8(buf).map_err(|_| {
                        Error::Data(format!("string entry '{name}' is not UTF-8"))
                    })?)
                }
                Dtype::F32 => Entry::F32(read_arr(&mut r, &dims, n, &name, |r| {
                    r.read_f32::<LittleEndian>()
                })?),
                Dtype::F64 => Entry::F64(read_arr(&mut r, &dims, n, &name, |r| {
                    r.read_f64::<LittleEndian>()
                })?),
                Dtype::I64 => Entry::I64(read_arr(&mut r, &dims, n, &name, |r| {
                    r.read_i64::<LittleEndian>()
                })?),
                Dtype::U8 => Entry::U8(read_arr(&mut r, &dims, n, &name, |r| r.read_u8())?),
            };
            out.push(name, entry);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::Data(format!("cannot open {}: {e}", path.as_ref().display()))
        })?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_dims(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    w.write_u8(dims.len() as u8)?;
    for &d in dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    Ok(())
}

fn read_arr<R: Read, T, F>(
    r: &mut R,
    dims: &[usize],
    n: usize,
    name: &str,
    mut read_one: F,
) -> Result<ArrayD<T>>
where
    F: FnMut(&mut R) -> std::io::Result<T>,
{
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(
            read_one(r).map_err(|_| Error::Data(format!("truncated archive in '{name}'")))?,
        );
    }
    ArrayD::from_shape_vec(IxDyn(dims), data)
        .map_err(|e| Error::Data(format!("bad shape for '{name}': {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_preserves_entries_and_order() {
        let mut a = Archive::new();
        a.set_arr2::<f64>("t/joints", &array![[1.0, 2.0], [3.0, -4.5]]);
        a.set_str("meta/schema", "v1");
        a.set_i64("meta/count", 42);
        a.push("img", Entry::U8(ArrayD::from_elem(IxDyn(&[2, 3]), 7u8)));

        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = Archive::read_from(&buf[..]).unwrap();

        assert_eq!(
            a.names().collect::<Vec<_>>(),
            b.names().collect::<Vec<_>>()
        );
        assert_eq!(b.get_str("meta/schema").unwrap(), "v1");
        assert_eq!(b.get_i64("meta/count").unwrap(), 42);
        assert_eq!(
            b.get_arr2::<f64>("t/joints").unwrap(),
            array![[1.0, 2.0], [3.0, -4.5]]
        );

        let mut buf2 = Vec::new();
        b.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2, "serialization must be byte-stable");
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let mut a = Archive::new();
        a.set_arr2::<f32>("x", &array![[1.0f32, 2.0], [3.0, 4.0]]);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Archive::read_from(&buf[..]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let mut a = Archive::new();
        a.set_i64("x", 1);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        buf[4] = 99; // bump the version field
        match Archive::read_from(&buf[..]) {
            Err(Error::SchemaVersion { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("expected SchemaVersion error, got {other:?}"),
        }
    }
}
