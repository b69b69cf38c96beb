//! Parameter checkpoint serialization. Binary layout (little-endian):
//! magic "NOPC1", version u32, tensor count u32, then per tensor in
//! canonical (sorted) name order: name length u32, name bytes (UTF-8),
//! shape rank u32, dims u32 x rank, data f64 LE.
//!
//! Only the parameter values are stored; optimizer state is not part of a
//! checkpoint, so a reloaded store starts with fresh Adam moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tape::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"NOPC1";
const VERSION: u32 = 1;

/// Names are short identifiers; anything longer is a corrupt file.
const MAX_NAME_LEN: u32 = 4096;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data("truncated checkpoint file".into())
    } else {
        Error::Io(e)
    }
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let names = store.sorted_names();
    write_u32(&mut w, names.len() as u32)?;
    for name in &names {
        let t = store.get(name).expect("sorted_names lists known params");
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.dims.len() as u32)?;
        for &d in &t.dims {
            write_u32(&mut w, d as u32)?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Data(format!(
                "implausible parameter name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes).map_err(truncated)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.get(&name).is_some() {
            return Err(Error::Data(format!("duplicate parameter `{name}`")));
        }
        store.register(&name, dims, data);
    }

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => Ok(store),
        _ => Err(Error::Data("trailing bytes after checkpoint".into())),
    }
}
