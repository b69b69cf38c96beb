//! Dataset serialization. Binary layout (all integers little-endian):
//! magic "NODS1", version u32, pde tag u32, law tag u32, n_samples u32,
//! channels u32, rank u32, dims u32 x rank, seed u64, then per sample the
//! input field, the target field, and the conservation target as f64 LE.
//! A plain-text `key=value` sidecar at `<path>.meta` mirrors the PdeSpec.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::conservation::{ConservationLaw, LawKind};
use crate::field::GridField;
use crate::pdegen::{Pde, PdeSpec};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"NODS1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub inputs: Vec<GridField>,
    pub targets: Vec<GridField>,
    pub cons_targets: Vec<f64>,
    pub law: ConservationLaw,
    pub spec: PdeSpec,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data("truncated dataset file".into())
    } else {
        Error::Io(e)
    }
}

fn law_tag(law: &ConservationLaw) -> u32 {
    match law.kind {
        LawKind::Linear => 0,
        LawKind::Quadratic => 1,
    }
}

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    let n = split.len();
    if split.targets.len() != n || split.cons_targets.len() != n {
        return Err(Error::Data("split arrays disagree in length".into()));
    }
    let shape: Vec<usize> = match split.inputs.first() {
        Some(f) => f.shape().to_vec(),
        None => {
            let mut s = vec![1];
            s.extend(std::iter::repeat(split.spec.resolution).take(match split.spec.pde {
                Pde::Te2d | Pde::Cac2d => 2,
                Pde::Lse1d | Pde::Nls1d => 1,
            }));
            s
        }
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, split.spec.pde.tag())?;
    write_u32(&mut w, law_tag(&split.law))?;
    write_u32(&mut w, n as u32)?;
    write_u32(&mut w, shape[0] as u32)?;
    write_u32(&mut w, (shape.len() - 1) as u32)?;
    for d in &shape[1..] {
        write_u32(&mut w, *d as u32)?;
    }
    w.write_all(&split.spec.seed.to_le_bytes())?;
    for i in 0..n {
        if split.inputs[i].shape() != shape.as_slice() || split.targets[i].shape() != shape.as_slice()
        {
            return Err(Error::Data(format!("sample {i} has inconsistent shape")));
        }
        write_f64s(&mut w, split.inputs[i].data())?;
        write_f64s(&mut w, split.targets[i].data())?;
        write_f64s(&mut w, &[split.cons_targets[i]])?;
    }
    w.flush()?;
    write_sidecar(split, &sidecar_path(path))?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    s.into()
}

fn write_sidecar(split: &DatasetSplit, path: &Path) -> Result<()> {
    let s = &split.spec;
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "pde={}", s.pde.name())?;
    writeln!(f, "resolution={}", s.resolution)?;
    writeln!(f, "dt_solver={:e}", s.dt_solver)?;
    writeln!(f, "horizon={:e}", s.horizon)?;
    writeln!(f, "epsilon={:e}", s.params.epsilon)?;
    writeln!(f, "v={:e}", s.params.v)?;
    writeln!(f, "lambda={:e}", s.params.lambda)?;
    writeln!(f, "seed={}", s.seed)?;
    writeln!(f, "n_samples={}", split.len())?;
    writeln!(
        f,
        "law={}",
        match split.law.kind {
            LawKind::Linear => "linear",
            LawKind::Quadratic => "quadratic",
        }
    )?;
    f.flush()?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Option<PdeSpec>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let mut pde = None;
    let mut spec_fields = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad sidecar line: {line}")))?;
        if k == "pde" {
            pde = Some(match v {
                "te2d" => Pde::Te2d,
                "cac2d" => Pde::Cac2d,
                "lse1d" => Pde::Lse1d,
                "nls1d" => Pde::Nls1d,
                other => return Err(Error::Data(format!("unknown pde {other}"))),
            });
        } else {
            spec_fields.insert(k.to_string(), v.to_string());
        }
    }
    let pde = pde.ok_or_else(|| Error::Data("sidecar missing pde".into()))?;
    let get = |k: &str| -> Result<f64> {
        spec_fields
            .get(k)
            .ok_or_else(|| Error::Data(format!("sidecar missing {k}")))?
            .parse()
            .map_err(|_| Error::Data(format!("sidecar field {k} is not a number")))
    };
    let mut spec = PdeSpec::desk(pde, get("seed")? as u64);
    spec.resolution = get("resolution")? as usize;
    spec.dt_solver = get("dt_solver")?;
    spec.horizon = get("horizon")?;
    spec.params.epsilon = get("epsilon")?;
    spec.params.v = get("v")?;
    spec.params.lambda = get("lambda")?;
    Ok(Some(spec))
}

pub fn read_dataset(path: &Path) -> Result<DatasetSplit> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {version}, expected {VERSION}"
        )));
    }
    let pde = Pde::from_tag(read_u32(&mut r)?)?;
    let law_tag = read_u32(&mut r)?;
    let n_samples = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 3 {
        return Err(Error::Data(format!("unsupported field rank {rank}")));
    }
    let mut shape = vec![channels];
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let seed = read_u64(&mut r)?;
    let law = match law_tag {
        0 => ConservationLaw::linear((0..channels).collect()),
        1 => ConservationLaw::quadratic((0..channels).collect(), 1e-12),
        other => return Err(Error::Data(format!("unknown law tag {other}"))),
    };
    let field_len: usize = shape.iter().product();
    let mut inputs = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    let mut cons_targets = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let input = GridField::from_data(&shape, read_f64s(&mut r, field_len)?)?;
        let target = GridField::from_data(&shape, read_f64s(&mut r, field_len)?)?;
        let c = read_f64s(&mut r, 1)?[0];
        let recomputed = law.quantity(&input);
        let denom = recomputed.abs().max(1e-300);
        if (recomputed - c).abs() > 1e-12 * denom.max(1.0) {
            return Err(Error::Data(format!(
                "sample {i}: stored conservation target {c} disagrees with recomputed {recomputed}"
            )));
        }
        inputs.push(input);
        targets.push(target);
        cons_targets.push(c);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data("trailing bytes after last sample".into()));
    }
    let spec = match read_sidecar(&sidecar_path(path))? {
        Some(s) => s,
        None => {
            let mut s = PdeSpec::desk(pde, seed);
            s.resolution = shape[1];
            s
        }
    };
    Ok(DatasetSplit {
        inputs,
        targets,
        cons_targets,
        law,
        spec,
    })
}
