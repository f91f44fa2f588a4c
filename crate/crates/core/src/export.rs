//! Ensemble export. CSV has one row per `(path, node)`; the binary layout is
//! little-endian with a 56-byte header followed by node-major columns:
//!
//! ```text
//! 0   magic  "FBME"
//! 4   u32    version (1)
//! 8   f64    hurst
//! 16  f64    horizon
//! 24  u64    n_steps
//! 32  u64    m_paths
//! 40  u64    seed
//! 48  u8     sampler (0 = Cholesky, 1 = Volterra), then 7 zero bytes
//! 56  f64    W(t_i) of every path, for i = 0..=n_steps
//! ..  f64    B^H(t_i) of every path, same order
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fbm::{HurstParam, PathEnsemble, Sampler, TimeGrid};

const MAGIC: &[u8; 4] = b"FBME";
const VERSION: u32 = 1;

pub fn write_csv<W: Write>(ensemble: &PathEnsemble, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "t", "w", "bh"]).map_err(csv_err)?;
    for p in 0..ensemble.m_paths() {
        let (wp, bp) = (ensemble.w_path(p), ensemble.bh_path(p));
        for i in 0..ensemble.n_nodes() {
            w.serialize((p, ensemble.grid.t(i), wp[i], bp[i])).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::contract(format!("csv: {other:?}")),
    }
}

pub fn write_binary<W: Write>(ensemble: &PathEnsemble, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&ensemble.hurst.value().to_le_bytes())?;
    out.write_all(&ensemble.grid.horizon().to_le_bytes())?;
    out.write_all(&(ensemble.grid.n_steps() as u64).to_le_bytes())?;
    out.write_all(&(ensemble.m_paths() as u64).to_le_bytes())?;
    out.write_all(&ensemble.seed.to_le_bytes())?;
    let tag = match ensemble.sampler {
        Sampler::Cholesky => 0u8,
        Sampler::Volterra => 1u8,
    };
    out.write_all(&[tag, 0, 0, 0, 0, 0, 0, 0])?;
    for path_of in [
        PathEnsemble::w_path as fn(&PathEnsemble, usize) -> &[f64],
        PathEnsemble::bh_path,
    ] {
        let mut buf = Vec::with_capacity(ensemble.m_paths() * 8);
        for i in 0..ensemble.n_nodes() {
            buf.clear();
            for p in 0..ensemble.m_paths() {
                buf.extend_from_slice(&path_of(ensemble, p)[i].to_le_bytes());
            }
            out.write_all(&buf)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_binary<R: Read>(mut input: R) -> Result<PathEnsemble> {
    if &take::<4, _>(&mut input)? != MAGIC {
        return Err(Error::contract("not an ensemble file"));
    }
    let version = u32::from_le_bytes(take(&mut input)?);
    if version != VERSION {
        return Err(Error::contract(format!("unsupported ensemble version {version}")));
    }
    let hurst = HurstParam::new(f64::from_le_bytes(take(&mut input)?))?;
    let horizon = f64::from_le_bytes(take(&mut input)?);
    let n_steps = u64::from_le_bytes(take(&mut input)?) as usize;
    let m = u64::from_le_bytes(take(&mut input)?) as usize;
    let seed = u64::from_le_bytes(take(&mut input)?);
    let sampler = match take::<8, _>(&mut input)?[0] {
        0 => Sampler::Cholesky,
        1 => Sampler::Volterra,
        t => return Err(Error::contract(format!("unknown sampler tag {t}"))),
    };
    let grid = TimeGrid::new(horizon, n_steps)?;
    let n = grid.n_nodes();
    let mut read_matrix = || -> Result<Vec<f64>> {
        let mut out = vec![0.0; m * n];
        for i in 0..n {
            for p in 0..m {
                out[p * n + i] = f64::from_le_bytes(take(&mut input)?);
            }
        }
        Ok(out)
    };
    let w = read_matrix()?;
    let bh = read_matrix()?;
    PathEnsemble::from_parts(hurst, grid, seed, sampler, w, bh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::sample_paths;

    #[test]
    fn binary_round_trip_is_exact() {
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let e = sample_paths(HurstParam::new(0.3).unwrap(), grid, 5, 9).unwrap();
        let mut buf = Vec::new();
        write_binary(&e, &mut buf).unwrap();
        assert_eq!(buf.len(), 56 + 2 * 8 * 5 * 7);
        let back = read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.w_matrix(), e.w_matrix());
        assert_eq!(back.bh_matrix(), e.bh_matrix());
        assert_eq!(back.seed, 9);
        assert_eq!(back.grid, grid);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_binary(&b"NOPE0000"[..]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_path_node() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let e = sample_paths(HurstParam::new(0.3).unwrap(), grid, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_csv(&e, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 5);
        assert!(text.starts_with("path_id,t,w,bh\n0,0.0,0.0,0.0\n"));
    }
}
