//! Belief snapshot stream.
//!
//! Layout (little-endian): magic `BFLOSNAP`, `u32` version, `u8` variant code
//! (0 full, 1 diagonal, 2 spherical), `u64` dimension, then one record per
//! snapshot: `u64` round, `d` mean values, and the covariance payload
//! (full: `d` eigenvalues followed by the `d × d` eigenvectors column-major;
//! diagonal: `d` variances; spherical: one variance). Values are `f64`.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::belief::{BeliefError, BeliefState, Covariance, Variant};
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"BFLOSNAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot stream")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("unknown variant code {0}")]
    Variant(u8),
    #[error("snapshot belief does not match the stream header")]
    Mismatch,
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

fn code(v: Variant) -> u8 {
    match v {
        Variant::Full => 0,
        Variant::Diagonal => 1,
        Variant::Spherical => 2,
    }
}

pub struct SnapshotWriter<W: Write> {
    out: W,
    variant: Variant,
    dim: usize,
}

impl<W: Write> SnapshotWriter<W> {
    pub fn new(mut out: W, variant: Variant, dim: usize) -> Result<Self, SnapshotError> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u8(code(variant))?;
        out.write_u64::<LittleEndian>(dim as u64)?;
        Ok(Self { out, variant, dim })
    }

    pub fn write<T: Real>(&mut self, round: u64, belief: &BeliefState<T>) -> Result<(), SnapshotError> {
        if belief.variant() != self.variant || belief.dim() != self.dim {
            return Err(SnapshotError::Mismatch);
        }
        self.out.write_u64::<LittleEndian>(round)?;
        let mut put = |x: T| self.out.write_f64::<LittleEndian>(x.as_f64());
        for &m in belief.mean().iter() {
            put(m)?;
        }
        match belief.covariance() {
            Covariance::Full {
                eigenvectors,
                eigenvalues,
            } => {
                for &l in eigenvalues.iter() {
                    put(l)?;
                }
                for &u in eigenvectors.iter() {
                    put(u)?;
                }
            }
            Covariance::Diagonal { variances } => {
                for &v in variances.iter() {
                    put(v)?;
                }
            }
            Covariance::Spherical { variance } => put(*variance)?,
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, SnapshotError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

/// Reads every `(round, belief)` record of a stream.
pub fn read_snapshots<R: Read>(mut r: R) -> Result<Vec<(u64, BeliefState<f64>)>, SnapshotError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(SnapshotError::Version(version));
    }
    let variant = match r.read_u8()? {
        0 => Variant::Full,
        1 => Variant::Diagonal,
        2 => Variant::Spherical,
        c => return Err(SnapshotError::Variant(c)),
    };
    let d = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::new();
    loop {
        let round = match r.read_u64::<LittleEndian>() {
            Ok(x) => x,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mean = DVector::from_vec(read_vec(&mut r, d)?);
        let cov = match variant {
            Variant::Full => {
                let eigenvalues = DVector::from_vec(read_vec(&mut r, d)?);
                let eigenvectors = DMatrix::from_vec(d, d, read_vec(&mut r, d * d)?);
                Covariance::Full {
                    eigenvectors,
                    eigenvalues,
                }
            }
            Variant::Diagonal => Covariance::Diagonal {
                variances: DVector::from_vec(read_vec(&mut r, d)?),
            },
            Variant::Spherical => Covariance::Spherical {
                variance: read_vec(&mut r, 1)?[0],
            },
        };
        out.push((round, BeliefState::new(mean, cov)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_variant() {
        let m = DVector::from_vec(vec![0.5, -1.25]);
        let beliefs = [
            BeliefState::from_covariance(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap(),
            BeliefState::diagonal(m.clone(), DVector::from_vec(vec![0.1, 2.0])).unwrap(),
            BeliefState::spherical(m.clone(), 0.7).unwrap(),
        ];
        for b in beliefs {
            let mut w = SnapshotWriter::new(Vec::new(), b.variant(), 2).unwrap();
            w.write(0, &b).unwrap();
            w.write(17, &b).unwrap();
            let bytes = w.finish().unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = read_snapshots(&bytes[..]).unwrap();
            assert_eq!(back.len(), 2);
            assert_eq!(back[1].0, 17);
            assert_eq!(back[1].1, b);
        }
    }

    #[test]
    fn rejects_foreign_streams() {
        assert!(matches!(read_snapshots(&b"NOTASNAPxxxxxxxxxxxxx"[..]), Err(SnapshotError::BadMagic)));
        let b = BeliefState::spherical(DVector::zeros(3), 1.0).unwrap();
        let mut w = SnapshotWriter::new(Vec::new(), Variant::Diagonal, 3).unwrap();
        assert!(matches!(w.write(0, &b), Err(SnapshotError::Mismatch)));
    }
}
