//! Binary basis archives. A file holds the `u` basis and the `I_ion` basis as
//! `podb v1` records followed by one `deim v1` record; all numbers are
//! little-endian, matrices column-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::deim::DeimOperator;
use crate::error::{Error, Result};
use crate::forward::Conductivity;
use crate::inverse::BasisEntry;
use crate::pod::{Field, PodBasis};

const POD_MAGIC: &[u8; 8] = b"podb v1\n";
const DEIM_MAGIC: &[u8; 8] = b"deim v1\n";

/// Loaded bases must be orthonormal to this tolerance.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn put_u64<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated archive: {e}")))?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("size does not fit in usize".into()))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?];
    r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated archive: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated archive: {e}")))?;
    if &b != magic {
        return format_err(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic).trim_end(),
            String::from_utf8_lossy(&b)
        ));
    }
    Ok(())
}

/// Layout: magic, field tag length and bytes, σ_gen, `n`, `N`, `m` (number of
/// stored singular values), mean, singular values, modes.
pub fn write_pod<W: Write>(w: &mut W, b: &PodBasis) -> Result<()> {
    w.write_all(POD_MAGIC)?;
    let tag = b.field.tag().as_bytes();
    put_u64(w, tag.len())?;
    w.write_all(tag)?;
    put_f64s(w, &[b.sigma_gen.ml, b.sigma_gen.mt])?;
    put_u64(w, b.n())?;
    put_u64(w, b.rank())?;
    put_u64(w, b.singular_values.len())?;
    put_f64s(w, b.mean.as_slice())?;
    put_f64s(w, &b.singular_values)?;
    put_f64s(w, b.modes.as_slice())?;
    Ok(())
}

pub fn read_pod<R: Read>(r: &mut R) -> Result<PodBasis> {
    expect_magic(r, POD_MAGIC)?;
    let tag_len = get_u64(r)?;
    if tag_len > 64 {
        return format_err("field tag too long");
    }
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag).map_err(|e| Error::Format(format!("truncated archive: {e}")))?;
    let tag = String::from_utf8(tag).map_err(|_| Error::Format("field tag is not UTF-8".into()))?;
    let field = Field::from_tag(&tag).ok_or_else(|| Error::Format(format!("unknown field tag {tag:?}")))?;
    let s = get_f64s(r, 2)?;
    let n = get_u64(r)?;
    let rank = get_u64(r)?;
    let m = get_u64(r)?;
    if n == 0 || rank == 0 || rank > n {
        return format_err(format!("bad basis shape n={n}, N={rank}"));
    }
    let mean = get_f64s(r, n)?;
    let singular_values = get_f64s(r, m)?;
    let modes = get_f64s(r, n.checked_mul(rank).ok_or_else(|| Error::Format("size overflow".into()))?)?;
    let basis = PodBasis {
        modes: DMatrix::from_vec(n, rank, modes),
        singular_values,
        sigma_gen: Conductivity::new(s[0], s[1]),
        field,
        mean: DVector::from_vec(mean),
    };
    let err = basis.orthonormality_error();
    if !(err <= ORTHONORMALITY_TOL) {
        return format_err(format!("{tag} basis fails the orthonormality check: ‖ZᵀZ − I‖ = {err:e}"));
    }
    Ok(basis)
}

/// Layout: magic, `n`, `M`, indices, `(PᵀZ_ion)⁻¹`.
pub fn write_deim<W: Write>(w: &mut W, d: &DeimOperator) -> Result<()> {
    w.write_all(DEIM_MAGIC)?;
    put_u64(w, d.n())?;
    put_u64(w, d.n_points())?;
    for &i in &d.indices {
        put_u64(w, i)?;
    }
    put_f64s(w, d.inv_ptz.as_slice())?;
    Ok(())
}

/// Reads a DEIM record and rebinds it to the ionic basis it was built from.
pub fn read_deim<R: Read>(r: &mut R, ion: &PodBasis) -> Result<DeimOperator> {
    expect_magic(r, DEIM_MAGIC)?;
    let n = get_u64(r)?;
    let m = get_u64(r)?;
    if n != ion.n() || m != ion.rank() {
        return format_err(format!("DEIM record ({n}, {m}) does not match the ionic basis ({}, {})", ion.n(), ion.rank()));
    }
    let mut indices = Vec::with_capacity(m);
    for _ in 0..m {
        let i = get_u64(r)?;
        if i >= n || indices.contains(&i) {
            return format_err(format!("bad DEIM index {i}"));
        }
        indices.push(i);
    }
    let inv = DMatrix::from_vec(m, m, get_f64s(r, m * m)?);
    Ok(DeimOperator::from_parts(ion, indices, inv))
}

pub fn write_entry<W: Write>(w: &mut W, e: &BasisEntry) -> Result<()> {
    write_pod(w, &e.u)?;
    write_pod(w, &e.ion)?;
    write_deim(w, &e.deim)
}

pub fn read_entry<R: Read>(r: &mut R) -> Result<BasisEntry> {
    let u = read_pod(r)?;
    let ion = read_pod(r)?;
    if u.field != Field::U || ion.field != Field::Iion {
        return format_err("archive must hold the u basis followed by the I_ion basis");
    }
    if u.n() != ion.n() || u.sigma_gen != ion.sigma_gen {
        return format_err("u and I_ion bases disagree on n or σ_gen");
    }
    let deim = read_deim(r, &ion)?;
    Ok(BasisEntry { u, ion, deim })
}

pub fn entry_to_bytes(e: &BasisEntry) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_entry(&mut buf, e)?;
    Ok(buf)
}

pub fn load_entry(path: &Path) -> Result<BasisEntry> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let e = read_entry(&mut r)?;
    if !r.is_empty() {
        return format_err(format!("{} trailing bytes in {}", r.len(), path.display()));
    }
    Ok(e)
}
