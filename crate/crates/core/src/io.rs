//! File formats: the PSNT tensor container, the PSNP learned-parameter
//! file, CSV logs, and 8-bit PGM magnitude export.
//!
//! PSNT layout: magic "PSNT", u16 version = 1, u8 domain tag
//! (0 image, 1 kspace, 2 real mask, 3 real map), u8 element type
//! (0 complex as two little-endian f64, 1 real f64), three u64 dims
//! (Nx, Ny, Nt), then the row-major payload. Unknown magic or version is
//! rejected.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hankel::{SpatialFilter, SpatialFilterBank, TemporalFilter};
use crate::sampling::{CoilSet, SamplingMask};
use crate::volume::{ComplexVolume, Domain};

pub const PSNT_MAGIC: &[u8; 4] = b"PSNT";
pub const PSNP_MAGIC: &[u8; 4] = b"PSNP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Image = 0,
    KSpace = 1,
    RealMask = 2,
    RealMap = 3,
}

impl DomainTag {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Image),
            1 => Ok(Self::KSpace),
            2 => Ok(Self::RealMask),
            3 => Ok(Self::RealMap),
            other => Err(Error::Format(format!("unknown domain tag {other}"))),
        }
    }
}

struct Header {
    tag: DomainTag,
    complex: bool,
    dims: (usize, usize, usize),
}

fn write_header<W: Write>(w: &mut W, tag: DomainTag, complex: bool, dims: (usize, usize, usize)) -> Result<()> {
    w.write_all(PSNT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[tag as u8, if complex { 0 } else { 1 }])?;
    for d in [dims.0, dims.1, dims.2] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PSNT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    let tag = DomainTag::from_u8(tags[0])?;
    let complex = match tags[1] {
        0 => true,
        1 => false,
        other => return Err(Error::Format(format!("unknown element type {other}"))),
    };
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *d = u64::from_le_bytes(b) as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Format("zero dimension".into()));
    }
    Ok(Header { tag, complex, dims: (dims[0], dims[1], dims[2]) })
}

fn write_complex_payload<W: Write>(w: &mut W, data: &Array3<Complex64>) -> Result<()> {
    for z in data.iter() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_complex_payload<R: Read>(r: &mut R, dims: (usize, usize, usize)) -> Result<Array3<Complex64>> {
    let mut data = Array3::zeros(dims);
    for z in data.iter_mut() {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        *z = Complex64::new(re, im);
    }
    Ok(data)
}

pub fn write_volume(path: &Path, v: &ComplexVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let tag = match v.domain {
        Domain::Image => DomainTag::Image,
        Domain::KSpace => DomainTag::KSpace,
    };
    write_header(&mut w, tag, true, v.dims())?;
    write_complex_payload(&mut w, &v.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<ComplexVolume> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let domain = match h.tag {
        DomainTag::Image => Domain::Image,
        DomainTag::KSpace => Domain::KSpace,
        other => return Err(Error::Format(format!("expected image/kspace volume, got {other:?}"))),
    };
    if !h.complex {
        return Err(Error::Format("expected complex payload".into()));
    }
    Ok(ComplexVolume::new(read_complex_payload(&mut r, h.dims)?, domain))
}

pub fn write_mask(path: &Path, m: &SamplingMask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DomainTag::RealMask, false, m.dims())?;
    for v in m.mask.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.tag != DomainTag::RealMask || h.complex {
        return Err(Error::Format("not a mask file".into()));
    }
    let mut mask = Array3::zeros(h.dims);
    for v in mask.iter_mut() {
        *v = read_f64(&mut r)?;
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Format("mask entries must be 0 or 1".into()));
        }
    }
    let ny = h.dims.1;
    let lines: usize = (0..ny).filter(|&j| mask[[0, j, 0]] > 0.5).count();
    let acceleration = ny as f64 / lines.max(1) as f64;
    Ok(SamplingMask { mask, acceleration })
}

/// Coil maps stored as a complex (Nx, Ny, m) tensor with the real-map tag.
pub fn write_coils(path: &Path, coils: &CoilSet) -> Result<()> {
    let (nx, ny) = coils.maps[0].dim();
    let m = coils.count();
    let mut data = Array3::zeros((nx, ny, m));
    for (k, map) in coils.maps.iter().enumerate() {
        for i in 0..nx {
            for j in 0..ny {
                data[[i, j, k]] = map[[i, j]];
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DomainTag::RealMap, true, (nx, ny, m))?;
    write_complex_payload(&mut w, &data)?;
    w.flush()?;
    Ok(())
}

pub fn read_coils(path: &Path) -> Result<CoilSet> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.tag != DomainTag::RealMap || !h.complex {
        return Err(Error::Format("not a coil map file".into()));
    }
    let data = read_complex_payload(&mut r, h.dims)?;
    let (nx, ny, m) = h.dims;
    let maps = (0..m)
        .map(|k| Array2::from_shape_fn((nx, ny), |(i, j)| data[[i, j, k]]))
        .collect();
    Ok(CoilSet { maps })
}

/// Temporal filter as a complex (L+1, 1, 1) tensor.
pub fn write_temporal_filter(path: &Path, f: &TemporalFilter) -> Result<()> {
    let n = f.taps.len();
    let mut data = Array3::zeros((n, 1, 1));
    for (k, t) in f.taps.iter().enumerate() {
        data[[k, 0, 0]] = *t;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DomainTag::Image, true, (n, 1, 1))?;
    write_complex_payload(&mut w, &data)?;
    w.flush()?;
    Ok(())
}

pub fn read_temporal_filter(path: &Path) -> Result<TemporalFilter> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if !h.complex || h.dims.1 != 1 || h.dims.2 != 1 {
        return Err(Error::Format("not a temporal filter file".into()));
    }
    let data = read_complex_payload(&mut r, h.dims)?;
    TemporalFilter::new((0..h.dims.0).map(|k| data[[k, 0, 0]]).collect())
}

/// Spatial filter bank as a complex (kx_len, ky_len, frames) tensor.
pub fn write_spatial_bank(path: &Path, bank: &SpatialFilterBank) -> Result<()> {
    let (ka, kb) = bank.filters[0].taps.dim();
    let frames = bank.filters.len();
    let mut data = Array3::zeros((ka, kb, frames));
    for (t, f) in bank.filters.iter().enumerate() {
        if f.taps.dim() != (ka, kb) {
            return Err(Error::DimMismatch {
                expected: format!("{ka}x{kb}"),
                got: format!("{:?}", f.taps.dim()),
            });
        }
        for a in 0..ka {
            for b in 0..kb {
                data[[a, b, t]] = f.taps[[a, b]];
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DomainTag::Image, true, (ka, kb, frames))?;
    write_complex_payload(&mut w, &data)?;
    w.flush()?;
    Ok(())
}

pub fn read_spatial_bank(path: &Path) -> Result<SpatialFilterBank> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if !h.complex {
        return Err(Error::Format("not a spatial filter file".into()));
    }
    let data = read_complex_payload(&mut r, h.dims)?;
    let (ka, kb, frames) = h.dims;
    let filters = (0..frames)
        .map(|t| SpatialFilter::new(Array2::from_shape_fn((ka, kb), |(a, b)| data[[a, b, t]])))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpatialFilterBank { filters })
}

/// Write CSV with a header row; 12 significant digits, LF newlines.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header.join(",").as_bytes())?;
    w.write_all(b"\n")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format_csv_value(*v)).collect();
        w.write_all(line.join(",").as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_csv_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.12e}")
    }
}

/// 8-bit binary PGM (P5) frames, magnitudes normalized to the volume max.
/// One file per frame: `<prefix>_f<index>.pgm`.
pub fn export_pgm(prefix: &Path, v: &ComplexVolume) -> Result<Vec<std::path::PathBuf>> {
    let (nx, ny, nt) = v.dims();
    let peak = v.data.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    let mut paths = Vec::with_capacity(nt);
    for t in 0..nt {
        let path = prefix.with_file_name(format!(
            "{}_f{:03}.pgm",
            prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            t
        ));
        let mut w = BufWriter::new(File::create(&path)?);
        write!(w, "P5\n{ny} {nx}\n255\n")?;
        for i in 0..nx {
            for j in 0..ny {
                let m = v.data[[i, j, t]].norm();
                let px = if peak > 0.0 { (m / peak * 255.0).round() as u8 } else { 0 };
                w.write_all(&[px])?;
            }
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{make_coils, make_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn volume_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.psnt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = ComplexVolume::new(
            Array3::from_shape_fn((4, 3, 2), |_| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }),
            Domain::KSpace,
        );
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(v.data, back.data);
        assert_eq!(back.domain, Domain::KSpace);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.psnt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_volume(&path).is_err());

        let path2 = dir.path().join("badver.psnt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PSNT");
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        bytes.extend_from_slice(&[0u8; 24]);
        std::fs::write(&path2, bytes).unwrap();
        assert!(read_volume(&path2).is_err());
    }

    #[test]
    fn mask_and_coils_round_trip() {
        let dir = tempdir().unwrap();
        let m = make_mask(4, 16, 3, 4.0, 2, 5).unwrap();
        let mp = dir.path().join("m.psnt");
        write_mask(&mp, &m).unwrap();
        let back = read_mask(&mp).unwrap();
        assert_eq!(m.mask, back.mask);

        let c = make_coils(6, 5, 3, 2).unwrap();
        let cp = dir.path().join("c.psnt");
        write_coils(&cp, &c).unwrap();
        let back = read_coils(&cp).unwrap();
        assert_eq!(c.maps, back.maps);

        // tag confusion is rejected
        assert!(read_mask(&cp).is_err());
        assert!(read_volume(&mp).is_err());
    }

    #[test]
    fn filter_round_trips() {
        let dir = tempdir().unwrap();
        let f = TemporalFilter::new(vec![
            Complex64::new(1.0, 0.5),
            Complex64::new(-0.3, 0.2),
            Complex64::new(0.1, -0.9),
        ])
        .unwrap();
        let fp = dir.path().join("h.psnt");
        write_temporal_filter(&fp, &f).unwrap();
        assert_eq!(read_temporal_filter(&fp).unwrap().taps, f.taps);

        let bank = SpatialFilterBank::shared(crate::ps_model::spatial_filter_default());
        let bp = dir.path().join("hs.psnt");
        write_spatial_bank(&bp, &bank).unwrap();
        assert_eq!(read_spatial_bank(&bp).unwrap().filters[0].taps, bank.filters[0].taps);
    }

    #[test]
    fn csv_round_trips_to_printed_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![vec![0.0, 1.2345678901234e-3], vec![1.0, f64::INFINITY]];
        write_csv(&path, &["step", "value"], &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,value");
        let parsed: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert!((parsed[1] - 1.2345678901234e-3).abs() < 1e-15);
        assert!(lines.next().unwrap().ends_with("inf"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn pgm_export_zero_volume() {
        let dir = tempdir().unwrap();
        let v = ComplexVolume::zeros(3, 4, 2, Domain::Image);
        let paths = export_pgm(&dir.path().join("out"), &v).unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = std::fs::read(&paths[0]).unwrap();
        let body = &bytes[bytes.len() - 12..];
        assert!(body.iter().all(|&b| b == 0));
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
    }
}
