//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Supported payloads: uint8, int16, float32 and float64. Orientation beyond
//! the voxel size and the position of the first voxel is ignored. Files are
//! written little-endian as float32 with both qform and sform set to a plain
//! scaling plus offset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{GridMeta, LabelMask, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

pub const INTENT_VECTOR: i16 = 1007;

/// The subset of header fields this crate reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub intent_code: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub descrip: String,
    pub little_endian: bool,
}

impl NiftiHeader {
    /// Header for a float32 image of `dims` with optional trailing vector dimension.
    pub fn float32(grid: &GridMeta, components: Option<usize>) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = grid.dims[a] as i16;
        }
        let mut intent_code = 0;
        if let Some(c) = components {
            dim[0] = 4;
            dim[4] = c as i16;
            intent_code = INTENT_VECTOR;
        }
        let mut pixdim = [1.0f32; 8];
        for a in 0..3 {
            pixdim[a + 1] = grid.spacing[a] as f32;
        }
        let mut srow = [[0.0f32; 4]; 3];
        for a in 0..3 {
            srow[a][a] = grid.spacing[a] as f32;
            srow[a][3] = grid.origin[a] as f32;
        }
        NiftiHeader {
            dim,
            pixdim,
            datatype: DT_FLOAT32,
            bitpix: 32,
            intent_code,
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            qform_code: 1,
            sform_code: 1,
            qoffset: [grid.origin[0] as f32, grid.origin[1] as f32, grid.origin[2] as f32],
            srow,
            descrip: String::new(),
            little_endian: true,
        }
    }

    pub fn grid(&self) -> Result<GridMeta> {
        let mut dims = [0usize; 3];
        let mut spacing = [0.0f64; 3];
        for a in 0..3 {
            let d = if (a as i16) < self.dim[0] { self.dim[a + 1] } else { 1 };
            if d <= 0 {
                return Err(Error::InvalidGrid(format!("non-positive dim {d}")));
            }
            dims[a] = d as usize;
            let p = self.pixdim[a + 1].abs() as f64;
            spacing[a] = if p > 0.0 && p.is_finite() { p } else { 1.0 };
        }
        let origin = if self.sform_code > 0 {
            [self.srow[0][3] as f64, self.srow[1][3] as f64, self.srow[2][3] as f64]
        } else if self.qform_code > 0 {
            self.qoffset.map(|o| o as f64)
        } else {
            [0.0; 3]
        };
        GridMeta::new(dims, spacing, origin)
    }

    /// Number of voxels across all dimensions.
    pub fn voxel_count(&self) -> usize {
        let nd = self.dim[0].clamp(1, 7) as usize;
        (1..=nd).map(|a| self.dim[a].max(1) as usize).product()
    }

    pub fn parse(buf: &[u8], path: &Path) -> Result<Self> {
        let fmt_err = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
        if buf.len() < HEADER_SIZE {
            return Err(fmt_err("file shorter than the 348-byte header"));
        }
        let le = match (i32::from_le_bytes(buf[0..4].try_into().unwrap()), i32::from_be_bytes(buf[0..4].try_into().unwrap())) {
            (348, _) => true,
            (_, 348) => false,
            _ => return Err(fmt_err("sizeof_hdr is not 348")),
        };
        if &buf[344..348] != b"n+1\0" {
            return Err(fmt_err("magic is not \"n+1\""));
        }
        let r = Reader { buf, le };
        let mut dim = [0i16; 8];
        for (a, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * a);
        }
        if !(1..=7).contains(&dim[0]) {
            return Err(fmt_err("dim[0] outside 1..=7"));
        }
        let mut pixdim = [0f32; 8];
        for (a, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * a);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, s) in srow.iter_mut().enumerate() {
            for (c, v) in s.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * row + 4 * c);
            }
        }
        let descrip = String::from_utf8_lossy(&buf[148..228]).trim_end_matches('\0').to_string();
        Ok(NiftiHeader {
            dim,
            pixdim,
            datatype: r.i16(70),
            bitpix: r.i16(72),
            intent_code: r.i16(68),
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
            descrip,
            little_endian: le,
        })
    }

    /// Serializes to 348 little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        put(&mut b, 0, &348i32.to_le_bytes());
        b[38] = b'r';
        for (a, d) in self.dim.iter().enumerate() {
            put(&mut b, 40 + 2 * a, &d.to_le_bytes());
        }
        put(&mut b, 68, &self.intent_code.to_le_bytes());
        put(&mut b, 70, &self.datatype.to_le_bytes());
        put(&mut b, 72, &self.bitpix.to_le_bytes());
        for (a, p) in self.pixdim.iter().enumerate() {
            put(&mut b, 76 + 4 * a, &p.to_le_bytes());
        }
        put(&mut b, 108, &self.vox_offset.to_le_bytes());
        put(&mut b, 112, &self.scl_slope.to_le_bytes());
        put(&mut b, 116, &self.scl_inter.to_le_bytes());
        b[123] = 2; // xyzt_units: mm
        let d = self.descrip.as_bytes();
        let n = d.len().min(79);
        b[148..148 + n].copy_from_slice(&d[..n]);
        put(&mut b, 252, &self.qform_code.to_le_bytes());
        put(&mut b, 254, &self.sform_code.to_le_bytes());
        for (a, q) in self.qoffset.iter().enumerate() {
            put(&mut b, 268 + 4 * a, &q.to_le_bytes());
        }
        for (row, s) in self.srow.iter().enumerate() {
            for (c, v) in s.iter().enumerate() {
                put(&mut b, 280 + 16 * row + 4 * c, &v.to_le_bytes());
            }
        }
        b[344..348].copy_from_slice(b"n+1\0");
        b
    }
}

fn put(buf: &mut [u8], at: usize, bytes: &[u8]) {
    buf[at..at + bytes.len()].copy_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        self.buf[at..at + N].try_into().unwrap()
    }
    fn i16(&self, at: usize) -> i16 {
        let b = self.bytes::<2>(at);
        if self.le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }
    fn f32(&self, at: usize) -> f32 {
        let b = self.bytes::<4>(at);
        if self.le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }
    fn f64(&self, at: usize) -> f64 {
        let b = self.bytes::<8>(at);
        if self.le { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
    }
}

/// Reads the header and the scaled payload as `f64` (all dimensions, first fastest).
pub fn read_raw(path: impl AsRef<Path>) -> Result<(NiftiHeader, Vec<f64>)> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hdr = NiftiHeader::parse(&buf, path)?;
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        code => return Err(Error::Unsupported { path: path.to_path_buf(), code }),
    };
    let n = hdr.voxel_count();
    let offset = (hdr.vox_offset.max(HEADER_SIZE as f32)) as usize;
    let need = offset + n * width;
    if buf.len() < need {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload truncated: expected {need} bytes, found {}", buf.len()),
            ),
        ));
    }
    let r = Reader { buf: &buf, le: hdr.little_endian };
    let mut data: Vec<f64> = match hdr.datatype {
        DT_UINT8 => buf[offset..offset + n].iter().map(|&v| v as f64).collect(),
        DT_INT16 => (0..n).map(|i| r.i16(offset + 2 * i) as f64).collect(),
        DT_FLOAT32 => (0..n).map(|i| r.f32(offset + 4 * i) as f64).collect(),
        _ => (0..n).map(|i| r.f64(offset + 8 * i)).collect(),
    };
    if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() {
        let (s, b) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
        if !(s == 1.0 && b == 0.0) {
            data.iter_mut().for_each(|v| *v = *v * s + b);
        }
    }
    Ok((hdr, data))
}

/// Reads a 3-D scalar volume.
pub fn read_nifti<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let (hdr, data) = read_raw(path)?;
    let grid = hdr.grid()?;
    if data.len() != grid.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a 3-D volume, header has dims {:?}", &hdr.dim[..=hdr.dim[0] as usize]),
        });
    }
    Volume::new(grid, data.into_iter().map(T::lit).collect())
}

/// Reads a label volume; every nonzero voxel becomes 1.
pub fn read_label<T: Real>(path: impl AsRef<Path>) -> Result<LabelMask<T>> {
    let v = read_nifti::<T>(path)?;
    Ok(LabelMask::from_volume_nonzero(&v))
}

/// Writes a header plus payload already laid out as float32 values.
pub fn write_raw(path: impl AsRef<Path>, hdr: &NiftiHeader, payload: impl Iterator<Item = f32>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = hdr.to_bytes();
    bytes.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `v` as a float32 NIfTI-1 file.
pub fn write_nifti<T: Real>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let hdr = NiftiHeader::float32(v.grid(), None);
    write_raw(path, &hdr, v.data().iter().map(|x| x.as_f64() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(datatype: i16, bitpix: i16, dims: [i16; 3], slope: f32, inter: f32) -> Vec<u8> {
        let grid = GridMeta::new(dims.map(|d| d as usize), [2.0, 3.0, 4.0], [0.0; 3]).unwrap();
        let mut h = NiftiHeader::float32(&grid, None);
        h.datatype = datatype;
        h.bitpix = bitpix;
        h.scl_slope = slope;
        h.scl_inter = inter;
        let mut b = h.to_bytes();
        b.extend_from_slice(&[0; 4]);
        b
    }

    #[test]
    fn zeros_float32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii");
        let mut b = header_bytes(DT_FLOAT32, 32, [4, 4, 4], 0.0, 0.0);
        b.extend(std::iter::repeat(0u8).take(64 * 4));
        fs::write(&p, b).unwrap();
        let v = read_nifti::<f64>(&p).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert_eq!(v.grid().spacing, [2.0, 3.0, 4.0]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let mut b = header_bytes(DT_INT16, 16, [1, 1, 1], 2.0, 1.0);
        b.extend_from_slice(&3i16.to_le_bytes());
        fs::write(&p, b).unwrap();
        let v = read_nifti::<f64>(&p).unwrap();
        assert_eq!(v.data(), &[7.0]);
    }

    #[test]
    fn uint8_labels_and_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.nii");
        let mut b = header_bytes(DT_UINT8, 8, [2, 1, 1], 0.0, 0.0);
        b.extend_from_slice(&[0, 2]);
        fs::write(&p, &b).unwrap();
        let m = read_label::<f64>(&p).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);

        // swap the header fields we rely on to big-endian
        let mut be = b.clone();
        be[0..4].copy_from_slice(&348i32.to_be_bytes());
        for a in 0..8 {
            let v = i16::from_le_bytes(b[40 + 2 * a..42 + 2 * a].try_into().unwrap());
            be[40 + 2 * a..42 + 2 * a].copy_from_slice(&v.to_be_bytes());
        }
        for off in [68usize, 70, 72, 252, 254] {
            let v = i16::from_le_bytes(b[off..off + 2].try_into().unwrap());
            be[off..off + 2].copy_from_slice(&v.to_be_bytes());
        }
        for off in (76..124).step_by(4).chain((268..328).step_by(4)) {
            let v = f32::from_le_bytes(b[off..off + 4].try_into().unwrap());
            be[off..off + 4].copy_from_slice(&v.to_be_bytes());
        }
        fs::write(&p, &be).unwrap();
        let m = read_label::<f64>(&p).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
        assert_eq!(m.grid().spacing, [2.0, 3.0, 4.0]);
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.nii");
        let mut b = header_bytes(DT_FLOAT32, 32, [2, 2, 2], 0.0, 0.0);
        b[344] = b'x';
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti::<f64>(&p), Err(Error::Format { .. })));

        let b = header_bytes(512, 16, [2, 2, 2], 0.0, 0.0);
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti::<f64>(&p), Err(Error::Unsupported { code: 512, .. })));

        let mut b = header_bytes(DT_FLOAT32, 32, [2, 2, 2], 0.0, 0.0);
        b.extend_from_slice(&[0; 12]);
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti::<f64>(&p), Err(Error::Io { .. })));

        assert!(matches!(read_nifti::<f64>(dir.path().join("missing.nii")), Err(Error::Io { .. })));
        let v = Volume::<f64>::zeros(GridMeta::with_dims([1, 1, 1]).unwrap());
        assert!(write_nifti(&v, dir.path().join("no/such/dir.nii")).is_err());
    }

    #[test]
    fn paper_scale_header_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.nii");
        let grid = GridMeta::new([128, 128, 128], [5.0; 3], [0.0; 3]).unwrap();
        write_nifti(&Volume::<f32>::zeros(grid), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), VOX_OFFSET + 128 * 128 * 128 * 4);
        let h = NiftiHeader::parse(&bytes, &p).unwrap();
        assert_eq!(&h.dim[..4], &[3, 128, 128, 128]);
        assert_eq!(&h.pixdim[1..4], &[5.0, 5.0, 5.0]);
        assert!(bytes[VOX_OFFSET..].iter().all(|&b| b == 0));
    }
}
