//! Binary file formats, PGM export, checkpoints and the flat key-value
//! config syntax.
//!
//! All multi-byte integers are little-endian. Payloads are stored as f32.
//!
//!   LRIM: magic "LRIM", version u16, height u32, width u32, f32 pixels
//!   LRSG: magic "LRSG", version u16, views u32, bins u32, f32 entries
//!   LRSM: magic "LRSM", version u16, rows u64, cols u64, nnz u64,
//!         row offsets (rows+1) x u64, column indices nnz x u32, values nnz x f32
//!   LRPW: magic "LRPW", version u16, n_p u32, then 6 layers of
//!         out u32, in u32, kh u32, kw u32, kernel f32s, bias f32s

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, GridLevel};
use crate::image::{Image, Sinogram};
use crate::nn::{NetworkWeights, KERNEL_SIZE};
use crate::system::SystemMatrix;

pub const FORMAT_VERSION: u16 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                got,
                std::str::from_utf8(expected).unwrap()
            )));
        }
        Ok(())
    }
}

fn check_version(v: u16) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    img.validate()?;
    let mut out = Vec::with_capacity(14 + 4 * img.data.len());
    out.extend_from_slice(b"LRIM");
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(img.side as u32).to_le_bytes());
    out.extend_from_slice(&(img.side as u32).to_le_bytes());
    push_f32s(&mut out, &img.data);
    std::fs::write(path, out)?;
    Ok(())
}

/// Pixel pitch is not part of the format; callers supply it (1.0 when
/// unknown).
pub fn read_image(path: &Path, pixel_pitch: f64) -> Result<Image> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor::new(&buf);
    c.magic(b"LRIM")?;
    check_version(c.u16()?)?;
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    if h != w {
        return Err(Error::Format(format!("image must be square, got {h}x{w}")));
    }
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        data.push(c.f32()? as f64);
    }
    Image::from_data(h, pixel_pitch, data)
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    s.validate()?;
    let mut out = Vec::with_capacity(14 + 4 * s.data.len());
    out.extend_from_slice(b"LRSG");
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(s.num_views as u32).to_le_bytes());
    out.extend_from_slice(&(s.num_bins as u32).to_le_bytes());
    push_f32s(&mut out, &s.data);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor::new(&buf);
    c.magic(b"LRSG")?;
    check_version(c.u16()?)?;
    let views = c.u32()? as usize;
    let bins = c.u32()? as usize;
    let mut data = Vec::with_capacity(views * bins);
    for _ in 0..views * bins {
        data.push(c.f32()? as f64);
    }
    Sinogram::from_data(views, bins, data)
}

pub fn write_system_matrix(path: &Path, a: &SystemMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(30 + 8 * a.row_offsets.len() + 8 * a.nnz());
    out.extend_from_slice(b"LRSM");
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(a.rows as u64).to_le_bytes());
    out.extend_from_slice(&(a.cols as u64).to_le_bytes());
    out.extend_from_slice(&(a.nnz() as u64).to_le_bytes());
    for &o in &a.row_offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    for &ci in &a.col_indices {
        out.extend_from_slice(&ci.to_le_bytes());
    }
    push_f32s(&mut out, &a.values);
    std::fs::write(path, out)?;
    Ok(())
}

/// The cache stores only the CSR triplet; grid size, pixel pitch and the
/// sinogram layout come from the geometry it was built for.
pub fn read_system_matrix(path: &Path, geom: &GeometryConfig, level: GridLevel) -> Result<SystemMatrix> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor::new(&buf);
    c.magic(b"LRSM")?;
    check_version(c.u16()?)?;
    let rows = c.u64()? as usize;
    let cols = c.u64()? as usize;
    let nnz = c.u64()? as usize;
    let size = geom.grid_size(level);
    if rows != geom.num_views * geom.num_bins || cols != size * size {
        return Err(Error::Format(format!(
            "cached matrix is {rows}x{cols}, geometry expects {}x{}",
            geom.num_views * geom.num_bins,
            size * size
        )));
    }
    let mut row_offsets = Vec::with_capacity(rows + 1);
    for _ in 0..rows + 1 {
        row_offsets.push(c.u64()?);
    }
    if row_offsets.last().copied() != Some(nnz as u64) {
        return Err(Error::Format("row offsets do not end at nnz".into()));
    }
    let mut col_indices = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let ci = c.u32()?;
        if ci as usize >= cols {
            return Err(Error::Format(format!("column index {ci} out of range")));
        }
        col_indices.push(ci);
    }
    let mut values = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        values.push(c.f32()? as f64);
    }
    Ok(SystemMatrix {
        rows,
        cols,
        grid_size: size,
        pixel_pitch: geom.pixel_pitch(level),
        num_bins: geom.num_bins,
        row_offsets,
        col_indices,
        values,
    })
}

pub fn write_weights(path: &Path, w: &NetworkWeights) -> Result<()> {
    w.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(b"LRPW");
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.state_channels as u32).to_le_bytes());
    for net in [&w.image_net, &w.sino_net] {
        for l in &net.layers {
            out.extend_from_slice(&(l.out_ch as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_ch as u32).to_le_bytes());
            out.extend_from_slice(&(KERNEL_SIZE as u32).to_le_bytes());
            out.extend_from_slice(&(KERNEL_SIZE as u32).to_le_bytes());
            push_f32s(&mut out, &l.kernel);
            push_f32s(&mut out, &l.bias);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<NetworkWeights> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor::new(&buf);
    c.magic(b"LRPW")?;
    check_version(c.u16()?)?;
    let n_p = c.u32()? as usize;
    let mut w = NetworkWeights::zeros(n_p);
    for net in [&mut w.image_net, &mut w.sino_net] {
        for l in net.layers.iter_mut() {
            let out_ch = c.u32()? as usize;
            let in_ch = c.u32()? as usize;
            let kh = c.u32()? as usize;
            let kw = c.u32()? as usize;
            if out_ch != l.out_ch || in_ch != l.in_ch || kh != KERNEL_SIZE || kw != KERNEL_SIZE {
                return Err(Error::Format(format!(
                    "layer shape {out_ch}x{in_ch}x{kh}x{kw} does not match n_p = {n_p}"
                )));
            }
            for v in l.kernel.iter_mut() {
                *v = c.f32()? as f64;
            }
            for v in l.bias.iter_mut() {
                *v = c.f32()? as f64;
            }
        }
    }
    w.validate()?;
    Ok(w)
}

/// 8-bit PGM export with display window [0, 1]; row 0 of the image (bottom
/// of the field of view) lands at the bottom of the file.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.side, img.side)?;
    let mut bytes = Vec::with_capacity(img.data.len());
    for r in (0..img.side).rev() {
        for c in 0..img.side {
            let v = img.at(r, c).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Content hash of a geometry, recorded in checkpoint metadata so stale
/// checkpoints are detectable.
pub fn geometry_hash(geom: &GeometryConfig) -> String {
    let canonical = format!(
        "fine={};coarse={};views={};bins={};start={:.12e};end={:.12e};step={:.12e};beam={:?};src={:.12e};det={:.12e};fov={:.12e}",
        geom.fine_size,
        geom.coarse_size,
        geom.num_views,
        geom.num_bins,
        geom.angle_start,
        geom.angle_end,
        geom.angle_step,
        geom.beam,
        geom.source_radius,
        geom.detector_spacing,
        geom.fov_radius
    );
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sidecar metadata written next to a weight checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stages: usize,
    pub step_size: f64,
    pub state_channels: usize,
    pub fidelity: String,
    pub use_prior: bool,
    pub seed: u64,
    pub geometry_hash: String,
}

pub fn write_checkpoint(path: &Path, w: &NetworkWeights, meta: &CheckpointMeta) -> Result<()> {
    write_weights(path, w)?;
    let mut kv = String::new();
    kv.push_str(&format!("stages = {}\n", meta.stages));
    kv.push_str(&format!("step_size = {}\n", meta.step_size));
    kv.push_str(&format!("state_channels = {}\n", meta.state_channels));
    kv.push_str(&format!("fidelity = {}\n", meta.fidelity));
    kv.push_str(&format!("use_prior = {}\n", meta.use_prior));
    kv.push_str(&format!("seed = {}\n", meta.seed));
    kv.push_str(&format!("geometry_hash = {}\n", meta.geometry_hash));
    std::fs::write(meta_path(path), kv)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(NetworkWeights, CheckpointMeta)> {
    let w = read_weights(path)?;
    let text = std::fs::read_to_string(meta_path(path))?;
    let map = parse_kv(&text)?;
    let get = |k: &str| -> Result<&String> {
        map.get(k).ok_or_else(|| Error::Format(format!("checkpoint meta missing {k}")))
    };
    let meta = CheckpointMeta {
        stages: get("stages")?.parse().map_err(|e| Error::Format(format!("stages: {e}")))?,
        step_size: get("step_size")?
            .parse()
            .map_err(|e| Error::Format(format!("step_size: {e}")))?,
        state_channels: get("state_channels")?
            .parse()
            .map_err(|e| Error::Format(format!("state_channels: {e}")))?,
        fidelity: get("fidelity")?.clone(),
        use_prior: get("use_prior")?
            .parse()
            .map_err(|e| Error::Format(format!("use_prior: {e}")))?,
        seed: get("seed")?.parse().map_err(|e| Error::Format(format!("seed: {e}")))?,
        geometry_hash: get("geometry_hash")?.clone(),
    };
    Ok((w, meta))
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    std::path::PathBuf::from(p)
}

/// Parse flat `key = value` text; later occurrences of a key win. Lines
/// starting with `#` and blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    parse_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::xavier_init;
    use crate::system::build_system_matrix;

    #[test]
    fn image_round_trip_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.lrim");
        let img =
            Image::from_data(3, 0.5, (0..9).map(|i| i as f64 * 0.111).collect()).unwrap();
        write_image(&p, &img).unwrap();
        let back = read_image(&p, 0.5).unwrap();
        assert_eq!(back.side, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sinogram_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.lrsg");
        let s = Sinogram::from_data(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_sinogram(&p, &s).unwrap();
        let back = read_sinogram(&p).unwrap();
        assert_eq!(back.num_views, 2);
        assert_eq!(back.num_bins, 3);
        assert_eq!(back.data, s.data);
    }

    #[test]
    fn matrix_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lrsm");
        let geom = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let a = build_system_matrix(&geom, GridLevel::Fine).unwrap();
        write_system_matrix(&p, &a).unwrap();
        let back = read_system_matrix(&p, &geom, GridLevel::Fine).unwrap();
        assert_eq!(back.rows, a.rows);
        assert_eq!(back.cols, a.cols);
        assert_eq!(back.col_indices, a.col_indices);
        for (x, y) in a.values.iter().zip(&back.values) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matrix_cache_rejects_wrong_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lrsm");
        let geom = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let a = build_system_matrix(&geom, GridLevel::Fine).unwrap();
        write_system_matrix(&p, &a).unwrap();
        let other = GeometryConfig::parallel(8, 2, 3, 6, 1.0);
        assert!(read_system_matrix(&p, &other, GridLevel::Fine).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.lrpw");
        let w = xavier_init(3, 5).unwrap();
        write_weights(&p, &w).unwrap();
        let back = read_weights(&p).unwrap();
        assert_eq!(back.state_channels, 5);
        for (a, b) in w.to_flat().iter().zip(back.to_flat()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_meta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.lrpw");
        let w = xavier_init(4, 2).unwrap();
        let geom = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let meta = CheckpointMeta {
            stages: 10,
            step_size: 0.1,
            state_channels: 2,
            fidelity: "learned".into(),
            use_prior: true,
            seed: 42,
            geometry_hash: geometry_hash(&geom),
        };
        write_checkpoint(&p, &w, &meta).unwrap();
        let (_, back) = read_checkpoint(&p).unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn kv_parsing() {
        let map = parse_kv("# comment\na = 1\n\nb.c = hello world \na = 2\n").unwrap();
        assert_eq!(map.get("a").unwrap(), "2");
        assert_eq!(map.get("b.c").unwrap(), "hello world");
        assert!(parse_kv("not a kv line").is_err());
    }

    #[test]
    fn geometry_hash_changes_with_geometry() {
        let a = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let mut b = a.clone();
        b.num_views = 4;
        assert_ne!(geometry_hash(&a), geometry_hash(&b));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(read_image(&p, 1.0).is_err());
    }
}
