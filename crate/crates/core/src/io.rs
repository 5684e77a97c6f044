//! Snapshots, checkpoints, images and CSV logs.
//!
//! Binary files are little-endian. A snapshot is the magic `PMGS`, a `u32`
//! version, a `u64` particle count, then per particle the `f64` fields
//! x[3], v[3], C[9], F[9], mass with matrices row-major.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::AdamState;
use crate::linalg::{Mat3, Vec3};
use crate::mpm::{ControlField, ParticleState};
use crate::render::RenderImage;
use crate::train::TrainState;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PMGS";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIELDS_PER_PARTICLE: usize = 25;

fn put_f64s(out: &mut Vec<u8>, v: impl IntoIterator<Item = f64>) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_mat(out: &mut Vec<u8>, m: &Mat3) {
    put_f64s(out, (0..9).map(|i| m[(i / 3, i % 3)]));
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Format(format!("length {n} too large")))?;
        // Every counted item occupies at least one byte.
        if n > self.buf.len() - self.pos {
            return Err(Error::Format(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn mat(&mut self) -> Result<Mat3> {
        let v = self.f64s(9)?;
        Ok(Mat3::from_row_slice(&v))
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format(format!(
                "version {v} is not supported (expected {version})"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_state(out: &mut Vec<u8>, s: &ParticleState) {
    put_u64(out, s.len() as u64);
    for i in 0..s.len() {
        put_f64s(out, s.x[i].iter().copied());
        put_f64s(out, s.v[i].iter().copied());
        put_mat(out, &s.c[i]);
        put_mat(out, &s.f[i]);
        put_f64s(out, [s.mass[i]]);
    }
}

fn read_state(r: &mut Reader) -> Result<ParticleState> {
    let n = r.u64()? as usize;
    if n.checked_mul(FIELDS_PER_PARTICLE * 8)
        .is_none_or(|b| b > r.buf.len() - r.pos)
    {
        return Err(Error::Format(format!("truncated: {n} particles declared")));
    }
    let mut s = ParticleState {
        x: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        f: Vec::with_capacity(n),
        mass: Vec::with_capacity(n),
    };
    for _ in 0..n {
        s.x.push(r.vec3()?);
        s.v.push(r.vec3()?);
        s.c.push(r.mat()?);
        s.f.push(r.mat()?);
        s.mass.push(r.f64()?);
    }
    Ok(s)
}

pub fn encode_snapshot(s: &ParticleState) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + s.len() * FIELDS_PER_PARTICLE * 8);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    put_state(&mut out, s);
    out
}

pub fn decode_snapshot(buf: &[u8]) -> Result<ParticleState> {
    let mut r = Reader { buf, pos: 0 };
    r.header(SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let s = read_state(&mut r)?;
    r.finish()?;
    Ok(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn export_snapshot(s: &ParticleState, path: &Path) -> Result<()> {
    write_file(path, &encode_snapshot(s))
}

pub fn import_snapshot(path: &Path) -> Result<ParticleState> {
    decode_snapshot(&read_file(path)?)
}

/// Everything needed to resume training bit-exactly.
pub fn encode_checkpoint(t: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, t.episode as u64);
    put_state(&mut out, &t.start);
    put_u64(&mut out, t.controls.stride as u64);
    put_u64(&mut out, t.controls.slots.len() as u64);
    put_u64(&mut out, t.controls.n_particles() as u64);
    put_f64s(&mut out, t.controls.to_flat());
    put_u64(&mut out, t.adam.t);
    put_u64(&mut out, t.adam.m.len() as u64);
    put_f64s(&mut out, t.adam.m.iter().copied());
    put_f64s(&mut out, t.adam.v.iter().copied());
    put_u64(&mut out, t.multipliers.len() as u64);
    put_f64s(&mut out, t.multipliers.iter().copied());
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let episode = r.u64()? as usize;
    let start = read_state(&mut r)?;
    let stride = r.u64()? as usize;
    let slots = r.len()?;
    let n = r.len()?;
    let count = slots.checked_mul(n).and_then(|c| c.checked_mul(9));
    if count
        .and_then(|c| c.checked_mul(8))
        .is_none_or(|b| b > buf.len() - r.pos)
    {
        return Err(Error::Format(format!("truncated: {slots}x{n} control slots declared")));
    }
    let count = count.unwrap();
    let mut controls = ControlField {
        stride: stride.max(1),
        slots: vec![vec![Mat3::zeros(); n]; slots],
    };
    controls.set_flat(&r.f64s(count)?);
    let t = r.u64()?;
    let len = r.len()?;
    let adam = AdamState {
        m: r.f64s(len)?,
        v: r.f64s(len)?,
        t,
    };
    let len = r.len()?;
    let multipliers = r.f64s(len)?;
    r.finish()?;
    if adam.m.len() != controls.len() || multipliers.len() != start.len() {
        return Err(Error::Format("checkpoint sections disagree in size".into()));
    }
    Ok(TrainState {
        episode,
        start,
        controls,
        adam,
        multipliers,
    })
}

fn quantize(v: f64, max: f64) -> u64 {
    (v.clamp(0.0, 1.0) * max).round() as u64
}

/// Binary PPM (P6), 8 bits per channel.
pub fn encode_ppm(width: usize, height: usize, rgb: &[Vec3]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for c in rgb {
        out.extend(c.iter().map(|v| quantize(*v, 255.0) as u8));
    }
    out
}

/// Binary PGM (P5), 16 bits big-endian as the format requires.
/// Values are clamped to `[0, 1]`.
pub fn encode_pgm16(width: usize, height: usize, gray: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in gray {
        out.extend_from_slice(&(quantize(*v, 65535.0) as u16).to_be_bytes());
    }
    out
}

/// Depth mapped to `[0, 1]` over the covered range; uncovered pixels are 1.
pub fn normalize_depth(depth: &[f64], alpha: &[f64], far: f64) -> Vec<f64> {
    let covered = || {
        depth
            .iter()
            .zip(alpha)
            .filter(|(d, a)| **a > 1e-6 && **d < far)
            .map(|(d, _)| *d)
    };
    let lo = covered().fold(f64::INFINITY, f64::min);
    let hi = covered().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    depth
        .iter()
        .zip(alpha)
        .map(|(d, a)| if *a > 1e-6 && *d < far { (d - lo) / span } else { 1.0 })
        .collect()
}

/// Writes `<stem>_color.ppm`, `<stem>_alpha.pgm` and `<stem>_depth.pgm`.
pub fn write_frame(dir: &Path, stem: &str, img: &RenderImage, far: f64) -> Result<()> {
    let (w, h) = (img.width, img.height);
    write_file(&dir.join(format!("{stem}_color.ppm")), &encode_ppm(w, h, &img.color))?;
    write_file(&dir.join(format!("{stem}_alpha.pgm")), &encode_pgm16(w, h, &img.alpha))?;
    let d = normalize_depth(&img.depth, &img.alpha, far);
    write_file(&dir.join(format!("{stem}_depth.pgm")), &encode_pgm16(w, h, &d))
}

/// CSV file with a header row taken from the record's field names.
pub struct CsvLog {
    path: std::path::PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<CsvLog> {
        Self::open(path, false)
    }

    /// With `append`, rows go after the existing content and the header is
    /// only written when the file is empty.
    pub fn open(path: &Path, append: bool) -> Result<CsvLog> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = f.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let writer = csv::WriterBuilder::new()
            .has_headers(empty)
            .from_writer(BufWriter::new(f));
        Ok(CsvLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, row: &impl Serialize) -> Result<()> {
        self.writer.serialize(row).map_err(|e| self.err(e))
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.path.clone();
        self.writer.flush().map_err(|e| Error::io(path, e))
    }

    fn err(&self, e: csv::Error) -> Error {
        Error::io(&self.path, std::io::Error::other(e.to_string()))
    }
}

/// Serializes `rows` as CSV with a header row into a string.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize) -> ParticleState {
        let mut s = ParticleState::at_rest(
            (0..n).map(|i| Vec3::new(i as f64 * 0.1, 1.0 / 3.0, -2.5)).collect(),
            vec![0.7; n],
        );
        for i in 0..n {
            s.v[i] = Vec3::new(1e-300, -0.0, f64::MAX);
            s.c[i] = Mat3::from_fn(|r, c| (r * 3 + c) as f64 + 0.1);
            s.f[i] = Mat3::from_fn(|r, c| if r == c { 1.0 + 1e-17 } else { std::f64::consts::PI });
        }
        s
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let s = state(5);
        let b = encode_snapshot(&s);
        assert_eq!(b.len(), 16 + 5 * 25 * 8);
        let back = decode_snapshot(&b).unwrap();
        assert_eq!(encode_snapshot(&back), b);
        assert!(decode_snapshot(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_snapshot(&bad).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        let msg = decode_snapshot(&v2).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = state(3);
        let mut controls = ControlField::zeros(3, 4, 2);
        let flat: Vec<f64> = (0..controls.len()).map(|i| i as f64 * 0.01).collect();
        controls.set_flat(&flat);
        let t = TrainState {
            episode: 7,
            start: s,
            adam: AdamState {
                m: flat.iter().map(|x| x * 2.0).collect(),
                v: flat.iter().map(|x| x * x).collect(),
                t: 21,
            },
            controls,
            multipliers: vec![1.0, 0.5, 0.05],
        };
        let b = encode_checkpoint(&t);
        assert_eq!(decode_checkpoint(&b).unwrap(), t);
        assert!(decode_checkpoint(&b[..b.len() - 8]).is_err());
        assert!(decode_snapshot(&b).is_err());
    }

    #[test]
    fn image_encodings() {
        let p = encode_ppm(2, 1, &[Vec3::new(1.0, 0.0, 0.5), Vec3::new(2.0, -1.0, 0.25)]);
        assert_eq!(&p[..11], b"P6\n2 1\n255\n");
        assert_eq!(&p[11..], &[255, 0, 128, 255, 0, 64]);
        let g = encode_pgm16(1, 2, &[1.0, 0.5]);
        assert_eq!(&g[..13], b"P5\n1 2\n65535\n");
        assert_eq!(&g[13..], &[255, 255, 128, 0]);
    }
}
