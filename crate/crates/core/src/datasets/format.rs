//! Binary dataset container.
//!
//! ```text
//! magic        8 bytes  "SLOTDSET"
//! version      u32 LE
//! manifest_len u64 LE
//! manifest     manifest_len bytes of UTF-8 JSON (DatasetManifest)
//! records      n_scenes records, back to back
//! ```
//!
//! Each record:
//!
//! ```text
//! n_objects  u32 LE
//! height     u32 LE
//! width      u32 LE
//! image      height*width*3 f32 LE, row-major (y, x, channel), values in [-1, 1]
//! masks      (n_objects+1)*height*width bits, row-major (mask, y, x),
//!            bit i stored in byte i/8 at position i%8 (LSB first),
//!            zero-padded to a whole byte
//! objects    n_objects entries of 26 bytes:
//!            shape id u8 (0 square, 1 circle, 2 triangle),
//!            color 3 x f32 LE, size f32 LE, position (x, y) 2 x f32 LE,
//!            z_order u8
//! ```
//!
//! `checksum` in the manifest is the lowercase hex SHA-256 of the records
//! section.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, scene_seed, DatasetConfig, ObjectSpec, SceneRecord, ShapeKind};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLOTDSET";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub n_scenes: usize,
    /// `object_counts[n]` = number of scenes with `n` objects.
    pub object_counts: Vec<usize>,
    pub checksum: String,
}

fn encode_record(r: &SceneRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&(r.n_objects() as u32).to_le_bytes());
    out.extend_from_slice(&(r.height as u32).to_le_bytes());
    out.extend_from_slice(&(r.width as u32).to_le_bytes());
    for v in &r.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let nbits = r.masks.len() * r.num_pixels();
    let mut bits = vec![0u8; nbits.div_ceil(8)];
    for (i, on) in r.masks.iter().flatten().enumerate() {
        if *on {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    for o in &r.objects {
        out.push(o.shape.id());
        for c in o.color {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&o.size.to_le_bytes());
        for p in o.position {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.push(o.z_order);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}

fn decode_record(c: &mut Cursor<'_>) -> Result<SceneRecord> {
    let n = c.u32()? as usize;
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let mut image = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w * 3 {
        image.push(c.f32()?);
    }
    let nbits = (n + 1) * h * w;
    let bits = c.take(nbits.div_ceil(8))?;
    let masks = (0..n + 1)
        .map(|k| {
            (0..h * w)
                .map(|p| {
                    let i = k * h * w + p;
                    bits[i / 8] >> (i % 8) & 1 == 1
                })
                .collect()
        })
        .collect();
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let id = c.u8()?;
        let shape = ShapeKind::from_id(id).ok_or_else(|| Error::Format {
            path: c.path.to_path_buf(),
            reason: format!("unknown shape id {id}"),
        })?;
        let color = [c.f32()?, c.f32()?, c.f32()?];
        let size = c.f32()?;
        let position = [c.f32()?, c.f32()?];
        let z_order = c.u8()?;
        objects.push(ObjectSpec {
            shape,
            color,
            size,
            position,
            z_order,
        });
    }
    Ok(SceneRecord {
        height: h,
        width: w,
        image,
        masks,
        objects,
        jitter: None,
    })
}

fn manifest_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Writes `content` to `path` through a temporary file and a rename.
pub(crate) fn atomic_write(path: &Path, content: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(content).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes `records` to `path` (plus a JSON manifest sidecar).
pub fn write_dataset(
    records: &[SceneRecord],
    config: &DatasetConfig,
    path: &Path,
) -> Result<DatasetManifest> {
    let mut body = Vec::new();
    let mut object_counts = vec![0usize; config.object_count_range[1] + 1];
    for r in records {
        if r.n_objects() >= object_counts.len() {
            object_counts.resize(r.n_objects() + 1, 0);
        }
        object_counts[r.n_objects()] += 1;
        encode_record(r, &mut body);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        config: config.clone(),
        n_scenes: records.len(),
        object_counts,
        checksum: hex::encode(Sha256::digest(&body)),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(body.len() + json.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    atomic_write(path, &out)?;
    atomic_write(&manifest_sidecar(path), &json)?;
    Ok(manifest)
}

/// Generates `config.n_scenes` scenes and writes them to `destination`.
pub fn build_dataset(config: &DatasetConfig, destination: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let records = (0..config.n_scenes as u64)
        .map(|i| generate_scene(scene_seed(config.rng_seed, i), config))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&records, config, destination)
}

/// Reads a dataset file, verifying its checksum.
pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<SceneRecord>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    let fmt_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if c.take(8)? != MAGIC {
        return Err(fmt_err("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let mlen = c.u64()? as usize;
    let manifest: DatasetManifest = serde_json::from_slice(c.take(mlen)?)?;
    let body = &buf[c.pos..];
    if hex::encode(Sha256::digest(body)) != manifest.checksum {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut records = Vec::with_capacity(manifest.n_scenes);
    for _ in 0..manifest.n_scenes {
        records.push(decode_record(&mut c)?);
    }
    if c.pos != buf.len() {
        return Err(fmt_err("trailing bytes after records".into()));
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, range: [usize; 2]) -> DatasetConfig {
        DatasetConfig {
            height: 20,
            width: 18,
            n_scenes: n,
            object_count_range: range,
            size_range: [3.0, 5.0],
            rng_seed: 21,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let c = cfg(10, [1, 3]);
        let m = build_dataset(&c, &path).unwrap();
        assert_eq!(m.n_scenes, 10);
        let (m2, recs) = read_dataset(&path).unwrap();
        assert_eq!(m, m2);
        assert_eq!(recs.len(), 10);
        for (i, r) in recs.iter().enumerate() {
            r.validate().unwrap();
            assert_eq!(r, &generate_scene(scene_seed(21, i as u64), &c).unwrap());
        }
        assert!(manifest_sidecar(&path).exists());
    }

    #[test]
    fn count_range_is_respected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        build_dataset(&cfg(12, [2, 3]), &path).unwrap();
        let (m, recs) = read_dataset(&path).unwrap();
        assert!(recs.iter().all(|r| (2..=3).contains(&r.n_objects())));
        assert_eq!(m.object_counts[2] + m.object_counts[3], 12);
    }

    #[test]
    fn identical_runs_give_identical_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let a = build_dataset(&cfg(5, [1, 2]), &dir.path().join("a.bin")).unwrap();
        let b = build_dataset(&cfg(5, [1, 2]), &dir.path().join("b.bin")).unwrap();
        assert_eq!(a.checksum, b.checksum);
        let mut other = cfg(5, [1, 2]);
        other.rng_seed = 22;
        let c = build_dataset(&other, &dir.path().join("c.bin")).unwrap();
        assert_ne!(a.checksum, c.checksum);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        build_dataset(&cfg(3, [1, 2]), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 30;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Checksum(_))));
    }

    #[test]
    fn record_byte_layout() {
        let c = cfg(1, [1, 1]);
        let r = generate_scene(1, &c).unwrap();
        let mut bytes = Vec::new();
        encode_record(&r, &mut bytes);
        let px: usize = 20 * 18;
        assert_eq!(bytes.len(), 12 + px * 3 * 4 + (2 * px).div_ceil(8) + 26);
        assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &r.image[0].to_le_bytes());
        let obj = &bytes[bytes.len() - 26..];
        assert_eq!(obj[0], r.objects[0].shape.id());
        assert_eq!(obj[25], r.objects[0].z_order);
    }
}
