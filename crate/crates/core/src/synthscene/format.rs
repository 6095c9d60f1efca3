//! Little-endian binary dataset files.
//!
//! ```text
//! "CTLO" | version u32 | sample count u64
//! per sample: G u32 | D_feat u32 | object count u32 | G²·D_feat f32
//!   per object: category u32 | centroid 2×f32 | G² mask bits, LSB first, byte padded
//!   query count u32
//!   per query: object u32 | D_emb u32 | D_emb×f32 | has_point u8 | [2×f32]
//! ```
//!
//! Values are stored as f32; generated scenes are already f32-exact so a
//! write/ingest roundtrip returns the same dataset.

use std::io::Write;
use std::path::Path;

use super::{FeatureGrid, Sample, SceneObject, SceneSpec};
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::slotattn::{Query, QuerySet};

pub const MAGIC: &[u8; 4] = b"CTLO";
pub const FORMAT_VERSION: u32 = 1;

// Caps that reject absurd headers before allocating.
const MAX_SIDE: u32 = 4096;
const MAX_DIM: u32 = 1 << 16;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::arg(format!("{what} {n} does not fit the file format")))
}

fn encode_sample(out: &mut Vec<u8>, s: &Sample) -> Result<()> {
    let k = s.features.num_patches();
    put_u32(out, len_u32(s.features.side, "grid side")?);
    put_u32(out, len_u32(s.features.dim(), "feature width")?);
    put_u32(out, len_u32(s.scene.objects.len(), "object count")?);
    for &v in s.features.features.data() {
        put_f32(out, v);
    }
    for o in &s.scene.objects {
        put_u32(out, len_u32(o.category, "category")?);
        put_f32(out, o.center[0]);
        put_f32(out, o.center[1]);
        let mut bits = vec![0u8; k.div_ceil(8)];
        for (p, &m) in o.mask.iter().enumerate() {
            if m {
                bits[p / 8] |= 1 << (p % 8);
            }
        }
        out.extend_from_slice(&bits);
    }
    put_u32(out, len_u32(s.queries.len(), "query count")?);
    for q in &s.queries.queries {
        put_u32(out, len_u32(q.object, "query object")?);
        put_u32(out, len_u32(q.lang_code.len(), "code width")?);
        for &v in &q.lang_code {
            put_f32(out, v);
        }
        match q.point {
            Some([x, y]) => {
                out.push(1);
                put_f32(out, x);
                put_f32(out, y);
            }
            None => out.push(0),
        }
    }
    Ok(())
}

/// Serializes a dataset into `out`.
pub fn write_dataset<W: Write>(samples: &[Sample], out: &mut W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for (i, s) in samples.iter().enumerate() {
        s.validate()
            .map_err(|msg| Error::Validation { sample: i, msg })?;
        encode_sample(&mut buf, s)?;
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Writes a dataset file, replacing any existing file at `path`.
pub fn write_features(samples: &[Sample], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write_dataset(samples, &mut file)?;
    file.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated: {what} needs {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.bad(format!("{what} length overflows")))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn bad(&self, msg: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg,
        }
    }
}

fn decode_sample(r: &mut Reader<'_>, index: usize) -> Result<Sample> {
    let at = r.pos;
    let side = r.u32("grid side")?;
    let dim = r.u32("feature width")?;
    if side == 0 || side > MAX_SIDE || dim == 0 || dim > MAX_DIM {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("sample {index}: unsupported shape G={side}, D_feat={dim}"),
        });
    }
    let (side, dim) = (side as usize, dim as usize);
    let k = side * side;
    let count = r.u32("object count")? as usize;
    let feats = r.f32s(k * dim, "features")?;
    let features = FeatureGrid::new(side, Array::new(&[k, dim], feats)?)?;
    let mut objects = Vec::with_capacity(count.min(k));
    for _ in 0..count {
        let category = r.u32("category")? as usize;
        let c = r.f32s(2, "centroid")?;
        let bits = r.take(k.div_ceil(8), "mask")?;
        let mask = (0..k).map(|p| bits[p / 8] >> (p % 8) & 1 == 1).collect();
        objects.push(SceneObject {
            category,
            mask,
            center: [c[0], c[1]],
        });
    }
    let qcount = r.u32("query count")? as usize;
    let mut queries = Vec::with_capacity(qcount.min(1024));
    for _ in 0..qcount {
        let object = r.u32("query object")? as usize;
        let width = r.u32("code width")?;
        if width > MAX_DIM {
            return Err(r.bad(format!("sample {index}: code width {width} too large")));
        }
        let lang_code = r.f32s(width as usize, "query code")?;
        let point = match r.u8("point flag")? {
            0 => None,
            1 => {
                let p = r.f32s(2, "point")?;
                Some([p[0], p[1]])
            }
            f => {
                return Err(Error::Format {
                    offset: r.pos as u64 - 1,
                    msg: format!("point flag {f} is not 0 or 1"),
                })
            }
        };
        queries.push(Query {
            object,
            lang_code,
            point,
        });
    }
    Ok(Sample {
        features,
        scene: SceneSpec { side, objects },
        queries: QuerySet { queries },
    })
}

/// Parses and validates a dataset held in memory.
pub fn read_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"CTLO\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = r.u64("sample count")?;
    let mut samples = Vec::with_capacity((n as usize).min(1 << 16));
    for i in 0..n as usize {
        let s = decode_sample(&mut r, i)?;
        s.validate()
            .map_err(|msg| Error::Validation { sample: i, msg })?;
        samples.push(s);
    }
    if r.pos != bytes.len() {
        return Err(r.bad(format!(
            "{} trailing bytes after {n} samples",
            bytes.len() - r.pos
        )));
    }
    Ok(samples)
}

/// Reads a dataset file written by [`write_features`] or an external tool.
pub fn ingest_features(path: &Path) -> Result<Vec<Sample>> {
    read_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn small() -> (SceneConfig, SceneCodebooks) {
        let cfg = SceneConfig {
            grid: 6,
            max_size: 3,
            min_size: 1,
            appearance_dim: 4,
            emb_dim: 3,
            categories: 3,
            ..SceneConfig::default()
        };
        let books = SceneCodebooks::generate(&cfg, 11).unwrap();
        (cfg, books)
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let mut buf = Vec::new();
        write_dataset(&[], &mut buf).unwrap();
        assert_eq!(buf.len(), 16);
        assert!(read_dataset(&buf).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_and_rewrite_are_exact() {
        let (cfg, books) = small();
        let data = generate_dataset(&cfg, &books, 3, Stream::TrainScenes, 0, 5).unwrap();
        let mut a = Vec::new();
        write_dataset(&data, &mut a).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, data);
        let mut b = Vec::new();
        write_dataset(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let (cfg, books) = small();
        let data = generate_dataset(&cfg, &books, 3, Stream::TrainScenes, 0, 2).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        for cut in [0, 3, 10, 17, buf.len() / 2, buf.len() - 1] {
            assert!(
                matches!(read_dataset(&buf[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = Vec::new();
        write_dataset(&[], &mut buf).unwrap();
        let mut m = buf.clone();
        m[0] = b'X';
        assert!(matches!(
            read_dataset(&m),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut v = buf;
        v[4] = 2;
        assert!(matches!(
            read_dataset(&v),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn overlapping_masks_name_the_sample() {
        let (cfg, books) = small();
        let data = generate_dataset(&cfg, &books, 3, Stream::TrainScenes, 0, 3).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        // corrupt sample 2 in the byte stream so the writer's own check does not fire
        let s = &data[2];
        let shared = s.scene.objects[0].mask.iter().position(|&m| m).unwrap();
        let prefix = {
            let mut b = Vec::new();
            write_dataset(&data[..2], &mut b).unwrap();
            b.len()
        };
        let k = 36;
        let feats = 12 + k * s.features.dim() * 4;
        let obj = 4 + 8 + k.div_ceil(8);
        // set the shared bit in object 1's mask
        let byte = prefix + feats + obj + 12 + shared / 8;
        buf[byte] |= 1 << (shared % 8);
        match read_dataset(&buf) {
            Err(Error::Validation { sample, msg }) => {
                assert_eq!(sample, 2);
                assert!(msg.contains("overlap"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
