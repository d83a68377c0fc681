use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RenderedSample, Result, SynthError};
use crate::geometry::{Mat3, Rotation};

const MAGIC: &[u8; 4] = b"KVDS";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "samples.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCategory {
    pub id: u64,
    pub seed: u64,
    pub split: String,
    pub num_keypoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub categories: Vec<ManifestCategory>,
    pub samples_per_category: usize,
    pub records_file: String,
    pub record_count: usize,
}

/// Writes `manifest.json` and `samples.bin` into `dir`.
pub fn write_dump(dir: &Path, manifest: &DatasetManifest, samples: &[RenderedSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| SynthError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        let put_f64 = |buf: &mut Vec<u8>, v: f64| buf.extend_from_slice(&v.to_le_bytes());
        buf.extend_from_slice(&s.category_id.to_le_bytes());
        buf.extend_from_slice(&(s.image_size as u32).to_le_bytes());
        buf.extend_from_slice(&(s.num_keypoints() as u32).to_le_bytes());
        buf.extend_from_slice(&s.render_seed.to_le_bytes());
        buf.push(s.mirrored as u8);
        for &v in &s.image {
            put_f64(&mut buf, v);
        }
        for v in s.rotation.matrix().0.iter().flatten() {
            put_f64(&mut buf, *v);
        }
        put_f64(&mut buf, s.offset[0]);
        put_f64(&mut buf, s.offset[1]);
        for p in &s.canonical {
            p.iter().for_each(|&v| put_f64(&mut buf, v));
        }
        for p in &s.uv {
            p.iter().for_each(|&v| put_f64(&mut buf, v));
        }
        for &d in &s.depth {
            put_f64(&mut buf, d);
        }
    }
    let mut f = fs::File::create(dir.join(RECORDS_FILE))?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let out = self.data.get(self.pos..end).ok_or_else(|| SynthError::Format("truncated record file".into()))?;
        self.pos = end;
        Ok(out)
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dump(dir: &Path) -> Result<(DatasetManifest, Vec<RenderedSample>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| SynthError::Format(e.to_string()))?;
    let mut data = Vec::new();
    fs::File::open(dir.join(&manifest.records_file))?.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(SynthError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(SynthError::Format(format!("unsupported version {version}")));
    }
    let count = c.u64()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let category_id = c.u64()?;
        let image_size = c.u32()? as usize;
        let nk = c.u32()? as usize;
        let render_seed = c.u64()?;
        let mirrored = c.u8()? != 0;
        let image = (0..image_size * image_size).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let mut m = [[0.0; 3]; 3];
        for v in m.iter_mut().flatten() {
            *v = c.f64()?;
        }
        let rotation = Rotation::new(Mat3(m)).map_err(|e| SynthError::Format(e.to_string()))?;
        let offset = [c.f64()?, c.f64()?];
        let canonical = (0..nk).map(|_| Ok([c.f64()?, c.f64()?, c.f64()?])).collect::<Result<Vec<_>>>()?;
        let uv = (0..nk).map(|_| Ok([c.f64()?, c.f64()?])).collect::<Result<Vec<_>>>()?;
        let depth = (0..nk).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        samples.push(RenderedSample {
            category_id,
            image_size,
            image,
            rotation,
            canonical,
            mirrored,
            offset,
            uv,
            depth,
            render_seed,
        });
    }
    if c.pos != data.len() {
        return Err(SynthError::Format("trailing bytes in record file".into()));
    }
    if samples.len() != manifest.record_count {
        return Err(SynthError::Format(format!("{} records, manifest says {}", samples.len(), manifest.record_count)));
    }
    Ok((manifest, samples))
}
