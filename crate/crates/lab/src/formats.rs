// SPDX-License-Identifier: Apache-2.0

//! Binary file formats: label maps (`SEG1`), images (`IMG1`), model
//! checkpoints (`PUN1`) and optimizer state (`PUS1`). All integers and
//! floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use probseg_core::diff::{ParamGroup, ParamStore};
use probseg_core::nets::ArchConfig;
use probseg_core::{Image, SegMap};

use crate::error::{LabError, Result};

pub const SEG_MAGIC: &[u8; 4] = b"SEG1";
pub const IMG_MAGIC: &[u8; 4] = b"IMG1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PUN1";
pub const STATE_MAGIC: &[u8; 4] = b"PUS1";
pub const SEG_VERSION: u8 = 1;
/// Class byte marking an ignored pixel.
pub const IGNORE: u8 = 255;

/// Cursor over a byte buffer that reports failures with the file name and
/// the offset at which decoding stopped.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &Path) -> Self {
        Reader { bytes, pos: 0, path: path.to_path_buf() }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn fail(&self, detail: impl Into<String>) -> LabError {
        self.fail_at(self.pos, detail)
    }

    fn fail_at(&self, offset: usize, detail: impl Into<String>) -> LabError {
        LabError::Parse { path: self.path.clone(), offset: offset as u64, detail: detail.into() }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated {what}: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.array::<4>("magic")?;
        if &got != magic {
            return Err(self.fail_at(
                start,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.fail("length overflow"))?, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail_at(start, format!("{what} is not UTF-8")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn extent(value: usize, what: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| LabError::config(format!("{what} {value} does not fit the file format")))
}

pub fn encode_seg(map: &SegMap) -> Result<Vec<u8>> {
    let classes = u8::try_from(map.num_classes())
        .ok()
        .filter(|&c| c < IGNORE)
        .ok_or_else(|| LabError::config(format!("{} classes do not fit the file format", map.num_classes())))?;
    let mut out = Vec::with_capacity(10 + map.len());
    out.extend_from_slice(SEG_MAGIC);
    out.push(SEG_VERSION);
    out.push(classes);
    out.extend_from_slice(&extent(map.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&extent(map.width(), "width")?.to_le_bytes());
    out.extend((0..map.len()).map(|i| if map.is_ignored(i) { IGNORE } else { map.classes()[i] }));
    Ok(out)
}

pub fn decode_seg(bytes: &[u8], path: &Path) -> Result<SegMap> {
    let mut r = Reader::new(bytes, path);
    r.magic(SEG_MAGIC)?;
    let version = r.u8("version")?;
    if version != SEG_VERSION {
        return Err(LabError::Parse { path: path.into(), offset: 4, detail: format!("unsupported version {version}") });
    }
    let num_classes = r.u8("class count")? as usize;
    let height = r.u16("height")? as usize;
    let width = r.u16("width")? as usize;
    let start = r.offset();
    let raw = r.take(height * width, "class bytes")?;
    r.finish()?;
    if let Some(i) = raw.iter().position(|&c| c != IGNORE && c as usize >= num_classes) {
        return Err(LabError::Parse {
            path: path.into(),
            offset: (start + i) as u64,
            detail: format!("class {} out of range for {num_classes} classes", raw[i]),
        });
    }
    let ignore: Vec<bool> = raw.iter().map(|&c| c == IGNORE).collect();
    let classes: Vec<u8> = raw.iter().map(|&c| if c == IGNORE { 0 } else { c }).collect();
    SegMap::with_ignore(height, width, num_classes, classes, Some(ignore))
        .map_err(|e| LabError::Parse { path: path.into(), offset: 5, detail: e.to_string() })
}

/// Images are stored in single precision; values are rounded on write.
pub fn encode_image(image: &Image) -> Result<Vec<u8>> {
    let channels = u8::try_from(image.channels())
        .map_err(|_| LabError::config(format!("{} channels do not fit the file format", image.channels())))?;
    let mut out = Vec::with_capacity(9 + 4 * image.data().len());
    out.extend_from_slice(IMG_MAGIC);
    out.push(channels);
    out.extend_from_slice(&extent(image.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&extent(image.width(), "width")?.to_le_bytes());
    for v in image.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut r = Reader::new(bytes, path);
    r.magic(IMG_MAGIC)?;
    let channels = r.u8("channels")? as usize;
    let height = r.u16("height")? as usize;
    let width = r.u16("width")? as usize;
    let data = r.f32s(channels * height * width, "pixel data")?;
    r.finish()?;
    Ok(Image::new(channels, height, width, data.into_iter().map(f64::from).collect())?)
}

/// Round an image through the on-disk precision.
pub fn quantize(image: &Image) -> Image {
    let data = image.data().iter().map(|v| f64::from(*v as f32)).collect();
    Image::new(image.channels(), image.height(), image.width(), data).expect("same shape")
}

pub fn read_seg(path: &Path) -> Result<SegMap> {
    decode_seg(&read_file(path)?, path)
}

pub fn write_seg(path: &Path, map: &SegMap) -> Result<()> {
    write_file(path, &encode_seg(map)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_file(path)?, path)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_file(path, &encode_image(image)?)
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// One network's parameters with the architecture they belong to.
pub fn encode_checkpoint(arch: &ArchConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_str(&mut out, &arch.to_kv());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        push_str(&mut out, &p.name);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ArchConfig, ParamStore)> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let start = r.offset();
    let n = r.u32("config length")? as usize;
    let text = r.string(n, "config text")?;
    let arch = ArchConfig::from_kv(&text).map_err(|e| r.fail_at(start, e.to_string()))?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let name = r.string(len, "parameter name")?;
        let group = ParamGroup::from_name(&name).ok_or_else(|| r.fail_at(at, format!("unknown parameter group in {name:?}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("extent overflow"))?;
        let values = r.f64s(numel, "parameter values")?;
        store.register(&name, group, &shape, values).map_err(|e| r.fail_at(at, e.to_string()))?;
    }
    r.finish()?;
    Ok((arch, store))
}

/// Adam moments and step counter of one network.
pub fn encode_state(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&store.step().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        push_str(&mut out, &p.name);
        out.extend_from_slice(&(p.m.len() as u64).to_le_bytes());
        for v in p.m.iter().chain(&p.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Restore moments and step into a store holding the same parameters.
pub fn apply_state(bytes: &[u8], path: &Path, store: &mut ParamStore) -> Result<()> {
    let mut r = Reader::new(bytes, path);
    r.magic(STATE_MAGIC)?;
    let step = r.u64("step")?;
    let count = r.u32("parameter count")? as usize;
    if count != store.len() {
        return Err(r.fail(format!("{count} parameters, checkpoint has {}", store.len())));
    }
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let name = r.string(len, "parameter name")?;
        let id = store.find(&name).ok_or_else(|| r.fail_at(at, format!("unknown parameter {name:?}")))?;
        let n = r.u64("moment length")? as usize;
        if n != store.get(id).value.len() {
            return Err(r.fail_at(at, format!("{name}: {n} moments for {} values", store.get(id).value.len())));
        }
        let m = r.f64s(n, "first moments")?;
        let v = r.f64s(n, "second moments")?;
        let p = store.get_mut(id);
        p.m = m;
        p.v = v;
    }
    r.finish()?;
    store.set_step(step);
    Ok(())
}
