use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::{read_bytes, write_bytes, IoError};
use crate::bev::{CategoryMap, MotionField};
use crate::geometry::{Category, Point3, PointCloud};

const CLOUD_MAGIC: &str = "BMLPC1";
const MASK_MAGIC: &str = "BMLMK1";
const FIELD_MAGIC: &str = "BMLMF1";
const CATEGORY_MAGIC: &str = "BMLCM1";

const FLAG_LABELS: u8 = 1;
const FLAG_GT: u8 = 2;

fn label_byte(c: Category) -> u8 {
    match c {
        Category::Background => 0,
        Category::Foreground => 1,
        Category::Unlabeled => 255,
    }
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Bounds-checked little-endian cursor.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn magic(&mut self, expected: &'static str) -> Result<(), IoError> {
        let want = expected.as_bytes();
        for (k, b) in want.iter().enumerate() {
            match self.bytes.get(k) {
                Some(got) if got == b => {}
                Some(_) => {
                    return Err(IoError::BadMagic {
                        offset: k,
                        expected,
                    })
                }
                None => {
                    return Err(IoError::Truncated {
                        offset: self.bytes.len(),
                        needed: want.len(),
                    })
                }
            }
        }
        self.pos = want.len();
        Ok(())
    }

    fn need(&self, n: usize) -> Result<(), IoError> {
        if self.bytes.len() - self.pos < n {
            return Err(IoError::Truncated {
                offset: self.bytes.len(),
                needed: self.pos + n,
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        self.need(n)?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn zero_pad(&mut self, n: usize) -> Result<(), IoError> {
        for _ in 0..n {
            let at = self.pos;
            if self.u8()? != 0 {
                return Err(IoError::InvalidByte {
                    offset: at,
                    msg: "reserved byte must be 0".into(),
                });
            }
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, IoError> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(IoError::InvalidByte {
                offset: at,
                msg: format!("non-finite float {v}"),
            });
        }
        Ok(v as f64)
    }

    /// Declared entry count, checked against the remaining payload before any
    /// allocation.
    fn count(&mut self, bytes_per_entry: usize, fixed: usize) -> Result<usize, IoError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| IoError::InvalidByte {
            offset: self.pos - 8,
            msg: format!("count {n} too large"),
        })?;
        let needed = n
            .checked_mul(bytes_per_entry)
            .and_then(|b| b.checked_add(fixed))
            .ok_or(IoError::InvalidByte {
                offset: self.pos - 8,
                msg: format!("count {n} too large"),
            })?;
        self.need(needed)?;
        Ok(n)
    }

    fn finish(&self, declared: usize) -> Result<(), IoError> {
        if self.pos != self.bytes.len() {
            return Err(IoError::CountMismatch {
                declared,
                offset: self.pos,
                trailing: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut flags = 0;
    if cloud.labels().is_some() {
        flags |= FLAG_LABELS;
    }
    if cloud.gt_motion().is_some() {
        flags |= FLAG_GT;
    }
    let mut out = Vec::with_capacity(16 + 25 * n);
    out.extend_from_slice(CLOUD_MAGIC.as_bytes());
    out.extend_from_slice(&[flags, 0]);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for p in cloud.points() {
        for c in p.coords.iter() {
            put_f32(&mut out, *c);
        }
    }
    if let Some(labels) = cloud.labels() {
        out.extend(labels.iter().map(|c| label_byte(*c)));
    }
    if let Some(gt) = cloud.gt_motion() {
        for v in gt {
            for c in v.iter() {
                put_f32(&mut out, *c);
            }
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let mut r = Cursor::new(bytes);
    r.magic(CLOUD_MAGIC)?;
    let flags = r.u8()?;
    if flags & !(FLAG_LABELS | FLAG_GT) != 0 {
        return Err(IoError::InvalidByte {
            offset: 6,
            msg: format!("unknown flag bits {flags:#04x}"),
        });
    }
    r.zero_pad(1)?;
    let has_labels = flags & FLAG_LABELS != 0;
    let has_gt = flags & FLAG_GT != 0;
    let per_point = 12 + usize::from(has_labels) + if has_gt { 12 } else { 0 };
    let n = r.count(per_point, 0)?;

    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(Point3::new(r.f32()?, r.f32()?, r.f32()?));
    }
    let mut cloud = PointCloud::new(points).map_err(|e| IoError::Content(e.to_string()))?;
    if has_labels {
        let start = r.pos;
        let raw = r.take(n)?;
        let mut labels = Vec::with_capacity(n);
        for (k, b) in raw.iter().enumerate() {
            labels.push(match b {
                0 => Category::Background,
                1 => Category::Foreground,
                255 => Category::Unlabeled,
                _ => {
                    return Err(IoError::InvalidByte {
                        offset: start + k,
                        msg: format!("label byte {b} is not 0, 1 or 255"),
                    })
                }
            });
        }
        cloud = cloud
            .with_labels(labels)
            .map_err(|e| IoError::Content(e.to_string()))?;
    }
    if has_gt {
        let mut gt = Vec::with_capacity(n);
        for _ in 0..n {
            gt.push(Vector3::new(r.f32()?, r.f32()?, r.f32()?));
        }
        cloud = cloud
            .with_gt_motion(gt)
            .map_err(|e| IoError::Content(e.to_string()))?;
    }
    r.finish(n)?;
    Ok(cloud)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, IoError> {
    decode_cloud(&read_bytes(path)?)
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_cloud(cloud))
}

pub fn encode_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + mask.len());
    out.extend_from_slice(MASK_MAGIC.as_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    out.extend(mask.iter().map(|m| u8::from(*m)));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Vec<bool>, IoError> {
    let mut r = Cursor::new(bytes);
    r.magic(MASK_MAGIC)?;
    r.zero_pad(2)?;
    let n = r.count(1, 0)?;
    let start = r.pos;
    let mut out = Vec::with_capacity(n);
    for (k, b) in r.take(n)?.iter().enumerate() {
        out.push(match b {
            0 => false,
            1 => true,
            _ => {
                return Err(IoError::InvalidByte {
                    offset: start + k,
                    msg: format!("mask byte {b} is not 0 or 1"),
                })
            }
        });
    }
    r.finish(n)?;
    Ok(out)
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>, IoError> {
    decode_mask(&read_bytes(path)?)
}

pub fn write_mask(mask: &[bool], path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_mask(mask))
}

fn grid_header(out: &mut Vec<u8>, magic: &str, h: usize, w: usize) {
    out.extend_from_slice(magic.as_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
}

pub fn encode_field(field: &MotionField) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * field.cells().len());
    grid_header(&mut out, FIELD_MAGIC, field.height(), field.width());
    put_f32(&mut out, field.horizon());
    for v in field.cells() {
        put_f32(&mut out, v.x);
        put_f32(&mut out, v.y);
    }
    out
}

fn read_grid_header(r: &mut Cursor, magic: &'static str) -> Result<(usize, usize), IoError> {
    r.magic(magic)?;
    r.zero_pad(2)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    Ok((h, w))
}

pub fn decode_field(bytes: &[u8]) -> Result<MotionField, IoError> {
    let mut r = Cursor::new(bytes);
    let (h, w) = read_grid_header(&mut r, FIELD_MAGIC)?;
    let horizon = r.f32()?;
    r.need(h * w * 8)?;
    let mut cells = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        cells.push(Vector2::new(r.f32()?, r.f32()?));
    }
    r.finish(h * w)?;
    MotionField::from_cells(h, w, cells, horizon).map_err(|e| IoError::Content(e.to_string()))
}

pub fn read_field(path: &Path) -> Result<MotionField, IoError> {
    decode_field(&read_bytes(path)?)
}

pub fn write_field(field: &MotionField, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_field(field))
}

pub fn encode_category_map(map: &CategoryMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * map.cells().len());
    grid_header(&mut out, CATEGORY_MAGIC, map.height(), map.width());
    for s in map.cells() {
        put_f32(&mut out, s[0]);
        put_f32(&mut out, s[1]);
    }
    out
}

pub fn decode_category_map(bytes: &[u8]) -> Result<CategoryMap, IoError> {
    let mut r = Cursor::new(bytes);
    let (h, w) = read_grid_header(&mut r, CATEGORY_MAGIC)?;
    r.need(h * w * 8)?;
    let mut cells = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        cells.push([r.f32()?, r.f32()?]);
    }
    r.finish(h * w)?;
    CategoryMap::from_cells(h, w, cells).map_err(|e| IoError::Content(e.to_string()))
}

pub fn read_category_map(path: &Path) -> Result<CategoryMap, IoError> {
    decode_category_map(&read_bytes(path)?)
}

pub fn write_category_map(map: &CategoryMap, path: &Path) -> Result<(), IoError> {
    write_bytes(path, &encode_category_map(map))
}
