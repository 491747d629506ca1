//! File formats: binary PGM rasters, JSON pose documents and the `PTSR`
//! tensor container.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DepthImage, Pose, Skeleton};

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

/// Writes a 16-bit binary PGM (`P5`, maxval 65535, big-endian samples).
/// Depths are rounded to whole millimetres and saturate at 65535.
pub fn write_depth_pgm<W: Write>(img: &DepthImage, mut w: W) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", img.width(), img.height())?;
    let mut buf = Vec::with_capacity(img.data().len() * 2);
    for &v in img.data() {
        let mm = v.round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&mm.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_depth_pgm<R: Read>(mut r: R) -> Result<DepthImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (hdr, offset) = parse_pgm_header(&bytes)?;
    if hdr.maxval < 256 {
        return Err(Error::format(
            "pgm",
            offset,
            format!("expected 16-bit depth (maxval > 255), got maxval {}", hdr.maxval),
        ));
    }
    let n = hdr.width * hdr.height;
    let payload = &bytes[offset..];
    if payload.len() < 2 * n {
        return Err(Error::format(
            "pgm",
            bytes.len(),
            format!("truncated payload: need {} bytes, have {}", 2 * n, payload.len()),
        ));
    }
    let data = payload[..2 * n]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
        .collect();
    DepthImage::new(hdr.width, hdr.height, data)
}

/// Binary foreground mask; `true` marks a human pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Writes an 8-bit binary PGM (`P5`, maxval 255); foreground is 255.
pub fn write_mask_pgm<W: Write>(mask: &Mask, mut w: W) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let buf: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mask_pgm<R: Read>(mut r: R) -> Result<Mask> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (hdr, offset) = parse_pgm_header(&bytes)?;
    let n = hdr.width * hdr.height;
    let sample = if hdr.maxval < 256 { 1 } else { 2 };
    let payload = &bytes[offset..];
    if payload.len() < sample * n {
        return Err(Error::format(
            "pgm",
            bytes.len(),
            format!(
                "truncated payload: need {} bytes, have {}",
                sample * n,
                payload.len()
            ),
        ));
    }
    let data = payload[..sample * n]
        .chunks_exact(sample)
        .map(|c| c.iter().any(|&b| b != 0))
        .collect();
    Mask::new(hdr.width, hdr.height, data)
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(PgmHeader, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("pgm", 0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(Error::format("pgm", start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::format("pgm", start, format!("number out of range: {text}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("pgm", pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("pgm", pos, format!("invalid maxval {maxval}")));
    }
    Ok((
        PgmHeader {
            width: width as usize,
            height: height as usize,
            maxval,
        },
        pos,
    ))
}

// ---------------------------------------------------------------------------
// JSON pose documents
// ---------------------------------------------------------------------------

/// `{skeleton, poses}` document shared by ground truth, augmentation output
/// and synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDocument {
    pub skeleton: Skeleton,
    pub poses: Vec<Pose>,
}

impl PoseDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.skeleton.validate()?;
        for p in &doc.poses {
            p.validate(doc.skeleton.k)?;
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// ---------------------------------------------------------------------------
// PTSR tensor container
// ---------------------------------------------------------------------------

pub const TENSOR_MAGIC: &[u8; 4] = b"PTSR";
pub const TENSOR_VERSION: u16 = 1;

/// One named, row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                name,
                expected: dims,
                actual: vec![data.len()],
            });
        }
        Ok(Self { name, dims, data })
    }
}

/// Layout (all integers little-endian):
///
/// ```text
/// "PTSR" | version: u16 | entries: u32
/// per entry: name_len: u16 | name: utf-8 | rank: u8 | dims: u32 × rank | payload: f32 × Π dims
/// ```
pub fn write_tensors<W: Write>(entries: &[TensorEntry], mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
            return Err(Error::InvalidConfig(format!("tensor `{}` header too large", e.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.dims.len() as u8);
        for &d in &e.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidConfig(format!("tensor `{}` dim too large", e.name)))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != TENSOR_MAGIC {
        return Err(Error::format("ptsr", 0, "missing PTSR magic"));
    }
    let version = cur.u16()?;
    if version != TENSOR_VERSION {
        return Err(Error::format(
            "ptsr",
            4,
            format!("unsupported version {version}"),
        ));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let at = cur.pos;
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format("ptsr", at + 2, "entry name is not utf-8"))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("ptsr", cur.pos, "tensor size overflows"))?;
        let raw = cur.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format("ptsr", cur.pos, "tensor size overflows"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(TensorEntry { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("ptsr", cur.pos, "trailing bytes after last entry"));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                "ptsr",
                self.pos,
                format!("unexpected end of data (need {n} bytes)"),
            )),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Part;
    use proptest::prelude::*;

    #[test]
    fn depth_pgm_layout() {
        let img = DepthImage::new(2, 1, vec![1.0, 65535.0]).unwrap();
        let mut buf = Vec::new();
        write_depth_pgm(&img, &mut buf).unwrap();
        assert_eq!(&buf[..], b"P5\n2 1\n65535\n\x00\x01\xff\xff");
        assert_eq!(read_depth_pgm(&buf[..]).unwrap(), img);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let bytes = b"P5 # depth\n# another\n1 1 65535\n\x01\x02";
        assert_eq!(read_depth_pgm(&bytes[..]).unwrap().get(0, 0), 258.0);

        match read_depth_pgm(&b"P2\n1 1\n65535\n"[..]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match read_depth_pgm(&b"P5\n2 1\n65535\n\x00\x01"[..]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("{other:?}"),
        }
        match read_depth_pgm(&b"P5\n2 x\n"[..]) {
            Err(Error::Format { offset: 5, message, .. }) => assert!(message.contains("height")),
            other => panic!("{other:?}"),
        }
        assert!(read_depth_pgm(&b"P5\n1 1\n255\n\x05"[..]).is_err());
    }

    #[test]
    fn mask_pgm_round_trip() {
        let m = Mask::new(3, 1, vec![true, false, true]).unwrap();
        let mut buf = Vec::new();
        write_mask_pgm(&m, &mut buf).unwrap();
        assert_eq!(&buf[..], b"P5\n3 1\n255\n\xff\x00\xff");
        assert_eq!(read_mask_pgm(&buf[..]).unwrap(), m);
        // any nonzero byte is foreground
        assert!(read_mask_pgm(&b"P5\n1 1\n255\n\x07"[..]).unwrap().get(0, 0));
    }

    #[test]
    fn pose_document_json() {
        let doc = PoseDocument {
            skeleton: Skeleton::default(),
            poses: vec![Pose::new(vec![Part::new(1.0, 2.0, 3.0); 15])],
        };
        let text = doc.to_json().unwrap();
        assert!(text.contains("\"flip_pairs\""));
        assert!(text.contains("\"labeled\": true"));
        assert_eq!(PoseDocument::from_json(&text).unwrap(), doc);

        let bad = text.replacen("\"k\": 15", "\"k\": 14", 1);
        assert!(PoseDocument::from_json(&bad).is_err());
        match PoseDocument::from_json("{\n  \"skeleton\": 3") {
            Err(Error::Json { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tensor_layout() {
        let e = TensorEntry::new("H", vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&[e.clone()], &mut buf).unwrap();
        let mut want = b"PTSR".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'H');
        want.push(2);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(read_tensors(&buf[..]).unwrap(), vec![e]);
    }

    #[test]
    fn tensor_errors_carry_offsets() {
        assert!(TensorEntry::new("X", vec![2, 2], vec![0.0; 3]).is_err());
        match read_tensors(&b"PTSX"[..]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut buf = Vec::new();
        write_tensors(&[TensorEntry::new("D", vec![4], vec![0.0; 4]).unwrap()], &mut buf).unwrap();
        let cut = buf.len() - 3;
        match read_tensors(&buf[..cut]) {
            Err(Error::Format { format: "ptsr", offset, .. }) => assert!(offset > 10),
            other => panic!("{other:?}"),
        }
        buf.push(0);
        assert!(read_tensors(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn depth_pgm_round_trips_integer_mm(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let mut s = seed;
            let data: Vec<f64> = (0..w * h).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 48) as f64
            }).collect();
            let img = DepthImage::new(w, h, data).unwrap();
            let mut buf = Vec::new();
            write_depth_pgm(&img, &mut buf).unwrap();
            prop_assert_eq!(read_depth_pgm(&buf[..]).unwrap(), img);
        }

        #[test]
        fn tensors_round_trip(dims in prop::collection::vec(1usize..5, 0..4), v in -1e3f32..1e3) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| v * i as f32).collect();
            let e = vec![
                TensorEntry::new("a", dims.clone(), data).unwrap(),
                TensorEntry::new("Wp", vec![1], vec![v]).unwrap(),
            ];
            let mut buf = Vec::new();
            write_tensors(&e, &mut buf).unwrap();
            prop_assert_eq!(read_tensors(&buf[..]).unwrap(), e);
        }
    }
}
