//! On-disk dataset format: a text manifest plus a little-endian binary blob.
//!
//! The manifest names the split and lists every record's byte range in the
//! blob, so readers can validate the layout before touching pixel data.
//! Writing the same records always produces byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{CaptionRecord, TripletRecord};

pub const MANIFEST_HEADER: &str = "SYNTHSET v1";

// Guard against reading absurd dimensions out of a corrupt blob.
const MAX_IMAGE_ELEMENTS: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Triplet,
    Caption,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Triplet => "triplet",
            PayloadKind::Caption => "caption",
        }
    }

    fn parse(s: &str) -> Result<PayloadKind> {
        match s {
            "triplet" => Ok(PayloadKind::Triplet),
            "caption" => Ok(PayloadKind::Caption),
            other => Err(Error::Format(format!("unknown payload kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub offset: u64,
    pub length: u64,
    pub kind: PayloadKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        out.push_str(&format!("split={}\n", self.split));
        out.push_str(&format!("count={}\n", self.entries.len()));
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.index,
                e.offset,
                e.length,
                e.kind.as_str()
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<DatasetManifest> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "bad manifest header {header:?}; expected {MANIFEST_HEADER:?}"
            )));
        }
        let split = lines
            .next()
            .and_then(|l| l.strip_prefix("split="))
            .ok_or_else(|| Error::Format("manifest missing split line".to_string()))?
            .to_string();
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("manifest missing count line".to_string()))?;
        let mut entries = Vec::with_capacity(count);
        let mut end = 0u64;
        for i in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("manifest truncated at entry {i}")))?;
            let mut parts = line.split_whitespace();
            let parse_num = |p: Option<&str>, what: &str| -> Result<u64> {
                p.and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("entry {i}: bad {what} in {line:?}")))
            };
            let index = parse_num(parts.next(), "index")? as usize;
            let offset = parse_num(parts.next(), "offset")?;
            let length = parse_num(parts.next(), "length")?;
            let kind = PayloadKind::parse(
                parts
                    .next()
                    .ok_or_else(|| Error::Format(format!("entry {i}: missing kind")))?,
            )?;
            if index != i {
                return Err(Error::Format(format!(
                    "entry {i}: index {index} out of sequence"
                )));
            }
            if offset < end {
                return Err(Error::Format(format!(
                    "entry {i}: offset {offset} overlaps previous record"
                )));
            }
            end = offset
                .checked_add(length)
                .ok_or_else(|| Error::Format(format!("entry {i}: range overflows")))?;
            entries.push(ManifestEntry { index, offset, length, kind });
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Format("manifest has trailing entries".to_string()));
        }
        Ok(DatasetManifest { split, entries })
    }
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.manifest"))
}

pub fn blob_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.blob"))
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_image(buf: &mut Vec<u8>, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "encode_image",
            s,
            "expected a (channels, h, w) image",
        ));
    }
    for &d in s {
        if d > u32::MAX as usize {
            return Err(Error::Input(format!("image dimension {d} too large to store")));
        }
        put_u32(buf, d as u32);
    }
    for &v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("record truncated".to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_image(r: &mut Reader) -> Result<Tensor<f32>> {
    let c = r.u32()? as u64;
    let h = r.u32()? as u64;
    let w = r.u32()? as u64;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= MAX_IMAGE_ELEMENTS)
        .ok_or_else(|| Error::Format(format!("implausible image dimensions {c}x{h}x{w}")))?;
    let raw = r.take(n as usize * 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(vec![c as usize, h as usize, w as usize], data)
}

fn encode_triplet(buf: &mut Vec<u8>, rec: &TripletRecord) -> Result<()> {
    encode_image(buf, &rec.x)?;
    encode_image(buf, &rec.v0)?;
    encode_image(buf, &rec.v1)?;
    if rec.y > 1 {
        return Err(Error::Input(format!("judgment {} not in {{0,1}}", rec.y)));
    }
    buf.push(rec.y);
    Ok(())
}

fn decode_triplet(bytes: &[u8]) -> Result<TripletRecord> {
    let mut r = Reader::new(bytes);
    let x = decode_image(&mut r)?;
    let v0 = decode_image(&mut r)?;
    let v1 = decode_image(&mut r)?;
    let y = r.u8()?;
    if y > 1 {
        return Err(Error::Format(format!("judgment byte {y} not in {{0,1}}")));
    }
    if !r.done() {
        return Err(Error::Format("triplet record has trailing bytes".to_string()));
    }
    Ok(TripletRecord { x, v0, v1, y })
}

fn encode_caption(buf: &mut Vec<u8>, rec: &CaptionRecord) -> Result<()> {
    encode_image(buf, &rec.image)?;
    let count = u16::try_from(rec.tokens.len())
        .map_err(|_| Error::Input(format!("caption has {} tokens; limit is 65535", rec.tokens.len())))?;
    put_u16(buf, count);
    for &id in &rec.tokens {
        let id = u16::try_from(id)
            .map_err(|_| Error::Input(format!("token id {id} does not fit the storage format")))?;
        put_u16(buf, id);
    }
    Ok(())
}

fn decode_caption(bytes: &[u8]) -> Result<CaptionRecord> {
    let mut r = Reader::new(bytes);
    let image = decode_image(&mut r)?;
    let count = r.u16()? as usize;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        tokens.push(r.u16()? as usize);
    }
    if !r.done() {
        return Err(Error::Format("caption record has trailing bytes".to_string()));
    }
    Ok(CaptionRecord { image, tokens })
}

fn write_set<T>(
    dir: &Path,
    split: &str,
    kind: PayloadKind,
    records: &[T],
    encode: impl Fn(&mut Vec<u8>, &T) -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let offset = blob.len() as u64;
        encode(&mut blob, rec)?;
        entries.push(ManifestEntry {
            index,
            offset,
            length: blob.len() as u64 - offset,
            kind,
        });
    }
    let manifest = DatasetManifest { split: split.to_string(), entries };
    fs::write(manifest_path(dir, split), manifest.to_text())?;
    fs::write(blob_path(dir, split), blob)?;
    Ok(())
}

fn read_set<T>(
    dir: &Path,
    split: &str,
    kind: PayloadKind,
    decode: impl Fn(&[u8]) -> Result<T>,
) -> Result<Vec<T>> {
    let text = fs::read_to_string(manifest_path(dir, split))?;
    let manifest = DatasetManifest::from_text(&text)?;
    if manifest.split != split {
        return Err(Error::Format(format!(
            "manifest names split {:?} but was read as {split:?}",
            manifest.split
        )));
    }
    let blob = fs::read(blob_path(dir, split))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.kind != kind {
            return Err(Error::Format(format!(
                "record {} has kind {} but {} was requested",
                e.index,
                e.kind.as_str(),
                kind.as_str()
            )));
        }
        let end = e.offset + e.length;
        if end > blob.len() as u64 {
            return Err(Error::Format(format!(
                "record {} extends past end of blob ({} > {})",
                e.index,
                end,
                blob.len()
            )));
        }
        out.push(decode(&blob[e.offset as usize..end as usize])?);
    }
    Ok(out)
}

pub fn write_triplet_set(dir: &Path, split: &str, records: &[TripletRecord]) -> Result<()> {
    write_set(dir, split, PayloadKind::Triplet, records, encode_triplet)
}

pub fn read_triplet_set(dir: &Path, split: &str) -> Result<Vec<TripletRecord>> {
    read_set(dir, split, PayloadKind::Triplet, decode_triplet)
}

pub fn write_pair_set(dir: &Path, split: &str, records: &[CaptionRecord]) -> Result<()> {
    write_set(dir, split, PayloadKind::Caption, records, encode_caption)
}

pub fn read_pair_set(dir: &Path, split: &str) -> Result<Vec<CaptionRecord>> {
    read_set(dir, split, PayloadKind::Caption, decode_caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_pair_set, gen_triplet_set, Split};
    use crate::rng::RngState;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("pi-storage-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn triplet_sets_round_trip_exactly() {
        let dir = tmp("trip");
        let set = gen_triplet_set(12, 0.2, 8, Split::Train, &RngState::new(5), 2).unwrap();
        write_triplet_set(&dir, "train", &set.records).unwrap();
        let back = read_triplet_set(&dir, "train").unwrap();
        assert_eq!(back, set.records);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pair_sets_round_trip_exactly() {
        let dir = tmp("pair");
        let set = gen_pair_set(10, 8, 12, Split::Val, &RngState::new(6), 2).unwrap();
        write_pair_set(&dir, "val", &set.records).unwrap();
        let back = read_pair_set(&dir, "val").unwrap();
        assert_eq!(back, set.records);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn writes_are_byte_identical_across_runs() {
        let d1 = tmp("det1");
        let d2 = tmp("det2");
        for d in [&d1, &d2] {
            let set = gen_triplet_set(6, 0.0, 8, Split::Train, &RngState::new(9), 3).unwrap();
            write_triplet_set(d, "train", &set.records).unwrap();
        }
        let m1 = fs::read(manifest_path(&d1, "train")).unwrap();
        let m2 = fs::read(manifest_path(&d2, "train")).unwrap();
        assert_eq!(m1, m2);
        let b1 = fs::read(blob_path(&d1, "train")).unwrap();
        let b2 = fs::read(blob_path(&d2, "train")).unwrap();
        assert_eq!(b1, b2);
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = DatasetManifest {
            split: "train".to_string(),
            entries: vec![
                ManifestEntry { index: 0, offset: 0, length: 40, kind: PayloadKind::Triplet },
                ManifestEntry { index: 1, offset: 40, length: 44, kind: PayloadKind::Triplet },
            ],
        };
        assert_eq!(DatasetManifest::from_text(&m.to_text()).unwrap(), m);
        assert!(m.to_text().starts_with(MANIFEST_HEADER));
    }

    #[test]
    fn corrupt_manifests_are_rejected() {
        assert!(matches!(
            DatasetManifest::from_text("WRONG v9\nsplit=x\ncount=0\n"),
            Err(Error::Format(_))
        ));
        let overlapping = "SYNTHSET v1\nsplit=t\ncount=2\n0 0 10 triplet\n1 5 10 triplet\n";
        assert!(DatasetManifest::from_text(overlapping).is_err());
        let out_of_order = "SYNTHSET v1\nsplit=t\ncount=1\n3 0 10 triplet\n";
        assert!(DatasetManifest::from_text(out_of_order).is_err());
        let bad_kind = "SYNTHSET v1\nsplit=t\ncount=1\n0 0 10 banana\n";
        assert!(DatasetManifest::from_text(bad_kind).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tmp("trunc");
        let set = gen_triplet_set(3, 0.0, 8, Split::Train, &RngState::new(2), 1).unwrap();
        write_triplet_set(&dir, "train", &set.records).unwrap();
        let blob = fs::read(blob_path(&dir, "train")).unwrap();
        fs::write(blob_path(&dir, "train"), &blob[..blob.len() - 10]).unwrap();
        assert!(matches!(read_triplet_set(&dir, "train"), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tmp("kind");
        let set = gen_pair_set(3, 8, 12, Split::Train, &RngState::new(2), 1).unwrap();
        write_pair_set(&dir, "train", &set.records).unwrap();
        assert!(matches!(read_triplet_set(&dir, "train"), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_judgment_byte_is_rejected() {
        let dir = tmp("judg");
        let set = gen_triplet_set(1, 0.0, 8, Split::Train, &RngState::new(2), 1).unwrap();
        write_triplet_set(&dir, "train", &set.records).unwrap();
        let mut blob = fs::read(blob_path(&dir, "train")).unwrap();
        *blob.last_mut().unwrap() = 7;
        fs::write(blob_path(&dir, "train"), &blob).unwrap();
        assert!(matches!(read_triplet_set(&dir, "train"), Err(Error::Format(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_files_surface_io_errors() {
        let dir = tmp("missing");
        assert!(matches!(read_triplet_set(&dir, "train"), Err(Error::Io(_))));
    }
}
