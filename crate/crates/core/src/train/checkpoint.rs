//! Checkpoint serialization: magic bytes, a length-prefixed JSON header, then
//! length-prefixed named tensor sections, all little-endian. Loading
//! reproduces every tensor bitwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{init_params, EncoderParams, TextEncoderConfig, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::adamw::{AdamWHyper, AdamWState};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"PICKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

// Sanity caps when reading length prefixes from untrusted files.
const MAX_HEADER_BYTES: u64 = 1 << 24;
const MAX_SECTION_BYTES: u64 = 1 << 30;

/// Optimizer state snapshot carried inside a checkpoint.
#[derive(Debug, Clone)]
pub struct OptSnapshot {
    pub hp: AdamWHyper,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl OptSnapshot {
    pub fn from_state(state: &AdamWState<f32>) -> OptSnapshot {
        let (m, v) = state.moments();
        OptSnapshot {
            hp: *state.hyper(),
            t: state.t(),
            m: m.clone(),
            v: v.clone(),
        }
    }

    pub fn into_state(self) -> Result<AdamWState<f32>> {
        AdamWState::from_parts(self.hp, self.t, self.m, self.v)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    pub params: EncoderParams<f32>,
    pub opt: Option<OptSnapshot>,
    pub rng_seed: u64,
    pub samples_seen: u64,
    /// Stage tags in training order, e.g. ["stage1", "stage2"].
    pub provenance: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    hp: AdamWHyper,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    vision: VisionEncoderConfig,
    text: TextEncoderConfig,
    rng_seed: u64,
    samples_seen: u64,
    provenance: Vec<String>,
    opt: Option<OptHeader>,
    sections: Vec<String>,
}

fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + t.shape().len() * 4 + t.numel() * 4);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_tensor(bytes: &[u8], name: &str) -> Result<Tensor<f32>> {
    let fail = |why: &str| Error::Format(format!("section {name:?}: {why}"));
    let mut pos = 0usize;
    let u32_at = |buf: &[u8], pos: &mut usize| -> Result<u32> {
        let end = *pos + 4;
        if end > buf.len() {
            return Err(fail("truncated tensor header"));
        }
        let v = u32::from_le_bytes(buf[*pos..end].try_into().unwrap());
        *pos = end;
        Ok(v)
    };
    let rank = u32_at(bytes, &mut pos)? as usize;
    if rank > 8 {
        return Err(fail("implausible tensor rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = u32_at(bytes, &mut pos)? as usize;
        numel = numel.checked_mul(d).ok_or_else(|| fail("shape overflows"))?;
        shape.push(d);
    }
    let want = numel.checked_mul(4).ok_or_else(|| fail("data size overflows"))?;
    if bytes.len() - pos != want {
        return Err(fail("data length does not match shape"));
    }
    let data: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Expected parameter shapes for a config pair, used to validate loads.
fn expected_shapes(
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let reference: EncoderParams<f32> = init_params(vision, text, &mut RngState::new(0))?;
    Ok(reference
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect())
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut sections: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (name, t) in c.params.iter() {
        sections.push((format!("param.{name}"), t));
    }
    if let Some(opt) = &c.opt {
        for (name, t) in &opt.m {
            sections.push((format!("opt.m.{name}"), t));
        }
        for (name, t) in &opt.v {
            sections.push((format!("opt.v.{name}"), t));
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        vision: c.vision.clone(),
        text: c.text.clone(),
        rng_seed: c.rng_seed,
        samples_seen: c.samples_seen,
        provenance: c.provenance.clone(),
        opt: c.opt.as_ref().map(|o| OptHeader { hp: o.hp, t: o.t }),
        sections: sections.iter().map(|(n, _)| n.clone()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, tensor) in &sections {
        let body = encode_tensor(tensor);
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8);
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }

    let mut tensors: Vec<Tensor<f32>> = Vec::with_capacity(header.sections.len());
    for name in &header.sections {
        r.read_exact(&mut len8)?;
        let len = u64::from_le_bytes(len8);
        if len > MAX_SECTION_BYTES {
            return Err(Error::Format(format!(
                "section {name:?} has implausible length {len}"
            )));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        tensors.push(decode_tensor(&body, name)?);
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => return Err(Error::Format("trailing bytes after last section".to_string())),
    }

    let mut params = BTreeMap::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    for (name, tensor) in header.sections.iter().zip(tensors) {
        if let Some(p) = name.strip_prefix("param.") {
            if params.insert(p.to_string(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate parameter section {p:?}")));
            }
        } else if let Some(p) = name.strip_prefix("opt.m.") {
            opt_m.insert(p.to_string(), tensor);
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            opt_v.insert(p.to_string(), tensor);
        } else {
            return Err(Error::Format(format!("unknown section {name:?}")));
        }
    }

    let expected = expected_shapes(&header.vision, &header.text)?;
    if params.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, configs require {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let got = params
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name:?}")))?;
        if got.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?}, configs require {:?}",
                got.shape(),
                shape
            )));
        }
    }
    for (what, map) in [("m", &opt_m), ("v", &opt_v)] {
        for (name, t) in map {
            let want = expected.get(name).ok_or_else(|| {
                Error::Format(format!("optimizer moment {what}.{name:?} names no parameter"))
            })?;
            if t.shape() != want.as_slice() {
                return Err(Error::Format(format!(
                    "optimizer moment {what}.{name:?} shape {:?} mismatches parameter {:?}",
                    t.shape(),
                    want
                )));
            }
        }
    }

    let opt = match header.opt {
        Some(h) => {
            if opt_m.is_empty() && opt_v.is_empty() {
                return Err(Error::Format(
                    "header declares optimizer state but no moment sections present".to_string(),
                ));
            }
            Some(OptSnapshot { hp: h.hp, t: h.t, m: opt_m, v: opt_v })
        }
        None => {
            if !opt_m.is_empty() || !opt_v.is_empty() {
                return Err(Error::Format(
                    "moment sections present without optimizer header".to_string(),
                ));
            }
            None
        }
    };

    Ok(Checkpoint {
        vision: header.vision,
        text: header.text,
        params: EncoderParams::from_map(params),
        opt,
        rng_seed: header.rng_seed,
        samples_seen: header.samples_seen,
        provenance: header.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::fs;
    use std::path::PathBuf;

    fn tiny_configs() -> (VisionEncoderConfig, TextEncoderConfig) {
        let vision = VisionEncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            width: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            proj_dim: 8,
        };
        let text = TextEncoderConfig {
            vocab_size: 32,
            context_length: 8,
            width: 16,
            depth: 1,
            heads: 2,
            proj_dim: 8,
        };
        (vision, text)
    }

    fn tiny_checkpoint(with_opt: bool) -> Checkpoint {
        let (vision, text) = tiny_configs();
        let params: EncoderParams<f32> =
            init_params(&vision, &text, &mut RngState::new(3)).unwrap();
        let opt = with_opt.then(|| {
            let mut state = AdamWState::new(AdamWHyper::default()).unwrap();
            let trainable: BTreeSet<String> = params.names().cloned().collect();
            let grads: BTreeMap<String, Tensor<f32>> = params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::full(t.shape().to_vec(), 0.01f32)))
                .collect();
            let mut p = params.clone();
            state.step(&mut p, &trainable, &grads, 1e-3).unwrap();
            OptSnapshot::from_state(&state)
        });
        Checkpoint {
            vision,
            text,
            params,
            opt,
            rng_seed: 17,
            samples_seen: 4096,
            provenance: vec!["stage1".to_string(), "stage2".to_string()],
        }
    }

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("pi-ckpt-{name}-{}.ckpt", std::process::id()))
    }

    #[test]
    fn round_trips_bitwise_with_optimizer_state() {
        let c = tiny_checkpoint(true);
        let path = tmp("roundtrip");
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.params.identical_bits(&c.params));
        assert_eq!(back.provenance, c.provenance);
        assert_eq!(back.samples_seen, 4096);
        assert_eq!(back.rng_seed, 17);
        assert_eq!(back.vision, c.vision);
        let (bo, co) = (back.opt.unwrap(), c.opt.unwrap());
        assert_eq!(bo.t, co.t);
        for (name, t) in &co.m {
            assert_eq!(bo.m[name].data(), t.data(), "m moment {name}");
        }
        for (name, t) in &co.v {
            assert_eq!(bo.v[name].data(), t.data(), "v moment {name}");
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = tiny_checkpoint(true);
        let p1 = tmp("idem1");
        let p2 = tmp("idem2");
        save_checkpoint(&c, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        fs::remove_file(&p1).unwrap();
        fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let c = tiny_checkpoint(false);
        let path = tmp("magic");
        save_checkpoint(&c, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let c = tiny_checkpoint(false);
        let path = tmp("trunc");
        save_checkpoint(&c, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Io(_))));
        // truncation inside the magic itself is still an io error
        fs::write(&path, &bytes[..3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Io(_))));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let c = tiny_checkpoint(false);
        let path = tmp("version");
        save_checkpoint(&c, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[15..]).into_owned();
        let patched = text.replacen("\"version\":1", "\"version\":9", 1);
        assert_ne!(text, patched);
        let mut out = bytes[..7].to_vec();
        // header length is unchanged by the 1 -> 9 swap
        out.extend_from_slice(&bytes[7..15]);
        out.extend_from_slice(patched.as_bytes());
        fs::write(&path, &out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn trailing_garbage_is_a_format_error() {
        let c = tiny_checkpoint(false);
        let path = tmp("trailing");
        save_checkpoint(&c, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/dir/x.ckpt")),
            Err(Error::Io(_))
        ));
    }
}
