//! Binary checkpoint format.
//!
//! ```text
//! "VIMC" | version: u32 LE | manifest_len: u64 LE | manifest (UTF-8) | payload (f32 LE)
//! ```
//!
//! The manifest is line oriented:
//!
//! ```text
//! config<TAB>key=value<TAB>key=value...
//! classes<TAB>name<TAB>name...
//! tensor<TAB>name<TAB>d0,d1,...<TAB>byte_offset
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{VimConfig, VimModel};
use crate::error::{CheckpointError, Result, VimError};
use crate::tensor::Float;

pub const MAGIC: &[u8; 4] = b"VIMC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

struct Parsed {
    cfg: VimConfig,
    class_names: Vec<String>,
    entries: Vec<Entry>,
    payload: Vec<f32>,
}

pub fn encode<T: Float>(model: &VimModel<T>) -> Vec<u8> {
    let mut manifest = String::from("config");
    for (k, v) in model.config().to_pairs() {
        manifest.push_str(&format!("\t{k}={v}"));
    }
    manifest.push_str("\nclasses");
    for c in model.class_names() {
        manifest.push('\t');
        manifest.push_str(c);
    }
    manifest.push('\n');
    let mut offset = 0usize;
    for p in model.params() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor\t{}\t{}\t{}\n",
            p.name,
            dims.join(","),
            offset
        ));
        offset += p.tensor.numel() * 4;
    }

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Writes atomically: a failed save leaves no partial file.
pub fn save_checkpoint<T: Float>(model: &VimModel<T>, path: impl AsRef<Path>) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode(model))
}

fn parse(bytes: &[u8]) -> Result<Parsed, CheckpointError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let Some(manifest) = bytes.get(HEADER_LEN..HEADER_LEN.saturating_add(manifest_len)) else {
        return Err(CheckpointError::Truncated(format!(
            "manifest declares {manifest_len} bytes, file holds {}",
            bytes.len() - HEADER_LEN
        )));
    };
    let manifest = std::str::from_utf8(manifest)
        .map_err(|e| CheckpointError::Manifest(format!("not UTF-8: {e}")))?;

    let mut cfg_pairs = None;
    let mut class_names = None;
    let mut entries = Vec::new();
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let mut fields = line.split('\t');
        match fields.next() {
            Some("config") => {
                let mut pairs = BTreeMap::new();
                for f in fields {
                    let (k, v) = f.split_once('=').ok_or_else(|| {
                        CheckpointError::Manifest(format!("bad config field `{f}`"))
                    })?;
                    pairs.insert(k.to_string(), v.to_string());
                }
                cfg_pairs = Some(pairs);
            }
            Some("classes") => class_names = Some(fields.map(str::to_string).collect::<Vec<_>>()),
            Some("tensor") => {
                let parts: Vec<&str> = fields.collect();
                let [name, dims, offset] = parts[..] else {
                    return Err(CheckpointError::Manifest(format!(
                        "bad tensor line `{line}`"
                    )));
                };
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CheckpointError::Manifest(format!("bad shape `{dims}`")))?;
                let offset = offset
                    .parse()
                    .map_err(|_| CheckpointError::Manifest(format!("bad offset `{offset}`")))?;
                entries.push(Entry {
                    name: name.to_string(),
                    shape,
                    offset,
                });
            }
            _ => return Err(CheckpointError::Manifest(format!("unknown line `{line}`"))),
        }
    }
    let pairs = cfg_pairs.ok_or_else(|| CheckpointError::Manifest("missing config line".into()))?;
    let class_names =
        class_names.ok_or_else(|| CheckpointError::Manifest("missing classes line".into()))?;
    let mut cfg = VimConfig::toy();
    cfg.apply_pairs(&pairs)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut expected = 0usize;
    for e in &entries {
        if e.offset != expected {
            return Err(CheckpointError::Manifest(format!(
                "tensor {} at offset {}, expected {expected}",
                e.name, e.offset
            )));
        }
        expected += e.shape.iter().product::<usize>() * 4;
    }
    let payload = &bytes[HEADER_LEN + manifest_len..];
    if payload.len() != expected {
        return Err(CheckpointError::PayloadLength {
            expected: expected as u64,
            found: payload.len() as u64,
        });
    }
    let payload = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Parsed {
        cfg,
        class_names,
        entries,
        payload,
    })
}

fn read(path: &Path) -> Result<Parsed> {
    let bytes = fs::read(path).map_err(|e| VimError::io(path, e))?;
    Ok(parse(&bytes)?)
}

/// Rebuilds the model the checkpoint was written from.
pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<VimModel<T>> {
    let parsed = read(path.as_ref())?;
    from_parsed(parsed)
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<VimModel<T>> {
    from_parsed(parse(bytes)?)
}

fn from_parsed<T: Float>(parsed: Parsed) -> Result<VimModel<T>> {
    let mut model = VimModel::<T>::new(parsed.cfg.clone(), parsed.class_names.clone(), 0)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mismatched = diff(&model, &parsed.entries);
    if !mismatched.is_empty() {
        return Err(CheckpointError::Manifest(format!(
            "tensors inconsistent with stored config: {}",
            mismatched.join(", ")
        ))
        .into());
    }
    copy_in(&mut model, &parsed, |_| true);
    Ok(model)
}

/// Loads weights into an existing model of possibly different configuration.
///
/// Every tensor must agree in name and shape. With `replace_head`, head
/// mismatches are tolerated: the head is zero-initialized and the rest copied.
/// On error the model is left untouched.
pub fn load_into<T: Float>(
    model: &mut VimModel<T>,
    path: impl AsRef<Path>,
    replace_head: bool,
) -> Result<()> {
    let parsed = read(path.as_ref())?;
    let mismatched = diff(model, &parsed.entries);
    let head_only = mismatched.iter().all(|n| n.starts_with("head."));
    if !mismatched.is_empty() && !(replace_head && head_only) {
        return Err(CheckpointError::Mismatch { mismatched }.into());
    }
    let reset = replace_head && !mismatched.is_empty();
    copy_in(model, &parsed, |name| !(reset && name.starts_with("head.")));
    if reset {
        model.reset_head();
    }
    Ok(())
}

/// Names whose presence or shape differs between model and checkpoint.
fn diff<T: Float>(model: &VimModel<T>, entries: &[Entry]) -> Vec<String> {
    let stored: BTreeMap<&str, &[usize]> = entries
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    let mut out = Vec::new();
    for p in model.params() {
        match stored.get(p.name.as_str()) {
            Some(s) if *s == p.tensor.shape() => {}
            _ => out.push(p.name.clone()),
        }
    }
    for e in entries {
        if model.param(&e.name).is_none() {
            out.push(e.name.clone());
        }
    }
    out
}

fn copy_in<T: Float>(model: &mut VimModel<T>, parsed: &Parsed, take: impl Fn(&str) -> bool) {
    for e in &parsed.entries {
        if !take(&e.name) {
            continue;
        }
        let start = e.offset / 4;
        let src = &parsed.payload[start..start + e.shape.iter().product::<usize>()];
        if let Some(t) = model.param_mut(&e.name) {
            t.data_mut()
                .iter_mut()
                .zip(src)
                .for_each(|(d, &s)| *d = T::of(s as f64));
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassTokenPosition;

    fn cfg(classes: usize) -> VimConfig {
        VimConfig {
            image_size: 16,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 8,
            depth: 1,
            state_dim: 2,
            expand_ratio: 2,
            conv_kernel: 3,
            num_classes: classes,
            class_token: ClassTokenPosition::Middle,
        }
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class {i}")).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vimc");
        let mut m = VimModel::<f32>::new(cfg(6), names(6), 11).unwrap();
        m.param_mut("head.weight").unwrap().data_mut()[3] = -1.25e-7;
        save_checkpoint(&m, &path).unwrap();
        let back: VimModel<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.class_names(), m.class_names());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert!(!dir.path().join("m.vimc.tmp").exists());
    }

    #[test]
    fn header_layout() {
        let m = VimModel::<f32>::new(cfg(6), names(6), 0).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"VIMC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + mlen + 4 * m.num_params());
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let m = VimModel::<f32>::new(cfg(6), names(6), 0).unwrap();
        let bytes = encode(&m);
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(
            decode::<f32>(cut),
            Err(VimError::Checkpoint(CheckpointError::PayloadLength { .. }))
        ));
        assert!(matches!(
            decode::<f32>(&bytes[..10]),
            Err(VimError::Checkpoint(CheckpointError::Truncated(_)))
        ));
        assert!(matches!(
            decode::<f32>(&bytes[..40]),
            Err(VimError::Checkpoint(CheckpointError::Truncated(_)))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode::<f32>(&bad),
            Err(VimError::Checkpoint(CheckpointError::BadMagic(_)))
        ));
        let mut skew = bytes;
        skew[4] = 9;
        assert!(matches!(
            decode::<f32>(&skew),
            Err(VimError::Checkpoint(CheckpointError::Version {
                found: 9,
                ..
            }))
        ));
    }

    #[test]
    fn cross_config_load_lists_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vimc");
        let src = VimModel::<f32>::new(cfg(6), names(6), 1).unwrap();
        save_checkpoint(&src, &path).unwrap();

        let mut other_cfg = cfg(6);
        other_cfg.embed_dim = 12;
        let mut dst = VimModel::<f32>::new(other_cfg, names(6), 2).unwrap();
        let before = dst.clone();
        let err = load_into(&mut dst, &path, true).unwrap_err();
        match err {
            VimError::Checkpoint(CheckpointError::Mismatch { mismatched }) => {
                assert!(mismatched.contains(&"patch_embed.weight".to_string()));
                assert!(mismatched.contains(&"blocks.0.in_proj.weight".to_string()));
            }
            other => panic!("unexpected {other}"),
        }
        // untouched on failure
        for (a, b) in before.params().iter().zip(dst.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn replace_head_keeps_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ten.vimc");
        let mut src = VimModel::<f32>::new(cfg(10), names(10), 3).unwrap();
        src.param_mut("head.weight")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.5);
        save_checkpoint(&src, &path).unwrap();

        let mut dst = VimModel::<f32>::new(cfg(6), names(6), 4).unwrap();
        assert!(load_into(&mut dst, &path, false).is_err());
        load_into(&mut dst, &path, true).unwrap();
        for p in dst.params() {
            if p.name.starts_with("head.") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
                assert_eq!(p.tensor.shape().last(), Some(&6));
            } else {
                assert_eq!(
                    p.tensor.data(),
                    src.param(&p.name).unwrap().data(),
                    "{}",
                    p.name
                );
            }
        }
    }
}
