//! `CRAW0001` weight files.
//!
//! Layout: the 8-byte magic, a little-endian `u64` manifest length, the
//! UTF-8 manifest, then one raw `f32` little-endian payload per tensor in
//! manifest order. Every payload starts on a 64-byte boundary of the file
//! and the gaps are zero-filled. Manifest lines are either
//! `# key=value` metadata or `name f32le n c h w offset crc`, where `offset`
//! is the payload's byte position relative to the first payload and `crc` the
//! CRC-32 of its bytes in hex. Offsets and checksums let the reader pin any
//! damage on the tensor it belongs to.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::Params;
use crate::error::{CraError, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorWeights};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"CRAW0001";
pub const ALIGN: usize = 64;
const DTYPE: &str = "f32le";

/// Tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Params,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn corrupt(msg: impl Into<String>) -> CraError {
    CraError::Container(msg.into())
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') || s.starts_with('#') {
        return Err(CraError::InvalidArgument(format!(
            "{what} `{s}` cannot be stored in a manifest"
        )));
    }
    Ok(())
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.metadata {
            check_token("metadata key", k)?;
            if v.contains('\n') {
                return Err(CraError::InvalidArgument(format!(
                    "metadata `{k}` contains a newline"
                )));
            }
            manifest.push_str(&format!("# {k}={v}\n"));
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let s = t.shape();
            let crc = crc32fast::hash(&payload(t));
            manifest.push_str(&format!(
                "{name} {DTYPE} {} {} {} {} {offset} {crc:08x}\n",
                s.n, s.c, s.h, s.w
            ));
            offset = align_up(offset + 4 * t.len());
        }
        let mut out = Vec::with_capacity(
            align_up(16 + manifest.len())
                + self
                    .tensors
                    .values()
                    .map(|t| align_up(4 * t.len()))
                    .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.tensors.values() {
            out.resize(align_up(out.len()), 0);
            out.extend_from_slice(&payload(t));
        }
        out.resize(align_up(out.len()), 0);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic, not a CRAW0001 file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "manifest length {len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let manifest = std::str::from_utf8(&bytes[16..end])
            .map_err(|_| corrupt("manifest is not valid UTF-8"))?;

        let mut metadata = BTreeMap::new();
        let mut entries: Vec<(String, Shape, usize, u32)> = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let lineno = i + 1;
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once('=').ok_or_else(|| {
                    corrupt(format!("manifest line {lineno}: metadata without `=`"))
                })?;
                metadata.insert(k.to_string(), v.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let name = fields[0];
            if name.is_empty() {
                return Err(corrupt(format!(
                    "manifest line {lineno}: missing tensor name"
                )));
            }
            let bad =
                |why: String| corrupt(format!("tensor `{name}` (manifest line {lineno}): {why}"));
            if fields.len() != 8 {
                return Err(bad(format!(
                    "expected dtype, 4 dims, offset and checksum, found {} fields",
                    fields.len() - 1
                )));
            }
            if fields[1] != DTYPE {
                return Err(bad(format!("unsupported dtype `{}`", fields[1])));
            }
            let mut dims = [0usize; 4];
            for (d, f) in dims.iter_mut().zip(&fields[2..]) {
                *d = f.parse().map_err(|_| bad(format!("bad dimension `{f}`")))?;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let offset: usize = fields[6]
                .parse()
                .map_err(|_| bad(format!("bad offset `{}`", fields[6])))?;
            let crc = u32::from_str_radix(fields[7], 16)
                .map_err(|_| bad(format!("bad checksum `{}`", fields[7])))?;
            if entries.iter().any(|(n, _, _, _)| n == name) {
                return Err(bad("duplicate name".into()));
            }
            entries.push((name.to_string(), shape, offset, crc));
        }

        let base = align_up(end);
        let payload_len = bytes.len().saturating_sub(base);
        let mut tensors = Params::new();
        // relative end of the previous payload, and its tensor
        let mut expected = 0;
        let mut prev: Option<(String, Shape)> = None;
        for (name, shape, offset, crc) in entries {
            if offset != align_up(expected) {
                return Err(match prev {
                    Some((p, ps)) => corrupt(format!(
                        "tensor `{p}`: payload for shape {ps} ends at {expected} but `{name}` starts at {offset}"
                    )),
                    None => corrupt(format!("tensor `{name}`: first payload declared at offset {offset}, expected 0")),
                });
            }
            let n = dims_product(shape)
                .ok_or_else(|| corrupt(format!("tensor `{name}`: shape {shape} overflows")))?;
            let stop = n
                .checked_mul(4)
                .and_then(|b| b.checked_add(offset))
                .filter(|&s| s <= payload_len)
                .ok_or_else(|| {
                    corrupt(format!(
                        "tensor `{name}`: payload for shape {shape} is truncated"
                    ))
                })?;
            let raw = &bytes[base + offset..base + stop];
            if crc32fast::hash(raw) != crc {
                return Err(corrupt(format!(
                    "tensor `{name}`: checksum mismatch for shape {shape}"
                )));
            }
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!(
                    "tensor `{name}` contains non-finite values"
                )));
            }
            tensors.insert(name.clone(), Tensor::from_vec(shape, data)?);
            expected = stop;
            prev = Some((name, shape));
        }
        let stop = base + expected;
        if align_up(stop) != bytes.len().max(base)
            || bytes[stop.min(bytes.len())..].iter().any(|&b| b != 0)
        {
            let owner = match prev {
                Some((p, ps)) => format!("tensor `{p}` (shape {ps}): "),
                None => String::new(),
            };
            return Err(corrupt(format!(
                "{owner}{} unexpected trailing bytes after the last payload",
                bytes.len().saturating_sub(stop)
            )));
        }
        Ok(Container { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| CraError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CraError::io(path, e))?;
        Container::decode(&bytes).map_err(|e| match e {
            CraError::Container(m) => CraError::Container(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn payload(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn dims_product(s: Shape) -> Option<usize> {
    s.n.checked_mul(s.c)?.checked_mul(s.h)?.checked_mul(s.w)
}

fn config_metadata(cfg: &GeneratorConfig) -> BTreeMap<String, String> {
    [
        ("kind", "generator".to_string()),
        ("net_size", cfg.net_size.to_string()),
        ("width", cfg.width.to_string()),
        ("coarse_gate", cfg.coarse_gate.to_string()),
        ("refine_gate", cfg.refine_gate.to_string()),
        ("score_patch", cfg.score_patch.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn config_from_metadata(meta: &BTreeMap<String, String>) -> Result<GeneratorConfig> {
    fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let v = meta
            .get(key)
            .ok_or_else(|| corrupt(format!("missing metadata `{key}`")))?;
        v.parse()
            .map_err(|_| corrupt(format!("bad metadata `{key}={v}`")))
    }
    match meta.get("kind").map(String::as_str) {
        Some("generator") => {}
        other => {
            return Err(corrupt(format!(
                "expected generator weights, found kind {other:?}"
            )))
        }
    }
    Ok(GeneratorConfig {
        net_size: field(meta, "net_size")?,
        width: field(meta, "width")?,
        coarse_gate: field(meta, "coarse_gate")?,
        refine_gate: field(meta, "refine_gate")?,
        score_patch: field(meta, "score_patch")?,
    })
}

pub fn save_weights(weights: &GeneratorWeights, path: &Path) -> Result<()> {
    Container {
        metadata: config_metadata(&weights.config),
        tensors: weights.params.clone(),
    }
    .save(path)
}

/// Loads generator weights and checks them against the architecture the
/// file's metadata describes.
pub fn load_weights(path: &Path) -> Result<GeneratorWeights> {
    let c = Container::load(path)?;
    let config = config_from_metadata(&c.metadata)?;
    Generator::new(config)?.check_params(&c.tensors)?;
    Ok(GeneratorWeights {
        config,
        params: c.tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut tensors = Params::new();
        tensors.insert(
            "a.w".into(),
            Tensor::from_fn(Shape::new(2, 3, 1, 5), |n, c, _, x| {
                (n * 15 + c * 5 + x) as f32 * 0.1
            }),
        );
        tensors.insert("b".into(), Tensor::scalar(-2.5));
        let mut metadata = BTreeMap::new();
        metadata.insert("note".into(), "hello world".into());
        Container { metadata, tensors }
    }

    /// Overwrites the first occurrence of `from` with the same-length `to`.
    fn patch(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = bytes
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .expect("pattern");
        let mut out = bytes.to_vec();
        out[at..at + to.len()].copy_from_slice(to.as_bytes());
        out
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len() % ALIGN, 0);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = align_up(16 + mlen);
        // "a.w" sorts first: 30 floats, then "b" on the next boundary
        assert_eq!(
            f32::from_le_bytes(bytes[first + 4..first + 8].try_into().unwrap()),
            0.1
        );
        let second = align_up(first + 120);
        assert_eq!(
            f32::from_le_bytes(bytes[second..second + 4].try_into().unwrap()),
            -2.5
        );
    }

    #[test]
    fn decode_inverts_encode() {
        let c = sample();
        assert_eq!(Container::decode(&c.encode().unwrap()).unwrap(), c);
    }

    #[test]
    fn tampered_shape_names_the_tensor() {
        let bytes = sample().encode().unwrap();
        let text = patch(&bytes, "a.w f32le 2 3 1 5 0", "a.w f32le 2 3 9 5 0");
        let err = Container::decode(&text).unwrap_err().to_string();
        assert!(err.contains("`a.w`"), "{err}");
    }

    #[test]
    fn shrunken_last_shape_names_that_tensor() {
        let bytes = sample().encode().unwrap();
        let text = patch(&bytes, "a.w f32le 2 3 1 5 0", "a.w f32le 1 3 1 5 0");
        let err = Container::decode(&text).unwrap_err().to_string();
        assert!(err.contains("`a.w`"), "{err}");
        let text = patch(&bytes, "b f32le 1 1 1 1", "b f32le 1 1 1 2");
        let err = Container::decode(&text).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn flipped_payload_byte_fails_its_checksum() {
        let mut bytes = sample().encode().unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        bytes[align_up(16 + mlen) + 5] ^= 0x01;
        let err = Container::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("`a.w`") && err.contains("checksum"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().encode().unwrap();
        let err = Container::decode(&bytes[..bytes.len() - 64])
            .unwrap_err()
            .to_string();
        assert!(err.contains("`b`") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = sample().encode().unwrap();
        bytes[7] = b'2';
        assert!(Container::decode(&bytes).is_err());
        let text = patch(&sample().encode().unwrap(), "b f32le", "b f16le");
        let err = Container::decode(&text).unwrap_err().to_string();
        assert!(err.contains("`b`") && err.contains("f16le"), "{err}");
    }

    #[test]
    fn names_with_spaces_are_refused() {
        let mut c = sample();
        c.tensors.insert("bad name".into(), Tensor::scalar(0.0));
        assert!(c.encode().is_err());
    }

    #[test]
    fn generator_weights_round_trip() {
        let g = Generator::new(GeneratorConfig::toy()).unwrap();
        let w = g.init(11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.craw");
        save_weights(&w, &p).unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back, w);
        let p2 = dir.path().join("w2.craw");
        save_weights(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn architecture_mismatch_is_a_weight_error() {
        let g = Generator::new(GeneratorConfig::toy()).unwrap();
        let mut w = g.init(1);
        w.params.remove("refine.00.feat.b");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.craw");
        save_weights(&w, &p).unwrap();
        let err = load_weights(&p).unwrap_err();
        assert!(matches!(err, CraError::WeightMismatch(_)));
        assert!(err.to_string().contains("refine.00.feat.b"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_weights(Path::new("/nonexistent/w.craw")).unwrap_err();
        assert!(matches!(err, CraError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/w.craw"));
    }
}
