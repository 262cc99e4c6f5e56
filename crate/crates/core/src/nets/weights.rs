use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::spec::NetworkSpec;
use crate::error::{ensure, KtdError, Result};

/// A dense, row-major array of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamArray {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality, so `-0.0 != 0.0` and NaN payloads are compared exactly.
    pub fn bit_eq(&self, other: &ParamArray) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Named parameter arrays for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub entries: BTreeMap<String, ParamArray>,
    pub spec_fingerprint: String,
    pub seed: u64,
}

impl WeightBundle {
    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.entries.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(ParamArray::len).sum()
    }

    pub fn bit_eq(&self, other: &WeightBundle) -> bool {
        self.spec_fingerprint == other.spec_fingerprint
            && self.seed == other.seed
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Every parameter layer has exactly one entry of the right shape and the
    /// fingerprint matches.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.fingerprint();
        if self.spec_fingerprint != expected {
            return Err(KtdError::state(format!(
                "weight bundle fingerprint {} does not match spec '{}' ({})",
                short(&self.spec_fingerprint),
                spec.name,
                short(&expected)
            )));
        }
        let mut seen = 0;
        for (prefix, layer) in spec.named_layers() {
            let (w, b) = layer.param_shapes().expect("named layers carry params");
            check_entry(self, &format!("{prefix}.weight"), &w)?;
            seen += 1;
            if let Some(b) = b {
                check_entry(self, &format!("{prefix}.bias"), &b)?;
                seen += 1;
            }
        }
        if seen != self.entries.len() {
            return Err(KtdError::state(format!(
                "weight bundle has {} entries, spec '{}' expects {seen}",
                self.entries.len(),
                spec.name
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let archive = Archive {
            fingerprint: self.spec_fingerprint.clone(),
            seed: self.seed,
            meta: BTreeMap::new(),
            entries: self.entries.clone(),
        };
        archive.save(path)
    }

    /// Load a bundle and require it to belong to `spec`.
    pub fn load(path: &Path, spec: &NetworkSpec) -> Result<Self> {
        let bundle = Self::load_unchecked(path)?;
        bundle.check_against(spec)?;
        Ok(bundle)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        Ok(WeightBundle {
            entries: archive.entries,
            spec_fingerprint: archive.fingerprint,
            seed: archive.seed,
        })
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn check_entry(bundle: &WeightBundle, name: &str, shape: &[usize]) -> Result<()> {
    match bundle.entries.get(name) {
        Some(arr) if arr.shape == shape && arr.data.len() == shape.iter().product::<usize>() => Ok(()),
        Some(arr) => Err(KtdError::state(format!(
            "entry '{name}' has shape {:?}, expected {shape:?}",
            arr.shape
        ))),
        None => Err(KtdError::state(format!("missing weight entry '{name}'"))),
    }
}

/// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))` and
/// zero biases. Each entry draws from its own stream keyed by `(seed, name)`,
/// so an entry's initial value does not depend on which other entries exist.
pub(crate) fn init_entry(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> ParamArray {
    let mut arr = ParamArray::zeros(shape);
    if name.ends_with(".bias") {
        return arr;
    }
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    for v in &mut arr.data {
        *v = rng.random_range(-bound..bound);
    }
    arr
}

/// Deterministic initialization of every parameter entry of `spec`.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Result<WeightBundle> {
    spec.validate()?;
    let mut entries = BTreeMap::new();
    for (prefix, layer) in spec.named_layers() {
        let (w, b) = layer.param_shapes().expect("named layers carry params");
        let name = format!("{prefix}.weight");
        entries.insert(name.clone(), init_entry(seed, &name, &w, layer.fan_in()));
        if let Some(b) = b {
            let name = format!("{prefix}.bias");
            entries.insert(name.clone(), init_entry(seed, &name, &b, layer.fan_in()));
        }
    }
    Ok(WeightBundle {
        entries,
        spec_fingerprint: spec.fingerprint(),
        seed,
    })
}

const MAGIC: &[u8; 4] = b"KTDW";
const VERSION: u32 = 1;

/// Versioned binary container of named arrays plus a fingerprint, a seed and
/// string metadata. Little-endian throughout; `f64` stored as raw bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub fingerprint: String,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    pub entries: BTreeMap<String, ParamArray>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(KtdError::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| KtdError::Format("non-UTF-8 string in checkpoint".into()))
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, arr) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for d in &arr.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &arr.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(KtdError::Format("not a KTD checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(KtdError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let fingerprint = cur.string()?;
        let seed = cur.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..cur.u32()? {
            let k = cur.string()?;
            let v = cur.string()?;
            meta.insert(k, v);
        }
        let mut entries = BTreeMap::new();
        for _ in 0..cur.u32()? {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            entries.insert(name, ParamArray { shape, data });
        }
        if cur.pos != buf.len() {
            return Err(KtdError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Archive {
            fingerprint,
            seed,
            meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| KtdError::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| KtdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| KtdError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Copy of `src` restricted to entries whose name starts with `prefix`,
/// with the prefix stripped.
pub(crate) fn strip_prefix(
    src: &BTreeMap<String, ParamArray>,
    prefix: &str,
) -> BTreeMap<String, ParamArray> {
    src.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub(crate) fn ensure_same_keys(
    a: &BTreeMap<String, ParamArray>,
    b: &BTreeMap<String, ParamArray>,
) -> Result<()> {
    ensure!(
        a.len() == b.len() && a.keys().zip(b.keys()).all(|(x, y)| x == y),
        "checkpoint sections disagree on entry names"
    );
    Ok(())
}
