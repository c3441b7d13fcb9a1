//! Named parameter storage, seeding, and flat binary checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a learnable tensor is for; drives cost attribution and the
/// gradient-check groupings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Conv,
    Adapter,
    Connection,
    AttentionHead,
    AttentionProjector,
    PeerLogits,
    StaticLogits,
    Classifier,
}

impl ParamClass {
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ParamClass::AttentionHead | ParamClass::AttentionProjector | ParamClass::PeerLogits | ParamClass::StaticLogits
        )
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub class: ParamClass,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, class: ParamClass, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, class, value });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Writes `<stem>.bin` (little-endian f64, store order) and
    /// `<stem>.json` (name → offset, shape).
    pub fn save_checkpoint(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.total_elements() * 8);
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for p in &self.params {
            entries.insert(
                p.name.clone(),
                ManifestEntry { offset, shape: p.value.shape().0, class: p.class },
            );
            offset += p.value.len();
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { total_elements: offset, params: entries };
        let bin = dir.join(format!("{stem}.bin"));
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    /// Overwrites values of parameters named in the checkpoint. Every
    /// parameter of `self` must be present with a matching shape.
    pub fn load_checkpoint(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let manifest = read_manifest(dir, stem)?;
        let bin = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != manifest.total_elements * 8 {
            return Err(Error::Checkpoint(format!(
                "{} bytes for {} elements",
                bytes.len(),
                manifest.total_elements
            )));
        }
        for p in &mut self.params {
            let entry = manifest
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if entry.shape != p.value.shape().0 {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            let start = entry.offset * 8;
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                let at = start + i * 8;
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub offset: usize,
    pub shape: [usize; 5],
    pub class: ParamClass,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub total_elements: usize,
    pub params: BTreeMap<String, ManifestEntry>,
}

pub fn read_manifest(dir: &Path, stem: &str) -> Result<Manifest> {
    let path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Deterministic RNG for a sub-stream of a run, e.g. one block or one edge.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(0x9e37_79b9)));
    }
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// He-style fan-in initialisation, scaled by `gain`.
pub fn he_normal(shape: Shape, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::normal(shape, gain * (2.0 / fan_in as f64).sqrt(), rng)
}

/// Positive rational scale factor such as `1/8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("scale {num}/{den} must be positive")));
        }
        Ok(Ratio { num, den })
    }

    /// `round(value * self)`, halves rounding up.
    pub fn round(self, value: usize) -> usize {
        ((2 * value as u64 * self.num + self.den) / (2 * self.den)) as usize
    }

    pub fn ceil(self, value: usize) -> usize {
        (value as u64 * self.num).div_ceil(self.den) as usize
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse scale `{s}`"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let num = a.trim().parse().map_err(|_| bad())?;
            let den = b.trim().parse().map_err(|_| bad())?;
            return Ratio::new(num, den);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let (num, den) = (int * den + frac, den);
        let g = gcd(num, den);
        Ratio::new(num / g.max(1), den / g.max(1))
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
