//! The `EECB` container.
//!
//! A 28-byte little-endian header followed by the payload:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `EECB` |
//! | 4 | 2 | version |
//! | 6 | 1 | dtype (1 = f32, 2 = f64) |
//! | 7 | 1 | kind (1 = episodes, 2 = concepts, 3 = named arrays) |
//! | 8 | 4 | d |
//! | 12 | 8 | count |
//! | 20 | 4 | class id |
//! | 24 | 4 | task id |
//!
//! Episode records are `d` f32 values. Concept records are `2d + 1` f64
//! values: centroid, summed squared deviations, member count. Named arrays
//! are `name_len: u16, name, ndim: u8, dims: u32 * ndim` then f32 data.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::memory::{ClassMemory, Concept, MemoryItem, MemoryStore, OverflowPolicy};
use crate::nst::EncodedEpisode;

pub const BANK_MAGIC: [u8; 4] = *b"EECB";
pub const BANK_VERSION: u16 = 1;
const HEADER_LEN: usize = 28;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
const KIND_EPISODE: u8 = 1;
const KIND_CONCEPT: u8 = 2;
const KIND_ARRAYS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankHeader {
    pub version: u16,
    pub dtype: u8,
    pub kind: u8,
    pub d: u32,
    pub count: u64,
    pub class: u32,
    pub task: u32,
}

/// One parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BankRecords {
    Episodes(Vec<EncodedEpisode>),
    Concepts(Vec<Concept>),
    Arrays(Vec<NamedArray>),
}

/// A homogeneous bank: every record shares kind, dimension, class and task.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBank {
    pub header: BankHeader,
    pub records: BankRecords,
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in 32 bits")))
}

impl EpisodeBank {
    pub fn episodes(class: usize, task: usize, d: usize, episodes: Vec<EncodedEpisode>) -> Result<Self> {
        if let Some(e) = episodes.iter().find(|e| e.embedding.len() != d || e.label != class || e.task != task) {
            return Err(Error::Argument(format!(
                "episode (class {}, task {}, d {}) does not fit a bank of class {class}, task {task}, d {d}",
                e.label,
                e.task,
                e.embedding.len()
            )));
        }
        Ok(Self {
            header: BankHeader {
                version: BANK_VERSION,
                dtype: DTYPE_F32,
                kind: KIND_EPISODE,
                d: u32_field(d, "dimension")?,
                count: episodes.len() as u64,
                class: u32_field(class, "class")?,
                task: u32_field(task, "task")?,
            },
            records: BankRecords::Episodes(episodes),
        })
    }

    pub fn concepts(class: usize, task: usize, d: usize, concepts: Vec<Concept>) -> Result<Self> {
        if let Some(c) = concepts
            .iter()
            .find(|c| c.dim() != d || c.m2.len() != d || c.label != class || c.task != task)
        {
            return Err(Error::Argument(format!(
                "concept (class {}, task {}, d {}) does not fit a bank of class {class}, task {task}, d {d}",
                c.label,
                c.task,
                c.dim()
            )));
        }
        Ok(Self {
            header: BankHeader {
                version: BANK_VERSION,
                dtype: DTYPE_F64,
                kind: KIND_CONCEPT,
                d: u32_field(d, "dimension")?,
                count: concepts.len() as u64,
                class: u32_field(class, "class")?,
                task: u32_field(task, "task")?,
            },
            records: BankRecords::Concepts(concepts),
        })
    }

    pub fn arrays(arrays: Vec<NamedArray>) -> Result<Self> {
        for a in &arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Argument(format!("array `{}` shape disagrees with its data", a.name)));
            }
            if a.name.len() > u16::MAX as usize || a.shape.len() > u8::MAX as usize {
                return Err(Error::Argument(format!("array `{}` name or rank too long", a.name)));
            }
        }
        Ok(Self {
            header: BankHeader {
                version: BANK_VERSION,
                dtype: DTYPE_F32,
                kind: KIND_ARRAYS,
                d: 0,
                count: arrays.len() as u64,
                class: 0,
                task: 0,
            },
            records: BankRecords::Arrays(arrays),
        })
    }

    /// Payload bytes that follow the header.
    pub fn payload_len(&self) -> usize {
        let d = self.header.d as usize;
        match &self.records {
            BankRecords::Episodes(e) => e.len() * d * 4,
            BankRecords::Concepts(c) => c.len() * (2 * d + 1) * 8,
            BankRecords::Arrays(a) => a
                .iter()
                .map(|a| 2 + a.name.len() + 1 + 4 * a.shape.len() + 4 * a.data.len())
                .sum(),
        }
    }
}

pub fn encode_bank(bank: &EpisodeBank) -> Vec<u8> {
    let h = &bank.header;
    let mut out = Vec::with_capacity(HEADER_LEN + bank.payload_len());
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.push(h.dtype);
    out.push(h.kind);
    out.extend_from_slice(&h.d.to_le_bytes());
    out.extend_from_slice(&h.count.to_le_bytes());
    out.extend_from_slice(&h.class.to_le_bytes());
    out.extend_from_slice(&h.task.to_le_bytes());
    match &bank.records {
        BankRecords::Episodes(episodes) => {
            for e in episodes {
                e.embedding.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        BankRecords::Concepts(concepts) => {
            for c in concepts {
                c.centroid.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                c.m2.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                out.extend_from_slice(&(c.count as f64).to_le_bytes());
            }
        }
        BankRecords::Arrays(arrays) => {
            for a in arrays {
                out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
                out.extend_from_slice(a.name.as_bytes());
                out.push(a.shape.len() as u8);
                a.shape
                    .iter()
                    .for_each(|&s| out.extend_from_slice(&(s as u32).to_le_bytes()));
                a.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("bank truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(overflow)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn overflow() -> Error {
    Error::Format("bank length fields overflow".into())
}

/// Parses a whole bank; any inconsistency is a format error.
pub fn decode_bank(bytes: &[u8]) -> Result<EpisodeBank> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).map_err(|_| Error::Format("bank shorter than its header".into()))? != BANK_MAGIC {
        return Err(Error::Format("bad bank magic".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != BANK_VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let [dtype, kind] = r.array()?;
    let header = BankHeader {
        version,
        dtype,
        kind,
        d: u32::from_le_bytes(r.array()?),
        count: u64::from_le_bytes(r.array()?),
        class: u32::from_le_bytes(r.array()?),
        task: u32::from_le_bytes(r.array()?),
    };
    let d = header.d as usize;
    let count = usize::try_from(header.count).map_err(|_| overflow())?;
    let (class, task) = (header.class as usize, header.task as usize);
    let fixed = |width: usize, bytes_per: usize| -> Result<()> {
        let need = count
            .checked_mul(width)
            .and_then(|v| v.checked_mul(bytes_per))
            .ok_or_else(overflow)?;
        if bytes.len() - HEADER_LEN != need {
            return Err(Error::Format(format!(
                "payload is {} bytes, header promises {need}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(())
    };
    let records = match (kind, dtype) {
        (KIND_EPISODE, DTYPE_F32) => {
            fixed(d, 4)?;
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(EncodedEpisode {
                    embedding: r.f32s(d)?,
                    label: class,
                    task,
                });
            }
            BankRecords::Episodes(v)
        }
        (KIND_CONCEPT, DTYPE_F64) => {
            fixed(2 * d + 1, 8)?;
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                let centroid = r.f64s(d)?;
                let m2 = r.f64s(d)?;
                let n = r.f64s(1)?[0];
                if !(n >= 1.0 && n.fract() == 0.0 && n <= 2f64.powi(53)) {
                    return Err(Error::Format(format!("concept member count {n} is not a positive integer")));
                }
                v.push(Concept {
                    centroid,
                    m2,
                    count: n as u64,
                    label: class,
                    task,
                });
            }
            BankRecords::Concepts(v)
        }
        (KIND_ARRAYS, DTYPE_F32) => {
            let mut v = Vec::new();
            for _ in 0..count {
                let len = u16::from_le_bytes(r.array()?) as usize;
                let name = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
                let [ndim] = r.array()?;
                let mut shape = Vec::with_capacity(ndim as usize);
                for _ in 0..ndim {
                    shape.push(u32::from_le_bytes(r.array()?) as usize);
                }
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                    .ok_or_else(overflow)?;
                v.push(NamedArray {
                    name,
                    shape,
                    data: r.f32s(n)?,
                });
            }
            if r.at != bytes.len() {
                return Err(Error::Format(format!("{} trailing bytes after arrays", bytes.len() - r.at)));
            }
            BankRecords::Arrays(v)
        }
        _ => return Err(Error::Format(format!("unknown bank kind {kind} with dtype {dtype}"))),
    };
    Ok(EpisodeBank { header, records })
}

pub fn save_bank(path: &Path, bank: &EpisodeBank) -> Result<()> {
    write_atomic(path, &encode_bank(bank))
}

pub fn load_bank(path: &Path) -> Result<EpisodeBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

/// Saves `(name, shape, data)` parameter arrays.
pub fn save_checkpoint(path: &Path, arrays: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<()> {
    let arrays = arrays
        .into_iter()
        .map(|(name, shape, data)| NamedArray { name, shape, data })
        .collect();
    save_bank(path, &EpisodeBank::arrays(arrays)?)
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
    match load_bank(path)?.records {
        BankRecords::Arrays(arrays) => Ok(arrays.into_iter().map(|a| (a.name, (a.shape, a.data))).collect()),
        _ => Err(Error::Format(format!("{} is not a checkpoint", path.display()))),
    }
}

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    capacity: Option<usize>,
    policy: OverflowPolicy,
    single_concept: bool,
    seed: u64,
    /// Per class, the stored items in order as `(kind, task)` with kind `E` or `C`.
    classes: BTreeMap<usize, Vec<(char, usize)>>,
}

fn bank_name(class: usize, task: usize, concept: bool) -> String {
    format!(
        "class{class:03}_task{task:03}_{}.eecb",
        if concept { "concepts" } else { "episodes" }
    )
}

/// Writes a store as one bank per (class, task, item kind) plus a JSON
/// manifest that records item order.
pub fn save_store(dir: &Path, store: &MemoryStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = store.dim().unwrap_or(0);
    let mut manifest = Manifest {
        capacity: store.capacity,
        policy: store.policy,
        single_concept: store.single_concept,
        seed: store.seed,
        classes: BTreeMap::new(),
    };
    for (&class, mem) in &store.classes {
        let mut episodes: BTreeMap<usize, Vec<EncodedEpisode>> = BTreeMap::new();
        let mut concepts: BTreeMap<usize, Vec<Concept>> = BTreeMap::new();
        let mut order = Vec::with_capacity(mem.items.len());
        for item in &mem.items {
            match item {
                MemoryItem::Episode(e) => {
                    order.push(('E', e.task));
                    episodes.entry(e.task).or_default().push(e.clone());
                }
                MemoryItem::Concept(c) => {
                    order.push(('C', c.task));
                    concepts.entry(c.task).or_default().push(c.clone());
                }
            }
        }
        for (task, v) in episodes {
            save_bank(&dir.join(bank_name(class, task, false)), &EpisodeBank::episodes(class, task, d, v)?)?;
        }
        for (task, v) in concepts {
            save_bank(&dir.join(bank_name(class, task, true)), &EpisodeBank::concepts(class, task, d, v)?)?;
        }
        manifest.classes.insert(class, order);
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_store(dir: &Path) -> Result<MemoryStore> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut classes = BTreeMap::new();
    for (&class, order) in &manifest.classes {
        let mut episodes: BTreeMap<usize, std::vec::IntoIter<EncodedEpisode>> = BTreeMap::new();
        let mut concepts: BTreeMap<usize, std::vec::IntoIter<Concept>> = BTreeMap::new();
        let mut mem = ClassMemory::new(class);
        for &(kind, task) in order {
            let item = match kind {
                'E' => {
                    if let Entry::Vacant(slot) = episodes.entry(task) {
                        let bank = load_bank(&dir.join(bank_name(class, task, false)))?;
                        let BankRecords::Episodes(v) = bank.records else {
                            return Err(Error::Format("episode bank holds other records".into()));
                        };
                        slot.insert(v.into_iter());
                    }
                    episodes.get_mut(&task).unwrap().next().map(MemoryItem::Episode)
                }
                'C' => {
                    if let Entry::Vacant(slot) = concepts.entry(task) {
                        let bank = load_bank(&dir.join(bank_name(class, task, true)))?;
                        let BankRecords::Concepts(v) = bank.records else {
                            return Err(Error::Format("concept bank holds other records".into()));
                        };
                        slot.insert(v.into_iter());
                    }
                    concepts.get_mut(&task).unwrap().next().map(MemoryItem::Concept)
                }
                other => return Err(Error::Format(format!("unknown item kind `{other}` in manifest"))),
            };
            let item = item.ok_or_else(|| Error::Format(format!("class {class} bank has fewer records than the manifest")))?;
            mem.items.push(item);
        }
        if episodes.values_mut().any(|it| it.next().is_some()) || concepts.values_mut().any(|it| it.next().is_some()) {
            return Err(Error::Format(format!("class {class} bank has more records than the manifest")));
        }
        classes.insert(class, mem);
    }
    MemoryStore::from_parts(manifest.capacity, manifest.policy, manifest.single_concept, manifest.seed, classes)
}
