//! Precomputed item embeddings keyed by item id: an append-only `.lnks` data
//! file plus a sorted `.lnki` sidecar index.
//!
//! Data file, little-endian:
//!
//! ```text
//! magic          4 bytes  "LNKS"
//! version        u32      1
//! model_version  32 bytes SHA-256 of the checkpoint
//! mode           u32
//! d_z            u32
//! n_taps         u32
//! d_c            u32
//! flags          u32      bit 0 gate weights, bit 1 per-layer features
//! tap_layers     n_taps × u32
//! n_records      u32
//! records        { item_id u32, z d_z × f32, [gate n_taps × f32], [per_layer n_taps·d_c × f32] }
//! ```
//!
//! Records are sorted by id. The index holds `magic "LNKI"`, version,
//! model_version, count, then `(id u32, offset u64, length u32)` triples.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::LayerStates;
use crate::binio::{put_f32s, put_u32, Cursor};
use crate::checkpoint::{hex, Hash};
use crate::error::{Error, Result};
use crate::eval::{gate_stats, EmbeddingScorer, GateStats};
use crate::fusion::FusionMode;
use crate::model::{ItemInput, Model};

pub const MAGIC: &[u8; 4] = b"LNKS";
pub const INDEX_MAGIC: &[u8; 4] = b"LNKI";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "lnks";
pub const INDEX_EXTENSION: &str = "lnki";

const FLAG_GATE: u32 = 1;
const FLAG_PER_LAYER: u32 = 2;
const INDEX_ENTRY: usize = 16;

/// What to keep besides `z_v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreOptions {
    pub gate_weights: bool,
    pub per_layer: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            gate_weights: true,
            per_layer: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreMeta {
    pub model_version: Hash,
    pub mode: FusionMode,
    pub d_z: usize,
    pub n_taps: usize,
    pub d_c: usize,
    pub gate_weights: bool,
    pub per_layer: bool,
    pub tap_layers: Vec<usize>,
    pub n_records: usize,
}

impl StoreMeta {
    fn header_len(&self) -> usize {
        4 + 4 + 32 + 5 * 4 + 4 * self.n_taps + 4
    }

    pub fn record_len(&self) -> usize {
        let mut floats = self.d_z;
        if self.gate_weights {
            floats += self.n_taps;
        }
        if self.per_layer {
            floats += self.n_taps * self.d_c;
        }
        4 + 4 * floats
    }

    fn flags(&self) -> u32 {
        (if self.gate_weights { FLAG_GATE } else { 0 }) | (if self.per_layer { FLAG_PER_LAYER } else { 0 })
    }

    fn encode(&self, w: &mut Vec<u8>) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.model_version)?;
        w.write_all(&self.mode.id().to_le_bytes())?;
        put_u32(w, self.d_z, "d_z")?;
        put_u32(w, self.n_taps, "n_taps")?;
        put_u32(w, self.d_c, "d_c")?;
        w.write_all(&self.flags().to_le_bytes())?;
        for &l in &self.tap_layers {
            put_u32(w, l, "tap layer")?;
        }
        put_u32(w, self.n_records, "record count")
    }

    fn decode(c: &mut Cursor) -> Result<Self> {
        c.magic(MAGIC)?;
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Version(format!("unsupported store version {version}")));
        }
        let model_version: Hash = c.take(32, "model version")?.try_into().expect("32 bytes");
        let mode = FusionMode::from_id(c.u32("mode")?)?;
        let d_z = c.u32("d_z")? as usize;
        let n_taps = c.u32("n_taps")? as usize;
        let d_c = c.u32("d_c")? as usize;
        let flags = c.u32("flags")?;
        if flags & !(FLAG_GATE | FLAG_PER_LAYER) != 0 {
            return Err(Error::Format(format!("unknown store flags {flags:#x}")));
        }
        let tap_layers = (0..n_taps)
            .map(|_| c.u32("tap layer").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_records = c.u32("record count")? as usize;
        if d_z == 0 {
            return Err(Error::Format("store declares d_z = 0".into()));
        }
        Ok(Self {
            model_version,
            mode,
            d_z,
            n_taps,
            d_c,
            gate_weights: flags & FLAG_GATE != 0,
            per_layer: flags & FLAG_PER_LAYER != 0,
            tap_layers,
            n_records,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreRecord {
    pub item_id: u32,
    pub z: Vec<f32>,
    pub gate_weights: Option<Vec<f32>>,
    pub per_layer: Option<Vec<f32>>,
}

pub fn index_path(data: &Path) -> PathBuf {
    data.with_extension(INDEX_EXTENSION)
}

/// Embeds every item and writes data file and index. Items may arrive in
/// any order; ids must be unique. Returns the record count.
pub fn build_store<I>(
    model: &Model,
    model_version: Hash,
    tap_layers: &[usize],
    items: I,
    opts: StoreOptions,
    path: &Path,
) -> Result<usize>
where
    I: IntoIterator<Item = Result<(u32, LayerStates)>>,
{
    let cfg = model.config();
    if tap_layers.len() != cfg.n_taps {
        return Err(Error::Version(format!(
            "{} tap layers given, model has {} taps",
            tap_layers.len(),
            cfg.n_taps
        )));
    }
    let gate = opts.gate_weights && model.mode().has_gate();
    if opts.per_layer && model.per_layer_width().is_none() {
        return Err(Error::Config(format!(
            "mode {} has no per-layer features to store",
            model.mode()
        )));
    }
    let mut meta = StoreMeta {
        model_version,
        mode: model.mode(),
        d_z: cfg.d_z,
        n_taps: cfg.n_taps,
        d_c: cfg.d_c,
        gate_weights: gate,
        per_layer: opts.per_layer,
        tap_layers: tap_layers.to_vec(),
        n_records: 0,
    };

    let mut records: Vec<(u32, Vec<f32>)> = Vec::new();
    let mut pending: Vec<(u32, ItemInput)> = Vec::new();
    let flush = |pending: &mut Vec<(u32, ItemInput)>, records: &mut Vec<(u32, Vec<f32>)>| {
        if pending.is_empty() {
            return;
        }
        let refs: Vec<&ItemInput> = pending.iter().map(|(_, x)| x).collect();
        let fw = model.forward(&model.params, &refs);
        for (r, (id, _)) in pending.iter().enumerate() {
            let mut floats: Vec<f32> = fw.z_row(r).iter().map(|&v| v as f32).collect();
            if gate {
                floats.extend(fw.pi_row(r).expect("gated mode").iter().map(|&v| v as f32));
            }
            if opts.per_layer {
                floats.extend(fw.per_layer_row(r).iter().map(|&v| v as f32));
            }
            records.push((*id, floats));
        }
        pending.clear();
    };
    for item in items {
        let (id, states) = item?;
        pending.push((id, model.prepare(&states)?));
        if pending.len() == 256 {
            flush(&mut pending, &mut records);
        }
    }
    flush(&mut pending, &mut records);
    records.sort_by_key(|(id, _)| *id);
    if let Some(w) = records.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Input(format!("item {} appears twice", w[0].0)));
    }
    if let Some((id, _)) = records.iter().find(|(_, f)| f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical(format!("item {id} has a non-finite embedding")));
    }
    meta.n_records = records.len();

    let io = |e: std::io::Error| Error::Format(e.to_string());
    let mut data = Vec::with_capacity(meta.header_len() + records.len() * meta.record_len());
    meta.encode(&mut data).map_err(io)?;
    let mut index = Vec::with_capacity(44 + records.len() * INDEX_ENTRY);
    index.extend_from_slice(INDEX_MAGIC);
    index.extend_from_slice(&VERSION.to_le_bytes());
    index.extend_from_slice(&model_version);
    put_u32(&mut index, records.len(), "record count").map_err(io)?;
    for (id, floats) in &records {
        let offset = data.len() as u64;
        data.extend_from_slice(&id.to_le_bytes());
        put_f32s(&mut data, floats).map_err(io)?;
        index.extend_from_slice(&id.to_le_bytes());
        index.extend_from_slice(&offset.to_le_bytes());
        index.extend_from_slice(&(meta.record_len() as u32).to_le_bytes());
    }
    crate::atomic::write_bytes(path, &data)?;
    crate::atomic::write_bytes(&index_path(path), &index)?;
    Ok(records.len())
}

/// An opened, fully memory-resident store.
#[derive(Debug)]
pub struct FeatureStore {
    meta: StoreMeta,
    data: Vec<u8>,
    index: HashMap<u32, (u64, u32)>,
    ids: Vec<u32>,
}

impl FeatureStore {
    pub fn open(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ipath = index_path(path);
        let raw = std::fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let meta = StoreMeta::decode(&mut Cursor::new(&data))?;
        let expected = meta.header_len() + meta.n_records * meta.record_len();
        if data.len() < expected {
            return Err(Error::Truncated {
                offset: data.len() as u64,
                detail: format!("store needs {expected} bytes for {} records", meta.n_records),
            });
        }
        if data.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes in store", data.len() - expected)));
        }
        let entries = decode_index(&raw, &meta)?;
        let ids = entries.iter().map(|e| e.0).collect();
        let index = entries.into_iter().map(|(id, off, len)| (id, (off, len))).collect();
        Ok(Self { meta, data, index, ids })
    }

    /// Opens and rejects a store built by a different model.
    pub fn open_for(path: &Path, model_version: &Hash, d_z: usize) -> Result<Self> {
        let s = Self::open(path)?;
        s.check_compatible(model_version, d_z)?;
        Ok(s)
    }

    pub fn check_compatible(&self, model_version: &Hash, d_z: usize) -> Result<()> {
        if self.meta.d_z != d_z {
            return Err(Error::Version(format!(
                "store holds width {} embeddings, model produces {d_z}",
                self.meta.d_z
            )));
        }
        if &self.meta.model_version != model_version {
            return Err(Error::Version(format!(
                "store was built by checkpoint {}, not {}",
                hex(&self.meta.model_version),
                hex(model_version)
            )));
        }
        Ok(())
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stored ids in ascending order.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn contains(&self, id: u32) -> bool {
        self.index.contains_key(&id)
    }

    fn record_at(&self, offset: u64, len: u32) -> Result<StoreRecord> {
        let m = &self.meta;
        let start = offset as usize;
        let bytes = &self.data[start..start + len as usize];
        let mut c = Cursor::new(bytes);
        let item_id = c.u32("item id")?;
        let z = c.f32s(m.d_z, "embedding")?;
        let gate_weights = m.gate_weights.then(|| c.f32s(m.n_taps, "gate weights")).transpose()?;
        let per_layer = m.per_layer.then(|| c.f32s(m.n_taps * m.d_c, "per-layer features")).transpose()?;
        c.finish()?;
        Ok(StoreRecord {
            item_id,
            z,
            gate_weights,
            per_layer,
        })
    }

    pub fn get(&self, id: u32) -> Result<StoreRecord> {
        let &(off, len) = self.index.get(&id).ok_or(Error::NotFound(vec![id]))?;
        self.record_at(off, len)
    }

    /// Records in request order; every absent id is reported together.
    pub fn batch_get(&self, ids: &[u32]) -> Result<Vec<StoreRecord>> {
        let missing: Vec<u32> = ids.iter().copied().filter(|id| !self.contains(*id)).collect();
        if !missing.is_empty() {
            return Err(Error::NotFound(missing));
        }
        ids.iter().map(|&id| self.get(id)).collect()
    }

    /// `z_v` of every item, row-major in ascending id order.
    pub fn embedding_table(&self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.len() * self.meta.d_z);
        for &id in &self.ids {
            out.extend(self.get(id)?.z);
        }
        Ok(out)
    }

    pub fn scorer(&self, ranker: crate::ranker::RankerParams) -> Result<EmbeddingScorer> {
        if ranker.d_z != self.meta.d_z {
            return Err(Error::Version(format!(
                "ranker width {} against store width {}",
                ranker.d_z, self.meta.d_z
            )));
        }
        EmbeddingScorer::new(self.ids.clone(), self.embedding_table()?, ranker)
    }

    pub fn gate_stats(&self) -> Result<GateStats> {
        if !self.meta.gate_weights {
            return Err(Error::MissingData("store was built without gate weights".into()));
        }
        let rows = self
            .ids
            .iter()
            .map(|&id| {
                let g = self.get(id)?.gate_weights.expect("flagged");
                Ok(g.iter().map(|&v| v as f64).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        gate_stats(&self.meta.tap_layers, &refs)
    }

    /// Full structural check: every record parses, values are finite and
    /// the index agrees with the data file.
    pub fn verify(&self) -> Result<usize> {
        let m = &self.meta;
        let mut expected = m.header_len() as u64;
        for &id in &self.ids {
            let (off, len) = self.index[&id];
            if off != expected || len as usize != m.record_len() {
                return Err(Error::Corruption(format!(
                    "index entry for item {id} points at {off}+{len}, expected {expected}+{}",
                    m.record_len()
                )));
            }
            let rec = self.record_at(off, len)?;
            if rec.item_id != id {
                return Err(Error::Corruption(format!(
                    "record at offset {off} holds item {}, index says {id}",
                    rec.item_id
                )));
            }
            expected += len as u64;
        }
        Ok(self.ids.len())
    }
}

fn decode_index(raw: &[u8], meta: &StoreMeta) -> Result<Vec<(u32, u64, u32)>> {
    let mut c = Cursor::new(raw);
    c.magic(INDEX_MAGIC)?;
    let version = c.u32("index version")?;
    if version != VERSION {
        return Err(Error::Version(format!("unsupported index version {version}")));
    }
    let mv: Hash = c.take(32, "index model version")?.try_into().expect("32 bytes");
    if mv != meta.model_version {
        return Err(Error::Version("index and data file come from different builds".into()));
    }
    let n = c.u32("index count")? as usize;
    if n != meta.n_records {
        return Err(Error::Corruption(format!(
            "index lists {n} records, data file {}",
            meta.n_records
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = c.u32("index id")?;
        let off = c.u64("index offset")?;
        let len = c.u32("index length")?;
        if let Some(&(prev, prev_off, _)) = out.last() {
            if id <= prev || off <= prev_off {
                return Err(Error::Corruption(format!(
                    "index not strictly increasing at item {id} (after {prev})"
                )));
            }
        }
        out.push((id, off, len));
    }
    c.finish()?;
    Ok(out)
}
