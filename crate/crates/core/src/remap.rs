//! Address mapping: the word-interleaved baseline and the partitioned
//! remapping applied inside heap regions.
//!
//! Inside a remapped region the word offset `u` is split, from the LSB, into
//! `[bank_lo: p | row_lo: s | bank_hi: b-p | slab: ..]`. Consecutive words
//! first fold across the `2^p` banks of one partition, then advance through
//! `2^s` rows, and only then move on to the next partition.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::RemapError;
use crate::topology::ClusterTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Interleaved,
    Das,
}

/// Mapping requested for an allocation, before the allocator assigns a base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MapRequest {
    Interleaved,
    Das { p: u32, s: u32 },
}

impl MapRequest {
    pub fn kind(&self) -> MapKind {
        match self {
            MapRequest::Interleaved => MapKind::Interleaved,
            MapRequest::Das { .. } => MapKind::Das,
        }
    }
}

/// One mapping scheme bound to an address range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapConfig {
    pub kind: MapKind,
    pub p: u32,
    pub s: u32,
    pub base_addr: u64,
    pub size_bytes: u64,
}

impl MapConfig {
    pub fn interleaved(base_addr: u64, size_bytes: u64) -> Self {
        MapConfig { kind: MapKind::Interleaved, p: 0, s: 0, base_addr, size_bytes }
    }

    pub fn das(p: u32, s: u32, base_addr: u64, size_bytes: u64) -> Self {
        MapConfig { kind: MapKind::Das, p, s, base_addr, size_bytes }
    }

    pub fn from_request(req: MapRequest, base_addr: u64, size_bytes: u64) -> Self {
        match req {
            MapRequest::Interleaved => Self::interleaved(base_addr, size_bytes),
            MapRequest::Das { p, s } => Self::das(p, s, base_addr, size_bytes),
        }
    }

    pub fn request(&self) -> MapRequest {
        match self.kind {
            MapKind::Interleaved => MapRequest::Interleaved,
            MapKind::Das => MapRequest::Das { p: self.p, s: self.s },
        }
    }

    pub fn end(&self) -> u64 {
        self.base_addr + self.size_bytes
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base_addr && addr < self.end()
    }

    pub fn range(&self) -> Range<u64> {
        self.base_addr..self.end()
    }

    /// Bytes in one partition block, `word_bytes * 2^(p+s)`.
    pub fn block_bytes(&self, topo: &ClusterTopology) -> u64 {
        (topo.word_bytes as u64) << (self.p + self.s)
    }

    pub fn validate(&self, topo: &ClusterTopology) -> Result<(), RemapError> {
        let wb = topo.word_bytes as u64;
        if self.size_bytes % wb != 0 {
            return Err(RemapError::BadConfig(format!(
                "size {} is not a multiple of the {wb}-byte word",
                self.size_bytes
            )));
        }
        if self.end() > topo.total_bytes() as u64 {
            return Err(RemapError::BadConfig(format!(
                "region [{:#x}, {:#x}) extends past the end of L1",
                self.base_addr,
                self.end()
            )));
        }
        if self.kind == MapKind::Das {
            if self.p > topo.bank_bits() {
                return Err(RemapError::BadConfig(format!("p = {} exceeds b = {}", self.p, topo.bank_bits())));
            }
            if self.s > topo.row_bits() {
                return Err(RemapError::BadConfig(format!("s = {} exceeds r = {}", self.s, topo.row_bits())));
            }
            let block = self.block_bytes(topo);
            if self.base_addr % block != 0 {
                return Err(RemapError::BadConfig(format!(
                    "base {:#x} is not aligned to the {block}-byte partition block",
                    self.base_addr
                )));
            }
        }
        Ok(())
    }
}

/// Physical bank/row of a word, plus the untouched byte offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhysicalLocation {
    pub bank: usize,
    pub row: usize,
    pub byte: usize,
}

fn check_in_l1(topo: &ClusterTopology, addr: u64) -> Result<(), RemapError> {
    let limit = topo.total_bytes() as u64;
    if addr >= limit {
        return Err(RemapError::OutOfL1 { addr, limit });
    }
    Ok(())
}

fn mask(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

pub fn interleaved_map(topo: &ClusterTopology, addr: u64) -> Result<PhysicalLocation, RemapError> {
    check_in_l1(topo, addr)?;
    let wb = topo.word_bytes as u64;
    let b = topo.bank_bits();
    let word = addr / wb;
    Ok(PhysicalLocation {
        bank: (word & mask(b)) as usize,
        row: (word >> b) as usize,
        byte: (addr % wb) as usize,
    })
}

pub fn interleaved_unmap(topo: &ClusterTopology, loc: PhysicalLocation) -> u64 {
    let word = ((loc.row as u64) << topo.bank_bits()) | loc.bank as u64;
    word * topo.word_bytes as u64 + loc.byte as u64
}

/// First row of a region's footprint.
fn base_row(topo: &ClusterTopology, cfg: &MapConfig) -> u64 {
    let word = cfg.base_addr / topo.word_bytes as u64;
    (word >> topo.bank_bits()) & !mask(cfg.s)
}

pub fn das_map(topo: &ClusterTopology, cfg: &MapConfig, addr: u64) -> Result<PhysicalLocation, RemapError> {
    if cfg.kind != MapKind::Das {
        return Err(RemapError::BadConfig("das_map needs a remapped region".into()));
    }
    cfg.validate(topo)?;
    if !cfg.contains(addr) {
        return Err(RemapError::OutsideRegion { addr, base: cfg.base_addr, end: cfg.end() });
    }
    Ok(das_map_unchecked(topo, cfg, addr))
}

#[inline]
pub(crate) fn das_map_unchecked(topo: &ClusterTopology, cfg: &MapConfig, addr: u64) -> PhysicalLocation {
    let wb = topo.word_bytes as u64;
    let b = topo.bank_bits();
    let (p, s) = (cfg.p, cfg.s);
    let u = (addr - cfg.base_addr) / wb;
    let bank_lo = u & mask(p);
    let row_lo = (u >> p) & mask(s);
    let bank_hi = (u >> (p + s)) & mask(b - p);
    let slab = u >> (b + s);
    PhysicalLocation {
        bank: ((bank_hi << p) | bank_lo) as usize,
        row: (base_row(topo, cfg) + (slab << s) + row_lo) as usize,
        byte: (addr % wb) as usize,
    }
}

/// Inverse of [`das_map`]; fails when the location is not in the region's
/// footprint.
pub fn das_unmap(topo: &ClusterTopology, cfg: &MapConfig, loc: PhysicalLocation) -> Result<u64, RemapError> {
    let wb = topo.word_bytes as u64;
    let b = topo.bank_bits();
    let (p, s) = (cfg.p, cfg.s);
    let row_off = (loc.row as u64)
        .checked_sub(base_row(topo, cfg))
        .ok_or_else(|| RemapError::BadConfig(format!("row {} is below the region", loc.row)))?;
    let bank = loc.bank as u64;
    let bank_lo = bank & mask(p);
    let bank_hi = bank >> p;
    let row_lo = row_off & mask(s);
    let slab = row_off >> s;
    let u = (slab << (b + s)) | (bank_hi << (p + s)) | (row_lo << p) | bank_lo;
    let addr = cfg.base_addr + u * wb + loc.byte as u64;
    if !cfg.contains(addr) {
        return Err(RemapError::OutsideRegion { addr, base: cfg.base_addr, end: cfg.end() });
    }
    Ok(addr)
}

/// Fail if any two regions overlap.
pub fn check_disjoint(regions: &[MapConfig]) -> Result<(), RemapError> {
    let mut sorted: Vec<&MapConfig> = regions.iter().filter(|r| r.size_bytes > 0).collect();
    sorted.sort_by_key(|r| r.base_addr);
    for w in sorted.windows(2) {
        if w[1].base_addr < w[0].end() {
            return Err(RemapError::Overlap {
                a_base: w[0].base_addr,
                a_end: w[0].end(),
                b_base: w[1].base_addr,
                b_end: w[1].end(),
            });
        }
    }
    Ok(())
}

/// Map an address through the region registry: remapped regions apply their
/// scheme, everything else is word-interleaved.
pub fn resolve(topo: &ClusterTopology, regions: &[MapConfig], addr: u64) -> Result<PhysicalLocation, RemapError> {
    check_disjoint(regions)?;
    resolve_unchecked_regions(topo, regions, addr)
}

/// [`resolve`] for a registry already known to be disjoint.
pub(crate) fn resolve_unchecked_regions(
    topo: &ClusterTopology,
    regions: &[MapConfig],
    addr: u64,
) -> Result<PhysicalLocation, RemapError> {
    check_in_l1(topo, addr)?;
    match regions.iter().find(|r| r.kind == MapKind::Das && r.contains(addr)) {
        Some(r) => Ok(das_map_unchecked(topo, r, addr)),
        None => interleaved_map(topo, addr),
    }
}

/// Split a transfer so that no destination piece crosses a mapping boundary:
/// partition blocks for remapped regions, L1 lines for interleaved memory.
pub fn segment_transfer(
    topo: &ClusterTopology,
    cfg: &MapConfig,
    src: Range<u64>,
    dst: Range<u64>,
) -> Result<Vec<(Range<u64>, Range<u64>)>, RemapError> {
    let (src_len, dst_len) = (src.end.saturating_sub(src.start), dst.end.saturating_sub(dst.start));
    if src_len != dst_len || src.end < src.start || dst.end < dst.start {
        return Err(RemapError::LengthMismatch { src: src_len, dst: dst_len });
    }
    let (origin, unit) = match cfg.kind {
        MapKind::Das => {
            if dst.start < cfg.base_addr || dst.end > cfg.end() {
                return Err(RemapError::OutsideRegion { addr: dst.start, base: cfg.base_addr, end: cfg.end() });
            }
            (cfg.base_addr, cfg.block_bytes(topo))
        }
        MapKind::Interleaved => (0, topo.line_bytes() as u64),
    };
    let mut out = Vec::new();
    let mut cur = dst.start;
    while cur < dst.end {
        let next_boundary = origin + ((cur - origin) / unit + 1) * unit;
        let stop = next_boundary.min(dst.end);
        let off = cur - dst.start;
        out.push((src.start + off..src.start + off + (stop - cur), cur..stop));
        cur = stop;
    }
    Ok(out)
}
