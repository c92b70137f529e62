//! Unified dynamic allocator over the reserved heap, together with the
//! registry of live mapping regions that programs the address mapper.
//!
//! Free space is an address-ordered list of maximal free blocks. Requests are
//! served first-fit. A remapped request is aligned to, and rounded up to, a
//! whole slab (`2^s` full L1 lines) so that its physical footprint never
//! shares a bank row with a neighbouring allocation.

use serde::{Deserialize, Serialize};

use crate::error::{AllocError, RemapError};
use crate::remap::{self, MapConfig, MapKind, MapRequest, PhysicalLocation};
use crate::topology::ClusterTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeBlock {
    pub start: u64,
    pub size: u64,
}

impl FreeBlock {
    pub fn end(&self) -> u64 {
        self.start + self.size
    }
}

#[derive(Clone, Debug)]
pub struct Heap {
    topo: ClusterTopology,
    base: u64,
    size: u64,
    free_list: Vec<FreeBlock>,
    /// Every live allocation, sorted by base.
    regions: Vec<MapConfig>,
    /// Live remapped regions only, sorted by base; what the mapper consults.
    das_regions: Vec<MapConfig>,
    max_regions: Option<usize>,
}

fn align_up(x: u64, align: u64) -> u64 {
    x.div_ceil(align) * align
}

impl Heap {
    pub fn init(topo: &ClusterTopology, base: u64, size: u64) -> Result<Self, AllocError> {
        let wb = topo.word_bytes as u64;
        if size == 0 {
            return Err(AllocError::InvalidArgument("heap size must be nonzero".into()));
        }
        if base % wb != 0 {
            return Err(AllocError::InvalidArgument(format!("heap base {base:#x} is not word aligned")));
        }
        if size % wb != 0 {
            return Err(AllocError::InvalidArgument(format!("heap size {size} is not a word multiple")));
        }
        if base + size > topo.total_bytes() as u64 {
            return Err(AllocError::InvalidArgument(format!(
                "heap [{base:#x}, {:#x}) exceeds the {}-byte L1",
                base + size,
                topo.total_bytes()
            )));
        }
        Ok(Heap {
            topo: topo.clone(),
            base,
            size,
            free_list: vec![FreeBlock { start: base, size }],
            regions: Vec::new(),
            das_regions: Vec::new(),
            max_regions: None,
        })
    }

    /// Limit on concurrently live remapped regions (hardware CSR slots).
    pub fn with_max_regions(mut self, limit: Option<usize>) -> Self {
        self.max_regions = limit;
        self
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.topo
    }

    pub fn free_blocks(&self) -> &[FreeBlock] {
        &self.free_list
    }

    pub fn live_regions(&self) -> &[MapConfig] {
        &self.regions
    }

    pub fn das_regions(&self) -> &[MapConfig] {
        &self.das_regions
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_list.iter().map(|b| b.size).sum()
    }

    /// Alignment and rounding granule for a request.
    pub fn granule(&self, req: MapRequest) -> u64 {
        let wb = self.topo.word_bytes as u64;
        match req {
            MapRequest::Interleaved => wb,
            MapRequest::Das { s, .. } => wb << (self.topo.bank_bits() + s),
        }
    }

    /// Bytes actually reserved for a request of `size` bytes.
    pub fn effective_size(&self, size: u64, req: MapRequest) -> u64 {
        align_up(size, self.granule(req))
    }

    pub fn das_malloc(&mut self, size: u64, req: MapRequest) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::InvalidArgument("allocation size must be nonzero".into()));
        }
        if let MapRequest::Das { p, s } = req {
            if p > self.topo.bank_bits() || s > self.topo.row_bits() {
                return Err(AllocError::InvalidArgument(format!(
                    "p = {p}, s = {s} outside b = {}, r = {}",
                    self.topo.bank_bits(),
                    self.topo.row_bits()
                )));
            }
            if let Some(limit) = self.max_regions {
                if self.das_regions.len() >= limit {
                    return Err(AllocError::RegionLimit { limit });
                }
            }
        }
        let align = self.granule(req);
        let eff = align_up(size, align);

        let mut found = None;
        for (i, blk) in self.free_list.iter().enumerate() {
            let start = align_up(blk.start, align);
            if start + eff <= blk.end() {
                found = Some((i, start));
                break;
            }
        }
        let (idx, start) = found.ok_or(AllocError::OutOfMemory { size: eff, align })?;

        let blk = self.free_list[idx];
        let mut replacement = Vec::with_capacity(2);
        if start > blk.start {
            replacement.push(FreeBlock { start: blk.start, size: start - blk.start });
        }
        if start + eff < blk.end() {
            replacement.push(FreeBlock { start: start + eff, size: blk.end() - (start + eff) });
        }
        self.free_list.splice(idx..=idx, replacement);

        let cfg = MapConfig::from_request(req, start, eff);
        let pos = self.regions.partition_point(|r| r.base_addr < start);
        self.regions.insert(pos, cfg);
        if cfg.kind == MapKind::Das {
            let pos = self.das_regions.partition_point(|r| r.base_addr < start);
            self.das_regions.insert(pos, cfg);
            log::trace!("das region {cfg:?}");
        }
        Ok(start)
    }

    pub fn das_free(&mut self, addr: u64) -> Result<MapConfig, AllocError> {
        let pos = self
            .regions
            .binary_search_by_key(&addr, |r| r.base_addr)
            .map_err(|_| AllocError::InvalidFree { addr })?;
        let cfg = self.regions.remove(pos);
        if cfg.kind == MapKind::Das {
            let dpos = self
                .das_regions
                .binary_search_by_key(&addr, |r| r.base_addr)
                .expect("das registry out of sync");
            self.das_regions.remove(dpos);
        }

        let (start, end) = (cfg.base_addr, cfg.end());
        let idx = self.free_list.partition_point(|b| b.start < start);
        let merge_prev = idx > 0 && self.free_list[idx - 1].end() == start;
        let merge_next = idx < self.free_list.len() && self.free_list[idx].start == end;
        match (merge_prev, merge_next) {
            (true, true) => {
                let next = self.free_list.remove(idx);
                self.free_list[idx - 1].size += cfg.size_bytes + next.size;
            }
            (true, false) => self.free_list[idx - 1].size += cfg.size_bytes,
            (false, true) => {
                self.free_list[idx].start = start;
                self.free_list[idx].size += cfg.size_bytes;
            }
            (false, false) => self.free_list.insert(idx, FreeBlock { start, size: cfg.size_bytes }),
        }
        Ok(cfg)
    }

    /// Release every live allocation.
    pub fn reset(&mut self) {
        self.free_list = vec![FreeBlock { start: self.base, size: self.size }];
        self.regions.clear();
        self.das_regions.clear();
    }

    /// The live remapped region containing `addr`, if any.
    pub fn region_lookup(&self, addr: u64) -> Option<MapConfig> {
        let pos = self.das_regions.partition_point(|r| r.base_addr <= addr);
        if pos == 0 {
            return None;
        }
        let r = self.das_regions[pos - 1];
        r.contains(addr).then_some(r)
    }

    /// The live allocation (of any kind) containing `addr`.
    pub fn allocation_at(&self, addr: u64) -> Option<MapConfig> {
        let pos = self.regions.partition_point(|r| r.base_addr <= addr);
        if pos == 0 {
            return None;
        }
        let r = self.regions[pos - 1];
        r.contains(addr).then_some(r)
    }

    /// Physical location of `addr` under the current registry.
    pub fn resolve(&self, addr: u64) -> Result<PhysicalLocation, RemapError> {
        match self.region_lookup(addr) {
            Some(r) => Ok(remap::das_map_unchecked(&self.topo, &r, addr)),
            None => remap::interleaved_map(&self.topo, addr),
        }
    }

    /// Bank index only; the hot path of the engine.
    #[inline]
    pub fn resolve_bank(&self, addr: u64) -> Result<usize, RemapError> {
        self.resolve(addr).map(|l| l.bank)
    }

    /// Verify the structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for w in self.free_list.windows(2) {
            if w[0].end() > w[1].start {
                return Err(format!("free blocks overlap or are unsorted: {:?} {:?}", w[0], w[1]));
            }
            if w[0].end() == w[1].start {
                return Err(format!("adjacent free blocks not coalesced: {:?} {:?}", w[0], w[1]));
            }
        }
        if self.free_list.iter().any(|b| b.size == 0) {
            return Err("empty free block".into());
        }
        let mut spans: Vec<(u64, u64)> = self
            .free_list
            .iter()
            .map(|b| (b.start, b.end()))
            .chain(self.regions.iter().map(|r| (r.base_addr, r.end())))
            .collect();
        spans.sort_unstable();
        let mut cursor = self.base;
        for (s, e) in spans {
            if s != cursor {
                return Err(format!("gap or overlap at {cursor:#x} (next span starts {s:#x})"));
            }
            cursor = e;
        }
        if cursor != self.base + self.size {
            return Err(format!("spans end at {cursor:#x}, heap ends at {:#x}", self.base + self.size));
        }
        Ok(())
    }
}
