//! Independent reference models shared by the integration tests.
#![allow(dead_code)]

use das_core::{AllocError, ClusterTopology, Heap, MapConfig, MapKind, MapRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Allocator oracle: the live set as a plain list of intervals. A request
/// goes to the lowest suitably aligned address whose whole range is
/// unoccupied, found by trying every candidate and checking every interval.
pub struct RefAlloc {
    pub base: u64,
    pub end: u64,
    word: u64,
    banks: u64,
    pub live: Vec<(u64, u64, MapRequest)>,
}

impl RefAlloc {
    pub fn new(topo: &ClusterTopology, base: u64, size: u64) -> Self {
        RefAlloc { base, end: base + size, word: topo.word_bytes as u64, banks: topo.total_banks() as u64, live: Vec::new() }
    }

    pub fn granule(&self, req: MapRequest) -> u64 {
        match req {
            MapRequest::Interleaved => self.word,
            // A whole number of full-width lines, 2^s of them.
            MapRequest::Das { s, .. } => self.word * self.banks * (1u64 << s),
        }
    }

    pub fn malloc(&mut self, size: u64, req: MapRequest) -> Option<u64> {
        let g = self.granule(req);
        let len = size.div_ceil(g) * g;
        let up = |x: u64| x.div_ceil(g) * g;
        let mut cands: Vec<u64> = std::iter::once(up(self.base)).chain(self.live.iter().map(|&(_, e, _)| up(e))).collect();
        cands.sort_unstable();
        let c = cands
            .into_iter()
            .find(|&c| c + len <= self.end && self.live.iter().all(|&(s, e, _)| c + len <= s || e <= c))?;
        self.live.push((c, c + len, req));
        Some(c)
    }

    pub fn free(&mut self, addr: u64) -> bool {
        match self.live.iter().position(|&(s, _, _)| s == addr) {
            Some(i) => {
                self.live.swap_remove(i);
                true
            }
            None => false,
        }
    }

    /// Maximal unoccupied spans in address order.
    pub fn gaps(&self) -> Vec<(u64, u64)> {
        let mut iv: Vec<(u64, u64)> = self.live.iter().map(|&(s, e, _)| (s, e)).collect();
        iv.sort_unstable();
        let mut out = Vec::new();
        let mut cur = self.base;
        for (s, e) in iv {
            if s > cur {
                out.push((cur, s));
            }
            cur = e;
        }
        if cur < self.end {
            out.push((cur, self.end));
        }
        out
    }
}

/// Size log-uniform in `[lo, hi]` bytes.
pub fn log_uniform(rng: &mut impl Rng, lo: u64, hi: u64) -> u64 {
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (rng.gen_range(a..=b).exp().round() as u64).clamp(lo, hi)
}

/// Small topology for exhaustive checks: `2^b` banks, `2^r` rows.
pub fn small_topology(b: u32, r: u32) -> ClusterTopology {
    // Split the banks into tiles and a two-level hierarchy where possible.
    let banks = 1usize << b;
    let banks_per_tile = banks.min(4);
    let tiles = banks / banks_per_tile;
    let tiles_per_subgroup = tiles.min(2);
    let subgroups = tiles / tiles_per_subgroup;
    ClusterTopology {
        pes_per_tile: 1,
        banks_per_tile,
        tiles_per_subgroup,
        subgroups_per_group: subgroups,
        groups: 1,
        rows_per_bank: 1 << r,
        word_bytes: 4,
        level_latency: Default::default(),
    }
}

fn random_request(rng: &mut impl Rng, topo: &ClusterTopology, max_s: u32) -> MapRequest {
    if rng.gen_bool(0.4) {
        MapRequest::Interleaved
    } else {
        MapRequest::Das { p: rng.gen_range(0..=topo.bank_bits()), s: rng.gen_range(0..=max_s) }
    }
}

#[derive(Debug, Default)]
pub struct SequenceStats {
    pub allocs: usize,
    pub frees: usize,
    pub bad_frees: usize,
    pub ooms: usize,
}

/// Drive a heap and the reference through the same random alloc/free
/// sequence (sizes 4 B to 64 KiB, mixed mappings) and compare placements,
/// the free list and the invariants after every step.
pub fn oracle_sequence(topo: &ClusterTopology, base: u64, size: u64, seed: u64, ops: usize, max_s: u32) -> Result<SequenceStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heap = Heap::init(topo, base, size).map_err(|e| e.to_string())?;
    let mut oracle = RefAlloc::new(topo, base, size);
    let mut st = SequenceStats::default();
    for step in 0..ops {
        if !oracle.live.is_empty() && rng.gen_bool(0.45) {
            let victim = oracle.live[rng.gen_range(0..oracle.live.len())].0;
            // Now and then free something that is not an allocation base.
            let addr = if rng.gen_bool(0.05) { victim + topo.word_bytes as u64 } else { victim };
            let expect = oracle.free(addr);
            match heap.das_free(addr) {
                Ok(cfg) if expect && cfg.base_addr == addr => st.frees += 1,
                Err(AllocError::InvalidFree { .. }) if !expect => st.bad_frees += 1,
                got => return Err(format!("step {step}: free {addr:#x}: heap {got:?}, reference freed: {expect}")),
            }
        } else {
            let bytes = log_uniform(&mut rng, 4, 64 * 1024);
            let req = random_request(&mut rng, topo, max_s);
            match (heap.das_malloc(bytes, req), oracle.malloc(bytes, req)) {
                (Ok(a), Some(b)) if a == b => st.allocs += 1,
                (Err(AllocError::OutOfMemory { .. }), None) => st.ooms += 1,
                (got, want) => return Err(format!("step {step}: {bytes} B {req:?}: heap {got:?}, reference {want:?}")),
            }
        }
        heap.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
        let free: Vec<(u64, u64)> = heap.free_blocks().iter().map(|b| (b.start, b.end())).collect();
        if free != oracle.gaps() {
            return Err(format!("step {step}: free list {free:?} is not the reference's gaps {:?}", oracle.gaps()));
        }
        let used: u64 = oracle.live.iter().map(|&(s, e, _)| e - s).sum();
        if heap.free_bytes() + used != size {
            return Err(format!("step {step}: {} free + {used} used != {size}", heap.free_bytes()));
        }
    }
    Ok(st)
}

pub type Segments = Vec<(Range<u64>, Range<u64>)>;

/// Ordered, gap-free, equal lengths on both sides, source offsets matching
/// destination offsets, and no destination piece crossing a partition block
/// (remapped) or L1 line (interleaved) boundary.
pub fn check_segments(topo: &ClusterTopology, cfg: &MapConfig, src: &Range<u64>, dst: &Range<u64>, segs: &Segments) -> Result<(), String> {
    let (origin, unit) = match cfg.kind {
        MapKind::Das => (cfg.base_addr, cfg.block_bytes(topo)),
        MapKind::Interleaved => (0, topo.line_bytes() as u64),
    };
    if dst.is_empty() {
        return if segs.is_empty() { Ok(()) } else { Err("segments for an empty range".into()) };
    }
    let (first, last) = (segs.first().ok_or("no segments")?, segs.last().unwrap());
    if first.1.start != dst.start || last.1.end != dst.end || first.0.start != src.start || last.0.end != src.end {
        return Err(format!("segments do not cover {src:?} -> {dst:?}"));
    }
    for w in segs.windows(2) {
        if w[0].1.end != w[1].1.start || w[0].0.end != w[1].0.start {
            return Err(format!("gap or overlap between {:?} and {:?}", w[0], w[1]));
        }
    }
    for (s, d) in segs {
        if d.is_empty() || s.end - s.start != d.end - d.start || s.start - src.start != d.start - dst.start {
            return Err(format!("bad segment {s:?} -> {d:?}"));
        }
        if (d.start - origin) / unit != (d.end - 1 - origin) / unit {
            return Err(format!("{d:?} crosses a {unit}-byte boundary"));
        }
    }
    Ok(())
}

/// Configurations the randomized segmentation checks run over.
pub fn segment_configs() -> Vec<(ClusterTopology, MapConfig)> {
    vec![
        (ClusterTopology::terapool_default(), MapConfig::das(5, 0, 0, 1 << 20)),
        (ClusterTopology::terapool_default(), MapConfig::das(8, 2, 1 << 20, 1 << 20)),
        (ClusterTopology::terapool_default(), MapConfig::das(0, 0, 64, 4096)),
        (ClusterTopology::terapool_default(), MapConfig::interleaved(0, 4 << 20)),
        (ClusterTopology::desk_default(), MapConfig::das(4, 3, 8192, 64 * 1024)),
        (ClusterTopology::desk_default(), MapConfig::interleaved(4096, 128 * 1024)),
        (small_topology(3, 3), MapConfig::das(1, 1, 32, 160)),
    ]
}

/// A random word-aligned destination range inside the region and a source
/// range of the same length somewhere in L2.
pub fn random_transfer(rng: &mut impl Rng, topo: &ClusterTopology, cfg: &MapConfig) -> (Range<u64>, Range<u64>) {
    let wb = topo.word_bytes as u64;
    let words = cfg.size_bytes / wb;
    let (a, b) = (rng.gen_range(0..=words), rng.gen_range(0..=words));
    let (lo, hi) = (a.min(b), a.max(b));
    let dst = cfg.base_addr + lo * wb..cfg.base_addr + hi * wb;
    let src_base = rng.gen_range(0..1u64 << 32) * wb;
    (src_base..src_base + (hi - lo) * wb, dst)
}
