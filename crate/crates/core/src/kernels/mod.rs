//! Workload generators: per-PE op streams plus the allocation, DMA and phase
//! plan that goes with them.
//!
//! Every generator emits the same logical addresses under both schemes; only
//! the mapping requested for each allocation differs. Operands private to a
//! tile use a tile-chunked layout: chunk `t` of the region belongs to tile
//! `t`, and under DAS the region is mapped with `p = log2(banks_per_tile)`
//! and `2^(p+s)` equal to the chunk size, which places chunk `t` in tile
//! `t`'s banks.

pub mod attention;
pub mod gemm;
pub mod gemv;
pub mod layernorm;
pub mod vit;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::alloc::Heap;
use crate::engine::{
    DmaDirection, DmaTransferSpec, HeapEvent, LevelCounts, OpCounts, OpKind, PeOp, PeProgram, Reg, Workload,
};
use crate::error::KernelError;
use crate::remap::{self, MapConfig, MapKind, MapRequest};
use crate::topology::ClusterTopology;

pub use attention::{gen_flash_attention, AttentionShape};
pub use gemm::{gen_gemm, GemmShape};
pub use gemv::{gen_gemv, GemvShape};
pub use layernorm::{gen_layernorm, LayerNormShape};
pub use vit::{gen_vit_encoder, VitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Interleaved,
    Das,
}

impl Scheme {
    pub const BOTH: [Scheme; 2] = [Scheme::Das, Scheme::Interleaved];

    /// The mapping actually requested for an operand whose DAS layout is `das`.
    pub fn map(self, das: MapRequest) -> MapRequest {
        match self {
            Scheme::Interleaved => MapRequest::Interleaved,
            Scheme::Das => das,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Interleaved => "interleaved",
            Scheme::Das => "das",
        })
    }
}

/// Which PEs touch an operand; decides its DAS layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Each tile touches only its own chunk.
    PerTile,
    /// Shared by the tiles of one group.
    PerGroup,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperandInfo {
    pub name: String,
    pub addr: u64,
    pub bytes: u64,
    pub map: MapRequest,
    pub sharing: Sharing,
}

/// A generated workload together with its analytic op counts.
#[derive(Clone, Debug)]
pub struct KernelPlan {
    pub kernel: String,
    pub workload: String,
    pub n_parallel: u64,
    pub scheme: Scheme,
    pub heap_base: u64,
    pub heap_size: u64,
    pub work: Workload,
    pub operands: Vec<OperandInfo>,
    pub expected: OpCounts,
}

impl KernelPlan {
    /// The heap state the engine starts from.
    pub fn initial_heap(&self, topo: &ClusterTopology) -> Heap {
        Heap::init(topo, self.heap_base, self.heap_size).expect("heap bounds were validated when planning")
    }

    /// Operand-to-region table as JSON.
    pub fn operand_table_json(&self) -> String {
        serde_json::to_string_pretty(&self.operands).expect("operand table serializes")
    }

    /// Every op of every PE with addresses zeroed.
    pub fn op_kinds(&self) -> Vec<Vec<PeOp>> {
        self.work.programs.iter().map(|p| p.iter().map(|o| o.without_addr()).collect()).collect()
    }

    /// Classify every access by the operand it touches, resolving it with
    /// that operand's mapping.
    pub fn access_levels(&self, topo: &ClusterTopology) -> BTreeMap<String, LevelCounts> {
        let mut by_base: BTreeMap<u64, (u64, &OperandInfo)> = BTreeMap::new();
        for op in &self.operands {
            by_base.insert(op.addr, (op.addr + op.bytes, op));
        }
        let mut out: BTreeMap<String, LevelCounts> = BTreeMap::new();
        for (pe, prog) in self.work.programs.iter().enumerate() {
            let tile = topo.tile_of_pe(pe);
            for op in prog.iter() {
                let Some(addr) = op.addr() else { continue };
                let addr = addr as u64;
                let Some((_, &(end, info))) = by_base.range(..=addr).next_back() else { continue };
                if addr >= end {
                    continue;
                }
                let cfg = MapConfig::from_request(info.map, info.addr, info.bytes);
                let bank = match cfg.kind {
                    MapKind::Das => remap::das_map_unchecked(topo, &cfg, addr).bank,
                    MapKind::Interleaved => remap::interleaved_map(topo, addr).map(|l| l.bank).unwrap_or(0),
                };
                let level = topo.tile_level(tile, topo.tile_of_bank(bank));
                out.entry(info.name.clone()).or_default().bump(level);
            }
        }
        out
    }
}

/// Count the ops each program actually emits.
pub fn count_ops(work: &Workload) -> OpCounts {
    let mut c = OpCounts::default();
    for p in &work.programs {
        for op in p.iter() {
            match op.kind {
                OpKind::Load { .. } => c.loads += 1,
                OpKind::Store { .. } => c.stores += 1,
                OpKind::Compute { class } => match class {
                    crate::engine::ComputeClass::Mac => c.macs += 1,
                    crate::engine::ComputeClass::Alu => c.alu += 1,
                    crate::engine::ComputeClass::Div => c.div += 1,
                },
                _ => {}
            }
        }
    }
    c
}

pub(crate) fn shape(msg: impl Into<String>) -> KernelError {
    KernelError::Shape(msg.into())
}

pub(crate) fn log2(x: u64) -> u32 {
    debug_assert!(x.is_power_of_two());
    x.trailing_zeros()
}

pub(crate) fn pow2_at_least(x: u64, floor: u64) -> u64 {
    x.max(floor).next_power_of_two()
}

/// Region of `n_tiles` equal chunks, chunk `t` private to tile `t`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TileChunks {
    pub base: u64,
    /// Words per chunk, a power of two.
    pub chunk: u64,
    pub wb: u64,
}

impl TileChunks {
    pub fn layout(topo: &ClusterTopology, words_needed: u64) -> Result<(u64, MapRequest), KernelError> {
        let bpt = topo.banks_per_tile as u64;
        let chunk = pow2_at_least(words_needed, bpt);
        let s = log2(chunk / bpt);
        if s > topo.row_bits() {
            return Err(shape(format!(
                "a tile chunk of {chunk} words exceeds one tile's {} words of L1; reduce the shape or raise the parallel count",
                bpt * topo.rows_per_bank as u64
            )));
        }
        Ok((chunk, MapRequest::Das { p: log2(bpt), s }))
    }

    pub fn bytes(&self, topo: &ClusterTopology) -> u64 {
        topo.total_tiles() as u64 * self.chunk * self.wb
    }

    /// Byte address of word `w` of tile `t`'s chunk.
    pub fn at(&self, t: usize, w: u64) -> u64 {
        self.base + (t as u64 * self.chunk + w) * self.wb
    }
}

/// Region of equal units, unit `u` private to the `u`-th aligned group of
/// `group_tiles` tiles.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupUnits {
    pub base: u64,
    pub unit: u64,
    pub wb: u64,
    pub n_units: u64,
}

impl GroupUnits {
    pub fn layout(topo: &ClusterTopology, group_tiles: usize, words_needed: u64) -> Result<(u64, MapRequest), KernelError> {
        let banks = (group_tiles * topo.banks_per_tile) as u64;
        let unit = pow2_at_least(words_needed, banks);
        let p = log2(banks);
        let s = log2(unit / banks);
        if s > topo.row_bits() {
            return Err(shape(format!("a group unit of {unit} words exceeds the group's L1 share")));
        }
        Ok((unit, MapRequest::Das { p, s }))
    }

    pub fn bytes(&self) -> u64 {
        self.n_units * self.unit * self.wb
    }

    pub fn at(&self, u: usize, w: u64) -> u64 {
        self.base + (u as u64 * self.unit + w) * self.wb
    }
}

/// Affine 2-D view in bytes: `at(r, c) = base + r*rs + c*cs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Affine {
    pub base: u64,
    pub rs: u64,
    pub cs: u64,
}

impl Affine {
    pub fn row_major(base: u64, cols: u64, wb: u64) -> Self {
        Affine { base, rs: cols * wb, cs: wb }
    }

    #[inline]
    pub fn at(&self, r: u64, c: u64) -> u32 {
        (self.base + r * self.rs + c * self.cs) as u32
    }
}

// Register convention: accumulators r0..r15, operand set 0 in r16..r23,
// operand set 1 in r24..r31.
pub(crate) fn acc(r: u64, c: u64) -> Reg {
    Reg((r * 4 + c) as u8)
}

pub(crate) fn a_reg(set: u64, r: u64) -> Reg {
    Reg(if set == 0 { 16 + r as u8 } else { 28 + r as u8 })
}

pub(crate) fn b_reg(set: u64, c: u64) -> Reg {
    Reg(if set == 0 { 20 + c as u8 } else { 24 + c as u8 })
}

pub(crate) fn tmp(i: u64) -> Reg {
    Reg(16 + (i % 4) as u8)
}

/// What happens to a finished 4x4 window of accumulators.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Epilogue {
    Store(Affine),
    /// Multiply by a constant, then store.
    ScaleStore(Affine),
    /// Add into the existing values.
    Accumulate(Affine),
    /// Add a residual operand, then store.
    Residual { out: Affine, res: Affine },
    /// Tanh-form GELU, then store.
    Gelu(Affine),
}

pub(crate) const GELU_ALU: u64 = 4;
pub(crate) const GELU_DIV: u64 = 1;

impl Epilogue {
    /// Ops emitted per window element beyond the final store.
    pub fn extra_per_element(&self) -> OpCounts {
        match self {
            Epilogue::Store(_) => OpCounts::default(),
            Epilogue::ScaleStore(_) => OpCounts { alu: 1, ..Default::default() },
            Epilogue::Accumulate(_) | Epilogue::Residual { .. } => OpCounts { loads: 1, alu: 1, ..Default::default() },
            Epilogue::Gelu(_) => OpCounts { alu: GELU_ALU, div: GELU_DIV, ..Default::default() },
        }
    }

    pub fn emit(&self, out: &mut Vec<PeOp>) {
        for r in 0..4 {
            match *self {
                Epilogue::Store(dst) => {
                    for c in 0..4 {
                        out.push(PeOp::store(dst.at(r, c), acc(r, c)));
                    }
                }
                Epilogue::ScaleStore(dst) => {
                    for c in 0..4 {
                        out.push(PeOp::alu(acc(r, c), acc(r, c), Reg::NONE));
                    }
                    for c in 0..4 {
                        out.push(PeOp::store(dst.at(r, c), acc(r, c)));
                    }
                }
                Epilogue::Accumulate(dst) | Epilogue::Residual { out: dst, res: _ } => {
                    let src = match *self {
                        Epilogue::Residual { res, .. } => res,
                        _ => dst,
                    };
                    for c in 0..4 {
                        out.push(PeOp::load(src.at(r, c), tmp(c)));
                    }
                    for c in 0..4 {
                        out.push(PeOp::alu(acc(r, c), acc(r, c), tmp(c)));
                    }
                    for c in 0..4 {
                        out.push(PeOp::store(dst.at(r, c), acc(r, c)));
                    }
                }
                Epilogue::Gelu(dst) => {
                    for c in 0..4 {
                        let a = acc(r, c);
                        out.push(PeOp::alu(tmp(c), a, a));
                        out.push(PeOp::alu(tmp(c), tmp(c), a));
                        out.push(PeOp::div(tmp(c), tmp(c), Reg::NONE));
                        out.push(PeOp::alu(tmp(c), tmp(c), Reg::NONE));
                        out.push(PeOp::alu(a, a, tmp(c)));
                    }
                    for c in 0..4 {
                        out.push(PeOp::store(dst.at(r, c), acc(r, c)));
                    }
                }
            }
        }
    }
}

/// One 4x4 output window: `acc[r][c] = sum_k A(r, k) * B(k, c)` over
/// `k_len` steps starting at `k0` and wrapping. Each step loads its eight
/// operands and then issues its sixteen MACs; there is no software
/// pipelining across steps.
pub(crate) fn emit_window(p: &mut PeProgram, a: Affine, b: Affine, k_len: u64, k0: u64, epi: Epilogue) {
    let k_at = move |i: u64| (k0 + i) % k_len;
    p.push_loop(
        k_len,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            let k = k_at(i);
            for r in 0..4 {
                out.push(PeOp::load(a.at(r, k), a_reg(0, r)));
                out.push(PeOp::load(b.at(k, r), b_reg(0, r)));
            }
            for r in 0..4 {
                for c in 0..4 {
                    out.push(PeOp::mac(acc(r, c), a_reg(0, r), b_reg(0, c)));
                }
            }
        }),
    );
    let mut tail = Vec::with_capacity(64);
    epi.emit(&mut tail);
    p.extend_ops(tail);
}

/// Ops of one [`emit_window`] call.
pub(crate) fn window_counts(k_len: u64, epi: &Epilogue) -> OpCounts {
    let e = epi.extra_per_element();
    OpCounts {
        loads: 8 * k_len + 16 * e.loads,
        stores: 16,
        macs: 16 * k_len,
        alu: 16 * e.alu,
        div: 16 * e.div,
    }
}

pub(crate) fn add_counts(a: &mut OpCounts, b: &OpCounts, times: u64) {
    a.loads += b.loads * times;
    a.stores += b.stores * times;
    a.macs += b.macs * times;
    a.alu += b.alu * times;
    a.div += b.div * times;
}

/// Start offset for a PE walking a dimension of length `len`: distinct banks
/// for the PEs of one tile, and distinct rows for sharers in other tiles.
pub(crate) fn stagger(topo: &ClusterTopology, pe: usize, len: u64) -> u64 {
    let bpt = topo.banks_per_tile as u64;
    let ppt = topo.pes_per_tile as u64;
    let spread = (bpt / ppt).max(1);
    let q = (pe % topo.pes_per_tile) as u64;
    let tile = topo.tile_of_pe(pe) as u64;
    (q * spread + tile * (bpt + 1)) % len
}

/// Accumulates programs, heap events, DMA transfers and phases while a
/// generator runs, replaying every allocation on a planner heap so that the
/// addresses baked into the streams are the ones the engine will see.
pub(crate) struct PlanBuilder {
    pub topo: ClusterTopology,
    pub scheme: Scheme,
    heap: Heap,
    heap_base: u64,
    heap_size: u64,
    pub programs: Vec<PeProgram>,
    heap_events: Vec<HeapEvent>,
    dma: Vec<DmaTransferSpec>,
    phases: Vec<String>,
    operands: Vec<OperandInfo>,
    next_barrier: u32,
}

impl PlanBuilder {
    pub fn new(topo: &ClusterTopology, scheme: Scheme, heap: Option<(u64, u64)>) -> Result<Self, KernelError> {
        topo.validate().map_err(|e| shape(e.to_string()))?;
        let (heap_base, heap_size) = heap.unwrap_or((0, topo.total_bytes() as u64));
        let h = Heap::init(topo, heap_base, heap_size)?;
        Ok(PlanBuilder {
            topo: topo.clone(),
            scheme,
            heap: h,
            heap_base,
            heap_size,
            programs: vec![PeProgram::new(); topo.total_pes()],
            heap_events: Vec::new(),
            dma: Vec::new(),
            phases: Vec::new(),
            operands: Vec::new(),
            next_barrier: 0,
        })
    }

    pub fn n_pes(&self) -> usize {
        self.topo.total_pes()
    }

    pub fn wb(&self) -> u64 {
        self.topo.word_bytes as u64
    }

    /// Allocate from PE 0; `das` is the layout used under DAS.
    pub fn alloc(&mut self, name: &str, bytes: u64, das: MapRequest, sharing: Sharing) -> Result<u64, KernelError> {
        let req = self.scheme.map(das);
        let addr = self.heap.das_malloc(bytes, req)?;
        let ev = self.heap_events.len() as u32;
        self.heap_events.push(HeapEvent::Malloc { name: name.to_string(), size: bytes, req, expect_addr: addr });
        self.programs[0].push(PeOp::heap(ev));
        self.operands.push(OperandInfo { name: name.to_string(), addr, bytes, map: req, sharing });
        Ok(addr)
    }

    pub fn free(&mut self, name: &str, addr: u64) -> Result<(), KernelError> {
        self.heap.das_free(addr)?;
        let ev = self.heap_events.len() as u32;
        self.heap_events.push(HeapEvent::Free { name: name.to_string(), addr });
        self.programs[0].push(PeOp::heap(ev));
        Ok(())
    }

    pub fn tile_chunks(&mut self, name: &str, words_per_tile: u64) -> Result<TileChunks, KernelError> {
        let (chunk, req) = TileChunks::layout(&self.topo, words_per_tile)?;
        let mut t = TileChunks { base: 0, chunk, wb: self.wb() };
        t.base = self.alloc(name, t.bytes(&self.topo), req, Sharing::PerTile)?;
        Ok(t)
    }

    /// Units private to aligned tile groups; plain interleaving when one
    /// group spans the whole cluster.
    pub fn group_units(
        &mut self,
        name: &str,
        group_tiles: usize,
        n_units: u64,
        words_per_unit: u64,
    ) -> Result<GroupUnits, KernelError> {
        let wb = self.wb();
        if group_tiles >= self.topo.total_tiles() {
            let unit = words_per_unit;
            let base = self.alloc(name, n_units * unit * wb, MapRequest::Interleaved, Sharing::Shared)?;
            return Ok(GroupUnits { base, unit, wb, n_units });
        }
        let (unit, req) = GroupUnits::layout(&self.topo, group_tiles, words_per_unit)?;
        let n_groups = (self.topo.total_tiles() / group_tiles) as u64;
        let n_units = n_units.max(n_groups).next_power_of_two();
        let mut g = GroupUnits { base: 0, unit, wb, n_units };
        g.base = self.alloc(name, g.bytes(), req, Sharing::PerGroup)?;
        Ok(g)
    }

    pub fn shared(&mut self, name: &str, words: u64) -> Result<u64, KernelError> {
        let wb = self.wb();
        self.alloc(name, words * wb, MapRequest::Interleaved, Sharing::Shared)
    }

    /// Barrier across every PE.
    pub fn barrier(&mut self) {
        let id = self.next_barrier;
        self.next_barrier += 1;
        let n = self.n_pes() as u32;
        for p in &mut self.programs {
            p.push(PeOp::barrier(id, n));
        }
    }

    /// Switch every PE to phase `name`.
    pub fn phase(&mut self, name: &str) {
        let idx = match self.phases.iter().position(|p| p == name) {
            Some(i) => i,
            None => {
                self.phases.push(name.to_string());
                self.phases.len() - 1
            }
        };
        for p in &mut self.programs {
            p.push(PeOp::mark(idx as u16));
        }
    }

    pub fn dma_start(&mut self, name: &str, dir: DmaDirection, addr: u64, bytes: u64) -> u32 {
        let id = self.dma.len() as u32;
        self.dma.push(DmaTransferSpec { name: name.to_string(), dir, addr, bytes });
        self.programs[0].push(PeOp::dma_start(id));
        id
    }

    pub fn dma_wait(&mut self, id: u32) {
        self.programs[0].push(PeOp::dma_wait(id));
    }

    /// Mapping requested by the most recent allocation.
    pub fn last_map(&self) -> MapRequest {
        self.operands.last().map(|o| o.map).unwrap_or(MapRequest::Interleaved)
    }

    pub fn finish(
        self,
        kernel: &str,
        workload: String,
        n_parallel: u64,
        expected: OpCounts,
    ) -> Result<KernelPlan, KernelError> {
        let work = Workload {
            programs: self.programs,
            heap_events: self.heap_events,
            dma: self.dma,
            phases: self.phases,
        };
        let plan = KernelPlan {
            kernel: kernel.to_string(),
            workload,
            n_parallel,
            scheme: self.scheme,
            heap_base: self.heap_base,
            heap_size: self.heap_size,
            work,
            operands: self.operands,
            expected,
        };
        let got = count_ops(&plan.work);
        for (what, stream, exp) in [
            ("MAC", got.macs, expected.macs),
            ("load", got.loads, expected.loads),
            ("store", got.stores, expected.stores),
            ("ALU", got.alu, expected.alu),
            ("DIV", got.div, expected.div),
        ] {
            if stream != exp {
                return Err(KernelError::CountMismatch { what, stream, expected: exp });
            }
        }
        Ok(plan)
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::topology::HierarchyLevel;

    /// Both schemes issue the same ops apart from addresses.
    pub fn assert_symmetric(das: &KernelPlan, il: &KernelPlan) {
        assert_eq!(das.op_kinds(), il.op_kinds());
        assert_eq!(das.work.phases, il.work.phases);
        assert_eq!(das.work.heap_events.len(), il.work.heap_events.len());
        assert_eq!(das.expected, il.expected);
    }

    pub fn local_fraction(levels: &BTreeMap<String, LevelCounts>, name: &str) -> f64 {
        let c = levels.get(name).unwrap_or_else(|| panic!("no accesses to {name}"));
        c.local_fraction()
    }

    pub fn assert_all_local(topo: &ClusterTopology, plan: &KernelPlan, names: &[&str]) {
        let lv = plan.access_levels(topo);
        for n in names {
            let c = lv.get(*n).unwrap_or_else(|| panic!("no accesses to {n}"));
            assert_eq!(c.tile, c.total(), "{n}: {c:?}");
        }
        let _ = HierarchyLevel::TileLocal;
    }
}
