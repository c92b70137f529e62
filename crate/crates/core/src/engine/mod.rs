//! Cycle-approximate execution of per-PE op streams on the banked L1.
//!
//! Each cycle runs four steps in order:
//! 1. requests whose network delay expires this cycle join their bank queue;
//! 2. PEs issue in id order, at most one op each;
//! 3. every (tile, level) boundary port grants up to `port_slots` queued
//!    requests every `port_interval` cycles;
//! 4. every bank serves the head of its FIFO.
//!
//! A request at level latency `L` spends `d = (L - 1) / 2` cycles reaching
//! the bank and `L - d` cycles from service to the result being usable, so an
//! uncontended access costs exactly `L`.

pub mod dma;
pub mod op;
pub mod report;

use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use crate::alloc::Heap;
use crate::error::SimFault;
use crate::remap::{self, MapKind, MapRequest};
use crate::topology::{ClusterTopology, HierarchyLevel};

pub use dma::{DmaDirection, DmaEngine, DmaParams, DmaRecord};
pub use op::{ComputeClass, Cursor, LoopBody, OpKind, PeOp, PeProgram, Reg, Segment};
pub use report::{
    Breakdown, HeapAction, HeapRecord, LevelCounts, OpCounts, PeStats, PhaseReport, Reference, RunMeta, SimReport,
    REPORT_SCHEMA,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    /// Memory ops a PE may have outstanding (loads and unacknowledged stores).
    pub window: u32,
    pub mac_latency: u32,
    pub alu_latency: u32,
    pub div_latency: u32,
    /// Requests each tile may send across one hierarchy boundary per grant.
    pub port_slots: u32,
    /// Cycles between grants of a boundary port.
    pub port_interval: u32,
    /// Cycles a PE spends in one allocator call including the CSR write.
    pub malloc_cost: u64,
    pub dma: DmaParams,
    pub max_cycles: u64,
    /// Fault on any access outside a live allocation.
    pub check_live: bool,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            window: 4,
            mac_latency: 4,
            alu_latency: 1,
            div_latency: 12,
            port_slots: 1,
            port_interval: 1,
            malloc_cost: 64,
            dma: DmaParams::default(),
            max_cycles: 2_000_000_000,
            check_live: true,
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.window == 0 {
            return Err("window must be at least 1".into());
        }
        if self.mac_latency == 0 || self.alu_latency == 0 || self.div_latency == 0 {
            return Err("compute latencies must be at least 1".into());
        }
        if self.port_slots == 0 || self.port_interval == 0 {
            return Err("port_slots and port_interval must be at least 1".into());
        }
        if self.dma.words_per_cycle == 0 {
            return Err("dma.words_per_cycle must be at least 1".into());
        }
        Ok(())
    }

    pub fn compute_latency(&self, class: ComputeClass) -> u32 {
        match class {
            ComputeClass::Mac => self.mac_latency,
            ComputeClass::Alu => self.alu_latency,
            ComputeClass::Div => self.div_latency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeapEvent {
    Malloc { name: String, size: u64, req: MapRequest, expect_addr: u64 },
    Free { name: String, addr: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmaTransferSpec {
    pub name: String,
    pub dir: DmaDirection,
    pub addr: u64,
    pub bytes: u64,
}

/// Everything the engine executes: one program per PE plus the heap events,
/// DMA transfers and phase names they refer to by index.
#[derive(Clone, Debug, Default)]
pub struct Workload {
    pub programs: Vec<PeProgram>,
    pub heap_events: Vec<HeapEvent>,
    pub dma: Vec<DmaTransferSpec>,
    pub phases: Vec<String>,
}

/// One served memory request, recorded when tracing is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessTrace {
    pub pe: usize,
    /// Index of the op in the PE's stream.
    pub op: u64,
    pub is_load: bool,
    pub bank: usize,
    pub level: HierarchyLevel,
    pub issue: u64,
    /// Cycle from which the result (or the store acknowledgement) is usable.
    pub complete: u64,
}

const PENDING: u64 = u64::MAX;

#[derive(Clone, Copy, Debug)]
struct Req {
    pe: u32,
    bank: u32,
    dst: Reg,
    is_load: bool,
    rest: u8,
    level: HierarchyLevel,
    issue: u64,
    op: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PeState {
    Running,
    /// Inside an allocator call; counts as issued.
    Busy(u64),
    Wait { until: u64, dma: bool },
    Barrier(u32),
    Finished,
}

#[derive(Clone, Copy)]
enum Cat {
    Issued,
    Alloc,
    Lsu,
    Raw,
    Wfi,
    DmaWait,
}

struct PeCtx<'a> {
    cursor: Cursor<'a>,
    tile: usize,
    reg_ready: [u64; Reg::COUNT],
    /// Bit r set when r's pending value comes from a load.
    load_regs: u32,
    inflight: u32,
    acks: Vec<u64>,
    state: PeState,
    /// Start of the current blocked interval, charged lazily on wake-up.
    since: u64,
    phase: usize,
    stats: PeStats,
    op_index: u64,
}

impl PeCtx<'_> {
    fn outstanding(&mut self, now: u64) -> u32 {
        self.acks.retain(|&t| t > now);
        self.inflight + self.acks.len() as u32
    }
}

fn charge(stats: &mut PeStats, bd: &mut Breakdown, cat: Cat, n: u64) {
    if n == 0 {
        return;
    }
    match cat {
        Cat::Issued => {
            stats.instr_issued += n;
            bd.issued += n;
        }
        Cat::Alloc => {
            stats.instr_issued += n;
            stats.alloc_cycles += n;
            bd.issued += n;
        }
        Cat::Lsu => {
            stats.lsu_stall += n;
            bd.lsu += n;
        }
        Cat::Raw => {
            stats.raw_stall += n;
            bd.raw += n;
        }
        Cat::Wfi => {
            stats.wfi_stall += n;
            bd.wfi += n;
        }
        Cat::DmaWait => {
            stats.wfi_stall += n;
            stats.dma_wait += n;
            bd.wfi += n;
        }
    }
}

enum Step {
    Stay,
    Block,
    Finish,
    Arrive { id: u32, participants: u32 },
}

struct Shared<'a> {
    topo: &'a ClusterTopology,
    params: &'a EngineParams,
    work: &'a Workload,
    heap: Heap,
    dma: DmaEngine,
    banks: Vec<VecDeque<Req>>,
    bank_active: Vec<u32>,
    bank_queued: Vec<bool>,
    ports: Vec<VecDeque<Req>>,
    port_active: Vec<u32>,
    port_queued: Vec<bool>,
    wheel: Vec<Vec<Req>>,
    in_network: u64,
    wake: BinaryHeap<Reverse<(u64, u32)>>,
    phase_bd: Vec<Breakdown>,
    accesses: LevelCounts,
    ops: OpCounts,
    heap_done: Vec<bool>,
    heap_records: Vec<HeapRecord>,
    /// (cycles to reach the bank, cycles from service to completion) per level.
    split: [(u64, u8); 4],
    trace: Option<Vec<AccessTrace>>,
}

impl Shared<'_> {
    fn push_bank(&mut self, req: Req) {
        let b = req.bank as usize;
        self.banks[b].push_back(req);
        if !self.bank_queued[b] {
            self.bank_queued[b] = true;
            self.bank_active.push(req.bank);
        }
    }

    fn push_port(&mut self, port: usize, req: Req) {
        self.ports[port].push_back(req);
        if !self.port_queued[port] {
            self.port_queued[port] = true;
            self.port_active.push(port as u32);
        }
    }

    fn bank_of(&self, pe: usize, op: u64, addr: u64) -> Result<usize, SimFault> {
        if self.params.check_live {
            let cfg = self.heap.allocation_at(addr).ok_or(SimFault::Unallocated { pe, op, addr })?;
            if cfg.kind == MapKind::Das {
                return Ok(remap::das_map_unchecked(self.topo, &cfg, addr).bank);
            }
            return remap::interleaved_map(self.topo, addr)
                .map(|l| l.bank)
                .map_err(|source| SimFault::Address { pe, op, source });
        }
        self.heap.resolve_bank(addr).map_err(|source| SimFault::Address { pe, op, source })
    }

    /// Try to issue the next op of PE `id` at cycle `t`.
    fn step(&mut self, id: usize, pe: &mut PeCtx<'_>, t: u64) -> Result<Step, SimFault> {
        let op = loop {
            match pe.cursor.peek() {
                Some(PeOp { kind: OpKind::Mark { phase }, .. }) => {
                    let phase = phase as usize;
                    if phase >= self.phase_bd.len() {
                        return Err(SimFault::Program(format!("PE {id}: phase {phase} is not declared")));
                    }
                    pe.phase = phase;
                    pe.cursor.advance();
                    pe.op_index += 1;
                }
                other => break other,
            }
        };
        let bd = &mut self.phase_bd[pe.phase];

        let Some(op) = op else {
            if pe.outstanding(t) > 0 {
                charge(&mut pe.stats, bd, Cat::Lsu, 1);
                return Ok(Step::Stay);
            }
            if pe.reg_ready.iter().any(|&r| r > t) {
                charge(&mut pe.stats, bd, Cat::Raw, 1);
                return Ok(Step::Stay);
            }
            pe.stats.finish_cycle = t;
            return Ok(Step::Finish);
        };

        // Register hazards: every source plus the destination (WAW).
        let mut hazard = None;
        for r in op.srcs.iter().chain(std::iter::once(&op.dst)) {
            if r.is_none() {
                continue;
            }
            let i = r.0 as usize;
            if i >= Reg::COUNT {
                return Err(SimFault::Program(format!("PE {id}: register r{i} out of range")));
            }
            if pe.reg_ready[i] > t {
                let from_load = pe.load_regs & (1 << i) != 0;
                if from_load {
                    hazard = Some(Cat::Lsu);
                    break;
                }
                hazard = Some(Cat::Raw);
            }
        }
        if let Some(cat) = hazard {
            charge(&mut pe.stats, bd, cat, 1);
            return Ok(Step::Stay);
        }

        let idx = pe.op_index;
        let outcome = match op.kind {
            OpKind::Load { addr } | OpKind::Store { addr } => {
                if pe.outstanding(t) >= self.params.window {
                    charge(&mut pe.stats, bd, Cat::Lsu, 1);
                    return Ok(Step::Stay);
                }
                let is_load = matches!(op.kind, OpKind::Load { .. });
                let bank = self.bank_of(id, idx, addr as u64)?;
                let level = self.topo.tile_level(pe.tile, self.topo.tile_of_bank(bank));
                let (d, rest) = self.split[level.index()];
                let req = Req { pe: id as u32, bank: bank as u32, dst: op.dst, is_load, rest, level, issue: t, op: idx };
                let bd = &mut self.phase_bd[pe.phase];
                charge(&mut pe.stats, bd, Cat::Issued, 1);
                self.accesses.bump(level);
                if is_load {
                    self.ops.loads += 1;
                    pe.stats.loads += 1;
                    if !op.dst.is_none() {
                        pe.reg_ready[op.dst.0 as usize] = PENDING;
                        pe.load_regs |= 1 << op.dst.0;
                    }
                } else {
                    self.ops.stores += 1;
                    pe.stats.stores += 1;
                }
                pe.inflight += 1;
                self.in_network += 1;
                if level == HierarchyLevel::TileLocal {
                    if d == 0 {
                        self.push_bank(req);
                    } else {
                        let w = self.wheel.len() as u64;
                        self.wheel[((t + d) % w) as usize].push(req);
                    }
                } else {
                    let port = pe.tile * 3 + level.index() - 1;
                    self.push_port(port, req);
                }
                Step::Stay
            }
            OpKind::Compute { class } => {
                charge(&mut pe.stats, bd, Cat::Issued, 1);
                match class {
                    ComputeClass::Mac => {
                        self.ops.macs += 1;
                        pe.stats.macs += 1;
                    }
                    ComputeClass::Alu => {
                        self.ops.alu += 1;
                        pe.stats.alu_ops += 1;
                    }
                    ComputeClass::Div => {
                        self.ops.div += 1;
                        pe.stats.div_ops += 1;
                    }
                }
                if !op.dst.is_none() {
                    pe.reg_ready[op.dst.0 as usize] = t + self.params.compute_latency(class) as u64;
                    pe.load_regs &= !(1 << op.dst.0);
                }
                Step::Stay
            }
            OpKind::Barrier { id: bid, participants } => {
                // A barrier is also a memory fence.
                if pe.outstanding(t) > 0 {
                    charge(&mut pe.stats, bd, Cat::Lsu, 1);
                    return Ok(Step::Stay);
                }
                charge(&mut pe.stats, bd, Cat::Issued, 1);
                pe.state = PeState::Barrier(bid);
                pe.since = t + 1;
                Step::Arrive { id: bid, participants }
            }
            OpKind::DmaStart { transfer } => {
                let spec = self
                    .work
                    .dma
                    .get(transfer as usize)
                    .ok_or_else(|| SimFault::Dma { pe: id, reason: format!("unknown transfer {transfer}") })?;
                self.dma
                    .start(transfer, &spec.name, spec.dir, &self.heap, spec.addr..spec.addr + spec.bytes, t)
                    .map_err(|reason| SimFault::Dma { pe: id, reason })?;
                charge(&mut pe.stats, &mut self.phase_bd[pe.phase], Cat::Issued, 1);
                Step::Stay
            }
            OpKind::DmaWait { transfer } => {
                let until = self.dma.wait(transfer).map_err(|reason| SimFault::Dma { pe: id, reason })?;
                charge(&mut pe.stats, bd, Cat::Issued, 1);
                if until > t + 1 {
                    pe.state = PeState::Wait { until, dma: true };
                    pe.since = t + 1;
                    self.wake.push(Reverse((until, id as u32)));
                    Step::Block
                } else {
                    Step::Stay
                }
            }
            OpKind::Heap { event } => {
                self.heap_event(id, event, t)?;
                let cost = match self.work.heap_events[event as usize] {
                    HeapEvent::Malloc { .. } => self.params.malloc_cost.max(1),
                    HeapEvent::Free { .. } => 1,
                };
                charge(&mut pe.stats, &mut self.phase_bd[pe.phase], Cat::Alloc, 1);
                if cost > 1 {
                    pe.state = PeState::Busy(t + cost);
                    pe.since = t + 1;
                    self.wake.push(Reverse((t + cost, id as u32)));
                    Step::Block
                } else {
                    Step::Stay
                }
            }
            OpKind::Mark { .. } => unreachable!("marks are consumed above"),
        };
        pe.cursor.advance();
        pe.op_index += 1;
        Ok(outcome)
    }

    fn heap_event(&mut self, pe: usize, event: u32, t: u64) -> Result<(), SimFault> {
        let fault = |reason: String| SimFault::Heap { pe, event, reason };
        let ev = self.work.heap_events.get(event as usize).ok_or_else(|| fault("unknown event".into()))?;
        let done = &mut self.heap_done[event as usize];
        if *done {
            return Err(fault("event executed twice".into()));
        }
        *done = true;
        let record = match ev {
            HeapEvent::Malloc { name, size, req, expect_addr } => {
                let addr = self.heap.das_malloc(*size, *req).map_err(|e| fault(format!("{name}: {e}")))?;
                if addr != *expect_addr {
                    return Err(fault(format!("{name}: allocator returned {addr:#x}, plan expected {expect_addr:#x}")));
                }
                let size = self.heap.allocation_at(addr).map(|c| c.size_bytes).unwrap_or(*size);
                HeapRecord { event, pe, cycle: t, action: HeapAction::Malloc, name: name.clone(), addr, size, map: *req }
            }
            HeapEvent::Free { name, addr } => {
                let cfg = self.heap.das_free(*addr).map_err(|e| fault(format!("{name}: {e}")))?;
                HeapRecord {
                    event,
                    pe,
                    cycle: t,
                    action: HeapAction::Free,
                    name: name.clone(),
                    addr: *addr,
                    size: cfg.size_bytes,
                    map: cfg.request(),
                }
            }
        };
        log::debug!("cycle {t}: {:?} {} at {:#x}", record.action, record.name, record.addr);
        self.heap_records.push(record);
        Ok(())
    }
}

/// Charge a blocked PE for the cycles in `[since, t)` and make it runnable.
fn wake_pe(pe: &mut PeCtx<'_>, phase_bd: &mut [Breakdown], t: u64) {
    let n = t.saturating_sub(pe.since);
    let cat = match pe.state {
        PeState::Busy(_) => Cat::Alloc,
        PeState::Wait { dma: true, .. } => Cat::DmaWait,
        _ => Cat::Wfi,
    };
    charge(&mut pe.stats, &mut phase_bd[pe.phase], cat, n);
    pe.state = PeState::Running;
    pe.since = t;
}

/// Simulate `work` from an initial heap state.
pub fn run(
    topo: &ClusterTopology,
    heap: Heap,
    work: &Workload,
    params: &EngineParams,
    meta: RunMeta,
) -> Result<SimReport, SimFault> {
    run_inner(topo, heap, work, params, meta, false).map(|(r, _)| r)
}

/// [`run`] that also returns every served memory request.
pub fn run_traced(
    topo: &ClusterTopology,
    heap: Heap,
    work: &Workload,
    params: &EngineParams,
    meta: RunMeta,
) -> Result<(SimReport, Vec<AccessTrace>), SimFault> {
    run_inner(topo, heap, work, params, meta, true)
}

fn run_inner(
    topo: &ClusterTopology,
    heap: Heap,
    work: &Workload,
    params: &EngineParams,
    meta: RunMeta,
    tracing: bool,
) -> Result<(SimReport, Vec<AccessTrace>), SimFault> {
    topo.validate().map_err(|e| SimFault::Program(e.to_string()))?;
    params.validate().map_err(SimFault::Program)?;
    let n = topo.total_pes();
    if work.programs.len() > n {
        return Err(SimFault::Program(format!("{} programs for {n} PEs", work.programs.len())));
    }
    if heap.topology() != topo {
        return Err(SimFault::Program("heap was built for a different topology".into()));
    }

    let mut split = [(0u64, 0u8); 4];
    for l in HierarchyLevel::ALL {
        let lat = topo.latency(l) as u64;
        let d = (lat - 1) / 2;
        split[l.index()] = (d, (lat - d) as u8);
    }
    let wheel_len = split.iter().map(|s| s.0).max().unwrap_or(0) as usize + 1;
    let n_phases = work.phases.len().max(1);

    let mut sh = Shared {
        topo,
        params,
        work,
        heap,
        dma: DmaEngine::new(topo, params.dma),
        banks: vec![VecDeque::new(); topo.total_banks()],
        bank_active: Vec::new(),
        bank_queued: vec![false; topo.total_banks()],
        ports: vec![VecDeque::new(); topo.total_tiles() * 3],
        port_active: Vec::new(),
        port_queued: vec![false; topo.total_tiles() * 3],
        wheel: vec![Vec::new(); wheel_len],
        in_network: 0,
        wake: BinaryHeap::new(),
        phase_bd: vec![Breakdown::default(); n_phases],
        accesses: LevelCounts::default(),
        ops: OpCounts::default(),
        heap_done: vec![false; work.heap_events.len()],
        heap_records: Vec::new(),
        split,
        trace: tracing.then(Vec::new),
    };

    let empty = PeProgram::new();
    let mut pes: Vec<PeCtx<'_>> = (0..n)
        .map(|i| PeCtx {
            cursor: work.programs.get(i).unwrap_or(&empty).cursor(),
            tile: topo.tile_of_pe(i),
            reg_ready: [0; Reg::COUNT],
            load_regs: 0,
            inflight: 0,
            acks: Vec::with_capacity(params.window as usize),
            state: PeState::Running,
            since: 0,
            phase: 0,
            stats: PeStats { pe: i, ..Default::default() },
            op_index: 0,
        })
        .collect();

    let mut barriers: HashMap<u32, (u32, Vec<u32>)> = HashMap::new();
    let mut running: Vec<u32> = (0..n as u32).collect();
    let mut next_running: Vec<u32> = Vec::with_capacity(n);
    let mut woken: Vec<u32> = Vec::new();
    let mut finished = 0usize;
    let mut t: u64 = 0;

    loop {
        if t >= params.max_cycles {
            return Err(SimFault::CycleLimit { limit: params.max_cycles });
        }

        // 1. network arrivals
        let w = sh.wheel.len();
        let slot = std::mem::take(&mut sh.wheel[(t % w as u64) as usize]);
        for req in &slot {
            sh.push_bank(*req);
        }
        let mut slot = slot;
        slot.clear();
        sh.wheel[(t % w as u64) as usize] = slot;

        // Wake blocked PEs whose time has come.
        woken.clear();
        while let Some(&Reverse((at, id))) = sh.wake.peek() {
            if at > t {
                break;
            }
            sh.wake.pop();
            let pe = &mut pes[id as usize];
            match pe.state {
                PeState::Busy(u) | PeState::Wait { until: u, .. } if u == at => {
                    wake_pe(pe, &mut sh.phase_bd, t);
                    woken.push(id);
                }
                _ => {}
            }
        }
        if !woken.is_empty() {
            woken.sort_unstable();
            let mut merged = Vec::with_capacity(running.len() + woken.len());
            let (mut i, mut j) = (0, 0);
            while i < running.len() || j < woken.len() {
                if j >= woken.len() || (i < running.len() && running[i] < woken[j]) {
                    merged.push(running[i]);
                    i += 1;
                } else {
                    merged.push(woken[j]);
                    j += 1;
                }
            }
            running = merged;
        }

        // 2. issue
        next_running.clear();
        for &id in &running {
            let i = id as usize;
            match sh.step(i, &mut pes[i], t)? {
                Step::Stay => next_running.push(id),
                Step::Block => {}
                Step::Finish => {
                    pes[i].state = PeState::Finished;
                    finished += 1;
                }
                Step::Arrive { id: bid, participants } => {
                    let entry = barriers.entry(bid).or_insert_with(|| (participants, Vec::new()));
                    if entry.0 != participants {
                        return Err(SimFault::Barrier {
                            pe: i,
                            id: bid,
                            reason: format!("participant count {participants} disagrees with {}", entry.0),
                        });
                    }
                    entry.1.push(id);
                    if entry.1.len() as u32 > participants {
                        return Err(SimFault::Barrier { pe: i, id: bid, reason: "too many arrivals".into() });
                    }
                    if entry.1.len() as u32 == participants {
                        let (_, waiting) = barriers.remove(&bid).expect("barrier entry");
                        for wid in waiting {
                            let pe = &mut pes[wid as usize];
                            pe.state = PeState::Wait { until: t + 1, dma: false };
                            sh.wake.push(Reverse((t + 1, wid)));
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut running, &mut next_running);

        // 3. boundary ports
        if !sh.port_active.is_empty() && t % params.port_interval as u64 == 0 {
            let active = std::mem::take(&mut sh.port_active);
            let mut keep = Vec::with_capacity(active.len());
            for p in active {
                let pi = p as usize;
                for _ in 0..params.port_slots {
                    let Some(req) = sh.ports[pi].pop_front() else { break };
                    let d = sh.split[req.level.index()].0;
                    let wl = sh.wheel.len() as u64;
                    sh.wheel[((t + d) % wl) as usize].push(req);
                }
                if sh.ports[pi].is_empty() {
                    sh.port_queued[pi] = false;
                } else {
                    keep.push(p);
                }
            }
            sh.port_active = keep;
        }

        // 4. banks
        if !sh.bank_active.is_empty() {
            let active = std::mem::take(&mut sh.bank_active);
            let mut keep = Vec::with_capacity(active.len());
            for b in active {
                let bi = b as usize;
                let req = sh.banks[bi].pop_front().expect("active bank has a request");
                let done = t + req.rest as u64;
                let pe = &mut pes[req.pe as usize];
                if req.is_load && !req.dst.is_none() {
                    pe.reg_ready[req.dst.0 as usize] = done;
                }
                pe.inflight -= 1;
                pe.acks.push(done);
                sh.in_network -= 1;
                if let Some(tr) = sh.trace.as_mut() {
                    tr.push(AccessTrace {
                        pe: req.pe as usize,
                        op: req.op,
                        is_load: req.is_load,
                        bank: bi,
                        level: req.level,
                        issue: req.issue,
                        complete: done,
                    });
                }
                if sh.banks[bi].is_empty() {
                    sh.bank_queued[bi] = false;
                } else {
                    keep.push(b);
                }
            }
            sh.bank_active = keep;
        }

        if finished == n {
            break;
        }
        t += 1;

        // Nothing can change until the next wake-up: jump there.
        if running.is_empty() && sh.in_network == 0 {
            match sh.wake.peek() {
                Some(&Reverse((at, _))) => t = t.max(at),
                None => return Err(SimFault::Deadlock { cycle: t }),
            }
        }
    }

    let total = pes.iter().map(|p| p.stats.finish_cycle).max().unwrap_or(0);
    sh.dma.advance(total);
    let mut per_pe = Vec::with_capacity(n);
    for pe in &mut pes {
        let tail = total - pe.stats.finish_cycle;
        charge(&mut pe.stats, &mut sh.phase_bd[pe.phase], Cat::Wfi, tail);
        pe.stats.cycles_total = total;
        debug_assert!(pe.stats.is_conserved(), "PE {} accounting off: {:?}", pe.stats.pe, pe.stats);
        per_pe.push(pe.stats);
    }

    let mut totals = Breakdown::default();
    for b in &sh.phase_bd {
        totals.add(b);
    }
    let names: Vec<String> = if work.phases.is_empty() { vec!["all".to_string()] } else { work.phases.clone() };
    let phases = names
        .into_iter()
        .zip(&sh.phase_bd)
        .map(|(name, b)| PhaseReport {
            name,
            breakdown: *b,
            cycles: b.total() as f64 / n as f64,
            utilization: b.utilization(),
        })
        .collect();
    let ipc_mean = if total == 0 { 0.0 } else { per_pe.iter().map(|p| p.ipc()).sum::<f64>() / n as f64 };

    let report = SimReport {
        schema: REPORT_SCHEMA.to_string(),
        meta,
        topology: topo.clone(),
        params: *params,
        cycles: total,
        ipc_mean,
        totals,
        ops: sh.ops,
        accesses: sh.accesses,
        phases,
        heap_events: sh.heap_records,
        dma: sh.dma.records(),
        alloc_cycles: per_pe.iter().map(|p| p.alloc_cycles).sum(),
        dma_wait: per_pe.iter().map(|p| p.dma_wait).sum(),
        speedup: None,
        baseline_cycles: None,
        reference: None,
        per_pe,
    };
    Ok((report, sh.trace.unwrap_or_default()))
}

/// Record `baseline.cycles / target.cycles` on `target`. Two empty runs
/// compare as 1.0.
pub fn attach_speedup(target: &mut SimReport, baseline: &SimReport) {
    let s = if target.cycles == 0 && baseline.cycles == 0 {
        1.0
    } else if target.cycles == 0 {
        f64::INFINITY
    } else {
        baseline.cycles as f64 / target.cycles as f64
    };
    target.speedup = Some(s);
    target.baseline_cycles = Some(baseline.cycles);
}

#[cfg(test)]
mod tests;
