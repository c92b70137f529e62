//! L2 <-> L1 transfers through per-subgroup backends.
//!
//! A transfer is cut by the splitter (`segment_transfer`), and every word is
//! routed to the backend of the subgroup owning its destination bank. Each
//! backend moves `words_per_cycle` words per cycle and serves transfers in
//! start order. Because throughput is fixed, the finish time of a transfer is
//! known when it starts; `advance` only retires transfers whose time has come.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::alloc::Heap;
use crate::remap::{self, MapConfig};
use crate::topology::ClusterTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmaDirection {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmaParams {
    pub words_per_cycle: u32,
    /// Cycles before the first word of a transfer moves.
    pub l2_latency: u64,
}

impl Default for DmaParams {
    fn default() -> Self {
        DmaParams { words_per_cycle: 8, l2_latency: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DmaState {
    InFlight,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmaRecord {
    pub id: u32,
    pub name: String,
    pub dir: DmaDirection,
    pub l1_base: u64,
    pub bytes: u64,
    pub segments: usize,
    pub backends: usize,
    pub start_cycle: u64,
    pub done_cycle: u64,
}

#[derive(Clone, Debug)]
pub struct DmaTransfer {
    pub record: DmaRecord,
    pub segments: Vec<(Range<u64>, Range<u64>)>,
    pub state: DmaState,
}

#[derive(Clone, Debug)]
pub struct DmaEngine {
    params: DmaParams,
    backend_free: Vec<u64>,
    transfers: Vec<Option<DmaTransfer>>,
}

impl DmaEngine {
    pub fn new(topo: &ClusterTopology, params: DmaParams) -> Self {
        DmaEngine { params, backend_free: vec![0; topo.total_subgroups()], transfers: Vec::new() }
    }

    pub fn backends(&self) -> usize {
        self.backend_free.len()
    }

    /// Start transfer `id` on `l1` at cycle `now`; returns its finish cycle.
    pub fn start(
        &mut self,
        id: u32,
        name: &str,
        dir: DmaDirection,
        heap: &Heap,
        l1: Range<u64>,
        now: u64,
    ) -> Result<u64, String> {
        if self.params.words_per_cycle == 0 {
            return Err("DMA throughput must be nonzero".into());
        }
        let idx = id as usize;
        if let Some(Some(t)) = self.transfers.get(idx) {
            if t.state == DmaState::InFlight {
                return Err(format!("transfer {id} ({name}) started while still in flight"));
            }
        }
        let topo = heap.topology();
        let cfg: MapConfig = heap
            .allocation_at(l1.start)
            .filter(|c| l1.end <= c.end() && l1.start < l1.end)
            .ok_or_else(|| {
                format!("transfer {id} ({name}): [{:#x}, {:#x}) is not inside a live allocation", l1.start, l1.end)
            })?;
        let src = 0..l1.end - l1.start;
        let segments = remap::segment_transfer(topo, &cfg, src, l1.clone()).map_err(|e| format!("transfer {id} ({name}): {e}"))?;

        let wb = topo.word_bytes as u64;
        let mut words = vec![0u64; self.backend_free.len()];
        for (_, dst) in &segments {
            let mut a = dst.start - dst.start % wb;
            while a < dst.end {
                let bank = heap.resolve_bank(a).map_err(|e| format!("transfer {id} ({name}): {e}"))?;
                words[topo.subgroup_of_bank(bank)] += 1;
                a += wb;
            }
        }

        let first_word = now + self.params.l2_latency;
        let wpc = self.params.words_per_cycle as u64;
        let mut done = first_word;
        let mut backends = 0;
        for (sg, &w) in words.iter().enumerate() {
            if w == 0 {
                continue;
            }
            backends += 1;
            let begin = first_word.max(self.backend_free[sg]);
            let finish = begin + w.div_ceil(wpc);
            self.backend_free[sg] = finish;
            done = done.max(finish);
        }

        let record = DmaRecord {
            id,
            name: name.to_string(),
            dir,
            l1_base: l1.start,
            bytes: l1.end - l1.start,
            segments: segments.len(),
            backends,
            start_cycle: now,
            done_cycle: done,
        };
        if self.transfers.len() <= idx {
            self.transfers.resize(idx + 1, None);
        }
        self.transfers[idx] = Some(DmaTransfer { record, segments, state: DmaState::InFlight });
        Ok(done)
    }

    /// Retire every transfer finished by `now`; returns the retired ids.
    pub fn advance(&mut self, now: u64) -> Vec<u32> {
        let mut done = Vec::new();
        for t in self.transfers.iter_mut().flatten() {
            if t.state == DmaState::InFlight && t.record.done_cycle <= now {
                t.state = DmaState::Done;
                done.push(t.record.id);
            }
        }
        done
    }

    /// Cycle at which a waiter on `id` may continue.
    pub fn wait(&self, id: u32) -> Result<u64, String> {
        match self.transfers.get(id as usize) {
            Some(Some(t)) => Ok(t.record.done_cycle),
            _ => Err(format!("wait on unknown transfer {id}")),
        }
    }

    pub fn transfer(&self, id: u32) -> Option<&DmaTransfer> {
        self.transfers.get(id as usize).and_then(|t| t.as_ref())
    }

    pub fn records(&self) -> Vec<DmaRecord> {
        self.transfers.iter().flatten().map(|t| t.record.clone()).collect()
    }
}
