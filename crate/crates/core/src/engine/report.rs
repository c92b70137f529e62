//! Run reports: per-PE stall accounting, phase breakdowns and the summary
//! table row.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use super::dma::DmaRecord;
use super::EngineParams;
use crate::remap::MapRequest;
use crate::topology::{ClusterTopology, HierarchyLevel};

pub const REPORT_SCHEMA: &str = "das-sim-report/1";

/// Cycle accounting of one PE. Every cycle of the run lands in exactly one
/// of the five categories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeStats {
    pub pe: usize,
    pub cycles_total: u64,
    pub instr_issued: u64,
    pub lsu_stall: u64,
    pub raw_stall: u64,
    pub ins_stall: u64,
    pub wfi_stall: u64,
    /// Part of `wfi_stall` spent waiting for DMA.
    pub dma_wait: u64,
    /// Part of `instr_issued` spent in allocator calls.
    pub alloc_cycles: u64,
    pub loads: u64,
    pub stores: u64,
    pub macs: u64,
    pub alu_ops: u64,
    pub div_ops: u64,
    /// Cycle at which the PE retired its last op.
    pub finish_cycle: u64,
}

impl PeStats {
    pub fn accounted(&self) -> u64 {
        self.instr_issued + self.lsu_stall + self.raw_stall + self.ins_stall + self.wfi_stall
    }

    pub fn is_conserved(&self) -> bool {
        self.accounted() == self.cycles_total
    }

    pub fn ipc(&self) -> f64 {
        ratio(self.instr_issued, self.cycles_total)
    }
}

/// Summed PE-cycles per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub issued: u64,
    pub lsu: u64,
    pub raw: u64,
    pub ins: u64,
    pub wfi: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.issued + self.lsu + self.raw + self.ins + self.wfi
    }

    pub fn utilization(&self) -> f64 {
        ratio(self.issued, self.total())
    }

    pub fn fractions(&self) -> [f64; 5] {
        let t = self.total();
        [self.issued, self.lsu, self.raw, self.ins, self.wfi].map(|x| ratio(x, t))
    }

    pub fn add(&mut self, o: &Breakdown) {
        self.issued += o.issued;
        self.lsu += o.lsu;
        self.raw += o.raw;
        self.ins += o.ins;
        self.wfi += o.wfi;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub breakdown: Breakdown,
    /// PE-cycles divided by PE count: the phase's share of the wall clock.
    pub cycles: f64,
    pub utilization: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub tile: u64,
    pub subgroup: u64,
    pub group: u64,
    pub remote: u64,
}

impl LevelCounts {
    pub fn bump(&mut self, level: HierarchyLevel) {
        match level {
            HierarchyLevel::TileLocal => self.tile += 1,
            HierarchyLevel::SubGroupLocal => self.subgroup += 1,
            HierarchyLevel::GroupLocal => self.group += 1,
            HierarchyLevel::Remote => self.remote += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tile + self.subgroup + self.group + self.remote
    }

    pub fn local_fraction(&self) -> f64 {
        ratio(self.tile, self.total())
    }

    pub fn remote_fraction(&self) -> f64 {
        1.0 - self.local_fraction()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub loads: u64,
    pub stores: u64,
    pub macs: u64,
    pub alu: u64,
    pub div: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeapAction {
    Malloc,
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeapRecord {
    pub event: u32,
    pub pe: usize,
    pub cycle: u64,
    pub action: HeapAction,
    pub name: String,
    pub addr: u64,
    pub size: u64,
    pub map: MapRequest,
}

/// Published figures for a scenario, carried so reports can print them next
/// to simulated values. Never used in any computation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_utilization: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Describes what was run; filled in by the caller.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub kernel: String,
    pub scheme: String,
    pub workload: String,
    pub n_parallel: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema: String,
    pub meta: RunMeta,
    pub topology: ClusterTopology,
    pub params: EngineParams,
    pub cycles: u64,
    /// Mean IPC over all PEs, the utilization figure.
    pub ipc_mean: f64,
    pub totals: Breakdown,
    pub ops: OpCounts,
    pub accesses: LevelCounts,
    pub phases: Vec<PhaseReport>,
    pub heap_events: Vec<HeapRecord>,
    pub dma: Vec<DmaRecord>,
    pub alloc_cycles: u64,
    pub dma_wait: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_cycles: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    pub per_pe: Vec<PeStats>,
}

pub(crate) fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl SimReport {
    pub fn utilization(&self) -> f64 {
        self.ipc_mean
    }

    pub fn is_conserved(&self) -> bool {
        self.per_pe.iter().all(|p| p.is_conserved() && p.cycles_total == self.cycles)
            && self.totals.total() == self.cycles * self.per_pe.len() as u64
    }

    pub fn phase(&self, name: &str) -> Option<&PhaseReport> {
        self.phases.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn per_pe_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.per_pe {
            w.serialize(p)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn markdown_header() -> String {
        "| Mapping Scheme | Workload Dimension | #Parallel | Utilization | Speedup | Cycles |\n\
         |---|---|---|---|---|---|\n"
            .to_string()
    }

    pub fn markdown_row(&self) -> String {
        let speedup = self.speedup.map(|s| format!("{s:.2}x")).unwrap_or_else(|| "-".into());
        format!(
            "| {} | {} | {} | {:.2} | {} | {} |\n",
            self.meta.scheme, self.meta.workload, self.meta.n_parallel, self.ipc_mean, speedup, self.cycles
        )
    }

    pub fn markdown_table(reports: &[&SimReport]) -> String {
        let mut s = Self::markdown_header();
        for r in reports {
            s.push_str(&r.markdown_row());
        }
        s
    }

    /// Phase x category fractions, one line per phase.
    pub fn breakdown_csv(&self) -> String {
        let mut s = String::from("label,scheme,phase,cycles,issued,lsu,raw,ins,wfi\n");
        let mut rows: Vec<(&str, f64, Breakdown)> =
            self.phases.iter().map(|p| (p.name.as_str(), p.cycles, p.breakdown)).collect();
        rows.push(("total", self.cycles as f64, self.totals));
        for (name, cycles, b) in rows {
            let f = b.fractions();
            let _ = writeln!(
                s,
                "{},{},{},{:.1},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.meta.label, self.meta.scheme, name, cycles, f[0], f[1], f[2], f[3], f[4]
            );
        }
        s
    }

    pub fn summary_line(&self) -> String {
        let mut s = format!(
            "{} [{}]: {} cycles, IPC {:.3}, local {:.1}%",
            self.meta.label,
            self.meta.scheme,
            self.cycles,
            self.ipc_mean,
            100.0 * self.accesses.local_fraction()
        );
        if let Some(sp) = self.speedup {
            let _ = write!(s, ", speedup {sp:.2}x");
        }
        s
    }
}
