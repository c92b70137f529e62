//! Cluster geometry and the PE-to-bank latency hierarchy.
//!
//! Tiles are numbered contiguously; a subgroup is `tiles_per_subgroup`
//! consecutive tiles and a group is `subgroups_per_group` consecutive
//! subgroups. Banks and PEs are numbered tile-major.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::TopologyError;

/// Position of a bank relative to the requesting PE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HierarchyLevel {
    TileLocal,
    SubGroupLocal,
    GroupLocal,
    Remote,
}

impl HierarchyLevel {
    pub const ALL: [HierarchyLevel; 4] = [
        HierarchyLevel::TileLocal,
        HierarchyLevel::SubGroupLocal,
        HierarchyLevel::GroupLocal,
        HierarchyLevel::Remote,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for HierarchyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            HierarchyLevel::TileLocal => "tile",
            HierarchyLevel::SubGroupLocal => "subgroup",
            HierarchyLevel::GroupLocal => "group",
            HierarchyLevel::Remote => "remote",
        };
        f.write_str(name)
    }
}

/// Contention-free load-use latency per hierarchy level, in cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelLatency {
    pub tile_local: u32,
    pub subgroup_local: u32,
    pub group_local: u32,
    pub remote: u32,
}

impl LevelLatency {
    pub fn get(&self, level: HierarchyLevel) -> u32 {
        match level {
            HierarchyLevel::TileLocal => self.tile_local,
            HierarchyLevel::SubGroupLocal => self.subgroup_local,
            HierarchyLevel::GroupLocal => self.group_local,
            HierarchyLevel::Remote => self.remote,
        }
    }
}

impl Default for LevelLatency {
    fn default() -> Self {
        LevelLatency {
            tile_local: 1,
            subgroup_local: 3,
            group_local: 5,
            remote: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTopology {
    pub pes_per_tile: usize,
    pub banks_per_tile: usize,
    pub tiles_per_subgroup: usize,
    pub subgroups_per_group: usize,
    pub groups: usize,
    pub rows_per_bank: usize,
    pub word_bytes: usize,
    pub level_latency: LevelLatency,
}

impl ClusterTopology {
    /// The 1024-PE, 4 MiB, 4096-bank cluster.
    pub fn terapool_default() -> Self {
        ClusterTopology {
            pes_per_tile: 8,
            banks_per_tile: 32,
            tiles_per_subgroup: 8,
            subgroups_per_group: 4,
            groups: 4,
            rows_per_bank: 256,
            word_bytes: 4,
            level_latency: LevelLatency::default(),
        }
    }

    /// Reduced cluster used for quick experiments: 16 tiles of 4 PEs and
    /// 16 banks each, 256 KiB of L1.
    pub fn desk_default() -> Self {
        ClusterTopology {
            pes_per_tile: 4,
            banks_per_tile: 16,
            tiles_per_subgroup: 4,
            subgroups_per_group: 2,
            groups: 2,
            rows_per_bank: 256,
            word_bytes: 4,
            level_latency: LevelLatency::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let counts = [
            ("pes_per_tile", self.pes_per_tile),
            ("banks_per_tile", self.banks_per_tile),
            ("tiles_per_subgroup", self.tiles_per_subgroup),
            ("subgroups_per_group", self.subgroups_per_group),
            ("groups", self.groups),
            ("rows_per_bank", self.rows_per_bank),
            ("word_bytes", self.word_bytes),
        ];
        for (name, value) in counts {
            if value == 0 || !value.is_power_of_two() {
                return Err(TopologyError::NotPowerOfTwo { field: name, value });
            }
        }
        let l = &self.level_latency;
        if !(l.tile_local >= 1
            && l.tile_local < l.subgroup_local
            && l.subgroup_local < l.group_local
            && l.group_local < l.remote)
        {
            return Err(TopologyError::LatencyOrder);
        }
        let bits = self.byte_offset_bits() + self.bank_bits() + self.row_bits();
        if bits > 32 {
            return Err(TopologyError::AddressTooWide { bits });
        }
        Ok(())
    }

    pub fn total_tiles(&self) -> usize {
        self.tiles_per_subgroup * self.subgroups_per_group * self.groups
    }

    pub fn total_subgroups(&self) -> usize {
        self.subgroups_per_group * self.groups
    }

    pub fn total_pes(&self) -> usize {
        self.pes_per_tile * self.total_tiles()
    }

    pub fn total_banks(&self) -> usize {
        self.banks_per_tile * self.total_tiles()
    }

    pub fn total_words(&self) -> usize {
        self.total_banks() * self.rows_per_bank
    }

    pub fn total_bytes(&self) -> usize {
        self.total_words() * self.word_bytes
    }

    /// Bank-index width `b`.
    pub fn bank_bits(&self) -> u32 {
        self.total_banks().trailing_zeros()
    }

    /// Row-index width `r`.
    pub fn row_bits(&self) -> u32 {
        self.rows_per_bank.trailing_zeros()
    }

    pub fn byte_offset_bits(&self) -> u32 {
        self.word_bytes.trailing_zeros()
    }

    pub fn tile_bank_bits(&self) -> u32 {
        self.banks_per_tile.trailing_zeros()
    }

    /// Width of a byte address spanning the whole L1.
    pub fn address_bits(&self) -> u32 {
        self.byte_offset_bits() + self.bank_bits() + self.row_bits()
    }

    /// Bytes in one L1 line (one row across every bank).
    pub fn line_bytes(&self) -> usize {
        self.total_banks() * self.word_bytes
    }

    pub fn banks_per_subgroup(&self) -> usize {
        self.banks_per_tile * self.tiles_per_subgroup
    }

    pub fn banks_per_group(&self) -> usize {
        self.banks_per_subgroup() * self.subgroups_per_group
    }

    pub fn tile_of_pe(&self, pe: usize) -> usize {
        pe / self.pes_per_tile
    }

    pub fn tile_of_bank(&self, bank: usize) -> usize {
        bank / self.banks_per_tile
    }

    pub fn subgroup_of_tile(&self, tile: usize) -> usize {
        tile / self.tiles_per_subgroup
    }

    pub fn group_of_tile(&self, tile: usize) -> usize {
        tile / (self.tiles_per_subgroup * self.subgroups_per_group)
    }

    pub fn subgroup_of_bank(&self, bank: usize) -> usize {
        self.subgroup_of_tile(self.tile_of_bank(bank))
    }

    /// Classification between two tiles, unchecked.
    pub fn tile_level(&self, from_tile: usize, to_tile: usize) -> HierarchyLevel {
        if from_tile == to_tile {
            HierarchyLevel::TileLocal
        } else if self.subgroup_of_tile(from_tile) == self.subgroup_of_tile(to_tile) {
            HierarchyLevel::SubGroupLocal
        } else if self.group_of_tile(from_tile) == self.group_of_tile(to_tile) {
            HierarchyLevel::GroupLocal
        } else {
            HierarchyLevel::Remote
        }
    }

    pub fn access_level(&self, pe_id: usize, bank_id: usize) -> Result<HierarchyLevel, TopologyError> {
        if pe_id >= self.total_pes() {
            return Err(TopologyError::PeOutOfRange { pe: pe_id, total: self.total_pes() });
        }
        if bank_id >= self.total_banks() {
            return Err(TopologyError::BankOutOfRange { bank: bank_id, total: self.total_banks() });
        }
        Ok(self.tile_level(self.tile_of_pe(pe_id), self.tile_of_bank(bank_id)))
    }

    pub fn latency(&self, level: HierarchyLevel) -> u32 {
        self.level_latency.get(level)
    }

    /// Fraction of banks a PE reaches without leaving its tile.
    pub fn local_fraction(&self) -> f64 {
        self.banks_per_tile as f64 / self.total_banks() as f64
    }
}

impl Default for ClusterTopology {
    fn default() -> Self {
        Self::terapool_default()
    }
}
