//! FlashAttention-2 style self-attention over key/value tiles.
//!
//! Each head runs on its own aligned group of tiles, and every tile owns a
//! contiguous slice of the query rows. Per key tile: `S' = Q K^T` in 4x4
//! windows, an online softmax per row that rescales `O`, then `O += S' V`.
//! `K_k` and `V_k` share one buffer; `V_k` is allocated in the space `K_k`
//! vacates and its transfer overlaps the softmax, while `K_{k+1}` streams
//! into the other buffer during the current tile.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionShape {
    pub seq: u64,
    pub head_dim: u64,
    /// Keys per tile.
    pub kv_tile: u64,
    /// Heads, all running concurrently.
    #[serde(default = "one")]
    pub heads: u64,
}

fn one() -> u64 {
    1
}

impl AttentionShape {
    pub fn label(&self) -> String {
        format!("S={} P={} Bc={} heads={}", self.seq, self.head_dim, self.kv_tile, self.heads)
    }

    fn tiles_per_head(&self, topo: &ClusterTopology) -> u64 {
        topo.total_tiles() as u64 / self.heads
    }

    fn rows_per_tile(&self, topo: &ClusterTopology) -> u64 {
        self.seq / self.tiles_per_head(topo)
    }

    fn check(&self, topo: &ClusterTopology) -> Result<(), KernelError> {
        let n_tiles = topo.total_tiles() as u64;
        if self.heads == 0 || !self.heads.is_power_of_two() || self.heads > n_tiles {
            return Err(shape(format!("heads ({}) must be a power of two up to {n_tiles}", self.heads)));
        }
        if self.head_dim == 0 || self.head_dim % 4 != 0 {
            return Err(shape(format!("head dimension {} must be a positive multiple of 4", self.head_dim)));
        }
        if self.kv_tile == 0 || self.kv_tile % 4 != 0 || self.seq % self.kv_tile != 0 {
            return Err(shape(format!("key tile {} must be a multiple of 4 dividing the sequence {}", self.kv_tile, self.seq)));
        }
        let tph = self.tiles_per_head(topo);
        if self.seq % tph != 0 || self.rows_per_tile(topo) % 4 != 0 || self.rows_per_tile(topo) == 0 {
            return Err(shape(format!(
                "sequence {} must give each of {tph} tiles per head a positive multiple of 4 rows; pad the sequence or run more heads concurrently",
                self.seq
            )));
        }
        Ok(())
    }

    fn softmax_row(&self) -> OpCounts {
        let (bc, p) = (self.kv_tile, self.head_dim);
        OpCounts { loads: 2 * bc + p + 2, stores: bc + p + 2, macs: 0, alu: 3 * bc + p + 3, div: bc + 1 }
    }

    pub(crate) fn expected(&self) -> OpCounts {
        let (s, p, bc, h) = (self.seq, self.head_dim, self.kv_tile, self.heads);
        let iters = s / bc;
        let mut c = OpCounts::default();
        let qk = window_counts(p, &Epilogue::ScaleStore(Affine { base: 0, rs: 0, cs: 0 }));
        let av = window_counts(bc, &Epilogue::Accumulate(Affine { base: 0, rs: 0, cs: 0 }));
        add_counts(&mut c, &qk, h * iters * (s / 4) * (bc / 4));
        add_counts(&mut c, &self.softmax_row(), h * iters * s);
        add_counts(&mut c, &av, h * iters * (s / 4) * (p / 4));
        add_counts(&mut c, &OpCounts { loads: 1 + p, stores: p, alu: p, div: 1, macs: 0 }, h * s);
        c
    }
}

// Softmax registers.
const M_NEW: Reg = Reg(0);
const M_OLD: Reg = Reg(1);
const L: Reg = Reg(2);
const SUM: Reg = Reg(3);
const CORR: Reg = Reg(4);
fn ring(i: u64) -> Reg {
    Reg(8 + (i % 6) as u8)
}

/// One softmax row: running max, exponentials written back in place, the
/// row statistics and the rescale of the row's output.
fn emit_softmax_row(p: &mut PeProgram, a: u64, o: u64, m: u64, l: u64, wb: u64, bc: u64, pd: u64, c0: u64, p0: u64) {
    let a_at = move |i: u64| (a + ((c0 + i) % bc) * wb) as u32;
    let o_at = move |i: u64| (o + ((p0 + i) % pd) * wb) as u32;

    p.extend_ops([PeOp::load(m as u32, M_OLD), PeOp::load(a_at(0), ring(0))]);
    p.push_loop(
        bc,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            if i + 1 < bc {
                out.push(PeOp::load(a_at(i + 1), ring(i + 1)));
            }
            out.push(PeOp::alu(M_NEW, M_NEW, ring(i)));
        }),
    );
    p.extend_ops([PeOp::alu(CORR, M_OLD, M_NEW), PeOp::div(CORR, CORR, Reg::NONE), PeOp::load(a_at(0), ring(0))]);
    // Exponentials are consumed three iterations after they are issued.
    p.push_loop(
        bc + 3,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            if i + 1 < bc {
                out.push(PeOp::load(a_at(i + 1), ring(i + 1)));
            }
            if i < bc {
                out.push(PeOp::alu(ring(i), ring(i), M_NEW));
                out.push(PeOp::div(ring(i), ring(i), Reg::NONE));
            }
            if i >= 3 {
                let j = i - 3;
                out.push(PeOp::alu(SUM, SUM, ring(j)));
                out.push(PeOp::store(a_at(j), ring(j)));
            }
        }),
    );
    p.extend_ops([
        PeOp::load(l as u32, L),
        PeOp::alu(L, L, CORR),
        PeOp::alu(L, L, SUM),
        PeOp::store(l as u32, L),
        PeOp::store(m as u32, M_NEW),
        PeOp::load(o_at(0), ring(0)),
    ]);
    p.push_loop(
        pd,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            if i + 1 < pd {
                out.push(PeOp::load(o_at(i + 1), ring(i + 1)));
            }
            out.push(PeOp::alu(ring(i), ring(i), CORR));
            out.push(PeOp::store(o_at(i), ring(i)));
        }),
    );
}

fn emit_normalize_row(p: &mut PeProgram, o: u64, l: u64, wb: u64, pd: u64, p0: u64) {
    let o_at = move |i: u64| (o + ((p0 + i) % pd) * wb) as u32;
    p.extend_ops([PeOp::load(l as u32, L), PeOp::div(CORR, L, Reg::NONE), PeOp::load(o_at(0), ring(0))]);
    p.push_loop(
        pd,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            if i + 1 < pd {
                out.push(PeOp::load(o_at(i + 1), ring(i + 1)));
            }
            out.push(PeOp::alu(ring(i), ring(i), CORR));
            out.push(PeOp::store(o_at(i), ring(i)));
        }),
    );
}

/// Windows of a tile owned by PE `q`, starting at a tile-dependent offset.
fn my_windows(n_windows: u64, ppt: u64, q: u64, tile: usize) -> Vec<u64> {
    let mine: Vec<u64> = (q..n_windows).step_by(ppt as usize).collect();
    if mine.is_empty() {
        return mine;
    }
    let rot = tile % mine.len();
    mine[rot..].iter().chain(&mine[..rot]).copied().collect()
}

/// Allocate, load, run and write back one attention layer. `phase` folds
/// every step into a single phase; otherwise each step gets its own.
pub(crate) fn emit_attention(bld: &mut PlanBuilder, s: &AttentionShape, phase: Option<&str>) -> Result<(), KernelError> {
    s.check(&bld.topo)?;
    let topo = bld.topo.clone();
    let ph = |bld: &mut PlanBuilder, name: &str| bld.phase(phase.unwrap_or(name));
    let wb = bld.wb();
    let ppt = topo.pes_per_tile as u64;
    let (pd, bc) = (s.head_dim, s.kv_tile);
    let rows = s.rows_per_tile(&topo);
    let tph = s.tiles_per_head(&topo) as usize;
    let iters = s.seq / bc;

    ph(bld, "setup");
    let q = bld.tile_chunks("Q", rows * pd)?;
    let o = bld.tile_chunks("O", rows * pd)?;
    let a = bld.tile_chunks("S", rows * bc)?;
    let st = bld.tile_chunks("stats", 2 * rows)?;
    let kv: [GroupUnits; 2] = [bld.group_units("KV0", tph, s.heads, bc * pd)?, bld.group_units("KV1", tph, s.heads, bc * pd)?];
    let kv_bytes = kv[0].bytes();
    let kv_req = bld.last_map();
    let q_in = bld.dma_start("Q", DmaDirection::In, q.base, q.bytes(&topo));
    let mut k_dma = bld.dma_start("K0", DmaDirection::In, kv[0].base, kv_bytes);
    bld.dma_wait(q_in);
    bld.barrier();

    let head_of = |tile: usize| tile / tph;
    let n_qk = (rows / 4) * (bc / 4);
    let n_av = (rows / 4) * (pd / 4);

    for k in 0..iters {
        let buf = kv[(k % 2) as usize];
        let other = kv[((k + 1) % 2) as usize];
        bld.dma_wait(k_dma);
        let mut next_k = None;
        if k + 1 < iters {
            if k >= 1 {
                bld.free(&format!("V{}", k - 1), other.base)?;
                reuse(bld, &format!("K{}", k + 1), other.base, kv_bytes, kv_req)?;
            }
            next_k = Some(bld.dma_start(&format!("K{}", k + 1), DmaDirection::In, other.base, kv_bytes));
        }
        bld.barrier();

        ph(bld, "qk");
        for pe in 0..topo.total_pes() {
            let tile = topo.tile_of_pe(pe);
            let qi = (pe % topo.pes_per_tile) as u64;
            let k0 = stagger(&topo, pe, pd);
            for w in my_windows(n_qk, ppt, qi, tile) {
                let (rb, cb) = (w / (bc / 4), w % (bc / 4));
                let av = Affine::row_major(q.at(tile, rb * 4 * pd), pd, wb);
                let bv = Affine { base: buf.at(head_of(tile), cb * 4 * pd), rs: wb, cs: pd * wb };
                let dst = Affine::row_major(a.at(tile, rb * 4 * bc + cb * 4), bc, wb);
                emit_window(&mut bld.programs[pe], av, bv, pd, k0, Epilogue::ScaleStore(dst));
            }
        }
        bld.barrier();

        ph(bld, "softmax");
        bld.free(&format!("K{k}"), buf.base)?;
        reuse(bld, &format!("V{k}"), buf.base, kv_bytes, kv_req)?;
        let v_dma = bld.dma_start(&format!("V{k}"), DmaDirection::In, buf.base, kv_bytes);
        for pe in 0..topo.total_pes() {
            let tile = topo.tile_of_pe(pe);
            let qi = (pe % topo.pes_per_tile) as u64;
            let (c0, p0) = (stagger(&topo, pe, bc), stagger(&topo, pe, pd));
            for r in (qi..rows).step_by(ppt as usize) {
                emit_softmax_row(
                    &mut bld.programs[pe],
                    a.at(tile, r * bc),
                    o.at(tile, r * pd),
                    st.at(tile, r),
                    st.at(tile, rows + r),
                    wb,
                    bc,
                    pd,
                    c0,
                    p0,
                );
            }
        }
        bld.dma_wait(v_dma);
        bld.barrier();

        ph(bld, "av");
        for pe in 0..topo.total_pes() {
            let tile = topo.tile_of_pe(pe);
            let qi = (pe % topo.pes_per_tile) as u64;
            let k0 = stagger(&topo, pe, bc);
            for w in my_windows(n_av, ppt, qi, tile) {
                let (rb, pb) = (w / (pd / 4), w % (pd / 4));
                let av = Affine::row_major(a.at(tile, rb * 4 * bc), bc, wb);
                let bv = Affine { base: buf.at(head_of(tile), pb * 4), rs: pd * wb, cs: wb };
                let dst = Affine::row_major(o.at(tile, rb * 4 * pd + pb * 4), pd, wb);
                emit_window(&mut bld.programs[pe], av, bv, bc, k0, Epilogue::Accumulate(dst));
            }
        }
        bld.barrier();
        if let Some(d) = next_k {
            k_dma = d;
        }
    }

    ph(bld, "normalize");
    for pe in 0..topo.total_pes() {
        let tile = topo.tile_of_pe(pe);
        let qi = (pe % topo.pes_per_tile) as u64;
        let p0 = stagger(&topo, pe, pd);
        for r in (qi..rows).step_by(ppt as usize) {
            emit_normalize_row(&mut bld.programs[pe], o.at(tile, r * pd), st.at(tile, rows + r), wb, pd, p0);
        }
    }
    bld.barrier();

    ph(bld, "teardown");
    let out = bld.dma_start("O", DmaDirection::Out, o.base, o.bytes(&topo));
    bld.dma_wait(out);
    bld.free(&format!("V{}", iters - 1), kv[((iters - 1) % 2) as usize].base)?;
    if iters >= 2 {
        bld.free(&format!("V{}", iters - 2), kv[(iters % 2) as usize].base)?;
    } else {
        bld.free("KV1", kv[1].base)?;
    }
    for (name, r) in [("stats", st), ("S", a), ("O", o), ("Q", q)] {
        bld.free(name, r.base)?;
    }
    bld.barrier();
    Ok(())
}

/// Allocate `bytes` and insist on landing at `addr`.
fn reuse(bld: &mut PlanBuilder, name: &str, addr: u64, bytes: u64, req: MapRequest) -> Result<(), KernelError> {
    let sharing = if matches!(req, MapRequest::Interleaved) { Sharing::Shared } else { Sharing::PerGroup };
    let got = bld.alloc(name, bytes, req, sharing)?;
    if got != addr {
        return Err(shape(format!("{name} landed at {got:#x} instead of reusing {addr:#x}")));
    }
    Ok(())
}

pub fn gen_flash_attention(
    topo: &ClusterTopology,
    scheme: Scheme,
    s: &AttentionShape,
    heap: Option<(u64, u64)>,
) -> Result<KernelPlan, KernelError> {
    s.check(topo)?;
    let mut bld = PlanBuilder::new(topo, scheme, heap)?;
    emit_attention(&mut bld, s, None)?;
    bld.finish("attention", s.label(), s.heads, s.expected())
}
