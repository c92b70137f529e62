//! `c = A b` with `A` of `m x n`.
//!
//! Each PE owns whole 4-row blocks of `A`. When there are fewer row blocks
//! than PEs per problem, the columns are split `g` ways as well, and the `g`
//! partial results of a block are summed by a tree over neighbouring PEs.
//! Under DAS the row blocks and output segments of a PE sit in its tile's
//! banks; `b` stays interleaved.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemvShape {
    pub m: u64,
    pub n: u64,
    #[serde(default = "one")]
    pub n_parallel: u64,
}

fn one() -> u64 {
    1
}

impl GemvShape {
    pub fn label(&self) -> String {
        format!("{}x{}", self.m, self.n)
    }
}

/// How one problem is spread over its PEs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GemvSplit {
    pub pes_per_problem: u64,
    pub blocks_per_pe: u64,
    /// Column split factor.
    pub g: u64,
    pub cols: u64,
}

pub(crate) fn split(topo: &ClusterTopology, s: &GemvShape) -> Result<GemvSplit, KernelError> {
    let n_pe = topo.total_pes() as u64;
    if s.m == 0 || s.n == 0 || s.m % 4 != 0 {
        return Err(shape(format!("GEMV rows must be a positive multiple of 4, got {}", s.m)));
    }
    if s.n_parallel == 0 || !s.n_parallel.is_power_of_two() || s.n_parallel > n_pe {
        return Err(shape(format!("parallel count {} must be a power of two up to {n_pe}", s.n_parallel)));
    }
    let ppp = n_pe / s.n_parallel;
    let blocks = s.m / 4;
    let (blocks_per_pe, g) = if blocks >= ppp {
        if blocks % ppp != 0 {
            return Err(shape(format!("{blocks} row blocks do not divide over {ppp} PEs; use a multiple of {}", 4 * ppp)));
        }
        (blocks / ppp, 1)
    } else {
        if ppp % blocks != 0 {
            return Err(shape(format!("{ppp} PEs per problem are not a multiple of {blocks} row blocks")));
        }
        (1, ppp / blocks)
    };
    if s.n % g != 0 {
        return Err(shape(format!("{} columns do not split {g} ways", s.n)));
    }
    Ok(GemvSplit { pes_per_problem: ppp, blocks_per_pe, g, cols: s.n / g })
}

pub(crate) fn expected(s: &GemvShape, sp: &GemvSplit) -> OpCounts {
    let blocks = s.m / 4;
    let red = 4 * (sp.g - 1) * blocks;
    OpCounts {
        loads: s.n_parallel * (s.m * s.n + blocks * s.n + red),
        stores: s.n_parallel * (s.m + red),
        macs: s.n_parallel * s.m * s.n,
        alu: s.n_parallel * red,
        div: 0,
    }
}

/// Four rows against one `b` panel: per column one `b` load, four `A`
/// loads, then four MACs.
fn emit_block(p: &mut PeProgram, a: Affine, b: Affine, cols: u64, j0: u64) {
    p.push_loop(
        cols,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            let j = (j0 + i) % cols;
            out.push(PeOp::load(b.at(0, j), b_reg(0, 0)));
            for r in 0..4 {
                out.push(PeOp::load(a.at(r, j), a_reg(0, r)));
            }
            for r in 0..4 {
                out.push(PeOp::mac(acc(r, 0), a_reg(0, r), b_reg(0, 0)));
            }
        }),
    );
}

pub fn gen_gemv(
    topo: &ClusterTopology,
    scheme: Scheme,
    s: &GemvShape,
    heap: Option<(u64, u64)>,
) -> Result<KernelPlan, KernelError> {
    let sp = split(topo, s)?;
    let mut bld = PlanBuilder::new(topo, scheme, heap)?;
    let ppt = topo.pes_per_tile as u64;
    let n_pe = topo.total_pes();
    let wb = bld.wb();
    let pe_a = sp.blocks_per_pe * 4 * sp.cols;
    let pe_c = sp.blocks_per_pe * 4;

    bld.phase("setup");
    let a = bld.tile_chunks("A", ppt * pe_a)?;
    let c = bld.tile_chunks("c", ppt * pe_c)?;
    let part = if sp.g > 1 { Some(bld.tile_chunks("partial", ppt * 4)?) } else { None };
    let b = bld.shared("b", s.n_parallel * s.n)?;
    bld.barrier();

    bld.phase("compute");
    for pe in 0..n_pe {
        let tile = topo.tile_of_pe(pe);
        let q = (pe % topo.pes_per_tile) as u64;
        let prob = pe as u64 / sp.pes_per_problem;
        let g = pe as u64 % sp.g;
        let j0 = stagger(topo, pe, sp.cols);
        let b_row = Affine { base: b + (prob * s.n + g * sp.cols) * wb, rs: 0, cs: wb };
        for blk in 0..sp.blocks_per_pe {
            let a_blk = Affine::row_major(a.at(tile, q * pe_a + blk * 4 * sp.cols), sp.cols, wb);
            let prog = &mut bld.programs[pe];
            emit_block(prog, a_blk, b_row, sp.cols, j0);
            if sp.g == 1 {
                let dst = c.at(tile, q * pe_c + blk * 4);
                prog.extend_ops((0..4).map(|r| PeOp::store((dst + r * wb) as u32, acc(r, 0))));
            }
        }
    }

    if let Some(part) = part {
        bld.phase("reduce");
        let mut stride = 1;
        while stride < sp.g {
            for pe in 0..n_pe {
                let g = pe as u64 % sp.g;
                if g % (2 * stride) == stride {
                    let dst = part.at(topo.tile_of_pe(pe), (pe % topo.pes_per_tile) as u64 * 4);
                    bld.programs[pe].extend_ops((0..4).map(|r| PeOp::store((dst + r * wb) as u32, acc(r, 0))));
                }
            }
            bld.barrier();
            for pe in 0..n_pe {
                let g = pe as u64 % sp.g;
                if g % (2 * stride) == 0 {
                    let src_pe = pe + stride as usize;
                    let src = part.at(topo.tile_of_pe(src_pe), (src_pe % topo.pes_per_tile) as u64 * 4);
                    let prog = &mut bld.programs[pe];
                    prog.extend_ops((0..4).map(|r| PeOp::load((src + r * wb) as u32, tmp(r))));
                    prog.extend_ops((0..4).map(|r| PeOp::alu(acc(r, 0), acc(r, 0), tmp(r))));
                }
            }
            stride *= 2;
        }
        for pe in (0..n_pe).step_by(sp.g as usize) {
            let dst = c.at(topo.tile_of_pe(pe), (pe % topo.pes_per_tile) as u64 * pe_c);
            bld.programs[pe].extend_ops((0..4).map(|r| PeOp::store((dst + r * wb) as u32, acc(r, 0))));
        }
    }

    bld.barrier();
    bld.phase("teardown");
    bld.free("b", b)?;
    if let Some(part) = part {
        bld.free("partial", part.base)?;
    }
    bld.free("c", c.base)?;
    bld.free("A", a.base)?;
    let exp = expected(s, &sp);
    bld.finish("gemv", s.label(), s.n_parallel, exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::test_util::*;

    #[test]
    fn split_rules() {
        let tp = ClusterTopology::terapool_default();
        let sp = split(&tp, &GemvShape { m: 32, n: 16384, n_parallel: 1 }).unwrap();
        assert_eq!((sp.g, sp.cols, sp.blocks_per_pe), (128, 128, 1));
        let sp = split(&tp, &GemvShape { m: 64, n: 512, n_parallel: 16 }).unwrap();
        assert_eq!((sp.pes_per_problem, sp.g, sp.cols), (64, 4, 128));
        let sp = split(&tp, &GemvShape { m: 8192, n: 64, n_parallel: 1 }).unwrap();
        assert_eq!((sp.g, sp.blocks_per_pe), (1, 2));
        assert!(split(&tp, &GemvShape { m: 30, n: 64, n_parallel: 1 }).is_err());
        assert!(split(&tp, &GemvShape { m: 32, n: 64, n_parallel: 3 }).is_err());
    }

    #[test]
    fn counts_symmetry_and_locality() {
        let topo = ClusterTopology::desk_default();
        for s in [
            GemvShape { m: 32, n: 256, n_parallel: 1 },
            GemvShape { m: 512, n: 32, n_parallel: 1 },
            GemvShape { m: 16, n: 64, n_parallel: 4 },
        ] {
            let das = gen_gemv(&topo, Scheme::Das, &s, None).unwrap();
            let il = gen_gemv(&topo, Scheme::Interleaved, &s, None).unwrap();
            assert_eq!(das.expected.macs, s.m * s.n * s.n_parallel);
            assert_symmetric(&das, &il);
            assert_all_local(&topo, &das, &["A", "c"]);
            let lv = il.access_levels(&topo);
            assert!(local_fraction(&lv, "A") < 0.2);
        }
    }

    #[test]
    fn runs_and_das_is_faster() {
        let topo = ClusterTopology::desk_default();
        let s = GemvShape { m: 64, n: 256, n_parallel: 1 };
        let mut cyc = Vec::new();
        for sch in Scheme::BOTH {
            let plan = gen_gemv(&topo, sch, &s, None).unwrap();
            let params = crate::engine::EngineParams { port_interval: 2, ..Default::default() };
            let rep = crate::engine::run(&topo, plan.initial_heap(&topo), &plan.work, &params, Default::default()).unwrap();
            assert!(rep.is_conserved());
            assert_eq!(rep.ops, plan.expected);
            cyc.push(rep.cycles);
        }
        assert!(cyc[0] < cyc[1], "{cyc:?}");
    }
}
