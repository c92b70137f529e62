//! `C = A B` with `A` of `m x n` and `B` of `n x p`, in 4x4 output windows.
//!
//! Row blocks of 4 go round-robin to the tiles of a problem; the PEs of a
//! tile split the columns of `B`. When a problem has more tiles than row
//! blocks, the inner dimension is split over `g` tile groups and partial
//! windows are merged by a tree over groups. Under DAS, `A` and `C` chunks
//! live in the owning tile and each group's `B` panel in the group.

use serde::{Deserialize, Serialize};

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub p: u64,
    #[serde(default = "one")]
    pub n_parallel: u64,
}

fn one() -> u64 {
    1
}

impl GemmShape {
    pub fn label(&self) -> String {
        format!("{}x{}x{}", self.m, self.n, self.p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GemmGeom {
    pub m: u64,
    pub n: u64,
    pub p: u64,
    pub n_parallel: u64,
    pub tiles_per_problem: usize,
    /// Inner-dimension split factor.
    pub g: u64,
    pub tiles_per_group: usize,
    pub blocks_per_tile: u64,
    /// Inner length per group.
    pub kl: u64,
    pub windows_per_pe: u64,
}

impl GemmGeom {
    pub fn new(topo: &ClusterTopology, s: &GemmShape) -> Result<Self, KernelError> {
        let n_tiles = topo.total_tiles() as u64;
        let ppt = topo.pes_per_tile as u64;
        if s.m == 0 || s.m % 4 != 0 {
            return Err(shape(format!("GEMM rows must be a positive multiple of 4, got {}", s.m)));
        }
        if s.p == 0 || s.p % (4 * ppt) != 0 {
            return Err(shape(format!("GEMM columns must be a multiple of {} (4 per PE of a tile), got {}", 4 * ppt, s.p)));
        }
        if s.n == 0 {
            return Err(shape("GEMM inner dimension must be positive"));
        }
        if s.n_parallel == 0 || !s.n_parallel.is_power_of_two() || s.n_parallel > n_tiles {
            return Err(shape(format!("parallel count {} must be a power of two up to {n_tiles}", s.n_parallel)));
        }
        let tpp = n_tiles / s.n_parallel;
        let blocks = s.m / 4;
        let (g, tpg, bpt) = if blocks >= tpp {
            if blocks % tpp != 0 {
                return Err(shape(format!("{blocks} row blocks do not divide over {tpp} tiles")));
            }
            (1, tpp, blocks / tpp)
        } else {
            if tpp % blocks != 0 {
                return Err(shape(format!("{tpp} tiles per problem are not a multiple of {blocks} row blocks")));
            }
            (tpp / blocks, blocks, 1)
        };
        if s.n % g != 0 {
            return Err(shape(format!("inner dimension {} does not split {g} ways", s.n)));
        }
        Ok(GemmGeom {
            m: s.m,
            n: s.n,
            p: s.p,
            n_parallel: s.n_parallel,
            tiles_per_problem: tpp as usize,
            g,
            tiles_per_group: tpg as usize,
            blocks_per_tile: bpt,
            kl: s.n / g,
            windows_per_pe: s.p / (4 * ppt),
        })
    }

    pub fn a_words_per_tile(&self) -> u64 {
        self.blocks_per_tile * 4 * self.kl
    }

    pub fn c_words_per_tile(&self) -> u64 {
        self.blocks_per_tile * 4 * self.p
    }

    pub fn b_words_per_unit(&self) -> u64 {
        self.kl * self.p
    }

    pub fn n_units(&self) -> u64 {
        self.n_parallel * self.g
    }

    /// (problem, group, index within group) of a tile.
    pub fn place(&self, tile: usize) -> (u64, u64, usize) {
        let prob = tile / self.tiles_per_problem;
        let lt = tile % self.tiles_per_problem;
        (prob as u64, (lt / self.tiles_per_group) as u64, lt % self.tiles_per_group)
    }

    fn windows(&self) -> u64 {
        self.n_parallel * (self.m / 4) * (self.p / 4)
    }

    /// Closed-form counts for one [`emit_gemm_compute`] call.
    pub fn expected(&self, post: &Post) -> OpCounts {
        let w = self.windows();
        let epi = post.epilogue(Affine { base: 0, rs: 0, cs: 0 }, None);
        let mut c = OpCounts::default();
        if self.g == 1 {
            add_counts(&mut c, &window_counts(self.kl, &epi), w);
        } else {
            add_counts(&mut c, &window_counts(self.kl, &Epilogue::Store(Affine { base: 0, rs: 0, cs: 0 })), w * self.g);
            let merge = OpCounts { loads: 32, stores: 16, alu: 16, ..Default::default() };
            add_counts(&mut c, &merge, w * (self.g - 1));
            add_counts(&mut c, &epi.extra_per_element(), 16 * w);
        }
        c
    }
}

/// Element-wise work on finished output values.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Post {
    None,
    Gelu,
    /// Add a residual held in the output's layout.
    Residual(TileChunks, u64),
}

impl Post {
    fn epilogue(&self, out: Affine, res: Option<Affine>) -> Epilogue {
        match self {
            Post::None => Epilogue::Store(out),
            Post::Gelu => Epilogue::Gelu(out),
            Post::Residual(..) => Epilogue::Residual { out, res: res.unwrap_or(out) },
        }
    }
}

/// Buffers one GEMM pass reads and writes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GemmBufs {
    pub a: TileChunks,
    pub b: GroupUnits,
    pub c: TileChunks,
    pub part: Option<TileChunks>,
    /// Column offset of this pass within the residual's rows.
    pub res_col0: u64,
}

/// Emit every window and, for split inner dimensions, the merge tree.
/// Ends with a barrier.
pub(crate) fn emit_gemm_compute(bld: &mut PlanBuilder, geo: &GemmGeom, bufs: &GemmBufs, post: Post, reduce_phase: Option<&str>) {
    let topo = bld.topo.clone();
    let wb = bld.wb();
    let ppt = topo.pes_per_tile;
    let out_view = |buf: &TileChunks, tile: usize, blk: u64, col0: u64| {
        Affine::row_major(buf.at(tile, blk * 4 * geo.p + col0), geo.p, wb)
    };
    let res_view = |tile: usize, blk: u64, col0: u64| match post {
        Post::Residual(r, width) => Some(Affine::row_major(r.at(tile, blk * 4 * width + bufs.res_col0 + col0), width, wb)),
        _ => None,
    };

    for pe in 0..topo.total_pes() {
        let tile = topo.tile_of_pe(pe);
        let q = (pe % ppt) as u64;
        let (prob, g, _) = geo.place(tile);
        let unit = (prob * geo.g + g) as usize;
        let k0 = stagger(&topo, pe, geo.kl);
        for blk in 0..geo.blocks_per_tile {
            let a = Affine::row_major(bufs.a.at(tile, blk * 4 * geo.kl), geo.kl, wb);
            for w in 0..geo.windows_per_pe {
                let col0 = (q * geo.windows_per_pe + w) * 4;
                let b = Affine { base: bufs.b.at(unit, col0), rs: geo.p * wb, cs: wb };
                let epi = if geo.g == 1 {
                    post.epilogue(out_view(&bufs.c, tile, blk, col0), res_view(tile, blk, col0))
                } else if g == 0 {
                    Epilogue::Store(out_view(&bufs.c, tile, blk, col0))
                } else {
                    Epilogue::Store(out_view(&bufs.part.expect("split GEMM has a partial buffer"), tile, blk, col0))
                };
                emit_window(&mut bld.programs[pe], a, b, geo.kl, k0, epi);
            }
        }
    }

    if geo.g > 1 {
        let part = bufs.part.expect("split GEMM has a partial buffer");
        if let Some(ph) = reduce_phase {
            bld.phase(ph);
        }
        let mut stride = 1;
        while stride < geo.g {
            bld.barrier();
            let last = 2 * stride == geo.g;
            for pe in 0..topo.total_pes() {
                let tile = topo.tile_of_pe(pe);
                let (_, g, _) = geo.place(tile);
                if g % (2 * stride) != 0 {
                    continue;
                }
                let q = (pe % ppt) as u64;
                let src_tile = tile + stride as usize * geo.tiles_per_group;
                let own = if g == 0 { &bufs.c } else { &part };
                let mut ops = Vec::new();
                for blk in 0..geo.blocks_per_tile {
                    for w in 0..geo.windows_per_pe {
                        let col0 = (q * geo.windows_per_pe + w) * 4;
                        let mine = out_view(own, tile, blk, col0);
                        let theirs = out_view(&part, src_tile, blk, col0);
                        for r in 0..4 {
                            for c in 0..4 {
                                ops.push(PeOp::load(mine.at(r, c), acc(r, c)));
                            }
                            for c in 0..4 {
                                ops.push(PeOp::load(theirs.at(r, c), tmp(c)));
                            }
                            for c in 0..4 {
                                ops.push(PeOp::alu(acc(r, c), acc(r, c), tmp(c)));
                            }
                        }
                        let epi = if last {
                            post.epilogue(mine, res_view(tile, blk, col0))
                        } else {
                            Epilogue::Store(mine)
                        };
                        epi.emit(&mut ops);
                    }
                }
                bld.programs[pe].extend_ops(ops);
            }
            stride *= 2;
        }
    }
    bld.barrier();
}

/// Allocate the A, C, partial and B buffers of one pass.
pub(crate) fn alloc_gemm(bld: &mut PlanBuilder, geo: &GemmGeom, tag: &str) -> Result<GemmBufs, KernelError> {
    let a = bld.tile_chunks(&format!("A{tag}"), geo.a_words_per_tile())?;
    let c = bld.tile_chunks(&format!("C{tag}"), geo.c_words_per_tile())?;
    let part = if geo.g > 1 { Some(bld.tile_chunks(&format!("partial{tag}"), geo.c_words_per_tile())?) } else { None };
    let b = bld.group_units(&format!("B{tag}"), geo.tiles_per_group, geo.n_units(), geo.b_words_per_unit())?;
    Ok(GemmBufs { a, b, c, part, res_col0: 0 })
}

pub(crate) fn free_gemm(bld: &mut PlanBuilder, bufs: &GemmBufs, tag: &str) -> Result<(), KernelError> {
    bld.free(&format!("B{tag}"), bufs.b.base)?;
    if let Some(p) = bufs.part {
        bld.free(&format!("partial{tag}"), p.base)?;
    }
    bld.free(&format!("C{tag}"), bufs.c.base)?;
    bld.free(&format!("A{tag}"), bufs.a.base)?;
    Ok(())
}

pub fn gen_gemm(
    topo: &ClusterTopology,
    scheme: Scheme,
    s: &GemmShape,
    heap: Option<(u64, u64)>,
) -> Result<KernelPlan, KernelError> {
    let geo = GemmGeom::new(topo, s)?;
    let mut bld = PlanBuilder::new(topo, scheme, heap)?;
    bld.phase("setup");
    let bufs = alloc_gemm(&mut bld, &geo, "")?;
    bld.barrier();
    bld.phase("compute");
    emit_gemm_compute(&mut bld, &geo, &bufs, Post::None, Some("reduce"));
    bld.phase("teardown");
    free_gemm(&mut bld, &bufs, "")?;
    let exp = geo.expected(&Post::None);
    bld.finish("gemm", s.label(), s.n_parallel, exp)
}
