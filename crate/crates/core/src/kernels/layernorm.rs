//! Row-wise layer normalization.
//!
//! With at least as many tokens as PEs, token `t` is handled by PE
//! `t mod n_pe`. With fewer tokens, each token is split over a group of `g`
//! PEs of one tile: every PE reduces its slice of the features, the group
//! swaps partial sums through a tile-local buffer, and each PE normalizes its
//! own slice. Under DAS a token's vector sits in its tile's banks. `gamma` and
//! `beta` are shared.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNormShape {
    pub tokens: u64,
    pub dim: u64,
}

impl LayerNormShape {
    pub fn label(&self) -> String {
        format!("{}x{}", self.tokens, self.dim)
    }

    /// PEs per token: the largest power of two that fits the tile, leaves
    /// every token its own group, and divides `dim`.
    pub(crate) fn group(&self, topo: &ClusterTopology) -> u64 {
        let n_pe = topo.total_pes() as u64;
        let mut g = 1;
        while g * 2 <= topo.pes_per_tile as u64 && self.tokens * g * 2 <= n_pe && self.dim % (g * 2) == 0 {
            g *= 2;
        }
        g
    }

    fn tokens_per_tile(&self, topo: &ClusterTopology) -> u64 {
        if self.group(topo) > 1 {
            self.tokens.div_ceil(topo.total_tiles() as u64)
        } else {
            self.tokens.div_ceil(topo.total_pes() as u64) * topo.pes_per_tile as u64
        }
    }

    pub(crate) fn words_per_tile(&self, topo: &ClusterTopology) -> u64 {
        self.tokens_per_tile(topo) * self.dim
    }

    /// Words of the partial-sum buffer, zero when tokens are not split.
    pub(crate) fn part_words_per_tile(&self, topo: &ClusterTopology) -> u64 {
        match self.group(topo) {
            1 => 0,
            g => self.tokens_per_tile(topo) * g * 2,
        }
    }

    pub(crate) fn expected(&self, topo: &ClusterTopology) -> OpCounts {
        let (t, e, g) = (self.tokens, self.dim, self.group(topo));
        let mut c = OpCounts { loads: 4 * e * t, stores: e * t, macs: 2 * e * t, alu: (3 * e + 4) * t, div: t };
        if g > 1 {
            // Each PE of a group stores two partials, reads the group's 2g,
            // and adds them into fresh accumulators.
            c.loads += 2 * g * g * t;
            c.stores += 2 * g * t;
            c.alu += 2 * g * g * t + 4 * (g - 1) * t;
            c.div = g * t;
        }
        c
    }
}

const SUM: Reg = Reg(0);
const SQ: [Reg; 2] = [Reg(1), Reg(2)];
const MEAN: Reg = Reg(3);
const RSTD: Reg = Reg(4);
const VAR: Reg = Reg(5);
const PART: [Reg; 2] = [Reg(9), Reg(10)];
const TOT: [Reg; 2] = [Reg(11), Reg(12)];

/// Element `i` of a slice of `len` words at `base`, visited from `e0`.
fn slice_at(base: u64, wb: u64, len: u64, e0: u64) -> impl Fn(u64) -> u32 + Copy {
    move |i| (base + ((e0 + i) % len) * wb) as u32
}

/// Sum and sum of squares of a slice into `SUM` and `SQ[0]`.
fn emit_stats(p: &mut PeProgram, x: u64, wb: u64, len: u64, e0: u64) {
    let xa = slice_at(x, wb, len, e0);
    p.push(PeOp::load(xa(0), a_reg(0, 0)));
    p.push_loop(
        len,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            let (cur, nxt) = (i % 2, (i + 1) % 2);
            if i + 1 < len {
                out.push(PeOp::load(xa(i + 1), a_reg(nxt, 0)));
            }
            out.push(PeOp::alu(SUM, SUM, a_reg(cur, 0)));
            out.push(PeOp::mac(SQ[cur as usize], a_reg(cur, 0), a_reg(cur, 0)));
        }),
    );
    p.push(PeOp::alu(SQ[0], SQ[0], SQ[1]));
}

/// Mean and reciprocal deviation from the sums in `sum` and `sq`.
fn emit_moments(p: &mut PeProgram, sum: Reg, sq: Reg) {
    p.extend_ops([
        PeOp::alu(MEAN, sum, Reg::NONE),
        PeOp::alu(VAR, MEAN, MEAN),
        PeOp::alu(VAR, sq, VAR),
        PeOp::div(RSTD, VAR, Reg::NONE),
    ]);
}

#[allow(clippy::too_many_arguments)]
fn emit_normalize(p: &mut PeProgram, x: u64, y: u64, gamma: u64, beta: u64, wb: u64, len: u64, e0: u64) {
    let (xa, ya) = (slice_at(x, wb, len, e0), slice_at(y, wb, len, e0));
    let (ga, ba) = (slice_at(gamma, wb, len, e0), slice_at(beta, wb, len, e0));
    // Output registers rotate over three slots so a result is stored one
    // iteration after its MAC.
    let y_reg = |i: u64| Reg(6 + (i % 3) as u8);
    p.extend_ops([PeOp::load(xa(0), a_reg(0, 0)), PeOp::load(ga(0), a_reg(0, 1)), PeOp::load(ba(0), y_reg(0))]);
    p.push_loop(
        len,
        Arc::new(move |i, out: &mut Vec<PeOp>| {
            let (cur, nxt) = (i % 2, (i + 1) % 2);
            if i + 1 < len {
                out.push(PeOp::load(xa(i + 1), a_reg(nxt, 0)));
                out.push(PeOp::load(ga(i + 1), a_reg(nxt, 1)));
                out.push(PeOp::load(ba(i + 1), y_reg(i + 1)));
            }
            out.push(PeOp::alu(a_reg(cur, 0), a_reg(cur, 0), MEAN));
            out.push(PeOp::alu(a_reg(cur, 0), a_reg(cur, 0), RSTD));
            out.push(PeOp::mac(y_reg(i), a_reg(cur, 1), a_reg(cur, 0)));
            if i >= 1 {
                out.push(PeOp::store(ya(i - 1), y_reg(i - 1)));
            }
        }),
    );
    p.push(PeOp::store(ya(len - 1), y_reg(len - 1)));
}

/// Per-token normalization over `x` into `y`, laid out as
/// [`LayerNormShape::words_per_tile`] describes. `part` must hold
/// [`LayerNormShape::part_words_per_tile`] words when tokens are split.
/// Ends with a barrier.
pub(crate) fn emit_layernorm(
    bld: &mut PlanBuilder,
    s: &LayerNormShape,
    x: TileChunks,
    y: TileChunks,
    part: Option<TileChunks>,
    gamma: u64,
    beta: u64,
) {
    let topo = bld.topo.clone();
    let n_pe = topo.total_pes() as u64;
    let ppt = topo.pes_per_tile as u64;
    let wb = bld.wb();
    let g = s.group(&topo);
    if g == 1 {
        for t in 0..s.tokens {
            let pe = (t % n_pe) as usize;
            let slot = t / n_pe;
            let tile = topo.tile_of_pe(pe);
            let w = (slot * ppt + pe as u64 % ppt) * s.dim;
            let e0 = stagger(&topo, pe, s.dim);
            let p = &mut bld.programs[pe];
            emit_stats(p, x.at(tile, w), wb, s.dim, e0);
            emit_moments(p, SUM, SQ[0]);
            emit_normalize(p, x.at(tile, w), y.at(tile, w), gamma, beta, wb, s.dim, e0);
        }
        bld.barrier();
        return;
    }

    let part = part.expect("split tokens need a partial-sum buffer");
    let n_tiles = topo.total_tiles() as u64;
    let len = s.dim / g;
    // (pe, tile, slot, member) for every PE that owns a slice.
    let members: Vec<(usize, usize, u64, u64)> = (0..s.tokens)
        .flat_map(|t| {
            let (tile, slot) = ((t % n_tiles) as usize, t / n_tiles);
            (0..g).map(move |j| (tile * ppt as usize + (slot * g + j) as usize, tile, slot, j))
        })
        .collect();
    for &(pe, tile, slot, j) in &members {
        let lo = slot * s.dim + j * len;
        let e0 = stagger(&topo, pe, len);
        let p = &mut bld.programs[pe];
        emit_stats(p, x.at(tile, lo), wb, len, e0);
        let pw = (slot * g + j) * 2;
        p.extend_ops([PeOp::store(part.at(tile, pw) as u32, SUM), PeOp::store(part.at(tile, pw + 1) as u32, SQ[0])]);
    }
    bld.barrier();
    for &(pe, tile, slot, j) in &members {
        let lo = slot * s.dim + j * len;
        let e0 = stagger(&topo, pe, len);
        let p = &mut bld.programs[pe];
        for k in 0..g {
            // Start with the member's own pair, then walk the rest.
            let pw = (slot * g + (j + k) % g) * 2;
            p.extend_ops([
                PeOp::load(part.at(tile, pw) as u32, PART[0]),
                PeOp::load(part.at(tile, pw + 1) as u32, PART[1]),
                PeOp::alu(TOT[0], TOT[0], PART[0]),
                PeOp::alu(TOT[1], TOT[1], PART[1]),
            ]);
        }
        emit_moments(p, TOT[0], TOT[1]);
        let (gl, bl) = (gamma + j * len * wb, beta + j * len * wb);
        emit_normalize(p, x.at(tile, lo), y.at(tile, lo), gl, bl, wb, len, e0);
    }
    bld.barrier();
}

pub fn gen_layernorm(
    topo: &ClusterTopology,
    scheme: Scheme,
    s: &LayerNormShape,
    heap: Option<(u64, u64)>,
) -> Result<KernelPlan, KernelError> {
    if s.tokens == 0 || s.dim == 0 {
        return Err(shape("layer norm needs at least one token and one feature"));
    }
    let mut bld = PlanBuilder::new(topo, scheme, heap)?;
    bld.phase("setup");
    let words = s.words_per_tile(topo);
    let x = bld.tile_chunks("x", words)?;
    let y = bld.tile_chunks("y", words)?;
    let part = match s.part_words_per_tile(topo) {
        0 => None,
        w => Some(bld.tile_chunks("part", w)?),
    };
    let gamma = bld.shared("gamma", s.dim)?;
    let beta = bld.shared("beta", s.dim)?;
    bld.barrier();
    bld.phase("compute");
    emit_layernorm(&mut bld, s, x, y, part, gamma, beta);
    bld.phase("teardown");
    bld.free("beta", beta)?;
    bld.free("gamma", gamma)?;
    if let Some(part) = part {
        bld.free("part", part.base)?;
    }
    bld.free("y", y.base)?;
    bld.free("x", x.base)?;
    bld.finish("layernorm", s.label(), 1, s.expected(topo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::test_util::*;

    #[test]
    fn counts_symmetry_locality() {
        let topo = ClusterTopology::desk_default();
        for s in [LayerNormShape { tokens: 64, dim: 32 }, LayerNormShape { tokens: 100, dim: 17 }] {
            let das = gen_layernorm(&topo, Scheme::Das, &s, None).unwrap();
            let il = gen_layernorm(&topo, Scheme::Interleaved, &s, None).unwrap();
            assert_eq!(das.expected.macs, 2 * s.tokens * s.dim);
            assert_symmetric(&das, &il);
            assert_all_local(&topo, &das, &["x", "y"]);
        }
    }

    #[test]
    fn runs_without_raw_on_the_square_sum() {
        let topo = ClusterTopology::desk_default();
        let s = LayerNormShape { tokens: 64, dim: 64 };
        let plan = gen_layernorm(&topo, Scheme::Das, &s, None).unwrap();
        let params = crate::engine::EngineParams { port_interval: 2, ..Default::default() };
        let rep = crate::engine::run(&topo, plan.initial_heap(&topo), &plan.work, &params, Default::default()).unwrap();
        assert!(rep.is_conserved());
        assert_eq!(rep.ops, plan.expected);
        let c = rep.phase("compute").unwrap();
        assert!(c.utilization > 0.5, "{c:?}");
    }

    #[test]
    fn few_tokens_are_split_over_a_group() {
        let topo = ClusterTopology::desk_default();
        assert_eq!(LayerNormShape { tokens: 64, dim: 32 }.group(&topo), 1);
        assert_eq!(LayerNormShape { tokens: 17, dim: 64 }.group(&topo), 2);
        assert_eq!(LayerNormShape { tokens: 8, dim: 32 }.group(&topo), 4);
        assert_eq!(LayerNormShape { tokens: 8, dim: 6 }.group(&topo), 2);
        let params = crate::engine::EngineParams { port_interval: 2, ..Default::default() };
        for s in [LayerNormShape { tokens: 17, dim: 64 }, LayerNormShape { tokens: 8, dim: 6 }] {
            let das = gen_layernorm(&topo, Scheme::Das, &s, None).unwrap();
            let il = gen_layernorm(&topo, Scheme::Interleaved, &s, None).unwrap();
            assert_eq!(das.expected.macs, 2 * s.tokens * s.dim);
            assert_symmetric(&das, &il);
            assert_all_local(&topo, &das, &["x", "y", "part"]);
            let rep = crate::engine::run(&topo, das.initial_heap(&topo), &das.work, &params, Default::default()).unwrap();
            assert!(rep.is_conserved());
            assert_eq!(rep.ops, das.expected);
        }
    }
}
