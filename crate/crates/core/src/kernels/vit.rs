//! One ViT encoder layer as a sequence of stages: LayerNorm, the fused
//! Q/K/V projections, self-attention, the output projection with residual,
//! a second LayerNorm, and the feed-forward block (GELU up-projection,
//! residual down-projection).
//!
//! Stages exchange activations through L2. Each stage allocates its own
//! operands with the layout it wants, transfers them in, and writes its
//! results back, so the DAS configuration changes from stage to stage.
//! GEMM stages stream weight column tiles through two buffers and write
//! output tiles back through two more.

use serde::{Deserialize, Serialize};

use super::gemm::{alloc_gemm, emit_gemm_compute, GemmBufs, GemmGeom, Post};
use super::attention::emit_attention;
use super::layernorm::emit_layernorm;
use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image: u64,
    pub patch: u64,
    pub embed: u64,
    pub head_dim: u64,
    pub heads: u64,
    /// Key tile of the attention stage; tokens are padded to a multiple.
    pub sa_tile: u64,
    #[serde(default = "four")]
    pub mlp_ratio: u64,
}

fn four() -> u64 {
    4
}

impl VitConfig {
    pub fn patches(&self) -> u64 {
        (self.image / self.patch).pow(2)
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> u64 {
        self.patches() + 1
    }

    pub fn padded_tokens(&self) -> u64 {
        self.tokens().div_ceil(self.sa_tile) * self.sa_tile
    }

    pub fn label(&self) -> String {
        format!(
            "img={} T={} E={} P={} heads={} tokens={}->{}",
            self.image,
            self.patch,
            self.embed,
            self.head_dim,
            self.heads,
            self.tokens(),
            self.padded_tokens()
        )
    }

    fn attention(&self) -> AttentionShape {
        AttentionShape { seq: self.padded_tokens(), head_dim: self.head_dim, kv_tile: self.sa_tile, heads: self.heads }
    }

    fn norm(&self) -> LayerNormShape {
        LayerNormShape { tokens: self.tokens(), dim: self.embed }
    }
}

pub const VIT_PHASES: [&str; 5] = ["Norm", "QKV", "SA", "OP", "FF"];

/// `m x n` times `n x p_total`, computed `tile_p` output columns at a time.
fn emit_gemm_stage(
    bld: &mut PlanBuilder,
    tag: &str,
    m: u64,
    n: u64,
    p_total: u64,
    tile_p: u64,
    post: PostKind,
) -> Result<OpCounts, KernelError> {
    if p_total % tile_p != 0 {
        return Err(shape(format!("{tag}: output width {p_total} is not a multiple of the tile width {tile_p}")));
    }
    let topo = bld.topo.clone();
    let geo = GemmGeom::new(&topo, &gemm::GemmShape { m, n, p: tile_p, n_parallel: 1 })?;
    let n_out = p_total / tile_p;

    let first = alloc_gemm(bld, &geo, &format!("{tag}.0"))?;
    let c1 = bld.tile_chunks(&format!("C{tag}.1"), geo.c_words_per_tile())?;
    let b1 = bld.group_units(&format!("B{tag}.1"), geo.tiles_per_group, geo.n_units(), geo.b_words_per_unit())?;
    let res = match post {
        PostKind::Residual => Some(bld.tile_chunks(&format!("res{tag}"), geo.blocks_per_tile * 4 * p_total)?),
        _ => None,
    };
    let bs = [first.b, b1];
    let cs = [first.c, c1];
    let b_bytes = first.b.bytes();
    let c_bytes = first.c.bytes(&topo);

    let a_in = bld.dma_start(&format!("A{tag}"), DmaDirection::In, first.a.base, first.a.bytes(&topo));
    let r_in = res.map(|r| bld.dma_start(&format!("res{tag}"), DmaDirection::In, r.base, r.bytes(&topo)));
    let mut b_in = bld.dma_start(&format!("W{tag}.0"), DmaDirection::In, bs[0].base, b_bytes);
    bld.dma_wait(a_in);
    if let Some(r) = r_in {
        bld.dma_wait(r);
    }
    let post = match (post, res) {
        (PostKind::Residual, Some(r)) => Post::Residual(r, p_total),
        (PostKind::Gelu, _) => Post::Gelu,
        _ => Post::None,
    };

    let mut outs: Vec<u32> = Vec::new();
    for j in 0..n_out {
        let cur = (j % 2) as usize;
        bld.dma_wait(b_in);
        if j + 1 < n_out {
            b_in = bld.dma_start(&format!("W{tag}.{}", j + 1), DmaDirection::In, bs[1 - cur].base, b_bytes);
        }
        if j >= 2 {
            bld.dma_wait(outs[(j - 2) as usize]);
        }
        bld.barrier();
        let bufs = GemmBufs { a: first.a, b: bs[cur], c: cs[cur], part: first.part, res_col0: j * tile_p };
        emit_gemm_compute(bld, &geo, &bufs, post, None);
        outs.push(bld.dma_start(&format!("out{tag}.{j}"), DmaDirection::Out, cs[cur].base, c_bytes));
    }
    for &o in outs.iter().rev().take(2) {
        bld.dma_wait(o);
    }
    if let Some(r) = res {
        bld.free(&format!("res{tag}"), r.base)?;
    }
    bld.free(&format!("B{tag}.1"), b1.base)?;
    bld.free(&format!("C{tag}.1"), c1.base)?;
    gemm::free_gemm(bld, &first, &format!("{tag}.0"))?;
    bld.barrier();

    let mut c = OpCounts::default();
    add_counts(&mut c, &geo.expected(&post), n_out);
    Ok(c)
}

#[derive(Clone, Copy, Debug)]
enum PostKind {
    None,
    Gelu,
    Residual,
}

fn emit_norm_stage(bld: &mut PlanBuilder, tag: &str, s: &LayerNormShape) -> Result<OpCounts, KernelError> {
    let topo = bld.topo.clone();
    let words = s.words_per_tile(&topo);
    let x = bld.tile_chunks(&format!("x{tag}"), words)?;
    let y = bld.tile_chunks(&format!("y{tag}"), words)?;
    let part = match s.part_words_per_tile(&topo) {
        0 => None,
        w => Some(bld.tile_chunks(&format!("part{tag}"), w)?),
    };
    let gamma = bld.shared(&format!("gamma{tag}"), s.dim)?;
    let beta = bld.shared(&format!("beta{tag}"), s.dim)?;
    let ins = [
        bld.dma_start(&format!("x{tag}"), DmaDirection::In, x.base, x.bytes(&topo)),
        bld.dma_start(&format!("gamma{tag}"), DmaDirection::In, gamma, s.dim * bld.wb()),
        bld.dma_start(&format!("beta{tag}"), DmaDirection::In, beta, s.dim * bld.wb()),
    ];
    for d in ins {
        bld.dma_wait(d);
    }
    bld.barrier();
    emit_layernorm(bld, s, x, y, part, gamma, beta);
    let out = bld.dma_start(&format!("y{tag}"), DmaDirection::Out, y.base, y.bytes(&topo));
    bld.dma_wait(out);
    bld.free(&format!("beta{tag}"), beta)?;
    bld.free(&format!("gamma{tag}"), gamma)?;
    if let Some(part) = part {
        bld.free(&format!("part{tag}"), part.base)?;
    }
    bld.free(&format!("y{tag}"), y.base)?;
    bld.free(&format!("x{tag}"), x.base)?;
    bld.barrier();
    Ok(s.expected(&topo))
}

pub fn gen_vit_encoder(
    topo: &ClusterTopology,
    scheme: Scheme,
    cfg: &VitConfig,
    heap: Option<(u64, u64)>,
) -> Result<KernelPlan, KernelError> {
    if cfg.patch == 0 || cfg.image % cfg.patch != 0 {
        return Err(shape(format!("image {} is not a multiple of the patch size {}", cfg.image, cfg.patch)));
    }
    let m = cfg.padded_tokens();
    let e = cfg.embed;
    let hp = cfg.heads * cfg.head_dim;
    let mut bld = PlanBuilder::new(topo, scheme, heap)?;
    let mut exp = OpCounts::default();
    let mut add = |c: OpCounts| add_counts(&mut exp, &c, 1);

    bld.phase("Norm");
    add(emit_norm_stage(&mut bld, "ln1", &cfg.norm())?);

    bld.phase("QKV");
    // Q, K and V weights side by side: the normalized tokens stay resident
    // across all three projections.
    add(emit_gemm_stage(&mut bld, "qkv", m, e, 3 * hp, cfg.head_dim, PostKind::None)?);

    bld.phase("SA");
    let att = cfg.attention();
    emit_attention(&mut bld, &att, Some("SA"))?;
    add(att.expected());

    bld.phase("OP");
    add(emit_gemm_stage(&mut bld, "op", m, hp, e, cfg.head_dim, PostKind::Residual)?);

    bld.phase("Norm");
    add(emit_norm_stage(&mut bld, "ln2", &cfg.norm())?);

    bld.phase("FF");
    add(emit_gemm_stage(&mut bld, "up", m, e, cfg.mlp_ratio * e, cfg.head_dim, PostKind::Gelu)?);
    add(emit_gemm_stage(&mut bld, "down", m, cfg.mlp_ratio * e, e, cfg.head_dim, PostKind::Residual)?);

    bld.finish("vit", cfg.label(), 1, exp)
}

/// Multiply-accumulates of one encoder layer on the padded token count.
pub fn vit_macs(cfg: &VitConfig) -> u64 {
    let m = cfg.padded_tokens();
    let (e, hp, f) = (cfg.embed, cfg.heads * cfg.head_dim, cfg.mlp_ratio * cfg.embed);
    let norm = 2 * 2 * cfg.tokens() * e;
    let qkv = 3 * m * e * hp;
    let sa = cfg.heads * 2 * m * m * cfg.head_dim;
    let op = m * hp * e;
    let ff = 2 * m * e * f;
    norm + qkv + sa + op + ff
}

impl VitConfig {
    pub fn desk() -> Self {
        VitConfig { image: 32, patch: 8, embed: 64, head_dim: 16, heads: 4, sa_tile: 16, mlp_ratio: 4 }
    }

    pub fn vit_l16() -> Self {
        VitConfig { image: 224, patch: 16, embed: 256, head_dim: 64, heads: 16, sa_tile: 64, mlp_ratio: 4 }
    }
}
