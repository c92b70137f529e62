//! Abstract per-PE operations and lazily expanded programs.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Architectural register index; `Reg::NONE` marks an unused operand.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u8);

impl Reg {
    pub const NONE: Reg = Reg(u8::MAX);
    pub const COUNT: usize = 32;

    pub fn is_none(self) -> bool {
        self == Reg::NONE
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_none() {
            f.write_str("_")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeClass {
    Mac,
    Alu,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Load { addr: u32 },
    Store { addr: u32 },
    Compute { class: ComputeClass },
    /// Wait until `participants` PEs have arrived at barrier `id`.
    Barrier { id: u32, participants: u32 },
    DmaStart { transfer: u32 },
    DmaWait { transfer: u32 },
    /// Run heap event `event` of the plan (allocator call + CSR write).
    Heap { event: u32 },
    /// Zero-cost marker: subsequent cycles count towards `phase`.
    Mark { phase: u16 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PeOp {
    pub kind: OpKind,
    pub dst: Reg,
    pub srcs: [Reg; 3],
}

impl PeOp {
    const NO_SRC: [Reg; 3] = [Reg::NONE; 3];

    fn bare(kind: OpKind) -> Self {
        PeOp { kind, dst: Reg::NONE, srcs: Self::NO_SRC }
    }

    pub fn load(addr: u32, dst: Reg) -> Self {
        PeOp { kind: OpKind::Load { addr }, dst, srcs: Self::NO_SRC }
    }

    pub fn store(addr: u32, src: Reg) -> Self {
        PeOp { kind: OpKind::Store { addr }, dst: Reg::NONE, srcs: [src, Reg::NONE, Reg::NONE] }
    }

    /// `acc += a * b`
    pub fn mac(acc: Reg, a: Reg, b: Reg) -> Self {
        PeOp { kind: OpKind::Compute { class: ComputeClass::Mac }, dst: acc, srcs: [a, b, acc] }
    }

    pub fn alu(dst: Reg, a: Reg, b: Reg) -> Self {
        PeOp { kind: OpKind::Compute { class: ComputeClass::Alu }, dst, srcs: [a, b, Reg::NONE] }
    }

    pub fn div(dst: Reg, a: Reg, b: Reg) -> Self {
        PeOp { kind: OpKind::Compute { class: ComputeClass::Div }, dst, srcs: [a, b, Reg::NONE] }
    }

    pub fn barrier(id: u32, participants: u32) -> Self {
        Self::bare(OpKind::Barrier { id, participants })
    }

    pub fn dma_start(transfer: u32) -> Self {
        Self::bare(OpKind::DmaStart { transfer })
    }

    pub fn dma_wait(transfer: u32) -> Self {
        Self::bare(OpKind::DmaWait { transfer })
    }

    pub fn heap(event: u32) -> Self {
        Self::bare(OpKind::Heap { event })
    }

    pub fn mark(phase: u16) -> Self {
        Self::bare(OpKind::Mark { phase })
    }

    pub fn addr(&self) -> Option<u32> {
        match self.kind {
            OpKind::Load { addr } | OpKind::Store { addr } => Some(addr),
            _ => None,
        }
    }

    pub fn is_mem(&self) -> bool {
        self.addr().is_some()
    }

    /// The same op with its address zeroed; used to compare schemes.
    pub fn without_addr(&self) -> PeOp {
        let kind = match self.kind {
            OpKind::Load { .. } => OpKind::Load { addr: 0 },
            OpKind::Store { .. } => OpKind::Store { addr: 0 },
            k => k,
        };
        PeOp { kind, ..*self }
    }
}

/// Emits the ops of iteration `i` of a loop into the buffer.
pub type LoopBody = Arc<dyn Fn(u64, &mut Vec<PeOp>) + Send + Sync>;

#[derive(Clone)]
pub enum Segment {
    Ops(Vec<PeOp>),
    Loop { count: u64, body: LoopBody },
}

impl fmt::Debug for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Ops(ops) => write!(f, "Ops({})", ops.len()),
            Segment::Loop { count, .. } => write!(f, "Loop(x{count})"),
        }
    }
}

/// One PE's operation stream: straight-line blocks and counted loops whose
/// bodies are expanded on demand.
#[derive(Clone, Debug, Default)]
pub struct PeProgram {
    segments: Vec<Segment>,
}

impl PeProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: PeOp) {
        match self.segments.last_mut() {
            Some(Segment::Ops(ops)) => ops.push(op),
            _ => self.segments.push(Segment::Ops(vec![op])),
        }
    }

    pub fn extend_ops(&mut self, ops: impl IntoIterator<Item = PeOp>) {
        for op in ops {
            self.push(op);
        }
    }

    pub fn push_loop(&mut self, count: u64, body: LoopBody) {
        if count > 0 {
            self.segments.push(Segment::Loop { count, body });
        }
    }

    pub fn append(&mut self, other: &PeProgram) {
        for seg in &other.segments {
            match seg {
                Segment::Ops(ops) => self.extend_ops(ops.iter().copied()),
                s => self.segments.push(s.clone()),
            }
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn cursor(&self) -> Cursor<'_> {
        Cursor { segs: &self.segments, seg: 0, pos: 0, iter: 0, buf: Vec::new() }
    }

    pub fn iter(&self) -> Cursor<'_> {
        self.cursor()
    }
}

/// Streaming position inside a [`PeProgram`].
pub struct Cursor<'a> {
    segs: &'a [Segment],
    seg: usize,
    pos: usize,
    iter: u64,
    buf: Vec<PeOp>,
}

impl Cursor<'_> {
    #[inline]
    pub fn peek(&mut self) -> Option<PeOp> {
        loop {
            match self.segs.get(self.seg)? {
                Segment::Ops(ops) => {
                    if self.pos < ops.len() {
                        return Some(ops[self.pos]);
                    }
                    self.next_segment();
                }
                Segment::Loop { count, body } => {
                    if self.pos < self.buf.len() {
                        return Some(self.buf[self.pos]);
                    }
                    if self.iter < *count {
                        self.buf.clear();
                        body(self.iter, &mut self.buf);
                        self.iter += 1;
                        self.pos = 0;
                    } else {
                        self.next_segment();
                    }
                }
            }
        }
    }

    #[inline]
    pub fn advance(&mut self) {
        self.pos += 1;
    }

    fn next_segment(&mut self) {
        self.seg += 1;
        self.pos = 0;
        self.iter = 0;
        self.buf.clear();
    }
}

impl Iterator for Cursor<'_> {
    type Item = PeOp;

    fn next(&mut self) -> Option<PeOp> {
        let op = self.peek()?;
        self.advance();
        Some(op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cursor_walks_ops_and_loops() {
        let mut p = PeProgram::new();
        p.push(PeOp::load(0, Reg(1)));
        p.push_loop(3, Arc::new(|i, out: &mut Vec<PeOp>| {
            out.push(PeOp::load(i as u32 * 4, Reg(2)));
            if i == 1 {
                out.push(PeOp::mac(Reg(3), Reg(1), Reg(2)));
            }
        }));
        p.push_loop(2, Arc::new(|_, _: &mut Vec<PeOp>| {}));
        p.push(PeOp::store(8, Reg(3)));
        p.push_loop(1, Arc::new(|_, out: &mut Vec<PeOp>| out.push(PeOp::barrier(0, 1))));
        let ops: Vec<PeOp> = p.iter().collect();
        assert_eq!(ops.len(), 7);
        assert_eq!(ops[0], PeOp::load(0, Reg(1)));
        assert_eq!(ops[2], PeOp::load(4, Reg(2)));
        assert_eq!(ops[3], PeOp::mac(Reg(3), Reg(1), Reg(2)));
        assert_eq!(ops[5], PeOp::store(8, Reg(3)));
        assert_eq!(ops[6], PeOp::barrier(0, 1));
    }

    #[test]
    fn empty_program() {
        assert_eq!(PeProgram::new().iter().count(), 0);
    }

    #[test]
    fn peek_is_stable() {
        let mut p = PeProgram::new();
        p.push_loop(2, Arc::new(|i, out: &mut Vec<PeOp>| out.push(PeOp::load(i as u32, Reg(0)))));
        let mut c = p.cursor();
        assert_eq!(c.peek(), c.peek());
        c.advance();
        assert_eq!(c.peek().unwrap().addr(), Some(1));
        c.advance();
        assert_eq!(c.peek(), None);
    }
}
