//! Flat byte-array reference machine.
//!
//! Executes the same trace operations as the engine but over a single flat
//! memory image, with none of the DRAM machinery. Verification compares the
//! engine's coherent view (cache overlaid on DRAM) against this image. The
//! implementation deliberately shares no code with the simulator paths it
//! checks.

use crate::trace::TraceOp;

pub struct ReferenceMachine {
    mem: Vec<u8>,
    line_bytes: usize,
}

impl ReferenceMachine {
    pub fn new(capacity_bytes: u64, line_bytes: u64) -> Self {
        ReferenceMachine {
            mem: vec![0u8; capacity_bytes as usize],
            line_bytes: line_bytes as usize,
        }
    }

    pub fn bytes(&self, start: u64, len: u64) -> &[u8] {
        &self.mem[start as usize..(start + len) as usize]
    }

    pub fn apply(&mut self, op: &TraceOp) {
        match *op {
            TraceOp::MemCopy { src, dst, size } => {
                let snapshot = self.mem[src as usize..(src + size) as usize].to_vec();
                self.mem[dst as usize..(dst + size) as usize].copy_from_slice(&snapshot);
            }
            TraceOp::MemInit { dst, size, val } => {
                self.mem[dst as usize..(dst + size) as usize].fill(val);
            }
            TraceOp::MemAnd {
                src1,
                src2,
                dst,
                size,
            } => {
                let a = self.mem[src1 as usize..(src1 + size) as usize].to_vec();
                let b = self.mem[src2 as usize..(src2 + size) as usize].to_vec();
                for i in 0..size as usize {
                    self.mem[dst as usize + i] = a[i] & b[i];
                }
            }
            TraceOp::MemOr {
                src1,
                src2,
                dst,
                size,
            } => {
                let a = self.mem[src1 as usize..(src1 + size) as usize].to_vec();
                let b = self.mem[src2 as usize..(src2 + size) as usize].to_vec();
                for i in 0..size as usize {
                    self.mem[dst as usize + i] = a[i] | b[i];
                }
            }
            TraceOp::Read { .. } => {}
            TraceOp::Write { addr, value } => {
                let base = addr as usize / self.line_bytes * self.line_bytes;
                let pattern = value.to_le_bytes();
                for i in 0..self.line_bytes {
                    self.mem[base + i] = pattern[i % 8];
                }
            }
        }
    }
}

/// Brute-force per-bit majority: counts votes, no boolean algebra shared
/// with the implementation.
pub fn majority_oracle(a: &[u8], b: &[u8], c: &[u8]) -> Vec<u8> {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len(), c.len());
    let mut out = vec![0u8; a.len()];
    for i in 0..a.len() {
        for bit in 0..8 {
            let votes =
                (a[i] >> bit & 1) as u32 + (b[i] >> bit & 1) as u32 + (c[i] >> bit & 1) as u32;
            if votes >= 2 {
                out[i] |= 1 << bit;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_has_snapshot_semantics() {
        let mut m = ReferenceMachine::new(1024, 64);
        m.apply(&TraceOp::Write {
            addr: 0,
            value: 0x1111111111111111,
        });
        // Overlapping forward copy must not see its own writes.
        m.apply(&TraceOp::MemCopy {
            src: 0,
            dst: 32,
            size: 64,
        });
        assert_eq!(m.bytes(32, 32), &[0x11; 32][..]);
        assert_eq!(m.bytes(64, 32), &[0x11; 32][..]);
    }

    #[test]
    fn majority_oracle_counts_votes() {
        assert_eq!(majority_oracle(&[0b110], &[0b011], &[0b000]), vec![0b010]);
        assert_eq!(majority_oracle(&[0xFF], &[0x00], &[0xF0]), vec![0xF0]);
    }
}
