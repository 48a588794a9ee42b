//! Memory-controller layer: the four bulk ISA operations, region
//! decomposition into in-DRAM and CPU portions, cache coherence around
//! in-DRAM operations, zero-line insertion, and the subarray-aware page
//! pools used by the allocation layer.

use std::collections::{BTreeMap, VecDeque};

use crate::addr::{self, Location};
use crate::config::DeviceConfig;
use crate::energy::OpClass;
use crate::engine::{DmaLine, Engine, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::idao::BitwiseOp;

/// Bulk operations exposed to software.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsaOp {
    /// Copy `size` bytes from `src` to `dst`.
    MemCopy { src: u64, dst: u64, size: u64 },
    /// Set `size` bytes at `dst` to `val`.
    MemInit { dst: u64, size: u64, val: u8 },
    /// Bitwise AND of `size` bytes of `src1` and `src2` into `dst`.
    MemAnd {
        src1: u64,
        src2: u64,
        dst: u64,
        size: u64,
    },
    /// Bitwise OR of `size` bytes of `src1` and `src2` into `dst`.
    MemOr {
        src1: u64,
        src2: u64,
        dst: u64,
        size: u64,
    },
}

impl IsaOp {
    pub fn class(&self) -> OpClass {
        match self {
            IsaOp::MemCopy { .. } => OpClass::Copy,
            IsaOp::MemInit { .. } => OpClass::Zero,
            IsaOp::MemAnd { .. } | IsaOp::MemOr { .. } => OpClass::AndOr,
        }
    }

    pub fn size(&self) -> u64 {
        match *self {
            IsaOp::MemCopy { size, .. }
            | IsaOp::MemInit { size, .. }
            | IsaOp::MemAnd { size, .. }
            | IsaOp::MemOr { size, .. } => size,
        }
    }

    pub fn dst(&self) -> u64 {
        match *self {
            IsaOp::MemCopy { dst, .. }
            | IsaOp::MemInit { dst, .. }
            | IsaOp::MemAnd { dst, .. }
            | IsaOp::MemOr { dst, .. } => dst,
        }
    }

    pub fn sources(&self) -> Vec<u64> {
        match *self {
            IsaOp::MemCopy { src, .. } => vec![src],
            IsaOp::MemInit { .. } => vec![],
            IsaOp::MemAnd { src1, src2, .. } | IsaOp::MemOr { src1, src2, .. } => vec![src1, src2],
        }
    }

    pub fn validate(&self, cfg: &DeviceConfig) -> Result<()> {
        let capacity = cfg.capacity_bytes();
        let size = self.size();
        for base in self.sources().into_iter().chain([self.dst()]) {
            if base.checked_add(size).is_none_or(|end| end > capacity) {
                return Err(Error::AddressRange {
                    addr: base,
                    bound: capacity,
                    what: "region",
                });
            }
        }
        Ok(())
    }
}

/// Full-row copy portion (global rows, remap-resolved).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowPair {
    pub src: u64,
    pub dst: u64,
}

/// Line-granular TRANSFER portion between two open rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineGroup {
    pub src: u64,
    pub dst: u64,
    pub cols: Vec<(u64, u64)>,
}

/// One row-sized bitwise operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdaoTriple {
    pub a: u64,
    pub b: u64,
    pub r: u64,
}

/// Decomposition of a bulk ISA operation. The accelerated portions plus
/// `cpu_ranges` exactly partition the destination byte range.
#[derive(Debug, Clone, Default)]
pub struct ExecutionPlan {
    pub fpm_rows: Vec<RowPair>,
    pub psm_rows: Vec<RowPair>,
    pub intra_rows: Vec<RowPair>,
    pub psm_lines: Vec<LineGroup>,
    /// Full rows zeroed from the reserved zero row.
    pub zero_rows: Vec<u64>,
    /// Zero-fill lines transferred from a zero row in another bank.
    pub zero_lines: Vec<(u64, Vec<u64>)>,
    /// Full rows filled from the staged value row.
    pub init_rows: Vec<u64>,
    pub idao_rows: Vec<IdaoTriple>,
    /// Destination byte ranges completed by the CPU.
    pub cpu_ranges: Vec<(u64, u64)>,
    /// Destination byte ranges covered by the accelerated portions above.
    pub accel_ranges: Vec<(u64, u64)>,
}

impl ExecutionPlan {
    fn push_cpu(&mut self, start: u64, end: u64) {
        if start < end {
            push_range(&mut self.cpu_ranges, start, end);
        }
    }

    fn push_accel(&mut self, start: u64, end: u64) {
        push_range(&mut self.accel_ranges, start, end);
    }

    pub fn is_all_cpu(&self) -> bool {
        self.accel_ranges.is_empty()
    }
}

fn push_range(ranges: &mut Vec<(u64, u64)>, start: u64, end: u64) {
    if let Some(last) = ranges.last_mut() {
        if last.1 == start {
            last.1 = end;
            return;
        }
    }
    ranges.push((start, end));
}

struct RowGroup {
    src_grow: u64,
    dst_grow: u64,
    cols: Vec<(u64, u64)>,
    addrs: Vec<u64>,
    matched: bool,
}

/// Divide a bulk operation into in-DRAM portions and a CPU remainder.
///
/// Copies and fills accelerate row-aligned row-sized pieces (FPM within a
/// subarray, PSM across banks, two PSM hops within a bank) and
/// cacheline-sized pieces across banks; bitwise ops accelerate only
/// row-sized pieces. Everything else stays on the CPU. `resolve` applies
/// faulty-row remapping before placement decisions.
pub fn split_region(
    op: &IsaOp,
    cfg: &DeviceConfig,
    resolve: &dyn Fn(u64) -> u64,
) -> Result<ExecutionPlan> {
    op.validate(cfg)?;
    let mut plan = ExecutionPlan::default();
    let size = op.size();
    let dst = op.dst();
    if size == 0 {
        return Ok(plan);
    }
    let line = cfg.cacheline_bytes;
    let total_banks = cfg.channels * cfg.ranks_per_channel * cfg.banks_per_chip;

    // Overlapping copy regions get memmove semantics from the CPU path.
    if let IsaOp::MemCopy { src, .. } = *op {
        if src < dst + size && dst < src + size {
            plan.push_cpu(dst, dst + size);
            return Ok(plan);
        }
    }
    // Bitwise sources that overlap the destination at a nonzero shift would
    // be clobbered row by row; exact aliasing (same base) is safe because
    // each row is snapshotted into the temporary rows before its result is
    // written.
    if matches!(op, IsaOp::MemAnd { .. } | IsaOp::MemOr { .. }) {
        let shifted_overlap = op
            .sources()
            .iter()
            .any(|&s| s != dst && s < dst + size && dst < s + size);
        if shifted_overlap {
            plan.push_cpu(dst, dst + size);
            return Ok(plan);
        }
    }
    // All sources must share the destination's line phase for any
    // line-granular acceleration.
    if op.sources().iter().any(|s| s % line != dst % line) {
        plan.push_cpu(dst, dst + size);
        return Ok(plan);
    }

    let aligned_start = dst.next_multiple_of(line);
    let aligned_end = (dst + size) / line * line;
    if aligned_start >= aligned_end {
        plan.push_cpu(dst, dst + size);
        return Ok(plan);
    }
    plan.push_cpu(dst, aligned_start);

    let locate = |address: u64| -> Result<(u64, Location)> {
        let loc = addr::decode_address(address, cfg)?;
        Ok((resolve(addr::global_row(&loc, cfg)), loc))
    };
    let bank_of = |grow: u64| grow / (cfg.subarrays_per_bank * cfg.rows_per_subarray);
    let gsub_of = |grow: u64| grow / cfg.rows_per_subarray;
    let lines_per_row = cfg.lines_per_row();

    match *op {
        IsaOp::MemCopy { src, .. } => {
            let mut groups: Vec<RowGroup> = Vec::new();
            let mut index: BTreeMap<(u64, u64), usize> = BTreeMap::new();
            for l in (aligned_start..aligned_end).step_by(line as usize) {
                let (d_grow, d_loc) = locate(l)?;
                let (s_grow, s_loc) = locate(src + (l - dst))?;
                let idx = *index.entry((s_grow, d_grow)).or_insert_with(|| {
                    groups.push(RowGroup {
                        src_grow: s_grow,
                        dst_grow: d_grow,
                        cols: Vec::new(),
                        addrs: Vec::new(),
                        matched: true,
                    });
                    groups.len() - 1
                });
                let g = &mut groups[idx];
                g.cols.push((s_loc.column, d_loc.column));
                g.addrs.push(l);
                g.matched &= s_loc.column == d_loc.column;
            }
            for g in groups {
                let full_row = g.matched && g.cols.len() as u64 == lines_per_row;
                let cross_bank = bank_of(g.src_grow) != bank_of(g.dst_grow);
                if full_row && gsub_of(g.src_grow) == gsub_of(g.dst_grow) {
                    plan.fpm_rows.push(RowPair {
                        src: g.src_grow,
                        dst: g.dst_grow,
                    });
                } else if full_row && cross_bank {
                    plan.psm_rows.push(RowPair {
                        src: g.src_grow,
                        dst: g.dst_grow,
                    });
                } else if full_row && total_banks >= 2 {
                    plan.intra_rows.push(RowPair {
                        src: g.src_grow,
                        dst: g.dst_grow,
                    });
                } else if cross_bank {
                    plan.psm_lines.push(LineGroup {
                        src: g.src_grow,
                        dst: g.dst_grow,
                        cols: g.cols,
                    });
                } else {
                    for a in g.addrs {
                        plan.push_cpu(a, a + line);
                    }
                    continue;
                }
                for a in g.addrs {
                    plan.push_accel(a, a + line);
                }
            }
        }
        IsaOp::MemInit { val, .. } => {
            let mut groups: Vec<(u64, Vec<u64>, Vec<u64>)> = Vec::new();
            let mut index: BTreeMap<u64, usize> = BTreeMap::new();
            for l in (aligned_start..aligned_end).step_by(line as usize) {
                let (d_grow, d_loc) = locate(l)?;
                let idx = *index.entry(d_grow).or_insert_with(|| {
                    groups.push((d_grow, Vec::new(), Vec::new()));
                    groups.len() - 1
                });
                groups[idx].1.push(d_loc.column);
                groups[idx].2.push(l);
            }
            for (d_grow, cols, addrs) in groups {
                let full_row = cols.len() as u64 == lines_per_row;
                if full_row {
                    if val == 0 {
                        plan.zero_rows.push(d_grow);
                    } else {
                        plan.init_rows.push(d_grow);
                    }
                } else if val == 0 && total_banks >= 2 {
                    plan.zero_lines.push((d_grow, cols));
                } else {
                    // Partial non-zero fills (and single-bank systems) keep
                    // the CPU path.
                    for a in addrs {
                        plan.push_cpu(a, a + line);
                    }
                    continue;
                }
                for a in addrs {
                    plan.push_accel(a, a + line);
                }
            }
        }
        IsaOp::MemAnd { src1, src2, .. } | IsaOp::MemOr { src1, src2, .. } => {
            let mut groups: Vec<(IdaoTriple, bool, Vec<u64>, u64)> = Vec::new();
            let mut index: BTreeMap<(u64, u64, u64), usize> = BTreeMap::new();
            for l in (aligned_start..aligned_end).step_by(line as usize) {
                let (r_grow, r_loc) = locate(l)?;
                let (a_grow, a_loc) = locate(src1 + (l - dst))?;
                let (b_grow, b_loc) = locate(src2 + (l - dst))?;
                let idx = *index.entry((a_grow, b_grow, r_grow)).or_insert_with(|| {
                    groups.push((
                        IdaoTriple {
                            a: a_grow,
                            b: b_grow,
                            r: r_grow,
                        },
                        true,
                        Vec::new(),
                        0,
                    ));
                    groups.len() - 1
                });
                let g = &mut groups[idx];
                g.1 &= a_loc.column == r_loc.column && b_loc.column == r_loc.column;
                g.2.push(l);
                g.3 += 1;
            }
            for (triple, matched, addrs, count) in groups {
                if matched && count == lines_per_row {
                    plan.idao_rows.push(triple);
                    for a in addrs {
                        plan.push_accel(a, a + line);
                    }
                } else {
                    for a in addrs {
                        plan.push_cpu(a, a + line);
                    }
                }
            }
        }
    }

    plan.push_cpu(aligned_end, dst + size);
    plan.cpu_ranges.sort_unstable();
    plan.cpu_ranges = merge_ranges(&plan.cpu_ranges);
    plan.accel_ranges.sort_unstable();
    plan.accel_ranges = merge_ranges(&plan.accel_ranges);
    Ok(plan)
}

fn merge_ranges(ranges: &[(u64, u64)]) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(ranges.len());
    for &(s, e) in ranges {
        if let Some(last) = out.last_mut() {
            assert!(
                s >= last.1,
                "overlapping plan portions: {s:#x} < {:#x}",
                last.1
            );
            if last.1 == s {
                last.1 = e;
                continue;
            }
        }
        out.push((s, e));
    }
    out
}

/// Coherence work performed before an in-DRAM operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoherenceAction {
    /// Dirty source line written back to memory.
    WritebackSource { line_addr: u64 },
    /// Dirty source line duplicated in-cache under the destination tag.
    InCacheCopy { src_line: u64, dst_line: u64 },
    /// Cached destination line dropped.
    InvalidateDest { line_addr: u64 },
    /// Dirty partial destination line written back before invalidation so
    /// the bytes outside the operation survive in memory.
    FlushDest { line_addr: u64 },
}

impl Engine {
    fn region_lines(&self, start: u64, len: u64) -> Vec<u64> {
        if len == 0 {
            return Vec::new();
        }
        let line = self.cfg.cacheline_bytes;
        (start / line..=(start + len - 1) / line).collect()
    }

    /// Flush or duplicate cached source lines and invalidate cached
    /// destination lines so the in-DRAM operation sees and leaves a
    /// coherent memory image. Returns the actions taken, in order.
    pub fn coherence_prepare(
        &mut self,
        op: &IsaOp,
        cursor: f64,
    ) -> Result<(Vec<CoherenceAction>, f64)> {
        let line = self.cfg.cacheline_bytes;
        let size = op.size();
        let dst = op.dst();
        let mut actions = Vec::new();
        let mut cursor = cursor;
        let in_cache_copy_ok = matches!(op, IsaOp::MemCopy { .. })
            && op.sources().first().is_some_and(|s| s % line == dst % line);

        // Pending in-cache copies are applied after the destination sweep.
        let mut pending_copies: Vec<(u64, u64, Vec<u8>)> = Vec::new();
        for src in op.sources() {
            for l in self.region_lines(src, size) {
                let Some((dirty, data)) = self.llc.probe(l) else {
                    continue;
                };
                if !dirty {
                    continue;
                }
                let line_addr = l * line;
                let fully_inside = line_addr >= src && line_addr + line <= src + size;
                if in_cache_copy_ok && fully_inside {
                    let dst_line = line_addr - src + dst;
                    pending_copies.push((line_addr, dst_line, data.to_vec()));
                } else {
                    let data = data.to_vec();
                    cursor = self.writeback_line(line_addr, &data, cursor)?;
                    self.llc.mark_clean(l);
                    actions.push(CoherenceAction::WritebackSource { line_addr });
                }
            }
        }
        for l in self.region_lines(dst, size) {
            let Some((dirty, data)) = self.llc.probe(l) else {
                continue;
            };
            let line_addr = l * line;
            let fully_inside = line_addr >= dst && line_addr + line <= dst + size;
            if dirty && !fully_inside {
                let data = data.to_vec();
                cursor = self.writeback_line(line_addr, &data, cursor)?;
                actions.push(CoherenceAction::FlushDest { line_addr });
            }
            self.llc.invalidate(l);
            actions.push(CoherenceAction::InvalidateDest { line_addr });
        }
        for (src_line, dst_line, data) in pending_copies {
            if let Some(ev) = self.llc.insert(dst_line / line, &data, true) {
                // The victim is never a fellow duplicate: destination-region
                // lines were just invalidated, and the duplicates of one
                // source set land in one destination set (the line shift is
                // constant), so at most `ways` of them collide. An evicted
                // duplicate would go stale once the in-DRAM copy overwrites
                // destination memory; assert the invariant instead.
                let ev_addr = ev.line_addr * line;
                debug_assert!(
                    ev_addr + line <= dst || ev_addr >= dst + size,
                    "evicted a fresh in-cache duplicate"
                );
                cursor = self.writeback_line(ev_addr, &ev.data, cursor)?;
            }
            actions.push(CoherenceAction::InCacheCopy { src_line, dst_line });
        }
        Ok((actions, cursor))
    }

    /// Insert clean zero lines for a freshly zeroed region. Only lines
    /// fully inside the region are inserted; a partial boundary line still
    /// carries live bytes outside the region.
    pub(crate) fn do_zi_insert(&mut self, start: u64, len: u64, cursor: f64) -> Result<f64> {
        let line = self.cfg.cacheline_bytes;
        let zeros = vec![0u8; line as usize];
        let mut cursor = cursor;
        for l in self.region_lines(start, len) {
            let line_addr = l * line;
            if line_addr < start || line_addr + line > start + len {
                continue;
            }
            if let Some(ev) = self.llc.insert(l, &zeros, false) {
                let ev_addr = ev.line_addr * line;
                cursor = self.writeback_line(ev_addr, &ev.data, cursor)?;
            }
        }
        Ok(cursor)
    }

    /// Standalone zero-line insertion (the controller calls the internal
    /// form as part of a zeroing operation).
    pub fn zi_insert(&mut self, start: u64, len: u64) -> Result<()> {
        let begin = self.begin_op(OpClass::Zero);
        self.do_zi_insert(start, len, begin)?;
        self.end_op(begin);
        Ok(())
    }

    fn row_dma_lines(&self, grow: u64, write: Option<&[u8]>) -> Result<Vec<DmaLine>> {
        let line = self.cfg.cacheline_bytes as usize;
        addr::row_line_addrs(grow, &self.cfg)
            .enumerate()
            .map(|(i, a)| {
                Ok(DmaLine {
                    loc: self.decode(a)?,
                    write: write.map(|w| w[i * line..(i + 1) * line].to_vec()),
                })
            })
            .collect()
    }

    /// CPU path for one bitwise row triple (three streams).
    fn cpu_bitwise_row(&mut self, op: BitwiseOp, t: &IdaoTriple, cursor: f64) -> Result<f64> {
        let (a_lines, cursor) = {
            let dma = self.row_dma_lines(t.a, None)?;
            self.dma_stream(&dma, cursor)?
        };
        let (b_lines, cursor) = {
            let dma = self.row_dma_lines(t.b, None)?;
            self.dma_stream(&dma, cursor)?
        };
        let line = self.cfg.cacheline_bytes as usize;
        let mut result = vec![0u8; self.cfg.row_size_bytes as usize];
        for (i, (a, b)) in a_lines.iter().zip(&b_lines).enumerate() {
            for k in 0..line {
                result[i * line + k] = match op {
                    BitwiseOp::And => a[k] & b[k],
                    BitwiseOp::Or => a[k] | b[k],
                };
            }
        }
        let dma = self.row_dma_lines(t.r, Some(&result))?;
        let (_, cursor) = self.dma_stream(&dma, cursor)?;
        Ok(cursor)
    }

    /// CPU remainder of a copy: read the source bytes, write them to the
    /// destination (boundary lines merge read-modify-write).
    fn cpu_copy_range(
        &mut self,
        src: u64,
        dst_start: u64,
        dst_end: u64,
        op_dst: u64,
        cursor: f64,
    ) -> Result<f64> {
        let len = dst_end - dst_start;
        let src_start = src + (dst_start - op_dst);
        let (bytes, cursor) = self.cpu_read_bytes(src_start, len, cursor)?;
        self.cpu_write_bytes(dst_start, &bytes, cursor)
    }

    #[allow(clippy::too_many_arguments)]
    fn cpu_bitwise_range(
        &mut self,
        op: BitwiseOp,
        src1: u64,
        src2: u64,
        dst_start: u64,
        dst_end: u64,
        op_dst: u64,
        cursor: f64,
    ) -> Result<f64> {
        let len = dst_end - dst_start;
        let off = dst_start - op_dst;
        let (a, cursor) = self.cpu_read_bytes(src1 + off, len, cursor)?;
        let (b, cursor) = self.cpu_read_bytes(src2 + off, len, cursor)?;
        let bytes: Vec<u8> = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| match op {
                BitwiseOp::And => x & y,
                BitwiseOp::Or => x | y,
            })
            .collect();
        self.cpu_write_bytes(dst_start, &bytes, cursor)
    }

    fn charge_cpu_remainder(&mut self, class: OpClass, bytes: u64) -> Result<()> {
        if bytes > 0 {
            self.charge_table(class, class, crate::energy::MechKind::Baseline, bytes)?;
            self.counters.count("cpu_remainder_ranges");
        }
        Ok(())
    }

    /// Execute one bulk ISA operation under the engine's mechanism. After
    /// completion the coherent view satisfies the operation's semantics
    /// exactly.
    pub fn exec_isa(&mut self, op: &IsaOp) -> Result<()> {
        op.validate(&self.cfg)?;
        let size = op.size();
        let dst = op.dst();
        self.check_user_region(dst, size)?;
        self.page_guard(dst, size);
        for s in op.sources() {
            self.page_guard(s, size);
        }
        let class = op.class();
        let start = self.begin_op(class);
        if size == 0 {
            self.end_op(start);
            return Ok(());
        }

        let accelerate = match op {
            IsaOp::MemCopy { .. } => self.mechanism.accelerates_copies() && !self.cfg.mc_dma,
            IsaOp::MemInit { .. } => self.mechanism.accelerates_copies(),
            IsaOp::MemAnd { .. } | IsaOp::MemOr { .. } => self.mechanism.accelerates_bitwise(),
        };

        let bitwise_kind = match op {
            IsaOp::MemAnd { .. } => Some(BitwiseOp::And),
            IsaOp::MemOr { .. } => Some(BitwiseOp::Or),
            _ => None,
        };

        if !accelerate {
            let (_, cursor) = self.coherence_prepare(op, start)?;
            self.block_destination(dst, size);
            let result = self.with_table_charge(|e| match *op {
                IsaOp::MemCopy { src, .. } => {
                    e.counters.count("baseline_copy");
                    e.cpu_copy_range(src, dst, dst + size, dst, cursor)
                }
                IsaOp::MemInit { val, .. } => {
                    e.counters.count("baseline_zero");
                    let bytes = vec![val; size as usize];
                    e.cpu_write_bytes(dst, &bytes, cursor)
                }
                IsaOp::MemAnd { src1, src2, .. } | IsaOp::MemOr { src1, src2, .. } => {
                    e.counters.count("baseline_and_or");
                    e.cpu_bitwise_range(
                        bitwise_kind.unwrap(),
                        src1,
                        src2,
                        dst,
                        dst + size,
                        dst,
                        cursor,
                    )
                }
            });
            self.unblock_destination();
            result?;
            self.charge_table(class, class, crate::energy::MechKind::Baseline, size)?;
            self.end_op(start);
            return Ok(());
        }

        let remaps = self.remaps.clone();
        let resolve = move |g: u64| remaps.get(&g).copied().unwrap_or(g);
        let plan = split_region(op, &self.cfg, &resolve)?;
        let (_, mut cursor) = self.coherence_prepare(op, start)?;
        self.block_destination(dst, size);

        let result = (|| -> Result<()> {
            // Staging row for non-zero fills: written once, copied per row.
            if !plan.init_rows.is_empty() {
                if self.reserved.total_banks < 2 {
                    return Err(Error::FallbackToCpu);
                }
                let val = match *op {
                    IsaOp::MemInit { val, .. } => val,
                    _ => unreachable!(),
                };
                let first_bank = self.dram.bank_of_row(plan.init_rows[0]);
                let staging = self
                    .reserved
                    .tmp_row((first_bank + 1) % self.reserved.total_banks);
                let value_row = vec![val; self.cfg.row_size_bytes as usize];
                cursor = self.do_stage_value_row(staging, &value_row, cursor)?;
                for &row in &plan.init_rows {
                    cursor = self.do_row_copy(staging, row, OpClass::Zero, cursor)?;
                    self.counters.count("bulk_init_rows");
                }
            }
            for pair in &plan.fpm_rows {
                cursor = self.do_fpm_copy(pair.src, pair.dst, OpClass::Copy, cursor)?;
            }
            for pair in &plan.psm_rows {
                let cols: Vec<(u64, u64)> = (0..self.cfg.lines_per_row()).map(|c| (c, c)).collect();
                cursor = self.do_psm_copy(pair.src, pair.dst, &cols, OpClass::Copy, cursor)?;
            }
            for pair in &plan.intra_rows {
                cursor = self.do_intra_copy(pair.src, pair.dst, OpClass::Copy, cursor)?;
            }
            for group in &plan.psm_lines {
                cursor =
                    self.do_psm_copy(group.src, group.dst, &group.cols, OpClass::Copy, cursor)?;
            }
            for &row in &plan.zero_rows {
                cursor = self.do_zero_row(row, cursor)?;
            }
            for (row, cols) in &plan.zero_lines {
                // Zero lines come from the zero row of the next bank.
                let bank = self.dram.bank_of_row(*row);
                let src_bank = (bank + 1) % self.reserved.total_banks;
                let src_gsub = src_bank * self.cfg.subarrays_per_bank;
                let zero = self.reserved.zero_row(src_gsub);
                let pairs: Vec<(u64, u64)> = cols.iter().map(|&c| (c, c)).collect();
                cursor = self.do_psm_copy(zero, *row, &pairs, OpClass::Zero, cursor)?;
            }
            for triple in &plan.idao_rows {
                let kind = bitwise_kind.unwrap();
                match self.do_idao_row(kind, triple.a, triple.b, triple.r, cursor) {
                    Ok(c) => cursor = c,
                    Err(Error::FallbackToCpu) => {
                        cursor =
                            self.with_table_charge(|e| e.cpu_bitwise_row(kind, triple, cursor))?;
                        self.counters.count("idao_cpu_fallback_rows");
                        self.charge_cpu_remainder(class, self.cfg.row_size_bytes)?;
                    }
                    Err(e) => return Err(e),
                }
            }
            for &(s, e) in &plan.cpu_ranges {
                cursor = self.with_table_charge(|eng| match *op {
                    IsaOp::MemCopy { src, .. } => eng.cpu_copy_range(src, s, e, dst, cursor),
                    IsaOp::MemInit { val, .. } => {
                        let bytes = vec![val; (e - s) as usize];
                        eng.cpu_write_bytes(s, &bytes, cursor)
                    }
                    IsaOp::MemAnd { src1, src2, .. } | IsaOp::MemOr { src1, src2, .. } => {
                        eng.cpu_bitwise_range(bitwise_kind.unwrap(), src1, src2, s, e, dst, cursor)
                    }
                })?;
                self.charge_cpu_remainder(class, e - s)?;
            }
            Ok(())
        })();
        self.unblock_destination();
        result?;

        if let IsaOp::MemInit { val: 0, .. } = *op {
            if self.mechanism.zero_insert() {
                self.do_zi_insert(dst, size, cursor)?;
            }
        }
        self.end_op(start);
        Ok(())
    }
}

/// One allocated page and whether it landed in the requested subarray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocatedPage {
    pub addr: u64,
    pub same_subarray: bool,
}

/// Free-page lists, one per subarray, built from the exported subarray
/// mapping. Pages inside reserved rows are never handed out.
#[derive(Debug, Clone)]
pub struct PagePools {
    pools: BTreeMap<u64, VecDeque<u64>>,
    round_robin: Vec<u64>,
    rr_next: usize,
}

impl PagePools {
    pub fn build(cfg: &DeviceConfig) -> Result<PagePools> {
        if cfg.row_size_bytes < PAGE_SIZE || !cfg.row_size_bytes.is_multiple_of(PAGE_SIZE) {
            return Err(Error::InvalidWorkload(format!(
                "page pools need row_size_bytes to be a multiple of the {PAGE_SIZE}-byte page",
            )));
        }
        if matches!(cfg.interleave, crate::config::Interleave::Cacheline) && cfg.channels > 1 {
            return Err(Error::InvalidWorkload(
                "page pools need pages contiguous within a row; cacheline interleaving across \
                 channels splits them"
                    .into(),
            ));
        }
        let reserved = crate::rowclone::ReservedLayout::new(cfg);
        let mut pools: BTreeMap<u64, VecDeque<u64>> = BTreeMap::new();
        let pages_per_row = cfg.row_size_bytes / PAGE_SIZE;
        let total_rows = reserved.total_subarrays() * cfg.rows_per_subarray;
        for grow in 0..total_rows {
            if reserved.is_reserved_row(grow) {
                continue;
            }
            let base = addr::encode_location(&addr::row_location(grow, cfg), cfg)?;
            let gsub = grow / cfg.rows_per_subarray;
            for p in 0..pages_per_row {
                pools
                    .entry(gsub)
                    .or_default()
                    .push_back(base + p * PAGE_SIZE);
            }
        }
        let round_robin = pools.keys().copied().collect();
        Ok(PagePools {
            pools,
            round_robin,
            rr_next: 0,
        })
    }

    pub fn free_pages(&self) -> usize {
        self.pools.values().map(|p| p.len()).sum()
    }

    /// Allocate from the same pool (subarray) as `src_page`; fall back to
    /// any pool, flagging the allocation as PSM-bound.
    pub fn alloc_page_same_subarray(
        &mut self,
        src_page: u64,
        cfg: &DeviceConfig,
    ) -> Result<AllocatedPage> {
        let loc = addr::decode_address(src_page, cfg)?;
        let gsub = addr::global_subarray(&loc, cfg);
        if let Some(page) = self.pools.get_mut(&gsub).and_then(|p| p.pop_front()) {
            return Ok(AllocatedPage {
                addr: page,
                same_subarray: true,
            });
        }
        for pool in self.pools.values_mut() {
            if let Some(page) = pool.pop_front() {
                return Ok(AllocatedPage {
                    addr: page,
                    same_subarray: false,
                });
            }
        }
        Err(Error::NoPoolPage)
    }

    /// Allocate spreading across subarrays round-robin (the usual
    /// interleaved layout of a fresh array).
    pub fn alloc_page_spread(&mut self) -> Result<u64> {
        for _ in 0..self.round_robin.len() {
            let gsub = self.round_robin[self.rr_next];
            self.rr_next = (self.rr_next + 1) % self.round_robin.len();
            if let Some(page) = self.pools.get_mut(&gsub).and_then(|p| p.pop_front()) {
                return Ok(page);
            }
        }
        Err(Error::NoPoolPage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Mechanism;
    use crate::trace::TraceOp;

    fn cfg() -> DeviceConfig {
        DeviceConfig {
            banks_per_chip: 4,
            subarrays_per_bank: 4,
            rows_per_subarray: 16,
            row_size_bytes: 4096,
            llc_capacity_bytes: 16 * 1024,
            llc_ways: 4,
            ..DeviceConfig::default()
        }
    }

    fn ident(g: u64) -> u64 {
        g
    }

    /// `cpu_ranges` plus `accel_ranges` must tile the destination exactly.
    fn assert_partition(plan: &ExecutionPlan, dst: u64, size: u64) {
        let mut all: Vec<(u64, u64)> = plan
            .cpu_ranges
            .iter()
            .chain(&plan.accel_ranges)
            .copied()
            .collect();
        all.sort_unstable();
        let merged = merge_ranges(&all); // panics on overlap
        if size == 0 {
            assert!(merged.is_empty());
        } else {
            assert_eq!(merged, vec![(dst, dst + size)]);
        }
    }

    #[test]
    fn split_same_subarray_page_is_one_fpm_portion() {
        let c = cfg();
        // Next row of subarray 0: one full row stride away.
        let stride = 4 * 4 * 4096;
        let op = IsaOp::MemCopy {
            src: 0,
            dst: stride,
            size: 4096,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert_eq!(plan.fpm_rows.len(), 1);
        assert!(plan.cpu_ranges.is_empty());
        assert!(plan.psm_rows.is_empty() && plan.psm_lines.is_empty());
        assert_partition(&plan, stride, 4096);
    }

    #[test]
    fn split_small_unaligned_copy_is_all_cpu() {
        let c = cfg();
        let op = IsaOp::MemCopy {
            src: 3,
            dst: 7000,
            size: 100,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert!(plan.is_all_cpu());
        assert_eq!(plan.cpu_ranges, vec![(7000, 7100)]);
    }

    #[test]
    fn split_row_plus_line_plus_bytes_partitions_exactly() {
        let c = cfg();
        // One full row into another bank plus one extra line plus a byte
        // tail, starting row-aligned.
        let bank_stride = 4 * 4096; // bank digit sits above the subarray digit
        let op = IsaOp::MemCopy {
            src: 0,
            dst: bank_stride,
            size: 4096 + 64 + 9,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert_eq!(plan.psm_rows.len(), 1);
        assert_eq!(
            plan.psm_lines.iter().map(|g| g.cols.len()).sum::<usize>(),
            1
        );
        assert_eq!(
            plan.cpu_ranges,
            vec![(bank_stride + 4096 + 64, bank_stride + 4096 + 64 + 9)]
        );
        assert_partition(&plan, bank_stride, 4096 + 64 + 9);
    }

    #[test]
    fn split_partitions_random_operations() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let c = cfg();
        let mut rng = StdRng::seed_from_u64(99);
        let limit = c.capacity_bytes() / 2;
        for i in 0..2000 {
            let size = match i % 3 {
                0 => rng.gen_range(0..10_000),
                1 => 4096 * rng.gen_range(1..4),
                _ => 64 * rng.gen_range(0..100),
            };
            let op = match i % 4 {
                0 => IsaOp::MemCopy {
                    src: rng.gen_range(0..limit - size),
                    dst: rng.gen_range(0..limit - size),
                    size,
                },
                1 => IsaOp::MemInit {
                    dst: rng.gen_range(0..limit - size),
                    size,
                    val: rng.gen(),
                },
                2 => IsaOp::MemAnd {
                    src1: rng.gen_range(0..limit - size),
                    src2: rng.gen_range(0..limit - size),
                    dst: rng.gen_range(0..limit - size),
                    size,
                },
                _ => IsaOp::MemOr {
                    src1: rng.gen_range(0..limit - size),
                    src2: rng.gen_range(0..limit - size),
                    dst: rng.gen_range(0..limit - size),
                    size,
                },
            };
            let plan = split_region(&op, &c, &ident).unwrap();
            assert_partition(&plan, op.dst(), size);
        }
    }

    #[test]
    fn zero_init_routes_rows_to_zero_rows_and_lines_to_transfers() {
        let c = cfg();
        let op = IsaOp::MemInit {
            dst: 0,
            size: 4096 + 128,
            val: 0,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert_eq!(plan.zero_rows.len(), 1);
        assert_eq!(plan.zero_lines.len(), 1);
        assert!(plan.cpu_ranges.is_empty());
        // Non-zero fills keep sub-row pieces on the CPU.
        let op = IsaOp::MemInit {
            dst: 0,
            size: 4096 + 128,
            val: 0xAB,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert_eq!(plan.init_rows.len(), 1);
        assert_eq!(plan.cpu_ranges, vec![(4096, 4096 + 128)]);
    }

    #[test]
    fn coherence_no_cached_lines_means_no_actions() {
        let mut e = Engine::new(&cfg(), Mechanism::Rowclone).unwrap();
        let op = IsaOp::MemCopy {
            src: 0,
            dst: 8192,
            size: 4096,
        };
        let (actions, _) = e.coherence_prepare(&op, 0.0).unwrap();
        assert!(actions.is_empty());
    }

    #[test]
    fn coherence_duplicates_dirty_source_lines_under_destination_tags() {
        let mut e = Engine::new(&cfg(), Mechanism::Rowclone).unwrap();
        e.host_write_line(64, &[0xCD; 64]).unwrap(); // dirty source line
        e.host_read_line(8192).unwrap(); // clean destination line
        let op = IsaOp::MemCopy {
            src: 0,
            dst: 8192,
            size: 4096,
        };
        let (actions, _) = e.coherence_prepare(&op, e.clock()).unwrap();
        assert!(actions.contains(&CoherenceAction::InCacheCopy {
            src_line: 64,
            dst_line: 8192 + 64
        }));
        assert!(actions.contains(&CoherenceAction::InvalidateDest { line_addr: 8192 }));
        // The duplicated line is dirty under the destination tag.
        let (dirty, data) = e.llc.probe((8192 + 64) / 64).unwrap();
        assert!(dirty);
        assert_eq!(data, &[0xCD; 64]);
    }

    #[test]
    fn coherence_writes_back_dirty_sources_of_bitwise_ops() {
        let mut e = Engine::new(&cfg(), Mechanism::Idao).unwrap();
        e.host_write_line(0, &[0xEE; 64]).unwrap();
        let op = IsaOp::MemAnd {
            src1: 0,
            src2: 4096,
            dst: 8192,
            size: 4096,
        };
        let (actions, _) = e.coherence_prepare(&op, e.clock()).unwrap();
        assert_eq!(
            actions,
            vec![CoherenceAction::WritebackSource { line_addr: 0 }]
        );
        // Memory now holds the written-back bytes.
        assert_eq!(&e.dram.row_data(0)[..64], &[0xEE; 64]);
    }

    #[test]
    fn in_cache_copies_stay_exact_under_set_pressure() {
        // 16 KiB, 4 ways, 64-byte lines -> 64 sets; addresses 4096 apart
        // collide in one set. Setting up five dirty source lines in one
        // set forces setup evictions and makes the duplicate insertions
        // displace unrelated lines; the coherent view must stay exact.
        let c = cfg();
        let mut e = Engine::new(&c, Mechanism::Rowclone).unwrap();
        let mut patterns = Vec::new();
        for i in 0..5u64 {
            let data = vec![0xA0 + i as u8; 64];
            e.host_write_line(i * 4096, &data).unwrap();
            patterns.push(data);
        }
        let (src, dst, size) = (0u64, 0x8000u64, 5 * 4096u64);
        let before = e.coherent_bytes(src, size);
        e.exec_isa(&IsaOp::MemCopy { src, dst, size }).unwrap();
        assert_eq!(
            e.coherent_bytes(dst, size),
            before,
            "coherent view went stale"
        );
        for (i, data) in patterns.iter().enumerate() {
            assert_eq!(
                &e.coherent_bytes(dst + i as u64 * 4096, 64)[..],
                &data[..],
                "line {i}"
            );
        }
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn exec_isa_copy_with_dirty_source_yields_coherent_destination() {
        let mut e = Engine::new(&cfg(), Mechanism::Rowclone).unwrap();
        let stride = 4 * 4 * 4096;
        e.host_write_line(128, &[0x5A; 64]).unwrap();
        e.exec_isa(&IsaOp::MemCopy {
            src: 0,
            dst: stride,
            size: 4096,
        })
        .unwrap();
        assert_eq!(e.coherent_bytes(stride, 4096), e.coherent_bytes(0, 4096));
        assert_eq!(&e.coherent_bytes(stride + 128, 64)[..], &[0x5A; 64]);
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn exec_isa_all_psm_bitwise_falls_back_to_cpu_and_stays_correct() {
        let c = cfg();
        let mut e = Engine::new(&c, Mechanism::Idao).unwrap();
        // Three different subarrays of one bank: every plan needs three
        // hops, so the row is executed by the CPU.
        let sub_stride = 4096;
        e.dram.init_row_bytes(0, &vec![0b1100_0011u8; 4096]);
        e.dram.init_row_bytes(16, &vec![0b1010_0101u8; 4096]);
        e.exec_isa(&IsaOp::MemAnd {
            src1: 0,
            src2: sub_stride,
            dst: 2 * sub_stride,
            size: 4096,
        })
        .unwrap();
        assert_eq!(e.counters.mech_counts["idao_cpu_fallback_rows"], 1);
        assert!(e
            .coherent_bytes(2 * sub_stride, 4096)
            .iter()
            .all(|&b| b == 0b1000_0001));
    }

    #[test]
    fn mc_dma_flag_routes_copies_to_streams() {
        let mut c = cfg();
        c.mc_dma = true;
        let mut e = Engine::new(&c, Mechanism::Rowclone).unwrap();
        let stride = 4 * 4 * 4096;
        e.exec_isa(&IsaOp::MemCopy {
            src: 0,
            dst: stride,
            size: 4096,
        })
        .unwrap();
        // Baseline streaming latency and full channel traffic, no cache fill.
        assert_eq!(e.counters.total_latency_ns, 1020.0);
        assert_eq!(e.counters.bytes_total, 8192);
        assert_eq!(e.llc.resident_lines(), 0);
        assert_eq!(e.counters.mech_counts["baseline_copy"], 1);
    }

    #[test]
    fn pools_allocate_same_subarray_then_fall_back() {
        let c = cfg();
        let mut pools = PagePools::build(&c).unwrap();
        // Row 0 holds page 0; its subarray pool serves matching requests.
        let got = pools.alloc_page_same_subarray(0, &c).unwrap();
        assert!(got.same_subarray);
        let loc = addr::decode_address(got.addr, &c).unwrap();
        assert_eq!(addr::global_subarray(&loc, &c), 0);
        // Drain subarray 0's pool; the next allocation is flagged PSM-bound.
        while pools
            .alloc_page_same_subarray(0, &c)
            .map(|p| p.same_subarray)
            .unwrap_or(false)
        {}
        let cross = pools.alloc_page_same_subarray(0, &c).unwrap();
        assert!(!cross.same_subarray);
        // Exhaust everything.
        while pools.alloc_page_same_subarray(0, &c).is_ok() {}
        assert!(matches!(
            pools.alloc_page_same_subarray(0, &c),
            Err(Error::NoPoolPage)
        ));
    }

    #[test]
    fn pools_exclude_reserved_rows_and_match_subarrays() {
        let c = cfg();
        let mut pools = PagePools::build(&c).unwrap();
        let layout = crate::rowclone::ReservedLayout::new(&c);
        let mut seen = std::collections::BTreeSet::new();
        while let Ok(page) = pools.alloc_page_spread() {
            assert!(seen.insert(page), "page {page:#x} handed out twice");
            let loc = addr::decode_address(page, &c).unwrap();
            let grow = addr::global_row(&loc, &c);
            assert!(
                !layout.is_reserved_row(grow),
                "page {page:#x} is in a reserved row"
            );
        }
        // 16 subarrays x 16 rows, minus 6 reserved per subarray and one tmp
        // row per bank.
        assert_eq!(seen.len() as u64, 16 * 16 - 16 * 6 - 4);
    }

    #[test]
    fn zero_insert_larger_than_cache_keeps_view_zero() {
        let c = cfg(); // 16 KiB LLC
        let mut e = Engine::new(&c, Mechanism::RowcloneZi).unwrap();
        let region = 32 * 1024u64;
        for l in (0..region).step_by(64) {
            e.host_write_line(l, &[0xEE; 64]).unwrap();
        }
        e.exec_isa(&IsaOp::MemInit {
            dst: 0,
            size: region,
            val: 0,
        })
        .unwrap();
        assert!(e.llc.resident_lines() > 0);
        assert!(
            (e.llc.resident_lines() as u64) < region / 64,
            "early lines evicted"
        );
        assert!(e.coherent_bytes(0, region).iter().all(|&b| b == 0));
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn blocking_window_clears_after_ops() {
        let mut e = Engine::new(&cfg(), Mechanism::Rowclone).unwrap();
        e.exec_isa(&IsaOp::MemInit {
            dst: 0,
            size: 4096,
            val: 0,
        })
        .unwrap();
        assert!(e.destination_blocked().is_none());
    }

    #[test]
    fn overlapping_bitwise_with_shift_goes_to_cpu() {
        let c = cfg();
        let op = IsaOp::MemOr {
            src1: 64,
            src2: 8192,
            dst: 0,
            size: 4096,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert!(plan.is_all_cpu());
        // Exact aliasing stays accelerated.
        let op = IsaOp::MemOr {
            src1: 0,
            src2: 8192,
            dst: 0,
            size: 4096,
        };
        let plan = split_region(&op, &c, &ident).unwrap();
        assert_eq!(plan.idao_rows.len(), 1);
    }

    #[test]
    fn write_read_traffic_matches_reference_through_trace_layer() {
        let c = cfg();
        let ops = vec![
            TraceOp::Write {
                addr: 0,
                value: 0xAAAA_BBBB_CCCC_DDDD,
            },
            TraceOp::MemCopy {
                src: 0,
                dst: 4 * 4 * 4096,
                size: 4096,
            },
            TraceOp::Read { addr: 4 * 4 * 4096 },
        ];
        let out = crate::harness::run_trace(&ops, &c, Mechanism::Rowclone).unwrap();
        assert_eq!(out.stats.timing_violations, 0);
        let expect: Vec<u8> = (0..64)
            .map(|i| 0xAAAA_BBBB_CCCC_DDDDu64.to_le_bytes()[i % 8])
            .collect();
        assert_eq!(out.engine.coherent_bytes(4 * 4 * 4096, 64), expect);
    }
}
