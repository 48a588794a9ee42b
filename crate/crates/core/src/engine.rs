//! Simulation engine: owns the DRAM state, the LLC, the command log, the
//! clock, and the energy/traffic ledgers. Bulk mechanisms (in-DRAM copy,
//! initialization, bitwise ops) and the ISA layer are implemented on top of
//! this in their own modules.
//!
//! Scheduling model: one engine simulates a single request stream. Every
//! command is stamped with issue/complete times that respect the per-bank
//! timing constraints; each operation starts at the current clock and the
//! clock advances to the completion of its last command.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use crate::addr::{self, Location};
use crate::config::DeviceConfig;
use crate::dram::DramState;
use crate::energy::{
    calibrate_per_command, Calibration, EnergyLedger, EnergyMode, MechKind, OpClass,
    REFERENCE_TABLE,
};
use crate::error::{Error, Result};
use crate::llc::Llc;
use crate::rowclone::ReservedLayout;
use crate::sched::{
    apply_to_timeline, command_duration, earliest_issue, validate_log, BankTimeline, CommandKind,
    TimedCommand, Violation,
};

pub const PAGE_SIZE: u64 = 4096;

/// Run-level acceleration policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    /// All bulk operations stream over the channel.
    Baseline,
    /// Copies and initialization run in DRAM; bitwise ops stream.
    Rowclone,
    /// Rowclone plus zero-line insertion after bulk zeroing.
    RowcloneZi,
    /// Rowclone plus in-DRAM bitwise AND/OR.
    Idao,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Baseline => "baseline",
            Mechanism::Rowclone => "rowclone",
            Mechanism::RowcloneZi => "rowclone-zi",
            Mechanism::Idao => "idao",
        }
    }

    pub fn accelerates_copies(self) -> bool {
        !matches!(self, Mechanism::Baseline)
    }

    pub fn zero_insert(self) -> bool {
        matches!(self, Mechanism::RowcloneZi)
    }

    pub fn accelerates_bitwise(self) -> bool {
        matches!(self, Mechanism::Idao)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Counters {
    pub bytes_by_class: BTreeMap<&'static str, u64>,
    pub bytes_total: u64,
    pub latency_by_class: BTreeMap<&'static str, f64>,
    pub total_latency_ns: f64,
    pub mech_counts: BTreeMap<&'static str, u64>,
    pub page_faults: u64,
}

impl Counters {
    pub fn count(&mut self, key: &'static str) {
        *self.mech_counts.entry(key).or_insert(0) += 1;
    }

    pub fn bytes(&mut self, class: OpClass, n: u64) {
        *self.bytes_by_class.entry(class.name()).or_insert(0) += n;
        self.bytes_total += n;
    }
}

/// A cacheline to move in a DMA-style stream.
pub(crate) struct DmaLine {
    pub loc: Location,
    /// `Some(bytes)` writes the line; `None` reads it.
    pub write: Option<Vec<u8>>,
}

pub struct Engine {
    pub cfg: DeviceConfig,
    pub dram: DramState,
    pub llc: Llc,
    pub mechanism: Mechanism,
    pub(crate) reserved: ReservedLayout,
    pub(crate) remaps: BTreeMap<u64, u64>,
    clock: f64,
    op_end: f64,
    op_acct_adjust: f64,
    pub(crate) current_class: OpClass,
    suppress_cmd_energy: bool,
    log: Vec<TimedCommand>,
    timelines: Vec<BankTimeline>,
    pub ledger: EnergyLedger,
    pub calibration: Calibration,
    per_cmd_fj: [u64; 5],
    pub counters: Counters,
    dst_block: Option<(u64, u64)>,
    mapped_pages: Option<BTreeSet<u64>>,
}

impl Engine {
    pub fn new(cfg: &DeviceConfig, mechanism: Mechanism) -> Result<Self> {
        cfg.validate()?;
        if cfg.rows_per_subarray < 8 {
            return Err(Error::Config(
                "rows_per_subarray must be >= 8 to hold the reserved rows".into(),
            ));
        }
        let reserved = ReservedLayout::new(cfg);
        let mut remaps = BTreeMap::new();
        let dram = DramState::new(cfg);
        for &(faulty, spare) in &cfg.row_remaps {
            for (what, row) in [("faulty", faulty), ("spare", spare)] {
                if row >= dram.total_rows() {
                    return Err(Error::Config(format!(
                        "row_remaps: {what} row {row} out of range"
                    )));
                }
            }
            if dram.bank_of_row(faulty) != dram.bank_of_row(spare) {
                return Err(Error::Config(
                    "row_remaps: spare must live in the same bank as the faulty row".into(),
                ));
            }
            remaps.insert(faulty, spare);
        }
        let calibration = calibrate_per_command(&REFERENCE_TABLE)?;
        let per_cmd_fj = calibration
            .constants
            .as_array()
            .map(|uj| (uj * crate::energy::FJ_PER_UJ as f64).round() as u64);
        let mut engine = Engine {
            dram,
            llc: Llc::new(cfg.llc_capacity_bytes, cfg.llc_ways, cfg.cacheline_bytes),
            mechanism,
            reserved,
            remaps,
            clock: 0.0,
            op_end: 0.0,
            op_acct_adjust: 0.0,
            current_class: OpClass::Read,
            suppress_cmd_energy: false,
            log: Vec::new(),
            timelines: vec![
                BankTimeline::default();
                (cfg.channels * cfg.ranks_per_channel * cfg.banks_per_chip) as usize
            ],
            ledger: EnergyLedger::default(),
            calibration,
            per_cmd_fj,
            counters: Counters::default(),
            dst_block: None,
            mapped_pages: None,
            cfg: cfg.clone(),
        };
        // Control rows holding all-ones must exist before any bitwise op.
        for gsub in 0..engine.reserved.total_subarrays() {
            engine
                .dram
                .init_row_fill(engine.reserved.c1_row(gsub), 0xFF);
        }
        Ok(engine)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn log(&self) -> &[TimedCommand] {
        &self.log
    }

    /// Restrict the mapped address space to the given pages; accesses
    /// outside it raise a page fault that the stub handler resolves by
    /// mapping the page, after which the operation resumes.
    pub fn set_mapped_pages(&mut self, pages: BTreeSet<u64>) {
        self.mapped_pages = Some(pages);
    }

    pub(crate) fn page_guard(&mut self, start: u64, len: u64) {
        if len == 0 {
            return;
        }
        if let Some(mapped) = &mut self.mapped_pages {
            for page in start / PAGE_SIZE..=(start + len - 1) / PAGE_SIZE {
                if mapped.insert(page) {
                    self.counters.page_faults += 1;
                }
            }
        }
    }

    /// Faulty-row indirection. Every access resolves through this map.
    pub(crate) fn resolve_row(&self, grow: u64) -> u64 {
        self.remaps.get(&grow).copied().unwrap_or(grow)
    }

    /// Reject user-visible writes that would land in a reserved row.
    pub(crate) fn check_user_region(&self, start: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        let line = self.cfg.cacheline_bytes;
        for l in start / line..=(start + len - 1) / line {
            let loc = self.decode(l * line)?;
            let grow = self.grow_of(&loc);
            if self.reserved.is_reserved_row(grow) {
                return Err(Error::ReservedRowTarget { row: grow });
            }
        }
        Ok(())
    }

    pub(crate) fn decode(&self, address: u64) -> Result<Location> {
        addr::decode_address(address, &self.cfg)
    }

    /// Global row of the line at `address`, remap-resolved.
    pub(crate) fn grow_of(&self, loc: &Location) -> u64 {
        self.resolve_row(addr::global_row(loc, &self.cfg))
    }

    // ------------------------------------------------------------------
    // Operation bracketing and destination blocking
    // ------------------------------------------------------------------

    pub(crate) fn begin_op(&mut self, class: OpClass) -> f64 {
        self.current_class = class;
        self.op_end = self.clock;
        self.op_acct_adjust = 0.0;
        self.clock
    }

    pub(crate) fn end_op(&mut self, start: f64) -> f64 {
        self.clock = self.op_end.max(start);
        let acct = (self.clock - start) + self.op_acct_adjust;
        *self
            .counters
            .latency_by_class
            .entry(self.current_class.name())
            .or_insert(0.0) += acct;
        self.counters.total_latency_ns += acct;
        acct
    }

    /// Accounted latency may differ from the command schedule (tabulated
    /// conservative AND/OR figure); the difference lands here.
    pub(crate) fn adjust_accounting(&mut self, delta: f64) {
        self.op_acct_adjust += delta;
    }

    pub(crate) fn block_destination(&mut self, start: u64, len: u64) {
        self.dst_block = Some((start, start + len));
    }

    pub(crate) fn unblock_destination(&mut self) {
        self.dst_block = None;
    }

    pub fn destination_blocked(&self) -> Option<(u64, u64)> {
        self.dst_block
    }

    fn assert_not_blocked(&self, address: u64) {
        if let Some((s, e)) = self.dst_block {
            assert!(
                address + self.cfg.cacheline_bytes <= s || address >= e,
                "request to {address:#x} while destination region {s:#x}..{e:#x} is blocked"
            );
        }
    }

    // ------------------------------------------------------------------
    // Command emission
    // ------------------------------------------------------------------

    fn gbank_coords(&self, gbank: u64) -> (u64, u64, u64) {
        let banks = self.cfg.banks_per_chip;
        let ranks = self.cfg.ranks_per_channel;
        (
            gbank / (ranks * banks),
            (gbank / banks) % ranks,
            gbank % banks,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        kind: CommandKind,
        gbank: u64,
        subarray: Option<u64>,
        row: Option<u64>,
        column: Option<u64>,
        src_gbank: Option<u64>,
        not_before: f64,
        overlapped: bool,
    ) -> (f64, f64) {
        let mut issue = earliest_issue(
            kind,
            &self.timelines[gbank as usize],
            not_before,
            &self.cfg.timing,
        );
        if let Some(src) = src_gbank {
            issue = issue.max(earliest_issue(
                kind,
                &self.timelines[src as usize],
                not_before,
                &self.cfg.timing,
            ));
        }
        if overlapped {
            // The overlapped activation only needs the precharge spacing.
            issue = not_before
                .max(self.timelines[gbank as usize].last_precharge_issue + self.cfg.timing.t_rp);
        }
        let complete = issue + command_duration(kind, overlapped, &self.cfg.timing);
        let (channel, rank, bank) = self.gbank_coords(gbank);
        let cmd = TimedCommand {
            kind,
            channel,
            rank,
            bank,
            gbank,
            subarray,
            row,
            column,
            src_gbank,
            issue_time: issue,
            complete_time: complete,
            overlapped,
        };
        apply_to_timeline(&cmd, &mut self.timelines[gbank as usize]);
        self.op_end = self.op_end.max(complete);
        if matches!(kind, CommandKind::Read | CommandKind::Write) {
            self.counters
                .bytes(self.current_class, self.cfg.cacheline_bytes);
        }
        if !self.suppress_cmd_energy {
            let fj = if overlapped {
                0
            } else {
                match kind {
                    CommandKind::Activate => self.per_cmd_fj[0],
                    CommandKind::Precharge => self.per_cmd_fj[1],
                    CommandKind::Read | CommandKind::Write => self.per_cmd_fj[2],
                    CommandKind::Transfer => self.per_cmd_fj[3],
                    CommandKind::MultiActivate => self.per_cmd_fj[4],
                }
            };
            self.ledger.add_fj(self.current_class, fj);
        }
        self.log.push(cmd);
        (issue, complete)
    }

    /// Suppress per-command energy while a table-driven charge covers the
    /// commands about to be emitted.
    pub(crate) fn with_table_charge<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let suppress = self.cfg.energy_mode == EnergyMode::TableDriven;
        let saved = self.suppress_cmd_energy;
        self.suppress_cmd_energy = saved || suppress;
        let out = f(self);
        self.suppress_cmd_energy = saved;
        out
    }

    /// Table-driven charge for a bulk portion; no-op in per-command mode
    /// (the commands themselves carried the energy). `class` picks the
    /// ledger category, `table_op` the table row (initialization copies are
    /// priced as copies but accounted under their own category).
    pub(crate) fn charge_table(
        &mut self,
        class: OpClass,
        table_op: OpClass,
        mechanism: MechKind,
        bytes: u64,
    ) -> Result<()> {
        if self.cfg.energy_mode == EnergyMode::TableDriven {
            let fj = crate::energy::table_energy_fj(table_op, mechanism, bytes)?;
            self.ledger.add_fj(class, fj);
        }
        Ok(())
    }

    pub(crate) fn cmd_activate(
        &mut self,
        grow: u64,
        not_before: f64,
        overlapped: bool,
    ) -> Result<(f64, f64)> {
        let gbank = self.dram.bank_of_row(grow);
        let sub = self.dram.subarray_of_row(grow);
        let row = grow % self.cfg.rows_per_subarray;
        let (i, c) = self.emit(
            CommandKind::Activate,
            gbank,
            Some(sub),
            Some(row),
            None,
            None,
            not_before,
            overlapped,
        );
        self.dram.activate(grow, i)?;
        Ok((i, c))
    }

    pub(crate) fn cmd_precharge(&mut self, gbank: u64, not_before: f64) -> (f64, f64) {
        let (i, c) = self.emit(
            CommandKind::Precharge,
            gbank,
            None,
            None,
            None,
            None,
            not_before,
            false,
        );
        self.dram.precharge(gbank);
        (i, c)
    }

    pub(crate) fn cmd_multi_activate(
        &mut self,
        grows: [u64; 3],
        not_before: f64,
    ) -> Result<(f64, f64)> {
        let gbank = self.dram.bank_of_row(grows[0]);
        let sub = self.dram.subarray_of_row(grows[0]);
        let row = grows[0] % self.cfg.rows_per_subarray;
        let (i, c) = self.emit(
            CommandKind::MultiActivate,
            gbank,
            Some(sub),
            Some(row),
            None,
            None,
            not_before,
            false,
        );
        self.dram.multi_activate(grows, i)?;
        Ok((i, c))
    }

    pub(crate) fn cmd_read(
        &mut self,
        grow: u64,
        column: u64,
        not_before: f64,
    ) -> Result<(Vec<u8>, f64, f64)> {
        let gbank = self.dram.bank_of_row(grow);
        let sub = self.dram.subarray_of_row(grow);
        let row = grow % self.cfg.rows_per_subarray;
        let (i, c) = self.emit(
            CommandKind::Read,
            gbank,
            Some(sub),
            Some(row),
            Some(column),
            None,
            not_before,
            false,
        );
        let data = self.dram.column_read(gbank, column)?;
        Ok((data, i, c))
    }

    pub(crate) fn cmd_write(
        &mut self,
        grow: u64,
        column: u64,
        data: &[u8],
        not_before: f64,
    ) -> Result<(f64, f64)> {
        let gbank = self.dram.bank_of_row(grow);
        let sub = self.dram.subarray_of_row(grow);
        let row = grow % self.cfg.rows_per_subarray;
        let (i, c) = self.emit(
            CommandKind::Write,
            gbank,
            Some(sub),
            Some(row),
            Some(column),
            None,
            not_before,
            false,
        );
        self.dram.column_write(gbank, column, data)?;
        Ok((i, c))
    }

    pub(crate) fn cmd_transfer(
        &mut self,
        src_grow: u64,
        src_col: u64,
        dst_grow: u64,
        dst_col: u64,
        not_before: f64,
    ) -> Result<(f64, f64)> {
        let src_bank = self.dram.bank_of_row(src_grow);
        let dst_bank = self.dram.bank_of_row(dst_grow);
        let sub = self.dram.subarray_of_row(dst_grow);
        let row = dst_grow % self.cfg.rows_per_subarray;
        let (i, c) = self.emit(
            CommandKind::Transfer,
            dst_bank,
            Some(sub),
            Some(row),
            Some(dst_col),
            Some(src_bank),
            not_before,
            false,
        );
        self.dram.transfer(src_bank, src_col, dst_bank, dst_col)?;
        Ok((i, c))
    }

    // ------------------------------------------------------------------
    // Row-granular access helpers
    // ------------------------------------------------------------------

    /// Make sure `grow` is the (only) open row of its bank, precharging
    /// first when another row sits in the amplifiers. Returns the cursor
    /// after any commands issued.
    pub(crate) fn ensure_row_open(&mut self, grow: u64, cursor: f64) -> Result<f64> {
        let gbank = self.dram.bank_of_row(grow);
        if self.dram.connected_rows(gbank) == [grow] {
            return Ok(cursor);
        }
        let mut cursor = cursor;
        if !self.dram.is_precharged(gbank) {
            cursor = self.cmd_precharge(gbank, cursor).0;
        }
        let (issue, _) = self.cmd_activate(grow, cursor, false)?;
        Ok(issue)
    }

    /// Close a bank if it has anything open.
    pub(crate) fn ensure_precharged(&mut self, gbank: u64, cursor: f64) -> f64 {
        if self.dram.is_precharged(gbank) {
            cursor
        } else {
            self.cmd_precharge(gbank, cursor).1
        }
    }

    // ------------------------------------------------------------------
    // DMA-style streams (baseline bulk operations, CPU remainders)
    // ------------------------------------------------------------------

    /// Stream cachelines to/from DRAM without touching the LLC. Lines are
    /// grouped by row; each group costs one activate, one column command
    /// per line at the line cadence, and one precharge, reproducing the
    /// `t_oh + n * t_line` row-stream model.
    pub(crate) fn dma_stream(
        &mut self,
        lines: &[DmaLine],
        cursor: f64,
    ) -> Result<(Vec<Vec<u8>>, f64)> {
        let mut reads = Vec::new();
        let mut cursor = cursor;
        let mut i = 0;
        while i < lines.len() {
            let grow = self.grow_of(&lines[i].loc);
            let mut j = i;
            while j < lines.len() && self.grow_of(&lines[j].loc) == grow {
                j += 1;
            }
            let gbank = self.dram.bank_of_row(grow);
            cursor = self.ensure_precharged(gbank, cursor);
            let (act_issue, _) = self.cmd_activate(grow, cursor, false)?;
            let mut col_cursor = act_issue;
            let mut last_complete = act_issue;
            for line in &lines[i..j] {
                let col = line.loc.column;
                let times = match &line.write {
                    Some(data) => self.cmd_write(grow, col, data, col_cursor)?,
                    None => {
                        let (data, issue, complete) = self.cmd_read(grow, col, col_cursor)?;
                        reads.push(data);
                        (issue, complete)
                    }
                };
                col_cursor = times.0 + self.cfg.timing.t_line;
                last_complete = times.1;
            }
            let (_, pre_complete) = {
                let pre_at = last_complete + self.cfg.timing.t_wr;
                let (issue, complete) = self.cmd_precharge_at(gbank, pre_at);
                (issue, complete)
            };
            cursor = pre_complete;
            i = j;
        }
        Ok((reads, cursor))
    }

    fn cmd_precharge_at(&mut self, gbank: u64, not_before: f64) -> (f64, f64) {
        let times = self.emit(
            CommandKind::Precharge,
            gbank,
            None,
            None,
            None,
            None,
            not_before,
            false,
        );
        self.dram.precharge(gbank);
        times
    }

    fn touched_lines(&self, start: u64, len: u64) -> Vec<u64> {
        if len == 0 {
            return Vec::new();
        }
        let line = self.cfg.cacheline_bytes;
        let first = start / line;
        let last = (start + len - 1) / line;
        (first..=last).map(|l| l * line).collect()
    }

    /// Read an arbitrary byte range through DMA streams; returns the bytes.
    pub(crate) fn cpu_read_bytes(
        &mut self,
        start: u64,
        len: u64,
        cursor: f64,
    ) -> Result<(Vec<u8>, f64)> {
        let line = self.cfg.cacheline_bytes;
        let mut dma = Vec::new();
        for line_addr in self.touched_lines(start, len) {
            dma.push(DmaLine {
                loc: self.decode(line_addr)?,
                write: None,
            });
        }
        let (lines_data, cursor) = self.dma_stream(&dma, cursor)?;
        let mut bytes = Vec::with_capacity(len as usize);
        let first_line = start / line * line;
        for (k, data) in lines_data.iter().enumerate() {
            let line_start = first_line + k as u64 * line;
            let from = start.max(line_start);
            let to = (start + len).min(line_start + line);
            bytes
                .extend_from_slice(&data[(from - line_start) as usize..(to - line_start) as usize]);
        }
        Ok((bytes, cursor))
    }

    /// Write an arbitrary byte range through DMA streams. Partial boundary
    /// lines are read first and merged.
    pub(crate) fn cpu_write_bytes(&mut self, start: u64, bytes: &[u8], cursor: f64) -> Result<f64> {
        let len = bytes.len() as u64;
        if len == 0 {
            return Ok(cursor);
        }
        let line = self.cfg.cacheline_bytes;
        let mut dma = Vec::new();
        for line_addr in self.touched_lines(start, len) {
            let from = start.max(line_addr);
            let to = (start + len).min(line_addr + line);
            let loc = self.decode(line_addr)?;
            let mut data = if to - from < line {
                // Merge with the current memory contents of the line.
                let grow = self.grow_of(&loc);
                self.dram.row_data(grow)
                    [(loc.column * line) as usize..((loc.column + 1) * line) as usize]
                    .to_vec()
            } else {
                vec![0u8; line as usize]
            };
            let off = (from - line_addr) as usize;
            data[off..off + (to - from) as usize]
                .copy_from_slice(&bytes[(from - start) as usize..(to - start) as usize]);
            dma.push(DmaLine {
                loc,
                write: Some(data),
            });
        }
        let (_, cursor) = self.dma_stream(&dma, cursor)?;
        Ok(cursor)
    }

    // ------------------------------------------------------------------
    // Host (cache-mediated) line accesses
    // ------------------------------------------------------------------

    fn line_of(&self, address: u64) -> u64 {
        address / self.cfg.cacheline_bytes
    }

    /// Write back one dirty line to DRAM under the open-page policy.
    pub(crate) fn writeback_line(
        &mut self,
        line_addr: u64,
        data: &[u8],
        cursor: f64,
    ) -> Result<f64> {
        let loc = self.decode(line_addr)?;
        let grow = self.grow_of(&loc);
        let cursor = self.ensure_row_open(grow, cursor)?;
        let (_, complete) = self.cmd_write(grow, loc.column, data, cursor)?;
        Ok(complete)
    }

    fn fill_line(&mut self, line_addr: u64, cursor: f64) -> Result<(Vec<u8>, f64)> {
        let loc = self.decode(line_addr)?;
        let grow = self.grow_of(&loc);
        let cursor = self.ensure_row_open(grow, cursor)?;
        let (data, _, complete) = self.cmd_read(grow, loc.column, cursor)?;
        Ok((data, complete))
    }

    /// Demand read of one cacheline through the LLC.
    pub fn host_read_line(&mut self, address: u64) -> Result<Vec<u8>> {
        self.assert_not_blocked(self.line_of(address) * self.cfg.cacheline_bytes);
        self.page_guard(address, 1);
        let start = self.begin_op(OpClass::Read);
        let line_addr = self.line_of(address) * self.cfg.cacheline_bytes;
        let data = match self.llc.lookup(self.line_of(address)) {
            Some(data) => data,
            None => {
                let (data, cursor) = self.fill_line(line_addr, start)?;
                if let Some(ev) = self.llc.insert(self.line_of(address), &data, false) {
                    let ev_addr = ev.line_addr * self.cfg.cacheline_bytes;
                    self.writeback_line(ev_addr, &ev.data, cursor)?;
                }
                data
            }
        };
        self.end_op(start);
        Ok(data)
    }

    /// Demand write of one full cacheline through the LLC (write-allocate,
    /// no fetch).
    pub fn host_write_line(&mut self, address: u64, data: &[u8]) -> Result<()> {
        let line_addr = self.line_of(address) * self.cfg.cacheline_bytes;
        self.assert_not_blocked(line_addr);
        self.check_user_region(line_addr, self.cfg.cacheline_bytes)?;
        self.page_guard(address, 1);
        let start = self.begin_op(OpClass::Write);
        if !self.llc.write_hit(self.line_of(address), data) {
            if let Some(ev) = self.llc.insert(self.line_of(address), data, true) {
                let ev_addr = ev.line_addr * self.cfg.cacheline_bytes;
                self.writeback_line(ev_addr, &ev.data, start)?;
            }
        }
        self.end_op(start);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Coherent view and verification hooks
    // ------------------------------------------------------------------

    /// The memory system as the processor sees it: cache contents overlaid
    /// on DRAM.
    pub fn coherent_bytes(&self, start: u64, len: u64) -> Vec<u8> {
        let line = self.cfg.cacheline_bytes;
        let mut out = Vec::with_capacity(len as usize);
        let mut addr = start;
        while addr < start + len {
            let line_addr = addr / line * line;
            let take = ((line_addr + line).min(start + len) - addr) as usize;
            let off = (addr - line_addr) as usize;
            match self.llc.probe(addr / line) {
                Some((_, data)) => out.extend_from_slice(&data[off..off + take]),
                None => {
                    let loc = addr::decode_address(line_addr, &self.cfg).expect("in range");
                    let grow = self.resolve_row(addr::global_row(&loc, &self.cfg));
                    let base = (loc.column * line) as usize + off;
                    out.extend_from_slice(&self.dram.row_data(grow)[base..base + take]);
                }
            }
            addr = line_addr + line;
        }
        out
    }

    /// Re-check the whole command log against the timing constraints.
    pub fn validate_timing(&self) -> Vec<Violation> {
        validate_log(&self.log, &self.cfg.timing)
    }

    /// Panics if a reserved row lost its required contents.
    pub fn assert_reserved_integrity(&self) {
        for gsub in 0..self.reserved.total_subarrays() {
            let zero = self.reserved.zero_row(gsub);
            assert!(
                self.dram.row_data(zero).iter().all(|&b| b == 0),
                "zero row of subarray {gsub} dirtied"
            );
            let c0 = self.reserved.c0_row(gsub);
            assert!(
                self.dram.row_data(c0).iter().all(|&b| b == 0),
                "c0 row of subarray {gsub} dirtied"
            );
            let c1 = self.reserved.c1_row(gsub);
            assert!(
                self.dram.row_data(c1).iter().all(|&b| b == 0xFF),
                "c1 row of subarray {gsub} dirtied"
            );
        }
    }

    /// Dump all allocated rows as hex, one row per line.
    pub fn dump_state<W: Write>(&self, mut w: W) -> io::Result<()> {
        for grow in 0..self.dram.total_rows() {
            if !self.dram.row_is_allocated(grow) {
                continue;
            }
            let loc = addr::row_location(grow, &self.cfg);
            writeln!(
                w,
                "# channel={} rank={} bank={} subarray={} row={}",
                loc.channel, loc.rank, loc.bank, loc.subarray, loc.row
            )?;
            let mut hex = String::with_capacity(2 * self.cfg.row_size_bytes as usize);
            for b in self.dram.row_data(grow) {
                hex.push_str(&format!("{b:02x}"));
            }
            writeln!(w, "{hex}")?;
        }
        Ok(())
    }
}
