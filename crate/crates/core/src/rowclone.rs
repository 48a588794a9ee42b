//! In-DRAM bulk copy and initialization.
//!
//! * FPM: two back-to-back activations copy a row within its subarray.
//! * PSM: TRANSFER commands pipeline cachelines between two open banks.
//! * Intra-bank copies chain two PSM hops through a temporary row reserved
//!   in the next bank.
//! * Bulk zeroing copies from a per-subarray reserved row that always holds
//!   zeros; other fill values are staged into a temporary row once and then
//!   copied.
//!
//! Reserved rows sit at the top of each subarray: the zero row, then T1-T3
//! and the two control rows used by the bitwise unit. The per-bank temporary
//! row lives just below them in the bank's last subarray.

use crate::config::DeviceConfig;
use crate::energy::{MechKind, OpClass};
use crate::engine::Engine;
use crate::error::{Error, Result};

/// Placement of reserved rows, derived from the geometry.
#[derive(Debug, Clone, Copy)]
pub struct ReservedLayout {
    pub rows_per_subarray: u64,
    pub subarrays_per_bank: u64,
    pub total_banks: u64,
}

impl ReservedLayout {
    pub fn new(cfg: &DeviceConfig) -> Self {
        ReservedLayout {
            rows_per_subarray: cfg.rows_per_subarray,
            subarrays_per_bank: cfg.subarrays_per_bank,
            total_banks: cfg.channels * cfg.ranks_per_channel * cfg.banks_per_chip,
        }
    }

    pub fn total_subarrays(&self) -> u64 {
        self.total_banks * self.subarrays_per_bank
    }

    fn row_in(&self, gsub: u64, row: u64) -> u64 {
        gsub * self.rows_per_subarray + row
    }

    /// The always-zero row of a subarray.
    pub fn zero_row(&self, gsub: u64) -> u64 {
        self.row_in(gsub, self.rows_per_subarray - 1)
    }

    pub fn t1_row(&self, gsub: u64) -> u64 {
        self.row_in(gsub, self.rows_per_subarray - 2)
    }

    pub fn t2_row(&self, gsub: u64) -> u64 {
        self.row_in(gsub, self.rows_per_subarray - 3)
    }

    pub fn t3_row(&self, gsub: u64) -> u64 {
        self.row_in(gsub, self.rows_per_subarray - 4)
    }

    /// Control row pre-initialized to all zeros.
    pub fn c0_row(&self, gsub: u64) -> u64 {
        self.row_in(gsub, self.rows_per_subarray - 5)
    }

    /// Control row pre-initialized to all ones.
    pub fn c1_row(&self, gsub: u64) -> u64 {
        self.row_in(gsub, self.rows_per_subarray - 6)
    }

    /// The temporary row of a bank (staging for intra-bank copies and
    /// non-zero initialization), placed in the bank's last subarray.
    pub fn tmp_row(&self, gbank: u64) -> u64 {
        let gsub = gbank * self.subarrays_per_bank + self.subarrays_per_bank - 1;
        self.row_in(gsub, self.rows_per_subarray - 7)
    }

    pub fn is_reserved_row(&self, grow: u64) -> bool {
        let row = grow % self.rows_per_subarray;
        if row >= self.rows_per_subarray - 6 {
            return true;
        }
        let gsub = grow / self.rows_per_subarray;
        let sub = gsub % self.subarrays_per_bank;
        sub == self.subarrays_per_bank - 1 && row == self.rows_per_subarray - 7
    }

    /// Capacity fraction lost to the per-subarray zero row.
    pub fn zero_row_overhead(&self) -> f64 {
        1.0 / self.rows_per_subarray as f64
    }

    /// Capacity fraction lost to the per-bank temporary row.
    pub fn tmp_row_overhead(&self) -> f64 {
        1.0 / (self.rows_per_subarray * self.subarrays_per_bank) as f64
    }

    /// Capacity fraction lost to the five per-subarray bitwise rows.
    pub fn bitwise_overhead(&self) -> f64 {
        5.0 / self.rows_per_subarray as f64
    }
}

impl Engine {
    fn gsub_of(&self, grow: u64) -> u64 {
        grow / self.cfg.rows_per_subarray
    }

    fn check_user_row(&self, grow: u64) -> Result<()> {
        if self.reserved.is_reserved_row(grow) {
            return Err(Error::ReservedRowTarget { row: grow });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Raw command sequences (no accounting)
    // ------------------------------------------------------------------

    /// ACTIVATE src, ACTIVATE dst, PRECHARGE. In aggressive mode the second
    /// activation overlaps the tail of the first tRAS window.
    pub(crate) fn seq_fpm_copy(&mut self, src: u64, dst: u64, cursor: f64) -> Result<f64> {
        let gbank = self.dram.bank_of_row(src);
        let cursor = self.ensure_precharged(gbank, cursor);
        let (src_issue, src_complete) = self.cmd_activate(src, cursor, false)?;
        let aggressive = matches!(
            self.cfg.fpm_latency_mode,
            crate::config::FpmLatencyMode::Aggressive
        );
        let (_, pre_complete) = if aggressive {
            self.cmd_activate(dst, src_issue + self.cfg.timing.t_ras, true)?;
            self.cmd_precharge(gbank, src_issue + self.cfg.timing.t_ras)
        } else {
            let (dst_issue, _) = self.cmd_activate(dst, src_complete, false)?;
            self.cmd_precharge(gbank, dst_issue + self.cfg.timing.t_ras)
        };
        Ok(pre_complete)
    }

    /// ACTIVATE both banks, one TRANSFER per column pair, PRECHARGE both.
    pub(crate) fn seq_psm_copy(
        &mut self,
        src: u64,
        dst: u64,
        cols: &[(u64, u64)],
        cursor: f64,
    ) -> Result<f64> {
        let src_bank = self.dram.bank_of_row(src);
        let dst_bank = self.dram.bank_of_row(dst);
        if src_bank == dst_bank {
            return Err(Error::SameBankTransfer);
        }
        let cursor = self.ensure_precharged(src_bank, cursor);
        let cursor = self.ensure_precharged(dst_bank, cursor);
        let (a_issue, _) = self.cmd_activate(src, cursor, false)?;
        let (b_issue, _) = self.cmd_activate(dst, cursor, false)?;
        let mut not_before = a_issue.max(b_issue);
        let mut last_complete = not_before;
        for &(src_col, dst_col) in cols {
            let (issue, complete) = self.cmd_transfer(src, src_col, dst, dst_col, not_before)?;
            not_before = issue + self.cfg.timing.t_transfer;
            last_complete = complete;
        }
        let pre_at = last_complete + self.cfg.timing.t_wr;
        self.cmd_precharge(src_bank, pre_at);
        let (_, done) = self.cmd_precharge(dst_bank, pre_at);
        Ok(done)
    }

    // ------------------------------------------------------------------
    // Accounted portion executors (cursor-chained, used by the controller)
    // ------------------------------------------------------------------

    pub(crate) fn do_fpm_copy(
        &mut self,
        src: u64,
        dst: u64,
        class: OpClass,
        cursor: f64,
    ) -> Result<f64> {
        if src == dst {
            return Err(Error::SameRow);
        }
        let same_bank = self.dram.bank_of_row(src) == self.dram.bank_of_row(dst);
        if !same_bank || self.gsub_of(src) != self.gsub_of(dst) {
            return Err(Error::SubarrayMismatch { a: src, b: dst });
        }
        let end = self.with_table_charge(|e| e.seq_fpm_copy(src, dst, cursor))?;
        self.charge_table(
            class,
            if class == OpClass::Zero {
                OpClass::Zero
            } else {
                OpClass::Copy
            },
            MechKind::Fpm,
            self.cfg.row_size_bytes,
        )?;
        self.counters.count(if class == OpClass::Zero {
            "zero_fpm"
        } else {
            "fpm_copy"
        });
        Ok(end)
    }

    pub(crate) fn do_psm_copy(
        &mut self,
        src: u64,
        dst: u64,
        cols: &[(u64, u64)],
        class: OpClass,
        cursor: f64,
    ) -> Result<f64> {
        let end = self.with_table_charge(|e| e.seq_psm_copy(src, dst, cols, cursor))?;
        self.charge_table(
            class,
            OpClass::Copy,
            MechKind::PsmInterBank,
            cols.len() as u64 * self.cfg.cacheline_bytes,
        )?;
        self.counters.count("psm_inter_bank");
        Ok(end)
    }

    /// Same bank, different subarrays: two PSM hops through the temporary
    /// row of the next bank.
    pub(crate) fn do_intra_copy(
        &mut self,
        src: u64,
        dst: u64,
        class: OpClass,
        cursor: f64,
    ) -> Result<f64> {
        if self.reserved.total_banks < 2 {
            return Err(Error::FallbackToCpu);
        }
        let src_bank = self.dram.bank_of_row(src);
        let tmp = self
            .reserved
            .tmp_row((src_bank + 1) % self.reserved.total_banks);
        let cols: Vec<(u64, u64)> = (0..self.cfg.lines_per_row()).map(|c| (c, c)).collect();
        let end = self.with_table_charge(|e| {
            let mid = e.seq_psm_copy(src, tmp, &cols, cursor)?;
            e.seq_psm_copy(tmp, dst, &cols, mid)
        })?;
        self.charge_table(
            class,
            OpClass::Copy,
            MechKind::PsmIntraBank,
            self.cfg.row_size_bytes,
        )?;
        self.counters.count("psm_intra_bank");
        Ok(end)
    }

    /// Full-row copy dispatch: FPM within a subarray, PSM across banks, two
    /// PSM hops within a bank.
    pub(crate) fn do_row_copy(
        &mut self,
        src: u64,
        dst: u64,
        class: OpClass,
        cursor: f64,
    ) -> Result<f64> {
        if src == dst {
            return Err(Error::SameRow);
        }
        if self.gsub_of(src) == self.gsub_of(dst) {
            self.do_fpm_copy(src, dst, class, cursor)
        } else if self.dram.bank_of_row(src) != self.dram.bank_of_row(dst) {
            let cols: Vec<(u64, u64)> = (0..self.cfg.lines_per_row()).map(|c| (c, c)).collect();
            self.do_psm_copy(src, dst, &cols, class, cursor)
        } else {
            self.do_intra_copy(src, dst, class, cursor)
        }
    }

    /// Zero a row by copying from the subarray's reserved zero row.
    pub(crate) fn do_zero_row(&mut self, dst: u64, cursor: f64) -> Result<f64> {
        let zero = self.reserved.zero_row(self.gsub_of(dst));
        if dst == zero || self.reserved.is_reserved_row(dst) {
            return Err(Error::ReservedRowTarget { row: dst });
        }
        self.do_fpm_copy(zero, dst, OpClass::Zero, cursor)
    }

    /// Write a fill row into the staging row via column writes (one channel
    /// stream), charged as a baseline-style initialization of one row.
    pub(crate) fn do_stage_value_row(
        &mut self,
        staging: u64,
        value_row: &[u8],
        cursor: f64,
    ) -> Result<f64> {
        assert_eq!(value_row.len() as u64, self.cfg.row_size_bytes);
        let line = self.cfg.cacheline_bytes as usize;
        let end = self.with_table_charge(|e| {
            let gbank = e.dram.bank_of_row(staging);
            let cursor = e.ensure_precharged(gbank, cursor);
            let (act_issue, _) = e.cmd_activate(staging, cursor, false)?;
            let mut col_cursor = act_issue;
            let mut last_complete = act_issue;
            for col in 0..e.cfg.lines_per_row() {
                let data = &value_row[col as usize * line..(col as usize + 1) * line];
                let (issue, complete) = e.cmd_write(staging, col, data, col_cursor)?;
                col_cursor = issue + e.cfg.timing.t_line;
                last_complete = complete;
            }
            let (_, done) = e.cmd_precharge(gbank, last_complete + e.cfg.timing.t_wr);
            Ok(done)
        })?;
        self.charge_table(
            OpClass::Zero,
            OpClass::Zero,
            MechKind::Baseline,
            self.cfg.row_size_bytes,
        )?;
        Ok(end)
    }

    // ------------------------------------------------------------------
    // Public operations (self-contained accounting)
    // ------------------------------------------------------------------

    /// Copy one row onto another within a subarray.
    pub fn fpm_copy(&mut self, src: u64, dst: u64) -> Result<()> {
        let (src, dst) = (self.resolve_row(src), self.resolve_row(dst));
        self.check_user_row(src)?;
        self.check_user_row(dst)?;
        let start = self.begin_op(OpClass::Copy);
        self.do_fpm_copy(src, dst, OpClass::Copy, start)?;
        self.end_op(start);
        Ok(())
    }

    /// Copy a range of cachelines between rows of two different banks.
    pub fn psm_copy(&mut self, src: u64, dst: u64, line_start: u64, line_count: u64) -> Result<()> {
        let (src, dst) = (self.resolve_row(src), self.resolve_row(dst));
        let lines = self.cfg.lines_per_row();
        if line_start + line_count > lines || line_count == 0 {
            return Err(Error::AddressRange {
                addr: line_start + line_count,
                bound: lines,
                what: "column",
            });
        }
        let start = self.begin_op(OpClass::Copy);
        let cols: Vec<(u64, u64)> = (line_start..line_start + line_count)
            .map(|c| (c, c))
            .collect();
        self.do_psm_copy(src, dst, &cols, OpClass::Copy, start)?;
        self.end_op(start);
        Ok(())
    }

    /// Full-row copy with automatic mechanism choice.
    pub fn bulk_copy(&mut self, src: u64, dst: u64) -> Result<()> {
        let (src, dst) = (self.resolve_row(src), self.resolve_row(dst));
        self.check_user_row(src)?;
        self.check_user_row(dst)?;
        let start = self.begin_op(OpClass::Copy);
        self.do_row_copy(src, dst, OpClass::Copy, start)?;
        self.end_op(start);
        Ok(())
    }

    /// Zero a full row in-DRAM.
    pub fn bulk_zero(&mut self, dst: u64) -> Result<()> {
        let dst = self.resolve_row(dst);
        let start = self.begin_op(OpClass::Zero);
        self.do_zero_row(dst, start)?;
        self.end_op(start);
        Ok(())
    }

    /// Fill rows with an arbitrary value: one staging write, then one copy
    /// per destination row.
    pub fn bulk_init(&mut self, dst_rows: &[u64], value_row: &[u8]) -> Result<()> {
        let dst_rows: Vec<u64> = dst_rows.iter().map(|&r| self.resolve_row(r)).collect();
        let dst_rows = &dst_rows[..];
        for &dst in dst_rows {
            self.check_user_row(dst)?;
        }
        let start = self.begin_op(OpClass::Zero);
        let mut cursor = start;
        if let Some(&first) = dst_rows.first() {
            if self.reserved.total_banks < 2 {
                return Err(Error::FallbackToCpu);
            }
            let staging_bank = (self.dram.bank_of_row(first) + 1) % self.reserved.total_banks;
            let staging = self.reserved.tmp_row(staging_bank);
            cursor = self.do_stage_value_row(staging, value_row, cursor)?;
            for &dst in dst_rows {
                cursor = self.do_row_copy(staging, dst, OpClass::Zero, cursor)?;
                self.counters.count("bulk_init_rows");
            }
        }
        self.end_op(start);
        Ok(())
    }
}
