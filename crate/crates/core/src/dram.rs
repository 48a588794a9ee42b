//! Functional DRAM state machine: cells, sense amplifiers, and the command
//! set (ACTIVATE, PRECHARGE, column READ/WRITE, multi-row ACTIVATE,
//! TRANSFER).
//!
//! Rows are processed as byte vector
//! s for speed; the per-bit analog path
//! (charge sharing over cell voltages) is only materialized when the decay
//! knob is on or a triple-row activation runs. Rank-level rows are flat byte
//! arrays: all chips of a rank act in lockstep, so chip boundaries are
//! invisible at this level.

use crate::config::DeviceConfig;
use crate::error::{Error, Result};

/// Stable drive directions of an enabled sense amplifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenseDrive {
    DrivingHigh,
    DrivingLow,
}

/// Observable sense-amplifier state for one bitline of a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenseAmpMode {
    Precharged,
    DrivingHigh,
    DrivingLow,
}

/// Snapshot of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub bit: bool,
    pub voltage: f64,
    pub last_refresh: f64,
}

/// The array of sense amplifiers of the open subarray, as seen by column
/// accesses.
#[derive(Debug, Clone)]
pub struct RowBuffer {
    pub data: Box<[u8]>,
    pub valid: bool,
    /// Global row index the buffer was last restored from/into.
    pub source_row: u64,
}

struct OpenState {
    subarray: u64,
    /// Global rows whose wordlines are currently raised.
    connected_rows: Vec<u64>,
    buffer: RowBuffer,
}

/// Bitline deviation after charge sharing between `voltages.len()` cells and
/// a bitline precharged to vdd/2.
///
/// With fresh cells (each voltage 0 or vdd) and three cells of which `k` are
/// charged this reduces to `(2k - 3) * Cc * vdd / (6 Cc + 2 Cb)`.
pub fn charge_share_deviation(voltages: &[f64], cc: f64, cb: f64, vdd: f64) -> Result<f64> {
    if voltages.is_empty() {
        return Err(Error::NumericDomain(
            "need at least one cell voltage".into(),
        ));
    }
    for (name, v) in [("Cc", cc), ("Cb", cb), ("vdd", vdd)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::NumericDomain(format!(
                "{name} must be finite and > 0, got {v}"
            )));
        }
    }
    let mut sum = 0.0;
    for &v in voltages {
        if !v.is_finite() || v < 0.0 || v > vdd {
            return Err(Error::NumericDomain(format!(
                "cell voltage {v} outside [0, {vdd}]"
            )));
        }
        sum += v;
    }
    let m = voltages.len() as f64;
    Ok((sum * cc + cb * vdd / 2.0) / (m * cc + cb) - vdd / 2.0)
}

/// Resolve a bitline deviation to a stable amplifier state. An exact zero is
/// surfaced as a metastable error, never silently resolved.
pub fn sense_amplify(deviation: f64) -> Result<SenseDrive> {
    if !deviation.is_finite() {
        return Err(Error::NumericDomain(format!(
            "deviation {deviation} is not finite"
        )));
    }
    if deviation > 0.0 {
        Ok(SenseDrive::DrivingHigh)
    } else if deviation < 0.0 {
        Ok(SenseDrive::DrivingLow)
    } else {
        Err(Error::MetastableSense { bit: 0 })
    }
}

pub struct DramState {
    cfg: DeviceConfig,
    /// Row contents, allocated on first touch; unallocated rows read as zero.
    rows: Vec<Option<Box<[u8]>>>,
    /// Simulation time of the last full restore of each row.
    last_refresh: Vec<f64>,
    banks: Vec<Option<OpenState>>,
    zero_template: Box<[u8]>,
}

impl DramState {
    pub fn new(cfg: &DeviceConfig) -> Self {
        let total_rows = cfg.channels
            * cfg.ranks_per_channel
            * cfg.banks_per_chip
            * cfg.subarrays_per_bank
            * cfg.rows_per_subarray;
        let total_banks = cfg.channels * cfg.ranks_per_channel * cfg.banks_per_chip;
        DramState {
            cfg: cfg.clone(),
            rows: (0..total_rows).map(|_| None).collect(),
            last_refresh: vec![0.0; total_rows as usize],
            banks: (0..total_banks).map(|_| None).collect(),
            zero_template: vec![0u8; cfg.row_size_bytes as usize].into_boxed_slice(),
        }
    }

    pub fn total_rows(&self) -> u64 {
        self.rows.len() as u64
    }

    pub fn total_banks(&self) -> u64 {
        self.banks.len() as u64
    }

    fn rows_per_bank(&self) -> u64 {
        self.cfg.subarrays_per_bank * self.cfg.rows_per_subarray
    }

    pub fn bank_of_row(&self, grow: u64) -> u64 {
        grow / self.rows_per_bank()
    }

    pub fn subarray_of_row(&self, grow: u64) -> u64 {
        (grow / self.cfg.rows_per_subarray) % self.cfg.subarrays_per_bank
    }

    fn check_row(&self, grow: u64) -> Result<()> {
        if grow >= self.total_rows() {
            return Err(Error::AddressRange {
                addr: grow,
                bound: self.total_rows(),
                what: "row",
            });
        }
        Ok(())
    }

    pub fn row_is_allocated(&self, grow: u64) -> bool {
        self.rows[grow as usize].is_some()
    }

    /// Current contents of a row (zeros if never written).
    pub fn row_data(&self, grow: u64) -> &[u8] {
        match &self.rows[grow as usize] {
            Some(data) => data,
            None => &self.zero_template,
        }
    }

    fn row_data_mut(&mut self, grow: u64) -> &mut [u8] {
        let slot = &mut self.rows[grow as usize];
        if slot.is_none() {
            *slot = Some(self.zero_template.clone());
        }
        slot.as_mut().unwrap()
    }

    /// Overwrite a row outside the command path (reserved-row setup).
    pub fn init_row_fill(&mut self, grow: u64, fill: u8) {
        self.row_data_mut(grow).fill(fill);
        self.last_refresh[grow as usize] = 0.0;
    }

    /// Preload a row's contents outside the command path (test fixtures).
    pub fn init_row_bytes(&mut self, grow: u64, data: &[u8]) {
        self.row_data_mut(grow).copy_from_slice(data);
        self.last_refresh[grow as usize] = 0.0;
    }

    pub fn last_refresh(&self, grow: u64) -> f64 {
        self.last_refresh[grow as usize]
    }

    /// Cell voltage under the linear decay model: drifts from its rail
    /// toward vdd/2, reaching it at the retention window, then stays.
    fn cell_voltage(&self, bit: bool, age_ns: f64) -> f64 {
        let vdd = self.cfg.vdd;
        if !self.cfg.decay_enabled {
            return if bit { vdd } else { 0.0 };
        }
        let frac = (age_ns / self.cfg.retention_window).clamp(0.0, 1.0);
        if bit {
            vdd - frac * vdd / 2.0
        } else {
            frac * vdd / 2.0
        }
    }

    pub fn cell_state(&self, grow: u64, bit_index: u64, now: f64) -> Result<CellState> {
        self.check_row(grow)?;
        let byte = self.row_data(grow)[(bit_index / 8) as usize];
        let bit = byte >> (bit_index % 8) & 1 == 1;
        let last = self.last_refresh(grow);
        Ok(CellState {
            bit,
            voltage: self.cell_voltage(bit, now - last),
            last_refresh: last,
        })
    }

    pub fn sense_amp_mode(&self, gbank: u64, bit_index: u64) -> SenseAmpMode {
        match &self.banks[gbank as usize] {
            None => SenseAmpMode::Precharged,
            Some(open) => {
                let byte = open.buffer.data[(bit_index / 8) as usize];
                if byte >> (bit_index % 8) & 1 == 1 {
                    SenseAmpMode::DrivingHigh
                } else {
                    SenseAmpMode::DrivingLow
                }
            }
        }
    }

    pub fn row_buffer(&self, gbank: u64) -> Option<&RowBuffer> {
        self.banks[gbank as usize].as_ref().map(|o| &o.buffer)
    }

    pub fn connected_rows(&self, gbank: u64) -> &[u64] {
        match &self.banks[gbank as usize] {
            Some(open) => &open.connected_rows,
            None => &[],
        }
    }

    pub fn is_precharged(&self, gbank: u64) -> bool {
        self.banks[gbank as usize].is_none()
    }

    /// Restore a row through the sense path, returning the contents placed
    /// in the row buffer. With decay off this is a plain copy; with decay on
    /// every bit is re-decided from its single-cell deviation.
    fn sense_row(&mut self, grow: u64, now: f64) -> Result<Box<[u8]>> {
        if self.cfg.decay_enabled {
            let age = now - self.last_refresh(grow);
            let (cc, cb, vdd) = (
                self.cfg.cell_capacitance,
                self.cfg.bitline_capacitance,
                self.cfg.vdd,
            );
            // All cells of the row share one age, so the two possible
            // deviations are computed once.
            let mut drive = [SenseDrive::DrivingLow; 2];
            for (i, bit) in [(0usize, false), (1usize, true)] {
                let v = self.cell_voltage(bit, age);
                let delta = charge_share_deviation(&[v], cc, cb, vdd)?;
                drive[i] = sense_amplify(delta).map_err(|e| match e {
                    Error::MetastableSense { .. } => Error::MetastableSense { bit: i as u64 },
                    other => other,
                })?;
            }
            let data = self.row_data(grow);
            let mut out = vec![0u8; data.len()];
            for (o, &b) in out.iter_mut().zip(data.iter()) {
                let mut acc = 0u8;
                for bit in 0..8 {
                    let set = match drive[(b >> bit & 1) as usize] {
                        SenseDrive::DrivingHigh => 1,
                        SenseDrive::DrivingLow => 0,
                    };
                    acc |= set << bit;
                }
                *o = acc;
            }
            Ok(out.into_boxed_slice())
        } else {
            Ok(self.row_data(grow).to_vec().into_boxed_slice())
        }
    }

    /// ACTIVATE. From a precharged bank this restores the row into the row
    /// buffer. On an already-activated bank the command proceeds only within
    /// the open subarray, where it writes the buffer contents into the new
    /// row (copy semantics); an activate to any other subarray is dropped.
    pub fn activate(&mut self, grow: u64, now: f64) -> Result<()> {
        self.check_row(grow)?;
        let gbank = self.bank_of_row(grow);
        let subarray = self.subarray_of_row(grow);
        match &self.banks[gbank as usize] {
            None => {
                let data = self.sense_row(grow, now)?;
                self.row_data_mut(grow).copy_from_slice(&data);
                self.last_refresh[grow as usize] = now;
                self.banks[gbank as usize] = Some(OpenState {
                    subarray,
                    connected_rows: vec![grow],
                    buffer: RowBuffer {
                        data,
                        valid: true,
                        source_row: grow,
                    },
                });
                Ok(())
            }
            Some(open) if open.subarray == subarray => {
                let data = open.buffer.data.clone();
                self.row_data_mut(grow).copy_from_slice(&data);
                self.last_refresh[grow as usize] = now;
                let open = self.banks[gbank as usize].as_mut().unwrap();
                open.connected_rows = vec![grow];
                open.buffer.source_row = grow;
                Ok(())
            }
            Some(open) => Err(Error::CommandDropped(format!(
                "bank {gbank} has subarray {} activated; ACTIVATE to subarray {subarray} dropped",
                open.subarray
            ))),
        }
    }

    /// PRECHARGE. Idempotent.
    pub fn precharge(&mut self, gbank: u64) {
        self.banks[gbank as usize] = None;
    }

    /// Column READ: one cacheline out of the row buffer.
    pub fn column_read(&self, gbank: u64, column: u64) -> Result<Vec<u8>> {
        let line = self.cfg.cacheline_bytes;
        if column >= self.cfg.lines_per_row() {
            return Err(Error::AddressRange {
                addr: column,
                bound: self.cfg.lines_per_row(),
                what: "column",
            });
        }
        let open = self.banks[gbank as usize]
            .as_ref()
            .filter(|o| o.buffer.valid)
            .ok_or(Error::NoOpenRow { bank: gbank })?;
        let start = (column * line) as usize;
        Ok(open.buffer.data[start..start + line as usize].to_vec())
    }

    /// Column WRITE: updates the row buffer and every connected row's cells.
    pub fn column_write(&mut self, gbank: u64, column: u64, data: &[u8]) -> Result<()> {
        let line = self.cfg.cacheline_bytes;
        if column >= self.cfg.lines_per_row() {
            return Err(Error::AddressRange {
                addr: column,
                bound: self.cfg.lines_per_row(),
                what: "column",
            });
        }
        assert_eq!(
            data.len() as u64,
            line,
            "column writes are whole cachelines"
        );
        let open = self.banks[gbank as usize]
            .as_mut()
            .filter(|o| o.buffer.valid)
            .ok_or(Error::NoOpenRow { bank: gbank })?;
        let start = (column * line) as usize;
        open.buffer.data[start..start + line as usize].copy_from_slice(data);
        let connected = open.connected_rows.clone();
        for grow in connected {
            self.row_data_mut(grow)[start..start + line as usize].copy_from_slice(data);
        }
        Ok(())
    }

    /// Triple-row ACTIVATE: every bitline settles to the charge-sharing
    /// outcome over the three connected cells, and the amplified level is
    /// written back into all three rows and the row buffer. With fresh cells
    /// the result is the bitwise majority.
    pub fn multi_activate(&mut self, grows: [u64; 3], now: f64) -> Result<()> {
        for &g in &grows {
            self.check_row(g)?;
        }
        if grows[0] == grows[1] || grows[0] == grows[2] || grows[1] == grows[2] {
            return Err(Error::CommandDropped(
                "triple activation needs three distinct rows".into(),
            ));
        }
        let gbank = self.bank_of_row(grows[0]);
        let subarray = self.subarray_of_row(grows[0]);
        for &g in &grows[1..] {
            if self.bank_of_row(g) != gbank || self.subarray_of_row(g) != subarray {
                return Err(Error::SubarrayMismatch { a: grows[0], b: g });
            }
        }
        if !self.is_precharged(gbank) {
            return Err(Error::CommandDropped(format!(
                "bank {gbank} must be precharged for a triple activation"
            )));
        }
        let ages = grows.map(|g| now - self.last_refresh(g));
        if !self.cfg.decay_enabled {
            for &age in &ages {
                if age > self.cfg.retention_window {
                    return Err(Error::StaleCell {
                        age_ns: age,
                        window_ns: self.cfg.retention_window,
                    });
                }
            }
        }
        let (cc, cb, vdd) = (
            self.cfg.cell_capacitance,
            self.cfg.bitline_capacitance,
            self.cfg.vdd,
        );
        // Deviation for each of the eight bit patterns; cells of a row share
        // one age, so this fully determines the per-bit outcome.
        let mut pattern_bit = [0u8; 8];
        for pattern in 0..8u8 {
            let volts = [
                self.cell_voltage(pattern & 1 != 0, ages[0]),
                self.cell_voltage(pattern & 2 != 0, ages[1]),
                self.cell_voltage(pattern & 4 != 0, ages[2]),
            ];
            let delta = charge_share_deviation(&volts, cc, cb, vdd)?;
            pattern_bit[pattern as usize] = match sense_amplify(delta) {
                Ok(SenseDrive::DrivingHigh) => 1,
                Ok(SenseDrive::DrivingLow) => 0,
                // Mapped to a concrete bit index below, once we know which
                // bit positions hold this pattern.
                Err(Error::MetastableSense { .. }) => 2,
                Err(e) => return Err(e),
            };
        }
        let row_bytes = self.cfg.row_size_bytes as usize;
        let a = self.row_data(grows[0]).to_vec();
        let b = self.row_data(grows[1]).to_vec();
        let c = self.row_data(grows[2]).to_vec();
        let mut result = vec![0u8; row_bytes];
        for i in 0..row_bytes {
            let mut out = 0u8;
            for bit in 0..8 {
                let pattern = (a[i] >> bit & 1) | (b[i] >> bit & 1) << 1 | (c[i] >> bit & 1) << 2;
                match pattern_bit[pattern as usize] {
                    2 => {
                        return Err(Error::MetastableSense {
                            bit: (i * 8 + bit) as u64,
                        })
                    }
                    v => out |= v << bit,
                }
            }
            result[i] = out;
        }
        let result = result.into_boxed_slice();
        for &g in &grows {
            self.row_data_mut(g).copy_from_slice(&result);
            self.last_refresh[g as usize] = now;
        }
        self.banks[gbank as usize] = Some(OpenState {
            subarray,
            connected_rows: grows.to_vec(),
            buffer: RowBuffer {
                data: result,
                valid: true,
                source_row: grows[0],
            },
        });
        Ok(())
    }

    /// TRANSFER: move one cacheline from the source bank's row buffer into
    /// the destination bank's row buffer and open row, over the internal
    /// bus. The source is left intact.
    pub fn transfer(
        &mut self,
        src_bank: u64,
        src_col: u64,
        dst_bank: u64,
        dst_col: u64,
    ) -> Result<()> {
        if src_bank == dst_bank {
            return Err(Error::SameBankTransfer);
        }
        let line = self.column_read(src_bank, src_col)?;
        self.column_write(dst_bank, dst_col, &line)
    }
}
