//! Device configuration: geometry, timing, energy mode, and analog knobs.
//!
//! A [`DeviceConfig`] is immutable after construction and is shared read-only
//! by every component of the simulator. It can be built from defaults, loaded
//! from a flat `key=value` file, and overridden entry by entry (`--set`).

use crate::energy::EnergyMode;
use crate::error::{Error, Result};

/// Physical address interleaving scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Interleave {
    /// Consecutive row-sized blocks rotate across subarrays, then banks.
    Row,
    /// Consecutive cachelines rotate across channels.
    Cacheline,
}

/// Latency model for back-to-back activate pairs used by in-DRAM copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FpmLatencyMode {
    /// Both activations consume the full tRAS window.
    Conservative,
    /// The destination activation overlaps the tail of the source
    /// activation (separate row decoder), so one tRAS window is saved.
    Aggressive,
}

/// Which published figure to report for a conservative in-DRAM AND/OR.
///
/// The derivation from four copy sequences gives 4 x 85 ns = 340 ns, while
/// the reference reduction table lists 320 ns. Both are supported; the
/// command log always reflects the real 340 ns schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IdaoConservativeSource {
    /// 4 x 85 ns = 340 ns, the sum of the four copy sequences.
    Text,
    /// 320 ns, the tabulated reference constant.
    Table,
}

/// DDR3-style timing constraints plus the calibrated streaming cadence.
///
/// All values are nanoseconds. `t_line` and `t_transfer` default to 465/64 ns
/// so that one 64-line row stream costs `t_oh + 64 * t_line` = 510 ns.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TimingParams {
    /// ACTIVATE -> PRECHARGE minimum (row activation time).
    pub t_ras: f64,
    /// ACTIVATE -> READ/WRITE minimum.
    pub t_rcd: f64,
    /// PRECHARGE -> ACTIVATE minimum.
    pub t_rp: f64,
    /// WRITE completion -> PRECHARGE minimum (write recovery).
    pub t_wr: f64,
    /// Per-cacheline cadence of a channel stream.
    pub t_line: f64,
    /// Fixed per-row streaming overhead (tRCD + tWR + tRP with defaults).
    pub t_oh: f64,
    /// Per-cacheline cadence of the internal bus (TRANSFER).
    pub t_transfer: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            t_ras: 35.0,
            t_rcd: 15.0,
            t_rp: 15.0,
            t_wr: 15.0,
            t_line: 465.0 / 64.0,
            t_oh: 45.0,
            t_transfer: 465.0 / 64.0,
        }
    }
}

impl TimingParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tRAS", self.t_ras),
            ("tRCD", self.t_rcd),
            ("tRP", self.t_rp),
            ("tWR", self.t_wr),
            ("tLINE", self.t_line),
            ("tOH", self.t_oh),
            ("tTRANSFER", self.t_transfer),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Full description of one simulated memory system.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DeviceConfig {
    pub channels: u64,
    pub ranks_per_channel: u64,
    pub chips_per_rank: u64,
    pub banks_per_chip: u64,
    pub subarrays_per_bank: u64,
    pub rows_per_subarray: u64,
    /// Rank-level row size in bytes (all chips of a rank act in lockstep).
    pub row_size_bytes: u64,
    pub cacheline_bytes: u64,
    pub timing: TimingParams,
    pub energy_mode: EnergyMode,
    pub interleave: Interleave,
    pub fpm_latency_mode: FpmLatencyMode,
    pub idao_conservative_source: IdaoConservativeSource,
    /// Cell capacitance (relative units are fine; only ratios matter).
    pub cell_capacitance: f64,
    /// Bitline capacitance.
    pub bitline_capacitance: f64,
    pub vdd: f64,
    /// Retention window in nanoseconds; `inf` disables the freshness guard.
    pub retention_window: f64,
    /// Model charge leakage as a linear drift toward vdd/2 over the
    /// retention window. Off by default: cells hold their rails.
    pub decay_enabled: bool,
    /// Faulty-row remapping as (faulty global row -> spare global row).
    pub row_remaps: Vec<(u64, u64)>,
    pub llc_capacity_bytes: u64,
    pub llc_ways: u64,
    /// Bypass the LLC for bulk-copy traffic (memory-controller DMA mode)
    /// while keeping baseline streaming latency.
    pub mc_dma: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            channels: 1,
            ranks_per_channel: 1,
            chips_per_rank: 8,
            banks_per_chip: 8,
            subarrays_per_bank: 64,
            rows_per_subarray: 512,
            row_size_bytes: 8192,
            cacheline_bytes: 64,
            timing: TimingParams::default(),
            energy_mode: EnergyMode::TableDriven,
            interleave: Interleave::Row,
            fpm_latency_mode: FpmLatencyMode::Conservative,
            idao_conservative_source: IdaoConservativeSource::Text,
            cell_capacitance: 1.0,
            bitline_capacitance: 4.0,
            vdd: 1.2,
            retention_window: 64_000_000.0,
            decay_enabled: false,
            row_remaps: Vec::new(),
            llc_capacity_bytes: 2 * 1024 * 1024,
            llc_ways: 16,
            mc_dma: false,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("ranks_per_channel", self.ranks_per_channel),
            ("chips_per_rank", self.chips_per_rank),
            ("banks_per_chip", self.banks_per_chip),
            ("subarrays_per_bank", self.subarrays_per_bank),
            ("rows_per_subarray", self.rows_per_subarray),
            ("row_size_bytes", self.row_size_bytes),
            ("cacheline_bytes", self.cacheline_bytes),
            ("llc_ways", self.llc_ways),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.row_size_bytes.is_multiple_of(self.cacheline_bytes) {
            return Err(Error::Config(format!(
                "row_size_bytes ({}) must be a multiple of cacheline_bytes ({})",
                self.row_size_bytes, self.cacheline_bytes
            )));
        }
        self.timing.validate()?;
        for (name, v) in [
            ("cell_capacitance", self.cell_capacitance),
            ("bitline_capacitance", self.bitline_capacitance),
            ("vdd", self.vdd),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        if self.retention_window.is_nan() || self.retention_window <= 0.0 {
            return Err(Error::Config(
                "retention_window must be > 0 (inf allowed)".into(),
            ));
        }
        if !self
            .llc_capacity_bytes
            .is_multiple_of(self.cacheline_bytes * self.llc_ways)
        {
            return Err(Error::Config(
                "llc_capacity_bytes must be a multiple of cacheline_bytes * llc_ways".into(),
            ));
        }
        // Catch absurd geometries before capacity arithmetic can wrap.
        let capacity = [
            self.ranks_per_channel,
            self.banks_per_chip,
            self.subarrays_per_bank,
            self.rows_per_subarray,
            self.row_size_bytes,
        ]
        .iter()
        .try_fold(self.channels, |acc, &v| acc.checked_mul(v));
        if capacity.is_none() {
            return Err(Error::Config(
                "device capacity overflows a 64-bit byte address".into(),
            ));
        }
        Ok(())
    }

    /// Rows per bank (subarrays x rows per subarray).
    pub fn rows_per_bank(&self) -> u64 {
        self.subarrays_per_bank * self.rows_per_subarray
    }

    /// Total addressable bytes.
    pub fn capacity_bytes(&self) -> u64 {
        self.channels
            * self.ranks_per_channel
            * self.banks_per_chip
            * self.rows_per_bank()
            * self.row_size_bytes
    }

    pub fn lines_per_row(&self) -> u64 {
        self.row_size_bytes / self.cacheline_bytes
    }

    /// Apply a single `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(key: &str, value: &str) -> Result<u64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got {value:?}")))
        }
        fn float(key: &str, value: &str) -> Result<f64> {
            if value.eq_ignore_ascii_case("inf") {
                return Ok(f64::INFINITY);
            }
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected number, got {value:?}")))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{key}: expected bool, got {value:?}"
                ))),
            }
        }
        match key {
            "channels" => self.channels = int(key, value)?,
            "ranks_per_channel" => self.ranks_per_channel = int(key, value)?,
            "chips_per_rank" => self.chips_per_rank = int(key, value)?,
            "banks_per_chip" => self.banks_per_chip = int(key, value)?,
            "subarrays_per_bank" => self.subarrays_per_bank = int(key, value)?,
            "rows_per_subarray" => self.rows_per_subarray = int(key, value)?,
            "row_size_bytes" => self.row_size_bytes = int(key, value)?,
            "cacheline_bytes" => self.cacheline_bytes = int(key, value)?,
            "tRAS" => self.timing.t_ras = float(key, value)?,
            "tRCD" => self.timing.t_rcd = float(key, value)?,
            "tRP" => self.timing.t_rp = float(key, value)?,
            "tWR" => self.timing.t_wr = float(key, value)?,
            "tLINE" => self.timing.t_line = float(key, value)?,
            "tOH" => self.timing.t_oh = float(key, value)?,
            "tTRANSFER" => self.timing.t_transfer = float(key, value)?,
            "interleave" => {
                self.interleave = match value {
                    "row" => Interleave::Row,
                    "cacheline" => Interleave::Cacheline,
                    _ => return Err(Error::Config(format!("interleave: {value:?}"))),
                }
            }
            "fpm_latency_mode" => {
                self.fpm_latency_mode = match value {
                    "conservative" => FpmLatencyMode::Conservative,
                    "aggressive" => FpmLatencyMode::Aggressive,
                    _ => return Err(Error::Config(format!("fpm_latency_mode: {value:?}"))),
                }
            }
            "idao_conservative_source" => {
                self.idao_conservative_source = match value {
                    "text" => IdaoConservativeSource::Text,
                    "table" => IdaoConservativeSource::Table,
                    _ => {
                        return Err(Error::Config(format!(
                            "idao_conservative_source: {value:?}"
                        )))
                    }
                }
            }
            "energy_mode" => {
                self.energy_mode = match value {
                    "table_driven" => EnergyMode::TableDriven,
                    "per_command" => EnergyMode::PerCommand,
                    _ => return Err(Error::Config(format!("energy_mode: {value:?}"))),
                }
            }
            "cell_capacitance" => self.cell_capacitance = float(key, value)?,
            "bitline_capacitance" => self.bitline_capacitance = float(key, value)?,
            "vdd" => self.vdd = float(key, value)?,
            "retention_window" => self.retention_window = float(key, value)?,
            "decay_enabled" => self.decay_enabled = boolean(key, value)?,
            "mc_dma" => self.mc_dma = boolean(key, value)?,
            "llc_capacity_bytes" => self.llc_capacity_bytes = int(key, value)?,
            "llc_ways" => self.llc_ways = int(key, value)?,
            "row_remaps" => {
                self.row_remaps.clear();
                if !value.is_empty() {
                    for pair in value.split(',') {
                        let (f, s) = pair.split_once(':').ok_or_else(|| {
                            Error::Config(format!(
                                "row_remaps: expected faulty:spare, got {pair:?}"
                            ))
                        })?;
                        self.row_remaps
                            .push((int(key, f.trim())?, int(key, s.trim())?));
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Parse a flat `key=value` config file body. Blank lines and `#` comments
/// are skipped. Unknown keys are rejected.
impl std::str::FromStr for DeviceConfig {
    type Err = Error;

    fn from_str(body: &str) -> Result<DeviceConfig> {
        let mut cfg = DeviceConfig::default();
        for (idx, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", idx + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
