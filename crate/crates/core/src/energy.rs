//! Energy accounting in two modes.
//!
//! * Table-driven: each bulk operation is charged from a built-in reference
//!   table of microjoules per 4 KB, with the published reduction factors
//!   stored alongside (they are quoted from unrounded source data, so they
//!   are deliberately never recomputed from the rounded absolutes).
//! * Per-command: every DRAM command carries a constant energy; the five
//!   constants are fitted against the reference table by weighted least
//!   squares.
//!
//! Ledgers accumulate integer femtojoules so that category sums stay exact.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const FJ_PER_UJ: u64 = 1_000_000_000;
pub const BYTES_PER_TABLE_OP: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    TableDriven,
    PerCommand,
}

/// Operation classes used for energy and traffic attribution. Bulk
/// initialization (including non-zero fills) lands in `Zero`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Copy,
    Zero,
    AndOr,
    Read,
    Write,
}

impl OpClass {
    pub fn name(self) -> &'static str {
        match self {
            OpClass::Copy => "copy",
            OpClass::Zero => "zero",
            OpClass::AndOr => "and_or",
            OpClass::Read => "read",
            OpClass::Write => "write",
        }
    }
}

/// Mechanism that executed a bulk operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MechKind {
    Baseline,
    Fpm,
    PsmInterBank,
    PsmIntraBank,
    IdaoConservative,
    IdaoAggressive,
}

impl MechKind {
    pub fn name(self) -> &'static str {
        match self {
            MechKind::Baseline => "baseline",
            MechKind::Fpm => "fpm",
            MechKind::PsmInterBank => "psm_inter_bank",
            MechKind::PsmIntraBank => "psm_intra_bank",
            MechKind::IdaoConservative => "idao_conservative",
            MechKind::IdaoAggressive => "idao_aggressive",
        }
    }
}

/// One row of the reference table: absolute latency and energy for a 4 KB
/// operation plus the published reduction factors versus the baseline.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ReferenceRow {
    pub op: OpClass,
    pub mechanism: MechKind,
    pub latency_ns: f64,
    pub energy_uj: f64,
    pub latency_reduction: f64,
    pub energy_reduction: f64,
    /// DRAM command counts for one 4 KB operation:
    /// [ACTIVATE, PRECHARGE, column READ/WRITE, TRANSFER, MULTI_ACTIVATE].
    /// Overlapped activations are excluded; they raise a wordline without a
    /// fresh sense event and are modeled as free.
    pub command_counts: [u64; 5],
}

/// Reference latency/energy figures for 4 KB bulk operations under
/// DDR3-1600 timing, with reduction factors relative to the baseline
/// streaming implementation.
pub const REFERENCE_TABLE: [ReferenceRow; 9] = [
    ReferenceRow {
        op: OpClass::Copy,
        mechanism: MechKind::Baseline,
        latency_ns: 1020.0,
        energy_uj: 3.6,
        latency_reduction: 1.00,
        energy_reduction: 1.0,
        command_counts: [2, 2, 128, 0, 0],
    },
    ReferenceRow {
        op: OpClass::Copy,
        mechanism: MechKind::Fpm,
        latency_ns: 85.0,
        energy_uj: 0.04,
        latency_reduction: 12.0,
        energy_reduction: 74.4,
        command_counts: [2, 1, 0, 0, 0],
    },
    ReferenceRow {
        op: OpClass::Copy,
        mechanism: MechKind::PsmInterBank,
        latency_ns: 510.0,
        energy_uj: 1.1,
        latency_reduction: 2.0,
        energy_reduction: 3.2,
        command_counts: [2, 2, 0, 64, 0],
    },
    ReferenceRow {
        op: OpClass::Copy,
        mechanism: MechKind::PsmIntraBank,
        latency_ns: 1020.0,
        energy_uj: 2.5,
        latency_reduction: 1.0,
        energy_reduction: 1.5,
        command_counts: [4, 4, 0, 128, 0],
    },
    ReferenceRow {
        op: OpClass::Zero,
        mechanism: MechKind::Baseline,
        latency_ns: 510.0,
        energy_uj: 2.0,
        latency_reduction: 1.00,
        energy_reduction: 1.0,
        command_counts: [1, 1, 64, 0, 0],
    },
    ReferenceRow {
        op: OpClass::Zero,
        mechanism: MechKind::Fpm,
        latency_ns: 85.0,
        energy_uj: 0.05,
        latency_reduction: 6.0,
        energy_reduction: 41.5,
        command_counts: [2, 1, 0, 0, 0],
    },
    ReferenceRow {
        op: OpClass::AndOr,
        mechanism: MechKind::Baseline,
        latency_ns: 1530.0,
        energy_uj: 5.0,
        latency_reduction: 1.00,
        energy_reduction: 1.0,
        command_counts: [3, 3, 192, 0, 0],
    },
    ReferenceRow {
        op: OpClass::AndOr,
        mechanism: MechKind::IdaoConservative,
        latency_ns: 320.0,
        energy_uj: 0.16,
        latency_reduction: 4.78,
        energy_reduction: 31.6,
        command_counts: [7, 4, 0, 0, 1],
    },
    ReferenceRow {
        op: OpClass::AndOr,
        mechanism: MechKind::IdaoAggressive,
        latency_ns: 200.0,
        energy_uj: 0.10,
        latency_reduction: 7.65,
        energy_reduction: 50.5,
        command_counts: [3, 4, 0, 0, 1],
    },
];

pub fn reference_row(op: OpClass, mechanism: MechKind) -> Result<&'static ReferenceRow> {
    REFERENCE_TABLE
        .iter()
        .find(|r| r.op == op && r.mechanism == mechanism)
        .ok_or(Error::UnknownMechanism {
            op: op.name().into(),
            mechanism: mechanism.name().into(),
        })
}

fn uj_to_fj(uj: f64) -> u64 {
    (uj * FJ_PER_UJ as f64).round() as u64
}

/// Fitted per-command energies, microjoules per command.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct PerCommandEnergy {
    pub e_act: f64,
    pub e_pre: f64,
    /// Per cacheline moved over the channel (READ or WRITE).
    pub e_col_io: f64,
    /// Per cacheline moved over the internal bus (TRANSFER).
    pub e_transfer: f64,
    pub e_multi_act: f64,
}

impl PerCommandEnergy {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.e_act,
            self.e_pre,
            self.e_col_io,
            self.e_transfer,
            self.e_multi_act,
        ]
    }

    /// Energy of one 4 KB operation with the given command counts.
    pub fn op_energy_uj(&self, counts: [u64; 5]) -> f64 {
        counts
            .iter()
            .zip(self.as_array())
            .map(|(&n, e)| n as f64 * e)
            .sum()
    }
}

/// Residual of the calibration fit for one reference row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CalibrationResidual {
    pub op: OpClass,
    pub mechanism: MechKind,
    pub target_uj: f64,
    pub fitted_uj: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Calibration {
    pub constants: PerCommandEnergy,
    pub residuals: Vec<CalibrationResidual>,
}

/// Fit the five per-command constants to the reference table.
///
/// Rows are weighted by 1/target so the fit minimizes relative error; the
/// rounded absolutes in the table are not jointly consistent with any single
/// constant set, so residuals are expected and reported for every row.
/// Constants are constrained non-negative (active-set on the normal
/// equations).
pub fn calibrate_per_command(table: &[ReferenceRow]) -> Result<Calibration> {
    if table.is_empty() {
        return Err(Error::CalibrationFailed("empty reference table".into()));
    }
    let mut active = [true; 5];
    let solution = loop {
        let idx: Vec<usize> = (0..5).filter(|&j| active[j]).collect();
        if idx.is_empty() {
            return Err(Error::CalibrationFailed(
                "all constants clamped to zero".into(),
            ));
        }
        let n = idx.len();
        // Normal equations of the weighted least-squares problem.
        let mut ata = vec![vec![0.0f64; n]; n];
        let mut atb = vec![0.0f64; n];
        for row in table {
            let w = 1.0 / row.energy_uj;
            let a: Vec<f64> = idx
                .iter()
                .map(|&j| row.command_counts[j] as f64 * w)
                .collect();
            let b = row.energy_uj * w;
            for (i, &ai) in a.iter().enumerate() {
                for (j, &aj) in a.iter().enumerate() {
                    ata[i][j] += ai * aj;
                }
                atb[i] += ai * b;
            }
        }
        let x = solve_linear(&mut ata, &mut atb)
            .ok_or_else(|| Error::CalibrationFailed("singular normal equations".into()))?;
        if let Some(pos) = x.iter().position(|&v| v < 0.0) {
            active[idx[pos]] = false;
            continue;
        }
        let mut full = [0.0f64; 5];
        for (k, &j) in idx.iter().enumerate() {
            full[j] = x[k];
        }
        break full;
    };
    let constants = PerCommandEnergy {
        e_act: solution[0],
        e_pre: solution[1],
        e_col_io: solution[2],
        e_transfer: solution[3],
        e_multi_act: solution[4],
    };
    let residuals = table
        .iter()
        .map(|row| {
            let fitted = constants.op_energy_uj(row.command_counts);
            CalibrationResidual {
                op: row.op,
                mechanism: row.mechanism,
                target_uj: row.energy_uj,
                fitted_uj: fitted,
                relative_error: (fitted - row.energy_uj) / row.energy_uj,
            }
        })
        .collect();
    Ok(Calibration {
        constants,
        residuals,
    })
}

/// Gaussian elimination with partial pivoting; `None` on singular systems.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (top, bottom) = a.split_at_mut(row);
            for (t, &p) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *t -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Per-category accumulators, integer femtojoules.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct EnergyLedger {
    categories: BTreeMap<&'static str, u64>,
    total_fj: u64,
}

impl EnergyLedger {
    pub fn add_fj(&mut self, class: OpClass, fj: u64) {
        *self.categories.entry(class.name()).or_insert(0) += fj;
        self.total_fj += fj;
    }

    pub fn category_fj(&self, class: OpClass) -> u64 {
        self.categories.get(class.name()).copied().unwrap_or(0)
    }

    pub fn total_fj(&self) -> u64 {
        self.total_fj
    }

    pub fn total_uj(&self) -> f64 {
        self.total_fj as f64 / FJ_PER_UJ as f64
    }

    pub fn category_uj(&self, class: OpClass) -> f64 {
        self.category_fj(class) as f64 / FJ_PER_UJ as f64
    }

    /// Exact additivity check: the running total equals the category sum.
    pub fn is_consistent(&self) -> bool {
        self.categories.values().sum::<u64>() == self.total_fj
    }

    pub fn categories_uj(&self) -> BTreeMap<&'static str, f64> {
        self.categories
            .iter()
            .map(|(k, &v)| (*k, v as f64 / FJ_PER_UJ as f64))
            .collect()
    }
}

/// Table energy of a bulk operation, scaled linearly by size.
pub fn table_energy_fj(op: OpClass, mechanism: MechKind, bytes: u64) -> Result<u64> {
    let row = reference_row(op, mechanism)?;
    Ok((uj_to_fj(row.energy_uj) as u128 * bytes as u128 / BYTES_PER_TABLE_OP as u128) as u64)
}

/// Charge one table-driven bulk operation, scaled linearly by size.
pub fn charge_table_op(
    ledger: &mut EnergyLedger,
    op: OpClass,
    mechanism: MechKind,
    bytes: u64,
) -> Result<()> {
    let fj = table_energy_fj(op, mechanism, bytes)?;
    ledger.add_fj(op, fj);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_charge_matches_reference_values() {
        let mut ledger = EnergyLedger::default();
        charge_table_op(&mut ledger, OpClass::Copy, MechKind::Fpm, 4096).unwrap();
        assert_eq!(ledger.category_fj(OpClass::Copy), 40_000_000); // 0.04 uJ
        charge_table_op(&mut ledger, OpClass::Copy, MechKind::Baseline, 4096).unwrap();
        assert_eq!(
            ledger.category_fj(OpClass::Copy),
            40_000_000 + 3_600_000_000
        );
        charge_table_op(&mut ledger, OpClass::Zero, MechKind::Fpm, 8192).unwrap();
        assert_eq!(ledger.category_fj(OpClass::Zero), 100_000_000); // 2 x 0.05 uJ
        assert!(ledger.is_consistent());
    }

    #[test]
    fn unknown_pair_is_rejected() {
        let mut ledger = EnergyLedger::default();
        let err = charge_table_op(&mut ledger, OpClass::Zero, MechKind::PsmInterBank, 4096);
        assert!(matches!(err, Err(Error::UnknownMechanism { .. })));
    }

    #[test]
    fn ledger_additivity_is_exact() {
        let mut ledger = EnergyLedger::default();
        for i in 0..1000u64 {
            ledger.add_fj(
                if i % 2 == 0 {
                    OpClass::Read
                } else {
                    OpClass::Write
                },
                i * 7 + 1,
            );
        }
        assert!(ledger.is_consistent());
    }

    #[test]
    fn calibration_reproduces_each_row_within_25_percent() {
        let cal = calibrate_per_command(&REFERENCE_TABLE).unwrap();
        assert_eq!(cal.residuals.len(), REFERENCE_TABLE.len());
        for r in &cal.residuals {
            assert!(
                r.relative_error.abs() <= 0.25,
                "({:?}, {:?}): fitted {} vs target {}",
                r.op,
                r.mechanism,
                r.fitted_uj,
                r.target_uj
            );
        }
        for e in cal.constants.as_array() {
            assert!(e >= 0.0 && e.is_finite());
        }
    }

    #[test]
    fn calibrated_fpm_copy_close_to_reference() {
        let cal = calibrate_per_command(&REFERENCE_TABLE).unwrap();
        let c = cal.constants;
        let fpm = 2.0 * c.e_act + c.e_pre;
        assert!((fpm - 0.04).abs() / 0.04 <= 0.25, "fpm copy fitted {fpm}");
        let baseline = 2.0 * c.e_act + 2.0 * c.e_pre + 128.0 * c.e_col_io;
        let ratio = baseline / fpm;
        assert!(
            (ratio - 74.4).abs() / 74.4 <= 0.25,
            "copy ratio fitted {ratio}"
        );
    }
}
