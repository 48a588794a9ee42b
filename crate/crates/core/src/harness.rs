//! Trace runner, run statistics, and report emission.

use std::collections::BTreeMap;

use crate::config::DeviceConfig;
use crate::energy::{EnergyMode, OpClass, ReferenceRow, REFERENCE_TABLE};
use crate::engine::{Engine, Mechanism};
use crate::error::{Error, Result};
use crate::memctrl::IsaOp;
use crate::rowclone::ReservedLayout;
use crate::trace::TraceOp;

/// Capacity fractions lost to reserved rows.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ReservedOverhead {
    pub zero_row: f64,
    pub tmp_row: f64,
    pub bitwise_rows: f64,
}

/// Aggregate results of one trace run. Serialization order is fixed so
/// reports are byte-stable.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunStats {
    pub mechanism: &'static str,
    pub energy_mode: EnergyMode,
    pub total_latency_ns: f64,
    pub latency_by_class_ns: BTreeMap<&'static str, f64>,
    pub energy_total_uj: f64,
    pub energy_by_class_uj: BTreeMap<&'static str, f64>,
    pub bytes_on_channel: u64,
    pub bytes_by_class: BTreeMap<&'static str, u64>,
    /// Fraction of channel traffic attributable to copies.
    pub fmtc: f64,
    pub mechanism_counts: BTreeMap<&'static str, u64>,
    pub llc_hits: u64,
    pub llc_misses: u64,
    pub page_faults: u64,
    pub timing_violations: u64,
    pub reserved_overhead: ReservedOverhead,
}

pub struct RunOutcome {
    pub stats: RunStats,
    pub engine: Engine,
}

/// Collect run statistics from an engine (validates the command log).
pub fn collect_stats(engine: &Engine) -> RunStats {
    debug_assert!(
        engine.ledger.is_consistent(),
        "energy ledger lost additivity"
    );
    let violations = engine.validate_timing();
    let copy_bytes = engine
        .counters
        .bytes_by_class
        .get(OpClass::Copy.name())
        .copied()
        .unwrap_or(0);
    let total = engine.counters.bytes_total;
    let layout = ReservedLayout::new(&engine.cfg);
    RunStats {
        mechanism: engine.mechanism.name(),
        energy_mode: engine.cfg.energy_mode,
        total_latency_ns: engine.counters.total_latency_ns,
        latency_by_class_ns: engine.counters.latency_by_class.clone(),
        energy_total_uj: engine.ledger.total_uj(),
        energy_by_class_uj: engine.ledger.categories_uj(),
        bytes_on_channel: total,
        bytes_by_class: engine.counters.bytes_by_class.clone(),
        fmtc: if total == 0 {
            0.0
        } else {
            copy_bytes as f64 / total as f64
        },
        mechanism_counts: engine.counters.mech_counts.clone(),
        llc_hits: engine.llc.hits,
        llc_misses: engine.llc.misses,
        page_faults: engine.counters.page_faults,
        timing_violations: violations.len() as u64,
        reserved_overhead: ReservedOverhead {
            zero_row: layout.zero_row_overhead(),
            tmp_row: layout.tmp_row_overhead(),
            bitwise_rows: layout.bitwise_overhead(),
        },
    }
}

fn apply_op(engine: &mut Engine, op: &TraceOp) -> Result<()> {
    match *op {
        TraceOp::Read { addr } => {
            engine.host_read_line(addr)?;
        }
        TraceOp::Write { addr, value } => {
            let line = engine.cfg.cacheline_bytes as usize;
            let pattern = value.to_le_bytes();
            let data: Vec<u8> = (0..line).map(|i| pattern[i % 8]).collect();
            let base = addr / engine.cfg.cacheline_bytes * engine.cfg.cacheline_bytes;
            engine.host_write_line(base, &data)?;
        }
        TraceOp::MemCopy { src, dst, size } => {
            engine.exec_isa(&IsaOp::MemCopy { src, dst, size })?;
        }
        TraceOp::MemInit { dst, size, val } => {
            engine.exec_isa(&IsaOp::MemInit { dst, size, val })?;
        }
        TraceOp::MemAnd {
            src1,
            src2,
            dst,
            size,
        } => {
            engine.exec_isa(&IsaOp::MemAnd {
                src1,
                src2,
                dst,
                size,
            })?;
        }
        TraceOp::MemOr {
            src1,
            src2,
            dst,
            size,
        } => {
            engine.exec_isa(&IsaOp::MemOr {
                src1,
                src2,
                dst,
                size,
            })?;
        }
    }
    Ok(())
}

/// Execute a trace on a fresh engine. Deterministic for a given
/// (trace, config, mechanism).
pub fn run_trace(ops: &[TraceOp], cfg: &DeviceConfig, mechanism: Mechanism) -> Result<RunOutcome> {
    let mut engine = Engine::new(cfg, mechanism)?;
    for (index, op) in ops.iter().enumerate() {
        apply_op(&mut engine, op).map_err(|e| Error::TraceExec {
            index,
            source: Box::new(e),
        })?;
    }
    let stats = collect_stats(&engine);
    Ok(RunOutcome { stats, engine })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

/// One measured row of the reduction table reproduction.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TableReproRow {
    pub op: OpClass,
    pub mechanism: crate::energy::MechKind,
    pub measured_latency_ns: f64,
    pub measured_energy_uj: f64,
    /// Quotients of the measured values against the measured baseline of
    /// the same operation kind.
    pub measured_latency_ratio: f64,
    pub measured_energy_ratio: f64,
    pub reference: ReferenceRow,
}

/// Re-measure every row of the built-in reference table by running one
/// 4 KB operation per mechanism on a fresh engine. Geometry is pinned to
/// 4 KB rows; timing, energy mode, and the conservative-figure source come
/// from `base`.
pub fn reproduce_reference_table(base: &DeviceConfig) -> crate::error::Result<Vec<TableReproRow>> {
    use crate::config::FpmLatencyMode;
    use crate::energy::MechKind;

    let mut cfg = base.clone();
    cfg.channels = 1;
    cfg.ranks_per_channel = 1;
    cfg.banks_per_chip = 8;
    cfg.subarrays_per_bank = 8;
    cfg.rows_per_subarray = 64;
    cfg.row_size_bytes = 4096;
    cfg.cacheline_bytes = 64;
    cfg.interleave = crate::config::Interleave::Row;
    cfg.row_remaps.clear();
    cfg.validate()?;

    // Row-interleaved address of (bank, subarray, row).
    let at = |bank: u64, sub: u64, row: u64| {
        ((row * cfg.banks_per_chip + bank) * cfg.subarrays_per_bank + sub) * cfg.row_size_bytes
    };
    let size = cfg.row_size_bytes;
    let run_one =
        |cfg: &DeviceConfig, mechanism: Mechanism, op: IsaOp| -> crate::error::Result<(f64, f64)> {
            let mut engine = Engine::new(cfg, mechanism)?;
            engine.exec_isa(&op)?;
            assert!(
                engine.validate_timing().is_empty(),
                "schedule violates timing constraints"
            );
            Ok((engine.counters.total_latency_ns, engine.ledger.total_uj()))
        };

    let same_sub = IsaOp::MemCopy {
        src: at(0, 0, 0),
        dst: at(0, 0, 1),
        size,
    };
    let cross_bank = IsaOp::MemCopy {
        src: at(0, 0, 0),
        dst: at(1, 0, 0),
        size,
    };
    let intra_bank = IsaOp::MemCopy {
        src: at(0, 0, 0),
        dst: at(0, 1, 0),
        size,
    };
    let zero = IsaOp::MemInit {
        dst: at(0, 0, 1),
        size,
        val: 0,
    };
    let bitwise = IsaOp::MemOr {
        src1: at(0, 0, 0),
        src2: at(0, 0, 1),
        dst: at(0, 0, 2),
        size,
    };

    let mut aggressive = cfg.clone();
    aggressive.fpm_latency_mode = FpmLatencyMode::Aggressive;
    let mut conservative = cfg.clone();
    conservative.fpm_latency_mode = FpmLatencyMode::Conservative;

    let cases: [(OpClass, MechKind, &DeviceConfig, Mechanism, IsaOp); 9] = [
        (
            OpClass::Copy,
            MechKind::Baseline,
            &cfg,
            Mechanism::Baseline,
            same_sub,
        ),
        (
            OpClass::Copy,
            MechKind::Fpm,
            &conservative,
            Mechanism::Rowclone,
            same_sub,
        ),
        (
            OpClass::Copy,
            MechKind::PsmInterBank,
            &cfg,
            Mechanism::Rowclone,
            cross_bank,
        ),
        (
            OpClass::Copy,
            MechKind::PsmIntraBank,
            &cfg,
            Mechanism::Rowclone,
            intra_bank,
        ),
        (
            OpClass::Zero,
            MechKind::Baseline,
            &cfg,
            Mechanism::Baseline,
            zero,
        ),
        (
            OpClass::Zero,
            MechKind::Fpm,
            &conservative,
            Mechanism::Rowclone,
            zero,
        ),
        (
            OpClass::AndOr,
            MechKind::Baseline,
            &cfg,
            Mechanism::Baseline,
            bitwise,
        ),
        (
            OpClass::AndOr,
            MechKind::IdaoConservative,
            &conservative,
            Mechanism::Idao,
            bitwise,
        ),
        (
            OpClass::AndOr,
            MechKind::IdaoAggressive,
            &aggressive,
            Mechanism::Idao,
            bitwise,
        ),
    ];

    let mut measured = Vec::new();
    for (op_class, mech, case_cfg, mechanism, op) in cases {
        let (latency, energy) = run_one(case_cfg, mechanism, op)?;
        measured.push((op_class, mech, latency, energy));
    }
    let baseline_of = |op_class: OpClass, idx: usize| {
        measured
            .iter()
            .find(|(c, m, _, _)| *c == op_class && *m == crate::energy::MechKind::Baseline)
            .map(|&(_, _, l, e)| (l, e))
            .unwrap_or((measured[idx].2, measured[idx].3))
    };
    let rows = measured
        .iter()
        .enumerate()
        .map(|(idx, &(op_class, mech, latency, energy))| {
            let (bl, be) = baseline_of(op_class, idx);
            TableReproRow {
                op: op_class,
                mechanism: mech,
                measured_latency_ns: latency,
                measured_energy_uj: energy,
                measured_latency_ratio: bl / latency,
                measured_energy_ratio: be / energy,
                reference: *crate::energy::reference_row(op_class, mech)
                    .expect("table covers case"),
            }
        })
        .collect();
    Ok(rows)
}

/// Full report document: run statistics plus the built-in reference
/// reduction table (absolute figures and the published reduction factors,
/// which are quoted rather than recomputed from the rounded absolutes).
#[derive(Debug, serde::Serialize)]
struct Report<'a> {
    schema_version: u32,
    #[serde(flatten)]
    stats: &'a RunStats,
    reference_table: &'a [ReferenceRow],
}

pub fn report(stats: &RunStats, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let doc = Report {
                schema_version: 1,
                stats,
                reference_table: &REFERENCE_TABLE,
            };
            let mut out = serde_json::to_string_pretty(&doc).expect("report serializes");
            out.push('\n');
            out
        }
        ReportFormat::Csv => report_csv(stats),
        ReportFormat::Text => report_text(stats),
    }
}

fn report_csv(stats: &RunStats) -> String {
    let mut out = String::from("metric,value\n");
    let mut push = |k: String, v: String| {
        out.push_str(&k);
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    };
    push("mechanism".into(), stats.mechanism.into());
    push(
        "energy_mode".into(),
        match stats.energy_mode {
            EnergyMode::TableDriven => "table_driven".into(),
            EnergyMode::PerCommand => "per_command".into(),
        },
    );
    push(
        "total_latency_ns".into(),
        stats.total_latency_ns.to_string(),
    );
    for (k, v) in &stats.latency_by_class_ns {
        push(format!("latency_ns.{k}"), v.to_string());
    }
    push("energy_total_uj".into(), stats.energy_total_uj.to_string());
    for (k, v) in &stats.energy_by_class_uj {
        push(format!("energy_uj.{k}"), v.to_string());
    }
    push(
        "bytes_on_channel".into(),
        stats.bytes_on_channel.to_string(),
    );
    for (k, v) in &stats.bytes_by_class {
        push(format!("bytes.{k}"), v.to_string());
    }
    push("fmtc".into(), stats.fmtc.to_string());
    for (k, v) in &stats.mechanism_counts {
        push(format!("count.{k}"), v.to_string());
    }
    push("llc_hits".into(), stats.llc_hits.to_string());
    push("llc_misses".into(), stats.llc_misses.to_string());
    push("page_faults".into(), stats.page_faults.to_string());
    push(
        "timing_violations".into(),
        stats.timing_violations.to_string(),
    );
    push(
        "reserved_overhead.zero_row".into(),
        stats.reserved_overhead.zero_row.to_string(),
    );
    push(
        "reserved_overhead.tmp_row".into(),
        stats.reserved_overhead.tmp_row.to_string(),
    );
    push(
        "reserved_overhead.bitwise_rows".into(),
        stats.reserved_overhead.bitwise_rows.to_string(),
    );
    for row in &REFERENCE_TABLE {
        let key = format!("reference.{}.{}", row.op.name(), row.mechanism.name());
        push(format!("{key}.latency_ns"), row.latency_ns.to_string());
        push(format!("{key}.energy_uj"), row.energy_uj.to_string());
        push(
            format!("{key}.latency_reduction"),
            row.latency_reduction.to_string(),
        );
        push(
            format!("{key}.energy_reduction"),
            row.energy_reduction.to_string(),
        );
    }
    out
}

fn report_text(stats: &RunStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("mechanism: {}\n", stats.mechanism));
    out.push_str(&format!("total latency: {} ns\n", stats.total_latency_ns));
    for (k, v) in &stats.latency_by_class_ns {
        out.push_str(&format!("  {k}: {v} ns\n"));
    }
    out.push_str(&format!("energy: {} uJ\n", stats.energy_total_uj));
    for (k, v) in &stats.energy_by_class_uj {
        out.push_str(&format!("  {k}: {v} uJ\n"));
    }
    out.push_str(&format!(
        "channel traffic: {} bytes (FMTC {:.4})\n",
        stats.bytes_on_channel, stats.fmtc
    ));
    for (k, v) in &stats.bytes_by_class {
        out.push_str(&format!("  {k}: {v} bytes\n"));
    }
    out.push_str(&format!(
        "llc: {} hits, {} misses\n",
        stats.llc_hits, stats.llc_misses
    ));
    out.push_str("mechanism counts:\n");
    for (k, v) in &stats.mechanism_counts {
        out.push_str(&format!("  {k}: {v}\n"));
    }
    out.push_str(&format!(
        "page faults: {}, timing violations: {}\n",
        stats.page_faults, stats.timing_violations
    ));
    out.push_str("reference reductions (4 KB ops, measured ratio printed by `table3`):\n");
    for row in &REFERENCE_TABLE {
        out.push_str(&format!(
            "  {:>6} {:>17}: {:>6} ns, {:>5} uJ, {}x latency, {}x energy\n",
            row.op.name(),
            row.mechanism.name(),
            row.latency_ns,
            row.energy_uj,
            row.latency_reduction,
            row.energy_reduction
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;

    fn cfg() -> DeviceConfig {
        DeviceConfig {
            banks_per_chip: 4,
            subarrays_per_bank: 4,
            rows_per_subarray: 16,
            row_size_bytes: 4096,
            ..DeviceConfig::default()
        }
    }

    #[test]
    fn empty_trace_gives_zero_stats() {
        let out = run_trace(&[], &cfg(), Mechanism::Rowclone).unwrap();
        assert_eq!(out.stats.total_latency_ns, 0.0);
        assert_eq!(out.stats.bytes_on_channel, 0);
        assert_eq!(out.stats.fmtc, 0.0);
        assert_eq!(out.stats.timing_violations, 0);
    }

    #[test]
    fn single_same_subarray_copy_is_85ns() {
        // Row-interleaved: the next row of the same subarray sits one full
        // row stride (banks x subarrays x row size) away.
        let ops = parse_trace("MEMCOPY 0x0 0x10000 4096\n").unwrap();
        let out = run_trace(&ops, &cfg(), Mechanism::Rowclone).unwrap();
        assert_eq!(out.stats.total_latency_ns, 85.0);
        assert_eq!(out.stats.bytes_on_channel, 0);
        assert_eq!(out.stats.mechanism_counts["fpm_copy"], 1);
    }

    #[test]
    fn fmtc_is_zero_without_copies() {
        let ops = parse_trace("WRITE 0x0 0x1\nREAD 0x40\nMEMINIT 0x2000 64 0\n").unwrap();
        let out = run_trace(&ops, &cfg(), Mechanism::Rowclone).unwrap();
        assert_eq!(out.stats.fmtc, 0.0);
        assert!(out.stats.bytes_on_channel > 0);
    }

    #[test]
    fn reports_are_deterministic() {
        let ops = parse_trace("WRITE 0x0 0x1\nMEMCOPY 0x0 0x1000 4096\nREAD 0x1000\n").unwrap();
        let a = report(
            &run_trace(&ops, &cfg(), Mechanism::Rowclone).unwrap().stats,
            ReportFormat::Json,
        );
        let b = report(
            &run_trace(&ops, &cfg(), Mechanism::Rowclone).unwrap().stats,
            ReportFormat::Json,
        );
        assert_eq!(a, b);
        let c = report(
            &run_trace(&ops, &cfg(), Mechanism::Rowclone).unwrap().stats,
            ReportFormat::Csv,
        );
        assert!(c.starts_with("metric,value\n"));
        assert!(c.contains("fmtc,"));
    }

    #[test]
    fn trace_errors_carry_the_op_index() {
        let ops = parse_trace("READ 0x0\nMEMCOPY 0x0 0x0 999999999999\n").unwrap();
        match run_trace(&ops, &cfg(), Mechanism::Rowclone) {
            Err(Error::TraceExec { index: 1, .. }) => {}
            Err(other) => panic!("unexpected {other:?}"),
            Ok(_) => panic!("oversized copy accepted"),
        }
    }
}
