//! In-DRAM bulk bitwise AND/OR built from triple-row activation.
//!
//! One operation on rows A, B -> R runs five steps: copy A to T1, copy B to
//! T2, copy a control row (zeros for AND, ones for OR) to T3, activate T1,
//! T2, T3 simultaneously, and copy T1 to R. The copies immediately precede
//! the triple activation, so the cells are close to fully charged and the
//! bitline settles to the per-bit majority. Sources are never modified.
//!
//! When the three operand rows do not share a subarray some copies fall
//! back to PSM; if three or more PSM hops would be needed the operation is
//! handed back to the CPU.

use crate::energy::{MechKind, OpClass};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::sched::latency_idao;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitwiseOp {
    And,
    Or,
}

/// Per-bit majority of three equal-length bit vectors: `ab + bc + ca`.
pub fn majority3(a: &[u8], b: &[u8], c: &[u8]) -> Result<Vec<u8>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.len() != c.len() {
        return Err(Error::LengthMismatch {
            a: a.len(),
            b: c.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .zip(c)
        .map(|((&x, &y), &z)| (x & y) | (y & z) | (x & z))
        .collect())
}

/// How one row reaches a target subarray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CopyRoute {
    /// Already in the target subarray: FPM.
    Fpm,
    /// Different bank: one PSM hop.
    PsmInter,
    /// Same bank, different subarray: two PSM hops via a temporary row.
    PsmIntra,
}

impl CopyRoute {
    fn hops(self) -> u32 {
        match self {
            CopyRoute::Fpm => 0,
            CopyRoute::PsmInter => 1,
            CopyRoute::PsmIntra => 2,
        }
    }
}

struct IdaoPlan {
    gsub: u64,
    route_a: CopyRoute,
    route_b: CopyRoute,
    route_r: CopyRoute,
}

impl IdaoPlan {
    fn total_hops(&self) -> u32 {
        self.route_a.hops() + self.route_b.hops() + self.route_r.hops()
    }

    fn all_fpm(&self) -> bool {
        self.total_hops() == 0
    }
}

impl Engine {
    /// Reject the operation if any participating row was restored longer
    /// than the retention window ago. In the in-DRAM bitwise procedure the
    /// copies into T1..T3 immediately precede the activation, so this guard
    /// passes by construction.
    pub fn freshness_guard(&self, rows: &[u64], now: f64) -> Result<()> {
        for &row in rows {
            let age = now - self.dram.last_refresh(row);
            if age > self.cfg.retention_window {
                return Err(Error::StaleCell {
                    age_ns: age,
                    window_ns: self.cfg.retention_window,
                });
            }
        }
        Ok(())
    }

    fn route_to(&self, grow: u64, gsub: u64) -> CopyRoute {
        if grow / self.cfg.rows_per_subarray == gsub {
            CopyRoute::Fpm
        } else if self.dram.bank_of_row(grow) != gsub / self.cfg.subarrays_per_bank {
            CopyRoute::PsmInter
        } else {
            CopyRoute::PsmIntra
        }
    }

    fn plan_idao(&self, a: u64, b: u64, r: u64) -> Result<IdaoPlan> {
        let mut candidates: Vec<u64> = [a, b, r]
            .iter()
            .map(|&g| g / self.cfg.rows_per_subarray)
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let plan = candidates
            .into_iter()
            .map(|gsub| IdaoPlan {
                gsub,
                route_a: self.route_to(a, gsub),
                route_b: self.route_to(b, gsub),
                route_r: self.route_to(r, gsub),
            })
            .min_by_key(|p| (p.total_hops(), p.gsub))
            .expect("at least one candidate subarray");
        if plan.total_hops() >= 3 {
            return Err(Error::FallbackToCpu);
        }
        if plan.total_hops() > 0 && self.reserved.total_banks < 2 {
            return Err(Error::FallbackToCpu);
        }
        Ok(plan)
    }

    fn seq_route_copy(&mut self, route: CopyRoute, src: u64, dst: u64, cursor: f64) -> Result<f64> {
        let cols: Vec<(u64, u64)> = (0..self.cfg.lines_per_row()).map(|c| (c, c)).collect();
        match route {
            CopyRoute::Fpm => self.seq_fpm_copy(src, dst, cursor),
            CopyRoute::PsmInter => self.seq_psm_copy(src, dst, &cols, cursor),
            CopyRoute::PsmIntra => {
                let bank = self.dram.bank_of_row(src);
                let tmp = self
                    .reserved
                    .tmp_row((bank + 1) % self.reserved.total_banks);
                let mid = self.seq_psm_copy(src, tmp, &cols, cursor)?;
                self.seq_psm_copy(tmp, dst, &cols, mid)
            }
        }
    }

    /// Execute one row-sized bitwise operation. Returns the cursor after
    /// the final copy.
    pub(crate) fn do_idao_row(
        &mut self,
        op: BitwiseOp,
        a: u64,
        b: u64,
        r: u64,
        cursor: f64,
    ) -> Result<f64> {
        let plan = self.plan_idao(a, b, r)?;
        let t1 = self.reserved.t1_row(plan.gsub);
        let t2 = self.reserved.t2_row(plan.gsub);
        let t3 = self.reserved.t3_row(plan.gsub);
        let control = match op {
            BitwiseOp::And => self.reserved.c0_row(plan.gsub),
            BitwiseOp::Or => self.reserved.c1_row(plan.gsub),
        };
        let row_bytes = self.cfg.row_size_bytes;
        let aggressive = matches!(
            self.cfg.fpm_latency_mode,
            crate::config::FpmLatencyMode::Aggressive
        );
        let t_ras = self.cfg.timing.t_ras;

        let end = self.with_table_charge(|e| {
            let mut cur = e.seq_route_copy(plan.route_a, a, t1, cursor)?;
            cur = e.seq_route_copy(plan.route_b, b, t2, cur)?;
            cur = e.seq_route_copy(CopyRoute::Fpm, control, t3, cur)?;
            e.freshness_guard(&[t1, t2, t3], cur)?;
            let gbank = e.dram.bank_of_row(t1);
            cur = e.ensure_precharged(gbank, cur);
            let (multi_issue, multi_complete) = e.cmd_multi_activate([t1, t2, t3], cur)?;
            if plan.route_r == CopyRoute::Fpm {
                // Fifth step folded into the activation sequence: the
                // destination wordline picks the result up from the
                // amplifiers.
                let (pre_from, _) = if aggressive {
                    let t = multi_issue + t_ras;
                    e.cmd_activate(r, t, true)?;
                    (t, 0.0)
                } else {
                    let (act_issue, _) = e.cmd_activate(r, multi_complete, false)?;
                    (act_issue + t_ras, 0.0)
                };
                let (_, done) = e.cmd_precharge(gbank, pre_from);
                Ok(done)
            } else {
                let (_, pre_done) = e.cmd_precharge(gbank, multi_issue + t_ras);
                e.seq_route_copy(plan.route_r, t1, r, pre_done)
            }
        })?;

        // Table-driven pricing: the in-subarray share is charged from the
        // reference row (complete operation = four copy sequences), PSM
        // detours from the copy rows. Approximate for mixed placements.
        let mech = if aggressive {
            MechKind::IdaoAggressive
        } else {
            MechKind::IdaoConservative
        };
        let mut fpm_sequences: u64 = 1; // the triple activation sequence
        for route in [plan.route_a, plan.route_b, plan.route_r] {
            match route {
                CopyRoute::Fpm => fpm_sequences += 1,
                CopyRoute::PsmInter => self.charge_table(
                    OpClass::AndOr,
                    OpClass::Copy,
                    MechKind::PsmInterBank,
                    row_bytes,
                )?,
                CopyRoute::PsmIntra => self.charge_table(
                    OpClass::AndOr,
                    OpClass::Copy,
                    MechKind::PsmIntraBank,
                    row_bytes,
                )?,
            }
        }
        self.charge_table(
            OpClass::AndOr,
            OpClass::AndOr,
            mech,
            row_bytes * fpm_sequences / 4,
        )?;
        self.counters.count("idao_rows");
        if plan.all_fpm() {
            // The accounted figure may be the tabulated constant rather
            // than the scheduled 4 x copy sequence.
            self.adjust_accounting(latency_idao(&self.cfg) - (end - cursor));
        }
        Ok(end)
    }

    /// Bulk bitwise AND/OR of two rows into a destination row.
    pub fn in_dram_bitwise(&mut self, op: BitwiseOp, a: u64, b: u64, r: u64) -> Result<()> {
        let (a, b, r) = (
            self.resolve_row(a),
            self.resolve_row(b),
            self.resolve_row(r),
        );
        for g in [a, b, r] {
            if self.reserved.is_reserved_row(g) {
                return Err(Error::ReservedRowTarget { row: g });
            }
        }
        let start = self.begin_op(OpClass::AndOr);
        self.do_idao_row(op, a, b, r, start)?;
        self.end_op(start);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DeviceConfig, FpmLatencyMode, IdaoConservativeSource};
    use crate::engine::Mechanism;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cfg() -> DeviceConfig {
        DeviceConfig {
            banks_per_chip: 4,
            subarrays_per_bank: 4,
            rows_per_subarray: 16,
            row_size_bytes: 512,
            ..DeviceConfig::default()
        }
    }

    fn engine() -> Engine {
        Engine::new(&cfg(), Mechanism::Idao).unwrap()
    }

    fn write_row(e: &mut Engine, grow: u64, data: &[u8]) {
        let gbank = e.dram.bank_of_row(grow);
        e.dram.precharge(gbank);
        e.dram.activate(grow, e.clock()).unwrap();
        for (col, chunk) in data.chunks(64).enumerate() {
            e.dram.column_write(gbank, col as u64, chunk).unwrap();
        }
        e.dram.precharge(gbank);
    }

    fn random_row(rng: &mut StdRng, len: usize) -> Vec<u8> {
        (0..len).map(|_| rng.gen()).collect()
    }

    #[test]
    fn majority3_votes_per_bit() {
        assert_eq!(majority3(&[0b1], &[0b1], &[0b0]).unwrap(), vec![0b1]);
        assert_eq!(majority3(&[0b0], &[0b1], &[0b0]).unwrap(), vec![0b0]);
        assert!(matches!(
            majority3(&[1, 2], &[1], &[1]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn majority_identity_with_control_decomposition() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..200 {
            let a = random_row(&mut rng, 32);
            let b = random_row(&mut rng, 32);
            let c = random_row(&mut rng, 32);
            let maj = majority3(&a, &b, &c).unwrap();
            let alt: Vec<u8> = a
                .iter()
                .zip(&b)
                .zip(&c)
                .map(|((&x, &y), &z)| (z & (x | y)) | (!z & (x & y)))
                .collect();
            assert_eq!(maj, alt);
        }
    }

    #[test]
    fn and_or_same_subarray_results_and_latency() {
        let mut e = engine();
        let a = vec![0b1100_1100u8; 512];
        let b = vec![0b1010_1010u8; 512];
        write_row(&mut e, 0, &a);
        write_row(&mut e, 1, &b);
        let t0 = e.clock();
        e.in_dram_bitwise(BitwiseOp::And, 0, 1, 2).unwrap();
        assert_eq!(e.counters.total_latency_ns, 340.0);
        assert!(e.clock() - t0 == 340.0);
        assert!(e.dram.row_data(2).iter().all(|&v| v == 0b1000_1000));
        e.in_dram_bitwise(BitwiseOp::Or, 0, 1, 3).unwrap();
        assert!(e.dram.row_data(3).iter().all(|&v| v == 0b1110_1110));
        // Sources intact.
        assert_eq!(e.dram.row_data(0), &a[..]);
        assert_eq!(e.dram.row_data(1), &b[..]);
        e.assert_reserved_integrity();
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn aggressive_mode_is_200ns() {
        let mut c = cfg();
        c.fpm_latency_mode = FpmLatencyMode::Aggressive;
        let mut e = Engine::new(&c, Mechanism::Idao).unwrap();
        let t0 = e.clock();
        e.in_dram_bitwise(BitwiseOp::And, 0, 1, 2).unwrap();
        assert_eq!(e.clock() - t0, 200.0);
        assert!(e.validate_timing().is_empty(), "{:?}", e.validate_timing());
    }

    #[test]
    fn table_source_reports_320_but_schedules_340() {
        let mut c = cfg();
        c.idao_conservative_source = IdaoConservativeSource::Table;
        let mut e = Engine::new(&c, Mechanism::Idao).unwrap();
        e.in_dram_bitwise(BitwiseOp::Or, 0, 1, 2).unwrap();
        assert_eq!(e.counters.total_latency_ns, 320.0);
        assert_eq!(e.clock(), 340.0);
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn random_rows_match_reference_bitwise() {
        let mut e = engine();
        let mut rng = StdRng::seed_from_u64(5);
        for i in 0..100 {
            let a = random_row(&mut rng, 512);
            let b = random_row(&mut rng, 512);
            write_row(&mut e, 0, &a);
            write_row(&mut e, 1, &b);
            let op = if i % 2 == 0 {
                BitwiseOp::And
            } else {
                BitwiseOp::Or
            };
            e.in_dram_bitwise(op, 0, 1, 2).unwrap();
            let expect: Vec<u8> = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| if i % 2 == 0 { x & y } else { x | y })
                .collect();
            assert_eq!(e.dram.row_data(2), &expect[..]);
            assert_eq!(e.dram.row_data(0), &a[..]);
            assert_eq!(e.dram.row_data(1), &b[..]);
        }
        e.assert_reserved_integrity();
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn operand_aliasing_is_supported() {
        let mut e = engine();
        let mut rng = StdRng::seed_from_u64(6);
        let a = random_row(&mut rng, 512);
        let b = random_row(&mut rng, 512);
        write_row(&mut e, 0, &a);
        write_row(&mut e, 1, &b);
        // R aliases A.
        e.in_dram_bitwise(BitwiseOp::Or, 0, 1, 0).unwrap();
        let expect: Vec<u8> = a.iter().zip(&b).map(|(&x, &y)| x | y).collect();
        assert_eq!(e.dram.row_data(0), &expect[..]);
        // A aliases B: AND(x, x) = x.
        write_row(&mut e, 3, &a);
        e.in_dram_bitwise(BitwiseOp::And, 3, 3, 4).unwrap();
        assert_eq!(e.dram.row_data(4), &a[..]);
    }

    #[test]
    fn cross_bank_operands_use_psm_and_stay_correct() {
        let mut e = engine();
        let mut rng = StdRng::seed_from_u64(7);
        let a = random_row(&mut rng, 512);
        let b = random_row(&mut rng, 512);
        let rows_per_bank = 64;
        write_row(&mut e, 0, &a); // bank 0
        write_row(&mut e, rows_per_bank, &b); // bank 1
                                              // Result in bank 0's subarray: B needs one PSM hop.
        e.in_dram_bitwise(BitwiseOp::And, 0, rows_per_bank, 2)
            .unwrap();
        let expect: Vec<u8> = a.iter().zip(&b).map(|(&x, &y)| x & y).collect();
        assert_eq!(e.dram.row_data(2), &expect[..]);
        assert!(e.validate_timing().is_empty());
    }

    #[test]
    fn three_psm_hops_fall_back_to_cpu() {
        let mut e = engine();
        let rows_per_bank = 64;
        // a, b, r in three different banks: best plan needs 2 hops -> ok.
        assert!(e
            .in_dram_bitwise(BitwiseOp::And, 0, rows_per_bank, 2 * rows_per_bank)
            .is_ok());
        // a, b in different subarrays of one bank, r in another subarray of
        // the same bank: every candidate needs >= 3 hops -> CPU.
        let err = e.in_dram_bitwise(BitwiseOp::And, 0, 16, 32);
        assert!(matches!(err, Err(Error::FallbackToCpu)));
    }

    #[test]
    fn freshness_guard_blocks_stale_rows() {
        let e = engine();
        assert!(e.freshness_guard(&[0, 1, 2], 1000.0).is_ok());
        assert!(matches!(
            e.freshness_guard(&[0], e.cfg.retention_window + 1.0),
            Err(Error::StaleCell { .. })
        ));
        let mut c = cfg();
        c.retention_window = f64::INFINITY;
        let e2 = Engine::new(&c, Mechanism::Idao).unwrap();
        assert!(e2.freshness_guard(&[0], 1e18).is_ok());
    }

    #[test]
    fn all_fpm_op_issues_four_activation_sequences() {
        let mut e = engine();
        e.in_dram_bitwise(BitwiseOp::And, 0, 1, 2).unwrap();
        let count = |k: crate::sched::CommandKind| e.log().iter().filter(|c| c.kind == k).count();
        // Three copy sequences (two activations each), the triple
        // activation with the folded destination activation, and one
        // precharge per sequence.
        assert_eq!(count(crate::sched::CommandKind::Activate), 7);
        assert_eq!(count(crate::sched::CommandKind::MultiActivate), 1);
        assert_eq!(count(crate::sched::CommandKind::Precharge), 4);
        assert_eq!(count(crate::sched::CommandKind::Transfer), 0);
    }

    #[test]
    fn and_then_or_never_invents_bits() {
        let mut e = engine();
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..50 {
            let a = random_row(&mut rng, 512);
            let b = random_row(&mut rng, 512);
            let d = random_row(&mut rng, 512);
            write_row(&mut e, 0, &a);
            write_row(&mut e, 1, &b);
            write_row(&mut e, 3, &d);
            e.in_dram_bitwise(BitwiseOp::And, 0, 1, 2).unwrap();
            e.in_dram_bitwise(BitwiseOp::Or, 2, 3, 4).unwrap();
            let out = e.dram.row_data(4);
            for i in 0..512 {
                // A bit can only be set where AND(a,b) or d contributed.
                assert_eq!(out[i] & !((a[i] & b[i]) | d[i]), 0, "byte {i}");
            }
        }
    }

    #[test]
    fn control_rows_survive_mixed_traffic() {
        let mut e = engine();
        let mut rng = StdRng::seed_from_u64(8);
        for i in 0..1000 {
            let a = random_row(&mut rng, 512);
            write_row(&mut e, 0, &a);
            let op = if i % 2 == 0 {
                BitwiseOp::And
            } else {
                BitwiseOp::Or
            };
            e.in_dram_bitwise(op, 0, 1, 2).unwrap();
        }
        e.assert_reserved_integrity();
    }
}
