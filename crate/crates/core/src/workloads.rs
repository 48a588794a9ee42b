//! Synthetic workload generators and the bitmap-query analysis.
//!
//! * forkbench: a parent array is initialized with random values, then a
//!   child updates N random pages, each update triggering a copy-on-write
//!   page copy followed by one cacheline write.
//! * bitmap range queries: each query ORs the bitmaps of its bins pairwise
//!   into an accumulator; the non-OR share of query time is an analytic
//!   constant, so speedups are Amdahl-bounded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DeviceConfig;
use crate::energy::OpClass;
use crate::engine::{Mechanism, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::harness::run_trace;
use crate::memctrl::PagePools;
use crate::trace::TraceOp;

/// Deterministic forkbench trace: initialization writes over `s_bytes`,
/// then `n_pages` copy-on-write page updates. Pages are spread across
/// subarrays; copy destinations are allocated from the source's pool, so
/// the copies are eligible for in-subarray acceleration.
pub fn gen_forkbench(
    cfg: &DeviceConfig,
    s_bytes: u64,
    n_pages: u64,
    seed: u64,
) -> Result<Vec<TraceOp>> {
    if s_bytes == 0 || !s_bytes.is_multiple_of(PAGE_SIZE) {
        return Err(Error::InvalidWorkload(format!(
            "array size must be a non-zero multiple of {PAGE_SIZE} bytes"
        )));
    }
    let parent_pages = s_bytes / PAGE_SIZE;
    if n_pages > parent_pages {
        return Err(Error::InvalidWorkload(format!(
            "cannot update {n_pages} pages of a {parent_pages}-page array"
        )));
    }
    let mut pools = PagePools::build(cfg)?;
    if (pools.free_pages() as u64) < parent_pages + n_pages {
        return Err(Error::InvalidWorkload(format!(
            "device too small: {} free pages for {} needed",
            pools.free_pages(),
            parent_pages + n_pages
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parent: Vec<u64> = (0..parent_pages)
        .map(|_| pools.alloc_page_spread())
        .collect::<Result<_>>()?;

    let lines_per_page = PAGE_SIZE / cfg.cacheline_bytes;
    let mut ops = Vec::with_capacity((parent_pages * lines_per_page + 2 * n_pages) as usize);
    for &page in &parent {
        for l in 0..lines_per_page {
            ops.push(TraceOp::Write {
                addr: page + l * cfg.cacheline_bytes,
                value: rng.gen(),
            });
        }
    }
    // Choose n distinct pages (partial Fisher-Yates).
    let mut indices: Vec<u64> = (0..parent_pages).collect();
    for k in 0..n_pages as usize {
        let pick = rng.gen_range(k..indices.len());
        indices.swap(k, pick);
    }
    for &idx in &indices[..n_pages as usize] {
        let src = parent[idx as usize];
        let dst = pools.alloc_page_same_subarray(src, cfg)?;
        ops.push(TraceOp::MemCopy {
            src,
            dst: dst.addr,
            size: PAGE_SIZE,
        });
        let line = rng.gen_range(0..lines_per_page);
        ops.push(TraceOp::Write {
            addr: dst.addr + line * cfg.cacheline_bytes,
            value: rng.gen(),
        });
    }
    Ok(ops)
}

/// The default query set: bins per range query and the measured share of
/// query time spent in OR operations, in percent.
pub const DEFAULT_QUERY_SET: [(u64, u8); 7] = [
    (3, 29),
    (9, 29),
    (20, 31),
    (45, 32),
    (98, 34),
    (118, 34),
    (128, 34),
];

/// Average OR share across the default query set.
pub const DEFAULT_OR_SHARE_PERCENT: u8 = 31;

/// Row addresses of the bitmaps and the accumulator, all in one subarray.
pub struct BitmapLayout {
    /// `bitmaps[bin][row]` -> byte address of that bitmap row.
    pub bitmaps: Vec<Vec<u64>>,
    pub accumulator: Vec<u64>,
}

pub fn bitmap_layout(cfg: &DeviceConfig, bins: u64, rows_per_bitmap: u64) -> Result<BitmapLayout> {
    let needed = (bins + 1) * rows_per_bitmap;
    if needed > cfg.rows_per_subarray - 7 {
        return Err(Error::InvalidWorkload(format!(
            "{needed} rows needed in one subarray, only {} usable",
            cfg.rows_per_subarray - 7
        )));
    }
    let row_addr =
        |grow: u64| crate::addr::encode_location(&crate::addr::row_location(grow, cfg), cfg);
    let mut bitmaps = Vec::new();
    for bin in 0..bins {
        bitmaps.push(
            (0..rows_per_bitmap)
                .map(|r| row_addr(bin * rows_per_bitmap + r))
                .collect::<Result<Vec<u64>>>()?,
        );
    }
    let accumulator = (0..rows_per_bitmap)
        .map(|r| row_addr(bins * rows_per_bitmap + r))
        .collect::<Result<Vec<u64>>>()?;
    Ok(BitmapLayout {
        bitmaps,
        accumulator,
    })
}

/// Trace for `queries` range queries over `bins` bitmaps: random bitmap
/// contents, then (bins - 1) pairwise ORs per query.
pub fn gen_bitmap_trace(
    cfg: &DeviceConfig,
    bins: u64,
    rows_per_bitmap: u64,
    queries: u64,
    seed: u64,
) -> Result<Vec<TraceOp>> {
    if bins < 2 {
        return Err(Error::InvalidWorkload(
            "a range query needs at least two bins".into(),
        ));
    }
    let layout = bitmap_layout(cfg, bins, rows_per_bitmap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    for bin in &layout.bitmaps {
        for &row_addr in bin {
            for l in 0..cfg.lines_per_row() {
                ops.push(TraceOp::Write {
                    addr: row_addr + l * cfg.cacheline_bytes,
                    value: rng.gen(),
                });
            }
        }
    }
    let row_bytes = cfg.row_size_bytes;
    for _ in 0..queries {
        for r in 0..rows_per_bitmap as usize {
            ops.push(TraceOp::MemOr {
                src1: layout.bitmaps[0][r],
                src2: layout.bitmaps[1][r],
                dst: layout.accumulator[r],
                size: row_bytes,
            });
            for bin in 2..bins as usize {
                ops.push(TraceOp::MemOr {
                    src1: layout.accumulator[r],
                    src2: layout.bitmaps[bin][r],
                    dst: layout.accumulator[r],
                    size: row_bytes,
                });
            }
        }
    }
    Ok(ops)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BitmapQueryResult {
    pub bins: u64,
    pub or_share_percent: u8,
    pub or_ns_baseline: f64,
    pub or_ns_mechanism: f64,
    /// Estimated whole-query speedup: OR time is simulated, the non-OR
    /// share is the analytic constant.
    pub speedup: f64,
    /// Amdahl bound 1 / (1 - f).
    pub speedup_bound: f64,
}

/// Run `queries` range queries and estimate the whole-query speedup from
/// the simulated OR time and the analytic non-OR share.
pub fn run_bitmap_queries(
    cfg: &DeviceConfig,
    bins: u64,
    rows_per_bitmap: u64,
    queries: u64,
    mechanism: Mechanism,
    or_share_percent: u8,
) -> Result<BitmapQueryResult> {
    if or_share_percent == 0 || or_share_percent >= 100 {
        return Err(Error::InvalidWorkload(format!(
            "OR share must be in 1..=99 percent, got {or_share_percent}"
        )));
    }
    let trace = gen_bitmap_trace(cfg, bins, rows_per_bitmap, queries, 0xb1790)?;
    let or_ns = |mech: Mechanism| -> Result<f64> {
        let out = run_trace(&trace, cfg, mech)?;
        Ok(out
            .stats
            .latency_by_class_ns
            .get(OpClass::AndOr.name())
            .copied()
            .unwrap_or(0.0))
    };
    let or_ns_baseline = or_ns(Mechanism::Baseline)?;
    let or_ns_mechanism = if mechanism == Mechanism::Baseline {
        or_ns_baseline
    } else {
        or_ns(mechanism)?
    };
    let f = or_share_percent as f64 / 100.0;
    let ratio = or_ns_mechanism / or_ns_baseline;
    let speedup = if ratio == 1.0 {
        1.0
    } else {
        1.0 / ((1.0 - f) + f * ratio)
    };
    Ok(BitmapQueryResult {
        bins,
        or_share_percent,
        or_ns_baseline,
        or_ns_mechanism,
        speedup,
        speedup_bound: 1.0 / (1.0 - f),
    })
}

/// The default query set evaluated one query per row.
pub fn run_default_bitmap_suite(
    cfg: &DeviceConfig,
    mechanism: Mechanism,
) -> Result<Vec<BitmapQueryResult>> {
    DEFAULT_QUERY_SET
        .iter()
        .map(|&(bins, pct)| run_bitmap_queries(cfg, bins, 1, 1, mechanism, pct))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DeviceConfig {
        DeviceConfig {
            banks_per_chip: 4,
            subarrays_per_bank: 8,
            rows_per_subarray: 64,
            row_size_bytes: 4096,
            llc_capacity_bytes: 64 * 1024,
            llc_ways: 8,
            ..DeviceConfig::default()
        }
    }

    #[test]
    fn forkbench_shape_and_determinism() {
        let ops = gen_forkbench(&cfg(), 64 * 1024, 4, 7).unwrap();
        let again = gen_forkbench(&cfg(), 64 * 1024, 4, 7).unwrap();
        assert_eq!(ops, again);
        let copies = ops
            .iter()
            .filter(|o| matches!(o, TraceOp::MemCopy { .. }))
            .count();
        assert_eq!(copies, 4);
        let writes = ops
            .iter()
            .filter(|o| matches!(o, TraceOp::Write { .. }))
            .count();
        assert_eq!(writes as u64, 64 * 1024 / 64 + 4);
        // Every copy is page-sized and same-subarray eligible.
        for op in &ops {
            if let TraceOp::MemCopy { src, dst, size } = *op {
                assert_eq!(size, PAGE_SIZE);
                let s = crate::addr::decode_address(src, &cfg()).unwrap();
                let d = crate::addr::decode_address(dst, &cfg()).unwrap();
                assert_eq!(
                    crate::addr::global_subarray(&s, &cfg()),
                    crate::addr::global_subarray(&d, &cfg())
                );
            }
        }
    }

    #[test]
    fn forkbench_rejects_oversized_n() {
        assert!(matches!(
            gen_forkbench(&cfg(), 8 * 1024, 3, 0),
            Err(Error::InvalidWorkload(_))
        ));
    }

    #[test]
    fn bitmap_queries_baseline_speedup_is_one() {
        let r = run_bitmap_queries(&cfg(), 3, 1, 1, Mechanism::Baseline, 31).unwrap();
        assert_eq!(r.speedup, 1.0);
        assert!(r.or_ns_baseline > 0.0);
    }

    #[test]
    fn bitmap_queries_idao_within_amdahl_envelope() {
        let r = run_bitmap_queries(&cfg(), 5, 1, 2, Mechanism::Idao, 31).unwrap();
        assert!(r.or_ns_mechanism < r.or_ns_baseline);
        assert!(r.speedup > 1.0 && r.speedup <= r.speedup_bound, "{r:?}");
    }

    #[test]
    fn bitmap_layout_rejects_overflow() {
        assert!(matches!(
            bitmap_layout(&cfg(), 64, 1),
            Err(Error::InvalidWorkload(_))
        ));
    }
}
