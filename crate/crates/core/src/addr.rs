//! Physical address decoding and the OS-visible granularity values.
//!
//! Address layouts are fixed mixed-radix splits, lowest factor first:
//!
//! * `row` interleave:       byte | line | subarray | bank | row | rank | channel
//! * `cacheline` interleave: byte | channel | line | subarray | bank | row | rank
//!
//! Under row interleave consecutive row-sized blocks walk the subarrays of a
//! bank before moving to the next bank, which keeps the reserved zero rows
//! contiguous in the physical address space. Under cacheline interleave
//! consecutive cachelines rotate across channels.

use crate::config::{DeviceConfig, Interleave};
use crate::error::{Error, Result};

/// Decoded physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Location {
    pub channel: u64,
    pub rank: u64,
    pub bank: u64,
    pub subarray: u64,
    pub row: u64,
    /// Cacheline index within the row.
    pub column: u64,
    pub byte_offset_in_line: u64,
}

/// Decode a byte address into its device coordinates.
pub fn decode_address(addr: u64, cfg: &DeviceConfig) -> Result<Location> {
    let capacity = cfg.capacity_bytes();
    if addr >= capacity {
        return Err(Error::AddressRange {
            addr,
            bound: capacity,
            what: "capacity",
        });
    }
    let mut a = addr;
    let mut take = |radix: u64| {
        let v = a % radix;
        a /= radix;
        v
    };
    let mut loc = Location::default();
    match cfg.interleave {
        Interleave::Row => {
            loc.byte_offset_in_line = take(cfg.cacheline_bytes);
            loc.column = take(cfg.lines_per_row());
            loc.subarray = take(cfg.subarrays_per_bank);
            loc.bank = take(cfg.banks_per_chip);
            loc.row = take(cfg.rows_per_subarray);
            loc.rank = take(cfg.ranks_per_channel);
            loc.channel = take(cfg.channels);
        }
        Interleave::Cacheline => {
            loc.byte_offset_in_line = take(cfg.cacheline_bytes);
            loc.channel = take(cfg.channels);
            loc.column = take(cfg.lines_per_row());
            loc.subarray = take(cfg.subarrays_per_bank);
            loc.bank = take(cfg.banks_per_chip);
            loc.row = take(cfg.rows_per_subarray);
            loc.rank = take(cfg.ranks_per_channel);
        }
    }
    Ok(loc)
}

/// Re-encode a location into its byte address. Exact inverse of
/// [`decode_address`].
pub fn encode_location(loc: &Location, cfg: &DeviceConfig) -> Result<u64> {
    let bounds = [
        ("channel", loc.channel, cfg.channels),
        ("rank", loc.rank, cfg.ranks_per_channel),
        ("bank", loc.bank, cfg.banks_per_chip),
        ("subarray", loc.subarray, cfg.subarrays_per_bank),
        ("row", loc.row, cfg.rows_per_subarray),
        ("column", loc.column, cfg.lines_per_row()),
        (
            "byte_offset_in_line",
            loc.byte_offset_in_line,
            cfg.cacheline_bytes,
        ),
    ];
    for (what, v, bound) in bounds {
        if v >= bound {
            return Err(Error::AddressRange {
                addr: v,
                bound,
                what,
            });
        }
    }
    let mut addr = 0u64;
    let mut put = |value: u64, radix: u64| {
        addr = addr * radix + value;
    };
    match cfg.interleave {
        Interleave::Row => {
            put(loc.channel, cfg.channels);
            put(loc.rank, cfg.ranks_per_channel);
            put(loc.row, cfg.rows_per_subarray);
            put(loc.bank, cfg.banks_per_chip);
            put(loc.subarray, cfg.subarrays_per_bank);
            put(loc.column, cfg.lines_per_row());
            put(loc.byte_offset_in_line, cfg.cacheline_bytes);
        }
        Interleave::Cacheline => {
            put(loc.rank, cfg.ranks_per_channel);
            put(loc.row, cfg.rows_per_subarray);
            put(loc.bank, cfg.banks_per_chip);
            put(loc.subarray, cfg.subarrays_per_bank);
            put(loc.column, cfg.lines_per_row());
            put(loc.channel, cfg.channels);
            put(loc.byte_offset_in_line, cfg.cacheline_bytes);
        }
    }
    Ok(addr)
}

/// Minimum in-DRAM operation granularity: row size times channel count.
pub fn mdgr(cfg: &DeviceConfig) -> u64 {
    cfg.row_size_bytes * cfg.channels
}

/// Contiguous physical-address bit field that selects the subarray index.
///
/// This is the mapping a module would export through its SPD EEPROM so the
/// OS can group pages by subarray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubarrayMask {
    pub low_bit: u32,
    pub width: u32,
}

impl SubarrayMask {
    pub fn extract(&self, addr: u64) -> u64 {
        (addr >> self.low_bit) & ((1u64 << self.width) - 1)
    }

    pub fn bit_positions(&self) -> Vec<u32> {
        (self.low_bit..self.low_bit + self.width).collect()
    }
}

/// Describe which address bits select the subarray.
///
/// Only expressible when every factor below the subarray digit is a power of
/// two (and the subarray count itself is one); otherwise the index is not a
/// bit field and this returns a `Config` error.
pub fn spd_subarray_mask(cfg: &DeviceConfig) -> Result<SubarrayMask> {
    let below = match cfg.interleave {
        Interleave::Row => cfg.row_size_bytes,
        Interleave::Cacheline => cfg.row_size_bytes * cfg.channels,
    };
    if !below.is_power_of_two() || !cfg.subarrays_per_bank.is_power_of_two() {
        return Err(Error::Config(
            "subarray index is not a contiguous bit field for this geometry".into(),
        ));
    }
    Ok(SubarrayMask {
        low_bit: below.trailing_zeros(),
        width: cfg.subarrays_per_bank.trailing_zeros(),
    })
}

/// Linear row index over (channel, rank, bank, subarray, row); used as the
/// storage key for row contents and refresh timestamps.
pub fn global_row(loc: &Location, cfg: &DeviceConfig) -> u64 {
    (global_subarray(loc, cfg) * cfg.rows_per_subarray) + loc.row
}

/// Linear bank index over (channel, rank, bank).
pub fn global_bank(loc: &Location, cfg: &DeviceConfig) -> u64 {
    ((loc.channel * cfg.ranks_per_channel) + loc.rank) * cfg.banks_per_chip + loc.bank
}

/// Linear subarray index over (channel, rank, bank, subarray).
pub fn global_subarray(loc: &Location, cfg: &DeviceConfig) -> u64 {
    global_bank(loc, cfg) * cfg.subarrays_per_bank + loc.subarray
}

/// Inverse of [`global_row`]: rebuild the location of a row's first line.
pub fn row_location(grow: u64, cfg: &DeviceConfig) -> Location {
    let row = grow % cfg.rows_per_subarray;
    let rest = grow / cfg.rows_per_subarray;
    let subarray = rest % cfg.subarrays_per_bank;
    let rest = rest / cfg.subarrays_per_bank;
    let bank = rest % cfg.banks_per_chip;
    let rest = rest / cfg.banks_per_chip;
    let rank = rest % cfg.ranks_per_channel;
    let channel = rest / cfg.ranks_per_channel;
    Location {
        channel,
        rank,
        bank,
        subarray,
        row,
        column: 0,
        byte_offset_in_line: 0,
    }
}

/// Byte addresses of every cacheline of a row, in column order.
pub fn row_line_addrs(grow: u64, cfg: &DeviceConfig) -> impl Iterator<Item = u64> + '_ {
    let base = row_location(grow, cfg);
    (0..cfg.lines_per_row()).map(move |column| {
        let loc = Location { column, ..base };
        encode_location(&loc, cfg).expect("row locations are in bounds")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DeviceConfig {
        let cfg = DeviceConfig {
            channels: 2,
            ranks_per_channel: 1,
            banks_per_chip: 2,
            subarrays_per_bank: 4,
            rows_per_subarray: 8,
            row_size_bytes: 512,
            cacheline_bytes: 64,
            ..DeviceConfig::default()
        };
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn origin_decodes_to_all_zero() {
        let cfg = tiny();
        assert_eq!(decode_address(0, &cfg).unwrap(), Location::default());
        assert_eq!(encode_location(&Location::default(), &cfg).unwrap(), 0);
    }

    #[test]
    fn cacheline_interleave_rotates_channels() {
        let mut cfg = tiny();
        cfg.interleave = Interleave::Cacheline;
        let loc = decode_address(64, &cfg).unwrap();
        assert_eq!(loc.channel, 1);
        assert_eq!(loc.column, 0);
        assert_eq!(loc.byte_offset_in_line, 0);
        // Third line wraps back to channel 0, column 1.
        let loc = decode_address(128, &cfg).unwrap();
        assert_eq!((loc.channel, loc.column), (0, 1));
    }

    #[test]
    fn row_interleave_rotates_subarrays_first() {
        let cfg = tiny();
        for i in 0..cfg.subarrays_per_bank {
            let loc = decode_address(i * cfg.row_size_bytes, &cfg).unwrap();
            assert_eq!(loc.subarray, i);
            assert_eq!(loc.bank, 0);
            assert_eq!(loc.row, 0);
        }
        let loc = decode_address(cfg.subarrays_per_bank * cfg.row_size_bytes, &cfg).unwrap();
        assert_eq!((loc.subarray, loc.bank), (0, 1));
    }

    #[test]
    fn exhaustive_round_trip_both_interleaves() {
        for interleave in [Interleave::Row, Interleave::Cacheline] {
            let mut cfg = tiny();
            cfg.interleave = interleave;
            assert!(cfg.capacity_bytes() <= 1 << 20);
            for addr in 0..cfg.capacity_bytes() {
                let loc = decode_address(addr, &cfg).unwrap();
                assert_eq!(encode_location(&loc, &cfg).unwrap(), addr);
            }
        }
    }

    #[test]
    fn boundary_location_is_last_byte() {
        let cfg = tiny();
        let last = cfg.capacity_bytes() - 1;
        let loc = decode_address(last, &cfg).unwrap();
        assert_eq!(encode_location(&loc, &cfg).unwrap(), last);
        assert!(decode_address(cfg.capacity_bytes(), &cfg).is_err());
    }

    #[test]
    fn out_of_bounds_location_rejected() {
        let cfg = tiny();
        let loc = Location {
            row: cfg.rows_per_subarray,
            ..Location::default()
        };
        assert!(matches!(
            encode_location(&loc, &cfg),
            Err(Error::AddressRange { .. })
        ));
    }

    #[test]
    fn mdgr_is_row_size_times_channels() {
        let mut cfg = DeviceConfig::default();
        cfg.row_size_bytes = 8192;
        cfg.channels = 1;
        assert_eq!(mdgr(&cfg), 8192);
        cfg.channels = 2;
        assert_eq!(mdgr(&cfg), 16384);
        cfg.row_size_bytes = 4096;
        cfg.channels = 4;
        assert_eq!(mdgr(&cfg), 16384);
    }

    #[test]
    fn subarray_mask_matches_decode() {
        for interleave in [Interleave::Row, Interleave::Cacheline] {
            let mut cfg = tiny();
            cfg.interleave = interleave;
            let mask = spd_subarray_mask(&cfg).unwrap();
            for addr in 0..cfg.capacity_bytes() {
                assert_eq!(
                    mask.extract(addr),
                    decode_address(addr, &cfg).unwrap().subarray,
                    "addr {addr:#x} ({interleave:?})"
                );
            }
        }
    }

    #[test]
    fn single_subarray_mask_is_empty() {
        let mut cfg = tiny();
        cfg.subarrays_per_bank = 1;
        let mask = spd_subarray_mask(&cfg).unwrap();
        assert_eq!(mask.width, 0);
        assert!(mask.bit_positions().is_empty());
        assert_eq!(mask.extract(0xdead_beef), 0);
    }

    #[test]
    fn global_row_round_trips() {
        let cfg = tiny();
        for addr in (0..cfg.capacity_bytes()).step_by(cfg.row_size_bytes as usize) {
            let loc = decode_address(addr, &cfg).unwrap();
            let grow = global_row(&loc, &cfg);
            let back = row_location(grow, &cfg);
            assert_eq!(
                (back.channel, back.rank, back.bank, back.subarray, back.row),
                (loc.channel, loc.rank, loc.bank, loc.subarray, loc.row)
            );
        }
    }
}
