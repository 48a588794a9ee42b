//! Property tests over randomized geometries and inputs.

use proptest::prelude::*;

use bulkdram::addr::{decode_address, encode_location, mdgr, spd_subarray_mask};
use bulkdram::idao::majority3;
use bulkdram::reference::majority_oracle;
use bulkdram::{DeviceConfig, Engine, Interleave, Mechanism};

fn arb_config() -> impl Strategy<Value = DeviceConfig> {
    (
        1u64..=4,  // channels
        1u64..=2,  // ranks
        1u64..=8,  // banks
        1u64..=16, // subarrays
        8u64..=64, // rows per subarray
        prop::sample::select(vec![256u64, 512, 1024, 4096]),
        prop::bool::ANY, // cacheline interleave?
    )
        .prop_map(
            |(channels, ranks, banks, subarrays, rows, row_bytes, cl)| DeviceConfig {
                channels,
                ranks_per_channel: ranks,
                banks_per_chip: banks,
                subarrays_per_bank: subarrays,
                rows_per_subarray: rows,
                row_size_bytes: row_bytes,
                interleave: if cl {
                    Interleave::Cacheline
                } else {
                    Interleave::Row
                },
                ..DeviceConfig::default()
            },
        )
}

proptest! {
    /// decode/encode are mutually inverse for arbitrary geometries and
    /// both interleaving schemes.
    #[test]
    fn decode_encode_round_trip(cfg in arb_config(), seed in any::<u64>()) {
        let capacity = cfg.capacity_bytes();
        let addr = seed % capacity;
        let loc = decode_address(addr, &cfg).unwrap();
        prop_assert_eq!(encode_location(&loc, &cfg).unwrap(), addr);
    }

    /// The minimum in-DRAM granularity is always row size x channels.
    #[test]
    fn mdgr_product_rule(cfg in arb_config()) {
        prop_assert_eq!(mdgr(&cfg), cfg.row_size_bytes * cfg.channels);
    }

    /// Where the subarray mask is expressible, it agrees with the decoder.
    #[test]
    fn subarray_mask_agrees_with_decode(cfg in arb_config(), seed in any::<u64>()) {
        if let Ok(mask) = spd_subarray_mask(&cfg) {
            let addr = seed % cfg.capacity_bytes();
            prop_assert_eq!(mask.extract(addr), decode_address(addr, &cfg).unwrap().subarray);
        }
    }

    /// Majority is permutation-invariant, absorbs duplicates, and matches
    /// the vote-counting oracle and the control-row decomposition.
    #[test]
    fn majority_identities(a in prop::collection::vec(any::<u8>(), 1..64),
                           ab in prop::collection::vec(any::<u8>(), 1..64)) {
        let n = a.len().min(ab.len());
        let (a, b) = (&a[..n], &ab[..n]);
        let c: Vec<u8> = a.iter().zip(b).map(|(&x, &y)| x ^ y).collect();
        let maj = majority3(a, b, &c).unwrap();
        prop_assert_eq!(&maj, &majority_oracle(a, b, &c));
        prop_assert_eq!(&maj, &majority3(&c, a, b).unwrap());
        prop_assert_eq!(&maj, &majority3(b, &c, a).unwrap());
        prop_assert_eq!(majority3(a, a, b).unwrap(), a.to_vec());
        let decomposed: Vec<u8> = a
            .iter()
            .zip(b)
            .zip(&c)
            .map(|((&x, &y), &z)| (z & (x | y)) | (!z & (x & y)))
            .collect();
        prop_assert_eq!(maj, decomposed);
    }

    /// An in-subarray copy replicates arbitrary row contents regardless of
    /// the destination's previous state.
    #[test]
    fn fpm_copy_replicates_any_contents(src_data in prop::collection::vec(any::<u8>(), 512),
                                        dst_data in prop::collection::vec(any::<u8>(), 512)) {
        let cfg = DeviceConfig {
            banks_per_chip: 2,
            subarrays_per_bank: 2,
            rows_per_subarray: 16,
            row_size_bytes: 512,
            ..DeviceConfig::default()
        };
        let mut e = Engine::new(&cfg, Mechanism::Rowclone).unwrap();
        e.dram.init_row_bytes(2, &src_data);
        e.dram.init_row_bytes(5, &dst_data);
        e.fpm_copy(2, 5).unwrap();
        prop_assert_eq!(e.dram.row_data(5), &src_data[..]);
        prop_assert_eq!(e.dram.row_data(2), &src_data[..]);
    }

    /// Streaming latency is strictly monotone in the line count.
    #[test]
    fn stream_latency_monotone(lines in 1u64..512) {
        let cfg = DeviceConfig::default();
        let a = bulkdram::sched::latency_stream_row(&cfg, lines);
        let b = bulkdram::sched::latency_stream_row(&cfg, lines + 1);
        prop_assert!(b > a);
    }
}
