use claa_core::checksum::{adler32, crc32c, crc32c_bitwise, Adler32};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn crc_catches_every_single_and_adjacent_double_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(128);
    for len in [1usize, 7, 32, 128] {
        let mut msg = vec![0u8; len];
        rng.fill(&mut msg[..]);
        let good = crc32c(&msg);
        let bits = len * 8;
        for i in 0..bits {
            let mut m = msg.clone();
            m[i / 8] ^= 1 << (i % 8);
            assert_ne!(crc32c(&m), good, "single flip at bit {i}, len {len}");
            if i + 1 < bits {
                m[(i + 1) / 8] ^= 1 << ((i + 1) % 8);
                assert_ne!(crc32c(&m), good, "double flip at bit {i}, len {len}");
            }
        }
    }
}

proptest! {
    #[test]
    fn table_matches_bitwise(data in prop::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(crc32c(&data), crc32c_bitwise(&data));
    }

    #[test]
    fn adler_split_equals_whole(data in prop::collection::vec(any::<u8>(), 0..6000), cut in 0usize..6000) {
        let cut = cut.min(data.len());
        let mut a = Adler32::new();
        a.update(&data[..cut]);
        a.update(&data[cut..]);
        prop_assert_eq!(a.finish(), adler32(&data));
    }
}
