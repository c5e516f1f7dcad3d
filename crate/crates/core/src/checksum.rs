//! Transport and link checksums.
//!
//! CRC-32c uses the Castagnoli generator 0x1EDC6F41 with the reflected byte
//! mapping: the first byte of the message carries the highest coefficients,
//! and within a byte the least significant bit is the highest coefficient.
//! In the reflected register that is the polynomial 0x82F63B78 shifted right.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

/// Castagnoli polynomial, reflected.
pub const CRC32C_POLY_REFLECTED: u32 = 0x82F6_3B78;

const ADLER_MOD: u32 = 65521;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChecksumAlgorithm {
    Crc32cReflected,
    Adler32,
}

impl ChecksumAlgorithm {
    pub fn compute(self, bytes: &[u8]) -> u32 {
        match self {
            ChecksumAlgorithm::Crc32cReflected => crc32c(bytes),
            ChecksumAlgorithm::Adler32 => adler32(bytes),
        }
    }
}

const fn make_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut j = 0;
        while j < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ CRC32C_POLY_REFLECTED
            } else {
                crc >> 1
            };
            j += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC32C_TABLE: [u32; 256] = make_table();

/// Table-driven CRC-32c.
pub fn crc32c(bytes: &[u8]) -> u32 {
    !crc32c_update(!0, bytes)
}

/// Advances a raw (uncomplemented) CRC-32c register over `bytes`.
pub fn crc32c_update(mut reg: u32, bytes: &[u8]) -> u32 {
    for &b in bytes {
        reg = CRC32C_TABLE[((reg ^ b as u32) & 0xFF) as usize] ^ (reg >> 8);
    }
    reg
}

/// Bit-at-a-time CRC-32c, the reference the table variant is checked against.
pub fn crc32c_bitwise(bytes: &[u8]) -> u32 {
    let mut reg = !0u32;
    for &b in bytes {
        reg ^= b as u32;
        for _ in 0..8 {
            let carry = reg & 1;
            reg >>= 1;
            if carry != 0 {
                reg ^= CRC32C_POLY_REFLECTED;
            }
        }
    }
    !reg
}

/// Running Adler-32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adler32 {
    a: u32,
    b: u32,
}

impl Default for Adler32 {
    fn default() -> Self {
        Adler32 { a: 1, b: 0 }
    }
}

impl Adler32 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        // 5552 is the largest run that cannot overflow u32 before reduction.
        for chunk in bytes.chunks(5552) {
            for &x in chunk {
                self.a += x as u32;
                self.b += self.a;
            }
            self.a %= ADLER_MOD;
            self.b %= ADLER_MOD;
        }
    }

    pub fn finish(&self) -> u32 {
        (self.b << 16) | self.a
    }
}

pub fn adler32(bytes: &[u8]) -> u32 {
    let mut h = Adler32::new();
    h.update(bytes);
    h.finish()
}

/// Histogram of checksum values over random short packets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    pub algorithm: ChecksumAlgorithm,
    pub packet_len: usize,
    pub sample_count: usize,
    /// 256 equal-width buckets over the 32-bit value range (top byte).
    pub buckets: Vec<u64>,
    pub chi_square: f64,
    /// Upper-tail probability of `chi_square` under uniformity (255 dof).
    pub p_value: f64,
    pub mean_value: f64,
}

impl Distribution {
    pub fn is_uniform_at(&self, significance: f64) -> bool {
        self.p_value >= significance
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count\n");
        for (i, c) in self.buckets.iter().enumerate() {
            out.push_str(&format!("{i},{c}\n"));
        }
        out
    }
}

pub fn chi_square_uniform(buckets: &[u64]) -> (f64, f64) {
    let n: u64 = buckets.iter().sum();
    let k = buckets.len();
    let expected = n as f64 / k as f64;
    let stat: f64 = buckets
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("k > 1");
    (stat, dist.sf(stat))
}

/// Computes checksums over `sample_count` uniformly random packets of
/// `packet_len` bytes and buckets the values.
pub fn short_packet_distribution(
    algorithm: ChecksumAlgorithm,
    packet_len: usize,
    sample_count: usize,
    seed: u64,
) -> Distribution {
    assert!(packet_len >= 1 && sample_count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets = vec![0u64; 256];
    let mut packet = vec![0u8; packet_len];
    let mut sum = 0.0;
    for _ in 0..sample_count {
        rng.fill(&mut packet[..]);
        let v = algorithm.compute(&packet);
        buckets[(v >> 24) as usize] += 1;
        sum += v as f64;
    }
    let (chi_square, p_value) = chi_square_uniform(&buckets);
    Distribution {
        algorithm,
        packet_len,
        sample_count,
        buckets,
        chi_square,
        p_value,
        mean_value: sum / sample_count as f64,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameFormatError {
    #[error("frame of {len} bytes too short for layout (needs {needed})")]
    TooShort { len: usize, needed: usize },
    #[error("link coverage must strictly contain transport coverage")]
    CoverageNotNested,
}

/// Layout of a frame whose link CRC and transport checksum may be shared:
///
/// `[lower-layer header | transport segment | link CRC (4 bytes)]`
///
/// The transport checksum (P_SCTP) covers the segment with its checksum
/// field zeroed; the link CRC (P_LL) covers everything before the trailer,
/// including the lower-layer header and the embedded transport checksum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedChecksumConfig {
    pub header_len: usize,
    /// Offset of the 4-byte transport checksum inside the segment.
    pub transport_checksum_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SharedVerdict {
    BothValid,
    LinkValidOnly,
    Invalid,
}

impl SharedChecksumConfig {
    fn check(&self, frame: &[u8]) -> Result<(), FrameFormatError> {
        if self.header_len == 0 {
            return Err(FrameFormatError::CoverageNotNested);
        }
        let needed = self.header_len + self.transport_checksum_offset + 4 + 4;
        if frame.len() < needed {
            return Err(FrameFormatError::TooShort {
                len: frame.len(),
                needed,
            });
        }
        Ok(())
    }

    fn segment<'a>(&self, frame: &'a [u8]) -> &'a [u8] {
        &frame[self.header_len..frame.len() - 4]
    }

    /// Transport checksum over the segment with the checksum field zeroed.
    pub fn transport_checksum(&self, segment: &[u8]) -> u32 {
        let off = self.transport_checksum_offset;
        let reg = crc32c_update(!0, &segment[..off]);
        let reg = crc32c_update(reg, &[0; 4]);
        !crc32c_update(reg, &segment[off + 4..])
    }

    /// Assembles a frame from a header and a segment, filling in both the
    /// transport checksum and the link CRC trailer.
    pub fn build(&self, header: &[u8], segment: &[u8]) -> Result<Vec<u8>, FrameFormatError> {
        assert_eq!(header.len(), self.header_len);
        let mut frame = Vec::with_capacity(header.len() + segment.len() + 4);
        frame.extend_from_slice(header);
        frame.extend_from_slice(segment);
        frame.extend_from_slice(&[0; 4]);
        self.check(&frame)?;
        let sum = self.transport_checksum(self.segment(&frame));
        let off = self.header_len + self.transport_checksum_offset;
        frame[off..off + 4].copy_from_slice(&sum.to_le_bytes());
        let n = frame.len();
        let link = crc32c(&frame[..n - 4]);
        frame[n - 4..].copy_from_slice(&link.to_le_bytes());
        Ok(frame)
    }

    pub fn link_valid(&self, frame: &[u8]) -> Result<bool, FrameFormatError> {
        self.check(frame)?;
        let n = frame.len();
        let stored = u32::from_le_bytes(frame[n - 4..].try_into().unwrap());
        Ok(crc32c(&frame[..n - 4]) == stored)
    }

    pub fn transport_valid(&self, frame: &[u8]) -> Result<bool, FrameFormatError> {
        self.check(frame)?;
        let seg = self.segment(frame);
        let off = self.transport_checksum_offset;
        let stored = u32::from_le_bytes(seg[off..off + 4].try_into().unwrap());
        Ok(self.transport_checksum(seg) == stored)
    }
}

/// Verifies only the link CRC; a passing frame is reported as valid at both
/// layers without recomputing the transport checksum.
pub fn shared_verify(
    config: &SharedChecksumConfig,
    frame: &[u8],
) -> Result<SharedVerdict, FrameFormatError> {
    Ok(if config.link_valid(frame)? {
        SharedVerdict::BothValid
    } else {
        SharedVerdict::Invalid
    })
}

/// Like [`shared_verify`] but also recomputes the transport checksum, so
/// disagreement between the two layers can be measured.
pub fn shared_verify_cross_check(
    config: &SharedChecksumConfig,
    frame: &[u8],
) -> Result<SharedVerdict, FrameFormatError> {
    if !config.link_valid(frame)? {
        return Ok(SharedVerdict::Invalid);
    }
    Ok(if config.transport_valid(frame)? {
        SharedVerdict::BothValid
    } else {
        SharedVerdict::LinkValidOnly
    })
}

/// Outcome counts of a corruption experiment on shared verification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SharingStats {
    pub trials: u64,
    pub link_detected: u64,
    pub transport_detected: u64,
    /// Link CRC passed while the transport checksum failed.
    pub link_pass_transport_fail: u64,
    /// Both checks passed on a corrupted frame.
    pub undetected: u64,
}

/// Flips `bits_per_trial` distinct random bits in random frames of up to
/// `max_len` bytes and tallies what each layer's check reports.
pub fn sharing_experiment(
    config: &SharedChecksumConfig,
    max_len: usize,
    bits_per_trial: usize,
    trials: u64,
    seed: u64,
) -> SharingStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_len = config.header_len + config.transport_checksum_offset + 8;
    assert!(max_len >= min_len);
    let mut stats = SharingStats::default();
    let mut header = vec![0u8; config.header_len];
    for _ in 0..trials {
        let len = rng.random_range(min_len..=max_len);
        rng.fill(&mut header[..]);
        let mut segment = vec![0u8; len - config.header_len - 4];
        rng.fill(&mut segment[..]);
        let mut frame = config.build(&header, &segment).expect("layout fits");
        let total_bits = frame.len() * 8;
        let mut flipped: Vec<usize> = Vec::with_capacity(bits_per_trial);
        while flipped.len() < bits_per_trial.min(total_bits) {
            let bit = rng.random_range(0..total_bits);
            if !flipped.contains(&bit) {
                flipped.push(bit);
                frame[bit / 8] ^= 1 << (bit % 8);
            }
        }
        let link = config.link_valid(&frame).unwrap();
        let transport = config.transport_valid(&frame).unwrap();
        stats.trials += 1;
        stats.link_detected += !link as u64;
        stats.transport_detected += !transport as u64;
        stats.link_pass_transport_fail += (link && !transport) as u64;
        stats.undetected += (link && transport) as u64;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_empty() {
        assert_eq!(crc32c(&[]), 0);
        assert_eq!(crc32c_bitwise(&[]), 0);
    }

    #[test]
    fn adler_known() {
        assert_eq!(adler32(&[]), 1);
        assert_eq!(adler32(b"a"), 0x0062_0062);
        assert_eq!(adler32(b"Wikipedia"), 0x11E6_0398);
    }

    #[test]
    fn adler_one_byte_shape() {
        for x in 0..=255u8 {
            let v = adler32(&[x]);
            let (a, b) = (v & 0xFFFF, v >> 16);
            assert!(a <= 256);
            assert_eq!(b, a % ADLER_MOD);
        }
    }

    #[test]
    fn adler_incremental_large() {
        let data: Vec<u8> = (0..20_000u32).map(|i| (i * 7 + 3) as u8).collect();
        let mut h = Adler32::new();
        h.update(&data[..7001]);
        h.update(&data[7001..]);
        assert_eq!(h.finish(), adler32(&data));
    }

    #[test]
    fn distribution_single_sample() {
        for alg in [
            ChecksumAlgorithm::Adler32,
            ChecksumAlgorithm::Crc32cReflected,
        ] {
            let d = short_packet_distribution(alg, 1, 1, 9);
            assert_eq!(d.buckets.iter().sum::<u64>(), 1);
            assert_eq!(d.buckets.iter().filter(|&&c| c == 1).count(), 1);
        }
    }

    fn cfg() -> SharedChecksumConfig {
        SharedChecksumConfig {
            header_len: 6,
            transport_checksum_offset: 8,
        }
    }

    #[test]
    fn clean_frame_is_valid_both_ways() {
        let c = cfg();
        let frame = c.build(&[1, 2, 3, 4, 5, 6], &[9u8; 40]).unwrap();
        assert_eq!(shared_verify(&c, &frame), Ok(SharedVerdict::BothValid));
        assert_eq!(
            shared_verify_cross_check(&c, &frame),
            Ok(SharedVerdict::BothValid)
        );
    }

    #[test]
    fn flipped_bit_is_invalid() {
        let c = cfg();
        let mut frame = c.build(&[0; 6], &[0x55; 60]).unwrap();
        frame[30] ^= 0x10;
        assert_eq!(shared_verify(&c, &frame), Ok(SharedVerdict::Invalid));
    }

    #[test]
    fn malformed_frames() {
        let c = cfg();
        assert!(matches!(
            shared_verify(&c, &[0; 10]),
            Err(FrameFormatError::TooShort { .. })
        ));
        let bad = SharedChecksumConfig {
            header_len: 0,
            transport_checksum_offset: 0,
        };
        assert_eq!(
            shared_verify(&bad, &[0; 64]),
            Err(FrameFormatError::CoverageNotNested)
        );
    }

    #[test]
    fn link_only_valid_is_measurable() {
        // Corrupt the transport checksum, then fix up the link CRC: the
        // shared verdict cannot see it, the cross-check can.
        let c = cfg();
        let mut frame = c.build(&[7; 6], &[3; 32]).unwrap();
        frame[6 + 8] ^= 1;
        let n = frame.len();
        let link = crc32c(&frame[..n - 4]);
        frame[n - 4..].copy_from_slice(&link.to_le_bytes());
        assert_eq!(shared_verify(&c, &frame), Ok(SharedVerdict::BothValid));
        assert_eq!(
            shared_verify_cross_check(&c, &frame),
            Ok(SharedVerdict::LinkValidOnly)
        );
    }
}
