//! QUIC variable-length integers (2-bit length prefix, big endian).

/// Largest value representable as a varint (2^62 - 1).
pub const MAX_VARINT: u64 = (1 << 62) - 1;

/// Decodes a varint at the start of `buf`, returning the value and the number
/// of octets consumed, or `None` if `buf` ends before the integer does.
pub fn decode(buf: &[u8]) -> Option<(u64, usize)> {
    let first = *buf.first()?;
    let len = 1usize << (first >> 6);
    if buf.len() < len {
        return None;
    }
    let mut value = u64::from(first & 0x3f);
    for &b in &buf[1..len] {
        value = (value << 8) | u64::from(b);
    }
    Some((value, len))
}

/// Number of octets the minimal encoding of `value` occupies.
pub fn encoded_len(value: u64) -> usize {
    match value {
        0..=63 => 1,
        64..=16_383 => 2,
        16_384..=1_073_741_823 => 4,
        _ => 8,
    }
}

/// Appends the minimal encoding of `value`. Values above [`MAX_VARINT`] are
/// truncated to 62 bits; callers validate the range first.
pub fn encode(value: u64, out: &mut Vec<u8>) {
    let len = encoded_len(value);
    let prefix: u64 = match len {
        1 => 0b00,
        2 => 0b01,
        4 => 0b10,
        _ => 0b11,
    };
    let tagged = (value & MAX_VARINT) | (prefix << (len * 8 - 2));
    out.extend_from_slice(&tagged.to_be_bytes()[8 - len..]);
}

#[cfg(test)]
mod tests {
    use super::*;

    // Worked examples from the QUIC transport document's sample encodings.
    #[test]
    fn known_vectors() {
        assert_eq!(decode(&[0x25]), Some((37, 1)));
        assert_eq!(decode(&[0x40, 0x25]), Some((37, 2)));
        assert_eq!(decode(&[0x7b, 0xbd]), Some((15_293, 2)));
        assert_eq!(decode(&[0x9d, 0x7f, 0x3e, 0x7d]), Some((494_878_333, 4)));
        assert_eq!(
            decode(&[0xc2, 0x19, 0x7c, 0x5e, 0xff, 0x14, 0xe8, 0x8c]),
            Some((151_288_809_941_952_652, 8))
        );
    }

    #[test]
    fn truncated() {
        assert_eq!(decode(&[]), None);
        assert_eq!(decode(&[0x40]), None);
        assert_eq!(decode(&[0x80, 0, 0]), None);
    }

    #[test]
    fn encode_minimal() {
        for v in [0, 63, 64, 16_383, 16_384, 1_073_741_823, 1_073_741_824, MAX_VARINT] {
            let mut out = Vec::new();
            encode(v, &mut out);
            assert_eq!(out.len(), encoded_len(v));
            assert_eq!(decode(&out), Some((v, out.len())));
        }
    }
}
