//! SHA-256 trailers for binary artifacts.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DIGEST_LEN: usize = 32;

pub fn append_digest(bytes: &mut Vec<u8>) {
    let d = Sha256::digest(&bytes[..]);
    bytes.extend_from_slice(&d);
}

/// Checks the trailer and returns the bytes before it.
pub fn strip_digest<'a>(bytes: &'a [u8], path: &str) -> Result<&'a [u8]> {
    if bytes.len() < DIGEST_LEN {
        return Err(Error::corrupt(path, "too short for a checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body)[..] != tail[..] {
        return Err(Error::corrupt(path, "checksum mismatch"));
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_single_bit_flips() {
        let mut b = b"some artifact bytes".to_vec();
        append_digest(&mut b);
        assert_eq!(strip_digest(&b, "t").unwrap(), b"some artifact bytes");
        for i in 0..b.len() {
            let mut c = b.clone();
            c[i] ^= 1;
            assert!(strip_digest(&c, "t").is_err());
        }
        assert!(strip_digest(&b[..5], "t").is_err());
    }
}
