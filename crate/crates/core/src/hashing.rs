use sha2::{Digest, Sha256};

/// Maps `(salt, key)` to a uniform value in `[0, 1)` via SHA-256.
pub fn unit_hash(salt: &[u8], key: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(salt);
    h.update([0u8]);
    h.update(key.as_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    // top 53 bits keep the mantissa exact
    (u64::from_be_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
