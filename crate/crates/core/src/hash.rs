//! Content fingerprints for tables, vocabularies and parameter sets.

use sha2::{Digest, Sha256};

/// Incremental SHA-256 fingerprint truncated to 64 bits.
#[derive(Clone, Default)]
pub struct Fingerprint {
    hasher: Sha256,
}

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.hasher.update(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    /// Hashes the exact bit patterns, so `0.0` and `-0.0` differ.
    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.u64(values.len() as u64);
        for v in values {
            self.hasher.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn finish(&self) -> u64 {
        let digest = self.hasher.clone().finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinguishes_signed_zero() {
        let a = Fingerprint::new().f64s(&[0.0]).finish();
        let b = Fingerprint::new().f64s(&[-0.0]).finish();
        assert_ne!(a, b);
        assert_eq!(a, Fingerprint::new().f64s(&[0.0]).finish());
    }
}
