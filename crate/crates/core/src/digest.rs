//! Content digests used for fixture keys, transcript ids and run fingerprints.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical JSON form of `value`.
///
/// Values go through `serde_json::Value`, whose maps are ordered by key, so
/// the digest does not depend on struct field order or map iteration order.
pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("serializable value");
    sha256_hex(canonical.to_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn map_order_does_not_matter() {
        let mut a = HashMap::new();
        let mut b = HashMap::new();
        for i in 0..50 {
            a.insert(format!("k{i}"), i);
        }
        for i in (0..50).rev() {
            b.insert(format!("k{i}"), i);
        }
        assert_eq!(canonical_digest(&a), canonical_digest(&b));
    }
}
