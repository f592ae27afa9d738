use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

pub const KEY_LEN: usize = 16;
pub const TAG_LEN: usize = 16;

/// 16-byte secret tagged with the ratchet epoch it belongs to.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    pub bytes: [u8; KEY_LEN],
    pub epoch: u64,
}

impl SymmetricKey {
    pub fn new(bytes: [u8; KEY_LEN]) -> Self {
        Self { bytes, epoch: 0 }
    }

    pub fn with_epoch(bytes: [u8; KEY_LEN], epoch: u64) -> Self {
        Self { bytes, epoch }
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymmetricKey")
            .field("bytes", &"<redacted>")
            .field("epoch", &self.epoch)
            .finish()
    }
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// First 16 bytes of `SHA-256(key ∥ label ∥ be64(counter))`.
pub fn kdf(key: &SymmetricKey, label: &[u8], counter: u64) -> [u8; KEY_LEN] {
    let digest = sha256(&[&key.bytes, label, &counter.to_be_bytes()]);
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&digest[..KEY_LEN]);
    out
}

/// Counter-mode expansion: block `i` is `kdf(key, "ks" ∥ be64(nonce), i)`.
pub fn keystream(key: &SymmetricKey, nonce: u64, len: usize) -> Vec<u8> {
    let mut label = [0u8; 10];
    label[..2].copy_from_slice(b"ks");
    label[2..].copy_from_slice(&nonce.to_be_bytes());
    let mut out = Vec::with_capacity(len.next_multiple_of(KEY_LEN));
    let mut block = 0u64;
    while out.len() < len {
        out.extend_from_slice(&kdf(key, &label, block));
        block += 1;
    }
    out.truncate(len);
    out
}

/// HMAC-SHA-256 truncated to 16 bytes.
pub fn mac_tag(key: &SymmetricKey, message: &[u8]) -> [u8; TAG_LEN] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key.bytes).expect("hmac accepts any key length");
    mac.update(message);
    let full = mac.finalize().into_bytes();
    let mut out = [0u8; TAG_LEN];
    out.copy_from_slice(&full[..TAG_LEN]);
    out
}

/// Compares every byte regardless of where the first mismatch is.
pub fn tags_equal(a: &[u8; TAG_LEN], b: &[u8; TAG_LEN]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero() -> SymmetricKey {
        SymmetricKey::new([0; 16])
    }

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    // Reference values below were computed with Python's hashlib/hmac.

    #[test]
    fn kdf_reference_values() {
        let k = zero();
        assert_eq!(kdf(&k, b"ratchet", 1).to_vec(), h("ff9b2de493df15facd8e1e1effaec36b"));
        assert_eq!(kdf(&k, b"ratchet", 2).to_vec(), h("62982a4ef65dea8d8d9b56a6b650de6c"));
        assert_ne!(kdf(&k, b"ratchet", 1), k.bytes);
        assert_eq!(kdf(&k, b"x", 9), kdf(&k, b"x", 9));
    }

    #[test]
    fn keystream_reference_values() {
        let k = zero();
        assert!(keystream(&k, 7, 0).is_empty());
        assert_eq!(keystream(&k, 1, 16), h("4c2e8e3183596ee46a3f00d53a70c095"));
        assert_eq!(keystream(&k, 2, 16), h("73b4c27fd3ebbf57b9fb7724e76ca263"));
        assert_eq!(
            keystream(&k, 1, 40),
            h("4c2e8e3183596ee46a3f00d53a70c095612fc4a0dd1bfca1c50b9000b69881979d226021427b3b6c")
        );
        assert_eq!(keystream(&k, 5, 16)[..], keystream(&k, 5, 32)[..16]);
    }

    #[test]
    fn mac_reference_values() {
        let ones = SymmetricKey::new([0xff; 16]);
        assert_eq!(mac_tag(&zero(), b"abc").to_vec(), h("fd7adb152c05ef80dccf50a1fa4c05d5"));
        assert_eq!(mac_tag(&zero(), b"abc\0").to_vec(), h("8c82fc8ea708830ab788a13ef5474c1f"));
        assert_eq!(mac_tag(&ones, b"abc").to_vec(), h("32a9a22d75f55864c734fc3adf019aab"));
        assert!(tags_equal(&mac_tag(&zero(), b"abc"), &mac_tag(&zero(), b"abc")));
        assert!(!tags_equal(&mac_tag(&zero(), b"abc"), &mac_tag(&ones, b"abc")));
    }

    #[test]
    fn debug_redacts_key_bytes() {
        let s = format!("{:?}", SymmetricKey::new([0xab; 16]));
        assert!(!s.contains("171"));
        assert!(s.contains("redacted"));
    }
}
