//! Keyed MAC used for both authentication labels, and the canonical
//! little-endian message encodings the labels are computed over.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::addr::MemoryRange;

pub const KEY_LEN: usize = 32;
const BLOCK_LEN: usize = 64;

pub const HOST_LABEL_TAG: u8 = 0x02;
pub const FM_LABEL_TAG: u8 = 0x01;

pub type Key = [u8; KEY_LEN];

/// HMAC-SHA-256 (RFC 2104) over an arbitrary-length key.
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut block = [0u8; BLOCK_LEN];
    if key.len() > BLOCK_LEN {
        block[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        block[..key.len()].copy_from_slice(key);
    }

    let mut ipad = [0x36u8; BLOCK_LEN];
    let mut opad = [0x5cu8; BLOCK_LEN];
    for i in 0..BLOCK_LEN {
        ipad[i] ^= block[i];
        opad[i] ^= block[i];
    }

    let mut inner = Sha256::new();
    inner.update(ipad);
    inner.update(message);
    let inner = inner.finalize();

    let mut outer = Sha256::new();
    outer.update(opad);
    outer.update(inner);
    let mut out = [0u8; 32];
    out.copy_from_slice(&outer.finalize());
    out
}

/// Keyed MAC truncated to the first eight bytes, read little-endian.
pub fn mac64(key: &Key, message: &[u8]) -> u64 {
    let full = hmac_sha256(key, message);
    u64::from_le_bytes(full[..8].try_into().expect("8-byte prefix"))
}

/// 64-bit authentication label.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AuthLabel(pub u64);

impl AuthLabel {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn to_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(bytes: [u8; 8]) -> Self {
        Self(u64::from_le_bytes(bytes))
    }
}

impl fmt::Debug for AuthLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AuthLabel({:#018x})", self.0)
    }
}

/// `0x02 || base_p (8) || hwpid (1) || core_id (1) || ctr (8)`
pub fn host_label_message(base_p: u64, hwpid: u8, core_id: u8, ctr: u64) -> [u8; 19] {
    let mut msg = [0u8; 19];
    msg[0] = HOST_LABEL_TAG;
    msg[1..9].copy_from_slice(&base_p.to_le_bytes());
    msg[9] = hwpid;
    msg[10] = core_id;
    msg[11..19].copy_from_slice(&ctr.to_le_bytes());
    msg
}

/// `0x01 || host_id (1) || hwpid (1) || base_p (8) || start_page (6) || length_pages (6)`
pub fn fm_label_message(host_id: u8, hwpid: u8, base_p: u64, range: MemoryRange) -> [u8; 23] {
    let mut msg = [0u8; 23];
    msg[0] = FM_LABEL_TAG;
    msg[1] = host_id;
    msg[2] = hwpid;
    msg[3..11].copy_from_slice(&base_p.to_le_bytes());
    msg[11..17].copy_from_slice(&range.start_page.to_le_bytes()[..6]);
    msg[17..23].copy_from_slice(&range.length_pages.to_le_bytes()[..6]);
    msg
}

/// Deterministic key derivation for simulated hosts and the FM.
pub fn derive_key(domain: &str, id: u64, seed: u64) -> Key {
    let mut h = Sha256::new();
    h.update(b"sdmsim-key");
    h.update(domain.as_bytes());
    h.update(id.to_le_bytes());
    h.update(seed.to_le_bytes());
    let mut key = [0u8; KEY_LEN];
    key.copy_from_slice(&h.finalize());
    key
}

/// RFC 4231 HMAC-SHA-256 test cases as (key, data, expected prefix). Case 5
/// specifies a 128-bit truncated output.
pub const RFC4231_VECTORS: [(&str, &str, &str); 7] = [
    ("0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b0b", "4869205468657265", "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    ("4a656665", "7768617420646f2079612077616e7420666f72206e6f7468696e673f", "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
    (
        "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa",
        "dddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddddd",
        "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe",
    ),
    (
        "0102030405060708090a0b0c0d0e0f10111213141516171819",
        "cdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcdcd",
        "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b",
    ),
    ("0c0c0c0c0c0c0c0c0c0c0c0c0c0c0c0c0c0c0c0c", "546573742057697468205472756e636174696f6e", "a3b6167473100ee06e0c796c2955552b"),
    (
        "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa",
        "54657374205573696e67204c6172676572205468616e20426c6f636b2d53697a65204b6579202d2048617368204b6579204669727374",
        "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
    ),
    (
        "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa",
        "5468697320697320612074657374207573696e672061206c6172676572207468616e20626c6f636b2d73697a65206b657920616e642061206c6172676572207468616e20626c6f636b2d73697a6520646174612e20546865206b6579206e6565647320746f20626520686173686564206265666f7265206265696e6720757365642062792074686520484d414320616c676f726974686d2e",
        "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2",
    ),
];

pub fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Checks [`hmac_sha256`] against every RFC 4231 case.
pub fn rfc4231_self_test() -> bool {
    RFC4231_VECTORS.iter().all(|(k, d, want)| {
        let (Some(k), Some(d), Some(want)) = (decode_hex(k), decode_hex(d), decode_hex(want)) else {
            return false;
        };
        hmac_sha256(&k, &d)[..want.len()] == want[..]
    })
}
