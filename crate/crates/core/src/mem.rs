//! Functional memory contents: device lines for shared memory and per-host
//! local lines with trusted-page encryption.

use std::collections::HashMap;

use crate::addr::LINE_SIZE;
use crate::checker::{Line, LineCipher};
use crate::mac::{derive_key, hmac_sha256, Key};

pub fn line_base(pa: u64) -> u64 {
    pa & !(LINE_SIZE - 1)
}

fn read_bytes(line: &Line, off: usize, size: usize) -> Vec<u8> {
    line[off..off + size].to_vec()
}

fn write_value(line: &mut Line, off: usize, size: usize, value: u64) {
    let bytes = value.to_le_bytes();
    if size <= 8 {
        line[off..off + size].copy_from_slice(&bytes[..size]);
    } else {
        for chunk in line.chunks_mut(8) {
            chunk.copy_from_slice(&bytes);
        }
    }
}

fn offset(pa: u64, size: usize) -> usize {
    let off = (pa % LINE_SIZE) as usize;
    if off + size > LINE_SIZE as usize {
        // Accesses never straddle lines; clamp to the line start.
        0
    } else {
        off
    }
}

/// Plain line store (shared device memory).
#[derive(Clone, Debug, Default)]
pub struct LineStore {
    lines: HashMap<u64, Line>,
}

impl LineStore {
    pub fn read(&self, pa: u64, size: usize) -> Vec<u8> {
        let line = self.lines.get(&line_base(pa)).copied().unwrap_or([0; 64]);
        read_bytes(&line, offset(pa, size), size)
    }

    /// Writes `value` little-endian at `pa`; 64-byte stores replicate it.
    pub fn write(&mut self, pa: u64, size: usize, value: u64) {
        let line = self.lines.entry(line_base(pa)).or_insert([0; 64]);
        write_value(line, offset(pa, size), size, value);
    }

    pub fn raw_line(&self, pa: u64) -> Line {
        self.lines.get(&line_base(pa)).copied().unwrap_or([0; 64])
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Shadow {
    /// HWPID whose key encrypted the line, if encrypted.
    enc_hwpid: Option<u8>,
    tag: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalRead {
    pub integrity_violation: bool,
}

/// Local memory of one host. Lines written by a trusted context are stored
/// encrypted under a per-HWPID key; a shadow integrity tag detects
/// overwrites by untrusted writers.
#[derive(Clone, Debug)]
pub struct LocalMemory {
    enc_key: Key,
    lines: HashMap<u64, Line>,
    shadow: HashMap<u64, Shadow>,
}

impl LocalMemory {
    pub fn new(host: u8, seed: u64) -> Self {
        Self {
            enc_key: derive_key("enc", u64::from(host), seed),
            lines: HashMap::new(),
            shadow: HashMap::new(),
        }
    }

    fn cipher(&self, hwpid: u8) -> LineCipher {
        let mut msg = *b"line-key\0";
        msg[8] = hwpid;
        LineCipher::new(hmac_sha256(&self.enc_key, &msg))
    }

    /// Trusted view of the line for `hwpid`: decrypts when the line was
    /// encrypted under this HWPID's key and checks the shadow tag.
    fn trusted_plain(&self, base: u64, hwpid: u8) -> (Line, bool) {
        let raw = self.lines.get(&base).copied().unwrap_or([0; 64]);
        let Some(sh) = self.shadow.get(&base) else {
            return (raw, false);
        };
        let plain = match sh.enc_hwpid {
            Some(h) if h == hwpid => self.cipher(h).decrypt_line(base, &raw),
            Some(_) => raw,
            None => raw,
        };
        let violated = sh.tag.is_some_and(|t| t != self.cipher(hwpid).integrity_tag(base, &plain));
        (plain, violated)
    }

    /// `hwpid` 0 is an untrusted access and sees raw (possibly encrypted)
    /// bytes.
    pub fn read(&self, pa: u64, size: usize, hwpid: u8) -> (Vec<u8>, LocalRead) {
        let base = line_base(pa);
        let off = offset(pa, size);
        if hwpid == 0 {
            let raw = self.lines.get(&base).copied().unwrap_or([0; 64]);
            return (
                read_bytes(&raw, off, size),
                LocalRead {
                    integrity_violation: false,
                },
            );
        }
        let (plain, violated) = self.trusted_plain(base, hwpid);
        (
            read_bytes(&plain, off, size),
            LocalRead {
                integrity_violation: violated,
            },
        )
    }

    pub fn write(&mut self, pa: u64, size: usize, value: u64, hwpid: u8, encrypt: bool, integrity: bool) {
        let base = line_base(pa);
        let off = offset(pa, size);
        if hwpid == 0 {
            let line = self.lines.entry(base).or_insert([0; 64]);
            write_value(line, off, size, value);
            return;
        }
        let (mut plain, _) = self.trusted_plain(base, hwpid);
        write_value(&mut plain, off, size, value);
        let cipher = self.cipher(hwpid);
        let stored = if encrypt { cipher.encrypt_line(base, &plain) } else { plain };
        let tag = integrity.then(|| cipher.integrity_tag(base, &plain));
        self.lines.insert(base, stored);
        self.shadow.insert(
            base,
            Shadow {
                enc_hwpid: encrypt.then_some(hwpid),
                tag,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_and_load_words() {
        let mut m = LineStore::default();
        m.write(0x1008, 8, 0x1122_3344_5566_7788);
        assert_eq!(m.read(0x1008, 8), 0x1122_3344_5566_7788u64.to_le_bytes().to_vec());
        assert_eq!(m.read(0x1008, 2), vec![0x88, 0x77]);
        assert_eq!(m.read(0x1000, 8), vec![0; 8]);
        m.write(0x2000, 64, 7);
        assert_eq!(m.read(0x2038, 8), 7u64.to_le_bytes().to_vec());
    }

    #[test]
    fn trusted_round_trip_and_untrusted_sees_ciphertext() {
        let mut m = LocalMemory::new(0, 1);
        let secret = 0xdead_beef_cafe_f00du64;
        m.write(0x40, 8, secret, 3, true, true);
        let (v, r) = m.read(0x40, 8, 3);
        assert_eq!(v, secret.to_le_bytes().to_vec());
        assert!(!r.integrity_violation);
        let (raw, _) = m.read(0x40, 8, 0);
        assert_ne!(raw, secret.to_le_bytes().to_vec());
        // Another trusted process does not hold the key either.
        let (other, _) = m.read(0x40, 8, 4);
        assert_ne!(other, secret.to_le_bytes().to_vec());
    }

    #[test]
    fn untrusted_overwrite_is_detected() {
        let mut m = LocalMemory::new(0, 1);
        m.write(0x80, 8, 5, 1, true, true);
        m.write(0x80, 8, 6, 0, false, false);
        assert!(m.read(0x80, 8, 1).1.integrity_violation);
    }

    #[test]
    fn ablations_remove_each_defense() {
        let mut m = LocalMemory::new(0, 1);
        m.write(0x80, 8, 5, 1, false, true);
        assert_eq!(m.read(0x80, 8, 0).0, 5u64.to_le_bytes().to_vec());
        let mut m = LocalMemory::new(0, 1);
        m.write(0x80, 8, 5, 1, true, false);
        m.write(0x80, 8, 6, 0, false, false);
        assert!(!m.read(0x80, 8, 1).1.integrity_violation);
    }
}
