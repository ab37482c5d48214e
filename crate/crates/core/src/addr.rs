//! Address, context and range primitives shared by every subsystem.
//!
//! An extended physical address is 48 bits wide: the low 41 bits carry the
//! physical address and the top 7 bits (the A-bits) carry the HWPID of the
//! authenticated context that issued the access. A zero tag means the access
//! is untrusted.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const LINE_SIZE: u64 = 64;

pub const PA_BITS: u32 = 41;
pub const ABITS: u32 = 7;
pub const EXT_BITS: u32 = PA_BITS + ABITS;
pub const PA_MASK: u64 = (1 << PA_BITS) - 1;
pub const MAX_HWPID: u8 = (1 << ABITS) - 1;

/// Page numbers are stored in 48-bit fields of the permission entry.
pub const PAGE_NUMBER_LIMIT: u64 = 1 << 48;

pub const FM_HOST_ID: u8 = 255;

/// A 41-bit physical address plus the 7-bit HWPID tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExtendedAddress(u64);

impl ExtendedAddress {
    pub fn from_raw(raw: u64) -> Result<Self> {
        if raw >> EXT_BITS != 0 {
            return Err(Error::Argument(format!("extended address {raw:#x} exceeds {EXT_BITS} bits")));
        }
        Ok(Self(raw))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn pa(self) -> u64 {
        self.0 & PA_MASK
    }

    pub fn abits(self) -> u8 {
        (self.0 >> PA_BITS) as u8
    }

    pub fn is_tagged(self) -> bool {
        self.abits() != 0
    }

    pub fn page(self) -> u64 {
        self.pa() >> PAGE_SHIFT
    }
}

impl fmt::Display for ExtendedAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#014x}", self.0)
    }
}

/// Places `hwpid` in the top seven bits of a 48-bit address.
pub fn tag_address(pa: u64, hwpid: u8) -> Result<ExtendedAddress> {
    if pa > PA_MASK {
        return Err(Error::Argument(format!("physical address {pa:#x} exceeds 41 bits")));
    }
    if hwpid > MAX_HWPID {
        return Err(Error::Argument(format!("hwpid {hwpid} exceeds {MAX_HWPID}")));
    }
    Ok(ExtendedAddress(pa | (u64::from(hwpid) << PA_BITS)))
}

pub fn untag_address(ext: ExtendedAddress) -> (u64, u8) {
    (ext.pa(), ext.abits())
}

/// Protection ring of the executing core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ring {
    Machine,
    Hypervisor,
    Supervisor,
    User,
}

impl Ring {
    pub fn as_str(self) -> &'static str {
        match self {
            Ring::Machine => "machine",
            Ring::Hypervisor => "hypervisor",
            Ring::Supervisor => "supervisor",
            Ring::User => "user",
        }
    }
}

impl fmt::Display for Ring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "machine" | "m" => Ok(Ring::Machine),
            "hypervisor" | "h" => Ok(Ring::Hypervisor),
            "supervisor" | "s" | "kernel" => Ok(Ring::Supervisor),
            "user" | "u" => Ok(Ring::User),
            other => Err(Error::Argument(format!("unknown ring `{other}`"))),
        }
    }
}

/// Hardware-rooted identity of whatever is running on a core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub host_id: u8,
    pub core_id: u8,
    /// 0 means "no trusted context".
    pub hwpid: u8,
    /// Page-table root (CR3/SATP/TTBR analog).
    pub base_p: u64,
    pub ring: Ring,
}

impl Context {
    pub fn new(host_id: u8, core_id: u8, hwpid: u8, base_p: u64, ring: Ring) -> Result<Self> {
        if host_id == FM_HOST_ID {
            return Err(Error::Argument("host id 255 is reserved for the fabric manager".into()));
        }
        if hwpid > MAX_HWPID {
            return Err(Error::Argument(format!("hwpid {hwpid} exceeds {MAX_HWPID}")));
        }
        Ok(Self {
            host_id,
            core_id,
            hwpid,
            base_p,
            ring,
        })
    }
}

/// Page-granular range `[start_page, start_page + length_pages)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemoryRange {
    pub start_page: u64,
    pub length_pages: u64,
}

impl MemoryRange {
    pub fn new(start_page: u64, length_pages: u64) -> Result<Self> {
        if length_pages == 0 {
            return Err(Error::Argument("range length must be at least one page".into()));
        }
        match start_page.checked_add(length_pages) {
            Some(end) if end <= PAGE_NUMBER_LIMIT => Ok(Self { start_page, length_pages }),
            _ => Err(Error::Argument(format!(
                "range [{start_page}, +{length_pages}) exceeds 48-bit page numbers"
            ))),
        }
    }

    pub fn end_page(&self) -> u64 {
        self.start_page + self.length_pages
    }

    pub fn contains(&self, page: u64) -> bool {
        page >= self.start_page && page < self.end_page()
    }

    pub fn overlaps(&self, other: &MemoryRange) -> bool {
        self.start_page < other.end_page() && other.start_page < self.end_page()
    }

    pub fn intersect(&self, other: &MemoryRange) -> Option<MemoryRange> {
        let start = self.start_page.max(other.start_page);
        let end = self.end_page().min(other.end_page());
        (start < end).then(|| MemoryRange {
            start_page: start,
            length_pages: end - start,
        })
    }

    pub fn from_bounds(start: u64, end: u64) -> Option<MemoryRange> {
        (start < end).then(|| MemoryRange {
            start_page: start,
            length_pages: end - start,
        })
    }
}

impl fmt::Display for MemoryRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start_page, self.end_page())
    }
}

/// Read/write rights, two bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PermissionAttrs {
    pub read: bool,
    pub write: bool,
}

impl PermissionAttrs {
    pub const NONE: Self = Self { read: false, write: false };
    pub const R: Self = Self { read: true, write: false };
    pub const W: Self = Self { read: false, write: true };
    pub const RW: Self = Self { read: true, write: true };

    pub fn bits(self) -> u8 {
        u8::from(self.read) | (u8::from(self.write) << 1)
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            read: bits & 1 != 0,
            write: bits & 2 != 0,
        }
    }

    pub fn union(self, other: Self) -> Self {
        Self {
            read: self.read || other.read,
            write: self.write || other.write,
        }
    }

    pub fn covers(self, other: Self) -> bool {
        (self.read || !other.read) && (self.write || !other.write)
    }

    pub fn allows(self, op: AccessKind) -> bool {
        match op {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
        }
    }
}

impl fmt::Display for PermissionAttrs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.read, self.write) {
            (true, true) => f.write_str("rw"),
            (true, false) => f.write_str("r"),
            (false, true) => f.write_str("w"),
            (false, false) => f.write_str("-"),
        }
    }
}

impl FromStr for PermissionAttrs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rw" | "RW" => Ok(Self::RW),
            "r" | "R" => Ok(Self::R),
            "w" | "W" => Ok(Self::W),
            "-" => Ok(Self::NONE),
            other => Err(Error::Argument(format!("unknown permission `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

pub fn page_of(pa: u64) -> u64 {
    pa >> PAGE_SHIFT
}

pub fn line_of(pa: u64) -> u64 {
    pa & !(LINE_SIZE - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: build the value by multiplication rather than shifting/or-ing.
    fn tag_oracle(pa: u64, hwpid: u8) -> u64 {
        u64::from(hwpid) * 2u64.pow(41) + pa
    }

    #[test]
    fn tag_examples() {
        assert_eq!(tag_address(0x1000, 5).unwrap().raw(), 0x0A00_0000_1000);
        assert_eq!(tag_oracle(0x1000, 5), 0x0A00_0000_1000);
        assert_eq!(tag_address(0x1000, 0).unwrap().raw(), 0x1000);
        assert_eq!(tag_address(0x01FF_FFFF_FFFF, 127).unwrap().raw(), 0xFFFF_FFFF_FFFF);
    }

    #[test]
    fn tag_rejects_out_of_range() {
        assert!(tag_address(1 << 41, 1).is_err());
        assert!(tag_address(0, 128).is_err());
        assert!(ExtendedAddress::from_raw(1 << 48).is_err());
    }

    #[test]
    fn untag_examples() {
        let ext = ExtendedAddress::from_raw(0x0A00_0000_1000).unwrap();
        assert_eq!(untag_address(ext), (0x1000, 5));
        assert_eq!(untag_address(ExtendedAddress::from_raw(0).unwrap()), (0, 0));
        assert!(!ExtendedAddress::from_raw(0x1000).unwrap().is_tagged());
    }

    #[test]
    fn fm_host_id_is_reserved() {
        assert!(Context::new(255, 0, 1, 0, Ring::User).is_err());
        assert!(Context::new(254, 0, 127, 0, Ring::User).is_ok());
    }

    #[test]
    fn range_validation() {
        assert!(MemoryRange::new(0, 0).is_err());
        assert!(MemoryRange::new(PAGE_NUMBER_LIMIT - 1, 2).is_err());
        assert!(MemoryRange::new(PAGE_NUMBER_LIMIT - 1, 1).is_ok());
        let a = MemoryRange::new(0, 100).unwrap();
        let b = MemoryRange::new(50, 100).unwrap();
        assert_eq!(a.intersect(&b), Some(MemoryRange::new(50, 50).unwrap()));
        assert!(!a.overlaps(&MemoryRange::new(100, 1).unwrap()));
    }

    #[test]
    fn attrs_bits() {
        for bits in 0..4 {
            assert_eq!(PermissionAttrs::from_bits(bits).bits(), bits);
        }
        assert!(PermissionAttrs::RW.covers(PermissionAttrs::R));
        assert!(!PermissionAttrs::R.covers(PermissionAttrs::W));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn tag_untag_round_trip(pa in 0u64..(1 << 41), hwpid in 0u8..=127) {
            let ext = tag_address(pa, hwpid).unwrap();
            prop_assert_eq!(ext.raw(), tag_oracle(pa, hwpid));
            prop_assert_eq!(untag_address(ext), (pa, hwpid));
            prop_assert_eq!(ext.raw() & PA_MASK, pa);
        }

        #[test]
        fn untag_tag_round_trip(raw in 0u64..(1 << 48)) {
            let ext = ExtendedAddress::from_raw(raw).unwrap();
            let (pa, hwpid) = untag_address(ext);
            prop_assert_eq!(tag_address(pa, hwpid).unwrap(), ext);
        }
    }
}
