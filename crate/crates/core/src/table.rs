//! Sorted range-permission table resident in shared memory.
//!
//! Region layout (little-endian):
//!
//! ```text
//! 0x000  header     magic "SDMPTBL1", entry count (u64), capacity (u64),
//!                   label count (u32), proposal status (u8), proposer (u8)
//! 0x040  proposal   one 64-byte proposed-update slot
//! 0x080  entries    committed 64-byte entries, sorted by start page
//! ...    labels     16-byte records: host, hwpid, 6 reserved, label (u64)
//! ```
//!
//! Entry layout: bytes 0..6 start page, 6..12 length in pages, 12 attrs
//! (bit0 R, bit1 W), 13 flags (bit0 valid, bit1 shared), 14..16 reserved,
//! 16..48 host bitmap, 48..64 HWPID bitmap.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::addr::{MemoryRange, PermissionAttrs, FM_HOST_ID, MAX_HWPID, PAGE_NUMBER_LIMIT};
use crate::error::{Error, Result};
use crate::mac::AuthLabel;

pub const ENTRY_BYTES: usize = 64;
pub const HEADER_BYTES: usize = 128;
pub const LABEL_RECORD_BYTES: usize = 16;
const MAGIC: &[u8; 8] = b"SDMPTBL1";

/// 256-bit host membership set. Bit 255 (the FM) is reserved.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HostSet([u64; 4]);

impl HostSet {
    pub const EMPTY: Self = Self([0; 4]);

    pub fn single(host: u8) -> Self {
        let mut s = Self::EMPTY;
        s.insert(host);
        s
    }

    pub fn first_n(n: usize) -> Self {
        let mut s = Self::EMPTY;
        for h in 0..n.min(255) {
            s.insert(h as u8);
        }
        s
    }

    pub fn insert(&mut self, host: u8) {
        debug_assert_ne!(host, FM_HOST_ID);
        self.0[usize::from(host / 64)] |= 1 << (host % 64);
    }

    pub fn remove(&mut self, host: u8) {
        self.0[usize::from(host / 64)] &= !(1 << (host % 64));
    }

    pub fn contains(&self, host: u8) -> bool {
        self.0[usize::from(host / 64)] & (1 << (host % 64)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn len(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    pub fn union(self, other: Self) -> Self {
        Self(std::array::from_fn(|i| self.0[i] | other.0[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=254u8).filter(|&h| self.contains(h))
    }

    fn to_bytes(self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (i, w) in self.0.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    fn from_bytes(bytes: &[u8]) -> Self {
        Self(std::array::from_fn(|i| {
            u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap())
        }))
    }
}

impl fmt::Debug for HostSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// 128-bit HWPID set (the global union). Bit 0 is reserved.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HwpidSet(u128);

impl HwpidSet {
    pub const EMPTY: Self = Self(0);

    pub fn single(hwpid: u8) -> Self {
        let mut s = Self::EMPTY;
        s.insert(hwpid);
        s
    }

    pub fn first_n(n: usize) -> Self {
        let mut s = Self::EMPTY;
        for h in 1..=n.min(usize::from(MAX_HWPID)) {
            s.insert(h as u8);
        }
        s
    }

    pub fn from_bits(bits: u128) -> Self {
        Self(bits & !1)
    }

    pub fn bits(self) -> u128 {
        self.0
    }

    pub fn insert(&mut self, hwpid: u8) {
        debug_assert!(hwpid != 0 && hwpid <= MAX_HWPID);
        self.0 |= 1 << hwpid;
    }

    pub fn remove(&mut self, hwpid: u8) {
        self.0 &= !(1 << hwpid);
    }

    pub fn contains(&self, hwpid: u8) -> bool {
        hwpid <= MAX_HWPID && self.0 & (1 << hwpid) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn intersect(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (1..=MAX_HWPID).filter(|&h| self.contains(h))
    }
}

impl fmt::Debug for HwpidSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PermissionEntry {
    pub range: MemoryRange,
    pub attrs: PermissionAttrs,
    pub shared: bool,
    pub valid: bool,
    pub hosts: HostSet,
    pub hwpids: HwpidSet,
}

impl PermissionEntry {
    pub fn new(range: MemoryRange, attrs: PermissionAttrs, hosts: HostSet, hwpids: HwpidSet) -> Self {
        Self {
            range,
            attrs,
            shared: hosts.len() > 1,
            valid: true,
            hosts,
            hwpids,
        }
    }

    pub fn grant(range: MemoryRange, attrs: PermissionAttrs, host: u8, hwpid: u8) -> Self {
        Self::new(range, attrs, HostSet::single(host), HwpidSet::single(hwpid))
    }

    /// Everything except the range: the per-page permission payload.
    pub fn payload(&self) -> PagePermission {
        PagePermission {
            attrs: self.attrs,
            shared: self.shared,
            hosts: self.hosts,
            hwpids: self.hwpids,
        }
    }

    fn with_payload(range: MemoryRange, p: PagePermission) -> Self {
        Self {
            range,
            attrs: p.attrs,
            shared: p.shared,
            valid: true,
            hosts: p.hosts,
            hwpids: p.hwpids,
        }
    }

    fn with_range(mut self, range: MemoryRange) -> Self {
        self.range = range;
        self
    }
}

/// Per-page view of an entry, used for merge decisions and page-map audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PagePermission {
    pub attrs: PermissionAttrs,
    pub shared: bool,
    pub hosts: HostSet,
    pub hwpids: HwpidSet,
}

impl PagePermission {
    pub fn merge(self, other: Self) -> Self {
        let hosts = self.hosts.union(other.hosts);
        Self {
            attrs: self.attrs.union(other.attrs),
            shared: self.shared || other.shared || hosts.len() > 1,
            hosts,
            hwpids: self.hwpids.union(other.hwpids),
        }
    }
}

pub fn encode_entry(e: &PermissionEntry) -> Result<[u8; ENTRY_BYTES]> {
    let start = e.range.start_page;
    let len = e.range.length_pages;
    if start >= PAGE_NUMBER_LIMIT || len >= PAGE_NUMBER_LIMIT || start + len > PAGE_NUMBER_LIMIT {
        return Err(Error::Argument(format!("entry range {} exceeds 48-bit page numbers", e.range)));
    }
    if e.valid && len == 0 {
        return Err(Error::Argument("valid entry with zero length".into()));
    }
    if e.hosts.contains(FM_HOST_ID) || e.hwpids.contains(0) {
        return Err(Error::Argument("reserved host or hwpid bit set".into()));
    }
    let mut out = [0u8; ENTRY_BYTES];
    out[0..6].copy_from_slice(&start.to_le_bytes()[..6]);
    out[6..12].copy_from_slice(&len.to_le_bytes()[..6]);
    out[12] = e.attrs.bits();
    out[13] = u8::from(e.valid) | (u8::from(e.shared) << 1);
    out[16..48].copy_from_slice(&e.hosts.to_bytes());
    out[48..64].copy_from_slice(&e.hwpids.0.to_le_bytes());
    Ok(out)
}

fn read_u48(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf[..6].copy_from_slice(&bytes[..6]);
    u64::from_le_bytes(buf)
}

pub fn decode_entry(bytes: &[u8]) -> Result<PermissionEntry> {
    if bytes.len() != ENTRY_BYTES {
        return Err(Error::Format(format!("entry must be 64 bytes, got {}", bytes.len())));
    }
    if bytes[12] & !0b11 != 0 || bytes[13] & !0b11 != 0 || bytes[14] != 0 || bytes[15] != 0 {
        return Err(Error::Format("reserved entry bits are nonzero".into()));
    }
    let start_page = read_u48(&bytes[0..6]);
    let length_pages = read_u48(&bytes[6..12]);
    let hosts = HostSet::from_bytes(&bytes[16..48]);
    let hwpids = HwpidSet(u128::from_le_bytes(bytes[48..64].try_into().unwrap()));
    if hosts.contains(FM_HOST_ID) || hwpids.contains(0) {
        return Err(Error::Format("reserved host or hwpid bit set".into()));
    }
    let valid = bytes[13] & 1 != 0;
    if start_page + length_pages > PAGE_NUMBER_LIMIT || (valid && length_pages == 0) {
        return Err(Error::Format(format!("bad range start {start_page} length {length_pages}")));
    }
    Ok(PermissionEntry {
        range: MemoryRange { start_page, length_pages },
        attrs: PermissionAttrs::from_bits(bytes[12]),
        shared: bytes[13] & 2 != 0,
        valid,
        hosts,
        hwpids,
    })
}

/// Metadata size relative to the memory it protects.
pub fn storage_overhead(sdm_bytes: u64, entry_count: u64) -> f64 {
    (entry_count as f64 * ENTRY_BYTES as f64) / sdm_bytes as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub host_id: u8,
    pub hwpid: u8,
    pub label: AuthLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub entry: PermissionEntry,
    pub host_id: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermissionTable {
    entries: Vec<PermissionEntry>,
    capacity: usize,
    proposal: Option<Proposal>,
    labels: Vec<LabelRecord>,
}

impl PermissionTable {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
            proposal: None,
            labels: Vec::new(),
        }
    }

    /// One entry spanning `sdm_pages`.
    pub fn single_entry(sdm_pages: u64, attrs: PermissionAttrs, hosts: HostSet, hwpids: HwpidSet) -> Self {
        let mut t = Self::new(sdm_pages as usize);
        let range = MemoryRange::new(0, sdm_pages).expect("sdm fits 48-bit pages");
        t.entries.push(PermissionEntry::new(range, attrs, hosts, hwpids));
        t
    }

    /// One entry per 4 KiB page. Built directly so the layout stays fully
    /// fragmented instead of being coalesced on commit.
    pub fn worst_case(sdm_pages: u64, attrs: PermissionAttrs, hosts: HostSet, hwpids: HwpidSet) -> Self {
        let mut t = Self::new(sdm_pages as usize);
        t.entries = (0..sdm_pages)
            .map(|p| {
                PermissionEntry::new(
                    MemoryRange {
                        start_page: p,
                        length_pages: 1,
                    },
                    attrs,
                    hosts,
                    hwpids,
                )
            })
            .collect();
        t
    }

    pub fn from_entries(entries: Vec<PermissionEntry>, capacity: usize) -> Result<Self> {
        let t = Self {
            entries,
            capacity,
            proposal: None,
            labels: Vec::new(),
        };
        t.check_invariants()?;
        if t.entries.len() > capacity {
            return Err(Error::ResourceExhausted("entry count exceeds capacity".into()));
        }
        Ok(t)
    }

    pub fn entries(&self) -> &[PermissionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn labels(&self) -> &[LabelRecord] {
        &self.labels
    }

    pub fn proposal(&self) -> Option<&Proposal> {
        self.proposal.as_ref()
    }

    /// Binary search. Returns the covering entry and the number of entries
    /// compared.
    pub fn lookup(&self, page: u64) -> (Option<&PermissionEntry>, u32) {
        let (idx, probes) = self.search(page);
        (idx.map(|i| &self.entries[i]), probes)
    }

    fn search(&self, page: u64) -> (Option<usize>, u32) {
        let mut lo = 0usize;
        let mut hi = self.entries.len();
        let mut probes = 0;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            probes += 1;
            let e = &self.entries[mid];
            if page < e.range.start_page {
                hi = mid;
            } else if page >= e.range.end_page() {
                lo = mid + 1;
            } else {
                return (e.valid.then_some(mid), probes);
            }
        }
        (None, probes)
    }

    /// Sorted, non-overlapping, valid entries with nonzero length.
    pub fn check_invariants(&self) -> Result<()> {
        for e in &self.entries {
            if !e.valid || e.range.length_pages == 0 {
                return Err(Error::State(format!("invalid committed entry {}", e.range)));
            }
        }
        for w in self.entries.windows(2) {
            if w[0].range.end_page() > w[1].range.start_page {
                return Err(Error::State(format!("entries {} and {} out of order", w[0].range, w[1].range)));
            }
        }
        Ok(())
    }

    pub fn propose(&mut self, entry: PermissionEntry, host_id: u8) -> Result<()> {
        if self.proposal.is_some() {
            return Err(Error::Retry("proposal slot is busy".into()));
        }
        encode_entry(&entry)?;
        self.proposal = Some(Proposal { entry, host_id });
        Ok(())
    }

    pub fn take_proposal(&mut self) -> Option<Proposal> {
        self.proposal.take()
    }

    /// Inserts `e`, splitting existing entries at its boundaries and OR-ing
    /// its permissions into the overlapped slices. Adjacent slices with
    /// identical permissions around the edit are coalesced. Returns the
    /// index of the entry covering `e`'s first page.
    pub fn commit(&mut self, e: PermissionEntry) -> Result<usize> {
        encode_entry(&e)?;
        if !e.valid || e.range.length_pages == 0 {
            return Err(Error::Argument("cannot commit an invalid entry".into()));
        }
        let r = e.range;
        let first = self.entries.partition_point(|x| x.range.end_page() <= r.start_page);
        let last = self.entries.partition_point(|x| x.range.start_page < r.end_page());

        let mut pieces = Vec::with_capacity(last - first + 3);
        let mut cursor = r.start_page;
        for old in &self.entries[first..last] {
            if old.range.start_page < r.start_page {
                pieces.push(old.with_range(MemoryRange::from_bounds(old.range.start_page, r.start_page).unwrap()));
            }
            let ov_start = old.range.start_page.max(r.start_page);
            let ov_end = old.range.end_page().min(r.end_page());
            if cursor < ov_start {
                pieces.push(e.with_range(MemoryRange::from_bounds(cursor, ov_start).unwrap()));
            }
            pieces.push(PermissionEntry::with_payload(
                MemoryRange::from_bounds(ov_start, ov_end).unwrap(),
                old.payload().merge(e.payload()),
            ));
            cursor = ov_end;
            if old.range.end_page() > r.end_page() {
                pieces.push(old.with_range(MemoryRange::from_bounds(r.end_page(), old.range.end_page()).unwrap()));
            }
        }
        if cursor < r.end_page() {
            pieces.push(e.with_range(MemoryRange::from_bounds(cursor, r.end_page()).unwrap()));
        }

        let new_len = self.entries.len() - (last - first) + pieces.len();
        if new_len > self.capacity {
            return Err(Error::ResourceExhausted(format!(
                "table capacity {} exceeded ({new_len} entries)",
                self.capacity
            )));
        }
        let inserted = pieces.len();
        self.entries.splice(first..last, pieces);
        let lo = first.saturating_sub(1);
        let hi = (first + inserted + 1).min(self.entries.len());
        self.coalesce_window(lo, hi);
        Ok(self.search(r.start_page).0.expect("committed range is covered"))
    }

    fn coalesce_window(&mut self, lo: usize, hi: usize) {
        if hi <= lo {
            return;
        }
        let mut merged: Vec<PermissionEntry> = Vec::with_capacity(hi - lo);
        for e in self.entries.drain(lo..hi) {
            match merged.last_mut() {
                Some(prev) if prev.range.end_page() == e.range.start_page && prev.payload() == e.payload() => {
                    prev.range.length_pages += e.range.length_pages;
                }
                _ => merged.push(e),
            }
        }
        self.entries.splice(lo..lo, merged);
    }

    /// Coalesces adjacent entries with identical permissions.
    pub fn optimize(&mut self) {
        let n = self.entries.len();
        self.coalesce_window(0, n);
    }

    /// Drops entries no host is authorized for. Returns how many were removed.
    pub fn remove_empty(&mut self) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| !e.hosts.is_empty());
        before - self.entries.len()
    }

    /// Removes all coverage of `range`, trimming partially overlapped entries.
    pub fn clear_range(&mut self, range: MemoryRange) {
        let first = self.entries.partition_point(|x| x.range.end_page() <= range.start_page);
        let last = self.entries.partition_point(|x| x.range.start_page < range.end_page());
        let mut keep = Vec::new();
        for old in &self.entries[first..last] {
            if old.range.start_page < range.start_page {
                keep.push(old.with_range(MemoryRange::from_bounds(old.range.start_page, range.start_page).unwrap()));
            }
            if old.range.end_page() > range.end_page() {
                keep.push(old.with_range(MemoryRange::from_bounds(range.end_page(), old.range.end_page()).unwrap()));
            }
        }
        self.entries.splice(first..last, keep);
    }

    /// Entries overlapping `range`.
    pub fn overlapping(&self, range: MemoryRange) -> &[PermissionEntry] {
        let first = self.entries.partition_point(|x| x.range.end_page() <= range.start_page);
        let last = self.entries.partition_point(|x| x.range.start_page < range.end_page());
        &self.entries[first..last.max(first)]
    }

    pub fn store_label(&mut self, record: LabelRecord) {
        match self
            .labels
            .iter_mut()
            .find(|l| l.host_id == record.host_id && l.hwpid == record.hwpid)
        {
            Some(existing) => existing.label = record.label,
            None => self.labels.push(record),
        }
    }

    pub fn remove_label(&mut self, host_id: u8, hwpid: u8) {
        self.labels.retain(|l| !(l.host_id == host_id && l.hwpid == hwpid));
    }

    pub fn label(&self, host_id: u8, hwpid: u8) -> Option<AuthLabel> {
        self.labels
            .iter()
            .find(|l| l.host_id == host_id && l.hwpid == hwpid)
            .map(|l| l.label)
    }

    /// Raw little-endian image of the region.
    pub fn to_image(&self) -> Result<Vec<u8>> {
        let mut out = vec![0u8; HEADER_BYTES + self.entries.len() * ENTRY_BYTES + self.labels.len() * LABEL_RECORD_BYTES];
        out[0..8].copy_from_slice(MAGIC);
        out[8..16].copy_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out[16..24].copy_from_slice(&(self.capacity as u64).to_le_bytes());
        out[24..28].copy_from_slice(&(self.labels.len() as u32).to_le_bytes());
        if let Some(p) = &self.proposal {
            out[28] = 1;
            out[29] = p.host_id;
            out[64..128].copy_from_slice(&encode_entry(&p.entry)?);
        }
        let mut off = HEADER_BYTES;
        for e in &self.entries {
            out[off..off + ENTRY_BYTES].copy_from_slice(&encode_entry(e)?);
            off += ENTRY_BYTES;
        }
        for l in &self.labels {
            out[off] = l.host_id;
            out[off + 1] = l.hwpid;
            out[off + 8..off + 16].copy_from_slice(&l.label.to_bytes());
            off += LABEL_RECORD_BYTES;
        }
        Ok(out)
    }

    pub fn from_image(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[0..8] != MAGIC {
            return Err(Error::Format("missing table header".into()));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let capacity = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let nlabels = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
        if bytes[30..64].iter().any(|&b| b != 0) {
            return Err(Error::Format("reserved header bytes are nonzero".into()));
        }
        let expected = HEADER_BYTES + count * ENTRY_BYTES + nlabels * LABEL_RECORD_BYTES;
        if bytes.len() != expected {
            return Err(Error::Format(format!("image is {} bytes, header implies {expected}", bytes.len())));
        }
        let proposal = match bytes[28] {
            0 => None,
            1 => Some(Proposal {
                entry: decode_entry(&bytes[64..128])?,
                host_id: bytes[29],
            }),
            s => return Err(Error::Format(format!("unknown proposal status {s}"))),
        };
        let entries = bytes[HEADER_BYTES..HEADER_BYTES + count * ENTRY_BYTES]
            .chunks_exact(ENTRY_BYTES)
            .map(decode_entry)
            .collect::<Result<Vec<_>>>()?;
        let labels = bytes[HEADER_BYTES + count * ENTRY_BYTES..]
            .chunks_exact(LABEL_RECORD_BYTES)
            .map(|c| {
                if c[2..8].iter().any(|&b| b != 0) {
                    return Err(Error::Format("reserved label bytes are nonzero".into()));
                }
                Ok(LabelRecord {
                    host_id: c[0],
                    hwpid: c[1],
                    label: AuthLabel::from_bytes(c[8..16].try_into().unwrap()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = Self::from_entries(entries, capacity)?;
        table.proposal = proposal;
        table.labels = labels;
        Ok(table)
    }

    /// Storage for a region holding the current entries, in bytes.
    pub fn metadata_bytes(&self) -> u64 {
        (self.entries.len() * ENTRY_BYTES) as u64
    }
}
