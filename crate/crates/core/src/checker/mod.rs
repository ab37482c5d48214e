//! Egress permission checker placed after the last-level cache.
//!
//! Remote requests need A-bits naming a HWPID trusted on this host. Trusted
//! remote requests go out together with a permission lookup (unless the
//! permission cache already holds the governing entry). Data responses are
//! held until the permission arrives; the decision is made on the response
//! side.

pub mod cache;
pub mod crypt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::addr::{AccessKind, ExtendedAddress, MemoryRange, PAGE_SHIFT};
use crate::error::{Error, Result};
use crate::table::{HwpidSet, PermissionEntry};

pub use cache::{CacheProbe, PermissionCache};
pub use crypt::{Line, LineCipher};

pub type ReqId = u64;

pub const DEFAULT_MSHRS: usize = 32;
pub const DEFAULT_RESPONSE_SLOTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    RejectUntagged,
    Violation,
    Integrity,
    SatReject,
    RouteDrop,
    PageFault,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::RejectUntagged => "reject-untagged",
            FaultKind::Violation => "violation",
            FaultKind::Integrity => "integrity",
            FaultKind::SatReject => "sat-reject",
            FaultKind::RouteDrop => "route-drop",
            FaultKind::PageFault => "page-fault",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Allow,
    ViolationFault,
    RejectUntagged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Locality {
    Local,
    Remote,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckerAblation {
    pub skip_abit_check: bool,
    pub skip_hwpid_check: bool,
    pub disable_encryption: bool,
    pub disable_integrity: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckerConfig {
    pub sdm_base: u64,
    pub sdm_bytes: u64,
    pub cache_entries: usize,
    pub mshrs: usize,
    pub response_slots: usize,
}

impl CheckerConfig {
    pub fn new(sdm_base: u64, sdm_bytes: u64, cache_entries: usize) -> Self {
        Self {
            sdm_base,
            sdm_bytes,
            cache_entries,
            mshrs: DEFAULT_MSHRS,
            response_slots: DEFAULT_RESPONSE_SLOTS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MemRequest {
    pub id: ReqId,
    pub core: u8,
    pub ext: ExtendedAddress,
    pub op: AccessKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backpressure {
    Mshr,
    ResponseBuffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestOutcome {
    /// Untrusted request to shared memory; no fabric traffic.
    Rejected,
    Local {
        encrypt: bool,
    },
    /// Trusted remote request. `lookup` names the device page to fetch a
    /// permission for, when a new lookup is needed.
    Remote {
        resolved: Option<Decision>,
        lookup: Option<u64>,
    },
    /// Remote request that bypasses checking (ablation only).
    Unchecked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataOutcome {
    Enforced(Decision),
    Buffered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub id: ReqId,
    pub decision: Decision,
    pub data_arrived: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub id: ReqId,
    pub host: u8,
    pub core: u8,
    pub ext: u64,
    pub write: bool,
    pub decision: Decision,
    pub entry: Option<MemoryRange>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerStats {
    pub remote_trusted: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub delayed_hits: u64,
    pub lookups_issued: u64,
    pub rejects: u64,
    pub violations: u64,
    pub mshr_backpressure: u64,
    pub buffer_backpressure: u64,
    pub bisnp_received: u64,
    pub bisnp_evictions: u64,
    pub probes: BTreeMap<u32, u64>,
}

#[derive(Clone, Debug)]
struct Mshr {
    waiters: Vec<ReqId>,
    /// An invalidation overlapped the page while the lookup was in flight;
    /// its response must not be cached.
    stale: bool,
}

#[derive(Clone, Copy, Debug)]
struct Inflight {
    core: u8,
    ext: ExtendedAddress,
    op: AccessKind,
    decision: Option<Decision>,
    data_arrived: bool,
}

/// Allow iff the entry is valid and names this host, the requester's HWPID
/// and the requested right.
pub fn enforce(ext: ExtendedAddress, op: AccessKind, entry: Option<&PermissionEntry>, host: u8, skip_hwpid: bool) -> Decision {
    match entry {
        Some(e) if e.valid && e.hosts.contains(host) && (skip_hwpid || e.hwpids.contains(ext.abits())) && e.attrs.allows(op) => {
            Decision::Allow
        }
        _ => Decision::ViolationFault,
    }
}

#[derive(Clone, Debug)]
pub struct PermissionChecker {
    host_id: u8,
    cfg: CheckerConfig,
    ablation: CheckerAblation,
    hwpid_local: HwpidSet,
    cache: PermissionCache,
    mshrs: BTreeMap<u64, Mshr>,
    inflight: BTreeMap<ReqId, Inflight>,
    stats: CheckerStats,
    audit: Vec<AuditRecord>,
}

impl PermissionChecker {
    pub fn new(host_id: u8, cfg: CheckerConfig) -> Self {
        Self {
            host_id,
            cfg,
            ablation: CheckerAblation::default(),
            hwpid_local: HwpidSet::EMPTY,
            cache: PermissionCache::new(cfg.cache_entries),
            mshrs: BTreeMap::new(),
            inflight: BTreeMap::new(),
            stats: CheckerStats::default(),
            audit: Vec::new(),
        }
    }

    pub fn with_ablation(mut self, ablation: CheckerAblation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn ablation(&self) -> CheckerAblation {
        self.ablation
    }

    pub fn trust(&mut self, hwpid: u8) {
        self.hwpid_local.insert(hwpid);
    }

    pub fn distrust(&mut self, hwpid: u8) {
        self.hwpid_local.remove(hwpid);
    }

    pub fn hwpid_local(&self) -> HwpidSet {
        self.hwpid_local
    }

    pub fn stats(&self) -> &CheckerStats {
        &self.stats
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn cache(&self) -> &PermissionCache {
        &self.cache
    }

    pub fn outstanding_lookups(&self) -> usize {
        self.mshrs.len()
    }

    pub fn buffered_responses(&self) -> usize {
        self.inflight.values().filter(|f| f.data_arrived && f.decision.is_none()).count()
    }

    pub fn classify(&self, ext: ExtendedAddress) -> Locality {
        let pa = ext.pa();
        if pa >= self.cfg.sdm_base && pa - self.cfg.sdm_base < self.cfg.sdm_bytes {
            Locality::Remote
        } else {
            Locality::Local
        }
    }

    /// Device page number of a remote address.
    pub fn device_page(&self, ext: ExtendedAddress) -> u64 {
        (ext.pa() - self.cfg.sdm_base) >> PAGE_SHIFT
    }

    fn record(&mut self, id: ReqId, core: u8, ext: ExtendedAddress, op: AccessKind, decision: Decision, entry: Option<&PermissionEntry>) {
        match decision {
            Decision::Allow => {}
            Decision::ViolationFault => self.stats.violations += 1,
            Decision::RejectUntagged => self.stats.rejects += 1,
        }
        self.audit.push(AuditRecord {
            id,
            host: self.host_id,
            core,
            ext: ext.raw(),
            write: op == AccessKind::Write,
            decision,
            entry: entry.map(|e| e.range),
        });
    }

    pub fn on_request(&mut self, req: MemRequest) -> Result<RequestOutcome, Backpressure> {
        let ext = req.ext;
        if self.classify(ext) == Locality::Local {
            let encrypt = ext.is_tagged() && !self.ablation.disable_encryption;
            return Ok(RequestOutcome::Local { encrypt });
        }
        let trusted = ext.is_tagged() && self.hwpid_local.contains(ext.abits());
        if !trusted {
            if self.ablation.skip_abit_check {
                return Ok(RequestOutcome::Unchecked);
            }
            self.record(req.id, req.core, ext, req.op, Decision::RejectUntagged, None);
            return Ok(RequestOutcome::Rejected);
        }
        if self.inflight.len() >= self.cfg.response_slots {
            self.stats.buffer_backpressure += 1;
            return Err(Backpressure::ResponseBuffer);
        }
        let page = self.device_page(ext);
        let probe = self.cache.peek(page);
        if probe == CacheProbe::Miss && !self.mshrs.contains_key(&page) && self.mshrs.len() >= self.cfg.mshrs {
            self.stats.mshr_backpressure += 1;
            return Err(Backpressure::Mshr);
        }

        self.stats.remote_trusted += 1;
        let mut flight = Inflight {
            core: req.core,
            ext,
            op: req.op,
            decision: None,
            data_arrived: false,
        };
        let outcome = match self.cache.probe(page) {
            CacheProbe::Hit(entry) => {
                self.stats.cache_hits += 1;
                let d = enforce(ext, req.op, Some(&entry), self.host_id, self.ablation.skip_hwpid_check);
                self.record(req.id, req.core, ext, req.op, d, Some(&entry));
                flight.decision = Some(d);
                RequestOutcome::Remote {
                    resolved: Some(d),
                    lookup: None,
                }
            }
            CacheProbe::Pending => {
                self.stats.cache_hits += 1;
                self.stats.delayed_hits += 1;
                self.mshrs.get_mut(&page).expect("pending line has an MSHR").waiters.push(req.id);
                RequestOutcome::Remote {
                    resolved: None,
                    lookup: None,
                }
            }
            CacheProbe::Miss => {
                self.stats.cache_misses += 1;
                if let Some(m) = self.mshrs.get_mut(&page) {
                    // The pending line was evicted; the lookup is still
                    // outstanding, so re-allocate without a new request.
                    m.waiters.push(req.id);
                    if !m.stale {
                        self.cache.allocate_pending(page);
                    }
                    RequestOutcome::Remote {
                        resolved: None,
                        lookup: None,
                    }
                } else {
                    self.cache.allocate_pending(page);
                    self.mshrs.insert(
                        page,
                        Mshr {
                            waiters: vec![req.id],
                            stale: false,
                        },
                    );
                    self.stats.lookups_issued += 1;
                    RequestOutcome::Remote {
                        resolved: None,
                        lookup: Some(page),
                    }
                }
            }
        };
        self.inflight.insert(req.id, flight);
        Ok(outcome)
    }

    /// Permission for `page` arrived. Fills the cache, frees the MSHR and
    /// decides every waiting request.
    pub fn on_permission_response(&mut self, page: u64, entry: Option<PermissionEntry>, probes: u32) -> Result<Vec<Resolution>> {
        let mshr = self
            .mshrs
            .remove(&page)
            .ok_or_else(|| Error::Protocol(format!("host {}: orphan permission response for page {page}", self.host_id)))?;
        *self.stats.probes.entry(probes).or_default() += 1;
        self.cache.fill(page, entry);
        let mut out = Vec::with_capacity(mshr.waiters.len());
        for id in mshr.waiters {
            let Some(f) = self.inflight.get(&id).copied() else { continue };
            let d = enforce(f.ext, f.op, entry.as_ref(), self.host_id, self.ablation.skip_hwpid_check);
            self.record(id, f.core, f.ext, f.op, d, entry.as_ref());
            self.inflight.get_mut(&id).unwrap().decision = Some(d);
            out.push(Resolution {
                id,
                decision: d,
                data_arrived: f.data_arrived,
            });
        }
        Ok(out)
    }

    pub fn on_data_response(&mut self, id: ReqId) -> Result<DataOutcome> {
        let f = self
            .inflight
            .get_mut(&id)
            .ok_or_else(|| Error::Protocol(format!("data response for unknown request {id}")))?;
        f.data_arrived = true;
        Ok(match f.decision {
            Some(d) => DataOutcome::Enforced(d),
            None => DataOutcome::Buffered,
        })
    }

    /// Frees the response slot held by a committed request.
    pub fn release(&mut self, id: ReqId) {
        self.inflight.remove(&id);
    }

    /// BISnp sink. Already-decided requests are not recalled.
    pub fn invalidate(&mut self, range: MemoryRange) -> usize {
        self.stats.bisnp_received += 1;
        for (_, m) in self.mshrs.range_mut(range.start_page..range.end_page()) {
            m.stale = true;
        }
        let n = self.cache.invalidate(range);
        self.stats.bisnp_evictions += n as u64;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{tag_address, PermissionAttrs};

    const SDM_BASE: u64 = 1 << 36;

    fn checker(cache: usize) -> PermissionChecker {
        let mut c = PermissionChecker::new(0, CheckerConfig::new(SDM_BASE, 16 << 30, cache));
        c.trust(3);
        c
    }

    fn remote(page: u64, hwpid: u8) -> ExtendedAddress {
        tag_address(SDM_BASE + (page << 12), hwpid).unwrap()
    }

    fn req(id: ReqId, ext: ExtendedAddress, op: AccessKind) -> MemRequest {
        MemRequest { id, core: 0, ext, op }
    }

    fn grant(page: u64, attrs: PermissionAttrs, hwpid: u8) -> PermissionEntry {
        PermissionEntry::grant(MemoryRange::new(page, 1).unwrap(), attrs, 0, hwpid)
    }

    #[test]
    fn lookup_in_flight_across_invalidation_is_not_cached() {
        let mut c = checker(8);
        assert!(matches!(
            c.on_request(req(1, remote(4, 3), AccessKind::Read)),
            Ok(RequestOutcome::Remote { lookup: Some(4), .. })
        ));
        c.invalidate(MemoryRange::new(0, 8).unwrap());
        // Still waits on the outstanding lookup rather than issuing another.
        assert!(matches!(
            c.on_request(req(2, remote(4, 3), AccessKind::Read)),
            Ok(RequestOutcome::Remote {
                resolved: None,
                lookup: None
            })
        ));
        let res = c.on_permission_response(4, Some(grant(4, PermissionAttrs::R, 3)), 1).unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(c.cache().len(), 0);
    }

    #[test]
    fn evicted_pending_line_is_reallocated() {
        let mut c = checker(1);
        c.on_request(req(1, remote(4, 3), AccessKind::Read)).unwrap();
        c.on_request(req(2, remote(5, 3), AccessKind::Read)).unwrap();
        // Page 4's pending line was evicted; the next access misses but
        // rejoins the outstanding lookup and reclaims the line.
        assert!(matches!(
            c.on_request(req(3, remote(4, 3), AccessKind::Read)),
            Ok(RequestOutcome::Remote { lookup: None, .. })
        ));
        assert_eq!(c.stats().cache_misses, 3);
        c.on_permission_response(4, Some(grant(4, PermissionAttrs::R, 3)), 1).unwrap();
        assert!(matches!(c.cache().peek(4), CacheProbe::Hit(_)));
    }

    #[test]
    fn classify_window_boundaries() {
        let c = checker(8);
        assert_eq!(c.classify(tag_address(SDM_BASE, 0).unwrap()), Locality::Remote);
        assert_eq!(c.classify(tag_address(SDM_BASE - 4096, 0).unwrap()), Locality::Local);
        assert_eq!(c.classify(tag_address(0, 0).unwrap()), Locality::Local);
        assert_eq!(c.classify(tag_address(SDM_BASE + (16 << 30) - 1, 0).unwrap()), Locality::Remote);
        assert_eq!(c.classify(tag_address(SDM_BASE + (16 << 30), 0).unwrap()), Locality::Local);
    }

    #[test]
    fn untagged_remote_is_rejected() {
        let mut c = checker(8);
        assert_eq!(c.on_request(req(1, remote(0, 0), AccessKind::Read)), Ok(RequestOutcome::Rejected));
        assert_eq!(c.stats().rejects, 1);
        // HWPID not trusted on this host is treated the same way.
        assert_eq!(c.on_request(req(2, remote(0, 9), AccessKind::Read)), Ok(RequestOutcome::Rejected));
        assert_eq!(c.audit()[0].decision, Decision::RejectUntagged);
    }

    #[test]
    fn untagged_passes_with_ablation() {
        let mut c = checker(8).with_ablation(CheckerAblation {
            skip_abit_check: true,
            ..Default::default()
        });
        assert_eq!(c.on_request(req(1, remote(0, 0), AccessKind::Read)), Ok(RequestOutcome::Unchecked));
    }

    #[test]
    fn miss_issues_one_lookup_then_hit() {
        let mut c = checker(8);
        let out = c.on_request(req(1, remote(5, 3), AccessKind::Read)).unwrap();
        assert_eq!(
            out,
            RequestOutcome::Remote {
                resolved: None,
                lookup: Some(5)
            }
        );
        let res = c.on_permission_response(5, Some(grant(5, PermissionAttrs::R, 3)), 4).unwrap();
        assert_eq!(
            res,
            vec![Resolution {
                id: 1,
                decision: Decision::Allow,
                data_arrived: false
            }]
        );
        assert_eq!(c.on_data_response(1).unwrap(), DataOutcome::Enforced(Decision::Allow));
        c.release(1);
        let out = c.on_request(req(2, remote(5, 3), AccessKind::Read)).unwrap();
        assert_eq!(
            out,
            RequestOutcome::Remote {
                resolved: Some(Decision::Allow),
                lookup: None
            }
        );
        assert_eq!(c.stats().probes.get(&4), Some(&1));
    }

    #[test]
    fn misses_to_same_page_merge() {
        let mut c = checker(8);
        c.on_request(req(1, remote(5, 3), AccessKind::Read)).unwrap();
        let out = c.on_request(req(2, remote(5, 3), AccessKind::Read)).unwrap();
        assert_eq!(
            out,
            RequestOutcome::Remote {
                resolved: None,
                lookup: None
            }
        );
        assert_eq!(c.stats().lookups_issued, 1);
        assert_eq!(c.outstanding_lookups(), 1);
        let res = c.on_permission_response(5, Some(grant(5, PermissionAttrs::R, 3)), 1).unwrap();
        assert_eq!(res.len(), 2);
    }

    #[test]
    fn merge_without_cache() {
        let mut c = checker(0);
        c.on_request(req(1, remote(5, 3), AccessKind::Read)).unwrap();
        c.on_request(req(2, remote(5, 3), AccessKind::Read)).unwrap();
        assert_eq!(c.stats().lookups_issued, 1);
        assert_eq!(c.stats().cache_misses, 2);
    }

    #[test]
    fn data_before_permission_is_buffered() {
        let mut c = checker(8);
        c.on_request(req(1, remote(5, 3), AccessKind::Read)).unwrap();
        assert_eq!(c.on_data_response(1).unwrap(), DataOutcome::Buffered);
        assert_eq!(c.buffered_responses(), 1);
        let res = c.on_permission_response(5, Some(grant(5, PermissionAttrs::R, 3)), 1).unwrap();
        assert!(res[0].data_arrived);
        assert_eq!(c.buffered_responses(), 0);
    }

    #[test]
    fn missing_hwpid_bit_is_a_violation() {
        let mut c = checker(8);
        c.on_request(req(1, remote(5, 3), AccessKind::Read)).unwrap();
        let res = c.on_permission_response(5, Some(grant(5, PermissionAttrs::R, 4)), 1).unwrap();
        assert_eq!(res[0].decision, Decision::ViolationFault);
        assert_eq!(c.stats().violations, 1);
    }

    #[test]
    fn orphan_response_is_a_protocol_error() {
        let mut c = checker(8);
        assert!(matches!(c.on_permission_response(1, None, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn enforce_cases() {
        let ext = remote(5, 3);
        let r = grant(5, PermissionAttrs::R, 3);
        assert_eq!(enforce(ext, AccessKind::Read, Some(&r), 0, false), Decision::Allow);
        assert_eq!(enforce(ext, AccessKind::Write, Some(&r), 0, false), Decision::ViolationFault);
        let other = grant(5, PermissionAttrs::R, 4);
        assert_eq!(enforce(ext, AccessKind::Read, Some(&other), 0, false), Decision::ViolationFault);
        assert_eq!(enforce(ext, AccessKind::Read, Some(&other), 0, true), Decision::Allow);
        assert_eq!(enforce(ext, AccessKind::Read, Some(&r), 1, false), Decision::ViolationFault);
        assert_eq!(enforce(ext, AccessKind::Read, None, 0, false), Decision::ViolationFault);
    }

    #[test]
    fn lru_eviction_at_capacity() {
        let mut c = checker(2);
        for (id, page) in [(1, 1), (2, 2), (3, 3)] {
            c.on_request(req(id, remote(page, 3), AccessKind::Read)).unwrap();
            c.on_permission_response(page, Some(grant(page, PermissionAttrs::R, 3)), 1).unwrap();
            c.release(id);
        }
        assert_eq!(c.cache().peek(1), CacheProbe::Miss);
        assert!(matches!(c.cache().peek(3), CacheProbe::Hit(_)));
    }

    #[test]
    fn mshr_exhaustion_backpressures() {
        let mut cfg = CheckerConfig::new(SDM_BASE, 16 << 30, 64);
        cfg.mshrs = 2;
        let mut c = PermissionChecker::new(0, cfg);
        c.trust(3);
        c.on_request(req(1, remote(1, 3), AccessKind::Read)).unwrap();
        c.on_request(req(2, remote(2, 3), AccessKind::Read)).unwrap();
        assert_eq!(c.on_request(req(3, remote(3, 3), AccessKind::Read)), Err(Backpressure::Mshr));
        // Merging into an existing MSHR still works.
        assert!(c.on_request(req(4, remote(1, 3), AccessKind::Read)).is_ok());
    }

    #[test]
    fn response_slots_backpressure() {
        let mut cfg = CheckerConfig::new(SDM_BASE, 16 << 30, 64);
        cfg.response_slots = 1;
        let mut c = PermissionChecker::new(0, cfg);
        c.trust(3);
        c.on_request(req(1, remote(1, 3), AccessKind::Read)).unwrap();
        assert_eq!(
            c.on_request(req(2, remote(1, 3), AccessKind::Read)),
            Err(Backpressure::ResponseBuffer)
        );
    }

    #[test]
    fn bisnp_evicts_cached_entry() {
        let mut c = checker(8);
        c.on_request(req(1, remote(5, 3), AccessKind::Read)).unwrap();
        c.on_permission_response(5, Some(grant(5, PermissionAttrs::R, 3)), 1).unwrap();
        c.release(1);
        assert_eq!(c.invalidate(MemoryRange::new(100, 1).unwrap()), 0);
        assert_eq!(c.invalidate(MemoryRange::new(5, 1).unwrap()), 1);
        let out = c.on_request(req(2, remote(5, 3), AccessKind::Read)).unwrap();
        assert_eq!(
            out,
            RequestOutcome::Remote {
                resolved: None,
                lookup: Some(5)
            }
        );
    }

    #[test]
    fn tagged_local_is_encrypted() {
        let mut c = checker(8);
        assert_eq!(
            c.on_request(req(1, tag_address(0x1000, 3).unwrap(), AccessKind::Write)),
            Ok(RequestOutcome::Local { encrypt: true })
        );
        assert_eq!(
            c.on_request(req(2, tag_address(0x1000, 0).unwrap(), AccessKind::Read)),
            Ok(RequestOutcome::Local { encrypt: false })
        );
    }
}
