//! CXL-like interconnect: flits, switch routing (FAST/IDT), device decode,
//! SAT host-level checks, per-host FIFO links and BISnp fan-out.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::addr::{ExtendedAddress, MemoryRange, PAGE_SHIFT};
use crate::error::{Error, Result};
use crate::table::HostSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlitKind {
    DataReq,
    DataResp,
    PermReq,
    PermResp,
    Bisnp,
    FmCtrl,
}

impl FlitKind {
    pub fn is_permission(self) -> bool {
        matches!(self, FlitKind::PermReq | FlitKind::PermResp | FlitKind::Bisnp)
    }
}

pub const HEADER_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flit {
    pub kind: FlitKind,
    pub spid: u16,
    pub dpid: u16,
    pub hpa: ExtendedAddress,
    /// Request id or page number, depending on kind.
    pub payload: u64,
    pub issue_tick: u64,
    pub bytes: u64,
}

impl Flit {
    pub fn new(kind: FlitKind, spid: u16, hpa: ExtendedAddress, payload: u64, issue_tick: u64, carries_line: bool) -> Self {
        let bytes = HEADER_BYTES + if carries_line { 64 } else { 0 };
        Self {
            kind,
            spid,
            dpid: u16::MAX,
            hpa,
            payload,
            issue_tick,
            bytes,
        }
    }
}

/// Latencies in ns. Defaults are calibration placeholders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub local_read_ns: u64,
    pub local_write_ns: u64,
    pub remote_req_ns: u64,
    pub remote_resp_ns: u64,
    pub perm_lookup_per_probe_ns: u64,
    pub bisnp_ns: u64,
    pub check_cycles: u64,
    pub encrypt_cycles: u64,
    pub freq_ghz: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            local_read_ns: 90,
            local_write_ns: 90,
            remote_req_ns: 150,
            remote_resp_ns: 150,
            perm_lookup_per_probe_ns: 15,
            bisnp_ns: 300,
            check_cycles: 1,
            encrypt_cycles: 1,
            freq_ghz: 4.0,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.freq_ghz.is_finite() && self.freq_ghz > 0.0) {
            return Err(Error::Config(format!("freq_ghz must be positive, got {}", self.freq_ghz)));
        }
        Ok(())
    }

    /// Whole ns needed for `cycles` core cycles (rounded up).
    pub fn cycles_to_ns(&self, cycles: u64) -> u64 {
        if cycles == 0 {
            return 0;
        }
        ((cycles as f64) / self.freq_ghz).ceil() as u64
    }

    pub fn ns_to_cycles(&self, ns: u64) -> u64 {
        (ns as f64 * self.freq_ghz).round() as u64
    }

    pub fn check_ns(&self) -> u64 {
        self.cycles_to_ns(self.check_cycles)
    }

    pub fn encrypt_ns(&self) -> u64 {
        self.cycles_to_ns(self.encrypt_cycles)
    }

    pub fn lookup_ns(&self, probes: u32) -> u64 {
        u64::from(probes) * self.perm_lookup_per_probe_ns
    }

    /// Unloaded permission round trip.
    pub fn permission_response_ns(&self, probes: u32) -> u64 {
        self.remote_req_ns + self.lookup_ns(probes) + self.remote_resp_ns
    }
}

/// One FAST segment: a window of host physical addresses and the devices
/// (IDT targets) it interleaves over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastSegment {
    pub base: u64,
    pub size: u64,
    pub targets: Vec<u16>,
    pub interleave_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RouteOutcome {
    Routed { dpid: u16, dpa: u64 },
    Dropped,
}

#[derive(Clone, Debug, Default)]
pub struct Switch {
    segments: Vec<FastSegment>,
}

impl Switch {
    pub fn new(segments: Vec<FastSegment>) -> Result<Self> {
        for s in &segments {
            if s.targets.is_empty() || s.size == 0 || s.interleave_bytes == 0 {
                return Err(Error::Config("FAST segment needs targets, a size and an interleave granule".into()));
            }
            if s.targets.len() > 1 && s.size % (s.interleave_bytes * s.targets.len() as u64) != 0 {
                return Err(Error::Config(
                    "interleaved segment size must be a multiple of the interleave set".into(),
                ));
            }
        }
        Ok(Self { segments })
    }

    pub fn single_device(base: u64, size: u64) -> Self {
        Self {
            segments: vec![FastSegment {
                base,
                size,
                targets: vec![0],
                interleave_bytes: size,
            }],
        }
    }

    fn segment(&self, pa: u64) -> Option<&FastSegment> {
        self.segments.iter().find(|s| pa >= s.base && pa - s.base < s.size)
    }

    /// FAST lookup followed by IDT interleave selection. Fills in the DPID.
    pub fn route_request(&self, flit: &mut Flit) -> RouteOutcome {
        let pa = flit.hpa.pa();
        let Some(seg) = self.segment(pa) else {
            return RouteOutcome::Dropped;
        };
        let off = pa - seg.base;
        let n = seg.targets.len() as u64;
        let granule = off / seg.interleave_bytes;
        let dpid = seg.targets[(granule % n) as usize];
        flit.dpid = dpid;
        RouteOutcome::Routed {
            dpid,
            dpa: gfd_decode_in(seg, off),
        }
    }

    /// Device physical address for `hpa` (inverse of the interleave).
    pub fn gfd_decode(&self, hpa: ExtendedAddress) -> Result<u64> {
        let pa = hpa.pa();
        let seg = self
            .segment(pa)
            .ok_or_else(|| Error::Protocol(format!("device fault: {pa:#x} outside every decoder window")))?;
        Ok(gfd_decode_in(seg, pa - seg.base))
    }
}

fn gfd_decode_in(seg: &FastSegment, off: u64) -> u64 {
    let n = seg.targets.len() as u64;
    if n == 1 {
        return off;
    }
    let g = seg.interleave_bytes;
    (off / g / n) * g + off % g
}

/// Source-port access table: per memory group, the hosts allowed in.
#[derive(Clone, Debug)]
pub struct Sat {
    group_bytes: u64,
    groups: BTreeMap<u64, HostSet>,
}

pub const DEFAULT_SAT_GROUP_BYTES: u64 = 256 << 20;

impl Sat {
    pub fn new(group_bytes: u64) -> Result<Self> {
        if group_bytes == 0 {
            return Err(Error::Config("SAT group size must be nonzero".into()));
        }
        Ok(Self {
            group_bytes,
            groups: BTreeMap::new(),
        })
    }

    pub fn group_of(&self, dpa: u64) -> u64 {
        dpa / self.group_bytes
    }

    pub fn grant(&mut self, host: u8, dpa_start: u64, bytes: u64) {
        if bytes == 0 {
            return;
        }
        let last = self.group_of(dpa_start + bytes - 1);
        for g in self.group_of(dpa_start)..=last {
            self.groups.entry(g).or_default().insert(host);
        }
    }

    pub fn sat_check(&self, spid: u8, dpa: u64) -> bool {
        self.groups.get(&self.group_of(dpa)).is_some_and(|h| h.contains(spid))
    }
}

/// A unidirectional FIFO link. Flits occupy the link for their
/// serialization time; unloaded delivery takes exactly `latency`.
#[derive(Clone, Debug)]
pub struct Link {
    bytes_per_ns: u64,
    busy_until: u64,
    pub flits: u64,
    pub bytes: u64,
    pub queued_ns: u64,
}

impl Link {
    pub fn new(bytes_per_ns: u64) -> Self {
        Self {
            bytes_per_ns: bytes_per_ns.max(1),
            busy_until: 0,
            flits: 0,
            bytes: 0,
            queued_ns: 0,
        }
    }

    /// Returns the delivery tick.
    pub fn transmit(&mut self, now: u64, bytes: u64, latency: u64) -> u64 {
        let start = now.max(self.busy_until);
        self.queued_ns += start - now;
        self.busy_until = start + bytes.div_ceil(self.bytes_per_ns);
        self.flits += 1;
        self.bytes += bytes;
        start + latency
    }
}

/// Delivery ticks of a BISnp to every bound host.
pub fn broadcast_bisnp(
    range: MemoryRange,
    hosts: impl IntoIterator<Item = u8>,
    now: u64,
    lat: &LatencyConfig,
) -> Vec<(u8, MemoryRange, u64)> {
    hosts.into_iter().map(|h| (h, range, now + lat.bisnp_ns)).collect()
}

/// Device page number of a device physical address.
pub fn dpa_page(dpa: u64) -> u64 {
    dpa >> PAGE_SHIFT
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::tag_address;
    use proptest::prelude::*;

    const BASE: u64 = 1 << 40;
    const SIZE: u64 = 16 << 30;

    fn flit(pa: u64) -> Flit {
        Flit::new(FlitKind::DataReq, 0, tag_address(pa, 1).unwrap(), 0, 0, false)
    }

    #[test]
    fn routes_sdm_window_to_the_device() {
        let sw = Switch::single_device(BASE, SIZE);
        let mut f = flit(BASE + 4096);
        assert_eq!(sw.route_request(&mut f), RouteOutcome::Routed { dpid: 0, dpa: 4096 });
        assert_eq!(f.dpid, 0);
        assert_eq!(sw.route_request(&mut flit(0)), RouteOutcome::Dropped);
        assert_eq!(sw.route_request(&mut flit(BASE + SIZE)), RouteOutcome::Dropped);
    }

    #[test]
    fn decode_is_offset_from_segment_base() {
        let sw = Switch::single_device(BASE, SIZE);
        assert_eq!(sw.gfd_decode(tag_address(BASE, 0).unwrap()).unwrap(), 0);
        assert_eq!(sw.gfd_decode(tag_address(BASE + 12345, 3).unwrap()).unwrap(), 12345);
        assert!(sw.gfd_decode(tag_address(BASE - 1, 0).unwrap()).is_err());
    }

    fn two_way() -> Switch {
        Switch::new(vec![FastSegment {
            base: BASE,
            size: 1 << 30,
            targets: vec![4, 7],
            interleave_bytes: 4096,
        }])
        .unwrap()
    }

    #[test]
    fn interleave_alternates_devices() {
        let sw = two_way();
        let dpids: Vec<u16> = (0..4)
            .map(|i| match sw.route_request(&mut flit(BASE + i * 4096)) {
                RouteOutcome::Routed { dpid, .. } => dpid,
                RouteOutcome::Dropped => panic!("dropped"),
            })
            .collect();
        assert_eq!(dpids, vec![4, 7, 4, 7]);
    }

    proptest! {
        #[test]
        fn decode_is_a_bijection_per_device(a in 0u64..(1 << 30), b in 0u64..(1 << 30)) {
            let sw = two_way();
            let ra = sw.route_request(&mut flit(BASE + a));
            let rb = sw.route_request(&mut flit(BASE + b));
            if a != b {
                prop_assert_ne!(ra, rb);
            }
            let single = Switch::single_device(BASE, SIZE);
            prop_assert_eq!(single.gfd_decode(tag_address(BASE + a, 0).unwrap()).unwrap(), a);
        }
    }

    #[test]
    fn sat_group_boundaries() {
        let mut sat = Sat::new(DEFAULT_SAT_GROUP_BYTES).unwrap();
        sat.grant(1, 0, DEFAULT_SAT_GROUP_BYTES);
        assert!(sat.sat_check(1, DEFAULT_SAT_GROUP_BYTES - 1));
        assert!(!sat.sat_check(1, DEFAULT_SAT_GROUP_BYTES));
        assert!(!sat.sat_check(2, 0));
        assert_eq!(sat.group_of(DEFAULT_SAT_GROUP_BYTES - 1) + 1, sat.group_of(DEFAULT_SAT_GROUP_BYTES));
    }

    #[test]
    fn bisnp_reaches_every_host_after_latency() {
        let lat = LatencyConfig::default();
        let r = MemoryRange::new(0, 1).unwrap();
        let out = broadcast_bisnp(r, 0..8, 1000, &lat);
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|&(_, _, t)| t == 1000 + lat.bisnp_ns));
    }

    #[test]
    fn link_fifo_and_unloaded_latency() {
        let mut l = Link::new(64);
        assert_eq!(l.transmit(10, 80, 150), 160);
        // Second flit queues behind the 2 ns occupancy of the first.
        assert_eq!(l.transmit(10, 16, 150), 162);
        assert_eq!(l.queued_ns, 2);
        assert_eq!(l.transmit(100, 16, 150), 250);
    }

    #[test]
    fn permission_timing_contract() {
        let lat = LatencyConfig::default();
        assert_eq!(lat.permission_response_ns(23), 150 + 23 * 15 + 150);
        assert_eq!(lat.check_ns(), 1);
        assert_eq!(lat.ns_to_cycles(300), 1200);
    }
}
