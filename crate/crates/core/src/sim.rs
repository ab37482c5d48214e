//! Deterministic discrete-event engine binding hosts, fabric, device and FM.
//!
//! Ticks are ns. Events are ordered by `(tick, host, core, sequence)`. Each
//! core issues at most one record per tick, keeps up to `max_outstanding`
//! memory operations in flight and commits them in program order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::addr::{tag_address, AccessKind, Context, ExtendedAddress, MemoryRange, PermissionAttrs, PAGE_SHIFT, PA_BITS};
use crate::checker::{
    enforce, CheckerAblation, CheckerConfig, DataOutcome, Decision, FaultKind, Locality, MemRequest, ReqId, RequestOutcome,
};
use crate::error::{Error, Result};
use crate::fabric::{broadcast_bisnp, Flit, FlitKind, LatencyConfig, Link, RouteOutcome, Sat, Switch, DEFAULT_SAT_GROUP_BYTES};
use crate::fm::{FabricManager, Grant, Policy, ProposalOutcome};
use crate::host::{HostState, Observation};
use crate::mac::derive_key;
use crate::mem::LineStore;
use crate::metrics::{stall_bucket, HostReport, RunReport, StorageEstimate, SCHEMA_VERSION};
use crate::space::{ArmOutcome, SpaceAblation};
use crate::table::{HostSet, HwpidSet, PermissionEntry, PermissionTable};
use crate::trace::{gen_trace, GenParams, Pattern, RecordKind, TraceRecord};

pub const DEFAULT_SDM_BASE: u64 = 1 << 40;
pub const GIB: u64 = 1 << 30;
const PROPOSAL_RETRY_NS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    SpaceControl,
    CxlBaseline,
    FlatTable,
    DeactLike,
    MondrianExt,
}

impl Backend {
    pub const ALL: [Backend; 5] = [
        Backend::SpaceControl,
        Backend::CxlBaseline,
        Backend::FlatTable,
        Backend::DeactLike,
        Backend::MondrianExt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::SpaceControl => "space-control",
            Backend::CxlBaseline => "cxl-baseline",
            Backend::FlatTable => "flat-table",
            Backend::DeactLike => "deact-like",
            Backend::MondrianExt => "mondrian-ext",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "1e")]
    OneEntry,
    #[serde(rename = "wc")]
    WorstCase,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_abit_check: bool,
    pub no_hwpid_check: bool,
    pub no_encryption: bool,
    pub no_integrity: bool,
    pub freeze_ctr: bool,
    pub allow_privileged_arm: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = [
        "no-abit-check",
        "no-hwpid-check",
        "no-encryption",
        "no-integrity",
        "freeze-ctr",
        "allow-privileged-arm",
    ];

    pub fn set(&mut self, name: &str) -> Result<()> {
        let slot = match name.replace('_', "-").as_str() {
            "no-abit-check" => &mut self.no_abit_check,
            "no-hwpid-check" => &mut self.no_hwpid_check,
            "no-encryption" => &mut self.no_encryption,
            "no-integrity" => &mut self.no_integrity,
            "freeze-ctr" => &mut self.freeze_ctr,
            "allow-privileged-arm" => &mut self.allow_privileged_arm,
            other => return Err(Error::Argument(format!("unknown ablation flag `{other}`"))),
        };
        *slot = true;
        Ok(())
    }

    fn checker(&self) -> CheckerAblation {
        CheckerAblation {
            skip_abit_check: self.no_abit_check,
            skip_hwpid_check: self.no_hwpid_check,
            disable_encryption: self.no_encryption,
            disable_integrity: self.no_integrity,
        }
    }

    fn space(&self) -> SpaceAblation {
        SpaceAblation {
            freeze_ctr: self.freeze_ctr,
            allow_privileged_arm: self.allow_privileged_arm,
        }
    }
}

/// Parameters for traces generated when no trace directory is given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub pattern: Pattern,
    pub pages: u64,
    pub ops: u64,
    pub remote_frac: f64,
    pub store_frac: f64,
    pub mix: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            pattern: Pattern::Random,
            pages: 1 << 20,
            ops: 20_000,
            remote_frac: 1.0,
            store_frac: 0.1,
            mix: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub hosts: u16,
    pub cores: u8,
    pub sdm_bytes: u64,
    pub sdm_base: u64,
    pub local_bytes: u64,
    pub backend: Backend,
    pub layout: Layout,
    pub cache_entries: usize,
    pub max_outstanding: usize,
    pub lookup_engines: usize,
    pub link_bytes_per_ns: u64,
    pub segregate_permission_traffic: bool,
    pub sat_group_bytes: u64,
    /// Address-space root of the pre-registered trusted process on each host.
    pub trusted_base_p: u64,
    pub policy: Option<String>,
    pub strict_fault_threshold: u64,
    pub record_observations: bool,
    pub latency: LatencyConfig,
    pub ablation: AblationFlags,
    pub workload: WorkloadConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            hosts: 1,
            cores: 1,
            sdm_bytes: 16 * GIB,
            sdm_base: DEFAULT_SDM_BASE,
            local_bytes: 16 * GIB,
            backend: Backend::SpaceControl,
            layout: Layout::OneEntry,
            cache_entries: 32,
            max_outstanding: 4,
            lookup_engines: 1,
            link_bytes_per_ns: 64,
            segregate_permission_traffic: false,
            sat_group_bytes: DEFAULT_SAT_GROUP_BYTES,
            trusted_base_p: 0x1000,
            policy: None,
            strict_fault_threshold: 0,
            record_observations: false,
            latency: LatencyConfig::default(),
            ablation: AblationFlags::default(),
            workload: WorkloadConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sdm_pages(&self) -> u64 {
        self.sdm_bytes >> PAGE_SHIFT
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hosts == 0 || self.hosts > 255 {
            return bad(format!("hosts must be in 1..=255, got {}", self.hosts));
        }
        if self.cores == 0 {
            return bad("cores must be at least 1".into());
        }
        if self.sdm_bytes == 0 || !self.sdm_bytes.is_multiple_of(1 << PAGE_SHIFT) {
            return bad("sdm_bytes must be a nonzero multiple of 4096".into());
        }
        if !self.sdm_base.is_multiple_of(1 << PAGE_SHIFT) || self.sdm_base.checked_add(self.sdm_bytes).is_none_or(|e| e > 1 << PA_BITS) {
            return bad("shared-memory window must be page aligned and fit in 41 bits".into());
        }
        if self.local_bytes > self.sdm_base {
            return bad("local memory overlaps the shared-memory window".into());
        }
        if self.max_outstanding == 0 || self.max_outstanding > 32 {
            return bad("max_outstanding must be in 1..=32".into());
        }
        if self.lookup_engines == 0 {
            return bad("lookup_engines must be at least 1".into());
        }
        if self.cache_entries > 1 << 16 {
            return bad("cache_entries above 65536".into());
        }
        if self.sat_group_bytes == 0 || self.link_bytes_per_ns == 0 {
            return bad("sat_group_bytes and link_bytes_per_ns must be nonzero".into());
        }
        if self.hosts > 255 {
            return bad("at most 255 hosts".into());
        }
        self.latency.validate()
    }

    fn gen_params(&self, host: u8) -> GenParams {
        GenParams {
            pages: self.workload.pages,
            ops: self.workload.ops,
            remote_frac: self.workload.remote_frac,
            store_frac: self.workload.store_frac,
            mix: self.workload.mix,
            host,
            cores: self.cores,
            hwpid: 1,
            base_p: self.trusted_base_p,
            sdm_base: self.sdm_base,
            local_base: 0,
        }
    }

    /// One generated trace per host from the `[workload]` section.
    pub fn generate_traces(&self) -> Result<Vec<Vec<TraceRecord>>> {
        (0..self.hosts)
            .map(|h| {
                gen_trace(
                    self.workload.pattern,
                    &self.gen_params(h as u8),
                    self.seed.wrapping_add(u64::from(h)),
                )
            })
            .collect()
    }
}

/// The permission table a run starts with, for layouts built before the run.
pub fn build_table(cfg: &RunConfig) -> PermissionTable {
    let pages = cfg.sdm_pages();
    let hosts = HostSet::first_n(usize::from(cfg.hosts));
    let hwpids = HwpidSet::single(1);
    match cfg.layout {
        Layout::OneEntry => PermissionTable::single_entry(pages, PermissionAttrs::RW, hosts, hwpids),
        Layout::WorstCase => PermissionTable::worst_case(pages, PermissionAttrs::RW, hosts, hwpids),
        Layout::Custom => PermissionTable::new(pages as usize),
    }
}

// ---------------------------------------------------------------------------
// Storage models for the comparison backends.

/// `hosts × processes × pages × 2 bits`.
pub fn storage_flat_table(hosts: u64, processes: u64, pages: u64) -> u64 {
    hosts * processes * pages * 2 / 8
}

/// Bytes of per-page metadata in the DeACT-like scheme: an 8-byte owner
/// mapping entry plus a sharing bitmap with one bit per host.
pub fn deact_bytes_per_page(hosts: u64) -> u64 {
    8 + hosts.div_ceil(8)
}

/// Mapping table plus sharing bitmap, replicated once per process.
pub fn storage_deact_like(pages: u64, hosts: u64, processes: u64) -> u64 {
    pages * deact_bytes_per_page(hosts) * processes
}

pub fn storage_mondrian_ext(hosts: u64, table_bytes: u64) -> u64 {
    hosts * table_bytes
}

pub fn storage_space_control(entries: u64) -> u64 {
    entries * crate::table::ENTRY_BYTES as u64
}

/// Lookup plan of one remote access: device-side probe count.
pub fn backend_flat_table() -> u32 {
    1
}

pub fn backend_deact_like() -> u32 {
    2
}

/// Binary search on the host's replica of the sorted table.
pub fn backend_mondrian_ext(table: &PermissionTable, page: u64) -> u32 {
    table.lookup(page).1.max(1)
}

// ---------------------------------------------------------------------------
// Events.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SimEventKind {
    Fault { fault: FaultKind, write: bool, va: u64 },
    Arm { armed: bool, validated: bool },
    Replay { validated: bool },
    ProposalApproved { hwpid: u8 },
    ProposalDenied,
    Revoked { hwpid: u8 },
    OsError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u64,
    pub host: u8,
    pub core: u8,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

#[derive(Clone, Copy, Debug)]
enum FmMsg {
    Propose { entry: PermissionEntry, base_p: u64 },
}

#[derive(Clone, Debug)]
enum Ev {
    Core,
    LocalDone {
        id: ReqId,
    },
    DevData {
        id: ReqId,
    },
    DataResp {
        id: ReqId,
    },
    DevPerm {
        page: u64,
        ext: ExtendedAddress,
    },
    DevPermDone {
        page: u64,
        entry: Option<PermissionEntry>,
        probes: u32,
    },
    PermResp {
        page: u64,
        entry: Option<PermissionEntry>,
        probes: u32,
    },
    Bisnp {
        range: MemoryRange,
        withdraw: Vec<u8>,
    },
    FmReq {
        msg: FmMsg,
    },
    FmResp {
        outcome: Option<ProposalOutcome>,
        retry: Option<FmMsg>,
    },
    FmRetry {
        msg: FmMsg,
    },
}

#[derive(Debug)]
struct Queued {
    key: (u64, u8, u8, u64),
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.key == o.key
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.key.cmp(&o.key)
    }
}

#[derive(Clone, Debug)]
struct Op {
    host: u8,
    core: u8,
    write: bool,
    remote: bool,
    size: u8,
    va: u64,
    ext: ExtendedAddress,
    value: u64,
    issue: u64,
    /// Goes through the checker and is subject to enforcement.
    checked: bool,
    held: bool,
    hold_ns: u64,
    data_at: Option<u64>,
    done: bool,
    fault: Option<FaultKind>,
    read: Vec<u8>,
    base_p: u64,
}

#[derive(Debug, Default)]
struct CoreState {
    records: VecDeque<TraceRecord>,
    window: VecDeque<ReqId>,
    earliest: u64,
    scheduled: Option<u64>,
    blocked: bool,
    last_tick: u64,
}

#[derive(Debug, Default, Clone)]
struct HostStats {
    records: u64,
    mem_ops: u64,
    remote_ops: u64,
    local_ops: u64,
    stall_ns: u64,
    stall_hist: BTreeMap<u64, u64>,
    creation_ns: u64,
    lookup_ns: u64,
    perm_flits: u64,
    data_flits: u64,
    bisnp_flits: u64,
    fm_flits: u64,
    faults: BTreeMap<FaultKind, u64>,
    backpressure_ns: u64,
    proposals_approved: u64,
    proposals_denied: u64,
    os_errors: u64,
    local_lookups: u64,
}

#[derive(Debug)]
struct Links {
    up: Link,
    down: Link,
    perm_up: Link,
    perm_down: Link,
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub events: Vec<SimEvent>,
    pub observations: Vec<Observation>,
    pub audit: Vec<crate::checker::AuditRecord>,
    pub table: Arc<PermissionTable>,
    pub taint_leaks: u64,
    /// Resident permission-cache entries per host at the end of the run.
    pub caches: Vec<Vec<PermissionEntry>>,
}

pub struct Engine {
    cfg: RunConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    hosts: Vec<HostState>,
    cores: Vec<Vec<CoreState>>,
    links: Vec<Links>,
    stats: Vec<HostStats>,
    ops: HashMap<ReqId, Op>,
    next_id: ReqId,
    table: Arc<PermissionTable>,
    fm: FabricManager,
    switch: Switch,
    sat: Sat,
    device_mem: LineStore,
    engines: Vec<u64>,
    events: Vec<SimEvent>,
    observations: Vec<Observation>,
    taint: HashMap<u64, ()>,
    taint_leaks: u64,
    bound: Vec<u8>,
    flits_in_flight: i64,
}

impl Engine {
    /// Builds an engine with a freshly built table.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let table = Arc::new(build_table(&cfg));
        Self::with_table(cfg, table)
    }

    /// Builds an engine over a prebuilt table; the table is copied only if
    /// the run modifies it.
    pub fn with_table(cfg: RunConfig, table: Arc<PermissionTable>) -> Result<Self> {
        cfg.validate()?;
        let policy = match &cfg.policy {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Policy>()?
            }
            None => Policy::AllowAll,
        };
        let n = cfg.hosts as usize;
        let cache = match cfg.backend {
            Backend::MondrianExt => 0,
            _ => cfg.cache_entries,
        };
        let mut ccfg = CheckerConfig::new(cfg.sdm_base, cfg.sdm_bytes, cache);
        ccfg.mshrs = 32;
        ccfg.response_slots = 32;
        let mut hosts: Vec<HostState> = (0..n)
            .map(|h| HostState::new(h as u8, cfg.cores, cfg.seed, ccfg, cfg.ablation.checker(), cfg.ablation.space()))
            .collect();
        let mut fm = FabricManager::new(derive_key("fm", 0, cfg.seed), policy, cfg.sdm_pages());
        let mut sat = Sat::new(cfg.sat_group_bytes)?;
        let full = MemoryRange::new(0, cfg.sdm_pages())?;
        for h in &mut hosts {
            sat.grant(h.id, 0, cfg.sdm_bytes);
            if cfg.layout != Layout::Custom {
                let hwpid = h.space.get_next_pid()?;
                let label = fm.issue_expected_label(h.id, hwpid, cfg.trusted_base_p, full);
                h.space.install_expected_label(hwpid, label, cfg.trusted_base_p)?;
                h.checker.trust(hwpid);
                fm.seed_grant(Grant {
                    host: h.id,
                    hwpid,
                    base_p: cfg.trusted_base_p,
                    range: full,
                    attrs: PermissionAttrs::RW,
                });
            }
        }
        let mut table = table;
        if cfg.layout != Layout::Custom {
            let t = Arc::make_mut(&mut table);
            for h in &hosts {
                if t.label(h.id, 1).is_none() {
                    t.store_label(crate::table::LabelRecord {
                        host_id: h.id,
                        hwpid: 1,
                        label: fm.issue_expected_label(h.id, 1, cfg.trusted_base_p, full),
                    });
                }
            }
        }
        let links = (0..n)
            .map(|_| Links {
                up: Link::new(cfg.link_bytes_per_ns),
                down: Link::new(cfg.link_bytes_per_ns),
                perm_up: Link::new(cfg.link_bytes_per_ns),
                perm_down: Link::new(cfg.link_bytes_per_ns),
            })
            .collect();
        Ok(Self {
            switch: Switch::single_device(cfg.sdm_base, cfg.sdm_bytes),
            sat,
            cores: (0..n).map(|_| (0..cfg.cores).map(|_| CoreState::default()).collect()).collect(),
            links,
            stats: vec![HostStats::default(); n],
            engines: vec![0; cfg.lookup_engines],
            bound: (0..n as u16).map(|h| h as u8).collect(),
            hosts,
            fm,
            table,
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            ops: HashMap::new(),
            next_id: 1,
            device_mem: LineStore::default(),
            events: Vec::new(),
            observations: Vec::new(),
            taint: HashMap::new(),
            taint_leaks: 0,
            flits_in_flight: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn push(&mut self, tick: u64, host: u8, core: u8, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            key: (tick, host, core, self.seq),
            ev,
        }));
    }

    fn schedule_core(&mut self, host: u8, core: u8, tick: u64) {
        let c = &mut self.cores[host as usize][core as usize];
        match c.scheduled {
            Some(s) if s <= tick => {}
            _ => {
                c.scheduled = Some(tick);
                self.push(tick, host, core, Ev::Core);
            }
        }
    }

    fn event(&mut self, host: u8, core: u8, kind: SimEventKind) {
        self.events.push(SimEvent {
            tick: self.now,
            host,
            core,
            kind,
        });
    }

    /// Runs the traces to completion. Records for host `h` must name host `h`.
    pub fn run(mut self, traces: &[Vec<TraceRecord>]) -> Result<RunOutput> {
        if traces.len() > self.hosts.len() {
            return Err(Error::Config(format!("{} traces for {} hosts", traces.len(), self.hosts.len())));
        }
        for (h, trace) in traces.iter().enumerate() {
            for r in trace {
                if usize::from(r.host) != h {
                    return Err(Error::Trace {
                        line: 0,
                        column: 0,
                        message: format!("record for host {} in trace of host {h}", r.host),
                    });
                }
                if r.core >= self.cfg.cores {
                    return Err(Error::Trace {
                        line: 0,
                        column: 0,
                        message: format!("core {} out of range", r.core),
                    });
                }
                self.cores[h][usize::from(r.core)].records.push_back(*r);
            }
        }
        for h in 0..self.hosts.len() {
            for c in 0..self.cfg.cores {
                let first = self.cores[h][usize::from(c)].records.front().map_or(0, |r| r.delay);
                self.cores[h][usize::from(c)].earliest = first;
                self.schedule_core(h as u8, c, first);
            }
        }
        while let Some(Reverse(q)) = self.queue.pop() {
            let (tick, host, core, _) = q.key;
            debug_assert!(tick >= self.now);
            self.now = tick;
            self.dispatch(host, core, q.ev)?;
        }
        self.finish()
    }

    fn dispatch(&mut self, host: u8, core: u8, ev: Ev) -> Result<()> {
        match ev {
            Ev::Core => {
                let c = &mut self.cores[host as usize][core as usize];
                if c.scheduled != Some(self.now) {
                    return Ok(());
                }
                c.scheduled = None;
                self.step_core(host, core)
            }
            Ev::LocalDone { id } => self.local_done(id),
            Ev::DevData { id } => self.device_data(id),
            Ev::DataResp { id } => self.data_response(id),
            Ev::DevPerm { page, ext } => self.device_permission(host, page, ext),
            Ev::DevPermDone { page, entry, probes } => {
                self.send_permission_response(host, page, entry, probes);
                Ok(())
            }
            Ev::PermResp { page, entry, probes } => self.permission_response(host, page, entry, probes),
            Ev::Bisnp { range, withdraw } => {
                self.flits_in_flight -= 1;
                let h = &mut self.hosts[host as usize];
                h.checker.invalidate(range);
                for hwpid in withdraw {
                    h.space.remove_expected_label(hwpid);
                    h.checker.distrust(hwpid);
                }
                Ok(())
            }
            Ev::FmReq { msg } => self.fm_request(host, core, msg),
            Ev::FmResp { outcome, retry } => self.fm_response(host, core, outcome, retry),
            Ev::FmRetry { msg } => {
                self.send_fm(host, core, msg);
                Ok(())
            }
        }
    }

    fn step_core(&mut self, host: u8, core: u8) -> Result<()> {
        let (h, c) = (host as usize, core as usize);
        let now = self.now;
        let cs = &self.cores[h][c];
        if cs.blocked {
            return Ok(());
        }
        let Some(rec) = cs.records.front().copied() else {
            return Ok(());
        };
        if now < cs.earliest {
            let t = cs.earliest;
            self.schedule_core(host, core, t);
            return Ok(());
        }
        if rec.kind.is_memory() {
            if cs.window.len() >= self.cfg.max_outstanding {
                return Ok(());
            }
            // A store held for its permission orders every younger access.
            if cs.window.iter().any(|id| self.ops[id].held) {
                return Ok(());
            }
            if !self.issue_memory(host, core, rec)? {
                self.stats[h].backpressure_ns += 1;
                self.schedule_core(host, core, now + 1);
                return Ok(());
            }
        } else {
            if !cs.window.is_empty() {
                return Ok(());
            }
            self.exec_control(host, core, rec)?;
            self.cores[h][c].last_tick = self.cores[h][c].last_tick.max(now + 1);
        }
        self.stats[h].records += 1;
        let cs = &mut self.cores[h][c];
        cs.records.pop_front();
        let next_delay = cs.records.front().map_or(0, |r| r.delay);
        cs.earliest = now + 1 + next_delay;
        if !cs.blocked && !cs.records.is_empty() {
            let t = cs.earliest;
            self.schedule_core(host, core, t);
        }
        Ok(())
    }

    fn active_base_p(&self, host: u8, core: u8) -> u64 {
        self.hosts[host as usize].space.active_context(core).map_or(0, |c| c.base_p)
    }

    fn exec_control(&mut self, host: u8, core: u8, rec: TraceRecord) -> Result<()> {
        let h = host as usize;
        match rec.kind {
            RecordKind::CtxSw { base_p, hwpid, ring } => {
                let ctx = Context::new(host, core, hwpid, base_p, ring)?;
                self.hosts[h].note_context_switch(core);
                self.hosts[h].space.on_context_switch(core, ctx)?;
            }
            RecordKind::Arm { ring } => {
                let hs = &mut self.hosts[h];
                let armed = hs.space.arm_label(core, ring)? == ArmOutcome::Armed;
                let mut validated = false;
                if armed {
                    hs.note_armed(core);
                    validated = hs.space.validate_context(core)?;
                }
                self.event(host, core, SimEventKind::Arm { armed, validated });
            }
            RecordKind::Replay => {
                let hs = &mut self.hosts[h];
                let validated = match hs.stale_label(core) {
                    Some(label) => {
                        hs.space.inject_label(core, label)?;
                        hs.space.validate_context(core)?
                    }
                    None => false,
                };
                self.event(host, core, SimEventKind::Replay { validated });
            }
            RecordKind::Propose { start_page, pages, attrs } => {
                let ctx = self.hosts[h].space.active_context(core);
                let hwpid = ctx.map_or(0, |c| c.hwpid);
                let range = MemoryRange::new(start_page, pages)?;
                let entry = PermissionEntry::grant(range, attrs, host, hwpid);
                let base_p = ctx.map_or(0, |c| c.base_p);
                self.cores[h][core as usize].blocked = true;
                self.send_fm(host, core, FmMsg::Propose { entry, base_p });
            }
            RecordKind::Map { base_p, vpage, ppage } => self.hosts[h].map(base_p, vpage, ppage),
            RecordKind::Unmap { base_p, vpage } => self.hosts[h].unmap(base_p, vpage),
            RecordKind::GetPid => {
                if self.hosts[h].space.get_next_pid().is_err() {
                    self.stats[h].os_errors += 1;
                    self.event(host, core, SimEventKind::OsError);
                }
            }
            RecordKind::RelPid { hwpid } => {
                if self.hosts[h].space.release_pid(hwpid).is_err() {
                    self.stats[h].os_errors += 1;
                    self.event(host, core, SimEventKind::OsError);
                } else {
                    self.hosts[h].checker.distrust(hwpid);
                }
            }
            RecordKind::Revoke { hwpid, start_page, pages } => {
                let range = MemoryRange::new(start_page, pages)?;
                let bound = self.bound.clone();
                match self.fm.revoke(Arc::make_mut(&mut self.table), host, hwpid, range, &bound) {
                    Ok(out) => {
                        let withdraw: Vec<u8> = out.withdrawn.iter().filter(|&&(wh, _)| wh == host).map(|&(_, p)| p).collect();
                        for (dst, r, at) in broadcast_bisnp(range, out.bisnp, self.now, &self.cfg.latency) {
                            let w = if dst == host { withdraw.clone() } else { Vec::new() };
                            self.send_bisnp(dst, r, at, w);
                        }
                        self.event(host, core, SimEventKind::Revoked { hwpid });
                    }
                    Err(_) => {
                        self.stats[h].os_errors += 1;
                        self.event(host, core, SimEventKind::OsError);
                    }
                }
            }
            RecordKind::Nop => {}
            RecordKind::Ld { .. } | RecordKind::St { .. } => unreachable!("memory records are issued separately"),
        }
        Ok(())
    }

    fn send_bisnp(&mut self, dst: u8, range: MemoryRange, at: u64, withdraw: Vec<u8>) -> u64 {
        let d = dst as usize;
        let link = if self.cfg.segregate_permission_traffic {
            &mut self.links[d].perm_down
        } else {
            &mut self.links[d].down
        };
        let deliver = link.transmit(self.now, crate::fabric::HEADER_BYTES, at - self.now);
        self.stats[d].bisnp_flits += 1;
        self.flits_in_flight += 1;
        self.push(deliver, dst, 0, Ev::Bisnp { range, withdraw });
        deliver
    }

    fn send_fm(&mut self, host: u8, core: u8, msg: FmMsg) {
        let h = host as usize;
        let lat = self.cfg.latency.remote_req_ns;
        let at = self.links[h].up.transmit(self.now + self.cfg.latency.check_ns(), 80, lat);
        self.stats[h].fm_flits += 1;
        self.push(at, host, core, Ev::FmReq { msg });
    }

    fn fm_request(&mut self, host: u8, core: u8, msg: FmMsg) -> Result<()> {
        let FmMsg::Propose { entry, base_p } = msg;
        let h = host as usize;
        let table = Arc::make_mut(&mut self.table);
        let mut bisnp_done = 0;
        let (outcome, retry) = match table.propose(entry, host) {
            Err(Error::Retry(_)) => (None, Some(msg)),
            Err(e) => (Some(ProposalOutcome::Denied { reason: e.to_string() }), None),
            Ok(()) => {
                let bound = self.bound.clone();
                let out = self.fm.process_proposal(table, base_p, &bound)?;
                if let ProposalOutcome::Approved { range, bisnp, .. } = &out {
                    for (dst, r, at) in broadcast_bisnp(*range, bisnp.clone(), self.now, &self.cfg.latency) {
                        bisnp_done = bisnp_done.max(self.send_bisnp(dst, r, at, Vec::new()));
                    }
                }
                (Some(out), None)
            }
        };
        // The proposer is acknowledged only once every cache has been snooped.
        let at = self.links[h]
            .down
            .transmit(self.now, 80, self.cfg.latency.remote_resp_ns)
            .max(bisnp_done);
        self.stats[h].fm_flits += 1;
        self.push(at, host, core, Ev::FmResp { outcome, retry });
        Ok(())
    }

    fn fm_response(&mut self, host: u8, core: u8, outcome: Option<ProposalOutcome>, retry: Option<FmMsg>) -> Result<()> {
        let h = host as usize;
        match outcome {
            None => {
                // Proposal slot busy: resend after a back-off.
                if let Some(msg) = retry {
                    let at = self.now + PROPOSAL_RETRY_NS;
                    self.push(at, host, core, Ev::FmRetry { msg });
                }
                return Ok(());
            }
            Some(ProposalOutcome::Approved { label, hwpid, base_p, .. }) => {
                let hs = &mut self.hosts[h];
                if hs.space.install_expected_label(hwpid, label, base_p).is_ok() {
                    hs.checker.trust(hwpid);
                    self.stats[h].proposals_approved += 1;
                    self.event(host, core, SimEventKind::ProposalApproved { hwpid });
                } else {
                    self.stats[h].os_errors += 1;
                    self.event(host, core, SimEventKind::OsError);
                }
            }
            Some(ProposalOutcome::Denied { .. }) => {
                self.stats[h].proposals_denied += 1;
                self.event(host, core, SimEventKind::ProposalDenied);
            }
        }
        let cs = &mut self.cores[h][core as usize];
        cs.blocked = false;
        cs.last_tick = cs.last_tick.max(self.now);
        if !cs.records.is_empty() {
            let t = cs.earliest.max(self.now);
            self.schedule_core(host, core, t);
        }
        Ok(())
    }

    /// Returns false on back-pressure (nothing issued).
    fn issue_memory(&mut self, host: u8, core: u8, rec: TraceRecord) -> Result<bool> {
        let h = host as usize;
        let (va, size, write, value) = match rec.kind {
            RecordKind::Ld { va, size } => (va, size, false, 0),
            RecordKind::St { va, size, value } => (va, size, true, value.unwrap_or(0)),
            _ => unreachable!(),
        };
        let base_p = self.active_base_p(host, core);
        let pa = self.hosts[h].translate(base_p, va);
        let tag = if self.cfg.backend == Backend::CxlBaseline {
            0
        } else {
            self.hosts[h].space.tag_for(core)
        };
        let id = self.next_id;
        let mut op = Op {
            host,
            core,
            write,
            remote: false,
            size,
            va,
            ext: ExtendedAddress::from_raw(0)?,
            value,
            issue: self.now,
            checked: false,
            held: false,
            hold_ns: 0,
            data_at: None,
            done: false,
            fault: None,
            read: Vec::new(),
            base_p,
        };
        let Ok(ext) = tag_address(pa, tag) else {
            op.done = true;
            op.fault = Some(FaultKind::PageFault);
            return self.admit(id, op).map(|_| true);
        };
        op.ext = ext;
        let lat = self.cfg.latency;
        let kind = if write { AccessKind::Write } else { AccessKind::Read };
        if self.hosts[h].checker.classify(ext) == Locality::Local {
            let mut t = if write { lat.local_write_ns } else { lat.local_read_ns };
            if tag != 0 && !self.cfg.ablation.no_encryption {
                t += lat.encrypt_ns();
            }
            if self.cfg.backend == Backend::MondrianExt {
                t += lat.lookup_ns(1);
                self.stats[h].local_lookups += 1;
            }
            self.stats[h].local_ops += 1;
            self.push(self.now + t, host, core, Ev::LocalDone { id });
            self.admit(id, op)?;
            return Ok(true);
        }
        op.remote = true;
        if self.cfg.backend == Backend::CxlBaseline {
            self.stats[h].remote_ops += 1;
            self.admit(id, op)?;
            self.send_data(id, self.now);
            return Ok(true);
        }
        let outcome = match self.hosts[h].checker.on_request(MemRequest { id, core, ext, op: kind }) {
            Ok(o) => o,
            Err(_) => return Ok(false),
        };
        self.stats[h].remote_ops += 1;
        let check = lat.check_ns();
        let depart = self.now + check;
        match outcome {
            RequestOutcome::Rejected => {
                op.done = true;
                op.fault = Some(FaultKind::RejectUntagged);
                self.admit(id, op)?;
            }
            RequestOutcome::Unchecked => {
                self.admit(id, op)?;
                self.send_data(id, depart);
            }
            RequestOutcome::Local { .. } => unreachable!("classified remote"),
            RequestOutcome::Remote { resolved, lookup } => {
                op.checked = true;
                if let Some(page) = lookup {
                    self.stats[h].creation_ns += check;
                    self.issue_lookup(host, core, page, ext, depart);
                }
                match (write, resolved) {
                    (false, _) | (true, Some(Decision::Allow)) => {
                        self.admit(id, op)?;
                        self.send_data(id, depart);
                    }
                    (true, Some(_)) => {
                        op.done = true;
                        op.fault = Some(FaultKind::Violation);
                        self.admit(id, op)?;
                    }
                    (true, None) => {
                        op.held = true;
                        self.admit(id, op)?;
                    }
                }
            }
        }
        Ok(true)
    }

    fn admit(&mut self, id: ReqId, op: Op) -> Result<()> {
        let (h, c) = (op.host as usize, op.core as usize);
        self.stats[h].mem_ops += 1;
        let done = op.done;
        self.ops.insert(id, op);
        self.next_id += 1;
        self.cores[h][c].window.push_back(id);
        if done {
            self.try_commit(h as u8, c as u8)?;
        }
        Ok(())
    }

    fn issue_lookup(&mut self, host: u8, core: u8, page: u64, ext: ExtendedAddress, depart: u64) {
        let h = host as usize;
        if self.cfg.backend == Backend::MondrianExt {
            let probes = backend_mondrian_ext(&self.table, page);
            let entry = self.table.lookup(page).0.copied();
            let t = self.cfg.latency.lookup_ns(probes);
            self.stats[h].lookup_ns += t;
            self.push(depart + t, host, core, Ev::PermResp { page, entry, probes });
            return;
        }
        let link = if self.cfg.segregate_permission_traffic {
            &mut self.links[h].perm_up
        } else {
            &mut self.links[h].up
        };
        let at = link.transmit(depart, crate::fabric::HEADER_BYTES, self.cfg.latency.remote_req_ns);
        self.stats[h].perm_flits += 1;
        self.flits_in_flight += 1;
        self.push(at, host, core, Ev::DevPerm { page, ext });
    }

    fn send_data(&mut self, id: ReqId, depart: u64) {
        let op = &self.ops[&id];
        let (host, core) = (op.host, op.core);
        let h = host as usize;
        let bytes = crate::fabric::HEADER_BYTES + if op.write { 64 } else { 0 };
        let at = self.links[h].up.transmit(depart, bytes, self.cfg.latency.remote_req_ns);
        self.stats[h].data_flits += 1;
        self.flits_in_flight += 1;
        self.push(at, host, core, Ev::DevData { id });
    }

    fn device_data(&mut self, id: ReqId) -> Result<()> {
        self.flits_in_flight -= 1;
        let op = self
            .ops
            .get(&id)
            .ok_or_else(|| Error::Protocol(format!("data request {id} vanished")))?;
        let (host, core, write) = (op.host, op.core, op.write);
        let mut flit = Flit::new(FlitKind::DataReq, u16::from(host), op.ext, id, op.issue, write);
        let fault = match self.switch.route_request(&mut flit) {
            RouteOutcome::Dropped => Some(FaultKind::RouteDrop),
            RouteOutcome::Routed { dpa, .. } if !self.sat.sat_check(host, dpa) => Some(FaultKind::SatReject),
            RouteOutcome::Routed { dpa, .. } => {
                let size = usize::from(op.size);
                let value = op.value;
                if write {
                    self.device_mem.write(dpa, size, value);
                } else {
                    let bytes = self.device_mem.read(dpa, size);
                    self.ops.get_mut(&id).unwrap().read = bytes;
                }
                None
            }
        };
        if let Some(f) = fault {
            let op = self.ops.get_mut(&id).unwrap();
            op.fault = Some(f);
        }
        let h = host as usize;
        let bytes = crate::fabric::HEADER_BYTES + if write { 0 } else { 64 };
        let at = self.links[h].down.transmit(self.now, bytes, self.cfg.latency.remote_resp_ns);
        self.stats[h].data_flits += 1;
        self.flits_in_flight += 1;
        self.push(at, host, core, Ev::DataResp { id });
        Ok(())
    }

    fn data_response(&mut self, id: ReqId) -> Result<()> {
        self.flits_in_flight -= 1;
        let op = self
            .ops
            .get_mut(&id)
            .ok_or_else(|| Error::Protocol(format!("data response {id} has no request")))?;
        op.data_at = Some(self.now);
        let (host, core) = (op.host, op.core);
        if op.fault.is_some() || !op.checked {
            op.done = true;
            if op.checked {
                // Keep the checker's slot accounting consistent.
                self.hosts[host as usize].checker.on_data_response(id)?;
            }
            return self.try_commit(host, core);
        }
        match self.hosts[host as usize].checker.on_data_response(id)? {
            DataOutcome::Enforced(d) => self.finalize(id, d),
            DataOutcome::Buffered => Ok(()),
        }
    }

    fn finalize(&mut self, id: ReqId, d: Decision) -> Result<()> {
        let op = self.ops.get_mut(&id).unwrap();
        op.done = true;
        if d != Decision::Allow {
            op.fault = Some(FaultKind::Violation);
        }
        let (host, core) = (op.host, op.core);
        self.try_commit(host, core)
    }

    fn device_permission(&mut self, host: u8, page: u64, ext: ExtendedAddress) -> Result<()> {
        self.flits_in_flight -= 1;
        let h = host as usize;
        let mut flit = Flit::new(FlitKind::PermReq, u16::from(host), ext, page, self.now, false);
        let admitted = match self.switch.route_request(&mut flit) {
            RouteOutcome::Routed { dpa, .. } => self.sat.sat_check(host, dpa),
            RouteOutcome::Dropped => false,
        };
        let (entry, probes, done) = if admitted {
            let (e, searched) = self.table.lookup(page);
            let probes = match self.cfg.backend {
                Backend::FlatTable => backend_flat_table(),
                Backend::DeactLike => backend_deact_like(),
                _ => searched,
            };
            let t = self.cfg.latency.lookup_ns(probes);
            let slot = (0..self.engines.len()).min_by_key(|&i| (self.engines[i], i)).unwrap();
            let start = self.now.max(self.engines[slot]);
            self.engines[slot] = start + t;
            self.stats[h].lookup_ns += t;
            (e.copied(), probes, start + t)
        } else {
            (None, 0, self.now)
        };
        self.push(done, host, 0, Ev::DevPermDone { page, entry, probes });
        Ok(())
    }

    fn send_permission_response(&mut self, host: u8, page: u64, entry: Option<PermissionEntry>, probes: u32) {
        let h = host as usize;
        let link = if self.cfg.segregate_permission_traffic {
            &mut self.links[h].perm_down
        } else {
            &mut self.links[h].down
        };
        let at = link.transmit(self.now, crate::fabric::HEADER_BYTES + 64, self.cfg.latency.remote_resp_ns);
        self.stats[h].perm_flits += 1;
        self.flits_in_flight += 1;
        self.push(at, host, 0, Ev::PermResp { page, entry, probes });
    }

    fn permission_response(&mut self, host: u8, page: u64, entry: Option<PermissionEntry>, probes: u32) -> Result<()> {
        if self.cfg.backend != Backend::MondrianExt {
            self.flits_in_flight -= 1;
        }
        let resolutions = self.hosts[host as usize].checker.on_permission_response(page, entry, probes)?;
        for r in resolutions {
            let op = self
                .ops
                .get_mut(&r.id)
                .ok_or_else(|| Error::Protocol(format!("resolution for unknown op {}", r.id)))?;
            if op.held {
                op.held = false;
                op.hold_ns = self.now - op.issue;
                let (oh, oc) = (op.host, op.core);
                let resume = self.cores[oh as usize][oc as usize].earliest.max(self.now);
                if !self.cores[oh as usize][oc as usize].records.is_empty() {
                    self.schedule_core(oh, oc, resume);
                }
                let op = self.ops.get_mut(&r.id).unwrap();
                if r.decision == Decision::Allow {
                    self.send_data(r.id, self.now);
                } else {
                    op.done = true;
                    op.fault = Some(FaultKind::Violation);
                    let (h, c) = (op.host, op.core);
                    self.try_commit(h, c)?;
                }
            } else if r.data_arrived {
                self.finalize(r.id, r.decision)?;
            }
        }
        Ok(())
    }

    fn local_done(&mut self, id: ReqId) -> Result<()> {
        let op = self.ops.get_mut(&id).unwrap();
        op.data_at = Some(self.now);
        op.done = true;
        let (host, core) = (op.host, op.core);
        let pa = op.ext.pa();
        let size = usize::from(op.size);
        let cxl = self.cfg.backend == Backend::CxlBaseline;
        let hwpid = if cxl { 0 } else { op.ext.abits() };
        let hs = &mut self.hosts[host as usize];
        if op.write {
            hs.local.write(
                pa,
                size,
                op.value,
                hwpid,
                !cxl && !self.cfg.ablation.no_encryption,
                !cxl && !self.cfg.ablation.no_integrity,
            );
        } else {
            let (bytes, r) = hs.local.read(pa, size, hwpid);
            op.read = bytes;
            if r.integrity_violation {
                op.fault = Some(FaultKind::Integrity);
            }
        }
        self.try_commit(host, core)
    }

    fn try_commit(&mut self, host: u8, core: u8) -> Result<()> {
        let (h, c) = (host as usize, core as usize);
        let mut committed = false;
        while let Some(&id) = self.cores[h][c].window.front() {
            if !self.ops[&id].done {
                break;
            }
            self.cores[h][c].window.pop_front();
            let op = self.ops.remove(&id).unwrap();
            self.commit(id, op)?;
            committed = true;
        }
        if committed {
            let cs = &mut self.cores[h][c];
            cs.last_tick = cs.last_tick.max(self.now);
            if !cs.records.is_empty() && !cs.blocked {
                let t = cs.earliest.max(self.now);
                self.schedule_core(host, core, t);
            }
        }
        Ok(())
    }

    fn commit(&mut self, id: ReqId, op: Op) -> Result<()> {
        let h = op.host as usize;
        if op.checked {
            let stall = op.data_at.map_or(0, |t| self.now - t) + op.hold_ns;
            self.stats[h].stall_ns += stall;
            *self.stats[h].stall_hist.entry(stall_bucket(stall)).or_default() += 1;
            self.hosts[h].checker.release(id);
        }
        if let Some(f) = op.fault {
            *self.stats[h].faults.entry(f).or_default() += 1;
            self.event(
                op.host,
                op.core,
                SimEventKind::Fault {
                    fault: f,
                    write: op.write,
                    va: op.va,
                },
            );
            return Ok(());
        }
        let tag = op.ext.abits();
        if op.write {
            if tag != 0 && self.cfg.record_observations {
                self.taint.insert(op.value, ());
            }
            return Ok(());
        }
        if !self.cfg.record_observations {
            return Ok(());
        }
        let authorized = if op.remote {
            let page = (op.ext.pa() - self.cfg.sdm_base) >> PAGE_SHIFT;
            tag != 0 && enforce(op.ext, AccessKind::Read, self.table.lookup(page).0, op.host, false) == Decision::Allow
        } else {
            tag != 0
        };
        let obs = Observation {
            host: op.host,
            core: op.core,
            hwpid: tag,
            base_p: op.base_p,
            va: op.va,
            pa: op.ext.pa(),
            remote: op.remote,
            bytes: op.read,
            authorized,
        };
        if !authorized && obs.words().any(|w| self.taint.contains_key(&w)) {
            self.taint_leaks += 1;
        }
        self.observations.push(obs);
        Ok(())
    }

    fn finish(self) -> Result<RunOutput> {
        if !self.ops.is_empty() {
            return Err(Error::Protocol(format!("{} operations never completed", self.ops.len())));
        }
        if self.flits_in_flight != 0 {
            return Err(Error::Protocol(format!(
                "flit conservation violated ({} unmatched)",
                self.flits_in_flight
            )));
        }
        for (h, cores) in self.cores.iter().enumerate() {
            if cores.iter().any(|c| !c.records.is_empty()) {
                return Err(Error::Protocol(format!("host {h} has unissued records")));
            }
        }
        let lat = self.cfg.latency;
        let mut hosts = Vec::with_capacity(self.hosts.len());
        let mut audit = Vec::new();
        for (h, hs) in self.hosts.iter().enumerate() {
            let st = &self.stats[h];
            let cs = hs.checker.stats();
            let elapsed = self.cores[h].iter().map(|c| c.last_tick).max().unwrap_or(0);
            let cycles = lat.ns_to_cycles(elapsed);
            let checking = !matches!(self.cfg.backend, Backend::CxlBaseline);
            let sp = hs.space.counters();
            hosts.push(HostReport {
                host: h as u8,
                ops: st.records,
                mem_ops: st.mem_ops,
                remote_ops: st.remote_ops,
                local_ops: st.local_ops,
                elapsed_ns: elapsed,
                cycles,
                cpi_proxy: if st.records > 0 {
                    Some(cycles as f64 / st.records as f64)
                } else {
                    None
                },
                plpki: if checking && st.records > 0 {
                    Some(crate::metrics::compute_plpki(cs.lookups_issued, st.records)?)
                } else {
                    None
                },
                remote_trusted: cs.remote_trusted,
                perm_cache_hits: cs.cache_hits,
                perm_cache_misses: cs.cache_misses,
                delayed_hits: cs.delayed_hits,
                lookups_issued: cs.lookups_issued,
                probes_histogram: cs.probes.clone(),
                stall_histogram: st.stall_hist.clone(),
                creation_ns: st.creation_ns,
                lookup_ns: st.lookup_ns,
                enforcement_ns: st.stall_ns,
                perm_flits: st.perm_flits,
                data_flits: st.data_flits,
                bisnp_flits: st.bisnp_flits,
                fm_flits: st.fm_flits,
                faults: st.faults.iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect(),
                backpressure_ns: st.backpressure_ns,
                bisnp_evictions: cs.bisnp_evictions,
                context_switches: sp.context_switches,
                arm_refusals: sp.arm_refusals,
                validation_failures: sp.validation_failures,
                proposals_approved: st.proposals_approved,
                proposals_denied: st.proposals_denied,
                os_errors: st.os_errors,
                local_lookups: st.local_lookups,
            });
            audit.extend_from_slice(hs.checker.audit());
        }
        let caches = self
            .hosts
            .iter()
            .map(|h| h.checker.cache().resident_entries().copied().collect())
            .collect();
        let storage = storage_estimates(&self.cfg, self.table.len() as u64);
        let report = RunReport::new(self.cfg.clone(), hosts, storage, self.table.len() as u64);
        Ok(RunOutput {
            report,
            events: self.events,
            observations: self.observations,
            audit,
            table: self.table,
            taint_leaks: self.taint_leaks,
            caches,
        })
    }
}

/// Metadata storage of every backend for this configuration. Process
/// counts follow the desk-scale setup: one trusted process per host.
pub fn storage_estimates(cfg: &RunConfig, entries: u64) -> BTreeMap<String, StorageEstimate> {
    let pages = cfg.sdm_pages();
    let hosts = u64::from(cfg.hosts);
    let sc = storage_space_control(entries);
    let est = |bytes: u64| StorageEstimate {
        bytes,
        fraction_of_sdm: bytes as f64 / cfg.sdm_bytes as f64,
    };
    let mut m = BTreeMap::new();
    m.insert(Backend::SpaceControl.as_str().into(), est(sc));
    m.insert(Backend::CxlBaseline.as_str().into(), est(0));
    m.insert(Backend::FlatTable.as_str().into(), est(storage_flat_table(hosts, 1, pages)));
    m.insert(Backend::DeactLike.as_str().into(), est(storage_deact_like(pages, 256, 1)));
    m.insert(Backend::MondrianExt.as_str().into(), est(storage_mondrian_ext(hosts, sc)));
    m
}

/// Runs one configuration end to end.
pub fn run(cfg: RunConfig, traces: &[Vec<TraceRecord>]) -> Result<RunOutput> {
    Engine::new(cfg)?.run(traces)
}

pub fn run_with_table(cfg: RunConfig, table: Arc<PermissionTable>, traces: &[Vec<TraceRecord>]) -> Result<RunOutput> {
    Engine::with_table(cfg, table)?.run(traces)
}

pub fn schema_version() -> u32 {
    SCHEMA_VERSION
}
