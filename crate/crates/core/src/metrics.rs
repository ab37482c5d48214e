//! Run reports, derived metrics and JSON/CSV export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Backend, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Lower bound of the power-of-two bucket holding `ns`; zero is its own bucket.
pub fn stall_bucket(ns: u64) -> u64 {
    if ns == 0 {
        0
    } else {
        1 << (63 - ns.leading_zeros())
    }
}

pub fn compute_plpki(lookups: u64, ops: u64) -> Result<f64> {
    if ops == 0 {
        return Err(Error::UndefinedMetric("PLPKI needs at least one op".into()));
    }
    Ok(lookups as f64 * 1000.0 / ops as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageEstimate {
    pub bytes: u64,
    pub fraction_of_sdm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostReport {
    pub host: u8,
    /// Trace records retired.
    pub ops: u64,
    pub mem_ops: u64,
    pub remote_ops: u64,
    pub local_ops: u64,
    pub elapsed_ns: u64,
    pub cycles: u64,
    pub cpi_proxy: Option<f64>,
    pub plpki: Option<f64>,
    pub remote_trusted: u64,
    pub perm_cache_hits: u64,
    pub perm_cache_misses: u64,
    pub delayed_hits: u64,
    pub lookups_issued: u64,
    pub probes_histogram: BTreeMap<u32, u64>,
    /// Power-of-two ns buckets of enforcement stall per checked access.
    pub stall_histogram: BTreeMap<u64, u64>,
    pub creation_ns: u64,
    pub lookup_ns: u64,
    pub enforcement_ns: u64,
    pub perm_flits: u64,
    pub data_flits: u64,
    pub bisnp_flits: u64,
    pub fm_flits: u64,
    pub faults: BTreeMap<String, u64>,
    pub backpressure_ns: u64,
    pub bisnp_evictions: u64,
    pub context_switches: u64,
    pub arm_refusals: u64,
    pub validation_failures: u64,
    pub proposals_approved: u64,
    pub proposals_denied: u64,
    pub os_errors: u64,
    pub local_lookups: u64,
}

impl HostReport {
    pub fn hit_ratio(&self) -> Option<f64> {
        let n = self.perm_cache_hits + self.perm_cache_misses;
        (n > 0).then(|| self.perm_cache_hits as f64 / n as f64)
    }

    pub fn fault_count(&self) -> u64 {
        self.faults.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub ops: u64,
    pub cycles_sum: u64,
    pub cycles_max: u64,
    pub remote_trusted: u64,
    pub perm_cache_hits: u64,
    pub perm_cache_misses: u64,
    pub lookups_issued: u64,
    pub perm_flits: u64,
    pub data_flits: u64,
    pub faults: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub creation: f64,
    pub lookup: f64,
    pub enforcement: f64,
}

impl Breakdown {
    pub fn dominant(&self) -> &'static str {
        if self.enforcement >= self.lookup && self.enforcement >= self.creation {
            "enforcement"
        } else if self.lookup >= self.creation {
            "lookup"
        } else {
            "creation"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub backend: Backend,
    pub config: RunConfig,
    pub hosts: Vec<HostReport>,
    pub totals: Totals,
    pub table_entries: u64,
    pub storage_overhead: BTreeMap<String, StorageEstimate>,
    pub breakdown: Option<Breakdown>,
}

impl RunReport {
    pub fn new(config: RunConfig, hosts: Vec<HostReport>, storage_overhead: BTreeMap<String, StorageEstimate>, table_entries: u64) -> Self {
        let sum = |f: fn(&HostReport) -> u64| hosts.iter().map(f).sum::<u64>();
        let totals = Totals {
            ops: sum(|h| h.ops),
            cycles_sum: sum(|h| h.cycles),
            cycles_max: hosts.iter().map(|h| h.cycles).max().unwrap_or(0),
            remote_trusted: sum(|h| h.remote_trusted),
            perm_cache_hits: sum(|h| h.perm_cache_hits),
            perm_cache_misses: sum(|h| h.perm_cache_misses),
            lookups_issued: sum(|h| h.lookups_issued),
            perm_flits: sum(|h| h.perm_flits),
            data_flits: sum(|h| h.data_flits),
            faults: sum(|h| h.fault_count()),
        };
        let mut r = Self {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            backend: config.backend,
            config,
            hosts,
            totals,
            table_entries,
            storage_overhead,
            breakdown: None,
        };
        r.breakdown = latency_breakdown(&r);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema version {}", r.schema_version)));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Overall hit ratio across hosts.
    pub fn hit_ratio(&self) -> Option<f64> {
        let n = self.totals.perm_cache_hits + self.totals.perm_cache_misses;
        (n > 0).then(|| self.totals.perm_cache_hits as f64 / n as f64)
    }

    pub fn miss_ratio(&self) -> Option<f64> {
        self.hit_ratio().map(|h| 1.0 - h)
    }

    /// Writes one CSV per histogram plus a per-host summary and traffic
    /// split. Returns the files written.
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();

        let path = dir.join("probes.csv");
        let mut w = writer(&path)?;
        row(&mut w, &path, ["host", "probes", "count"])?;
        for h in &self.hosts {
            for (p, c) in &h.probes_histogram {
                row(&mut w, &path, [h.host.to_string(), p.to_string(), c.to_string()])?;
            }
        }
        finish(w, &path)?;
        out.push(path);

        let path = dir.join("stall.csv");
        let mut w = writer(&path)?;
        row(&mut w, &path, ["host", "bucket_ns", "count"])?;
        for h in &self.hosts {
            for (b, c) in &h.stall_histogram {
                row(&mut w, &path, [h.host.to_string(), b.to_string(), c.to_string()])?;
            }
        }
        finish(w, &path)?;
        out.push(path);

        let path = dir.join("traffic.csv");
        let mut w = writer(&path)?;
        row(&mut w, &path, ["host", "perm_flits", "data_flits", "bisnp_flits", "fm_flits"])?;
        for h in &self.hosts {
            row(
                &mut w,
                &path,
                [
                    h.host.to_string(),
                    h.perm_flits.to_string(),
                    h.data_flits.to_string(),
                    h.bisnp_flits.to_string(),
                    h.fm_flits.to_string(),
                ],
            )?;
        }
        finish(w, &path)?;
        out.push(path);

        let path = dir.join("hosts.csv");
        let mut w = writer(&path)?;
        row(
            &mut w,
            &path,
            ["host", "ops", "cycles", "cpi_proxy", "plpki", "hits", "misses", "lookups", "faults"],
        )?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for h in &self.hosts {
            row(
                &mut w,
                &path,
                [
                    h.host.to_string(),
                    h.ops.to_string(),
                    h.cycles.to_string(),
                    opt(h.cpi_proxy),
                    opt(h.plpki),
                    h.perm_cache_hits.to_string(),
                    h.perm_cache_misses.to_string(),
                    h.lookups_issued.to_string(),
                    h.fault_count().to_string(),
                ],
            )?;
        }
        finish(w, &path)?;
        out.push(path);
        Ok(out)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn row<I, T>(w: &mut csv::Writer<std::fs::File>, path: &Path, rec: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(rec).map_err(|e| csv_err(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Shares of permission-request creation, lookup and enforcement stall.
/// `None` when the run has no permission machinery or no checked traffic.
pub fn latency_breakdown(report: &RunReport) -> Option<Breakdown> {
    if report.backend == Backend::CxlBaseline {
        return None;
    }
    let c: u64 = report.hosts.iter().map(|h| h.creation_ns).sum();
    let l: u64 = report.hosts.iter().map(|h| h.lookup_ns).sum();
    let e: u64 = report.hosts.iter().map(|h| h.enforcement_ns).sum();
    let total = (c + l + e) as f64;
    if total == 0.0 {
        return None;
    }
    let creation = c as f64 / total;
    let lookup = l as f64 / total;
    Some(Breakdown {
        creation,
        lookup,
        enforcement: 1.0 - creation - lookup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub cache_entries: usize,
    pub hits: u64,
    pub misses: u64,
    pub miss_ratio: f64,
    pub cycles_max: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn from_runs(seed: u64, runs: &[(usize, RunReport)]) -> Self {
        let points = runs
            .iter()
            .map(|(size, r)| SweepPoint {
                cache_entries: *size,
                hits: r.totals.perm_cache_hits,
                misses: r.totals.perm_cache_misses,
                miss_ratio: r.miss_ratio().unwrap_or(0.0),
                cycles_max: r.totals.cycles_max,
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            points,
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].misses <= w[0].misses)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run, RunConfig, WorkloadConfig, DEFAULT_SDM_BASE};
    use crate::trace::parse_trace;

    fn report() -> RunReport {
        let cfg = RunConfig {
            sdm_bytes: 64 << 20,
            workload: WorkloadConfig {
                pages: 2048,
                ops: 1500,
                ..Default::default()
            },
            layout: crate::sim::Layout::WorstCase,
            ..Default::default()
        };
        let traces = cfg.generate_traces().unwrap();
        run(cfg, &traces).unwrap().report
    }

    #[test]
    fn plpki_values() {
        assert_eq!(compute_plpki(5, 1000).unwrap(), 5.0);
        assert_eq!(compute_plpki(0, 7).unwrap(), 0.0);
        assert!(matches!(compute_plpki(1, 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn plpki_matches_audit_recount() {
        let cfg = RunConfig {
            sdm_bytes: 64 << 20,
            layout: crate::sim::Layout::WorstCase,
            cache_entries: 4,
            ..Default::default()
        };
        let t = format!(
            "CTXSW 0 0 0x1000 1 user\nARM 0 0 user\nLD 0 0 {:#x} 8\nLD 0 0 {:#x} 8\nLD 0 0 {:#x} 8\n",
            DEFAULT_SDM_BASE,
            DEFAULT_SDM_BASE + 8,
            DEFAULT_SDM_BASE + (3 << 12)
        );
        let out = run(cfg, &[parse_trace(&t).unwrap()]).unwrap();
        // Independent recount: distinct pages in the audit log, no evictions.
        let mut pages: Vec<u64> = out
            .audit
            .iter()
            .map(|a| ((a.ext & crate::addr::PA_MASK) - DEFAULT_SDM_BASE) >> 12)
            .collect();
        pages.dedup();
        let h = &out.report.hosts[0];
        assert_eq!(h.plpki.unwrap(), pages.len() as f64 * 1000.0 / h.ops as f64);
    }

    #[test]
    fn buckets() {
        assert_eq!(stall_bucket(0), 0);
        assert_eq!(stall_bucket(1), 1);
        assert_eq!(stall_bucket(40), 32);
        assert_eq!(stall_bucket(64), 64);
        assert_eq!(stall_bucket(u64::MAX), 1 << 63);
    }

    #[test]
    fn report_invariants_and_breakdown() {
        let r = report();
        for h in &r.hosts {
            assert_eq!(h.perm_cache_hits + h.perm_cache_misses, h.remote_trusted);
            assert_eq!(h.probes_histogram.values().sum::<u64>(), h.lookups_issued);
        }
        let b = r.breakdown.unwrap();
        assert!((b.creation + b.lookup + b.enforcement - 1.0).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_and_stability() {
        let r = report();
        let a = r.to_json().unwrap();
        let back = RunReport::from_json(&a).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), a);
    }

    #[test]
    fn csv_rows_match_bins() {
        let r = report();
        let dir = tempfile::tempdir().unwrap();
        let files = r.export_csv(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let rows = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap().lines().count() - 1;
        let probe_bins: usize = r.hosts.iter().map(|h| h.probes_histogram.len()).sum();
        let stall_bins: usize = r.hosts.iter().map(|h| h.stall_histogram.len()).sum();
        assert_eq!(rows("probes.csv"), probe_bins);
        assert_eq!(rows("stall.csv"), stall_bins);
        let first = std::fs::read(dir.path().join("stall.csv")).unwrap();
        r.export_csv(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("stall.csv")).unwrap(), first);
    }

    #[test]
    fn baseline_has_no_breakdown() {
        let cfg = RunConfig {
            backend: Backend::CxlBaseline,
            sdm_bytes: 64 << 20,
            workload: WorkloadConfig {
                pages: 512,
                ops: 200,
                ..Default::default()
            },
            ..Default::default()
        };
        let traces = cfg.generate_traces().unwrap();
        assert_eq!(run(cfg, &traces).unwrap().report.breakdown, None);
    }

    #[test]
    fn export_error_names_path() {
        let r = report();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("f");
        std::fs::write(&blocker, "x").unwrap();
        let err = r.export_csv(&blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("sub"), "{err}");
    }
}
