//! Self-check suite behind `sdmsim verify`: oracle comparisons, structural
//! arithmetic and the attack suite, at sizes that finish in seconds.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{MemoryRange, PermissionAttrs};
use crate::attack::run_suite;
use crate::error::Result;
use crate::experiment::sweep_cache;
use crate::fm::{FabricManager, Grant, Policy};
use crate::mac::rfc4231_self_test;
use crate::sim::{self, build_table, Layout, RunConfig, WorkloadConfig, GIB};
use crate::table::{HostSet, HwpidSet, PagePermission, PermissionEntry, PermissionTable};
use crate::trace::Pattern;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(u64) -> Result<(bool, String)>;

const CHECKS: [(&str, CheckFn); 9] = [
    ("hmac-rfc4231", check_mac),
    ("storage-arithmetic", check_storage),
    ("lookup-oracle", check_lookup),
    ("lookup-probe-bound", check_probe_bound),
    ("table-maintenance", check_maintenance),
    ("cache-sweep-monotone", check_sweep),
    ("attack-suite", check_attacks),
    ("revocation-quiescence", check_revocation),
    ("determinism", check_determinism),
];

pub fn run_all(seed: u64) -> Vec<Check> {
    crate::par::map(&CHECKS, |&(name, f)| match f(seed) {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    })
}

fn check_mac(_: u64) -> Result<(bool, String)> {
    Ok((rfc4231_self_test(), "7 RFC 4231 cases".into()))
}

fn check_storage(_: u64) -> Result<(bool, String)> {
    let pages = (16 * GIB) >> 12;
    let sc = sim::storage_space_control(pages);
    let flat = sim::storage_flat_table(256, 128, pages);
    let deact1 = sim::storage_deact_like(pages, 256, 1);
    let deact128 = sim::storage_deact_like(pages, 256, 128);
    let ok = sc == 256 << 20 && flat == 32 * GIB && deact1 == 160 << 20 && deact128 == 20 * GIB;
    Ok((ok, format!("space-control {sc} B, flat {flat} B, deact {deact1} B / {deact128} B")))
}

/// Disjoint sorted entries with random gaps and lengths.
pub fn random_table(rng: &mut impl Rng, max_entries: usize, universe: u64) -> PermissionTable {
    let n = rng.random_range(0..=max_entries);
    let mut entries = Vec::with_capacity(n);
    let mut next = 0u64;
    for _ in 0..n {
        let start = next + rng.random_range(0..8);
        let len = rng.random_range(1..16);
        if start + len > universe {
            break;
        }
        let e = PermissionEntry::grant(
            MemoryRange::new(start, len).unwrap(),
            PermissionAttrs::RW,
            rng.random_range(0..4),
            rng.random_range(1..4),
        );
        entries.push(e);
        next = start + len;
    }
    PermissionTable::from_entries(entries, universe as usize).expect("generated entries are disjoint")
}

fn probe_bound(n: usize) -> u32 {
    if n == 0 {
        0
    } else {
        usize::BITS - n.leading_zeros()
    }
}

fn check_lookup(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0;
    for _ in 0..200 {
        let t = random_table(&mut rng, 300, 1 << 14);
        for _ in 0..200 {
            let page = rng.random_range(0..1 << 14);
            let (got, probes) = t.lookup(page);
            let want = t.entries().iter().find(|e| e.range.contains(page));
            if got != want || probes > probe_bound(t.len()) {
                return Ok((
                    false,
                    format!("page {page}: {got:?} vs {want:?}, {probes} probes over {} entries", t.len()),
                ));
            }
            worst = worst.max(probes);
        }
    }
    Ok((true, format!("40000 lookups agree, max {worst} probes")))
}

fn check_probe_bound(seed: u64) -> Result<(bool, String)> {
    let pages = (16 * GIB) >> 12;
    let t = PermissionTable::worst_case(pages, PermissionAttrs::RW, HostSet::single(0), HwpidSet::single(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0;
    for p in (0..2000).map(|_| rng.random_range(0..pages)).chain([0, pages - 1]) {
        let (e, probes) = t.lookup(p);
        if e.is_none_or(|e| !e.range.contains(p)) {
            return Ok((false, format!("page {p} not found")));
        }
        worst = worst.max(probes);
    }
    Ok((worst <= 24, format!("{} entries, max {worst} probes", t.len())))
}

fn check_maintenance(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let universe = 256u64;
    for seq in 0..100 {
        let mut table = PermissionTable::new(universe as usize);
        let mut fm = FabricManager::new([3; 32], Policy::AllowAll, universe);
        let mut live: Vec<Grant> = Vec::new();
        for _ in 0..30 {
            let start = rng.random_range(0..universe - 1);
            let range = MemoryRange::new(start, rng.random_range(1..=(universe - start).min(40)))?;
            let (host, hwpid) = (rng.random_range(0..3u8), rng.random_range(1..4u8));
            if rng.random_bool(0.65) || live.is_empty() {
                let attrs = [PermissionAttrs::R, PermissionAttrs::W, PermissionAttrs::RW][rng.random_range(0..3)];
                let g = Grant {
                    host,
                    hwpid,
                    base_p: 0,
                    range,
                    attrs,
                };
                fm.commit_and_broadcast(&mut table, g, &[])?;
                live.push(g);
            } else {
                let g = live[rng.random_range(0..live.len())];
                fm.revoke(&mut table, g.host, g.hwpid, range.intersect(&g.range).unwrap_or(g.range), &[])?;
                let cut = range.intersect(&g.range).unwrap_or(g.range);
                live = live
                    .into_iter()
                    .flat_map(|x| {
                        if x.host != g.host || x.hwpid != g.hwpid || !x.range.overlaps(&cut) {
                            return vec![x];
                        }
                        [
                            MemoryRange::from_bounds(x.range.start_page, cut.start_page.max(x.range.start_page)),
                            MemoryRange::from_bounds(cut.end_page().min(x.range.end_page()), x.range.end_page()),
                        ]
                        .into_iter()
                        .flatten()
                        .map(|r| Grant { range: r, ..x })
                        .collect()
                    })
                    .collect();
            }
            table.check_invariants()?;
            let mut oracle: BTreeMap<u64, PagePermission> = BTreeMap::new();
            for g in &live {
                for p in g.range.start_page..g.range.end_page() {
                    let pp = PermissionEntry::grant(g.range, g.attrs, g.host, g.hwpid).payload();
                    oracle.entry(p).and_modify(|o| *o = o.merge(pp)).or_insert(pp);
                }
            }
            for p in 0..universe {
                let got = table.lookup(p).0.map(|e| e.payload());
                if got != oracle.get(&p).copied() {
                    return Ok((false, format!("sequence {seq}: page {p} diverged")));
                }
            }
        }
    }
    Ok((true, "100 sequences x 30 steps match the page map".into()))
}

fn check_sweep(seed: u64) -> Result<(bool, String)> {
    let cfg = RunConfig {
        seed,
        layout: Layout::WorstCase,
        sdm_bytes: 256 << 20,
        workload: WorkloadConfig {
            pattern: Pattern::Mixed,
            pages: 1 << 16,
            ops: 8000,
            ..Default::default()
        },
        ..Default::default()
    };
    let traces = cfg.generate_traces()?;
    let (sweep, _) = sweep_cache(&cfg, &[8, 32, 128, 512], &traces, None)?;
    let ratios: Vec<String> = sweep
        .points
        .iter()
        .map(|p| format!("{}:{:.4}", p.cache_entries, p.miss_ratio))
        .collect();
    Ok((sweep.is_monotone(), ratios.join(" ")))
}

fn check_attacks(_: u64) -> Result<(bool, String)> {
    let verdicts = run_suite(true)?;
    let (defended, ablated) = verdicts.split_at(verdicts.len() / 2);
    let leaks: u64 = defended.iter().map(|v| v.taint_leaks).sum();
    let ok = defended.iter().all(|v| v.passed) && ablated.iter().all(|v| !v.passed) && leaks == 0;
    let failed: Vec<_> = defended.iter().filter(|v| !v.passed).map(|v| v.kind.as_str()).collect();
    Ok((ok, format!("defended failures {failed:?}, taint leaks {leaks}")))
}

/// Every resident cache entry still agrees with the table once all
/// invalidations have been delivered.
pub fn caches_are_coherent(out: &sim::RunOutput) -> bool {
    out.caches
        .iter()
        .flatten()
        .all(|e| (e.range.start_page..e.range.end_page()).all(|p| out.table.lookup(p).0.map(|t| t.payload()) == Some(e.payload())))
}

fn check_revocation(seed: u64) -> Result<(bool, String)> {
    let cfg = RunConfig {
        seed,
        hosts: 2,
        layout: Layout::WorstCase,
        sdm_bytes: 64 << 20,
        workload: WorkloadConfig {
            pattern: Pattern::Random,
            pages: 64,
            ops: 400,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut traces = cfg.generate_traces()?;
    // Host 0 narrows its own grant partway through.
    let cut = traces[0].len() / 2;
    traces[0].insert(
        cut,
        crate::trace::TraceRecord::new(
            0,
            0,
            crate::trace::RecordKind::Revoke {
                hwpid: 1,
                start_page: 0,
                pages: 16,
            },
        ),
    );
    let out = sim::run_with_table(cfg.clone(), Arc::new(build_table(&cfg)), &traces)?;
    let ok = caches_are_coherent(&out) && out.report.hosts.iter().all(|h| h.bisnp_flits > 0);
    Ok((
        ok,
        format!("{} cached entries audited", out.caches.iter().map(Vec::len).sum::<usize>()),
    ))
}

fn check_determinism(seed: u64) -> Result<(bool, String)> {
    let cfg = RunConfig {
        seed,
        hosts: 2,
        cores: 2,
        layout: Layout::WorstCase,
        sdm_bytes: 64 << 20,
        workload: WorkloadConfig {
            pattern: Pattern::Frontier,
            pages: 8192,
            ops: 4000,
            ..Default::default()
        },
        ..Default::default()
    };
    let traces = cfg.generate_traces()?;
    let a = sim::run(cfg.clone(), &traces)?.report.to_json()?;
    let b = sim::run(cfg, &traces)?.report.to_json()?;
    Ok((a == b, format!("{} byte report", a.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_all(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn probe_bound_is_floor_log2_plus_one() {
        assert_eq!(probe_bound(1), 1);
        assert_eq!(probe_bound(2), 2);
        assert_eq!(probe_bound(3), 2);
        assert_eq!(probe_bound(4_194_304), 23);
    }
}
