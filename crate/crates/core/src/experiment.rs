//! Multi-run experiments. Runs are independent and execute through
//! [`crate::par::map`]; results are assembled in input order.

use std::sync::Arc;

use crate::error::Result;
use crate::metrics::{RunReport, SweepReport};
use crate::sim::{build_table, run_with_table, Backend, Layout, RunConfig};
use crate::table::PermissionTable;
use crate::trace::TraceRecord;

pub const DEFAULT_SWEEP_SIZES: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];

/// Permission-cache capacity sweep over one set of traces and one table.
pub fn sweep_cache(
    cfg: &RunConfig,
    sizes: &[usize],
    traces: &[Vec<TraceRecord>],
    table: Option<Arc<PermissionTable>>,
) -> Result<(SweepReport, Vec<RunReport>)> {
    let table = table.unwrap_or_else(|| Arc::new(build_table(cfg)));
    let runs: Vec<Result<(usize, RunReport)>> = crate::par::map(sizes, |&size| {
        let c = RunConfig {
            cache_entries: size,
            ..cfg.clone()
        };
        Ok((size, run_with_table(c, table.clone(), traces)?.report))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((SweepReport::from_runs(cfg.seed, &runs), runs.into_iter().map(|(_, r)| r).collect()))
}

/// The three configurations whose cycle counts are ordered: unchecked
/// baseline, single-entry table, worst-case table.
pub fn overhead_triplet(cfg: &RunConfig, traces: &[Vec<TraceRecord>], wc: Arc<PermissionTable>) -> Result<[RunReport; 3]> {
    let variants = [
        (Backend::CxlBaseline, Layout::OneEntry),
        (Backend::SpaceControl, Layout::OneEntry),
        (Backend::SpaceControl, Layout::WorstCase),
    ];
    let runs = crate::par::map(&variants, |&(backend, layout)| {
        let c = RunConfig {
            backend,
            layout,
            ..cfg.clone()
        };
        let table = if layout == Layout::WorstCase {
            wc.clone()
        } else {
            Arc::new(build_table(&c))
        };
        run_with_table(c, table, traces).map(|o| o.report)
    });
    let mut it = runs.into_iter();
    Ok([it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?])
}
