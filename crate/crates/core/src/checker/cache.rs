//! Fully-associative LRU permission cache.
//!
//! A miss allocates a pending line for the probed page right away, so the
//! resident key set evolves purely in request order. The fill later converts
//! the pending line in place without touching its LRU position.

use std::collections::BTreeMap;

use crate::addr::MemoryRange;
use crate::table::PermissionEntry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LineState {
    Pending,
    Resident(PermissionEntry),
}

#[derive(Clone, Copy, Debug)]
struct Line {
    end_page: u64,
    state: LineState,
    stamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheProbe {
    Hit(PermissionEntry),
    /// A lookup for this page is already outstanding.
    Pending,
    Miss,
}

#[derive(Clone, Debug)]
pub struct PermissionCache {
    capacity: usize,
    /// Keyed by first page; lines never overlap.
    lines: BTreeMap<u64, Line>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
    evictions: u64,
}

impl PermissionCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            lines: BTreeMap::new(),
            lru: BTreeMap::new(),
            clock: 0,
            evictions: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    fn find(&self, page: u64) -> Option<u64> {
        self.lines
            .range(..=page)
            .next_back()
            .filter(|(_, line)| page < line.end_page)
            .map(|(&start, _)| start)
    }

    /// Side-effect free lookup.
    pub fn peek(&self, page: u64) -> CacheProbe {
        match self.find(page).map(|s| self.lines[&s].state) {
            Some(LineState::Resident(e)) => CacheProbe::Hit(e),
            Some(LineState::Pending) => CacheProbe::Pending,
            None => CacheProbe::Miss,
        }
    }

    /// Lookup that refreshes the line's LRU position.
    pub fn probe(&mut self, page: u64) -> CacheProbe {
        let Some(start) = self.find(page) else {
            return CacheProbe::Miss;
        };
        self.clock += 1;
        let clock = self.clock;
        let line = self.lines.get_mut(&start).unwrap();
        self.lru.remove(&line.stamp);
        line.stamp = clock;
        self.lru.insert(clock, start);
        match line.state {
            LineState::Resident(e) => CacheProbe::Hit(e),
            LineState::Pending => CacheProbe::Pending,
        }
    }

    /// Reserves a line for an outstanding lookup of `page`.
    pub fn allocate_pending(&mut self, page: u64) {
        if self.capacity == 0 || self.find(page).is_some() {
            return;
        }
        while self.lines.len() >= self.capacity {
            let (&stamp, &victim) = self.lru.iter().next().expect("nonempty cache");
            self.lru.remove(&stamp);
            self.lines.remove(&victim);
            self.evictions += 1;
        }
        self.clock += 1;
        self.lines.insert(
            page,
            Line {
                end_page: page + 1,
                state: LineState::Pending,
                stamp: self.clock,
            },
        );
        self.lru.insert(self.clock, page);
    }

    /// Completes the pending line for `page`. Returns false when the line is
    /// gone (evicted or invalidated meanwhile), in which case nothing is cached.
    pub fn fill(&mut self, page: u64, entry: Option<PermissionEntry>) -> bool {
        let Some(line) = self.lines.get(&page).copied() else {
            return false;
        };
        if line.state != LineState::Pending {
            return false;
        }
        self.lines.remove(&page);
        self.lru.remove(&line.stamp);
        let Some(entry) = entry else {
            return false;
        };
        // Drop anything else the entry's range now covers.
        let covered: Vec<u64> = self
            .lines
            .range(..entry.range.end_page())
            .filter(|(_, l)| l.end_page > entry.range.start_page)
            .map(|(&s, _)| s)
            .collect();
        for s in covered {
            let l = self.lines.remove(&s).unwrap();
            self.lru.remove(&l.stamp);
        }
        self.lines.insert(
            entry.range.start_page,
            Line {
                end_page: entry.range.end_page(),
                state: LineState::Resident(entry),
                stamp: line.stamp,
            },
        );
        self.lru.insert(line.stamp, entry.range.start_page);
        true
    }

    /// Evicts every line overlapping `range`. Returns resident lines dropped.
    pub fn invalidate(&mut self, range: MemoryRange) -> usize {
        let hit: Vec<u64> = self
            .lines
            .range(..range.end_page())
            .filter(|(_, l)| l.end_page > range.start_page)
            .map(|(&s, _)| s)
            .collect();
        let mut resident = 0;
        for s in hit {
            let l = self.lines.remove(&s).unwrap();
            self.lru.remove(&l.stamp);
            if matches!(l.state, LineState::Resident(_)) {
                resident += 1;
            }
        }
        resident
    }

    pub fn resident_entries(&self) -> impl Iterator<Item = &PermissionEntry> {
        self.lines.values().filter_map(|l| match &l.state {
            LineState::Resident(e) => Some(e),
            LineState::Pending => None,
        })
    }
}
