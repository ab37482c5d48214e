//! Simulated host: SPACE, the egress checker, local memory, and an
//! untrusted OS that owns the virtual-to-physical maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::addr::{PAGE_SHIFT, PAGE_SIZE};
use crate::checker::{CheckerAblation, CheckerConfig, PermissionChecker};
use crate::mac::{derive_key, AuthLabel};
use crate::mem::LocalMemory;
use crate::space::{SpaceAblation, SpaceEngine};

/// One value returned to a context by a committed load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub host: u8,
    pub core: u8,
    pub hwpid: u8,
    pub base_p: u64,
    pub va: u64,
    pub pa: u64,
    pub remote: bool,
    pub bytes: Vec<u8>,
    /// Whether this context held a right to read the location.
    pub authorized: bool,
}

impl Observation {
    /// Aligned 8-byte words contained in the observed bytes.
    pub fn words(&self) -> impl Iterator<Item = u64> + '_ {
        self.bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()))
    }
}

#[derive(Debug)]
pub struct HostState {
    pub id: u8,
    pub space: SpaceEngine,
    pub checker: PermissionChecker,
    pub local: LocalMemory,
    va_maps: BTreeMap<u64, BTreeMap<u64, u64>>,
    /// Simulator-side activation count per core, used to find labels armed
    /// in an earlier epoch for replay directives.
    epoch: Vec<u64>,
    armed: Vec<Vec<(u64, AuthLabel)>>,
}

impl HostState {
    pub fn new(id: u8, cores: u8, seed: u64, checker_cfg: CheckerConfig, checker_ab: CheckerAblation, space_ab: SpaceAblation) -> Self {
        let k_host = derive_key("host", u64::from(id), seed);
        Self {
            id,
            space: SpaceEngine::new(id, usize::from(cores), k_host).with_ablation(space_ab),
            checker: PermissionChecker::new(id, checker_cfg).with_ablation(checker_ab),
            local: LocalMemory::new(id, seed),
            va_maps: BTreeMap::new(),
            epoch: vec![0; usize::from(cores)],
            armed: vec![Vec::new(); usize::from(cores)],
        }
    }

    /// Flat translation: explicit OS mappings first, identity otherwise.
    pub fn translate(&self, base_p: u64, va: u64) -> u64 {
        let vpage = va >> PAGE_SHIFT;
        match self.va_maps.get(&base_p).and_then(|m| m.get(&vpage)) {
            Some(&ppage) => (ppage << PAGE_SHIFT) | (va & (PAGE_SIZE - 1)),
            None => va,
        }
    }

    pub fn map(&mut self, base_p: u64, vpage: u64, ppage: u64) {
        self.va_maps.entry(base_p).or_default().insert(vpage, ppage);
    }

    pub fn unmap(&mut self, base_p: u64, vpage: u64) {
        if let Some(m) = self.va_maps.get_mut(&base_p) {
            m.remove(&vpage);
        }
    }

    pub fn note_context_switch(&mut self, core: u8) {
        if let Some(e) = self.epoch.get_mut(usize::from(core)) {
            *e += 1;
        }
    }

    pub fn note_armed(&mut self, core: u8) {
        let c = usize::from(core);
        if let (Some(label), Some(&epoch)) = (self.space.label_register(core), self.epoch.get(c)) {
            self.armed[c].push((epoch, label));
        }
    }

    /// Most recent label armed on `core` in an earlier activation epoch.
    pub fn stale_label(&self, core: u8) -> Option<AuthLabel> {
        let c = usize::from(core);
        let now = *self.epoch.get(c)?;
        self.armed[c].iter().rev().find(|(e, _)| *e < now).map(|&(_, l)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{Context, Ring};

    fn host() -> HostState {
        HostState::new(
            0,
            2,
            1,
            CheckerConfig::new(1 << 40, 1 << 30, 8),
            CheckerAblation::default(),
            SpaceAblation::default(),
        )
    }

    #[test]
    fn translation_defaults_to_identity() {
        let mut h = host();
        assert_eq!(h.translate(7, 0x1234), 0x1234);
        h.map(7, 1, 0x99);
        assert_eq!(h.translate(7, 0x1234), 0x99234);
        assert_eq!(h.translate(8, 0x1234), 0x1234);
        h.unmap(7, 1);
        assert_eq!(h.translate(7, 0x1234), 0x1234);
    }

    #[test]
    fn stale_label_comes_from_an_earlier_epoch() {
        let mut h = host();
        h.space.get_next_pid().unwrap();
        h.note_context_switch(0);
        h.space
            .on_context_switch(0, Context::new(0, 0, 1, 0x1000, Ring::User).unwrap())
            .unwrap();
        h.space.arm_label(0, Ring::User).unwrap();
        h.note_armed(0);
        assert_eq!(h.stale_label(0), None);
        let first = h.space.label_register(0);
        h.note_context_switch(0);
        h.space
            .on_context_switch(0, Context::new(0, 0, 1, 0x1000, Ring::User).unwrap())
            .unwrap();
        assert_eq!(h.stale_label(0), first);
    }
}
