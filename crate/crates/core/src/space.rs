//! Per-host context authentication engine.
//!
//! The engine owns the host key, the HWPID free list, one monotonic counter
//! per core, the per-core label register and authentication flag, and a cache
//! of FM-issued expected labels keyed by HWPID.
//!
//! Validation compares the armed label register against the host-side label
//! the FM-authorized context would produce in the current activation epoch.
//! That value only exists while an expected label is installed for the HWPID,
//! and it is derived from the address-space root the expected label was
//! issued for, so a context with a foreign `BASE_P` never validates.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::addr::{Context, Ring, MAX_HWPID};
use crate::error::{Error, Result};
use crate::mac::{host_label_message, mac64, AuthLabel, Key};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpaceAblation {
    /// Counter never advances; disables replay protection.
    pub freeze_ctr: bool,
    /// `ARM_LABEL` is honoured from any ring.
    pub allow_privileged_arm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmOutcome {
    Armed,
    Refused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ExpectedLabel {
    label: AuthLabel,
    base_p: u64,
}

#[derive(Clone, Debug, Default)]
struct CoreSlot {
    ctr: u64,
    label_register: Option<AuthLabel>,
    auth_result: bool,
    active: Option<Context>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SpaceCounters {
    pub context_switches: u64,
    pub arms: u64,
    pub arm_refusals: u64,
    pub validations: u64,
    pub validation_failures: u64,
}

#[derive(Clone, Debug)]
pub struct SpaceEngine {
    host_id: u8,
    k_host: Key,
    /// Bit i set = HWPID i allocated. Bit 0 is never set.
    allocated: u128,
    expected: BTreeMap<u8, ExpectedLabel>,
    cores: Vec<CoreSlot>,
    ablation: SpaceAblation,
    counters: SpaceCounters,
}

/// `MAC_{K_host}(BASE_P, HWPID, core, ctr)` truncated to 64 bits.
pub fn compute_host_label(base_p: u64, hwpid: u8, core_id: u8, ctr: u64, k_host: &Key) -> AuthLabel {
    AuthLabel(mac64(k_host, &host_label_message(base_p, hwpid, core_id, ctr)))
}

impl SpaceEngine {
    pub fn new(host_id: u8, cores: usize, k_host: Key) -> Self {
        Self {
            host_id,
            k_host,
            allocated: 0,
            expected: BTreeMap::new(),
            cores: vec![CoreSlot::default(); cores],
            ablation: SpaceAblation::default(),
            counters: SpaceCounters::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: SpaceAblation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn host_id(&self) -> u8 {
        self.host_id
    }

    pub fn counters(&self) -> &SpaceCounters {
        &self.counters
    }

    fn core(&self, core: u8) -> Result<&CoreSlot> {
        self.cores
            .get(usize::from(core))
            .ok_or_else(|| Error::Argument(format!("core {core} out of range")))
    }

    fn core_mut(&mut self, core: u8) -> Result<&mut CoreSlot> {
        self.cores
            .get_mut(usize::from(core))
            .ok_or_else(|| Error::Argument(format!("core {core} out of range")))
    }

    pub fn is_allocated(&self, hwpid: u8) -> bool {
        hwpid != 0 && hwpid <= MAX_HWPID && self.allocated & (1u128 << hwpid) != 0
    }

    pub fn allocated_hwpids(&self) -> impl Iterator<Item = u8> + '_ {
        (1..=MAX_HWPID).filter(|&h| self.is_allocated(h))
    }

    pub fn free_count(&self) -> u32 {
        u32::from(MAX_HWPID) - self.allocated.count_ones()
    }

    /// `GET_NEXT_PID()` doorbell: lowest free HWPID.
    pub fn get_next_pid(&mut self) -> Result<u8> {
        let hwpid = (1..=MAX_HWPID)
            .find(|&h| self.allocated & (1u128 << h) == 0)
            .ok_or_else(|| Error::ResourceExhausted(format!("host {} has no free HWPID", self.host_id)))?;
        self.allocated |= 1u128 << hwpid;
        Ok(hwpid)
    }

    pub fn release_pid(&mut self, hwpid: u8) -> Result<()> {
        if !self.is_allocated(hwpid) {
            return Err(Error::State(format!("hwpid {hwpid} is not allocated")));
        }
        self.allocated &= !(1u128 << hwpid);
        self.expected.remove(&hwpid);
        self.drop_authentication(hwpid);
        Ok(())
    }

    pub fn on_context_switch(&mut self, core: u8, context: Context) -> Result<()> {
        let freeze = self.ablation.freeze_ctr;
        let slot = self.core_mut(core)?;
        slot.active = Some(context);
        if !freeze {
            slot.ctr += 1;
        }
        slot.label_register = None;
        slot.auth_result = false;
        self.counters.context_switches += 1;
        Ok(())
    }

    /// `ARM_LABEL` doorbell. Only honoured from user space.
    pub fn arm_label(&mut self, core: u8, ring: Ring) -> Result<ArmOutcome> {
        let allow_privileged = self.ablation.allow_privileged_arm;
        let k_host = self.k_host;
        let slot = self.core_mut(core)?;
        if let Some(active) = slot.active.as_mut() {
            active.ring = ring;
        }
        if ring != Ring::User && !allow_privileged {
            slot.label_register = None;
            slot.auth_result = false;
            self.counters.arm_refusals += 1;
            return Ok(ArmOutcome::Refused);
        }
        let Some(active) = slot.active else {
            self.counters.arm_refusals += 1;
            return Ok(ArmOutcome::Refused);
        };
        slot.label_register = Some(compute_host_label(active.base_p, active.hwpid, core, slot.ctr, &k_host));
        self.counters.arms += 1;
        Ok(ArmOutcome::Armed)
    }

    pub fn validate_context(&mut self, core: u8) -> Result<bool> {
        self.counters.validations += 1;
        let ok = {
            let slot = self.core(core)?;
            match (slot.label_register, slot.active) {
                (Some(reg), Some(active)) => self
                    .expected
                    .get(&active.hwpid)
                    .map(|exp| reg == compute_host_label(exp.base_p, active.hwpid, core, slot.ctr, &self.k_host))
                    .unwrap_or(false),
                _ => false,
            }
        };
        let slot = self.core_mut(core)?;
        slot.auth_result = ok;
        if !ok {
            self.counters.validation_failures += 1;
        }
        Ok(ok)
    }

    /// Stores the FM-issued label for `hwpid`, bound to the address-space root
    /// it was issued for. Cores currently running `hwpid` must re-arm.
    pub fn install_expected_label(&mut self, hwpid: u8, label: AuthLabel, base_p: u64) -> Result<()> {
        if !self.is_allocated(hwpid) {
            return Err(Error::State(format!("hwpid {hwpid} is not allocated")));
        }
        self.expected.insert(hwpid, ExpectedLabel { label, base_p });
        self.drop_authentication(hwpid);
        Ok(())
    }

    pub fn remove_expected_label(&mut self, hwpid: u8) {
        if self.expected.remove(&hwpid).is_some() {
            self.drop_authentication(hwpid);
        }
    }

    pub fn expected_label(&self, hwpid: u8) -> Option<AuthLabel> {
        self.expected.get(&hwpid).map(|e| e.label)
    }

    fn drop_authentication(&mut self, hwpid: u8) {
        for slot in &mut self.cores {
            if slot.active.map(|c| c.hwpid) == Some(hwpid) {
                slot.label_register = None;
                slot.auth_result = false;
            }
        }
    }

    /// Simulator hook standing in for an adversary that manages to place a
    /// previously observed label into the label register.
    pub fn inject_label(&mut self, core: u8, label: AuthLabel) -> Result<()> {
        self.core_mut(core)?.label_register = Some(label);
        Ok(())
    }

    pub fn label_register(&self, core: u8) -> Option<AuthLabel> {
        self.cores.get(usize::from(core)).and_then(|s| s.label_register)
    }

    pub fn auth_result(&self, core: u8) -> bool {
        self.cores.get(usize::from(core)).is_some_and(|s| s.auth_result)
    }

    pub fn ctr(&self, core: u8) -> u64 {
        self.cores.get(usize::from(core)).map_or(0, |s| s.ctr)
    }

    pub fn active_context(&self, core: u8) -> Option<Context> {
        self.cores.get(usize::from(core)).and_then(|s| s.active)
    }

    /// HWPID used to tag memory operations issued by `core`, 0 if untrusted.
    pub fn tag_for(&self, core: u8) -> u8 {
        match self.cores.get(usize::from(core)) {
            Some(slot) if slot.auth_result => slot.active.map_or(0, |c| c.hwpid),
            _ => 0,
        }
    }

    /// Label register never holds a value while the core is outside user space.
    pub fn register_ring_invariant_holds(&self) -> bool {
        self.ablation.allow_privileged_arm
            || self
                .cores
                .iter()
                .all(|s| s.label_register.is_none() || s.active.is_some_and(|c| c.ring == Ring::User))
    }

    /// Persistent state in bytes: key, per-core counters, free list and
    /// cached expected labels.
    pub fn storage_bytes(&self) -> usize {
        32 + 8 * self.cores.len() + 128 + 8 * self.expected.len()
    }
}
