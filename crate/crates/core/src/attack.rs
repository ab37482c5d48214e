//! Canned adversarial scripts and their verdicts.
//!
//! Each script runs one victim (HWPID 1, root `VICTIM_ROOT`) and one
//! adversary on host 0, core 0, in the custom table layout so that every
//! grant goes through the proposal flow.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checker::FaultKind;
use crate::error::{Error, Result};
use crate::sim::{run, AblationFlags, Layout, RunConfig, RunOutput, SimEventKind, DEFAULT_SDM_BASE};
use crate::trace::parse_trace;

const VICTIM_ROOT: u64 = 0x1000;
const ATTACKER_ROOT: u64 = 0x9000;
const SECRET: u64 = 0x5ec2_e7da_7a11_0c01;
const GARBAGE: u64 = 0x0bad_0bad_0bad_0bad;
/// Victim's shared line (device page 0) and private local line.
const SDM_LINE: u64 = DEFAULT_SDM_BASE + 0x40;
const LOCAL_LINE: u64 = 0x5040;
/// Attacker VA page used for remapping.
const ALIAS_VPAGE: u64 = 0x77;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    UntaggedAccess,
    KernelArm,
    ReplayLabel,
    RemapSdm,
    AliasRead,
    TamperWrite,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::UntaggedAccess,
        AttackKind::KernelArm,
        AttackKind::ReplayLabel,
        AttackKind::RemapSdm,
        AttackKind::AliasRead,
        AttackKind::TamperWrite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::UntaggedAccess => "untagged-access",
            AttackKind::KernelArm => "kernel-arm",
            AttackKind::ReplayLabel => "replay-label",
            AttackKind::RemapSdm => "remap-sdm",
            AttackKind::AliasRead => "alias-read",
            AttackKind::TamperWrite => "tamper-write",
        }
    }

    /// The ablation flag that removes the defense this attack exercises.
    pub fn defense_flag(self) -> &'static str {
        match self {
            AttackKind::UntaggedAccess => "no-abit-check",
            AttackKind::KernelArm => "allow-privileged-arm",
            AttackKind::ReplayLabel => "freeze-ctr",
            AttackKind::RemapSdm => "no-hwpid-check",
            AttackKind::AliasRead => "no-encryption",
            AttackKind::TamperWrite => "no-integrity",
        }
    }

    pub fn script(self) -> String {
        let victim = format!(
            "GETPID 0 0\nCTXSW 0 0 {VICTIM_ROOT:#x} 1 user\nPROPOSE 0 0 0 4 rw\nARM 0 0 user\nST 0 0 {SDM_LINE:#x} 8 {SECRET:#x}\nST 0 0 {LOCAL_LINE:#x} 8 {SECRET:#x}\n"
        );
        let alias_va = (ALIAS_VPAGE << 12) | (LOCAL_LINE & 0xfff);
        let body = match self {
            // An ordinary process reads the victim's shared line.
            AttackKind::UntaggedAccess => format!("CTXSW 0 0 {ATTACKER_ROOT:#x} 0 user\nLD 0 0 {SDM_LINE:#x} 8\n"),
            // Compromised kernel arms the victim's label from ring 0 and
            // reads on its behalf.
            AttackKind::KernelArm => format!("CTXSW 0 0 {VICTIM_ROOT:#x} 1 supervisor\nARM 0 0 supervisor\nLD 0 0 {SDM_LINE:#x} 8\n"),
            // On the victim's next activation the kernel skips ARM and
            // injects the label captured from the previous one.
            AttackKind::ReplayLabel => format!("CTXSW 0 0 {VICTIM_ROOT:#x} 1 user\nREPLAY 0 0\nLD 0 0 {SDM_LINE:#x} 8\n"),
            // A second trusted process maps the victim's shared page into
            // its own space, then borrows the victim's HWPID.
            AttackKind::RemapSdm => format!(
                "GETPID 0 0\nCTXSW 0 0 {ATTACKER_ROOT:#x} 2 user\nPROPOSE 0 0 8 4 rw\nARM 0 0 user\n\
                 MAP 0 0 {ATTACKER_ROOT:#x} {ALIAS_VPAGE:#x} {:#x}\nLD 0 0 {:#x} 8\n\
                 CTXSW 0 0 {ATTACKER_ROOT:#x} 1 user\nARM 0 0 user\nLD 0 0 {SDM_LINE:#x} 8\n",
                SDM_LINE >> 12,
                (ALIAS_VPAGE << 12) | (SDM_LINE & 0xfff)
            ),
            // The OS aliases the victim's private page and reads it.
            AttackKind::AliasRead => format!(
                "CTXSW 0 0 {ATTACKER_ROOT:#x} 0 user\nMAP 0 0 {ATTACKER_ROOT:#x} {ALIAS_VPAGE:#x} {:#x}\nLD 0 0 {alias_va:#x} 8\n",
                LOCAL_LINE >> 12
            ),
            // The OS overwrites the victim's private page; the victim reads
            // it on its next activation.
            AttackKind::TamperWrite => format!(
                "CTXSW 0 0 {ATTACKER_ROOT:#x} 0 user\nMAP 0 0 {ATTACKER_ROOT:#x} {ALIAS_VPAGE:#x} {:#x}\nST 0 0 {alias_va:#x} 8 {GARBAGE:#x}\n\
                 CTXSW 0 0 {VICTIM_ROOT:#x} 1 user\nARM 0 0 user\nLD 0 0 {LOCAL_LINE:#x} 8\n",
                LOCAL_LINE >> 12
            ),
        };
        victim + &body
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown attack `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackVerdict {
    pub kind: AttackKind,
    pub ablation: AblationFlags,
    pub passed: bool,
    pub detail: String,
    /// Tainted words seen by contexts without a read right.
    pub taint_leaks: u64,
}

pub fn attack_config(ablation: AblationFlags) -> RunConfig {
    RunConfig {
        layout: Layout::Custom,
        sdm_bytes: 64 << 20,
        local_bytes: 64 << 20,
        record_observations: true,
        ablation,
        ..Default::default()
    }
}

fn fault_at(out: &RunOutput, va: u64, kind: FaultKind) -> bool {
    out.events
        .iter()
        .any(|e| matches!(e.kind, SimEventKind::Fault { fault, va: v, .. } if fault == kind && v == va))
}

fn observed(out: &RunOutput, base_p: u64, va: u64) -> Option<u64> {
    out.observations
        .iter()
        .rev()
        .find(|o| o.base_p == base_p && o.va == va)
        .map(|o| o.words().next().unwrap_or(0))
}

fn arms(out: &RunOutput) -> Vec<(bool, bool)> {
    out.events
        .iter()
        .filter_map(|e| match e.kind {
            SimEventKind::Arm { armed, validated } => Some((armed, validated)),
            _ => None,
        })
        .collect()
}

pub fn run_attack(kind: AttackKind, ablation: AblationFlags) -> Result<AttackVerdict> {
    let trace = parse_trace(&kind.script())?;
    let out = run(attack_config(ablation), &[trace])?;
    // Setup must have succeeded for the verdict to mean anything.
    if !arms(&out).first().is_some_and(|&(a, v)| a && v) {
        return Err(Error::State(format!("{kind}: victim failed to authenticate")));
    }
    let alias_sdm = (ALIAS_VPAGE << 12) | (SDM_LINE & 0xfff);
    let alias_local = (ALIAS_VPAGE << 12) | (LOCAL_LINE & 0xfff);
    let (passed, detail) = match kind {
        AttackKind::UntaggedAccess => {
            let rejected = fault_at(&out, SDM_LINE, FaultKind::RejectUntagged);
            let seen = observed(&out, ATTACKER_ROOT, SDM_LINE);
            (rejected && seen.is_none(), format!("rejected={rejected} observed={seen:x?}"))
        }
        AttackKind::KernelArm => {
            let kernel_arm = arms(&out).get(1).copied().unwrap_or_default();
            let rejected = fault_at(&out, SDM_LINE, FaultKind::RejectUntagged);
            (!kernel_arm.0 && rejected, format!("armed={} rejected={rejected}", kernel_arm.0))
        }
        AttackKind::ReplayLabel => {
            let validated = out.events.iter().any(|e| e.kind == SimEventKind::Replay { validated: true });
            let rejected = fault_at(&out, SDM_LINE, FaultKind::RejectUntagged);
            (!validated && rejected, format!("replay_validated={validated} rejected={rejected}"))
        }
        AttackKind::RemapSdm => {
            let violation = fault_at(&out, alias_sdm, FaultKind::Violation);
            let stolen = arms(&out).get(2).copied().unwrap_or_default();
            let rejected = fault_at(&out, SDM_LINE, FaultKind::RejectUntagged);
            (
                violation && !stolen.1 && rejected,
                format!("violation={violation} stolen_validated={} rejected={rejected}", stolen.1),
            )
        }
        AttackKind::AliasRead => {
            let seen = observed(&out, ATTACKER_ROOT, alias_local);
            (seen.is_some_and(|v| v != SECRET), format!("observed={seen:x?}"))
        }
        AttackKind::TamperWrite => {
            let detected = fault_at(&out, LOCAL_LINE, FaultKind::Integrity);
            (detected, format!("integrity_violation={detected}"))
        }
    };
    Ok(AttackVerdict {
        kind,
        ablation,
        passed,
        detail,
        taint_leaks: out.taint_leaks,
    })
}

/// Every attack with defenses on, followed (if `ablate`) by every attack
/// with its own defense removed.
pub fn run_suite(ablate: bool) -> Result<Vec<AttackVerdict>> {
    let mut jobs: Vec<(AttackKind, AblationFlags)> = AttackKind::ALL.iter().map(|&k| (k, AblationFlags::default())).collect();
    if ablate {
        for k in AttackKind::ALL {
            let mut f = AblationFlags::default();
            f.set(k.defense_flag())?;
            jobs.push((k, f));
        }
    }
    crate::par::map(&jobs, |&(k, f)| run_attack(k, f)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_attack_is_defended() {
        for k in AttackKind::ALL {
            let v = run_attack(k, AblationFlags::default()).unwrap();
            assert!(v.passed, "{k}: {}", v.detail);
            assert_eq!(v.taint_leaks, 0, "{k}");
        }
    }

    #[test]
    fn every_defense_is_load_bearing() {
        for k in AttackKind::ALL {
            let mut f = AblationFlags::default();
            f.set(k.defense_flag()).unwrap();
            let v = run_attack(k, f).unwrap();
            assert!(!v.passed, "{k} still passes without {}: {}", k.defense_flag(), v.detail);
        }
    }

    #[test]
    fn leaks_show_up_in_the_taint_audit_when_undefended() {
        let mut f = AblationFlags::default();
        f.set("no-abit-check").unwrap();
        assert!(run_attack(AttackKind::UntaggedAccess, f).unwrap().taint_leaks > 0);
        let mut f = AblationFlags::default();
        f.set("no-encryption").unwrap();
        assert!(run_attack(AttackKind::AliasRead, f).unwrap().taint_leaks > 0);
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("rowhammer".parse::<AttackKind>(), Err(Error::Argument(_))));
    }
}
