//! Fabric manager: approves proposals, commits them into the table, issues
//! expected labels and drives revocation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::addr::{MemoryRange, PermissionAttrs};
use crate::error::{Error, Result};
use crate::mac::{fm_label_message, mac64, AuthLabel, Key};
use crate::table::{LabelRecord, PermissionEntry, PermissionTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub host: u8,
    pub hwpid: u8,
    pub base_p: u64,
    pub range: MemoryRange,
    pub attrs: PermissionAttrs,
}

impl Grant {
    pub fn entry(&self) -> PermissionEntry {
        PermissionEntry::grant(self.range, self.attrs, self.host, self.hwpid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyRule {
    pub host: u8,
    pub range: MemoryRange,
    pub attrs: PermissionAttrs,
    /// Distinct HWPIDs the host may hold inside `range`.
    pub max_hwpids: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Policy {
    #[default]
    AllowAll,
    Allowlist(Vec<PolicyRule>),
}

impl FromStr for Policy {
    type Err = Error;

    /// One rule per line: `host start_page length_pages attrs max_hwpids`.
    /// `#` starts a comment. A file containing `allow-all` allows everything.
    fn from_str(s: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "allow-all" {
                return Ok(Policy::AllowAll);
            }
            let bad = |m: &str| Error::Config(format!("policy line {}: {m}", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad("expected `host start_page length_pages attrs max_hwpids`"));
            }
            let num = |t: &str| crate::trace::parse_u64(t).ok_or_else(|| bad(&format!("bad number `{t}`")));
            let host = u8::try_from(num(f[0])?).map_err(|_| bad("host out of range"))?;
            let range = MemoryRange::new(num(f[1])?, num(f[2])?).map_err(|e| bad(&e.to_string()))?;
            let attrs = f[3].parse().map_err(|e: Error| bad(&e.to_string()))?;
            let max_hwpids = u32::try_from(num(f[4])?).map_err(|_| bad("max_hwpids out of range"))?;
            rules.push(PolicyRule {
                host,
                range,
                attrs,
                max_hwpids,
            });
        }
        Ok(Policy::Allowlist(rules))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FmAction {
    Commit,
    Deny,
    Revoke,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmAuditRecord {
    pub seq: u64,
    pub action: FmAction,
    pub host: u8,
    pub hwpid: u8,
    pub range: MemoryRange,
    pub attrs: PermissionAttrs,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProposalOutcome {
    Approved {
        label: AuthLabel,
        hwpid: u8,
        base_p: u64,
        range: MemoryRange,
        bisnp: Vec<u8>,
    },
    Denied {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevokeOutcome {
    pub bisnp: Vec<u8>,
    /// Contexts left without any grant; their labels were withdrawn.
    pub withdrawn: Vec<(u8, u8)>,
}

pub struct FabricManager {
    k_fm: Key,
    policy: Policy,
    sdm_pages: u64,
    grants: Vec<Grant>,
    audit: Vec<FmAuditRecord>,
}

impl fmt::Debug for FabricManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FabricManager")
            .field("policy", &self.policy)
            .field("grants", &self.grants.len())
            .field("audit", &self.audit.len())
            .finish_non_exhaustive()
    }
}

impl FabricManager {
    pub fn new(k_fm: Key, policy: Policy, sdm_pages: u64) -> Self {
        Self {
            k_fm,
            policy,
            sdm_pages,
            grants: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn grants(&self) -> &[Grant] {
        &self.grants
    }

    pub fn audit(&self) -> &[FmAuditRecord] {
        &self.audit
    }

    /// Audit log as JSON lines.
    pub fn audit_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.audit {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Records a grant that is already reflected in a prebuilt table.
    pub fn seed_grant(&mut self, g: Grant) {
        self.grants.push(g);
    }

    pub fn issue_expected_label(&self, host: u8, hwpid: u8, base_p: u64, range: MemoryRange) -> AuthLabel {
        AuthLabel(mac64(&self.k_fm, &fm_label_message(host, hwpid, base_p, range)))
    }

    /// True iff `label` is what this FM would have issued for the tuple.
    pub fn verify_label(&self, host: u8, hwpid: u8, base_p: u64, range: MemoryRange, label: AuthLabel) -> bool {
        self.issue_expected_label(host, hwpid, base_p, range) == label
    }

    pub fn review_proposal(&self, entry: &PermissionEntry, host: u8) -> std::result::Result<(), String> {
        let hwpids: Vec<u8> = entry.hwpids.iter().collect();
        if hwpids.len() != 1 || hwpids[0] == 0 {
            return Err("proposal must name exactly one trusted hwpid".into());
        }
        if entry.range.end_page() > self.sdm_pages {
            return Err(format!("range {} exceeds shared memory", entry.range));
        }
        let hosts: Vec<u8> = entry.hosts.iter().collect();
        if hosts != [host] {
            return Err("proposal must name only the proposing host".into());
        }
        match &self.policy {
            Policy::AllowAll => Ok(()),
            Policy::Allowlist(rules) => {
                let hwpid = hwpids[0];
                let ok = rules.iter().any(|r| {
                    r.host == host
                        && r.range.start_page <= entry.range.start_page
                        && entry.range.end_page() <= r.range.end_page()
                        && r.attrs.covers(entry.attrs)
                        && {
                            let mut held: Vec<u8> = self
                                .grants
                                .iter()
                                .filter(|g| g.host == host && g.range.overlaps(&r.range))
                                .map(|g| g.hwpid)
                                .collect();
                            held.push(hwpid);
                            held.sort_unstable();
                            held.dedup();
                            held.len() as u32 <= r.max_hwpids
                        }
                });
                if ok {
                    Ok(())
                } else {
                    Err(format!("no policy rule allows host {host} {} on {}", entry.attrs, entry.range))
                }
            }
        }
    }

    fn log(&mut self, action: FmAction, host: u8, hwpid: u8, range: MemoryRange, attrs: PermissionAttrs, reason: Option<String>) {
        let seq = self.audit.len() as u64;
        self.audit.push(FmAuditRecord {
            seq,
            action,
            host,
            hwpid,
            range,
            attrs,
            reason,
        });
    }

    /// Takes the pending proposal out of the table slot and either commits
    /// it or denies it. `base_p` travels with the proposal from the host.
    pub fn process_proposal(&mut self, table: &mut PermissionTable, base_p: u64, bound_hosts: &[u8]) -> Result<ProposalOutcome> {
        let p = table.take_proposal().ok_or_else(|| Error::State("no pending proposal".into()))?;
        let hwpid = p.entry.hwpids.iter().next().unwrap_or(0);
        if let Err(reason) = self.review_proposal(&p.entry, p.host_id) {
            self.log(FmAction::Deny, p.host_id, hwpid, p.entry.range, p.entry.attrs, Some(reason.clone()));
            return Ok(ProposalOutcome::Denied { reason });
        }
        let grant = Grant {
            host: p.host_id,
            hwpid,
            base_p,
            range: p.entry.range,
            attrs: p.entry.attrs,
        };
        match self.commit_and_broadcast(table, grant, bound_hosts) {
            Ok((label, bisnp)) => Ok(ProposalOutcome::Approved {
                label,
                hwpid,
                base_p,
                range: grant.range,
                bisnp,
            }),
            Err(Error::ResourceExhausted(m)) => {
                self.log(FmAction::Deny, p.host_id, hwpid, grant.range, grant.attrs, Some(m.clone()));
                Ok(ProposalOutcome::Denied {
                    reason: format!("resource exhausted: {m}"),
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Commits an approved grant, coalesces the table, stores the expected
    /// label and returns it with the hosts that must receive a BISnp.
    pub fn commit_and_broadcast(&mut self, table: &mut PermissionTable, g: Grant, bound_hosts: &[u8]) -> Result<(AuthLabel, Vec<u8>)> {
        table.commit(g.entry())?;
        table.optimize();
        let label = self.issue_expected_label(g.host, g.hwpid, g.base_p, g.range);
        table.store_label(LabelRecord {
            host_id: g.host,
            hwpid: g.hwpid,
            label,
        });
        self.grants.push(g);
        self.log(FmAction::Commit, g.host, g.hwpid, g.range, g.attrs, None);
        Ok((label, bound_hosts.to_vec()))
    }

    /// Withdraws `range` from the (host, hwpid) context.
    pub fn revoke(
        &mut self,
        table: &mut PermissionTable,
        host: u8,
        hwpid: u8,
        range: MemoryRange,
        bound_hosts: &[u8],
    ) -> Result<RevokeOutcome> {
        if !self
            .grants
            .iter()
            .any(|g| g.host == host && g.hwpid == hwpid && g.range.overlaps(&range))
        {
            return Err(Error::State(format!("no grant for host {host} hwpid {hwpid} overlaps {range}")));
        }
        let mut kept = Vec::with_capacity(self.grants.len() + 1);
        for g in self.grants.drain(..) {
            if g.host != host || g.hwpid != hwpid || !g.range.overlaps(&range) {
                kept.push(g);
                continue;
            }
            if let Some(left) = MemoryRange::from_bounds(g.range.start_page, range.start_page.min(g.range.end_page())) {
                kept.push(Grant { range: left, ..g });
            }
            if let Some(right) = MemoryRange::from_bounds(range.end_page().max(g.range.start_page), g.range.end_page()) {
                kept.push(Grant { range: right, ..g });
            }
        }
        self.grants = kept;

        table.clear_range(range);
        for g in &self.grants {
            if let Some(clip) = g.range.intersect(&range) {
                table.commit(PermissionEntry::grant(clip, g.attrs, g.host, g.hwpid))?;
            }
        }
        table.remove_empty();
        table.optimize();

        let mut withdrawn = Vec::new();
        if !self.grants.iter().any(|g| g.host == host && g.hwpid == hwpid) {
            table.remove_label(host, hwpid);
            withdrawn.push((host, hwpid));
        }
        self.log(FmAction::Revoke, host, hwpid, range, PermissionAttrs::NONE, None);
        Ok(RevokeOutcome {
            bisnp: bound_hosts.to_vec(),
            withdrawn,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{HostSet, HwpidSet, PagePermission};
    use hmac::{Hmac, KeyInit, Mac};
    use proptest::prelude::*;
    use sha2::Sha256;
    use std::collections::BTreeMap;

    fn r(s: u64, l: u64) -> MemoryRange {
        MemoryRange::new(s, l).unwrap()
    }

    fn fm() -> FabricManager {
        FabricManager::new([9; 32], Policy::AllowAll, 1 << 20)
    }

    fn grant(host: u8, hwpid: u8, range: MemoryRange) -> Grant {
        Grant {
            host,
            hwpid,
            base_p: 0x1000 * u64::from(hwpid),
            range,
            attrs: PermissionAttrs::RW,
        }
    }

    fn page_map(t: &PermissionTable) -> BTreeMap<u64, PagePermission> {
        t.entries()
            .iter()
            .flat_map(|e| e.range.start_page..e.range.end_page())
            .map(|p| (p, t.lookup(p).0.unwrap().payload()))
            .collect()
    }

    fn replay(grants: &[Grant]) -> BTreeMap<u64, PagePermission> {
        let mut t = PermissionTable::new(1 << 20);
        for g in grants {
            t.commit(g.entry()).unwrap();
        }
        page_map(&t)
    }

    #[test]
    fn label_matches_reference_hmac() {
        let fm = FabricManager::new([0; 32], Policy::AllowAll, 16);
        let range = r(0, 1);
        let mut msg = vec![0x01, 0, 0];
        msg.extend_from_slice(&0u64.to_le_bytes());
        msg.extend_from_slice(&0u64.to_le_bytes()[..6]);
        msg.extend_from_slice(&1u64.to_le_bytes()[..6]);
        let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(&[0; 32]).unwrap();
        mac.update(&msg);
        let full = mac.finalize().into_bytes();
        let expect = u64::from_le_bytes(full[..8].try_into().unwrap());
        assert_eq!(fm.issue_expected_label(0, 0, 0, range), AuthLabel(expect));
        assert_eq!(fm.issue_expected_label(0, 0, 0, range), fm.issue_expected_label(0, 0, 0, range));
        assert_ne!(fm.issue_expected_label(0, 0, 0, range), fm.issue_expected_label(0, 0, 0, r(0, 2)));
    }

    #[test]
    fn allow_all_approves_and_commits() {
        let mut fm = fm();
        let mut t = PermissionTable::new(64);
        t.propose(PermissionEntry::grant(r(10, 4), PermissionAttrs::R, 2, 1), 2).unwrap();
        let out = fm.process_proposal(&mut t, 0xabc, &[0, 1, 2]).unwrap();
        match out {
            ProposalOutcome::Approved { label, bisnp, .. } => {
                assert_eq!(bisnp, vec![0, 1, 2]);
                assert_eq!(t.label(2, 1), Some(label));
                assert!(fm.verify_label(2, 1, 0xabc, r(10, 4), label));
            }
            other => panic!("{other:?}"),
        }
        assert!(t.proposal().is_none());
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn allowlist_denies_unlisted_and_leaves_table() {
        let policy: Policy = "# host start len attrs n\n1 0 100 rw 1\n".parse().unwrap();
        let mut fm = FabricManager::new([1; 32], policy, 1 << 20);
        let mut t = PermissionTable::new(64);
        t.commit(PermissionEntry::grant(r(0, 5), PermissionAttrs::R, 1, 1)).unwrap();
        let before = page_map(&t);
        t.propose(PermissionEntry::grant(r(200, 1), PermissionAttrs::R, 1, 1), 1).unwrap();
        assert!(matches!(
            fm.process_proposal(&mut t, 0, &[1]).unwrap(),
            ProposalOutcome::Denied { .. }
        ));
        assert_eq!(page_map(&t), before);
        assert!(t.proposal().is_none());
        assert_eq!(fm.audit()[0].action, FmAction::Deny);

        t.propose(PermissionEntry::grant(r(0, 10), PermissionAttrs::RW, 1, 1), 1).unwrap();
        assert!(matches!(
            fm.process_proposal(&mut t, 0, &[1]).unwrap(),
            ProposalOutcome::Approved { .. }
        ));
        // A second hwpid in the same rule exceeds its hwpid budget.
        t.propose(PermissionEntry::grant(r(20, 1), PermissionAttrs::R, 1, 2), 1).unwrap();
        assert!(matches!(
            fm.process_proposal(&mut t, 0, &[1]).unwrap(),
            ProposalOutcome::Denied { .. }
        ));
    }

    #[test]
    fn policy_parse_errors() {
        assert!("1 0 10 rw".parse::<Policy>().is_err());
        assert!("1 0 0 rw 1".parse::<Policy>().is_err());
        assert!("1 0 10 x 1".parse::<Policy>().is_err());
        assert_eq!("allow-all".parse::<Policy>().unwrap(), Policy::AllowAll);
    }

    #[test]
    fn capacity_exhaustion_denies() {
        let mut fm = fm();
        let mut t = PermissionTable::new(1);
        fm.commit_and_broadcast(&mut t, grant(0, 1, r(0, 1)), &[]).unwrap();
        t.propose(PermissionEntry::grant(r(5, 1), PermissionAttrs::R, 0, 2), 0).unwrap();
        match fm.process_proposal(&mut t, 0, &[]).unwrap() {
            ProposalOutcome::Denied { reason } => assert!(reason.contains("resource exhausted")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_commits_two_audit_records() {
        let mut fm = fm();
        let mut t = PermissionTable::new(64);
        fm.commit_and_broadcast(&mut t, grant(0, 1, r(0, 4)), &[0]).unwrap();
        fm.commit_and_broadcast(&mut t, grant(1, 1, r(8, 4)), &[0]).unwrap();
        assert_eq!(fm.audit().len(), 2);
        assert_eq!(fm.audit_jsonl().unwrap().lines().count(), 2);
    }

    #[test]
    fn revoke_sole_grantee_removes_entry() {
        let mut fm = fm();
        let mut t = PermissionTable::new(64);
        fm.commit_and_broadcast(&mut t, grant(0, 1, r(0, 4)), &[0]).unwrap();
        let out = fm.revoke(&mut t, 0, 1, r(0, 4), &[0]).unwrap();
        assert!(t.is_empty());
        assert_eq!(out.withdrawn, vec![(0, 1)]);
        assert_eq!(t.label(0, 1), None);
    }

    #[test]
    fn revoke_one_of_two_hosts_keeps_entry() {
        let mut fm = fm();
        let mut t = PermissionTable::new(64);
        fm.commit_and_broadcast(&mut t, grant(0, 1, r(0, 4)), &[0, 1]).unwrap();
        fm.commit_and_broadcast(&mut t, grant(1, 1, r(0, 4)), &[0, 1]).unwrap();
        fm.revoke(&mut t, 0, 1, r(0, 4), &[0, 1]).unwrap();
        let (e, _) = t.lookup(2);
        let e = e.unwrap();
        assert!(!e.hosts.contains(0));
        assert!(e.hosts.contains(1));
        assert_eq!(e.hwpids, HwpidSet::single(1));
        assert_eq!(e.hosts, HostSet::single(1));
    }

    #[test]
    fn partial_revoke_splits() {
        let mut fm = fm();
        let mut t = PermissionTable::new(64);
        fm.commit_and_broadcast(&mut t, grant(0, 1, r(0, 10)), &[0]).unwrap();
        fm.revoke(&mut t, 0, 1, r(3, 2), &[0]).unwrap();
        assert!(t.lookup(3).0.is_none() && t.lookup(4).0.is_none());
        assert!(t.lookup(2).0.is_some() && t.lookup(5).0.is_some());
        assert_eq!(fm.grants().len(), 2);
    }

    #[test]
    fn revoke_without_grant_is_state_error() {
        let mut fm = fm();
        let mut t = PermissionTable::new(64);
        assert!(matches!(fm.revoke(&mut t, 0, 1, r(0, 1), &[]), Err(Error::State(_))));
    }

    #[test]
    fn forged_labels_do_not_verify() {
        let fm = fm();
        let mut x = 0x9e37_79b9_7f4a_7c15u64;
        for _ in 0..10_000 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            assert!(!fm.verify_label(0, 1, 0x1000, r(0, 4), AuthLabel(x)));
        }
    }

    #[derive(Clone, Debug)]
    enum Op {
        Grant(u8, u8, u64, u64),
        Revoke(u8, u8, u64, u64),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..3, 1u8..4, 0u64..60, 1u64..20).prop_map(|(h, p, s, l)| Op::Grant(h, p, s, l)),
            (0u8..3, 1u8..4, 0u64..60, 1u64..20).prop_map(|(h, p, s, l)| Op::Revoke(h, p, s, l)),
        ]
    }

    proptest! {
        #[test]
        fn table_matches_grant_replay(ops in prop::collection::vec(arb_op(), 1..40)) {
            let mut fm = fm();
            let mut t = PermissionTable::new(1 << 20);
            for op in ops {
                match op {
                    Op::Grant(h, p, s, l) => {
                        fm.commit_and_broadcast(&mut t, grant(h, p, r(s, l)), &[]).unwrap();
                    }
                    Op::Revoke(h, p, s, l) => {
                        let _ = fm.revoke(&mut t, h, p, r(s, l), &[]);
                    }
                }
                t.check_invariants().unwrap();
                prop_assert_eq!(page_map(&t), replay(fm.grants()));
            }
        }
    }
}
