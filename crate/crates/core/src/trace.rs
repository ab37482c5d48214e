//! Text trace format and synthetic trace generators.
//!
//! Grammar (one record per line, `#` starts a comment, fields separated by
//! whitespace, numbers decimal or `0x` hex):
//!
//! ```text
//! record  := [ "@" delay ] kind
//! kind    := "CTXSW"   host core base_p hwpid ring
//!          | "ARM"     host core ring
//!          | "LD"      host core va size
//!          | "ST"      host core va size [ value ]
//!          | "PROPOSE" host core start_page pages attrs
//!          | "MAP"     host core base_p vpage ppage
//!          | "UNMAP"   host core base_p vpage
//!          | "GETPID"  host core
//!          | "RELPID"  host core hwpid
//!          | "REVOKE"  host core hwpid start_page pages
//!          | "REPLAY"  host core
//!          | "NOP"     host core
//! ring    := "machine" | "hypervisor" | "supervisor" | "user"
//! attrs   := "r" | "w" | "rw"
//! size    := 1 | 2 | 4 | 8 | 64
//! ```
//!
//! `delay` is the number of ns the core idles before issuing the record.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{PermissionAttrs, Ring, MAX_HWPID, PAGE_SIZE};
use crate::error::{Error, Result};

pub const VA_BITS: u32 = 48;
pub const VA_LIMIT: u64 = 1 << VA_BITS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    CtxSw {
        base_p: u64,
        hwpid: u8,
        ring: Ring,
    },
    Arm {
        ring: Ring,
    },
    Ld {
        va: u64,
        size: u8,
    },
    St {
        va: u64,
        size: u8,
        value: Option<u64>,
    },
    Propose {
        start_page: u64,
        pages: u64,
        attrs: PermissionAttrs,
    },
    Map {
        base_p: u64,
        vpage: u64,
        ppage: u64,
    },
    Unmap {
        base_p: u64,
        vpage: u64,
    },
    GetPid,
    RelPid {
        hwpid: u8,
    },
    Revoke {
        hwpid: u8,
        start_page: u64,
        pages: u64,
    },
    /// Adversary re-installs the label this core armed in an earlier epoch.
    Replay,
    Nop,
}

impl RecordKind {
    pub fn is_memory(&self) -> bool {
        matches!(self, RecordKind::Ld { .. } | RecordKind::St { .. })
    }

    fn keyword(&self) -> &'static str {
        match self {
            RecordKind::CtxSw { .. } => "CTXSW",
            RecordKind::Arm { .. } => "ARM",
            RecordKind::Ld { .. } => "LD",
            RecordKind::St { .. } => "ST",
            RecordKind::Propose { .. } => "PROPOSE",
            RecordKind::Map { .. } => "MAP",
            RecordKind::Unmap { .. } => "UNMAP",
            RecordKind::GetPid => "GETPID",
            RecordKind::RelPid { .. } => "RELPID",
            RecordKind::Revoke { .. } => "REVOKE",
            RecordKind::Replay => "REPLAY",
            RecordKind::Nop => "NOP",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub delay: u64,
    pub host: u8,
    pub core: u8,
    pub kind: RecordKind,
}

impl TraceRecord {
    pub fn new(host: u8, core: u8, kind: RecordKind) -> Self {
        Self {
            delay: 0,
            host,
            core,
            kind,
        }
    }

    pub fn after(mut self, delay: u64) -> Self {
        self.delay = delay;
        self
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.delay > 0 {
            write!(f, "@{} ", self.delay)?;
        }
        write!(f, "{} {} {}", self.kind.keyword(), self.host, self.core)?;
        match self.kind {
            RecordKind::CtxSw { base_p, hwpid, ring } => write!(f, " {base_p:#x} {hwpid} {ring}"),
            RecordKind::Arm { ring } => write!(f, " {ring}"),
            RecordKind::Ld { va, size } => write!(f, " {va:#x} {size}"),
            RecordKind::St { va, size, value } => {
                write!(f, " {va:#x} {size}")?;
                match value {
                    Some(v) => write!(f, " {v:#x}"),
                    None => Ok(()),
                }
            }
            RecordKind::Propose { start_page, pages, attrs } => write!(f, " {start_page} {pages} {attrs}"),
            RecordKind::Map { base_p, vpage, ppage } => write!(f, " {base_p:#x} {vpage:#x} {ppage:#x}"),
            RecordKind::Unmap { base_p, vpage } => write!(f, " {base_p:#x} {vpage:#x}"),
            RecordKind::RelPid { hwpid } => write!(f, " {hwpid}"),
            RecordKind::Revoke { hwpid, start_page, pages } => write!(f, " {hwpid} {start_page} {pages}"),
            RecordKind::GetPid | RecordKind::Replay | RecordKind::Nop => Ok(()),
        }
    }
}

/// Decimal or `0x`-prefixed hex.
pub fn parse_u64(t: &str) -> Option<u64> {
    let t = t.replace('_', "");
    match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => t.parse().ok(),
    }
}

struct Tokens<'a> {
    line: usize,
    toks: Vec<(usize, &'a str)>,
    pos: usize,
    end_col: usize,
}

impl<'a> Tokens<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        let mut toks = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    toks.push((s, &text[s..i]));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            toks.push((s, &text[s..]));
        }
        Self {
            line,
            toks,
            pos: 0,
            end_col: text.len() + 1,
        }
    }

    fn err(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Trace {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let t = self
            .toks
            .get(self.pos)
            .map(|&(c, s)| (c + 1, s))
            .ok_or_else(|| self.err(self.end_col, format!("missing {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn num(&mut self, what: &str, max: u64) -> Result<u64> {
        let (col, t) = self.next(what)?;
        let v = parse_u64(t).ok_or_else(|| self.err(col, format!("bad {what} `{t}`")))?;
        if v > max {
            return Err(self.err(col, format!("{what} {v} out of range (max {max})")));
        }
        Ok(v)
    }

    fn parsed<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let (col, t) = self.next(what)?;
        t.parse().map_err(|_| self.err(col, format!("bad {what} `{t}`")))
    }

    fn optional(&mut self) -> Option<(usize, &'a str)> {
        let t = self.toks.get(self.pos).map(|&(c, s)| (c + 1, s));
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn finish(&self) -> Result<()> {
        match self.toks.get(self.pos) {
            Some(&(c, t)) => Err(self.err(c + 1, format!("unexpected trailing field `{t}`"))),
            None => Ok(()),
        }
    }
}

fn parse_size(tk: &mut Tokens<'_>) -> Result<u8> {
    let (col, t) = tk.next("size")?;
    match parse_u64(t) {
        Some(s @ (1 | 2 | 4 | 8 | 64)) => Ok(s as u8),
        _ => Err(tk.err(col, format!("size must be 1, 2, 4, 8 or 64, got `{t}`"))),
    }
}

/// Parses one line. Blank and comment-only lines yield `None`.
pub fn parse_line(line_no: usize, text: &str) -> Result<Option<TraceRecord>> {
    let body = text.split('#').next().unwrap_or("");
    let mut tk = Tokens::new(line_no, body);
    if tk.toks.is_empty() {
        return Ok(None);
    }
    let (mut col, mut kw) = tk.next("record kind")?;
    let mut delay = 0;
    if let Some(d) = kw.strip_prefix('@') {
        delay = parse_u64(d).ok_or_else(|| tk.err(col, format!("bad delay `{kw}`")))?;
        (col, kw) = tk.next("record kind")?;
    }
    let host = tk.num("host", 254)? as u8;
    let core = tk.num("core", 255)? as u8;
    let kind = match kw {
        "CTXSW" => RecordKind::CtxSw {
            base_p: tk.num("base_p", u64::MAX)?,
            hwpid: tk.num("hwpid", u64::from(MAX_HWPID))? as u8,
            ring: tk.parsed("ring")?,
        },
        "ARM" => RecordKind::Arm { ring: tk.parsed("ring")? },
        "LD" => RecordKind::Ld {
            va: tk.num("virtual address", VA_LIMIT - 1)?,
            size: parse_size(&mut tk)?,
        },
        "ST" => {
            let va = tk.num("virtual address", VA_LIMIT - 1)?;
            let size = parse_size(&mut tk)?;
            let value = match tk.optional() {
                Some((c, t)) => Some(parse_u64(t).ok_or_else(|| tk.err(c, format!("bad value `{t}`")))?),
                None => None,
            };
            RecordKind::St { va, size, value }
        }
        "PROPOSE" => RecordKind::Propose {
            start_page: tk.num("start page", (1 << 48) - 1)?,
            pages: tk.num("page count", 1 << 48)?,
            attrs: tk.parsed("attrs")?,
        },
        "MAP" => RecordKind::Map {
            base_p: tk.num("base_p", u64::MAX)?,
            vpage: tk.num("virtual page", (VA_LIMIT >> 12) - 1)?,
            ppage: tk.num("physical page", (1 << 29) - 1)?,
        },
        "UNMAP" => RecordKind::Unmap {
            base_p: tk.num("base_p", u64::MAX)?,
            vpage: tk.num("virtual page", (VA_LIMIT >> 12) - 1)?,
        },
        "GETPID" => RecordKind::GetPid,
        "RELPID" => RecordKind::RelPid {
            hwpid: tk.num("hwpid", u64::from(MAX_HWPID))? as u8,
        },
        "REVOKE" => RecordKind::Revoke {
            hwpid: tk.num("hwpid", u64::from(MAX_HWPID))? as u8,
            start_page: tk.num("start page", (1 << 48) - 1)?,
            pages: tk.num("page count", 1 << 48)?,
        },
        "REPLAY" => RecordKind::Replay,
        "NOP" => RecordKind::Nop,
        other => return Err(tk.err(col, format!("unknown record kind `{other}`"))),
    };
    tk.finish()?;
    if let RecordKind::Propose { pages: 0, .. } | RecordKind::Revoke { pages: 0, .. } = kind {
        return Err(tk.err(1, "page count must be at least 1"));
    }
    Ok(Some(TraceRecord { delay, host, core, kind }))
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, l)| parse_line(i + 1, l).transpose())
        .collect()
}

pub fn read_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Trace {
            line: i + 1,
            column: 1,
            message: e.to_string(),
        })?;
        if let Some(r) = parse_line(i + 1, &line)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// Reads every `*.trace` file in `dir` (sorted by name) and splits the
/// records by host. Files may hold records for several hosts.
pub fn load_trace_dir(dir: &std::path::Path, hosts: usize) -> Result<Vec<Vec<TraceRecord>>> {
    let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Trace {
            line: 0,
            column: 0,
            message: format!("{}: no .trace files", dir.display()),
        });
    }
    let mut out = vec![Vec::new(); hosts];
    for f in files {
        let file = std::fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
        let records = read_trace(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Trace { line, column, message } => Error::Trace {
                line,
                column,
                message: format!("{}: {message}", f.display()),
            },
            other => other,
        })?;
        for r in records {
            let slot = out.get_mut(usize::from(r.host)).ok_or_else(|| Error::Trace {
                line: 0,
                column: 0,
                message: format!("{}: host {} outside the configured {hosts}", f.display(), r.host),
            })?;
            slot.push(r);
        }
    }
    Ok(out)
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 24);
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// Sequential 8-byte stride, wrapping at the footprint.
    Stream,
    /// Sequential bursts starting at random pages.
    Frontier,
    /// Uniform iid pages.
    Random,
    /// Walks one random cyclic permutation of the footprint.
    PointerChase,
    /// Stream with a `mix` fraction of uniform random accesses.
    Mixed,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Stream,
        Pattern::Frontier,
        Pattern::Random,
        Pattern::PointerChase,
        Pattern::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Stream => "stream",
            Pattern::Frontier => "frontier",
            Pattern::Random => "random",
            Pattern::PointerChase => "pointer-chase",
            Pattern::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown pattern `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub pages: u64,
    pub ops: u64,
    pub remote_frac: f64,
    pub store_frac: f64,
    /// Random share for `Mixed`.
    pub mix: f64,
    pub host: u8,
    pub cores: u8,
    pub hwpid: u8,
    pub base_p: u64,
    pub sdm_base: u64,
    pub local_base: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            pages: 1 << 20,
            ops: 100_000,
            remote_frac: 1.0,
            store_frac: 0.1,
            mix: 0.5,
            host: 0,
            cores: 1,
            hwpid: 1,
            base_p: 0x1000,
            sdm_base: crate::sim::DEFAULT_SDM_BASE,
            local_base: 0,
        }
    }
}

const BURST_MIN: u64 = 16;
const BURST_MAX: u64 = 256;

struct Cursor {
    byte: u64,
    span: u64,
}

impl Cursor {
    fn step(&mut self) -> u64 {
        let b = self.byte;
        self.byte = (self.byte + 8) % self.span;
        b
    }
}

/// Builds one host's trace: a `CTXSW`/`ARM` prologue per core followed by
/// `ops` memory records spread round-robin over the cores.
pub fn gen_trace(pattern: Pattern, p: &GenParams, seed: u64) -> Result<Vec<TraceRecord>> {
    if p.pages == 0 {
        return Err(Error::Argument("footprint must be at least one page".into()));
    }
    if p.cores == 0 {
        return Err(Error::Argument("at least one core is required".into()));
    }
    for (name, f) in [("remote_frac", p.remote_frac), ("store_frac", p.store_frac), ("mix", p.mix)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Argument(format!("{name} must lie in [0, 1], got {f}")));
        }
    }
    let span = p
        .pages
        .checked_mul(PAGE_SIZE)
        .filter(|s| p.sdm_base.checked_add(*s).is_some_and(|e| e <= VA_LIMIT))
        .ok_or_else(|| Error::Argument("footprint exceeds the address space".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(p.ops as usize + 2 * usize::from(p.cores));
    for c in 0..p.cores {
        out.push(TraceRecord::new(
            p.host,
            c,
            RecordKind::CtxSw {
                base_p: p.base_p,
                hwpid: p.hwpid,
                ring: Ring::User,
            },
        ));
        out.push(TraceRecord::new(p.host, c, RecordKind::Arm { ring: Ring::User }));
    }

    let mut remote_cur = Cursor { byte: 0, span };
    let mut local_cur = Cursor { byte: 0, span };
    let mut burst_left = [0u64; 2];
    let perm: Vec<u64> = if pattern == Pattern::PointerChase {
        let mut v: Vec<u64> = (0..p.pages).collect();
        v.shuffle(&mut rng);
        v
    } else {
        Vec::new()
    };
    let mut chase_pos = [0usize, p.pages as usize / 2];

    for i in 0..p.ops {
        let remote = rng.random_bool(p.remote_frac);
        let which = usize::from(remote);
        let cur = if remote { &mut remote_cur } else { &mut local_cur };
        let offset = match pattern {
            Pattern::Stream => cur.step(),
            Pattern::Mixed => {
                if rng.random_bool(p.mix) {
                    rng.random_range(0..p.pages) * PAGE_SIZE + rng.random_range(0..PAGE_SIZE / 8) * 8
                } else {
                    cur.step()
                }
            }
            Pattern::Random => rng.random_range(0..p.pages) * PAGE_SIZE + rng.random_range(0..PAGE_SIZE / 8) * 8,
            Pattern::Frontier => {
                if burst_left[which] == 0 {
                    burst_left[which] = rng.random_range(BURST_MIN..=BURST_MAX);
                    cur.byte = rng.random_range(0..p.pages) * PAGE_SIZE;
                }
                burst_left[which] -= 1;
                cur.step()
            }
            Pattern::PointerChase => {
                let pos = &mut chase_pos[which];
                *pos = (*pos + 1) % perm.len();
                perm[*pos] * PAGE_SIZE + rng.random_range(0..PAGE_SIZE / 8) * 8
            }
        };
        let va = if remote { p.sdm_base + offset } else { p.local_base + offset };
        let core = (i % u64::from(p.cores)) as u8;
        let kind = if rng.random_bool(p.store_frac) {
            RecordKind::St {
                va,
                size: 8,
                value: Some(rng.random()),
            }
        } else {
            RecordKind::Ld { va, size: 8 }
        };
        out.push(TraceRecord::new(p.host, core, kind));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn parses_a_load() {
        let r = parse_line(1, "LD 0 0 0x1000 8").unwrap().unwrap();
        assert_eq!(r, TraceRecord::new(0, 0, RecordKind::Ld { va: 0x1000, size: 8 }));
    }

    #[test]
    fn bad_address_reports_location() {
        match parse_trace("LD 0 0 zzz 8") {
            Err(Error::Trace { line, column, .. }) => assert_eq!((line, column), (1, 8)),
            other => panic!("{other:?}"),
        }
        match parse_trace("# header\n\nLD 0 0 0x10 3\n") {
            Err(Error::Trace { line, column, .. }) => assert_eq!((line, column), (3, 13)),
            other => panic!("{other:?}"),
        }
        assert!(parse_trace("LD 0 0 0x10").is_err());
        assert!(parse_trace("LD 0 0 0x10 8 9").is_err());
        assert!(parse_trace("FOO 0 0").is_err());
        assert!(parse_trace("CTXSW 0 0 0x1 128 user").is_err());
        assert!(parse_trace("PROPOSE 0 0 5 0 rw").is_err());
    }

    #[test]
    fn comments_delays_and_optional_value() {
        let recs = parse_trace("@25 ST 1 2 0x40 8 0xdead # trailing\n  # only comment\nNOP 1 2\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].delay, 25);
        assert_eq!(
            recs[0].kind,
            RecordKind::St {
                va: 0x40,
                size: 8,
                value: Some(0xdead)
            }
        );
    }

    fn arb_ring() -> impl Strategy<Value = Ring> {
        prop_oneof![
            Just(Ring::Machine),
            Just(Ring::Hypervisor),
            Just(Ring::Supervisor),
            Just(Ring::User)
        ]
    }

    fn arb_attrs() -> impl Strategy<Value = PermissionAttrs> {
        prop_oneof![Just(PermissionAttrs::R), Just(PermissionAttrs::W), Just(PermissionAttrs::RW)]
    }

    fn arb_size() -> impl Strategy<Value = u8> {
        prop_oneof![Just(1u8), Just(2), Just(4), Just(8), Just(64)]
    }

    fn arb_kind() -> impl Strategy<Value = RecordKind> {
        let va = 0..VA_LIMIT;
        prop_oneof![
            (any::<u64>(), 0..=MAX_HWPID, arb_ring()).prop_map(|(base_p, hwpid, ring)| RecordKind::CtxSw { base_p, hwpid, ring }),
            arb_ring().prop_map(|ring| RecordKind::Arm { ring }),
            (va.clone(), arb_size()).prop_map(|(va, size)| RecordKind::Ld { va, size }),
            (va, arb_size(), proptest::option::of(any::<u64>())).prop_map(|(va, size, value)| RecordKind::St { va, size, value }),
            (0u64..1 << 40, 1u64..1 << 20, arb_attrs()).prop_map(|(start_page, pages, attrs)| RecordKind::Propose {
                start_page,
                pages,
                attrs
            }),
            (any::<u64>(), 0..VA_LIMIT >> 12, 0u64..1 << 29).prop_map(|(base_p, vpage, ppage)| RecordKind::Map { base_p, vpage, ppage }),
            (any::<u64>(), 0..VA_LIMIT >> 12).prop_map(|(base_p, vpage)| RecordKind::Unmap { base_p, vpage }),
            Just(RecordKind::GetPid),
            (0..=MAX_HWPID).prop_map(|hwpid| RecordKind::RelPid { hwpid }),
            (0..=MAX_HWPID, 0u64..1 << 30, 1u64..1 << 20).prop_map(|(hwpid, start_page, pages)| RecordKind::Revoke {
                hwpid,
                start_page,
                pages
            }),
            Just(RecordKind::Replay),
            Just(RecordKind::Nop),
        ]
    }

    fn arb_record() -> impl Strategy<Value = TraceRecord> {
        (0u64..1000, 0u8..=254, any::<u8>(), arb_kind()).prop_map(|(delay, host, core, kind)| TraceRecord { delay, host, core, kind })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn parse_format_round_trip(rec in arb_record()) {
            let text = rec.to_string();
            prop_assert_eq!(parse_line(1, &text).unwrap(), Some(rec));
        }
    }

    fn pages_of(recs: &[TraceRecord], base: u64) -> Vec<u64> {
        recs.iter()
            .filter_map(|r| match r.kind {
                RecordKind::Ld { va, .. } | RecordKind::St { va, .. } => Some((va - base) / PAGE_SIZE),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn stream_is_non_decreasing_and_wraps() {
        let p = GenParams {
            pages: 100,
            ops: 1000,
            ..Default::default()
        };
        let recs = gen_trace(Pattern::Stream, &p, 1).unwrap();
        let pages = pages_of(&recs, p.sdm_base);
        assert!(pages.windows(2).all(|w| w[0] <= w[1]));

        let p = GenParams {
            pages: 2,
            ops: 2000,
            ..Default::default()
        };
        let pages = pages_of(&gen_trace(Pattern::Stream, &p, 1).unwrap(), p.sdm_base);
        assert_eq!(pages[1023], 1);
        assert_eq!(pages[1024], 0);
        assert!(pages.iter().all(|&x| x < 2));
    }

    #[test]
    fn random_unique_fraction_matches_expectation() {
        let n = 1u64 << 20;
        let ops = 200_000u64;
        let p = GenParams {
            pages: n,
            ops,
            store_frac: 0.0,
            ..Default::default()
        };
        let pages = pages_of(&gen_trace(Pattern::Random, &p, 7).unwrap(), p.sdm_base);
        let unique = pages.iter().collect::<HashSet<_>>().len() as f64;
        // Occupancy of n bins after `ops` throws.
        let q = 1.0 - 1.0 / n as f64;
        let mean = n as f64 * (1.0 - q.powf(ops as f64));
        let q2 = 1.0 - 2.0 / n as f64;
        let var =
            n as f64 * q.powf(ops as f64) + n as f64 * (n as f64 - 1.0) * q2.powf(ops as f64) - (n as f64 * q.powf(ops as f64)).powi(2);
        let sigma = var.sqrt();
        assert!((unique - mean).abs() <= 3.0 * sigma, "unique {unique} mean {mean} sigma {sigma}");
    }

    #[test]
    fn deterministic_for_a_seed() {
        let p = GenParams {
            pages: 4096,
            ops: 5000,
            remote_frac: 0.7,
            cores: 3,
            ..Default::default()
        };
        for pat in Pattern::ALL {
            let a = format_trace(&gen_trace(pat, &p, 42).unwrap());
            let b = format_trace(&gen_trace(pat, &p, 42).unwrap());
            assert_eq!(a, b);
            assert_eq!(parse_trace(&a).unwrap(), gen_trace(pat, &p, 42).unwrap());
        }
        assert_ne!(
            format_trace(&gen_trace(Pattern::Random, &p, 1).unwrap()),
            format_trace(&gen_trace(Pattern::Random, &p, 2).unwrap())
        );
    }

    #[test]
    fn pointer_chase_visits_every_page_once_per_cycle() {
        let p = GenParams {
            pages: 64,
            ops: 64,
            ..Default::default()
        };
        let pages = pages_of(&gen_trace(Pattern::PointerChase, &p, 3).unwrap(), p.sdm_base);
        assert_eq!(pages.iter().collect::<HashSet<_>>().len(), 64);
    }

    #[test]
    fn zero_footprint_is_rejected() {
        let p = GenParams {
            pages: 0,
            ..Default::default()
        };
        assert!(matches!(gen_trace(Pattern::Stream, &p, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn remote_fraction_is_respected() {
        let p = GenParams {
            pages: 1024,
            ops: 20_000,
            remote_frac: 0.25,
            ..Default::default()
        };
        let recs = gen_trace(Pattern::Random, &p, 5).unwrap();
        let remote = recs
            .iter()
            .filter(|r| matches!(r.kind, RecordKind::Ld { va, .. } | RecordKind::St { va, .. } if va >= p.sdm_base))
            .count() as f64;
        assert!((remote / 20_000.0 - 0.25).abs() < 0.02);
    }
}
