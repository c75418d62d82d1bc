//! Line-oriented event traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EventDetail, EventKind, PhaseId, TraceEvent};
use crate::error::{Error, Result};
use crate::runtime::Tag;

pub const TRACE_HEADER: &str = "# minipic-trace v1";

fn format_event(e: &TraceEvent) -> String {
    let detail = match e.detail {
        EventDetail::Phase(p) => format!("phase={}", p.name()),
        EventDetail::Message { peer, tag, bytes } => {
            format!("peer={peer} tag={} bytes={bytes}", tag.name())
        }
    };
    format!("{}\t{}\t{}\t{}", e.t_ns, e.rank, e.kind.name(), detail)
}

/// Writes events grouped by rank, each rank in time order.
pub fn write_trace(events: &[TraceEvent], path: &Path) -> Result<()> {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| (e.rank, e.t_ns));
    let mut out = String::with_capacity(40 * sorted.len() + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for e in &sorted {
        out.push_str(&format_event(e));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("{}: missing header '{TRACE_HEADER}'", path.display()),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            parse_event(l).ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("{}: malformed trace event '{l}'", path.display()),
            })
        })
        .collect()
}

fn parse_event(line: &str) -> Option<TraceEvent> {
    let mut f = line.split('\t');
    let t_ns = f.next()?.parse().ok()?;
    let rank = f.next()?.parse().ok()?;
    let kind = EventKind::from_name(f.next()?)?;
    let detail = f.next()?;
    if f.next().is_some() {
        return None;
    }
    let detail = if let Some(p) = detail.strip_prefix("phase=") {
        EventDetail::Phase(PhaseId::from_name(p)?)
    } else {
        let mut peer = None;
        let mut tag = None;
        let mut bytes = None;
        for kv in detail.split(' ') {
            let (k, v) = kv.split_once('=')?;
            match k {
                "peer" => peer = v.parse().ok(),
                "tag" => tag = Tag::from_name(v),
                "bytes" => bytes = v.parse().ok(),
                _ => return None,
            }
        }
        EventDetail::Message {
            peer: peer?,
            tag: tag?,
            bytes: bytes?,
        }
    };
    Some(TraceEvent {
        t_ns,
        rank,
        kind,
        detail,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankTraceStats {
    pub rank: usize,
    pub wait_ns: u64,
    /// From the first to the last event of the rank.
    pub span_ns: u64,
    pub wait_fraction: f64,
    pub sends: u64,
    pub recvs: u64,
    /// Every WaitBegin has a matching WaitEnd.
    pub balanced: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceSummary {
    pub ranks: Vec<RankTraceStats>,
    /// Message counts keyed by (sender, receiver).
    pub messages: BTreeMap<(usize, usize), u64>,
}

pub fn trace_summary(events: &[TraceEvent]) -> TraceSummary {
    let mut by_rank: BTreeMap<usize, Vec<&TraceEvent>> = BTreeMap::new();
    for e in events {
        by_rank.entry(e.rank).or_default().push(e);
    }
    let mut summary = TraceSummary::default();
    for (rank, mut evs) in by_rank {
        evs.sort_by_key(|e| e.t_ns);
        let mut st = RankTraceStats {
            rank,
            balanced: true,
            ..RankTraceStats::default()
        };
        let mut open: Option<u64> = None;
        for e in &evs {
            match e.kind {
                EventKind::WaitBegin => {
                    if open.is_some() {
                        st.balanced = false;
                    }
                    open = Some(e.t_ns);
                }
                EventKind::WaitEnd => match open.take() {
                    Some(t0) => st.wait_ns += e.t_ns - t0,
                    None => st.balanced = false,
                },
                EventKind::Send => {
                    st.sends += 1;
                    if let EventDetail::Message { peer, .. } = e.detail {
                        *summary.messages.entry((rank, peer)).or_default() += 1;
                    }
                }
                EventKind::Recv => st.recvs += 1,
                EventKind::PhaseBegin | EventKind::PhaseEnd => {}
            }
        }
        if open.is_some() {
            st.balanced = false;
        }
        st.span_ns = match (evs.first(), evs.last()) {
            (Some(a), Some(b)) => b.t_ns - a.t_ns,
            _ => 0,
        };
        st.wait_fraction = if st.span_ns > 0 {
            st.wait_ns as f64 / st.span_ns as f64
        } else {
            0.0
        };
        summary.ranks.push(st);
    }
    summary
}

impl TraceSummary {
    pub fn total_wait_ns(&self) -> u64 {
        self.ranks.iter().map(|r| r.wait_ns).sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>4}  {:>12}  {:>12}  {:>9}  {:>7}  {:>7}  balanced",
            "rank", "wait_ms", "span_ms", "wait_frac", "sends", "recvs"
        );
        for r in &self.ranks {
            let _ = writeln!(
                out,
                "{:>4}  {:>12.3}  {:>12.3}  {:>9.4}  {:>7}  {:>7}  {}",
                r.rank,
                r.wait_ns as f64 / 1e6,
                r.span_ns as f64 / 1e6,
                r.wait_fraction,
                r.sends,
                r.recvs,
                if r.balanced { "yes" } else { "no" }
            );
        }
        let _ = writeln!(out, "\nmessages (sender -> receiver: count)");
        for ((from, to), n) in &self.messages {
            let _ = writeln!(out, "{from} -> {to}: {n}");
        }
        out
    }
}
