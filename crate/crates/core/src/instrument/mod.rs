//! Phase timers, trace events and I/O records.
//!
//! Every rank owns one [`Recorder`]. Phase scopes accumulate inclusive and
//! exclusive wall time plus exclusive thread CPU time per [`PhaseId`]; waits
//! reported by the runtime are booked under [`PhaseId::Wait`] using the same
//! timestamps as the communication clock, so the profile, the clock and the
//! trace agree exactly. Nothing is written to disk until the run has ended.

mod report;
mod trace;

use std::cell::RefCell;
use std::fmt;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::runtime::Tag;

pub use report::{
    breakdown_report, comm_report, detect_groups, io_report, working_set_report, Breakdown,
    BreakdownRow, CommReport, CommRow, IoReport, IoRow, WorkingSetReport, WorkingSetRow,
    DEFAULT_LLC_MIB,
};
pub use trace::{read_trace, trace_summary, write_trace, RankTraceStats, TraceSummary, TRACE_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseId {
    Deposit,
    Smooth,
    FieldSolve,
    Collisions,
    Mover,
    Sort,
    HaloExchange,
    ParticleExchange,
    Wait,
    Diagnostics,
    Checkpoint,
}

impl PhaseId {
    pub const ALL: [PhaseId; 11] = [
        PhaseId::Deposit,
        PhaseId::Smooth,
        PhaseId::FieldSolve,
        PhaseId::Collisions,
        PhaseId::Mover,
        PhaseId::Sort,
        PhaseId::HaloExchange,
        PhaseId::ParticleExchange,
        PhaseId::Wait,
        PhaseId::Diagnostics,
        PhaseId::Checkpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhaseId::Deposit => "Deposit",
            PhaseId::Smooth => "Smooth",
            PhaseId::FieldSolve => "FieldSolve",
            PhaseId::Collisions => "Collisions",
            PhaseId::Mover => "Mover",
            PhaseId::Sort => "Sort",
            PhaseId::HaloExchange => "HaloExchange",
            PhaseId::ParticleExchange => "ParticleExchange",
            PhaseId::Wait => "Wait",
            PhaseId::Diagnostics => "Diagnostics",
            PhaseId::Checkpoint => "Checkpoint",
        }
    }

    pub fn from_name(name: &str) -> Option<PhaseId> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Phases that do local numerical work; an injected slowdown stretches
    /// only these.
    pub fn is_compute(self) -> bool {
        matches!(
            self,
            PhaseId::Deposit
                | PhaseId::Smooth
                | PhaseId::FieldSolve
                | PhaseId::Collisions
                | PhaseId::Mover
                | PhaseId::Sort
        )
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseStats {
    pub calls: u64,
    pub inclusive_ns: u64,
    pub self_ns: u64,
    /// Thread CPU time spent in the phase itself, excluding nested phases.
    pub cpu_self_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileRecord {
    pub rank: usize,
    pub phases: [PhaseStats; 11],
    /// Wall time from recorder creation to finish.
    pub wall_ns: u64,
}

impl ProfileRecord {
    pub fn get(&self, phase: PhaseId) -> &PhaseStats {
        &self.phases[phase.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    PhaseBegin,
    PhaseEnd,
    Send,
    Recv,
    WaitBegin,
    WaitEnd,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::PhaseBegin => "PhaseBegin",
            EventKind::PhaseEnd => "PhaseEnd",
            EventKind::Send => "Send",
            EventKind::Recv => "Recv",
            EventKind::WaitBegin => "WaitBegin",
            EventKind::WaitEnd => "WaitEnd",
        }
    }

    pub fn from_name(s: &str) -> Option<EventKind> {
        [
            EventKind::PhaseBegin,
            EventKind::PhaseEnd,
            EventKind::Send,
            EventKind::Recv,
            EventKind::WaitBegin,
            EventKind::WaitEnd,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventDetail {
    Phase(PhaseId),
    Message { peer: usize, tag: Tag, bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub t_ns: u64,
    pub rank: usize,
    pub kind: EventKind,
    pub detail: EventDetail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FileKind {
    Dat,
    Dmp,
}

impl FileKind {
    pub fn name(self) -> &'static str {
        match self {
            FileKind::Dat => "dat",
            FileKind::Dmp => "dmp",
        }
    }
}

/// One file written by one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRecord {
    pub rank: usize,
    pub path: std::path::PathBuf,
    pub kind: FileKind,
    pub bytes_written: u64,
    pub open_count: u32,
    /// Offsets from run start.
    pub start_ns: u64,
    pub end_ns: u64,
}

impl IoRecord {
    pub fn write_time_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

/// Per-thread CPU clock in nanoseconds.
pub fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecorderOptions {
    pub profile: bool,
    pub trace: bool,
    /// Stretch every compute phase to this multiple of its CPU time by
    /// spinning at the end of the phase.
    pub slowdown: Option<f64>,
}

struct Frame {
    phase: PhaseId,
    start: Instant,
    cpu_start: u64,
    child_wall: u64,
    child_cpu: u64,
}

struct Inner {
    stack: Vec<Frame>,
    record: ProfileRecord,
    events: Vec<TraceEvent>,
    injected_ns: u64,
    error: Option<String>,
}

pub struct Recorder {
    rank: usize,
    epoch: Instant,
    created: Instant,
    opts: RecorderOptions,
    inner: RefCell<Inner>,
}

/// Output of a finished recorder.
#[derive(Debug, Clone, Default)]
pub struct Recording {
    pub profile: ProfileRecord,
    pub events: Vec<TraceEvent>,
    pub injected_ns: u64,
}

impl Recorder {
    pub fn new(rank: usize, epoch: Instant, opts: RecorderOptions) -> Self {
        Self {
            rank,
            epoch,
            created: Instant::now(),
            opts,
            inner: RefCell::new(Inner {
                stack: Vec::new(),
                record: ProfileRecord {
                    rank,
                    ..ProfileRecord::default()
                },
                events: Vec::new(),
                injected_ns: 0,
                error: None,
            }),
        }
    }

    pub fn disabled(rank: usize) -> Self {
        Self::new(rank, Instant::now(), RecorderOptions::default())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    pub fn tracing(&self) -> bool {
        self.opts.trace
    }

    fn active(&self) -> bool {
        self.opts.profile || self.opts.trace || self.opts.slowdown.is_some()
    }

    fn offset_ns(&self, t: Instant) -> u64 {
        t.saturating_duration_since(self.epoch).as_nanos() as u64
    }

    pub fn begin(&self, phase: PhaseId) {
        if !self.active() {
            return;
        }
        let start = Instant::now();
        let cpu_start = if self.opts.profile || self.opts.slowdown.is_some() {
            thread_cpu_ns()
        } else {
            0
        };
        let mut inner = self.inner.borrow_mut();
        if self.opts.trace {
            let t_ns = self.offset_ns(start);
            inner.events.push(TraceEvent {
                t_ns,
                rank: self.rank,
                kind: EventKind::PhaseBegin,
                detail: EventDetail::Phase(phase),
            });
        }
        inner.stack.push(Frame {
            phase,
            start,
            cpu_start,
            child_wall: 0,
            child_cpu: 0,
        });
    }

    /// Closes the innermost open phase, which must be `phase`.
    pub fn end(&self, phase: PhaseId) -> Result<()> {
        if !self.active() {
            return Ok(());
        }
        let top = self.inner.borrow().stack.last().map(|f| f.phase);
        if top != Some(phase) {
            let msg = match top {
                Some(open) => format!("rank {}: closing {phase} while {open} is open", self.rank),
                None => format!("rank {}: closing {phase} with no open phase", self.rank),
            };
            self.inner.borrow_mut().error.get_or_insert(msg.clone());
            return Err(Error::Instrumentation(msg));
        }
        let mut cpu_now = if self.opts.profile || self.opts.slowdown.is_some() {
            thread_cpu_ns()
        } else {
            0
        };
        if let Some(factor) = self.opts.slowdown.filter(|_| phase.is_compute()) {
            let (cpu_start, child_cpu) = {
                let inner = self.inner.borrow();
                let f = inner.stack.last().expect("frame checked above");
                (f.cpu_start, f.child_cpu)
            };
            let own = cpu_now.saturating_sub(cpu_start).saturating_sub(child_cpu);
            let extra = ((factor - 1.0).max(0.0) * own as f64) as u64;
            let target = cpu_now + extra;
            while cpu_now < target {
                std::hint::spin_loop();
                cpu_now = thread_cpu_ns();
            }
            self.inner.borrow_mut().injected_ns += extra;
        }
        let end = Instant::now();
        let mut inner = self.inner.borrow_mut();
        let frame = inner.stack.pop().expect("frame checked above");
        let inclusive = end.saturating_duration_since(frame.start).as_nanos() as u64;
        let cpu_inclusive = cpu_now.saturating_sub(frame.cpu_start);
        let stats = &mut inner.record.phases[phase.index()];
        stats.calls += 1;
        stats.inclusive_ns += inclusive;
        stats.self_ns += inclusive.saturating_sub(frame.child_wall);
        stats.cpu_self_ns += cpu_inclusive.saturating_sub(frame.child_cpu);
        if let Some(parent) = inner.stack.last_mut() {
            parent.child_wall += inclusive;
            parent.child_cpu += cpu_inclusive;
        }
        if self.opts.trace {
            let t_ns = self.offset_ns(end);
            inner.events.push(TraceEvent {
                t_ns,
                rank: self.rank,
                kind: EventKind::PhaseEnd,
                detail: EventDetail::Phase(phase),
            });
        }
        Ok(())
    }

    pub fn scope(&self, phase: PhaseId) -> PhaseGuard<'_> {
        self.begin(phase);
        PhaseGuard {
            recorder: self,
            phase,
        }
    }

    /// Books a blocking wait measured by the runtime between `t0` and `t1`.
    pub fn wait_span(&self, t0: Instant, t1: Instant, peer: usize, tag: Tag, bytes: u64) {
        if !self.active() {
            return;
        }
        let d = t1.saturating_duration_since(t0).as_nanos() as u64;
        let mut inner = self.inner.borrow_mut();
        let stats = &mut inner.record.phases[PhaseId::Wait.index()];
        stats.calls += 1;
        stats.inclusive_ns += d;
        stats.self_ns += d;
        if let Some(parent) = inner.stack.last_mut() {
            parent.child_wall += d;
        }
        if self.opts.trace {
            let (b, e) = (self.offset_ns(t0), self.offset_ns(t1));
            let detail = EventDetail::Message { peer, tag, bytes };
            inner.events.push(TraceEvent {
                t_ns: b,
                rank: self.rank,
                kind: EventKind::WaitBegin,
                detail,
            });
            inner.events.push(TraceEvent {
                t_ns: e,
                rank: self.rank,
                kind: EventKind::WaitEnd,
                detail,
            });
            inner.events.push(TraceEvent {
                t_ns: e,
                rank: self.rank,
                kind: EventKind::Recv,
                detail,
            });
        }
    }

    pub fn send_event(&self, t: Instant, peer: usize, tag: Tag, bytes: u64) {
        if self.opts.trace {
            let t_ns = self.offset_ns(t);
            self.inner.borrow_mut().events.push(TraceEvent {
                t_ns,
                rank: self.rank,
                kind: EventKind::Send,
                detail: EventDetail::Message { peer, tag, bytes },
            });
        }
    }

    pub fn finish(self) -> Result<Recording> {
        let wall_ns = self.created.elapsed().as_nanos() as u64;
        let inner = self.inner.into_inner();
        if let Some(msg) = inner.error {
            return Err(Error::Instrumentation(msg));
        }
        if let Some(open) = inner.stack.last() {
            return Err(Error::Instrumentation(format!(
                "rank {}: phase {} never closed",
                self.rank, open.phase
            )));
        }
        let mut profile = inner.record;
        profile.wall_ns = wall_ns;
        Ok(Recording {
            profile,
            events: inner.events,
            injected_ns: inner.injected_ns,
        })
    }
}

pub struct PhaseGuard<'a> {
    recorder: &'a Recorder,
    phase: PhaseId,
}

impl Drop for PhaseGuard<'_> {
    fn drop(&mut self) {
        // A mismatch is recorded inside the recorder and surfaces in finish().
        let _ = self.recorder.end(self.phase);
    }
}
