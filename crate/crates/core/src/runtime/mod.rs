//! In-process rank runtime.
//!
//! Each rank is an OS thread with a private address space in all but name:
//! ranks share nothing except the message fabric. Messages are byte buffers
//! addressed by (source, tag, sequence number); sequence numbers are kept per
//! (peer, tag) channel, so two messages on one channel are always received in
//! the order they were sent.

mod exchange;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::instrument::{Recorder, RecorderOptions, Recording};

pub use exchange::{
    decode_emigrants, encode_emigrants, exchange_halo, exchange_particles, fold_halo,
    Immigrants,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Message tags. Halo and particle tags are named by direction of travel:
/// `HaloRight` moves data to the right neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    HaloLeft,
    HaloRight,
    ParticlesLeft,
    ParticlesRight,
    Gather,
    Scatter,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::HaloLeft,
        Tag::HaloRight,
        Tag::ParticlesLeft,
        Tag::ParticlesRight,
        Tag::Gather,
        Tag::Scatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::HaloLeft => "halo-left",
            Tag::HaloRight => "halo-right",
            Tag::ParticlesLeft => "particles-left",
            Tag::ParticlesRight => "particles-right",
            Tag::Gather => "gather",
            Tag::Scatter => "scatter",
        }
    }

    pub fn from_name(s: &str) -> Option<Tag> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    fn neighbor_only(self) -> bool {
        !matches!(self, Tag::Gather | Tag::Scatter)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagStats {
    pub sends: u64,
    pub recvs: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub wait_ns: u64,
}

/// Communication accounting of one rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommClock {
    pub rank: usize,
    /// Time blocked in `wait` on receives.
    pub wait_ns: u64,
    /// Time spent inside `isend`/`irecv` themselves.
    pub call_ns: u64,
    pub sends: u64,
    pub recvs: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub per_tag: BTreeMap<Tag, TagStats>,
}

impl CommClock {
    pub fn mpi_ns(&self) -> u64 {
        self.wait_ns + self.call_ns
    }
}

type Key = (usize, Tag, u64);

struct Inbox {
    slots: Mutex<HashMap<Key, Vec<u8>>>,
    ready: Condvar,
}

/// Shared mailboxes of all ranks.
pub struct Fabric {
    inboxes: Vec<Inbox>,
    aborted: AtomicBool,
    timeout: Duration,
}

impl Fabric {
    pub fn new(n_ranks: usize, timeout: Duration) -> Self {
        Self {
            inboxes: (0..n_ranks)
                .map(|_| Inbox {
                    slots: Mutex::new(HashMap::new()),
                    ready: Condvar::new(),
                })
                .collect(),
            aborted: AtomicBool::new(false),
            timeout,
        }
    }

    pub fn n_ranks(&self) -> usize {
        self.inboxes.len()
    }

    /// Wakes every blocked rank and makes further waits fail.
    pub fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        for inbox in &self.inboxes {
            let _guard = inbox.slots.lock().unwrap_or_else(|e| e.into_inner());
            inbox.ready.notify_all();
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }

    fn deposit(&self, to: usize, key: Key, payload: Vec<u8>) {
        let inbox = &self.inboxes[to];
        let mut slots = inbox.slots.lock().unwrap_or_else(|e| e.into_inner());
        slots.insert(key, payload);
        inbox.ready.notify_all();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HandleKind {
    Send,
    Recv,
}

/// A posted, not yet completed operation.
#[derive(Debug)]
#[must_use = "every handle must be waited on"]
pub struct MessageHandle {
    id: u64,
    peer: usize,
    tag: Tag,
    seq: u64,
    kind: HandleKind,
    done: bool,
}

impl MessageHandle {
    pub fn peer(&self) -> usize {
        self.peer
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }
}

/// One rank's view of the fabric.
pub struct Endpoint<'f> {
    sub: Subdomain,
    fabric: &'f Fabric,
    recorder: Recorder,
    clock: RefCell<CommClock>,
    send_seq: RefCell<HashMap<(usize, Tag), u64>>,
    recv_seq: RefCell<HashMap<(usize, Tag), u64>>,
    next_id: Cell<u64>,
    outstanding: Cell<usize>,
}

impl<'f> Endpoint<'f> {
    pub fn new(sub: Subdomain, fabric: &'f Fabric, recorder: Recorder) -> Self {
        Self {
            sub,
            fabric,
            recorder,
            clock: RefCell::new(CommClock {
                rank: sub.rank,
                ..CommClock::default()
            }),
            send_seq: RefCell::new(HashMap::new()),
            recv_seq: RefCell::new(HashMap::new()),
            next_id: Cell::new(0),
            outstanding: Cell::new(0),
        }
    }

    pub fn rank(&self) -> usize {
        self.sub.rank
    }

    pub fn n_ranks(&self) -> usize {
        self.sub.n_ranks
    }

    pub fn subdomain(&self) -> &Subdomain {
        &self.sub
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn clock(&self) -> CommClock {
        self.clock.borrow().clone()
    }

    fn check_topology(&self, peer: usize, tag: Tag) -> Result<()> {
        let me = self.sub.rank;
        let ok = peer < self.sub.n_ranks
            && if tag.neighbor_only() {
                self.sub.is_neighbor(peer)
            } else {
                me == 0 || peer == 0
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Topology {
                from: me,
                to: peer,
                tag,
            })
        }
    }

    fn next_seq(map: &RefCell<HashMap<(usize, Tag), u64>>, peer: usize, tag: Tag) -> u64 {
        let mut m = map.borrow_mut();
        let slot = m.entry((peer, tag)).or_insert(0);
        let seq = *slot;
        *slot += 1;
        seq
    }

    fn handle(&self, peer: usize, tag: Tag, seq: u64, kind: HandleKind) -> MessageHandle {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        self.outstanding.set(self.outstanding.get() + 1);
        MessageHandle {
            id,
            peer,
            tag,
            seq,
            kind,
            done: false,
        }
    }

    /// Posts a send. The payload is handed to the fabric immediately; the
    /// handle still has to be waited on.
    pub fn isend(&self, to: usize, tag: Tag, payload: Vec<u8>) -> Result<MessageHandle> {
        self.check_topology(to, tag)?;
        let t0 = Instant::now();
        let bytes = payload.len() as u64;
        let seq = Self::next_seq(&self.send_seq, to, tag);
        self.fabric.deposit(to, (self.sub.rank, tag, seq), payload);
        let t1 = Instant::now();
        {
            let mut c = self.clock.borrow_mut();
            c.call_ns += t1.duration_since(t0).as_nanos() as u64;
            c.sends += 1;
            c.bytes_sent += bytes;
            let t = c.per_tag.entry(tag).or_default();
            t.sends += 1;
            t.bytes_sent += bytes;
        }
        self.recorder.send_event(t0, to, tag, bytes);
        Ok(self.handle(to, tag, seq, HandleKind::Send))
    }

    pub fn irecv(&self, from: usize, tag: Tag) -> Result<MessageHandle> {
        self.check_topology(from, tag)?;
        let t0 = Instant::now();
        let seq = Self::next_seq(&self.recv_seq, from, tag);
        let h = self.handle(from, tag, seq, HandleKind::Recv);
        self.clock.borrow_mut().call_ns += t0.elapsed().as_nanos() as u64;
        Ok(h)
    }

    /// Completes a handle. Receives block until the message arrives and
    /// return its payload; sends return an empty buffer.
    pub fn wait(&self, handle: &mut MessageHandle) -> Result<Vec<u8>> {
        if handle.done {
            return Err(Error::DoubleWait {
                rank: self.sub.rank,
                id: handle.id,
            });
        }
        handle.done = true;
        self.outstanding.set(self.outstanding.get() - 1);
        if handle.kind == HandleKind::Send {
            return Ok(Vec::new());
        }
        let key = (handle.peer, handle.tag, handle.seq);
        let inbox = &self.fabric.inboxes[self.sub.rank];
        let t0 = Instant::now();
        let deadline = t0 + self.fabric.timeout;
        let mut slots = inbox.slots.lock().unwrap_or_else(|e| e.into_inner());
        let payload = loop {
            if let Some(p) = slots.remove(&key) {
                break p;
            }
            if self.fabric.is_aborted() {
                return Err(Error::Aborted { rank: self.sub.rank });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Deadlock {
                    rank: self.sub.rank,
                    peer: handle.peer,
                    tag: handle.tag,
                    secs: self.fabric.timeout.as_secs_f64(),
                });
            }
            slots = inbox
                .ready
                .wait_timeout(slots, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        };
        drop(slots);
        let t1 = Instant::now();
        let d = t1.duration_since(t0).as_nanos() as u64;
        let bytes = payload.len() as u64;
        {
            let mut c = self.clock.borrow_mut();
            c.wait_ns += d;
            c.recvs += 1;
            c.bytes_received += bytes;
            let t = c.per_tag.entry(handle.tag).or_default();
            t.recvs += 1;
            t.bytes_received += bytes;
            t.wait_ns += d;
        }
        self.recorder
            .wait_span(t0, t1, handle.peer, handle.tag, bytes);
        Ok(payload)
    }

    /// Closes the endpoint, failing if any handle was never waited on.
    pub fn finish(self) -> Result<(CommClock, Recording)> {
        let outstanding = self.outstanding.get();
        if outstanding > 0 {
            return Err(Error::UnwaitedHandles {
                rank: self.sub.rank,
                count: outstanding,
            });
        }
        let recording = self.recorder.finish()?;
        Ok((self.clock.into_inner(), recording))
    }
}

/// Settings shared by all ranks of one launch.
#[derive(Debug, Clone, Copy)]
pub struct LaunchOptions {
    pub timeout: Duration,
    pub recorder: RecorderOptions,
    /// Rank whose compute phases are stretched by `recorder.slowdown`.
    pub slow_rank: Option<usize>,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            recorder: RecorderOptions::default(),
            slow_rank: None,
        }
    }
}

/// What one rank produced.
#[derive(Debug)]
pub struct RankOutput<T> {
    pub rank: usize,
    pub value: T,
    pub clock: CommClock,
    pub recording: Recording,
}

/// Runs `body` once per rank on its own thread and joins them. If any rank
/// fails the fabric is aborted so that no other rank blocks forever; the
/// first failure (by rank) is returned, preferring root causes over the
/// `Aborted` errors they trigger.
pub fn spawn_ranks<T, F>(
    n_cells: usize,
    n_ranks: usize,
    periodic: bool,
    opts: LaunchOptions,
    body: F,
) -> Result<Vec<RankOutput<T>>>
where
    T: Send,
    F: Fn(&Endpoint<'_>) -> Result<T> + Sync,
{
    if n_ranks == 0 || n_ranks > n_cells {
        return Err(Error::Validation(format!(
            "cannot split {n_cells} cells over {n_ranks} ranks"
        )));
    }
    let fabric = Fabric::new(n_ranks, opts.timeout);
    let epoch = Instant::now();
    let results: Vec<Result<RankOutput<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_ranks)
            .map(|rank| {
                let fabric = &fabric;
                let body = &body;
                std::thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(scope, move || {
                        let mut rec_opts = opts.recorder;
                        if opts.slow_rank != Some(rank) {
                            rec_opts.slowdown = None;
                        }
                        let sub = Subdomain::new(n_cells, n_ranks, rank, periodic);
                        let ep = Endpoint::new(sub, fabric, Recorder::new(rank, epoch, rec_opts));
                        let out = body(&ep).and_then(|value| {
                            let (clock, recording) = ep.finish()?;
                            Ok(RankOutput {
                                rank,
                                value,
                                clock,
                                recording,
                            })
                        });
                        if out.is_err() {
                            fabric.abort();
                        }
                        out
                    })
                    .expect("failed to spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| match h.join() {
                Ok(r) => r,
                Err(panic) => {
                    fabric.abort();
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".into());
                    Err(Error::RankPanic { rank, msg })
                }
            })
            .collect()
    });

    let mut outputs = Vec::with_capacity(n_ranks);
    let mut first_err: Option<Error> = None;
    for (rank, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outputs.push(o),
            Err(e) => {
                let secondary = matches!(e, Error::Aborted { .. });
                let wrapped = match e {
                    e @ (Error::RankPanic { .. } | Error::Aborted { .. }) => e,
                    e => Error::Rank {
                        rank,
                        source: Box::new(e),
                    },
                };
                let replace = match &first_err {
                    None => true,
                    Some(Error::Aborted { .. }) => !secondary,
                    Some(_) => false,
                };
                if replace {
                    first_err = Some(wrapped);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(outputs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn launch<T: Send>(
        n_ranks: usize,
        periodic: bool,
        body: impl Fn(&Endpoint<'_>) -> Result<T> + Sync,
    ) -> Result<Vec<RankOutput<T>>> {
        spawn_ranks(
            16,
            n_ranks,
            periodic,
            LaunchOptions {
                timeout: Duration::from_secs(5),
                ..LaunchOptions::default()
            },
            body,
        )
    }

    #[test]
    fn messages_on_one_channel_arrive_in_order() {
        let out = launch(2, false, |ep| {
            if ep.rank() == 0 {
                let mut hs = Vec::new();
                for i in 0..50u8 {
                    hs.push(ep.isend(1, Tag::HaloRight, vec![i])?);
                }
                for h in &mut hs {
                    ep.wait(h)?;
                }
                Ok(Vec::new())
            } else {
                let mut got = Vec::new();
                for _ in 0..50 {
                    let mut h = ep.irecv(0, Tag::HaloRight)?;
                    got.push(ep.wait(&mut h)?[0]);
                }
                Ok(got)
            }
        })
        .unwrap();
        assert_eq!(out[1].value, (0..50).collect::<Vec<u8>>());
        assert_eq!(out[0].clock.sends, 50);
        assert_eq!(out[1].clock.recvs, 50);
    }

    #[test]
    fn non_neighbor_halo_is_a_topology_error() {
        let err = launch(4, false, |ep| {
            if ep.rank() == 0 {
                let _h = ep.isend(2, Tag::HaloRight, vec![])?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Rank { rank: 0, ref source } if matches!(**source, Error::Topology { from: 0, to: 2, .. })
        ));
    }

    #[test]
    fn gather_must_target_root() {
        let err = launch(4, false, |ep| {
            if ep.rank() == 1 {
                let _h = ep.isend(2, Tag::Gather, vec![])?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Rank { rank: 1, .. }));
    }

    #[test]
    fn double_wait_is_rejected() {
        let err = launch(2, false, |ep| {
            let peer = 1 - ep.rank();
            let mut s = ep.isend(peer, Tag::HaloLeft, vec![1])?;
            let mut r = ep.irecv(peer, Tag::HaloLeft)?;
            ep.wait(&mut s)?;
            ep.wait(&mut r)?;
            ep.wait(&mut r)?;
            Ok(())
        })
        .unwrap_err();
        assert!(err.to_string().contains("already waited"), "{err}");
    }

    #[test]
    fn unmatched_receive_times_out_as_deadlock() {
        let err = spawn_ranks(
            4,
            2,
            false,
            LaunchOptions {
                timeout: Duration::from_millis(200),
                ..LaunchOptions::default()
            },
            |ep| {
                if ep.rank() == 0 {
                    let mut h = ep.irecv(1, Tag::HaloLeft)?;
                    ep.wait(&mut h)?;
                }
                Ok(())
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("deadlock"), "{err}");
    }

    #[test]
    fn failing_rank_unblocks_others() {
        let t0 = Instant::now();
        let err = launch(3, false, |ep| {
            if ep.rank() == 2 {
                return Err(Error::Usage("boom".into()));
            }
            if ep.rank() == 1 {
                let mut h = ep.irecv(2, Tag::HaloLeft)?;
                ep.wait(&mut h)?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(t0.elapsed() < Duration::from_secs(4));
        assert!(matches!(err, Error::Rank { rank: 2, .. }), "{err}");
    }

    #[test]
    fn unwaited_handle_is_reported() {
        let err = launch(2, false, |ep| {
            let peer = 1 - ep.rank();
            let h = ep.isend(peer, Tag::HaloLeft, vec![])?;
            std::mem::forget(h);
            Ok(())
        })
        .unwrap_err();
        assert!(err.to_string().contains("un-waited"), "{err}");
    }

    #[test]
    fn panics_are_reported_with_rank() {
        let err = launch(2, false, |ep| {
            if ep.rank() == 1 {
                panic!("kaboom");
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::RankPanic { rank: 1, ref msg } if msg == "kaboom"));
    }

    #[test]
    fn tag_names_round_trip() {
        for t in Tag::ALL {
            assert_eq!(Tag::from_name(t.name()), Some(t));
        }
    }
}
