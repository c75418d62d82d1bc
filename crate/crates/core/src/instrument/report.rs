//! Post-run reports: phase breakdown, communication, I/O and working set.
//!
//! Each report renders as a plain-text table and as CSV; the CSV form can
//! be read back so tables can be re-rendered from stored artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{FileKind, IoRecord, PhaseId, ProfileRecord};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::particles::{grid_bytes, PARTICLE_RECORD_BYTES};
use crate::runtime::CommClock;

/// Last-level cache size used as the working-set threshold, in MiB.
pub const DEFAULT_LLC_MIB: f64 = 16.38;

/// Simple fixed-width table with a header rule.
fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&width)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut header.iter().copied());
    let _ = writeln!(
        out,
        "{}",
        width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
    );
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}

pub(crate) fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_owned(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |source| Error::Csv {
        path: path.to_owned(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub phase: String,
    /// Share of the summed exclusive CPU time of all phases.
    pub percent: f64,
    pub cpu_ns: u64,
    /// Exclusive wall time.
    pub wall_ns: u64,
    pub calls: u64,
}

/// Merged phase breakdown of all ranks, largest share first. Shares use
/// exclusive CPU time, so time a rank spends blocked or descheduled does not
/// count towards any phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    pub rows: Vec<BreakdownRow>,
}

pub const BREAKDOWN_HEADER: [&str; 5] = ["phase", "percent", "cpu_ns", "wall_ns", "calls"];

pub fn breakdown_report(records: &[ProfileRecord]) -> Breakdown {
    let mut rows: Vec<BreakdownRow> = PhaseId::ALL
        .iter()
        .map(|&p| {
            let (mut cpu, mut wall, mut calls) = (0, 0, 0);
            for r in records {
                let s = r.get(p);
                cpu += s.cpu_self_ns;
                wall += s.self_ns;
                calls += s.calls;
            }
            BreakdownRow {
                phase: p.name().to_owned(),
                percent: 0.0,
                cpu_ns: cpu,
                wall_ns: wall,
                calls,
            }
        })
        .collect();
    let total: u64 = rows.iter().map(|r| r.cpu_ns).sum();
    if total > 0 {
        for r in &mut rows {
            r.percent = 100.0 * r.cpu_ns as f64 / total as f64;
        }
    }
    // Stable sort keeps enum order among ties.
    rows.sort_by(|a, b| b.cpu_ns.cmp(&a.cpu_ns));
    Breakdown { rows }
}

impl Breakdown {
    pub fn top(&self) -> Option<&BreakdownRow> {
        self.rows.first()
    }

    pub fn share(&self, phase: PhaseId) -> f64 {
        self.rows
            .iter()
            .find(|r| r.phase == phase.name())
            .map_or(0.0, |r| r.percent)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.phase.clone(),
                    format!("{:.2}", r.percent),
                    format!("{:.3}", r.cpu_ns as f64 / 1e6),
                    format!("{:.3}", r.wall_ns as f64 / 1e6),
                    r.calls.to_string(),
                ]
            })
            .collect();
        render(&["phase", "percent", "cpu_ms", "wall_ms", "calls"], &rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &self.rows, &BREAKDOWN_HEADER)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self {
            rows: read_csv_rows(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRow {
    pub rank: usize,
    /// Wait plus call time.
    pub mpi_ns: u64,
    pub wait_ns: u64,
    pub call_ns: u64,
    pub sends: u64,
    pub recvs: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub group: usize,
}

pub const COMM_HEADER: [&str; 9] = [
    "rank",
    "mpi_ns",
    "wait_ns",
    "call_ns",
    "sends",
    "recvs",
    "bytes_sent",
    "bytes_received",
    "group",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommReport {
    pub rows: Vec<CommRow>,
}

/// Clusters values in 1D: sorted values are split wherever two neighbors
/// differ by more than `frac` of the maximum. Returns a group id per input,
/// numbered from the smallest values up.
pub fn detect_groups(values: &[f64], frac: f64) -> Vec<usize> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut group = vec![0; values.len()];
    let mut g = 0;
    for w in order.windows(2) {
        if values[w[1]] - values[w[0]] > frac * max {
            g += 1;
        }
        group[w[1]] = g;
    }
    group
}

pub fn comm_report(clocks: &[CommClock]) -> CommReport {
    let mpi: Vec<f64> = clocks.iter().map(|c| c.mpi_ns() as f64).collect();
    let groups = detect_groups(&mpi, 0.2);
    let mut rows: Vec<CommRow> = clocks
        .iter()
        .zip(groups)
        .map(|(c, group)| CommRow {
            rank: c.rank,
            mpi_ns: c.mpi_ns(),
            wait_ns: c.wait_ns,
            call_ns: c.call_ns,
            sends: c.sends,
            recvs: c.recvs,
            bytes_sent: c.bytes_sent,
            bytes_received: c.bytes_received,
            group,
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    CommReport { rows }
}

impl CommReport {
    pub fn n_groups(&self) -> usize {
        self.rows.iter().map(|r| r.group + 1).max().unwrap_or(0)
    }

    /// Ranks of each group, in rank order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.n_groups()];
        for r in &self.rows {
            g[r.group].push(r.rank);
        }
        g
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.rank.to_string(),
                    format!("{:.3}", r.mpi_ns as f64 / 1e6),
                    format!("{:.3}", r.wait_ns as f64 / 1e6),
                    format!("{:.3}", r.call_ns as f64 / 1e6),
                    r.sends.to_string(),
                    r.recvs.to_string(),
                    r.bytes_sent.to_string(),
                    r.bytes_received.to_string(),
                    r.group.to_string(),
                ]
            })
            .collect();
        let mut out = render(
            &[
                "rank", "mpi_ms", "wait_ms", "call_ms", "sends", "recvs", "bytes_sent",
                "bytes_recv", "group",
            ],
            &rows,
        );
        for (i, g) in self.groups().iter().enumerate() {
            let _ = writeln!(out, "group {i}: ranks {g:?}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &self.rows, &COMM_HEADER)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self {
            rows: read_csv_rows(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoRow {
    /// A rank id, or `all`.
    pub scope: String,
    /// `dat`, `dmp` or `all`.
    pub kind: String,
    pub files: u64,
    pub bytes: u64,
    /// Sum of per-file write times.
    pub write_ns: u64,
    /// From the first open to the last close.
    pub window_ns: u64,
    pub mib_per_s: f64,
}

pub const IO_HEADER: [&str; 7] = [
    "scope",
    "kind",
    "files",
    "bytes",
    "write_ns",
    "window_ns",
    "mib_per_s",
];

#[derive(Debug, Clone, PartialEq)]
pub struct IoReport {
    pub rows: Vec<IoRow>,
}

fn io_row(scope: String, kind: &str, recs: &[&IoRecord]) -> Option<IoRow> {
    if recs.is_empty() {
        return None;
    }
    let bytes: u64 = recs.iter().map(|r| r.bytes_written).sum();
    let start = recs.iter().map(|r| r.start_ns).min().unwrap_or(0);
    let end = recs.iter().map(|r| r.end_ns).max().unwrap_or(0);
    let window = end - start;
    Some(IoRow {
        scope,
        kind: kind.to_owned(),
        files: recs.len() as u64,
        bytes,
        write_ns: recs.iter().map(|r| r.write_time_ns()).sum(),
        window_ns: window,
        mib_per_s: if window > 0 {
            bytes as f64 / (1024.0 * 1024.0) / (window as f64 * 1e-9)
        } else {
            0.0
        },
    })
}

/// Write bandwidth per rank and in aggregate, split by file kind.
pub fn io_report(records: &[IoRecord]) -> IoReport {
    let mut ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
    ranks.sort_unstable();
    ranks.dedup();
    let mut rows = Vec::new();
    let scopes = ranks
        .iter()
        .map(|&r| (r.to_string(), Some(r)))
        .chain(std::iter::once(("all".to_owned(), None)));
    for (name, rank) in scopes {
        let in_scope: Vec<&IoRecord> = records
            .iter()
            .filter(|r| rank.is_none_or(|k| r.rank == k))
            .collect();
        for kind in [Some(FileKind::Dat), Some(FileKind::Dmp), None] {
            let recs: Vec<&IoRecord> = in_scope
                .iter()
                .copied()
                .filter(|r| kind.is_none_or(|k| r.kind == k))
                .collect();
            rows.extend(io_row(name.clone(), kind.map_or("all", FileKind::name), &recs));
        }
    }
    IoReport { rows }
}

impl IoReport {
    pub fn aggregate(&self, kind: &str) -> Option<&IoRow> {
        self.rows.iter().find(|r| r.scope == "all" && r.kind == kind)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.scope.clone(),
                    r.kind.clone(),
                    r.files.to_string(),
                    r.bytes.to_string(),
                    format!("{:.3}", r.write_ns as f64 / 1e6),
                    format!("{:.3}", r.window_ns as f64 / 1e6),
                    format!("{:.1}", r.mib_per_s),
                ]
            })
            .collect();
        render(
            &["scope", "kind", "files", "bytes", "write_ms", "window_ms", "MiB/s"],
            &rows,
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &self.rows, &IO_HEADER)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self {
            rows: read_csv_rows(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingSetRow {
    pub ranks: usize,
    /// Largest per-rank working set at load time.
    pub bytes_per_rank: u64,
    pub threshold_bytes: u64,
    pub fits: bool,
}

pub const WORKING_SET_HEADER: [&str; 4] = ["ranks", "bytes_per_rank", "threshold_bytes", "fits"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkingSetReport {
    pub rows: Vec<WorkingSetRow>,
}

/// Per-rank working set (particle records plus grid arrays) of the loaded
/// state for each rank count, against a cache-size threshold.
pub fn working_set_report(
    config: &ScenarioConfig,
    rank_counts: &[usize],
    threshold_mib: f64,
) -> WorkingSetReport {
    let threshold = (threshold_mib * 1024.0 * 1024.0) as u64;
    let ppc: usize = config.species.iter().map(|s| s.particles_per_cell).sum();
    let n = config.geometry.n_cells_global;
    let rows = rank_counts
        .iter()
        .map(|&ranks| {
            let cells = n.div_ceil(ranks.max(1));
            let bytes = (cells * ppc * PARTICLE_RECORD_BYTES
                + grid_bytes(config.species.len(), cells)) as u64;
            WorkingSetRow {
                ranks,
                bytes_per_rank: bytes,
                threshold_bytes: threshold,
                fits: bytes <= threshold,
            }
        })
        .collect();
    WorkingSetReport { rows }
}

impl WorkingSetReport {
    /// Smallest listed rank count whose per-rank working set fits, given
    /// that some smaller listed count does not.
    pub fn crossover(&self) -> Option<usize> {
        let mut rows: Vec<&WorkingSetRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.ranks);
        rows.windows(2)
            .find(|w| !w[0].fits && w[1].fits)
            .map(|w| w[1].ranks)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.ranks.to_string(),
                    format!("{:.2}", r.bytes_per_rank as f64 / (1024.0 * 1024.0)),
                    format!("{:.2}", r.threshold_bytes as f64 / (1024.0 * 1024.0)),
                    if r.fits { "yes" } else { "no" }.to_owned(),
                ]
            })
            .collect();
        let mut out = render(&["ranks", "MiB_per_rank", "threshold_MiB", "fits"], &rows);
        match self.crossover() {
            Some(r) => {
                let _ = writeln!(out, "crossover: working set fits from {r} ranks");
            }
            None => {
                let _ = writeln!(out, "crossover: none in this sweep");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &self.rows, &WORKING_SET_HEADER)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self {
            rows: read_csv_rows(path)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn profile(rank: usize, phases: &[(PhaseId, u64)]) -> ProfileRecord {
        let mut p = ProfileRecord {
            rank,
            ..ProfileRecord::default()
        };
        for &(ph, ns) in phases {
            let s = &mut p.phases[ph as usize];
            s.calls += 1;
            s.cpu_self_ns += ns;
            s.self_ns += ns;
            s.inclusive_ns += ns;
        }
        p
    }

    #[test]
    fn single_phase_is_everything() {
        let b = breakdown_report(&[profile(0, &[(PhaseId::Mover, 5)])]);
        assert_eq!(b.top().unwrap().phase, "Mover");
        assert_eq!(b.top().unwrap().percent, 100.0);
        assert_eq!(b.rows.len(), 11);
    }

    #[test]
    fn shares_sum_to_one_hundred() {
        let b = breakdown_report(&[
            profile(0, &[(PhaseId::Sort, 7), (PhaseId::Mover, 3), (PhaseId::Deposit, 11)]),
            profile(1, &[(PhaseId::Sort, 13), (PhaseId::Wait, 1)]),
        ]);
        let sum: f64 = b.rows.iter().map(|r| r.percent).sum();
        assert!((sum - 100.0).abs() < 0.1);
        assert_eq!(b.top().unwrap().phase, "Sort");
    }

    #[test]
    fn equal_values_form_one_group() {
        assert_eq!(detect_groups(&[3.0; 5], 0.2), vec![0; 5]);
        assert_eq!(detect_groups(&[1.0, 10.0, 1.1, 9.5], 0.2), vec![0, 1, 0, 1]);
        assert!(detect_groups(&[], 0.2).is_empty());
    }

    #[test]
    fn no_io_gives_no_rows() {
        assert!(io_report(&[]).rows.is_empty());
    }

    #[test]
    fn io_bandwidth_over_window() {
        let rec = |rank, kind, start, end| IoRecord {
            rank,
            path: "f".into(),
            kind,
            bytes_written: 1024 * 1024,
            open_count: 1,
            start_ns: start,
            end_ns: end,
        };
        let r = io_report(&[
            rec(0, FileKind::Dat, 0, 500_000_000),
            rec(1, FileKind::Dat, 500_000_000, 1_000_000_000),
            rec(1, FileKind::Dmp, 0, 1_000_000_000),
        ]);
        let all = r.aggregate("all").unwrap();
        assert_eq!(all.bytes, 3 * 1024 * 1024);
        assert!((all.mib_per_s - 3.0).abs() < 1e-9);
        assert_eq!(r.aggregate("dat").unwrap().files, 2);
    }

    fn sized(n_cells: usize, ppc: usize) -> ScenarioConfig {
        parse_config(&format!(
            "[grid]\nn_cells_global = {n_cells}\ndx = 1\n[run]\ndt = 0.1\nn_steps = 1\n\
             [species.e]\ncharge = -1\nmass = 1\nparticles_per_cell = {ppc}\n"
        ))
        .unwrap()
    }

    #[test]
    fn million_particles_cross_at_two_ranks() {
        let c = sized(1000, 1000);
        let w = working_set_report(&c, &[1, 2], DEFAULT_LLC_MIB);
        assert!(!w.rows[0].fits);
        assert!((w.rows[0].bytes_per_rank as f64 / 1048576.0 - 22.9).abs() < 0.1);
        assert!(w.rows[1].fits);
        assert_eq!(w.crossover(), Some(2));
        assert_eq!(w.rows[0].threshold_bytes, (16.38 * 1048576.0) as u64);
    }

    #[test]
    fn empty_problem_always_fits() {
        let w = working_set_report(&sized(10, 0), &[1, 2, 4], DEFAULT_LLC_MIB);
        assert!(w.rows.iter().all(|r| r.fits));
        assert_eq!(w.crossover(), None);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = breakdown_report(&[profile(0, &[(PhaseId::Sort, 7), (PhaseId::Mover, 3)])]);
        let p = dir.path().join("b.csv");
        b.write_csv(&p).unwrap();
        assert_eq!(Breakdown::read_csv(&p).unwrap(), b);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("phase,percent,cpu_ns,wall_ns,calls\n"));
    }
}
