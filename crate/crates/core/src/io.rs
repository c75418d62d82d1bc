//! Per-rank diagnostic (`.dat`) and checkpoint (`.dmp`) files.
//!
//! Every rank writes its own files with no coordination. Each file is built
//! in memory and written with a single create + write, so the recorded byte
//! count is exactly the on-disk size.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::collisions::CollisionCounters;
use crate::config::ScenarioConfig;
use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::field::{Freshness, GridState};
use crate::instrument::{FileKind, IoRecord};
use crate::particles::{Particle, ParticleStore};
use crate::rng::{RngState, RngStream};
use crate::sim::RankState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPD1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 64;
/// Histogram half-width in thermal speeds.
pub const HISTOGRAM_SPAN: f64 = 5.0;

pub fn prof_path(dir: &Path, rank: usize, step: u64) -> PathBuf {
    dir.join(format!("prof_r{rank}_s{step}.dat"))
}

pub fn dist_path(dir: &Path, rank: usize, step: u64) -> PathBuf {
    dir.join(format!("dist_r{rank}_s{step}.dat"))
}

pub fn coll_path(dir: &Path, rank: usize, step: u64) -> PathBuf {
    dir.join(format!("coll_r{rank}_s{step}.dat"))
}

pub fn checkpoint_path(dir: &Path, rank: usize, step: u64) -> PathBuf {
    dir.join(format!("ckpt_r{rank}_s{step}.dmp"))
}

fn write_file(
    rank: usize,
    path: PathBuf,
    kind: FileKind,
    bytes: &[u8],
    epoch: Instant,
) -> Result<IoRecord> {
    let start = Instant::now();
    let wrap = |source| Error::RankIo {
        rank,
        path: path.clone(),
        source,
    };
    let mut f = fs::File::create(&path).map_err(wrap)?;
    f.write_all(bytes).map_err(wrap)?;
    drop(f);
    let end = Instant::now();
    Ok(IoRecord {
        rank,
        path,
        kind,
        bytes_written: bytes.len() as u64,
        open_count: 1,
        start_ns: start.saturating_duration_since(epoch).as_nanos() as u64,
        end_ns: end.saturating_duration_since(epoch).as_nanos() as u64,
    })
}

/// Node profiles: species densities, charge density, potential and field
/// on owned nodes.
pub fn format_profiles(state: &RankState, config: &ScenarioConfig) -> String {
    let g = &state.grid;
    let mut out = String::from("# node x");
    for sp in &config.species {
        out.push_str(&format!(" n_{}", sp.name));
    }
    out.push_str(" rho phi E\n");
    for i in g.owned() {
        let node = state.sub.cell_offset + i - 1;
        let x = config.geometry.x_min + node as f64 * config.geometry.dx;
        out.push_str(&format!("{node} {x:e}"));
        for d in &g.density {
            out.push_str(&format!(" {:e}", d[i]));
        }
        out.push_str(&format!(
            " {:e} {:e} {:e}\n",
            g.charge_density[i], g.potential[i], g.e_field[i]
        ));
    }
    out
}

/// vx histograms, one pair of columns per species, over ±5 thermal speeds
/// of that species (±5 for a cold species).
pub fn format_distributions(state: &RankState, config: &ScenarioConfig) -> String {
    let mut out = String::from("# bin");
    let mut centers = Vec::new();
    let mut counts = Vec::new();
    for (s, sp) in config.species.iter().enumerate() {
        out.push_str(&format!(" vx_{0} count_{0}", sp.name));
        let vth = sp.thermal_speed();
        let half = HISTOGRAM_SPAN * if vth > 0.0 { vth } else { 1.0 };
        let width = 2.0 * half / HISTOGRAM_BINS as f64;
        centers.push((0..HISTOGRAM_BINS).map(|b| -half + (b as f64 + 0.5) * width).collect::<Vec<_>>());
        let mut c = vec![0u64; HISTOGRAM_BINS];
        for p in state.store.species(s).iter().flatten() {
            let b = ((p.vx as f64 + half) / width).floor();
            if b >= 0.0 && (b as usize) < HISTOGRAM_BINS {
                c[b as usize] += 1;
            }
        }
        counts.push(c);
    }
    out.push('\n');
    for b in 0..HISTOGRAM_BINS {
        out.push_str(&b.to_string());
        for (cs, cc) in centers.iter().zip(&counts) {
            out.push_str(&format!(" {:e} {}", cs[b], cc[b]));
        }
        out.push('\n');
    }
    out
}

/// Cumulative collision counters of the rank.
pub fn format_collisions(state: &RankState, config: &ScenarioConfig) -> String {
    let c = &state.counters;
    let mut out = String::from("# step ionizations recycled reflected");
    for sp in &config.species {
        out.push_str(&format!(" absorbed_{}", sp.name));
    }
    out.push('\n');
    out.push_str(&format!(
        "{} {} {} {}",
        state.step, c.ionizations, c.recycled, c.reflected
    ));
    for a in &c.absorbed {
        out.push_str(&format!(" {a}"));
    }
    out.push('\n');
    out
}

/// Writes the three diagnostic files of one rank for the current step.
pub fn write_diagnostics(
    state: &RankState,
    config: &ScenarioConfig,
    out_dir: &Path,
    epoch: Instant,
) -> Result<Vec<IoRecord>> {
    let (rank, step) = (state.sub.rank, state.step);
    Ok(vec![
        write_file(
            rank,
            prof_path(out_dir, rank, step),
            FileKind::Dat,
            format_profiles(state, config).as_bytes(),
            epoch,
        )?,
        write_file(
            rank,
            dist_path(out_dir, rank, step),
            FileKind::Dat,
            format_distributions(state, config).as_bytes(),
            epoch,
        )?,
        write_file(
            rank,
            coll_path(out_dir, rank, step),
            FileKind::Dat,
            format_collisions(state, config).as_bytes(),
            epoch,
        )?,
    ])
}

/// Parses a `.dat` file into column names and numeric rows.
pub fn read_dat(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix('#') {
            columns = h.split_whitespace().map(str::to_owned).collect();
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: n + 1,
                    msg: format!("{}: not a number: {t}", path.display()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((columns, rows))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| incompatible(self.path, "file is truncated"))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(out.len() * 8)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

fn incompatible(path: &Path, reason: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

/// Serializes a rank state; see FORMATS.md for the layout.
pub fn encode_checkpoint(state: &RankState, config_hash: u64) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(config_hash);
    w.u32(state.sub.rank as u32);
    w.u32(state.sub.n_ranks as u32);
    w.u64(state.step);
    w.u64(state.sub.cell_offset as u64);
    w.u64(state.sub.n_local_cells as u64);
    let rng = state.rng.state();
    w.u64(rng.seed);
    w.u64(rng.stream);
    w.u128(rng.word_pos);
    w.u8(u8::from(state.needs_backkick));
    let c = &state.counters;
    w.u64(c.ionizations);
    w.u64(c.recycled);
    w.u64(c.reflected);
    w.u32(c.absorbed.len() as u32);
    for &a in &c.absorbed {
        w.u64(a);
    }
    let g = &state.grid;
    let f = g.freshness();
    w.u8(u8::from(f.charge_density) | u8::from(f.potential) << 1 | u8::from(f.e_field) << 2);
    w.u32(g.density.len() as u32);
    w.u64(g.charge_density.len() as u64);
    for d in &g.density {
        w.f64s(d);
    }
    w.f64s(&g.charge_density);
    w.f64s(&g.potential);
    w.f64s(&g.e_field);
    let store = &state.store;
    w.u32(store.n_species() as u32);
    for s in 0..store.n_species() {
        for bucket in store.species(s) {
            w.u32(bucket.len() as u32);
            for p in bucket {
                w.f32(p.x_rel);
                w.f32(p.vx);
                w.f32(p.vy);
                w.f32(p.vz);
                w.f32(p.weight);
            }
        }
    }
    w.0
}

pub fn write_checkpoint(
    state: &RankState,
    config: &ScenarioConfig,
    out_dir: &Path,
    epoch: Instant,
) -> Result<IoRecord> {
    let bytes = encode_checkpoint(state, config.state_hash());
    write_file(
        state.sub.rank,
        checkpoint_path(out_dir, state.sub.rank, state.step),
        FileKind::Dmp,
        &bytes,
        epoch,
    )
}

/// Reconstructs a rank state written by [`write_checkpoint`]. The file must
/// come from a run of the same physical configuration and decomposition.
pub fn decode_checkpoint(bytes: &[u8], config: &ScenarioConfig, path: &Path) -> Result<RankState> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(incompatible(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(incompatible(path, format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    if hash != config.state_hash() {
        return Err(incompatible(
            path,
            format!("config hash {hash:016x} does not match {:016x}", config.state_hash()),
        ));
    }
    let rank = r.u32()? as usize;
    let n_ranks = r.u32()? as usize;
    if n_ranks != config.n_ranks || rank >= n_ranks {
        return Err(incompatible(
            path,
            format!("written by rank {rank} of {n_ranks}, run has {} ranks", config.n_ranks),
        ));
    }
    let step = r.u64()?;
    let sub = Subdomain::new(
        config.geometry.n_cells_global,
        n_ranks,
        rank,
        !config.geometry.bounded,
    );
    let (offset, n_local) = (r.u64()? as usize, r.u64()? as usize);
    if offset != sub.cell_offset || n_local != sub.n_local_cells {
        return Err(incompatible(path, "subdomain does not match the decomposition"));
    }
    let rng = RngStream::from_state(RngState {
        seed: r.u64()?,
        stream: r.u64()?,
        word_pos: r.u128()?,
    });
    let needs_backkick = r.u8()? != 0;
    let n_species = config.species.len();
    let mut counters = CollisionCounters::new(n_species);
    counters.ionizations = r.u64()?;
    counters.recycled = r.u64()?;
    counters.reflected = r.u64()?;
    if r.u32()? as usize != n_species {
        return Err(incompatible(path, "species count mismatch"));
    }
    for a in &mut counters.absorbed {
        *a = r.u64()?;
    }
    let flags = r.u8()?;
    let mut grid = GridState::new(n_species, &sub, config.geometry.dx);
    if r.u32()? as usize != n_species || r.u64()? as usize != n_local + 2 {
        return Err(incompatible(path, "grid shape mismatch"));
    }
    for d in &mut grid.density {
        r.f64s(d)?;
    }
    r.f64s(&mut grid.charge_density)?;
    r.f64s(&mut grid.potential)?;
    r.f64s(&mut grid.e_field)?;
    grid.set_freshness(Freshness {
        charge_density: flags & 1 != 0,
        potential: flags & 2 != 0,
        e_field: flags & 4 != 0,
    });
    if r.u32()? as usize != n_species {
        return Err(incompatible(path, "species count mismatch"));
    }
    let mut store = ParticleStore::new(n_species, n_local);
    for s in 0..n_species {
        for k in 0..n_local {
            let count = r.u32()? as usize;
            let bucket = store.bucket_mut(s, k);
            bucket.reserve_exact(count);
            for _ in 0..count {
                bucket.push(Particle {
                    x_rel: r.f32()?,
                    vx: r.f32()?,
                    vy: r.f32()?,
                    vz: r.f32()?,
                    weight: r.f32()?,
                });
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(incompatible(path, "trailing bytes"));
    }
    Ok(RankState {
        sub,
        step,
        store,
        grid,
        rng,
        counters,
        needs_backkick,
    })
}

pub fn load_checkpoint(path: &Path, config: &ScenarioConfig) -> Result<RankState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, config, path)
}

/// Highest step for which rank 0 left a checkpoint in `dir`.
pub fn latest_checkpoint_step(dir: &Path) -> Result<Option<u64>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut best = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("ckpt_r0_s"))
            .and_then(|n| n.strip_suffix(".dmp"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        best = best.max(Some(step));
    }
    Ok(best)
}
