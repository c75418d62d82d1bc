//! The per-rank computational cycle and the run driver.
//!
//! One step is: deposit and fold densities, smooth, solve for the field,
//! ionize, push, re-bucket, exchange particles (walls handled on the
//! boundary ranks), then write diagnostics or checkpoints when due.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::collisions::{
    cell_density, ionize, wall_interact, CollisionCounters, IonizationParams, WallParams, WallSide,
};
use crate::config::{write_config, ScenarioConfig};
use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::field::{
    compute_efield, deposit_density, exchange_density_halo, exchange_e_field_halo,
    gather_solve_scatter, smooth_density, GridState, PoissonSolver,
};
use crate::instrument::{IoRecord, PhaseId, ProfileRecord, RecorderOptions, TraceEvent};
use crate::io;
use crate::mover::{kick_velocities, push_boris, push_unmagnetized, PushParams};
use crate::particles::{init_particles, working_set_bytes, Emigrant, ParticleStore};
use crate::rng::RngStream;
use crate::runtime::{exchange_particles, spawn_ranks, CommClock, Endpoint, LaunchOptions};
use crate::sorter::{absorb_immigrants, arrj, SortStats};

/// Everything a rank needs to continue a run; what a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankState {
    pub sub: Subdomain,
    /// Last completed step.
    pub step: u64,
    pub store: ParticleStore,
    pub grid: GridState,
    pub rng: RngStream,
    pub counters: CollisionCounters,
    /// Velocities still need the initial half-step back-kick.
    pub needs_backkick: bool,
}

impl RankState {
    pub fn initial(config: &ScenarioConfig, sub: &Subdomain) -> Self {
        Self {
            sub: *sub,
            step: 0,
            store: init_particles(config, sub),
            grid: GridState::new(config.species.len(), sub, config.geometry.dx),
            rng: RngStream::for_rank(config.rng_seed, sub.rank),
            counters: CollisionCounters::new(config.species.len()),
            needs_backkick: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub profile: bool,
    pub trace: bool,
    /// Directory for diagnostics and checkpoints; no I/O phase without it.
    pub out_dir: Option<PathBuf>,
    /// Directory holding the checkpoints to resume from.
    pub restart_dir: Option<PathBuf>,
    /// Checkpoint step to resume from; the latest one when unset.
    pub restart_step: Option<u64>,
    /// Stretch the compute phases of one rank by a factor.
    pub slowdown: Option<(usize, f64)>,
    pub timeout: Duration,
    /// Return the final rank states in the report.
    pub keep_state: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            profile: false,
            trace: false,
            out_dir: None,
            restart_dir: None,
            restart_step: None,
            slowdown: None,
            timeout: crate::runtime::DEFAULT_TIMEOUT,
            keep_state: false,
        }
    }
}

/// Particle traffic of one rank over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub sent: u64,
    pub received: u64,
    pub wall_hits: u64,
    pub reinjected: u64,
}

#[derive(Debug, Clone)]
pub struct RankSummary {
    pub rank: usize,
    pub profile: ProfileRecord,
    pub clock: CommClock,
    pub events: Vec<TraceEvent>,
    pub io: Vec<IoRecord>,
    pub counters: CollisionCounters,
    pub sort: SortStats,
    pub traffic: Traffic,
    pub particles: Vec<usize>,
    pub working_set_bytes: usize,
    pub injected_ns: u64,
    pub state: Option<RankState>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub n_ranks: usize,
    pub profiled: bool,
    pub traced: bool,
    pub first_step: u64,
    pub last_step: u64,
    pub wall_ns: u64,
    pub ranks: Vec<RankSummary>,
}

impl RunReport {
    pub fn steps_run(&self) -> u64 {
        self.last_step - self.first_step
    }

    pub fn total_particles(&self) -> usize {
        self.ranks.iter().flat_map(|r| &r.particles).sum()
    }

    pub fn profiles(&self) -> Vec<ProfileRecord> {
        self.ranks.iter().map(|r| r.profile.clone()).collect()
    }

    pub fn clocks(&self) -> Vec<CommClock> {
        self.ranks.iter().map(|r| r.clock.clone()).collect()
    }

    pub fn io_records(&self) -> Vec<IoRecord> {
        self.ranks.iter().flat_map(|r| r.io.iter().cloned()).collect()
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.ranks.iter().flat_map(|r| r.events.iter().copied()).collect()
    }

    pub fn counters(&self) -> CollisionCounters {
        let mut c = CollisionCounters::default();
        for r in &self.ranks {
            c.accumulate(&r.counters);
        }
        c
    }
}

/// Static per-run quantities shared by every step.
struct Cycle<'a> {
    config: &'a ScenarioConfig,
    charges: Vec<f64>,
    charge_to_mass: Vec<f64>,
    solver: Option<PoissonSolver>,
    magnetic: Option<[f64; 3]>,
    ionization: Option<IonizationParams>,
    wall: WallParams,
}

impl<'a> Cycle<'a> {
    fn new(config: &'a ScenarioConfig) -> Result<Self> {
        let roles = config.roles();
        let solver = if config.enable_field_solver {
            Some(PoissonSolver::from_config(config)?)
        } else {
            None
        };
        let ionization = match (roles.neutral, roles.ion, roles.electron) {
            (Some(neutral), Some(ion), Some(electron)) if config.ionization_rate > 0.0 => {
                let me = config.species[electron].mass;
                Some(IonizationParams {
                    rate: config.ionization_rate,
                    dt: config.dt,
                    neutral,
                    ion,
                    electron,
                    electron_vth: (config.ionization_temperature / me).sqrt(),
                })
            }
            _ => None,
        };
        Ok(Self {
            config,
            charges: config.species.iter().map(|s| s.charge).collect(),
            charge_to_mass: config.species.iter().map(|s| s.charge_to_mass()).collect(),
            solver,
            magnetic: config.magnetic_vector(),
            ionization,
            wall: WallParams {
                charges: config.species.iter().map(|s| s.charge).collect(),
                recycling_coeff: config.recycling_coeff,
                ion: roles.ion,
                neutral: roles.neutral,
                emit_vth: config
                    .species
                    .iter()
                    .map(|s| (config.wall_temperature / s.mass).sqrt())
                    .collect(),
            },
        })
    }

    fn push_params<'g>(&'g self, grid: &'g GridState, dt: f64) -> Result<PushParams<'g>> {
        Ok(PushParams {
            e_field: if self.solver.is_some() {
                Some(grid.e_field_checked()?)
            } else {
                None
            },
            charge_to_mass: &self.charge_to_mass,
            dt,
            dx: self.config.geometry.dx,
        })
    }

    fn step(
        &self,
        ep: &Endpoint<'_>,
        st: &mut RankState,
        sort: &mut SortStats,
        traffic: &mut Traffic,
    ) -> Result<()> {
        let rec = ep.recorder();
        let config = self.config;
        {
            let _p = rec.scope(PhaseId::Deposit);
            deposit_density(&st.store, &mut st.grid);
        }
        {
            let _p = rec.scope(PhaseId::HaloExchange);
            exchange_density_halo(ep, &mut st.grid, &self.charges)?;
        }
        if config.enable_smoother {
            let _p = rec.scope(PhaseId::Smooth);
            smooth_density(&mut st.grid)?;
        }
        if let Some(solver) = &self.solver {
            {
                let _p = rec.scope(PhaseId::FieldSolve);
                gather_solve_scatter(ep, &mut st.grid, solver)?;
                compute_efield(&mut st.grid)?;
            }
            let _p = rec.scope(PhaseId::HaloExchange);
            exchange_e_field_halo(ep, &mut st.grid)?;
        }
        if let Some(params) = &self.ionization {
            let _p = rec.scope(PhaseId::Collisions);
            let n_e = cell_density(&st.store, params.electron, config.geometry.dx);
            st.counters.ionizations += ionize(&mut st.store, &n_e, params, &mut st.rng);
        }
        {
            let _p = rec.scope(PhaseId::Mover);
            if st.needs_backkick {
                let back = self.push_params(&st.grid, -0.5 * config.dt)?;
                kick_velocities(&mut st.store, &back, self.magnetic);
                st.needs_backkick = false;
            }
            let params = self.push_params(&st.grid, config.dt)?;
            match self.magnetic {
                Some(b) => push_boris(&mut st.store, &params, b),
                None => push_unmagnetized(&mut st.store, &params),
            }
        }
        let outcome = {
            let _p = rec.scope(PhaseId::Sort);
            arrj(&mut st.store, &st.sub)?
        };
        sort.accumulate(&outcome.stats);
        {
            let _p = rec.scope(PhaseId::ParticleExchange);
            let mut left = outcome.left;
            let mut right = outcome.right;
            for (side, list) in [(WallSide::Left, &mut left), (WallSide::Right, &mut right)] {
                let at_wall = match side {
                    WallSide::Left => st.sub.at_left_wall(),
                    WallSide::Right => st.sub.at_right_wall(),
                };
                if !at_wall {
                    continue;
                }
                let _w = rec.scope(PhaseId::Collisions);
                let hits = std::mem::replace(list, vec![Vec::new(); list.len()]);
                traffic.wall_hits += hits.iter().map(Vec::len).sum::<usize>() as u64;
                let wall = wall_interact(&st.sub, side, &hits, &self.wall, &mut st.rng)?;
                st.counters.accumulate(&wall.counters);
                traffic.reinjected += absorb_immigrants(&mut st.store, &st.sub, &wall.reinjected)?;
            }
            traffic.sent += count(&left) + count(&right);
            let incoming = exchange_particles(ep, left, right)?;
            traffic.received += absorb_immigrants(&mut st.store, &st.sub, &incoming.from_left)?;
            traffic.received += absorb_immigrants(&mut st.store, &st.sub, &incoming.from_right)?;
        }
        st.step += 1;
        Ok(())
    }

    fn io_phase(
        &self,
        ep: &Endpoint<'_>,
        st: &RankState,
        dir: &Path,
        records: &mut Vec<IoRecord>,
    ) -> Result<()> {
        let config = self.config;
        let rec = ep.recorder();
        let step = st.step;
        if config.diag_interval > 0 && step % config.diag_interval == 0 {
            let _p = rec.scope(PhaseId::Diagnostics);
            records.extend(io::write_diagnostics(st, config, dir, rec.epoch())?);
        }
        let ckpt = config.checkpoint_interval;
        if ckpt > 0 && (step % ckpt == 0 || step == config.n_steps) {
            let _p = rec.scope(PhaseId::Checkpoint);
            records.push(io::write_checkpoint(st, config, dir, rec.epoch())?);
        }
        Ok(())
    }
}

fn count(lists: &[Vec<Emigrant>]) -> u64 {
    lists.iter().map(Vec::len).sum::<usize>() as u64
}

struct RankResult {
    io: Vec<IoRecord>,
    counters: CollisionCounters,
    sort: SortStats,
    traffic: Traffic,
    particles: Vec<usize>,
    working_set_bytes: usize,
    state: Option<RankState>,
    first_step: u64,
}

fn rank_main(
    ep: &Endpoint<'_>,
    cycle: &Cycle<'_>,
    opts: &RunOptions,
    restart_step: Option<u64>,
) -> Result<RankResult> {
    let config = cycle.config;
    let sub = *ep.subdomain();
    let mut st = match (&opts.restart_dir, restart_step) {
        (Some(dir), Some(step)) => {
            io::load_checkpoint(&io::checkpoint_path(dir, sub.rank, step), config)?
        }
        _ => RankState::initial(config, &sub),
    };
    let first_step = st.step;
    let mut sort = SortStats::default();
    let mut traffic = Traffic::default();
    let mut records = Vec::new();
    while st.step < config.n_steps {
        cycle.step(ep, &mut st, &mut sort, &mut traffic)?;
        if let Some(dir) = &opts.out_dir {
            cycle.io_phase(ep, &st, dir, &mut records)?;
        }
    }
    let particles = (0..st.store.n_species())
        .map(|s| st.store.species_len(s))
        .collect();
    Ok(RankResult {
        io: records,
        counters: st.counters.clone(),
        sort,
        traffic,
        particles,
        working_set_bytes: working_set_bytes(&st.store, st.grid.bytes()),
        first_step,
        state: opts.keep_state.then_some(st),
    })
}

/// Runs a scenario on `config.n_ranks` ranks.
pub fn run(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    if let Some((rank, factor)) = opts.slowdown {
        if rank >= config.n_ranks || !(factor >= 1.0) {
            return Err(Error::Usage(format!(
                "slowdown needs a rank below {} and a factor >= 1",
                config.n_ranks
            )));
        }
    }
    let restart_step = match &opts.restart_dir {
        Some(dir) => match opts.restart_step {
            Some(s) => Some(s),
            None => Some(io::latest_checkpoint_step(dir)?.ok_or_else(|| {
                Error::Usage(format!("no checkpoints found in {}", dir.display()))
            })?),
        },
        None => None,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_config(config, dir.join("config.ini"))?;
    }
    let cycle = Cycle::new(config)?;
    let launch = LaunchOptions {
        timeout: opts.timeout,
        recorder: RecorderOptions {
            profile: opts.profile,
            trace: opts.trace,
            slowdown: opts.slowdown.map(|(_, f)| f),
        },
        slow_rank: opts.slowdown.map(|(r, _)| r),
    };
    let t0 = Instant::now();
    let outputs = spawn_ranks(
        config.geometry.n_cells_global,
        config.n_ranks,
        !config.geometry.bounded,
        launch,
        |ep| rank_main(ep, &cycle, opts, restart_step),
    )?;
    let wall_ns = t0.elapsed().as_nanos() as u64;
    let first_step = outputs.first().map_or(0, |o| o.value.first_step);
    let ranks = outputs
        .into_iter()
        .map(|o| RankSummary {
            rank: o.rank,
            profile: o.recording.profile,
            clock: o.clock,
            events: o.recording.events,
            io: o.value.io,
            counters: o.value.counters,
            sort: o.value.sort,
            traffic: o.value.traffic,
            particles: o.value.particles,
            working_set_bytes: o.value.working_set_bytes,
            injected_ns: o.recording.injected_ns,
            state: o.value.state,
        })
        .collect();
    Ok(RunReport {
        n_ranks: config.n_ranks,
        profiled: opts.profile,
        traced: opts.trace,
        first_step,
        last_step: config.n_steps.max(first_step),
        wall_ns,
        ranks,
    })
}

pub const BREAKDOWN_FILE: &str = "breakdown.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const IO_FILE: &str = "io.csv";
pub const WORKING_SET_FILE: &str = "working_set.csv";
pub const TRACE_FILE: &str = "trace.txt";

/// Rank counts shown in the working-set table of a run: powers of two up to
/// at least 8, plus the run's own count.
pub fn working_set_sweep(config: &ScenarioConfig) -> Vec<usize> {
    let limit = config.n_ranks.max(8).min(config.geometry.n_cells_global);
    let mut counts: Vec<usize> = std::iter::successors(Some(1usize), |r| Some(r * 2))
        .take_while(|&r| r <= limit)
        .collect();
    counts.push(config.n_ranks);
    counts.sort_unstable();
    counts.dedup();
    counts
}

/// Writes the report CSVs of a finished run (and the trace, when recorded)
/// into `dir` with a text table next to each CSV. Returns the tables.
pub fn write_reports(report: &RunReport, config: &ScenarioConfig, dir: &Path) -> Result<String> {
    use crate::instrument::{
        breakdown_report, comm_report, io_report, working_set_report, write_trace,
        DEFAULT_LLC_MIB,
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name).with_extension("txt");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut tables = String::new();
    if report.profiled {
        let b = breakdown_report(&report.profiles());
        b.write_csv(&dir.join(BREAKDOWN_FILE))?;
        put(BREAKDOWN_FILE, &b.to_table())?;
        tables.push_str(&format!("phase breakdown\n{}\n", b.to_table()));
    }
    let c = comm_report(&report.clocks());
    c.write_csv(&dir.join(COMM_FILE))?;
    put(COMM_FILE, &c.to_table())?;
    tables.push_str(&format!("communication\n{}\n", c.to_table()));
    let i = io_report(&report.io_records());
    i.write_csv(&dir.join(IO_FILE))?;
    put(IO_FILE, &i.to_table())?;
    tables.push_str(&format!("I/O\n{}\n", i.to_table()));
    let w = working_set_report(config, &working_set_sweep(config), DEFAULT_LLC_MIB);
    w.write_csv(&dir.join(WORKING_SET_FILE))?;
    put(WORKING_SET_FILE, &w.to_table())?;
    tables.push_str(&format!("working set\n{}", w.to_table()));
    if report.traced {
        write_trace(&report.events(), &dir.join(TRACE_FILE))?;
    }
    Ok(tables)
}
