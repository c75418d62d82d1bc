//! Acceptance suite. Runs every criterion in sequence (the timing criteria
//! must not share the machine with each other) and prints one PASS/FAIL
//! line per criterion. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use minipic::collisions::{ionize, IonizationParams};
use minipic::domain::Subdomain;
use minipic::field::solve_poisson;
use minipic::instrument::{
    breakdown_report, comm_report, trace_summary, working_set_report, PhaseId, ProfileRecord,
    DEFAULT_LLC_MIB,
};
use minipic::mover::{push_unmagnetized, PushParams};
use minipic::particles::{Emigrant, Particle, ParticleStore};
use minipic::rng::RngStream;
use minipic::sorter::{absorb_immigrants, arrj};
use minipic::{load_config, parse_config, run, RunOptions, RunReport, ScenarioConfig};

type Outcome = Result<String, String>;

fn scenario(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn compute_cpu_ns(p: &ProfileRecord) -> u64 {
    PhaseId::ALL
        .iter()
        .filter(|ph| ph.is_compute())
        .map(|&ph| p.get(ph).cpu_self_ns)
        .sum()
}

fn sorting_dominance() -> Outcome {
    let config = scenario("ionization_desk.ini");
    let mut merged = Vec::new();
    let mut per_run = Vec::new();
    for _ in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            profile: true,
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let report = run(&config, &opts).map_err(|e| e.to_string())?;
        let b = breakdown_report(&report.profiles());
        per_run.push((b.top().unwrap().phase.clone(), b.share(PhaseId::Sort)));
        merged.extend(report.profiles());
    }
    let b = breakdown_report(&merged);
    let top = b.top().unwrap().phase.clone();
    let share = b.share(PhaseId::Sort);
    let every_run = per_run.iter().all(|(t, _)| t == "Sort");
    check(
        top == "Sort" && every_run && share >= 30.0,
        format!("merged top = {top}, Sort share = {share:.1}% (>= 30%), per run {per_run:?}"),
    )
}

fn ionization_decay() -> Outcome {
    let (n0, steps, n_e, rate, dt) = (10_000usize, 1000usize, 1.0, 0.01, 0.1);
    let mut store = ParticleStore::new(3, 1);
    store.bucket_mut(2, 0).extend((0..n0).map(|i| Particle {
        x_rel: i as f32 / n0 as f32,
        vx: 0.0,
        vy: 0.0,
        vz: 0.0,
        weight: 1.0,
    }));
    let params = IonizationParams {
        rate,
        dt,
        neutral: 2,
        ion: 1,
        electron: 0,
        electron_vth: 1.0,
    };
    let mut rng = RngStream::new(77, 0);
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    let mut worst: f64 = 0.0;
    for step in 1..=steps {
        ionize(&mut store, &[n_e], &params, &mut rng);
        let n = store.species_len(2) as f64;
        let t = step as f64 * dt;
        let expect = n0 as f64 * (-n_e * rate * t).exp();
        worst = worst.max((n - expect).abs() / expect);
        ts.push(t);
        logs.push((n / n0 as f64).ln());
    }
    // Least-squares slope through the origin of ln(N/N0) against t.
    let num: f64 = ts.iter().zip(&logs).map(|(t, l)| t * l).sum();
    let den: f64 = ts.iter().map(|t| t * t).sum();
    let fitted = -num / den;
    let rel = (fitted - n_e * rate).abs() / (n_e * rate);
    check(
        rel < 0.03 && worst < 0.03,
        format!(
            "fitted rate {fitted:.5} vs n_e R = {:.5}: rel err {:.2}% (< 3%), worst pointwise {:.2}%",
            n_e * rate,
            rel * 100.0,
            worst * 100.0
        ),
    )
}

fn poisson_correctness() -> Outcome {
    let n = 200;
    let dx = 0.37;
    let mut rng = RngStream::new(5, 5);
    let rho: Vec<f64> = (0..=n).map(|_| rng.normal()).collect();
    let walls = (0.3, -1.1);
    let phi = solve_poisson(&rho, dx, walls).map_err(|e| e.to_string())?;
    let scale = rho[1..n].iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let residual = (1..n)
        .map(|i| ((-phi[i - 1] + 2.0 * phi[i] - phi[i + 1]) / (dx * dx) - rho[i]).abs())
        .fold(0.0, f64::max)
        / scale;
    let walls_ok = phi[0] == walls.0 && phi[n] == walls.1;

    let length = 1.0;
    let err = |cells: usize| -> f64 {
        let h = length / cells as f64;
        let k = std::f64::consts::PI / length;
        let rho: Vec<f64> = (0..=cells).map(|i| (k * i as f64 * h).sin()).collect();
        let phi = solve_poisson(&rho, h, (0.0, 0.0)).unwrap();
        (0..=cells)
            .map(|i| (phi[i] - (k * i as f64 * h).sin() / (k * k)).abs())
            .fold(0.0, f64::max)
    };
    let ratio = err(32) / err(64);
    check(
        residual <= 1e-10 && walls_ok && (3.6..=4.4).contains(&ratio),
        format!("relative residual {residual:.2e} (<= 1e-10), error ratio on halving dx {ratio:.3} (3.6..4.4)"),
    )
}

/// Global records of one species as exact bit patterns, for multiset checks.
fn keyed(records: &[Emigrant]) -> Vec<(u64, u32, u32, u32, u32)> {
    let mut v: Vec<_> = records
        .iter()
        .map(|e| {
            (
                e.x_cells.to_bits(),
                e.vx.to_bits(),
                e.vy.to_bits(),
                e.vz.to_bits(),
                e.weight.to_bits(),
            )
        })
        .collect();
    v.sort_unstable();
    v
}

fn arrj_oracle() -> Outcome {
    let n_cells = 100;
    let ppc = 1000;
    let dx = 1.0;
    let dt = 1.0;
    let sub = Subdomain::new(n_cells, 1, 0, true);
    let mut rng = RngStream::new(11, 3);
    let mut store = ParticleStore::new(1, n_cells);
    for k in 0..n_cells {
        for _ in 0..ppc {
            store.bucket_mut(0, k).push(Particle {
                x_rel: rng.uniform() as f32,
                vx: (3.0 * (rng.uniform() - 0.5)) as f32,
                vy: rng.normal() as f32,
                vz: rng.normal() as f32,
                weight: (1.0 + rng.uniform()) as f32,
            });
        }
    }
    let qm = [0.0];
    let params = PushParams {
        e_field: None,
        charge_to_mass: &qm,
        dt,
        dx,
    };
    let mut worst_x: f64 = 0.0;
    for step in 0..100 {
        push_unmagnetized(&mut store, &params);
        // Brute-force oracle: every particle's global position, wrapped and
        // binned by floor.
        let mut oracle: Vec<Vec<(u32, u32, u32, u32, f64)>> = vec![Vec::new(); n_cells];
        for k in 0..n_cells {
            for p in store.bucket(0, k) {
                let x = (k as f64 + p.x_rel as f64).rem_euclid(n_cells as f64);
                let cell = (x.floor() as usize).min(n_cells - 1);
                oracle[cell].push((p.vx.to_bits(), p.vy.to_bits(), p.vz.to_bits(), p.weight.to_bits(), x));
            }
        }
        let out = arrj(&mut store, &sub).map_err(|e| e.to_string())?;
        let wrap = |list: &[Emigrant]| -> Vec<Emigrant> {
            list.iter()
                .map(|e| Emigrant {
                    x_cells: e.x_cells.rem_euclid(n_cells as f64),
                    ..*e
                })
                .collect()
        };
        absorb_immigrants(&mut store, &sub, &[wrap(&out.left[0])]).map_err(|e| e.to_string())?;
        absorb_immigrants(&mut store, &sub, &[wrap(&out.right[0])]).map_err(|e| e.to_string())?;
        for k in 0..n_cells {
            let mut got: Vec<_> = store
                .bucket(0, k)
                .iter()
                .map(|p| (p.vx.to_bits(), p.vy.to_bits(), p.vz.to_bits(), p.weight.to_bits(), k as f64 + p.x_rel as f64))
                .collect();
            let want = &mut oracle[k];
            if got.len() != want.len() {
                return Err(format!(
                    "step {step}, cell {k}: {} particles, oracle {}",
                    got.len(),
                    want.len()
                ));
            }
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (g, w) in got.iter().zip(want.iter()) {
                if g.0 != w.0 || g.1 != w.1 || g.2 != w.2 || g.3 != w.3 {
                    return Err(format!("step {step}, cell {k}: velocity/weight multiset differs"));
                }
                let tol = f32::EPSILON as f64 * (w.4.abs() + 1.0);
                let d = (g.4 - w.4).abs();
                worst_x = worst_x.max(d / (w.4.abs() + 1.0));
                if d > tol {
                    return Err(format!("step {step}, cell {k}: position {} vs {}", g.4, w.4));
                }
            }
        }
    }
    let sorted = store.is_sorted() && store.len() == n_cells * ppc;
    check(
        sorted,
        format!(
            "{} particles, 100 steps: per-cell multisets equal; worst relative x deviation {worst_x:.1e}",
            n_cells * ppc
        ),
    )
}

const FREE_STREAM: &str = "
[grid]
n_cells_global = 64
dx = 0.5
bounded = false

[species.e]
charge = -1.0
mass = 1.0
particles_per_cell = 40

[species.D+]
charge = 1.0
mass = 3670.48
particles_per_cell = 40
temperature = 400.0

[run]
dt = 0.2
n_steps = 60
enable_field_solver = false
enable_smoother = false
rng_seed = 99

[parallel]
n_ranks = 1

[io]
diag_interval = 0
checkpoint_interval = 0
";

fn global_density(report: &RunReport) -> Vec<Vec<f64>> {
    let n_species = report.ranks[0].particles.len();
    let mut out = vec![Vec::new(); n_species];
    for r in &report.ranks {
        let g = &r.state.as_ref().unwrap().grid;
        for (s, d) in g.density.iter().enumerate() {
            out[s].extend(g.owned().map(|i| d[i]));
        }
    }
    out
}

fn decomposition_invariance() -> Outcome {
    let base = parse_config(FREE_STREAM).map_err(|e| e.to_string())?;
    let mut particles = Vec::new();
    let mut densities = Vec::new();
    for ranks in [1, 2, 8] {
        let mut c = base.clone();
        c.n_ranks = ranks;
        let opts = RunOptions {
            keep_state: true,
            ..RunOptions::default()
        };
        let report = run(&c, &opts).map_err(|e| e.to_string())?;
        let mut per_species = Vec::new();
        for s in 0..c.species.len() {
            let mut all = Vec::new();
            for r in &report.ranks {
                let st = r.state.as_ref().unwrap();
                all.extend(st.store.global_records(s, st.sub.cell_offset));
            }
            per_species.push(keyed(&all));
        }
        particles.push(per_species);
        densities.push(global_density(&report));
    }
    let same_particles = particles.iter().all(|p| *p == particles[0]);
    let mut worst: f64 = 0.0;
    for d in &densities[1..] {
        for (a, b) in d.iter().zip(&densities[0]) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
    }
    let n: usize = particles[0].iter().map(Vec::len).sum();
    check(
        same_particles && worst <= 1e-12,
        format!(
            "ranks 1/2/8: {n} particles, multisets identical = {same_particles}, max density deviation {worst:.1e} (<= 1e-12)"
        ),
    )
}

fn boundary_imbalance() -> Outcome {
    let config = scenario("sheath_desk.ini");
    let n = config.n_ranks;
    let mut lines = Vec::new();
    let mut ok = true;
    for _ in 0..3 {
        let report = run(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
        let mpi: Vec<f64> = report.clocks().iter().map(|c| c.mpi_ns() as f64).collect();
        let interior = median(mpi[1..n - 1].to_vec());
        let (r0, rn) = (mpi[0] / interior, mpi[n - 1] / interior);
        ok &= r0 >= 1.2 && rn >= 1.2;
        lines.push(format!("{r0:.2}/{rn:.2}"));
    }
    check(
        ok,
        format!(
            "rank 0 / rank {} MPI time over interior median (>= 1.2 each): {}",
            n - 1,
            lines.join(", ")
        ),
    )
}

fn delay_config() -> ScenarioConfig {
    let mut c = scenario("ionization_desk.ini");
    c.n_steps = 300;
    c.n_ranks = 4;
    c
}

fn injected_delay() -> Outcome {
    let c = delay_config();
    let base = run(&c, &RunOptions::default()).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        slowdown: Some((0, 2.0)),
        ..RunOptions::default()
    };
    let slow = run(&c, &opts).map_err(|e| e.to_string())?;
    let injected = slow.ranks[0].injected_ns as f64;
    let gained = slow.ranks[1].clock.wait_ns as f64 - base.ranks[1].clock.wait_ns as f64;
    let groups = comm_report(&slow.clocks()).n_groups();
    check(
        injected > 0.0 && gained >= 0.5 * injected && groups >= 2,
        format!(
            "injected {:.0} ms on rank 0, rank 1 wait grew {:.0} ms ({:.0}% >= 50%), {groups} groups (>= 2)",
            injected / 1e6,
            gained / 1e6,
            100.0 * gained / injected.max(1.0)
        ),
    )
}

fn cache_fit() -> Outcome {
    let mut config = scenario("sheath_desk.ini");
    let ws = working_set_report(&config, &[1, 2, 4, 8], DEFAULT_LLC_MIB);
    let crossover = ws.crossover();
    let crosses = matches!(crossover, Some(r) if r > 2 && r <= 8);
    config.n_steps = 200;
    let mut per = BTreeMap::new();
    for ranks in [2, 8] {
        config.n_ranks = ranks;
        let opts = RunOptions {
            profile: true,
            ..RunOptions::default()
        };
        let report = run(&config, &opts).map_err(|e| e.to_string())?;
        let cpu: u64 = report.profiles().iter().map(compute_cpu_ns).sum();
        let particle_steps = report.total_particles() as f64 * report.steps_run() as f64;
        per.insert(ranks, cpu as f64 / particle_steps);
    }
    let gain = 1.0 - per[&8] / per[&2];
    check(
        crosses && gain >= 0.10,
        format!(
            "working-set crossover at {crossover:?} ranks (threshold {DEFAULT_LLC_MIB} MiB); compute per particle-step {:.2} ns at 2 ranks, {:.2} ns at 8 ranks: {:.1}% lower (>= 10%)",
            per[&2],
            per[&8],
            gain * 100.0
        ),
    )
}

const RESTART: &str = "
[grid]
n_cells_global = 96
dx = 0.5
bounded = true

[species.e]
charge = -1.0
mass = 1.0
particles_per_cell = 30

[species.D+]
charge = 1.0
mass = 3670.48
particles_per_cell = 30

[species.D]
charge = 0.0
mass = 3670.48
particles_per_cell = 30

[run]
dt = 0.1
n_steps = 100
enable_field_solver = true
enable_smoother = true
magnetic_field = 1.0, 0.0873
ionization_rate = 0.02
recycling_coeff = 0.7
rng_seed = 4242

[parallel]
n_ranks = 1

[io]
diag_interval = 0
checkpoint_interval = 50
";

fn restart_determinism() -> Outcome {
    let base = parse_config(RESTART).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    let mut ok = true;
    for ranks in [1, 4] {
        let mut c = base.clone();
        c.n_ranks = ranks;
        let keep = RunOptions {
            keep_state: true,
            ..RunOptions::default()
        };
        let straight = run(&c, &keep).map_err(|e| e.to_string())?;

        let dir = tempfile::tempdir().unwrap();
        let mut first = c.clone();
        first.n_steps = 50;
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        run(&first, &opts).map_err(|e| e.to_string())?;
        let resumed_opts = RunOptions {
            restart_dir: Some(dir.path().to_path_buf()),
            keep_state: true,
            ..RunOptions::default()
        };
        let resumed = run(&c, &resumed_opts).map_err(|e| e.to_string())?;
        let same = straight.ranks.len() == resumed.ranks.len()
            && straight
                .ranks
                .iter()
                .zip(&resumed.ranks)
                .all(|(a, b)| a.state.is_some() && a.state == b.state);
        ok &= same && resumed.first_step == 50;
        notes.push(format!("{ranks} ranks: identical = {same}"));
    }
    check(ok, format!("100 steps vs 50 + restart + 50: {}", notes.join(", ")))
}

fn step_of(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    stem.rsplit_once("_s")?.1.parse().ok()
}

fn io_accounting() -> Outcome {
    let mut c = scenario("ionization_desk.ini");
    c.geometry.n_cells_global = 120;
    for s in &mut c.species {
        s.particles_per_cell = 10;
    }
    c.n_steps = 1000;
    c.n_ranks = 4;
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let report = run(&c, &opts).map_err(|e| e.to_string())?;
    let records = report.io_records();
    let mut mismatched = 0;
    for r in &records {
        let on_disk = std::fs::metadata(&r.path).map(|m| m.len()).unwrap_or(u64::MAX);
        if on_disk != r.bytes_written {
            mismatched += 1;
        }
    }
    let listed: Vec<PathBuf> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let mut dat_per_step: BTreeMap<u64, usize> = BTreeMap::new();
    let mut ckpt_steps: BTreeMap<u64, usize> = BTreeMap::new();
    for p in &listed {
        let step = step_of(p).unwrap_or(u64::MAX);
        match p.extension().and_then(|e| e.to_str()) {
            Some("dat") => *dat_per_step.entry(step).or_default() += 1,
            Some("dmp") => *ckpt_steps.entry(step).or_default() += 1,
            _ => {}
        }
    }
    let diag_ok = dat_per_step.keys().copied().eq((1..=10).map(|i| i * 100))
        && dat_per_step.values().all(|&n| n == c.n_ranks * 3);
    let want_ckpt = [333, 666, 999, 1000];
    let ckpt_ok = ckpt_steps.keys().copied().eq(want_ckpt)
        && ckpt_steps.values().all(|&n| n == c.n_ranks);
    let data_files: usize = dat_per_step.values().chain(ckpt_steps.values()).sum();
    let files_ok = records.len() == data_files;
    check(
        mismatched == 0 && diag_ok && ckpt_ok && files_ok,
        format!(
            "{} records, {mismatched} size mismatches; .dat per I/O step {:?} (want {}); checkpoint steps {:?}",
            records.len(),
            dat_per_step.values().collect::<Vec<_>>(),
            c.n_ranks * 3,
            ckpt_steps.keys().collect::<Vec<_>>()
        ),
    )
}

fn trace_consistency() -> Outcome {
    let mut c = delay_config();
    c.n_steps = 200;
    let opts = RunOptions {
        trace: true,
        profile: true,
        ..RunOptions::default()
    };
    let report = run(&c, &opts).map_err(|e| e.to_string())?;
    let summary = trace_summary(&report.events());
    let mut worst: f64 = 0.0;
    for (stats, clock) in summary.ranks.iter().zip(report.clocks()) {
        let t = stats.wait_ns as f64;
        let k = clock.wait_ns as f64;
        worst = worst.max((t - k).abs() / k.max(1.0));
    }
    let total_t = summary.total_wait_ns() as f64;
    let total_k: f64 = report.clocks().iter().map(|c| c.wait_ns as f64).sum();
    let total_rel = (total_t - total_k).abs() / total_k.max(1.0);
    check(
        worst <= 0.05 && total_rel <= 0.05 && summary.ranks.len() == c.n_ranks,
        format!(
            "trace wait {:.1} ms vs clock wait {:.1} ms; worst per-rank deviation {:.3}% (<= 5%)",
            total_t / 1e6,
            total_k / 1e6,
            worst * 100.0
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 sorting dominance", sorting_dominance),
        ("2 ionization decay", ionization_decay),
        ("3 poisson correctness", poisson_correctness),
        ("4 arrj oracle equivalence", arrj_oracle),
        ("5 decomposition invariance", decomposition_invariance),
        ("6 boundary imbalance", boundary_imbalance),
        ("7 injected-delay wait", injected_delay),
        ("8 cache-fit direction", cache_fit),
        ("9 restart determinism", restart_determinism),
        ("10 I/O accounting", io_accounting),
        ("11 trace consistency", trace_consistency),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".to_owned()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
