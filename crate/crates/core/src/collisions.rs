//! Monte Carlo electron-impact ionization and wall interaction.

use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::particles::{Emigrant, Particle, ParticleStore, BELOW_ONE};
use crate::rng::RngStream;

/// Cumulative event counts of one rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollisionCounters {
    pub ionizations: u64,
    /// Particles removed at the walls, per species.
    pub absorbed: Vec<u64>,
    pub recycled: u64,
    pub reflected: u64,
}

impl CollisionCounters {
    pub fn new(n_species: usize) -> Self {
        Self {
            absorbed: vec![0; n_species],
            ..Self::default()
        }
    }

    pub fn accumulate(&mut self, other: &CollisionCounters) {
        self.ionizations += other.ionizations;
        self.recycled += other.recycled;
        self.reflected += other.reflected;
        if self.absorbed.len() < other.absorbed.len() {
            self.absorbed.resize(other.absorbed.len(), 0);
        }
        for (a, b) in self.absorbed.iter_mut().zip(&other.absorbed) {
            *a += b;
        }
    }
}

/// Number density of one species per owned cell, from bucket weights.
pub fn cell_density(store: &ParticleStore, species: usize, dx: f64) -> Vec<f64> {
    store
        .species(species)
        .iter()
        .map(|b| b.iter().map(|p| p.weight as f64).sum::<f64>() / dx)
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct IonizationParams {
    pub rate: f64,
    pub dt: f64,
    pub neutral: usize,
    pub ion: usize,
    pub electron: usize,
    /// Thermal speed of electrons released by ionization.
    pub electron_vth: f64,
}

/// Ionizes each neutral with probability `1 - exp(-n_e R dt)` of its cell.
/// An ionized neutral becomes an ion with the same position and velocity
/// and releases an electron at the same position. Returns the number of
/// events.
pub fn ionize(
    store: &mut ParticleStore,
    n_e: &[f64],
    params: &IonizationParams,
    rng: &mut RngStream,
) -> u64 {
    let mut events = 0;
    let mut picked = Vec::new();
    for (k, &ne) in n_e.iter().enumerate() {
        let p = 1.0 - (-ne * params.rate * params.dt).exp();
        let n_neutral = store.bucket(params.neutral, k).len();
        if p <= 0.0 || n_neutral == 0 {
            continue;
        }
        picked.clear();
        if p >= 1.0 {
            picked.extend(0..n_neutral);
        } else {
            // Geometric gaps between successes reproduce independent
            // Bernoulli trials at a cost proportional to the events.
            let log_q = (-p).ln_1p();
            let mut i = 0usize;
            loop {
                let gap = (rng.uniform_open0().ln() / log_q).floor();
                if gap >= (n_neutral - i) as f64 {
                    break;
                }
                i += gap as usize;
                picked.push(i);
                i += 1;
                if i >= n_neutral {
                    break;
                }
            }
        }
        for &i in picked.iter().rev() {
            let n = store.bucket_mut(params.neutral, k).swap_remove(i);
            store.bucket_mut(params.ion, k).push(n);
            let v = crate::particles::maxwellian(rng, params.electron_vth);
            store.bucket_mut(params.electron, k).push(Particle {
                x_rel: n.x_rel,
                vx: v[0],
                vy: v[1],
                vz: v[2],
                weight: n.weight,
            });
        }
        events += picked.len() as u64;
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallSide {
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct WallParams {
    pub charges: Vec<f64>,
    /// Probability that an absorbed ion returns as a neutral.
    pub recycling_coeff: f64,
    pub ion: Option<usize>,
    pub neutral: Option<usize>,
    /// Thermal speed of re-emitted particles, per species.
    pub emit_vth: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WallOutcome {
    /// Particles re-entering the domain, per species, placed on the wall.
    pub reinjected: Vec<Vec<Emigrant>>,
    pub counters: CollisionCounters,
}

/// Absorbs charged particles that reached a wall, recycles ions into
/// neutrals and re-emits neutrals diffusely from a half-Maxwellian.
pub fn wall_interact(
    sub: &Subdomain,
    side: WallSide,
    hits: &[Vec<Emigrant>],
    params: &WallParams,
    rng: &mut RngStream,
) -> Result<WallOutcome> {
    let at_wall = match side {
        WallSide::Left => sub.at_left_wall(),
        WallSide::Right => sub.at_right_wall(),
    };
    if !at_wall {
        return Err(Error::Usage(format!(
            "rank {} has no {side:?} wall (periodic = {})",
            sub.rank, sub.periodic
        )));
    }
    let n_species = hits.len();
    let mut out = WallOutcome {
        reinjected: vec![Vec::new(); n_species],
        counters: CollisionCounters::new(n_species),
    };
    let (x_cells, inward) = match side {
        WallSide::Left => (0.0, 1.0),
        WallSide::Right => ((sub.n_cells_global - 1) as f64 + BELOW_ONE as f64, -1.0),
    };
    let emit = |rng: &mut RngStream, s: usize, weight: f32| -> Emigrant {
        let vth = params.emit_vth[s];
        Emigrant {
            x_cells,
            vx: (inward * (vth * rng.normal()).abs()) as f32,
            vy: (vth * rng.normal()) as f32,
            vz: (vth * rng.normal()) as f32,
            weight,
        }
    };
    for (s, list) in hits.iter().enumerate() {
        if params.charges[s] == 0.0 {
            for e in list {
                let back = emit(rng, s, e.weight);
                out.reinjected[s].push(back);
                out.counters.reflected += 1;
            }
            continue;
        }
        out.counters.absorbed[s] += list.len() as u64;
        if Some(s) != params.ion || params.recycling_coeff <= 0.0 {
            continue;
        }
        let Some(n) = params.neutral else { continue };
        for e in list {
            if rng.uniform() < params.recycling_coeff {
                let back = emit(rng, n, e.weight);
                out.reinjected[n].push(back);
                out.counters.recycled += 1;
            }
        }
    }
    Ok(out)
}
