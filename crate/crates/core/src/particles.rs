//! Cell-bucketed particle storage.
//!
//! Particles are stored per species and per owning cell, `buckets[s][k][i]`,
//! so particles that are close in space are close in memory. A particle only
//! records its position relative to its cell, in single precision.

use crate::config::ScenarioConfig;
use crate::domain::Subdomain;
use crate::rng::RngStream;

/// One macro-particle. 20 bytes of payload padded to 24.
#[repr(C, align(8))]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Particle {
    /// Position inside the owning cell in cell widths; in [0, 1) when sorted.
    pub x_rel: f32,
    pub vx: f32,
    pub vy: f32,
    pub vz: f32,
    pub weight: f32,
}

pub const PARTICLE_RECORD_BYTES: usize = std::mem::size_of::<Particle>();
const _: () = assert!(PARTICLE_RECORD_BYTES == 24);

/// Largest `f32` strictly below one.
pub const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Rounds a relative position in [0, 1) to single precision without letting
/// it round up to 1.0.
#[inline]
pub fn to_x_rel(frac: f64) -> f32 {
    let x = frac as f32;
    if x >= 1.0 {
        BELOW_ONE
    } else {
        x
    }
}

/// A particle in transit between subdomains, carrying its global position in
/// cell units (`x / dx - x_min / dx`). Cell units keep the position exact:
/// an integer cell index plus an `f32` offset always fits an `f64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emigrant {
    pub x_cells: f64,
    pub vx: f32,
    pub vy: f32,
    pub vz: f32,
    pub weight: f32,
}

impl Emigrant {
    pub fn from_particle(p: &Particle, global_cell: i64) -> Self {
        Self {
            x_cells: global_cell as f64 + p.x_rel as f64,
            vx: p.vx,
            vy: p.vy,
            vz: p.vz,
            weight: p.weight,
        }
    }

    pub fn position(&self, dx: f64, x_min: f64) -> f64 {
        x_min + self.x_cells * dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleStore {
    buckets: Vec<Vec<Vec<Particle>>>,
    n_local_cells: usize,
}

impl ParticleStore {
    pub fn new(n_species: usize, n_local_cells: usize) -> Self {
        Self {
            buckets: vec![vec![Vec::new(); n_local_cells]; n_species],
            n_local_cells,
        }
    }

    pub fn n_species(&self) -> usize {
        self.buckets.len()
    }

    pub fn n_local_cells(&self) -> usize {
        self.n_local_cells
    }

    pub fn bucket(&self, species: usize, cell: usize) -> &[Particle] {
        &self.buckets[species][cell]
    }

    pub fn bucket_mut(&mut self, species: usize, cell: usize) -> &mut Vec<Particle> {
        &mut self.buckets[species][cell]
    }

    pub fn species(&self, species: usize) -> &[Vec<Particle>] {
        &self.buckets[species]
    }

    pub fn species_mut(&mut self, species: usize) -> &mut [Vec<Particle>] {
        &mut self.buckets[species]
    }

    pub fn species_len(&self, species: usize) -> usize {
        self.buckets[species].iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        (0..self.n_species()).map(|s| self.species_len(s)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_sorted(&self) -> bool {
        self.buckets
            .iter()
            .flatten()
            .flatten()
            .all(|p| (0.0..1.0).contains(&p.x_rel))
    }

    pub fn total_weight(&self, species: usize) -> f64 {
        self.buckets[species]
            .iter()
            .flatten()
            .map(|p| p.weight as f64)
            .sum()
    }

    /// All particles of one species as emigrant-style records with global
    /// cell-unit positions.
    pub fn global_records(&self, species: usize, cell_offset: usize) -> Vec<Emigrant> {
        let mut out = Vec::with_capacity(self.species_len(species));
        for (k, bucket) in self.buckets[species].iter().enumerate() {
            let cell = (cell_offset + k) as i64;
            out.extend(bucket.iter().map(|p| Emigrant::from_particle(p, cell)));
        }
        out
    }
}

/// Loads `particles_per_cell` particles of each species into every owned
/// cell: uniform in-cell positions and Maxwellian velocities. Each
/// (species, global cell) pair draws from its own stream, so the loaded
/// global state does not depend on the number of ranks.
pub fn init_particles(config: &ScenarioConfig, sub: &Subdomain) -> ParticleStore {
    let mut store = ParticleStore::new(config.species.len(), sub.n_local_cells);
    for (s, sp) in config.species.iter().enumerate() {
        let vth = sp.thermal_speed();
        let weight = sp.weight(config.geometry.dx) as f32;
        for k in 0..sub.n_local_cells {
            let mut rng = RngStream::for_cell(config.rng_seed, s, sub.cell_offset + k);
            let bucket = store.bucket_mut(s, k);
            bucket.reserve_exact(sp.particles_per_cell);
            for _ in 0..sp.particles_per_cell {
                let x_rel = to_x_rel(rng.uniform());
                let [vx, vy, vz] = maxwellian(&mut rng, vth);
                bucket.push(Particle {
                    x_rel,
                    vx,
                    vy,
                    vz,
                    weight,
                });
            }
        }
    }
    store
}

/// Three velocity components from an isotropic Maxwellian.
pub fn maxwellian(rng: &mut RngStream, vth: f64) -> [f32; 3] {
    if vth == 0.0 {
        return [0.0; 3];
    }
    [
        (vth * rng.normal()) as f32,
        (vth * rng.normal()) as f32,
        (vth * rng.normal()) as f32,
    ]
}

/// Bytes of grid arrays held by one rank: per-species densities plus charge
/// density, potential and field, each with one ghost node per side.
pub fn grid_bytes(n_species: usize, n_local_cells: usize) -> usize {
    (n_species + 3) * (n_local_cells + 2) * std::mem::size_of::<f64>()
}

/// Working set of one rank: particle records plus grid arrays.
pub fn working_set_bytes(store: &ParticleStore, grid_array_bytes: usize) -> usize {
    store.len() * PARTICLE_RECORD_BYTES + grid_array_bytes
}
