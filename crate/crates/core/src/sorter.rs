//! Re-bucketing of particles after a push.
//!
//! `arrj` walks every bucket once and moves each particle whose relative
//! position left [0, 1) straight into its new bucket, or into an emigrant
//! list when the new cell belongs to another rank. Order inside a bucket is
//! not preserved.

use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::particles::{to_x_rel, Emigrant, Particle, ParticleStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SortStats {
    pub moved_within: u64,
    pub emitted: u64,
    /// Largest cell displacement seen, in cells.
    pub max_hop: u64,
}

impl SortStats {
    pub fn accumulate(&mut self, other: &SortStats) {
        self.moved_within += other.moved_within;
        self.emitted += other.emitted;
        self.max_hop = self.max_hop.max(other.max_hop);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SortOutcome {
    /// Per species, bound for the left neighbor (or the left wall).
    pub left: Vec<Vec<Emigrant>>,
    pub right: Vec<Vec<Emigrant>>,
    pub stats: SortStats,
}

pub fn arrj(store: &mut ParticleStore, sub: &Subdomain) -> Result<SortOutcome> {
    let n = store.n_local_cells();
    let n_species = store.n_species();
    let mut out = SortOutcome {
        left: vec![Vec::new(); n_species],
        right: vec![Vec::new(); n_species],
        stats: SortStats::default(),
    };
    for s in 0..n_species {
        let buckets = store.species_mut(s);
        for k in 0..n {
            let mut i = 0;
            while i < buckets[k].len() {
                let p = buckets[k][i];
                if (0.0..1.0).contains(&p.x_rel) {
                    i += 1;
                    continue;
                }
                let pos = k as f64 + p.x_rel as f64;
                let cell = pos.floor();
                let hop = cell as i64 - k as i64;
                if hop.unsigned_abs() > n as u64 {
                    return Err(Error::Cfl {
                        hop,
                        n_local_cells: n,
                    });
                }
                out.stats.max_hop = out.stats.max_hop.max(hop.unsigned_abs());
                buckets[k].swap_remove(i);
                if cell >= 0.0 && (cell as usize) < n {
                    out.stats.moved_within += 1;
                    buckets[cell as usize].push(Particle {
                        x_rel: to_x_rel(pos - cell),
                        ..p
                    });
                } else {
                    out.stats.emitted += 1;
                    let global = (sub.cell_offset + k) as i64;
                    let e = Emigrant::from_particle(&p, global);
                    if cell < 0.0 {
                        out.left[s].push(e);
                    } else {
                        out.right[s].push(e);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inserts particles received from neighbors (or re-emitted by a wall)
/// into their buckets. Every position must fall inside this subdomain.
pub fn absorb_immigrants(
    store: &mut ParticleStore,
    sub: &Subdomain,
    lists: &[Vec<Emigrant>],
) -> Result<u64> {
    let mut count = 0;
    for (s, list) in lists.iter().enumerate() {
        for e in list {
            let cell = e.x_cells.floor();
            if !sub.owns_global_cell(cell as i64) || cell.is_nan() {
                return Err(Error::Routing {
                    rank: sub.rank,
                    x_cells: e.x_cells,
                    first: sub.cell_offset,
                    end: sub.cell_end(),
                });
            }
            let k = cell as usize - sub.cell_offset;
            store.bucket_mut(s, k).push(Particle {
                x_rel: to_x_rel(e.x_cells - cell),
                vx: e.vx,
                vy: e.vy,
                vz: e.vz,
                weight: e.weight,
            });
            count += 1;
        }
    }
    Ok(count)
}
