//! Charge deposition, smoothing, the Poisson solve and the electric field.
//!
//! Grid arrays follow the halo layout described in [`crate::runtime`]:
//! `n_local + 2` nodes with one ghost per side. Node `k` of the subdomain is
//! stored at index `k + 1`.

use crate::config::ScenarioConfig;
use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::particles::{grid_bytes, ParticleStore};
use crate::runtime::{exchange_halo, fold_halo, Endpoint, Tag};

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    /// Number density per species.
    pub density: Vec<Vec<f64>>,
    pub charge_density: Vec<f64>,
    pub potential: Vec<f64>,
    pub e_field: Vec<f64>,
    pub dx: f64,
    n_local: usize,
    left_wall: bool,
    right_wall: bool,
    rho_fresh: bool,
    phi_fresh: bool,
    e_fresh: bool,
}

/// Freshness of the ghost-dependent arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Freshness {
    pub charge_density: bool,
    pub potential: bool,
    pub e_field: bool,
}

impl GridState {
    pub fn new(n_species: usize, sub: &Subdomain, dx: f64) -> Self {
        let len = sub.n_local_cells + 2;
        Self {
            density: vec![vec![0.0; len]; n_species],
            charge_density: vec![0.0; len],
            potential: vec![0.0; len],
            e_field: vec![0.0; len],
            dx,
            n_local: sub.n_local_cells,
            left_wall: sub.at_left_wall(),
            right_wall: sub.at_right_wall(),
            rho_fresh: false,
            phi_fresh: false,
            e_fresh: false,
        }
    }

    pub fn n_local(&self) -> usize {
        self.n_local
    }

    pub fn freshness(&self) -> Freshness {
        Freshness {
            charge_density: self.rho_fresh,
            potential: self.phi_fresh,
            e_field: self.e_fresh,
        }
    }

    pub fn set_freshness(&mut self, f: Freshness) {
        self.rho_fresh = f.charge_density;
        self.phi_fresh = f.potential;
        self.e_fresh = f.e_field;
    }

    pub fn bytes(&self) -> usize {
        grid_bytes(self.density.len(), self.n_local)
    }

    /// Array indices of the nodes this rank owns. The right wall node is
    /// owned by the last rank of a bounded domain.
    pub fn owned(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.n_local + usize::from(self.right_wall)
    }

    fn is_wall_index(&self, i: usize) -> bool {
        (self.left_wall && i == 1) || (self.right_wall && i == self.n_local + 1)
    }

    /// Recomputes the charge density from species densities on every node,
    /// ghosts included, after the density halo has been exchanged.
    pub fn refresh_charge_density(&mut self, charges: &[f64]) {
        self.charge_density.fill(0.0);
        for (d, &q) in self.density.iter().zip(charges) {
            if q != 0.0 {
                for (rho, n) in self.charge_density.iter_mut().zip(d) {
                    *rho += q * n;
                }
            }
        }
        self.rho_fresh = true;
    }

    /// Marks the field ghosts as filled.
    pub fn mark_e_field_fresh(&mut self) {
        self.e_fresh = true;
    }

    pub fn e_field_checked(&self) -> Result<&[f64]> {
        if self.e_fresh {
            Ok(&self.e_field)
        } else {
            Err(Error::StaleGhosts("e_field"))
        }
    }
}

/// Linear (cloud-in-cell) weighting of every particle onto the two nodes of
/// its cell. Leaves partial sums on the right ghost node for
/// [`exchange_density_halo`] to fold.
pub fn deposit_density(store: &ParticleStore, grid: &mut GridState) {
    let inv_dx = 1.0 / grid.dx;
    for (s, dens) in grid.density.iter_mut().enumerate() {
        dens.fill(0.0);
        for (k, bucket) in store.species(s).iter().enumerate() {
            let (mut left, mut right) = (0.0f64, 0.0f64);
            for p in bucket {
                let w = p.weight as f64;
                let x = p.x_rel as f64;
                left += w * (1.0 - x);
                right += w * x;
            }
            dens[k + 1] += left * inv_dx;
            dens[k + 2] += right * inv_dx;
        }
    }
    grid.rho_fresh = false;
    grid.phi_fresh = false;
    grid.e_fresh = false;
}

/// Folds and fills the species density halos, then derives the charge
/// density on all nodes.
pub fn exchange_density_halo(ep: &Endpoint<'_>, grid: &mut GridState, charges: &[f64]) -> Result<()> {
    {
        let mut arrays: Vec<&mut [f64]> = grid.density.iter_mut().map(|d| d.as_mut_slice()).collect();
        fold_halo(ep, &mut arrays)?;
        exchange_halo(ep, &mut arrays)?;
    }
    grid.refresh_charge_density(charges);
    Ok(())
}

/// Binomial (1, 2, 1)/4 filter of the charge density on owned non-wall
/// nodes. Leaves the ghost nodes stale.
pub fn smooth_density(grid: &mut GridState) -> Result<()> {
    if !grid.rho_fresh {
        return Err(Error::StaleGhosts("charge_density"));
    }
    let rho = &grid.charge_density;
    let smoothed: Vec<f64> = grid
        .owned()
        .map(|i| {
            if grid.is_wall_index(i) {
                rho[i]
            } else {
                0.25 * (rho[i - 1] + 2.0 * rho[i] + rho[i + 1])
            }
        })
        .collect();
    let first = *grid.owned().start();
    grid.charge_density[first..first + smoothed.len()].copy_from_slice(&smoothed);
    grid.rho_fresh = false;
    Ok(())
}

/// Solves `-phi'' = rho` on a bounded grid with fixed wall potentials.
#[derive(Debug, Clone)]
pub struct PoissonSolver {
    pub n_cells: usize,
    pub dx: f64,
    pub wall_potentials: (f64, f64),
}

impl PoissonSolver {
    pub fn from_config(config: &ScenarioConfig) -> Result<Self> {
        if !config.enable_field_solver {
            return Err(Error::Usage(
                "the Poisson solve needs enable_field_solver = true".into(),
            ));
        }
        if !config.geometry.bounded {
            return Err(Error::Usage(
                "the Poisson solve needs a bounded domain".into(),
            ));
        }
        Ok(Self {
            n_cells: config.geometry.n_cells_global,
            dx: config.geometry.dx,
            wall_potentials: config.wall_potentials,
        })
    }

    /// `rho` holds all `n_cells + 1` global nodes. Returns the potential on
    /// the same nodes.
    pub fn solve(&self, rho: &[f64]) -> Result<Vec<f64>> {
        solve_poisson(rho, self.dx, self.wall_potentials)
    }
}

/// Second-order finite differences with Dirichlet walls, solved by the
/// tridiagonal (Thomas) algorithm in O(N).
pub fn solve_poisson(rho: &[f64], dx: f64, walls: (f64, f64)) -> Result<Vec<f64>> {
    let n_nodes = rho.len();
    if n_nodes < 3 {
        return Err(Error::Usage(format!(
            "Poisson solve needs at least 3 nodes, got {n_nodes}"
        )));
    }
    let m = n_nodes - 2;
    let dx2 = dx * dx;
    let mut rhs: Vec<f64> = rho[1..=m].iter().map(|r| r * dx2).collect();
    rhs[0] += walls.0;
    rhs[m - 1] += walls.1;
    thomas(-1.0, 2.0, -1.0, &mut rhs);
    let mut phi = Vec::with_capacity(n_nodes);
    phi.push(walls.0);
    phi.extend(rhs);
    phi.push(walls.1);
    Ok(phi)
}

/// Solves a constant-coefficient tridiagonal system in place.
fn thomas(sub: f64, diag: f64, sup: f64, rhs: &mut [f64]) {
    let m = rhs.len();
    let mut c = vec![0.0; m];
    c[0] = sup / diag;
    rhs[0] /= diag;
    for i in 1..m {
        let denom = diag - sub * c[i - 1];
        c[i] = sup / denom;
        rhs[i] = (rhs[i] - sub * rhs[i - 1]) / denom;
    }
    for i in (0..m - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Gathers the owned charge density on rank 0, solves there and scatters
/// the potential, ghost nodes included.
pub fn gather_solve_scatter(
    ep: &Endpoint<'_>,
    grid: &mut GridState,
    solver: &PoissonSolver,
) -> Result<()> {
    let sub = *ep.subdomain();
    let owned: Vec<f64> = grid.owned().map(|i| grid.charge_density[i]).collect();
    if sub.rank != 0 {
        let mut recv = ep.irecv(0, Tag::Scatter)?;
        let mut send = ep.isend(0, Tag::Gather, f64_bytes(&owned))?;
        ep.wait(&mut send)?;
        let phi = bytes_f64(&ep.wait(&mut recv)?)?;
        if phi.len() != grid.potential.len() {
            return Err(Error::Payload(format!(
                "potential scatter: expected {} values, got {}",
                grid.potential.len(),
                phi.len()
            )));
        }
        grid.potential.copy_from_slice(&phi);
    } else {
        let subs = Subdomain::all(sub.n_cells_global, sub.n_ranks, sub.periodic);
        let mut recvs = (1..sub.n_ranks)
            .map(|r| ep.irecv(r, Tag::Gather))
            .collect::<Result<Vec<_>>>()?;
        let mut rho = Vec::with_capacity(solver.n_cells + 1);
        rho.extend_from_slice(&owned);
        for h in &mut recvs {
            rho.extend(bytes_f64(&ep.wait(h)?)?);
        }
        if rho.len() != solver.n_cells + 1 {
            return Err(Error::Payload(format!(
                "charge gather: expected {} nodes, got {}",
                solver.n_cells + 1,
                rho.len()
            )));
        }
        let phi = solver.solve(&rho)?;
        let window = |s: &Subdomain| -> Vec<f64> {
            let mut w = Vec::with_capacity(s.n_local_cells + 2);
            w.push(if s.cell_offset == 0 { 0.0 } else { phi[s.cell_offset - 1] });
            w.extend_from_slice(&phi[s.cell_offset..=s.cell_end()]);
            w
        };
        let mut sends = subs[1..]
            .iter()
            .map(|s| ep.isend(s.rank, Tag::Scatter, f64_bytes(&window(s))))
            .collect::<Result<Vec<_>>>()?;
        grid.potential.copy_from_slice(&window(&subs[0]));
        for h in &mut sends {
            ep.wait(h)?;
        }
    }
    grid.phi_fresh = true;
    grid.e_fresh = false;
    Ok(())
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f64(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Payload(format!("{} bytes is not a whole number of f64", b.len())));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// `E = -dphi/dx` on owned nodes: centered inside, one-sided at walls. The
/// ghost nodes still need [`exchange_e_field_halo`].
pub fn compute_efield(grid: &mut GridState) -> Result<()> {
    if !grid.phi_fresh {
        return Err(Error::StaleGhosts("potential"));
    }
    let phi = &grid.potential;
    let inv2 = 0.5 / grid.dx;
    let inv = 1.0 / grid.dx;
    let last = grid.n_local + 1;
    let values: Vec<f64> = grid
        .owned()
        .map(|i| {
            if grid.left_wall && i == 1 {
                -(phi[2] - phi[1]) * inv
            } else if grid.right_wall && i == last {
                -(phi[last] - phi[last - 1]) * inv
            } else {
                -(phi[i + 1] - phi[i - 1]) * inv2
            }
        })
        .collect();
    grid.e_field[1..1 + values.len()].copy_from_slice(&values);
    grid.e_fresh = false;
    Ok(())
}

pub fn exchange_e_field_halo(ep: &Endpoint<'_>, grid: &mut GridState) -> Result<()> {
    exchange_halo(ep, &mut [grid.e_field.as_mut_slice()])?;
    grid.e_fresh = true;
    Ok(())
}
