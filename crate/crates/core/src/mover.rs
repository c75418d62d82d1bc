//! Leapfrog particle push.
//!
//! Velocities live half a step behind positions. The field is interpolated
//! linearly from the two nodes of the particle's cell; positions advance in
//! cell units and are left unsorted for [`crate::sorter::arrj`].

use crate::particles::ParticleStore;

/// Field seen by the particles of one push.
#[derive(Debug, Clone, Copy)]
pub struct PushParams<'a> {
    /// Node field in halo layout, or `None` for a field-free run.
    pub e_field: Option<&'a [f64]>,
    /// Charge-to-mass ratio per species.
    pub charge_to_mass: &'a [f64],
    pub dt: f64,
    pub dx: f64,
}

#[inline]
fn interp(e: &[f64], k: usize, x: f32) -> f64 {
    let x = x as f64;
    e[k + 1] * (1.0 - x) + e[k + 2] * x
}

/// Electrostatic push: `v += (q/m) E dt`, then `x += v dt`.
pub fn push_unmagnetized(store: &mut ParticleStore, p: &PushParams<'_>) {
    let dt_dx = p.dt / p.dx;
    for s in 0..store.n_species() {
        let qm = p.charge_to_mass[s];
        let kick = p.e_field.filter(|_| qm != 0.0);
        for (k, bucket) in store.species_mut(s).iter_mut().enumerate() {
            match kick {
                Some(e) => {
                    let a = qm * p.dt;
                    for part in bucket.iter_mut() {
                        let vx = part.vx as f64 + a * interp(e, k, part.x_rel);
                        part.vx = vx as f32;
                        part.x_rel = (part.x_rel as f64 + vx * dt_dx) as f32;
                    }
                }
                None => {
                    for part in bucket.iter_mut() {
                        part.x_rel = (part.x_rel as f64 + part.vx as f64 * dt_dx) as f32;
                    }
                }
            }
        }
    }
}

/// Boris scheme for one velocity: half electric kick, magnetic rotation, half
/// electric kick. Returns the velocity after a step `dt`.
#[inline]
pub fn boris_velocity(v: [f64; 3], e: [f64; 3], b: [f64; 3], qm: f64, dt: f64) -> [f64; 3] {
    let h = 0.5 * qm * dt;
    let vm = [v[0] + h * e[0], v[1] + h * e[1], v[2] + h * e[2]];
    let t = [h * b[0], h * b[1], h * b[2]];
    let t2 = t[0] * t[0] + t[1] * t[1] + t[2] * t[2];
    let s = [2.0 * t[0] / (1.0 + t2), 2.0 * t[1] / (1.0 + t2), 2.0 * t[2] / (1.0 + t2)];
    let vp = [
        vm[0] + (vm[1] * t[2] - vm[2] * t[1]),
        vm[1] + (vm[2] * t[0] - vm[0] * t[2]),
        vm[2] + (vm[0] * t[1] - vm[1] * t[0]),
    ];
    let vplus = [
        vm[0] + (vp[1] * s[2] - vp[2] * s[1]),
        vm[1] + (vp[2] * s[0] - vp[0] * s[2]),
        vm[2] + (vp[0] * s[1] - vp[1] * s[0]),
    ];
    [vplus[0] + h * e[0], vplus[1] + h * e[1], vplus[2] + h * e[2]]
}

/// Magnetized push with a uniform field `b`.
pub fn push_boris(store: &mut ParticleStore, p: &PushParams<'_>, b: [f64; 3]) {
    let dt_dx = p.dt / p.dx;
    for s in 0..store.n_species() {
        let qm = p.charge_to_mass[s];
        for (k, bucket) in store.species_mut(s).iter_mut().enumerate() {
            if qm == 0.0 {
                for part in bucket.iter_mut() {
                    part.x_rel = (part.x_rel as f64 + part.vx as f64 * dt_dx) as f32;
                }
                continue;
            }
            for part in bucket.iter_mut() {
                let ex = p.e_field.map_or(0.0, |e| interp(e, k, part.x_rel));
                let v = boris_velocity(
                    [part.vx as f64, part.vy as f64, part.vz as f64],
                    [ex, 0.0, 0.0],
                    b,
                    qm,
                    p.dt,
                );
                part.vx = v[0] as f32;
                part.vy = v[1] as f32;
                part.vz = v[2] as f32;
                part.x_rel = (part.x_rel as f64 + v[0] * dt_dx) as f32;
            }
        }
    }
}

/// Velocity-only update by `dt`; with `dt = -dt/2` it staggers a freshly
/// loaded state for leapfrog.
pub fn kick_velocities(store: &mut ParticleStore, p: &PushParams<'_>, b: Option<[f64; 3]>) {
    for s in 0..store.n_species() {
        let qm = p.charge_to_mass[s];
        if qm == 0.0 {
            continue;
        }
        for (k, bucket) in store.species_mut(s).iter_mut().enumerate() {
            for part in bucket.iter_mut() {
                let ex = p.e_field.map_or(0.0, |e| interp(e, k, part.x_rel));
                match b {
                    Some(b) => {
                        let v = boris_velocity(
                            [part.vx as f64, part.vy as f64, part.vz as f64],
                            [ex, 0.0, 0.0],
                            b,
                            qm,
                            p.dt,
                        );
                        part.vx = v[0] as f32;
                        part.vy = v[1] as f32;
                        part.vz = v[2] as f32;
                    }
                    None => part.vx = (part.vx as f64 + qm * p.dt * ex) as f32,
                }
            }
        }
    }
}
