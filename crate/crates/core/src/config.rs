//! Scenario configuration: the INI-style run description, its validation, and
//! a canonical writer used both for round-trips and for checkpoint hashing.
//!
//! ```text
//! [grid]            n_cells_global, dx, x_min, bounded
//! [species.<name>]  charge, mass, particles_per_cell, temperature, density
//! [run]             dt, n_steps, enable_field_solver, enable_smoother,
//!                   magnetic_field, ionization_rate, ionization_temperature,
//!                   recycling_coeff, wall_temperature, wall_potentials, rng_seed
//! [parallel]        n_ranks
//! [io]              diag_interval, checkpoint_interval
//! ```
//!
//! Units are normalized: lengths in Debye lengths, times in inverse electron
//! plasma frequencies, charges in elementary charges, masses in electron
//! masses, temperatures in units of the reference electron temperature.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deuterium-to-electron mass ratio.
pub const DEUTERIUM_MASS: f64 = 3670.48;

#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub n_cells_global: usize,
    pub dx: f64,
    pub x_min: f64,
    /// Walls at both ends when true; periodic otherwise.
    pub bounded: bool,
}

impl GridGeometry {
    pub fn length(&self) -> f64 {
        self.n_cells_global as f64 * self.dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub charge: f64,
    pub mass: f64,
    pub particles_per_cell: usize,
    pub temperature: f64,
    /// Initial number density; sets the macro-particle weight.
    pub density: f64,
}

impl Species {
    pub fn is_neutral(&self) -> bool {
        self.charge == 0.0
    }

    pub fn charge_to_mass(&self) -> f64 {
        self.charge / self.mass
    }

    pub fn thermal_speed(&self) -> f64 {
        (self.temperature / self.mass).sqrt()
    }

    /// Statistical weight of one macro-particle at the initial loading.
    pub fn weight(&self, dx: f64) -> f64 {
        if self.particles_per_cell == 0 {
            0.0
        } else {
            self.density * dx / self.particles_per_cell as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagneticField {
    pub magnitude: f64,
    /// Angle between B and the x axis (the wall normal), radians.
    pub angle: f64,
}

impl MagneticField {
    pub fn vector(&self) -> [f64; 3] {
        [
            self.magnitude * self.angle.cos(),
            self.magnitude * self.angle.sin(),
            0.0,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub geometry: GridGeometry,
    pub species: Vec<Species>,
    pub dt: f64,
    pub n_steps: u64,
    pub enable_field_solver: bool,
    pub enable_smoother: bool,
    pub magnetic_field: Option<MagneticField>,
    pub ionization_rate: f64,
    pub ionization_temperature: f64,
    pub recycling_coeff: f64,
    pub wall_temperature: f64,
    pub wall_potentials: (f64, f64),
    pub diag_interval: u64,
    pub checkpoint_interval: u64,
    pub n_ranks: usize,
    pub rng_seed: u64,
}

/// Which configured species play the electron, ion and neutral roles in
/// ionization and recycling. The first species of each charge sign wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpeciesRoles {
    pub electron: Option<usize>,
    pub ion: Option<usize>,
    pub neutral: Option<usize>,
}

impl ScenarioConfig {
    pub fn roles(&self) -> SpeciesRoles {
        let find = |pred: fn(f64) -> bool| self.species.iter().position(|s| pred(s.charge));
        SpeciesRoles {
            electron: find(|q| q < 0.0),
            ion: find(|q| q > 0.0),
            neutral: find(|q| q == 0.0),
        }
    }

    pub fn magnetic_vector(&self) -> Option<[f64; 3]> {
        self.magnetic_field
            .filter(|b| b.magnitude != 0.0)
            .map(|b| b.vector())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        let g = &self.geometry;
        if g.n_cells_global < 2 {
            return bad(format!("n_cells_global must be >= 2, got {}", g.n_cells_global));
        }
        if !(g.dx > 0.0 && g.dx.is_finite()) {
            return bad(format!("dx must be positive, got {}", g.dx));
        }
        if !g.x_min.is_finite() {
            return bad("x_min must be finite".into());
        }
        if self.species.is_empty() {
            return bad("at least one [species.<name>] section is required".into());
        }
        for (i, s) in self.species.iter().enumerate() {
            if self.species[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate species '{}'", s.name));
            }
            if !(s.mass > 0.0 && s.mass.is_finite()) {
                return bad(format!("species '{}': mass must be > 0", s.name));
            }
            if !s.charge.is_finite() {
                return bad(format!("species '{}': charge must be finite", s.name));
            }
            if !(s.temperature >= 0.0 && s.temperature.is_finite()) {
                return bad(format!("species '{}': temperature must be >= 0", s.name));
            }
            if !(s.density > 0.0 && s.density.is_finite()) {
                return bad(format!("species '{}': density must be > 0", s.name));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.n_ranks == 0 {
            return bad("n_ranks must be >= 1".into());
        }
        if self.n_ranks > g.n_cells_global {
            return bad(format!(
                "n_ranks ({}) exceeds n_cells_global ({}); every rank needs at least one cell",
                self.n_ranks, g.n_cells_global
            ));
        }
        if self.enable_field_solver && !g.bounded {
            return bad("enable_field_solver requires a bounded geometry".into());
        }
        if self.enable_smoother && !self.enable_field_solver {
            return bad("enable_smoother requires enable_field_solver".into());
        }
        if let Some(b) = self.magnetic_field {
            if !(b.magnitude >= 0.0 && b.magnitude.is_finite() && b.angle.is_finite()) {
                return bad("magnetic_field magnitude must be >= 0 and finite".into());
            }
        }
        if !(self.ionization_rate >= 0.0 && self.ionization_rate.is_finite()) {
            return bad(format!(
                "ionization_rate must be >= 0, got {}",
                self.ionization_rate
            ));
        }
        if !(self.ionization_temperature >= 0.0) || !(self.wall_temperature >= 0.0) {
            return bad("ionization_temperature and wall_temperature must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.recycling_coeff) {
            return bad(format!(
                "recycling_coeff must lie in [0, 1], got {}",
                self.recycling_coeff
            ));
        }
        if !self.wall_potentials.0.is_finite() || !self.wall_potentials.1.is_finite() {
            return bad("wall_potentials must be finite".into());
        }
        let roles = self.roles();
        if self.ionization_rate > 0.0
            && (roles.electron.is_none() || roles.ion.is_none() || roles.neutral.is_none())
        {
            return bad("ionization_rate > 0 needs an electron, an ion and a neutral species".into());
        }
        if self.recycling_coeff > 0.0 {
            if !g.bounded {
                return bad("recycling_coeff > 0 requires a bounded geometry".into());
            }
            if roles.ion.is_none() || roles.neutral.is_none() {
                return bad("recycling needs an ion and a neutral species".into());
            }
        }
        Ok(())
    }

    /// Canonical INI text. Parsing it yields a config equal to `self`.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let g = &self.geometry;
        let _ = writeln!(out, "[grid]");
        let _ = writeln!(out, "n_cells_global = {}", g.n_cells_global);
        let _ = writeln!(out, "dx = {}", fmt_f64(g.dx));
        let _ = writeln!(out, "x_min = {}", fmt_f64(g.x_min));
        let _ = writeln!(out, "bounded = {}", g.bounded);
        for s in &self.species {
            let _ = writeln!(out, "\n[species.{}]", s.name);
            let _ = writeln!(out, "charge = {}", fmt_f64(s.charge));
            let _ = writeln!(out, "mass = {}", fmt_f64(s.mass));
            let _ = writeln!(out, "particles_per_cell = {}", s.particles_per_cell);
            let _ = writeln!(out, "temperature = {}", fmt_f64(s.temperature));
            let _ = writeln!(out, "density = {}", fmt_f64(s.density));
        }
        let _ = writeln!(out, "\n[run]");
        let _ = writeln!(out, "dt = {}", fmt_f64(self.dt));
        let _ = writeln!(out, "n_steps = {}", self.n_steps);
        let _ = writeln!(out, "enable_field_solver = {}", self.enable_field_solver);
        let _ = writeln!(out, "enable_smoother = {}", self.enable_smoother);
        if let Some(b) = self.magnetic_field {
            let _ = writeln!(
                out,
                "magnetic_field = {}, {}",
                fmt_f64(b.magnitude),
                fmt_f64(b.angle)
            );
        }
        let _ = writeln!(out, "ionization_rate = {}", fmt_f64(self.ionization_rate));
        let _ = writeln!(
            out,
            "ionization_temperature = {}",
            fmt_f64(self.ionization_temperature)
        );
        let _ = writeln!(out, "recycling_coeff = {}", fmt_f64(self.recycling_coeff));
        let _ = writeln!(out, "wall_temperature = {}", fmt_f64(self.wall_temperature));
        let _ = writeln!(
            out,
            "wall_potentials = {}, {}",
            fmt_f64(self.wall_potentials.0),
            fmt_f64(self.wall_potentials.1)
        );
        let _ = writeln!(out, "rng_seed = {}", self.rng_seed);
        let _ = writeln!(out, "\n[parallel]");
        let _ = writeln!(out, "n_ranks = {}", self.n_ranks);
        let _ = writeln!(out, "\n[io]");
        let _ = writeln!(out, "diag_interval = {}", self.diag_interval);
        let _ = writeln!(out, "checkpoint_interval = {}", self.checkpoint_interval);
        out
    }

    /// Hash of everything that shapes the simulated state. Step count and
    /// output cadence are excluded so a run can be extended from a checkpoint.
    pub fn state_hash(&self) -> u64 {
        let mut c = self.clone();
        c.n_steps = 0;
        c.diag_interval = 0;
        c.checkpoint_interval = 0;
        let digest = Sha256::digest(c.to_ini().as_bytes());
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first)
    }
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` keeps a trailing ".0" and round-trips exactly.
    format!("{v:?}")
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn write_config(config: &ScenarioConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, config.to_ini()).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Default)]
struct Section {
    line: usize,
    entries: HashMap<String, Entry>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn required<T>(&mut self, section: &str, key: &str, parse: fn(&str) -> Option<T>) -> Result<T> {
        match self.take(key) {
            Some(e) => parse_value(&e, key, parse),
            None => Err(Error::Validation(format!(
                "missing required key '{key}' in [{section}] (line {})",
                self.line
            ))),
        }
    }

    fn optional<T>(&mut self, key: &str, default: T, parse: fn(&str) -> Option<T>) -> Result<T> {
        match self.take(key) {
            Some(e) => parse_value(&e, key, parse),
            None => Ok(default),
        }
    }

    fn reject_leftovers(&self, section: &str) -> Result<()> {
        let mut keys: Vec<_> = self.entries.iter().collect();
        keys.sort_by_key(|(_, e)| e.line);
        if let Some((key, e)) = keys.first() {
            return Err(Error::Parse {
                line: e.line,
                msg: format!("unknown key '{key}' in [{section}]"),
            });
        }
        Ok(())
    }
}

fn parse_value<T>(e: &Entry, key: &str, parse: fn(&str) -> Option<T>) -> Result<T> {
    parse(&e.value).ok_or_else(|| Error::Parse {
        line: e.line,
        msg: format!("cannot parse value '{}' for key '{key}'", e.value),
    })
}

fn p_f64(s: &str) -> Option<f64> {
    s.parse().ok()
}
fn p_usize(s: &str) -> Option<usize> {
    s.parse().ok()
}
fn p_u64(s: &str) -> Option<u64> {
    s.parse().ok()
}
fn p_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}
fn p_pair(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

const SECTION_NAMES: [&str; 4] = ["grid", "run", "parallel", "io"];

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let mut sections: Vec<(String, Section)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                line,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim();
            let known = SECTION_NAMES.contains(&name)
                || name
                    .strip_prefix("species.")
                    .is_some_and(|n| !n.is_empty() && n.chars().all(is_name_char));
            if !known {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown section [{name}]"),
                });
            }
            if sections.iter().any(|(n, _)| n == name) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate section [{name}]"),
                });
            }
            sections.push((
                name.to_string(),
                Section {
                    line,
                    ..Section::default()
                },
            ));
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected 'key = value', got '{content}'"),
        })?;
        let (_, section) = sections.last_mut().ok_or_else(|| Error::Parse {
            line,
            msg: "key outside of any section".into(),
        })?;
        let key = key.trim().to_string();
        if section.entries.contains_key(&key) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key '{key}'"),
            });
        }
        section.entries.insert(
            key,
            Entry {
                value: value.trim().to_string(),
                line,
            },
        );
    }

    let mut take_section = |name: &str| -> Option<Section> {
        let pos = sections.iter().position(|(n, _)| n == name)?;
        Some(sections.remove(pos).1)
    };

    let mut grid = take_section("grid")
        .ok_or_else(|| Error::Validation("missing [grid] section".into()))?;
    let geometry = GridGeometry {
        n_cells_global: grid.required("grid", "n_cells_global", p_usize)?,
        dx: grid.required("grid", "dx", p_f64)?,
        x_min: grid.optional("x_min", 0.0, p_f64)?,
        bounded: grid.optional("bounded", false, p_bool)?,
    };
    grid.reject_leftovers("grid")?;

    let mut run = take_section("run")
        .ok_or_else(|| Error::Validation("missing [run] section".into()))?;
    let dt = run.required("run", "dt", p_f64)?;
    let n_steps = run.required("run", "n_steps", p_u64)?;
    let enable_field_solver = run.optional("enable_field_solver", false, p_bool)?;
    let enable_smoother = run.optional("enable_smoother", false, p_bool)?;
    let magnetic_field = run
        .optional("magnetic_field", None, |s| p_pair(s).map(Some))?
        .map(|(magnitude, angle)| MagneticField { magnitude, angle });
    let ionization_rate = run.optional("ionization_rate", 0.0, p_f64)?;
    let ionization_temperature = run.optional("ionization_temperature", 1.0, p_f64)?;
    let recycling_coeff = run.optional("recycling_coeff", 0.0, p_f64)?;
    let wall_temperature = run.optional("wall_temperature", 0.01, p_f64)?;
    let wall_potentials = run.optional("wall_potentials", (0.0, 0.0), p_pair)?;
    let rng_seed = run.optional("rng_seed", 1, p_u64)?;
    run.reject_leftovers("run")?;

    let (n_ranks, diag_interval, checkpoint_interval) = {
        let mut par = take_section("parallel").unwrap_or_default();
        let n_ranks = par.optional("n_ranks", 1, p_usize)?;
        par.reject_leftovers("parallel")?;
        let mut io = take_section("io").unwrap_or_default();
        let diag = io.optional("diag_interval", 0, p_u64)?;
        let ckpt = io.optional("checkpoint_interval", 0, p_u64)?;
        io.reject_leftovers("io")?;
        (n_ranks, diag, ckpt)
    };

    // Only species sections remain, in file order.
    let mut species = Vec::with_capacity(sections.len());
    for (name, mut sec) in sections {
        let label = name.clone();
        let short = name.trim_start_matches("species.").to_string();
        let charge = sec.required(&label, "charge", p_f64)?;
        let mass = sec.required(&label, "mass", p_f64)?;
        let particles_per_cell = sec.required(&label, "particles_per_cell", p_usize)?;
        let temperature = sec.optional("temperature", 1.0, p_f64)?;
        let density = sec.optional("density", 1.0, p_f64)?;
        sec.reject_leftovers(&label)?;
        species.push(Species {
            name: short,
            charge,
            mass,
            particles_per_cell,
            temperature,
            density,
        });
    }

    let config = ScenarioConfig {
        geometry,
        species,
        dt,
        n_steps,
        enable_field_solver,
        enable_smoother,
        magnetic_field,
        ionization_rate,
        ionization_temperature,
        recycling_coeff,
        wall_temperature,
        wall_potentials,
        diag_interval,
        checkpoint_interval,
        n_ranks,
        rng_seed,
    };
    config.validate()?;
    Ok(config)
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '+' | '-')
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[grid]
n_cells_global = 10
dx = 1.0

[species.e]
charge = -1
mass = 1
particles_per_cell = 4

[run]
dt = 0.1
n_steps = 5
";

    #[test]
    fn defaults_apply_to_omitted_keys() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.n_ranks, 1);
        assert!(!c.geometry.bounded);
        assert_eq!(c.species[0].temperature, 1.0);
        assert_eq!(c.wall_potentials, (0.0, 0.0));
        assert!(c.magnetic_field.is_none());
    }

    #[test]
    fn zero_dt_is_rejected() {
        let text = MINIMAL.replace("dt = 0.1", "dt = 0");
        assert!(matches!(parse_config(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn too_many_ranks_is_rejected() {
        let text = format!("{MINIMAL}\n[parallel]\nn_ranks = 11\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("n_ranks")));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = MINIMAL.replace("dx = 1.0", "dx = 1.0\ncolour = blue");
        match parse_config(&text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("colour"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_value_reports_its_line() {
        let text = MINIMAL.replace("n_steps = 5", "n_steps = five");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 13, .. })));
    }

    #[test]
    fn field_solver_needs_walls() {
        let text = MINIMAL.replace("n_steps = 5", "n_steps = 5\nenable_field_solver = true");
        assert!(matches!(parse_config(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = MINIMAL.replace("dx = 1.0", "dx = 1.0   # cell width\n# whole-line comment\n");
        assert!(parse_config(&text).is_ok());
    }

    #[test]
    fn state_hash_ignores_step_count() {
        let a = parse_config(MINIMAL).unwrap();
        let mut b = a.clone();
        b.n_steps = 1000;
        assert_eq!(a.state_hash(), b.state_hash());
        b.dt = 0.2;
        assert_ne!(a.state_hash(), b.state_hash());
    }
}
