//! Neighbor exchanges: ghost-node halos and migrating particles.
//!
//! Grid arrays hold `n_local + 2` nodes: index 0 is the left ghost, indices
//! `1..=n` are the owned nodes and index `n + 1` is the first node of the
//! right neighbor (owned, when this rank touches the right wall).

use super::{Endpoint, MessageHandle, Tag};
use crate::error::{Error, Result};
use crate::particles::Emigrant;

fn encode_f64s(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn decode_f64s(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::Payload(format!(
            "expected {expected} f64 values, got {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn wait_all(ep: &Endpoint<'_>, handles: &mut [MessageHandle]) -> Result<()> {
    for h in handles {
        ep.wait(h)?;
    }
    Ok(())
}

fn single_periodic(ep: &Endpoint<'_>) -> bool {
    let sub = ep.subdomain();
    sub.periodic && sub.n_ranks == 1
}

/// Adds each rank's partial sums on its right ghost node into the owner of
/// that node. Deposits onto node `n + 1` belong to the right neighbor's
/// first node.
pub fn fold_halo(ep: &Endpoint<'_>, arrays: &mut [&mut [f64]]) -> Result<()> {
    let sub = *ep.subdomain();
    let n = sub.n_local_cells;
    if single_periodic(ep) {
        for a in arrays.iter_mut() {
            a[1] += a[n + 1];
        }
        return Ok(());
    }
    let mut recv = match sub.left_neighbor() {
        Some(l) => Some(ep.irecv(l, Tag::HaloRight)?),
        None => None,
    };
    let mut send = match sub.right_neighbor() {
        Some(r) => Some(ep.isend(r, Tag::HaloRight, encode_f64s(arrays.iter().map(|a| a[n + 1])))?),
        None => None,
    };
    if let Some(h) = recv.as_mut() {
        let v = decode_f64s(&ep.wait(h)?, arrays.len())?;
        for (a, v) in arrays.iter_mut().zip(v) {
            a[1] += v;
        }
    }
    if let Some(h) = send.as_mut() {
        ep.wait(h)?;
    }
    Ok(())
}

/// Fills ghost nodes from the neighbors' owned values. Interior ranks post
/// two sends and two receives, ranks at a wall one of each.
pub fn exchange_halo(ep: &Endpoint<'_>, arrays: &mut [&mut [f64]]) -> Result<()> {
    let sub = *ep.subdomain();
    let n = sub.n_local_cells;
    if single_periodic(ep) {
        for a in arrays.iter_mut() {
            a[0] = a[n];
            a[n + 1] = a[1];
        }
        return Ok(());
    }
    let left = sub.left_neighbor();
    let right = sub.right_neighbor();
    let mut from_left = left.map(|l| ep.irecv(l, Tag::HaloRight)).transpose()?;
    let mut from_right = right.map(|r| ep.irecv(r, Tag::HaloLeft)).transpose()?;
    let mut sends = Vec::with_capacity(2);
    if let Some(l) = left {
        sends.push(ep.isend(l, Tag::HaloLeft, encode_f64s(arrays.iter().map(|a| a[1])))?);
    }
    if let Some(r) = right {
        sends.push(ep.isend(r, Tag::HaloRight, encode_f64s(arrays.iter().map(|a| a[n])))?);
    }
    if let Some(h) = from_left.as_mut() {
        let v = decode_f64s(&ep.wait(h)?, arrays.len())?;
        for (a, v) in arrays.iter_mut().zip(v) {
            a[0] = v;
        }
    }
    if let Some(h) = from_right.as_mut() {
        let v = decode_f64s(&ep.wait(h)?, arrays.len())?;
        for (a, v) in arrays.iter_mut().zip(v) {
            a[n + 1] = v;
        }
    }
    wait_all(ep, &mut sends)
}

const EMIGRANT_BYTES: usize = 24;

/// Serializes per-species emigrant lists.
pub fn encode_emigrants(lists: &[Vec<Emigrant>]) -> Vec<u8> {
    let total: usize = lists.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(4 + 4 * lists.len() + EMIGRANT_BYTES * total);
    out.extend((lists.len() as u32).to_le_bytes());
    for list in lists {
        out.extend((list.len() as u32).to_le_bytes());
        for e in list {
            out.extend(e.x_cells.to_le_bytes());
            out.extend(e.vx.to_le_bytes());
            out.extend(e.vy.to_le_bytes());
            out.extend(e.vz.to_le_bytes());
            out.extend(e.weight.to_le_bytes());
        }
    }
    out
}

pub fn decode_emigrants(bytes: &[u8]) -> Result<Vec<Vec<Emigrant>>> {
    let bad = |what: &str| Error::Payload(format!("particle message: {what}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let f32_at = |b: &[u8]| f32::from_le_bytes(b.try_into().expect("4 bytes"));
    let n_species = u32_at(take(4)?);
    let mut lists = Vec::with_capacity(n_species);
    for _ in 0..n_species {
        let count = u32_at(take(4)?);
        let raw = take(count * EMIGRANT_BYTES)?;
        lists.push(
            raw.chunks_exact(EMIGRANT_BYTES)
                .map(|r| Emigrant {
                    x_cells: f64::from_le_bytes(r[0..8].try_into().expect("8 bytes")),
                    vx: f32_at(&r[8..12]),
                    vy: f32_at(&r[12..16]),
                    vz: f32_at(&r[16..20]),
                    weight: f32_at(&r[20..24]),
                })
                .collect(),
        );
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(lists)
}

/// Particles received in one exchange, per species.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Immigrants {
    pub from_left: Vec<Vec<Emigrant>>,
    pub from_right: Vec<Vec<Emigrant>>,
}

fn wrap(lists: &mut [Vec<Emigrant>], n_cells: usize) {
    let n = n_cells as f64;
    for e in lists.iter_mut().flatten() {
        if e.x_cells < 0.0 {
            e.x_cells += n;
        } else if e.x_cells >= n {
            e.x_cells -= n;
        }
    }
}

/// Sends emigrants to the neighbors and collects theirs. Lists bound for a
/// wall must have been handed to the wall model instead and be empty here.
/// Positions leaving through a periodic end are wrapped by the sender.
pub fn exchange_particles(
    ep: &Endpoint<'_>,
    mut left: Vec<Vec<Emigrant>>,
    mut right: Vec<Vec<Emigrant>>,
) -> Result<Immigrants> {
    let sub = *ep.subdomain();
    let wall_leak = (sub.at_left_wall() && left.iter().any(|l| !l.is_empty()))
        || (sub.at_right_wall() && right.iter().any(|l| !l.is_empty()));
    if wall_leak {
        return Err(Error::Usage(
            "particles crossing a wall must go through the wall model".into(),
        ));
    }
    if sub.periodic {
        wrap(&mut left, sub.n_cells_global);
        wrap(&mut right, sub.n_cells_global);
    }
    if single_periodic(ep) {
        return Ok(Immigrants {
            from_left: right,
            from_right: left,
        });
    }
    let l = sub.left_neighbor();
    let r = sub.right_neighbor();
    let mut from_left = l.map(|p| ep.irecv(p, Tag::ParticlesRight)).transpose()?;
    let mut from_right = r.map(|p| ep.irecv(p, Tag::ParticlesLeft)).transpose()?;
    let mut sends = Vec::with_capacity(2);
    if let Some(p) = l {
        sends.push(ep.isend(p, Tag::ParticlesLeft, encode_emigrants(&left))?);
    }
    if let Some(p) = r {
        sends.push(ep.isend(p, Tag::ParticlesRight, encode_emigrants(&right))?);
    }
    let mut out = Immigrants::default();
    if let Some(h) = from_left.as_mut() {
        out.from_left = decode_emigrants(&ep.wait(h)?)?;
    }
    if let Some(h) = from_right.as_mut() {
        out.from_right = decode_emigrants(&ep.wait(h)?)?;
    }
    wait_all(ep, &mut sends)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{spawn_ranks, LaunchOptions};

    fn em(x: f64) -> Emigrant {
        Emigrant {
            x_cells: x,
            vx: 1.5,
            vy: -2.0,
            vz: 0.25,
            weight: 3.0,
        }
    }

    #[test]
    fn emigrant_codec_round_trips() {
        let lists = vec![vec![em(1.25), em(-0.5)], vec![], vec![em(7.0)]];
        assert_eq!(decode_emigrants(&encode_emigrants(&lists)).unwrap(), lists);
        let mut bytes = encode_emigrants(&lists);
        bytes.pop();
        assert!(decode_emigrants(&bytes).is_err());
    }

    #[test]
    fn halo_message_counts() {
        // Bounded, 4 ranks: ends post 1+1, interior ranks 2+2.
        let out = spawn_ranks(8, 4, false, LaunchOptions::default(), |ep| {
            let mut a = vec![ep.rank() as f64; 4];
            exchange_halo(ep, &mut [&mut a])?;
            Ok(a)
        })
        .unwrap();
        let counts: Vec<_> = out.iter().map(|o| (o.clock.sends, o.clock.recvs)).collect();
        assert_eq!(counts, vec![(1, 1), (2, 2), (2, 2), (1, 1)]);
        assert_eq!(out[1].value, vec![0.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn fold_then_fill_matches_single_rank() {
        // Each rank deposits 1 on every node it touches, including its
        // right ghost; after folding, every owned node of the ring holds 2.
        for n_ranks in [1, 2, 3] {
            let out = spawn_ranks(6, n_ranks, true, LaunchOptions::default(), |ep| {
                let n = ep.subdomain().n_local_cells;
                let mut a = vec![0.0; n + 2];
                for v in a.iter_mut().skip(1) {
                    *v += 1.0;
                }
                for v in a.iter_mut().skip(2).take(n - 1) {
                    *v += 1.0;
                }
                fold_halo(ep, &mut [&mut a])?;
                exchange_halo(ep, &mut [&mut a])?;
                Ok(a)
            })
            .unwrap();
            for o in &out {
                assert!(o.value.iter().all(|&v| v == 2.0), "{n_ranks}: {:?}", o.value);
            }
        }
    }

    #[test]
    fn particles_wrap_around_a_periodic_ring() {
        let out = spawn_ranks(4, 2, true, LaunchOptions::default(), |ep| {
            let (l, r) = if ep.rank() == 0 {
                (vec![vec![em(-0.25)]], vec![vec![em(2.5)]])
            } else {
                (vec![vec![]], vec![vec![em(4.75)]])
            };
            exchange_particles(ep, l, r)
        })
        .unwrap();
        assert_eq!(out[1].value.from_right[0], vec![em(3.75)]);
        assert_eq!(out[1].value.from_left[0], vec![em(2.5)]);
        assert_eq!(out[0].value.from_left[0], vec![em(0.75)]);
    }
}
