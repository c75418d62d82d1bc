//! Contiguous 1D domain decomposition.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subdomain {
    pub rank: usize,
    pub n_ranks: usize,
    /// Global index of the first owned cell.
    pub cell_offset: usize,
    pub n_local_cells: usize,
    pub n_cells_global: usize,
    pub periodic: bool,
}

impl Subdomain {
    /// Splits `n_cells` into `n_ranks` contiguous ranges whose sizes differ by
    /// at most one; the first `n_cells % n_ranks` ranks take the extra cell.
    pub fn new(n_cells: usize, n_ranks: usize, rank: usize, periodic: bool) -> Self {
        assert!(n_ranks >= 1 && rank < n_ranks && n_ranks <= n_cells);
        let base = n_cells / n_ranks;
        let extra = n_cells % n_ranks;
        let n_local_cells = base + usize::from(rank < extra);
        let cell_offset = rank * base + rank.min(extra);
        Self {
            rank,
            n_ranks,
            cell_offset,
            n_local_cells,
            n_cells_global: n_cells,
            periodic,
        }
    }

    pub fn all(n_cells: usize, n_ranks: usize, periodic: bool) -> Vec<Subdomain> {
        (0..n_ranks)
            .map(|r| Self::new(n_cells, n_ranks, r, periodic))
            .collect()
    }

    pub fn cell_end(&self) -> usize {
        self.cell_offset + self.n_local_cells
    }

    pub fn left_neighbor(&self) -> Option<usize> {
        if self.rank > 0 {
            Some(self.rank - 1)
        } else if self.periodic {
            Some(self.n_ranks - 1)
        } else {
            None
        }
    }

    pub fn right_neighbor(&self) -> Option<usize> {
        if self.rank + 1 < self.n_ranks {
            Some(self.rank + 1)
        } else if self.periodic {
            Some(0)
        } else {
            None
        }
    }

    pub fn is_neighbor(&self, other: usize) -> bool {
        self.left_neighbor() == Some(other) || self.right_neighbor() == Some(other)
    }

    pub fn at_left_wall(&self) -> bool {
        !self.periodic && self.rank == 0
    }

    pub fn at_right_wall(&self) -> bool {
        !self.periodic && self.rank + 1 == self.n_ranks
    }

    pub fn owns_global_cell(&self, cell: i64) -> bool {
        cell >= self.cell_offset as i64 && cell < self.cell_end() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split() {
        let sizes: Vec<_> = Subdomain::all(100, 4, false)
            .iter()
            .map(|s| s.n_local_cells)
            .collect();
        assert_eq!(sizes, vec![25, 25, 25, 25]);
    }

    #[test]
    fn uneven_split_is_contiguous_and_balanced() {
        let subs = Subdomain::all(10, 4, false);
        let sizes: Vec<_> = subs.iter().map(|s| s.n_local_cells).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        for w in subs.windows(2) {
            assert_eq!(w[0].cell_end(), w[1].cell_offset);
        }
        assert_eq!(subs.last().unwrap().cell_end(), 10);
    }

    #[test]
    fn bounded_ends_have_one_neighbor() {
        let subs = Subdomain::all(8, 4, false);
        assert_eq!(subs[0].left_neighbor(), None);
        assert_eq!(subs[0].right_neighbor(), Some(1));
        assert_eq!(subs[3].right_neighbor(), None);
        assert!(subs[0].at_left_wall() && subs[3].at_right_wall());
        assert!(!subs[1].at_left_wall());
    }

    #[test]
    fn periodic_ring_wraps() {
        let subs = Subdomain::all(8, 4, true);
        assert_eq!(subs[0].left_neighbor(), Some(3));
        assert_eq!(subs[3].right_neighbor(), Some(0));
        let single = Subdomain::new(8, 1, 0, true);
        assert_eq!(single.left_neighbor(), Some(0));
    }
}
