//! Randomly shifted rank-1 lattice rules with Korobov generating vectors.

/// (N, a) pairs: prime point counts, each roughly double the previous, and
/// the Korobov multiplier a minimising the weighted P₂ discrepancy
/// (product weights 1/j², first 64 coordinates) over a candidate search.
pub const KOROBOV_TABLE: [(u64, u64); 14] = [
    (251, 60),
    (503, 33),
    (1009, 385),
    (2011, 245),
    (4019, 1567),
    (8039, 1806),
    (16067, 691),
    (32141, 10463),
    (64271, 24480),
    (128519, 45392),
    (257053, 30473),
    (514049, 110701),
    (1028099, 448882),
    (2056193, 792193),
];

/// A rank-1 lattice {k·z/N mod 1 : k = 0..N} in `dim` coordinates.
#[derive(Debug, Clone)]
pub struct KorobovLattice {
    n: u64,
    z: Vec<u64>,
}

impl KorobovLattice {
    /// Lattice from row `level` of [`KOROBOV_TABLE`].
    pub fn level(level: usize, dim: usize) -> Self {
        let (n, a) = KOROBOV_TABLE[level];
        Self::new(n, a, dim)
    }

    /// Generating vector z_j = a^j mod n.
    pub fn new(n: u64, a: u64, dim: usize) -> Self {
        let mut z = Vec::with_capacity(dim);
        let mut c = 1 % n;
        for _ in 0..dim {
            z.push(c);
            c = c * a % n;
        }
        Self { n, z }
    }

    pub fn n_points(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// Visits every shifted point {k·z/N + shift} mod 1, periodized with the
    /// tent map u ↦ |2u − 1|. The slice passed to `visit` is reused.
    pub fn for_each_point<F: FnMut(&[f64])>(&self, shift: &[f64], mut visit: F) {
        assert_eq!(shift.len(), self.z.len(), "shift dimension mismatch");
        let inv_n = 1.0 / self.n as f64;
        let mut pos = vec![0u64; self.z.len()];
        let mut point = vec![0.0; self.z.len()];
        for _ in 0..self.n {
            for j in 0..self.z.len() {
                let mut u = pos[j] as f64 * inv_n + shift[j];
                if u >= 1.0 {
                    u -= 1.0;
                }
                point[j] = (2.0 * u - 1.0).abs();
                pos[j] += self.z[j];
                if pos[j] >= self.n {
                    pos[j] -= self.n;
                }
            }
            visit(&point);
        }
    }
}
