use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tiles laid out row-major: tile `i` sits at row `i / cols`, column `i % cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most square grid holding exactly `n` tiles.
    pub fn for_count(n: usize) -> Self {
        let cols = (1..=n).filter(|c| n % c == 0 && c * c <= n).max().unwrap_or(1);
        Self {
            rows: n / cols,
            cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Split of every tile, indexed by tile.
    pub fn labels(&self) -> Vec<Split> {
        let n = self.train.len() + self.val.len() + self.test.len();
        let mut out = vec![Split::Train; n];
        for s in Split::ALL {
            for &i in self.get(s) {
                out[i] = s;
            }
        }
        out
    }
}

/// Block sizes: floor of n·ratio, leftovers to the largest fractional
/// parts, then every block raised to at least one tile by taking from the
/// largest block.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::Input(format!("split ratios must be positive, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("split ratios must sum to 1, got {sum}")));
    }
    if n < 3 {
        return Err(Error::Input(format!("{n} tiles cannot form 3 nonempty blocks")));
    }
    let exact = ratios.map(|r| n as f64 * r);
    let mut counts = exact.map(|x| (x + 1e-9).floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    Ok(counts)
}

/// Walks the grid in serpentine order and cuts the walk into contiguous
/// train, val and test blocks. The seed picks one of eight walks
/// (row- or column-major, each axis possibly reversed).
pub fn split_spatial(grid: TileGrid, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let counts = split_counts(grid.len(), ratios)?;
    let variant: u8 = ChaCha8Rng::seed_from_u64(seed).random_range(0..8);
    let (transpose, flip_major, flip_minor) = (variant & 1 != 0, variant & 2 != 0, variant & 4 != 0);
    let (major, minor) = if transpose {
        (grid.cols, grid.rows)
    } else {
        (grid.rows, grid.cols)
    };
    let mut walk = Vec::with_capacity(grid.len());
    for a in 0..major {
        let a_pos = if flip_major { major - 1 - a } else { a };
        for b in 0..minor {
            let forward = (a % 2 == 0) != flip_minor;
            let b_pos = if forward { b } else { minor - 1 - b };
            let (r, c) = if transpose { (b_pos, a_pos) } else { (a_pos, b_pos) };
            walk.push(r * grid.cols + c);
        }
    }
    let (train, rest) = walk.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    Ok(SplitAssignment {
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeSet, VecDeque};

    const LIUZHOU: [f64; 3] = [0.46, 0.27, 0.27];

    #[test]
    fn liuzhou_proportions() {
        // 7047 : 4209 : 4071 pairs
        let total = 7047.0 + 4209.0 + 4071.0;
        assert!((7047.0 / total - 0.46f64).abs() < 0.005);
        assert!((4209.0 / total - 0.27f64).abs() < 0.005);
        assert!((4071.0 / total - 0.27f64).abs() < 0.01);
        let s = split_spatial(TileGrid { rows: 10, cols: 10 }, LIUZHOU, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (46, 27, 27));
    }

    #[test]
    fn three_tiles_one_per_block() {
        // floor: (2, 0, 0); leftover 1 goes to train (frac .94); then val and
        // test each take one from train.
        assert_eq!(split_counts(3, [0.98, 0.01, 0.01]).unwrap(), [1, 1, 1]);
        let s = split_spatial(TileGrid { rows: 1, cols: 3 }, [0.98, 0.01, 0.01], 5).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn enumerated_small_counts() {
        // every block lands within one tile of its exact share
        for n in 3..12 {
            let c = split_counts(n, [0.5, 0.25, 0.25]).unwrap();
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c.iter().all(|&k| k >= 1));
            let exact = [n as f64 * 0.5, n as f64 * 0.25, n as f64 * 0.25];
            for i in 0..3 {
                assert!((c[i] as f64 - exact[i]).abs() < 1.0 + 1e-9, "{n} {c:?}");
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(split_counts(2, LIUZHOU).is_err());
        assert!(split_counts(10, [0.5, 0.5, 0.0]).is_err());
        assert!(split_counts(10, [0.5, 0.4, 0.4]).is_err());
    }

    #[test]
    fn grid_for_count() {
        assert_eq!(TileGrid::for_count(16), TileGrid { rows: 4, cols: 4 });
        assert_eq!(TileGrid::for_count(64), TileGrid { rows: 8, cols: 8 });
        assert_eq!(TileGrid::for_count(12), TileGrid { rows: 4, cols: 3 });
        assert_eq!(TileGrid::for_count(7), TileGrid { rows: 7, cols: 1 });
    }

    fn connected(grid: TileGrid, block: &[usize]) -> bool {
        let set: BTreeSet<usize> = block.iter().copied().collect();
        let mut seen = BTreeSet::from([block[0]]);
        let mut queue = VecDeque::from([block[0]]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / grid.cols, i % grid.cols);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(i - grid.cols);
            }
            if r + 1 < grid.rows {
                nb.push(i + grid.cols);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < grid.cols {
                nb.push(i + 1);
            }
            for j in nb {
                if set.contains(&j) && seen.insert(j) {
                    queue.push_back(j);
                }
            }
        }
        seen.len() == set.len()
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_disjoint_and_contiguous(
            rows in 1usize..12, cols in 1usize..12, seed in any::<u64>(),
            a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0,
        ) {
            let grid = TileGrid { rows, cols };
            prop_assume!(grid.len() >= 3);
            let sum = a + b + c;
            let s = split_spatial(grid, [a / sum, b / sum, c / sum], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..grid.len()).collect::<Vec<_>>());
            for block in [&s.train, &s.val, &s.test] {
                prop_assert!(!block.is_empty());
                prop_assert!(connected(grid, block));
            }
            prop_assert_eq!(&s, &split_spatial(grid, [a / sum, b / sum, c / sum], seed).unwrap());
        }
    }
}
