//! Dense direction streams: quasi-random unit vectors from a Sobol sequence,
//! each completed to an orthonormal basis whose columns are consumed in
//! order.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Result, SolveError};

/// Largest supported stream dimension (extent of the embedded
/// direction-number table).
pub const MAX_DIMENSION: usize = 21;

const INDEX_BITS: usize = 32;

// Primitive polynomial coefficients `a` and initial values `m_k` for Sobol
// dimensions 2..=21 (new-joe-kuo-6 tabulation). Dimension 1 is the van der
// Corput sequence and is handled separately.
const JOE_KUO: [(u32, &[u32]); 20] = [
    (0, &[1]),
    (1, &[1, 3]),
    (1, &[1, 3, 1]),
    (2, &[1, 1, 1]),
    (1, &[1, 1, 3, 3]),
    (4, &[1, 3, 5, 13]),
    (2, &[1, 1, 5, 5, 17]),
    (4, &[1, 1, 5, 5, 5]),
    (7, &[1, 1, 7, 11, 19]),
    (11, &[1, 1, 5, 1, 1]),
    (13, &[1, 1, 1, 3, 11]),
    (14, &[1, 3, 5, 5, 31]),
    (1, &[1, 3, 3, 9, 7, 49]),
    (13, &[1, 1, 1, 15, 21, 21]),
    (16, &[1, 3, 1, 13, 27, 49]),
    (19, &[1, 1, 1, 15, 7, 5]),
    (22, &[1, 3, 1, 15, 13, 25]),
    (25, &[1, 1, 5, 5, 19, 61]),
    (1, &[1, 3, 7, 11, 23, 15, 103]),
    (4, &[1, 3, 7, 13, 13, 15, 69]),
];

fn direction_table(component: usize) -> [u32; INDEX_BITS] {
    let mut v = [0u32; INDEX_BITS];
    if component == 0 {
        // van der Corput: m_k = 1 for all k
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1 << (31 - k);
        }
        return v;
    }
    let (a, m) = JOE_KUO[component - 1];
    let s = m.len();
    for (k, &mk) in m.iter().enumerate() {
        v[k] = mk << (31 - k);
    }
    for i in s..INDEX_BITS {
        let j = i - s;
        v[i] = v[j] ^ (v[j] >> s);
        for k in 0..s - 1 {
            if (a >> k) & 1 != 0 {
                v[i] ^= v[j + 1 + k];
            }
        }
    }
    v
}

/// Gray-code Sobol generator over `[0, 1)^dim`.
///
/// Point 0 is the origin; successive points follow the Antonov-Saleev
/// update, matching the ordering of the standard tabulations.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    tables: Vec<[u32; INDEX_BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSequence {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIMENSION {
            return Err(SolveError::InvalidArgument(
                "Sobol dimension must be in 1..=21",
            ));
        }
        Ok(Self {
            tables: (0..dim).map(direction_table).collect(),
            state: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Index of the next point to be emitted.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Emit the next point of the sequence.
    pub fn next_point(&mut self) -> Vec<f64> {
        if self.index > 0 {
            let c = (self.index - 1).trailing_ones() as usize;
            for (s, t) in self.state.iter_mut().zip(&self.tables) {
                *s ^= t[c];
            }
        }
        self.index += 1;
        self.state
            .iter()
            .map(|&s| s as f64 / (1u64 << 32) as f64)
            .collect()
    }
}

/// Complete a unit vector `d` to an orthonormal basis with `d` as first
/// column, via the Householder reflector mapping `e_1` onto `d`.
///
/// Columns are returned as `basis[j]`; the first column equals `d` exactly.
pub fn complete_basis(d: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = d.len();
    let norm = d.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(SolveError::InvalidArgument(
            "basis completion requires a unit vector",
        ));
    }
    // sign chosen so the reflector is well away from the identity
    let s = if d[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v: Vec<f64> = d.to_vec();
    v[0] += s;
    let vtv: f64 = v.iter().map(|c| c * c).sum();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    basis.push(d.to_vec());
    for j in 1..n {
        let scale = 2.0 * v[j] / vtv;
        let mut col: Vec<f64> = v.iter().map(|&vi| -scale * vi).collect();
        col[j] += 1.0;
        // the reflector maps e_1 to -s*d; flip the remaining columns so the
        // completed matrix keeps positive orientation with first column d
        if s > 0.0 {
            for c in col.iter_mut() {
                *c = -*c;
            }
        }
        basis.push(col);
    }
    Ok(basis)
}

/// The dense sequence of search directions used by the solver.
///
/// Each Sobol point is mapped through `u -> 2u - 1` and normalized; the
/// resulting unit vector seeds an orthonormal basis whose columns are
/// consumed one per iteration. Degenerate all-zero raw points are skipped,
/// as is the all-zero point with index 0.
#[derive(Debug, Clone)]
pub struct SobolDirectionStream {
    dimension: usize,
    sobol: SobolSequence,
    /// Number of Sobol points consumed so far (including skipped ones).
    sobol_index: u64,
    basis: Vec<Vec<f64>>,
    cursor: usize,
}

impl SobolDirectionStream {
    pub fn new(dimension: usize) -> Result<Self> {
        let mut sobol = SobolSequence::new(dimension)?;
        // index 0 is the origin; skipped by construction
        let _ = sobol.next_point();
        let mut stream = Self {
            dimension,
            sobol,
            sobol_index: 1,
            basis: Vec::new(),
            cursor: 0,
        };
        stream.regenerate()?;
        Ok(stream)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.basis[j]
    }

    /// Next quasi-random unit direction; advances the Sobol index past any
    /// degenerate raw points.
    pub fn next_sobol_unit(&mut self) -> Vec<f64> {
        loop {
            let u = self.sobol.next_point();
            self.sobol_index += 1;
            let mut d: Vec<f64> = u.iter().map(|&c| 2.0 * c - 1.0).collect();
            let norm = d.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for c in d.iter_mut() {
                *c /= norm;
            }
            return d;
        }
    }

    /// Rebuild the basis from the next Sobol unit direction and reset the
    /// cursor.
    pub fn regenerate(&mut self) -> Result<()> {
        let d = self.next_sobol_unit();
        self.basis = complete_basis(&d)?;
        self.cursor = 0;
        Ok(())
    }

    /// Next direction with automatic basis regeneration once all columns of
    /// the current basis have been consumed.
    pub fn next_direction(&mut self) -> Result<Vec<f64>> {
        if self.cursor == self.dimension {
            self.regenerate()?;
        }
        let d = self.basis[self.cursor].clone();
        self.cursor += 1;
        Ok(d)
    }

    /// Index of the column the next cyclic poll will use.
    pub fn cyclic_position(&self) -> usize {
        self.cursor % self.dimension
    }

    /// Next column of the current basis, wrapping around without
    /// regeneration; multi-stepsize variants regenerate explicitly.
    pub fn next_cyclic(&mut self) -> Vec<f64> {
        if self.cursor >= self.dimension {
            self.cursor = 0;
        }
        let d = self.basis[self.cursor].clone();
        self.cursor += 1;
        d
    }
}
