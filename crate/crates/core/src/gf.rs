//! Exact arithmetic and linear algebra over a prime field F_p.
//!
//! Field elements are plain `u64` values in `[0, p)`; all operations go
//! through a [`FieldContext`] that carries the modulus. Elimination routines
//! pivot on the first nonzero entry with the lowest row index so that every
//! result is reproducible.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GfError {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Immutable arithmetic context for F_p. Cheap to copy and share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldContext {
    p: u64,
}

impl FieldContext {
    pub fn new(p: u64) -> Result<Self, GfError> {
        if !is_prime(p) {
            return Err(GfError::NotPrime(p));
        }
        Ok(FieldContext { p })
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.p
    }

    #[inline]
    pub fn reduce(&self, x: u64) -> u64 {
        x % self.p
    }

    /// Maps a signed integer into `[0, p)`.
    #[inline]
    pub fn from_signed(&self, x: i64) -> u64 {
        let p = self.p as i64;
        (((x % p) + p) % p) as u64
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.p {
            s - self.p
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.p - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.p - a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.p as u128) as u64
    }

    /// Applies a `{+1, -1}` sign to a field element.
    #[inline]
    pub fn apply_sign(&self, sign: i8, x: u64) -> u64 {
        debug_assert!(sign == 1 || sign == -1);
        if sign == 1 {
            x
        } else {
            self.neg(x)
        }
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1 % self.p;
        base %= self.p;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    pub fn inv(&self, x: u64) -> Result<u64, GfError> {
        if x % self.p == 0 {
            return Err(GfError::DivisionByZero);
        }
        Ok(self.pow(x, self.p - 2))
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for q in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == q {
            return true;
        }
        if n % q == 0 {
            return false;
        }
    }
    // Deterministic Miller-Rabin for u64.
    let d = (n - 1) >> (n - 1).trailing_zeros();
    let s = (n - 1).trailing_zeros();
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = modpow(a % n, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = ((x as u128 * x as u128) % n as u128) as u64;
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn modpow(mut base: u64, mut exp: u64, n: u64) -> u64 {
    let mut acc = 1u64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = ((acc as u128 * base as u128) % n as u128) as u64;
        }
        base = ((base as u128 * base as u128) % n as u128) as u64;
        exp >>= 1;
    }
    acc
}

/// Dense row-major matrix over F_p.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<u64>,
}

impl Matrix {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zero(n, n);
        for i in 0..n {
            m.set(i, i, 1);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, GfError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(GfError::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[u64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn mul(&self, ctx: &FieldContext, other: &Matrix) -> Result<Matrix, GfError> {
        if self.cols != other.rows {
            return Err(GfError::Shape(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zero(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0 {
                    continue;
                }
                for j in 0..other.cols {
                    let v = ctx.add(out.get(i, j), ctx.mul(a, other.get(k, j)));
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, ctx: &FieldContext, v: &[u64]) -> Result<Vec<u64>, GfError> {
        if v.len() != self.cols {
            return Err(GfError::Shape(format!("{} cols vs {} vec", self.cols, v.len())));
        }
        let mut out = vec![0u64; self.rows];
        for i in 0..self.rows {
            let mut acc = 0u64;
            for j in 0..self.cols {
                acc = ctx.add(acc, ctx.mul(self.get(i, j), v[j]));
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// In-place reduction to row echelon form.
    /// Returns (rank, pivot column per eliminated row, determinant sign-tracked
    /// product for square matrices).
    fn echelon(&mut self, ctx: &FieldContext) -> (usize, Vec<usize>, u64) {
        let mut pivots = Vec::new();
        let mut det = 1u64;
        let mut row = 0;
        for col in 0..self.cols {
            // Partial pivot: first nonzero entry, lowest row index.
            let Some(p) = (row..self.rows).find(|&r| self.get(r, col) != 0) else {
                det = 0;
                continue;
            };
            if p != row {
                for c in 0..self.cols {
                    let tmp = self.get(p, c);
                    self.set(p, c, self.get(row, c));
                    self.set(row, c, tmp);
                }
                det = ctx.neg(det);
            }
            let pivot = self.get(row, col);
            det = ctx.mul(det, pivot);
            let pivot_inv = ctx.inv(pivot).expect("pivot nonzero");
            for c in col..self.cols {
                self.set(row, c, ctx.mul(self.get(row, c), pivot_inv));
            }
            for r in 0..self.rows {
                if r == row {
                    continue;
                }
                let factor = self.get(r, col);
                if factor == 0 {
                    continue;
                }
                for c in col..self.cols {
                    let v = ctx.sub(self.get(r, c), ctx.mul(factor, self.get(row, c)));
                    self.set(r, c, v);
                }
            }
            pivots.push(col);
            row += 1;
            if row == self.rows {
                break;
            }
        }
        if row < self.rows.min(self.cols) || self.rows != self.cols {
            // det only meaningful for square full-rank; echelon already
            // zeroed it when a column had no pivot.
        }
        (row, pivots, det)
    }

    pub fn det(&self, ctx: &FieldContext) -> Result<u64, GfError> {
        if self.rows != self.cols {
            return Err(GfError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let mut work = self.clone();
        let (rank, _, mut det) = work.echelon(ctx);
        if rank < self.rows {
            det = 0;
        }
        Ok(det)
    }

    pub fn rank(&self, ctx: &FieldContext) -> usize {
        let mut work = self.clone();
        work.echelon(ctx).0
    }

    pub fn is_invertible(&self, ctx: &FieldContext) -> bool {
        self.rows == self.cols && self.rank(ctx) == self.rows
    }

    /// Solves Ax = b for square invertible A.
    pub fn solve(&self, ctx: &FieldContext, b: &[u64]) -> Result<Vec<u64>, GfError> {
        if self.rows != self.cols {
            return Err(GfError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if b.len() != self.rows {
            return Err(GfError::Shape("rhs length".into()));
        }
        let mut aug = Matrix::zero(self.rows, self.cols + 1);
        for r in 0..self.rows {
            for c in 0..self.cols {
                aug.set(r, c, self.get(r, c));
            }
            aug.set(r, self.cols, b[r]);
        }
        let (_, pivots, _) = aug.echelon(ctx);
        if pivots.len() != self.cols || pivots.iter().enumerate().any(|(i, &c)| c != i) {
            return Err(GfError::Singular);
        }
        Ok((0..self.rows).map(|r| aug.get(r, self.cols)).collect())
    }

    /// Solves Ax = b for rectangular A; returns the particular solution with
    /// all free variables set to zero, or None if inconsistent.
    pub fn solve_any(&self, ctx: &FieldContext, b: &[u64]) -> Option<Vec<u64>> {
        assert_eq!(b.len(), self.rows);
        let mut aug = Matrix::zero(self.rows, self.cols + 1);
        for r in 0..self.rows {
            for c in 0..self.cols {
                aug.set(r, c, self.get(r, c));
            }
            aug.set(r, self.cols, b[r]);
        }
        let (rank, pivots, _) = aug.echelon(ctx);
        if pivots.last() == Some(&self.cols) {
            return None; // pivot in the augmented column: inconsistent
        }
        let mut x = vec![0u64; self.cols];
        for (r, &c) in pivots.iter().enumerate().take(rank) {
            x[c] = aug.get(r, self.cols);
        }
        Some(x)
    }

    pub fn inverse(&self, ctx: &FieldContext) -> Result<Matrix, GfError> {
        if self.rows != self.cols {
            return Err(GfError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut aug = Matrix::zero(n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                aug.set(r, c, self.get(r, c));
            }
            aug.set(r, n + r, 1);
        }
        let (rank, pivots, _) = aug.echelon(ctx);
        if rank < n || pivots.iter().enumerate().any(|(i, &c)| c != i) {
            return Err(GfError::Singular);
        }
        let mut out = Matrix::zero(n, n);
        for r in 0..n {
            for c in 0..n {
                out.set(r, c, aug.get(r, n + c));
            }
        }
        Ok(out)
    }

    /// Basis of the right null space {x : Ax = 0}.
    pub fn nullspace(&self, ctx: &FieldContext) -> Vec<Vec<u64>> {
        let mut work = self.clone();
        let (rank, pivots, _) = work.echelon(ctx);
        let pivot_set: Vec<usize> = pivots.clone();
        let free: Vec<usize> = (0..self.cols).filter(|c| !pivot_set.contains(c)).collect();
        let mut basis = Vec::with_capacity(free.len());
        for &f in &free {
            let mut v = vec![0u64; self.cols];
            v[f] = 1;
            for (r, &c) in pivot_set.iter().enumerate().take(rank) {
                v[c] = ctx.neg(work.get(r, f));
            }
            basis.push(v);
        }
        basis
    }

    /// Vertical concatenation.
    pub fn stack(&self, other: &Matrix) -> Result<Matrix, GfError> {
        if self.cols != other.cols {
            return Err(GfError::Shape("stack cols".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn context_accepts_primes_rejects_composites() {
        assert!(FieldContext::new(65537).is_ok());
        assert!(FieldContext::new(2).is_ok());
        assert_eq!(FieldContext::new(15).unwrap_err(), GfError::NotPrime(15));
        assert_eq!(FieldContext::new(1).unwrap_err(), GfError::NotPrime(1));
    }

    #[test]
    fn inverse_examples() {
        let f5 = FieldContext::new(5).unwrap();
        assert_eq!(f5.inv(2).unwrap(), 3);
        assert_eq!(f5.inv(1).unwrap(), 1);
        let f7 = FieldContext::new(7).unwrap();
        assert_eq!(f7.inv(3).unwrap(), 5);
        assert_eq!(f5.inv(0).unwrap_err(), GfError::DivisionByZero);
    }

    #[test]
    fn det_examples() {
        let ctx = FieldContext::new(65537).unwrap();
        assert_eq!(Matrix::identity(3).det(&ctx).unwrap(), 1);
        let m = Matrix::from_rows(&[vec![3, 7], vec![2, 11]]).unwrap();
        // ad - bc = 33 - 14 = 19
        assert_eq!(m.det(&ctx).unwrap(), 19);
        let rep = Matrix::from_rows(&[vec![1, 2, 3], vec![4, 5, 6], vec![1, 2, 3]]).unwrap();
        assert_eq!(rep.det(&ctx).unwrap(), 0);
        assert!(Matrix::zero(2, 3).det(&ctx).is_err());
    }

    #[test]
    fn solve_round_trip() {
        let ctx = FieldContext::new(65537).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..6usize);
            let a = loop {
                let m = random_matrix(&mut rng, &ctx, n, n);
                if m.is_invertible(&ctx) {
                    break m;
                }
            };
            let x: Vec<u64> = (0..n).map(|_| rng.random_range(0..ctx.modulus())).collect();
            let b = a.mul_vec(&ctx, &x).unwrap();
            assert_eq!(a.solve(&ctx, &b).unwrap(), x);
        }
        let singular = Matrix::from_rows(&[vec![1, 2], vec![2, 4]]).unwrap();
        assert_eq!(singular.solve(&ctx, &[1, 2]).unwrap_err(), GfError::Singular);
    }

    #[test]
    fn nullspace_examples() {
        let ctx = FieldContext::new(5).unwrap();
        assert!(Matrix::identity(4).nullspace(&ctx).is_empty());
        let m = Matrix::from_rows(&[vec![1, 1]]).unwrap();
        assert_eq!(m.nullspace(&ctx), vec![vec![4, 1]]);
    }

    #[test]
    fn vandermonde_full_rank() {
        let ctx = FieldContext::new(65537).unwrap();
        for t in 1..8usize {
            let rows: Vec<Vec<u64>> = (0..t)
                .map(|i| (1..=t as u64).map(|node| ctx.pow(node, i as u64)).collect())
                .collect();
            let m = Matrix::from_rows(&rows).unwrap();
            assert_eq!(m.rank(&ctx), t);
            assert_ne!(m.det(&ctx).unwrap(), 0);
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, ctx: &FieldContext, r: usize, c: usize) -> Matrix {
        let rows: Vec<Vec<u64>> = (0..r)
            .map(|_| (0..c).map(|_| rng.random_range(0..ctx.modulus())).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn field_inverse_property(x in 1u64..65537) {
            let ctx = FieldContext::new(65537).unwrap();
            prop_assert_eq!(ctx.mul(x, ctx.inv(x).unwrap()), 1);
        }

        #[test]
        fn det_multiplicative(seed in 0u64..1000, n in 1usize..5) {
            let ctx = FieldContext::new(65537).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, &ctx, n, n);
            let b = random_matrix(&mut rng, &ctx, n, n);
            let ab = a.mul(&ctx, &b).unwrap();
            prop_assert_eq!(
                ab.det(&ctx).unwrap(),
                ctx.mul(a.det(&ctx).unwrap(), b.det(&ctx).unwrap())
            );
        }

        #[test]
        fn rank_nullity(seed in 0u64..1000, r in 1usize..7, c in 1usize..7) {
            let ctx = FieldContext::new(65537).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, &ctx, r, c);
            prop_assert_eq!(a.rank(&ctx) + a.nullspace(&ctx).len(), c);
        }
    }
}
