//! Datasets, the combination matrix, and message evaluation.
//!
//! K independent datasets are replicated at every server. The M retrievable
//! "messages" are fixed public linear combinations of the datasets, given by
//! the rows of an M×K matrix V over F_p. The scheme assumes the first K rows
//! of V form the identity; [`normalize`] brings an arbitrary full-rank V into
//! that form and records the basis change so callers can map indices back.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gf::{FieldContext, GfError, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("matrix rank {rank} is below dataset count {k}")]
    RankDeficient { rank: usize, k: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Gf(#[from] GfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// M×K coefficient matrix with an identity top block: message m is
/// `sum_k rows[m][k] * dataset_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinationMatrix {
    m: usize,
    k: usize,
    rows: Vec<Vec<u64>>,
}

impl CombinationMatrix {
    pub fn message_count(&self) -> usize {
        self.m
    }

    pub fn dataset_count(&self) -> usize {
        self.k
    }

    /// Coefficient row of message `m` (1-based).
    pub fn row(&self, m: usize) -> &[u64] {
        &self.rows[m - 1]
    }

    pub fn coeff(&self, m: usize, k: usize) -> u64 {
        self.rows[m - 1][k - 1]
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.rows).expect("rows validated at construction")
    }
}

/// Record of how a raw matrix was rearranged into normalized form:
/// `row_order[i]` is the 1-based raw row placed at position i+1, and `b` is
/// the K×K block those top rows formed before it was divided out.
#[derive(Debug, Clone)]
pub struct BasisChange {
    pub row_order: Vec<usize>,
    pub b: Matrix,
}

impl BasisChange {
    /// Maps a raw (user-facing) message index to its normalized position.
    pub fn normalized_index(&self, raw: usize) -> usize {
        self.row_order
            .iter()
            .position(|&r| r == raw)
            .map(|p| p + 1)
            .expect("row_order is a permutation")
    }
}

/// Rearranges a full-rank M×K matrix so its first K rows are the identity.
///
/// The first K linearly independent rows are promoted to the top (preserving
/// their relative order, as for the rows left below) and the resulting top
/// block B is divided out on the right: V' = V_perm · B^-1.
pub fn normalize(
    raw: &Matrix,
    ctx: &FieldContext,
) -> Result<(CombinationMatrix, BasisChange), ModelError> {
    let m = raw.rows();
    let k = raw.cols();
    if m < k || k == 0 {
        return Err(ModelError::InvalidArgument(format!(
            "need M >= K >= 1, got M={m}, K={k}"
        )));
    }
    // Greedily pick the first K rows that keep the stack full-rank.
    let mut picked: Vec<usize> = Vec::new();
    let mut stack = Matrix::zero(0, k);
    for r in 0..m {
        if picked.len() == k {
            break;
        }
        let mut candidate = stack.clone();
        candidate.push_row(raw.row(r));
        if candidate.rank(ctx) > picked.len() {
            stack = candidate;
            picked.push(r);
        }
    }
    if picked.len() < k {
        return Err(ModelError::RankDeficient {
            rank: picked.len(),
            k,
        });
    }
    let rest: Vec<usize> = (0..m).filter(|r| !picked.contains(r)).collect();
    let order: Vec<usize> = picked.iter().chain(rest.iter()).copied().collect();
    let b = Matrix::from_rows(&picked.iter().map(|&r| raw.row(r).to_vec()).collect::<Vec<_>>())?;
    let b_inv = b.inverse(ctx)?;
    let permuted =
        Matrix::from_rows(&order.iter().map(|&r| raw.row(r).to_vec()).collect::<Vec<_>>())?;
    let normalized = permuted.mul(ctx, &b_inv)?;
    let rows: Vec<Vec<u64>> = (0..m).map(|r| normalized.row(r).to_vec()).collect();
    Ok((
        CombinationMatrix { m, k, rows },
        BasisChange {
            row_order: order.iter().map(|&r| r + 1).collect(),
            b,
        },
    ))
}

/// K replicated datasets of L symbols each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStore {
    k: usize,
    l: u64,
    data: Vec<Vec<u64>>,
}

impl DatasetStore {
    pub fn new(data: Vec<Vec<u64>>) -> Result<Self, ModelError> {
        let k = data.len();
        if k == 0 {
            return Err(ModelError::InvalidArgument("K must be >= 1".into()));
        }
        let l = data[0].len();
        if l == 0 || data.iter().any(|d| d.len() != l) {
            return Err(ModelError::InvalidArgument(
                "datasets must share one nonzero length".into(),
            ));
        }
        Ok(DatasetStore {
            k,
            l: l as u64,
            data,
        })
    }

    pub fn dataset_count(&self) -> usize {
        self.k
    }

    pub fn symbols_per_message(&self) -> u64 {
        self.l
    }

    /// Symbol `l` (1-based) of dataset `k` (1-based).
    pub fn symbol(&self, k: usize, l: u64) -> u64 {
        self.data[k - 1][(l - 1) as usize]
    }

    /// Applies a K×K matrix on the left: dataset_i' = sum_j t[i][j] dataset_j.
    /// Used to re-express the store in the basis the normalized combination
    /// matrix refers to.
    pub fn transform(&self, t: &Matrix, ctx: &FieldContext) -> Result<DatasetStore, ModelError> {
        if t.rows() != self.k || t.cols() != self.k {
            return Err(ModelError::InvalidArgument("transform must be K x K".into()));
        }
        let mut data = vec![vec![0u64; self.l as usize]; self.k];
        for (i, out) in data.iter_mut().enumerate() {
            for j in 0..self.k {
                let c = t.get(i, j);
                if c == 0 {
                    continue;
                }
                for (o, &x) in out.iter_mut().zip(self.data[j].iter()) {
                    *o = ctx.add(*o, ctx.mul(c, x));
                }
            }
        }
        DatasetStore::new(data)
    }
}

/// Deterministic pseudo-random store of uniform symbols.
pub fn generate_datasets(
    seed: u64,
    k: usize,
    l: u64,
    ctx: &FieldContext,
) -> Result<DatasetStore, ModelError> {
    if k == 0 || l == 0 {
        return Err(ModelError::InvalidArgument(
            "K and L must both be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k)
        .map(|_| (0..l).map(|_| rng.random_range(0..ctx.modulus())).collect())
        .collect();
    DatasetStore::new(data)
}

/// Deterministic pseudo-random M x K combination matrix of full column rank.
pub fn generate_matrix(
    seed: u64,
    m: usize,
    k: usize,
    ctx: &FieldContext,
) -> Result<Matrix, ModelError> {
    if k == 0 || m < k {
        return Err(ModelError::InvalidArgument(
            "need M >= K >= 1 for a full-rank combination matrix".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let rows: Vec<Vec<u64>> = (0..m)
            .map(|_| (0..k).map(|_| rng.random_range(0..ctx.modulus())).collect())
            .collect();
        let cand = Matrix::from_rows(&rows)?;
        if cand.rank(ctx) == k {
            return Ok(cand);
        }
    }
}

/// Lazy view of the M messages defined by a store and a combination matrix.
#[derive(Debug, Clone, Copy)]
pub struct MessageView<'a> {
    pub store: &'a DatasetStore,
    pub matrix: &'a CombinationMatrix,
    pub ctx: &'a FieldContext,
}

impl MessageView<'_> {
    /// W_m(l) for 1-based message index m and symbol index l.
    pub fn symbol(&self, m: usize, l: u64) -> Result<u64, ModelError> {
        if m == 0 || m > self.matrix.message_count() {
            return Err(ModelError::IndexOutOfRange(format!("message {m}")));
        }
        if l == 0 || l > self.store.symbols_per_message() {
            return Err(ModelError::IndexOutOfRange(format!("symbol {l}")));
        }
        let mut acc = 0u64;
        for k in 1..=self.matrix.dataset_count() {
            acc = self
                .ctx
                .add(acc, self.ctx.mul(self.matrix.coeff(m, k), self.store.symbol(k, l)));
        }
        Ok(acc)
    }

    /// Dense M×L evaluation, for hot paths that read many symbols.
    pub fn materialize(&self) -> Vec<Vec<u64>> {
        let m_count = self.matrix.message_count();
        let l = self.store.symbols_per_message();
        (1..=m_count)
            .map(|m| (1..=l).map(|pos| self.symbol(m, pos).unwrap()).collect())
            .collect()
    }
}

/// Renders a store in the text format: one header line `K L p`, then K lines
/// of L space-separated decimal symbols.
pub fn render_dataset_file(store: &DatasetStore, ctx: &FieldContext) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{} {} {}",
        store.dataset_count(),
        store.symbols_per_message(),
        ctx.modulus()
    )
    .unwrap();
    for row in &store.data {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

/// Parses the dataset file format; returns the store and its field context.
pub fn parse_dataset_file(text: &str) -> Result<(DatasetStore, FieldContext), ModelError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| ModelError::Parse("empty dataset file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(ModelError::Parse("header must be `K L p`".into()));
    }
    let k: usize = parts[0]
        .parse()
        .map_err(|_| ModelError::Parse("bad K in header".into()))?;
    let l: u64 = parts[1]
        .parse()
        .map_err(|_| ModelError::Parse("bad L in header".into()))?;
    let p: u64 = parts[2]
        .parse()
        .map_err(|_| ModelError::Parse("bad p in header".into()))?;
    let ctx = FieldContext::new(p)?;
    let mut data = Vec::with_capacity(k);
    for _ in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| ModelError::Parse("missing dataset line".into()))?;
        let row: Result<Vec<u64>, _> = line.split_whitespace().map(|t| t.parse::<u64>()).collect();
        let row = row.map_err(|_| ModelError::Parse("bad symbol".into()))?;
        if row.len() as u64 != l {
            return Err(ModelError::Parse(format!(
                "expected {l} symbols per line, got {}",
                row.len()
            )));
        }
        if row.iter().any(|&x| x >= p) {
            return Err(ModelError::Parse("symbol not reduced mod p".into()));
        }
        data.push(row);
    }
    Ok((DatasetStore::new(data)?, ctx))
}

/// Parses a combination-matrix file: M lines of K space-separated decimals.
pub fn parse_matrix_file(text: &str) -> Result<Matrix, ModelError> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<u64>, _> = line.split_whitespace().map(|t| t.parse::<u64>()).collect();
        rows.push(row.map_err(|_| ModelError::Parse("bad matrix entry".into()))?);
    }
    if rows.is_empty() {
        return Err(ModelError::Parse("empty matrix file".into()));
    }
    Ok(Matrix::from_rows(&rows)?)
}

pub fn read_dataset_file(path: &Path) -> Result<(DatasetStore, FieldContext), ModelError> {
    parse_dataset_file(&std::fs::read_to_string(path)?)
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix, ModelError> {
    parse_matrix_file(&std::fs::read_to_string(path)?)
}
