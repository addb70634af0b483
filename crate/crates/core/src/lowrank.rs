//! Factorized low-rank update state.
//!
//! A `LowRankPair` holds the (A, B) factors of an update alpha * A * B that is
//! added to a frozen base weight; a `NestedLowRankPair` factorizes the factors
//! themselves so resource-limited clients can train and ship even smaller
//! matrices. Communication costs are counted exactly, in parameter units.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds::Rng64;
use rand::SeedableRng;

/// LoRA-style default: Gaussian init scale 1/sqrt(r) keeps the update
/// magnitude roughly rank-independent.
pub fn default_init_scale(rank: usize) -> f64 {
    1.0 / (rank as f64).sqrt()
}

/// Factorized update state: `alpha * a * b` with `a` m-by-r and `b` r-by-n.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LowRankPair {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "factor shapes {}x{} and {}x{} do not chain",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Input(format!(
                "alpha must be non-negative, got {alpha}"
            )));
        }
        Ok(Self { a, b, alpha })
    }

    /// Random initialization: A is i.i.d. Normal(0, init_scale^2), B is zero,
    /// so the materialized update starts exactly at zero.
    pub fn init_random(
        m: usize,
        n: usize,
        rank: usize,
        alpha: f64,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Rank(format!(
                "rank {rank} out of range for a {m}x{n} update"
            )));
        }
        let mut rng = Rng64::seed_from_u64(seed);
        let a = Matrix::gaussian(m, rank, init_scale, &mut rng);
        let b = Matrix::zeros(rank, n);
        Self::new(a, b, alpha)
    }

    /// Momentum initialization: continue from the previous factors unchanged.
    pub fn init_momentum(previous: &LowRankPair) -> LowRankPair {
        previous.clone()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn cols(&self) -> usize {
        self.b.cols()
    }

    /// Materializes the dense update alpha * A * B.
    pub fn materialize(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes chain").scale(self.alpha)
    }

    /// Returns `w + alpha * A * B`.
    pub fn accumulate(&self, w: &Matrix) -> Result<Matrix> {
        if w.rows() != self.rows() || w.cols() != self.cols() {
            return Err(Error::Shape(format!(
                "accumulate {}x{} update into {}x{} base",
                self.rows(),
                self.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let mut out = w.clone();
        out.add_scaled(&self.a.matmul(&self.b)?, self.alpha)?;
        Ok(out)
    }

    /// Serializes as a one-line "alpha rank" header followed by the two
    /// factor matrices in text form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.alpha, self.rank()));
        self.a.write_text(&mut out);
        self.b.write_text(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        Self::read_text(&mut lines)
    }

    pub(crate) fn read_text<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self> {
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing pair header line".into()))?;
        let mut parts = header.split_whitespace();
        let alpha: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad pair header: {header:?}")))?;
        let rank: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad pair header: {header:?}")))?;
        let a = Matrix::read_text(lines)?;
        let b = Matrix::read_text(lines)?;
        if a.cols() != rank {
            return Err(Error::Parse(format!(
                "declared rank {rank} does not match factor width {}",
                a.cols()
            )));
        }
        Self::new(a, b, alpha)
    }
}

/// Hierarchical update: the factors of a rank-r pair are themselves updated
/// through rank-r_A and rank-r_B pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedLowRankPair {
    a_down: Matrix,
    a_up: Matrix,
    b_down: Matrix,
    b_up: Matrix,
    alpha_a: f64,
    alpha_b: f64,
}

impl NestedLowRankPair {
    pub fn new(
        a_down: Matrix,
        a_up: Matrix,
        b_down: Matrix,
        b_up: Matrix,
        alpha_a: f64,
        alpha_b: f64,
    ) -> Result<Self> {
        if a_down.cols() != a_up.rows() {
            return Err(Error::Shape("nested A factors do not chain".into()));
        }
        if b_down.cols() != b_up.rows() {
            return Err(Error::Shape("nested B factors do not chain".into()));
        }
        let rank = a_up.cols();
        if b_down.rows() != rank {
            return Err(Error::Shape(
                "nested A and B factors disagree on the base rank".into(),
            ));
        }
        if a_down.cols() >= rank || b_down.cols() >= rank {
            return Err(Error::Rank(format!(
                "nested ranks ({}, {}) must be below the base rank {rank}",
                a_down.cols(),
                b_down.cols()
            )));
        }
        Ok(Self {
            a_down,
            a_up,
            b_down,
            b_up,
            alpha_a,
            alpha_b,
        })
    }

    /// Down factors Gaussian, up factors zero, so the recovered pair starts
    /// exactly equal to the distributed base pair.
    pub fn init_random(
        m: usize,
        n: usize,
        rank: usize,
        rank_a: usize,
        rank_b: usize,
        alpha_a: f64,
        alpha_b: f64,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank_a == 0 || rank_b == 0 || rank_a >= rank || rank_b >= rank {
            return Err(Error::Rank(format!(
                "nested ranks ({rank_a}, {rank_b}) must be in [1, {rank})"
            )));
        }
        let mut rng = Rng64::seed_from_u64(seed);
        let a_down = Matrix::gaussian(m, rank_a, init_scale, &mut rng);
        let a_up = Matrix::zeros(rank_a, rank);
        let b_down = Matrix::gaussian(rank, rank_b, init_scale, &mut rng);
        let b_up = Matrix::zeros(rank_b, n);
        Self::new(a_down, a_up, b_down, b_up, alpha_a, alpha_b)
    }

    pub fn a_down(&self) -> &Matrix {
        &self.a_down
    }

    pub fn a_up(&self) -> &Matrix {
        &self.a_up
    }

    pub fn b_down(&self) -> &Matrix {
        &self.b_down
    }

    pub fn b_up(&self) -> &Matrix {
        &self.b_up
    }

    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix, &mut Matrix, &mut Matrix) {
        (
            &mut self.a_down,
            &mut self.a_up,
            &mut self.b_down,
            &mut self.b_up,
        )
    }

    pub fn alpha_a(&self) -> f64 {
        self.alpha_a
    }

    pub fn alpha_b(&self) -> f64 {
        self.alpha_b
    }

    pub fn rank_a(&self) -> usize {
        self.a_down.cols()
    }

    pub fn rank_b(&self) -> usize {
        self.b_down.cols()
    }

    /// The updated A factor: `a + alpha_a * a_down * a_up`.
    pub fn apply_to_a(&self, a: &Matrix) -> Result<Matrix> {
        let mut out = a.clone();
        out.add_scaled(&self.a_down.matmul(&self.a_up)?, self.alpha_a)?;
        Ok(out)
    }

    /// The updated B factor: `b + alpha_b * b_down * b_up`.
    pub fn apply_to_b(&self, b: &Matrix) -> Result<Matrix> {
        let mut out = b.clone();
        out.add_scaled(&self.b_down.matmul(&self.b_up)?, self.alpha_b)?;
        Ok(out)
    }
}

/// Recovers a full rank-r pair from a base pair and its nested update:
/// A' = A + alpha_A A_d A_u, B' = B + alpha_B B_d B_u; alpha and rank are
/// unchanged.
pub fn recover_nested(base: &LowRankPair, nested: &NestedLowRankPair) -> Result<LowRankPair> {
    if nested.a_up.cols() != base.rank() || nested.a_down.rows() != base.rows() {
        return Err(Error::Shape(
            "nested A update does not match the base pair".into(),
        ));
    }
    if nested.b_down.rows() != base.rank() || nested.b_up.cols() != base.cols() {
        return Err(Error::Shape(
            "nested B update does not match the base pair".into(),
        ));
    }
    let a = nested.apply_to_a(base.a())?;
    let b = nested.apply_to_b(base.b())?;
    LowRankPair::new(a, b, base.alpha())
}

/// Parameters in one full m-by-n matrix.
pub fn comm_cost_full(m: usize, n: usize) -> u64 {
    m as u64 * n as u64
}

/// Parameters in one rank-r pair: r(m+n).
pub fn comm_cost_lowrank(m: usize, n: usize, r: usize) -> u64 {
    r as u64 * (m as u64 + n as u64)
}

/// Parameters in one nested upload: r_A(m+r) + r_B(n+r).
pub fn comm_cost_nested(m: usize, n: usize, r: usize, r_a: usize, r_b: usize) -> u64 {
    r_a as u64 * (m as u64 + r as u64) + r_b as u64 * (n as u64 + r as u64)
}
