//! Interpolation paths, baselines, and Riemann–Stieltjes integration of a
//! gradient field along a path.
//!
//! A [`Path`] is piecewise linear between its points `g(t_0), …, g(t_K)`.
//! Integration forms `Σ_k ∇F(g(c_k)) ⊙ (g(t_{k+1}) − g(t_k))`, where the
//! evaluation point `c_k` is fixed by the [`QuadratureRule`]. Nothing requires
//! the coordinates of `g` to be monotone; only the partition is ordered.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Differentiable, SpecialToken};
use crate::tensor::Matrix;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_DISCRETIZED_STEPS: usize = 30;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum QuadratureRule {
    Left,
    Right,
    Midpoint,
    #[default]
    Trapezoid,
}

impl QuadratureRule {
    pub const ALL: [QuadratureRule; 4] = [
        QuadratureRule::Left,
        QuadratureRule::Right,
        QuadratureRule::Midpoint,
        QuadratureRule::Trapezoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuadratureRule::Left => "left",
            QuadratureRule::Right => "right",
            QuadratureRule::Midpoint => "midpoint",
            QuadratureRule::Trapezoid => "trapezoid",
        }
    }

    /// Gradient evaluations needed for a path of `segments` segments.
    pub fn evaluations(self, segments: usize) -> usize {
        match self {
            QuadratureRule::Trapezoid => segments + 1,
            _ => segments,
        }
    }
}

impl fmt::Display for QuadratureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuadratureRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuadratureRule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::input(format!("unknown rule {s:?}; expected left, right, midpoint or trapezoid")))
    }
}

/// Counts gradient and forward evaluations. Safe to share across threads.
#[derive(Debug, Default)]
pub struct CallCounter {
    gradient_calls: AtomicU64,
    forward_calls: AtomicU64,
}

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_gradient_calls(&self, n: u64) {
        self.gradient_calls.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_forward_calls(&self, n: u64) {
        self.forward_calls.fetch_add(n, Ordering::Relaxed);
    }

    pub fn gradient_calls(&self) -> u64 {
        self.gradient_calls.load(Ordering::Relaxed)
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }
}

/// Which reference embedding a word is moved away from.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineSpec {
    MaskToken,
    PadToken,
    Zero,
    /// Row `i` of the matrix is the baseline for word `i`.
    Custom(Matrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Mask,
    Pad,
    Zero,
    Custom,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mask => "mask",
            BaselineKind::Pad => "pad",
            BaselineKind::Zero => "zero",
            BaselineKind::Custom => "custom",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(BaselineSpec::MaskToken),
            "pad" => Ok(BaselineSpec::PadToken),
            "zero" => Ok(BaselineSpec::Zero),
            _ => Err(Error::input(format!("unknown baseline {s:?}; expected mask, pad or zero"))),
        }
    }
}

impl BaselineSpec {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineSpec::MaskToken => BaselineKind::Mask,
            BaselineSpec::PadToken => BaselineKind::Pad,
            BaselineSpec::Zero => BaselineKind::Zero,
            BaselineSpec::Custom(_) => BaselineKind::Custom,
        }
    }

    /// `<mask>` when the model has one, else `<pad>`, else zeros.
    pub fn preferred<M: Differentiable + ?Sized>(model: &M) -> BaselineSpec {
        if model.special_embedding(SpecialToken::Mask).is_some() {
            BaselineSpec::MaskToken
        } else if model.special_embedding(SpecialToken::Pad).is_some() {
            BaselineSpec::PadToken
        } else {
            BaselineSpec::Zero
        }
    }

    /// Baseline row for word `i` of `x`.
    pub fn row<M: Differentiable + ?Sized>(&self, x: &Matrix, i: usize, model: &M) -> Result<Vec<f64>> {
        let n = x.cols();
        let token_row = |token: SpecialToken, name: &str| -> Result<Vec<f64>> {
            let row = model
                .special_embedding(token)
                .ok_or_else(|| Error::input(format!("model has no {name} token")))?;
            if row.len() != n {
                return Err(Error::input(format!(
                    "{name} embedding has width {}, input has {n}",
                    row.len()
                )));
            }
            Ok(row.to_vec())
        };
        match self {
            BaselineSpec::MaskToken => token_row(SpecialToken::Mask, "<mask>"),
            BaselineSpec::PadToken => token_row(SpecialToken::Pad, "<pad>"),
            BaselineSpec::Zero => Ok(vec![0.0; n]),
            BaselineSpec::Custom(m) => {
                m.ensure_shape(x.rows(), n, "custom baseline")?;
                Ok(m.row(i).to_vec())
            }
        }
    }
}

/// `x` with only row `i` replaced by its baseline row.
pub fn sequential_baseline<M: Differentiable + ?Sized>(
    x: &Matrix,
    i: usize,
    baseline: &BaselineSpec,
    model: &M,
) -> Result<Matrix> {
    if i >= x.rows() {
        return Err(Error::input(format!("word index {i} out of range for {} words", x.rows())));
    }
    let mut out = x.clone();
    out.set_row(i, &baseline.row(x, i, model)?);
    Ok(out)
}

/// `x` with every row replaced by its baseline row.
pub fn full_baseline<M: Differentiable + ?Sized>(x: &Matrix, baseline: &BaselineSpec, model: &M) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        out.set_row(i, &baseline.row(x, i, model)?);
    }
    Ok(out)
}

/// Ordered points `g(t_0), …, g(t_K)` on a strictly increasing partition of
/// `[0, 1]`, with the quadrature rule used to integrate along it.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    points: Vec<Matrix>,
    partition: Vec<f64>,
    rule: QuadratureRule,
    monotonic: bool,
}

impl Path {
    pub fn new(points: Vec<Matrix>, partition: Vec<f64>, rule: QuadratureRule) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::input("a path needs at least two points"));
        }
        if partition.len() != points.len() {
            return Err(Error::input(format!(
                "{} points but {} partition values",
                points.len(),
                partition.len()
            )));
        }
        if partition[0] != 0.0 || *partition.last().unwrap() != 1.0 {
            return Err(Error::input("partition must start at 0 and end at 1"));
        }
        if partition.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::input("partition must be strictly increasing"));
        }
        let shape = points[0].shape();
        if points.iter().any(|p| p.shape() != shape) {
            return Err(Error::input("path points have different shapes"));
        }
        let monotonic = is_monotonic(&points);
        Ok(Path {
            points,
            partition,
            rule,
            monotonic,
        })
    }

    /// Points on the uniform partition `t_k = k / K`.
    pub fn uniform(points: Vec<Matrix>, rule: QuadratureRule) -> Result<Self> {
        let k = points.len().saturating_sub(1).max(1);
        let partition = (0..points.len()).map(|i| i as f64 / k as f64).collect();
        Path::new(points, partition, rule)
    }

    pub fn points(&self) -> &[Matrix] {
        &self.points
    }

    pub fn partition(&self) -> &[f64] {
        &self.partition
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    pub fn start(&self) -> &Matrix {
        &self.points[0]
    }

    pub fn end(&self) -> &Matrix {
        self.points.last().unwrap()
    }

    /// True iff every coordinate is monotone along the path.
    pub fn is_monotonic(&self) -> bool {
        self.monotonic
    }

    /// True when every point equals the start.
    pub fn is_constant(&self) -> bool {
        self.points.iter().all(|p| p == &self.points[0])
    }

    /// Points at which the integrand is evaluated, in ascending segment order.
    pub fn evaluation_points(&self) -> Vec<Matrix> {
        let k = self.segments();
        match self.rule {
            QuadratureRule::Left => self.points[..k].to_vec(),
            QuadratureRule::Right => self.points[1..].to_vec(),
            QuadratureRule::Midpoint => self
                .points
                .windows(2)
                .map(|w| w[0].zip_map(&w[1], |a, b| 0.5 * (a + b)))
                .collect(),
            QuadratureRule::Trapezoid => self.points.clone(),
        }
    }

    /// Increments `g(t_{k+1}) − g(t_k)`.
    pub fn increments(&self) -> Vec<Matrix> {
        self.points.windows(2).map(|w| w[1].sub(&w[0])).collect()
    }
}

fn is_monotonic(points: &[Matrix]) -> bool {
    let len = points[0].data().len();
    (0..len).all(|c| {
        let mut up = true;
        let mut down = true;
        for w in points.windows(2) {
            let (a, b) = (w[0].data()[c], w[1].data()[c]);
            up &= b >= a;
            down &= b <= a;
        }
        up || down
    })
}

/// `g(t) = start + t (end − start)` on `t_k = k / K`. The endpoints are
/// stored as given, so they match `start` and `end` bit for bit.
pub fn straight_line_path(start: &Matrix, end: &Matrix, steps: usize, rule: QuadratureRule) -> Result<Path> {
    if steps == 0 {
        return Err(Error::input("number of steps must be at least 1"));
    }
    if start.shape() != end.shape() {
        return Err(Error::input(format!(
            "path endpoints differ in shape: {:?} vs {:?}",
            start.shape(),
            end.shape()
        )));
    }
    let mut points = Vec::with_capacity(steps + 1);
    points.push(start.clone());
    for k in 1..steps {
        points.push(Matrix::lerp(start, end, k as f64 / steps as f64));
    }
    points.push(end.clone());
    Path::uniform(points, rule)
}

/// A word-level path whose interior points snap to vocabulary embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedPath {
    /// `1 × n` points, `K + 1` of them.
    pub path: Path,
    /// Candidate row chosen for each interior anchor `k = 1..K-1`.
    pub chosen: Vec<usize>,
}

/// Greedy nearest-neighbour discretization of the segment `start → end`.
///
/// Anchor `a_k = start + (k/K)(end − start)` for `k = 1..K−1` is replaced by
/// the closest candidate row (Euclidean; ties to the lower index). If that
/// candidate was chosen for the previous anchor, the next-closest one is used
/// instead. Endpoints are kept exactly. The result need not be monotone.
pub fn greedy_discretized_path(
    start: &[f64],
    end: &[f64],
    candidates: &Matrix,
    steps: usize,
    rule: QuadratureRule,
) -> Result<DiscretizedPath> {
    if steps == 0 {
        return Err(Error::input("number of steps must be at least 1"));
    }
    if candidates.rows() == 0 {
        return Err(Error::input("no candidate embeddings"));
    }
    if start.len() != end.len() || candidates.cols() != start.len() {
        return Err(Error::input("word and candidate widths differ"));
    }
    let start_m = Matrix::row_vector(start);
    let end_m = Matrix::row_vector(end);
    if start == end {
        let path = Path::uniform(vec![start_m; steps + 1], rule)?;
        return Ok(DiscretizedPath { path, chosen: vec![] });
    }
    let mut points = vec![start_m.clone()];
    let mut chosen: Vec<usize> = Vec::with_capacity(steps.saturating_sub(1));
    for k in 1..steps {
        let anchor = Matrix::lerp(&start_m, &end_m, k as f64 / steps as f64);
        let ranked = rank_candidates(anchor.row(0), candidates);
        let pick = match (chosen.last(), ranked.get(1)) {
            (Some(&prev), Some(&second)) if ranked[0] == prev => second,
            _ => ranked[0],
        };
        chosen.push(pick);
        points.push(Matrix::row_vector(candidates.row(pick)));
    }
    points.push(end_m);
    Ok(DiscretizedPath {
        path: Path::uniform(points, rule)?,
        chosen,
    })
}

/// The two closest candidate rows to `anchor`, closest first.
fn rank_candidates(anchor: &[f64], candidates: &Matrix) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(2);
    for (idx, row) in candidates.iter_rows().enumerate() {
        let d: f64 = row.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
        let pos = best.iter().position(|&(bd, _)| d < bd).unwrap_or(best.len());
        if pos < 2 {
            best.insert(pos, (d, idx));
            best.truncate(2);
        }
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Gradients at `points`, in order. Points are processed in chunks of
/// `batch`; within a chunk evaluations run in parallel. Results are identical
/// for every batch size.
pub fn batched_gradient_eval<M: Differentiable + ?Sized>(
    model: &M,
    points: &[Matrix],
    batch: usize,
    counter: &CallCounter,
) -> Result<Vec<Matrix>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(batch) {
        let grads: Vec<Result<Matrix>> = if chunk.len() == 1 {
            vec![model.gradient(&chunk[0])]
        } else {
            chunk.par_iter().map(|p| model.gradient(p)).collect()
        };
        counter.add_gradient_calls(chunk.len() as u64);
        for g in grads {
            out.push(g?);
        }
    }
    Ok(out)
}

/// `Σ_k ∇F(c_k) ⊙ (g(t_{k+1}) − g(t_k))`, accumulated in ascending segment
/// order. A constant path short-circuits to zero without evaluating anything.
pub fn riemann_stieltjes_integrate<G>(grad_fn: G, path: &Path, counter: &CallCounter, batch: usize) -> Result<Matrix>
where
    G: Fn(&Matrix) -> Result<Matrix> + Sync,
{
    struct FnModel<G>(G);
    impl<G: Fn(&Matrix) -> Result<Matrix> + Sync> Differentiable for FnModel<G> {
        fn value(&self, _: &Matrix) -> Result<f64> {
            Err(Error::input("value not available for a bare gradient field"))
        }
        fn gradient(&self, x: &Matrix) -> Result<Matrix> {
            (self.0)(x)
        }
    }
    integrate_path(&FnModel(grad_fn), path, counter, batch)
}

/// [`riemann_stieltjes_integrate`] for a model's gradient.
pub fn integrate_path<M: Differentiable + ?Sized>(
    model: &M,
    path: &Path,
    counter: &CallCounter,
    batch: usize,
) -> Result<Matrix> {
    let (rows, cols) = path.start().shape();
    if path.is_constant() {
        return Ok(Matrix::zeros(rows, cols));
    }
    let grads = batched_gradient_eval(model, &path.evaluation_points(), batch, counter)?;
    let mut acc = Matrix::zeros(rows, cols);
    for (k, inc) in path.increments().iter().enumerate() {
        let term = match path.rule() {
            QuadratureRule::Trapezoid => grads[k].add(&grads[k + 1]).scale(0.5),
            _ => grads[k].clone(),
        };
        if !term.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient on segment {k}")));
        }
        acc.axpy(1.0, &term.hadamard(inc));
    }
    Ok(acc)
}
