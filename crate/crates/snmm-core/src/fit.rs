//! Fitters for pooled logistic regression and weighted least squares over
//! streamed regression rows.
//!
//! Regression rows come from a [`RowSource`] rather than a materialized
//! matrix: the person-month designs here can run to millions of rows, and
//! every fit only needs weighted cross-products. Designs small enough for a
//! memory budget are cached after a single evaluation pass, since term
//! evaluation, not arithmetic, dominates the Newton iterations; larger
//! designs are re-streamed per pass. Features are standardized internally for
//! conditioning and the coefficients mapped back afterwards. All reductions
//! run over fixed-size chunks so results do not depend on the worker count.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::par;

/// A re-iterable source of regression rows, grouped by patient.
///
/// `visit` must yield the rows of the requested patient range in a fixed
/// order and call `cb(features, outcomes, weight)` per row. The feature row
/// includes the leading intercept.
pub(crate) trait RowSource: Sync {
    fn n_features(&self) -> usize;
    fn feature_names(&self) -> Vec<String>;
    fn n_groups(&self) -> usize;
    fn n_outcomes(&self) -> usize;
    fn visit(&self, groups: Range<usize>, cb: &mut dyn FnMut(&[f64], &[f64], f64)) -> Result<()>;
}

/// Feature-wise affine reparameterization used during fitting.
#[derive(Debug, Clone)]
pub(crate) struct Standardizer {
    center: Vec<f64>,
    scale: Vec<f64>,
}

struct MomentAcc {
    w: f64,
    y_sum: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl MomentAcc {
    fn new(f: usize) -> Self {
        MomentAcc {
            w: 0.0,
            y_sum: 0.0,
            sum: vec![0.0; f],
            sumsq: vec![0.0; f],
        }
    }

    fn add_row(&mut self, x: &[f64], y0: f64, w: f64) {
        self.w += w;
        self.y_sum += w * y0;
        for j in 1..x.len() {
            self.sum[j] += w * x[j];
            self.sumsq[j] += w * x[j] * x[j];
        }
    }

    fn merge(mut self, other: MomentAcc) -> MomentAcc {
        self.w += other.w;
        self.y_sum += other.y_sum;
        for j in 0..self.sum.len() {
            self.sum[j] += other.sum[j];
            self.sumsq[j] += other.sumsq[j];
        }
        self
    }
}

impl Standardizer {
    fn from_moments(acc: &MomentAcc, names: &[String]) -> Result<Self> {
        let f = acc.sum.len();
        if acc.w <= 0.0 {
            return Err(Error::EmptyRiskSet("regression has no rows".into()));
        }
        let mut center = vec![0.0; f];
        let mut scale = vec![1.0; f];
        for j in 1..f {
            let mean = acc.sum[j] / acc.w;
            let var = (acc.sumsq[j] / acc.w - mean * mean).max(0.0);
            if var <= 1e-20 * (1.0 + mean * mean) {
                return Err(Error::RankDeficient {
                    features: vec![names[j].clone()],
                });
            }
            center[j] = mean;
            scale[j] = var.sqrt();
        }
        Ok(Standardizer { center, scale })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for j in 1..x.len() {
            out[j] = (x[j] - self.center[j]) / self.scale[j];
        }
    }

    /// Maps standardized coefficients back to raw feature coordinates.
    fn unstandardize(&self, coef_std: &DVector<f64>) -> DVector<f64> {
        let f = coef_std.len();
        let mut raw = DVector::zeros(f);
        let mut intercept = coef_std[0];
        for j in 1..f {
            raw[j] = coef_std[j] / self.scale[j];
            intercept -= coef_std[j] * self.center[j] / self.scale[j];
        }
        raw[0] = intercept;
        raw
    }
}

// ---------------------------------------------------------------------------
// Design: cached or streamed rows
// ---------------------------------------------------------------------------

/// Budget (in feature values) below which a design is materialized once and
/// iterated in memory.
const CACHE_BUDGET: usize = 16_000_000;

/// Row-chunk size for reductions over cached designs.
const CACHE_CHUNK: usize = 8 * 1024;

enum Design<'a> {
    /// Standardized features, outcomes, and weights held row-major.
    Cached {
        f: usize,
        q: usize,
        n_rows: usize,
        xs: Vec<f64>,
        ys: Vec<f64>,
        ws: Vec<f64>,
    },
    Streamed {
        src: &'a dyn RowSource,
        std: Standardizer,
    },
}

struct Prepared<'a> {
    design: Design<'a>,
    std: Standardizer,
    names: Vec<String>,
    /// Weighted event/outcome mean of the first outcome, for warm starts.
    y_mean: f64,
    total_w: f64,
}

fn prepare(src: &dyn RowSource) -> Result<Prepared<'_>> {
    prepare_with_budget(src, CACHE_BUDGET)
}

fn prepare_with_budget(src: &dyn RowSource, budget: usize) -> Result<Prepared<'_>> {
    let f = src.n_features();
    let q = src.n_outcomes();
    let names = src.feature_names();

    // try to collect the whole design within budget
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    let mut fits_in_budget = true;
    src.visit(0..src.n_groups(), &mut |x, yrow, w| {
        if !fits_in_budget {
            return;
        }
        if xs.len() + f > budget {
            fits_in_budget = false;
            return;
        }
        xs.extend_from_slice(x);
        ys.extend_from_slice(yrow);
        ws.push(w);
    })?;

    if fits_in_budget {
        let n_rows = ws.len();
        let mut acc = MomentAcc::new(f);
        for r in 0..n_rows {
            acc.add_row(&xs[r * f..(r + 1) * f], ys[r * q], ws[r]);
        }
        let std = Standardizer::from_moments(&acc, &names)?;
        for r in 0..n_rows {
            let row = &mut xs[r * f..(r + 1) * f];
            for j in 1..f {
                row[j] = (row[j] - std.center[j]) / std.scale[j];
            }
        }
        return Ok(Prepared {
            design: Design::Cached {
                f,
                q,
                n_rows,
                xs,
                ys,
                ws,
            },
            y_mean: acc.y_sum / acc.w,
            total_w: acc.w,
            std,
            names,
        });
    }

    // too large: recompute moments in a streaming pass and re-stream per fit pass
    drop((xs, ys, ws));
    let acc = par::reduce_chunked(
        src.n_groups(),
        |range| -> Result<MomentAcc> {
            let mut a = MomentAcc::new(f);
            src.visit(range, &mut |x, yrow, w| a.add_row(x, yrow[0], w))?;
            Ok(a)
        },
        |a, b| match (a, b) {
            (Ok(a), Ok(b)) => Ok(a.merge(b)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    )
    .unwrap_or_else(|| Err(Error::EmptyRiskSet("regression has no rows".into())))?;
    let std = Standardizer::from_moments(&acc, &names)?;
    Ok(Prepared {
        design: Design::Streamed {
            src,
            std: std.clone(),
        },
        y_mean: acc.y_sum / acc.w,
        total_w: acc.w,
        std,
        names,
    })
}

impl Prepared<'_> {
    /// Reduces `fold` over all rows in standardized coordinates,
    /// deterministically chunked.
    fn reduce<S: Send>(
        &self,
        init: impl Fn() -> S + Sync,
        fold: impl Fn(&mut S, &[f64], &[f64], f64) + Sync,
        combine: impl Fn(S, S) -> S,
    ) -> Result<S> {
        match &self.design {
            Design::Cached {
                f,
                q,
                n_rows,
                xs,
                ys,
                ws,
            } => {
                let n_chunks = n_rows.div_ceil(CACHE_CHUNK).max(1);
                let partials = par::map_indexed(n_chunks, |c| {
                    let lo = c * CACHE_CHUNK;
                    let hi = ((c + 1) * CACHE_CHUNK).min(*n_rows);
                    let mut s = init();
                    for r in lo..hi {
                        fold(&mut s, &xs[r * f..(r + 1) * f], &ys[r * q..(r + 1) * q], ws[r]);
                    }
                    s
                });
                partials
                    .into_iter()
                    .reduce(combine)
                    .ok_or_else(|| Error::EmptyRiskSet("regression has no rows".into()))
            }
            Design::Streamed { src, std } => {
                let f = src.n_features();
                par::reduce_chunked(
                    src.n_groups(),
                    |range| -> Result<S> {
                        let mut s = init();
                        let mut buf = vec![0.0; f];
                        src.visit(range, &mut |x, yrow, w| {
                            std.apply(x, &mut buf);
                            fold(&mut s, &buf, yrow, w);
                        })?;
                        Ok(s)
                    },
                    |a, b| match (a, b) {
                        (Ok(a), Ok(b)) => Ok(combine(a, b)),
                        (Err(e), _) | (_, Err(e)) => Err(e),
                    },
                )
                .unwrap_or_else(|| Err(Error::EmptyRiskSet("regression has no rows".into())))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooled logistic regression
// ---------------------------------------------------------------------------

/// Fitted logistic model in raw feature coordinates, intercept first.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub coef: Vec<f64>,
    pub feature_names: Vec<String>,
    pub iterations: usize,
    /// Infinity norm of the final mean score, in standardized coordinates.
    pub final_score_norm: f64,
    pub log_likelihood: f64,
    pub n_rows: f64,
    pub n_events: f64,
}

impl LogisticModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }
}

pub fn expit(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

fn log1p_exp(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

struct LogisticPass {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn logistic_pass(prep: &Prepared<'_>, theta: &DVector<f64>) -> Result<LogisticPass> {
    let f = theta.len();
    prep.reduce(
        || LogisticPass {
            loglik: 0.0,
            score: DVector::zeros(f),
            info: DMatrix::zeros(f, f),
        },
        |p, xs, ys, w| {
            let y = ys[0];
            let eta: f64 = theta.iter().zip(xs).map(|(t, v)| t * v).sum();
            let mu = expit(eta);
            p.loglik += w * (y * eta - log1p_exp(eta));
            let r = w * (y - mu);
            let v = w * mu * (1.0 - mu);
            for i in 0..f {
                p.score[i] += r * xs[i];
                let vxi = v * xs[i];
                for j in 0..=i {
                    p.info[(i, j)] += vxi * xs[j];
                }
            }
        },
        |mut a, b| {
            a.loglik += b.loglik;
            a.score += b.score;
            a.info += b.info;
            a
        },
    )
}

const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_SCORE_TOL: f64 = 1e-10;
const SEPARATION_COEF_BOUND: f64 = 15.0;

/// Maximum-likelihood fit by Newton-Raphson with step-halving.
///
/// Convergence requires the mean-score infinity norm (standardized features)
/// to fall below `1e-10`; divergence of a standardized coefficient past 15 is
/// reported as separation, naming the offending feature. The bound is checked
/// first because a diverging coefficient drives the score to zero as well.
pub(crate) fn fit_logistic(src: &dyn RowSource) -> Result<LogisticModel> {
    fit_logistic_prepared(src, CACHE_BUDGET)
}

fn fit_logistic_prepared(src: &dyn RowSource, budget: usize) -> Result<LogisticModel> {
    debug_assert_eq!(src.n_outcomes(), 1);
    let f = src.n_features();
    let prep = prepare_with_budget(src, budget)?;
    if prep.total_w <= 0.0 {
        return Err(Error::EmptyRiskSet("logistic regression has no rows".into()));
    }

    // warm start at the marginal event rate
    let mut theta = DVector::zeros(f);
    if prep.y_mean > 0.0 && prep.y_mean < 1.0 {
        theta[0] = (prep.y_mean / (1.0 - prep.y_mean)).ln();
    }
    let mut pass = logistic_pass(&prep, &theta)?;
    let mut iterations = 0;
    loop {
        let score_norm = pass.score.amax() / prep.total_w;
        let (worst, magnitude) = theta
            .iter()
            .enumerate()
            .map(|(j, t)| (j, t.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        if magnitude > SEPARATION_COEF_BOUND {
            return Err(Error::Separation {
                feature: prep.names[worst].clone(),
                magnitude,
                iterations,
            });
        }
        if score_norm < LOGISTIC_SCORE_TOL {
            break;
        }
        if iterations >= LOGISTIC_MAX_ITER {
            return Err(Error::Separation {
                feature: prep.names[worst].clone(),
                magnitude,
                iterations,
            });
        }
        iterations += 1;

        // complete the symmetric information matrix
        let mut info = pass.info.clone();
        for i in 0..f {
            for j in (i + 1)..f {
                info[(i, j)] = info[(j, i)];
            }
        }
        let step = linalg::solve_spd(&info, &pass.score).ok_or_else(|| Error::RankDeficient {
            features: prep.names.clone(),
        })?;

        let mut lambda = 1.0;
        loop {
            let candidate = &theta + lambda * &step;
            let next = logistic_pass(&prep, &candidate)?;
            if next.loglik + 1e-12 * (1.0 + pass.loglik.abs()) >= pass.loglik || lambda < 1e-4 {
                theta = candidate;
                pass = next;
                break;
            }
            lambda *= 0.5;
        }
    }

    let raw = prep.std.unstandardize(&theta);
    let n_events = prep.y_mean * prep.total_w;
    Ok(LogisticModel {
        coef: raw.iter().copied().collect(),
        feature_names: prep.names,
        iterations,
        final_score_norm: pass.score.amax() / prep.total_w,
        log_likelihood: pass.loglik,
        n_rows: prep.total_w,
        n_events,
    })
}

/// Per-patient sums of score contributions `x (y - p)` in raw coordinates.
pub(crate) fn per_group_scores(src: &dyn RowSource, model: &LogisticModel) -> Result<Vec<Vec<f64>>> {
    let f = src.n_features();
    let out = par::map_indexed(src.n_groups(), |g| -> Result<Vec<f64>> {
        let mut s = vec![0.0; f];
        src.visit(g..g + 1, &mut |x, ys, w| {
            let mu = model.predict(x);
            let r = w * (ys[0] - mu);
            for j in 0..f {
                s[j] += r * x[j];
            }
        })?;
        Ok(s)
    });
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Weighted least squares
// ---------------------------------------------------------------------------

/// Weighted least-squares fit for one or more outcomes sharing a design.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    /// Coefficient vector per outcome, raw coordinates, intercept first.
    pub coefs: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub n_rows: f64,
}

impl WlsFit {
    pub fn predict(&self, outcome: usize, x: &[f64]) -> f64 {
        self.coefs[outcome].iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

struct WlsPass {
    gram: DMatrix<f64>,
    rhs: Vec<DVector<f64>>,
}

/// Solves the weighted normal equations for every outcome of the source.
pub(crate) fn fit_wls(src: &dyn RowSource) -> Result<WlsFit> {
    let f = src.n_features();
    let q = src.n_outcomes();
    let prep = prepare(src)?;
    if prep.total_w <= 0.0 {
        return Err(Error::EmptyRiskSet("regression has no rows".into()));
    }

    let pass = prep.reduce(
        || WlsPass {
            gram: DMatrix::zeros(f, f),
            rhs: vec![DVector::zeros(f); q],
        },
        |p, xs, ys, w| {
            for i in 0..f {
                let wxi = w * xs[i];
                for j in 0..=i {
                    p.gram[(i, j)] += wxi * xs[j];
                }
                for (o, y) in ys.iter().enumerate() {
                    p.rhs[o][i] += wxi * y;
                }
            }
        },
        |mut a, b| {
            a.gram += b.gram;
            for (ra, rb) in a.rhs.iter_mut().zip(b.rhs) {
                *ra += rb;
            }
            a
        },
    )?;

    let mut gram = pass.gram;
    for i in 0..f {
        for j in (i + 1)..f {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    // detect rank deficiency before solving so the error can name columns
    let collinear = collinear_columns(&gram);
    if !collinear.is_empty() {
        let mut named: Vec<String> = collinear
            .into_iter()
            .map(|i| prep.names[i].clone())
            .collect();
        named.sort();
        return Err(Error::RankDeficient { features: named });
    }

    let chol = gram.clone().cholesky().ok_or_else(|| Error::RankDeficient {
        features: prep.names.clone(),
    })?;
    let mut coefs = Vec::with_capacity(q);
    for o in 0..q {
        let sol = chol.solve(&pass.rhs[o]);
        let raw = prep.std.unstandardize(&sol);
        coefs.push(raw.iter().copied().collect());
    }
    Ok(WlsFit {
        coefs,
        feature_names: prep.names,
        n_rows: prep.total_w,
    })
}

/// Pivoted Cholesky on a (standardized) Gram matrix; returns the original
/// indices of columns whose residual diagonal collapses, i.e. columns that
/// are numerically in the span of the ones already taken.
fn collinear_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let n = gram.nrows();
    let mut work = gram.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let tol = 1e-10 * (0..n).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
    for step in 0..n {
        let (pivot, dmax) = (step..n)
            .map(|i| (i, work[(i, i)]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty remainder");
        if dmax <= tol {
            return order[step..].to_vec();
        }
        work.swap_rows(step, pivot);
        work.swap_columns(step, pivot);
        order.swap(step, pivot);
        let d = work[(step, step)];
        for i in (step + 1)..n {
            for j in (step + 1)..=i {
                let update = work[(i, step)] * work[(j, step)] / d;
                work[(i, j)] -= update;
                if i != j {
                    work[(j, i)] = work[(i, j)];
                }
            }
        }
    }
    Vec::new()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// In-memory row source for tests.
    struct Table {
        names: Vec<String>,
        rows: Vec<(Vec<f64>, Vec<f64>, f64)>,
        n_outcomes: usize,
    }

    impl RowSource for Table {
        fn n_features(&self) -> usize {
            self.names.len()
        }
        fn feature_names(&self) -> Vec<String> {
            self.names.clone()
        }
        fn n_groups(&self) -> usize {
            self.rows.len()
        }
        fn n_outcomes(&self) -> usize {
            self.n_outcomes
        }
        fn visit(
            &self,
            groups: Range<usize>,
            cb: &mut dyn FnMut(&[f64], &[f64], f64),
        ) -> Result<()> {
            for (x, y, w) in &self.rows[groups] {
                cb(x, y, *w);
            }
            Ok(())
        }
    }

    #[test]
    fn intercept_only_logistic_matches_closed_form() {
        // event fraction 1/4 -> intercept ln(1/3)
        let rows: Vec<_> = (0..400)
            .map(|i| (vec![1.0], vec![f64::from(u8::from(i % 4 == 0))], 1.0))
            .collect();
        let src = Table {
            names: vec!["intercept".into()],
            rows,
            n_outcomes: 1,
        };
        let fit = fit_logistic(&src).unwrap();
        assert!((fit.coef[0] - (1.0f64 / 3.0).ln()).abs() < 1e-8);
    }

    #[test]
    fn logistic_recovers_known_coefficients() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, crate::rng::StreamKind::Auxiliary, &[1]);
        let truth = [-0.5, 1.2, -0.8];
        let rows: Vec<_> = (0..20000)
            .map(|_| {
                let x1: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let x2: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let eta = truth[0] + truth[1] * x1 + truth[2] * x2;
                let y = f64::from(u8::from(rng.random::<f64>() < expit(eta)));
                (vec![1.0, x1, x2], vec![y], 1.0)
            })
            .collect();
        let src = Table {
            names: vec!["intercept".into(), "x1".into(), "x2".into()],
            rows,
            n_outcomes: 1,
        };
        let fit = fit_logistic(&src).unwrap();
        for (est, tru) in fit.coef.iter().zip(truth) {
            assert!((est - tru).abs() < 0.08, "est {est} vs truth {tru}");
        }
        // score equations hold at the MLE
        let scores = per_group_scores(&src, &fit).unwrap();
        let mut total = vec![0.0; 3];
        for s in scores {
            for j in 0..3 {
                total[j] += s[j];
            }
        }
        assert!(total.iter().all(|v| v.abs() < 1e-6), "score sum {total:?}");
    }

    #[test]
    fn cached_and_streamed_fits_agree() {
        use rand::Rng;
        let mut rng = crate::rng::stream(17, crate::rng::StreamKind::Auxiliary, &[9]);
        let rows: Vec<_> = (0..4000)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 4.0 - 2.0;
                let y = f64::from(u8::from(rng.random::<f64>() < expit(0.3 - 0.9 * x)));
                (vec![1.0, x], vec![y], 1.0)
            })
            .collect();
        let src = Table {
            names: vec!["intercept".into(), "x".into()],
            rows,
            n_outcomes: 1,
        };
        let cached = fit_logistic_prepared(&src, CACHE_BUDGET).unwrap();
        let streamed = fit_logistic_prepared(&src, 0).unwrap();
        for (x, y) in cached.coef.iter().zip(&streamed.coef) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_outcomes_error_as_separation() {
        let rows: Vec<_> = (0..50).map(|_| (vec![1.0], vec![0.0], 1.0)).collect();
        let src = Table {
            names: vec!["intercept".into()],
            rows,
            n_outcomes: 1,
        };
        match fit_logistic(&src) {
            Err(Error::Separation { feature, .. }) => assert_eq!(feature, "intercept"),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn separation_names_the_offending_feature() {
        // y = 1 exactly when x > 0: perfectly separated
        let rows: Vec<_> = (0..100)
            .map(|i| {
                let x = f64::from(i) - 49.5;
                (vec![1.0, x], vec![f64::from(u8::from(x > 0.0))], 1.0)
            })
            .collect();
        let src = Table {
            names: vec!["intercept".into(), "x".into()],
            rows,
            n_outcomes: 1,
        };
        match fit_logistic(&src) {
            Err(Error::Separation { feature, .. }) => assert_eq!(feature, "x"),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn wls_solves_normal_equations() {
        use rand::Rng;
        let mut rng = crate::rng::stream(13, crate::rng::StreamKind::Auxiliary, &[2]);
        let rows: Vec<_> = (0..5000)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 10.0;
                let w = 0.5 + rng.random::<f64>();
                let noise: f64 = rng.random::<f64>() - 0.5;
                (vec![1.0, x], vec![2.0 + 3.0 * x + noise, -x], w)
            })
            .collect();
        let src = Table {
            names: vec!["intercept".into(), "x".into()],
            rows: rows.clone(),
            n_outcomes: 2,
        };
        let fit = fit_wls(&src).unwrap();
        assert!((fit.coefs[0][1] - 3.0).abs() < 0.02);
        assert!((fit.coefs[1][1] + 1.0).abs() < 1e-10);
        // normal equations: X'W(y - X beta) ~ 0 relative to X'Wy
        let mut resid = [0.0f64; 2];
        let mut rhs = [0.0f64; 2];
        for (x, ys, w) in &rows {
            let pred = fit.predict(0, x);
            for j in 0..2 {
                resid[j] += w * x[j] * (ys[0] - pred);
                rhs[j] += w * x[j] * ys[0];
            }
        }
        let scale = rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(resid.iter().all(|v| v.abs() < 1e-8 * scale));
    }

    #[test]
    fn wls_flags_collinear_columns() {
        let rows: Vec<_> = (0..100)
            .map(|i| {
                let x = f64::from(i);
                (vec![1.0, x, 2.0 * x], vec![x], 1.0)
            })
            .collect();
        let src = Table {
            names: vec!["intercept".into(), "x".into(), "x2".into()],
            rows,
            n_outcomes: 1,
        };
        match fit_wls(&src) {
            Err(Error::RankDeficient { features }) => assert!(!features.is_empty()),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn constant_column_is_rank_deficient() {
        let rows: Vec<_> = (0..10).map(|i| (vec![1.0, 5.0], vec![f64::from(i)], 1.0)).collect();
        let src = Table {
            names: vec!["intercept".into(), "c".into()],
            rows,
            n_outcomes: 1,
        };
        assert!(matches!(fit_wls(&src), Err(Error::RankDeficient { .. })));
    }
}
