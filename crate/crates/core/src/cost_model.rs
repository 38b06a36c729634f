//! Verification-latency model: iteration time as an affine function of tree size.
//!
//! Each candidate size keeps an EMA of observed iteration times. A weighted least-squares
//! line is fitted through those averages, each size weighted by `exp(-lambda * age)` where
//! age is the number of iterations since that size was last observed.

use std::io;

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("tree size {0} is not a candidate size")]
    UnknownSize(usize),
    #[error("iteration time must be positive and finite, got {0}")]
    BadTime(f64),
    #[error("insufficient data: need at least two distinct observed sizes")]
    InsufficientData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel<T: Real> {
    sizes: Vec<usize>,
    perf: Vec<Option<T>>,
    last_update: Vec<Option<u64>>,
    alpha: T,
    lambda: T,
    beta: (T, T),
    fitted: bool,
}

/// One row of the diagnostics dump.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CostRow {
    pub size: usize,
    pub t_perf: Option<f64>,
    pub age: Option<u64>,
    pub weight: f64,
}

impl<T: Real> CostModel<T> {
    /// `prior` is the `(beta0, beta1)` pair used by [`estimate`](Self::estimate) until the
    /// first successful fit.
    pub fn new(mut sizes: Vec<usize>, alpha: T, lambda: T, prior: (T, T)) -> Self {
        sizes.sort_unstable();
        sizes.dedup();
        let n = sizes.len();
        Self {
            sizes,
            perf: vec![None; n],
            last_update: vec![None; n],
            alpha,
            lambda,
            beta: prior,
            fitted: false,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn coefficients(&self) -> (T, T) {
        self.beta
    }

    /// Whether at least one fit has succeeded since construction or the last reset.
    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn t_perf(&self, size: usize) -> Option<T> {
        self.slot(size).ok().and_then(|i| self.perf[i])
    }

    fn slot(&self, size: usize) -> Result<usize, CostError> {
        self.sizes
            .binary_search(&size)
            .map_err(|_| CostError::UnknownSize(size))
    }

    /// Sizes never observed since the last reset, ascending.
    pub fn unobserved(&self) -> impl Iterator<Item = usize> + '_ {
        self.sizes
            .iter()
            .zip(&self.perf)
            .filter(|(_, p)| p.is_none())
            .map(|(&s, _)| s)
    }

    pub fn observed_count(&self) -> usize {
        self.perf.iter().filter(|p| p.is_some()).count()
    }

    pub fn observe(&mut self, size: usize, t: T, now: u64) -> Result<(), CostError> {
        let i = self.slot(size)?;
        if !(t > T::zero()) || !t.is_finite() {
            return Err(CostError::BadTime(t.as_f64()));
        }
        self.perf[i] = Some(match self.perf[i] {
            None => t,
            Some(prev) => (T::one() - self.alpha) * prev + self.alpha * t,
        });
        self.last_update[i] = Some(now);
        Ok(())
    }

    /// Recency weights; never-observed sizes get zero.
    pub fn weights(&self, now: u64) -> Vec<T> {
        self.last_update
            .iter()
            .map(|lu| match lu {
                None => T::zero(),
                Some(t) => {
                    let age = T::from_u64(now.saturating_sub(*t)).expect("age");
                    (-self.lambda * age).exp()
                }
            })
            .collect()
    }

    /// Weighted least squares through `(size, T_perf)`; stores and returns `(beta0, beta1)`.
    pub fn fit(&mut self, now: u64) -> Result<(T, T), CostError> {
        let w = self.weights(now);
        let pts: Vec<(T, T, T)> = self
            .sizes
            .iter()
            .zip(&self.perf)
            .zip(&w)
            .filter_map(|((&s, p), &w)| {
                p.filter(|_| w > T::zero())
                    .map(|y| (w, T::from_usize_lossy(s), y))
            })
            .collect();
        if pts.len() < 2 {
            return Err(CostError::InsufficientData);
        }
        let sw: T = pts.iter().map(|p| p.0).sum();
        let mx = pts.iter().map(|p| p.0 * p.1).sum::<T>() / sw;
        let my = pts.iter().map(|p| p.0 * p.2).sum::<T>() / sw;
        // centred sums keep the normal equations well conditioned
        let sxx: T = pts.iter().map(|p| p.0 * (p.1 - mx) * (p.1 - mx)).sum();
        let sxy: T = pts.iter().map(|p| p.0 * (p.1 - mx) * (p.2 - my)).sum();
        if !(sxx > T::zero()) {
            return Err(CostError::InsufficientData);
        }
        let beta1 = sxy / sxx;
        let beta0 = my - beta1 * mx;
        self.beta = (beta0, beta1);
        self.fitted = true;
        Ok(self.beta)
    }

    /// `beta0 + beta1 * size` using the last successful fit (or the prior).
    pub fn estimate(&self, size: usize) -> T {
        self.beta.0 + self.beta.1 * T::from_usize_lossy(size)
    }

    /// Drops every observation; the coefficients fall back to `prior`.
    pub fn reset(&mut self, prior: (T, T)) {
        self.perf.iter_mut().for_each(|p| *p = None);
        self.last_update.iter_mut().for_each(|p| *p = None);
        self.beta = prior;
        self.fitted = false;
    }

    pub fn diagnostics(&self, now: u64) -> Vec<CostRow> {
        let w = self.weights(now);
        self.sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| CostRow {
                size,
                t_perf: self.perf[i].map(Real::as_f64),
                age: self.last_update[i].map(|t| now.saturating_sub(t)),
                weight: w[i].as_f64(),
            })
            .collect()
    }

    /// Diagnostics as CSV, with the current coefficients repeated on every row.
    pub fn write_csv<W: io::Write>(&self, now: u64, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["size", "t_perf", "age", "weight", "beta0", "beta1"])?;
        let (b0, b1) = self.beta;
        for r in self.diagnostics(now) {
            w.write_record([
                r.size.to_string(),
                r.t_perf.map_or_else(String::new, |v| v.to_string()),
                r.age.map_or_else(String::new, |v| v.to_string()),
                r.weight.to_string(),
                b0.to_string(),
                b1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
