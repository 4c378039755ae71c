//! Sliding-window persistence-of-excitation monitor.
//!
//! Tracks `Ξ = Σ_{t in window} [x_t; u_t][x_t; u_t]ᵀ` over the last `T0` pairs
//! and reports its extreme eigenvalues. The system is persistently excited
//! when the smallest one stays bounded away from zero.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::stack;

#[derive(Debug, Clone)]
pub struct PoeWindow {
    length: usize,
    history: VecDeque<DVector<f64>>,
    alpha: f64,
    gamma: f64,
}

impl PoeWindow {
    pub fn new(length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidParameter("excitation window length must be >= 1".into()));
        }
        Ok(Self { length, history: VecDeque::with_capacity(length + 1), alpha: 0.0, gamma: 0.0 })
    }

    /// Pushes `(x, u)`, drops the oldest pair beyond the window, and returns
    /// the smallest and largest eigenvalues of the windowed sum.
    pub fn update(&mut self, x: &DVector<f64>, u: &DVector<f64>) -> (f64, f64) {
        self.history.push_back(stack(x, u));
        if self.history.len() > self.length {
            self.history.pop_front();
        }
        let eig = self.excitation_matrix().symmetric_eigenvalues();
        self.alpha = eig.min().max(0.0);
        self.gamma = eig.max().max(self.alpha);
        (self.alpha, self.gamma)
    }

    pub fn excitation_matrix(&self) -> DMatrix<f64> {
        let d = self.history.front().map_or(0, |z| z.len());
        let mut xi = DMatrix::zeros(d, d);
        for z in &self.history {
            xi.ger(1.0, z, z, 1.0);
        }
        xi
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_full(&self) -> bool {
        self.history.len() == self.length
    }

    pub fn length(&self) -> usize {
        self.length
    }
}
