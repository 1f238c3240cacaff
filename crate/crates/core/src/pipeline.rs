//! One entry point over all four estimators, returning reconstructions in a
//! common layout: one `3 × 2P` shape per image (first half, then mirror half).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em_ppca::{fit_em_ppca_baseline, fit_sym_em_ppca, EmConfig};
use crate::error::{Error, Result};
use crate::model::{CameraPose, ObservationSet};
use crate::priorfree::{fit_priorfree_baseline, fit_sym_priorfree, PriorFreeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SymEmPpca,
    SymPriorFree,
    EmPpca,
    PriorFree,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SymEmPpca, Method::SymPriorFree, Method::EmPpca, Method::PriorFree];

    pub fn name(self) -> &'static str {
        match self {
            Method::SymEmPpca => "sym-em-ppca",
            Method::SymPriorFree => "sym-priorfree",
            Method::EmPpca => "em-ppca",
            Method::PriorFree => "priorfree",
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, Method::SymEmPpca | Method::SymPriorFree)
    }

    /// The symmetry-ignoring counterpart of a symmetric method, and vice versa.
    pub fn counterpart(self) -> Method {
        match self {
            Method::SymEmPpca => Method::EmPpca,
            Method::EmPpca => Method::SymEmPpca,
            Method::SymPriorFree => Method::PriorFree,
            Method::PriorFree => Method::SymPriorFree,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Settings shared by all estimators; `None` keeps each estimator's default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub k: usize,
    pub lambda: f64,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub rank3_iters: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self { k: 3, lambda: 1.0, max_iters: None, tol: None, rank3_iters: 10 }
    }
}

impl MethodConfig {
    pub fn em(&self) -> EmConfig {
        let d = EmConfig::default();
        EmConfig {
            k: self.k,
            lambda: self.lambda,
            max_em_iters: self.max_iters.unwrap_or(d.max_em_iters),
            rel_tol: self.tol.unwrap_or(d.rel_tol),
            rank3_iters: self.rank3_iters,
        }
    }

    pub fn priorfree(&self) -> PriorFreeConfig {
        let mut cfg = PriorFreeConfig { k: self.k, rank3_iters: self.rank3_iters, ..PriorFreeConfig::default() };
        if let Some(m) = self.max_iters {
            cfg.refine.max_iter = m;
        }
        if let Some(t) = self.tol {
            cfg.refine.rel_tol = t;
        }
        cfg
    }
}

/// Estimator output in the common layout.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub method: Method,
    pub poses: Vec<CameraPose>,
    /// `3 × 2P` shape per image.
    pub shapes: Vec<DMatrix<f64>>,
    /// Objective (EM) or energy (prior-free) after each iteration, initial value first.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub completed: ObservationSet,
}

pub fn reconstruct(obs: &ObservationSet, method: Method, cfg: &MethodConfig) -> Result<Reconstruction> {
    match method {
        Method::SymEmPpca | Method::EmPpca => {
            let fit = if method == Method::SymEmPpca { fit_sym_em_ppca(obs, &cfg.em())? } else { fit_em_ppca_baseline(obs, &cfg.em())? };
            let shapes = (0..fit.poses.len()).map(|n| fit.full_shape(n)).collect();
            Ok(Reconstruction {
                method,
                shapes,
                energy_trace: fit.report.objective_trace,
                iterations: fit.report.iterations,
                converged: fit.report.converged,
                warnings: fit.report.warnings,
                poses: fit.poses,
                completed: fit.completed,
            })
        }
        Method::SymPriorFree | Method::PriorFree => {
            let fit = if method == Method::SymPriorFree {
                fit_sym_priorfree(obs, &cfg.priorfree())?
            } else {
                fit_priorfree_baseline(obs, &cfg.priorfree())?
            };
            let shapes = (0..fit.poses.len()).map(|n| fit.full_shape(n)).collect();
            Ok(Reconstruction {
                method,
                shapes,
                energy_trace: fit.report.energy_trace,
                iterations: fit.report.iterations,
                converged: fit.report.converged,
                warnings: fit.report.warnings,
                poses: fit.poses,
                completed: fit.completed,
            })
        }
    }
}
