use std::fmt::Write as _;

use limbfit::gradcheck::{check_case, random_case, CaseConfig, CaseReport, FD_STEP};
use limbfit::io::fmt_real;
use limbfit::{LossConfig, Result};
use rayon::prelude::*;

use crate::{mix_seed, CliError, CliResult};

/// Largest relative error a gradient may show against central differences.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub configs: usize,
    pub points: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, configs: 200, points: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckTable {
    pub rows: Vec<CaseReport>,
}

impl GradcheckTable {
    pub fn worst(&self) -> f64 {
        self.rows.iter().map(CaseReport::max_error).fold(0.0, f64::max)
    }

    /// One row per instance, then a `max` row with the worst error of each column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,flow,p2l,sym,j2p,stage2\n");
        for (i, r) in self.rows.iter().enumerate() {
            let terms: Vec<String> = r.terms.iter().map(|(_, e)| fmt_real(*e)).collect();
            writeln!(s, "{i},{},{}", terms.join(","), fmt_real(r.combined)).expect("write to string");
        }
        if let Some(first) = self.rows.first() {
            let worst = |k: usize| self.rows.iter().map(|r| r.terms[k].1).fold(0.0, f64::max);
            let terms: Vec<String> = (0..first.terms.len()).map(|k| fmt_real(worst(k))).collect();
            let combined = self.rows.iter().map(|r| r.combined).fold(0.0, f64::max);
            writeln!(s, "max,{},{}", terms.join(","), fmt_real(combined)).expect("write to string");
        }
        s
    }
}

/// Audits every gradient on `configs` random instances with the stage-2 weights.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckTable> {
    let case_cfg = CaseConfig { points: opts.points, ..Default::default() };
    let loss = LossConfig::stage2();
    let rows = (0..opts.configs as u64)
        .into_par_iter()
        .map(|i| check_case(&random_case(mix_seed(opts.seed, i), &case_cfg)?, &loss, FD_STEP))
        .collect::<Result<_>>()?;
    Ok(GradcheckTable { rows })
}

/// Like [`run_gradcheck`], failing when any error exceeds the tolerance.
pub fn cmd_gradcheck(opts: &GradcheckOptions) -> CliResult<GradcheckTable> {
    let table = run_gradcheck(opts)?;
    let worst = table.worst();
    if worst > GRADCHECK_TOLERANCE {
        return Err(CliError::GradCheck { worst, tolerance: GRADCHECK_TOLERANCE });
    }
    Ok(table)
}
