//! Dense two-phase simplex solver for the small per-step rebalancing
//! programs. Bland's rule keeps pivoting finite on degenerate programs;
//! problem sizes here stay in the few-hundred-variable range, so a plain
//! tableau is fast enough and has no dependencies.

use crate::error::{Error, Result};

/// `minimize objective . x` over `x >= 0` subject to `a . x = b` for every
/// `eq` row and `a . x <= b` for every `ub` row.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub eq: Vec<(Vec<f64>, f64)>,
    pub ub: Vec<(Vec<f64>, f64)>,
}

/// An optimal vertex and its objective value.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

const TOL: f64 = 1e-9;

/// Solves the program, or reports `Infeasible` / `Unbounded`.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    validate(lp)?;
    let mut t = Tableau::build(lp);
    if !t.phase1()? {
        return Err(Error::Infeasible);
    }
    t.drive_out_artificials();
    t.phase2(&lp.objective)
}

/// Phase-1-only feasibility probe.
pub fn feasible(lp: &LinearProgram) -> Result<bool> {
    validate(lp)?;
    Tableau::build(lp).phase1()
}

fn validate(lp: &LinearProgram) -> Result<()> {
    let n = lp.objective.len();
    if lp.objective.iter().any(|c| !c.is_finite()) {
        return Err(Error::Config("non-finite objective coefficient".into()));
    }
    for (a, b) in lp.eq.iter().chain(&lp.ub) {
        if a.len() != n {
            return Err(Error::Config(format!(
                "constraint row has {} coefficients, objective has {n}",
                a.len()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Config("non-finite constraint coefficient".into()));
        }
    }
    Ok(())
}

struct Tableau {
    /// `m` rows of `cols + 1` entries; the last entry is the rhs.
    rows: Vec<Vec<f64>>,
    /// Basic variable of each row.
    basis: Vec<usize>,
    n_struct: usize,
    n_slack: usize,
    cols: usize,
    /// Phase-1 objective below this counts as feasible.
    feas_tol: f64,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.objective.len();
        let m = lp.eq.len() + lp.ub.len();
        let n_slack = lp.ub.len();
        let cols = n + n_slack + m;
        let mut rows = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut max_rhs: f64 = 0.0;
        for (r, (a, b)) in lp.eq.iter().chain(&lp.ub).enumerate() {
            let mut row = vec![0.0; cols + 1];
            row[..n].copy_from_slice(a);
            let slack_col = if r >= lp.eq.len() {
                let col = n + (r - lp.eq.len());
                row[col] = 1.0;
                Some(col)
            } else {
                None
            };
            row[cols] = *b;
            max_rhs = max_rhs.max(b.abs());
            if row[cols] < 0.0 {
                for v in row.iter_mut() {
                    *v = -*v;
                }
            }
            // A slack that survived un-negated is a ready-made basic
            // variable; everything else starts on an artificial.
            match slack_col {
                Some(col) if row[col] > 0.5 => basis.push(col),
                _ => {
                    let art = n + n_slack + r;
                    row[art] = 1.0;
                    basis.push(art);
                }
            }
            rows.push(row);
        }
        Tableau {
            rows,
            basis,
            n_struct: n,
            n_slack,
            cols,
            feas_tol: 1e-7 * (1.0 + max_rhs),
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let inv = 1.0 / self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        let piv_row = self.rows[row].clone();
        for (r, other) in self.rows.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let factor = other[col];
            if factor == 0.0 {
                continue;
            }
            for (v, p) in other.iter_mut().zip(&piv_row) {
                *v -= factor * p;
            }
            other[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Bland-rule pivoting for objective `c` over allowed columns. Columns
    /// at or past `col_limit` never enter the basis.
    fn optimize(&mut self, c: &[f64], col_limit: usize) -> Result<()> {
        let cap = 50_000 + 200 * (self.rows.len() + 1) * (self.cols + 1);
        for _ in 0..cap {
            let mut entering = None;
            for j in 0..col_limit {
                let mut rc = c[j];
                for (row, &b) in self.rows.iter().zip(&self.basis) {
                    let cb = c[b];
                    if cb != 0.0 {
                        rc -= cb * row[j];
                    }
                }
                if rc < -TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(enter) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                let coef = row[enter];
                if coef > TOL {
                    let ratio = row[self.cols] / coef;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - TOL
                                || (ratio <= lr + TOL && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((li, _)) = leave else {
                return Err(Error::Unbounded);
            };
            self.pivot(li, enter);
        }
        Err(Error::Config("simplex iteration cap exceeded".into()))
    }

    /// Minimizes the artificial sum; true means a feasible basis was found.
    fn phase1(&mut self) -> Result<bool> {
        let art0 = self.n_struct + self.n_slack;
        let mut c = vec![0.0; self.cols];
        for coef in c.iter_mut().skip(art0) {
            *coef = 1.0;
        }
        // Artificials may enter here; they only need to be out by phase 2.
        self.optimize(&c, self.cols)?;
        let residual: f64 = self
            .rows
            .iter()
            .zip(&self.basis)
            .filter(|(_, &b)| b >= art0)
            .map(|(row, _)| row[self.cols])
            .sum();
        Ok(residual <= self.feas_tol)
    }

    /// Pivots leftover zero-valued artificials out of the basis, dropping
    /// rows that turn out redundant. Pivot choice is by largest magnitude;
    /// no cycling is possible because every step strictly shrinks the set
    /// of basic artificials.
    fn drive_out_artificials(&mut self) {
        let art0 = self.n_struct + self.n_slack;
        let mut i = 0;
        while i < self.rows.len() {
            if self.basis[i] >= art0 {
                let col = (0..art0)
                    .filter(|&j| self.rows[i][j].abs() > TOL)
                    .max_by(|&a, &b| {
                        self.rows[i][a].abs().total_cmp(&self.rows[i][b].abs())
                    });
                match col {
                    Some(j) => self.pivot(i, j),
                    None => {
                        self.rows.remove(i);
                        self.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }

    fn phase2(&mut self, c_struct: &[f64]) -> Result<LpSolution> {
        let art0 = self.n_struct + self.n_slack;
        let mut c = vec![0.0; self.cols];
        c[..self.n_struct].copy_from_slice(c_struct);
        self.optimize(&c, art0)?;
        let mut x = vec![0.0; self.n_struct];
        for (row, &b) in self.rows.iter().zip(&self.basis) {
            if b < self.n_struct {
                x[b] = row[self.cols].max(0.0);
            }
        }
        let objective = c_struct.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(LpSolution { x, objective })
    }
}
