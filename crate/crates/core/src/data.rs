//! Logged datasets and their CSV form.
//!
//! Bandit files carry the columns `x0..x{d-1},t,y`. Trajectory files carry
//! one `k{stage}_x{j}` block followed by `k{stage}_t` per stage (stages are
//! numbered from 1), then the final outcome `y`; immediate per-stage rewards,
//! when present, are written as `k{stage}_r` after the action column. Reals
//! are written with 17 significant digits so a write/read cycle is
//! bit-exact.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("action {action} at row {row} is outside 0..{num_actions}")]
    ActionOutOfRange {
        row: usize,
        action: usize,
        num_actions: usize,
    },
    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },
    #[error("at least two actions are required, got {0}")]
    TooFewActions(usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("malformed value {value:?} in column {column}")]
    Parse { column: String, value: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(column: &str, value: &str) -> Result<f64, DataError> {
    value.trim().parse::<f64>().map_err(|_| DataError::Parse {
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn parse_action(column: &str, value: &str) -> Result<usize, DataError> {
    value.trim().parse::<usize>().map_err(|_| DataError::Parse {
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &'static str) -> Result<(), DataError> {
    for (row, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFinite { what, row });
        }
    }
    Ok(())
}

fn check_actions(actions: &[usize], num_actions: usize) -> Result<(), DataError> {
    for (row, &a) in actions.iter().enumerate() {
        if a >= num_actions {
            return Err(DataError::ActionOutOfRange {
                row,
                action: a,
                num_actions,
            });
        }
    }
    Ok(())
}

/// Logged single-stage data `(X_i, T_i, Y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditDataset {
    contexts: Array2<f64>,
    actions: Vec<usize>,
    outcomes: Vec<f64>,
    num_actions: usize,
}

impl BanditDataset {
    pub fn new(
        contexts: Array2<f64>,
        actions: Vec<usize>,
        outcomes: Vec<f64>,
        num_actions: usize,
    ) -> Result<Self, DataError> {
        let n = contexts.nrows();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if num_actions < 2 {
            return Err(DataError::TooFewActions(num_actions));
        }
        if actions.len() != n {
            return Err(DataError::LengthMismatch {
                what: "actions",
                got: actions.len(),
                expected: n,
            });
        }
        if outcomes.len() != n {
            return Err(DataError::LengthMismatch {
                what: "outcomes",
                got: outcomes.len(),
                expected: n,
            });
        }
        check_actions(&actions, num_actions)?;
        check_finite(outcomes.iter().copied(), "outcomes")?;
        for (row, r) in contexts.outer_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { what: "contexts", row });
            }
        }
        Ok(Self {
            contexts,
            actions,
            outcomes,
            num_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.contexts.ncols()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn contexts(&self) -> ArrayView2<'_, f64> {
        self.contexts.view()
    }

    pub fn context(&self, i: usize) -> ArrayView1<'_, f64> {
        self.contexts.row(i)
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> BanditDataset {
        BanditDataset {
            contexts: self.contexts.select(Axis(0), indices),
            actions: indices.iter().map(|&i| self.actions[i]).collect(),
            outcomes: indices.iter().map(|&i| self.outcomes[i]).collect(),
            num_actions: self.num_actions,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("t".into());
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.contexts.row(i).iter().map(|&v| fmt_real(v)).collect();
            rec.push(self.actions[i].to_string());
            rec.push(fmt_real(self.outcomes[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a bandit CSV. `num_actions` defaults to `max(t) + 1` (at least 2).
    pub fn read_csv<R: Read>(reader: R, num_actions: Option<usize>) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let d = header.len().checked_sub(2).ok_or_else(|| {
            DataError::Header("expected at least the columns t,y".into())
        })?;
        for (j, name) in header.iter().take(d).enumerate() {
            if *name != format!("x{j}") {
                return Err(DataError::Header(format!("column {j} is {name:?}, expected x{j}")));
            }
        }
        if header[d] != "t" || header[d + 1] != "y" {
            return Err(DataError::Header("last two columns must be t,y".into()));
        }
        let mut flat = Vec::new();
        let mut actions = Vec::new();
        let mut outcomes = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                flat.push(parse_real(&header[j], &rec[j])?);
            }
            actions.push(parse_action("t", &rec[d])?);
            outcomes.push(parse_real("y", &rec[d + 1])?);
        }
        let n = actions.len();
        let m = num_actions.unwrap_or_else(|| actions.iter().max().map_or(2, |&a| (a + 1).max(2)));
        let contexts = Array2::from_shape_vec((n, d), flat).map_err(|e| DataError::Header(e.to_string()))?;
        Self::new(contexts, actions, outcomes, m)
    }
}

/// Logged multi-stage data `(X_1, T_1, ..., X_K, T_K, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    states: Vec<Array2<f64>>,
    actions: Vec<Vec<usize>>,
    outcomes: Vec<f64>,
    stage_rewards: Option<Vec<Vec<f64>>>,
    num_actions: usize,
}

impl TrajectoryDataset {
    /// `states[k]` is the `n x d_k` block of stage-`k` states and
    /// `actions[k]` the stage-`k` actions (both 0-indexed by stage).
    pub fn new(
        states: Vec<Array2<f64>>,
        actions: Vec<Vec<usize>>,
        outcomes: Vec<f64>,
        num_actions: usize,
    ) -> Result<Self, DataError> {
        if states.is_empty() || states[0].nrows() == 0 {
            return Err(DataError::Empty);
        }
        if num_actions < 2 {
            return Err(DataError::TooFewActions(num_actions));
        }
        let n = states[0].nrows();
        if actions.len() != states.len() {
            return Err(DataError::LengthMismatch {
                what: "action stages",
                got: actions.len(),
                expected: states.len(),
            });
        }
        for s in &states {
            if s.nrows() != n {
                return Err(DataError::LengthMismatch {
                    what: "stage states",
                    got: s.nrows(),
                    expected: n,
                });
            }
            for (row, r) in s.outer_iter().enumerate() {
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::NonFinite { what: "states", row });
                }
            }
        }
        for a in &actions {
            if a.len() != n {
                return Err(DataError::LengthMismatch {
                    what: "stage actions",
                    got: a.len(),
                    expected: n,
                });
            }
            check_actions(a, num_actions)?;
        }
        if outcomes.len() != n {
            return Err(DataError::LengthMismatch {
                what: "outcomes",
                got: outcomes.len(),
                expected: n,
            });
        }
        check_finite(outcomes.iter().copied(), "outcomes")?;
        Ok(Self {
            states,
            actions,
            outcomes,
            stage_rewards: None,
            num_actions,
        })
    }

    /// Attach immediate rewards, one vector per stage.
    pub fn with_stage_rewards(mut self, rewards: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if rewards.len() != self.horizon() {
            return Err(DataError::LengthMismatch {
                what: "reward stages",
                got: rewards.len(),
                expected: self.horizon(),
            });
        }
        for r in &rewards {
            if r.len() != self.len() {
                return Err(DataError::LengthMismatch {
                    what: "stage rewards",
                    got: r.len(),
                    expected: self.len(),
                });
            }
            check_finite(r.iter().copied(), "stage rewards")?;
        }
        self.stage_rewards = Some(rewards);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn stage_dim(&self, k: usize) -> usize {
        self.states[k].ncols()
    }

    pub fn states(&self, k: usize) -> ArrayView2<'_, f64> {
        self.states[k].view()
    }

    pub fn initial_states(&self) -> ArrayView2<'_, f64> {
        self.states[0].view()
    }

    pub fn actions(&self, k: usize) -> &[usize] {
        &self.actions[k]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn stage_rewards(&self) -> Option<&[Vec<f64>]> {
        self.stage_rewards.as_deref()
    }

    /// Width of the flattened history `H_k` (0-indexed stage `k`): all states
    /// up to and including stage `k`, plus `m - 1` action indicators for
    /// every earlier stage.
    pub fn history_dim(&self, k: usize) -> usize {
        (0..=k).map(|j| self.stage_dim(j)).sum::<usize>() + k * (self.num_actions - 1)
    }

    /// Write the flattened history of row `i` at stage `k` into `out`.
    pub fn history_into(&self, i: usize, k: usize, out: &mut Vec<f64>) {
        out.clear();
        for j in 0..=k {
            out.extend(self.states[j].row(i).iter().copied());
            if j < k {
                let a = self.actions[j][i];
                out.extend((1..self.num_actions).map(|t| if a == t { 1.0 } else { 0.0 }));
            }
        }
    }

    /// Flattened histories at stage `k` for the given rows.
    pub fn history_matrix(&self, k: usize, rows: &[usize]) -> Array2<f64> {
        let width = self.history_dim(k);
        let mut flat = Vec::with_capacity(rows.len() * width);
        let mut buf = Vec::with_capacity(width);
        for &i in rows {
            self.history_into(i, k, &mut buf);
            flat.extend_from_slice(&buf);
        }
        Array2::from_shape_vec((rows.len(), width), flat).expect("history width")
    }

    /// Keep the first `horizon` stages and use `outcomes` as the response.
    pub fn truncated(&self, horizon: usize, outcomes: Vec<f64>) -> Result<Self, DataError> {
        if horizon == 0 || horizon > self.horizon() {
            return Err(DataError::TooFewRows {
                needed: horizon,
                got: self.horizon(),
            });
        }
        Self::new(
            self.states[..horizon].to_vec(),
            self.actions[..horizon].to_vec(),
            outcomes,
            self.num_actions,
        )
    }

    /// View a horizon-1 dataset as bandit data.
    pub fn to_bandit(&self) -> Option<BanditDataset> {
        if self.horizon() != 1 {
            return None;
        }
        BanditDataset::new(
            self.states[0].clone(),
            self.actions[0].clone(),
            self.outcomes.clone(),
            self.num_actions,
        )
        .ok()
    }

    pub fn from_bandit(data: &BanditDataset) -> Self {
        Self {
            states: vec![data.contexts.clone()],
            actions: vec![data.actions.clone()],
            outcomes: data.outcomes.clone(),
            stage_rewards: None,
            num_actions: data.num_actions,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        for k in 0..self.horizon() {
            for j in 0..self.stage_dim(k) {
                header.push(format!("k{}_x{j}", k + 1));
            }
            header.push(format!("k{}_t", k + 1));
            if self.stage_rewards.is_some() {
                header.push(format!("k{}_r", k + 1));
            }
        }
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = Vec::with_capacity(header.len());
            for k in 0..self.horizon() {
                rec.extend(self.states[k].row(i).iter().map(|&v| fmt_real(v)));
                rec.push(self.actions[k][i].to_string());
                if let Some(r) = &self.stage_rewards {
                    rec.push(fmt_real(r[k][i]));
                }
            }
            rec.push(fmt_real(self.outcomes[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_actions: Option<usize>) -> Result<Self, DataError> {
        enum Col {
            State(usize),
            Action(usize),
            Reward(usize),
            Outcome,
        }
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut cols = Vec::with_capacity(header.len());
        let mut dims: Vec<usize> = Vec::new();
        let mut has_rewards = false;
        for name in &header {
            if name == "y" {
                cols.push(Col::Outcome);
                continue;
            }
            let bad = || DataError::Header(format!("unrecognised column {name:?}"));
            let rest = name.strip_prefix('k').ok_or_else(bad)?;
            let (stage, field) = rest.split_once('_').ok_or_else(bad)?;
            let stage: usize = stage.parse().map_err(|_| bad())?;
            if stage == 0 {
                return Err(bad());
            }
            let k = stage - 1;
            if dims.len() < stage {
                dims.resize(stage, 0);
            }
            match field {
                "t" => cols.push(Col::Action(k)),
                "r" => {
                    has_rewards = true;
                    cols.push(Col::Reward(k));
                }
                f => {
                    let j: usize = f.strip_prefix('x').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    if j != dims[k] {
                        return Err(DataError::Header(format!("column {name:?} out of order")));
                    }
                    dims[k] += 1;
                    cols.push(Col::State(k));
                }
            }
        }
        let horizon = dims.len();
        if horizon == 0 || !cols.iter().any(|c| matches!(c, Col::Outcome)) {
            return Err(DataError::Header("need at least one stage and a y column".into()));
        }
        let mut flat: Vec<Vec<f64>> = vec![Vec::new(); horizon];
        let mut actions: Vec<Vec<usize>> = vec![Vec::new(); horizon];
        let mut rewards: Vec<Vec<f64>> = vec![Vec::new(); horizon];
        let mut outcomes = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for ((c, value), name) in cols.iter().zip(rec.iter()).zip(&header) {
                match *c {
                    Col::State(k) => flat[k].push(parse_real(name, value)?),
                    Col::Action(k) => actions[k].push(parse_action(name, value)?),
                    Col::Reward(k) => rewards[k].push(parse_real(name, value)?),
                    Col::Outcome => outcomes.push(parse_real("y", value)?),
                }
            }
        }
        let n = outcomes.len();
        let states = flat
            .into_iter()
            .zip(&dims)
            .map(|(v, &d)| Array2::from_shape_vec((n, d), v).map_err(|e| DataError::Header(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let m = num_actions.unwrap_or_else(|| {
            actions
                .iter()
                .flat_map(|a| a.iter())
                .max()
                .map_or(2, |&a| (a + 1).max(2))
        });
        let data = Self::new(states, actions, outcomes, m)?;
        if has_rewards {
            data.with_stage_rewards(rewards)
        } else {
            Ok(data)
        }
    }
}
