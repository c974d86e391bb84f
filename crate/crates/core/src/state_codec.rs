//! Observation payloads built from an episode snapshot: per-pursuer
//! position matrices and the coordinator's traffic summary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::road_network::MappingMatrixLayout;
use crate::traffic_sim::{EpisodeState, Role, SimError, Simulator, VehicleState};

/// Integer counts laid out like the mapping matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl CountMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn for_layout(layout: &MappingMatrixLayout) -> Self {
        Self::zeros(layout.rows, layout.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.cols + col]
    }

    pub fn increment(&mut self, row: usize, col: usize) {
        self.data[row * self.cols + col] += 1;
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&c| c as u64).sum()
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.data[row * self.cols..(row + 1) * self.cols]
            .iter()
            .map(|&c| c as u64)
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&c| c == 0)
    }

    /// Entries divided by `divisor`, as f64.
    pub fn scaled(&self, divisor: f64) -> Vec<f64> {
        self.data.iter().map(|&c| c as f64 / divisor).collect()
    }

    /// Swaps two cells; used by tests that permute tokens.
    pub fn swap(&mut self, a: (usize, usize), b: (usize, usize)) {
        self.data.swap(a.0 * self.cols + a.1, b.0 * self.cols + b.1);
    }
}

impl fmt::Display for CountMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .data
            .iter()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1);
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|c| format!("{:>width$}", self.get(r, c)))
                .collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// One pursuer's view: itself, the other pursuers and the alive evaders.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub sf: CountMatrix,
    pub sp_other: CountMatrix,
    pub se: CountMatrix,
}

/// Global traffic information for the coordinator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub sp: CountMatrix,
    pub se: CountMatrix,
    /// Background vehicles per directed lane, indexed by `LaneId::index`.
    pub bn: Vec<u32>,
}

fn add_vehicle(sim: &Simulator, m: &mut CountMatrix, v: &VehicleState) {
    let cell = sim
        .network()
        .cell_of(v.position())
        .expect("vehicles stay on their lane");
    m.increment(cell.row, cell.col);
}

fn evader_matrix(sim: &Simulator, state: &EpisodeState) -> CountMatrix {
    let mut se = CountMatrix::for_layout(sim.network().layout());
    for (_, e) in state.alive_evaders() {
        add_vehicle(sim, &mut se, e);
    }
    se
}

pub fn encode_agent_state(sim: &Simulator, state: &EpisodeState, m: usize) -> Result<AgentState, SimError> {
    if m >= state.pursuers {
        return Err(SimError::UnknownPursuer(m));
    }
    let layout = sim.network().layout();
    let mut sf = CountMatrix::for_layout(layout);
    let mut sp_other = CountMatrix::for_layout(layout);
    for k in 0..state.pursuers {
        let target = if k == m { &mut sf } else { &mut sp_other };
        add_vehicle(sim, target, state.pursuer(k));
    }
    Ok(AgentState {
        sf,
        sp_other,
        se: evader_matrix(sim, state),
    })
}

pub fn encode_env_info(sim: &Simulator, state: &EpisodeState) -> EnvInfo {
    let mut sp = CountMatrix::for_layout(sim.network().layout());
    for k in 0..state.pursuers {
        add_vehicle(sim, &mut sp, state.pursuer(k));
    }
    let mut bn = vec![0u32; sim.network().lane_count()];
    for v in state.background().filter(|v| v.alive && v.role == Role::Background) {
        bn[v.lane.index()] += 1;
    }
    EnvInfo {
        sp,
        se: evader_matrix(sim, state),
        bn,
    }
}

impl fmt::Display for AgentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SF")?;
        write!(f, "{}", self.sf)?;
        writeln!(f, "SPother")?;
        write!(f, "{}", self.sp_other)?;
        writeln!(f, "SE")?;
        write!(f, "{}", self.se)
    }
}

impl fmt::Display for EnvInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SP")?;
        write!(f, "{}", self.sp)?;
        writeln!(f, "SE")?;
        write!(f, "{}", self.se)?;
        let bn: Vec<String> = self.bn.iter().map(u32::to_string).collect();
        writeln!(f, "BN")?;
        writeln!(f, "{}", bn.join(" "))
    }
}
