//! Discrete-time microsimulator for pursuers, evaders and background traffic.
//!
//! Vehicles are points on lanes. Every step each vehicle accelerates at
//! `max_accel` towards `max_speed`, then caps its speed so it could still
//! stop, braking at `max_decel`, before (a) a red signal it is able to
//! stop for, (b) `min_headway` behind its leader on the same lane, or
//! (c) `min_headway` behind the last vehicle on the lane it turns into.
//! Displacement is additionally clamped so a follower never passes its
//! leader. Turns are taken when a vehicle crosses the end intersection of
//! its lane; pursuers use their latched action, evaders their cyclic
//! route, background vehicles a random valid turn.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::road_network::{
    Axis, Direction, Heading, IntersectionId, LaneId, RoadId, RoadNetwork, RoadPosition, Turn, TurnMask,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// `M`
    pub pursuers: usize,
    /// `N`
    pub evaders: usize,
    /// `B`
    pub background: usize,
    pub max_accel: f64,
    pub max_decel: f64,
    pub max_speed: f64,
    pub capture_distance: f64,
    pub dt: f64,
    pub min_headway: f64,
    pub episode_cap: usize,
    /// Cyclic turn sequences; each evader follows one chosen at reset.
    pub evader_routes: Vec<Vec<Turn>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pursuers: 4,
            evaders: 2,
            background: 50,
            max_accel: 0.8,
            max_decel: 4.5,
            max_speed: 20.0,
            capture_distance: 50.0,
            dt: 1.0,
            min_headway: 10.0,
            episode_cap: 1000,
            evader_routes: vec![
                vec![Turn::Right],
                vec![Turn::Left],
                vec![Turn::Straight, Turn::Straight, Turn::Right],
                vec![Turn::Straight, Turn::Left, Turn::Straight, Turn::Right],
            ],
        }
    }
}

impl SimConfig {
    pub fn validate(&self, net: &RoadNetwork) -> Result<(), ConfigError> {
        if self.pursuers == 0 {
            return Err(ConfigError::invalid("sim.pursuers", "need at least one pursuer"));
        }
        if self.pursuers <= self.evaders {
            return Err(ConfigError::invalid(
                "sim.evaders",
                format!("pursuers ({}) must outnumber evaders ({})", self.pursuers, self.evaders),
            ));
        }
        for (key, v) in [
            ("sim.max_accel", self.max_accel),
            ("sim.max_decel", self.max_decel),
            ("sim.max_speed", self.max_speed),
            ("sim.capture_distance", self.capture_distance),
            ("sim.dt", self.dt),
            ("sim.min_headway", self.min_headway),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(key, "must be positive"));
            }
        }
        if self.episode_cap == 0 {
            return Err(ConfigError::invalid("sim.episode_cap", "must be positive"));
        }
        if self.evader_routes.is_empty() || self.evader_routes.iter().any(|r| r.is_empty()) {
            return Err(ConfigError::invalid("sim.evader_routes", "need at least one non-empty route"));
        }
        if self.max_speed * self.dt >= net.spacing() {
            return Err(ConfigError::invalid(
                "sim.max_speed",
                "a vehicle may not cross more than one intersection per step",
            ));
        }
        let cells = net.layout().len();
        if self.pursuers + self.evaders > cells {
            return Err(ConfigError::invalid(
                "sim.pursuers",
                format!(
                    "{} pursuers and evaders need distinct spawn cells, grid has {cells}",
                    self.pursuers + self.evaders
                ),
            ));
        }
        let slots = background_slots_per_lane(self, net) * net.lane_count();
        if self.background > slots {
            return Err(ConfigError::invalid(
                "sim.background",
                format!("{} background vehicles, only {slots} spawn slots", self.background),
            ));
        }
        Ok(())
    }
}

fn background_slot_spacing(cfg: &SimConfig) -> f64 {
    2.0 * cfg.min_headway
}

fn background_slots_per_lane(cfg: &SimConfig, net: &RoadNetwork) -> usize {
    (net.spacing() / background_slot_spacing(cfg)).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pursuer,
    Evader,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaderRoute {
    /// Index into `SimConfig::evader_routes`.
    pub index: usize,
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub role: Role,
    pub lane: LaneId,
    pub offset: f64,
    pub speed: f64,
    /// Turn to take at the end of the current lane.
    pub planned_turn: Option<Turn>,
    pub route: Option<EvaderRoute>,
    pub alive: bool,
}

impl VehicleState {
    pub fn position(&self) -> RoadPosition {
        RoadPosition {
            lane: self.lane,
            offset: self.offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureEvent {
    /// Evader index `n` (0-based among evaders).
    pub evader: usize,
    /// Clock value after the capturing step.
    pub timestep: usize,
    /// Pursuer indices within `d_capture`; its length is `g`.
    pub pursuers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub captures: Vec<CaptureEvent>,
    pub done: bool,
    /// Per pursuer: `(evader index, distance)` over evaders alive before the step.
    pub distances_before: Vec<Vec<(usize, f64)>>,
    /// Per pursuer: `(evader index, distance)` over evaders alive after the step.
    pub distances_after: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    pub clock: usize,
    pub vehicles: Vec<VehicleState>,
    pub capture_log: Vec<CaptureEvent>,
    pub pursuers: usize,
    pub evaders: usize,
    pub done: bool,
    /// Steps in which a displacement had to be clamped to avoid overlap.
    pub clamp_events: usize,
    pub rng: ChaCha8Rng,
}

impl EpisodeState {
    pub fn pursuer(&self, m: usize) -> &VehicleState {
        &self.vehicles[m]
    }

    pub fn evader(&self, n: usize) -> &VehicleState {
        &self.vehicles[self.pursuers + n]
    }

    pub fn alive_evaders(&self) -> impl Iterator<Item = (usize, &VehicleState)> {
        self.vehicles[self.pursuers..self.pursuers + self.evaders]
            .iter()
            .enumerate()
            .filter(|(_, v)| v.alive)
    }

    pub fn alive_evader_count(&self) -> usize {
        self.alive_evaders().count()
    }

    pub fn background(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles[self.pursuers + self.evaders..].iter()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {turn:?} is not valid for pursuer {pursuer} at its next intersection")]
    InvalidAction { pursuer: usize, turn: Turn },
    #[error("pursuer {0} does not exist")]
    UnknownPursuer(usize),
}

/// Stateless stepping rules over a fixed network and configuration.
#[derive(Clone, Debug)]
pub struct Simulator {
    net: RoadNetwork,
    cfg: SimConfig,
}

fn safe_speed(gap: f64, leader_speed: f64, decel: f64, dt: f64) -> f64 {
    let budget = gap + leader_speed * leader_speed / (2.0 * decel);
    if budget <= 0.0 {
        return 0.0;
    }
    -decel * dt + (decel * decel * dt * dt + 2.0 * decel * budget).sqrt()
}

fn dist((ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    (ax - bx).hypot(ay - by)
}

impl Simulator {
    pub fn new(net: RoadNetwork, cfg: SimConfig) -> Result<Self, ConfigError> {
        cfg.validate(&net)?;
        Ok(Self { net, cfg })
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Axis holding the green phase during the step that starts at `clock`.
    pub fn green_axis(&self, clock: usize) -> Axis {
        let phase = (clock as f64 * self.cfg.dt / self.net.spec().signal_green_s).floor() as u64;
        if phase % 2 == 0 {
            Axis::Horizontal
        } else {
            Axis::Vertical
        }
    }

    pub fn point(&self, v: &VehicleState) -> (f64, f64) {
        self.net.point(v.position()).expect("vehicles stay on their lane")
    }

    fn mask_at_lane_end(&self, lane: LaneId) -> TurnMask {
        self.net
            .valid_turns(self.net.lane_end(lane), self.net.lane_heading(lane))
    }

    fn plan_evader(&self, route: &mut EvaderRoute, lane: LaneId) -> Turn {
        let mask = self.mask_at_lane_end(lane);
        let turns = &self.cfg.evader_routes[route.index];
        for k in 0..turns.len() {
            let t = turns[(route.cursor + k) % turns.len()];
            if mask.allows(t) {
                route.cursor = (route.cursor + k + 1) % turns.len();
                return t;
            }
        }
        mask.turns().next().expect("turn masks are never empty")
    }

    fn plan_random(&self, rng: &mut ChaCha8Rng, lane: LaneId) -> Turn {
        let valid: Vec<Turn> = self.mask_at_lane_end(lane).turns().collect();
        valid[rng.gen_range(0..valid.len())]
    }

    fn spawn_lane(&self, row: usize, col: usize, forward: bool) -> (LaneId, f64) {
        let layout = self.net.layout();
        let channel = layout.row_order[row];
        let w = self.net.side();
        let s = self.net.spacing();
        let center = (col as f64 + 0.5) * self.net.channel_length() / layout.cols as f64;
        let q = ((center / s).floor() as usize).min(w - 2);
        let along = center - q as f64 * s;
        let road = match channel.axis {
            Axis::Horizontal => channel.index * (w - 1) + q,
            Axis::Vertical => w * (w - 1) + channel.index * (w - 1) + q,
        };
        let lane = LaneId {
            road: RoadId(road),
            dir: if forward {
                Direction::Forward
            } else {
                Direction::Backward
            },
        };
        let offset = if forward { along } else { s - along };
        (lane, offset)
    }

    /// Fresh episode. Pursuers and evaders occupy distinct matrix cells,
    /// background vehicles distinct lane slots; everything starts at rest.
    pub fn reset(&self, seed: u64) -> EpisodeState {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.net.layout();
        let special = cfg.pursuers + cfg.evaders;
        let cells = sample(&mut rng, layout.len(), special).into_vec();
        let mut vehicles = Vec::with_capacity(special + cfg.background);
        for (id, cell) in cells.into_iter().enumerate() {
            let forward = rng.gen_bool(0.5);
            let (lane, offset) = self.spawn_lane(cell / layout.cols, cell % layout.cols, forward);
            let role = if id < cfg.pursuers { Role::Pursuer } else { Role::Evader };
            vehicles.push(VehicleState {
                id,
                role,
                lane,
                offset,
                speed: 0.0,
                planned_turn: None,
                route: None,
                alive: true,
            });
        }
        for v in vehicles.iter_mut().filter(|v| v.role == Role::Evader) {
            let mut route = EvaderRoute {
                index: rng.gen_range(0..cfg.evader_routes.len()),
                cursor: 0,
            };
            v.planned_turn = Some(self.plan_evader(&mut route, v.lane));
            v.route = Some(route);
        }
        let per_lane = background_slots_per_lane(cfg, &self.net);
        let spacing = background_slot_spacing(cfg);
        let slots = sample(&mut rng, per_lane * self.net.lane_count(), cfg.background).into_vec();
        for slot in slots {
            let lane = LaneId::from_index(slot / per_lane);
            let offset = ((slot % per_lane) as f64 + 0.5) * spacing;
            let turn = self.plan_random(&mut rng, lane);
            vehicles.push(VehicleState {
                id: vehicles.len(),
                role: Role::Background,
                lane,
                offset,
                speed: 0.0,
                planned_turn: Some(turn),
                route: None,
                alive: true,
            });
        }
        EpisodeState {
            clock: 0,
            vehicles,
            capture_log: Vec::new(),
            pursuers: cfg.pursuers,
            evaders: cfg.evaders,
            done: cfg.evaders == 0,
            clamp_events: 0,
            rng,
        }
    }

    /// Euclidean distance from pursuer `m` to every alive evader.
    pub fn capture_distances(&self, state: &EpisodeState, m: usize) -> Result<Vec<(usize, f64)>, SimError> {
        if m >= state.pursuers {
            return Err(SimError::UnknownPursuer(m));
        }
        let p = self.point(state.pursuer(m));
        Ok(state
            .alive_evaders()
            .map(|(n, e)| (n, dist(p, self.point(e))))
            .collect())
    }

    /// Valid actions of pursuer `m` at the end of its current lane.
    pub fn decision_mask(&self, state: &EpisodeState, m: usize) -> Result<TurnMask, SimError> {
        if m >= state.pursuers {
            return Err(SimError::UnknownPursuer(m));
        }
        Ok(self.mask_at_lane_end(state.pursuer(m).lane))
    }

    fn all_distances(&self, state: &EpisodeState) -> Vec<Vec<(usize, f64)>> {
        (0..state.pursuers)
            .map(|m| self.capture_distances(state, m).expect("pursuer index in range"))
            .collect()
    }

    /// Advances the episode by one timestep with one action per pursuer.
    pub fn step(&self, state: &mut EpisodeState, actions: &[Turn]) -> Result<StepEvents, SimError> {
        if actions.len() != state.pursuers {
            return Err(SimError::ActionCount {
                expected: state.pursuers,
                got: actions.len(),
            });
        }
        for (m, &turn) in actions.iter().enumerate() {
            if !self.decision_mask(state, m)?.allows(turn) {
                return Err(SimError::InvalidAction { pursuer: m, turn });
            }
        }
        for (m, &turn) in actions.iter().enumerate() {
            state.vehicles[m].planned_turn = Some(turn);
        }
        let distances_before = self.all_distances(state);

        self.move_vehicles(state);

        let mut captures = Vec::new();
        let timestep = state.clock + 1;
        for n in 0..state.evaders {
            if !state.evader(n).alive {
                continue;
            }
            let e = self.point(state.evader(n));
            let captors: Vec<usize> = (0..state.pursuers)
                .filter(|&m| dist(self.point(state.pursuer(m)), e) < self.cfg.capture_distance)
                .collect();
            if !captors.is_empty() {
                state.vehicles[state.pursuers + n].alive = false;
                captures.push(CaptureEvent {
                    evader: n,
                    timestep,
                    pursuers: captors,
                });
            }
        }
        state.capture_log.extend(captures.iter().cloned());
        state.clock = timestep;
        state.done = state.alive_evader_count() == 0 || state.clock >= self.cfg.episode_cap;
        let distances_after = self.all_distances(state);
        Ok(StepEvents {
            captures,
            done: state.done,
            distances_before,
            distances_after,
        })
    }

    fn next_lane(&self, v: &VehicleState) -> LaneId {
        let node = self.net.lane_end(v.lane);
        let heading = self.net.lane_heading(v.lane);
        let turn = v
            .planned_turn
            .filter(|t| self.net.valid_turns(node, heading).allows(*t))
            .unwrap_or_else(|| self.mask_at_lane_end(v.lane).turns().next().expect("non-empty mask"));
        self.net
            .resolve_turn(node, heading, turn)
            .expect("turn validated against the mask")
    }

    fn move_vehicles(&self, state: &mut EpisodeState) {
        let cfg = &self.cfg;
        let (accel, decel, dt) = (cfg.max_accel, cfg.max_decel, cfg.dt);
        let green = self.green_axis(state.clock);

        let mut order: Vec<usize> = (0..state.vehicles.len())
            .filter(|&i| state.vehicles[i].alive)
            .collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (&state.vehicles[a], &state.vehicles[b]);
            va.lane
                .index()
                .cmp(&vb.lane.index())
                .then(vb.offset.total_cmp(&va.offset))
                .then(va.id.cmp(&vb.id))
        });

        for i in order {
            let v = state.vehicles[i].clone();
            let len = self.net.lane_length(v.lane);
            let remaining = len - v.offset;

            // Nearest vehicle ahead on the same lane; equal offsets resolve by id.
            let leader = state
                .vehicles
                .iter()
                .filter(|o| {
                    o.alive
                        && o.id != v.id
                        && o.lane == v.lane
                        && (o.offset > v.offset || (o.offset == v.offset && o.id < v.id))
                })
                .min_by(|a, b| a.offset.total_cmp(&b.offset))
                .map(|o| (o.offset, o.speed));

            let next = self.next_lane(&v);
            let tail = if leader.is_none() {
                state
                    .vehicles
                    .iter()
                    .filter(|o| o.alive && o.id != v.id && o.lane == next)
                    .min_by(|a, b| a.offset.total_cmp(&b.offset))
                    .map(|o| (o.offset, o.speed))
            } else {
                None
            };

            let floor = (v.speed - decel * dt).max(0.0);
            let mut target = (v.speed + accel * dt).min(cfg.max_speed);
            let mut max_travel = f64::INFINITY;

            if let Some((off, speed)) = leader {
                target = target.min(safe_speed(off - v.offset - cfg.min_headway, speed, decel, dt));
                max_travel = max_travel.min(off - v.offset);
            } else {
                let red = self.net.road(v.lane.road).axis != green;
                if red {
                    let stop = safe_speed(remaining, 0.0, decel, dt);
                    if stop >= floor - 1e-9 {
                        target = target.min(stop);
                        max_travel = max_travel.min(remaining);
                    }
                }
                if let Some((off, speed)) = tail {
                    target = target.min(safe_speed(remaining + off - cfg.min_headway, speed, decel, dt));
                    max_travel = max_travel.min(remaining + off);
                }
            }

            let speed = target.max(floor).min(cfg.max_speed);
            let mut travel = speed * dt;
            let mut new_speed = speed;
            if travel > max_travel {
                travel = max_travel.max(0.0);
                new_speed = (travel / dt).max(floor);
                if speed * dt - travel > 1e-9 {
                    state.clamp_events += 1;
                }
            }

            let veh = &mut state.vehicles[i];
            veh.speed = new_speed;
            if v.offset + travel > len {
                veh.lane = next;
                veh.offset = (v.offset + travel - len).min(self.net.lane_length(next));
                match veh.role {
                    Role::Pursuer => veh.planned_turn = None,
                    Role::Evader => {
                        let mut route = veh.route.expect("evaders carry a route");
                        let turn = self.plan_evader(&mut route, next);
                        let veh = &mut state.vehicles[i];
                        veh.route = Some(route);
                        veh.planned_turn = Some(turn);
                    }
                    Role::Background => {
                        let turn = self.plan_random(&mut state.rng, next);
                        state.vehicles[i].planned_turn = Some(turn);
                    }
                }
            } else {
                veh.offset = v.offset + travel;
            }
        }
    }

    pub fn snapshot(&self, state: &EpisodeState) -> Snapshot {
        Snapshot {
            clock: state.clock,
            green_axis: self.green_axis(state.clock),
            vehicles: state
                .vehicles
                .iter()
                .map(|v| {
                    let (x, y) = self.point(v);
                    VehiclePose {
                        id: v.id,
                        role: v.role,
                        x,
                        y,
                        heading: self.net.lane_heading(v.lane),
                        lane: v.lane.index(),
                        speed: v.speed,
                        alive: v.alive,
                    }
                })
                .collect(),
        }
    }

    /// Kinematic and spacing checks between two consecutive states.
    pub fn audit(&self, before: &EpisodeState, after: &EpisodeState) -> SafetyAudit {
        let cfg = &self.cfg;
        let dv_max = cfg.max_accel.max(cfg.max_decel) * cfg.dt + 1e-9;
        let mut audit = SafetyAudit::default();
        for (a, b) in before.vehicles.iter().zip(&after.vehicles) {
            if !b.alive {
                continue;
            }
            if b.speed < 0.0 || b.speed > cfg.max_speed + 1e-9 {
                audit.speed_violations += 1;
            }
            if (b.speed - a.speed).abs() > dv_max {
                audit.accel_violations += 1;
            }
        }
        for lane in self.net.lanes() {
            let mut offsets: Vec<f64> = after
                .vehicles
                .iter()
                .filter(|v| v.alive && v.lane == lane)
                .map(|v| v.offset)
                .collect();
            offsets.sort_by(f64::total_cmp);
            if offsets.windows(2).any(|w| w[1] - w[0] < 0.0) {
                audit.overlap_violations += 1;
            }
            if offsets.iter().any(|&o| o < 0.0 || o > self.net.lane_length(lane)) {
                audit.off_lane += 1;
            }
        }
        audit
    }

    pub fn intersection_of(&self, v: &VehicleState) -> IntersectionId {
        self.net.lane_end(v.lane)
    }

    pub fn heading_of(&self, v: &VehicleState) -> Heading {
        self.net.lane_heading(v.lane)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SafetyAudit {
    pub speed_violations: usize,
    pub accel_violations: usize,
    pub overlap_violations: usize,
    pub off_lane: usize,
}

impl SafetyAudit {
    pub fn is_clean(&self) -> bool {
        *self == SafetyAudit::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VehiclePose {
    pub id: usize,
    pub role: Role,
    pub x: f64,
    pub y: f64,
    pub heading: Heading,
    pub lane: usize,
    pub speed: f64,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub clock: usize,
    pub green_axis: Axis,
    pub vehicles: Vec<VehiclePose>,
}
