//! Closed `W × W` grid of intersections, its channels and the `2W × K`
//! cell layout shared by every position matrix.
//!
//! Intersection `(i, j)` sits at `(i·s, j·s)` with `s = side / (W − 1)`;
//! `i` grows east and `j` grows north. Each road joins two neighbouring
//! intersections and carries one lane per direction. A channel is the line
//! of `W − 1` collinear roads; east-west channel `j` is matrix row `2j`,
//! north-south channel `i` is row `2i + 1`.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// `W`, intersections per side.
    pub intersections_per_side: usize,
    /// `K`, cells per channel.
    pub cells_per_channel: usize,
    pub scene_side_m: f64,
    /// Length of one green phase; the two axes alternate.
    pub signal_green_s: f64,
    /// Where going straight is impossible, the `Straight` action reverses
    /// direction instead of being masked out.
    pub dead_end_uturn: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            intersections_per_side: 4,
            cells_per_channel: 10,
            scene_side_m: 3000.0,
            signal_green_s: 30.0,
            dead_end_uturn: false,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.intersections_per_side < 2 {
            return Err(ConfigError::invalid("grid.intersections_per_side", "must be at least 2"));
        }
        if self.cells_per_channel < 1 {
            return Err(ConfigError::invalid("grid.cells_per_channel", "must be at least 1"));
        }
        if !(self.scene_side_m > 0.0 && self.scene_side_m.is_finite()) {
            return Err(ConfigError::invalid("grid.scene_side_m", "must be positive"));
        }
        if !(self.signal_green_s > 0.0 && self.signal_green_s.is_finite()) {
            return Err(ConfigError::invalid("grid.signal_green_s", "must be positive"));
        }
        Ok(())
    }

    pub fn road_count(&self) -> usize {
        let w = self.intersections_per_side;
        2 * w * (w - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// East-west.
    Horizontal,
    /// North-south.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    East,
    West,
    North,
    South,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::East, Heading::West, Heading::North, Heading::South];

    pub fn axis(self) -> Axis {
        match self {
            Heading::East | Heading::West => Axis::Horizontal,
            Heading::North | Heading::South => Axis::Vertical,
        }
    }

    pub fn reverse(self) -> Heading {
        match self {
            Heading::East => Heading::West,
            Heading::West => Heading::East,
            Heading::North => Heading::South,
            Heading::South => Heading::North,
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::East => Heading::North,
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
        }
    }

    pub fn right(self) -> Heading {
        self.left().reverse()
    }

    fn slot(self) -> usize {
        match self {
            Heading::East => 0,
            Heading::West => 1,
            Heading::North => 2,
            Heading::South => 3,
        }
    }

    fn unit(self) -> (f64, f64) {
        match self {
            Heading::East => (1.0, 0.0),
            Heading::West => (-1.0, 0.0),
            Heading::North => (0.0, 1.0),
            Heading::South => (0.0, -1.0),
        }
    }
}

/// Pursuit action at the next intersection. The discriminant is the
/// project-wide index used by Q lists: left 0, right 1, straight 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left = 0,
    Right = 1,
    Straight = 2,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Right, Turn::Straight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Turn> {
        Turn::ALL.get(i).copied()
    }
}

/// Validity of `(Left, Right, Straight)` at one intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TurnMask(pub [bool; 3]);

impl TurnMask {
    pub const ALL: TurnMask = TurnMask([true; 3]);

    pub fn allows(self, turn: Turn) -> bool {
        self.0[turn.index()]
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(self) -> bool {
        self.count() == 0
    }

    pub fn turns(self) -> impl Iterator<Item = Turn> {
        Turn::ALL.into_iter().filter(move |t| self.allows(*t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntersectionId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoadId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Towards increasing x (east) or y (north).
    Forward,
    Backward,
}

/// One travel direction of one road.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId {
    pub road: RoadId,
    pub dir: Direction,
}

impl LaneId {
    /// Dense index: road id, then forward before backward.
    pub fn index(self) -> usize {
        self.road.0 * 2 + usize::from(self.dir == Direction::Backward)
    }

    pub fn from_index(i: usize) -> LaneId {
        LaneId {
            road: RoadId(i / 2),
            dir: if i % 2 == 0 {
                Direction::Forward
            } else {
                Direction::Backward
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub axis: Axis,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrixLayout {
    /// `[hc1, vc1, hc2, vc2, ..., hcW, vcW]`.
    pub row_order: Vec<ChannelId>,
    pub rows: usize,
    pub cols: usize,
}

impl MappingMatrixLayout {
    pub fn row_of(&self, channel: ChannelId) -> usize {
        match channel.axis {
            Axis::Horizontal => 2 * channel.index,
            Axis::Vertical => 2 * channel.index + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub id: RoadId,
    pub axis: Axis,
    /// West or south end.
    pub low: IntersectionId,
    /// East or north end.
    pub high: IntersectionId,
    pub length: f64,
    pub channel: ChannelId,
    /// Distance from the channel start to `low`.
    pub channel_offset: f64,
}

/// A point on a lane, `offset` metres from the lane's entry intersection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadPosition {
    pub lane: LaneId,
    pub offset: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RoadError {
    #[error("road {0} does not exist")]
    UnknownRoad(usize),
    #[error("offset {offset} is off road {road} of length {length}")]
    OffRoad { road: usize, offset: f64, length: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    spec: GridSpec,
    spacing: f64,
    roads: Vec<Road>,
    /// Outgoing lane per intersection and heading.
    outgoing: Vec<[Option<LaneId>; 4]>,
    layout: MappingMatrixLayout,
}

impl RoadNetwork {
    pub fn build(spec: &GridSpec) -> Result<Self, ConfigError> {
        spec.validate()?;
        let w = spec.intersections_per_side;
        let spacing = spec.scene_side_m / (w - 1) as f64;
        let node = |i: usize, j: usize| IntersectionId(j * w + i);
        let mut roads = Vec::with_capacity(spec.road_count());
        for j in 0..w {
            for i in 0..w - 1 {
                roads.push(Road {
                    id: RoadId(roads.len()),
                    axis: Axis::Horizontal,
                    low: node(i, j),
                    high: node(i + 1, j),
                    length: spacing,
                    channel: ChannelId {
                        axis: Axis::Horizontal,
                        index: j,
                    },
                    channel_offset: i as f64 * spacing,
                });
            }
        }
        for i in 0..w {
            for j in 0..w - 1 {
                roads.push(Road {
                    id: RoadId(roads.len()),
                    axis: Axis::Vertical,
                    low: node(i, j),
                    high: node(i, j + 1),
                    length: spacing,
                    channel: ChannelId {
                        axis: Axis::Vertical,
                        index: i,
                    },
                    channel_offset: j as f64 * spacing,
                });
            }
        }
        let mut outgoing = vec![[None; 4]; w * w];
        for r in &roads {
            let (fwd, back) = match r.axis {
                Axis::Horizontal => (Heading::East, Heading::West),
                Axis::Vertical => (Heading::North, Heading::South),
            };
            outgoing[r.low.0][fwd.slot()] = Some(LaneId {
                road: r.id,
                dir: Direction::Forward,
            });
            outgoing[r.high.0][back.slot()] = Some(LaneId {
                road: r.id,
                dir: Direction::Backward,
            });
        }
        let row_order = (0..w)
            .flat_map(|k| {
                [
                    ChannelId {
                        axis: Axis::Horizontal,
                        index: k,
                    },
                    ChannelId {
                        axis: Axis::Vertical,
                        index: k,
                    },
                ]
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            spacing,
            roads,
            outgoing,
            layout: MappingMatrixLayout {
                row_order,
                rows: 2 * w,
                cols: spec.cells_per_channel,
            },
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn side(&self) -> usize {
        self.spec.intersections_per_side
    }

    pub fn intersection_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn roads(&self) -> &[Road] {
        &self.roads
    }

    pub fn road(&self, id: RoadId) -> &Road {
        &self.roads[id.0]
    }

    pub fn lane_count(&self) -> usize {
        self.roads.len() * 2
    }

    pub fn lanes(&self) -> impl Iterator<Item = LaneId> + '_ {
        (0..self.lane_count()).map(LaneId::from_index)
    }

    pub fn layout(&self) -> &MappingMatrixLayout {
        &self.layout
    }

    pub fn channel_length(&self) -> f64 {
        self.spec.scene_side_m
    }

    pub fn intersection_point(&self, id: IntersectionId) -> (f64, f64) {
        let w = self.side();
        ((id.0 % w) as f64 * self.spacing, (id.0 / w) as f64 * self.spacing)
    }

    pub fn lane_heading(&self, lane: LaneId) -> Heading {
        match (self.road(lane.road).axis, lane.dir) {
            (Axis::Horizontal, Direction::Forward) => Heading::East,
            (Axis::Horizontal, Direction::Backward) => Heading::West,
            (Axis::Vertical, Direction::Forward) => Heading::North,
            (Axis::Vertical, Direction::Backward) => Heading::South,
        }
    }

    pub fn lane_start(&self, lane: LaneId) -> IntersectionId {
        let r = self.road(lane.road);
        match lane.dir {
            Direction::Forward => r.low,
            Direction::Backward => r.high,
        }
    }

    pub fn lane_end(&self, lane: LaneId) -> IntersectionId {
        let r = self.road(lane.road);
        match lane.dir {
            Direction::Forward => r.high,
            Direction::Backward => r.low,
        }
    }

    pub fn lane_length(&self, lane: LaneId) -> f64 {
        self.road(lane.road).length
    }

    pub fn outgoing_lane(&self, node: IntersectionId, heading: Heading) -> Option<LaneId> {
        self.outgoing[node.0][heading.slot()]
    }

    fn check(&self, pos: RoadPosition) -> Result<&Road, RoadError> {
        let road = self
            .roads
            .get(pos.lane.road.0)
            .ok_or(RoadError::UnknownRoad(pos.lane.road.0))?;
        if !(pos.offset >= 0.0 && pos.offset <= road.length) {
            return Err(RoadError::OffRoad {
                road: road.id.0,
                offset: pos.offset,
                length: road.length,
            });
        }
        Ok(road)
    }

    /// Distance from the start of the position's channel.
    pub fn channel_offset(&self, pos: RoadPosition) -> Result<f64, RoadError> {
        let road = self.check(pos)?;
        Ok(match pos.lane.dir {
            Direction::Forward => road.channel_offset + pos.offset,
            Direction::Backward => road.channel_offset + road.length - pos.offset,
        })
    }

    pub fn point(&self, pos: RoadPosition) -> Result<(f64, f64), RoadError> {
        self.check(pos)?;
        let (x0, y0) = self.intersection_point(self.lane_start(pos.lane));
        let (ux, uy) = self.lane_heading(pos.lane).unit();
        Ok((x0 + ux * pos.offset, y0 + uy * pos.offset))
    }

    /// Channel cell of an on-road position. Cells are half-open intervals
    /// `[c·len/K, (c+1)·len/K)` except the last, which includes the channel end.
    pub fn cell_of(&self, pos: RoadPosition) -> Result<CellIndex, RoadError> {
        let offset = self.channel_offset(pos)?;
        let road = self.road(pos.lane.road);
        let k = self.spec.cells_per_channel;
        let col = ((offset * k as f64 / self.channel_length()).floor() as usize).min(k - 1);
        Ok(CellIndex {
            row: self.layout.row_of(road.channel),
            col,
        })
    }

    /// Turns leaving `node` for a vehicle arriving with `heading`.
    ///
    /// Only turns whose outgoing road exists are valid. With
    /// `dead_end_uturn`, a missing straight road makes `Straight` a U-turn.
    /// The set is never empty: if nothing else is possible `Straight`
    /// becomes a U-turn regardless of the flag.
    pub fn valid_turns(&self, node: IntersectionId, heading: Heading) -> TurnMask {
        let mut mask = [false; 3];
        for turn in Turn::ALL {
            mask[turn.index()] = self.outgoing_lane(node, turned(heading, turn)).is_some();
        }
        if !mask[Turn::Straight.index()]
            && (self.spec.dead_end_uturn || !mask.iter().any(|&b| b))
            && self.outgoing_lane(node, heading.reverse()).is_some()
        {
            mask[Turn::Straight.index()] = true;
        }
        TurnMask(mask)
    }

    /// Lane taken by `turn` at `node`; `None` if the turn is not valid there.
    pub fn resolve_turn(&self, node: IntersectionId, heading: Heading, turn: Turn) -> Option<LaneId> {
        if !self.valid_turns(node, heading).allows(turn) {
            return None;
        }
        self.outgoing_lane(node, turned(heading, turn))
            .or_else(|| self.outgoing_lane(node, heading.reverse()))
    }
}

fn turned(heading: Heading, turn: Turn) -> Heading {
    match turn {
        Turn::Left => heading.left(),
        Turn::Right => heading.right(),
        Turn::Straight => heading,
    }
}
