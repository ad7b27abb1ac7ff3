//! On-demand request serving and scenario compilation: database seed
//! sampling, conditioning reintroduction, prediction, and the mapping from
//! predicted temporal graphs to executable scenario scripts.

use crate::graph::{Edge, Flavor, Node, SeedDatabase, TemporalGraph, Uid, TAU_STEPS};
use crate::model::Model;
use crate::ontology::{AvAction, Criticality, NodeClass, Ontology, RelationType};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ScenarioError {
    #[error("request must name at least one agent")]
    EmptyRequest,
    #[error("{0} is not a requestable agent class")]
    BadAgentClass(NodeClass),
    #[error("actor track {track} has no IsIn edge; cannot place it")]
    ActorWithoutLocation { track: u32 },
    #[error("graph is missing conditioning ({0})")]
    MissingConditioning(&'static str),
    #[error("no lane realizes location class {0}")]
    NoLaneForClass(NodeClass),
    #[error("script references unknown lane {0}")]
    UnknownLane(i32),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// A user's scenario query: dynamic agents, AV action, criticality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioRequest {
    pub agents: Vec<NodeClass>,
    pub av_action: AvAction,
    pub criticality: Criticality,
    pub seed: u64,
}

impl ScenarioRequest {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents.is_empty() {
            return Err(ScenarioError::EmptyRequest);
        }
        for cls in &self.agents {
            if !cls.is_agent() || *cls == NodeClass::Ego {
                return Err(ScenarioError::BadAgentClass(*cls));
            }
        }
        Ok(())
    }
}

/// Inserts the criticality node + link and the AV-action self-loop into a
/// database seed, producing the Seed-flavored model input.
pub fn reintroduce_conditioning(
    db_seed: &TemporalGraph,
    av_action: AvAction,
    criticality: Criticality,
) -> Result<TemporalGraph, ScenarioError> {
    let mut g = db_seed.clone();
    let ego = g
        .ego_uid()
        .ok_or(ScenarioError::MissingConditioning("EGO node"))?;
    let next_uid: Uid = g.nodes.iter().map(|n| n.uid).max().map_or(0, |u| u + 1);
    g.nodes.push(Node {
        uid: next_uid,
        track: next_uid,
        cls: criticality.node_class(),
    });
    g.edges.push(Edge {
        src: next_uid,
        dst: ego,
        rel: RelationType::CriticalityLink,
        tau: 0,
    });
    g.edges.push(Edge {
        src: ego,
        dst: ego,
        rel: av_action.relation(),
        tau: 0,
    });
    g.av_action = Some(av_action);
    g.criticality = Some(criticality);
    g.flavor = Flavor::Seed;
    Ok(g)
}

/// Serves one request: samples a database seed by agent multiset,
/// reintroduces the requested conditioning, and predicts the scenario graph.
pub fn handle_request(
    req: &ScenarioRequest,
    db: &SeedDatabase,
    model: &Model,
    ont: &Ontology,
) -> Result<TemporalGraph, ScenarioError> {
    req.validate()?;
    let entry = db.sample(&req.agents, req.seed)?;
    let seed = reintroduce_conditioning(entry, req.av_action, req.criticality)?;
    let predicted = model.predict(&seed, ont)?;
    Ok(predicted)
}

/// Builds a batch of requests with evenly distributed criticality levels
/// and a car-heavy agent mix.
pub fn evenly_distributed_requests(n: usize, seed: u64) -> Vec<ScenarioRequest> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let combos: [&[NodeClass]; 6] = [
        &[NodeClass::Car],
        &[NodeClass::Car, NodeClass::Pedestrian],
        &[NodeClass::Car, NodeClass::Car],
        &[NodeClass::Car, NodeClass::Cyclist],
        &[NodeClass::Pedestrian],
        &[NodeClass::Car, NodeClass::Bus],
    ];
    (0..n)
        .map(|i| {
            let criticality = crate::ontology::ALL_CRITICALITIES[i % 3];
            let agents = combos[rng.random_range(0..combos.len())].to_vec();
            let av_action =
                crate::ontology::ALL_AV_ACTIONS[rng.random_range(0..7)];
            ScenarioRequest {
                agents,
                av_action,
                criticality,
                seed: seed.wrapping_add(i as u64 * 7919),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lane layout
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Handedness {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneDirection {
    SameDirection,
    Oncoming,
    Static,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LaneDef {
    pub id: i32,
    pub cls: NodeClass,
    pub direction: LaneDirection,
    pub center_y_m: f64,
    pub width_m: f64,
}

/// Minimal parametric road: enough lanes to realize every location class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapLayout {
    pub lanes: Vec<LaneDef>,
    pub handedness: Handedness,
}

impl MapLayout {
    pub fn standard(handedness: Handedness) -> MapLayout {
        use LaneDirection::*;
        let lane = |id, cls, direction, center_y_m: f64, width_m| LaneDef {
            id,
            cls,
            direction,
            center_y_m,
            width_m,
        };
        let right = MapLayout {
            handedness: Handedness::Right,
            lanes: vec![
                lane(-1, NodeClass::VehicleLane, SameDirection, -1.75, 3.5),
                lane(-2, NodeClass::OutgoingLane, SameDirection, -7.25, 3.5),
                lane(-3, NodeClass::OutgoingCycleLane, SameDirection, -12.75, 1.5),
                lane(-4, NodeClass::Pavement, Static, -13.75, 2.0),
                lane(-5, NodeClass::BusStop, Static, -15.0, 2.5),
                lane(-6, NodeClass::Parking, Static, -16.5, 2.5),
                lane(1, NodeClass::IncomingLane, Oncoming, 3.75, 3.5),
                lane(2, NodeClass::IncomingCycleLane, Oncoming, 11.0, 1.5),
                lane(8, NodeClass::Junction, Static, 0.0, 12.0),
                lane(9, NodeClass::PedestrianCrossing, Static, 0.0, 4.0),
            ],
        };
        match handedness {
            Handedness::Right => right,
            Handedness::Left => right.mirrored(),
        }
    }

    pub fn mirrored(&self) -> MapLayout {
        MapLayout {
            handedness: match self.handedness {
                Handedness::Left => Handedness::Right,
                Handedness::Right => Handedness::Left,
            },
            lanes: self
                .lanes
                .iter()
                .map(|l| LaneDef {
                    id: -l.id,
                    center_y_m: -l.center_y_m,
                    ..l.clone()
                })
                .collect(),
        }
    }

    pub fn lane_for_class(&self, cls: NodeClass) -> Option<&LaneDef> {
        self.lanes.iter().find(|l| l.cls == cls)
    }

    pub fn lane(&self, id: i32) -> Option<&LaneDef> {
        self.lanes.iter().find(|l| l.id == id)
    }
}

// ---------------------------------------------------------------------------
// Scripts
// ---------------------------------------------------------------------------

/// Longitudinal spawn offset magnitude per criticality, metres from the ego.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnBands {
    pub near_collision_m: f64,
    pub near_m: f64,
    pub visible_m: f64,
}

impl Default for SpawnBands {
    fn default() -> Self {
        SpawnBands {
            near_collision_m: 4.0,
            near_m: 8.0,
            visible_m: 20.0,
        }
    }
}

impl SpawnBands {
    pub fn band(&self, crit: Criticality) -> f64 {
        match crit {
            Criticality::NearCollision => self.near_collision_m,
            Criticality::Near => self.near_m,
            Criticality::Visible => self.visible_m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    SameDirection,
    Oncoming,
    Crossing,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BehaviorStep {
    pub tau: u8,
    pub action: RelationType,
    pub target_speed: f64,
    pub lane: i32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActorSpec {
    pub track: u32,
    pub cls: NodeClass,
    /// Spawn lane and signed longitudinal offset from the ego, metres.
    pub spawn: (i32, f64),
    /// Goal lane and projected terminal offset.
    pub goal: (i32, f64),
    pub heading: Heading,
    pub timeline: Vec<BehaviorStep>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EgoPlan {
    pub lanes: [i32; TAU_STEPS],
    pub speed_fractions: [f64; TAU_STEPS],
    pub av_action: AvAction,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub map: MapLayout,
    pub ego: EgoPlan,
    pub actors: Vec<ActorSpec>,
    pub criticality: Criticality,
    pub handedness: Handedness,
    /// Seconds between consecutive tau slices.
    pub tau_interval_s: f64,
}

/// Default time between tau slices: one 5-frame scenario step of 12 fps
/// footage downsampled 5-fold spans 25 raw frames over the whole scenario.
pub const DEFAULT_TAU_INTERVAL_S: f64 = 25.0 / 12.0;

fn base_speed(cls: NodeClass) -> f64 {
    match cls {
        NodeClass::Car => 8.0,
        NodeClass::Bus => 7.0,
        NodeClass::Motorbike => 9.0,
        NodeClass::Cyclist => 4.0,
        NodeClass::Pedestrian => 1.4,
        _ => 0.0,
    }
}

fn action_speed(cls: NodeClass, action: RelationType) -> f64 {
    match action {
        RelationType::Move => base_speed(cls),
        RelationType::Brake => 0.4 * base_speed(cls),
        RelationType::Stop => 0.0,
        RelationType::Cross => 1.2,
        _ => base_speed(cls),
    }
}

fn ego_speed_fractions(action: AvAction) -> [f64; TAU_STEPS] {
    match action {
        AvAction::Stop => [1.0, 0.6, 0.0, 0.0, 0.0],
        AvAction::TurnLeft | AvAction::TurnRight => [1.0, 1.0, 0.6, 0.6, 1.0],
        _ => [1.0; TAU_STEPS],
    }
}

/// Compiles a predicted scenario graph into an executable script: spawn and
/// goal lanes from IsIn edges, spawn offsets from the criticality band,
/// headings from lane direction classes, and per-tau behavior timelines
/// from action self-edges.
pub fn graph_to_script(
    g: &TemporalGraph,
    bands: &SpawnBands,
    handedness: Handedness,
    _ont: &Ontology,
) -> Result<ScenarioScript, ScenarioError> {
    let criticality = g
        .criticality
        .ok_or(ScenarioError::MissingConditioning("criticality"))?;
    let av_action = g
        .av_action
        .ok_or(ScenarioError::MissingConditioning("AV action"))?;
    let ego = g
        .ego_uid()
        .ok_or(ScenarioError::MissingConditioning("EGO node"))?;
    let map = MapLayout::standard(handedness);
    let lane_id = |cls: NodeClass| -> Result<i32, ScenarioError> {
        map.lane_for_class(cls)
            .map(|l| l.id)
            .ok_or(ScenarioError::NoLaneForClass(cls))
    };

    // Ego lane timeline from its IsIn edges; defaults to the vehicle lane.
    let default_ego_lane = lane_id(NodeClass::VehicleLane)?;
    let mut ego_lanes = [default_ego_lane; TAU_STEPS];
    for tau in 0..TAU_STEPS {
        let loc = g.edges.iter().find_map(|e| {
            (e.src == ego && e.rel == RelationType::IsIn && e.tau as usize == tau)
                .then(|| g.class_of(e.dst))
                .flatten()
        });
        ego_lanes[tau] = match loc {
            Some(cls) => lane_id(cls)?,
            None => {
                if tau > 0 {
                    ego_lanes[tau - 1]
                } else {
                    default_ego_lane
                }
            }
        };
    }

    let mut actors = Vec::new();
    for node in &g.nodes {
        if !node.cls.is_dynamic_agent() {
            continue;
        }
        // Location class per tau from IsIn edges.
        let mut locs: [Option<NodeClass>; TAU_STEPS] = [None; TAU_STEPS];
        for e in &g.edges {
            if e.src == node.uid && e.rel == RelationType::IsIn {
                if let Some(cls) = g.class_of(e.dst) {
                    locs[e.tau as usize] = Some(cls);
                }
            }
        }
        let first = locs
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or(ScenarioError::ActorWithoutLocation { track: node.track })?;
        let last = locs.iter().flatten().last().copied().unwrap_or(first);
        let spawn_cls = locs[0].unwrap_or(first);
        let spawn_lane = lane_id(spawn_cls)?;
        let goal_lane = lane_id(last)?;

        let heading = match spawn_cls {
            NodeClass::IncomingLane | NodeClass::IncomingCycleLane => Heading::Oncoming,
            NodeClass::PedestrianCrossing => Heading::Crossing,
            _ => Heading::SameDirection,
        };

        let motion_at_0 = g.edges.iter().find_map(|e| {
            (e.src == node.uid && e.dst == ego && e.tau == 0 && e.rel.is_relative_motion())
                .then_some(e.rel)
        });
        let towards = motion_at_0 == Some(RelationType::MovingTowards);
        let away = motion_at_0 == Some(RelationType::MovingAway);
        let ahead = match heading {
            Heading::Oncoming => !away,
            Heading::SameDirection => {
                // Overtaking context: closing in on an adjacent lane starts
                // behind the ego; everything else spawns ahead.
                !(towards && spawn_lane != ego_lanes[0])
            }
            Heading::Crossing => true,
        };
        let offset = if ahead {
            bands.band(criticality)
        } else {
            -bands.band(criticality)
        };

        // Behavior timeline from motion-state and crossing self-edges.
        let mut timeline = Vec::with_capacity(TAU_STEPS);
        let mut current_action = RelationType::Move;
        let mut current_lane = spawn_lane;
        for tau in 0..TAU_STEPS {
            let actions: Vec<RelationType> = g
                .edges
                .iter()
                .filter(|e| {
                    e.src == node.uid
                        && e.dst == node.uid
                        && e.tau as usize == tau
                        && e.rel.is_agent_action()
                })
                .map(|e| e.rel)
                .collect();
            if actions.contains(&RelationType::Cross) {
                current_action = RelationType::Cross;
            } else if let Some(motion) = actions.iter().find(|a| {
                matches!(a, RelationType::Move | RelationType::Brake | RelationType::Stop)
            }) {
                current_action = *motion;
            }
            if let Some(cls) = locs[tau] {
                current_lane = lane_id(cls)?;
            }
            timeline.push(BehaviorStep {
                tau: tau as u8,
                action: current_action,
                target_speed: action_speed(node.cls, current_action),
                lane: current_lane,
            });
        }

        let travelled: f64 = timeline
            .iter()
            .map(|s| s.target_speed * DEFAULT_TAU_INTERVAL_S)
            .sum();
        let direction = match heading {
            Heading::Oncoming => -1.0,
            _ => 1.0,
        };
        actors.push(ActorSpec {
            track: node.track,
            cls: node.cls,
            spawn: (spawn_lane, offset),
            goal: (goal_lane, offset + direction * travelled),
            heading,
            timeline,
        });
    }

    Ok(ScenarioScript {
        map,
        ego: EgoPlan {
            lanes: ego_lanes,
            speed_fractions: ego_speed_fractions(av_action),
            av_action,
        },
        actors,
        criticality,
        handedness,
        tau_interval_s: DEFAULT_TAU_INTERVAL_S,
    })
}

fn mirror_relation(rel: RelationType) -> RelationType {
    match rel {
        RelationType::IndicateLeft => RelationType::IndicateRight,
        RelationType::IndicateRight => RelationType::IndicateLeft,
        RelationType::TurnLeft => RelationType::TurnRight,
        RelationType::TurnRight => RelationType::TurnLeft,
        other => other,
    }
}

fn mirror_av_action(action: AvAction) -> AvAction {
    match action {
        AvAction::MoveLeft => AvAction::MoveRight,
        AvAction::MoveRight => AvAction::MoveLeft,
        AvAction::TurnLeft => AvAction::TurnRight,
        AvAction::TurnRight => AvAction::TurnLeft,
        other => other,
    }
}

/// Mirrors the topological information: lane sides, lateral geometry,
/// left/right action labels, and the handedness flag.
pub fn mirror(script: &ScenarioScript) -> ScenarioScript {
    ScenarioScript {
        map: script.map.mirrored(),
        ego: EgoPlan {
            lanes: core::array::from_fn(|i| -script.ego.lanes[i]),
            speed_fractions: script.ego.speed_fractions,
            av_action: mirror_av_action(script.ego.av_action),
        },
        actors: script
            .actors
            .iter()
            .map(|a| ActorSpec {
                track: a.track,
                cls: a.cls,
                spawn: (-a.spawn.0, a.spawn.1),
                goal: (-a.goal.0, a.goal.1),
                heading: a.heading,
                timeline: a
                    .timeline
                    .iter()
                    .map(|s| BehaviorStep {
                        tau: s.tau,
                        action: mirror_relation(s.action),
                        target_speed: s.target_speed,
                        lane: -s.lane,
                    })
                    .collect(),
            })
            .collect(),
        criticality: script.criticality,
        handedness: match script.handedness {
            Handedness::Left => Handedness::Right,
            Handedness::Right => Handedness::Left,
        },
        tau_interval_s: script.tau_interval_s,
    }
}

/// Script structural checks: every referenced lane exists, exactly one ego.
pub fn validate_script(script: &ScenarioScript) -> Result<(), ScenarioError> {
    let check_lane = |id: i32| -> Result<(), ScenarioError> {
        script
            .map
            .lane(id)
            .map(|_| ())
            .ok_or(ScenarioError::UnknownLane(id))
    };
    for lane in script.ego.lanes {
        check_lane(lane)?;
    }
    for actor in &script.actors {
        check_lane(actor.spawn.0)?;
        check_lane(actor.goal.0)?;
        for step in &actor.timeline {
            check_lane(step.lane)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_temporal_graph, prune_to_seed, validate_graph};
    use crate::ingest::window_to_graph;
    use crate::model::{Model, ModelConfig};
    use crate::synth::{generate_synthetic, synth_windows, SynthConfig};

    fn sample_graphs(n: usize, seed: u64) -> Vec<TemporalGraph> {
        let ont = Ontology::builtin();
        let cfg = SynthConfig {
            n_scenarios: n,
            rng_seed: seed,
            ..SynthConfig::default()
        };
        let files = generate_synthetic(&cfg, ont).unwrap();
        synth_windows(&files)
            .unwrap()
            .iter()
            .map(|w| window_to_graph(w, ont).unwrap())
            .collect()
    }

    fn sample_db(n: usize, seed: u64) -> SeedDatabase {
        let ont = Ontology::builtin();
        let mut db = SeedDatabase::new();
        for g in sample_graphs(n, seed) {
            db.insert(prune_to_seed(&g, false), ont).unwrap();
        }
        db
    }

    #[test]
    fn conditioning_reintroduction() {
        let ont = Ontology::builtin();
        let db = sample_db(5, 3);
        let entry = &db.entries()[0];
        let seed =
            reintroduce_conditioning(entry, AvAction::Stop, Criticality::NearCollision).unwrap();
        assert_eq!(seed.av_action, Some(AvAction::Stop));
        assert_eq!(seed.criticality, Some(Criticality::NearCollision));
        assert!(seed.action_edge_index().is_some());
        assert!(seed.criticality_edge_index().is_some());
        validate_graph(&seed, ont).unwrap();
    }

    #[test]
    fn request_round_trip_and_determinism() {
        let ont = Ontology::builtin();
        let db = sample_db(10, 7);
        let model = Model::init(
            ModelConfig {
                rng_seed: 1,
                mlp_gat: vec![64, 32, 256],
                ..ModelConfig::default()
            },
            ont,
        )
        .unwrap();
        let req = ScenarioRequest {
            agents: vec![NodeClass::Car],
            av_action: AvAction::Stop,
            criticality: Criticality::NearCollision,
            seed: 11,
        };
        let a = handle_request(&req, &db, &model, ont).unwrap();
        assert_eq!(a.criticality, Some(Criticality::NearCollision));
        assert_eq!(a.av_action, Some(AvAction::Stop));
        let crit_node = a
            .nodes
            .iter()
            .find(|n| n.cls.is_criticality_marker())
            .unwrap();
        assert_eq!(crit_node.cls, NodeClass::NearCollision);

        let b = handle_request(&req, &db, &model, ont).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let bad = ScenarioRequest {
            agents: vec![],
            ..req.clone()
        };
        assert!(matches!(
            handle_request(&bad, &db, &model, ont),
            Err(ScenarioError::EmptyRequest)
        ));
        let bad = ScenarioRequest {
            agents: vec![NodeClass::VehicleLane],
            ..req
        };
        assert!(matches!(
            handle_request(&bad, &db, &model, ont),
            Err(ScenarioError::BadAgentClass(_))
        ));
    }

    #[test]
    fn two_pedestrians_stay_distinct() {
        let ont = Ontology::builtin();
        // Find a db with a two-pedestrian entry by forcing agent classes.
        let mut db = SeedDatabase::new();
        for g in sample_graphs(40, 21) {
            db.insert(prune_to_seed(&g, false), ont).unwrap();
        }
        let model = Model::init(
            ModelConfig {
                mlp_gat: vec![64, 32, 256],
                ..ModelConfig::default()
            },
            ont,
        )
        .unwrap();
        let req = ScenarioRequest {
            agents: vec![NodeClass::Pedestrian, NodeClass::Pedestrian],
            av_action: AvAction::Move,
            criticality: Criticality::Near,
            seed: 5,
        };
        let g = handle_request(&req, &db, &model, ont).unwrap();
        let peds: Vec<&Node> = g
            .nodes
            .iter()
            .filter(|n| n.cls == NodeClass::Pedestrian)
            .collect();
        assert!(peds.len() >= 2);
        assert_ne!(peds[0].uid, peds[1].uid);
    }

    #[test]
    fn script_spawn_bands_and_headings() {
        let ont = Ontology::builtin();
        let graphs = sample_graphs(30, 33);
        let bands = SpawnBands::default();
        for g in &graphs {
            let script = graph_to_script(g, &bands, Handedness::Right, ont).unwrap();
            validate_script(&script).unwrap();
            assert_eq!(script.actors.len(), g.nodes.iter().filter(|n| n.cls.is_dynamic_agent()).count());
            let expected = bands.band(g.criticality.unwrap());
            for actor in &script.actors {
                assert_eq!(actor.spawn.1.abs(), expected, "criticality band");
                let spawn_cls = script.map.lane(actor.spawn.0).unwrap().cls;
                match spawn_cls {
                    NodeClass::IncomingLane | NodeClass::IncomingCycleLane => {
                        assert_eq!(actor.heading, Heading::Oncoming)
                    }
                    NodeClass::PedestrianCrossing => assert_eq!(actor.heading, Heading::Crossing),
                    _ => assert_eq!(actor.heading, Heading::SameDirection),
                }
            }
        }
    }

    #[test]
    fn oncoming_cyclist_heads_oncoming() {
        let ont = Ontology::builtin();
        use crate::ingest::{EntityAnnotation, FrameAnnotation, LocationRef};
        let frames: Vec<_> = (0..5)
            .map(|i| {
                crate::graph::build_frame_graph(
                    &FrameAnnotation {
                        frame_index: i,
                        av_action: Some(AvAction::Move),
                        av_location: Some(LocationRef {
                            cls: NodeClass::VehicleLane,
                            id: 0,
                        }),
                        entities: vec![EntityAnnotation {
                            track: 1,
                            cls: NodeClass::Cyclist,
                            location: Some(LocationRef {
                                cls: NodeClass::IncomingCycleLane,
                                id: 0,
                            }),
                            actions: vec![RelationType::Move],
                            light: None,
                            distance_m: Some(20.0 - i as f64),
                            proximity: None,
                            relative_motion: Some(RelationType::MovingTowards),
                        }],
                    },
                    ont,
                )
                .unwrap()
            })
            .collect();
        let g = build_temporal_graph(&frames, ont).unwrap();
        let script = graph_to_script(&g, &SpawnBands::default(), Handedness::Right, ont).unwrap();
        assert_eq!(script.actors[0].heading, Heading::Oncoming);
        // Oncoming and moving towards: spawns ahead.
        assert!(script.actors[0].spawn.1 > 0.0);
        // Same spawn and goal lane: no lane change in the timeline.
        let lanes: std::collections::BTreeSet<i32> =
            script.actors[0].timeline.iter().map(|s| s.lane).collect();
        assert_eq!(lanes.len(), 1);
    }

    #[test]
    fn actor_without_location_is_an_error() {
        let ont = Ontology::builtin();
        let g = sample_graphs(1, 40).remove(0);
        let mut broken = g.clone();
        // Strip every IsIn edge of the first dynamic agent.
        let agent = broken
            .nodes
            .iter()
            .find(|n| n.cls.is_dynamic_agent())
            .unwrap()
            .uid;
        broken
            .edges
            .retain(|e| !(e.src == agent && e.rel == RelationType::IsIn));
        match graph_to_script(&broken, &SpawnBands::default(), Handedness::Right, ont) {
            Err(ScenarioError::ActorWithoutLocation { .. }) => {}
            other => panic!("expected ActorWithoutLocation, got {other:?}"),
        }
    }

    #[test]
    fn mirror_is_involution_and_flips_labels() {
        let ont = Ontology::builtin();
        let g = sample_graphs(6, 50)
            .into_iter()
            .find(|g| g.av_action == Some(AvAction::TurnRight) || g.av_action == Some(AvAction::TurnLeft))
            .unwrap_or_else(|| sample_graphs(1, 51).remove(0));
        let script = graph_to_script(&g, &SpawnBands::default(), Handedness::Right, ont).unwrap();
        let mirrored = mirror(&script);
        assert_ne!(mirrored.handedness, script.handedness);
        if script.ego.av_action == AvAction::TurnRight {
            assert_eq!(mirrored.ego.av_action, AvAction::TurnLeft);
        }
        for (a, b) in script.actors.iter().zip(&mirrored.actors) {
            assert_eq!(a.spawn.0, -b.spawn.0);
        }
        let twice = mirror(&mirrored);
        assert_eq!(
            serde_json::to_string(&script).unwrap(),
            serde_json::to_string(&twice).unwrap()
        );
    }

    #[test]
    fn spawn_band_monotonicity() {
        let bands = SpawnBands::default();
        assert!(bands.band(Criticality::NearCollision) < bands.band(Criticality::Near));
        assert!(bands.band(Criticality::Near) < bands.band(Criticality::Visible));
    }

    #[test]
    fn even_request_batches() {
        let reqs = evenly_distributed_requests(30, 9);
        assert_eq!(reqs.len(), 30);
        for crit in crate::ontology::ALL_CRITICALITIES {
            assert_eq!(reqs.iter().filter(|r| r.criticality == crit).count(), 10);
        }
        for r in &reqs {
            r.validate().unwrap();
        }
    }
}
