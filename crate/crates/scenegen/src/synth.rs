//! Procedural synthetic scenario corpus: coherent frame annotations whose
//! distance trajectories realize a sampled criticality, whose AV-action
//! sequence realizes a sampled action group, and whose relative-motion
//! labels agree with the sign of the distance derivative.

use crate::graph::{exclusion_violations, validate_graph};
use crate::ingest::{
    label_windows, window_scenarios, window_to_graph, AnnotationFile, EntityAnnotation,
    FrameAnnotation, LocationRef, ScenarioWindow,
};
use crate::ontology::{AvAction, Criticality, NodeClass, Ontology, RelationType, ALL_AV_ACTIONS};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ANCHORS: [usize; 5] = [0, 5, 10, 15, 20];
const RAW_FRAMES: usize = 25;

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("generator postcondition failed for scenario {scenario}: {message}")]
    Post { scenario: usize, message: String },
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scenarios: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Weights over the seven AV actions, in vocabulary order.
    pub action_weights: [f64; 7],
    /// Weights over Visible, Near, NearCollision.
    pub criticality_weights: [f64; 3],
    pub traffic_light_prob: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenarios: 100,
            agents_min: 1,
            agents_max: 3,
            action_weights: [1.0; 7],
            criticality_weights: [1.0; 3],
            traffic_light_prob: 0.25,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let check = |name: &str, w: &[f64]| {
            if w.iter().any(|x| *x < 0.0) {
                return Err(SynthError::Config(format!("{name} has a negative weight")));
            }
            if !w.iter().any(|x| *x > 0.0) {
                return Err(SynthError::Config(format!("{name} has no positive weight")));
            }
            Ok(())
        };
        check("action_weights", &self.action_weights)?;
        check("criticality_weights", &self.criticality_weights)?;
        if self.agents_min == 0 || self.agents_min > self.agents_max {
            return Err(SynthError::Config(format!(
                "agent count range [{}, {}] is invalid",
                self.agents_min, self.agents_max
            )));
        }
        if !(0.0..=1.0).contains(&self.traffic_light_prob) {
            return Err(SynthError::Config("traffic_light_prob out of [0, 1]".into()));
        }
        Ok(())
    }
}

fn weighted_index(rng: &mut ChaCha12Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Copy, PartialEq)]
enum Placement {
    EgoLane,
    AdjacentLane,
    Oncoming,
    CycleLaneSame,
    Pavement,
    Crossing,
}

struct AgentPlan {
    track: u32,
    cls: NodeClass,
    /// Location per anchor; lane-exit agents switch lanes mid-scenario.
    locations: [LocationRef; 5],
    actions: [Vec<RelationType>; 5],
    distances: [f64; 5],
    light: Option<RelationType>,
}

fn loc(cls: NodeClass) -> LocationRef {
    LocationRef { cls, id: 0 }
}

/// The ego-vehicle's own lane instances carry id 1; agents sharing the
/// ego's lane reference the same instance.
fn ego_loc(cls: NodeClass) -> LocationRef {
    LocationRef { cls, id: 1 }
}

fn base_location(p: Placement) -> LocationRef {
    match p {
        Placement::EgoLane => ego_loc(NodeClass::VehicleLane),
        Placement::AdjacentLane => loc(NodeClass::OutgoingLane),
        Placement::Oncoming => loc(NodeClass::IncomingLane),
        Placement::CycleLaneSame => loc(NodeClass::OutgoingCycleLane),
        Placement::Pavement => loc(NodeClass::Pavement),
        Placement::Crossing => loc(NodeClass::PedestrianCrossing),
    }
}

/// Monotone approach anchors staying inside the given criticality bucket,
/// so the proximity label is constant over tau and the relative motion is
/// MovingTowards throughout.
fn key_distance_pattern(rng: &mut ChaCha12Rng, crit: Criticality) -> [f64; 5] {
    let (d0, step) = match crit {
        Criticality::NearCollision => (rng.random_range(4.3..4.7), 0.5),
        Criticality::Near => (rng.random_range(9.0..9.8), 0.5),
        Criticality::Visible => (rng.random_range(22.0..26.0), 1.0),
    };
    core::array::from_fn(|i| d0 - step * i as f64)
}

/// Monotone receding anchors that never leave the Visible bucket; the
/// relative motion is MovingAway throughout.
fn safe_distance_pattern(rng: &mut ChaCha12Rng) -> [f64; 5] {
    let d0 = rng.random_range(18.0..26.0);
    core::array::from_fn(|i| d0 + i as f64)
}

/// Vehicle motion-state walk over the anchors: Move -> Brake -> Stop -> Move.
fn motion_walk(rng: &mut ChaCha12Rng, start_moving: bool) -> [RelationType; 5] {
    let mut state = if start_moving {
        RelationType::Move
    } else {
        RelationType::Stop
    };
    core::array::from_fn(|_| {
        let current = state;
        state = match state {
            RelationType::Move => {
                if rng.random_bool(0.3) {
                    RelationType::Brake
                } else {
                    RelationType::Move
                }
            }
            RelationType::Brake => {
                if rng.random_bool(0.7) {
                    RelationType::Stop
                } else {
                    RelationType::Brake
                }
            }
            _ => {
                if rng.random_bool(0.3) {
                    RelationType::Move
                } else {
                    RelationType::Stop
                }
            }
        };
        current
    })
}

fn plan_agent(
    rng: &mut ChaCha12Rng,
    track: u32,
    cls: NodeClass,
    is_key: bool,
    crit: Criticality,
) -> AgentPlan {
    let encounter = crit != Criticality::Visible;
    let placement = if is_key {
        match cls {
            NodeClass::Pedestrian => {
                if encounter {
                    Placement::Crossing
                } else {
                    Placement::Pavement
                }
            }
            NodeClass::Cyclist => {
                if encounter {
                    Placement::EgoLane
                } else {
                    Placement::CycleLaneSame
                }
            }
            _ => Placement::EgoLane,
        }
    } else {
        // Non-key agents recede in the Visible band; their placements stay
        // off the collision-relevant trajectories.
        match cls {
            NodeClass::Pedestrian => Placement::Pavement,
            NodeClass::Cyclist => Placement::CycleLaneSame,
            _ => {
                let r: f64 = rng.random_range(0.0..1.0);
                if r < 0.6 {
                    Placement::EgoLane
                } else if r < 0.85 {
                    Placement::AdjacentLane
                } else {
                    Placement::Oncoming
                }
            }
        }
    };

    let distances = if is_key {
        key_distance_pattern(rng, crit)
    } else {
        safe_distance_pattern(rng)
    };

    let mut locations: [LocationRef; 5] = core::array::from_fn(|_| base_location(placement));
    let mut actions: [Vec<RelationType>; 5] = match placement {
        Placement::EgoLane => core::array::from_fn(|_| vec![RelationType::Move]),
        Placement::Crossing => core::array::from_fn(|_| vec![RelationType::Cross]),
        Placement::Pavement => {
            let walk = motion_walk(rng, true);
            core::array::from_fn(|i| {
                vec![if walk[i] == RelationType::Brake {
                    RelationType::Move
                } else {
                    walk[i]
                }]
            })
        }
        Placement::CycleLaneSame => core::array::from_fn(|_| vec![RelationType::Move]),
        Placement::AdjacentLane | Placement::Oncoming => {
            let start_moving = rng.random_bool(0.8);
            let walk = motion_walk(rng, start_moving);
            core::array::from_fn(|i| vec![walk[i]])
        }
    };

    // Ego-lane vehicles occasionally pull out into the adjacent lane.
    if placement == Placement::EgoLane
        && cls != NodeClass::Cyclist
        && rng.random_bool(0.2)
    {
        locations[3] = loc(NodeClass::OutgoingLane);
        locations[4] = loc(NodeClass::OutgoingLane);
        actions[2].push(RelationType::IndicateLeft);
    }

    AgentPlan {
        track,
        cls,
        locations,
        actions,
        distances,
        light: None,
    }
}

fn ego_locations(action: AvAction) -> [LocationRef; 5] {
    // Turning scenarios play out at a junction; everything else stays in
    // the ego's own vehicle lane.
    match action {
        AvAction::TurnLeft | AvAction::TurnRight => [ego_loc(NodeClass::Junction); 5],
        _ => [ego_loc(NodeClass::VehicleLane); 5],
    }
}

fn anchor_of(frame: usize) -> usize {
    ANCHORS
        .iter()
        .rposition(|a| *a <= frame)
        .expect("frame 0 is an anchor")
}

fn interpolated_distance(distances: &[f64; 5], frame: usize) -> f64 {
    let a = anchor_of(frame);
    if a + 1 >= ANCHORS.len() {
        return distances[4];
    }
    let t0 = ANCHORS[a] as f64;
    let t1 = ANCHORS[a + 1] as f64;
    let alpha = (frame as f64 - t0) / (t1 - t0);
    distances[a] * (1.0 - alpha) + distances[a + 1] * alpha
}

/// Generates `cfg.n_scenarios` coherent annotation sequences. Deterministic
/// given the config seed; every scenario is checked against the graph
/// pipeline before being returned.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    ont: &Ontology,
) -> Result<Vec<AnnotationFile>, SynthError> {
    cfg.validate()?;
    let class_pool = [
        (NodeClass::Car, 0.50),
        (NodeClass::Pedestrian, 0.20),
        (NodeClass::Cyclist, 0.12),
        (NodeClass::Motorbike, 0.10),
        (NodeClass::Bus, 0.08),
    ];
    let class_weights: Vec<f64> = class_pool.iter().map(|(_, w)| *w).collect();

    let mut out = Vec::with_capacity(cfg.n_scenarios);
    for i in 0..cfg.n_scenarios {
        let mut rng = ChaCha12Rng::seed_from_u64(
            cfg.rng_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let action = ALL_AV_ACTIONS[weighted_index(&mut rng, &cfg.action_weights)];
        let crit = crate::ontology::ALL_CRITICALITIES
            [weighted_index(&mut rng, &cfg.criticality_weights)];
        let n_agents = rng.random_range(cfg.agents_min..=cfg.agents_max);

        let mut agents = Vec::new();
        for a in 0..n_agents {
            let cls = class_pool[weighted_index(&mut rng, &class_weights)].0;
            agents.push(plan_agent(&mut rng, a as u32 + 1, cls, a == 0, crit));
        }
        if rng.random_bool(cfg.traffic_light_prob) {
            let colour = match weighted_index(&mut rng, &[0.4, 0.15, 0.45]) {
                0 => RelationType::Red,
                1 => RelationType::Amber,
                _ => RelationType::Green,
            };
            let d0 = rng.random_range(13.5..15.5);
            agents.push(AgentPlan {
                track: n_agents as u32 + 1,
                cls: NodeClass::TrafficLight,
                locations: core::array::from_fn(|_| loc(NodeClass::Junction)),
                actions: core::array::from_fn(|_| vec![]),
                distances: core::array::from_fn(|i| d0 - 0.5 * i as f64),
                light: Some(colour),
            });
        }

        let switch_anchor = if action == AvAction::Move {
            0
        } else {
            rng.random_range(0..=3usize)
        };
        let ego_locs = ego_locations(action);

        let mut frames = Vec::with_capacity(RAW_FRAMES);
        for t in 0..RAW_FRAMES {
            let anchor = anchor_of(t);
            let av_action = if anchor < switch_anchor {
                AvAction::Move
            } else {
                action
            };
            let mut entities = Vec::new();
            for plan in &agents {
                let d = interpolated_distance(&plan.distances, t);
                let d_next = if t + 1 < RAW_FRAMES {
                    interpolated_distance(&plan.distances, t + 1)
                } else {
                    d
                };
                let d_prev = if t > 0 {
                    interpolated_distance(&plan.distances, t - 1)
                } else {
                    d
                };
                let diff = if t + 1 < RAW_FRAMES { d_next - d } else { d - d_prev };
                let relative_motion = if plan.cls == NodeClass::TrafficLight {
                    None
                } else if diff > 1e-9 {
                    Some(RelationType::MovingAway)
                } else if diff < -1e-9 {
                    Some(RelationType::MovingTowards)
                } else {
                    None
                };
                entities.push(EntityAnnotation {
                    track: plan.track,
                    cls: plan.cls,
                    location: Some(plan.locations[anchor]),
                    actions: plan.actions[anchor].clone(),
                    light: plan.light,
                    distance_m: Some(d),
                    proximity: None,
                    relative_motion,
                });
            }
            frames.push(FrameAnnotation {
                frame_index: t as u32,
                av_action: Some(av_action),
                av_location: Some(ego_locs[anchor]),
                entities,
            });
        }

        let file = AnnotationFile {
            video_id: format!("synth-{i:05}"),
            frames,
        };
        check_scenario(&file, i, action, crit, ont)?;
        out.push(file);
    }
    Ok(out)
}

fn check_scenario(
    file: &AnnotationFile,
    scenario: usize,
    action: AvAction,
    crit: Criticality,
    ont: &Ontology,
) -> Result<(), SynthError> {
    let post = |message: String| SynthError::Post { scenario, message };
    let windows = window_scenarios(&file.frames, crate::ingest::DOWNSAMPLE, crate::ingest::WINDOW);
    if windows.len() != 1 {
        return Err(post(format!("expected 1 window, got {}", windows.len())));
    }
    let labeled = label_windows(windows).map_err(SynthError::Ingest)?;
    let graph = window_to_graph(&labeled[0], ont).map_err(SynthError::Ingest)?;
    if graph.av_action != Some(action) {
        return Err(post(format!(
            "AV action {:?} != sampled {action}",
            graph.av_action
        )));
    }
    if graph.criticality != Some(crit) {
        return Err(post(format!(
            "criticality {:?} != sampled {crit}",
            graph.criticality
        )));
    }
    validate_graph(&graph, ont).map_err(|e| post(format!("graph invalid: {e}")))?;
    let violations = exclusion_violations(&graph, ont);
    if !violations.is_empty() {
        return Err(post(format!("exclusion violations: {violations:?}")));
    }
    Ok(())
}

/// Windows every generated annotation sequence (one window each).
pub fn synth_windows(
    files: &[AnnotationFile],
) -> Result<Vec<ScenarioWindow>, crate::ingest::IngestError> {
    let mut windows = Vec::with_capacity(files.len());
    for f in files {
        let w = window_scenarios(&f.frames, crate::ingest::DOWNSAMPLE, crate::ingest::WINDOW);
        windows.extend(label_windows(w)?);
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::derive_criticality;

    #[test]
    fn zero_scenarios() {
        let cfg = SynthConfig {
            n_scenarios: 0,
            ..SynthConfig::default()
        };
        let files = generate_synthetic(&cfg, Ontology::builtin()).unwrap();
        assert!(files.is_empty());
    }

    #[test]
    fn forced_criticality_realized() {
        let cfg = SynthConfig {
            n_scenarios: 24,
            criticality_weights: [0.0, 0.0, 1.0],
            rng_seed: 5,
            ..SynthConfig::default()
        };
        let ont = Ontology::builtin();
        let files = generate_synthetic(&cfg, ont).unwrap();
        assert_eq!(files.len(), 24);
        for f in &files {
            let windows = synth_windows(std::slice::from_ref(f)).unwrap();
            let g = window_to_graph(&windows[0], ont).unwrap();
            assert_eq!(derive_criticality(&g, ont), Criticality::NearCollision);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            n_scenarios: 6,
            rng_seed: 123,
            ..SynthConfig::default()
        };
        let ont = Ontology::builtin();
        let a = generate_synthetic(&cfg, ont).unwrap();
        let b = generate_synthetic(&cfg, ont).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            criticality_weights: [0.0, 0.0, 0.0],
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, Ontology::builtin()),
            Err(SynthError::Config(_))
        ));
        let cfg = SynthConfig {
            agents_min: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, Ontology::builtin()).is_err());
    }

    #[test]
    fn graphs_pass_validation_fuzz() {
        let cfg = SynthConfig {
            n_scenarios: 200,
            rng_seed: 77,
            ..SynthConfig::default()
        };
        let ont = Ontology::builtin();
        // generate_synthetic itself validates every scenario.
        let files = generate_synthetic(&cfg, ont).unwrap();
        assert_eq!(files.len(), 200);
    }
}
