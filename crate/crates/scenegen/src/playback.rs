//! Deterministic kinematic playback: scripted actors follow their spawn,
//! heading, and per-tau behavior timelines while the ego drives its route
//! under a reactive policy; the run reports minimum ego-actor distance and
//! the realized criticality bucket.

use crate::ingest::proximity_from_distance;
use crate::eval::{scenario_consistency_rate, ScrReport};
use crate::ontology::Criticality;
use crate::scenario::{Heading, ScenarioScript};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum PlaybackError {
    #[error("script references unknown lane {0}")]
    UnknownLane(i32),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
}

/// Reactive ego controller parameters. The three presets are strictly
/// ordered in conservatism.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoPolicy {
    pub name: String,
    pub target_speed: f64,
    pub ttc_threshold_s: f64,
    pub decel: f64,
    pub accel: f64,
    pub standoff_m: f64,
}

impl Default for EgoPolicy {
    fn default() -> Self {
        EgoPolicy::normal()
    }
}

impl EgoPolicy {
    pub fn normal() -> EgoPolicy {
        EgoPolicy {
            name: "normal".into(),
            target_speed: 8.0,
            ttc_threshold_s: 3.0,
            decel: 3.0,
            accel: 2.0,
            standoff_m: 5.5,
        }
    }

    pub fn cautious() -> EgoPolicy {
        EgoPolicy {
            name: "cautious".into(),
            target_speed: 6.0,
            ttc_threshold_s: 4.0,
            decel: 2.5,
            accel: 1.5,
            standoff_m: 7.0,
        }
    }

    pub fn aggressive() -> EgoPolicy {
        EgoPolicy {
            name: "aggressive".into(),
            target_speed: 10.0,
            ttc_threshold_s: 1.5,
            decel: 4.5,
            accel: 3.0,
            standoff_m: 3.0,
        }
    }

    pub fn from_name(name: &str) -> Option<EgoPolicy> {
        match name {
            "normal" => Some(EgoPolicy::normal()),
            "cautious" => Some(EgoPolicy::cautious()),
            "aggressive" => Some(EgoPolicy::aggressive()),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaybackConfig {
    pub dt: f64,
    pub horizon_s: f64,
    pub collision_distance_m: f64,
    pub conflict_radius_m: f64,
    /// Lateral half-width within which an actor ahead blocks the corridor.
    pub corridor_half_width_m: f64,
    /// Wider margin for actors on a crossing path.
    pub crossing_margin_m: f64,
    pub lateral_rate_mps: f64,
    pub actor_accel: f64,
    /// Record every k-th step in the trajectory dump.
    pub trajectory_stride: usize,
}

impl Default for PlaybackConfig {
    fn default() -> Self {
        PlaybackConfig {
            dt: 0.05,
            horizon_s: 15.0,
            collision_distance_m: 1.0,
            conflict_radius_m: 2.5,
            corridor_half_width_m: 1.5,
            crossing_margin_m: 4.0,
            lateral_rate_mps: 2.5,
            actor_accel: 3.0,
            trajectory_stride: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub entity: String,
    pub lane: i32,
    pub s: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlaybackResult {
    pub trajectories: Vec<TrajectoryPoint>,
    /// Minimum ego-actor distance over the run; infinity with no actors.
    pub min_ego_actor_distance: f64,
    pub collision: bool,
    pub collision_time: Option<f64>,
    pub realized: Criticality,
}

struct Body {
    x: f64,
    y: f64,
    speed: f64,
    heading: Heading,
    lane: i32,
    /// Walk direction of a crossing actor: +1 or -1 in y.
    cross_dir: f64,
}

fn lane_y(script: &ScenarioScript, lane: i32) -> Result<f64, PlaybackError> {
    script
        .map
        .lane(lane)
        .map(|l| l.center_y_m)
        .ok_or(PlaybackError::UnknownLane(lane))
}

fn phase(script: &ScenarioScript, t: f64) -> usize {
    ((t / script.tau_interval_s) as usize).min(crate::graph::TAU_STEPS - 1)
}

/// Fixed-step playback. `rng_seed` is accepted for interface stability; the
/// current dynamics are fully deterministic.
pub fn run(
    script: &ScenarioScript,
    policy: &EgoPolicy,
    cfg: &PlaybackConfig,
    _rng_seed: u64,
) -> Result<PlaybackResult, PlaybackError> {
    crate::scenario::validate_script(script)
        .map_err(|_| PlaybackError::UnknownLane(script.ego.lanes[0]))?;

    let ego_lane_y = lane_y(script, script.ego.lanes[0])?;
    let mut ego = Body {
        x: 0.0,
        y: ego_lane_y,
        speed: 0.0,
        heading: Heading::SameDirection,
        lane: script.ego.lanes[0],
        cross_dir: 0.0,
    };

    let mut actors: Vec<Body> = Vec::with_capacity(script.actors.len());
    for a in &script.actors {
        let y = match a.heading {
            // Crossing actors start at the road edge on the pavement side
            // and walk across.
            Heading::Crossing => {
                let pavement_side = script
                    .map
                    .lane_for_class(crate::ontology::NodeClass::Pavement)
                    .map_or(-1.0, |l| l.center_y_m.signum());
                6.0 * pavement_side
            }
            _ => lane_y(script, a.spawn.0)?,
        };
        actors.push(Body {
            x: a.spawn.1,
            y,
            speed: a.timeline[0].target_speed,
            heading: a.heading,
            lane: a.spawn.0,
            cross_dir: if y < 0.0 { 1.0 } else { -1.0 },
        });
    }

    let steps = (cfg.horizon_s / cfg.dt).round() as usize;
    let mut min_distance = f64::INFINITY;
    let mut collision = false;
    let mut collision_time = None;
    let mut trajectories = Vec::new();

    for step in 0..=steps {
        let t = step as f64 * cfg.dt;
        let tau = phase(script, t);

        // Distances first: the spawn configuration counts.
        for actor in &actors {
            let d = ((actor.x - ego.x).powi(2) + (actor.y - ego.y).powi(2)).sqrt();
            if d < min_distance {
                min_distance = d;
            }
            if d < cfg.collision_distance_m && !collision {
                collision = true;
                collision_time = Some(t);
            }
        }
        if step % cfg.trajectory_stride == 0 || collision {
            trajectories.push(TrajectoryPoint {
                time: t,
                entity: "ego".into(),
                lane: ego.lane,
                s: ego.x,
                speed: ego.speed,
            });
            for (spec, actor) in script.actors.iter().zip(&actors) {
                trajectories.push(TrajectoryPoint {
                    time: t,
                    entity: format!("actor_{}", spec.track),
                    lane: actor.lane,
                    s: actor.x,
                    speed: actor.speed,
                });
            }
        }
        if collision || step == steps {
            break;
        }

        // Ego control: desired speed from the plan, capped by corridor gaps,
        // overridden by time-to-collision braking.
        let mut desired = policy.target_speed * script.ego.speed_fractions[tau];
        let ego_vx = ego.speed;
        let mut hazard = false;
        for actor in &actors {
            let rx = actor.x - ego.x;
            let ry = actor.y - ego.y;
            let (avx, avy) = actor_velocity(actor);
            let vx = avx - ego_vx;
            let vy = avy;
            let v2 = vx * vx + vy * vy;
            let t_star = if v2 < 1e-9 {
                0.0
            } else {
                (-(rx * vx + ry * vy) / v2).max(0.0)
            };
            let dx = rx + vx * t_star;
            let dy = ry + vy * t_star;
            let miss = (dx * dx + dy * dy).sqrt();
            if miss < cfg.conflict_radius_m && t_star < policy.ttc_threshold_s {
                hazard = true;
            }

            // Corridor gap cap for anything ahead on the ego's path.
            let margin = if actor.heading == Heading::Crossing {
                cfg.crossing_margin_m
            } else {
                cfg.corridor_half_width_m
            };
            if rx > 0.0 && ry.abs() < margin {
                let gap = rx;
                let allowed = (2.0 * policy.decel * (gap - policy.standoff_m).max(0.0)).sqrt();
                if allowed < desired {
                    desired = allowed;
                }
            }
        }

        if hazard {
            ego.speed = (ego.speed - policy.decel * cfg.dt).max(0.0);
        } else {
            let dv = (desired - ego.speed)
                .clamp(-policy.decel * cfg.dt, policy.accel * cfg.dt);
            ego.speed += dv;
        }
        ego.x += ego.speed * cfg.dt;
        let ego_target_lane = script.ego.lanes[tau];
        ego.lane = ego_target_lane;
        let ty = lane_y(script, ego_target_lane)?;
        let dy = (ty - ego.y).clamp(-cfg.lateral_rate_mps * cfg.dt, cfg.lateral_rate_mps * cfg.dt);
        ego.y += dy;

        // Scripted actors: speed toward the phase target, lanes via lateral
        // interpolation, crossing actors walk across the road and stop.
        for (spec, actor) in script.actors.iter().zip(actors.iter_mut()) {
            let step_spec = &spec.timeline[tau];
            let dv = (step_spec.target_speed - actor.speed)
                .clamp(-cfg.actor_accel * cfg.dt, cfg.actor_accel * cfg.dt);
            actor.speed += dv;
            match actor.heading {
                Heading::SameDirection => {
                    actor.x += actor.speed * cfg.dt;
                    actor.lane = step_spec.lane;
                    let ty = lane_y(script, step_spec.lane)?;
                    let dy = (ty - actor.y)
                        .clamp(-cfg.lateral_rate_mps * cfg.dt, cfg.lateral_rate_mps * cfg.dt);
                    actor.y += dy;
                }
                Heading::Oncoming => {
                    actor.x -= actor.speed * cfg.dt;
                }
                Heading::Crossing => {
                    let done = actor.y * actor.cross_dir >= 6.0;
                    if !done {
                        actor.y += actor.cross_dir * actor.speed * cfg.dt;
                    }
                }
            }
        }
    }

    let realized = if collision {
        Criticality::NearCollision
    } else if actors.is_empty() {
        Criticality::Visible
    } else {
        proximity_from_distance(min_distance.max(1e-9))
            .expect("positive distance always buckets")
    };

    Ok(PlaybackResult {
        trajectories,
        min_ego_actor_distance: min_distance,
        collision,
        collision_time,
        realized,
    })
}

fn actor_velocity(actor: &Body) -> (f64, f64) {
    match actor.heading {
        Heading::SameDirection => (actor.speed, 0.0),
        Heading::Oncoming => (-actor.speed, 0.0),
        Heading::Crossing => {
            if actor.y * actor.cross_dir >= 6.0 {
                (0.0, 0.0)
            } else {
                (0.0, actor.cross_dir * actor.speed)
            }
        }
    }
}

/// Runs every script, maps realized criticalities, and aggregates the
/// scenario consistency rate. Deterministic aggregation order.
pub fn batch_consistency(
    items: &[(ScenarioScript, Criticality)],
    policy: &EgoPolicy,
    cfg: &PlaybackConfig,
) -> Result<ScrReport, PlaybackError> {
    if items.is_empty() {
        return Err(PlaybackError::EmptyBatch);
    }
    let results: Result<Vec<(Criticality, Criticality)>, PlaybackError> = items
        .par_iter()
        .map(|(script, requested)| {
            let outcome = run(script, policy, cfg, 0)?;
            Ok((*requested, outcome.realized))
        })
        .collect();
    Ok(scenario_consistency_rate(&results?)?)
}

/// CSV dump: time, entity, lane, s, speed.
pub fn write_trajectories_csv(
    result: &PlaybackResult,
    path: &std::path::Path,
) -> Result<(), PlaybackError> {
    let mut out = String::from("time,entity,lane,s,speed\n");
    for p in &result.trajectories {
        out.push_str(&format!(
            "{:.2},{},{},{:.4},{:.4}\n",
            p.time, p.entity, p.lane, p.s, p.speed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{AvAction, NodeClass, RelationType};
    use crate::scenario::{
        ActorSpec, BehaviorStep, EgoPlan, Handedness, MapLayout, ScenarioScript,
        DEFAULT_TAU_INTERVAL_S,
    };

    fn base_script() -> ScenarioScript {
        ScenarioScript {
            map: MapLayout::standard(Handedness::Right),
            ego: EgoPlan {
                lanes: [-1; 5],
                speed_fractions: [1.0; 5],
                av_action: AvAction::Move,
            },
            actors: vec![],
            criticality: Criticality::Visible,
            handedness: Handedness::Right,
            tau_interval_s: DEFAULT_TAU_INTERVAL_S,
        }
    }

    fn actor(
        cls: NodeClass,
        lane: i32,
        offset: f64,
        heading: Heading,
        speeds: [f64; 5],
    ) -> ActorSpec {
        ActorSpec {
            track: 1,
            cls,
            spawn: (lane, offset),
            goal: (lane, offset),
            heading,
            timeline: (0..5)
                .map(|tau| BehaviorStep {
                    tau: tau as u8,
                    action: RelationType::Move,
                    target_speed: speeds[tau],
                    lane,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_actor_list_is_visible() {
        let script = base_script();
        let r = run(&script, &EgoPolicy::normal(), &PlaybackConfig::default(), 0).unwrap();
        assert!(r.min_ego_actor_distance.is_infinite());
        assert!(!r.collision);
        assert_eq!(r.realized, Criticality::Visible);
    }

    #[test]
    fn head_on_with_infinite_threshold_collides_on_schedule() {
        let mut script = base_script();
        let spawn = 30.0;
        let speed = 6.0;
        script.actors = vec![actor(
            NodeClass::Car,
            -1,
            spawn,
            Heading::Oncoming,
            [speed; 5],
        )];
        let policy = EgoPolicy {
            ttc_threshold_s: f64::INFINITY,
            ..EgoPolicy::normal()
        };
        let cfg = PlaybackConfig::default();
        let r = run(&script, &policy, &cfg, 0).unwrap();
        assert!(r.collision);
        // Ego never moves (always braking from rest): the actor covers the
        // gap at constant speed.
        let expected = (spawn - cfg.collision_distance_m) / speed;
        let got = r.collision_time.unwrap();
        assert!(
            (got - expected).abs() <= 2.0 * cfg.dt,
            "collision at {got}, expected {expected}"
        );
        assert_eq!(r.realized, Criticality::NearCollision);
    }

    #[test]
    fn pacing_actor_realizes_each_band() {
        for (band, expected) in [
            (4.0, Criticality::NearCollision),
            (8.0, Criticality::Near),
            (20.0, Criticality::Visible),
        ] {
            let mut script = base_script();
            script.actors = vec![actor(
                NodeClass::Car,
                -1,
                band,
                Heading::SameDirection,
                [8.0; 5],
            )];
            let r = run(&script, &EgoPolicy::normal(), &PlaybackConfig::default(), 0).unwrap();
            assert!(!r.collision, "band {band}");
            assert!(
                (r.min_ego_actor_distance - band).abs() < 0.2,
                "band {band}: min {}",
                r.min_ego_actor_distance
            );
            assert_eq!(r.realized, expected, "band {band}");
        }
    }

    #[test]
    fn stopped_lead_settles_at_standoff() {
        let mut script = base_script();
        script.actors = vec![actor(
            NodeClass::Car,
            -1,
            20.0,
            Heading::SameDirection,
            [0.0; 5],
        )];
        let policy = EgoPolicy::normal();
        let r = run(&script, &policy, &PlaybackConfig::default(), 0).unwrap();
        assert!(!r.collision);
        assert!(
            r.min_ego_actor_distance >= policy.standoff_m - 0.5,
            "min {}",
            r.min_ego_actor_distance
        );
        assert_eq!(r.realized, Criticality::Near);
    }

    #[test]
    fn determinism_byte_exact() {
        let mut script = base_script();
        script.actors = vec![actor(
            NodeClass::Car,
            -1,
            8.0,
            Heading::SameDirection,
            [8.0, 3.2, 0.0, 0.0, 8.0],
        )];
        let a = run(&script, &EgoPolicy::normal(), &PlaybackConfig::default(), 7).unwrap();
        let b = run(&script, &EgoPolicy::normal(), &PlaybackConfig::default(), 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn speed_changes_respect_acceleration_limits() {
        let mut script = base_script();
        script.ego.speed_fractions = [1.0, 0.6, 0.0, 0.0, 1.0];
        script.actors = vec![actor(
            NodeClass::Bus,
            -2,
            8.0,
            Heading::SameDirection,
            [7.0, 2.8, 0.0, 0.0, 7.0],
        )];
        let cfg = PlaybackConfig {
            trajectory_stride: 1,
            ..PlaybackConfig::default()
        };
        let policy = EgoPolicy::normal();
        let r = run(&script, &policy, &cfg, 0).unwrap();
        let bound = policy.decel.max(policy.accel).max(cfg.actor_accel) * cfg.dt + 1e-9;
        let mut prev: std::collections::BTreeMap<String, f64> = Default::default();
        for p in &r.trajectories {
            if let Some(last) = prev.get(&p.entity) {
                assert!(
                    (p.speed - last).abs() <= bound,
                    "{} jumped {} -> {}",
                    p.entity,
                    last,
                    p.speed
                );
            }
            prev.insert(p.entity.clone(), p.speed);
        }
    }

    #[test]
    fn cautious_keeps_more_distance_than_aggressive() {
        // Head-on family: oncoming actor in the ego lane that stops after
        // the first phase.
        for i in 0..20 {
            let spawn = 30.0 + 2.0 * i as f64;
            let mut script = base_script();
            script.actors = vec![actor(
                NodeClass::Car,
                -1,
                spawn,
                Heading::Oncoming,
                [6.0, 0.0, 0.0, 0.0, 0.0],
            )];
            let cfg = PlaybackConfig::default();
            let cautious = run(&script, &EgoPolicy::cautious(), &cfg, 0).unwrap();
            let aggressive = run(&script, &EgoPolicy::aggressive(), &cfg, 0).unwrap();
            assert!(
                cautious.min_ego_actor_distance >= aggressive.min_ego_actor_distance,
                "spawn {spawn}: cautious {} < aggressive {}",
                cautious.min_ego_actor_distance,
                aggressive.min_ego_actor_distance
            );
        }
    }

    #[test]
    fn realized_matches_distance_bucket() {
        let mut script = base_script();
        script.actors = vec![actor(
            NodeClass::Car,
            -1,
            8.0,
            Heading::SameDirection,
            [8.0; 5],
        )];
        let r = run(&script, &EgoPolicy::normal(), &PlaybackConfig::default(), 0).unwrap();
        assert_eq!(
            r.realized,
            proximity_from_distance(r.min_ego_actor_distance).unwrap()
        );
    }

    #[test]
    fn batch_scr_on_oracle_scripts() {
        let mut items = Vec::new();
        for (band, crit) in [
            (4.0, Criticality::NearCollision),
            (8.0, Criticality::Near),
            (20.0, Criticality::Visible),
        ] {
            for _ in 0..3 {
                let mut script = base_script();
                script.criticality = crit;
                script.actors = vec![actor(
                    NodeClass::Car,
                    -1,
                    band,
                    Heading::SameDirection,
                    [8.0; 5],
                )];
                items.push((script, crit));
            }
        }
        let report =
            batch_consistency(&items, &EgoPolicy::normal(), &PlaybackConfig::default()).unwrap();
        assert_eq!(report.overall_pct, 100.0);
        for group in &report.groups {
            assert_eq!(group.pct, 100.0, "{:?}", group.requested);
        }
        assert!(batch_consistency(&[], &EgoPolicy::normal(), &PlaybackConfig::default()).is_err());
    }
}
