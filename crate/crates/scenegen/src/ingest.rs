//! Frame annotation parsing, metric-distance proximity labeling, scenario
//! windowing with 5-fold downsampling, and per-action dataset splitting.

use crate::graph::{build_frame_graph, build_temporal_graph, FrameGraph, TemporalGraph};
use crate::ontology::{AvAction, Criticality, NodeClass, Ontology, RelationType};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use thiserror::Error;

pub const NEAR_COLLISION_MAX_M: f64 = 5.0;
pub const NEAR_MAX_M: f64 = 10.0;
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.20, 0.10);
pub const DOWNSAMPLE: usize = 5;
pub const WINDOW: usize = 5;

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("annotation parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame {frame}: duplicate track {track}")]
    DuplicateTrack { frame: u32, track: u32 },
    #[error("duplicate frame index {0}")]
    DuplicateFrame(u32),
    #[error("frame {frame}, track {track}: {message}")]
    BadEntity {
        frame: u32,
        track: u32,
        message: String,
    },
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("window has no AV action")]
    UnlabeledWindow,
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// A location reference: location class plus instance id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationRef {
    pub cls: NodeClass,
    pub id: u32,
}

/// One annotated entity in one frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub track: u32,
    pub cls: NodeClass,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub location: Option<LocationRef>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub actions: Vec<RelationType>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub light: Option<RelationType>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distance_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proximity: Option<Criticality>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relative_motion: Option<RelationType>,
}

/// One annotated frame: the ego state plus all visible entities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub av_action: Option<AvAction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub av_location: Option<LocationRef>,
    #[serde(default)]
    pub entities: Vec<EntityAnnotation>,
}

/// Top-level annotation file: one video's frame sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub video_id: String,
    pub frames: Vec<FrameAnnotation>,
}

/// Parses and validates an annotation stream, returning frames in stable
/// frame-index order.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<FrameAnnotation>, IngestError> {
    let file: AnnotationFile = serde_json::from_reader(reader)?;
    let mut frames = file.frames;
    frames.sort_by_key(|f| f.frame_index);
    let mut seen_frames = std::collections::HashSet::new();
    for frame in &frames {
        if !seen_frames.insert(frame.frame_index) {
            return Err(IngestError::DuplicateFrame(frame.frame_index));
        }
        let mut seen_tracks = std::collections::HashSet::new();
        for e in &frame.entities {
            if !seen_tracks.insert(e.track) {
                return Err(IngestError::DuplicateTrack {
                    frame: frame.frame_index,
                    track: e.track,
                });
            }
            validate_entity(frame.frame_index, e)?;
        }
        if let Some(loc) = &frame.av_location {
            if !loc.cls.is_location() {
                return Err(IngestError::BadEntity {
                    frame: frame.frame_index,
                    track: 0,
                    message: format!("av_location class {} is not a location", loc.cls),
                });
            }
        }
    }
    Ok(frames)
}

fn validate_entity(frame: u32, e: &EntityAnnotation) -> Result<(), IngestError> {
    let bad = |message: String| IngestError::BadEntity {
        frame,
        track: e.track,
        message,
    };
    if !e.cls.is_agent() || e.cls == NodeClass::Ego {
        return Err(bad(format!("class {} is not a non-ego agent", e.cls)));
    }
    match (e.distance_m, e.proximity) {
        (Some(d), None) => {
            if d <= 0.0 {
                return Err(bad(format!("distance must be positive, got {d}")));
            }
        }
        (None, Some(_)) => {}
        (None, None) => return Err(bad("entity needs distance_m or proximity".into())),
        (Some(_), Some(_)) => {
            return Err(bad("entity carries both distance_m and proximity".into()))
        }
    }
    if let Some(loc) = &e.location {
        if !loc.cls.is_location() {
            return Err(bad(format!("location class {} is not a location", loc.cls)));
        }
    }
    for act in &e.actions {
        if !act.is_agent_action() {
            return Err(bad(format!("{act} is not an agent action")));
        }
    }
    if let Some(l) = e.light {
        if !l.is_light_state() {
            return Err(bad(format!("{l} is not a traffic light state")));
        }
        if e.cls != NodeClass::TrafficLight {
            return Err(bad("light state on a non-TrafficLight entity".into()));
        }
    }
    if let Some(m) = e.relative_motion {
        if !m.is_relative_motion() {
            return Err(bad(format!("{m} is not a relative motion label")));
        }
    }
    Ok(())
}

/// Thresholds metric distance into the discrete proximity vocabulary:
/// below 5 m NearCollision, 5-10 m inclusive Near, above 10 m Visible.
pub fn proximity_from_distance(d_m: f64) -> Result<Criticality, IngestError> {
    if !(d_m > 0.0) {
        return Err(IngestError::NonPositiveDistance(d_m));
    }
    Ok(if d_m < NEAR_COLLISION_MAX_M {
        Criticality::NearCollision
    } else if d_m <= NEAR_MAX_M {
        Criticality::Near
    } else {
        Criticality::Visible
    })
}

/// Keeps every `downsample`-th frame, then groups the survivors into
/// consecutive non-overlapping windows, dropping a trailing partial window.
pub fn window_scenarios(
    frames: &[FrameAnnotation],
    downsample: usize,
    window: usize,
) -> Vec<Vec<FrameAnnotation>> {
    let kept: Vec<&FrameAnnotation> = frames.iter().step_by(downsample.max(1)).collect();
    kept.chunks_exact(window)
        .map(|chunk| chunk.iter().map(|f| (*f).clone()).collect())
        .collect()
}

/// A windowed scenario together with its derived AV-action label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioWindow {
    pub frames: Vec<FrameAnnotation>,
    pub action: AvAction,
}

/// Labels each window with the last recorded AV action.
pub fn label_windows(windows: Vec<Vec<FrameAnnotation>>) -> Result<Vec<ScenarioWindow>, IngestError> {
    windows
        .into_iter()
        .map(|frames| {
            let action = frames
                .iter()
                .rev()
                .find_map(|f| f.av_action)
                .ok_or(IngestError::UnlabeledWindow)?;
            Ok(ScenarioWindow { frames, action })
        })
        .collect()
}

/// Builds the temporal scenario graph of one window.
pub fn window_to_graph(window: &ScenarioWindow, ont: &Ontology) -> Result<TemporalGraph, IngestError> {
    let frames: Vec<FrameGraph> = window
        .frames
        .iter()
        .map(|f| build_frame_graph(f, ont))
        .collect::<Result<_, _>>()?;
    Ok(build_temporal_graph(&frames, ont)?)
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<ScenarioWindow>,
    pub val: Vec<ScenarioWindow>,
    pub test: Vec<ScenarioWindow>,
}

/// Splits windows 70-20-10 independently per AV-action group: floor
/// rounding, remainder to train, deterministic shuffle per group.
pub fn split_dataset(windows: &[ScenarioWindow], rng_seed: u64) -> DatasetSplit {
    let mut groups: BTreeMap<RelationType, Vec<&ScenarioWindow>> = BTreeMap::new();
    for w in windows {
        groups.entry(w.action.relation()).or_default().push(w);
    }
    let mut split = DatasetSplit::default();
    for (action_rel, mut group) in groups {
        let mut rng =
            ChaCha12Rng::seed_from_u64(rng_seed.wrapping_add(action_rel as u64 * 0x9E37_79B9));
        group.shuffle(&mut rng);
        let n = group.len();
        let n_val = (n as f64 * SPLIT_RATIOS.1).floor() as usize;
        let n_test = (n as f64 * SPLIT_RATIOS.2).floor() as usize;
        let n_train = n - n_val - n_test;
        for (i, w) in group.into_iter().enumerate() {
            if i < n_train {
                split.train.push(w.clone());
            } else if i < n_train + n_val {
                split.val.push(w.clone());
            } else {
                split.test.push(w.clone());
            }
        }
    }
    split
}
