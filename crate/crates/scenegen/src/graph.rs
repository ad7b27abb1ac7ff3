//! Temporal scene graph data model and transformations: per-frame graph
//! construction, temporal merging with tau labels, criticality and AV-action
//! labeling, seed pruning, ontology-driven augmentation, feature assembly,
//! and the agents-structures seed database.

use crate::ingest::FrameAnnotation;
use crate::ontology::{
    AvAction, Criticality, NodeClass, Ontology, RelationType, NODE_CLASS_COUNT, RELATION_COUNT,
};
use rand::prelude::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Number of scenes per scenario; tau labels live in [0, TAU_STEPS).
pub const TAU_STEPS: usize = 5;

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("expected exactly {expected} frames, got {got}")]
    WrongFrameCount { expected: usize, got: usize },
    #[error("track {track} has inconsistent classes {first} and {second} across frames")]
    InconsistentTrack {
        track: u32,
        first: NodeClass,
        second: NodeClass,
    },
    #[error("invalid triplet ({subject}, {relation}, {object})")]
    InvalidTriplet {
        subject: NodeClass,
        relation: RelationType,
        object: NodeClass,
    },
    #[error("no AV action recorded in any frame")]
    MissingAvAction,
    #[error("graph validation failed: {0}")]
    Validation(String),
    #[error("candidate relation {relation} is not a valid ego link for class {class}")]
    InvalidCandidate {
        relation: RelationType,
        class: NodeClass,
    },
    #[error("seed database is empty")]
    EmptyDatabase,
    #[error("graph io: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ontology(#[from] crate::ontology::OntologyError),
}

/// Node id, unique within one temporal graph.
pub type Uid = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub uid: Uid,
    pub track: u32,
    pub cls: NodeClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: Uid,
    pub dst: Uid,
    pub rel: RelationType,
    pub tau: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    Scenario,
    Seed,
    DatabaseSeed,
    Augmented,
}

/// Union of per-frame scene graphs with unique nodes and tau-labelled edges.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub av_action: Option<AvAction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub criticality: Option<Criticality>,
    /// Source frame index per tau slice, kept for statement rendering.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frames: Option<[u32; TAU_STEPS]>,
    #[serde(skip)]
    pub flavor: Flavor,
}

impl Default for Flavor {
    fn default() -> Self {
        Flavor::Scenario
    }
}

impl TemporalGraph {
    pub fn node(&self, uid: Uid) -> Option<&Node> {
        self.nodes.iter().find(|n| n.uid == uid)
    }

    pub fn ego_uid(&self) -> Option<Uid> {
        self.nodes
            .iter()
            .find(|n| n.cls == NodeClass::Ego)
            .map(|n| n.uid)
    }

    pub fn class_of(&self, uid: Uid) -> Option<NodeClass> {
        self.node(uid).map(|n| n.cls)
    }

    /// The AV-action self-loop on the ego, if present.
    pub fn action_edge_index(&self) -> Option<usize> {
        let ego = self.ego_uid()?;
        self.edges
            .iter()
            .position(|e| e.src == ego && e.dst == ego && e.rel.is_av_action())
    }

    /// The criticality-link edge, if present.
    pub fn criticality_edge_index(&self) -> Option<usize> {
        let ego = self.ego_uid()?;
        self.edges
            .iter()
            .position(|e| e.rel == RelationType::CriticalityLink && e.dst == ego)
    }

    /// Edges carrying the given tau label plus their endpoint nodes;
    /// reconstructs the frame graph G_tau up to uid renaming.
    pub fn tau_slice(&self, tau: u8) -> (Vec<&Node>, Vec<&Edge>) {
        let edges: Vec<&Edge> = self.edges.iter().filter(|e| e.tau == tau).collect();
        let uids: HashSet<Uid> = edges.iter().flat_map(|e| [e.src, e.dst]).collect();
        let nodes = self.nodes.iter().filter(|n| uids.contains(&n.uid)).collect();
        (nodes, edges)
    }

    /// Keyed form of a predictable ego link, ignoring edge orientation.
    pub fn ego_link_keys(&self) -> HashSet<(Uid, RelationType, u8)> {
        let Some(ego) = self.ego_uid() else {
            return HashSet::new();
        };
        self.edges
            .iter()
            .filter(|e| (e.src == ego) ^ (e.dst == ego))
            .filter(|e| e.rel != RelationType::CriticalityLink && !e.rel.is_av_action())
            .map(|e| {
                let other = if e.src == ego { e.dst } else { e.src };
                (other, e.rel, e.tau)
            })
            .collect()
    }
}

/// One scene graph extracted from a single annotated frame.
#[derive(Clone, Debug)]
pub struct FrameGraph {
    pub frame_index: u32,
    pub av_action: Option<AvAction>,
    pub nodes: Vec<Node>,
    pub edges: Vec<(Uid, Uid, RelationType)>,
}

/// Builds the scene graph of one frame: entity and location nodes, IsIn
/// edges, state self-edges, relative motion, proximity, and MustStop rules.
pub fn build_frame_graph(frame: &FrameAnnotation, ont: &Ontology) -> Result<FrameGraph, GraphError> {
    fn location_node(
        loc_uids: &mut HashMap<(NodeClass, u32), Uid>,
        nodes: &mut Vec<Node>,
        next_uid: &mut Uid,
        cls: NodeClass,
        id: u32,
    ) -> Uid {
        *loc_uids.entry((cls, id)).or_insert_with(|| {
            let uid = *next_uid;
            *next_uid += 1;
            nodes.push(Node {
                uid,
                track: id,
                cls,
            });
            uid
        })
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut loc_uids: HashMap<(NodeClass, u32), Uid> = HashMap::new();

    let ego_uid: Uid = 0;
    nodes.push(Node {
        uid: ego_uid,
        track: 0,
        cls: NodeClass::Ego,
    });
    let mut next_uid: Uid = 1;

    if let Some(loc) = &frame.av_location {
        let luid = location_node(&mut loc_uids, &mut nodes, &mut next_uid, loc.cls, loc.id);
        push_edge(&mut edges, ego_uid, luid, RelationType::IsIn, &nodes, ont)?;
    }

    let mut agent_uids = Vec::new();
    let mut red_lights = Vec::new();
    for entity in &frame.entities {
        let uid = next_uid;
        next_uid += 1;
        nodes.push(Node {
            uid,
            track: entity.track,
            cls: entity.cls,
        });
        agent_uids.push((uid, entity.cls));

        if let Some(loc) = &entity.location {
            let luid = location_node(&mut loc_uids, &mut nodes, &mut next_uid, loc.cls, loc.id);
            push_edge(&mut edges, uid, luid, RelationType::IsIn, &nodes, ont)?;
        }
        for act in &entity.actions {
            push_edge(&mut edges, uid, uid, *act, &nodes, ont)?;
        }
        if let Some(colour) = entity.light {
            push_edge(&mut edges, uid, uid, colour, &nodes, ont)?;
            if colour == RelationType::Red {
                red_lights.push(uid);
            }
        }
        if let Some(motion) = entity.relative_motion {
            push_edge(&mut edges, uid, ego_uid, motion, &nodes, ont)?;
        }
        let proximity = match (entity.distance_m, entity.proximity) {
            (Some(d), None) => Some(crate::ingest::proximity_from_distance(d).map_err(|e| {
                GraphError::Validation(format!("entity track {}: {e}", entity.track))
            })?),
            (None, Some(p)) => Some(p),
            (None, None) => None,
            (Some(_), Some(_)) => {
                return Err(GraphError::Validation(format!(
                    "entity track {} carries both distance and proximity",
                    entity.track
                )))
            }
        };
        if let Some(p) = proximity {
            push_edge(&mut edges, uid, ego_uid, p.proximity_relation(), &nodes, ont)?;
        }
    }

    // Traffic rule: every vehicle must stop for each red light in the frame.
    for light in red_lights {
        for (uid, cls) in &agent_uids {
            if ont.validate_triplet(*cls, RelationType::MustStop, NodeClass::TrafficLight) {
                push_edge(&mut edges, *uid, light, RelationType::MustStop, &nodes, ont)?;
            }
        }
    }

    Ok(FrameGraph {
        frame_index: frame.frame_index,
        av_action: frame.av_action,
        nodes,
        edges,
    })
}

fn push_edge(
    edges: &mut Vec<(Uid, Uid, RelationType)>,
    src: Uid,
    dst: Uid,
    rel: RelationType,
    nodes: &[Node],
    ont: &Ontology,
) -> Result<(), GraphError> {
    let s = nodes.iter().find(|n| n.uid == src).expect("src exists").cls;
    let o = nodes.iter().find(|n| n.uid == dst).expect("dst exists").cls;
    if !ont.validate_triplet(s, rel, o) {
        return Err(GraphError::InvalidTriplet {
            subject: s,
            relation: rel,
            object: o,
        });
    }
    edges.push((src, dst, rel));
    Ok(())
}

/// The most severe proximity relation present in any constituent frame;
/// graphs with no proximity edges default to Visible.
pub fn derive_criticality(g: &TemporalGraph, ont: &Ontology) -> Criticality {
    g.edges
        .iter()
        .filter_map(|e| Criticality::from_proximity_relation(e.rel))
        .max_by_key(|c| ont.severity_rank(*c))
        .unwrap_or(Criticality::Visible)
}

/// The AV action of the latest frame carrying one.
pub fn derive_av_action(frames: &[FrameGraph]) -> Result<AvAction, GraphError> {
    frames
        .iter()
        .rev()
        .find_map(|f| f.av_action)
        .ok_or(GraphError::MissingAvAction)
}

/// Merges five per-frame graphs into a Scenario-flavored temporal graph:
/// one node per tracked entity, tau labels from frame order, derived
/// criticality and AV action, plus the conditioning scaffolding.
pub fn build_temporal_graph(frames: &[FrameGraph], ont: &Ontology) -> Result<TemporalGraph, GraphError> {
    if frames.len() != TAU_STEPS {
        return Err(GraphError::WrongFrameCount {
            expected: TAU_STEPS,
            got: frames.len(),
        });
    }

    #[derive(PartialEq, Eq, Hash)]
    enum Key {
        Agent(u32),
        Location(NodeClass, u32),
    }

    let mut nodes: Vec<Node> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut by_key: HashMap<Key, Uid> = HashMap::new();
    let mut next_uid: Uid = 0;

    for (tau, frame) in frames.iter().enumerate() {
        let mut local: HashMap<Uid, Uid> = HashMap::new();
        for node in &frame.nodes {
            let key = if node.cls.is_location() {
                Key::Location(node.cls, node.track)
            } else {
                Key::Agent(node.track)
            };
            match by_key.get(&key) {
                Some(uid) => {
                    let existing = nodes.iter().find(|n| n.uid == *uid).expect("merged node");
                    if existing.cls != node.cls {
                        return Err(GraphError::InconsistentTrack {
                            track: node.track,
                            first: existing.cls,
                            second: node.cls,
                        });
                    }
                    local.insert(node.uid, *uid);
                }
                None => {
                    let uid = next_uid;
                    next_uid += 1;
                    nodes.push(Node {
                        uid,
                        track: node.track,
                        cls: node.cls,
                    });
                    by_key.insert(key, uid);
                    local.insert(node.uid, uid);
                }
            }
        }
        for (src, dst, rel) in &frame.edges {
            edges.push(Edge {
                src: local[src],
                dst: local[dst],
                rel: *rel,
                tau: tau as u8,
            });
        }
    }

    let av_action = derive_av_action(frames)?;
    let ego = nodes
        .iter()
        .find(|n| n.cls == NodeClass::Ego)
        .map(|n| n.uid)
        .ok_or_else(|| GraphError::Validation("temporal graph has no EGO node".into()))?;

    let mut g = TemporalGraph {
        nodes,
        edges,
        av_action: Some(av_action),
        criticality: None,
        frames: Some(core::array::from_fn(|i| frames[i].frame_index)),
        flavor: Flavor::Scenario,
    };
    let criticality = derive_criticality(&g, ont);
    g.criticality = Some(criticality);

    // Conditioning scaffolding: criticality node + link, AV action self-loop.
    let crit_uid = next_uid;
    g.nodes.push(Node {
        uid: crit_uid,
        track: crit_uid,
        cls: criticality.node_class(),
    });
    g.edges.push(Edge {
        src: crit_uid,
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
    validate_graph(&g, ont)?;
    Ok(g)
}

/// Removes all ego-incident relation edges. With `keep_conditioning` the
/// criticality node, its link, and the AV-action self-loop are retained
/// (Seed flavor); without it they are removed too (DatabaseSeed flavor).
pub fn prune_to_seed(g: &TemporalGraph, keep_conditioning: bool) -> TemporalGraph {
    let ego = g.ego_uid();
    let mut out = g.clone();
    out.edges.retain(|e| {
        let ego_incident = ego.map_or(false, |u| e.src == u || e.dst == u);
        if !ego_incident {
            return true;
        }
        keep_conditioning && (e.rel == RelationType::CriticalityLink || e.rel.is_av_action())
    });
    if keep_conditioning {
        out.flavor = Flavor::Seed;
    } else {
        out.nodes.retain(|n| !n.cls.is_criticality_marker());
        out.av_action = None;
        out.criticality = None;
        out.flavor = Flavor::DatabaseSeed;
    }
    out
}

/// A possible ego link the model scores: always stored ego -> dst.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletCandidate {
    pub src: Uid,
    pub dst: Uid,
    pub rel: RelationType,
    pub tau: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probability: Option<f64>,
}

impl TripletCandidate {
    /// Orients the candidate into a schema-valid edge.
    pub fn to_edge(&self, dst_cls: NodeClass, ont: &Ontology) -> Result<Edge, GraphError> {
        if ont.validate_triplet(NodeClass::Ego, self.rel, dst_cls) {
            Ok(Edge {
                src: self.src,
                dst: self.dst,
                rel: self.rel,
                tau: self.tau,
            })
        } else if ont.validate_triplet(dst_cls, self.rel, NodeClass::Ego) {
            Ok(Edge {
                src: self.dst,
                dst: self.src,
                rel: self.rel,
                tau: self.tau,
            })
        } else {
            Err(GraphError::InvalidCandidate {
                relation: self.rel,
                class: dst_cls,
            })
        }
    }
}

/// A seed graph together with its ontology-generated ego candidates.
#[derive(Clone, Debug)]
pub struct AugmentedGraph {
    pub graph: TemporalGraph,
    pub candidates: Vec<TripletCandidate>,
}

/// Adds every ontology-permitted ego link for every non-ego node and every
/// tau. Agent-structure edges are unchanged; conditioning edges are never
/// candidates.
pub fn augment(seed: &TemporalGraph, ont: &Ontology) -> Result<AugmentedGraph, GraphError> {
    let ego = seed
        .ego_uid()
        .ok_or_else(|| GraphError::Validation("seed graph has no EGO node".into()))?;
    let mut candidates = Vec::new();
    for node in &seed.nodes {
        if node.cls == NodeClass::Ego {
            continue;
        }
        for rel in ont.ego_candidate_relations(node.cls)? {
            for tau in 0..TAU_STEPS as u8 {
                candidates.push(TripletCandidate {
                    src: ego,
                    dst: node.uid,
                    rel,
                    tau,
                    label: None,
                    probability: None,
                });
            }
        }
    }
    let mut graph = seed.clone();
    graph.flavor = Flavor::Augmented;
    Ok(AugmentedGraph { graph, candidates })
}

/// Marks each candidate 1 iff the equivalent ego link exists in the ground
/// truth scenario graph.
pub fn label_candidates(candidates: &mut [TripletCandidate], ground_truth: &TemporalGraph) {
    let truth = ground_truth.ego_link_keys();
    for c in candidates.iter_mut() {
        c.label = Some(truth.contains(&(c.dst, c.rel, c.tau)));
    }
}

/// Sinusoidal positional encoding of an entity's track id.
pub fn positional_encoding(track: u32) -> [f64; 2] {
    let t = track as f64;
    [t.sin(), t.cos()]
}

/// Per-node and per-edge feature matrices for one augmented graph.
#[derive(Clone, Debug)]
pub struct Features {
    /// One row per node: one-hot class ++ positional encoding.
    pub node_features: Vec<Vec<f64>>,
    /// One row per graph edge: one-hot relation ++ tau / 4.
    pub edge_features: Vec<Vec<f64>>,
    /// One row per candidate, same layout as edge features.
    pub candidate_features: Vec<Vec<f64>>,
    /// Row index of the ego node.
    pub ego_row: usize,
    /// Node row per uid.
    pub row_of_uid: HashMap<Uid, usize>,
    /// Index into `edge_features` of the AV-action self-loop.
    pub action_edge: Option<usize>,
    /// Index into `edge_features` of the criticality link.
    pub criticality_edge: Option<usize>,
    /// Row index of the criticality marker node.
    pub criticality_node_row: Option<usize>,
}

/// Assembles feature vectors for an augmented graph. With positional
/// encodings disabled the two trailing node slots are zero.
pub fn assemble_features(
    aug: &AugmentedGraph,
    ont: &Ontology,
    positional_encodings: bool,
) -> Result<Features, GraphError> {
    let g = &aug.graph;
    let mut row_of_uid = HashMap::new();
    let mut node_features = Vec::with_capacity(g.nodes.len());
    let mut ego_row = None;
    for (row, node) in g.nodes.iter().enumerate() {
        row_of_uid.insert(node.uid, row);
        let mut v = vec![0.0; NODE_CLASS_COUNT + 2];
        v[ont.node_index(node.cls)] = 1.0;
        if positional_encodings {
            let pe = positional_encoding(node.track);
            v[NODE_CLASS_COUNT] = pe[0];
            v[NODE_CLASS_COUNT + 1] = pe[1];
        }
        node_features.push(v);
        if node.cls == NodeClass::Ego {
            ego_row = Some(row);
        }
    }
    let ego_row =
        ego_row.ok_or_else(|| GraphError::Validation("augmented graph has no EGO node".into()))?;

    let edge_feature = |rel: RelationType, tau: u8| {
        let mut v = vec![0.0; RELATION_COUNT + 1];
        v[ont.relation_index(rel)] = 1.0;
        v[RELATION_COUNT] = tau as f64 / (TAU_STEPS - 1) as f64;
        v
    };

    let edge_features = g.edges.iter().map(|e| edge_feature(e.rel, e.tau)).collect();
    let candidate_features = aug
        .candidates
        .iter()
        .map(|c| edge_feature(c.rel, c.tau))
        .collect();

    Ok(Features {
        node_features,
        edge_features,
        candidate_features,
        ego_row,
        row_of_uid,
        action_edge: g.action_edge_index(),
        criticality_edge: g.criticality_edge_index(),
        criticality_node_row: g
            .nodes
            .iter()
            .position(|n| n.cls.is_criticality_marker()),
    })
}

/// Structural validation: unique uids, single EGO, tau bounds, schema-valid
/// edges, and flavor-specific conditioning invariants.
pub fn validate_graph(g: &TemporalGraph, ont: &Ontology) -> Result<(), GraphError> {
    let mut uids = HashSet::new();
    for n in &g.nodes {
        if !uids.insert(n.uid) {
            return Err(GraphError::Validation(format!("duplicate uid {}", n.uid)));
        }
    }
    let egos: Vec<&Node> = g.nodes.iter().filter(|n| n.cls == NodeClass::Ego).collect();
    if egos.len() > 1 {
        return Err(GraphError::Validation("more than one EGO node".into()));
    }
    if let Some(ego) = egos.first() {
        if ego.track != 0 {
            return Err(GraphError::Validation(format!(
                "EGO track must be 0, got {}",
                ego.track
            )));
        }
    }
    for e in &g.edges {
        if e.tau as usize >= TAU_STEPS {
            return Err(GraphError::Validation(format!(
                "tau {} out of range",
                e.tau
            )));
        }
        let s = g
            .class_of(e.src)
            .ok_or_else(|| GraphError::Validation(format!("dangling src uid {}", e.src)))?;
        let o = g
            .class_of(e.dst)
            .ok_or_else(|| GraphError::Validation(format!("dangling dst uid {}", e.dst)))?;
        if !ont.validate_triplet(s, e.rel, o) {
            return Err(GraphError::InvalidTriplet {
                subject: s,
                relation: e.rel,
                object: o,
            });
        }
    }

    let ego = g.ego_uid();
    let ego_incident: Vec<&Edge> = match ego {
        Some(u) => g.edges.iter().filter(|e| e.src == u || e.dst == u).collect(),
        None => Vec::new(),
    };
    let conditioning = |e: &&Edge| e.rel == RelationType::CriticalityLink || e.rel.is_av_action();
    match g.flavor {
        Flavor::Scenario | Flavor::Augmented => {
            if g.av_action.is_none() || g.criticality.is_none() {
                return Err(GraphError::Validation(format!(
                    "{:?} graph must carry av_action and criticality",
                    g.flavor
                )));
            }
            if g.action_edge_index().is_none() {
                return Err(GraphError::Validation("missing AV-action self-loop".into()));
            }
            if g.criticality_edge_index().is_none() {
                return Err(GraphError::Validation("missing criticality link".into()));
            }
        }
        Flavor::Seed => {
            if ego_incident.iter().any(|e| !conditioning(e)) {
                return Err(GraphError::Validation(
                    "seed graph retains non-conditioning ego edges".into(),
                ));
            }
        }
        Flavor::DatabaseSeed => {
            if !ego_incident.is_empty() {
                return Err(GraphError::Validation(
                    "database seed retains ego-incident edges".into(),
                ));
            }
            if g.nodes.iter().any(|n| n.cls.is_criticality_marker()) {
                return Err(GraphError::Validation(
                    "database seed retains a criticality node".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Exclusion-group violations: more than one relation of a group on the same
/// (subject, object, tau) slot. Augmented graphs are exempt by construction.
pub fn exclusion_violations(g: &TemporalGraph, ont: &Ontology) -> Vec<(Uid, Uid, u8, RelationType, RelationType)> {
    let mut seen: HashMap<(Uid, Uid, u8, usize), RelationType> = HashMap::new();
    let mut violations = Vec::new();
    for e in &g.edges {
        let Some(group_idx) = ont
            .exclusion_groups()
            .iter()
            .position(|grp| grp.contains(&e.rel))
        else {
            continue;
        };
        let key = (e.src, e.dst, e.tau, group_idx);
        match seen.get(&key) {
            Some(prev) if *prev != e.rel => violations.push((e.src, e.dst, e.tau, *prev, e.rel)),
            Some(_) => {}
            None => {
                seen.insert(key, e.rel);
            }
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// JSON Lines persistence
// ---------------------------------------------------------------------------

pub fn write_graphs_jsonl<W: Write>(w: &mut W, graphs: &[TemporalGraph]) -> Result<(), GraphError> {
    for g in graphs {
        serde_json::to_writer(&mut *w, g)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_graphs_jsonl<R: BufRead>(r: R, flavor: Flavor) -> Result<Vec<TemporalGraph>, GraphError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut g: TemporalGraph = serde_json::from_str(&line)?;
        g.flavor = flavor;
        out.push(g);
    }
    Ok(out)
}

pub fn save_graphs(path: &std::path::Path, graphs: &[TemporalGraph]) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_graphs_jsonl(&mut f, graphs)
}

pub fn load_graphs(path: &std::path::Path, flavor: Flavor) -> Result<Vec<TemporalGraph>, GraphError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_graphs_jsonl(f, flavor)
}

// ---------------------------------------------------------------------------
// Seed database
// ---------------------------------------------------------------------------

/// Agents-structures seed graphs indexed by the multiset of agent classes.
#[derive(Default)]
pub struct SeedDatabase {
    entries: Vec<TemporalGraph>,
    index: BTreeMap<String, Vec<usize>>,
}

/// Which fallback rule satisfied a database sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMatch {
    Exact,
    Superset,
    Jaccard,
}

/// Canonical key of an agent-class multiset.
pub fn agent_multiset_key(classes: &[NodeClass]) -> String {
    let mut labels: Vec<&str> = classes.iter().map(|c| c.label()).collect();
    labels.sort_unstable();
    labels.join(",")
}

fn agent_classes(g: &TemporalGraph) -> Vec<NodeClass> {
    g.nodes
        .iter()
        .filter(|n| n.cls.is_agent() && n.cls != NodeClass::Ego)
        .map(|n| n.cls)
        .collect()
}

fn class_counts(classes: &[NodeClass]) -> BTreeMap<NodeClass, usize> {
    let mut counts = BTreeMap::new();
    for c in classes {
        *counts.entry(*c).or_insert(0) += 1;
    }
    counts
}

impl SeedDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TemporalGraph] {
        &self.entries
    }

    pub fn insert(&mut self, seed: TemporalGraph, ont: &Ontology) -> Result<(), GraphError> {
        if seed.flavor != Flavor::DatabaseSeed {
            return Err(GraphError::Validation(
                "only DatabaseSeed graphs may enter the database".into(),
            ));
        }
        validate_graph(&seed, ont)?;
        let key = agent_multiset_key(&agent_classes(&seed));
        let idx = self.entries.len();
        self.entries.push(seed);
        self.index.entry(key).or_default().push(idx);
        Ok(())
    }

    /// Samples an entry for the requested agent multiset: uniformly among
    /// exact matches, then among supersets, then the entry with maximum
    /// Jaccard similarity of class multisets (ties to the lowest index).
    pub fn sample(&self, agents: &[NodeClass], rng_seed: u64) -> Result<&TemporalGraph, GraphError> {
        self.sample_with_info(agents, rng_seed).map(|(g, _)| g)
    }

    pub fn sample_with_info(
        &self,
        agents: &[NodeClass],
        rng_seed: u64,
    ) -> Result<(&TemporalGraph, SampleMatch), GraphError> {
        if self.entries.is_empty() {
            return Err(GraphError::EmptyDatabase);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        let key = agent_multiset_key(agents);
        if let Some(exact) = self.index.get(&key) {
            let idx = exact.choose(&mut rng).expect("non-empty bucket");
            return Ok((&self.entries[*idx], SampleMatch::Exact));
        }
        let want = class_counts(agents);
        let supersets: Vec<usize> = (0..self.entries.len())
            .filter(|i| {
                let have = class_counts(&agent_classes(&self.entries[*i]));
                want.iter().all(|(c, n)| have.get(c).copied().unwrap_or(0) >= *n)
            })
            .collect();
        if let Some(idx) = supersets.choose(&mut rng) {
            return Ok((&self.entries[*idx], SampleMatch::Superset));
        }
        let mut best = 0usize;
        let mut best_score = -1.0f64;
        for (i, entry) in self.entries.iter().enumerate() {
            let have = class_counts(&agent_classes(entry));
            let mut inter = 0usize;
            let mut union = 0usize;
            for c in crate::ontology::ALL_NODE_CLASSES {
                let a = want.get(&c).copied().unwrap_or(0);
                let b = have.get(&c).copied().unwrap_or(0);
                inter += a.min(b);
                union += a.max(b);
            }
            let score = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        Ok((&self.entries[best], SampleMatch::Jaccard))
    }

    /// Persists entries as JSONL plus an index file mapping multiset keys to
    /// line offsets.
    pub fn save(&self, dir: &std::path::Path) -> Result<(), GraphError> {
        std::fs::create_dir_all(dir)?;
        save_graphs(&dir.join("seeds.jsonl"), &self.entries)?;
        let index_json = serde_json::to_string_pretty(&self.index)?;
        std::fs::write(dir.join("index.json"), index_json)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, ont: &Ontology) -> Result<SeedDatabase, GraphError> {
        let entries = load_graphs(&dir.join("seeds.jsonl"), Flavor::DatabaseSeed)?;
        let mut db = SeedDatabase::new();
        for e in entries {
            db.insert(e, ont)?;
        }
        Ok(db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EntityAnnotation, LocationRef};
    use crate::ontology::Ontology;

    fn car_frame(frame_index: u32, distance_m: f64) -> FrameAnnotation {
        FrameAnnotation {
            frame_index,
            av_action: Some(AvAction::Move),
            av_location: None,
            entities: vec![EntityAnnotation {
                track: 1,
                cls: NodeClass::Car,
                location: Some(LocationRef {
                    cls: NodeClass::VehicleLane,
                    id: 0,
                }),
                actions: vec![RelationType::Move],
                light: None,
                distance_m: Some(distance_m),
                proximity: None,
                relative_motion: Some(RelationType::MovingTowards),
            }],
        }
    }

    #[test]
    fn frame_graph_single_car() {
        let ont = Ontology::builtin();
        let g = build_frame_graph(&car_frame(0, 7.0), ont).unwrap();
        let classes: Vec<NodeClass> = g.nodes.iter().map(|n| n.cls).collect();
        assert!(classes.contains(&NodeClass::Ego));
        assert!(classes.contains(&NodeClass::Car));
        assert!(classes.contains(&NodeClass::VehicleLane));
        assert_eq!(g.nodes.len(), 3);
        let rels: Vec<RelationType> = g.edges.iter().map(|(_, _, r)| *r).collect();
        assert_eq!(g.edges.len(), 4);
        assert!(rels.contains(&RelationType::IsIn));
        assert!(rels.contains(&RelationType::MovingTowards));
        assert!(rels.contains(&RelationType::Near));
        assert!(rels.contains(&RelationType::Move));
    }

    #[test]
    fn frame_graph_red_light_must_stop() {
        let ont = Ontology::builtin();
        let mut frame = car_frame(0, 7.0);
        frame.entities.push(EntityAnnotation {
            track: 2,
            cls: NodeClass::TrafficLight,
            location: Some(LocationRef {
                cls: NodeClass::Junction,
                id: 0,
            }),
            actions: vec![],
            light: Some(RelationType::Red),
            distance_m: Some(15.0),
            proximity: None,
            relative_motion: None,
        });
        let g = build_frame_graph(&frame, ont).unwrap();
        assert!(g.edges.iter().any(|(_, _, r)| *r == RelationType::MustStop));
    }

    #[test]
    fn frame_graph_empty_frame() {
        let ont = Ontology::builtin();
        let frame = FrameAnnotation {
            frame_index: 0,
            av_action: Some(AvAction::Move),
            av_location: None,
            entities: vec![],
        };
        let g = build_frame_graph(&frame, ont).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    fn five_car_frames() -> Vec<FrameGraph> {
        let ont = Ontology::builtin();
        (0..5)
            .map(|i| build_frame_graph(&car_frame(i, 7.0), ont).unwrap())
            .collect()
    }

    #[test]
    fn temporal_merge_unique_nodes() {
        let ont = Ontology::builtin();
        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let cars: Vec<&Node> = g.nodes.iter().filter(|n| n.cls == NodeClass::Car).collect();
        assert_eq!(cars.len(), 1);
        let car = cars[0].uid;
        let is_in_taus: Vec<u8> = g
            .edges
            .iter()
            .filter(|e| e.rel == RelationType::IsIn && e.src == car)
            .map(|e| e.tau)
            .collect();
        assert_eq!(is_in_taus, vec![0, 1, 2, 3, 4]);
        assert_eq!(g.criticality, Some(Criticality::Near));
        assert_eq!(g.av_action, Some(AvAction::Move));
    }

    #[test]
    fn temporal_merge_empty_frames() {
        let ont = Ontology::builtin();
        let frames: Vec<FrameGraph> = (0..5)
            .map(|i| {
                build_frame_graph(
                    &FrameAnnotation {
                        frame_index: i,
                        av_action: Some(AvAction::Stop),
                        av_location: None,
                        entities: vec![],
                    },
                    ont,
                )
                .unwrap()
            })
            .collect();
        let g = build_temporal_graph(&frames, ont).unwrap();
        // EGO + criticality node, criticality link + action self-loop.
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.criticality, Some(Criticality::Visible));
    }

    #[test]
    fn criticality_from_max_severity() {
        let ont = Ontology::builtin();
        let mut frames = five_car_frames();
        let f4 = build_frame_graph(&car_frame(4, 4.0), ont).unwrap();
        frames[4] = f4;
        let g = build_temporal_graph(&frames, ont).unwrap();
        assert_eq!(g.criticality, Some(Criticality::NearCollision));
    }

    #[test]
    fn av_action_last_recorded() {
        let mk = |actions: [Option<AvAction>; 5]| {
            actions
                .iter()
                .enumerate()
                .map(|(i, a)| FrameGraph {
                    frame_index: i as u32,
                    av_action: *a,
                    nodes: vec![Node {
                        uid: 0,
                        track: 0,
                        cls: NodeClass::Ego,
                    }],
                    edges: vec![],
                })
                .collect::<Vec<_>>()
        };
        let frames = mk([
            Some(AvAction::Move),
            Some(AvAction::Move),
            Some(AvAction::Move),
            Some(AvAction::TurnLeft),
            Some(AvAction::TurnLeft),
        ]);
        assert_eq!(derive_av_action(&frames).unwrap(), AvAction::TurnLeft);

        let frames = mk([Some(AvAction::Move), None, None, None, None]);
        assert_eq!(derive_av_action(&frames).unwrap(), AvAction::Move);

        let frames = mk([None, None, None, None, None]);
        assert!(matches!(
            derive_av_action(&frames),
            Err(GraphError::MissingAvAction)
        ));
    }

    #[test]
    fn prune_keeps_only_conditioning() {
        let ont = Ontology::builtin();
        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let ego = g.ego_uid().unwrap();
        let seed = prune_to_seed(&g, true);
        let ego_edges: Vec<&Edge> = seed
            .edges
            .iter()
            .filter(|e| e.src == ego || e.dst == ego)
            .collect();
        assert_eq!(ego_edges.len(), 2);
        assert!(validate_graph(&seed, ont).is_ok());

        let db = prune_to_seed(&g, false);
        assert!(db.edges.iter().all(|e| e.src != ego && e.dst != ego));
        assert!(db.nodes.iter().all(|n| !n.cls.is_criticality_marker()));
        assert!(db.av_action.is_none());
        assert!(validate_graph(&db, ont).is_ok());
    }

    #[test]
    fn augment_candidate_count() {
        let ont = Ontology::builtin();
        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let seed = prune_to_seed(&g, true);
        let aug = augment(&seed, ont).unwrap();
        // Car: 5 relations x 5 tau; VehicleLane: 1 relation x 5 tau;
        // criticality node: none.
        assert_eq!(aug.candidates.len(), 30);
        assert!(aug
            .candidates
            .iter()
            .all(|c| c.rel != RelationType::CriticalityLink && !c.rel.is_av_action()));
    }

    #[test]
    fn label_round_trip() {
        let ont = Ontology::builtin();
        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let seed = prune_to_seed(&g, true);
        let mut aug = augment(&seed, ont).unwrap();
        label_candidates(&mut aug.candidates, &g);
        let positives: HashSet<(Uid, RelationType, u8)> = aug
            .candidates
            .iter()
            .filter(|c| c.label == Some(true))
            .map(|c| (c.dst, c.rel, c.tau))
            .collect();
        assert_eq!(positives, g.ego_link_keys());
        // tau off by one never matches.
        let near_tau3 = aug
            .candidates
            .iter()
            .find(|c| c.rel == RelationType::Near && c.tau == 3)
            .unwrap();
        assert_eq!(near_tau3.label, Some(true));
    }

    #[test]
    fn positional_encoding_values() {
        assert_eq!(positional_encoding(0), [0.0, 1.0]);
        let pe1 = positional_encoding(1);
        assert!((pe1[0] - 0.8414709848078965).abs() < 1e-15);
        assert!((pe1[1] - 0.5403023058681398).abs() < 1e-15);
        let pe3 = positional_encoding(3);
        let pe4 = positional_encoding(4);
        assert!(pe3[0] != pe4[0] && pe3[1] != pe4[1]);
    }

    #[test]
    fn feature_layout() {
        let ont = Ontology::builtin();
        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let seed = prune_to_seed(&g, true);
        let aug = augment(&seed, ont).unwrap();
        let feats = assemble_features(&aug, ont, true).unwrap();
        let car_row = aug
            .graph
            .nodes
            .iter()
            .position(|n| n.cls == NodeClass::Car)
            .unwrap();
        let v = &feats.node_features[car_row];
        assert_eq!(v.len(), 22);
        assert_eq!(v[ont.node_index(NodeClass::Car)], 1.0);
        assert_eq!(v.iter().filter(|x| **x == 1.0).count(), 1);
        let pe = positional_encoding(1);
        assert_eq!(v[20], pe[0]);
        assert_eq!(v[21], pe[1]);

        // Candidate (Near, tau=2) has 0.5 in the trailing slot.
        let idx = aug
            .candidates
            .iter()
            .position(|c| c.rel == RelationType::Near && c.tau == 2)
            .unwrap();
        let ev = &feats.candidate_features[idx];
        assert_eq!(ev.len(), 27);
        assert_eq!(ev[ont.relation_index(RelationType::Near)], 1.0);
        assert_eq!(ev[26], 0.5);

        assert!(feats.action_edge.is_some());
        assert!(feats.criticality_edge.is_some());
    }

    #[test]
    fn tau_slice_reproduces_frames() {
        let ont = Ontology::builtin();
        let frames = five_car_frames();
        let g = build_temporal_graph(&frames, ont).unwrap();
        for tau in 0..5u8 {
            let (_, edges) = g.tau_slice(tau);
            // Frame graph had 4 edges; conditioning edges carry tau 0.
            let expected = if tau == 0 { 4 + 2 } else { 4 };
            assert_eq!(edges.len(), expected, "tau {tau}");
        }
    }

    #[test]
    fn db_sampling_rules() {
        let ont = Ontology::builtin();
        let mut db = SeedDatabase::new();
        assert!(matches!(
            db.sample(&[NodeClass::Car], 1),
            Err(GraphError::EmptyDatabase)
        ));

        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let entry_car = prune_to_seed(&g, false);
        db.insert(entry_car, ont).unwrap();

        let picked = db.sample(&[NodeClass::Car], 7).unwrap();
        assert!(picked.nodes.iter().any(|n| n.cls == NodeClass::Car));

        // Superset fallback.
        let picked = db.sample(&[NodeClass::Car, NodeClass::Pedestrian], 7);
        assert!(picked.is_ok()); // falls through to jaccard on single-entry db

        // Determinism.
        let a = db.sample(&[NodeClass::Car], 42).unwrap() as *const TemporalGraph;
        let b = db.sample(&[NodeClass::Car], 42).unwrap() as *const TemporalGraph;
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_round_trip() {
        let ont = Ontology::builtin();
        let g = build_temporal_graph(&five_car_frames(), ont).unwrap();
        let mut buf = Vec::new();
        write_graphs_jsonl(&mut buf, std::slice::from_ref(&g)).unwrap();
        let loaded = read_graphs_jsonl(&buf[..], Flavor::Scenario).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].nodes, g.nodes);
        assert_eq!(loaded[0].edges, g.edges);
        assert_eq!(loaded[0].av_action, g.av_action);
        assert_eq!(loaded[0].criticality, g.criticality);
    }
}
