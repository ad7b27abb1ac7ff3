//! Traffic-domain ontology: node classes, relation types, valid triplets,
//! mutual-exclusion groups, and the criticality severity order.
//!
//! The built-in schema is compiled into the binary; an identical-schema JSON
//! file can override the triplet table, exclusion groups, vocabulary order,
//! and severity order (the vocabulary itself is fixed).

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum OntologyError {
    #[error("EGO is not a valid candidate object")]
    EgoCandidateObject,
    #[error("ontology schema error: {0}")]
    Schema(String),
    #[error("failed to read ontology file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse ontology file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Entity classes: agents (1), locations (2), and criticality marker nodes (5).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeClass {
    #[serde(rename = "EGO")]
    Ego,
    Pedestrian,
    Car,
    Cyclist,
    Motorbike,
    Bus,
    TrafficLight,
    VehicleLane,
    OutgoingLane,
    OutgoingCycleLane,
    IncomingLane,
    IncomingCycleLane,
    Pavement,
    Junction,
    PedestrianCrossing,
    BusStop,
    Parking,
    NearCollision,
    Near,
    Visible,
}

pub const NODE_CLASS_COUNT: usize = 20;

pub const ALL_NODE_CLASSES: [NodeClass; NODE_CLASS_COUNT] = [
    NodeClass::Ego,
    NodeClass::Pedestrian,
    NodeClass::Car,
    NodeClass::Cyclist,
    NodeClass::Motorbike,
    NodeClass::Bus,
    NodeClass::TrafficLight,
    NodeClass::VehicleLane,
    NodeClass::OutgoingLane,
    NodeClass::OutgoingCycleLane,
    NodeClass::IncomingLane,
    NodeClass::IncomingCycleLane,
    NodeClass::Pavement,
    NodeClass::Junction,
    NodeClass::PedestrianCrossing,
    NodeClass::BusStop,
    NodeClass::Parking,
    NodeClass::NearCollision,
    NodeClass::Near,
    NodeClass::Visible,
];

/// The non-ego agent classes that move under their own control.
pub const DYNAMIC_AGENTS: [NodeClass; 5] = [
    NodeClass::Pedestrian,
    NodeClass::Car,
    NodeClass::Cyclist,
    NodeClass::Motorbike,
    NodeClass::Bus,
];

impl NodeClass {
    pub fn is_agent(self) -> bool {
        matches!(
            self,
            NodeClass::Ego
                | NodeClass::Pedestrian
                | NodeClass::Car
                | NodeClass::Cyclist
                | NodeClass::Motorbike
                | NodeClass::Bus
                | NodeClass::TrafficLight
        )
    }

    pub fn is_dynamic_agent(self) -> bool {
        DYNAMIC_AGENTS.contains(&self)
    }

    pub fn is_location(self) -> bool {
        matches!(
            self,
            NodeClass::VehicleLane
                | NodeClass::OutgoingLane
                | NodeClass::OutgoingCycleLane
                | NodeClass::IncomingLane
                | NodeClass::IncomingCycleLane
                | NodeClass::Pavement
                | NodeClass::Junction
                | NodeClass::PedestrianCrossing
                | NodeClass::BusStop
                | NodeClass::Parking
        )
    }

    pub fn is_criticality_marker(self) -> bool {
        matches!(
            self,
            NodeClass::NearCollision | NodeClass::Near | NodeClass::Visible
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            NodeClass::Ego => "EGO",
            NodeClass::Pedestrian => "Pedestrian",
            NodeClass::Car => "Car",
            NodeClass::Cyclist => "Cyclist",
            NodeClass::Motorbike => "Motorbike",
            NodeClass::Bus => "Bus",
            NodeClass::TrafficLight => "TrafficLight",
            NodeClass::VehicleLane => "VehicleLane",
            NodeClass::OutgoingLane => "OutgoingLane",
            NodeClass::OutgoingCycleLane => "OutgoingCycleLane",
            NodeClass::IncomingLane => "IncomingLane",
            NodeClass::IncomingCycleLane => "IncomingCycleLane",
            NodeClass::Pavement => "Pavement",
            NodeClass::Junction => "Junction",
            NodeClass::PedestrianCrossing => "PedestrianCrossing",
            NodeClass::BusStop => "BusStop",
            NodeClass::Parking => "Parking",
            NodeClass::NearCollision => "NearCollision",
            NodeClass::Near => "Near",
            NodeClass::Visible => "Visible",
        }
    }
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Edge relation types: IsIn, agent actions, light states, relative motion,
/// traffic rules, discrete proximity, AV actions, and the criticality link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    IsIn,
    Move,
    Brake,
    Stop,
    IndicateLeft,
    IndicateRight,
    TurnLeft,
    TurnRight,
    Cross,
    Red,
    Amber,
    Green,
    MovingAway,
    MovingTowards,
    MustStop,
    NearCollision,
    Near,
    Visible,
    #[serde(rename = "AV-Move")]
    AvMove,
    #[serde(rename = "AV-MoveLeft")]
    AvMoveLeft,
    #[serde(rename = "AV-MoveRight")]
    AvMoveRight,
    #[serde(rename = "AV-Overtake")]
    AvOvertake,
    #[serde(rename = "AV-Stop")]
    AvStop,
    #[serde(rename = "AV-TurnLeft")]
    AvTurnLeft,
    #[serde(rename = "AV-TurnRight")]
    AvTurnRight,
    CriticalityLink,
}

pub const RELATION_COUNT: usize = 26;

pub const ALL_RELATIONS: [RelationType; RELATION_COUNT] = [
    RelationType::IsIn,
    RelationType::Move,
    RelationType::Brake,
    RelationType::Stop,
    RelationType::IndicateLeft,
    RelationType::IndicateRight,
    RelationType::TurnLeft,
    RelationType::TurnRight,
    RelationType::Cross,
    RelationType::Red,
    RelationType::Amber,
    RelationType::Green,
    RelationType::MovingAway,
    RelationType::MovingTowards,
    RelationType::MustStop,
    RelationType::NearCollision,
    RelationType::Near,
    RelationType::Visible,
    RelationType::AvMove,
    RelationType::AvMoveLeft,
    RelationType::AvMoveRight,
    RelationType::AvOvertake,
    RelationType::AvStop,
    RelationType::AvTurnLeft,
    RelationType::AvTurnRight,
    RelationType::CriticalityLink,
];

pub const AGENT_ACTIONS: [RelationType; 8] = [
    RelationType::Move,
    RelationType::Brake,
    RelationType::Stop,
    RelationType::IndicateLeft,
    RelationType::IndicateRight,
    RelationType::TurnLeft,
    RelationType::TurnRight,
    RelationType::Cross,
];

pub const LIGHT_STATES: [RelationType; 3] = [
    RelationType::Red,
    RelationType::Amber,
    RelationType::Green,
];

pub const PROXIMITY_RELATIONS: [RelationType; 3] = [
    RelationType::NearCollision,
    RelationType::Near,
    RelationType::Visible,
];

pub const RELATIVE_MOTION: [RelationType; 2] =
    [RelationType::MovingAway, RelationType::MovingTowards];

impl RelationType {
    pub fn is_agent_action(self) -> bool {
        AGENT_ACTIONS.contains(&self)
    }

    pub fn is_light_state(self) -> bool {
        LIGHT_STATES.contains(&self)
    }

    pub fn is_proximity(self) -> bool {
        PROXIMITY_RELATIONS.contains(&self)
    }

    pub fn is_relative_motion(self) -> bool {
        RELATIVE_MOTION.contains(&self)
    }

    pub fn is_av_action(self) -> bool {
        matches!(
            self,
            RelationType::AvMove
                | RelationType::AvMoveLeft
                | RelationType::AvMoveRight
                | RelationType::AvOvertake
                | RelationType::AvStop
                | RelationType::AvTurnLeft
                | RelationType::AvTurnRight
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            RelationType::IsIn => "IsIn",
            RelationType::Move => "Move",
            RelationType::Brake => "Brake",
            RelationType::Stop => "Stop",
            RelationType::IndicateLeft => "IndicateLeft",
            RelationType::IndicateRight => "IndicateRight",
            RelationType::TurnLeft => "TurnLeft",
            RelationType::TurnRight => "TurnRight",
            RelationType::Cross => "Cross",
            RelationType::Red => "Red",
            RelationType::Amber => "Amber",
            RelationType::Green => "Green",
            RelationType::MovingAway => "MovingAway",
            RelationType::MovingTowards => "MovingTowards",
            RelationType::MustStop => "MustStop",
            RelationType::NearCollision => "NearCollision",
            RelationType::Near => "Near",
            RelationType::Visible => "Visible",
            RelationType::AvMove => "AV-Move",
            RelationType::AvMoveLeft => "AV-MoveLeft",
            RelationType::AvMoveRight => "AV-MoveRight",
            RelationType::AvOvertake => "AV-Overtake",
            RelationType::AvStop => "AV-Stop",
            RelationType::AvTurnLeft => "AV-TurnLeft",
            RelationType::AvTurnRight => "AV-TurnRight",
            RelationType::CriticalityLink => "CriticalityLink",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Scenario criticality, ordered least to most severe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criticality {
    Visible,
    Near,
    NearCollision,
}

pub const ALL_CRITICALITIES: [Criticality; 3] = [
    Criticality::Visible,
    Criticality::Near,
    Criticality::NearCollision,
];

impl Criticality {
    pub fn proximity_relation(self) -> RelationType {
        match self {
            Criticality::Visible => RelationType::Visible,
            Criticality::Near => RelationType::Near,
            Criticality::NearCollision => RelationType::NearCollision,
        }
    }

    pub fn node_class(self) -> NodeClass {
        match self {
            Criticality::Visible => NodeClass::Visible,
            Criticality::Near => NodeClass::Near,
            Criticality::NearCollision => NodeClass::NearCollision,
        }
    }

    pub fn from_proximity_relation(rel: RelationType) -> Option<Criticality> {
        match rel {
            RelationType::Visible => Some(Criticality::Visible),
            RelationType::Near => Some(Criticality::Near),
            RelationType::NearCollision => Some(Criticality::NearCollision),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Criticality::Visible => "Visible",
            Criticality::Near => "Near",
            Criticality::NearCollision => "NearCollision",
        }
    }
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The ego-vehicle maneuver label of a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AvAction {
    #[serde(rename = "AV-Move")]
    Move,
    #[serde(rename = "AV-MoveLeft")]
    MoveLeft,
    #[serde(rename = "AV-MoveRight")]
    MoveRight,
    #[serde(rename = "AV-Overtake")]
    Overtake,
    #[serde(rename = "AV-Stop")]
    Stop,
    #[serde(rename = "AV-TurnLeft")]
    TurnLeft,
    #[serde(rename = "AV-TurnRight")]
    TurnRight,
}

pub const ALL_AV_ACTIONS: [AvAction; 7] = [
    AvAction::Move,
    AvAction::MoveLeft,
    AvAction::MoveRight,
    AvAction::Overtake,
    AvAction::Stop,
    AvAction::TurnLeft,
    AvAction::TurnRight,
];

impl AvAction {
    pub fn relation(self) -> RelationType {
        match self {
            AvAction::Move => RelationType::AvMove,
            AvAction::MoveLeft => RelationType::AvMoveLeft,
            AvAction::MoveRight => RelationType::AvMoveRight,
            AvAction::Overtake => RelationType::AvOvertake,
            AvAction::Stop => RelationType::AvStop,
            AvAction::TurnLeft => RelationType::AvTurnLeft,
            AvAction::TurnRight => RelationType::AvTurnRight,
        }
    }

    pub fn from_relation(rel: RelationType) -> Option<AvAction> {
        match rel {
            RelationType::AvMove => Some(AvAction::Move),
            RelationType::AvMoveLeft => Some(AvAction::MoveLeft),
            RelationType::AvMoveRight => Some(AvAction::MoveRight),
            RelationType::AvOvertake => Some(AvAction::Overtake),
            RelationType::AvStop => Some(AvAction::Stop),
            RelationType::AvTurnLeft => Some(AvAction::TurnLeft),
            RelationType::AvTurnRight => Some(AvAction::TurnRight),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        self.relation().label()
    }
}

impl fmt::Display for AvAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Serialized form of the schema, used for the JSON override file.
#[derive(Serialize, Deserialize)]
pub struct OntologySpec {
    pub node_classes: Vec<NodeClass>,
    pub relations: Vec<RelationType>,
    pub triplets: Vec<(NodeClass, RelationType, NodeClass)>,
    pub exclusion_groups: Vec<Vec<RelationType>>,
    pub severity_order: Vec<Criticality>,
}

/// The compiled schema: vocabulary orders, triplet validity table,
/// exclusion groups, and severity ranking. Immutable after construction.
pub struct Ontology {
    node_order: Vec<NodeClass>,
    relation_order: Vec<RelationType>,
    node_index: Vec<usize>,
    relation_index: Vec<usize>,
    triplets: HashSet<(NodeClass, RelationType, NodeClass)>,
    exclusion_groups: Vec<Vec<RelationType>>,
    severity_order: Vec<Criticality>,
}

static BUILTIN: OnceLock<Ontology> = OnceLock::new();

impl Ontology {
    /// The built-in schema derived from the traffic-domain table.
    pub fn builtin() -> &'static Ontology {
        BUILTIN.get_or_init(|| {
            Ontology::from_spec(builtin_spec()).expect("built-in ontology is valid")
        })
    }

    pub fn from_spec(spec: OntologySpec) -> Result<Ontology, OntologyError> {
        if spec.node_classes.len() != NODE_CLASS_COUNT {
            return Err(OntologyError::Schema(format!(
                "expected {} node classes, got {}",
                NODE_CLASS_COUNT,
                spec.node_classes.len()
            )));
        }
        if spec.relations.len() != RELATION_COUNT {
            return Err(OntologyError::Schema(format!(
                "expected {} relations, got {}",
                RELATION_COUNT,
                spec.relations.len()
            )));
        }
        let mut node_index = vec![usize::MAX; NODE_CLASS_COUNT];
        for (i, cls) in spec.node_classes.iter().enumerate() {
            let d = *cls as usize;
            if node_index[d] != usize::MAX {
                return Err(OntologyError::Schema(format!("duplicate node class {cls}")));
            }
            node_index[d] = i;
        }
        let mut relation_index = vec![usize::MAX; RELATION_COUNT];
        for (i, rel) in spec.relations.iter().enumerate() {
            let d = *rel as usize;
            if relation_index[d] != usize::MAX {
                return Err(OntologyError::Schema(format!("duplicate relation {rel}")));
            }
            relation_index[d] = i;
        }
        let mut seen = HashSet::new();
        for group in &spec.exclusion_groups {
            for rel in group {
                if !seen.insert(*rel) {
                    return Err(OntologyError::Schema(format!(
                        "relation {rel} appears in two exclusion groups"
                    )));
                }
            }
        }
        if spec.severity_order.len() != 3 {
            return Err(OntologyError::Schema(
                "severity_order must list all three criticalities".into(),
            ));
        }
        let mut crit_seen = HashSet::new();
        for c in &spec.severity_order {
            if !crit_seen.insert(*c) {
                return Err(OntologyError::Schema(format!("duplicate criticality {c}")));
            }
        }
        Ok(Ontology {
            node_order: spec.node_classes,
            relation_order: spec.relations,
            node_index,
            relation_index,
            triplets: spec.triplets.into_iter().collect(),
            exclusion_groups: spec.exclusion_groups,
            severity_order: spec.severity_order,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Ontology, OntologyError> {
        Ontology::from_spec(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Ontology, OntologyError> {
        Ontology::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_spec(&self) -> OntologySpec {
        let mut triplets: Vec<_> = self.triplets.iter().copied().collect();
        triplets.sort_by_key(|(s, r, o)| (*s as usize, *r as usize, *o as usize));
        OntologySpec {
            node_classes: self.node_order.clone(),
            relations: self.relation_order.clone(),
            triplets,
            exclusion_groups: self.exclusion_groups.clone(),
            severity_order: self.severity_order.clone(),
        }
    }

    /// All relations in fixed index order.
    pub fn relation_vocabulary(&self) -> &[RelationType] {
        &self.relation_order
    }

    pub fn node_vocabulary(&self) -> &[NodeClass] {
        &self.node_order
    }

    pub fn node_index(&self, cls: NodeClass) -> usize {
        self.node_index[cls as usize]
    }

    pub fn relation_index(&self, rel: RelationType) -> usize {
        self.relation_index[rel as usize]
    }

    /// Width of a node feature vector: one-hot classes plus 2 positional slots.
    pub fn node_feature_width(&self) -> usize {
        NODE_CLASS_COUNT + 2
    }

    /// Width of an edge feature vector: one-hot relations plus normalized tau.
    pub fn edge_feature_width(&self) -> usize {
        RELATION_COUNT + 1
    }

    pub fn validate_triplet(&self, subject: NodeClass, rel: RelationType, object: NodeClass) -> bool {
        self.triplets.contains(&(subject, rel, object))
    }

    /// Relations the model may predict between the ego and an object of the
    /// given class, in relation index order. The criticality link, AV actions,
    /// and traffic-rule edges are never candidates.
    pub fn ego_candidate_relations(
        &self,
        object_class: NodeClass,
    ) -> Result<Vec<RelationType>, OntologyError> {
        if object_class == NodeClass::Ego {
            return Err(OntologyError::EgoCandidateObject);
        }
        let mut out = Vec::new();
        for rel in &self.relation_order {
            let predictable = *rel == RelationType::IsIn
                || rel.is_proximity()
                || rel.is_relative_motion();
            if !predictable {
                continue;
            }
            if self.validate_triplet(NodeClass::Ego, *rel, object_class)
                || self.validate_triplet(object_class, *rel, NodeClass::Ego)
            {
                out.push(*rel);
            }
        }
        Ok(out)
    }

    /// Total order NearCollision > Near > Visible, encoded 2 > 1 > 0.
    pub fn severity_rank(&self, c: Criticality) -> usize {
        self.severity_order
            .iter()
            .position(|&s| s == c)
            .expect("severity order covers all criticalities")
    }

    pub fn max_severity<I: IntoIterator<Item = Criticality>>(&self, items: I) -> Option<Criticality> {
        items.into_iter().max_by_key(|c| self.severity_rank(*c))
    }

    pub fn exclusion_groups(&self) -> &[Vec<RelationType>] {
        &self.exclusion_groups
    }

    pub fn exclusion_group_of(&self, rel: RelationType) -> Option<&[RelationType]> {
        self.exclusion_groups
            .iter()
            .find(|g| g.contains(&rel))
            .map(|g| g.as_slice())
    }
}

fn builtin_spec() -> OntologySpec {
    let mut triplets = Vec::new();
    // Agent positions: IsIn links from every agent (ego included) to locations.
    for agent in ALL_NODE_CLASSES.iter().filter(|c| c.is_agent()) {
        for loc in ALL_NODE_CLASSES.iter().filter(|c| c.is_location()) {
            triplets.push((*agent, RelationType::IsIn, *loc));
        }
    }
    // Agent states as self-relations.
    for agent in DYNAMIC_AGENTS {
        for act in AGENT_ACTIONS {
            triplets.push((agent, act, agent));
        }
    }
    // Traffic light colour as a self-relation.
    for colour in LIGHT_STATES {
        triplets.push((NodeClass::TrafficLight, colour, NodeClass::TrafficLight));
    }
    // Relative motion towards/away from the ego; lights are static.
    for agent in DYNAMIC_AGENTS {
        for rel in RELATIVE_MOTION {
            triplets.push((agent, rel, NodeClass::Ego));
        }
    }
    // Discrete proximity between agents (lights included) and the ego.
    for agent in ALL_NODE_CLASSES
        .iter()
        .filter(|c| c.is_dynamic_agent() || **c == NodeClass::TrafficLight)
    {
        for rel in PROXIMITY_RELATIONS {
            triplets.push((*agent, rel, NodeClass::Ego));
        }
    }
    // Traffic rule: agents must stop for a red light.
    for agent in [NodeClass::Car, NodeClass::Bus, NodeClass::Motorbike, NodeClass::Cyclist] {
        triplets.push((agent, RelationType::MustStop, NodeClass::TrafficLight));
    }
    // AV action self-loop on the ego.
    for av in ALL_AV_ACTIONS {
        triplets.push((NodeClass::Ego, av.relation(), NodeClass::Ego));
    }
    // Criticality marker node linking to the ego.
    for c in ALL_CRITICALITIES {
        triplets.push((c.node_class(), RelationType::CriticalityLink, NodeClass::Ego));
    }

    OntologySpec {
        node_classes: ALL_NODE_CLASSES.to_vec(),
        relations: ALL_RELATIONS.to_vec(),
        triplets,
        exclusion_groups: vec![
            vec![RelationType::MovingAway, RelationType::MovingTowards],
            vec![
                RelationType::NearCollision,
                RelationType::Near,
                RelationType::Visible,
            ],
            vec![RelationType::Red, RelationType::Amber, RelationType::Green],
            vec![RelationType::Move, RelationType::Brake, RelationType::Stop],
            vec![RelationType::TurnLeft, RelationType::TurnRight],
            vec![RelationType::IndicateLeft, RelationType::IndicateRight],
            vec![
                RelationType::AvMove,
                RelationType::AvMoveLeft,
                RelationType::AvMoveRight,
                RelationType::AvOvertake,
                RelationType::AvStop,
                RelationType::AvTurnLeft,
                RelationType::AvTurnRight,
            ],
        ],
        severity_order: vec![
            Criticality::Visible,
            Criticality::Near,
            Criticality::NearCollision,
        ],
    }
}
