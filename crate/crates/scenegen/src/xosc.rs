//! OpenSCENARIO-subset emitter: deterministic, byte-stable XML for scenario
//! scripts, plus a structural validator driven by the bundled subset schema.

use crate::ontology::NodeClass;
use crate::scenario::{Heading, ScenarioScript};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Longitudinal origin of the ego so spawn offsets stay on the road.
pub const EGO_START_S: f64 = 100.0;
/// Nominal ego speed used for the emitted speed plan.
pub const EGO_NOMINAL_SPEED: f64 = 8.0;
/// Playback horizon mirrored into the storyboard stop trigger.
pub const STOP_TIME_S: f64 = 15.0;

pub const SUBSET_SCHEMA_JSON: &str = include_str!("../assets/openscenario_subset.schema.json");

#[derive(Error, Debug)]
pub enum XoscError {
    #[error("xml parse error: {0}")]
    Parse(String),
    #[error("schema violation at <{element}>: {message}")]
    Schema { element: String, message: String },
    #[error("schema file is invalid: {0}")]
    BadSchema(#[from] serde_json::Error),
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0');
        s.trim_end_matches('.').to_string()
    }
}

struct Xml {
    out: String,
    depth: usize,
}

impl Xml {
    fn new() -> Xml {
        Xml {
            out: String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"),
            depth: 0,
        }
    }

    fn open(&mut self, tag: &str, attrs: &[(&str, String)]) {
        self.line(tag, attrs, false);
        self.depth += 1;
    }

    fn close(&mut self, tag: &str) {
        self.depth -= 1;
        let _ = writeln!(self.out, "{}</{tag}>", "  ".repeat(self.depth));
    }

    fn empty(&mut self, tag: &str, attrs: &[(&str, String)]) {
        self.line(tag, attrs, true);
    }

    fn line(&mut self, tag: &str, attrs: &[(&str, String)], self_close: bool) {
        let _ = write!(self.out, "{}<{tag}", "  ".repeat(self.depth));
        for (k, v) in attrs {
            let _ = write!(self.out, " {k}=\"{v}\"");
        }
        let _ = writeln!(self.out, "{}>", if self_close { "/" } else { "" });
    }
}

fn entity_name(track: u32) -> String {
    format!("actor_{track}")
}

fn speed_action(xml: &mut Xml, target: f64) {
    xml.open("LongitudinalAction", &[]);
    xml.open("SpeedAction", &[]);
    xml.empty(
        "SpeedActionDynamics",
        &[
            ("dynamicsShape", "step".into()),
            ("value", "0".into()),
            ("dynamicsDimension", "time".into()),
        ],
    );
    xml.open("SpeedActionTarget", &[]);
    xml.empty("AbsoluteTargetSpeed", &[("value", fmt_num(target))]);
    xml.close("SpeedActionTarget");
    xml.close("SpeedAction");
    xml.close("LongitudinalAction");
}

fn lane_change_action(xml: &mut Xml, target_lane: i32) {
    xml.open("LateralAction", &[]);
    xml.open("LaneChangeAction", &[]);
    xml.empty(
        "LaneChangeActionDynamics",
        &[
            ("dynamicsShape", "sinusoidal".into()),
            ("value", "1.5".into()),
            ("dynamicsDimension", "time".into()),
        ],
    );
    xml.open("LaneChangeTarget", &[]);
    xml.empty("AbsoluteTargetLane", &[("value", target_lane.to_string())]);
    xml.close("LaneChangeTarget");
    xml.close("LaneChangeAction");
    xml.close("LateralAction");
}

fn sim_time_trigger(xml: &mut Xml, name: &str, time: f64) {
    xml.open("StartTrigger", &[]);
    xml.open("ConditionGroup", &[]);
    xml.open(
        "Condition",
        &[
            ("name", name.to_string()),
            ("delay", "0".into()),
            ("conditionEdge", "rising".into()),
        ],
    );
    xml.open("ByValueCondition", &[]);
    xml.empty(
        "SimulationTimeCondition",
        &[("value", fmt_num(time)), ("rule", "greaterThan".into())],
    );
    xml.close("ByValueCondition");
    xml.close("Condition");
    xml.close("ConditionGroup");
    xml.close("StartTrigger");
}

struct PlannedEvent {
    entity: String,
    label: String,
    time: f64,
    kind: EventKind,
}

enum EventKind {
    Speed(f64),
    LaneChange(i32),
}

/// Emits the script as deterministic OpenSCENARIO-subset XML: entities,
/// teleport + speed init, and timed speed / lane-change events per tau.
pub fn emit_openscenario(script: &ScenarioScript) -> String {
    let mut xml = Xml::new();
    xml.open("OpenSCENARIO", &[]);
    xml.empty(
        "FileHeader",
        &[
            ("revMajor", "1".into()),
            ("revMinor", "0".into()),
            ("date", "1970-01-01T00:00:00".into()),
            ("description", "generated traffic scenario".into()),
            ("author", "scenegen".into()),
        ],
    );

    // Entities: the ego followed by actors in script order.
    xml.open("Entities", &[]);
    xml.open("ScenarioObject", &[("name", "ego".into())]);
    xml.empty(
        "Vehicle",
        &[("name", "ego".into()), ("vehicleCategory", "car".into())],
    );
    xml.close("ScenarioObject");
    for actor in &script.actors {
        let name = entity_name(actor.track);
        xml.open("ScenarioObject", &[("name", name.clone())]);
        if actor.cls == NodeClass::Pedestrian {
            xml.empty(
                "Pedestrian",
                &[
                    ("name", name.clone()),
                    ("pedestrianCategory", "pedestrian".into()),
                ],
            );
        } else {
            let category = match actor.cls {
                NodeClass::Bus => "bus",
                NodeClass::Motorbike => "motorbike",
                NodeClass::Cyclist => "bicycle",
                _ => "car",
            };
            xml.empty(
                "Vehicle",
                &[("name", name.clone()), ("vehicleCategory", category.into())],
            );
        }
        xml.close("ScenarioObject");
    }
    xml.close("Entities");

    xml.open("Storyboard", &[]);
    xml.open("Init", &[]);
    xml.open("Actions", &[]);

    let teleport = |xml: &mut Xml, lane: i32, s: f64| {
        xml.open("PrivateAction", &[]);
        xml.open("TeleportAction", &[]);
        xml.open("Position", &[]);
        xml.empty(
            "LanePosition",
            &[
                ("roadId", "0".into()),
                ("laneId", lane.to_string()),
                ("s", fmt_num(s)),
                ("offset", "0".into()),
            ],
        );
        xml.close("Position");
        xml.close("TeleportAction");
        xml.close("PrivateAction");
    };

    xml.open("Private", &[("entityRef", "ego".into())]);
    teleport(&mut xml, script.ego.lanes[0], EGO_START_S);
    xml.open("PrivateAction", &[]);
    speed_action(
        &mut xml,
        script.ego.speed_fractions[0] * EGO_NOMINAL_SPEED,
    );
    xml.close("PrivateAction");
    xml.close("Private");

    for actor in &script.actors {
        xml.open("Private", &[("entityRef", entity_name(actor.track))]);
        teleport(&mut xml, actor.spawn.0, EGO_START_S + actor.spawn.1);
        xml.open("PrivateAction", &[]);
        speed_action(&mut xml, actor.timeline[0].target_speed);
        xml.close("PrivateAction");
        xml.close("Private");
    }
    xml.close("Actions");
    xml.close("Init");

    // Timed events: one per speed or lane change at tau >= 1.
    let mut events: Vec<PlannedEvent> = Vec::new();
    for tau in 1..script.ego.speed_fractions.len() {
        if script.ego.speed_fractions[tau] != script.ego.speed_fractions[tau - 1] {
            events.push(PlannedEvent {
                entity: "ego".into(),
                label: format!("ego_tau_{tau}_speed"),
                time: tau as f64 * script.tau_interval_s,
                kind: EventKind::Speed(script.ego.speed_fractions[tau] * EGO_NOMINAL_SPEED),
            });
        }
        if script.ego.lanes[tau] != script.ego.lanes[tau - 1] {
            events.push(PlannedEvent {
                entity: "ego".into(),
                label: format!("ego_tau_{tau}_lane"),
                time: tau as f64 * script.tau_interval_s,
                kind: EventKind::LaneChange(script.ego.lanes[tau]),
            });
        }
    }
    for actor in &script.actors {
        // Crossing pedestrians are driven laterally by the playback model;
        // their storyboard carries only speed changes.
        let name = entity_name(actor.track);
        for tau in 1..actor.timeline.len() {
            let (prev, step) = (&actor.timeline[tau - 1], &actor.timeline[tau]);
            if step.target_speed != prev.target_speed {
                events.push(PlannedEvent {
                    entity: name.clone(),
                    label: format!("{name}_tau_{tau}_speed"),
                    time: tau as f64 * script.tau_interval_s,
                    kind: EventKind::Speed(step.target_speed),
                });
            }
            if step.lane != prev.lane && actor.heading != Heading::Crossing {
                events.push(PlannedEvent {
                    entity: name.clone(),
                    label: format!("{name}_tau_{tau}_lane"),
                    time: tau as f64 * script.tau_interval_s,
                    kind: EventKind::LaneChange(step.lane),
                });
            }
        }
    }

    xml.open("Story", &[("name", "story".into())]);
    xml.open("Act", &[("name", "act".into())]);
    let mut by_entity: BTreeMap<String, Vec<&PlannedEvent>> = BTreeMap::new();
    for ev in &events {
        by_entity.entry(ev.entity.clone()).or_default().push(ev);
    }
    for (entity, entity_events) in &by_entity {
        xml.open(
            "ManeuverGroup",
            &[
                ("maximumExecutionCount", "1".into()),
                ("name", format!("group_{entity}")),
            ],
        );
        xml.open("Actors", &[("selectTriggeringEntities", "false".into())]);
        xml.empty("EntityRef", &[("entityRef", entity.clone())]);
        xml.close("Actors");
        xml.open("Maneuver", &[("name", format!("{entity}_behavior"))]);
        for ev in entity_events {
            xml.open(
                "Event",
                &[("name", ev.label.clone()), ("priority", "overwrite".into())],
            );
            xml.open("Action", &[("name", format!("{}_action", ev.label))]);
            xml.open("PrivateAction", &[]);
            match ev.kind {
                EventKind::Speed(target) => speed_action(&mut xml, target),
                EventKind::LaneChange(lane) => lane_change_action(&mut xml, lane),
            }
            xml.close("PrivateAction");
            xml.close("Action");
            sim_time_trigger(&mut xml, &format!("{}_start", ev.label), ev.time);
            xml.close("Event");
        }
        xml.close("Maneuver");
        xml.close("ManeuverGroup");
    }
    sim_time_trigger(&mut xml, "act_start", 0.0);
    xml.close("Act");
    xml.close("Story");
    xml.open("StopTrigger", &[]);
    xml.open("ConditionGroup", &[]);
    xml.open(
        "Condition",
        &[
            ("name", "end".into()),
            ("delay", "0".into()),
            ("conditionEdge", "rising".into()),
        ],
    );
    xml.open("ByValueCondition", &[]);
    xml.empty(
        "SimulationTimeCondition",
        &[("value", fmt_num(STOP_TIME_S)), ("rule", "greaterThan".into())],
    );
    xml.close("ByValueCondition");
    xml.close("Condition");
    xml.close("ConditionGroup");
    xml.close("StopTrigger");
    xml.close("Storyboard");
    xml.close("OpenSCENARIO");
    xml.out
}

// ---------------------------------------------------------------------------
// Subset schema validation
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct SchemaElement {
    #[serde(default)]
    attrs: BTreeMap<String, String>,
    #[serde(default)]
    children: BTreeMap<String, (usize, i64)>,
    #[serde(default)]
    choice: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct SubsetSchema {
    root: String,
    elements: BTreeMap<String, SchemaElement>,
}

struct XmlNode {
    name: String,
    attrs: BTreeMap<String, String>,
    children: Vec<XmlNode>,
}

fn parse_xml(text: &str) -> Result<XmlNode, XoscError> {
    use quick_xml::events::{BytesStart, Event};
    let mut reader = quick_xml::Reader::from_str(text);
    let mut stack: Vec<XmlNode> = Vec::new();
    let mut root: Option<XmlNode> = None;
    let build_node = |e: &BytesStart| -> Result<XmlNode, XoscError> {
        let name = String::from_utf8_lossy(e.name().as_ref()).to_string();
        let mut attrs = BTreeMap::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| XoscError::Parse(err.to_string()))?;
            attrs.insert(
                String::from_utf8_lossy(attr.key.as_ref()).to_string(),
                attr.normalized_value(quick_xml::XmlVersion::Implicit1_0)
                    .map_err(|err| XoscError::Parse(err.to_string()))?
                    .to_string(),
            );
        }
        Ok(XmlNode {
            name,
            attrs,
            children: Vec::new(),
        })
    };
    loop {
        match reader.read_event() {
            Ok(Event::Start(e)) => {
                stack.push(build_node(&e)?);
            }
            Ok(Event::Empty(e)) => {
                let node = build_node(&e)?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None => root = Some(node),
                }
            }
            Ok(Event::End(_)) => {
                let node = stack.pop().ok_or_else(|| {
                    XoscError::Parse("unbalanced closing tag".into())
                })?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None => root = Some(node),
                }
            }
            Ok(Event::Eof) => break,
            Ok(Event::Decl(_)) | Ok(Event::Text(_)) | Ok(Event::Comment(_)) => {}
            Ok(other) => {
                return Err(XoscError::Parse(format!("unexpected xml event {other:?}")))
            }
            Err(err) => return Err(XoscError::Parse(err.to_string())),
        }
    }
    root.ok_or_else(|| XoscError::Parse("no root element".into()))
}

fn check_node(node: &XmlNode, schema: &SubsetSchema) -> Result<(), XoscError> {
    let spec = schema.elements.get(&node.name).ok_or_else(|| XoscError::Schema {
        element: node.name.clone(),
        message: "element not in subset schema".into(),
    })?;
    for (attr, requirement) in &spec.attrs {
        if requirement == "required" && !node.attrs.contains_key(attr) {
            return Err(XoscError::Schema {
                element: node.name.clone(),
                message: format!("missing required attribute {attr}"),
            });
        }
    }
    for attr in node.attrs.keys() {
        if !spec.attrs.contains_key(attr) {
            return Err(XoscError::Schema {
                element: node.name.clone(),
                message: format!("unknown attribute {attr}"),
            });
        }
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for child in &node.children {
        if !spec.children.contains_key(&child.name) {
            return Err(XoscError::Schema {
                element: node.name.clone(),
                message: format!("unexpected child <{}>", child.name),
            });
        }
        *counts.entry(child.name.as_str()).or_insert(0) += 1;
    }
    for (name, (min, max)) in &spec.children {
        let n = counts.get(name.as_str()).copied().unwrap_or(0);
        if n < *min || (*max >= 0 && n as i64 > *max) {
            return Err(XoscError::Schema {
                element: node.name.clone(),
                message: format!("child <{name}> count {n} outside [{min}, {max}]"),
            });
        }
    }
    for group in &spec.choice {
        let n: usize = group
            .iter()
            .map(|name| counts.get(name.as_str()).copied().unwrap_or(0))
            .sum();
        if n != 1 {
            return Err(XoscError::Schema {
                element: node.name.clone(),
                message: format!("exactly one of {group:?} required, found {n}"),
            });
        }
    }
    for child in &node.children {
        check_node(child, schema)?;
    }
    Ok(())
}

/// Validates an emitted document against the bundled subset schema.
pub fn validate_xosc(xml: &str) -> Result<(), XoscError> {
    let schema: SubsetSchema = serde_json::from_str(SUBSET_SCHEMA_JSON)?;
    let root = parse_xml(xml)?;
    if root.name != schema.root {
        return Err(XoscError::Schema {
            element: root.name,
            message: format!("root must be <{}>", schema.root),
        });
    }
    check_node(&root, &schema)
}

/// Writes the bundled subset schema alongside emitted artifacts.
pub fn write_schema(path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, SUBSET_SCHEMA_JSON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TemporalGraph;
    use crate::ingest::window_to_graph;
    use crate::ontology::Ontology;
    use crate::scenario::{graph_to_script, Handedness, SpawnBands};
    use crate::synth::{generate_synthetic, synth_windows, SynthConfig};

    fn sample_scripts(n: usize, seed: u64) -> Vec<ScenarioScript> {
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
            .map(|w| {
                let g: TemporalGraph = window_to_graph(w, ont).unwrap();
                graph_to_script(&g, &SpawnBands::default(), Handedness::Right, ont).unwrap()
            })
            .collect()
    }

    #[test]
    fn entity_count_matches_actors() {
        let scripts = sample_scripts(5, 61);
        for script in &scripts {
            let xml = emit_openscenario(script);
            let n = xml.matches("<ScenarioObject").count();
            assert_eq!(n, script.actors.len() + 1);
        }
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let scripts = sample_scripts(3, 67);
        for script in &scripts {
            assert_eq!(emit_openscenario(script), emit_openscenario(script));
        }
    }

    #[test]
    fn emitted_documents_validate() {
        for script in sample_scripts(20, 71) {
            let xml = emit_openscenario(&script);
            validate_xosc(&xml).unwrap_or_else(|e| panic!("{e}\n{xml}"));
        }
    }

    #[test]
    fn validator_rejects_foreign_elements() {
        let script = &sample_scripts(1, 73)[0];
        let xml = emit_openscenario(script);
        let tampered = xml.replace("<Entities>", "<Entities><Rogue/>");
        assert!(validate_xosc(&tampered).is_err());
        let missing_attr = xml.replace(" rule=\"greaterThan\"", "");
        assert!(validate_xosc(&missing_attr).is_err());
    }

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(20.0), "20");
        assert_eq!(fmt_num(2.0833333333), "2.083");
        assert_eq!(fmt_num(5.5), "5.5");
        assert_eq!(fmt_num(-4.0), "-4");
    }
}
