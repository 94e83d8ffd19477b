//! Prompt rendering, response parsing and interchangeable text backends for
//! constraint generation.
//!
//! Code blocks in responses are counted but never executed; only the
//! constraint block (and optional planner overrides) is consumed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::casedb::{resolve_constraints, MitigationConfig, SlotMap, SLOT_NAMES, UNKNOWN};
use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::planner::{AttemptRecord, Proposal, ProposalSource};

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AdapterError {
    #[error("prompt context incomplete: {0}")]
    IncompleteContext(String),
    #[error("backend timed out after {0} s")]
    Timeout(u64),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no fixture for prompt {hash} (case {case_id}, attempt {attempt})")]
    FixtureMiss {
        hash: String,
        case_id: String,
        attempt: usize,
    },
    #[error("unparsable response: {0}")]
    Parse(String),
}

/// What the prompt is rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub case_id: String,
    /// Short textual description of the detected work-zone objects.
    pub scene_summary: String,
    /// Image with the failed trajectory drawn in green.
    pub failure_overlay: String,
    /// Image with the reference trajectory drawn in red.
    pub gt_overlay: String,
    pub attempt: usize,
    pub feedback: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    pub images: Vec<String>,
    pub version: u32,
    pub case_id: String,
    pub attempt: usize,
}

impl PromptBundle {
    /// Hex SHA-256 of the rendered text; the replay key.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

pub fn render_prompt(ctx: &PromptContext) -> Result<PromptBundle, AdapterError> {
    render_prompt_version(ctx, TEMPLATE_VERSION)
}

pub fn render_prompt_version(ctx: &PromptContext, version: u32) -> Result<PromptBundle, AdapterError> {
    for (name, value) in [
        ("case id", &ctx.case_id),
        ("failure overlay", &ctx.failure_overlay),
        ("reference overlay", &ctx.gt_overlay),
    ] {
        if value.trim().is_empty() {
            return Err(AdapterError::IncompleteContext(format!("missing {name}")));
        }
    }
    let mut t = String::new();
    let _ = writeln!(t, "# Work-zone mitigation prompt (template v{version})");
    let _ = writeln!(t, "Case: {}", ctx.case_id);
    let _ = writeln!(t, "Attempt: {}", ctx.attempt);
    t.push_str("\n## Background\n");
    t.push_str(
        "You are helping a vehicle pass a road work zone. The first attached image shows \
         the trajectory the vehicle planned, in green, which failed. The second image shows \
         the reference trajectory in red.\n",
    );
    let _ = writeln!(t, "Images: {} ; {}", ctx.failure_overlay, ctx.gt_overlay);
    let _ = writeln!(t, "Detected objects: {}", ctx.scene_summary);
    t.push_str("\n## Task\n");
    t.push_str(
        "Explain why the green trajectory fails, then state the driving rules that fix it \
         by filling in the template below.\n",
    );
    t.push_str("\n## Constraints Template\n");
    t.push_str("Replace every \"UNKNOWN\" value.\n```json\n{\n  \"constraints\": {\n");
    for (i, slot) in SLOT_NAMES.iter().enumerate() {
        let comma = if i + 1 < SLOT_NAMES.len() { "," } else { "" };
        let _ = writeln!(t, "    \"{slot}\": \"{UNKNOWN}\"{comma}");
    }
    t.push_str("  }\n}\n```\n");
    t.push_str("Allowed values: no_cross_workzone yes|no; detour_side left|right|none; all other slots True|False.\n");
    t.push_str("\n## Code Requirements\n");
    t.push_str(
        "Optionally add a \"planner\" object next to \"constraints\" with any of \
         inflation_margin, cluster_gap, follow_gap (pixels) and destination_offset [dx, dy].\n",
    );
    t.push_str("\n## Expected Results\n");
    t.push_str("Reply with the completed JSON block first, then any explanation.\n");
    if !ctx.feedback.is_empty() {
        t.push_str("\n## Feedback\n");
        for f in &ctx.feedback {
            let _ = writeln!(t, "- {f}");
        }
    }
    Ok(PromptBundle {
        text: t,
        images: vec![ctx.failure_overlay.clone(), ctx.gt_overlay.clone()],
        version,
        case_id: ctx.case_id.clone(),
        attempt: ctx.attempt,
    })
}

/// Partial overrides of the default mitigation config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerOverrides {
    pub inflation_margin: Option<f64>,
    pub cluster_gap: Option<f64>,
    pub follow_gap: Option<f64>,
    pub destination_offset: Option<PixelPoint>,
}

impl PlannerOverrides {
    pub fn apply(&self, base: MitigationConfig) -> MitigationConfig {
        MitigationConfig {
            inflation_margin: self.inflation_margin.unwrap_or(base.inflation_margin),
            cluster_gap: self.cluster_gap.unwrap_or(base.cluster_gap),
            follow_gap: self.follow_gap.unwrap_or(base.follow_gap),
            destination_offset: self.destination_offset.unwrap_or(base.destination_offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub raw: String,
    pub slots: SlotMap,
    pub planner: PlannerOverrides,
    pub code_blocks: usize,
    pub diagnostics: Vec<String>,
}

fn slot_value(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(if *b { "True" } else { "False" }.to_owned()),
        Value::Null => Some(UNKNOWN.to_owned()),
        _ => None,
    }
}

/// Extracts the first JSON object holding a `constraints` object (or that
/// is itself a slot map).
pub fn parse_constraints(raw: &str) -> Result<AdapterResponse, AdapterError> {
    let code_blocks = raw
        .match_indices("```")
        .filter(|(i, _)| raw[i + 3..].starts_with("python"))
        .count();
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        let Some(Ok(Value::Object(obj))) = stream.next() else {
            continue;
        };
        let (slots_obj, planner) = match obj.get("constraints") {
            Some(Value::Object(c)) => (c.clone(), obj.get("planner").cloned()),
            Some(_) => continue,
            None if obj.keys().any(|k| SLOT_NAMES.contains(&k.as_str())) => (obj.clone(), None),
            None => continue,
        };
        let mut diagnostics = Vec::new();
        let mut slots = SlotMap::new();
        for (k, v) in &slots_obj {
            if !SLOT_NAMES.contains(&k.as_str()) {
                diagnostics.push(format!("unknown slot {k:?} ignored"));
                continue;
            }
            match slot_value(v) {
                Some(s) => {
                    slots.insert(k.clone(), s);
                }
                None => diagnostics.push(format!("slot {k:?} has non-scalar value {v}")),
            }
        }
        for s in SLOT_NAMES {
            if !slots.contains_key(s) {
                diagnostics.push(format!("missing slot {s:?}"));
            }
        }
        let planner = match planner {
            None | Some(Value::Null) => PlannerOverrides::default(),
            Some(p) => serde_json::from_value(p).map_err(|e| AdapterError::Parse(format!("bad planner block: {e}")))?,
        };
        return Ok(AdapterResponse {
            raw: raw.to_owned(),
            slots,
            planner,
            code_blocks,
            diagnostics,
        });
    }
    Err(AdapterError::Parse("no constraints block found".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key: String,
    pub response: String,
}

/// Scripted or recorded responses. Keys are prompt hashes, `case:<id>#<attempt>`
/// or `case:<id>`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub entries: Vec<FixtureEntry>,
}

impl FixtureFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| crate::scene_graph::json_error(&text, &e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fixtures serialize") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn table(&self) -> BTreeMap<&str, &str> {
        // First entry wins for duplicate keys.
        let mut t = BTreeMap::new();
        for e in &self.entries {
            t.entry(e.key.as_str()).or_insert(e.response.as_str());
        }
        t
    }
}

pub trait Backend: Send + Sync {
    fn generate_raw(&self, prompt: &PromptBundle) -> Result<String, AdapterError>;

    fn generate(&self, prompt: &PromptBundle) -> Result<AdapterResponse, AdapterError> {
        parse_constraints(&self.generate_raw(prompt)?)
    }
}

pub struct StubBackend {
    fixtures: FixtureFile,
}

impl StubBackend {
    pub fn new(fixtures: FixtureFile) -> Self {
        Self { fixtures }
    }
}

impl Backend for StubBackend {
    fn generate_raw(&self, prompt: &PromptBundle) -> Result<String, AdapterError> {
        let table = self.fixtures.table();
        let keys = [
            prompt.hash(),
            format!("case:{}#{}", prompt.case_id, prompt.attempt),
            format!("case:{}", prompt.case_id),
        ];
        keys.iter()
            .find_map(|k| table.get(k.as_str()))
            .map(|r| (*r).to_owned())
            .ok_or_else(|| AdapterError::FixtureMiss {
                hash: prompt.hash(),
                case_id: prompt.case_id.clone(),
                attempt: prompt.attempt,
            })
    }
}

pub struct ReplayBackend {
    fixtures: FixtureFile,
}

impl ReplayBackend {
    pub fn new(fixtures: FixtureFile) -> Self {
        Self { fixtures }
    }
}

impl Backend for ReplayBackend {
    fn generate_raw(&self, prompt: &PromptBundle) -> Result<String, AdapterError> {
        let hash = prompt.hash();
        self.fixtures
            .table()
            .get(hash.as_str())
            .map(|r| (*r).to_owned())
            .ok_or(AdapterError::FixtureMiss {
                hash,
                case_id: prompt.case_id.clone(),
                attempt: prompt.attempt,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/generate".into(),
            token_env: "WORKZONE_API_TOKEN".into(),
            timeout_secs: 60,
        }
    }
}

/// Plain HTTP exchange: POSTs `{"prompt", "images", "template_version"}`
/// and accepts either `{"text": ...}` or a plain-text body. Every response
/// is recorded under its prompt hash for later replay.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    recorded: Mutex<Vec<FixtureEntry>>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        Self {
            config,
            agent,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn recorded(&self) -> FixtureFile {
        FixtureFile {
            entries: self.recorded.lock().unwrap().clone(),
        }
    }
}

impl Backend for RemoteBackend {
    fn generate_raw(&self, prompt: &PromptBundle) -> Result<String, AdapterError> {
        let body = serde_json::json!({
            "prompt": prompt.text,
            "images": prompt.images,
            "template_version": prompt.version,
        });
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .set("Content-Type", "application/json");
        if let Ok(token) = std::env::var(&self.config.token_env) {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let text = match req.send_string(&body.to_string()) {
            Ok(resp) => resp.into_string().map_err(|e| AdapterError::Transport(e.to_string()))?,
            Err(ureq::Error::Status(code, _)) => return Err(AdapterError::Transport(format!("HTTP status {code}"))),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                return Err(if msg.contains("timed out") {
                    AdapterError::Timeout(self.config.timeout_secs)
                } else {
                    AdapterError::Transport(msg)
                });
            }
        };
        let text = match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(o)) => match o.get("text") {
                Some(Value::String(s)) => s.clone(),
                _ => text,
            },
            _ => text,
        };
        self.recorded.lock().unwrap().push(FixtureEntry {
            key: prompt.hash(),
            response: text.clone(),
        });
        Ok(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub attempt: usize,
    pub prompt_hash: String,
    pub response: Option<String>,
    pub diagnostics: Vec<String>,
}

/// Planner proposals obtained from a backend, with verification feedback
/// folded into each follow-up prompt.
pub struct AdapterSource<'a> {
    pub backend: &'a dyn Backend,
    pub context: PromptContext,
    pub base_config: MitigationConfig,
    pub exchanges: Vec<Exchange>,
}

impl<'a> AdapterSource<'a> {
    pub fn new(backend: &'a dyn Backend, context: PromptContext, base_config: MitigationConfig) -> Self {
        Self {
            backend,
            context,
            base_config,
            exchanges: Vec::new(),
        }
    }
}

impl ProposalSource for AdapterSource<'_> {
    fn propose(&mut self, attempt: usize, history: &[AttemptRecord]) -> std::result::Result<Proposal, String> {
        let mut ctx = self.context.clone();
        ctx.attempt = attempt;
        ctx.feedback.extend(history.iter().map(AttemptRecord::describe));
        let prompt = render_prompt(&ctx).map_err(|e| e.to_string())?;
        let mut exchange = Exchange {
            attempt,
            prompt_hash: prompt.hash(),
            response: None,
            diagnostics: Vec::new(),
        };
        let result = self.backend.generate(&prompt).and_then(|resp| {
            exchange.response = Some(resp.raw.clone());
            exchange.diagnostics = resp.diagnostics.clone();
            let constraints = resolve_constraints(&resp.slots).map_err(|e| AdapterError::Parse(e.to_string()))?;
            Ok(Proposal {
                constraints,
                config: resp.planner.apply(self.base_config),
            })
        });
        self.exchanges.push(exchange);
        result.map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedb::{ConstraintSet, DetourSide};

    fn ctx() -> PromptContext {
        PromptContext {
            case_id: "seq-a/000".into(),
            scene_summary: "drum x3 right lane".into(),
            failure_overlay: "overlays/seq-a_000_fail.png".into(),
            gt_overlay: "overlays/seq-a_000_gt.png".into(),
            attempt: 1,
            feedback: vec![],
        }
    }

    #[test]
    fn rendering_is_deterministic_and_complete() {
        let a = render_prompt(&ctx()).unwrap();
        let b = render_prompt(&ctx()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        for slot in SLOT_NAMES {
            assert!(a.text.contains(&format!("\"{slot}\": \"UNKNOWN\"")));
        }
        let order = [
            "## Background",
            "## Task",
            "## Constraints Template",
            "## Code Requirements",
            "## Expected Results",
        ];
        let pos: Vec<usize> = order.iter().map(|s| a.text.find(s).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn version_bump_changes_bundle() {
        let a = render_prompt_version(&ctx(), 1).unwrap();
        let b = render_prompt_version(&ctx(), 2).unwrap();
        assert_ne!(a.version, b.version);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_overlay_is_incomplete() {
        let mut c = ctx();
        c.gt_overlay.clear();
        assert!(matches!(render_prompt(&c), Err(AdapterError::IncompleteContext(_))));
    }

    fn filled(c: &ConstraintSet) -> String {
        let slots: serde_json::Map<String, Value> = c
            .to_slot_map()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        format!(
            "The trajectory clips the drums.\n```json\n{}\n```\n```python\ndef plan(): pass\n```\n",
            serde_json::to_string_pretty(&serde_json::json!({ "constraints": slots })).unwrap()
        )
    }

    #[test]
    fn parses_eight_slots() {
        let c = ConstraintSet {
            detour_side: DetourSide::Left,
            return_to_original_lane_after_workzone: true,
            ..ConstraintSet::permissive()
        };
        let r = parse_constraints(&filled(&c)).unwrap();
        assert_eq!(r.slots.len(), 8);
        assert_eq!(r.code_blocks, 1);
        assert!(r.diagnostics.is_empty());
        assert_eq!(resolve_constraints(&r.slots).unwrap(), c);
    }

    #[test]
    fn template_round_trip() {
        let prompt = render_prompt(&ctx()).unwrap();
        let c = ConstraintSet {
            follow_lane_center: true,
            follow_sign: true,
            ..ConstraintSet::permissive()
        };
        let mut echoed = prompt.text.clone();
        for (slot, value) in c.to_slot_map() {
            echoed = echoed.replace(&format!("\"{slot}\": \"UNKNOWN\""), &format!("\"{slot}\": \"{value}\""));
        }
        let r = parse_constraints(&echoed).unwrap();
        assert_eq!(r.slots, c.to_slot_map());
    }

    #[test]
    fn unknown_value_parses_but_does_not_resolve() {
        let raw = r#"{"constraints": {"no_cross_workzone": "UNKNOWN", "bogus": "x"}}"#;
        let r = parse_constraints(raw).unwrap();
        assert_eq!(r.slots["no_cross_workzone"], "UNKNOWN");
        assert!(r.diagnostics.iter().any(|d| d.contains("bogus")));
        assert!(r.diagnostics.iter().any(|d| d.contains("missing")));
        assert!(resolve_constraints(&r.slots).is_err());
    }

    #[test]
    fn free_text_is_a_parse_error() {
        assert!(matches!(
            parse_constraints("just drive {carefully"),
            Err(AdapterError::Parse(_))
        ));
    }

    #[test]
    fn planner_overrides_apply() {
        let raw = r#"{"constraints": {}, "planner": {"destination_offset": [3, -4]}}"#;
        let r = parse_constraints(raw).unwrap();
        let cfg = r.planner.apply(MitigationConfig::default());
        assert_eq!(cfg.destination_offset, PixelPoint::new(3.0, -4.0));
        assert_eq!(cfg.inflation_margin, 5.0);
        assert!(parse_constraints(r#"{"constraints": {}, "planner": {"nope": 1}}"#).is_err());
    }

    #[test]
    fn stub_lookup_order_and_replay_miss() {
        let prompt = render_prompt(&ctx()).unwrap();
        let fixtures = FixtureFile {
            entries: vec![
                FixtureEntry {
                    key: "case:seq-a/000".into(),
                    response: "generic".into(),
                },
                FixtureEntry {
                    key: prompt.hash(),
                    response: "exact".into(),
                },
            ],
        };
        let stub = StubBackend::new(fixtures.clone());
        assert_eq!(stub.generate_raw(&prompt).unwrap(), "exact");
        let mut other = ctx();
        other.attempt = 2;
        assert_eq!(stub.generate_raw(&render_prompt(&other).unwrap()).unwrap(), "generic");

        let replay = ReplayBackend::new(fixtures);
        assert_eq!(replay.generate_raw(&prompt).unwrap(), "exact");
        assert!(matches!(
            replay.generate_raw(&render_prompt(&other).unwrap()),
            Err(AdapterError::FixtureMiss { .. })
        ));
    }

    #[test]
    fn remote_transport_failure_is_typed() {
        let backend = RemoteBackend::new(RemoteConfig {
            endpoint: "http://127.0.0.1:9/none".into(),
            token_env: "WORKZONE_TEST_UNSET_TOKEN".into(),
            timeout_secs: 2,
        });
        let err = backend.generate(&render_prompt(&ctx()).unwrap()).unwrap_err();
        assert!(matches!(err, AdapterError::Transport(_) | AdapterError::Timeout(_)));
    }

    #[test]
    fn adapter_source_feeds_back_history() {
        let good = filled(&ConstraintSet {
            follow_lane_center: true,
            ..ConstraintSet::permissive()
        });
        let stub = StubBackend::new(FixtureFile {
            entries: vec![
                FixtureEntry {
                    key: "case:seq-a/000#1".into(),
                    response: "no idea".into(),
                },
                FixtureEntry {
                    key: "case:seq-a/000".into(),
                    response: good,
                },
            ],
        });
        let mut src = AdapterSource::new(&stub, ctx(), MitigationConfig::default());
        let first = src.propose(1, &[]);
        assert!(first.is_err());
        let rec = AttemptRecord {
            attempt: 1,
            constraints: None,
            config: None,
            destination: None,
            feedback: None,
            error: first.err(),
        };
        let second = src.propose(2, &[rec]).unwrap();
        assert!(second.constraints.follow_lane_center);
        assert_eq!(src.exchanges.len(), 2);
        assert_ne!(src.exchanges[0].prompt_hash, src.exchanges[1].prompt_hash);
    }
}
