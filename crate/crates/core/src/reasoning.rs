//! Verdict generation through a chat model, plus the few-shot prompt that
//! asks a general model for pseudo-subgraphs directly.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use crate::http::{ClientError, JsonClient};
use crate::kg::KnowledgeGraph;
use crate::pseudo_graph::{parse_pseudo_subgraph, PseudoSubgraph};
use crate::retrieval::EvidenceTriple;

pub trait ChatModel: Send + Sync {
    /// One single-turn exchange; returns the assistant message text.
    fn chat(&self, prompt: &str) -> Result<String, ClientError>;
}

/// OpenAI-chat-compatible backend.
#[derive(Debug, Clone)]
pub struct ChatClient {
    client: JsonClient,
    pub temperature: f64,
}

impl ChatClient {
    pub fn new(client: JsonClient) -> Self {
        Self {
            client,
            temperature: 0.0,
        }
    }
}

impl ChatModel for ChatClient {
    fn chat(&self, prompt: &str) -> Result<String, ClientError> {
        let body = json!({
            "model": self.client.settings().model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        });
        let resp = self.client.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Protocol("missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Supported,
    Refuted,
}

impl Verdict {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Supported
        } else {
            Verdict::Refuted
        }
    }

    pub fn as_bool(self) -> bool {
        self == Verdict::Supported
    }

    /// Accepts `true`/`false` and `supported`/`refuted`, any case.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" | "supported" => Some(Verdict::Supported),
            "false" | "refuted" => Some(Verdict::Refuted),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Supported => "Supported",
            Verdict::Refuted => "Refuted",
        })
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        verdict_from_value(&v).ok_or_else(|| serde::de::Error::custom(format!("not a verdict: {v}")))
    }
}

fn verdict_from_value(v: &Value) -> Option<Verdict> {
    match v {
        Value::Bool(b) => Some(Verdict::from_bool(*b)),
        Value::String(s) => Verdict::parse(s),
        // FactKG stores labels as one-element lists.
        Value::Array(items) if items.len() == 1 => verdict_from_value(&items[0]),
        _ => None,
    }
}

const REASONING_TEMPLATE: &str = r#"Task:
Verify whether the fact in the given sentence is true or false based on the provided graph triplets. Use only the information in the triplets for verification.

- The triplets provided represent all relevant knowledge that can be retrieved.
- If the fact is a negation and the triplets do not include the fact, consider the fact as true.
- Ignore questions and verify only the factual assertion within them. For example, in the question "When was Daniel Martínez (politician) a leader of Montevideo?", focusing on verifying the assertion "Daniel Martínez (politician) a leader of Montevideo".
- Interpret the "~" symbol in triplets as indicating a reverse relationship. For example: "A ~ south of B" means "B is north of A".

Response Format:
Provide your response in the following JSON format without any additional explanations:
{
  "rationale": "A concise explanation for your decision",
  "verdict": "true/false as the JSON value"
}

Triplets:
{{triplets}}

Claim:
{{claim}}"#;

pub const REASK_SUFFIX: &str = "\n\nRespond with the JSON only.";

/// Renders the reasoning prompt; triples appear one per line, in order.
pub fn build_reasoning_prompt(claim: &str, evidence: &[EvidenceTriple]) -> String {
    let triplets: Vec<String> = evidence.iter().map(ToString::to_string).collect();
    REASONING_TEMPLATE
        .replace("{{triplets}}", &triplets.join("\n"))
        .replace("{{claim}}", claim)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerdictError {
    #[error("no JSON object with a verdict in the response")]
    NoObject,
    #[error("verdict {0} is neither true nor false")]
    Domain(String),
    #[error("response has a verdict but no rationale")]
    MissingRationale,
}

/// JSON objects embedded anywhere in `raw`, in order of their opening brace.
fn embedded_objects(raw: &str) -> impl Iterator<Item = serde_json::Map<String, Value>> + '_ {
    raw.match_indices('{').filter_map(move |(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts `(rationale, verdict)` from a model response that may wrap the
/// JSON in prose or code fences.
pub fn parse_verdict(raw: &str) -> Result<(String, Verdict), VerdictError> {
    let mut fallback = None;
    let mut chosen = None;
    for obj in embedded_objects(raw) {
        if !obj.contains_key("verdict") {
            continue;
        }
        if obj.contains_key("rationale") {
            chosen = Some(obj);
            break;
        }
        fallback.get_or_insert(obj);
    }
    let obj = chosen.or(fallback).ok_or(VerdictError::NoObject)?;
    let v = &obj["verdict"];
    let verdict = match v {
        Value::Bool(b) => Verdict::from_bool(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Verdict::Supported,
            "false" => Verdict::Refuted,
            _ => return Err(VerdictError::Domain(v.to_string())),
        },
        other => return Err(VerdictError::Domain(other.to_string())),
    };
    let rationale = obj
        .get("rationale")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .ok_or(VerdictError::MissingRationale)?;
    Ok((rationale.to_string(), verdict))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MalformedPolicy {
    #[default]
    Error,
    /// Ask once more with [`REASK_SUFFIX`] appended.
    ReaskOnce,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reasoned {
    pub rationale: String,
    pub verdict: Verdict,
    pub raw: String,
    pub attempts: u32,
}

/// Builds the prompt, calls the model and parses the answer.
pub fn reason(
    model: &dyn ChatModel,
    claim: &str,
    evidence: &[EvidenceTriple],
    policy: MalformedPolicy,
) -> Result<Reasoned, ReasoningError> {
    let prompt = build_reasoning_prompt(claim, evidence);
    let raw = model.chat(&prompt)?;
    match parse_verdict(&raw) {
        Ok((rationale, verdict)) => Ok(Reasoned {
            rationale,
            verdict,
            raw,
            attempts: 1,
        }),
        Err(e) if policy == MalformedPolicy::ReaskOnce => {
            log::warn!("malformed verdict ({e}); asking again");
            let raw = model.chat(&format!("{prompt}{REASK_SUFFIX}"))?;
            let (rationale, verdict) = parse_verdict(&raw)?;
            Ok(Reasoned {
                rationale,
                verdict,
                raw,
                attempts: 2,
            })
        }
        Err(e) => Err(e.into()),
    }
}

const FEWSHOT_TEMPLATE: &str = "Task: Generate a reference graph to verify the following claim. Only return the subgraphs following the format of provided examples and do NOT include other unnecessary information.

Here are some examples:

Claim: Akeem Priestley played for club RoPS and currently plays for the Orange County Blues FC, which is managed by Oliver Wyss.
Subgraphs:
<e>Orange County Blues FC</e> || manager || <e>Oliver Wyss</e>
<e>Orange County Blues FC</e> || ~clubs || <e>Akeem Priestley</e>
<e>Akeem Priestley</e> || team || <e>RoPS</e>

Claim: He is a Rhythm and Blues singer from Errata, Mississippi!
Subgraphs:
<e>Rhythm and blues</e> || ~genre || unknown_0
unknown_0 || birth place || <e>Errata, Mississippi</e>
unknown_0 || background || unknown_1

Claim: Arròs negre is a traditional dish from Spain, and from the Catalonia region, which is led by the Maria Norrfalk.
Subgraphs:
<e>Arròs negre</e> || country || <e>Spain</e>
<e>Arròs negre</e> || region || <e>Catalonia</e>
<e>Catalonia</e> || leader name || <e>Maria Norrfalk</e>

Claim: Well, Jason Sherlock did not have a nickname!
Subgraphs:
<e>Jason Sherlock</e> || nickname || unknown_0

Claim: Garlic is the main ingredient of Ajoblanco, which is from Andalusia.
Subgraphs:
<e>Ajoblanco</e> || region || <e>Andalusia</e>
<e>Ajoblanco</e> || ingredient || <e>Garlic</e>

Claim: {{claim}}
Subgraphs:
";

pub fn build_fewshot_prompt(claim: &str) -> String {
    FEWSHOT_TEMPLATE.replace("{{claim}}", claim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotGraph {
    pub graph: PseudoSubgraph,
    /// Known entities absent from the KG (empty when no KG was given).
    pub missing_entities: Vec<String>,
}

impl FewShotGraph {
    pub fn is_valid(&self) -> bool {
        self.missing_entities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FewShotOutput {
    pub graphs: Vec<FewShotGraph>,
    pub diagnostic: Option<String>,
}

/// Parses a few-shot completion. Only lines that look like triples are
/// read, so echoed headers and trailing chatter are ignored; anything that
/// still fails to parse yields no graph and a diagnostic.
pub fn parse_fewshot_completion(completion: &str, kg: Option<&KnowledgeGraph>) -> FewShotOutput {
    let body: Vec<&str> = completion
        .lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Claim:"))
        .filter(|l| l.contains("||"))
        .collect();
    if body.is_empty() {
        return FewShotOutput {
            graphs: Vec::new(),
            diagnostic: Some("completion contains no triples".into()),
        };
    }
    match parse_pseudo_subgraph(&body.join("\n"), None) {
        Ok(graph) => {
            let missing_entities = kg.map(|kg| graph.missing_entities(kg)).unwrap_or_default();
            FewShotOutput {
                graphs: vec![FewShotGraph {
                    graph: graph.canonicalize(),
                    missing_entities,
                }],
                diagnostic: None,
            }
        }
        Err(e) => FewShotOutput {
            graphs: Vec::new(),
            diagnostic: Some(format!("unparseable completion: {e}")),
        },
    }
}

/// Asks a general model for a pseudo-subgraph without trie constraints.
pub fn fewshot_generate_pseudo_subgraphs(
    model: &dyn ChatModel,
    claim: &str,
    kg: Option<&KnowledgeGraph>,
) -> Result<FewShotOutput, ClientError> {
    let completion = model.chat(&build_fewshot_prompt(claim))?;
    Ok(parse_fewshot_completion(&completion, kg))
}
