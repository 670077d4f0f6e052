//! Dialog data model, corpus files, ontology and vocabulary construction, and
//! the deterministic toy-corpus generator used for desk-scale experiments.
//!
//! A dialog is an ordered list of turns; each turn carries the speaker, the
//! speaker's accumulated goal, the turn-level dialog state and the utterance.
//! Goals and states are sets of `act(slot=value)` triples. Requests follow the
//! `request(slot=<requested slot>)` convention, i.e. the requested slot name is
//! stored in the value position.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Result, VhdaError};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOU: &str = "<bou>";
pub const EOU: &str = "<eou>";
pub const EOD: &str = "<eod>";
pub const EMPTY: &str = "<empty>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOU_ID: usize = 2;
pub const EOU_ID: usize = 3;
pub const EOD_ID: usize = 4;
pub const EMPTY_ID: usize = 5;

const RESERVED: [&str; 6] = [PAD, UNK, BOU, EOU, EOD, EMPTY];

pub const INFORM: &str = "inform";
pub const REQUEST: &str = "request";

/// The smallest unit of dialog act specification.
///
/// An empty `value` (or `slot`) stands for an act-only entry and is encoded
/// with the reserved empty token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActTriple {
    pub act: String,
    pub slot: String,
    #[serde(default)]
    pub value: String,
}

impl ActTriple {
    pub fn new(act: impl Into<String>, slot: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            act: act.into(),
            slot: slot.into(),
            value: value.into(),
        }
    }

    pub fn inform(slot: impl Into<String>, value: impl Into<String>) -> Self {
        Self::new(INFORM, slot, value)
    }

    pub fn request(requested: impl Into<String>) -> Self {
        Self::new(REQUEST, "slot", requested)
    }

    pub fn is_inform(&self) -> bool {
        self.act == INFORM
    }

    pub fn is_request(&self) -> bool {
        self.act == REQUEST
    }

    /// Token sequence `[act, slot, value]` fed to the act encoder.
    pub fn tokens(&self) -> [&str; 3] {
        [non_empty(&self.act), non_empty(&self.slot), non_empty(&self.value)]
    }
}

fn non_empty(s: &str) -> &str {
    if s.is_empty() {
        EMPTY
    } else {
        s
    }
}

impl fmt::Display for ActTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.slot.is_empty(), self.value.is_empty()) {
            (true, _) => write!(f, "{}()", self.act),
            (false, true) => write!(f, "{}({})", self.act, self.slot),
            (false, false) => write!(f, "{}({}={})", self.act, self.slot, self.value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Wizard,
}

impl Speaker {
    pub const COUNT: usize = 2;

    pub fn id(self) -> usize {
        match self {
            Speaker::User => 0,
            Speaker::Wizard => 1,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(Speaker::User),
            1 => Ok(Speaker::Wizard),
            _ => Err(VhdaError::Index {
                what: "speaker",
                index: id,
                size: Self::COUNT,
            }),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label.to_lowercase().as_str() {
            "user" | "usr" => Some(Speaker::User),
            "wizard" | "system" | "sys" => Some(Speaker::Wizard),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Wizard => "wizard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub goal: Vec<ActTriple>,
    pub state: Vec<ActTriple>,
    pub utterance: Vec<String>,
}

impl Turn {
    pub fn new(speaker: Speaker, goal: Vec<ActTriple>, state: Vec<ActTriple>, utterance: &str) -> Self {
        Self {
            speaker,
            goal: dedup(goal),
            state: dedup(state),
            utterance: tokenize(utterance),
        }
    }

    pub fn informs(&self) -> impl Iterator<Item = &ActTriple> {
        self.state.iter().filter(|a| a.is_inform())
    }

    pub fn requests(&self) -> impl Iterator<Item = &ActTriple> {
        self.state.iter().filter(|a| a.is_request())
    }

    pub fn goal_set(&self) -> BTreeSet<&ActTriple> {
        self.goal.iter().collect()
    }

    pub fn state_set(&self) -> BTreeSet<&ActTriple> {
        self.state.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub anchor_id: String,
    pub seed: u64,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
    pub provenance: Option<Provenance>,
}

impl Dialog {
    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::User)
    }

    /// Content equality ignoring id and provenance.
    pub fn same_content(&self, other: &Dialog) -> bool {
        self.turns.len() == other.turns.len()
            && self.turns.iter().zip(&other.turns).all(|(a, b)| {
                a.speaker == b.speaker
                    && a.utterance == b.utterance
                    && a.goal_set() == b.goal_set()
                    && a.state_set() == b.state_set()
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    WozJson,
    Jsonl,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => CorpusFormat::Jsonl,
            _ => CorpusFormat::WozJson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DialogCorpus {
    pub dialogs: Vec<Dialog>,
    /// When set, user goals must be the slot-overriding accumulation of
    /// inform acts (see [`accumulate_goal`]).
    pub goal_consistent: bool,
}

impl DialogCorpus {
    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn total_turns(&self) -> usize {
        self.dialogs.iter().map(|d| d.turns.len()).sum()
    }

    /// 95th percentile of dialog length in turns (nearest rank).
    pub fn length_percentile_95(&self) -> usize {
        let mut lens: Vec<usize> = self.dialogs.iter().map(|d| d.turns.len()).collect();
        if lens.is_empty() {
            return 0;
        }
        lens.sort_unstable();
        let rank = ((0.95 * lens.len() as f64).ceil() as usize).clamp(1, lens.len());
        lens[rank - 1]
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.dialogs {
            validate_dialog(d, None)?;
            if self.goal_consistent {
                check_goal_consistency(d)?;
            }
        }
        Ok(())
    }

    /// Random subsample of `fraction` of the dialogs (at least one), in the
    /// original corpus order, plus the complement.
    pub fn split(&self, fraction: f64, seed: u64) -> (DialogCorpus, DialogCorpus) {
        let n = self.dialogs.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let chosen: BTreeSet<usize> = idx[..k].iter().copied().collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, d) in self.dialogs.iter().enumerate() {
            if chosen.contains(&i) {
                a.push(d.clone());
            } else {
                b.push(d.clone());
            }
        }
        (
            DialogCorpus {
                dialogs: a,
                goal_consistent: self.goal_consistent,
            },
            DialogCorpus {
                dialogs: b,
                goal_consistent: self.goal_consistent,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Tokenization

fn is_detached_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '(' | ')' | '"')
}

/// Lowercase, detach punctuation, split on whitespace. Placeholder tokens of
/// the form `<name>` are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        if raw.len() > 2 && raw.starts_with('<') && raw.ends_with('>') {
            out.push(raw.to_string());
            continue;
        }
        let mut cur = String::new();
        for c in raw.chars() {
            if is_detached_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn dedup(triples: Vec<ActTriple>) -> Vec<ActTriple> {
    let mut seen = BTreeSet::new();
    triples.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

// ---------------------------------------------------------------------------
// Goal accumulation

/// Next goal from the previous goal and the current turn's state: inform acts
/// are added, replacing any earlier inform for the same slot.
pub fn accumulate_goal<'a>(previous: &[ActTriple], state: impl IntoIterator<Item = &'a ActTriple>) -> Vec<ActTriple> {
    let mut by_slot: BTreeMap<String, ActTriple> = previous
        .iter()
        .filter(|a| a.is_inform())
        .map(|a| (a.slot.clone(), a.clone()))
        .collect();
    for a in state.into_iter().filter(|a| a.is_inform()) {
        by_slot.insert(a.slot.clone(), a.clone());
    }
    by_slot.into_values().collect()
}

/// Goals for a sequence of per-turn inform sets, accumulated from the start.
pub fn accumulate_goals(states: &[Vec<ActTriple>]) -> Vec<Vec<ActTriple>> {
    let mut goal: Vec<ActTriple> = Vec::new();
    states
        .iter()
        .map(|s| {
            goal = accumulate_goal(&goal, s);
            goal.clone()
        })
        .collect()
}

pub fn check_goal_consistency(dialog: &Dialog) -> Result<()> {
    let mut goal: Vec<ActTriple> = Vec::new();
    for (i, turn) in dialog.turns.iter().enumerate() {
        if turn.speaker != Speaker::User {
            continue;
        }
        goal = accumulate_goal(&goal, &turn.state);
        let expected: BTreeSet<&ActTriple> = goal.iter().collect();
        if turn.goal_set() != expected {
            return Err(VhdaError::Schema {
                dialog_id: Some(dialog.id.clone()),
                message: format!("turn {i}: goal is not the accumulation of inform acts"),
            });
        }
    }
    Ok(())
}

/// Schema checks for a single dialog; with an ontology and vocabulary, also
/// closed-world checks on triples and tokens.
pub fn validate_dialog(dialog: &Dialog, closed_world: Option<(&ActOntology, &Vocabulary)>) -> Result<()> {
    let schema = |message: String| VhdaError::Schema {
        dialog_id: Some(dialog.id.clone()),
        message,
    };
    if dialog.turns.is_empty() {
        return Err(schema("dialog has no turns".into()));
    }
    for (i, turn) in dialog.turns.iter().enumerate() {
        if turn.utterance.is_empty() {
            return Err(schema(format!("turn {i}: empty utterance")));
        }
        for set in [&turn.goal, &turn.state] {
            let unique: BTreeSet<_> = set.iter().collect();
            if unique.len() != set.len() {
                return Err(schema(format!("turn {i}: duplicate triple in set")));
            }
        }
        if let Some((ontology, vocab)) = closed_world {
            for a in turn.goal.iter().chain(&turn.state) {
                if ontology.index_of(a).is_none() {
                    return Err(schema(format!("turn {i}: triple {a} outside ontology")));
                }
            }
            for w in &turn.utterance {
                if !vocab.contains(w) {
                    return Err(schema(format!("turn {i}: token {w:?} outside vocabulary")));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct RawTurn {
    speaker: Option<String>,
    utterance: Option<String>,
    #[serde(default)]
    goal: Option<Vec<ActTriple>>,
    #[serde(default)]
    state: Option<Vec<ActTriple>>,
}

#[derive(Serialize)]
struct TurnOut<'a> {
    speaker: &'static str,
    utterance: String,
    goal: &'a [ActTriple],
    state: &'a [ActTriple],
}

#[derive(Serialize)]
struct DialogOut<'a> {
    id: &'a str,
    turns: Vec<TurnOut<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<&'a Provenance>,
}

impl Dialog {
    fn to_out(&self) -> DialogOut<'_> {
        DialogOut {
            id: &self.id,
            turns: self
                .turns
                .iter()
                .map(|t| TurnOut {
                    speaker: t.speaker.label(),
                    utterance: t.utterance.join(" "),
                    goal: &t.goal,
                    state: &t.state,
                })
                .collect(),
            provenance: self.provenance.as_ref(),
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.to_out()).expect("dialog serialization is infallible")
    }

    pub fn from_json(value: &Value, fallback_id: &str) -> Result<Dialog> {
        let id = value
            .get("id")
            .or_else(|| value.get("dialogue_idx"))
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .unwrap_or_else(|| fallback_id.to_string());
        let parse = |turn_index: Option<usize>, message: String| VhdaError::Parse {
            dialog_id: Some(id.clone()),
            turn_index,
            message,
        };
        let turns_value = value
            .get("turns")
            .and_then(Value::as_array)
            .ok_or_else(|| parse(None, "missing `turns` array".into()))?;
        let mut turns = Vec::with_capacity(turns_value.len());
        for (i, tv) in turns_value.iter().enumerate() {
            let raw: RawTurn = serde_json::from_value(tv.clone()).map_err(|e| parse(Some(i), e.to_string()))?;
            let label = raw.speaker.ok_or_else(|| parse(Some(i), "missing `speaker`".into()))?;
            let utterance = raw
                .utterance
                .ok_or_else(|| parse(Some(i), "missing `utterance`".into()))?;
            let speaker = Speaker::parse(&label).ok_or_else(|| VhdaError::Schema {
                dialog_id: Some(id.clone()),
                message: format!("turn {i}: unknown speaker label {label:?}"),
            })?;
            let goal = raw.goal.unwrap_or_default();
            let state = raw.state.unwrap_or_default();
            turns.push(Turn::new(speaker, goal, state, &utterance));
        }
        let provenance = match value.get("provenance") {
            Some(Value::Null) | None => None,
            Some(p) => Some(serde_json::from_value(p.clone()).map_err(|e| parse(None, format!("provenance: {e}")))?),
        };
        let dialog = Dialog {
            id: id.clone(),
            turns,
            provenance,
        };
        if dialog.turns.is_empty() {
            return Err(parse(None, "dialog has no turns".into()));
        }
        Ok(dialog)
    }
}

impl DialogCorpus {
    pub fn to_json_string(&self) -> String {
        let doc = serde_json::json!({
            "goal_consistent": self.goal_consistent,
            "dialogs": self.dialogs.iter().map(Dialog::to_json).collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&doc).expect("corpus serialization is infallible")
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for d in &self.dialogs {
            out.push_str(&d.to_json().to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| VhdaError::Parse {
            dialog_id: None,
            turn_index: None,
            message: e.to_string(),
        })?;
        let (dialogs_value, goal_consistent) = match &doc {
            Value::Array(a) => (a.as_slice(), false),
            Value::Object(o) => (
                o.get("dialogs")
                    .and_then(Value::as_array)
                    .map(Vec::as_slice)
                    .ok_or_else(|| VhdaError::Parse {
                        dialog_id: None,
                        turn_index: None,
                        message: "missing `dialogs` array".into(),
                    })?,
                o.get("goal_consistent").and_then(Value::as_bool).unwrap_or(false),
            ),
            _ => {
                return Err(VhdaError::Parse {
                    dialog_id: None,
                    turn_index: None,
                    message: "corpus must be an object or an array".into(),
                })
            }
        };
        let dialogs = dialogs_value
            .iter()
            .enumerate()
            .map(|(i, v)| Dialog::from_json(v, &format!("dialog-{i}")))
            .collect::<Result<Vec<_>>>()?;
        let corpus = DialogCorpus {
            dialogs,
            goal_consistent,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self> {
        let mut dialogs = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(line).map_err(|e| VhdaError::Parse {
                dialog_id: None,
                turn_index: None,
                message: format!("line {}: {e}", line_no + 1),
            })?;
            dialogs.push(Dialog::from_json(&v, &format!("dialog-{}", dialogs.len()))?);
        }
        let corpus = DialogCorpus {
            dialogs,
            goal_consistent: false,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path, format: CorpusFormat) -> Result<()> {
        let text = match format {
            CorpusFormat::WozJson => self.to_json_string(),
            CorpusFormat::Jsonl => self.to_jsonl_string(),
        };
        let mut f = fs::File::create(path).map_err(|e| VhdaError::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| VhdaError::io(path, e))
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<DialogCorpus> {
    let text = fs::read_to_string(path).map_err(|e| VhdaError::io(path, e))?;
    match format {
        CorpusFormat::WozJson => DialogCorpus::from_json_str(&text),
        CorpusFormat::Jsonl => DialogCorpus::from_jsonl_str(&text),
    }
}

// ---------------------------------------------------------------------------
// Ontology and vocabulary

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActOntology {
    triples: Vec<ActTriple>,
    index: HashMap<ActTriple, usize>,
    pub acts: Vec<String>,
    pub slots: Vec<String>,
    pub values: Vec<String>,
}

impl ActOntology {
    pub fn from_triples(triples: impl IntoIterator<Item = ActTriple>) -> Self {
        let set: BTreeSet<ActTriple> = triples.into_iter().collect();
        let triples: Vec<ActTriple> = set.into_iter().collect();
        let index = triples.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let alphabet = |f: fn(&ActTriple) -> &String| {
            triples
                .iter()
                .map(|t| f(t).clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect::<Vec<_>>()
        };
        Self {
            acts: alphabet(|t| &t.act),
            slots: alphabet(|t| &t.slot),
            values: alphabet(|t| &t.value),
            triples,
            index,
        }
    }

    pub fn triples(&self) -> &[ActTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn index_of(&self, triple: &ActTriple) -> Option<usize> {
        self.index.get(triple).copied()
    }

    pub fn to_json(&self) -> Value {
        let triples: serde_json::Map<String, Value> = self
            .triples
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), Value::from(i)))
            .collect();
        serde_json::json!({
            "triples": triples,
            "entries": self.triples,
            "acts": self.acts,
            "slots": self.slots,
            "values": self.values,
        })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let entries: Vec<ActTriple> = serde_json::from_value(
            value
                .get("entries")
                .cloned()
                .ok_or_else(|| VhdaError::Config("ontology dump lacks `entries`".into()))?,
        )?;
        Ok(Self::from_triples(entries))
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.triples {
            h.update(t.to_string().as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

pub fn build_ontology(corpus: &DialogCorpus) -> ActOntology {
    ActOntology::from_triples(
        corpus
            .dialogs
            .iter()
            .flat_map(|d| d.turns.iter())
            .flat_map(|t| t.goal.iter().chain(&t.state))
            .cloned(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let rest: BTreeSet<String> = tokens.into_iter().filter(|t| !RESERVED.contains(&t.as_str())).collect();
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn build(corpus: &DialogCorpus, ontology: &ActOntology) -> Self {
        let words = corpus
            .dialogs
            .iter()
            .flat_map(|d| d.turns.iter())
            .flat_map(|t| t.utterance.iter().cloned());
        let acts = ontology.triples().iter().flat_map(|t| t.tokens().map(str::to_string));
        Self::from_tokens(words.chain(acts))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_json(&self) -> Value {
        let m: serde_json::Map<String, Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), Value::from(i)))
            .collect();
        Value::Object(m)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| VhdaError::Config("vocabulary dump must be an object".into()))?;
        let mut pairs: Vec<(usize, String)> = map
            .iter()
            .map(|(k, v)| {
                v.as_u64()
                    .map(|i| (i as usize, k.clone()))
                    .ok_or_else(|| VhdaError::Config(format!("bad index for token {k:?}")))
            })
            .collect::<Result<_>>()?;
        pairs.sort();
        let vocab = Self::from_tokens(pairs.into_iter().map(|(_, t)| t));
        Ok(vocab)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Act-order randomization

pub fn shuffle_act_order<R: Rng + ?Sized>(turn: &Turn, rng: &mut R) -> Turn {
    let mut out = turn.clone();
    out.goal.shuffle(rng);
    out.state.shuffle(rng);
    out
}

// ---------------------------------------------------------------------------
// Toy corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_dialogs: usize,
    pub n_slots: usize,
    pub n_values: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_dialogs: 8,
            n_slots: 3,
            n_values: 4,
            max_turns: 12,
            seed: 0,
        }
    }
}

const TOY_SLOTS: [&str; 6] = ["area", "food", "price range", "stars", "parking", "day"];
const TOY_VALUES: [&[&str]; 6] = [
    &["north", "south", "east", "west", "centre"],
    &["indian", "italian", "chinese", "thai", "french", "mediterranean"],
    &["cheap", "moderate", "expensive"],
    &["one", "two", "three", "four", "five"],
    &["free", "paid", "none"],
    &["monday", "tuesday", "friday", "sunday"],
];
const TOY_REQUESTABLES: [&str; 3] = ["phone", "address", "postcode"];

impl ToySpec {
    pub fn slot_names(&self) -> Vec<String> {
        (0..self.n_slots)
            .map(|i| {
                TOY_SLOTS
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("attr{i}"))
            })
            .collect()
    }

    pub fn values_of(&self, slot_index: usize) -> Vec<String> {
        (0..self.n_values)
            .map(|j| match TOY_VALUES.get(slot_index).and_then(|vs| vs.get(j)) {
                Some(v) => v.to_string(),
                None => format!("{}{}", self.slot_names()[slot_index].replace(' ', ""), j),
            })
            .collect()
    }

    pub fn requestables(&self) -> Vec<String> {
        TOY_REQUESTABLES.iter().map(|s| s.to_string()).collect()
    }

    /// Every triple the generator's grammar can emit.
    pub fn declared_triples(&self) -> BTreeSet<ActTriple> {
        let mut out = BTreeSet::new();
        for (i, slot) in self.slot_names().iter().enumerate() {
            for v in self.values_of(i) {
                out.insert(ActTriple::inform(slot.clone(), v));
            }
        }
        for r in self.requestables() {
            out.insert(ActTriple::request(r));
        }
        out
    }
}

/// Cycles through a shuffled list, reshuffling after each pass; guarantees
/// every item is used once per pass.
struct Deck {
    items: Vec<usize>,
    pos: usize,
}

impl Deck {
    fn new(n: usize) -> Self {
        Self {
            items: (0..n).collect(),
            pos: n,
        }
    }

    fn draw<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn phrase(slot: &str, value: &str) -> String {
    format!("{value} {slot}")
}

fn join_and(parts: &[String]) -> String {
    parts.join(" and ")
}

struct ToyBuilder {
    turns: Vec<Turn>,
    goal: Vec<ActTriple>,
}

impl ToyBuilder {
    fn user(&mut self, state: Vec<ActTriple>, utterance: String) {
        self.goal = accumulate_goal(&self.goal, &state);
        self.turns
            .push(Turn::new(Speaker::User, self.goal.clone(), state, &utterance));
    }

    fn wizard(&mut self, utterance: String) {
        self.turns
            .push(Turn::new(Speaker::Wizard, Vec::new(), Vec::new(), &utterance));
    }
}

/// Deterministic request/inform toy dialogs: the user informs every slot of
/// its goal (possibly changing its mind once), asks for one or two
/// requestable attributes, and says goodbye; the wizard asks for missing
/// slots, offers a venue and answers requests.
pub fn generate_toy_corpus(spec: &ToySpec) -> Result<DialogCorpus> {
    if spec.n_dialogs == 0 || spec.n_slots == 0 || spec.n_values == 0 || spec.max_turns == 0 {
        return Err(VhdaError::Config("toy spec counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slots = spec.slot_names();
    let values: Vec<Vec<String>> = (0..spec.n_slots).map(|i| spec.values_of(i)).collect();
    let requestables = spec.requestables();
    let mut value_decks: Vec<Deck> = (0..spec.n_slots).map(|_| Deck::new(spec.n_values)).collect();
    let mut request_deck = Deck::new(requestables.len());

    let mut dialogs = Vec::with_capacity(spec.n_dialogs);
    for d in 0..spec.n_dialogs {
        let mut b = ToyBuilder {
            turns: Vec::new(),
            goal: Vec::new(),
        };
        let mut order: Vec<usize> = (0..spec.n_slots).collect();
        order.shuffle(&mut rng);
        let target: Vec<(usize, usize)> = order.iter().map(|&s| (s, value_decks[s].draw(&mut rng))).collect();
        let inform = |(s, v): (usize, usize)| ActTriple::inform(slots[s].clone(), values[s][v].clone());

        let first = rng.random_range(1..=spec.n_slots.min(2));
        let opening: Vec<String> = target[..first]
            .iter()
            .map(|&(s, v)| phrase(&slots[s], &values[s][v]))
            .collect();
        let template = pick(
            &mut rng,
            &[
                "i want a place with {} .",
                "i am looking for {} .",
                "find me {} please .",
            ],
        );
        b.user(
            target[..first].iter().copied().map(inform).collect(),
            template.replace("{}", &join_and(&opening)),
        );

        for &(s, v) in &target[first..] {
            let ask = pick(&mut rng, &["what {} would you like ?", "which {} do you prefer ?"]);
            b.wizard(ask.replace("{}", &slots[s]));
            let answer = pick(&mut rng, &["{} please .", "i would like {} .", "{} ."]);
            b.user(
                vec![inform((s, v))],
                answer.replace("{}", &phrase(&slots[s], &values[s][v])),
            );
        }
        let offer = ["how about <place> ?", "<place> matches your request ."];
        b.wizard(pick(&mut rng, &offer).to_string());

        if spec.n_values > 1 && rng.random_bool(0.3) {
            let (s, old) = target[rng.random_range(0..target.len())];
            let mut v = value_decks[s].draw(&mut rng);
            if v == old {
                v = (v + 1) % spec.n_values;
            }
            b.user(
                vec![inform((s, v))],
                format!("actually i want {} instead .", phrase(&slots[s], &values[s][v])),
            );
            b.wizard(pick(&mut rng, &offer).to_string());
        }

        let n_requests = rng.random_range(1..=2usize);
        let mut asked: Vec<usize> = Vec::new();
        while asked.len() < n_requests {
            let r = request_deck.draw(&mut rng);
            if !asked.contains(&r) {
                asked.push(r);
            }
        }
        let names: Vec<String> = asked.iter().map(|&r| requestables[r].clone()).collect();
        let ask = pick(&mut rng, &["what is the {} ?", "can i get the {} ?"]);
        b.user(
            names.iter().map(|n| ActTriple::request(n.clone())).collect(),
            ask.replace("{}", &names.join(" and ")),
        );
        let answers: Vec<String> = names.iter().map(|n| format!("the {n} is <{n}>")).collect();
        b.wizard(format!("{} .", answers.join(" and ")));

        let bye = pick(&mut rng, &["thank you , goodbye .", "thanks , bye ."]);
        b.user(Vec::new(), bye.to_string());

        b.turns.truncate(spec.max_turns);
        dialogs.push(Dialog {
            id: format!("toy-{}-{d:04}", spec.seed),
            turns: b.turns,
            provenance: None,
        });
    }
    Ok(DialogCorpus {
        dialogs,
        goal_consistent: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triple_display_and_tokens() {
        let a = ActTriple::inform("area", "north");
        assert_eq!(a.to_string(), "inform(area=north)");
        assert_eq!(a.tokens(), ["inform", "area", "north"]);
        assert_eq!(ActTriple::request("phone").to_string(), "request(slot=phone)");
        let bye = ActTriple::new("bye", "", "");
        assert_eq!(bye.tokens(), ["bye", EMPTY, EMPTY]);
    }

    #[test]
    fn tokenizer_detaches_punctuation_and_keeps_placeholders() {
        assert_eq!(
            tokenize("What is the Number? <place>'s phone."),
            vec!["what", "is", "the", "number", "?", "<place>'s", "phone", "."]
        );
        assert_eq!(tokenize("<place> 's"), vec!["<place>", "'s"]);
        let t = tokenize("i want a cheap, north place!");
        assert_eq!(tokenize(&t.join(" ")), t);
    }

    #[test]
    fn missing_utterance_names_the_turn() {
        let text = r#"{"dialogs":[{"id":"d1","turns":[{"speaker":"user","utterance":"hi"},{"speaker":"wizard"}]}]}"#;
        match DialogCorpus::from_json_str(text) {
            Err(VhdaError::Parse {
                dialog_id,
                turn_index,
                message,
            }) => {
                assert_eq!(dialog_id.as_deref(), Some("d1"));
                assert_eq!(turn_index, Some(1));
                assert!(message.contains("utterance"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_speaker_is_a_schema_error() {
        let text = r#"{"dialogs":[{"id":"d1","turns":[{"speaker":"robot","utterance":"hi"}]}]}"#;
        assert!(matches!(
            DialogCorpus::from_json_str(text),
            Err(VhdaError::Schema { .. })
        ));
    }

    #[test]
    fn two_turn_file_loads() {
        let text = r#"{"dialogs":[{"id":"d1","turns":[
            {"speaker":"user","utterance":"hi","goal":[],"state":[]},
            {"speaker":"wizard","utterance":"hello"}]}]}"#;
        let c = DialogCorpus::from_json_str(text).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.total_turns(), 2);
    }

    #[test]
    fn ontology_is_a_sorted_set() {
        let north = ActTriple::inform("area", "north");
        let phone = ActTriple::request("phone");
        let mk = |state: Vec<ActTriple>| Dialog {
            id: "x".into(),
            turns: vec![Turn::new(Speaker::User, vec![], state, "x")],
            provenance: None,
        };
        let corpus = DialogCorpus {
            dialogs: vec![
                mk(vec![north.clone()]),
                mk(vec![phone.clone(), north.clone()]),
                mk(vec![phone.clone()]),
            ],
            goal_consistent: false,
        };
        let o = build_ontology(&corpus);
        assert_eq!(o.triples(), &[north.clone(), phone.clone()]);
        let single = DialogCorpus {
            dialogs: vec![mk(vec![north.clone()])],
            goal_consistent: false,
        };
        assert_eq!(build_ontology(&single).len(), 1);
    }

    #[test]
    fn vocabulary_reserves_lowest_indices() {
        let corpus = generate_toy_corpus(&ToySpec::default()).unwrap();
        let o = build_ontology(&corpus);
        let v = Vocabulary::build(&corpus, &o);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
        }
        assert_eq!(v.id("definitely-not-a-word"), UNK_ID);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
        assert_eq!(Vocabulary::build(&corpus, &o), v);
    }

    #[test]
    fn goal_accumulation_overrides_slots() {
        let g = accumulate_goal(
            &[ActTriple::inform("food", "indian"), ActTriple::inform("area", "north")],
            &[ActTriple::inform("food", "dontcare"), ActTriple::request("phone")],
        );
        assert_eq!(
            g,
            vec![
                ActTriple::inform("area", "north"),
                ActTriple::inform("food", "dontcare")
            ]
        );
        // idempotent
        assert_eq!(accumulate_goal(&g, &g), g);
    }

    #[test]
    fn toy_minimal_spec() {
        let spec = ToySpec {
            n_dialogs: 1,
            n_slots: 1,
            n_values: 1,
            max_turns: 2,
            seed: 0,
        };
        let c = generate_toy_corpus(&spec).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.dialogs[0].turns.len() <= 2);
        c.validate().unwrap();
    }

    #[test]
    fn toy_zero_counts_rejected() {
        let spec = ToySpec {
            n_values: 0,
            ..ToySpec::default()
        };
        assert!(generate_toy_corpus(&spec).is_err());
    }

    #[test]
    fn toy_goals_replay_accumulation_rule() {
        let spec = ToySpec {
            n_dialogs: 8,
            n_slots: 3,
            n_values: 4,
            max_turns: 8,
            seed: 1,
        };
        let c = generate_toy_corpus(&spec).unwrap();
        for d in &c.dialogs {
            let mut informed: BTreeMap<String, ActTriple> = BTreeMap::new();
            for t in d.user_turns() {
                for a in t.informs() {
                    informed.insert(a.slot.clone(), a.clone());
                }
                let expected: BTreeSet<&ActTriple> = informed.values().collect();
                assert_eq!(t.goal_set(), expected, "dialog {}", d.id);
            }
            // strict alternation starting with the user
            for (i, t) in d.turns.iter().enumerate() {
                assert_eq!(t.speaker.id(), i % 2);
            }
        }
    }

    #[test]
    fn toy_ontology_covers_declared_triples() {
        let spec = ToySpec {
            seed: 7,
            ..ToySpec::default()
        };
        let c = generate_toy_corpus(&spec).unwrap();
        let o = build_ontology(&c);
        assert_eq!(o.len(), spec.declared_triples().len());
        assert_eq!(
            o.triples().iter().cloned().collect::<BTreeSet<_>>(),
            spec.declared_triples()
        );
    }

    #[test]
    fn percentile_of_lengths() {
        let c = generate_toy_corpus(&ToySpec::default()).unwrap();
        let p = c.length_percentile_95();
        let max = c.dialogs.iter().map(|d| d.turns.len()).max().unwrap();
        assert!(p <= max && p >= 1);
    }
}
