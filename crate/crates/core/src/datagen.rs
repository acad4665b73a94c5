//! Synthetic task-oriented corpora: a template grammar with procedurally
//! generated entity lexicons, word-keyed audio features on two channels,
//! first-pass hypotheses from the error channel, and seeded splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asr::{edit_distance, perturb_word, AsrErrorModel};
use crate::corpus::UtteranceRecord;
use crate::parse::{serialize, Child, OntologySymbol, ParseError, ParseNode, CLOSE};
use crate::tensor::{standard_normal, Tensor};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("compositional fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("split ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("grammar line {line}: {msg}")]
    Grammar { line: usize, msg: String },
    #[error("text is empty")]
    EmptyText,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("reading grammar {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The shipped grammar. Lines are `lexicon NAME: a | b c | ...` (or
/// `*generator COUNT` for procedural entities), `domain NAME`, `intent
/// LABEL`, and templates: `t:` for standalone utterances and `p:` for the
/// phrase form used when the intent fills a slot. `{SLOT:lexicon}` draws a
/// filler; `{SLOT:@INTENT|INTENT}` nests an intent phrase.
pub const DEFAULT_GRAMMAR: &str = r#"
lexicon music_type: song | album | station | playlist | track | radio
lexicon genre: jazz | rock | pop | hip hop | country | classical | blues | reggae | folk | soul | techno | metal
lexicon artist: *person 30
lexicon playlist: *title 30
lexicon album: *title 20
lexicon place: *place 40
lexicon road: *road 20
lexicon travel: car | bus | train | bike | foot | subway | ferry
lexicon travel_mode: driving | walking | biking | transit
lexicon team: *team 20
lexicon event_cat: game | concert | show | match | festival | parade | race | recital
lexicon date: today | tomorrow | tonight | this weekend | next week | on monday | on tuesday | on wednesday | on thursday | on friday | on saturday | on sunday | this evening | next friday | tomorrow morning
lexicon time: *clock 0
lexicon recur: every day | every weekday | on weekends | every monday | every friday
lexicon duration: *duration 0
lexicon timer_kind: timer | countdown | stopwatch
lexicon weather_attr: rain | snow | hail | storm | freeze
lexicon unit: celsius | fahrenheit
lexicon contact: *given 30
lexicon relation: mom | dad | brother | sister | wife | husband | boss | friend | aunt | uncle | cousin | grandma
lexicon content: i am running late | call me back | see you soon | dinner is ready | on my way | happy birthday | good night | pick up bread | meeting moved | thanks so much | running ten minutes late | where are you | call me when free | love you
lexicon todo: buy milk | pay the rent | call the dentist | water the plants | walk the dog | take out trash | book flights | renew the license | clean the kitchen | pick up laundry | feed the cat | send the invoice
lexicon alarm_name: workout | medicine | wake up | meeting | school | nap

domain music
intent PLAY_MUSIC
t: play {MUSIC_PLAYLIST_TITLE:playlist} {MUSIC_TYPE:music_type}
t: play some {MUSIC_GENRE:genre}
t: play {MUSIC_TYPE:music_type} by {MUSIC_ARTIST_NAME:artist}
t: i want to hear {MUSIC_ARTIST_NAME:artist}
t: put on my {MUSIC_PLAYLIST_TITLE:playlist} playlist
t: play {MUSIC_GENRE:genre} by {MUSIC_ARTIST_NAME:artist}
t: play the album {MUSIC_ALBUM_TITLE:album} by {MUSIC_ARTIST_NAME:artist}
t: play {MUSIC_TRACK_TITLE:album}
intent PAUSE_MUSIC
t: pause the music
t: stop playing
intent SKIP_TRACK_MUSIC
t: skip this song
t: next track please

domain navigation
intent GET_DIRECTIONS
t: directions to {DESTINATION:place}
t: how do i get to {DESTINATION:place} by {METHOD_TRAVEL:travel}
t: navigate from {SOURCE:place} to {DESTINATION:place}
t: {METHOD_TRAVEL:travel_mode} directions to {DESTINATION:place} via {WAYPOINT:place}
t: take me to {DESTINATION:@GET_EVENT|GET_LOCATION_HOME}
t: {METHOD_TRAVEL:travel_mode} directions to {DESTINATION:@GET_EVENT}
intent GET_ESTIMATED_DURATION
t: how long will it take to get to {DESTINATION:place}
t: how long to get to {DESTINATION:@GET_EVENT|GET_LOCATION_HOME}
intent GET_INFO_TRAFFIC
t: how is traffic on {LOCATION:road}
t: any traffic near {LOCATION:place}
intent GET_LOCATION_HOME
t: where does my {CONTACT_RELATED:relation} live
p: the home of my {CONTACT_RELATED:relation}

domain event
intent GET_EVENT
t: when is the {NAME_EVENT:team} {CATEGORY_EVENT:event_cat}
t: any {CATEGORY_EVENT:event_cat} in {LOCATION:place} {DATE_TIME:date}
p: the {NAME_EVENT:team} {CATEGORY_EVENT:event_cat}
p: the {CATEGORY_EVENT:event_cat} in {LOCATION:place}

domain alarm
intent CREATE_ALARM
t: set an alarm for {DATE_TIME:time}
t: wake me up {DATE_TIME:time}
t: set a {ALARM_NAME:alarm_name} alarm for {DATE_TIME:time}
t: set an alarm {DATE_TIME:time} {RECURRING_DATE_TIME:recur}
intent DELETE_ALARM
t: delete my alarm {DATE_TIME:time}
t: cancel all alarms

domain timer
intent CREATE_TIMER
t: set a {METHOD_TIMER:timer_kind} for {DATE_TIME:duration}
t: start a {DATE_TIME:duration} {METHOD_TIMER:timer_kind}
intent PAUSE_TIMER
t: pause the {METHOD_TIMER:timer_kind}

domain weather
intent GET_WEATHER
t: whats the weather in {LOCATION:place}
t: will it {WEATHER_ATTRIBUTE:weather_attr} {DATE_TIME:date}
t: will it {WEATHER_ATTRIBUTE:weather_attr} in {LOCATION:place} {DATE_TIME:date}
t: temperature in {LOCATION:place} in {WEATHER_TEMPERATURE_UNIT:unit}
t: whats the weather at {LOCATION:@GET_EVENT}

domain messaging
intent SEND_MESSAGE
t: text {RECIPIENT:contact} {CONTENT_EXACT:content}
t: send a message to {RECIPIENT:contact} saying {CONTENT_EXACT:content}
t: message my {RECIPIENT:@GET_CONTACT} {CONTENT_EXACT:content}
p: text {RECIPIENT:contact} {CONTENT_EXACT:content}
intent GET_MESSAGE
t: read my messages from {SENDER:contact}
t: any new messages from {SENDER:contact}
intent GET_CONTACT
t: who is my {TYPE_RELATION:relation}
p: {TYPE_RELATION:relation}

domain reminder
intent CREATE_REMINDER
t: remind me to {TODO:todo} {DATE_TIME:date}
t: remind {PERSON_REMINDED:contact} to {TODO:todo}
t: remind me {DATE_TIME:date} to {TODO:@SEND_MESSAGE}
intent GET_REMINDER
t: show my reminders {DATE_TIME:date}
intent DELETE_REMINDER
t: delete my reminder to {TODO:todo}
"#;

/// Words inserted by the error channel.
pub const FILLERS: [&str; 7] = ["uh", "um", "the", "a", "and", "to", "please"];

#[derive(Debug, Clone, PartialEq)]
pub enum Filler {
    Lexicon(String),
    Nested(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Word(String),
    Slot { label: String, filler: Filler },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub parts: Vec<Part>,
}

impl Template {
    pub fn is_compositional(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, Part::Slot { filler: Filler::Nested(_), .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intent {
    pub label: String,
    pub templates: Vec<Template>,
    pub phrases: Vec<Template>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub intents: Vec<Intent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub entries: Vec<Vec<String>>,
    /// Draw entries with Zipf weights (procedural entities) rather than
    /// uniformly.
    pub zipf: bool,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    pub domains: Vec<Domain>,
    pub lexicons: BTreeMap<String, Lexicon>,
    /// Exponent of the Zipf draw over procedural lexicons.
    pub zipf_exponent: f64,
    cumulative: BTreeMap<String, Vec<f64>>,
}

impl Grammar {
    /// The built-in grammar with the default lexicon seed and Zipf exponent.
    pub fn builtin() -> Self {
        DatagenConfig::default().load_grammar().expect("built-in grammar is valid")
    }

    pub fn parse(text: &str, lexicon_seed: u64, zipf_exponent: f64) -> Result<Self, DatagenError> {
        let mut rng = ChaCha8Rng::seed_from_u64(lexicon_seed);
        let mut names = NameGenerator::default();
        let mut lexicons = BTreeMap::new();
        let mut domains: Vec<Domain> = Vec::new();
        let err = |line: usize, msg: String| DatagenError::Grammar { line, msg };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("lexicon ") {
                let (name, body) = rest
                    .split_once(':')
                    .ok_or_else(|| err(line_no, "expected `lexicon NAME: ...`".into()))?;
                let body = body.trim();
                let lexicon = if let Some(gen) = body.strip_prefix('*') {
                    let (kind, count) = gen.split_once(' ').unwrap_or((gen, "0"));
                    let count: usize = count
                        .trim()
                        .parse()
                        .map_err(|_| err(line_no, format!("bad count `{count}`")))?;
                    let entries = names
                        .generate(kind, count, &mut rng)
                        .ok_or_else(|| err(line_no, format!("unknown generator `{kind}`")))?;
                    Lexicon {
                        zipf: count > 0,
                        entries,
                    }
                } else {
                    Lexicon {
                        entries: body.split('|').map(|e| crate::corpus::words(e)).collect(),
                        zipf: false,
                    }
                };
                if lexicon.entries.is_empty() || lexicon.entries.iter().any(Vec::is_empty) {
                    return Err(err(line_no, format!("lexicon `{name}` has empty entries")));
                }
                lexicons.insert(name.trim().to_string(), lexicon);
            } else if let Some(name) = line.strip_prefix("domain ") {
                domains.push(Domain {
                    name: name.trim().to_string(),
                    intents: Vec::new(),
                });
            } else if let Some(label) = line.strip_prefix("intent ") {
                let domain = domains
                    .last_mut()
                    .ok_or_else(|| err(line_no, "intent outside a domain".into()))?;
                OntologySymbol::intent(label.trim())?;
                domain.intents.push(Intent {
                    label: label.trim().to_string(),
                    templates: Vec::new(),
                    phrases: Vec::new(),
                });
            } else if let Some((kind, body)) = line.split_once(':').filter(|(k, _)| *k == "t" || *k == "p") {
                let intent = domains
                    .last_mut()
                    .and_then(|d| d.intents.last_mut())
                    .ok_or_else(|| err(line_no, "template outside an intent".into()))?;
                let template = parse_template(body).map_err(|m| err(line_no, m))?;
                if kind == "t" {
                    intent.templates.push(template);
                } else {
                    intent.phrases.push(template);
                }
            } else {
                return Err(err(line_no, format!("unrecognized line `{line}`")));
            }
        }
        let mut grammar = Self {
            domains,
            lexicons,
            zipf_exponent,
            cumulative: BTreeMap::new(),
        };
        grammar.validate()?;
        grammar.cumulative = grammar
            .lexicons
            .iter()
            .map(|(name, lex)| {
                let mut acc = 0.0;
                let weights = (0..lex.entries.len())
                    .map(|r| {
                        acc += if lex.zipf { 1.0 / ((r + 1) as f64).powf(zipf_exponent) } else { 1.0 };
                        acc
                    })
                    .collect();
                (name.clone(), weights)
            })
            .collect();
        Ok(grammar)
    }

    fn validate(&self) -> Result<(), DatagenError> {
        let bad = |msg: String| DatagenError::Grammar { line: 0, msg };
        for intent in self.intents() {
            for t in intent.templates.iter().chain(&intent.phrases) {
                for part in &t.parts {
                    if let Part::Slot { label, filler } = part {
                        OntologySymbol::slot(label)?;
                        match filler {
                            Filler::Lexicon(name) if !self.lexicons.contains_key(name) => {
                                return Err(bad(format!("unknown lexicon `{name}`")))
                            }
                            Filler::Nested(labels) => {
                                for l in labels {
                                    let nested = self
                                        .intent(l)
                                        .ok_or_else(|| bad(format!("unknown intent `{l}`")))?;
                                    if nested.phrases.is_empty() {
                                        return Err(bad(format!("intent `{l}` has no phrase form")));
                                    }
                                    if nested.phrases.iter().any(Template::is_compositional) {
                                        return Err(bad(format!("phrase of `{l}` nests again")));
                                    }
                                }
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn intents(&self) -> impl Iterator<Item = &Intent> {
        self.domains.iter().flat_map(|d| &d.intents)
    }

    pub fn intent(&self, label: &str) -> Option<&Intent> {
        self.intents().find(|i| i.label == label)
    }

    pub fn slot_labels(&self) -> BTreeSet<String> {
        self.intents()
            .flat_map(|i| i.templates.iter().chain(&i.phrases))
            .flat_map(|t| &t.parts)
            .filter_map(|p| match p {
                Part::Slot { label, .. } => Some(label.clone()),
                Part::Word(_) => None,
            })
            .collect()
    }

    /// Every ontology token the grammar can emit, closer included.
    pub fn ontology(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .intents()
            .map(|i| format!("[IN:{}", i.label))
            .chain(self.slot_labels().iter().map(|s| format!("[SL:{s}")))
            .collect();
        out.sort();
        out.dedup();
        out.push(CLOSE.to_string());
        out
    }

    /// Every word that can appear in an utterance.
    pub fn word_inventory(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self
            .lexicons
            .values()
            .flat_map(|l| l.entries.iter().flatten().cloned())
            .collect();
        for t in self.intents().flat_map(|i| i.templates.iter().chain(&i.phrases)) {
            for p in &t.parts {
                if let Part::Word(w) = p {
                    out.insert(w.clone());
                }
            }
        }
        out
    }

    fn draw_entry<'a>(&'a self, lexicon: &str, rng: &mut ChaCha8Rng) -> &'a [String] {
        let lex = &self.lexicons[lexicon];
        let cum = &self.cumulative[lexicon];
        let x = rng.gen::<f64>() * cum[cum.len() - 1];
        let i = cum.partition_point(|&c| c <= x).min(cum.len() - 1);
        &lex.entries[i]
    }

    fn expand(&self, t: &Template, rng: &mut ChaCha8Rng, words: &mut Vec<String>) -> Result<Vec<Child>, DatagenError> {
        let mut children = Vec::new();
        for part in &t.parts {
            match part {
                Part::Word(w) => words.push(w.clone()),
                Part::Slot { label, filler } => {
                    let slot = OntologySymbol::slot(label.as_str())?;
                    let inner = match filler {
                        Filler::Lexicon(name) => {
                            let entry = self.draw_entry(name, rng);
                            words.extend(entry.iter().cloned());
                            entry.iter().cloned().map(Child::Text).collect()
                        }
                        Filler::Nested(labels) => {
                            let intent = self.intent(&labels[rng.gen_range(0..labels.len())]).expect("validated");
                            let phrase = &intent.phrases[rng.gen_range(0..intent.phrases.len())];
                            let sub = self.expand(phrase, rng, words)?;
                            vec![Child::Node(ParseNode::new(OntologySymbol::intent(intent.label.as_str())?, sub)?)]
                        }
                    };
                    children.push(Child::Node(ParseNode::new(slot, inner)?));
                }
            }
        }
        Ok(children)
    }

    /// One utterance: its words and its parse.
    pub fn sample(&self, compositional: bool, rng: &mut ChaCha8Rng) -> Result<(Vec<String>, ParseNode), DatagenError> {
        let candidates: Vec<&Intent> = self
            .intents()
            .filter(|i| i.templates.iter().any(|t| t.is_compositional() == compositional))
            .collect();
        let intent = candidates[rng.gen_range(0..candidates.len())];
        let templates: Vec<&Template> = intent
            .templates
            .iter()
            .filter(|t| t.is_compositional() == compositional)
            .collect();
        let template = templates[rng.gen_range(0..templates.len())];
        let mut words = Vec::new();
        let children = self.expand(template, rng, &mut words)?;
        let tree = ParseNode::new(OntologySymbol::intent(intent.label.as_str())?, children)?;
        Ok((words, tree))
    }

    fn has_compositional(&self) -> bool {
        self.intents().flat_map(|i| &i.templates).any(Template::is_compositional)
    }
}

fn parse_template(body: &str) -> Result<Template, String> {
    let mut parts = Vec::new();
    let mut rest = body.trim();
    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix('{') {
            let end = after.find('}').ok_or("unclosed `{`")?;
            let (label, filler) = after[..end].split_once(':').ok_or("slot needs `LABEL:filler`")?;
            let filler = match filler.strip_prefix('@') {
                Some(list) => Filler::Nested(list.split('|').map(str::to_string).collect()),
                None => Filler::Lexicon(filler.to_string()),
            };
            parts.push(Part::Slot {
                label: label.to_string(),
                filler,
            });
            rest = after[end + 1..].trim_start();
        } else {
            let end = rest.find(|c: char| c.is_whitespace() || c == '{').unwrap_or(rest.len());
            parts.push(Part::Word(rest[..end].to_string()));
            rest = rest[end..].trim_start();
        }
    }
    if parts.is_empty() {
        return Err("empty template".into());
    }
    Ok(Template { parts })
}

const ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "br", "tr", "",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ou", "ee"];
const CODAS: [&str; 7] = ["", "", "n", "r", "l", "s", "k"];
const NUMBERS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

/// Unique pronounceable names built from random syllables.
#[derive(Default)]
struct NameGenerator {
    used: BTreeSet<String>,
}

impl NameGenerator {
    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
                w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
            }
            w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
            if w.len() >= 4 && self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn generate(&mut self, kind: &str, count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<String>>> {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.gen_range(0..xs.len())].to_string();
        let mut out = Vec::new();
        match kind {
            "clock" => {
                for n in NUMBERS {
                    for half in ["am", "pm"] {
                        out.push(vec!["at".into(), n.into(), half.into()]);
                    }
                }
                out.push(vec!["at".into(), "noon".into()]);
                out.push(vec!["at".into(), "midnight".into()]);
                return Some(out);
            }
            "duration" => {
                for n in NUMBERS.iter().chain(&["twenty", "thirty", "forty", "fifty"]) {
                    for unit in ["seconds", "minutes", "hours"] {
                        out.push(vec![n.to_string(), unit.into()]);
                    }
                }
                return Some(out);
            }
            _ => {}
        }
        for _ in 0..count {
            let entry = match kind {
                "given" => vec![self.word(rng)],
                "person" => vec![self.word(rng), self.word(rng)],
                "title" => {
                    if rng.gen_bool(0.5) {
                        vec![self.word(rng)]
                    } else {
                        vec![self.word(rng), pick(rng, &["nights", "dreams", "mix", "hits", "songs", "lights"])]
                    }
                }
                "place" => match rng.gen_range(0..3) {
                    0 => vec![self.word(rng)],
                    1 => vec![self.word(rng), pick(rng, &["park", "heights", "beach", "center", "hills"])],
                    _ => vec!["lake".into(), self.word(rng)],
                },
                "road" => vec![self.word(rng), pick(rng, &["street", "avenue", "road", "drive"])],
                "team" => {
                    if rng.gen_bool(0.5) {
                        vec![self.word(rng)]
                    } else {
                        vec![self.word(rng), pick(rng, &["united", "rovers", "city"])]
                    }
                }
                _ => return None,
            };
            out.push(entry);
        }
        Some(out)
    }
}

/// Mixes a root seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` records with references and annotations; hypotheses equal the
/// references and audio is empty until filled in.
pub fn generate_corpus(
    grammar: &Grammar,
    n: usize,
    compositional_fraction: f64,
    seed: u64,
) -> Result<Vec<UtteranceRecord>, DatagenError> {
    if !(0.0..=1.0).contains(&compositional_fraction) {
        return Err(DatagenError::FractionOutOfRange(compositional_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comp_available = grammar.has_compositional();
    (0..n)
        .map(|i| {
            let compositional = comp_available && rng.gen::<f64>() < compositional_fraction;
            let (words, tree) = grammar.sample(compositional, &mut rng)?;
            let text = words.join(" ");
            Ok(UtteranceRecord {
                id: format!("utt{i:05}"),
                audio: Vec::new(),
                ref_text: text.clone(),
                hyp_text: text,
                annotation: serialize(&tree),
                has_asr_error: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureChannel {
    Natural,
    /// Systematically shifted features for the same words, standing in for
    /// synthesized speech.
    Mismatched,
}

impl FeatureChannel {
    pub fn name(self) -> &'static str {
        match self {
            FeatureChannel::Natural => "natural",
            FeatureChannel::Mismatched => "mismatched",
        }
    }
}

impl std::str::FromStr for FeatureChannel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "natural" => Ok(FeatureChannel::Natural),
            "mismatched" => Ok(FeatureChannel::Mismatched),
            other => Err(format!("unknown channel `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub frames_per_word: usize,
    /// Each word lasts `frames_per_word ± jitter` frames.
    pub jitter: usize,
    pub noise: f64,
    /// Weight of the channel-specific word vectors against the natural
    /// ones; 0 for the natural channel.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    pub feature_dim: usize,
    pub natural: ChannelParams,
    pub mismatched: ChannelParams,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            natural: ChannelParams {
                frames_per_word: 6,
                jitter: 1,
                noise: 0.3,
                shift: 0.0,
            },
            mismatched: ChannelParams {
                frames_per_word: 5,
                jitter: 0,
                noise: 0.05,
                shift: 0.6,
            },
        }
    }
}

impl AudioConfig {
    pub fn channel(&self, channel: FeatureChannel) -> &ChannelParams {
        match channel {
            FeatureChannel::Natural => &self.natural,
            FeatureChannel::Mismatched => &self.mismatched,
        }
    }
}

/// Onset and offset vectors for a word, keyed by the word and a salt.
fn word_vectors(word: &str, salt: &str, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let digest = Sha256::digest(format!("{salt}\u{0}{word}").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    let b = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    (a, b)
}

/// Frame features for a word sequence. Each word sweeps linearly from its
/// onset vector to its offset vector plus Gaussian noise.
pub fn synth_audio_features(
    words: &[String],
    channel: FeatureChannel,
    config: &AudioConfig,
    seed: u64,
) -> Result<Tensor, DatagenError> {
    if words.is_empty() {
        return Err(DatagenError::EmptyText);
    }
    let p = config.channel(channel);
    let dim = config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut frames = 0;
    for word in words {
        let (mut a, mut b) = word_vectors(word, "natural", dim);
        if p.shift > 0.0 {
            let (sa, sb) = word_vectors(word, "mismatched", dim);
            for i in 0..dim {
                a[i] = (1.0 - p.shift) * a[i] + p.shift * sa[i];
                b[i] = (1.0 - p.shift) * b[i] + p.shift * sb[i];
            }
        }
        let jitter = if p.jitter > 0 {
            rng.gen_range(0..=2 * p.jitter) as isize - p.jitter as isize
        } else {
            0
        };
        let k = (p.frames_per_word as isize + jitter).max(1) as usize;
        for j in 0..k {
            let t = if k > 1 { j as f64 / (k - 1) as f64 } else { 0.5 };
            for i in 0..dim {
                data.push(a[i] + (b[i] - a[i]) * t + p.noise * standard_normal(&mut rng));
            }
        }
        frames += k;
    }
    Ok(Tensor::new(vec![frames, dim], data).expect("shape"))
}

/// Replaces each record's audio with features from `channel`.
pub fn attach_audio(
    records: &mut [UtteranceRecord],
    channel: FeatureChannel,
    config: &AudioConfig,
    seed: u64,
) -> Result<(), DatagenError> {
    for (i, r) in records.iter_mut().enumerate() {
        let t = synth_audio_features(&r.ref_words(), channel, config, derive_seed(seed, i as u64))?;
        r.audio = crate::corpus::audio_from_tensor(&t);
    }
    Ok(())
}

/// Draws a hypothesis for every record and sets its error flag.
pub fn attach_hypotheses(records: &mut [UtteranceRecord], model: &AsrErrorModel, seed: u64) {
    for (i, r) in records.iter_mut().enumerate() {
        let hyp = model.corrupt(&r.ref_words(), derive_seed(seed, i as u64));
        r.set_hypothesis(&hyp);
    }
}

/// Confusion pools over the grammar's words: up to two close words from
/// the inventory plus one random character edit.
pub fn build_confusions(grammar: &Grammar, seed: u64) -> BTreeMap<String, Vec<String>> {
    let inventory: Vec<Vec<char>> = grammar.word_inventory().iter().map(|w| w.chars().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = BTreeMap::new();
    for w in &inventory {
        let limit = (w.len() / 3).max(1);
        let mut near: Vec<(usize, &Vec<char>)> = inventory
            .iter()
            .filter(|o| *o != w && o.len().abs_diff(w.len()) <= limit)
            .map(|o| (edit_distance(o, w), o))
            .filter(|&(d, _)| d <= limit)
            .collect();
        near.sort();
        let word: String = w.iter().collect();
        let mut alts: Vec<String> = near.iter().take(2).map(|(_, o)| o.iter().collect()).collect();
        alts.push(perturb_word(&word, &mut rng));
        pools.insert(word, alts);
    }
    pools
}

/// Shuffles and splits into train/valid/test. Counts are rounded for train
/// and valid; test takes the remainder.
pub fn split(
    records: Vec<UtteranceRecord>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<[Vec<UtteranceRecord>; 3], DatagenError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatagenError::BadRatios(ratios));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<UtteranceRecord>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<UtteranceRecord> { idx.iter().map(|&i| slots[i].take().expect("each once")).collect() };
    let train = take(&order[..n_train]);
    let valid = take(&order[n_train..n_train + n_valid]);
    let test = take(&order[n_train + n_valid..]);
    Ok([train, valid, test])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    /// Grammar file; the built-in grammar when absent.
    pub grammar: Option<String>,
    /// Seed of the procedural entity lexicons.
    pub lexicon_seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub compositional_fraction: f64,
    /// Target word error rate of the first-pass channel.
    pub wer: f64,
    pub zipf_exponent: f64,
    pub audio: AudioConfig,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            grammar: None,
            lexicon_seed: 0,
            train: 2000,
            valid: 400,
            test: 400,
            compositional_fraction: 0.2,
            wer: 0.2,
            zipf_exponent: 0.8,
            audio: AudioConfig::default(),
        }
    }
}

impl DatagenConfig {
    pub fn load_grammar(&self) -> Result<Grammar, DatagenError> {
        let text = match &self.grammar {
            None => DEFAULT_GRAMMAR.to_string(),
            Some(path) => std::fs::read_to_string(path).map_err(|source| DatagenError::Io {
                path: path.clone(),
                source,
            })?,
        };
        Grammar::parse(&text, self.lexicon_seed, self.zipf_exponent)
    }
}

/// A generated dataset. The mismatched splits carry the same utterances
/// and hypotheses as their natural counterparts with features from the
/// mismatched channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<UtteranceRecord>,
    pub valid: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    pub train_mismatched: Vec<UtteranceRecord>,
    pub valid_mismatched: Vec<UtteranceRecord>,
}

pub fn generate_dataset(grammar: &Grammar, config: &DatagenConfig, seed: u64) -> Result<Dataset, DatagenError> {
    let n = config.train + config.valid + config.test;
    let mut records = generate_corpus(grammar, n, config.compositional_fraction, derive_seed(seed, 1))?;
    let confusions = build_confusions(grammar, derive_seed(seed, 2));
    let fillers = FILLERS.iter().map(|s| s.to_string()).collect();
    let channel = AsrErrorModel::for_target_wer(config.wer, confusions, fillers).map_err(|e| DatagenError::Grammar {
        line: 0,
        msg: e.to_string(),
    })?;
    attach_hypotheses(&mut records, &channel, derive_seed(seed, 3));
    attach_audio(&mut records, FeatureChannel::Natural, &config.audio, derive_seed(seed, 4))?;
    let [train, valid, test] = if n == 0 {
        [Vec::new(), Vec::new(), Vec::new()]
    } else {
        let r = [config.train as f64 / n as f64, config.valid as f64 / n as f64, config.test as f64 / n as f64];
        split(records, r, derive_seed(seed, 5))?
    };
    let mismatched = |recs: &[UtteranceRecord], stream| -> Result<Vec<UtteranceRecord>, DatagenError> {
        let mut out = recs.to_vec();
        attach_audio(&mut out, FeatureChannel::Mismatched, &config.audio, derive_seed(seed, stream))?;
        Ok(out)
    };
    Ok(Dataset {
        train_mismatched: mismatched(&train, 6)?,
        valid_mismatched: mismatched(&valid, 7)?,
        train,
        valid,
        test,
    })
}
