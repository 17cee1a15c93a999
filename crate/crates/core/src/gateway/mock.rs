//! Deterministic in-process backend used in tests and dry runs.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, CallError, FailureReason, InferenceConfig, Reply};
use crate::corpus::{LangPair, Segment};
use crate::prompts::RenderedPrompt;

/// Maps a segment's gold score to the score the mock reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreMap {
    Identity,
    Offset(f64),
    Constant(f64),
}

impl ScoreMap {
    pub fn apply(self, gold: f64) -> f64 {
        match self {
            ScoreMap::Identity => gold,
            ScoreMap::Offset(d) => gold + d,
            ScoreMap::Constant(c) => c,
        }
    }
}

/// Segments that should fail, and with which HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct FailPattern {
    /// Empty means every segment.
    pub segment_ids: BTreeSet<u64>,
    pub status: u16,
}

impl FailPattern {
    pub fn all(status: u16) -> Self {
        FailPattern {
            segment_ids: BTreeSet::new(),
            status,
        }
    }

    pub fn segments(ids: impl IntoIterator<Item = u64>, status: u16) -> Self {
        FailPattern {
            segment_ids: ids.into_iter().collect(),
            status,
        }
    }

    fn matches(&self, id: u64) -> bool {
        self.segment_ids.is_empty() || self.segment_ids.contains(&id)
    }
}

/// Mock behaviour. `Fail` and `Garbage` answer non-affected prompts like
/// `EchoScore(Identity)`.
///
/// String form (used by the CLI and run manifests):
/// `echo-score`, `echo-score:offset=5`, `echo-score:const=73`,
/// `fixed:<text>`, `fail:all`, `fail:5,7@503`, `garbage:0.1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MockPolicy {
    EchoScore(ScoreMap),
    Fixed(String),
    Fail(FailPattern),
    Garbage(f64),
}

impl fmt::Display for MockPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockPolicy::EchoScore(ScoreMap::Identity) => f.write_str("echo-score"),
            MockPolicy::EchoScore(ScoreMap::Offset(d)) => write!(f, "echo-score:offset={d}"),
            MockPolicy::EchoScore(ScoreMap::Constant(c)) => write!(f, "echo-score:const={c}"),
            MockPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            MockPolicy::Fail(p) => {
                if p.segment_ids.is_empty() {
                    f.write_str("fail:all")?;
                } else {
                    let ids: Vec<String> = p.segment_ids.iter().map(u64::to_string).collect();
                    write!(f, "fail:{}", ids.join(","))?;
                }
                if p.status != 500 {
                    write!(f, "@{}", p.status)?;
                }
                Ok(())
            }
            MockPolicy::Garbage(p) => write!(f, "garbage:{p}"),
        }
    }
}

impl FromStr for MockPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}` in mock policy `{s}`"));
        match kind {
            "echo-score" => match arg.split_once('=') {
                None if arg.is_empty() || arg == "identity" => Ok(MockPolicy::EchoScore(ScoreMap::Identity)),
                Some(("offset", v)) => Ok(MockPolicy::EchoScore(ScoreMap::Offset(num(v)?))),
                Some(("const", v)) => Ok(MockPolicy::EchoScore(ScoreMap::Constant(num(v)?))),
                _ => Err(format!("unknown echo-score mapping in `{s}`")),
            },
            "fixed" => Ok(MockPolicy::Fixed(arg.to_owned())),
            "fail" => {
                let (ids, status) = match arg.split_once('@') {
                    Some((ids, st)) => (ids, st.parse().map_err(|_| format!("bad status in `{s}`"))?),
                    None => (arg, 500),
                };
                if ids.is_empty() || ids == "all" {
                    Ok(MockPolicy::Fail(FailPattern::all(status)))
                } else {
                    let ids = ids
                        .split(',')
                        .map(|t| t.trim().parse::<u64>().map_err(|_| format!("bad segment id `{t}` in `{s}`")))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(MockPolicy::Fail(FailPattern::segments(ids, status)))
                }
            }
            "garbage" => {
                let p = num(arg)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("garbage probability {p} outside [0, 1]"));
                }
                Ok(MockPolicy::Garbage(p))
            }
            _ => Err(format!("unknown mock policy `{s}`")),
        }
    }
}

impl TryFrom<String> for MockPolicy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MockPolicy> for String {
    fn from(p: MockPolicy) -> String {
        p.to_string()
    }
}

const GARBAGE: [&str; 6] = [
    "I am unable to evaluate this translation.",
    "The translation seems mostly fine, although some words are odd.",
    "As a language model, I cannot provide a numeric rating here.",
    "Translation quality: good.",
    "N/A",
    "The source sentence is incomplete, so no judgement is possible.",
];

/// Reported score with at least one and at most two decimals.
fn format_echo(value: f64) -> String {
    let s = format!("{value:.2}");
    match s.strip_suffix('0') {
        Some(t) => t.to_owned(),
        None => s,
    }
}

fn mix(seed: u64, pair: &LangPair, id: u64) -> u64 {
    let mut h = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    for b in pair.to_string().bytes().chain(id.to_le_bytes()) {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub struct MockBackend {
    policy: MockPolicy,
    seed: u64,
    gold: HashMap<(LangPair, u64), f64>,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(policy: MockPolicy, seed: u64) -> Self {
        MockBackend {
            policy,
            seed,
            gold: HashMap::new(),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    /// Registers gold scores used by the echo policies.
    pub fn with_gold(mut self, segments: &[Segment]) -> Self {
        self.gold
            .extend(segments.iter().map(|s| ((s.pair.clone(), s.id), s.da_mean)));
        self
    }

    /// Sleeps this long per call and reports it as the latency.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of overlapping calls observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn echo(&self, map: ScoreMap, prompt: &RenderedPrompt) -> Result<String, CallError> {
        let gold = self
            .gold
            .get(&(prompt.pair.clone(), prompt.target_segment_id))
            .ok_or_else(|| {
                CallError::fatal(FailureReason::ProtocolError {
                    message: format!("mock has no gold score for segment {}", prompt.target_segment_id),
                })
            })?;
        Ok(format!("Score: {}", format_echo(map.apply(*gold))))
    }

    fn respond(&self, prompt: &RenderedPrompt) -> Result<String, CallError> {
        match &self.policy {
            MockPolicy::EchoScore(map) => self.echo(*map, prompt),
            MockPolicy::Fixed(text) => Ok(text.clone()),
            MockPolicy::Fail(pattern) if pattern.matches(prompt.target_segment_id) => {
                let status = pattern.status;
                Err(match status {
                    429 => CallError::retryable(FailureReason::RateLimited),
                    400..=499 => CallError::fatal(FailureReason::ClientError { status }),
                    _ => CallError::retryable(FailureReason::ServerError { status }),
                })
            }
            MockPolicy::Fail(_) => self.echo(ScoreMap::Identity, prompt),
            MockPolicy::Garbage(p) => {
                let key = mix(self.seed, &prompt.pair, prompt.target_segment_id);
                let mut rng = ChaCha8Rng::seed_from_u64(key ^ prompt.template as u64);
                if rng.random::<f64>() < *p {
                    Ok(GARBAGE[rng.random_range(0..GARBAGE.len())].to_owned())
                } else {
                    self.echo(ScoreMap::Identity, prompt)
                }
            }
        }
    }
}

impl Backend for MockBackend {
    fn call(&self, _config: &InferenceConfig, prompt: &RenderedPrompt) -> Result<Reply, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let result = self.respond(prompt);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result.map(|text| Reply {
            text,
            latency: Some(self.delay),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::prompts::{render_zero_shot, TemplateId, TemplateSet};

    fn prompt_for(seg: &Segment) -> RenderedPrompt {
        render_zero_shot(TemplateSet::builtin().get(TemplateId::Gemba).unwrap(), seg, 0).unwrap()
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in [
            "echo-score",
            "echo-score:offset=5",
            "echo-score:const=73",
            "fixed:fifty",
            "fail:all",
            "fail:5,7@503",
            "garbage:0.1",
        ] {
            let p: MockPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("garbage:2".parse::<MockPolicy>().is_err());
        assert!("echo".parse::<MockPolicy>().is_err());
        assert_eq!("echo-score:identity".parse::<MockPolicy>().unwrap(), MockPolicy::EchoScore(ScoreMap::Identity));
    }

    #[test]
    fn echo_formatting() {
        assert_eq!(format_echo(64.0), "64.0");
        assert_eq!(format_echo(72.5), "72.5");
        assert_eq!(format_echo(64.37), "64.37");
        assert_eq!(format_echo(100.0), "100.0");
    }

    #[test]
    fn fixed_and_garbage_outputs() {
        let pair: LangPair = "si-en".parse().unwrap();
        let seg = Segment::new(3, "a", "b", 64.0, pair, Split::Test).unwrap();
        let cfg = InferenceConfig::default();
        let fixed = MockBackend::new(MockPolicy::Fixed("fifty".into()), 0);
        assert_eq!(fixed.call(&cfg, &prompt_for(&seg)).unwrap().text, "fifty");

        let echo = MockBackend::new(MockPolicy::EchoScore(ScoreMap::Identity), 0).with_gold(std::slice::from_ref(&seg));
        assert_eq!(echo.call(&cfg, &prompt_for(&seg)).unwrap().text, "Score: 64.0");

        let garbage = MockBackend::new(MockPolicy::Garbage(1.0), 9).with_gold(std::slice::from_ref(&seg));
        let text = garbage.call(&cfg, &prompt_for(&seg)).unwrap().text;
        assert!(GARBAGE.contains(&text.as_str()));
        assert!(!text.bytes().any(|b| b.is_ascii_digit()));
    }
}
