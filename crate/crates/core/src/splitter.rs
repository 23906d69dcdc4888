//! Routes each example to System 1 or System 2 by majority vote over an
//! ensemble of voter profiles.
//!
//! Voters are cheap rule-based stand-ins for teacher models. Each rule can be
//! made noisy with a seeded per-example flip, and a voter may instead replay
//! verdicts from a file (which a [`CompletionClient`] can populate).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SystemLabel, TaskExample, SEP_TEXT};

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("voter {voter_id}: {reason}")]
    Profile { voter_id: String, reason: String },
    #[error("voter {voter_id} has no verdict for example {example_id}")]
    MissingVerdict { example_id: String, voter_id: String },
    #[error("expected {expected} verdicts, got {found}")]
    VerdictCount { expected: usize, found: usize },
    #[error("verdicts mix examples {0} and {1}")]
    MixedExamples(String, String),
    #[error("duplicate verdict for ({example_id}, {voter_id})")]
    DuplicateVerdict { example_id: String, voter_id: String },
    #[error("no voter profiles given")]
    NoProfiles,
    #[error("verdict file line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("completion service: {0}")]
    Service(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub example_id: String,
    pub voter_id: String,
    pub label: SystemLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// System 2 when the prompt has at least `min_ops` of `+ - *`.
    OperatorCount { min_ops: usize },
    /// System 2 when the prompt is longer than `max_chars` characters.
    PromptLength { max_chars: usize },
    /// System 2 when the prompt contains the answer-separator marker.
    MarkerPresence,
    /// Replayed labels keyed by example id.
    ExternalFile { labels: HashMap<String, SystemLabel> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoterProfile {
    pub voter_id: String,
    pub strategy: Strategy,
    pub error_rate: f64,
    pub seed: u64,
}

impl VoterProfile {
    pub fn new(
        voter_id: impl Into<String>,
        strategy: Strategy,
        error_rate: f64,
        seed: u64,
    ) -> Result<Self, SplitError> {
        let p = Self {
            voter_id: voter_id.into(),
            strategy,
            error_rate,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        if !(0.0..0.5).contains(&self.error_rate) {
            return Err(SplitError::Profile {
                voter_id: self.voter_id.clone(),
                reason: format!("error_rate must be in [0, 0.5), got {}", self.error_rate),
            });
        }
        Ok(())
    }

    /// Profile replaying this voter's lines from a verdict file.
    pub fn from_verdict_file(
        voter_id: &str,
        path: &Path,
        error_rate: f64,
        seed: u64,
    ) -> Result<Self, SplitError> {
        let labels = read_verdicts(path)?
            .into_iter()
            .filter(|v| v.voter_id == voter_id)
            .map(|v| (v.example_id, v.label))
            .collect();
        Self::new(voter_id, Strategy::ExternalFile { labels }, error_rate, seed)
    }
}

/// The voter's label for `example`; the noise flip depends only on the
/// profile seed and the example id.
pub fn classify(profile: &VoterProfile, example: &TaskExample) -> Result<Verdict, SplitError> {
    let prompt = example.prompt.as_str();
    let two = |b: bool| if b { SystemLabel::Two } else { SystemLabel::One };
    let rule = match &profile.strategy {
        Strategy::OperatorCount { min_ops } => {
            two(prompt.chars().filter(|c| matches!(c, '+' | '-' | '*')).count() >= *min_ops)
        }
        Strategy::PromptLength { max_chars } => two(prompt.chars().count() > *max_chars),
        Strategy::MarkerPresence => two(prompt.contains(SEP_TEXT)),
        Strategy::ExternalFile { labels } => {
            *labels
                .get(&example.id)
                .ok_or_else(|| SplitError::MissingVerdict {
                    example_id: example.id.clone(),
                    voter_id: profile.voter_id.clone(),
                })?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(profile.seed, &example.id));
    let flip = profile.error_rate > 0.0 && rng.random::<f64>() < profile.error_rate;
    let label = match (rule, flip) {
        (SystemLabel::One, true) => SystemLabel::Two,
        (SystemLabel::Two, true) => SystemLabel::One,
        (l, _) => l,
    };
    Ok(Verdict {
        example_id: example.id.clone(),
        voter_id: profile.voter_id.clone(),
        label,
    })
}

/// Strict majority over exactly `n` verdicts for one example; a tie goes to System 2.
pub fn vote(verdicts: &[Verdict], n: usize) -> Result<SystemLabel, SplitError> {
    if verdicts.len() != n || n == 0 {
        return Err(SplitError::VerdictCount {
            expected: n,
            found: verdicts.len(),
        });
    }
    if let Some(other) = verdicts.iter().find(|v| v.example_id != verdicts[0].example_id) {
        return Err(SplitError::MixedExamples(
            verdicts[0].example_id.clone(),
            other.example_id.clone(),
        ));
    }
    let ones = verdicts.iter().filter(|v| v.label == SystemLabel::One).count();
    Ok(if 2 * ones > n {
        SystemLabel::One
    } else {
        SystemLabel::Two
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tally {
    pub example_id: String,
    pub votes_one: usize,
    pub votes_two: usize,
    pub assigned: SystemLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub d1: Vec<TaskExample>,
    pub d2: Vec<TaskExample>,
    /// One entry per input example, in input order.
    pub tallies: Vec<Tally>,
}

impl Split {
    pub fn assigned(&self) -> Vec<SystemLabel> {
        self.tallies.iter().map(|t| t.assigned).collect()
    }

    /// Fraction of examples whose assignment matches the generator label.
    pub fn gold_agreement(&self, examples: &[TaskExample]) -> f64 {
        let hits = examples
            .iter()
            .zip(&self.tallies)
            .filter(|(e, t)| e.gold_system == t.assigned)
            .count();
        hits as f64 / examples.len().max(1) as f64
    }

    fn from_assignments(examples: &[TaskExample], tallies: Vec<Tally>) -> Self {
        let (mut d1, mut d2) = (Vec::new(), Vec::new());
        for (ex, t) in examples.iter().zip(&tallies) {
            match t.assigned {
                SystemLabel::One => d1.push(ex.clone()),
                _ => d2.push(ex.clone()),
            }
        }
        Self { d1, d2, tallies }
    }
}

pub fn split_corpus(examples: &[TaskExample], profiles: &[VoterProfile]) -> Result<Split, SplitError> {
    if profiles.is_empty() {
        return Err(SplitError::NoProfiles);
    }
    for p in profiles {
        p.validate()?;
    }
    let mut tallies = Vec::with_capacity(examples.len());
    for ex in examples {
        let verdicts = profiles
            .iter()
            .map(|p| classify(p, ex))
            .collect::<Result<Vec<_>, _>>()?;
        let assigned = vote(&verdicts, profiles.len())?;
        let votes_one = verdicts.iter().filter(|v| v.label == SystemLabel::One).count();
        tallies.push(Tally {
            example_id: ex.id.clone(),
            votes_one,
            votes_two: verdicts.len() - votes_one,
            assigned,
        });
    }
    Ok(Split::from_assignments(examples, tallies))
}

/// Content-blind baseline: each example goes to System 2 with probability
/// `p_two`, drawn from `seed` and the example id.
pub fn random_split(examples: &[TaskExample], p_two: f64, seed: u64) -> Split {
    let tallies = examples
        .iter()
        .map(|ex| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &ex.id));
            let two = rng.random::<f64>() < p_two;
            Tally {
                example_id: ex.id.clone(),
                votes_one: usize::from(!two),
                votes_two: usize::from(two),
                assigned: if two { SystemLabel::Two } else { SystemLabel::One },
            }
        })
        .collect();
    Split::from_assignments(examples, tallies)
}

pub fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<(), SplitError> {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&format!("{}\t{}\t{}\n", v.example_id, v.voter_id, v.label));
    }
    crate::binio::write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Reads `example_id \t voter_id \t label` lines, rejecting duplicate pairs.
pub fn read_verdicts(path: &Path) -> Result<Vec<Verdict>, SplitError> {
    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |reason: String| SplitError::Record { line: i + 1, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", cols.len())));
        }
        let label: SystemLabel = cols[2].parse().map_err(bad)?;
        if label == SystemLabel::Unknown {
            return Err(bad("verdict label must be 1 or 2".into()));
        }
        if !seen.insert((cols[0].to_string(), cols[1].to_string())) {
            return Err(SplitError::DuplicateVerdict {
                example_id: cols[0].into(),
                voter_id: cols[1].into(),
            });
        }
        out.push(Verdict {
            example_id: cols[0].into(),
            voter_id: cols[1].into(),
            label,
        });
    }
    Ok(out)
}

/// Per-voter label counts, for audit output.
pub fn voter_summary(verdicts: &[Verdict]) -> BTreeMap<String, (usize, usize)> {
    let mut m = BTreeMap::new();
    for v in verdicts {
        let e = m.entry(v.voter_id.clone()).or_insert((0, 0));
        match v.label {
            SystemLabel::One => e.0 += 1,
            _ => e.1 += 1,
        }
    }
    m
}

/// Role-play classification instruction sent to a teacher model.
pub fn role_play_prompt(target_model: &str, question: &str) -> String {
    format!(
        "You are role-playing {target_model}. Judge the question below the way \
         {target_model} itself would experience it.\n\
         Reply 1 (System 1) if {target_model} can answer it at once from memory or intuition.\n\
         Reply 2 (System 2) if {target_model} must work through several explicit reasoning steps.\n\
         Output only the digit.\n\n\
         Question: {question}\n"
    )
}

/// First `1` or `2` in a teacher reply.
pub fn parse_teacher_reply(reply: &str) -> Option<SystemLabel> {
    reply.chars().find_map(|c| match c {
        '1' => Some(SystemLabel::One),
        '2' => Some(SystemLabel::Two),
        _ => None,
    })
}

/// Minimal HTTP/1.1 text-in/text-out client: POSTs the prompt as
/// `text/plain` and returns the response body.
#[derive(Debug, Clone)]
pub struct CompletionClient {
    pub addr: String,
    pub path: String,
    pub timeout: Duration,
}

impl CompletionClient {
    pub fn new(addr: impl Into<String>, path: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            path: path.into(),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<String, SplitError> {
        let mut stream = TcpStream::connect(&self.addr)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let host = self.addr.split(':').next().unwrap_or(&self.addr);
        write!(
            stream,
            "POST {} HTTP/1.1\r\nHost: {host}\r\nContent-Type: text/plain; charset=utf-8\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{prompt}",
            self.path,
            prompt.len()
        )?;
        stream.flush()?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw)?;
        let text = String::from_utf8(raw).map_err(|e| SplitError::Service(e.to_string()))?;
        let (head, body) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| SplitError::Service("malformed response".into()))?;
        let status = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .ok_or_else(|| SplitError::Service("missing status line".into()))?;
        if status != "200" {
            return Err(SplitError::Service(format!("status {status}")));
        }
        if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
            return Err(SplitError::Service("chunked responses are not supported".into()));
        }
        Ok(body.to_string())
    }

    /// One verdict per example from this teacher.
    pub fn teacher_verdicts(
        &self,
        voter_id: &str,
        target_model: &str,
        examples: &[TaskExample],
    ) -> Result<Vec<Verdict>, SplitError> {
        examples
            .iter()
            .map(|ex| {
                let reply = self.complete(&role_play_prompt(target_model, &ex.prompt))?;
                let label = parse_teacher_reply(&reply)
                    .ok_or_else(|| SplitError::Service(format!("unparseable reply {reply:?}")))?;
                Ok(Verdict {
                    example_id: ex.id.clone(),
                    voter_id: voter_id.to_string(),
                    label,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{TaskGenerator, Tokenizer};
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn ex(id: &str, prompt: &str) -> TaskExample {
        TaskExample::new(&Tokenizer::default(), id, prompt, "1", SystemLabel::Unknown).unwrap()
    }

    fn verdicts(labels: &[u8]) -> Vec<Verdict> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Verdict {
                example_id: "e".into(),
                voter_id: format!("v{i}"),
                label: if l == 1 { SystemLabel::One } else { SystemLabel::Two },
            })
            .collect()
    }

    fn ops(seed: u64, error_rate: f64) -> VoterProfile {
        VoterProfile::new(format!("ops{seed}"), Strategy::OperatorCount { min_ops: 2 }, error_rate, seed).unwrap()
    }

    #[test]
    fn operator_rule_labels() {
        let p = ops(0, 0.0);
        assert_eq!(classify(&p, &ex("a", "3+4=")).unwrap().label, SystemLabel::One);
        assert_eq!(classify(&p, &ex("b", "((3+4)*2)-5=>")).unwrap().label, SystemLabel::Two);
        let m = VoterProfile::new("m", Strategy::MarkerPresence, 0.0, 0).unwrap();
        assert_eq!(classify(&m, &ex("b", "3*2=>")).unwrap().label, SystemLabel::Two);
        let l = VoterProfile::new("l", Strategy::PromptLength { max_chars: 5 }, 0.0, 0).unwrap();
        assert_eq!(classify(&l, &ex("c", "3+4=")).unwrap().label, SystemLabel::One);
    }

    #[test]
    fn noisy_verdicts_are_repeatable() {
        let p = ops(5, 0.3);
        let e = ex("x", "3+4=");
        let first = classify(&p, &e).unwrap();
        for _ in 0..5 {
            assert_eq!(classify(&p, &e).unwrap(), first);
        }
    }

    #[test]
    fn flip_rate_tracks_error_rate() {
        let g = TaskGenerator::new(8, 1, 0.2);
        let items = g.gen_system1(2000, 3).unwrap();
        let p = ops(9, 0.3);
        let flips = items
            .iter()
            .filter(|e| classify(&p, e).unwrap().label == SystemLabel::Two)
            .count() as f64
            / items.len() as f64;
        assert!((flips - 0.3).abs() < 0.04, "flip rate {flips}");
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote(&verdicts(&[1, 1, 2]), 3).unwrap(), SystemLabel::One);
        assert_eq!(vote(&verdicts(&[2, 2, 2, 1, 1]), 5).unwrap(), SystemLabel::Two);
        assert_eq!(vote(&verdicts(&[1, 1, 2, 2]), 4).unwrap(), SystemLabel::Two);
        assert!(matches!(
            vote(&verdicts(&[1, 2]), 3),
            Err(SplitError::VerdictCount { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn error_rate_must_be_below_half() {
        assert!(VoterProfile::new("v", Strategy::MarkerPresence, 0.5, 0).is_err());
        assert!(VoterProfile::new("v", Strategy::MarkerPresence, -0.1, 0).is_err());
    }

    #[test]
    fn clean_voters_recover_gold_split() {
        let g = TaskGenerator::new(8, 1, 0.3);
        let mut items = g.gen_system1(60, 1).unwrap();
        items.extend(g.gen_system2(40, 4, 1).unwrap());
        let profiles: Vec<_> = (0..5).map(|s| ops(s, 0.0)).collect();
        let split = split_corpus(&items, &profiles).unwrap();
        assert_eq!(split.gold_agreement(&items), 1.0);
        assert_eq!(split.d1.len() + split.d2.len(), items.len());
        let ids1: HashSet<_> = split.d1.iter().map(|e| &e.id).collect();
        assert!(split.d2.iter().all(|e| !ids1.contains(&e.id)));
        assert!(split.d1.iter().all(|e| e.gold_system == SystemLabel::One));

        let single = split_corpus(&items, &[ops(3, 0.2)]).unwrap();
        for (e, t) in items.iter().zip(&single.tallies) {
            assert_eq!(t.assigned, classify(&ops(3, 0.2), e).unwrap().label);
        }
    }

    #[test]
    fn ensemble_beats_single_voter() {
        let g = TaskGenerator::new(8, 1, 0.3);
        let mut items = g.gen_system1(100, 2).unwrap();
        items.extend(g.gen_system2(100, 4, 2).unwrap());
        let mut wins = Vec::new();
        for trial in 0..20u64 {
            let single = split_corpus(&items, &[ops(100 + trial, 0.2)]).unwrap();
            let five: Vec<_> = (0..5).map(|v| ops(1000 * trial + v, 0.2)).collect();
            let ens = split_corpus(&items, &five).unwrap();
            wins.push(ens.gold_agreement(&items) - single.gold_agreement(&items));
        }
        wins.sort_by(f64::total_cmp);
        assert!(wins[10] > 0.0, "median gain {}", wins[10]);
    }

    #[test]
    fn random_split_depends_on_seed() {
        let g = TaskGenerator::new(8, 1, 0.3);
        let items = g.gen_system1(50, 2).unwrap();
        let a = random_split(&items, 0.5, 1);
        assert_eq!(a, random_split(&items, 0.5, 1));
        assert_ne!(a.assigned(), random_split(&items, 0.5, 2).assigned());
    }

    #[test]
    fn verdict_file_round_trip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.tsv");
        let mut vs = verdicts(&[1, 2]);
        vs[1].example_id = "f".into();
        write_verdicts(&path, &vs).unwrap();
        assert_eq!(read_verdicts(&path).unwrap(), vs);

        let p = VoterProfile::from_verdict_file("v0", &path, 0.0, 0).unwrap();
        assert_eq!(classify(&p, &ex("e", "1+1=")).unwrap().label, SystemLabel::One);
        match classify(&p, &ex("zz", "1+1=")) {
            Err(SplitError::MissingVerdict { example_id, .. }) => assert_eq!(example_id, "zz"),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "e\tv0\t1\ne\tv0\t2\n").unwrap();
        assert!(matches!(read_verdicts(&path), Err(SplitError::DuplicateVerdict { .. })));
    }

    #[test]
    fn client_talks_to_local_service() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            for _ in 0..2 {
                let (mut s, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 1024];
                loop {
                    let n = s.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some((head, body)) = text.split_once("\r\n\r\n") {
                        let len: usize = head
                            .lines()
                            .find_map(|l| l.strip_prefix("Content-Length: "))
                            .unwrap()
                            .parse()
                            .unwrap();
                        if body.len() >= len {
                            let reply = if body.contains("=>") { "2" } else { "System 1" };
                            write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\n\r\n{reply}", reply.len()).unwrap();
                            break;
                        }
                    }
                }
            }
        });
        let client = CompletionClient::new(addr, "/complete");
        let got = client
            .teacher_verdicts("t1", "tiny-model", &[ex("a", "3+4="), ex("b", "(1+2)*3=>")])
            .unwrap();
        server.join().unwrap();
        assert_eq!(got[0].label, SystemLabel::One);
        assert_eq!(got[1].label, SystemLabel::Two);
        assert!(role_play_prompt("m", "q?").contains("Question: q?"));
    }

    proptest! {
        #[test]
        fn vote_ignores_order(labels in proptest::collection::vec(1u8..=2, 1..9), seed in any::<u64>()) {
            let vs = verdicts(&labels);
            let mut shuffled = vs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            prop_assert_eq!(vote(&vs, vs.len()).unwrap(), vote(&shuffled, vs.len()).unwrap());
        }
    }
}
