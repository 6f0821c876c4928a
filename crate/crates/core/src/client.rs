//! Fetches branch scores from a remote scoring endpoint.
//!
//! Wire contract: `POST {base_url}/score` with
//!
//! ```text
//! {"question":str,"options":[{"label":str,"text":str?}],"image_ref":str?,"branch":"mm"|"txt"|"noisy_img"|"disturbed"}
//! ```
//!
//! answered by `{"scores":[num]}`, one score per option in request order.
//! A bearer token is sent when configured.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{self, Branch, BranchScores, EvalRecord, Example, ParseError};

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub auth_token: Option<String>,
    /// First retry delay; doubles on each further retry.
    pub backoff_base: Duration,
    /// Upper bound on requests in flight.
    pub concurrency: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            auth_token: None,
            backoff_base: Duration::from_secs(1),
            concurrency: 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint URL '{0}': {1}")]
    BadUrl(String, String),
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("cannot build HTTP client: {0}")]
    Build(#[from] reqwest::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub question: String,
    pub labels: Vec<String>,
    pub option_texts: Option<Vec<String>>,
    pub image_ref: Option<String>,
    pub branch: Branch,
}

impl ScoreRequest {
    /// The request for one branch of an example. The figure reference is
    /// dropped for the text-only branch.
    pub fn for_example(example: &Example, option_texts: Option<&[String]>, branch: Branch) -> Self {
        ScoreRequest {
            question: example.question.clone().unwrap_or_default(),
            labels: example.labels.clone(),
            option_texts: option_texts.map(<[String]>::to_vec),
            image_ref: if branch.needs_image() { example.image_ref.clone() } else { None },
            branch,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.branch.needs_image(), self.image_ref.is_some()) {
            (true, false) => return Err(format!("branch {} needs an image_ref", self.branch)),
            (false, true) => return Err("text-only branch must not carry an image_ref".into()),
            _ => {}
        }
        if let Some(texts) = &self.option_texts {
            if texts.len() != self.labels.len() {
                return Err(format!("{} option texts for {} labels", texts.len(), self.labels.len()));
            }
        }
        if self.labels.is_empty() {
            return Err("no options".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireOption<'a> {
    label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    question: &'a str,
    options: Vec<WireOption<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
    branch: Branch,
}

impl<'a> From<&'a ScoreRequest> for WireRequest<'a> {
    fn from(r: &'a ScoreRequest) -> Self {
        WireRequest {
            question: &r.question,
            options: r
                .labels
                .iter()
                .enumerate()
                .map(|(i, label)| WireOption {
                    label,
                    text: r.option_texts.as_ref().map(|t| t[i].as_str()),
                })
                .collect(),
            image_ref: r.image_ref.as_deref(),
            branch: r.branch,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FetchError {
    #[error("record '{id}' branch {branch}: timed out")]
    Timeout { id: String, branch: Branch },
    #[error("record '{id}' branch {branch}: transport error: {message}")]
    Transport { id: String, branch: Branch, message: String },
    #[error("record '{id}' branch {branch}: malformed response: {message}")]
    MalformedResponse { id: String, branch: Branch, message: String },
    #[error("record '{id}' branch {branch}: invalid request: {message}")]
    InvalidRequest { id: String, branch: Branch, message: String },
}

impl FetchError {
    /// Short manifest reason such as `Timeout(txt)`.
    pub fn reason(&self) -> String {
        match self {
            FetchError::Timeout { branch, .. } => format!("Timeout({branch})"),
            FetchError::Transport { branch, message, .. } => format!("TransportError({branch}): {message}"),
            FetchError::MalformedResponse { branch, message, .. } => {
                format!("MalformedResponse({branch}): {message}")
            }
            FetchError::InvalidRequest { branch, message, .. } => format!("InvalidRequest({branch}): {message}"),
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, FetchError::Timeout { .. } | FetchError::Transport { .. })
    }
}

/// Outcome of one HTTP attempt, before the retry decision.
enum Attempt {
    Done(Vec<f64>),
    Retryable(FetchError),
    Fatal(FetchError),
}

#[derive(Deserialize)]
struct WireResponse {
    scores: Vec<serde_json::Value>,
}

pub struct ScoreClient {
    config: EndpointConfig,
    url: Url,
    http: Client,
    requests: AtomicUsize,
}

impl ScoreClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        let base = Url::parse(&config.base_url)
            .map_err(|e| ClientError::BadUrl(config.base_url.clone(), e.to_string()))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::BadUrl(config.base_url.clone(), "not a base URL".into()));
        }
        if config.timeout.is_zero() {
            return Err(ClientError::ZeroTimeout);
        }
        if config.concurrency == 0 {
            return Err(ClientError::ZeroConcurrency);
        }
        let url = Url::parse(&format!("{}/score", config.base_url.trim_end_matches('/')))
            .map_err(|e| ClientError::BadUrl(config.base_url.clone(), e.to_string()))?;
        let http = Client::builder().timeout(config.timeout).build()?;
        Ok(ScoreClient { config, url, http, requests: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// HTTP attempts made so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// Scores one branch, retrying transport failures with exponential
    /// backoff.
    pub fn fetch_branch(&self, record_id: &str, request: &ScoreRequest) -> Result<BranchScores, FetchError> {
        let branch = request.branch;
        request.validate().map_err(|message| FetchError::InvalidRequest {
            id: record_id.to_string(),
            branch,
            message,
        })?;
        let body = WireRequest::from(request);
        let mut delay = self.config.backoff_base;
        let mut retries = 0;
        loop {
            match self.attempt(record_id, request, &body) {
                Attempt::Done(logits) => return Ok(BranchScores { branch, logits }),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable(e) if retries >= self.config.max_retries => return Err(e),
                Attempt::Retryable(_) => {
                    retries += 1;
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }

    fn attempt(&self, id: &str, request: &ScoreRequest, body: &WireRequest<'_>) -> Attempt {
        let branch = request.branch;
        let transport = |message: String| FetchError::Transport { id: id.to_string(), branch, message };
        let malformed = |message: String| FetchError::MalformedResponse { id: id.to_string(), branch, message };

        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut builder = self.http.post(self.url.clone()).json(body);
        if let Some(token) = &self.config.auth_token {
            builder = builder.bearer_auth(token);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Attempt::Retryable(FetchError::Timeout { id: id.to_string(), branch })
            }
            Err(e) => return Attempt::Retryable(transport(e.to_string())),
        };

        let status = response.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Retryable(transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Attempt::Fatal(transport(format!("HTTP {status}")));
        }
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => {
                return Attempt::Retryable(FetchError::Timeout { id: id.to_string(), branch })
            }
            Err(e) => return Attempt::Retryable(transport(e.to_string())),
        };
        match parse_scores(&text, request.labels.len()) {
            Ok(scores) => Attempt::Done(scores),
            Err(message) => Attempt::Fatal(malformed(message)),
        }
    }

    /// Fetches every requested branch for every example not already complete
    /// in `out`, and rewrites `out` in example order.
    ///
    /// Completed records are appended to `out` as they arrive, so an
    /// interrupted run can be resumed. Examples with any failed branch go to
    /// the failure manifest (`<out>.failures.jsonl`) and never to `out`.
    pub fn build_records(
        &self,
        examples: &[FetchExample],
        branches: &[Branch],
        out: &Path,
    ) -> Result<BuildOutcome, BuildError> {
        check_branches(branches)?;
        check_examples(examples)?;

        let mut existing: Vec<EvalRecord> = if out.exists() {
            record::parse_records(BufReader::new(File::open(out)?))?
        } else {
            Vec::new()
        };
        let complete: HashSet<String> = existing
            .iter()
            .filter(|r| branches.iter().all(|b| r.branch(*b).is_some()))
            .map(|r| r.id().to_string())
            .collect();
        let pending: Vec<usize> = (0..examples.len())
            .filter(|&i| !complete.contains(&examples[i].example.id))
            .collect();
        let pending_ids: HashSet<&str> = pending.iter().map(|&i| examples[i].example.id.as_str()).collect();
        existing.retain(|r| !pending_ids.contains(r.id()));
        let skipped = examples.len() - pending.len();

        let tasks: Vec<(usize, Branch)> =
            pending.iter().flat_map(|&i| branches.iter().map(move |&b| (i, b))).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.concurrency.min(tasks.len());
        let mut fresh = Vec::new();
        let mut failures = Vec::new();

        thread::scope(|scope| -> Result<(), BuildError> {
            let (tx, rx) = mpsc::channel();
            for _ in 0..workers {
                let tx = tx.clone();
                let (tasks, next) = (&tasks, &next);
                scope.spawn(move || loop {
                    let t = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(ex, branch)) = tasks.get(t) else { break };
                    let fx = &examples[ex];
                    let req = ScoreRequest::for_example(&fx.example, fx.option_texts.as_deref(), branch);
                    let result = self.fetch_branch(&fx.example.id, &req);
                    if tx.send((ex, result)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            let mut sink = OpenOptions::new().create(true).append(true).open(out)?;
            let mut partial: HashMap<usize, Vec<Result<BranchScores, FetchError>>> = HashMap::new();
            for (ex, result) in rx {
                let slot = partial.entry(ex).or_default();
                slot.push(result);
                if slot.len() < branches.len() {
                    continue;
                }
                let results = partial.remove(&ex).unwrap_or_default();
                match assemble(&examples[ex].example, results) {
                    Ok(rec) => {
                        writeln!(sink, "{}", record::record_to_line(&rec).map_err(io::Error::other)?)?;
                        sink.flush()?;
                        fresh.push((ex, rec));
                    }
                    Err(errors) => failures.push((ex, FailureEntry::from_errors(&examples[ex].example.id, &errors))),
                }
            }
            Ok(())
        })?;

        // final file: example order first, then any foreign records already there
        let order: HashMap<&str, usize> =
            examples.iter().enumerate().map(|(i, e)| (e.example.id.as_str(), i)).collect();
        let new_count = fresh.len();
        let mut all: Vec<(usize, EvalRecord)> = existing
            .into_iter()
            .enumerate()
            .map(|(j, r)| (order.get(r.id()).copied().unwrap_or(examples.len() + j), r))
            .chain(fresh)
            .collect();
        all.sort_by_key(|(i, _)| *i);
        let records: Vec<EvalRecord> = all.into_iter().map(|(_, r)| r).collect();
        write_atomically(out, &record::records_to_bytes(&records)?)?;

        failures.sort_by_key(|(i, _)| *i);
        let failures: Vec<FailureEntry> = failures.into_iter().map(|(_, f)| f).collect();
        let manifest = manifest_path(out);
        if failures.is_empty() {
            if manifest.exists() {
                fs::remove_file(&manifest)?;
            }
        } else {
            let mut buf = Vec::new();
            for f in &failures {
                serde_json::to_writer(&mut buf, f).map_err(io::Error::other)?;
                buf.push(b'\n');
            }
            write_atomically(&manifest, &buf)?;
        }

        Ok(BuildOutcome { records, fetched: new_count, skipped, failures })
    }
}

fn parse_scores(body: &str, k: usize) -> Result<Vec<f64>, String> {
    let resp: WireResponse = serde_json::from_str(body).map_err(|e| e.to_string())?;
    if resp.scores.len() != k {
        return Err(format!("expected {k} scores, got {}", resp.scores.len()));
    }
    resp.scores
        .iter()
        .enumerate()
        .map(|(i, v)| match v.as_f64() {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(format!("score {i} is not a finite number: {v}")),
        })
        .collect()
}

fn assemble(example: &Example, results: Vec<Result<BranchScores, FetchError>>) -> Result<EvalRecord, Vec<FetchError>> {
    let mut record = EvalRecord::new(example.clone());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(s) => {
                record.branches.insert(s.branch, s.logits);
            }
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| match e {
            FetchError::Timeout { branch, .. }
            | FetchError::Transport { branch, .. }
            | FetchError::MalformedResponse { branch, .. }
            | FetchError::InvalidRequest { branch, .. } => *branch,
        });
        return Err(errors);
    }
    if let Some(v) = record.violations().into_iter().next() {
        return Err(vec![FetchError::MalformedResponse {
            id: example.id.clone(),
            branch: Branch::Mm,
            message: v.to_string(),
        }]);
    }
    Ok(record)
}

fn check_branches(branches: &[Branch]) -> Result<(), BuildError> {
    for required in [Branch::Mm, Branch::Txt] {
        if !branches.contains(&required) {
            return Err(BuildError::Branches(format!("branch {required} is required")));
        }
    }
    let unique: HashSet<_> = branches.iter().collect();
    if unique.len() != branches.len() {
        return Err(BuildError::Branches("duplicate branch".into()));
    }
    Ok(())
}

fn check_examples(examples: &[FetchExample]) -> Result<(), BuildError> {
    let mut seen = HashSet::new();
    for fx in examples {
        let ex = &fx.example;
        if let Some(v) = ex.violations().into_iter().next() {
            return Err(BuildError::InvalidExample(ex.id.clone(), v.to_string()));
        }
        if !seen.insert(ex.id.as_str()) {
            return Err(BuildError::InvalidExample(ex.id.clone(), "duplicate id".into()));
        }
    }
    Ok(())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".failures.jsonl");
    PathBuf::from(p)
}

/// An example as listed in a fetch input file: the record fields without
/// branches, plus optional option texts aligned with `labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchExample {
    #[serde(flatten)]
    pub example: Example,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_texts: Option<Vec<String>>,
}

impl From<Example> for FetchExample {
    fn from(example: Example) -> Self {
        FetchExample { example, option_texts: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub id: String,
    pub reasons: Vec<String>,
    /// Any of the failures was a timeout or transport error.
    pub transport: bool,
}

impl FailureEntry {
    fn from_errors(id: &str, errors: &[FetchError]) -> Self {
        FailureEntry {
            id: id.to_string(),
            reasons: errors.iter().map(FetchError::reason).collect(),
            transport: errors.iter().any(FetchError::is_transport),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    /// Everything now in the output file, in example order.
    pub records: Vec<EvalRecord>,
    /// Records fetched in this run.
    pub fetched: usize,
    /// Examples already complete in the output before this run.
    pub skipped: usize,
    pub failures: Vec<FailureEntry>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("existing output: {0}")]
    Existing(#[from] ParseError),
    #[error("invalid branch list: {0}")]
    Branches(String),
    #[error("example '{0}': {1}")]
    InvalidExample(String, String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(image: Option<&str>) -> Example {
        Example {
            id: "e1".into(),
            dataset: "d".into(),
            category: None,
            question: Some("Which curve?".into()),
            image_ref: image.map(str::to_string),
            labels: vec!["A".into(), "B".into()],
            gold: "A".into(),
        }
    }

    #[test]
    fn txt_request_drops_image() {
        let ex = example(Some("fig.png"));
        let txt = ScoreRequest::for_example(&ex, None, Branch::Txt);
        assert!(txt.image_ref.is_none());
        assert!(txt.validate().is_ok());
        let mm = ScoreRequest::for_example(&ex, None, Branch::Mm);
        assert_eq!(mm.image_ref.as_deref(), Some("fig.png"));

        let no_image = ScoreRequest::for_example(&example(None), None, Branch::NoisyImg);
        assert!(no_image.validate().is_err());
    }

    #[test]
    fn wire_body_shape() {
        let texts = vec!["rises".to_string(), "falls".to_string()];
        let req = ScoreRequest::for_example(&example(Some("f.png")), Some(&texts), Branch::Mm);
        let body = serde_json::to_string(&WireRequest::from(&req)).unwrap();
        assert_eq!(
            body,
            r#"{"question":"Which curve?","options":[{"label":"A","text":"rises"},{"label":"B","text":"falls"}],"image_ref":"f.png","branch":"mm"}"#
        );
        let req = ScoreRequest::for_example(&example(Some("f.png")), None, Branch::Txt);
        let body = serde_json::to_string(&WireRequest::from(&req)).unwrap();
        assert_eq!(body, r#"{"question":"Which curve?","options":[{"label":"A"},{"label":"B"}],"branch":"txt"}"#);
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_scores(r#"{"scores":[-0.1,-2.3,-0.9,-4.0]}"#, 4).unwrap(), vec![-0.1, -2.3, -0.9, -4.0]);
        assert!(parse_scores(r#"{"scores":[-0.1,-2.3,-0.9]}"#, 4).unwrap_err().contains("expected 4"));
        assert!(parse_scores(r#"{"scores":[1,"x"]}"#, 2).is_err());
        assert!(parse_scores(r#"{"score":[1,2]}"#, 2).is_err());
        assert!(parse_scores("not json", 2).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(matches!(ScoreClient::new(EndpointConfig::new("nope")), Err(ClientError::BadUrl(..))));
        let mut c = EndpointConfig::new("http://127.0.0.1:9");
        c.timeout = Duration::ZERO;
        assert!(matches!(ScoreClient::new(c), Err(ClientError::ZeroTimeout)));
        let client = ScoreClient::new(EndpointConfig::new("http://127.0.0.1:9/api/")).unwrap();
        assert_eq!(client.url.as_str(), "http://127.0.0.1:9/api/score");
    }

    #[test]
    fn manifest_reasons() {
        let e = FetchError::Timeout { id: "x".into(), branch: Branch::Txt };
        assert_eq!(e.reason(), "Timeout(txt)");
        assert!(e.is_transport());
        let m = FetchError::MalformedResponse { id: "x".into(), branch: Branch::Mm, message: "bad".into() };
        assert!(!m.is_transport());
        assert_eq!(manifest_path(Path::new("/tmp/r.jsonl")), PathBuf::from("/tmp/r.jsonl.failures.jsonl"));
    }

    #[test]
    fn branch_list_checks() {
        assert!(check_branches(&[Branch::Mm]).is_err());
        assert!(check_branches(&[Branch::Mm, Branch::Txt, Branch::Txt]).is_err());
        assert!(check_branches(&[Branch::Txt, Branch::Mm, Branch::NoisyImg]).is_ok());
    }
}
