//! Live consultation sessions: the trained models drive greedy inquiries and
//! a human supplies the answers. Shared by the terminal `consult` command and
//! the HTTP service.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::classifier::DiagnosisPrediction;
use crate::kb::{FindingKind, KnowledgeBase};
use crate::nn::NnError;
use crate::patient_sim::{Feedback, PatientContext, StateVector};
use crate::policy::{greedy_action, inquiry_mask, PolicyError};
use crate::trainer::Termination;

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("at least one self-reported finding is required")]
    EmptySelfReports,
    #[error("unknown finding id {0}")]
    UnknownFinding(usize),
    #[error("invalid context: {0}")]
    BadContext(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session is not awaiting an answer")]
    NotAwaiting,
    #[error("session already reached a diagnosis")]
    AlreadyDiagnosed,
    #[error("no model loaded")]
    NoModel,
    #[error("model error: {0}")]
    Model(String),
}

impl From<NnError> for SessionError {
    fn from(e: NnError) -> Self {
        SessionError::Model(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Positive,
    Negative,
    CantSay,
}

impl Answer {
    fn feedback(self) -> Option<Feedback> {
        match self {
            Answer::Positive => Some(Feedback::Positive),
            Answer::Negative => Some(Feedback::Negative),
            Answer::CantSay => None,
        }
    }
}

impl From<Feedback> for Answer {
    fn from(f: Feedback) -> Self {
        match f {
            Feedback::Positive => Answer::Positive,
            Feedback::Negative => Answer::Negative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingSelfReport,
    AwaitingAnswer { finding: usize },
    Diagnosed { disease: usize, entropy: f64, reason: Termination },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub turn: usize,
    pub finding: usize,
    pub finding_name: String,
    pub answer: Answer,
    pub entropy_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub self_reports: Vec<usize>,
    pub context: Option<PatientContext>,
    pub state: StateVector,
    pub asked: Vec<bool>,
    pub turn: usize,
    pub status: SessionStatus,
    pub initial_entropy: f64,
    pub history: Vec<HistoryRow>,
    pub created_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseProb {
    pub disease_id: usize,
    pub name: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub top: Vec<DiseaseProb>,
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub top_disease: usize,
    pub threshold_of_top_disease: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingRef {
    pub id: usize,
    pub name: String,
    pub kind: FindingKind,
}

/// Returned after every session transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub session_id: String,
    pub turn: usize,
    pub next_inquiry: Option<FindingRef>,
    pub diagnosis: Option<DiseaseProb>,
    pub stopped: bool,
    pub reason: Option<Termination>,
    pub entropy: f64,
    pub threshold_of_top_disease: f64,
    pub distribution_summary: DistributionSummary,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Immutable model snapshot that drives sessions.
pub struct SessionEngine {
    checkpoint: Arc<Checkpoint>,
    top_k: usize,
}

impl SessionEngine {
    pub fn new(checkpoint: Arc<Checkpoint>) -> Self {
        Self {
            checkpoint,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k.max(1);
        self
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.checkpoint.kb
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn max_steps(&self) -> usize {
        self.checkpoint.config.max_steps
    }

    pub fn findings(&self) -> Vec<FindingRef> {
        self.kb()
            .findings
            .iter()
            .map(|f| FindingRef {
                id: f.id,
                name: f.name.clone(),
                kind: f.kind,
            })
            .collect()
    }

    fn finding_ref(&self, id: usize) -> FindingRef {
        let f = &self.kb().findings[id];
        FindingRef {
            id,
            name: f.name.clone(),
            kind: f.kind,
        }
    }

    pub fn predict(&self, state: &StateVector) -> Result<DiagnosisPrediction, SessionError> {
        Ok(self.checkpoint.classifier.predict(state)?)
    }

    pub fn summarize(&self, pred: &DiagnosisPrediction) -> DistributionSummary {
        let mut order: Vec<usize> = (0..pred.probs.len()).collect();
        order.sort_by(|&a, &b| pred.probs[b].total_cmp(&pred.probs[a]).then(a.cmp(&b)));
        let top = order
            .into_iter()
            .take(self.top_k)
            .map(|d| DiseaseProb {
                disease_id: d,
                name: self.kb().disease_name(d).to_string(),
                prob: pred.probs[d],
            })
            .collect();
        DistributionSummary {
            top,
            probs: pred.probs.clone(),
            entropy: pred.entropy,
            top_disease: pred.top_disease,
            threshold_of_top_disease: self.checkpoint.thresholds.threshold_for(pred.top_disease),
        }
    }

    fn next_inquiry(&self, state: &StateVector, asked: &[bool]) -> Result<Option<usize>, SessionError> {
        let mask = inquiry_mask(state, asked);
        match self.checkpoint.policy.distribution(state, &mask) {
            Ok(dist) => Ok(Some(greedy_action(&dist))),
            Err(PolicyError::Exhausted) => Ok(None),
            Err(e) => Err(SessionError::Model(e.to_string())),
        }
    }

    fn view(&self, session: &Session, pred: &DiagnosisPrediction) -> StepView {
        let summary = self.summarize(pred);
        let (next_inquiry, diagnosis, stopped, reason) = match &session.status {
            SessionStatus::AwaitingAnswer { finding } => (Some(self.finding_ref(*finding)), None, false, None),
            SessionStatus::Diagnosed { disease, reason, .. } => (
                None,
                Some(DiseaseProb {
                    disease_id: *disease,
                    name: self.kb().disease_name(*disease).to_string(),
                    prob: pred.probs[*disease],
                }),
                true,
                Some(*reason),
            ),
            SessionStatus::AwaitingSelfReport => (None, None, false, None),
        };
        StepView {
            session_id: session.session_id.clone(),
            turn: session.turn,
            next_inquiry,
            diagnosis,
            stopped,
            reason,
            entropy: pred.entropy,
            threshold_of_top_disease: summary.threshold_of_top_disease,
            distribution_summary: summary,
        }
    }

    fn context_bits(&self, context: Option<PatientContext>) -> Result<Vec<u8>, SessionError> {
        let kb = self.kb();
        match (kb.has_context(), context) {
            (false, _) => Ok(Vec::new()),
            (true, None) => Err(SessionError::BadContext(
                "this knowledge base needs sex and age range".into(),
            )),
            (true, Some(ctx)) => {
                if ctx.age_range >= kb.age_ranges.len() {
                    return Err(SessionError::BadContext(format!(
                        "age range {} out of {}",
                        ctx.age_range,
                        kb.age_ranges.len()
                    )));
                }
                Ok(ctx.encode(kb.age_ranges.len()))
            }
        }
    }

    /// Builds `s_0` from the self-reports and picks the first inquiry.
    pub fn start(
        &self,
        session_id: String,
        self_reports: &[usize],
        context: Option<PatientContext>,
    ) -> Result<(Session, StepView), SessionError> {
        if self_reports.is_empty() {
            return Err(SessionError::EmptySelfReports);
        }
        let n = self.kb().n_findings();
        if let Some(&bad) = self_reports.iter().find(|&&f| f >= n) {
            return Err(SessionError::UnknownFinding(bad));
        }
        let mut state = StateVector::empty(n, self.context_bits(context)?);
        for &f in self_reports {
            state.set(f, Feedback::Positive);
        }
        let pred = self.predict(&state)?;
        let asked = vec![false; n];
        let status = match self.next_inquiry(&state, &asked)? {
            Some(finding) => SessionStatus::AwaitingAnswer { finding },
            None => SessionStatus::Diagnosed {
                disease: pred.top_disease,
                entropy: pred.entropy,
                reason: Termination::Timeout,
            },
        };
        let mut reports = self_reports.to_vec();
        reports.sort_unstable();
        reports.dedup();
        let session = Session {
            session_id,
            self_reports: reports,
            context,
            state,
            asked,
            turn: 0,
            status,
            initial_entropy: pred.entropy,
            history: Vec::new(),
            created_at_ms: now_ms(),
        };
        let view = self.view(&session, &pred);
        Ok((session, view))
    }

    /// Applies the answer to the pending inquiry, re-predicts, and either
    /// stops or picks the next inquiry.
    pub fn answer(&self, session: &mut Session, answer: Answer) -> Result<StepView, SessionError> {
        let finding = match session.status {
            SessionStatus::AwaitingAnswer { finding } => finding,
            SessionStatus::Diagnosed { .. } => return Err(SessionError::AlreadyDiagnosed),
            SessionStatus::AwaitingSelfReport => return Err(SessionError::NotAwaiting),
        };
        if let Some(fb) = answer.feedback() {
            session.state.set(finding, fb);
        }
        session.asked[finding] = true;
        session.turn += 1;
        let pred = self.predict(&session.state)?;
        session.history.push(HistoryRow {
            turn: session.turn,
            finding,
            finding_name: self.kb().finding_name(finding).to_string(),
            answer,
            entropy_after: pred.entropy,
        });
        let diagnosed = |reason| SessionStatus::Diagnosed {
            disease: pred.top_disease,
            entropy: pred.entropy,
            reason,
        };
        session.status = if self.checkpoint.thresholds.should_stop(pred.entropy, pred.top_disease) {
            diagnosed(Termination::EntropyStop)
        } else if session.turn >= self.max_steps() {
            diagnosed(Termination::Timeout)
        } else {
            match self.next_inquiry(&session.state, &session.asked)? {
                Some(next) => SessionStatus::AwaitingAnswer { finding: next },
                None => diagnosed(Termination::Timeout),
            }
        };
        Ok(self.view(session, &pred))
    }

    /// Current view without changing the session.
    pub fn current(&self, session: &Session) -> Result<StepView, SessionError> {
        let pred = self.predict(&session.state)?;
        Ok(self.view(session, &pred))
    }

    /// Recomputes the entropy after every history row from the stored
    /// self-reports and answers alone.
    pub fn replay_entropies(&self, session: &Session) -> Result<Vec<f64>, SessionError> {
        let n = self.kb().n_findings();
        let mut state = StateVector::empty(n, self.context_bits(session.context)?);
        for &f in &session.self_reports {
            state.set(f, Feedback::Positive);
        }
        session
            .history
            .iter()
            .map(|row| {
                if let Some(fb) = row.answer.feedback() {
                    state.set(row.finding, fb);
                }
                Ok(self.predict(&state)?.entropy)
            })
            .collect()
    }
}

struct StoredSession {
    engine: Arc<SessionEngine>,
    session: Session,
    last_active: Instant,
}

/// Concurrent session registry. Each session is locked independently and
/// keeps the engine snapshot it was created with.
pub struct SessionStore {
    engine: Mutex<Option<Arc<SessionEngine>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<StoredSession>>>>,
    idle_timeout: Duration,
}

/// Snapshot for read-only session queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session: Session,
    pub view: StepView,
}

impl SessionStore {
    pub fn new(engine: Option<Arc<SessionEngine>>, idle_timeout: Duration) -> Self {
        Self {
            engine: Mutex::new(engine),
            sessions: Mutex::new(HashMap::new()),
            idle_timeout,
        }
    }

    pub fn engine(&self) -> Option<Arc<SessionEngine>> {
        self.engine.lock().expect("engine lock").clone()
    }

    /// Replaces the model for sessions created from now on.
    pub fn swap_engine(&self, engine: Option<Arc<SessionEngine>>) {
        *self.engine.lock().expect("engine lock") = engine;
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("sessions lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the timeout.
    pub fn purge_expired(&self) -> usize {
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("sessions lock");
        let before = map.len();
        map.retain(|_, s| {
            let last = s.lock().map(|s| s.last_active).unwrap_or(now);
            now.duration_since(last) <= self.idle_timeout
        });
        before - map.len()
    }

    pub fn create(&self, self_reports: &[usize], context: Option<PatientContext>) -> Result<StepView, SessionError> {
        self.purge_expired();
        let engine = self.engine().ok_or(SessionError::NoModel)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (session, view) = engine.start(id.clone(), self_reports, context)?;
        let stored = StoredSession {
            engine,
            session,
            last_active: Instant::now(),
        };
        self.sessions
            .lock()
            .expect("sessions lock")
            .insert(id, Arc::new(Mutex::new(stored)));
        Ok(view)
    }

    fn lookup(&self, id: &str) -> Result<Arc<Mutex<StoredSession>>, SessionError> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn answer(&self, id: &str, answer: Answer) -> Result<StepView, SessionError> {
        let handle = self.lookup(id)?;
        let mut stored = handle.lock().expect("session lock");
        stored.last_active = Instant::now();
        let engine = stored.engine.clone();
        engine.answer(&mut stored.session, answer)
    }

    pub fn get(&self, id: &str) -> Result<SessionSnapshot, SessionError> {
        let handle = self.lookup(id)?;
        let mut stored = handle.lock().expect("session lock");
        stored.last_active = Instant::now();
        let view = stored.engine.current(&stored.session)?;
        Ok(SessionSnapshot {
            session: stored.session.clone(),
            view,
        })
    }
}

fn parse_answer(line: &str) -> Option<Answer> {
    match line.trim().to_ascii_lowercase().as_str() {
        "p" | "y" | "yes" | "positive" => Some(Answer::Positive),
        "n" | "no" | "negative" => Some(Answer::Negative),
        "u" | "?" | "unknown" | "cant_say" => Some(Answer::CantSay),
        _ => None,
    }
}

fn read_line(input: &mut impl BufRead) -> io::Result<Option<String>> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line))
}

/// Terminal consultation: reads self-reports, then one `p`/`n`/`u` answer
/// per inquiry, and prints the diagnosis. Returns the final view, or `None`
/// if input ended first.
pub fn consult_terminal(
    engine: &SessionEngine,
    mut input: impl BufRead,
    mut output: impl Write,
) -> io::Result<Option<StepView>> {
    let kb = engine.kb();
    writeln!(
        output,
        "{} findings, {} diseases. Enter self-reported findings (ids or names, comma separated):",
        kb.n_findings(),
        kb.n_diseases()
    )?;
    let self_reports = loop {
        let Some(line) = read_line(&mut input)? else {
            return Ok(None);
        };
        let parsed: Option<Vec<usize>> = line
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| kb.find_finding(s))
            .collect();
        match parsed {
            Some(ids) if !ids.is_empty() => break ids,
            _ => writeln!(output, "unrecognised finding; try again:")?,
        }
    };
    let context = if kb.has_context() {
        writeln!(output, "Enter sex bit and age range index (e.g. `1 2`):")?;
        loop {
            let Some(line) = read_line(&mut input)? else {
                return Ok(None);
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if let [sex, age] = parts[..] {
                if let (Ok(sex), Ok(age)) = (sex.parse::<u8>(), age.parse::<usize>()) {
                    if sex <= 1 && age < kb.age_ranges.len() {
                        break Some(PatientContext { sex: sex == 1, age_range: age });
                    }
                }
            }
            writeln!(output, "expected `<0|1> <age range index>`:")?;
        }
    } else {
        None
    };

    let (mut session, mut view) = engine
        .start("terminal".into(), &self_reports, context)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    writeln!(output, "initial entropy {:.4}", view.entropy)?;
    while let Some(next) = view.next_inquiry.clone() {
        writeln!(output, "Q{}: {} ? [p/n/u]", session.turn + 1, next.name)?;
        let answer = loop {
            let Some(line) = read_line(&mut input)? else {
                return Ok(None);
            };
            match parse_answer(&line) {
                Some(a) => break a,
                None => writeln!(output, "answer p (positive), n (negative) or u (can't say):")?,
            }
        };
        view = engine
            .answer(&mut session, answer)
            .map_err(|e| io::Error::other(e.to_string()))?;
        let top = &view.distribution_summary.top[0];
        writeln!(
            output,
            "  entropy {:.4}  leading {} ({:.3})",
            view.entropy, top.name, top.prob
        )?;
    }
    if let Some(d) = &view.diagnosis {
        let reason = match view.reason {
            Some(Termination::EntropyStop) => "entropy below threshold",
            _ => "step limit reached",
        };
        writeln!(
            output,
            "Diagnosis: {} (p={:.3}, entropy {:.4}, threshold {:.4}; {reason})",
            d.name, d.prob, view.entropy, view.threshold_of_top_disease
        )?;
    }
    Ok(Some(view))
}
