use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{DataError, Result, ToyVoice};
use crate::audio::{read_wav, write_wav};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mt,
    Tts,
    Asr,
}

/// One line sent to a client.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClientRequest {
    pub id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
}

/// One line read back from a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResponse {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<String>,
}

impl ClientResponse {
    pub fn failure(id: impl Into<String>, err: impl Into<String>) -> Self {
        ClientResponse {
            id: id.into(),
            ok: false,
            text: None,
            audio: None,
            err: Some(err.into()),
        }
    }
}

/// An MT, TTS or ASR backend. Responses come back in request order; a
/// per-request failure is an `ok: false` response, not an `Err`.
pub trait Client {
    fn process(&mut self, requests: &[ClientRequest]) -> Result<Vec<ClientResponse>>;
}

/// Every request/response pair a stage exchanged, in request order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub pairs: Vec<(ClientRequest, ClientResponse)>,
}

#[derive(Serialize, Deserialize)]
struct TranscriptLine {
    request: ClientRequest,
    response: ClientResponse,
}

impl Transcript {
    /// Runs `requests` through `client` and appends the exchange.
    pub fn call(&mut self, client: &mut dyn Client, requests: &[ClientRequest]) -> Result<Vec<ClientResponse>> {
        let responses = client.process(requests)?;
        if responses.len() != requests.len() {
            return Err(DataError::Client(format!(
                "{} responses for {} requests",
                responses.len(),
                requests.len()
            )));
        }
        for (q, r) in requests.iter().zip(&responses) {
            if q.id != r.id {
                return Err(DataError::Client(format!("response {:?} answers request {:?}", r.id, q.id)));
            }
            self.pairs.push((q.clone(), r.clone()));
        }
        Ok(responses)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (q, r) in &self.pairs {
            let line = TranscriptLine {
                request: q.clone(),
                response: r.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("transcript serialises"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TranscriptLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            pairs.push((t.request, t.response));
        }
        Ok(Transcript { pairs })
    }
}

/// Answers from a recorded transcript; a request that was never recorded is
/// an error.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    answers: HashMap<ClientRequest, ClientResponse>,
}

impl ReplayClient {
    pub fn new(transcript: &Transcript) -> Self {
        ReplayClient {
            answers: transcript.pairs.iter().cloned().collect(),
        }
    }
}

impl Client for ReplayClient {
    fn process(&mut self, requests: &[ClientRequest]) -> Result<Vec<ClientResponse>> {
        requests
            .iter()
            .map(|q| {
                self.answers
                    .get(q)
                    .cloned()
                    .ok_or_else(|| DataError::Client(format!("no recorded response for {:?} ({:?})", q.id, q.task)))
            })
            .collect()
    }
}

/// Spawns `program args...` per batch, writes requests as JSON lines on its
/// stdin and correlates stdout responses by id.
#[derive(Debug, Clone)]
pub struct SubprocessClient {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SubprocessClient {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        SubprocessClient {
            program: program.into(),
            args,
        }
    }
}

impl Client for SubprocessClient {
    fn process(&mut self, requests: &[ClientRequest]) -> Result<Vec<ClientResponse>> {
        let mut ids = HashSet::new();
        for q in requests {
            if !ids.insert(q.id.as_str()) {
                return Err(DataError::DuplicateId(q.id.clone()));
            }
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| DataError::Client(format!("cannot start {}: {e}", self.program.display())))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload: String = requests
            .iter()
            .map(|q| serde_json::to_string(q).expect("request serialises") + "\n")
            .collect();
        // Writing on a separate thread keeps a chatty client from deadlocking
        // on a full stdout pipe.
        let writer = std::thread::spawn(move || -> std::io::Result<()> {
            stdin.write_all(payload.as_bytes())?;
            stdin.flush()
        });
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut got: HashMap<String, ClientResponse> = HashMap::new();
        for (i, line) in stdout.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ClientResponse = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: i + 1,
                msg: format!("client output: {e}"),
            })?;
            if !ids.contains(r.id.as_str()) {
                return Err(DataError::Client(format!("response for unknown id {:?}", r.id)));
            }
            got.insert(r.id.clone(), r);
        }
        let write_result = writer.join().expect("writer thread");
        let status = child.wait()?;
        let exit_note = if status.success() {
            "client gave no response".to_string()
        } else {
            format!("client exited with {status}")
        };
        if let Err(e) = write_result {
            log::warn!("client stdin closed early: {e}");
        }
        Ok(requests
            .iter()
            .map(|q| {
                got.remove(&q.id)
                    .unwrap_or_else(|| ClientResponse::failure(q.id.clone(), exit_note.clone()))
            })
            .collect())
    }
}

/// Word-level behaviour of the toy MT backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyMtMode {
    Identity,
    Reverse,
    /// Word substitution; an unknown word fails the request.
    Map(BTreeMap<String, String>),
}

/// In-process MT/TTS/ASR stand-ins built on [`ToyVoice`]. Also served over
/// the subprocess protocol by the `s2st-toy-client` binary.
#[derive(Debug, Clone)]
pub struct ToyClient {
    pub mt: ToyMtMode,
    /// Voice and output directory for TTS.
    pub tts: Option<(ToyVoice, PathBuf)>,
    pub asr: Option<ToyVoice>,
    /// Requests with these ids fail, for isolation tests.
    pub fail_ids: HashSet<String>,
}

impl ToyClient {
    pub fn mt(mode: ToyMtMode) -> Self {
        ToyClient {
            mt: mode,
            tts: None,
            asr: None,
            fail_ids: HashSet::new(),
        }
    }

    pub fn tts(voice: ToyVoice, out_dir: impl Into<PathBuf>) -> Self {
        ToyClient {
            tts: Some((voice, out_dir.into())),
            ..ToyClient::mt(ToyMtMode::Identity)
        }
    }

    pub fn asr(voice: ToyVoice) -> Self {
        ToyClient {
            asr: Some(voice),
            ..ToyClient::mt(ToyMtMode::Identity)
        }
    }

    fn answer(&self, q: &ClientRequest) -> std::result::Result<ClientResponse, String> {
        if self.fail_ids.contains(&q.id) {
            return Err("forced failure".into());
        }
        let ok = |text: Option<String>, audio: Option<String>| ClientResponse {
            id: q.id.clone(),
            ok: true,
            text,
            audio,
            err: None,
        };
        match q.task {
            Task::Mt => {
                let text = q.text.as_deref().ok_or("mt request without text")?;
                let words: Vec<&str> = text.split_whitespace().collect();
                let out: Vec<String> = match &self.mt {
                    ToyMtMode::Identity => words.iter().map(|w| w.to_string()).collect(),
                    ToyMtMode::Reverse => words.iter().rev().map(|w| w.to_string()).collect(),
                    ToyMtMode::Map(m) => words
                        .iter()
                        .map(|w| m.get(*w).cloned().ok_or_else(|| format!("no translation for {w:?}")))
                        .collect::<std::result::Result<_, _>>()?,
                };
                Ok(ok(Some(out.join(" ")), None))
            }
            Task::Tts => {
                let (voice, dir) = self.tts.as_ref().ok_or("tts not configured")?;
                let text = q.text.as_deref().ok_or("tts request without text")?;
                let phones = voice.parse_text(text).map_err(|e| e.to_string())?;
                if phones.is_empty() {
                    return Err("empty text".into());
                }
                let wave = voice.synthesize(&phones, None, 0.0).map_err(|e| e.to_string())?;
                std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                let path = dir.join(format!("{}.wav", q.id));
                write_wav(&path, &wave).map_err(|e| e.to_string())?;
                Ok(ok(None, Some(path.to_string_lossy().into_owned())))
            }
            Task::Asr => {
                let voice = self.asr.as_ref().ok_or("asr not configured")?;
                let audio = q.audio.as_deref().ok_or("asr request without audio")?;
                let wave = read_wav(audio).map_err(|e| e.to_string())?;
                let phones = voice.recognize(&wave).map_err(|e| e.to_string())?;
                Ok(ok(Some(voice.render(&phones)), None))
            }
        }
    }

    /// Serves the line protocol: reads every request, then writes responses
    /// in reverse order so callers must correlate by id.
    pub fn serve(&self, input: impl BufRead, mut output: impl Write) -> Result<()> {
        let mut requests = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let q: ClientRequest = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            requests.push(q);
        }
        let responses = self.process_ref(&requests);
        for r in responses.iter().rev() {
            writeln!(output, "{}", serde_json::to_string(r).expect("response serialises"))?;
        }
        output.flush()?;
        Ok(())
    }

    fn process_ref(&self, requests: &[ClientRequest]) -> Vec<ClientResponse> {
        requests
            .iter()
            .map(|q| self.answer(q).unwrap_or_else(|e| ClientResponse::failure(q.id.clone(), e)))
            .collect()
    }
}

impl Client for ToyClient {
    fn process(&mut self, requests: &[ClientRequest]) -> Result<Vec<ClientResponse>> {
        Ok(self.process_ref(requests))
    }
}
