use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::template::Message;
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    512
}

impl CompletionParams {
    pub fn new(model_id: impl Into<String>) -> Self {
        CompletionParams {
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub model_id: String,
    pub cached: bool,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying (timeouts, 5xx).
    Transient(String),
    RateLimited { retry_after: Option<Duration>, message: String },
    /// Retrying cannot help (bad credentials, malformed request).
    Fatal(String),
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::RateLimited { message, .. } => write!(f, "rate limited: {message}"),
            BackendError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, messages: &[Message], params: &CompletionParams) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 20_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay_ms: 0, max_delay_ms: 0 }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(16));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayStats {
    /// Successful backend completions (each stored in the cache).
    pub backend_calls: u64,
    /// All backend invocations including failed ones.
    pub attempts: u64,
    pub cache_hits: u64,
    pub keys_touched: BTreeSet<String>,
    pub keys_missed: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    params: CompletionParams,
    messages: Vec<Message>,
    text: String,
    latency_ms: f64,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Cached, retrying front door to an [`LlmBackend`].
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    cache_dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, CacheEntry>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    retry: RetryPolicy,
    in_flight: Semaphore,
    stats: Mutex<GatewayStats>,
}

pub fn cache_key(messages: &[Message], params: &CompletionParams) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        model_id: &'a str,
        temperature: f64,
        max_tokens: u32,
        messages: &'a [Message],
    }
    util::hash_json(&KeyMaterial {
        model_id: &params.model_id,
        temperature: params.temperature,
        max_tokens: params.max_tokens,
        messages,
    })
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Gateway {
            backend,
            cache_dir: None,
            memory: Mutex::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            retry: RetryPolicy::default(),
            in_flight: Semaphore::new(8),
            stats: Mutex::new(GatewayStats::default()),
        }
    }

    /// Persist responses as `<dir>/<key>.json`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight_limit(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    pub fn stats(&self) -> GatewayStats {
        self.stats.lock().unwrap().clone()
    }

    pub fn reset_stats(&self) {
        *self.stats.lock().unwrap() = GatewayStats::default();
    }

    fn lookup(&self, key: &str) -> Option<CacheEntry> {
        if let Some(e) = self.memory.lock().unwrap().get(key) {
            return Some(e.clone());
        }
        let dir = self.cache_dir.as_ref()?;
        let entry: CacheEntry = util::read_json(&dir.join(format!("{key}.json"))).ok()?;
        if entry.key != key {
            return None;
        }
        self.memory.lock().unwrap().insert(key.to_string(), entry.clone());
        Some(entry)
    }

    fn store(&self, entry: CacheEntry) -> Result<()> {
        if let Some(dir) = &self.cache_dir {
            util::write_json(&dir.join(format!("{}.json", entry.key)), &entry)?;
        }
        self.memory.lock().unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn complete(&self, messages: &[Message], params: &CompletionParams) -> Result<LlmResponse> {
        if messages.is_empty() {
            return Err(Error::validation("completion request without messages"));
        }
        let key = cache_key(messages, params);
        let lock = self
            .key_locks
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone();
        let _held = lock.lock().unwrap();
        self.stats.lock().unwrap().keys_touched.insert(key.clone());

        if let Some(hit) = self.lookup(&key) {
            self.stats.lock().unwrap().cache_hits += 1;
            return Ok(LlmResponse {
                text: hit.text,
                model_id: hit.params.model_id,
                cached: true,
                latency_ms: hit.latency_ms,
            });
        }

        let _permit = self.in_flight.acquire();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            self.stats.lock().unwrap().attempts += 1;
            let started = Instant::now();
            let outcome = self.backend.complete(messages, params);
            let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
            match outcome {
                Ok(text) => {
                    self.store(CacheEntry {
                        key: key.clone(),
                        params: params.clone(),
                        messages: messages.to_vec(),
                        text: text.clone(),
                        latency_ms,
                    })?;
                    let mut s = self.stats.lock().unwrap();
                    s.backend_calls += 1;
                    s.keys_missed.insert(key);
                    return Ok(LlmResponse {
                        text,
                        model_id: params.model_id.clone(),
                        cached: false,
                        latency_ms,
                    });
                }
                Err(BackendError::Fatal(m)) => {
                    return Err(Error::Transport { attempts, message: m });
                }
                Err(e) if attempts >= self.retry.max_attempts => {
                    return Err(Error::Transport { attempts, message: e.to_string() });
                }
                Err(BackendError::RateLimited { retry_after, message }) => {
                    let wait = retry_after.unwrap_or_else(|| self.retry.delay(attempts));
                    log::warn!("rate limited ({message}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(BackendError::Transient(m)) => {
                    let wait = self.retry.delay(attempts);
                    log::warn!("backend failure ({m}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    /// Runs independent requests concurrently; output order matches input order.
    pub fn complete_many(
        &self,
        requests: &[(Vec<Message>, CompletionParams)],
    ) -> Vec<Result<LlmResponse>> {
        requests
            .par_iter()
            .map(|(m, p)| self.complete(m, p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::MockBackend;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Failing {
        calls: AtomicU32,
        fail_first: u32,
        err: BackendError,
    }

    impl LlmBackend for Failing {
        fn complete(&self, _: &[Message], _: &CompletionParams) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.fail_first {
                Err(self.err.clone())
            } else {
                Ok("Yes.".into())
            }
        }
    }

    fn msgs() -> Vec<Message> {
        vec![Message::user("Does the abstract discuss N2O emissions?")]
    }

    #[test]
    fn second_identical_request_is_cached() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("Yes.")));
        let p = CompletionParams::new("mock");
        let a = gw.complete(&msgs(), &p).unwrap();
        let b = gw.complete(&msgs(), &p).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
        let s = gw.stats();
        assert_eq!(s.backend_calls, 1);
        assert_eq!(s.cache_hits, 1);
    }

    #[test]
    fn params_are_part_of_the_key() {
        let gw = Gateway::new(Arc::new(MockBackend::constant("No.")));
        let mut p = CompletionParams::new("mock");
        gw.complete(&msgs(), &p).unwrap();
        p.temperature = 0.7;
        assert!(!gw.complete(&msgs(), &p).unwrap().cached);
    }

    #[test]
    fn retries_exhausted_reports_attempts() {
        let backend = Arc::new(Failing {
            calls: AtomicU32::new(0),
            fail_first: 3,
            err: BackendError::Transient("boom".into()),
        });
        let gw = Gateway::new(backend.clone()).with_retry(RetryPolicy::no_delay(3));
        match gw.complete(&msgs(), &CompletionParams::new("m")) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rate_limit_backs_off_then_succeeds() {
        let backend = Arc::new(Failing {
            calls: AtomicU32::new(0),
            fail_first: 2,
            err: BackendError::RateLimited { retry_after: Some(Duration::from_millis(1)), message: "429".into() },
        });
        let gw = Gateway::new(backend.clone()).with_retry(RetryPolicy::no_delay(3));
        let r = gw.complete(&msgs(), &CompletionParams::new("m")).unwrap();
        assert_eq!(r.text, "Yes.");
        assert_eq!(gw.stats().attempts, 3);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let backend = Arc::new(Failing {
            calls: AtomicU32::new(0),
            fail_first: 10,
            err: BackendError::Fatal("401".into()),
        });
        let gw = Gateway::new(backend.clone()).with_retry(RetryPolicy::no_delay(3));
        assert!(matches!(
            gw.complete(&msgs(), &CompletionParams::new("m")),
            Err(Error::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn disk_cache_survives_new_gateway() {
        let dir = tempfile::tempdir().unwrap();
        let p = CompletionParams::new("mock");
        let gw = Gateway::new(Arc::new(MockBackend::constant("Yes."))).with_cache_dir(dir.path());
        gw.complete(&msgs(), &p).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);

        let cold = Gateway::new(Arc::new(MockBackend::constant("different"))).with_cache_dir(dir.path());
        let r = cold.complete(&msgs(), &p).unwrap();
        assert!(r.cached);
        assert_eq!(r.text, "Yes.");
        assert_eq!(cold.stats().backend_calls, 0);
    }

    #[test]
    fn concurrent_same_key_calls_backend_once() {
        let backend = Arc::new(Failing {
            calls: AtomicU32::new(0),
            fail_first: 0,
            err: BackendError::Fatal(String::new()),
        });
        let gw = Gateway::new(backend.clone()).with_in_flight_limit(4);
        let reqs: Vec<_> = (0..32).map(|_| (msgs(), CompletionParams::new("m"))).collect();
        let out = gw.complete_many(&reqs);
        assert!(out.iter().all(|r| r.is_ok()));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        let s = gw.stats();
        assert_eq!(s.backend_calls as usize, s.keys_missed.len());
    }
}
