//! Remote alert delivery: HTTP webhook transport, bounded retries with
//! exponential backoff, and a background dispatcher that keeps network I/O
//! off the control loop.

use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Sender};
use thiserror::Error;

use super::{upload_snapshot, AlertMessage, Snapshot, SnapshotStore};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

pub trait AlertTransport: Send + Sync {
    /// POSTs a JSON `body`; returns the HTTP status.
    fn post(&self, url: &str, body: &str, idempotency_key: &str) -> Result<u16, TransportError>;
}

/// Blocking HTTP client.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(10))
    }
}

impl AlertTransport for HttpTransport {
    fn post(&self, url: &str, body: &str, idempotency_key: &str) -> Result<u16, TransportError> {
        self.agent
            .post(url)
            .header("Content-Type", "application/json")
            .header("Idempotency-Key", idempotency_key)
            .send(body)
            .map(|r| r.status().as_u16())
            .map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReport {
    pub delivered: bool,
    pub attempts: u32,
    pub status: Option<u16>,
    pub error: Option<String>,
    pub idempotency_key: String,
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

pub struct Notifier {
    endpoint: String,
    transport: Box<dyn AlertTransport>,
    policy: RetryPolicy,
}

impl Notifier {
    pub fn new(endpoint: impl Into<String>, transport: Box<dyn AlertTransport>, policy: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into(),
            transport,
            policy,
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Self::new(endpoint, Box::new(HttpTransport::default()), RetryPolicy::default())
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Delivers `alert`, retrying transport errors, 429 and 5xx. Every attempt
    /// carries the same idempotency key.
    pub fn send_alert(&self, alert: &AlertMessage) -> DeliveryReport {
        let body = alert.to_json();
        let key = &alert.idempotency_key;
        let mut report = DeliveryReport {
            delivered: false,
            attempts: 0,
            status: None,
            error: None,
            idempotency_key: key.clone(),
        };
        for attempt in 0..=self.policy.max_retries {
            if attempt > 0 {
                thread::sleep(self.policy.backoff(attempt));
            }
            report.attempts += 1;
            match self.transport.post(&self.endpoint, &body, key) {
                Ok(status) => {
                    report.status = Some(status);
                    if (200..300).contains(&status) {
                        report.delivered = true;
                        report.error = None;
                        return report;
                    }
                    report.error = Some(format!("HTTP {status}"));
                    if !retryable(status) {
                        return report;
                    }
                }
                Err(e) => {
                    report.status = None;
                    report.error = Some(e.0);
                }
            }
            log::warn!("alert {key}: attempt {} failed: {:?}", report.attempts, report.error);
        }
        report
    }
}

/// What happened to one alert handed to the dispatcher.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub alert: AlertMessage,
    /// Stored snapshot reference, or the storage error.
    pub snapshot: Option<Result<String, String>>,
    /// `None` in dry-run mode.
    pub delivery: Option<DeliveryReport>,
}

struct Job {
    alerts: Vec<AlertMessage>,
    snapshots: Vec<Snapshot>,
}

/// Background worker for snapshot uploads and alert delivery.
pub struct AlertDispatcher {
    tx: Option<Sender<Job>>,
    handle: Option<JoinHandle<Vec<DispatchOutcome>>>,
}

impl AlertDispatcher {
    /// `notifier: None` is dry-run: alerts are recorded but not sent.
    pub fn spawn(notifier: Option<Notifier>, store: Option<Box<dyn SnapshotStore>>) -> Self {
        let (tx, rx) = unbounded::<Job>();
        let handle = thread::spawn(move || {
            let mut outcomes = Vec::new();
            for job in rx {
                for alert in job.alerts {
                    let snapshot = alert.snapshot_ref.as_ref().and_then(|r| {
                        let snap = job.snapshots.iter().find(|s| &s.snapshot_ref == r)?;
                        let store = store.as_deref()?;
                        Some(upload_snapshot(store, &snap.bytes).map_err(|e| e.to_string()))
                    });
                    let delivery = notifier.as_ref().map(|n| n.send_alert(&alert));
                    outcomes.push(DispatchOutcome {
                        alert,
                        snapshot,
                        delivery,
                    });
                }
            }
            outcomes
        });
        Self {
            tx: Some(tx),
            handle: Some(handle),
        }
    }

    /// Queues alerts and the snapshots they reference; never blocks on I/O.
    pub fn submit(&self, alerts: Vec<AlertMessage>, snapshots: Vec<Snapshot>) {
        if alerts.is_empty() {
            return;
        }
        if let Some(tx) = &self.tx {
            let _ = tx.send(Job { alerts, snapshots });
        }
    }

    /// Drains the queue and returns every outcome in submission order.
    pub fn finish(mut self) -> Vec<DispatchOutcome> {
        self.tx.take();
        self.handle
            .take()
            .map(|h| h.join().unwrap_or_default())
            .unwrap_or_default()
    }
}

impl Drop for AlertDispatcher {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
