//! Detection-unit controller: merges camera detections with smoke-sensor
//! readings, drives the distinct fire and smoke alarms and produces alert
//! messages for remote delivery.
//!
//! # State machine
//!
//! ```text
//!            smoke >= threshold for n readings
//!   Idle ─────────────────────────────────────► SmokeAlert
//!    │ ▲                                          │   ▲
//!    │ └──────── both conditions cleared ─────────┘   │ fire cleared,
//!    │                                                │ smoke still active
//!    │   k consecutive fire detections                │
//!    └──────────────────────────────────────► FireAlert
//!                 (also from SmokeAlert)
//! ```
//!
//! A condition is cleared by the same number of consecutive negative
//! observations that confirmed it (`smoke_debounce_n` readings below the
//! threshold, `fire_confirm_k` non-fire detections). Fire dominates smoke.
//! Every mode change emits one [`AlarmCommand`]; entering an alert mode also
//! emits an [`AlertMessage`] unless one of the same kind went out less than
//! `cooldown_ms` earlier.
//!
//! [`fusion_step`] is a pure function of `(state, event, config)`.

mod notify;
mod sensor;
mod store;

pub use notify::{
    AlertDispatcher, AlertTransport, DeliveryReport, DispatchOutcome, HttpTransport, Notifier, RetryPolicy,
    TransportError,
};
pub use sensor::{parse_sensor_line, parse_sensor_stream, read_sensor_stream, SensorIssue, SensorParse, ADC_MAX};
pub use store::{content_ref, upload_snapshot, DirectoryStore, SnapshotStore, StoreError};

use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::Detection;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FusionError {
    #[error("event at {got} ms arrived after an event at {last} ms")]
    OutOfOrder { last: u64, got: u64 },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("ADC value {0} out of 10-bit range")]
    AdcRange(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmokeReading {
    pub timestamp_ms: u64,
    pub adc_value: u16,
}

/// Encoded frame attached to a vision detection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub snapshot_ref: String,
    pub bytes: Arc<[u8]>,
}

impl Snapshot {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Self {
        let bytes = bytes.into();
        Self {
            snapshot_ref: content_ref(&bytes),
            bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnitEvent {
    Vision {
        detection: Detection,
        snapshot: Option<Snapshot>,
    },
    Smoke(SmokeReading),
}

impl UnitEvent {
    pub fn timestamp_ms(&self) -> u64 {
        match self {
            UnitEvent::Vision { detection, .. } => detection.timestamp_ms,
            UnitEvent::Smoke(r) => r.timestamp_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlarmKind {
    FireAlarmOn,
    SmokeAlarmOn,
    AllOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlarmCommand {
    pub kind: AlarmKind,
    pub timestamp_ms: u64,
}

impl fmt::Display for AlarmCommand {
    /// `timestamp_ms,Kind`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:?}", self.timestamp_ms, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fire,
    Smoke,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Fire => "fire",
            EventKind::Smoke => "smoke",
        }
    }
}

/// Alert payload; serializes to the webhook body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertMessage {
    #[serde(rename = "event")]
    pub event_kind: EventKind,
    /// ISO-8601 UTC.
    pub timestamp: String,
    pub confidence: f64,
    pub snapshot_ref: Option<String>,
    pub idempotency_key: String,
}

impl AlertMessage {
    pub fn new(event_kind: EventKind, timestamp_ms: u64, confidence: f64, snapshot_ref: Option<String>) -> Self {
        Self {
            event_kind,
            timestamp: iso8601(timestamp_ms),
            confidence,
            snapshot_ref,
            idempotency_key: format!("{}:{timestamp_ms}", event_kind.as_str()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("alert serializes")
    }
}

/// Milliseconds since the Unix epoch as ISO-8601 UTC with millisecond precision.
pub fn iso8601(timestamp_ms: u64) -> String {
    DateTime::from_timestamp_millis(timestamp_ms as i64)
        .expect("timestamp within chrono range")
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub smoke_threshold: u16,
    pub smoke_debounce_n: u32,
    pub fire_confirm_k: u32,
    pub cooldown_ms: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            smoke_threshold: 400,
            smoke_debounce_n: 3,
            fire_confirm_k: 3,
            cooldown_ms: 60_000,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.smoke_threshold == 0 || self.smoke_threshold > ADC_MAX {
            return Err(FusionError::InvalidConfig(format!(
                "smoke threshold {} outside 1-{ADC_MAX}",
                self.smoke_threshold
            )));
        }
        if self.smoke_debounce_n == 0 || self.fire_confirm_k == 0 || self.cooldown_ms == 0 {
            return Err(FusionError::InvalidConfig(
                "debounce, confirmation and cooldown must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnitMode {
    #[default]
    Idle,
    SmokeAlert,
    FireAlert,
}

/// Debounced boolean condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Debounced {
    active: bool,
    hits: u32,
    misses: u32,
}

impl Debounced {
    fn observe(&mut self, hit: bool, needed: u32) {
        if hit {
            self.hits += 1;
            self.misses = 0;
            if self.hits >= needed {
                self.active = true;
            }
        } else {
            self.misses += 1;
            self.hits = 0;
            if self.misses >= needed {
                self.active = false;
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionState {
    mode: UnitMode,
    smoke: Debounced,
    fire: Debounced,
    last_timestamp_ms: Option<u64>,
    last_fire_alert_ms: Option<u64>,
    last_smoke_alert_ms: Option<u64>,
    /// Highest fire probability of the current fire run.
    fire_confidence: f32,
    /// Most recent snapshot of the current fire run.
    fire_snapshot: Option<Snapshot>,
    last_smoke_adc: u16,
}

impl FusionState {
    pub fn mode(&self) -> UnitMode {
        self.mode
    }
}

/// Everything one transition produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub commands: Vec<AlarmCommand>,
    pub alerts: Vec<AlertMessage>,
    /// Snapshots referenced by `alerts`, to be uploaded before delivery.
    pub snapshots: Vec<Snapshot>,
}

impl StepOutput {
    pub fn is_empty(&self) -> bool {
        self.commands.is_empty() && self.alerts.is_empty()
    }
}

fn cooled_down(last: Option<u64>, now: u64, cooldown_ms: u64) -> bool {
    last.is_none_or(|t| now.saturating_sub(t) >= cooldown_ms)
}

/// One deterministic transition.
pub fn fusion_step(
    state: &FusionState,
    event: &UnitEvent,
    config: &FusionConfig,
) -> Result<(FusionState, StepOutput), FusionError> {
    config.validate()?;
    let now = event.timestamp_ms();
    if let Some(last) = state.last_timestamp_ms {
        if now < last {
            return Err(FusionError::OutOfOrder { last, got: now });
        }
    }
    let mut s = state.clone();
    s.last_timestamp_ms = Some(now);

    match event {
        UnitEvent::Smoke(r) => {
            if r.adc_value > ADC_MAX {
                return Err(FusionError::AdcRange(r.adc_value));
            }
            let hit = r.adc_value >= config.smoke_threshold;
            if hit {
                s.last_smoke_adc = r.adc_value;
            }
            s.smoke.observe(hit, config.smoke_debounce_n);
        }
        UnitEvent::Vision { detection, snapshot } => {
            if detection.is_fire {
                if s.fire.hits == 0 && !s.fire.active {
                    s.fire_confidence = 0.0;
                    s.fire_snapshot = None;
                }
                s.fire_confidence = s.fire_confidence.max(detection.fire_probability);
                if let Some(snap) = snapshot {
                    s.fire_snapshot = Some(snap.clone());
                }
            }
            s.fire.observe(detection.is_fire, config.fire_confirm_k);
        }
    }

    let target = if s.fire.active {
        UnitMode::FireAlert
    } else if s.smoke.active {
        UnitMode::SmokeAlert
    } else {
        UnitMode::Idle
    };

    let mut out = StepOutput::default();
    if target != s.mode {
        s.mode = target;
        match target {
            UnitMode::FireAlert => {
                out.commands.push(AlarmCommand {
                    kind: AlarmKind::FireAlarmOn,
                    timestamp_ms: now,
                });
                if cooled_down(s.last_fire_alert_ms, now, config.cooldown_ms) {
                    s.last_fire_alert_ms = Some(now);
                    let snap = s.fire_snapshot.clone();
                    out.alerts.push(AlertMessage::new(
                        EventKind::Fire,
                        now,
                        s.fire_confidence as f64,
                        snap.as_ref().map(|x| x.snapshot_ref.clone()),
                    ));
                    out.snapshots.extend(snap);
                }
            }
            UnitMode::SmokeAlert => {
                out.commands.push(AlarmCommand {
                    kind: AlarmKind::SmokeAlarmOn,
                    timestamp_ms: now,
                });
                if cooled_down(s.last_smoke_alert_ms, now, config.cooldown_ms) {
                    s.last_smoke_alert_ms = Some(now);
                    out.alerts.push(AlertMessage::new(
                        EventKind::Smoke,
                        now,
                        s.last_smoke_adc as f64 / ADC_MAX as f64,
                        None,
                    ));
                }
            }
            UnitMode::Idle => out.commands.push(AlarmCommand {
                kind: AlarmKind::AllOff,
                timestamp_ms: now,
            }),
        }
    }
    if !s.fire.active && s.fire.hits == 0 {
        s.fire_snapshot = None;
    }
    Ok((s, out))
}

/// Stateful wrapper around [`fusion_step`].
#[derive(Debug, Clone)]
pub struct FusionEngine {
    config: FusionConfig,
    state: FusionState,
}

impl FusionEngine {
    pub fn new(config: FusionConfig) -> Result<Self, FusionError> {
        config.validate()?;
        Ok(Self {
            config,
            state: FusionState::default(),
        })
    }

    pub fn state(&self) -> &FusionState {
        &self.state
    }

    /// Applies `event`; on error the state is left unchanged.
    pub fn step(&mut self, event: &UnitEvent) -> Result<StepOutput, FusionError> {
        let (next, out) = fusion_step(&self.state, event, &self.config)?;
        self.state = next;
        Ok(out)
    }
}

/// Runs a whole event log from the idle state and concatenates the outputs.
pub fn replay(events: &[UnitEvent], config: &FusionConfig) -> Result<StepOutput, FusionError> {
    let mut engine = FusionEngine::new(*config)?;
    let mut all = StepOutput::default();
    for e in events {
        let out = engine.step(e)?;
        all.commands.extend(out.commands);
        all.alerts.extend(out.alerts);
        all.snapshots.extend(out.snapshots);
    }
    Ok(all)
}

/// Merges vision and smoke events into one timestamp-ordered log. Smoke
/// readings come first on equal timestamps; each input keeps its order.
pub fn merge_events(vision: Vec<UnitEvent>, smoke: Vec<SmokeReading>) -> Vec<UnitEvent> {
    let mut out = Vec::with_capacity(vision.len() + smoke.len());
    let mut v = vision.into_iter().peekable();
    let mut s = smoke.into_iter().peekable();
    loop {
        match (v.peek(), s.peek()) {
            (Some(ve), Some(sr)) if sr.timestamp_ms <= ve.timestamp_ms() => {
                out.push(UnitEvent::Smoke(s.next().unwrap()))
            }
            (Some(_), _) => out.push(v.next().unwrap()),
            (None, Some(_)) => out.push(UnitEvent::Smoke(s.next().unwrap())),
            (None, None) => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(ts: u64, adc: u16) -> UnitEvent {
        UnitEvent::Smoke(SmokeReading {
            timestamp_ms: ts,
            adc_value: adc,
        })
    }

    fn vision(ts: u64, p: f32, snapshot: Option<&[u8]>) -> UnitEvent {
        UnitEvent::Vision {
            detection: Detection {
                sequence: ts,
                timestamp_ms: ts,
                fire_probability: p,
                is_fire: p >= 0.5,
            },
            snapshot: snapshot.map(Snapshot::new),
        }
    }

    fn kinds(out: &StepOutput) -> Vec<AlarmKind> {
        out.commands.iter().map(|c| c.kind).collect()
    }

    #[test]
    fn low_smoke_stays_idle() {
        let events: Vec<_> = (0..50).map(|i| smoke(i * 100, 399)).collect();
        let out = replay(&events, &FusionConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn two_readings_trigger_smoke_alarm() {
        let config = FusionConfig {
            smoke_debounce_n: 2,
            ..Default::default()
        };
        let mut engine = FusionEngine::new(config).unwrap();
        assert!(engine.step(&smoke(0, 500)).unwrap().is_empty());
        let out = engine.step(&smoke(100, 450)).unwrap();
        assert_eq!(kinds(&out), [AlarmKind::SmokeAlarmOn]);
        assert_eq!(out.alerts.len(), 1);
        assert_eq!(out.alerts[0].event_kind, EventKind::Smoke);
        assert!(engine.step(&smoke(200, 600)).unwrap().is_empty());
        assert_eq!(engine.state().mode(), UnitMode::SmokeAlert);
    }

    #[test]
    fn fire_dominates_smoke() {
        let config = FusionConfig {
            smoke_debounce_n: 2,
            fire_confirm_k: 2,
            ..Default::default()
        };
        let events = [
            smoke(0, 500),
            smoke(10, 500),
            vision(20, 0.9, Some(b"frame-a")),
            vision(30, 0.8, Some(b"frame-b")),
        ];
        let out = replay(&events, &config).unwrap();
        assert_eq!(kinds(&out), [AlarmKind::SmokeAlarmOn, AlarmKind::FireAlarmOn]);
        let fire = &out.alerts[1];
        assert_eq!(fire.event_kind, EventKind::Fire);
        assert_eq!(fire.snapshot_ref.as_deref(), Some(content_ref(b"frame-b").as_str()));
        assert!((fire.confidence - 0.9).abs() < 1e-6);
        assert_eq!(out.snapshots.len(), 1);
    }

    #[test]
    fn clearing_returns_to_idle_and_falls_back_to_smoke() {
        let config = FusionConfig {
            smoke_debounce_n: 1,
            fire_confirm_k: 1,
            ..Default::default()
        };
        let out = replay(
            &[vision(0, 0.9, None), smoke(5, 800), vision(10, 0.1, None), smoke(20, 0)],
            &config,
        )
        .unwrap();
        assert_eq!(
            kinds(&out),
            [AlarmKind::FireAlarmOn, AlarmKind::SmokeAlarmOn, AlarmKind::AllOff]
        );
    }

    #[test]
    fn cooldown_suppresses_repeat_alerts() {
        let config = FusionConfig {
            fire_confirm_k: 1,
            cooldown_ms: 1000,
            ..Default::default()
        };
        let events = [
            vision(0, 0.9, None),
            vision(100, 0.1, None),
            vision(200, 0.9, None),
            vision(300, 0.1, None),
            vision(1000, 0.9, None),
        ];
        let out = replay(&events, &config).unwrap();
        assert_eq!(
            out.commands.iter().filter(|c| c.kind == AlarmKind::FireAlarmOn).count(),
            3
        );
        let times: Vec<&str> = out.alerts.iter().map(|a| a.timestamp.as_str()).collect();
        assert_eq!(times, ["1970-01-01T00:00:00.000Z", "1970-01-01T00:00:01.000Z"]);
    }

    #[test]
    fn out_of_order_is_rejected_without_state_change() {
        let mut engine = FusionEngine::new(FusionConfig::default()).unwrap();
        engine.step(&smoke(100, 500)).unwrap();
        let before = engine.state().clone();
        assert_eq!(
            engine.step(&smoke(50, 500)),
            Err(FusionError::OutOfOrder { last: 100, got: 50 })
        );
        assert_eq!(engine.state(), &before);
    }

    #[test]
    fn config_validation() {
        assert!(FusionEngine::new(FusionConfig {
            fire_confirm_k: 0,
            ..Default::default()
        })
        .is_err());
        assert!(FusionConfig {
            smoke_threshold: 2000,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn alert_wire_format() {
        let a = AlertMessage::new(EventKind::Fire, 1_500, 0.75, Some("ab".into()));
        let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(v["event"], "fire");
        assert_eq!(v["timestamp"], "1970-01-01T00:00:01.500Z");
        assert_eq!(v["confidence"], 0.75);
        assert_eq!(v["snapshot_ref"], "ab");
        assert_eq!(v["idempotency_key"], "fire:1500");
        let s = AlertMessage::new(EventKind::Smoke, 0, 0.5, None);
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert!(v["snapshot_ref"].is_null());
    }

    #[test]
    fn merge_is_timestamp_ordered() {
        let merged = merge_events(
            vec![vision(10, 0.1, None), vision(20, 0.1, None)],
            vec![
                SmokeReading {
                    timestamp_ms: 10,
                    adc_value: 1,
                },
                SmokeReading {
                    timestamp_ms: 30,
                    adc_value: 1,
                },
            ],
        );
        let ts: Vec<(u64, bool)> = merged
            .iter()
            .map(|e| (e.timestamp_ms(), matches!(e, UnitEvent::Smoke(_))))
            .collect();
        assert_eq!(ts, [(10, true), (10, false), (20, false), (30, true)]);
    }
}
