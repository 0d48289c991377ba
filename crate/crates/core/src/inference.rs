//! Real-time frame classification.
//!
//! Frames come from a [`FrameSource`] (a directory of images or a stream of
//! concatenated PPM frames), are classified independently, and are emitted
//! to a sink strictly in sequence order even when several worker threads
//! classify frames concurrently.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{decode_file, decode_ppm, encode_ppm, read_ppm, sorted_files, DataError, RgbImage};
use crate::network::{Network, NetworkError, FIRE_CLASS};

/// Frame spacing assigned to sources without their own clock (24 fps).
pub const DEFAULT_FRAME_INTERVAL_MS: u64 = 42;
pub const MIN_BENCH_FRAMES: usize = 100;
pub const BENCH_WARMUP_FRAMES: usize = 10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f32),
    #[error("frame {sequence}: {reason}")]
    Frame { sequence: u64, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub image: RgbImage,
    pub timestamp_ms: u64,
    pub sequence: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub sequence: u64,
    pub timestamp_ms: u64,
    pub fire_probability: f32,
    pub is_fire: bool,
}

impl fmt::Display for Detection {
    /// `sequence,timestamp_ms,fire_probability,is_fire`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6},{}",
            self.sequence, self.timestamp_ms, self.fire_probability, self.is_fire
        )
    }
}

impl FromStr for Detection {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || InferenceError::InvalidArgument(format!("malformed detection record {s:?}"));
        let f: Vec<&str> = s.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(Detection {
            sequence: f[0].parse().map_err(|_| bad())?,
            timestamp_ms: f[1].parse().map_err(|_| bad())?,
            fire_probability: f[2].parse().map_err(|_| bad())?,
            is_fire: f[3].parse().map_err(|_| bad())?,
        })
    }
}

fn check_threshold(threshold: f32) -> Result<(), InferenceError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(InferenceError::Threshold(threshold))
    }
}

/// Fire decision rule: probability at or above the threshold.
pub fn decide(fire_probability: f32, threshold: f32) -> bool {
    fire_probability >= threshold
}

/// Resizes, normalizes and classifies one frame in evaluation mode.
pub fn classify_frame(net: &Network, frame: &Frame, threshold: f32) -> Result<Detection, InferenceError> {
    check_threshold(threshold)?;
    frame.image.validate().map_err(|e| InferenceError::Frame {
        sequence: frame.sequence,
        reason: e.to_string(),
    })?;
    let input = frame.image.to_tensor(net.input_side())?;
    let p = net.predict_image(&input)?.data()[FIRE_CLASS];
    Ok(Detection {
        sequence: frame.sequence,
        timestamp_ms: frame.timestamp_ms,
        fire_probability: p,
        is_fire: decide(p, threshold),
    })
}

/// An ordered supply of frames; `None` ends the stream.
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Option<Result<Frame, InferenceError>>;
}

impl<I> FrameSource for I
where
    I: Iterator<Item = Result<Frame, InferenceError>> + Send,
{
    fn next_frame(&mut self) -> Option<Result<Frame, InferenceError>> {
        self.next()
    }
}

/// Image files of a directory in sorted path order, stamped at a fixed
/// frame interval.
pub struct DirectorySource {
    files: VecDeque<PathBuf>,
    next_sequence: u64,
    interval_ms: u64,
}

impl DirectorySource {
    pub fn open(dir: impl AsRef<Path>, interval_ms: u64) -> Result<Self, InferenceError> {
        Ok(Self {
            files: sorted_files(dir.as_ref())?.into(),
            next_sequence: 0,
            interval_ms,
        })
    }

    pub fn remaining(&self) -> usize {
        self.files.len()
    }
}

impl Iterator for DirectorySource {
    type Item = Result<Frame, InferenceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.pop_front()?;
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        Some(
            decode_file(&path)
                .map(|image| Frame {
                    image,
                    timestamp_ms: sequence * self.interval_ms,
                    sequence,
                })
                .map_err(InferenceError::from),
        )
    }
}

/// Concatenated binary PPM frames read from any buffered reader.
pub struct PpmStreamSource<R> {
    reader: R,
    next_sequence: u64,
    interval_ms: u64,
    failed: bool,
}

impl<R: BufRead> PpmStreamSource<R> {
    pub fn new(reader: R, interval_ms: u64) -> Self {
        Self {
            reader,
            next_sequence: 0,
            interval_ms,
            failed: false,
        }
    }
}

impl<R: BufRead + Send> Iterator for PpmStreamSource<R> {
    type Item = Result<Frame, InferenceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match read_ppm(&mut self.reader) {
            Ok(None) => None,
            Ok(Some(image)) => {
                let sequence = self.next_sequence;
                self.next_sequence += 1;
                Some(Ok(Frame {
                    image,
                    timestamp_ms: sequence * self.interval_ms,
                    sequence,
                }))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e.into()))
            }
        }
    }
}

/// Optional temporal smoothing: a frame counts as fire when at least `k` of
/// the last `n` raw decisions (including this one) were fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KOfN {
    pub k: usize,
    pub n: usize,
}

impl KOfN {
    pub fn new(k: usize, n: usize) -> Result<Self, InferenceError> {
        if k == 0 || n == 0 || k > n {
            return Err(InferenceError::InvalidArgument(format!(
                "k-of-n smoothing needs 0 < k <= n, got {k} of {n}"
            )));
        }
        Ok(Self { k, n })
    }
}

#[derive(Debug, Clone)]
pub struct Smoother {
    rule: KOfN,
    window: VecDeque<bool>,
}

impl Smoother {
    pub fn new(rule: KOfN) -> Self {
        Self {
            rule,
            window: VecDeque::with_capacity(rule.n),
        }
    }

    pub fn apply(&mut self, mut d: Detection) -> Detection {
        if self.window.len() == self.rule.n {
            self.window.pop_front();
        }
        self.window.push_back(d.is_fire);
        d.is_fire = self.window.iter().filter(|&&f| f).count() >= self.rule.k;
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOptions {
    pub threshold: f32,
    /// Classification threads; 1 runs everything on the calling thread.
    pub workers: usize,
    pub smoothing: Option<KOfN>,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            workers: 1,
            smoothing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSummary {
    pub frames: u64,
    pub detections: u64,
    pub fire_frames: u64,
    pub wall_ms: f64,
    pub fps: f64,
    /// Set when the source or a frame failed; the summary covers the frames
    /// emitted before the failure.
    pub error: Option<String>,
}

/// Classifies every frame of `source` and hands one [`Detection`] per frame
/// to `sink`, in sequence order.
pub fn run_stream<S, F>(
    net: &Network,
    mut source: S,
    options: &StreamOptions,
    mut sink: F,
) -> Result<StreamSummary, InferenceError>
where
    S: FrameSource,
    F: FnMut(&Frame, Detection),
{
    check_threshold(options.threshold)?;
    if options.workers == 0 {
        return Err(InferenceError::InvalidArgument(
            "at least one worker is required".into(),
        ));
    }
    let start = Instant::now();
    let mut smoother = options.smoothing.map(Smoother::new);
    let mut summary = StreamSummary {
        frames: 0,
        detections: 0,
        fire_frames: 0,
        wall_ms: 0.0,
        fps: 0.0,
        error: None,
    };
    let mut emit = |frame: &Frame, d: Detection, summary: &mut StreamSummary| {
        let d = match smoother.as_mut() {
            Some(s) => s.apply(d),
            None => d,
        };
        summary.detections += 1;
        summary.fire_frames += d.is_fire as u64;
        sink(frame, d);
    };

    if options.workers == 1 {
        while let Some(item) = source.next_frame() {
            let outcome = item.and_then(|frame| {
                summary.frames += 1;
                classify_frame(net, &frame, options.threshold).map(|d| (frame, d))
            });
            match outcome {
                Ok((frame, d)) => emit(&frame, d, &mut summary),
                Err(e) => {
                    summary.error = Some(e.to_string());
                    break;
                }
            }
        }
    } else {
        pipelined(net, &mut source, options, &mut summary, &mut emit);
    }

    summary.wall_ms = start.elapsed().as_secs_f64() * 1000.0;
    summary.fps = if summary.wall_ms > 0.0 {
        summary.detections as f64 / (summary.wall_ms / 1000.0)
    } else {
        0.0
    };
    Ok(summary)
}

type Job = (usize, Frame);
type Done = (usize, Frame, Result<Detection, InferenceError>);

fn pipelined<S, E>(net: &Network, source: &mut S, options: &StreamOptions, summary: &mut StreamSummary, emit: &mut E)
where
    S: FrameSource,
    E: FnMut(&Frame, Detection, &mut StreamSummary),
{
    let (job_tx, job_rx) = crossbeam_channel::bounded::<Job>(options.workers * 2);
    let (done_tx, done_rx) = crossbeam_channel::unbounded::<Done>();
    std::thread::scope(|scope| {
        for _ in 0..options.workers {
            let job_rx = job_rx.clone();
            let done_tx = done_tx.clone();
            scope.spawn(move || {
                for (idx, frame) in job_rx {
                    let d = classify_frame(net, &frame, options.threshold);
                    if done_tx.send((idx, frame, d)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(done_tx);
        drop(job_rx);

        // Reader: feeds jobs and reports how the source ended.
        let reader = scope.spawn(move || {
            let mut read = 0usize;
            let mut error = None;
            while let Some(item) = source.next_frame() {
                match item {
                    Ok(frame) => {
                        if job_tx.send((read, frame)).is_err() {
                            break;
                        }
                        read += 1;
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            (read, error)
        });

        let mut pending: BTreeMap<usize, (Frame, Result<Detection, InferenceError>)> = BTreeMap::new();
        let mut next = 0usize;
        let mut frame_error: Option<String> = None;
        for (idx, frame, d) in done_rx {
            pending.insert(idx, (frame, d));
            while let Some((frame, d)) = pending.remove(&next) {
                next += 1;
                if frame_error.is_some() {
                    continue;
                }
                match d {
                    Ok(d) => emit(&frame, d, summary),
                    Err(e) => frame_error = Some(e.to_string()),
                }
            }
        }
        let (read, source_error) = reader.join().expect("reader thread panicked");
        summary.frames = read as u64;
        summary.error = frame_error.or(source_error);
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Pre-built frames at the network's input size: resize is a copy.
    Synthetic,
    /// PPM-encoded 320×240 frames: decode, resize, normalize, classify.
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub frames: usize,
    pub wall_ms: u64,
    pub fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode={:?}", self.mode)?;
        writeln!(f, "frames={}", self.frames)?;
        writeln!(f, "wall_ms={}", self.wall_ms)?;
        writeln!(f, "fps={:.2}", self.fps)?;
        writeln!(f, "p50_ms={:.3}", self.p50_ms)?;
        writeln!(f, "p95_ms={:.3}", self.p95_ms)?;
        write!(f, "max_ms={:.3}", self.max_ms)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest-rank
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn random_frame(width: usize, height: usize, sequence: u64, rng: &mut ChaCha8Rng) -> Frame {
    let mut pixels = vec![0u8; width * height * 3];
    rng.fill(&mut pixels[..]);
    Frame {
        image: RgbImage { width, height, pixels },
        timestamp_ms: sequence * DEFAULT_FRAME_INTERVAL_MS,
        sequence,
    }
}

/// Times `n_frames` single-threaded classifications of random frames after
/// [`BENCH_WARMUP_FRAMES`] warmup frames.
pub fn bench_fps(net: &Network, n_frames: usize, mode: BenchMode, seed: u64) -> Result<BenchReport, InferenceError> {
    if n_frames < MIN_BENCH_FRAMES {
        return Err(InferenceError::InvalidArgument(format!(
            "benchmark needs at least {MIN_BENCH_FRAMES} frames, got {n_frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = net.input_side();
    let (w, h) = match mode {
        BenchMode::Synthetic => (side, side),
        BenchMode::EndToEnd => (320, 240),
    };
    let frames: Vec<Frame> = (0..n_frames + BENCH_WARMUP_FRAMES)
        .map(|i| random_frame(w, h, i as u64, &mut rng))
        .collect();
    let encoded: Vec<Vec<u8>> = match mode {
        BenchMode::Synthetic => Vec::new(),
        BenchMode::EndToEnd => frames.iter().map(|f| encode_ppm(&f.image)).collect(),
    };
    let run = |i: usize| -> Result<Detection, InferenceError> {
        match mode {
            BenchMode::Synthetic => classify_frame(net, &frames[i], 0.5),
            BenchMode::EndToEnd => {
                let frame = Frame {
                    image: decode_ppm(&encoded[i])?,
                    timestamp_ms: frames[i].timestamp_ms,
                    sequence: frames[i].sequence,
                };
                classify_frame(net, &frame, 0.5)
            }
        }
    };
    for i in 0..BENCH_WARMUP_FRAMES {
        run(i)?;
    }
    let mut latencies = Vec::with_capacity(n_frames);
    let start = Instant::now();
    for i in BENCH_WARMUP_FRAMES..BENCH_WARMUP_FRAMES + n_frames {
        let t = Instant::now();
        run(i)?;
        latencies.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let wall = start.elapsed().max(Duration::from_millis(1));
    latencies.sort_by(f64::total_cmp);
    let wall_ms = wall.as_millis() as u64;
    Ok(BenchReport {
        mode,
        frames: n_frames,
        wall_ms,
        fps: n_frames as f64 / wall.as_secs_f64(),
        p50_ms: percentile(&latencies, 0.5),
        p95_ms: percentile(&latencies, 0.95),
        max_ms: *latencies.last().expect("n_frames > 0"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_firenet, LayerParams};

    fn frame(seq: u64, rgb: [u8; 3]) -> Frame {
        Frame {
            image: RgbImage::filled(30, 20, rgb),
            timestamp_ms: seq * 10,
            sequence: seq,
        }
    }

    /// Network whose output is fixed by its final bias: weights zeroed.
    fn constant_net(fire_logit: f32) -> Network {
        let mut net = build_firenet(24, 0).unwrap();
        if let Some(LayerParams::Dense(p)) = net.layer_params_mut().last_mut() {
            p.weights.data_mut().fill(0.0);
            p.bias.data_mut().copy_from_slice(&[fire_logit, 0.0]);
        }
        net
    }

    #[test]
    fn boundary_probability_is_fire() {
        let net = constant_net(0.0);
        let d = classify_frame(&net, &frame(0, [10, 20, 30]), 0.5).unwrap();
        assert_eq!(d.fire_probability, 0.5);
        assert!(d.is_fire);
        assert!(decide(0.5, 0.5));
        assert!(!decide(0.4999, 0.5));
    }

    #[test]
    fn rejects_bad_threshold_and_frame() {
        let net = constant_net(0.0);
        assert!(matches!(
            classify_frame(&net, &frame(0, [0; 3]), 1.0),
            Err(InferenceError::Threshold(_))
        ));
        let mut f = frame(3, [0; 3]);
        f.image.pixels.pop();
        assert!(matches!(
            classify_frame(&net, &f, 0.5),
            Err(InferenceError::Frame { sequence: 3, .. })
        ));
    }

    #[test]
    fn detection_record_round_trip() {
        let d = Detection {
            sequence: 4,
            timestamp_ms: 168,
            fire_probability: 0.25,
            is_fire: false,
        };
        assert_eq!(d.to_string(), "4,168,0.250000,false");
        assert_eq!(d.to_string().parse::<Detection>().unwrap(), d);
    }

    #[test]
    fn empty_source() {
        let net = constant_net(0.0);
        let summary = run_stream(&net, std::iter::empty(), &StreamOptions::default(), |_, _| panic!()).unwrap();
        assert_eq!((summary.frames, summary.detections), (0, 0));
    }

    #[test]
    fn source_failure_keeps_partial_summary() {
        let net = constant_net(0.0);
        let items: Vec<Result<Frame, InferenceError>> = vec![
            Ok(frame(0, [1; 3])),
            Ok(frame(1, [2; 3])),
            Err(InferenceError::InvalidArgument("camera unplugged".into())),
            Ok(frame(3, [3; 3])),
        ];
        for workers in [1, 3] {
            let mut seen = Vec::new();
            let opts = StreamOptions {
                workers,
                ..Default::default()
            };
            let s = run_stream(&net, items.iter().cloned_result(), &opts, |_, d| seen.push(d.sequence)).unwrap();
            assert_eq!(seen, [0, 1]);
            assert_eq!(s.detections, 2);
            assert!(s.error.unwrap().contains("unplugged"));
        }
    }

    #[test]
    fn smoothing_requires_k_of_last_n() {
        let mut s = Smoother::new(KOfN::new(2, 3).unwrap());
        let raw = [true, false, true, false, false, true, true];
        let smoothed: Vec<bool> = raw
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                s.apply(Detection {
                    sequence: i as u64,
                    timestamp_ms: 0,
                    fire_probability: 0.0,
                    is_fire: f,
                })
                .is_fire
            })
            .collect();
        assert_eq!(smoothed, [false, false, true, false, false, false, true]);
        assert!(KOfN::new(3, 2).is_err());
    }

    #[test]
    fn bench_needs_enough_frames() {
        let net = constant_net(0.0);
        assert!(bench_fps(&net, 10, BenchMode::Synthetic, 0).is_err());
        let r = bench_fps(&net, 100, BenchMode::Synthetic, 0).unwrap();
        assert_eq!(r.frames, 100);
        assert!(r.p50_ms <= r.p95_ms && r.p95_ms <= r.max_ms);
    }

    trait ClonedResult<'a> {
        fn cloned_result(self) -> std::vec::IntoIter<Result<Frame, InferenceError>>;
    }

    impl<'a, I: Iterator<Item = &'a Result<Frame, InferenceError>>> ClonedResult<'a> for I {
        fn cloned_result(self) -> std::vec::IntoIter<Result<Frame, InferenceError>> {
            self.map(|r| match r {
                Ok(f) => Ok(f.clone()),
                Err(e) => Err(InferenceError::InvalidArgument(e.to_string())),
            })
            .collect::<Vec<_>>()
            .into_iter()
        }
    }
}
