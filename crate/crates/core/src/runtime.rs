//! Three-stage streaming pipeline (lower encoder, upper encoder, search) over
//! bounded queues, with a sequential reference mode and real-time factor
//! measurement.

use std::fmt::Write as _;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use crate::decoder::{DecodeParams, FusionHook, NBest, Searcher};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{FeatureSequence, Float, FrameStacker, Matrix};

pub const STAGES: [&str; 3] = ["encoder-lower", "encoder-upper", "decoder"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Pipelined,
}

/// Test knobs: a per-frame delay for each stage and an optional forced
/// failure of stage `.0` at its `.1`-th frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultInjection {
    pub delays: [Duration; 3],
    pub fail_at: Option<(usize, usize)>,
    pub panic_at: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Capacities of the lower→upper and upper→decoder queues.
    pub queue_capacity: [usize; 2],
    pub faults: FaultInjection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { mode: Mode::Pipelined, queue_capacity: [8, 8], faults: FaultInjection::default() }
    }
}

impl PipelineConfig {
    pub fn sequential() -> Self {
        PipelineConfig { mode: Mode::Sequential, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity.contains(&0) {
            return Err(Error::config("queue capacities must be at least 1"));
        }
        Ok(())
    }
}

/// Timing of one decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UttTiming {
    pub audio_s: f64,
    pub proc_s: f64,
    /// Time each stage spent computing, excluding queue waits.
    pub busy_s: [f64; 3],
}

impl UttTiming {
    pub fn rt(&self) -> f64 {
        self.proc_s / self.audio_s
    }
}

/// Per-stage state; one owner each.
struct Lower<'m, M: Matrix> {
    model: &'m Model<M>,
    stacker: FrameStacker,
    state: crate::encoder::LowerState<M::Elem>,
}

impl<M: Matrix> Lower<'_, M> {
    fn push(&mut self, frame: &[f32]) -> Result<Option<Vec<M::Elem>>> {
        let Some(stacked) = self.stacker.push(frame)? else { return Ok(None) };
        let x: Vec<M::Elem> = stacked.iter().map(|&v| M::Elem::from_f64_lossy(v as f64)).collect();
        self.model.encoder().lower_step(&x, &mut self.state)
    }

    fn flush(&mut self) -> Option<Vec<M::Elem>> {
        self.model.encoder().flush(&mut self.state)
    }
}

struct Upper<'m, M: Matrix> {
    model: &'m Model<M>,
    state: crate::encoder::UpperState<M::Elem>,
}

impl<M: Matrix> Upper<'_, M> {
    fn push(&mut self, x: &[M::Elem]) -> Result<Vec<M::Elem>> {
        self.model.encoder().upper_step(x, &mut self.state)
    }
}

struct Injector<'a> {
    faults: &'a FaultInjection,
    stage: usize,
    count: usize,
}

impl Injector<'_> {
    fn tick(&mut self) -> Result<()> {
        let n = self.count;
        self.count += 1;
        let d = self.faults.delays[self.stage];
        if !d.is_zero() {
            thread::sleep(d);
        }
        if self.faults.panic_at == Some((self.stage, n)) {
            panic!("injected panic at frame {n}");
        }
        if self.faults.fail_at == Some((self.stage, n)) {
            return Err(Error::config(format!("injected failure at frame {n}")));
        }
        Ok(())
    }
}

fn stage_error(stage: usize, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: STAGES[stage], message: other.to_string() },
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Decodes one utterance, sequentially or through the three-stage pipeline.
/// Both modes perform the same dataflow, so their N-best lists are
/// bit-identical.
pub fn run_pipeline<M: Matrix>(
    model: &Model<M>,
    features: &FeatureSequence,
    params: &DecodeParams,
    fusion: &dyn FusionHook,
    config: &PipelineConfig,
) -> Result<(NBest, UttTiming)> {
    config.validate()?;
    params.validate()?;
    if features.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    let cfg = model.config();
    let lower = Lower {
        model,
        stacker: FrameStacker::new(cfg.feature_dim, cfg.frontend.left_context, cfg.frontend.downsample)?,
        state: model.encoder().lower_state(),
    };
    let upper = Upper { model, state: model.encoder().upper_state() };
    let start = Instant::now();
    let (nbest, busy_s) = match config.mode {
        Mode::Sequential => sequential(lower, upper, model, features, params, fusion, &config.faults)?,
        Mode::Pipelined => pipelined(lower, upper, model, features, params, fusion, config)?,
    };
    let proc_s = start.elapsed().as_secs_f64();
    Ok((nbest, UttTiming { audio_s: features.duration(), proc_s, busy_s }))
}

fn sequential<M: Matrix>(
    mut lower: Lower<'_, M>,
    mut upper: Upper<'_, M>,
    model: &Model<M>,
    features: &FeatureSequence,
    params: &DecodeParams,
    fusion: &dyn FusionHook,
    faults: &FaultInjection,
) -> Result<(NBest, [f64; 3])> {
    let mut busy = [Duration::ZERO; 3];
    let mut inj: [Injector; 3] = std::array::from_fn(|stage| Injector { faults, stage, count: 0 });
    let mut search = Searcher::new(model, params.clone(), fusion).map_err(|e| stage_error(2, e))?;
    let mut downstream = |x: Vec<M::Elem>, busy: &mut [Duration; 3], inj: &mut [Injector; 3]| -> Result<()> {
        let t = Instant::now();
        inj[1].tick().map_err(|e| stage_error(1, e))?;
        let enc = upper.push(&x).map_err(|e| stage_error(1, e))?;
        busy[1] += t.elapsed();
        let t = Instant::now();
        inj[2].tick().map_err(|e| stage_error(2, e))?;
        search.advance(&enc).map_err(|e| stage_error(2, e))?;
        busy[2] += t.elapsed();
        Ok(())
    };
    for t in 0..features.len() {
        let s = Instant::now();
        let out = inj[0].tick().and_then(|_| lower.push(features.frame(t))).map_err(|e| stage_error(0, e))?;
        busy[0] += s.elapsed();
        if let Some(x) = out {
            downstream(x, &mut busy, &mut inj)?;
        }
    }
    let s = Instant::now();
    let tail = lower.flush();
    busy[0] += s.elapsed();
    if let Some(x) = tail {
        downstream(x, &mut busy, &mut inj)?;
    }
    let s = Instant::now();
    let nbest = search.finish();
    busy[2] += s.elapsed();
    Ok((nbest, busy.map(|d| d.as_secs_f64())))
}

/// Marker for a stage that stopped because a neighbour went away; the
/// neighbour reports the real cause.
struct Disconnected;

enum StageExit<T> {
    Done(T),
    Failed(Error),
    Stopped(Disconnected),
}

fn pipelined<M: Matrix>(
    mut lower: Lower<'_, M>,
    mut upper: Upper<'_, M>,
    model: &Model<M>,
    features: &FeatureSequence,
    params: &DecodeParams,
    fusion: &dyn FusionHook,
    config: &PipelineConfig,
) -> Result<(NBest, [f64; 3])> {
    let faults = &config.faults;
    let (tx1, rx1): (SyncSender<Vec<M::Elem>>, Receiver<Vec<M::Elem>>) = sync_channel(config.queue_capacity[0]);
    let (tx2, rx2): (SyncSender<Vec<M::Elem>>, Receiver<Vec<M::Elem>>) = sync_channel(config.queue_capacity[1]);
    // Dropping a sender ends the stream downstream; a failed stage's exit
    // value says whether the end was clean.
    let results = thread::scope(|s| {
        let h0 = s.spawn(move || -> StageExit<Duration> {
            let mut inj = Injector { faults, stage: 0, count: 0 };
            let mut busy = Duration::ZERO;
            for t in 0..features.len() {
                let s = Instant::now();
                let out = match inj.tick().and_then(|_| lower.push(features.frame(t))) {
                    Ok(o) => o,
                    Err(e) => return StageExit::Failed(e),
                };
                busy += s.elapsed();
                if let Some(x) = out {
                    if tx1.send(x).is_err() {
                        return StageExit::Stopped(Disconnected);
                    }
                }
            }
            let s = Instant::now();
            let tail = lower.flush();
            busy += s.elapsed();
            if let Some(x) = tail {
                if tx1.send(x).is_err() {
                    return StageExit::Stopped(Disconnected);
                }
            }
            StageExit::Done(busy)
        });
        let h1 = s.spawn(move || -> StageExit<(Duration, usize)> {
            let mut inj = Injector { faults, stage: 1, count: 0 };
            let mut busy = Duration::ZERO;
            for x in rx1 {
                let s = Instant::now();
                let enc = match inj.tick().and_then(|_| upper.push(&x)) {
                    Ok(e) => e,
                    Err(e) => return StageExit::Failed(e),
                };
                busy += s.elapsed();
                if tx2.send(enc).is_err() {
                    return StageExit::Stopped(Disconnected);
                }
            }
            StageExit::Done((busy, inj.count))
        });
        let h2 = s.spawn(move || -> StageExit<(NBest, Duration)> {
            let mut inj = Injector { faults, stage: 2, count: 0 };
            let s = Instant::now();
            let mut search = match Searcher::new(model, params.clone(), fusion) {
                Ok(x) => x,
                Err(e) => return StageExit::Failed(e),
            };
            let mut busy = s.elapsed();
            for enc in rx2 {
                let s = Instant::now();
                if let Err(e) = inj.tick().and_then(|_| search.advance(&enc)) {
                    return StageExit::Failed(e);
                }
                busy += s.elapsed();
            }
            let s = Instant::now();
            let nbest = search.finish();
            busy += s.elapsed();
            StageExit::Done((nbest, busy))
        });
        (h0.join(), h1.join(), h2.join())
    });
    let (r0, r1, r2) = results;
    let (b0, e0, p0) = split(r0);
    let (b1, e1, p1) = split(r1);
    let (b2, e2, p2) = split(r2);
    // reported failures first, in stage order, then panics
    for (stage, e) in [(0, e0), (1, e1), (2, e2)] {
        if let Some(e) = e {
            return Err(stage_error(stage, e));
        }
    }
    for (stage, p) in [(0, p0), (1, p1), (2, p2)] {
        if let Some(p) = p {
            return Err(Error::Stage { stage: STAGES[stage], message: panic_message(p) });
        }
    }
    match (b0, b1, b2) {
        (Some(b0), Some((b1, upper_frames)), Some((nbest, b2))) => {
            if upper_frames != nbest.frames {
                return Err(Error::Stage { stage: STAGES[2], message: "frame count mismatch".into() });
            }
            Ok((nbest, [b0, b1, b2].map(|d| d.as_secs_f64())))
        }
        _ => Err(Error::Stage { stage: STAGES[0], message: "pipeline stopped without a result".into() }),
    }
}

type Panic = Box<dyn std::any::Any + Send>;

fn split<T>(r: std::thread::Result<StageExit<T>>) -> (Option<T>, Option<Error>, Option<Panic>) {
    match r {
        Ok(StageExit::Done(v)) => (Some(v), None, None),
        Ok(StageExit::Failed(e)) => (None, Some(e), None),
        Ok(StageExit::Stopped(Disconnected)) => (None, None, None),
        Err(p) => (None, None, Some(p)),
    }
}

/// Nearest-rank percentile: the value at rank `⌈p/100 · n⌉` of the sorted list.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::config(format!("percentile {p} outside (0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtRow {
    pub id: String,
    pub audio_s: f64,
    pub proc_s: f64,
    pub rt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtReport {
    pub rows: Vec<RtRow>,
    pub rt50: f64,
    pub rt90: f64,
    pub mean_rt: f64,
    pub wall_s: f64,
    pub busy_s: [f64; 3],
}

impl RtReport {
    pub fn from_rows(rows: Vec<RtRow>, busy_s: [f64; 3]) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !(r.rt > 0.0 && r.rt.is_finite())) {
            return Err(Error::config(format!("utterance `{}` has non-positive RT", r.id)));
        }
        let rts: Vec<f64> = rows.iter().map(|r| r.rt).collect();
        let rt50 = nearest_rank(&rts, 50.0)?;
        let rt90 = nearest_rank(&rts, 90.0)?;
        let mean_rt = rts.iter().sum::<f64>() / rts.len() as f64;
        let wall_s = rows.iter().map(|r| r.proc_s).sum();
        Ok(RtReport { rows, rt50, rt90, mean_rt, wall_s, busy_s })
    }

    /// Tab-separated rows (`id audio_s proc_s rt`) followed by a summary.
    pub fn to_text(&self) -> String {
        let mut out = String::from("id\taudio_s\tproc_s\trt\n");
        for r in &self.rows {
            writeln!(out, "{}\t{:.4}\t{:.6}\t{:.6}", r.id, r.audio_s, r.proc_s, r.rt).unwrap();
        }
        writeln!(out, "# utterances\t{}", self.rows.len()).unwrap();
        writeln!(out, "# rt50\t{:.6}", self.rt50).unwrap();
        writeln!(out, "# rt90\t{:.6}", self.rt90).unwrap();
        writeln!(out, "# mean_rt\t{:.6}", self.mean_rt).unwrap();
        writeln!(out, "# wall_s\t{:.6}", self.wall_s).unwrap();
        for (name, b) in STAGES.iter().zip(self.busy_s) {
            writeln!(out, "# busy_s.{name}\t{b:.6}").unwrap();
        }
        out
    }
}

/// Decodes every utterance and reports per-utterance real-time factors.
/// Only decoding is timed.
pub fn measure_rt<M: Matrix>(
    model: &Model<M>,
    utterances: &[(String, FeatureSequence)],
    params: &DecodeParams,
    fusion: &dyn FusionHook,
    config: &PipelineConfig,
) -> Result<(Vec<NBest>, RtReport)> {
    if utterances.is_empty() {
        return Err(Error::Empty("utterance set"));
    }
    let mut rows = Vec::with_capacity(utterances.len());
    let mut outputs = Vec::with_capacity(utterances.len());
    let mut busy = [0.0; 3];
    for (id, f) in utterances {
        let (nbest, timing) = run_pipeline(model, f, params, fusion, config)?;
        for (b, s) in busy.iter_mut().zip(timing.busy_s) {
            *b += s;
        }
        rows.push(RtRow { id: id.clone(), audio_s: timing.audio_s, proc_s: timing.proc_s, rt: timing.rt() });
        outputs.push(nbest);
    }
    Ok((outputs, RtReport::from_rows(rows, busy)?))
}
