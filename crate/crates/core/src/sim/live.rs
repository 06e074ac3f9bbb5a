use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::InferenceBackend;
use crate::clock::Clock;
use crate::context::{StateChunk, TokenSeq};

use super::engine::build_engine;
use super::{Horizon, ScenarioConfig, SimError, TraceEvent, TraceEventKind, TtftSample, TtftTrace, FRESH_TOKEN_BASE};
use super::SampleCase;

/// Attempts per background job before it is abandoned.
const BACKGROUND_ATTEMPTS: u32 = 5;

fn sleep_until(clock: &dyn Clock, t: f64) {
    let wait = t - clock.now();
    if wait > 0.0 {
        thread::sleep(Duration::from_secs_f64(wait));
    }
}

/// Runs a scenario against a real backend in wall-clock time.
///
/// Chunks and queries are issued from the calling thread; every eviction
/// spawns a reconciliation thread that talks to the backend concurrently.
/// A query that blocks past the next arrival delays it, and the delay counts
/// toward the delayed query's latency.
pub fn run_live(
    cfg: &ScenarioConfig,
    backend: &dyn InferenceBackend,
    clock: Arc<dyn Clock>,
) -> Result<TtftTrace, SimError> {
    cfg.validate()?;
    let mut engine = build_engine(cfg, clock.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tokens = |n: usize, rng: &mut ChaCha8Rng| -> TokenSeq { (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect() };
    let mut trace = TtftTrace::default();
    let start = clock.now();

    thread::scope(|scope| -> Result<(), SimError> {
        let mut workers: Vec<thread::ScopedJoinHandle<'_, bool>> = Vec::new();
        let mut chunks = 0u64;
        let mut queries = 0u64;
        loop {
            let chunk_at = (chunks + 1) as f64 * cfg.arrival_period;
            let query_at = (queries + 1) as f64 * cfg.query_period;
            let is_chunk = chunk_at <= query_at;
            let at = if is_chunk { chunk_at } else { query_at };
            if let Horizon::Duration(d) = cfg.horizon {
                if at > d {
                    break;
                }
            }
            sleep_until(clock.as_ref(), start + at);

            let (finished, running): (Vec<_>, Vec<_>) = workers.drain(..).partition(|w| w.is_finished());
            workers = running;
            for w in finished {
                let ok = w.join().unwrap_or(false);
                trace.events.push(TraceEvent {
                    time: clock.now() - start,
                    kind: if ok {
                        TraceEventKind::BackgroundFinished
                    } else {
                        TraceEventKind::BackgroundFailed
                    },
                    resource: Some(engine.primary()),
                    static_len: None,
                    seq_len: None,
                });
            }

            if is_chunk {
                chunks += 1;
                let chunk = StateChunk::new(chunks, tokens(cfg.chunk_tokens, &mut rng), at);
                let out = engine.on_chunk(chunk)?;
                if let Some(sizes) = out.eviction {
                    trace.events.push(TraceEvent::eviction(at, engine.primary(), sizes));
                    if let Horizon::Cycles(n) = cfg.horizon {
                        if engine.evictions() > u64::from(n) {
                            break;
                        }
                    }
                }
                if let Some(mut job) = out.job {
                    let retry = Duration::from_secs_f64(cfg.arrival_period);
                    workers.push(scope.spawn(move || {
                        for _ in 0..BACKGROUND_ATTEMPTS {
                            if job.run(backend).is_ok() {
                                return true;
                            }
                            thread::sleep(retry);
                        }
                        false
                    }));
                }
                if let Some(held) = out.overflow {
                    let event = TraceEvent {
                        time: at,
                        kind: TraceEventKind::OverflowAlarm,
                        resource: Some(engine.primary()),
                        static_len: Some(held),
                        seq_len: None,
                    };
                    trace.events.push(event.clone());
                    trace.overflow = Some(event);
                    break;
                }
            } else {
                queries += 1;
                let suffix = tokens(cfg.suffix_tokens, &mut rng);
                let task = tokens(cfg.task_tokens, &mut rng);
                let fresh = FRESH_TOKEN_BASE + queries as u32;
                let out = engine.on_query(&suffix, &task, fresh, backend)?;
                let done = clock.now() - start;
                if out.case == SampleCase::Swap {
                    trace.events.push(TraceEvent {
                        time: at,
                        kind: TraceEventKind::Swap,
                        resource: Some(out.resource),
                        static_len: Some(out.static_len),
                        seq_len: None,
                    });
                }
                trace.samples.push(TtftSample {
                    query_index: queries - 1,
                    scenario_time: at,
                    ttft_seconds: done - at,
                    service_seconds: out.result.ttft,
                    routing_case: out.case,
                    eviction_cycle_index: engine.evictions(),
                    resource: out.resource,
                    seq_len: out.seq_len,
                    static_len: out.static_len,
                    charged_units: out.result.charged_units,
                });
            }
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    })?;
    Ok(trace)
}
