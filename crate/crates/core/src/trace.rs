//! Request traces: CSV I/O and seeded synthetic generators.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::AvailabilityPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    #[serde(rename = "arrival_ts_s")]
    pub arrival: f64,
    pub input_len: u32,
    pub output_len: u32,
}

/// Read an `arrival_ts_s,input_len,output_len` trace.
pub fn parse_request_trace(text: &str) -> Result<Vec<TraceRequest>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out: Vec<TraceRequest> = Vec::new();
    for (i, row) in rdr.deserialize::<TraceRequest>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| Error::Trace { line, message: e.to_string() })?;
        if !r.arrival.is_finite() || r.arrival < 0.0 {
            return Err(Error::Trace { line, message: "arrival must be finite and non-negative".into() });
        }
        if out.last().is_some_and(|p| r.arrival < p.arrival) {
            return Err(Error::Trace { line, message: "arrivals must be sorted".into() });
        }
        if r.input_len == 0 || r.output_len == 0 {
            return Err(Error::Trace { line, message: "lengths must be at least 1".into() });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_request_trace<W: Write>(trace: &[TraceRequest], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_availability_series<W: Write>(series: &[AvailabilityPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in series {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Multiply every arrival time by `factor`.
pub fn scale_arrivals(trace: &[TraceRequest], factor: f64) -> Vec<TraceRequest> {
    trace.iter().map(|r| TraceRequest { arrival: r.arrival * factor, ..*r }).collect()
}

fn lognormal(median: f64, sigma: f64) -> LogNormal<f64> {
    LogNormal::new(median.ln(), sigma).expect("valid lognormal")
}

fn clip(x: f64, lo: u32, hi: u32) -> u32 {
    (x.round() as i64).clamp(lo as i64, hi as i64) as u32
}

fn poisson_arrivals(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let gap = Exp::new(rate).expect("positive rate");
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            let now = t;
            t += gap.sample(rng);
            now
        })
        .collect()
}

/// Conversation-style trace: long lognormal inputs (median 8001, mean about
/// 13.5k, max 123192) and short outputs centred near 360 (max 2000), Poisson
/// arrivals at `rate` requests per second.
pub fn synth_mooncake(n: usize, rate: f64, seed: u64) -> Vec<TraceRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = poisson_arrivals(&mut rng, n, rate);
    let input = lognormal(8001.0, 1.024);
    let body = Normal::new(380.0, 143.0).expect("valid normal");
    arrivals
        .into_iter()
        .map(|arrival| {
            let input_len = clip(input.sample(&mut rng), 1, 123_192);
            let u: f64 = rng.random();
            let output = if u < 0.1 {
                rng.random_range(1.0..100.0)
            } else if u < 0.105 {
                rng.random_range(1000.0..=2000.0)
            } else {
                body.sample(&mut rng)
            };
            TraceRequest { arrival, input_len, output_len: clip(output, 1, 2000) }
        })
        .collect()
}

/// Reasoning-style trace: short inputs (median 352, max 7633) and long
/// outputs (median 5583, max 37817), all arriving at `rate` per second
/// (0 for a batch at time zero).
pub fn synth_openthoughts(n: usize, rate: f64, seed: u64) -> Vec<TraceRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = if rate > 0.0 { poisson_arrivals(&mut rng, n, rate) } else { vec![0.0; n] };
    let input = lognormal(352.0, 0.60);
    let output = lognormal(5583.0, 0.73);
    arrivals
        .into_iter()
        .map(|arrival| TraceRequest {
            arrival,
            input_len: clip(input.sample(&mut rng), 1, 7633),
            output_len: clip(output.sample(&mut rng), 1, 37_817),
        })
        .collect()
}

/// Availability of `capacity` GPUs under independent failures (rate
/// `fail_rate` per alive GPU) and repairs (rate `repair_rate` per failed
/// GPU), sampled exactly at every change over `duration` seconds. Failures
/// occasionally arrive in bursts of up to `burst` GPUs.
pub fn synth_availability(
    capacity: u32,
    duration: f64,
    fail_rate: f64,
    repair_rate: f64,
    burst: u32,
    seed: u64,
) -> Vec<AvailabilityPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alive = capacity;
    let mut t = 0.0;
    let mut out = vec![AvailabilityPoint { ts_s: 0.0, available_gpus: capacity }];
    loop {
        let down = (capacity - alive) as f64;
        let total = alive as f64 * fail_rate + down * repair_rate;
        if total <= 0.0 {
            break;
        }
        t += Exp::new(total).expect("positive").sample(&mut rng);
        if t >= duration {
            break;
        }
        let u: f64 = rng.random::<f64>() * total;
        if u < alive as f64 * fail_rate {
            let k = if burst > 1 && rng.random::<f64>() < 0.15 { rng.random_range(2..=burst) } else { 1 };
            alive = alive.saturating_sub(k);
        } else {
            alive += 1;
        }
        out.push(AvailabilityPoint { ts_s: t.round(), available_gpus: alive });
    }
    out.dedup_by(|b, a| {
        a.ts_s == b.ts_s && {
            a.available_gpus = b.available_gpus;
            true
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn median(mut xs: Vec<u32>) -> u32 {
        xs.sort();
        xs[xs.len() / 2]
    }

    fn mean(xs: &[u32]) -> f64 {
        xs.iter().map(|x| *x as f64).sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn mooncake_shape() {
        let t = synth_mooncake(3000, 1.0, 7);
        let inp: Vec<u32> = t.iter().map(|r| r.input_len).collect();
        let out: Vec<u32> = t.iter().map(|r| r.output_len).collect();
        assert!((7000..9000).contains(&median(inp.clone())));
        assert!((11_500.0..15_500.0).contains(&mean(&inp)));
        assert!((330..395).contains(&median(out.clone())));
        assert!((320.0..380.0).contains(&mean(&out)));
        assert!(*out.iter().max().unwrap() <= 2000 && *inp.iter().max().unwrap() <= 123_192);
        assert!(t.windows(2).all(|w| w[0].arrival <= w[1].arrival));
    }

    #[test]
    fn openthoughts_shape() {
        let t = synth_openthoughts(3000, 0.0, 3);
        let inp: Vec<u32> = t.iter().map(|r| r.input_len).collect();
        let out: Vec<u32> = t.iter().map(|r| r.output_len).collect();
        assert!((320..390).contains(&median(inp.clone())));
        assert!((380.0..470.0).contains(&mean(&inp)));
        assert!((5000..6200).contains(&median(out.clone())));
        assert!((6500.0..8100.0).contains(&mean(&out)));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let t = synth_mooncake(20, 2.0, 1);
        let mut buf = Vec::new();
        write_request_trace(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("arrival_ts_s,input_len,output_len"));
        let back = parse_request_trace(&text).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            parse_request_trace("arrival_ts_s,input_len,output_len\n1,2,3\n0,2,3\n"),
            Err(Error::Trace { line: 3, .. })
        ));
        assert!(parse_request_trace("arrival_ts_s,input_len,output_len\n1,x,3\n").is_err());
    }

    #[test]
    fn scaling_by_one_is_identity() {
        let t = synth_mooncake(10, 1.0, 2);
        assert_eq!(scale_arrivals(&t, 1.0), t);
    }

    #[test]
    fn availability_stays_in_range_and_is_seeded() {
        let a = synth_availability(64, 86_400.0, 1.0 / 36_000.0, 1.0 / 3600.0, 3, 5);
        assert_eq!(a, synth_availability(64, 86_400.0, 1.0 / 36_000.0, 1.0 / 3600.0, 3, 5));
        assert!(a.iter().all(|p| p.available_gpus <= 64));
        assert!(a.windows(2).all(|w| w[0].ts_s < w[1].ts_s));
        assert!(a.len() > 10);
    }
}
