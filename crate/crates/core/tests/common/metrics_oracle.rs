use glyctube::metrics::{compute_from_samples, GlycemicReport, Samples, Thresholds};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EDGES: [f64; 6] = [54.0, 70.0, 140.0, 180.0, 250.0, 69.999999];

struct Trace {
    t: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    meals: Vec<f64>,
}

fn random_trace(rng: &mut ChaCha8Rng) -> Trace {
    let n = rng.random_range(1..400);
    let mut t = 0.0;
    let mut trace = Trace {
        t: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        meals: Vec::new(),
    };
    for _ in 0..n {
        trace.t.push(t);
        t += rng.random_range(0.5..5.0);
        let g = if rng.random_bool(0.1) {
            EDGES[rng.random_range(0..EDGES.len())]
        } else {
            rng.random_range(30.0..320.0)
        };
        trace.g.push(g);
        trace.u.push(rng.random_range(0.0..144.0));
    }
    for _ in 0..rng.random_range(0..5) {
        trace.meals.push(rng.random_range(-100.0..t + 100.0));
    }
    trace
}

fn report(tr: &Trace) -> GlycemicReport {
    compute_from_samples(
        &Samples {
            t: &tr.t,
            g_abs: &tr.g,
            u: &tr.u,
            meal_starts: &tr.meals,
            mean_step_time_ms: 0.0,
        },
        &Thresholds::default(),
    )
    .unwrap()
}

fn percent(g: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
    100.0 * g.iter().filter(|v| keep(**v)).count() as f64 / g.len() as f64
}

fn type7(g: &[f64], p: f64) -> f64 {
    let mut s = g.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

fn oracle(tr: &Trace) -> [Option<f64>; 15] {
    let g = &tr.g;
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let sd = if g.len() > 1 {
        let sq: f64 = g.iter().map(|v| v * v).sum();
        ((sq - n * mean * mean) / (n - 1.0)).max(0.0).sqrt()
    } else {
        0.0
    };
    let mut peaks = Vec::new();
    for &m in &tr.meals {
        let mut best: Option<f64> = None;
        for (k, &t) in tr.t.iter().enumerate() {
            if t >= m && t <= m + 240.0 {
                best = Some(best.map_or(g[k], |b: f64| b.max(g[k])));
            }
        }
        peaks.extend(best);
    }
    let peak = (!peaks.is_empty()).then(|| peaks.iter().sum::<f64>() / peaks.len() as f64);
    [
        Some(percent(g, |v| (70.0..=180.0).contains(&v))),
        Some(percent(g, |v| (70.0..=140.0).contains(&v))),
        Some(percent(g, |v| v > 180.0 && v <= 250.0)),
        Some(percent(g, |v| v > 250.0)),
        Some(percent(g, |v| (54.0..70.0).contains(&v))),
        Some(percent(g, |v| v < 54.0)),
        g.iter().copied().reduce(f64::max),
        g.iter().copied().reduce(f64::min),
        Some(mean),
        Some(sd),
        Some(type7(g, 0.75) - type7(g, 0.25)),
        Some(100.0 * sd / mean),
        peak,
        Some((mean + 46.7) / 28.7),
        tr.u.iter().copied().reduce(f64::max),
    ]
}

fn as_array(r: &GlycemicReport) -> [Option<f64>; 15] {
    [
        Some(r.tir_70_180),
        Some(r.titr_70_140),
        Some(r.tar_180_250),
        Some(r.tar_250),
        Some(r.tbr_54_70),
        Some(r.tbr_54),
        Some(r.max_g),
        Some(r.min_g),
        Some(r.mean_g),
        Some(r.sd_g),
        Some(r.iqr_g),
        Some(r.cv),
        r.peak_postprandial,
        Some(r.estimated_a1c),
        Some(r.max_u),
    ]
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0),
        (None, None) => true,
        _ => false,
    }
}

pub fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let tr = random_trace(&mut rng);
        let got = as_array(&report(&tr));
        let want = oracle(&tr);
        for (k, (a, b)) in got.iter().zip(want.iter()).enumerate() {
            // the oracle's one-pass variance loses a few digits on tight traces
            let tol = if k == 9 || k == 11 { 1e-9 } else { 1e-12 };
            assert!(close(*a, *b, tol), "case {case} metric {k}: {a:?} vs {b:?}");
        }
    }
}

pub fn bands_partition_the_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let r = report(&random_trace(&mut rng));
        assert!((r.band_total() - 100.0).abs() < 1e-9);
        assert!(r.titr_70_140 <= r.tir_70_180);
    }
}

pub fn metrics_ignore_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let tr = random_trace(&mut rng);
        let mut idx: Vec<usize> = (0..tr.g.len()).collect();
        idx.shuffle(&mut rng);
        let shuffled = Trace {
            t: idx.iter().map(|&k| tr.t[k]).collect(),
            g: idx.iter().map(|&k| tr.g[k]).collect(),
            u: idx.iter().map(|&k| tr.u[k]).collect(),
            meals: tr.meals.clone(),
        };
        let (a, b) = (as_array(&report(&tr)), as_array(&report(&shuffled)));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(close(*x, *y, 1e-12), "{x:?} vs {y:?}");
        }
    }
}
