//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Monte Carlo criteria use 10^4 trials.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqest_core::asymptotics::{
    be_tail_bound, critical_index, predict, var_tail_bound, z_two_sided, DEFAULT_BE_CONSTANT,
};
use seqest_core::margins::MarginShape;
use seqest_core::models::{MeanModel, SampleState};
use seqest_core::rate_fn::{quad_ratio, rate, rate_numeric};
use seqest_core::sim::{
    risk_bound_check, run_trials, stage_miss_check, staircase_check, sweep, RunMode, SimConfig,
    SimSummary, SweepResult,
};
use seqest_core::stopping::RuleKind;

const TRIALS: u64 = 10_000;
const DELTA: f64 = 0.05;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, pass: bool, detail: String) {
        println!(
            "{} [{id}] {title}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            self.failures.push(id.to_string());
        }
    }
}

fn base(model: MeanModel, mu: f64, rule: RuleKind) -> SimConfig {
    let mut c = SimConfig::new(model, mu, rule);
    c.delta = DELTA;
    c.trials = TRIALS;
    c.seed = 20_240_601;
    c.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    c
}

/// `Pr{|S/n - 1/2| < eps}` for `S ~ Bin(n, 1/2)`, by pmf summation.
fn binom_half_within(n: u64, eps: f64) -> f64 {
    let mut log_c = 0.0f64;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if ((2 * k) as f64 - n as f64).abs() < 2.0 * n as f64 * eps {
            total += (log_c - n as f64 * 2f64.ln()).exp();
        }
    }
    total
}

fn binom_half_range(n: u64, a: u64, b: u64) -> f64 {
    let mut log_c = 0.0f64;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if (a..=b).contains(&k) {
            total += (log_c - n as f64 * 2f64.ln()).exp();
        }
    }
    total
}

fn criterion_1(r: &mut Report) {
    let start = Instant::now();
    let mut c = base(
        MeanModel::bernoulli(),
        0.5,
        RuleKind::DistributionFree { rho: 0.5 },
    );
    c.mode = RunMode::Fixed;
    c.epsilon = 0.05;
    c.fixed_n = Some(385);
    let n_fixed = c.fixed_size(0.05).unwrap();
    let s = run_trials(&c).unwrap();
    let elapsed = start.elapsed();
    let exact = binom_half_within(385, 0.05);
    let literal = binom_half_range(385, 173, 212);
    let pass = (n_fixed - 384.1459).abs() < 5e-5
        && s.coverage_lo <= exact
        && exact <= s.coverage_hi
        && elapsed <= Duration::from_secs(10);
    r.line(
        "1",
        "fixed-size baseline",
        pass,
        format!(
            "N = {n_fixed:.4}; coverage {:.4} Wilson [{:.4}, {:.4}] vs exact Pr{{|Y-0.5|<0.05}} = {exact:.6} \
             (Pr{{173<=S<=212}} = {literal:.6} lies {} the interval); {:.2}s",
            s.coverage,
            s.coverage_lo,
            s.coverage_hi,
            if s.coverage_lo <= literal && literal <= s.coverage_hi { "inside" } else { "outside" },
            elapsed.as_secs_f64()
        ),
    );
}

struct SeqCase {
    label: &'static str,
    model: MeanModel,
    mu: f64,
    rule: RuleKind,
    ratio_tol: f64,
}

fn seq_cases() -> Vec<SeqCase> {
    let b = MeanModel::bernoulli;
    vec![
        SeqCase {
            label: "CDF/Bernoulli(0.3)",
            model: b(),
            mu: 0.3,
            rule: RuleKind::Cdf,
            ratio_tol: 0.15,
        },
        SeqCase {
            label: "LD/Bernoulli(0.3)",
            model: b(),
            mu: 0.3,
            rule: RuleKind::LargeDeviation,
            ratio_tol: 0.15,
        },
        SeqCase {
            label: "NAL/Bernoulli(0.3)",
            model: b(),
            mu: 0.3,
            rule: RuleKind::NormalApprox { rho: 0.0 },
            ratio_tol: 0.20,
        },
        SeqCase {
            label: "DF/Bernoulli(0.3)",
            model: b(),
            mu: 0.3,
            rule: RuleKind::DistributionFree { rho: 0.5 },
            ratio_tol: 0.20,
        },
        SeqCase {
            label: "DF/uniform-mixture",
            model: MeanModel::uniform_mixture(),
            mu: 0.8,
            rule: RuleKind::DistributionFree { rho: 0.5 },
            ratio_tol: 0.20,
        },
    ]
}

fn criteria_2_3(r: &mut Report) -> Vec<(String, SweepResult, Duration)> {
    let mut out = Vec::new();
    for case in seq_cases() {
        let mut c = base(case.model.clone(), case.mu, case.rule);
        c.epsilons = vec![0.1, 0.05, 0.025];
        let start = Instant::now();
        let sw = sweep(&c).unwrap();
        let elapsed = start.elapsed();
        let last = sw.rows.last().unwrap();
        let t = sw.trend.as_ref().unwrap();
        let covs: Vec<String> = sw
            .rows
            .iter()
            .map(|s| format!("{:.4}", s.coverage))
            .collect();
        let pass2 = last.coverage >= 0.93 && t.coverage_ok() && elapsed <= Duration::from_secs(300);
        r.line(
            "2",
            &format!("sequential coverage limit, {}", case.label),
            pass2,
            format!(
                "coverage {} at eps 0.1/0.05/0.025; |cov-0.95| non-increasing within 2 SE: {}; {:.1}s",
                covs.join(", "),
                t.coverage_ok(),
                elapsed.as_secs_f64()
            ),
        );
        let ratios: Vec<String> = sw.rows.iter().map(|s| format!("{:.4}", s.ratio)).collect();
        let dev = (last.ratio - 1.0).abs();
        let decreasing = t.ratio_strict.iter().all(|&b| b);
        r.line(
            "3",
            &format!("sequential efficiency limit, {}", case.label),
            dev <= case.ratio_tol && decreasing,
            format!(
                "E[n]/N {} ; |E[n]/N-1| = {dev:.4} (tol {}) ; decreasing: {decreasing}",
                ratios.join(", "),
                case.ratio_tol
            ),
        );
        out.push((case.label.to_string(), sw, elapsed));
    }
    out
}

fn criterion_4(r: &mut Report) {
    for (label, model, mu) in [
        ("Bernoulli(0.3)", MeanModel::bernoulli(), 0.3),
        ("Poisson(1)", MeanModel::poisson(), 1.0),
    ] {
        for rule in [RuleKind::Cdf, RuleKind::LargeDeviation] {
            let mut c = base(model.clone(), mu, rule);
            c.epsilon = 0.05;
            let s = run_trials(&c).unwrap();
            let chk = risk_bound_check(&s, s.miss_rate).unwrap();
            r.line(
                "4",
                &format!("risk bound, {} on {label}", rule.name()),
                chk.pass,
                format!(
                    "miss rate {:.4} <= bound {:.4} + 3 SE ({:.4}); slack {:.4}",
                    chk.miss_rate, chk.bound, chk.se, chk.slack
                ),
            );
        }
    }
}

fn multistage(model: MeanModel, mu: f64, eps: f64) -> SimSummary {
    let mut c = base(model, mu, RuleKind::DistributionFree { rho: 0.5 });
    c.mode = RunMode::Multistage;
    c.epsilon = eps;
    run_trials(&c).unwrap()
}

fn criteria_5_to_7(r: &mut Report) {
    let sched = base(
        MeanModel::bernoulli(),
        0.5,
        RuleKind::DistributionFree { rho: 0.5 },
    )
    .stage_schedule();
    let jm = critical_index(1.0, 0.25, &sched, 64).unwrap();
    let mut runs = Vec::new();
    for eps in [0.1, 0.05] {
        let s = multistage(MeanModel::bernoulli(), 0.5, eps);
        let frac = s.stage_fraction(&[jm.saturating_sub(1), jm]);
        if eps == 0.05 {
            r.line(
                "5",
                "multistage stopping-index concentration, DF Bernoulli(0.5)",
                frac >= 0.99 && s.jm == Some(jm),
                format!("jm = {jm}; Pr{{l in {{jm-1, jm}}}} = {frac:.4} at eps 0.05"),
            );
        } else {
            println!("     [5] eps 0.1: Pr{{l in {{jm-1, jm}}}} = {frac:.4}");
        }
        runs.push((format!("Bernoulli(0.5) eps {eps}"), 0.25, s));
    }
    let normal = MeanModel::normal(3.0).unwrap();
    runs.push((
        "Normal(var 3) eps 0.05".into(),
        3.0,
        multistage(normal, 0.0, 0.05),
    ));

    for (label, nu, s) in runs.iter().filter(|(l, _, _)| l.contains("0.05")) {
        let rep = predict(
            0.05,
            DELTA,
            if *nu == 0.25 { 0.5 } else { 0.0 },
            *nu,
            &MarginShape::Absolute,
            &sched,
            64,
        )
        .unwrap();
        let (lo, hi) = rep.ratio_interval;
        let mut pass = rep.regular && s.ratio >= 0.9 * lo && s.ratio <= 1.1 * hi;
        let mut detail = format!(
            "jm = {}, E[n]/N = {:.4} in [0.9*{lo:.4}, 1.1*{hi:.4}]",
            rep.jm, s.ratio
        );
        if rep.jm == 1 {
            let point = rep.ratio_point.unwrap();
            let close = (s.ratio / point - 1.0).abs() <= 0.1;
            pass &= close;
            detail.push_str(&format!("; point {point:.4} matched within 10%: {close}"));
        }
        r.line(
            "6",
            &format!("multistage efficiency band, {label}"),
            pass,
            detail,
        );
    }

    for (label, _, s) in &runs {
        let v = stage_miss_check(s);
        let v_ok = v.iter().all(|row| row.ok);
        let vii = staircase_check(s).unwrap();
        let worst = v
            .iter()
            .map(|row| row.lhs - row.rhs)
            .fold(f64::NEG_INFINITY, f64::max);
        r.line(
            "7",
            &format!("stage-wise miss and staircase bounds, {label}"),
            v_ok && vii.ok,
            format!(
                "max Pr{{l>l0}} - Pr{{D=0}} = {worst:.4} over {} stages; mean n {:.1} <= staircase {:.1} + 3 SE",
                v.len(),
                vii.lhs,
                vii.rhs
            ),
        );
    }
}

fn criterion_8(r: &mut Report) {
    let start = Instant::now();
    let families: Vec<(MeanModel, f64, f64)> = vec![
        (MeanModel::bernoulli(), 0.02, 0.98),
        (MeanModel::poisson(), 0.05, 20.0),
        (MeanModel::exponential(), 0.05, 20.0),
        (MeanModel::normal(2.5).unwrap(), -10.0, 10.0),
    ];
    let mut worst_gap = 0.0f64;
    let mut sign_ok = true;
    let mut worst_quad = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (m, lo, hi) in &families {
        let grid: Vec<f64> = (0..21).map(|i| lo + (hi - lo) * i as f64 / 20.0).collect();
        for &theta in &grid {
            for &z in &grid {
                let c = rate(m, z, theta).unwrap();
                let n = rate_numeric(m, z, theta, 1e-10).unwrap().value;
                worst_gap = worst_gap.max((c - n).abs());
            }
        }
        for _ in 0..1000 {
            use rand::Rng;
            let z = lo + (hi - lo) * rng.random::<f64>();
            let theta = lo + (hi - lo) * rng.random::<f64>();
            let v = rate(m, z, theta).unwrap();
            if v > 0.0 || (v == 0.0 && (z - theta).abs() > 1e-12) || v.is_nan() {
                sign_ok = false;
            }
            if rate(m, theta, theta).unwrap() != 0.0 {
                sign_ok = false;
            }
        }
        for k in 1..20 {
            let theta = lo + (hi - lo) * k as f64 / 20.0;
            let d = 1e-3 * m.variance(theta).unwrap().sqrt();
            for z in [theta - d, theta + d] {
                worst_quad = worst_quad.max((quad_ratio(m, z, theta).unwrap() - 1.0).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    r.line(
        "8",
        "rate-function suite",
        worst_gap <= 1e-8 && sign_ok && worst_quad <= 1e-2 && elapsed <= Duration::from_secs(5),
        format!(
            "max |closed - numeric| = {worst_gap:.2e}; M <= 0 with zero only at z = theta: {sign_ok}; \
             max |quad_ratio - 1| = {worst_quad:.2e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_9(r: &mut Report) {
    const REPS: u64 = 100_000;
    let models: Vec<(MeanModel, f64)> = vec![
        (MeanModel::bernoulli(), 0.3),
        (MeanModel::exponential(), 1.0),
        (MeanModel::normal(1.0).unwrap(), 0.0),
    ];
    let mut worst = f64::NEG_INFINITY;
    let mut all_ok = true;
    for (m, mu) in &models {
        let mom = m.moments(*mu).unwrap();
        let sampler = m.sampler(*mu).unwrap();
        for n in [25u64, 100, 400] {
            let mut rng = ChaCha8Rng::seed_from_u64(9 + n);
            let mut stats = Vec::with_capacity(REPS as usize);
            for _ in 0..REPS {
                let mut s = SampleState::new();
                for _ in 0..n {
                    s.push(sampler.draw(&mut rng));
                }
                stats.push(((s.mean() - mu).abs(), (s.variance() - mom.var).abs()));
            }
            for g in [0.05, 0.1, 0.2] {
                let f_mean = stats.iter().filter(|x| x.0 >= g).count() as f64 / REPS as f64;
                let f_var = stats.iter().filter(|x| x.1 >= g).count() as f64 / REPS as f64;
                let b_mean = be_tail_bound(n, g, mom.var, mom.abs_third, DEFAULT_BE_CONSTANT);
                let b_var = var_tail_bound(
                    n,
                    g,
                    mom.var,
                    mom.abs_third,
                    mom.sq_dev_var,
                    mom.sq_dev_third,
                    DEFAULT_BE_CONSTANT,
                );
                worst = worst.max(f_mean - b_mean).max(f_var - b_var);
                if f_mean > b_mean || f_var > b_var {
                    all_ok = false;
                    println!(
                        "     [9] {} n={n} gamma={g}: mean tail {f_mean} vs {b_mean}, variance tail {f_var} vs {b_var}",
                        m.name()
                    );
                }
            }
        }
    }
    r.line(
        "9",
        "concentration-oracle soundness",
        all_ok,
        format!("3 families x n in {{25,100,400}} x gamma in {{0.05,0.1,0.2}}; max(freq - bound) = {worst:.4}"),
    );
}

fn criterion_10(r: &mut Report) {
    let mut cfgs = Vec::new();
    let mut seq = base(MeanModel::bernoulli(), 0.3, RuleKind::Cdf);
    seq.trials = 2000;
    seq.epsilons = vec![0.1, 0.05];
    seq.per_trial = true;
    cfgs.push(("sequential CDF sweep", seq));
    let mut ms = base(
        MeanModel::normal(3.0).unwrap(),
        0.0,
        RuleKind::DistributionFree { rho: 0.5 },
    );
    ms.mode = RunMode::Multistage;
    ms.trials = 2000;
    ms.epsilon = 0.1;
    ms.per_trial = true;
    cfgs.push(("multistage DF run", ms));

    let render = |c: &SimConfig| -> String {
        let sw = sweep(c).unwrap();
        let mut s = sw.to_csv();
        for row in &sw.rows {
            s.push_str(&row.per_trial_csv());
        }
        s
    };
    let mut pass = true;
    let mut details = Vec::new();
    for (label, mut c) in cfgs {
        c.workers = 1;
        let a = render(&c);
        let b = render(&c);
        c.workers = 8;
        let d = render(&c);
        let same = a == b && a == d;
        pass &= same;
        details.push(format!(
            "{label}: {} bytes identical across repeat and workers 1/8: {same}",
            a.len()
        ));
    }
    r.line("10", "determinism", pass, details.join("; "));
}

fn main() -> ExitCode {
    let z = z_two_sided(DELTA).unwrap();
    println!("acceptance suite (delta = {DELTA}, Z = {z:.9}, trials = {TRIALS})");
    let mut r = Report {
        failures: Vec::new(),
    };
    criterion_1(&mut r);
    criteria_2_3(&mut r);
    criterion_4(&mut r);
    criteria_5_to_7(&mut r);
    criterion_8(&mut r);
    criterion_9(&mut r);
    criterion_10(&mut r);
    if r.failures.is_empty() {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {}", r.failures.join(", "));
        ExitCode::FAILURE
    }
}
