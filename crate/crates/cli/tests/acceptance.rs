//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exact properties (1, 2, 3, the algebra half of 4, and 10) fail the target.
//! Empirical trend criteria (the trend half of 4, and 5, 6, 7, 9) are
//! measured and printed; they fail the target only with `LFME_ACCEPT_STRICT=1`.
//! Criterion 8 only ever warns.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use lfme_cli::config::{ExperimentConfig, SuiteSource, TrainSettings};
use lfme_cli::runs::{plan, run_all, RunOptions};
use lfme_core::analysis::{
    finite_mean, negative_fraction_after_warmup, rescale_gt, rescale_nongt, EvalReport,
};
use lfme_core::autodiff::{softmax_values, Tape, Tensor, Var};
use lfme_core::domains::{generate_suite, SuiteSpec};
use lfme_core::models::{load_checkpoint, MlpModel};
use lfme_core::train::{loss_lfme, probe_batch, train_method, MethodKind, MethodSpec, RunResult, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Exact,
    Trend,
    Soft,
}

struct Line {
    id: &'static str,
    kind: Kind,
    pass: bool,
    detail: String,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn probs(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    softmax_values(&rand_tensor(rng, &[b, k], -2.0, 2.0)).unwrap()
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let alpha: f64 = rng.random_range(0.01..10.0);
        let z = rand_tensor(&mut rng, &[1, k], -3.0, 3.0);
        let label = rng.random_range(0..k);
        let qe = probs(&mut rng, 1, k);
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let y = tape.constant(Tensor::one_hot(&[label], k).unwrap());
        let qv = tape.constant(qe.clone());
        let loss = loss_lfme(&mut tape, zv, y, qv, alpha / 2.0).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(zv).unwrap();
        let q = softmax_values(&z).unwrap();
        for c in 0..k {
            let yc = if c == label { 1.0 } else { 0.0 };
            let expected = q.data()[c] - yc + alpha * (z.data()[c] - qe.data()[c]);
            worst = worst.max((grad[c] - expected).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: "1",
        kind: Kind::Exact,
        pass: worst < 1e-10 && secs < 5.0,
        detail: format!("max abs error {worst:.2e} over 1000 draws, {secs:.2}s"),
    }
}

const H: f64 = 1e-5;

fn fd_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> lfme_core::Result<Var>,
{
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

/// Scalar readout of a non-scalar op against fixed random weights.
fn project(tape: &mut Tape, x: Var, w: &Tensor) -> lfme_core::Result<Var> {
    let w = tape.constant(w.clone());
    let d = tape.sub(x, w)?;
    let sq = tape.sq_dist_rows(d, w)?;
    Ok(tape.sum(sq))
}

fn away_from_zero(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = 1e-3f64.copysign(*v);
        }
    }
}

fn criterion_2() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut checks = 0;
    while instances < 200 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(1..5));
        let a = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        let bias = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        let c = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let wmn = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
        let wmk = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let mut r = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        away_from_zero(&mut r);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let y = Tensor::one_hot(&labels, k).unwrap();
        let p = probs(&mut rng, m, k);
        let target = probs(&mut rng, m, k);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();

        let mut errs = vec![
            fd_error(&[a.clone(), b.clone()], |t, v| {
                let o = t.matmul(v[0], v[1])?;
                project(t, o, &wmn)
            }),
            fd_error(&[a.clone(), b.clone(), bias.clone()], |t, v| {
                let o = t.matmul(v[0], v[1])?;
                let o = t.add_bias(o, v[2])?;
                project(t, o, &wmn)
            }),
            fd_error(&[a.clone(), c.clone()], |t, v| {
                let o = t.add(v[0], v[1])?;
                project(t, o, &wmk)
            }),
            fd_error(&[a.clone(), c.clone()], |t, v| {
                let o = t.sub(v[0], v[1])?;
                project(t, o, &wmk)
            }),
            fd_error(&[a.clone()], |t, v| {
                let o = t.scale(v[0], -1.7);
                project(t, o, &wmk)
            }),
            fd_error(&[a.clone()], |t, v| {
                let s = t.sum(v[0]);
                let h = t.scale(s, 0.5);
                let sq = t.sq_dist_rows(h, s)?;
                Ok(t.sum(sq))
            }),
            fd_error(&[a.clone()], |t, v| {
                let s = t.mean(v[0])?;
                let z = t.constant(Tensor::scalar(0.3));
                let sq = t.sq_dist_rows(s, z)?;
                Ok(t.sum(sq))
            }),
            fd_error(&[r.clone()], |t, v| {
                let o = t.relu(v[0]);
                project(t, o, &wmk)
            }),
            fd_error(&[a.clone()], |t, v| {
                let o = t.softmax(v[0])?;
                project(t, o, &wmk)
            }),
            fd_error(&[p.clone()], |t, v| {
                let yv = t.constant(y.clone());
                t.cross_entropy(v[0], yv)
            }),
            fd_error(&[p.clone(), target.clone()], |t, v| {
                let rows = t.soft_cross_entropy_rows(v[0], v[1])?;
                t.weighted_mean(rows, w.clone())
            }),
            fd_error(&[a.clone(), c.clone()], |t, v| t.mse(v[0], v[1])),
            fd_error(&[a.clone(), c.clone()], |t, v| {
                let rows = t.sq_dist_rows(v[0], v[1])?;
                t.weighted_mean(rows, w.clone())
            }),
            fd_error(&[a.clone()], |t, v| {
                let yv = t.constant(y.clone());
                let qe = t.constant(target.clone());
                loss_lfme(t, v[0], yv, qe, 0.8)
            }),
        ];

        // 3-layer MLP with the LFME loss; instances with a pre-activation near the kink are redrawn.
        let d = rng.random_range(1..5);
        let x = rand_tensor(&mut rng, &[m, d], -2.0, 2.0);
        let model = MlpModel::init(&[d, 7, 5, k], rng.random()).unwrap();
        let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        for bias in params.iter_mut().skip(1).step_by(2) {
            for v in bias.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let mut h = tape.constant(x.clone());
        let mut near_kink = false;
        for layer in 0..2 {
            let lin = tape.matmul(h, vars[2 * layer]).unwrap();
            let pre = tape.add_bias(lin, vars[2 * layer + 1]).unwrap();
            near_kink |= tape.value(pre).data().iter().any(|v| v.abs() < 1e-4);
            h = tape.relu(pre);
        }
        if near_kink {
            continue;
        }
        errs.push(fd_error(&params, |t, v| {
            let mut h = t.constant(x.clone());
            for layer in 0..3 {
                let lin = t.matmul(h, v[2 * layer])?;
                h = t.add_bias(lin, v[2 * layer + 1])?;
                if layer < 2 {
                    h = t.relu(h);
                }
            }
            let yv = t.constant(y.clone());
            let qe = t.constant(target.clone());
            loss_lfme(t, h, yv, qe, 1.3)
        }));
        checks += errs.len();
        worst = errs.into_iter().fold(worst, f64::max);
        instances += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: "2",
        kind: Kind::Exact,
        pass: worst < 1e-4 && secs < 30.0,
        detail: format!("worst rel error {worst:.2e} over {instances} instances ({checks} checks), {secs:.2}s"),
    }
}

fn strip_method(text: &str) -> Vec<String> {
    text.lines().map(|l| l.split_once(',').unwrap().1.to_string()).collect()
}

fn default_cli_config(output: &std::path::Path, methods: Vec<MethodSpec>, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        suite: SuiteSource::Synthetic(SuiteSpec::default()),
        methods,
        train: TrainSettings::default(),
        seeds,
        held_out: Some(vec![3]),
        output: output.to_path_buf(),
        formats: vec![lfme_cli::config::ReportFormat::Csv],
    }
}

fn criterion_3() -> Line {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let methods = vec![
        MethodSpec::new(MethodKind::Erm),
        MethodSpec::new(MethodKind::Lfme).with_alpha_half(0.0),
        MethodSpec::new(MethodKind::ErmPlus).with_alpha_half(0.0),
        MethodSpec::new(MethodKind::Ls).with_epsilon(0.0),
    ];
    let config = default_cli_config(tmp.path(), methods, vec![0, 1, 2]);
    let jobs = plan(&config).unwrap();
    if let Err(e) = run_all(&config, &jobs, RunOptions::default()) {
        return Line {
            id: "3",
            kind: Kind::Exact,
            pass: false,
            detail: format!("runs failed: {e}"),
        };
    }
    let mut identical = 0;
    let mut compared = 0;
    for job in jobs.iter().filter(|j| j.method.kind != MethodKind::Erm) {
        let erm_dir = lfme_cli::runs::run_dir(&config.output, "erm", job.seed, job.held_out);
        let a = fs::read_to_string(erm_dir.join("metrics.csv")).unwrap();
        let b = fs::read_to_string(job.dir(&config.output).join("metrics.csv")).unwrap();
        compared += 1;
        if strip_method(&a) == strip_method(&b) {
            identical += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Line {
        id: "3",
        kind: Kind::Exact,
        pass: identical == compared && compared == 9 && secs < 120.0,
        detail: format!("{identical}/{compared} metric files identical to ERM (method column aside), {secs:.1}s"),
    }
}

fn criterion_10() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = default_cli_config(
        &tmp.path().join("a"),
        vec![MethodSpec::new(MethodKind::Erm), MethodSpec::new(MethodKind::Lfme)],
        vec![0, 1],
    );
    config.train.steps = 600;
    let jobs = plan(&config).unwrap();
    let mut again = config.clone();
    again.output = tmp.path().join("b");
    run_all(&config, &jobs, RunOptions::default()).unwrap();
    run_all(&again, &jobs, RunOptions::default()).unwrap();

    let mut same_bytes = true;
    let mut same_logits = true;
    let mut checkpoints = 0;
    for job in &jobs {
        for name in ["metrics.csv", "probe.csv"] {
            same_bytes &= fs::read(job.dir(&config.output).join(name)).unwrap()
                == fs::read(job.dir(&again.output).join(name)).unwrap();
        }
        let run = lfme_cli::runs::execute(&config, job).unwrap();
        let suite = config.load_suite(job.seed).unwrap();
        let probe = probe_batch(&suite, &run.split, config.train.batch_per_domain, job.seed).unwrap();
        let models = &run.selected_models;
        let mut pairs: Vec<(String, &MlpModel)> = models
            .experts
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("expert-{i}"), m))
            .collect();
        if let Some(t) = &models.target {
            pairs.push(("target".into(), t));
        }
        for (stem, model) in pairs {
            let loaded = load_checkpoint(&job.dir(&config.output).join(format!("checkpoints/{stem}.ckpt"))).unwrap();
            let bits = |m: &MlpModel| -> Vec<u64> {
                m.logits(&probe.x).unwrap().data().iter().map(|v| v.to_bits()).collect()
            };
            same_logits &= bits(model) == bits(&loaded);
            checkpoints += 1;
        }
    }
    Line {
        id: "10",
        kind: Kind::Exact,
        pass: same_bytes && same_logits,
        detail: format!(
            "reruns byte-identical: {same_bytes}; {checkpoints} checkpoints reproduce probe logits bitwise: {same_logits}"
        ),
    }
}

fn algebra_4() -> (bool, String) {
    let mut monotone = true;
    let mut points = 0;
    for i in 0..10 {
        for j in 0..10 {
            let q = 0.02 + 0.097 * i as f64;
            let z = -1.0 + 0.35 * j as f64;
            let mut prev = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for e in 0..100 {
                let qe = 0.005 + 0.0099 * e as f64;
                let f = rescale_gt(q, qe, z, 1.0 + j as f64).unwrap();
                let fp = rescale_nongt(q, qe, 1.0 - z, 1.0 + j as f64).unwrap();
                monotone &= f > prev.0 && fp > prev.1;
                prev = (f, fp);
                points += 1;
            }
        }
    }
    let mut equal = true;
    for z in [-0.75, 0.0, 0.25, 0.5, 1.125, 3.0] {
        for qe in [0.125, 0.5, 0.875] {
            for q in [0.0625, 0.25, 0.75] {
                equal &= rescale_gt(q, qe, z, 1.5).unwrap().to_bits()
                    == rescale_nongt(q, qe, 1.0 - z, 1.5).unwrap().to_bits();
            }
        }
    }
    (
        monotone && equal && points == 10_000,
        format!("monotone on {points} points: {monotone}; F' == F at unit logit sum: {equal}"),
    )
}

struct SeedRuns {
    erm: RunResult,
    lfme: RunResult,
    erm_plus: RunResult,
    lfme_low: RunResult,
    lfme_high: RunResult,
    agg: Vec<RunResult>,
}

fn train(seed: u64, method: MethodSpec) -> RunResult {
    let suite = generate_suite(&SuiteSpec {
        seed,
        ..SuiteSpec::default()
    })
    .unwrap();
    let split = suite.default_split().unwrap();
    let mut cfg = TrainConfig::new(method);
    cfg.seed = seed;
    train_method(&suite, &split, &cfg).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> ExitCode {
    let strict = std::env::var("LFME_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3()];

    let t4 = Instant::now();
    let core: Vec<(RunResult, RunResult)> = (0..SEEDS)
        .map(|s| (train(s, MethodSpec::new(MethodKind::Erm)), train(s, MethodSpec::new(MethodKind::Lfme))))
        .collect();
    let secs4 = t4.elapsed().as_secs_f64();
    let t6 = Instant::now();
    let runs: Vec<SeedRuns> = core
        .into_iter()
        .enumerate()
        .map(|(s, (erm, lfme))| {
            let s = s as u64;
            SeedRuns {
                erm,
                lfme,
                erm_plus: train(s, MethodSpec::new(MethodKind::ErmPlus)),
                lfme_low: train(s, MethodSpec::new(MethodKind::Lfme).with_alpha_half(0.01)),
                lfme_high: train(s, MethodSpec::new(MethodKind::Lfme).with_alpha_half(10.0)),
                agg: [MethodKind::AggAvg, MethodKind::AggMs, MethodKind::AggConf, MethodKind::AggDyn]
                    .into_iter()
                    .map(|k| train(s, MethodSpec::new(k)))
                    .collect(),
            }
        })
        .collect();
    let secs6 = secs4 + t6.elapsed().as_secs_f64();

    // 4: algebra is exact; the negativity trend pools post-warmup points of all seeds.
    let (alg_ok, alg_detail) = algebra_4();
    let steps = TrainConfig::new(MethodSpec::new(MethodKind::Lfme)).steps;
    let mut post = 0usize;
    let mut negative = 0usize;
    let mut gap_shrinks = 0;
    for r in &runs {
        let frac = negative_fraction_after_warmup(&r.lfme.rescale, steps).unwrap_or(0.0);
        let n = r.lfme.rescale.iter().filter(|t| t.step as f64 > 0.1 * steps as f64).count();
        post += n;
        negative += (frac * n as f64).round() as usize;
        let gaps: Vec<f64> = r.lfme.rescale.iter().map(|t| t.mean_abs_gap()).collect();
        let half = gaps.len() / 2;
        if finite_mean(&gaps[half..]) < finite_mean(&gaps[..half]) {
            gap_shrinks += 1;
        }
    }
    let neg_frac = negative as f64 / post.max(1) as f64;
    let mean_f_last = mean(&runs.iter().map(|r| r.lfme.rescale.last().unwrap().mean_f).collect::<Vec<_>>());
    lines.push(Line {
        id: "4 (algebra)",
        kind: Kind::Exact,
        pass: alg_ok,
        detail: alg_detail,
    });
    lines.push(Line {
        id: "4 (trend)",
        kind: Kind::Trend,
        pass: neg_frac >= 0.9 && secs4 < 600.0,
        detail: format!(
            "batch-mean F < 0 at {negative}/{post} post-warmup points ({:.1}%, need >= 90%); final mean F {mean_f_last:.3}; |F - F'| shrinks in {gap_shrinks}/{SEEDS} seeds; {secs4:.0}s",
            100.0 * neg_frac
        ),
    });

    // 5
    let reports: Vec<(EvalReport, EvalReport)> = runs
        .iter()
        .map(|r| {
            let lf = EvalReport::from_run(&r.lfme, None).unwrap();
            let erm = EvalReport::from_run(&r.erm, Some(&r.lfme.probe)).unwrap();
            (erm, lf)
        })
        .collect();
    let entropy_wins = reports.iter().filter(|(e, l)| l.mean_entropy > e.mean_entropy).count();
    let sums: Vec<f64> = reports.iter().map(|(_, l)| l.mean_logit_sum.unwrap()).collect();
    let sum_ok = sums.iter().filter(|s| (0.6..=1.4).contains(*s)).count();
    lines.push(Line {
        id: "5",
        kind: Kind::Trend,
        pass: entropy_wins >= 8 && sum_ok >= 8,
        detail: format!(
            "LFME entropy above ERM in {entropy_wins}/{SEEDS} seeds (mean {:.3} vs {:.3}); logit sum in [0.6, 1.4] in {sum_ok}/{SEEDS} (mean {:.3})",
            mean(&reports.iter().map(|(_, l)| l.mean_entropy).collect::<Vec<_>>()),
            mean(&reports.iter().map(|(e, _)| e.mean_entropy).collect::<Vec<_>>()),
            mean(&sums)
        ),
    });

    // 6
    let ood = |f: &dyn Fn(&SeedRuns) -> &RunResult| mean(&runs.iter().map(|r| f(r).ood_acc().unwrap()).collect::<Vec<_>>());
    let (erm, lfme, plus) = (ood(&|r| &r.erm), ood(&|r| &r.lfme), ood(&|r| &r.erm_plus));
    let grid = [ood(&|r| &r.lfme_low), lfme, ood(&|r| &r.lfme_high)];
    let spread = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max) - grid.iter().copied().fold(f64::INFINITY, f64::min);
    lines.push(Line {
        id: "6",
        kind: Kind::Trend,
        pass: lfme - erm >= 0.02 && plus - erm >= 0.01 && spread < 0.04 && secs6 < 1800.0,
        detail: format!(
            "OOD ERM {:.2}, LFME {:.2} ({:+.2}, need >= +2), ERM+ {:.2} ({:+.2}, need >= +1); LFME at alpha/2 0.01/1/10: {:.2}/{:.2}/{:.2}, spread {:.2} (need < 4); {secs6:.0}s",
            100.0 * erm,
            100.0 * lfme,
            100.0 * (lfme - erm),
            100.0 * plus,
            100.0 * (plus - erm),
            100.0 * grid[0],
            100.0 * grid[1],
            100.0 * grid[2],
            100.0 * spread
        ),
    });

    // 7
    let val_erm = mean(&reports.iter().map(|(e, _)| e.mean_val_acc).collect::<Vec<_>>());
    let val_lfme = mean(&reports.iter().map(|(_, l)| l.mean_val_acc).collect::<Vec<_>>());
    let val_exp = mean(&reports.iter().map(|(_, l)| l.mean_expert_val_acc().unwrap()).collect::<Vec<_>>());
    lines.push(Line {
        id: "7",
        kind: Kind::Trend,
        pass: val_exp - val_erm >= -0.005 && val_lfme - val_exp >= -0.005,
        detail: format!(
            "in-domain val: ERM {:.2} <= experts {:.2} <= LFME {:.2} (gaps {:+.2}, {:+.2}; need >= -0.5)",
            100.0 * val_erm,
            100.0 * val_exp,
            100.0 * val_lfme,
            100.0 * (val_exp - val_erm),
            100.0 * (val_lfme - val_exp)
        ),
    });

    // 8
    let names = ["AGG_AVG", "AGG_MS", "AGG_CONF", "AGG_DYN"];
    let aggs: Vec<f64> = (0..4).map(|i| mean(&runs.iter().map(|r| r.agg[i].ood_acc().unwrap()).collect::<Vec<_>>())).collect();
    lines.push(Line {
        id: "8",
        kind: Kind::Soft,
        pass: aggs.iter().all(|&a| a <= erm + 0.01),
        detail: names
            .iter()
            .zip(&aggs)
            .map(|(n, a)| format!("{n} {:.2} ({:+.2})", 100.0 * a, 100.0 * (a - erm)))
            .collect::<Vec<_>>()
            .join(", ")
            + " vs ERM; none may exceed +1",
    });

    // 9: both runs split hard/easy by the LFME run's expert losses.
    let hard_wins = reports
        .iter()
        .filter(|(e, l)| finite_mean(&l.r_hard) > finite_mean(&e.r_hard))
        .count();
    let easy_l = mean(&reports.iter().map(|(_, l)| finite_mean(&l.r_easy)).collect::<Vec<_>>());
    let easy_e = mean(&reports.iter().map(|(e, _)| finite_mean(&e.r_easy)).collect::<Vec<_>>());
    lines.push(Line {
        id: "9",
        kind: Kind::Trend,
        pass: hard_wins >= 8 && (easy_l - easy_e).abs() < 0.05,
        detail: format!(
            "R on hard samples higher for LFME in {hard_wins}/{SEEDS} seeds (mean {:.3} vs {:.3}); easy-sample |delta R| {:.3} (need < 0.05)",
            mean(&reports.iter().map(|(_, l)| finite_mean(&l.r_hard)).collect::<Vec<_>>()),
            mean(&reports.iter().map(|(e, _)| finite_mean(&e.r_hard)).collect::<Vec<_>>()),
            (easy_l - easy_e).abs()
        ),
    });

    lines.push(criterion_10());

    let mut failed = false;
    for l in &lines {
        let status = match (l.pass, l.kind) {
            (true, _) => "PASS",
            (false, Kind::Soft) => "WARN",
            (false, _) => "FAIL",
        };
        println!("criterion {:<12} [PRIMARY] {status}  {}", l.id, l.detail);
        failed |= !l.pass && (l.kind == Kind::Exact || (strict && l.kind == Kind::Trend));
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
