//! Acceptance suite. Every test writes one `PASS`/`FAIL` line to stderr
//! before asserting. The line bypasses the test harness's output capture.
//!
//! The tests take a shared lock so that the wall-clock limits are measured
//! without the other tests competing for the CPU.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use advmos_core::attack::{attack_objective, batch_attack, target_from_score, ClipAttack};
use advmos_core::corpus::synth_clips;
use advmos_core::defense::{
    adv_train, build_adversarial_set, build_labeled, compute_errors, AdversarialSet, LabeledSet, RobustnessPair,
};
use advmos_core::diff::{finite_diff_coord, relative_error, Graph, Tensor, Var};
use advmos_core::predictor::{train_predictor, TrainConfig};
use advmos_core::spectral::spectral_l1_node;
use advmos_core::study::{example_table, human_zscore, one_tailed_p, study_summary};
use advmos_core::{
    AdvTrainConfig, AttackConfig, PredictorModel, QualityScore, RobustnessReport, Split, SynthSpec, Waveform,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    // Written through the handle, not `eprintln!`, so it is not captured.
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id} ({name}): {detail}");
}

// ---------------------------------------------------------------------------
// Shared desk-scale experiment

struct Experiment {
    teacher: PredictorModel,
    student: PredictorModel,
    labeled: LabeledSet,
    adversarial: AdversarialSet,
    test_pairs: Vec<RobustnessPair>,
    report: RobustnessReport,
    train_time: Duration,
    attack_train_time: Duration,
    total_time: Duration,
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let start = Instant::now();
        let spec = SynthSpec {
            clip_seconds: 0.5,
            ..SynthSpec::default()
        };
        let clips = synth_clips(&spec).expect("synthesize corpus");
        let (train, test): (Vec<_>, Vec<_>) = clips.into_iter().partition(|c| c.split == Split::Train);
        assert_eq!(train.len(), 64);

        let t = Instant::now();
        let corpus: Vec<(Waveform, QualityScore)> = train.iter().map(|c| (c.waveform.clone(), c.label)).collect();
        let teacher = train_predictor(&corpus, &TrainConfig::default())
            .expect("train predictor")
            .model;
        let train_time = t.elapsed();
        println!("trained f on {} clips in {:.1?}", corpus.len(), train_time);

        let attack = AttackConfig::default();
        let (labeled, failed) = build_labeled(train.into_iter().map(|c| (c.clip_id, c.waveform)).collect(), &teacher);
        assert!(failed.is_empty(), "unlabeled clips: {failed:?}");
        let t = Instant::now();
        let adversarial = build_adversarial_set(&labeled, &teacher, &attack).expect("attack training split");
        let attack_train_time = t.elapsed();
        println!(
            "attacked {} training clips in {:.1?}",
            adversarial.len(),
            attack_train_time
        );

        let test: Vec<(String, Waveform)> = test.into_iter().map(|c| (c.clip_id, c.waveform)).collect();
        let results: Vec<ClipAttack> = batch_attack(&test, &teacher, &attack);
        let test_pairs = test
            .iter()
            .zip(&results)
            .map(|((id, x), r)| {
                let r = r.result.as_ref().expect("test attack");
                RobustnessPair::from_result(id.clone(), x.clone(), r).unwrap()
            })
            .collect::<Vec<_>>();

        let outcome = adv_train(&teacher, &labeled, &adversarial, &AdvTrainConfig::default()).expect("adv_train");
        let report = compute_errors(&teacher, &outcome.model, &test_pairs).expect("robustness");
        let total_time = start.elapsed();
        println!("experiment finished in {total_time:.1?}");
        Experiment {
            teacher,
            student: outcome.model,
            labeled,
            adversarial,
            test_pairs,
            report,
            train_time,
            attack_train_time,
            total_time,
        }
    })
}

// ---------------------------------------------------------------------------
// 1. Gradients against central finite differences

const PROBES: usize = 100;
const H: f64 = 1e-5;
/// Absolute disagreement below which a probe counts as agreeing.
const ABS_FLOOR: f64 = 1e-7;

type Build = fn(&mut Graph, Var, &mut ChaCha8Rng) -> Var;

struct Primitive {
    name: &'static str,
    shape: &'static [usize],
    positive: bool,
    build: Build,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values in `±[0.2, 1]`, away from the kinks of `abs` and `relu`.
fn probe_point(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if positive || rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn konst(g: &mut Graph, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    let t = random_tensor(rng, shape);
    g.constant(t)
}

fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "add",
            shape: &[6],
            positive: false,
            build: |g, x, r| {
                let c = konst(g, r, &[6]);
                g.add(x, c).unwrap()
            },
        },
        Primitive {
            name: "sub (lhs)",
            shape: &[6],
            positive: false,
            build: |g, x, r| {
                let c = konst(g, r, &[6]);
                g.sub(x, c).unwrap()
            },
        },
        Primitive {
            name: "sub (rhs)",
            shape: &[6],
            positive: false,
            build: |g, x, r| {
                let c = konst(g, r, &[6]);
                g.sub(c, x).unwrap()
            },
        },
        Primitive {
            name: "mul",
            shape: &[6],
            positive: false,
            build: |g, x, r| {
                let c = konst(g, r, &[6]);
                g.mul(x, c).unwrap()
            },
        },
        Primitive {
            name: "mul (self)",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.mul(x, x).unwrap(),
        },
        Primitive {
            name: "scale",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.scale(x, -1.7),
        },
        Primitive {
            name: "add_scalar",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.add_scalar(x, 0.3),
        },
        Primitive {
            name: "tanh",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.tanh(x),
        },
        Primitive {
            name: "relu",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.relu(x),
        },
        Primitive {
            name: "abs",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.abs(x),
        },
        Primitive {
            name: "log",
            shape: &[6],
            positive: true,
            build: |g, x, _| g.log(x).unwrap(),
        },
        Primitive {
            name: "sum",
            shape: &[2, 3],
            positive: false,
            build: |g, x, _| g.sum(x),
        },
        Primitive {
            name: "mean",
            shape: &[2, 3],
            positive: false,
            build: |g, x, _| g.mean(x),
        },
        Primitive {
            name: "l1_norm",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.l1_norm(x),
        },
        Primitive {
            name: "l2_norm_sq",
            shape: &[6],
            positive: false,
            build: |g, x, _| g.l2_norm_sq(x),
        },
        Primitive {
            name: "complex_modulus",
            shape: &[4, 2],
            positive: false,
            build: |g, x, _| g.complex_modulus(x).unwrap(),
        },
        Primitive {
            name: "matmul (lhs)",
            shape: &[3, 4],
            positive: false,
            build: |g, x, r| {
                let c = konst(g, r, &[4, 2]);
                g.matmul(x, c).unwrap()
            },
        },
        Primitive {
            name: "matmul (rhs)",
            shape: &[4, 2],
            positive: false,
            build: |g, x, r| {
                let c = konst(g, r, &[3, 4]);
                g.matmul(c, x).unwrap()
            },
        },
        Primitive {
            name: "reshape",
            shape: &[2, 3],
            positive: false,
            build: |g, x, _| g.reshape(x, &[3, 2]).unwrap(),
        },
        Primitive {
            name: "conv1d (input)",
            shape: &[2, 9],
            positive: false,
            build: |g, x, r| {
                let w = konst(g, r, &[3, 2, 3]);
                let b = konst(g, r, &[3]);
                g.conv1d(x, w, Some(b)).unwrap()
            },
        },
        Primitive {
            name: "conv1d (weight)",
            shape: &[3, 2, 5],
            positive: false,
            build: |g, w, r| {
                let x = konst(g, r, &[2, 9]);
                g.conv1d(x, w, None).unwrap()
            },
        },
        Primitive {
            name: "conv1d (bias)",
            shape: &[3],
            positive: false,
            build: |g, b, r| {
                let x = konst(g, r, &[2, 9]);
                let w = konst(g, r, &[3, 2, 3]);
                g.conv1d(x, w, Some(b)).unwrap()
            },
        },
        Primitive {
            name: "conv2d (input)",
            shape: &[2, 5, 6],
            positive: false,
            build: |g, x, r| {
                let w = konst(g, r, &[3, 2, 3, 3]);
                let b = konst(g, r, &[3]);
                g.conv2d(x, w, Some(b)).unwrap()
            },
        },
        Primitive {
            name: "conv2d (weight)",
            shape: &[3, 2, 3, 5],
            positive: false,
            build: |g, w, r| {
                let x = konst(g, r, &[2, 5, 6]);
                g.conv2d(x, w, None).unwrap()
            },
        },
        Primitive {
            name: "conv2d (bias)",
            shape: &[3],
            positive: false,
            build: |g, b, r| {
                let x = konst(g, r, &[2, 5, 6]);
                let w = konst(g, r, &[3, 2, 3, 3]);
                g.conv2d(x, w, Some(b)).unwrap()
            },
        },
        Primitive {
            name: "mean_pool_2x2",
            shape: &[2, 5, 7],
            positive: false,
            build: |g, x, _| g.mean_pool_2x2(x).unwrap(),
        },
        Primitive {
            name: "spatial_mean",
            shape: &[3, 4, 5],
            positive: false,
            build: |g, x, _| g.spatial_mean(x).unwrap(),
        },
    ]
}

/// Contracts a node with fixed random weights so every output element
/// contributes to the scalar being differentiated.
fn contract(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let w = konst(g, rng, &shape);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Smallest step tried when a probe straddles a kink.
const H_MIN: f64 = 1e-7;

#[derive(Default)]
struct ProbeStats {
    worst: f64,
    /// Probes whose central difference changed with the step, i.e. a ReLU or
    /// `abs` kink lay within `±h`, and were re-measured with a smaller step.
    refined: usize,
}

/// Worst relative error over `PROBES` probes; each probe draws a fresh point
/// and coordinate. `record` builds a scalar from a leaf.
fn probe_path<F>(seed: u64, tol: f64, mut point: impl FnMut(&mut ChaCha8Rng) -> Tensor, record: F) -> ProbeStats
where
    F: Fn(&mut Graph, Var, u64) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ProbeStats::default();
    for probe in 0..PROBES as u64 {
        let x = point(&mut rng);
        let i = rng.random_range(0..x.len());
        let aux = seed.wrapping_mul(1000).wrapping_add(probe);
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone());
        let out = record(&mut g, leaf, aux);
        let analytic = g.backward(out).unwrap().get(leaf).map_or(0.0, |d| d[i]);
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let c = g.constant(t.clone());
            let out = record(&mut g, c, aux);
            g.value(out).item().unwrap()
        };
        let mut h = H;
        let mut numeric = finite_diff_coord(&eval, &x, i, h);
        let mut err = relative_error(analytic, numeric, ABS_FLOOR);
        let mut refined = false;
        while err > tol && h > H_MIN {
            let finer = finite_diff_coord(&eval, &x, i, h / 10.0);
            if relative_error(numeric, finer, ABS_FLOOR) <= tol {
                // The function is smooth at this scale; the mismatch is real.
                break;
            }
            refined = true;
            h /= 10.0;
            numeric = finer;
            err = relative_error(analytic, numeric, ABS_FLOOR);
        }
        stats.refined += usize::from(refined);
        stats.worst = stats.worst.max(err);
    }
    stats
}

fn fixture_clip(seed: u64, len: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len)
        .map(|t| 0.5 * (t as f64 * 0.07).sin() + 0.2 * rng.random_range(-1.0..1.0))
        .collect();
    Waveform::new(samples, 16_000).unwrap()
}

#[test]
fn c1_gradient_integrity() {
    let _lock = serial();
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_primitive: f64 = 0.0;
    let mut refined = 0;
    for (k, p) in primitives().iter().enumerate() {
        let stats = probe_path(
            k as u64 + 1,
            1e-4,
            |rng| probe_point(rng, p.shape, p.positive),
            |g, x, aux| {
                let mut rng = ChaCha8Rng::seed_from_u64(aux);
                let out = (p.build)(g, x, &mut rng);
                contract(g, out, &mut rng)
            },
        );
        worst_primitive = worst_primitive.max(stats.worst);
        refined += stats.refined;
        if stats.worst > 1e-4 {
            failures.push(format!("{} rel {:.2e}", p.name, stats.worst));
        }
    }

    let model = PredictorModel::init(11).unwrap();
    let len = 1024;
    let x = fixture_clip(12, len);
    let x_tensor = Tensor::vector(x.samples().to_vec()).unwrap();
    let near_x = |rng: &mut ChaCha8Rng| {
        let data = x.samples().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        Tensor::vector(data).unwrap()
    };

    let spectral = probe_path(101, 1e-3, near_x, |g, xt, _| {
        let reference = g.constant(x_tensor.clone());
        let reference = model.spectrum(g, reference).unwrap();
        let s = model.spectrum(g, xt).unwrap();
        spectral_l1_node(g, s, reference).unwrap()
    });
    let predict = probe_path(102, 1e-3, near_x, |g, xt, aux| {
        let params = model.bind(g, false);
        let (_, score) = model.forward(g, xt, &params).unwrap();
        contract(g, score, &mut ChaCha8Rng::seed_from_u64(aux))
    });
    let cfg = AttackConfig::default();
    let target = target_from_score(model.predict(&x).unwrap()).unwrap();
    let objective = probe_path(
        103,
        1e-3,
        |rng| random_tensor(rng, &[len]),
        |g, z, _| attack_objective(g, &model, &x, z, target, &cfg).unwrap().objective,
    );
    for (name, stats) in [
        ("spectral_l1", &spectral),
        ("predict", &predict),
        ("attack_objective", &objective),
    ] {
        refined += stats.refined;
        if stats.worst > 1e-3 {
            failures.push(format!("{name} rel {:.2e}", stats.worst));
        }
    }

    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(120);
    let pass = failures.is_empty() && in_time;
    verdict(
        1,
        "gradient integrity",
        pass,
        &format!(
            "{} primitives worst rel {worst_primitive:.2e} (limit 1e-4); spectral_l1 {:.2e}, predict {:.2e}, \
             attack_objective {:.2e} (limit 1e-3); {PROBES} probes each, {refined} re-measured across a kink; \
             {elapsed:.1?} (limit 120 s)",
            primitives().len(),
            spectral.worst,
            predict.worst,
            objective.worst
        ),
    );
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
    assert!(in_time, "gradient suite took {elapsed:?}");
}

// ---------------------------------------------------------------------------
// 2-3. Attack structure and efficacy

#[test]
fn c2_structural_db_bound() {
    let _lock = serial();
    let exp = experiment();
    let bound = 20.0 * AttackConfig::default().amplitude.log10();
    let dbs: Vec<f64> = exp
        .adversarial
        .entries
        .iter()
        .map(|e| e.attack.as_ref().expect("attack succeeded numerically").db)
        .collect();
    let below_30 = dbs.iter().filter(|&&d| d < -30.0).count();
    let exceeded = dbs.iter().filter(|&&d| d > bound).count();
    let worst = dbs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pass = dbs.len() == 64 && below_30 == dbs.len() && exceeded == 0;
    verdict(
        2,
        "structural dB bound",
        pass,
        &format!(
            "{below_30}/{} attacks below -30 dB, loudest {worst:.2} dB, {exceeded} above the {bound:.2} dB bound",
            dbs.len()
        ),
    );
    assert_eq!(dbs.len(), 64);
    assert_eq!(below_30, dbs.len());
    assert_eq!(exceeded, 0);
}

#[test]
fn c3_attack_efficacy() {
    let _lock = serial();
    let exp = experiment();
    let results: Vec<_> = exp
        .adversarial
        .entries
        .iter()
        .map(|e| e.attack.as_ref().expect("attack succeeded numerically"))
        .collect();
    let n = results.len() as f64;
    let initial = results.iter().map(|r| r.initial_deviation()).sum::<f64>() / n;
    let last = results.iter().map(|r| r.deviation()).sum::<f64>() / n;
    let hits = results.iter().filter(|r| r.success).count();
    let ratio = last / initial;
    let in_time = exp.attack_train_time <= Duration::from_secs(600);
    let pass = ratio <= 0.1 && in_time;
    verdict(
        3,
        "attack efficacy",
        pass,
        &format!(
            "mean deviation {initial:.4} -> {last:.4} (ratio {ratio:.4}, limit 0.1) over {} clips, {hits} within tolerance; \
             wall time {:.1?} (limit 600 s)",
            results.len(),
            exp.attack_train_time
        ),
    );
    assert!(
        ratio <= 0.1,
        "mean deviation only fell to {ratio:.4} of its initial value"
    );
    assert!(in_time, "64 attacks took {:?}", exp.attack_train_time);
}

// ---------------------------------------------------------------------------
// 4. Target strategy

#[test]
fn c4_target_strategy() {
    let _lock = serial();
    let cases = [
        (QualityScore::new(5.0, 5.0, 5.0), QualityScore::new(1.0, 1.0, 1.0)),
        (QualityScore::new(1.0, 1.0, 1.0), QualityScore::new(5.0, 5.0, 5.0)),
        (QualityScore::new(3.1, 2.8, 3.2), QualityScore::new(1.0, 5.0, 1.0)),
        (QualityScore::new(3.0, 3.0, 3.0), QualityScore::new(5.0, 5.0, 5.0)),
    ];
    let mut wrong = Vec::new();
    for (y, want) in cases {
        let got = target_from_score(y).unwrap();
        if got != want {
            wrong.push(format!("{y:?} -> {got:?}, expected {want:?}"));
        }
    }
    verdict(
        4,
        "target strategy",
        wrong.is_empty(),
        &format!("{}/4 mapping cases exact", 4 - wrong.len()),
    );
    assert!(wrong.is_empty(), "{wrong:?}");
}

// ---------------------------------------------------------------------------
// 5. Adversarial retraining

#[test]
fn c5_defense_effect() {
    let _lock = serial();
    let exp = experiment();
    let r = &exp.report;
    let rates = r.pass_rate();
    let mut lines = Vec::new();
    let mut pass = exp.total_time <= Duration::from_secs(1800);
    for (j, name) in QualityScore::NAMES.iter().enumerate() {
        let ok = r.e_g[j] < r.e_f[j] && r.f_g[j] <= 0.2 && rates[j] > 0.5;
        pass &= ok;
        let stretch = if r.e_g[j] <= 0.5 * r.e_f[j] { "met" } else { "missed" };
        lines.push(format!(
            "{name}: E_f {:.4} E_g {:.4} F_g {:.4} pass rate {:.2} (stretch E_g <= E_f/2 {stretch})",
            r.e_f[j], r.e_g[j], r.f_g[j], rates[j]
        ));
    }
    verdict(
        5,
        "defense effect",
        pass,
        &format!(
            "{} held-out clips; {}; total runtime {:.1?} (limit 1800 s, of which training f {:.1?})",
            r.n,
            lines.join("; "),
            exp.total_time,
            exp.train_time
        ),
    );
    for (j, name) in QualityScore::NAMES.iter().enumerate() {
        assert!(
            r.e_g[j] < r.e_f[j],
            "{name}: E_g {} not below E_f {}",
            r.e_g[j],
            r.e_f[j]
        );
        assert!(r.f_g[j] <= 0.2, "{name}: F_g {}", r.f_g[j]);
        assert!(rates[j] > 0.5, "{name}: pass rate {}", rates[j]);
    }
    assert!(exp.total_time <= Duration::from_secs(1800), "took {:?}", exp.total_time);
}

// ---------------------------------------------------------------------------
// 6. Listening-test arithmetic

#[test]
fn c6_human_study_arithmetic() {
    let _lock = serial();
    let z = human_zscore(17, 30).unwrap();
    let p = one_tailed_p(z);
    let identical: f64 = (35.0 - 10.0) / 35.0;
    let summary = study_summary(&example_table()).unwrap();
    let table_fraction = summary
        .pair_stats
        .iter()
        .filter(|s| s.b_count == 10)
        .map(|s| s.believing_identical)
        .fold(f64::NAN, f64::min);
    let pass = (z - 0.7303).abs() <= 1e-4
        && (p - 0.2327).abs() <= 1e-4
        && (identical - 0.7143).abs() <= 1e-4
        && (table_fraction - 0.7143).abs() <= 1e-4
        && (summary.max_z - z).abs() < 1e-12;
    verdict(
        6,
        "human-study arithmetic",
        pass,
        &format!(
            "z(17, 30) = {z:.6}, one-tailed p = {p:.6}, 10-of-35 B pair believed identical by {:.4}% \
             (example table: {:.4}%, max z {:.4})",
            100.0 * identical,
            100.0 * table_fraction,
            summary.max_z
        ),
    );
    assert!((z - 0.7303).abs() <= 1e-4, "z = {z}");
    assert!((p - 0.2327).abs() <= 1e-4, "p = {p}");
    assert!((identical - 0.7143).abs() <= 1e-4);
    assert!((table_fraction - 0.7143).abs() <= 1e-4);
    assert!((summary.max_z - z).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// 7. Metric identities

#[test]
fn c7_metric_identities() {
    let _lock = serial();
    let exp = experiment();
    let same = compute_errors(&exp.teacher, &exp.teacher, &exp.test_pairs).unwrap();
    let bits = |a: [f64; 3]| a.map(f64::to_bits);
    let identity = bits(same.e_f) == bits(same.e_g) && same.f_g.iter().all(|v| v.to_bits() == 0);

    let mut label_mismatches = 0;
    for (entry, clip) in exp.adversarial.entries.iter().zip(&exp.labeled.clips) {
        let same_label = entry.clip_id == clip.clip_id
            && bits(entry.label.to_array()) == bits(clip.label.to_array())
            && entry
                .attack
                .as_ref()
                .map_or(true, |r| bits(r.y_orig.to_array()) == bits(clip.label.to_array()));
        if !same_label {
            label_mismatches += 1;
        }
    }
    let pairs = exp.adversarial.pairs(&exp.labeled).unwrap();
    for ((_, y), clip) in pairs.iter().zip(&exp.labeled.clips) {
        if bits(y.to_array()) != bits(clip.label.to_array()) {
            label_mismatches += 1;
        }
    }
    let complete = exp.adversarial.len() == exp.labeled.len() && pairs.len() == exp.labeled.len();
    let student_differs = exp.student.weights_digest() != exp.teacher.weights_digest();
    let pass = identity && label_mismatches == 0 && complete;
    verdict(
        7,
        "metric identities",
        pass,
        &format!(
            "g = f gives E_g {} E_f bitwise and F_g = {:?}; {} AD labels checked against D, {label_mismatches} mismatches",
            if bits(same.e_f) == bits(same.e_g) { "==" } else { "!=" },
            same.f_g,
            exp.adversarial.len()
        ),
    );
    assert!(identity, "{same:?}");
    assert_eq!(label_mismatches, 0);
    assert!(complete);
    assert!(student_differs, "retraining left the weights unchanged");
}

// ---------------------------------------------------------------------------
// 8. Determinism of the whole command-line pipeline

const SMALL_RUN: &str = r#"
seed = 21

[synth]
n_train = 6
n_test = 3
clip_seconds = 0.25

[train]
epochs = 3

[attack]
max_iters = 25
learning_rate = 0.05

[advtrain]
epochs = 2
"#;

fn advmos(out: &Path, config: &Path, workers: usize, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_advmos"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .arg("--workers")
        .arg(workers.to_string())
        .args(args)
        .output()
        .expect("run advmos");
    assert!(
        status.status.success(),
        "advmos {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn run_pipeline(out: &Path, config: &Path, workers: usize) {
    advmos(out, config, workers, &["synth"]);
    advmos(out, config, workers, &["train-predictor"]);
    advmos(out, config, workers, &["attack", "--split", "train"]);
    advmos(out, config, workers, &["attack", "--split", "test"]);
    advmos(out, config, workers, &["advtrain"]);
    advmos(out, config, workers, &["eval"]);
    advmos(out, config, workers, &["stats"]);
    let clip = out.join("corpus/synth/test/test_0000.wav");
    let sidecar = out.join("attacks/test/test_0000.adv.json");
    let (clip, sidecar) = (clip.to_str().unwrap(), sidecar.to_str().unwrap());
    advmos(
        out,
        config,
        workers,
        &["spectrogram-dump", "--input", clip, "--adversarial", sidecar],
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                acc.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

#[test]
fn c8_pipeline_determinism() {
    let _lock = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&a, &config, 1);
    run_pipeline(&b, &config, 2);
    let (ta, tb) = (tree(&a), tree(&b));
    let same_files = ta.keys().eq(tb.keys());
    let differing: Vec<_> = ta
        .iter()
        .filter(|(k, v)| tb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let expected = [
        "models/g.aqpm",
        "eval/robustness.json",
        "attacks/train/summary.csv",
        "stats/study_summary.json",
    ];
    let complete = expected.iter().all(|p| ta.contains_key(Path::new(p)));
    let pass = same_files && differing.is_empty() && complete;
    verdict(
        8,
        "determinism",
        pass,
        &format!(
            "{} output files from two runs (1 and 2 workers), {} differ",
            ta.len(),
            differing.len()
        ),
    );
    assert!(complete, "missing outputs; have {:?}", ta.keys().collect::<Vec<_>>());
    assert!(same_files, "file sets differ");
    assert!(differing.is_empty(), "differing files: {differing:?}");
}
