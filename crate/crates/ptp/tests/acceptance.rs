//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs serially so the timing budgets measure a single core.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ptp::dataset::synthetic;
use ptp_core::data::CategoryCatalog;
use ptp_core::encoders::{FrozenFusionEncoder, FrozenTextEncoder, FusionEncoderConfig, TextEncoderConfig};
use ptp_core::eval::{run_protocol, Dataset, Method, MethodSpec, RunResult, SeedRun};
use ptp_core::model::{
    mixture, regularizer_r1, regularizer_r2, similarity_weights, Backbone, EncoderMode, ModelConfig, PtpModel,
};
use ptp_core::rng::{self, EngineRng};
use ptp_core::tensorad::{check_gradients, Tape, Tensor};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 200;
const VM_MIN: f64 = 0.95;
const PTP_MIN: f64 = 0.90;
const E2E_BUDGET: Duration = Duration::from_secs(180);

type Outcome = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            false
        }
    }
}

fn small_model(mode: EncoderMode, k: usize, c: usize, m: usize, seed: u64) -> (PtpModel, ptp_core::model::Features) {
    let (d_tok, d_lat) = (8, 6);
    let backbone = match mode {
        EncoderMode::SingleEncoder => Backbone::Fusion(Arc::new(
            FrozenFusionEncoder::new(FusionEncoderConfig {
                vocab_size: 64,
                d_tok,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 4,
                d_lat,
                pseudo_tokens: 4,
                seed,
            })
            .unwrap(),
        )),
        _ => Backbone::Text(Arc::new(
            FrozenTextEncoder::new(TextEncoderConfig {
                vocab_size: 64,
                d_tok,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 4,
                d_lat,
                seed,
            })
            .unwrap(),
        )),
    };
    let mut r = rng::stream(seed, 7);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| rng::normal_vec(&mut r, d_lat, 1.0)).collect();
    let feats = backbone.features(&Tensor::from_rows(&rows).unwrap()).unwrap();
    let config = ModelConfig {
        prompt_len: m,
        lambda: 1.0,
        seed,
        ..ModelConfig::new(mode, k)
    };
    let catalog = CategoryCatalog::synthetic(c, 64).unwrap();
    (PtpModel::new(config, backbone, &catalog, &feats).unwrap(), feats)
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (mode, seed) in [(EncoderMode::BiEncoder, 1), (EncoderMode::SingleEncoder, 2)] {
        let (model, feats) = small_model(mode, 3, 4, 3, seed);
        let rows = [0, 1, 2, 3, 4, 5];
        let labels = [0, 1, 2, 3, 1, 2];
        let r = check_gradients(model.params(), 1e-5, GRAD_TOL, |tape, vars| {
            Ok(model.loss(tape, vars, &feats, &rows, &labels)?.total)
        })
        .map_err(|e| e.to_string())?;
        if r.entries_checked != model.params().numel() {
            return Err(format!("{} of {} entries checked", r.entries_checked, model.params().numel()));
        }
        if !r.passed() {
            return Err(format!("{} mode: {r:?}", mode.as_str()));
        }
        worst = worst.max(r.max_rel_error);
        entries += r.entries_checked;
    }
    let took = start.elapsed();
    check(
        took < Duration::from_secs(10),
        format!("{entries} entries, max rel error {worst:.2e} <= {GRAD_TOL:e}, {took:.2?}"),
        format!("took {took:.2?}, budget 10 s"),
    )
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rows(r: &mut EngineRng, n: usize, d: usize, std: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng::normal_vec(r, d, std)).collect()
}

/// Error relative to `max(1, |oracle|)`, so large values are held to the
/// same number of significant digits as unit-scale ones.
fn deviation(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| (g - w).abs() / w.abs().max(1.0)).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2024, 1);
    let mut worst = [0.0f64; 4];
    for _ in 0..ORACLE_INSTANCES {
        let n = r.random_range(1..=10);
        let k = r.random_range(1..=10);
        let c = r.random_range(1..=10);
        let d = r.random_range(1..=10);
        let latents = rows(&mut r, n, d, 1.0);
        let protos = rows(&mut r, k, d, 1.5);
        let normalized: Vec<Vec<f64>> = latents.iter().cloned().map(unit).collect();

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&protos).unwrap());
        let x = tape.constant(Tensor::from_rows(&latents).unwrap());
        let xn = tape.constant(Tensor::from_rows(&normalized).unwrap());
        let w = similarity_weights(&mut tape, xn, p).unwrap();
        let r1 = regularizer_r1(&mut tape, p, x).unwrap();
        let r2 = regularizer_r2(&mut tape, p, x).unwrap();

        let w_want: Vec<f64> = normalized
            .iter()
            .flat_map(|x| softmax(&protos.iter().map(|p| dot(x, p)).collect::<Vec<_>>()))
            .collect();
        let r1_want = protos
            .iter()
            .map(|p| latents.iter().map(|x| sq_dist(p, x)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / k as f64;
        let r2_want = latents
            .iter()
            .map(|x| protos.iter().map(|p| sq_dist(x, p)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / n as f64;

        // Per-prototype category rows are probability vectors.
        let cat_rows: Vec<Vec<f64>> = (0..n * k)
            .map(|_| softmax(&rng::normal_vec(&mut r, c, 2.0)))
            .collect();
        let flat: Vec<f64> = cat_rows.iter().flatten().copied().collect();
        let cr = tape.constant(Tensor::new(&[n, k, c], flat).unwrap());
        let mix = mixture(&mut tape, w, cr).unwrap();
        let w_got = tape.value(w).data().to_vec();
        let mut mix_want = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                let s: f64 = (0..k).map(|q| w_got[i * k + q] * cat_rows[i * k + q][j]).sum();
                mix_want.push(s.clamp(0.0, 1.0));
            }
        }

        let devs = [
            deviation(&w_got, &w_want),
            deviation(&[tape.value(r1).item()], &[r1_want]),
            deviation(&[tape.value(r2).item()], &[r2_want]),
            deviation(tape.value(mix).data(), &mix_want),
        ];
        for (w, d) in worst.iter_mut().zip(devs) {
            *w = w.max(d);
        }
    }
    let took = start.elapsed();
    let names = ["similarity", "R1", "R2", "mixture"];
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    if let Some((n, w)) = names.iter().zip(worst).find(|(_, w)| *w > ORACLE_TOL) {
        return Err(format!("{n} deviates by {w:e} > {ORACLE_TOL:e}"));
    }
    check(
        took < Duration::from_secs(5),
        format!("{ORACLE_INSTANCES} instances, max deviation {} in {took:.2?}", detail.join(", ")),
        format!("took {took:.2?}, budget 5 s"),
    )
}

fn parameter_accounting() -> Outcome {
    let (m, k, d) = (16, 5, 512);
    let enc = FrozenTextEncoder::new(TextEncoderConfig {
        d_tok: d,
        d_lat: d,
        ..TextEncoderConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let backbone = Backbone::Text(Arc::new(enc));
    let mut r = rng::stream(0, 3);
    let feats = backbone.features(&Tensor::from_rows(&rows(&mut r, k, d, 1.0)).unwrap()).unwrap();
    let catalog = CategoryCatalog::synthetic(3, 1024).unwrap();
    let model = PtpModel::new(ModelConfig::new(EncoderMode::BiEncoder, k), backbone, &catalog, &feats)
        .map_err(|e| e.to_string())?;
    let enumerated: usize = model.params().iter().map(|p| p.tensor().len()).sum();
    let formula = m * d * k + k * d;
    check(
        enumerated == formula && formula == 43_520 && model.param_count() == enumerated,
        format!("{enumerated} learnable entries = m*d_tok*K + K*d_lat = 43520"),
        format!("enumerated {enumerated}, reported {}, formula {formula}", model.param_count()),
    )
}

struct Separable {
    data: Dataset,
    vm: RunResult,
    ptp: (RunResult, Vec<SeedRun>),
    sp: (RunResult, Vec<SeedRun>),
    lp: RunResult,
    elapsed: Duration,
}

fn protocol(spec: &MethodSpec, data: &Dataset) -> Result<(RunResult, Vec<SeedRun>), String> {
    run_protocol(spec, data, 16, &SEEDS).map_err(|e| e.to_string())
}

fn bi(method: Method) -> MethodSpec {
    MethodSpec::new(method, EncoderMode::BiEncoder)
}

fn run_separable() -> Result<Separable, String> {
    let data = synthetic("separable", None).map_err(|e| e.to_string())?.0;
    let start = Instant::now();
    let vm = protocol(&bi(Method::Vm), &data)?.0;
    let ptp = protocol(&bi(Method::Ptp), &data)?;
    let sp = protocol(&bi(Method::Sp), &data)?;
    let elapsed = start.elapsed();
    // The probe is the ceiling reference, outside the timed budget.
    let lp = protocol(&bi(Method::Lp), &data)?.0;
    Ok(Separable {
        data,
        vm,
        ptp,
        sp,
        lp,
        elapsed,
    })
}

fn separable_end_to_end(s: &Separable) -> Outcome {
    let (vm, ptp, sp) = (s.vm.acc_mean, s.ptp.0.acc_mean, s.sp.0.acc_mean);
    let detail = format!(
        "VM {vm:.4}, PTP(K=5) {ptp:.4} {:?}, SP {sp:.4}, LP ceiling {:.4}, {:.1?}",
        s.ptp.0.acc_per_seed, s.lp.acc_mean, s.elapsed
    );
    check(
        vm >= VM_MIN && ptp >= PTP_MIN && ptp >= sp && s.elapsed < E2E_BUDGET,
        detail.clone(),
        format!("{detail}; need VM >= {VM_MIN}, PTP >= {PTP_MIN}, PTP >= SP, under {E2E_BUDGET:?}"),
    )
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn sp_reduction(s: &Separable) -> Outcome {
    let spec = MethodSpec {
        k: 1,
        lambda: 0.0,
        ..bi(Method::Ptp)
    };
    let (_, k1) = protocol(&spec, &s.data)?;
    for (a, b) in s.sp.1.iter().zip(&k1) {
        let fields = |r: &SeedRun| -> Vec<f64> {
            r.trace
                .iter()
                .flat_map(|e| [e.epoch as f64, e.mean_loss, e.r1, e.r2, e.data_loss])
                .collect()
        };
        if !same_bits(&fields(a), &fields(b)) {
            return Err(format!("seed {}: training traces differ", a.seed));
        }
        if a.predictions != b.predictions {
            return Err(format!("seed {}: predictions differ", a.seed));
        }
        let (pa, pb) = (a.fitted.model().unwrap().params(), b.fitted.model().unwrap().params());
        if !pa.iter().zip(pb.iter()).all(|(x, y)| same_bits(x.tensor().data(), y.tensor().data())) {
            return Err(format!("seed {}: final parameters differ", a.seed));
        }
    }
    check(
        s.sp.1.len() == 3 && k1.len() == 3,
        format!(
            "seeds {SEEDS:?}: {} epochs each, traces, predictions and parameters bit-identical",
            k1[0].trace.len()
        ),
        "missing seeds".into(),
    )
}

fn mean_r2(runs: &[SeedRun]) -> Result<f64, String> {
    let v: Option<Vec<f64>> = runs.iter().map(|r| r.train_r2).collect();
    let v = v.ok_or("missing train R2")?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn regularizer_effect(s: &Separable) -> Outcome {
    let spec = MethodSpec {
        lambda: 0.0,
        ..bi(Method::Ptp)
    };
    let (_, plain) = protocol(&spec, &s.data)?;
    let with = mean_r2(&s.ptp.1)?;
    let without = mean_r2(&plain)?;
    let detail = format!("train-split R2 with lambda=1 {with:.3} vs lambda=0 {without:.3} (3-seed means)");
    check(with < without, detail.clone(), detail)
}

fn ptp_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ptp"))
        .args(args)
        .env_remove("PTP_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn report_without_wall(dir: &Path) -> Result<serde_json::Value, String> {
    let bytes = fs::read(dir.join("report.json")).map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    for row in v["rows"].as_array_mut().ok_or("no rows")? {
        row.as_object_mut().unwrap().remove("wall_ms");
    }
    Ok(v)
}

fn csv_without_wall(dir: &Path) -> Result<String, String> {
    let text = fs::read_to_string(dir.join("report.csv")).map_err(|e| e.to_string())?;
    // wall_ms is the last column.
    Ok(text.lines().map(|l| l.rsplit_once(',').map_or(l, |(h, _)| h)).collect::<Vec<_>>().join("\n"))
}

fn same_outputs(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    if report_without_wall(a)? != report_without_wall(b)? || csv_without_wall(a)? != csv_without_wall(b)? {
        return Err(format!("reports under {} and {} differ", a.display(), b.display()));
    }
    for f in files {
        if fs::read(a.join(f)).map_err(|e| e.to_string())? != fs::read(b.join(f)).map_err(|e| e.to_string())? {
            return Err(format!("{f} differs"));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name);
    let s = |path: &Path| path.to_str().unwrap().to_string();
    let data = p("data");
    ptp_bin(&["gen-data", "--preset", "tiny", "--text", "--out", &s(&data)])?;
    let mut checked = 0;
    let settings: [(&str, &str, &[&str]); 6] = [
        ("ptp", "bi", &["--k", "3", "--m", "2"]),
        ("ptp", "single", &["--k", "2", "--m", "2"]),
        ("sp", "bi", &["--m", "2"]),
        ("vm", "bi", &[]),
        ("lp", "bi", &[]),
        ("mcp", "bi", &[]),
    ];
    for (method, mode, extra) in settings {
        let tag = format!("{method}-{mode}");
        for run in ["a", "b"] {
            let mut args = vec![
                "train".to_string(),
                "--data".into(),
                s(&data),
                "--method".into(),
                method.into(),
                "--mode".into(),
                mode.into(),
                "--shots".into(),
                "4".into(),
                "--epochs".into(),
                "3".into(),
                "--seeds".into(),
                "0,1,2".into(),
                "--out".into(),
                s(&p(&format!("{tag}-train-{run}"))),
            ];
            args.extend(extra.iter().map(|a| a.to_string()));
            ptp_bin(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
            let ck = s(&p(&format!("{tag}-train-{run}")));
            ptp_bin(&["eval", "--data", &s(&data), "--checkpoints", &ck, "--out", &s(&p(&format!("{tag}-eval-{run}")))])?;
        }
        same_outputs(
            &p(&format!("{tag}-train-a")),
            &p(&format!("{tag}-train-b")),
            &["trace.jsonl", "predictions.jsonl"],
        )?;
        same_outputs(&p(&format!("{tag}-eval-a")), &p(&format!("{tag}-eval-b")), &["predictions.jsonl"])?;
        checked += 2;
    }
    for run in ["a", "b"] {
        ptp_bin(&["eval", "--data", &s(&data), "--out", &s(&p(&format!("mcp-direct-{run}")))])?;
    }
    same_outputs(&p("mcp-direct-a"), &p("mcp-direct-b"), &["predictions.jsonl"])?;
    checked += 1;
    Ok(format!("{checked} train/eval command pairs byte-identical apart from wall_ms"))
}

fn sweep_protocol() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("sweep");
    let start = Instant::now();
    ptp_bin(&[
        "sweep",
        "--preset",
        "separable",
        "--shots",
        "16",
        "--k",
        "3,5,7",
        "--lambda",
        "0,0.5,1,2",
        "--seeds",
        "0,1",
        "--epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ])?;
    let report = ptp::report::read_report(&out.join("report.json")).map_err(|e| e.to_string())?;
    let mut expected = Vec::new();
    for k in [3, 5, 7] {
        for l in [0.0, 0.5, 1.0, 2.0] {
            expected.push((Some(k), Some(l)));
        }
    }
    let got: Vec<_> = report.rows.iter().map(|r| (r.k, r.lambda)).collect();
    let averaged = report.rows.iter().all(|r| {
        r.seeds == [0, 1] && (r.acc_mean - r.acc_per_seed.iter().sum::<f64>() / 2.0).abs() < 1e-12
    });
    check(
        got == expected && averaged && report.failures.is_empty(),
        format!("12 rows in K x lambda order, each averaged over 2 seeds, {:.1?}", start.elapsed()),
        format!("rows {got:?}, failures {:?}", report.failures),
    )
}

fn main() {
    let mut ok = true;
    ok &= report("gradient integrity", gradient_integrity);
    ok &= report("oracle equivalence", oracle_equivalence);
    ok &= report("parameter accounting", parameter_accounting);
    match run_separable() {
        Ok(s) => {
            ok &= report("separable end-to-end", || separable_end_to_end(&s));
            ok &= report("SP reduction", || sp_reduction(&s));
            ok &= report("regularizer effect", || regularizer_effect(&s));
        }
        Err(e) => {
            for name in ["separable end-to-end", "SP reduction", "regularizer effect"] {
                println!("FAIL {name}: separable runs failed: {e}");
            }
            ok = false;
        }
    }
    ok &= report("determinism", determinism);
    ok &= report("sweep protocol", sweep_protocol);
    if !ok {
        std::process::exit(1);
    }
}
