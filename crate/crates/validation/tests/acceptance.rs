//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! Criteria that need the promoter datasets look in `$CAPSPROM_DATA_DIR`
//! (default `./data`) and fail when the files are absent. Build with
//! `--release` when the data is present.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::ops::ControlFlow;
use std::path::Path;
use std::time::{Duration, Instant};

use capsprom_core::capsnet::{CapsProm, CapsPromConfig, MarginLossConfig, RoutingTrace};
use capsprom_core::data::{
    default_data_dir, load_dataset, stratified_kfold, Dataset, DatasetKey, FoldPlan, LoadOptions,
};
use capsprom_core::metrics::ConfusionMatrix;
use capsprom_core::model::{Model, ModelKind};
use capsprom_core::tensor::{Graph, Tensor, Var};
use capsprom_core::train::{
    cross_validate, history_csv, metrics_csv, train_with, ExperimentConfig, ExperimentResult, RunOptions,
    TrainConfig,
};
use common::{
    away_from_zero, brute_force_metrics, gradcheck, naive_conv1d, naive_maxpool, random_tensor, rng, toy_capsprom,
    weighted_sum, write_synthetic_dataset,
};
use rand::Rng;

const PRIMITIVE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-10;
const COUPLING_TOL: f64 = 1e-6;
const COSINE_TOL: f64 = 1e-9;
const OVERFIT_ACC: f64 = 0.99;
const OVERFIT_EPOCHS: usize = 200;
const CV_BUDGET: Duration = Duration::from_secs(30 * 60);
const CNN_MCC: f64 = 0.70;
const CAPS_MCC: f64 = 0.65;
const TATA_SN: f64 = 0.90;
const TATA_SP: f64 = 0.93;
const TATA_BUDGET: Duration = Duration::from_secs(2 * 60 * 60);
const SMOKE_SAMPLES: usize = 2000;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(5)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    let mut check = |inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        worst = worst.max(gradcheck(inputs, 1e-5, f));
    };
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4], &mut r);
    let nz = away_from_zero(&[3, 1], &mut r);
    check(&[a.clone(), b.clone()], &|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y, 1)
    });
    check(&[a.clone(), nz.clone()], &|g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        weighted_sum(g, y, 2)
    });
    check(&[a.clone(), b.clone()], &|g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 3)
    });
    check(&[a.clone(), nz], &|g, v| {
        let y = g.div(v[0], v[1]).unwrap();
        weighted_sum(g, y, 4)
    });
    let x = away_from_zero(&[5, 3], &mut r);
    check(&[x.clone()], &|g, v| {
        let y = g.square(v[0]);
        weighted_sum(g, y, 5)
    });
    check(&[x.clone()], &|g, v| {
        let y = g.affine(v[0], 0.7, -0.1);
        weighted_sum(g, y, 6)
    });
    check(&[x.clone()], &|g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 7)
    });
    check(&[x.clone()], &|g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y, 8)
    });
    let m = random_tensor(&[3, 5], &mut r);
    check(&[x.clone(), m], &|g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    for stride in 1..=3 {
        let input = random_tensor(&[11, 3], &mut r);
        let k = random_tensor(&[4, 3, 5], &mut r);
        let bias = random_tensor(&[5], &mut r);
        check(&[input, k, bias], &|g, v| {
            let y = g.conv1d(v[0], v[1], v[2], stride).unwrap();
            weighted_sum(g, y, 10)
        });
    }
    let pooled = Tensor::new(vec![8, 2], (0..16).map(|i| f64::from((i * 7) % 16) * 0.1).collect()).unwrap();
    check(&[pooled], &|g, v| {
        let y = g.max_pool1d(v[0], 2).unwrap();
        weighted_sum(g, y, 11)
    });
    let t = random_tensor(&[3, 4, 2], &mut r);
    for axis in 0..3 {
        check(&[t.clone()], &|g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            weighted_sum(g, y, 12)
        });
        check(&[t.clone()], &|g, v| {
            let y = g.sum(v[0], axis).unwrap();
            weighted_sum(g, y, 13)
        });
        check(&[t.clone()], &|g, v| {
            let y = g.mean(v[0], axis).unwrap();
            weighted_sum(g, y, 14)
        });
        check(&[t.clone()], &|g, v| {
            let y = g.l2_norm(v[0], axis).unwrap();
            weighted_sum(g, y, 15)
        });
    }
    check(&[t.clone()], &|g, v| {
        let y = g.reshape(v[0], &[6, 4]).unwrap();
        weighted_sum(g, y, 16)
    });
    check(&[t.clone()], &|g, v| {
        let y = g.square(v[0]);
        g.mean_all(y)
    });
    check(&[random_tensor(&[4, 8], &mut r)], &|g, v| {
        let y = g.squash(v[0], 1e-9).unwrap();
        weighted_sum(g, y, 17)
    });
    check(&[random_tensor(&[4, 3], &mut r)], &|g, v| {
        let y = g.embedding(v[0], &[1, 0, 3, 3, 2]).unwrap();
        weighted_sum(g, y, 18)
    });
    check(&[random_tensor(&[5, 2, 4, 3], &mut r), random_tensor(&[5, 3], &mut r)], &|g, v| {
        let y = g.batched_matvec(v[0], v[1]).unwrap();
        weighted_sum(g, y, 19)
    });
    check(&[Tensor::from_vec(vec![-2.0, -0.3, 0.4, 3.0])], &|g, v| {
        let y = g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        weighted_sum(g, y, 20)
    });
    let primitive = worst;

    let cfg = toy_capsprom();
    let caps = cfg.num_primary_capsules();
    let model = CapsProm::new(cfg, MarginLossConfig::default(), 3).unwrap();
    let tokens: Vec<u8> = (0..20).map(|_| r.gen_range(0..4)).collect();
    let params: Vec<Tensor> = model
        .params()
        .tensors()
        .iter()
        .map(|p| {
            let mut x = random_tensor(p.shape(), &mut r);
            x.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            x
        })
        .collect();
    let mut end_to_end: f64 = 0.0;
    for label in [0u8, 1] {
        end_to_end =
            end_to_end.max(gradcheck(&params, 1e-5, |g, v| model.example_loss(g, v, &tokens, label).unwrap()));
    }
    let elapsed = start.elapsed();
    ensure(
        primitive < PRIMITIVE_TOL && end_to_end < END_TO_END_TOL && caps == 4 && elapsed < GRADCHECK_BUDGET,
        format!(
            "primitive max rel err {primitive:.2e} (< {PRIMITIVE_TOL:e}), end-to-end {end_to_end:.2e} (< {END_TO_END_TOL:e}), \
             {caps} primary capsules, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut r = rng(1002);
    let mut conv_err: f64 = 0.0;
    for _ in 0..200 {
        let cin = r.gen_range(1..5);
        let cout = r.gen_range(1..6);
        let k = r.gen_range(1..6);
        let stride = r.gen_range(1..4);
        let len = r.gen_range(k..k + 20);
        let x = random_tensor(&[len, cin], &mut r);
        let w = random_tensor(&[k, cin, cout], &mut r);
        let b = random_tensor(&[cout], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
        let y = g.conv1d(xv, wv, bv, stride).unwrap();
        let expect = naive_conv1d(&x, &w, &b, stride);
        conv_err = g.value(y).iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(conv_err, f64::max);
    }
    let mut pool_err: f64 = 0.0;
    for _ in 0..200 {
        let window = r.gen_range(1..5);
        let len = r.gen_range(window..window + 25);
        let x = random_tensor(&[len, r.gen_range(1..5)], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = g.max_pool1d(xv, window).unwrap();
        let expect = naive_maxpool(&x, window);
        if expect.len() != g.value(y).len() {
            return Err(format!("maxpool length {} vs {}", g.value(y).len(), expect.len()));
        }
        pool_err = g.value(y).iter().zip(&expect).map(|(a, e)| (a - e).abs()).fold(pool_err, f64::max);
    }
    let mut metric_mismatch = 0;
    for _ in 0..100 {
        let n = r.gen_range(1..=1000);
        let p_pos = r.gen_range(0.0..1.0);
        let pairs: Vec<(u8, u8)> = (0..n).map(|_| (u8::from(r.gen_bool(p_pos)), r.gen_range(0..2))).collect();
        let m = ConfusionMatrix::from_pairs(pairs.iter().copied()).unwrap().compute().unwrap();
        if m.values() != brute_force_metrics(&pairs) {
            metric_mismatch += 1;
        }
    }
    ensure(
        conv_err <= ORACLE_TOL && pool_err <= ORACLE_TOL && metric_mismatch == 0,
        format!("conv1d max err {conv_err:.1e}, maxpool max err {pool_err:.1e}, metrics mismatches {metric_mismatch}/100"),
    )
}

fn criterion_3() -> Outcome {
    let mut r = rng(1003);
    let base = CapsProm::new(toy_capsprom(), MarginLossConfig::default(), 4).unwrap();
    let mut coupling_dev: f64 = 0.0;
    let mut norm_range = (f64::INFINITY, f64::NEG_INFINITY);
    for pass in 0..100 {
        let mut model = base.clone();
        let scale = [0.05, 0.5, 2.0][pass % 3];
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0) * scale);
        }
        let tokens: Vec<u8> = (0..20).map(|_| r.gen_range(0..4)).collect();
        let mut g = Graph::new();
        let bound = model.params().bind_frozen(&mut g);
        let mut trace = RoutingTrace::default();
        let out = model.forward(&mut g, &bound, &tokens, Some(&mut trace)).unwrap();
        for c in &trace.couplings {
            for row in c.chunks_exact(2) {
                coupling_dev = coupling_dev.max((row[0] + row[1] - 1.0).abs());
            }
        }
        let cfg = model.config();
        for (var, dim) in [(out.primary, cfg.capsule_dim), (out.caps, cfg.digit_dim)] {
            for cap in g.value(var).chunks_exact(dim) {
                let n = cap.iter().map(|v| v * v).sum::<f64>().sqrt();
                norm_range = (norm_range.0.min(n), norm_range.1.max(n));
            }
        }
    }
    let mut min_cos: f64 = 1.0;
    for i in 0..200 {
        let scale = 10f64.powi(i % 7 - 3);
        let s: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0) * scale).collect();
        let t = Tensor::new(vec![1, 8], s.clone()).unwrap();
        let mut g = Graph::new();
        let sv = g.constant(&t);
        let v = g.squash(sv, 1e-9).unwrap();
        let v = g.value(v);
        let dot: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
        let ns = s.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        min_cos = min_cos.min(dot / (ns * nv));
    }
    ensure(
        coupling_dev <= COUPLING_TOL && norm_range.0 >= 0.0 && norm_range.1 < 1.0 && min_cos >= 1.0 - COSINE_TOL,
        format!(
            "max |Σc - 1| {coupling_dev:.1e}, capsule norms in [{:.3e}, {:.6}], min squash cosine {min_cos:.12}",
            norm_range.0, norm_range.1
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut found = Vec::new();
    for len in [81usize, 251] {
        let model = CapsProm::new(CapsPromConfig::for_length(len), MarginLossConfig::default(), 5).unwrap();
        let tokens: Vec<u8> = (0..len).map(|i| (i % 4) as u8).collect();
        let mut g = Graph::new();
        let bound = model.params().bind_frozen(&mut g);
        let primary = model.primary_caps(&mut g, &bound, &tokens).map_err(|e| e.to_string())?;
        found.push((len, g.shape(primary)[0], model.config().num_primary_capsules()));
    }
    ensure(
        found == [(81, 1056, 1056), (251, 3776, 3776)],
        found
            .iter()
            .map(|(l, n, _)| format!("{l} bp -> {n} primary capsules"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn synthetic(dir: &Path) -> Dataset {
    write_synthetic_dataset(dir, DatasetKey::Bacillus, 81, 40, 60, 17);
    load_dataset(DatasetKey::Bacillus, dir, &LoadOptions::default()).unwrap()
}

fn quick_config(model: ModelKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DatasetKey::Bacillus, model);
    if model == ModelKind::CapsProm {
        cfg.capsprom = Some(CapsPromConfig {
            embedding_dim: 4,
            conv_filters: 16,
            primary_filters: 32,
            head_hidden: Some(8),
            ..CapsPromConfig::default()
        });
    }
    cfg.seed = 2024;
    cfg.train.max_epochs = 3;
    cfg.train.patience = 2;
    cfg.train.batch_size = 16;
    cfg
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synthetic(dir.path());
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [ModelKind::CnnProm, ModelKind::CapsProm] {
        let cfg = quick_config(kind);
        let opts = RunOptions {
            jobs: jobs(),
            keep_models: false,
        };
        let (a, pa) = cross_validate(&cfg, &data, None, &opts).map_err(|e| e.to_string())?;
        let (b, pb) = cross_validate(&cfg, &data, None, &opts).map_err(|e| e.to_string())?;
        let same_plan = pa.to_json().as_bytes() == pb.to_json().as_bytes();
        let same_losses = history_csv(&a) == history_csv(&b)
            && a.folds.iter().zip(&b.folds).all(|(x, y)| {
                x.history.iter().zip(&y.history).all(|(p, q)| p.train_loss.to_bits() == q.train_loss.to_bits())
            });
        let same_metrics = metrics_csv(&a) == metrics_csv(&b);
        ok &= same_plan && same_losses && same_metrics;
        notes.push(format!("{kind}: plan {same_plan}, losses {same_losses}, metrics {same_metrics}"));
    }
    ensure(ok, format!("synthetic 100-record Bacillus-shaped set; {}", notes.join("; ")))
}

fn load(key: DatasetKey) -> Result<Dataset, String> {
    let dir = default_data_dir();
    load_dataset(key, &dir, &LoadOptions::default())
        .map_err(|e| format!("{key} unavailable in {}: {e}", dir.display()))
}

fn criterion_6() -> Outcome {
    let data = load(DatasetKey::Bacillus)?;
    let labels = data.labels();
    let mut idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == 1).take(50).collect();
    idx.extend((0..data.len()).filter(|&i| labels[i] == 0).take(50));
    let encoded = data.encode().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig::new(DatasetKey::Bacillus, ModelKind::CapsProm);
    let arch = cfg.architecture().map_err(|e| e.to_string())?;
    let mut model = Model::build(&arch, 6).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        max_epochs: OVERFIT_EPOCHS,
        early_stopping: false,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let mut reached = None;
    let outcome = train_with(&mut model, &encoded, &idx, &idx, &train_cfg, 6, |stats, _| {
        let acc = stats.val_metrics.map_or(0.0, |m| m.acc);
        if acc >= OVERFIT_ACC {
            reached = Some((stats.epoch, acc));
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .map_err(|e| e.to_string())?;
    match reached {
        Some((epoch, acc)) => Ok(format!("training accuracy {acc:.3} at epoch {}", epoch + 1)),
        None => Err(format!(
            "best training accuracy {:.3} after {} epochs",
            outcome.history.iter().map(|h| h.val_metrics.map_or(0.0, |m| m.acc)).fold(0.0, f64::max),
            outcome.history.len()
        )),
    }
}

fn run_cv(data: &Dataset, key: DatasetKey, model: ModelKind, plan: Option<&FoldPlan>) -> Result<(ExperimentResult, Duration), String> {
    let cfg = ExperimentConfig::new(key, model);
    let start = Instant::now();
    let opts = RunOptions {
        jobs: jobs(),
        keep_models: false,
    };
    let (result, _) = cross_validate(&cfg, data, plan, &opts).map_err(|e| e.to_string())?;
    Ok((result, start.elapsed()))
}

fn criterion_7() -> Outcome {
    let bacillus = load(DatasetKey::Bacillus)?;
    let ecoli = load(DatasetKey::Ecoli)?;
    let plan = stratified_kfold(&bacillus.records, 5, 0).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut notes = Vec::new();
    for (data, key, model, floor, p) in [
        (&bacillus, DatasetKey::Bacillus, ModelKind::CnnProm, CNN_MCC, Some(&plan)),
        (&bacillus, DatasetKey::Bacillus, ModelKind::CapsProm, CAPS_MCC, Some(&plan)),
        (&ecoli, DatasetKey::Ecoli, ModelKind::CnnProm, CNN_MCC, None),
    ] {
        let (result, took) = run_cv(data, key, model, p)?;
        let mcc = result.report.mean.mcc;
        ok &= mcc >= floor && took < CV_BUDGET;
        notes.push(format!("{key} {model} mean Mcc {mcc:.3} (>= {floor}) in {:.1} min", took.as_secs_f64() / 60.0));
    }
    ensure(ok, notes.join("; "))
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synthetic(dir.path());
    let path = dir.path().join("folds.json");
    stratified_kfold(&data.records, 5, 99).and_then(|p| p.save(&path)).map_err(|e| e.to_string())?;
    let plan = FoldPlan::load(&path).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        jobs: jobs(),
        keep_models: false,
    };
    let (cnn, _) = cross_validate(&quick_config(ModelKind::CnnProm), &data, Some(&plan), &opts).map_err(|e| e.to_string())?;
    let (caps, _) =
        cross_validate(&quick_config(ModelKind::CapsProm), &data, Some(&plan), &opts).map_err(|e| e.to_string())?;
    let same_tests = cnn.folds.iter().zip(&caps.folds).all(|(a, b)| {
        a.predictions.iter().map(|p| &p.id).eq(b.predictions.iter().map(|p| &p.id))
    });
    ensure(
        cnn.fold_plan_digest == plan.digest() && caps.fold_plan_digest == plan.digest() && same_tests,
        format!(
            "exported plan {}, CNNProm {}, CapsProm {}, identical test ids {same_tests}",
            &plan.digest()[..12],
            &cnn.fold_plan_digest[..12],
            &caps.fold_plan_digest[..12]
        ),
    )
}

fn criterion_9() -> Outcome {
    let tata = load(DatasetKey::ArabidopsisTata)?;
    let (result, took) = run_cv(&tata, DatasetKey::ArabidopsisTata, ModelKind::CnnProm, None)?;
    let (sn, sp) = (result.report.mean.sn, result.report.mean.sp);
    let mut ok = sn >= TATA_SN && sp >= TATA_SP && took < TATA_BUDGET;
    let mut notes = vec![format!(
        "arabidopsis_tata CNNProm Sn {sn:.3} (>= {TATA_SN}) Sp {sp:.3} (>= {TATA_SP}) in {:.1} min",
        took.as_secs_f64() / 60.0
    )];
    for key in [DatasetKey::HumanNonTata, DatasetKey::MouseNonTata] {
        let sub = load(key)?.stratified_subsample(SMOKE_SAMPLES, 0);
        let (r, took) = run_cv(&sub, key, ModelKind::CnnProm, None)?;
        let finite = r.report.mean.values().iter().all(|v| v.is_finite());
        ok &= finite;
        notes.push(format!(
            "{key} smoke ({} records) mean Mcc {:.3} in {:.1} min",
            sub.len(),
            r.report.mean.mcc,
            took.as_secs_f64() / 60.0
        ));
    }
    ensure(ok, notes.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", criterion_1),
        ("oracle equivalence", criterion_2),
        ("routing invariants", criterion_3),
        ("shape ledger", criterion_4),
        ("determinism", criterion_5),
        ("overfit sanity", criterion_6),
        ("desk-scale reproduction", criterion_7),
        ("cross-model fairness", criterion_8),
        ("metric sanity", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
