//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The default-config experiment behind criteria 2, 4 and 5 is kept in
//! `target/tmp/acceptance-experiment`; stored trial progress is reused on the
//! next run when the configuration is unchanged. Delete that directory to
//! retrain from scratch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use smlab_cli::{experiment_with, generate, probe, ExperimentSummary, MaskSpec, Overrides, RunConfig, RunStore};
use smlab_core::experiment::{
    build_questions, detect_phases, label_question, pair_series, question_type_ratio, BruteForceOracle, QType, N_TRIALS,
};
use smlab_core::model::{
    init_model, read_checkpoint, save_checkpoint, train_step, write_checkpoint, EncoderModel, MlmObjective, ModelConfig,
    ModelError,
};
use smlab_core::numkernel::{finite_diff_check, AdamConfig, AdamState, Rng, Tape, Tensor};
use smlab_core::scenario::{
    load_dataset, mask_chunk, ChunkRecord, MaskedExample, Scenario, ScenarioConfig, EPOCH_SIZE,
};

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, id: &str, name: &str, run: impl FnOnce() -> Result<(bool, String), String>) {
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failures += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} [{id}] {name}: {detail} ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    }
}

fn scenario() -> Scenario {
    Scenario::new(ScenarioConfig::default()).unwrap()
}

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_example(sc: &Scenario, seed: u64) -> MaskedExample {
    let mut rng = Rng::new(seed);
    let chunk = &sc.universe()[rng.below(sc.universe().len())];
    mask_chunk(&sc.encode_chunk(chunk), sc.vocab(), &mut rng)
}

fn dataset_regime() -> Result<(bool, String), String> {
    let start = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = RunConfig::default()
        .resolve(&Overrides {
            out: Some(out.path().to_path_buf()),
            ..Overrides::default()
        })
        .map_err(|e| e.to_string())?;
    let stats = generate(&config).map_err(|e| e.to_string())?;
    let sc = scenario();
    let (_, train) = load_dataset(&out.path().join("train.jsonl"), &sc).map_err(|e| e.to_string())?;
    let (_, test) = load_dataset(&out.path().join("test.jsonl"), &sc).map_err(|e| e.to_string())?;
    let (_, sample) = load_dataset(&out.path().join("sample.jsonl"), &sc).map_err(|e| e.to_string())?;
    let epoch = sc.build_epoch(&train, &mut Rng::new(0)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let pass = sample.len() == 470
        && train.len() == 440
        && test.len() == 30
        && stats.sample == 470
        && epoch.len() == 22_000
        && EPOCH_SIZE == 22_000
        && secs < 1.0;
    Ok((
        pass,
        format!(
            "sample {} train {} test {}, epoch {} examples, {secs:.3}s (need 470/440/30, 22000, <1s)",
            sample.len(),
            train.len(),
            test.len(),
            epoch.len()
        ),
    ))
}

fn type_ratio() -> Result<(bool, String), String> {
    let start = Instant::now();
    let ratio = question_type_ratio(&scenario(), 0..N_TRIALS as u64).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let r = ratio.normalized();
    Ok((
        ratio.within(0.5) && secs < 1.0,
        format!(
            "counts {:?}, normalized {:.2}:{:.2}:{:.2} (need each within 50% of 1:3:2, <1s)",
            ratio.counts, r[0], r[1], r[2]
        ),
    ))
}

fn particle_bias() -> Result<(bool, String), String> {
    let start = Instant::now();
    let counts = scenario().particle_counts();
    let ratio = counts.ne_to_yo();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        (1.5..=2.5).contains(&ratio) && secs < 1.0,
        format!("ne {} yo {}, ratio {ratio:.3} (need 1.5..=2.5, <1s)", counts.ne, counts.yo),
    ))
}

fn fmt_acc(a: [Option<f64>; 3]) -> String {
    let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.3}"));
    format!("({}, {}, {})", f(a[0]), f(a[1]), f(a[2]))
}

fn learning_curve(summary: &ExperimentSummary, config: &RunConfig) -> Result<(bool, String), String> {
    let points = summary.result.curve.mean_points();
    let th = config.phases;
    let phase_one = points.iter().find(|(e, a)| {
        *e <= 32
            && a[1].is_some_and(|v| v >= th.hi)
            && a[2].is_some_and(|v| v >= th.hi)
            && a[0].is_some_and(|v| v <= th.lo)
    });
    let (final_epoch, final_acc) = *points.last().ok_or("empty curve")?;
    let final_ok = final_epoch <= 4096 && final_acc.iter().all(|a| a.is_some_and(|v| v >= 0.95));
    let report = detect_phases(&points, th).map_err(|e| e.to_string())?;
    let u = report.u_shape.as_ref();
    let detail = format!(
        "(a) phase I {} ; (b) final epoch {final_epoch} {} ; (c) {}",
        phase_one.map_or("not found by epoch 32".into(), |(e, a)| format!("at epoch {e} {}", fmt_acc(*a))),
        fmt_acc(final_acc),
        u.map_or("no U-shape".into(), |u| format!(
            "U-shape peak {:.3}@{} trough {:.3}@{} recovered @{}",
            u.peak, u.peak_epoch, u.trough, u.trough_epoch, u.recovery_epoch
        )),
    );
    Ok((phase_one.is_some() && final_ok && u.is_some(), detail))
}

fn confusion_narrative(summary: &ExperimentSummary, sc: &Scenario) -> Result<(bool, String), String> {
    let pooled = summary.result.pooled_confusion();
    let da = pair_series(sc, &pooled, QType::II, "da");
    let yo = pair_series(sc, &pooled, QType::II, "yo");
    let value = |s: &[(usize, Option<f64>)], i: usize| s[i].1.unwrap_or(0.0);
    let last = da.len() - 1;
    let peak = (0..da.len()).max_by(|&a, &b| value(&da, a).total_cmp(&value(&da, b)).then(b.cmp(&a))).unwrap();
    let da_ok = value(&da, peak) > value(&da, last);
    let phase_one = summary
        .report
        .as_ref()
        .and_then(|r| r.phase_one_epoch)
        .ok_or("no phase-I checkpoint")?;
    let p1 = yo.iter().position(|(e, _)| *e == phase_one).unwrap();
    let yo_max = (p1..yo.len()).max_by(|&a, &b| value(&yo, a).total_cmp(&value(&yo, b)).then(b.cmp(&a))).unwrap();
    let yo_ok = value(&yo, yo_max) >= value(&yo, p1);
    Ok((
        da_ok && yo_ok,
        format!(
            "II->da peak {:.3}@{} vs final {:.3}@{} ; II->yo {:.3}@{} vs phase-I {:.3}@{}",
            value(&da, peak),
            da[peak].0,
            value(&da, last),
            da[last].0,
            value(&yo, yo_max),
            yo[yo_max].0,
            value(&yo, p1),
            phase_one
        ),
    ))
}

fn onakasuita_probe(config: &RunConfig, sc: &Scenario) -> Result<(bool, String), String> {
    let chunk = sc
        .universe()
        .iter()
        .find(|c| c.cur.surface() == "Onakasuita-ne")
        .ok_or("no Onakasuita-ne chunk in the universe")?;
    let record = ChunkRecord::from_chunk(chunk);
    let ckpt = config.out.join("checkpoints").join(format!("trial-{}.ckpt", config.seed));
    let report = probe(sc, &ckpt, &record, &MaskSpec::Particle { cur: true }, 3).map_err(|e| e.to_string())?;
    let (_, ranked) = &report.predictions[0];
    let top = &ranked[0].0;
    Ok((
        top == "ne",
        format!("{} -> top-3 {:?}", report.tokens.join(" "), ranked),
    ))
}

fn oracle_equivalence() -> Result<(bool, String), String> {
    let sc = scenario();
    let oracle = BruteForceOracle::new(sc.universe());
    let mut total = 0;
    let mut agree = 0;
    for seed in 0..N_TRIALS as u64 {
        let split = sc.sample_split(seed).map_err(|e| e.to_string())?;
        let questions = build_questions(&sc, &split.test).map_err(|e| e.to_string())?;
        for q in &questions {
            total += 1;
            let fast = label_question(sc.config(), &q.chunk, q.slot);
            if fast == oracle.label(&q.chunk, q.slot) && fast == q.correct {
                agree += 1;
            }
        }
    }
    Ok((agree == total && total > 0, format!("{agree}/{total} questions agree")))
}

fn gradient_check() -> Result<(bool, String), String> {
    let config = ModelConfig::default();
    let model = init_model(&config).map_err(|e| e.to_string())?;
    let batch = vec![random_example(&scenario(), 2024)];
    let objective = MlmObjective {
        config: &config,
        batch: &batch,
    };
    let report = finite_diff_check(&objective, model.params(), 1e-5, 1e-4).map_err(|e| e.to_string())?;
    Ok((
        report.passed(),
        format!(
            "{} tensors, max relative error {:.2e} (need < 1e-4, h = 1e-5)",
            report.tensors.len(),
            report.max_relative_error()
        ),
    ))
}

fn numeric_invariants() -> Result<(bool, String), String> {
    let sc = scenario();
    let model = init_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut worst_row = 0.0f64;
    for seed in 0..20 {
        let ex = random_example(&sc, seed);
        let (_, maps) = model.encode(&ex.token_ids, &ex.slot_ids).map_err(|e| e.to_string())?;
        for l in 0..maps.n_layers() {
            for h in 0..maps.n_heads() {
                for q in 0..maps.seq_len() {
                    worst_row = worst_row.max((maps.row(l, h, q).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }

    let mut rng = Rng::new(5);
    let logits = Tensor::randn(&[6, 29], 3.0, &mut rng);
    let targets = [0, 5, 28, 3, 3, 17];
    let mut softmax_err = 0.0f64;
    let mut ce_expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * 29..(r + 1) * 29];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        ce_expected += (z.ln() + max - row[t]) / targets.len() as f64;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[29], row.to_vec()).unwrap());
        let y = tape.softmax(x, 0).map_err(|e| e.to_string())?;
        for (v, raw) in tape.value(y).data().iter().zip(row) {
            softmax_err = softmax_err.max((v - (raw - max).exp() / z).abs());
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(logits);
    let l = tape.cross_entropy(x, &targets).map_err(|e| e.to_string())?;
    let ce_err = (tape.value(l).data()[0] - ce_expected).abs();

    let mut model = init_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(AdamConfig::default(), model.params());
    let batch = vec![random_example(&sc, 77)];
    let mut steps = 0;
    let mut loss = f64::INFINITY;
    while steps < 200 && loss >= 0.01 {
        train_step(&mut model, &batch, &mut adam).map_err(|e| e.to_string())?;
        steps += 1;
        loss = model.batch_loss(&batch).map_err(|e| e.to_string())?;
    }
    Ok((
        worst_row <= 1e-9 && softmax_err < 1e-12 && ce_err < 1e-10 && loss < 0.01,
        format!(
            "attention row error {worst_row:.1e} (<=1e-9), softmax error {softmax_err:.1e} (<1e-12), \
             cross-entropy error {ce_err:.1e} (<1e-10), overfit loss {loss:.4} after {steps} steps (<0.01 within 200)"
        ),
    ))
}

fn determinism() -> Result<(bool, String), String> {
    let base = RunConfig {
        n_trials: 3,
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let mut outputs = Vec::new();
    for (run, workers) in [1, 3, 3].into_iter().enumerate() {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = base
            .clone()
            .resolve(&Overrides {
                out: Some(dir.path().to_path_buf()),
                workers: Some(workers),
                schedule: Some("1,2".into()),
                ..Overrides::default()
            })
            .map_err(|e| e.to_string())?;
        let store = RunStore::new(&config, false).map_err(|e| e.to_string())?.quiet();
        experiment_with(&config, &store).map_err(|e| e.to_string())?;
        let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| e.to_string());
        outputs.push((run, workers, read("curves.csv")?, read("confusion.csv")?));
    }
    let same = outputs.windows(2).all(|w| w[0].2 == w[1].2 && w[0].3 == w[1].3);
    Ok((
        same,
        format!(
            "3 trials x 2 epochs at d_model 16, runs with 1, 3, 3 workers: curves/confusion CSVs {}",
            if same { "byte-identical" } else { "differ" }
        ),
    ))
}

fn persistence() -> Result<(bool, String), String> {
    let sc = scenario();
    let mut model = init_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(AdamConfig::default(), model.params());
    let batch: Vec<_> = (0..8).map(|s| random_example(&sc, 100 + s)).collect();
    for _ in 0..3 {
        train_step(&mut model, &batch, &mut adam).map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &adam, &path).map_err(|e| e.to_string())?;
    let (loaded, loaded_adam): (EncoderModel, AdamState) =
        smlab_core::model::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let probe = random_example(&sc, 9);
    let (h1, _) = model.encode(&probe.token_ids, &probe.slot_ids).map_err(|e| e.to_string())?;
    let (h2, _) = loaded.encode(&probe.token_ids, &probe.slot_ids).map_err(|e| e.to_string())?;
    let l1 = model.mlm_logits(&h1).map_err(|e| e.to_string())?;
    let l2 = loaded.mlm_logits(&h2).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = bits(&l1) == bits(&l2) && loaded_adam == adam;

    let bytes = write_checkpoint(&model, &adam).map_err(|e| e.to_string())?;
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    let mut version = bytes.clone();
    version[9] = 99;
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x01;
    let cases: [(&str, Vec<u8>, fn(&ModelError) -> bool); 4] = [
        ("bad magic", magic, |e| matches!(e, ModelError::BadMagic { .. })),
        ("version", version, |e| matches!(e, ModelError::Version { .. })),
        ("truncated", bytes[..bytes.len() - 3].to_vec(), |e| {
            matches!(e, ModelError::Truncated(_) | ModelError::Checksum { .. })
        }),
        ("bit flip", flipped, |e| matches!(e, ModelError::Checksum { .. })),
    ];
    let mut rejected = Vec::new();
    let mut all_rejected = true;
    for (name, data, expected) in cases {
        match read_checkpoint(&data) {
            Err(e) if expected(&e) => rejected.push(format!("{name}: \"{e}\"")),
            other => {
                all_rejected = false;
                rejected.push(format!("{name}: unexpected {:?}", other.err()));
            }
        }
    }
    Ok((
        identical && all_rejected,
        format!(
            "logits {} after reload; {}",
            if identical { "bit-identical" } else { "differ" },
            rejected.join("; ")
        ),
    ))
}

fn main() -> ExitCode {
    let mut gate = Gate { failures: 0 };
    gate.check("1", "dataset regime", dataset_regime);
    gate.check("2", "question-type ratio", type_ratio);
    gate.check("3", "particle frequency bias", particle_bias);

    let sc = scenario();
    let config = RunConfig::default()
        .resolve(&Overrides {
            out: Some(tmp("acceptance-experiment")),
            ..Overrides::default()
        })
        .expect("default config resolves");
    eprintln!(
        "default-config experiment in {} (d_model {}, lr {}, remask {})",
        config.out.display(),
        config.model.d_model,
        config.train.lr,
        config.train.remask_per_epoch
    );
    let summary = RunStore::new(&config, false)
        .map_err(|e| e.to_string())
        .and_then(|store| experiment_with(&config, &store).map_err(|e| e.to_string()));
    match &summary {
        Ok(s) => {
            println!("experiment summary:");
            for line in s.render().lines() {
                println!("    {line}");
            }
            gate.check("4", "learning-curve phases", || learning_curve(s, &config));
            gate.check("5", "confusion narrative", || confusion_narrative(s, &sc));
            gate.check("5p", "Onakasuita-[MASK] probe", || onakasuita_probe(&config, &sc));
        }
        Err(e) => {
            for (id, name) in [("4", "learning-curve phases"), ("5", "confusion narrative")] {
                gate.check(id, name, || Err(e.clone()));
            }
        }
    }

    gate.check("6", "oracle equivalence", oracle_equivalence);
    gate.check("7", "gradient correctness", gradient_check);
    gate.check("8", "numeric invariants", numeric_invariants);
    gate.check("9", "determinism", determinism);
    gate.check("10", "persistence round-trip", persistence);

    if gate.failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", gate.failures);
        ExitCode::FAILURE
    }
}
