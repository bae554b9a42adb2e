//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The desk-scale criteria train every method on the synthetic corpus, so
//! this test takes several minutes on one core.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdal::corpus::AudioSegment;
use rdal::features::{log_mel, Stft};
use rdal::harness::{reports, run_matrix, RunSpec};
use rdal::models::{stack_features, ArchitectureConfig, EventClassifier, FeatureExtractor, SpeechClassifier};
use rdal::nn::{sigmoid, Matrix, Module, Tensor4};
use rdal::privacy_eval::{auc, roc_curve, AggregateReport};
use rdal::training::{
    lambda_at, lambda_schedule, loss_adv, loss_cls, swap_probe, ExperimentConfig, Method, TrainState,
};

#[derive(Default)]
struct Verdicts {
    lines: Vec<(bool, String)>,
}

impl Verdicts {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        let line = format!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        // written to the stream directly so the verdicts show without --nocapture
        let _ = writeln!(std::io::stderr(), "{line}");
        self.lines.push((ok, line));
    }

    fn failures(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter(|(ok, _)| !ok)
            .map(|(_, l)| l.as_str())
            .collect()
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn toy_state(method: Method) -> TrainState<f64> {
    let config = ExperimentConfig {
        method,
        classes: 3,
        batch_size: 4,
        architecture: ArchitectureConfig {
            conv_widths: vec![1, 1, 1, 1],
            latent_dim: 4,
            speech_hidden: vec![3],
            input_bands: 8,
            input_frames: 8,
            ..Default::default()
        },
        seed: 21,
        ..Default::default()
    };
    TrainState::new(&config)
}

fn objective(st: &mut TrainState<f64>, x: &Tensor4<f64>, y: &[usize], s: &[bool], lambda: f64) -> f64 {
    let z = st.extractor.forward(x).unwrap();
    let cls = loss_cls(&st.classifier.forward(&z), y).unwrap();
    let p: Vec<f64> = st.discriminator.forward(&z).iter().map(|&l| sigmoid(l)).collect();
    cls - lambda * loss_adv(&p, s)
}

fn gradient_identity(v: &mut Verdicts) {
    let start = Instant::now();
    let lambda = 0.46;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor4::from_vec(4, 1, 8, 8, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (y, s) = (vec![1, 0, 2, 1], vec![true, false, true, false]);

    let mut st = toy_state(Method::Rdal);
    let params = st.extractor.num_trainable() + st.classifier.num_trainable() + st.discriminator.num_trainable();
    st.lambda = lambda;
    st.accumulate_gradients(&x, &y, &s).unwrap();
    let through_grl = st.extractor.flat_grads();

    let mut base = st.clone();
    base.method = Method::Baseline;
    base.accumulate_gradients(&x, &y, &s).unwrap();
    let d_cls = base.extractor.flat_grads();
    // with a unit reversal the extractor sees dL_cls - dL_adv
    let mut unit = st.clone();
    unit.lambda = 1.0;
    unit.accumulate_gradients(&x, &y, &s).unwrap();
    let d_adv: Vec<f64> = d_cls
        .iter()
        .zip(unit.extractor.flat_grads())
        .map(|(c, u)| c - u)
        .collect();

    let theta = st.extractor.flat_params();
    let (mut worst_decomp, mut worst_fd) = (0.0f64, 0.0f64);
    let eps = 1e-6;
    for i in 0..theta.len() {
        worst_decomp = worst_decomp.max(rel_err(d_cls[i] - lambda * d_adv[i], through_grl[i], 1e-8));
        let mut probe = st.clone();
        let mut p = theta.clone();
        p[i] += eps;
        probe.extractor.set_flat_params(&p);
        let up = objective(&mut probe, &x, &y, &s, lambda);
        p[i] -= 2.0 * eps;
        probe.extractor.set_flat_params(&p);
        let down = objective(&mut probe, &x, &y, &s, lambda);
        worst_fd = worst_fd.max(rel_err((up - down) / (2.0 * eps), through_grl[i], 1e-5));
    }
    let elapsed = start.elapsed();
    v.check(
        "1 gradient reversal identity",
        params <= 500 && worst_decomp < 1e-4 && worst_fd < 1e-4 && elapsed < Duration::from_secs(10),
        format!(
            "{params} params, max rel err vs decomposition {worst_decomp:.2e}, vs finite differences {worst_fd:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn schedule(v: &mut Verdicts) {
    let c = ExperimentConfig::default();
    let zero_before = (0..30).all(|m| lambda_schedule(m, &c) == 0.0);
    let (a, b) = (lambda_at(0.01, c.gamma), lambda_at(0.1, c.gamma));
    let monotone = (1..=5000).all(|m| lambda_schedule(m, &c) >= lambda_schedule(m - 1, &c));
    v.check(
        "2 reversal schedule",
        zero_before && (a - 0.462117).abs() <= 1e-6 && (b - 0.999909).abs() <= 1e-6 && monotone,
        format!("zero before warm-up {zero_before}, λ(0.01) {a:.7}, λ(0.1) {b:.7}, monotone {monotone}"),
    );
}

fn loss_anchors(v: &mut Verdicts) {
    let uniform = Matrix::from_vec(3, 12, vec![1.0f64 / 12.0; 36]);
    let ce = loss_cls(&uniform, &[0, 5, 11]).unwrap();
    let bce = loss_adv(&[0.5f64; 4], &[true, false, false, true]);
    let (e1, e2) = ((ce - 12f64.ln()).abs(), (bce - 2f64.ln()).abs());
    v.check(
        "3 loss anchors",
        e1 <= 1e-9 && e2 <= 1e-9,
        format!("|CE - ln 12| {e1:.1e}, |BCE - ln 2| {e2:.1e}"),
    );
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_oracle, mut worst_area) = (0.0f64, 0.0f64);
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(2..12);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        instances += 1;
        let a = auc(&scores, &labels).unwrap();
        worst_oracle = worst_oracle.max((a - pairwise_auc(&scores, &labels)).abs());
        let roc = roc_curve(&scores, &labels).unwrap();
        let area: f64 = roc
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum();
        worst_area = worst_area.max((a - area).abs());
    }
    v.check(
        "4 AUC oracle equivalence",
        worst_oracle <= 1e-12 && worst_area <= 1e-12,
        format!(
            "{instances} instances, max |AUC - pairwise| {worst_oracle:.1e}, max |AUC - ROC area| {worst_area:.1e}"
        ),
    );
}

fn pipeline_shapes(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let segment = AudioSegment::new((0..44_100).map(|_| rng.gen_range(-0.3f32..0.3)).collect()).unwrap();
    let spec = Stft::new().magnitude(&segment).unwrap();
    let mel = log_mel(&spec).unwrap();
    let arch = ArchitectureConfig::default();
    let extractor = FeatureExtractor::<f32>::new(&arch, &mut rng);
    let x: Tensor4<f32> = stack_features(&[&mel.values], mel.bands, mel.frames);
    let z = extractor.infer(&x).unwrap();
    let classes = 12;
    let p = EventClassifier::<f32>::new(z.cols, classes, &mut rng).predict(&z);
    let sum: f64 = p.data.iter().map(|&v| v as f64).sum();
    v.check(
        "5 pipeline shapes",
        spec.frames == 101
            && (mel.bands, mel.frames) == (64, 101)
            && z.cols == 64
            && p.cols == classes
            && (sum - 1.0).abs() <= 1e-6,
        format!(
            "{} samples -> {} frames -> {}x{} log-mel -> {}-d latent -> {} probabilities summing to {sum:.7}",
            segment.len(),
            spec.frames,
            mel.bands,
            mel.frames,
            z.cols,
            p.cols
        ),
    );
}

fn swap_contract(v: &mut Verdicts) {
    let config = ExperimentConfig::desk(Method::Rdal, 1);
    let mut st = TrainState::<f32>::new(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = &config.architecture;
    let probe = SpeechClassifier::<f32>::new(arch.latent_dim, &arch.speech_hidden, &mut rng);
    let z = Matrix::from_vec(
        100,
        arch.latent_dim,
        (0..100 * arch.latent_dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    );
    let (f, c) = (st.extractor.flat_params(), st.classifier.flat_params());
    swap_probe(&mut st, &probe);
    let same_output = st.discriminator.predict(&z) == probe.predict(&z);
    let same_params = st.discriminator.flat_params() == probe.flat_params();
    let untouched = st.extractor.flat_params() == f && st.classifier.flat_params() == c;
    v.check(
        "6 probe swap contract",
        same_output && same_params && untouched,
        format!("outputs bitwise equal {same_output}, parameters equal {same_params}, F and C unchanged {untouched}"),
    );
}

/// Minimum in-loop discriminator validation accuracy once the reversal is on.
fn min_in_loop_accuracy(cell_dir: &Path, warmup: usize) -> Option<f64> {
    let text = fs::read_to_string(cell_dir.join("epochs.tsv")).ok()?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split('\t').collect();
    let (ep, acc) = (
        header.iter().position(|&h| h == "epoch")?,
        header.iter().position(|&h| h == "d_val_acc")?,
    );
    lines
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let epoch: usize = f[ep].parse().ok()?;
            (epoch >= warmup).then(|| f[acc].parse::<f64>().ok()).flatten()
        })
        .reduce(f64::min)
}

fn desk_scale(v: &mut Verdicts) {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec::desk(dir.path().join("matrix"));
    let mut minutes = Vec::new();
    for &method in &spec.methods {
        // one method at a time on the same ledger so each can be timed
        let single = RunSpec {
            methods: vec![method],
            ..spec.clone()
        };
        let start = Instant::now();
        let outcome = run_matrix(&single).unwrap();
        minutes.push((method, start.elapsed().as_secs_f64() / 60.0));
        if let Some(mask) = outcome.ledger.mask.as_ref().filter(|_| outcome.mask_trained_now) {
            let _ = writeln!(
                std::io::stderr(),
                "mask validation MSE {:.5} (identity mask {:.5})",
                mask.val_mse,
                mask.identity_val_mse
            );
        }
    }
    let rerun = run_matrix(&spec).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "{}",
        fs::read_to_string(spec.out_dir.join("report.txt")).unwrap()
    );
    let ledger = rerun.ledger;
    let all = reports(&spec, &ledger).unwrap();
    let get = |m: Method| -> &AggregateReport { all.iter().find(|r| r.label == m.as_str()).unwrap() };
    let (base, naive, rdal, rdal_m) = (
        get(Method::Baseline),
        get(Method::NaiveAdv),
        get(Method::Rdal),
        get(Method::RdalM),
    );

    let budget = minutes.iter().all(|(_, m)| *m <= 15.0);
    let times: Vec<String> = minutes
        .iter()
        .map(|(m, t)| format!("{} {t:.1} min", m.as_str()))
        .collect();
    v.check(
        "7 budget",
        budget && rerun.trained_now == 0 && rerun.evaluated_now == 0,
        format!(
            "{}; resumed run retrained {} cells",
            times.join(", "),
            rerun.trained_now
        ),
    );
    let b = base.sad_auc.mean;
    v.check(
        "7a baseline leaks speech",
        b >= 0.85,
        format!("baseline SAD AUC {b:.3} (>= 0.85)"),
    );
    let n = naive.sad_auc.mean;
    v.check(
        "7b naive adversary is not private",
        (n - b).abs() <= 0.10,
        format!("naive SAD AUC {n:.3} vs baseline {b:.3} (within 0.10)"),
    );
    let r = rdal.sad_auc.mean;
    v.check(
        "7c probe resets remove speech",
        r <= b - 0.15,
        format!("RDAL SAD AUC {r:.3} (<= {:.3})", b - 0.15),
    );
    let (rs, bs) = (rdal.sed_accuracy.mean, base.sed_accuracy.mean);
    v.check(
        "7d event accuracy is kept",
        rs >= bs - 0.05,
        format!("RDAL SED accuracy {rs:.3} vs baseline {bs:.3} (>= {:.3})", bs - 0.05),
    );
    let rm = rdal_m.sad_auc.mean;
    v.check(
        "7e masking helps further",
        rm <= r,
        format!("RDAL+M SAD AUC {rm:.3} vs RDAL {r:.3}"),
    );

    let naive_cell = ledger
        .trained
        .iter()
        .find(|t| t.key.method == Method::NaiveAdv)
        .unwrap();
    let cell_dir = spec.out_dir.join(naive_cell.checkpoint.path.parent().unwrap());
    let in_loop = min_in_loop_accuracy(&cell_dir, naive_cell.config.warmup_epochs).unwrap_or(f64::NAN);
    v.check(
        "8 in-loop vs post-hoc gap",
        in_loop < 0.6 && n >= b - 0.10,
        format!(
            "naive in-loop D min validation accuracy {in_loop:.3} (< 0.6), attacker SAD AUC {n:.3} (>= {:.3})",
            b - 0.10
        ),
    );

    let (ob, or, om) = (base.sad_overlap.mean, rdal.sad_overlap.mean, rdal_m.sad_overlap.mean);
    v.check(
        "10 density overlap ordering",
        ob < or && or < om,
        format!(
            "baseline {ob:.3} < RDAL {or:.3} < RDAL+M {om:.3} (naive {:.3})",
            naive.sad_overlap.mean
        ),
    );

    let again = RunSpec {
        out_dir: dir.path().join("repeat"),
        methods: vec![Method::Rdal],
        ..spec.clone()
    };
    run_matrix(&again).unwrap();
    let file = |root: &Path| {
        let e = ledger.evaluated(Method::Rdal, 0).unwrap();
        fs::read(root.join(&e.metrics.path)).unwrap()
    };
    let identical = file(&spec.out_dir) == file(&again.out_dir);
    v.check(
        "9 determinism",
        identical,
        format!("two RDAL runs with seed 0 give identical metrics files: {identical}"),
    );
}

#[test]
fn acceptance() {
    let mut v = Verdicts::default();
    gradient_identity(&mut v);
    schedule(&mut v);
    loss_anchors(&mut v);
    auc_oracle(&mut v);
    pipeline_shapes(&mut v);
    swap_contract(&mut v);
    desk_scale(&mut v);
    let failed = v.failures();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
