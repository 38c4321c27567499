//! End-to-end acceptance gate. Every test prints one PASS/FAIL line per
//! criterion to stderr (uncaptured) and then asserts it.

use cmsc_core::channel::{equalize, transmit, ChannelModel};
use cmsc_core::codec::{Codec, CodecConfig, SymbolBlock};
use cmsc_core::config::Config;
use cmsc_core::harness::{CavChoice, EgoChoice, EvalPoint, Harness, ResultRow};
use cmsc_core::model::{
    Models, CODEC_PREFIX, CONVERTER_PREFIX, FUSION_PREFIX, HEAD_PREFIX, SELECTOR_PREFIX,
};
use cmsc_core::nn::gradcheck::{check, GradReport};
use cmsc_core::nn::layers::{channel_scale, channel_scale_backward, residual_add};
use cmsc_core::nn::{
    BatchNorm, Conv2d, ConvNextBlock, ConvSpec, Deconv2d, Dense, Grads, Layer, LayerNorm, Mode,
    ParamStore, SeBlock, Tensor,
};
use cmsc_core::phy::{
    channel_uses, dequantize, ldpc, parity_lambda, quantize, ClassicLink, Ldpc, Qam,
};
use cmsc_core::pipeline::{Method, BASELINE_RATE};
use cmsc_core::scene::{render_features, sample_scene, FeatureMap, Modality};
use cmsc_core::selector::{retained_count, scatter, select, top_k, ImportanceMap};
use cmsc_core::trainer::{Stage, TrainOutcome, Trainer};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(id: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {id}: {detail}");
}

fn gate(id: &str, pass: bool, detail: &str) {
    report(id, pass, detail);
    assert!(pass, "{id}: {detail}");
}

/// Acceptance tests run one at a time so the training clock is not shared
/// with other work.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

fn layer_report(
    layer: Layer,
    store: &mut ParamStore,
    x: &Tensor,
    mode: Mode,
    seed: u64,
) -> GradReport {
    let l2 = layer.clone();
    check(
        store,
        x,
        move |s, x| layer.forward(s, x, mode),
        move |s, x, g, grads| l2.backward(s, x, g, mode, grads),
        seed,
    )
    .unwrap()
}

fn away_from_kink(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
}

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut checked = 0;
    let mut record = |what: String, rep: GradReport| {
        let (name, err) = rep.worst();
        checked += 1;
        if err >= worst.1 {
            worst = (format!("{what} [{name}]"), err);
        }
    };

    for trial in 0..12u64 {
        let h = r.random_range(2..=6);
        let w = r.random_range(2..=6);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=4);
        let kh = [1, 3][r.random_range(0..2)];
        let kw = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let mut spec = ConvSpec::new(cin, cout, (kh, kw)).same().stride(stride);
        if trial % 3 == 2 {
            spec = spec.depthwise();
        }
        let mut s = ParamStore::new();
        let conv = Conv2d::new(&mut s, "conv", spec, &mut r).unwrap();
        let x = Tensor::randn(&[2, h, w, spec.in_ch], 1.0, &mut r);
        record(
            format!("conv {h}x{w} {spec:?}"),
            layer_report(Layer::Conv2d(conv), &mut s, &x, Mode::Train, trial),
        );

        let k = r.random_range(2..=3);
        let pad = if k == 2 { 0 } else { r.random_range(0..=1) };
        let spec = ConvSpec::new(cin, cout, (k, k))
            .stride(stride)
            .pad((pad, pad));
        let mut s = ParamStore::new();
        let d = Deconv2d::new(&mut s, "deconv", spec, &mut r).unwrap();
        let x = Tensor::randn(&[2, h, w, cin], 1.0, &mut r);
        record(
            format!("deconv {h}x{w} {spec:?}"),
            layer_report(Layer::Deconv2d(d), &mut s, &x, Mode::Train, trial),
        );

        let mut s = ParamStore::new();
        let dense = Dense::new(&mut s, "dense", cin, cout, trial % 2 == 0, &mut r).unwrap();
        let x = Tensor::randn(&[2, h, cin], 1.0, &mut r);
        record(
            format!("dense {cin}->{cout}"),
            layer_report(Layer::Dense(dense), &mut s, &x, Mode::Train, trial),
        );

        let c = r.random_range(2..=4);
        for mode in [Mode::Train, Mode::Eval] {
            let mut s = ParamStore::new();
            let bn = BatchNorm::new(&mut s, "bn", c).unwrap();
            let gamma: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            s.get_mut(bn.gamma).data_mut().copy_from_slice(&gamma);
            s.get_mut(bn.running_mean).data_mut().copy_from_slice(&mean);
            s.get_mut(bn.running_var).data_mut().copy_from_slice(&var);
            let x = Tensor::randn(&[2, h, w, c], 1.0, &mut r);
            record(
                format!("batchnorm {mode:?} c={c}"),
                layer_report(Layer::BatchNorm(bn), &mut s, &x, mode, trial),
            );
        }
        let mut s = ParamStore::new();
        let ln = LayerNorm::new(&mut s, "ln", c).unwrap();
        let gamma: Vec<f64> = (0..c).map(|_| r.random_range(-1.5..1.5)).collect();
        s.get_mut(ln.gamma).data_mut().copy_from_slice(&gamma);
        let x = Tensor::randn(&[2, h, w, c], 1.0, &mut r);
        record(
            format!("layernorm c={c}"),
            layer_report(Layer::LayerNorm(ln), &mut s, &x, Mode::Train, trial),
        );

        let x = away_from_kink(Tensor::randn(&[2, h, w, cin], 1.0, &mut r));
        for layer in [
            Layer::Relu,
            Layer::Gelu,
            Layer::Sigmoid,
            Layer::GlobalAvgPool,
        ] {
            let name = format!("{:?}", layer.kind());
            record(
                name,
                layer_report(layer, &mut ParamStore::new(), &x, Mode::Train, trial),
            );
        }

        let other = Tensor::randn(&[2, h, w, cin], 1.0, &mut r);
        record(
            "residual add".into(),
            check(
                &mut ParamStore::new(),
                &x,
                move |_, x| residual_add(x, &other),
                move |_, _, g, _| Ok(g.clone()),
                trial,
            )
            .unwrap(),
        );
        let scales = Tensor::randn(&[2, cin], 1.0, &mut r);
        let sc2 = scales.clone();
        record(
            "channel scale (input)".into(),
            check(
                &mut ParamStore::new(),
                &x,
                move |_, x| channel_scale(x, &scales),
                move |_, x, g, _| Ok(channel_scale_backward(x, &sc2, g)?.0),
                trial,
            )
            .unwrap(),
        );
        let (xa, xb) = (x.clone(), x.clone());
        let s0 = Tensor::randn(&[2, cin], 1.0, &mut r);
        record(
            "channel scale (scales)".into(),
            check(
                &mut ParamStore::new(),
                &s0,
                move |_, s| channel_scale(&xa, s),
                move |_, s, g, _| Ok(channel_scale_backward(&xb, s, g)?.1),
                trial,
            )
            .unwrap(),
        );

        let (c, red) = [(2, 1), (2, 2), (4, 2), (4, 4), (3, 1)][r.random_range(0..5)];
        let mut s = ParamStore::new();
        let se = SeBlock::new(&mut s, "se", c, red, &mut r).unwrap();
        let x = Tensor::randn(&[2, h, w, c], 1.0, &mut r);
        let se2 = se.clone();
        record(
            format!("se block c={c} r={red}"),
            check(
                &mut s,
                &x,
                move |s, x| se.forward(s, x),
                move |s, x, g, grads: &mut Grads| {
                    let (_, cache) = se2.forward_train(s, x)?;
                    se2.backward(s, &cache, g, grads)
                },
                trial,
            )
            .unwrap(),
        );

        let kernel = [3, 5][r.random_range(0..2)];
        let mut s = ParamStore::new();
        let blk =
            ConvNextBlock::new(&mut s, "cx", c, kernel, r.random_range(1..=4), &mut r).unwrap();
        let x = Tensor::randn(&[1, h, w, c], 1.0, &mut r);
        let b2 = blk.clone();
        record(
            format!("convnext {h}x{w}x{c} k={kernel}"),
            check(
                &mut s,
                &x,
                move |s, x| blk.forward(s, x),
                move |s, x, g, grads: &mut Grads| {
                    let (_, cache) = b2.forward_train(s, x)?;
                    b2.backward(s, &cache, g, grads)
                },
                trial,
            )
            .unwrap(),
        );

        let kpack = r.random_range(2..=6);
        let mut s = ParamStore::new();
        let codec = Codec::new(&mut s, "codec", c, &CodecConfig::default(), &mut r).unwrap();
        let x = Tensor::randn(&[2, kpack, 1, c], 1.0, &mut r);
        let c2 = codec.clone();
        record(
            format!("encoder+decoder k={kpack} c={c}"),
            check(
                &mut s,
                &x,
                move |s, x| {
                    let (y, enc) = codec.encode_train(s, x, Mode::Train)?;
                    Ok(codec.decode_train(s, &y, &enc.gains(), Mode::Train)?.0)
                },
                move |s, x, g, grads: &mut Grads| {
                    let (y, enc) = c2.encode_train(s, x, Mode::Train)?;
                    let (_, dec) = c2.decode_train(s, &y, &enc.gains(), Mode::Train)?;
                    let (gy, gg) = c2.decode_backward(s, &dec, g, Mode::Train, grads)?;
                    c2.encode_backward(s, &enc, &gy, &gg, Mode::Train, grads)
                },
                trial,
            )
            .unwrap(),
        );
    }
    let elapsed = start.elapsed();
    gate(
        "1 gradient suite",
        worst.1 < 1e-4 && elapsed < Duration::from_secs(60),
        &format!(
            "{checked} checks, worst rel err {:.2e} ({}), {:.1} s",
            worst.1,
            worst.0,
            elapsed.as_secs_f64()
        ),
    );
}

// --------------------------------------------------------------------- PHY

#[test]
fn c02_phy_exactness() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(202);
    let code = Ldpc::new();
    let mut failures = Vec::new();

    let mut syndrome_bad = 0;
    let mut round_trip_bad = 0;
    for _ in 0..1000 {
        let info: Vec<u8> = (0..ldpc::K).map(|_| r.random_range(0..2)).collect();
        let word = code.encode(&info).unwrap();
        syndrome_bad += usize::from(code.syndrome(&word).iter().any(|&b| b != 0));
        let llr: Vec<f64> = word
            .iter()
            .map(|&b| if b == 0 { 20.0 } else { -20.0 })
            .collect();
        let d = code.decode(&llr).unwrap();
        round_trip_bad += usize::from(!(d.converged && d.info == info));
    }
    if syndrome_bad + round_trip_bad > 0 {
        failures.push(format!(
            "ldpc: {syndrome_bad} syndromes, {round_trip_bad} round trips"
        ));
    }

    let mut qam_detail = Vec::new();
    for order in [16u32, 256] {
        let q = Qam::new(order).unwrap();
        let pts = q.constellation();
        let energy = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64;
        let step = 2.0 * q.scale;
        let side = (order as f64).sqrt() as usize;
        let mut adjacent = 0;
        let mut non_gray = 0;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                if ((pts[a] - pts[b]).norm() - step).abs() < 1e-9 {
                    adjacent += 1;
                    non_gray += usize::from((a ^ b).count_ones() != 1);
                }
            }
        }
        if (energy - 1.0).abs() > 1e-12 || non_gray > 0 || adjacent != 2 * side * (side - 1) {
            failures.push(format!(
                "{order}-QAM energy {energy}, {non_gray} of {adjacent} neighbours not Gray"
            ));
        }
        qam_detail.push(format!("{order}-QAM |E-1|={:.1e}", (energy - 1.0).abs()));
    }

    let packs = 100_000;
    let mut quant_bad = 0;
    for _ in 0..packs {
        let k = r.random_range(1..=6);
        let c = r.random_range(1..=4);
        let scale = r.random_range(0.01..10.0);
        let data: Vec<f64> = (0..k * c).map(|_| r.random_range(-scale..scale)).collect();
        let t = Tensor::new(&[k, c], data).unwrap();
        let q = quantize(&t).unwrap();
        let back = dequantize(&q).unwrap();
        quant_bad += usize::from(
            t.data()
                .iter()
                .zip(back.data())
                .any(|(a, b)| (a - b).abs() > q.step / 2.0 + 1e-12),
        );
    }
    if quant_bad > 0 {
        failures.push(format!(
            "quantizer: {quant_bad} of {packs} packs exceed step/2"
        ));
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(60) {
        failures.push(format!("runtime {:.1} s", elapsed.as_secs_f64()));
    }
    gate(
        "2 PHY exactness",
        failures.is_empty(),
        &if failures.is_empty() {
            format!(
                "1000 codewords, {}, {packs} packs, {:.1} s",
                qam_detail.join(", "),
                elapsed.as_secs_f64()
            )
        } else {
            failures.join("; ")
        },
    );
}

// ----------------------------------------------------------------- channel

fn qpsk(n: usize, seed: u64) -> SymbolBlock {
    let mut r = rng(seed);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let s = (0..n)
        .map(|_| {
            let re = if r.random::<bool>() { a } else { -a };
            let im = if r.random::<bool>() { a } else { -a };
            Complex64::new(re, im)
        })
        .collect();
    SymbolBlock::new(s, n, 1).unwrap()
}

#[test]
fn c03_channel_calibration() {
    let _g = serial();
    let n = 1_000_000;
    let tx = qpsk(n, 303);
    let mut worst_db: f64 = 0.0;
    for (i, snr) in [0.0, 5.0, 10.0, 15.0, 20.0].into_iter().enumerate() {
        let (rx, real) = transmit(&tx, ChannelModel::Awgn, snr, i as u64).unwrap();
        let (mut sig, mut noise) = (0.0, 0.0);
        for ((x, y), h) in tx.symbols.iter().zip(&rx.symbols).zip(&real.gains) {
            sig += (h * x).norm_sqr();
            noise += (y - h * x).norm_sqr();
        }
        worst_db = worst_db.max((10.0 * (sig / noise).log10() - snr).abs());
    }
    let (_, ray) = transmit(&tx, ChannelModel::Rayleigh, 10.0, 9).unwrap();
    let gain = ray.gains.iter().map(|h| h.norm_sqr()).sum::<f64>() / n as f64;
    let (rx, real) = transmit(&tx, ChannelModel::Rayleigh, f64::INFINITY, 10).unwrap();
    let eq = equalize(&rx, &real).unwrap();
    let zf = tx
        .symbols
        .iter()
        .zip(&eq.block.symbols)
        .enumerate()
        .filter(|(i, _)| !eq.erased.contains(i))
        .map(|(_, (a, b))| (a - b).norm())
        .fold(0.0, f64::max);
    gate(
        "3 channel calibration",
        worst_db < 0.1 && (gain - 1.0).abs() < 0.01 && zf <= 1e-9,
        &format!(
            "AWGN worst |dSNR| {worst_db:.4} dB, Rayleigh E|H|^2 {gain:.4}, ZF error {zf:.1e}"
        ),
    );
}

// ------------------------------------------------------------------ parity

#[test]
fn c04_channel_use_parity() {
    let _g = serial();
    let mut cfg = Config::default();
    cfg.experiment.scenes = 1;
    let models = Models::new(cfg.render.channels, &cfg.model, &cfg.perception, 7).unwrap();
    let harness = Harness::new(&models, &cfg).unwrap();
    let (h, w, c) = (cfg.scene.height, cfg.scene.width, cfg.render.channels);
    let s_m = (h * w * c) as f64;
    let exp = &cfg.experiment;
    let mut lambdas = vec![exp.sensor_matrix.lambda, exp.snr_sweep.lambda];
    lambdas.extend(&exp.lambda_sweep.lambdas);
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let mut failures = Vec::new();
    let exact = parity_lambda(0.06, BASELINE_RATE, 256) == 0.03
        && parity_lambda(0.06, BASELINE_RATE, 16) == 0.015;
    if !exact {
        failures.push("0.06 does not map to 0.03 / 0.015".to_string());
    }
    let mut worst_slack = 0.0f64;
    for &lambda in &lambdas {
        let point = |method| EvalPoint {
            method,
            channel: ChannelModel::Awgn,
            snr_db: 20.0,
            lambda,
            ego: EgoChoice::Random,
            cavs: CavChoice::Random,
        };
        let cmsc = harness.evaluate(&point(Method::Cmsc)).unwrap().channel_uses;
        if cmsc != retained_count(lambda, h, w).unwrap() * c {
            failures.push(format!("cmsc uses {cmsc} at {lambda}"));
        }
        for order in [16u32, 256] {
            let lb = parity_lambda(lambda, BASELINE_RATE, order);
            let ideal = channel_uses(s_m, lb, BASELINE_RATE, order);
            if (ideal - s_m * lambda).abs() > 1e-9 * s_m * lambda {
                failures.push(format!("identity fails at {lambda}, {order}-QAM: {ideal}"));
            }
            let method = if order == 16 {
                Method::Baseline16Qam
            } else {
                Method::Baseline256Qam
            };
            let row = harness.evaluate(&point(method)).unwrap();
            let link = ClassicLink::new(order).unwrap();
            let k = retained_count(lb, h, w).unwrap();
            let slack = link.symbols_per_codeword();
            if row.channel_uses != link.channel_uses_for(k * c * 8)
                || row.channel_uses.abs_diff(cmsc) > slack
            {
                failures.push(format!(
                    "{order}-QAM at {lambda}: {} uses vs cmsc {cmsc} (slack {slack})",
                    row.channel_uses
                ));
            }
            worst_slack = worst_slack.max(row.channel_uses.abs_diff(cmsc) as f64 / slack as f64);
        }
    }
    gate(
        "4 channel-use parity",
        failures.is_empty(),
        &if failures.is_empty() {
            format!(
                "{} ratios, identity exact, padded counts within {:.2} codewords",
                lambdas.len(),
                worst_slack
            )
        } else {
            failures.join("; ")
        },
    );
}

// --------------------------------------------------------------- selection

fn rank_oracle(values: &[f64], k: usize) -> Vec<usize> {
    (0..values.len())
        .filter(|&i| {
            (0..values.len())
                .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
                .count()
                < k
        })
        .collect()
}

#[test]
fn c05_selection_contracts() {
    let _g = serial();
    let mut r = rng(505);
    let mut failures = Vec::new();
    let mut cases = 0usize;
    for h in 2..=8 {
        for w in 2..=8 {
            let cells = h * w;
            for p in 1..=1000usize {
                if retained_count(p as f64 / 1000.0, h, w).unwrap() != (p * cells).div_ceil(1000) {
                    failures.push(format!("K at {p}/1000 on {h}x{w}"));
                }
            }
            let scores: Vec<f64> = (0..cells)
                .map(|_| r.random_range(1..5) as f64 / 5.0)
                .collect();
            let map = Tensor::randn(&[h, w, 2], 1.0, &mut r);
            let imp = ImportanceMap {
                height: h,
                width: w,
                values: scores.clone(),
            };
            let mut prev: Vec<usize> = Vec::new();
            for k in 1..=cells {
                cases += 1;
                let lambda = k as f64 / cells as f64;
                let (masked, pack) = select(&map, &imp, lambda).unwrap();
                let (_, again) = select(&map, &imp, lambda).unwrap();
                if pack.k() != k
                    || pack.indices != rank_oracle(&scores, k)
                    || top_k(&scores, k) != pack.indices
                    || again != pack
                    || scatter(&pack, &pack.features).unwrap() != masked
                    || !prev.iter().all(|i| pack.indices.contains(i))
                {
                    failures.push(format!("{h}x{w} k={k}"));
                }
                prev = pack.indices;
            }
            if top_k(&vec![0.5; cells], 3) != vec![0, 1, 2] {
                failures.push(format!("ties on {h}x{w}"));
            }
        }
    }
    gate(
        "5 selection contracts",
        failures.is_empty(),
        &if failures.is_empty() {
            format!("{cases} (grid, K) cases on 2x2..8x8")
        } else {
            format!("{} failures, first {}", failures.len(), failures[0])
        },
    );
}

// ---------------------------------------------------------------- training

struct TrainRun {
    cfg: Config,
    initial: Models,
    after_stage1: Models,
    after_stage2: Models,
    models: Models,
    outcome: TrainOutcome,
    elapsed: Duration,
    freeze_violations: Vec<String>,
    still_stages: Vec<Stage>,
}

fn movable(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Pretrain => &[FUSION_PREFIX, HEAD_PREFIX],
        Stage::Stage1 => &[CONVERTER_PREFIX],
        Stage::Stage2 => &[SELECTOR_PREFIX, CODEC_PREFIX],
        Stage::Stage3 => &[""],
    }
}

fn trained() -> &'static TrainRun {
    static RUN: OnceLock<TrainRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = Config::default();
        let trainer =
            Trainer::new(cfg.train.clone(), cfg.scene.clone(), cfg.render.clone()).unwrap();
        let start = Instant::now();
        let mut models = Models::new(
            cfg.render.channels,
            &cfg.model,
            &cfg.perception,
            cfg.train.seed,
        )
        .unwrap();
        let initial = models.clone();
        let mut prev = models.store.snapshot_prefix("");
        let mut violations = Vec::new();
        let mut still = Vec::new();
        let mut checkpoints = Vec::new();
        let outcome = trainer
            .train(&mut models, |stage, m| {
                let now = m.store.snapshot_prefix("");
                let allowed = movable(stage);
                let mut moved = 0;
                for ((name, a), (_, b)) in prev.iter().zip(&now) {
                    if a != b {
                        moved += 1;
                        if !allowed.iter().any(|p| name.starts_with(p)) {
                            violations.push(format!("stage {stage} changed {name}"));
                        }
                    }
                }
                if moved == 0 {
                    still.push(stage);
                }
                prev = now;
                if matches!(stage, Stage::Stage1 | Stage::Stage2) {
                    checkpoints.push(m.clone());
                }
                Ok(())
            })
            .unwrap();
        let elapsed = start.elapsed();
        let after_stage2 = checkpoints.pop().unwrap();
        let after_stage1 = checkpoints.pop().unwrap();
        TrainRun {
            cfg,
            initial,
            after_stage1,
            after_stage2,
            models,
            outcome,
            elapsed,
            freeze_violations: violations,
            still_stages: still,
        }
    })
}

#[test]
fn c06_training_contracts() {
    let _g = serial();
    let run = trained();
    let w = run.cfg.train.weights();
    let bad_identity = run
        .outcome
        .history
        .iter()
        .filter(|r| (r.total - r.weighted_total(&w)).abs() > 1e-12 * r.total.abs().max(1.0))
        .count();
    let s1 = run.outcome.probe(Stage::Stage1).unwrap();
    let s2 = run.outcome.probe(Stage::Stage2).unwrap();
    let s1_ratio = s1.after.total / s1.before.total;
    let s2_ratio = s2.after.mse_feat / s2.before.mse_feat;
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    let pass = run.freeze_violations.is_empty()
        && run.still_stages.is_empty()
        && bad_identity == 0
        && s1_ratio < 0.6
        && s2_ratio < 0.6
        && minutes < 30.0;
    let mut detail = format!(
        "freeze violations {}, idle stages {:?}, identity failures {bad_identity}/{}, stage-1 total {:.4} -> {:.4} ({:.0}%), stage-2 mse_feat {:.4} -> {:.4} ({:.0}%), {minutes:.1} min",
        run.freeze_violations.len(),
        run.still_stages,
        run.outcome.history.len(),
        s1.before.total,
        s1.after.total,
        100.0 * s1_ratio,
        s2.before.mse_feat,
        s2.after.mse_feat,
        100.0 * s2_ratio,
    );
    if let Some(v) = run.freeze_violations.first() {
        detail.push_str(&format!(" (first: {v})"));
    }
    gate("6 training contracts", pass, &detail);
}

fn held_out_maps(run: &TrainRun, m: Modality) -> Vec<(FeatureMap, FeatureMap)> {
    (0..16u64)
        .map(|j| {
            let scene = sample_scene(0xACCE_0000 + j, &run.cfg.scene).unwrap();
            let v = (j as usize) % scene.vehicles.len();
            let sensor = render_features(&scene, v, m, j, &run.cfg.render).unwrap();
            let anchor = render_features(&scene, v, Modality::Lidar, j, &run.cfg.render).unwrap();
            (sensor, anchor)
        })
        .collect()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}

#[test]
fn example_converter_training() {
    let _g = serial();
    let run = trained();
    let conversion = |models: &Models, m: Modality| {
        let maps = held_out_maps(run, m);
        maps.iter()
            .map(|(x, anchor)| {
                let s = models
                    .converter(m)
                    .unwrap()
                    .to_standard(&models.store, x)
                    .unwrap();
                mse(&s.tensor, &anchor.tensor)
            })
            .sum::<f64>()
            / maps.len() as f64
    };
    let cycle = |models: &Models, m: Modality| {
        let maps = held_out_maps(run, m);
        maps.iter()
            .map(|(x, _)| {
                mse(
                    &models
                        .converter(m)
                        .unwrap()
                        .cycle(&models.store, x)
                        .unwrap()
                        .tensor,
                    &x.tensor,
                )
            })
            .sum::<f64>()
            / maps.len() as f64
    };
    let mut lines = Vec::new();
    let mut pass = true;
    for m in Modality::SENSORS {
        let (c0, c1) = (
            conversion(&run.initial, m),
            conversion(&run.after_stage1, m),
        );
        let (y0, y1) = (cycle(&run.initial, m), cycle(&run.after_stage1, m));
        pass &= c1 <= 0.5 * c0 && y1 < 0.5 * y0;
        lines.push(format!(
            "{m} to-standard {c0:.4} -> {c1:.4}, cycle {y0:.4} -> {y1:.4}"
        ));
    }
    gate(
        "example converter stage-1 reduction",
        pass,
        &lines.join("; "),
    );
}

#[test]
fn example_codec_noiseless_round_trip() {
    let _g = serial();
    let run = trained();
    let models = &run.after_stage2;
    let (mut err, mut var) = (0.0, 0.0);
    for m in Modality::SENSORS {
        for (x, _) in held_out_maps(run, m) {
            let f = models
                .converter(m)
                .unwrap()
                .to_standard(&models.store, &x)
                .unwrap();
            let (h, w) = f.hw();
            let batch = f.tensor.clone().reshape(&[1, h, w, f.channels()]).unwrap();
            let imp = models
                .selector
                .importance(&models.store, &batch)
                .unwrap()
                .remove(0);
            let (_, pack) = select(&f.tensor, &imp, 0.06).unwrap();
            let (block, gain) = models.codec.encode(&models.store, &pack.features).unwrap();
            let back = models
                .codec
                .decode(&models.store, &block, gain, pack.k())
                .unwrap();
            let d = pack.features.data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            err += mse(&back, &pack.features);
            var += d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        }
    }
    let ratio = err / var;
    gate(
        "example codec noiseless round trip",
        ratio < 0.25,
        &format!("MSE / Var(F) = {:.1}%", 100.0 * ratio),
    );
}

// -------------------------------------------------------------- evaluation

fn harness_cfg(seed: u64) -> Config {
    let mut cfg = trained().cfg.clone();
    cfg.experiment.seed = seed;
    cfg
}

fn snr_sweep() -> &'static Vec<ResultRow> {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let cfg = harness_cfg(0);
        Harness::new(&trained().models, &cfg)
            .unwrap()
            .run_snr_sweep()
            .unwrap()
    })
}

fn lambda_sweep() -> &'static Vec<ResultRow> {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let cfg = harness_cfg(0);
        Harness::new(&trained().models, &cfg)
            .unwrap()
            .run_lambda_sweep()
            .unwrap()
    })
}

fn curve(rows: &[ResultRow], method: Method) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.method == method)
        .map(|r| (r.snr_db, r.ap70))
        .collect()
}

#[test]
fn c07_sensor_matrix_ordering() {
    let _g = serial();
    let run = trained();
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = harness_cfg(seed);
        let rows = Harness::new(&run.models, &cfg)
            .unwrap()
            .run_sensor_matrix()
            .unwrap();
        let (ll, lc, cc, cl) = (rows[0].ap70, rows[1].ap70, rows[2].ap70, rows[3].ap70);
        let ok = ll >= lc && lc >= cl && cl >= cc && cl - cc > 0.05;
        passed += usize::from(ok);
        lines.push(format!(
            "seed {seed}: L/L {ll:.3} L/C {lc:.3} C/L {cl:.3} C/C {cc:.3} {}",
            if ok { "ok" } else { "x" }
        ));
    }
    gate(
        "7 sensor-matrix ordering",
        passed >= 4,
        &format!("{passed}/5 seeds; {}", lines.join("; ")),
    );
}

#[test]
fn c08_cliff_effect() {
    let _g = serial();
    let rows = snr_sweep();
    let cmsc = curve(rows, Method::Cmsc);
    let q256 = curve(rows, Method::Baseline256Qam);
    let q16 = curve(rows, Method::Baseline16Qam);
    let at20 = |c: &[(f64, f64)]| c.iter().find(|p| p.0 == 20.0).unwrap().1;
    let (c20, b20) = (at20(&cmsc), at20(&q256));
    let cliff: Vec<f64> = q256
        .iter()
        .zip(&cmsc)
        .filter(|(b, c)| b.0 < 10.0 && b.1 < 0.5 * b20 && c.1 >= 0.75 * c20)
        .map(|(b, _)| b.0)
        .collect();
    let crossing: Vec<f64> = (1..q16.len())
        .filter(|&i| q16[i].0 >= 10.0 && q16[i - 1].1 >= q256[i - 1].1 && q16[i].1 < q256[i].1)
        .map(|i| q16[i].0)
        .collect();
    let fmt = |c: &[(f64, f64)]| {
        c.iter()
            .map(|p| format!("{:.2}", p.1))
            .collect::<Vec<_>>()
            .join(" ")
    };
    gate(
        "8 cliff effect",
        !cliff.is_empty() && !crossing.is_empty(),
        &format!(
            "cliff SNRs {cliff:?}, 16-QAM crossing {crossing:?}; cmsc [{}] 256 [{}] 16 [{}]",
            fmt(&cmsc),
            fmt(&q256),
            fmt(&q16)
        ),
    );
}

#[test]
fn c09_lambda_saturation() {
    let _g = serial();
    let rows = lambda_sweep();
    let cfg = &trained().cfg.experiment.lambda_sweep;
    let mut pass = true;
    let mut lines = Vec::new();
    for &snr in &cfg.snrs {
        let ap: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == Method::Cmsc && r.snr_db == snr)
            .map(|r| r.ap70)
            .collect();
        let n = ap.len();
        let monotone = ap.windows(2).all(|p| p[1] >= p[0] - 0.02);
        let saturating = ap[n - 1] - ap[n - 2] < ap[1] - ap[0];
        pass &= monotone && saturating;
        lines.push(format!(
            "{snr} dB [{}]{}{}",
            ap.iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(" "),
            if monotone { "" } else { " not monotone" },
            if saturating { "" } else { " not saturating" }
        ));
    }
    gate("9 lambda saturation", pass, &lines.join("; "));
}

#[test]
fn c10_upper_bound_dominance() {
    let _g = serial();
    let run = trained();
    let mut violations = Vec::new();
    let mut points = 0;
    let snr_rows = snr_sweep();
    for ub in snr_rows.iter().filter(|r| r.method == Method::UpperBound) {
        for r in snr_rows
            .iter()
            .filter(|r| r.snr_db == ub.snr_db && r.method != Method::UpperBound)
        {
            points += 1;
            if r.ap70 > ub.ap70 + 0.01 {
                violations.push(format!(
                    "{} at {} dB: {:.3} > {:.3}",
                    r.method, r.snr_db, r.ap70, ub.ap70
                ));
            }
        }
    }
    let cfg = harness_cfg(0);
    let h = Harness::new(&run.models, &cfg).unwrap();
    let lc = &cfg.experiment.lambda_sweep;
    for r in lambda_sweep() {
        let ub = h
            .evaluate(&EvalPoint {
                method: Method::UpperBound,
                channel: lc.channel,
                snr_db: r.snr_db,
                lambda: r.lambda,
                ego: lc.ego_modality,
                cavs: lc.cav_modalities.clone(),
            })
            .unwrap();
        points += 1;
        if r.ap70 > ub.ap70 + 0.01 {
            violations.push(format!(
                "{} at {} dB, lambda {}: {:.3} > {:.3}",
                r.method, r.snr_db, r.lambda, r.ap70, ub.ap70
            ));
        }
    }
    gate(
        "10 upper-bound dominance",
        violations.is_empty(),
        &format!(
            "{points} points, {} violations {}",
            violations.len(),
            violations.join("; ")
        ),
    );
}

#[test]
fn c11_jscc_ablation() {
    let _g = serial();
    let run = trained();
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = harness_cfg(seed);
        let h = Harness::new(&run.models, &cfg).unwrap();
        let ap = |method| {
            h.evaluate(&EvalPoint {
                method,
                channel: ChannelModel::Awgn,
                snr_db: 20.0,
                lambda: 0.06,
                ego: EgoChoice::Lidar,
                cavs: CavChoice::Random,
            })
            .unwrap()
            .ap70
        };
        let (c, j) = (ap(Method::Cmsc), ap(Method::BaselineJscc));
        passed += usize::from(c - j > 0.02);
        lines.push(format!("seed {seed}: cmsc {c:.3} jscc {j:.3}"));
    }
    gate(
        "11 JSCC ablation",
        passed >= 4,
        &format!("{passed}/5 seeds; {}", lines.join("; ")),
    );
}

#[test]
fn example_snr_trends() {
    let _g = serial();
    let mut failures = Vec::new();
    let snr_rows = snr_sweep();
    for method in Method::ALL {
        let c = curve(snr_rows, method);
        let (lo, hi) = (c.first().unwrap().1, c.last().unwrap().1);
        if hi < lo {
            failures.push(format!("{method}: {hi:.3} at 20 dB < {lo:.3} at 0 dB"));
        }
    }
    let rows = lambda_sweep();
    let snrs = &trained().cfg.experiment.lambda_sweep.snrs;
    for r in rows {
        for s in rows
            .iter()
            .filter(|s| s.lambda == r.lambda && s.snr_db > r.snr_db)
        {
            if s.ap70 < r.ap70 - 0.02 {
                failures.push(format!(
                    "lambda {}: {:.3} at {} dB < {:.3} at {} dB",
                    r.lambda, s.ap70, s.snr_db, r.ap70, r.snr_db
                ));
            }
        }
    }
    gate(
        "example SNR trends",
        failures.is_empty(),
        &format!(
            "methods monotone end to end, SNRs {snrs:?} ordered at every lambda; {}",
            failures.join("; ")
        ),
    );
}

// --------------------------------------------------------- reproducibility

const TINY: &str = r#"
[scene]
height = 16
width = 16
min_objects = 1
max_objects = 3
max_size = 3.0
sensor_range = 7.0
min_vehicle_spacing = 5.0

[render]
channels = 8

[train]
batch_size = 2
pretrain_steps = 3
stage1_steps = 3
stage2_steps = 3
stage3_steps = 3
probe_scenes = 2

[experiment]
scenes = 3
seed = 5

[experiment.snr_sweep]
snrs = [0.0, 10.0, 20.0]

[experiment.lambda_sweep]
snrs = [5.0]
lambdas = [0.05, 0.2]
"#;

fn cmsc(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cmsc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn run_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let common = ["--config", "tiny.toml", "--checkpoint", "m.ckpt"];
    let mut out = Vec::new();
    let train = cmsc(
        dir,
        &[&["train"], &common[..], &["--out", "loss.csv"]].concat(),
    );
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    out.push((
        "loss.csv".into(),
        std::fs::read(dir.join("loss.csv")).unwrap(),
    ));
    out.push(("m.ckpt".into(), std::fs::read(dir.join("m.ckpt")).unwrap()));
    for sub in ["sensor-matrix", "snr-sweep", "lambda-sweep"] {
        let file = format!("{sub}.csv");
        let o = cmsc(dir, &[&[sub], &common[..], &["--out", &file]].concat());
        assert!(
            o.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        out.push((file.clone(), std::fs::read(dir.join(&file)).unwrap()));
        let o = cmsc(dir, &[&[sub], &common[..], &["--seed", "9"]].concat());
        assert!(o.status.success());
        out.push((format!("{sub} stdout"), o.stdout));
    }
    let o = cmsc(dir, &["phy-selftest"]);
    assert!(o.status.success());
    out.push(("phy-selftest".into(), o.stdout));
    out
}

#[test]
fn c12_cli_reproducibility() {
    let _g = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_all(a.path());
    let second = run_all(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1 || x.1.is_empty())
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bad = cmsc(a.path(), &["snr-sweep", "--config", "missing.toml"]);
    let bad_ckpt = cmsc(
        a.path(),
        &[
            "snr-sweep",
            "--config",
            "tiny.toml",
            "--checkpoint",
            "none.ckpt",
        ],
    );
    let errors_ok = !bad.status.success()
        && !bad_ckpt.status.success()
        && String::from_utf8_lossy(&bad.stderr).starts_with("error:");
    gate(
        "12 reproducibility",
        differing.is_empty() && errors_ok,
        &format!(
            "{} outputs compared across two runs, differing {differing:?}, contract errors exit nonzero: {errors_ok}",
            first.len()
        ),
    );
}
