//! Acceptance suite: one test per criterion, each printing a pass line.
//! Run with `cargo test -p dupnet-cli --test acceptance -- --nocapture`
//! to see the lines; the training-trend criterion takes the longest
//! (several minutes of seeded desk-scale training).

use dupnet_core::bitpack::{pack_act, pack_weights, packed_conv2d};
use dupnet_core::config::NetworkSpec;
use dupnet_core::cost::{analyze, CostMode};
use dupnet_core::layers::{
    conv2d_int_ref, dupfeature_conv_int, dupweight_conv_int, weight_group_sum, DupMode, Reduce,
};
use dupnet_core::model::{InferPath, Model};
use dupnet_core::presets;
use dupnet_core::quant::{QTensor, QWeights};
use dupnet_core::synth::{generate, GtBox, SynthDatasetSpec};
use dupnet_core::tensor::Tensor;
use dupnet_core::train::{
    default_fp_budget, eval_detection, forward_backward, gradcheck_suite, train, Batch,
    TrainConfig,
};
use dupnet_core::weights::{layer_payload_bytes, load_weights, save_weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

#[test]
fn criterion_1_table1_per_layer_costs() {
    let spec = NetworkSpec::parse(presets::TINIER_YOLO_CFG).unwrap();
    let report = analyze(&spec, CostMode::DupFull);
    let expected_mflops = [10.0, 3.3, 3.3, 3.3, 3.3, 13.3, 53.2, 11.8, 6.2];
    assert_eq!(report.rows.len(), expected_mflops.len());
    for (row, want) in report.rows.iter().zip(expected_mflops) {
        assert!(
            close(row.mflops(), want, 0.05),
            "{}: {} MFLOPs, expected {}",
            row.name,
            row.mflops(),
            want
        );
    }
    // the head is reported at its arithmetically consistent 16.875 KB
    let conv9 = report.rows.last().unwrap();
    assert!(close(conv9.weight_kb(), 16.875, 1e-9), "{}", conv9.weight_kb());
    assert!(
        close(report.total_weight_kb(), 240.9, 0.5),
        "total {} KB",
        report.total_weight_kb()
    );
    println!(
        "ACCEPTANCE 1 table-1 per-layer costs: PASS (total {:.1} MFLOPs, {:.2} KB)",
        report.total_mflops(),
        report.total_weight_kb()
    );
}

#[test]
fn criterion_2_table3_quantization_rows() {
    let base = NetworkSpec::parse(presets::TINIER_YOLO_H_CFG).unwrap();
    let expected = [
        (1338.9, 2637.3),
        (422.2, 366.6),
        (215.9, 344.8),
        (146.0, 344.0),
        (49.3, 82.4),
    ];
    for ((name, mask), (mflops, kb)) in presets::sensitivity_rows().iter().zip(expected) {
        let spec = presets::with_quant_pattern(&base, mask).unwrap();
        let report = analyze(&spec, CostMode::DupFull);
        assert!(
            close(report.total_mflops(), mflops, 0.2),
            "{name}: {} MFLOPs, expected {mflops}",
            report.total_mflops()
        );
        assert!(
            close(report.total_weight_kb(), kb, 0.2),
            "{name}: {} KB, expected {kb}",
            report.total_weight_kb()
        );
    }
    println!("ACCEPTANCE 2 table-3 quantization rows: PASS (5 rows)");
}

#[test]
fn criterion_3_table4_and_table6_duplication_costs() {
    let base = NetworkSpec::parse(presets::TINIER_YOLO_H_CFG).unwrap();
    // progressive feature duplication
    let expected = [(49.3, 82.4), (62.6, 83.4), (92.6, 83.5), (95.7, 91.9)];
    for ((name, dups), (mflops, kb)) in presets::feature_dup_rows().iter().zip(expected) {
        let spec = presets::with_feature_dup(&base, dups).unwrap();
        let report = analyze(&spec, CostMode::DupFull);
        assert!(
            close(report.total_mflops(), mflops, 0.2),
            "{name}: {} MFLOPs, expected {mflops}",
            report.total_mflops()
        );
        assert!(
            close(report.total_weight_kb(), kb, 0.2),
            "{name}: {} KB, expected {kb}",
            report.total_weight_kb()
        );
    }
    // combined presets
    for (cfg, mflops, kb) in [
        (presets::DUPNET_CFG, 62.6, 36.9),
        (presets::DUPNET_L_CFG, 95.7, 45.4),
    ] {
        let report = analyze(&NetworkSpec::parse(cfg).unwrap(), CostMode::DupFull);
        assert!(close(report.total_mflops(), mflops, 0.2), "{}", report.total_mflops());
        assert!(close(report.total_weight_kb(), kb, 0.2), "{}", report.total_weight_kb());
    }
    // weights-only duplication of the halved baseline
    let weights_only =
        presets::with_weight_dup(&base, &[1, 1, 1, 1, 1, 4, 4, 4, 1]).unwrap();
    let report = analyze(&weights_only, CostMode::DupFull);
    assert!(close(report.total_weight_kb(), 35.9, 0.2), "{}", report.total_weight_kb());
    assert!(
        close(
            analyze(&base, CostMode::DupFull).total_weight_kb(),
            82.4,
            0.2
        ),
        "halved baseline size"
    );
    println!("ACCEPTANCE 3 table-4/table-6 duplication costs: PASS");
}

#[test]
fn criterion_4_packed_kernels_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE5501);
    let mut cases = 0usize;
    while cases < 1000 {
        let a_bits = [1u8, 2, 8][rng.gen_range(0..3)];
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let c = rng.gen_range(1..=64);
        let c_out = rng.gen_range(1..=8);
        let h = rng.gen_range(3..=9);
        let w = rng.gen_range(3..=9);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let max_code = (1i32 << a_bits) - 1;
        let codes: Vec<i32> = (0..c * h * w).map(|_| rng.gen_range(0..=max_code)).collect();
        let q = QTensor::from_codes(codes, (1, c, h, w), 1.0, a_bits);
        let levels: Vec<i32> = (0..c_out * c * k * k)
            .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
            .collect();
        let wq = QWeights {
            levels,
            c_out,
            c_in: c,
            k,
            scale: vec![1.0; c_out],
            w_bits: 1,
        };
        let reference = conv2d_int_ref(&q, &wq, stride, pad).unwrap();
        let packed = packed_conv2d(
            &pack_act(&q).unwrap(),
            &pack_weights(&wq).unwrap(),
            stride,
            pad,
        )
        .unwrap();
        assert_eq!(reference, packed, "case {cases}: a{a_bits} k{k} s{stride} p{pad} c{c}");
        cases += 1;
    }
    println!("ACCEPTANCE 4 packed kernels bit-exact: PASS ({cases} cases, zero mismatches)");
}

#[test]
fn criterion_5_rewrite_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE5502);
    let mut dup_weight_cases = 0usize;
    let mut dup_feature_cases = 0usize;
    while dup_weight_cases < 1000 || dup_feature_cases < 1000 {
        let d = [2usize, 4, 8][rng.gen_range(0..3)];
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let c_out = rng.gen_range(1..=4);
        let pad = if k == 3 { 1 } else { 0 };
        if dup_weight_cases < 1000 {
            let cb = rng.gen_range(1..=4);
            let c = cb * d;
            let codes: Vec<i32> = (0..c * h * w).map(|_| rng.gen_range(0..=3)).collect();
            let x = QTensor::from_codes(codes, (1, c, h, w), 1.0, 2);
            let levels: Vec<i32> = (0..c_out * cb * k * k)
                .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
                .collect();
            let wt = QWeights {
                levels,
                c_out,
                c_in: cb,
                k,
                scale: vec![1.0; c_out],
                w_bits: 1,
            };
            let tile = dupweight_conv_int(&x, &wt, d, DupMode::Expand, 1, pad).unwrap();
            let fast = dupweight_conv_int(&x, &wt, d, DupMode::Fast, 1, pad).unwrap();
            assert_eq!(tile, fast, "dup-weight case {dup_weight_cases} d={d}");
            dup_weight_cases += 1;
        }
        if dup_feature_cases < 1000 {
            let c = rng.gen_range(1..=4);
            let codes: Vec<i32> = (0..c * h * w).map(|_| rng.gen_range(0..=3)).collect();
            let x = QTensor::from_codes(codes, (1, c, h, w), 1.0, 2);
            let levels: Vec<i32> = (0..c_out * c * d * k * k)
                .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
                .collect();
            let wd = QWeights {
                levels,
                c_out,
                c_in: c * d,
                k,
                scale: vec![1.0; c_out],
                w_bits: 1,
            };
            let dup = dupfeature_conv_int(&x, &wd, d, DupMode::Expand, 1, pad).unwrap();
            let fast = dupfeature_conv_int(&x, &wd, d, DupMode::Fast, 1, pad).unwrap();
            assert_eq!(dup, fast, "dup-feature case {dup_feature_cases} d={d}");
            dup_feature_cases += 1;
        }
    }
    // summed sign weights at factor 4 take values in {-4, -2, 0, 2, 4} only
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..500 {
        let levels: Vec<f64> = (0..8).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let w = Tensor::new(2, 4, 1, 1, levels).unwrap();
        for &v in weight_group_sum(&w, 4).unwrap().data() {
            assert!(
                [-4.0, -2.0, 0.0, 2.0, 4.0].contains(&v),
                "unexpected summed weight {v}"
            );
            seen.insert(v as i64);
        }
    }
    assert_eq!(seen.len(), 5, "all five values should occur");
    println!(
        "ACCEPTANCE 5 rewrite identities: PASS ({dup_weight_cases} + {dup_feature_cases} cases)"
    );
}

#[test]
fn criterion_6_gradient_checks() {
    for row in gradcheck_suite(1e-3) {
        assert!(
            row.max_rel_err < 1e-4,
            "{}: max relative error {}",
            row.name,
            row.max_rel_err
        );
    }
    // average-mode reductions equal sum-mode reductions divided by d,
    // exactly, both at the operation level ...
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE5506);
    for d in [2usize, 4, 8] {
        let g = Tensor::from_fn(3, 2 * d, 3, 3, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let avg = dupnet_core::layers::dupweight_grad_template(&g, d, Reduce::Average).unwrap();
        let sum = dupnet_core::layers::dupweight_grad_template(&g, d, Reduce::Sum).unwrap();
        for (a, s) in avg.data().iter().zip(sum.data().iter()) {
            assert_eq!(a * d as f64, *s, "dup-weight reduction, d={d}");
        }
        let avg = dupnet_core::layers::dupfeature_grad_input(&g, d, Reduce::Average).unwrap();
        let sum = dupnet_core::layers::dupfeature_grad_input(&g, d, Reduce::Sum).unwrap();
        for (a, s) in avg.data().iter().zip(sum.data().iter()) {
            assert_eq!(a * d as f64, *s, "dup-feature reduction, d={d}");
        }
    }
    // ... and end to end: in a conv2-feature-duplicated net the factor
    // reaches every parameter upstream of the duplication
    let spec = presets::desk64_variant(4, 1).unwrap();
    let model = Model::init(&spec, 3);
    let data = generate(&SynthDatasetSpec {
        num_images: 2,
        seed: 77,
        ..Default::default()
    });
    let mut images = Tensor::zeros(2, 1, 64, 64);
    for (i, img) in data.iter().enumerate() {
        images.data_mut()[i * 64 * 64..(i + 1) * 64 * 64].copy_from_slice(img.to_tensor().data());
    }
    let batch = Batch {
        images,
        gts: data.iter().map(|d| d.boxes.clone()).collect(),
    };
    let avg_cfg = TrainConfig {
        reduce: Reduce::Average,
        ..Default::default()
    };
    let sum_cfg = TrainConfig {
        reduce: Reduce::Sum,
        ..Default::default()
    };
    let (_, g_avg) = forward_backward(&mut model.clone(), &batch, &avg_cfg).unwrap();
    let (_, g_sum) = forward_backward(&mut model.clone(), &batch, &sum_cfg).unwrap();
    let conv1_avg = g_avg.layers[0].as_ref().unwrap();
    let conv1_sum = g_sum.layers[0].as_ref().unwrap();
    let mut nonzero = false;
    for (a, s) in conv1_avg
        .weights
        .data()
        .iter()
        .zip(conv1_sum.weights.data().iter())
    {
        assert_eq!(a * 4.0, *s, "conv1 average * d must equal sum exactly");
        nonzero |= *s != 0.0;
    }
    assert!(nonzero);
    println!("ACCEPTANCE 6 gradient checks: PASS (all layer types < 1e-4; avg = sum/d exact)");
}

#[test]
fn criterion_7_serialization_round_trips() {
    for name in presets::preset_names() {
        let text = presets::preset_cfg(name).unwrap();
        let spec = NetworkSpec::parse(text).unwrap();
        // config text round-trip
        let again = NetworkSpec::parse(&spec.to_cfg()).unwrap();
        assert_eq!(spec, again, "{name} cfg round-trip");
        // weight container round-trip, folded and unfolded
        let model = Model::init(&spec, 11);
        for fold in [false, true] {
            let bytes = save_weights(&model, fold);
            let loaded = load_weights(&bytes, &spec).unwrap();
            assert_eq!(save_weights(&loaded, fold), bytes, "{name} container (fold={fold})");
        }
    }
    // dup-weight payloads are exactly 1/d_w of the non-dup payload
    let plain = NetworkSpec::parse(presets::TINIER_YOLO_H_CFG).unwrap();
    let dup = NetworkSpec::parse(presets::DUPNET_CFG).unwrap();
    for idx in [5usize, 6, 7] {
        let a = plain.conv_layers().nth(idx).unwrap();
        let b = dup.conv_layers().nth(idx).unwrap();
        assert_eq!(layer_payload_bytes(a), 4 * layer_payload_bytes(b), "conv {}", idx + 1);
    }
    println!("ACCEPTANCE 7 serialization round-trips: PASS (5 presets, both container modes)");
}

/// Desk-scale stand-in for the full-scale experiments: absolute detection
/// rates from the original benchmark are out of reach, so this checks the
/// directions only — feature duplication does not hurt (and typically
/// helps), weight duplication costs at most 0.05.
#[test]
fn criterion_8_training_trend() {
    let train_set: Vec<(Tensor, Vec<GtBox>)> = generate(&SynthDatasetSpec {
        num_images: 2000,
        seed: 10,
        ..Default::default()
    })
    .iter()
    .map(|i| (i.to_tensor(), i.boxes.clone()))
    .collect();
    let eval_set = generate(&SynthDatasetSpec {
        num_images: 200,
        seed: 99999,
        ..Default::default()
    });
    let budget = default_fp_budget(eval_set.len());

    let run = |dx: usize, dw: usize, seed: u64| -> f64 {
        let spec = presets::desk64_variant(dx, dw).unwrap();
        let mut model = Model::init(&spec, seed);
        let cfg = TrainConfig {
            total_iters: 2000,
            seed,
            ..Default::default()
        };
        train(&mut model, &train_set, &cfg, |_, _, _| {}).unwrap();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for img in &eval_set {
            preds.push(model.detect(&img.to_tensor(), 1e-3, InferPath::Reference).unwrap());
            gts.push(img.boxes.clone());
        }
        eval_detection(&preds, &gts, budget, 0.5).unwrap()
    };

    let seeds = [1u64, 2, 3];
    let avg = |dx, dw| seeds.iter().map(|&s| run(dx, dw, s)).sum::<f64>() / seeds.len() as f64;
    let baseline = avg(1, 1);
    let feature_dup = avg(4, 1);
    let weight_dup = avg(1, 4);
    println!(
        "  desk-scale rates over {} seeds: baseline {baseline:.3}, conv2 4x feature dup {feature_dup:.3}, conv3 4x weight dup {weight_dup:.3}",
        seeds.len()
    );
    assert!(
        feature_dup >= baseline,
        "feature duplication should not reduce the rate: {feature_dup} vs {baseline}"
    );
    assert!(
        weight_dup >= baseline - 0.05,
        "weight duplication should cost at most 0.05: {weight_dup} vs {baseline}"
    );
    println!("ACCEPTANCE 8 training trend: PASS");
}

#[test]
fn criterion_9_cmd_train_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    dupnet_core::synth::write_dataset(
        &data_dir,
        &SynthDatasetSpec {
            num_images: 8,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_dupnet");
    let run = |out: &std::path::Path| {
        let status = std::process::Command::new(bin)
            .args([
                "train",
                "desk64",
                data_dir.to_str().unwrap(),
                "--iters",
                "10",
                "--seed",
                "42",
                "--out",
                out.to_str().unwrap(),
            ])
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let a = run(&dir.path().join("a.dupw"));
    let b = run(&dir.path().join("b.dupw"));
    assert_eq!(a, b, "two identical runs must produce identical weight files");
    assert!(!a.is_empty());
    println!("ACCEPTANCE 9 cmd_train determinism: PASS ({} bytes, byte-identical)", a.len());
}
