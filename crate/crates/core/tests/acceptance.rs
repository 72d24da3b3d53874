//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. `HAGMIL_CRITERIA=1,5` runs a subset.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use hagmil::aggregation::{AggregationHead, AggregationVariant};
use hagmil::attention::{exact_attention, nystrom_attention, pinv_newton_schulz, AttentionLayer};
use hagmil::autodiff::{concat_cols, concat_rows, Tape, Var};
use hagmil::checkpoint;
use hagmil::data::hagf::{decode_features, encode_features, round_f32};
use hagmil::data::manifest::DEFAULT_RATIOS;
use hagmil::data::{read_features, synth_generate, write_features, Dataset, FeaturePyramid, SynthConfig};
use hagmil::heatmap::HeatmapGrid;
use hagmil::iat::{IatConfig, IatModel};
use hagmil::metrics::{auc, binary_metrics, classify_metrics, youden_threshold, ThresholdMode};
use hagmil::ops;
use hagmil::params::{BoundParams, ParamSet};
use hagmil::pipeline::{
    evaluate, level_loss, planted_coverage, planted_recall, train, HagConfig, HagModel, Inference, SlideResult, TrainConfig,
};
use hagmil::pyramid::{distill_features, find_sub_patch_ids, select_children, QuadTreeIndex};
use hagmil::rng::{seeded, HagRng};
use hagmil::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{max_grad_error, median, random_tensor};

type Check = Result<String, String>;
type ModuleFn<'a> = Box<dyn for<'t> Fn(Var<'t>, &BoundParams<'t>) -> hagmil::Result<Var<'t>> + 'a>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Weighted sum `Σ out ⊙ W` with a fixed random `W`, as a scalar probe.
fn probe<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> hagmil::Result<Var<'t>> {
    let w = tape.constant(random_tensor(out.rows(), out.cols(), seed, 1.0));
    out.mul(w)?.sum()
}

// ---------------------------------------------------------------- 1

fn tiny_iat() -> IatModel {
    let cfg = IatConfig {
        feature_dim: 8,
        iam_dims: vec![12, 8],
        fusion_dim: 8,
        heads: 2,
        landmarks: 6,
        attn_hidden: 6,
        ..IatConfig::default()
    };
    IatModel::new(cfg, 5).unwrap()
}

fn criterion_1() -> Check {
    const TOL: f64 = 1e-4;
    let a = random_tensor(3, 4, 1, 1.0);
    let b = random_tensor(4, 5, 2, 1.0);
    let c = random_tensor(3, 4, 3, 1.0);
    let row = random_tensor(1, 4, 4, 1.0);
    let pos = Tensor::matrix(3, 4, random_tensor(3, 4, 5, 1.0).data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let sq = random_tensor(1, 1, 6, 1.0);
    let logits = random_tensor(1, 4, 7, 2.0);
    let stoch = {
        // Row-stochastic 4×4 with a dominant diagonal, as produced by softmax kernels.
        let mut t = random_tensor(4, 4, 8, 1.0);
        for i in 0..4 {
            t.data_mut()[i * 4 + i] += 3.0;
        }
        let tape = Tape::new();
        tape.constant(t).softmax_rows().unwrap().to_tensor()
    };

    type Case = (
        &'static str,
        Vec<Tensor>,
        Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> hagmil::Result<Var<'t>>>,
    );
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| probe(t, v[0].matmul(v[1])?, 10)),
        ),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, v| probe(t, v[0].add(v[1])?, 11))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|t, v| probe(t, v[0].sub(v[1])?, 12))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|t, v| probe(t, v[0].mul(v[1])?, 13))),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| probe(t, v[0].add_row(v[1])?, 14)),
        ),
        ("scale", vec![a.clone()], Box::new(|t, v| probe(t, v[0].scale(-1.7)?, 15))),
        (
            "mul_scalar",
            vec![a.clone(), sq.clone()],
            Box::new(|t, v| probe(t, v[0].mul_scalar(v[1])?, 16)),
        ),
        ("recip", vec![pos.clone()], Box::new(|t, v| probe(t, v[0].recip()?, 17))),
        ("tanh", vec![a.clone()], Box::new(|t, v| probe(t, v[0].tanh()?, 18))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| probe(t, v[0].sigmoid()?, 19))),
        ("gelu", vec![a.clone()], Box::new(|t, v| probe(t, v[0].gelu()?, 20))),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), random_tensor(1, 4, 21, 1.0)],
            Box::new(|t, v| probe(t, v[0].layer_norm(v[1], v[2], 1e-5)?, 22)),
        ),
        ("softmax_rows", vec![a.clone()], Box::new(|t, v| probe(t, v[0].softmax_rows()?, 23))),
        ("transpose", vec![a.clone()], Box::new(|t, v| probe(t, v[0].transpose()?, 24))),
        (
            "narrow_cols",
            vec![a.clone()],
            Box::new(|t, v| probe(t, v[0].narrow_cols(1, 2)?, 25)),
        ),
        (
            "concat_cols",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| probe(t, concat_cols(&[v[0], v[1]])?, 26)),
        ),
        (
            "concat_rows",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| probe(t, concat_rows(&[v[0], v[1]])?, 27)),
        ),
        (
            "gather_rows",
            vec![a.clone()],
            Box::new(|t, v| probe(t, v[0].gather_rows(&[2, 0, 2])?, 28)),
        ),
        ("sum", vec![a.clone()], Box::new(|_, v| v[0].mul(v[0])?.sum())),
        ("mean", vec![a.clone()], Box::new(|_, v| v[0].mul(v[0])?.mean())),
        ("max", vec![a.clone()], Box::new(|_, v| v[0].max())),
        (
            "cross_entropy_smoothed",
            vec![logits.clone()],
            Box::new(|_, v| v[0].cross_entropy_smoothed(2, 0.1)),
        ),
        (
            "smooth_top1_svm",
            vec![logits.clone()],
            Box::new(|_, v| v[0].smooth_top1_svm(1, 0.7, 1.0)),
        ),
        (
            "pinv_newton_schulz",
            vec![stoch.clone()],
            Box::new(|t, v| probe(t, pinv_newton_schulz(v[0], 6)?, 29)),
        ),
    ];

    let mut report = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, inputs, f) in &cases {
        let e = max_grad_error(inputs, f);
        worst = worst.max(e);
        if e >= TOL {
            report.push(format!("{name}={e:.2e}"));
        }
    }

    // Attention layers and aggregation heads, differentiating w.r.t. inputs
    // and every parameter.
    let mut rng = seeded(40);
    let mut ps = ParamSet::new();
    let layer = AttentionLayer::new(&mut ps, "attn", 4, 2, 2, 6, 0.0, &mut rng).unwrap();
    let gated = AggregationHead::new(&mut ps, "g", AggregationVariant::Gated, 4, 3, 0.0, &mut rng);
    let plain = AggregationHead::new(&mut ps, "p", AggregationVariant::Attention, 4, 3, 0.0, &mut rng);
    let mut inputs = vec![random_tensor(6, 4, 41, 1.0)];
    inputs.extend(ps.tensors().iter().cloned());
    let modules: Vec<(&str, ModuleFn)> = vec![
        ("exact_attention", Box::new(|x, p| exact_attention(x, &layer.bind(p)))),
        ("nystrom_attention", Box::new(|x, p| nystrom_attention(x, &layer.bind(p), 2, 6))),
        (
            "gated_aggregation",
            Box::new(|x, p| Ok(gated.forward(x, p, None::<&mut HagRng>)?.1)),
        ),
        (
            "attention_aggregation",
            Box::new(|x, p| Ok(plain.forward(x, p, None::<&mut HagRng>)?.1)),
        ),
    ];
    for (name, m) in &modules {
        let e = max_grad_error(&inputs, |t, v| {
            let bound = BoundParams::from_vars(v[1..].to_vec());
            probe(t, m(v[0], &bound)?, 42)
        });
        worst = worst.max(e);
        if e >= TOL {
            report.push(format!("{name}={e:.2e}"));
        }
    }

    // Full tiny IAT under the composite level loss.
    let model = tiny_iat();
    let features = random_tensor(6, 8, 50, 1.0);
    let hag = HagConfig {
        num_levels: 2,
        k_per_level: vec![1],
        k_loss: 3,
        model: model.config.clone(),
        ..HagConfig::default()
    };
    let mut inputs = vec![features];
    inputs.extend(model.params.tensors().iter().cloned());
    let e = max_grad_error(&inputs, |_, v| {
        let bound = BoundParams::from_vars(v[1..].to_vec());
        let out = model.forward(v[0], &bound, None::<&mut HagRng>)?;
        let att = out.attention.to_tensor().into_data();
        level_loss(out.bag_logits, &att, out.patch_logits, 1, &hag, 1)
    });
    worst = worst.max(e);
    if e >= TOL {
        report.push(format!("tiny_iat={e:.2e}"));
    }
    let checked = cases.len() + modules.len() + 1;
    if report.is_empty() {
        Ok(format!("{checked} gradient checks, max relative error {worst:.2e} < 1e-4"))
    } else {
        Err(format!("failing: {}", report.join(", ")))
    }
}

// ---------------------------------------------------------------- 2

fn attention_layer(dim: usize, heads: usize, landmarks: usize, seed: u64) -> (ParamSet, AttentionLayer) {
    let mut rng = seeded(seed);
    let mut ps = ParamSet::new();
    let layer = AttentionLayer::new(&mut ps, "attn", dim, heads, landmarks, 6, 0.0, &mut rng).unwrap();
    (ps, layer)
}

/// `(exact, nystrom)` outputs for one input.
fn attention_pair(x: &Tensor, ps: &ParamSet, layer: &AttentionLayer, landmarks: usize) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let bound = ps.bind(&tape);
    let p = layer.bind(&bound);
    let xv = tape.constant(x.clone());
    let exact = exact_attention(xv, &p).unwrap().to_tensor();
    let approx = nystrom_attention(xv, &p, landmarks, layer.pinv_iters).unwrap().to_tensor();
    (exact, approx)
}

fn criterion_2() -> Check {
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let n = 1 + (case as usize * 7) % 32;
        let landmarks = n + (case as usize % 3) * 5;
        let (ps, layer) = attention_layer(8, 2, landmarks, 100 + case);
        let x = random_tensor(n, 8, 200 + case, 1.0);
        let (exact, approx) = attention_pair(&x, &ps, &layer, landmarks);
        worst = worst.max(exact.max_abs_diff(&approx));
    }
    ensure(worst <= 1e-6, format!("landmarks >= n: max deviation {worst:.2e} > 1e-6"))?;

    let grid = [4usize, 8, 16, 32];
    let mut medians = Vec::new();
    for &m in &grid {
        let errs: Vec<f64> = (0..20u64)
            .map(|seed| {
                let (ps, layer) = attention_layer(8, 2, m, 300 + seed);
                let x = random_tensor(64, 8, 400 + seed, 1.0);
                let (exact, approx) = attention_pair(&x, &ps, &layer, m);
                let num: f64 = exact.data().iter().zip(approx.data()).map(|(a, b)| (a - b).powi(2)).sum();
                let den: f64 = exact.data().iter().map(|a| a * a).sum();
                (num / den).sqrt()
            })
            .collect();
        medians.push(median(&errs));
    }
    let shown = medians.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(" ");
    ensure(
        medians.windows(2).all(|w| w[1] <= w[0]),
        format!("median relative error over landmarks {grid:?} not non-increasing: {shown}"),
    )?;
    Ok(format!(
        "50 cases max deviation {worst:.2e}; n=64 median error over {grid:?}: {shown}"
    ))
}

// ---------------------------------------------------------------- 3

/// Selection by repeated arg-max (first position wins ties).
fn brute_force_parents(bag_ids: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for (slot, &pos) in left.iter().enumerate() {
            if scores[pos] > scores[left[best]] {
                best = slot;
            }
        }
        out.push(bag_ids[left.remove(best)]);
    }
    out
}

fn criterion_3() -> Check {
    let mut rng = seeded(3000);
    let mut max_bag = 0;
    for case in 0..1000 {
        let grid = (rng.gen_range(1..=4usize), rng.gen_range(1..=4usize));
        let levels = rng.gen_range(2..=4usize);
        let mut mask: Vec<bool> = (0..grid.0 * grid.1).map(|_| rng.gen_bool(0.7)).collect();
        let first = rng.gen_range(0..mask.len());
        mask[first] = true;
        let idx = QuadTreeIndex::build(grid, levels, &mask).unwrap();
        let roots = mask.iter().filter(|&&t| t).count();
        for j in 0..levels {
            ensure(
                idx.count(j) == roots << (2 * (levels - 1 - j)),
                format!("case {case}: level {j} count"),
            )?;
        }

        // Child arithmetic and tiling: the four children exactly cover the parent.
        let level = rng.gen_range(1..levels);
        let parent = rng.gen_range(0..idx.count(level));
        let kids = idx.children(level, parent).unwrap();
        ensure(
            kids == [4 * parent, 4 * parent + 1, 4 * parent + 2, 4 * parent + 3],
            format!("case {case}: child ids"),
        )?;
        let pbox = idx.resolve_coords(&idx.patch_ref(level, parent).unwrap()).unwrap();
        let (pr, pc) = idx.coords(level, parent).unwrap();
        let mut area = 0;
        for (q, &kid) in kids.iter().enumerate() {
            let (r, c) = idx.coords(level - 1, kid).unwrap();
            ensure(
                (r, c) == (2 * pr + q / 2, 2 * pc + q % 2),
                format!("case {case}: child {kid} coords"),
            )?;
            let kbox = idx.resolve_coords(&idx.patch_ref(level - 1, kid).unwrap()).unwrap();
            ensure(
                kbox.row0 >= pbox.row0 && kbox.row1 <= pbox.row1 && kbox.col0 >= pbox.col0 && kbox.col1 <= pbox.col1,
                format!("case {case}: child box escapes parent"),
            )?;
            area += kbox.area();
        }
        ensure(area == pbox.area(), format!("case {case}: children do not tile the parent"))?;
        ensure(
            idx.ids_covering(level - 1, &pbox) == kids.to_vec(),
            format!("case {case}: covering ids"),
        )?;

        // Selection from a shuffled sub-bag with tie-prone scores.
        let mut bag_ids: Vec<usize> = (0..idx.count(level)).collect();
        bag_ids.shuffle(&mut rng);
        bag_ids.truncate(rng.gen_range(1..=bag_ids.len()));
        let scores: Vec<f64> = bag_ids.iter().map(|_| rng.gen_range(-128..=128) as f64 / 64.0).collect();
        let k = rng.gen_range(1..=6usize);
        let (parents, children) = select_children(&bag_ids, &scores, k).unwrap();
        ensure(
            parents == brute_force_parents(&bag_ids, &scores, k),
            format!("case {case}: oracle disagreement"),
        )?;
        ensure(
            children.len() == 4 * k.min(bag_ids.len()) && children.len() <= 4 * k,
            format!("case {case}: bag size"),
        )?;
        let expect: Vec<usize> = parents.iter().flat_map(|&p| find_sub_patch_ids(p)).collect();
        ensure(children == expect, format!("case {case}: children order"))?;
        let mut uniq = children.clone();
        uniq.sort_unstable();
        uniq.dedup();
        ensure(
            uniq.len() == children.len() && children.iter().all(|&c| c < idx.count(level - 1)),
            format!("case {case}: children not distinct ids of the finer level"),
        )?;
        max_bag = max_bag.max(children.len());

        for f in [|x: f64| 5.0 * x - 3.0, |x: f64| x.exp(), |x: f64| x * x * x + x] {
            let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            ensure(
                select_children(&bag_ids, &moved, k).unwrap() == (parents.clone(), children.clone()),
                format!("case {case}: selection changed under a monotone transform"),
            )?;
        }

        let fine = random_tensor(idx.count(level - 1), 3, case, 1.0);
        let distilled = distill_features(&fine, &children).unwrap();
        for (r, &id) in children.iter().enumerate() {
            ensure(distilled.row(r) == fine.row(id), format!("case {case}: distilled row {r}"))?;
        }
    }
    Ok(format!("1000 instances, largest distilled bag {max_bag}"))
}

// ---------------------------------------------------------------- 4

fn fusion_model(seed: u64) -> IatModel {
    let cfg = IatConfig {
        feature_dim: 8,
        iam_dims: vec![12, 8, 10],
        fusion_dim: 6,
        heads: 2,
        attn_hidden: 6,
        ..IatConfig::default()
    };
    IatModel::new(cfg, seed).unwrap()
}

fn criterion_4() -> Check {
    for seed in 0..10u64 {
        let base = fusion_model(seed);
        let x = random_tensor(15, 8, 500 + seed, 1.0);
        for i in 0..base.iams.len() {
            let mut model = base.clone();
            let mut w = Tensor::zeros(model.iams.len(), 1);
            w.data_mut()[i] = 1.0;
            *model.params.get_mut(model.w_b_id()) = w;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let out = model.forward(tape.constant(x.clone()), &bound, None::<&mut HagRng>).unwrap();
            let fused = out.h_bf.to_tensor();
            let picked = out.iams[i].bag.to_tensor();
            ensure(
                fused.shape() == picked.shape() && fused.data() == picked.data(),
                format!("seed {seed}: one-hot w_b on IAM {i} is not bit-exact"),
            )?;
        }
    }

    let mut rng = seeded(4000);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let model = fusion_model(100 + seed);
        let n = rng.gen_range(2..=40usize);
        let x = random_tensor(n, 8, 600 + seed, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let p = model.predict(&x).unwrap().probs;
        let q = model.predict(&x.gather_rows(&perm).unwrap()).unwrap().probs;
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, format!("permuted bag moves probabilities by {worst:.2e}"))?;
    Ok(format!(
        "one-hot fusion bit-exact for 3 IAMs x 10 seeds; permutation deviation {worst:.2e}"
    ))
}

// ---------------------------------------------------------------- 5

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn scalar_of<'t>(v: hagmil::Result<Var<'t>>) -> f64 {
    v.unwrap().to_tensor().item()
}

fn criterion_5() -> Check {
    let mut rng = seeded(5000);

    // Composite loss with the instance term switched off.
    let model = tiny_iat();
    for case in 0..20u64 {
        let n = rng.gen_range(1..=10usize);
        let x = random_tensor(n, 8, 700 + case, 1.0);
        let level = rng.gen_range(0..3usize);
        let cfg = HagConfig {
            num_levels: 3,
            k_per_level: vec![2, 2],
            k_loss: rng.gen_range(1..=4),
            lambda: 0.0,
            model: model.config.clone(),
            ..HagConfig::default()
        };
        let label = rng.gen_range(0..2usize);
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let out = model.forward(tape.constant(x), &bound, None::<&mut HagRng>).unwrap();
        let att = out.attention.to_tensor().into_data();
        let total = scalar_of(level_loss(out.bag_logits, &att, out.patch_logits, label, &cfg, level));
        let ce = scalar_of(out.bag_logits.cross_entropy_smoothed(label, cfg.smoothing(level)));
        ensure(total == ce, format!("lambda=0 case {case}: {total} != {ce}"))?;
    }

    let mut worst_svm: f64 = 0.0;
    let mut worst_ce: f64 = 0.0;
    for case in 0..100 {
        let c = rng.gen_range(2..=6usize);
        let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let y = rng.gen_range(0..c);
        let tape = Tape::new();
        let zv = tape.constant(Tensor::matrix(1, c, z.clone()).unwrap());

        let alpha = 1.0;
        let hinge = (0..c)
            .map(|j| z[j] + if j == y { 0.0 } else { alpha } - z[y])
            .fold(f64::NEG_INFINITY, f64::max);
        let smooth = scalar_of(zv.smooth_top1_svm(y, 1e-3, alpha));
        let plain = ops::smooth_top1_svm(&z, y, 1e-3, alpha).unwrap();
        worst_svm = worst_svm.max((smooth - hinge).abs()).max((plain - hinge).abs());

        let eps = if case % 4 == 0 { 0.0 } else { rng.gen_range(0.0..0.3) };
        let ls = log_softmax(&z);
        let closed: f64 = -(0..c)
            .map(|j| if j == y { 1.0 - eps } else { eps / (c - 1) as f64 } * ls[j])
            .sum::<f64>();
        let tape_ce = scalar_of(zv.cross_entropy_smoothed(y, eps));
        let plain_ce = ops::cross_entropy_smoothed(&z, y, eps).unwrap();
        worst_ce = worst_ce.max((tape_ce - closed).abs()).max((plain_ce - closed).abs());
    }
    ensure(worst_svm <= 1e-2, format!("smooth SVM vs hinge deviation {worst_svm:.2e} > 1e-2"))?;
    ensure(
        worst_ce <= 1e-12,
        format!("smoothed CE vs closed form deviation {worst_ce:.2e} > 1e-12"),
    )?;
    Ok(format!(
        "lambda=0 exact on 20 bags; SVM-hinge gap {worst_svm:.2e}; smoothed CE gap {worst_ce:.2e}"
    ))
}

// ---------------------------------------------------------------- 6, 7

const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_THREADS: usize = 4;

struct Trained {
    seed: u64,
    data: Dataset,
    model: HagModel,
}

fn train_run(synth: &SynthConfig, seed: u64) -> Trained {
    let slides = synth_generate(synth).unwrap();
    let data = Dataset::from_slides(slides, synth.class_count, DEFAULT_RATIOS, seed).unwrap();
    let mut model = HagModel::new(HagConfig::desk(synth.feature_dim), seed).unwrap();
    let tc = TrainConfig {
        threads: E2E_THREADS,
        ..TrainConfig::desk(seed)
    };
    train(&mut model, &data, &tc, |_| Ok(())).unwrap();
    Trained { seed, data, model }
}

fn trained_runs() -> &'static [Trained] {
    static RUNS: OnceLock<Vec<Trained>> = OnceLock::new();
    RUNS.get_or_init(|| {
        E2E_SEEDS
            .iter()
            .map(|&seed| {
                train_run(
                    &SynthConfig {
                        seed,
                        ..SynthConfig::default()
                    },
                    seed,
                )
            })
            .collect()
    })
}

fn test_auc(results: &[SlideResult]) -> f64 {
    let probs: Vec<Vec<f64>> = results.iter().map(|r| r.inference.probs.clone()).collect();
    let labels: Vec<usize> = results.iter().map(|r| r.label).collect();
    classify_metrics(&probs, &labels, ThresholdMode::Youden).unwrap().auc
}

/// Pooled `measure` over the positive slides of a split.
fn pooled_recall(slides: &[FeaturePyramid], results: &[SlideResult], measure: fn(&FeaturePyramid, &Inference) -> (usize, usize)) -> f64 {
    let (mut hits, mut total) = (0, 0);
    for (s, r) in slides.iter().zip(results) {
        let (h, t) = measure(s, &r.inference);
        hits += h;
        total += t;
    }
    hits as f64 / total.max(1) as f64
}

fn criterion_6() -> Check {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for run in trained_runs() {
        let results = evaluate(&run.model, &run.data.test, None, E2E_THREADS).unwrap();
        let auc = test_auc(&results);
        let recall = pooled_recall(&run.data.test, &results, planted_recall);
        let (mut brighter, mut positives) = (0, 0);
        for (s, r) in run.data.test.iter().zip(&results) {
            if s.planted[0].is_empty() {
                continue;
            }
            positives += 1;
            let grid = HeatmapGrid::from_level(r.inference.level(0).unwrap(), &s.index).unwrap();
            let on = grid.mean_where(|id| s.is_planted(0, id)).unwrap_or(0.0);
            let off = grid.mean_where(|id| !s.is_planted(0, id)).unwrap_or(0.0);
            if on > off {
                brighter += 1;
            }
        }
        let heat = brighter as f64 / positives.max(1) as f64;
        lines.push(format!(
            "seed {} auc {auc:.4} recall {recall:.3} heatmap {brighter}/{positives}",
            run.seed
        ));
        if auc < 0.90 {
            failures.push(format!("seed {} auc {auc:.4} < 0.90", run.seed));
        }
        if recall < 0.80 {
            failures.push(format!("seed {} recall {recall:.3} < 0.80", run.seed));
        }
        if heat < 0.90 {
            failures.push(format!("seed {} heatmap {heat:.3} < 0.90", run.seed));
        }
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join(", "), lines.join("; ")))
    }
}

fn criterion_7() -> Check {
    let ks = [1usize, 2, 4, 8];
    let runs = trained_runs();
    let mut medians = Vec::new();
    for &k in &ks {
        let per_seed: Vec<f64> = runs
            .iter()
            .map(|run| {
                let results = evaluate(&run.model, &run.data.test, Some(k), E2E_THREADS).unwrap();
                pooled_recall(&run.data.test, &results, planted_coverage)
            })
            .collect();
        medians.push(median(&per_seed));
    }
    let shown = ks
        .iter()
        .zip(&medians)
        .map(|(k, m)| format!("k={k}: {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        medians.windows(2).all(|w| w[1] >= w[0]),
        format!("median recall decreases in k: {shown}"),
    )?;
    Ok(shown)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let synth = SynthConfig {
        seed: 0,
        num_slides: 1000,
        signal_strength: vec![0.0; 3],
        ..SynthConfig::default()
    };
    let run = train_run(&synth, 0);
    let results = evaluate(&run.model, &run.data.test, None, E2E_THREADS).unwrap();
    let auc = test_auc(&results);
    ensure(
        (0.4..=0.6).contains(&auc),
        format!("null-signal test auc {auc:.4} outside [0.4, 0.6]"),
    )?;
    Ok(format!("null-signal test auc {auc:.4} on {} test slides", results.len()))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let mut rng = seeded(9000);
    for case in 0..500 {
        let n = rng.gen_range(2..=14usize);
        let levels = rng.gen_range(1..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        labels.shuffle(&mut rng);
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = n - pos;

        let mut twice_wins = 0;
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let oracle_auc = twice_wins as f64 / (2 * pos * neg) as f64;
        let got = auc(&scores, &labels).unwrap();
        ensure(got == oracle_auc, format!("case {case}: auc {got} vs oracle {oracle_auc}"))?;

        // Every observed score as a threshold; the lowest among the best wins.
        let mut candidates = scores.clone();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut best: Option<(i64, f64)> = None;
        for &t in &candidates {
            let tp = (0..n).filter(|&i| labels[i] && scores[i] >= t).count() as i64;
            let fp = (0..n).filter(|&i| !labels[i] && scores[i] >= t).count() as i64;
            let j = tp * neg as i64 - fp * pos as i64;
            if best.is_none_or(|(b, _)| j > b) {
                best = Some((j, t));
            }
        }
        let threshold = best.unwrap().1;
        let got_t = youden_threshold(&scores, &labels).unwrap();
        ensure(got_t == threshold, format!("case {case}: threshold {got_t} vs oracle {threshold}"))?;

        let tp = (0..n).filter(|&i| labels[i] && scores[i] >= threshold).count();
        let fp = (0..n).filter(|&i| !labels[i] && scores[i] >= threshold).count();
        let fn_ = pos - tp;
        let tn = neg - fp;
        let f1 = if tp + fp + fn_ == 0 {
            0.0
        } else {
            (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
        };
        let acc = (tp + tn) as f64 / n as f64;
        let rep = binary_metrics(&scores, &labels, ThresholdMode::Youden).unwrap();
        ensure(
            rep.auc == oracle_auc && rep.threshold == Some(threshold) && rep.f1 == f1 && rep.accuracy == acc,
            format!("case {case}: report {rep:?} vs oracle auc {oracle_auc} t {threshold} f1 {f1} acc {acc}"),
        )?;
    }
    Ok("500 instances agree exactly with pair-counting and exhaustive-threshold oracles".into())
}

// ---------------------------------------------------------------- 10

fn corruptions(good: &[u8], version_at: usize) -> [(&'static str, Vec<u8>); 3] {
    let mut magic = good.to_vec();
    magic[0] ^= 0x20;
    let mut version = good.to_vec();
    version[version_at..version_at + 4].copy_from_slice(&99u32.to_le_bytes());
    let truncated = good[..good.len().min(version_at + 6)].to_vec();
    [("bad_magic", magic), ("version_mismatch", version), ("truncated", truncated)]
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Feature files keep exactly the 32-bit value of every entry.
    for seed in 0..20u64 {
        let t = random_tensor(1 + seed as usize * 3, 1 + seed as usize % 7, 800 + seed, 100.0);
        let path = dir.path().join(format!("f{seed}.hagf"));
        write_features(&path, seed as u32 % 4, &t).unwrap();
        let (h, back) = read_features(&path).unwrap();
        ensure(
            h.level == seed as u32 % 4 && h.n == t.rows() as u64 && h.d == t.cols() as u64,
            format!("hagf header {h:?}"),
        )?;
        let expect: Vec<f64> = t.data().iter().map(|&v| round_f32(v)).collect();
        ensure(
            back.data() == expect.as_slice(),
            format!("hagf seed {seed}: values differ from f32 rounding"),
        )?;
        let again = decode_features(&encode_features(h.level, &back).unwrap()).unwrap().1;
        ensure(again == back, format!("hagf seed {seed}: second round trip not bit-exact"))?;
    }

    // Checkpoints keep every 64-bit value.
    let model = fusion_model(7);
    let path = dir.path().join("model.hagc");
    checkpoint::save(&path, &model.params).unwrap();
    let mut restored = fusion_model(8);
    checkpoint::load_into(&path, &mut restored.params).unwrap();
    for ((na, a), (nb, b)) in model.params.iter().zip(restored.params.iter()) {
        let same_bits = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(
            na == nb && a.shape() == b.shape() && same_bits,
            format!("checkpoint tensor {na} differs"),
        )?;
    }

    let feature_bytes = encode_features(1, &random_tensor(4, 3, 900, 1.0)).unwrap();
    let ckpt_bytes = checkpoint::encode(&model.params);
    for (format, good) in [("hagf", &feature_bytes), ("checkpoint", &ckpt_bytes)] {
        for (kind, bad) in corruptions(good, 4) {
            let err = match format {
                "hagf" => decode_features(&bad).err(),
                _ => checkpoint::decode(&bad).err(),
            };
            let got = err.as_ref().map(|e| e.kind());
            ensure(got == Some(kind), format!("{format} corruption {kind}: got {err:?}"))?;
        }
    }
    Ok("hagf and checkpoint round trips exact; bad_magic, version_mismatch, truncated distinguished in both formats".into())
}

// ---------------------------------------------------------------- driver

struct Criterion {
    id: u32,
    name: &'static str,
    budget_secs: Option<f64>,
    run: fn() -> Check,
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("HAGMIL_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient suite",
            budget_secs: Some(60.0),
            run: criterion_1,
        },
        Criterion {
            id: 2,
            name: "nystrom oracle",
            budget_secs: Some(60.0),
            run: criterion_2,
        },
        Criterion {
            id: 3,
            name: "quadtree and selection properties",
            budget_secs: Some(30.0),
            run: criterion_3,
        },
        Criterion {
            id: 4,
            name: "bag fusion",
            budget_secs: None,
            run: criterion_4,
        },
        Criterion {
            id: 5,
            name: "loss identities",
            budget_secs: None,
            run: criterion_5,
        },
        Criterion {
            id: 6,
            name: "synthetic end-to-end",
            budget_secs: Some(900.0),
            run: criterion_6,
        },
        Criterion {
            id: 7,
            name: "budget sweep",
            budget_secs: None,
            run: criterion_7,
        },
        Criterion {
            id: 8,
            name: "null control",
            budget_secs: None,
            run: criterion_8,
        },
        Criterion {
            id: 9,
            name: "metrics oracle",
            budget_secs: None,
            run: criterion_9,
        },
        Criterion {
            id: 10,
            name: "persistence",
            budget_secs: None,
            run: criterion_10,
        },
    ];
    let mut out = std::io::stdout();
    let mut failures = 0;
    for c in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&c.id)) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let result = match (result, c.budget_secs) {
            (Ok(_), Some(b)) if secs > b => Err(format!("runtime {secs:.1}s exceeds {b}s")),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => {
                failures += 1;
                ("FAIL", d.clone())
            }
        };
        writeln!(out, "criterion {:2} {tag}  {} ({secs:.1}s): {detail}", c.id, c.name).unwrap();
        out.flush().unwrap();
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
