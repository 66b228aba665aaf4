//! Acceptance criteria for the decoding engine, one line per criterion.
//!
//! Runs without the libtest harness so every verdict is printed, pass or fail.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::ops::RangeInclusive;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tcd_core::decode::{apc_mask, decode_greedy, decode_mature_greedy, DecodeConfig, FusionMode};
use tcd_core::eval::synth::injected_visual_layer;
use tcd_core::eval::{
    amber_metrics, binary_metrics, mme_score, pair_by_image, BinarySample, Dataset,
    GenerativeSample, Label, Prediction,
};
use tcd_core::image::ImageBuffer;
use tcd_core::model::{
    ContextImage, DecodeContext, Injection, LayerLogitStack, LayeredModel, SyntheticModel,
    SyntheticModelConfig, Vocab,
};
use tcd_core::prob::{jsd, softmax, LogitVector, ProbDist, Temperature};
use tcd_core::select::{run_watermark_prepass, GainMode};
use tcd_core::trace::{read_trace, write_trace, ProbePass, TraceArchive, TraceSample};
use tcd_core::watermark::{embed_watermark_placed, BlendMode, WatermarkSpec};

type Verdict = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Verdict,
}

fn main() {
    let criteria = [
        Criterion {
            name: "probability suite",
            budget: Some(Duration::from_secs(5)),
            run: probability_suite,
        },
        Criterion {
            name: "jsd suite",
            budget: Some(Duration::from_secs(5)),
            run: jsd_suite,
        },
        Criterion {
            name: "visual-layer recovery",
            budget: Some(Duration::from_secs(10)),
            run: visual_recovery,
        },
        Criterion {
            name: "apc invariants",
            budget: None,
            run: apc_invariants,
        },
        Criterion {
            name: "fusion oracle equivalence",
            budget: Some(Duration::from_secs(10)),
            run: fusion_oracle,
        },
        Criterion {
            name: "degenerate equivalence",
            budget: None,
            run: degenerate_equivalence,
        },
        Criterion {
            name: "watermark golden",
            budget: None,
            run: watermark_golden,
        },
        Criterion {
            name: "trace round-trip",
            budget: None,
            run: trace_round_trip,
        },
        Criterion {
            name: "end-to-end synthetic suite",
            budget: Some(Duration::from_secs(30)),
            run: end_to_end,
        },
        Criterion {
            name: "metric arithmetic",
            budget: None,
            run: metric_arithmetic,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let verdict = (c.run)();
        let elapsed = start.elapsed();
        let verdict = match (verdict, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (v, _) => v,
        };
        match verdict {
            Ok(detail) => println!("PASS  {:<28} {detail} [{elapsed:.2?}]", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:<28} {detail} [{elapsed:.2?}]", c.name);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_logits(r: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-spread..spread)).collect()
}

fn random_dist(r: &mut ChaCha8Rng, n: usize) -> ProbDist {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if r.random_bool(0.1) {
                0.0
            } else {
                r.random::<f64>().powi(3)
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    ProbDist::new(w.into_iter().map(|x| x / s).collect()).expect("normalized")
}

fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn probability_suite() -> Verdict {
    let mut r = rng(1);
    let taus = [0.1, 1.0, 10.0].map(|t| Temperature::new(t).unwrap());
    let mut worst_norm = 0.0f64;
    let mut worst_shift = 0.0f64;
    for i in 0..10_000 {
        let n = r.random_range(1..=1000);
        let spread = [1.0, 10.0, 100.0][i % 3];
        let z = random_logits(&mut r, n, spread);
        let zmax = first_max(&z);
        let c = r.random_range(-50.0..50.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for tau in taus {
            let p = softmax(&LogitVector::new(z.clone()).unwrap(), tau);
            let norm = (p.as_slice().iter().sum::<f64>() - 1.0).abs();
            worst_norm = worst_norm.max(norm);
            check(norm <= 1e-9, || {
                format!("vector {i}: |sum - 1| = {norm:e} at tau {}", tau.get())
            })?;
            check(p.argmax() == zmax, || {
                format!("vector {i}: argmax moved at tau {}", tau.get())
            })?;
            let q = softmax(&LogitVector::new(shifted.clone()).unwrap(), tau);
            let d = p
                .as_slice()
                .iter()
                .zip(q.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst_shift = worst_shift.max(d);
            check(d <= 1e-12, || {
                format!("vector {i}: shift changed probabilities by {d:e}")
            })?;
        }
    }
    Ok(format!(
        "10000 vectors, max |sum-1| {worst_norm:.1e}, max shift diff {worst_shift:.1e}"
    ))
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    entropy(&m) - (entropy(p) + entropy(q)) / 2.0
}

fn jsd_hand_cases() -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut cases = vec![
        (vec![0.5, 0.5], vec![0.9, 0.1]),
        (vec![1.0, 0.0], vec![0.0, 1.0]),
        (vec![1.0, 0.0], vec![0.5, 0.5]),
        (vec![0.25; 4], vec![0.25; 4]),
        (vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]),
        (vec![0.6, 0.4, 0.0], vec![0.0, 0.4, 0.6]),
        (vec![0.999, 0.001], vec![0.001, 0.999]),
        (vec![1.0], vec![1.0]),
        (vec![0.5, 0.25, 0.25], vec![0.25, 0.25, 0.5]),
        (vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]),
        (vec![0.3, 0.3, 0.4, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.5, 0.5]),
        (vec![0.9, 0.05, 0.05], vec![0.8, 0.1, 0.1]),
        (vec![1.0 / 3.0; 3], vec![0.5, 0.5, 0.0]),
        (vec![0.2; 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]),
        (vec![0.45, 0.55], vec![0.55, 0.45]),
        (vec![0.01, 0.99], vec![0.02, 0.98]),
    ];
    let mut sharp = vec![1e-9; 10];
    sharp[3] = 1.0 - 9e-9;
    cases.push((sharp.clone(), vec![0.1; 10]));
    let wide: Vec<f64> = (1..=100).map(|i| i as f64 / 5050.0).collect();
    let flat = vec![0.01; 100];
    cases.push((wide.clone(), flat));
    let rev: Vec<f64> = wide.iter().rev().copied().collect();
    cases.push((wide, rev));
    cases.push((vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]));
    cases
}

fn jsd_suite() -> Verdict {
    let mut r = rng(2);
    for i in 0..10_000 {
        let n = r.random_range(1..=200);
        let (p, q) = (random_dist(&mut r, n), random_dist(&mut r, n));
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        check((a - b).abs() <= 1e-12, || {
            format!("pair {i}: asymmetry {:e}", (a - b).abs())
        })?;
        check((-1e-12..=LN_2 + 1e-12).contains(&a), || {
            format!("pair {i}: {a} out of bounds")
        })?;
        let s = jsd(&p, &p).unwrap();
        check(s <= 1e-12, || format!("pair {i}: jsd(p, p) = {s:e}"))?;
    }
    let cases = jsd_hand_cases();
    let mut worst = 0.0f64;
    for (i, (p, q)) in cases.iter().enumerate() {
        let got = jsd(
            &ProbDist::new(p.clone()).unwrap(),
            &ProbDist::new(q.clone()).unwrap(),
        )
        .unwrap();
        let want = jsd_oracle(p, q);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-10, || {
            format!("hand case {i}: {got} vs {want}")
        })?;
    }
    Ok(format!(
        "10000 pairs, {} hand cases, max oracle diff {worst:.1e}",
        cases.len()
    ))
}

fn named_vocab(n: usize, answer_at: usize) -> Vocab {
    let tokens = (0..n)
        .map(|i| {
            if i == answer_at {
                "8".to_owned()
            } else {
                format!("t{i}")
            }
        })
        .collect();
    Vocab::new(tokens, std::iter::empty::<u32>()).unwrap()
}

fn visual_recovery() -> Verdict {
    let spec = WatermarkSpec::default();
    let mut total = 0;
    for &l in &[8usize, 16, 32] {
        for mode in [GainMode::Difference, GainMode::LogRatio] {
            let mut r = rng(3 + l as u64);
            let mut hits = 0;
            for case in 0..100 {
                let v = r.random_range(32..=256);
                let answer = r.random_range(0..v);
                let j = r.random_range(2..=l);
                let mut cfg = SyntheticModelConfig::new(r.random(), l, named_vocab(v, answer));
                cfg.injections = vec![Injection {
                    layer: j,
                    token: answer as u32,
                    boost: r.random_range(8.0..12.0),
                    condition: Some("captcha".into()),
                }];
                let model = SyntheticModel::new(cfg).unwrap();
                let got = run_watermark_prepass(&model, &ContextImage::None, &spec, mode).unwrap();
                if got.visual.layer == j {
                    hits += 1;
                } else {
                    return Err(format!(
                        "L={l} {mode} case {case}: picked {} for injection at {j}",
                        got.visual.layer
                    ));
                }
            }
            total += hits;
        }
    }
    Ok(format!(
        "{total}/600 (100 per L in {{8,16,32}} x 2 gain modes)"
    ))
}

fn apc_invariants() -> Verdict {
    let mut r = rng(4);
    let betas = [0.0, 0.1, 0.5, 1.0];
    for i in 0..1000 {
        let n = r.random_range(1..=500);
        let p = random_dist(&mut r, n);
        let sets: Vec<_> = betas.iter().map(|&b| apc_mask(&p, b).unwrap()).collect();
        for (b, set) in betas.iter().zip(&sets) {
            check(set.contains(p.argmax() as u32), || {
                format!("dist {i}: argmax missing at beta {b}")
            })?;
        }
        check(sets[0].len() == n, || {
            format!("dist {i}: beta 0 kept {} of {n}", sets[0].len())
        })?;
        for w in sets.windows(2) {
            check(w[1].is_subset(&w[0]), || {
                format!("dist {i}: plausible sets not nested")
            })?;
        }
    }
    Ok("1000 distributions x 4 betas".into())
}

struct FixedModel {
    vocab: Vocab,
    stack: LayerLogitStack,
}

impl LayeredModel for FixedModel {
    fn num_layers(&self) -> usize {
        self.stack.num_layers()
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn step(&self, _ctx: &DecodeContext) -> tcd_core::Result<LayerLogitStack> {
        Ok(self.stack.clone())
    }
}

fn oracle_softmax(row: &[f32]) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Brute-force token choice: plausibility threshold, JSD search, then the fused score.
fn oracle_token(
    rows: &[Vec<f32>],
    visual: usize,
    beta: f64,
    lambda: f64,
    fusion: FusionMode,
    k: usize,
) -> u32 {
    let l = rows.len();
    let mature = oracle_softmax(&rows[l - 1]);
    let top = mature.iter().copied().fold(0.0, f64::max);
    let lo = if l > k { l - k } else { 1 };
    let mut amateur = lo;
    let mut best = f64::NEG_INFINITY;
    for layer in lo..l {
        let d = jsd_oracle(&mature, &oracle_softmax(&rows[layer - 1]));
        if d > best {
            best = d;
            amateur = layer;
        }
    }
    let z = |layer: usize, t: usize| f64::from(rows[layer - 1][t]);
    let mut choice = None;
    let mut choice_score = f64::NEG_INFINITY;
    for (t, &pt) in mature.iter().enumerate() {
        if pt < beta * top {
            continue;
        }
        let s = match fusion {
            FusionMode::Tri => z(l, t) - z(amateur, t) + lambda * z(visual, t),
            FusionMode::Interpolated => {
                z(l, t) - lambda * z(amateur, t) + (1.0 - lambda) * z(visual, t)
            }
        };
        if choice.is_none() || s > choice_score {
            choice = Some(t as u32);
            choice_score = s;
        }
    }
    choice.expect("threshold keeps the maximum")
}

fn fusion_oracle() -> Verdict {
    let mut r = rng(5);
    let mut matched = 0;
    for i in 0..1000 {
        let l = r.random_range(2..=8);
        let v = r.random_range(2..=50);
        let rows: Vec<Vec<f32>> = (0..l)
            .map(|_| (0..v).map(|_| r.random_range(-4.0f32..4.0)).collect())
            .collect();
        let visual = r.random_range(1..=l);
        let beta = [0.0, 0.1, 0.5, r.random()][i % 4];
        let k = r.random_range(1..=20);
        let model = FixedModel {
            vocab: named_vocab(v, 0),
            stack: LayerLogitStack::from_rows(0, &rows).unwrap(),
        };
        let ctx = DecodeContext::new(ContextImage::None, "q");
        for fusion in [FusionMode::Tri, FusionMode::Interpolated] {
            for lambda in [0.0, 0.3, 0.5, 1.0] {
                let cfg = DecodeConfig {
                    lambda,
                    beta,
                    fusion,
                    candidate_k: k,
                    max_tokens: 1,
                    ..DecodeConfig::default()
                };
                let got = decode_greedy(&model, &ctx, visual, &cfg)
                    .map_err(|e| e.to_string())?
                    .tokens[0];
                let want = oracle_token(&rows, visual, beta, lambda, fusion, k);
                check(got == want, || {
                    format!(
                        "instance {i} ({fusion}, lambda {lambda}): decoded {got}, oracle {want}"
                    )
                })?;
            }
        }
        matched += 1;
    }
    Ok(format!("{matched}/1000 instances, 8 settings each"))
}

/// Synthetic model whose layer `L-1` repeats the mature row.
struct MirroredAmateur(SyntheticModel);

impl LayeredModel for MirroredAmateur {
    fn num_layers(&self) -> usize {
        self.0.num_layers()
    }

    fn vocab(&self) -> &Vocab {
        self.0.vocab()
    }

    fn step(&self, ctx: &DecodeContext) -> tcd_core::Result<LayerLogitStack> {
        let stack = self.0.step(ctx)?;
        let mut rows: Vec<Vec<f32>> = stack.rows().map(<[f32]>::to_vec).collect();
        let l = rows.len();
        rows[l - 2] = rows[l - 1].clone();
        LayerLogitStack::from_rows(stack.step_index(), &rows)
    }
}

fn degenerate_equivalence() -> Verdict {
    let mut r = rng(6);
    for i in 0..200 {
        let l = r.random_range(3..=16);
        let v = r.random_range(4..=40);
        let mut cfg = SyntheticModelConfig::new(r.random(), l, named_vocab(v, 0));
        for _ in 0..r.random_range(0..4) {
            cfg.injections.push(Injection {
                layer: r.random_range(1..=l),
                token: r.random_range(0..v) as u32,
                boost: r.random_range(-6.0..6.0),
                condition: None,
            });
        }
        let model = MirroredAmateur(SyntheticModel::new(cfg).unwrap());
        let ctx = DecodeContext::new(ContextImage::None, "q");
        let dc = DecodeConfig {
            beta: 1.0,
            lambda: 0.0,
            candidate_k: 1,
            max_tokens: 8,
            ..DecodeConfig::default()
        };
        let visual = r.random_range(1..=l);
        let fused = decode_greedy(&model, &ctx, visual, &dc).map_err(|e| e.to_string())?;
        let plain = decode_mature_greedy(&model, &ctx, &dc).map_err(|e| e.to_string())?;
        check(fused.tokens == plain.tokens, || {
            format!("sequence {i}: {:?} vs {:?}", fused.tokens, plain.tokens)
        })?;
        check(
            fused.steps.iter().all(|s| s.selection.amateur == l - 1),
            || format!("sequence {i}: amateur moved"),
        )?;
    }
    Ok("200/200 sequences of 8 tokens".into())
}

fn random_image(r: &mut ChaCha8Rng, sides: RangeInclusive<u32>, channels: u8) -> ImageBuffer {
    let (w, h) = (r.random_range(sides.clone()), r.random_range(sides));
    let data = (0..w as usize * h as usize * channels as usize)
        .map(|_| r.random())
        .collect();
    ImageBuffer::new(w, h, channels, data).unwrap()
}

fn watermark_golden() -> Verdict {
    let base = ImageBuffer::filled(100, 100, &[0, 0, 0]).unwrap();
    let wm = ImageBuffer::filled(10, 10, &[100, 100, 100]).unwrap();
    let spec = WatermarkSpec {
        alpha: 0.8,
        anchor_fraction: (0.9, 0.9),
        ..WatermarkSpec::with_image(wm)
    };
    let (out, _) = embed_watermark_placed(&base, &spec).map_err(|e| e.to_string())?;
    let mut expected = vec![0u8; 100 * 100 * 3];
    for y in 85..95 {
        for x in 85..95 {
            let o = (y * 100 + x) * 3;
            expected[o..o + 3].copy_from_slice(&[80, 80, 80]);
        }
    }
    check(out.data() == expected.as_slice(), || {
        "golden 100x100 fixture differs".into()
    })?;

    let mut r = rng(7);
    for i in 0..50 {
        let img = random_image(&mut r, 16..=160, 3);
        for blend in [BlendMode::Additive, BlendMode::Convex] {
            let spec = WatermarkSpec {
                alpha: 0.0,
                blend,
                ..WatermarkSpec::default()
            };
            let (out, _) = embed_watermark_placed(&img, &spec).map_err(|e| e.to_string())?;
            check(out == img, || {
                format!("image {i}: alpha 0 changed pixels ({blend:?})")
            })?;
        }
    }

    for i in 0..1000 {
        let img = random_image(&mut r, 4..=96, 3);
        let channels = if r.random_bool(0.5) { 3 } else { 4 };
        let wm = random_image(&mut r, 1..=64, channels);
        let spec = WatermarkSpec {
            alpha: r.random(),
            anchor_fraction: (r.random_range(0.05..0.95), r.random_range(0.05..0.95)),
            scale: r.random_range(0.25..2.0),
            blend: if r.random_bool(0.5) {
                BlendMode::Additive
            } else {
                BlendMode::Convex
            },
            ..WatermarkSpec::with_image(wm)
        };
        let (out, p) =
            embed_watermark_placed(&img, &spec).map_err(|e| format!("placement {i}: {e}"))?;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if !p.rect.contains(x, y) {
                    check(out.pixel(x, y) == img.pixel(x, y), || {
                        format!("placement {i}: ({x}, {y}) touched")
                    })?;
                }
            }
        }
    }
    Ok("golden exact, 50 alpha-0 images, 1000 placements local".into())
}

fn random_f32(r: &mut ChaCha8Rng) -> f32 {
    match r.random_range(0..20) {
        0 => -0.0,
        1 => f32::MIN_POSITIVE / 4.0,
        2 => f32::MAX,
        3 => -f32::MAX,
        _ => r.random_range(-30.0..30.0),
    }
}

fn random_stack(r: &mut ChaCha8Rng, step: u32, l: usize, v: usize) -> LayerLogitStack {
    let data = (0..l * v).map(|_| random_f32(r)).collect();
    LayerLogitStack::new(step, l, v, data).unwrap()
}

fn random_archive(r: &mut ChaCha8Rng, index: usize) -> TraceArchive {
    let l = r.random_range(2..=6);
    let v = r.random_range(2..=30);
    let mut source_layers = Vec::with_capacity(l);
    let mut next = r.random_range(0..3u32);
    for _ in 0..l {
        source_layers.push(next);
        next += r.random_range(1..5);
    }
    let vocab = named_vocab(v, 0);
    let samples = (0..r.random_range(1..=4))
        .map(|s| {
            let steps: Vec<LayerLogitStack> = (0..r.random_range(1..=4u32))
                .map(|t| random_stack(r, t, l, v))
                .collect();
            let probe = r.random_bool(0.7).then(|| {
                let position = r.random_range(0..3u32);
                ProbePass {
                    question: "What is the last captcha number in the image?".into(),
                    expected_answer: "8".into(),
                    position: position as usize,
                    stack: random_stack(r, position, l, v),
                }
            });
            let mut meta = BTreeMap::new();
            if r.random_bool(0.5) {
                meta.insert("split".to_owned(), Value::from("random"));
            }
            TraceSample {
                id: format!("a{index}-s{s}"),
                question: format!("Is there a t{s} in the image?"),
                greedy_tokens: steps.iter().map(|_| r.random_range(0..v as u32)).collect(),
                probe,
                steps,
                meta,
            }
        })
        .collect();
    TraceArchive {
        model: format!("random-{index}"),
        source_layers,
        vocab,
        samples,
        metadata: BTreeMap::new(),
    }
}

fn archives_bit_equal(a: &TraceArchive, b: &TraceArchive) -> bool {
    let stacks_eq = |x: &[LayerLogitStack], y: &[LayerLogitStack]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.bit_eq(q))
    };
    a.model == b.model
        && a.source_layers == b.source_layers
        && a.vocab == b.vocab
        && a.metadata == b.metadata
        && a.samples.len() == b.samples.len()
        && a.samples.iter().zip(&b.samples).all(|(s, t)| {
            s.id == t.id
                && s.question == t.question
                && s.greedy_tokens == t.greedy_tokens
                && s.meta == t.meta
                && stacks_eq(&s.steps, &t.steps)
                && match (&s.probe, &t.probe) {
                    (None, None) => true,
                    (Some(p), Some(q)) => {
                        p.question == q.question
                            && p.expected_answer == q.expected_answer
                            && p.position == q.position
                            && p.stack.bit_eq(&q.stack)
                    }
                    _ => false,
                }
        })
}

fn trace_round_trip() -> Verdict {
    let mut r = rng(8);
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut corruptions = 0;
    for i in 0..100 {
        let archive = random_archive(&mut r, i);
        let dir = root.path().join(format!("a{i}"));
        write_trace(&archive, &dir).map_err(|e| format!("archive {i}: {e}"))?;
        let back = read_trace(&dir).map_err(|e| format!("archive {i}: {e}"))?;
        check(archives_bit_equal(&archive, &back), || {
            format!("archive {i} changed on round-trip")
        })?;

        let sample = &archive.samples[r.random_range(0..archive.samples.len())];
        let path = dir.join("samples").join(format!("{}.tcdt", sample.id));
        let original = std::fs::read(&path).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let mut bytes = original.clone();
            let at = r.random_range(0..bytes.len());
            bytes[at] ^= r.random_range(1..=255u8);
            std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
            check(read_trace(&dir).is_err(), || {
                format!("archive {i}: flip at byte {at} went unnoticed")
            })?;
            corruptions += 1;
        }
        std::fs::write(&path, &original).map_err(|e| e.to_string())?;
    }
    Ok(format!(
        "100 archives bit-exact, {corruptions}/{corruptions} single-byte corruptions detected"
    ))
}

fn tcd(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tcd"))
        .args(args)
        .env_remove("TCD_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "tcd {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn end_to_end() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds_path = dir.path().join("synth.json");
    let out = dir.path().join("run");
    tcd(&[
        "synth",
        "suite",
        "--suite",
        "pope",
        "--seed",
        "0",
        "--samples",
        "100",
        "--output",
        path_str(&ds_path),
    ])?;
    let args = [
        "eval",
        "--suite",
        "pope",
        "--dataset",
        path_str(&ds_path),
        "--lambda",
        "1.0",
        "--beta",
        "0.1",
    ];
    let first = tcd(&[&args[..], &["--out", path_str(&out)]].concat())?;
    let second = tcd(&args)?;
    check(first == second, || {
        "eval report differs between runs".into()
    })?;

    let report: Value = serde_json::from_str(&first).map_err(|e| e.to_string())?;
    let tcd_acc = report["tcd"]["micro"]["accuracy"]
        .as_f64()
        .ok_or("no tcd accuracy")?;
    let base_acc = report["baseline"]["micro"]["accuracy"]
        .as_f64()
        .ok_or("no baseline accuracy")?;

    let ds = Dataset::load(&ds_path).map_err(|e| e.to_string())?;
    let records = std::fs::read_to_string(out.join("samples.jsonl")).map_err(|e| e.to_string())?;
    let answers: BTreeMap<String, String> = records
        .lines()
        .map(|line| {
            let v: Value = serde_json::from_str(line).expect("jsonl line");
            (
                v["id"].as_str().unwrap().to_owned(),
                v["tcd"]["answer"].as_str().unwrap_or("").to_owned(),
            )
        })
        .collect();
    let (mut forced, mut forced_correct) = (0, 0);
    for s in &ds.samples {
        let cfg = ds.model_for(s).ok_or("sample without model")?;
        let gold = s.label.ok_or("unlabeled sample")?;
        let grounded = cfg
            .vocab
            .resolve(if gold == Label::Yes { "yes" } else { "no" })
            .map_err(|e| e.to_string())?;
        let visual = injected_visual_layer(cfg).ok_or("no injection")?;
        let model = SyntheticModel::new(cfg.clone()).map_err(|e| e.to_string())?;
        let stack = model
            .step(&DecodeContext::new(
                ContextImage::None,
                ds.prompt_for(s, ""),
            ))
            .map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f32>> = stack.rows().map(<[f32]>::to_vec).collect();
        if oracle_token(&rows, visual, 0.1, 1.0, FusionMode::Tri, 20) == grounded {
            forced += 1;
            let want = if gold == Label::Yes { "yes" } else { "no" };
            if answers.get(&s.id).map(String::as_str) == Some(want) {
                forced_correct += 1;
            }
        }
    }
    check(forced >= 95, || {
        format!("only {forced} samples are forced by the fusion margin")
    })?;
    check(forced_correct == forced, || {
        format!("tcd correct on {forced_correct} of {forced} forced samples")
    })?;
    check(tcd_acc >= 0.95, || format!("tcd accuracy {tcd_acc}"))?;
    check(base_acc <= 0.60, || format!("baseline accuracy {base_acc}"))?;
    Ok(format!(
        "tcd {tcd_acc:.2}, baseline {base_acc:.2}, forced {forced_correct}/{forced}"
    ))
}

fn confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Vec<BinarySample> {
    let mut out = Vec::new();
    let mut push = |n: usize, gold: Label, pred: Prediction| {
        for _ in 0..n {
            let id = format!("b{}", out.len());
            out.push(BinarySample::new(id, gold, pred));
        }
    };
    push(tp, Label::Yes, Prediction::Yes);
    push(fp, Label::No, Prediction::Yes);
    push(fn_, Label::Yes, Prediction::No);
    push(tn, Label::No, Prediction::No);
    out
}

fn mme_fixture() -> Vec<(String, BinarySample)> {
    let mut out = Vec::new();
    for img in 0..10 {
        let key = format!("img{img}");
        let (first_ok, second_ok) = match img {
            8 => (true, false),
            9 => (false, false),
            _ => (true, true),
        };
        let pred = |ok: bool, gold: Label| match (ok, gold) {
            (true, Label::Yes) | (false, Label::No) => Prediction::Yes,
            _ => Prediction::No,
        };
        out.push((
            key.clone(),
            BinarySample::new(format!("{key}-a"), Label::Yes, pred(first_ok, Label::Yes)),
        ));
        out.push((
            key.clone(),
            BinarySample::new(format!("{key}-b"), Label::No, pred(second_ok, Label::No)),
        ));
    }
    out
}

fn metric_arithmetic() -> Verdict {
    let bin = confusion(40, 10, 10, 40);
    let m = binary_metrics(&bin).map_err(|e| e.to_string())?;
    check(
        m.accuracy == 0.8 && m.precision == 0.8 && m.recall == 0.8 && m.f1 == 0.8,
        || format!("binary example gave {m:?}"),
    )?;

    let gen = vec![
        GenerativeSample::new("g0", vec!["a", "b"], vec!["a"], vec![]),
        GenerativeSample::new("g1", vec!["c"], vec!["c", "d"], vec![]),
    ];
    let a = amber_metrics(&gen).map_err(|e| e.to_string())?;
    check(
        a.chair == 1.0 / 3.0 && a.cover == 2.0 / 3.0 && a.hal_rate == 0.5,
        || format!("amber example gave {a:?}"),
    )?;

    let mme = mme_fixture();
    let score =
        mme_score(&pair_by_image(&mme).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check(score == 165.0, || format!("mme example gave {score}"))?;

    let mut r = rng(9);
    let mut mixed = confusion(17, 6, 9, 23);
    mixed.extend(
        (0..5).map(|i| BinarySample::new(format!("x{i}"), Label::Yes, Prediction::Invalid)),
    );
    let base_bin = binary_metrics(&mixed).map_err(|e| e.to_string())?;
    let mut gen_many: Vec<GenerativeSample> = (0..30)
        .map(|i| {
            let mentioned: Vec<String> = (0..r.random_range(0..5))
                .map(|_| format!("o{}", r.random_range(0..8)))
                .collect();
            let gt: Vec<String> = (0..r.random_range(0..5))
                .map(|_| format!("o{}", r.random_range(0..8)))
                .collect();
            GenerativeSample::new(format!("g{i}"), mentioned, gt, vec!["o1".to_owned()])
        })
        .collect();
    let base_gen = amber_metrics(&gen_many).map_err(|e| e.to_string())?;
    let mut mme_many = mme;
    for _ in 0..100 {
        mixed.shuffle(&mut r);
        gen_many.shuffle(&mut r);
        mme_many.shuffle(&mut r);
        let b = binary_metrics(&mixed).map_err(|e| e.to_string())?;
        check(b == base_bin, || "binary metrics depend on order".into())?;
        let g = amber_metrics(&gen_many).map_err(|e| e.to_string())?;
        check(g == base_gen, || "amber metrics depend on order".into())?;
        let s = mme_score(&pair_by_image(&mme_many).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        check(s == 165.0, || format!("mme score {s} after shuffle"))?;
    }
    Ok("hand examples exact, 100 shuffles invariant".into())
}
