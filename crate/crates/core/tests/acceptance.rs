//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Stages share the overfit model, the label
//! set and the trained selector, so they run in order from one `main`.

use std::process::ExitCode;
use std::time::Instant;

use framers::checkpoint;
use framers::clipio::{planted_dataset, slot_frames, ClipSpec, PlantedClip, VideoClip};
use framers::codec::{compare_policies, compress, decompress, CompressedClip, Policy, PolicyContext};
use framers::framemae::{mean_masked_loss, pretrain, FrameMae, LossScope, MaskSchedule, PretrainConfig, TrainState};
use framers::framemask::{apply_mask, combo_count, combo_to_slots, make_frame_mask, slots_to_combo, ComboIndex, FrameMask};
use framers::labelgen::{build_label_dataset, read_labels, Labeler};
use framers::nn::{flatten, seeded_rng, unflatten, zeros_like};
use framers::patchcube::{patchify, unpatchify, ModelConfig, PosEmbedding, TokenGrid};
use framers::selector::{
    ablation_sweep, cross_entropy, train_selector, AblationTable, Selector, SelectorConfig, SelectorDataset,
    SelectorRun, SelectorTrainConfig,
};
use itertools::Itertools;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

const SEED: u64 = 7;
const K: usize = 2;

struct Gate {
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn random_clip(spec: &ClipSpec, rng: &mut impl Rng) -> VideoClip {
    let px = Array4::from_shape_simple_fn((spec.frames, spec.height, spec.width, spec.channels), || rng.random::<f64>());
    VideoClip::new("random", px).unwrap()
}

fn roundtrip(gate: &mut Gate) {
    let t = Instant::now();
    let mut rng = seeded_rng(SEED, 1);
    let mut exact = 0;
    for i in 0..100 {
        let cfg = if i % 2 == 0 { ModelConfig::toy() } else { ModelConfig::paper() };
        let clip = random_clip(&cfg.clip, &mut rng);
        let back = unpatchify(&patchify(&clip, &cfg).unwrap(), &cfg).unwrap();
        exact += usize::from(back == clip.pixels);
    }
    let secs = t.elapsed().as_secs_f64();
    gate.report(
        1,
        "unpatchify(patchify(x)) == x",
        exact == 100 && secs < 10.0,
        format!("{exact}/100 bit-exact (50 toy, 50 paper) in {secs:.1}s"),
    );
}

fn mask_invariants(gate: &mut Gate) {
    let t = Instant::now();
    let mut rng = seeded_rng(SEED, 2);
    let mut bad_masks = 0;
    for case in 0..1000 {
        let t_tok = rng.random_range(1..=16);
        let m = rng.random_range(0..=t_tok);
        let (s_tok, dim) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let grid = TokenGrid {
            tokens: Array3::from_shape_simple_fn((t_tok, s_tok, dim), || rng.random::<f64>()),
        };
        let mask = make_frame_mask(t_tok, m, case).unwrap();
        let (vis, layout) = apply_mask(&grid, &mask).unwrap();
        let flat = grid.flat();
        let mut seen = vec![0u8; t_tok * s_tok];
        for &i in layout.visible.iter().chain(&layout.masked) {
            seen[i] += 1;
        }
        let partitions = seen.iter().all(|&c| c == 1)
            && layout.visible.iter().all(|&i| !mask.masked[i / s_tok])
            && layout.masked.iter().all(|&i| mask.masked[i / s_tok])
            && layout.masked.len() == m * s_tok;
        let preserved = vis.rows().into_iter().zip(&layout.visible).all(|(r, &i)| r == flat.row(i));
        if !(partitions && preserved && mask.masked_count() == m) {
            bad_masks += 1;
        }
    }

    let mut bad_combos = 0;
    let mut check_combo = |t_tok: usize, k: usize, indices: &mut dyn Iterator<Item = usize>| {
        let all: Vec<Vec<usize>> = (0..t_tok).combinations(k).collect();
        for i in indices {
            let slots = combo_to_slots(ComboIndex::new(i, k, t_tok).unwrap()).unwrap();
            let back = slots_to_combo(&slots, t_tok).unwrap().index;
            if slots != all[i] || back != i {
                bad_combos += 1;
            }
        }
    };
    check_combo(8, 2, &mut (0..28));
    for _ in 0..200 {
        let t_tok = rng.random_range(1..=12);
        let k = rng.random_range(0..=t_tok);
        let n = combo_count(t_tok, k);
        let picks: Vec<usize> = (0..n.min(50)).map(|_| rng.random_range(0..n)).collect();
        check_combo(t_tok, k, &mut picks.into_iter());
    }
    let secs = t.elapsed().as_secs_f64();
    gate.report(
        2,
        "frame-mask partition and combo bijection",
        bad_masks == 0 && bad_combos == 0 && combo_count(8, 2) == 28 && secs < 10.0,
        format!("{bad_masks} bad of 1000 masks, {bad_combos} bad combo roundtrips (28 at (8,2) + 200 random cases) in {secs:.1}s"),
    );
}

/// Worst elementwise relative error of `analytic` against central
/// differences of `loss`, over every parameter.
fn worst_relative_error(flat: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut p = flat.to_vec();
    for i in 0..flat.len() {
        p[i] = flat[i] + h;
        let up = loss(&p);
        p[i] = flat[i] - h;
        let down = loss(&p);
        p[i] = flat[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn jitter<P: framers::nn::Params>(model: &mut P, seed: u64) {
    let mut rng = seeded_rng(seed, 3);
    let mut flat = flatten(model);
    for v in &mut flat {
        *v += rng.random_range(-0.3..0.3);
    }
    unflatten(model, &flat);
}

fn gradient_checks(gate: &mut Gate) {
    let t = Instant::now();
    let tiny = ModelConfig {
        clip: ClipSpec {
            frames: 4,
            stride: 1,
            height: 4,
            width: 4,
            channels: 3,
        },
        temporal_patch: 2,
        spatial_patch: 2,
        embed_dim: 8,
        encoder_depth: 1,
        encoder_heads: 2,
        decoder_dim: 4,
        decoder_depth: 1,
        decoder_heads: 1,
        mlp_ratio: 2,
        pos_embedding: PosEmbedding::Learnable,
        train_mask_token: true,
        allow_unconditional: false,
    };
    let mut rng = seeded_rng(SEED, 4);
    let mut mae_worst = 0.0f64;
    for (seed, scope) in [(0, LossScope::MaskedOnly), (1, LossScope::All)] {
        let mut model = FrameMae::new(tiny.clone(), seed).unwrap();
        jitter(&mut model, seed);
        let clip = random_clip(&tiny.clip, &mut rng);
        let patches = patchify(&clip, &tiny).unwrap();
        let mask = FrameMask::keeping(2, &[0]).unwrap();
        let mut grads = zeros_like(&model);
        model.loss_and_grad(patches.flat(), &mask, scope, 1.0, &mut grads).unwrap();
        let flat = flatten(&model);
        let worst = worst_relative_error(&flat, &flatten(&grads), |p| {
            let mut m = model.clone();
            unflatten(&mut m, p);
            let mut scratch = zeros_like(&m);
            m.loss_and_grad(patches.flat(), &mask, scope, 1.0, &mut scratch).unwrap()
        });
        mae_worst = mae_worst.max(worst);
    }

    let cfg = SelectorConfig {
        feature_dim: 6,
        t_tok: 4,
        s_tok: 3,
        k: 2,
        proj_dim: 5,
        blocks: 2,
        hidden: 7,
        dropout: 0.0,
    };
    let mut selector = Selector::new(cfg, 0).unwrap();
    jitter(&mut selector, 2);
    let grids: Vec<TokenGrid> = (0..4)
        .map(|_| TokenGrid {
            tokens: Array3::from_shape_simple_fn((4, 3, 6), || rng.random_range(-1.0..1.0)),
        })
        .collect();
    let feats: Vec<&TokenGrid> = grids.iter().collect();
    let labels = [0, 2, 5, 3];
    let mut grads = zeros_like(&selector);
    selector
        .loss_and_grad(&feats, &labels, false, &mut rng, &mut grads)
        .unwrap();
    let sel_worst = worst_relative_error(&flatten(&selector), &flatten(&grads), |p| {
        let mut s = selector.clone();
        unflatten(&mut s, p);
        cross_entropy(&s.logits(&feats).unwrap().view(), &labels).unwrap().0
    });
    let secs = t.elapsed().as_secs_f64();
    gate.report(
        3,
        "analytic gradients vs central differences",
        mae_worst < 1e-3 && sel_worst < 1e-3 && secs < 120.0,
        format!("FrameMAE worst rel err {mae_worst:.2e}, selector {sel_worst:.2e} in {secs:.1}s"),
    );
}

fn pretrain_hp() -> PretrainConfig {
    PretrainConfig {
        steps: 300,
        batch_size: 4,
        lr: 1e-3,
        mask: MaskSchedule::Fixed { masked: 3 },
        ..PretrainConfig::default()
    }
}

fn overfit(gate: &mut Gate, clips: &[VideoClip]) -> FrameMae {
    let t = Instant::now();
    let cfg = ModelConfig::toy();
    let hp = pretrain_hp();
    let (state, trace) = pretrain(clips, &cfg, &hp, SEED, |_, _, _| Ok(())).unwrap();
    let eval_masks: Vec<FrameMask> = (0..8).map(|s| make_frame_mask(8, 3, 100 + s).unwrap()).collect();
    let final_mse = mean_masked_loss(&state.model, clips, &eval_masks).unwrap();

    let mut gray = state.model.clone();
    gray.head.weight.fill(0.0);
    gray.head.bias.fill(framers::clipio::BACKGROUND);
    let gray_mse = mean_masked_loss(&gray, clips, &eval_masks).unwrap();

    let replay_steps = 20;
    let patches: Vec<_> = clips.iter().map(|c| patchify(c, &cfg).unwrap()).collect();
    let mut replay = TrainState::new(cfg, &hp, SEED).unwrap();
    let drift = (0..replay_steps)
        .map(|i| (replay.train_step(&patches, &hp).unwrap().loss - trace[i].loss).abs())
        .fold(0.0f64, f64::max);
    let secs = t.elapsed().as_secs_f64();
    gate.report(
        4,
        "toy FrameMAE overfits 8 planted clips",
        final_mse < 0.01 && drift <= 1e-6 && hp.steps <= 2000 && secs < 600.0,
        format!(
            "masked MSE {final_mse:.5} after {} steps (constant-background predictor: {gray_mse:.5}); \
             replay of first {replay_steps} steps max |dloss| {drift:.1e}; {secs:.0}s",
            hp.steps
        ),
    );
    state.model
}

fn oracle(gate: &mut Gate, model: &FrameMae, fresh: &[PlantedClip]) {
    let t = Instant::now();
    let labeler = Labeler::new(model, K).unwrap();
    let mut hits = 0;
    let mut strict = 0;
    let mut diff = 0.0f64;
    for p in fresh {
        let rec = labeler.rank(&p.clip).unwrap();
        let want = slots_to_combo(&p.planted_slots, 8).unwrap().index;
        hits += usize::from(rec.gt_label == want);
        let min_other = rec
            .losses
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != want)
            .map(|(_, &l)| l)
            .fold(f64::INFINITY, f64::min);
        strict += usize::from(rec.losses[want] < min_other);
        for (i, &l) in rec.losses.iter().enumerate() {
            diff = diff.max((labeler.combo_loss(&p.clip, i).unwrap() - l).abs());
        }
    }
    let n = fresh.len();
    gate.report(
        5,
        "oracle labels recover planted slots",
        hits * 10 >= n * 9 && diff <= 1e-10,
        format!(
            "gt_label == planted combo on {hits}/{n} fresh clips (strict minimum on {strict}/{n}); \
             batched vs single max |dloss| {diff:.1e}; {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
}

fn selector_hp() -> SelectorTrainConfig {
    SelectorTrainConfig {
        epochs: 20,
        ..SelectorTrainConfig::default()
    }
}

fn selector_signal(gate: &mut Gate, model: &FrameMae) -> (SelectorDataset, SelectorRun) {
    let t = Instant::now();
    let planted = planted_dataset(&ModelConfig::toy().clip, 2, K, 400, SEED + 2).unwrap();
    let clips: Vec<VideoClip> = planted.into_iter().map(|p| p.clip).collect();
    let dir = tempfile::tempdir().unwrap();
    build_label_dataset(&clips, model, K, dir.path()).unwrap();
    let (_, records) = read_labels(dir.path()).unwrap();
    let data = SelectorDataset::build(&clips, &records, model).unwrap();

    let cfg = SelectorConfig::for_encoder(model.config.embed_dim, model.config.t_tok(), model.config.s_tok(), K);
    let fresh = Selector::new(cfg.clone(), SEED).unwrap();
    let feats: Vec<&TokenGrid> = data.examples.iter().map(|e| &e.features).collect();
    let labels: Vec<usize> = data.examples.iter().map(|e| e.label).collect();
    let (init_ce, _) = cross_entropy(&fresh.logits(&feats).unwrap().view(), &labels).unwrap();

    let hp = selector_hp();
    let run = train_selector(&data, &cfg, &hp, SEED).unwrap();
    let (_, val) = data.split(hp.val_fraction, SEED);
    let last = run.trace.last().copied().unwrap();
    let chance = 1.0 / combo_count(8, K) as f64;
    let n_val = val.len() as u64;
    let hits = (last.top1 * n_val as f64).round() as u64;
    let p_value = if hits == 0 {
        1.0
    } else {
        Binomial::new(chance, n_val).unwrap().sf(hits - 1)
    };
    let secs = t.elapsed().as_secs_f64();
    gate.report(
        6,
        "selector learns from oracle labels",
        last.top1 >= 3.0 * chance && p_value < 0.01 && (init_ce - 28f64.ln()).abs() <= 0.01 && secs < 900.0,
        format!(
            "final val top-1 {:.1}% ({hits}/{n_val}, chance {:.2}%), top-5 {:.1}%, binomial p {p_value:.1e}; \
             zero-init CE {init_ce:.4} (ln 28 = {:.4}); best epoch {}; {secs:.0}s",
            100.0 * last.top1,
            100.0 * chance,
            100.0 * last.top5,
            28f64.ln(),
            run.best.epoch
        ),
    );
    (data, run)
}

fn codec_checks(gate: &mut Gate, model: &FrameMae, selector: &Selector, corpus: &[VideoClip]) {
    let t = Instant::now();
    let ctx = PolicyContext {
        mae: Some(model),
        selector: Some(selector),
        seed: SEED,
    };
    let mut lossless = true;
    for clip in corpus.iter().take(10) {
        for policy in Policy::ALL {
            let cc = compress(clip, policy, K, &ctx).unwrap();
            let back = CompressedClip::from_bytes(&cc.to_bytes().unwrap()).unwrap();
            let out = decompress(&back, model).unwrap();
            for &slot in &cc.meta.kept_slots {
                for f in slot_frames(slot, model.config.temporal_patch) {
                    lossless &= out.pixels.index_axis(Axis(0), f) == clip.pixels.index_axis(Axis(0), f);
                }
            }
        }
    }

    let paper = ModelConfig::paper();
    let paper_fraction = (K * paper.temporal_patch) as f64 / paper.clip.frames as f64;

    let report = compare_policies(corpus, &Policy::ALL, K, &ctx).unwrap();
    let get = |p| report.get(p).unwrap();
    let oracle = get(Policy::Oracle);
    let dominated = report
        .policies
        .iter()
        .all(|p| oracle.clips.iter().zip(&p.clips).all(|(o, c)| o.metrics.mse <= c.metrics.mse));
    let (o, l, r) = (oracle.mean_mse, get(Policy::Learned).mean_mse, get(Policy::Random).mean_mse);
    let fractions_ok = report.policies.iter().all(|p| p.retained_fraction == 0.25);
    println!("      policy report (sorted by mean MSE):");
    for line in report.to_csv().lines() {
        println!("        {line}");
    }
    gate.report(
        7,
        "codec round-trip, retained fraction and policy ordering",
        lossless && paper_fraction == 0.25 && fractions_ok && dominated && o <= l && l <= r,
        format!(
            "kept frames bit-exact: {lossless}; retained fraction {paper_fraction} (paper preset); \
             oracle <= all per clip: {dominated}; mean MSE oracle {o:.5} <= learned {l:.5} <= random {r:.5}; {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
}

fn ablation(gate: &mut Gate, data: &SelectorDataset, model: &FrameMae) {
    let t = Instant::now();
    let base = SelectorConfig::for_encoder(model.config.embed_dim, model.config.t_tok(), model.config.s_tok(), K);
    let grid = [(3, 0.1), (3, 0.0), (4, 0.0)];
    let hp = SelectorTrainConfig {
        epochs: 8,
        ..selector_hp()
    };
    let table: AblationTable = ablation_sweep(data, &base, &grid, &hp, &[SEED]).unwrap();
    let text = table.to_string();
    for line in text.lines() {
        println!("      {line}");
    }
    let header_ok = text.lines().next().is_some_and(|h| {
        let cols: Vec<&str> = h.split_whitespace().collect();
        cols == ["blocks", "top-1", "top-5", "drop-out", "best", "epoch"]
    });
    let rows_ok = table.rows.len() == 3
        && table.rows.iter().zip(&grid).all(|(r, &(b, d))| r.blocks == b && r.dropout == d)
        && text.contains("27.10%")
        && text.contains("50.52%");
    gate.report(
        8,
        "ablation sweep table",
        header_ok && rows_ok,
        format!("3 rows over (blocks, dropout) {grid:?} plus reference rows; {:.0}s", t.elapsed().as_secs_f64()),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut gate = Gate { failed: 0 };
    roundtrip(&mut gate);
    mask_invariants(&mut gate);
    gradient_checks(&mut gate);

    let spec = ModelConfig::toy().clip;
    let train: Vec<VideoClip> = planted_dataset(&spec, 2, K, 8, SEED)
        .unwrap()
        .into_iter()
        .map(|p| p.clip)
        .collect();
    let model = overfit(&mut gate, &train);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &model, pretrain_hp().steps, SEED, None).unwrap();
    let (model, _) = checkpoint::load::<FrameMae>(dir.path()).unwrap();

    let fresh = planted_dataset(&spec, 2, K, 50, SEED + 1).unwrap();
    oracle(&mut gate, &model, &fresh);
    let (data, run) = selector_signal(&mut gate, &model);
    let corpus: Vec<VideoClip> = fresh.iter().map(|p| p.clip.clone()).collect();
    codec_checks(&mut gate, &model, &run.selector, &corpus);
    ablation(&mut gate, &data, &model);

    println!(
        "{} of 8 criteria passed in {:.0}s",
        8 - gate.failed,
        start.elapsed().as_secs_f64()
    );
    if gate.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
