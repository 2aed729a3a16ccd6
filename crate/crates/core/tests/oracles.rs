use std::collections::BTreeSet;

use avfusion::autograd::Graph;
use avfusion::data::{generate, load_videos, synth_dataset, LabelTrack, Manifest, Split, SynthSpec, Video};
use avfusion::losses::{au_loss, expr_loss, va_loss};
use avfusion::metrics::{ccc, macro_f1, multilabel_f1, ScoreKind};
use avfusion::model::{FusionConfig, FusionModel};
use avfusion::train::{compute_metrics, train, TrainConfig};
use avfusion::{Error, Task, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// F1 from an explicit confusion matrix, one class at a time.
fn brute_macro_f1(pred: &[i64], gt: &[i64], k: usize, mask: &[bool]) -> f64 {
    let mut cm = vec![vec![0usize; k]; k];
    for i in 0..gt.len() {
        if mask[i] {
            cm[gt[i] as usize][pred[i] as usize] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let fp: f64 = (0..k).filter(|&r| r != c).map(|r| cm[r][c] as f64).sum();
        let fnn: f64 = (0..k).filter(|&p| p != c).map(|p| cm[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / k as f64
}

#[test]
fn macro_f1_matches_confusion_matrix_oracle() {
    let mut r = rng(1);
    for case in 0..200 {
        let k = r.random_range(2..9);
        let n = r.random_range(1..40);
        let gt: Vec<i64> = (0..n).map(|_| r.random_range(0..k as i64)).collect();
        let pred: Vec<i64> = (0..n).map(|_| r.random_range(0..k as i64)).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let (got, _) = macro_f1(&pred, &gt, k, &mask).unwrap();
        let want = brute_macro_f1(&pred, &gt, k, &mask);
        assert!((got - want).abs() < 1e-15, "case {case}: {got} vs {want}");
    }
}

#[test]
fn multilabel_f1_matches_per_unit_oracle() {
    let mut r = rng(2);
    for case in 0..200 {
        let units = r.random_range(1..13);
        let n = r.random_range(1..30);
        let gt: Vec<f64> = (0..n * units).map(|_| f64::from(r.random_range(0..2u8))).collect();
        let probs: Vec<f64> = (0..n * units).map(|_| r.random_range(0.0..1.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
        let (got, _) = multilabel_f1(&probs, &gt, units, ScoreKind::Probabilities, &mask).unwrap();
        let mut want = 0.0;
        for u in 0..units {
            let p: Vec<i64> = (0..n).map(|i| i64::from(probs[i * units + u] >= 0.5)).collect();
            let g: Vec<i64> = (0..n).map(|i| gt[i * units + u] as i64).collect();
            let mut cm = [[0usize; 2]; 2];
            for i in (0..n).filter(|&i| mask[i]) {
                cm[g[i] as usize][p[i] as usize] += 1;
            }
            let (tp, fp, fnn) = (cm[1][1] as f64, cm[0][1] as f64, cm[1][0] as f64);
            want += if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnn) } else { 0.0 };
        }
        want /= units as f64;
        assert!((got - want).abs() < 1e-15, "case {case}: {got} vs {want}");
    }
}

#[test]
fn ccc_hand_oracles() {
    let x = [0.3, -1.2, 2.5, 0.0, 7.1];
    assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let v = ccc(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap();
    assert!((v + 1.0 / 13.0).abs() < 1e-12, "{v}");
}

#[test]
fn expr_loss_matches_direct_oracle() {
    let mut r = rng(3);
    let logits: Vec<f64> = (0..40).map(|_| r.random_range(-5.0..5.0)).collect();
    let labels: Vec<i64> = (0..5).map(|_| r.random_range(0..8)).collect();
    let mask = [true; 5];
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64(&[5, 8], &logits).unwrap());
    let loss = expr_loss(&mut g, l, &labels, &mask).unwrap();
    let mut want = 0.0;
    for t in 0..5 {
        let row = &logits[t * 8..(t + 1) * 8];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[labels[t] as usize].exp() / z).ln();
    }
    want /= 5.0;
    assert!((g.value(loss).item() - want).abs() < 1e-10);

    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[3, 8]));
    let loss = expr_loss(&mut g, l, &[0, 4, 7], &[true; 3]).unwrap();
    assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-9);
}

#[test]
fn au_loss_hand_values_and_extremes() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[1, 1]));
    let loss = au_loss(&mut g, l, &[1.0], &[true]).unwrap();
    assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);

    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64(&[1, 4], &[100.0, -100.0, 100.0, -100.0]).unwrap());
    let loss = au_loss(&mut g, l, &[1.0, 0.0, 0.0, 1.0], &[true]).unwrap();
    let v = g.value(loss).item();
    assert!(v.is_finite());
    assert!((v - 50.0).abs() < 1e-9, "{v}");
}

#[test]
fn two_class_expr_loss_equals_binary_au_loss() {
    let mut r = rng(4);
    let n = 9;
    let logits: Vec<f64> = (0..2 * n).map(|_| r.random_range(-4.0..4.0)).collect();
    let class: Vec<i64> = (0..n).map(|_| r.random_range(0..2)).collect();
    let mask = vec![true; n];

    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64(&[n, 2], &logits).unwrap());
    let ce = expr_loss(&mut g, l, &class, &mask).unwrap();
    let ce = g.value(ce).item();

    let diff: Vec<f64> = (0..n).map(|t| logits[2 * t + 1] - logits[2 * t]).collect();
    let binary: Vec<f64> = class.iter().map(|&c| c as f64).collect();
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64(&[n, 1], &diff).unwrap());
    let bce = au_loss(&mut g, l, &binary, &mask).unwrap();
    let bce = g.value(bce).item();
    assert!((ce - bce).abs() < 1e-8, "{ce} vs {bce}");
}

#[test]
fn losses_ignore_masked_frames() {
    let mut r = rng(5);
    let n = 8;
    let mask: Vec<bool> = (0..n).map(|t| t % 3 != 1).collect();
    let perm: Vec<usize> = vec![0, 4, 2, 3, 7, 5, 6, 1]; // swaps masked frames 1, 4 and 7
    let base: Vec<f64> = (0..n * 12).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut scrambled = base.clone();
    let mut targets_va: Vec<f64> = (0..n * 2).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut targets_au: Vec<f64> = (0..n * 12).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let mut classes: Vec<i64> = (0..n).map(|_| r.random_range(0..8)).collect();
    let va_ref = targets_va.clone();
    let au_ref = targets_au.clone();
    let cl_ref = classes.clone();
    for t in (0..n).filter(|&t| !mask[t]) {
        for v in &mut scrambled[t * 12..(t + 1) * 12] {
            *v = r.random_range(-50.0..50.0);
        }
        targets_va[2 * t] = -5.0;
        targets_va[2 * t + 1] = 99.0;
        targets_au[t * 12] = 0.5;
        classes[t] = -1;
    }
    let permute = |v: &[f64], w: usize| -> Vec<f64> { perm.iter().flat_map(|&p| v[p * w..(p + 1) * w].to_vec()).collect() };

    let eval = |logits: &[f64], va: &[f64], au: &[f64], cl: &[i64]| -> [f64; 3] {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[n, 12], logits).unwrap());
        let va_in = g.slice(l, 1, 0, 2).unwrap();
        let ex_in = g.slice(l, 1, 0, 8).unwrap();
        let a = va_loss(&mut g, va_in, va, &mask).unwrap();
        let b = expr_loss(&mut g, ex_in, cl, &mask).unwrap();
        let c = au_loss(&mut g, l, au, &mask).unwrap();
        [g.value(a).item(), g.value(b).item(), g.value(c).item()]
    };
    let reference = eval(&base, &va_ref, &au_ref, &cl_ref);
    let changed = eval(&scrambled, &targets_va, &targets_au, &classes);
    assert_eq!(reference, changed);

    // Permuting only masked-out frames leaves the losses unchanged.
    let cl_perm: Vec<i64> = perm.iter().map(|&p| classes[p]).collect();
    let moved = eval(
        &permute(&scrambled, 12),
        &permute(&targets_va, 2),
        &permute(&targets_au, 12),
        &cl_perm,
    );
    assert_eq!(reference, moved);
}

#[test]
fn synthetic_expr_covers_all_classes() {
    let spec = SynthSpec {
        task: Task::Expr,
        ..SynthSpec::default()
    };
    let videos = generate(&spec).unwrap();
    let seen: BTreeSet<i64> = videos
        .iter()
        .filter(|v| v.split == Split::Train)
        .flat_map(|v| v.labels.classes())
        .filter(|&c| c >= 0)
        .collect();
    assert_eq!(seen.len(), 8, "{seen:?}");
}

/// Least squares via normal equations with Gaussian elimination.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * t;
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

#[test]
fn noiseless_latent_is_linearly_decodable() {
    let spec = SynthSpec {
        n_videos: 1,
        n_val_videos: 0,
        n_frames: 300,
        visual_dim: 6,
        audio_dim: 3,
        snr: f64::INFINITY,
        missing_face_rate: 0.0,
        ..SynthSpec::default()
    };
    let v = &generate(&spec).unwrap()[0];
    let rows: Vec<Vec<f64>> = (0..spec.n_frames)
        .map(|f| {
            let mut r: Vec<f64> = v.visual.row(f).iter().map(|&x| x as f64).collect();
            r.push(1.0);
            r
        })
        .collect();
    for k in 0..2 {
        let y: Vec<f64> = (0..spec.n_frames).map(|f| v.latent[2 * f + k]).collect();
        let w = least_squares(&rows, &y);
        let max_err = rows
            .iter()
            .zip(&y)
            .map(|(r, t)| (r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - t).abs())
            .fold(0.0, f64::max);
        // Features are stored as f32.
        assert!(max_err < 1e-4, "dim {k}: {max_err}");
    }
}

fn va_video(id: &str, values: Vec<f64>) -> Video {
    let n = values.len() / 2;
    Video {
        id: id.into(),
        n_frames: n,
        visual_dim: 1,
        audio_dim: 1,
        visual: vec![0.0; n],
        audio: vec![0.0; n],
        face: vec![true; n],
        labels: Some(LabelTrack::new(id, Task::Va, values).unwrap()),
    }
}

#[test]
fn evaluate_oracle_constant_and_order() {
    let mut r = rng(6);
    let videos: Vec<Video> = (0..3)
        .map(|i| va_video(&format!("v{i}"), (0..40).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect();
    let truth: Vec<Vec<f64>> = videos.iter().map(|v| v.labels.as_ref().unwrap().values.clone()).collect();
    let rep = compute_metrics(Task::Va, &videos, &truth, ScoreKind::Logits).unwrap();
    assert_eq!(rep.get("ccc_mean"), Some(1.0));

    let constant: Vec<Vec<f64>> = videos.iter().map(|v| vec![0.25; v.n_frames * 2]).collect();
    let rep = compute_metrics(Task::Va, &videos, &constant, ScoreKind::Logits).unwrap();
    assert_eq!(rep.get("ccc_valence"), Some(0.0));
    assert_eq!(rep.get("ccc_arousal"), Some(0.0));

    let noisy: Vec<Vec<f64>> = truth.iter().map(|t| t.iter().map(|v| 0.7 * v + r.random_range(-0.2..0.2)).collect()).collect();
    let forward = compute_metrics(Task::Va, &videos, &noisy, ScoreKind::Logits).unwrap();
    let order = [2, 0, 1];
    let rv: Vec<Video> = order.iter().map(|&i| videos[i].clone()).collect();
    let rn: Vec<Vec<f64>> = order.iter().map(|&i| noisy[i].clone()).collect();
    let shuffled = compute_metrics(Task::Va, &rv, &rn, ScoreKind::Logits).unwrap();
    for (k, v) in &forward.entries {
        assert!((shuffled.get(k).unwrap() - v).abs() < 1e-12, "{k}");
    }

    // EXPR and AU oracles.
    let classes: Vec<f64> = (0..30).map(|i| (i % 8) as f64).collect();
    let ev = Video {
        labels: Some(LabelTrack::new("e", Task::Expr, classes.clone()).unwrap()),
        ..va_video("e", vec![0.0; 60])
    };
    let onehot: Vec<f64> = classes.iter().flat_map(|&c| (0..8).map(move |k| f64::from(k as f64 == c))).collect();
    let rep = compute_metrics(Task::Expr, &[ev], &[onehot], ScoreKind::Logits).unwrap();
    assert_eq!(rep.get("f1_macro"), Some(1.0));
    let bits: Vec<f64> = (0..30 * 12).map(|i| f64::from((i * 7 % 5 < 2) as u8)).collect();
    let av = Video {
        labels: Some(LabelTrack::new("a", Task::Au, bits.clone()).unwrap()),
        ..va_video("a", vec![0.0; 60])
    };
    let rep = compute_metrics(Task::Au, &[av], &[bits], ScoreKind::Probabilities).unwrap();
    assert_eq!(rep.get("f1_macro"), Some(1.0));
}

fn tiny_videos(task: Task) -> (Vec<Video>, Vec<Video>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_videos: 2,
        n_val_videos: 1,
        n_frames: 60,
        visual_dim: 6,
        audio_dim: 3,
        task,
        ..SynthSpec::default()
    };
    synth_dataset(&spec, dir.path()).unwrap();
    let m = Manifest::read(&dir.path().join("manifest.csv")).unwrap();
    (
        load_videos(&m.split(Split::Train), Some(task)).unwrap(),
        load_videos(&m.split(Split::Val), Some(task)).unwrap(),
    )
}

fn tiny_config(task: Task) -> FusionConfig {
    let mut c = FusionConfig::small(task, 6, 3, 4, 8, 1);
    c.encoder.n_heads = 2;
    c
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-3,
        batch_size: 2,
        epochs,
        window: 20,
        stride: 10,
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_training_is_bit_identical_in_f64() {
    let (tr, va) = tiny_videos(Task::Va);
    let a = train::<f64>(tiny_config(Task::Va), &tr, &va, &tiny_train_config(2), None).unwrap();
    let b = train::<f64>(tiny_config(Task::Va), &tr, &va, &tiny_train_config(2), None).unwrap();
    let losses = |o: &avfusion::train::TrainOutcome<f64>| o.record.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert!(!a.record.steps.is_empty());
    assert_eq!(losses(&a), losses(&b));
    for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let (tr, _) = tiny_videos(Task::Expr);
    let cfg = tiny_train_config(0);
    let out = train::<f64>(tiny_config(Task::Expr), &tr, &[], &cfg, None).unwrap();
    assert!(out.record.steps.is_empty());
    let mut init_cfg = tiny_config(Task::Expr);
    init_cfg.set_dropout(cfg.dropout);
    let (_, init) = FusionModel::new::<f64>(init_cfg, cfg.seed).unwrap();
    for (x, y) in out.params.entries().iter().zip(init.entries()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
}

#[test]
fn empty_training_split_is_an_error() {
    let err = train::<f32>(tiny_config(Task::Au), &[], &[], &tiny_train_config(1), None).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
}

#[test]
fn training_lowers_the_loss() {
    let (tr, _) = tiny_videos(Task::Au);
    let out = train::<f32>(tiny_config(Task::Au), &tr, &[], &tiny_train_config(15), None).unwrap();
    let steps = &out.record.steps;
    let first: f64 = steps[..3].iter().map(|s| s.loss).sum::<f64>() / 3.0;
    let last: f64 = steps[steps.len() - 3..].iter().map(|s| s.loss).sum::<f64>() / 3.0;
    assert!(last < first, "{first} -> {last}");
    assert!(steps.windows(2).all(|w| w[1].step > w[0].step));
}

#[test]
fn repeated_non_finite_steps_abort() {
    let (mut tr, _) = tiny_videos(Task::Va);
    for v in &mut tr {
        v.visual.iter_mut().for_each(|x| *x = f32::NAN);
    }
    let err = train::<f64>(tiny_config(Task::Va), &tr, &[], &tiny_train_config(5), None).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
    assert!(err.to_string().contains("3 consecutive"), "{err}");
}
