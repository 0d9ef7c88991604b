//! Reference implementations shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use gradkit::{Scalar, Tape, Tensor};
use partprompt::crossmodal::{activate, similarity_maps};
use partprompt::fusion::{fuse_dense, fuse_sparse, image_part_weights};
use partprompt::metrics::{score, ClassCounts, EvalReport};
use partprompt::scenegen::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-2.0..2.0)))
}

pub fn similarity_oracle<T: Scalar>(t: &Tensor<T>, f: &Tensor<T>) -> Vec<T> {
    let (p, d) = (t.shape()[0], t.shape()[1]);
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let mut out = vec![T::zero(); p * h * w];
    for pi in 0..p {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for k in 0..d {
                    acc += t.get(&[pi, k]) * f.get(&[k, y, x]);
                }
                out[(pi * h + y) * w + x] = acc;
            }
        }
    }
    out
}

pub fn activate_oracle<T: Scalar>(s: &Tensor<T>, f: &Tensor<T>) -> Vec<T> {
    let (p, d, h, w) = (s.shape()[0], f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = Vec::with_capacity(p * d * h * w);
    for pi in 0..p {
        for k in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push(s.get(&[pi, y, x]) * f.get(&[k, y, x]) + f.get(&[k, y, x]));
                }
            }
        }
    }
    out
}

pub fn fuse_sparse_oracle<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>) -> Vec<T> {
    let block = x.numel() / x.shape()[0];
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * row.data()[i / block].max(T::zero()))
        .collect()
}

pub fn fuse_dense_oracle<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
    let p = x.shape()[0];
    let block = x.numel() / p;
    let mut acc = vec![T::zero(); block];
    for pi in 0..p {
        let coef = row.data()[pi] * w.data()[pi];
        for (i, a) in acc.iter_mut().enumerate() {
            *a += x.data()[pi * block + i] * coef;
        }
    }
    acc
}

pub fn weights_oracle<T: Scalar>(g: &Tensor<T>, t: &Tensor<T>) -> Vec<T> {
    let (p, d) = (t.shape()[0], t.shape()[1]);
    (0..p)
        .map(|pi| {
            let mut acc = T::zero();
            for k in 0..d {
                acc += g.data()[k] * t.get(&[pi, k]);
            }
            acc
        })
        .collect()
}

/// Runs every fusion op against its loop reference on `cases` random
/// shapes; returns the first mismatch.
pub fn check_fusion_oracles<T: Scalar>(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let p = rng.random_range(1..7);
        let d = rng.random_range(1..10);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let n = rng.random_range(1..4);
        let t_part = random::<T>(&mut rng, &[p, d]);
        let f_i = random::<T>(&mut rng, &[d, h, w]);
        let s = random::<T>(&mut rng, &[p, h, w]);
        let sparse = random::<T>(&mut rng, &[p, n, d]);
        let dense = random::<T>(&mut rng, &[p, d, h, w]);
        let row = random::<T>(&mut rng, &[1, p]);
        let wts = random::<T>(&mut rng, &[1, p]);
        let g = random::<T>(&mut rng, &[1, d]);

        let tape = Tape::new();
        let c = |t: &Tensor<T>| tape.constant(t.clone());
        let err = |e: partprompt::Error| e.to_string();
        let checks = [
            ("similarity_maps", similarity_maps(c(&t_part), c(&f_i)).map_err(err)?, similarity_oracle(&t_part, &f_i)),
            ("activate", activate(c(&s), c(&f_i)).map_err(err)?, activate_oracle(&s, &f_i)),
            ("fuse_sparse", fuse_sparse(c(&sparse), c(&row)).map_err(err)?, fuse_sparse_oracle(&sparse, &row)),
            ("fuse_dense", fuse_dense(c(&dense), c(&row), c(&wts)).map_err(err)?, fuse_dense_oracle(&dense, &row, &wts)),
            ("image_part_weights", image_part_weights(c(&g), c(&t_part)).map_err(err)?, weights_oracle(&g, &t_part)),
        ];
        for (name, got, want) in checks {
            if got.to_tensor().data() != want.as_slice() {
                return Err(format!("{name} differs on case {case} (P={p} d={d} h={h} w={w} n={n})"));
            }
        }
    }
    Ok(())
}

/// Per-image, per-class masks: `images[i][c]`.
pub type MaskSet = Vec<Vec<Mask>>;

/// Random prediction and ground-truth sets. Ground truth comes from a label
/// map (classes disjoint, some absent); predictions are independent noise
/// blobs, so classes can be predicted where they are absent.
pub fn random_mask_sets(rng: &mut ChaCha8Rng, images: usize, classes: usize, h: usize, w: usize) -> (MaskSet, MaskSet) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let present: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.6)).collect();
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..=classes)).collect();
        let gt = (0..classes)
            .map(|c| Mask::from_vec(h, w, labels.iter().map(|&l| present[c] && l == c + 1).collect()).unwrap())
            .collect();
        let pred = (0..classes)
            .map(|_| {
                let density = [0.0, 0.1, 0.4][rng.random_range(0..3)];
                Mask::from_vec(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
            })
            .collect();
        preds.push(pred);
        gts.push(gt);
    }
    (preds, gts)
}

fn pixel_iou(pred: &Mask, gt: &Mask) -> (usize, usize) {
    let (mut inter, mut union) = (0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    (inter, union)
}

/// Pixel-loop tabulation of (challenge IoU, IoU, mc IoU).
pub fn metric_oracle(preds: &MaskSet, gts: &MaskSet) -> (f64, f64, f64) {
    let classes = gts[0].len();
    let (mut challenge, mut challenge_n, mut all, mut all_n) = (0.0, 0usize, 0.0, 0usize);
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (pred, gt) in preds.iter().zip(gts) {
        let (mut cs, mut cn, mut as_, mut an) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..classes {
            let in_gt = gt[c].data().iter().any(|&v| v);
            let in_pred = pred[c].data().iter().any(|&v| v);
            let (i, u) = pixel_iou(&pred[c], &gt[c]);
            if in_gt {
                cs += i as f64 / u as f64;
                cn += 1;
            }
            if in_gt || in_pred {
                as_ += i as f64 / u as f64;
                an += 1;
                inter[c] += i;
                union[c] += u;
            }
        }
        if cn > 0 {
            challenge += cs / cn as f64;
            challenge_n += 1;
        }
        if an > 0 {
            all += as_ / an as f64;
            all_n += 1;
        }
    }
    let per_class: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (
        avg(challenge, challenge_n),
        avg(all, all_n),
        avg(per_class.iter().sum(), per_class.len()),
    )
}

pub fn report_for(preds: &MaskSet, gts: &MaskSet) -> EvalReport {
    let names: Vec<String> = (0..gts[0].len()).map(|c| format!("class{c}")).collect();
    let rows: Vec<Vec<ClassCounts>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| ClassCounts::new(a, b).unwrap()).collect())
        .collect();
    score(&names, &rows).unwrap()
}

/// Largest deviation between the scorer and the oracle over `sets` random
/// mask sets.
pub fn metric_oracle_deviation(seed: u64, sets: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..sets {
        let images = rng.random_range(1..8);
        let (preds, gts) = random_mask_sets(&mut rng, images, 3, 8, 8);
        let r = report_for(&preds, &gts);
        let (c, i, m) = metric_oracle(&preds, &gts);
        worst = worst.max((r.challenge_iou - c).abs()).max((r.iou - i).abs()).max((r.mc_iou - m).abs());
    }
    worst
}
