//! Oracles and fixture helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use dillema::conditioning::LumaGrid;
use dillema::evaluation::{read_predictions, EvaluationReport};
use dillema::model::{ClassMap, TaskKind};
use num::{BigInt, BigRational, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn frac(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Loads `reports/<name>.csv` into a report over `classes`.
pub fn stored_report(name: &str, task: TaskKind, classes: &[&str]) -> EvaluationReport {
    let path = fixture(&format!("reports/{name}.csv"));
    let cases = read_predictions(std::fs::File::open(&path).unwrap(), task).unwrap();
    let suite = name.rsplit_once('-').map_or(name, |(s, _)| s);
    EvaluationReport::from_cases(suite, name, task, classes.iter().map(|c| c.to_string()).collect(), cases).unwrap()
}

pub fn imagenet_classes() -> Vec<&'static str> {
    vec!["c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9"]
}

pub const SHIFT_CLASSES: [&str; 4] = ["Road", "Vehicle", "Pedestrian", "SideWalk"];

pub fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32, classes: u8) -> ClassMap {
    ClassMap::new(w, h, (0..w * h).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// mIoU from explicit pixel-index sets, averaged over classes present in either map.
pub fn miou_oracle(pred: &ClassMap, truth: &ClassMap, classes: u8) -> BigRational {
    let mut sum = BigRational::zero();
    let mut present = 0i64;
    for c in 0..classes {
        let p: BTreeSet<usize> = pred.data().iter().enumerate().filter(|(_, v)| **v == c).map(|(i, _)| i).collect();
        let t: BTreeSet<usize> = truth.data().iter().enumerate().filter(|(_, v)| **v == c).map(|(i, _)| i).collect();
        let union = p.union(&t).count() as i64;
        if union == 0 {
            continue;
        }
        present += 1;
        sum += frac(p.intersection(&t).count() as i64, union);
    }
    sum / BigRational::from_integer(BigInt::from(present))
}

/// Per-class recall straight from label lists.
pub fn recall_oracle(preds: &[u32], truths: &[u32], classes: u32) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let support = truths.iter().filter(|t| **t == c).count();
            let hit = preds.iter().zip(truths).filter(|(p, t)| **t == c && **p == c).count();
            (support > 0).then(|| hit as f64 / support as f64)
        })
        .collect()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> (Vec<u32>, Vec<u32>) {
    let truths: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    // Bias toward correct predictions so diagonals are non-trivial.
    let preds = truths.iter().map(|t| if rng.random_bool(0.6) { *t } else { rng.random_range(0..classes) }).collect();
    (preds, truths)
}

/// A few random filled rectangles and ellipses over a noisy background.
pub fn random_scene(seed: u64, w: usize, h: usize) -> LumaGrid {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let shapes: Vec<(usize, usize, usize, usize, f64, bool)> = (0..3)
        .map(|_| {
            let x0 = (next() % w as u64) as usize;
            let y0 = (next() % h as u64) as usize;
            let x1 = x0 + 1 + (next() % (w as u64 / 2 + 1)) as usize;
            let y1 = y0 + 1 + (next() % (h as u64 / 2 + 1)) as usize;
            (x0, y0, x1, y1, (next() % 1000) as f64 / 1000.0, next() % 2 == 0)
        })
        .collect();
    let noise: Vec<f64> = (0..w * h).map(|_| (next() % 1000) as f64 / 20000.0).collect();
    LumaGrid::from_fn(w, h, |x, y| {
        let mut v = 0.3 + noise[y * w + x];
        for (x0, y0, x1, y1, level, round) in &shapes {
            let inside = if *round {
                let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
                let (rx, ry) = ((x1 - x0) as f64 / 2.0, (y1 - y0) as f64 / 2.0);
                ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0
            } else {
                (*x0..*x1).contains(&x) && (*y0..*y1).contains(&y)
            };
            if inside {
                v = *level;
            }
        }
        v
    })
}
