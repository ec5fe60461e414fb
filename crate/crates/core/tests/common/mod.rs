#![allow(dead_code)]

use rand::Rng;

/// Brute-force competitive attention: scans every (class, shot) pair.
pub struct Oracle {
    pub winners: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn oracle(classes: &[Vec<Vec<f64>>], query: &[f64]) -> Oracle {
    let n = classes.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    for (i, class) in classes.iter().enumerate() {
        for (j, p) in class.iter().enumerate() {
            let d = p.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            match best[i] {
                Some((_, bd)) if bd <= d => {}
                _ => best[i] = Some((j, d)),
            }
        }
    }
    let winners = best.iter().map(|b| b.unwrap().0).collect();
    let z: f64 = best.iter().map(|b| (-b.unwrap().1).exp()).sum();
    let weights = best.iter().map(|b| (-b.unwrap().1).exp() / z).collect();
    Oracle { winners, weights }
}

pub fn random_classes(rng: &mut impl Rng, n: usize, k: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| (0..k).map(|_| random_vec(rng, d)).collect())
        .collect()
}

pub fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
