//! Shared oracles for integration tests.

use lexplain::model::CoalitionGame;

/// Brute-force Shapley values by the subset-weight formula:
/// phi_i = sum over S not containing i of |S|!(M-|S|-1)!/M! * (v(S+i) - v(S)).
pub fn brute_force_shapley(game: &CoalitionGame) -> Vec<f64> {
    let m = game.n_units();
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for s in 0..(1u64 << m) {
            if s & bit != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            let weight = fact[size] * fact[m - size - 1] / fact[m];
            *p += weight * (game.value(s | bit) - game.value(s));
        }
    }
    phi
}

/// All permutations of 0..n (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, items, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut items, &mut out);
    out
}

/// Word pool with distinct hashed ids under the default tokenizers.
pub const WORDS: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
];
