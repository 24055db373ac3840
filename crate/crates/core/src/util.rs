//! Small numeric and hashing helpers shared across modules.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable logistic loss for a logit `s` against label `y`.
pub fn logistic_loss(s: f64, y: f64) -> f64 {
    // log(1 + e^s) - y*s, computed without overflow.
    let softplus = if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    };
    softplus - y * s
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a. Used wherever a platform-independent string hash
/// is needed (token bucketing, derived RNG streams).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic ChaCha8 RNG derived from a root seed and a label, so that
/// independent sampling streams never interleave.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Rank-based AUC with midrank tie handling. Returns `None` when one class
/// is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // midrank over the tie group [i, j], 1-based ranks
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_hand_values() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        let v = sigmoid((1.0f64 / 15.0).ln());
        assert!((v - 0.0625).abs() < 1e-12, "sigmoid(ln(1/15)) = {v}");
    }

    #[test]
    fn auc_agrees_with_exhaustive_pair_count() {
        let mut rng = derived_rng(7, "auc-test");
        use rand::Rng;
        let n = 300;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();

        let mut concordant = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            for j in 0..n {
                if labels[j] {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        let brute = concordant / total;
        let fast = auc(&scores, &labels).unwrap();
        assert!((brute - fast).abs() < 1e-12, "brute {brute} vs fast {fast}");
    }

    #[test]
    fn auc_degenerate_is_none() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_none());
    }

    #[test]
    fn fnv_is_stable() {
        // frozen reference value of FNV-1a 64 for "foo"
        assert_eq!(fnv1a64(b"foo"), 0xdcb2_7518_fed9_d577);
    }

    #[test]
    fn logistic_loss_is_stable_at_extremes() {
        assert!(logistic_loss(1000.0, 1.0) < 1e-9);
        assert!(logistic_loss(-1000.0, 0.0) < 1e-9);
        assert!(logistic_loss(1000.0, 0.0) > 999.0);
    }
}
