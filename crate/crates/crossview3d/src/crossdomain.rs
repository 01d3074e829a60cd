//! Cross-domain query enhancement: sample positive and negative queries per
//! domain from the matching scores, merge the two domains, split semantic
//! from geometry channels and compute the contrastive alignment loss.

use thiserror::Error;

use crate::interaction::MatchResult;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum CrossDomainError {
    #[error("query sampling needs {needed} queries (2 per ground truth), got {n_queries}")]
    TooFewQueries { n_queries: usize, needed: usize },
    #[error("channel count {0} is odd, cannot bisect into semantic/geometry halves")]
    OddChannels(usize),
    #[error("semantic query row {0} has near-zero norm")]
    ZeroVector(usize),
}

/// Query indices sampled from one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSamples {
    /// Hungarian-assigned query per ground truth (in ground-truth order).
    pub positives: Vec<usize>,
    /// The same number of background-like queries: lowest max-over-GT score
    /// among unassigned queries, ties broken by query index.
    pub negatives: Vec<usize>,
}

pub fn sample_queries(m: &MatchResult) -> Result<DomainSamples, CrossDomainError> {
    let (n, k) = m.score_matrix.dims2();
    if n < 2 * k {
        return Err(CrossDomainError::TooFewQueries {
            n_queries: n,
            needed: 2 * k,
        });
    }
    let positives = m.assignment.clone();
    let assigned: Vec<bool> = {
        let mut a = vec![false; n];
        for &q in &positives {
            a[q] = true;
        }
        a
    };
    let mut unassigned: Vec<(f64, usize)> = (0..n)
        .filter(|q| !assigned[*q])
        .map(|q| {
            let row = &m.score_matrix.data[q * k..(q + 1) * k];
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (best, q)
        })
        .collect();
    unassigned.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let negatives = unassigned.iter().take(k).map(|(_, q)| *q).collect();
    Ok(DomainSamples {
        positives,
        negatives,
    })
}

/// Sampled query rows merged across the two domains: K = K_r + K_v rows of
/// positives and as many negatives.
#[derive(Debug, Clone, Copy)]
pub struct SampleSets {
    /// [K, C]
    pub positives: NodeId,
    /// [K, C]
    pub negatives: NodeId,
    pub k: usize,
}

/// Gathers sampled rows from both domains' decoded query tensors and stacks
/// them roadside-first.
pub fn merge_samples(
    tape: &mut Tape,
    qd_r: NodeId,
    s_r: &DomainSamples,
    qd_v: NodeId,
    s_v: &DomainSamples,
) -> SampleSets {
    let pr = tape.select_rows(qd_r, &s_r.positives);
    let pv = tape.select_rows(qd_v, &s_v.positives);
    let nr = tape.select_rows(qd_r, &s_r.negatives);
    let nv = tape.select_rows(qd_v, &s_v.negatives);
    let positives = tape.concat_rows(&[pr, pv]);
    let negatives = tape.concat_rows(&[nr, nv]);
    SampleSets {
        positives,
        negatives,
        k: s_r.positives.len() + s_v.positives.len(),
    }
}

/// Exact channel bisection of query rows into (semantic, geometry) halves.
/// No learned projection: concatenating the halves reconstructs the input.
pub fn decouple(tape: &mut Tape, rows: NodeId) -> Result<(NodeId, NodeId), CrossDomainError> {
    let c = tape.shape(rows)[1];
    if c % 2 != 0 {
        return Err(CrossDomainError::OddChannels(c));
    }
    let sem = tape.slice_cols(rows, 0, c / 2);
    let geo = tape.slice_cols(rows, c / 2, c);
    Ok((sem, geo))
}

/// Scalar similarity between two semantic query vectors: sigmoid of their
/// cosine, and exactly 0 when i = j.
pub fn similarity(a: &[f64], b: &[f64], i: usize, j: usize) -> Result<f64, CrossDomainError> {
    if i == j {
        return Ok(0.0);
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 {
        return Err(CrossDomainError::ZeroVector(i));
    }
    if nb < 1e-12 {
        return Err(CrossDomainError::ZeroVector(j));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    Ok(1.0 / (1.0 + (-cos).exp()))
}

/// Target matrix [K, 2K] over the merged ordering (positives first):
/// 1 iff both indices are positives and i != j.
pub fn similarity_labels(k: usize) -> Tensor {
    let mut data = vec![0.0; k * 2 * k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                data[i * 2 * k + j] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[k, 2 * k], data)
}

/// Contrastive loss over the merged sample sets: L1 distance between the
/// positive-row similarity matrix and its labels, computed on the semantic
/// half-channels only. `normalize` divides the raw double sum by K².
pub fn contrastive_loss(
    tape: &mut Tape,
    sets: &SampleSets,
    normalize: bool,
) -> Result<NodeId, CrossDomainError> {
    contrastive_impl(tape, sets, true, normalize)
}

/// Ablation variant that skips the semantic/geometry split and compares
/// full query channels.
pub fn contrastive_loss_full(
    tape: &mut Tape,
    sets: &SampleSets,
    normalize: bool,
) -> Result<NodeId, CrossDomainError> {
    contrastive_impl(tape, sets, false, normalize)
}

fn contrastive_impl(
    tape: &mut Tape,
    sets: &SampleSets,
    semantic_half: bool,
    normalize: bool,
) -> Result<NodeId, CrossDomainError> {
    let k = sets.k;
    let merged = tape.concat_rows(&[sets.positives, sets.negatives]);
    let sem_all = if semantic_half {
        decouple(tape, merged)?.0
    } else {
        merged
    };
    let sem_pos = {
        let idx: Vec<usize> = (0..k).collect();
        tape.select_rows(sem_all, &idx)
    };
    for (i, row) in tape.value(sem_all).data.chunks(tape.shape(sem_all)[1]).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(CrossDomainError::ZeroVector(i));
        }
    }
    let np = tape.row_l2_normalize(sem_pos);
    let na = tape.row_l2_normalize(sem_all);
    let nat = tape.transpose(na);
    let cos = tape.matmul(np, nat);
    let sim = tape.sigmoid(cos);
    // force the exact-zero diagonal (query compared with itself)
    let mut mask = Tensor::from_vec(&[k, 2 * k], vec![1.0; k * 2 * k]);
    for i in 0..k {
        mask.data[i * 2 * k + i] = 0.0;
    }
    let sim = tape.mul_mask(sim, mask);
    let labels = tape.constant(similarity_labels(k));
    let diff = tape.sub(sim, labels);
    let l1 = tape.abs(diff);
    let sum = tape.sum_all(l1);
    Ok(if normalize {
        tape.scale(sum, 1.0 / (k * k) as f64)
    } else {
        sum
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::hungarian;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn match_from_cost(n: usize, k: usize, cost: Vec<f64>) -> MatchResult {
        hungarian(&Tensor::from_vec(&[n, k], cost)).unwrap()
    }

    #[test]
    fn hand_traced_sampling() {
        // scores s(q) = [-1, -5, -2, -9] over one GT, q0 assigned
        let m = match_from_cost(4, 1, vec![1.0, 5.0, 2.0, 9.0]);
        let s = sample_queries(&m).unwrap();
        assert_eq!(s.positives, vec![0]);
        assert_eq!(s.negatives, vec![3]);
    }

    #[test]
    fn sampling_disjoint_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let k = rng.gen_range(1..5usize);
            let n = rng.gen_range(2 * k..2 * k + 8);
            let cost = (0..n * k).map(|_| rng.gen_range(0.1..9.0)).collect();
            let m = match_from_cost(n, k, cost);
            let s = sample_queries(&m).unwrap();
            assert_eq!(s.positives.len(), k);
            assert_eq!(s.negatives.len(), k);
            for q in &s.negatives {
                assert!(!s.positives.contains(q));
            }
        }
    }

    #[test]
    fn sampling_partitions_at_boundary() {
        // N = 2K: every query lands in exactly one set
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let cost = (0..6 * 3).map(|_| rng.gen_range(0.1..9.0)).collect();
        let m = match_from_cost(6, 3, cost);
        let s = sample_queries(&m).unwrap();
        let mut all: Vec<usize> = s.positives.iter().chain(&s.negatives).copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sampling_rejects_too_few_queries() {
        let m = match_from_cost(3, 2, vec![1.0; 6]);
        assert_eq!(
            sample_queries(&m).unwrap_err(),
            CrossDomainError::TooFewQueries { n_queries: 3, needed: 4 }
        );
    }

    #[test]
    fn decouple_is_exact_bisection() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let (sem, geo) = decouple(&mut tape, x).unwrap();
        assert_eq!(tape.value(sem).data, vec![1.0, 2.0]);
        assert_eq!(tape.value(geo).data, vec![3.0, 4.0]);
        let cat = tape.concat_cols(&[sem, geo]);
        assert_eq!(tape.value(cat).data, vec![1.0, 2.0, 3.0, 4.0]);
        let odd = tape.constant(Tensor::from_vec(&[1, 3], vec![1.0; 3]));
        assert_eq!(decouple(&mut tape, odd).unwrap_err(), CrossDomainError::OddChannels(3));
    }

    #[test]
    fn similarity_closed_forms() {
        assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0], 2, 2).unwrap(), 0.0);
        let s = similarity(&[1.0, 0.0], &[0.0, 1.0], 0, 1).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        let s = similarity(&[0.3, -0.7], &[0.3, -0.7], 0, 1).unwrap();
        assert!((s - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!((s - 0.731058).abs() < 1e-6);
        assert_eq!(
            similarity(&[0.0, 0.0], &[1.0, 0.0], 0, 1).unwrap_err(),
            CrossDomainError::ZeroVector(0)
        );
    }

    #[test]
    fn label_matrix_hand_case() {
        let l = similarity_labels(2);
        assert_eq!(l.shape, vec![2, 4]);
        assert_eq!(l.data, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    fn sets_from(tape: &mut Tape, pos: Tensor, neg: Tensor) -> SampleSets {
        let k = pos.shape[0];
        SampleSets {
            positives: tape.param(pos),
            negatives: tape.param(neg),
            k,
        }
    }

    #[test]
    fn k1_orthogonal_hand_value() {
        let mut tape = Tape::new();
        let sets = sets_from(
            &mut tape,
            Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 5.0, 5.0]),
            Tensor::from_vec(&[1, 4], vec![0.0, 1.0, -2.0, 3.0]),
        );
        let l = contrastive_loss(&mut tape, &sets, false).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);
    }

    fn brute_force_loss(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> f64 {
        let k = pos.len();
        let all: Vec<&Vec<f64>> = pos.iter().chain(neg.iter()).collect();
        let half = pos[0].len() / 2;
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..2 * k {
                let s = similarity(&all[i][..half], &all[j][..half], i, j).unwrap();
                let label = if i != j && j < k { 1.0 } else { 0.0 };
                total += (s - label).abs();
            }
        }
        total
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..30 {
            let k = rng.gen_range(1..=8usize);
            let c = 2 * rng.gen_range(1..=6usize);
            let gen = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..k)
                    .map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            };
            let pos = gen(&mut rng);
            let neg = gen(&mut rng);
            let expect = brute_force_loss(&pos, &neg);
            let mut tape = Tape::new();
            let sets = sets_from(
                &mut tape,
                Tensor::from_vec(&[k, c], pos.concat()),
                Tensor::from_vec(&[k, c], neg.concat()),
            );
            let l = contrastive_loss(&mut tape, &sets, false).unwrap();
            let got = tape.value(l).item();
            assert!((got - expect).abs() < 1e-6, "trial {trial}: {got} vs {expect}");
            assert!(got >= 0.0 && got <= 2.0 * (k * k) as f64);
            let n = contrastive_loss(&mut tape, &sets, true).unwrap();
            assert!((tape.value(n).item() - expect / (k * k) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn invariant_to_geometry_perturbation_and_semantic_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let k = 3;
        let c = 8;
        let pos: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |p: Vec<f64>, n: Vec<f64>| -> f64 {
            let mut tape = Tape::new();
            let sets = sets_from(
                &mut tape,
                Tensor::from_vec(&[k, c], p),
                Tensor::from_vec(&[k, c], n),
            );
            let l = contrastive_loss(&mut tape, &sets, false).unwrap();
            tape.value(l).item()
        };
        let base = eval(pos.clone(), neg.clone());
        // arbitrary geometry-half rewrite leaves the loss bitwise unchanged
        let mut pg = pos.clone();
        let mut ng = neg.clone();
        for row in 0..k {
            for ch in c / 2..c {
                pg[row * c + ch] = rng.gen_range(-50.0..50.0);
                ng[row * c + ch] = rng.gen_range(-50.0..50.0);
            }
        }
        assert_eq!(eval(pg, ng), base);
        // positive rescale of one semantic row is absorbed by normalization
        let mut ps = pos.clone();
        for ch in 0..c / 2 {
            ps[c + ch] *= 7.5;
        }
        assert!((eval(ps, neg.clone()) - base).abs() < 1e-9);
    }

    #[test]
    fn positive_block_symmetric_zero_diag() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let k = 4;
        let c = 6;
        let mut tape = Tape::new();
        let sets = sets_from(
            &mut tape,
            Tensor::from_vec(&[k, c], (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            Tensor::from_vec(&[k, c], (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        );
        // rebuild the similarity matrix the same way the loss does
        let merged = tape.concat_rows(&[sets.positives, sets.negatives]);
        let (sem_all, _) = decouple(&mut tape, merged).unwrap();
        let half = tape.shape(sem_all)[1];
        let vals = tape.value(sem_all).data.clone();
        for i in 0..k {
            assert_eq!(similarity(&vals[i * half..], &vals[i * half..], i, i).unwrap(), 0.0);
            for j in 0..k {
                let a = similarity(
                    &vals[i * half..(i + 1) * half],
                    &vals[j * half..(j + 1) * half],
                    i,
                    j,
                )
                .unwrap();
                let b = similarity(
                    &vals[j * half..(j + 1) * half],
                    &vals[i * half..(i + 1) * half],
                    j,
                    i,
                )
                .unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_semantic_fd_geometry_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let k = 2;
        let c = 6;
        let pos: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let pn = tape.param(Tensor::from_vec(&[k, c], pos.clone()));
        let nn = tape.param(Tensor::from_vec(&[k, c], neg.clone()));
        let sets = SampleSets {
            positives: pn,
            negatives: nn,
            k,
        };
        let l = contrastive_loss(&mut tape, &sets, false).unwrap();
        tape.backward(l);
        let gp = tape.grad(pn).unwrap().data.clone();
        // geometry half-channels carry exactly zero gradient
        for row in 0..k {
            for ch in c / 2..c {
                assert_eq!(gp[row * c + ch], 0.0);
            }
        }
        // semantic half matches central differences
        let eval = |p: &[f64]| -> f64 {
            let mut t = Tape::new();
            let sets = sets_from(
                &mut t,
                Tensor::from_vec(&[k, c], p.to_vec()),
                Tensor::from_vec(&[k, c], neg.clone()),
            );
            let l = contrastive_loss(&mut t, &sets, false).unwrap();
            t.value(l).item()
        };
        let h = 1e-6;
        for row in 0..k {
            for ch in 0..c / 2 {
                let flat = row * c + ch;
                let mut up = pos.clone();
                up[flat] += h;
                let mut dn = pos.clone();
                dn[flat] -= h;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                let denom = fd.abs().max(gp[flat].abs()).max(1e-6);
                assert!(
                    (fd - gp[flat]).abs() / denom < 1e-4,
                    "grad[{flat}] fd {fd} vs {}",
                    gp[flat]
                );
            }
        }
    }

    #[test]
    fn zero_semantic_vector_is_an_error() {
        let mut tape = Tape::new();
        let sets = sets_from(
            &mut tape,
            Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 3.0, 4.0]),
            Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]),
        );
        assert_eq!(
            contrastive_loss(&mut tape, &sets, false).unwrap_err(),
            CrossDomainError::ZeroVector(0)
        );
    }
}
