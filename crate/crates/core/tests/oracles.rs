//! Losses, attention, IoU and sampler checked against naive re-implementations.

use std::collections::BTreeMap;

use far_core::eval::attention_iou;
use far_core::image::Mask;
use far_core::losses::{ldm_loss, localized_refinement_grad, localized_refinement_loss, total_loss, CLAMP_EPS};
use far_core::nn::attention::{cross_attention, cross_attention_backward, CrossAttentionWeights};
use far_core::nn::{add_noise, ddim_from, AttentionMap, AttentionRecord, LatentGrid, LayerSide, NoiseSchedule};
use far_core::rng::seeded;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Mask {
    let bits: Vec<u8> = (0..n * n).map(|_| u8::from(rng.random::<bool>())).collect();
    Mask::from_bits(n, n, &bits).unwrap()
}

/// A record of `maps` random maps over `tokens` tokens with softmax rows.
fn random_record(rng: &mut ChaCha8Rng, n: usize, tokens: usize, maps: usize) -> AttentionRecord<f64> {
    let maps = (0..maps)
        .map(|i| {
            let mut data = Vec::with_capacity(n * n * tokens);
            for _ in 0..n * n {
                let row = uniform_vec(rng, tokens, -3.0, 3.0);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                data.extend(row.iter().map(|v| v.exp() / z));
            }
            AttentionMap {
                layer: format!("layer{}", i / 2),
                side: if i < maps / 2 { LayerSide::Down } else { LayerSide::Up },
                head: i % 2,
                data,
            }
        })
        .collect();
    AttentionRecord {
        maps,
        resolution: n,
        tokens,
    }
}

fn naive_mse(a: &[f64], b: &[f64], n: usize, c: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            for ch in 0..c {
                let idx = (i * n + j) * c + ch;
                let d = a[idx] - b[idx];
                s += d * d;
            }
        }
    }
    s / (n * n * c) as f64
}

/// Elementwise BCE over (concept, map, row, col), written out longhand.
fn naive_local(rec: &AttentionRecord<f64>, masks: &BTreeMap<u32, Mask>, tok: &BTreeMap<u32, usize>) -> f64 {
    let n = rec.resolution;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (cid, m) in masks {
        for map in &rec.maps {
            for r in 0..n {
                for c in 0..n {
                    let a = map.data[(r * n + c) * rec.tokens + tok[cid]].max(CLAMP_EPS).min(1.0 - CLAMP_EPS);
                    let y = if m.get(c, r) { 1.0 } else { 0.0 };
                    sum += -(y * a.ln() + (1.0 - y) * (1.0 - a).ln());
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

#[test]
fn ldm_loss_matches_double_loop() {
    let mut rng = seeded(1);
    for _ in 0..100 {
        let a = uniform_vec(&mut rng, 16 * 16 * 4, -3.0, 3.0);
        let b = uniform_vec(&mut rng, 16 * 16 * 4, -3.0, 3.0);
        let got = ldm_loss(&a, &b).unwrap();
        assert!((got - naive_mse(&a, &b, 16, 4)).abs() < 1e-10);
    }
}

#[test]
fn localized_loss_matches_double_loop() {
    let mut rng = seeded(2);
    for _ in 0..100 {
        let rec = random_record(&mut rng, 16, 6, 4);
        let masks = BTreeMap::from([(1, random_mask(&mut rng, 16)), (2, random_mask(&mut rng, 16))]);
        let tok = BTreeMap::from([(1, 2), (2, 4)]);
        let got = localized_refinement_loss(&rec, &masks, &tok).unwrap();
        assert!((got - naive_local(&rec, &masks, &tok)).abs() < 1e-8);
    }
}

#[test]
fn localized_loss_fixed_points() {
    let mut rng = seeded(3);
    let m = random_mask(&mut rng, 16);
    let mut rec = random_record(&mut rng, 16, 1, 4);
    for map in &mut rec.maps {
        map.data = m.data.iter().map(|&b| f64::from(b)).collect();
    }
    let masks = BTreeMap::from([(1, m.clone())]);
    let tok = BTreeMap::from([(1, 0)]);
    assert!(localized_refinement_loss(&rec, &masks, &tok).unwrap() <= 2e-6);
    for map in &mut rec.maps {
        map.data.iter_mut().for_each(|v| *v = 0.5);
    }
    let l = localized_refinement_loss(&rec, &masks, &tok).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn localized_loss_symmetry_and_monotonicity() {
    let mut rng = seeded(4);
    let rec = random_record(&mut rng, 8, 1, 2);
    let m = random_mask(&mut rng, 8);
    let tok = BTreeMap::from([(1, 0)]);
    let base = localized_refinement_loss(&rec, &BTreeMap::from([(1, m.clone())]), &tok).unwrap();
    let mut flipped = rec.clone();
    flipped.maps.iter_mut().for_each(|mp| mp.data.iter_mut().for_each(|v| *v = 1.0 - *v));
    let inv = Mask::from_bits(8, 8, &m.data.iter().map(|&b| 1 - b).collect::<Vec<_>>()).unwrap();
    let sym = localized_refinement_loss(&flipped, &BTreeMap::from([(1, inv)]), &tok).unwrap();
    assert!((base - sym).abs() < 1e-9);
    let mut closer = rec.clone();
    for mp in &mut closer.maps {
        for (v, &b) in mp.data.iter_mut().zip(&m.data) {
            *v += 0.3 * (f64::from(b) - *v);
        }
    }
    let moved = localized_refinement_loss(&closer, &BTreeMap::from([(1, m)]), &tok).unwrap();
    assert!(moved < base);
}

#[test]
fn localized_gradient_matches_central_differences() {
    let mut rng = seeded(5);
    let rec = random_record(&mut rng, 4, 3, 2);
    let masks = BTreeMap::from([(7, random_mask(&mut rng, 4))]);
    let tok = BTreeMap::from([(7, 1)]);
    let (_, g) = localized_refinement_grad(&rec, &masks, &tok, 1.0).unwrap();
    let h = 1e-6;
    for mi in 0..rec.maps.len() {
        for idx in 0..rec.maps[mi].data.len() {
            let mut p = rec.clone();
            p.maps[mi].data[idx] += h;
            let mut q = rec.clone();
            q.maps[mi].data[idx] -= h;
            let fd = (localized_refinement_loss(&p, &masks, &tok).unwrap()
                - localized_refinement_loss(&q, &masks, &tok).unwrap())
                / (2.0 * h);
            let an = g[mi][idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "map {mi} idx {idx}: fd {fd} an {an}");
        }
    }
}

fn random_weights(rng: &mut ChaCha8Rng, d_in: usize, d_txt: usize, d: usize, d_v: usize) -> CrossAttentionWeights<f64> {
    CrossAttentionWeights {
        w_q: uniform_vec(rng, d_in * d, -0.5, 0.5),
        w_k: uniform_vec(rng, d_txt * d, -0.5, 0.5),
        w_v: uniform_vec(rng, d_txt * d_v, -0.5, 0.5),
        d_in,
        d_txt,
        d,
        d_v,
    }
}

#[test]
fn attention_equals_explicit_softmax_of_scores() {
    let mut rng = seeded(6);
    let (m, l, d_in, d_txt, d) = (10, 5, 6, 7, 8);
    for _ in 0..20 {
        let w = random_weights(&mut rng, d_in, d_txt, d, 3);
        let x = uniform_vec(&mut rng, m * d_in, -1.0, 1.0);
        let t = uniform_vec(&mut rng, l * d_txt, -1.0, 1.0);
        let out = cross_attention(&x, m, &t, l, &w).unwrap();
        for i in 0..m {
            let mut scores = vec![0.0; l];
            for (j, s) in scores.iter_mut().enumerate() {
                for e in 0..d {
                    let mut q = 0.0;
                    for a in 0..d_in {
                        q += x[i * d_in + a] * w.w_q[a * d + e];
                    }
                    let mut k = 0.0;
                    for a in 0..d_txt {
                        k += t[j * d_txt + a] * w.w_k[a * d + e];
                    }
                    *s += q * k;
                }
                *s /= (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..l {
                let want = (scores[j] - mx).exp() / z;
                assert!((out.attn[i * l + j] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn attention_gradient_wrt_query_weights() {
    let mut rng = seeded(7);
    let (m, l, d_in, d_txt, d) = (6, 4, 5, 5, 8);
    let w = random_weights(&mut rng, d_in, d_txt, d, 4);
    let x = uniform_vec(&mut rng, m * d_in, -1.0, 1.0);
    let t = uniform_vec(&mut rng, l * d_txt, -1.0, 1.0);
    let r = uniform_vec(&mut rng, m * l, -1.0, 1.0);
    let f = |w: &CrossAttentionWeights<f64>| -> f64 {
        let o = cross_attention(&x, m, &t, l, w).unwrap();
        o.attn.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let fwd = cross_attention(&x, m, &t, l, &w).unwrap();
    let g = cross_attention_backward(&x, m, &t, l, &w, &fwd, None, Some(&r));
    let h = 1e-5;
    for idx in 0..w.w_q.len() {
        let mut p = w.clone();
        p.w_q[idx] += h;
        let mut q = w.clone();
        q.w_q[idx] -= h;
        let fd = (f(&p) - f(&q)) / (2.0 * h);
        let an = g.w_q[idx];
        assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "W^q[{idx}]: fd {fd} an {an}");
    }
}

#[test]
fn attention_rows_normalized_and_degenerate_cases() {
    let mut rng = seeded(8);
    for _ in 0..50 {
        let l = rng.random_range(1..12);
        let w = random_weights(&mut rng, 8, 8, 8, 8);
        let x = uniform_vec(&mut rng, 16 * 8, -4.0, 4.0);
        let t = uniform_vec(&mut rng, l * 8, -4.0, 4.0);
        let out = cross_attention(&x, 16, &t, l, &w).unwrap();
        for row in out.attn.chunks(l) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }
    let w = random_weights(&mut rng, 8, 8, 8, 8);
    let one = cross_attention(&uniform_vec(&mut rng, 16 * 8, -1.0, 1.0), 16, &uniform_vec(&mut rng, 8, -1.0, 1.0), 1, &w).unwrap();
    assert!(one.attn.iter().all(|&a| a == 1.0));
    let zero_q = CrossAttentionWeights {
        w_q: vec![0.0; 64],
        ..w
    };
    let u = cross_attention(&uniform_vec(&mut rng, 16 * 8, -1.0, 1.0), 16, &uniform_vec(&mut rng, 5 * 8, -1.0, 1.0), 5, &zero_q).unwrap();
    assert!(u.attn.iter().all(|&a| a == 1.0 / 5.0));
}

#[test]
fn total_is_exact_weighted_sum() {
    let b = total_loss(1.0, 1.0, 1.0, 1.0, 0.04).unwrap();
    assert_eq!(b.total, 2.04);
    let b = total_loss(0.731, 5.0, 9.0, 0.0, 0.0).unwrap();
    assert_eq!(b.total.to_bits(), 0.731f64.to_bits());
}

#[test]
fn uniform_attention_iou_monte_carlo() {
    let mut rng = seeded(9);
    let n = 16;
    let a = vec![0.25; n * n];
    let mut cells: Vec<u8> = (0..n * n).map(|i| u8::from(i < n * n / 4)).collect();
    let draws = 4000;
    let mut sum = 0.0;
    for _ in 0..draws {
        cells.shuffle(&mut rng);
        let m = Mask::from_bits(n, n, &cells).unwrap();
        sum += attention_iou(&a, &m, 0.25).unwrap();
    }
    let mean = sum / draws as f64;
    // Overlap of two random 64-cell sets out of 256 averages 16 cells: 16 / (128 − 16).
    assert!((mean - 16.0 / 112.0).abs() < 0.005, "mean IoU {mean}");
}

#[test]
fn iou_depends_only_on_ranking() {
    let mut rng = seeded(10);
    let m = random_mask(&mut rng, 16);
    let a = uniform_vec(&mut rng, 256, 0.0, 1.0);
    let scaled: Vec<f64> = a.iter().map(|v| v * 37.5).collect();
    assert_eq!(attention_iou(&a, &m, 0.3).unwrap(), attention_iou(&scaled, &m, 0.3).unwrap());
}

#[test]
fn ddim_with_oracle_eps_recovers_latent() {
    let schedule = NoiseSchedule::standard();
    let mut rng = seeded(11);
    let z0 = LatentGrid::<f64>::gaussian(16, 4, &mut rng);
    let eps = LatentGrid::<f64>::gaussian(16, 4, &mut rng);
    let z_t = add_noise(&z0, schedule.steps() - 1, &eps, &schedule);
    let target = z0.clone();
    let sched = schedule.clone();
    let oracle = move |z: &LatentGrid<f64>, t: usize, _: &[f64]| -> LatentGrid<f64> {
        let a = sched.alpha_cum(t);
        let values = z
            .values
            .iter()
            .zip(&target.values)
            .map(|(&zt, &x0)| (zt - a.sqrt() * x0) / (1.0 - a).sqrt())
            .collect();
        LatentGrid::from_values(16, 4, values).unwrap()
    };
    let out = ddim_from(&oracle, &[], 50, &schedule, z_t);
    let err = out.values.iter().zip(&z0.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "max abs error {err}");
}

#[test]
fn noised_energy_matches_expectation() {
    let schedule = NoiseSchedule::standard();
    let mut rng = seeded(12);
    let z0 = LatentGrid::<f64>::zeros(16, 4);
    let t = 400;
    let mut sum = 0.0;
    for _ in 0..1000 {
        let eps = LatentGrid::<f64>::gaussian(16, 4, &mut rng);
        sum += add_noise(&z0, t, &eps, &schedule).sq_norm();
    }
    let want = (1.0 - schedule.alpha_cum(t)) * 1024.0;
    assert!((sum / 1000.0 - want).abs() < 0.05 * want);
}
