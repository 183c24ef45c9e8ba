mod common;

use common::rotary::translation_deviation;
use common::{rng, uniform};
use dsmoe::attention::{attention, attention_logits, AttentionConfig, PeMode};
use dsmoe::graph::Graph;
use dsmoe::rope::{apply_rope, RotaryMode, RotaryTable, DEFAULT_ROPE_BASE};
use proptest::prelude::*;
use rand::Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn rotated_dot_products_depend_on_displacement_only() {
    let hd = 8;
    let table = RotaryTable::build(RotaryMode::Axial, 16, 16, hd, DEFAULT_ROPE_BASE).unwrap();
    let mut r = rng(0);
    for _ in 0..100 {
        let q = uniform([1, 1, hd], -1.0, 1.0, &mut r);
        let k = uniform([1, 1, hd], -1.0, 1.0, &mut r);
        let pi = (r.gen_range(0..8), r.gen_range(0..8));
        let pj = (r.gen_range(0..8), r.gen_range(0..8));
        let t = (r.gen_range(0..8), r.gen_range(0..8));
        let rot = |x: &dsmoe::Tensor, p: (usize, usize)| apply_rope(x, &table, &[p]).unwrap();
        let a = dot(rot(&q, pi).data(), rot(&k, pj).data());
        let b = dot(
            rot(&q, (pi.0 + t.0, pi.1 + t.1)).data(),
            rot(&k, (pj.0 + t.0, pj.1 + t.1)).data(),
        );
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn three_by_three_logits_are_translation_invariant() {
    assert!(translation_deviation(11, 3, RotaryMode::Axial) < 1e-8);
    // a whole-grid shift moves every flattened index by the same offset
    assert!(translation_deviation(12, 3, RotaryMode::Flat) < 1e-8);
}

#[test]
fn logits_depend_on_grid_displacement() {
    // tokens at every cell of a 4×4 grid; any two pairs with the same
    // (Δrow, Δcol) see the same logit for identical content
    let (heads, hd) = (1, 8);
    let table = RotaryTable::build(RotaryMode::Axial, 4, 4, hd, DEFAULT_ROPE_BASE).unwrap();
    let mut r = rng(3);
    let qv = uniform([hd], -1.0, 1.0, &mut r);
    let kv = uniform([hd], -1.0, 1.0, &mut r);
    let q = dsmoe::Tensor::from_fn([16, heads, hd], |i| qv.data()[i % hd]);
    let k = dsmoe::Tensor::from_fn([16, heads, hd], |i| kv.data()[i % hd]);
    let pos = dsmoe::rope::grid_positions(4, 4);
    let cfg = AttentionConfig::standard(heads, hd, PeMode::Rope2d);
    let l = attention_logits(&q, &k, &cfg, Some(&table), &pos).unwrap();
    let mut by_delta = std::collections::HashMap::new();
    for i in 0..16 {
        for j in 0..16 {
            let delta = (pos[j].0 as i64 - pos[i].0 as i64, pos[j].1 as i64 - pos[i].1 as i64);
            let v = l.get(&[0, i, j]);
            let first = *by_delta.entry(delta).or_insert(v);
            assert!((first - v).abs() < 1e-8);
        }
    }
}

#[test]
fn ape_mode_takes_no_table() {
    let mut r = rng(4);
    let q = uniform([4, 2, 4], -1.0, 1.0, &mut r);
    let k = uniform([4, 2, 4], -1.0, 1.0, &mut r);
    let v = uniform([4, 2, 4], -1.0, 1.0, &mut r);
    let cfg = AttentionConfig::standard(2, 4, PeMode::Ape);
    let table = RotaryTable::build(RotaryMode::Axial, 2, 2, 4, DEFAULT_ROPE_BASE).unwrap();
    let pos = dsmoe::rope::grid_positions(2, 2);
    assert!(attention(&q, &k, &v, &cfg, Some(&table), &pos).is_err());
    // positions are irrelevant without rotation
    let a = attention(&q, &k, &v, &cfg, None, &pos).unwrap();
    let shuffled = [pos[3], pos[0], pos[2], pos[1]];
    assert_eq!(a, attention(&q, &k, &v, &cfg, None, &shuffled).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_preserves_head_norms(seed in any::<u64>(), axial in any::<bool>()) {
        let mode = if axial { RotaryMode::Axial } else { RotaryMode::Flat };
        let table = RotaryTable::build(mode, 3, 5, 8, DEFAULT_ROPE_BASE).unwrap();
        let mut r = rng(seed);
        let x = uniform([15, 3, 8], -2.0, 2.0, &mut r);
        let y = apply_rope(&x, &table, &dsmoe::rope::grid_positions(3, 5)).unwrap();
        for chunk in 0..45 {
            let a: f64 = x.data()[chunk * 8..chunk * 8 + 8].iter().map(|v| v * v).sum();
            let b: f64 = y.data()[chunk * 8..chunk * 8 + 8].iter().map(|v| v * v).sum();
            prop_assert!((a.sqrt() - b.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform([5, 7], -3.0, 3.0, &mut r);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        for row in 0..5 {
            let sum: f64 = g.value(s).row(row).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
