use proptest::prelude::*;

use locstyle::features::FeatureMap;
use locstyle::hash_encoding::{hash_index, HashGridConfig};
use locstyle::region_matching::{
    apply_custom_matching, parse_matching_json, solve_injective, solve_surjective, CostMatrix,
};
use locstyle::segmentation::{filter_style_regions, Mask};
use locstyle::style_losses::nnfm_loss;
use locstyle::volume_renderer::{softmax, weights, Camera};

fn cost_rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(0.0..1.0f64, c), r))
}

fn features(h: usize, w: usize, d: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-1.0f32..1.0, h * w * d).prop_map(move |v| FeatureMap::new(h, w, d, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injective_uses_distinct_styles(rows in cost_rows(6, 8)) {
        prop_assume!(rows.len() <= rows[0].len());
        let m = solve_injective(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        let styles: std::collections::BTreeSet<_> = m.pairs().values().collect();
        prop_assert_eq!(m.pairs().len(), rows.len());
        prop_assert_eq!(styles.len(), rows.len());
        // never worse than the identity-order assignment
        let naive: f64 = (0..rows.len()).map(|i| rows[i][i]).sum();
        prop_assert!(m.total_cost.unwrap() <= naive + 1e-12);
    }

    #[test]
    fn surjective_covers_every_style(rows in cost_rows(9, 5)) {
        prop_assume!(rows.len() >= rows[0].len());
        let m = solve_surjective(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        prop_assert_eq!(m.pairs().len(), rows.len());
        let styles: std::collections::BTreeSet<_> = m.pairs().values().copied().collect();
        prop_assert_eq!(styles, (0..rows[0].len()).collect());
    }

    #[test]
    fn matching_json_round_trips(rows in cost_rows(5, 7)) {
        prop_assume!(rows.len() <= rows[0].len());
        let m = solve_injective(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        let back = apply_custom_matching(&parse_matching_json(&m.to_json()).unwrap(), m.scene_regions, m.style_regions).unwrap();
        prop_assert_eq!(back.pairs(), m.pairs());
    }

    #[test]
    fn nnfm_is_bounded_and_scale_invariant(fy in features(3, 3, 5), fs in features(2, 4, 5), k in 0.1f32..10.0) {
        let l = nnfm_loss(&fy, &fs).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        let scale = |f: &FeatureMap| FeatureMap::new(f.h, f.w, f.d, f.data.iter().map(|v| v * k).collect()).unwrap();
        prop_assert!((nnfm_loss(&scale(&fy), &scale(&fs)).unwrap() - l).abs() < 1e-5);
    }

    #[test]
    fn weights_stay_in_the_unit_interval(
        sigma in prop::collection::vec(0.0f32..50.0, 1..64),
        delta in prop::collection::vec(1e-4f32..0.5, 64),
    ) {
        let w = weights(&sigma, &delta[..sigma.len()]);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let total: f32 = w.iter().sum();
        prop_assert!((0.0..=1.0 + 1e-5).contains(&total));
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-30.0f32..30.0, 1..12)) {
        let p = softmax(&z);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn hash_slots_stay_in_the_table(v in prop::array::uniform3(0u32..100_000), style in 0u32..4, log_t in 4u32..20) {
        let c = HashGridConfig { table_size: 1 << log_t, num_styles: 4, ..Default::default() };
        prop_assert!(hash_index(v, style, &c).unwrap() < c.table_size);
    }

    #[test]
    fn projection_inverts_pixel_rays(x in 0usize..40, y in 0usize..30, t in 0.0f32..1.0) {
        let cam = Camera::look_at([0.5, 1.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 40, 30, 35.0, 1.0, 8.0);
        let r = cam.ray(x, y);
        let ([u, v], _) = cam.project(r.at(r.t_near + t * (r.t_far - r.t_near))).unwrap();
        prop_assert!((u - x as f32).abs() < 1e-3 && (v - y as f32).abs() < 1e-3);
    }

    #[test]
    fn filtered_regions_are_disjoint_and_large(
        rects in prop::collection::vec((0usize..40, 0usize..30, 1usize..40, 1usize..30), 1..8),
    ) {
        let (w, h) = (40, 30);
        let mut masks: Vec<Mask> = rects
            .iter()
            .map(|&(x, y, rw, rh)| Mask::from_fn(w, h, |px, py| px >= x && px < x + rw && py >= y && py < y + rh))
            .collect();
        masks.sort_by_key(|m| std::cmp::Reverse(m.area()));
        let (lt, lm) = (0.05, 0.004);
        let out = filter_style_regions(&masks, lt, lm).unwrap();
        for (r, mask) in out.masks.iter().enumerate() {
            prop_assert!(out.region_map.labels.iter().zip(&mask.pixels).all(|(l, p)| *l != r as i32 || *p));
            prop_assert!(out.areas[r] as f64 >= lm * (1.0 - lt) * (w * h) as f64);
        }
        prop_assert_eq!(out.areas.len(), out.region_map.count);
    }
}
