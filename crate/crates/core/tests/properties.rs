use proptest::prelude::*;

use partswap::eval::pca3;
use partswap::losses::{mix_many, mix_sources, selector, MixSpec};
use partswap::model::SubspaceLayout;
use partswap::rng::Rng;
use partswap::synthdata::{decode_dataset, encode_dataset, generate, GenParams, Part};

fn layout_strategy() -> impl Strategy<Value = SubspaceLayout> {
    prop::collection::vec(1usize..6, 1..6).prop_map(|d| SubspaceLayout::new(&d).unwrap())
}

fn vec_for(layout: &SubspaceLayout, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..layout.total()).map(|_| rng.normal()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layout_ranges_tile_the_latent(layout in layout_strategy()) {
        let mut next = 0;
        for i in 0..layout.count() {
            let r = layout.range(i);
            prop_assert_eq!(r.start, next);
            for k in r.clone() {
                prop_assert_eq!(layout.owner(k), Some(i));
            }
            next = r.end;
        }
        prop_assert_eq!(next, layout.total());
        prop_assert_eq!(layout.owner(layout.total()), None);
    }

    #[test]
    fn swap_mixing_algebra(layout in layout_strategy(), a in any::<u64>(), b in any::<u64>(), m in 0usize..6) {
        let m = m % layout.count();
        let (s_in, s_t) = (vec_for(&layout, a), vec_for(&layout, b));
        let spec = MixSpec::Swap(m);
        prop_assert_eq!(&mix_sources(&layout, &s_in, &s_in, &spec).unwrap(), &s_in);
        let mixed = mix_sources(&layout, &s_in, &s_t, &spec).unwrap();
        // Swapping the same block back restores the input.
        prop_assert_eq!(&mix_sources(&layout, &mixed, &s_in, &spec).unwrap(), &s_in);
        let d: Vec<f64> = selector(&layout, m);
        for k in 0..layout.total() {
            let expect = s_in[k] * (1.0 - d[k]) + s_t[k] * d[k];
            prop_assert_eq!(mixed[k], expect);
        }
    }

    #[test]
    fn assignment_takes_each_block_from_its_source(layout in layout_strategy(), seed in any::<u64>()) {
        let c = layout.count();
        let sources: Vec<Vec<f64>> = (0..c as u64).map(|j| vec_for(&layout, seed ^ j)).collect();
        let refs: Vec<&[f64]> = sources.iter().map(Vec::as_slice).collect();
        let mut rng = Rng::new(seed);
        let assign: Vec<usize> = (0..c).map(|_| rng.below(c)).collect();
        let mixed = mix_many(&layout, &refs, &MixSpec::Assign(assign.clone())).unwrap();
        for (i, &j) in assign.iter().enumerate() {
            let r = layout.range(i);
            prop_assert_eq!(&mixed[r.clone()], &sources[j][r]);
        }
        let zeros = mix_many(&layout, &refs, &MixSpec::Assign(vec![0; c])).unwrap();
        prop_assert_eq!(&zeros, &sources[0]);
    }

    #[test]
    fn sampling_stays_in_range(seed in any::<u64>(), n in 1usize..200, k in 0usize..200) {
        let mut rng = Rng::new(seed);
        prop_assert!(rng.below(n) < n);
        let k = k.min(n);
        let mut draw = rng.sample_without_replacement(n, k);
        draw.sort_unstable();
        draw.dedup();
        prop_assert_eq!(draw.len(), k);
        prop_assert!(draw.iter().all(|&i| i < n));
    }

    #[test]
    fn pca_eigenvalues_are_ordered(seed in any::<u64>(), n in 4usize..40, dim in 3usize..9) {
        let mut rng = Rng::new(seed);
        let samples: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let p = pca3(&samples).unwrap();
        prop_assert_eq!(p.eigenvalues.len(), 3);
        prop_assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        prop_assert!(p.eigenvalues.iter().all(|&v| v >= -1e-12));
        prop_assert_eq!(p.projected.len(), n);
        // Projected coordinates are centred.
        for a in 0..3 {
            let mean = p.projected.iter().map(|q| q[a]).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_sprites_round_trip(seed in any::<u64>()) {
        let ds = generate(&GenParams { seed, count: 3, ..GenParams::default() }).unwrap();
        let n = ds.height * ds.width;
        for s in &ds.sprites {
            for px in 0..n {
                let total: u32 = (0..Part::ALL.len()).map(|p| s.masks[p * n + px] as u32).sum();
                prop_assert_eq!(total, 255);
            }
        }
        let bytes = encode_dataset(&ds);
        prop_assert_eq!(&decode_dataset(&bytes).unwrap(), &ds);
    }
}
