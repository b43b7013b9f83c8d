mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinectx_core::loss::{composite_loss, LossInputs};
use spinectx_core::metrics::confusion;
use spinectx_core::network::{ModelConfig, Network, ParamStore};
use spinectx_core::pipeline::io::{read_raw, write_raw};
use spinectx_core::pipeline::{plan_windows, read_mask, reconstruct, write_volume, Volume, VolumeKind};
use spinectx_core::train::{generate_phantom, Adam, PatchSampler, PhantomSpec, PlateauScheduler, TrainCase};
use spinectx_core::{Shape5, Tensor5};

fn mask_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1usize..300, 0.0f64..1.0, 0.0f64..1.0, any::<u64>()).prop_map(|(n, pa, pb, seed)| {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..n).map(|_| g.gen_bool(pa) as u8 as f32).collect();
        let b = (0..n).map(|_| g.gen_bool(pb) as u8 as f32).collect();
        (a, b)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_equals_f1_and_iou_follows((pred, truth) in mask_pair()) {
        let m = confusion(&pred, &truth).unwrap();
        prop_assert!((m.dice - m.f1).abs() <= 1e-12);
        prop_assert!((m.iou - m.dice / (2.0 - m.dice)).abs() <= 1e-12);
        prop_assert_eq!(m.counts.total(), pred.len() as u64);
    }

    #[test]
    fn moving_a_probability_toward_its_label_never_raises_the_loss(
        seed in any::<u64>(),
        n in 1usize..64,
        step in 0.0f64..1.0,
    ) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..n).map(|_| g.gen_range(0.0..=1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| g.gen_bool(0.4) as u8 as f64).collect();
        let j = g.gen_range(0..n);
        let mut q = p.clone();
        q[j] += step * (y[j] - p[j]);
        let before = composite_loss(&LossInputs::new(&p, &y).unwrap()).loss;
        let after = composite_loss(&LossInputs::new(&q, &y).unwrap()).loss;
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn windows_cover_every_voxel(d in 1usize..=24, h in 1usize..=48, w in 1usize..=24) {
        let patch = [8, 16, 8];
        let plan = plan_windows([d, h, w], patch).unwrap();
        let pd = plan.padded_dims;
        prop_assert!((0..3).all(|a| pd[a] >= patch[a] && pd[a] >= [d, h, w][a]));
        let mut hits = vec![0u32; pd.iter().product()];
        for s in &plan.starts {
            prop_assert!((0..3).all(|a| s[a] + patch[a] <= pd[a]));
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    for x in 0..patch[2] {
                        hits[((s[0] + z) * pd[1] + s[1] + y) * pd[2] + s[2] + x] += 1;
                    }
                }
            }
        }
        prop_assert!(hits.iter().all(|&c| c > 0));
    }

    #[test]
    fn lr_only_ever_drops_by_exactly_a_tenth(losses in prop::collection::vec(0.0f64..2.0, 1..60)) {
        let mut s = PlateauScheduler::default();
        let mut lr = 1e-3;
        for l in losses {
            let before = lr;
            let changed = s.step(l, &mut lr).unwrap();
            if changed {
                prop_assert_eq!(lr.to_bits(), (before * 0.1).to_bits());
            } else {
                prop_assert_eq!(lr.to_bits(), before.to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn constant_patches_reconstruct_exactly(d in 1usize..=30, h in 1usize..=50, w in 1usize..=40, c in 0.0f32..=1.0) {
        let patch = [8, 16, 16];
        let plan = plan_windows([d, h, w], patch).unwrap();
        let out = reconstruct(&plan, 3, |_| Ok(Tensor5::full(Shape5::new(1, 1, 8, 16, 16), c))).unwrap();
        prop_assert!(out.iter().all(|&v| (v - c).abs() <= 1e-6));
    }

    #[test]
    fn reconstruction_is_linear_in_the_predictions(d in 1usize..=24, h in 1usize..=40, w in 1usize..=24, a in 0.0f64..=1.0, seed in any::<u64>()) {
        let patch = [8, 16, 16];
        let plan = plan_windows([d, h, w], patch).unwrap();
        let field = |k: u64| {
            move |i: usize| -> spinectx_core::Result<Tensor5<f32>> {
                let mut g = ChaCha8Rng::seed_from_u64(seed ^ k ^ ((i as u64) << 8));
                Ok(Tensor5::from_fn(Shape5::new(1, 1, 8, 16, 16), |_| g.gen_range(0.0..=1.0f32)))
            }
        };
        let (f, g) = (field(1), field(2));
        let rf = reconstruct(&plan, 2, &f).unwrap();
        let rg = reconstruct(&plan, 2, &g).unwrap();
        let mixed = reconstruct(&plan, 2, |i| {
            let (x, y) = (f(i)?, g(i)?);
            Ok(Tensor5::from_fn(x.shape(), |j| (a * x.data()[j] as f64 + (1.0 - a) * y.data()[j] as f64) as f32))
        })
        .unwrap();
        for ((m, x), y) in mixed.iter().zip(&rf).zip(&rg) {
            prop_assert!((*m as f64 - (a * *x as f64 + (1.0 - a) * *y as f64)).abs() <= 1e-6);
        }
    }
}

#[test]
fn overlaps_match_per_voxel_oracle() {
    for seed in 0..5 {
        let err = common::checks::overlap_oracle_error(seed);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

fn dilate(mask: &[f32], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[(z * h + y) * w + x] == 0.0 {
                    continue;
                }
                for zz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            out[(zz * h + yy) * w + xx] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn phantom_invariants_hold_for_random_specs() {
    let mut g = common::rng(99);
    for _ in 0..100 {
        let spec = PhantomSpec::random(&mut g);
        let p = generate_phantom(&spec).unwrap();
        let again = generate_phantom(&spec).unwrap();
        assert_eq!(p.volume, again.volume);
        assert_eq!(p.mask, again.mask);
        assert_eq!(p.volume.dims(), spec.dims);
        assert!(p.mask.data().iter().any(|&m| m == 1.0));
        assert!(p.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));

        // Without noise the distractors are the only difference between a
        // phantom and its bare counterpart, and they stay off the mask.
        let quiet = PhantomSpec { noise_sigma: 0.0, ..spec.clone() };
        let bare = PhantomSpec { ribs: false, pelvis: false, ..quiet.clone() };
        let (full, plain) = (generate_phantom(&quiet).unwrap(), generate_phantom(&bare).unwrap());
        assert_eq!(full.mask, p.mask);
        assert_eq!(plain.mask, p.mask);
        let near = dilate(p.mask.data(), spec.dims);
        for (i, (a, b)) in full.volume.data().iter().zip(plain.volume.data()).enumerate() {
            if a != b {
                assert!(!near[i], "distractor touches the mask at {i}");
            }
            if *b > 300.0 {
                assert!(near[i], "bright voxel {i} away from the column without distractors");
            }
        }
    }
}

#[test]
fn biased_sampler_finds_foreground() {
    let p = generate_phantom(&PhantomSpec::default().with_seed(5)).unwrap();
    let patch = [32, 32, 32];
    let case = TrainCase::new(&p.volume, &p.mask, patch).unwrap();
    let mut s = PatchSampler::new(patch, 0.5, 17);
    let hits = (0..1000)
        .filter(|_| case.mask.block(s.start(&case), patch).data().iter().any(|&m| m != 0.0))
        .count();
    assert!(hits >= 400, "{hits}/1000 patches hold foreground");
}

#[test]
fn adam_with_zero_gradients_keeps_parameters() {
    let net = Network::new(ModelConfig::tiny()).unwrap();
    let mut params: ParamStore<f32> = net.init_params(3);
    let before = params.clone();
    let grads: Vec<(String, Tensor5<f32>)> = params
        .trainable()
        .map(|(k, t)| (k.to_string(), Tensor5::zeros(t.shape())))
        .collect();
    let mut adam = Adam::new(&params, 1e-3);
    for _ in 0..3 {
        adam.step(&mut params, &grads).unwrap();
    }
    for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn raw_volumes_round_trip_bit_exactly(
        d in 1usize..6, h in 1usize..6, w in 1usize..6,
        bits in prop::collection::vec(any::<u32>(), 216),
        sp in prop::array::uniform3(0.1f64..4.0),
    ) {
        let n = d * h * w;
        let data: Vec<f32> = bits[..n].iter().map(|&b| {
            let v = f32::from_bits(b);
            if v.is_finite() { v } else { 0.5 }
        }).collect();
        let mut v = Volume::new([d, h, w], sp, data, VolumeKind::Intensity).unwrap();
        v.origin = [sp[0] * 3.0, -1.5, 7.25];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        write_raw(&path, &v).unwrap();
        let back = read_raw(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing, v.spacing);
        prop_assert_eq!(back.origin, v.origin);
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn nifti_masks_round_trip_voxel_exactly(
        d in 1usize..8, h in 1usize..8, w in 1usize..8, seed in any::<u64>(), gz in any::<bool>(),
    ) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..d * h * w).map(|_| g.gen_bool(0.3) as u8 as f32).collect();
        let v = Volume::new([d, h, w], [0.8, 1.0, 1.25], data, VolumeKind::BinaryMask).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "m.nii.gz" } else { "m.nii" });
        write_volume(&path, &v).unwrap();
        let back = read_mask(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.data(), v.data());
        prop_assert!(back.spacing.iter().zip(&v.spacing).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
