use rand::Rng;
use spinectx_core::loss::{LossInputs, LossValue};
use spinectx_core::network::{ModelConfig, Network, ParamStore};
use spinectx_core::ops::{self, kernel_extent, ConvSpec, Mode};
use spinectx_core::pipeline::{plan_windows, reconstruct};
use spinectx_core::train::loss_and_grads;
use spinectx_core::{Real, Shape5, Tape, Tensor5, Var};

use super::{fd_check, naive_conv, random, rel_err, rng, separated};

/// Random instances per primitive in the gradient suite.
pub const INSTANCES: u64 = 20;

/// Relative error of the fast conv against `naive_conv` on a random
/// problem with kernel `k` and dilation `r`.
pub fn conv_oracle_error(k: usize, r: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let (cin, cout) = (g.gen_range(1..=3), g.gen_range(1..=3));
    // Large enough that every tap lands inside for some output voxel.
    let span = kernel_extent(k, r);
    let dims = [span.min(9) + g.gen_range(0..3), g.gen_range(3..7), span + g.gen_range(0..2)];
    let spec = ConvSpec::same(cin, cout, k, r, g.gen_bool(0.5));
    let x: Tensor5<f32> = random(&mut g, Shape5::new(2, cin, dims[0], dims[1], dims[2]), 1.0);
    let w: Tensor5<f32> = random(&mut g, spec.weight_shape(), 1.0);
    let b: Vec<f32> = (0..cout).map(|_| g.gen_range(-1.0..1.0)).collect();
    let bias = spec.has_bias.then_some(b.as_slice());
    let fast = ops::conv3d_forward(&x, &w, bias, &spec).unwrap();
    let slow = naive_conv(&x, &w, bias, &spec);
    assert_eq!(fast.shape(), slow.shape());
    let fast: Vec<f64> = fast.data().iter().map(|&v| v as f64).collect();
    rel_err(&fast, slow.data())
}

fn affine<T: Real>(g: &mut impl Rng, c: usize) -> [Tensor5<T>; 2] {
    let gamma = Tensor5::from_fn(Shape5::new(1, c, 1, 1, 1), |_| T::from_f64(g.gen_range(0.5..1.5)));
    [gamma, random(g, Shape5::new(1, c, 1, 1, 1), 0.5)]
}

/// Runs every primitive through the finite-difference check and returns
/// the worst error per primitive.
pub fn primitive_errors<T: Real>(h: f64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut worst = |name: &'static str, f: &mut dyn FnMut(u64) -> f64| {
        let e = (0..INSTANCES).map(f).fold(0.0, f64::max);
        out.push((name, e));
    };

    worst("conv", &mut |i| {
        let mut g = rng(1000 + i);
        let k = if g.gen_bool(0.25) { 1 } else { 3 };
        let r = g.gen_range(1..=3);
        let spec = ConvSpec::same(g.gen_range(1..=2), g.gen_range(1..=2), k, r, g.gen_bool(0.5));
        let x: Tensor5<T> = random(&mut g, Shape5::new(2, spec.in_channels, 4, 3, 5), 1.0);
        let w: Tensor5<T> = random(&mut g, spec.weight_shape(), 1.0);
        let mut inputs = vec![x, w];
        if spec.has_bias {
            inputs.push(random(&mut g, Shape5::new(1, spec.out_channels, 1, 1, 1), 1.0));
        }
        fd_check(
            &inputs,
            &|t: &mut Tape<'_, T>, v: &[Var]| t.conv(v[0], v[1], v.get(2).copied(), spec).unwrap(),
            h,
            i,
        )
    });

    worst("batchnorm_train", &mut |i| {
        let mut g = rng(2000 + i);
        let c = g.gen_range(1..=3);
        let x: Tensor5<T> = random(&mut g, Shape5::new(2, c, 2, 3, 2), 1.0);
        let [gamma, beta] = affine(&mut g, c);
        fd_check(
            &[x, gamma, beta],
            &|t: &mut Tape<'_, T>, v: &[Var]| t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
            h,
            i,
        )
    });

    worst("batchnorm_infer", &mut |i| {
        let mut g = rng(3000 + i);
        let c = g.gen_range(1..=3);
        let x: Tensor5<T> = random(&mut g, Shape5::new(2, c, 2, 2, 3), 1.0);
        let [gamma, beta] = affine(&mut g, c);
        let mean: Vec<T> = (0..c).map(|_| T::from_f64(g.gen_range(-0.5..0.5))).collect();
        let var: Vec<T> = (0..c).map(|_| T::from_f64(g.gen_range(0.5..2.0))).collect();
        fd_check(
            &[x, gamma, beta],
            &|t: &mut Tape<'_, T>, v: &[Var]| t.batchnorm_infer(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap(),
            h,
            i,
        )
    });

    worst("relu", &mut |i| {
        let mut g = rng(4000 + i);
        let x: Tensor5<T> = separated(&mut g, Shape5::new(2, 2, 2, 3, 3), 0.05);
        fd_check(&[x], &|t: &mut Tape<'_, T>, v: &[Var]| t.relu(v[0]), h, i)
    });

    worst("maxpool", &mut |i| {
        let mut g = rng(5000 + i);
        let x: Tensor5<T> = separated(&mut g, Shape5::new(1, 2, 4, 2, 4), 0.05);
        fd_check(&[x], &|t: &mut Tape<'_, T>, v: &[Var]| t.maxpool(v[0]).unwrap(), h, i)
    });

    worst("upsample", &mut |i| {
        let mut g = rng(6000 + i);
        let dims = [g.gen_range(1..4), g.gen_range(1..4), g.gen_range(1..4)];
        let x: Tensor5<T> = random(&mut g, Shape5::new(1, 2, dims[0], dims[1], dims[2]), 1.0);
        fd_check(&[x], &|t: &mut Tape<'_, T>, v: &[Var]| t.upsample(v[0]), h, i)
    });

    worst("concat", &mut |i| {
        let mut g = rng(7000 + i);
        let (ca, cb) = (g.gen_range(1..3), g.gen_range(1..3));
        let a: Tensor5<T> = random(&mut g, Shape5::new(2, ca, 2, 2, 2), 1.0);
        let b: Tensor5<T> = random(&mut g, Shape5::new(2, cb, 2, 2, 2), 1.0);
        fd_check(&[a, b], &|t: &mut Tape<'_, T>, v: &[Var]| t.concat(v).unwrap(), h, i)
    });

    worst("add", &mut |i| {
        let mut g = rng(8000 + i);
        let a: Tensor5<T> = random(&mut g, Shape5::new(2, 2, 2, 3, 2), 1.0);
        let b: Tensor5<T> = random(&mut g, Shape5::new(2, 2, 2, 3, 2), 1.0);
        // Feeding one input twice exercises gradient accumulation.
        fd_check(
            &[a, b],
            &|t: &mut Tape<'_, T>, v: &[Var]| {
                let s = t.add(v[0], v[1]).unwrap();
                t.add(s, v[0]).unwrap()
            },
            h,
            i,
        )
    });

    out
}

/// Worst relative error of a loss gradient against central differences.
pub fn loss_fd(f: fn(&LossInputs<'_, f64>) -> LossValue<f64>, seed: u64) -> f64 {
    let mut g = rng(seed);
    let n = g.gen_range(4..40);
    let p: Vec<f64> = (0..n).map(|_| g.gen_range(0.05..0.95)).collect();
    // With no foreground the Dice gradient is of order the smoothing term
    // and drowns in rounding.
    let y: Vec<f64> = (0..n).map(|j| (j == 0 || g.gen_bool(0.3)) as u8 as f64).collect();
    let analytic = f(&LossInputs::new(&p, &y).unwrap()).grad;
    let h = 1e-6;
    let numeric: Vec<f64> = (0..n)
        .map(|j| {
            let at = |d: f64| {
                let mut q = p.clone();
                q[j] += d;
                f(&LossInputs::new(&q, &y).unwrap()).loss
            };
            (at(h) - at(-h)) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

/// Analytic gradients of the composite loss in `T` against central
/// differences for 30 randomly chosen scalar parameters of the tiny network.
///
/// The differences are always taken in f64 on the same parameters and
/// input. A step small enough to stay clear of relu and max-pool kinks
/// leaves f32 differences dominated by rounding.
pub fn network_error<T: Real>(h: f64) -> f64 {
    let net = Network::new(ModelConfig::tiny()).unwrap();
    let params: ParamStore<T> = net.init_params(5);
    let mut exact: ParamStore<f64> = net.init_params(5);
    for (name, e) in params.iter() {
        let dst = exact.get_mut(name).unwrap().data_mut();
        for (d, v) in dst.iter_mut().zip(e.tensor.data()) {
            *d = v.to_f64();
        }
    }
    let mut g = rng(77);
    let [d, hh, w] = net.config().patch_shape;
    let x64: Tensor5<f64> = random(&mut g, Shape5::new(2, 1, d, hh, w), 1.0);
    let x64 = x64.map(|v| T::from_f64(v).to_f64());
    let y64 = Tensor5::from_fn(x64.shape(), |_| g.gen_bool(0.3) as u8 as f64);
    let x = Tensor5::from_fn(x64.shape(), |i| T::from_f64(x64.data()[i]));
    let y = Tensor5::from_fn(y64.shape(), |i| T::from_f64(y64.data()[i]));
    let base = loss_and_grads(&net, &params, &x, &y, Mode::Train, 1e-5).unwrap();
    let names: Vec<String> = params.trainable().map(|(k, _)| k.to_string()).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..30 {
        let name = &names[g.gen_range(0..names.len())];
        let j = g.gen_range(0..params.get(name).unwrap().numel());
        let grad = &base.grads.iter().find(|(k, _)| k == name).unwrap().1;
        analytic.push(grad.data()[j].to_f64());
        let orig = exact.get(name).unwrap().data()[j];
        let mut at = |v: f64| {
            exact.get_mut(name).unwrap().data_mut()[j] = v;
            loss_and_grads(&net, &exact, &x64, &y64, Mode::Train, 1e-5).unwrap().loss
        };
        let (lp, lm) = (at(orig + h), at(orig - h));
        at(orig);
        numeric.push((lp - lm) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

/// Worst gap between `reconstruct` and a per-voxel weighted mean over every
/// covering window, on a random volume whose windows alternate low and high.
pub fn overlap_oracle_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let dims = [g.gen_range(9..24), g.gen_range(17..40), g.gen_range(9..30)];
    let patch = [8, 16, 8];
    let plan = plan_windows(dims, patch).unwrap();
    let preds: Vec<Tensor5<f32>> = (0..plan.len())
        .map(|i| {
            let base = if i % 2 == 0 { 0.2 } else { 0.8 };
            Tensor5::from_fn(Shape5::new(1, 1, 8, 16, 8), |_| base + g.gen_range(-0.1..0.1f32))
        })
        .collect();
    let out = reconstruct(&plan, 4, |i| Ok(preds[i].clone())).unwrap();
    let pd = plan.padded_dims;
    let wt = plan.weights.data();
    let mut worst: f64 = 0.0;
    for z in 0..pd[0] {
        for y in 0..pd[1] {
            for x in 0..pd[2] {
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for (k, s) in plan.starts.iter().enumerate() {
                    let (lz, ly, lx) = (z as isize - s[0] as isize, y as isize - s[1] as isize, x as isize - s[2] as isize);
                    if lz < 0 || ly < 0 || lx < 0 || lz >= 8 || ly >= 16 || lx >= 8 {
                        continue;
                    }
                    let j = ((lz as usize) * 16 + ly as usize) * 8 + lx as usize;
                    num += preds[k].data()[j] as f64 * wt[j] as f64;
                    den += wt[j] as f64;
                }
                let got = out[(z * pd[1] + y) * pd[2] + x] as f64;
                worst = worst.max((got - num / den).abs());
            }
        }
    }
    worst
}
