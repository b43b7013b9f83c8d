#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinectx_core::ops::ConvSpec;
use spinectx_core::{Real, Shape5, Tape, Tensor5, Var};

pub mod checks;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<T: Real>(rng: &mut impl Rng, shape: impl Into<Shape5>, scale: f64) -> Tensor5<T> {
    Tensor5::from_fn(shape, |_| T::from_f64(rng.gen_range(-scale..scale)))
}

/// Values at least `gap` apart from each other and from zero, in random
/// order. Keeps relu and max pooling away from their kinks.
pub fn separated<T: Real>(rng: &mut impl Rng, shape: impl Into<Shape5>, gap: f64) -> Tensor5<T> {
    let shape = shape.into();
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor5::from_vec(shape, vals.into_iter().map(T::from_f64).collect()).unwrap()
}

/// Direct seven-loop dilated correlation in f64.
pub fn naive_conv<T: Real>(x: &Tensor5<T>, w: &Tensor5<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Tensor5<f64> {
    let s = x.shape();
    let [kd, kh, kw] = spec.kernel;
    let [rd, rh, rw] = spec.dilation;
    let [pd, ph, pw] = spec.padding;
    let out_dim = |n: usize, k: usize, r: usize, p: usize| n + 2 * p - (k - 1) * r;
    let (od, oh, ow) = (out_dim(s.d, kd, rd, pd), out_dim(s.h, kh, rh, ph), out_dim(s.w, kw, rw, pw));
    let co = spec.out_channels;
    let mut out = Tensor5::<f64>::zeros(Shape5::new(s.n, co, od, oh, ow));
    for n in 0..s.n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[o].to_f64());
                        for c in 0..s.c {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z + a * rd) as isize - pd as isize;
                                        let iy = (y + b * rh) as isize - ph as isize;
                                        let ix = (xx + e * rw) as isize - pw as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= s.d || iy >= s.h || ix >= s.w {
                                            continue;
                                        }
                                        acc += x.at(n, c, iz, iy, ix).to_f64() * w.at(o, c, a, b, e).to_f64();
                                    }
                                }
                            }
                        }
                        let i = out.index(n, o, z, y, xx);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
    }
    out
}

/// `max |a - b| / max |b|`, the inf-norm relative error of `a` against `b`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Builds `op` on fresh leaves holding `inputs` and returns the scalar
/// `<op(inputs), probe>`, with the gradient of every input if requested.
fn probe_loss<T: Real>(
    inputs: &[Tensor5<T>],
    probe: Option<&Tensor5<T>>,
    op: &dyn Fn(&mut Tape<'_, T>, &[Var]) -> Var,
    grads: bool,
    probe_seed: u64,
) -> (f64, Tensor5<T>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let probe = match probe {
        Some(p) => p.clone(),
        None => random(&mut rng(probe_seed), tape.shape(out), 1.0),
    };
    let l = tape.value(out).dot(&probe);
    let mut g = Vec::new();
    if grads {
        let gr = tape.backward(out, probe.clone(), &[]).unwrap();
        g = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| match gr.get(*v) {
                Some(x) => x.data().iter().map(|v| v.to_f64()).collect(),
                None => vec![0.0; t.numel()],
            })
            .collect();
    }
    (l, probe, g)
}

/// Central finite differences of `<op(inputs), probe>` against the tape's
/// gradients for every element of every input. Returns the worst relative
/// error over inputs.
pub fn fd_check<T: Real>(
    inputs: &[Tensor5<T>],
    op: &dyn Fn(&mut Tape<'_, T>, &[Var]) -> Var,
    h: f64,
    probe_seed: u64,
) -> f64 {
    let (_, probe, analytic) = probe_loss(inputs, None, op, true, probe_seed);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let x = t.data()[j].to_f64();
            let (xp, xm) = (T::from_f64(x + h), T::from_f64(x - h));
            let eval = |v: T| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] = v;
                probe_loss(&moved, Some(&probe), op, false, probe_seed).0
            };
            numeric.push((eval(xp) - eval(xm)) / (xp.to_f64() - xm.to_f64()));
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}
