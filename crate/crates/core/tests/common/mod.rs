#![allow(dead_code)]

pub mod reference;
pub mod suite;

use fdiwn_core::{Bound, ModelParams, ParamBuilder, Result, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn random_f32(shape: Shape, seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Build fresh parameters with `f`, returning the module and its tensors.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> Result<M>) -> (M, ModelParams<f32>) {
    let mut params = ModelParams::new();
    let mut r = rng(seed);
    let m = f(&mut ParamBuilder::new(&mut params, &mut r)).unwrap();
    (m, params)
}

/// Move every adaptive scalar off its initial value of one and give every
/// all-zero tensor random content, so no path is switched off.
pub fn jitter(params: &mut ModelParams<f32>, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = params.by_name_mut(&name).unwrap();
        if t.numel() == 1 {
            t.data_mut()[0] = r.gen_range(0.5..1.5);
        } else if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
        }
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub probes: usize,
    pub max_rel: f64,
    pub worst: String,
}

enum Slot {
    Param(usize),
    Input(usize),
}

/// Central-difference check of `d/dθ Σ(f(θ)·R)` for a fixed random `R`,
/// over parameters and inputs alike, at `probes` coordinates whose gradient
/// is not identically zero.
pub fn fd_check(
    params: &ModelParams<f64>,
    inputs: &[Tensor<f64>],
    probes: usize,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
) -> FdReport {
    const H: f64 = 1e-6;
    let weights: std::cell::OnceCell<Tensor<f64>> = std::cell::OnceCell::new();
    let loss = |params: &ModelParams<f64>, inputs: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, grad);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let y = f(&mut tape, &p, &xs).unwrap();
        let r = weights.get_or_init(|| random(tape.shape(y), seed ^ 0xabc)).clone();
        let r = tape.constant(r);
        let prod = tape.mul(y, r).unwrap();
        let l = tape.sum(prod).unwrap();
        let value = tape.value(l).item();
        let grads = grad.then(|| {
            let mut g = tape.backward(l).unwrap();
            let pg: Vec<Tensor<f64>> = p.vars().iter().map(|&v| g.take(v)).collect();
            let ig: Vec<Tensor<f64>> = xs.iter().map(|&v| g.take(v)).collect();
            (pg, ig)
        });
        (value, grads)
    };
    let (_, grads) = loss(params, inputs, true);
    let (pg, ig) = grads.unwrap();

    let mut slots: Vec<Slot> = (0..params.len()).map(Slot::Param).collect();
    slots.extend((0..inputs.len()).map(Slot::Input));
    let mut r = rng(seed);
    let mut report = FdReport { probes: 0, max_rel: 0.0, worst: String::new() };
    let mut attempts = 0;
    while report.probes < probes {
        attempts += 1;
        assert!(attempts < 200 * probes, "too few coordinates with a non-zero gradient");
        let slot = &slots[r.gen_range(0..slots.len())];
        let (numel, analytic, label) = match *slot {
            Slot::Param(i) => {
                let id = params.ids().nth(i).unwrap();
                (pg[i].numel(), &pg[i], params.name(id).to_string())
            }
            Slot::Input(i) => (ig[i].numel(), &ig[i], format!("input{i}")),
        };
        let k = r.gen_range(0..numel);
        let a = analytic.data()[k];
        let eval = |delta: f64| {
            let mut p = params.clone();
            let mut x = inputs.to_vec();
            match *slot {
                Slot::Param(i) => {
                    let id = p.ids().nth(i).unwrap();
                    p.get_mut(id).data_mut()[k] += delta;
                }
                Slot::Input(i) => x[i].data_mut()[k] += delta,
            }
            loss(&p, &x, false).0
        };
        let n = (eval(H) - eval(-H)) / (2.0 * H);
        let scale = a.abs().max(n.abs());
        if scale < 1e-9 {
            continue;
        }
        report.probes += 1;
        let rel = (a - n).abs() / scale;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("{label}[{k}]: tape {a:e}, numeric {n:e}");
        }
    }
    report
}

pub fn assert_fd(report: &FdReport, tol: f64, what: &str) {
    assert!(report.max_rel <= tol, "{what}: relative error {:e} > {tol:e} at {}", report.max_rel, report.worst);
}

/// Direct seven-loop convolution in `f64`.
pub fn naive_conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<f32> {
    let s = x.shape();
    let ws = w.shape();
    let (oc, icg, k) = (ws.n, ws.c, ws.h);
    let ocg = oc / groups;
    let oh = (s.h + 2 * padding - k) / stride + 1;
    let ow = (s.w + 2 * padding - k) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, oc, oh, ow), |n, o, oy, ox| {
        let g = o / ocg;
        let mut acc = bias.map_or(0.0, |b| b.data()[o] as f64);
        for ci in 0..icg {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    let xv = x.at(n, g * icg + ci, iy as usize, ix as usize) as f64;
                    acc += xv * w.at(o, ci, ky, kx) as f64;
                }
            }
        }
        acc as f32
    })
}
