//! Finite-difference oracle shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use mmkdda::tensor::{Graph, Tensor, Var};
use mmkdda::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at 0.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn scalar_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.reshape(g.shape(out))?);
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Largest relative error between tape gradients and central differences of
/// `sum(f(inputs) * R)` for a fixed random projection `R`.
pub fn fd_max_rel_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let weights = rand_tensor(&mut rng, &[g.value(out).numel()]);
    let loss = scalar_loss(&mut g, out, &weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let loss = scalar_loss(&mut g, out, &weights).unwrap();
        g.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Every tape op paired with seeded inputs.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Builder)> = Vec::new();
    cases.push(("add", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))));
    cases.push(("sub", vec![r(&mut rng, &[5]), r(&mut rng, &[5])], Box::new(|g, v| g.sub(v[0], v[1]))));
    cases.push(("mul", vec![r(&mut rng, &[2, 3]), r(&mut rng, &[2, 3])], Box::new(|g, v| g.mul(v[0], v[1]))));
    cases.push(("scale", vec![r(&mut rng, &[4])], Box::new(|g, v| g.scale(v[0], -2.5))));
    cases.push(("add_scalar", vec![r(&mut rng, &[4])], Box::new(|g, v| g.add_scalar(v[0], 0.7))));
    cases.push(("matmul", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))));
    cases.push(("add_bias", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4])], Box::new(|g, v| g.add_bias(v[0], v[1]))));
    cases.push((
        "conv2d_stride1_pad1",
        vec![r(&mut rng, &[2, 2, 5, 5]), r(&mut rng, &[3, 2, 3, 3]), r(&mut rng, &[3])],
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
    ));
    cases.push((
        "conv2d_stride2_pad1",
        vec![r(&mut rng, &[2, 2, 6, 5]), r(&mut rng, &[3, 2, 3, 3]), r(&mut rng, &[3])],
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
    ));
    cases.push((
        "conv2d_stride2_pad0",
        vec![r(&mut rng, &[1, 3, 7, 7]), r(&mut rng, &[2, 3, 2, 2]), r(&mut rng, &[2])],
        Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
    ));
    cases.push(("relu", vec![rand_away_from_zero(&mut rng, &[3, 5])], Box::new(|g, v| g.relu(v[0]))));
    cases.push(("mean_all", vec![r(&mut rng, &[2, 3, 2])], Box::new(|g, v| g.mean_all(v[0]))));
    cases.push(("mean_axes_2_3", vec![r(&mut rng, &[2, 3, 2, 4])], Box::new(|g, v| g.mean(v[0], &[2, 3]))));
    cases.push(("mean_axis_1", vec![r(&mut rng, &[2, 3, 4])], Box::new(|g, v| g.mean(v[0], &[1]))));
    cases.push(("sum_all", vec![r(&mut rng, &[3, 3])], Box::new(|g, v| g.sum_all(v[0]))));
    cases.push(("slice", vec![r(&mut rng, &[2, 5, 3])], Box::new(|g, v| g.slice(v[0], 1, 1, 4))));
    cases.push((
        "concat",
        vec![r(&mut rng, &[2, 2, 3]), r(&mut rng, &[2, 1, 3])],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
    ));
    cases.push(("log_softmax", vec![r(&mut rng, &[3, 4])], Box::new(|g, v| g.log_softmax(v[0]))));
    cases.push(("reshape", vec![r(&mut rng, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))));
    cases.push(("l2_normalize", vec![r(&mut rng, &[3, 2, 4])], Box::new(|g, v| g.l2_normalize(v[0], 1))));
    cases
}

/// Cross-entropy and distillation terms as differentiable cases.
pub fn loss_cases() -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    use mmkdda::distill::{multiscale_kd_loss, KdConfig, TeacherTargets};
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let labels = Tensor::new(vec![3, 4], vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
    let teacher_a = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let teacher_b = rand_tensor(&mut rng, &[2, 2, 2, 2]);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Builder)> = Vec::new();
    cases.push((
        "cross_entropy",
        vec![rand_tensor(&mut rng, &[3, 4])],
        Box::new(move |g, v| mmkdda::loss::cross_entropy_var(g, v[0], &labels)),
    ));
    for normalize in [false, true] {
        let (ta, tb) = (teacher_a.clone(), teacher_b.clone());
        cases.push((
            if normalize { "multiscale_kd_normalized" } else { "multiscale_kd" },
            vec![rand_tensor(&mut rng, &[2, 3, 4, 4]), rand_tensor(&mut rng, &[2, 2, 2, 2])],
            Box::new(move |g, v| {
                let cfg = KdConfig { scales: vec![1, 2], normalize };
                let targets = TeacherTargets::new(&[ta.clone(), tb.clone()], &cfg)?;
                multiscale_kd_loss(g, &[v[0], v[1]], &targets)
            }),
        ));
    }
    cases
}

/// Distillation loss written directly as loops: for every layer, example,
/// scale and region, the squared distance between the row means and column
/// means of the two maps, averaged over examples and layers.
pub fn brute_force_kd(current: &[Tensor], teacher: &[Tensor], scales: &[usize]) -> f64 {
    let mut total = 0.0;
    for (a, b) in current.iter().zip(teacher) {
        let s = a.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let at = |t: &Tensor, i: usize, ch: usize, r: usize, col: usize| t.data()[((i * c + ch) * h + r) * w + col];
        let mut layer = 0.0;
        for i in 0..n {
            for &sc in scales {
                let (rh, rw) = (h / sc, w / sc);
                for gi in 0..sc {
                    for gj in 0..sc {
                        for ch in 0..c {
                            for r in 0..rh {
                                let (mut ma, mut mb) = (0.0, 0.0);
                                for col in 0..rw {
                                    ma += at(a, i, ch, gi * rh + r, gj * rw + col);
                                    mb += at(b, i, ch, gi * rh + r, gj * rw + col);
                                }
                                layer += ((ma - mb) / rw as f64).powi(2);
                            }
                            for col in 0..rw {
                                let (mut ma, mut mb) = (0.0, 0.0);
                                for r in 0..rh {
                                    ma += at(a, i, ch, gi * rh + r, gj * rw + col);
                                    mb += at(b, i, ch, gi * rh + r, gj * rw + col);
                                }
                                layer += ((ma - mb) / rh as f64).powi(2);
                            }
                        }
                    }
                }
            }
        }
        total += layer / n as f64;
    }
    total / current.len() as f64
}

/// Summary metrics read term by term from their definitions, with 1-based
/// task indices: `a[i][j - 1]` is the accuracy on task `j` after task `i`.
pub fn literal_metrics(a: &[Vec<f64>], b_bar: &[f64]) -> [f64; 5] {
    let t = a.len() - 1;
    let tf = t as f64;
    let mut acc = 0.0;
    for i in 1..=t {
        acc += a[t][i - 1];
    }
    acc /= tf;
    let mut la = 0.0;
    for i in 1..=t {
        la += a[i][i - 1];
    }
    la /= tf;
    if t == 1 {
        return [acc, 0.0, 0.0, 0.0, la];
    }
    let mut fm = 0.0;
    for j in 1..t {
        let mut best = f64::NEG_INFINITY;
        for l in 1..t {
            if a[l][j - 1] > best {
                best = a[l][j - 1];
            }
        }
        fm += best - a[t][j - 1];
    }
    let mut bwt = 0.0;
    for i in 1..t {
        bwt += a[t][i - 1] - a[i][i - 1];
    }
    let mut fwt = 0.0;
    for i in 1..t {
        fwt += a[i - 1][i - 1] - b_bar[i - 1];
    }
    [acc, fm / (tf - 1.0), bwt / (tf - 1.0), fwt / (tf - 1.0), la]
}

/// Plain SGD over the task stream with an optional Algorithm-1 style replay
/// buffer kept as simple per-task vectors. Returns the parameters after
/// every mini-batch update.
pub fn replay_oracle(cfg: &mmkdda::harness::ExperimentConfig, capacity: usize) -> Vec<Vec<f64>> {
    use mmkdda::batch::{Batch, BatchRole, ExampleRef};
    use mmkdda::harness::MEMORY_STREAM;
    use mmkdda::network::init_model;

    let stream = cfg.build_stream().unwrap();
    let mut model = init_model(&cfg.arch().unwrap(), cfg.seed).unwrap();
    let mut rng = mmkdda::rng_stream(cfg.seed, MEMORY_STREAM);
    // (task, image, label) per slot, with one write cursor per task.
    let mut buffer: Vec<Vec<(usize, Vec<f64>, Vec<f64>)>> = Vec::new();
    let mut cursors: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for t in 0..stream.num_tasks() {
        buffer.push(Vec::new());
        cursors.push(0);
        for batch in stream.batches(t, cfg.batch) {
            let current = batch.unwrap();
            let input = if capacity == 0 {
                current.clone()
            } else {
                let pool: Vec<&(usize, Vec<f64>, Vec<f64>)> = buffer.iter().flatten().collect();
                let picks = rand::seq::index::sample(&mut rng, pool.len(), cfg.batch.min(pool.len()));
                let mut parts: Vec<ExampleRef> = current.examples().collect();
                parts.extend(picks.iter().map(|i| ExampleRef {
                    image: &pool[i].1,
                    label: &pool[i].2,
                    task: pool[i].0,
                }));
                Batch::from_examples(stream.image_shape(), stream.num_classes(), parts, BatchRole::Joined).unwrap()
            };
            for _ in 0..cfg.inner_steps {
                let mut g = Graph::new();
                let x = g.constant(input.images.clone());
                let out = model.forward_on(&mut g, x, true).unwrap();
                let logp = g.log_softmax(out.logits).unwrap();
                let y = g.constant(input.labels.clone());
                let picked = g.mul(logp, y).unwrap();
                let s = g.sum_all(picked).unwrap();
                let loss = g.scale(s, -1.0 / input.len() as f64).unwrap();
                let grads = g.backward(loss).unwrap();
                let flat = model.flatten_grads(&grads, &out.params).unwrap();
                model = model.sgd_step(&flat, cfg.effective_inner_lr()).unwrap();
            }
            if capacity > 0 {
                for ex in current.examples() {
                    let slot = (t, ex.image.to_vec(), ex.label.to_vec());
                    if buffer[t].len() < capacity {
                        buffer[t].push(slot);
                    } else {
                        buffer[t][cursors[t]] = slot;
                    }
                    cursors[t] = (cursors[t] + 1) % capacity;
                }
            }
            trace.push(model.params.clone());
        }
    }
    trace
}
