//! Finite-difference checks of every tape op in 64-bit precision.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce an output to a scalar with fixed random weights.
fn weighted_sum(tape: &Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Worst relative error and number of checks per case.
type Acc = BTreeMap<&'static str, (usize, f64)>;

/// Compare analytic and numeric gradients for every input of `build`.
fn check(acc: &mut Acc, inputs: &[Tensor<f64>], build: &dyn Fn(&Tape<f64>, &[Var]) -> Var, what: &'static str) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    for (i, input) in inputs.iter().enumerate() {
        let f = |probe: &Tensor<f64>| {
            let t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }, true))
                .collect();
            let l = build(&t, &vs);
            let v = t.value(l).item();
            v
        };
        let numeric = numeric_gradient(f, input, STEP);
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zeros);
        let err = relative_error(analytic.data(), numeric.data());
        let e = acc.entry(what).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(err);
    }
}

fn conv1d_gradients(acc: &mut Acc, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(1..=5);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let t = k + rng.random_range(0..=8);
        let x = rand_tensor(&mut rng, &[b, cin, t]);
        let w = rand_tensor(&mut rng, &[cout, cin, k]);
        let bias = rand_tensor(&mut rng, &[cout]);
        let tout = (t + 2 * pad - k) / stride + 1;
        let r = rand_tensor(&mut rng, &[b, cout, tout]);
        check(
            acc,
            &[x, w, bias],
            &|tape, v| {
                let y = tape.conv1d(v[0], v[1], v[2], stride, pad).unwrap();
                weighted_sum(tape, y, &r)
            },
            "conv1d",
        );
    }
}

fn dense_relu_gradients(acc: &mut Acc, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (b, din, dout) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
        let x = rand_tensor(&mut rng, &[b, din]);
        let w = rand_tensor(&mut rng, &[dout, din]);
        let bias = rand_tensor(&mut rng, &[dout]);
        let r = rand_tensor(&mut rng, &[b, dout]);
        check(
            acc,
            &[x, w, bias],
            &|tape, v| {
                let y = tape.dense(v[0], v[1], v[2]).unwrap();
                weighted_sum(tape, y, &r)
            },
            "dense",
        );
        let a = away_from_zero(&mut rng, &[b, din]);
        let r = rand_tensor(&mut rng, &[b, din]);
        check(
            acc,
            &[a],
            &|tape, v| {
                let y = tape.relu(v[0]).unwrap();
                weighted_sum(tape, y, &r)
            },
            "relu",
        );
    }
}

fn shape_op_gradients(acc: &mut Acc, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (b, ca, cb, t) = (
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=6),
        );
        let x = rand_tensor(&mut rng, &[b, ca, t]);
        let r = rand_tensor(&mut rng, &[b, ca]);
        check(
            acc,
            &[x],
            &|tape, v| {
                let y = tape.global_avg_pool(v[0]).unwrap();
                weighted_sum(tape, y, &r)
            },
            "global_avg_pool",
        );
        let p = rand_tensor(&mut rng, &[b, ca, t]);
        let q = rand_tensor(&mut rng, &[b, cb, t]);
        let r = rand_tensor(&mut rng, &[b, ca + cb, t]);
        check(
            acc,
            &[p, q],
            &|tape, v| {
                let y = tape.concat(v[0], v[1]).unwrap();
                weighted_sum(tape, y, &r)
            },
            "concat",
        );
        let h = rand_tensor(&mut rng, &[b, ca]);
        let r = rand_tensor(&mut rng, &[b, ca, t]);
        check(
            acc,
            &[h],
            &|tape, v| {
                let y = tape.broadcast_over_time(v[0], t).unwrap();
                weighted_sum(tape, y, &r)
            },
            "broadcast_over_time",
        );
        let z = rand_tensor(&mut rng, &[b, ca + 1]);
        let r = rand_tensor(&mut rng, &[b, ca + 1]);
        check(
            acc,
            &[z],
            &|tape, v| {
                let y = tape.l2_normalize(v[0]).unwrap();
                weighted_sum(tape, y, &r)
            },
            "l2_normalize",
        );
    }
}

fn elementwise_gradients(acc: &mut Acc, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
        let a = rand_tensor(&mut rng, &shape);
        let b = rand_tensor(&mut rng, &shape);
        let r = rand_tensor(&mut rng, &shape);
        let c = rng.random_range(-2.0..2.0);
        check(
            acc,
            &[a, b],
            &|tape, v| {
                let s = tape.add(v[0], v[1]).unwrap();
                let d = tape.sub(s, v[1]).unwrap();
                let m = tape.mul(d, v[1]).unwrap();
                let sc = tape.scale(m, c).unwrap();
                let w = weighted_sum(tape, sc, &r);
                let mean = tape.mean(v[0]).unwrap();
                tape.add(w, mean).unwrap()
            },
            "add/sub/mul/scale/sum/mean",
        );
    }
}

fn labels_to_mask(labels: &[usize]) -> Vec<bool> {
    let b = labels.len();
    (0..b * b).map(|k| labels[k / b] == labels[k % b]).collect()
}

fn supcon_gradients(acc: &mut Acc, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let b = rng.random_range(2..=6);
        let d = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let mut labels = labels;
        labels[1] = labels[0];
        let mask = labels_to_mask(&labels);
        let z = rand_tensor(&mut rng, &[b, d]);
        check(
            acc,
            &[z],
            &|tape, v| {
                let zn = tape.l2_normalize(v[0]).unwrap();
                tape.supcon(zn, &mask, 0.07).unwrap()
            },
            "supcon",
        );
    }
}

fn recon_loss_gradients(acc: &mut Acc, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let shape = [rng.random_range(1..=3), 1, rng.random_range(2..=8)];
        let pred = rand_tensor(&mut rng, &shape);
        let offset = away_from_zero(&mut rng, &shape);
        let target = Tensor::new(
            shape.to_vec(),
            pred.data().iter().zip(offset.data()).map(|(p, o)| p + o).collect(),
        )
        .unwrap();
        check(acc, &[pred], &|tape, v| tape.recon_loss(v[0], &target, 1.0).unwrap(), "recon");
    }
}

fn composite_network_gradients(acc: &mut Acc, seeds: u64) {
    // conv → relu → concat with a broadcast dense branch → conv → pool → dense
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (b, t) = (2, 9);
        let x = rand_tensor(&mut rng, &[b, 2, t]);
        let w1 = rand_tensor(&mut rng, &[3, 2, 3]);
        let b1 = rand_tensor(&mut rng, &[3]);
        let h = rand_tensor(&mut rng, &[b, 4]);
        let wd = rand_tensor(&mut rng, &[2, 4]);
        let bd = rand_tensor(&mut rng, &[2]);
        let w2 = rand_tensor(&mut rng, &[1, 5, 1]);
        let b2 = rand_tensor(&mut rng, &[1]);
        let target = rand_tensor(&mut rng, &[b, 1, t]);
        let build = |tape: &Tape<f64>, v: &[Var]| {
            let c1 = tape.conv1d(v[0], v[1], v[2], 1, 1).unwrap();
            let hp = tape.dense(v[3], v[4], v[5]).unwrap();
            let hb = tape.broadcast_over_time(hp, t).unwrap();
            let cat = tape.concat(c1, hb).unwrap();
            let y = tape.conv1d(cat, v[6], v[7], 1, 0).unwrap();
            // MSE only: the MAE kink is covered by recon_loss_gradients
            tape.recon_loss(y, &target, 0.0).unwrap()
        };
        check(acc, &[x, w1, b1, h, wd, bd, w2, b2], &build, "composite");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: &'static str,
    pub checks: usize,
    pub worst: f64,
}

/// Run every gradient case for seeds `0..seeds`.
pub fn suite(seeds: u64) -> Vec<CaseReport> {
    let mut acc = Acc::new();
    conv1d_gradients(&mut acc, seeds);
    dense_relu_gradients(&mut acc, seeds);
    shape_op_gradients(&mut acc, seeds);
    elementwise_gradients(&mut acc, seeds);
    supcon_gradients(&mut acc, seeds);
    recon_loss_gradients(&mut acc, seeds);
    composite_network_gradients(&mut acc, seeds);
    acc.into_iter()
        .map(|(case, (checks, worst))| CaseReport { case, checks, worst })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_within_tolerance_over_twenty_seeds() {
        let reports = suite(20);
        assert_eq!(reports.len(), 11);
        for r in reports {
            assert!(r.worst < TOL, "{}: relative error {}", r.case, r.worst);
        }
    }

    #[test]
    fn trivial_layer_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let v = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let n = tape.l2_normalize(v).unwrap();
        let nd = tape.value(n).data().to_vec();
        assert!((nd[0] - 0.6).abs() < 1e-15 && (nd[1] - 0.8).abs() < 1e-15);

        let p = tape.constant(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.global_avg_pool(p).unwrap();
        assert_eq!(tape.value(g).data(), &[2.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let unused = store.add("unused", Tensor::new(vec![1], vec![5.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let sq = tape.mul(u, u).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&tape, &grads);
        assert_eq!(store.get(used).grad.data(), &[6.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0]);
    }

    #[test]
    fn dimension_errors_name_the_op() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        match tape.conv1d(x, w, b, 1, 1) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "conv1d");
                assert_eq!(lhs, vec![1, 3, 8]);
                assert_eq!(rhs, vec![4, 2, 3]);
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { op: "add", .. })));
        let y = tape.relu(a).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv1dLayer::new(&mut store, "c", 3, 4, 5, 2, 2, &mut rng).unwrap();
        let dense = DenseLayer::new(&mut store, "d", 4, 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = serde_json::json!({"note": "x"});
        save_checkpoint(&path, &store, vec![conv.spec("c"), LayerSpec::Relu, dense.spec("d")], meta.clone()).unwrap();
        let (desc, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(desc.meta, meta);
        assert_eq!(desc.layers.len(), 3);
        assert_eq!(loaded.info(), store.info());
        for (a, b) in loaded.iter().zip(store.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        // truncated blob
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.ckpt")),
            Err(Error::Dependency { .. })
        ));
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let layer = Conv1dLayer::new(&mut store, "c", 8, 16, 3, 1, 1, &mut rng).unwrap();
        let a = (6.0f64 / (24.0 + 48.0)).sqrt() as f32;
        assert!(store.get(layer.w).value.data().iter().all(|v| v.abs() <= a));
        assert!(store.get(layer.b).value.data().iter().all(|&v| v == 0.0));
        assert_eq!(parameter_count(&store), 16 * 8 * 3 + 16);
        assert!(matches!(
            Conv1dLayer::new(&mut store, "c", 1, 1, 1, 1, 0, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
