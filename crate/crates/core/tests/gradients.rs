use midtune::encoder::{DualEncoder, EncoderConfig, Side};
use midtune::linearize::{EncodedInput, Marker};
use midtune::numcore::{grad_check, roundoff_floor, Graph, NumError, ParamStore, Tensor, Var};
use midtune::objectives::{triplet_loss, TripletConfig};
use midtune::rng::seeded;
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Checks `sum(w * op(x...))` for random inputs and a random projection `w`,
/// at 10 points.
fn check_op(name: &str, shapes: &[[usize; 2]], lo: f64, hi: f64, op: impl Fn(&mut Graph, &[Var]) -> Result<Var, NumError>) {
    for point in 0..10 {
        let mut rng = seeded(point);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &[r, c])| {
                let t = Tensor::matrix(r, c, random(&mut rng, r * c, lo, hi)).unwrap();
                store.add(format!("x{i}"), t).unwrap()
            })
            .collect();
        let probe = {
            let mut g = Graph::new();
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
            let y = op(&mut g, &xs).unwrap();
            g.value(y).clone()
        };
        let w = Tensor::new(probe.shape().to_vec(), random(&mut rng, probe.numel(), -1.0, 1.0)).unwrap();
        let r = grad_check(
            &mut store,
            |g, s| {
                let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let y = op(g, &xs)?;
                let w = g.constant(w.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{name} at point {point}: {r:?}");
        assert!(r.checked > 0, "{name}: every coordinate was excluded");
    }
}

#[test]
fn elementwise_ops() {
    check_op("add", &[[3, 4], [3, 4]], -2.0, 2.0, |g, x| g.add(x[0], x[1]));
    check_op("sub", &[[3, 4], [3, 4]], -2.0, 2.0, |g, x| g.sub(x[0], x[1]));
    check_op("mul", &[[3, 4], [3, 4]], -2.0, 2.0, |g, x| g.mul(x[0], x[1]));
    check_op("scale", &[[2, 5]], -2.0, 2.0, |g, x| Ok(g.scale(x[0], -1.7)));
    check_op("relu", &[[4, 4]], -2.0, 2.0, |g, x| Ok(g.relu(x[0])));
    check_op("gelu", &[[4, 4]], -3.0, 3.0, |g, x| Ok(g.gelu(x[0])));
    check_op("sigmoid", &[[4, 4]], -4.0, 4.0, |g, x| Ok(g.sigmoid(x[0])));
    check_op("softplus", &[[4, 4]], -4.0, 4.0, |g, x| Ok(g.softplus(x[0])));
    check_op("abs", &[[4, 4]], -2.0, 2.0, |g, x| Ok(g.abs(x[0])));
    check_op("square", &[[4, 4]], -2.0, 2.0, |g, x| Ok(g.square(x[0])));
    check_op("sqrt", &[[4, 4]], 0.2, 3.0, |g, x| Ok(g.sqrt(x[0])));
    check_op("log", &[[4, 4]], 0.2, 3.0, |g, x| Ok(g.log(x[0])));
}

#[test]
fn matrix_ops() {
    check_op("matmul", &[[3, 5], [5, 2]], -1.0, 1.0, |g, x| g.matmul(x[0], x[1]));
    check_op("transpose", &[[3, 5]], -1.0, 1.0, |g, x| g.transpose(x[0]));
    check_op("add_row", &[[3, 5], [1, 5]], -1.0, 1.0, |g, x| {
        let row = flatten(g, x[1])?;
        g.add_row(x[0], row)
    });
    check_op("concat rows", &[[2, 3], [4, 3]], -1.0, 1.0, |g, x| g.concat(&[x[0], x[1]], 0));
    check_op("concat cols", &[[2, 3], [2, 1]], -1.0, 1.0, |g, x| g.concat(&[x[0], x[1]], 1));
    check_op("slice_cols", &[[3, 6]], -1.0, 1.0, |g, x| g.slice_cols(x[0], 1, 4));
    check_op("slice_rows", &[[5, 2]], -1.0, 1.0, |g, x| g.slice_rows(x[0], 2, 5));
    check_op("mean rows", &[[4, 3]], -1.0, 1.0, |g, x| g.mean(x[0], 0));
    check_op("mean cols", &[[4, 3]], -1.0, 1.0, |g, x| g.mean(x[0], 1));
    check_op("embedding", &[[6, 3]], -1.0, 1.0, |g, x| g.embedding(x[0], &[4, 0, 4, 2]));
}

#[test]
fn normalization_ops() {
    check_op("softmax", &[[3, 5]], -3.0, 3.0, |g, x| g.softmax_rows(x[0], None));
    check_op("masked softmax", &[[3, 5]], -3.0, 3.0, |g, x| {
        g.softmax_rows(x[0], Some(&[true, false, true, true, false]))
    });
    check_op("layernorm", &[[3, 6], [1, 6], [1, 6]], -2.0, 2.0, |g, x| {
        let (gain, bias) = (flatten(g, x[1])?, flatten(g, x[2])?);
        g.layernorm_rows(x[0], gain, bias, 1e-5)
    });
}

// [1,n] -> [n]
fn flatten(g: &mut Graph, row: Var) -> Result<Var, NumError> {
    g.mean(row, 0)
}

fn seq(rng: &mut impl Rng, marker: Marker, len: usize, vocab: usize) -> EncodedInput {
    let mut ids = vec![2];
    ids.extend((1..len).map(|_| rng.gen_range(8..vocab)));
    EncodedInput {
        mask: vec![1; len],
        ids,
        marker,
    }
    .padded_to(len + 3)
}

#[test]
fn full_encoder_triplet_gradient() {
    let cfg = EncoderConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len: 12,
        seed: 3,
    };
    let mut rng = seeded(4);
    let (s, p, n) = (
        seq(&mut rng, Marker::Sentence, 5, 16),
        seq(&mut rng, Marker::Form, 7, 16),
        seq(&mut rng, Marker::Form, 4, 16),
    );
    for tied in [true, false] {
        let mut model = DualEncoder::init(cfg, tied).unwrap();
        let r = grad_check(
            &mut model.store,
            |g, store| {
                let m = DualEncoder::from_store(cfg, tied, store.clone()).unwrap();
                let (a, b, c) = (
                    m.encode_var(g, Side::Sentence, &s).unwrap(),
                    m.encode_var(g, Side::Form, &p).unwrap(),
                    m.encode_var(g, Side::Form, &n).unwrap(),
                );
                triplet_loss(g, a, b, c, &TripletConfig { margin: 1.0 })
            },
            EPS,
        )
        .unwrap();
        let floor = roundoff_floor(r.loss, EPS, TOL);
        assert!(r.max_rel_error_with_floor(floor) < TOL, "tied={tied}: {r:?}");
        // anything over the floor is real gradient and meets the tolerance outright
        for &(a, num) in &r.samples {
            if a.abs().max(num.abs()) > floor {
                assert!((a - num).abs() / a.abs().max(num.abs()) < TOL);
            }
        }
    }
}

#[test]
fn key_bias_gradient_is_exactly_zero() {
    // a per-query constant added to every score leaves softmax unchanged
    let cfg = EncoderConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_len: 12,
        seed: 9,
    };
    let model = DualEncoder::init(cfg, true).unwrap();
    let mut rng = seeded(1);
    let x = seq(&mut rng, Marker::Sentence, 6, 16);
    let mut g = Graph::new();
    let e = model.encode_var(&mut g, Side::Sentence, &x).unwrap();
    let loss = g.sum(e);
    let grads = g.backward(loss).unwrap();
    let bk = model.store.id("shared.layer0.attn.bk").unwrap();
    let gk = grads.param_grads().find(|(id, _)| *id == bk).map(|(_, t)| t.clone()).unwrap();
    assert!(gk.data().iter().all(|v| v.abs() < 1e-15), "{:?}", gk.data());
}
