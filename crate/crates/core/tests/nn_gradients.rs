use kprompt::nn::gradcheck::{grad_check, GradCheckOptions};
use kprompt::nn::{
    BatchNorm, DepthwiseConv, Dropout, Layer, Linear, MeanPool, Mode, MultiHeadSelfAttention,
    NnError, Param, PositionalEmbedding, Relu, Sequential, Tensor3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random_input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Tensor3 {
    Tensor3::from_shape_simple_fn(shape, || rng.random_range(-1.5..1.5))
}

fn check(layer: &mut dyn Layer, x: &Tensor3, mode: Mode, seed: u64) -> f64 {
    let opts = GradCheckOptions {
        mode,
        seed,
        ..Default::default()
    };
    let report = grad_check(layer, x, opts).unwrap();
    assert!(report.checked > 0);
    assert!(
        report.max_rel_error <= TOL,
        "seed {seed}: rel error {} at {}",
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

#[test]
fn linear_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (din, dout) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut lin = Linear::new("lin", din, dout, &mut rng);
        let shape = (rng.random_range(1..4), rng.random_range(1..4), din);
        let x = random_input(&mut rng, shape);
        let err = check(&mut lin, &x, Mode::Train, seed);
        assert!(err <= 1e-6, "linear error {err}");
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let c = rng.random_range(1..5);
        let mut bn = BatchNorm::new("bn", c);
        bn.gamma.value.mapv_inplace(|_| rng.random_range(0.5..2.0));
        bn.beta.value.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let shape = (rng.random_range(1..4), rng.random_range(2..5), c);
        let x = random_input(&mut rng, shape);
        check(&mut bn, &x, Mode::Train, seed);
        bn.running_var.value.mapv_inplace(|_| rng.random_range(0.5..2.0));
        check(&mut bn, &x, Mode::Eval, seed);
    }
}

#[test]
fn depthwise_conv_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let c = rng.random_range(1..5);
        let mut conv = DepthwiseConv::new("conv", k, c, &mut rng).unwrap();
        let shape = (rng.random_range(1..3), rng.random_range(1..7), c);
        let x = random_input(&mut rng, shape);
        check(&mut conv, &x, Mode::Train, seed);
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (d, h) = [(4, 2), (4, 1), (6, 3), (8, 4)][rng.random_range(0..4)];
        let mut attn = MultiHeadSelfAttention::new("attn", d, h, &mut rng).unwrap();
        let shape = (rng.random_range(1..3), rng.random_range(1..5), d);
        let x = random_input(&mut rng, shape);
        check(&mut attn, &x, Mode::Train, seed);
    }
    // the documented reference shape
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut attn = MultiHeadSelfAttention::new("attn", 4, 2, &mut rng).unwrap();
    let shape = (1, 3, 4);
        let x = random_input(&mut rng, shape);
    check(&mut attn, &x, Mode::Train, 9);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut attn = MultiHeadSelfAttention::new("attn", 8, 4, &mut rng).unwrap();
    let x = random_input(&mut rng, (3, 7, 8)) * 4.0;
    attn.forward(&x, Mode::Eval).unwrap();
    for batch in attn.last_attention().unwrap() {
        for head in batch {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn small_layers_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let c = rng.random_range(1..5);
        let shape = (2, rng.random_range(1..5), c);
        let x = random_input(&mut rng, shape);
        check(&mut Relu::new(), &x, Mode::Train, seed);
        check(&mut MeanPool::new(), &x, Mode::Train, seed);
        check(&mut Dropout::new(0.3, seed).unwrap(), &x, Mode::Train, seed);
        let mut pe = PositionalEmbedding::new("pos", 3, c, &mut rng);
        check(&mut pe, &x, Mode::Train, seed);
    }
}

#[test]
fn stacked_fragment_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut net = Sequential::new();
        net.push(BatchNorm::new("bn0", 5));
        net.push(Dropout::new(0.1, seed).unwrap());
        net.push(DepthwiseConv::new("conv", 3, 5, &mut rng).unwrap());
        net.push(Linear::new("lin", 5, 4, &mut rng));
        net.push(BatchNorm::new("bn1", 4));
        net.push(Relu::new());
        net.push(PositionalEmbedding::new("pos", 4, 4, &mut rng));
        net.push(MultiHeadSelfAttention::new("attn", 4, 2, &mut rng).unwrap());
        net.push(MeanPool::new());
        net.push(Linear::new("head", 4, 3, &mut rng));
        let shape = (3, 4, 5);
        let x = random_input(&mut rng, shape);
        check(&mut net, &x, Mode::Train, seed);
    }
}

/// A linear layer whose backward flips the sign of the input gradient.
#[derive(Clone)]
struct SignFlipped(Linear);

impl Layer for SignFlipped {
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError> {
        self.0.forward(x, mode)
    }
    fn backward(&mut self, g: &Tensor3) -> Result<Tensor3, NnError> {
        Ok(-self.0.backward(g)?)
    }
    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.0.infer(x)
    }
    fn params(&self) -> Vec<&Param> {
        self.0.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.params_mut()
    }
    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = SignFlipped(Linear::new("lin", 3, 2, &mut rng));
    let shape = (2, 2, 3);
        let x = random_input(&mut rng, shape);
    let report = grad_check(&mut bad, &x, GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error > 0.1, "{report:?}");
}

#[test]
fn kinks_inside_the_window_are_flagged() {
    let opts = GradCheckOptions::default();
    // 3e-6 is closer to the ReLU boundary than eps = 1e-5
    let x = Tensor3::from_shape_vec((1, 1, 2), vec![3e-6, 0.7]).unwrap();
    let rep = grad_check(&mut Relu::new(), &x, opts).unwrap();
    assert_eq!(rep.kinks, 1);
    assert!(rep.max_rel_error > 0.1);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_input(&mut rng, (2, 3, 4));
    let mut lin = Linear::new("lin", 4, 3, &mut rng);
    assert_eq!(grad_check(&mut lin, &x, opts).unwrap().kinks, 0);
}
