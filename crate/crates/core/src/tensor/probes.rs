//! Randomized finite-difference harnesses, one per layer. Each probe's loss
//! is `Σ R ⊙ layer(X)` for a fixed random `R` (or the loss itself for the
//! MSE probe), and its point is the layer input followed by any parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    masked_mse, symmetrize, BatchNorm, Dropout, GcnConv, GradCheckable, GroupSoftmax, Linear,
    Matrix, Mode, NormalizedAdjacency, Relu, SlotRanges,
};

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Entries with magnitude in `[0.1, 1)` and random sign.
fn away_from_zero(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Random tree over `n` nodes plus a few extra edges, symmetrized.
pub fn random_adjacency(n: usize, rng: &mut impl Rng) -> NormalizedAdjacency {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for _ in 0..n / 3 {
        let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if u != v {
            edges.push((u, v));
        }
    }
    NormalizedAdjacency::new(&symmetrize(&edges), n).expect("edges in range")
}

fn weighted_sum(r: &Matrix, y: &Matrix) -> f64 {
    r.hadamard(y).expect("same shape").sum()
}

fn split_into(target: &mut [f64], x: &[f64]) -> usize {
    let n = target.len();
    target.copy_from_slice(&x[..n]);
    n
}

pub struct GcnProbe {
    adj: NormalizedAdjacency,
    x: Matrix,
    layer: GcnConv,
    r: Matrix,
}

impl GcnProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..9);
        let (din, dout) = (rng.gen_range(1..6), rng.gen_range(1..6));
        Self {
            adj: random_adjacency(n, &mut rng),
            x: random_matrix(n, din, &mut rng),
            layer: GcnConv::new(random_matrix(din, dout, &mut rng)),
            r: random_matrix(n, dout, &mut rng),
        }
    }
}

impl GradCheckable for GcnProbe {
    fn point(&self) -> Vec<f64> {
        [self.x.data(), self.layer.weight.value.data()].concat()
    }
    fn set_point(&mut self, x: &[f64]) {
        let at = split_into(self.x.data_mut(), x);
        split_into(self.layer.weight.value.data_mut(), &x[at..]);
    }
    fn loss(&mut self) -> f64 {
        weighted_sum(&self.r, &self.layer.forward(&self.adj, &self.x).expect("shapes"))
    }
    fn gradient(&mut self) -> Vec<f64> {
        self.layer.forward(&self.adj, &self.x).expect("shapes");
        let dx = self.layer.backward(&self.adj, &self.r).expect("shapes");
        [dx.data(), self.layer.weight.grad.data()].concat()
    }
}

pub struct LinearProbe {
    x: Matrix,
    layer: Linear,
    r: Matrix,
}

impl LinearProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let (din, dout) = (rng.gen_range(1..6), rng.gen_range(1..6));
        Self {
            x: random_matrix(n, din, &mut rng),
            layer: Linear::new(random_matrix(din, dout, &mut rng), random_matrix(1, dout, &mut rng)),
            r: random_matrix(n, dout, &mut rng),
        }
    }
}

impl GradCheckable for LinearProbe {
    fn point(&self) -> Vec<f64> {
        [self.x.data(), self.layer.weight.value.data(), self.layer.bias.value.data()].concat()
    }
    fn set_point(&mut self, x: &[f64]) {
        let mut at = split_into(self.x.data_mut(), x);
        at += split_into(self.layer.weight.value.data_mut(), &x[at..]);
        split_into(self.layer.bias.value.data_mut(), &x[at..]);
    }
    fn loss(&mut self) -> f64 {
        weighted_sum(&self.r, &self.layer.forward(&self.x).expect("shapes"))
    }
    fn gradient(&mut self) -> Vec<f64> {
        self.layer.forward(&self.x).expect("shapes");
        let dx = self.layer.backward(&self.r).expect("shapes");
        [dx.data(), self.layer.weight.grad.data(), self.layer.bias.grad.data()].concat()
    }
}

pub struct BatchNormProbe {
    x: Matrix,
    layer: BatchNorm,
    mode: Mode,
    r: Matrix,
}

impl BatchNormProbe {
    pub fn new(seed: u64, mode: Mode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..9);
        let c = rng.gen_range(1..5);
        let mut layer = BatchNorm::new(c);
        layer.gamma.value = random_matrix(1, c, &mut rng);
        layer.beta.value = random_matrix(1, c, &mut rng);
        layer.running_mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        layer.running_var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        Self {
            x: random_matrix(n, c, &mut rng),
            layer,
            mode,
            r: random_matrix(n, c, &mut rng),
        }
    }
}

impl GradCheckable for BatchNormProbe {
    fn point(&self) -> Vec<f64> {
        [self.x.data(), self.layer.gamma.value.data(), self.layer.beta.value.data()].concat()
    }
    fn set_point(&mut self, x: &[f64]) {
        let mut at = split_into(self.x.data_mut(), x);
        at += split_into(self.layer.gamma.value.data_mut(), &x[at..]);
        split_into(self.layer.beta.value.data_mut(), &x[at..]);
    }
    fn loss(&mut self) -> f64 {
        weighted_sum(&self.r, &self.layer.forward(&self.x, self.mode).expect("shapes"))
    }
    fn gradient(&mut self) -> Vec<f64> {
        self.layer.forward(&self.x, self.mode).expect("shapes");
        let dx = self.layer.backward(&self.r).expect("shapes");
        [dx.data(), self.layer.gamma.grad.data(), self.layer.beta.grad.data()].concat()
    }
}

pub struct ReluProbe {
    x: Matrix,
    layer: Relu,
    r: Matrix,
}

impl ReluProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.gen_range(1..8), rng.gen_range(1..6));
        Self {
            x: away_from_zero(n, c, &mut rng),
            layer: Relu::new(),
            r: random_matrix(n, c, &mut rng),
        }
    }
}

impl GradCheckable for ReluProbe {
    fn point(&self) -> Vec<f64> {
        self.x.data().to_vec()
    }
    fn set_point(&mut self, x: &[f64]) {
        split_into(self.x.data_mut(), x);
    }
    fn loss(&mut self) -> f64 {
        weighted_sum(&self.r, &self.layer.forward(&self.x))
    }
    fn gradient(&mut self) -> Vec<f64> {
        self.layer.forward(&self.x);
        self.layer.backward(&self.r).expect("shapes").into_vec()
    }
    fn regime(&self) -> Option<Vec<bool>> {
        self.layer.pattern().map(<[bool]>::to_vec)
    }
}

/// Dropout with one sampled mask held fixed.
pub struct DropoutProbe {
    x: Matrix,
    layer: Dropout,
    mask: Matrix,
    r: Matrix,
}

impl DropoutProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.gen_range(1..8), rng.gen_range(1..6));
        let p = rng.gen_range(0.0..0.9);
        let x = random_matrix(n, c, &mut rng);
        let mut layer = Dropout::new(p).expect("p in range");
        // sample a mask the layer's own way, then freeze it
        let ones = Matrix::filled(n, c, 1.0);
        let mask = layer.forward(&ones, Mode::Train, &mut rng);
        Self {
            x,
            layer,
            mask,
            r: random_matrix(n, c, &mut rng),
        }
    }
}

impl GradCheckable for DropoutProbe {
    fn point(&self) -> Vec<f64> {
        self.x.data().to_vec()
    }
    fn set_point(&mut self, x: &[f64]) {
        split_into(self.x.data_mut(), x);
    }
    fn loss(&mut self) -> f64 {
        let y = self
            .layer
            .forward_with_mask(&self.x, self.mask.clone())
            .expect("shapes");
        weighted_sum(&self.r, &y)
    }
    fn gradient(&mut self) -> Vec<f64> {
        self.layer
            .forward_with_mask(&self.x, self.mask.clone())
            .expect("shapes");
        self.layer.backward(&self.r).expect("shapes").into_vec()
    }
}

pub struct GroupSoftmaxProbe {
    x: Matrix,
    ranges: SlotRanges,
    layer: GroupSoftmax,
    r: Matrix,
}

/// Rows get one of two 3-slot groups or none.
fn random_ranges(n: usize, rng: &mut impl Rng) -> SlotRanges {
    (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => Some(0..3),
            1 => Some(3..6),
            _ => None,
        })
        .collect()
}

impl GroupSoftmaxProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        Self {
            x: random_matrix(n, 6, &mut rng).scale(3.0),
            ranges: random_ranges(n, &mut rng),
            layer: GroupSoftmax::new(),
            r: random_matrix(n, 6, &mut rng),
        }
    }
}

impl GradCheckable for GroupSoftmaxProbe {
    fn point(&self) -> Vec<f64> {
        self.x.data().to_vec()
    }
    fn set_point(&mut self, x: &[f64]) {
        split_into(self.x.data_mut(), x);
    }
    fn loss(&mut self) -> f64 {
        weighted_sum(&self.r, &self.layer.forward(&self.x, &self.ranges).expect("shapes"))
    }
    fn gradient(&mut self) -> Vec<f64> {
        self.layer.forward(&self.x, &self.ranges).expect("shapes");
        self.layer.backward(&self.r).expect("shapes").into_vec()
    }
}

pub struct MseProbe {
    pred: Matrix,
    target: Matrix,
    mask: SlotRanges,
}

impl MseProbe {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..8);
        let mut mask = random_ranges(n, &mut rng);
        mask[0] = Some(0..3);
        Self {
            pred: random_matrix(n, 6, &mut rng),
            target: random_matrix(n, 6, &mut rng),
            mask,
        }
    }
}

impl GradCheckable for MseProbe {
    fn point(&self) -> Vec<f64> {
        self.pred.data().to_vec()
    }
    fn set_point(&mut self, x: &[f64]) {
        split_into(self.pred.data_mut(), x);
    }
    fn loss(&mut self) -> f64 {
        masked_mse(&self.pred, &self.target, &self.mask).expect("shapes").0
    }
    fn gradient(&mut self) -> Vec<f64> {
        masked_mse(&self.pred, &self.target, &self.mask)
            .expect("shapes")
            .1
            .into_vec()
    }
}

/// Every layer probe for one seed, by name.
pub fn layer_probes(seed: u64) -> Vec<(&'static str, Box<dyn GradCheckable>)> {
    vec![
        ("gcn", Box::new(GcnProbe::new(seed))),
        ("linear", Box::new(LinearProbe::new(seed))),
        ("batchnorm-train", Box::new(BatchNormProbe::new(seed, Mode::Train))),
        ("batchnorm-eval", Box::new(BatchNormProbe::new(seed, Mode::Eval))),
        ("relu", Box::new(ReluProbe::new(seed))),
        ("dropout", Box::new(DropoutProbe::new(seed))),
        ("group-softmax", Box::new(GroupSoftmaxProbe::new(seed))),
        ("masked-mse", Box::new(MseProbe::new(seed))),
    ]
}
