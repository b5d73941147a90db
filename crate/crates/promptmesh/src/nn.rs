//! Parameter store and the small layer library (linear, layer norm,
//! multi-head attention, feed-forward) used by every transformer module.
//!
//! Initialization draws come from RNG streams keyed by parameter name, so a
//! model variant that omits some layers still initializes the remaining
//! parameters identically under the same seed.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::rng;
use crate::scalar::{s, Scalar};
use ndarray::{ArcArray2, Array2};
use rand::Rng;
use std::collections::HashMap;

pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<ArcArray2<S>>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array2<S>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.into_shared());
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &ArcArray2<S> {
        &self.values[id]
    }

    pub fn set(&mut self, id: usize, value: Array2<S>) {
        assert_eq!(self.values[id].dim(), value.dim(), "param shape change");
        self.values[id] = value.into_shared();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArcArray2<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Name-keyed init stream; independent of registration order.
    pub fn init_stream(&self, name: &str) -> rand_chacha::ChaCha8Rng {
        rng::stream(self.seed, name)
    }

    pub fn register_xavier(&mut self, name: &str, din: usize, dout: usize) -> usize {
        let mut r = self.init_stream(name);
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = Array2::from_shape_fn((din, dout), |_| s::<S>(r.random_range(-bound..bound)));
        self.register(name, w)
    }

    pub fn register_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> usize {
        let mut r = self.init_stream(name);
        let w = Array2::from_shape_fn((rows, cols), |_| {
            s::<S>(rand_distr::Distribution::sample(
                &rand_distr::Normal::new(0.0, std).unwrap(),
                &mut r,
            ))
        });
        self.register(name, w)
    }

    pub fn register_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> usize {
        self.register(name, Array2::from_elem((rows, cols), s::<S>(value)))
    }

    /// Write all parameters into `arc` under `prefix/`.
    pub fn write_archive(&self, arc: &mut Archive, prefix: &str) {
        for (name, value) in self.iter() {
            arc.set_arr2(format!("{prefix}/{name}"), &value.to_owned());
        }
    }

    /// Load parameters from `arc` under `prefix/`. Every registered
    /// parameter must be present with a matching shape.
    pub fn read_archive(&mut self, arc: &Archive, prefix: &str) -> Result<()> {
        for id in 0..self.values.len() {
            let key = format!("{prefix}/{}", self.names[id]);
            let loaded = arc.get_arr2::<S>(&key)?;
            if loaded.dim() != self.values[id].dim() {
                return Err(Error::Data(format!(
                    "checkpoint param '{key}' has shape {:?}, model expects {:?}",
                    loaded.dim(),
                    self.values[id].dim()
                )));
            }
            self.values[id] = loaded.into_shared();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    Xavier,
    Normal(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        din: usize,
        dout: usize,
        init: WeightInit,
    ) -> Self {
        let w = match init {
            WeightInit::Xavier => ps.register_xavier(&format!("{name}.w"), din, dout),
            WeightInit::Normal(std) => ps.register_normal(&format!("{name}.w"), din, dout, std),
            WeightInit::Zeros => ps.register_const(&format!("{name}.w"), din, dout, 0.0),
        };
        let b = Some(ps.register_const(&format!("{name}.b"), 1, dout, 0.0));
        Linear { w, b }
    }

    /// Linear layer whose bias starts at a caller-provided vector.
    pub fn with_bias_init<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        din: usize,
        dout: usize,
        init: WeightInit,
        bias: Array2<S>,
    ) -> Self {
        assert_eq!(bias.dim(), (1, dout));
        let w = match init {
            WeightInit::Xavier => ps.register_xavier(&format!("{name}.w"), din, dout),
            WeightInit::Normal(std) => ps.register_normal(&format!("{name}.w"), din, dout, std),
            WeightInit::Zeros => ps.register_const(&format!("{name}.w"), din, dout, 0.0),
        };
        let b = Some(ps.register(format!("{name}.b"), bias));
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = g.param(ps, b);
                g.add_row(y, bv)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: ps.register_const(&format!("{name}.g"), 1, d, 1.0),
            beta: ps.register_const(&format!("{name}.b"), 1, d, 0.0),
            eps: 1e-6,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let n = g.layer_norm_rows(x, s::<S>(self.eps));
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        Self::with_out_init(ps, name, d, heads, WeightInit::Xavier)
    }

    /// Attention with a chosen init for the output projection; zero-init
    /// makes the whole sublayer start as an exact no-op under a residual.
    pub fn with_out_init<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        d: usize,
        heads: usize,
        out_init: WeightInit,
    ) -> Self {
        assert!(d % heads == 0, "width must divide into heads");
        MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, WeightInit::Xavier),
            k: Linear::new(ps, &format!("{name}.k"), d, d, WeightInit::Xavier),
            v: Linear::new(ps, &format!("{name}.v"), d, d, WeightInit::Xavier),
            o: Linear::new(ps, &format!("{name}.o"), d, d, out_init),
            heads,
            d,
        }
    }

    /// `q_in` attends over `kv_in`; self-attention when they coincide.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        q_in: Var,
        kv_in: Var,
    ) -> Var {
        let dh = self.d / self.heads;
        let scale = s::<S>(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(g, ps, q_in);
        let k = self.k.forward(g, ps, kv_in);
        let v = self.v.forward(g, ps, kv_in);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let scores = g.matmul_t(qh, kh, false, true);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled);
            outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&outs);
        self.o.forward(g, ps, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden, WeightInit::Xavier),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d, WeightInit::Xavier),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let h = self.fc1.forward(g, ps, x);
        let a = g.unary(h, Unary::Gelu);
        self.fc2.forward(g, ps, a)
    }
}

/// Pre-norm transformer block: `x += attn(ln(x)); x += ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        d: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        SelfAttentionBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ff: FeedForward::new(ps, &format!("{name}.ff"), d, ff_hidden),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var {
        let n1 = self.ln1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, n1, n1);
        let x = g.add(x, a);
        let n2 = self.ln2.forward(g, ps, x);
        let f = self.ff.forward(g, ps, n2);
        g.add(x, f)
    }
}

/// Standard sinusoidal positional encoding of a scalar position, width `d`
/// (d/2 sin + d/2 cos, geometric frequency ladder over base 10000).
pub fn sinusoid_vec<S: Scalar>(pos: f64, d: usize) -> Vec<S> {
    let half = d / 2;
    let mut out = vec![S::zero(); d];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half.max(1) as f64);
        out[2 * i] = s::<S>((pos * freq).sin());
        out[2 * i + 1] = s::<S>((pos * freq).cos());
    }
    out
}

/// Positional encoding of a 2-d point with coordinates normalized to [0,1]:
/// the first d/2 lanes encode u, the rest encode v. Coordinates are scaled
/// by 1000 so the finest sinusoid resolves sub-pixel offsets.
pub const POINT_PE_SCALE: f64 = 1000.0;

pub fn point_pe<S: Scalar>(u: f64, v: f64, d: usize) -> Vec<S> {
    assert!(d % 2 == 0, "point encoding needs even width");
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    out.extend(sinusoid_vec::<S>(u * POINT_PE_SCALE, half));
    out.extend(sinusoid_vec::<S>(v * POINT_PE_SCALE, half));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::array;

    #[test]
    fn name_keyed_init_is_order_independent() {
        let mut a = ParamStore::<f32>::new(9);
        let mut b = ParamStore::<f32>::new(9);
        let _ = a.register_xavier("x.w", 4, 4);
        let _ = a.register_xavier("y.w", 4, 4);
        // Reverse registration order; same names → same values.
        let _ = b.register_xavier("y.w", 4, 4);
        let _ = b.register_xavier("x.w", 4, 4);
        assert_eq!(
            a.value(a.id("x.w").unwrap()),
            b.value(b.id("x.w").unwrap())
        );
        assert_eq!(
            a.value(a.id("y.w").unwrap()),
            b.value(b.id("y.w").unwrap())
        );
    }

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut ps = ParamStore::<f64>::new(0);
        let lin = Linear::new(&mut ps, "l", 2, 2, WeightInit::Zeros);
        ps.set(lin.w, array![[1.0, 2.0], [3.0, 4.0]]);
        ps.set(lin.b.unwrap(), array![[10.0, 20.0]]);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 1.0]]);
        let y = lin.forward(&mut g, &ps, x);
        assert_eq!(g.value(y).to_owned(), array![[14.0, 26.0]]);
    }

    #[test]
    fn attention_rows_are_convex_mixtures_at_zero_out_bias() {
        let mut ps = ParamStore::<f64>::new(3);
        let mha = MultiHeadAttention::new(&mut ps, "a", 8, 2);
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((3, 8), |(i, j)| {
            ((i * 8 + j) as f64 * 0.37).sin()
        }));
        let y = mha.forward(&mut g, &ps, x, x);
        assert_eq!(g.shape(y), (3, 8));
        for v in g.value(y).iter() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn zero_init_attention_is_identity_under_residual() {
        let mut ps = ParamStore::<f64>::new(4);
        let mha =
            MultiHeadAttention::with_out_init(&mut ps, "cp", 8, 2, WeightInit::Zeros);
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((5, 8), |(i, j)| {
            (i as f64 - j as f64) * 0.1
        }));
        let a = mha.forward(&mut g, &ps, x, x);
        let y = g.add(x, a);
        assert_eq!(g.value(y).to_owned(), g.value(x).to_owned());
    }

    #[test]
    fn sinusoid_translation_acts_by_known_phase_shift() {
        // pe(x)[0] = sin(x), pe(x)[1] = cos(x) for the lowest band.
        let d = 8;
        let a = sinusoid_vec::<f64>(0.7, d);
        assert!((a[0] - 0.7f64.sin()).abs() < 1e-12);
        assert!((a[1] - 0.7f64.cos()).abs() < 1e-12);
    }
}
