//! Pre-norm transformer building blocks.
//!
//! Each block is `x + Attn(LN(x))` followed by `x + MLP(LN(x))` with a GELU
//! MLP of width `4 * d_model`. The same parameters can be run through the
//! tape ([`TransformerStack::forward`]) or through a graph-free incremental
//! path with a key/value cache ([`TransformerStack::step_cached`]) used for
//! autoregressive decoding.

use crate::graph::AttentionLayout;
use crate::{Float, Graph, ParamId, ParamStore, Result, Rng, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let data = (0..d_in * d_out).map(|_| rng.normal(std)).collect();
        let w = store.insert(&format!("{name}.w"), Tensor::new(vec![d_in, d_out], data)?, true)?;
        let b = if bias { Some(store.insert(&format!("{name}.b"), Tensor::zeros(&[d_out]), false)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }

    /// Single-row forward without the tape.
    pub fn apply<F: Float>(&self, store: &ParamStore<F>, x: &[F]) -> Vec<F> {
        let w = store.get(self.w).data();
        let mut out = match self.b {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![F::zero(); self.d_out],
        };
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * self.d_out..(i + 1) * self.d_out];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        let gamma = store.insert(&format!("{name}.gamma"), Tensor::full(&[d], F::one()), false)?;
        let beta = store.insert(&format!("{name}.beta"), Tensor::zeros(&[d]), false)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn apply<F: Float>(&self, store: &ParamStore<F>, x: &[F]) -> Vec<F> {
        let (gamma, beta) = (store.get(self.gamma).data(), store.get(self.beta).data());
        let n = F::from_count(x.len());
        let mu = x.iter().copied().sum::<F>() / n;
        let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
        let rs = F::one() / (var + F::lit(1e-5)).sqrt();
        x.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| (v - mu) * rs * g + b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        residual_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, true, INIT_STD, rng)?,
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, true, INIT_STD, rng)?,
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, true, INIT_STD, rng)?,
            o: Linear::new(store, &format!("{name}.attn.o"), d, d, true, residual_std, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, MLP_RATIO * d, true, INIT_STD, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), MLP_RATIO * d, d, true, residual_std, rng)?,
            heads,
        })
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, layout: &AttentionLayout) -> Var {
        let h = self.ln1.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let a = g.attention(q, k, v, layout.clone());
        let a = self.o.forward(g, store, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }

    fn step<F: Float>(&self, store: &ParamStore<F>, x: &[F], cache: &mut LayerCache<F>) -> Vec<F> {
        let d = x.len();
        let dh = d / self.heads;
        let h = self.ln1.apply(store, x);
        let q = self.q.apply(store, &h);
        cache.keys.extend(self.k.apply(store, &h));
        cache.values.extend(self.v.apply(store, &h));
        let t = cache.keys.len() / d;
        let scale = F::one() / F::from_count(dh).sqrt();
        let mut attn = vec![F::zero(); d];
        let mut scores = vec![F::zero(); t];
        for head in 0..self.heads {
            let qh = &q[head * dh..(head + 1) * dh];
            let mut max = F::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &cache.keys[j * d + head * dh..j * d + (head + 1) * dh];
                *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<F>() * scale;
                max = max.max(*s);
            }
            let mut total = F::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (j, &s) in scores.iter().enumerate() {
                let p = s / total;
                let vh = &cache.values[j * d + head * dh..j * d + (head + 1) * dh];
                for (o, &v) in attn[head * dh..(head + 1) * dh].iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
        }
        let a = self.o.apply(store, &attn);
        let x: Vec<F> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let h = self.ln2.apply(store, &x);
        let mut h = self.fc1.apply(store, &h);
        for v in &mut h {
            *v = gelu_scalar(*v);
        }
        let h = self.fc2.apply(store, &h);
        x.iter().zip(&h).map(|(&u, &v)| u + v).collect()
    }
}

fn gelu_scalar<F: Float>(x: F) -> F {
    // Matches the tape's GELU exactly (same formula, same evaluation order).
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

/// Keys and values of every position seen so far, one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerCache<F> {
    keys: Vec<F>,
    values: Vec<F>,
}

/// A stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub d_model: usize,
    pub heads: usize,
    pub causal: bool,
}

impl TransformerStack {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        layers: usize,
        d_model: usize,
        heads: usize,
        causal: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "d_model must be divisible by heads");
        let residual_std = INIT_STD / ((2 * layers.max(1)) as f64).sqrt();
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), d_model, heads, residual_std, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d_model)?;
        Ok(Self { blocks, ln_f, d_model, heads, causal })
    }

    /// Closed-form parameter count for `layers` blocks of width `d`.
    pub fn param_count(layers: usize, d: usize) -> usize {
        let per_block = 4 * d // two layer norms
            + 4 * (d * d + d) // q, k, v, o
            + (d * MLP_RATIO * d + MLP_RATIO * d)
            + (MLP_RATIO * d * d + d);
        layers * per_block + 2 * d
    }

    /// Runs over `[batch * seq, d_model]` rows. `lens` gives each sequence's
    /// valid length; rows beyond it are padding.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        batch: usize,
        seq: usize,
        lens: &[usize],
    ) -> Var {
        let layout = AttentionLayout { batch, seq, heads: self.heads, causal: self.causal, lens: lens.to_vec() };
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h, &layout);
        }
        self.ln_f.forward(g, store, h)
    }

    pub fn new_cache<F: Float>(&self) -> Vec<LayerCache<F>> {
        assert!(self.causal, "incremental decoding needs a causal stack");
        vec![LayerCache { keys: Vec::new(), values: Vec::new() }; self.blocks.len()]
    }

    /// Feed one more position through a causal stack, returning its final
    /// hidden state.
    pub fn step_cached<F: Float>(&self, store: &ParamStore<F>, x: &[F], cache: &mut [LayerCache<F>]) -> Vec<F> {
        let mut h = x.to_vec();
        for (block, c) in self.blocks.iter().zip(cache.iter_mut()) {
            h = block.step(store, &h, c);
        }
        self.ln_f.apply(store, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_store() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::seed_from_u64(0);
        TransformerStack::new(&mut store, "t", 3, 16, 4, true, &mut rng).unwrap();
        assert_eq!(store.numel(), TransformerStack::param_count(3, 16));
    }

    #[test]
    fn forward_preserves_shape_and_cached_path_matches() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(3);
        let stack = TransformerStack::new(&mut store, "t", 2, 8, 2, true, &mut rng).unwrap();
        let seq = 5;
        let input: Vec<f64> = (0..seq * 8).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![seq, 8], input.clone()).unwrap());
        let y = stack.forward(&mut g, &store, x, 1, seq, &[seq]);
        assert_eq!(g.value(y).shape(), &[seq, 8]);
        let mut cache = stack.new_cache();
        for t in 0..seq {
            let out = stack.step_cached(&store, &input[t * 8..(t + 1) * 8], &mut cache);
            for (a, b) in out.iter().zip(g.value(y).row(t)) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn padding_does_not_leak_into_valid_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(5);
        let stack = TransformerStack::new(&mut store, "t", 1, 8, 2, false, &mut rng).unwrap();
        let run = |pad: f64| {
            let mut data: Vec<f64> = (0..4 * 8).map(|i| (i as f64 * 0.3).sin()).collect();
            for v in &mut data[3 * 8..] {
                *v = pad;
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![4, 8], data).unwrap());
            let y = stack.forward(&mut g, &store, x, 1, 4, &[3]);
            g.value(y).data()[..3 * 8].to_vec()
        };
        assert_eq!(run(0.0), run(9.0));
    }
}
