//! Parameter storage and the layer functions built on it.
//!
//! Layers are plain functions that look their weights up by name through a
//! [`Weights`] implementation. The same network code therefore runs on
//! ordinary parameters ([`Bound`]) and on per-forward weight samples drawn
//! from a variational posterior.

use crate::conv::ConvGeom;
use crate::{Float, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use std::collections::HashMap;

/// Source of the effective weight tensor for a parameter name.
pub trait Weights<F: Float> {
    fn get(&self, name: &str) -> Var<F>;
}

/// Ordered, named parameter arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Float> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Wrap every parameter in a fresh gradient-tracking leaf.
    pub fn bind(&self) -> Bound<F> {
        let vars = self.values.iter().map(|v| Var::leaf(v.clone())).collect();
        Bound { names: self.names.clone(), vars, index: self.index.clone() }
    }

    /// Wrap every parameter as a constant (inference).
    pub fn bind_frozen(&self) -> Bound<F> {
        let vars = self.values.iter().map(|v| Var::constant(v.clone())).collect();
        Bound { names: self.names.clone(), vars, index: self.index.clone() }
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::of(x.to_f64_lossy()))).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters bound to graph leaves for one forward/backward pass.
pub struct Bound<F: Float> {
    names: Vec<String>,
    vars: Vec<Var<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> Bound<F> {
    pub fn var(&self, name: &str) -> Option<&Var<F>> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.vars.iter())
    }
}

impl<F: Float> Weights<F> for Bound<F> {
    fn get(&self, name: &str) -> Var<F> {
        self.var(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")).clone()
    }
}

fn uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<F> {
    let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(d.sample(rng)))
}

/// He-uniform bound for leaky-ReLU(0.2) activations.
fn he_bound(fan_in: f64) -> f64 {
    (6.0 / ((1.0 + 0.04) * fan_in)).sqrt()
}

/// `{name}.w: [in, out]`, `{name}.b: [out]`.
pub fn init_linear<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, inp: usize, out: usize, rng: &mut R) {
    store.insert(format!("{name}.w"), uniform(&[inp, out], he_bound(inp as f64), rng));
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
}

/// `{name}.w: [out, in*k*k]`, `{name}.b: [out]`.
pub fn init_conv2d<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, inp: usize, out: usize, k: usize, rng: &mut R) {
    let fan_in = (inp * k * k) as f64;
    store.insert(format!("{name}.w"), uniform(&[out, inp * k * k], he_bound(fan_in), rng));
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
}

/// `{name}.w: [out*k*k, in]`, `{name}.b: [out]`.
pub fn init_conv_transpose2d<F: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    name: &str,
    inp: usize,
    out: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) {
    let fan_in = (inp * k * k) as f64 / (stride * stride) as f64;
    store.insert(format!("{name}.w"), uniform(&[out * k * k, inp], he_bound(fan_in), rng));
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
}

/// `x: [B, in] -> [B, out]`.
pub fn linear<F: Float>(w: &impl Weights<F>, name: &str, x: &Var<F>) -> Var<F> {
    let weight = w.get(&format!("{name}.w"));
    let bias = w.get(&format!("{name}.b"));
    x.matmul(&weight).add_bias(&bias, 1)
}

/// `x: [Ci, B, H, W] -> [Co, B, Ho, Wo]`.
pub fn conv2d<F: Float>(w: &impl Weights<F>, name: &str, x: &Var<F>, kernel: usize, stride: usize, pad: usize) -> Var<F> {
    let weight = w.get(&format!("{name}.w"));
    let bias = w.get(&format!("{name}.b"));
    let s = x.shape();
    let g = ConvGeom::forward(s[0], s[1], s[2], s[3], kernel, stride, pad);
    let co = weight.shape()[0];
    x.unfold(&g).pipe(|cols| weight.matmul(&cols)).reshape(&[co, g.batch, g.out_h, g.out_w]).add_bias(&bias, 0)
}

/// `x: [Ci, B, H, W] -> [Co, B, (H-1)*s - 2p + k, ...]`.
pub fn conv_transpose2d<F: Float>(
    w: &impl Weights<F>,
    name: &str,
    x: &Var<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Var<F> {
    let weight = w.get(&format!("{name}.w"));
    let bias = w.get(&format!("{name}.b"));
    let s = x.shape().to_vec();
    let co = weight.shape()[0] / (kernel * kernel);
    let g = ConvGeom::transposed(co, s[1], s[2], s[3], kernel, stride, pad);
    let flat = x.reshape(&[s[0], s[1] * s[2] * s[3]]);
    weight.matmul(&flat).fold(&g).add_bias(&bias, 0)
}

/// `[C, B, H, W] -> [B, C*H*W]`.
pub fn flatten_cbhw<F: Float>(x: &Var<F>) -> Var<F> {
    let s = x.shape().to_vec();
    x.permute(&[1, 0, 2, 3]).reshape(&[s[1], s[0] * s[2] * s[3]])
}

/// `[B, C*H*W] -> [C, B, H, W]`.
pub fn unflatten_cbhw<F: Float>(x: &Var<F>, c: usize, h: usize, w: usize) -> Var<F> {
    let b = x.shape()[0];
    x.reshape(&[b, c, h, w]).permute(&[1, 0, 2, 3])
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 4-nested-loop correlation used as the reference.
    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, co: usize, k: usize, s: usize, p: usize) -> ArrayD<f64> {
        let (ci, b, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = ArrayD::zeros(IxDyn(&[co, b, ho, wo]));
        for o in 0..co {
            for n in 0..b {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (i * s + ki) as isize - p as isize;
                                    let jj = (j * s + kj) as isize - p as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x[[c, n, ii as usize, jj as usize]] * w[[o, (c * k + ki) * k + kj]];
                                    }
                                }
                            }
                        }
                        out[[o, n, i, j]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        init_conv2d(&mut store, "c", 2, 3, 4, &mut rng);
        let x = uniform::<f64, _>(&[2, 2, 8, 6], 1.0, &mut rng);
        let y = conv2d(&store.bind_frozen(), "c", &Var::constant(x.clone()), 4, 2, 1);
        let reference = naive_conv(&x, store.get("c.w").unwrap(), 3, 4, 2, 1);
        assert_eq!(y.shape(), reference.shape());
        for (a, b) in y.value().iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x; W), y> == <x, convT(y; W')> when W' is W rearranged
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (ci, co, k) = (2, 3, 4);
        let w = uniform::<f64, _>(&[co, ci * k * k], 1.0, &mut rng);
        let x = uniform::<f64, _>(&[ci, 1, 8, 8], 1.0, &mut rng);
        let y = uniform::<f64, _>(&[co, 1, 4, 4], 1.0, &mut rng);
        let mut fwd = ParamStore::new();
        fwd.insert("c.w", w.clone());
        fwd.insert("c.b", ArrayD::zeros(IxDyn(&[co])));
        let mut tr = ParamStore::new();
        tr.insert("t.w", w.t().as_standard_layout().into_owned());
        tr.insert("t.b", ArrayD::zeros(IxDyn(&[ci])));
        let cx = conv2d(&fwd.bind_frozen(), "c", &Var::constant(x.clone()), k, 2, 1);
        let ty = conv_transpose2d(&tr.bind_frozen(), "t", &Var::constant(y.clone()), k, 2, 1);
        assert_eq!(ty.shape(), x.shape());
        let lhs = (cx.value() * &y).sum();
        let rhs = (&x * ty.value()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn flatten_roundtrip() {
        let x = Var::<f64>::constant(ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |i| (i[0] * 100 + i[1] * 10 + i[2] * 2 + i[3]) as f64));
        let f = flatten_cbhw(&x);
        assert_eq!(f.shape(), &[2, 12]);
        // first row is sample 0, channel-major
        assert_eq!(f.value()[[0, 4]], 100.0);
        assert_eq!(unflatten_cbhw(&f, 3, 2, 2).value(), x.value());
    }
}
