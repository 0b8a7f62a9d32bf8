//! The two neural scene representations: the canonical human field and the
//! contracted background field.
//!
//! Both are small MLPs over frequency encodings, with a softplus density
//! head and a tanh-derived sigmoid color head so the emitted density is
//! nonnegative and colors stay in [0, 1] without hard clamps. Queries are
//! generic over the evaluation context: plain for forward renders, taped
//! for gradient steps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EvalCtx, ParamAllocator, ParamRange};
use crate::geometry::{
    integrated_positional_encoding, positional_encoding, EncodingConfig, FrustumGaussian,
};
use crate::linalg::{Aabb, Vec3};
use crate::num::{sigmoid, softplus, Real, Scalar};

/// One dense layer backed by parameter ranges (row-major weights).
#[derive(Clone, Copy, Debug)]
pub struct DenseLayer {
    pub w: ParamRange,
    pub b: ParamRange,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// A fully connected network with tanh hidden activations and a linear
/// output layer, optionally re-concatenating the input at one hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub skip_at: Option<usize>,
    pub input_dim: usize,
}

impl Mlp {
    /// Reserves parameters for `hidden_layers` hidden transforms of width
    /// `hidden_dim` plus a linear head of `out_dim` outputs.
    pub fn layout(
        alloc: &mut ParamAllocator,
        input_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        out_dim: usize,
        skip_at: Option<usize>,
    ) -> Self {
        assert!(hidden_layers >= 1);
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut prev = input_dim;
        for i in 0..hidden_layers {
            let inp = if skip_at == Some(i) && i > 0 {
                prev + input_dim
            } else {
                prev
            };
            let w = alloc.reserve(inp * hidden_dim);
            let b = alloc.reserve(hidden_dim);
            layers.push(DenseLayer { w, b, in_dim: inp, out_dim: hidden_dim });
            prev = hidden_dim;
        }
        let w = alloc.reserve(prev * out_dim);
        let b = alloc.reserve(out_dim);
        layers.push(DenseLayer { w, b, in_dim: prev, out_dim });
        Self { layers, skip_at, input_dim }
    }

    /// Covering parameter range; layers are allocated contiguously.
    pub fn param_span(&self) -> ParamRange {
        let start = self.layers[0].w.start;
        let end = self.layers.last().unwrap().b.end();
        ParamRange { start, len: end - start }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    /// Xavier-uniform weights, zero biases; `zero_head` also zeroes the
    /// output layer so a fresh network emits exactly zero.
    pub fn init<R: Real>(&self, values: &mut [R], rng: &mut ChaCha8Rng, zero_head: bool) {
        let n_layers = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let head = i + 1 == n_layers;
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for slot in layer.w.start..layer.w.end() {
                values[slot] = if head && zero_head {
                    R::of(0.0)
                } else {
                    R::of(rng.random_range(-limit..limit))
                };
            }
            for slot in layer.b.start..layer.b.end() {
                values[slot] = R::of(0.0);
            }
        }
    }

    pub fn forward<R: Real, C: EvalCtx<R>>(&self, ctx: C, input: &[C::S]) -> Vec<C::S> {
        debug_assert_eq!(input.len(), self.input_dim);
        let n_layers = self.layers.len();
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if self.skip_at == Some(i) && i > 0 {
                h.extend_from_slice(input);
            }
            debug_assert_eq!(h.len(), layer.in_dim);
            h = ctx.matvec(layer.w, layer.b, &h);
            if i + 1 < n_layers {
                for v in h.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
        h
    }
}

/// Color and density emitted by a field query.
pub struct FieldOutput<S> {
    pub color: Vec3<S>,
    pub density: S,
}

/// Splits a 4-vector of raw head outputs into squashed color and density.
fn squash_heads<S: Scalar>(raw: &[S]) -> FieldOutput<S> {
    FieldOutput {
        color: Vec3::new(sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])),
        density: softplus(raw[3]),
    }
}

/// The pose-independent human appearance/geometry volume. Density is
/// hard-masked to zero outside the canonical bounding box.
#[derive(Clone, Debug)]
pub struct CanonicalHumanField<R: Real> {
    pub mlp: Mlp,
    pub encoding: EncodingConfig,
    pub bbox: Aabb<R>,
}

impl<R: Real> CanonicalHumanField<R> {
    pub fn query<C: EvalCtx<R>>(&self, ctx: C, x_c: Vec3<C::S>) -> FieldOutput<C::S> {
        if !self.bbox.contains(x_c.primal()) {
            let zero = ctx.k(R::of(0.0));
            return FieldOutput { color: Vec3::splat(zero), density: zero };
        }
        let features = positional_encoding(x_c, &self.encoding);
        let raw = self.mlp.forward(ctx, &features);
        squash_heads(&raw)
    }
}

/// The unbounded background volume, queried with already-contracted
/// Gaussians through the integrated positional encoding.
#[derive(Clone, Debug)]
pub struct BackgroundField<R: Real> {
    pub mlp: Mlp,
    pub encoding: EncodingConfig,
    _marker: std::marker::PhantomData<R>,
}

impl<R: Real> BackgroundField<R> {
    pub fn new(mlp: Mlp, encoding: EncodingConfig) -> Self {
        Self { mlp, encoding, _marker: std::marker::PhantomData }
    }

    /// `g` must already be contracted (the renderer applies the contraction
    /// before querying).
    pub fn query<C: EvalCtx<R>>(&self, ctx: C, g: &FrustumGaussian<R>) -> FieldOutput<C::S> {
        let features: Vec<C::S> = integrated_positional_encoding(g, &self.encoding)
            .into_iter()
            .map(|v| ctx.k(v))
            .collect();
        let raw = self.mlp.forward(ctx, &features);
        squash_heads(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{
        finite_difference_gradient, record, relative_error, PlainCtx,
    };
    use crate::geometry::EncodingKind;
    use crate::linalg::Mat3;
    use rand::SeedableRng;

    fn toy_human(alloc: &mut ParamAllocator) -> CanonicalHumanField<f64> {
        let encoding = EncodingConfig::new(3, EncodingKind::Plain).unwrap();
        let mlp = Mlp::layout(alloc, encoding.output_len(), 16, 2, 4, None);
        CanonicalHumanField {
            mlp,
            encoding,
            bbox: Aabb::new(Vec3::of(-1.0, -1.0, -1.0), Vec3::of(1.0, 1.0, 1.0)),
        }
    }

    #[test]
    fn outside_bbox_density_is_zero() {
        let mut alloc = ParamAllocator::new();
        let field = toy_human(&mut alloc);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        field.mlp.init(&mut values, &mut rng, false);

        let out = field.query(PlainCtx::new(&values), Vec3::of(5.0, 0.0, 0.0));
        assert_eq!(out.density, 0.0);
        assert_eq!(out.color.to_array(), [0.0; 3]);
    }

    #[test]
    fn query_is_deterministic() {
        let mut alloc = ParamAllocator::new();
        let field = toy_human(&mut alloc);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        field.mlp.init(&mut values, &mut rng, false);

        let p = Vec3::of(0.3, -0.2, 0.5);
        let a = field.query(PlainCtx::new(&values), p);
        let b = field.query(PlainCtx::new(&values), p);
        assert_eq!(a.density.to_bits(), b.density.to_bits());
        for (x, y) in a.color.to_array().iter().zip(b.color.to_array()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn density_nonnegative_color_bounded() {
        let mut alloc = ParamAllocator::new();
        let field = toy_human(&mut alloc);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        field.mlp.init(&mut values, &mut rng, false);
        // exaggerate weights to push the heads toward saturation
        for v in values.iter_mut() {
            *v *= 40.0;
        }
        let mut prng = rand::rngs::StdRng::seed_from_u64(4);
        for _ in 0..500 {
            use rand::Rng;
            let p = Vec3::of(
                prng.random_range(-1.0..1.0),
                prng.random_range(-1.0..1.0),
                prng.random_range(-1.0..1.0),
            );
            let out = field.query(PlainCtx::new(&values), p);
            assert!(out.density >= 0.0);
            for c in out.color.to_array() {
                assert!((0.0..=1.0).contains(&c), "color {c}");
            }
        }
    }

    #[test]
    fn canonical_gradient_matches_finite_differences() {
        let mut alloc = ParamAllocator::new();
        let field = toy_human(&mut alloc);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        field.mlp.init(&mut values, &mut rng, false);

        let p = Vec3::of(0.25, -0.4, 0.6);
        let rec = record(&values, |t| {
            let x = Vec3::new(t.k(p.x), t.k(p.y), t.k(p.z));
            let out = field.query(t, x);
            vec![out.density + out.color.x]
        });
        let g = rec.backward_scalar(1.0).unwrap();
        let fd = finite_difference_gradient(
            |v| {
                let out = field.query(PlainCtx::new(v), p);
                out.density + out.color.x
            },
            &values,
            1e-5,
        );
        let mut checked = 0;
        for (a, b) in g.iter().zip(&fd) {
            if b.abs() > 1e-9 {
                assert!(relative_error(*a, *b) < 1e-4, "{a} vs {b}");
                checked += 1;
            }
        }
        assert!(checked > 50, "too few informative gradient entries");
    }

    #[test]
    fn background_zero_head_gives_constant_softplus_density() {
        let mut alloc = ParamAllocator::new();
        let encoding = EncodingConfig::new(4, EncodingKind::Integrated).unwrap();
        let mlp = Mlp::layout(&mut alloc, encoding.output_len(), 16, 2, 4, None);
        let field = BackgroundField::<f64>::new(mlp, encoding);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        field.mlp.init(&mut values, &mut rng, true); // zeroed head

        let expected = crate::num::softplus(0.0f64);
        let mut prng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..50 {
            use rand::Rng;
            let g = FrustumGaussian {
                mu: Vec3::of(
                    prng.random_range(-1.5..1.5),
                    prng.random_range(-1.5..1.5),
                    prng.random_range(-1.5..1.5),
                ),
                sigma: Mat3::identity().scale(prng.random_range(0.0..0.1)),
            };
            let out = field.query(PlainCtx::new(&values), &g);
            assert_eq!(out.density, expected);
        }
    }

    #[test]
    fn background_zero_sigma_equals_plain_encoded_query() {
        let mut alloc = ParamAllocator::new();
        let encoding = EncodingConfig::new(5, EncodingKind::Integrated).unwrap();
        let mlp = Mlp::layout(&mut alloc, encoding.output_len(), 16, 2, 4, None);
        let field = BackgroundField::<f64>::new(mlp, encoding);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        field.mlp.init(&mut values, &mut rng, false);

        let mu = Vec3::of(0.4, -0.9, 1.3);
        let g = FrustumGaussian { mu, sigma: Mat3::zero() };
        let via_ipe = field.query(PlainCtx::new(&values), &g);

        let plain_cfg = EncodingConfig::new(5, EncodingKind::Plain).unwrap();
        let feats = positional_encoding(mu, &plain_cfg);
        let raw = field.mlp.forward(PlainCtx::new(&values), &feats);
        let direct = squash_heads(&raw);

        assert_eq!(via_ipe.density.to_bits(), direct.density.to_bits());
        for (a, b) in via_ipe.color.to_array().iter().zip(direct.color.to_array()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn background_gradient_matches_finite_differences() {
        let mut alloc = ParamAllocator::new();
        let encoding = EncodingConfig::new(3, EncodingKind::Integrated).unwrap();
        let mlp = Mlp::layout(&mut alloc, encoding.output_len(), 12, 2, 4, None);
        let field = BackgroundField::<f64>::new(mlp, encoding);
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        field.mlp.init(&mut values, &mut rng, false);

        let g = FrustumGaussian {
            mu: Vec3::of(0.7, 0.2, -0.3),
            sigma: Mat3::identity().scale(0.01),
        };
        let rec = record(&values, |t| {
            let out = field.query(t, &g);
            vec![out.density * out.color.y + out.color.z]
        });
        let grad = rec.backward_scalar(1.0).unwrap();
        let fd = finite_difference_gradient(
            |v| {
                let out = field.query(PlainCtx::new(v), &g);
                out.density * out.color.y + out.color.z
            },
            &values,
            1e-5,
        );
        for (a, b) in grad.iter().zip(&fd) {
            if b.abs() > 1e-9 {
                assert!(relative_error(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn skip_connection_shapes_line_up() {
        let mut alloc = ParamAllocator::new();
        let mlp = Mlp::layout(&mut alloc, 10, 8, 4, 3, Some(2));
        let mut values = vec![0.0f64; alloc.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        mlp.init(&mut values, &mut rng, false);
        let input: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let out = mlp.forward(PlainCtx::new(&values), &input);
        assert_eq!(out.len(), 3);
        assert_eq!(mlp.shapes()[2], (8 + 10, 8));
    }
}
