//! Feature pyramids for matching and image pyramids for the multi-scale
//! losses.
//!
//! Level 0 of a feature pyramid is the raw image itself; each level above it
//! applies a stride-1 conv and a stride-2 conv (leaky-relu after both), so
//! spatial size halves per level. The image pyramid used by the losses is a
//! plain 2x2 average-pool chain — the losses compare images, not learned
//! features.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{ModelMeta, ModelParams, ParamBinding};
use crate::tensor::{Elem, Tensor};

/// Negative slope of the leaky-relu activations in the extractor and the
/// flow predictors.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Per-level feature maps for one image; `levels[0]` is the input.
pub struct FeaturePyramid<T: Elem = f32> {
    pub levels: Vec<Tensor<T>>,
}

/// Rejects inputs whose spatial size the pyramid cannot halve `levels` times.
pub fn check_divisible(h: usize, w: usize, meta: &ModelMeta) -> Result<()> {
    let d = meta.divisor();
    if h % d != 0 || w % d != 0 {
        let ph = h.div_ceil(d) * d;
        let pw = w.div_ceil(d) * d;
        return Err(Error::Shape(format!(
            "input {h}x{w} is not divisible by {d}; pad to {ph}x{pw} \
             (estimate_flow reflect-pads and crops back automatically)"
        )));
    }
    Ok(())
}

/// Builds the feature pyramid inside a graph, returning one node per level
/// (index 0 is the input var itself).
pub fn build_feature_pyramid<T: Elem>(
    g: &mut Graph<T>,
    binding: &ParamBinding,
    image: Var,
    meta: &ModelMeta,
) -> Result<Vec<Var>> {
    let (_, c, h, w) = g.value(image).dims4()?;
    if c != meta.input_channels {
        return Err(Error::Shape(format!(
            "extractor expects {} input channels, got {c}",
            meta.input_channels
        )));
    }
    check_divisible(h, w, meta)?;
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut levels = vec![image];
    let mut cur = image;
    for l in 1..=meta.levels {
        let w1 = binding.var(&format!("feat/l{l}/conv1/w"))?;
        let b1 = binding.var(&format!("feat/l{l}/conv1/b"))?;
        let w2 = binding.var(&format!("feat/l{l}/conv2/w"))?;
        let b2 = binding.var(&format!("feat/l{l}/conv2/b"))?;
        let x = g.conv2d(cur, w1, 1, 1)?;
        let x = g.add_bias(x, b1)?;
        let x = g.leaky_relu(x, slope)?;
        let x = g.conv2d(x, w2, 2, 1)?;
        let x = g.add_bias(x, b2)?;
        let x = g.leaky_relu(x, slope)?;
        levels.push(x);
        cur = x;
    }
    Ok(levels)
}

/// Runs the extractor on a plain tensor and materializes every level.
pub fn extract_pyramid<T: Elem>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let iv = g.leaf(image.clone());
    let vars = build_feature_pyramid(&mut g, &binding, iv, &params.meta)?;
    Ok(FeaturePyramid {
        levels: vars.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

/// Average-pool image pyramid with `levels + 1` entries, level 0 being the
/// input. Values stay within the input range.
pub fn downsample_image_pyramid<T: Elem>(
    image: &Tensor<T>,
    levels: usize,
) -> Result<Vec<Tensor<T>>> {
    let (_, _, h, w) = image.dims4()?;
    let d = 1usize << levels;
    if h % d != 0 || w % d != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by {d}; pad before building the pyramid"
        )));
    }
    let mut out = vec![image.clone()];
    for _ in 0..levels {
        let next = ops::avg_pool_2x(out.last().expect("nonempty"))?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn level_sizes_halve() {
        let params = ModelParams::<f32>::init(ModelMeta::default(), 1).unwrap();
        let image = Tensor::<f32>::full(&[1, 1, 32, 32], 0.5);
        let pyr = extract_pyramid(&image, &params).unwrap();
        assert_eq!(pyr.levels.len(), 5);
        let want_c = [1, 16, 32, 64, 96];
        for (l, t) in pyr.levels.iter().enumerate() {
            let (b, c, h, w) = t.dims4().unwrap();
            assert_eq!(b, 1);
            assert_eq!(c, want_c[l]);
            assert_eq!(h, 32 >> l);
            assert_eq!(w, 32 >> l);
        }
    }

    #[test]
    fn level_zero_is_the_input() {
        let params = ModelParams::<f64>::init(ModelMeta::tiny(2, 4, 1), 3).unwrap();
        let image = rt(&[1, 1, 8, 8], 5);
        let pyr = extract_pyramid(&image, &params).unwrap();
        assert_eq!(pyr.levels[0], image);
    }

    #[test]
    fn zero_weights_produce_zero_features() {
        let params = ModelParams::<f32>::zeros(ModelMeta::tiny(2, 4, 1)).unwrap();
        let image = rt(&[2, 1, 8, 8], 6).cast::<f32>();
        let pyr = extract_pyramid(&image, &params).unwrap();
        for t in &pyr.levels[1..] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_input_reports_required_padding() {
        let params = ModelParams::<f32>::init(ModelMeta::default(), 1).unwrap();
        let image = Tensor::<f32>::zeros(&[1, 1, 30, 40]);
        let err = extract_pyramid(&image, &params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad to 32x48"), "{msg}");
    }

    #[test]
    fn image_pyramid_averages_and_preserves_mean() {
        let image = rt(&[1, 1, 16, 16], 7);
        let pyr = downsample_image_pyramid(&image, 3).unwrap();
        assert_eq!(pyr.len(), 4);
        let mean0: f64 = image.data().iter().sum::<f64>() / image.len() as f64;
        for t in &pyr" {
            let m: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
            assert!((m - mean0).abs() < 1e-12);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // 2x2 checker averages to one half-value pixel
        let block = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = downsample_image_pyramid(&block, 1).unwrap();
        assert_eq!(p[1].data(), &[0.5]);
    }

    #[test]
    fn extractor_weight_gradients_match_finite_differences() {
        let meta = ModelMeta::tiny(1, 3, 1);
        let params = ModelParams::<f64>::init(meta.clone(), 11).unwrap();
        let image = rt(&[1, 1, 8, 8], 12);

        let eval = |p: &ModelParams<f64>| -> f64 {
            let mut g = Graph::new();
            let binding = p.bind(&mut g);
            let iv = g.leaf(image.clone());
            let vars = build_feature_pyramid(&mut g, &binding, iv, &p.meta).unwrap();
            let top = *vars.last().unwrap();
            let sq = g.mul(top, top).unwrap();
            let loss = g.sum(sq);
            g.value(loss).data()[0]
        };

        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let iv = g.leaf(image.clone());
        let vars = build_feature_pyramid(&mut g, &binding, iv, &meta).unwrap();
        let top = *vars.last().unwrap();
        let sq = g.mul(top, top).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let gmap = binding.collect(&g, &grads);

        let eps = 1e-4;
        for id in ["feat/l1/conv1/w", "feat/l1/conv2/w", "feat/l1/conv1/b"] {
            let analytic = &gmap[id];
            for i in (0..analytic.len()).step_by(7) {
                let mut pp = params.clone();
                pp.get_mut(id).unwrap().data_mut()[i] += eps;
                let fp = eval(&pp);
                let mut pm = params.clone();
                pm.get_mut(id).unwrap().data_mut()[i] -= eps;
                let fm = eval(&pm);
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "{id}[{i}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
