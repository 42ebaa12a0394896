use crate::attention::{CoAttentionParams, DynamicFilterGenerator, GateParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stem, stage-2 and stage-3 widths of the encoder; the stage-4 width is the
/// configurable attention channel count.
pub const STEM_CHANNELS: usize = 8;
pub const STAGE2_CHANNELS: usize = 16;
pub const STAGE3_CHANNELS: usize = 32;

/// Output stride of the feature fed to the attention modules.
pub const FEATURE_STRIDE: usize = 8;

macro_rules! model_tensors {
    ($($field:ident),* $(,)?) => {
        /// One value per model tensor, in checkpoint order.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ModelTensors<T> {
            $(pub $field: T,)*
        }

        impl<T> ModelTensors<T> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
                [$((stringify!($field), &self.$field)),*].into_iter()
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut T)> {
                [$((stringify!($field), &mut self.$field)),*].into_iter()
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(usize, &'static str, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<ModelTensors<U>, E> {
                let mut idx = 0;
                let mut next = |name, value| {
                    let out = f(idx, name, value);
                    idx += 1;
                    out
                };
                Ok(ModelTensors {
                    $($field: next(stringify!($field), &self.$field)?,)*
                })
            }

            pub fn map<U>(&self, mut f: impl FnMut(usize, &'static str, &T) -> U) -> ModelTensors<U> {
                self.try_map(|i, n, v| Ok::<U, std::convert::Infallible>(f(i, n, v)))
                    .unwrap_or_else(|e| match e {})
            }

            /// Rebuilds from values listed in checkpoint order.
            pub fn from_ordered(values: Vec<T>) -> Option<Self> {
                if values.len() != Self::NAMES.len() {
                    return None;
                }
                let mut it = values.into_iter();
                Some(ModelTensors {
                    $($field: it.next()?,)*
                })
            }
        }
    };
}

model_tensors!(
    stem_w,
    stem_b,
    stage2_w,
    stage2_b,
    stage3_w,
    stage3_b,
    stage4_w,
    stage4_b,
    dynamic_w,
    coattn_w,
    coattn_resize,
    gate_self_w,
    gate_self_b,
    gate_co_w,
    gate_co_b,
    head1_w,
    head1_b,
    head2_w,
    head2_b,
    head_out_w,
    head_out_b,
    skip4_w,
    skip4_b,
    skip2_w,
    skip2_b,
    skip1_w,
    skip1_b,
);

pub type ModelParams = ModelTensors<Tensor>;

/// Tensor shapes for a model whose attention feature has `c` channels.
pub fn param_shapes(c: usize) -> ModelTensors<Vec<usize>> {
    let (s1, s2, s3) = (STEM_CHANNELS, STAGE2_CHANNELS, STAGE3_CHANNELS);
    ModelTensors {
        stem_w: vec![3, 3, 3, s1],
        stem_b: vec![s1],
        stage2_w: vec![3, 3, s1, s2],
        stage2_b: vec![s2],
        stage3_w: vec![3, 3, s2, s3],
        stage3_b: vec![s3],
        stage4_w: vec![3, 3, s3, c],
        stage4_b: vec![c],
        dynamic_w: vec![c, 9 * c],
        coattn_w: vec![c, c],
        coattn_resize: vec![3, 3, s2, c],
        gate_self_w: vec![1, 1, c, c],
        gate_self_b: vec![c],
        gate_co_w: vec![1, 1, c, c],
        gate_co_b: vec![c],
        head1_w: vec![3, 3, 3 * c, c],
        head1_b: vec![c],
        head2_w: vec![3, 3, c, c],
        head2_b: vec![c],
        head_out_w: vec![1, 1, c, 1],
        head_out_b: vec![1],
        skip4_w: vec![1, 1, s3, 1],
        skip4_b: vec![1],
        skip2_w: vec![1, 1, s2, 1],
        skip2_b: vec![1],
        skip1_w: vec![1, 1, s1, 1],
        skip1_b: vec![1],
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [kh, kw, cin, _] => kh * kw * cin,
        [rows, _] => *rows,
        _ => 0,
    }
}

impl ModelParams {
    /// Weights uniform in `±sqrt(1 / fan_in)`, biases zero. Each tensor draws
    /// from its own stream derived from `seed`.
    pub fn init(c: usize, seed: u64) -> Self {
        param_shapes(c).map(|idx, _, shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let bound = (1.0 / fan_in(shape) as f64).sqrt();
            let mut rng = Rng::derive(seed, idx as u64);
            Tensor::random_uniform(shape, -bound, bound, &mut rng)
        })
    }

    pub fn zeros(c: usize) -> Self {
        param_shapes(c).map(|_, _, shape| Tensor::zeros(shape))
    }

    pub fn channels(&self) -> usize {
        self.stage4_b.len()
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, t)| t.all_finite())
    }

    /// Checks every tensor against the manifest for `c` channels and lists all
    /// offenders.
    pub fn validate_shapes(&self, c: usize) -> Result<()> {
        let expected = param_shapes(c);
        let bad: Vec<String> = self
            .iter()
            .zip(expected.iter())
            .filter(|((_, t), (_, s))| t.shape() != s.as_slice())
            .map(|((name, t), (_, s))| format!("{name}: found {:?}, expected {:?}", t.shape(), s))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("shape manifest mismatch: {}", bad.join("; "))))
        }
    }

    pub fn dynamic_filter_generator(&self) -> DynamicFilterGenerator {
        DynamicFilterGenerator {
            weight: self.dynamic_w.clone(),
        }
    }

    pub fn coattention_params(&self) -> CoAttentionParams {
        CoAttentionParams {
            weight: self.coattn_w.clone(),
            resize: self.coattn_resize.clone(),
        }
    }

    pub fn gate_self(&self) -> GateParams {
        GateParams {
            weight: self.gate_self_w.clone(),
            bias: self.gate_self_b.clone(),
        }
    }

    pub fn gate_co(&self) -> GateParams {
        GateParams {
            weight: self.gate_co_w.clone(),
            bias: self.gate_co_b.clone(),
        }
    }
}
