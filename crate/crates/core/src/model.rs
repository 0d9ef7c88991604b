//! Parameter construction per variant and the variant forward pass.

use gradkit::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelDims, Variant};
use crate::crossmodal::{activate, dense_head, similarity_maps, sparse_head};
use crate::decoder::{
    decode_parts, decode_whole, empty_target_loss, hierarchical_loss, HierarchicalPrediction, LabelEmbeddings,
    PartPrompts, WholePrompt,
};
use crate::encoders::{transfer, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{concat_sum, fuse_dense, fuse_sparse, global_descriptor, image_part_weights};
use crate::params::{he_bound, lecun_bound, uniform, Bound, ParamStore};
use crate::prompts::{binary_relation, build_prompts, category_name_prompt, relation_row};
use crate::scenegen::{CategorySpec, SceneSample};

/// Gain of the global descriptor's output layer, so that image part
/// weights start near zero instead of swamping the relation row.
const GLOBAL_FC_GAIN: f64 = 0.1;
const EMBEDDING_INIT: f64 = 0.1;
/// Gain of the frozen output MLP's last layer; keeps initial mask logits
/// near zero so the dice gradient is not saturated at the start.
const OUTPUT_MLP_GAIN: f64 = 0.1;

/// Whole and (optionally) part logits as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// `H x W`.
    pub whole: Tensor<T>,
    /// `P x H x W`.
    pub parts: Option<Tensor<T>>,
}

/// Frozen stubs, trainable parameters and the precomputed text embeddings
/// of every category prompt.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub variant: Variant,
    pub dims: ModelDims,
    pub table: Vec<CategorySpec>,
    pub vocab: Vec<String>,
    pub params: ParamStore<T>,
    pub image_encoder: ImageEncoder<T>,
    pub text_encoder: TextEncoder,
    clip: Vec<Tensor<T>>,
    loss_weights: Vec<Vec<T>>,
}

fn conv_shape(out: usize, inp: usize) -> [usize; 4] {
    [out, inp, 3, 3]
}

impl<T: Scalar> Model<T> {
    pub fn new(
        variant: Variant,
        dims: ModelDims,
        table: Vec<CategorySpec>,
        vocab: Vec<String>,
        seed: u64,
        stub_seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        if table.is_empty() || vocab.is_empty() {
            return Err(Error::Config("model needs at least one category and one part".into()));
        }
        for (i, spec) in table.iter().enumerate() {
            if spec.category_id != i {
                return Err(Error::Config(format!("category table entry {i} has id {}", spec.category_id)));
            }
        }
        let parts = vocab.len();
        let binary = binary_relation::<T>(&table, parts)?;
        let text_encoder = TextEncoder::new(dims.d_clip, stub_seed);
        let clip = (0..table.len())
            .map(|c| {
                let prompt = if variant == Variant::A {
                    category_name_prompt(c, &table)?
                } else {
                    build_prompts(c, &table, &vocab)?
                };
                text_encoder.encode(&prompt)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss_weights = binary.data().chunks(parts).map(<[T]>::to_vec).collect();
        let params = init_params(variant, &dims, &binary, seed)?;
        Ok(Self {
            variant,
            dims,
            table,
            vocab,
            params,
            image_encoder: ImageEncoder::new(dims.stride, dims.d, stub_seed),
            text_encoder,
            clip,
            loss_weights,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_categories(&self) -> usize {
        self.table.len()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.table.iter().map(|c| c.name.clone()).collect()
    }

    /// Frozen image embedding of a sample, `d x h x w`.
    pub fn embed(&self, sample: &SceneSample) -> Result<Tensor<T>> {
        if (sample.height(), sample.width()) != (self.dims.height, self.dims.width) {
            return Err(Error::Config(format!(
                "sample is {}x{}, model expects {}x{}",
                sample.height(),
                sample.width(),
                self.dims.height,
                self.dims.width
            )));
        }
        self.image_encoder.encode(&sample.image)
    }

    /// Text embedding of the prompt for `category`, `P x d_clip`
    /// (`1 x d_clip` for the name-only variant).
    pub fn clip_embedding(&self, category: usize) -> Result<&Tensor<T>> {
        self.clip
            .get(category)
            .ok_or_else(|| Error::Lookup(format!("unknown category {category}")))
    }

    /// Frozen binary relation row used to weight the part losses.
    pub fn loss_weights(&self, category: usize) -> Result<&[T]> {
        self.loss_weights
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown category {category}")))
    }

    /// Global image descriptor, when the variant uses image part weights.
    pub fn descriptor<'t>(&self, p: &Bound<'t, T>, f_i: Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        if self.variant.uses_image_weights() {
            Ok(Some(global_descriptor(p, f_i)?))
        } else {
            Ok(None)
        }
    }

    /// Whole and part prompt embeddings for one category after fusion.
    pub fn prompt_embeddings<'t>(
        &self,
        p: &Bound<'t, T>,
        f_i: Var<'t, T>,
        f_g: Option<Var<'t, T>>,
        category: usize,
    ) -> Result<(WholePrompt<'t, T>, PartPrompts<'t, T>)> {
        let tape = f_i.tape();
        let clip = tape.constant(self.clip_embedding(category)?.clone());
        let t_part = transfer(p, clip)?;
        let act = activate(similarity_maps(t_part, f_i)?, f_i)?;
        let variant = self.variant;
        let sparse = if variant.uses_sparse() {
            sparse_head(p, act, self.dims.tokens)?
        } else {
            p.get("prompt.placeholder")?
        };
        let dense = if variant.uses_dense() {
            dense_head(p, act)?
        } else {
            p.get("prompt.no_mask")?
        };
        let parts = PartPrompts { sparse, dense };

        let d_row = if variant.uses_relation() {
            Some(relation_row(p.get("relation.matrix")?, category)?)
        } else {
            None
        };
        let w = match f_g {
            Some(g) if variant.uses_image_weights() => Some(image_part_weights(g, t_part)?),
            _ => None,
        };
        let whole = match (variant, d_row) {
            (Variant::A | Variant::B | Variant::C, _) | (_, None) => {
                let (s, d) = concat_sum(sparse, dense)?;
                WholePrompt { sparse: s, dense: d }
            }
            (_, Some(row)) => {
                let s = if variant.uses_sparse() { fuse_sparse(sparse, row)? } else { sparse };
                let d = if variant.uses_dense() {
                    let w = match w {
                        Some(w) => w,
                        None => tape.constant(Tensor::ones(vec![1, self.num_parts()])),
                    };
                    fuse_dense(dense, row, w)?
                } else {
                    dense
                };
                WholePrompt { sparse: s, dense: d }
            }
        };
        Ok((whole, parts))
    }

    /// Hierarchical prediction for one category. Parts are decoded only when
    /// requested and the variant has part heads.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        f_i: Var<'t, T>,
        f_g: Option<Var<'t, T>>,
        category: usize,
        positive: bool,
        with_parts: bool,
    ) -> Result<HierarchicalPrediction<'t, T>> {
        let (whole, parts) = self.prompt_embeddings(p, f_i, f_g, category)?;
        let label = LabelEmbeddings::from_bound(p)?.select(positive);
        let (h, w) = (self.dims.height, self.dims.width);
        let whole = decode_whole(p, f_i, whole, label, h, w)?;
        let parts = if with_parts && self.variant.part_losses() {
            Some(decode_parts(p, f_i, parts, label, h, w)?)
        } else {
            None
        };
        Ok(HierarchicalPrediction { whole, parts })
    }

    /// Training objective of one sample: the hierarchical loss of the
    /// positive category plus that of a negative category against empty
    /// targets.
    ///
    /// With `full_negative == false` the negative term is added as the
    /// constant it evaluates to (see [`empty_target_loss`]), skipping its
    /// forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss<'t>(
        &self,
        p: &Bound<'t, T>,
        f_i: Var<'t, T>,
        sample: &SceneSample,
        positive: usize,
        negative: Option<usize>,
        full_negative: bool,
    ) -> Result<Var<'t, T>> {
        let tape = f_i.tape();
        let f_g = self.descriptor(p, f_i)?;
        let pos = self.forward(p, f_i, f_g, positive, true, true)?;
        let mut loss = self.category_loss(&pos, sample, positive)?;
        if let Some(neg) = negative {
            if full_negative {
                let pred = self.forward(p, f_i, f_g, neg, false, true)?;
                let (h, w) = (self.dims.height, self.dims.width);
                let zeros = Tensor::zeros(vec![h, w]);
                let zero_parts = Tensor::zeros(vec![self.num_parts(), h, w]);
                loss = loss.add(hierarchical_loss(&pred, &zeros, &zero_parts, self.loss_weights(neg)?)?)?;
            } else {
                let weights = self.variant.part_losses().then_some(self.loss_weights(neg)?);
                loss = loss.add(tape.constant(Tensor::scalar(empty_target_loss(weights))))?;
            }
        }
        Ok(loss)
    }

    fn category_loss<'t>(
        &self,
        pred: &HierarchicalPrediction<'t, T>,
        sample: &SceneSample,
        category: usize,
    ) -> Result<Var<'t, T>> {
        let whole = sample.whole_mask(category).to_tensor();
        let (h, w) = (self.dims.height, self.dims.width);
        let mut parts = Vec::with_capacity(self.num_parts() * h * w);
        for m in sample.part_masks(category, self.num_parts()) {
            parts.extend_from_slice(m.to_tensor::<T>().data());
        }
        let parts = Tensor::new(vec![self.num_parts(), h, w], parts)?;
        hierarchical_loss(pred, &whole, &parts, self.loss_weights(category)?)
    }

    /// Logits for `category` with the positive label.
    pub fn predict(&self, f_i: &Tensor<T>, category: usize, with_parts: bool) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let f = tape.constant(f_i.clone());
        let f_g = self.descriptor(&p, f)?;
        let pred = self.forward(&p, f, f_g, category, true, with_parts)?;
        Ok(Prediction {
            whole: pred.whole.to_tensor(),
            parts: pred.parts.map(|v| v.to_tensor()),
        })
    }

    /// Whole logits for every category, sharing one global descriptor.
    pub fn predict_all(&self, f_i: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let f = tape.constant(f_i.clone());
        let f_g = self.descriptor(&p, f)?;
        (0..self.num_categories())
            .map(|c| Ok(self.forward(&p, f, f_g, c, true, false)?.whole.to_tensor()))
            .collect()
    }
}

/// Builds every parameter the variant uses, in a fixed order.
pub fn init_params<T: Scalar>(variant: Variant, dims: &ModelDims, binary: &Tensor<T>, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let d = dims.d;
    let zeros = |n: usize| Tensor::<T>::zeros(vec![n]);

    let (th, sh, dh, gh) = (dims.transfer_hidden, dims.sparse_hidden, dims.dense_hidden, dims.global_hidden);
    s.insert("transfer.fc1.weight", uniform(&mut rng, &[dims.d_clip, th], he_bound(dims.d_clip)), true)?;
    s.insert("transfer.fc1.bias", zeros(th), true)?;
    s.insert("transfer.fc2.weight", uniform(&mut rng, &[th, d], lecun_bound(th)), true)?;
    s.insert("transfer.fc2.bias", zeros(d), true)?;

    if variant.uses_sparse() {
        let n = dims.tokens * d;
        s.insert("crossmodal.sparse.fc1.weight", uniform(&mut rng, &[d, sh], he_bound(d)), true)?;
        s.insert("crossmodal.sparse.fc1.bias", zeros(sh), true)?;
        s.insert("crossmodal.sparse.fc2.weight", uniform(&mut rng, &[sh, n], lecun_bound(sh)), true)?;
        s.insert("crossmodal.sparse.fc2.bias", zeros(n), true)?;
    } else {
        s.insert("prompt.placeholder", uniform(&mut rng, &[1, 1, d], EMBEDDING_INIT), true)?;
    }
    if variant.uses_dense() {
        s.insert("crossmodal.dense.conv1.weight", uniform(&mut rng, &conv_shape(dh, d), he_bound(9 * d)), true)?;
        s.insert("crossmodal.dense.conv1.bias", zeros(dh), true)?;
        s.insert("crossmodal.dense.conv2.weight", uniform(&mut rng, &conv_shape(dh, dh), he_bound(9 * dh)), true)?;
        s.insert("crossmodal.dense.conv2.bias", zeros(dh), true)?;
        s.insert("crossmodal.dense.conv3.weight", uniform(&mut rng, &conv_shape(d, dh), lecun_bound(9 * dh)), true)?;
        s.insert("crossmodal.dense.conv3.bias", zeros(d), true)?;
    } else {
        s.insert("prompt.no_mask", uniform(&mut rng, &[d, 1, 1], EMBEDDING_INIT), true)?;
    }
    if variant.uses_image_weights() {
        s.insert("fusion.global_cnn.conv1.weight", uniform(&mut rng, &conv_shape(gh, d), he_bound(9 * d)), true)?;
        s.insert("fusion.global_cnn.conv1.bias", zeros(gh), true)?;
        s.insert("fusion.global_cnn.conv2.weight", uniform(&mut rng, &conv_shape(gh, gh), he_bound(9 * gh)), true)?;
        s.insert("fusion.global_cnn.conv2.bias", zeros(gh), true)?;
        s.insert("fusion.global_cnn.conv3.weight", uniform(&mut rng, &conv_shape(d, gh), he_bound(9 * gh)), true)?;
        s.insert("fusion.global_cnn.conv3.bias", zeros(d), true)?;
        let fc = uniform(&mut rng, &[d, d], GLOBAL_FC_GAIN * lecun_bound(d));
        s.insert("fusion.global_cnn.fc.weight", fc, true)?;
        s.insert("fusion.global_cnn.fc.bias", zeros(d), true)?;
    }
    if variant.uses_relation() {
        if variant == Variant::E {
            s.insert("relation.matrix", Tensor::ones(binary.shape().to_vec()), false)?;
        } else {
            s.insert("relation.matrix", binary.clone(), true)?;
        }
    }
    s.insert("relation.initial", binary.clone(), false)?;

    for name in ["wq", "wk", "wv", "wo"] {
        s.insert(&format!("decoder.attn.{name}"), uniform(&mut rng, &[d, d], lecun_bound(d)), true)?;
    }
    s.insert("decoder.output_mlp.fc1.weight", uniform(&mut rng, &[d, d], he_bound(d)), false)?;
    s.insert("decoder.output_mlp.fc1.bias", zeros(d), false)?;
    let fc2 = uniform(&mut rng, &[d, d], OUTPUT_MLP_GAIN * lecun_bound(d));
    s.insert("decoder.output_mlp.fc2.weight", fc2, false)?;
    s.insert("decoder.output_mlp.fc2.bias", zeros(d), false)?;
    s.insert("labels.positive", uniform(&mut rng, &[1, d], EMBEDDING_INIT), true)?;
    s.insert("labels.negative", uniform(&mut rng, &[1, d], EMBEDDING_INIT), true)?;
    Ok(s)
}
