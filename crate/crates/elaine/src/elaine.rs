//! The embedding model: a weight-tied variational autoencoder over per-node
//! feature rows, trained on edge minibatches, with an optional coupled
//! decoder that reconstructs per-edge attribute vectors from endpoint latent
//! codes.
//!
//! One encoder and one feature decoder serve both endpoints of every edge:
//! a minibatch of edges is stacked into `2B` feature rows, pushed through the
//! shared stack, and the per-edge attribute head (when coupled) consumes the
//! concatenated endpoint codes.

use std::io::{Cursor, Read};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ElaineError, Result};
use crate::graph::{EdgeAttributes, Graph};
use crate::neural::{
    kl_unit_gaussian, kl_unit_gaussian_grad, reparameterize, Activation, Adam, CheckpointBlob,
    DenseLayer, GaussianHead, HeadCache, LayerGrad, Mlp, MlpCache, TensorShape,
};
use crate::proximity::{build_similarity_cached, WalkConfig};
use crate::roles::{aggregate_edge_attributes, role_features};

/// Additive pieces of the training objective for one minibatch. The
/// component fields hold the raw, unweighted term values; `total` is the
/// weighted sum actually minimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Penalty-masked feature reconstruction error.
    pub l_n: f64,
    /// Edge-attribute reconstruction error.
    pub l_e: f64,
    /// KL divergence of the latent codes against the unit Gaussian.
    pub l_v: f64,
    /// Sum of absolute weights.
    pub l_l: f64,
    /// Sum of squared weights.
    pub l_r: f64,
    pub total: f64,
}

impl LossTerms {
    fn zeros() -> LossTerms {
        LossTerms {
            l_n: 0.0,
            l_e: 0.0,
            l_v: 0.0,
            l_l: 0.0,
            l_r: 0.0,
            total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_n.is_finite()
            && self.l_e.is_finite()
            && self.l_v.is_finite()
            && self.l_l.is_finite()
            && self.l_r.is_finite()
            && self.total.is_finite()
    }
}

/// How per-edge attribute vectors enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeAttrMode {
    /// Reconstruct them from concatenated endpoint codes through a dedicated
    /// decoder trained jointly with the rest of the stack.
    Coupled,
    /// Average them into the incident nodes' feature rows; no edge decoder.
    NodeAugmented,
    /// Ignore them entirely.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElaineConfig {
    /// Latent code width.
    pub dim: usize,
    /// Encoder hidden widths, input side first. The decoder mirrors them.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the edge-attribute decoder; empty means one linear
    /// layer from the concatenated codes straight to the attribute vector.
    pub edge_decoder_hidden: Vec<usize>,
    /// Weight of the edge-attribute reconstruction term.
    pub alpha1: f64,
    /// Weight of the KL term.
    pub alpha_v: f64,
    /// Weight of the L1 penalty on weights.
    pub alpha_l: f64,
    /// Weight of the L2 penalty on weights.
    pub alpha_r: f64,
    /// Reconstruction penalty applied to feature entries that are nonzero in
    /// the input; zero entries keep penalty 1.
    pub beta: f64,
    pub walks_per_node: usize,
    pub walk_length: usize,
    /// Sample latent codes and apply the KL term; otherwise the code is the
    /// mean and the model is a plain autoencoder.
    pub use_vae: bool,
    /// Use walk visit frequencies for the proximity block; otherwise the
    /// row-normalized binary adjacency.
    pub use_higher_order: bool,
    /// Append the social-role block to the feature rows.
    pub use_roles: bool,
    pub edge_attr_mode: EdgeAttrMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ElaineConfig {
    fn default() -> Self {
        ElaineConfig {
            dim: 128,
            encoder_hidden: vec![500, 300],
            edge_decoder_hidden: vec![],
            alpha1: 1.0,
            alpha_v: 1e-2,
            alpha_l: 1e-6,
            alpha_r: 1e-5,
            beta: 5.0,
            walks_per_node: 10,
            walk_length: 5,
            use_vae: true,
            use_higher_order: true,
            use_roles: true,
            edge_attr_mode: EdgeAttrMode::Coupled,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ElaineConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ElaineError::Config(msg));
        if self.dim == 0 {
            return err("dim must be positive".into());
        }
        if self.encoder_hidden.iter().any(|&h| h == 0)
            || self.edge_decoder_hidden.iter().any(|&h| h == 0)
        {
            return err("hidden layer widths must be positive".into());
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha_v", self.alpha_v),
            ("alpha_l", self.alpha_l),
            ("alpha_r", self.alpha_r),
        ] {
            if !v.is_finite() || v < 0.0 {
                return err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return err(format!(
                "beta must be finite and positive, got {}",
                self.beta
            ));
        }
        if self.walks_per_node == 0 || self.walk_length == 0 {
            return err("walks_per_node and walk_length must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return err(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// The ablation ladder, ordered from the stripped-down baseline to the full
/// model. Each rung re-enables one ingredient on top of the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Plain autoencoder on adjacency rows.
    Ae,
    /// Variational sampling and the KL term.
    Vae,
    /// Walk-based higher-order proximity rows.
    VaeHo,
    /// Social-role block appended to the feature rows.
    VaeHoR,
    /// Edge attributes averaged into node rows.
    NaElaine,
    /// Edge attributes reconstructed through the coupled decoder.
    Elaine,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Ae,
        AblationVariant::Vae,
        AblationVariant::VaeHo,
        AblationVariant::VaeHoR,
        AblationVariant::NaElaine,
        AblationVariant::Elaine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Ae => "AE",
            AblationVariant::Vae => "VAE",
            AblationVariant::VaeHo => "VAE+HO",
            AblationVariant::VaeHoR => "VAE+HO-R",
            AblationVariant::NaElaine => "NA-ELAINE",
            AblationVariant::Elaine => "ELAINE",
        }
    }

    /// Restrict `base` to this rung of the ladder. Everything not named by
    /// the rung is carried over unchanged.
    pub fn apply(&self, base: &ElaineConfig) -> ElaineConfig {
        let mut cfg = base.clone();
        cfg.use_vae = !matches!(self, AblationVariant::Ae);
        cfg.use_higher_order = !matches!(self, AblationVariant::Ae | AblationVariant::Vae);
        cfg.use_roles = matches!(
            self,
            AblationVariant::VaeHoR | AblationVariant::NaElaine | AblationVariant::Elaine
        );
        cfg.edge_attr_mode = match self {
            AblationVariant::NaElaine => EdgeAttrMode::NodeAugmented,
            AblationVariant::Elaine => EdgeAttrMode::Coupled,
            _ => EdgeAttrMode::Off,
        };
        cfg
    }
}

/// Column ranges of the blocks inside one feature row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub similarity: Range<usize>,
    pub roles: Option<Range<usize>>,
    pub attrs: Option<Range<usize>>,
}

/// Per-node input rows `F`, their block layout, and the penalty mask derived
/// from them.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub f: Array2<f64>,
    pub mask: Array2<f64>,
    pub layout: FeatureLayout,
    pub graph_hash: String,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.f.ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.f.nrows()
    }
}

fn normalized_adjacency(g: &Graph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut m = Array2::zeros((n, n));
    for u in 0..n {
        let deg = g.degree(u);
        if deg > 0 {
            let share = 1.0 / deg as f64;
            for &(v, _) in g.neighbors(u) {
                m[[u, v]] = share;
            }
        }
    }
    m
}

/// Assemble the per-node feature rows `[proximity | roles | attrs]` dictated
/// by `cfg`, plus the penalty mask (`beta` where the entry is nonzero, 1
/// elsewhere).
pub fn build_features(
    g: &Graph,
    attrs: Option<&EdgeAttributes>,
    cfg: &ElaineConfig,
    cache_dir: Option<&Path>,
) -> Result<FeatureMatrix> {
    let n = g.num_nodes();
    let sim = if cfg.use_higher_order {
        let walk_cfg = WalkConfig {
            walks_per_node: cfg.walks_per_node,
            walk_length: cfg.walk_length,
            seed: cfg.seed,
        };
        build_similarity_cached(g, &walk_cfg, cache_dir)?.matrix
    } else {
        normalized_adjacency(g)
    };

    let roles = if cfg.use_roles {
        Some(role_features(g).scaled)
    } else {
        None
    };
    let node_attrs = if cfg.edge_attr_mode == EdgeAttrMode::NodeAugmented {
        let attrs = attrs.ok_or_else(|| {
            ElaineError::Validation(
                "node-augmented mode needs edge attributes, none were given".into(),
            )
        })?;
        Some(aggregate_edge_attributes(g, attrs))
    } else {
        None
    };

    let roles_w = roles.as_ref().map_or(0, |r| r.ncols());
    let attrs_w = node_attrs.as_ref().map_or(0, |a| a.ncols());
    let width = n + roles_w + attrs_w;
    let mut f = Array2::zeros((n, width));
    f.slice_mut(s![.., 0..n]).assign(&sim);
    if let Some(r) = &roles {
        f.slice_mut(s![.., n..n + roles_w]).assign(r);
    }
    if let Some(a) = &node_attrs {
        f.slice_mut(s![.., n + roles_w..width]).assign(a);
    }

    let mask = f.mapv(|x| if x > 0.0 { cfg.beta } else { 1.0 });
    let layout = FeatureLayout {
        similarity: 0..n,
        roles: (roles_w > 0).then_some(n..n + roles_w),
        attrs: (attrs_w > 0).then_some(n + roles_w..width),
    };
    Ok(FeatureMatrix {
        f,
        mask,
        layout,
        graph_hash: g.structure_hash(),
    })
}

/// One minibatch, fully materialized: stacked endpoint rows (`B` first
/// endpoints, then `B` second endpoints), their penalty mask, the attribute
/// targets when coupled, and the noise draws when sampling.
pub struct BatchData {
    pub x: Array2<f64>,
    pub mask: Array2<f64>,
    pub attr_targets: Option<Array2<f64>>,
    pub eps: Option<Array2<f64>>,
}

impl BatchData {
    pub fn num_edges(&self) -> usize {
        self.x.nrows() / 2
    }
}

struct ForwardCaches {
    enc: MlpCache,
    head: HeadCache,
    fd: MlpCache,
    f_hat: Array2<f64>,
    ed: Option<(MlpCache, Array2<f64>, Array2<f64>)>,
}

/// Gradients for every parameter tensor, in flattening order.
struct ModelGrads {
    encoder: Vec<LayerGrad>,
    head_mu: LayerGrad,
    head_logvar: LayerGrad,
    feature_decoder: Vec<LayerGrad>,
    edge_decoder: Option<Vec<LayerGrad>>,
}

/// The weight-tied model. One encoder and one feature decoder are shared by
/// both endpoints of every edge; the optional edge decoder maps concatenated
/// endpoint codes to attribute vectors.
#[derive(Debug, Clone)]
pub struct ElaineModel {
    pub config: ElaineConfig,
    pub encoder: Mlp,
    pub head: GaussianHead,
    pub feature_decoder: Mlp,
    pub edge_decoder: Option<Mlp>,
    feature_width: usize,
    attr_dim: usize,
}

impl ElaineModel {
    /// `attr_dim` is the width of per-edge attribute vectors; it is only
    /// used when the config couples them.
    pub fn new(
        config: ElaineConfig,
        feature_width: usize,
        attr_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<ElaineModel> {
        config.validate()?;
        if feature_width == 0 {
            return Err(ElaineError::Validation("feature rows are empty".into()));
        }
        let mut enc_dims = vec![feature_width];
        enc_dims.extend_from_slice(&config.encoder_hidden);
        let encoder = Mlp::new(&enc_dims, Activation::Relu, Activation::Relu, rng);
        let head = GaussianHead::new(*enc_dims.last().unwrap(), config.dim, rng);

        let mut dec_dims = vec![config.dim];
        dec_dims.extend(config.encoder_hidden.iter().rev());
        dec_dims.push(feature_width);
        let feature_decoder = Mlp::new(&dec_dims, Activation::Relu, Activation::Sigmoid, rng);

        let edge_decoder = if config.edge_attr_mode == EdgeAttrMode::Coupled {
            if attr_dim == 0 {
                return Err(ElaineError::Validation(
                    "coupled mode needs edge attributes, none were given".into(),
                ));
            }
            let mut ed_dims = vec![2 * config.dim];
            ed_dims.extend_from_slice(&config.edge_decoder_hidden);
            ed_dims.push(attr_dim);
            Some(Mlp::new(
                &ed_dims,
                Activation::Relu,
                Activation::Sigmoid,
                rng,
            ))
        } else {
            None
        };

        Ok(ElaineModel {
            config,
            encoder,
            head,
            feature_decoder,
            edge_decoder,
            feature_width,
            attr_dim,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.head.param_count()
            + self.feature_decoder.param_count()
            + self.edge_decoder.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.append_params(&mut out);
        self.head.append_params(&mut out);
        self.feature_decoder.append_params(&mut out);
        if let Some(ed) = &self.edge_decoder {
            ed.append_params(&mut out);
        }
        out
    }

    pub fn assign_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut src = params;
        self.encoder.read_params(&mut src);
        self.head.read_params(&mut src);
        self.feature_decoder.read_params(&mut src);
        if let Some(ed) = &mut self.edge_decoder {
            ed.read_params(&mut src);
        }
        assert!(src.is_empty());
    }

    /// Shape table in flattening order, for checkpoint validation.
    pub fn tensor_shapes(&self) -> Vec<TensorShape> {
        let mut shapes = Vec::new();
        let push_layers = |layers: &[DenseLayer], shapes: &mut Vec<TensorShape>| {
            for l in layers {
                shapes.push(TensorShape::Matrix(l.w.nrows(), l.w.ncols()));
                shapes.push(TensorShape::Vector(l.b.len()));
            }
        };
        push_layers(&self.encoder.layers, &mut shapes);
        push_layers(std::slice::from_ref(&self.head.mu), &mut shapes);
        push_layers(std::slice::from_ref(&self.head.logvar), &mut shapes);
        push_layers(&self.feature_decoder.layers, &mut shapes);
        if let Some(ed) = &self.edge_decoder {
            push_layers(&ed.layers, &mut shapes);
        }
        shapes
    }

    /// Build one minibatch from edge indices into `features`' node rows.
    /// `eps` draws happen here so a training step is otherwise deterministic.
    pub fn prepare_batch(
        &self,
        features: &FeatureMatrix,
        edges: &[(usize, usize)],
        attrs: Option<&EdgeAttributes>,
        rng: &mut impl Rng,
    ) -> BatchData {
        let b = edges.len();
        assert!(b > 0, "empty minibatch");
        let width = features.width();
        let mut x = Array2::zeros((2 * b, width));
        let mut mask = Array2::zeros((2 * b, width));
        for (k, &(i, j)) in edges.iter().enumerate() {
            x.row_mut(k).assign(&features.f.row(i));
            x.row_mut(b + k).assign(&features.f.row(j));
            mask.row_mut(k).assign(&features.mask.row(i));
            mask.row_mut(b + k).assign(&features.mask.row(j));
        }
        let attr_targets = if self.edge_decoder.is_some() {
            let attrs = attrs.expect("coupled mode requires edge attributes");
            let mut t = Array2::zeros((b, self.attr_dim));
            for (k, &(i, j)) in edges.iter().enumerate() {
                if let Some(vals) = attrs.get(i, j) {
                    for (c, &v) in vals.iter().enumerate() {
                        t[[k, c]] = v;
                    }
                }
            }
            Some(t)
        } else {
            None
        };
        let eps = self.config.use_vae.then(|| {
            Array2::from_shape_fn((2 * b, self.config.dim), |_| rng.sample(StandardNormal))
        });
        BatchData {
            x,
            mask,
            attr_targets,
            eps,
        }
    }

    fn weight_penalties(&self) -> (f64, f64) {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        let mut scan = |layers: &[DenseLayer]| {
            for l in layers {
                for &w in l.w.iter() {
                    l1 += w.abs();
                    l2 += w * w;
                }
            }
        };
        scan(&self.encoder.layers);
        scan(std::slice::from_ref(&self.head.mu));
        scan(std::slice::from_ref(&self.head.logvar));
        scan(&self.feature_decoder.layers);
        if let Some(ed) = &self.edge_decoder {
            scan(&ed.layers);
        }
        (l1, l2)
    }

    fn forward_batch(&self, batch: &BatchData) -> (LossTerms, ForwardCaches) {
        let b = batch.num_edges();
        let (h, enc) = self.encoder.forward(&batch.x);
        let head = self.head.project(&h);
        let z = if self.config.use_vae {
            reparameterize(
                &head.mu,
                &head.logvar,
                batch.eps.as_ref().expect("sampling requires eps"),
            )
        } else {
            head.mu.clone()
        };
        let (f_hat, fd) = self.feature_decoder.forward(&z);

        let l_n: f64 = f_hat
            .iter()
            .zip(batch.x.iter())
            .zip(batch.mask.iter())
            .map(|((&p, &t), &m)| {
                let d = (p - t) * m;
                d * d
            })
            .sum();

        let (l_e, ed) = match &self.edge_decoder {
            Some(dec) => {
                let mut cat = Array2::zeros((b, 2 * self.config.dim));
                cat.slice_mut(s![.., 0..self.config.dim])
                    .assign(&z.slice(s![0..b, ..]));
                cat.slice_mut(s![.., self.config.dim..])
                    .assign(&z.slice(s![b.., ..]));
                let (e_hat, cache) = dec.forward(&cat);
                let targets = batch
                    .attr_targets
                    .as_ref()
                    .expect("coupled batch carries attribute targets");
                let l_e: f64 = e_hat
                    .iter()
                    .zip(targets.iter())
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum();
                (l_e, Some((cache, cat, e_hat)))
            }
            None => (0.0, None),
        };

        let l_v = if self.config.use_vae {
            kl_unit_gaussian(&head.mu, &head.logvar)
        } else {
            0.0
        };
        let (l_l, l_r) = self.weight_penalties();

        let c = &self.config;
        let total = l_n + c.alpha1 * l_e + c.alpha_v * l_v + c.alpha_l * l_l + c.alpha_r * l_r;
        let terms = LossTerms {
            l_n,
            l_e,
            l_v,
            l_l,
            l_r,
            total,
        };
        let caches = ForwardCaches {
            enc,
            head,
            fd,
            f_hat,
            ed,
        };
        (terms, caches)
    }

    /// Loss of one batch without keeping caches; errors on non-finite terms.
    pub fn loss_terms(&self, batch: &BatchData) -> Result<LossTerms> {
        let (terms, _) = self.forward_batch(batch);
        if !terms.is_finite() {
            return Err(ElaineError::Validation(format!(
                "loss is not finite: {terms:?}"
            )));
        }
        Ok(terms)
    }

    fn backward_batch(&self, batch: &BatchData, caches: &ForwardCaches) -> ModelGrads {
        let b = batch.num_edges();
        let c = &self.config;
        let d = c.dim;

        // d L_n / d f_hat = 2 (f_hat - x) * mask^2; the mask multiplies the
        // residual inside the square.
        let mut df_hat = Array2::zeros(caches.f_hat.raw_dim());
        ndarray::Zip::from(&mut df_hat)
            .and(&caches.f_hat)
            .and(&batch.x)
            .and(&batch.mask)
            .for_each(|g, &p, &t, &m| *g = 2.0 * (p - t) * m * m);
        let (mut dz, fd_grads) = self.feature_decoder.backward(&caches.fd, &df_hat);

        let ed_grads = caches.ed.as_ref().map(|(cache, _cat, e_hat)| {
            let targets = batch.attr_targets.as_ref().unwrap();
            let de_hat = e_hat
                .iter()
                .zip(targets.iter())
                .map(|(&p, &t)| 2.0 * c.alpha1 * (p - t))
                .collect::<Vec<_>>();
            let de_hat = Array2::from_shape_vec(e_hat.raw_dim(), de_hat).unwrap();
            let dec = self.edge_decoder.as_ref().unwrap();
            let (dcat, grads) = dec.backward(cache, &de_hat);
            let mut dz_first = dz.slice_mut(s![0..b, ..]);
            dz_first += &dcat.slice(s![.., 0..d]);
            let mut dz_second = dz.slice_mut(s![b.., ..]);
            dz_second += &dcat.slice(s![.., d..]);
            grads
        });

        let (dmu, dlogvar) = if c.use_vae {
            let eps = batch.eps.as_ref().unwrap();
            // z = mu + exp(lv / 2) * eps
            let dlv_rep = &dz * eps * &caches.head.logvar.mapv(|l| 0.5 * (0.5 * l).exp());
            let (kl_mu, kl_lv) = kl_unit_gaussian_grad(&caches.head.mu, &caches.head.logvar);
            (
                dz + kl_mu.mapv(|v| c.alpha_v * v),
                dlv_rep + kl_lv.mapv(|v| c.alpha_v * v),
            )
        } else {
            let zero = Array2::zeros(dz.raw_dim());
            (dz, zero)
        };

        let (dh, head_mu, head_logvar) =
            self.head
                .backward(caches.enc.output(), &caches.head, &dmu, &dlogvar);
        let (_, enc_grads) = self.encoder.backward(&caches.enc, &dh);

        let mut grads = ModelGrads {
            encoder: enc_grads,
            head_mu,
            head_logvar,
            feature_decoder: fd_grads,
            edge_decoder: ed_grads,
        };
        self.apply_weight_regularization(&mut grads);
        grads
    }

    /// Add `alpha_l * sign(w) + 2 alpha_r * w` to every weight gradient.
    /// Biases are not penalized; the L1 subgradient at zero is zero.
    fn apply_weight_regularization(&self, grads: &mut ModelGrads) {
        let c = &self.config;
        if c.alpha_l == 0.0 && c.alpha_r == 0.0 {
            return;
        }
        let reg = |layers: &[DenseLayer], grads: &mut [LayerGrad]| {
            for (l, g) in layers.iter().zip(grads.iter_mut()) {
                ndarray::Zip::from(&mut g.dw).and(&l.w).for_each(|dw, &w| {
                    *dw += c.alpha_l * w.signum() * (w != 0.0) as u8 as f64 + 2.0 * c.alpha_r * w;
                });
            }
        };
        reg(&self.encoder.layers, &mut grads.encoder);
        reg(
            std::slice::from_ref(&self.head.mu),
            std::slice::from_mut(&mut grads.head_mu),
        );
        reg(
            std::slice::from_ref(&self.head.logvar),
            std::slice::from_mut(&mut grads.head_logvar),
        );
        reg(&self.feature_decoder.layers, &mut grads.feature_decoder);
        if let (Some(ed), Some(g)) = (&self.edge_decoder, &mut grads.edge_decoder) {
            reg(&ed.layers, g);
        }
    }

    /// Loss and flat gradient of one batch, in [`flatten_params`] order.
    pub fn loss_and_gradient(&self, batch: &BatchData) -> (LossTerms, Vec<f64>) {
        let (terms, caches) = self.forward_batch(batch);
        let grads = self.backward_batch(batch, &caches);
        let mut flat = Vec::with_capacity(self.param_count());
        for g in &grads.encoder {
            g.append_params(&mut flat);
        }
        grads.head_mu.append_params(&mut flat);
        grads.head_logvar.append_params(&mut flat);
        for g in &grads.feature_decoder {
            g.append_params(&mut flat);
        }
        if let Some(gs) = &grads.edge_decoder {
            for g in gs {
                g.append_params(&mut flat);
            }
        }
        debug_assert_eq!(flat.len(), self.param_count());
        (terms, flat)
    }

    /// Run the training loop: shuffle edges each epoch, walk them in
    /// `batch_size` chunks, and take one Adam step per chunk. Returns the
    /// per-epoch mean loss terms. Non-finite loss aborts with the history
    /// collected so far.
    pub fn train(
        &mut self,
        features: &FeatureMatrix,
        g: &Graph,
        attrs: Option<&EdgeAttributes>,
        rng: &mut impl Rng,
    ) -> Result<Vec<LossTerms>> {
        if g.num_edges() == 0 {
            return Err(ElaineError::Validation(
                "training needs at least one edge".into(),
            ));
        }
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(u, v, _)| (u, v)).collect();
        let mut order: Vec<usize> = (0..edges.len()).collect();
        let mut params = self.flatten_params();
        let mut adam = Adam::new(self.config.learning_rate, params.len());
        let mut history: Vec<LossTerms> = Vec::with_capacity(self.config.epochs);

        for epoch in 0..self.config.epochs {
            order.shuffle(rng);
            let mut acc = LossTerms::zeros();
            let mut steps = 0usize;
            for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let batch_edges: Vec<(usize, usize)> = chunk.iter().map(|&k| edges[k]).collect();
                let batch = self.prepare_batch(features, &batch_edges, attrs, rng);
                let (terms, grads) = self.loss_and_gradient(&batch);
                if !terms.is_finite() {
                    return Err(ElaineError::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite loss {terms:?}"),
                        history,
                    });
                }
                adam.step(&mut params, &grads);
                self.assign_params(&params);
                acc.l_n += terms.l_n;
                acc.l_e += terms.l_e;
                acc.l_v += terms.l_v;
                acc.l_l += terms.l_l;
                acc.l_r += terms.l_r;
                acc.total += terms.total;
                steps += 1;
            }
            let k = steps as f64;
            history.push(LossTerms {
                l_n: acc.l_n / k,
                l_e: acc.l_e / k,
                l_v: acc.l_v / k,
                l_l: acc.l_l / k,
                l_r: acc.l_r / k,
                total: acc.total / k,
            });
        }
        Ok(history)
    }

    /// Latent means for every node row in `features`.
    pub fn encode_means(&self, features: &FeatureMatrix) -> Array2<f64> {
        let h = self.encoder.infer(&features.f);
        self.head.project(&h).mu
    }
}

/// Node embedding: one latent-mean row per node.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub y: Array2<f64>,
    pub graph_hash: String,
}

impl Embedding {
    pub fn num_nodes(&self) -> usize {
        self.y.nrows()
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }
}

/// A model plus the feature rows it was fitted to.
pub struct TrainedModel {
    pub model: ElaineModel,
    pub features: FeatureMatrix,
    pub history: Vec<LossTerms>,
}

/// Build features, initialize, and fit in one call.
pub fn train_model(
    g: &Graph,
    attrs: Option<&EdgeAttributes>,
    cfg: &ElaineConfig,
    cache_dir: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.edge_attr_mode != EdgeAttrMode::Off && attrs.is_none() {
        return Err(ElaineError::Validation(format!(
            "edge attribute mode {:?} needs an attribute table",
            cfg.edge_attr_mode
        )));
    }
    let features = build_features(g, attrs, cfg, cache_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ElaineModel::new(
        cfg.clone(),
        features.width(),
        attrs.map_or(0, EdgeAttributes::dim),
        &mut rng,
    )?;
    let history = model.train(&features, g, attrs, &mut rng)?;
    Ok(TrainedModel {
        model,
        features,
        history,
    })
}

impl TrainedModel {
    pub fn embed(&self) -> Embedding {
        Embedding {
            y: self.model.encode_means(&self.features),
            graph_hash: self.features.graph_hash.clone(),
        }
    }

    /// Scorer over node pairs: decode every node's latent mean back to a
    /// feature row and read the proximity block as edge evidence.
    pub fn edge_scorer(&self) -> EdgeScorer {
        let y = self.model.encode_means(&self.features);
        let f_hat = self.model.feature_decoder.infer(&y);
        let sim = self.features.layout.similarity.clone();
        EdgeScorer {
            s_hat: f_hat.slice(s![.., sim]).to_owned(),
        }
    }

    /// Reconstructed attribute vector for the unordered pair `{u, v}`.
    /// Requires the coupled decoder.
    pub fn predict_edge_attributes(&self, u: usize, v: usize) -> Vec<f64> {
        let dec = self
            .edge_decoder()
            .expect("edge attribute prediction requires the coupled decoder");
        assert_ne!(u, v, "self-pairs have no attributes");
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        let y = self.model.encode_means(&self.features);
        let d = self.model.config.dim;
        let mut cat = Array2::zeros((1, 2 * d));
        cat.slice_mut(s![0, 0..d]).assign(&y.row(a));
        cat.slice_mut(s![0, d..]).assign(&y.row(b));
        dec.infer(&cat).row(0).to_vec()
    }

    pub fn edge_decoder(&self) -> Option<&Mlp> {
        self.model.edge_decoder.as_ref()
    }
}

/// Symmetric pair scores from the decoded proximity block.
pub struct EdgeScorer {
    s_hat: Array2<f64>,
}

impl EdgeScorer {
    pub fn score(&self, u: usize, v: usize) -> f64 {
        assert_ne!(u, v, "self-pairs are not scored");
        0.5 * (self.s_hat[[u, v]] + self.s_hat[[v, u]])
    }
}

/// Write an embedding as text: a `n d` header line, then one
/// space-separated row per node starting with its id. Values carry 17
/// significant digits, enough to round-trip f64 exactly.
pub fn save_embedding(path: impl AsRef<Path>, emb: &Embedding) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| ElaineError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| ElaineError::io(path, e);
    writeln!(w, "{} {}", emb.num_nodes(), emb.dim()).map_err(io_err)?;
    for (i, row) in emb.y.outer_iter().enumerate() {
        write!(w, "{i}").map_err(io_err)?;
        for &v in row.iter() {
            write!(w, " {v:.16e}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<Embedding> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ElaineError::io(path, e))?;
    let shown = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ElaineError::parse(&shown, 1, "empty embedding file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ElaineError::parse(&shown, 1, format!("bad header: {e}")))?;
    if dims.len() != 2 {
        return Err(ElaineError::parse(&shown, 1, "header must be `n d`"));
    }
    let (n, d) = (dims[0], dims[1]);
    let mut y = Array2::zeros((n, d));
    let mut seen = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|e| ElaineError::parse(&shown, lineno, format!("bad node id: {e}")))?;
        if id >= n {
            return Err(ElaineError::parse(
                &shown,
                lineno,
                format!("node id {id} out of range for {n} nodes"),
            ));
        }
        let vals: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ElaineError::parse(&shown, lineno, format!("bad value: {e}")))?;
        if vals.len() != d {
            return Err(ElaineError::parse(
                &shown,
                lineno,
                format!("expected {d} values, found {}", vals.len()),
            ));
        }
        for (c, v) in vals.into_iter().enumerate() {
            y[[id, c]] = v;
        }
        seen += 1;
    }
    if seen != n {
        return Err(ElaineError::parse(
            &shown,
            1,
            format!("header promises {n} rows, file has {seen}"),
        ));
    }
    Ok(Embedding {
        y,
        graph_hash: String::new(),
    })
}

const MODEL_MAGIC: &[u8; 4] = b"ELMD";
const MODEL_VERSION: u32 = 1;

/// Serialize a fitted model: config as TOML, the feature/attribute widths
/// and graph hash needed to rebuild the stack, then the parameter blob.
pub fn save_model(path: impl AsRef<Path>, trained: &TrainedModel) -> Result<()> {
    let path = path.as_ref();
    let model = &trained.model;
    let config_toml = toml::to_string(&model.config)
        .map_err(|e| ElaineError::Checkpoint(format!("config serialization failed: {e}")))?;
    let blob = CheckpointBlob {
        shapes: model.tensor_shapes(),
        params: model.flatten_params(),
        adam: None,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.write_u32::<LittleEndian>(MODEL_VERSION).unwrap();
    let cfg_bytes = config_toml.as_bytes();
    buf.write_u64::<LittleEndian>(cfg_bytes.len() as u64)
        .unwrap();
    buf.extend_from_slice(cfg_bytes);
    buf.write_u64::<LittleEndian>(model.feature_width as u64)
        .unwrap();
    buf.write_u64::<LittleEndian>(model.attr_dim as u64)
        .unwrap();
    let hash = trained.features.graph_hash.as_bytes();
    buf.write_u64::<LittleEndian>(hash.len() as u64).unwrap();
    buf.extend_from_slice(hash);
    buf.extend_from_slice(&blob.to_bytes()?);
    std::fs::write(path, buf).map_err(|e| ElaineError::io(path, e))
}

/// Load a model checkpoint. Returns the model and the structure hash of the
/// graph it was fitted to.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ElaineModel, String)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| ElaineError::io(path, e))?;
    let bad = |msg: &str| ElaineError::Checkpoint(msg.to_string());
    let mut cur = Cursor::new(&data);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| bad("truncated model header"))?;
    if &magic != MODEL_MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated model header"))?;
    if version != MODEL_VERSION {
        return Err(ElaineError::Checkpoint(format!(
            "unsupported model version {version}"
        )));
    }
    let cfg_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| bad("truncated config block"))? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    cur.read_exact(&mut cfg_bytes)
        .map_err(|_| bad("truncated config block"))?;
    let config: ElaineConfig = toml::from_str(
        std::str::from_utf8(&cfg_bytes).map_err(|_| bad("config block is not UTF-8"))?,
    )
    .map_err(|e| ElaineError::Checkpoint(format!("bad embedded config: {e}")))?;
    let feature_width = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| bad("truncated width block"))? as usize;
    let attr_dim = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| bad("truncated width block"))? as usize;
    let hash_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| bad("truncated hash block"))? as usize;
    let mut hash_bytes = vec![0u8; hash_len];
    cur.read_exact(&mut hash_bytes)
        .map_err(|_| bad("truncated hash block"))?;
    let graph_hash = String::from_utf8(hash_bytes).map_err(|_| bad("hash block is not UTF-8"))?;
    let blob = CheckpointBlob::from_bytes(&data[cur.position() as usize..])?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ElaineModel::new(config, feature_width, attr_dim, &mut rng)?;
    if model.tensor_shapes() != blob.shapes {
        return Err(bad("parameter shapes do not match the embedded config"));
    }
    model.assign_params(&blob.params);
    Ok((model, graph_hash))
}
