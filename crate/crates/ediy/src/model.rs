//! Network topology: shared backbone encoder, instance-level (global) and
//! region-level (local) projectors, the online predictor, the EMA target
//! copy, and the frozen teacher.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, VarId};
use crate::nn::layers::{forward_layers, init_layer_params, Binding, Layer};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;
use crate::rng::{self, stream};

pub const BACKBONE: &str = "backbone.";
pub const GLOBAL_PROJ: &str = "global_proj.";
pub const LOCAL_PROJ: &str = "local_proj.";
pub const PREDICTOR: &str = "predictor.";

/// One backbone stage: a 3x3 convolution (no bias) followed by batch norm
/// and relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub out_channels: usize,
    pub stride: usize,
}

/// Backbone description; the final stage's feature map is the region source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub stages: Vec<EncoderStage>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 3,
            stages: vec![
                EncoderStage { out_channels: 16, stride: 2 },
                EncoderStage { out_channels: 32, stride: 2 },
                EncoderStage { out_channels: 64, stride: 2 },
                EncoderStage { out_channels: 128, stride: 1 },
            ],
        }
    }
}

impl EncoderSpec {
    /// Channels of the final feature map.
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map(|s| s.out_channels).unwrap_or(self.in_channels)
    }

    /// Region grid for a given input size. The stride product must divide
    /// the input and the grid must hold at least 4 regions.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let stride_product: usize = self.stages.iter().map(|s| s.stride).product();
        if stride_product == 0 || height % stride_product != 0 || width % stride_product != 0 {
            return Err(Error::Config(format!(
                "stride product {stride_product} does not divide input {height}x{width}"
            )));
        }
        let (h, w) = (height / stride_product, width / stride_product);
        if h * w < 4 {
            return Err(Error::Config(format!(
                "region grid {h}x{w} holds fewer than 4 regions"
            )));
        }
        Ok((h, w))
    }
}

/// Hyper-parameters of the network family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// Hidden width of both projectors and the predictor.
    pub proj_hidden: usize,
    /// Output width of both projectors (instance and region features share
    /// it so global-vs-region ablations stay comparable).
    pub proj_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderSpec::default(),
            proj_hidden: 256,
            proj_dim: 64,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn backbone_layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut in_ch = self.encoder.in_channels;
        for (i, stage) in self.encoder.stages.iter().enumerate() {
            layers.push(Layer::Conv2d {
                name: format!("stage{i}.conv"),
                in_ch,
                out_ch: stage.out_channels,
                kernel: 3,
                stride: stage.stride,
                pad: 1,
                bias: false,
            });
            layers.push(Layer::BatchNorm {
                name: format!("stage{i}.bn"),
                features: stage.out_channels,
                eps: self.bn_eps,
                momentum: self.bn_momentum,
            });
            layers.push(Layer::Relu);
            in_ch = stage.out_channels;
        }
        layers
    }

    /// linear -> batch norm -> relu -> linear, as used by both projectors.
    pub fn projector_layers(&self, in_dim: usize) -> Vec<Layer> {
        vec![
            Layer::Linear {
                name: "fc1".into(),
                in_dim,
                out_dim: self.proj_hidden,
                bias: true,
            },
            Layer::BatchNorm {
                name: "bn".into(),
                features: self.proj_hidden,
                eps: self.bn_eps,
                momentum: self.bn_momentum,
            },
            Layer::Relu,
            Layer::Linear {
                name: "fc2".into(),
                in_dim: self.proj_hidden,
                out_dim: self.proj_dim,
                bias: true,
            },
        ]
    }

    pub fn predictor_layers(&self) -> Vec<Layer> {
        self.projector_layers(self.proj_dim)
    }
}

/// Which network a forward pass runs through. Only the online branch is
/// trainable; only the online branch carries a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchRole {
    Online,
    Target,
    Teacher,
}

/// Parameter source for forwards: the online branch registers trainable
/// leaves, target and teacher enter as stop-gradient constants in eval mode.
pub struct BranchRef<'a> {
    pub params: &'a ParamSet<f32>,
    pub role: BranchRole,
    /// Batch-statistics mode for batch norm; forced off for target/teacher.
    pub training: bool,
}

impl<'a> BranchRef<'a> {
    pub fn online(params: &'a ParamSet<f32>, training: bool) -> Self {
        BranchRef { params, role: BranchRole::Online, training }
    }

    pub fn target(params: &'a ParamSet<f32>) -> Self {
        BranchRef { params, role: BranchRole::Target, training: false }
    }

    pub fn teacher(params: &'a ParamSet<f32>) -> Self {
        BranchRef { params, role: BranchRole::Teacher, training: false }
    }

    fn binding(&self) -> Binding<'a, f32> {
        match self.role {
            BranchRole::Online => Binding::Trainable(self.params),
            _ => Binding::Frozen(self.params),
        }
    }
}

/// Backbone forward; returns the final feature map `(N, C_f, H_f, W_f)`.
pub fn encode(
    g: &mut Graph<f32>,
    branch: &BranchRef,
    cfg: &ModelConfig,
    images: VarId,
) -> Result<VarId> {
    forward_layers(
        g,
        &branch.binding(),
        images,
        &cfg.backbone_layers(),
        BACKBONE,
        branch.training,
    )
}

/// Global average pool over the grid, then the instance projector: `(N, D)`.
pub fn project_global(
    g: &mut Graph<f32>,
    branch: &BranchRef,
    cfg: &ModelConfig,
    feature_map: VarId,
) -> Result<VarId> {
    let pooled = g.global_avg_pool(feature_map)?;
    forward_layers(
        g,
        &branch.binding(),
        pooled,
        &cfg.projector_layers(cfg.encoder.feature_channels()),
        GLOBAL_PROJ,
        branch.training,
    )
}

/// The region projector applied independently at every spatial cell:
/// `(N*H_f*W_f, D)`, rows in row-major grid order within each image.
pub fn project_local(
    g: &mut Graph<f32>,
    branch: &BranchRef,
    cfg: &ModelConfig,
    feature_map: VarId,
) -> Result<VarId> {
    let rows = g.map_to_rows(feature_map)?;
    forward_layers(
        g,
        &branch.binding(),
        rows,
        &cfg.projector_layers(cfg.encoder.feature_channels()),
        LOCAL_PROJ,
        branch.training,
    )
}

/// Online predictor head on instance features. Only valid on the online
/// branch.
pub fn predict(
    g: &mut Graph<f32>,
    branch: &BranchRef,
    cfg: &ModelConfig,
    globals: VarId,
) -> Result<VarId> {
    if branch.role != BranchRole::Online {
        return Err(Error::Usage(
            "predictor exists only on the online branch".into(),
        ));
    }
    forward_layers(
        g,
        &branch.binding(),
        globals,
        &cfg.predictor_layers(),
        PREDICTOR,
        branch.training,
    )
}

/// Where a set of region features came from; the losses validate this to
/// keep gradient routing honest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Online,
    Target,
    Teacher,
}

/// Region vectors of one view: one row per spatial cell of the final
/// feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet {
    pub rows: Tensor<f32>,
    pub source: FeatureSource,
}

impl RegionFeatureSet {
    pub fn new(rows: Tensor<f32>, source: FeatureSource) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::dim("region_features", "rows must be rank-2"));
        }
        Ok(RegionFeatureSet { rows, source })
    }

    pub fn count(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// Instance-level feature vector(s); a `(D,)` vector or an `(N, D)` batch.
pub type GlobalFeature = Tensor<f32>;

/// Online parameters, EMA target copy, frozen teacher, and the step counter.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub online: ParamSet<f32>,
    pub target: ParamSet<f32>,
    pub teacher: Option<ParamSet<f32>>,
    pub tau: f64,
    pub step: u64,
}

impl ModelState {
    /// Fresh state: online initialized from the seed, target starting as an
    /// exact copy (minus the predictor), optional frozen teacher backbone.
    pub fn init(cfg: &ModelConfig, seed: u64, tau: f64, teacher: Option<ParamSet<f32>>) -> Result<Self> {
        let mut online = ParamSet::new();
        let mut r = rng::rng_from(&[seed, stream::INIT]);
        init_layer_params(&mut online, &cfg.backbone_layers(), BACKBONE, &mut r);
        init_layer_params(
            &mut online,
            &cfg.projector_layers(cfg.encoder.feature_channels()),
            GLOBAL_PROJ,
            &mut r,
        );
        init_layer_params(
            &mut online,
            &cfg.projector_layers(cfg.encoder.feature_channels()),
            LOCAL_PROJ,
            &mut r,
        );
        init_layer_params(&mut online, &cfg.predictor_layers(), PREDICTOR, &mut r);
        let target = target_from_online(&online);
        if let Some(t) = &teacher {
            validate_teacher(t)?;
        }
        Ok(ModelState {
            online,
            target,
            teacher,
            tau,
            step: 0,
        })
    }

    pub fn teacher(&self) -> Result<&ParamSet<f32>> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Config("no teacher loaded in model state".into()))
    }

    /// Structural invariant: target keys equal online keys minus the
    /// predictor's.
    pub fn validate(&self) -> Result<()> {
        for name in self.online.names() {
            let in_target = self.target.contains(name);
            let is_pred = name.starts_with(PREDICTOR);
            if is_pred && in_target {
                return Err(Error::Structure(format!("target holds predictor key {name}")));
            }
            if !is_pred && !in_target {
                return Err(Error::Structure(format!("target missing key {name}")));
            }
        }
        for name in self.target.names() {
            if !self.online.contains(name) {
                return Err(Error::Structure(format!("target has extra key {name}")));
            }
        }
        Ok(())
    }
}

/// Target network parameters: everything online except the predictor.
pub fn target_from_online(online: &ParamSet<f32>) -> ParamSet<f32> {
    online
        .iter()
        .filter(|(name, _)| !name.starts_with(PREDICTOR))
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect()
}

fn validate_teacher(teacher: &ParamSet<f32>) -> Result<()> {
    if teacher.is_empty() || !teacher.names().any(|n| n.starts_with(BACKBONE)) {
        return Err(Error::Config("teacher parameter set holds no backbone keys".into()));
    }
    Ok(())
}

/// Stacks images into an `(N, 3, H, W)` batch.
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::dim(
                "image_batch",
                format!("mixed sizes {}x{} vs {h}x{w}", img.height(), img.width()),
            ));
        }
        data.extend_from_slice(img.pixels().data());
    }
    Ok(Tensor::from_parts(vec![images.len(), 3, h, w], data))
}

/// Teacher regions for a batch of views: eval-mode backbone forward, then
/// each final-map cell's raw channel vector, L2-normalized (zero rows stay
/// zero under the epsilon guard). Never contributes gradients.
pub fn teacher_regions_batch(
    teacher: &ParamSet<f32>,
    cfg: &ModelConfig,
    views: &[&Image],
) -> Result<Vec<RegionFeatureSet>> {
    validate_teacher(teacher)?;
    let batch = image_batch(views)?;
    let n_imgs = views.len();
    let mut g = Graph::new();
    let x = g.input(batch);
    let branch = BranchRef::teacher(teacher);
    let fmap = encode(&mut g, &branch, cfg, x)?;
    let rows = g.map_to_rows(fmap)?;
    let rows_t = g.value(rows);
    let per_image = rows_t.shape()[0] / n_imgs;
    let dim = rows_t.shape()[1];
    let eps = crate::nn::COSINE_EPS as f32;
    let mut out = Vec::with_capacity(n_imgs);
    for i in 0..n_imgs {
        let mut data = rows_t.data()[i * per_image * dim..(i + 1) * per_image * dim].to_vec();
        for row in data.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
            for v in row {
                *v /= norm;
            }
        }
        out.push(RegionFeatureSet::new(
            Tensor::from_parts(vec![per_image, dim], data),
            FeatureSource::Teacher,
        )?);
    }
    Ok(out)
}

/// Teacher regions for one view.
pub fn teacher_regions(
    teacher: &ParamSet<f32>,
    cfg: &ModelConfig,
    view: &Image,
) -> Result<RegionFeatureSet> {
    Ok(teacher_regions_batch(teacher, cfg, &[view])?.remove(0))
}

/// Eval-mode backbone feature map for a batch (running statistics, no
/// gradients); serves diagnostics, probing and saliency.
pub fn eval_feature_map(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    batch: Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.input(batch);
    let branch = BranchRef {
        params,
        role: BranchRole::Target, // frozen, eval-mode semantics
        training: false,
    };
    let fmap = encode(&mut g, &branch, cfg, x)?;
    Ok(g.value(fmap).clone())
}

/// Eval-mode local projector rows for a batch: `(N*n, D)`.
pub fn eval_local_rows(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    batch: Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.input(batch);
    let branch = BranchRef {
        params,
        role: BranchRole::Target,
        training: false,
    };
    let fmap = encode(&mut g, &branch, cfg, x)?;
    let rows = project_local(&mut g, &branch, cfg, fmap)?;
    Ok(g.value(rows).clone())
}

/// Eval-mode global projector output for a batch: `(N, D)`.
pub fn eval_global_features(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    batch: Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.input(batch);
    let branch = BranchRef {
        params,
        role: BranchRole::Target,
        training: false,
    };
    let fmap = encode(&mut g, &branch, cfg, x)?;
    let globals = project_global(&mut g, &branch, cfg, fmap)?;
    Ok(g.value(globals).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_image(value: f32) -> Image {
        Image::new(Tensor::filled(&[3, 32, 32], value), None).unwrap()
    }

    #[test]
    fn default_grid_is_4x4() {
        let spec = EncoderSpec::default();
        assert_eq!(spec.grid(32, 32).unwrap(), (4, 4));
        assert_eq!(spec.feature_channels(), 128);
        // indivisible input size
        assert!(spec.grid(30, 30).is_err());
        // too few regions
        assert!(spec.grid(8, 8).is_err());
    }

    #[test]
    fn zero_weight_backbone_gives_zero_feature_map() {
        let cfg = ModelConfig::default();
        let mut params = ParamSet::new();
        let mut r = rng::rng_from(&[1]);
        init_layer_params(&mut params, &cfg.backbone_layers(), BACKBONE, &mut r);
        for (name, t) in params.iter_mut() {
            if name.ends_with(".weight") {
                t.data_mut().fill(0.0);
            }
        }
        let img = flat_image(0.7);
        let fmap = eval_feature_map(&params, &cfg, image_batch(&[&img]).unwrap()).unwrap();
        assert_eq!(fmap.shape(), &[1, 128, 4, 4]);
        assert!(fmap.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatially_constant_map_projects_to_identical_rows() {
        let cfg = ModelConfig::default();
        let mut params = ParamSet::new();
        let mut r = rng::rng_from(&[2]);
        init_layer_params(
            &mut params,
            &cfg.projector_layers(cfg.encoder.feature_channels()),
            LOCAL_PROJ,
            &mut r,
        );
        let fmap = Tensor::filled(&[1, 128, 4, 4], 0.3);
        let mut g = Graph::new();
        let x = g.input(fmap);
        let branch = BranchRef::target(&params);
        let rows = project_local(&mut g, &branch, &cfg, x).unwrap();
        let rows = g.value(rows);
        assert_eq!(rows.shape(), &[16, 64]);
        let first = rows.row(0).to_vec();
        for i in 1..16 {
            assert_eq!(rows.row(i), first.as_slice());
        }
    }

    #[test]
    fn local_projection_matches_single_cell_mlp() {
        // row j of the local projection equals the projector applied to that
        // cell's channel vector alone
        let cfg = ModelConfig::default();
        let mut params = ParamSet::new();
        let mut r = rng::rng_from(&[3]);
        init_layer_params(
            &mut params,
            &cfg.projector_layers(cfg.encoder.feature_channels()),
            LOCAL_PROJ,
            &mut r,
        );
        use rand::Rng;
        let mut rr = rng::rng_from(&[4]);
        let fmap_data: Vec<f32> = (0..128 * 16).map(|_| rr.gen_range(-1.0..1.0)).collect();
        let fmap = Tensor::new(vec![1, 128, 4, 4], fmap_data.clone()).unwrap();

        let branch = BranchRef::target(&params);
        let mut g = Graph::new();
        let x = g.input(fmap);
        let rows = project_local(&mut g, &branch, &cfg, x).unwrap();
        let all_rows = g.value(rows).clone();

        // independent single-cell evaluation for cell (y=1, x=2) -> row 6
        let cell = 1 * 4 + 2;
        let mut cell_vec = vec![0.0f32; 128];
        for (c, v) in cell_vec.iter_mut().enumerate() {
            *v = fmap_data[c * 16 + cell];
        }
        let mut g2 = Graph::new();
        let xin = g2.input(Tensor::new(vec![1, 128], cell_vec).unwrap());
        let out = forward_layers(
            &mut g2,
            &Binding::Frozen(&params),
            xin,
            &cfg.projector_layers(128),
            LOCAL_PROJ,
            false,
        )
        .unwrap();
        let single = g2.value(out);
        for (a, b) in all_rows.row(cell).iter().zip(single.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn gap_is_invariant_to_spatial_permutation() {
        use rand::Rng;
        let mut r = rng::rng_from(&[14]);
        let data: Vec<f32> = (0..8 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut permuted = vec![0.0f32; data.len()];
        // reverse every channel plane
        for c in 0..8 {
            for s in 0..16 {
                permuted[c * 16 + s] = data[c * 16 + 15 - s];
            }
        }
        let mut g: Graph<f32> = Graph::new();
        let a = g.input(Tensor::new(vec![1, 8, 4, 4], data).unwrap());
        let b = g.input(Tensor::new(vec![1, 8, 4, 4], permuted).unwrap());
        let pa = g.global_avg_pool(a).unwrap();
        let pb = g.global_avg_pool(b).unwrap();
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert_relative_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_weight_predictor_outputs_bias() {
        let cfg = ModelConfig::default();
        let mut state = ModelState::init(&cfg, 15, 0.99, None).unwrap();
        for (name, t) in state.online.iter_mut() {
            if name.starts_with(PREDICTOR) && name.ends_with(".weight") {
                t.data_mut().fill(0.0);
            }
            if name.starts_with(PREDICTOR) && name.ends_with("fc2.bias") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = i as f32 * 0.1;
                }
            }
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 64], 0.5));
        let branch = BranchRef::online(&state.online, false);
        let y = predict(&mut g, &branch, &cfg, x).unwrap();
        let y = g.value(y);
        for r in 0..2 {
            for (i, &v) in y.row(r).iter().enumerate() {
                assert_relative_eq!(v, i as f32 * 0.1, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn identity_initialized_predictor_is_identity_in_eval() {
        // square linear layers set to identity, zero bias; eval-mode batch
        // norm with init running stats is also the identity
        let mut cfg = ModelConfig::default();
        cfg.proj_hidden = 64; // make both predictor layers square
        let mut state = ModelState::init(&cfg, 16, 0.99, None).unwrap();
        for (name, t) in state.online.iter_mut() {
            if !name.starts_with(PREDICTOR) {
                continue;
            }
            if name.ends_with(".weight") {
                let d = t.shape()[1];
                t.data_mut().fill(0.0);
                for i in 0..d {
                    t.data_mut()[i * d + i] = 1.0;
                }
            }
            if name.ends_with(".bias") {
                t.data_mut().fill(0.0);
            }
        }
        use rand::Rng;
        let mut r = rng::rng_from(&[17]);
        let data: Vec<f32> = (0..2 * 64).map(|_| r.gen_range(0.0..1.0)).collect();
        let input = Tensor::new(vec![2, 64], data).unwrap();
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let branch = BranchRef::online(&state.online, false);
        let y = predict(&mut g, &branch, &cfg, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(input.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn predictor_rejects_target_branch() {
        let cfg = ModelConfig::default();
        let state = ModelState::init(&cfg, 5, 0.99, None).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 64]));
        let branch = BranchRef::target(&state.target);
        assert!(matches!(
            predict(&mut g, &branch, &cfg, x),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn state_structure_holds_and_teacher_is_validated() {
        let cfg = ModelConfig::default();
        let state = ModelState::init(&cfg, 6, 0.99, None).unwrap();
        state.validate().unwrap();
        assert!(state.online.names().any(|n| n.starts_with(PREDICTOR)));
        assert!(!state.target.names().any(|n| n.starts_with(PREDICTOR)));
        assert!(state.teacher().is_err());
        // teacher without backbone keys is rejected
        let mut junk = ParamSet::new();
        junk.insert("something", Tensor::zeros(&[1]));
        assert!(ModelState::init(&cfg, 6, 0.99, Some(junk)).is_err());
    }

    #[test]
    fn teacher_regions_are_unit_norm_and_deterministic() {
        let cfg = ModelConfig::default();
        let state = ModelState::init(&cfg, 7, 0.99, None).unwrap();
        let teacher: ParamSet<f32> = state
            .online
            .iter()
            .filter(|(n, _)| n.starts_with(BACKBONE))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let img = {
            use rand::Rng;
            let mut r = rng::rng_from(&[8]);
            let data = (0..3 * 32 * 32).map(|_| r.gen_range(0.0f32..=1.0)).collect();
            Image::new(Tensor::new(vec![3, 32, 32], data).unwrap(), None).unwrap()
        };
        let a = teacher_regions(&teacher, &cfg, &img).unwrap();
        let b = teacher_regions(&teacher, &cfg, &img).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.source, FeatureSource::Teacher);
        assert_eq!(a.count(), 16);
        for i in 0..a.count() {
            let norm: f32 = a.rows.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-5, "norm {norm}");
        }
    }

    #[test]
    fn teacher_rows_match_direct_extraction() {
        let cfg = ModelConfig::default();
        let state = ModelState::init(&cfg, 9, 0.99, None).unwrap();
        let teacher: ParamSet<f32> = state
            .online
            .iter()
            .filter(|(n, _)| n.starts_with(BACKBONE))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let img = {
            use rand::Rng;
            let mut r = rng::rng_from(&[10]);
            let data = (0..3 * 32 * 32).map(|_| r.gen_range(0.0f32..=1.0)).collect();
            Image::new(Tensor::new(vec![3, 32, 32], data).unwrap(), None).unwrap()
        };
        let regions = teacher_regions(&teacher, &cfg, &img).unwrap();
        let fmap = eval_feature_map(&teacher, &cfg, image_batch(&[&img]).unwrap()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut cell = vec![0.0f32; 128];
                for (c, v) in cell.iter_mut().enumerate() {
                    *v = fmap.data()[c * 16 + y * 4 + x];
                }
                let norm = cell.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
                for v in &mut cell {
                    *v /= norm;
                }
                for (a, b) in regions.rows.row(y * 4 + x).iter().zip(&cell) {
                    assert_relative_eq!(a, b, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn flip_equivariance_for_symmetric_stride1_conv_stack() {
        // purely convolutional two-layer spec, stride 1, pad 1, kernels made
        // symmetric in x: flipping the input flips the feature map
        use rand::Rng;
        let layers = vec![
            Layer::Conv2d {
                name: "c0".into(),
                in_ch: 3,
                out_ch: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            },
            Layer::Conv2d {
                name: "c1".into(),
                in_ch: 4,
                out_ch: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            },
        ];
        let mut params: ParamSet<f32> = ParamSet::new();
        init_layer_params(&mut params, &layers, "", &mut rng::rng_from(&[11]));
        // symmetrize kernels around the x axis
        for (_, t) in params.iter_mut() {
            let shape = t.shape().to_vec();
            let (k, d) = (shape[3], t.data_mut());
            let per_row = k;
            for start in (0..d.len()).step_by(per_row) {
                for x in 0..k / 2 {
                    let avg = (d[start + x] + d[start + k - 1 - x]) / 2.0;
                    d[start + x] = avg;
                    d[start + k - 1 - x] = avg;
                }
            }
        }
        let mut r = rng::rng_from(&[12]);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| r.gen_range(0.0..1.0)).collect();
        let x = Tensor::new(vec![1, 3, 8, 8], data).unwrap();
        let mut flipped = x.clone();
        for c in 0..3 {
            for y in 0..8 {
                let row = (c * 8 + y) * 8;
                flipped.data_mut()[row..row + 8].reverse();
            }
        }
        let run = |input: Tensor<f32>| {
            let mut g = Graph::new();
            let v = g.input(input);
            let out =
                forward_layers(&mut g, &Binding::Frozen(&params), v, &layers, "", false).unwrap();
            g.value(out).clone()
        };
        let y = run(x);
        let y_flip = run(flipped);
        for c in 0..2 {
            for row in 0..8 {
                for col in 0..8 {
                    assert_relative_eq!(
                        y.data()[(c * 8 + row) * 8 + col],
                        y_flip.data()[(c * 8 + row) * 8 + (7 - col)],
                        epsilon = 1e-5
                    );
                }
            }
        }
    }

    #[test]
    fn pooled_projector_input_matches_brute_force_mean() {
        let cfg = ModelConfig::default();
        use rand::Rng;
        let mut r = rng::rng_from(&[13]);
        let data: Vec<f32> = (0..2 * 128 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fmap = Tensor::new(vec![2, 128, 4, 4], data.clone()).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(fmap);
        let pooled = g.global_avg_pool(x).unwrap();
        let pooled = g.value(pooled);
        for i in 0..2 {
            for c in 0..128 {
                let base = (i * 128 + c) * 16;
                let mean: f32 = data[base..base + 16].iter().sum::<f32>() / 16.0;
                assert_relative_eq!(pooled.data()[i * 128 + c], mean, epsilon = 1e-6);
            }
        }
        let _ = cfg;
    }
}
