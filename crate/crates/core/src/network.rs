//! The registration network.
//!
//! Both clouds pass through the same set abstraction layer (farthest point
//! sampling, multi-scale grouping, one mini-PointNet per radius). A flow
//! embedding layer then groups, for every template sample, the source
//! samples within a radius and pools an MLP over
//! `[y_j - x_i, f_i, g_j]`. The template samples with their flow features go
//! through a global mini-PointNet and a fully connected head with 8 outputs:
//! `sigmoid` for `w`, `tanh` for `x, y, z` of the rotation quaternion and
//! four unconstrained dual-part values.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{dualquat_to_transform, DualQuaternion, PointCloud, RigidTransform};
use crate::spatial::{self, farthest_point_sampling, group_multi_scale, NeighborIndex};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_fps: usize,
    pub sa_radii: Vec<f64>,
    pub sa_caps: Vec<usize>,
    pub fe_radius: f64,
    pub fe_cap: usize,
    pub mlp_sa: Vec<usize>,
    pub mlp_fe: Vec<usize>,
    pub mlp_pn: Vec<usize>,
    pub mlp_fc: Vec<usize>,
    /// Per-point input feature width `c` (0, 1 for intensity, 3 for normals).
    pub input_features: usize,
    /// Factor applied to coordinates entering the network; the dual part of
    /// the output is divided by it.
    #[serde(default = "unit_scale")]
    pub coordinate_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// LiDAR scale defaults (meters).
    pub fn kitti() -> Self {
        Self {
            n_fps: 1024,
            sa_radii: vec![0.5, 1.0],
            sa_caps: vec![512, 1024],
            fe_radius: 10.0,
            fe_cap: 15,
            ..Self::shared_widths()
        }
    }

    /// Object scale defaults (units).
    pub fn modelnet() -> Self {
        Self {
            n_fps: 512,
            sa_radii: vec![0.05, 0.1],
            sa_caps: vec![256, 512],
            fe_radius: 0.2,
            fe_cap: 30,
            ..Self::shared_widths()
        }
    }

    fn shared_widths() -> Self {
        Self {
            n_fps: 0,
            sa_radii: Vec::new(),
            sa_caps: Vec::new(),
            fe_radius: 0.0,
            fe_cap: 0,
            mlp_sa: vec![16, 16, 32],
            mlp_fe: vec![128, 128, 256],
            mlp_pn: vec![256, 512, 512, 1024],
            mlp_fc: vec![512, 256, 8],
            input_features: 0,
            coordinate_scale: 1.0,
        }
    }

    /// Tiny configuration for gradient checks and unit tests.
    pub fn toy() -> Self {
        Self {
            n_fps: 8,
            sa_radii: vec![0.3, 0.6],
            sa_caps: vec![4, 8],
            fe_radius: 0.5,
            fe_cap: 4,
            mlp_sa: vec![4, 4, 8],
            mlp_fe: vec![8, 8, 16],
            mlp_pn: vec![16, 32],
            mlp_fc: vec![16, 8],
            input_features: 0,
            coordinate_scale: 1.0,
        }
    }

    /// Reduced object-scale configuration that trains on one CPU core in
    /// minutes on 512-point clouds of unit size.
    pub fn compact() -> Self {
        Self {
            n_fps: 64,
            sa_radii: vec![0.2, 0.4],
            sa_caps: vec![16, 32],
            fe_radius: 0.4,
            fe_cap: 16,
            mlp_sa: vec![16, 16, 32],
            mlp_fe: vec![32, 32, 64],
            mlp_pn: vec![128, 256],
            mlp_fc: vec![128, 8],
            input_features: 0,
            coordinate_scale: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        spatial::validate_scales(&self.sa_radii, &self.sa_caps)?;
        if self.n_fps == 0 {
            return Err(Error::Config("n_fps must be at least 1".into()));
        }
        if !(self.fe_radius > 0.0 && self.fe_radius.is_finite()) || self.fe_cap == 0 {
            return Err(Error::Config("flow embedding radius and cap must be positive".into()));
        }
        for (name, widths) in [
            ("mlp_sa", &self.mlp_sa),
            ("mlp_fe", &self.mlp_fe),
            ("mlp_pn", &self.mlp_pn),
            ("mlp_fc", &self.mlp_fc),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(format!("{name} widths must be non-empty and >= 1")));
            }
        }
        if !(self.coordinate_scale > 0.0 && self.coordinate_scale.is_finite()) {
            return Err(Error::Config("coordinate_scale must be positive".into()));
        }
        if self.mlp_fc.last() != Some(&8) {
            return Err(Error::Config("mlp_fc must end with 8 outputs".into()));
        }
        Ok(())
    }

    /// Width of the concatenated multi-scale feature per sample.
    pub fn sa_feature_width(&self) -> usize {
        self.sa_radii.len() * self.mlp_sa.last().copied().unwrap_or(0)
    }

    pub fn fe_feature_width(&self) -> usize {
        self.mlp_fe.last().copied().unwrap_or(0)
    }

    /// Input widths of each MLP, in declaration order.
    fn mlp_inputs(&self) -> (usize, usize, usize, usize) {
        (
            3 + self.input_features,
            3 + 2 * self.sa_feature_width(),
            3 + self.fe_feature_width(),
            self.mlp_pn.last().copied().unwrap_or(0),
        )
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&[&json])
    }
}

/// One fully connected layer: `x W + b`, `W` is `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(input: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .map(|&out| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * out).map(|_| rng.random_range(-bound..=bound)).collect();
                let layer = Linear {
                    weight: Tensor::new(fan_in, out, data).expect("sized"),
                    bias: Tensor::zeros(1, out),
                };
                fan_in = out;
                layer
            })
            .collect();
        Self { layers }
    }

    fn matches(&self, input: usize, widths: &[usize]) -> bool {
        let mut fan_in = input;
        self.layers.len() == widths.len()
            && self.layers.iter().zip(widths).all(|(l, &w)| {
                let ok = l.weight.shape() == [fan_in, w] && l.bias.shape() == [1, w];
                fan_in = w;
                ok
            })
    }
}

pub const INIT_SCHEME: &str = "uniform-fan-in";

/// All learnable parameters, plus how they were initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// One MLP per set abstraction radius.
    pub sa: Vec<Mlp>,
    pub fe: Mlp,
    pub pn: Mlp,
    pub fc: Mlp,
    pub init: String,
    pub seed: u64,
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sa_in, fe_in, pn_in, fc_in) = config.mlp_inputs();
    let sa = config
        .sa_radii
        .iter()
        .map(|_| Mlp::init(sa_in, &config.mlp_sa, &mut rng))
        .collect();
    Ok(ModelParams {
        sa,
        fe: Mlp::init(fe_in, &config.mlp_fe, &mut rng),
        pn: Mlp::init(pn_in, &config.mlp_pn, &mut rng),
        fc: Mlp::init(fc_in, &config.mlp_fc, &mut rng),
        init: INIT_SCHEME.to_string(),
        seed,
    })
}

impl ModelParams {
    fn mlps(&self) -> Vec<(String, &Mlp)> {
        let mut v: Vec<(String, &Mlp)> = self
            .sa
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("sa{i}"), m))
            .collect();
        v.push(("fe".into(), &self.fe));
        v.push(("pn".into(), &self.pn));
        v.push(("fc".into(), &self.fc));
        v
    }

    /// Every parameter tensor with a stable name, in declaration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in self.mlps() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mlps = self
            .sa
            .iter_mut()
            .chain([&mut self.fe, &mut self.pn, &mut self.fc]);
        for mlp in mlps {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let (sa_in, fe_in, pn_in, fc_in) = config.mlp_inputs();
        let ok = self.sa.len() == config.sa_radii.len()
            && self.sa.iter().all(|m| m.matches(sa_in, &config.mlp_sa))
            && self.fe.matches(fe_in, &config.mlp_fe)
            && self.pn.matches(pn_in, &config.mlp_pn)
            && self.fc.matches(fc_in, &config.mlp_fc);
        if !ok {
            return Err(Error::Config("parameter shapes do not match the model configuration".into()));
        }
        if let Some((name, _)) = self.named().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Config(format!("parameter {name} has non-finite values")));
        }
        Ok(())
    }

    /// Digest over every parameter bit pattern.
    pub fn digest(&self) -> String {
        let bytes: Vec<u8> = self
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        hex_digest(&[&bytes])
    }
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parameters bound to a tape, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub sa: Vec<MlpVars>,
    pub fe: MlpVars,
    pub pn: MlpVars,
    pub fc: MlpVars,
}

impl ParamVars {
    /// Binds the parameters as leaves (`trainable`) or constants.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut bind_mlp = |m: &Mlp| MlpVars {
            layers: m
                .layers
                .iter()
                .map(|l| {
                    if trainable {
                        (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                    } else {
                        (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                    }
                })
                .collect(),
        };
        Self {
            sa: params.sa.iter().map(&mut bind_mlp).collect(),
            fe: bind_mlp(&params.fe),
            pn: bind_mlp(&params.pn),
            fc: bind_mlp(&params.fc),
        }
    }

    /// Rebuilds the structure of `params` from handles listed in
    /// [`ModelParams::named`] order.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        let expected = params.named().len();
        if vars.len() != expected {
            return Err(Error::InvalidArgument(format!("{} handles for {expected} parameters", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut take = |m: &Mlp| MlpVars {
            layers: m
                .layers
                .iter()
                .map(|_| (it.next().expect("counted"), it.next().expect("counted")))
                .collect(),
        };
        Ok(Self {
            sa: params.sa.iter().map(&mut take).collect(),
            fe: take(&params.fe),
            pn: take(&params.pn),
            fc: take(&params.fc),
        })
    }

    /// Leaf handles in the same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        self.sa
            .iter()
            .chain([&self.fe, &self.pn, &self.fc])
            .flat_map(|m| m.layers.iter().flat_map(|&(w, b)| [w, b]))
            .collect()
    }
}

/// Shared-weight MLP applied row-wise. Hidden layers use ReLU; the last
/// layer uses ReLU only when `relu_last`.
pub fn mlp_forward(tape: &mut Tape, x: Var, mlp: &MlpVars, relu_last: bool) -> Result<Var> {
    let mut h = x;
    let n = mlp.layers.len();
    for (i, &(w, b)) in mlp.layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.bias_add(h, b)?;
        if i + 1 < n || relu_last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Shared MLP on every row of a `[set, channels]` input, then element-wise
/// max over the set.
pub fn mini_pointnet(tape: &mut Tape, set: Var, mlp: &MlpVars) -> Result<Var> {
    if tape.shape(set)[0] == 0 {
        return Err(Error::EmptySet("mini_pointnet"));
    }
    let h = mlp_forward(tape, set, mlp, true)?;
    tape.max_pool_set(h)
}

/// Subsampled cloud with per-sample multi-scale features, detached from any
/// tape so it can be reused for the next registration in a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractedCloud {
    pub coords: Vec<Vector3<f64>>,
    /// `[n_fps, n_r * c']`.
    pub features: Tensor,
    /// Fingerprint of the model that produced it.
    pub model_fingerprint: String,
}

/// Set abstraction output living on a tape.
#[derive(Debug, Clone)]
pub struct TapedAbstraction {
    pub coords: Vec<Vector3<f64>>,
    pub features: Var,
}

/// Per-template-sample flow features on a tape.
#[derive(Debug, Clone)]
pub struct FlowCloud {
    pub coords: Vec<Vector3<f64>>,
    /// `[n_samples, c_fe]`.
    pub features: Var,
    /// Number of source samples grouped per template sample.
    pub group_sizes: Vec<usize>,
}

/// Parameter-free part of set abstraction: sampled centers and the grouped
/// `[displacement, features]` rows per radius.
#[derive(Debug, Clone, PartialEq)]
pub struct SaGeometry {
    pub coords: Vec<Vector3<f64>>,
    inputs: Vec<Tensor>,
    offsets: Vec<Vec<usize>>,
}

pub fn sa_geometry(cloud: &PointCloud, config: &ModelConfig) -> Result<SaGeometry> {
    if cloud.len() < config.n_fps {
        return Err(Error::InsufficientPoints {
            needed: config.n_fps,
            available: cloud.len(),
        });
    }
    let c = cloud.feature_width();
    if c != config.input_features {
        return Err(Error::Config(format!(
            "cloud has {c} feature channels, model expects {}",
            config.input_features
        )));
    }
    let centers = farthest_point_sampling(cloud.points(), config.n_fps)?;
    let groups = group_multi_scale(cloud, &centers, &config.sa_radii, &config.sa_caps)?;
    let mut inputs = Vec::with_capacity(config.sa_radii.len());
    let mut all_offsets = Vec::with_capacity(config.sa_radii.len());
    for l in 0..config.sa_radii.len() {
        let mut offsets = Vec::with_capacity(centers.len() + 1);
        offsets.push(0);
        let mut input = Vec::new();
        for per_center in &groups {
            let g = &per_center[l];
            for (&k, d) in g.neighbors.iter().zip(&g.displacements) {
                let d = d * config.coordinate_scale;
                input.extend_from_slice(&[d.x, d.y, d.z]);
                input.extend_from_slice(cloud.feature(k));
            }
            offsets.push(offsets.last().unwrap() + g.neighbors.len());
        }
        let rows = *offsets.last().unwrap();
        inputs.push(Tensor::new(rows, 3 + c, input)?);
        all_offsets.push(offsets);
    }
    Ok(SaGeometry {
        coords: centers.iter().map(|&i| cloud.points()[i]).collect(),
        inputs,
        offsets: all_offsets,
    })
}

/// Learned part of set abstraction: `[n_fps, n_r * c']` features.
pub fn sa_apply(tape: &mut Tape, geo: &SaGeometry, params: &ParamVars) -> Result<Var> {
    let mut pooled = Vec::with_capacity(geo.inputs.len());
    for ((input, offsets), mlp) in geo.inputs.iter().zip(&geo.offsets).zip(&params.sa) {
        let x = tape.constant(input.clone());
        let h = mlp_forward(tape, x, mlp, true)?;
        pooled.push(tape.segment_max_pool(h, offsets, false)?);
    }
    tape.concat(&pooled)
}

pub fn set_abstraction(
    tape: &mut Tape,
    cloud: &PointCloud,
    config: &ModelConfig,
    params: &ParamVars,
) -> Result<TapedAbstraction> {
    let geo = sa_geometry(cloud, config)?;
    let features = sa_apply(tape, &geo, params)?;
    Ok(TapedAbstraction {
        coords: geo.coords,
        features,
    })
}

/// Parameter-free part of the flow embedding: for each template sample the
/// source samples within the radius, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeGeometry {
    pub template_coords: Vec<Vector3<f64>>,
    displacements: Tensor,
    template_rows: Vec<usize>,
    source_rows: Vec<usize>,
    offsets: Vec<usize>,
    pub group_sizes: Vec<usize>,
}

pub fn fe_geometry(
    template: &[Vector3<f64>],
    source: &[Vector3<f64>],
    config: &ModelConfig,
) -> Result<FeGeometry> {
    let index = NeighborIndex::new(source, config.fe_radius)?;
    let mut offsets = Vec::with_capacity(template.len() + 1);
    offsets.push(0);
    let mut disp = Vec::new();
    let mut template_rows = Vec::new();
    let mut source_rows = Vec::new();
    let mut group_sizes = Vec::with_capacity(template.len());
    for (i, x) in template.iter().enumerate() {
        let found = index.radius_neighbors(x, config.fe_radius, config.fe_cap);
        for n in &found {
            let d = (source[n.index] - x) * config.coordinate_scale;
            disp.extend_from_slice(&[d.x, d.y, d.z]);
            template_rows.push(i);
            source_rows.push(n.index);
        }
        group_sizes.push(found.len());
        offsets.push(offsets.last().unwrap() + found.len());
    }
    Ok(FeGeometry {
        template_coords: template.to_vec(),
        displacements: Tensor::new(template_rows.len(), 3, disp)?,
        template_rows,
        source_rows,
        offsets,
        group_sizes,
    })
}

/// Learned part of the flow embedding. The first layer acts on
/// `[d, f_i, g_j]`; its weight is split by input block so the feature terms
/// are multiplied once per sample and then gathered per group row.
pub fn fe_apply(
    tape: &mut Tape,
    geo: &FeGeometry,
    template_features: Var,
    source_features: Var,
    config: &ModelConfig,
    params: &ParamVars,
) -> Result<Var> {
    let (ts, ss) = (tape.shape(template_features), tape.shape(source_features));
    if ts[1] != ss[1] || ts[0] != geo.template_coords.len() {
        return Err(Error::Shape {
            op: "flow_embedding",
            left: ts.to_vec(),
            right: ss.to_vec(),
        });
    }
    if geo.template_rows.is_empty() {
        return Ok(tape.constant(Tensor::zeros(ts[0], config.fe_feature_width())));
    }
    let c = ts[1];
    let (w1, b1) = params.fe.layers[0];
    let rows = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    let wd = tape.gather_rows(w1, &rows(0, 3))?;
    let wf = tape.gather_rows(w1, &rows(3, 3 + c))?;
    let wg = tape.gather_rows(w1, &rows(3 + c, 3 + 2 * c))?;
    let d = tape.constant(geo.displacements.clone());
    let hd = tape.matmul(d, wd)?;
    let hf = tape.matmul(template_features, wf)?;
    let hg = tape.matmul(source_features, wg)?;
    let hf = tape.gather_rows(hf, &geo.template_rows)?;
    let hg = tape.gather_rows(hg, &geo.source_rows)?;
    let h = tape.add(hd, hf)?;
    let h = tape.add(h, hg)?;
    let h = tape.bias_add(h, b1)?;
    let h = tape.relu(h);
    let rest = MlpVars {
        layers: params.fe.layers[1..].to_vec(),
    };
    let h = mlp_forward(tape, h, &rest, true)?;
    tape.segment_max_pool(h, &geo.offsets, true)
}

pub fn flow_embedding(
    tape: &mut Tape,
    template: &TapedAbstraction,
    source: &TapedAbstraction,
    config: &ModelConfig,
    params: &ParamVars,
) -> Result<FlowCloud> {
    let geo = fe_geometry(&template.coords, &source.coords, config)?;
    let features = fe_apply(tape, &geo, template.features, source.features, config, params)?;
    Ok(FlowCloud {
        coords: geo.template_coords,
        features,
        group_sizes: geo.group_sizes,
    })
}

/// Parameter-free work for one pair, reusable across training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub template: SaGeometry,
    pub source: SaGeometry,
    pub flow: FeGeometry,
}

/// Global mini-PointNet over `[xyz, flow]` rows, then the fully connected
/// head. Returns the constrained `[1, 8]` dual-quaternion output.
pub fn output_head(
    tape: &mut Tape,
    flow: &FlowCloud,
    config: &ModelConfig,
    params: &ParamVars,
) -> Result<Var> {
    if flow.coords.is_empty() {
        return Err(Error::EmptySet("output_head"));
    }
    let k = config.coordinate_scale;
    let xyz: Vec<f64> = flow.coords.iter().flat_map(|p| [p.x * k, p.y * k, p.z * k]).collect();
    let xyz = tape.constant(Tensor::new(flow.coords.len(), 3, xyz)?);
    let rows = tape.concat(&[xyz, flow.features])?;
    let global = mini_pointnet(tape, rows, &params.pn)?;
    let raw = mlp_forward(tape, global, &params.fc, false)?;
    constrain_head(tape, raw, k)
}

/// `(sigmoid, tanh, tanh, tanh)` on the real part; the dual part is divided
/// by the coordinate scale.
pub fn constrain_head(tape: &mut Tape, raw: Var, coordinate_scale: f64) -> Result<Var> {
    let w = tape.slice_cols(raw, 0, 1)?;
    let xyz = tape.slice_cols(raw, 1, 4)?;
    let dual = tape.slice_cols(raw, 4, 8)?;
    let w = tape.sigmoid(w);
    let xyz = tape.tanh(xyz);
    let dual = tape.scale(dual, 1.0 / coordinate_scale);
    tape.concat(&[w, xyz, dual])
}

/// A network estimate for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Raw head output; the real part is not normalized.
    pub dual: DualQuaternion,
    pub transform: RigidTransform,
}

impl Prediction {
    fn from_head(values: &[f64]) -> Result<Self> {
        let arr: [f64; 8] = values
            .try_into()
            .map_err(|_| Error::Degenerate("head output must have 8 values".into()))?;
        let dual = DualQuaternion::from_array(arr);
        Ok(Self {
            dual,
            transform: dualquat_to_transform(&dual)?,
        })
    }
}

/// Wall-clock per stage of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub set_abstraction: Duration,
    pub flow_embedding: Duration,
    pub head: Duration,
}

/// Configuration plus parameters, with a counter of set abstraction runs.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    fingerprint: String,
    sa_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            fingerprint: self.fingerprint.clone(),
            sa_calls: AtomicUsize::new(self.sa_calls.load(Ordering::Relaxed)),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        let fingerprint = model_fingerprint(&config, &params);
        Ok(Self {
            config,
            params,
            fingerprint,
            sa_calls: AtomicUsize::new(0),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Config plus parameter digest.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// How many set abstractions ran through this model so far.
    pub fn sa_invocations(&self) -> usize {
        self.sa_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.sa_calls.store(0, Ordering::Relaxed);
    }

    fn check_pair(&self, template: &PointCloud, source: &PointCloud) -> Result<()> {
        if template.feature_width() != source.feature_width() {
            return Err(Error::InvalidArgument(format!(
                "template has {} feature channels, source has {}",
                template.feature_width(),
                source.feature_width()
            )));
        }
        Ok(())
    }

    fn taped_sa(&self, tape: &mut Tape, pv: &ParamVars, cloud: &PointCloud) -> Result<TapedAbstraction> {
        self.sa_calls.fetch_add(1, Ordering::Relaxed);
        set_abstraction(tape, cloud, &self.config, pv)
    }

    /// Sampling and grouping for a pair; counts as two set abstractions.
    pub fn prepare(&self, template: &PointCloud, source: &PointCloud) -> Result<PreparedPair> {
        self.check_pair(template, source)?;
        self.sa_calls.fetch_add(2, Ordering::Relaxed);
        let t = sa_geometry(template, &self.config)?;
        let s = sa_geometry(source, &self.config)?;
        let flow = fe_geometry(&t.coords, &s.coords, &self.config)?;
        Ok(PreparedPair {
            template: t,
            source: s,
            flow,
        })
    }

    /// Network on precomputed geometry; returns the `[1, 8]` head output.
    pub fn forward_prepared_on_tape(&self, tape: &mut Tape, pv: &ParamVars, prep: &PreparedPair) -> Result<Var> {
        let t = sa_apply(tape, &prep.template, pv)?;
        let s = sa_apply(tape, &prep.source, pv)?;
        let features = fe_apply(tape, &prep.flow, t, s, &self.config, pv)?;
        let flow = FlowCloud {
            coords: prep.flow.template_coords.clone(),
            features,
            group_sizes: prep.flow.group_sizes.clone(),
        };
        output_head(tape, &flow, &self.config, pv)
    }

    pub fn forward_prepared(&self, prep: &PreparedPair) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, false);
        let out = self.forward_prepared_on_tape(&mut tape, &pv, prep)?;
        Prediction::from_head(tape.value(out).data())
    }

    /// Builds the whole network on `tape`; returns the constrained `[1, 8]`
    /// head output.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        template: &PointCloud,
        source: &PointCloud,
    ) -> Result<Var> {
        self.check_pair(template, source)?;
        let t = self.taped_sa(tape, pv, template)?;
        let s = self.taped_sa(tape, pv, source)?;
        let flow = flow_embedding(tape, &t, &s, &self.config, pv)?;
        output_head(tape, &flow, &self.config, pv)
    }

    pub fn forward(&self, template: &PointCloud, source: &PointCloud) -> Result<Prediction> {
        self.forward_timed(template, source).map(|(p, _)| p)
    }

    pub fn forward_timed(&self, template: &PointCloud, source: &PointCloud) -> Result<(Prediction, StageTimes)> {
        self.check_pair(template, source)?;
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, false);
        let start = Instant::now();
        let t = self.taped_sa(&mut tape, &pv, template)?;
        let s = self.taped_sa(&mut tape, &pv, source)?;
        let sa_done = Instant::now();
        let flow = flow_embedding(&mut tape, &t, &s, &self.config, &pv)?;
        let fe_done = Instant::now();
        let out = output_head(&mut tape, &flow, &self.config, &pv)?;
        let pred = Prediction::from_head(tape.value(out).data())?;
        let end = Instant::now();
        Ok((
            pred,
            StageTimes {
                set_abstraction: sa_done - start,
                flow_embedding: fe_done - sa_done,
                head: end - fe_done,
            },
        ))
    }

    /// Set abstraction of one cloud, detached for reuse.
    pub fn set_abstraction(&self, cloud: &PointCloud) -> Result<AbstractedCloud> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, false);
        let sa = self.taped_sa(&mut tape, &pv, cloud)?;
        Ok(AbstractedCloud {
            coords: sa.coords,
            features: tape.value(sa.features).clone(),
            model_fingerprint: self.fingerprint.clone(),
        })
    }

    /// Registers `new_cloud` (source) against the cached abstraction of the
    /// previous scan (template), running set abstraction only once.
    pub fn odometry_forward_cached(
        &self,
        prev: &AbstractedCloud,
        new_cloud: &PointCloud,
    ) -> Result<(Prediction, AbstractedCloud)> {
        if prev.model_fingerprint != self.fingerprint {
            return Err(Error::CacheInvalid {
                expected: self.fingerprint.clone(),
                found: prev.model_fingerprint.clone(),
            });
        }
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, false);
        let template = TapedAbstraction {
            coords: prev.coords.clone(),
            features: tape.constant(prev.features.clone()),
        };
        let source = self.taped_sa(&mut tape, &pv, new_cloud)?;
        let flow = flow_embedding(&mut tape, &template, &source, &self.config, &pv)?;
        let out = output_head(&mut tape, &flow, &self.config, &pv)?;
        let pred = Prediction::from_head(tape.value(out).data())?;
        let next = AbstractedCloud {
            coords: source.coords,
            features: tape.value(source.features).clone(),
            model_fingerprint: self.fingerprint.clone(),
        };
        Ok((pred, next))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.into_model()
    }
}

fn model_fingerprint(config: &ModelConfig, params: &ModelParams) -> String {
    let cfg = config.fingerprint();
    let p = params.digest();
    hex_digest(&[cfg.as_bytes(), p.as_bytes()])
}

/// Sequential odometry over scans with set abstraction reuse. The first
/// scan only primes the cache.
#[derive(Debug)]
pub struct OdometryRunner<'a> {
    model: &'a Model,
    previous: Option<AbstractedCloud>,
}

impl<'a> OdometryRunner<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, previous: None }
    }

    /// Relative transform from the previous scan to this one, or `None` for
    /// the first scan.
    pub fn push(&mut self, scan: &PointCloud) -> Result<Option<Prediction>> {
        match self.previous.take() {
            None => {
                self.previous = Some(self.model.set_abstraction(scan)?);
                Ok(None)
            }
            Some(prev) => {
                let (pred, next) = self.model.odometry_forward_cached(&prev, scan)?;
                self.previous = Some(next);
                Ok(Some(pred))
            }
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "flowreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk model: JSON with a format tag, version, config, fingerprints and
/// every parameter array in declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    config_fingerprint: String,
    params_digest: String,
    seed: u64,
    init: String,
    config: ModelConfig,
    params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self::new(model.config(), model.params())
    }

    pub fn new(config: &ModelConfig, params: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_fingerprint: config.fingerprint(),
            params_digest: params.digest(),
            seed: params.seed,
            init: params.init.clone(),
            config: config.clone(),
            params: params
                .named()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::parse(source_name, e.line(), e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(source_name, 1, format!("unknown format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(source_name, 1, format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn into_model(self) -> Result<Model> {
        let mut params = init_params(&self.config, self.seed)?;
        params.init = self.init.clone();
        {
            let named: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
            let slots = params.tensors_mut();
            if slots.len() != self.params.len() {
                return Err(Error::Config(format!(
                    "checkpoint has {} arrays, model needs {}",
                    self.params.len(),
                    slots.len()
                )));
            }
            for ((slot, name), arr) in slots.into_iter().zip(&named).zip(self.params) {
                if &arr.name != name || [arr.rows, arr.cols] != slot.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint array {} [{}, {}] does not match {} {:?}",
                        arr.name,
                        arr.rows,
                        arr.cols,
                        name,
                        slot.shape()
                    )));
                }
                *slot = Tensor::new(arr.rows, arr.cols, arr.data)?;
            }
        }
        if self.config.fingerprint() != self.config_fingerprint || params.digest() != self.params_digest {
            return Err(Error::Config("checkpoint fingerprint mismatch".into()));
        }
        Model::new(self.config, params)
    }
}
