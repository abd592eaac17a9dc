//! The segmentation network: a five-stage convolutional trunk shared by two
//! task heads. Each head taps four stages through 3x3 side convolutions
//! producing K channels, resizes them to the input size, concatenates them
//! and fuses with a 1x1 linear layer followed by a sigmoid.
//!
//! The vessel head reads the four finer stages (1-4), the disc head the four
//! coarser ones (2-5). One forward pass evaluates the trunk once no matter
//! how many heads are requested.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{
    bilinear_resize, bilinear_resize_backward, concat_backward, concat_channels, conv2d_backward,
    conv2d_forward, maxpool2x2, maxpool2x2_backward, relu, relu_backward, sigmoid, ConcatCache,
    ConvCache, PoolCache, ReluCache, ResizeCache,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 5;
pub const MIN_INPUT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Vessel,
    Disc,
}

impl Task {
    /// 1-based trunk stages feeding this head, finest first.
    pub fn stages(self) -> [usize; 4] {
        match self {
            Task::Vessel => [1, 2, 3, 4],
            Task::Disc => [2, 3, 4, 5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Vessel => "vessel",
            Task::Disc => "disc",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "vessel" => Ok(Task::Vessel),
            "disc" => Ok(Task::Disc),
            _ => Err(Error::InvalidArgument(format!(
                "unknown task {:?} (expected vessel or disc)",
                s
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Full-scale channel counts per stage, before width scaling.
    pub stage_channels: [usize; NUM_STAGES],
    pub convs_per_stage: [usize; NUM_STAGES],
    /// K: channels produced by every side layer.
    pub side_channels: usize,
    /// Divisor applied to stage channels for desk-scale runs.
    pub width_scale: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stage_channels: [64, 128, 256, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            side_channels: 16,
            width_scale: 1,
        }
    }
}

impl NetConfig {
    pub fn with_width_scale(width_scale: usize) -> Self {
        NetConfig {
            width_scale,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side_channels == 0 {
            return Err(Error::Config("side_channels must be >= 1".into()));
        }
        if self.width_scale == 0 {
            return Err(Error::Config("width_scale must be >= 1".into()));
        }
        for (s, &c) in self.stage_channels.iter().enumerate() {
            if c / self.width_scale == 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} / width_scale {} would be zero",
                    s + 1,
                    c,
                    self.width_scale
                )));
            }
        }
        if self.convs_per_stage.iter().any(|&n| n == 0) {
            return Err(Error::Config("every stage needs at least one conv".into()));
        }
        Ok(())
    }

    /// Channel count of stage `s` (1-based) after width scaling.
    pub fn channels(&self, s: usize) -> usize {
        self.stage_channels[s - 1] / self.width_scale
    }
}

/// Named parameter collection; also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> NetworkParams<S> {
    pub fn new() -> Self {
        NetworkParams {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("missing parameter {:?}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Consistency(format!("missing parameter {:?}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()).expect("valid shape")))
            .collect();
        NetworkParams { map }
    }

    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        NetworkParams {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl<S: Scalar> Default for NetworkParams<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn stage_conv_name(stage: usize, conv: usize, kind: &str) -> String {
    format!("stage{}.conv{}.{}", stage, conv, kind)
}

pub fn side_name(task: Task, stage: usize, kind: &str) -> String {
    format!("{}.side{}.{}", task.name(), stage, kind)
}

pub fn fuse_name(task: Task, kind: &str) -> String {
    format!("{}.fuse.{}", task.name(), kind)
}

/// Allocates and He-initializes every trunk, side and fusion parameter.
pub fn build_network<S: Scalar>(config: &NetConfig, seed: u64) -> Result<NetworkParams<S>> {
    config.validate()?;
    let mut params = NetworkParams::new();
    let mut in_ch = 3;
    for s in 1..=NUM_STAGES {
        let out_ch = config.channels(s);
        for i in 1..=config.convs_per_stage[s - 1] {
            let wname = stage_conv_name(s, i, "weight");
            let fan_in = in_ch * 9;
            params.insert(
                wname.clone(),
                Tensor::he_normal_init(&[out_ch, in_ch, 3, 3], fan_in, seed, &wname)?,
            );
            params.insert(stage_conv_name(s, i, "bias"), Tensor::zeros(&[out_ch])?);
            in_ch = out_ch;
        }
    }
    let k = config.side_channels;
    for task in [Task::Vessel, Task::Disc] {
        for s in task.stages() {
            let c = config.channels(s);
            let wname = side_name(task, s, "weight");
            params.insert(
                wname.clone(),
                Tensor::he_normal_init(&[k, c, 3, 3], c * 9, seed, &wname)?,
            );
            params.insert(side_name(task, s, "bias"), Tensor::zeros(&[k])?);
        }
        let wname = fuse_name(task, "weight");
        params.insert(
            wname.clone(),
            Tensor::he_normal_init(&[1, 4 * k, 1, 1], 4 * k, seed, &wname)?,
        );
        params.insert(fuse_name(task, "bias"), Tensor::zeros(&[1])?);
    }
    Ok(params)
}

struct StageTrace<S> {
    convs: Vec<(ConvCache<S>, ReluCache)>,
    /// Post-ReLU, pre-pool output; the side layers tap this.
    output: Tensor<S>,
}

struct HeadTrace<S> {
    task: Task,
    side: Vec<(ConvCache<S>, ResizeCache)>,
    concat: ConcatCache,
    fuse: ConvCache<S>,
}

pub struct ForwardTrace<S> {
    stages: Vec<StageTrace<S>>,
    pools: Vec<PoolCache>,
    heads: Vec<HeadTrace<S>>,
    base_conv_evals: usize,
}

impl<S> ForwardTrace<S> {
    /// Number of trunk convolutions evaluated by the forward pass; the trunk
    /// is shared, so this is independent of the number of requested heads.
    pub fn base_conv_evals(&self) -> usize {
        self.base_conv_evals
    }

}

impl<S: Scalar> ForwardTrace<S> {
    /// Spatial size (H, W) of each stage's post-ReLU, pre-pool output,
    /// in stage order.
    pub fn stage_spatial(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .map(|s| (s.output.shape()[1], s.output.shape()[2]))
            .collect()
    }
}

/// One pass over the trunk plus the requested heads.
/// Returns per-head probability maps in the order of `heads`.
pub fn forward<S: Scalar>(
    params: &NetworkParams<S>,
    config: &NetConfig,
    image: &Tensor<S>,
    heads: &[Task],
) -> Result<(Vec<(Task, Tensor<S>)>, ForwardTrace<S>)> {
    let (outs, trace) = forward_full(params, config, image, heads)?;
    Ok((
        outs.into_iter().map(|o| (o.task, o.probability)).collect(),
        trace,
    ))
}

/// Output of one head: the pre-sigmoid activation and the probability map.
pub struct HeadOutput<S> {
    pub task: Task,
    pub activation: Tensor<S>,
    pub probability: Tensor<S>,
}

/// Like `forward` but keeps the pre-sigmoid activations.
pub fn forward_full<S: Scalar>(
    params: &NetworkParams<S>,
    config: &NetConfig,
    image: &Tensor<S>,
    heads: &[Task],
) -> Result<(Vec<HeadOutput<S>>, ForwardTrace<S>)> {
    config.validate()?;
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "input must be (3,H,W), got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h < MIN_INPUT || w < MIN_INPUT {
        return Err(Error::shape(format!(
            "input {}x{} is below the {}x{} minimum",
            h, w, MIN_INPUT, MIN_INPUT
        )));
    }
    if heads.is_empty() {
        return Err(Error::InvalidArgument("no heads requested".into()));
    }

    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut pools = Vec::with_capacity(NUM_STAGES - 1);
    let mut base_conv_evals = 0;
    let mut current = image.clone();
    for s in 1..=NUM_STAGES {
        let mut convs = Vec::new();
        for i in 1..=config.convs_per_stage[s - 1] {
            let weight = params.get(&stage_conv_name(s, i, "weight"))?;
            let bias = params.get(&stage_conv_name(s, i, "bias"))?;
            let (z, conv_cache) = conv2d_forward(&current, weight, bias)?;
            base_conv_evals += 1;
            let (a, relu_cache) = relu(&z);
            convs.push((conv_cache, relu_cache));
            current = a;
        }
        stages.push(StageTrace {
            convs,
            output: current.clone(),
        });
        if s < NUM_STAGES {
            let (pooled, cache) = maxpool2x2(&current)?;
            pools.push(cache);
            current = pooled;
        }
    }

    let mut outputs = Vec::with_capacity(heads.len());
    let mut head_traces = Vec::with_capacity(heads.len());
    for &task in heads {
        let mut side = Vec::new();
        let mut side_maps = Vec::new();
        for s in task.stages() {
            let weight = params.get(&side_name(task, s, "weight"))?;
            let bias = params.get(&side_name(task, s, "bias"))?;
            let (feat, conv_cache) = conv2d_forward(&stages[s - 1].output, weight, bias)?;
            let (resized, resize_cache) = bilinear_resize(&feat, (h, w))?;
            side.push((conv_cache, resize_cache));
            side_maps.push(resized);
        }
        let refs: Vec<&Tensor<S>> = side_maps.iter().collect();
        let (volume, concat_cache) = concat_channels(&refs)?;
        let fuse_w = params.get(&fuse_name(task, "weight"))?;
        let fuse_b = params.get(&fuse_name(task, "bias"))?;
        let (activation, fuse_cache) = conv2d_forward(&volume, fuse_w, fuse_b)?;
        outputs.push(HeadOutput {
            task,
            probability: sigmoid(&activation),
            activation,
        });
        head_traces.push(HeadTrace {
            task,
            side,
            concat: concat_cache,
            fuse: fuse_cache,
        });
    }

    Ok((
        outputs,
        ForwardTrace {
            stages,
            pools,
            heads: head_traces,
            base_conv_evals,
        },
    ))
}

/// Backpropagates per-head gradients (with respect to the pre-sigmoid
/// activation) through the whole graph. Returns a gradient map covering
/// every parameter; parameters off the active paths stay exactly zero.
pub fn backward<S: Scalar>(
    params: &NetworkParams<S>,
    _config: &NetConfig,
    trace: &ForwardTrace<S>,
    head_grads: &[(Task, Tensor<S>)],
) -> Result<NetworkParams<S>> {
    let mut grads = params.zeros_like();

    // gradient flowing into each stage's post-ReLU output
    let mut stage_grads: Vec<Option<Tensor<S>>> = vec![None; NUM_STAGES];

    for (task, grad_act) in head_grads {
        let head = trace
            .heads
            .iter()
            .find(|ht| ht.task == *task)
            .ok_or_else(|| {
                Error::Consistency(format!("trace has no head for task {}", task.name()))
            })?;
        let (grad_volume, gw, gb) = conv2d_backward(grad_act, &head.fuse)?;
        grads.get_mut(&fuse_name(*task, "weight"))?.add_assign(&gw)?;
        grads.get_mut(&fuse_name(*task, "bias"))?.add_assign(&gb)?;
        let parts = concat_backward(&grad_volume, &head.concat)?;
        for ((s, part), (conv_cache, resize_cache)) in
            task.stages().iter().zip(parts).zip(&head.side)
        {
            let grad_feat = bilinear_resize_backward(&part, resize_cache)?;
            let (grad_stage, gw, gb) = conv2d_backward(&grad_feat, conv_cache)?;
            grads.get_mut(&side_name(*task, *s, "weight"))?.add_assign(&gw)?;
            grads.get_mut(&side_name(*task, *s, "bias"))?.add_assign(&gb)?;
            match &mut stage_grads[*s - 1] {
                Some(acc) => acc.add_assign(&grad_stage)?,
                slot @ None => *slot = Some(grad_stage),
            }
        }
    }

    for s in (1..=NUM_STAGES).rev() {
        let Some(mut g) = stage_grads[s - 1].take() else {
            continue;
        };
        for (i, (conv_cache, relu_cache)) in trace.stages[s - 1].convs.iter().enumerate().rev() {
            let gz = relu_backward(&g, relu_cache)?;
            let (gi, gw, gb) = conv2d_backward(&gz, conv_cache)?;
            grads
                .get_mut(&stage_conv_name(s, i + 1, "weight"))?
                .add_assign(&gw)?;
            grads
                .get_mut(&stage_conv_name(s, i + 1, "bias"))?
                .add_assign(&gb)?;
            g = gi;
        }
        if s > 1 {
            let pooled_grad = maxpool2x2_backward(&g, &trace.pools[s - 2])?;
            match &mut stage_grads[s - 2] {
                Some(acc) => acc.add_assign(&pooled_grad)?,
                slot @ None => *slot = Some(pooled_grad),
            }
        }
    }

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> NetConfig {
        NetConfig::with_width_scale(8)
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        Tensor::he_normal_init(&[3, h, w], 2, seed, "img").unwrap()
    }

    #[test]
    fn default_config_shapes() {
        let params = build_network::<f32>(&NetConfig::default(), 0).unwrap();
        assert_eq!(
            params.get("stage1.conv1.weight").unwrap().shape(),
            &[64, 3, 3, 3]
        );
        assert_eq!(
            params.get("vessel.fuse.weight").unwrap().shape(),
            &[1, 64, 1, 1]
        );
        assert_eq!(
            params.get("disc.fuse.weight").unwrap().shape(),
            &[1, 64, 1, 1]
        );
    }

    #[test]
    fn width_scaled_channels() {
        let cfg = desk_config();
        assert_eq!(
            (1..=5).map(|s| cfg.channels(s)).collect::<Vec<_>>(),
            vec![8, 16, 32, 64, 64]
        );
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_network::<f32>(&desk_config(), 7).unwrap();
        let b = build_network::<f32>(&desk_config(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_network::<f32>(&desk_config(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = NetConfig {
            width_scale: 1000,
            ..Default::default()
        };
        assert!(build_network::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn head_stage_sets() {
        assert_eq!(Task::Vessel.stages(), [1, 2, 3, 4]);
        assert_eq!(Task::Disc.stages(), [2, 3, 4, 5]);
    }

    #[test]
    fn forward_output_range_and_size() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 1).unwrap();
        let img = test_image(32, 48, 2);
        let (outs, _) = forward(&params, &cfg, &img, &[Task::Vessel, Task::Disc]).unwrap();
        for (_, p) in &outs {
            assert_eq!(p.shape(), &[1, 32, 48]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_rejects_small_input() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 1).unwrap();
        let img = test_image(15, 64, 0);
        assert!(forward(&params, &cfg, &img, &[Task::Vessel]).is_err());
    }

    #[test]
    fn base_shared_across_heads() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 1).unwrap();
        let img = test_image(32, 32, 3);
        let (_, t1) = forward(&params, &cfg, &img, &[Task::Vessel]).unwrap();
        let (_, t2) = forward(&params, &cfg, &img, &[Task::Vessel, Task::Disc]).unwrap();
        let total_convs: usize = cfg.convs_per_stage.iter().sum();
        assert_eq!(t1.base_conv_evals(), total_convs);
        assert_eq!(t2.base_conv_evals(), total_convs);
    }

    #[test]
    fn forward_deterministic() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 1).unwrap();
        let img = test_image(32, 32, 4);
        let (a, _) = forward(&params, &cfg, &img, &[Task::Vessel]).unwrap();
        let (b, _) = forward(&params, &cfg, &img, &[Task::Vessel]).unwrap();
        assert_eq!(a[0].1, b[0].1);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 5).unwrap();
        let img = test_image(32, 32, 5);
        let (_, trace) = forward_full(&params, &cfg, &img, &[Task::Vessel]).unwrap();
        let zero = Tensor::zeros(&[1, 32, 32]).unwrap();
        let grads = backward(&params, &cfg, &trace, &[(Task::Vessel, zero)]).unwrap();
        for (name, g) in grads.iter() {
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "nonzero grad in {}",
                name
            );
        }
    }

    #[test]
    fn vessel_only_leaves_stage5_and_disc_untouched() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 6).unwrap();
        let img = test_image(32, 32, 6);
        let (outs, trace) = forward_full(&params, &cfg, &img, &[Task::Vessel]).unwrap();
        let grad = outs[0].probability.clone(); // any nonzero upstream gradient
        let grads = backward(&params, &cfg, &trace, &[(Task::Vessel, grad)]).unwrap();
        let mut saw_nonzero = false;
        for (name, g) in grads.iter() {
            let all_zero = g.data().iter().all(|&v| v == 0.0);
            if name.starts_with("stage5.") || name.starts_with("disc.") {
                assert!(all_zero, "{} should be exactly zero", name);
            } else {
                saw_nonzero |= !all_zero;
            }
        }
        assert!(saw_nonzero);
    }

    #[test]
    fn backward_rejects_unrequested_head() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 6).unwrap();
        let img = test_image(32, 32, 6);
        let (_, trace) = forward_full(&params, &cfg, &img, &[Task::Vessel]).unwrap();
        let g = Tensor::zeros(&[1, 32, 32]).unwrap();
        assert!(backward(&params, &cfg, &trace, &[(Task::Disc, g)]).is_err());
    }

    #[test]
    fn stage_spatial_chain() {
        let cfg = desk_config();
        let params = build_network::<f32>(&cfg, 9).unwrap();
        let img = test_image(64, 64, 9);
        let (_, trace) = forward(&params, &cfg, &img, &[Task::Vessel, Task::Disc]).unwrap();
        let sizes: Vec<(usize, usize)> = trace
            .stages
            .iter()
            .map(|st| (st.output.shape()[1], st.output.shape()[2]))
            .collect();
        assert_eq!(sizes, vec![(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]);
    }
}
