//! The heterogeneous driving-graph transformer: typed cross-attention
//! aggregation, relation-concat fusion, type-specific feed-forward node
//! updates, and frame-transform-conditioned edge updates, stacked K
//! times, plus per-agent-type prediction heads.

mod forward;

pub use forward::{extract_modes, predict_full, AgentDecode, ForwardOutput, ScenePrediction};

use crate::graph::{EdgeType, GraphConfig, NodeType, ReferenceMode, EDGE_TYPES};
use crate::scene::AgentType;
use crate::tensor::nn::{
    insert_layer_norm, insert_linear, insert_mha, insert_mlp, LinearIds, LnIds, MhaIds, MlpIds,
};
use crate::tensor::{load_checkpoint, save_checkpoint, CheckpointError, ParamTable};
use crate::encoders::{
    insert_agent_encoder, insert_map_encoder, insert_view_shift, AgentEncoderIds, MapEncoderIds,
    ViewShiftIds,
};
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// Aggregation function family for node updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
pub enum Aggregation {
    #[serde(rename = "transformer")]
    #[default]
    Transformer,
    /// Per-edge MLP followed by summation.
    #[serde(rename = "gcn")]
    GcnLike,
}

/// Parameter typing: one table per node/edge type, or one shared table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
pub enum Typing {
    #[serde(rename = "heterogeneous")]
    #[default]
    Heterogeneous,
    #[serde(rename = "shared")]
    Shared,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of predicted modes per agent.
    pub modes: usize,
    /// Future steps the regression head emits.
    pub t_future: usize,
    pub pointnet_layers: usize,
    pub aggregation: Aggregation,
    pub typing: Typing,
    pub merge_lane_connectivity: bool,
    pub homogeneous_map_node: bool,
    /// Rotate the edge translation into the destination frame so the
    /// whole pipeline is invariant under global rigid motions.
    pub rotate_delta_pose: bool,
    /// Use a single linear map instead of a hidden layer when fusing
    /// per-relation attention outputs.
    pub fuse_single_linear: bool,
    /// Select winner modes by mean Euclidean distance instead of the
    /// smooth-L1 criterion.
    pub winner_euclidean: bool,
    /// Classification loss weight.
    pub lambda: f64,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 3,
            heads: 4,
            modes: 6,
            t_future: 30,
            pointnet_layers: 3,
            aggregation: Aggregation::Transformer,
            typing: Typing::Heterogeneous,
            merge_lane_connectivity: false,
            homogeneous_map_node: false,
            rotate_delta_pose: true,
            fuse_single_linear: false,
            winner_euclidean: false,
            lambda: 0.1,
            graph: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.hidden % 4 != 0 {
            return Err(format!("hidden size {} must be a positive multiple of 4", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(format!(
                "head count {} must divide hidden size {}",
                self.heads, self.hidden
            ));
        }
        if self.layers == 0 {
            return Err("need at least one layer".into());
        }
        if self.modes == 0 || self.t_future == 0 {
            return Err("modes and t_future must be positive".into());
        }
        if self.pointnet_layers == 0 {
            return Err("need at least one PointNet layer".into());
        }
        Ok(())
    }

    pub fn reference_mode(&self) -> ReferenceMode {
        self.graph.reference_mode
    }

    /// Parameter key for a node type under the configured typing.
    pub fn node_key(&self, nt: NodeType) -> NodeKey {
        if self.typing == Typing::Shared {
            return NodeKey::Shared;
        }
        match nt {
            NodeType::Agent => NodeKey::Agent,
            NodeType::Lane | NodeType::TrafficSign if self.homogeneous_map_node => NodeKey::Map,
            NodeType::Lane => NodeKey::Lane,
            NodeType::TrafficSign => NodeKey::TrafficSign,
        }
    }

    /// Parameter key for an edge type under the configured typing.
    pub fn edge_key(&self, et: EdgeType) -> EdgeKey {
        if self.typing == Typing::Shared {
            return EdgeKey::Shared;
        }
        if self.merge_lane_connectivity && is_lane_connectivity(et) {
            return EdgeKey::LaneConnect;
        }
        EdgeKey::from_edge_type(et)
    }

    /// Node keys that need parameter sets under this configuration.
    pub fn node_keys(&self) -> Vec<NodeKey> {
        match (self.typing, self.homogeneous_map_node) {
            (Typing::Shared, _) => vec![NodeKey::Shared],
            (_, true) => vec![NodeKey::Agent, NodeKey::Map],
            (_, false) => vec![NodeKey::Agent, NodeKey::Lane, NodeKey::TrafficSign],
        }
    }

    /// Edge keys that need parameter sets under this configuration.
    pub fn edge_keys(&self) -> Vec<EdgeKey> {
        if self.typing == Typing::Shared {
            return vec![EdgeKey::Shared];
        }
        let mut keys = Vec::new();
        for et in EDGE_TYPES {
            let k = self.edge_key(et);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    /// In-edge groups of a node key, in canonical edge-type order. The
    /// concatenation layout of the fusion MLP follows this order.
    pub fn in_edge_groups(&self, nk: NodeKey) -> Vec<EdgeKey> {
        if self.typing == Typing::Shared {
            return vec![EdgeKey::Shared];
        }
        let raw: &[EdgeType] = match nk {
            NodeKey::Agent => &[
                EdgeType::LaneAgent,
                EdgeType::TrafficSignAgent,
                EdgeType::AgentAgent,
            ],
            NodeKey::Lane => &[
                EdgeType::AgentLane,
                EdgeType::LaneNextLane,
                EdgeType::LanePreviousLane,
                EdgeType::LaneLeftLane,
                EdgeType::LaneRightLane,
            ],
            NodeKey::TrafficSign => &[EdgeType::AgentTrafficSign],
            NodeKey::Map => &[
                EdgeType::AgentLane,
                EdgeType::AgentTrafficSign,
                EdgeType::LaneNextLane,
                EdgeType::LanePreviousLane,
                EdgeType::LaneLeftLane,
                EdgeType::LaneRightLane,
            ],
            NodeKey::Shared => unreachable!("handled above"),
        };
        let mut groups = Vec::new();
        for &et in raw {
            let k = self.edge_key(et);
            if !groups.contains(&k) {
                groups.push(k);
            }
        }
        groups
    }
}

/// Named model variants used by ablation sweeps. `full` is the default
/// configuration; every other name flips one design switch.
pub const VARIANT_NAMES: [&str; 8] = [
    "full",
    "shared",
    "fixed_reference",
    "relative_edge",
    "gcn",
    "merged_lane_connectivity",
    "homogeneous_map_node",
    "fully_connected",
];

/// Apply a named variant on top of a base configuration.
pub fn apply_variant(cfg: &mut ModelConfig, name: &str) -> Result<(), String> {
    match name {
        "full" => {}
        "shared" => cfg.typing = Typing::Shared,
        "fixed_reference" => cfg.graph.reference_mode = ReferenceMode::FixedReference,
        "relative_edge" => cfg.graph.reference_mode = ReferenceMode::RelativeEdge,
        "gcn" => cfg.aggregation = Aggregation::GcnLike,
        "merged_lane_connectivity" => cfg.merge_lane_connectivity = true,
        "homogeneous_map_node" => cfg.homogeneous_map_node = true,
        "fully_connected" => cfg.graph.fully_connected = true,
        other => {
            return Err(format!(
                "unknown variant {other:?}; expected one of {VARIANT_NAMES:?}"
            ))
        }
    }
    Ok(())
}

fn is_lane_connectivity(et: EdgeType) -> bool {
    matches!(
        et,
        EdgeType::LaneNextLane
            | EdgeType::LanePreviousLane
            | EdgeType::LaneLeftLane
            | EdgeType::LaneRightLane
    )
}

/// Node parameter keys after typing/merging is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKey {
    Agent,
    Lane,
    TrafficSign,
    Map,
    Shared,
}

impl NodeKey {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKey::Agent => "agent",
            NodeKey::Lane => "lane",
            NodeKey::TrafficSign => "trafficsign",
            NodeKey::Map => "map",
            NodeKey::Shared => "shared",
        }
    }
}

/// Edge parameter keys after typing/merging is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKey {
    AgentLane,
    AgentTrafficSign,
    LaneAgent,
    LaneNext,
    LanePrev,
    LaneLeft,
    LaneRight,
    TrafficSignAgent,
    AgentAgent,
    LaneConnect,
    Shared,
}

impl EdgeKey {
    fn from_edge_type(et: EdgeType) -> Self {
        match et {
            EdgeType::AgentLane => EdgeKey::AgentLane,
            EdgeType::AgentTrafficSign => EdgeKey::AgentTrafficSign,
            EdgeType::LaneAgent => EdgeKey::LaneAgent,
            EdgeType::LaneNextLane => EdgeKey::LaneNext,
            EdgeType::LanePreviousLane => EdgeKey::LanePrev,
            EdgeType::LaneLeftLane => EdgeKey::LaneLeft,
            EdgeType::LaneRightLane => EdgeKey::LaneRight,
            EdgeType::TrafficSignAgent => EdgeKey::TrafficSignAgent,
            EdgeType::AgentAgent => EdgeKey::AgentAgent,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EdgeKey::AgentLane => "agent_lane",
            EdgeKey::AgentTrafficSign => "agent_trafficsign",
            EdgeKey::LaneAgent => "lane_agent",
            EdgeKey::LaneNext => "lane_next",
            EdgeKey::LanePrev => "lane_prev",
            EdgeKey::LaneLeft => "lane_left",
            EdgeKey::LaneRight => "lane_right",
            EdgeKey::TrafficSignAgent => "trafficsign_agent",
            EdgeKey::AgentAgent => "agent_agent",
            EdgeKey::LaneConnect => "lane_connect",
            EdgeKey::Shared => "shared",
        }
    }
}

/// Fusion map after the per-relation attention set.
#[derive(Debug, Clone, Copy)]
pub enum FuseIds {
    Mlp(MlpIds),
    Linear(LinearIds),
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub attn: BTreeMap<EdgeKey, MhaIds>,
    pub gcn: BTreeMap<EdgeKey, MlpIds>,
    pub fuse_ln: BTreeMap<NodeKey, LnIds>,
    pub fuse: BTreeMap<NodeKey, FuseIds>,
    pub ffn_ln: BTreeMap<NodeKey, LnIds>,
    pub ffn: BTreeMap<NodeKey, MlpIds>,
    pub edge_ln: BTreeMap<EdgeKey, LnIds>,
    pub edge_mlp: BTreeMap<EdgeKey, MlpIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub reg1: LinearIds,
    pub reg2: LinearIds,
    pub reg_out: LinearIds,
    pub cls1: LinearIds,
    pub cls2: LinearIds,
    pub cls_out: LinearIds,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub agent_enc: AgentEncoderIds,
    pub map_enc: MapEncoderIds,
    pub viewshift: BTreeMap<NodeKey, ViewShiftIds>,
    pub layers: Vec<LayerIds>,
    pub heads: [HeadIds; 3],
}

pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: ParamTable<S>,
    pub init_seed: u64,
    ids: ModelIds,
}

impl<S: Scalar> Model<S> {
    /// Build a model with seeded uniform initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, String> {
        cfg.validate()?;
        let h = cfg.hidden;
        let mut params = ParamTable::new();
        let agent_enc = insert_agent_encoder(&mut params, seed, h);
        let map_enc = insert_map_encoder(&mut params, seed, h, cfg.pointnet_layers);

        let mut viewshift = BTreeMap::new();
        for nk in cfg.node_keys() {
            viewshift.insert(nk, insert_view_shift(&mut params, seed, nk.name(), h));
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let mut attn = BTreeMap::new();
            let mut gcn = BTreeMap::new();
            for ek in cfg.edge_keys() {
                match cfg.aggregation {
                    Aggregation::Transformer => {
                        attn.insert(
                            ek,
                            insert_mha(&mut params, seed, &format!("layer{k}.attn.{}", ek.name()), h),
                        );
                    }
                    Aggregation::GcnLike => {
                        gcn.insert(
                            ek,
                            insert_mlp(&mut params, seed, &format!("layer{k}.gcn.{}", ek.name()), h, h, h),
                        );
                    }
                }
            }
            let mut fuse_ln = BTreeMap::new();
            let mut fuse = BTreeMap::new();
            let mut ffn_ln = BTreeMap::new();
            let mut ffn = BTreeMap::new();
            for nk in cfg.node_keys() {
                let n_r = cfg.in_edge_groups(nk).len();
                let fuse_name = format!("layer{k}.fuse.{}", nk.name());
                fuse_ln.insert(nk, insert_layer_norm(&mut params, &fuse_name, h));
                let f = if cfg.fuse_single_linear {
                    FuseIds::Linear(insert_linear(
                        &mut params,
                        seed,
                        &format!("{fuse_name}.lin"),
                        n_r * h,
                        h,
                    ))
                } else {
                    FuseIds::Mlp(insert_mlp(&mut params, seed, &fuse_name, n_r * h, h, h))
                };
                fuse.insert(nk, f);
                let ffn_name = format!("layer{k}.ffn.{}", nk.name());
                ffn_ln.insert(nk, insert_layer_norm(&mut params, &ffn_name, h));
                ffn.insert(nk, insert_mlp(&mut params, seed, &ffn_name, h, 2 * h, h));
            }
            let mut edge_ln = BTreeMap::new();
            let mut edge_mlp = BTreeMap::new();
            for ek in cfg.edge_keys() {
                let name = format!("layer{k}.edge.{}", ek.name());
                edge_ln.insert(ek, insert_layer_norm(&mut params, &name, h));
                edge_mlp.insert(ek, insert_mlp(&mut params, seed, &name, h + 4 + h, h, h));
            }
            layers.push(LayerIds {
                attn,
                gcn,
                fuse_ln,
                fuse,
                ffn_ln,
                ffn,
                edge_ln,
                edge_mlp,
            });
        }

        let head = |params: &mut ParamTable<S>, type_name: &str| HeadIds {
            reg1: insert_linear(params, seed, &format!("head.{type_name}.reg.l1"), h, h),
            reg2: insert_linear(params, seed, &format!("head.{type_name}.reg.l2"), h, h),
            reg_out: insert_linear(
                params,
                seed,
                &format!("head.{type_name}.reg.out"),
                h,
                cfg.modes * cfg.t_future * 2,
            ),
            cls1: insert_linear(params, seed, &format!("head.{type_name}.cls.l1"), h, h),
            cls2: insert_linear(params, seed, &format!("head.{type_name}.cls.l2"), h, h),
            cls_out: insert_linear(params, seed, &format!("head.{type_name}.cls.out"), h, cfg.modes),
        };
        let heads = [
            head(&mut params, AgentType::Vehicle.name()),
            head(&mut params, AgentType::Pedestrian.name()),
            head(&mut params, AgentType::Cyclist.name()),
        ];

        Ok(Self {
            cfg,
            params,
            init_seed: seed,
            ids: ModelIds {
                agent_enc,
                map_enc,
                viewshift,
                layers,
                heads,
            },
        })
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    pub fn head_ids(&self, t: AgentType) -> &HeadIds {
        match t {
            AgentType::Vehicle => &self.ids.heads[0],
            AgentType::Pedestrian => &self.ids.heads[1],
            AgentType::Cyclist => &self.ids.heads[2],
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        save_checkpoint(&self.params, w)
    }

    /// Load parameters by name from a checkpoint into this model.
    pub fn load<R: Read>(&mut self, r: &mut R) -> Result<(), CheckpointError> {
        let loaded = load_checkpoint::<S, _>(r)?;
        self.params.load_from(&loaded)
    }
}
