//! The three-layer structure-free topometric map, submap construction with
//! keyframe selection, and the on-disk map format.
//!
//! A map is one shared node set plus three independent edge layers:
//! covisibility (matching strength), odometry factors (relative pose +
//! covariance, the factor-graph layer) and traversability (planning costs).
//! Connectivity across layers is independent: a covisibility edge implies
//! nothing about traversability and vice versa.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::Matrix6;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::se3::{Covariance6, Pose};

pub const FORMAT_VERSION: u32 = 1;
/// Descriptor dimension used by default throughout the pipeline.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 256;
/// Keyframe displacement thresholds used when none are configured.
pub const DEFAULT_TRANSLATION_THRESHOLD_M: f64 = 3.9;
pub const DEFAULT_ROTATION_THRESHOLD_DEG: f64 = 60.0;
/// Covisibility strength assigned to consecutive-keyframe edges.
pub const CONSECUTIVE_COVIS_STRENGTH: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("submap construction requires at least one frame")]
    EmptyInput,
    #[error("frames are not temporally ordered at index {0}")]
    UnorderedFrames(usize),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("edge endpoint {0} does not exist")]
    MissingEndpoint(NodeId),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("invalid node attribute: {0}")]
    InvalidNode(String),
    #[error("invalid edge attribute: {0}")]
    InvalidEdge(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported map schema version {found} (expected {FORMAT_VERSION})")]
    SchemaVersionMismatch { found: String },
    #[error("corrupt record at line {line}: {message}")]
    CorruptRecord { line: usize, message: String },
}

/// Globally unique node identifier: `(session_id << 32) | local_index`, so
/// merging never renumbers nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl NodeId {
    pub fn new(session: u32, index: u32) -> Self {
        NodeId(((session as u64) << 32) | index as u64)
    }

    pub fn session(&self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub fn index(&self) -> u32 {
        (self.0 & 0xffff_ffff) as u32
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct MapNode {
    pub id: NodeId,
    pub session: u32,
    /// Capture time, seconds since epoch.
    pub timestamp: f64,
    pub pose_world: Pose,
    /// Image-quality score in [0, 100].
    pub quality: f64,
    /// Unit-norm place descriptor.
    pub descriptor: Vec<f64>,
    /// Content hash of the stored snapshot bytes, if any.
    pub payload_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FactorKind {
    Odometry,
    LoopClosure,
}

impl FactorKind {
    fn as_str(&self) -> &'static str {
        match self {
            FactorKind::Odometry => "odometry",
            FactorKind::LoopClosure => "loop_closure",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "odometry" => Some(FactorKind::Odometry),
            "loop_closure" => Some(FactorKind::LoopClosure),
            _ => None,
        }
    }
}

/// Odometry-layer factor edge: `relative` is the pose of `to` expressed in
/// `from`'s frame.
#[derive(Debug, Clone)]
pub struct OdomFactorEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub relative: Pose,
    pub covariance: Covariance6,
    pub kind: FactorKind,
}

/// Keyframe selection thresholds; a frame becomes a keyframe when its
/// displacement from the previous keyframe surpasses either threshold.
#[derive(Debug, Clone, Copy)]
pub struct KeyframePolicy {
    pub translation_threshold_m: f64,
    pub rotation_threshold_deg: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            translation_threshold_m: DEFAULT_TRANSLATION_THRESHOLD_M,
            rotation_threshold_deg: DEFAULT_ROTATION_THRESHOLD_DEG,
        }
    }
}

/// Brownian noise rates used to assign covariances to keyframe odometry
/// factors (variance grows linearly with traveled distance).
#[derive(Debug, Clone, Copy)]
pub struct SubmapNoiseModel {
    pub rot_var_per_m: f64,
    pub trans_var_per_m: f64,
}

impl Default for SubmapNoiseModel {
    fn default() -> Self {
        SubmapNoiseModel {
            rot_var_per_m: 1e-6,
            trans_var_per_m: 1e-4,
        }
    }
}

/// One input frame for submap construction.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub local_pose: Pose,
    pub descriptor: Vec<f64>,
    pub quality: f64,
    pub payload: Option<Vec<u8>>,
}

/// The three-layer topometric map. Many readers or one writer; the merge
/// orchestrator is the sole writer.
#[derive(Debug, Clone, Default)]
pub struct TopometricMap {
    nodes: BTreeMap<NodeId, MapNode>,
    covis: BTreeMap<(NodeId, NodeId), f64>,
    odom: Vec<OdomFactorEdge>,
    trav: BTreeMap<(NodeId, NodeId), f64>,
    payloads: BTreeMap<String, Vec<u8>>,
    descriptor_dim: usize,
}

fn canonical(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl TopometricMap {
    pub fn new(descriptor_dim: usize) -> Self {
        TopometricMap {
            descriptor_dim,
            ..Default::default()
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&MapNode> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut MapNode> {
        self.nodes.get_mut(&id)
    }

    /// Nodes in id order (session-major, trajectory-minor), which is the
    /// sequence order assumed by the sequence matcher.
    pub fn nodes(&self) -> impl Iterator<Item = &MapNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn sessions(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.nodes.values().map(|n| n.session).collect();
        s.dedup();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn covis_edges(&self) -> impl Iterator<Item = (&(NodeId, NodeId), &f64)> {
        self.covis.iter()
    }

    pub fn odom_edges(&self) -> &[OdomFactorEdge] {
        &self.odom
    }

    pub fn trav_edges(&self) -> impl Iterator<Item = (&(NodeId, NodeId), &f64)> {
        self.trav.iter()
    }

    pub fn covis_count(&self) -> usize {
        self.covis.len()
    }

    pub fn odom_count(&self) -> usize {
        self.odom.len()
    }

    pub fn trav_count(&self) -> usize {
        self.trav.len()
    }

    pub fn has_covis(&self, a: NodeId, b: NodeId) -> bool {
        self.covis.contains_key(&canonical(a, b))
    }

    pub fn has_trav(&self, a: NodeId, b: NodeId) -> bool {
        self.trav.contains_key(&canonical(a, b))
    }

    pub fn payload(&self, hash: &str) -> Option<&[u8]> {
        self.payloads.get(hash).map(|v| v.as_slice())
    }

    pub fn insert_node(&mut self, node: MapNode) -> Result<(), MapError> {
        if self.nodes.contains_key(&node.id) {
            return Err(MapError::DuplicateNode(node.id));
        }
        if node.descriptor.len() != self.descriptor_dim {
            return Err(MapError::InvalidNode(format!(
                "descriptor dimension {} != map dimension {}",
                node.descriptor.len(),
                self.descriptor_dim
            )));
        }
        let norm = node.descriptor.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(MapError::InvalidNode(format!(
                "descriptor norm {norm} not unit"
            )));
        }
        if !(0.0..=100.0).contains(&node.quality) {
            return Err(MapError::InvalidNode(format!(
                "quality {} outside [0, 100]",
                node.quality
            )));
        }
        self.nodes.insert(node.id, node);
        Ok(())
    }

    pub fn insert_payload(&mut self, bytes: Vec<u8>) -> String {
        let hash = content_hash(&bytes);
        self.payloads.entry(hash.clone()).or_insert(bytes);
        hash
    }

    fn check_endpoints(&self, a: NodeId, b: NodeId) -> Result<(), MapError> {
        if a == b {
            return Err(MapError::SelfLoop(a));
        }
        for id in [a, b] {
            if !self.nodes.contains_key(&id) {
                return Err(MapError::MissingEndpoint(id));
            }
        }
        Ok(())
    }

    /// Inserts or overwrites an (undirected) covisibility edge.
    pub fn add_covis(&mut self, a: NodeId, b: NodeId, strength: f64) -> Result<(), MapError> {
        self.check_endpoints(a, b)?;
        if strength < 0.0 {
            return Err(MapError::InvalidEdge(format!(
                "covisibility strength {strength} < 0"
            )));
        }
        self.covis.insert(canonical(a, b), strength);
        Ok(())
    }

    pub fn add_trav(&mut self, a: NodeId, b: NodeId, cost: f64) -> Result<(), MapError> {
        self.check_endpoints(a, b)?;
        if cost <= 0.0 {
            return Err(MapError::InvalidEdge(format!(
                "traversability cost {cost} must be positive"
            )));
        }
        self.trav.insert(canonical(a, b), cost);
        Ok(())
    }

    pub fn add_odom(&mut self, edge: OdomFactorEdge) -> Result<(), MapError> {
        self.check_endpoints(edge.from, edge.to)?;
        self.odom.push(edge);
        Ok(())
    }

    pub fn remove_covis(&mut self, a: NodeId, b: NodeId) {
        self.covis.remove(&canonical(a, b));
    }

    pub fn remove_trav(&mut self, a: NodeId, b: NodeId) {
        self.trav.remove(&canonical(a, b));
    }

    /// Removes a node and every incident edge in all three layers. The
    /// caller (node culling) is responsible for re-stitching.
    pub fn remove_node(&mut self, id: NodeId) {
        self.nodes.remove(&id);
        self.covis.retain(|&(a, b), _| a != id && b != id);
        self.trav.retain(|&(a, b), _| a != id && b != id);
        self.odom.retain(|e| e.from != id && e.to != id);
    }

    pub fn covis_neighbors(&self, id: NodeId) -> Vec<(NodeId, f64)> {
        self.covis
            .iter()
            .filter_map(|(&(a, b), &s)| {
                if a == id {
                    Some((b, s))
                } else if b == id {
                    Some((a, s))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn trav_neighbors(&self, id: NodeId) -> Vec<(NodeId, f64)> {
        self.trav
            .iter()
            .filter_map(|(&(a, b), &c)| {
                if a == id {
                    Some((b, c))
                } else if b == id {
                    Some((a, c))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn odom_edges_of(&self, id: NodeId) -> Vec<&OdomFactorEdge> {
        self.odom
            .iter()
            .filter(|e| e.from == id || e.to == id)
            .collect()
    }

    /// Disjoint session components implied by cross-session loop-closure
    /// factors. Sessions without such factors form their own component.
    pub fn session_components(&self) -> Vec<Vec<u32>> {
        let sessions = self.sessions();
        let mut parent: BTreeMap<u32, u32> = sessions.iter().map(|&s| (s, s)).collect();
        fn find(parent: &mut BTreeMap<u32, u32>, mut s: u32) -> u32 {
            while parent[&s] != s {
                let p = parent[&s];
                let gp = parent[&p];
                parent.insert(s, gp);
                s = gp;
            }
            s
        }
        for e in &self.odom {
            let (sa, sb) = (e.from.session(), e.to.session());
            if sa != sb {
                let ra = find(&mut parent, sa);
                let rb = find(&mut parent, sb);
                if ra != rb {
                    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                    parent.insert(hi, lo);
                }
            }
        }
        let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &s in &sessions {
            let r = find(&mut parent, s);
            groups.entry(r).or_default().push(s);
        }
        groups.into_values().collect()
    }

    pub fn component_count(&self) -> usize {
        self.session_components().len()
    }

    /// Connected components of the odometry layer over nodes (used to verify
    /// culling never disconnects anything).
    pub fn odom_node_components(&self) -> Vec<Vec<NodeId>> {
        let mut parent: BTreeMap<NodeId, NodeId> =
            self.nodes.keys().map(|&id| (id, id)).collect();
        fn find(parent: &mut BTreeMap<NodeId, NodeId>, mut s: NodeId) -> NodeId {
            while parent[&s] != s {
                let p = parent[&s];
                let gp = parent[&p];
                parent.insert(s, gp);
                s = gp;
            }
            s
        }
        for e in &self.odom {
            let ra = find(&mut parent, e.from);
            let rb = find(&mut parent, e.to);
            if ra != rb {
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent.insert(hi, lo);
            }
        }
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        let mut groups: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for id in ids {
            let r = find(&mut parent, id);
            groups.entry(r).or_default().push(id);
        }
        groups.into_values().collect()
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Builds a single-session submap from temporally ordered frames using the
/// default odometry noise model for factor covariances.
pub fn build_submap(
    session: u32,
    frames: &[Frame],
    policy: &KeyframePolicy,
) -> Result<TopometricMap, MapError> {
    build_submap_with(session, frames, policy, &SubmapNoiseModel::default())
}

pub fn build_submap_with(
    session: u32,
    frames: &[Frame],
    policy: &KeyframePolicy,
    noise: &SubmapNoiseModel,
) -> Result<TopometricMap, MapError> {
    if frames.is_empty() {
        return Err(MapError::EmptyInput);
    }
    for i in 1..frames.len() {
        if frames[i].timestamp < frames[i - 1].timestamp {
            return Err(MapError::UnorderedFrames(i));
        }
    }
    let dim = frames[0].descriptor.len();
    let mut map = TopometricMap::new(dim);

    // Keyframe selection: the first frame is always kept; afterwards a frame
    // is kept when its displacement from the previous keyframe surpasses the
    // translational OR the rotational threshold.
    let mut keyframes: Vec<usize> = vec![0];
    // Path length traveled since the previous keyframe, per retained keyframe.
    let mut path_lengths: Vec<f64> = Vec::new();
    let mut since_kf = 0.0;
    for i in 1..frames.len() {
        since_kf += (frames[i].local_pose.translation() - frames[i - 1].local_pose.translation())
            .norm();
        let prev = &frames[*keyframes.last().unwrap()];
        let rel = prev.local_pose.inverse().compose(&frames[i].local_pose);
        let trans = rel.translation().norm();
        let rot_deg = rel.rotation_angle().to_degrees();
        if trans > policy.translation_threshold_m || rot_deg > policy.rotation_threshold_deg {
            keyframes.push(i);
            path_lengths.push(since_kf);
            since_kf = 0.0;
        }
    }

    for (k, &fi) in keyframes.iter().enumerate() {
        let f = &frames[fi];
        let payload_ref = f.payload.as_ref().map(|p| map.insert_payload(p.clone()));
        map.insert_node(MapNode {
            id: NodeId::new(session, k as u32),
            session,
            timestamp: f.timestamp,
            pose_world: f.local_pose,
            quality: f.quality,
            descriptor: f.descriptor.clone(),
            payload_ref,
        })?;
    }

    for k in 1..keyframes.len() {
        let a = NodeId::new(session, (k - 1) as u32);
        let b = NodeId::new(session, k as u32);
        let pa = frames[keyframes[k - 1]].local_pose;
        let pb = frames[keyframes[k]].local_pose;
        let rel = pa.inverse().compose(&pb);
        let dist = path_lengths[k - 1].max(1e-6);
        map.add_odom(OdomFactorEdge {
            from: a,
            to: b,
            relative: rel,
            covariance: Covariance6::diagonal(
                noise.rot_var_per_m * dist,
                noise.trans_var_per_m * dist,
            ),
            kind: FactorKind::Odometry,
        })?;
        map.add_covis(a, b, CONSECUTIVE_COVIS_STRENGTH)?;
        let euclid = (pb.translation() - pa.translation()).norm().max(1e-6);
        map.add_trav(a, b, euclid)?;
    }
    Ok(map)
}

/// Theoretical storage footprint in bytes of the snapshot images backing a
/// map: `N * 3 * W * H * C`, where `C` is the average JPEG compression
/// ratio. Images dominate structure-free map size, so everything else is
/// ignored.
pub fn theoretical_map_size(
    map: &TopometricMap,
    width: usize,
    height: usize,
    compression_ratio: f64,
) -> f64 {
    assert!(
        compression_ratio > 0.0 && compression_ratio <= 1.0,
        "compression ratio must be in (0, 1]"
    );
    map.len() as f64 * 3.0 * width as f64 * height as f64 * compression_ratio
}

fn fmt_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn upper_triangle(m: &Matrix6<f64>) -> [f64; 21] {
    let mut out = [0.0; 21];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

fn from_upper_triangle(v: &[f64]) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

/// Serializes a map to its newline-delimited text format. Output is
/// deterministic: saving the same map twice yields identical bytes.
pub fn serialize_map(map: &TopometricMap) -> String {
    let mut out = String::new();
    out.push_str(&format!("TOPOMAP v{FORMAT_VERSION} dim={}\n", map.descriptor_dim));
    for node in map.nodes.values() {
        let p = node.pose_world.to_tuple();
        out.push_str(&format!(
            "NODE {} {} {} {} {} {}\n",
            node.id,
            node.session,
            node.timestamp,
            fmt_floats(&p),
            node.quality,
            format!(
                "{} {}",
                fmt_floats(&node.descriptor),
                node.payload_ref.as_deref().unwrap_or("-")
            ),
        ));
    }
    for (&(a, b), &s) in &map.covis {
        out.push_str(&format!("EDGE COVIS {a} {b} {s}\n"));
    }
    let mut odom: Vec<&OdomFactorEdge> = map.odom.iter().collect();
    odom.sort_by_key(|e| (e.from, e.to, e.kind));
    for e in odom {
        out.push_str(&format!(
            "EDGE ODOM {} {} {} {} {}\n",
            e.from,
            e.to,
            e.kind.as_str(),
            fmt_floats(&e.relative.to_tuple()),
            fmt_floats(&upper_triangle(e.covariance.matrix())),
        ));
    }
    for (&(a, b), &c) in &map.trav {
        out.push_str(&format!("EDGE TRAV {a} {b} {c}\n"));
    }
    out
}

/// Writes the map file plus a sidecar blob directory (`<path>.blobs/`)
/// holding payload bytes keyed by content hash, so culling a node never
/// rewrites the whole map.
pub fn save_map(map: &TopometricMap, path: &Path) -> Result<(), MapError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(serialize_map(map).as_bytes())?;
    if !map.payloads.is_empty() {
        let blob_dir = blob_dir_for(path);
        std::fs::create_dir_all(&blob_dir)?;
        for (hash, bytes) in &map.payloads {
            let p = blob_dir.join(hash);
            if !p.exists() {
                std::fs::write(p, bytes)?;
            }
        }
    }
    Ok(())
}

fn blob_dir_for(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".blobs");
    path.with_file_name(name)
}

struct RecordParser<'a> {
    line: usize,
    tokens: Vec<&'a str>,
    cursor: usize,
}

impl<'a> RecordParser<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        RecordParser {
            line,
            tokens: text.split_whitespace().collect(),
            cursor: 0,
        }
    }

    fn corrupt(&self, message: impl Into<String>) -> MapError {
        MapError::CorruptRecord {
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, MapError> {
        let t = self
            .tokens
            .get(self.cursor)
            .copied()
            .ok_or_else(|| self.corrupt(format!("missing field: {what}")))?;
        self.cursor += 1;
        Ok(t)
    }

    fn next_f64(&mut self, what: &str) -> Result<f64, MapError> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| self.corrupt(format!("bad float for {what}: {t}")))
    }

    fn next_u64(&mut self, what: &str) -> Result<u64, MapError> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| self.corrupt(format!("bad integer for {what}: {t}")))
    }

    fn next_floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>, MapError> {
        (0..n).map(|_| self.next_f64(what)).collect()
    }
}

pub fn parse_map(text: &str) -> Result<TopometricMap, MapError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(MapError::CorruptRecord {
            line: 1,
            message: "empty file".into(),
        })?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some("TOPOMAP") {
        return Err(MapError::CorruptRecord {
            line: 1,
            message: "missing TOPOMAP header".into(),
        });
    }
    let version = hp.next().unwrap_or("");
    if version != format!("v{FORMAT_VERSION}") {
        return Err(MapError::SchemaVersionMismatch {
            found: version.to_string(),
        });
    }
    let dim: usize = hp
        .next()
        .and_then(|t| t.strip_prefix("dim="))
        .and_then(|t| t.parse().ok())
        .ok_or(MapError::CorruptRecord {
            line: 1,
            message: "missing dim= field".into(),
        })?;

    let mut map = TopometricMap::new(dim);
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut p = RecordParser::new(line_no, line);
        match p.next("record tag")? {
            "NODE" => {
                let id = NodeId(p.next_u64("node id")?);
                let session = p.next_u64("session")? as u32;
                let timestamp = p.next_f64("timestamp")?;
                let pose = Pose::from_tuple(&p.next_floats(7, "pose")?);
                let quality = p.next_f64("quality")?;
                let descriptor = p.next_floats(dim, "descriptor")?;
                let payload = p.next("payload hash")?;
                let payload_ref = (payload != "-").then(|| payload.to_string());
                map.insert_node(MapNode {
                    id,
                    session,
                    timestamp,
                    pose_world: pose,
                    quality,
                    descriptor,
                    payload_ref,
                })
                .map_err(|e| p.corrupt(e.to_string()))?;
            }
            "EDGE" => {
                let layer = p.next("layer")?;
                let a = NodeId(p.next_u64("endpoint a")?);
                let b = NodeId(p.next_u64("endpoint b")?);
                match layer {
                    "COVIS" => {
                        let s = p.next_f64("strength")?;
                        map.add_covis(a, b, s).map_err(|e| p.corrupt(e.to_string()))?;
                    }
                    "TRAV" => {
                        let c = p.next_f64("cost")?;
                        map.add_trav(a, b, c).map_err(|e| p.corrupt(e.to_string()))?;
                    }
                    "ODOM" => {
                        let kind = FactorKind::parse(p.next("factor kind")?)
                            .ok_or_else(|| p.corrupt("unknown factor kind"))?;
                        let rel = Pose::from_tuple(&p.next_floats(7, "relative pose")?);
                        let cov = from_upper_triangle(&p.next_floats(21, "covariance")?);
                        let covariance = Covariance6::from_matrix(cov)
                            .map_err(|e| p.corrupt(e.to_string()))?;
                        map.add_odom(OdomFactorEdge {
                            from: a,
                            to: b,
                            relative: rel,
                            covariance,
                            kind,
                        })
                        .map_err(|e| p.corrupt(e.to_string()))?;
                    }
                    other => return Err(p.corrupt(format!("unknown edge layer {other}"))),
                }
            }
            other => return Err(p.corrupt(format!("unknown record tag {other}"))),
        }
    }
    Ok(map)
}

pub fn load_map(path: &Path) -> Result<TopometricMap, MapError> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    BufReader::new(file).read_to_string(&mut text)?;
    let mut map = parse_map(&text)?;
    // Pull referenced payloads back in from the sidecar directory if present.
    let blob_dir = blob_dir_for(path);
    if blob_dir.is_dir() {
        let hashes: Vec<String> = map
            .nodes
            .values()
            .filter_map(|n| n.payload_ref.clone())
            .collect();
        for hash in hashes {
            let p = blob_dir.join(&hash);
            if p.is_file() {
                map.payloads.insert(hash, std::fs::read(p)?);
            }
        }
    }
    Ok(map)
}

/// Graph-topology export in DOT format (all three layers, labeled).
pub fn to_dot(map: &TopometricMap) -> String {
    let mut out = String::from("graph topomap {\n");
    for node in map.nodes.values() {
        let t = node.pose_world.translation();
        out.push_str(&format!(
            "  n{} [label=\"{}\" pos=\"{:.3},{:.3}!\"];\n",
            node.id, node.id, t.x, t.y
        ));
    }
    for (&(a, b), &s) in &map.covis {
        out.push_str(&format!(
            "  n{a} -- n{b} [layer=\"covis\" weight={s} color=blue];\n"
        ));
    }
    let mut odom: Vec<&OdomFactorEdge> = map.odom.iter().collect();
    odom.sort_by_key(|e| (e.from, e.to, e.kind));
    for e in odom {
        out.push_str(&format!(
            "  n{} -- n{} [layer=\"odom\" kind=\"{}\" color=red];\n",
            e.from,
            e.to,
            e.kind.as_str()
        ));
    }
    for (&(a, b), &c) in &map.trav {
        out.push_str(&format!(
            "  n{a} -- n{b} [layer=\"trav\" cost={c} color=green];\n"
        ));
    }
    out.push_str("}\n");
    out
}

/// GeoJSON export: one LineString per session (nodes in trajectory order),
/// for overlay plots.
pub fn to_geojson(map: &TopometricMap) -> String {
    let mut features = Vec::new();
    for session in map.sessions() {
        let coords: Vec<String> = map
            .nodes
            .values()
            .filter(|n| n.session == session)
            .map(|n| {
                let t = n.pose_world.translation();
                format!("[{},{}]", t.x, t.y)
            })
            .collect();
        features.push(format!(
            "{{\"type\":\"Feature\",\"properties\":{{\"session\":{session}}},\"geometry\":{{\"type\":\"LineString\",\"coordinates\":[{}]}}}}",
            coords.join(",")
        ));
    }
    format!(
        "{{\"type\":\"FeatureCollection\",\"features\":[{}]}}",
        features.join(",")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    pub(crate) fn unit_descriptor(dim: usize, seed: u64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim)
            .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) % 1000) as f64 / 1000.0 + 0.001)
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    fn frame_at(t: f64, pose: Pose) -> Frame {
        Frame {
            timestamp: t,
            local_pose: pose,
            descriptor: unit_descriptor(8, 42),
            quality: 80.0,
            payload: None,
        }
    }

    #[test]
    fn identical_frames_make_single_node() {
        let frames: Vec<Frame> = (0..10)
            .map(|i| frame_at(i as f64, Pose::identity()))
            .collect();
        let map = build_submap(0, &frames, &KeyframePolicy::default()).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.odom_count(), 0);
        assert_eq!(map.covis_count(), 0);
        assert_eq!(map.trav_count(), 0);
    }

    #[test]
    fn keyframes_at_first_threshold_exceedance() {
        // Frames along x at 0..=10 m with a 3.9 m threshold keep 0, 4, 8.
        let frames: Vec<Frame> = (0..=10)
            .map(|i| frame_at(i as f64, Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))))
            .collect();
        let map = build_submap(0, &frames, &KeyframePolicy::default()).unwrap();
        let xs: Vec<f64> = map
            .nodes()
            .map(|n| n.pose_world.translation().x)
            .collect();
        assert_eq!(xs, vec![0.0, 4.0, 8.0]);
        assert_eq!(map.odom_count(), 2);
        assert_eq!(map.covis_count(), 2);
        assert_eq!(map.trav_count(), 2);
    }

    #[test]
    fn default_policy_matches_reference_thresholds() {
        let p = KeyframePolicy::default();
        assert_eq!(p.translation_threshold_m, 3.9);
        assert_eq!(p.rotation_threshold_deg, 60.0);
    }

    #[test]
    fn rotation_only_keyframes() {
        let frames: Vec<Frame> = (0..5)
            .map(|i| frame_at(i as f64, Pose::from_yaw_xy((i as f64) * 0.7, 0.0, 0.0)))
            .collect();
        // 0.7 rad = 40.1 deg per frame; 60 deg threshold trips every 2 frames.
        let map = build_submap(0, &frames, &KeyframePolicy::default()).unwrap();
        assert_eq!(map.len(), 3);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            build_submap(0, &[], &KeyframePolicy::default()),
            Err(MapError::EmptyInput)
        ));
    }

    #[test]
    fn submap_nodes_are_input_subsequence() {
        let frames: Vec<Frame> = (0..40)
            .map(|i| {
                frame_at(
                    i as f64,
                    Pose::from_yaw_xy((i as f64 * 0.21).sin(), i as f64 * 1.3, (i as f64).cos()),
                )
            })
            .collect();
        let map = build_submap(3, &frames, &KeyframePolicy::default()).unwrap();
        assert!(map.len() <= frames.len());
        let inputs: Vec<[f64; 7]> = frames.iter().map(|f| f.local_pose.to_tuple()).collect();
        let mut search_from = 0;
        for n in map.nodes() {
            let t = n.pose_world.to_tuple();
            let found = inputs[search_from..]
                .iter()
                .position(|p| *p == t)
                .expect("node pose must come from the input frames");
            search_from += found + 1;
        }
    }

    fn three_node_chain() -> TopometricMap {
        let frames: Vec<Frame> = (0..3)
            .map(|i| frame_at(i as f64, Pose::from_translation(Vector3::new(i as f64 * 5.0, 0.3, 0.0))))
            .collect();
        build_submap(7, &frames, &KeyframePolicy::default()).unwrap()
    }

    #[test]
    fn save_load_round_trip_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.topomap");
        let map = TopometricMap::new(16);
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.descriptor_dim(), 16);
    }

    #[test]
    fn save_load_round_trip_chain_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.topomap");
        let map = three_node_chain();
        save_map(&map, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(loaded.len(), map.len());
        let path2 = dir.path().join("chain2.topomap");
        save_map(&loaded, &path2).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second, "re-serialization must be byte-identical");
    }

    #[test]
    fn round_trip_preserves_layer_cardinalities_and_poses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layers.topomap");
        let mut map = three_node_chain();
        let ids = map.node_ids();
        map.add_covis(ids[0], ids[2], 17.0).unwrap();
        map.add_odom(OdomFactorEdge {
            from: ids[0],
            to: ids[2],
            relative: Pose::from_yaw_xy(0.2, 10.0, 0.0),
            covariance: Covariance6::isotropic(1e-4),
            kind: FactorKind::LoopClosure,
        })
        .unwrap();
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(loaded.covis_count(), map.covis_count());
        assert_eq!(loaded.odom_count(), map.odom_count());
        assert_eq!(loaded.trav_count(), map.trav_count());
        for (a, b) in map.node_ids().iter().zip(loaded.node_ids()) {
            let pa = map.node(*a).unwrap().pose_world;
            let pb = loaded.node(b).unwrap().pose_world;
            let (t, r) = crate::se3::pose_error(&pa, &pb);
            assert!(t < 1e-12 && r < 1e-12);
        }
    }

    #[test]
    fn layer_independence_under_removal() {
        let mut map = three_node_chain();
        let (covis_before, odom_before) = (map.covis_count(), map.odom_count());
        let trav_pairs: Vec<(NodeId, NodeId)> =
            map.trav_edges().map(|(&(a, b), _)| (a, b)).collect();
        for (a, b) in trav_pairs {
            map.remove_trav(a, b);
        }
        assert_eq!(map.trav_count(), 0);
        assert_eq!(map.covis_count(), covis_before);
        assert_eq!(map.odom_count(), odom_before);
    }

    #[test]
    fn corrupt_record_reports_line() {
        let mut text = serialize_map(&three_node_chain());
        text.push_str("EDGE COVIS 1 nonsense 3\n");
        let lines = text.lines().count();
        match parse_map(&text) {
            Err(MapError::CorruptRecord { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected corrupt record, got {other:?}"),
        }
    }

    #[test]
    fn schema_version_mismatch() {
        let text = "TOPOMAP v9 dim=4\n";
        assert!(matches!(
            parse_map(text),
            Err(MapError::SchemaVersionMismatch { .. })
        ));
    }

    #[test]
    fn payload_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("payload.topomap");
        let mut map = TopometricMap::new(4);
        let hash = map.insert_payload(vec![1, 2, 3, 4]);
        let mut d = vec![0.5; 4];
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= n);
        map.insert_node(MapNode {
            id: NodeId::new(0, 0),
            session: 0,
            timestamp: 0.0,
            pose_world: Pose::identity(),
            quality: 50.0,
            descriptor: d,
            payload_ref: Some(hash.clone()),
        })
        .unwrap();
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(loaded.payload(&hash), Some(&[1u8, 2, 3, 4][..]));
    }

    #[test]
    fn theoretical_size_matches_reference_figures() {
        let mut map = TopometricMap::new(4);
        let mut d = vec![0.5; 4];
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= n);
        map.insert_node(MapNode {
            id: NodeId::new(0, 0),
            session: 0,
            timestamp: 0.0,
            pose_world: Pose::identity(),
            quality: 50.0,
            descriptor: d.clone(),
            payload_ref: None,
        })
        .unwrap();
        // One 512x288 image at C=1: 442368 bytes (~0.423 MiB per image).
        let bytes = theoretical_map_size(&map, 512, 288, 1.0);
        assert_eq!(bytes, 442368.0);
        assert!((bytes / (1024.0 * 1024.0) - 0.423).abs() < 5e-3);
        // Empty map is free.
        let empty = TopometricMap::new(4);
        assert_eq!(theoretical_map_size(&empty, 512, 288, 1.0), 0.0);
        // 17 images at C=0.18: about 1.3 MB.
        for i in 1..17 {
            map.insert_node(MapNode {
                id: NodeId::new(0, i),
                session: 0,
                timestamp: i as f64,
                pose_world: Pose::identity(),
                quality: 50.0,
                descriptor: d.clone(),
                payload_ref: None,
            })
            .unwrap();
        }
        let mb = theoretical_map_size(&map, 512, 288, 0.18) / (1024.0 * 1024.0);
        assert!((mb - 1.29).abs() < 0.1, "got {mb} MiB");
    }

    #[test]
    fn dot_and_geojson_exports() {
        let map = three_node_chain();
        let dot = to_dot(&map);
        assert!(dot.starts_with("graph topomap {"));
        assert!(dot.contains("layer=\"trav\""));
        let gj = to_geojson(&map);
        assert!(gj.contains("\"LineString\""));
        assert!(gj.contains("\"session\":7"));
    }
}
