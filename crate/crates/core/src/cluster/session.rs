//! Two-round cluster review for one slide.
//!
//! Round 1 clusters the slide's whole foreground pool. Every non-empty
//! cluster is either labeled with a tissue class or marked heterogeneous.
//! Heterogeneous members are pooled and re-clustered once (round 2); what is
//! still heterogeneous after round 2 is discarded at finalize.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{cluster_embeddings, pooled_members, sample_cluster_grid, ClusterAssignment, ClusterError, GridSample, DEFAULT_K};
use crate::class::{TissueClass, UnknownClass};
use crate::embedder::Embedding;
use crate::event::{EventMeta, Timestamp};
use crate::labels::{DiscardReason, LabeledSlide, Provenance};

/// Discard fractions above this are reported with a warning.
pub const DISCARD_WARNING_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("session is finalized and can no longer change")]
    Finalized,
    #[error("cluster {cluster} is not part of round {round} (k = {k})")]
    UnknownCluster { round: u8, cluster: usize, k: usize },
    #[error("cluster {0} is empty and cannot be reviewed")]
    EmptyCluster(usize),
    #[error("round {round} still has unreviewed clusters {clusters:?}")]
    Unreviewed { round: u8, clusters: Vec<usize> },
    #[error("round 1 has no heterogeneous clusters to re-cluster")]
    NoHeterogeneous,
    #[error("re-clustering is only possible once, from round 1 (current round {0})")]
    AlreadyReclustered(u8),
    #[error("heterogeneous clusters {0:?} must be re-clustered before finalizing")]
    ReclusterRequired(Vec<usize>),
    #[error("{missing} pooled tiles have no embedding, e.g. {example}")]
    MissingEmbeddings { missing: usize, example: String },
    #[error("replay diverged: {0}")]
    Replay(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "class")]
pub enum ClusterStatus {
    Unreviewed,
    Labeled(TissueClass),
    Heterogeneous,
    /// k-means left the cluster without members; it never enters review.
    Empty,
}

/// A reviewer's verdict on a cluster grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Label(TissueClass),
    Heterogeneous,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Label(c) => write!(f, "{c}"),
            Decision::Heterogeneous => f.write_str("heterogeneous"),
        }
    }
}

impl FromStr for Decision {
    type Err = UnknownClass;

    /// Class names or digits 1-6, or `heterogeneous` / `h`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("heterogeneous") || t.eq_ignore_ascii_case("h") {
            Ok(Decision::Heterogeneous)
        } else {
            t.parse().map(Decision::Label)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SessionAction {
    Created { slide_id: String, k: usize, seed: u64, pool_size: usize },
    Reviewed { round: u8, cluster: usize, decision: Decision },
    Reclustered { seed: u64, pool_size: usize },
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    pub action: SessionAction,
}

impl SessionEvent {
    pub fn meta(&self) -> EventMeta {
        EventMeta::new(self.actor.clone(), self.at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub round: u8,
    /// Non-empty clusters of the round.
    pub total: usize,
    pub labeled: usize,
    pub heterogeneous: usize,
    pub unreviewed: usize,
    pub empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RoundRecord {
    assignment: ClusterAssignment,
    statuses: Vec<ClusterStatus>,
    started_at: Timestamp,
}

impl RoundRecord {
    fn new(assignment: ClusterAssignment, started_at: Timestamp) -> Self {
        let mut statuses = vec![ClusterStatus::Unreviewed; assignment.k];
        for &c in &assignment.empty_clusters {
            statuses[c] = ClusterStatus::Empty;
        }
        Self { assignment, statuses, started_at }
    }

    fn with_status(&self, wanted: impl Fn(&ClusterStatus) -> bool) -> BTreeSet<usize> {
        self.statuses.iter().enumerate().filter(|(_, s)| wanted(s)).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub slide_id: String,
    pub config: SessionConfig,
    rounds: Vec<RoundRecord>,
    events: Vec<SessionEvent>,
    result: Option<LabeledSlide>,
}

fn mix_seed(seed: u64, round: u8, cluster: usize) -> u64 {
    // splitmix64 finaliser over the packed inputs
    let mut z = seed ^ ((round as u64) << 56) ^ (cluster as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl AnnotationSession {
    /// Clusters the slide's foreground embeddings and opens round 1.
    pub fn start(
        session_id: impl Into<String>,
        embeddings: &[Embedding],
        config: SessionConfig,
        meta: EventMeta,
    ) -> Result<Self, SessionError> {
        let assignment = cluster_embeddings(embeddings, config.k, config.seed, 1)?;
        let slide_id = assignment.slide_id.clone();
        let mut session = Self {
            session_id: session_id.into(),
            slide_id: slide_id.clone(),
            config,
            rounds: vec![RoundRecord::new(assignment, meta.at)],
            events: Vec::new(),
            result: None,
        };
        session.log(meta, SessionAction::Created { slide_id, k: config.k, seed: config.seed, pool_size: embeddings.len() });
        Ok(session)
    }

    fn log(&mut self, meta: EventMeta, action: SessionAction) {
        let seq = self.events.len() as u64;
        self.events.push(SessionEvent { seq, at: meta.at, actor: meta.actor, action });
    }

    fn current(&self) -> &RoundRecord {
        self.rounds.last().expect("a session always has round 1")
    }

    pub fn round(&self) -> u8 {
        self.rounds.len() as u8
    }

    pub fn is_finalized(&self) -> bool {
        self.result.is_some()
    }

    pub fn result(&self) -> Option<&LabeledSlide> {
        self.result.as_ref()
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn assignment(&self, round: u8) -> Option<&ClusterAssignment> {
        self.rounds.get((round as usize).checked_sub(1)?).map(|r| &r.assignment)
    }

    pub fn current_assignment(&self) -> &ClusterAssignment {
        &self.current().assignment
    }

    pub fn statuses(&self) -> &[ClusterStatus] {
        &self.current().statuses
    }

    pub fn status(&self, cluster: usize) -> Option<ClusterStatus> {
        self.current().statuses.get(cluster).copied()
    }

    pub fn progress(&self) -> Progress {
        let statuses = &self.current().statuses;
        let count = |f: fn(&ClusterStatus) -> bool| statuses.iter().filter(|s| f(s)).count();
        let empty = count(|s| matches!(s, ClusterStatus::Empty));
        Progress {
            round: self.round(),
            total: statuses.len() - empty,
            labeled: count(|s| matches!(s, ClusterStatus::Labeled(_))),
            heterogeneous: count(|s| matches!(s, ClusterStatus::Heterogeneous)),
            unreviewed: count(|s| matches!(s, ClusterStatus::Unreviewed)),
            empty,
        }
    }

    /// Unreviewed, non-empty clusters of the current round, ascending.
    pub fn review_queue(&self) -> Vec<usize> {
        self.current().with_status(|s| matches!(s, ClusterStatus::Unreviewed)).into_iter().collect()
    }

    pub fn heterogeneous_clusters(&self) -> Vec<usize> {
        self.current().with_status(|s| matches!(s, ClusterStatus::Heterogeneous)).into_iter().collect()
    }

    pub fn grid_seed(&self, cluster: usize) -> u64 {
        mix_seed(self.config.seed, self.round(), cluster)
    }

    /// The review grid for a cluster of the current round. Stable for the
    /// life of the round.
    pub fn grid(&self, cluster: usize) -> Result<GridSample, SessionError> {
        let assignment = self.current_assignment();
        Ok(sample_cluster_grid(assignment, cluster, self.grid_seed(cluster))?)
    }

    /// Records a decision for a cluster of the current round. Re-submitting
    /// replaces the earlier decision; both stay in the log.
    pub fn review(&mut self, cluster: usize, decision: Decision, meta: EventMeta) -> Result<(), SessionError> {
        if self.is_finalized() {
            return Err(SessionError::Finalized);
        }
        let round = self.round();
        let record = self.rounds.last_mut().expect("round 1 exists");
        match record.statuses.get(cluster) {
            None => return Err(SessionError::UnknownCluster { round, cluster, k: record.assignment.k }),
            Some(ClusterStatus::Empty) => return Err(SessionError::EmptyCluster(cluster)),
            Some(_) => {}
        }
        record.statuses[cluster] = match decision {
            Decision::Label(class) => ClusterStatus::Labeled(class),
            Decision::Heterogeneous => ClusterStatus::Heterogeneous,
        };
        self.log(meta, SessionAction::Reviewed { round, cluster, decision });
        Ok(())
    }

    pub fn apply_cluster_label(&mut self, cluster: usize, class: TissueClass, meta: EventMeta) -> Result<(), SessionError> {
        self.review(cluster, Decision::Label(class), meta)
    }

    pub fn mark_heterogeneous(&mut self, cluster: usize, meta: EventMeta) -> Result<(), SessionError> {
        self.review(cluster, Decision::Heterogeneous, meta)
    }

    fn require_reviewed(&self) -> Result<(), SessionError> {
        let queue = self.review_queue();
        if queue.is_empty() {
            Ok(())
        } else {
            Err(SessionError::Unreviewed { round: self.round(), clusters: queue })
        }
    }

    /// Tiles that `recluster` would pool: members of round-1 heterogeneous clusters.
    pub fn heterogeneous_pool(&self) -> Vec<crate::tiler::TileAddress> {
        let record = self.current();
        pooled_members(&record.assignment, &record.with_status(|s| matches!(s, ClusterStatus::Heterogeneous)))
    }

    /// Pools round-1 heterogeneous clusters and opens round 2 over them.
    /// `embeddings` may be any superset of the pool.
    pub fn recluster(&mut self, embeddings: &[Embedding], seed: u64, meta: EventMeta) -> Result<&ClusterAssignment, SessionError> {
        if self.is_finalized() {
            return Err(SessionError::Finalized);
        }
        if self.round() != 1 {
            return Err(SessionError::AlreadyReclustered(self.round()));
        }
        self.require_reviewed()?;
        let pool = self.heterogeneous_pool();
        if pool.is_empty() {
            return Err(SessionError::NoHeterogeneous);
        }
        let by_address: BTreeMap<_, &Embedding> = embeddings
            .iter()
            .filter(|e| e.slide_id == self.slide_id)
            .map(|e| (e.address, e))
            .collect();
        let missing: Vec<_> = pool.iter().filter(|a| !by_address.contains_key(a)).collect();
        if let Some(first) = missing.first() {
            return Err(SessionError::MissingEmbeddings { missing: missing.len(), example: first.to_string() });
        }
        let selected: Vec<Embedding> = pool.iter().map(|a| by_address[a].clone()).collect();
        let assignment = cluster_embeddings(&selected, self.config.k, seed, 2)?;
        let at = meta.at;
        self.log(meta, SessionAction::Reclustered { seed, pool_size: selected.len() });
        self.rounds.push(RoundRecord::new(assignment, at));
        Ok(self.current_assignment())
    }

    /// Resolves every pooled tile to a class or to the discard set.
    pub fn finalize(&mut self, meta: EventMeta) -> Result<LabeledSlide, SessionError> {
        if self.is_finalized() {
            return Err(SessionError::Finalized);
        }
        self.require_reviewed()?;
        if self.round() == 1 {
            let het = self.heterogeneous_clusters();
            if !het.is_empty() {
                return Err(SessionError::ReclusterRequired(het));
            }
        }

        let mut records = BTreeMap::new();
        let mut discarded = BTreeMap::new();
        let last = self.rounds.len() - 1;
        for (i, round) in self.rounds.iter().enumerate() {
            for (tile, &cluster) in round.assignment.tiles.iter().zip(&round.assignment.labels) {
                match round.statuses[cluster] {
                    ClusterStatus::Labeled(class) => {
                        records.insert(*tile, class);
                    }
                    ClusterStatus::Heterogeneous if i == last => {
                        discarded.insert(*tile, DiscardReason::HeterogeneousAfterRecluster);
                    }
                    // Round-1 heterogeneous tiles are resolved by round 2.
                    ClusterStatus::Heterogeneous => {}
                    ClusterStatus::Unreviewed | ClusterStatus::Empty => unreachable!("empty clusters have no members"),
                }
            }
        }
        let slide = LabeledSlide {
            slide_id: self.slide_id.clone(),
            records,
            discarded,
            provenance: Provenance {
                session_id: self.session_id.clone(),
                annotator: meta.actor.clone(),
                round_started: self.rounds.iter().map(|r| r.started_at).collect(),
                finalized_at: meta.at,
            },
        };
        let fraction = slide.discard_fraction();
        if fraction > DISCARD_WARNING_FRACTION {
            tracing::warn!(slide = %self.slide_id, fraction, "discarded more than 5% of the foreground pool");
        }
        self.log(meta, SessionAction::Finalized);
        self.result = Some(slide.clone());
        Ok(slide)
    }

    /// Rebuilds a session from its event log. The log's seeds make every
    /// clustering step reproducible; the rebuilt log must match the input.
    pub fn replay(session_id: impl Into<String>, embeddings: &[Embedding], events: &[SessionEvent]) -> Result<Self, SessionError> {
        let (first, rest) = events.split_first().ok_or_else(|| SessionError::Replay("empty event log".into()))?;
        let SessionAction::Created { k, seed, .. } = &first.action else {
            return Err(SessionError::Replay("log does not start with a creation event".into()));
        };
        let mut session = Self::start(session_id, embeddings, SessionConfig { k: *k, seed: *seed }, first.meta())?;
        for event in rest {
            match &event.action {
                SessionAction::Created { .. } => return Err(SessionError::Replay(format!("second creation event at seq {}", event.seq))),
                SessionAction::Reviewed { round, cluster, decision } => {
                    if *round != session.round() {
                        return Err(SessionError::Replay(format!("review for round {round} while in round {}", session.round())));
                    }
                    session.review(*cluster, *decision, event.meta())?;
                }
                SessionAction::Reclustered { seed, .. } => {
                    session.recluster(embeddings, *seed, event.meta())?;
                }
                SessionAction::Finalized => {
                    session.finalize(event.meta())?;
                }
            }
        }
        if session.events != events {
            return Err(SessionError::Replay("rebuilt log differs from the input log".into()));
        }
        Ok(session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::TileAddress;

    fn meta(t: i64) -> EventMeta {
        EventMeta::new("tester", Timestamp(t))
    }

    /// 8 well-separated groups of 10 tiles each along one axis.
    fn pool() -> Vec<Embedding> {
        (0..80u32)
            .map(|i| Embedding {
                slide_id: "s".into(),
                address: TileAddress::new(i / 10, i % 10),
                vector: vec![(i / 10) as f64 * 10.0 + (i % 10) as f64 * 0.01, 0.0],
            })
            .collect()
    }

    fn session(k: usize) -> AnnotationSession {
        AnnotationSession::start("sess", &pool(), SessionConfig { k, seed: 3 }, meta(0)).unwrap()
    }

    #[test]
    fn labeling_every_cluster_discards_nothing() {
        let mut s = session(8);
        for c in 0..8 {
            s.apply_cluster_label(c, TissueClass::Stroma, meta(1)).unwrap();
        }
        assert!(s.heterogeneous_clusters().is_empty());
        let slide = s.finalize(meta(2)).unwrap();
        assert_eq!(slide.records.len(), 80);
        assert!(slide.discarded.is_empty());
        assert!(s.recluster(&pool(), 0, meta(3)).is_err());
    }

    #[test]
    fn relabel_keeps_last_decision_and_both_events() {
        let mut s = session(8);
        s.apply_cluster_label(5, TissueClass::Stroma, meta(1)).unwrap();
        s.apply_cluster_label(5, TissueClass::Adipose, meta(2)).unwrap();
        let reviews = s.events().iter().filter(|e| matches!(e.action, SessionAction::Reviewed { cluster: 5, .. })).count();
        assert_eq!(reviews, 2);
        for c in (0..8).filter(|c| *c != 5) {
            s.apply_cluster_label(c, TissueClass::Epithelium, meta(3)).unwrap();
        }
        let slide = s.finalize(meta(4)).unwrap();
        for tile in s.assignment(1).unwrap().members(5) {
            assert_eq!(slide.records[&tile], TissueClass::Adipose);
        }
    }

    #[test]
    fn finalized_sessions_are_immutable() {
        let mut s = session(8);
        for c in 0..8 {
            s.apply_cluster_label(c, TissueClass::Stroma, meta(1)).unwrap();
        }
        s.finalize(meta(2)).unwrap();
        assert_eq!(s.apply_cluster_label(0, TissueClass::Adipose, meta(3)), Err(SessionError::Finalized));
        assert_eq!(s.mark_heterogeneous(0, meta(3)), Err(SessionError::Finalized));
        assert!(matches!(s.finalize(meta(3)), Err(SessionError::Finalized)));
    }

    #[test]
    fn finalize_lists_unreviewed_clusters() {
        let mut s = session(8);
        s.apply_cluster_label(0, TissueClass::Stroma, meta(1)).unwrap();
        match s.finalize(meta(2)) {
            Err(SessionError::Unreviewed { round: 1, clusters }) => assert_eq!(clusters, (1..8).collect::<Vec<_>>()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(s.recluster(&pool(), 1, meta(2)), Err(SessionError::Unreviewed { .. })));
    }

    #[test]
    fn heterogeneous_pool_is_union_of_marked_clusters() {
        let mut s = session(8);
        let marked = [1usize, 4, 6];
        for c in 0..8 {
            if marked.contains(&c) {
                s.mark_heterogeneous(c, meta(1)).unwrap();
            } else {
                s.apply_cluster_label(c, TissueClass::Lymphocytes, meta(1)).unwrap();
            }
        }
        assert!(matches!(s.finalize(meta(2)), Err(SessionError::ReclusterRequired(_))));
        let expected: BTreeSet<TileAddress> = marked.iter().flat_map(|c| s.assignment(1).unwrap().members(*c)).collect();
        let r2 = s.recluster(&pool(), 17, meta(3)).unwrap().clone();
        assert_eq!(r2.tiles.iter().copied().collect::<BTreeSet<_>>(), expected);
        assert_eq!(s.round(), 2);
        assert_eq!((r2.requested_k, r2.k), (8, 8));
        assert!(matches!(s.recluster(&pool(), 1, meta(4)), Err(SessionError::AlreadyReclustered(2))));
    }

    #[test]
    fn round_two_heterogeneous_members_are_discarded() {
        let mut s = session(4);
        for c in 0..4 {
            s.mark_heterogeneous(c, meta(1)).unwrap();
        }
        let r2 = s.recluster(&pool(), 5, meta(2)).unwrap().clone();
        assert_eq!(r2.tiles.len(), 80);
        for c in 0..r2.k {
            if s.status(c) != Some(ClusterStatus::Empty) {
                s.mark_heterogeneous(c, meta(3)).unwrap();
            }
        }
        let slide = s.finalize(meta(4)).unwrap();
        assert!(slide.records.is_empty());
        assert_eq!(slide.discarded.len(), 80);
        assert_eq!(slide.discard_fraction(), 1.0);
    }

    #[test]
    fn recluster_reduces_k_for_small_pools() {
        let mut s = session(8);
        for c in 0..8 {
            if c == 2 {
                s.mark_heterogeneous(c, meta(1)).unwrap();
            } else {
                s.apply_cluster_label(c, TissueClass::Stroma, meta(1)).unwrap();
            }
        }
        let mut big = AnnotationSession { config: SessionConfig { k: 32, seed: 3 }, ..s };
        let r2 = big.recluster(&pool(), 0, meta(2)).unwrap();
        assert_eq!((r2.requested_k, r2.k), (32, 10));
    }

    #[test]
    fn none_heterogeneous_cannot_recluster() {
        let mut s = session(8);
        for c in 0..8 {
            s.apply_cluster_label(c, TissueClass::Stroma, meta(1)).unwrap();
        }
        assert_eq!(s.recluster(&pool(), 0, meta(2)).unwrap_err(), SessionError::NoHeterogeneous);
    }

    #[test]
    fn replay_reproduces_the_session() {
        let mut s = session(8);
        for c in 0..8 {
            if c % 3 == 0 {
                s.mark_heterogeneous(c, meta(c as i64)).unwrap();
            } else {
                s.apply_cluster_label(c, TissueClass::Artifact, meta(c as i64)).unwrap();
            }
        }
        s.recluster(&pool(), 99, meta(10)).unwrap();
        for c in s.review_queue() {
            s.apply_cluster_label(c, TissueClass::Miscellaneous, meta(11)).unwrap();
        }
        let slide = s.finalize(meta(12)).unwrap();
        let rebuilt = AnnotationSession::replay("sess", &pool(), s.events()).unwrap();
        assert_eq!(rebuilt, s);
        assert_eq!(serde_json::to_vec(rebuilt.result().unwrap()).unwrap(), serde_json::to_vec(&slide).unwrap());
    }

    #[test]
    fn progress_is_conserved() {
        let mut s = session(8);
        let check = |s: &AnnotationSession| {
            let p = s.progress();
            assert_eq!(p.labeled + p.heterogeneous + p.unreviewed, p.total);
        };
        check(&s);
        s.mark_heterogeneous(0, meta(1)).unwrap();
        s.apply_cluster_label(0, TissueClass::Stroma, meta(1)).unwrap();
        s.apply_cluster_label(1, TissueClass::Stroma, meta(1)).unwrap();
        check(&s);
        assert_eq!(s.progress().labeled, 2);
        assert!(matches!(s.review(8, Decision::Heterogeneous, meta(2)), Err(SessionError::UnknownCluster { .. })));
    }

    #[test]
    fn decisions_parse() {
        assert_eq!("H".parse::<Decision>().unwrap(), Decision::Heterogeneous);
        assert_eq!("3".parse::<Decision>().unwrap(), Decision::Label(TissueClass::Lymphocytes));
        assert!("purple".parse::<Decision>().is_err());
        let json = serde_json::to_string(&Decision::Label(TissueClass::Stroma)).unwrap();
        assert_eq!(json, r#"{"label":"Stroma"}"#);
    }
}
