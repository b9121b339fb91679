//! Teacher-forced episode forward pass, episode loss and the optimizer.

use std::collections::BTreeMap;

use crate::dataset::ClassTable;
use crate::episode::{Episode, TrackKey};
use crate::loss::{
    detection_loss_with_match, match_detection, total_loss_var, tracking_loss, FrameHeads,
    LossWeights, MatchResult, Target,
};
use crate::network::{FrameVars, Network, QueryRole};
use crate::tensor::{BoundParams, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Everything one episode frame contributes to the loss.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub roles: Vec<QueryRole>,
    pub vars: FrameVars,
    /// Free-query rows (0-based among free queries) to S ∪ D targets.
    pub matching: MatchResult,
    pub l_sd: f32,
    pub l_t: f32,
}

#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub frames: Vec<FrameRecord>,
    pub l_sd: Var,
    pub l_t: Var,
    pub l_total: Var,
}

/// Scalar summary of one episode's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_sd: f32,
    pub l_t: f32,
    pub l_total: f32,
    /// Per-frame `(l_sd, l_t)` before averaging.
    pub per_frame: Vec<(f32, f32)>,
}

impl EpisodeForward {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_sd: tape.item(self.l_sd),
            l_t: tape.item(self.l_t),
            l_total: tape.item(self.l_total),
            per_frame: self.frames.iter().map(|f| (f.l_sd, f.l_t)).collect(),
        }
    }

    pub fn matchings(&self) -> Vec<MatchResult> {
        self.frames.iter().map(|f| f.matching.clone()).collect()
    }
}

/// Runs an episode with teacher forcing.
///
/// Frame 0 sees only the learned free queries. A free query matched to a
/// newly appearing instance (a D target) becomes a track query for every
/// later frame of the episode; each track query carries the most recent
/// output embedding produced while its instance was visible, so a track
/// whose object is absent keeps its previous embedding. Query order per
/// frame is tracks by ascending identity, then free queries.
///
/// `frozen` replaces the per-frame Hungarian step with given assignments,
/// which keeps the selection constant under parameter perturbation.
pub fn forward_episode(
    net: &Network,
    tape: &mut Tape,
    bound: &BoundParams,
    episode: &Episode,
    classes: &ClassTable,
    weights: &LossWeights,
    frozen: Option<&[MatchResult]>,
) -> Result<EpisodeForward> {
    let k = episode.k();
    if k == 0 {
        return Err(Error::Sampling("empty episode".into()));
    }
    if episode.partition.frames.len() != k {
        return Err(Error::Alignment(format!(
            "episode has {k} frames but {} partitioned frames",
            episode.partition.frames.len()
        )));
    }
    if let Some(f) = frozen {
        if f.len() != k {
            return Err(Error::Alignment(format!("{} frozen matchings for {k} frames", f.len())));
        }
    }
    let nq = net.config.free_queries;
    let d = net.config.embed_dim;
    let free_rows: Vec<usize> = (0..nq).collect();

    let mut tracks: BTreeMap<TrackKey, Var> = BTreeMap::new();
    let mut records = Vec::with_capacity(k);
    let mut sd_terms = Vec::with_capacity(k);
    let mut t_terms = Vec::with_capacity(k);

    for (t, frame) in episode.frames.iter().enumerate() {
        let targets = &episode.partition.frames[t];
        let track_list: Vec<(TrackKey, Var)> = tracks.iter().map(|(&k, &v)| (k, v)).collect();
        let free = tape.gather_rows(bound.var(net.free_query_param()), &free_rows)?;
        let mut rows: Vec<Var> = track_list.iter().map(|&(_, v)| v).collect();
        rows.push(free);
        let queries = if rows.len() == 1 { free } else { tape.concat(&rows, 0)? };
        debug_assert_eq!(tape.shape(queries), &[track_list.len() + nq, d]);

        let vars = net.forward_frame(tape, bound, frame, queries)?;
        let heads = FrameHeads::new(tape, vars.class_logits, vars.mask_logits)?;

        let n_tracks = track_list.len();
        let free_idx: Vec<usize> = (n_tracks..n_tracks + nq).collect();
        let sd_segments = targets.detection_targets();
        let sd_targets = sd_segments
            .iter()
            .map(|s| Target::from_segment(s, classes))
            .collect::<Result<Vec<_>>>()?;
        let matching = match frozen {
            Some(f) => f[t].clone(),
            None => match_detection(tape, heads, &free_idx, &sd_targets, weights)?,
        };
        let sd_sum = detection_loss_with_match(tape, heads, &free_idx, &sd_targets, &matching, weights)?;
        let l_sd = tape.scale(sd_sum, 1.0 / sd_targets.len().max(1) as f32);
        sd_terms.push(l_sd);

        let t_targets = targets
            .t
            .iter()
            .map(|s| Target::from_segment(s, classes))
            .collect::<Result<Vec<_>>>()?;
        let l_t_value = if t > 0 {
            let track_queries: Vec<(usize, TrackKey)> =
                track_list.iter().enumerate().map(|(i, &(key, _))| (i, key)).collect();
            let sum = tracking_loss(tape, heads, &track_queries, &t_targets, weights)?;
            let l_t = tape.scale(sum, 1.0 / t_targets.len().max(1) as f32);
            t_terms.push(l_t);
            tape.item(l_t)
        } else {
            0.0
        };

        let mut roles: Vec<QueryRole> =
            track_list.iter().map(|&(key, _)| QueryRole::Track(key)).collect();
        roles.extend(std::iter::repeat_n(QueryRole::Free, nq));

        for (i, &(key, _)) in track_list.iter().enumerate() {
            if t_targets.iter().any(|tg| tg.key == key) {
                let row = tape.gather_rows(vars.embeddings, &[i])?;
                tracks.insert(key, row);
            }
        }
        for &(row, col) in &matching.pairs {
            if col >= targets.s.len() {
                let key = sd_targets[col].key;
                let emb = tape.gather_rows(vars.embeddings, &[free_idx[row]])?;
                tracks.insert(key, emb);
            }
        }

        records.push(FrameRecord {
            roles,
            vars,
            matching,
            l_sd: tape.item(l_sd),
            l_t: l_t_value,
        });
    }

    let l_sd = mean_scalars(tape, &sd_terms)?;
    let l_t = mean_scalars(tape, &t_terms)?;
    let l_total = total_loss_var(tape, l_sd, l_t, weights)?;
    Ok(EpisodeForward { frames: records, l_sd, l_t, l_total })
}

fn mean_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let s = crate::loss::sum_scalars(tape, terms)?;
    Ok(tape.scale(s, 1.0 / terms.len() as f32))
}

/// Loss of one episode and parameter gradients stored on `net.params`.
pub fn episode_gradients(
    net: &mut Network,
    episode: &Episode,
    classes: &ClassTable,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let fwd = forward_episode(net, &mut tape, &bound, episode, classes, weights, None)?;
    let breakdown = fwd.breakdown(&tape);
    if !breakdown.l_total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", breakdown.l_total)));
    }
    let grads = tape.backward(fwd.l_total)?;
    net.params.collect_grads(&grads, &bound);
    Ok(breakdown)
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// `v = momentum * v + g; p -= lr * v` for every parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        let ids: Vec<_> = params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[f32]>::to_vec) else { continue };
            let v = &mut self.velocity[slot];
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
        }
    }
}
