//! Central finite differences against reverse-mode gradients of the full
//! episode loss, for every scalar of every parameter.

use vpseg_core::dataset::{generate_synthetic_sequence, ClassTable, SyntheticConfig};
use vpseg_core::episode::{build_episode, Episode};
use vpseg_core::loss::{LossWeights, MatchResult};
use vpseg_core::network::{ModelConfig, Network};
use vpseg_core::tensor::Tape;
use vpseg_core::training::forward_episode;

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

/// 32x32 frames, d = 16, 4 free queries, 2 decoder layers, a 3-frame
/// episode. Two stuff bands and one moving instance give three detection
/// targets, so matched, unmatched and track terms all appear.
pub fn instance(patch: usize) -> (Network, Episode, ClassTable) {
    let classes = ClassTable::default();
    let synth = SyntheticConfig { stuff_classes: vec![1, 2], instances: 1, seed: 11, ..Default::default() };
    let seq = generate_synthetic_sequence(&synth, &classes, 0).unwrap();
    assert_eq!((seq.frames[0].width(), seq.frames[0].height()), (32, 32));
    let ep = build_episode(&seq, &[0, 1, 2]).unwrap();
    let cfg = ModelConfig {
        embed_dim: 16,
        heads: 2,
        free_queries: 4,
        decoder_layers: 2,
        ffn_dim: 32,
        patch,
        num_classes: classes.len(),
        ..Default::default()
    };
    (Network::new(cfg, 3).unwrap(), ep, classes)
}

fn loss(net: &Network, ep: &Episode, classes: &ClassTable, frozen: &[MatchResult]) -> f32 {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let f = forward_episode(net, &mut tape, &bound, ep, classes, &LossWeights::default(), Some(frozen)).unwrap();
    tape.item(f.l_total)
}

/// Matchings are computed once and frozen, so the finite differences see
/// the same assignment as the analytic pass. An error counts as a mismatch
/// when `|a - n| > TOLERANCE * max(|a|, |n|, 1)`.
pub fn check(mut net: Network, ep: &Episode, classes: &ClassTable) -> GradReport {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let f = forward_episode(&net, &mut tape, &bound, ep, classes, &LossWeights::default(), None).unwrap();
    let frozen = f.matchings();
    assert!(f.frames.iter().skip(1).any(|r| r.roles.len() > net.config.free_queries), "no track queries");
    let grads = tape.backward(f.l_total).unwrap();
    let analytic: Vec<Vec<f32>> = net.params.ids().map(|id| grads.wrt(bound.var(id))).collect();
    assert_eq!(loss(&net, ep, classes, &frozen), tape.item(f.l_total));

    let ids: Vec<_> = net.params.ids().collect();
    let mut report = GradReport { checked: 0, worst: 0.0, worst_at: String::new(), failures: Vec::new() };
    for (slot, &id) in ids.iter().enumerate() {
        let name = net.params.name(id).to_string();
        for i in 0..net.params.get(id).numel() {
            let orig = net.params.get(id).data()[i];
            let (up, down) = (orig + STEP, orig - STEP);
            net.params.get_mut(id).data_mut()[i] = up;
            let lp = loss(&net, ep, classes, &frozen) as f64;
            net.params.get_mut(id).data_mut()[i] = down;
            let lm = loss(&net, ep, classes, &frozen) as f64;
            net.params.get_mut(id).data_mut()[i] = orig;

            let numeric = (lp - lm) / (up as f64 - down as f64);
            let a = analytic[slot][i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            let at = format!("{name}[{i}] analytic {a:.6e} numeric {numeric:.6e}");
            if err > report.worst {
                report.worst = err;
                report.worst_at = at.clone();
            }
            if err > TOLERANCE {
                report.failures.push(at);
            }
            report.checked += 1;
        }
    }
    assert_eq!(report.checked, net.params.total_values());
    report
}
