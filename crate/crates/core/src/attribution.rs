//! Token attribution by singleton occlusion, per-line aggregation, and
//! root-cause line selection. An exact Shapley enumerator is included for
//! validating the occlusion scores on small inputs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lexer::{TokenStream, MAX_TOKENS};
use crate::model::{Baseline, FrozenModel, Sample};

/// Largest player count the exact Shapley enumerator accepts.
pub const MAX_SHAPLEY_PLAYERS: usize = 12;

/// A cooperative game: the payoff of any coalition of present players.
pub trait Game: Sync {
    fn players(&self) -> usize;
    fn value(&self, present: &[bool]) -> Result<f64>;
}

/// `v(all) − v(all without i)` for every player.
pub fn occlusion_scores<G: Game>(game: &G) -> Result<Vec<f64>> {
    let n = game.players();
    let full = game.value(&vec![true; n])?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut present = vec![true; n];
            present[i] = false;
            Ok(full - game.value(&present)?)
        })
        .collect()
}

/// Exact Shapley values by enumerating all `2ⁿ` coalitions.
pub fn shapley_values<G: Game>(game: &G) -> Result<Vec<f64>> {
    let n = game.players();
    if n > MAX_SHAPLEY_PLAYERS {
        return Err(Error::Attribution(format!(
            "exact Shapley needs at most {MAX_SHAPLEY_PLAYERS} players, got {n}"
        )));
    }
    let values: Vec<f64> = (0..1usize << n)
        .into_par_iter()
        .map(|mask| {
            let present: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            game.value(&present)
        })
        .collect::<Result<_>>()?;

    // φᵢ = (1/n) Σₛ mean marginal of i over coalitions of size s. Summing
    // marginals per size before dividing by the exact binomial count keeps
    // linear games exact, unlike multiplying by s!(n−s−1)!/n! per term.
    let binom: Vec<f64> = (0..n)
        .scan(1.0, |c, s| {
            let out = *c;
            *c = *c * (n - 1 - s) as f64 / (s + 1) as f64;
            Some(out)
        })
        .collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut by_size = vec![0.0; n];
        for mask in (0..1usize << n).filter(|m| m & bit == 0) {
            by_size[mask.count_ones() as usize] += values[mask | bit] - values[mask];
        }
        *p = by_size.iter().zip(&binom).map(|(d, c)| d / c).sum::<f64>() / n as f64;
    }
    Ok(phi)
}

/// `φ₀ + Σ φᵢ·1[i present]`.
#[derive(Debug, Clone)]
pub struct LinearGame {
    pub phi0: f64,
    pub phi: Vec<f64>,
}

impl Game for LinearGame {
    fn players(&self) -> usize {
        self.phi.len()
    }

    fn value(&self, present: &[bool]) -> Result<f64> {
        if present.len() != self.phi.len() {
            return Err(Error::Attribution("coalition size mismatch".into()));
        }
        Ok(self.phi0
            + self
                .phi
                .iter()
                .zip(present)
                .filter(|(_, &p)| p)
                .map(|(v, _)| v)
                .sum::<f64>())
    }
}

/// The model's probability for one class as a game over payload tokens.
pub struct ModelGame<'a> {
    model: &'a FrozenModel,
    sample: &'a Sample,
    positions: Vec<usize>,
    target: usize,
    baseline: Baseline,
}

impl<'a> ModelGame<'a> {
    /// Targets the class predicted on the unoccluded input.
    pub fn new(model: &'a FrozenModel, sample: &'a Sample, baseline: Baseline) -> Result<Self> {
        let target = model.forward(sample)?.predicted_class();
        Ok(Self::with_target(model, sample, baseline, target))
    }

    pub fn with_target(model: &'a FrozenModel, sample: &'a Sample, baseline: Baseline, target: usize) -> Self {
        ModelGame {
            model,
            sample,
            positions: sample.stream.payload_positions().collect(),
            target,
            baseline,
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Stream positions of the players, in order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

impl Game for ModelGame<'_> {
    fn players(&self) -> usize {
        self.positions.len()
    }

    fn value(&self, present: &[bool]) -> Result<f64> {
        let mut occluded = vec![false; self.sample.content_len()];
        for (&pos, &p) in self.positions.iter().zip(present) {
            occluded[pos] = !p;
        }
        let out = self.model.forward_occluded(self.sample, &occluded, self.baseline)?;
        Ok(out.probabilities()[self.target])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// One score per stream position; zero for special tokens and padding.
    pub token_scores: Vec<f64>,
    pub line_scores: BTreeMap<usize, f64>,
    pub target_class: usize,
    /// Target probability with the full input.
    pub p_full: f64,
    /// Target probability with every payload token occluded.
    pub phi0: f64,
}

fn scatter(positions: &[usize], values: &[f64]) -> Vec<f64> {
    let mut scores = vec![0.0; MAX_TOKENS];
    for (&pos, &v) in positions.iter().zip(values) {
        scores[pos] = v;
    }
    scores
}

/// Singleton-occlusion scores `p* − pᵢ*` for the predicted class.
pub fn attribute_tokens(model: &FrozenModel, sample: &Sample, baseline: Baseline) -> Result<Attribution> {
    let game = ModelGame::new(model, sample, baseline)?;
    let n = game.players();
    let p_full = game.value(&vec![true; n])?;
    let phi0 = game.value(&vec![false; n])?;
    let scores = occlusion_scores(&game)?;
    let token_scores = scatter(game.positions(), &scores);
    let line_scores = aggregate_lines(&token_scores, &sample.stream);
    Ok(Attribution {
        token_scores,
        line_scores,
        target_class: game.target(),
        p_full,
        phi0,
    })
}

/// Exact Shapley values per stream position (at most 12 payload tokens).
pub fn shapley_oracle(model: &FrozenModel, sample: &Sample, baseline: Baseline) -> Result<Vec<f64>> {
    let game = ModelGame::new(model, sample, baseline)?;
    let phi = shapley_values(&game)?;
    Ok(scatter(game.positions(), &phi))
}

/// Sums token scores per source line; lines without payload tokens are absent.
pub fn aggregate_lines(token_scores: &[f64], stream: &TokenStream) -> BTreeMap<usize, f64> {
    let mut lines = BTreeMap::new();
    for pos in stream.payload_positions() {
        *lines.entry(stream.tokens()[pos].line).or_insert(0.0) += token_scores[pos];
    }
    lines
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RootCause {
    pub line: usize,
    pub score: f64,
    pub fallback_used: bool,
}

fn argmax_line(scores: &BTreeMap<usize, f64>, lines: impl Iterator<Item = usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for l in lines {
        let s = scores.get(&l).copied().unwrap_or(0.0);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    best
}

/// Highest-scoring line strictly between the declaration line and the
/// predicted start. Falls back to every line from 2 on when that range is
/// empty or has no positive score. Lines without a score count as 0.
pub fn select_root_cause(
    line_scores: &BTreeMap<usize, f64>,
    pred_start: usize,
    line_count: usize,
) -> Result<RootCause> {
    if line_count < 2 {
        return Err(Error::Attribution(format!(
            "function has {line_count} line(s); the declaration line cannot be a root cause"
        )));
    }
    let upper = pred_start.min(line_count + 1);
    if let Some((line, score)) = argmax_line(line_scores, 2..upper) {
        if score > 0.0 {
            return Ok(RootCause {
                line,
                score,
                fallback_used: false,
            });
        }
    }
    let (line, score) = argmax_line(line_scores, 2..=line_count).expect("line_count >= 2");
    Ok(RootCause {
        line,
        score,
        fallback_used: true,
    })
}

/// Min-max scaling to [0, 1]; a constant map becomes all 0.5.
pub fn normalize_scores(scores: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let min = scores.values().copied().fold(f64::INFINITY, f64::min);
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|(&l, &v)| (l, if max > min { (v - min) / (max - min) } else { 0.5 }))
        .collect()
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` if either side is constant or lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributionDump<'a> {
    pub token_scores: &'a [f64],
    pub line_scores: &'a BTreeMap<usize, f64>,
    pub root_cause: Option<RootCause>,
    pub phi0: f64,
}

impl Attribution {
    pub fn to_json(&self, root_cause: Option<RootCause>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&AttributionDump {
            token_scores: &self.token_scores,
            line_scores: &self.line_scores,
            root_cause,
            phi0: self.phi0,
        })?)
    }
}
