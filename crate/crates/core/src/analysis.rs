//! Routing-specialization statistics and per-expert attention maps.
//!
//! Probability mass is stored as fixed-point integers (units of `2^-64`), so
//! accumulation and merging are exactly associative and commutative.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::blocks::{expert_attention_row, AttnParams, ForwardTrace, Model};
use crate::error::{Result, UmoeError};
use crate::router::{route, RoutingDecision};
use crate::tensor::Real;

const MASS_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Attn,
    Ffn,
}

impl Sublayer {
    pub fn as_str(self) -> &'static str {
        match self {
            Sublayer::Attn => "attn",
            Sublayer::Ffn => "ffn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(Sublayer::Attn),
            "ffn" => Ok(Sublayer::Ffn),
            _ => Err(UmoeError::InvalidConfig(format!("unknown sublayer {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Cell {
    mass: u128,
    count: u64,
}

fn to_fixed(gate: f64) -> u128 {
    (gate.max(0.0) * MASS_SCALE).round() as u128
}

fn from_fixed(mass: u128) -> f64 {
    mass as f64 / MASS_SCALE
}

/// Accumulated gate mass and hit count per (layer, sublayer, expert, token id).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpertTokenStats {
    cells: BTreeMap<(usize, Sublayer, usize, u32), Cell>,
    /// Routed experts seen per MoE sublayer.
    experts: BTreeMap<(usize, Sublayer), usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenScore {
    pub token: u32,
    pub mass: f64,
    pub count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    Mass,
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsCell {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub expert: usize,
    pub token: u32,
    pub mass: f64,
    pub count: u64,
}

impl ExpertTokenStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one routing event.
    pub fn add_event(&mut self, layer: usize, sublayer: Sublayer, expert: usize, token: u32, gate: f64) {
        let cell = self.cells.entry((layer, sublayer, expert, token)).or_default();
        cell.mass += to_fixed(gate);
        cell.count += 1;
    }

    fn add_decisions<T: Real>(
        &mut self,
        layer: usize,
        sublayer: Sublayer,
        decisions: &[RoutingDecision<T>],
        tokens: &[u32],
    ) {
        for (d, &tok) in decisions.iter().zip(tokens) {
            let n = self.experts.entry((layer, sublayer)).or_insert(0);
            *n = (*n).max(d.probs.len());
            for (&e, &g) in d.indices.iter().zip(&d.gates) {
                self.add_event(layer, sublayer, e, tok, g.as_f64());
            }
        }
    }

    /// Adds every routed selection of a trace, keyed by the input token at each position.
    pub fn record<T: Real>(&mut self, trace: &ForwardTrace<T>, tokens: &[u32]) -> Result<()> {
        if trace.logits.rows() != tokens.len() {
            return Err(UmoeError::LengthMismatch {
                expected: trace.logits.rows(),
                got: tokens.len(),
            });
        }
        for (l, layer) in trace.layers.iter().enumerate() {
            if let Some(d) = &layer.attn {
                self.add_decisions(l, Sublayer::Attn, d, tokens);
            }
            if let Some(d) = &layer.ffn {
                self.add_decisions(l, Sublayer::Ffn, d, tokens);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ExpertTokenStats) {
        for (k, c) in &other.cells {
            let cell = self.cells.entry(*k).or_default();
            cell.mass += c.mass;
            cell.count += c.count;
        }
        for (k, &n) in &other.experts {
            let e = self.experts.entry(*k).or_insert(0);
            *e = (*e).max(n);
        }
    }

    pub fn mass(&self, layer: usize, sublayer: Sublayer, expert: usize, token: u32) -> f64 {
        self.cells
            .get(&(layer, sublayer, expert, token))
            .map_or(0.0, |c| from_fixed(c.mass))
    }

    pub fn count(&self, layer: usize, sublayer: Sublayer, expert: usize, token: u32) -> u64 {
        self.cells.get(&(layer, sublayer, expert, token)).map_or(0, |c| c.count)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> Vec<StatsCell> {
        self.cells
            .iter()
            .map(|(&(layer, sublayer, expert, token), c)| StatsCell {
                layer,
                sublayer,
                expert,
                token,
                mass: from_fixed(c.mass),
                count: c.count,
            })
            .collect()
    }

    /// Top `k` token ids of one expert; ties broken by ascending id.
    pub fn top_tokens(
        &self,
        layer: usize,
        sublayer: Sublayer,
        expert: usize,
        k: usize,
        ranking: Ranking,
    ) -> Result<Vec<TokenScore>> {
        match self.experts.get(&(layer, sublayer)) {
            Some(&n) if expert < n => {}
            _ => {
                return Err(UmoeError::UnknownExpert {
                    layer,
                    sublayer: sublayer.as_str().into(),
                    expert,
                })
            }
        }
        if k == 0 {
            return Err(UmoeError::InvalidConfig("top_tokens needs k >= 1".into()));
        }
        let mut hits: Vec<(u32, Cell)> = self
            .cells
            .range((layer, sublayer, expert, 0)..=(layer, sublayer, expert, u32::MAX))
            .map(|(&(_, _, _, t), &c)| (t, c))
            .collect();
        hits.sort_by(|a, b| {
            let primary = match ranking {
                Ranking::Mass => b.1.mass.cmp(&a.1.mass),
                Ranking::Count => b.1.count.cmp(&a.1.count),
            };
            primary.then(a.0.cmp(&b.0))
        });
        Ok(hits
            .into_iter()
            .take(k)
            .map(|(token, c)| TokenScore {
                token,
                mass: from_fixed(c.mass),
                count: c.count,
            })
            .collect())
    }
}

/// Statistics over a stream of (trace, tokens) pairs.
pub fn accumulate_routing<'a, T: Real + 'a>(
    stream: impl IntoIterator<Item = (&'a ForwardTrace<T>, &'a [u32])>,
) -> Result<ExpertTokenStats> {
    let mut stats = ExpertTokenStats::new();
    for (trace, tokens) in stream {
        stats.record(trace, tokens)?;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedRow {
    pub rank: usize,
    pub expert: usize,
    pub score: f64,
    /// Attention weights over all positions; zero past the query position.
    pub row: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnMapDump {
    pub layer: usize,
    pub position: usize,
    pub experts: Vec<RankedRow>,
}

impl AttnMapDump {
    /// Heat-map grid: one line per rank, one column per key position.
    pub fn to_csv(&self) -> Result<String> {
        let n = self.experts.first().map_or(0, |r| r.row.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string(), "rank".into(), "expert".into(), "score".into()];
        header.extend((0..n).map(|j| format!("pos{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.experts {
            let mut rec = vec![
                self.layer.to_string(),
                r.rank.to_string(),
                r.expert.to_string(),
                r.score.to_string(),
            ];
            rec.extend(r.row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| UmoeError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> UmoeError {
    UmoeError::Io(std::io::Error::other(e.to_string()))
}

fn dump_from_input<T: Real>(
    model: &Model<T>,
    layer: usize,
    x: &crate::tensor::Matrix<T>,
    position: usize,
    top_m: usize,
) -> Result<AttnMapDump> {
    let params = match &model.layers[layer].attn {
        AttnParams::Moe(p) => p,
        AttnParams::Dense(_) => {
            return Err(UmoeError::InvalidConfig(format!(
                "layer {layer} has no attention experts"
            )));
        }
    };
    if position >= x.rows() {
        return Err(UmoeError::PositionOutOfRange {
            position,
            len: x.rows(),
        });
    }
    let ranked = route(&params.router, x.row(position), top_m)?;
    let experts = ranked
        .indices
        .iter()
        .zip(&ranked.gates)
        .enumerate()
        .map(|(rank, (&expert, &score))| {
            let row = expert_attention_row(&model.cfg, params, x, position, expert)?;
            Ok(RankedRow {
                rank,
                expert,
                score: score.as_f64(),
                row: row.into_iter().map(Real::as_f64).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttnMapDump {
        layer,
        position,
        experts,
    })
}

/// Attention rows of the `top_m` experts by router score at `position`, activated or not.
pub fn dump_attention_maps<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    layer: usize,
    position: usize,
    top_m: usize,
) -> Result<AttnMapDump> {
    if layer >= model.layers.len() {
        return Err(UmoeError::IndexOutOfRange {
            index: layer,
            len: model.layers.len(),
        });
    }
    if position >= tokens.len() {
        return Err(UmoeError::PositionOutOfRange {
            position,
            len: tokens.len(),
        });
    }
    let inputs = model.attention_inputs(tokens)?;
    dump_from_input(model, layer, &inputs[layer], position, top_m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerwiseMap {
    pub position: usize,
    pub layers: usize,
    /// Rank-aligned attention rows summed over layers.
    pub rows: Vec<Vec<f64>>,
    /// Router scores summed over layers, per rank.
    pub score_sums: Vec<f64>,
}

/// Sums rank-aligned attention rows and router scores over every MoE attention layer.
pub fn accumulate_layerwise<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    position: usize,
    top_m: usize,
) -> Result<LayerwiseMap> {
    if position >= tokens.len() {
        return Err(UmoeError::PositionOutOfRange {
            position,
            len: tokens.len(),
        });
    }
    let inputs = model.attention_inputs(tokens)?;
    let mut rows = vec![vec![0.0; tokens.len()]; top_m];
    let mut score_sums = vec![0.0; top_m];
    let mut layers = 0;
    for (l, x) in inputs.iter().enumerate() {
        if !matches!(model.layers[l].attn, AttnParams::Moe(_)) {
            continue;
        }
        let dump = dump_from_input(model, l, x, position, top_m)?;
        for r in dump.experts {
            for (acc, v) in rows[r.rank].iter_mut().zip(&r.row) {
                *acc += v;
            }
            score_sums[r.rank] += r.score;
        }
        layers += 1;
    }
    Ok(LayerwiseMap {
        position,
        layers,
        rows,
        score_sums,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Preset};
    use proptest::prelude::*;

    fn tiny() -> Model<f64> {
        Model::init(&preset(Preset::TinyTest), 3).unwrap()
    }

    #[test]
    fn single_event_holds_its_gate() {
        let mut s = ExpertTokenStats::new();
        s.add_event(0, Sublayer::Attn, 2, 9, 0.7);
        assert_eq!(s.mass(0, Sublayer::Attn, 2, 9), 0.7);
        assert_eq!(s.count(0, Sublayer::Attn, 2, 9), 1);
    }

    #[test]
    fn identical_traces_double_exactly() {
        let m = tiny();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 7 % 64) as u32).collect();
        let tr = m.forward(&tokens).unwrap();
        let once = accumulate_routing([(&tr, tokens.as_slice())]).unwrap();
        let twice = accumulate_routing([(&tr, tokens.as_slice()), (&tr, tokens.as_slice())]).unwrap();
        for c in once.cells() {
            assert_eq!(twice.mass(c.layer, c.sublayer, c.expert, c.token), 2.0 * c.mass);
            assert_eq!(twice.count(c.layer, c.sublayer, c.expert, c.token), 2 * c.count);
        }
    }

    #[test]
    fn matches_nested_loop_recount() {
        let m = tiny();
        let tokens: Vec<u32> = (0..16).map(|i| (i * 5 % 11) as u32).collect();
        let tr = m.forward(&tokens).unwrap();
        let stats = accumulate_routing([(&tr, tokens.as_slice())]).unwrap();
        let n = m.cfg.attn_experts().max(m.cfg.ffn_experts());
        for (l, layer) in tr.layers.iter().enumerate() {
            for (sub, dec) in [(Sublayer::Attn, &layer.attn), (Sublayer::Ffn, &layer.ffn)] {
                let Some(dec) = dec else { continue };
                for e in 0..n {
                    for tok in 0..11u32 {
                        let mut mass = 0.0;
                        let mut count = 0;
                        for (t, d) in dec.iter().enumerate() {
                            if tokens[t] != tok {
                                continue;
                            }
                            for (j, &i) in d.indices.iter().enumerate() {
                                if i == e {
                                    mass += d.gates[j];
                                    count += 1;
                                }
                            }
                        }
                        assert_eq!(stats.count(l, sub, e, tok), count);
                        assert!((stats.mass(l, sub, e, tok) - mass).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn top_tokens_ties_break_by_id() {
        let mut s = ExpertTokenStats::new();
        s.experts.insert((0, Sublayer::Ffn), 4);
        for tok in [5u32, 3, 8] {
            s.add_event(0, Sublayer::Ffn, 1, tok, 0.25);
        }
        s.add_event(0, Sublayer::Ffn, 1, 4, 0.5);
        let top = s.top_tokens(0, Sublayer::Ffn, 1, 3, Ranking::Mass).unwrap();
        assert_eq!(top.iter().map(|t| t.token).collect::<Vec<_>>(), vec![4, 3, 5]);
        let by_count = s.top_tokens(0, Sublayer::Ffn, 1, 4, Ranking::Count).unwrap();
        assert_eq!(by_count.iter().map(|t| t.token).collect::<Vec<_>>(), vec![3, 4, 5, 8]);
        assert!(matches!(
            s.top_tokens(0, Sublayer::Ffn, 4, 1, Ranking::Mass),
            Err(UmoeError::UnknownExpert { .. })
        ));
        assert!(matches!(
            s.top_tokens(1, Sublayer::Ffn, 0, 1, Ranking::Mass),
            Err(UmoeError::UnknownExpert { .. })
        ));
    }

    proptest! {
        #[test]
        fn top_tokens_match_sort_oracle(events in proptest::collection::vec((0u32..20, 0.0f64..1.0), 1..80), k in 1usize..25) {
            let mut s = ExpertTokenStats::new();
            s.experts.insert((0, Sublayer::Attn), 1);
            for &(tok, g) in &events {
                s.add_event(0, Sublayer::Attn, 0, tok, g);
            }
            let mut totals: BTreeMap<u32, u128> = BTreeMap::new();
            for &(tok, g) in &events {
                *totals.entry(tok).or_default() += to_fixed(g);
            }
            let mut oracle: Vec<(u32, u128)> = totals.into_iter().collect();
            oracle.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let got = s.top_tokens(0, Sublayer::Attn, 0, k, Ranking::Mass).unwrap();
            let want: Vec<u32> = oracle.iter().take(k).map(|x| x.0).collect();
            prop_assert_eq!(got.iter().map(|t| t.token).collect::<Vec<_>>(), want);
        }

        #[test]
        fn merge_is_partition_invariant(
            events in proptest::collection::vec((0usize..2, 0usize..4, 0u32..6, 0.0f64..1.0), 0..60),
            cut in 0usize..60,
        ) {
            let cut = cut.min(events.len());
            let fill = |evs: &[(usize, usize, u32, f64)]| {
                let mut s = ExpertTokenStats::new();
                for &(l, e, t, g) in evs {
                    s.add_event(l, Sublayer::Ffn, e, t, g);
                }
                s
            };
            let whole = fill(&events);
            let mut left = fill(&events[..cut]);
            let right = fill(&events[cut..]);
            let mut swapped = right.clone();
            swapped.merge(&left);
            left.merge(&right);
            prop_assert_eq!(&left, &whole);
            prop_assert_eq!(&swapped, &whole);
        }
    }

    #[test]
    fn dump_rows_are_causal_distributions_ranked_by_score() {
        let m = tiny();
        let tokens: Vec<u32> = (0..10).map(|i| (3 * i + 1) as u32).collect();
        let top = m.cfg.attn_experts();
        let dump = dump_attention_maps(&m, &tokens, 0, 6, top).unwrap();
        assert_eq!(dump.experts.len(), top);
        for w in dump.experts.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for r in &dump.experts {
            assert!((r.row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.row[7..].iter().all(|&v| v == 0.0));
        }
        let x = m.attention_inputs(&tokens).unwrap();
        let AttnParams::Moe(p) = &m.layers[0].attn else {
            panic!()
        };
        let probs = crate::tensor::softmax(&p.router.logits(x[0].row(6)));
        let oracle = crate::router::top_k(&probs, top);
        assert_eq!(dump.experts.iter().map(|r| r.expert).collect::<Vec<_>>(), oracle);
        assert!(dump.to_csv().unwrap().lines().count() == top + 1);
    }

    #[test]
    fn dump_with_zero_lora_is_shared_query_attention() {
        let m = tiny();
        let tokens: Vec<u32> = vec![1, 4, 9, 16, 25];
        let dump = dump_attention_maps(&m, &tokens, 0, 4, 1).unwrap();
        let x = m.attention_inputs(&tokens).unwrap();
        let AttnParams::Moe(p) = &m.layers[0].attn else {
            panic!()
        };
        let bank = &p.bank;
        let mut keys = Vec::new();
        for j in 0..=4 {
            keys.push(crate::mixing::rope(&crate::tensor::vec_mat(x[0].row(j), &bank.wk), j, m.cfg.rope_base).unwrap());
        }
        let q = crate::mixing::rope(&crate::tensor::vec_mat(x[0].row(4), &bank.wq), 4, m.cfg.rope_base).unwrap();
        let scale = 1.0 / (m.cfg.key_dim as f64).sqrt();
        let logits: Vec<f64> = keys.iter().map(|k| crate::tensor::dot(&q, k) * scale).collect();
        let want = crate::tensor::softmax(&logits);
        for (a, b) in dump.experts[0].row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dump_rejects_out_of_range_position() {
        let m = tiny();
        assert!(matches!(
            dump_attention_maps(&m, &[1, 2, 3], 0, 3, 1),
            Err(UmoeError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn layerwise_sums_layers() {
        let m = tiny();
        let tokens: Vec<u32> = vec![2, 7, 1, 8, 2, 8];
        let sum = accumulate_layerwise(&m, &tokens, 5, 2).unwrap();
        let mut want = vec![vec![0.0; tokens.len()]; 2];
        let mut scores = [0.0; 2];
        for l in 0..m.layers.len() {
            let d = dump_attention_maps(&m, &tokens, l, 5, 2).unwrap();
            for r in d.experts {
                for (a, v) in want[r.rank].iter_mut().zip(&r.row) {
                    *a += v;
                }
                scores[r.rank] += r.score;
            }
        }
        assert_eq!(sum.rows, want);
        assert_eq!(sum.score_sums, scores.to_vec());
        assert_eq!(sum.layers, m.layers.len());

        let mut one = m.clone();
        one.layers.truncate(1);
        one.cfg.n_layers = 1;
        let single = accumulate_layerwise(&one, &tokens, 5, 2).unwrap();
        let d = dump_attention_maps(&one, &tokens, 0, 5, 2).unwrap();
        assert_eq!(single.rows[0], d.experts[0].row);
    }
}
