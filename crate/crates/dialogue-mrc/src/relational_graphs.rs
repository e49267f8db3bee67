//! Speaker and discourse graphs over utterances, and the relational GCN
//! that propagates over them.
//!
//! Both graph kinds share node ordering: utterance nodes first (utterance
//! order), then the single global node, then (discourse only) one node per
//! relation instance. Utterances that lost their trailing [SEP] to
//! truncation get no node; relations touching them are dropped with a
//! warning count.
//!
//! The per-layer update for node i is
//! `h_i' = ReLU(sum_r sum_{j in N_i^r} (1/|N_i^r|) h_j W_r + h_i W_0 + b)`,
//! where `N_i^r` are in-neighbors under edge type r and empty types are
//! skipped. Self-connections come only from the `W_0` term; the builders
//! add no explicit self-edges.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::corpus::{Dialogue, EncodedExample};
use crate::error::{Error, Result};
use crate::speaker_attention::{init_state_embedding, init_weight};

pub const SAME_SPEAKER: &str = "same_speaker";
pub const GLOBAL_OUT: &str = "global_out";
pub const SRC_TO_REL: &str = "src_to_rel";
pub const REL_TO_TGT: &str = "rel_to_tgt";
pub const REL_TO_SRC: &str = "rel_to_src";
pub const TGT_TO_REL: &str = "tgt_to_rel";

/// Edge-type registries. Indices into these arrays are the stable edge-type
/// ids the per-type weight matrices key off.
pub const SPEAKER_EDGE_TYPES: [&str; 2] = [SAME_SPEAKER, GLOBAL_OUT];
pub const DISCOURSE_EDGE_TYPES: [&str; 5] =
    [SRC_TO_REL, REL_TO_TGT, REL_TO_SRC, TGT_TO_REL, GLOBAL_OUT];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    /// Original utterance index (not the node index).
    Utterance(usize),
    /// Relation instance carrying its label registry id and label text.
    Relation { label_id: usize, label: String },
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub etype: usize,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub nodes: Vec<NodeKind>,
    pub edges: Vec<Edge>,
    pub edge_type_names: Vec<String>,
    /// Node index of the global node.
    pub global_index: usize,
    /// Count of utterance nodes (they occupy node indices 0..this).
    pub utterance_nodes: usize,
}

impl HeteroGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges_of_type(&self, name: &str) -> usize {
        match self.edge_type_names.iter().position(|t| t == name) {
            Some(id) => self.edges.iter().filter(|e| e.etype == id).count(),
            None => 0,
        }
    }

    /// Line rendering used by `inspect-graph`: one `NODE <id> <kind>` line
    /// per node, then one `EDGE <src> <dst> <type>` line per edge, both in
    /// construction order.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let kind = match n {
                NodeKind::Utterance(u) => format!("UTTERANCE({u})"),
                NodeKind::Relation { label, .. } => format!("RELATION({label})"),
                NodeKind::Global => "GLOBAL".to_string(),
            };
            out.push_str(&format!("NODE {i} {kind}\n"));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "EDGE {} {} {}\n",
                e.src, e.dst, self.edge_type_names[e.etype]
            ));
        }
        out
    }
}

/// Speaker graph: one node per surviving utterance plus a global node.
/// Every unordered pair of same-speaker utterances gets edges in both
/// directions; the global node points at every utterance node.
pub fn build_speaker_graph(e: &EncodedExample) -> HeteroGraph {
    let surviving = e.utterances_with_sep();
    let k = surviving.len();
    let mut nodes: Vec<NodeKind> = surviving.iter().map(|&u| NodeKind::Utterance(u)).collect();
    nodes.push(NodeKind::Global);

    let speaker_of_node: Vec<Option<usize>> = surviving
        .iter()
        .map(|&u| e.sep_position_of_utterance[u].and_then(|p| e.speaker_of_token[p]))
        .collect();

    let mut edges = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            if speaker_of_node[a].is_some() && speaker_of_node[a] == speaker_of_node[b] {
                edges.push(Edge { src: a, dst: b, etype: 0 });
                edges.push(Edge { src: b, dst: a, etype: 0 });
            }
        }
    }
    for node in 0..k {
        edges.push(Edge { src: k, dst: node, etype: 1 });
    }

    HeteroGraph {
        nodes,
        edges,
        edge_type_names: SPEAKER_EDGE_TYPES.iter().map(|s| s.to_string()).collect(),
        global_index: k,
        utterance_nodes: k,
    }
}

/// Discourse graph: surviving utterance nodes, the global node, then one
/// node per surviving relation instance. Each relation (src, tgt, label)
/// contributes four role-typed edges through its node; the global node
/// points at every other node. Returns the graph plus a warning count for
/// deduplicated triples and relations whose endpoints lost their nodes.
pub fn build_discourse_graph(d: &Dialogue, e: &EncodedExample) -> (HeteroGraph, u32) {
    let surviving = e.utterances_with_sep();
    let k = surviving.len();
    let node_of_utterance: std::collections::HashMap<usize, usize> = surviving
        .iter()
        .enumerate()
        .map(|(node, &u)| (u, node))
        .collect();

    let mut warnings = 0u32;
    let mut kept: Vec<(usize, usize, usize, String)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (ri, r) in d.relations.iter().enumerate() {
        let label_id = e.relation_label_ids.get(ri).copied().unwrap_or(0);
        if !seen.insert((r.source, r.target, r.label.clone())) {
            warnings += 1;
            continue;
        }
        match (node_of_utterance.get(&r.source), node_of_utterance.get(&r.target)) {
            (Some(&s), Some(&t)) => kept.push((s, t, label_id, r.label.clone())),
            _ => warnings += 1,
        }
    }

    let mut nodes: Vec<NodeKind> = surviving.iter().map(|&u| NodeKind::Utterance(u)).collect();
    nodes.push(NodeKind::Global);
    for (_, _, label_id, label) in &kept {
        nodes.push(NodeKind::Relation {
            label_id: *label_id,
            label: label.clone(),
        });
    }

    let etype = |name: &str| {
        DISCOURSE_EDGE_TYPES
            .iter()
            .position(|t| *t == name)
            .expect("registered edge type")
    };
    let mut edges = Vec::new();
    for (m, (s, t, _, _)) in kept.iter().enumerate() {
        let rel_node = k + 1 + m;
        edges.push(Edge { src: *s, dst: rel_node, etype: etype(SRC_TO_REL) });
        edges.push(Edge { src: rel_node, dst: *t, etype: etype(REL_TO_TGT) });
        edges.push(Edge { src: rel_node, dst: *s, etype: etype(REL_TO_SRC) });
        edges.push(Edge { src: *t, dst: rel_node, etype: etype(TGT_TO_REL) });
    }
    let global = k;
    for node in 0..nodes.len() {
        if node != global {
            edges.push(Edge { src: global, dst: node, etype: etype(GLOBAL_OUT) });
        }
    }

    (
        HeteroGraph {
            nodes,
            edges,
            edge_type_names: DISCOURSE_EDGE_TYPES.iter().map(|s| s.to_string()).collect(),
            global_index: global,
            utterance_nodes: k,
        },
        warnings,
    )
}

pub struct RgcnLayerParams {
    /// One transform per registered edge type, in registry order.
    pub w_rel: Vec<Tensor>,
    pub w_self: Tensor,
    pub bias: Tensor,
}

/// Parameters for one graph kind's R-GCN stack. `label_embedding` is present
/// only for the discourse graph (rows indexed by relation label id).
pub struct RgcnParams {
    pub layers: Vec<RgcnLayerParams>,
    pub label_embedding: Option<Tensor>,
    pub global_embedding: Tensor,
}

impl RgcnParams {
    pub fn init(
        hidden: usize,
        num_edge_types: usize,
        num_layers: usize,
        num_labels: Option<usize>,
        rng: &mut impl Rng,
    ) -> RgcnParams {
        let layers = (0..num_layers)
            .map(|_| RgcnLayerParams {
                w_rel: (0..num_edge_types)
                    .map(|_| init_weight(hidden, hidden, rng))
                    .collect(),
                w_self: init_weight(hidden, hidden, rng),
                bias: Tensor::zeros(1, hidden),
            })
            .collect();
        // Node-state embeddings sit alongside LayerNorm-scaled encoder rows,
        // so they start at a comparable magnitude rather than weight scale.
        RgcnParams {
            layers,
            label_embedding: num_labels.map(|n| init_state_embedding(n.max(1), hidden, rng)),
            global_embedding: init_state_embedding(1, hidden, rng),
        }
    }

    pub fn named_parameters(
        &self,
        prefix: &str,
        edge_type_names: &[&str],
        out: &mut Vec<(String, Tensor)>,
    ) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (r, w) in layer.w_rel.iter().enumerate() {
                out.push((format!("{prefix}.layer{i}.w_{}", edge_type_names[r]), w.clone()));
            }
            out.push((format!("{prefix}.layer{i}.w_self"), layer.w_self.clone()));
            out.push((format!("{prefix}.layer{i}.bias"), layer.bias.clone()));
        }
        if let Some(emb) = &self.label_embedding {
            out.push((format!("{prefix}.label_embedding"), emb.clone()));
        }
        out.push((format!("{prefix}.global_embedding"), self.global_embedding.clone()));
    }
}

/// Initial node states: utterance nodes read H at their utterance's trailing
/// [SEP] row, the global node reads the learned global embedding, relation
/// nodes read their label's embedding row.
pub fn init_node_states(
    h: &Tensor,
    g: &HeteroGraph,
    e: &EncodedExample,
    p: &RgcnParams,
) -> Result<Tensor> {
    let mut parts: Vec<Tensor> = Vec::new();

    let sep_rows: Vec<usize> = g.nodes[..g.utterance_nodes]
        .iter()
        .map(|n| match n {
            NodeKind::Utterance(u) => e.sep_position_of_utterance[*u]
                .expect("utterance nodes exist only for utterances with a [SEP]"),
            _ => unreachable!("utterance nodes precede all others"),
        })
        .collect();
    if !sep_rows.is_empty() {
        parts.push(h.embedding_lookup(&sep_rows)?);
    }

    parts.push(p.global_embedding.clone());

    let label_ids: Vec<usize> = g.nodes[g.utterance_nodes + 1..]
        .iter()
        .map(|n| match n {
            NodeKind::Relation { label_id, .. } => *label_id,
            _ => unreachable!("relation nodes follow the global node"),
        })
        .collect();
    if !label_ids.is_empty() {
        let table = p.label_embedding.as_ref().ok_or_else(|| {
            Error::ConfigMismatch("relation nodes present but no label embedding table".into())
        })?;
        parts.push(table.embedding_lookup(&label_ids)?);
    }

    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// One R-GCN layer over `states` (|V| x D).
pub fn rgcn_layer(g: &HeteroGraph, states: &Tensor, lp: &RgcnLayerParams) -> Result<Tensor> {
    let v = g.num_nodes();
    let mut acc = states.matmul(&lp.w_self)?;
    for (etype, w) in lp.w_rel.iter().enumerate() {
        let mut indegree = vec![0usize; v];
        for edge in g.edges.iter().filter(|e| e.etype == etype) {
            indegree[edge.dst] += 1;
        }
        if indegree.iter().all(|&c| c == 0) {
            continue;
        }
        // Normalized in-adjacency: A[i][j] = 1/|N_i^r| per edge j -> i.
        let mut adj = vec![0.0f64; v * v];
        for edge in g.edges.iter().filter(|e| e.etype == etype) {
            adj[edge.dst * v + edge.src] = 1.0 / indegree[edge.dst] as f64;
        }
        let a = Tensor::from_vec(v, v, adj);
        acc = acc.add(&a.matmul(states)?.matmul(w)?)?;
    }
    Ok(acc.add(&lp.bias)?.relu())
}

/// Final states split into the pieces downstream consumers need.
pub struct GraphOutput {
    /// Utterance-node rows, in node order (k x D).
    pub utterances: Tensor,
    /// Global node's final state (1 x D).
    pub global: Tensor,
}

/// Run the full R-GCN stack from the initial states and slice out the
/// utterance block and global row. With zero layers this returns the raw
/// initial states (SEP rows / embeddings).
pub fn run_graph(
    g: &HeteroGraph,
    h: &Tensor,
    e: &EncodedExample,
    p: &RgcnParams,
) -> Result<GraphOutput> {
    let mut states = init_node_states(h, g, e, p)?;
    for layer in &p.layers {
        states = rgcn_layer(g, &states, layer)?;
    }
    let k = g.utterance_nodes;
    Ok(GraphOutput {
        utterances: states.slice_rows(0, k)?,
        global: states.slice_rows(k, k + 1)?,
    })
}

/// Scatter per-utterance vectors back over token positions: each token of
/// utterance u gets u's node row; question tokens, [CLS], padding, and
/// tokens of utterances without a node get the global node's final state.
pub fn broadcast_to_tokens(
    utterances: &Tensor,
    global: &Tensor,
    e: &EncodedExample,
) -> Result<Tensor> {
    let surviving = e.utterances_with_sep();
    let mut node_of_utterance = std::collections::HashMap::new();
    for (node, &u) in surviving.iter().enumerate() {
        node_of_utterance.insert(u, node);
    }
    let full = Tensor::concat_rows(&[utterances, global])?;
    let global_row = utterances.rows();
    let indices: Vec<usize> = e
        .utterance_of_token
        .iter()
        .map(|u| {
            u.and_then(|u| node_of_utterance.get(&u).copied())
                .unwrap_or(global_row)
        })
        .collect();
    full.embedding_lookup(&indices)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{set_precision, Precision};
    use crate::corpus::{build_vocabulary, encode_example, validate_corpus, Dialogue};

    const THREE_TURNS: &str = r#"{"dialogues":[{"id":"d0","edus":[
        {"speaker":"a","text":"x"},{"speaker":"b","text":"y"},{"speaker":"a","text":"z"}],
        "relations":[{"x":0,"y":1,"type":"QAP"},{"x":0,"y":1,"type":"QAP"},
                     {"x":1,"y":2,"type":"Comment"}],
        "qas":[{"id":"q0","question":"who","is_impossible":true}]}]}"#;

    fn encode(json: &str, max_len: usize) -> (Dialogue, EncodedExample) {
        let mut dialogues = validate_corpus(serde_json::from_str(json).unwrap()).unwrap();
        let vocab = build_vocabulary(&dialogues, 1);
        let d = dialogues.remove(0);
        let e = encode_example(&d, &d.questions[0], &vocab, max_len).unwrap();
        (d, e)
    }

    #[test]
    fn speaker_graph_links_same_speaker_pairs_both_ways() {
        let (_, e) = encode(THREE_TURNS, 16);
        let g = build_speaker_graph(&e);
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.utterance_nodes, 3);
        assert_eq!(g.global_index, 3);
        assert_eq!(g.edges_of_type(SAME_SPEAKER), 2);
        assert_eq!(g.edges_of_type(GLOBAL_OUT), 3);
        assert!(g.edges.contains(&Edge { src: 0, dst: 2, etype: 0 }));
        assert!(g.edges.contains(&Edge { src: 2, dst: 0, etype: 0 }));
        let text = g.render_text();
        assert!(text.contains("NODE 3 GLOBAL"));
        assert!(text.contains("EDGE 3 1 global_out"));
    }

    #[test]
    fn fully_truncated_dialogue_leaves_only_the_global_node() {
        let (_, e) = encode(THREE_TURNS, 5);
        assert!(e.utterances_with_sep().is_empty());
        let g = build_speaker_graph(&e);
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.utterance_nodes, 0);
        assert!(g.edges.is_empty());
        assert_eq!(g.render_text(), "NODE 0 GLOBAL\n");
    }

    #[test]
    fn discourse_graph_dedups_triples_and_drops_truncated_endpoints() {
        let (d, e) = encode(THREE_TURNS, 16);
        assert_eq!(e.relation_label_ids, vec![1, 1, 2]);
        let (g, warnings) = build_discourse_graph(&d, &e);
        assert_eq!(warnings, 1); // the duplicated QAP triple
        assert_eq!(g.num_nodes(), 6); // 3 utterances + global + 2 relations
        assert_eq!(g.edges_of_type(SRC_TO_REL), 2);
        assert_eq!(g.edges_of_type(REL_TO_TGT), 2);
        assert_eq!(g.edges_of_type(REL_TO_SRC), 2);
        assert_eq!(g.edges_of_type(TGT_TO_REL), 2);
        assert_eq!(g.edges_of_type(GLOBAL_OUT), 5);
        assert!(matches!(&g.nodes[4], NodeKind::Relation { label_id: 1, label } if label == "QAP"));

        // max_len 12 cuts utterance 2 mid-stream: its relation is dropped.
        let (d, e) = encode(THREE_TURNS, 12);
        assert_eq!(e.utterances_with_sep(), vec![0, 1]);
        let (g, warnings) = build_discourse_graph(&d, &e);
        assert_eq!(warnings, 2);
        assert_eq!(g.num_nodes(), 4);
        let rel = 3;
        assert!(g.edges.contains(&Edge { src: 0, dst: rel, etype: 0 }));
        assert!(g.edges.contains(&Edge { src: rel, dst: 1, etype: 1 }));
        assert!(g.edges.contains(&Edge { src: rel, dst: 0, etype: 2 }));
        assert!(g.edges.contains(&Edge { src: 1, dst: rel, etype: 3 }));
        assert_eq!(g.edges_of_type(GLOBAL_OUT), 3);
    }

    fn identity(n: usize) -> Tensor {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Tensor::from_vec(n, n, v)
    }

    #[test]
    fn rgcn_layer_averages_in_neighbors_per_type() {
        set_precision(Precision::F64);
        let g = HeteroGraph {
            nodes: vec![NodeKind::Utterance(0), NodeKind::Utterance(1), NodeKind::Global],
            edges: vec![
                Edge { src: 0, dst: 2, etype: 0 },
                Edge { src: 1, dst: 2, etype: 0 },
            ],
            edge_type_names: SPEAKER_EDGE_TYPES.iter().map(|s| s.to_string()).collect(),
            global_index: 2,
            utterance_nodes: 2,
        };
        let states = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let lp = RgcnLayerParams {
            w_rel: vec![identity(2), identity(2)], // second type has no edges
            w_self: identity(2),
            bias: Tensor::zeros(1, 2),
        };
        let out = rgcn_layer(&g, &states, &lp).unwrap();
        // Node 2 averages its two in-neighbors on top of its self-loop.
        assert_eq!(out.value(), vec![1.0, 0.0, 0.0, 1.0, 1.5, 1.5]);

        let biased = RgcnLayerParams {
            w_rel: vec![identity(2), identity(2)],
            w_self: identity(2),
            bias: Tensor::from_vec(1, 2, vec![-1.25, 0.0]),
        };
        let out = rgcn_layer(&g, &states, &biased).unwrap();
        assert_eq!(out.value(), vec![0.0, 0.0, 0.0, 1.0, 0.25, 1.5]);
    }

    #[test]
    fn node_states_read_sep_rows_then_global_then_labels() {
        set_precision(Precision::F64);
        let (d, e) = encode(THREE_TURNS, 12);
        let l = e.len();
        let mut rows = Vec::new();
        for i in 0..l {
            rows.push(i as f64);
            rows.push(1000.0 + i as f64);
        }
        let h = Tensor::from_vec(l, 2, rows);
        let p = RgcnParams {
            layers: vec![],
            label_embedding: Some(Tensor::from_vec(
                3,
                2,
                vec![100.0, 100.5, 200.0, 200.5, 300.0, 300.5],
            )),
            global_embedding: Tensor::from_vec(1, 2, vec![42.0, 43.0]),
        };
        let (g, _) = build_discourse_graph(&d, &e);
        let states = init_node_states(&h, &g, &e, &p).unwrap();
        // SEPs sit at positions 6 and 10; the kept QAP has label id 1.
        assert_eq!(
            states.value(),
            vec![6.0, 1006.0, 10.0, 1010.0, 42.0, 43.0, 200.0, 200.5]
        );

        let out = run_graph(&g, &h, &e, &p).unwrap();
        assert_eq!(out.utterances.value(), vec![6.0, 1006.0, 10.0, 1010.0]);
        assert_eq!(out.global.value(), vec![42.0, 43.0]);
    }

    #[test]
    fn broadcast_covers_nodeless_tokens_with_the_global_state() {
        set_precision(Precision::F64);
        let (_, e) = encode(THREE_TURNS, 12);
        let utterances = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let global = Tensor::from_vec(1, 2, vec![9.0, 9.0]);
        let out = broadcast_to_tokens(&utterances, &global, &e).unwrap();
        let v = out.value();
        let row = |i: usize| (v[i * 2], v[i * 2 + 1]);
        for i in [0, 1, 2, 11] {
            // question block, and the token of truncated utterance 2
            assert_eq!(row(i), (9.0, 9.0), "position {i}");
        }
        for i in 3..=6 {
            assert_eq!(row(i), (1.0, 2.0));
        }
        for i in 7..=10 {
            assert_eq!(row(i), (3.0, 4.0));
        }
    }

    #[test]
    fn graph_parameter_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = RgcnParams::init(4, 5, 2, Some(3), &mut rng);
        let mut named = Vec::new();
        p.named_parameters("discourse_graph", &DISCOURSE_EDGE_TYPES, &mut named);
        assert_eq!(named.len(), 2 * (5 + 2) + 2);
        assert_eq!(named[0].0, "discourse_graph.layer0.w_src_to_rel");
        assert_eq!(named[5].0, "discourse_graph.layer0.w_self");
        assert_eq!(named[6].0, "discourse_graph.layer0.bias");
        assert_eq!(named[14].0, "discourse_graph.label_embedding");
        assert_eq!(named[15].0, "discourse_graph.global_embedding");

        let speaker = RgcnParams::init(4, 2, 1, None, &mut rng);
        let mut named = Vec::new();
        speaker.named_parameters("speaker_graph", &SPEAKER_EDGE_TYPES, &mut named);
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "speaker_graph.layer0.w_same_speaker",
                "speaker_graph.layer0.w_global_out",
                "speaker_graph.layer0.w_self",
                "speaker_graph.layer0.bias",
                "speaker_graph.global_embedding",
            ]
        );
    }
}
