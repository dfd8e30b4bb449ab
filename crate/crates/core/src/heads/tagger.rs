use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbpe::{ByteVocab, SPECIALS};
use crate::corpus::Sentence;
use crate::neural::{
    adam_step, birnn_layer, forward_transformer, gru_pass, init_gru, layer_norm, pool_subwords, read_checkpoint,
    scalar_mix, write_checkpoint, AdamConfig, AdamState, Bound, Direction, Graph, GruParams, NeuralError, ParamSet,
    Tensor, TransformerConfig, Var,
};

use super::{
    apply_edit_script, biaffine_scores, build_lemma_inventory, decode_tree, derive_edit_script, init_biaffine,
    label_scores, BiaffineParams, DepArcScores, HeadsError, LemmaCategoryInventory, RootConstraint,
};

/// A pretrained encoder whose layer outputs serve as frozen word features.
pub struct ContextualEncoder {
    pub config: TransformerConfig,
    pub params: ParamSet,
    pub vocab: ByteVocab,
}

impl ContextualEncoder {
    pub fn num_layers(&self) -> usize {
        self.config.layers + 1
    }

    /// Per encoder layer, one `[words, hidden]` tensor holding the sum of
    /// each word's subword vectors. Long sentences are encoded in chunks
    /// that fit the position limit.
    pub fn layer_features<S: AsRef<str>>(&self, forms: &[S]) -> Result<Vec<Tensor>, HeadsError> {
        let budget = self.config.max_positions.saturating_sub(2);
        let pieces: Vec<Vec<u32>> = forms
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let text = if i == 0 {
                    f.as_ref().to_string()
                } else {
                    format!(" {}", f.as_ref())
                };
                let mut ids = self.vocab.encode(&text).ids;
                ids.truncate(budget.max(1));
                if ids.is_empty() {
                    ids.push(SPECIALS.unk);
                }
                ids
            })
            .collect();

        let d = self.config.hidden;
        let mut layers = vec![Vec::with_capacity(forms.len() * d); self.num_layers()];
        let mut start = 0;
        while start < pieces.len() {
            let mut end = start;
            let mut used = 0;
            while end < pieces.len() && (end == start || used + pieces[end].len() <= budget) {
                used += pieces[end].len();
                end += 1;
            }
            let mut ids = vec![SPECIALS.bos];
            let mut groups = Vec::with_capacity(end - start);
            for p in &pieces[start..end] {
                groups.push((ids.len()..ids.len() + p.len()).collect::<Vec<_>>());
                ids.extend_from_slice(p);
            }
            ids.push(SPECIALS.eos);

            let mut graph = Graph::new();
            let bound = self.params.bind_where(&mut graph, |_| false);
            let out = forward_transformer(&mut graph, &self.config, &bound, &[ids], None)?;
            for (l, &layer) in out.layers.iter().enumerate() {
                let flat = graph.reshape(layer, vec![graph.value(layer).numel() / d, d]);
                let pooled = pool_subwords(&mut graph, flat, &groups)?;
                layers[l].extend_from_slice(&graph.value(pooled).values);
            }
            start = end;
        }
        Ok(layers.into_iter().map(|v| Tensor::matrix(forms.len(), d, v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    /// Recurrent state size per direction.
    pub hidden: usize,
    pub layers: usize,
    /// Train a dependency parser on the shared trunk.
    pub parser: bool,
    pub arc_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eps: f64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            word_dim: 32,
            char_dim: 16,
            char_hidden: 16,
            hidden: 32,
            layers: 3,
            parser: true,
            arc_dim: 32,
            learning_rate: 3e-3,
            batch_size: 8,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaggerVocab {
    words: Vec<String>,
    chars: Vec<char>,
    tags: Vec<String>,
    deprels: Vec<String>,
    inventory: LemmaCategoryInventory,
    /// Encoder layer count and width of the frozen features, if used.
    contextual: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaggerTrainReport {
    pub losses: Vec<f64>,
    pub train_tag_accuracy: f64,
}

/// Per-sentence tagged output with predicted UPOS, lemma and (if trained)
/// head and relation on each token.
pub type TaggedSentence = Sentence;

/// Three stacked bidirectional recurrent layers over word, character and
/// optional frozen contextual inputs, with softmax heads for tags and lemma
/// categories and an optional biaffine parser.
pub struct Tagger {
    pub config: TaggerConfig,
    vocab: TaggerVocab,
    word_index: HashMap<String, usize>,
    char_index: HashMap<char, usize>,
    pub params: ParamSet,
    trunk: Vec<(GruParams, GruParams)>,
    chars: (GruParams, GruParams),
    arcs: Option<BiaffineParams>,
}

struct BatchGraph {
    tag_logits: Var,
    lemma_logits: Var,
    /// Per sentence: arc scores `[n + 1, n]` and label-side head/dependent reprs.
    parses: Vec<(Var, Var, Var)>,
    time_rows: Vec<Vec<usize>>,
}

fn lower(form: &str) -> String {
    form.to_lowercase()
}

impl Tagger {
    pub fn new(
        config: TaggerConfig,
        train: &[Sentence],
        contextual: Option<&ContextualEncoder>,
        seed: u64,
    ) -> Result<Self, HeadsError> {
        if train.is_empty() {
            return Err(HeadsError::Data("no training sentences".into()));
        }
        let mut words = vec!["<unk>".to_string()];
        let mut chars = vec!['\u{0}'];
        let mut tags = Vec::new();
        let mut deprels = Vec::new();
        let mut pairs = Vec::new();
        let mut seen_words = HashMap::new();
        let mut seen_chars = HashMap::new();
        for tok in train.iter().flat_map(|s| &s.tokens) {
            let w = lower(&tok.form);
            if !seen_words.contains_key(&w) {
                seen_words.insert(w.clone(), words.len());
                words.push(w);
            }
            for c in tok.form.chars() {
                if let std::collections::hash_map::Entry::Vacant(e) = seen_chars.entry(c) {
                    e.insert(chars.len());
                    chars.push(c);
                }
            }
            if let Some(t) = &tok.upos {
                if !tags.contains(t) {
                    tags.push(t.clone());
                }
            }
            if let Some(r) = &tok.deprel {
                if !deprels.contains(r) {
                    deprels.push(r.clone());
                }
            }
            if let Some(l) = &tok.lemma {
                pairs.push((tok.form.clone(), l.clone()));
            }
        }
        if tags.is_empty() {
            tags.push("X".into());
        }
        if deprels.is_empty() {
            deprels.push("dep".into());
        }
        let mut inventory = build_lemma_inventory(&pairs);
        if inventory.is_empty() {
            inventory = build_lemma_inventory(&[("x", "x")]);
        }
        let vocab = TaggerVocab {
            words,
            chars,
            tags,
            deprels,
            inventory,
            contextual: contextual.map(|e| (e.num_layers(), e.config.hidden)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::new();
        Self::assemble(config, vocab, params, Some(&mut rng))
    }

    fn assemble(
        config: TaggerConfig,
        vocab: TaggerVocab,
        mut params: ParamSet,
        init: Option<&mut ChaCha8Rng>,
    ) -> Result<Self, HeadsError> {
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let fresh = init.is_some();
        let rng = match init {
            Some(r) => r,
            None => &mut scratch,
        };
        let mut created = ParamSet::new();
        let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
        };
        created.insert("word_emb", dense(vocab.words.len(), config.word_dim, rng));
        created.insert("char_emb", dense(vocab.chars.len(), config.char_dim, rng));
        let chars = (
            init_gru(&mut created, "char.fwd", config.char_dim, config.char_hidden, rng),
            init_gru(&mut created, "char.bwd", config.char_dim, config.char_hidden, rng),
        );
        let mut input = config.word_dim + 2 * config.char_hidden;
        if let Some((layers, dim)) = vocab.contextual {
            created.insert("ctx.mix", Tensor::zeros(&[layers]));
            created.insert("ctx.gamma", Tensor::scalar(1.0));
            created.insert("ctx.ln.g", Tensor::full(&[dim], 1.0));
            created.insert("ctx.ln.b", Tensor::zeros(&[dim]));
            input += dim;
        }
        let mut trunk = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let width = if l == 0 { input } else { 2 * config.hidden };
            trunk.push((
                init_gru(&mut created, &format!("trunk{l}.fwd"), width, config.hidden, rng),
                init_gru(&mut created, &format!("trunk{l}.bwd"), width, config.hidden, rng),
            ));
        }
        let out = 2 * config.hidden;
        created.insert("tag.w", dense(out, vocab.tags.len(), rng));
        created.insert("tag.b", Tensor::zeros(&[vocab.tags.len()]));
        created.insert("lemma.w", dense(out, vocab.inventory.len(), rng));
        created.insert("lemma.b", Tensor::zeros(&[vocab.inventory.len()]));
        let arcs = if config.parser {
            created.insert("parse.root", dense(1, out, rng));
            for part in ["arc_head", "arc_dep", "lab_head", "lab_dep"] {
                created.insert(format!("parse.{part}.w"), dense(out, config.arc_dim, rng));
                created.insert(format!("parse.{part}.b"), Tensor::zeros(&[config.arc_dim]));
            }
            Some(init_biaffine(
                &mut created,
                "parse.biaffine",
                config.arc_dim,
                vocab.deprels.len(),
                rng,
            ))
        } else {
            None
        };
        if fresh {
            params = created;
        } else {
            for (name, t) in created.iter() {
                match params.get(name) {
                    Some(p) if p.shape == t.shape => {}
                    _ => {
                        return Err(HeadsError::Data(format!(
                            "stored parameter `{name}` is missing or misshapen"
                        )))
                    }
                }
            }
        }
        let word_index = vocab.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let char_index = vocab.chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Tagger {
            config,
            vocab,
            word_index,
            char_index,
            params,
            trunk,
            chars,
            arcs,
        })
    }

    pub fn tags(&self) -> &[String] {
        &self.vocab.tags
    }

    pub fn deprels(&self) -> &[String] {
        &self.vocab.deprels
    }

    pub fn inventory(&self) -> &LemmaCategoryInventory {
        &self.vocab.inventory
    }

    pub fn uses_contextual(&self) -> bool {
        self.vocab.contextual.is_some()
    }

    /// Saves configuration, vocabularies and weights in the checkpoint format.
    pub fn save<W: Write>(&self, w: W) -> Result<(), HeadsError> {
        let meta = serde_json::json!({ "tagger": self.config, "vocab": self.vocab });
        write_checkpoint(w, &meta.to_string(), &self.params)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self, HeadsError> {
        let (meta, params) = read_checkpoint(r)?;
        let bad = |e: serde_json::Error| HeadsError::Neural(NeuralError::Format(e.to_string()));
        let mut value: serde_json::Value = serde_json::from_str(&meta).map_err(bad)?;
        let config: TaggerConfig = serde_json::from_value(value["tagger"].take()).map_err(bad)?;
        let mut vocab: TaggerVocab = serde_json::from_value(value["vocab"].take()).map_err(bad)?;
        vocab.inventory.reindex();
        Self::assemble(config, vocab, params, None)
    }

    /// Frozen encoder features for each sentence, computed once.
    pub fn contextual_features(
        &self,
        sentences: &[Sentence],
        encoder: Option<&ContextualEncoder>,
    ) -> Result<Option<Vec<Vec<Tensor>>>, HeadsError> {
        match (self.vocab.contextual, encoder) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(HeadsError::Data("tagger expects contextual features".into())),
            (Some((layers, dim)), Some(e)) => {
                if e.num_layers() != layers || e.config.hidden != dim {
                    return Err(HeadsError::Dimension(
                        "encoder differs from the one used in training".into(),
                    ));
                }
                sentences
                    .iter()
                    .map(|s| e.layer_features(&s.forms().collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some)
            }
        }
    }

    fn build(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        batch: &[&Sentence],
        features: Option<&[&Vec<Tensor>]>,
    ) -> Result<BatchGraph, HeadsError> {
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        if lengths.contains(&0) {
            return Err(HeadsError::Data("empty sentence".into()));
        }
        let steps = *lengths.iter().max().unwrap();

        // Token rows are time-major: token t of sentence s is row t * b + s.
        let mut word_ids = vec![0usize; steps * b];
        let mut real_rows = Vec::new();
        for (s, sent) in batch.iter().enumerate() {
            for (t, tok) in sent.tokens.iter().enumerate() {
                word_ids[t * b + s] = self.word_index.get(&lower(&tok.form)).copied().unwrap_or(0);
                real_rows.push((t * b + s, tok.form.as_str()));
            }
        }
        let words = graph.gather(bound.get("word_emb"), &word_ids);

        // Character encoder over every real token at once.
        let n_words = real_rows.len();
        let char_lists: Vec<Vec<usize>> = real_rows
            .iter()
            .map(|(_, f)| {
                f.chars()
                    .map(|c| self.char_index.get(&c).copied().unwrap_or(0))
                    .collect()
            })
            .collect();
        let char_lengths: Vec<usize> = char_lists.iter().map(|c| c.len().max(1)).collect();
        let char_steps = *char_lengths.iter().max().unwrap();
        let mut char_ids = vec![0usize; char_steps * n_words];
        for (w, cs) in char_lists.iter().enumerate() {
            for (c, &id) in cs.iter().enumerate() {
                char_ids[c * n_words + w] = id;
            }
        }
        let char_in = graph.gather(bound.get("char_emb"), &char_ids);
        let fwd = gru_pass(
            graph,
            bound,
            &self.chars.0,
            char_in,
            n_words,
            &char_lengths,
            Direction::Forward,
        )?;
        let bwd = gru_pass(
            graph,
            bound,
            &self.chars.1,
            char_in,
            n_words,
            &char_lengths,
            Direction::Backward,
        )?;
        let char_repr = graph.concat_cols(&[fwd[char_steps - 1], bwd[0]]);
        let zero = graph.constant(Tensor::zeros(&[1, 2 * self.config.char_hidden]));
        let char_table = graph.concat_rows(&[char_repr, zero]);
        let mut scatter = vec![n_words; steps * b];
        for (w, (row, _)) in real_rows.iter().enumerate() {
            scatter[*row] = w;
        }
        let chars = graph.gather(char_table, &scatter);

        let mut inputs = vec![words, chars];
        if let Some((layers, dim)) = self.vocab.contextual {
            let feats = features.ok_or_else(|| HeadsError::Data("missing contextual features".into()))?;
            let mut per_layer = Vec::with_capacity(layers);
            for l in 0..layers {
                let mut v = vec![0.0; steps * b * dim];
                for (s, f) in feats.iter().enumerate() {
                    let layer = &f[l];
                    if layer.rows() != lengths[s] {
                        return Err(HeadsError::Dimension("features do not match sentence length".into()));
                    }
                    for t in 0..lengths[s] {
                        v[(t * b + s) * dim..(t * b + s + 1) * dim].copy_from_slice(layer.row(t));
                    }
                }
                per_layer.push(graph.constant(Tensor::matrix(steps * b, dim, v)));
            }
            let mixed = scalar_mix(graph, &per_layer, bound.get("ctx.mix"), bound.get("ctx.gamma"))?;
            inputs.push(layer_norm(
                graph,
                mixed,
                bound.get("ctx.ln.g"),
                bound.get("ctx.ln.b"),
                self.config.eps,
            )?);
        }
        let mut x = graph.concat_cols(&inputs);
        for (f, bw) in &self.trunk {
            x = birnn_layer(graph, bound, (f, bw), x, b, &lengths)?;
        }

        let dense = |graph: &mut Graph, input: Var, name: &str| {
            let m = graph.matmul(input, bound.get(&format!("{name}.w")));
            graph.add(m, bound.get(&format!("{name}.b")))
        };
        let tag_logits = dense(graph, x, "tag");
        let lemma_logits = dense(graph, x, "lemma");

        let time_rows: Vec<Vec<usize>> = (0..b).map(|s| (0..lengths[s]).map(|t| t * b + s).collect()).collect();
        let mut parses = Vec::new();
        if let Some(arcs) = &self.arcs {
            for rows in &time_rows {
                let r = graph.gather(x, rows);
                let with_root = graph.concat_rows(&[bound.get("parse.root"), r]);
                let mut mlp = |name: &str, input: Var| {
                    let h = dense(graph, input, name);
                    graph.tanh(h)
                };
                let heads = mlp("parse.arc_head", with_root);
                let deps = mlp("parse.arc_dep", r);
                let lab_heads = mlp("parse.lab_head", with_root);
                let lab_deps = mlp("parse.lab_dep", r);
                let scores = biaffine_scores(graph, bound, arcs, heads, deps)?;
                parses.push((scores, lab_heads, lab_deps));
            }
        }
        Ok(BatchGraph {
            tag_logits,
            lemma_logits,
            parses,
            time_rows,
        })
    }

    fn loss(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        batch: &[&Sentence],
        features: Option<&[&Vec<Tensor>]>,
    ) -> Result<Var, HeadsError> {
        let out = self.build(graph, bound, batch, features)?;
        let rows = graph.dims(out.tag_logits).0;
        let mut tag_targets = vec![None; rows];
        let mut lemma_targets = vec![None; rows];
        for (s, sent) in batch.iter().enumerate() {
            for (t, tok) in sent.tokens.iter().enumerate() {
                let row = out.time_rows[s][t];
                tag_targets[row] = tok
                    .upos
                    .as_ref()
                    .and_then(|u| self.vocab.tags.iter().position(|x| x == u));
                lemma_targets[row] = tok
                    .lemma
                    .as_ref()
                    .and_then(|l| self.vocab.inventory.id_of(&derive_edit_script(&tok.form, l)));
            }
        }
        let tag_loss = graph.cross_entropy(out.tag_logits, &tag_targets);
        let lemma_loss = graph.cross_entropy(out.lemma_logits, &lemma_targets);
        let mut total = graph.add(tag_loss, lemma_loss);

        if let Some(arcs) = &self.arcs {
            let mut parse_losses = Vec::new();
            for (s, sent) in batch.iter().enumerate() {
                let heads: Option<Vec<usize>> = sent.tokens.iter().map(|t| t.head).collect();
                let Some(heads) = heads else { continue };
                if heads.iter().any(|&h| h > sent.len()) {
                    return Err(HeadsError::Data("head index outside sentence".into()));
                }
                let (scores, lab_heads, lab_deps) = out.parses[s];
                let per_dep = graph.transpose(scores);
                let arc_targets: Vec<Option<usize>> = heads.iter().map(|&h| Some(h)).collect();
                parse_losses.push(graph.cross_entropy(per_dep, &arc_targets));
                let gold_heads = graph.gather(lab_heads, &heads);
                let labels = label_scores(graph, bound, arcs, gold_heads, lab_deps)?;
                let label_targets: Vec<Option<usize>> = sent
                    .tokens
                    .iter()
                    .map(|t| {
                        t.deprel
                            .as_ref()
                            .and_then(|r| self.vocab.deprels.iter().position(|x| x == r))
                    })
                    .collect();
                parse_losses.push(graph.cross_entropy(labels, &label_targets));
            }
            if !parse_losses.is_empty() {
                let stacked = graph.concat_cols(&parse_losses);
                let summed = graph.sum(stacked);
                let scaled = graph.scale(summed, 2.0 / parse_losses.len() as f64);
                total = graph.add(total, scaled);
            }
        }
        Ok(total)
    }

    /// Scalar training loss on `batch` for the given parameter binding.
    pub fn batch_loss(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        batch: &[&Sentence],
        features: Option<&[&Vec<Tensor>]>,
    ) -> Result<Var, HeadsError> {
        self.loss(graph, bound, batch, features)
    }

    /// Trains for `steps` Adam updates at a constant learning rate over
    /// shuffled mini-batches.
    pub fn train(
        &mut self,
        train: &[Sentence],
        encoder: Option<&ContextualEncoder>,
        steps: usize,
        seed: u64,
    ) -> Result<TaggerTrainReport, HeadsError> {
        let features = self.contextual_features(train, encoder)?;
        let usable: Vec<usize> = (0..train.len()).filter(|&i| !train[i].is_empty()).collect();
        if usable.is_empty() {
            return Err(HeadsError::Data("no non-empty training sentences".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = Vec::new();
        let mut state = AdamState::new();
        let adam = AdamConfig::default();
        let mut losses = Vec::with_capacity(steps);
        let bs = self.config.batch_size.max(1);
        for _ in 0..steps {
            if order.len() < bs.min(usable.len()) {
                let mut epoch = usable.clone();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            let take = bs.min(usable.len());
            let chosen: Vec<usize> = order.drain(..take).collect();
            let batch: Vec<&Sentence> = chosen.iter().map(|&i| &train[i]).collect();
            let feats: Option<Vec<&Vec<Tensor>>> = features.as_ref().map(|f| chosen.iter().map(|&i| &f[i]).collect());

            let mut graph = Graph::new();
            let bound = self.params.bind(&mut graph);
            let loss = self.loss(&mut graph, &bound, &batch, feats.as_deref())?;
            let value = graph.scalar(loss);
            if !value.is_finite() {
                return Err(NeuralError::NonFiniteLoss.into());
            }
            let grads = graph.backward(loss);
            self.params.store_grads(&graph, &bound, &grads);
            adam_step(&mut self.params, &mut state, &adam, self.config.learning_rate)?;
            losses.push(value);
        }
        self.params.zero_grads();
        let predicted = self.predict_with(train, features.as_deref())?;
        let mut correct = 0;
        let mut total = 0;
        for (gold, pred) in train.iter().zip(&predicted) {
            for (g, p) in gold.tokens.iter().zip(&pred.tokens) {
                if let Some(u) = &g.upos {
                    total += 1;
                    correct += usize::from(p.upos.as_ref() == Some(u));
                }
            }
        }
        Ok(TaggerTrainReport {
            losses,
            train_tag_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        })
    }

    /// Predicts UPOS, lemma and, with a parser, head and relation.
    pub fn predict(
        &self,
        sentences: &[Sentence],
        encoder: Option<&ContextualEncoder>,
    ) -> Result<Vec<TaggedSentence>, HeadsError> {
        let features = self.contextual_features(sentences, encoder)?;
        self.predict_with(sentences, features.as_deref())
    }

    fn predict_with(
        &self,
        sentences: &[Sentence],
        features: Option<&[Vec<Tensor>]>,
    ) -> Result<Vec<TaggedSentence>, HeadsError> {
        let mut out: Vec<Sentence> = sentences.to_vec();
        // Columns the model does not predict must not leak from the input.
        for tok in out.iter_mut().flat_map(|s| s.tokens.iter_mut()) {
            tok.upos = None;
            tok.lemma = None;
            tok.xpos = None;
            tok.ufeats = None;
            if self.arcs.is_none() {
                tok.head = None;
                tok.deprel = None;
            }
        }
        let bs = self.config.batch_size.max(1);
        let indices: Vec<usize> = (0..sentences.len()).filter(|&i| !sentences[i].is_empty()).collect();
        for chunk in indices.chunks(bs) {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &sentences[i]).collect();
            let feats: Option<Vec<&Vec<Tensor>>> = features.map(|f| chunk.iter().map(|&i| &f[i]).collect());
            let mut graph = Graph::new();
            let bound = self.params.bind_where(&mut graph, |_| false);
            let res = self.build(&mut graph, &bound, &batch, feats.as_deref())?;
            let tags = graph.value(res.tag_logits).clone();
            let lemmas = graph.value(res.lemma_logits).clone();
            for (s, &idx) in chunk.iter().enumerate() {
                let sent = &mut out[idx];
                for (t, tok) in sent.tokens.iter_mut().enumerate() {
                    let row = res.time_rows[s][t];
                    tok.upos = Some(self.vocab.tags[argmax(tags.row(row))].clone());
                    tok.lemma = Some(self.best_lemma(&tok.form, lemmas.row(row)));
                }
                if let (Some(arcs), Some(&(scores, lab_heads, lab_deps))) = (&self.arcs, res.parses.get(s)) {
                    let n = sent.len();
                    let s_val = graph.value(scores).clone();
                    let arc_rows: Vec<Vec<f64>> = (0..=n).map(|i| s_val.row(i).to_vec()).collect();
                    let mut labels = Vec::with_capacity(n + 1);
                    for h in 0..=n {
                        let rows = graph.gather(lab_heads, &vec![h; n]);
                        let ls = label_scores(&mut graph, &bound, arcs, rows, lab_deps)?;
                        let v = graph.value(ls);
                        labels.push((0..n).map(|d| v.row(d).to_vec()).collect());
                    }
                    let tree = decode_tree(&DepArcScores { arcs: arc_rows, labels }, RootConstraint::Single);
                    for (tok, (&h, &l)) in sent.tokens.iter_mut().zip(tree.heads.iter().zip(&tree.labels)) {
                        tok.head = Some(h);
                        tok.deprel = Some(self.vocab.deprels[l].clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Highest-scoring category whose script applies to `form`; the form
    /// itself when none does.
    fn best_lemma(&self, form: &str, scores: &[f64]) -> String {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .find_map(|c| apply_edit_script(form, self.vocab.inventory.get(c)?).ok())
            .unwrap_or_else(|| form.to_string())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
