#include "remedi/editor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "remedi/checkpoint.hpp"

namespace remedi {

std::string loss_form_name(LossForm form) {
  return form == LossForm::Probability ? "probability" : "log_probability";
}

LossForm loss_form_from_name(const std::string& name) {
  if (name == "probability") return LossForm::Probability;
  if (name == "log_probability") return LossForm::LogProbability;
  throw std::invalid_argument("unknown loss form: " + name);
}

Editor Editor::zero_init(int d_model, int layer, LossForm form) {
  Editor e;
  e.W = Tensor::zeros({d_model, d_model});
  e.b = Tensor::zeros({d_model});
  e.layer = layer;
  e.loss_form = form;
  return e;
}

void Editor::validate_for(const LMConfig& cfg) const {
  if (W.rank() != 2 || W.dim(0) != cfg.d_model || W.dim(1) != cfg.d_model)
    throw std::invalid_argument("editor W must be [" + std::to_string(cfg.d_model) + "x" +
                                std::to_string(cfg.d_model) + "], got " + shape_str(W.shape()));
  if (b.rank() != 1 || b.dim(0) != cfg.d_model)
    throw std::invalid_argument("editor b must be [" + std::to_string(cfg.d_model) + "]");
  if (layer < 0 || layer >= cfg.n_layers)
    throw std::invalid_argument("editor layer " + std::to_string(layer) + " out of [0, " +
                                std::to_string(cfg.n_layers) + ")");
}

uint64_t Editor::checksum() const {
  uint64_t h = fnv1a64("editor", 6);
  h = fnv1a64(W.data(), sizeof(double) * static_cast<size_t>(W.size()), h);
  h = fnv1a64(b.data(), sizeof(double) * static_cast<size_t>(b.size()), h);
  h = fnv1a64(&layer, sizeof(layer), h);
  return h;
}

void save_editor(const Editor& editor, const std::string& path) {
  nlohmann::json cfg;
  cfg["type"] = "editor";
  cfg["d_model"] = editor.W.dim(0);
  cfg["editor.layer"] = editor.layer;
  cfg["editor.loss_form"] = loss_form_name(editor.loss_form);
  Container c;
  c.config_json = cfg.dump();
  c.params.emplace("editor.W", editor.W);
  c.params.emplace("editor.b", editor.b);
  save_container(c, path);
}

Editor load_editor(const std::string& path, uint64_t) {
  Container c = load_container(path);
  nlohmann::json cfg = nlohmann::json::parse(c.config_json);
  if (cfg.value("type", "") != "editor") throw CheckpointFormatError("not an editor checkpoint: " + path);
  Editor e;
  e.layer = cfg.at("editor.layer").get<int>();
  e.loss_form = loss_form_from_name(cfg.at("editor.loss_form").get<std::string>());
  auto wit = c.params.find("editor.W");
  auto bit = c.params.find("editor.b");
  if (wit == c.params.end() || bit == c.params.end())
    throw CheckpointFormatError("editor checkpoint missing parameters");
  e.W = wit->second;
  e.b = bit->second;
  int d = cfg.at("d_model").get<int>();
  if (e.W.shape() != Shape{d, d} || e.b.shape() != Shape{d})
    throw CheckpointFormatError("editor parameter shapes inconsistent with d_model");
  return e;
}

// --- representations -------------------------------------------------------------

int entity_position(const Vocab& vocab, const std::vector<int>& tokens, const std::string& entity) {
  std::vector<std::string> words = split_words(entity);
  if (words.empty()) return -1;
  int last_tok = vocab.contains(words.back()) ? vocab.id(words.back()) : -1;
  if (last_tok < 0) return -1;
  for (int i = static_cast<int>(tokens.size()) - 1; i >= 0; --i)
    if (tokens[static_cast<size_t>(i)] == last_tok) return i;
  return -1;
}

AttributeEncoding encode_attribute(const TransformerLM& lm, const Vocab& vocab,
                                   const EditSample& sample, int layer) {
  std::vector<int> ent_toks = vocab.encode(sample.entity);
  std::vector<int> attr_toks = vocab.encode(sample.attribute);
  if (attr_toks.empty()) throw std::invalid_argument("sample " + sample.id + " has an empty attribute span");
  std::vector<int> toks = ent_toks;
  toks.insert(toks.end(), attr_toks.begin(), attr_toks.end());

  Graph g(false);
  ForwardResult fr = forward(lm, toks, {}, g, /*record_hidden=*/true);
  AttributeEncoding enc;
  enc.layer = layer;
  enc.span_begin = static_cast<int>(ent_toks.size());
  enc.span_end = static_cast<int>(toks.size());
  const Tensor& h = fr.hidden.layers[static_cast<size_t>(layer)];
  int d = h.dim(1);
  Tensor mean = Tensor::zeros({d});
  for (int i = enc.span_begin; i < enc.span_end; ++i)
    for (int c = 0; c < d; ++c) mean.mut(c) += h.at(i, c);
  for (int c = 0; c < d; ++c) mean.mut(c) /= (enc.span_end - enc.span_begin);
  enc.vector = mean;
  return enc;
}

Tensor entity_rep(const TransformerLM& lm, const Vocab& vocab, const EditSample& sample, int layer,
                  bool with_context) {
  std::string text = sample.prompt;
  if (with_context && !sample.context.empty()) text = sample.context + "\n\n" + sample.prompt;
  std::vector<int> toks = vocab.encode(text);
  int pos = entity_position(vocab, toks, sample.entity);
  if (pos < 0)
    throw std::out_of_range("entity '" + sample.entity + "' not found in prompt of " + sample.id);
  Graph g(false);
  ForwardResult fr = forward(lm, toks, {}, g, true);
  return fr.hidden.at(layer, pos);
}

Tensor apply_edit(const Editor& editor, const Tensor& h_entity, const Tensor& h_attr) {
  Graph g(false);
  return apply_edit(g, editor, h_entity, h_attr);
}

Tensor apply_edit(Graph& g, const Editor& editor, const Tensor& h_entity, const Tensor& h_attr) {
  if (h_entity.rank() != 1 || h_entity.dim(0) != editor.W.dim(0))
    throw std::invalid_argument("apply_edit: entity vector is " + shape_str(h_entity.shape()) +
                                ", editor wants [" + std::to_string(editor.W.dim(0)) + "]");
  if (h_attr.rank() != 1 || h_attr.dim(0) != editor.W.dim(1))
    throw std::invalid_argument("apply_edit: attribute vector is " + shape_str(h_attr.shape()) +
                                ", editor wants [" + std::to_string(editor.W.dim(1)) + "]");
  return add(g, h_entity, add(g, matvec(g, editor.W, h_attr), editor.b));
}

PromptState prompt_state(const TransformerLM& lm, const Vocab& vocab, const std::string& prompt_text,
                         const std::string& entity, int layer) {
  PromptState st;
  st.tokens = vocab.encode(prompt_text);
  st.entity_pos = entity_position(vocab, st.tokens, entity);
  Graph g(false);
  ForwardResult fr = forward(lm, st.tokens, {}, g, true);
  st.hidden_at_layer = fr.hidden.layers[static_cast<size_t>(layer)].clone();
  int m = static_cast<int>(st.tokens.size());
  Graph gq(false);
  if (st.entity_pos >= 0) {
    st.h_entity = fr.hidden.at(layer, st.entity_pos);
    for (int i = st.entity_pos; i <= m - 2; ++i)
      st.kl_refs.push_back(softmax(gq, row(gq, fr.logits, i), 0));
  }
  st.last_dist = softmax(gq, row(gq, fr.logits, m - 1), 0);
  return st;
}

// --- objective --------------------------------------------------------------------

namespace {

// Editor losses differentiate W and b only. The LM's parameters may still
// carry requires_grad from its own training; freeze them for the duration so
// no gradient is ever recorded against them. Values are untouched.
class ParamGradGuard {
 public:
  explicit ParamGradGuard(const TransformerLM& lm) : lm_(lm) {
    for (const auto& [name, p] : lm_.params) {
      saved_.push_back(p.impl()->requires_grad);
      p.impl()->requires_grad = false;
    }
  }
  ~ParamGradGuard() {
    size_t i = 0;
    for (const auto& [name, p] : lm_.params) p.impl()->requires_grad = saved_[i++];
  }
  ParamGradGuard(const ParamGradGuard&) = delete;
  ParamGradGuard& operator=(const ParamGradGuard&) = delete;

 private:
  const TransformerLM& lm_;
  std::vector<bool> saved_;
};

Tensor target_loss(Graph& g, const Tensor& prob, LossForm form, bool minimize) {
  // minimize=true: loss decreasing in prob (the mediated target);
  // minimize=false: loss increasing in prob (the unmediated prior).
  if (form == LossForm::Probability) return minimize ? scale(g, prob, -1.0) : prob;
  Tensor eps = Tensor::scalar(1e-12);  // keeps the log finite at saturated probabilities
  if (minimize) return scale(g, log_op(g, add(g, prob, eps)), -1.0);
  Tensor one = Tensor::scalar(1.0);
  return scale(g, log_op(g, add(g, sub(g, one, prob), eps)), -1.0);
}

int single_token_id(const Vocab& vocab, const std::string& text, const std::string& sample_id) {
  std::vector<int> toks = vocab.encode(text);
  if (toks.empty()) throw std::invalid_argument("sample " + sample_id + ": target tokenizes to nothing");
  return toks[0];
}

}  // namespace

ObjectiveValue objective_cached(const TransformerLM& lm, const Vocab& vocab, const Editor& editor,
                                const PromptState& state, const Tensor& h_attr,
                                const EditSample& sample, double lambda1, double lambda2, Graph& g,
                                bool multi_token_targets) {
  ParamGradGuard freeze(lm);
  if (lambda1 > 0.0 && !sample.target_unmediated)
    throw std::invalid_argument("sample " + sample.id +
                                " has no unmediated target but lambda1 > 0 was requested");
  if (state.entity_pos < 0)
    throw std::out_of_range("entity '" + sample.entity + "' not found in prompt of " + sample.id);

  Tensor z = apply_edit(g, editor, state.h_entity, h_attr);
  int m = static_cast<int>(state.tokens.size());

  ObjectiveValue out;
  Tensor logits;
  Tensor l_tgt;

  if (multi_token_targets) {
    // teacher-forced scoring of every target token appended to the prompt
    std::vector<int> tgt_toks = vocab.encode(sample.target_mediated);
    if (tgt_toks.empty())
      throw std::invalid_argument("sample " + sample.id + ": target tokenizes to nothing");
    std::vector<int> toks = state.tokens;
    toks.insert(toks.end(), tgt_toks.begin(), tgt_toks.end());
    Graph gfull(false);
    ForwardResult fr = forward(lm, toks, {}, gfull, true);
    Tensor spliced = row_splice(g, fr.hidden.layers[static_cast<size_t>(editor.layer)], z, state.entity_pos);
    logits = forward_from_layer(lm, editor.layer, spliced, g);
    for (size_t k = 0; k < tgt_toks.size(); ++k) {
      Tensor p = softmax(g, row(g, logits, m - 1 + static_cast<int>(k)), 0);
      Tensor eps = Tensor::scalar(1e-12);
      Tensor nll = scale(g, log_op(g, add(g, index(g, p, tgt_toks[k]), eps)), -1.0);
      l_tgt = l_tgt.defined() ? add(g, l_tgt, nll) : nll;
    }
  } else {
    Tensor spliced = row_splice(g, state.hidden_at_layer, z, state.entity_pos);
    logits = forward_from_layer(lm, editor.layer, spliced, g);
    Tensor p_last = softmax(g, row(g, logits, m - 1), 0);
    Tensor p_tgt = index(g, p_last, single_token_id(vocab, sample.target_mediated, sample.id));
    l_tgt = target_loss(g, p_tgt, editor.loss_form, /*minimize=*/true);
  }
  out.l_target = l_tgt.item();
  Tensor total = l_tgt;

  if (lambda1 > 0.0) {
    Tensor p_last = softmax(g, row(g, logits, m - 1), 0);
    Tensor p_prior = index(g, p_last, single_token_id(vocab, *sample.target_unmediated, sample.id));
    Tensor l_prior = target_loss(g, p_prior, editor.loss_form, /*minimize=*/false);
    out.l_prior = l_prior.item();
    total = add(g, total, scale(g, l_prior, lambda1));
  }
  if (lambda2 > 0.0 && !state.kl_refs.empty()) {
    Tensor kl_sum;
    for (size_t k = 0; k < state.kl_refs.size(); ++k) {
      Tensor p_i = softmax(g, row(g, logits, state.entity_pos + static_cast<int>(k)), 0);
      Tensor term = kl_div(g, p_i, state.kl_refs[k]);
      kl_sum = kl_sum.defined() ? add(g, kl_sum, term) : term;
    }
    out.l_kl = kl_sum.item();
    total = add(g, total, scale(g, kl_sum, lambda2));
  }
  out.total = total;
  return out;
}

ObjectiveValue objective(const TransformerLM& lm, const Vocab& vocab, const Editor& editor,
                         const EditSample& sample, double lambda1, double lambda2, Graph& g,
                         bool multi_token_targets) {
  editor.validate_for(lm.config);
  PromptState st = prompt_state(lm, vocab, sample.prompt, sample.entity, editor.layer);
  AttributeEncoding enc = encode_attribute(lm, vocab, sample, editor.layer);
  return objective_cached(lm, vocab, editor, st, enc.vector, sample, lambda1, lambda2, g,
                          multi_token_targets);
}

// --- training ---------------------------------------------------------------------

void EditTrainConfig::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("lambda weights must be >= 0");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (validation_fraction <= 0.0 || validation_fraction >= 1.0)
    throw std::invalid_argument("validation_fraction must be in (0, 1)");
}

EditorTrainResult train_editor(const TransformerLM& lm, const Vocab& vocab,
                               const std::vector<EditSample>& samples, const EditTrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("train_editor: empty training set");

  Editor editor = Editor::zero_init(lm.config.d_model, cfg.layer, cfg.loss_form);
  editor.validate_for(lm.config);
  editor.W.set_requires_grad(true);
  editor.b.set_requires_grad(true);

  // Per-sample unedited state never changes during training; compute it once.
  std::vector<PromptState> states;
  std::vector<Tensor> attrs;
  states.reserve(samples.size());
  for (const auto& s : samples) {
    states.push_back(prompt_state(lm, vocab, s.prompt, s.entity, cfg.layer));
    attrs.push_back(encode_attribute(lm, vocab, s, cfg.layer).vector);
  }

  Rng rng(cfg.seed ^ 0xed17ULL);
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t n_val = std::max<size_t>(1, static_cast<size_t>(std::lround(cfg.validation_fraction * samples.size())));
  if (n_val >= samples.size()) n_val = samples.size() - 1;
  std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<size_t> train_idx(order.begin() + static_cast<long>(n_val), order.end());
  if (train_idx.empty()) throw std::invalid_argument("train_editor: no samples left after validation split");

  std::map<std::string, Tensor> params;
  params.emplace("editor.W", editor.W);
  params.emplace("editor.b", editor.b);
  AdamW opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  auto mean_loss = [&](const std::vector<size_t>& idx) {
    double total = 0.0;
    for (size_t i : idx) {
      Graph g(false);
      total += objective_cached(lm, vocab, editor, states[i], attrs[i], samples[i], cfg.lambda1,
                                cfg.lambda2, g, cfg.multi_token_targets)
                   .total.item();
    }
    return total / static_cast<double>(idx.size());
  };

  EditorTrainResult res;
  Tensor best_w = editor.W.clone();
  Tensor best_b = editor.b.clone();
  double best_val = mean_loss(val_idx);
  int best_epoch = 0;  // 0 = before any update (the zero edit)
  int stale = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(train_idx);
    double train_total = 0.0;
    for (size_t b0 = 0; b0 < train_idx.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
      size_t b1 = std::min(train_idx.size(), b0 + static_cast<size_t>(cfg.batch_size));
      AdamW::zero_grads(params);
      for (size_t k = b0; k < b1; ++k) {
        size_t i = train_idx[k];
        Graph g(true);
        ObjectiveValue v = objective_cached(lm, vocab, editor, states[i], attrs[i], samples[i],
                                            cfg.lambda1, cfg.lambda2, g, cfg.multi_token_targets);
        g.backward(v.total);
        train_total += v.total.item();
      }
      opt.step(params, -1.0, 1.0 / static_cast<double>(b1 - b0));
    }
    res.train_loss.push_back(train_total / static_cast<double>(train_idx.size()));
    double val = mean_loss(val_idx);
    res.val_loss.push_back(val);
    res.epochs_run = epoch;

    if (val < best_val) {
      best_val = val;
      best_epoch = epoch;
      best_w = editor.W.clone();
      best_b = editor.b.clone();
      stale = 0;
    } else {
      ++stale;
      if (stale >= cfg.patience) break;
    }
  }

  // return the parameters from the best validation epoch
  std::copy_n(best_w.data(), best_w.size(), editor.W.data());
  std::copy_n(best_b.data(), best_b.size(), editor.b.data());
  editor.W.set_requires_grad(false);
  editor.b.set_requires_grad(false);
  res.best_epoch = best_epoch;
  res.editor = editor;
  return res;
}

// --- edited inference ----------------------------------------------------------------

Tensor edited_next_distribution(const TransformerLM& lm, const Editor& editor, const Vocab& vocab,
                                const std::string& prompt_text, const std::string& entity,
                                const Tensor& h_attr) {
  std::vector<int> toks = vocab.encode(prompt_text);
  int pos = entity_position(vocab, toks, entity);
  if (pos < 0) return next_token_distribution(lm, toks);
  Graph g(false);
  ForwardResult fr = forward(lm, toks, {}, g, true);
  Tensor h_entity = fr.hidden.at(editor.layer, pos);
  Tensor z = apply_edit(editor, h_entity, h_attr);
  return next_token_distribution(lm, toks, {{editor.layer, pos, z}});
}

EditedGeneration edited_generate(const TransformerLM& lm, const Editor& editor, const Vocab& vocab,
                                 const EditSample& sample, const GenerationParams& params,
                                 const std::string* prompt_override) {
  editor.validate_for(lm.config);
  const std::string& prompt_text = prompt_override ? *prompt_override : sample.prompt;
  std::vector<int> toks = vocab.encode(prompt_text);

  EditedGeneration out;
  out.entity_pos = entity_position(vocab, toks, sample.entity);
  out.unedited = generate(lm, toks, params);

  std::vector<Intervention> ivs;
  if (out.entity_pos >= 0) {
    Graph g(false);
    ForwardResult fr = forward(lm, toks, {}, g, true);
    Tensor h_entity = fr.hidden.at(editor.layer, out.entity_pos);
    AttributeEncoding enc = encode_attribute(lm, vocab, sample, editor.layer);
    out.z = apply_edit(editor, h_entity, enc.vector);
    ivs.push_back({editor.layer, out.entity_pos, out.z});
  }
  out.edited = generate(lm, toks, params, ivs);

  // per-step next-token distributions for both runs
  for (size_t k = 0; k < out.edited.generated.size(); ++k) {
    std::vector<int> prefix(out.edited.tokens.begin(),
                            out.edited.tokens.begin() + static_cast<long>(toks.size() + k));
    out.edited_dists.push_back(next_token_distribution(lm, prefix, ivs));
  }
  for (size_t k = 0; k < out.unedited.generated.size(); ++k) {
    std::vector<int> prefix(out.unedited.tokens.begin(),
                            out.unedited.tokens.begin() + static_cast<long>(toks.size() + k));
    out.unedited_dists.push_back(next_token_distribution(lm, prefix));
  }
  return out;
}

}  // namespace remedi
