#include "remedi/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace remedi {

std::string provenance_name(DirectionProvenance p) {
  switch (p) {
    case DirectionProvenance::Remedi: return "remedi";
    case DirectionProvenance::Identity: return "identity";
    case DirectionProvenance::FactProbe: return "fact_probe";
    case DirectionProvenance::Shortcut: return "shortcut";
  }
  return "?";
}

std::string condition_name(ProbeCondition c) {
  return c == ProbeCondition::Prior ? "prior" : "contextual";
}

AttributeDirection attr_direction(const Editor& editor, const Tensor& h_attr) {
  Tensor zero = Tensor::zeros({editor.W.dim(0)});
  AttributeDirection d;
  d.d = apply_edit(editor, zero, h_attr);
  d.provenance = DirectionProvenance::Remedi;
  d.layer = editor.layer;
  return d;
}

double belief_score(const Tensor& h_entity, const AttributeDirection& d) {
  if (h_entity.size() != d.d.size())
    throw std::invalid_argument("belief_score: entity is " + shape_str(h_entity.shape()) +
                                ", direction is " + shape_str(d.d.shape()));
  return dot(h_entity, d.d);
}

ErrorPrediction predict_error(const Tensor& h_entity, const AttributeDirection& d_attr,
                              const std::vector<AttributeDirection>& distractors) {
  if (distractors.empty()) throw std::invalid_argument("predict_error: no distractors given");
  double attr = belief_score(h_entity, d_attr);
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& d : distractors) best = std::max(best, belief_score(h_entity, d));
  ErrorPrediction out;
  out.margin = attr - best;
  out.error = best > attr;  // exact tie predicts no error
  return out;
}

// --- fact probe ----------------------------------------------------------------

double fact_probe_score(const FactProbe& probe, const Tensor& h_entity, const Tensor& h_attr) {
  Graph g(false);
  Tensor wh = matvec(g, probe.W, h_attr);
  return dot(h_entity, wh) + probe.bias;
}

FactProbe train_fact_probe_pairs(const std::vector<ProbePair>& pairs, const std::string& target_name,
                                 const FactProbeTrainConfig& cfg) {
  if (pairs.empty()) throw std::invalid_argument("fact probe: empty training set");
  bool has_pos = false, has_neg = false;
  for (const auto& p : pairs) (p.label ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg)
    throw std::invalid_argument("fact probe: training labels are degenerate (single class)");

  int d = pairs.front().h_entity.dim(0);
  FactProbe probe;
  probe.W = Tensor::zeros({d, d}, /*requires_grad=*/true);
  Tensor bias = Tensor::zeros({1}, /*requires_grad=*/true);
  probe.training_target = target_name;

  std::map<std::string, Tensor> params;
  params.emplace("probe.W", probe.W);
  params.emplace("probe.b", bias);
  AdamW opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  Rng rng(cfg.seed ^ 0xfac7ULL);
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t n_val = std::max<size_t>(1, static_cast<size_t>(std::lround(cfg.validation_fraction * pairs.size())));
  if (n_val >= pairs.size()) n_val = pairs.size() - 1;
  std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<size_t> train_idx(order.begin() + static_cast<long>(n_val), order.end());

  auto example_loss = [&](Graph& g, const ProbePair& p) {
    Tensor wh = matvec(g, probe.W, p.h_attr);
    Tensor prod = mul(g, p.h_entity, wh);
    Tensor logit = add(g, sum(g, prod), bias);
    Tensor prob = sigmoid(g, logit);
    Tensor eps = Tensor::scalar(1e-12);
    Tensor one = Tensor::scalar(1.0);
    if (p.label) return scale(g, log_op(g, add(g, prob, eps)), -1.0);
    return scale(g, log_op(g, add(g, sub(g, one, prob), eps)), -1.0);
  };

  auto mean_loss = [&](const std::vector<size_t>& idx) {
    double total = 0.0;
    for (size_t i : idx) {
      Graph g(false);
      total += example_loss(g, pairs[i]).item();
    }
    return total / static_cast<double>(idx.size());
  };

  double best_val = mean_loss(val_idx);
  Tensor best_w = probe.W.clone();
  double best_b = bias.at(0);
  int stale = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(train_idx);
    for (size_t b0 = 0; b0 < train_idx.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
      size_t b1 = std::min(train_idx.size(), b0 + static_cast<size_t>(cfg.batch_size));
      AdamW::zero_grads(params);
      for (size_t k = b0; k < b1; ++k) {
        Graph g(true);
        Tensor loss = example_loss(g, pairs[train_idx[k]]);
        g.backward(loss);
      }
      opt.step(params, -1.0, 1.0 / static_cast<double>(b1 - b0));
    }
    double val = mean_loss(val_idx);
    if (val < best_val) {
      best_val = val;
      best_w = probe.W.clone();
      best_b = bias.at(0);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  std::copy_n(best_w.data(), best_w.size(), probe.W.data());
  probe.W.set_requires_grad(false);
  probe.bias = best_b;
  return probe;
}

namespace {

AttributeEncoding encode_attribute_text(const TransformerLM& lm, const Vocab& vocab,
                                        const std::string& entity, const std::string& attribute,
                                        int layer) {
  EditSample pseudo;
  pseudo.id = "attr";
  pseudo.entity = entity;
  pseudo.attribute = attribute;
  return encode_attribute(lm, vocab, pseudo, layer);
}

}  // namespace

FactProbe train_fact_probe(const TransformerLM& lm, const Vocab& vocab,
                           const std::vector<EditSample>& samples, ProbeTarget target,
                           int entity_layer, int attr_layer, const FactProbeTrainConfig& cfg) {
  std::vector<ProbePair> pairs;
  for (const auto& s : samples) {
    if (!s.target_unmediated) continue;
    Tensor h_e = entity_rep(lm, vocab, s, entity_layer);
    std::string true_attr = prior_attribute_text(s);
    Tensor h_true = encode_attribute_text(lm, vocab, s.entity, true_attr, attr_layer).vector;
    Tensor h_counter = encode_attribute_text(lm, vocab, s.entity, s.attribute, attr_layer).vector;
    bool true_first;
    if (target == ProbeTarget::GroundTruth) {
      true_first = true;  // the unmediated object is the world's fact
    } else {
      // shortcut: label by what the model itself prefers
      Tensor dist = next_token_distribution(lm, vocab.encode(s.prompt));
      double p_true = dist.at(vocab.encode(*s.target_unmediated)[0]);
      double p_counter = dist.at(vocab.encode(s.target_mediated)[0]);
      true_first = p_true > p_counter;
    }
    pairs.push_back({h_e, h_true, true_first});
    pairs.push_back({h_e, h_counter, !true_first});
  }
  FactProbe probe = train_fact_probe_pairs(
      pairs, target == ProbeTarget::GroundTruth ? "ground_truth" : "model_prediction", cfg);
  probe.entity_layer = entity_layer;
  probe.attr_layer = attr_layer;
  return probe;
}

// --- scoring -------------------------------------------------------------------

double f1_score(int tp, int fp, int fn) {
  int denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * tp / denom;
}

double phi_coefficient(int tp, int fp, int tn, int fn) {
  double a = static_cast<double>(tp) + fp;
  double b = static_cast<double>(tp) + fn;
  double c = static_cast<double>(tn) + fp;
  double d = static_cast<double>(tn) + fn;
  if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) return 0.0;
  double num = static_cast<double>(tp) * tn - static_cast<double>(fp) * fn;
  return num / std::sqrt(a * b * c * d);
}

ProbeReport score_predictions(const std::vector<bool>& predicted, const std::vector<bool>& actual) {
  if (predicted.size() != actual.size())
    throw std::invalid_argument("score_predictions: size mismatch");
  ProbeReport r;
  for (size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] && actual[i]) ++r.tp;
    else if (predicted[i] && !actual[i]) ++r.fp;
    else if (!predicted[i] && actual[i]) ++r.fn;
    else ++r.tn;
  }
  r.predicted = predicted;
  r.actual = actual;
  r.f1 = f1_score(r.tp, r.fp, r.fn);
  r.phi = phi_coefficient(r.tp, r.fp, r.tn, r.fn);
  return r;
}

std::string contextual_prompt(const EditSample& sample) {
  // the new information stated as a plain sentence, then the query
  return sample.prompt + " " + sample.target_mediated + "\n" + sample.prompt;
}

BehaviorLabel model_behavior(const TransformerLM& lm, const Vocab& vocab, const EditSample& sample,
                             ProbeCondition condition) {
  if (!sample.target_unmediated)
    throw std::invalid_argument("sample " + sample.id + " lacks behavior targets");
  BehaviorLabel out;
  if (condition == ProbeCondition::Prior) {
    Tensor dist = next_token_distribution(lm, vocab.encode(sample.prompt));
    out.p_true = dist.at(vocab.encode(*sample.target_unmediated)[0]);
    out.p_alt = dist.at(vocab.encode(sample.target_mediated)[0]);
    out.error = !(out.p_true > out.p_alt);  // fails to rank the true object first
  } else {
    Tensor dist = next_token_distribution(lm, vocab.encode(contextual_prompt(sample)));
    out.p_true = dist.at(vocab.encode(sample.target_mediated)[0]);
    out.p_alt = dist.at(vocab.encode(*sample.target_unmediated)[0]);
    out.error = !(out.p_true > out.p_alt);  // ignores the context
  }
  return out;
}

// --- evaluation ------------------------------------------------------------------

namespace {

struct DirectionPair {
  Tensor attr_enc;                 // encoding used for the attribute direction
  Tensor dist_enc;                 // primary distractor encoding
  std::vector<Tensor> extra_dist;  // optional additional distractors
};

// Which attribute plays "claimed" vs "distractor" depends on the condition.
std::pair<std::string, std::string> condition_attributes(const EditSample& s, ProbeCondition c) {
  std::string prior_attr = prior_attribute_text(s);
  if (c == ProbeCondition::Prior) return {prior_attr, s.attribute};
  return {s.attribute, prior_attr};
}

Tensor probe_entity_rep(const TransformerLM& lm, const Vocab& vocab, const EditSample& s,
                        ProbeCondition c, int layer) {
  std::string text = c == ProbeCondition::Prior ? s.prompt : contextual_prompt(s);
  std::vector<int> toks = vocab.encode(text);
  int pos = entity_position(vocab, toks, s.entity);
  if (pos < 0) throw std::out_of_range("entity not found for probing: " + s.id);
  Graph g(false);
  ForwardResult fr = forward(lm, toks, {}, g, true);
  return fr.hidden.at(layer, pos);
}

std::vector<std::string> extra_distractor_attrs(const SyntheticWorld& world, const EditSample& s,
                                                int k, Rng& rng) {
  std::vector<std::string> out;
  auto ws = split_words(s.attribute);
  if (ws.size() < 2) return out;
  const std::string& rel_name = ws[0];
  for (const auto& rel : world.relations) {
    if (rel.name != rel_name) continue;
    std::vector<std::string> pool;
    for (const auto& cand : rel.candidates)
      if (cand != s.target_mediated && (!s.target_unmediated || cand != *s.target_unmediated))
        pool.push_back(cand);
    rng.shuffle(pool);
    for (int i = 0; i < k - 1 && i < static_cast<int>(pool.size()); ++i)
      out.push_back(rel_name + " " + pool[static_cast<size_t>(i)]);
  }
  return out;
}

struct MethodScorer {
  // Returns (attr_score, distractor_scores) for one sample.
  ProbeMethod method;
  const Editor* editor = nullptr;
  const FactProbe* probe = nullptr;
  int entity_layer = 0;

  ErrorPrediction predict(const TransformerLM& lm, const Vocab& vocab, const EditSample& s,
                          ProbeCondition cond, const std::vector<std::string>& extra_attrs) const {
    auto [attr_text, dist_text] = condition_attributes(s, cond);
    Tensor h_e = probe_entity_rep(lm, vocab, s, cond, entity_layer);

    auto direction = [&](const std::string& text) {
      AttributeDirection d;
      d.layer = entity_layer;
      switch (method) {
        case ProbeMethod::Remedi: {
          Tensor enc = encode_attribute_text(lm, vocab, s.entity, text, editor->layer).vector;
          d = attr_direction(*editor, enc);
          break;
        }
        case ProbeMethod::Identity: {
          d.d = encode_attribute_text(lm, vocab, s.entity, text, entity_layer).vector;
          d.provenance = DirectionProvenance::Identity;
          break;
        }
        case ProbeMethod::FactProbe:
        case ProbeMethod::Shortcut: {
          Tensor enc = encode_attribute_text(lm, vocab, s.entity, text, probe->attr_layer).vector;
          Graph g(false);
          d.d = matvec(g, probe->W, enc);
          d.provenance = method == ProbeMethod::FactProbe ? DirectionProvenance::FactProbe
                                                          : DirectionProvenance::Shortcut;
          break;
        }
      }
      return d;
    };

    AttributeDirection d_attr = direction(attr_text);
    std::vector<AttributeDirection> distractors = {direction(dist_text)};
    for (const auto& t : extra_attrs) distractors.push_back(direction(t));
    return predict_error(h_e, d_attr, distractors);
  }
};

int sweep_entity_layer(const TransformerLM& lm, const Vocab& vocab, MethodScorer scorer,
                       const std::vector<EditSample>& val_samples, ProbeCondition cond) {
  int best_layer = 0;
  double best_f1 = -1.0;
  for (int layer = 0; layer <= lm.config.n_layers; ++layer) {
    scorer.entity_layer = layer;
    std::vector<bool> pred, act;
    for (const auto& s : val_samples) {
      pred.push_back(scorer.predict(lm, vocab, s, cond, {}).error);
      act.push_back(model_behavior(lm, vocab, s, cond).error);
    }
    double f1 = score_predictions(pred, act).f1;
    if (f1 > best_f1 + 1e-12) {
      best_f1 = f1;
      best_layer = layer;
    }
  }
  return best_layer;
}

}  // namespace

ProbeReport evaluate_probe(const TransformerLM& lm, const Vocab& vocab, const Editor& editor,
                           ProbeMethod method, const std::vector<EditSample>& train_samples,
                           const std::vector<EditSample>& eval_samples, ProbeCondition condition,
                           const ProbeEvalConfig& cfg) {
  if (eval_samples.empty()) throw std::invalid_argument("evaluate_probe: no evaluation samples");
  if (cfg.k_distractors > 1 && cfg.world == nullptr)
    throw std::invalid_argument("evaluate_probe: k_distractors > 1 needs the world");

  MethodScorer scorer;
  scorer.method = method;
  scorer.editor = &editor;
  FactProbe probe;
  if (method == ProbeMethod::FactProbe || method == ProbeMethod::Shortcut) {
    FactProbeTrainConfig pc;
    pc.seed = cfg.seed;
    probe = train_fact_probe(lm, vocab, train_samples,
                             method == ProbeMethod::FactProbe ? ProbeTarget::GroundTruth
                                                              : ProbeTarget::ModelPrediction,
                             editor.layer, editor.layer, pc);
    scorer.probe = &probe;
  }

  int layer = cfg.entity_layer;
  if (layer < 0) {
    // pick the representation layer on (a slice of) the train split
    std::vector<EditSample> val(train_samples.begin(),
                                train_samples.begin() + std::min<size_t>(train_samples.size(), 64));
    layer = sweep_entity_layer(lm, vocab, scorer, val, condition);
  }
  scorer.entity_layer = layer;

  Rng rng(cfg.seed ^ 0xd157ULL);
  std::vector<bool> pred, act;
  std::vector<std::string> ids;
  for (const auto& s : eval_samples) {
    std::vector<std::string> extras;
    if (cfg.k_distractors > 1)
      extras = extra_distractor_attrs(*cfg.world, s, cfg.k_distractors, rng);
    pred.push_back(scorer.predict(lm, vocab, s, condition, extras).error);
    act.push_back(model_behavior(lm, vocab, s, condition).error);
    ids.push_back(s.id);
  }
  ProbeReport report = score_predictions(pred, act);
  report.method = provenance_name(method == ProbeMethod::Remedi      ? DirectionProvenance::Remedi
                                  : method == ProbeMethod::Identity  ? DirectionProvenance::Identity
                                  : method == ProbeMethod::FactProbe ? DirectionProvenance::FactProbe
                                                                     : DirectionProvenance::Shortcut);
  report.condition = condition_name(condition);
  report.entity_layer = layer;
  report.seed = cfg.seed;
  report.sample_ids = std::move(ids);
  return report;
}

RandomModelControl random_model_control(const TransformerLM& trained_lm, const Vocab& vocab,
                                        const std::vector<EditSample>& train_samples,
                                        const std::vector<EditSample>& eval_samples,
                                        const EditTrainConfig& editor_cfg, ProbeCondition condition,
                                        const ProbeEvalConfig& cfg) {
  LMConfig control_cfg = trained_lm.config;
  control_cfg.seed = trained_lm.config.seed ^ 0xc0417011ULL;
  TransformerLM control = TransformerLM::init(control_cfg);

  RandomModelControl out;
  out.control_checksum = control.param_checksum();
  out.trained_checksum = trained_lm.param_checksum();

  EditorTrainResult tr = train_editor(control, vocab, train_samples, editor_cfg);
  ProbeEvalConfig pec = cfg;
  out.report = evaluate_probe(control, vocab, tr.editor, ProbeMethod::Remedi, train_samples,
                              eval_samples, condition, pec);
  out.report.method = "random_model_control";
  out.report.control = true;
  return out;
}

SkylineResult train_supervised_skyline(const TransformerLM& lm, const Vocab& vocab,
                                       const std::vector<EditSample>& train_samples,
                                       const std::vector<EditSample>& eval_samples,
                                       ProbeCondition condition, const ProbeEvalConfig& cfg) {
  if (train_samples.empty() || eval_samples.empty())
    throw std::invalid_argument("skyline: empty split");
  std::set<std::string> train_ids;
  for (const auto& s : train_samples) train_ids.insert(s.id);
  for (const auto& s : eval_samples)
    if (train_ids.count(s.id))
      throw std::invalid_argument("skyline: sample " + s.id + " appears in both splits");

  int layer = cfg.entity_layer >= 0 ? cfg.entity_layer : lm.config.n_layers;
  int d = lm.config.d_model;

  std::vector<Tensor> feats;
  std::vector<bool> labels;
  bool has_pos = false, has_neg = false;
  for (const auto& s : train_samples) {
    feats.push_back(probe_entity_rep(lm, vocab, s, condition, layer));
    bool err = model_behavior(lm, vocab, s, condition).error;
    labels.push_back(err);
    (err ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg)
    throw std::invalid_argument("skyline: behavior labels are degenerate (single class)");

  SupervisedSkyline cls;
  cls.entity_layer = layer;
  cls.w = Tensor::zeros({d}, /*requires_grad=*/true);
  Tensor bias = Tensor::zeros({1}, /*requires_grad=*/true);
  std::map<std::string, Tensor> params;
  params.emplace("skyline.w", cls.w);
  params.emplace("skyline.b", bias);
  AdamW opt;
  opt.learning_rate = 1e-2;
  opt.weight_decay = 1e-4;

  Rng rng(cfg.seed ^ 0x5e71eULL);
  std::vector<size_t> order(feats.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < 60; ++epoch) {
    rng.shuffle(order);
    for (size_t b0 = 0; b0 < order.size(); b0 += 16) {
      size_t b1 = std::min(order.size(), b0 + 16);
      AdamW::zero_grads(params);
      for (size_t k = b0; k < b1; ++k) {
        size_t i = order[k];
        Graph g(true);
        Tensor logit = add(g, sum(g, mul(g, cls.w, feats[i])), bias);
        Tensor prob = sigmoid(g, logit);
        Tensor eps = Tensor::scalar(1e-12);
        Tensor one = Tensor::scalar(1.0);
        Tensor loss = labels[i] ? scale(g, log_op(g, add(g, prob, eps)), -1.0)
                                : scale(g, log_op(g, add(g, sub(g, one, prob), eps)), -1.0);
        g.backward(loss);
      }
      opt.step(params, -1.0, 1.0 / static_cast<double>(b1 - b0));
    }
  }
  cls.w.set_requires_grad(false);
  cls.bias = bias.at(0);

  std::vector<bool> pred, act;
  std::vector<std::string> ids;
  for (const auto& s : eval_samples) {
    Tensor h = probe_entity_rep(lm, vocab, s, condition, layer);
    pred.push_back(dot(cls.w, h) + cls.bias > 0.0);
    act.push_back(model_behavior(lm, vocab, s, condition).error);
    ids.push_back(s.id);
  }
  SkylineResult out;
  out.classifier = cls;
  out.report = score_predictions(pred, act);
  out.report.method = "supervised_skyline (not directly comparable)";
  out.report.condition = condition_name(condition);
  out.report.entity_layer = layer;
  out.report.seed = cfg.seed;
  out.report.sample_ids = std::move(ids);
  return out;
}

}  // namespace remedi
