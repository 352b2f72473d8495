#include "remedi/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace remedi {

std::string method_name(EditMethod m) {
  switch (m) {
    case EditMethod::LmOnly: return "lm_only";
    case EditMethod::Prefix: return "prefix";
    case EditMethod::Replace: return "replace";
    case EditMethod::Remedi: return "remedi";
  }
  return "?";
}

EditMethod method_from_name(const std::string& name) {
  if (name == "lm_only") return EditMethod::LmOnly;
  if (name == "prefix") return EditMethod::Prefix;
  if (name == "replace") return EditMethod::Replace;
  if (name == "remedi") return EditMethod::Remedi;
  throw std::invalid_argument("unknown method: " + name);
}

// --- text statistics -----------------------------------------------------------

TfIdf TfIdf::fit(const std::vector<std::vector<std::string>>& docs) {
  TfIdf t;
  t.n_docs = static_cast<int>(docs.size());
  std::map<std::string, int> df;
  for (const auto& doc : docs) {
    std::set<std::string> seen(doc.begin(), doc.end());
    for (const auto& w : seen) ++df[w];
  }
  for (const auto& [w, n] : df)
    t.idf[w] = std::log((1.0 + t.n_docs) / (1.0 + n)) + 1.0;
  return t;
}

std::map<std::string, double> TfIdf::vectorize(const std::vector<std::string>& doc) const {
  std::map<std::string, double> counts;
  for (const auto& w : doc) counts[w] += 1.0;
  std::map<std::string, double> vec;
  for (const auto& [w, c] : counts) {
    auto it = idf.find(w);
    double weight = it != idf.end() ? it->second : std::log(1.0 + n_docs) + 1.0;  // df = 0
    vec[w] = c * weight;
  }
  return vec;
}

double TfIdf::cosine(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [w, v] : a) {
    na += v * v;
    auto it = b.find(w);
    if (it != b.end()) num += v * it->second;
  }
  for (const auto& [w, v] : b) nb += v * v;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return num / (std::sqrt(na) * std::sqrt(nb));
}

double tfidf_cosine(const std::vector<std::string>& a, const std::vector<std::string>& b,
                    const std::vector<std::vector<std::string>>& corpus) {
  TfIdf t = TfIdf::fit(corpus);
  return TfIdf::cosine(t.vectorize(a), t.vectorize(b));
}

namespace {

double empirical_entropy(const std::map<std::string, int>& counts, int total) {
  if (total <= 0) return 0.0;
  double h = 0.0;
  for (const auto& [k, c] : counts) {
    double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

double ngram_entropy_score(const std::vector<std::string>& tokens) {
  if (tokens.size() < 3) throw std::invalid_argument("ngram_entropy_score: need at least 3 tokens");
  std::map<std::string, int> bi, tri;
  for (size_t i = 0; i + 1 < tokens.size(); ++i) ++bi[tokens[i] + "\x1f" + tokens[i + 1]];
  for (size_t i = 0; i + 2 < tokens.size(); ++i)
    ++tri[tokens[i] + "\x1f" + tokens[i + 1] + "\x1f" + tokens[i + 2]];
  double h2 = empirical_entropy(bi, static_cast<int>(tokens.size()) - 1);
  double h3 = empirical_entropy(tri, static_cast<int>(tokens.size()) - 2);
  return 100.0 * 0.5 * (h2 + h3);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("pearson: need two equal-length series of >= 2 points");
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// --- method plumbing --------------------------------------------------------------

namespace {

// A same-attribute substitute entity for the find-and-replace baseline.
std::string replacement_entity(const SyntheticWorld& world, const EditSample& sample) {
  auto ws = split_words(sample.attribute);
  if (ws.size() < 2) throw std::invalid_argument("replace baseline: attribute has no relation/object");
  int rel = world.relation_id(ws[0]);
  const Relation& r = world.relations[static_cast<size_t>(rel)];
  int tgt_idx = -1;
  for (size_t i = 0; i < r.candidates.size(); ++i)
    if (r.candidates[i] == sample.target_mediated) tgt_idx = static_cast<int>(i);
  if (tgt_idx < 0) throw std::invalid_argument("replace baseline: target not a candidate");
  for (const auto& ent : world.entities) {
    if (ent.name == sample.entity) continue;
    auto it = ent.facts.find(rel);
    if (it != ent.facts.end() && it->second == tgt_idx) return ent.name;
  }
  throw std::invalid_argument("replace baseline: no entity shares attribute of " + sample.id);
}

std::string swap_entity(const std::string& text, const std::string& from, const std::string& to) {
  std::vector<std::string> ws = split_words(text);
  std::string out;
  for (size_t i = 0; i < ws.size(); ++i) {
    const std::string& w = ws[i] == from ? to : ws[i];
    if (i) out += ws[i] == "\n" || ws[i - 1] == "\n" ? "" : " ";
    if (ws[i] == "\n")
      out += "\n";
    else
      out += w;
  }
  return out;
}

bool mentions_entity(const Vocab& vocab, const std::string& text, const std::string& entity) {
  return entity_position(vocab, vocab.encode(text), entity) >= 0;
}

}  // namespace

MethodRun method_prompt(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                        const SyntheticWorld* world, const EditSample& sample, EditMethod method,
                        const std::string& prompt_text, const Tensor* h_attr_cache) {
  MethodRun run;
  run.prompt = prompt_text;
  if (!mentions_entity(vocab, prompt_text, sample.entity)) return run;  // untouched

  switch (method) {
    case EditMethod::LmOnly:
      break;
    case EditMethod::Prefix:
      // state the new fact, then the prompt
      run.prompt = sample.prompt + " " + sample.target_mediated + "\n" + prompt_text;
      break;
    case EditMethod::Replace: {
      if (!world) throw std::invalid_argument("replace baseline needs the world");
      run.prompt = swap_entity(prompt_text, sample.entity, replacement_entity(*world, sample));
      break;
    }
    case EditMethod::Remedi: {
      if (!editor) throw std::invalid_argument("remedi method needs an editor");
      std::vector<int> toks = vocab.encode(prompt_text);
      run.entity_pos = entity_position(vocab, toks, sample.entity);
      Graph g(false);
      ForwardResult fr = forward(lm, toks, {}, g, true);
      Tensor h_entity = fr.hidden.at(editor->layer, run.entity_pos);
      Tensor h_attr = h_attr_cache ? *h_attr_cache
                                   : encode_attribute(lm, vocab, sample, editor->layer).vector;
      run.z = apply_edit(*editor, h_entity, h_attr);
      run.intervene = true;
      break;
    }
  }
  return run;
}

// --- efficacy / neighborhood --------------------------------------------------------

namespace {

Tensor run_distribution(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                        const MethodRun& run) {
  std::vector<int> toks = vocab.encode(run.prompt);
  if (!run.intervene) return next_token_distribution(lm, toks);
  return next_token_distribution(lm, toks, {{editor->layer, run.entity_pos, run.z}});
}

GenerationResult run_generate(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                              const MethodRun& run, const GenerationParams& params) {
  std::vector<int> toks = vocab.encode(run.prompt);
  std::vector<Intervention> ivs;
  if (run.intervene) ivs.push_back({editor->layer, run.entity_pos, run.z});
  return generate(lm, toks, params, ivs);
}

}  // namespace

double efficacy(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                const SyntheticWorld* world, const std::vector<EditSample>& samples,
                EditMethod method, std::vector<SampleRow>* rows) {
  double total = 0.0;
  int n = 0;
  for (const auto& s : samples) {
    if (s.paraphrase_prompts.empty())
      throw std::invalid_argument("efficacy: sample " + s.id + " has no paraphrase prompts");
    if (!s.target_unmediated)
      throw std::invalid_argument("efficacy: sample " + s.id + " has no unmediated target");
    Tensor h_attr;
    if (method == EditMethod::Remedi)
      h_attr = encode_attribute(lm, vocab, s, editor->layer).vector;
    int tgt = vocab.encode(s.target_mediated)[0];
    int prior = vocab.encode(*s.target_unmediated)[0];
    double hits = 0.0;
    for (const auto& pp : s.paraphrase_prompts) {
      MethodRun run = method_prompt(lm, editor, vocab, world, s, method, pp,
                                    method == EditMethod::Remedi ? &h_attr : nullptr);
      Tensor dist = run_distribution(lm, editor, vocab, run);
      hits += dist.at(tgt) > dist.at(prior) ? 1.0 : 0.0;
    }
    double sample_eff = hits / static_cast<double>(s.paraphrase_prompts.size());
    if (rows) {
      if (rows->size() <= static_cast<size_t>(n)) rows->resize(static_cast<size_t>(n) + 1);
      (*rows)[static_cast<size_t>(n)].id = s.id;
      (*rows)[static_cast<size_t>(n)].efficacy = sample_eff;
    }
    total += sample_eff;
    ++n;
  }
  return n ? total / n : 0.0;
}

double neighborhood(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                    const SyntheticWorld* world, const std::vector<EditSample>& samples,
                    EditMethod method, std::vector<SampleRow>* rows) {
  double total = 0.0;
  int n = 0;
  for (const auto& s : samples) {
    double preserved = 1.0;
    if (!s.neighborhood_prompts.empty()) {
      int same = 0;
      for (const auto& np : s.neighborhood_prompts) {
        Tensor base = next_token_distribution(lm, vocab.encode(np));
        MethodRun run = method_prompt(lm, editor, vocab, world, s, method, np);
        Tensor dist = run_distribution(lm, editor, vocab, run);
        if (method == EditMethod::Remedi && !bitwise_equal(base, dist))
          throw std::logic_error("neighborhood: edited run touched an other-entity prompt");
        same += argmax(dist) == argmax(base) ? 1 : 0;
      }
      preserved = static_cast<double>(same) / static_cast<double>(s.neighborhood_prompts.size());
    }
    if (rows && static_cast<size_t>(n) < rows->size()) (*rows)[static_cast<size_t>(n)].neighborhood = preserved;
    total += preserved;
    ++n;
  }
  return n ? total / n : 0.0;
}

// --- full editing evaluation ----------------------------------------------------------

EditReport evaluate_editing(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                            const SyntheticWorld& world, const std::vector<EditSample>& samples,
                            const EvalConfig& cfg) {
  EditReport report;
  report.method = method_name(cfg.method);
  report.task = "counterfact";
  report.seed = cfg.seed;
  report.rows.resize(samples.size());

  std::set<std::string> seen_attrs(cfg.train_attributes.begin(), cfg.train_attributes.end());

  efficacy(lm, editor, vocab, &world, samples, cfg.method, &report.rows);
  neighborhood(lm, editor, vocab, &world, samples, cfg.method, &report.rows);

  GenerationParams gp;
  gp.max_new_tokens = cfg.max_new_tokens;
  gp.strategy = GenerationParams::Strategy::Greedy;

  // generations for consistency + reference docs, then a shared idf corpus
  std::vector<std::vector<std::string>> gen_docs(samples.size());
  std::vector<std::vector<std::string>> ref_docs(samples.size());
  std::vector<std::vector<std::string>> essence_pre(samples.size()), essence_post(samples.size());

  for (size_t i = 0; i < samples.size(); ++i) {
    const EditSample& s = samples[i];
    report.rows[i].id = s.id;
    report.rows[i].attribute_seen = seen_attrs.count(s.attribute) > 0;
    {
      Tensor dist = next_token_distribution(lm, vocab.encode(s.prompt));
      double p_true = dist.at(vocab.encode(*s.target_unmediated)[0]);
      double p_alt = dist.at(vocab.encode(s.target_mediated)[0]);
      report.rows[i].model_knows = p_true > p_alt;
    }

    Tensor h_attr;
    if (cfg.method == EditMethod::Remedi && editor)
      h_attr = encode_attribute(lm, vocab, s, editor->layer).vector;

    // consistency generation from the first paraphrase prompt
    MethodRun run = method_prompt(lm, editor, vocab, &world, s, cfg.method, s.paraphrase_prompts[0],
                                  h_attr.defined() ? &h_attr : nullptr);
    GenerationResult gen = run_generate(lm, editor, vocab, run, gp);
    for (int tok : gen.generated) gen_docs[i].push_back(vocab.token(tok));

    // references: template sentences about other entities with the target attribute
    auto ws = split_words(s.attribute);
    int rel = world.relation_id(ws[0]);
    int count = 0;
    for (const auto& ent : world.entities) {
      if (count >= 5) break;
      if (ent.name == s.entity) continue;
      auto it = ent.facts.find(rel);
      if (it == ent.facts.end()) continue;
      if (world.relations[static_cast<size_t>(rel)].candidates[static_cast<size_t>(it->second)] !=
          s.target_mediated)
        continue;
      std::string sent = ent.name + " " + ws[0] + " " + s.target_mediated;
      for (const auto& w : split_words(sent)) ref_docs[i].push_back(w);
      ++count;
    }

    // essence: fixed "<entity> is" prompt, pre vs post
    std::string essence_prompt = s.entity + " is";
    GenerationParams ep = gp;
    ep.max_new_tokens = cfg.max_new_tokens;
    GenerationResult pre = generate(lm, vocab.encode(essence_prompt), ep);
    MethodRun erun = method_prompt(lm, editor, vocab, &world, s, cfg.method, essence_prompt,
                                   h_attr.defined() ? &h_attr : nullptr);
    GenerationResult post = run_generate(lm, editor, vocab, erun, ep);
    for (int tok : pre.generated) essence_pre[i].push_back(vocab.token(tok));
    for (int tok : post.generated) essence_post[i].push_back(vocab.token(tok));
  }

  // one idf corpus per metric, over the union of its documents
  std::vector<std::vector<std::string>> consistency_corpus;
  for (const auto& d : gen_docs) consistency_corpus.push_back(d);
  for (const auto& d : ref_docs) consistency_corpus.push_back(d);
  TfIdf cons_idf = TfIdf::fit(consistency_corpus);

  std::vector<std::vector<std::string>> essence_corpus;
  for (const auto& d : essence_pre) essence_corpus.push_back(d);
  for (const auto& d : essence_post) essence_corpus.push_back(d);
  TfIdf ess_idf = TfIdf::fit(essence_corpus);

  for (size_t i = 0; i < samples.size(); ++i) {
    if (ref_docs[i].empty())
      throw std::invalid_argument("consistency: no references for " + samples[i].id);
    if (gen_docs[i].empty()) {
      report.warnings.push_back("empty generation for " + samples[i].id + "; consistency scored 0");
      report.rows[i].consistency = 0.0;
    } else {
      report.rows[i].consistency =
          TfIdf::cosine(cons_idf.vectorize(gen_docs[i]), cons_idf.vectorize(ref_docs[i]));
    }
    if (gen_docs[i].size() >= 3) {
      report.rows[i].fluency = ngram_entropy_score(gen_docs[i]);
    } else {
      report.warnings.push_back("generation for " + samples[i].id + " shorter than 3 tokens; fluency skipped");
    }
    report.rows[i].essence =
        TfIdf::cosine(ess_idf.vectorize(essence_pre[i]), ess_idf.vectorize(essence_post[i]));
  }

  auto mean_of = [&](auto getter) {
    double total = 0.0;
    int n = 0;
    for (const auto& r : report.rows) {
      auto v = getter(r);
      if (v) {
        total += *v;
        ++n;
      }
    }
    return n ? total / n : 0.0;
  };
  report.efficacy = mean_of([](const SampleRow& r) { return r.efficacy; });
  report.neighborhood = mean_of([](const SampleRow& r) { return r.neighborhood; });
  report.consistency = mean_of([](const SampleRow& r) { return r.consistency; });
  report.fluency = mean_of([](const SampleRow& r) { return r.fluency; });
  report.essence = mean_of([](const SampleRow& r) { return r.essence; });
  return report;
}

// --- occupation patching ----------------------------------------------------------

OccupationReport occupation_accuracy(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                                     const std::vector<EditSample>& samples,
                                     const std::vector<std::string>& candidates, EditMethod method,
                                     bool in_context, int fluency_new_tokens) {
  if (candidates.empty()) throw std::invalid_argument("occupation_accuracy: empty candidate list");
  std::vector<int> cand_ids;
  for (const auto& c : candidates) {
    if (!vocab.contains(c)) throw std::out_of_range("occupation candidate '" + c + "' not in vocabulary");
    cand_ids.push_back(vocab.id(c));
  }

  if (method != EditMethod::LmOnly && method != EditMethod::Remedi)
    throw std::invalid_argument("occupation_accuracy: only lm_only and remedi are defined");
  OccupationReport rep;
  rep.method = method_name(method);
  rep.in_context = in_context;
  double fluency_total = 0.0;
  int fluency_n = 0;

  GenerationParams gp;
  gp.max_new_tokens = fluency_new_tokens;

  for (const auto& s : samples) {
    std::string prompt = in_context && !s.context.empty() ? s.context + "\n\n" + s.prompt : s.prompt;
    Tensor h_attr;
    MethodRun run;
    if (method == EditMethod::Remedi) {
      h_attr = encode_attribute(lm, vocab, s, editor->layer).vector;
      run = method_prompt(lm, editor, vocab, nullptr, s, method, prompt, &h_attr);
    } else {
      run.prompt = prompt;  // occupation task: lm_only keeps the prompt as is
    }
    Tensor dist = run_distribution(lm, editor, vocab, run);

    // rank candidates; exact ties break lexicographically
    int best = 0;
    for (size_t c = 1; c < cand_ids.size(); ++c) {
      double pc = dist.at(cand_ids[c]);
      double pb = dist.at(cand_ids[static_cast<size_t>(best)]);
      if (pc > pb || (pc == pb && candidates[c] < candidates[static_cast<size_t>(best)]))
        best = static_cast<int>(c);
    }
    if (candidates[static_cast<size_t>(best)] == s.target_mediated) rep.accuracy += 1.0;

    if (fluency_new_tokens > 0) {
      GenerationResult gen = run_generate(lm, editor, vocab, run, gp);
      if (gen.generated.size() >= 3) {
        std::vector<std::string> toks;
        for (int t : gen.generated) toks.push_back(vocab.token(t));
        fluency_total += ngram_entropy_score(toks);
        ++fluency_n;
      }
    }
    ++rep.n;
  }
  rep.accuracy = rep.n ? rep.accuracy / rep.n : 0.0;
  rep.fluency = fluency_n ? fluency_total / fluency_n : 0.0;
  return rep;
}

// --- concept edits ------------------------------------------------------------------

ConceptEditReport delta_plm(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                            const std::vector<ConceptEditSample>& samples, EditMethod method) {
  if (method == EditMethod::Replace)
    throw std::invalid_argument("delta_plm: replace baseline is not defined for concepts");
  ConceptEditReport rep;
  rep.method = method_name(method);

  struct ClassAcc {
    std::vector<double> deltas;
    std::vector<double> post_p, p_h;
  };
  ClassAcc corr, orig, rnd;

  auto feature_probability = [&](const std::string& concept_name, const std::string& feature,
                                 const std::string& target_word, bool edited,
                                 const ConceptEditSample& s, const Tensor* h_attr) {
    FeaturePrompt fp;
    if (target_word.empty()) {
      fp = feature_prompt(concept_name, feature);
    } else {
      fp.target_word = target_word;
      std::vector<std::string> ws = split_words(feature);
      size_t cut = 0;
      while (cut < ws.size() && ws[cut] != target_word) ++cut;
      if (cut == ws.size())
        throw std::invalid_argument("delta_plm: target word '" + target_word +
                                    "' not part of feature '" + feature + "'");
      fp.prompt = concept_name;
      for (size_t i = 0; i < cut; ++i) fp.prompt += " " + ws[i];
    }
    if (!vocab.contains(fp.target_word))
      throw std::invalid_argument("delta_plm: target word '" + fp.target_word + "' not in vocabulary");
    std::string prompt = fp.prompt;
    std::vector<Intervention> ivs;
    if (edited && method == EditMethod::Prefix) {
      prompt = s.concept_name + " " + s.feature_star + "\n" + prompt;
    }
    std::vector<int> toks = vocab.encode(prompt);
    if (edited && method == EditMethod::Remedi) {
      int pos = entity_position(vocab, toks, s.concept_name);
      Graph g(false);
      ForwardResult fr = forward(lm, toks, {}, g, true);
      Tensor h_entity = fr.hidden.at(editor->layer, pos);
      Tensor z = apply_edit(*editor, h_entity, *h_attr);
      ivs.push_back({editor->layer, pos, z});
    }
    Tensor dist = next_token_distribution(lm, toks, ivs);
    return dist.at(vocab.id(fp.target_word));
  };

  for (const auto& s : samples) {
    Tensor h_attr;
    if (method == EditMethod::Remedi) {
      EditSample pseudo;
      pseudo.id = s.id;
      pseudo.entity = s.concept_name;
      pseudo.attribute = s.feature_star;
      h_attr = encode_attribute(lm, vocab, pseudo, editor->layer).vector;
    }
    double sample_corr = 0.0, sample_rnd = 0.0;
    int n_corr = 0, n_rnd = 0;
    auto eval_class = [&](const std::string& feature, const std::string& target_word, double p_h,
                          ClassAcc& acc, double* sample_sum, int* sample_n) {
      double p0 = feature_probability(s.concept_name, feature, target_word, false, s, nullptr);
      double p1 = feature_probability(s.concept_name, feature, target_word,
                                      method != EditMethod::LmOnly, s, &h_attr);
      double delta = 100.0 * (p1 - p0);
      acc.deltas.push_back(delta);
      acc.post_p.push_back(p1);
      if (p_h >= 0.0) acc.p_h.push_back(p_h);
      if (sample_sum) {
        *sample_sum += delta;
        ++*sample_n;
      }
    };
    for (const auto& f : s.correlated)
      eval_class(f.feature, f.target_word, f.p_h, corr, &sample_corr, &n_corr);
    for (const auto& f : s.original) eval_class(f.feature, f.target_word, f.p_h, orig, nullptr, nullptr);
    for (const auto& f : s.random_features)
      eval_class(f, concept_target_word(f), -1.0, rnd, &sample_rnd, &n_rnd);
    rep.sample_ids.push_back(s.id);
    rep.sample_delta_correlated.push_back(n_corr ? sample_corr / n_corr : 0.0);
    rep.sample_delta_random.push_back(n_rnd ? sample_rnd / n_rnd : 0.0);
  }

  auto finish = [](const ClassAcc& acc, bool with_r) {
    ConceptClassStats st;
    st.n = static_cast<int>(acc.deltas.size());
    if (st.n == 0) return st;
    double m = 0.0;
    for (double d : acc.deltas) m += d;
    st.mean_delta = m / st.n;
    double v = 0.0;
    for (double d : acc.deltas) v += (d - st.mean_delta) * (d - st.mean_delta);
    st.sd_delta = st.n > 1 ? std::sqrt(v / (st.n - 1)) : 0.0;
    if (with_r && acc.p_h.size() == acc.post_p.size() && acc.p_h.size() >= 2)
      st.r = pearson(acc.post_p, acc.p_h);
    return st;
  };
  rep.correlated = finish(corr, true);
  rep.original = finish(orig, true);
  rep.random = finish(rnd, false);
  return rep;
}

// --- layer sweep ----------------------------------------------------------------------

double harmonic_mean_normalized(const std::vector<std::map<std::string, double>>& metric_rows,
                                std::vector<double>* out_hm, std::vector<std::string>* warnings) {
  if (metric_rows.empty()) return 0.0;
  std::map<std::string, std::pair<double, double>> ranges;
  for (const auto& row : metric_rows) {
    for (const auto& [k, v] : row) {
      auto it = ranges.find(k);
      if (it == ranges.end())
        ranges[k] = {v, v};
      else {
        it->second.first = std::min(it->second.first, v);
        it->second.second = std::max(it->second.second, v);
      }
    }
  }
  out_hm->clear();
  double best = 0.0;
  for (const auto& row : metric_rows) {
    double denom = 0.0;
    int k = 0;
    for (const auto& [name, v] : row) {
      auto [lo, hi] = ranges[name];
      double norm = hi > lo ? (v - lo) / (hi - lo) : 1.0;
      if (norm <= 0.0) {
        norm = 1e-6;
        if (warnings) warnings->push_back("metric " + name + " clamped to 1e-6 after normalization");
      }
      denom += 1.0 / norm;
      ++k;
    }
    double hm = k > 0 ? k / denom : 0.0;
    out_hm->push_back(hm);
    best = std::max(best, hm);
  }
  return best;
}

LayerSweepResult layer_sweep(const TransformerLM& lm, const Vocab& vocab, const SyntheticWorld& world,
                             const std::vector<EditSample>& train_samples,
                             const std::vector<EditSample>& eval_samples,
                             const std::vector<ConceptEditSample>& concept_train,
                             const std::vector<ConceptEditSample>& concept_eval,
                             const std::string& task, const SweepConfig& cfg) {
  LayerSweepResult res;
  res.task = task;

  for (int layer = 0; layer < lm.config.n_layers; ++layer) {
    EditTrainConfig ec = cfg.editor;
    ec.layer = layer;
    std::map<std::string, double> metrics;

    if (task == "counterfact" || task == "bios") {
      std::vector<EditSample> sub(train_samples.begin(),
                                  train_samples.begin() +
                                      std::min<size_t>(train_samples.size(), static_cast<size_t>(cfg.subset)));
      EditorTrainResult tr = train_editor(lm, vocab, sub, ec);
      std::vector<EditSample> ev(eval_samples.begin(),
                                 eval_samples.begin() +
                                     std::min<size_t>(eval_samples.size(), static_cast<size_t>(cfg.eval_subset)));
      if (task == "counterfact") {
        EvalConfig evc;
        evc.method = EditMethod::Remedi;
        evc.max_new_tokens = cfg.max_new_tokens;
        evc.seed = cfg.seed;
        EditReport rep = evaluate_editing(lm, &tr.editor, vocab, world, ev, evc);
        metrics["efficacy"] = rep.efficacy;
        metrics["consistency"] = rep.consistency;
        metrics["fluency"] = rep.fluency;
        metrics["essence"] = rep.essence;
      } else {
        OccupationReport in_ctx = occupation_accuracy(lm, &tr.editor, vocab, ev, world.occupations,
                                                      EditMethod::Remedi, true, cfg.max_new_tokens);
        metrics["accuracy"] = in_ctx.accuracy;
        metrics["fluency"] = in_ctx.fluency;
      }
    } else if (task == "concept") {
      std::vector<EditSample> pseudo;
      for (const auto& cs : concept_train) {
        EditSample s;
        s.id = cs.id;
        s.entity = cs.concept_name;
        s.attribute = cs.feature_star;
        FeaturePrompt fp = feature_prompt(cs.concept_name, cs.feature_star);
        s.prompt = fp.prompt;
        s.entity_index = 0;
        s.target_mediated = fp.target_word;
        pseudo.push_back(std::move(s));
        if (static_cast<int>(pseudo.size()) >= cfg.subset) break;
      }
      EditTrainConfig cec = ec;
      cec.lambda1 = 0.0;
      EditorTrainResult tr = train_editor(lm, vocab, pseudo, cec);
      std::vector<ConceptEditSample> ev(
          concept_eval.begin(),
          concept_eval.begin() + std::min<size_t>(concept_eval.size(), static_cast<size_t>(cfg.eval_subset)));
      ConceptEditReport rep = delta_plm(lm, &tr.editor, vocab, ev, EditMethod::Remedi);
      metrics["r_correlated"] = rep.correlated.r;
      metrics["delta_correlated"] = rep.correlated.mean_delta;
    } else {
      throw std::invalid_argument("layer_sweep: unknown task " + task);
    }
    res.layers.push_back(layer);
    res.metrics.push_back(std::move(metrics));
  }

  harmonic_mean_normalized(res.metrics, &res.harmonic_mean, &res.warnings);
  int best = 0;
  for (size_t i = 1; i < res.harmonic_mean.size(); ++i)
    if (res.harmonic_mean[i] > res.harmonic_mean[static_cast<size_t>(best)] + 1e-12)
      best = static_cast<int>(i);  // ties keep the lowest layer
  res.selected_layer = res.layers[static_cast<size_t>(best)];
  return res;
}

// --- norm profile ------------------------------------------------------------------------

NormProfile norm_profile(const TransformerLM& lm, const Editor& editor, const Vocab& vocab,
                         const std::vector<EditSample>& samples) {
  int n_layers = lm.config.n_layers;
  NormProfile prof;
  prof.pre_norm.assign(static_cast<size_t>(n_layers) + 1, 0.0);
  prof.post_norm.assign(static_cast<size_t>(n_layers) + 1, 0.0);
  int n = 0;
  for (const auto& s : samples) {
    std::vector<int> toks = vocab.encode(s.prompt);
    int pos = entity_position(vocab, toks, s.entity);
    if (pos < 0) continue;
    Graph g(false);
    ForwardResult base = forward(lm, toks, {}, g, true);
    Tensor h_entity = base.hidden.at(editor.layer, pos);
    Tensor h_attr = encode_attribute(lm, vocab, s, editor.layer).vector;
    Tensor z = apply_edit(editor, h_entity, h_attr);
    Graph g2(false);
    ForwardResult edited = forward(lm, toks, {{editor.layer, pos, z}}, g2, true);
    for (int l = 0; l <= n_layers; ++l) {
      prof.pre_norm[static_cast<size_t>(l)] += l2_norm(base.hidden.at(l, pos));
      prof.post_norm[static_cast<size_t>(l)] += l2_norm(edited.hidden.at(l, pos));
    }
    ++n;
  }
  if (n == 0) throw std::invalid_argument("norm_profile: no sample mentions its entity");
  for (size_t l = 0; l < prof.pre_norm.size(); ++l) {
    prof.pre_norm[l] /= n;
    prof.post_norm[l] /= n;
    prof.ratio.push_back(prof.pre_norm[l] > 0.0 ? prof.post_norm[l] / prof.pre_norm[l] : 0.0);
  }
  return prof;
}

// --- breakdowns ---------------------------------------------------------------------------

std::vector<BreakdownGroup> breakdown(const EditReport& report, const std::string& key) {
  if (key != "attribute_seen" && key != "model_knows")
    throw std::invalid_argument("breakdown: unknown key '" + key + "'");
  std::map<std::string, std::vector<const SampleRow*>> groups;
  for (const auto& r : report.rows) {
    bool v = key == "attribute_seen" ? r.attribute_seen : r.model_knows;
    groups[v ? "true" : "false"].push_back(&r);
  }
  std::vector<BreakdownGroup> out;
  for (const auto& [val, rows] : groups) {
    BreakdownGroup g;
    g.key_value = val;
    g.n = static_cast<int>(rows.size());
    auto mean_of = [&](auto getter, const char* name) {
      double total = 0.0;
      int n = 0;
      for (const SampleRow* r : rows) {
        auto v = getter(*r);
        if (v) {
          total += *v;
          ++n;
        }
      }
      if (n) g.means[name] = total / n;
    };
    mean_of([](const SampleRow& r) { return r.efficacy; }, "efficacy");
    mean_of([](const SampleRow& r) { return r.neighborhood; }, "neighborhood");
    mean_of([](const SampleRow& r) { return r.consistency; }, "consistency");
    mean_of([](const SampleRow& r) { return r.fluency; }, "fluency");
    mean_of([](const SampleRow& r) { return r.essence; }, "essence");
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace remedi
