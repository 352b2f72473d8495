#include "remedi/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace remedi {

using nlohmann::json;

// --- vocabulary ---------------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      out.push_back("\n");
    } else if (c == ' ' || c == '\t' || c == '\r') {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Vocab Vocab::build(std::vector<std::string> words) {
  Vocab v;
  v.tokens = {"<pad>", "<unk>", "\n"};
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  for (auto& w : words) {
    if (w == "<pad>" || w == "<unk>" || w == "\n" || w.empty()) continue;
    v.tokens.push_back(w);
  }
  for (size_t i = 0; i < v.tokens.size(); ++i) v.token_ids.emplace(v.tokens[i], static_cast<int>(i));
  return v;
}

int Vocab::id(const std::string& tok) const {
  auto it = token_ids.find(tok);
  if (it == token_ids.end()) throw std::out_of_range("unknown token: '" + tok + "'");
  return it->second;
}

const std::string& Vocab::token(int tid) const {
  if (tid < 0 || tid >= size()) throw std::out_of_range("token id " + std::to_string(tid) + " out of vocabulary");
  return tokens[static_cast<size_t>(tid)];
}

std::vector<int> Vocab::encode(const std::string& text, std::vector<std::string>* collect_unknown) const {
  std::vector<int> out;
  for (const std::string& w : split_words(text)) {
    auto it = token_ids.find(w);
    if (it == token_ids.end()) {
      if (collect_unknown) {
        collect_unknown->push_back(w);
        out.push_back(unk_id);
      } else {
        throw std::out_of_range("unknown token: '" + w + "'");
      }
    } else {
      out.push_back(it->second);
    }
  }
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  bool at_line_start = true;
  for (int tid : ids) {
    const std::string& tok = token(tid);
    if (tok == "\n") {
      out.push_back('\n');
      at_line_start = true;
      continue;
    }
    if (!at_line_start) out.push_back(' ');
    out += tok;
    at_line_start = false;
  }
  return out;
}

uint64_t Vocab::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens) {
    h = fnv1a64(t.data(), t.size(), h);
    h = fnv1a64("\x1f", 1, h);
  }
  return h;
}

// --- world construction ---------------------------------------------------------

namespace {

const std::vector<std::string> kGlueWords = {
    "everyone", "knows", "they",  "say",    "has",    "the",  "occupation", "of",
    "spends",   "long",  "days",  "around", "is",     "often", "seen",      "with",
    "everything", "about", "and", "every",  "people", "made", "found",     "filled",
    "kept",     "near",  "on",    "in",     "at",     "trees", "water",    "night",
    "ease"};

const std::vector<std::string> kFactTemplates = {
    "{E} {R} {O}",
    "everyone knows {E} {R} {O}",
    "they say {E} {R} {O}",
};

const std::vector<std::string> kOccupationTemplates = {
    "{E} has the occupation of {O}",
    "everyone knows {E} has the occupation of {O}",
    "they say {E} has the occupation of {O}",
};

const std::vector<std::string> kBioTemplates = {
    "{E} spends long days around {K1} and {K2}",
    "{E} is often seen with {K1} and {K2}",
    "{E} knows everything about {K1} and {K2}",
};

const std::vector<std::string> kConceptTemplates = {
    "{C} {F}",
    "every {C} {F}",
    "people say {C} {F}",
};

// Frames for synthetic features. A-frames open with a participial phrase and
// put the content word last; B-frames open with the content word as a verb.
const std::vector<std::string> kAFrames = {"is made of {W}", "is found in {W}", "is filled with {W}",
                                           "is kept near {W}"};
const std::vector<std::string> kBFrames = {"{W} on trees", "{W} in water", "{W} at night", "{W} with ease"};

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

class NameGen {
 public:
  explicit NameGen(Rng rng) : rng_(rng) {
    for (const auto& w : kGlueWords) used_.insert(w);
  }

  std::string fresh() {
    static const std::vector<std::string> cons = {"b", "d", "f", "g", "k", "l", "m",
                                                  "n", "p", "r", "s", "t", "v", "z"};
    static const std::vector<std::string> vows = {"a", "e", "i", "o", "u"};
    for (int attempt = 0; attempt < 10000; ++attempt) {
      int sylls = 2 + static_cast<int>(rng_.uniform(2));
      std::string name;
      for (int s = 0; s < sylls; ++s) {
        name += cons[rng_.uniform(cons.size())];
        name += vows[rng_.uniform(vows.size())];
      }
      if (rng_.bernoulli(0.5)) name += cons[rng_.uniform(cons.size())];
      if (used_.insert(name).second) return name;
    }
    throw std::runtime_error("name generator exhausted");
  }

 private:
  Rng rng_;
  std::set<std::string> used_;
};

std::string render_fact(const std::string& tmpl, const std::string& e, const std::string& r,
                        const std::string& o) {
  std::string s = replace_all(replace_all(replace_all(tmpl, "{E}", e), "{R}", r), "{O}", o);
  // collapse doubled spaces left by empty slots
  std::string out;
  for (char c : s) {
    if (c == ' ' && !out.empty() && out.back() == ' ') continue;
    out.push_back(c);
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::string fact_prompt(const std::string& tmpl, const std::string& e, const std::string& r) {
  return render_fact(tmpl, e, r, "");
}

std::string render_bio(Rng& rng, const SyntheticWorld& w, const std::string& name, int occupation) {
  const std::string& tmpl = kBioTemplates[rng.uniform(kBioTemplates.size())];
  const auto& pool = w.occupation_keywords[static_cast<size_t>(occupation)];
  std::string k1 = pool[rng.uniform(pool.size())];
  std::string k2;
  if (rng.bernoulli(0.5)) {
    do {
      k2 = pool[rng.uniform(pool.size())];
    } while (k2 == k1);
  } else {
    k2 = w.shared_keywords[rng.uniform(w.shared_keywords.size())];
  }
  return replace_all(replace_all(replace_all(tmpl, "{E}", name), "{K1}", k1), "{K2}", k2);
}

std::string occupation_prompt(const std::string& name) { return name + " has the occupation of"; }

}  // namespace

void WorldSizes::validate() const {
  if (entities <= 0 || relations <= 0) throw std::invalid_argument("world sizes must be positive");
  if (relations_per_entity <= 0 || relations_per_entity > relations)
    throw std::invalid_argument("relations_per_entity must be in [1, relations]");
  if (occupations < 0 || concepts < 0 || features < 0 || themes < 0 || filler_entities < 0 ||
      filler_bios_pairs < 0 || bios_per_eval_entity < 0)
    throw std::invalid_argument("world sizes must be nonnegative");
  if (concepts > 0 && (features <= 0 || themes <= 0 || features % themes != 0))
    throw std::invalid_argument("features must be a positive multiple of themes");
  if (raters <= 0) throw std::invalid_argument("raters must be positive");
  if (echo_fraction < 0.0) throw std::invalid_argument("echo_fraction must be >= 0");
  if (templates_per_fact < 1 || templates_per_fact > static_cast<int>(kFactTemplates.size()))
    throw std::invalid_argument("templates_per_fact out of range");
  if (reps_per_template < 1) throw std::invalid_argument("reps_per_template must be >= 1");
  if (known_entity_fraction < 0.0 || known_entity_fraction > 1.0)
    throw std::invalid_argument("known_entity_fraction must be in [0, 1]");
}

int SyntheticWorld::entity_id(const std::string& name) const {
  for (size_t i = 0; i < entities.size(); ++i)
    if (entities[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("unknown entity: " + name);
}

int SyntheticWorld::relation_id(const std::string& name) const {
  for (size_t i = 0; i < relations.size(); ++i)
    if (relations[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("unknown relation: " + name);
}

int SyntheticWorld::feature_id(const std::string& text) const {
  for (size_t i = 0; i < features.size(); ++i)
    if (features[i].text == text) return static_cast<int>(i);
  throw std::out_of_range("unknown feature: " + text);
}

SyntheticWorld build_world(uint64_t seed, const WorldSizes& sizes) {
  sizes.validate();
  SyntheticWorld w;
  w.sizes = sizes;
  w.seed = seed;
  Rng root(seed ^ 0x9a57e11eULL);
  NameGen names(root.fork("names"));

  for (int i = 0; i < sizes.occupations; ++i) w.occupations.push_back(names.fresh());
  for (int i = 0; i < sizes.occupations; ++i) {
    std::vector<std::string> pool;
    for (int k = 0; k < 4; ++k) pool.push_back(names.fresh());
    w.occupation_keywords.push_back(std::move(pool));
  }
  for (int i = 0; i < 20; ++i) w.shared_keywords.push_back(names.fresh());

  Rng rel_rng = root.fork("relations");
  int expected_per_relation = sizes.entities * sizes.relations_per_entity / sizes.relations;
  for (int r = 0; r < sizes.relations; ++r) {
    Relation rel;
    rel.name = names.fresh();
    int n_cand = rel_rng.uniform_int(8, 28);
    for (int c = 0; c < n_cand; ++c) rel.candidates.push_back(names.fresh());
    // keep true facts on a candidate prefix so each (relation, object)
    // bucket stays big enough to source neighborhood prompts
    rel.assigned_candidates = std::max(2, std::min(n_cand, expected_per_relation / 6));
    w.relations.push_back(std::move(rel));
  }

  Rng ent_rng = root.fork("entities");
  std::vector<int> known_order(static_cast<size_t>(sizes.entities));
  std::iota(known_order.begin(), known_order.end(), 0);
  ent_rng.shuffle(known_order);
  int n_known = static_cast<int>(std::lround(sizes.known_entity_fraction * sizes.entities));
  std::vector<bool> known(static_cast<size_t>(sizes.entities), false);
  for (int i = 0; i < n_known && i < sizes.entities; ++i)
    known[static_cast<size_t>(known_order[static_cast<size_t>(i)])] = true;

  std::vector<int> assign_counter(static_cast<size_t>(sizes.relations), 0);
  std::vector<int> rel_ids(static_cast<size_t>(sizes.relations));
  std::iota(rel_ids.begin(), rel_ids.end(), 0);
  for (int e = 0; e < sizes.entities; ++e) {
    Entity ent;
    ent.name = names.fresh();
    if (sizes.occupations > 0) {
      ent.occupation = static_cast<int>(ent_rng.uniform(static_cast<uint64_t>(sizes.occupations)));
      ent.occupation_in_corpus = known[static_cast<size_t>(e)];
    }
    ent_rng.shuffle(rel_ids);
    for (int k = 0; k < sizes.relations_per_entity; ++k) {
      int r = rel_ids[static_cast<size_t>(k)];
      Relation& rel = w.relations[static_cast<size_t>(r)];
      int obj = assign_counter[static_cast<size_t>(r)] % rel.assigned_candidates;
      ++assign_counter[static_cast<size_t>(r)];
      ent.facts[r] = obj;
    }
    w.entities.push_back(std::move(ent));
  }

  for (int i = 0; i < sizes.filler_entities; ++i) w.filler_names.push_back(names.fresh());

  if (sizes.concepts > 0) {
    int per_theme = sizes.features / sizes.themes;
    for (int t = 0; t < sizes.themes; ++t) {
      for (int i = 0; i < per_theme; ++i) {
        ConceptFeature f;
        f.theme = t;
        std::string content = names.fresh();
        if (i % 2 == 0)
          f.text = replace_all(kAFrames[static_cast<size_t>(i / 2) % kAFrames.size()], "{W}", content);
        else
          f.text = replace_all(kBFrames[static_cast<size_t>(i / 2) % kBFrames.size()], "{W}", content);
        f.target_word = concept_target_word(f.text);
        w.features.push_back(std::move(f));
      }
    }

    Rng con_rng = root.fork("concepts");
    for (int c = 0; c < sizes.concepts; ++c) {
      Concept con;
      con.name = names.fresh();
      int n_themes = 1 + static_cast<int>(con_rng.uniform(2));
      std::set<int> themes;
      while (static_cast<int>(themes.size()) < n_themes)
        themes.insert(static_cast<int>(con_rng.uniform(static_cast<uint64_t>(sizes.themes))));
      std::vector<int> pool;
      for (int t : themes)
        for (int i = 0; i < per_theme; ++i) pool.push_back(t * per_theme + i);
      con_rng.shuffle(pool);
      int n_feats = std::min<int>(static_cast<int>(pool.size()), 5 + static_cast<int>(con_rng.uniform(5)));
      for (int i = 0; i < n_feats; ++i)
        con.features[pool[static_cast<size_t>(i)]] =
            3 + static_cast<int>(con_rng.uniform(static_cast<uint64_t>(sizes.raters - 2)));
      w.concepts.push_back(std::move(con));
    }
  }

  std::vector<std::string> words(kGlueWords);
  for (const auto& e : w.entities) words.push_back(e.name);
  for (const auto& f : w.filler_names) words.push_back(f);
  for (const auto& r : w.relations) {
    words.push_back(r.name);
    for (const auto& c : r.candidates) words.push_back(c);
  }
  for (const auto& o : w.occupations) words.push_back(o);
  for (const auto& pool : w.occupation_keywords)
    for (const auto& k : pool) words.push_back(k);
  for (const auto& k : w.shared_keywords) words.push_back(k);
  for (const auto& c : w.concepts) words.push_back(c.name);
  for (const auto& f : w.features)
    for (const auto& t : split_words(f.text)) words.push_back(t);
  w.vocab = Vocab::build(std::move(words));
  return w;
}

// --- rendering -----------------------------------------------------------------

std::string concept_target_word(const std::string& feature_text) {
  static const std::set<std::string> kParticipleStarters = {"is",   "are",  "was",    "were",    "has",
                                                            "have", "used", "made",   "found",   "kept",
                                                            "filled", "covered", "worn"};
  std::vector<std::string> ws = split_words(feature_text);
  if (ws.empty()) throw std::invalid_argument("empty feature text");
  if (kParticipleStarters.count(ws.front())) return ws.back();
  return ws.front();
}

FeaturePrompt feature_prompt(const std::string& concept_name, const std::string& feature_text) {
  FeaturePrompt fp;
  fp.target_word = concept_target_word(feature_text);
  std::vector<std::string> ws = split_words(feature_text);
  size_t cut = 0;
  while (cut < ws.size() && ws[cut] != fp.target_word) ++cut;
  if (cut == ws.size()) throw std::logic_error("target word not found in feature text");
  std::string prompt = concept_name;
  for (size_t i = 0; i < cut; ++i) prompt += " " + ws[i];
  fp.prompt = prompt;
  return fp;
}

std::vector<std::vector<int>> render_corpus(const SyntheticWorld& w, uint64_t seed) {
  Rng rng(seed ^ 0xc02b05ULL);
  std::vector<std::vector<int>> items;

  auto add = [&](const std::string& text, const std::string& tmpl, int copies) {
    std::vector<int> toks = w.vocab.encode(text);
    if (static_cast<int>(toks.size()) > w.sizes.max_sentence_tokens)
      throw std::length_error("template '" + tmpl + "' renders " + std::to_string(toks.size()) +
                              " tokens, over the limit of " + std::to_string(w.sizes.max_sentence_tokens));
    for (int i = 0; i < copies; ++i) items.push_back(toks);
  };

  int total_relation_facts = 0;
  for (const auto& ent : w.entities) {
    for (const auto& [r, obj] : ent.facts) {
      const Relation& rel = w.relations[static_cast<size_t>(r)];
      for (int t = 0; t < w.sizes.templates_per_fact; ++t)
        add(render_fact(kFactTemplates[static_cast<size_t>(t)], ent.name, rel.name,
                        rel.candidates[static_cast<size_t>(obj)]),
            kFactTemplates[static_cast<size_t>(t)], w.sizes.reps_per_template);
      ++total_relation_facts;
    }
    if (ent.occupation >= 0 && ent.occupation_in_corpus) {
      for (int t = 0; t < w.sizes.templates_per_fact; ++t)
        add(replace_all(replace_all(kOccupationTemplates[static_cast<size_t>(t)], "{E}", ent.name), "{O}",
                        w.occupations[static_cast<size_t>(ent.occupation)]),
            kOccupationTemplates[static_cast<size_t>(t)], w.sizes.reps_per_template);
    }
  }

  // context-echo items: a subject restates an arbitrary fact, which teaches
  // the model to copy a statement made earlier in the window; half use real
  // entities so the skill competes with memorized facts
  if (!w.filler_names.empty() && w.sizes.echo_fraction > 0.0) {
    int n_echo = static_cast<int>(std::lround(w.sizes.echo_fraction * total_relation_facts));
    for (int i = 0; i < n_echo; ++i) {
      const std::string& subject = rng.bernoulli(0.5)
                                       ? w.filler_names[rng.uniform(w.filler_names.size())]
                                       : w.entities[rng.uniform(w.entities.size())].name;
      const Relation& rel = w.relations[rng.uniform(w.relations.size())];
      const std::string& obj = rel.candidates[rng.uniform(rel.candidates.size())];
      std::string stmt = render_fact(kFactTemplates[0], subject, rel.name, obj);
      add(stmt + "\n" + stmt, "echo", 1);
    }
  }

  // bios with the occupation stated across a blank line. Filler subjects get
  // a random occupation each time so the keywords carry the signal; known
  // entities restate their true occupation
  if (!w.filler_names.empty() && !w.occupations.empty()) {
    std::vector<int> known_ids;
    for (size_t e = 0; e < w.entities.size(); ++e)
      if (w.entities[e].occupation >= 0 && w.entities[e].occupation_in_corpus)
        known_ids.push_back(static_cast<int>(e));
    for (int i = 0; i < w.sizes.filler_bios_pairs; ++i) {
      std::string subject;
      int occ;
      if (!known_ids.empty() && rng.bernoulli(0.5)) {
        const Entity& ent = w.entities[static_cast<size_t>(known_ids[rng.uniform(known_ids.size())])];
        subject = ent.name;
        occ = ent.occupation;
      } else {
        subject = w.filler_names[rng.uniform(w.filler_names.size())];
        occ = static_cast<int>(rng.uniform(w.occupations.size()));
      }
      std::string bio = render_bio(rng, w, subject, occ);
      add(bio + "\n\n" + occupation_prompt(subject) + " " + w.occupations[static_cast<size_t>(occ)],
          "bio pair", 1);
    }
  }

  for (const auto& con : w.concepts) {
    for (const auto& [fid, count] : con.features) {
      double p = static_cast<double>(count) / w.sizes.raters;
      int reps = std::max(1, static_cast<int>(std::lround(w.sizes.reps_per_template * p)));
      for (int t = 0; t < w.sizes.templates_per_fact && t < static_cast<int>(kConceptTemplates.size()); ++t) {
        std::string text = replace_all(
            replace_all(kConceptTemplates[static_cast<size_t>(t)], "{C}", con.name), "{F}",
            w.features[static_cast<size_t>(fid)].text);
        add(text, kConceptTemplates[static_cast<size_t>(t)], reps);
      }
    }
  }

  rng.shuffle(items);
  return items;
}

std::vector<TrainingFact> training_facts(const SyntheticWorld& w) {
  std::vector<TrainingFact> facts;
  for (const auto& ent : w.entities) {
    for (const auto& [r, obj] : ent.facts) {
      const Relation& rel = w.relations[static_cast<size_t>(r)];
      facts.push_back({fact_prompt(kFactTemplates[0], ent.name, rel.name),
                       rel.candidates[static_cast<size_t>(obj)]});
    }
    if (ent.occupation >= 0 && ent.occupation_in_corpus)
      facts.push_back({occupation_prompt(ent.name), w.occupations[static_cast<size_t>(ent.occupation)]});
  }
  return facts;
}

// --- dataset builders ------------------------------------------------------------

std::vector<EditSample> make_counterfact_samples(const SyntheticWorld& w, uint64_t seed, int n) {
  std::vector<std::pair<int, int>> facts;  // (entity, relation)
  for (size_t e = 0; e < w.entities.size(); ++e)
    for (const auto& [r, obj] : w.entities[e].facts) facts.emplace_back(static_cast<int>(e), r);
  if (n > static_cast<int>(facts.size()))
    throw std::invalid_argument("requested " + std::to_string(n) + " counterfact samples but only " +
                                std::to_string(facts.size()) + " facts exist");
  Rng rng(seed ^ 0xcfac7ULL);
  rng.shuffle(facts);

  std::vector<EditSample> samples;
  for (const auto& [e, r] : facts) {
    if (static_cast<int>(samples.size()) >= n) break;
    const Entity& ent = w.entities[static_cast<size_t>(e)];
    const Relation& rel = w.relations[static_cast<size_t>(r)];
    if (rel.assigned_candidates < 2) {
      std::cerr << "warning: skipping fact for relation '" << rel.name
                << "' with a single assigned candidate\n";
      continue;
    }
    int obj = ent.facts.at(r);
    int tgt = obj;
    while (tgt == obj) tgt = static_cast<int>(rng.uniform(static_cast<uint64_t>(rel.assigned_candidates)));

    EditSample s;
    s.id = "cf-" + ent.name + "-" + rel.name;
    s.entity = ent.name;
    s.prompt = fact_prompt(kFactTemplates[0], ent.name, rel.name);
    s.entity_index = 0;
    s.attribute = rel.name + " " + rel.candidates[static_cast<size_t>(tgt)];
    s.target_mediated = rel.candidates[static_cast<size_t>(tgt)];
    s.target_unmediated = rel.candidates[static_cast<size_t>(obj)];
    for (size_t t = 1; t < kFactTemplates.size(); ++t)
      s.paraphrase_prompts.push_back(fact_prompt(kFactTemplates[t], ent.name, rel.name));

    std::vector<int> bucket;
    for (size_t e2 = 0; e2 < w.entities.size(); ++e2) {
      if (static_cast<int>(e2) == e) continue;
      auto it = w.entities[e2].facts.find(r);
      if (it != w.entities[e2].facts.end() && it->second == obj) bucket.push_back(static_cast<int>(e2));
    }
    if (static_cast<int>(bucket.size()) < 5) {
      // fallback for tiny worlds: same relation, any object
      for (size_t e2 = 0; e2 < w.entities.size() && bucket.size() < 5; ++e2) {
        if (static_cast<int>(e2) == e) continue;
        if (w.entities[e2].facts.count(r) &&
            std::find(bucket.begin(), bucket.end(), static_cast<int>(e2)) == bucket.end())
          bucket.push_back(static_cast<int>(e2));
      }
    }
    rng.shuffle(bucket);
    for (size_t i = 0; i < bucket.size() && i < 5; ++i)
      s.neighborhood_prompts.push_back(
          fact_prompt(kFactTemplates[0], w.entities[static_cast<size_t>(bucket[i])].name, rel.name));
    samples.push_back(std::move(s));
  }
  for (size_t i = 0; i < samples.size(); ++i)
    samples[i].split = i < samples.size() / 2 ? "train" : "heldout";
  return samples;
}

std::vector<EditSample> make_bios_samples(const SyntheticWorld& w, uint64_t seed, int n) {
  std::vector<int> eval_entities;
  for (size_t e = 0; e < w.entities.size(); ++e)
    if (w.entities[e].occupation >= 0 && !w.entities[e].occupation_in_corpus)
      eval_entities.push_back(static_cast<int>(e));
  int available = static_cast<int>(eval_entities.size()) * w.sizes.bios_per_eval_entity;
  if (n > available)
    throw std::invalid_argument("requested " + std::to_string(n) + " bios samples but only " +
                                std::to_string(available) + " are achievable");
  Rng rng(seed ^ 0xb105ULL);
  rng.shuffle(eval_entities);

  std::vector<EditSample> samples;
  for (size_t ei = 0; ei < eval_entities.size(); ++ei) {
    const Entity& ent = w.entities[static_cast<size_t>(eval_entities[ei])];
    bool train_side = ei < eval_entities.size() / 2;
    for (int b = 0; b < w.sizes.bios_per_eval_entity; ++b) {
      EditSample s;
      s.id = "bio-" + ent.name + "-" + std::to_string(b);
      s.context = render_bio(rng, w, ent.name, ent.occupation);
      s.prompt = occupation_prompt(ent.name);
      s.entity = ent.name;
      s.entity_index = 0;
      s.attribute = s.context.substr(ent.name.size() + 1);  // bio text after the entity
      s.target_mediated = w.occupations[static_cast<size_t>(ent.occupation)];
      s.split = train_side ? "train" : "heldout";
      samples.push_back(std::move(s));
    }
  }
  std::vector<EditSample> out;
  int per_split = (n + 1) / 2;
  int kept_train = 0, kept_heldout = 0;
  for (auto& s : samples) {
    if (s.split == "train" && kept_train < per_split) {
      out.push_back(std::move(s));
      ++kept_train;
    } else if (s.split == "heldout" && kept_heldout < n - per_split) {
      out.push_back(std::move(s));
      ++kept_heldout;
    }
  }
  return out;
}

double cooccurrence(const SyntheticWorld& w, int f1, int f2) {
  if (f1 < 0 || f1 >= static_cast<int>(w.features.size()) || f2 < 0 ||
      f2 >= static_cast<int>(w.features.size()))
    throw std::out_of_range("feature id out of range");
  int n_f1 = 0;
  double total = 0.0;
  for (const auto& con : w.concepts) {
    auto it1 = con.features.find(f1);
    if (it1 == con.features.end() || it1->second == 0) continue;
    ++n_f1;
    auto it2 = con.features.find(f2);
    if (it2 == con.features.end()) continue;
    double p1 = static_cast<double>(it1->second) / w.sizes.raters;
    double p2 = static_cast<double>(it2->second) / w.sizes.raters;
    total += p1 * p2;
  }
  if (n_f1 == 0)
    throw std::domain_error("feature '" + w.features[static_cast<size_t>(f1)].text +
                            "' is produced for no concept; co-occurrence undefined");
  return total / n_f1;
}

std::vector<ConceptEditSample> make_concept_samples(const SyntheticWorld& w, uint64_t seed, int n) {
  int nf = static_cast<int>(w.features.size());
  std::vector<bool> produced(static_cast<size_t>(nf), false);
  for (const auto& con : w.concepts)
    for (const auto& [fid, count] : con.features)
      if (count > 0) produced[static_cast<size_t>(fid)] = true;

  std::vector<std::pair<int, int>> pairs;
  for (int f1 = 0; f1 < nf; ++f1) {
    if (!produced[static_cast<size_t>(f1)]) continue;
    for (int f2 = 0; f2 < nf; ++f2) {
      if (f2 == f1 || !produced[static_cast<size_t>(f2)]) continue;
      if (cooccurrence(w, f1, f2) > 0.1) pairs.emplace_back(f1, f2);
    }
  }
  Rng rng(seed ^ 0x9c04eULL);
  rng.shuffle(pairs);

  std::vector<ConceptEditSample> samples;
  for (const auto& [f1, f2] : pairs) {
    if (static_cast<int>(samples.size()) >= n) break;
    std::vector<int> eligible;
    for (size_t c = 0; c < w.concepts.size(); ++c)
      if (!w.concepts[c].features.count(f1) && !w.concepts[c].features.count(f2))
        eligible.push_back(static_cast<int>(c));
    if (eligible.empty()) continue;
    const Concept& con = w.concepts[static_cast<size_t>(eligible[rng.uniform(eligible.size())])];

    ConceptEditSample s;
    s.id = "mc-" + std::to_string(samples.size());
    s.concept_name = con.name;
    s.feature_star = w.features[static_cast<size_t>(f1)].text;
    s.target_word = w.features[static_cast<size_t>(f1)].target_word;

    auto ref = [&](int fid, double p_h) {
      ConceptFeatureRef r;
      r.feature = w.features[static_cast<size_t>(fid)].text;
      r.p_h = p_h;
      r.target_word = w.features[static_cast<size_t>(fid)].target_word;
      return r;
    };

    s.correlated.push_back(ref(f2, cooccurrence(w, f1, f2)));
    int extra = 0;
    for (int f = 0; f < nf && extra < 2; ++f) {
      if (f == f1 || f == f2 || !produced[static_cast<size_t>(f)] || con.features.count(f)) continue;
      double co = cooccurrence(w, f1, f);
      if (co > 0.1) {
        s.correlated.push_back(ref(f, co));
        ++extra;
      }
    }
    int orig = 0;
    for (const auto& [fid, count] : con.features) {
      if (orig >= 6) break;
      s.original.push_back(ref(fid, static_cast<double>(count) / w.sizes.raters));
      ++orig;
    }
    int rnd = 0;
    for (int f = 0; f < nf && rnd < 3; ++f) {
      if (f == f1 || !produced[static_cast<size_t>(f)] || con.features.count(f)) continue;
      if (cooccurrence(w, f1, f) == 0.0) {
        s.random_features.push_back(w.features[static_cast<size_t>(f)].text);
        ++rnd;
      }
    }
    if (s.random_features.empty()) continue;
    samples.push_back(std::move(s));
  }
  if (static_cast<int>(samples.size()) < n)
    throw std::invalid_argument("requested " + std::to_string(n) + " concept samples but only " +
                                std::to_string(samples.size()) + " are achievable");
  for (size_t i = 0; i < samples.size(); ++i)
    samples[i].split = i < samples.size() / 2 ? "train" : "heldout";
  return samples;
}

// --- sample helpers ------------------------------------------------------------

bool schema_equal(const EditSample& a, const EditSample& b) {
  return a.context == b.context && a.prompt == b.prompt && a.entity == b.entity &&
         a.entity_index == b.entity_index && a.attribute == b.attribute &&
         a.target_mediated == b.target_mediated && a.target_unmediated == b.target_unmediated &&
         a.paraphrase_prompts == b.paraphrase_prompts && a.neighborhood_prompts == b.neighborhood_prompts;
}

bool schema_equal(const ConceptEditSample& a, const ConceptEditSample& b) {
  if (!(a.concept_name == b.concept_name && a.feature_star == b.feature_star && a.target_word == b.target_word &&
        a.random_features == b.random_features))
    return false;
  auto refs_equal = [](const std::vector<ConceptFeatureRef>& x, const std::vector<ConceptFeatureRef>& y) {
    if (x.size() != y.size()) return false;
    for (size_t i = 0; i < x.size(); ++i)
      if (x[i].feature != y[i].feature || x[i].p_h != y[i].p_h) return false;
    return true;
  };
  return refs_equal(a.original, b.original) && refs_equal(a.correlated, b.correlated);
}

std::string prior_attribute_text(const EditSample& s) {
  if (!s.target_unmediated) throw std::invalid_argument("sample " + s.id + " has no unmediated target");
  const std::string& attr = s.attribute;
  const std::string& tgt = s.target_mediated;
  if (attr.size() < tgt.size() || attr.compare(attr.size() - tgt.size(), tgt.size(), tgt) != 0)
    throw std::invalid_argument("attribute of " + s.id + " does not end with the mediated target");
  return attr.substr(0, attr.size() - tgt.size()) + *s.target_unmediated;
}

// --- JSONL ----------------------------------------------------------------------

namespace {

json edit_to_json(const EditSample& s) {
  json j;
  j["context"] = s.context;
  j["prompt"] = s.prompt;
  j["entity"] = s.entity;
  j["entity_index"] = s.entity_index;
  j["attribute"] = s.attribute;
  j["target_mediated"] = s.target_mediated;
  if (s.target_unmediated)
    j["target_unmediated"] = *s.target_unmediated;
  else
    j["target_unmediated"] = nullptr;
  j["paraphrase_prompts"] = s.paraphrase_prompts;
  j["neighborhood_prompts"] = s.neighborhood_prompts;
  return j;
}

json concept_to_json(const ConceptEditSample& s) {
  json j;
  j["concept"] = s.concept_name;
  j["feature_star"] = s.feature_star;
  j["target_word"] = s.target_word;
  json orig = json::array(), corr = json::array();
  for (const auto& r : s.original) orig.push_back({{"feature", r.feature}, {"p_h", r.p_h}});
  for (const auto& r : s.correlated) corr.push_back({{"feature", r.feature}, {"p_h", r.p_h}});
  j["original"] = orig;
  j["correlated"] = corr;
  j["random"] = s.random_features;
  return j;
}

[[noreturn]] void schema_fail(int line, const std::string& what) {
  throw std::invalid_argument("line " + std::to_string(line) + ": " + what);
}

const json& require_field(const json& j, const char* name, int line) {
  auto it = j.find(name);
  if (it == j.end()) schema_fail(line, std::string("missing field \"") + name + "\"");
  return *it;
}

std::string require_string(const json& j, const char* name, int line) {
  const json& f = require_field(j, name, line);
  if (!f.is_string()) schema_fail(line, std::string("field \"") + name + "\" must be a string");
  return f.get<std::string>();
}

std::vector<std::string> require_string_list(const json& j, const char* name, int line) {
  const json& f = require_field(j, name, line);
  if (!f.is_array()) schema_fail(line, std::string("field \"") + name + "\" must be a list");
  std::vector<std::string> out;
  for (const auto& e : f) {
    if (!e.is_string()) schema_fail(line, std::string("field \"") + name + "\" must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

bool tokens_known(const Vocab& vocab, const std::string& text, std::vector<std::string>& unknown) {
  std::vector<std::string> local;
  vocab.encode(text, &local);
  bool ok = local.empty();
  for (auto& u : local) unknown.push_back(std::move(u));
  return ok;
}

}  // namespace

void emit_edit_jsonl(const std::vector<EditSample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& s : samples) out << edit_to_json(s).dump() << "\n";
}

EditLoadResult load_edit_jsonl(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  EditLoadResult res;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::invalid_argument("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    EditSample s;
    s.id = "jsonl-" + std::to_string(line_no);
    s.context = require_string(j, "context", line_no);
    s.prompt = require_string(j, "prompt", line_no);
    s.entity = require_string(j, "entity", line_no);
    const json& idx = require_field(j, "entity_index", line_no);
    if (!idx.is_number_integer()) schema_fail(line_no, "field \"entity_index\" must be an integer");
    s.entity_index = idx.get<int>();
    s.attribute = require_string(j, "attribute", line_no);
    s.target_mediated = require_string(j, "target_mediated", line_no);
    const json& tu = require_field(j, "target_unmediated", line_no);
    if (tu.is_string())
      s.target_unmediated = tu.get<std::string>();
    else if (!tu.is_null())
      schema_fail(line_no, "field \"target_unmediated\" must be a string or null");
    s.paraphrase_prompts = require_string_list(j, "paraphrase_prompts", line_no);
    s.neighborhood_prompts = require_string_list(j, "neighborhood_prompts", line_no);

    std::vector<std::string> unknown;
    bool ok = tokens_known(vocab, s.context, unknown);
    ok = tokens_known(vocab, s.prompt, unknown) && ok;
    ok = tokens_known(vocab, s.attribute, unknown) && ok;
    ok = tokens_known(vocab, s.target_mediated, unknown) && ok;
    if (s.target_unmediated) ok = tokens_known(vocab, *s.target_unmediated, unknown) && ok;
    for (const auto& p : s.paraphrase_prompts) ok = tokens_known(vocab, p, unknown) && ok;
    for (const auto& p : s.neighborhood_prompts) ok = tokens_known(vocab, p, unknown) && ok;
    if (!ok) {
      std::string reason = "unknown tokens:";
      for (const auto& u : unknown) reason += " '" + u + "'";
      res.rejected.push_back({line_no, reason});
      continue;
    }

    std::vector<int> prompt_toks = vocab.encode(s.prompt);
    std::vector<std::string> entity_words = split_words(s.entity);
    if (entity_words.empty()) schema_fail(line_no, "field \"entity\" must be nonempty");
    if (s.entity_index < 0 || s.entity_index >= static_cast<int>(prompt_toks.size()))
      schema_fail(line_no, "entity_index outside the prompt");
    if (vocab.token(prompt_toks[static_cast<size_t>(s.entity_index)]) != entity_words.back())
      schema_fail(line_no, "entity_index does not point at the entity's last token");
    if (vocab.encode(s.target_mediated).empty()) schema_fail(line_no, "target_mediated tokenizes to nothing");
    res.samples.push_back(std::move(s));
  }
  return res;
}

void emit_concept_jsonl(const std::vector<ConceptEditSample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& s : samples) out << concept_to_json(s).dump() << "\n";
}

ConceptLoadResult load_concept_jsonl(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  ConceptLoadResult res;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::invalid_argument("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    ConceptEditSample s;
    s.id = "jsonl-" + std::to_string(line_no);
    s.concept_name = require_string(j, "concept", line_no);
    s.feature_star = require_string(j, "feature_star", line_no);
    s.target_word = require_string(j, "target_word", line_no);
    auto read_refs = [&](const char* name) {
      const json& f = require_field(j, name, line_no);
      if (!f.is_array()) schema_fail(line_no, std::string("field \"") + name + "\" must be a list");
      std::vector<ConceptFeatureRef> refs;
      for (const auto& e : f) {
        if (!e.is_object() || !e.contains("feature") || !e.contains("p_h"))
          schema_fail(line_no, std::string("entries of \"") + name + "\" need feature and p_h");
        ConceptFeatureRef r;
        r.feature = e.at("feature").get<std::string>();
        r.p_h = e.at("p_h").get<double>();
        r.target_word = concept_target_word(r.feature);
        refs.push_back(std::move(r));
      }
      return refs;
    };
    s.original = read_refs("original");
    s.correlated = read_refs("correlated");
    s.random_features = require_string_list(j, "random", line_no);

    std::vector<std::string> unknown;
    bool ok = tokens_known(vocab, s.concept_name, unknown);
    ok = tokens_known(vocab, s.feature_star, unknown) && ok;
    for (const auto& r : s.original) ok = tokens_known(vocab, r.feature, unknown) && ok;
    for (const auto& r : s.correlated) ok = tokens_known(vocab, r.feature, unknown) && ok;
    for (const auto& f : s.random_features) ok = tokens_known(vocab, f, unknown) && ok;
    if (!ok) {
      std::string reason = "unknown tokens:";
      for (const auto& u : unknown) reason += " '" + u + "'";
      res.rejected.push_back({line_no, reason});
      continue;
    }
    res.samples.push_back(std::move(s));
  }
  return res;
}

// --- world (de)serialization -------------------------------------------------------

void save_world(const SyntheticWorld& w, const std::string& path) {
  json j;
  j["seed"] = w.seed;
  json sz;
  sz["entities"] = w.sizes.entities;
  sz["relations"] = w.sizes.relations;
  sz["relations_per_entity"] = w.sizes.relations_per_entity;
  sz["occupations"] = w.sizes.occupations;
  sz["concepts"] = w.sizes.concepts;
  sz["features"] = w.sizes.features;
  sz["themes"] = w.sizes.themes;
  sz["raters"] = w.sizes.raters;
  sz["bios_per_eval_entity"] = w.sizes.bios_per_eval_entity;
  sz["filler_entities"] = w.sizes.filler_entities;
  sz["filler_bios_pairs"] = w.sizes.filler_bios_pairs;
  sz["echo_fraction"] = w.sizes.echo_fraction;
  sz["templates_per_fact"] = w.sizes.templates_per_fact;
  sz["reps_per_template"] = w.sizes.reps_per_template;
  sz["max_sentence_tokens"] = w.sizes.max_sentence_tokens;
  sz["known_entity_fraction"] = w.sizes.known_entity_fraction;
  j["sizes"] = sz;
  json ents = json::array();
  for (const auto& e : w.entities) {
    json je;
    je["name"] = e.name;
    je["occupation"] = e.occupation;
    je["occupation_in_corpus"] = e.occupation_in_corpus;
    json facts = json::object();
    for (const auto& [r, o] : e.facts) facts[std::to_string(r)] = o;
    je["facts"] = facts;
    ents.push_back(je);
  }
  j["entities"] = ents;
  j["filler_names"] = w.filler_names;
  json rels = json::array();
  for (const auto& r : w.relations)
    rels.push_back(
        {{"name", r.name}, {"candidates", r.candidates}, {"assigned_candidates", r.assigned_candidates}});
  j["relations"] = rels;
  j["occupations"] = w.occupations;
  j["occupation_keywords"] = w.occupation_keywords;
  j["shared_keywords"] = w.shared_keywords;
  json cons = json::array();
  for (const auto& c : w.concepts) {
    json jc;
    jc["name"] = c.name;
    json feats = json::object();
    for (const auto& [f, k] : c.features) feats[std::to_string(f)] = k;
    jc["features"] = feats;
    cons.push_back(jc);
  }
  j["concepts"] = cons;
  json feats = json::array();
  for (const auto& f : w.features)
    feats.push_back({{"text", f.text}, {"target_word", f.target_word}, {"theme", f.theme}});
  j["features"] = feats;
  j["vocab"] = w.vocab.tokens;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(1) << "\n";
}

SyntheticWorld load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  json j = json::parse(in);
  SyntheticWorld w;
  w.seed = j.at("seed").get<uint64_t>();
  const json& sz = j.at("sizes");
  w.sizes.entities = sz.at("entities").get<int>();
  w.sizes.relations = sz.at("relations").get<int>();
  w.sizes.relations_per_entity = sz.at("relations_per_entity").get<int>();
  w.sizes.occupations = sz.at("occupations").get<int>();
  w.sizes.concepts = sz.at("concepts").get<int>();
  w.sizes.features = sz.at("features").get<int>();
  w.sizes.themes = sz.at("themes").get<int>();
  w.sizes.raters = sz.at("raters").get<int>();
  w.sizes.bios_per_eval_entity = sz.at("bios_per_eval_entity").get<int>();
  w.sizes.filler_entities = sz.at("filler_entities").get<int>();
  w.sizes.filler_bios_pairs = sz.at("filler_bios_pairs").get<int>();
  w.sizes.echo_fraction = sz.at("echo_fraction").get<double>();
  w.sizes.templates_per_fact = sz.at("templates_per_fact").get<int>();
  w.sizes.reps_per_template = sz.at("reps_per_template").get<int>();
  w.sizes.max_sentence_tokens = sz.at("max_sentence_tokens").get<int>();
  w.sizes.known_entity_fraction = sz.at("known_entity_fraction").get<double>();
  for (const auto& je : j.at("entities")) {
    Entity e;
    e.name = je.at("name").get<std::string>();
    e.occupation = je.at("occupation").get<int>();
    e.occupation_in_corpus = je.at("occupation_in_corpus").get<bool>();
    for (const auto& [k, v] : je.at("facts").items()) e.facts[std::stoi(k)] = v.get<int>();
    w.entities.push_back(std::move(e));
  }
  w.filler_names = j.at("filler_names").get<std::vector<std::string>>();
  for (const auto& jr : j.at("relations")) {
    Relation r;
    r.name = jr.at("name").get<std::string>();
    r.candidates = jr.at("candidates").get<std::vector<std::string>>();
    r.assigned_candidates = jr.at("assigned_candidates").get<int>();
    w.relations.push_back(std::move(r));
  }
  w.occupations = j.at("occupations").get<std::vector<std::string>>();
  w.occupation_keywords = j.at("occupation_keywords").get<std::vector<std::vector<std::string>>>();
  w.shared_keywords = j.at("shared_keywords").get<std::vector<std::string>>();
  for (const auto& jc : j.at("concepts")) {
    Concept c;
    c.name = jc.at("name").get<std::string>();
    for (const auto& [k, v] : jc.at("features").items()) c.features[std::stoi(k)] = v.get<int>();
    w.concepts.push_back(std::move(c));
  }
  for (const auto& jf : j.at("features")) {
    ConceptFeature f;
    f.text = jf.at("text").get<std::string>();
    f.target_word = jf.at("target_word").get<std::string>();
    f.theme = jf.at("theme").get<int>();
    w.features.push_back(std::move(f));
  }
  std::vector<std::string> toks = j.at("vocab").get<std::vector<std::string>>();
  w.vocab.tokens = toks;
  for (size_t i = 0; i < toks.size(); ++i) w.vocab.token_ids.emplace(toks[i], static_cast<int>(i));
  return w;
}

}  // namespace remedi
