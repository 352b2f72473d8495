#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "remedi/world.hpp"

using namespace remedi;

namespace {

WorldSizes small_sizes() {
  WorldSizes s;
  s.entities = 24;
  s.relations = 4;
  s.relations_per_entity = 3;
  s.occupations = 6;
  s.concepts = 10;
  s.features = 24;
  s.themes = 4;
  s.bios_per_eval_entity = 4;
  s.filler_entities = 6;
  s.filler_bios_pairs = 20;
  return s;
}

}  // namespace

TEST_CASE("build_world is deterministic and honors sizes") {
  SyntheticWorld a = build_world(7);
  SyntheticWorld b = build_world(7);
  CHECK(a == b);
  CHECK(static_cast<int>(a.occupations.size()) == 28);
  CHECK(static_cast<int>(a.entities.size()) == 200);
  CHECK(static_cast<int>(a.relations.size()) == 12);
  SyntheticWorld c = build_world(8);
  CHECK_FALSE(a == c);
}

TEST_CASE("every generated fact's object lies in its relation's candidate set") {
  SyntheticWorld w = build_world(3, small_sizes());
  for (const auto& ent : w.entities) {
    for (const auto& [r, obj] : ent.facts) {
      const Relation& rel = w.relations[static_cast<size_t>(r)];
      CHECK(obj >= 0);
      CHECK(obj < static_cast<int>(rel.candidates.size()));
      CHECK(obj < rel.assigned_candidates);
    }
  }
  for (const auto& rel : w.relations) {
    CHECK(static_cast<int>(rel.candidates.size()) >= 8);
    CHECK(static_cast<int>(rel.candidates.size()) <= 28);
  }
}

TEST_CASE("corpus counting: one fact, three templates, five reps -> 15 sentences") {
  WorldSizes s;
  s.entities = 1;
  s.relations = 1;
  s.relations_per_entity = 1;
  s.occupations = 0;
  s.concepts = 0;
  s.features = 0;
  s.themes = 0;
  s.filler_bios_pairs = 0;
  s.echo_fraction = 0.0;
  SyntheticWorld w = build_world(5, s);
  auto corpus = render_corpus(w, 5);
  CHECK(corpus.size() == 15);
}

TEST_CASE("corpus tokenizes without unknowns and is deterministic under seed") {
  SyntheticWorld w = build_world(11, small_sizes());
  auto c1 = render_corpus(w, 4);
  auto c2 = render_corpus(w, 4);
  CHECK(c1 == c2);
  auto c3 = render_corpus(w, 5);
  CHECK_FALSE(c1 == c3);
  for (const auto& sent : c1)
    for (int tok : sent) CHECK(tok != w.vocab.unk_id);
}

TEST_CASE("co-occurrence matches the hand-evaluated two-concept example") {
  SyntheticWorld w;
  w.sizes.raters = 30;
  w.features.push_back({"is made of alpha", "alpha", 0});
  w.features.push_back({"is made of beta", "beta", 0});
  Concept c1;
  c1.name = "c1";
  c1.features[0] = 15;  // p(f1|c1) = 0.5
  c1.features[1] = 12;  // p(f2|c1) = 0.4
  Concept c2;
  c2.name = "c2";
  c2.features[1] = 27;  // p(f2|c2) = 0.9, p(f1|c2) = 0
  w.concepts = {c1, c2};
  CHECK(cooccurrence(w, 0, 1) == doctest::Approx(0.2).epsilon(1e-15));

  // self-co-occurrence with a single fully-produced concept
  SyntheticWorld w2;
  w2.sizes.raters = 30;
  w2.features.push_back({"is made of gamma", "gamma", 0});
  Concept c3;
  c3.name = "c3";
  c3.features[0] = 30;
  w2.concepts = {c3};
  CHECK(cooccurrence(w2, 0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  // a feature produced nowhere has undefined co-occurrence
  SyntheticWorld w3 = w;
  w3.features.push_back({"is made of delta", "delta", 0});
  CHECK_THROWS_AS(cooccurrence(w3, 2, 0), std::domain_error);
}

TEST_CASE("co-occurrence equals brute-force summation on every queryable pair") {
  SyntheticWorld w = build_world(13, small_sizes());
  int nf = static_cast<int>(w.features.size());
  for (int f1 = 0; f1 < nf; ++f1) {
    long double n = 0.0L;
    for (const auto& con : w.concepts)
      if (con.features.count(f1) && con.features.at(f1) > 0) n += 1.0L;
    if (n == 0.0L) continue;
    for (int f2 = 0; f2 < nf; ++f2) {
      long double total = 0.0L;
      for (const auto& con : w.concepts) {
        auto i1 = con.features.find(f1);
        auto i2 = con.features.find(f2);
        if (i1 == con.features.end() || i1->second == 0 || i2 == con.features.end()) continue;
        total += (static_cast<long double>(i1->second) / w.sizes.raters) *
                 (static_cast<long double>(i2->second) / w.sizes.raters);
      }
      double expect = static_cast<double>(total / n);
      double got = cooccurrence(w, f1, f2);
      CHECK(std::abs(got - expect) <= 1e-12);
      CHECK(got >= 0.0);
      CHECK(got <= 1.0);
    }
  }
}

TEST_CASE("counterfact samples satisfy the constructive invariants") {
  SyntheticWorld w = build_world(17);
  auto samples = make_counterfact_samples(w, 17, 1000);
  CHECK(static_cast<int>(samples.size()) == 1000);
  std::set<std::string> train_keys, heldout_keys;
  for (const auto& s : samples) {
    int e = w.entity_id(s.entity);
    REQUIRE(s.target_unmediated.has_value());
    CHECK(s.target_mediated != *s.target_unmediated);
    bool found_rel = false;
    for (const auto& [r, obj] : w.entities[static_cast<size_t>(e)].facts) {
      const Relation& rel = w.relations[static_cast<size_t>(r)];
      if (rel.candidates[static_cast<size_t>(obj)] == *s.target_unmediated &&
          s.prompt == s.entity + " " + rel.name) {
        found_rel = true;
        bool tgt_in = false;
        for (const auto& c : rel.candidates) tgt_in |= (c == s.target_mediated);
        CHECK(tgt_in);
      }
    }
    CHECK(found_rel);
    CHECK(s.paraphrase_prompts.size() >= 2);
    CHECK(s.neighborhood_prompts.size() >= 5);
    for (const auto& np : s.neighborhood_prompts) {
      for (const auto& wtok : split_words(np)) CHECK(wtok != s.entity);
    }
    (s.split == "train" ? train_keys : heldout_keys).insert(s.id);
  }
  for (const auto& k : train_keys) CHECK(heldout_keys.count(k) == 0);
  CHECK(train_keys.size() == 500);
  CHECK(heldout_keys.size() == 500);

  CHECK_THROWS_AS(make_counterfact_samples(w, 1, 100000), std::invalid_argument);
}

TEST_CASE("bios samples satisfy the constructive invariants") {
  SyntheticWorld w = build_world(19);
  auto samples = make_bios_samples(w, 19, 600);
  CHECK(static_cast<int>(samples.size()) == 600);
  std::set<std::string> train_entities, heldout_entities;
  for (const auto& s : samples) {
    auto toks = split_words(s.prompt);
    REQUIRE(toks.size() == 5);
    CHECK(toks[0] == s.entity);
    CHECK(toks[1] == "has");
    CHECK(toks[2] == "the");
    CHECK(toks[3] == "occupation");
    CHECK(toks[4] == "of");
    int mentions = 0;
    for (const auto& wtok : split_words(s.context)) mentions += (wtok == s.entity);
    CHECK(mentions == 1);
    CHECK_FALSE(s.target_unmediated.has_value());
    bool occ = false;
    for (const auto& o : w.occupations) occ |= (o == s.target_mediated);
    CHECK(occ);
    (s.split == "train" ? train_entities : heldout_entities).insert(s.entity);
  }
  for (const auto& e : train_entities) CHECK(heldout_entities.count(e) == 0);
}

TEST_CASE("concept samples respect the co-occurrence filter and controls") {
  SyntheticWorld w = build_world(23);
  auto samples = make_concept_samples(w, 23, 300);
  CHECK(static_cast<int>(samples.size()) == 300);
  for (const auto& s : samples) {
    int fstar = w.feature_id(s.feature_star);
    const Concept* con = nullptr;
    for (const auto& c : w.concepts)
      if (c.name == s.concept_name) con = &c;
    REQUIRE(con != nullptr);
    CHECK(con->features.count(fstar) == 0);
    for (const auto& corr : s.correlated) {
      int f = w.feature_id(corr.feature);
      CHECK(cooccurrence(w, fstar, f) > 0.1);
      CHECK(con->features.count(f) == 0);
      CHECK(corr.p_h == doctest::Approx(cooccurrence(w, fstar, f)));
    }
    for (const auto& rf : s.random_features) {
      int f = w.feature_id(rf);
      CHECK(cooccurrence(w, fstar, f) == 0.0);
    }
    CHECK(s.target_word == concept_target_word(s.feature_star));
  }
  CHECK_THROWS_AS(make_concept_samples(w, 1, 10000000), std::invalid_argument);
}

TEST_CASE("target-word heuristic follows the reference examples") {
  CHECK(concept_target_word("used for eating") == "eating");
  CHECK(concept_target_word("grows on trees") == "grows");
  CHECK(concept_target_word("is made of metal") == "metal");

  FeaturePrompt a = feature_prompt("olive", "is made of metal");
  CHECK(a.prompt == "olive is made of");
  CHECK(a.target_word == "metal");
  FeaturePrompt b = feature_prompt("olive", "grows on trees");
  CHECK(b.prompt == "olive");
  CHECK(b.target_word == "grows");
}

TEST_CASE("edit JSONL round trip and error paths") {
  SyntheticWorld w = build_world(29, small_sizes());
  auto samples = make_counterfact_samples(w, 29, 20);
  std::string path = "/tmp/remedi_test_edit.jsonl";
  emit_edit_jsonl(samples, path);
  EditLoadResult res = load_edit_jsonl(path, w.vocab);
  CHECK(res.rejected.empty());
  REQUIRE(res.samples.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) CHECK(schema_equal(res.samples[i], samples[i]));

  // one record with an out-of-vocabulary token is rejected with a report
  {
    std::ofstream out(path, std::ios::app);
    out << R"({"context":"","prompt":"zzunknownzz word","entity":"word","entity_index":1,)"
        << R"("attribute":"a","target_mediated":"b","target_unmediated":null,)"
        << R"("paraphrase_prompts":[],"neighborhood_prompts":[]})"
        << "\n";
  }
  EditLoadResult res2 = load_edit_jsonl(path, w.vocab);
  CHECK(res2.samples.size() == samples.size());
  REQUIRE(res2.rejected.size() == 1);
  CHECK(res2.rejected[0].line == static_cast<int>(samples.size()) + 1);
  CHECK(res2.rejected[0].reason.find("zzunknownzz") != std::string::npos);

  // missing field names the field and line
  {
    std::ofstream out(path, std::ios::trunc);
    out << R"({"context":"","prompt":"x"})"
        << "\n";
  }
  CHECK_THROWS_WITH_AS(load_edit_jsonl(path, w.vocab), doctest::Contains("entity"), std::invalid_argument);

  // malformed JSON names the line
  {
    std::ofstream out(path, std::ios::trunc);
    out << "{not json}\n";
  }
  CHECK_THROWS_WITH_AS(load_edit_jsonl(path, w.vocab), doctest::Contains("line 1"), std::invalid_argument);
  std::remove(path.c_str());
}

TEST_CASE("concept JSONL round trip") {
  SyntheticWorld w = build_world(31);
  auto samples = make_concept_samples(w, 31, 40);
  std::string path = "/tmp/remedi_test_concept.jsonl";
  emit_concept_jsonl(samples, path);
  ConceptLoadResult res = load_concept_jsonl(path, w.vocab);
  CHECK(res.rejected.empty());
  REQUIRE(res.samples.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) CHECK(schema_equal(res.samples[i], samples[i]));
  std::remove(path.c_str());
}

TEST_CASE("world JSON round trip preserves deep equality") {
  SyntheticWorld w = build_world(37, small_sizes());
  std::string path = "/tmp/remedi_test_world.json";
  save_world(w, path);
  SyntheticWorld back = load_world(path);
  CHECK(back == w);
  std::remove(path.c_str());
}

TEST_CASE("prior attribute text swaps the mediated target") {
  SyntheticWorld w = build_world(41, small_sizes());
  auto samples = make_counterfact_samples(w, 41, 5);
  for (const auto& s : samples) {
    std::string prior = prior_attribute_text(s);
    auto ws = split_words(prior);
    CHECK(ws.back() == *s.target_unmediated);
  }
}
