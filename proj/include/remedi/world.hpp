#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "remedi/rng.hpp"

namespace remedi {

// Word-level closed vocabulary. Ids are contiguous from 0 with the reserved
// tokens first; '\n' counts as its own token.
struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> token_ids;
  int pad_id = 0;
  int unk_id = 1;
  int newline_id = 2;

  static Vocab build(std::vector<std::string> words);

  int size() const { return static_cast<int>(tokens.size()); }
  bool contains(const std::string& tok) const { return token_ids.count(tok) > 0; }
  int id(const std::string& tok) const;
  const std::string& token(int id) const;

  // Throws listing the unknown token unless collect_unknown is given, in
  // which case unknowns map to unk_id and are reported there.
  std::vector<int> encode(const std::string& text,
                          std::vector<std::string>* collect_unknown = nullptr) const;
  std::string decode(const std::vector<int>& ids) const;
  uint64_t hash() const;

  bool operator==(const Vocab&) const = default;
};

std::vector<std::string> split_words(const std::string& text);

struct Entity {
  std::string name;
  int occupation = -1;
  bool occupation_in_corpus = false;  // false for the bios evaluation pool
  std::map<int, int> facts;           // relation id -> candidate index

  bool operator==(const Entity&) const = default;
};

struct Relation {
  std::string name;                      // single token
  std::vector<std::string> candidates;   // 8..28 single-token objects
  int assigned_candidates = 0;           // prefix of candidates used for true facts

  bool operator==(const Relation&) const = default;
};

struct ConceptFeature {
  std::string text;         // e.g. "is made of vrelt" or "plome on trees"
  std::string target_word;  // per the non-leading heuristic
  int theme = 0;

  bool operator==(const ConceptFeature&) const = default;
};

struct Concept {
  std::string name;
  std::map<int, int> features;  // feature id -> production count out of `raters`

  bool operator==(const Concept&) const = default;
};

struct WorldSizes {
  int entities = 200;
  int relations = 12;
  int relations_per_entity = 6;
  int occupations = 28;
  int concepts = 60;
  int features = 120;
  int themes = 12;
  int raters = 30;  // denominator of p(f|c)
  int bios_per_eval_entity = 10;
  int filler_entities = 40;
  int filler_bios_pairs = 400;
  double echo_fraction = 0.5;  // context-echo items per relation-fact count
  int templates_per_fact = 3;
  int reps_per_template = 5;
  int max_sentence_tokens = 24;
  double known_entity_fraction = 0.5;

  void validate() const;
  bool operator==(const WorldSizes&) const = default;
};

struct SyntheticWorld {
  WorldSizes sizes;
  uint64_t seed = 0;
  std::vector<Entity> entities;
  std::vector<std::string> filler_names;
  std::vector<Relation> relations;
  std::vector<std::string> occupations;
  std::vector<std::vector<std::string>> occupation_keywords;  // per occupation
  std::vector<std::string> shared_keywords;
  std::vector<Concept> concepts;
  std::vector<ConceptFeature> features;
  Vocab vocab;

  bool operator==(const SyntheticWorld&) const = default;

  int entity_id(const std::string& name) const;
  int relation_id(const std::string& name) const;
  int feature_id(const std::string& text) const;
};

SyntheticWorld build_world(uint64_t seed, const WorldSizes& sizes = {});

// One training/eval record for the editor.
struct EditSample {
  std::string id;
  std::string context;  // empty when the sample has no textual context
  std::string prompt;   // primary prompt; the target is scored right after it
  std::string entity;
  int entity_index = 0;  // token index of the entity's last mention in prompt
  std::string attribute;
  std::string target_mediated;
  std::optional<std::string> target_unmediated;
  std::vector<std::string> paraphrase_prompts;
  std::vector<std::string> neighborhood_prompts;
  std::string split;  // "train" | "heldout"
};

bool schema_equal(const EditSample& a, const EditSample& b);

// Attribute text describing the pre-edit fact (t_prior in place of t_tgt);
// derivable only when the attribute ends with the mediated target.
std::string prior_attribute_text(const EditSample& s);

struct ConceptFeatureRef {
  std::string feature;
  double p_h = 0.0;
  std::string target_word;
};

struct ConceptEditSample {
  std::string id;
  std::string concept_name;
  std::string feature_star;
  std::string target_word;  // target word of feature_star
  std::vector<ConceptFeatureRef> original;
  std::vector<ConceptFeatureRef> correlated;
  std::vector<std::string> random_features;
  std::string split;
};

bool schema_equal(const ConceptEditSample& a, const ConceptEditSample& b);

// Full rendered training corpus: token sequences (multi-sentence items keep
// internal newline tokens), deterministically shuffled.
std::vector<std::vector<int>> render_corpus(const SyntheticWorld& world, uint64_t seed);

// Single-valued facts the corpus teaches, used by the competence gate.
struct TrainingFact {
  std::string prompt;
  std::string object;
};
std::vector<TrainingFact> training_facts(const SyntheticWorld& world);

std::vector<EditSample> make_counterfact_samples(const SyntheticWorld& world, uint64_t seed, int n);
std::vector<EditSample> make_bios_samples(const SyntheticWorld& world, uint64_t seed, int n);
std::vector<ConceptEditSample> make_concept_samples(const SyntheticWorld& world, uint64_t seed, int n);

// p(f2 | f1) estimated from production probabilities over concepts.
double cooccurrence(const SyntheticWorld& world, int f1, int f2);

// The "not leading" target-word rule: features opening with a copular or
// participial word score their last token, plain-verb features their first.
std::string concept_target_word(const std::string& feature_text);

// Feature prompt about a concept: tokens before the target word plus the
// expected target token.
struct FeaturePrompt {
  std::string prompt;       // text ending right before the target word
  std::string target_word;
};
FeaturePrompt feature_prompt(const std::string& concept_name, const std::string& feature_text);

// --- JSONL ingestion/emission ---------------------------------------------

struct RejectedRecord {
  int line = 0;
  std::string reason;
};

struct EditLoadResult {
  std::vector<EditSample> samples;
  std::vector<RejectedRecord> rejected;
};

struct ConceptLoadResult {
  std::vector<ConceptEditSample> samples;
  std::vector<RejectedRecord> rejected;
};

void emit_edit_jsonl(const std::vector<EditSample>& samples, const std::string& path);
EditLoadResult load_edit_jsonl(const std::string& path, const Vocab& vocab);
void emit_concept_jsonl(const std::vector<ConceptEditSample>& samples, const std::string& path);
ConceptLoadResult load_concept_jsonl(const std::string& path, const Vocab& vocab);

void save_world(const SyntheticWorld& world, const std::string& path);
SyntheticWorld load_world(const std::string& path);

}  // namespace remedi
