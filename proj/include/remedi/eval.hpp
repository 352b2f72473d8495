#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "remedi/editor.hpp"
#include "remedi/probe.hpp"

namespace remedi {

enum class EditMethod { LmOnly, Prefix, Replace, Remedi };
std::string method_name(EditMethod m);
EditMethod method_from_name(const std::string& name);

// --- text statistics ---------------------------------------------------------

// tf-idf with raw term counts and add-one smoothed idf over the given corpus:
// idf(t) = ln((1 + N) / (1 + df(t))) + 1.
struct TfIdf {
  std::map<std::string, double> idf;
  int n_docs = 0;

  static TfIdf fit(const std::vector<std::vector<std::string>>& docs);
  std::map<std::string, double> vectorize(const std::vector<std::string>& doc) const;
  static double cosine(const std::map<std::string, double>& a, const std::map<std::string, double>& b);
};

double tfidf_cosine(const std::vector<std::string>& a, const std::vector<std::string>& b,
                    const std::vector<std::vector<std::string>>& corpus);

// 100 x mean of bigram and trigram Shannon entropies (natural log); texts
// shorter than 3 tokens are excluded by the caller.
double ngram_entropy_score(const std::vector<std::string>& tokens);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

// --- editing metrics -----------------------------------------------------------

struct SampleRow {
  std::string id;
  std::optional<double> efficacy;
  std::optional<double> neighborhood;
  std::optional<double> consistency;
  std::optional<double> fluency;
  std::optional<double> essence;
  bool attribute_seen = false;
  bool model_knows = false;
};

struct EditReport {
  std::string method;
  std::string task;
  uint64_t seed = 0;
  double efficacy = 0.0;
  double neighborhood = 0.0;
  double consistency = 0.0;
  double fluency = 0.0;
  double essence = 0.0;
  std::vector<SampleRow> rows;
  std::vector<std::string> warnings;
};

struct EvalConfig {
  EditMethod method = EditMethod::Remedi;
  int max_new_tokens = 12;
  uint64_t seed = 0;
  // attributes present in editor training, for the seen/unseen breakdown
  std::vector<std::string> train_attributes;
};

// Per-method prompt transformation. Prompts that do not mention the entity
// pass through untouched (so neighborhood prompts are never altered).
struct MethodRun {
  std::string prompt;           // transformed prompt text
  bool intervene = false;       // REMEDI only
  Tensor z;                     // replacement vector when intervening
  int entity_pos = -1;
};
MethodRun method_prompt(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                        const SyntheticWorld* world, const EditSample& sample, EditMethod method,
                        const std::string& prompt_text, const Tensor* h_attr_cache = nullptr);

double efficacy(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                const SyntheticWorld* world, const std::vector<EditSample>& samples,
                EditMethod method, std::vector<SampleRow>* rows = nullptr);

double neighborhood(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                    const SyntheticWorld* world, const std::vector<EditSample>& samples,
                    EditMethod method, std::vector<SampleRow>* rows = nullptr);

// Full Table-2-style evaluation over held-out samples.
EditReport evaluate_editing(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                            const SyntheticWorld& world, const std::vector<EditSample>& samples,
                            const EvalConfig& cfg);

// --- occupation patching ---------------------------------------------------------

struct OccupationReport {
  std::string method;
  bool in_context = false;
  double accuracy = 0.0;
  double fluency = 0.0;
  int n = 0;
};

OccupationReport occupation_accuracy(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                                     const std::vector<EditSample>& samples,
                                     const std::vector<std::string>& candidates, EditMethod method,
                                     bool in_context, int fluency_new_tokens = 10);

// --- concept edits ---------------------------------------------------------------

struct ConceptClassStats {
  double mean_delta = 0.0;  // x100
  double sd_delta = 0.0;
  double r = 0.0;  // Pearson between post-edit p_LM and p_H (when defined)
  int n = 0;
};

struct ConceptEditReport {
  std::string method;
  uint64_t seed = 0;
  ConceptClassStats correlated;
  ConceptClassStats original;
  ConceptClassStats random;
  // per-sample mean delta per class, for paired comparisons
  std::vector<double> sample_delta_correlated;
  std::vector<double> sample_delta_random;
  std::vector<std::string> sample_ids;
};

ConceptEditReport delta_plm(const TransformerLM& lm, const Editor* editor, const Vocab& vocab,
                            const std::vector<ConceptEditSample>& samples, EditMethod method);

// --- layer sweep / norms ----------------------------------------------------------

struct LayerSweepResult {
  std::string task;
  std::vector<int> layers;
  std::vector<std::map<std::string, double>> metrics;  // raw per-layer metrics
  std::vector<double> harmonic_mean;                   // over min-max normalized metrics
  int selected_layer = 0;
  std::vector<std::string> warnings;
};

struct SweepConfig {
  int subset = 1000;       // editor training subset per layer
  int eval_subset = 200;   // held-out slice for the metrics
  EditTrainConfig editor;  // per-layer training settings (layer field ignored)
  int max_new_tokens = 12;
  uint64_t seed = 0;
};

LayerSweepResult layer_sweep(const TransformerLM& lm, const Vocab& vocab, const SyntheticWorld& world,
                             const std::vector<EditSample>& train_samples,
                             const std::vector<EditSample>& eval_samples,
                             const std::vector<ConceptEditSample>& concept_train,
                             const std::vector<ConceptEditSample>& concept_eval,
                             const std::string& task, const SweepConfig& cfg);

struct NormProfile {
  std::vector<double> pre_norm;   // mean |h_entity| per layer, unedited run
  std::vector<double> post_norm;  // same coordinates under the edit
  std::vector<double> ratio;
};

NormProfile norm_profile(const TransformerLM& lm, const Editor& editor, const Vocab& vocab,
                         const std::vector<EditSample>& samples);

// --- breakdowns -------------------------------------------------------------------

struct BreakdownGroup {
  std::string key_value;
  int n = 0;
  std::map<std::string, double> means;
};

// key is "attribute_seen" or "model_knows"; groups partition the rows.
std::vector<BreakdownGroup> breakdown(const EditReport& report, const std::string& key);

double harmonic_mean_normalized(const std::vector<std::map<std::string, double>>& metric_rows,
                                std::vector<double>* out_hm, std::vector<std::string>* warnings);

}  // namespace remedi
