#pragma once

#include <optional>
#include <string>
#include <vector>

#include "remedi/editor.hpp"

namespace remedi {

enum class DirectionProvenance { Remedi, Identity, FactProbe, Shortcut };
enum class ProbeCondition { Prior, Contextual };

std::string provenance_name(DirectionProvenance p);
std::string condition_name(ProbeCondition c);

struct AttributeDirection {
  Tensor d;  // [d_model]
  DirectionProvenance provenance = DirectionProvenance::Remedi;
  int layer = 0;
};

// d_attr = F(0, h_attr) = W h_attr + b
AttributeDirection attr_direction(const Editor& editor, const Tensor& h_attr);

double belief_score(const Tensor& h_entity, const AttributeDirection& d);

struct ErrorPrediction {
  bool error = false;
  double margin = 0.0;  // attribute score minus best distractor score
};

// Error iff some distractor outscores the attribute; exact ties predict no error.
ErrorPrediction predict_error(const Tensor& h_entity, const AttributeDirection& d_attr,
                              const std::vector<AttributeDirection>& distractors);

// Bilinear attribute classifier sigma(h_e^T W h_a + b).
struct FactProbe {
  Tensor W;  // [d x d]
  double bias = 0.0;
  std::string training_target;  // "ground_truth" | "model_prediction"
  int entity_layer = 0;
  int attr_layer = 0;
};

struct FactProbeTrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int max_epochs = 20;
  int patience = 2;
  int batch_size = 16;
  double validation_fraction = 0.1;
  uint64_t seed = 0;
};

enum class ProbeTarget { GroundTruth, ModelPrediction };

FactProbe train_fact_probe(const TransformerLM& lm, const Vocab& vocab,
                           const std::vector<EditSample>& samples, ProbeTarget target,
                           int entity_layer, int attr_layer, const FactProbeTrainConfig& cfg);

// Pre-built (h_entity, h_attr, label) pairs; used directly by tests.
struct ProbePair {
  Tensor h_entity;
  Tensor h_attr;
  bool label = false;
};
FactProbe train_fact_probe_pairs(const std::vector<ProbePair>& pairs, const std::string& target_name,
                                 const FactProbeTrainConfig& cfg);
double fact_probe_score(const FactProbe& probe, const Tensor& h_entity, const Tensor& h_attr);

struct ProbeReport {
  std::string method;
  std::string condition;
  int tp = 0, fp = 0, tn = 0, fn = 0;
  double f1 = 0.0;
  double phi = 0.0;
  int entity_layer = 0;
  uint64_t seed = 0;
  bool control = false;
  std::vector<std::string> sample_ids;
  std::vector<bool> predicted;
  std::vector<bool> actual;
};

double f1_score(int tp, int fp, int fn);
// Matthews coefficient; 0 when any marginal factor vanishes.
double phi_coefficient(int tp, int fp, int tn, int fn);
ProbeReport score_predictions(const std::vector<bool>& predicted, const std::vector<bool>& actual);

// The model's own behavior on one sample. Positive class ("error"): in the
// prior condition the model fails to rank the true object first; in the
// contextual condition it ignores the new information prepended to the prompt.
struct BehaviorLabel {
  bool error = false;
  double p_true = 0.0;
  double p_alt = 0.0;
};
std::string contextual_prompt(const EditSample& sample);
BehaviorLabel model_behavior(const TransformerLM& lm, const Vocab& vocab, const EditSample& sample,
                             ProbeCondition condition);

enum class ProbeMethod { Remedi, Identity, FactProbe, Shortcut };

struct ProbeEvalConfig {
  int entity_layer = -1;  // -1: sweep on the train split for best F1
  int k_distractors = 1;  // extra distractors drawn from the relation's candidates
  const SyntheticWorld* world = nullptr;  // needed when k_distractors > 1
  uint64_t seed = 0;
};

// Evaluates one probing method on eval_samples. The editor supplies REMEDI
// directions (and the attribute layer for probe baselines); train_samples are
// used only for layer selection and probe training.
ProbeReport evaluate_probe(const TransformerLM& lm, const Vocab& vocab, const Editor& editor,
                           ProbeMethod method, const std::vector<EditSample>& train_samples,
                           const std::vector<EditSample>& eval_samples, ProbeCondition condition,
                           const ProbeEvalConfig& cfg);

// Untrained LM of the same configuration (fresh seed), an editor trained on
// it, and the probe evaluation run against its own behavior.
struct RandomModelControl {
  ProbeReport report;
  uint64_t control_checksum = 0;
  uint64_t trained_checksum = 0;
};
RandomModelControl random_model_control(const TransformerLM& trained_lm, const Vocab& vocab,
                                        const std::vector<EditSample>& train_samples,
                                        const std::vector<EditSample>& eval_samples,
                                        const EditTrainConfig& editor_cfg, ProbeCondition condition,
                                        const ProbeEvalConfig& cfg);

// Supervised skyline: logistic classifier on h_entity with true error labels.
struct SupervisedSkyline {
  Tensor w;  // [d]
  double bias = 0.0;
  int entity_layer = 0;
};
struct SkylineResult {
  SupervisedSkyline classifier;
  ProbeReport report;  // marked non-comparable by method name
};
SkylineResult train_supervised_skyline(const TransformerLM& lm, const Vocab& vocab,
                                       const std::vector<EditSample>& train_samples,
                                       const std::vector<EditSample>& eval_samples,
                                       ProbeCondition condition, const ProbeEvalConfig& cfg);

}  // namespace remedi
