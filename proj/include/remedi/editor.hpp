#pragma once

#include <optional>
#include <string>
#include <vector>

#include "remedi/lm.hpp"
#include "remedi/world.hpp"

namespace remedi {

enum class LossForm { Probability, LogProbability };

std::string loss_form_name(LossForm form);
LossForm loss_form_from_name(const std::string& name);

// The learned affine edit z = h_entity + W h_attr + b, applied at one layer.
struct Editor {
  Tensor W;  // [d_model x d_model]
  Tensor b;  // [d_model]
  int layer = 1;
  LossForm loss_form = LossForm::Probability;

  static Editor zero_init(int d_model, int layer, LossForm form = LossForm::Probability);
  void validate_for(const LMConfig& cfg) const;
  uint64_t checksum() const;
};

void save_editor(const Editor& editor, const std::string& path);
Editor load_editor(const std::string& path, uint64_t expected_vocab_hash = 0);

struct AttributeEncoding {
  Tensor vector;  // [d_model]
  int span_begin = 0;
  int span_end = 0;  // token range of the attribute within the encoding text
  int layer = 0;
};

// Token index of the last token of the entity's last mention; -1 if absent.
int entity_position(const Vocab& vocab, const std::vector<int>& tokens, const std::string& entity);

// Mean hidden state over the attribute span of "<entity> <attribute>".
AttributeEncoding encode_attribute(const TransformerLM& lm, const Vocab& vocab,
                                   const EditSample& sample, int layer);

// Hidden state at (layer, entity position) from the unedited forward pass over
// the sample's prompt; the context is prepended across a blank line on request.
Tensor entity_rep(const TransformerLM& lm, const Vocab& vocab, const EditSample& sample, int layer,
                  bool with_context = false);

// z = h_entity + W h_attr + b
Tensor apply_edit(const Editor& editor, const Tensor& h_entity, const Tensor& h_attr);
// Same, on a graph, so gradients reach W and b.
Tensor apply_edit(Graph& g, const Editor& editor, const Tensor& h_entity, const Tensor& h_attr);

// Cached unedited state of one prompt, reused across editor updates.
struct PromptState {
  std::vector<int> tokens;
  int entity_pos = -1;
  Tensor hidden_at_layer;       // [n x d_model] residual stream at the edit layer
  Tensor h_entity;              // [d_model]
  std::vector<Tensor> kl_refs;  // unedited next-token distributions between entity and target
  Tensor last_dist;             // unedited next-token distribution at the final position
};

PromptState prompt_state(const TransformerLM& lm, const Vocab& vocab, const std::string& prompt_text,
                         const std::string& entity, int layer);

struct ObjectiveValue {
  Tensor total;  // scalar on the graph; differentiable in W and b only
  double l_target = 0.0;
  double l_prior = 0.0;
  double l_kl = 0.0;
};

struct EditTrainConfig {
  int layer = 1;
  double lambda1 = 1.0;
  double lambda2 = 10.0;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int max_epochs = 20;
  int patience = 2;
  int batch_size = 16;
  double validation_fraction = 0.1;
  LossForm loss_form = LossForm::Probability;
  bool multi_token_targets = false;  // summed teacher-forced log-scores
  uint64_t seed = 0;

  void validate() const;
};

ObjectiveValue objective(const TransformerLM& lm, const Vocab& vocab, const Editor& editor,
                         const EditSample& sample, double lambda1, double lambda2, Graph& g,
                         bool multi_token_targets = false);

// Same objective against a precomputed PromptState (training fast path).
ObjectiveValue objective_cached(const TransformerLM& lm, const Vocab& vocab, const Editor& editor,
                                const PromptState& state, const Tensor& h_attr,
                                const EditSample& sample, double lambda1, double lambda2, Graph& g,
                                bool multi_token_targets = false);

struct EditorTrainResult {
  Editor editor;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = 0;
  int epochs_run = 0;
};

EditorTrainResult train_editor(const TransformerLM& lm, const Vocab& vocab,
                               const std::vector<EditSample>& samples, const EditTrainConfig& cfg);

// Edited next-token distribution for an arbitrary prompt; no intervention when
// the prompt does not mention the entity.
Tensor edited_next_distribution(const TransformerLM& lm, const Editor& editor, const Vocab& vocab,
                                const std::string& prompt_text, const std::string& entity,
                                const Tensor& h_attr);

struct EditedGeneration {
  GenerationResult edited;
  GenerationResult unedited;
  std::vector<Tensor> edited_dists;    // per decoding step
  std::vector<Tensor> unedited_dists;
  Tensor z;
  int entity_pos = -1;  // -1: prompt does not mention the entity, no intervention
};

EditedGeneration edited_generate(const TransformerLM& lm, const Editor& editor, const Vocab& vocab,
                                 const EditSample& sample, const GenerationParams& params,
                                 const std::string* prompt_override = nullptr);

}  // namespace remedi
