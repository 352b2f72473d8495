#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "remedi/optimizer.hpp"
#include "remedi/tensor.hpp"

namespace remedi {

struct LMConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq_len = 64;
  double dropout_rate = 0.0;  // training only
  uint64_t seed = 0;
  uint64_t vocab_hash = 0;

  void validate() const;
  int mlp_hidden() const { return 2 * d_model; }
};

// A single hard-coded hidden state: h at (layer, position) becomes
// `replacement` during the forward pass. Layer 0 is the embedding output;
// layer L is the residual stream after block L.
struct Intervention {
  int layer = 0;
  int position = 0;
  Tensor replacement;  // [d_model]
};

struct HiddenStateRecord {
  std::vector<Tensor> layers;  // (n_layers + 1) tensors of [seq_len x d_model]

  int n_layers() const { return static_cast<int>(layers.size()) - 1; }
  int seq_len() const { return layers.empty() ? 0 : layers[0].dim(0); }
  // Snapshot of one position; a fresh [d_model] tensor.
  Tensor at(int layer, int pos) const;
};

struct GenerationParams {
  enum class Strategy { Greedy, Temperature };
  int max_new_tokens = 16;
  Strategy strategy = Strategy::Greedy;
  double temperature = 1.0;
  uint64_t seed = 0;

  void validate() const;
};

struct TransformerLM {
  LMConfig config;
  std::map<std::string, Tensor> params;  // sorted name -> tensor
  int64_t training_step_count = 0;

  static TransformerLM init(const LMConfig& config);

  const Tensor& param(const std::string& name) const;
  void set_params_require_grad(bool on);
  uint64_t param_checksum() const;
};

struct ForwardResult {
  Tensor logits;             // [n x vocab_size]
  HiddenStateRecord hidden;  // populated when record_hidden
};

ForwardResult forward(const TransformerLM& lm, const std::vector<int>& tokens,
                      const std::vector<Intervention>& interventions, Graph& g,
                      bool record_hidden = true);

inline ForwardResult forward(const TransformerLM& lm, const std::vector<int>& tokens,
                             const std::vector<Intervention>& interventions = {}) {
  Graph g(false);
  return forward(lm, tokens, interventions, g);
}

// Training fast path over packed rows [batch x seq_len]; no hooks, no record.
Tensor forward_batch(const TransformerLM& lm, const std::vector<int>& tokens, int batch,
                     int seq_len, Graph& g, Rng* dropout_rng = nullptr);

// Resume the forward pass from a residual-stream tensor at `layer`
// (0 = embedding output). Runs blocks layer+1..L, final norm, unembedding.
Tensor forward_from_layer(const TransformerLM& lm, int layer, const Tensor& hidden, Graph& g);

Tensor next_token_distribution(const TransformerLM& lm, const std::vector<int>& tokens,
                               const std::vector<Intervention>& interventions = {});

struct TrainLMConfig {
  int batch_rows = 16;
  int epochs = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int warmup_steps = 100;
  double final_lr_fraction = 0.1;  // cosine decay floor
  int fill_token = 0;              // separator/padding id used when packing rows
  uint64_t seed = 0;
};

struct LossCurve {
  std::vector<double> epoch_mean;
  std::vector<double> step_loss;
};

// Optional per-epoch observer for train_lm (progress logging, metrics).
using EpochHook = std::function<void(int epoch, double mean_loss)>;

LossCurve train_lm(TransformerLM& lm, const std::vector<std::vector<int>>& corpus,
                   const TrainLMConfig& cfg, const EpochHook& on_epoch = {});

struct GenerationResult {
  std::vector<int> tokens;     // prompt + continuation
  std::vector<int> generated;  // continuation only
};

GenerationResult generate(const TransformerLM& lm, const std::vector<int>& prompt,
                          const GenerationParams& params,
                          const std::vector<Intervention>& interventions = {});

}  // namespace remedi
