#include "remedi/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace remedi {

namespace {
constexpr double kLnEps = 1e-5;

std::string layer_key(int i, const char* suffix) {
  return "blocks." + std::to_string(i) + "." + suffix;
}
}  // namespace

void LMConfig::validate() const {
  if (vocab_size <= 0) throw std::invalid_argument("LMConfig: vocab_size must be positive");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0)
    throw std::invalid_argument("LMConfig: sizes must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("LMConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument("LMConfig: dropout_rate must be in [0, 1)");
}

void GenerationParams::validate() const {
  if (max_new_tokens < 0) throw std::invalid_argument("GenerationParams: max_new_tokens < 0");
  if (strategy == Strategy::Temperature && temperature <= 0.0)
    throw std::invalid_argument("GenerationParams: temperature must be > 0");
}

Tensor HiddenStateRecord::at(int layer, int pos) const {
  if (layer < 0 || layer >= static_cast<int>(layers.size()))
    throw std::out_of_range("hidden record: layer " + std::to_string(layer) + " out of " +
                            std::to_string(layers.size()));
  const Tensor& block = layers[static_cast<size_t>(layer)];
  if (pos < 0 || pos >= block.dim(0))
    throw std::out_of_range("hidden record: position " + std::to_string(pos) + " out of " +
                            std::to_string(block.dim(0)));
  Tensor out = Tensor::zeros({block.dim(1)});
  std::copy_n(block.data() + static_cast<int64_t>(pos) * block.dim(1), block.dim(1), out.data());
  return out;
}

TransformerLM TransformerLM::init(const LMConfig& config) {
  config.validate();
  TransformerLM lm;
  lm.config = config;
  Rng rng(config.seed ^ 0x5eedf00dULL);
  int d = config.d_model, hidden = config.mlp_hidden();
  double base_std = 0.02;
  // residual-projection scaling as in GPT-2 style inits
  double resid_std = base_std / std::sqrt(2.0 * config.n_layers);

  auto put = [&](const std::string& name, Tensor t) { lm.params.emplace(name, std::move(t)); };

  put("tok_emb", Tensor::randn({config.vocab_size, d}, rng, base_std));
  put("pos_emb", Tensor::randn({config.max_seq_len, d}, rng, base_std));
  for (int i = 0; i < config.n_layers; ++i) {
    put(layer_key(i, "ln1.g"), Tensor::full({d}, 1.0));
    put(layer_key(i, "ln1.b"), Tensor::zeros({d}));
    put(layer_key(i, "attn.wq"), Tensor::randn({d, d}, rng, base_std));
    put(layer_key(i, "attn.wk"), Tensor::randn({d, d}, rng, base_std));
    put(layer_key(i, "attn.wv"), Tensor::randn({d, d}, rng, base_std));
    put(layer_key(i, "attn.wo"), Tensor::randn({d, d}, rng, resid_std));
    put(layer_key(i, "attn.bq"), Tensor::zeros({d}));
    put(layer_key(i, "attn.bk"), Tensor::zeros({d}));
    put(layer_key(i, "attn.bv"), Tensor::zeros({d}));
    put(layer_key(i, "attn.bo"), Tensor::zeros({d}));
    put(layer_key(i, "ln2.g"), Tensor::full({d}, 1.0));
    put(layer_key(i, "ln2.b"), Tensor::zeros({d}));
    put(layer_key(i, "mlp.w1"), Tensor::randn({d, hidden}, rng, base_std));
    put(layer_key(i, "mlp.b1"), Tensor::zeros({hidden}));
    put(layer_key(i, "mlp.w2"), Tensor::randn({hidden, d}, rng, resid_std));
    put(layer_key(i, "mlp.b2"), Tensor::zeros({d}));
  }
  put("ln_f.g", Tensor::full({d}, 1.0));
  put("ln_f.b", Tensor::zeros({d}));
  put("unembed", Tensor::randn({d, config.vocab_size}, rng, base_std));
  return lm;
}

const Tensor& TransformerLM::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing LM parameter: " + name);
  return it->second;
}

void TransformerLM::set_params_require_grad(bool on) {
  for (auto& [name, p] : params) p.set_requires_grad(on);
}

uint64_t TransformerLM::param_checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, p] : params) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(p.data(), sizeof(double) * static_cast<size_t>(p.size()), h);
  }
  return h;
}

// --- forward ----------------------------------------------------------------

namespace {

// One pre-norm block applied to x ([rows x d], rows = batch * seq).
Tensor run_block(const TransformerLM& lm, int i, const Tensor& x, int batch, int seq_len,
                 Graph& g, Rng* dropout_rng) {
  const LMConfig& cfg = lm.config;
  Tensor h = layer_norm(g, x, lm.param(layer_key(i, "ln1.g")), lm.param(layer_key(i, "ln1.b")), kLnEps);
  Tensor q = add_rowwise(g, matmul(g, h, lm.param(layer_key(i, "attn.wq"))), lm.param(layer_key(i, "attn.bq")));
  Tensor k = add_rowwise(g, matmul(g, h, lm.param(layer_key(i, "attn.wk"))), lm.param(layer_key(i, "attn.bk")));
  Tensor v = add_rowwise(g, matmul(g, h, lm.param(layer_key(i, "attn.wv"))), lm.param(layer_key(i, "attn.bv")));
  Tensor att = causal_attention(g, q, k, v, batch, seq_len, cfg.n_heads);
  Tensor proj = add_rowwise(g, matmul(g, att, lm.param(layer_key(i, "attn.wo"))), lm.param(layer_key(i, "attn.bo")));
  if (dropout_rng && cfg.dropout_rate > 0.0) proj = dropout(g, proj, cfg.dropout_rate, *dropout_rng);
  Tensor x1 = add(g, x, proj);

  Tensor h2 = layer_norm(g, x1, lm.param(layer_key(i, "ln2.g")), lm.param(layer_key(i, "ln2.b")), kLnEps);
  Tensor m = gelu(g, add_rowwise(g, matmul(g, h2, lm.param(layer_key(i, "mlp.w1"))), lm.param(layer_key(i, "mlp.b1"))));
  Tensor m2 = add_rowwise(g, matmul(g, m, lm.param(layer_key(i, "mlp.w2"))), lm.param(layer_key(i, "mlp.b2")));
  if (dropout_rng && cfg.dropout_rate > 0.0) m2 = dropout(g, m2, cfg.dropout_rate, *dropout_rng);
  return add(g, x1, m2);
}

Tensor logits_head(const TransformerLM& lm, const Tensor& x, Graph& g) {
  Tensor xf = layer_norm(g, x, lm.param("ln_f.g"), lm.param("ln_f.b"), kLnEps);
  return matmul(g, xf, lm.param("unembed"));
}

Tensor embed_tokens(const TransformerLM& lm, const std::vector<int>& tokens, int batch, int seq_len,
                    Graph& g) {
  for (int tok : tokens) {
    if (tok < 0 || tok >= lm.config.vocab_size)
      throw std::out_of_range("token id " + std::to_string(tok) + " outside vocabulary of " +
                              std::to_string(lm.config.vocab_size));
  }
  Tensor te = embedding(g, lm.param("tok_emb"), tokens);
  std::vector<int> pos(static_cast<size_t>(batch) * seq_len);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < seq_len; ++i) pos[static_cast<size_t>(b) * seq_len + i] = i;
  Tensor pe = embedding(g, lm.param("pos_emb"), pos);
  return add(g, te, pe);
}

}  // namespace

ForwardResult forward(const TransformerLM& lm, const std::vector<int>& tokens,
                      const std::vector<Intervention>& interventions, Graph& g,
                      bool record_hidden) {
  const LMConfig& cfg = lm.config;
  int n = static_cast<int>(tokens.size());
  if (n == 0) throw std::invalid_argument("forward: empty token sequence");
  if (n > cfg.max_seq_len)
    throw std::length_error("forward: sequence of " + std::to_string(n) + " exceeds context window " +
                            std::to_string(cfg.max_seq_len));
  for (const Intervention& iv : interventions) {
    if (iv.layer < 0 || iv.layer >= cfg.n_layers)
      throw std::out_of_range("intervention layer " + std::to_string(iv.layer) + " out of [0, " +
                              std::to_string(cfg.n_layers) + ")");
    if (iv.position < 0 || iv.position >= n)
      throw std::out_of_range("intervention position " + std::to_string(iv.position) +
                              " out of sequence of " + std::to_string(n));
    if (iv.replacement.rank() != 1 || iv.replacement.dim(0) != cfg.d_model)
      throw std::invalid_argument("intervention replacement must be [" + std::to_string(cfg.d_model) +
                                  "], got " + shape_str(iv.replacement.shape()));
  }

  ForwardResult res;
  Tensor x = embed_tokens(lm, tokens, 1, n, g);

  auto apply_at = [&](int layer, Tensor t) {
    for (const Intervention& iv : interventions)
      if (iv.layer == layer) t = row_splice(g, t, iv.replacement, iv.position);
    return t;
  };

  x = apply_at(0, x);
  if (record_hidden) res.hidden.layers.push_back(x.clone());
  for (int i = 0; i < cfg.n_layers; ++i) {
    x = run_block(lm, i, x, 1, n, g, nullptr);
    x = apply_at(i + 1, x);  // unreachable for i+1 == n_layers by validation
    if (record_hidden) res.hidden.layers.push_back(x.clone());
  }
  res.logits = logits_head(lm, x, g);
  return res;
}

Tensor forward_batch(const TransformerLM& lm, const std::vector<int>& tokens, int batch,
                     int seq_len, Graph& g, Rng* dropout_rng) {
  if (static_cast<int>(tokens.size()) != batch * seq_len)
    throw std::invalid_argument("forward_batch: expected " + std::to_string(batch * seq_len) + " tokens");
  if (seq_len > lm.config.max_seq_len)
    throw std::length_error("forward_batch: rows longer than context window");
  Tensor x = embed_tokens(lm, tokens, batch, seq_len, g);
  for (int i = 0; i < lm.config.n_layers; ++i) x = run_block(lm, i, x, batch, seq_len, g, dropout_rng);
  return logits_head(lm, x, g);
}

Tensor forward_from_layer(const TransformerLM& lm, int layer, const Tensor& hidden, Graph& g) {
  if (layer < 0 || layer >= lm.config.n_layers)
    throw std::out_of_range("forward_from_layer: layer " + std::to_string(layer) + " out of [0, " +
                            std::to_string(lm.config.n_layers) + ")");
  if (hidden.rank() != 2 || hidden.dim(1) != lm.config.d_model)
    throw std::invalid_argument("forward_from_layer: hidden must be [n x d_model], got " +
                                shape_str(hidden.shape()));
  Tensor x = hidden;
  int n = hidden.dim(0);
  for (int i = layer; i < lm.config.n_layers; ++i) x = run_block(lm, i, x, 1, n, g, nullptr);
  return logits_head(lm, x, g);
}

Tensor next_token_distribution(const TransformerLM& lm, const std::vector<int>& tokens,
                               const std::vector<Intervention>& interventions) {
  Graph g(false);
  ForwardResult res = forward(lm, tokens, interventions, g, /*record_hidden=*/false);
  Tensor last = row(g, res.logits, res.logits.dim(0) - 1);
  return softmax(g, last, 0);
}

// --- training ----------------------------------------------------------------

namespace {

// Pack whole sentences into fixed-length rows; a separator token follows each
// sentence and pads row tails, so every row starts at a sentence boundary.
std::vector<std::vector<int>> pack_rows(const std::vector<std::vector<int>>& corpus,
                                        const std::vector<size_t>& order, int seq_len,
                                        int fill_token) {
  std::vector<std::vector<int>> rows;
  std::vector<int> cur;
  cur.reserve(static_cast<size_t>(seq_len));
  for (size_t idx : order) {
    const auto& sent = corpus[idx];
    if (static_cast<int>(sent.size()) + 1 > seq_len)
      throw std::length_error("train_lm: sentence of " + std::to_string(sent.size()) +
                              " tokens does not fit a row of " + std::to_string(seq_len));
    if (static_cast<int>(cur.size() + sent.size()) + 1 > seq_len) {
      cur.resize(static_cast<size_t>(seq_len), fill_token);
      rows.push_back(std::move(cur));
      cur = {};
    }
    cur.insert(cur.end(), sent.begin(), sent.end());
    cur.push_back(fill_token);
  }
  if (!cur.empty()) {
    cur.resize(static_cast<size_t>(seq_len), fill_token);
    rows.push_back(std::move(cur));
  }
  return rows;
}

}  // namespace

LossCurve train_lm(TransformerLM& lm, const std::vector<std::vector<int>>& corpus,
                   const TrainLMConfig& cfg, const EpochHook& on_epoch) {
  const LMConfig& mc = lm.config;
  if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
  for (const auto& sent : corpus)
    for (int tok : sent)
      if (tok < 0 || tok >= mc.vocab_size)
        throw std::out_of_range("train_lm: token id " + std::to_string(tok) +
                                " outside vocabulary of " + std::to_string(mc.vocab_size));
  if (cfg.fill_token < 0 || cfg.fill_token >= mc.vocab_size)
    throw std::out_of_range("train_lm: fill_token outside vocabulary");

  lm.set_params_require_grad(true);
  AdamW opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  Rng shuffle_rng(cfg.seed ^ 0x5aff1eULL);
  Rng dropout_rng(cfg.seed ^ 0xd80ULL);
  const int T = mc.max_seq_len;

  std::vector<size_t> ident(corpus.size());
  std::iota(ident.begin(), ident.end(), 0);
  int64_t rows_per_epoch = static_cast<int64_t>(pack_rows(corpus, ident, T, cfg.fill_token).size());
  int64_t est_steps_per_epoch = (rows_per_epoch + cfg.batch_rows - 1) / cfg.batch_rows;
  int64_t est_total_steps = std::max<int64_t>(1, est_steps_per_epoch * cfg.epochs);

  auto lr_at = [&](int64_t step) {
    if (step < cfg.warmup_steps) return cfg.learning_rate * (step + 1) / cfg.warmup_steps;
    double progress = est_total_steps > cfg.warmup_steps
                          ? static_cast<double>(step - cfg.warmup_steps) /
                                static_cast<double>(est_total_steps - cfg.warmup_steps)
                          : 1.0;
    progress = std::min(1.0, std::max(0.0, progress));
    double floor = cfg.final_lr_fraction;
    return cfg.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
  };

  LossCurve curve;
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  int64_t step_no = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    std::vector<std::vector<int>> rows = pack_rows(corpus, order, T, cfg.fill_token);
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (size_t r0 = 0; r0 < rows.size(); r0 += static_cast<size_t>(cfg.batch_rows)) {
      int b = static_cast<int>(std::min<size_t>(cfg.batch_rows, rows.size() - r0));
      std::vector<int> toks(static_cast<size_t>(b) * T);
      std::vector<int> targets(static_cast<size_t>(b) * T);
      for (int r = 0; r < b; ++r) {
        const auto& rw = rows[r0 + static_cast<size_t>(r)];
        for (int i = 0; i < T; ++i) {
          toks[static_cast<size_t>(r) * T + i] = rw[static_cast<size_t>(i)];
          targets[static_cast<size_t>(r) * T + i] =
              i + 1 < T ? rw[static_cast<size_t>(i) + 1] : cfg.fill_token;
        }
      }
      AdamW::zero_grads(lm.params);
      Graph g(true);
      Rng* drng = mc.dropout_rate > 0.0 ? &dropout_rng : nullptr;
      Tensor logits = forward_batch(lm, toks, b, T, g, drng);
      Tensor loss = cross_entropy(g, logits, targets);
      g.backward(loss);
      opt.step(lm.params, lr_at(step_no));
      ++step_no;
      ++lm.training_step_count;
      curve.step_loss.push_back(loss.item());
      epoch_sum += loss.item();
      ++epoch_steps;
    }
    curve.epoch_mean.push_back(epoch_sum / std::max(1, epoch_steps));
    if (on_epoch) on_epoch(epoch, curve.epoch_mean.back());
  }
  return curve;
}

// --- generation ----------------------------------------------------------------

GenerationResult generate(const TransformerLM& lm, const std::vector<int>& prompt,
                          const GenerationParams& params,
                          const std::vector<Intervention>& interventions) {
  params.validate();
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (static_cast<int>(prompt.size()) + params.max_new_tokens > lm.config.max_seq_len)
    throw std::length_error("generate: prompt plus max_new_tokens exceeds context window of " +
                            std::to_string(lm.config.max_seq_len));
  GenerationResult res;
  res.tokens = prompt;
  Rng rng(params.seed ^ 0x9e4eULL);
  for (int step = 0; step < params.max_new_tokens; ++step) {
    Graph g(false);
    ForwardResult fr = forward(lm, res.tokens, interventions, g, /*record_hidden=*/false);
    Tensor last = row(g, fr.logits, fr.logits.dim(0) - 1);
    int next = 0;
    if (params.strategy == GenerationParams::Strategy::Greedy) {
      next = argmax(last);
    } else {
      Tensor p = softmax(g, scale(g, last, 1.0 / params.temperature), 0);
      double u = rng.uniform_real();
      double acc = 0.0;
      next = p.dim(0) - 1;
      for (int i = 0; i < p.dim(0); ++i) {
        acc += p.at(i);
        if (u < acc) {
          next = i;
          break;
        }
      }
    }
    res.tokens.push_back(next);
    res.generated.push_back(next);
  }
  return res;
}

}  // namespace remedi
