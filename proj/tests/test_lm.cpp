#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "remedi/checkpoint.hpp"
#include "remedi/lm.hpp"

using namespace remedi;

namespace {

LMConfig tiny_config(uint64_t seed = 42) {
  LMConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq_len = 12;
  cfg.seed = seed;
  cfg.vocab_hash = 0xabcdef;
  return cfg;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/remedi_test_") + name;
}

}  // namespace

TEST_CASE("forward shape contract and distribution consistency") {
  TransformerLM lm = TransformerLM::init(tiny_config());
  ForwardResult res = forward(lm, {3});
  CHECK(res.logits.shape() == Shape{1, 11});
  CHECK(res.hidden.n_layers() == 2);
  CHECK(res.hidden.seq_len() == 1);

  std::vector<int> toks = {1, 4, 2, 7};
  ForwardResult fr = forward(lm, toks);
  Tensor dist = next_token_distribution(lm, toks);
  Graph g(false);
  Tensor expect = softmax(g, row(g, fr.logits, 3), 0);
  CHECK(bitwise_equal(dist, expect));
  double s = 0.0;
  for (int i = 0; i < dist.dim(0); ++i) s += dist.at(i);
  CHECK(std::abs(s - 1.0) <= 1e-12);
}

TEST_CASE("zero-initialized unembedding gives a uniform distribution") {
  TransformerLM lm = TransformerLM::init(tiny_config());
  Tensor& un = lm.params.at("unembed");
  std::fill(un.data(), un.data() + un.size(), 0.0);
  Tensor dist = next_token_distribution(lm, {5, 2});
  for (int i = 0; i < 11; ++i) CHECK(dist.at(i) == doctest::Approx(1.0 / 11).epsilon(1e-14));
}

TEST_CASE("no-op intervention reproduces logits bit-identically") {
  TransformerLM lm = TransformerLM::init(tiny_config(7));
  std::vector<int> toks = {1, 4, 2, 7, 9};
  ForwardResult base = forward(lm, toks);
  Tensor same = base.hidden.at(1, 2);
  ForwardResult patched = forward(lm, toks, {{1, 2, same}});
  CHECK(bitwise_equal(base.logits, patched.logits));
  CHECK(bitwise_equal(patched.hidden.at(1, 2), same));
}

TEST_CASE("causality: perturbing the final token leaves earlier logits bit-identical") {
  TransformerLM lm = TransformerLM::init(tiny_config(9));
  std::vector<int> a = {1, 4, 2, 7, 9};
  std::vector<int> b = {1, 4, 2, 7, 5};
  Tensor la = forward(lm, a).logits;
  Tensor lb = forward(lm, b).logits;
  for (int i = 0; i + 1 < static_cast<int>(a.size()); ++i) {
    Graph g(false);
    CHECK(bitwise_equal(row(g, la, i), row(g, lb, i)));
  }
}

TEST_CASE("intervention locality") {
  TransformerLM lm = TransformerLM::init(tiny_config(21));
  std::vector<int> toks = {1, 4, 2, 7, 9, 3};
  ForwardResult base = forward(lm, toks);
  Tensor z = Tensor::full({16}, 0.37);
  int layer = 1, pos = 3;
  ForwardResult patched = forward(lm, toks, {{layer, pos, z}});

  // replacement recorded exactly
  CHECK(bitwise_equal(patched.hidden.at(layer, pos), z));
  // positions before the edit untouched at every layer
  for (int l = 0; l <= patched.hidden.n_layers(); ++l)
    for (int p = 0; p < pos; ++p)
      CHECK(bitwise_equal(patched.hidden.at(l, p), base.hidden.at(l, p)));
  // layers at or below the edit layer untouched at the edit position too,
  // except the edited coordinate itself
  for (int l = 0; l < layer; ++l) CHECK(bitwise_equal(patched.hidden.at(l, pos), base.hidden.at(l, pos)));
  // downstream actually changed
  CHECK_FALSE(bitwise_equal(patched.logits, base.logits));
}

TEST_CASE("empty intervention list matches the batch (hook-free) path bit-exactly") {
  TransformerLM lm = TransformerLM::init(tiny_config(33));
  std::vector<int> toks = {2, 8, 1, 6};
  Tensor a = forward(lm, toks).logits;
  Graph g(false);
  Tensor b = forward_batch(lm, toks, 1, 4, g);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("intervention and sequence errors") {
  TransformerLM lm = TransformerLM::init(tiny_config());
  Tensor z = Tensor::zeros({16});
  CHECK_THROWS_AS(forward(lm, {1, 2}, {{5, 0, z}}), std::out_of_range);
  CHECK_THROWS_AS(forward(lm, {1, 2}, {{0, 2, z}}), std::out_of_range);
  CHECK_THROWS_AS(forward(lm, std::vector<int>(13, 1)), std::length_error);
  CHECK_THROWS_AS(forward(lm, {}), std::invalid_argument);
}

TEST_CASE("training memorizes a single repeated sentence") {
  TransformerLM lm = TransformerLM::init(tiny_config(5));
  std::vector<int> sentence = {3, 5, 7, 5, 9, 4};
  std::vector<std::vector<int>> corpus(32, sentence);
  TrainLMConfig tc;
  tc.batch_rows = 8;
  tc.epochs = 50;  // 4 steps/epoch -> 200 steps
  tc.warmup_steps = 10;
  tc.learning_rate = 1e-2;
  tc.weight_decay = 0.0;
  tc.fill_token = 0;
  tc.seed = 1;
  LossCurve curve = train_lm(lm, corpus, tc);
  CHECK(static_cast<int>(curve.step_loss.size()) == 200);
  CHECK(curve.step_loss.back() < 0.01);

  // smoothed (epoch-mean) loss nonincreasing on >= 90% of transitions
  int ok = 0, total = 0;
  for (size_t i = 1; i < curve.epoch_mean.size(); ++i) {
    ++total;
    if (curve.epoch_mean[i] <= curve.epoch_mean[i - 1] + 1e-9) ++ok;
  }
  CHECK(ok >= total * 9 / 10);
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto run = []() {
    TransformerLM lm = TransformerLM::init(tiny_config(5));
    std::vector<std::vector<int>> corpus(16, std::vector<int>{3, 5, 7, 9});
    TrainLMConfig tc;
    tc.batch_rows = 4;
    tc.epochs = 3;
    tc.fill_token = 0;
    tc.seed = 77;
    train_lm(lm, corpus, tc);
    return lm;
  };
  TransformerLM a = run();
  TransformerLM b = run();
  CHECK(a.param_checksum() == b.param_checksum());
  for (const auto& [name, p] : a.params) CHECK(bitwise_equal(p, b.params.at(name)));
}

TEST_CASE("training rejects out-of-vocabulary tokens") {
  TransformerLM lm = TransformerLM::init(tiny_config());
  TrainLMConfig tc;
  tc.fill_token = 0;
  CHECK_THROWS_AS(train_lm(lm, {{3, 11}}, tc), std::out_of_range);
}

TEST_CASE("generation basics") {
  TransformerLM lm = TransformerLM::init(tiny_config(13));
  GenerationParams p;
  p.max_new_tokens = 0;
  GenerationResult r0 = generate(lm, {1, 2, 3}, p);
  CHECK(r0.tokens == std::vector<int>{1, 2, 3});
  CHECK(r0.generated.empty());

  p.max_new_tokens = 6;
  GenerationResult g1 = generate(lm, {1, 2}, p);
  GenerationResult g2 = generate(lm, {1, 2}, p);
  CHECK(g1.tokens == g2.tokens);

  p.strategy = GenerationParams::Strategy::Temperature;
  p.temperature = 0.8;
  p.seed = 11;
  GenerationResult t1 = generate(lm, {1, 2}, p);
  GenerationResult t2 = generate(lm, {1, 2}, p);
  CHECK(t1.tokens == t2.tokens);

  p.max_new_tokens = 100;
  CHECK_THROWS_AS(generate(lm, {1, 2}, p), std::length_error);
}

TEST_CASE("checkpoint round trip is bit-identical") {
  TransformerLM lm = TransformerLM::init(tiny_config(99));
  lm.training_step_count = 17;
  std::string path = temp_path("ckpt.rmdf");
  save_checkpoint(lm, path);
  TransformerLM back = load_checkpoint(path);
  CHECK(back.config.vocab_size == lm.config.vocab_size);
  CHECK(back.training_step_count == 17);
  std::vector<int> toks = {1, 5, 3};
  CHECK(bitwise_equal(forward(lm, toks).logits, forward(back, toks).logits));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint error paths") {
  TransformerLM lm = TransformerLM::init(tiny_config(1));
  std::string path = temp_path("ckpt_bad.rmdf");
  save_checkpoint(lm, path);

  // corrupt magic
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointFormatError);

  // truncated file
  save_checkpoint(lm, path);
  {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointIntegrityError);

  // vocabulary hash mismatch
  save_checkpoint(lm, path);
  CHECK_THROWS_AS(load_checkpoint(path, /*expected_vocab_hash=*/0x1234), CheckpointIntegrityError);
  CHECK_NOTHROW(load_checkpoint(path, lm.config.vocab_hash));
  std::remove(path.c_str());
}
