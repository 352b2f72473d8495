#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "remedi/checkpoint.hpp"
#include "remedi/editor.hpp"

using namespace remedi;

namespace {

// Small world + LM shared by the editor tests. Untrained weights are fine
// for the structural properties; one fixture trains briefly where needed.
struct Fixture {
  SyntheticWorld world;
  TransformerLM lm;
  std::vector<EditSample> samples;

  Fixture() {
    WorldSizes sz;
    sz.entities = 24;
    sz.relations = 4;
    sz.relations_per_entity = 3;
    sz.occupations = 6;
    sz.concepts = 0;
    sz.features = 0;
    sz.themes = 0;
    sz.filler_entities = 6;
    sz.filler_bios_pairs = 10;
    world = build_world(101, sz);
    LMConfig cfg;
    cfg.vocab_size = world.vocab.size();
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq_len = 32;
    cfg.seed = 3;
    cfg.vocab_hash = world.vocab.hash();
    lm = TransformerLM::init(cfg);
    samples = make_counterfact_samples(world, 7, 24);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

// Dyadic values make the affine identities exact in IEEE arithmetic.
Tensor dyadic_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  for (int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<double>(rng.uniform_int(-64, 64)) / 256.0;
  return t;
}

}  // namespace

TEST_CASE("encode_attribute: mean of one equals the hidden state") {
  Fixture& f = fixture();
  EditSample s = f.samples[0];
  auto attr_words = split_words(s.attribute);
  s.attribute = attr_words.back();  // single-token span
  AttributeEncoding enc = encode_attribute(f.lm, f.world.vocab, s, 1);

  std::vector<int> toks = f.world.vocab.encode(s.entity + " " + s.attribute);
  Graph g(false);
  ForwardResult fr = forward(f.lm, toks, {}, g, true);
  CHECK(bitwise_equal(enc.vector, fr.hidden.at(1, static_cast<int>(toks.size()) - 1)));
}

TEST_CASE("encode_attribute: mean matches an independent recomputation") {
  Fixture& f = fixture();
  const EditSample& s = f.samples[1];
  AttributeEncoding enc = encode_attribute(f.lm, f.world.vocab, s, 1);
  std::vector<int> toks = f.world.vocab.encode(s.entity + " " + s.attribute);
  Graph g(false);
  ForwardResult fr = forward(f.lm, toks, {}, g, true);
  for (int c = 0; c < f.lm.config.d_model; ++c) {
    double m = 0.0;
    for (int i = enc.span_begin; i < enc.span_end; ++i)
      m += fr.hidden.layers[1].at(i, c);
    m /= (enc.span_end - enc.span_begin);
    CHECK(enc.vector.at(c) == doctest::Approx(m).epsilon(1e-15));
  }
  // per-sample purity: a second computation is bit-identical
  AttributeEncoding enc2 = encode_attribute(f.lm, f.world.vocab, s, 1);
  CHECK(bitwise_equal(enc.vector, enc2.vector));
}

TEST_CASE("entity_rep follows the last mention") {
  Fixture& f = fixture();
  EditSample s = f.samples[0];

  // entity as final token
  EditSample tail = s;
  tail.prompt = "everyone knows " + s.entity;
  Tensor rep = entity_rep(f.lm, f.world.vocab, tail, 1);
  std::vector<int> toks = f.world.vocab.encode(tail.prompt);
  Graph g(false);
  ForwardResult fr = forward(f.lm, toks, {}, g, true);
  CHECK(bitwise_equal(rep, fr.hidden.at(1, static_cast<int>(toks.size()) - 1)));

  // two mentions resolve to the later one
  EditSample twice = s;
  twice.prompt = s.entity + " knows " + s.entity + " today";
  // "today" is not in the vocabulary; use relation word instead
  twice.prompt = s.entity + " knows " + s.entity;
  Tensor rep2 = entity_rep(f.lm, f.world.vocab, twice, 1);
  std::vector<int> toks2 = f.world.vocab.encode(twice.prompt);
  Graph g2(false);
  ForwardResult fr2 = forward(f.lm, toks2, {}, g2, true);
  CHECK(bitwise_equal(rep2, fr2.hidden.at(1, 2)));
  CHECK_FALSE(bitwise_equal(rep2, fr2.hidden.at(1, 0)));

  // layer 0 gives the embedding-level representation
  Tensor rep0 = entity_rep(f.lm, f.world.vocab, s, 0);
  std::vector<int> toks3 = f.world.vocab.encode(s.prompt);
  Graph g3(false);
  ForwardResult fr3 = forward(f.lm, toks3, {}, g3, true);
  CHECK(bitwise_equal(rep0, fr3.hidden.at(0, s.entity_index)));
}

TEST_CASE("apply_edit identities") {
  Rng rng(55);
  int d = 16;
  Editor zero = Editor::zero_init(d, 1);
  Tensor h = dyadic_tensor({d}, rng);
  Tensor a = dyadic_tensor({d}, rng);
  CHECK(bitwise_equal(apply_edit(zero, h, a), h));  // zero edit is the identity

  Editor e = Editor::zero_init(d, 1);
  e.W = dyadic_tensor({d, d}, rng);
  e.b = dyadic_tensor({d}, rng);

  // F(0, a) = W a + b
  Tensor z0 = apply_edit(e, Tensor::zeros({d}), a);
  Graph g(false);
  Tensor expect = add(g, matvec(g, e.W, a), e.b);
  CHECK(bitwise_equal(z0, expect));

  // the offset is independent of the entity (exact on dyadic inputs)
  Tensor h2 = dyadic_tensor({d}, rng);
  Tensor z1 = apply_edit(e, h, a);
  Tensor z2 = apply_edit(e, h2, a);
  for (int i = 0; i < d; ++i)
    CHECK(z1.at(i) - h.at(i) == z2.at(i) - h2.at(i));

  CHECK_THROWS_AS(apply_edit(e, Tensor::zeros({d + 1}), a), std::invalid_argument);
}

TEST_CASE("objective: zero editor reproduces the unedited state") {
  Fixture& f = fixture();
  const EditSample& s = f.samples[2];
  Editor zero = Editor::zero_init(f.lm.config.d_model, 1);
  Graph g(true);
  ObjectiveValue v = objective(f.lm, f.world.vocab, zero, s, 1.0, 10.0, g);
  CHECK(v.l_kl == 0.0);  // exactly

  Tensor dist = next_token_distribution(f.lm, f.world.vocab.encode(s.prompt));
  double p_unedited = dist.at(f.world.vocab.encode(s.target_mediated)[0]);
  CHECK(v.l_target == -p_unedited);
}

TEST_CASE("objective: entity at the final prompt position has empty KL") {
  Fixture& f = fixture();
  EditSample s = f.samples[3];
  s.prompt = "everyone knows " + s.entity;  // entity is the last prompt token
  Editor e = Editor::zero_init(f.lm.config.d_model, 1);
  Rng rng(9);
  e.W = Tensor::randn({16, 16}, rng, 0.1);
  e.b = Tensor::randn({16}, rng, 0.1);
  Graph g(false);
  ObjectiveValue v = objective(f.lm, f.world.vocab, e, s, 1.0, 10.0, g);
  CHECK(v.l_kl == 0.0);
}

TEST_CASE("objective requires a prior target when lambda1 > 0") {
  Fixture& f = fixture();
  EditSample s = f.samples[4];
  s.target_unmediated.reset();
  Editor e = Editor::zero_init(f.lm.config.d_model, 1);
  Graph g(false);
  CHECK_THROWS_AS(objective(f.lm, f.world.vocab, e, s, 1.0, 10.0, g), std::invalid_argument);
  CHECK_NOTHROW(objective(f.lm, f.world.vocab, e, s, 0.0, 10.0, g));
}

TEST_CASE("objective gradients match finite differences") {
  Fixture& f = fixture();
  const EditSample& s = f.samples[5];
  for (LossForm form : {LossForm::Probability, LossForm::LogProbability}) {
    Editor e = Editor::zero_init(f.lm.config.d_model, 1, form);
    Rng rng(form == LossForm::Probability ? 21u : 22u);
    e.W = Tensor::randn({16, 16}, rng, 0.05);
    e.b = Tensor::randn({16}, rng, 0.05);
    e.W.set_requires_grad(true);
    e.b.set_requires_grad(true);

    Graph g(true);
    ObjectiveValue v = objective(f.lm, f.world.vocab, e, s, 1.0, 10.0, g);
    g.backward(v.total);

    auto loss_value = [&]() {
      Graph gq(false);
      return objective(f.lm, f.world.vocab, e, s, 1.0, 10.0, gq).total.item();
    };
    double h = 1e-5;
    double worst = 0.0;
    // all of b, a sample of W entries
    for (int i = 0; i < 16; ++i) {
      double orig = e.b.at(i);
      e.b.mut(i) = orig + h;
      double fp = loss_value();
      e.b.mut(i) = orig - h;
      double fm = loss_value();
      e.b.mut(i) = orig;
      double num = (fp - fm) / (2 * h);
      double ana = e.b.grad()[static_cast<size_t>(i)];
      double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
      if (std::abs(num) > 1e-7 || std::abs(ana) > 1e-7)
        worst = std::max(worst, std::abs(num - ana) / denom);
    }
    for (int k = 0; k < 24; ++k) {
      int i = static_cast<int>((k * 2654435761u) % e.W.size());
      double orig = e.W.data()[i];
      e.W.data()[i] = orig + h;
      double fp = loss_value();
      e.W.data()[i] = orig - h;
      double fm = loss_value();
      e.W.data()[i] = orig;
      double num = (fp - fm) / (2 * h);
      double ana = e.W.grad()[static_cast<size_t>(i)];
      double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
      if (std::abs(num) > 1e-7 || std::abs(ana) > 1e-7)
        worst = std::max(worst, std::abs(num - ana) / denom);
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("gradient isolation: LM parameters receive no gradient") {
  Fixture& f = fixture();
  const EditSample& s = f.samples[6];
  TransformerLM lm = f.lm;
  lm.set_params_require_grad(true);  // as left behind by train_lm
  Editor e = Editor::zero_init(lm.config.d_model, 1);
  Rng rng(31);
  e.W = Tensor::randn({16, 16}, rng, 0.1);
  e.b = Tensor::randn({16}, rng, 0.1);
  e.W.set_requires_grad(true);
  e.b.set_requires_grad(true);

  Graph g(true);
  ObjectiveValue v = objective(lm, f.world.vocab, e, s, 1.0, 10.0, g);
  g.backward(v.total);

  CHECK(e.W.has_grad());
  for (const auto& [name, p] : lm.params) {
    if (!p.has_grad()) continue;
    for (double gv : p.grad()) CHECK(gv == 0.0);
  }
  CHECK(lm.param("tok_emb").impl()->requires_grad);  // guard restored the flag
}

TEST_CASE("train_editor improves the target probability on its sample") {
  Fixture& f = fixture();
  // two copies of one sample: whichever lands in validation, the trained
  // content is the same record
  std::vector<EditSample> one = {f.samples[7], f.samples[7]};
  EditTrainConfig cfg;
  cfg.layer = 0;
  cfg.lambda1 = 1.0;
  cfg.lambda2 = 1.0;
  cfg.batch_size = 1;
  cfg.max_epochs = 30;
  cfg.patience = 30;
  cfg.validation_fraction = 0.4;
  cfg.seed = 5;
  EditorTrainResult tr = train_editor(f.lm, f.world.vocab, one, cfg);

  const EditSample& s = one[0];
  Tensor h_attr = encode_attribute(f.lm, f.world.vocab, s, cfg.layer).vector;
  Tensor pre = next_token_distribution(f.lm, f.world.vocab.encode(s.prompt));
  Tensor post = edited_next_distribution(f.lm, tr.editor, f.world.vocab, s.prompt, s.entity, h_attr);
  int tgt = f.world.vocab.encode(s.target_mediated)[0];
  CHECK(post.at(tgt) > pre.at(tgt));

  CHECK_THROWS_AS(train_editor(f.lm, f.world.vocab, {}, cfg), std::invalid_argument);
}

TEST_CASE("train_editor is deterministic under seed") {
  Fixture& f = fixture();
  std::vector<EditSample> sub(f.samples.begin(), f.samples.begin() + 8);
  EditTrainConfig cfg;
  cfg.layer = 1;
  cfg.max_epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 13;
  EditorTrainResult a = train_editor(f.lm, f.world.vocab, sub, cfg);
  EditorTrainResult b = train_editor(f.lm, f.world.vocab, sub, cfg);
  CHECK(a.editor.checksum() == b.editor.checksum());
  CHECK(a.val_loss == b.val_loss);
}

TEST_CASE("loss forms are monotone in the target probability") {
  Fixture& f = fixture();
  const EditSample& s = f.samples[9];
  Rng rng(77);
  Editor e1 = Editor::zero_init(16, 1, LossForm::Probability);
  Editor e2 = Editor::zero_init(16, 1, LossForm::Probability);
  e2.b = Tensor::randn({16}, rng, 0.5);

  auto probs_and_losses = [&](LossForm form) {
    Editor a = e1, b = e2;
    a.loss_form = form;
    b.loss_form = form;
    Graph g1(false), g2(false);
    double l1 = objective(f.lm, f.world.vocab, a, s, 0.0, 0.0, g1).l_target;
    double l2 = objective(f.lm, f.world.vocab, b, s, 0.0, 0.0, g2).l_target;
    Tensor h_attr = encode_attribute(f.lm, f.world.vocab, s, 1).vector;
    double p1 = edited_next_distribution(f.lm, a, f.world.vocab, s.prompt, s.entity, h_attr)
                    .at(f.world.vocab.encode(s.target_mediated)[0]);
    double p2 = edited_next_distribution(f.lm, b, f.world.vocab, s.prompt, s.entity, h_attr)
                    .at(f.world.vocab.encode(s.target_mediated)[0]);
    return std::tuple<double, double, double, double>(l1, l2, p1, p2);
  };

  auto [lp1, lp2, pp1, pp2] = probs_and_losses(LossForm::Probability);
  REQUIRE(pp1 != pp2);
  CHECK(((pp1 < pp2) == (lp1 > lp2)));
  auto [ll1, ll2, pl1, pl2] = probs_and_losses(LossForm::LogProbability);
  CHECK(((pl1 < pl2) == (ll1 > ll2)));
}

TEST_CASE("edited_generate: zero editor and entity-free prompts are no-ops") {
  Fixture& f = fixture();
  const EditSample& s = f.samples[10];
  Editor zero = Editor::zero_init(f.lm.config.d_model, 1);
  GenerationParams gp;
  gp.max_new_tokens = 6;

  EditedGeneration eg = edited_generate(f.lm, zero, f.world.vocab, s, gp);
  CHECK(eg.edited.tokens == eg.unedited.tokens);

  // a prompt not mentioning the entity is untouched even with a real editor
  Editor e = zero;
  Rng rng(3);
  e.W = Tensor::randn({16, 16}, rng, 0.3);
  std::string other = s.neighborhood_prompts[0];
  EditedGeneration eg2 = edited_generate(f.lm, e, f.world.vocab, s, gp, &other);
  CHECK(eg2.entity_pos == -1);
  CHECK(eg2.edited.tokens == eg2.unedited.tokens);
  for (size_t k = 0; k < eg2.edited_dists.size(); ++k)
    CHECK(bitwise_equal(eg2.edited_dists[k], eg2.unedited_dists[k]));
}

TEST_CASE("editor checkpoint round trip") {
  Rng rng(15);
  Editor e = Editor::zero_init(16, 2, LossForm::LogProbability);
  e.W = Tensor::randn({16, 16}, rng, 0.2);
  e.b = Tensor::randn({16}, rng, 0.2);
  std::string path = "/tmp/remedi_test_editor.rmdf";
  save_editor(e, path);
  Editor back = load_editor(path);
  CHECK(back.checksum() == e.checksum());
  CHECK(back.layer == 2);
  CHECK(back.loss_form == LossForm::LogProbability);
  std::remove(path.c_str());
}
