// Command-line surface for the hidden-state editing lab: world generation,
// LM training, editor training, evaluation, probing, and layer sweeps.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "remedi/checkpoint.hpp"
#include "remedi/editor.hpp"
#include "remedi/eval.hpp"
#include "remedi/probe.hpp"
#include "remedi/report.hpp"
#include "remedi/world.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace remedi;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitQualityGate = 3;
constexpr int kExitIo = 4;

struct RunConfig {
  uint64_t seed = 1;
  WorldSizes world;
  LMConfig lm;  // vocab_size is derived from the world
  TrainLMConfig train;
  double accuracy_threshold = 0.95;
  std::string workdir;

  json to_json() const {
    json j;
    j["seed"] = seed;
    j["world"] = {{"entities", world.entities},
                  {"relations", world.relations},
                  {"relations_per_entity", world.relations_per_entity},
                  {"occupations", world.occupations},
                  {"concepts", world.concepts},
                  {"features", world.features},
                  {"themes", world.themes},
                  {"raters", world.raters},
                  {"bios_per_eval_entity", world.bios_per_eval_entity},
                  {"filler_entities", world.filler_entities},
                  {"filler_bios_pairs", world.filler_bios_pairs},
                  {"echo_fraction", world.echo_fraction},
                  {"templates_per_fact", world.templates_per_fact},
                  {"reps_per_template", world.reps_per_template},
                  {"max_sentence_tokens", world.max_sentence_tokens},
                  {"known_entity_fraction", world.known_entity_fraction}};
    j["lm"] = {{"d_model", lm.d_model},
               {"n_layers", lm.n_layers},
               {"n_heads", lm.n_heads},
               {"max_seq_len", lm.max_seq_len},
               {"dropout_rate", lm.dropout_rate}};
    j["train_lm"] = {{"batch_rows", train.batch_rows},
                     {"epochs", train.epochs},
                     {"learning_rate", train.learning_rate},
                     {"weight_decay", train.weight_decay},
                     {"warmup_steps", train.warmup_steps},
                     {"accuracy_threshold", accuracy_threshold}};
    j["workdir"] = workdir;
    return j;
  }

  uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config file not found: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + std::string(e.what()));
  }
  maybe(j, "seed", cfg.seed);
  if (j.contains("world")) {
    const json& w = j.at("world");
    maybe(w, "entities", cfg.world.entities);
    maybe(w, "relations", cfg.world.relations);
    maybe(w, "relations_per_entity", cfg.world.relations_per_entity);
    maybe(w, "occupations", cfg.world.occupations);
    maybe(w, "concepts", cfg.world.concepts);
    maybe(w, "features", cfg.world.features);
    maybe(w, "themes", cfg.world.themes);
    maybe(w, "raters", cfg.world.raters);
    maybe(w, "bios_per_eval_entity", cfg.world.bios_per_eval_entity);
    maybe(w, "filler_entities", cfg.world.filler_entities);
    maybe(w, "filler_bios_pairs", cfg.world.filler_bios_pairs);
    maybe(w, "echo_fraction", cfg.world.echo_fraction);
    maybe(w, "templates_per_fact", cfg.world.templates_per_fact);
    maybe(w, "reps_per_template", cfg.world.reps_per_template);
    maybe(w, "max_sentence_tokens", cfg.world.max_sentence_tokens);
    maybe(w, "known_entity_fraction", cfg.world.known_entity_fraction);
  }
  if (j.contains("lm")) {
    const json& l = j.at("lm");
    maybe(l, "d_model", cfg.lm.d_model);
    maybe(l, "n_layers", cfg.lm.n_layers);
    maybe(l, "n_heads", cfg.lm.n_heads);
    maybe(l, "max_seq_len", cfg.lm.max_seq_len);
    maybe(l, "dropout_rate", cfg.lm.dropout_rate);
  }
  if (j.contains("train_lm")) {
    const json& t = j.at("train_lm");
    maybe(t, "batch_rows", cfg.train.batch_rows);
    maybe(t, "epochs", cfg.train.epochs);
    maybe(t, "learning_rate", cfg.train.learning_rate);
    maybe(t, "weight_decay", cfg.train.weight_decay);
    maybe(t, "warmup_steps", cfg.train.warmup_steps);
    maybe(t, "accuracy_threshold", cfg.accuracy_threshold);
  }
  maybe(j, "workdir", cfg.workdir);
  return cfg;
}

std::string resolve_workdir(const std::string& flag_value, const RunConfig& cfg) {
  if (!flag_value.empty()) return flag_value;
  if (!cfg.workdir.empty()) return cfg.workdir;
  if (const char* env = std::getenv("REMEDI_WORKDIR")) return env;
  return ".";
}

std::string under(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void write_corpus_file(const std::vector<std::vector<int>>& corpus, const std::string& path) {
  std::ostringstream os;
  for (const auto& sent : corpus) {
    for (size_t i = 0; i < sent.size(); ++i) os << (i ? " " : "") << sent[i];
    os << "\n";
  }
  write_text_file(path, os.str());
}

std::vector<std::vector<int>> read_corpus_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::vector<int>> corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<int> sent;
    std::string tok;
    while (ls >> tok) {
      try {
        size_t used = 0;
        int v = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        sent.push_back(v);
      } catch (const std::exception&) {
        throw std::invalid_argument("corpus " + path + " line " + std::to_string(line_no) +
                                    ": bad token id '" + tok + "'");
      }
    }
    corpus.push_back(std::move(sent));
  }
  return corpus;
}

double fact_completion_accuracy(const TransformerLM& lm, const SyntheticWorld& world) {
  auto facts = training_facts(world);
  int hit = 0;
  for (const auto& f : facts) {
    Tensor d = next_token_distribution(lm, world.vocab.encode(f.prompt));
    if (argmax(d) == world.vocab.id(f.object)) ++hit;
  }
  return facts.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(facts.size());
}

EditTrainConfig editor_defaults_for_task(const std::string& task) {
  EditTrainConfig ec;
  ec.batch_size = 1;
  if (task == "counterfact") {
    ec.lambda1 = 1.0;
    ec.lambda2 = 10.0;
    ec.layer = 0;
  } else if (task == "bios" || task == "concept") {
    ec.lambda1 = 0.0;
    ec.lambda2 = 10.0;
    ec.layer = 2;
  } else {
    throw std::invalid_argument("unknown task: " + task);
  }
  return ec;
}

std::vector<EditSample> split_of(const std::vector<EditSample>& samples, const std::string& split) {
  std::vector<EditSample> out;
  for (const auto& s : samples)
    if (s.split == split || split.empty()) out.push_back(s);
  return out;
}

// Loaded JSONL carries no split tags; recreate the 50/50 convention.
void ensure_splits(std::vector<EditSample>& samples) {
  bool tagged = false;
  for (const auto& s : samples) tagged |= !s.split.empty();
  if (tagged) return;
  for (size_t i = 0; i < samples.size(); ++i)
    samples[i].split = i < samples.size() / 2 ? "train" : "heldout";
}

void ensure_splits(std::vector<ConceptEditSample>& samples) {
  bool tagged = false;
  for (const auto& s : samples) tagged |= !s.split.empty();
  if (tagged) return;
  for (size_t i = 0; i < samples.size(); ++i)
    samples[i].split = i < samples.size() / 2 ? "train" : "heldout";
}

// --- commands ----------------------------------------------------------------

int cmd_gen_world(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  SyntheticWorld world = build_world(cfg.seed, cfg.world);
  save_world(world, under(out_dir, "world.json"));
  auto corpus = render_corpus(world, cfg.seed);
  write_corpus_file(corpus, under(out_dir, "corpus.txt"));

  int n_cf = 0, n_bios = 0, n_concept = 0;
  {
    int total_facts = 0;
    for (const auto& e : world.entities) total_facts += static_cast<int>(e.facts.size());
    auto cf = make_counterfact_samples(world, cfg.seed, total_facts);
    emit_edit_jsonl(cf, under(out_dir, "counterfact.jsonl"));
    n_cf = static_cast<int>(cf.size());
  }
  if (cfg.world.occupations > 0) {
    int eval_entities = 0;
    for (const auto& e : world.entities)
      if (e.occupation >= 0 && !e.occupation_in_corpus) ++eval_entities;
    auto bios = make_bios_samples(world, cfg.seed, eval_entities * cfg.world.bios_per_eval_entity);
    emit_edit_jsonl(bios, under(out_dir, "bios.jsonl"));
    n_bios = static_cast<int>(bios.size());
  }
  if (cfg.world.concepts > 0) {
    int want = 2000;  // as many as the pair pool supports, halving until it fits
    while (want > 0) {
      try {
        auto cs = make_concept_samples(world, cfg.seed, want);
        emit_concept_jsonl(cs, under(out_dir, "concepts.jsonl"));
        n_concept = static_cast<int>(cs.size());
        break;
      } catch (const std::invalid_argument&) {
        want /= 2;
      }
    }
  }

  std::cout << "world: " << world.entities.size() << " entities, " << world.relations.size()
            << " relations, " << world.occupations.size() << " occupations, " << world.concepts.size()
            << " concepts\n";
  std::cout << "corpus: " << corpus.size() << " sentences\n";
  std::cout << "datasets: counterfact=" << n_cf << " bios=" << n_bios << " concepts=" << n_concept
            << "\n";
  return kExitOk;
}

int cmd_train_lm(const RunConfig& cfg, const std::string& world_path, const std::string& corpus_path,
                 const std::string& out_path, double threshold) {
  SyntheticWorld world = load_world(world_path);
  auto corpus = read_corpus_file(corpus_path);

  LMConfig lmc = cfg.lm;
  lmc.vocab_size = world.vocab.size();
  lmc.seed = cfg.seed;
  lmc.vocab_hash = world.vocab.hash();
  TransformerLM lm = TransformerLM::init(lmc);

  TrainLMConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.fill_token = world.vocab.newline_id;
  LossCurve curve = train_lm(lm, corpus, tc, [](int epoch, double loss) {
    std::cout << "epoch " << (epoch + 1) << ": loss " << loss << "\n" << std::flush;
  });

  save_checkpoint(lm, out_path);
  std::ostringstream csv;
  csv << "# config_hash=" << cfg.hash() << " seed=" << cfg.seed << "\n";
  csv << "step,loss\n";
  for (size_t i = 0; i < curve.step_loss.size(); ++i) csv << i << "," << curve.step_loss[i] << "\n";
  write_text_file(out_path + ".loss.csv", csv.str());

  double acc = fact_completion_accuracy(lm, world);
  std::cout << "fact completion accuracy: " << acc << " (threshold " << threshold << ")\n";
  if (acc < threshold) {
    std::cerr << "quality gate failed: accuracy " << acc << " below " << threshold
              << "; consider more epochs or a different seed\n";
    return kExitQualityGate;
  }
  return kExitOk;
}

int cmd_train_editor(const RunConfig& cfg, const std::string& lm_path, const std::string& world_path,
                     const std::string& data_path, const std::string& task, const std::string& out_path,
                     EditTrainConfig ec) {
  SyntheticWorld world = load_world(world_path);
  TransformerLM lm = load_checkpoint(lm_path, world.vocab.hash());
  if (ec.layer < 0 || ec.layer >= lm.config.n_layers) {
    std::cerr << "editor layer " << ec.layer << " out of range [0, " << lm.config.n_layers << ")\n";
    return kExitUsage;
  }

  std::vector<EditSample> samples;
  if (task == "concept") {
    auto loaded = load_concept_jsonl(data_path, world.vocab);
    for (const auto& rej : loaded.rejected)
      std::cerr << "rejected line " << rej.line << ": " << rej.reason << "\n";
    ensure_splits(loaded.samples);
    for (const auto& cs : loaded.samples) {
      if (cs.split != "train") continue;
      EditSample s;
      s.id = cs.id;
      s.entity = cs.concept_name;
      s.attribute = cs.feature_star;
      FeaturePrompt fp = feature_prompt(cs.concept_name, cs.feature_star);
      s.prompt = fp.prompt;
      s.entity_index = 0;
      s.target_mediated = fp.target_word;
      s.split = cs.split;
      samples.push_back(std::move(s));
    }
  } else {
    auto loaded = load_edit_jsonl(data_path, world.vocab);
    for (const auto& rej : loaded.rejected)
      std::cerr << "rejected line " << rej.line << ": " << rej.reason << "\n";
    ensure_splits(loaded.samples);
    samples = split_of(loaded.samples, "train");
  }
  if (samples.empty()) {
    std::cerr << "no training samples in " << data_path << "\n";
    return kExitUsage;
  }

  ec.seed = cfg.seed;
  EditorTrainResult tr = train_editor(lm, world.vocab, samples, ec);
  save_editor(tr.editor, out_path);

  std::ostringstream csv;
  csv << "# config_hash=" << cfg.hash() << " seed=" << cfg.seed << "\n";
  csv << "epoch,train_loss,val_loss,best\n";
  for (size_t i = 0; i < tr.train_loss.size(); ++i)
    csv << (i + 1) << "," << tr.train_loss[i] << "," << tr.val_loss[i] << ","
        << (static_cast<int>(i + 1) == tr.best_epoch ? 1 : 0) << "\n";
  write_text_file(out_path + ".loss.csv", csv.str());

  std::cout << "editor trained: layer " << ec.layer << ", " << tr.epochs_run << " epochs, best epoch "
            << tr.best_epoch << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& lm_path, const std::string& editor_path,
             const std::string& world_path, const std::string& data_path, const std::string& task,
             const std::string& method_str, const std::string& out_dir, int max_new_tokens) {
  SyntheticWorld world = load_world(world_path);
  TransformerLM lm = load_checkpoint(lm_path, world.vocab.hash());
  EditMethod method = method_from_name(method_str);
  if (task != "counterfact" && method == EditMethod::Replace) {
    std::cerr << "method replace is only defined for the counterfact task\n";
    return kExitUsage;
  }
  if (task == "bios" && method == EditMethod::Prefix) {
    std::cerr << "method prefix is not defined for the bios task (the context is the prefix)\n";
    return kExitUsage;
  }

  std::optional<Editor> editor;
  if (method == EditMethod::Remedi) {
    if (editor_path.empty()) {
      std::cerr << "--method remedi requires --editor\n";
      return kExitUsage;
    }
    editor = load_editor(editor_path);
    editor->validate_for(lm.config);
  }

  fs::create_directories(out_dir);
  ReportMeta meta{cfg.seed, cfg.hash()};

  if (task == "counterfact") {
    auto loaded = load_edit_jsonl(data_path, world.vocab);
    ensure_splits(loaded.samples);
    auto heldout = split_of(loaded.samples, "heldout");
    EvalConfig evc;
    evc.method = method;
    evc.seed = cfg.seed;
    evc.max_new_tokens = max_new_tokens;
    for (const auto& s : split_of(loaded.samples, "train")) evc.train_attributes.push_back(s.attribute);
    EditReport rep = evaluate_editing(lm, editor ? &*editor : nullptr, world.vocab, world, heldout, evc);
    write_edit_report(rep, meta, under(out_dir, "edit_report." + method_str + ".json"),
                      under(out_dir, "edit_report." + method_str + ".csv"));
    std::cout << "efficacy " << rep.efficacy << " neighborhood " << rep.neighborhood << " consistency "
              << rep.consistency << " fluency " << rep.fluency << " essence " << rep.essence << "\n";
  } else if (task == "bios") {
    auto loaded = load_edit_jsonl(data_path, world.vocab);
    ensure_splits(loaded.samples);
    auto heldout = split_of(loaded.samples, "heldout");
    std::vector<OccupationReport> reports;
    for (bool in_context : {true, false}) {
      reports.push_back(occupation_accuracy(lm, editor ? &*editor : nullptr, world.vocab, heldout,
                                            world.occupations, method, in_context, max_new_tokens));
    }
    write_occupation_reports(reports, meta, under(out_dir, "occupation_report." + method_str + ".json"),
                             under(out_dir, "occupation_report." + method_str + ".csv"));
    for (const auto& r : reports)
      std::cout << (r.in_context ? "in-context" : "no-context") << " accuracy " << r.accuracy
                << " fluency " << r.fluency << "\n";
  } else if (task == "concept") {
    auto loaded = load_concept_jsonl(data_path, world.vocab);
    ensure_splits(loaded.samples);
    std::vector<ConceptEditSample> heldout;
    for (const auto& s : loaded.samples)
      if (s.split == "heldout") heldout.push_back(s);
    ConceptEditReport rep = delta_plm(lm, editor ? &*editor : nullptr, world.vocab, heldout, method);
    write_concept_report(rep, meta, under(out_dir, "concept_report." + method_str + ".json"),
                         under(out_dir, "concept_report." + method_str + ".csv"),
                         under(out_dir, "concept_report." + method_str + ".svg"));
    std::cout << "delta correlated " << rep.correlated.mean_delta << " (r " << rep.correlated.r
              << "), original " << rep.original.mean_delta << " (r " << rep.original.r << "), random "
              << rep.random.mean_delta << "\n";
  } else {
    std::cerr << "unknown task: " << task << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

int cmd_probe(const RunConfig& cfg, const std::string& lm_path, const std::string& editor_path,
              const std::string& world_path, const std::string& data_path, const std::string& condition,
              const std::string& baselines, bool control, const std::string& out_dir) {
  SyntheticWorld world = load_world(world_path);
  TransformerLM lm = load_checkpoint(lm_path, world.vocab.hash());
  Editor editor = load_editor(editor_path);
  editor.validate_for(lm.config);

  auto loaded = load_edit_jsonl(data_path, world.vocab);
  ensure_splits(loaded.samples);
  auto train = split_of(loaded.samples, "train");
  auto heldout = split_of(loaded.samples, "heldout");

  if (condition != "prior" && condition != "contextual") {
    std::cerr << "unknown condition: " << condition << "\n";
    return kExitUsage;
  }
  ProbeCondition cond = condition == "prior" ? ProbeCondition::Prior : ProbeCondition::Contextual;

  ProbeEvalConfig pec;
  pec.seed = cfg.seed;
  pec.world = &world;

  std::vector<ProbeReport> reports;
  reports.push_back(evaluate_probe(lm, world.vocab, editor, ProbeMethod::Remedi, train, heldout, cond, pec));
  std::istringstream bs(baselines);
  std::string b;
  while (std::getline(bs, b, ',')) {
    if (b.empty()) continue;
    ProbeMethod m;
    if (b == "identity") {
      m = ProbeMethod::Identity;
    } else if (b == "fact_probe") {
      m = ProbeMethod::FactProbe;
    } else if (b == "shortcut") {
      m = ProbeMethod::Shortcut;
    } else {
      std::cerr << "unknown baseline: " << b << "\n";
      return kExitUsage;
    }
    reports.push_back(evaluate_probe(lm, world.vocab, editor, m, train, heldout, cond, pec));
  }
  reports.push_back(train_supervised_skyline(lm, world.vocab, train, heldout, cond, pec).report);
  if (control) {
    EditTrainConfig ec = editor_defaults_for_task("counterfact");
    ec.layer = editor.layer;
    ec.seed = cfg.seed;
    reports.push_back(random_model_control(lm, world.vocab, train, heldout, ec, cond, pec).report);
  }

  fs::create_directories(out_dir);
  ReportMeta meta{cfg.seed, cfg.hash()};
  write_probe_reports(reports, meta, under(out_dir, "probe_report." + condition + ".json"),
                      under(out_dir, "probe_report." + condition + ".csv"));
  for (const auto& r : reports)
    std::cout << r.method << " [" << r.condition << "]: F1 " << r.f1 << " phi " << r.phi << "\n";
  return kExitOk;
}

int cmd_sweep_layers(const RunConfig& cfg, const std::string& lm_path, const std::string& world_path,
                     const std::string& data_path, const std::string& task, int subset,
                     const std::string& out_dir) {
  SyntheticWorld world = load_world(world_path);
  TransformerLM lm = load_checkpoint(lm_path, world.vocab.hash());
  fs::create_directories(out_dir);

  SweepConfig sc;
  sc.subset = subset;
  sc.seed = cfg.seed;
  sc.editor = editor_defaults_for_task(task);
  sc.editor.seed = cfg.seed;

  std::vector<EditSample> train, heldout;
  std::vector<ConceptEditSample> ctrain, cheldout;
  if (task == "concept") {
    auto loaded = load_concept_jsonl(data_path, world.vocab);
    ensure_splits(loaded.samples);
    for (const auto& s : loaded.samples) (s.split == "train" ? ctrain : cheldout).push_back(s);
  } else {
    auto loaded = load_edit_jsonl(data_path, world.vocab);
    ensure_splits(loaded.samples);
    for (const auto& s : loaded.samples) (s.split == "train" ? train : heldout).push_back(s);
  }

  LayerSweepResult res = layer_sweep(lm, world.vocab, world, train, heldout, ctrain, cheldout, task, sc);
  ReportMeta meta{cfg.seed, cfg.hash()};
  write_sweep_result(res, meta, under(out_dir, "layer_sweep." + task + ".csv"),
                     under(out_dir, "layer_sweep." + task + ".svg"));
  std::cout << "selected layer: " << res.selected_layer << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for learned hidden-state editing"};
  app.require_subcommand(1);

  std::string config_path, workdir_flag;
  uint64_t seed_flag = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--workdir", workdir_flag, "working directory (default: $REMEDI_WORKDIR or .)");
  app.add_option("--seed", seed_flag, "master seed (overrides config)")->each([&](const std::string&) {
    seed_set = true;
  });

  auto* gen = app.add_subcommand("gen-world", "generate the synthetic world, corpus, and datasets");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory (default: workdir)");

  auto* tlm = app.add_subcommand("train-lm", "train the toy LM on a rendered corpus");
  std::string tlm_world, tlm_corpus, tlm_out;
  double tlm_threshold = -1.0;
  tlm->add_option("--world", tlm_world, "world JSON");
  tlm->add_option("--corpus", tlm_corpus, "corpus token file");
  tlm->add_option("--out", tlm_out, "checkpoint path");
  tlm->add_option("--threshold", tlm_threshold, "fact-completion gate (default 0.95)");

  auto* ted = app.add_subcommand("train-editor", "train an editor against a frozen LM");
  std::string ted_lm, ted_world, ted_data, ted_task = "counterfact", ted_out, ted_loss_form;
  int ted_layer = -1, ted_epochs = -1, ted_patience = -1, ted_batch = -1;
  double ted_l1 = -1.0, ted_l2 = -1.0, ted_lr = -1.0;
  ted->add_option("--lm", ted_lm, "LM checkpoint")->required();
  ted->add_option("--world", ted_world, "world JSON");
  ted->add_option("--data", ted_data, "sample JSONL");
  ted->add_option("--task", ted_task, "counterfact | bios | concept");
  ted->add_option("--layer", ted_layer, "edit layer (default per task)");
  ted->add_option("--lambda1", ted_l1, "prior-loss weight (default per task)");
  ted->add_option("--lambda2", ted_l2, "KL-loss weight (default per task)");
  ted->add_option("--lr", ted_lr, "learning rate (default 1e-3)");
  ted->add_option("--epochs", ted_epochs, "max epochs (default 20)");
  ted->add_option("--patience", ted_patience, "early-stop patience (default 2)");
  ted->add_option("--batch", ted_batch, "batch size (default 1)");
  ted->add_option("--loss-form", ted_loss_form, "probability | log_probability");
  ted->add_option("--out", ted_out, "editor checkpoint path");

  auto* ev = app.add_subcommand("eval", "evaluate an editing method on held-out samples");
  std::string ev_lm, ev_editor, ev_world, ev_data, ev_task = "counterfact", ev_method = "remedi", ev_out;
  int ev_new_tokens = 12;
  ev->add_option("--lm", ev_lm, "LM checkpoint")->required();
  ev->add_option("--editor", ev_editor, "editor checkpoint (remedi method)");
  ev->add_option("--world", ev_world, "world JSON");
  ev->add_option("--data", ev_data, "sample JSONL");
  ev->add_option("--task", ev_task, "counterfact | bios | concept");
  ev->add_option("--method", ev_method, "lm_only | prefix | replace | remedi");
  ev->add_option("--max-new-tokens", ev_new_tokens, "generation length for text metrics");
  ev->add_option("--out", ev_out, "report directory (default: workdir/reports)");

  auto* pr = app.add_subcommand("probe", "error prediction from representations");
  std::string pr_lm, pr_editor, pr_world, pr_data, pr_condition = "contextual",
                                                   pr_baselines = "identity,fact_probe,shortcut", pr_out;
  bool pr_control = false;
  pr->add_option("--lm", pr_lm, "LM checkpoint")->required();
  pr->add_option("--editor", pr_editor, "editor checkpoint")->required();
  pr->add_option("--world", pr_world, "world JSON");
  pr->add_option("--data", pr_data, "counterfact JSONL");
  pr->add_option("--condition", pr_condition, "prior | contextual");
  pr->add_option("--baseline", pr_baselines, "comma list: identity,fact_probe,shortcut");
  pr->add_flag("--control", pr_control, "add the random-model control row");
  pr->add_option("--out", pr_out, "report directory");

  auto* sw = app.add_subcommand("sweep-layers", "train one editor per layer and pick the best");
  std::string sw_lm, sw_world, sw_data, sw_task = "counterfact", sw_out;
  int sw_subset = 1000;
  sw->add_option("--lm", sw_lm, "LM checkpoint")->required();
  sw->add_option("--world", sw_world, "world JSON");
  sw->add_option("--data", sw_data, "sample JSONL");
  sw->add_option("--task", sw_task, "counterfact | bios | concept");
  sw->add_option("--subset", sw_subset, "editor training subset per layer");
  sw->add_option("--out", sw_out, "report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg = load_config(config_path);
    if (seed_set) cfg.seed = seed_flag;
    std::string workdir = resolve_workdir(workdir_flag, cfg);
    fs::create_directories(workdir);
    auto dft = [&](const std::string& v, const std::string& name) {
      return v.empty() ? under(workdir, name) : v;
    };

    if (*gen) return cmd_gen_world(cfg, gen_out.empty() ? workdir : gen_out);

    if (*tlm) {
      double threshold = tlm_threshold >= 0.0 ? tlm_threshold : cfg.accuracy_threshold;
      return cmd_train_lm(cfg, dft(tlm_world, "world.json"), dft(tlm_corpus, "corpus.txt"),
                          dft(tlm_out, "lm.rmdf"), threshold);
    }

    if (*ted) {
      EditTrainConfig ec = editor_defaults_for_task(ted_task);
      if (ted_layer >= 0) ec.layer = ted_layer;
      if (ted_l1 >= 0.0) ec.lambda1 = ted_l1;
      if (ted_l2 >= 0.0) ec.lambda2 = ted_l2;
      if (ted_lr > 0.0) ec.learning_rate = ted_lr;
      if (ted_epochs > 0) ec.max_epochs = ted_epochs;
      if (ted_patience > 0) ec.patience = ted_patience;
      if (ted_batch > 0) ec.batch_size = ted_batch;
      if (!ted_loss_form.empty()) ec.loss_form = loss_form_from_name(ted_loss_form);
      std::string data = ted_data.empty()
                             ? under(workdir, ted_task == "concept" ? "concepts.jsonl" : ted_task + ".jsonl")
                             : ted_data;
      return cmd_train_editor(cfg, ted_lm, dft(ted_world, "world.json"), data, ted_task,
                              dft(ted_out, "editor." + ted_task + ".rmdf"), ec);
    }

    if (*ev) {
      std::string data = ev_data.empty()
                             ? under(workdir, ev_task == "concept" ? "concepts.jsonl" : ev_task + ".jsonl")
                             : ev_data;
      return cmd_eval(cfg, ev_lm, ev_editor, dft(ev_world, "world.json"), data, ev_task, ev_method,
                      ev_out.empty() ? under(workdir, "reports") : ev_out, ev_new_tokens);
    }

    if (*pr) {
      return cmd_probe(cfg, pr_lm, pr_editor, dft(pr_world, "world.json"),
                       pr_data.empty() ? under(workdir, "counterfact.jsonl") : pr_data, pr_condition,
                       pr_baselines, pr_control, pr_out.empty() ? under(workdir, "reports") : pr_out);
    }

    if (*sw) {
      std::string data = sw_data.empty()
                             ? under(workdir, sw_task == "concept" ? "concepts.jsonl" : sw_task + ".jsonl")
                             : sw_data;
      return cmd_sweep_layers(cfg, sw_lm, dft(sw_world, "world.json"), data, sw_task, sw_subset,
                              sw_out.empty() ? under(workdir, "reports") : sw_out);
    }
  } catch (const CheckpointFormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointIntegrityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::length_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::runtime_error& e) {
    std::string what = e.what();
    std::cerr << "error: " << what << "\n";
    bool io = what.find("cannot open") != std::string::npos || what.find("write failed") != std::string::npos;
    return io ? kExitIo : kExitUsage;
  }
  return kExitUsage;
}
