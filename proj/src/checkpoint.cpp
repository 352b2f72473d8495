#include "remedi/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace remedi {

namespace {

constexpr char kMagic[4] = {'R', 'M', 'D', 'F'};
constexpr uint16_t kVersion = 1;

void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double d) { put_u64(buf, std::bit_cast<uint64_t>(d)); }

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw CheckpointIntegrityError("checkpoint truncated");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint8_t>(buf[pos]) | (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string serialize(const Container& c) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u16(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(c.config_json.size()));
  buf.append(c.config_json);
  put_u32(buf, static_cast<uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) {
    put_u16(buf, static_cast<uint16_t>(name.size()));
    buf.append(name);
    buf.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(buf, static_cast<uint32_t>(t.dim(i)));
    for (int64_t i = 0; i < t.size(); ++i) put_f64(buf, t.data()[i]);
  }
  put_u64(buf, fnv1a64(buf.data(), buf.size()));
  return buf;
}

}  // namespace

void save_container(const Container& c, const std::string& path) {
  std::string buf = serialize(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

uint64_t container_checksum(const Container& c) {
  std::string buf = serialize(c);
  return fnv1a64(buf.data(), buf.size());
}

Container load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 4 + 2 + 8) throw CheckpointIntegrityError("checkpoint truncated: " + path);
  if (buf.compare(0, 4, kMagic, 4) != 0)
    throw CheckpointFormatError("bad magic bytes in " + path);
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<uint64_t>(static_cast<uint8_t>(buf[buf.size() - 8 + i])) << (8 * i);
  uint64_t actual = fnv1a64(buf.data(), buf.size() - 8);
  if (stored != actual) throw CheckpointIntegrityError("checksum mismatch in " + path);

  Reader r{buf, 4};
  uint16_t version = r.u16();
  if (version != kVersion)
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
  Container c;
  c.config_json = r.bytes(r.u32());
  uint32_t n_params = r.u32();
  for (uint32_t i = 0; i < n_params; ++i) {
    std::string name = r.bytes(r.u16());
    int rank = static_cast<uint8_t>(r.bytes(1)[0]);
    Shape shape(static_cast<size_t>(rank));
    int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      shape[static_cast<size_t>(d)] = static_cast<int>(r.u32());
      numel *= shape[static_cast<size_t>(d)];
    }
    std::vector<double> data(static_cast<size_t>(numel));
    for (int64_t k = 0; k < numel; ++k) data[static_cast<size_t>(k)] = r.f64();
    c.params.emplace(std::move(name), Tensor::from(shape, std::move(data)));
  }
  return c;
}

// --- LM checkpoints ----------------------------------------------------------

void save_checkpoint(const TransformerLM& lm, const std::string& path) {
  nlohmann::json cfg;
  cfg["type"] = "lm";
  cfg["vocab_size"] = lm.config.vocab_size;
  cfg["d_model"] = lm.config.d_model;
  cfg["n_layers"] = lm.config.n_layers;
  cfg["n_heads"] = lm.config.n_heads;
  cfg["max_seq_len"] = lm.config.max_seq_len;
  cfg["dropout_rate"] = lm.config.dropout_rate;
  cfg["seed"] = lm.config.seed;
  cfg["vocab_hash"] = lm.config.vocab_hash;
  cfg["training_step_count"] = lm.training_step_count;

  Container c;
  c.config_json = cfg.dump();
  c.params = lm.params;
  save_container(c, path);
}

TransformerLM load_checkpoint(const std::string& path, uint64_t expected_vocab_hash) {
  Container c = load_container(path);
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(c.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("bad config block: ") + e.what());
  }
  if (cfg.value("type", "") != "lm") throw CheckpointFormatError("not an LM checkpoint: " + path);

  TransformerLM lm;
  try {
    lm.config.vocab_size = cfg.at("vocab_size").get<int>();
    lm.config.d_model = cfg.at("d_model").get<int>();
    lm.config.n_layers = cfg.at("n_layers").get<int>();
    lm.config.n_heads = cfg.at("n_heads").get<int>();
    lm.config.max_seq_len = cfg.at("max_seq_len").get<int>();
    lm.config.dropout_rate = cfg.at("dropout_rate").get<double>();
    lm.config.seed = cfg.at("seed").get<uint64_t>();
    lm.config.vocab_hash = cfg.at("vocab_hash").get<uint64_t>();
    lm.training_step_count = cfg.at("training_step_count").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("config block missing fields: ") + e.what());
  }
  lm.config.validate();
  if (expected_vocab_hash != 0 && lm.config.vocab_hash != expected_vocab_hash)
    throw CheckpointIntegrityError("vocabulary hash mismatch for " + path);

  // skeleton defines the required parameter set and shapes
  TransformerLM skeleton = TransformerLM::init(lm.config);
  for (const auto& [name, t] : skeleton.params) {
    auto it = c.params.find(name);
    if (it == c.params.end()) throw CheckpointFormatError("checkpoint missing parameter " + name);
    if (it->second.shape() != t.shape())
      throw CheckpointFormatError("parameter " + name + " has shape " + shape_str(it->second.shape()) +
                                  ", expected " + shape_str(t.shape()));
  }
  if (c.params.size() != skeleton.params.size())
    throw CheckpointFormatError("checkpoint has unexpected extra parameters");
  lm.params = std::move(c.params);
  return lm;
}

}  // namespace remedi
