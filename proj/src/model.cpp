#include "dlr/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "dlr/errors.hpp"

namespace dlr {

DlrModel::DlrModel(const ModelSettings& settings, std::uint64_t seed)
    : settings_(settings), vocab_(Vocab::build(settings.grounder.slots)) {
  ModelConfig mc;
  mc.d = settings.d;
  mc.layers = settings.layers;
  mc.heads = settings.heads;
  mc.ffn_mult = settings.ffn_mult;
  mc.grid = settings.grid;
  mc.patch = settings.patch;
  mc.max_seq = settings.max_seq;
  mc.vocab = vocab_.size();
  mc.placeholder_begin = Vocab::kFirstPlaceholder;
  mc.placeholder_end = Vocab::kFirstPlaceholder + settings.grounder.slots;
  std::mt19937_64 rng(seed);
  vlm_ = std::make_unique<ToyVlm>(mc, store_, rng);
  grounder_ = std::make_unique<Grounder>(settings.d, settings.grounder, store_, rng);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t CheckpointManifest::config_hash() const { return fnv1a(config_text); }

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void bytes(std::string_view s) { buf_.append(s); }
  const std::string& str() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  float f32() { return take<float>(); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

struct Block {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct Parsed {
  std::vector<Block> blocks;
  CheckpointManifest manifest;
};

Parsed parse_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.bytes(4) != "DLR1") throw CheckpointError("bad checkpoint magic in " + path.string());
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  }
  Parsed p;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Block b;
    b.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      b.shape.push_back(static_cast<int>(r.u32()));
      n *= static_cast<std::size_t>(b.shape.back());
    }
    b.values.resize(n);
    for (auto& v : b.values) v = r.f32();
    p.blocks.push_back(std::move(b));
  }
  p.manifest.stage = static_cast<int>(r.u32());
  p.manifest.seed = r.u64();
  const std::uint64_t hash = r.u64();
  p.manifest.config_text = r.bytes(r.u32());
  if (hash != p.manifest.config_hash()) throw CheckpointError("config hash mismatch in " + path.string());
  if (!r.done()) throw CheckpointError("trailing bytes in " + path.string());
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const CheckpointManifest& manifest) {
  Writer w;
  w.bytes("DLR1");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (int s : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(s));
    for (double v : p.tensor.data()) w.f32(static_cast<float>(v));
  }
  w.u32(static_cast<std::uint32_t>(manifest.stage));
  w.u64(manifest.seed);
  w.u64(manifest.config_hash());
  w.u32(static_cast<std::uint32_t>(manifest.config_text.size()));
  w.bytes(manifest.config_text);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

CheckpointManifest read_manifest(const std::filesystem::path& path) { return parse_file(path).manifest; }

CheckpointManifest load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  auto parsed = parse_file(path);
  const auto& params = store.params();
  if (parsed.blocks.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(parsed.blocks.size()) + " blocks, model has " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& b = parsed.blocks[i];
    auto t = params[i].tensor;
    if (b.name != params[i].name || b.shape != t.shape()) {
      throw CheckpointError("checkpoint block " + b.name + " does not match parameter " + params[i].name);
    }
    auto dst = t.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<double>(b.values[k]);
  }
  return parsed.manifest;
}

}  // namespace dlr
