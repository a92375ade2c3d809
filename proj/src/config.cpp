#include "dlr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "dlr/errors.hpp"

namespace dlr {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;

Setter int_ref(int& x) {
  return [&x](const std::string& k, const std::string& v) { x = parse_number<int>(k, v); };
}
Setter dbl_ref(double& x) {
  return [&x](const std::string& k, const std::string& v) { x = parse_number<double>(k, v); };
}
Setter str_ref(std::string& x) {
  return [&x](const std::string&, const std::string& v) { x = v; };
}

}  // namespace

std::vector<Family> parse_families(const std::string& list) {
  std::vector<Family> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto name = trim(item);
    if (name.empty()) continue;
    try {
      out.push_back(family_from_string(name));
    } catch (const Error&) {
      throw ConfigError("unknown task family '" + name + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty family list");
  return out;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  c.text = text;
  std::map<std::string, Setter> keys{
      {"run.seed", [&](const std::string& k, const std::string& v) { c.run.seed = parse_number<std::uint64_t>(k, v); }},
      {"run.init_checkpoint", str_ref(c.run.init_checkpoint)},
      {"run.dev_data", str_ref(c.run.dev_data)},
      {"model.d", int_ref(c.model.d)},
      {"model.layers", int_ref(c.model.layers)},
      {"model.heads", int_ref(c.model.heads)},
      {"model.ffn_mult", int_ref(c.model.ffn_mult)},
      {"model.grid", int_ref(c.model.grid)},
      {"model.patch", int_ref(c.model.patch)},
      {"model.max_seq", int_ref(c.model.max_seq)},
      {"grounder.slots", int_ref(c.model.grounder.slots)},
      {"grounder.heads", int_ref(c.model.grounder.heads)},
      {"grounder.ffn_mult", int_ref(c.model.grounder.ffn_mult)},
      {"generate.max_steps", int_ref(c.caps.max_steps)},
      {"generate.max_new_tokens", int_ref(c.caps.max_new_tokens)},
      {"stage1.tau", dbl_ref(c.stage1.tau)},
      {"stage1.batch", int_ref(c.stage1.batch)},
      {"stage1.epochs", int_ref(c.stage1.epochs)},
      {"stage1.lr", dbl_ref(c.stage1.lr)},
      {"stage1.warmup", dbl_ref(c.stage1.warmup)},
      {"stage1.families",
       [&](const std::string&, const std::string& v) { c.stage1_families = parse_families(v); }},
      {"stage2.lr", dbl_ref(c.stage2.lr)},
      {"stage2.epochs", int_ref(c.stage2.epochs)},
      {"stage2.batch", int_ref(c.stage2.batch)},
      {"stage2.warmup", dbl_ref(c.stage2.warmup)},
      {"stage2.dev_every", int_ref(c.stage2.dev_every)},
      {"stage2.dev_count", int_ref(c.stage2.dev_count)},
      {"sglp.sigma", dbl_ref(c.sglp.sigma)},
      {"sglp.clip_eps", dbl_ref(c.sglp.clip_eps)},
      {"reward.beta", dbl_ref(c.reward.beta)},
      {"reward.lambda", dbl_ref(c.reward.lambda)},
      {"stage3.group", int_ref(c.stage3.group)},
      {"stage3.batch", int_ref(c.stage3.batch)},
      {"stage3.lr", dbl_ref(c.stage3.lr)},
      {"stage3.latent_lr_ratio", dbl_ref(c.stage3.latent_lr_ratio)},
      {"stage3.warmup", dbl_ref(c.stage3.warmup)},
      {"stage3.inner_epochs", int_ref(c.stage3.inner_epochs)},
      {"stage3.max_tasks", int_ref(c.stage3.max_tasks)},
      {"stage3.eval_every", int_ref(c.stage3.eval_every)},
      {"stage3.eval_count", int_ref(c.stage3.eval_count)},
  };
  std::set<std::string> sections;
  for (const auto& [k, _] : keys) sections.insert(k.substr(0, k.find('.')));

  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto where = " (line " + std::to_string(lineno) + ")";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section header" + where);
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError("unknown section [" + section + "]" + where);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value" + where);
    if (section.empty()) throw ConfigError("key outside of a section" + where);
    const auto key = section + "." + trim(std::string_view(line).substr(0, eq));
    const auto value = trim(std::string_view(line).substr(eq + 1));
    const auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError("unknown key " + key + where);
    if (!seen.insert(key).second) throw ConfigError("duplicate key " + key + where);
    it->second(key, value);
  }
  c.stage2.caps = c.caps;
  c.stage3.caps = c.caps;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto c = parse(ss.str());
  // Relative paths are taken relative to the config file.
  const auto base = path.parent_path();
  for (std::string* p : {&c.run.init_checkpoint, &c.run.dev_data}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return c;
}

void RunConfig::validate() const {
  ModelConfig mc;
  mc.d = model.d;
  mc.layers = model.layers;
  mc.heads = model.heads;
  mc.ffn_mult = model.ffn_mult;
  mc.grid = model.grid;
  mc.patch = model.patch;
  mc.max_seq = model.max_seq;
  mc.vocab = 1;
  mc.validate();
  if (model.grounder.slots < 1 || model.grounder.heads < 1 || model.d % model.grounder.heads != 0 ||
      model.grounder.ffn_mult < 1) {
    throw ConfigError("invalid grounder settings");
  }
  stage1.validate();
  stage2.validate();
  sglp.validate();
  reward.validate();
  stage3.validate();
}

}  // namespace dlr
