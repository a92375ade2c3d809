#include "dlr/synthtask.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "dlr/errors.hpp"

namespace dlr {

namespace {

constexpr std::array<std::string_view, 5> kShapeNames = {"circle", "square", "star", "triangle", "empty"};
constexpr std::array<std::string_view, 6> kColorNames = {"red", "green", "blue", "yellow", "white", "black"};
constexpr std::array<std::string_view, 3> kFamilyNames = {"attribute", "relational", "global"};
constexpr std::array<std::string_view, 11> kCountWords = {"zero", "one", "two",   "three", "four", "five",
                                                         "six",  "seven", "eight", "nine",  "ten"};
constexpr char kShapeChars[] = {'c', 's', '*', 't', '.'};
constexpr char kColorChars[] = {'r', 'g', 'b', 'y', 'w', 'k'};

constexpr std::array<std::array<std::uint8_t, 3>, 6> kPalette = {{
    {220, 40, 40}, {40, 180, 60}, {40, 80, 220}, {230, 210, 40}, {245, 245, 245}, {15, 15, 15}}};
constexpr std::uint8_t kBackground = 128;

// 4×4 silhouettes, row-major, one bit per pixel.
constexpr std::array<std::uint16_t, 4> kSilhouettes = {
    0b0110'1111'1111'0110,  // circle
    0b1111'1111'1111'1111,  // square
    0b1001'0110'0110'1001,  // star
    0b1000'1100'1110'1111,  // triangle
};

struct Direction {
  std::string_view phrase;  // as it appears in questions
  int dr;
  int dc;
};
constexpr std::array<Direction, 4> kDirections = {{
    {"left of", 0, -1}, {"right of", 0, 1}, {"above", -1, 0}, {"below", 1, 0}}};

class Builder {
 public:
  Builder(std::uint64_t seed, Family family, int size) : size_(size) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(family), static_cast<std::uint32_t>(size)};
    rng_.seed(seq);
    cells_.assign(static_cast<std::size_t>(size) * size, Cell{});
  }

  int uniform(int n) { return static_cast<int>(rng_() % static_cast<std::uint64_t>(n)); }
  int between(int lo, int hi) { return lo + uniform(hi - lo + 1); }
  ShapeKind random_shape() { return static_cast<ShapeKind>(uniform(kShapeCount)); }
  ColorKind random_color() { return static_cast<ColorKind>(uniform(kColorCount)); }
  ShapeKind other_shape(ShapeKind s) {
    return static_cast<ShapeKind>((static_cast<int>(s) + 1 + uniform(kShapeCount - 1)) % kShapeCount);
  }
  ColorKind other_color(ColorKind c) {
    return static_cast<ColorKind>((static_cast<int>(c) + 1 + uniform(kColorCount - 1)) % kColorCount);
  }

  // k distinct cells in random order.
  std::vector<int> pick_cells(int k) {
    std::vector<int> idx(cells_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform(static_cast<int>(idx.size()) - i)]);
    idx.resize(k);
    return idx;
  }

  void populate(int lo, int hi) {
    for (int c : pick_cells(between(lo, hi))) cells_[c] = {random_shape(), random_color()};
  }

  std::vector<int> occupied() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < cells_.size(); ++i)
      if (!cells_[i].empty()) out.push_back(static_cast<int>(i));
    return out;
  }

  int size() const { return size_; }
  std::vector<Cell>& cells() { return cells_; }

 private:
  int size_;
  std::mt19937_64 rng_;
  std::vector<Cell> cells_;
};

std::string name(ShapeKind s) { return std::string(to_string(s)); }
std::string name(ColorKind c) { return std::string(to_string(c)); }

TrajectoryStep step_of(std::string_view premise, std::string_view rationale) {
  return {split_words(premise), split_words(rationale), {}};
}

}  // namespace

std::string_view to_string(ShapeKind s) { return kShapeNames[static_cast<int>(s)]; }
std::string_view to_string(ColorKind c) { return kColorNames[static_cast<int>(c)]; }
std::string_view to_string(Family f) { return kFamilyNames[static_cast<int>(f)]; }

ShapeKind shape_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (kShapeNames[i] == s) return static_cast<ShapeKind>(i);
  throw ConfigError("unknown shape '" + std::string(s) + "'");
}

ColorKind color_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kColorNames.size(); ++i)
    if (kColorNames[i] == s) return static_cast<ColorKind>(i);
  throw ConfigError("unknown color '" + std::string(s) + "'");
}

Family family_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kFamilyNames.size(); ++i)
    if (kFamilyNames[i] == s) return static_cast<Family>(i);
  throw ConfigError("unknown task family '" + std::string(s) + "'");
}

std::vector<double> GridImage::patch_features(int index) const {
  const int row = index / size;
  const int col = index % size;
  const int width = size * patch;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(patch_dim()));
  for (int py = 0; py < patch; ++py)
    for (int px = 0; px < patch; ++px)
      for (int ch = 0; ch < 3; ++ch) {
        const std::size_t off =
            (static_cast<std::size_t>(row * patch + py) * width + static_cast<std::size_t>(col * patch + px)) * 3 + ch;
        out.push_back(pixels[off] / 255.0);
      }
  return out;
}

void GridImage::render() {
  const int width = size * patch;
  pixels.assign(static_cast<std::size_t>(width) * width * 3, kBackground);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const Cell& cell = at(r, c);
      if (cell.empty()) continue;
      const auto mask = kSilhouettes[static_cast<int>(cell.shape)];
      const auto& rgb = kPalette[static_cast<int>(cell.color)];
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) {
          const int bit = 15 - ((py * 4 / patch) * 4 + (px * 4 / patch));
          if (((mask >> bit) & 1u) == 0) continue;
          const std::size_t off = (static_cast<std::size_t>(r * patch + py) * width + (c * patch + px)) * 3;
          for (int ch = 0; ch < 3; ++ch) pixels[off + ch] = rgb[ch];
        }
    }
}

std::string task_id(Family family, int grid_size, std::uint64_t seed) {
  return std::string(to_string(family)) + "-g" + std::to_string(grid_size) + "-s" + std::to_string(seed);
}

std::vector<double> smoothed_mask(const std::vector<int>& relevant, int patch_count) {
  std::vector<double> mask(static_cast<std::size_t>(patch_count), 0.0);
  for (int i : relevant) mask[i] = 1.0 / static_cast<double>(relevant.size());
  double total = 0.0;
  for (double& x : mask) {
    x += kOracleFloor;
    total += x;
  }
  for (double& x : mask) x /= total;
  return mask;
}

ColorKind dominant_color(const std::vector<Cell>& cells) {
  std::array<int, kColorCount> counts{};
  for (const auto& c : cells)
    if (!c.empty()) ++counts[static_cast<int>(c.color)];
  const auto best = std::max_element(counts.begin(), counts.end());
  if (*best == 0 || std::count(counts.begin(), counts.end(), *best) != 1) {
    throw ConfigError("grid has no strict majority color");
  }
  return static_cast<ColorKind>(best - counts.begin());
}

TaskInstance generate_task(std::uint64_t seed, Family family, int grid_size, int patch) {
  if (grid_size < 3) throw SizeMismatch("grid_size must be at least 3");
  Builder b(seed, family, grid_size);
  auto& cells = b.cells();
  const int size = grid_size;

  TaskInstance task;
  task.id = task_id(family, grid_size, seed);
  task.family = family;
  task.seed = seed;
  Trajectory& traj = task.gold_trajectory;
  std::vector<std::vector<int>> relevant;

  switch (family) {
    case Family::attribute: {
      b.populate(6, 14);
      const auto occ = b.occupied();
      const int target = occ[b.uniform(static_cast<int>(occ.size()))];
      if (b.uniform(2) == 0) {
        const ShapeKind s = b.random_shape();
        cells[target].shape = s;
        for (int i : occ)
          if (i != target && cells[i].shape == s) cells[i].shape = b.other_shape(s);
        const std::string sn = name(s);
        const std::string cn = name(cells[target].color);
        task.question = "what color is the " + sn + " ?";
        traj.steps.push_back(step_of("locate the " + sn, "the " + sn + " is " + cn));
        task.answer = cn;
      } else {
        const ColorKind c = b.random_color();
        cells[target].color = c;
        for (int i : occ)
          if (i != target && cells[i].color == c) cells[i].color = b.other_color(c);
        const std::string cn = name(c);
        const std::string sn = name(cells[target].shape);
        task.question = "what shape is the " + cn + " object ?";
        traj.steps.push_back(step_of("locate the " + cn + " object", "the " + cn + " object is a " + sn));
        task.answer = sn;
      }
      relevant.push_back({target});
      break;
    }
    case Family::relational: {
      b.populate(6, 14);
      const Direction dir = kDirections[b.uniform(4)];
      int ar = 0;
      int ac = 0;
      do {
        ar = b.uniform(size);
        ac = b.uniform(size);
      } while (ar + dir.dr < 0 || ar + dir.dr >= size || ac + dir.dc < 0 || ac + dir.dc >= size);
      const int anchor = ar * size + ac;
      const int neighbor = (ar + dir.dr) * size + (ac + dir.dc);
      const ShapeKind s = b.random_shape();
      cells[anchor] = {s, b.random_color()};
      if (cells[neighbor].empty()) cells[neighbor] = {b.random_shape(), b.random_color()};
      for (int i : b.occupied())
        if (i != anchor && cells[i].shape == s) cells[i].shape = b.other_shape(s);
      const std::string sn = name(s);
      const std::string dn(dir.phrase);
      const Cell& nb = cells[neighbor];
      if (b.uniform(2) == 0) {
        task.question = "what color is the shape " + dn + " the " + sn + " ?";
        task.answer = name(nb.color);
      } else {
        task.question = "what shape is " + dn + " the " + sn + " ?";
        task.answer = name(nb.shape);
      }
      traj.steps.push_back(step_of("locate the " + sn, "the " + sn + " is found"));
      traj.steps.push_back(step_of("look " + dn + " the " + sn, "it is a " + name(nb.color) + " " + name(nb.shape)));
      relevant.push_back({anchor});
      relevant.push_back({neighbor});
      break;
    }
    case Family::global: {
      if (b.uniform(2) == 0) {
        const ColorKind major = b.random_color();
        while (true) {
          std::fill(cells.begin(), cells.end(), Cell{});
          const int k = b.between(7, 16);
          const int major_count = b.between(4, 7);
          const auto picked = b.pick_cells(k);
          for (int i = 0; i < k; ++i) {
            cells[picked[i]] = {b.random_shape(), i < major_count ? major : b.other_color(major)};
          }
          std::array<int, kColorCount> counts{};
          for (const auto& c : cells)
            if (!c.empty()) ++counts[static_cast<int>(c.color)];
          bool strict = true;
          for (int c = 0; c < kColorCount; ++c)
            if (c != static_cast<int>(major) && counts[c] >= counts[static_cast<int>(major)]) strict = false;
          if (strict) break;
        }
        const std::string cn = name(major);
        task.question = "what is the dominant color ?";
        traj.steps.push_back(step_of("count the colors", "most shapes are " + cn));
        task.answer = cn;
        relevant.push_back(b.occupied());
      } else {
        const ColorKind c = b.random_color();
        const int count = b.between(2, 4);
        const int k = b.between(6, 14);
        const auto picked = b.pick_cells(k);
        std::vector<int> hits;
        for (int i = 0; i < k; ++i) {
          if (i < count) {
            cells[picked[i]] = {b.random_shape(), c};
            hits.push_back(picked[i]);
          } else {
            cells[picked[i]] = {b.random_shape(), b.other_color(c)};
          }
        }
        std::sort(hits.begin(), hits.end());
        const std::string cn = name(c);
        const std::string nw(kCountWords[count]);
        task.question = "how many " + cn + " shapes are there ?";
        traj.steps.push_back(step_of("count the " + cn + " shapes", "there are " + nw + " " + cn + " shapes"));
        task.answer = nw;
        relevant.push_back(hits);
      }
      break;
    }
  }

  task.image.size = size;
  task.image.patch = patch;
  task.image.cells = cells;
  task.image.render();
  traj.question = split_words(task.question);
  traj.answer = split_words(task.answer);
  for (const auto& r : relevant) task.oracle_masks.push_back(smoothed_mask(r, size * size));
  return task;
}

TaskInstance regenerate_task(std::string_view id, int patch) {
  const auto dash1 = id.find("-g");
  const auto dash2 = id.find("-s", dash1 == std::string_view::npos ? 0 : dash1 + 2);
  if (dash1 == std::string_view::npos || dash2 == std::string_view::npos) {
    throw TaskNotFound("malformed task id '" + std::string(id) + "'");
  }
  try {
    const Family family = family_from_string(id.substr(0, dash1));
    const int grid = std::stoi(std::string(id.substr(dash1 + 2, dash2 - dash1 - 2)));
    const std::uint64_t seed = std::stoull(std::string(id.substr(dash2 + 2)));
    auto task = generate_task(seed, family, grid, patch);
    if (task.id != id) throw TaskNotFound("task id '" + std::string(id) + "' is not canonical");
    return task;
  } catch (const TaskNotFound&) {
    throw;
  } catch (const std::exception& e) {
    throw TaskNotFound("cannot resolve task id '" + std::string(id) + "': " + e.what());
  }
}

std::vector<double> oracle_attention(const TaskInstance& task, std::size_t step) {
  if (step >= task.oracle_masks.size()) {
    throw StepOutOfRange("step " + std::to_string(step) + " of task " + task.id + " with " +
                         std::to_string(task.oracle_masks.size()) + " steps");
  }
  return task.oracle_masks[step];
}

std::string normalize_answer(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (b < e && space(s[b])) ++b;
  while (e > b && space(s[e - 1])) --e;
  std::string out(s.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (!out.empty() && out.back() == '.') out.pop_back();
  while (!out.empty() && space(out.back())) out.pop_back();
  return out;
}

int exact_match(std::string_view predicted, std::string_view gold) {
  return normalize_answer(predicted) == normalize_answer(gold) ? 1 : 0;
}

std::string solve_from_cells(const GridImage& image, std::string_view question) {
  const Words q = split_words(question);
  auto find_unique = [&](auto pred) {
    int found = -1;
    for (int i = 0; i < image.patch_count(); ++i) {
      if (image.cells[i].empty() || !pred(image.cells[i])) continue;
      if (found >= 0) throw ConfigError("target is not unique");
      found = i;
    }
    if (found < 0) throw ConfigError("target not found");
    return found;
  };
  auto neighbor_of = [&](int idx, const std::string& dir) {
    for (const auto& d : kDirections) {
      if (d.phrase.substr(0, d.phrase.find(' ')) != dir) continue;
      return (idx / image.size + d.dr) * image.size + (idx % image.size + d.dc);
    }
    throw ConfigError("unknown direction " + dir);
  };

  if (q.size() == 6 && q[0] == "what" && q[1] == "color" && q[2] == "is" && q[3] == "the") {
    const ShapeKind s = shape_from_string(q[4]);
    return name(image.cells[find_unique([&](const Cell& c) { return c.shape == s; })].color);
  }
  if (q.size() == 7 && q[0] == "what" && q[1] == "shape" && q[5] == "object") {
    const ColorKind col = color_from_string(q[4]);
    return name(image.cells[find_unique([&](const Cell& c) { return c.color == col; })].shape);
  }
  if (q.size() >= 8 && q[0] == "what" && q[1] == "color" && q[4] == "shape") {
    const ShapeKind s = shape_from_string(q[q.size() - 2]);
    const int anchor = find_unique([&](const Cell& c) { return c.shape == s; });
    return name(image.cells[neighbor_of(anchor, q[5])].color);
  }
  if (q.size() >= 6 && q[0] == "what" && q[1] == "shape" && q[2] == "is") {
    const ShapeKind s = shape_from_string(q[q.size() - 2]);
    const int anchor = find_unique([&](const Cell& c) { return c.shape == s; });
    return name(image.cells[neighbor_of(anchor, q[3])].shape);
  }
  if (q.size() == 6 && q[0] == "what" && q[3] == "dominant") {
    return name(dominant_color(image.cells));
  }
  if (q.size() == 7 && q[0] == "how" && q[1] == "many") {
    const ColorKind col = color_from_string(q[2]);
    int n = 0;
    for (const auto& c : image.cells)
      if (!c.empty() && c.color == col) ++n;
    return std::string(kCountWords.at(static_cast<std::size_t>(n)));
  }
  throw ConfigError("unrecognized question '" + std::string(question) + "'");
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string encode_cells(const std::vector<Cell>& cells) {
  std::string out;
  for (const auto& c : cells) {
    out += kShapeChars[static_cast<int>(c.shape)];
    out += c.empty() ? '.' : kColorChars[static_cast<int>(c.color)];
  }
  return out;
}

std::vector<Cell> decode_cells(const std::string& s) {
  std::vector<Cell> out;
  for (std::size_t i = 0; i + 1 < s.size(); i += 2) {
    Cell c;
    const auto* sp = std::find(std::begin(kShapeChars), std::end(kShapeChars), s[i]);
    if (sp == std::end(kShapeChars)) throw IoError("bad cell code");
    c.shape = static_cast<ShapeKind>(sp - std::begin(kShapeChars));
    if (!c.empty()) {
      const auto* cp = std::find(std::begin(kColorChars), std::end(kColorChars), s[i + 1]);
      if (cp == std::end(kColorChars)) throw IoError("bad cell code");
      c.color = static_cast<ColorKind>(cp - std::begin(kColorChars));
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) chunk |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
    if (i + 2 < bytes.size()) chunk |= bytes[i + 2];
    out += kB64[(chunk >> 18) & 63];
    out += kB64[(chunk >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(chunk >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kB64[chunk & 63] : '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw IoError("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t chunk = 0;
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + j];
      int v = 0;
      if (c == '=') {
        ++pad;
      } else {
        v = value(c);
        if (v < 0) throw IoError("invalid base64 character");
      }
      chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
    }
    out.push_back(static_cast<std::uint8_t>(chunk >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((chunk >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(chunk & 0xff));
  }
  return out;
}

void write_tasks_jsonl(const std::filesystem::path& path, const std::vector<TaskInstance>& tasks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : tasks) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : t.gold_trajectory.steps) {
      steps.push_back({{"premise", join_words(s.premise)}, {"rationale", join_words(s.rationale)}});
    }
    nlohmann::json rec = {{"id", t.id},
                          {"family", std::string(to_string(t.family))},
                          {"seed", t.seed},
                          {"grid", t.image.size},
                          {"patch", t.image.patch},
                          {"cells", encode_cells(t.image.cells)},
                          {"pixels", base64_encode(t.image.pixels)},
                          {"question", t.question},
                          {"answer", t.answer},
                          {"steps", steps},
                          {"oracle_masks", t.oracle_masks}};
    out << rec.dump() << '\n';
  }
}

std::vector<TaskInstance> read_tasks_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<TaskInstance> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    TaskInstance t;
    t.id = rec.at("id").get<std::string>();
    t.family = family_from_string(rec.at("family").get<std::string>());
    t.seed = rec.at("seed").get<std::uint64_t>();
    t.image.size = rec.at("grid").get<int>();
    t.image.patch = rec.at("patch").get<int>();
    t.image.cells = decode_cells(rec.at("cells").get<std::string>());
    t.image.pixels = base64_decode(rec.at("pixels").get<std::string>());
    const std::size_t width = static_cast<std::size_t>(t.image.size) * t.image.patch;
    if (t.image.cells.size() != static_cast<std::size_t>(t.image.patch_count()) ||
        t.image.pixels.size() != width * width * 3) {
      throw IoError("task " + t.id + " has inconsistent image payload");
    }
    t.question = rec.at("question").get<std::string>();
    t.answer = rec.at("answer").get<std::string>();
    t.gold_trajectory.question = split_words(t.question);
    t.gold_trajectory.answer = split_words(t.answer);
    for (const auto& s : rec.at("steps")) {
      t.gold_trajectory.steps.push_back(
          {split_words(s.at("premise").get<std::string>()), split_words(s.at("rationale").get<std::string>()), {}});
    }
    t.oracle_masks = rec.at("oracle_masks").get<std::vector<std::vector<double>>>();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

void write_ppm(const std::filesystem::path& path, const GridImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const int width = image.size * image.patch;
  out << "P6\n" << width << ' ' << width << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

}  // namespace dlr
