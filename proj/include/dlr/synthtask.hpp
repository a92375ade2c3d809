#pragma once
// Synthetic grid-image VQA tasks with gold DLR trajectories and per-step
// ground-truth attention masks.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dlr/format.hpp"

namespace dlr {

enum class ShapeKind : std::uint8_t { circle, square, star, triangle, empty };
enum class ColorKind : std::uint8_t { red, green, blue, yellow, white, black };
enum class Family : std::uint8_t { attribute, relational, global };

inline constexpr int kShapeCount = 4;  // non-empty shapes
inline constexpr int kColorCount = 6;
inline constexpr double kOracleFloor = 1e-6;

std::string_view to_string(ShapeKind s);
std::string_view to_string(ColorKind c);
std::string_view to_string(Family f);
ShapeKind shape_from_string(std::string_view s);
ColorKind color_from_string(std::string_view s);
Family family_from_string(std::string_view s);

struct Cell {
  ShapeKind shape = ShapeKind::empty;
  ColorKind color = ColorKind::red;
  bool empty() const { return shape == ShapeKind::empty; }
  bool operator==(const Cell&) const = default;
};

struct GridImage {
  int size = 8;   // cells per side
  int patch = 4;  // pixels per cell side
  std::vector<Cell> cells;            // row-major, size*size
  std::vector<std::uint8_t> pixels;   // (size*patch)^2 * 3, RGB row-major

  const Cell& at(int row, int col) const { return cells[static_cast<std::size_t>(row) * size + col]; }
  int patch_count() const { return size * size; }
  int patch_dim() const { return patch * patch * 3; }
  // Normalized pixel values of one cell, (py, px, channel) order.
  std::vector<double> patch_features(int index) const;
  void render();
  bool operator==(const GridImage&) const = default;
};

struct TaskInstance {
  std::string id;
  Family family = Family::attribute;
  std::uint64_t seed = 0;
  GridImage image;
  std::string question;
  std::string answer;
  Trajectory gold_trajectory;
  std::vector<std::vector<double>> oracle_masks;  // one distribution over patches per step

  bool operator==(const TaskInstance&) const = default;
};

TaskInstance generate_task(std::uint64_t seed, Family family, int grid_size = 8, int patch = 4);
std::string task_id(Family family, int grid_size, std::uint64_t seed);
// Inverse of task_id; throws TaskNotFound on malformed ids.
TaskInstance regenerate_task(std::string_view id, int patch = 4);

std::vector<double> oracle_attention(const TaskInstance& task, std::size_t step);
// Uniform over `relevant` patches, floored at kOracleFloor and renormalized.
std::vector<double> smoothed_mask(const std::vector<int>& relevant, int patch_count);

std::string normalize_answer(std::string_view s);
int exact_match(std::string_view predicted, std::string_view gold);

// Majority color over non-empty cells; throws when there is no strict winner.
ColorKind dominant_color(const std::vector<Cell>& cells);

// Answers a question by reading the cells directly (reference solver).
std::string solve_from_cells(const GridImage& image, std::string_view question);

// ---- dataset files ----
void write_tasks_jsonl(const std::filesystem::path& path, const std::vector<TaskInstance>& tasks);
std::vector<TaskInstance> read_tasks_jsonl(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const GridImage& image);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace dlr
