#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ilcot/image.hpp"
#include "ilcot/seq.hpp"

namespace ilcot {

enum class Shape : std::uint8_t { Square, Disc, Plus };

inline constexpr int kNumColors = 8;
// Palette ids match the colour words BLACK..MAGENTA in vocabulary order.
Rgb palette(int color);
Token color_token(int color);
Token shape_token(Shape s);
Token size_token(int size);

// Neutral canvas value for content images; not in the palette.
inline constexpr float kCanvasGray = 128.0f / 255.0f;

// Object centres sit on a 4x4 lattice so text can state positions exactly.
inline constexpr std::array<int, 4> kLattice = {3, 6, 9, 12};

struct Object {
  Shape shape = Shape::Square;
  int color = 0;
  int row = 0;  // lattice index 0..3
  int col = 0;
  int size = 3;  // 3, 5 or 7

  int center_row() const { return kLattice[row]; }
  int center_col() const { return kLattice[col]; }
  bool covers(int r, int c) const;
  friend bool operator==(const Object&, const Object&) = default;
};

struct Scene {
  int background = 0;
  std::vector<Object> objects;
  friend bool operator==(const Scene&, const Scene&) = default;
};

// Checks the scene invariants: 0-3 objects inside the grid, disjoint bounding
// boxes, colours distinct from the background, unique (colour, shape) pairs.
bool scene_valid(const Scene& s);

GridImage render(const Scene& s);
// Binary mask of `obj`'s support; throws ObjectNotInScene.
GridImage gt_mask(const Scene& s, const Object& obj);
GridImage support_mask(const Object& obj);
// The object alone on the neutral gray canvas.
GridImage render_content(const Object& obj);

enum class TaskKind : std::uint8_t { Remove, Replace, Add, Recolor, Resize, BgChange };
inline constexpr int kNumTaskKinds = 6;
inline constexpr std::array<TaskKind, kNumTaskKinds> kAllTaskKinds = {
    TaskKind::Remove, TaskKind::Replace, TaskKind::Add, TaskKind::Recolor, TaskKind::Resize, TaskKind::BgChange};

std::string_view task_kind_name(TaskKind k);
std::optional<TaskKind> task_kind_from_name(std::string_view name);

// What fills the masked region. Where `content` is present and not canvas
// gray its pixel is used; everywhere else inside the mask gets `color`.
struct EditFill {
  std::optional<GridImage> content;
  Rgb color;
};

GridImage compose_final(const GridImage& input, const GridImage& mask, const EditFill& fill, TaskKind kind);

struct TaskInstance {
  Scene scene;
  Scene edited;
  TaskKind kind = TaskKind::Remove;
  std::vector<Token> instruction;
  InterleavedSequence gt_chain;
  GridImage edit_mask;  // union of every region the edit touches
  EditFill fill;
};

TaskInstance gen_task(std::uint64_t seed, TaskKind kind);

// Replace task whose target colour is changed after the mask step: the chain
// gets SEP . revised instruction at the start of its second text segment and
// continues with the revised target.
TaskInstance gen_revision_task(std::uint64_t seed);
// Colour the revised instruction asks for, read back from the chain.
std::optional<int> revised_color(const InterleavedSequence& seq);

// Text-only chain variant: one text segment carrying the reasoning, then the
// final image; the instruction is prefixed with TEXTMODE.
InterleavedSequence to_text_only(const InterleavedSequence& seq);
bool is_text_only(const InterleavedSequence& seq);

struct Split {
  enum Name { Train, Val, Test };
};
// 90/5/5 split by a hash of the id.
Split::Name split_of(std::uint64_t id);
std::string_view split_name(Split::Name s);

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::array<double, kNumTaskKinds> mix{};
  std::array<std::vector<std::uint64_t>, 3> ids;
  std::array<std::size_t, kNumTaskKinds> kind_counts{};
};

struct Dataset {
  std::vector<Record> records;
  DatasetManifest manifest;
};

// Fraction of Replace records emitted as mid-chain revision examples.
inline constexpr double kRevisionFraction = 0.25;

Dataset gen_dataset(std::size_t n, std::uint64_t seed, const std::array<double, kNumTaskKinds>& mix);
// The task a dataset record was generated from.
TaskInstance dataset_task(std::uint64_t seed, std::uint64_t id, const std::array<double, kNumTaskKinds>& mix);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
std::vector<Record> read_records(const std::filesystem::path& jsonl);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace ilcot
