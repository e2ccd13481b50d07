#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ilcot/image.hpp"
#include "ilcot/seq.hpp"

namespace ilcot {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kMaxPositions = 256;

// Rows of the segment-kind embedding.
enum class EmbedKind : int { Text = 0, Input = 1, Mask = 2, Content = 3, Final = 4 };
inline constexpr int kNumEmbedKinds = 5;
EmbedKind embed_kind(VisKind k);

struct ModelConfig {
  int d = 160;
  int layers = 3;
  int heads = 4;
  int vocab = kVocabSize;
  int mlp_ratio = 4;

  int head_dim() const { return d / heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
};

struct LayerIndex {
  int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

// Positions of each named tensor in declaration order.
struct ParamLayout {
  int tok_emb, patch_in, patch_in_b, pos1d, pos2d, kind_emb, time_w, time_b;
  std::vector<LayerIndex> layers;
  int lnf_g, lnf_b, text_head, text_head_b, vel_head, vel_head_b;
  std::vector<TensorSpec> specs;

  static ParamLayout build(const ModelConfig& cfg);
};

template <typename T>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  std::vector<Mat<T>> tensors;

  static Params zeros(const ModelConfig& cfg);
  // Random trunk, zero-initialised text and velocity heads.
  static Params init(const ModelConfig& cfg, std::uint64_t seed);

  std::size_t count() const;
  Mat<T>& operator[](int i) { return tensors[static_cast<std::size_t>(i)]; }
  const Mat<T>& operator[](int i) const { return tensors[static_cast<std::size_t>(i)]; }

  void set_zero();
  bool all_finite() const;

  template <typename U>
  Params<U> cast() const {
    Params<U> out;
    out.config = config;
    out.layout = layout;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

// One position of the model input.
struct Slot {
  int token = kPatchSlot;  // text token id, or kPatchSlot
  int position = 0;        // row of the 1D positional table
  int patch = -1;          // 0..15 for patch slots
  EmbedKind kind = EmbedKind::Text;
  int group = 0;  // slots in the same group attend to each other freely
  int limit = 0;  // every slot index < limit is visible
  float time = -1.f;  // flow time for a noised image; < 0 means clean
  std::array<float, kPatchDim> latent{};
};

// Clean input slots for a well-formed sequence, plus its flattened layout.
std::vector<Slot> build_slots(const InterleavedSequence& seq, const FlatStream& fs);

// Appends a side block carrying the noised latents of image span `span`: it
// reuses that span's positions, sees only what precedes the span plus itself,
// and no other slot sees it. Returns the index of its first slot.
int append_noised_block(std::vector<Slot>& slots, const ImageSpan& span, std::span<const float> z_t, float t);

// Rectified-flow pieces.
template <typename T>
std::vector<T> interpolate(std::span<const T> z0, std::span<const T> z1, double t);
double shift_time(double u, double shift);
std::vector<double> time_features(double t, int d);

struct FlowSample {
  int segment = -1;  // chain index of the noised visual segment
  double t = 0.0;
  Latent z0{}, z1{}, zt{}, target{};
};

// Picks one visual segment uniformly, draws u and unit Gaussian noise.
FlowSample draw_flow_sample(const InterleavedSequence& seq, std::uint64_t seed, double time_shift);
FlowSample make_flow_sample(const InterleavedSequence& seq, int segment, double t, const Latent& z1);

// Full-sequence forward pass retaining activations for backprop.
template <typename T>
class Graph {
 public:
  Graph(const Params<T>& params, std::span<const Slot> slots, std::vector<int> logit_rows, std::vector<int> velocity_rows);
  ~Graph();
  Graph(Graph&&) noexcept;

  // Logits, one row per requested row (vocab columns).
  const Mat<T>& logits() const;
  // Velocities, one row per requested row (48 columns).
  const Mat<T>& velocity() const;
  // Adds d(loss)/d(params) into `grads`.
  void backward(const Mat<T>& d_logits, const Mat<T>& d_velocity, Params<T>& grads) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct LossBreakdown {
  double ce = 0.0;
  double mse = 0.0;
  double total = 0.0;
  double lambda_ce = 1.0;
  std::size_t text_targets = 0;
};

struct LossOptions {
  double lambda_ce = 1.0;
  double time_shift = 4.0;
  bool flow = true;  // include the velocity term
};

// CE averaged over all text targets in the batch, MSE averaged over each
// example's noised segment values and then over examples.
template <typename T>
LossBreakdown loss_with_samples(const Params<T>& params, std::span<const InterleavedSequence> batch,
                                std::span<const FlowSample> samples, const LossOptions& opts, Params<T>* grads);

template <typename T>
LossBreakdown loss(const Params<T>& params, std::span<const InterleavedSequence> batch, std::uint64_t seed,
                   const LossOptions& opts = {});

// Gradient of LossBreakdown::total, written into `grads` (resized as needed).
template <typename T>
LossBreakdown gradients(const Params<T>& params, std::span<const InterleavedSequence> batch, std::uint64_t seed,
                        const LossOptions& opts, Params<T>& grads);

// Incremental decoding state: per-layer keys and values for committed slots.
template <typename T>
struct KvCache {
  std::vector<Mat<T>> keys, values;
  int length = 0;

  explicit KvCache(const ModelConfig& cfg = {});
};

// Runs `chunk` (one text token, or one image block that attends to itself
// bidirectionally) on top of the cached prefix. Returns the final-norm hidden
// states, one row per slot. Appends to the cache when `commit` is set.
template <typename T>
Mat<T> run_chunk(const Params<T>& params, KvCache<T>& cache, std::span<const Slot> chunk, bool commit);
template <typename T>
Mat<T> run_chunk(const Params<T>& params, const KvCache<T>& cache, std::span<const Slot> chunk);

template <typename T>
Mat<T> text_head(const Params<T>& params, const Mat<T>& hidden);
template <typename T>
Mat<T> velocity_head(const Params<T>& params, const Mat<T>& hidden);

// Binary checkpoint: "MUREKIT1", little-endian u32 d, layers, heads, vocab,
// patch_h, patch_w, channels, u64 parameter count, then f32 tensors in
// declaration order.
void save_checkpoint(const std::filesystem::path& path, const Params<float>& params);
Params<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace ilcot
