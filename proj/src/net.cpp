#include "ilcot/net.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "ilcot/error.hpp"
#include "ilcot/rng.hpp"

namespace ilcot {

EmbedKind embed_kind(VisKind k) {
  switch (k) {
    case VisKind::Mask: return EmbedKind::Mask;
    case VisKind::Content: return EmbedKind::Content;
    case VisKind::Final: return EmbedKind::Final;
  }
  return EmbedKind::Final;
}

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
  ParamLayout p;
  auto add = [&](std::string name, int rows, int cols) {
    p.specs.push_back({std::move(name), rows, cols});
    return static_cast<int>(p.specs.size()) - 1;
  };
  const int d = cfg.d, h = cfg.d * cfg.mlp_ratio;
  p.tok_emb = add("tok_emb", cfg.vocab, d);
  p.patch_in = add("patch_in", kPatchDim, d);
  p.patch_in_b = add("patch_in_b", 1, d);
  p.pos1d = add("pos1d", kMaxPositions, d);
  p.pos2d = add("pos2d", kNumPatches, d);
  p.kind_emb = add("kind_emb", kNumEmbedKinds, d);
  p.time_w = add("time_w", d, d);
  p.time_b = add("time_b", 1, d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    LayerIndex li{};
    li.ln1_g = add(pre + "ln1_g", 1, d);
    li.ln1_b = add(pre + "ln1_b", 1, d);
    li.wq = add(pre + "wq", d, d);
    li.bq = add(pre + "bq", 1, d);
    li.wk = add(pre + "wk", d, d);
    li.bk = add(pre + "bk", 1, d);
    li.wv = add(pre + "wv", d, d);
    li.bv = add(pre + "bv", 1, d);
    li.wo = add(pre + "wo", d, d);
    li.bo = add(pre + "bo", 1, d);
    li.ln2_g = add(pre + "ln2_g", 1, d);
    li.ln2_b = add(pre + "ln2_b", 1, d);
    li.w1 = add(pre + "w1", d, h);
    li.b1 = add(pre + "b1", 1, h);
    li.w2 = add(pre + "w2", h, d);
    li.b2 = add(pre + "b2", 1, d);
    p.layers.push_back(li);
  }
  p.lnf_g = add("lnf_g", 1, d);
  p.lnf_b = add("lnf_b", 1, d);
  p.text_head = add("text_head", d, cfg.vocab);
  p.text_head_b = add("text_head_b", 1, cfg.vocab);
  p.vel_head = add("vel_head", d, kPatchDim);
  p.vel_head_b = add("vel_head_b", 1, kPatchDim);
  return p;
}

template <typename T>
Params<T> Params<T>::zeros(const ModelConfig& cfg) {
  if (cfg.d <= 0 || cfg.heads <= 0 || cfg.d % cfg.heads != 0 || cfg.d % 2 != 0 || cfg.layers < 0)
    throw Error(Errc::UsageError, "model width must be even and divisible by the head count");
  Params p;
  p.config = cfg;
  p.layout = ParamLayout::build(cfg);
  for (const auto& s : p.layout.specs) p.tensors.push_back(Mat<T>::Zero(s.rows, s.cols));
  return p;
}

template <typename T>
Params<T> Params<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  Params p = zeros(cfg);
  Rng rng(seed);
  auto fill = [&](int idx, double stddev) {
    for (Eigen::Index i = 0; i < p[idx].size(); ++i) p[idx].data()[i] = static_cast<T>(rng.normal() * stddev);
  };
  const auto& L = p.layout;
  const double d = cfg.d;
  const double residual_scale = 1.0 / std::sqrt(2.0 * std::max(1, cfg.layers));
  fill(L.tok_emb, 0.5);
  fill(L.patch_in, 1.0 / std::sqrt(static_cast<double>(kPatchDim)));
  fill(L.pos1d, 0.1);
  fill(L.pos2d, 0.5);
  fill(L.kind_emb, 0.5);
  fill(L.time_w, 1.0 / std::sqrt(d));
  for (const auto& li : L.layers) {
    p[li.ln1_g].setOnes();
    p[li.ln2_g].setOnes();
    fill(li.wq, 1.0 / std::sqrt(d));
    fill(li.wk, 1.0 / std::sqrt(d));
    fill(li.wv, 1.0 / std::sqrt(d));
    fill(li.wo, residual_scale / std::sqrt(d));
    fill(li.w1, 1.0 / std::sqrt(d));
    fill(li.w2, residual_scale / std::sqrt(d * cfg.mlp_ratio));
  }
  p[L.lnf_g].setOnes();
  return p;
}

template <typename T>
std::size_t Params<T>::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

template <typename T>
void Params<T>::set_zero() {
  for (auto& t : tensors) t.setZero();
}

template <typename T>
bool Params<T>::all_finite() const {
  for (const auto& t : tensors)
    if (!t.allFinite()) return false;
  return true;
}

std::vector<Slot> build_slots(const InterleavedSequence& seq, const FlatStream& fs) {
  const int n = static_cast<int>(fs.tokens.size());
  if (n > kMaxPositions)
    throw Error(Errc::ContextOverflow, "stream of " + std::to_string(n) + " positions exceeds " + std::to_string(kMaxPositions));
  std::vector<Slot> slots(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& s = slots[i];
    s.position = i;
    s.token = fs.tokens[i];
    s.group = i;
    s.limit = i;
  }
  for (const auto& span : fs.images) {
    const GridImage& img = span.segment < 0 ? seq.input : std::get<VisSeg>(seq.chain[span.segment]).image;
    const Latent z = patchify(img);
    const EmbedKind kind = span.kind ? embed_kind(*span.kind) : EmbedKind::Input;
    for (int p = 0; p < kNumPatches; ++p) {
      auto& s = slots[span.start + p];
      s.patch = p;
      s.kind = kind;
      s.group = span.start;
      s.limit = span.start;
      std::copy_n(z.begin() + p * kPatchDim, kPatchDim, s.latent.begin());
    }
  }
  return slots;
}

int append_noised_block(std::vector<Slot>& slots, const ImageSpan& span, std::span<const float> z_t, float t) {
  if (z_t.size() != static_cast<std::size_t>(kGridValues)) throw Error(Errc::ShapeMismatch, "noised latent size");
  const int first = static_cast<int>(slots.size());
  for (int p = 0; p < kNumPatches; ++p) {
    Slot s = slots[span.start + p];
    s.group = first;
    s.limit = span.start;
    s.time = t;
    std::copy_n(z_t.begin() + p * kPatchDim, kPatchDim, s.latent.begin());
    slots.push_back(s);
  }
  return first;
}

template <typename T>
std::vector<T> interpolate(std::span<const T> z0, std::span<const T> z1, double t) {
  if (z0.size() != z1.size()) throw Error(Errc::ShapeMismatch, "interpolation endpoints differ in size");
  if (!(t >= 0.0 && t <= 1.0)) throw Error(Errc::TOutOfRange, "t = " + std::to_string(t));
  std::vector<T> out(z0.size());
  const T a = static_cast<T>(t), b = static_cast<T>(1.0 - t);
  for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * z1[i];
  return out;
}

double shift_time(double u, double shift) { return shift * u / (1.0 + (shift - 1.0) * u); }

std::vector<double> time_features(double t, int d) {
  const int half = d / 2;
  std::vector<double> f(static_cast<std::size_t>(d));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    f[i] = std::sin(1000.0 * t * freq);
    f[half + i] = std::cos(1000.0 * t * freq);
  }
  return f;
}

FlowSample make_flow_sample(const InterleavedSequence& seq, int segment, double t, const Latent& z1) {
  const auto* vis = std::get_if<VisSeg>(&seq.chain.at(static_cast<std::size_t>(segment)));
  if (!vis) throw Error(Errc::MalformedSequence, "flow segment is not visual");
  FlowSample fsamp;
  fsamp.segment = segment;
  fsamp.t = t;
  fsamp.z0 = patchify(vis->image);
  fsamp.z1 = z1;
  const auto zt = interpolate<float>(fsamp.z0, fsamp.z1, t);
  std::copy(zt.begin(), zt.end(), fsamp.zt.begin());
  for (int i = 0; i < kGridValues; ++i) fsamp.target[i] = fsamp.z0[i] - fsamp.z1[i];
  return fsamp;
}

FlowSample draw_flow_sample(const InterleavedSequence& seq, std::uint64_t seed, double time_shift) {
  std::vector<int> vis;
  for (std::size_t i = 0; i < seq.chain.size(); ++i)
    if (std::holds_alternative<VisSeg>(seq.chain[i])) vis.push_back(static_cast<int>(i));
  if (vis.empty()) throw Error(Errc::MalformedSequence, "no visual segment to noise");
  Rng rng(seed);
  const int segment = vis[rng.below(vis.size())];
  // The shift warps the noise level 1 - t, so draws crowd the noisy end.
  const double t = 1.0 - shift_time(rng.uniform(), time_shift);
  Latent z1;
  for (auto& v : z1) v = static_cast<float>(rng.normal());
  return make_flow_sample(seq, segment, t, z1);
}

namespace {

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

constexpr double kLnEps = 1e-5;

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, LayerNormCache<T>* cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(d);
    rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    xhat.row(i) = centered * rstd(i);
  }
  Mat<T> y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

// Returns dx; accumulates dgamma, dbeta.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& c, const Mat<T>& gamma, Mat<T>& dgamma,
                           Mat<T>& dbeta) {
  dgamma.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dxhat.row(i).sum() * inv_d;
    const T m2 = dxhat.row(i).dot(c.xhat.row(i)) * inv_d;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::tanh(static_cast<T>(kGeluC) * (u + T(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T inner = static_cast<T>(kGeluC) * (u + T(0.044715) * u * u * u);
  const T th = std::tanh(inner);
  return T(0.5) * (T(1) + th) +
         T(0.5) * u * (T(1) - th * th) * static_cast<T>(kGeluC) * (T(1) + T(3) * T(0.044715) * u * u);
}

template <typename T>
Mat<T> embed(const Params<T>& P, std::span<const Slot> slots) {
  const auto& L = P.layout;
  const int d = P.config.d;
  Mat<T> x(static_cast<Eigen::Index>(slots.size()), d);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Slot& s = slots[i];
    if (s.position < 0 || s.position >= kMaxPositions)
      throw Error(Errc::ContextOverflow, "position " + std::to_string(s.position) + " outside the positional table");
    auto row = x.row(static_cast<Eigen::Index>(i));
    row = P[L.pos1d].row(s.position) + P[L.kind_emb].row(static_cast<int>(s.kind));
    if (s.token >= 0) {
      row += P[L.tok_emb].row(s.token);
    } else {
      Eigen::Matrix<T, 1, kPatchDim> z;
      for (int k = 0; k < kPatchDim; ++k) z(k) = static_cast<T>(s.latent[k]);
      row += z * P[L.patch_in] + P[L.patch_in_b].row(0) + P[L.pos2d].row(s.patch);
      if (s.time >= 0.f) {
        const auto tf = time_features(s.time, d);
        Eigen::Matrix<T, 1, Eigen::Dynamic> f(d);
        for (int k = 0; k < d; ++k) f(k) = static_cast<T>(tf[k]);
        row += f * P[L.time_w] + P[L.time_b].row(0);
      }
    }
  }
  return x;
}

template <typename T>
void softmax_rows(Mat<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace

template <typename T>
struct Graph<T>::Impl {
  const Params<T>* params;
  std::vector<Slot> slots;
  std::vector<int> logit_rows, velocity_rows;
  Mat<T> mask_bias;

  struct Layer {
    Mat<T> x;  // input residual
    LayerNormCache<T> ln1, ln2;
    Mat<T> h1, q, k, v, o, x_mid, h2, u, g;
    std::vector<Mat<T>> probs;
  };
  std::vector<Layer> layers;
  Mat<T> x_final;
  LayerNormCache<T> lnf;
  Mat<T> hf;
  Mat<T> logits, velocity;
};

template <typename T>
Graph<T>::Graph(const Params<T>& params, std::span<const Slot> slots, std::vector<int> logit_rows,
                std::vector<int> velocity_rows)
    : impl_(std::make_unique<Impl>()) {
  auto& G = *impl_;
  G.params = &params;
  G.slots.assign(slots.begin(), slots.end());
  G.logit_rows = std::move(logit_rows);
  G.velocity_rows = std::move(velocity_rows);
  const auto& P = params;
  const auto& L = P.layout;
  const auto& cfg = P.config;
  const Eigen::Index n = static_cast<Eigen::Index>(slots.size());
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  G.mask_bias = Mat<T>::Zero(n, n);
  const T neg = -std::numeric_limits<T>::infinity();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (!(j < G.slots[i].limit || G.slots[j].group == G.slots[i].group)) G.mask_bias(i, j) = neg;

  Mat<T> x = embed(P, slots);
  G.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& li = L.layers[l];
    auto& C = G.layers[l];
    C.x = x;
    C.h1 = layer_norm(x, P[li.ln1_g], P[li.ln1_b], &C.ln1);
    C.q = (C.h1 * P[li.wq]).rowwise() + P[li.bq].row(0);
    C.k = (C.h1 * P[li.wk]).rowwise() + P[li.bk].row(0);
    C.v = (C.h1 * P[li.wv]).rowwise() + P[li.bv].row(0);
    C.o.resize(n, cfg.d);
    C.probs.resize(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      Mat<T> s = (C.q.middleCols(h * dh, dh) * C.k.middleCols(h * dh, dh).transpose()) * scale;
      s += G.mask_bias;
      softmax_rows(s);
      C.o.middleCols(h * dh, dh).noalias() = s * C.v.middleCols(h * dh, dh);
      C.probs[h] = std::move(s);
    }
    C.x_mid = x + ((C.o * P[li.wo]).rowwise() + P[li.bo].row(0));
    C.h2 = layer_norm(C.x_mid, P[li.ln2_g], P[li.ln2_b], &C.ln2);
    C.u = (C.h2 * P[li.w1]).rowwise() + P[li.b1].row(0);
    C.g = C.u.unaryExpr([](T v) { return gelu(v); });
    x = C.x_mid + ((C.g * P[li.w2]).rowwise() + P[li.b2].row(0));
  }
  G.x_final = x;
  G.hf = layer_norm(x, P[L.lnf_g], P[L.lnf_b], &G.lnf);

  Mat<T> hl(static_cast<Eigen::Index>(G.logit_rows.size()), cfg.d);
  for (std::size_t r = 0; r < G.logit_rows.size(); ++r) hl.row(static_cast<Eigen::Index>(r)) = G.hf.row(G.logit_rows[r]);
  G.logits = (hl * P[L.text_head]).rowwise() + P[L.text_head_b].row(0);
  Mat<T> hv(static_cast<Eigen::Index>(G.velocity_rows.size()), cfg.d);
  for (std::size_t r = 0; r < G.velocity_rows.size(); ++r)
    hv.row(static_cast<Eigen::Index>(r)) = G.hf.row(G.velocity_rows[r]);
  G.velocity = (hv * P[L.vel_head]).rowwise() + P[L.vel_head_b].row(0);
}

template <typename T>
Graph<T>::~Graph() = default;
template <typename T>
Graph<T>::Graph(Graph&&) noexcept = default;

template <typename T>
const Mat<T>& Graph<T>::logits() const {
  return impl_->logits;
}

template <typename T>
const Mat<T>& Graph<T>::velocity() const {
  return impl_->velocity;
}

template <typename T>
void Graph<T>::backward(const Mat<T>& d_logits, const Mat<T>& d_velocity, Params<T>& grads) const {
  const auto& G = *impl_;
  const auto& P = *G.params;
  const auto& L = P.layout;
  const auto& cfg = P.config;
  const Eigen::Index n = static_cast<Eigen::Index>(G.slots.size());
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> dhf = Mat<T>::Zero(n, cfg.d);
  if (d_logits.rows() > 0) {
    const Mat<T> dhl = d_logits * P[L.text_head].transpose();
    for (std::size_t r = 0; r < G.logit_rows.size(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      dhf.row(G.logit_rows[r]) += dhl.row(ri);
      grads[L.text_head].noalias() += G.hf.row(G.logit_rows[r]).transpose() * d_logits.row(ri);
    }
    grads[L.text_head_b].row(0) += d_logits.colwise().sum();
  }
  if (d_velocity.rows() > 0) {
    const Mat<T> dhv = d_velocity * P[L.vel_head].transpose();
    for (std::size_t r = 0; r < G.velocity_rows.size(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      dhf.row(G.velocity_rows[r]) += dhv.row(ri);
      grads[L.vel_head].noalias() += G.hf.row(G.velocity_rows[r]).transpose() * d_velocity.row(ri);
    }
    grads[L.vel_head_b].row(0) += d_velocity.colwise().sum();
  }

  Mat<T> dx = layer_norm_backward(dhf, G.lnf, P[L.lnf_g], grads[L.lnf_g], grads[L.lnf_b]);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& li = L.layers[l];
    const auto& C = G.layers[l];
    // MLP branch.
    grads[li.w2].noalias() += C.g.transpose() * dx;
    grads[li.b2].row(0) += dx.colwise().sum();
    Mat<T> du = dx * P[li.w2].transpose();
    du.array() *= C.u.unaryExpr([](T v) { return gelu_grad(v); }).array();
    grads[li.w1].noalias() += C.h2.transpose() * du;
    grads[li.b1].row(0) += du.colwise().sum();
    const Mat<T> dh2 = du * P[li.w1].transpose();
    Mat<T> dx_mid = dx + layer_norm_backward(dh2, C.ln2, P[li.ln2_g], grads[li.ln2_g], grads[li.ln2_b]);

    // Attention branch.
    grads[li.wo].noalias() += C.o.transpose() * dx_mid;
    grads[li.bo].row(0) += dx_mid.colwise().sum();
    const Mat<T> d_o = dx_mid * P[li.wo].transpose();
    Mat<T> dq(n, cfg.d), dk(n, cfg.d), dv(n, cfg.d);
    for (int h = 0; h < cfg.heads; ++h) {
      const Mat<T>& prob = C.probs[h];
      const auto doh = d_o.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = prob.transpose() * doh;
      Mat<T> dp = doh * C.v.middleCols(h * dh, dh).transpose();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * prob.array()).rowwise().sum();
      Mat<T> ds = (prob.array() * (dp.array().colwise() - rowdot.array())).matrix();
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * C.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * C.q.middleCols(h * dh, dh);
    }
    grads[li.wq].noalias() += C.h1.transpose() * dq;
    grads[li.bq].row(0) += dq.colwise().sum();
    grads[li.wk].noalias() += C.h1.transpose() * dk;
    grads[li.bk].row(0) += dk.colwise().sum();
    grads[li.wv].noalias() += C.h1.transpose() * dv;
    grads[li.bv].row(0) += dv.colwise().sum();
    Mat<T> dh1 = dq * P[li.wq].transpose();
    dh1.noalias() += dk * P[li.wk].transpose();
    dh1.noalias() += dv * P[li.wv].transpose();
    dx = dx_mid + layer_norm_backward(dh1, C.ln1, P[li.ln1_g], grads[li.ln1_g], grads[li.ln1_b]);
  }

  // Embeddings.
  for (Eigen::Index i = 0; i < n; ++i) {
    const Slot& s = G.slots[static_cast<std::size_t>(i)];
    const auto row = dx.row(i);
    grads[L.pos1d].row(s.position) += row;
    grads[L.kind_emb].row(static_cast<int>(s.kind)) += row;
    if (s.token >= 0) {
      grads[L.tok_emb].row(s.token) += row;
    } else {
      Eigen::Matrix<T, kPatchDim, 1> z;
      for (int k = 0; k < kPatchDim; ++k) z(k) = static_cast<T>(s.latent[k]);
      grads[L.patch_in].noalias() += z * row;
      grads[L.patch_in_b].row(0) += row;
      grads[L.pos2d].row(s.patch) += row;
      if (s.time >= 0.f) {
        const auto tf = time_features(s.time, cfg.d);
        Eigen::Matrix<T, Eigen::Dynamic, 1> f(cfg.d);
        for (int k = 0; k < cfg.d; ++k) f(k) = static_cast<T>(tf[k]);
        grads[L.time_w].noalias() += f * row;
        grads[L.time_b].row(0) += row;
      }
    }
  }
}

template <typename T>
LossBreakdown loss_with_samples(const Params<T>& params, std::span<const InterleavedSequence> batch,
                                std::span<const FlowSample> samples, const LossOptions& opts, Params<T>* grads) {
  if (batch.empty()) throw Error(Errc::EmptyBatch, "loss needs at least one sequence");
  if (opts.flow && samples.size() != batch.size()) throw Error(Errc::ShapeMismatch, "one flow sample per sequence");

  struct Item {
    FlatStream fs;
    Graph<T> graph;
  };
  std::vector<Item> items;
  items.reserve(batch.size());
  std::size_t total_targets = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    FlatStream fs = flatten(batch[b]);
    auto slots = build_slots(batch[b], fs);
    std::vector<int> logit_rows;
    for (int t : fs.text_targets) logit_rows.push_back(t - 1);
    std::vector<int> vel_rows;
    if (opts.flow) {
      const auto& fsamp = samples[b];
      const auto span = std::find_if(fs.images.begin(), fs.images.end(),
                                     [&](const ImageSpan& s) { return s.segment == fsamp.segment; });
      if (span == fs.images.end()) throw Error(Errc::ShapeMismatch, "flow sample segment is not a visual segment");
      const int first = append_noised_block(slots, *span, fsamp.zt, static_cast<float>(fsamp.t));
      for (int p = 0; p < kNumPatches; ++p) vel_rows.push_back(first + p);
    }
    total_targets += fs.text_targets.size();
    Graph<T> g(params, slots, std::move(logit_rows), std::move(vel_rows));
    items.push_back({std::move(fs), std::move(g)});
  }

  LossBreakdown out;
  out.lambda_ce = opts.lambda_ce;
  out.text_targets = total_targets;
  const double inv_targets = total_targets ? 1.0 / static_cast<double>(total_targets) : 0.0;
  const double inv_values = 1.0 / (static_cast<double>(batch.size()) * kGridValues);
  double ce_sum = 0.0, sq_sum = 0.0;
  if (grads && grads->tensors.size() != params.tensors.size()) *grads = Params<T>::zeros(params.config);

  for (std::size_t b = 0; b < items.size(); ++b) {
    const auto& item = items[b];
    const Mat<T>& logits = item.graph.logits();
    Mat<T> dlogits(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const int target = item.fs.tokens[item.fs.text_targets[static_cast<std::size_t>(r)]];
      const T m = logits.row(r).maxCoeff();
      const auto shifted = (logits.row(r).array() - m).eval();
      const T lse = std::log(shifted.exp().sum());
      ce_sum -= static_cast<double>(shifted(target) - lse);
      if (grads) {
        dlogits.row(r) = (shifted - lse).exp().matrix();
        dlogits(r, target) -= T(1);
      }
    }
    Mat<T> dvel(0, kPatchDim);
    if (opts.flow) {
      const Mat<T>& vel = item.graph.velocity();
      dvel.resize(vel.rows(), vel.cols());
      const auto& target = samples[b].target;
      for (int p = 0; p < kNumPatches; ++p)
        for (int k = 0; k < kPatchDim; ++k) {
          const T diff = vel(p, k) - static_cast<T>(target[p * kPatchDim + k]);
          sq_sum += static_cast<double>(diff) * static_cast<double>(diff);
          dvel(p, k) = diff;
        }
    }
    if (grads) {
      dlogits *= static_cast<T>(opts.lambda_ce * inv_targets);
      dvel *= static_cast<T>(2.0 * inv_values);
      item.graph.backward(dlogits, dvel, *grads);
    }
  }
  out.ce = ce_sum * inv_targets;
  out.mse = opts.flow ? sq_sum * inv_values : 0.0;
  out.total = opts.lambda_ce * out.ce + out.mse;
  return out;
}

namespace {

std::vector<FlowSample> draw_samples(std::span<const InterleavedSequence> batch, std::uint64_t seed, const LossOptions& opts) {
  std::vector<FlowSample> samples;
  if (!opts.flow) return samples;
  for (std::size_t b = 0; b < batch.size(); ++b)
    samples.push_back(draw_flow_sample(batch[b], derive_seed({seed, b}), opts.time_shift));
  return samples;
}

}  // namespace

template <typename T>
LossBreakdown loss(const Params<T>& params, std::span<const InterleavedSequence> batch, std::uint64_t seed,
                   const LossOptions& opts) {
  if (batch.empty()) throw Error(Errc::EmptyBatch, "loss needs at least one sequence");
  const auto samples = draw_samples(batch, seed, opts);
  return loss_with_samples<T>(params, batch, samples, opts, nullptr);
}

template <typename T>
LossBreakdown gradients(const Params<T>& params, std::span<const InterleavedSequence> batch, std::uint64_t seed,
                        const LossOptions& opts, Params<T>& grads) {
  if (batch.empty()) throw Error(Errc::EmptyBatch, "loss needs at least one sequence");
  const auto samples = draw_samples(batch, seed, opts);
  grads = Params<T>::zeros(params.config);
  return loss_with_samples<T>(params, batch, samples, opts, &grads);
}

template <typename T>
KvCache<T>::KvCache(const ModelConfig& cfg) {
  for (int l = 0; l < cfg.layers; ++l) {
    keys.push_back(Mat<T>::Zero(kMaxPositions, cfg.d));
    values.push_back(Mat<T>::Zero(kMaxPositions, cfg.d));
  }
}

namespace {

template <typename T>
Mat<T> chunk_forward(const Params<T>& P, const KvCache<T>& cache, std::span<const Slot> chunk, KvCache<T>* commit_to) {
  const auto& L = P.layout;
  const auto& cfg = P.config;
  const int len = cache.length;
  const auto c = static_cast<Eigen::Index>(chunk.size());
  if (len + c > kMaxPositions)
    throw Error(Errc::ContextOverflow, "context of " + std::to_string(len + c) + " positions exceeds " + std::to_string(kMaxPositions));
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> x = embed(P, chunk);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& li = L.layers[l];
    const Mat<T> h1 = layer_norm<T>(x, P[li.ln1_g], P[li.ln1_b], nullptr);
    const Mat<T> q = (h1 * P[li.wq]).rowwise() + P[li.bq].row(0);
    const Mat<T> k = (h1 * P[li.wk]).rowwise() + P[li.bk].row(0);
    const Mat<T> v = (h1 * P[li.wv]).rowwise() + P[li.bv].row(0);
    const auto past_k = cache.keys[l].topRows(len);
    const auto past_v = cache.values[l].topRows(len);
    Mat<T> o(c, cfg.d);
    for (int h = 0; h < cfg.heads; ++h) {
      Mat<T> s(c, len + c);
      if (len > 0) s.leftCols(len).noalias() = q.middleCols(h * dh, dh) * past_k.middleCols(h * dh, dh).transpose();
      s.rightCols(c).noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
      s *= scale;
      softmax_rows(s);
      Mat<T> oh = s.rightCols(c) * v.middleCols(h * dh, dh);
      if (len > 0) oh.noalias() += s.leftCols(len) * past_v.middleCols(h * dh, dh);
      o.middleCols(h * dh, dh) = oh;
    }
    if (commit_to) {
      commit_to->keys[l].middleRows(len, c) = k;
      commit_to->values[l].middleRows(len, c) = v;
    }
    const Mat<T> x_mid = x + ((o * P[li.wo]).rowwise() + P[li.bo].row(0));
    const Mat<T> h2 = layer_norm<T>(x_mid, P[li.ln2_g], P[li.ln2_b], nullptr);
    const Mat<T> g = ((h2 * P[li.w1]).rowwise() + P[li.b1].row(0)).unaryExpr([](T u) { return gelu(u); });
    x = x_mid + ((g * P[li.w2]).rowwise() + P[li.b2].row(0));
  }
  if (commit_to) commit_to->length = len + static_cast<int>(c);
  return layer_norm<T>(x, P[L.lnf_g], P[L.lnf_b], nullptr);
}

}  // namespace

template <typename T>
Mat<T> run_chunk(const Params<T>& params, KvCache<T>& cache, std::span<const Slot> chunk, bool commit) {
  return chunk_forward(params, cache, chunk, commit ? &cache : nullptr);
}

template <typename T>
Mat<T> run_chunk(const Params<T>& params, const KvCache<T>& cache, std::span<const Slot> chunk) {
  return chunk_forward<T>(params, cache, chunk, nullptr);
}

template <typename T>
Mat<T> text_head(const Params<T>& params, const Mat<T>& hidden) {
  const auto& L = params.layout;
  return (hidden * params[L.text_head]).rowwise() + params[L.text_head_b].row(0);
}

template <typename T>
Mat<T> velocity_head(const Params<T>& params, const Mat<T>& hidden) {
  const auto& L = params.layout;
  return (hidden * params[L.vel_head]).rowwise() + params[L.vel_head_b].row(0);
}

#define ILCOT_INSTANTIATE(T)                                                                                         \
  template struct Params<T>;                                                                                         \
  template class Graph<T>;                                                                                           \
  template struct KvCache<T>;                                                                                        \
  template std::vector<T> interpolate<T>(std::span<const T>, std::span<const T>, double);                           \
  template LossBreakdown loss_with_samples<T>(const Params<T>&, std::span<const InterleavedSequence>,                \
                                              std::span<const FlowSample>, const LossOptions&, Params<T>*);          \
  template LossBreakdown loss<T>(const Params<T>&, std::span<const InterleavedSequence>, std::uint64_t,             \
                                 const LossOptions&);                                                                \
  template LossBreakdown gradients<T>(const Params<T>&, std::span<const InterleavedSequence>, std::uint64_t,        \
                                      const LossOptions&, Params<T>&);                                               \
  template Mat<T> run_chunk<T>(const Params<T>&, KvCache<T>&, std::span<const Slot>, bool);                         \
  template Mat<T> run_chunk<T>(const Params<T>&, const KvCache<T>&, std::span<const Slot>);                         \
  template Mat<T> text_head<T>(const Params<T>&, const Mat<T>&);                                                     \
  template Mat<T> velocity_head<T>(const Params<T>&, const Mat<T>&);

ILCOT_INSTANTIATE(float)
ILCOT_INSTANTIATE(double)

}  // namespace ilcot
