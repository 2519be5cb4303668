#pragma once

// Small MLP backbone with features projected onto the sqrt(E_H) sphere,
// bilinear (optionally phi-scaled) classifier logits, masked softmax
// cross-entropy, exact gradients and momentum SGD.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedgela/error.hpp"
#include "fedgela/etf.hpp"
#include "fedgela/rng.hpp"

namespace fedgela {

/// Layer widths d_in, hidden..., d and the matching dense weights.
struct BackboneParams {
  std::vector<int> sizes;
  std::vector<Eigen::MatrixXd> weights;  // layer l maps sizes[l] -> sizes[l+1]; shape out x in
  std::vector<Eigen::VectorXd> biases;

  int input_dim() const { return sizes.front(); }
  int feature_dim() const { return sizes.back(); }
  std::size_t layers() const { return weights.size(); }
};

/// Backbone plus, for algorithms with a learnable classifier, a d x C head
/// (no bias).
struct ModelParams {
  BackboneParams backbone;
  std::optional<Eigen::MatrixXd> head;
};

/// Every trainable tensor in a fixed order: (W_1, b_1, ..., W_L, b_L, head).
inline std::vector<std::span<double>> param_spans(ModelParams& p) {
  std::vector<std::span<double>> out;
  for (std::size_t l = 0; l < p.backbone.layers(); ++l) {
    out.emplace_back(p.backbone.weights[l].data(), static_cast<std::size_t>(p.backbone.weights[l].size()));
    out.emplace_back(p.backbone.biases[l].data(), static_cast<std::size_t>(p.backbone.biases[l].size()));
  }
  if (p.head) out.emplace_back(p.head->data(), static_cast<std::size_t>(p.head->size()));
  return out;
}

inline std::vector<std::span<const double>> param_spans(const ModelParams& p) {
  std::vector<std::span<const double>> out;
  for (auto s : param_spans(const_cast<ModelParams&>(p))) out.emplace_back(s.data(), s.size());
  return out;
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t n = 0;
  for (auto s : param_spans(p)) n += s.size();
  return n;
}

inline bool same_shape(const ModelParams& a, const ModelParams& b) {
  if (a.backbone.sizes != b.backbone.sizes || a.head.has_value() != b.head.has_value()) return false;
  if (a.head && (a.head->rows() != b.head->rows() || a.head->cols() != b.head->cols())) return false;
  return true;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for (auto s : param_spans(z)) std::fill(s.begin(), s.end(), 0.0);
  return z;
}

inline bool bit_equal(const ModelParams& a, const ModelParams& b) {
  if (!same_shape(a, b)) return false;
  const auto sa = param_spans(a);
  const auto sb = param_spans(b);
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (std::memcmp(sa[i].data(), sb[i].data(), sa[i].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

inline double glorot_bound(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

/// Weights ~ U[-s, s] with s = sqrt(6 / (fan_in + fan_out)); biases zero.
inline BackboneParams init_backbone(std::vector<int> sizes, std::uint64_t seed) {
  if (sizes.size() < 2) throw parameter_error("backbone needs at least an input and an output width");
  for (int s : sizes) {
    if (s < 1) throw parameter_error("backbone layer widths must be positive");
  }
  Rng rng(seed);
  BackboneParams p;
  p.sizes = std::move(sizes);
  for (std::size_t l = 0; l + 1 < p.sizes.size(); ++l) {
    const int in = p.sizes[l];
    const int out = p.sizes[l + 1];
    std::uniform_real_distribution<double> u(-glorot_bound(in, out), glorot_bound(in, out));
    Eigen::MatrixXd w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return p;
}

inline Eigen::MatrixXd init_head(int d, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-glorot_bound(d, classes), glorot_bound(d, classes));
  Eigen::MatrixXd w(d, classes);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return w;
}

// ---------------------------------------------------------------------------
// Class mask and per-class scaling

/// Classes allowed in the softmax denominator and in predictions.
class ClassMask {
 public:
  ClassMask() = default;
  static ClassMask full(int classes) { return ClassMask(std::vector<char>(static_cast<std::size_t>(classes), 1)); }
  static ClassMask of(int classes, std::span<const int> allowed) {
    std::vector<char> a(static_cast<std::size_t>(classes), 0);
    for (int c : allowed) {
      if (c < 0 || c >= classes) throw parameter_error("class mask: class " + std::to_string(c) + " out of range");
      a[static_cast<std::size_t>(c)] = 1;
    }
    return ClassMask(std::move(a));
  }

  int classes() const { return static_cast<int>(allowed_.size()); }
  bool contains(int c) const { return c >= 0 && c < classes() && allowed_[static_cast<std::size_t>(c)] != 0; }
  int count() const { return static_cast<int>(std::count(allowed_.begin(), allowed_.end(), 1)); }

 private:
  explicit ClassMask(std::vector<char> a) : allowed_(std::move(a)) {}
  std::vector<char> allowed_;
};

/// Per-class classifier scaling phi_{k,c}; all ones means "not adapted".
struct PhiVector {
  Eigen::VectorXd phi;

  static PhiVector ones(int classes) { return {Eigen::VectorXd::Ones(classes)}; }
  int classes() const { return static_cast<int>(phi.size()); }
};

// ---------------------------------------------------------------------------
// Forward

inline constexpr double kMinFeatureNorm = 1e-12;

struct FeatureBatch {
  Eigen::MatrixXd raw;  // B x d, backbone output before projection
  Eigen::MatrixXd h;    // B x d, rows of norm sqrt(E_H)
  double feature_norm_sq = 1.0;
};

struct ForwardCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;   // pre-activations per layer
  std::vector<Eigen::MatrixXd> post;  // post[0] = input, post[l+1] = relu(pre[l]) (last: pre[L-1])
  Eigen::VectorXd norms;              // ||raw_i||
  FeatureBatch features;
  std::uint64_t fingerprint = 0;
};

inline std::uint64_t fingerprint(const BackboneParams& p) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const double* data, Eigen::Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t l = 0; l < p.layers(); ++l) {
    mix(p.weights[l].data(), p.weights[l].size());
    mix(p.biases[l].data(), p.biases[l].size());
  }
  return h;
}

inline ForwardCache forward(const BackboneParams& p, const Eigen::MatrixXd& inputs, double feature_norm_sq) {
  if (inputs.cols() != p.input_dim()) {
    throw shape_error("forward: input width " + std::to_string(inputs.cols()) + " != architecture d_in " +
                      std::to_string(p.input_dim()));
  }
  if (!(feature_norm_sq > 0.0)) throw parameter_error("forward: E_H must be positive");
  ForwardCache cache;
  cache.input = inputs;
  cache.post.push_back(inputs);
  const std::size_t layers = p.layers();
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd z = cache.post.back() * p.weights[l].transpose();
    z.rowwise() += p.biases[l].transpose();
    cache.pre.push_back(z);
    if (l + 1 < layers) {
      cache.post.push_back(z.cwiseMax(0.0));
    } else {
      cache.post.push_back(std::move(z));
    }
  }
  FeatureBatch& f = cache.features;
  f.raw = cache.post.back();
  if (!f.raw.allFinite()) throw numeric_error("forward: non-finite activations");
  f.feature_norm_sq = feature_norm_sq;
  cache.norms = f.raw.rowwise().norm();
  const double radius = std::sqrt(feature_norm_sq);
  f.h.resize(f.raw.rows(), f.raw.cols());
  for (Eigen::Index i = 0; i < f.raw.rows(); ++i) {
    if (!(cache.norms(i) >= kMinFeatureNorm)) {
      throw numeric_error("forward: degenerate feature (norm below 1e-12) at row " + std::to_string(i));
    }
    f.h.row(i) = (radius / cache.norms(i)) * f.raw.row(i);
  }
  cache.fingerprint = fingerprint(p);
  return cache;
}

inline Eigen::MatrixXd features(const BackboneParams& p, const Eigen::MatrixXd& inputs, double feature_norm_sq) {
  return forward(p, inputs, feature_norm_sq).features.h;
}

// ---------------------------------------------------------------------------
// Logits and loss

/// z_{ic} = phi_c * <classifier_c, h_i>; phi == nullptr means phi = 1.
inline Eigen::MatrixXd logits(const Eigen::MatrixXd& h, const Eigen::MatrixXd& classifier, const PhiVector* phi) {
  if (h.cols() != classifier.rows()) {
    throw shape_error("logits: feature dim " + std::to_string(h.cols()) + " != classifier dim " +
                      std::to_string(classifier.rows()));
  }
  Eigen::MatrixXd z = h * classifier;
  if (phi != nullptr) {
    if (phi->classes() != classifier.cols()) throw shape_error("logits: phi length != class count");
    z = z * phi->phi.asDiagonal();
  }
  return z;
}

inline Eigen::MatrixXd logits(const FeatureBatch& f, const EtfClassifier& etf, const PhiVector* phi) {
  return logits(f.h, etf.weights(), phi);
}

namespace detail {

inline void check_labels(std::span<const int> labels, const ClassMask& mask, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) throw shape_error("loss: label count != batch size");
  if (mask.classes() != cols) throw shape_error("loss: mask size != class count");
  for (int y : labels) {
    if (!mask.contains(y)) throw Error("invalid-label", "label " + std::to_string(y) + " is outside the class mask");
  }
}

// Softmax restricted to mask; writes probabilities (0 outside mask) and
// returns -log p[label] for row i.
inline double masked_softmax_row(const Eigen::MatrixXd& z, Eigen::Index i, const ClassMask& mask, int label,
                                 Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> prob) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    if (mask.contains(static_cast<int>(c))) mx = std::max(mx, z(i, c));
  }
  double sum = 0.0;
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    if (mask.contains(static_cast<int>(c))) {
      prob(c) = std::exp(z(i, c) - mx);
      sum += prob(c);
    } else {
      prob(c) = 0.0;
    }
  }
  prob /= sum;
  return std::log(sum) - (z(i, label) - mx);
}

}  // namespace detail

/// Mean over the batch of -log softmax(z_i)[y_i], softmax taken over masked
/// classes only.
inline double ce_loss(const Eigen::MatrixXd& z, std::span<const int> labels, const ClassMask& mask) {
  detail::check_labels(labels, mask, z.rows(), z.cols());
  Eigen::RowVectorXd prob(z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) total += detail::masked_softmax_row(z, i, mask, labels[static_cast<std::size_t>(i)], prob);
  return total / static_cast<double>(z.rows());
}

/// dLoss/dz for the mean masked cross-entropy.
inline Eigen::MatrixXd ce_loss_grad(const Eigen::MatrixXd& z, std::span<const int> labels, const ClassMask& mask) {
  detail::check_labels(labels, mask, z.rows(), z.cols());
  Eigen::MatrixXd g(z.rows(), z.cols());
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    detail::masked_softmax_row(z, i, mask, labels[static_cast<std::size_t>(i)], g.row(i));
    g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    g.row(i) *= inv_b;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Backward

struct Gradients {
  ModelParams params;      // same shapes as the model
  Eigen::MatrixXd dfeatures;  // dLoss/dh, B x d
};

/// Exact gradients of ce_loss(logits(forward(x))) w.r.t. the backbone and,
/// when `head` is set, w.r.t. that learnable classifier. A fixed classifier
/// is passed as `classifier` with `head == nullptr` and gets no gradient.
inline Gradients backward(const ForwardCache& cache, const BackboneParams& p, std::span<const int> labels,
                          const Eigen::MatrixXd& classifier, bool classifier_trainable, const PhiVector* phi,
                          const ClassMask& mask) {
  if (cache.fingerprint != fingerprint(p) || cache.pre.size() != p.layers()) {
    throw Error("cache-mismatch", "backward: cache was produced by different parameters");
  }
  const FeatureBatch& f = cache.features;
  const Eigen::MatrixXd z = logits(f.h, classifier, phi);
  Eigen::MatrixXd dz = ce_loss_grad(z, labels, mask);
  if (phi != nullptr) dz = dz * phi->phi.asDiagonal();  // d(h W)

  Gradients g;
  g.params.backbone.sizes = p.sizes;
  if (classifier_trainable) g.params.head = f.h.transpose() * dz;
  g.dfeatures = dz * classifier.transpose();

  // Through h = r * raw / ||raw||.
  const double radius = std::sqrt(f.feature_norm_sq);
  Eigen::MatrixXd delta(f.raw.rows(), f.raw.cols());
  for (Eigen::Index i = 0; i < f.raw.rows(); ++i) {
    const double n = cache.norms(i);
    const Eigen::RowVectorXd u = f.raw.row(i) / n;
    const Eigen::RowVectorXd dh = g.dfeatures.row(i);
    delta.row(i) = (radius / n) * (dh - dh.dot(u) * u);
  }

  const std::size_t layers = p.layers();
  g.params.backbone.weights.resize(layers);
  g.params.backbone.biases.resize(layers);
  for (std::size_t l = layers; l-- > 0;) {
    if (l + 1 < layers) delta = delta.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
    g.params.backbone.weights[l] = delta.transpose() * cache.post[l];
    g.params.backbone.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) delta = delta * p.weights[l];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Objective: everything a local step optimizes.

/// Loss definition for one client/algorithm: classifier (fixed or the
/// model's own head), phi scaling, softmax mask, feature radius and an
/// optional proximal pull toward `prox_anchor`.
struct Objective {
  const Eigen::MatrixXd* fixed_classifier = nullptr;  // used when the model has no head
  PhiVector phi;
  ClassMask mask;
  double feature_norm_sq = 1.0;
  double prox_mu = 0.0;
  const ModelParams* prox_anchor = nullptr;

  const Eigen::MatrixXd& classifier(const ModelParams& p) const {
    if (p.head) return *p.head;
    if (fixed_classifier == nullptr) throw parameter_error("objective: model has no head and no fixed classifier");
    return *fixed_classifier;
  }
};

inline double prox_penalty(const ModelParams& p, const Objective& obj) {
  if (obj.prox_anchor == nullptr || obj.prox_mu == 0.0) return 0.0;
  const auto a = param_spans(p);
  const auto b = param_spans(*obj.prox_anchor);
  double s = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      const double d = a[t][i] - b[t][i];
      s += d * d;
    }
  }
  return 0.5 * obj.prox_mu * s;
}

inline double objective_loss(const ModelParams& p, const Eigen::MatrixXd& x, std::span<const int> y,
                             const Objective& obj) {
  const ForwardCache cache = forward(p.backbone, x, obj.feature_norm_sq);
  const Eigen::MatrixXd z = logits(cache.features.h, obj.classifier(p), &obj.phi);
  return ce_loss(z, y, obj.mask) + prox_penalty(p, obj);
}

/// Returns the loss and writes its gradient into `grad` (reshaped as needed).
inline double objective_grad(const ModelParams& p, const Eigen::MatrixXd& x, std::span<const int> y,
                             const Objective& obj, ModelParams& grad) {
  const ForwardCache cache = forward(p.backbone, x, obj.feature_norm_sq);
  const Eigen::MatrixXd& w = obj.classifier(p);
  const Eigen::MatrixXd z = logits(cache.features.h, w, &obj.phi);
  const double loss = ce_loss(z, y, obj.mask) + prox_penalty(p, obj);
  Gradients g = backward(cache, p.backbone, y, w, p.head.has_value(), &obj.phi, obj.mask);
  grad = std::move(g.params);
  if (obj.prox_anchor != nullptr && obj.prox_mu != 0.0) {
    if (!same_shape(p, *obj.prox_anchor)) throw shape_error("objective: proximal anchor shape mismatch");
    auto gs = param_spans(grad);
    const auto ps = param_spans(p);
    const auto as = param_spans(*obj.prox_anchor);
    for (std::size_t t = 0; t < gs.size(); ++t) {
      for (std::size_t i = 0; i < gs[t].size(); ++i) gs[t][i] += obj.prox_mu * (ps[t][i] - as[t][i]);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// SGD with classical momentum and additive weight decay

struct OptimizerState {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::optional<ModelParams> buffers;  // allocated on first step
};

/// buf <- momentum * buf + grad + wd * param;  param <- param - lr * buf.
inline void sgd_step(ModelParams& params, const ModelParams& grads, OptimizerState& state) {
  if (!(state.lr > 0.0)) throw parameter_error("sgd: learning rate must be positive");
  if (!same_shape(params, grads)) throw shape_error("sgd: gradient shapes do not match parameters");
  if (!state.buffers) state.buffers = zeros_like(params);
  if (!same_shape(params, *state.buffers)) throw shape_error("sgd: momentum buffer shapes do not match parameters");
  auto ps = param_spans(params);
  const auto gs = param_spans(grads);
  auto bs = param_spans(*state.buffers);
  for (std::size_t t = 0; t < ps.size(); ++t) {
    if (ps[t].size() != gs[t].size()) throw shape_error("sgd: tensor size mismatch");
    for (std::size_t i = 0; i < ps[t].size(); ++i) {
      bs[t][i] = state.momentum * bs[t][i] + gs[t][i] + state.weight_decay * ps[t][i];
      ps[t][i] -= state.lr * bs[t][i];
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline constexpr double kGradCheckFloor = 1e-6;

/// Compares the analytic gradient against central differences on
/// `n_probes` randomly chosen scalars. Relative error uses
/// max(|analytic|, |numeric|, 1e-6) as denominator. Very small steps
/// (e.g. 1e-12) are dominated by cancellation and give meaningless results.
/// `tamper`, when set, is applied to the analytic gradient before comparing.
inline GradCheckResult finite_diff_check(const ModelParams& params, const Eigen::MatrixXd& x, std::span<const int> y,
                                         const Objective& obj, double step, int n_probes, std::uint64_t seed,
                                         const std::function<void(ModelParams&)>& tamper = {}) {
  if (!(step > 0.0)) throw parameter_error("finite_diff_check: step must be positive");
  ModelParams grad;
  objective_grad(params, x, y, obj, grad);
  if (tamper) tamper(grad);
  ModelParams probe = params;
  auto ps = param_spans(probe);
  const auto gs = param_spans(grad);
  const std::size_t total = param_count(params);
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult r;
  for (int n = 0; n < n_probes; ++n) {
    std::size_t flat = pick(rng);
    std::size_t t = 0;
    while (flat >= ps[t].size()) flat -= ps[t++].size();
    const double orig = ps[t][flat];
    ps[t][flat] = orig + step;
    const double up = objective_loss(probe, x, y, obj);
    ps[t][flat] = orig - step;
    const double down = objective_loss(probe, x, y, obj);
    ps[t][flat] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = gs[t][flat];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
    if (n == 0 || rel > r.max_rel_error) r = GradCheckResult{rel, t, flat, analytic, numeric};
  }
  return r;
}

// ---------------------------------------------------------------------------
// Layer-peeled oracle: free features under a fixed ETF head.

/// Projected gradient descent on per-sample free features h_i (rows of the
/// result) for the fixed-ETF cross-entropy with phi = 1, each step followed
/// by projection onto the sqrt(E_H) sphere.
inline Eigen::MatrixXd lpm_feature_fit(const EtfClassifier& etf, std::span<const int> labels, double feature_norm_sq,
                                       int iterations, double lr, std::uint64_t seed) {
  const int c = etf.classes();
  const int d = etf.dim();
  if (d < c) throw dimension_error("lpm_feature_fit: need d >= C");
  for (int y : labels) {
    if (y < 0 || y >= c) throw parameter_error("lpm_feature_fit: label out of range");
  }
  const double radius = std::sqrt(feature_norm_sq);
  const Eigen::MatrixXd w = etf.weights();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(labels.size());
  Eigen::MatrixXd h(n, d);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < n; ++i) h.row(i) *= radius / h.row(i).norm();

  const ClassMask mask = ClassMask::full(c);
  for (int it = 0; it < iterations; ++it) {
    const Eigen::MatrixXd z = h * w;
    // Per-sample gradient (undo the batch mean).
    const Eigen::MatrixXd dz = ce_loss_grad(z, labels, mask) * static_cast<double>(n);
    h -= lr * (dz * w.transpose());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = h.row(i).norm();
      if (!(norm >= kMinFeatureNorm)) throw numeric_error("lpm_feature_fit: feature collapsed to zero");
      h.row(i) *= radius / norm;
    }
  }
  return h;
}

}  // namespace fedgela
