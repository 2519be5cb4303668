#pragma once

// Accuracy, class-mean / classifier angle diagnostics and NC1 variability.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "fedgela/data.hpp"
#include "fedgela/etf.hpp"
#include "fedgela/nn.hpp"

namespace fedgela {

/// argmax over masked logits, ties to the lowest class index.
inline std::vector<int> argmax_masked(const Eigen::MatrixXd& z, const ClassMask& mask) {
  if (mask.count() == 0) throw parameter_error("predict: empty class mask");
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = -1;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      if (!mask.contains(static_cast<int>(c))) continue;
      if (best < 0 || z(i, c) > z(i, best)) best = static_cast<int>(c);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

/// A backbone together with the classifier view used to evaluate it.
struct Predictor {
  const BackboneParams* backbone = nullptr;
  const Eigen::MatrixXd* classifier = nullptr;  // d x C, already scaled
  const PhiVector* phi = nullptr;               // nullptr: unadapted
  ClassMask mask;
  double feature_norm_sq = 1.0;
};

inline std::vector<int> predict(const Predictor& p, const Eigen::MatrixXd& inputs) {
  const Eigen::MatrixXd h = features(*p.backbone, inputs, p.feature_norm_sq);
  return argmax_masked(logits(h, *p.classifier, p.phi), p.mask);
}

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw Error("empty-eval", "accuracy: empty evaluation set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Union of all client test splits.
inline std::vector<int> global_test_indices(std::span<const ClientShard> shards) {
  std::vector<int> idx;
  for (const auto& s : shards) idx.insert(idx.end(), s.test.begin(), s.test.end());
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Global model with the standard classifier over the mixed test set.
inline double generic_accuracy(const Predictor& global, const Dataset& ds, std::span<const int> test_idx) {
  if (test_idx.empty()) throw Error("empty-eval", "generic_accuracy: empty test set");
  const auto pred = predict(global, ds.rows(test_idx));
  const auto y = ds.labels_at(test_idx);
  return accuracy(pred, y);
}

struct PersonalAccuracy {
  double mean = 0.0;
  std::vector<double> per_client;  // NaN for clients with an empty test split
  int evaluated = 0;
};

/// Mean over clients of each personal predictor's accuracy on that client's
/// test split. Clients without test samples are skipped.
inline PersonalAccuracy personal_accuracy(std::span<const Predictor> models, std::span<const ClientShard> shards,
                                          const Dataset& ds) {
  if (models.size() != shards.size()) throw Error("missing-model", "personal_accuracy: need one model per client");
  PersonalAccuracy r;
  double sum = 0.0;
  for (std::size_t k = 0; k < shards.size(); ++k) {
    if (models[k].backbone == nullptr || models[k].classifier == nullptr) {
      throw Error("missing-model", "personal_accuracy: client " + std::to_string(k) + " has no model");
    }
    if (shards[k].test.empty()) {
      r.per_client.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double acc = accuracy(predict(models[k], ds.rows(shards[k].test)), ds.labels_at(shards[k].test));
    r.per_client.push_back(acc);
    sum += acc;
    ++r.evaluated;
  }
  if (r.evaluated == 0) throw Error("empty-eval", "personal_accuracy: no client has test samples");
  r.mean = sum / r.evaluated;
  return r;
}

// ---------------------------------------------------------------------------
// Geometry

struct ClassMeans {
  Eigen::MatrixXd means;     // d x C; zero columns for absent classes
  std::vector<int> present;  // ascending classes with at least one sample
};

inline ClassMeans class_means(const Eigen::MatrixXd& h, std::span<const int> labels, int classes) {
  ClassMeans r;
  r.means = Eigen::MatrixXd::Zero(h.cols(), classes);
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    r.means.col(y) += h.row(i).transpose();
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      r.means.col(c) /= counts[static_cast<std::size_t>(c)];
      r.present.push_back(c);
    }
  }
  return r;
}

/// Mean pairwise angle between all C class means of `h`.
inline double global_class_mean_angle(const Eigen::MatrixXd& h, std::span<const int> labels, int classes) {
  const ClassMeans cm = class_means(h, labels, classes);
  if (static_cast<int>(cm.present.size()) != classes) {
    throw Error("absent-class", "angle_report: some class is absent from the global test set");
  }
  return mean_pairwise_angle(cm.means, cm.present);
}

/// Mean pairwise angle between the means of the classes in `existing`
/// that occur in `labels`; nullopt when fewer than two do.
inline std::optional<double> existing_class_mean_angle(const Eigen::MatrixXd& h, std::span<const int> labels,
                                                       int classes, std::span<const int> existing) {
  const ClassMeans cm = class_means(h, labels, classes);
  std::vector<int> use;
  for (int c : existing) {
    if (std::binary_search(cm.present.begin(), cm.present.end(), c)) use.push_back(c);
  }
  if (use.size() < 2) return std::nullopt;
  return mean_pairwise_angle(cm.means, use);
}

struct ClassifierAngles {
  std::optional<double> existing;
  std::optional<double> missing;
};

/// Angles among classifier columns of a client's existing classes and among
/// its missing classes.
inline ClassifierAngles classifier_angles(const Eigen::MatrixXd& classifier, std::span<const int> existing) {
  std::vector<int> missing;
  for (int c = 0; c < classifier.cols(); ++c) {
    if (!std::binary_search(existing.begin(), existing.end(), c)) missing.push_back(c);
  }
  ClassifierAngles r;
  if (existing.size() >= 2) r.existing = mean_pairwise_angle(classifier, existing);
  if (missing.size() >= 2) r.missing = mean_pairwise_angle(classifier, missing);
  return r;
}

struct AngleReport {
  double global_all_class_mean_angle = std::numeric_limits<double>::quiet_NaN();
  double per_client_existing_class_mean_angle = std::numeric_limits<double>::quiet_NaN();
  double classifier_existing_angle = std::numeric_limits<double>::quiet_NaN();
  double classifier_missing_angle = std::numeric_limits<double>::quiet_NaN();
  int skipped_clients = 0;  // fewer than two existing classes in the local test data
};

/// Running mean that ignores missing values.
struct OptionalMean {
  double sum = 0.0;
  int n = 0;
  void add(const std::optional<double>& v) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  double value() const { return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN(); }
};

/// Trace of the average within-class covariance:
/// mean over samples of ||h_i - mean_{y_i}||^2.
inline double nc1_variability(const Eigen::MatrixXd& h, std::span<const int> labels) {
  if (h.rows() == 0) return 0.0;
  int classes = 0;
  for (int y : labels) classes = std::max(classes, y + 1);
  const ClassMeans cm = class_means(h, labels, classes);
  double total = 0.0;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    total += (h.row(i).transpose() - cm.means.col(labels[static_cast<std::size_t>(i)])).squaredNorm();
  }
  return total / static_cast<double>(h.rows());
}

}  // namespace fedgela
