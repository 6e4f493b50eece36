#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "distillforge/tensor.hpp"

namespace distillforge::metrics {

/// Positive class is malignant (label 1).
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(std::span<const int> truth, std::span<const int> predicted);

struct ScalarMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double mcc = 0.0;
  /// Some denominator was zero and the affected metric was reported as 0.
  bool degenerate = false;
};

/// Accuracy, precision, recall, F1 = 2TP / (2TP + FP + FN) and MCC. Each ratio
/// is a single correctly rounded division of exact integers.
ScalarMetrics scalar_metrics(const ConfusionCounts& c);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // score >= threshold counts as malignant; +inf for the origin
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0, 0) to (1, 1)
  double auc = 0.0;
};

/// One point per distinct score, trapezoidal area.
RocCurve roc_auc(std::span<const int> truth, std::span<const double> scores);

struct MetricsReport {
  ConfusionCounts confusion;
  ScalarMetrics scalars;
  RocCurve roc;
};

/// Predicted class is the argmax of each [b x 2] probability row (ties go to
/// benign); the ROC uses the malignant column.
MetricsReport report(std::span<const int> truth, const Tensor<float>& probabilities);

/// model,accuracy,precision,recall,f1,mcc,auc,tp,tn,fp,fn with 4-decimal metrics.
void write_report_csv(const std::string& model, const MetricsReport& report, std::ostream& out, bool header = true);
/// fpr,tpr,threshold
void write_roc_csv(const RocCurve& roc, std::ostream& out);

}  // namespace distillforge::metrics
