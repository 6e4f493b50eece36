#include "distillforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>

#include "distillforge/errors.hpp"

namespace distillforge::metrics {
namespace {

void check_label(int label) { require(label == 0 || label == 1, ErrorKind::domain, "labels must be 0 or 1"); }

double ratio(std::uint64_t num, std::uint64_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

ConfusionCounts confusion(std::span<const int> truth, std::span<const int> predicted) {
  require(truth.size() == predicted.size(), ErrorKind::dimension,
          "confusion: " + std::to_string(truth.size()) + " labels vs " + std::to_string(predicted.size()) +
              " predictions");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    check_label(truth[i]);
    check_label(predicted[i]);
    if (truth[i] == 1) {
      (predicted[i] == 1 ? c.tp : c.fn) += 1;
    } else {
      (predicted[i] == 1 ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

ScalarMetrics scalar_metrics(const ConfusionCounts& c) {
  require(c.total() > 0, ErrorKind::size, "metrics of an empty evaluation");
  require(c.total() < (std::uint64_t{1} << 32), ErrorKind::size, "too many samples for exact metrics");
  ScalarMetrics m;
  m.accuracy = ratio(c.tp + c.tn, c.total(), m.degenerate);
  m.precision = ratio(c.tp, c.tp + c.fp, m.degenerate);
  m.recall = ratio(c.tp, c.tp + c.fn, m.degenerate);
  m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, m.degenerate);

  // the product is exact in 128 bits, so swapping the classes cannot change it
  using u128 = unsigned __int128;
  const u128 den = static_cast<u128>(c.tp + c.fp) * (c.tp + c.fn) * static_cast<u128>(c.tn + c.fp) * (c.tn + c.fn);
  if (den == 0) {
    m.degenerate = true;
  } else {
    const auto num = static_cast<long double>(static_cast<__int128>(c.tp * c.tn) - static_cast<__int128>(c.fp * c.fn));
    m.mcc = static_cast<double>(num / std::sqrt(static_cast<long double>(den)));
    m.mcc = std::clamp(m.mcc, -1.0, 1.0);
  }
  return m;
}

RocCurve roc_auc(std::span<const int> truth, std::span<const double> scores) {
  require(truth.size() == scores.size(), ErrorKind::dimension, "roc: labels and scores differ in length");
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    check_label(truth[i]);
    require(std::isfinite(scores[i]), ErrorKind::domain, "roc: non-finite score");
    (truth[i] == 1 ? pos : neg) += 1;
  }
  require(pos > 0 && neg > 0, ErrorKind::domain, "roc needs both classes present");

  std::vector<std::size_t> order(truth.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::uint64_t tp = 0, fp = 0, prev_tp = 0, prev_fp = 0;
  unsigned __int128 twice_area = 0;  // sum of (dfp) * (tp + prev_tp), in units of 1 / (2 P N)
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (truth[order[i]] == 1 ? tp : fp) += 1;
    twice_area += static_cast<unsigned __int128>(fp - prev_fp) * (tp + prev_tp);
    roc.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                          static_cast<double>(tp) / static_cast<double>(pos), s});
    prev_tp = tp;
    prev_fp = fp;
  }
  roc.auc = static_cast<double>(static_cast<long double>(twice_area) / (2.0L * pos * neg));
  return roc;
}

MetricsReport report(std::span<const int> truth, const Tensor<float>& probabilities) {
  require(!truth.empty(), ErrorKind::size, "cannot evaluate an empty split");
  require(probabilities.rank() == 2 && probabilities.dim(1) == 2 && probabilities.dim(0) == truth.size(),
          ErrorKind::dimension,
          "report expects [" + std::to_string(truth.size()) + " x 2] probabilities, got " +
              shape_str(probabilities.shape()));
  std::vector<int> predicted(truth.size());
  std::vector<double> scores(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    predicted[i] = probabilities.at(i, 1) > probabilities.at(i, 0) ? 1 : 0;
    scores[i] = probabilities.at(i, 1);
  }
  MetricsReport r;
  r.confusion = confusion(truth, predicted);
  r.scalars = scalar_metrics(r.confusion);
  const bool both = r.confusion.tp + r.confusion.fn > 0 && r.confusion.tn + r.confusion.fp > 0;
  if (both) r.roc = roc_auc(truth, scores);
  return r;
}

void write_report_csv(const std::string& model, const MetricsReport& r, std::ostream& out, bool header) {
  if (header) out << "model,accuracy,precision,recall,f1,mcc,auc,tp,tn,fp,fn\n";
  const auto& s = r.scalars;
  const auto& c = r.confusion;
  out << model << ',' << fixed4(s.accuracy) << ',' << fixed4(s.precision) << ',' << fixed4(s.recall) << ','
      << fixed4(s.f1) << ',' << fixed4(s.mcc) << ',' << fixed4(r.roc.auc) << ',' << c.tp << ',' << c.tn << ','
      << c.fp << ',' << c.fn << '\n';
}

void write_roc_csv(const RocCurve& roc, std::ostream& out) {
  out << "fpr,tpr,threshold\n";
  char buf[96];
  for (const auto& p : roc.points) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.9g\n", p.fpr, p.tpr, p.threshold);
    out << buf;
  }
}

}  // namespace distillforge::metrics
