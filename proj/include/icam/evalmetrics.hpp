#pragma once

// Quantitative protocol: NCC against ground truth, regression and
// correlation statistics, the flip test, and the long-format metrics table.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "icam/grid.hpp"

namespace icam::eval {

/// Pearson correlation of `a` and `b` over pixels where `mask` is set.
/// Throws DegenerateInputError for < 2 mask pixels or a constant input.
double ncc(std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> mask);
double ncc(const Image& a, const Image& b, const Mask& mask);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::int64_t n = 0;
};

MeanStd mean_std(std::span<const double> values);

enum class Direction { pos, neg };
std::string to_string(Direction d);

struct SkipRecord {
  std::size_t index = 0;
  std::string reason;
};

struct AttributionScore {
  MeanStd ncc;
  std::vector<double> per_subject;  // NaN where skipped
  std::vector<SkipRecord> skipped;
};

/// Per subject ncc(|map|, |gt|, mask) (signed values when `absolute` is
/// false). Degenerate subjects are recorded as skips.
AttributionScore evaluate_attribution(const std::vector<Image>& maps, const std::vector<Image>& gt_diffs,
                                      const std::vector<Mask>& masks, bool absolute = true);

double pearson(std::span<const double> a, std::span<const double> b);
/// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(std::span<const double> values);
double spearman(std::span<const double> a, std::span<const double> b);
/// Two-sided p-value of a correlation via t = r sqrt((n-2)/(1-r^2)) on n-2 dof.
double correlation_p_value(double r, std::size_t n);

struct RegressionMetrics {
  MeanStd mae;
  double pearson_r = 0.0, pearson_p = 1.0;
  double spearman_rho = 0.0, spearman_p = 1.0;
  std::size_t n = 0;
};

RegressionMetrics regression_metrics(std::span<const double> predicted, std::span<const double> truth);

struct FlipReport {
  std::array<double, 2> rate{0.0, 0.0};    // per target class
  std::array<std::int64_t, 2> count{0, 0};
  bool empty() const { return count[0] + count[1] == 0; }
  bool has_class(int c) const { return count[static_cast<std::size_t>(c)] > 0; }
};

/// Fraction of items whose predicted class equals their target, per target.
FlipReport flip_rates(std::span<const int> predicted, std::span<const int> targets);

/// Maps images N x 1 x H x W to class logits [N].
using ImageClassifier = std::function<torch::Tensor(const torch::Tensor&)>;
FlipReport flip_test(const ImageClassifier& classifier, const torch::Tensor& images, std::span<const int> targets);

struct FaCorrelation {
  double r_pred = 0.0, p_pred = 1.0;
  double r_true = 0.0, p_true = 1.0;
  bool pred_stronger() const { return r_pred > r_true; }
};

FaCorrelation fa_phenotype_correlation(std::span<const double> fa_means, std::span<const double> predicted,
                                       std::span<const double> truth);

/// Long-format metrics table: section, metric, value, std, n.
struct MetricRow {
  std::string section;
  std::string metric;
  double value = 0.0;
  double std = 0.0;
  std::int64_t n = 0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;

  void add(std::string section, std::string metric, double value, double std = 0.0, std::int64_t n = 0);
  void add(std::string section, std::string metric, const MeanStd& v);
  const MetricRow* find(const std::string& section, const std::string& metric) const;

  void write_csv(const std::filesystem::path& path) const;
  void print(std::ostream& out) const;
};

}  // namespace icam::eval
