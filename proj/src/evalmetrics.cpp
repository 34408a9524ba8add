#include "icam/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "icam/errors.hpp"

namespace icam::eval {

double ncc(std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> mask) {
  if (a.size() != b.size() || a.size() != mask.size()) throw ContractError("ncc: inputs differ in size");
  double sa = 0.0, sb = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    sa += a[i];
    sb += b[i];
    ++n;
  }
  if (n < 2) throw DegenerateInputError("ncc: mask selects fewer than 2 pixels");
  const double ma = sa / static_cast<double>(n), mb = sb / static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    const double da = a[i] - ma, db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (!(va > 0.0) || !(vb > 0.0)) throw DegenerateInputError("ncc: input is constant inside the mask");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double ncc(const Image& a, const Image& b, const Mask& mask) {
  require_same_shape(a, b, "ncc");
  require_same_shape(a, mask, "ncc");
  const std::vector<double> da(a.data.begin(), a.data.end()), db(b.data.begin(), b.data.end());
  return ncc(da, db, mask.span());
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.n = static_cast<std::int64_t>(values.size());
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size()));
  return out;
}

std::string to_string(Direction d) { return d == Direction::pos ? "pos" : "neg"; }

AttributionScore evaluate_attribution(const std::vector<Image>& maps, const std::vector<Image>& gt_diffs,
                                      const std::vector<Mask>& masks, bool absolute) {
  if (maps.size() != gt_diffs.size() || maps.size() != masks.size()) {
    throw ContractError("evaluate_attribution: lists are not aligned");
  }
  AttributionScore out;
  std::vector<double> ok;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    require_same_shape(maps[i], gt_diffs[i], "evaluate_attribution");
    require_same_shape(maps[i], masks[i], "evaluate_attribution");
    std::vector<double> a(maps[i].data.begin(), maps[i].data.end());
    std::vector<double> b(gt_diffs[i].data.begin(), gt_diffs[i].data.end());
    if (absolute) {
      for (auto& v : a) v = std::abs(v);
      for (auto& v : b) v = std::abs(v);
    }
    try {
      const double r = ncc(a, b, masks[i].span());
      out.per_subject.push_back(r);
      ok.push_back(r);
    } catch (const DegenerateInputError& e) {
      out.per_subject.push_back(std::numeric_limits<double>::quiet_NaN());
      out.skipped.push_back({i, e.what()});
    }
  }
  out.ncc = mean_std(ok);
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("pearson: lengths differ");
  if (a.size() < 2) throw DegenerateInputError("pearson: need at least 2 values");
  const std::vector<std::uint8_t> all(a.size(), 1);
  return ncc(a, b, all);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("spearman: lengths differ");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

double correlation_p_value(double r, std::size_t n) {
  if (n < 3) throw DegenerateInputError("correlation p-value needs n >= 3");
  const double df = static_cast<double>(n - 2);
  if (std::abs(r) >= 1.0) return 0.0;
  const double t = r * std::sqrt(df / (1.0 - r * r));
  const boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

RegressionMetrics regression_metrics(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw ContractError("regression_metrics: lengths differ");
  if (predicted.size() < 3) throw InsufficientDataError("regression_metrics needs at least 3 values");
  RegressionMetrics m;
  m.n = predicted.size();
  std::vector<double> err(predicted.size());
  for (std::size_t i = 0; i < err.size(); ++i) err[i] = std::abs(predicted[i] - truth[i]);
  m.mae = mean_std(err);
  m.pearson_r = pearson(predicted, truth);
  m.pearson_p = correlation_p_value(m.pearson_r, m.n);
  m.spearman_rho = spearman(predicted, truth);
  m.spearman_p = correlation_p_value(m.spearman_rho, m.n);
  return m;
}

FlipReport flip_rates(std::span<const int> predicted, std::span<const int> targets) {
  if (predicted.size() != targets.size()) throw ContractError("flip_rates: lengths differ");
  FlipReport r;
  std::array<std::int64_t, 2> hits{0, 0};
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const int t = targets[i];
    if (t != 0 && t != 1) throw ContractError("flip_rates: targets must be 0 or 1");
    ++r.count[static_cast<std::size_t>(t)];
    if (predicted[i] == t) ++hits[static_cast<std::size_t>(t)];
  }
  for (std::size_t c = 0; c < 2; ++c) {
    r.rate[c] = r.count[c] > 0 ? static_cast<double>(hits[c]) / static_cast<double>(r.count[c]) : 0.0;
  }
  return r;
}

FlipReport flip_test(const ImageClassifier& classifier, const torch::Tensor& images, std::span<const int> targets) {
  if (images.defined() && images.size(0) != static_cast<std::int64_t>(targets.size())) {
    throw ContractError("flip_test: image count differs from target count");
  }
  if (targets.empty()) return {};
  torch::NoGradGuard no_grad;
  std::vector<int> predicted;
  for (std::int64_t s = 0; s < images.size(0); s += 64) {
    const auto len = std::min<std::int64_t>(64, images.size(0) - s);
    const auto logits = classifier(images.narrow(0, s, len)).reshape({len}).to(torch::kFloat64);
    for (std::int64_t k = 0; k < len; ++k) predicted.push_back(logits[k].item<double>() > 0.0 ? 1 : 0);
  }
  return flip_rates(predicted, targets);
}

FaCorrelation fa_phenotype_correlation(std::span<const double> fa_means, std::span<const double> predicted,
                                       std::span<const double> truth) {
  if (fa_means.size() != predicted.size() || fa_means.size() != truth.size()) {
    throw ContractError("fa_phenotype_correlation: lists are not aligned");
  }
  FaCorrelation c;
  c.r_pred = pearson(fa_means, predicted);
  c.p_pred = correlation_p_value(c.r_pred, fa_means.size());
  c.r_true = pearson(fa_means, truth);
  c.p_true = correlation_p_value(c.r_true, fa_means.size());
  return c;
}

void MetricsReport::add(std::string section, std::string metric, double value, double std, std::int64_t n) {
  rows.push_back({std::move(section), std::move(metric), value, std, n});
}

void MetricsReport::add(std::string section, std::string metric, const MeanStd& v) {
  add(std::move(section), std::move(metric), v.mean, v.std, v.n);
}

const MetricRow* MetricsReport::find(const std::string& section, const std::string& metric) const {
  for (const auto& r : rows) {
    if (r.section == section && r.metric == metric) return &r;
  }
  return nullptr;
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "section,metric,value,std,n\n" << std::setprecision(12);
  for (const auto& r : rows) out << r.section << ',' << r.metric << ',' << r.value << ',' << r.std << ',' << r.n << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void MetricsReport::print(std::ostream& out) const {
  std::size_t ws = 7, wm = 6;
  for (const auto& r : rows) {
    ws = std::max(ws, r.section.size());
    wm = std::max(wm, r.metric.size());
  }
  const auto flags = out.flags();
  out << std::left << std::setw(static_cast<int>(ws + 2)) << "section" << std::setw(static_cast<int>(wm + 2))
      << "metric" << std::right << std::setw(12) << "value" << std::setw(12) << "std" << std::setw(8) << "n" << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(ws + 2)) << r.section << std::setw(static_cast<int>(wm + 2))
        << r.metric << std::right << std::setw(12) << r.value << std::setw(12) << r.std << std::setw(8) << r.n
        << '\n';
  }
  out.flags(flags);
}

}  // namespace icam::eval
