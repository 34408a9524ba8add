#include "icam/attribution.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <random>

#include "icam/errors.hpp"
#include "icam/trainer.hpp"

namespace icam::attr {
namespace {

torch::Tensor prepare(const nets::IcamModel& model, const torch::Tensor& images) {
  return as_batch(images).to(model.dtype());
}

}  // namespace

TranslationBundle translate_pair(nets::IcamModel& model, const torch::Tensor& x_in, const torch::Tensor& y_in) {
  torch::NoGradGuard no_grad;
  auto x = prepare(model, x_in), y = prepare(model, y_in);
  if (x.sizes() != y.sizes()) throw ContractError("translate_pair: x and y differ in shape");
  const auto n = x.size(0);
  const auto xy = torch::cat({x, y});
  const auto c = model.encode_content(xy, false).features;
  const auto a = model.encode_attribute(xy, nets::SamplingMode::deterministic).mean;
  const auto c_x = c.narrow(0, 0, n), c_y = c.narrow(0, n, n);
  const auto a_x = a.narrow(0, 0, n), a_y = a.narrow(0, n, n);
  const auto g = model.generate({torch::cat({c_x, c_y, c_x, c_y})}, torch::cat({a_x, a_y, a_y, a_x}));

  TranslationBundle b;
  b.x = x;
  b.y = y;
  b.x_rec = g.narrow(0, 0, n);
  b.y_rec = g.narrow(0, n, n);
  b.v = g.narrow(0, 2 * n, n);
  b.mu = g.narrow(0, 3 * n, n);
  const auto back = torch::cat({b.v, b.mu});
  const auto c_back = model.encode_content(back, false).features;
  const auto a_back = model.encode_attribute(back, nets::SamplingMode::deterministic).mean;
  const auto cc = model.generate({c_back}, torch::cat({a_back.narrow(0, n, n), a_back.narrow(0, 0, n)}));
  b.x_cc = cc.narrow(0, 0, n);
  b.y_cc = cc.narrow(0, n, n);
  b.m_x = b.v - b.x;
  b.m_y = b.mu - b.y;
  return b;
}

FAStatistics map_statistics(const std::vector<torch::Tensor>& maps) {
  if (maps.empty()) throw ContractError("map_statistics: no maps");
  const auto stacked = torch::stack(maps).to(torch::kFloat64);
  FAStatistics s;
  s.n_samples = static_cast<int>(maps.size());
  s.mean_map = stacked.mean(0);
  s.variance_defined = s.n_samples >= 2;
  s.var_map = s.variance_defined ? (stacked - s.mean_map).square().mean(0) : torch::zeros_like(s.mean_map);
  return s;
}

FAStatistics attribute_single(nets::IcamModel& model, const torch::Tensor& x_in, int target_class, int n_samples,
                              at::Generator& rng, int max_attempts, bool keep_maps) {
  if (n_samples < 1) throw ContractError("attribute_single: n_samples must be >= 1");
  if (target_class != 0 && target_class != 1) throw ContractError("attribute_single: target_class must be 0 or 1");
  torch::NoGradGuard no_grad;
  const auto x = prepare(model, x_in);
  if (x.size(0) != 1) throw ContractError("attribute_single: expected a single image");
  const auto& cfg = model.config();
  auto heads = model.heads;
  const train::LatentClassifier f_c1 = [&heads, &model](const torch::Tensor& z) {
    return heads->class_logit(z.to(model.dtype()));
  };
  const auto targets = torch::full({n_samples}, static_cast<float>(target_class));
  const auto rej = train::rejection_sample_batch(f_c1, targets, {cfg.attr_channels, cfg.attr_height(), cfg.attr_width()},
                                                 max_attempts, rng, false);
  const auto z = rej.samples.to(model.dtype());
  const auto c = model.encode_content(x, false).features.expand({n_samples, -1, -1, -1});
  const auto v = model.generate({c}, z);
  const auto m = v - x;
  std::vector<torch::Tensor> maps;
  for (int i = 0; i < n_samples; ++i) maps.push_back(m[i]);
  auto s = map_statistics(maps);
  const auto pred = model.predict_sample(z);
  for (int i = 0; i < n_samples; ++i) {
    s.class_logits.push_back(pred.class_logit[i].item<double>());
    s.regression_values.push_back(pred.regression_value[i].item<double>());
  }
  s.attempts = rej.attempts;
  if (keep_maps) s.maps = std::move(maps);
  return s;
}

std::vector<InterpolationStep> interpolate(nets::IcamModel& model, const torch::Tensor& x_in,
                                           const torch::Tensor& y_in, int steps) {
  if (steps < 2) throw ContractError("interpolate: steps must be >= 2");
  torch::NoGradGuard no_grad;
  const auto x = prepare(model, x_in), y = prepare(model, y_in);
  if (x.size(0) != 1 || y.size(0) != 1) throw ContractError("interpolate: expected single images");
  const auto a_x = model.encode_attribute(x, nets::SamplingMode::deterministic).mean;
  const auto a_y = model.encode_attribute(y, nets::SamplingMode::deterministic).mean;
  std::vector<double> alphas;
  std::vector<torch::Tensor> zs;
  for (int k = 0; k < steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(steps - 1);
    alphas.push_back(alpha);
    zs.push_back((1.0 - alpha) * a_x + alpha * a_y);
  }
  const auto z = torch::cat(zs);
  const auto c = model.encode_content(x, false).features.expand({steps, -1, -1, -1});
  const auto images = model.generate({c}, z);
  const auto pred = model.predict_sample(z);
  std::vector<InterpolationStep> out;
  for (int k = 0; k < steps; ++k) {
    InterpolationStep s;
    s.alpha = alphas[static_cast<std::size_t>(k)];
    s.image = images[k];
    s.fa_map = images[k] - x[0];
    s.class_logit = pred.class_logit[k].item<double>();
    s.regression_value = pred.regression_value[k].item<double>();
    out.push_back(std::move(s));
  }
  return out;
}

// --------------------------------------------------------------------------
// Embeddings

std::string to_string(EmbedMethod m) { return m == EmbedMethod::tsne ? "tsne" : "pca"; }

EmbedMethod embed_method_from_string(const std::string& s) {
  if (s == "tsne") return EmbedMethod::tsne;
  if (s == "pca") return EmbedMethod::pca;
  throw ConfigError("unknown embedding method: " + s);
}

Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& data) {
  if (data.rows() < 2) throw InsufficientDataError("pca needs at least 2 points");
  const Eigen::MatrixXd centered = data.rowwise() - data.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  Eigen::MatrixXd v = svd.matrixV();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(data.rows(), 2);
  for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, v.cols()); ++k) {
    // Sign convention: largest-magnitude loading positive.
    Eigen::Index arg = 0;
    v.col(k).cwiseAbs().maxCoeff(&arg);
    if (v(arg, k) < 0) v.col(k) = -v.col(k);
    out.col(k) = centered * v.col(k);
  }
  return out;
}

namespace {

// Row-wise conditional affinities at the requested perplexity.
Eigen::MatrixXd conditional_affinities(const Eigen::MatrixXd& d2, double perplexity) {
  const auto n = d2.rows();
  const double target = std::log(perplexity);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    // Shift by the nearest distance to keep exp() in range.
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, d2(i, j));
    }
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double e = std::exp(-beta * (d2(i, j) - dmin));
        p(i, j) = e;
        sum += e;
        weighted += (d2(i, j) - dmin) * e;
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      p.row(i) /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  return p;
}

}  // namespace

Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& data, const TsneOptions& options) {
  const auto n = data.rows();
  if (n < 5) throw InsufficientDataError("tSNE needs at least 5 points");
  if (n > kMaxExactTsnePoints) {
    throw ContractError("exact tSNE is limited to " + std::to_string(kMaxExactTsnePoints) + " points");
  }
  // Perplexity must leave room for the neighbourhood; cap it for tiny sets.
  const double perplexity = std::min(options.perplexity, static_cast<double>(n - 1) / 3.0);

  const Eigen::VectorXd sq = data.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * data * data.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  Eigen::MatrixXd p = conditional_affinities(d2, perplexity);
  p = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1e-4);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = normal(rng);
    y(i, 1) = normal(rng);
  }
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n), grad(n, 2);

  for (int it = 0; it < options.iterations; ++it) {
    const double exaggeration = it < options.exaggeration_iterations ? options.exaggeration : 1.0;
    const double momentum = it < options.exaggeration_iterations ? 0.5 : 0.8;
    const Eigen::VectorXd ysq = y.rowwise().squaredNorm();
    num = (-2.0 * y * y.transpose()).colwise() + ysq;
    num.rowwise() += ysq.transpose();
    num = (1.0 + num.array()).inverse().matrix();
    num.diagonal().setZero();
    const double z = num.sum();
    // dC/dy_i = 4 sum_j (p_ij - q_ij) num_ij (y_i - y_j)
    const Eigen::MatrixXd w = ((exaggeration * p).array() - num.array() / z).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int d = 0; d < 2; ++d) {
        const bool same = (grad(i, d) > 0) == (update(i, d) > 0);
        gains(i, d) = std::max(same ? gains(i, d) * 0.8 : gains(i, d) + 0.2, 0.01);
        update(i, d) = momentum * update(i, d) - options.learning_rate * gains(i, d) * grad(i, d);
      }
    }
    y += update;
    y = y.rowwise() - y.colwise().mean();
  }
  return y;
}

std::vector<EmbeddingPoint> embed_latents(nets::IcamModel& model, const TensorDataset& dataset, EmbedMethod method,
                                          std::uint64_t seed) {
  const auto n = dataset.size();
  if (method == EmbedMethod::tsne && n < 5) throw InsufficientDataError("tSNE needs at least 5 points");
  if (n < 2) throw InsufficientDataError("embedding needs at least 2 points");
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> means;
  for (std::int64_t s = 0; s < n; s += 64) {
    const auto len = std::min<std::int64_t>(64, n - s);
    const auto imgs = dataset.images.narrow(0, s, len).to(model.dtype());
    means.push_back(model.encode_attribute(imgs, nets::SamplingMode::deterministic).mean.flatten(1));
  }
  const auto flat = torch::cat(means).to(torch::kFloat64).contiguous();
  Eigen::MatrixXd data(flat.size(0), flat.size(1));
  const auto acc = flat.accessor<double, 2>();
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) data(i, j) = acc[i][j];
  }
  TsneOptions opts;
  opts.seed = seed;
  const auto coords = method == EmbedMethod::tsne ? tsne_2d(data, opts) : pca_2d(data);
  std::vector<EmbeddingPoint> out;
  for (std::int64_t i = 0; i < n; ++i) {
    out.push_back({dataset.ids[static_cast<std::size_t>(i)], coords(i, 0), coords(i, 1),
                   dataset.phenotypes[i].item<double>(), static_cast<int>(dataset.labels[i].item<float>())});
  }
  return out;
}

// --------------------------------------------------------------------------
// Export

std::array<std::uint8_t, 3> diverging_color(double value) {
  const double t = std::clamp(std::isfinite(value) ? value : 0.0, -1.0, 1.0);
  auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); };
  if (t < 0) {
    const double f = 255.0 * (1.0 + t);
    return {byte(f), byte(f), 255};
  }
  const double f = 255.0 * (1.0 - t);
  return {255, byte(f), byte(f)};
}

namespace {

void write_png(const std::filesystem::path& path, std::int64_t height, std::int64_t width, int color_type,
               const std::vector<std::uint8_t>& pixels) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  for (std::int64_t r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r * width) * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

double write_heatmap_png(const std::filesystem::path& path, const Image& map, double limit) {
  if (!(limit > 0.0)) {
    limit = 0.0;
    for (float v : map.data) limit = std::max(limit, static_cast<double>(std::abs(v)));
    if (!(limit > 0.0)) limit = 1.0;
  }
  std::vector<std::uint8_t> rgb;
  rgb.reserve(map.data.size() * 3);
  for (float v : map.data) {
    const auto c = diverging_color(static_cast<double>(v) / limit);
    rgb.insert(rgb.end(), c.begin(), c.end());
  }
  write_png(path, map.height, map.width, PNG_COLOR_TYPE_RGB, rgb);
  const nlohmann::json sidecar = {
      {"colormap", "blue-white-red"},
      {"range", {-limit, limit}},
      {"mapping", "value/limit clipped to [-1,1]; -1 -> (0,0,255), 0 -> (255,255,255), +1 -> (255,0,0), linear"},
      {"height", map.height},
      {"width", map.width}};
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  if (!out) throw IoError("cannot write heatmap sidecar for " + path.string());
  out << sidecar.dump(2) << '\n';
  return limit;
}

void write_image_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> grey;
  grey.reserve(image.data.size());
  for (float v : image.data) {
    grey.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(static_cast<double>(v), 0.0, 1.0))));
  }
  write_png(path, image.height, image.width, PNG_COLOR_TYPE_GRAY, grey);
}

void write_embedding_csv(const std::filesystem::path& path, const std::vector<EmbeddingPoint>& points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,x,y,phenotype,class\n" << std::setprecision(10);
  for (const auto& p : points) out << p.id << ',' << p.x << ',' << p.y << ',' << p.phenotype << ',' << p.class_label << '\n';
}

}  // namespace icam::attr
