#include <doctest.h>

#include <ATen/CPUGeneratorImpl.h>

#include <fstream>
#include <random>

#include "helpers.hpp"
#include "icam/attribution.hpp"
#include "icam/errors.hpp"
#include "icam/trainer.hpp"

using namespace icam;
using namespace icam::attr;

namespace {

at::Generator rng(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("attribution") {
  TEST_CASE("translation bundle identities") {
    nets::IcamModel model(testing::tiny_model());
    const auto data = testing::toy_split(4, 16);
    const auto x = data.images.narrow(0, 0, 2), y = data.images.narrow(0, 2, 2);
    const auto b = translate_pair(model, x, y);
    for (const auto* t : {&b.x_rec, &b.y_rec, &b.v, &b.mu, &b.x_cc, &b.y_cc, &b.m_x, &b.m_y}) {
      CHECK(t->sizes() == x.sizes());
    }
    // The map is the exact float difference; adding back recovers v up to rounding.
    CHECK(torch::equal(b.m_x, b.v - b.x));
    CHECK(torch::equal(b.m_y, b.mu - b.y));
    CHECK((b.m_x + b.x - b.v).abs().max().item<float>() <= 2 * std::numeric_limits<float>::epsilon());
    // Test mode is deterministic.
    const auto again = translate_pair(model, x, y);
    CHECK(torch::equal(again.v, b.v));
    CHECK(torch::equal(again.x_cc, b.x_cc));
    // Single images are accepted in either rank.
    const auto single = translate_pair(model, x[0][0], y[0]);
    CHECK(torch::allclose(single.v[0], b.v[0], 1e-5, 1e-6));
    CHECK_THROWS_AS(translate_pair(model, x, data.images), ContractError);
  }

  TEST_CASE("map statistics") {
    auto g = rng(4);
    std::vector<torch::Tensor> maps;
    for (int i = 0; i < 6; ++i) maps.push_back(torch::randn({1, 3, 3}, g, torch::kFloat64));
    const auto s = map_statistics(maps);
    CHECK(s.n_samples == 6);
    CHECK(s.variance_defined);
    for (std::int64_t r = 0; r < 3; ++r) {
      for (std::int64_t c = 0; c < 3; ++c) {
        double m = 0.0, q = 0.0;
        for (const auto& t : maps) m += t[0][r][c].item<double>() / 6.0;
        for (const auto& t : maps) q += std::pow(t[0][r][c].item<double>() - m, 2) / 6.0;
        CHECK(s.mean_map[0][r][c].item<double>() == doctest::Approx(m).epsilon(1e-12));
        CHECK(s.var_map[0][r][c].item<double>() == doctest::Approx(q).epsilon(1e-12));
      }
    }
    auto shuffled = maps;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[1], shuffled[4]);
    const auto t = map_statistics(shuffled);
    CHECK(torch::allclose(t.mean_map, s.mean_map, 0.0, 1e-14));
    CHECK(torch::allclose(t.var_map, s.var_map, 0.0, 1e-14));

    const auto one = map_statistics({maps[0]});
    CHECK(!one.variance_defined);
    CHECK(torch::equal(one.var_map, torch::zeros_like(one.var_map)));
    CHECK(torch::equal(one.mean_map, maps[0]));
    CHECK_THROWS_AS(map_statistics({}), ContractError);
  }

  TEST_CASE("single-image attribution") {
    nets::IcamModel model(testing::tiny_model());
    const auto x = testing::toy_split(1, 16).images[0];
    auto g = rng(5);
    const auto s = attribute_single(model, x, 1, 5, g, 1000, true);
    CHECK(s.n_samples == 5);
    CHECK(s.maps.size() == 5);
    CHECK(s.mean_map.sizes() == torch::IntArrayRef({1, 16, 16}));
    for (double l : s.class_logits) CHECK(l > 0.0);
    for (int a : s.attempts) CHECK(a >= 1);
    const auto one = attribute_single(model, x, 0, 1, g, 1000);
    CHECK(torch::equal(one.var_map, torch::zeros_like(one.var_map)));
    CHECK(one.class_logits[0] <= 0.0);
    CHECK_THROWS_AS(attribute_single(model, x, 2, 1, g), ContractError);
    CHECK_THROWS_AS(attribute_single(model, x, 1, 0, g), ContractError);

    // A head that never predicts class 0 exhausts the sampler.
    {
      torch::NoGradGuard no_grad;
      for (auto& p : model.heads->parameters()) p.zero_();
      for (auto& item : model.heads->named_parameters()) {
        if (item.key().find("bias") != std::string::npos) item.value().fill_(50.0);
      }
    }
    CHECK_THROWS_AS(attribute_single(model, x, 0, 2, g, 5), train::RejectionExhaustedError);
  }

  TEST_CASE("interpolation path") {
    nets::IcamModel model(testing::tiny_model());
    const auto d = testing::toy_split(2, 16);
    const auto x = d.images[0], y = d.images[1];
    const auto path = interpolate(model, x, y, 11);
    REQUIRE(path.size() == 11);
    for (int k = 0; k < 11; ++k) CHECK(path[static_cast<std::size_t>(k)].alpha == doctest::Approx(k / 10.0));
    CHECK(path.front().alpha == 0.0);
    CHECK(path.back().alpha == 1.0);
    const auto b = translate_pair(model, x, y);
    CHECK(torch::allclose(path.front().image, b.x_rec[0], 1e-5, 1e-6));
    CHECK(torch::allclose(path.back().image, b.v[0], 1e-5, 1e-6));
    CHECK(torch::allclose(path[3].fa_map, path[3].image - x, 0.0, 1e-7));
    const auto two = interpolate(model, x, y, 2);
    CHECK(two.size() == 2);
    CHECK(torch::allclose(two[1].image, path.back().image, 1e-5, 1e-6));
    CHECK_THROWS_AS(interpolate(model, x, y, 1), ContractError);
  }

  TEST_CASE("PCA recovers a planar dataset up to rotation") {
    std::mt19937_64 gen(7);
    std::normal_distribution<double> n01;
    const int n = 60;
    Eigen::MatrixXd plane(n, 2);
    for (int i = 0; i < n; ++i) plane.row(i) << 3.0 * n01(gen), n01(gen);
    Eigen::MatrixXd basis = Eigen::MatrixXd::NullaryExpr(6, 2, [&]() { return n01(gen); });
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(6, 2);
    const Eigen::MatrixXd data = (plane * q.transpose()).rowwise() + Eigen::RowVectorXd::Constant(6, 4.0);
    const auto p = pca_2d(data);
    REQUIRE(p.rows() == n);
    REQUIRE(p.cols() == 2);
    const Eigen::MatrixXd target = plane.rowwise() - plane.colwise().mean();
    // Orthogonal Procrustes alignment.
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(p.transpose() * target, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::MatrixXd r = svd.matrixU() * svd.matrixV().transpose();
    CHECK((p * r - target).norm() / target.norm() < 1e-6);
    // First axis carries the larger variance.
    CHECK(p.col(0).squaredNorm() > p.col(1).squaredNorm());

    const Eigen::MatrixXd dup = Eigen::MatrixXd::Constant(5, 4, 2.0);
    const auto z = pca_2d(dup);
    CHECK(z.allFinite());
    CHECK(z.norm() < 1e-12);
    CHECK_THROWS_AS(pca_2d(Eigen::MatrixXd::Zero(1, 3)), InsufficientDataError);
  }

  TEST_CASE("tSNE separates two clusters") {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> n01;
    const int n = 100;
    Eigen::MatrixXd data(n, 10);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 10; ++j) data(i, j) = n01(gen) + (i < n / 2 ? 0.0 : 10.0);
    }
    TsneOptions opts;
    opts.seed = 1;
    const auto e = tsne_2d(data, opts);
    REQUIRE(e.rows() == n);
    CHECK(e.allFinite());
    int pure = 0;
    for (int i = 0; i < n; ++i) {
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const double d = (e.row(i) - e.row(j)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      pure += ((best < n / 2) == (i < n / 2)) ? 1 : 0;
    }
    CHECK(pure >= 99);
    // Same seed, same layout.
    CHECK(tsne_2d(data, opts).isApprox(e));
    CHECK_THROWS_AS(tsne_2d(data.topRows(4), opts), InsufficientDataError);
    TsneOptions small = opts;
    small.iterations = 300;
    CHECK(tsne_2d(data.topRows(6), small).allFinite());
  }

  TEST_CASE("latent embedding of a dataset") {
    nets::IcamModel model(testing::tiny_model());
    const auto d = testing::toy_split(6, 16);
    const auto pts = embed_latents(model, d, EmbedMethod::pca);
    REQUIRE(pts.size() == 6);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(pts[i].id == d.ids[i]);
      CHECK(pts[i].class_label == static_cast<int>(d.labels[static_cast<std::int64_t>(i)].item<float>()));
    }
    CHECK(embed_latents(model, d, EmbedMethod::tsne).size() == 6);
    CHECK_THROWS_AS(embed_latents(model, d.select(torch::arange(0, 4)), EmbedMethod::tsne), InsufficientDataError);
    CHECK(embed_method_from_string("pca") == EmbedMethod::pca);
    CHECK_THROWS_AS(embed_method_from_string("umap"), ConfigError);

    testing::TempDir dir;
    write_embedding_csv(dir / "e.csv", pts);
    const auto text = slurp(dir / "e.csv");
    CHECK(text.rfind("id,x,y,phenotype,class\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 7);
  }

  TEST_CASE("diverging colormap") {
    CHECK(diverging_color(-1.0) == std::array<std::uint8_t, 3>{0, 0, 255});
    CHECK(diverging_color(0.0) == std::array<std::uint8_t, 3>{255, 255, 255});
    CHECK(diverging_color(1.0) == std::array<std::uint8_t, 3>{255, 0, 0});
    CHECK(diverging_color(5.0) == diverging_color(1.0));
    CHECK(diverging_color(-5.0) == diverging_color(-1.0));
    const auto half = diverging_color(0.5);
    CHECK(half[0] == 255);
    CHECK(half[1] == 128);
    CHECK(half[2] == 128);
  }

  TEST_CASE("heatmap and image export") {
    testing::TempDir dir;
    Image m(4, 5, 0.0f);
    m.at(1, 2) = -2.0f;
    m.at(3, 4) = 0.5f;
    CHECK(write_heatmap_png(dir / "h.png", m) == 2.0);
    const auto png = slurp(dir / "h.png");
    CHECK(png.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
    const auto side = nlohmann::json::parse(slurp(dir / "h.png.json"));
    CHECK(side["range"] == nlohmann::json::array({-2.0, 2.0}));
    CHECK(side["height"] == 4);
    CHECK(write_heatmap_png(dir / "z.png", Image(3, 3, 0.0f)) == 1.0);
    CHECK(write_heatmap_png(dir / "f.png", m, 0.25) == 0.25);
    write_image_png(dir / "i.png", m);
    CHECK(std::filesystem::file_size(dir / "i.png") > 8);
    CHECK_THROWS_AS(write_image_png(dir / "missing" / "i.png", m), IoError);
  }
}
