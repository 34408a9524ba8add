#include "icam/pipeline.hpp"

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "icam/errors.hpp"
#include "icam/util.hpp"

namespace icam::pipeline {

void EvalConfig::validate() const {
  if (max_pairs < 1 || baseline_pairs < 0) throw ConfigError("eval pair counts must be positive");
  if (interpolation_pairs < 0) throw ConfigError("interpolation_pairs must be >= 0");
  if (interpolation_steps < 2) throw ConfigError("interpolation_steps must be >= 2");
  if (occlusion_block < 1 || occlusion_stride < 1) throw ConfigError("occlusion block and stride must be >= 1");
  if (ig_steps < 1) throw ConfigError("ig_steps must be >= 1");
  if (ig_check_images < 0) throw ConfigError("ig_check_images must be >= 0");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"max_pairs", c.max_pairs},
       {"baseline_pairs", c.baseline_pairs},
       {"interpolation_pairs", c.interpolation_pairs},
       {"interpolation_steps", c.interpolation_steps},
       {"occlusion_block", c.occlusion_block},
       {"occlusion_stride", c.occlusion_stride},
       {"ig_steps", c.ig_steps},
       {"ig_check_images", c.ig_check_images},
       {"fa_mean_absolute", c.fa_mean_absolute}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  if (!j.is_object()) throw ConfigError("eval config must be a JSON object");
  EvalConfig d;
  for (const auto& [key, value] : j.items()) {
    if (key == "max_pairs") d.max_pairs = value.get<std::int64_t>();
    else if (key == "baseline_pairs") d.baseline_pairs = value.get<std::int64_t>();
    else if (key == "interpolation_pairs") d.interpolation_pairs = value.get<int>();
    else if (key == "interpolation_steps") d.interpolation_steps = value.get<int>();
    else if (key == "occlusion_block") d.occlusion_block = value.get<std::int64_t>();
    else if (key == "occlusion_stride") d.occlusion_stride = value.get<std::int64_t>();
    else if (key == "ig_steps") d.ig_steps = value.get<int>();
    else if (key == "ig_check_images") d.ig_check_images = value.get<std::int64_t>();
    else if (key == "fa_mean_absolute") d.fa_mean_absolute = value.get<bool>();
    else throw ConfigError("unknown eval config key: " + key);
  }
  d.validate();
  c = d;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  baseline.validate();
  eval.validate();
  if (data.phantom.height != model.height || data.phantom.width != model.width) {
    throw ConfigError("data image size does not match the model input size");
  }
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  r.model.seed = derive_seed(seed, 1);
  r.train.seed = derive_seed(seed, 2);
  r.baseline.seed = derive_seed(seed, 3);
  return r;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed}, {"data", c.data}, {"model", c.model}, {"train", c.train}, {"baseline", c.baseline}, {"eval", c.eval}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig d;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") d.seed = value.get<std::uint64_t>();
      else if (key == "data") d.data = value.get<synth::DatasetConfig>();
      else if (key == "model") d.model = value.get<nets::ModelConfig>();
      else if (key == "train") d.train = value.get<train::TrainConfig>();
      else if (key == "baseline") d.baseline = value.get<baselines::BaselineConfig>();
      else if (key == "eval") d.eval = value.get<EvalConfig>();
      else throw ConfigError("unknown run config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  d.validate();
  c = d;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return j.get<RunConfig>();
}

// --------------------------------------------------------------------------

attr::TranslationBundle IcamTranslator::translate(const torch::Tensor& x, const torch::Tensor& y) {
  return attr::translate_pair(model_, x, y);
}

std::optional<nets::Prediction> IcamTranslator::predict(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  return model_.predict(model_.encode_attribute(as_batch(images).to(model_.dtype()), nets::SamplingMode::deterministic));
}

attr::TranslationBundle IdentityTranslator::translate(const torch::Tensor& x_in, const torch::Tensor& y_in) {
  const auto x = as_batch(x_in), y = as_batch(y_in);
  if (x.sizes() != y.sizes()) throw ContractError("translate: x and y differ in shape");
  attr::TranslationBundle b;
  b.x = b.x_rec = b.v = b.x_cc = x;
  b.y = b.y_rec = b.mu = b.y_cc = y;
  b.m_x = b.v - b.x;
  b.m_y = b.mu - b.y;
  return b;
}

double ig_completeness_error(const baselines::ScalarModel& f, const torch::Tensor& image,
                             const torch::Tensor& baseline_image, int steps) {
  const auto ig = baselines::integrated_gradients_map(f, image, baseline_image, steps);
  torch::NoGradGuard no_grad;
  const double fx = f(as_batch(image)).item<double>();
  const double f0 = f(as_batch(baseline_image).to(as_batch(image).dtype())).item<double>();
  const double gap = fx - f0;
  const double err = std::abs(ig.sum().item<double>() - gap);
  return gap == 0.0 ? (err == 0.0 ? 0.0 : std::numeric_limits<double>::infinity()) : err / std::abs(gap);
}

namespace {

std::vector<double> to_vector(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat64).contiguous().flatten();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

struct MethodScores {
  std::vector<Image> maps_pos, maps_neg;
};

void score_direction(EvalResult& out, const std::string& method, const std::string& direction,
                     const std::vector<Image>& maps, const std::vector<Image>& gts, const std::vector<Mask>& masks,
                     const std::vector<std::string>& ids, bool absolute) {
  const auto s = eval::evaluate_attribution(maps, gts, masks, absolute);
  const std::string section = std::string(absolute ? "ncc_" : "ncc_signed_") + direction;
  out.report.add(section, method, s.ncc);
  out.report.add(section, method + "_skipped", static_cast<double>(s.skipped.size()), 0.0,
                 static_cast<std::int64_t>(maps.size()));
  if (!absolute) return;
  std::size_t skip = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    SubjectRecord r{ids[i], direction, method, s.per_subject[i], false, ""};
    if (skip < s.skipped.size() && s.skipped[skip].index == i) {
      r.skipped = true;
      r.reason = s.skipped[skip].reason;
      ++skip;
    }
    out.subjects.push_back(std::move(r));
  }
}

}  // namespace

EvalResult evaluate(Translator& translator, baselines::BaselineCNN* baseline, const TensorDataset& test,
                    const EvalConfig& config) {
  config.validate();
  if (test.size() == 0) throw InsufficientDataError("evaluation set is empty");
  EvalResult out;
  auto& rep = out.report;
  const auto n = test.size();

  // Prediction quality.
  std::vector<double> pred_pheno(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
  if (auto first = translator.predict(test.images.narrow(0, 0, 1)); first) {
    std::vector<double> logits;
    for (std::int64_t s = 0; s < n; s += 64) {
      const auto len = std::min<std::int64_t>(64, n - s);
      const auto p = *translator.predict(test.images.narrow(0, s, len));
      const auto l = to_vector(p.class_logit), r = to_vector(p.regression_value);
      logits.insert(logits.end(), l.begin(), l.end());
      std::copy(r.begin(), r.end(), pred_pheno.begin() + s);
    }
    const auto labels = to_vector(test.labels), truth = to_vector(test.phenotypes);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += ((logits[i] > 0.0 ? 1.0 : 0.0) == labels[i]);
    rep.add("classification", "accuracy", static_cast<double>(correct) / static_cast<double>(n), 0.0, n);
    const auto truth_ms = eval::mean_std(truth);
    rep.add("regression", "phenotype_std", truth_ms.std, 0.0, n);
    if (n >= 3) {
      const auto rm = eval::regression_metrics(pred_pheno, truth);
      rep.add("regression", "mae", rm.mae);
      rep.add("regression", "pearson_r", rm.pearson_r, 0.0, static_cast<std::int64_t>(rm.n));
      rep.add("regression", "pearson_p", rm.pearson_p, 0.0, static_cast<std::int64_t>(rm.n));
      rep.add("regression", "spearman_rho", rm.spearman_rho, 0.0, static_cast<std::int64_t>(rm.n));
      rep.add("regression", "spearman_p", rm.spearman_p, 0.0, static_cast<std::int64_t>(rm.n));
    }
  }

  // Class-0 / class-1 pairs.
  const auto i0 = test.indices_of_class(0), i1 = test.indices_of_class(1);
  const auto pairs = std::min({i0.numel(), i1.numel(), config.max_pairs});
  if (pairs == 0) {
    rep.add("pairs", "count", 0.0);
    return out;
  }
  const auto a = test.select(i0.narrow(0, 0, pairs)), b = test.select(i1.narrow(0, 0, pairs));
  rep.add("pairs", "count", static_cast<double>(pairs), 0.0, pairs);

  std::vector<Image> maps_pos, maps_neg, gt_pos, gt_neg;
  std::vector<Mask> mask_pos, mask_neg;
  std::vector<torch::Tensor> v_all, mu_all;
  for (std::int64_t s = 0; s < pairs; s += 32) {
    const auto len = std::min<std::int64_t>(32, pairs - s);
    const auto bundle = translator.translate(a.images.narrow(0, s, len), b.images.narrow(0, s, len));
    v_all.push_back(bundle.v.detach().to(torch::kFloat32));
    mu_all.push_back(bundle.mu.detach().to(torch::kFloat32));
    for (std::int64_t k = 0; k < len; ++k) {
      maps_pos.push_back(to_image(bundle.m_x[k]));
      maps_neg.push_back(to_image(bundle.m_y[k]));
    }
  }
  for (std::int64_t k = 0; k < pairs; ++k) {
    gt_pos.push_back(to_image(a.gt_diffs[k]));
    gt_neg.push_back(to_image(b.gt_diffs[k]));
    mask_pos.push_back(to_mask(a.tissue_masks[k]));
    mask_neg.push_back(to_mask(b.tissue_masks[k]));
  }
  score_direction(out, "icam", "pos", maps_pos, gt_pos, mask_pos, a.ids, true);
  score_direction(out, "icam", "neg", maps_neg, gt_neg, mask_neg, b.ids, true);
  score_direction(out, "icam", "pos", maps_pos, gt_pos, mask_pos, a.ids, false);
  score_direction(out, "icam", "neg", maps_neg, gt_neg, mask_neg, b.ids, false);

  // FA magnitude against predicted and true phenotype, one value per subject.
  if (!std::isnan(pred_pheno.front())) {
    std::vector<double> fa, pred, truth;
    auto add_subjects = [&](const std::vector<Image>& maps, const std::vector<Mask>& masks, const TensorDataset& d,
                            const torch::Tensor& idx) {
      for (std::size_t k = 0; k < maps.size(); ++k) {
        double sum = 0.0;
        std::int64_t cnt = 0;
        for (std::size_t p = 0; p < maps[k].data.size(); ++p) {
          if (!masks[k].data[p]) continue;
          sum += config.fa_mean_absolute ? std::abs(maps[k].data[p]) : maps[k].data[p];
          ++cnt;
        }
        fa.push_back(cnt ? sum / static_cast<double>(cnt) : 0.0);
        pred.push_back(pred_pheno[static_cast<std::size_t>(idx[static_cast<std::int64_t>(k)].item<std::int64_t>())]);
        truth.push_back(d.phenotypes[static_cast<std::int64_t>(k)].item<double>());
      }
    };
    add_subjects(maps_pos, mask_pos, a, i0);
    add_subjects(maps_neg, mask_neg, b, i1);
    if (fa.size() >= 3) {
      try {
        const auto c = eval::fa_phenotype_correlation(fa, pred, truth);
        const auto m = static_cast<std::int64_t>(fa.size());
        rep.add("fa_correlation", "r_pred", c.r_pred, 0.0, m);
        rep.add("fa_correlation", "p_pred", c.p_pred, 0.0, m);
        rep.add("fa_correlation", "r_true", c.r_true, 0.0, m);
        rep.add("fa_correlation", "p_true", c.p_true, 0.0, m);
        rep.add("fa_correlation", "pred_stronger", c.pred_stronger() ? 1.0 : 0.0, 0.0, m);
        rep.add("fa_correlation", "uses_absolute", config.fa_mean_absolute ? 1.0 : 0.0);
      } catch (const DegenerateInputError&) {
        rep.add("fa_correlation", "degenerate", 1.0);
      }
    }
  }

  // Interpolation monotonicity: class-0 source towards class-1 target.
  if (auto* model = translator.model(); model != nullptr && config.interpolation_pairs > 0) {
    const auto m = std::min<std::int64_t>(config.interpolation_pairs, pairs);
    for (std::int64_t k = 0; k < m; ++k) {
      const auto steps = attr::interpolate(*model, a.images[k], b.images[k], config.interpolation_steps);
      std::vector<double> alpha, value;
      for (const auto& s : steps) {
        alpha.push_back(s.alpha);
        value.push_back(s.regression_value);
      }
      double rho = 0.0;
      try {
        rho = eval::spearman(alpha, value);
      } catch (const DegenerateInputError&) {
        rho = 0.0;  // constant prediction along the path
      }
      out.interpolation_spearman.push_back(rho);
    }
    rep.add("interpolation", "spearman_alpha_prediction", eval::mean_std(out.interpolation_spearman));
  }

  if (baseline == nullptr) return out;
  auto& clf = *baseline;

  // Flip test with the independent classifier; the real row is its plain accuracy.
  const eval::ImageClassifier classify = [&clf](const torch::Tensor& x) {
    return clf->forward(x.to(clf->head->weight.dtype()));
  };
  {
    const std::vector<int> to_one(static_cast<std::size_t>(pairs), 1), to_zero(static_cast<std::size_t>(pairs), 0);
    const auto f1 = eval::flip_test(classify, torch::cat(v_all), to_one);
    const auto f0 = eval::flip_test(classify, torch::cat(mu_all), to_zero);
    rep.add("flip_translated", "class0", f0.rate[0], 0.0, f0.count[0]);
    rep.add("flip_translated", "class1", f1.rate[1], 0.0, f1.count[1]);
    std::vector<int> labels;
    for (auto v : to_vector(test.labels)) labels.push_back(static_cast<int>(v));
    const auto real = eval::flip_test(classify, test.images, labels);
    rep.add("flip_real", "class0", real.rate[0], 0.0, real.count[0]);
    rep.add("flip_real", "class1", real.rate[1], 0.0, real.count[1]);
  }

  // Reference attribution methods on the same subjects.
  const auto bp = std::min(pairs, config.baseline_pairs);
  if (bp > 0) {
    torch::AutoGradMode enable(true);
    const auto toward1 = baselines::class_score(clf, 1), toward0 = baselines::class_score(clf, 0);
    std::map<std::string, MethodScores> scores;
    for (std::int64_t k = 0; k < bp; ++k) {
      const auto x = a.images[k].to(clf->head->weight.dtype()), y = b.images[k].to(clf->head->weight.dtype());
      scores["occlusion"].maps_pos.push_back(to_image(
          baselines::occlusion_map(toward1, x, config.occlusion_block, config.occlusion_stride, 0.0)));
      scores["occlusion"].maps_neg.push_back(to_image(
          baselines::occlusion_map(toward0, y, config.occlusion_block, config.occlusion_stride, 0.0)));
      scores["gradient"].maps_pos.push_back(to_image(baselines::gradient_saliency_map(toward1, x)));
      scores["gradient"].maps_neg.push_back(to_image(baselines::gradient_saliency_map(toward0, y)));
      scores["integrated_gradients"].maps_pos.push_back(
          to_image(baselines::integrated_gradients_map(toward1, x, torch::zeros_like(x), config.ig_steps)));
      scores["integrated_gradients"].maps_neg.push_back(
          to_image(baselines::integrated_gradients_map(toward0, y, torch::zeros_like(y), config.ig_steps)));
      scores["gradcam"].maps_pos.push_back(to_image(baselines::gradcam_map(clf, x, 1)));
      scores["gradcam"].maps_neg.push_back(to_image(baselines::gradcam_map(clf, y, 0)));
    }
    const std::vector<Image> gp(gt_pos.begin(), gt_pos.begin() + bp), gn(gt_neg.begin(), gt_neg.begin() + bp);
    const std::vector<Mask> mp(mask_pos.begin(), mask_pos.begin() + bp), mn(mask_neg.begin(), mask_neg.begin() + bp);
    const std::vector<std::string> ip(a.ids.begin(), a.ids.begin() + bp), in(b.ids.begin(), b.ids.begin() + bp);
    for (const auto& [method, s] : scores) {
      score_direction(out, method, "pos", s.maps_pos, gp, mp, ip, true);
      score_direction(out, method, "neg", s.maps_neg, gn, mn, in, true);
    }
    // ICAM restricted to the same subjects, for a like-for-like ordering.
    const std::vector<Image> ipm(maps_pos.begin(), maps_pos.begin() + bp), inm(maps_neg.begin(), maps_neg.begin() + bp);
    EvalResult tmp;
    score_direction(tmp, "icam_matched", "pos", ipm, gp, mp, ip, true);
    score_direction(tmp, "icam_matched", "neg", inm, gn, mn, in, true);
    for (auto& r : tmp.report.rows) rep.rows.push_back(r);
  }

  // Completeness of integrated gradients on held-out images.
  if (config.ig_check_images > 0) {
    torch::AutoGradMode enable(true);
    const auto m = std::min(config.ig_check_images, n);
    const auto f = baselines::class_score(clf, 1);
    for (std::int64_t k = 0; k < m; ++k) {
      const auto x = test.images[k].to(clf->head->weight.dtype());
      out.ig_completeness_error.push_back(ig_completeness_error(f, x, torch::zeros_like(x), config.ig_steps));
    }
    const auto ms = eval::mean_std(out.ig_completeness_error);
    rep.add("ig_completeness", "relative_error_mean", ms);
    rep.add("ig_completeness", "relative_error_max",
            *std::max_element(out.ig_completeness_error.begin(), out.ig_completeness_error.end()), 0.0, ms.n);
  }
  return out;
}

void write_subject_csv(const std::filesystem::path& path, const std::vector<SubjectRecord>& subjects) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,direction,method,ncc,status,reason\n" << std::setprecision(10);
  for (const auto& s : subjects) {
    out << s.id << ',' << s.direction << ',' << s.method << ',';
    if (!s.skipped) out << s.ncc;
    out << ',' << (s.skipped ? "skipped" : "ok") << ',' << '"' << s.reason << '"' << '\n';
  }
}

// --------------------------------------------------------------------------

StagedDirectory::StagedDirectory(std::filesystem::path target, bool force)
    : target_(std::move(target)), force_(force) {
  if (target_.empty()) throw ConfigError("output directory must be given");
  if (std::filesystem::exists(target_) && !force_) {
    throw IoError("output directory exists (use --force to replace it): " + target_.string());
  }
  const auto parent = std::filesystem::absolute(target_).parent_path();
  std::filesystem::create_directories(parent);
  staging_ = parent / ("." + target_.filename().string() + ".partial-" + std::to_string(::getpid()));
  std::filesystem::remove_all(staging_);
  std::filesystem::create_directory(staging_);
}

StagedDirectory::~StagedDirectory() {
  if (!committed_) {
    std::error_code ec;
    std::filesystem::remove_all(staging_, ec);
  }
}

void StagedDirectory::commit() {
  if (committed_) return;
  if (std::filesystem::exists(target_)) {
    if (!force_) throw IoError("output directory appeared while running: " + target_.string());
    std::filesystem::remove_all(target_);
  }
  std::filesystem::rename(staging_, target_);
  committed_ = true;
}

nlohmann::json run_manifest(const std::string& command, const nlohmann::json& config, std::uint64_t seed,
                            const nlohmann::json& inputs) {
  return {{"command", command},
          {"config", config},
          {"config_hash", config_hash(config)},
          {"seed", seed},
          {"inputs", inputs},
          {"versions", {{"icam", kVersion}, {"torch", TORCH_VERSION}, {"format", "ICAMTNS1"}}}};
}

}  // namespace icam::pipeline
