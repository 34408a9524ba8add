#include "icam/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>

#include "icam/attribution.hpp"
#include "icam/evalmetrics.hpp"
#include "icam/util.hpp"

namespace icam::train {

using losses::LossReport;
using nets::Component;
namespace term = losses::term;

void TrainConfig::validate() const {
  if (!(lr_content_disc > 0.0) || !(lr_other > 0.0)) throw ConfigError("learning rates must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (batch_size < 2 || batch_size % 2 != 0) {
    throw ConfigError("batch_size must be even and >= 2 (half per class)");
  }
  if (epochs < 0 || regression_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  if (rejection_max_attempts < 1) throw ConfigError("rejection_max_attempts must be >= 1");
  if (max_val_pairs < 1) throw ConfigError("max_val_pairs must be >= 1");
  weights.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr_content_disc", c.lr_content_disc},
       {"lr_other", c.lr_other},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"regression_epochs", c.regression_epochs},
       {"weights", c.weights},
       {"seed", c.seed},
       {"regression_enabled", c.regression_enabled},
       {"rejection_max_attempts", c.rejection_max_attempts},
       {"max_val_pairs", c.max_val_pairs}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig d;
  for (const auto& [key, value] : j.items()) {
    if (key == "lr_content_disc") d.lr_content_disc = value.get<double>();
    else if (key == "lr_other") d.lr_other = value.get<double>();
    else if (key == "adam_beta1") d.adam_beta1 = value.get<double>();
    else if (key == "adam_beta2") d.adam_beta2 = value.get<double>();
    else if (key == "batch_size") d.batch_size = value.get<std::int64_t>();
    else if (key == "epochs") d.epochs = value.get<int>();
    else if (key == "regression_epochs") d.regression_epochs = value.get<int>();
    else if (key == "weights") d.weights = value.get<losses::LossWeights>();
    else if (key == "seed") d.seed = value.get<std::uint64_t>();
    else if (key == "regression_enabled") d.regression_enabled = value.get<bool>();
    else if (key == "rejection_max_attempts") d.rejection_max_attempts = value.get<int>();
    else if (key == "max_val_pairs") d.max_val_pairs = value.get<std::int64_t>();
    else throw ConfigError("unknown train config key: " + key);
  }
  d.validate();
  c = d;
}

// --------------------------------------------------------------------------
// Rejection sampling

namespace {

std::vector<std::int64_t> with_batch(std::int64_t n, const std::vector<std::int64_t>& shape) {
  std::vector<std::int64_t> out{n};
  out.insert(out.end(), shape.begin(), shape.end());
  return out;
}

// Probability the classifier gives to `target` for each logit.
torch::Tensor target_probability(const torch::Tensor& logits, const torch::Tensor& targets) {
  const auto p1 = torch::sigmoid(logits.to(torch::kFloat64));
  return torch::where(targets > 0.5, p1, 1.0 - p1);
}

torch::Tensor accepted(const torch::Tensor& logits, const torch::Tensor& targets) {
  return (logits > 0).to(torch::kFloat64) == (targets > 0.5).to(torch::kFloat64);
}

}  // namespace

RejectionResult rejection_sample_attr(const LatentClassifier& classifier, int target_class,
                                      const std::vector<std::int64_t>& prior_shape, int max_attempts,
                                      at::Generator& rng) {
  if (target_class != 0 && target_class != 1) throw ContractError("target_class must be 0 or 1");
  if (max_attempts < 1) throw ContractError("max_attempts must be >= 1");
  torch::NoGradGuard no_grad;
  torch::Tensor best;
  double best_p = -1.0;
  const auto target = torch::full({1}, static_cast<double>(target_class), torch::kFloat64);
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    auto z = torch::randn(with_batch(1, prior_shape), rng);
    const auto logit = classifier(z).reshape({1});
    if (accepted(logit, target).item<bool>()) return {z[0], attempt};
    const double p = target_probability(logit, target).item<double>();
    if (p > best_p) {
      best_p = p;
      best = z[0];
    }
  }
  throw RejectionExhaustedError("no attribute draw classified as class " + std::to_string(target_class) + " in " +
                                    std::to_string(max_attempts) + " attempts",
                                best, best_p);
}

BatchRejection rejection_sample_batch(const LatentClassifier& classifier, const torch::Tensor& targets,
                                      const std::vector<std::int64_t>& prior_shape, int max_attempts,
                                      at::Generator& rng, bool fallback_to_best) {
  if (max_attempts < 1) throw ContractError("max_attempts must be >= 1");
  torch::NoGradGuard no_grad;
  const auto n = targets.size(0);
  const auto t = targets.to(torch::kFloat64).flatten();
  BatchRejection out;
  out.samples = torch::zeros(with_batch(n, prior_shape));
  out.attempts.assign(static_cast<std::size_t>(n), 0);
  auto best = torch::zeros(with_batch(n, prior_shape));
  std::vector<double> best_p(static_cast<std::size_t>(n), -1.0);
  std::vector<std::int64_t> pending(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) pending[static_cast<std::size_t>(i)] = i;

  for (int attempt = 1; attempt <= max_attempts && !pending.empty(); ++attempt) {
    const auto m = static_cast<std::int64_t>(pending.size());
    auto idx = torch::tensor(pending, torch::kLong);
    auto z = torch::randn(with_batch(m, prior_shape), rng);
    const auto tz = t.index_select(0, idx);
    const auto logits = classifier(z).reshape({m});
    const auto ok = accepted(logits, tz);
    const auto p = target_probability(logits, tz);
    std::vector<std::int64_t> still;
    for (std::int64_t k = 0; k < m; ++k) {
      const auto row = pending[static_cast<std::size_t>(k)];
      out.attempts[static_cast<std::size_t>(row)] = attempt;
      if (ok[k].item<double>() > 0.5) {
        out.samples[row].copy_(z[k]);
        continue;
      }
      const double pk = p[k].item<double>();
      if (pk > best_p[static_cast<std::size_t>(row)]) {
        best_p[static_cast<std::size_t>(row)] = pk;
        best[row].copy_(z[k]);
      }
      still.push_back(row);
    }
    pending = std::move(still);
  }
  if (!pending.empty()) {
    const auto row = pending.front();
    if (!fallback_to_best) {
      throw RejectionExhaustedError("rejection sampling exhausted " + std::to_string(max_attempts) +
                                        " attempts for " + std::to_string(pending.size()) + " rows",
                                    best[row].clone(), best_p[static_cast<std::size_t>(row)]);
    }
    for (auto r : pending) out.samples[r].copy_(best[r]);
    out.exhausted = static_cast<int>(pending.size());
  }
  return out;
}

// --------------------------------------------------------------------------
// RNG state

std::string rng_state_hex(const at::Generator& rng) {
  at::Generator g = rng;
  torch::Tensor state;
  {
    std::lock_guard<std::mutex> lock(g.mutex());
    state = g.get_state();
  }
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  const auto* p = state.data_ptr<std::uint8_t>();
  for (std::int64_t i = 0; i < state.numel(); ++i) out << std::setw(2) << static_cast<unsigned>(p[i]);
  return out.str();
}

void set_rng_state_hex(at::Generator& rng, const std::string& hex) {
  if (hex.size() % 2 != 0) throw IoError("rng state hex has odd length");
  auto state = torch::empty({static_cast<std::int64_t>(hex.size() / 2)}, torch::kUInt8);
  auto* p = state.data_ptr<std::uint8_t>();
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    p[i / 2] = static_cast<std::uint8_t>(std::stoul(hex.substr(i, 2), nullptr, 16));
  }
  std::lock_guard<std::mutex> lock(rng.mutex());
  rng.set_state(state);
}

// --------------------------------------------------------------------------
// Trainer

Trainer::Trainer(nets::IcamModel& model, TrainConfig config)
    : model_(model),
      config_((config.validate(), std::move(config))),
      regression_enabled_(false),
      rng_(at::make_generator<at::CPUGeneratorImpl>(derive_seed(config_.seed, 0x7261696eULL))),
      content_disc_opt_(model.parameters(Component::content_disc), config_.lr_content_disc, config_.adam_beta1,
                        config_.adam_beta2),
      domain_disc_opt_(model.parameters(Component::domain_disc), config_.lr_other, config_.adam_beta1,
                       config_.adam_beta2),
      main_opt_(model.parameters({Component::attribute_encoder, Component::heads, Component::content_encoder,
                                  Component::generator}),
                config_.lr_other, config_.adam_beta1, config_.adam_beta2) {}

namespace {

double item(const torch::Tensor& t) { return t.detach().to(torch::kFloat64).item<double>(); }

void check_batch(const ClassBatch& b, const char* what) {
  if (!b.images.defined() || b.images.size(0) == 0) {
    throw ContractError(std::string(what) + ": class batch is empty");
  }
  if (b.labels.size(0) != b.images.size(0) || b.phenotypes.size(0) != b.images.size(0)) {
    throw ContractError(std::string(what) + ": labels/phenotypes do not match the image count");
  }
}

ClassBatch truncate(const ClassBatch& b, std::int64_t n) {
  return {b.images.narrow(0, 0, n), b.labels.narrow(0, 0, n), b.phenotypes.narrow(0, 0, n)};
}

}  // namespace

double Trainer::content_disc_update(const ClassBatch& x, const ClassBatch& y) {
  torch::Tensor zx, zy;
  {
    torch::NoGradGuard no_grad;
    zx = model_.encode_content(x.images, true, rng_).features;
    zy = model_.encode_content(y.images, true, rng_).features;
  }
  const auto lx = model_.discriminate_content({zx});
  const auto ly = model_.discriminate_content({zy});
  const auto loss = losses::content_adversarial_loss(lx, ly, losses::Side::discriminator);
  const double value = item(loss);
  if (!std::isfinite(value)) {
    LossReport r;
    r.terms[term::content_adv_disc] = value;
    throw NonFiniteLossError("non-finite content discriminator loss", r);
  }
  content_disc_opt_.zero_grad();
  (config_.weights.content_adv * loss).backward();
  content_disc_opt_.step();
  return value;
}

LossReport Trainer::training_iteration(const ClassBatch& class0, const ClassBatch& class1) {
  return training_iteration(IterationBatches{{class0, class1}, {class0, class1}, {class0, class1}});
}

LossReport Trainer::training_iteration(const IterationBatches& batches) {
  for (const auto* p : {&batches.content_disc_1, &batches.content_disc_2, &batches.main}) {
    check_batch(p->first, "training_iteration");
    check_batch(p->second, "training_iteration");
  }
  const auto& w = config_.weights;
  LossReport report;

  // 1. Content discriminator, twice.
  const double dc1 = content_disc_update(batches.content_disc_1.first, batches.content_disc_1.second);
  const double dc2 = content_disc_update(batches.content_disc_2.first, batches.content_disc_2.second);
  report.terms[term::content_adv_disc] = 0.5 * (dc1 + dc2);

  // 2. Forward pass on the main batch, paired so both classes contribute n items.
  const auto n = std::min(batches.main.first.images.size(0), batches.main.second.images.size(0));
  const auto bx = truncate(batches.main.first, n);
  const auto by = truncate(batches.main.second, n);
  const auto& x = bx.images;
  const auto& y = by.images;
  const auto xy = torch::cat({x, y});

  const auto content = model_.encode_content(xy, true, rng_).features;
  const auto c_x = content.narrow(0, 0, n), c_y = content.narrow(0, n, n);
  const auto attr = model_.encode_attribute(xy, nets::SamplingMode::stochastic, rng_);
  const auto a_x = attr.sample.narrow(0, 0, n), a_y = attr.sample.narrow(0, n, n);
  const auto pred = model_.predict(attr);
  const auto labels = torch::cat({bx.labels, by.labels});
  const auto phenos = torch::cat({bx.phenotypes, by.phenotypes});
  const auto pl = losses::prediction_loss(pred, labels, phenos, regression_enabled_);

  // Self-reconstruction and cross-translation in one generator call.
  const auto gen_out = model_.generate({torch::cat({c_x, c_y, c_x, c_y})}, torch::cat({a_x, a_y, a_y, a_x}));
  const auto x_rec = gen_out.narrow(0, 0, n), y_rec = gen_out.narrow(0, n, n);
  const auto v = gen_out.narrow(0, 2 * n, n), mu = gen_out.narrow(0, 3 * n, n);
  const auto m_x = v - x, m_y = mu - y;

  // Rejection-sampled attributes drive the second translation path.
  const auto& cfg = model_.config();
  const std::vector<std::int64_t> prior{cfg.attr_channels, cfg.attr_height(), cfg.attr_width()};
  auto heads = model_.heads;
  const LatentClassifier f_c1 = [&heads](const torch::Tensor& z) { return heads->class_logit(z); };
  const auto r_targets = torch::cat({torch::ones({n}), torch::zeros({n})});
  const auto rej = rejection_sample_batch(f_c1, r_targets, prior, config_.rejection_max_attempts, rng_, true);
  const auto z_r = rej.samples.to(attr.sample.dtype());
  const auto gen_r = model_.generate({content}, z_r);
  const auto v_r = gen_r.narrow(0, 0, n), mu_r = gen_r.narrow(0, n, n);

  // Translate back for cycle consistency.
  const auto vm = torch::cat({v, mu});
  const auto c_back = model_.encode_content(vm, true, rng_).features;
  const auto a_back = model_.encode_attribute(vm, nets::SamplingMode::stochastic, rng_).sample;
  const auto cc = model_.generate({c_back}, torch::cat({a_back.narrow(0, n, n), a_back.narrow(0, 0, n)}));
  const auto x_cc = cc.narrow(0, 0, n), y_cc = cc.narrow(0, n, n);

  // Attribute recovered from the sampled translations.
  const auto recovered = model_.encode_attribute(gen_r, nets::SamplingMode::deterministic).mean;

  const auto fakes = torch::cat({v, mu, v_r, mu_r});
  const auto ones = torch::ones({n}), zeros = torch::zeros({n});
  const auto fake_targets = torch::cat({ones, zeros, ones, zeros});

  // 3. Domain discriminator on detached translations.
  {
    const auto real_j = model_.discriminate_domain(xy);
    const auto fake_j = model_.discriminate_domain(fakes.detach());
    const auto d = losses::domain_adversarial_losses(real_j, labels, fake_j, fake_targets, losses::Side::discriminator);
    std::map<std::string, torch::Tensor> dt{{term::domain_adv_disc, d.adv}, {term::domain_bce_disc, d.class_bce}};
    const auto d_total = losses::weighted_total(dt, w, losses::Role::discriminator_side);
    report.terms[term::domain_adv_disc] = item(d.adv);
    report.terms[term::domain_bce_disc] = item(d.class_bce);
    report.discriminator_total = item(d_total);
    if (!std::isfinite(report.discriminator_total)) {
      throw NonFiniteLossError("non-finite domain discriminator loss", report);
    }
    domain_disc_opt_.zero_grad();
    d_total.backward();
    domain_disc_opt_.step();
  }

  // 4. Encoders, heads and generator.
  const auto fake_j = model_.discriminate_domain(fakes);
  const auto g = losses::domain_adversarial_losses(fake_j, fake_targets, fake_j, fake_targets, losses::Side::encoder);
  const auto dc_x = model_.discriminate_content({c_x});
  const auto dc_y = model_.discriminate_content({c_y});

  std::map<std::string, torch::Tensor> gt;
  gt[term::content_adv_encoder] = losses::content_adversarial_loss(dc_x, dc_y, losses::Side::encoder);
  gt[term::domain_adv_gen] = g.adv;
  gt[term::domain_bce_gen] = g.class_bce;
  gt[term::prediction_bce] = pl.bce;
  gt[term::prediction_smooth_l1] = pl.smooth_l1;
  gt[term::kl] = losses::kl_loss(attr);
  gt[term::fa_map] = losses::fa_map_loss(torch::cat({m_x, m_y, v_r - x, mu_r - y}));
  gt[term::latent_cycle] = losses::latent_cycle_loss(z_r, recovered);
  gt[term::reconstruction] = losses::reconstruction_loss(x, x_rec, y, y_rec);
  gt[term::cycle_consistency] = losses::cycle_consistency_loss(x, x_cc, y, y_cc);
  const auto total = losses::weighted_total(gt, w, losses::Role::generator_side);

  for (const auto& [name, value] : gt) report.terms[name] = item(value);
  report.total = item(total);
  report.content_discriminator_total = w.content_adv * report.terms[term::content_adv_disc];
  double mean_attempts = 0.0;
  for (int a : rej.attempts) mean_attempts += a;
  report.diagnostics["rejection_mean_attempts"] = mean_attempts / static_cast<double>(rej.attempts.size());
  report.diagnostics["rejection_exhausted"] = rej.exhausted;
  if (!report.all_finite()) throw NonFiniteLossError("non-finite generator-side loss", report);

  main_opt_.zero_grad();
  total.backward();
  main_opt_.step();
  ++iteration_;
  return report;
}

LossReport Trainer::train_epoch(const TensorDataset& train) {
  const auto idx0 = train.indices_of_class(0);
  const auto idx1 = train.indices_of_class(1);
  if (idx0.numel() == 0 || idx1.numel() == 0) throw InsufficientDataError("training split needs both classes");
  const auto p0 = idx0.index_select(0, torch::randperm(idx0.numel(), rng_));
  const auto p1 = idx1.index_select(0, torch::randperm(idx1.numel(), rng_));
  const auto per_class = std::min({config_.per_class(), p0.numel(), p1.numel()});
  const auto n_batches = std::min(p0.numel(), p1.numel()) / per_class;
  const auto iterations = std::max<std::int64_t>(1, n_batches / 3);

  auto batch = [&](const torch::Tensor& perm, std::int64_t k) {
    const auto sel = perm.narrow(0, (k % n_batches) * per_class, per_class);
    return ClassBatch{train.images.index_select(0, sel), train.labels.index_select(0, sel),
                      train.phenotypes.index_select(0, sel)};
  };
  auto pair = [&](std::int64_t k) { return std::make_pair(batch(p0, k), batch(p1, k)); };

  LossReport mean;
  for (std::int64_t it = 0; it < iterations; ++it) {
    const auto r = training_iteration(IterationBatches{pair(3 * it), pair(3 * it + 1), pair(3 * it + 2)});
    for (const auto& [k, v] : r.terms) mean.terms[k] += v / static_cast<double>(iterations);
    for (const auto& [k, v] : r.diagnostics) mean.diagnostics[k] += v / static_cast<double>(iterations);
    mean.total += r.total / static_cast<double>(iterations);
    mean.discriminator_total += r.discriminator_total / static_cast<double>(iterations);
    mean.content_discriminator_total += r.content_discriminator_total / static_cast<double>(iterations);
  }
  ++epoch_;
  return mean;
}

void Trainer::save_state(const std::filesystem::path& path, nlohmann::json extra_header) const {
  nlohmann::json header = std::move(extra_header);
  header["kind"] = "icam_trainer";
  header["train_config"] = config_;
  header["iteration"] = iteration_;
  header["epoch"] = epoch_;
  header["regression_enabled"] = regression_enabled_;
  header["rng_state"] = rng_state_hex(rng_);
  header["optimizer_steps"] = {{"content_disc", content_disc_opt_.step_count()},
                               {"domain_disc", domain_disc_opt_.step_count()},
                               {"main", main_opt_.step_count()}};
  header["best_val_metric"] = best_val_metric ? nlohmann::json(*best_val_metric) : nlohmann::json(nullptr);
  std::vector<NamedTensor> extra;
  auto add = [&](const std::string& prefix, const optim::Adam& opt) {
    for (const auto& s : opt.state()) extra.push_back({"opt." + prefix + "." + s.name, s.value});
  };
  add("content_disc", content_disc_opt_);
  add("domain_disc", domain_disc_opt_);
  add("main", main_opt_);
  save_model(path, model_, header, extra);
}

nlohmann::json Trainer::load_state(const std::filesystem::path& path) {
  const auto data = read_checkpoint(path);
  const auto& h = data.header;
  const nlohmann::json mine = model_.config();
  if (h.value("model_config_hash", std::string{}) != config_hash(mine)) {
    throw IoError("checkpoint model config does not match the model being trained: " + path.string());
  }
  restore_parameters(data, model_.named_parameters());
  auto load = [&](const std::string& prefix, optim::Adam& opt) {
    std::vector<optim::NamedState> state;
    for (std::size_t i = 0; data.has("opt." + prefix + ".m." + std::to_string(i)); ++i) {
      state.push_back({"m", data.tensor("opt." + prefix + ".m." + std::to_string(i))});
      state.push_back({"v", data.tensor("opt." + prefix + ".v." + std::to_string(i))});
    }
    opt.load_state(state, h.at("optimizer_steps").at(prefix).get<std::int64_t>());
  };
  if (h.value("kind", std::string{}) != "icam_trainer") throw IoError("not a trainer checkpoint: " + path.string());
  load("content_disc", content_disc_opt_);
  load("domain_disc", domain_disc_opt_);
  load("main", main_opt_);
  iteration_ = h.at("iteration").get<std::int64_t>();
  epoch_ = h.at("epoch").get<int>();
  regression_enabled_ = h.at("regression_enabled").get<bool>();
  set_rng_state_hex(rng_, h.at("rng_state").get<std::string>());
  best_val_metric.reset();
  if (!h.at("best_val_metric").is_null()) best_val_metric = h.at("best_val_metric").get<double>();
  return h;
}

// --------------------------------------------------------------------------
// Validation and fit

ValidationMetrics validate(nets::IcamModel& model, const TensorDataset& val, std::int64_t max_pairs) {
  torch::NoGradGuard no_grad;
  ValidationMetrics m;
  std::int64_t correct = 0;
  double abs_err = 0.0;
  for (std::int64_t s = 0; s < val.size(); s += 64) {
    const auto len = std::min<std::int64_t>(64, val.size() - s);
    const auto attr = model.encode_attribute(val.images.narrow(0, s, len), nets::SamplingMode::deterministic);
    const auto p = model.predict(attr);
    correct += ((p.class_logit > 0).to(torch::kFloat32) == val.labels.narrow(0, s, len)).sum().item<std::int64_t>();
    abs_err += (p.regression_value - val.phenotypes.narrow(0, s, len)).abs().sum().item<double>();
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
  m.mae = abs_err / static_cast<double>(val.size());

  const auto i0 = val.indices_of_class(0), i1 = val.indices_of_class(1);
  const auto pairs = std::min({i0.numel(), i1.numel(), max_pairs});
  if (pairs == 0) return m;
  const auto a = val.select(i0.narrow(0, 0, pairs)), b = val.select(i1.narrow(0, 0, pairs));
  const auto bundle = attr::translate_pair(model, a.images, b.images);
  std::vector<Image> maps_pos, gt_pos, maps_neg, gt_neg;
  std::vector<Mask> masks_pos, masks_neg;
  for (std::int64_t k = 0; k < pairs; ++k) {
    maps_pos.push_back(to_image(bundle.m_x[k]));
    gt_pos.push_back(to_image(a.gt_diffs[k]));
    masks_pos.push_back(to_mask(a.tissue_masks[k]));
    maps_neg.push_back(to_image(bundle.m_y[k]));
    gt_neg.push_back(to_image(b.gt_diffs[k]));
    masks_neg.push_back(to_mask(b.tissue_masks[k]));
  }
  const auto pos = eval::evaluate_attribution(maps_pos, gt_pos, masks_pos);
  const auto neg = eval::evaluate_attribution(maps_neg, gt_neg, masks_neg);
  // Degenerate maps score as uncorrelated.
  m.ncc_pos = pos.ncc.n > 0 ? pos.ncc.mean * static_cast<double>(pos.ncc.n) / static_cast<double>(pairs) : 0.0;
  m.ncc_neg = neg.ncc.n > 0 ? neg.ncc.mean * static_cast<double>(neg.ncc.n) / static_cast<double>(pairs) : 0.0;
  m.ncc_pairs = pairs;
  return m;
}

std::vector<std::string> metrics_columns() {
  return {"phase",
          "epoch",
          "iteration",
          term::content_adv_disc,
          term::content_adv_encoder,
          term::domain_adv_disc,
          term::domain_bce_disc,
          term::domain_adv_gen,
          term::domain_bce_gen,
          term::prediction_bce,
          term::prediction_smooth_l1,
          term::kl,
          term::fa_map,
          term::latent_cycle,
          term::reconstruction,
          term::cycle_consistency,
          "total",
          "discriminator_total",
          "content_discriminator_total",
          "rejection_mean_attempts",
          "rejection_exhausted",
          "val_accuracy",
          "val_mae",
          "val_ncc_pos",
          "val_ncc_neg",
          "val_ncc_pairs",
          "selected"};
}

namespace {

std::string csv_row(const std::string& phase, const Trainer& t, const LossReport& r, const ValidationMetrics& v,
                    bool selected) {
  std::ostringstream out;
  out << std::setprecision(10) << phase << ',' << t.epoch() << ',' << t.iteration();
  const auto cols = metrics_columns();
  for (std::size_t i = 3; i < cols.size(); ++i) {
    const auto& c = cols[i];
    out << ',';
    if (auto it = r.terms.find(c); it != r.terms.end()) out << it->second;
    else if (c == "total") out << r.total;
    else if (c == "discriminator_total") out << r.discriminator_total;
    else if (c == "content_discriminator_total") out << r.content_discriminator_total;
    else if (auto d = r.diagnostics.find(c); d != r.diagnostics.end()) out << d->second;
    else if (c == "val_accuracy") out << v.accuracy;
    else if (c == "val_mae") out << v.mae;
    else if (c == "val_ncc_pos") out << v.ncc_pos;
    else if (c == "val_ncc_neg") out << v.ncc_neg;
    else if (c == "val_ncc_pairs") out << v.ncc_pairs;
    else if (c == "selected") out << (selected ? 1 : 0);
    else out << 0;
  }
  return out.str();
}

}  // namespace

FitResult fit(const TensorDataset& train, const TensorDataset& val, const nets::ModelConfig& model_config,
              const TrainConfig& config, const std::filesystem::path& out_dir, const EpochCallback& on_epoch) {
  config.validate();
  if (train.size() == 0 || val.size() == 0) throw InsufficientDataError("fit needs non-empty train and val splits");
  std::filesystem::create_directories(out_dir);
  nets::IcamModel model(model_config);
  Trainer trainer(model, config);

  FitResult result;
  result.last_checkpoint = out_dir / "last.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";
  result.metrics_csv = out_dir / "metrics.csv";
  const auto cls_best = config.regression_enabled ? out_dir / "classification_best.ckpt" : result.best_checkpoint;

  std::ofstream csv(result.metrics_csv, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + result.metrics_csv.string());
  const auto cols = metrics_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) csv << (i ? "," : "") << cols[i];
  csv << '\n';

  auto run_phase = [&](const std::string& phase, int epochs, bool higher_is_better,
                       const std::filesystem::path& best_path) {
    for (int e = 0; e < epochs; ++e) {
      LossReport r;
      try {
        r = trainer.train_epoch(train);
      } catch (const NonFiniteLossError& err) {
        throw NonFiniteLossError(std::string(err.what()) + " during " + phase + " epoch " +
                                     std::to_string(trainer.epoch() + 1) + "; last good checkpoint: " +
                                     result.last_checkpoint.string(),
                                 err.report());
      }
      const auto v = validate(model, val, config.max_val_pairs);
      const double metric = higher_is_better ? v.ncc_mean() : v.mae;
      const bool better = !trainer.best_val_metric ||
                          (higher_is_better ? metric > *trainer.best_val_metric : metric < *trainer.best_val_metric);
      if (better) {
        trainer.best_val_metric = metric;
        trainer.save_state(best_path, {{"phase", phase}, {"selection_metric", metric}});
        result.best_epoch = trainer.epoch();
        result.best_phase = phase;
      }
      trainer.save_state(result.last_checkpoint, {{"phase", phase}});
      csv << csv_row(phase, trainer, r, v, better) << '\n';
      csv.flush();
      if (on_epoch) on_epoch(phase, trainer.epoch(), r, v);
    }
  };

  trainer.set_regression(false);
  run_phase("classification", config.epochs, true, cls_best);
  if (config.epochs == 0) trainer.save_state(cls_best, {{"phase", "classification"}});

  if (config.regression_enabled) {
    const int epochs_so_far = trainer.epoch();
    trainer.load_state(cls_best);
    trainer.set_epoch(epochs_so_far);
    trainer.set_regression(true);
    trainer.best_val_metric.reset();
    run_phase("regression", config.regression_epochs, false, result.best_checkpoint);
    if (config.regression_epochs == 0) std::filesystem::copy_file(cls_best, result.best_checkpoint,
                                                                  std::filesystem::copy_options::overwrite_existing);
  }
  if (!std::filesystem::exists(result.last_checkpoint)) trainer.save_state(result.last_checkpoint);
  return result;
}

}  // namespace icam::train
