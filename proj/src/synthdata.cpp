#include "icam/synthdata.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <thread>

#include <nlohmann/json.hpp>

#include "icam/tensor_io.hpp"
#include "icam/util.hpp"

namespace icam::synth {
namespace {

constexpr int kPlacementAttempts = 1000;
constexpr double kSpeckleClip = 3.0;

void check_phenotype(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError(std::string(what) + " must lie in [0,1], got " + std::to_string(t));
  }
}

// Rotated, centre-relative coordinates of a pixel centre.
struct Frame {
  double cos_r, sin_r, cx, cy;

  Frame(const ContentFactors& c, const PhantomConfig& cfg)
      : cos_r(std::cos(c.rotation)),
        sin_r(std::sin(c.rotation)),
        cx(0.5 * static_cast<double>(cfg.width)),
        cy(0.5 * static_cast<double>(cfg.height)) {}

  std::pair<double, double> uv(std::int64_t row, std::int64_t col) const {
    const double dx = static_cast<double>(col) + 0.5 - cx;
    const double dy = static_cast<double>(row) + 0.5 - cy;
    return {dx * cos_r + dy * sin_r, -dx * sin_r + dy * cos_r};
  }
};

bool inside(double u, double v, double a, double b) {
  if (a <= 0.0 || b <= 0.0) return false;
  return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
}

enum class Tissue : std::uint8_t { background, white_matter, band, ventricle };

Tissue classify(double u, double v, const ContentFactors& c, double thickness, double vscale) {
  const double a = c.semi_axis_major;
  const double b = c.semi_axis_minor;
  if (!inside(u, v, a, b)) return Tissue::background;
  if (inside(u, v, a * vscale, b * vscale)) return Tissue::ventricle;
  if (!inside(u, v, a - thickness, b - thickness)) return Tissue::band;
  return Tissue::white_matter;
}

std::vector<double> speckle_field(std::uint64_t seed, std::int64_t count) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> n(static_cast<std::size_t>(count));
  for (auto& v : n) v = std::clamp(normal(rng), -kSpeckleClip, kSpeckleClip);
  return n;
}

}  // namespace

double PhantomConfig::band_thickness(double t) const {
  return band_thickness_young + (band_thickness_old - band_thickness_young) * t;
}

double PhantomConfig::ventricle_scale(double t) const {
  const double a0 = ventricle_scale_young * ventricle_scale_young;
  const double a1 = ventricle_scale_old * ventricle_scale_old;
  return std::sqrt(a0 + (a1 - a0) * t);
}

double PhantomConfig::min_semi_axis() const {
  return static_cast<double>(std::min(height, width)) / 4.0;
}

double PhantomConfig::max_semi_axis() const {
  return static_cast<double>(std::min(height, width)) / 2.5;
}

int class_of(double phenotype) { return phenotype > 0.5 ? 1 : 0; }

ContentFactors sample_content(std::mt19937_64& rng, const PhantomConfig& config) {
  std::uniform_real_distribution<double> axis(config.min_semi_axis(), config.max_semi_axis());
  std::uniform_real_distribution<double> rot(-std::numbers::pi / 4.0, std::numbers::pi / 4.0);
  std::uniform_real_distribution<double> base(0.3, 0.7);
  ContentFactors c;
  const double a = axis(rng);
  const double b = axis(rng);
  c.semi_axis_major = std::max(a, b);
  c.semi_axis_minor = std::min(a, b);
  c.rotation = rot(rng);
  c.base_intensity = base(rng);
  c.texture_seed = rng();
  return c;
}

void validate_content(const ContentFactors& c, const PhantomConfig& config) {
  const double lo = config.min_semi_axis() - 1e-9;
  const double hi = config.max_semi_axis() + 1e-9;
  for (double axis : {c.semi_axis_major, c.semi_axis_minor}) {
    if (!(axis >= lo && axis <= hi)) throw DomainError("content: semi-axis outside [size/4, size/2.5]");
  }
  if (!(std::abs(c.rotation) <= std::numbers::pi / 4.0 + 1e-12)) {
    throw DomainError("content: rotation outside [-pi/4, pi/4]");
  }
  if (!(c.base_intensity >= 0.3 && c.base_intensity <= 0.7)) {
    throw DomainError("content: base intensity outside [0.3, 0.7]");
  }
}

Image render_phantom(const ContentFactors& content, double t, const PhantomConfig& config) {
  check_phenotype(t, "phenotype");
  const Frame frame(content, config);
  const double thickness = config.band_thickness(t);
  const double vscale = config.ventricle_scale(t);
  const auto speckle = speckle_field(content.texture_seed, config.height * config.width);

  Image image(config.height, config.width, 0.0f);
  for (std::int64_t r = 0; r < config.height; ++r) {
    for (std::int64_t c = 0; c < config.width; ++c) {
      const auto [u, v] = frame.uv(r, c);
      double value = 0.0;
      switch (classify(u, v, content, thickness, vscale)) {
        case Tissue::background: continue;
        case Tissue::ventricle: value = config.ventricle_intensity; break;
        case Tissue::band: value = content.base_intensity + config.cortex_contrast; break;
        case Tissue::white_matter: value = content.base_intensity; break;
      }
      const auto idx = static_cast<std::size_t>(r * config.width + c);
      value *= 1.0 + config.speckle_sigma * speckle[idx];
      image.data[idx] = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
  return image;
}

PhantomRegions render_regions(const ContentFactors& content, double t, const PhantomConfig& config) {
  check_phenotype(t, "phenotype");
  const Frame frame(content, config);
  const std::int64_t h = config.height, w = config.width;
  PhantomRegions regions{Mask(h, w), Mask(h, w), Mask(h, w), Mask(h, w), Mask(h, w)};
  const double thickness = config.band_thickness(t);
  const double vscale = config.ventricle_scale(t);
  const double thick_max = std::max(config.band_thickness_young, config.band_thickness_old);
  const double vscale_max = std::max(config.ventricle_scale_young, config.ventricle_scale_old);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const auto [u, v] = frame.uv(r, c);
      const Tissue now = classify(u, v, content, thickness, vscale);
      if (now == Tissue::background) continue;
      regions.tissue.at(r, c) = 1;
      regions.band.at(r, c) = now == Tissue::band;
      regions.ventricle.at(r, c) = now == Tissue::ventricle;
      const double a = content.semi_axis_major, b = content.semi_axis_minor;
      regions.band_envelope.at(r, c) = !inside(u, v, a - thick_max, b - thick_max);
      regions.ventricle_envelope.at(r, c) = inside(u, v, a * vscale_max, b * vscale_max);
    }
  }
  return regions;
}

LesionResult add_punctate_lesions(const Image& image, const Mask& tissue_mask, int count, double radius,
                                  std::uint64_t seed, double intensity) {
  require_same_shape(image, tissue_mask, "add_punctate_lesions");
  if (count < 0) throw ContractError("lesion count must be >= 0");
  if (!(radius >= 1.0)) throw ContractError("lesion radius must be >= 1 pixel");

  LesionResult out{image, Mask(image.height, image.width)};
  if (count == 0) return out;

  const auto reach = static_cast<std::int64_t>(std::floor(radius));
  const double r2 = radius * radius;
  std::vector<std::pair<std::int64_t, std::int64_t>> disc;
  for (std::int64_t dy = -reach; dy <= reach; ++dy) {
    for (std::int64_t dx = -reach; dx <= reach; ++dx) {
      if (static_cast<double>(dx * dx + dy * dy) <= r2) disc.emplace_back(dy, dx);
    }
  }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> row_dist(0, image.height - 1);
  std::uniform_int_distribution<std::int64_t> col_dist(0, image.width - 1);

  auto fits = [&](std::int64_t cr, std::int64_t cc) {
    for (auto [dy, dx] : disc) {
      const std::int64_t r = cr + dy, c = cc + dx;
      if (r < 0 || c < 0 || r >= image.height || c >= image.width) return false;
      if (!tissue_mask.at(r, c)) return false;
      // Keep an empty 8-neighbourhood ring so lesions stay separate components.
      for (std::int64_t nr = r - 1; nr <= r + 1; ++nr) {
        for (std::int64_t nc = c - 1; nc <= c + 1; ++nc) {
          if (nr >= 0 && nc >= 0 && nr < image.height && nc < image.width && out.lesion_mask.at(nr, nc)) {
            return false;
          }
        }
      }
    }
    return true;
  };

  for (int placed = 0; placed < count; ++placed) {
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      const std::int64_t cr = row_dist(rng), cc = col_dist(rng);
      if (!fits(cr, cc)) continue;
      for (auto [dy, dx] : disc) {
        out.lesion_mask.at(cr + dy, cc + dx) = 1;
        out.image.at(cr + dy, cc + dx) = static_cast<float>(intensity);
      }
      ok = true;
    }
    if (!ok) {
      throw PlacementError("could not place lesion " + std::to_string(placed + 1) + " of " +
                           std::to_string(count) + " within " + std::to_string(kPlacementAttempts) +
                           " attempts");
    }
  }
  return out;
}

PhenotypeSample make_pair_with_gt(const ContentFactors& content, double t_source, double t_reference,
                                  const PhantomConfig& config) {
  check_phenotype(t_source, "source phenotype");
  check_phenotype(t_reference, "reference phenotype");
  PhenotypeSample s;
  s.image = render_phantom(content, t_source, config);
  const Image reference = render_phantom(content, t_reference, config);
  s.gt_diff = Image(config.height, config.width);
  for (std::size_t i = 0; i < s.gt_diff.data.size(); ++i) {
    s.gt_diff.data[i] = reference.data[i] - s.image.data[i];
  }
  s.class_label = class_of(t_source);
  s.phenotype = t_source;
  s.reference_phenotype = t_reference;
  s.content = content;
  s.lesion_mask = Mask(config.height, config.width);
  s.tissue_mask = render_regions(content, t_source, config).tissue;
  return s;
}

// ---------------------------------------------------------------------------

void DatasetConfig::validate() const {
  if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
  if (phantom.height % 16 != 0 || phantom.width % 16 != 0 || phantom.height <= 0 || phantom.width <= 0) {
    throw ConfigError("image height and width must be positive multiples of 16");
  }
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (f < 0.0) throw ConfigError("split fractions must be >= 0");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  if (lesion_probability < 0.0 || lesion_probability > 1.0) throw ConfigError("lesion_probability in [0,1]");
  if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) throw ConfigError("bad lesion count range");
  if (lesion_radius < 1.0) throw ConfigError("lesion_radius must be >= 1");
  if (reference_shift <= 0.0 || reference_shift > 0.5) throw ConfigError("reference_shift in (0, 0.5]");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  const auto& p = c.phantom;
  j = nlohmann::json{
      {"n_samples", c.n_samples},
      {"height", p.height},
      {"width", p.width},
      {"band_thickness_young", p.band_thickness_young},
      {"band_thickness_old", p.band_thickness_old},
      {"ventricle_scale_young", p.ventricle_scale_young},
      {"ventricle_scale_old", p.ventricle_scale_old},
      {"ventricle_intensity", p.ventricle_intensity},
      {"cortex_contrast", p.cortex_contrast},
      {"speckle_sigma", p.speckle_sigma},
      {"lesion_intensity", p.lesion_intensity},
      {"train_fraction", c.train_fraction},
      {"val_fraction", c.val_fraction},
      {"test_fraction", c.test_fraction},
      {"lesion_probability", c.lesion_probability},
      {"lesion_count_min", c.lesion_count_min},
      {"lesion_count_max", c.lesion_count_max},
      {"lesion_radius", c.lesion_radius},
      {"reference_shift", c.reference_shift},
      {"class_balance_tolerance", c.class_balance_tolerance},
  };
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  nlohmann::json defaults = c;
  for (const auto& [key, value] : j.items()) {
    if (key == "threads") continue;
    if (!defaults.contains(key)) throw ConfigError("unknown data key: " + key);
  }
  auto& p = c.phantom;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_samples", c.n_samples);
  get("height", p.height);
  get("width", p.width);
  get("band_thickness_young", p.band_thickness_young);
  get("band_thickness_old", p.band_thickness_old);
  get("ventricle_scale_young", p.ventricle_scale_young);
  get("ventricle_scale_old", p.ventricle_scale_old);
  get("ventricle_intensity", p.ventricle_intensity);
  get("cortex_contrast", p.cortex_contrast);
  get("speckle_sigma", p.speckle_sigma);
  get("lesion_intensity", p.lesion_intensity);
  get("train_fraction", c.train_fraction);
  get("val_fraction", c.val_fraction);
  get("test_fraction", c.test_fraction);
  get("lesion_probability", c.lesion_probability);
  get("lesion_count_min", c.lesion_count_min);
  get("lesion_count_max", c.lesion_count_max);
  get("lesion_radius", c.lesion_radius);
  get("reference_shift", c.reference_shift);
  get("class_balance_tolerance", c.class_balance_tolerance);
  get("threads", c.threads);
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw IoError("unknown split: " + s);
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

PhenotypeSample generate_sample(const DatasetConfig& config, std::uint64_t seed, std::int64_t index) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  const ContentFactors content = sample_content(rng, config.phantom);

  // Stratified phenotype: even indices class 0 on [0, 0.5], odd indices class 1
  // on (0.5, 1]. Marginally uniform on [0,1], classes balanced exactly.
  const int label = static_cast<int>(index % 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  const double t = label == 0 ? 0.5 * (1.0 - u) : 0.5 + 0.5 * (1.0 - u);  // (0,0.5] / (0.5,1]
  const double t_ref = label == 1 ? t - config.reference_shift : t + config.reference_shift;

  PhenotypeSample sample = make_pair_with_gt(content, t, std::clamp(t_ref, 0.0, 1.0), config.phantom);
  if (label == 1 && unit(rng) < config.lesion_probability) {
    std::uniform_int_distribution<int> count(config.lesion_count_min, config.lesion_count_max);
    const int n = count(rng);
    const Image reference = [&] {
      Image r = sample.gt_diff;
      for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] += sample.image.data[i];
      return r;
    }();
    auto lesioned = add_punctate_lesions(sample.image, sample.tissue_mask, n, config.lesion_radius, rng(),
                                         config.phantom.lesion_intensity);
    sample.image = std::move(lesioned.image);
    sample.lesion_mask = std::move(lesioned.lesion_mask);
    for (std::size_t i = 0; i < reference.data.size(); ++i) {
      sample.gt_diff.data[i] = reference.data[i] - sample.image.data[i];
    }
  }
  return sample;
}

namespace {

std::string record_id(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06lld", static_cast<long long>(index));
  return buf;
}

nlohmann::json record_to_json(const ManifestRecord& r) {
  return {{"id", r.id},
          {"image_path", r.image_path},
          {"mask_path", r.mask_path},
          {"gt_diff_path", r.gt_diff_path},
          {"class_label", r.class_label},
          {"phenotype", r.phenotype},
          {"reference_phenotype", r.reference_phenotype},
          {"split", to_string(r.split)}};
}

void write_sample_files(const std::filesystem::path& dir, const ManifestRecord& rec, const PhenotypeSample& s) {
  const auto h = static_cast<std::uint32_t>(s.image.height);
  const auto w = static_cast<std::uint32_t>(s.image.width);
  write_tensor_file(dir / rec.image_path, TensorRecord{{1, h, w}, s.image.data});
  TensorRecord masks{{2, h, w}, {}};
  masks.values.reserve(2u * h * w);
  masks.values.insert(masks.values.end(), s.tissue_mask.data.begin(), s.tissue_mask.data.end());
  masks.values.insert(masks.values.end(), s.lesion_mask.data.begin(), s.lesion_mask.data.end());
  write_tensor_file(dir / rec.mask_path, masks);
  write_tensor_file(dir / rec.gt_diff_path, TensorRecord{{1, h, w}, s.gt_diff.data});
}

}  // namespace

DatasetManifest generate_dataset(const DatasetConfig& config, std::uint64_t seed,
                                 const std::filesystem::path& out_dir) {
  config.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"images", "masks", "gt_diff"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.config = config;
  nlohmann::json cfg_json = config;
  manifest.generator_config_hash = config_hash(cfg_json);

  const std::int64_t n = config.n_samples;
  const auto n_train = static_cast<std::int64_t>(std::llround(config.train_fraction * static_cast<double>(n)));
  const auto n_val = std::min<std::int64_t>(
      n - n_train, static_cast<std::int64_t>(std::llround(config.val_fraction * static_cast<double>(n))));

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 split_rng(derive_seed(seed, 0xfffffffffull));
  std::shuffle(order.begin(), order.end(), split_rng);
  std::vector<Split> split_of(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) {
    split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] =
        k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }

  manifest.records.resize(static_cast<std::size_t>(n));
  std::atomic<std::int64_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::int64_t i = next++; i < n; i = next++) {
      try {
        const PhenotypeSample s = generate_sample(config, seed, i);
        ManifestRecord rec;
        rec.id = record_id(i);
        rec.image_path = "images/" + rec.id + ".tns";
        rec.mask_path = "masks/" + rec.id + ".tns";
        rec.gt_diff_path = "gt_diff/" + rec.id + ".tns";
        rec.class_label = s.class_label;
        rec.phenotype = s.phenotype;
        rec.reference_phenotype = s.reference_phenotype;
        rec.split = split_of[static_cast<std::size_t>(i)];
        write_sample_files(out_dir, rec, s);
        manifest.records[static_cast<std::size_t>(i)] = std::move(rec);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int workers = std::max(1, std::min<int>(config.threads, static_cast<int>(n)));
    for (int k = 1; k < workers; ++k) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);

  const auto ones = std::count_if(manifest.records.begin(), manifest.records.end(),
                                  [](const auto& r) { return r.class_label == 1; });
  if (std::abs(static_cast<double>(ones) / static_cast<double>(n) - 0.5) >
      config.class_balance_tolerance + 0.5 / static_cast<double>(n)) {
    throw Error("class_imbalance", "generated classes are outside the balance tolerance");
  }

  std::ofstream jsonl(out_dir / kManifestFile, std::ios::trunc);
  if (!jsonl) throw IoError("cannot write manifest in " + out_dir.string());
  for (const auto& r : manifest.records) jsonl << record_to_json(r).dump() << '\n';

  nlohmann::json info = {{"format", "icam-dataset-1"},
                         {"generator_config", cfg_json},
                         {"generator_config_hash", manifest.generator_config_hash},
                         {"seed", seed},
                         {"counts",
                          {{"train", manifest.count(Split::train)},
                           {"val", manifest.count(Split::val)},
                           {"test", manifest.count(Split::test)}}}};
  std::ofstream info_out(out_dir / kDatasetInfoFile, std::ios::trunc);
  info_out << info.dump(2) << '\n';
  if (!jsonl || !info_out) throw IoError("failed writing manifest files in " + out_dir.string());
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir) {
  std::ifstream info_in(dataset_dir / kDatasetInfoFile);
  if (!info_in) throw IoError("missing " + (dataset_dir / kDatasetInfoFile).string());
  const auto info = nlohmann::json::parse(info_in);

  DatasetManifest manifest;
  manifest.config = info.at("generator_config").get<DatasetConfig>();
  manifest.generator_config_hash = info.at("generator_config_hash").get<std::string>();
  manifest.seed = info.at("seed").get<std::uint64_t>();

  std::ifstream in(dataset_dir / kManifestFile);
  if (!in) throw IoError("missing " + (dataset_dir / kManifestFile).string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.image_path = j.at("image_path").get<std::string>();
    r.mask_path = j.at("mask_path").get<std::string>();
    r.gt_diff_path = j.at("gt_diff_path").get<std::string>();
    r.class_label = j.at("class_label").get<int>();
    r.phenotype = j.at("phenotype").get<double>();
    r.reference_phenotype = j.value("reference_phenotype", r.phenotype);
    r.split = split_from_string(j.at("split").get<std::string>());
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

}  // namespace icam::synth
