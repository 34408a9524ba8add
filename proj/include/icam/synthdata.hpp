#pragma once

// Synthetic 2D phenotype phantoms.
//
// A phantom is an elliptical "brain" with a bright outer cortical band, a
// darker interior and a dark central ventricle. A scalar phenotype t in [0,1]
// enlarges the ventricle (area linear in t) and thins the band (thickness
// linear in t). Everything else (shape, orientation, base intensity, speckle)
// is content and does not depend on t.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "icam/grid.hpp"

namespace icam::synth {

struct ContentFactors {
  double semi_axis_major = 20.0;  // pixels, along the rotated u axis
  double semi_axis_minor = 18.0;  // pixels, along the rotated v axis
  double rotation = 0.0;          // radians, [-pi/4, pi/4]
  double base_intensity = 0.5;    // [0.3, 0.7]
  std::uint64_t texture_seed = 0;
};

struct PhantomConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  double band_thickness_young = 6.0;  // pixels at t = 0
  double band_thickness_old = 2.0;    // pixels at t = 1
  double ventricle_scale_young = 0.15;  // fraction of the outer semi-axes at t = 0
  double ventricle_scale_old = 0.35;
  double ventricle_intensity = 0.1;
  double cortex_contrast = 0.25;
  double speckle_sigma = 0.05;
  double lesion_intensity = 0.95;

  double band_thickness(double t) const;
  double ventricle_scale(double t) const;
  double band_thickness_mid() const { return band_thickness(0.5); }
  /// Allowed semi-axis range [size/4, size/2.5] for the smaller image side.
  double min_semi_axis() const;
  double max_semi_axis() const;
};

struct PhantomRegions {
  Mask tissue;
  Mask band;                // cortical band at the rendered t
  Mask ventricle;           // ventricle at the rendered t
  Mask band_envelope;       // band at its thickest (t = 0)
  Mask ventricle_envelope;  // ventricle at its largest (t = 1)
};

struct PhenotypeSample {
  Image image;
  int class_label = 0;
  double phenotype = 0.0;
  double reference_phenotype = 0.0;
  ContentFactors content;
  Mask lesion_mask;
  Image gt_diff;  // render(reference) - image, zero outside tissue
  Mask tissue_mask;
};

int class_of(double phenotype);

/// Draws content factors satisfying the ContentFactors invariants.
ContentFactors sample_content(std::mt19937_64& rng, const PhantomConfig& config);
void validate_content(const ContentFactors& content, const PhantomConfig& config);

/// Deterministic in (content, t). Throws DomainError for t outside [0,1].
Image render_phantom(const ContentFactors& content, double t, const PhantomConfig& config = {});
PhantomRegions render_regions(const ContentFactors& content, double t, const PhantomConfig& config = {});

struct LesionResult {
  Image image;
  Mask lesion_mask;
};

/// Places `count` non-overlapping, non-touching discs fully inside
/// `tissue_mask`. Throws PlacementError when a disc cannot be placed within
/// 1000 attempts.
LesionResult add_punctate_lesions(const Image& image, const Mask& tissue_mask, int count, double radius,
                                  std::uint64_t seed, double intensity = 0.95);

/// Sample rendered at t_source (no lesions) with gt_diff = render(t_reference) - render(t_source).
PhenotypeSample make_pair_with_gt(const ContentFactors& content, double t_source, double t_reference,
                                  const PhantomConfig& config = {});

// ---------------------------------------------------------------------------
// Datasets on disk

struct DatasetConfig {
  std::int64_t n_samples = 100;
  PhantomConfig phantom;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  double lesion_probability = 0.25;  // class 1 only
  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_radius = 1.5;
  double reference_shift = 0.5;  // reference phenotype = t -/+ shift for class 1/0
  double class_balance_tolerance = 0.05;
  int threads = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

enum class Split { train, val, test };
std::string to_string(Split split);
Split split_from_string(const std::string& s);

struct ManifestRecord {
  std::string id;
  std::string image_path;    // relative to the dataset directory
  std::string mask_path;     // 2 x H x W: tissue, lesion
  std::string gt_diff_path;  // 1 x H x W
  int class_label = 0;
  double phenotype = 0.0;
  double reference_phenotype = 0.0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::string generator_config_hash;
  std::uint64_t seed = 0;
  DatasetConfig config;

  std::size_t count(Split split) const;
};

inline constexpr const char* kManifestFile = "manifest.jsonl";
inline constexpr const char* kDatasetInfoFile = "dataset.json";

/// Builds one record's sample; randomness derives only from (seed, index).
PhenotypeSample generate_sample(const DatasetConfig& config, std::uint64_t seed, std::int64_t index);

DatasetManifest generate_dataset(const DatasetConfig& config, std::uint64_t seed,
                                 const std::filesystem::path& out_dir);
DatasetManifest read_manifest(const std::filesystem::path& dataset_dir);

}  // namespace icam::synth
