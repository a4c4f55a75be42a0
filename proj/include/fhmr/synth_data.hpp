#pragma once

// Seeded synthetic examples: sampled body parameters rendered into small
// images, with 2D keypoints always and 3D labels for a chosen fraction.
// The binary dataset layout is described in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fhmr/body_model.hpp"
#include "fhmr/example.hpp"

namespace fhmr::synth {

inline constexpr uint32_t kDatasetFormatVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetManifest {
  uint64_t seed = 0;
  int n_train = 1;
  int n_val = 1;
  int image_size = 64;
  double fraction_3d = 0.5;
  std::string asset_id;  // content hash of the body asset
  uint32_t format_version = kDatasetFormatVersion;

  void validate() const;
};

// Sampling ranges for poses, shapes and the rendering camera.
struct SamplingRanges {
  double shape_sd = 0.5;
  double joint_limit = M_PI / 3.0;  // per axis-angle component, non-root joints
  double root_yaw_limit = M_PI / 4.0;
  double camera_scale = 0.75;
  double translation_jitter = 0.1;
};

// Channels: flat shading, depth, body-part code; background is 0.
std::vector<uint8_t> render_image(const body::BodyModelAsset& asset, const body::Points3& vertices,
                                  const body::Camera& camera, int image_size);

LabeledExample sample_example(const body::BodyModelAsset& asset, int image_size, double fraction_3d,
                              std::mt19937_64& rng, const SamplingRanges& ranges = {});

struct Dataset {
  DatasetManifest manifest;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> val;
};

// Example i draws from its own stream seeded by (seed, i); validation
// examples continue the index after the training ones.
Dataset generate_dataset(const DatasetManifest& manifest, const body::BodyModelAsset& asset);

void write_dataset(const Dataset& dataset, const std::filesystem::path& path);

// Validates the header, every record checksum and, when an asset is given,
// the asset identity and label sizes.
Dataset read_dataset(const std::filesystem::path& path, const body::BodyModelAsset* asset = nullptr);

}  // namespace fhmr::synth
