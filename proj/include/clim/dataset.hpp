#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "clim/image.hpp"

namespace clim {

/// Collection of equally shaped images. Labels are carried for evaluation
/// only; nothing on the pretraining path reads them.
struct Dataset {
  std::vector<Image> images;
  std::optional<std::vector<int>> labels;
  std::optional<int> class_count;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  bool has_labels() const { return labels.has_value(); }
  int height() const { return empty() ? 0 : images.front().height; }
  int width() const { return empty() ? 0 : images.front().width; }
  int channels() const { return empty() ? 0 : images.front().channels; }

  /// Throws ValidationError when shapes, pixel ranges or labels are inconsistent.
  void validate() const;

  bool operator==(const Dataset& o) const { return images == o.images && labels == o.labels; }
};

struct SyntheticSpec {
  int class_count = 10;
  int per_class = 200;
  int latent_dim = 8;
  int image_side = 16;
  int channels = 3;
  double blob_stddev = 0.8;
  std::uint64_t seed = 1;
};

/// Gaussian blobs in a latent space rendered through one fixed, seeded,
/// spatially smooth linear map followed by a sigmoid. Class-major order.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Latent class means used by generate_synthetic (class_count x latent_dim).
Eigen::MatrixXd synthetic_class_means(const SyntheticSpec& spec);

void save_tensor_file(const Dataset& ds, const std::filesystem::path& path);
Dataset load_tensor_file(const std::filesystem::path& path);

/// Reads every *.ppm (binary P6) in lexicographic order; optional labels.txt
/// sidecar with "filename<TAB>class" lines.
Dataset load_ppm_dir(const std::filesystem::path& dir);

/// Writes an image as P6 with maxval 255. Single-channel images are replicated.
void save_ppm(const Image& img, const std::filesystem::path& path);
Image load_ppm(const std::filesystem::path& path);

}  // namespace clim
