#pragma once

#include <vector>

#include "clim/image.hpp"
#include "clim/numerics.hpp"

namespace clim {

/// A realized crop rectangle on the source image plus the output side it was
/// rendered at. The same rectangle can be re-rendered at any resolution.
struct CropSpec {
  double sigma = 1.0;   // realized area fraction height*width / (H*W)
  double aspect = 1.0;  // realized width / height
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  int out_side = 0;

  bool operator==(const CropSpec&) const = default;
};

/// CutMix rectangle [x0, x1) x [y0, y1) on a side x side grid. Pixels inside
/// the box come from the positive; lambda_realized is the kept anchor fraction.
struct MixMask {
  int side = 0;
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  double lambda_realized = 1.0;

  int area() const { return (x1 - x0) * (y1 - y0); }
  bool contains(int y, int x) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const MixMask&) const = default;
};

enum class Mixing { cutmix, mixup, none };

struct AugConfig {
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_radius_min = 0.1;
  double blur_radius_max = 2.0;
  std::vector<int> resolutions = {32, 24};
  double alpha = 2.0;        // CutMix Beta(alpha, alpha)
  double mixup_alpha = 0.2;  // Mixup ablation Beta(alpha, alpha)

  void validate() const;
};

// -- geometry ---------------------------------------------------------------

/// Builds the crop for a requested area fraction and aspect ratio at a given
/// position. Throws ValidationError if the rectangle does not fit.
CropSpec make_crop(int src_height, int src_width, double sigma, double aspect, int top, int left, int out_side);

/// Full-image crop rendered at out_side.
CropSpec full_crop(int src_height, int src_width, int out_side);

/// Samples area fraction and log-uniform aspect; 10 proposals, then a
/// centered crop with the aspect clamped to the allowed range.
CropSpec sample_crop(Rng& rng, int src_height, int src_width, const AugConfig& cfg, int out_side);

/// Bilinear resampling of the crop rectangle to out_side x out_side with
/// half-pixel centre alignment; sample positions are clamped to the rectangle.
Image rerender(const Image& img, const CropSpec& spec, int out_side);

struct CropResult {
  Image image;
  CropSpec spec;
};
CropResult random_resized_crop(Rng& rng, const Image& img, const AugConfig& cfg, int out_side);

/// s = (1/sigma) * out_side / sqrt(H*W)
double scale_factor(const CropSpec& spec, int src_height, int src_width);

/// Bilinear resize of the whole image.
Image resize(const Image& img, int out_side);

// -- photometric ------------------------------------------------------------

Image flip_horizontal(const Image& img);
Image horizontal_flip(Rng& rng, const Image& img, double prob);

struct JitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};
JitterFactors sample_jitter(Rng& rng, const AugConfig& cfg);
/// Brightness, then contrast against the mean luma, then saturation against
/// per-pixel luma; clamped to [0,1] after each stage. Requires 3 channels.
Image apply_jitter(const Image& img, const JitterFactors& f);
Image color_jitter(Rng& rng, const Image& img, const AugConfig& cfg);

double luma(float r, float g, float b);
Image grayscale(const Image& img);
Image to_grayscale(Rng& rng, const Image& img, double prob);

/// Normalized 1-D Gaussian taps, half-width ceil(2*radius).
std::vector<double> gaussian_kernel(double radius);
/// Separable blur with edge-clamp padding.
Image blur(const Image& img, double radius);
Image gaussian_blur(Rng& rng, const Image& img, const AugConfig& cfg);

// -- mixing -----------------------------------------------------------------

/// Box of side round(side*sqrt(1-lam)) centred at (cx, cy), clipped to the grid.
MixMask cutmix_mask_at(int side, double lam, int cx, int cy);
MixMask cutmix_mask(Rng& rng, int side, double lam);
/// Maps a mask to another grid: nearest-area integer rectangle to the scaled box.
MixMask scale_mask(const MixMask& mask, int side);
Image cutmix_apply(const Image& anchor, const Image& positive, const MixMask& mask);
/// lam * anchor + (1 - lam) * positive
Image mixup_apply(const Image& anchor, const Image& positive, double lam);

// -- pipeline ---------------------------------------------------------------

/// Every random choice of the basic pipeline, fixed so the same view can be
/// rendered at several resolutions. Blur radius is in base-grid pixels.
struct AugmentPlan {
  CropSpec crop;
  bool flip = false;
  bool jitter = false;
  JitterFactors jitter_factors;
  bool gray = false;
  bool blur = false;
  double blur_radius = 0.0;
  int base_side = 0;
};

/// Draw order: crop, flip, jitter, grayscale, blur.
AugmentPlan sample_plan(Rng& rng, int src_height, int src_width, const AugConfig& cfg, int base_side);
Image render_plan(const Image& img, const AugmentPlan& plan, int side);

struct MixedView {
  Image image;
  int resolution = 0;
  MixMask mask;                  // empty when mixing is none or mixup
  double lambda_realized = 1.0;  // weight of the anchor term in the mixed loss
};

struct ViewSet {
  AugmentPlan plan;
  double lambda_raw = 1.0;
  std::vector<MixedView> views;  // one per cfg.resolutions entry, same order
};

/// Renders anchor and positive through one shared plan at every resolution
/// and mixes them. The CutMix box is drawn on the first resolution's grid and
/// mapped to the others.
ViewSet make_views(Rng& rng, const Image& anchor, const Image& positive, const AugConfig& cfg,
                   Mixing mixing = Mixing::cutmix);

}  // namespace clim
