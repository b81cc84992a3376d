#include "clim/augmentation.hpp"

#include <algorithm>
#include <cmath>

namespace clim {

void AugConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("augment.") + name + " must be in [0,1]");
  };
  prob(flip_prob, "flip_prob");
  prob(grayscale_prob, "grayscale_prob");
  prob(blur_prob, "blur_prob");
  if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ValidationError("augment.crop_scale must satisfy 0 < min <= max <= 1");
  }
  if (!(aspect_min > 0 && aspect_min <= aspect_max)) throw ValidationError("augment.aspect range must be ordered");
  if (!(blur_radius_min > 0 && blur_radius_min <= blur_radius_max)) {
    throw ValidationError("augment.blur_radius range must be ordered and positive");
  }
  if (brightness < 0 || contrast < 0 || saturation < 0) throw ValidationError("augment jitter strengths must be >= 0");
  if (resolutions.empty()) throw ValidationError("augment.resolutions must be non-empty");
  for (int r : resolutions)
    if (r <= 0) throw ValidationError("augment.resolutions entries must be positive");
  if (!(alpha > 0) || !(mixup_alpha > 0)) throw ValidationError("augment.alpha must be positive");
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

CropSpec make_crop(int src_height, int src_width, double sigma, double aspect, int top, int left, int out_side) {
  if (out_side <= 0) throw ValidationError("crop: out_side must be positive");
  if (!(sigma > 0 && sigma <= 1.0) || !(aspect > 0)) throw ValidationError("crop: sigma in (0,1] and aspect > 0");
  const double area = sigma * src_height * src_width;
  const int w = int(std::lround(std::sqrt(area * aspect)));
  const int h = int(std::lround(std::sqrt(area / aspect)));
  if (w <= 0 || h <= 0 || w > src_width || h > src_height || top < 0 || left < 0 || top + h > src_height ||
      left + w > src_width) {
    throw ValidationError("crop: rectangle does not fit in the source image");
  }
  CropSpec spec;
  spec.top = top;
  spec.left = left;
  spec.height = h;
  spec.width = w;
  spec.sigma = double(h) * w / (double(src_height) * src_width);
  spec.aspect = double(w) / h;
  spec.out_side = out_side;
  return spec;
}

CropSpec full_crop(int src_height, int src_width, int out_side) {
  if (out_side <= 0) throw ValidationError("crop: out_side must be positive");
  return CropSpec{1.0, double(src_width) / src_height, 0, 0, src_height, src_width, out_side};
}

CropSpec sample_crop(Rng& rng, int src_height, int src_width, const AugConfig& cfg, int out_side) {
  if (src_height <= 0 || src_width <= 0) throw ValidationError("crop: empty source image");
  const double total = double(src_height) * src_width;
  const double log_lo = std::log(cfg.aspect_min);
  const double log_hi = std::log(cfg.aspect_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = total * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int w = int(std::lround(std::sqrt(target * aspect)));
    const int h = int(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && w <= src_width && h <= src_height) {
      const int top = int(rng.uniform_int(0, src_height - h));
      const int left = int(rng.uniform_int(0, src_width - w));
      return CropSpec{double(h) * w / total, double(w) / h, top, left, h, w, out_side};
    }
  }
  // Fallback: largest centred crop with the aspect clamped into range.
  const double in_ratio = double(src_width) / src_height;
  int w = src_width;
  int h = src_height;
  if (in_ratio < cfg.aspect_min) {
    h = std::max(1, int(std::lround(w / cfg.aspect_min)));
  } else if (in_ratio > cfg.aspect_max) {
    w = std::max(1, int(std::lround(h * cfg.aspect_max)));
  }
  const int top = (src_height - h) / 2;
  const int left = (src_width - w) / 2;
  return CropSpec{double(h) * w / total, double(w) / h, top, left, h, w, out_side};
}

Image rerender(const Image& img, const CropSpec& spec, int out_side) {
  if (out_side <= 0) throw ValidationError("rerender: out_side must be positive");
  if (spec.height <= 0 || spec.width <= 0 || spec.top < 0 || spec.left < 0 ||
      spec.top + spec.height > img.height || spec.left + spec.width > img.width) {
    throw ValidationError("rerender: crop spec out of bounds");
  }
  Image out(out_side, out_side, img.channels);
  const double sy = double(spec.height) / out_side;
  const double sx = double(spec.width) / out_side;
  const int y_last = spec.top + spec.height - 1;
  const int x_last = spec.left + spec.width - 1;

  std::vector<int> x0s(out_side), x1s(out_side);
  std::vector<double> wxs(out_side);
  for (int j = 0; j < out_side; ++j) {
    const double fx = std::clamp(spec.left + (j + 0.5) * sx - 0.5, double(spec.left), double(x_last));
    x0s[j] = int(std::floor(fx));
    x1s[j] = std::min(x0s[j] + 1, x_last);
    wxs[j] = fx - x0s[j];
  }
  for (int i = 0; i < out_side; ++i) {
    const double fy = std::clamp(spec.top + (i + 0.5) * sy - 0.5, double(spec.top), double(y_last));
    const int y0 = int(std::floor(fy));
    const int y1 = std::min(y0 + 1, y_last);
    const double wy = fy - y0;
    for (int j = 0; j < out_side; ++j) {
      const int x0 = x0s[j];
      const int x1 = x1s[j];
      const double wx = wxs[j];
      for (int c = 0; c < img.channels; ++c) {
        const double top_row = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bottom_row = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(i, j, c) = float((1 - wy) * top_row + wy * bottom_row);
      }
    }
  }
  return out;
}

CropResult random_resized_crop(Rng& rng, const Image& img, const AugConfig& cfg, int out_side) {
  if (img.empty()) throw ValidationError("random_resized_crop: empty image");
  CropSpec spec = sample_crop(rng, img.height, img.width, cfg, out_side);
  return {rerender(img, spec, out_side), spec};
}

double scale_factor(const CropSpec& spec, int src_height, int src_width) {
  if (!(spec.sigma > 0)) throw ValidationError("scale_factor: sigma must be positive");
  return (1.0 / spec.sigma) * (double(spec.out_side) / std::sqrt(double(src_height) * src_width));
}

Image resize(const Image& img, int out_side) {
  if (img.height == out_side && img.width == out_side) return img;
  return rerender(img, full_crop(img.height, img.width, out_side), out_side);
}

// ---------------------------------------------------------------------------
// Photometric
// ---------------------------------------------------------------------------

Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

Image horizontal_flip(Rng& rng, const Image& img, double prob) {
  return rng.bernoulli(prob) ? flip_horizontal(img) : img;
}

namespace {
double jitter_factor(Rng& rng, double strength) {
  if (strength <= 0) return 1.0;
  return rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength);
}

void require_rgb(const Image& img, const char* op) {
  if (img.channels != 3) throw ValidationError(std::string(op) + ": requires a 3-channel image");
}
}  // namespace

JitterFactors sample_jitter(Rng& rng, const AugConfig& cfg) {
  JitterFactors f;
  f.brightness = jitter_factor(rng, cfg.brightness);
  f.contrast = jitter_factor(rng, cfg.contrast);
  f.saturation = jitter_factor(rng, cfg.saturation);
  return f;
}

double luma(float r, float g, float b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

Image apply_jitter(const Image& img, const JitterFactors& f) {
  require_rgb(img, "color_jitter");
  Image out = img;
  const Eigen::Index n = Eigen::Index(img.height) * img.width;
  auto clamp01 = [](double v) { return float(std::clamp(v, 0.0, 1.0)); };
  if (f.brightness != 1.0) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out.pixels(i) = clamp01(f.brightness * out.pixels(i));
  }
  if (f.contrast != 1.0) {
    double mean = 0;
    for (Eigen::Index p = 0; p < n; ++p) mean += luma(out.pixels(3 * p), out.pixels(3 * p + 1), out.pixels(3 * p + 2));
    mean /= double(n);
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      out.pixels(i) = clamp01(f.contrast * out.pixels(i) + (1.0 - f.contrast) * mean);
    }
  }
  if (f.saturation != 1.0) {
    for (Eigen::Index p = 0; p < n; ++p) {
      const double l = luma(out.pixels(3 * p), out.pixels(3 * p + 1), out.pixels(3 * p + 2));
      for (int c = 0; c < 3; ++c) {
        out.pixels(3 * p + c) = clamp01(f.saturation * out.pixels(3 * p + c) + (1.0 - f.saturation) * l);
      }
    }
  }
  return out;
}

Image color_jitter(Rng& rng, const Image& img, const AugConfig& cfg) {
  require_rgb(img, "color_jitter");
  return apply_jitter(img, sample_jitter(rng, cfg));
}

Image grayscale(const Image& img) {
  if (img.channels == 1) return img;
  require_rgb(img, "grayscale");
  Image out = img;
  const Eigen::Index n = Eigen::Index(img.height) * img.width;
  for (Eigen::Index p = 0; p < n; ++p) {
    const float r = img.pixels(3 * p), g = img.pixels(3 * p + 1), b = img.pixels(3 * p + 2);
    // Exact grays stay bit-identical.
    const float l = (r == g && g == b) ? r : float(std::clamp(luma(r, g, b), 0.0, 1.0));
    out.pixels(3 * p) = out.pixels(3 * p + 1) = out.pixels(3 * p + 2) = l;
  }
  return out;
}

Image to_grayscale(Rng& rng, const Image& img, double prob) {
  return rng.bernoulli(prob) ? grayscale(img) : img;
}

std::vector<double> gaussian_kernel(double radius) {
  if (!(radius > 0)) throw ValidationError("gaussian_kernel: radius must be positive");
  const int half = int(std::ceil(2.0 * radius));
  std::vector<double> k(std::size_t(2 * half + 1));
  double sum = 0;
  for (int i = -half; i <= half; ++i) {
    const double w = std::exp(-double(i) * i / (2.0 * radius * radius));
    k[std::size_t(i + half)] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

Image blur(const Image& img, double radius) {
  const std::vector<double> k = gaussian_kernel(radius);
  const int half = int(k.size() / 2);
  const int K = int(k.size());
  const int H = img.height, W = img.width, C = img.channels;
  // Clamped source offsets per output position and tap.
  std::vector<int> xo(std::size_t(W) * K), yo(std::size_t(H) * K);
  for (int x = 0; x < W; ++x)
    for (int t = 0; t < K; ++t) xo[std::size_t(x) * K + t] = std::clamp(x + t - half, 0, W - 1) * C;
  for (int y = 0; y < H; ++y)
    for (int t = 0; t < K; ++t) yo[std::size_t(y) * K + t] = std::clamp(y + t - half, 0, H - 1) * W * C;

  const std::size_t row = std::size_t(W) * C;
  std::vector<float> tmp(std::size_t(H) * row);
  const float* src = img.pixels.data();
  for (int y = 0; y < H; ++y) {
    const float* in = src + std::size_t(y) * row;
    float* o = tmp.data() + std::size_t(y) * row;
    for (int x = 0; x < W; ++x) {
      const int* off = &xo[std::size_t(x) * K];
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int t = 0; t < K; ++t) acc += k[std::size_t(t)] * in[off[t] + c];
        o[std::size_t(x) * C + c] = float(acc);
      }
    }
  }
  Image out(H, W, C);
  float* dst = out.pixels.data();
  std::vector<double> acc(row);
  for (int y = 0; y < H; ++y) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const int* off = &yo[std::size_t(y) * K];
    for (int t = 0; t < K; ++t) {
      const float* in = tmp.data() + off[t];
      const double w = k[std::size_t(t)];
      for (std::size_t i = 0; i < row; ++i) acc[i] += w * in[i];
    }
    float* o = dst + std::size_t(y) * row;
    for (std::size_t i = 0; i < row; ++i) o[i] = std::clamp(float(acc[i]), 0.0f, 1.0f);
  }
  return out;
}

Image gaussian_blur(Rng& rng, const Image& img, const AugConfig& cfg) {
  if (!rng.bernoulli(cfg.blur_prob)) return img;
  return blur(img, rng.uniform(cfg.blur_radius_min, cfg.blur_radius_max));
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

MixMask cutmix_mask_at(int side, double lam, int cx, int cy) {
  if (side <= 0) throw ValidationError("cutmix_mask: side must be positive");
  if (!(lam >= 0.0 && lam <= 1.0)) throw ValidationError("cutmix_mask: lam must be in [0,1]");
  const int cut = int(std::lround(side * std::sqrt(1.0 - lam)));
  MixMask m;
  m.side = side;
  m.x0 = std::clamp(cx - cut / 2, 0, side);
  m.y0 = std::clamp(cy - cut / 2, 0, side);
  m.x1 = std::clamp(cx - cut / 2 + cut, 0, side);
  m.y1 = std::clamp(cy - cut / 2 + cut, 0, side);
  if (m.area() == 0) m.x0 = m.x1 = m.y0 = m.y1 = 0;
  m.lambda_realized = 1.0 - double(m.area()) / (double(side) * side);
  return m;
}

MixMask cutmix_mask(Rng& rng, int side, double lam) {
  if (side <= 0) throw ValidationError("cutmix_mask: side must be positive");
  const int cx = int(rng.uniform_int(0, side - 1));
  const int cy = int(rng.uniform_int(0, side - 1));
  return cutmix_mask_at(side, lam, cx, cy);
}

MixMask scale_mask(const MixMask& mask, int side) {
  if (side <= 0) throw ValidationError("scale_mask: side must be positive");
  if (side == mask.side) return mask;
  MixMask out;
  out.side = side;
  if (mask.area() == 0) {
    out.lambda_realized = 1.0;
    return out;
  }
  const double scale = double(side) / mask.side;
  const double target = double(mask.area()) / (double(mask.side) * mask.side);
  const double w_real = (mask.x1 - mask.x0) * scale;
  const double h_real = (mask.y1 - mask.y0) * scale;
  int best_w = 0, best_h = 0;
  double best_err = 2.0;
  for (int w : {int(std::floor(w_real)), int(std::ceil(w_real))}) {
    for (int h : {int(std::floor(h_real)), int(std::ceil(h_real))}) {
      if (w < 0 || h < 0 || w > side || h > side) continue;
      const double err = std::abs(double(w) * h / (double(side) * side) - target);
      if (err < best_err) {
        best_err = err;
        best_w = w;
        best_h = h;
      }
    }
  }
  out.x0 = std::clamp(int(std::lround(mask.x0 * scale)), 0, side - best_w);
  out.y0 = std::clamp(int(std::lround(mask.y0 * scale)), 0, side - best_h);
  out.x1 = out.x0 + best_w;
  out.y1 = out.y0 + best_h;
  if (out.area() == 0) out.x0 = out.x1 = out.y0 = out.y1 = 0;
  out.lambda_realized = 1.0 - double(out.area()) / (double(side) * side);
  return out;
}

Image cutmix_apply(const Image& anchor, const Image& positive, const MixMask& mask) {
  if (!anchor.same_shape(positive)) throw ValidationError("cutmix_apply: shape mismatch");
  if (mask.area() > 0 && (mask.x1 > anchor.width || mask.y1 > anchor.height)) {
    throw ValidationError("cutmix_apply: mask exceeds image bounds");
  }
  Image out = anchor;
  for (int y = mask.y0; y < mask.y1; ++y)
    for (int x = mask.x0; x < mask.x1; ++x)
      for (int c = 0; c < anchor.channels; ++c) out.at(y, x, c) = positive.at(y, x, c);
  return out;
}

Image mixup_apply(const Image& anchor, const Image& positive, double lam) {
  if (!anchor.same_shape(positive)) throw ValidationError("mixup_apply: shape mismatch");
  if (!(lam >= 0.0 && lam <= 1.0)) throw ValidationError("mixup_apply: lam must be in [0,1]");
  Image out = anchor;
  out.pixels = (lam * anchor.pixels.cast<double>() + (1.0 - lam) * positive.pixels.cast<double>())
                   .cwiseMax(0.0)
                   .cwiseMin(1.0)
                   .cast<float>();
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

AugmentPlan sample_plan(Rng& rng, int src_height, int src_width, const AugConfig& cfg, int base_side) {
  AugmentPlan plan;
  plan.base_side = base_side;
  plan.crop = sample_crop(rng, src_height, src_width, cfg, base_side);
  plan.flip = rng.bernoulli(cfg.flip_prob);
  plan.jitter = true;
  plan.jitter_factors = sample_jitter(rng, cfg);
  plan.gray = rng.bernoulli(cfg.grayscale_prob);
  plan.blur = rng.bernoulli(cfg.blur_prob);
  if (plan.blur) plan.blur_radius = rng.uniform(cfg.blur_radius_min, cfg.blur_radius_max);
  return plan;
}

Image render_plan(const Image& img, const AugmentPlan& plan, int side) {
  Image out = rerender(img, plan.crop, side);
  if (plan.flip) out = flip_horizontal(out);
  if (out.channels == 3) {
    if (plan.jitter) out = apply_jitter(out, plan.jitter_factors);
    if (plan.gray) out = grayscale(out);
  }
  if (plan.blur && plan.blur_radius > 0) {
    const int base = plan.base_side > 0 ? plan.base_side : side;
    out = blur(out, plan.blur_radius * double(side) / base);
  }
  return out;
}

ViewSet make_views(Rng& rng, const Image& anchor, const Image& positive, const AugConfig& cfg, Mixing mixing) {
  cfg.validate();
  if (anchor.empty()) throw ValidationError("make_views: empty anchor");
  if (!anchor.same_shape(positive)) throw ValidationError("make_views: anchor and positive differ in shape");
  const int base = cfg.resolutions.front();
  ViewSet set;
  set.plan = sample_plan(rng, anchor.height, anchor.width, cfg, base);

  MixMask base_mask;
  base_mask.side = base;
  switch (mixing) {
    case Mixing::cutmix:
      set.lambda_raw = sample_beta(rng, BetaParams{cfg.alpha});
      base_mask = cutmix_mask(rng, base, set.lambda_raw);
      break;
    case Mixing::mixup:
      set.lambda_raw = sample_beta(rng, BetaParams{cfg.mixup_alpha});
      break;
    case Mixing::none:
      set.lambda_raw = 1.0;
      break;
  }

  set.views.reserve(cfg.resolutions.size());
  for (int r : cfg.resolutions) {
    MixedView v;
    v.resolution = r;
    Image a = render_plan(anchor, set.plan, r);
    if (mixing == Mixing::cutmix) {
      v.mask = scale_mask(base_mask, r);
      v.lambda_realized = v.mask.lambda_realized;
      v.image = cutmix_apply(a, render_plan(positive, set.plan, r), v.mask);
    } else if (mixing == Mixing::mixup) {
      v.mask.side = r;
      v.lambda_realized = set.lambda_raw;
      v.image = mixup_apply(a, render_plan(positive, set.plan, r), set.lambda_raw);
    } else {
      v.mask.side = r;
      v.lambda_realized = 1.0;
      v.image = std::move(a);
    }
    set.views.push_back(std::move(v));
  }
  return set;
}

}  // namespace clim
