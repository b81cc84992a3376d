#include "clim/encoder.hpp"

#include <cmath>

#include "clim/augmentation.hpp"
#include "clim/error.hpp"

namespace clim {

void EncoderDims::validate() const {
  if (input_side <= 0 || (channels != 1 && channels != 3)) {
    throw ValidationError("encoder: input_side must be positive and channels 1 or 3");
  }
  if (hidden <= 0 || feat <= 0 || mlp_hidden <= 0 || embed <= 0) {
    throw ValidationError("encoder: layer sizes must be positive");
  }
  if (stem == StemKind::conv && conv_channels <= 0) throw ValidationError("encoder: conv_channels must be positive");
}

namespace {

std::size_t first_dense(const EncoderDims& d) { return d.stem == StemKind::mlp ? 0 : 2; }

template <typename Scalar>
void check_finite_embedding(const Vec<Scalar>& norms) {
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!std::isfinite(double(norms(i)))) throw NumericError("encoder: non-finite embedding");
    if (!(norms(i) > 0)) throw NumericError("encoder: degenerate embedding (zero norm before normalization)");
  }
}

// Channel-major (C x H*W) -> (C*9 x H*W), zero padding, row = c*9 + ky*3 + kx.
template <typename Scalar>
Mat<Scalar> im2col(const Mat<Scalar>& a, int h, int w) {
  const Eigen::Index c = a.rows();
  Mat<Scalar> cols = Mat<Scalar>::Zero(c * 9, Eigen::Index(h) * w);
  for (Eigen::Index ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = ch * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kx - 1;
            if (sx < 0 || sx >= w) continue;
            cols(row, Eigen::Index(y) * w + x) = a(ch, Eigen::Index(sy) * w + sx);
          }
        }
      }
  return cols;
}

template <typename Scalar>
Mat<Scalar> col2im(const Mat<Scalar>& cols, Eigen::Index c, int h, int w) {
  Mat<Scalar> a = Mat<Scalar>::Zero(c, Eigen::Index(h) * w);
  for (Eigen::Index ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = ch * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kx - 1;
            if (sx < 0 || sx >= w) continue;
            a(ch, Eigen::Index(sy) * w + sx) += cols(row, Eigen::Index(y) * w + x);
          }
        }
      }
  return a;
}

template <typename Scalar>
Mat<Scalar> channel_major(const Image& img) {
  Mat<Scalar> a(img.channels, Eigen::Index(img.height) * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        a(c, Eigen::Index(y) * img.width + x) = Scalar(img.at(y, x, c)) - Scalar(0.5);
  return a;
}

template <typename Scalar>
Mat<Scalar> relu(const Mat<Scalar>& m) {
  return m.cwiseMax(Scalar(0));
}

template <typename Scalar>
Mat<Scalar> relu_mask(const Mat<Scalar>& grad, const Mat<Scalar>& pre) {
  return (pre.array() > Scalar(0)).select(grad, Scalar(0));
}

// Dense stack input: flattened pixels (MLP) or pooled conv features.
template <typename Scalar>
Mat<Scalar> stem_forward(const EncoderParams<Scalar>& p, std::span<const Image> batch, Activations<Scalar>& acts) {
  const EncoderDims& d = p.dims;
  const Eigen::Index b = Eigen::Index(batch.size());
  if (d.stem == StemKind::mlp) {
    Mat<Scalar> x(d.input_dim(), b);
    for (Eigen::Index i = 0; i < b; ++i) x.col(i) = image_to_input<Scalar>(batch[std::size_t(i)], d);
    return x;
  }
  Mat<Scalar> pooled(d.hidden, b);
  acts.conv.resize(std::size_t(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    const Image& img = batch[std::size_t(i)];
    if (img.channels != d.channels) throw ValidationError("encoder: image channel count mismatch");
    auto& cache = acts.conv[std::size_t(i)];
    cache.height = img.height;
    cache.width = img.width;
    cache.cols1 = im2col<Scalar>(channel_major<Scalar>(img), img.height, img.width);
    cache.pre1 = (p.weights[0] * cache.cols1).colwise() + p.biases[0];
    cache.cols2 = im2col<Scalar>(relu<Scalar>(cache.pre1), img.height, img.width);
    cache.pre2 = (p.weights[1] * cache.cols2).colwise() + p.biases[1];
    pooled.col(i) = relu<Scalar>(cache.pre2).rowwise().mean();
  }
  return pooled;
}

template <typename Scalar>
ForwardResult<Scalar> dense_forward(const EncoderParams<Scalar>& p, Activations<Scalar> acts, bool stop_at_trunk) {
  const std::size_t first = first_dense(p.dims);
  const std::size_t last = stop_at_trunk ? p.trunk_layer() : p.layer_count() - 1;
  const Mat<Scalar>* x = &acts.input;
  acts.pre.clear();
  acts.post.clear();
  acts.pre.reserve(last - first + 1);
  acts.post.reserve(last - first + 1);
  for (std::size_t l = first; l <= last; ++l) {
    acts.pre.push_back((p.weights[l] * *x).colwise() + p.biases[l]);
    const bool linear_out = !stop_at_trunk && l == p.layer_count() - 1;
    acts.post.push_back(linear_out ? acts.pre.back() : relu<Scalar>(acts.pre.back()));
    x = &acts.post.back();
  }
  ForwardResult<Scalar> out;
  if (!stop_at_trunk) {
    acts.norms = x->colwise().norm().transpose();
    check_finite_embedding(acts.norms);
    acts.embeddings = *x * acts.norms.cwiseInverse().asDiagonal();
    out.embeddings = acts.embeddings;
  }
  out.acts = std::move(acts);
  return out;
}

template <typename Scalar>
void check_params(const EncoderParams<Scalar>& p) {
  const std::size_t expected = p.dims.stem == StemKind::mlp ? 4 : 5;
  if (p.weights.size() != expected || p.biases.size() != expected) {
    throw ValidationError("encoder: parameter layout does not match stem kind");
  }
}

template <typename Scalar>
ParamGrads<Scalar> backward_impl(const EncoderParams<Scalar>& p, const Activations<Scalar>& acts,
                                 const Mat<Scalar>& grad_embeddings, const Mat<Scalar>& grad_features) {
  check_params(p);
  if (acts.params_version != p.version) {
    throw NumericError("encoder backward: stale activation cache (parameters changed since forward)");
  }
  const std::size_t first = first_dense(p.dims);
  const std::size_t trunk = p.trunk_layer();
  const bool has_head = acts.pre.size() == p.layer_count() - first;
  const Eigen::Index b = acts.batch;
  if (grad_embeddings.size() > 0) {
    if (!has_head) throw NumericError("encoder backward: cache has no head activations");
    if (grad_embeddings.rows() != p.dims.embed || grad_embeddings.cols() != b) {
      throw ValidationError("encoder backward: embedding gradient shape mismatch");
    }
  }
  if (grad_features.size() > 0 && (grad_features.rows() != p.dims.feat || grad_features.cols() != b)) {
    throw ValidationError("encoder backward: feature gradient shape mismatch");
  }

  ParamGrads<Scalar> g = zeros_like(p);
  std::size_t top = has_head && grad_embeddings.size() > 0 ? p.layer_count() - 1 : trunk;
  Mat<Scalar> dpost;
  if (top == p.layer_count() - 1) {
    // d(z/|z|)/dz applied to the upstream gradient, column by column.
    const Mat<Scalar>& y = acts.embeddings;
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> proj = (y.array() * grad_embeddings.array()).colwise().sum();
    dpost = (grad_embeddings - y * proj.asDiagonal()) * acts.norms.cwiseInverse().asDiagonal();
  } else {
    dpost = Mat<Scalar>::Zero(p.dims.feat, b);
  }

  for (std::size_t l = top + 1; l-- > first;) {
    const std::size_t d = l - first;
    if (l == trunk && grad_features.size() > 0) dpost += grad_features;
    const Mat<Scalar> dpre = (l == p.layer_count() - 1) ? dpost : relu_mask<Scalar>(dpost, acts.pre[d]);
    const Mat<Scalar>& in = d == 0 ? acts.input : acts.post[d - 1];
    g.weights[l].noalias() = dpre * in.transpose();
    g.biases[l] = dpre.rowwise().sum();
    if (l > first || p.dims.stem == StemKind::conv) dpost = p.weights[l].transpose() * dpre;
  }

  if (p.dims.stem == StemKind::conv) {
    for (Eigen::Index i = 0; i < b; ++i) {
      const auto& cache = acts.conv[std::size_t(i)];
      const Eigen::Index hw = Eigen::Index(cache.height) * cache.width;
      const Mat<Scalar> da2 = (dpost.col(i) / Scalar(hw)).replicate(1, hw);
      const Mat<Scalar> dz2 = relu_mask<Scalar>(da2, cache.pre2);
      g.weights[1].noalias() += dz2 * cache.cols2.transpose();
      g.biases[1] += dz2.rowwise().sum();
      const Mat<Scalar> dcols2 = p.weights[1].transpose() * dz2;
      const Mat<Scalar> da1 = col2im<Scalar>(dcols2, p.dims.conv_channels, cache.height, cache.width);
      const Mat<Scalar> dz1 = relu_mask<Scalar>(da1, cache.pre1);
      g.weights[0].noalias() += dz1 * cache.cols1.transpose();
      g.biases[0] += dz1.rowwise().sum();
    }
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
std::size_t EncoderParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += std::size_t(w.size());
  for (const auto& b : biases) n += std::size_t(b.size());
  return n;
}

template <typename Scalar>
std::vector<std::string> EncoderParams<Scalar>::layer_names() const {
  if (dims.stem == StemKind::mlp) return {"stem", "trunk", "head_hidden", "head_out"};
  return {"conv1", "conv2", "trunk", "head_hidden", "head_out"};
}

template <typename Scalar>
bool EncoderParams<Scalar>::same_shape(const EncoderParams& o) const {
  if (!(dims == o.dims) || weights.size() != o.weights.size() || biases.size() != o.biases.size()) return false;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].rows() != o.weights[i].rows() || weights[i].cols() != o.weights[i].cols()) return false;
    if (biases[i].size() != o.biases[i].size()) return false;
  }
  return true;
}

template <typename Scalar>
bool EncoderParams<Scalar>::all_finite() const {
  for (const auto& w : weights)
    if (!w.allFinite()) return false;
  for (const auto& b : biases)
    if (!b.allFinite()) return false;
  return true;
}

template <typename Scalar>
EncoderParams<Scalar> init_params(Rng& rng, const EncoderDims& dims) {
  dims.validate();
  EncoderParams<Scalar> p;
  p.dims = dims;
  std::vector<std::pair<int, int>> shapes;  // (out, in)
  if (dims.stem == StemKind::mlp) {
    shapes.push_back({dims.hidden, dims.input_dim()});
  } else {
    shapes.push_back({dims.conv_channels, dims.channels * 9});
    shapes.push_back({dims.hidden, dims.conv_channels * 9});
  }
  shapes.push_back({dims.feat, dims.hidden});
  shapes.push_back({dims.mlp_hidden, dims.feat});
  shapes.push_back({dims.embed, dims.mlp_hidden});
  for (auto [out, in] : shapes) {
    const double bound = std::sqrt(6.0 / in);
    Mat<Scalar> w(out, in);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = Scalar(rng.uniform(-bound, bound));
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vec<Scalar>::Zero(out));
  }
  return p;
}

template <typename Scalar>
EncoderParams<Scalar> zeros_like(const EncoderParams<Scalar>& p) {
  EncoderParams<Scalar> z;
  z.dims = p.dims;
  for (const auto& w : p.weights) z.weights.push_back(Mat<Scalar>::Zero(w.rows(), w.cols()));
  for (const auto& b : p.biases) z.biases.push_back(Vec<Scalar>::Zero(b.size()));
  return z;
}

template <typename Scalar>
Mat<Scalar> image_to_input(const Image& img, const EncoderDims& dims) {
  if (img.channels != dims.channels) throw ValidationError("encoder: image channel count mismatch");
  const Image sized = (img.height == dims.input_side && img.width == dims.input_side) ? img : resize(img, dims.input_side);
  return (sized.pixels.cast<Scalar>() - Scalar(0.5)).matrix();
}

template <typename Scalar>
ForwardResult<Scalar> forward(const EncoderParams<Scalar>& params, std::span<const Image> batch) {
  check_params(params);
  Activations<Scalar> acts;
  acts.params_version = params.version;
  acts.batch = Eigen::Index(batch.size());
  acts.input = stem_forward(params, batch, acts);
  return dense_forward(params, std::move(acts), false);
}

template <typename Scalar>
ForwardResult<Scalar> forward_inputs(const EncoderParams<Scalar>& params, const Mat<Scalar>& inputs) {
  check_params(params);
  if (params.dims.stem != StemKind::mlp) throw ValidationError("forward_inputs: only valid for the MLP stem");
  if (inputs.rows() != params.dims.input_dim()) throw ValidationError("forward_inputs: input dimension mismatch");
  Activations<Scalar> acts;
  acts.params_version = params.version;
  acts.batch = inputs.cols();
  acts.input = inputs;
  return dense_forward(params, std::move(acts), false);
}

template <typename Scalar>
ForwardResult<Scalar> forward_trunk(const EncoderParams<Scalar>& params, std::span<const Image> batch) {
  check_params(params);
  Activations<Scalar> acts;
  acts.params_version = params.version;
  acts.batch = Eigen::Index(batch.size());
  acts.input = stem_forward(params, batch, acts);
  return dense_forward(params, std::move(acts), true);
}

template <typename Scalar>
Mat<Scalar> forward_features(const EncoderParams<Scalar>& params, std::span<const Image> batch) {
  auto r = forward_trunk(params, batch);
  return std::move(r.acts.post.back());
}

template <typename Scalar>
ParamGrads<Scalar> backward(const EncoderParams<Scalar>& params, const Activations<Scalar>& acts,
                            const Mat<Scalar>& grad_embeddings, const Mat<Scalar>& grad_features) {
  return backward_impl(params, acts, grad_embeddings, grad_features);
}

template <typename Scalar>
ParamGrads<Scalar> backward_features(const EncoderParams<Scalar>& params, const Activations<Scalar>& acts,
                                     const Mat<Scalar>& grad_features) {
  return backward_impl(params, acts, Mat<Scalar>(), grad_features);
}

template <typename Scalar>
KeyEncoder<Scalar> make_key_encoder(const EncoderParams<Scalar>& query, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("key encoder: momentum must be in [0,1)");
  return KeyEncoder<Scalar>{query, momentum};
}

template <typename Scalar>
void momentum_update(KeyEncoder<Scalar>& key, const EncoderParams<Scalar>& query) {
  if (!key.params.same_shape(query)) throw ValidationError("momentum_update: shape mismatch");
  const Scalar m = Scalar(key.momentum);
  const Scalar q = Scalar(1) - m;
  for (std::size_t i = 0; i < query.weights.size(); ++i) {
    key.params.weights[i] = m * key.params.weights[i] + q * query.weights[i];
    key.params.biases[i] = m * key.params.biases[i] + q * query.biases[i];
  }
  ++key.params.version;
}

template <typename Scalar>
void accumulate(ParamGrads<Scalar>& acc, const ParamGrads<Scalar>& g, Scalar scale) {
  if (acc.weights.size() != g.weights.size()) throw ValidationError("accumulate: layout mismatch");
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    acc.weights[i] += scale * g.weights[i];
    acc.biases[i] += scale * g.biases[i];
  }
}

template <typename Scalar>
Scalar squared_norm(const EncoderParams<Scalar>& p) {
  Scalar s = 0;
  for (const auto& w : p.weights) s += w.squaredNorm();
  for (const auto& b : p.biases) s += b.squaredNorm();
  return s;
}

#define CLIM_INSTANTIATE_ENCODER(S)                                                                              \
  template struct EncoderParams<S>;                                                                              \
  template EncoderParams<S> init_params<S>(Rng&, const EncoderDims&);                                            \
  template EncoderParams<S> zeros_like<S>(const EncoderParams<S>&);                                              \
  template Mat<S> image_to_input<S>(const Image&, const EncoderDims&);                                           \
  template ForwardResult<S> forward<S>(const EncoderParams<S>&, std::span<const Image>);                         \
  template ForwardResult<S> forward_inputs<S>(const EncoderParams<S>&, const Mat<S>&);                           \
  template ForwardResult<S> forward_trunk<S>(const EncoderParams<S>&, std::span<const Image>);                   \
  template Mat<S> forward_features<S>(const EncoderParams<S>&, std::span<const Image>);                          \
  template ParamGrads<S> backward<S>(const EncoderParams<S>&, const Activations<S>&, const Mat<S>&, const Mat<S>&); \
  template ParamGrads<S> backward_features<S>(const EncoderParams<S>&, const Activations<S>&, const Mat<S>&);    \
  template KeyEncoder<S> make_key_encoder<S>(const EncoderParams<S>&, double);                                   \
  template void momentum_update<S>(KeyEncoder<S>&, const EncoderParams<S>&);                                     \
  template void accumulate<S>(ParamGrads<S>&, const ParamGrads<S>&, S);                                          \
  template S squared_norm<S>(const EncoderParams<S>&);

CLIM_INSTANTIATE_ENCODER(float)
CLIM_INSTANTIATE_ENCODER(double)

#undef CLIM_INSTANTIATE_ENCODER

}  // namespace clim
