#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clim/image.hpp"
#include "clim/numerics.hpp"

namespace clim {

enum class StemKind { mlp, conv };

/// Layer sizes. The MLP stem reads flattened pixels at input_side; the conv
/// stem runs two 3x3 same-padded convolutions and global average pooling, so
/// it accepts any resolution.
struct EncoderDims {
  StemKind stem = StemKind::mlp;
  int input_side = 16;
  int channels = 3;
  int conv_channels = 16;
  int hidden = 256;
  int feat = 128;
  int mlp_hidden = 128;
  int embed = 32;

  int input_dim() const { return input_side * input_side * channels; }
  void validate() const;
  bool operator==(const EncoderDims&) const = default;
};

/// Weights are stored out x in. Layer order:
///   mlp  stem:  stem, trunk, head_hidden, head_out
///   conv stem:  conv1, conv2, trunk, head_hidden, head_out
/// Trunk output (post-ReLU) is the representation used by evaluation; the two
/// head layers form the projection MLP whose output is L2-normalized.
template <typename Scalar>
struct EncoderParams {
  EncoderDims dims;
  std::vector<Mat<Scalar>> weights;
  std::vector<Vec<Scalar>> biases;
  /// Bumped by every in-library mutation; activations remember it.
  std::uint64_t version = 0;

  std::size_t layer_count() const { return weights.size(); }
  std::size_t trunk_layer() const { return dims.stem == StemKind::mlp ? 1 : 2; }
  std::size_t parameter_count() const;
  std::vector<std::string> layer_names() const;
  bool same_shape(const EncoderParams& o) const;
  bool all_finite() const;
};

using ParamsD = EncoderParams<double>;
using ParamsF = EncoderParams<float>;

/// Gradients share the parameter layout.
template <typename Scalar>
using ParamGrads = EncoderParams<Scalar>;

template <typename Scalar>
EncoderParams<Scalar> init_params(Rng& rng, const EncoderDims& dims);

template <typename Scalar>
EncoderParams<Scalar> zeros_like(const EncoderParams<Scalar>& p);

template <typename To, typename From>
EncoderParams<To> cast_params(const EncoderParams<From>& p) {
  EncoderParams<To> out;
  out.dims = p.dims;
  out.version = p.version;
  for (const auto& w : p.weights) out.weights.push_back(w.template cast<To>());
  for (const auto& b : p.biases) out.biases.push_back(b.template cast<To>());
  return out;
}

/// Calls f(name, block) for every weight matrix then every bias vector.
template <typename P, typename F>
void visit_blocks(P& params, F&& f) {
  const auto names = params.layer_names();
  for (std::size_t i = 0; i < params.weights.size(); ++i) f(names[i] + ".weight", params.weights[i]);
  for (std::size_t i = 0; i < params.biases.size(); ++i) f(names[i] + ".bias", params.biases[i]);
}

/// Flattens an image to the encoder input column: bilinear resize to
/// input_side (MLP stem only) and centering by subtracting 0.5.
template <typename Scalar>
Mat<Scalar> image_to_input(const Image& img, const EncoderDims& dims);

/// Cached intermediate values of one batched forward pass.
template <typename Scalar>
struct Activations {
  std::uint64_t params_version = 0;
  Eigen::Index batch = 0;
  // MLP stem: inputs (in x B). Conv stem: per-image im2col buffers.
  Mat<Scalar> input;
  struct ConvCache {
    int height = 0, width = 0;
    Mat<Scalar> cols1, pre1, cols2, pre2;
  };
  std::vector<ConvCache> conv;
  /// pre[l], post[l] for the dense layers in order (post = ReLU(pre) except
  /// for the last dense layer, where post = pre).
  std::vector<Mat<Scalar>> pre;
  std::vector<Mat<Scalar>> post;
  Vec<Scalar> norms;  // per column, of the final pre-normalization output
  Mat<Scalar> embeddings;
};

template <typename Scalar>
struct ForwardResult {
  Mat<Scalar> embeddings;  // embed x B, unit columns
  Activations<Scalar> acts;
};

/// Throws NumericError("degenerate embedding") when an output has zero norm.
template <typename Scalar>
ForwardResult<Scalar> forward(const EncoderParams<Scalar>& params, std::span<const Image> batch);

/// MLP stem only: forward from an already-flattened input matrix (in x B).
template <typename Scalar>
ForwardResult<Scalar> forward_inputs(const EncoderParams<Scalar>& params, const Mat<Scalar>& inputs);

/// Trunk features (feat x B); the projection head is not evaluated.
template <typename Scalar>
Mat<Scalar> forward_features(const EncoderParams<Scalar>& params, std::span<const Image> batch);

/// Exact gradients for upstream gradients w.r.t. the normalized embeddings
/// and, optionally, w.r.t. the trunk features. Either may be empty (size 0).
template <typename Scalar>
ParamGrads<Scalar> backward(const EncoderParams<Scalar>& params, const Activations<Scalar>& acts,
                            const Mat<Scalar>& grad_embeddings, const Mat<Scalar>& grad_features = Mat<Scalar>());

/// Same as backward but stops at the trunk (head layers receive zero grads).
template <typename Scalar>
ParamGrads<Scalar> backward_features(const EncoderParams<Scalar>& params, const Activations<Scalar>& acts,
                                     const Mat<Scalar>& grad_features);

/// Trunk-only forward with a cache, for fine-tuning.
template <typename Scalar>
ForwardResult<Scalar> forward_trunk(const EncoderParams<Scalar>& params, std::span<const Image> batch);

template <typename Scalar>
struct KeyEncoder {
  EncoderParams<Scalar> params;
  double momentum = 0.999;
};

template <typename Scalar>
KeyEncoder<Scalar> make_key_encoder(const EncoderParams<Scalar>& query, double momentum);

/// theta_k <- m * theta_k + (1 - m) * theta_q
template <typename Scalar>
void momentum_update(KeyEncoder<Scalar>& key, const EncoderParams<Scalar>& query);

/// acc += scale * g, blockwise. Shapes must match.
template <typename Scalar>
void accumulate(ParamGrads<Scalar>& acc, const ParamGrads<Scalar>& g, Scalar scale = Scalar(1));

template <typename Scalar>
Scalar squared_norm(const EncoderParams<Scalar>& p);

}  // namespace clim
