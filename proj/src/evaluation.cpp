#include "clim/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "clim/augmentation.hpp"
#include "clim/error.hpp"

namespace clim {

void ProbeConfig::validate() const {
  if (epochs < 0) throw ValidationError("eval.epochs must be >= 0");
  if (!(lr > 0)) throw ValidationError("eval.lr must be > 0");
  if (!(lr_backbone > 0)) throw ValidationError("eval.lr_backbone must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ValidationError("eval.momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ValidationError("eval.weight_decay must be >= 0");
  if (batch_size < 1) throw ValidationError("eval.batch_size must be >= 1");
  if (!(label_fraction > 0 && label_fraction <= 1)) throw ValidationError("eval.label_fraction must be in (0, 1]");
  if (!(test_fraction > 0 && test_fraction < 1)) throw ValidationError("eval.test_fraction must be in (0, 1)");
  if (view_side < 1) throw ValidationError("eval.view_side must be >= 1");
}

namespace {

void shuffle(Rng& rng, std::vector<int>& v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
  }
}

std::vector<std::vector<int>> by_class(const std::vector<int>& indices, const std::vector<int>& labels,
                                       int class_count) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(class_count));
  for (int i : indices) {
    const int c = labels[std::size_t(i)];
    if (c < 0 || c >= class_count) throw ValidationError("label " + std::to_string(c) + " out of range");
    out[std::size_t(c)].push_back(i);
  }
  return out;
}

void require_labels(const Dataset& ds) {
  if (!ds.has_labels() || !ds.class_count) throw ValidationError("evaluation needs a labeled dataset");
}

std::vector<int> gather(const std::vector<int>& labels, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(labels[std::size_t(i)]);
  return out;
}

std::vector<Image> render(const Dataset& ds, const std::vector<int>& indices, std::size_t start, std::size_t end,
                          int side) {
  std::vector<Image> views;
  views.reserve(end - start);
  for (std::size_t j = start; j < end; ++j) {
    const Image& img = ds.images[std::size_t(indices[j])];
    views.push_back(rerender(img, full_crop(img.height, img.width, side), side));
  }
  return views;
}

template <typename F>
MatrixXd chunked(const Dataset& ds, const std::vector<int>& indices, int side, Eigen::Index rows, F&& f) {
  constexpr std::size_t kChunk = 256;
  MatrixXd out(rows, Eigen::Index(indices.size()));
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const std::size_t end = std::min(indices.size(), start + kChunk);
    const auto views = render(ds, indices, start, end, side);
    out.middleCols(Eigen::Index(start), Eigen::Index(end - start)) = f(views);
  }
  return out;
}

MatrixXd normalized_columns(const MatrixXd& m) {
  MatrixXd out = m;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double n = out.col(j).norm();
    if (n > 0) out.col(j) /= n;
  }
  return out;
}

int argmax_lowest(const VectorXd& v) {
  int best = 0;
  for (int c = 1; c < int(v.size()); ++c)
    if (v(c) > v(best)) best = c;
  return best;
}

// Tie-inclusive vote over one row of similarities; `skip` is excluded.
int knn_vote(const Eigen::Ref<const VectorXd>& sims, const std::vector<int>& labels, int class_count, int k,
             Eigen::Index skip) {
  std::vector<double> vals;
  vals.reserve(std::size_t(sims.size()));
  for (Eigen::Index j = 0; j < sims.size(); ++j)
    if (j != skip) vals.push_back(sims(j));
  if (vals.empty()) return 0;
  const std::size_t kk = std::min(vals.size(), std::size_t(k));
  std::nth_element(vals.begin(), vals.begin() + std::ptrdiff_t(kk - 1), vals.end(), std::greater<>());
  const double kth = vals[kk - 1];
  VectorXd votes = VectorXd::Zero(class_count);
  for (Eigen::Index j = 0; j < sims.size(); ++j) {
    if (j != skip && sims(j) >= kth) votes(labels[std::size_t(j)]) += 1.0;
  }
  return argmax_lowest(votes);
}

}  // namespace

Split stratified_split(const std::vector<int>& labels, int class_count, double test_fraction, std::uint64_t seed) {
  if (class_count < 1) throw ValidationError("stratified_split: class_count must be >= 1");
  std::vector<int> all(labels.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  const auto groups = by_class(all, labels, class_count);
  const Rng base = Rng(seed).split("split");
  Split s;
  for (int c = 0; c < class_count; ++c) {
    std::vector<int> g = groups[std::size_t(c)];
    Rng r = base.split(std::uint64_t(c));
    shuffle(r, g);
    int n_test = int(std::lround(test_fraction * double(g.size())));
    if (g.size() >= 2) n_test = std::clamp(n_test, 1, int(g.size()) - 1);
    const std::size_t cut = g.size() - std::size_t(std::max(n_test, 0));
    s.train.insert(s.train.end(), g.begin(), g.begin() + std::ptrdiff_t(cut));
    s.test.insert(s.test.end(), g.begin() + std::ptrdiff_t(cut), g.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<int> balanced_fraction(const std::vector<int>& indices, const std::vector<int>& labels, int class_count,
                                   double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ValidationError("label fraction must be in (0, 1]");
  const auto groups = by_class(indices, labels, class_count);
  const Rng base = Rng(seed).split("fraction");
  std::vector<int> out;
  for (int c = 0; c < class_count; ++c) {
    std::vector<int> g = groups[std::size_t(c)];
    if (g.empty()) continue;
    const auto take = std::size_t(std::floor(fraction * double(g.size()) + 1e-9));
    if (take == 0) {
      throw ValidationError("label fraction " + std::to_string(fraction) + " leaves class " + std::to_string(c) +
                            " with no samples");
    }
    Rng r = base.split(std::uint64_t(c));
    shuffle(r, g);
    out.insert(out.end(), g.begin(), g.begin() + std::ptrdiff_t(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> LinearClassifier::predict(const MatrixXd& features) const {
  const MatrixXd z = inv_std.asDiagonal() * (features.colwise() - mean);
  const MatrixXd logits = (weight * z).colwise() + bias;
  std::vector<int> out(std::size_t(features.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) out[std::size_t(j)] = argmax_lowest(logits.col(j));
  return out;
}

namespace {
// Cosine decay of the probe learning rate, stepped per epoch.
double decay(int epoch, int epochs) { return 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(epochs))); }
}  // namespace

LinearClassifier train_linear(const MatrixXd& features, const std::vector<int>& labels, int class_count,
                              const ProbeConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = features.rows(), n = features.cols();
  if (n != Eigen::Index(labels.size())) throw ValidationError("train_linear: feature/label count mismatch");
  if (n == 0) throw ValidationError("train_linear: no training samples");
  LinearClassifier clf;
  clf.mean = features.rowwise().mean();
  const MatrixXd centered = features.colwise() - clf.mean;
  clf.inv_std.resize(d);
  for (Eigen::Index r = 0; r < d; ++r) {
    const double sd = std::sqrt(centered.row(r).squaredNorm() / double(n));
    clf.inv_std(r) = sd > 1e-8 ? 1.0 / sd : 1.0;
  }
  const MatrixXd z = clf.inv_std.asDiagonal() * centered;
  clf.weight = MatrixXd::Zero(class_count, d);
  clf.bias = VectorXd::Zero(class_count);
  MatrixXd vw = clf.weight;
  VectorXd vb = clf.bias;

  std::vector<int> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[std::size_t(i)] = int(i);
  Rng rng = Rng(cfg.seed).split("linear");
  const int bs = int(std::min<Eigen::Index>(cfg.batch_size, n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr * decay(epoch, cfg.epochs);
    shuffle(rng, order);
    for (int start = 0; start < int(n); start += bs) {
      const int end = std::min(int(n), start + bs);
      const int b = end - start;
      MatrixXd xb(d, b);
      for (int j = 0; j < b; ++j) xb.col(j) = z.col(order[std::size_t(start + j)]);
      MatrixXd logits = (clf.weight * xb).colwise() + clf.bias;
      for (int j = 0; j < b; ++j) {
        auto col = logits.col(j);
        col.array() -= col.maxCoeff();
        col = col.array().exp().matrix();
        col /= col.sum();
        col(labels[std::size_t(order[std::size_t(start + j)])]) -= 1.0;
      }
      logits /= double(b);
      const MatrixXd gw = logits * xb.transpose() + cfg.weight_decay * clf.weight;
      const VectorXd gb = logits.rowwise().sum();
      vw = cfg.momentum * vw + gw;
      vb = cfg.momentum * vb + gb;
      clf.weight -= lr * vw;
      clf.bias -= lr * vb;
    }
  }
  if (!clf.weight.allFinite()) throw NumericError("linear probe diverged");
  return clf;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw ValidationError("accuracy: size mismatch");
  if (truth.empty()) throw ValidationError("accuracy: no samples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return double(hit) / double(truth.size());
}

MatrixXd extract_features(const ParamsD& params, const Dataset& ds, const std::vector<int>& indices, int view_side) {
  return chunked(ds, indices, view_side, params.dims.feat,
                 [&](const std::vector<Image>& v) { return forward_features<double>(params, v); });
}

MatrixXd extract_embeddings(const ParamsD& params, const Dataset& ds, const std::vector<int>& indices,
                            int view_side) {
  return chunked(ds, indices, view_side, params.dims.embed,
                 [&](const std::vector<Image>& v) { return forward<double>(params, v).embeddings; });
}

double linear_probe_features(const MatrixXd& features, const std::vector<int>& labels, int class_count,
                             const ProbeConfig& cfg) {
  const Split split = stratified_split(labels, class_count, cfg.test_fraction, cfg.seed);
  MatrixXd train(features.rows(), Eigen::Index(split.train.size()));
  MatrixXd test(features.rows(), Eigen::Index(split.test.size()));
  for (std::size_t j = 0; j < split.train.size(); ++j) train.col(Eigen::Index(j)) = features.col(split.train[j]);
  for (std::size_t j = 0; j < split.test.size(); ++j) test.col(Eigen::Index(j)) = features.col(split.test[j]);
  const auto clf = train_linear(train, gather(labels, split.train), class_count, cfg);
  return accuracy(clf.predict(test), gather(labels, split.test));
}

double linear_probe(const ParamsD& params, const Dataset& ds, const ProbeConfig& cfg) {
  require_labels(ds);
  std::vector<int> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  return linear_probe_features(extract_features(params, ds, all, cfg.view_side), *ds.labels, *ds.class_count, cfg);
}

double knn_accuracy(const MatrixXd& reference, const std::vector<int>& reference_labels, const MatrixXd& queries,
                    const std::vector<int>& query_labels, int class_count, int k) {
  if (k < 1) throw ValidationError("knn: k must be >= 1");
  if (reference.cols() == 0) throw ValidationError("knn: empty reference set");
  if (reference.rows() != queries.rows()) throw ValidationError("knn: dimension mismatch");
  const MatrixXd sims = normalized_columns(queries).transpose() * normalized_columns(reference);
  std::vector<int> pred(std::size_t(queries.cols()));
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    pred[std::size_t(i)] = knn_vote(sims.row(i).transpose(), reference_labels, class_count, k, -1);
  }
  return accuracy(pred, query_labels);
}

double knn_accuracy_loo(const MatrixXd& embeddings, const std::vector<int>& labels, int class_count, int k) {
  if (k < 1) throw ValidationError("knn: k must be >= 1");
  if (embeddings.cols() < 2) throw ValidationError("knn: leave-one-out needs at least two samples");
  const MatrixXd e = normalized_columns(embeddings);
  const MatrixXd sims = e.transpose() * e;
  std::vector<int> pred(std::size_t(e.cols()));
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    pred[std::size_t(i)] = knn_vote(sims.row(i).transpose(), labels, class_count, k, i);
  }
  return accuracy(pred, labels);
}

double knn_probe(const ParamsD& params, const Dataset& ds, int k, const ProbeConfig& cfg) {
  require_labels(ds);
  const Split split = stratified_split(*ds.labels, *ds.class_count, cfg.test_fraction, cfg.seed);
  return knn_accuracy(extract_embeddings(params, ds, split.train, cfg.view_side), gather(*ds.labels, split.train),
                      extract_embeddings(params, ds, split.test, cfg.view_side), gather(*ds.labels, split.test),
                      *ds.class_count, k);
}

double finetune_fraction(const ParamsD& params, const Dataset& ds, const ProbeConfig& cfg) {
  cfg.validate();
  require_labels(ds);
  const auto& labels = *ds.labels;
  const int classes = *ds.class_count;
  const Split split = stratified_split(labels, classes, cfg.test_fraction, cfg.seed);
  std::vector<int> train = balanced_fraction(split.train, labels, classes, cfg.label_fraction, cfg.seed);

  ParamsD net = params;
  ParamGrads<double> vel = zeros_like(net);
  MatrixXd head_w = MatrixXd::Zero(classes, net.dims.feat);
  VectorXd head_b = VectorXd::Zero(classes);
  MatrixXd vw = head_w;
  VectorXd vb = head_b;

  Rng rng = Rng(cfg.seed).split("finetune");
  const int bs = std::min<int>(cfg.batch_size, int(train.size()));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double scale = decay(epoch, cfg.epochs);
    shuffle(rng, train);
    for (std::size_t start = 0; start < train.size(); start += std::size_t(bs)) {
      const std::size_t end = std::min(train.size(), start + std::size_t(bs));
      const auto views = render(ds, train, start, end, cfg.view_side);
      auto fwd = forward_trunk<double>(net, views);
      const MatrixXd& feats = fwd.acts.post.back();
      MatrixXd g = (head_w * feats).colwise() + head_b;
      for (Eigen::Index j = 0; j < g.cols(); ++j) {
        auto col = g.col(j);
        col.array() -= col.maxCoeff();
        col = col.array().exp().matrix();
        col /= col.sum();
        col(labels[std::size_t(train[start + std::size_t(j)])]) -= 1.0;
      }
      g /= double(g.cols());
      const MatrixXd grad_feat = head_w.transpose() * g;
      const MatrixXd gw = g * feats.transpose() + cfg.weight_decay * head_w;
      const VectorXd gb = g.rowwise().sum();
      const ParamGrads<double> grads = backward_features<double>(net, fwd.acts, grad_feat);
      for (std::size_t l = 0; l < net.weights.size(); ++l) {
        vel.weights[l] = cfg.momentum * vel.weights[l] + grads.weights[l] + cfg.weight_decay * net.weights[l];
        net.weights[l] -= scale * cfg.lr_backbone * vel.weights[l];
        vel.biases[l] = cfg.momentum * vel.biases[l] + grads.biases[l] + cfg.weight_decay * net.biases[l];
        net.biases[l] -= scale * cfg.lr_backbone * vel.biases[l];
      }
      ++net.version;
      vw = cfg.momentum * vw + gw;
      vb = cfg.momentum * vb + gb;
      head_w -= scale * cfg.lr * vw;
      head_b -= scale * cfg.lr * vb;
    }
    if (!head_w.allFinite() || !net.all_finite()) throw NumericError("fine-tuning diverged");
  }

  const MatrixXd feats = extract_features(net, ds, split.test, cfg.view_side);
  const MatrixXd logits = (head_w * feats).colwise() + head_b;
  std::vector<int> pred(std::size_t(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) pred[std::size_t(j)] = argmax_lowest(logits.col(j));
  return accuracy(pred, gather(labels, split.test));
}

IntraClassSimilarity intra_class_similarity(const MatrixXd& embeddings, const std::vector<int>& labels,
                                            int class_count) {
  if (Eigen::Index(labels.size()) != embeddings.cols()) throw ValidationError("intra-class: label count mismatch");
  std::vector<int> all(labels.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  const auto groups = by_class(all, labels, class_count);
  const MatrixXd e = normalized_columns(embeddings);
  IntraClassSimilarity out;
  out.per_class.assign(std::size_t(class_count), 0.0);
  int counted = 0;
  double total = 0;
  for (int c = 0; c < class_count; ++c) {
    const auto& g = groups[std::size_t(c)];
    if (g.size() < 2) continue;
    MatrixXd sub(e.rows(), Eigen::Index(g.size()));
    for (std::size_t j = 0; j < g.size(); ++j) sub.col(Eigen::Index(j)) = e.col(g[j]);
    const VectorXd s = sub.rowwise().sum();
    // Sum over i<j of e_i.e_j = (|sum|^2 - sum |e_i|^2) / 2.
    double self = 0;
    for (Eigen::Index j = 0; j < sub.cols(); ++j) self += sub.col(j).squaredNorm();
    const double pairs = double(g.size()) * double(g.size() - 1) / 2.0;
    out.per_class[std::size_t(c)] = (s.squaredNorm() - self) / 2.0 / pairs;
    total += out.per_class[std::size_t(c)];
    ++counted;
  }
  if (counted == 0) throw ValidationError("intra-class: no class has two samples");
  out.mean = total / counted;
  return out;
}

IntraClassSimilarity intra_class_similarity(const ParamsD& params, const Dataset& ds, int view_side) {
  require_labels(ds);
  std::vector<int> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  return intra_class_similarity(extract_embeddings(params, ds, all, view_side), *ds.labels, *ds.class_count);
}

}  // namespace clim
