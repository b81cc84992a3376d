#pragma once

#include <cstdint>
#include <vector>

#include "clim/dataset.hpp"
#include "clim/encoder.hpp"
#include "clim/numerics.hpp"

namespace clim {

struct ProbeConfig {
  int epochs = 100;
  double lr = 0.5;             // linear probe, and the fine-tune head
  double lr_backbone = 0.005;  // fine-tune backbone
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 64;
  double label_fraction = 1.0;
  double test_fraction = 0.2;
  int view_side = 32;  // images are resized to this before entering the encoder
  std::uint64_t seed = 0;

  void validate() const;
};

/// Class-stratified train/test split of dataset positions; within each class
/// the last round(test_fraction * count) of a seeded shuffle go to test.
struct Split {
  std::vector<int> train;
  std::vector<int> test;
};
Split stratified_split(const std::vector<int>& labels, int class_count, double test_fraction, std::uint64_t seed);

/// Balanced subset: floor(fraction * count) per class of `indices` (seeded
/// shuffle per class). Throws ValidationError when some class gets none.
std::vector<int> balanced_fraction(const std::vector<int>& indices, const std::vector<int>& labels, int class_count,
                                   double fraction, std::uint64_t seed);

/// Softmax regression trained with SGD (cosine-decayed lr) on standardized features. Columns of
/// `features` are samples.
struct LinearClassifier {
  MatrixXd weight;  // classes x dim
  VectorXd bias;
  VectorXd mean;
  VectorXd inv_std;

  std::vector<int> predict(const MatrixXd& features) const;
};
LinearClassifier train_linear(const MatrixXd& features, const std::vector<int>& labels, int class_count,
                              const ProbeConfig& cfg);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

/// Features (columns) for the given dataset positions at cfg.view_side.
MatrixXd extract_features(const ParamsD& params, const Dataset& ds, const std::vector<int>& indices, int view_side);
MatrixXd extract_embeddings(const ParamsD& params, const Dataset& ds, const std::vector<int>& indices, int view_side);

/// Linear classifier on frozen trunk features; top-1 on the held-out split.
double linear_probe(const ParamsD& params, const Dataset& ds, const ProbeConfig& cfg);

/// Same, starting from precomputed features (columns are samples).
double linear_probe_features(const MatrixXd& features, const std::vector<int>& labels, int class_count,
                             const ProbeConfig& cfg);

/// k-NN vote with cosine similarity: each query column is classified by the
/// reference columns. Neighbours tied with the k-th similarity are all
/// counted; vote ties go to the lowest class id.
double knn_accuracy(const MatrixXd& reference, const std::vector<int>& reference_labels, const MatrixXd& queries,
                    const std::vector<int>& query_labels, int class_count, int k);

/// Leave-one-out variant over one set: each column is classified by all others.
double knn_accuracy_loo(const MatrixXd& embeddings, const std::vector<int>& labels, int class_count, int k);

/// Held-out embeddings classified against the train-split embeddings.
double knn_probe(const ParamsD& params, const Dataset& ds, int k, const ProbeConfig& cfg);

/// Fine-tunes a copy of the trunk plus a zero-initialised linear head on a
/// class-balanced label fraction of the train split; top-1 on the test split.
double finetune_fraction(const ParamsD& params, const Dataset& ds, const ProbeConfig& cfg);

struct IntraClassSimilarity {
  std::vector<double> per_class;
  double mean = 0;
};

/// Mean pairwise cosine similarity within each class (columns are samples),
/// and the unweighted mean over classes that have at least two members.
IntraClassSimilarity intra_class_similarity(const MatrixXd& embeddings, const std::vector<int>& labels,
                                            int class_count);
IntraClassSimilarity intra_class_similarity(const ParamsD& params, const Dataset& ds, int view_side);

}  // namespace clim
