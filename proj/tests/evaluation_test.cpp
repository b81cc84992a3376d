#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "clim/evaluation.hpp"

namespace clim {
namespace {

std::vector<int> balanced_labels(int classes, int per_class) {
  std::vector<int> y;
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) y.push_back(c);
  return y;
}

MatrixXd random_unit_columns(Rng& rng, int dim, int n) {
  MatrixXd m(dim, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < dim; ++i) m(i, j) = rng.normal();
    m.col(j).normalize();
  }
  return m;
}

EncoderDims small_dims() {
  EncoderDims d;
  d.input_side = 8;
  d.hidden = 32;
  d.feat = 16;
  d.mlp_hidden = 16;
  d.embed = 8;
  return d;
}

ProbeConfig fast_probe() {
  ProbeConfig c;
  c.epochs = 30;
  c.view_side = 8;
  return c;
}

TEST(Split, StratifiedAndDisjoint) {
  const auto y = balanced_labels(5, 20);
  const Split s = stratified_split(y, 5, 0.2, 3);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.test.size(), 20u);
  std::set<int> all(s.train.begin(), s.train.end());
  for (int t : s.test) EXPECT_TRUE(all.insert(t).second);
  EXPECT_EQ(all.size(), 100u);
  std::vector<int> per(5, 0);
  for (int t : s.test) per[std::size_t(y[std::size_t(t)])]++;
  for (int c : per) EXPECT_EQ(c, 4);
  const Split again = stratified_split(y, 5, 0.2, 3);
  EXPECT_EQ(again.test, s.test);
}

TEST(Split, BalancedFraction) {
  const auto y = balanced_labels(4, 10);
  std::vector<int> idx(40);
  for (int i = 0; i < 40; ++i) idx[std::size_t(i)] = i;
  const auto sub = balanced_fraction(idx, y, 4, 0.1, 1);
  ASSERT_EQ(sub.size(), 4u);
  std::set<int> classes;
  for (int i : sub) classes.insert(y[std::size_t(i)]);
  EXPECT_EQ(classes.size(), 4u);
  EXPECT_EQ(balanced_fraction(idx, y, 4, 1.0, 1).size(), 40u);
  EXPECT_THROW(balanced_fraction(idx, y, 4, 0.05, 1), ValidationError);
}

TEST(Linear, OneHotFeaturesAreSeparable) {
  const auto y = balanced_labels(4, 25);
  MatrixXd f = MatrixXd::Zero(4, 100);
  for (int i = 0; i < 100; ++i) f(y[std::size_t(i)], i) = 1.0;
  EXPECT_EQ(linear_probe_features(f, y, 4, fast_probe()), 1.0);
}

TEST(Linear, PermutedLabelsAreAtChance) {
  Rng rng(4);
  auto y = balanced_labels(10, 50);
  const MatrixXd f = random_unit_columns(rng, 16, 500);
  for (std::size_t i = y.size() - 1; i > 0; --i) std::swap(y[i], y[std::size_t(rng.uniform_int(0, std::int64_t(i)))]);
  EXPECT_NEAR(linear_probe_features(f, y, 10, fast_probe()), 0.1, 0.05);
}

TEST(Linear, TwoPointsWithinHundredEpochs) {
  MatrixXd f(2, 2);
  f << -1, 1, 0.5, 0.5;
  ProbeConfig cfg;
  cfg.epochs = 100;
  const auto clf = train_linear(f, {0, 1}, 2, cfg);
  EXPECT_EQ(accuracy(clf.predict(f), {0, 1}), 1.0);
}

TEST(Linear, DeterministicUnderSeed) {
  Rng rng(5);
  const auto y = balanced_labels(3, 30);
  const MatrixXd f = random_unit_columns(rng, 6, 90);
  const auto a = train_linear(f, y, 3, fast_probe());
  const auto b = train_linear(f, y, 3, fast_probe());
  EXPECT_TRUE(a.weight == b.weight);
  EXPECT_TRUE(a.bias == b.bias);
}

TEST(Linear, ProbeIgnoresProjectionHead) {
  SyntheticSpec spec;
  spec.class_count = 3;
  spec.per_class = 20;
  spec.image_side = 8;
  const Dataset ds = generate_synthetic(spec);
  Rng rng(6);
  ParamsD p = init_params<double>(rng, small_dims());
  const double before = linear_probe(p, ds, fast_probe());
  const auto fb = extract_features(p, ds, {0, 1, 2}, 8);
  for (std::size_t l = p.trunk_layer() + 1; l < p.layer_count(); ++l) p.weights[l].setRandom();
  EXPECT_EQ(linear_probe(p, ds, fast_probe()), before);
  EXPECT_TRUE(extract_features(p, ds, {0, 1, 2}, 8) == fb);
}

TEST(Linear, MissingLabelsRejected) {
  SyntheticSpec spec;
  spec.class_count = 2;
  spec.per_class = 5;
  spec.image_side = 8;
  Dataset ds = generate_synthetic(spec);
  ds.labels.reset();
  Rng rng(7);
  const ParamsD p = init_params<double>(rng, small_dims());
  EXPECT_THROW(linear_probe(p, ds, fast_probe()), ValidationError);
  EXPECT_THROW(knn_probe(p, ds, 5, fast_probe()), ValidationError);
  EXPECT_THROW(finetune_fraction(p, ds, fast_probe()), ValidationError);
}

TEST(Knn, DuplicateInReferenceIsCorrect) {
  Rng rng(8);
  const MatrixXd ref = random_unit_columns(rng, 5, 20);
  std::vector<int> ref_y = balanced_labels(4, 5);
  MatrixXd q = ref.col(13);
  EXPECT_EQ(knn_accuracy(ref, ref_y, q, {ref_y[13]}, 4, 1), 1.0);
}

TEST(Knn, IdenticalEmbeddingsGiveMajorityFrequency) {
  // 3 of class 0, 5 of class 1, 2 of class 2: every query sees all references
  // tied, so the vote is the reference class histogram.
  const std::vector<int> ref_y{1, 1, 1, 1, 1, 0, 0, 0, 2, 2};
  const MatrixXd ref = MatrixXd::Ones(3, 10).colwise().normalized();
  const std::vector<int> q_y{0, 1, 1, 2, 1};
  const MatrixXd q = MatrixXd::Ones(3, 5).colwise().normalized();
  EXPECT_DOUBLE_EQ(knn_accuracy(ref, ref_y, q, q_y, 3, 3), 3.0 / 5.0);
}

TEST(Knn, VoteTiesGoToLowestClass) {
  MatrixXd ref(2, 2);
  ref << 1, 1, 0, 0;
  const MatrixXd q = ref.col(0);
  EXPECT_EQ(knn_accuracy(ref, {2, 1}, q, {1}, 3, 1), 1.0);
}

TEST(Knn, RandomEmbeddingsAreAtChance) {
  Rng rng(9);
  const auto y = balanced_labels(10, 60);
  const MatrixXd ref = random_unit_columns(rng, 16, 600);
  const auto qy = balanced_labels(10, 20);
  const MatrixXd q = random_unit_columns(rng, 16, 200);
  EXPECT_NEAR(knn_accuracy(ref, y, q, qy, 10, 20), 0.1, 0.05);
  EXPECT_NEAR(knn_accuracy_loo(ref, y, 10, 20), 0.1, 0.05);
}

TEST(Knn, MatchesBruteForceVote) {
  Rng rng(10);
  const auto y = balanced_labels(3, 15);
  const MatrixXd ref = random_unit_columns(rng, 4, 45);
  const MatrixXd q = random_unit_columns(rng, 4, 30);
  std::vector<int> qy(30);
  for (auto& v : qy) v = int(rng.uniform_int(0, 2));
  const int k = 5;
  int correct = 0;
  for (int j = 0; j < 30; ++j) {
    std::vector<std::pair<double, int>> sims;
    for (int i = 0; i < 45; ++i) sims.push_back({-ref.col(i).dot(q.col(j)), i});
    std::sort(sims.begin(), sims.end());
    std::vector<int> votes(3, 0);
    for (int i = 0; i < k; ++i) votes[std::size_t(y[std::size_t(sims[std::size_t(i)].second)])]++;
    const int pred = int(std::max_element(votes.begin(), votes.end()) - votes.begin());
    correct += pred == qy[std::size_t(j)];
  }
  EXPECT_DOUBLE_EQ(knn_accuracy(ref, y, q, qy, 3, k), correct / 30.0);
}

TEST(Finetune, ZeroEpochsIsChanceHead) {
  SyntheticSpec spec;
  spec.class_count = 4;
  spec.per_class = 20;
  spec.image_side = 8;
  const Dataset ds = generate_synthetic(spec);
  Rng rng(11);
  const ParamsD p = init_params<double>(rng, small_dims());
  ProbeConfig cfg = fast_probe();
  cfg.epochs = 0;
  // A zero head scores every class equally and predicts class 0.
  EXPECT_DOUBLE_EQ(finetune_fraction(p, ds, cfg), 0.25);
}

TEST(Finetune, OneLabelPerClassBeatsChance) {
  SyntheticSpec spec;
  spec.class_count = 10;
  spec.per_class = 40;
  spec.image_side = 8;
  const Dataset ds = generate_synthetic(spec);
  std::vector<double> accs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const ParamsD p = init_params<double>(rng, small_dims());
    ProbeConfig cfg = fast_probe();
    cfg.seed = seed;
    cfg.label_fraction = 1.0 / 32.0;  // 32 train samples per class
    accs.push_back(finetune_fraction(p, ds, cfg));
  }
  std::sort(accs.begin(), accs.end());
  EXPECT_GT(accs[2], 0.2);
  EXPECT_GT(accs[0], 0.1);
}

TEST(Finetune, FullFractionMatchesSupervisedEndpoint) {
  SyntheticSpec spec;
  spec.class_count = 3;
  spec.per_class = 20;
  spec.image_side = 8;
  const Dataset ds = generate_synthetic(spec);
  Rng rng(12);
  const ParamsD p = init_params<double>(rng, small_dims());
  ProbeConfig cfg = fast_probe();
  const double full = finetune_fraction(p, ds, cfg);
  cfg.label_fraction = 1.0;
  EXPECT_EQ(finetune_fraction(p, ds, cfg), full);
  EXPECT_GT(full, 0.5);
  cfg.label_fraction = 0.01;
  EXPECT_THROW(finetune_fraction(p, ds, cfg), ValidationError);
}

TEST(IntraSim, Examples) {
  MatrixXd same(2, 3);
  same << 1, 1, 1, 0, 0, 0;
  EXPECT_DOUBLE_EQ(intra_class_similarity(same, {0, 0, 0}, 1).mean, 1.0);

  MatrixXd ortho(2, 2);
  ortho << 1, 0, 0, 1;
  EXPECT_NEAR(intra_class_similarity(ortho, {0, 0}, 1).mean, 0.0, 1e-15);

  const double h = std::sqrt(0.5);
  MatrixXd three(2, 3);
  three << 1, 0, h, 0, 1, h;
  EXPECT_NEAR(intra_class_similarity(three, {0, 0, 0}, 1).mean, (0 + h + h) / 3, 1e-12);
}

TEST(IntraSim, UnweightedMeanOverClassesAndSkipsSingletons) {
  MatrixXd e(2, 6);
  e << 1, 1, 1, 0, 1, 0, 0, 0, 0, 1, 0, 1;
  // class 0: three identical -> 1; class 1: (0,1),(1,0) -> 0; class 2: singleton
  const auto r = intra_class_similarity(e, {0, 0, 0, 1, 1, 2}, 3);
  EXPECT_DOUBLE_EQ(r.per_class[0], 1.0);
  EXPECT_NEAR(r.per_class[1], 0.0, 1e-15);
  EXPECT_NEAR(r.mean, 0.5, 1e-15);
}

TEST(IntraSim, InvariantToPermutationAndRotation) {
  Rng rng(13);
  const MatrixXd e = random_unit_columns(rng, 4, 30);
  std::vector<int> y(30);
  for (int i = 0; i < 30; ++i) y[std::size_t(i)] = i % 3;
  const double base = intra_class_similarity(e, y, 3).mean;

  // Pairwise brute force.
  double sum = 0;
  for (int c = 0; c < 3; ++c) {
    double s = 0;
    int pairs = 0;
    for (int i = 0; i < 30; ++i)
      for (int j = i + 1; j < 30; ++j)
        if (y[std::size_t(i)] == c && y[std::size_t(j)] == c) {
          s += e.col(i).dot(e.col(j));
          ++pairs;
        }
    sum += s / pairs;
  }
  EXPECT_NEAR(base, sum / 3, 1e-12);

  MatrixXd perm = e;
  std::vector<int> py = y;
  for (int i = 0; i < 30; ++i) {
    perm.col(i) = e.col(29 - i);
    py[std::size_t(i)] = y[std::size_t(29 - i)];
  }
  EXPECT_NEAR(intra_class_similarity(perm, py, 3).mean, base, 1e-12);

  const Eigen::HouseholderQR<MatrixXd> qr(MatrixXd::Random(4, 4));
  const MatrixXd rot = qr.householderQ();
  EXPECT_NEAR(intra_class_similarity(rot * e, y, 3).mean, base, 1e-12);
}

}  // namespace
}  // namespace clim
