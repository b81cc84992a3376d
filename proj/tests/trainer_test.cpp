#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "clim/checkpoint.hpp"
#include "clim/trainer.hpp"
#include "test_util.hpp"

namespace clim {
namespace {

using testing::TempDir;

Dataset small_data(int classes = 4, int per_class = 12) {
  SyntheticSpec s;
  s.class_count = classes;
  s.per_class = per_class;
  s.image_side = 12;
  s.seed = 3;
  return generate_synthetic(s);
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  c.warmup_epochs = 1;
  c.encoder.input_side = 12;
  c.encoder.hidden = 32;
  c.encoder.feat = 16;
  c.encoder.mlp_hidden = 16;
  c.encoder.embed = 8;
  c.augment.resolutions = {12, 8};
  c.contrastive.queue_capacity = 64;
  c.neighborhood.clusters = 4;
  c.neighborhood.knn_k = 6;
  c.neighborhood.positives = 3;
  c.neighborhood.refresh_every = 1;
  return c;
}

bool same_params(const ParamsD& a, const ParamsD& b) { return a.weights == b.weights && a.biases == b.biases; }

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.06, 0, 60), 0.06);
  EXPECT_NEAR(cosine_lr(0.06, 60, 60), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(0.06, 30, 60), 0.03, 1e-15);
  for (double e = 0; e < 60; e += 0.5) EXPECT_GE(cosine_lr(0.06, e, 60), cosine_lr(0.06, e + 0.5, 60));
}

ParamsD one_scalar_params(double theta) {
  ParamsD p;
  p.weights.push_back(MatrixXd::Constant(1, 1, theta));
  p.biases.push_back(VectorXd::Constant(1, theta));
  return p;
}

TEST(Sgd, Examples) {
  ParamsD p = one_scalar_params(1.0);
  ParamsD v = zeros_like(p);
  sgd_step(p, zeros_like(p), v, 0.5, 0.9, 0.0);
  EXPECT_EQ(p.weights[0](0), 1.0);

  ParamsD g = one_scalar_params(2.0);
  sgd_step(p, g, v, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p.weights[0](0), 1.0 - 0.1 * 2.0);

  p = one_scalar_params(1.0);
  v = zeros_like(p);
  sgd_step(p, zeros_like(p), v, 1.0, 0.0, 0.1);
  EXPECT_DOUBLE_EQ(p.weights[0](0), 0.9);
  EXPECT_DOUBLE_EQ(p.biases[0](0), 0.9);
}

TEST(Sgd, MomentumAccumulates) {
  ParamsD p = one_scalar_params(0.0);
  ParamsD v = zeros_like(p);
  const ParamsD g = one_scalar_params(1.0);
  sgd_step(p, g, v, 1.0, 0.5, 0.0);
  sgd_step(p, g, v, 1.0, 0.5, 0.0);
  // v: 1 then 1.5; theta: -1 then -2.5
  EXPECT_DOUBLE_EQ(p.weights[0](0), -2.5);
  ParamsD wrong = one_scalar_params(0.0);
  wrong.weights.push_back(MatrixXd::Zero(1, 1));
  wrong.biases.push_back(VectorXd::Zero(1));
  EXPECT_THROW(sgd_step(p, wrong, v, 1.0, 0.5, 0.0), ValidationError);
}

TEST(Names, RoundTrip) {
  for (Strategy s : {Strategy::clim, Strategy::instance, Strategy::random, Strategy::knn, Strategy::kmeans,
                     Strategy::knn_and_kmeans, Strategy::center_wise})
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  for (Mixing m : {Mixing::cutmix, Mixing::mixup, Mixing::none}) EXPECT_EQ(parse_mixing(to_string(m)), m);
  EXPECT_EQ(parse_key_view("clean"), KeyView::clean);
  EXPECT_EQ(parse_queue_init("random"), QueueInit::random);
  EXPECT_THROW(parse_strategy("bogus"), ValidationError);
  EXPECT_THROW(parse_mixing("cut"), ValidationError);
}

TEST(Warmup, InstanceBeforeConfiguredStrategy) {
  TrainConfig c;
  c.epochs = 10;
  EXPECT_EQ(c.resolved_warmup(), 2);
  EXPECT_EQ(strategy_for_epoch(c, 1), Strategy::instance);
  EXPECT_EQ(strategy_for_epoch(c, 2), Strategy::clim);
  c.warmup_epochs = 50;
  EXPECT_EQ(c.resolved_warmup(), 10);
}

TEST(TrainStepTest, InstanceStepMatchesHandRolledInfoNce) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.strategy = Strategy::instance;
  cfg.mixing = Mixing::none;
  cfg.augment.resolutions = {12};
  TrainState state = init_state(ds, cfg);
  const std::vector<int> anchors{0, 5, 9, 20};
  const TrainState before = state;
  const StepMetrics m = train_step(state, ds, cfg, anchors, 0.05, Strategy::instance);

  // Rebuild the same views by replaying the documented random stream.
  const Rng step = before.rng.split("step").split(std::uint64_t(0));
  std::vector<Image> queries, keys;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    Rng r = step.split(std::uint64_t(i));
    const Image& img = ds.images[std::size_t(anchors[i])];
    const AugmentPlan qp = sample_plan(r, img.height, img.width, cfg.augment, 12);
    queries.push_back(render_plan(img, qp, 12));
    const AugmentPlan kp = sample_plan(r, img.height, img.width, cfg.augment, 12);
    keys.push_back(render_plan(img, kp, 12));
  }
  const MatrixXd q = forward<double>(before.params, queries).embeddings;
  const MatrixXd k = forward<double>(before.key.params, keys).embeddings;
  const MatrixXd negs = before.queue.keys();
  const double tau = cfg.contrastive.tau;
  double total = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double pos = q.col(Eigen::Index(i)).dot(k.col(Eigen::Index(i))) / tau;
    long double z = std::exp((long double)pos);
    for (Eigen::Index j = 0; j < negs.cols(); ++j) z += std::exp((long double)(q.col(Eigen::Index(i)).dot(negs.col(j)) / tau));
    total += double(std::log(z)) - pos;
  }
  EXPECT_NEAR(m.loss, total / double(anchors.size()), 1e-12);

  // The anchor keys were pushed in batch order.
  const MatrixXd contents = state.queue.contents();
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_LT((contents.col(contents.cols() - 4 + i) - k.col(i)).norm(), 1e-12);
  EXPECT_EQ(state.step, 1);
  EXPECT_FALSE(same_params(state.params, before.params));
}

TEST(TrainStepTest, RequiresPoolsForNeighbourhoodStrategies) {
  const Dataset ds = small_data();
  const TrainConfig cfg = small_config();
  TrainState state = init_state(ds, cfg);
  const std::vector<int> anchors{0, 1};
  EXPECT_THROW(train_step(state, ds, cfg, anchors, 0.1, Strategy::clim), ValidationError);
  rebuild_pools(state, ds, cfg, Strategy::clim, 0);
  EXPECT_NO_THROW(train_step(state, ds, cfg, anchors, 0.1, Strategy::clim));
  ASSERT_EQ(state.pools.size(), ds.size());
  for (std::size_t a = 0; a < ds.size(); ++a) {
    EXPECT_EQ(int(state.pools[a].size()), cfg.neighborhood.positives);
    for (int p : state.pools[a]) EXPECT_NE(p, int(a));
  }
}

TEST(TrainStepTest, StrategySetsHaveExpectedSizes) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  TrainState state = init_state(ds, cfg);
  rebuild_pools(state, ds, cfg, Strategy::knn, 0);
  for (int s : state.selected_sizes) EXPECT_EQ(s, cfg.neighborhood.knn_k);
  rebuild_pools(state, ds, cfg, Strategy::kmeans, 0);
  for (std::size_t a = 0; a < ds.size(); ++a) {
    const int cluster = state.neighborhood.model.assignments[a];
    const int members = int(std::count(state.neighborhood.model.assignments.begin(),
                                       state.neighborhood.model.assignments.end(), cluster));
    EXPECT_EQ(state.selected_sizes[a], members - 1);
  }
  rebuild_pools(state, ds, cfg, Strategy::knn_and_kmeans, 0);
  std::vector<int> inter = state.selected_sizes;
  rebuild_pools(state, ds, cfg, Strategy::clim, 0);
  for (std::size_t a = 0; a < ds.size(); ++a) {
    EXPECT_LE(state.selected_sizes[a], inter[a]);
    EXPECT_LE(inter[a], cfg.neighborhood.knn_k);
  }
}

TEST(TrainStepTest, QueueFillsAtBatchRate) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.strategy = Strategy::instance;
  TrainState state = init_state(ds, cfg);
  EXPECT_EQ(state.queue.size(), cfg.contrastive.queue_capacity);
  EXPECT_EQ(state.queue.enqueued(), 0);
  const std::vector<int> anchors{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  for (int s = 1; s <= 6; ++s) {
    const auto m = train_step(state, ds, cfg, anchors, 0.05, Strategy::instance);
    EXPECT_EQ(m.queue_size, std::min(s * 13, cfg.contrastive.queue_capacity));
  }
}

TEST(Pretrain, ZeroEpochsReturnsInitialParams) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  const PretrainResult r = pretrain(ds, cfg);
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(same_params(r.params, init_state(ds, cfg).params));
}

TEST(Pretrain, WarmupOnlyRunIsInstanceDiscrimination) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.warmup_epochs = 2;
  TrainConfig inst = cfg;
  inst.strategy = Strategy::instance;
  const PretrainResult a = pretrain(ds, cfg);
  const PretrainResult b = pretrain(ds, inst);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss, b.log[i].loss);
    EXPECT_EQ(a.log[i].mean_omega_p, 0.0);
  }
  EXPECT_TRUE(same_params(a.params, b.params));
}

TEST(Pretrain, DeterministicReplayAcrossWorkerCounts) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  const PretrainResult a = pretrain(ds, cfg);
  const PretrainResult b = pretrain(ds, cfg);
  cfg.workers = 3;
  const PretrainResult c = pretrain(ds, cfg);
  ASSERT_EQ(a.log.size(), std::size_t(3 * (48 / 8)));
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(format_metrics(a.log[i]), format_metrics(b.log[i]));
    EXPECT_EQ(a.log[i].loss, c.log[i].loss);
  }
  EXPECT_TRUE(same_params(a.params, b.params));
  EXPECT_TRUE(same_params(a.params, c.params));
  for (const auto& m : a.log) EXPECT_TRUE(std::isfinite(m.loss));
  EXPECT_GT(a.log.back().mean_omega_p, 0.0);
}

TEST(Pretrain, StateReplayIsBitIdentical) {
  const Dataset ds = small_data();
  const TrainConfig cfg = small_config();
  TrainState s1 = init_state(ds, cfg), s2 = init_state(ds, cfg);
  EXPECT_TRUE(s1 == s2);
  rebuild_pools(s1, ds, cfg, Strategy::clim, 0);
  rebuild_pools(s2, ds, cfg, Strategy::clim, 0);
  const std::vector<int> anchors{3, 1, 4, 1, 5};
  for (int i = 0; i < 3; ++i) {
    train_step(s1, ds, cfg, anchors, 0.05, Strategy::clim);
    train_step(s2, ds, cfg, anchors, 0.05, Strategy::clim);
  }
  EXPECT_TRUE(s1 == s2);
}

TEST(Pretrain, WritesLogsAndCheckpoints) {
  TempDir dir;
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.checkpoint_every = 2;
  PretrainOptions opts;
  opts.out_dir = dir.path();
  int seen = 0;
  opts.on_step = [&](const StepMetrics&) { ++seen; };
  const PretrainResult r = pretrain(ds, cfg, opts);
  EXPECT_EQ(seen, int(r.log.size()));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_epoch2.clim"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_epoch3.clim"));
  const Checkpoint ck = load_checkpoint(dir / "ckpt_epoch3.clim");
  EXPECT_TRUE(same_params(ck.params, cast_params<double>(cast_params<float>(r.params))));
  EXPECT_EQ(ck.view_side, 12);

  std::ifstream metrics(dir / "metrics.tsv");
  std::string header;
  std::getline(metrics, header);
  EXPECT_EQ(header, "step\tepoch\tlr\tloss\tqueue_size\tmean_omega_p");
  int lines = 0;
  for (std::string l; std::getline(metrics, l);) ++lines;
  EXPECT_EQ(lines, int(r.log.size()));
  ASSERT_EQ(r.epochs.size(), 3u);
  for (const auto& e : r.epochs) ASSERT_TRUE(e.intra_sim.has_value());
}

TEST(Pretrain, DivergenceIsReported) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.lr0 = 1e200;
  cfg.strategy = Strategy::instance;
  EXPECT_THROW(pretrain(ds, cfg), NumericError);
}

TEST(Pretrain, RejectsBadConfig) {
  const Dataset ds = small_data();
  TrainConfig cfg = small_config();
  cfg.key_momentum = 1.0;
  EXPECT_THROW(pretrain(ds, cfg), ValidationError);
  EXPECT_THROW(pretrain(Dataset{}, small_config()), ValidationError);
}

TEST(Pretrain, ChanceLevelLossAtStepZero) {
  // Default encoder and a full 4096-key queue built from the untrained key
  // encoder; every logit is close, so the loss sits near ln(4096).
  SyntheticSpec s;
  s.per_class = 50;
  const Dataset ds = generate_synthetic(s);
  TrainConfig cfg;
  cfg.strategy = Strategy::instance;
  cfg.augment.resolutions = {16};
  cfg.encoder.input_side = 16;
  TrainState state = init_state(ds, cfg);
  std::vector<int> anchors(64);
  for (int i = 0; i < 64; ++i) anchors[std::size_t(i)] = i * 7 % int(ds.size());
  const auto m = train_step(state, ds, cfg, anchors, cfg.lr0, Strategy::instance);
  EXPECT_NEAR(m.loss, std::log(4096.0), 0.1 * std::log(4096.0));
}

}  // namespace
}  // namespace clim
