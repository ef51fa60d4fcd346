#include "podom/regnet.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "podom/checkpoint.hpp"
#include "podom/sampling.hpp"
#include "podom/spatial_grid.hpp"
#include "podom/synthetic.hpp"
#include "unit/cloud_util.hpp"
#include "unit/test_util.hpp"

namespace podom {
namespace {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using testing::random_cloud;
using testing::random_pair;

std::array<double, 6> outputs(const RegNetOutput& o, int b = 0) {
  std::array<double, 6> r{};
  for (int i = 0; i < 3; ++i) {
    r[static_cast<std::size_t>(i)] = o.rot.value().at(b, i);
    r[static_cast<std::size_t>(i) + 3] = o.trans.value().at(b, i);
  }
  return r;
}

std::size_t dense_count(int in, int out) { return static_cast<std::size_t>(in * out + 2 * out); }

std::size_t mlp_count(int in, const std::vector<int>& widths) {
  std::size_t n = 0;
  for (int w : widths) {
    n += dense_count(in, w);
    in = w;
  }
  return n;
}

TEST(RegNet, ParameterCountIsPinned) {
  RegNet net(RegNetConfig::config_8k4k());
  // counted layer by layer: batch-normed layers carry in*out + gamma + beta
  const std::size_t oracle = mlp_count(6, {64, 96, 128}) + mlp_count(6, {64, 80, 96}) +
                             mlp_count(99, {112, 128, 128}) + mlp_count(132, {128, 128, 128}) +
                             mlp_count(131, {128, 96, 64}) + 2 * (19200 * 128 + 128 + 128 * 3 + 3);
  EXPECT_EQ(net.parameter_count(), oracle);
  EXPECT_EQ(net.parameter_count(), 5078038u);
}

TEST(RegNet, ConfigInvariants) {
  const RegNetConfig c = RegNetConfig::config_8k4k();
  EXPECT_EQ(c.embedding_points(), 1200);
  EXPECT_EQ(c.embedding_channels(), 128);
  EXPECT_EQ(c.flat_size(), 19200);
  EXPECT_EQ(RegNetConfig::config_4k2k().n_nonground + RegNetConfig::config_4k2k().n_ground, 6000);

  RegNetConfig bad = c;
  bad.ground.mlp.back() = 64;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.ground.n_out = 5000;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.keep_prob = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.final_sa.radius = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(RegNet, ConfigJsonRoundtrip) {
  RegNetConfig c = RegNetConfig::miniature();
  c.init_seed = 42;
  c.keep_prob = 0.75;
  const nlohmann::json j = c;
  const RegNetConfig back = j.get<RegNetConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.nonground.size(), 2u);
  EXPECT_EQ(back.final_sa.k_max, 4);
  // missing keys take defaults
  EXPECT_EQ(nlohmann::json::object().get<RegNetConfig>().ground.n_out, 400);
}

TEST(RegNet, BallQueryMatchesBruteForce) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5);
  PointsD pts(300, 3);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
  const Grouping g = ball_query_groups(pts, 40, 1.5, 8);
  ASSERT_EQ(g.offsets.size(), 41u);
  EXPECT_EQ(g.centroid_index, farthest_point_sample(pts, 40, FpsSeed::nearest_centroid()));
  for (int c = 0; c < 40; ++c) {
    const int ci = g.centroid_index[static_cast<std::size_t>(c)];
    std::vector<std::pair<double, int>> near;
    for (int j = 0; j < 300; ++j) {
      const double d = (pts.row(j) - pts.row(ci)).squaredNorm();
      if (d <= 1.5 * 1.5 && j != ci) near.push_back({d, j});
    }
    std::sort(near.begin(), near.end());
    std::vector<int> want{ci};
    for (std::size_t k = 0; k < near.size() && want.size() < 8; ++k) want.push_back(near[k].second);
    const std::vector<int> got(g.members.begin() + g.offsets[static_cast<std::size_t>(c)],
                               g.members.begin() + g.offsets[static_cast<std::size_t>(c) + 1]);
    EXPECT_EQ(got, want) << "group " << c;
  }
}

TEST(RegNet, SetAbstractionWithSelfOnlyGroupsIsPointwiseMlp) {
  std::mt19937_64 rng(2);
  ad::ParameterStore store;
  const SetAbstractionSpec spec{12, 1e-3, {5, 4}, 32};
  const SetAbstractionBlock block = make_set_abstraction(store, "sa", spec, 3, false, 0.9, rng);
  std::uniform_real_distribution<double> u(-5, 5);
  PointsD pts(12, 3);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
  Graph g;
  CloudBatch in;
  in.positions = {pts};
  in.feats = g.constant(Tensor::from_matrix(pts));
  const CloudBatch out = set_abstraction(block, in, LayerOptions{});
  const auto order = farthest_point_sample(pts, 12, FpsSeed::nearest_centroid());
  ASSERT_EQ(out.feats.rows(), 12);
  ASSERT_EQ(out.feats.cols(), 4);
  const ad::RowMat w0 = store.get("sa/l0/w").value.mat(), w1 = store.get("sa/l1/w").value.mat();
  const Eigen::RowVectorXd b0 = store.get("sa/l0/b").value.mat(), b1 = store.get("sa/l1/b").value.mat();
  for (int r = 0; r < 12; ++r) {
    Eigen::RowVectorXd x(6);
    x << 0, 0, 0, pts.row(order[static_cast<std::size_t>(r)]);
    const Eigen::RowVectorXd h = (x * w0 + b0).cwiseMax(0.0);
    const Eigen::RowVectorXd y = (h * w1 + b1).cwiseMax(0.0);
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.feats.value().at(r, c), y[c], 1e-12);
    EXPECT_EQ(out.positions[0].row(r), pts.row(order[static_cast<std::size_t>(r)]));
  }
}

TEST(RegNet, SetAbstractionGroupMaxOracle) {
  // Unfactorized oracle: every member row goes through the MLP on
  // (p_j - c, f_j) and the group takes the channelwise max.
  std::mt19937_64 rng(3);
  ad::ParameterStore store;
  const SetAbstractionSpec spec{5, 2.5, {6, 3}, 4};
  const SetAbstractionBlock block = make_set_abstraction(store, "sa", spec, 2, false, 0.9, rng);
  std::uniform_real_distribution<double> u(-3, 3);
  PointsD pts(30, 3);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = u(rng);
  Tensor feats = testing::random_tensor(rng, {30, 2});
  Graph g;
  const CloudBatch out = set_abstraction(block, CloudBatch{{pts}, g.constant(feats)}, LayerOptions{});
  const Grouping grp = ball_query_groups(pts, 5, 2.5, 4);
  const ad::RowMat w0 = store.get("sa/l0/w").value.mat(), w1 = store.get("sa/l1/w").value.mat();
  const Eigen::RowVectorXd b0 = store.get("sa/l0/b").value.mat(), b1 = store.get("sa/l1/b").value.mat();
  for (int c = 0; c < 5; ++c) {
    Eigen::RowVectorXd best = Eigen::RowVectorXd::Constant(3, -1e300);
    const int ci = grp.centroid_index[static_cast<std::size_t>(c)];
    for (int m = grp.offsets[static_cast<std::size_t>(c)]; m < grp.offsets[static_cast<std::size_t>(c) + 1]; ++m) {
      const int j = grp.members[static_cast<std::size_t>(m)];
      Eigen::RowVectorXd x(5);
      x << pts.row(j) - pts.row(ci), feats.at(j, 0), feats.at(j, 1);
      const Eigen::RowVectorXd y = (((x * w0 + b0).cwiseMax(0.0)) * w1 + b1).cwiseMax(0.0);
      best = best.cwiseMax(y);
    }
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(out.feats.value().at(c, k), best[k], 1e-12);
  }
  EXPECT_THROW(set_abstraction(block, CloudBatch{{pts.topRows(4)}, g.constant(Tensor({4, 2}))}, LayerOptions{}),
               ShapeError);
}

TEST(RegNet, FlowEmbeddingOracle) {
  std::mt19937_64 rng(4);
  ad::ParameterStore store;
  const FlowEmbeddingSpec spec{3, {4}};
  const FlowEmbeddingBlock block = make_flow_embedding(store, "fe", spec, 2, false, 0.9, rng);
  std::uniform_real_distribution<double> u(-3, 3);
  PointsD p1(50, 3), p2(50, 3);
  for (Eigen::Index i = 0; i < p1.size(); ++i) {
    p1.data()[i] = u(rng);
    p2.data()[i] = u(rng);
  }
  const Tensor f1 = testing::random_tensor(rng, {50, 2}), f2 = testing::random_tensor(rng, {50, 2});
  Graph g;
  const CloudBatch out = flow_embedding(block, CloudBatch{{p1}, g.constant(f1)}, CloudBatch{{p2}, g.constant(f2)},
                                        LayerOptions{});
  ASSERT_EQ(out.feats.rows(), 50);
  const ad::RowMat w = store.get("fe/l0/w").value.mat();
  const Eigen::RowVectorXd b = store.get("fe/l0/b").value.mat();
  for (int i = 0; i < 50; ++i) {
    // exhaustive distance sort
    std::vector<std::pair<double, int>> d;
    for (int j = 0; j < 50; ++j) d.push_back({(p2.row(j) - p1.row(i)).squaredNorm(), j});
    std::sort(d.begin(), d.end());
    Eigen::RowVectorXd best = Eigen::RowVectorXd::Constant(4, -1e300);
    for (int k = 0; k < 3; ++k) {
      const int j = d[static_cast<std::size_t>(k)].second;
      const Eigen::RowVector2d a(f1.at(i, 0), f1.at(i, 1)), c(f2.at(j, 0), f2.at(j, 1));
      Eigen::RowVectorXd x(6);
      x << p2.row(j) - p1.row(i), a.dot(c) / (a.norm() * c.norm()), c;
      best = best.cwiseMax((x * w + b).cwiseMax(0.0));
    }
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(out.feats.value().at(i, k), best[k], 1e-10);
  }
  EXPECT_THROW(flow_embedding(block, CloudBatch{{p1}, g.constant(f1)},
                              CloudBatch{{p2.topRows(2)}, g.constant(Tensor({2, 2}))}, LayerOptions{}),
               ShapeError);
}

TEST(RegNet, IdenticalFramesSelfMatch) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  PointsD p(40, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  const auto nn = knn_brute_force(p, p, 10);
  for (int i = 0; i < 40; ++i) EXPECT_EQ(nn[static_cast<std::size_t>(i)][0], i);
  Graph g;
  const Tensor f = testing::random_tensor(rng, {40, 5}, 0.1, 1.0);
  const Var c = ad::row_cosine(g.constant(f), g.constant(f));
  for (int i = 0; i < 40; ++i) EXPECT_NEAR(c.value()[static_cast<std::size_t>(i)], 1.0, 1e-12);
}

TEST(RegNet, MiniatureEndToEndGradient) {
  RegNetConfig cfg = RegNetConfig::miniature();
  cfg.init_seed = 7;
  RegNet net(cfg);
  std::mt19937_64 rng(8);
  const FramePair a = random_pair(rng, cfg), b = random_pair(rng, cfg);
  const std::vector<const FramePair*> batch{&a, &b};
  const auto loss = [&](Graph& g) {
    ForwardOptions opt;
    opt.mode = ad::Mode::kTrain;
    opt.dropout = false;
    opt.update_bn_stats = false;
    const auto out = net.forward(g, batch, opt);
    return testing::weighted_sum(ad::concat_cols({out.rot, out.trans}));
  };
  EXPECT_LE(testing::param_grad_check(net.params(), loss), 1e-4);
}

TEST(RegNet, PermutationInvariance) {
  RegNetConfig cfg = RegNetConfig::config_8k4k();
  cfg.n_nonground = 1600;
  cfg.n_ground = 800;
  cfg.nonground[0].n_out = 600;
  cfg.nonground[1].n_out = 300;
  cfg.ground.n_out = 100;
  cfg.final_sa.n_out = 80;
  RegNet net(cfg);
  std::mt19937_64 rng(9);
  const FramePair pair = random_pair(rng, cfg);
  FramePair shuffled = pair;
  for (PointCloud* c : {&shuffled.source, &shuffled.target}) {
    std::vector<int> perm(c->size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    PointCloud copy = *c;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      c->positions.row(static_cast<Eigen::Index>(i)) = copy.positions.row(perm[i]);
      c->is_ground[i] = copy.is_ground[static_cast<std::size_t>(perm[i])];
    }
  }
  for (ad::Mode mode : {ad::Mode::kInfer, ad::Mode::kTrain}) {
    ForwardOptions opt;
    opt.mode = mode;
    opt.dropout = false;
    opt.update_bn_stats = false;
    Graph g1, g2;
    const FramePair* p1 = &pair;
    const FramePair* p2 = &shuffled;
    const auto o1 = outputs(net.forward(g1, std::span<const FramePair* const>(&p1, 1), opt));
    const auto o2 = outputs(net.forward(g2, std::span<const FramePair* const>(&p2, 1), opt));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(o1[i], o2[i], 1e-9);
  }
}

TEST(RegNet, SiameseBranchesShareWeights) {
  RegNetConfig cfg = RegNetConfig::miniature();
  RegNet net(cfg);
  std::mt19937_64 rng(10);
  const FramePair pair = random_pair(rng, cfg);
  FramePair swapped = pair;
  std::swap(swapped.source, swapped.target);
  const TapFeatures t1 = net.taps(pair), t2 = net.taps(swapped);
  EXPECT_EQ(t1.pref[0].values().size(), t2.pref[1].values().size());
  for (std::size_t i = 0; i < t1.pref[0].size(); ++i) {
    EXPECT_EQ(t1.pref[0][i], t2.pref[1][i]);
    EXPECT_EQ(t1.pref[1][i], t2.pref[0][i]);
  }
}

TEST(RegNet, FullSizeForwardShapes) {
  SyntheticConfig sc;
  sc.n_frames = 2;
  sc.points_per_scan = 30000;
  sc.seed = 3;
  const auto seq = make_synthetic_sequence(sc);
  SamplerConfig sampler;
  FramePair pair;
  pair.source = sample_frame(seq.scans[0], sampler);
  pair.target = sample_frame(seq.scans[1], sampler);
  RegNet net(RegNetConfig::config_8k4k());
  const TapFeatures taps = net.taps(pair);
  for (int f = 0; f < 2; ++f) {
    EXPECT_EQ(taps.pref[static_cast<std::size_t>(f)].shape(), (std::vector<int>{1200, 128}));
    EXPECT_EQ(taps.pref_positions[static_cast<std::size_t>(f)].rows(), 1200);
  }
  EXPECT_EQ(taps.posf.shape(), (std::vector<int>{1200, 128}));
  EXPECT_EQ(taps.fclf.size(), 19200u);
  const auto pred = net.predict(pair);
  for (double v : pred) EXPECT_TRUE(std::isfinite(v));
}

TEST(RegNet, DropoutNeedsRngAndInferenceIsDeterministic) {
  RegNetConfig cfg = RegNetConfig::miniature();
  RegNet net(cfg);
  std::mt19937_64 rng(11);
  const FramePair pair = random_pair(rng, cfg);
  EXPECT_EQ(net.predict(pair), net.predict(pair));
  Graph g;
  const FramePair* p = &pair;
  ForwardOptions opt;
  opt.mode = ad::Mode::kTrain;
  const std::vector<const FramePair*> batch{p, p};
  EXPECT_THROW(net.forward(g, batch, opt), ConfigError);
}

TEST(RegNet, CheckpointRestoresPredictions) {
  RegNetConfig cfg = RegNetConfig::miniature();
  cfg.init_seed = 1;
  RegNet a(cfg);
  std::mt19937_64 rng(12);
  const FramePair pair = random_pair(rng, cfg);
  const auto dir = testing::temp_dir("regnet_ckpt");
  write_tensor_file(dir / "m.pdtf", to_tensor_file(a.params(), nlohmann::json(cfg).dump()));
  const TensorFile f = read_tensor_file(dir / "m.pdtf");
  RegNetConfig cfg2 = nlohmann::json::parse(f.header).get<RegNetConfig>();
  cfg2.init_seed = 99;
  RegNet b(cfg2);
  EXPECT_NE(a.predict(pair), b.predict(pair));
  load_into(b.params(), f);
  EXPECT_EQ(a.predict(pair), b.predict(pair));
}

}  // namespace
}  // namespace podom
