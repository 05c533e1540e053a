#include <gtest/gtest.h>

#include <set>

#include "pfxd/denoiser.hpp"
#include "test_util.hpp"

using namespace pfxd;
using pfxd::testing::tiny_config;

namespace {

DenoiserModel<double> random_model(const DenoiserConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto m = DenoiserModel<double>::init(cfg, rng);
  // perturb everything so biases, norms and tables are all non-trivial
  m.params().visit([&](const std::string&, Mat<double>& p) { p += rng.normal_matrix<double>(p.rows(), p.cols(), 0.1); });
  return m;
}

}  // namespace

TEST(Denoiser, MapPrefixZeroWeightsGivesZero) {
  auto cfg = tiny_config();
  DenoiserModel<double> m(cfg, DenoiserParams<double>::zeros(cfg));
  Vec<double> feat = Vec<double>::Ones(cfg.feat_dim);
  Mat<double> p = m.map_prefix(feat);
  EXPECT_EQ(p.rows(), cfg.prefix_len);
  EXPECT_EQ(p.cols(), cfg.d2);
  EXPECT_EQ(p.norm(), 0.0);
}

TEST(Denoiser, MapPrefixHandComputedTwoByTwo) {
  DenoiserConfig cfg;
  cfg.d1 = 2;
  cfg.d2 = 2;
  cfg.k = 2;
  cfg.prefix_len = 1;
  cfg.layers = 0;
  cfg.heads = 1;
  cfg.feat_dim = 2;
  cfg.prefix_hidden = 2;
  auto p = DenoiserParams<double>::zeros(cfg);
  p.prefix_w1 = Mat<double>::Identity(2, 2);
  p.prefix_w2 << 2, 0, 0, 3;
  p.prefix_b2 << 0.5, -0.5;
  DenoiserModel<double> m(cfg, p);
  Vec<double> feat(2);
  feat << 0.3, -0.7;
  Mat<double> out = m.map_prefix(feat);
  // tanh(feat) . diag(2,3) + b2
  EXPECT_NEAR(out(0, 0), 2 * std::tanh(0.3) + 0.5, 1e-12);
  EXPECT_NEAR(out(0, 1), 3 * std::tanh(-0.7) - 0.5, 1e-12);
}

TEST(Denoiser, MapPrefixRejectsWrongWidth) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 1);
  try {
    m.map_prefix(Vec<double>::Ones(cfg.feat_dim + 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimMismatch);
  }
}

TEST(Denoiser, AssembleWithZeroTablesIsConcatenation) {
  auto cfg = tiny_config();
  DenoiserModel<double> m(cfg, DenoiserParams<double>::zeros(cfg));
  Rng rng(3);
  Mat<double> prefix = rng.normal_matrix<double>(cfg.prefix_len, cfg.d2);
  Mat<double> cap = rng.normal_matrix<double>(cfg.k, cfg.d2);
  Mat<double> seq = m.assemble_sequence(prefix, cap, 7);
  ASSERT_EQ(seq.rows(), cfg.prefix_len + cfg.k);
  EXPECT_EQ((seq.topRows(cfg.prefix_len) - prefix).norm(), 0.0);
  EXPECT_EQ((seq.bottomRows(cfg.k) - cap).norm(), 0.0);
}

TEST(Denoiser, AssembleSwapPermutesExactlyThoseRows) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 4);
  Rng rng(5);
  Mat<double> prefix = rng.normal_matrix<double>(cfg.prefix_len, cfg.d2);
  Mat<double> cap = rng.normal_matrix<double>(cfg.k, cfg.d2);
  Mat<double> swapped = cap;
  swapped.row(0).swap(swapped.row(2));
  Mat<double> a = m.assemble_sequence(prefix, cap, 9);
  Mat<double> b = m.assemble_sequence(prefix, swapped, 9);
  const int l = cfg.prefix_len;
  // the per-position additive terms are unchanged by the swap
  Mat<double> added_a = a.bottomRows(cfg.k) - cap;
  Mat<double> added_b = b.bottomRows(cfg.k) - swapped;
  EXPECT_LT((added_a - added_b).norm(), 1e-12);
  EXPECT_LT((b.row(l + 0) - added_b.row(0) - a.row(l + 2) + added_a.row(2)).norm(), 1e-12);
  EXPECT_LT((b.row(l + 1) - a.row(l + 1)).norm(), 1e-12);
  EXPECT_LT((b.topRows(l) - a.topRows(l)).norm(), 1e-12);
}

TEST(Denoiser, ZeroTransformerReducesToResidualPath) {
  DenoiserConfig cfg;
  cfg.d1 = 2;
  cfg.d2 = 2;
  cfg.k = 2;
  cfg.prefix_len = 1;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.feat_dim = 2;
  cfg.prefix_hidden = 2;
  auto p = DenoiserParams<double>::zeros(cfg);
  p.up_w << 1, 2, 0, 1;
  p.up_b << 0.1, 0.0;
  p.down_w << 1, 0, 1, 1;
  p.pos_emb << 0, 0, 0.5, 0, 0, 0.25;
  p.type_emb << 9, 9, 0, -1;
  DenoiserModel<double> m(cfg, p);
  Mat<double> x(2, 2);
  x << 1, 1, 2, -1;
  Vec<double> feat = Vec<double>::Ones(2);
  Mat<double> out = m.denoise(x, 3, feat);
  // time table is zero-weight so only pos/type terms remain:
  // token 0: up = [1.1, 3] + pos[1] + type[1] = [1.6, 2]; down = [3.6, 2]
  // token 1: up = [2.1, 3] + pos[2] + type[1] = [2.1, 2.25]; down = [4.35, 2.25]
  EXPECT_NEAR(out(0, 0), 3.6, 1e-12);
  EXPECT_NEAR(out(0, 1), 2.0, 1e-12);
  EXPECT_NEAR(out(1, 0), 4.35, 1e-12);
  EXPECT_NEAR(out(1, 1), 2.25, 1e-12);
}

TEST(Denoiser, ShapeContractSweep) {
  for (int k : {3, 8, 16})
    for (int d1 : {4, 48})
      for (int l : {1, 4}) {
        DenoiserConfig cfg;
        cfg.k = k;
        cfg.d1 = d1;
        cfg.prefix_len = l;
        cfg.d2 = 16;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.feat_dim = 6;
        Rng rng(static_cast<std::uint64_t>(k * 100 + d1 + l));
        auto m = DenoiserModel<float>::init(cfg, rng);
        Mat<float> x = rng.normal_matrix<float>(k, d1);
        Vec<float> feat = rng.normal_matrix<float>(6, 1);
        Mat<float> out = m.denoise(x, 5, feat);
        EXPECT_EQ(out.rows(), k);
        EXPECT_EQ(out.cols(), d1);
      }
}

TEST(Denoiser, AttentionRowsAreConvex) {
  DenoiserConfig cfg;
  cfg.layers = 2;
  cfg.d2 = 32;
  cfg.heads = 4;
  Rng rng(11);
  auto m = DenoiserModel<float>::init(cfg, rng);
  const int B = 3;
  Mat<float> x = rng.normal_matrix<float>(B * cfg.k, cfg.d1);
  Mat<float> feat = rng.normal_matrix<float>(B, cfg.feat_dim);
  std::vector<int> ts = {1, 500, 1000};
  DenoiserCache<float> cache;
  m.forward(x, ts, feat, &cache);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const auto& p = DenoiserModel<float>::attention_probs(cache, layer);
    ASSERT_EQ(p.rows(), B * cfg.heads * cfg.seq_len());
    EXPECT_GE(p.minCoeff(), 0.0f);
    for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0f, 1e-5f);
  }
}

TEST(Denoiser, FeatureInfluencesCaptionRows) {
  auto cfg = tiny_config();
  auto m = random_model(cfg, 12);
  Rng rng(13);
  Mat<double> x = rng.normal_matrix<double>(cfg.k, cfg.d1);
  Vec<double> feat = rng.normal_matrix<double>(cfg.feat_dim, 1);
  double max_jac = 0.0;
  for (int j = 0; j < cfg.feat_dim; ++j) {
    Vec<double> up = feat, down = feat;
    up(j) += 1e-5;
    down(j) -= 1e-5;
    Mat<double> col = (m.denoise(x, 4, up) - m.denoise(x, 4, down)) / 2e-5;
    max_jac = std::max(max_jac, col.cwiseAbs().maxCoeff());
  }
  EXPECT_GT(max_jac, 1e-4);
}

TEST(Denoiser, BatchedForwardIsDeterministic) {
  DenoiserConfig cfg;
  Rng rng(21);
  auto m = DenoiserModel<float>::init(cfg, rng);
  Mat<float> x = rng.normal_matrix<float>(2 * cfg.k, cfg.d1);
  Mat<float> feat = rng.normal_matrix<float>(2, cfg.feat_dim);
  std::vector<int> ts = {3, 900};
  Mat<float> a = m.forward(x, ts, feat, nullptr);
  Mat<float> b = m.forward(x, ts, feat, nullptr);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())), 0);
}

// Weighted sum of outputs as the loss; every parameter and the input are
// checked against central differences.
TEST(Denoiser, GradientsMatchFiniteDifferences) {
  auto cfg = tiny_config();
  auto model = random_model(cfg, 31);
  Rng rng(32);
  const int B = 2;
  Mat<double> x = rng.normal_matrix<double>(B * cfg.k, cfg.d1);
  Mat<double> feat = rng.normal_matrix<double>(B, cfg.feat_dim);
  Mat<double> w = rng.normal_matrix<double>(B * cfg.k, cfg.d1);
  std::vector<int> ts = {2, 17};
  auto loss = [&]() { return (model.forward(x, ts, feat, nullptr).array() * w.array()).sum(); };

  DenoiserCache<double> cache;
  model.forward(x, ts, feat, &cache);
  auto grads = DenoiserParams<double>::zeros(cfg);
  Mat<double> dx;
  model.backward(cache, w, grads, &dx);

  auto params = pfxd::testing::flat_params(model.params());
  auto gflat = pfxd::testing::flat_params(grads);
  ASSERT_EQ(params.size(), gflat.size());
  std::set<std::string> tensors_hit;
  int checked = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double fd = pfxd::testing::central_difference(loss, params[i].second, 1e-4);
    EXPECT_LT(pfxd::testing::relative_error(fd, *gflat[i].second), 1e-3) << params[i].first;
    ++checked;
  }
  EXPECT_GE(checked, 100);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double fd = pfxd::testing::central_difference(loss, x.data() + i, 1e-4);
    EXPECT_LT(pfxd::testing::relative_error(fd, dx.data()[i]), 1e-3) << "x[" << i << "]";
  }
}

TEST(Denoiser, UnreachableParameterHasZeroGradient) {
  auto cfg = tiny_config();
  auto model = random_model(cfg, 41);
  model.params().down_w.setZero();
  Rng rng(42);
  Mat<double> x = rng.normal_matrix<double>(cfg.k, cfg.d1);
  Mat<double> feat = rng.normal_matrix<double>(1, cfg.feat_dim);
  int ts[] = {5};
  DenoiserCache<double> cache;
  model.forward(x, ts, feat, &cache);
  auto grads = DenoiserParams<double>::zeros(cfg);
  model.backward(cache, Mat<double>::Ones(cfg.k, cfg.d1), grads, nullptr);
  // down_w is zero so nothing upstream of it receives gradient
  EXPECT_EQ(grads.up_w.norm(), 0.0);
  EXPECT_EQ(grads.prefix_w1.norm(), 0.0);
  EXPECT_EQ(grads.layers[0].qkv_w.norm(), 0.0);
  EXPECT_GT(grads.down_w.norm(), 0.0);
  EXPECT_GT(grads.down_b.norm(), 0.0);
}
