#include <numeric>

#include "doctest.h"
#include "orinorm/loss.hpp"
#include "orinorm/net.hpp"
#include "orinorm/synth.hpp"
#include "orinorm/train.hpp"
#include "gradcheck_suite.hpp"
#include "support.hpp"

using namespace orinorm;
using ad::Tensor;

namespace {

std::vector<Vec3> coords_of(const Tensor& t) {
  std::vector<Vec3> out(t.dim(0));
  const auto& v = t.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Vec3(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  return out;
}

// Permutation that maps each ring [counts[s+1], counts[s]) onto itself, so
// every prefix kept by the downsampling stages is preserved as a set.
std::vector<std::size_t> ring_permutation(std::size_t n, const std::vector<std::size_t>& counts,
                                          std::uint64_t seed) {
  std::vector<std::size_t> bounds{n};
  for (auto c : counts) bounds.push_back(c);
  bounds.push_back(0);
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
    std::shuffle(perm.begin() + static_cast<std::ptrdiff_t>(bounds[b]),
                 perm.begin() + static_cast<std::ptrdiff_t>(bounds[b + 1]), rng);
  }
  return perm;
}

}  // namespace

TEST_CASE("model config") {
  ModelConfig desk;
  CHECK(desk.head_points() == 76);
  CHECK(desk.stage_counts_p() == std::vector<std::size_t>{171, 114, 76, 76});
  CHECK(desk.stage_counts_d() == std::vector<std::size_t>{256, 128, 128});
  CHECK(downsample_count(256, 2.0 / 3.0) == 171);
  CHECK(downsample_count(9, 2.0 / 3.0) == 6);

  const auto j = desk.to_json();
  CHECK(ModelConfig::from_json(j).to_json() == j);

  ModelConfig bad = desk;
  bad.rho_p = {2.0 / 3.0, 0.0, 1.0, 1.0};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = desk;
  bad.hgif_scales = {32, 32};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = desk;
  bad.width = 0;
  CHECK_THROWS_AS(Model{bad}, std::invalid_argument);
  CHECK_NOTHROW(ModelConfig::toy().validate());
}

TEST_CASE("models are deterministic in their seed") {
  const Model a(ModelConfig::toy());
  const Model b(ModelConfig::toy());
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    CHECK(a.params()[i].tensor.values() == b.params()[i].tensor.values());
  }
  ModelConfig other = ModelConfig::toy();
  other.seed = 1;
  CHECK(Model(other).params()[0].tensor.values() != a.params()[0].tensor.values());
}

TEST_CASE("knn graph") {
  const auto pts = testing::random_points(20, 3);
  const auto g = knn_graph(pts, 5);
  CHECK(g.count == 20);
  CHECK(g.k == 5);
  for (std::size_t i = 0; i < 20; ++i) CHECK(g.indices[i * 5] == i);
  CHECK(knn_graph(pts, 50).k == 20);
}

TEST_CASE("qstn") {
  ParamList params;
  ParamBuilder pb(params, 1);
  const Qstn q = Qstn::create(pb, "q", 8);
  std::mt19937_64 rng(2);
  const Tensor pts = testing::random_tensor({20, 3}, rng, false);
  CHECK(q(pts).values() == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});

  testing::perturb(params, 3);
  for (int t = 0; t < 5; ++t) {
    const Mat3 r = to_mat3(q(testing::random_tensor({20, 3}, rng, false)));
    CHECK((r * r.transpose() - Mat3::Identity()).norm() < 1e-6);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-6);
  }
  CHECK(q(Tensor::zeros({20, 3})).values() == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
}

TEST_CASE("lfe block") {
  ParamList params;
  ParamBuilder pb(params, 5);
  const LfeBlock blk = LfeBlock::create(pb, "lfe", 8, 8);
  std::mt19937_64 rng(6);
  const auto pts = testing::random_points(16, 7);
  const NeighborGraph g = knn_graph(pts, 5);

  SUBCASE("identical features make the neighbor choice irrelevant") {
    const Tensor row = testing::random_tensor({1, 8}, rng, false);
    const Tensor f = ad::add(row, Tensor::zeros({16, 8}));
    NeighborGraph other = g;
    std::mt19937_64 r2(8);
    std::uniform_int_distribution<std::size_t> d(0, 15);
    for (auto& j : other.indices) j = d(r2);
    CHECK(blk(f, g).values() == blk(f, other).values());
  }
  SUBCASE("neighbor order within a list does not matter") {
    const Tensor f = testing::random_tensor({16, 8}, rng, false);
    NeighborGraph shuffled = g;
    for (std::size_t i = 0; i < 16; ++i) {
      auto first = shuffled.indices.begin() + static_cast<std::ptrdiff_t>(i * 5);
      std::reverse(first, first + 5);
    }
    const auto a = blk(f, g).values();
    const auto b = blk(f, shuffled).values();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
  }
  NeighborGraph wrong = g;
  wrong.count = 15;
  CHECK_THROWS_AS(blk(testing::random_tensor({16, 8}, rng, false), wrong), std::invalid_argument);
}

TEST_CASE("aff fusion") {
  ParamList params;
  ParamBuilder pb(params, 10);
  AffFuse aff = AffFuse::create(pb, "aff", 6);
  std::mt19937_64 rng(11);
  const Tensor f1 = testing::random_tensor({9, 6}, rng, false);
  const Tensor f2 = testing::random_tensor({9, 6}, rng, false);
  const Tensor phi3_f1 = ad::relu(aff.out(f1));

  const Tensor same = aff(f1, f1);
  for (std::size_t i = 0; i < same.numel(); ++i) {
    CHECK(std::abs(same.values()[i] - phi3_f1.values()[i]) < 1e-12);
  }

  for (auto& v : aff.gate.weight.mutable_values()) v = 0.0;
  for (auto& v : aff.gate.bias.mutable_values()) v = 60.0;
  const Tensor gates = aff.gate_values(f1, f2);
  for (double m : gates.values()) CHECK(m == 1.0);
  CHECK(aff(f1, f2).values() == phi3_f1.values());

  CHECK_THROWS_AS(aff(f1, testing::random_tensor({8, 6}, rng, false)), std::invalid_argument);
}

TEST_CASE("hgif stage") {
  const std::size_t w = 6, pos = 4;
  std::mt19937_64 rng(14);
  const auto pts = testing::random_points(24, 15);
  const Tensor pt = points_tensor(pts);

  SUBCASE("rho = 1 keeps every point; a zero mixing output leaves features unchanged") {
    ParamList params;
    ParamBuilder pb(params, 16);
    HgifStage st = HgifStage::create(pb, "h", w, pos, true, 1.0, 5);
    for (auto* d : {&st.phi4_local, &st.phi4_global}) {
      for (auto& v : d->weight.mutable_values()) v = 0.0;
      if (d->bias.defined()) {
        for (auto& v : d->bias.mutable_values()) v = 0.0;
      }
    }
    const Tensor f = testing::random_tensor({24, w}, rng, false);
    const HgifState out = st({f, pt, pts, {}, {}, {}});
    CHECK(out.features.dim(0) == 24);
    CHECK(out.features.values() == f.values());
    CHECK(out.globals.size() == 1);
  }
  SUBCASE("identical features silence the even-stage difference channel") {
    ParamList params;
    ParamBuilder pb(params, 17);
    HgifStage st = HgifStage::create(pb, "h", w, pos, false, 0.5, 5);
    const Tensor row = testing::random_tensor({1, w}, rng, false);
    const Tensor f = ad::add(row, Tensor::zeros({24, w}));
    const auto before = st({f, pt, pts, {}, {}, {}}).features.values();
    // Rows 6.. of phi7 act on f_i - f_j.
    auto& wv = st.phi7.weight.mutable_values();
    for (std::size_t r = 6; r < 6 + w; ++r) {
      for (std::size_t c = 0; c < w; ++c) wv[r * w + c] += 3.0;
    }
    CHECK(st({f, pt, pts, {}, {}, {}}).features.values() == before);
  }
  SUBCASE("two stages keep the nearest 18 then 14 points") {
    ParamList params;
    ParamBuilder pb(params, 18);
    const HgifStage s1 = HgifStage::create(pb, "h1", w, pos, true, 0.75, 6);
    const HgifStage s2 = HgifStage::create(pb, "h2", w, pos, false, 0.75, 4);
    const Tensor f = testing::random_tensor({24, w}, rng, false);
    const HgifState a = s1({f, pt, pts, {}, {}, {}});
    const HgifState b = s2(a);
    CHECK(a.features.dim(0) == 18);
    CHECK(b.features.dim(0) == 14);
    CHECK(b.globals.size() == 2);
  }
}

TEST_CASE("normal head") {
  ParamList params;
  ParamBuilder pb(params, 22);
  const NormalHead head = NormalHead::create(pb, "nh", 6, 8, 4);
  std::mt19937_64 rng(23);
  const auto pts = testing::random_points(12, 24);
  const Tensor pt = points_tensor(pts);

  for (int draw = 0; draw < 100; ++draw) {
    const Tensor fn = testing::random_tensor({8}, rng, false);
    const Tensor pos = head.project(fn);
    const Tensor neg = head.project(ad::scale(fn, -1.0));
    for (std::size_t i = 0; i < 3; ++i) CHECK(neg.values()[i] == -pos.values()[i]);
    CHECK(std::abs(to_vec3(pos).norm() - 1.0) < 1e-9);
  }

  const Tensor f = testing::random_tensor({12, 6}, rng, true);
  const NormalHeadOutput out = head(f, pt, pts);
  CHECK(out.w_hat.shape() == ad::Shape{12});
  double pool_sum = 0.0;
  for (double v : out.pool_weights.values()) pool_sum += v;
  CHECK(pool_sum == doctest::Approx(12.0).epsilon(1e-12));
  for (double v : out.w_hat.values()) CHECK((v > 0.0 && v < 1.0));

  CHECK_THROWS_AS(head(testing::random_tensor({3, 6}, rng, false), points_tensor(std::vector<Vec3>(pts.begin(), pts.begin() + 3)),
                       std::span<const Vec3>(pts.data(), 3)),
                  std::invalid_argument);
}

TEST_CASE("sign head") {
  ParamList params;
  ParamBuilder pb(params, 27);
  SignHead head = SignHead::create(pb, "sh", 6, 8, 3, 2);
  std::mt19937_64 rng(28);
  const Tensor fn = testing::random_tensor({8}, rng, false);
  const std::vector<Tensor> gp{testing::random_tensor({6}, rng, false),
                               testing::random_tensor({6}, rng, false),
                               testing::random_tensor({6}, rng, false)};
  const std::vector<Tensor> gd{testing::random_tensor({6}, rng, false),
                               testing::random_tensor({6}, rng, false)};

  SUBCASE("tied heads swap logits when the sign context flips") {
    head.minus_hidden = head.plus_hidden;
    head.minus_out = head.plus_out;
    const SignLogits a = head(fn, 1, gp, gd);
    const SignLogits b = head(fn, -1, gp, gd);
    CHECK(a.s_plus.item() == b.s_minus.item());
    CHECK(a.s_minus.item() == b.s_plus.item());
  }
  SUBCASE("zero output layers give probability one half") {
    for (auto* d : {&head.plus_out, &head.minus_out}) {
      for (auto& v : d->weight.mutable_values()) v = 0.0;
      for (auto& v : d->bias.mutable_values()) v = 0.0;
    }
    const SignLogits s = head(fn, 1, gp, gd);
    CHECK(ad::sigmoid(s.s_plus).item() == 0.5);
    CHECK(ad::sigmoid(s.s_minus).item() == 0.5);
  }
  SUBCASE("argument checks") {
    CHECK_FALSE(head(fn, 1, gp, gd, false).s_minus.defined());
    CHECK_THROWS_AS(head(fn, 0, gp, gd), std::invalid_argument);
    CHECK_THROWS_AS(head(fn, 1, {}, gd), std::invalid_argument);
  }
}

TEST_CASE("desk forward: shapes and permutation invariance") {
  const ModelConfig cfg;
  const Model model(cfg);
  const ForwardInput in = testing::sample_input(cfg, 30);
  ad::NoGradGuard guard;
  const ForwardOutput out = model.forward(in);
  CHECK(out.n_hat_u.shape() == ad::Shape{3});
  CHECK(out.s_plus.numel() == 1);
  CHECK(out.s_minus.numel() == 1);
  CHECK(out.w_hat.shape() == ad::Shape{76});
  CHECK(out.head_points.shape() == ad::Shape{76, 3});
  CHECK(std::abs(to_vec3(out.n_hat_u).norm() - 1.0) < 1e-9);
  CHECK(out.g_patch.size() == 4);
  CHECK(out.g_cloud.size() == 3);

  ForwardInput perm = in;
  const auto pp = ring_permutation(cfg.n_p, cfg.stage_counts_p(), 31);
  const auto pd = ring_permutation(cfg.n_d, cfg.stage_counts_d(), 32);
  for (std::size_t i = 0; i < cfg.n_p; ++i) perm.patch[i] = in.patch[pp[i]];
  for (std::size_t i = 0; i < cfg.n_d; ++i) perm.cloud[i] = in.cloud[pd[i]];
  const ForwardOutput po = model.forward(perm);
  CHECK((to_vec3(po.n_hat_u) - to_vec3(out.n_hat_u)).norm() < 1e-9);
  CHECK(std::abs(po.s_plus.item() - out.s_plus.item()) < 1e-9);

  ForwardInput short_in = in;
  short_in.patch.pop_back();
  CHECK_THROWS_AS(model.forward(short_in), std::invalid_argument);
}

TEST_CASE("finite-difference check on every block and the toy model") {
  auto cases = testing::block_gradient_cases();
  for (auto& c : testing::toy_gradient_cases()) cases.push_back(std::move(c));
  for (const auto& c : cases) {
    const auto r = c.run();
    INFO(c.name << ": max rel error " << r.max_rel_error << " at input " << r.worst_input << "["
                << r.worst_index << "] analytic " << r.analytic << " numeric " << r.numeric);
    CHECK(r.passed);
  }
}

TEST_CASE("sign context follows the initial normal") {
  const ModelConfig cfg = ModelConfig::toy();
  const Model model(cfg);
  ForwardInput in = testing::sample_input(cfg, 35);
  ad::NoGradGuard guard;
  const ForwardOutput a = model.forward(in);
  in.n_init = -in.n_init;
  const ForwardOutput b = model.forward(in);
  CHECK(a.sgn_mst == -b.sgn_mst);
  CHECK(a.n_hat_u.values() == b.n_hat_u.values());
  ForwardOptions off;
  off.use_mst_init = false;
  CHECK(model.forward(in, off).sgn_mst == 1);
}
