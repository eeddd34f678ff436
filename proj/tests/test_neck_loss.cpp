#include <cmath>
#include <numeric>

#include "doctest.h"
#include "protoprompt/neck_loss.hpp"
#include "test_helpers.hpp"

using namespace protoprompt;

namespace {

struct RandomBatch {
  LossBatch batch;
};

LossBatch random_batch(Rng& rng, std::size_t n, std::size_t dim, std::size_t anchors, double tau,
                       int num_classes = 3) {
  LossBatch b;
  b.temperature = tau;
  for (std::size_t i = 0; i < n; ++i) {
    b.embeddings.push_back(testing::random_unit(dim, rng));
    b.labels.push_back(static_cast<ClassId>(rng.below(num_classes)));
  }
  // Guarantee at least one positive pair.
  b.labels[1] = b.labels[0];
  for (std::size_t a = 0; a < anchors; ++a) {
    b.anchors.push_back(testing::random_unit(dim, rng));
    b.anchor_labels.push_back(100 + static_cast<ClassId>(a));
  }
  return b;
}

double dotv(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Explicit-loop loss without the log-sum-exp trick.
double loop_cpl(const LossBatch& b) {
  double total = 0.0;
  int count = 0;
  const std::size_t n = b.embeddings.size();
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && b.labels[j] != b.labels[i]) denom += std::exp(dotv(b.embeddings[i], b.embeddings[j]) / b.temperature);
    for (const auto& u : b.anchors) denom += std::exp(dotv(b.embeddings[i], u) / b.temperature);
    double li = 0.0;
    int pos = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || b.labels[p] != b.labels[i]) continue;
      li += -std::log(std::exp(dotv(b.embeddings[i], b.embeddings[p]) / b.temperature) / denom);
      ++pos;
    }
    if (pos == 0) continue;
    total += li / pos;
    ++count;
  }
  return total / count;
}

// Standard supervised contrastive loss over the batch: every other sample in
// the denominator.
double loop_supcon(const LossBatch& b) {
  double total = 0.0;
  int count = 0;
  const std::size_t n = b.embeddings.size();
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dotv(b.embeddings[i], b.embeddings[a]) / b.temperature);
    double li = 0.0;
    int pos = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || b.labels[p] != b.labels[i]) continue;
      li += -std::log(std::exp(dotv(b.embeddings[i], b.embeddings[p]) / b.temperature) / denom);
      ++pos;
    }
    if (pos == 0) continue;
    total += li / pos;
    ++count;
  }
  return total / count;
}

Matrix sims_of(const LossBatch& b) {
  Matrix m(b.embeddings.size(), b.embeddings.size());
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = dotv(b.embeddings[i], b.embeddings[j]);
  return m;
}

Matrix anchor_sims_of(const LossBatch& b) {
  Matrix m(b.embeddings.size(), b.anchors.size());
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = dotv(b.embeddings[i], b.anchors[j]);
  return m;
}

}  // namespace

TEST_CASE("cpl closed form: zero similarities, one class without partners") {
  Matrix sims(3, 3);
  const std::vector<ClassId> labels{0, 0, 1};
  CHECK(similarity_loss(sims, Matrix(3, 0), labels, 1.0, LossVariant::Cpl) == 0.0);
  const auto g = similarity_loss_grads(sims, Matrix(3, 0), labels, 1.0, LossVariant::Cpl);
  CHECK(g.skipped == std::vector<bool>{false, false, true});
}

TEST_CASE("cpl closed form: single positive and single negative") {
  // Sample 0 pairs with 1 (positive) against 2 (negative).
  Matrix sims(3, 3);
  sims(0, 1) = 0.9;
  sims(0, 2) = 0.1;
  const std::vector<ClassId> labels{0, 0, 1};
  const auto grads = similarity_loss_grads(sims, Matrix(3, 0), labels, 0.6, LossVariant::Cpl);
  // Evaluate L_0 alone by differencing the mean with sample 1's loss.
  Matrix only0 = sims;
  const double total = similarity_loss(sims, Matrix(3, 0), labels, 0.6, LossVariant::Cpl) * 2.0;
  Matrix s1(3, 3);
  s1(1, 0) = sims(1, 0);
  s1(1, 2) = sims(1, 2);
  const double l1 = -(s1(1, 0) - s1(1, 2)) / 0.6;
  CHECK(total - l1 == doctest::Approx(-4.0 / 3.0).epsilon(1e-12));
  CHECK(grads.batch(0, 1) == doctest::Approx(-1.0 / 0.6));
  CHECK(grads.batch(0, 2) == doctest::Approx(1.0 / 0.6));  // softmax of one element
}

TEST_CASE("positive gradients are -1/(tau |P(i)|)") {
  Matrix sims(3, 3);
  const std::vector<ClassId> labels{0, 0, 0};
  Matrix anchors(3, 1);
  const auto g = similarity_loss_grads(sims, anchors, labels, 0.6, LossVariant::Cpl);
  CHECK(g.batch(0, 1) == doctest::Approx(-0.8333333333333334).epsilon(1e-14));
  CHECK(g.batch(0, 2) == doctest::Approx(-0.8333333333333334).epsilon(1e-14));
}

TEST_CASE("cpl matches an explicit-loop reference") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_batch(rng, 8, 6, 2, 0.6);
    CHECK(std::abs(cpl_loss(b) - loop_cpl(b)) <= 1e-10);
  }
}

TEST_CASE("anchorless samples raise") {
  LossBatch b;
  b.temperature = 0.6;
  b.embeddings = {Vector{1, 0}, Vector{0, 1}};
  b.labels = {3, 3};
  try {
    cpl_loss(b);
    FAIL("expected AnchorlessSample");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::AnchorlessSample);
  }
  b.anchors = {Vector{1, 0}};
  CHECK_NOTHROW(cpl_loss(b));
}

TEST_CASE("anchor classes must be disjoint from batch labels") {
  LossBatch b;
  b.embeddings = {Vector{1, 0}, Vector{0, 1}, Vector{1, 1}};
  b.labels = {1, 1, 2};
  b.anchors = {Vector{1, 0}};
  b.anchor_labels = {2};
  CHECK_THROWS_AS(cpl_loss(b), Error);
}

TEST_CASE("gradient invariants over random batches") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const double tau = std::array{0.2, 0.6, 1.0}[trial % 3];
    const auto b = random_batch(rng, 2 + rng.below(15), 1 + rng.below(8), 1 + rng.below(4), tau);
    const auto g = cpl_grad_similarities(b);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      if (g.skipped[i]) continue;
      std::size_t npos = 0;
      for (std::size_t j = 0; j < b.labels.size(); ++j)
        if (j != i && b.labels[j] == b.labels[i]) ++npos;
      double neg_sum = 0.0;
      for (std::size_t j = 0; j < b.labels.size(); ++j) {
        if (j == i) continue;
        if (b.labels[j] == b.labels[i]) {
          CHECK(std::abs(g.batch(i, j) - (-1.0 / (tau * npos))) <= 1e-12);
        } else {
          CHECK(g.batch(i, j) >= 0.0);
          neg_sum += g.batch(i, j);
        }
      }
      for (std::size_t a = 0; a < b.anchors.size(); ++a) neg_sum += g.anchors(i, a);
      CHECK(std::abs(neg_sum - 1.0 / tau) <= 1e-10);
    }
  }
}

TEST_CASE("similarity gradients match central finite differences") {
  Rng rng(43);
  const double h = 1e-6;
  for (auto variant : {LossVariant::Cpl, LossVariant::CplWithUniform, LossVariant::CplNoProto, LossVariant::SupCon}) {
    for (int trial = 0; trial < 5; ++trial) {
      const auto b = random_batch(rng, 8, 5, 2, 0.6);
      Matrix s = sims_of(b), a = anchor_sims_of(b);
      const auto g = similarity_loss_grads(s, a, b.labels, 0.6, variant);
      std::size_t contributing = 0;
      for (bool sk : g.skipped) contributing += sk ? 0 : 1;
      auto check_entry = [&](Matrix& m, std::size_t i, std::size_t j, double analytic) {
        const double orig = m(i, j);
        m(i, j) = orig + h;
        const double fp = similarity_loss(s, a, b.labels, 0.6, variant);
        m(i, j) = orig - h;
        const double fm = similarity_loss(s, a, b.labels, 0.6, variant);
        m(i, j) = orig;
        const double fd = (fp - fm) / (2 * h);
        const double an = analytic / static_cast<double>(contributing);
        CHECK(std::abs(an - fd) <= 1e-6 * std::max(std::abs(fd), 1e-2));
      };
      for (std::size_t i = 0; i < s.rows; ++i) {
        for (std::size_t j = 0; j < s.cols; ++j)
          if (i != j) check_entry(s, i, j, g.batch(i, j));
        for (std::size_t k = 0; k < a.cols; ++k) check_entry(a, i, k, g.anchors(i, k));
      }
    }
  }
}

TEST_CASE("positive similarities never enter the cpl denominator") {
  Rng rng(44);
  for (int trial = 0; trial < 30; ++trial) {
    const auto b = random_batch(rng, 6, 4, 1, 0.6, 2);
    Matrix s = sims_of(b), a = anchor_sims_of(b);
    const auto g = similarity_loss_grads(s, a, b.labels, 0.6, LossVariant::Cpl);
    std::size_t contributing = 0;
    for (bool sk : g.skipped) contributing += sk ? 0 : 1;
    const double base = similarity_loss(s, a, b.labels, 0.6, LossVariant::Cpl);
    // The loss is exactly affine in a positive similarity with slope -1/(tau |P| N).
    for (double delta : {0.5, -1.5}) {
      Matrix moved = s;
      moved(0, 1) += delta;
      std::size_t npos = 0;
      for (std::size_t j = 1; j < b.labels.size(); ++j) npos += b.labels[j] == b.labels[0];
      const double expected = base - delta / (0.6 * npos * contributing);
      CHECK(std::abs(similarity_loss(moved, a, b.labels, 0.6, LossVariant::Cpl) - expected) <= 1e-12);
    }
  }
}

TEST_CASE("adding an anchor never decreases cpl") {
  Rng rng(45);
  for (int trial = 0; trial < 50; ++trial) {
    auto b = random_batch(rng, 6, 4, rng.below(3), 0.6);
    const double before = cpl_loss(b);
    b.anchors.push_back(testing::random_unit(4, rng));
    b.anchor_labels.push_back(999);
    CHECK(cpl_loss(b) >= before);
  }
}

TEST_CASE("variant identities") {
  Rng rng(46);
  for (int trial = 0; trial < 100; ++trial) {
    auto b = random_batch(rng, 8, 5, rng.below(3), 0.6);
    const double cpl = variant_loss(b, LossVariant::Cpl).value;
    CHECK(variant_loss(b, LossVariant::CplWithUniform).value >= cpl);
    auto empty = b;
    empty.anchors.clear();
    empty.anchor_labels.clear();
    CHECK(variant_loss(empty, LossVariant::CplNoProto).value == variant_loss(empty, LossVariant::Cpl).value);
    CHECK(variant_loss(b, LossVariant::CplNoProto).value == variant_loss(empty, LossVariant::Cpl).value);
  }
}

TEST_CASE("supcon matches the standard formula") {
  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = random_batch(rng, 8, 6, 2, 0.6);
    CHECK(std::abs(variant_loss(b, LossVariant::SupCon).value - loop_supcon(b)) <= 1e-10);
  }
}

TEST_CASE("cross-entropy needs a head") {
  Rng rng(48);
  const auto b = random_batch(rng, 4, 3, 0, 0.6);
  try {
    variant_loss(b, LossVariant::CrossEntropy);
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConfigError);
  }
  const auto head = init_linear_head(3, {0, 1, 2}, rng);
  auto grads = head;
  std::fill(grads.weight.data.begin(), grads.weight.data.end(), 0.0);
  std::fill(grads.bias.begin(), grads.bias.end(), 0.0);
  const auto r = variant_loss(b, LossVariant::CrossEntropy, &head, &grads);
  CHECK(r.value > 0.0);
  // Embedding gradient vs finite differences.
  const double h = 1e-6;
  auto shifted = b;
  shifted.embeddings[0][1] += h;
  const double fp = variant_loss(shifted, LossVariant::CrossEntropy, &head).value;
  shifted.embeddings[0][1] -= 2 * h;
  const double fm = variant_loss(shifted, LossVariant::CrossEntropy, &head).value;
  CHECK(std::abs((fp - fm) / (2 * h) - r.grad_embeddings[0][1]) <= 1e-6);
  CHECK(parse_loss_variant("ce") == LossVariant::CrossEntropy);
  CHECK_THROWS_AS(parse_loss_variant("triplet"), Error);
}

TEST_CASE("embedding gradients of every variant match finite differences") {
  Rng rng(49);
  const double h = 1e-6;
  for (auto variant : {LossVariant::Cpl, LossVariant::CplWithUniform, LossVariant::CplNoProto, LossVariant::SupCon}) {
    auto b = random_batch(rng, 6, 4, 2, 0.6);
    const auto r = variant_loss(b, variant);
    for (std::size_t i = 0; i < b.embeddings.size(); ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        const double orig = b.embeddings[i][c];
        b.embeddings[i][c] = orig + h;
        const double fp = variant_loss(b, variant).value;
        b.embeddings[i][c] = orig - h;
        const double fm = variant_loss(b, variant).value;
        b.embeddings[i][c] = orig;
        CHECK(std::abs((fp - fm) / (2 * h) - r.grad_embeddings[i][c]) <= 1e-6);
      }
    }
  }
}

TEST_CASE("identity neck reduces to normalization") {
  const auto neck = identity_neck(3);
  const Vector x{3.0, 0.0, 4.0};
  const auto z = neck_forward(neck, x);
  CHECK(z == l2_normalize(x));
  CHECK(neck_forward(neck, x) == z);
  CHECK_THROWS_AS(neck_forward(neck, Vector{1.0, 2.0}), Error);
}

TEST_CASE("neck gradients match finite differences") {
  Rng rng(50);
  const auto neck0 = init_neck(8, NeckConfig{}, rng);
  REQUIRE(neck0.weights.size() == 3);
  CHECK(neck0.output_dim() == 8);
  CHECK(neck0.weights[0].cols == 32);
  auto neck = neck0;
  const Vector x = testing::random_vector(8, rng);
  const Vector gout = testing::random_vector(8, rng);
  NeckTrace trace;
  neck_forward(neck, x, &trace);
  auto grads = zero_grads_like(neck);
  const Vector gin = neck_backward(neck, trace, gout, grads);
  auto objective = [&] { return dotv(neck_forward(neck, x), gout); };
  const double h = 1e-5;
  for (std::size_t l = 0; l < 3; ++l) {
    for (int k = 0; k < 10; ++k) {
      const std::size_t i = rng.below(neck.weights[l].size());
      double& w = neck.weights[l].data[i];
      const double orig = w;
      w = orig + h;
      const double fp = objective();
      w = orig - h;
      const double fm = objective();
      w = orig;
      const double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(grads.weights[l].data[i] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
    }
    for (std::size_t j = 0; j < neck.biases[l].size(); j += 7) {
      double& b = neck.biases[l][j];
      const double orig = b;
      b = orig + h;
      const double fp = objective();
      b = orig - h;
      const double fm = objective();
      b = orig;
      const double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(grads.biases[l][j] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
    }
  }
  for (std::size_t c = 0; c < 8; ++c) {
    Vector xp = x, xm = x;
    xp[c] += h;
    xm[c] -= h;
    const double fd = (dotv(neck_forward(neck, xp), gout) - dotv(neck_forward(neck, xm), gout)) / (2 * h);
    CHECK(std::abs(gin[c] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
  }
}

TEST_CASE("cpl_backward: zero gradients and per-sample linearity") {
  BackboneConfig cfg{2, 8, 2, 4, 16};
  const auto bb = init_backbone(cfg, 5);
  Rng rng(51);
  const auto neck = init_neck(8, NeckConfig{2, 16}, rng);
  const auto prompts = init_prompts(cfg, 1, 0, rng);
  std::vector<SampleTrace> traces(2);
  for (auto& t : traces) {
    const auto e = encode(bb, testing::random_matrix(4, 8, rng), &prompts, &t.backbone);
    neck_forward(neck, e, &t.neck);
  }
  const std::vector<Vector> zeros(2, Vector(8, 0.0));
  const auto z = cpl_backward(bb, neck, prompts, traces, zeros);
  for (const auto& w : z.neck.weights)
    for (double v : w.data) CHECK(v == 0.0);
  for (const auto& p : z.prompts)
    for (double v : p.data) CHECK(v == 0.0);

  const std::vector<Vector> g{testing::random_vector(8, rng), testing::random_vector(8, rng)};
  const auto both = cpl_backward(bb, neck, prompts, traces, g);
  const auto first = cpl_backward(bb, neck, prompts, std::span(traces).first(1), std::span(g).first(1));
  const auto second = cpl_backward(bb, neck, prompts, std::span(traces).last(1), std::span(g).last(1));
  for (std::size_t l = 0; l < both.prompts.size(); ++l)
    for (std::size_t i = 0; i < both.prompts[l].size(); ++i)
      CHECK(std::abs(both.prompts[l].data[i] - first.prompts[l].data[i] - second.prompts[l].data[i]) <= 1e-12);
  CHECK_THROWS_AS(cpl_backward(bb, neck, prompts, traces, std::span(g).first(1)), Error);
}

TEST_CASE("augment_prototype") {
  Rng rng(52);
  const Vector mu = l2_normalize(Vector{1.0, 2.0, -0.5, 0.3});
  CHECK(augment_prototype(mu, 0.0, rng) == l2_normalize(mu));
  CHECK_THROWS_AS(perturb_prototype(mu, -1.0, rng), Error);

  const double m = 0.2;
  const int draws = 10000;
  Vector mean(4, 0.0), sq(4, 0.0);
  for (int i = 0; i < draws; ++i) {
    const auto p = perturb_prototype(mu, m, rng);
    for (std::size_t c = 0; c < 4; ++c) {
      mean[c] += p[c];
      sq[c] += (p[c] - mu[c]) * (p[c] - mu[c]);
    }
  }
  for (std::size_t c = 0; c < 4; ++c) {
    mean[c] /= draws;
    CHECK(std::abs(mean[c] - mu[c]) <= 3.0 * m / std::sqrt(double(draws)));
    const double var = sq[c] / draws;
    CHECK(std::abs(var - m * m) <= 0.05 * m * m);
  }
  const auto a = augment_prototype(mu, m, rng);
  CHECK(std::abs(norm(a) - 1.0) <= 1e-12);
}

TEST_CASE("end-to-end prompt and neck gradients match finite differences") {
  BackboneConfig cfg{2, 8, 2, 4, 16};
  const auto bb = init_backbone(cfg, 9);
  Rng rng(53);
  auto neck = init_neck(8, NeckConfig{2, 16}, rng);
  auto prompts = init_prompts(cfg, 2, 0, rng);
  std::vector<Matrix> xs;
  for (int i = 0; i < 5; ++i) xs.push_back(testing::random_matrix(4, 8, rng));
  const std::vector<ClassId> labels{0, 0, 1, 1, 2};
  const std::vector<Vector> anchors{testing::random_unit(8, rng)};

  auto loss_of = [&](std::vector<SampleTrace>* traces) {
    LossBatch b;
    b.labels = labels;
    b.anchors = anchors;
    b.temperature = 0.6;
    if (traces) traces->assign(xs.size(), {});
    for (std::size_t i = 0; i < xs.size(); ++i) {
      SampleTrace* t = traces ? &(*traces)[i] : nullptr;
      const auto e = encode(bb, xs[i], &prompts, t ? &t->backbone : nullptr);
      b.embeddings.push_back(neck_forward(neck, e, t ? &t->neck : nullptr));
    }
    return b;
  };
  std::vector<SampleTrace> traces;
  const auto batch = loss_of(&traces);
  const auto r = variant_loss(batch, LossVariant::Cpl);
  const auto g = cpl_backward(bb, neck, prompts, traces, r.grad_embeddings);
  auto value = [&] { return cpl_loss(loss_of(nullptr)); };

  const double h = 1e-5;
  for (std::size_t l = 0; l < prompts.layers.size(); ++l) {
    for (std::size_t i = 0; i < prompts.layers[l].size(); i += 3) {
      double& p = prompts.layers[l].data[i];
      const double orig = p;
      p = orig + h;
      const double fp = value();
      p = orig - h;
      const double fm = value();
      p = orig;
      const double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(g.prompts[l].data[i] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
    }
  }
  for (std::size_t l = 0; l < neck.weights.size(); ++l) {
    for (std::size_t i = 0; i < neck.weights[l].size(); i += 11) {
      double& w = neck.weights[l].data[i];
      const double orig = w;
      w = orig + h;
      const double fp = value();
      w = orig - h;
      const double fm = value();
      w = orig;
      const double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(g.neck.weights[l].data[i] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
    }
  }
}
