#include <doctest.h>

#include <cmath>

#include "fssi/episodic.hpp"
#include "fssi/identification.hpp"
#include "fssi/ops.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace fssi;
using fssi::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor eval(const std::function<Var(Tape&)>& f) {
  Tape tape(GradMode::kDisabled);
  return f(tape).value();
}

}  // namespace

TEST_CASE("depthwise then pointwise matches the composed loop oracles") {
  Rng rng(100);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(5), cout = 1 + rng.below(6);
    const std::size_t kh = 1 + 2 * rng.below(3), kw = 1 + 2 * rng.below(2);
    const std::size_t h = kh + rng.below(8), w = kw + rng.below(8);
    const std::size_t sh = 1 + rng.below(2), sw = 1 + rng.below(2);
    const std::size_t ph = rng.below(kh / 2 + 1), pw = rng.below(kw / 2 + 1);
    const Tensor x = random_tensor({n, c, h, w}, rng);
    const Tensor dk = random_tensor({c, kh, kw}, rng);
    const Tensor pk = random_tensor({cout, c}, rng);
    const Tensor got = eval([&](Tape& t) {
      return ops::conv_pointwise(ops::conv2d_depthwise(t.constant(x), t.constant(dk), {sh, sw, ph, pw}),
                                 t.constant(pk));
    });
    const Tensor want = oracle::conv_pointwise(oracle::conv_depthwise(x, dk, sh, sw, ph, pw), pk);
    CHECK(max_abs_diff(got, want) <= 1e-10);
  }
}

TEST_CASE("standard convolution matches the triple-loop oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(3), cin = 1 + rng.below(4), cout = 1 + rng.below(5);
    const std::size_t kh = 1 + 2 * rng.below(3), kw = 1 + 2 * rng.below(2);
    const std::size_t h = kh + rng.below(8), w = kw + rng.below(8);
    const std::size_t sh = 1 + rng.below(2), sw = 1 + rng.below(2);
    const std::size_t ph = rng.below(kh / 2 + 1), pw = rng.below(kw / 2 + 1);
    const Tensor x = random_tensor({n, cin, h, w}, rng);
    const Tensor k = random_tensor({cout, cin, kh, kw}, rng);
    const Tensor got = eval([&](Tape& t) {
      return ops::conv2d_standard(t.constant(x), t.constant(k), {sh, sw, ph, pw});
    });
    CHECK(max_abs_diff(got, oracle::conv_standard(x, k, sh, sw, ph, pw)) <= 1e-12);
  }
}

TEST_CASE("unbatched convolution equals the batch of one") {
  Rng rng(102);
  const Tensor x = random_tensor({3, 6, 5}, rng);
  const Tensor k = random_tensor({2, 3, 3, 3}, rng);
  const Tensor single = eval([&](Tape& t) { return ops::conv2d_standard(t.constant(x), t.constant(k), {2, 1, 1, 1}); });
  const Tensor batched = eval([&](Tape& t) {
    return ops::conv2d_standard(t.constant(x.reshaped({1, 3, 6, 5})), t.constant(k), {2, 1, 1, 1});
  });
  CHECK(single.shape() == Shape{2, 3, 5});
  CHECK(single.values() == batched.values());
}

TEST_CASE("convolution rejects mismatched channels") {
  Tape t;
  CHECK_THROWS_AS(ops::conv2d_standard(t.constant(Tensor({1, 2, 5, 5})), t.constant(Tensor({3, 4, 3, 3})), {}),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv2d_depthwise(t.constant(Tensor({1, 2, 5, 5})), t.constant(Tensor({3, 3, 3})), {}),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv_pointwise(t.constant(Tensor({1, 2, 5, 5})), t.constant(Tensor({3, 4}))),
                  ShapeError);
  // Kernel larger than the padded input.
  CHECK_THROWS_AS(ops::conv2d_standard(t.constant(Tensor({1, 1, 2, 2})), t.constant(Tensor({1, 1, 3, 3})), {}),
                  ShapeError);
}

TEST_CASE("conv_output_extent") {
  CHECK(ops::conv_output_extent(39, 3, 2, 1) == 20);
  CHECK(ops::conv_output_extent(20, 3, 2, 1) == 10);
  CHECK(ops::conv_output_extent(10, 3, 2, 1) == 5);
  CHECK(ops::conv_output_extent(64, 3, 1, 1) == 64);
}

TEST_CASE("prototypical loss matches direct enumeration") {
  Rng rng(103);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(9), m = 1 + rng.below(20), d = 1 + rng.below(8);
    std::vector<Embedding> queries(m, Embedding(d)), centers(k, Embedding(d));
    std::vector<std::size_t> labels(m);
    for (auto& q : queries)
      for (double& v : q) v = rng.uniform(-1.0, 1.0);
    for (auto& c : centers)
      for (double& v : c) v = rng.uniform(-1.0, 1.0);
    for (auto& l : labels) l = rng.below(k);
    PrototypeSet set{centers, {}};
    for (std::size_t i = 0; i < k; ++i) set.labels.push_back(i);
    const double want = oracle::prototypical_loss(queries, labels, centers);
    CHECK(std::abs(prototypical_loss(queries, labels, set).loss - want) <= 1e-9);

    Tensor qt({m, d}), ct({k, d});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) qt.at({i, j}) = queries[i][j];
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) ct.at({i, j}) = centers[i][j];
    Tape tape;
    CHECK(std::abs(prototypical_loss(tape.constant(qt), tape.constant(ct), labels).value()[0] - want) <= 1e-9);
  }
}

TEST_CASE("equidistant prototypes give ln K") {
  for (std::size_t k : {2u, 5u, 10u}) {
    std::vector<Embedding> centers(k, Embedding(4, 0.0));
    for (std::size_t i = 0; i < k; ++i) centers[i][i % 4] = (i < 4 ? 1.0 : -1.0);
    // Every center is at squared distance 1 from the origin.
    PrototypeSet set{centers, {}};
    for (std::size_t i = 0; i < k; ++i) set.labels.push_back(i);
    const std::vector<Embedding> queries(3, Embedding(4, 0.0));
    const std::vector<std::size_t> labels{0, 1, k - 1};
    const PrototypicalLoss r = prototypical_loss(queries, labels, set);
    CHECK(std::abs(r.loss - std::log(static_cast<double>(k))) <= 1e-12);
    for (const auto& row : r.posteriors)
      for (double p : row) CHECK(std::abs(p - 1.0 / static_cast<double>(k)) <= 1e-15);
  }
}

TEST_CASE("posteriors sum to one and favour the nearest prototype") {
  Rng rng(104);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Embedding> centers(5, Embedding(3));
    for (auto& c : centers)
      for (double& v : c) v = rng.uniform(-3.0, 3.0);
    PrototypeSet set{centers, {0, 1, 2, 3, 4}};
    std::vector<Embedding> queries(4, Embedding(3));
    for (auto& q : queries)
      for (double& v : q) v = rng.uniform(-3.0, 3.0);
    const std::vector<std::size_t> labels{0, 1, 2, 3};
    const PrototypicalLoss r = prototypical_loss(queries, labels, set);
    CHECK(r.loss >= 0.0);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      double s = 0.0, best_p = -1.0, best_d = 1e300;
      std::size_t arg_p = 0, arg_d = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        s += r.posteriors[i][c];
        double d = 0.0;
        for (std::size_t j = 0; j < 3; ++j) d += (queries[i][j] - centers[c][j]) * (queries[i][j] - centers[c][j]);
        if (r.posteriors[i][c] > best_p) best_p = r.posteriors[i][c], arg_p = c;
        if (d < best_d) best_d = d, arg_d = c;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
      CHECK(arg_p == arg_d);
    }
  }
}

TEST_CASE("accuracy and macro-F match a counting oracle") {
  Rng rng(105);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(9);
    const std::size_t samples = 1 + rng.below(200);
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < k; ++i) labels.push_back("s" + std::to_string(i));
    ConfusionMatrix cm(labels);
    std::vector<std::pair<std::size_t, std::size_t>> outcomes;
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t actual = rng.below(k);
      const std::size_t predicted = rng.uniform() < 0.6 ? actual : rng.below(k);
      cm.record(actual, predicted);
      outcomes.emplace_back(actual, predicted);
    }
    const EvaluationReport r = compute_metrics(cm);
    const oracle::CountedScores want = oracle::count_scores(outcomes, k);
    CHECK(r.accuracy == want.accuracy);
    CHECK(r.macro_f == want.macro_f);
  }
}

TEST_CASE("metric closed forms") {
  ConfusionMatrix perfect({"a", "b", "c"});
  for (std::size_t c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) perfect.record(c, c);
  const EvaluationReport p = compute_metrics(perfect);
  CHECK(p.accuracy == 1.0);
  CHECK(p.macro_f == 1.0);

  ConfusionMatrix half({"a", "b"});
  half.record(0, 0);
  half.record(0, 1);
  half.record(1, 1);
  half.record(1, 0);
  const EvaluationReport h = compute_metrics(half);
  CHECK(h.accuracy == 0.5);
  CHECK(h.macro_f == 0.5);

  // A label that never occurs and is never predicted contributes F1 = 0.
  ConfusionMatrix absent({"a", "b"});
  absent.record(0, 0);
  CHECK(compute_metrics(absent).macro_f == 0.5);
}
