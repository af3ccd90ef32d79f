#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "adapt/attention.hpp"
#include "test_support.hpp"

using namespace adapt;

namespace {
template <typename T>
Tensor<T> random_tokens(size_t n, size_t d, RandomSource& rng) {
  return randn_tensor<T>(rng, {n, d});
}
}  // namespace

TEST_CASE("single-token attention is the identity mixture", "[attention]") {
  // with one kept token the attention weight matrix is [[1.0]], so the block
  // output equals the deterministic single-token computation
  RandomSource rng(2);
  BlockParams<double> p;
  p.init(rng, 8, 2, 2);
  Tensor<double> x = random_tokens<double>(1, 8, rng);
  Tensor<double> with_mask = block_forward_single(x, {1}, p);
  Tensor<double> no_mask = block_forward_single(x, {}, p);
  for (size_t i = 0; i < 8; ++i)
    REQUIRE(with_mask.values()[i] == Catch::Approx(no_mask.values()[i]).margin(1e-12));
}

TEST_CASE("masked tokens do not influence kept ones", "[attention]") {
  RandomSource rng(7);
  BlockParams<float> p;
  p.init(rng, 16, 2, 2);
  Tensor<float> x = random_tokens<float>(2, 16, rng);
  Tensor<float> masked = block_forward_single(x, {1, 0}, p);

  Tensor<float> solo = block_forward_single(
      Tensor<float>::from_values({1, 16},
                                 std::vector<float>(x.values().begin(), x.values().begin() + 16)),
      {1}, p);
  for (size_t i = 0; i < 16; ++i)
    REQUIRE(masked.values()[i] == Catch::Approx(solo.values()[i]).margin(1e-5));
}

TEST_CASE("zero query/key projections give uniform attention over kept keys", "[attention]") {
  RandomSource rng(11);
  BlockParams<double> p;
  p.init(rng, 8, 2, 2);
  std::fill(p.wq.values_mut().begin(), p.wq.values_mut().end(), 0.0);
  std::fill(p.bq.values_mut().begin(), p.bq.values_mut().end(), 0.0);
  std::fill(p.wk.values_mut().begin(), p.wk.values_mut().end(), 0.0);
  std::fill(p.bk.values_mut().begin(), p.bk.values_mut().end(), 0.0);

  const size_t n = 5;
  Tensor<double> x = random_tokens<double>(n, 8, rng);
  std::vector<uint8_t> keep{1, 0, 1, 1, 0};
  Tensor<double> out = block_forward_single(x, keep, p);

  // reference: uniform mixture over kept value rows, then Out proj + block tail
  Tensor<double> ln = add(mul(layer_norm(x), p.ln1_scale), p.ln1_shift);
  Tensor<double> v = add(matmul(ln, p.wv), p.bv);
  Tensor<double> vbar = masked_mean(v, keep, 0);
  Tensor<double> ctx = repeat_rows(vbar, n);
  Tensor<double> res = add(x, add(matmul(ctx, p.wo), p.bo));
  Tensor<double> y = add(mul(layer_norm(res), p.ln2_scale), p.ln2_shift);
  y = add(matmul(gelu(add(matmul(y, p.w1), p.b1)), p.w2), p.b2);
  Tensor<double> want = add(res, y);
  for (size_t i = 0; i < out.numel(); ++i)
    REQUIRE(out.values()[i] == Catch::Approx(want.values()[i]).margin(1e-9));
}

TEST_CASE("classify reduces kept tokens by masked mean", "[attention]") {
  RandomSource rng(5);
  HeadParams<double> head;
  head.init(rng, 8, 4);

  SECTION("identical tokens: mean equals the token for any mask") {
    std::vector<double> row(8);
    for (auto& v : row) v = rng.uniform_in(-1, 1);
    std::vector<double> vals;
    for (int i = 0; i < 5; ++i) vals.insert(vals.end(), row.begin(), row.end());
    Tensor<double> tokens = Tensor<double>::from_values({5, 8}, std::move(vals));
    Tensor<double> a = classify_single(tokens, {1, 1, 1, 1, 1}, head);
    Tensor<double> b = classify_single(tokens, {0, 1, 0, 0, 1}, head);
    for (size_t i = 0; i < 4; ++i)
      REQUIRE(a.values()[i] == Catch::Approx(b.values()[i]).margin(1e-12));
  }

  SECTION("singleton mask picks that token") {
    Tensor<double> tokens = random_tokens<double>(4, 8, rng);
    Tensor<double> got = classify_single(tokens, {0, 0, 1, 0}, head);
    Tensor<double> row = Tensor<double>::from_values(
        {1, 8}, std::vector<double>(tokens.values().begin() + 16, tokens.values().begin() + 24));
    Tensor<double> want = classify_single(row, {1}, head);
    for (size_t i = 0; i < 4; ++i)
      REQUIRE(got.values()[i] == Catch::Approx(want.values()[i]).margin(1e-12));
  }

  SECTION("full mask equals direct sum/N") {
    Tensor<double> tokens = random_tokens<double>(6, 8, rng);
    std::vector<double> pooled(8, 0.0);
    for (size_t i = 0; i < 6; ++i)
      for (size_t c = 0; c < 8; ++c) pooled[c] += tokens.values()[i * 8 + c];
    for (auto& v : pooled) v /= 6.0;
    Tensor<double> want =
        classify_single(Tensor<double>::from_values({1, 8}, std::move(pooled)), {1}, head);
    Tensor<double> got = classify_single(tokens, std::vector<uint8_t>(6, 1), head);
    for (size_t i = 0; i < 4; ++i)
      REQUIRE(got.values()[i] == Catch::Approx(want.values()[i]).margin(1e-6));
  }

  SECTION("empty mask is a contract violation") {
    Tensor<double> tokens = random_tokens<double>(3, 8, rng);
    REQUIRE_THROWS_AS(classify_single(tokens, {0, 0, 0}, head), std::invalid_argument);
  }
}

TEST_CASE("all-keys-masked block is a contract violation", "[attention]") {
  RandomSource rng(3);
  BlockParams<float> p;
  p.init(rng, 8, 2, 2);
  Tensor<float> x = random_tokens<float>(3, 8, rng);
  REQUIRE_THROWS_AS(block_forward_single(x, {0, 0, 0}, p), std::invalid_argument);
}

TEST_CASE("logits are permutation-invariant", "[attention][property]") {
  RandomSource rng(19);
  BlockParams<float> p1, p2;
  p1.init(rng, 16, 4, 2);
  p2.init(rng, 16, 4, 2);
  HeadParams<float> head;
  head.init(rng, 16, 5);

  const size_t n = 10;
  Tensor<float> x = random_tokens<float>(n, 16, rng);
  std::vector<uint8_t> keep{1, 1, 0, 1, 1, 1, 0, 1, 1, 1};

  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  std::vector<float> pvals(n * 16);
  std::vector<uint8_t> pkeep(n);
  for (size_t i = 0; i < n; ++i) {
    std::copy(x.values().begin() + perm[i] * 16, x.values().begin() + perm[i] * 16 + 16,
              pvals.begin() + i * 16);
    pkeep[i] = keep[perm[i]];
  }
  Tensor<float> px = Tensor<float>::from_values({n, 16}, std::move(pvals));

  auto run = [&](const Tensor<float>& t, const std::vector<uint8_t>& m) {
    Tensor<float> h = block_forward_single(t, m, p1);
    h = block_forward_single(h, m, p2);
    return classify_single(h, m, head);
  };
  Tensor<float> a = run(x, keep);
  Tensor<float> b = run(px, pkeep);
  for (size_t i = 0; i < 5; ++i)
    REQUIRE(a.values()[i] == Catch::Approx(b.values()[i]).margin(1e-5));
}

TEST_CASE("block and head gradients match finite differences", "[attention][grad]") {
  RandomSource rng(41);
  BlockParams<double> p1, p2;
  p1.init(rng, 16, 2, 2);
  p2.init(rng, 16, 2, 2);
  HeadParams<double> head;
  head.init(rng, 16, 3);
  Tensor<double> x = random_tokens<double>(4, 16, rng);
  std::vector<uint8_t> keep{1, 1, 0, 1};
  Tensor<double> w = randn_tensor<double>(rng, {3});

  auto loss_of = [&]() {
    Tensor<double> h = block_forward_single(x, keep, p1);
    h = block_forward_single(h, keep, p2);
    return sum_all(mul(classify_single(h, keep, head), w));
  };
  backward(loss_of());

  ParamRegistry<double> reg;
  p1.collect(reg, "b0");
  p2.collect(reg, "b1");
  head.collect(reg, "head");
  double worst = 0;
  for (auto& [name, t] : reg) {
    std::vector<double> analytic =
        t->has_grad() ? t->grad() : std::vector<double>(t->numel(), 0.0);
    t->zero_grad();
    worst = std::max(worst, testsup::fd_max_rel_error(
                                *t, [&]() { return loss_of().item(); }, analytic, 1e-5, 1e-6, 8));
  }
  REQUIRE(worst < 1e-4);
}

TEST_CASE("TokenBatch wrappers run every element", "[attention]") {
  RandomSource rng(6);
  BlockParams<float> p;
  p.init(rng, 8, 2, 2);
  HeadParams<float> head;
  head.init(rng, 8, 3);
  TokenBatch<float> tb;
  tb.tokens.push_back(random_tokens<float>(5, 8, rng));
  tb.tokens.push_back(random_tokens<float>(3, 8, rng));
  tb.keep = {{1, 1, 1, 0, 1}, {1, 1, 1}};
  TokenBatch<float> out = block_forward(tb, p);
  REQUIRE(out.size() == 2);
  REQUIRE(out.tokens[0].shape() == Shape{5, 8});
  REQUIRE(out.tokens[1].shape() == Shape{3, 8});
  auto logits = classify(out, head);
  REQUIRE(logits.size() == 2);
  REQUIRE(logits[0].shape() == Shape{3});
}
