#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <numeric>

#include "support.hpp"

using namespace distillforge;
using namespace distillforge::ops;
using dftest::check_op;
using dftest::random_tensor;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

// keeps samples away from activation kinks and max-pool near-ties
Tensor<double> spread_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) {
    double u = rng.uniform(0.05, 1.0);
    v = rng.uniform() < 0.5 ? -u : u;
  }
  return t;
}

}  // namespace

TEST_CASE("tensor construction validates shape") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor<double>(Shape{0, 3}), Error);
  Tensor<double> s = Tensor<double>::scalar(2.5);
  CHECK(s.numel() == 1);
  CHECK(s.item() == 2.5);
  Tensor<float> f = Tensor<double>({3}, std::vector<double>{1, 2, 3}).cast<float>();
  CHECK(f[2] == 3.0f);
}

TEST_CASE("tensor storage is 64-byte aligned") {
  std::vector<Tensor<float>> keep;
  for (std::size_t n = 1; n < 40; ++n) {
    keep.emplace_back(Shape{n});
    CHECK(reinterpret_cast<std::uintptr_t>(keep.back().data()) % 64 == 0);
    const Tensor<double> r = Tensor<double>({n, 1}).reshaped({n});
    CHECK(reinterpret_cast<std::uintptr_t>(r.data()) % 64 == 0);
  }
}

TEST_CASE("matmul examples") {
  Tape<double> tape;
  auto eye = tape.constant(mat(2, 2, {1, 0, 0, 1}));
  auto a = tape.constant(mat(2, 2, {1, 2, 3, 4}));
  CHECK(matmul(eye, a).value() == a.value());
  auto b = tape.constant(mat(2, 1, {5, 6}));
  CHECK(matmul(a, b).value() == mat(2, 1, {17, 39}));
  auto z = tape.constant(mat(2, 2, {0, 0, 0, 0}));
  auto r = matmul(z, tape.constant(mat(2, 3, {1, -2, 3, 4, 5, 6})));
  for (double v : r.value().values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(matmul(b, b), Error);
}

TEST_CASE("matmul shape mismatch is a dimension error") {
  Tape<double> tape;
  try {
    matmul(tape.constant(mat(2, 3, {1, 2, 3, 4, 5, 6})), tape.constant(mat(2, 2, {1, 2, 3, 4})));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
  }
}

TEST_CASE("conv2d examples") {
  Tape<double> tape;
  Tensor<double> x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto ones = tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto valid = conv2d(tape.constant(x), ones, tape.constant(Tensor<double>({1}, 0.0)), Padding::valid);
  REQUIRE(valid.value().shape() == Shape{1, 1, 1, 1});
  CHECK(valid.value()[0] == 45.0);

  Tensor<double> delta({1, 1, 3, 3}, 0.0);
  delta[4] = 1.0;
  auto same = conv2d(tape.constant(x), tape.constant(delta), Var<double>(), Padding::same);
  CHECK(same.value() == x);

  Tensor<double> bias({2}, std::vector<double>{0.5, -1.5});
  Rng rng(3);
  auto zero_in = conv2d(tape.constant(Tensor<double>({2, 3, 4, 4}, 0.0)), tape.constant(random_tensor(rng, {2, 3, 3, 3})),
                        tape.constant(bias), Padding::same);
  for (std::size_t i = 0; i < zero_in.value().numel(); ++i) CHECK(zero_in.value()[i] == bias[(i / 16) % 2]);

  try {
    conv2d(tape.constant(Tensor<double>({1, 2, 4, 4})), ones, Var<double>(), Padding::same);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
  }
}

TEST_CASE("pool examples") {
  Tape<double> tape;
  auto seven = pool(tape.constant(Tensor<double>({1, 1, 3, 5}, 7.0)), PoolKind::global_avg);
  CHECK(seven.value()[0] == doctest::Approx(7.0));
  auto m = pool(tape.constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4})), PoolKind::max2x2);
  CHECK(m.value()[0] == 4.0);

  Rng rng(11);
  std::vector<double> vals(15);
  std::iota(vals.begin(), vals.end(), -5.0);
  rng.shuffle(vals.begin(), vals.end());
  auto gm = pool(tape.constant(Tensor<double>({1, 1, 3, 5}, vals)), PoolKind::global_max);
  CHECK(gm.value()[0] == *std::max_element(vals.begin(), vals.end()));

  CHECK_THROWS_AS(pool(tape.constant(Tensor<double>({1, 1, 3, 4})), PoolKind::max2x2), Error);
}

TEST_CASE("max-pool backward deposits one gradient per window at the argmax") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    // small integer values make ties common
    Tensor<double> x({2, 3, 4, 6});
    for (auto& v : x.values()) v = static_cast<double>(rng.below(4));
    auto xv = tape.leaf(x);
    auto y = pool(xv, PoolKind::max2x2);
    tape.backward(mean(y));
    const Tensor<double>& g = xv.grad();
    for (std::size_t p = 0; p < 6; ++p) {
      for (std::size_t oy = 0; oy < 2; ++oy) {
        for (std::size_t ox = 0; ox < 3; ++ox) {
          std::size_t best = 0, nonzero = 0, at = 0;
          double bv = -1;
          for (std::size_t k = 0; k < 4; ++k) {
            std::size_t idx = p * 24 + (2 * oy + k / 2) * 6 + 2 * ox + k % 2;
            if (x[idx] > bv) {
              bv = x[idx];
              best = idx;
            }
            if (g[idx] != 0.0) {
              ++nonzero;
              at = idx;
            }
          }
          CHECK(nonzero == 1);
          CHECK(at == best);
        }
      }
    }
  }
}

TEST_CASE("activation examples") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3}, std::vector<double>{0.0, 1.0, -1.0}));
  auto s = activation(x, Activation::selu);
  CHECK(s.value()[0] == 0.0);
  CHECK(s.value()[1] == doctest::Approx(1.050700987).epsilon(1e-9));
  CHECK(activation(x, Activation::sigmoid).value()[0] == 0.5);
  CHECK(activation(x, Activation::relu).value()[2] == 0.0);
  CHECK(activation(x, Activation::gelu).value()[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
}

TEST_CASE("softmax_t examples") {
  Tape<double> tape;
  auto a = softmax_t(tape.constant(mat(1, 2, {0, 0})), 1.0);
  CHECK(a.value()[0] == 0.5);
  auto b = softmax_t(tape.constant(mat(1, 2, {std::log(3.0), 0})), 1.0);
  CHECK(b.value()[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(b.value()[1] == doctest::Approx(0.25).epsilon(1e-12));
  auto c = softmax_t(tape.constant(mat(1, 3, {0.5, -1.0, 2.0})), 1e6);
  for (double v : c.value().values()) CHECK(std::abs(v - 1.0 / 3.0) < 1e-6);
  CHECK_THROWS_AS(softmax_t(tape.constant(mat(1, 2, {0, 0})), 0.0), Error);
  try {
    softmax_t(tape.constant(mat(1, 2, {0, 0})), -1.0);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::domain);
  }
}

TEST_CASE("softmax_t rows sum to one and preserve the argmax") {
  Rng rng(17);
  const double temps[] = {0.1, 1.0, 2.0, 5.0, 10.0, 1000.0};
  for (int trial = 0; trial < 200; ++trial) {
    Tape<double> tape;
    const std::size_t k = 2 + rng.below(6);
    Tensor<double> z = random_tensor(rng, {4, k}, -30.0, 30.0);
    const double t = temps[trial % 6];
    auto p = softmax_t(tape.constant(z), t);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += p.value()[r * k + j];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
      auto zr = z.values().subspan(r * k, k);
      auto pr = p.value().values().subspan(r * k, k);
      CHECK(std::max_element(zr.begin(), zr.end()) - zr.begin() ==
            std::max_element(pr.begin(), pr.end()) - pr.begin());
    }
  }
}

TEST_CASE("normalization examples") {
  Tape<double> tape;
  auto ln = layer_norm(tape.constant(Tensor<double>({1, 4}, 3.0)), tape.constant(Tensor<double>({4}, 1.0)),
                       tape.constant(Tensor<double>({4}, 0.0)));
  for (double v : ln.value().values()) CHECK(v == 0.0);

  Tensor<double> rm({1}, 0.0), rv({1}, 1.0);
  auto bn = batch_norm(tape.constant(mat(2, 1, {1, 3})), tape.constant(Tensor<double>({1}, 1.0)),
                       tape.constant(Tensor<double>({1}, 0.0)), rm, rv, Mode::train);
  CHECK(bn.value()[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(bn.value()[1] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(rm[0] == doctest::Approx(0.2));
  CHECK(rv[0] == doctest::Approx(1.0));

  Tensor<double> rm2({3}, 0.0), rv2({3}, 1.0);
  Rng rng(2);
  auto shifted = batch_norm(tape.constant(random_tensor(rng, {4, 3, 2, 2})), tape.constant(Tensor<double>({3}, 0.0)),
                            tape.constant(Tensor<double>({3}, std::vector<double>{0.5, -2, 7})), rm2, rv2,
                            Mode::train);
  for (std::size_t i = 0; i < shifted.value().numel(); ++i) {
    CHECK(shifted.value()[i] == std::vector<double>{0.5, -2, 7}[(i / 4) % 3]);
  }

  // infer mode before any training uses mean 0, var 1
  Tensor<double> rm3({1}, 0.0), rv3({1}, 1.0);
  auto inf = batch_norm(tape.constant(mat(1, 1, {2})), tape.constant(Tensor<double>({1}, 1.0)),
                        tape.constant(Tensor<double>({1}, 0.0)), rm3, rv3, Mode::infer);
  CHECK(inf.value()[0] == doctest::Approx(2.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK_THROWS_AS(batch_norm(tape.constant(mat(1, 1, {2})), tape.constant(Tensor<double>({1}, 1.0)),
                             tape.constant(Tensor<double>({1}, 0.0)), rm3, rv3, Mode::train),
                  Error);
}

TEST_CASE("loss examples") {
  Tape<double> tape;
  std::vector<int> labels{1};
  CHECK(cross_entropy(tape.constant(mat(1, 2, {0, 1})), labels).value().item() == 0.0);
  std::vector<int> two{0, 1};
  CHECK(cross_entropy(tape.constant(mat(2, 2, {0.5, 0.5, 0.5, 0.5})), two).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto q = tape.constant(mat(2, 3, {0.2, 0.3, 0.5, 1.0, 0.0, 0.0}));
  CHECK(kl_divergence(q, q).value().item() == 0.0);
  try {
    cross_entropy(tape.constant(mat(1, 2, {0.5, 0.6})), labels);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::validation);
  }
}

TEST_CASE("backward examples") {
  Parameter<double> w("w", Tensor<double>({3}, std::vector<double>{1, 2, 3}));
  Tensor<double> x({3}, std::vector<double>{4, -5, 6});
  {
    Tape<double> tape;
    tape.backward(weighted_sum(tape.parameter(w), x));
    CHECK(w.grad() == x);
  }
  Parameter<double> s("s", Tensor<double>::scalar(5.0));
  {
    Tape<double> tape;
    auto v = tape.parameter(s);
    auto three = tape.constant(Tensor<double>::scalar(3.0));
    auto d = add_scaled(v, 1.0, three, -1.0);
    auto sq = matmul(reshape(d, {1, 1}), reshape(d, {1, 1}));
    tape.backward(reshape(sq, {}));
    CHECK(s.grad().item() == 4.0);
  }
  {
    Tape<double> tape;
    auto unused = tape.parameter(w);
    (void)unused;
    w.grad().fill(9.0);
    auto loss = mean(tape.leaf(Tensor<double>({2}, 1.0)));
    tape.backward(loss);
    for (double g : w.grad().values()) CHECK(g == 0.0);
  }
}

TEST_CASE("second backward without a new forward is a stale-tape error") {
  Parameter<double> w("w", Tensor<double>({2}, 1.0));
  Tape<double> tape;
  auto loss = mean(tape.parameter(w));
  tape.backward(loss);
  try {
    tape.backward(loss);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::state);
  }
  CHECK_THROWS_AS(mean(tape.parameter(w)), Error);
}

TEST_CASE("non-finite results are numeric errors") {
  Tape<double> tape;
  auto big = tape.constant(Tensor<double>({1}, 1e300));
  try {
    scale(big, 1e300);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("finite-difference checker") {
  Rng rng(21);
  auto identity = check_op(rng, {random_tensor(rng, {5})}, [](auto& v) { return v[0]; });
  CHECK(identity.max_rel_error < 1e-9);

  auto d = check_op(rng, {random_tensor(rng, {4, 3}), random_tensor(rng, {3, 5}), random_tensor(rng, {5})},
                    [](auto& v) { return dense(v[0], v[1], v[2]); });
  CHECK(d.max_rel_error < 1e-4);
  REQUIRE(d.entries.size() == 3);
  CHECK(d.entries[1].coords_checked == 15);
}

TEST_CASE("finite-difference checker catches a wrong backward and skips kinks") {
  Rng rng(22);
  Parameter<double> x("x", random_tensor(rng, {6}));
  // y = sum(x^2) with a backward that is off by 0.1%
  LossBuilder wrong = [&](Tape<double>& tape) {
    Var<double> v = tape.parameter(x);
    double s = 0.0;
    for (double e : v.value().values()) s += e * e;
    const auto id = v.id();
    return tape.record("bad_square", Tensor<double>({1}, {s}), {v}, [id](Tape<double>& t, const Tensor<double>& g) {
      if (!t.requires_grad(id)) return;
      Tensor<double>& dst = t.grad_buffer(id);
      for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += 2.002 * t.value(id)[i] * g[0];
    });
  };
  auto r = finite_diff_check(wrong, {&x});
  CHECK(r.max_rel_error > 5e-4);
  CHECK(r.kinks_skipped == 0);

  Parameter<double> z("z", Tensor<double>({3}, {0.0, 0.5, -0.5}));
  LossBuilder kink = [&](Tape<double>& tape) {
    return weighted_sum(activation(tape.parameter(z), Activation::relu), Tensor<double>({3}, {1.0, 2.0, 3.0}));
  };
  auto k = finite_diff_check(kink, {&z});
  CHECK(k.kinks_skipped == 1);
  CHECK(k.coords_checked == 2);
  CHECK(k.max_rel_error < 1e-9);
}

TEST_CASE("gradient soundness per op, 20 random trials each") {
  Rng rng(1234);
  auto run = [&](const char* name, auto make) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) worst = std::max(worst, make().max_rel_error);
    INFO(std::string(name) << " worst relative error " << worst);
    CHECK(worst < 1e-4);
  };
  run("matmul", [&] {
    auto s = dftest::random_shape(rng, 3, 1, 5);
    return check_op(rng, {random_tensor(rng, {s[0], s[1]}), random_tensor(rng, {s[1], s[2]})},
                    [](auto& v) { return matmul(v[0], v[1]); });
  });
  run("dense", [&] {
    auto s = dftest::random_shape(rng, 3, 1, 5);
    return check_op(rng, {random_tensor(rng, {s[0], s[1]}), random_tensor(rng, {s[1], s[2]}), random_tensor(rng, {s[2]})},
                    [](auto& v) { return dense(v[0], v[1], v[2]); });
  });
  run("conv2d same", [&] {
    auto s = dftest::random_shape(rng, 5, 1, 4);
    return check_op(rng,
                    {random_tensor(rng, {s[0], s[1], s[2] + 1, s[3] + 1}), random_tensor(rng, {s[4], s[1], 3, 3}),
                     random_tensor(rng, {s[4]})},
                    [](auto& v) { return conv2d(v[0], v[1], v[2], Padding::same); });
  });
  run("conv2d valid", [&] {
    auto s = dftest::random_shape(rng, 5, 1, 3);
    return check_op(rng,
                    {random_tensor(rng, {s[0], s[1], s[2] + 2, s[3] + 3}), random_tensor(rng, {s[4], s[1], 3, 3}),
                     random_tensor(rng, {s[4]})},
                    [](auto& v) { return conv2d(v[0], v[1], v[2], Padding::valid); });
  });
  for (auto kind : {PoolKind::max2x2, PoolKind::global_max, PoolKind::global_avg}) {
    run("pool", [&] {
      auto s = dftest::random_shape(rng, 4, 1, 3);
      return check_op(rng, {spread_tensor(rng, {s[0], s[1], 2 * s[2], 2 * s[3]})},
                      [kind](auto& v) { return pool(v[0], kind); });
    });
  }
  for (auto kind : {Activation::relu, Activation::selu, Activation::gelu, Activation::sigmoid}) {
    run("activation", [&] {
      return check_op(rng, {spread_tensor(rng, dftest::random_shape(rng, 2, 1, 6))},
                      [kind](auto& v) { return activation(v[0], kind); });
    });
  }
  run("softmax_t", [&] {
    const double t = std::vector<double>{1, 2, 5, 10}[rng.below(4)];
    return check_op(rng, {random_tensor(rng, dftest::random_shape(rng, 2, 1, 5), -3, 3)},
                    [t](auto& v) { return softmax_t(v[0], t); });
  });
  run("batch_norm 2d train", [&] {
    auto s = dftest::random_shape(rng, 2, 2, 5);
    auto rm = std::make_shared<Tensor<double>>(Shape{s[1]});
    auto rv = std::make_shared<Tensor<double>>(Shape{s[1]}, 1.0);
    return check_op(rng, {random_tensor(rng, s), random_tensor(rng, {s[1]}), random_tensor(rng, {s[1]})},
                    [rm, rv](auto& v) { return batch_norm(v[0], v[1], v[2], *rm, *rv, Mode::train); });
  });
  run("batch_norm 4d train", [&] {
    auto s = dftest::random_shape(rng, 4, 2, 3);
    auto rm = std::make_shared<Tensor<double>>(Shape{s[1]});
    auto rv = std::make_shared<Tensor<double>>(Shape{s[1]}, 1.0);
    return check_op(rng, {random_tensor(rng, s), random_tensor(rng, {s[1]}), random_tensor(rng, {s[1]})},
                    [rm, rv](auto& v) { return batch_norm(v[0], v[1], v[2], *rm, *rv, Mode::train); });
  });
  run("batch_norm infer", [&] {
    auto s = dftest::random_shape(rng, 4, 1, 3);
    auto rm = std::make_shared<Tensor<double>>(random_tensor(rng, {s[1]}));
    auto rv = std::make_shared<Tensor<double>>(random_tensor(rng, {s[1]}, 0.5, 2.0));
    return check_op(rng, {random_tensor(rng, s), random_tensor(rng, {s[1]}), random_tensor(rng, {s[1]})},
                    [rm, rv](auto& v) { return batch_norm(v[0], v[1], v[2], *rm, *rv, Mode::infer); });
  });
  run("layer_norm", [&] {
    auto s = dftest::random_shape(rng, 3, 1, 5);
    s[2] += 1;
    return check_op(rng, {random_tensor(rng, s), random_tensor(rng, {s[2]}), random_tensor(rng, {s[2]})},
                    [](auto& v) { return layer_norm(v[0], v[1], v[2]); });
  });
  run("concat", [&] {
    auto s = dftest::random_shape(rng, 4, 1, 3);
    return check_op(rng, {random_tensor(rng, {s[0], s[1], s[3]}), random_tensor(rng, {s[0], s[2], s[3]})},
                    [](auto& v) { return concat(std::vector<Var<double>>{v[0], v[1]}); });
  });
  run("channel_scale", [&] {
    auto s = dftest::random_shape(rng, 4, 1, 3);
    return check_op(rng, {random_tensor(rng, s), random_tensor(rng, {s[0], s[1]})},
                    [](auto& v) { return channel_scale(v[0], v[1]); });
  });
  run("patchify + tokens", [&] {
    auto s = dftest::random_shape(rng, 3, 1, 2);
    const std::size_t p = 2, f = s[1] * p * p;
    return check_op(rng, {random_tensor(rng, {s[0], s[1], p * s[2], p * 2}), random_tensor(rng, {f})},
                    [](auto& v) { return select_token(prepend_token(patchify(v[0], 2), v[1]), 1); });
  });
  run("attention", [&] {
    const std::size_t heads = 1 + rng.below(3);
    const std::size_t d = heads * (1 + rng.below(3));
    const std::size_t n = 1 + rng.below(4);
    return check_op(rng, {random_tensor(rng, {1 + rng.below(2), n, 3 * d})},
                    [heads](auto& v) { return attention(v[0], heads); });
  });
  run("cross_entropy", [&] {
    auto s = dftest::random_shape(rng, 2, 1, 4);
    s[1] += 1;
    auto labels = std::make_shared<std::vector<int>>();
    for (std::size_t i = 0; i < s[0]; ++i) labels->push_back(static_cast<int>(rng.below(s[1])));
    return check_op(rng, {random_tensor(rng, s, -2, 2)},
                    [labels](auto& v) { return cross_entropy(softmax_t(v[0], 1.0), *labels); });
  });
  run("kl_divergence", [&] {
    auto s = dftest::random_shape(rng, 2, 1, 4);
    s[1] += 1;
    const double t = std::vector<double>{1, 2, 5, 10}[rng.below(4)];
    return check_op(rng, {random_tensor(rng, s, -2, 2), random_tensor(rng, s, -2, 2)},
                    [t](auto& v) { return kl_divergence(softmax_t(v[0], t), softmax_t(v[1], t)); });
  });
}

TEST_CASE("dropout determinism and contracts") {
  Tensor<double> x({1000}, 1.0);
  auto draw = [&](std::uint64_t seed) {
    Rng rng(seed);
    Tape<double> tape;
    return dropout(tape.constant(x), 0.5, rng, Mode::train).value();
  };
  CHECK(draw(7) == draw(7));
  CHECK_FALSE(draw(7) == draw(8));
  Rng rng(1);
  Tape<double> tape;
  auto in = tape.constant(x);
  CHECK(dropout(in, 0.0, rng, Mode::train).value() == x);
  CHECK(dropout(in, 0.5, rng, Mode::infer).value() == x);
  CHECK_THROWS_AS(dropout(in, 1.0, rng, Mode::train), Error);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(99), b(99);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(0);
  CHECK(c.next_u64() == 0xe220a8397b1dcdafULL);
  Rng d(5);
  for (int i = 0; i < 1000; ++i) {
    double u = d.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(d.below(7) < 7);
  }
}
