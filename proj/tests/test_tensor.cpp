#include <cmath>
#include <numeric>

#include <doctest.h>

#include "support.hpp"
#include "xfeat/ops.hpp"

using namespace xfeat;
using xfeat::test::random_tensor;

namespace {

double bilinear_oracle(const std::vector<double>& src, std::size_t h, std::size_t w, std::size_t oh,
                       std::size_t ow, std::size_t y, std::size_t x) {
  const auto coord = [](std::size_t o, std::size_t in, std::size_t out) {
    double s = (o + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  const double sy = coord(y, h, oh), sx = coord(x, w, ow);
  const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
         fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
}

Tensor<double> requires_grad(Tensor<double> t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("conv2d 1x1 scalar case and its flop entry") {
    FlopCounter counter;
    const Tensor<float> x(Shape{1, 1, 1, 1}, std::vector<float>{3.0f});
    const Tensor<float> w(Shape{1, 1, 1, 1}, std::vector<float>{2.0f});
    const auto y = ops::conv2d(x, w, Tensor<float>{}, 1, 0, &counter, "unit");
    CHECK(y.item() == 6.0f);
    REQUIRE(counter.entries().size() == 1);
    CHECK(counter.entries()[0].f_ops == 1);
    CHECK(counter.total() == 1);
  }

  TEST_CASE("conv2d flop count at 600x800, 4->8 channels, 3x3") {
    FlopCounter counter;
    const Tensor<float> x(Shape{1, 4, 600, 800}, 0.5f);
    const Tensor<float> w(Shape{8, 4, 3, 3}, 0.1f);
    ops::conv2d(x, w, Tensor<float>{}, 1, 1, &counter);
    CHECK(counter.total() == 138240000ULL);
    const auto& e = counter.entries().front();
    CHECK(e.f_ops == e.height * e.width * e.c_in * e.c_out * e.kernel * e.kernel);
  }

  TEST_CASE("conv2d matches sliding-window oracle") {
    struct Case {
      std::size_t n, c, h, w, co, k;
      int stride;
      bool bias;
    };
    const Case cases[] = {{1, 1, 5, 5, 1, 3, 1, false}, {2, 3, 7, 6, 4, 3, 2, true},
                          {1, 5, 4, 4, 3, 1, 1, true},  {1, 2, 9, 8, 2, 1, 2, false},
                          {2, 2, 8, 8, 3, 3, 1, true}};
    std::uint64_t seed = 10;
    for (const auto& cs : cases) {
      const auto x = random_tensor<float>({cs.n, cs.c, cs.h, cs.w}, seed++);
      const auto w = random_tensor<float>({cs.co, cs.c, cs.k, cs.k}, seed++);
      const auto b = random_tensor<float>({cs.co}, seed++);
      const int pad = static_cast<int>(cs.k - 1) / 2;
      FlopCounter counter;
      const auto y = ops::conv2d(x, w, cs.bias ? b : Tensor<float>{}, cs.stride, pad, &counter);
      const auto expect = test::conv_oracle(x, w, cs.bias ? &b : nullptr, cs.stride, pad);
      REQUIRE(y.numel() == expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
      const auto& e = counter.entries().front();
      CHECK(e.height == y.dim(2));
      CHECK(e.width == y.dim(3));
      CHECK(e.f_ops == e.height * e.width * cs.c * cs.co * cs.k * cs.k);
    }
  }

  TEST_CASE("conv2d rejects mismatched channels and bad kernels") {
    const Tensor<float> x(Shape{1, 3, 5, 5});
    CHECK_THROWS_AS(ops::conv2d(x, Tensor<float>(Shape{2, 2, 3, 3}), Tensor<float>{}, 1, 1), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(x, Tensor<float>(Shape{2, 3, 5, 5}), Tensor<float>{}, 1, 2), ShapeError);
    CHECK_THROWS_AS(ops::conv2d(x, Tensor<float>(Shape{2, 3, 3, 3}), Tensor<float>{}, 3, 1), ShapeError);
  }

  TEST_CASE("flop counter total is the sum of its entries") {
    FlopCounter counter;
    counter.record("a", 2, 3, 4, 5, 3);
    counter.record("b", 7, 1, 2, 2, 1);
    CHECK(counter.entries()[0].f_ops == 2 * 3 * 4 * 5 * 9);
    CHECK(counter.total() == 2 * 3 * 4 * 5 * 9 + 7 * 2 * 2);
    counter.clear();
    CHECK(counter.total() == 0);
    CHECK(counter.entries().empty());
  }

  TEST_CASE("batchnorm eval with unit statistics is the identity") {
    const auto x = random_tensor<float>({2, 3, 4, 4}, 3);
    Tensor<float> gamma(Shape{3}, 1.0f), beta(Shape{3}, 0.0f), mean(Shape{3}, 0.0f), var(Shape{3}, 1.0f);
    const auto y = ops::batchnorm2d(x, gamma, beta, mean, var, {.training = false});
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(y.data()[i] == doctest::Approx(x.data()[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-6));
    }
  }

  TEST_CASE("batchnorm training on a constant channel yields beta") {
    const Tensor<float> x(Shape{2, 2, 3, 3}, 4.0f);
    Tensor<float> gamma(Shape{2}, std::vector<float>{1.5f, -2.0f});
    Tensor<float> beta(Shape{2}, std::vector<float>{0.25f, -0.75f});
    Tensor<float> mean(Shape{2}, 0.0f), var(Shape{2}, 1.0f);
    const auto y = ops::batchnorm2d(x, gamma, beta, mean, var, {.training = true});
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const std::size_t c = (i / 9) % 2;
      CHECK(y.data()[i] == doctest::Approx(beta.data()[c]).epsilon(1e-6));
    }
  }

  TEST_CASE("batchnorm training normalizes moments and updates running stats") {
    const auto x = random_tensor<double>({2, 3, 4, 4}, 5, -2.0, 3.0);
    Tensor<double> gamma(Shape{3}, 1.0), beta(Shape{3}, 0.0), mean(Shape{3}, 0.0), var(Shape{3}, 1.0);
    const auto y = ops::batchnorm2d(x, gamma, beta, mean, var, {.training = true});
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, v = 0, xm = 0, xv = 0;
      std::vector<double> vals, xs;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 16; ++i) {
          vals.push_back(y.data()[(n * 3 + c) * 16 + i]);
          xs.push_back(x.data()[(n * 3 + c) * 16 + i]);
        }
      for (std::size_t i = 0; i < 32; ++i) {
        m += vals[i] / 32;
        xm += xs[i] / 32;
      }
      for (std::size_t i = 0; i < 32; ++i) {
        v += (vals[i] - m) * (vals[i] - m) / 32;
        xv += (xs[i] - xm) * (xs[i] - xm) / 32;
      }
      CHECK(std::abs(m) <= 1e-6);
      CHECK(std::abs(v - 1.0) <= 1e-5);
      CHECK(mean.data()[c] == doctest::Approx(0.1 * xm).epsilon(1e-9));
      CHECK(var.data()[c] == doctest::Approx(0.9 + 0.1 * xv * 32.0 / 31.0).epsilon(1e-9));
    }
  }

  TEST_CASE("batchnorm rejects wrong parameter length") {
    const Tensor<float> x(Shape{1, 3, 2, 2});
    Tensor<float> g(Shape{2}, 1.0f), b(Shape{3}), m(Shape{3}), v(Shape{3}, 1.0f);
    CHECK_THROWS_AS(ops::batchnorm2d(x, g, b, m, v, {}), ShapeError);
  }

  TEST_CASE("softmax, relu and sigmoid basics") {
    const auto u = ops::softmax(Tensor<float>(Shape{1, 4}, 0.0f), 1);
    for (float v : u.data()) CHECK(v == doctest::Approx(0.25f));
    CHECK(ops::sigmoid(Tensor<float>::scalar(0.0f)).item() == 0.5f);
    const auto r = ops::relu(Tensor<float>(Shape{3}, std::vector<float>{-1.0f, 0.0f, 2.0f}));
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[2] == 2.0f);

    const auto x = random_tensor<double>({6, 9}, 7, -5, 5);
    for (std::size_t axis : {0u, 1u}) {
      const auto s = ops::softmax(x, axis);
      std::vector<double> shifted(x.data().begin(), x.data().end());
      for (auto& v : shifted) v += 123.25;
      const auto s2 = ops::softmax(Tensor<double>(x.shape(), shifted), axis);
      for (std::size_t i = 0; i < s.numel(); ++i) CHECK(std::abs(s.data()[i] - s2.data()[i]) <= 1e-6);
      const std::size_t outer = axis == 0 ? 9 : 6, len = axis == 0 ? 6 : 9;
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0;
        for (std::size_t k = 0; k < len; ++k) total += axis == 0 ? s.data()[k * 9 + o] : s.data()[o * 9 + k];
        CHECK(std::abs(total - 1.0) <= 1e-6);
      }
    }
    const auto ls = ops::log_softmax(x, 1);
    const auto s = ops::softmax(x, 1);
    for (std::size_t i = 0; i < s.numel(); ++i) CHECK(std::exp(ls.data()[i]) == doctest::Approx(s.data()[i]));
  }

  TEST_CASE("bilinear resize preserves constants and monotone ramps") {
    const auto c = ops::bilinear_resize(Tensor<float>(Shape{1, 1, 5, 7}, 7.0f), 13, 3);
    for (float v : c.data()) CHECK(v == 7.0f);
    const Tensor<float> ramp(Shape{1, 1, 2, 2}, std::vector<float>{0, 1, 0, 1});
    const auto up = ops::bilinear_resize(ramp, 4, 4);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x + 1 < 4; ++x) CHECK(up.data()[y * 4 + x] <= up.data()[y * 4 + x + 1]);
  }

  TEST_CASE("bilinear downscale by 0.65 matches a per-pixel oracle") {
    const std::size_t h = 40, w = 57;
    std::vector<double> src(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) src[y * w + x] = 0.3 * x + 0.7 * y;
    const auto oh = static_cast<std::size_t>(std::lround(h * 0.65));
    const auto ow = static_cast<std::size_t>(std::lround(w * 0.65));
    const auto out = ops::bilinear_resize(Tensor<double>(Shape{1, 1, h, w}, src), oh, ow);
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        CHECK(std::abs(out.data()[y * ow + x] - bilinear_oracle(src, h, w, oh, ow, y, x)) <= 1e-6);
    const auto rnd = random_tensor<double>({1, 1, 9, 11}, 4);
    const std::vector<double> rs(rnd.data().begin(), rnd.data().end());
    const auto up = ops::bilinear_resize(rnd, 17, 6);
    for (std::size_t y = 0; y < 17; ++y)
      for (std::size_t x = 0; x < 6; ++x)
        CHECK(std::abs(up.data()[y * 6 + x] - bilinear_oracle(rs, 9, 11, 17, 6, y, x)) <= 1e-12);
  }

  TEST_CASE("bicubic sample reproduces knots, constants and the kernel-sum oracle") {
    const auto map = random_tensor<float>({3, 6, 7}, 11);
    std::vector<std::pair<float, float>> centres;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 7; ++j) centres.push_back({j + 0.5f, i + 0.5f});
    const auto at_centres = ops::bicubic_sample(map, centres);
    for (std::size_t p = 0; p < centres.size(); ++p)
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(std::abs(at_centres.data()[p * 3 + c] - map.data()[c * 42 + p]) <= 1e-6);

    const auto flat = ops::bicubic_sample(Tensor<float>(Shape{2, 4, 4}, 2.5f), {{0.1f, 3.9f}, {2.2f, 1.7f}});
    for (float v : flat.data()) CHECK(v == doctest::Approx(2.5f).epsilon(1e-6));

    std::mt19937_64 engine(12);
    std::uniform_real_distribution<float> ux(-1.0f, 8.0f), uy(-1.0f, 7.0f);
    std::vector<std::pair<float, float>> pts;
    for (int i = 0; i < 100; ++i) pts.push_back({ux(engine), uy(engine)});
    const auto got = ops::bicubic_sample(map, pts);
    for (std::size_t c = 0; c < 3; ++c) {
      const std::vector<double> plane(map.data().begin() + c * 42, map.data().begin() + (c + 1) * 42);
      for (std::size_t p = 0; p < pts.size(); ++p) {
        CHECK(std::abs(got.data()[p * 3 + c] - test::bicubic_oracle(plane, 6, 7, pts[p].first, pts[p].second)) <= 1e-5);
      }
    }
    CHECK(ops::bicubic_sample(map, {}).numel() == 0);
  }

  TEST_CASE("space_to_depth layout, inverse and shapes") {
    std::vector<float> ramp(64);
    std::iota(ramp.begin(), ramp.end(), 0.0f);
    const auto cell = ops::space_to_depth(Tensor<float>(Shape{1, 1, 8, 8}, ramp));
    CHECK(cell.shape() == Shape{1, 64, 1, 1});
    for (std::size_t c = 0; c < 64; ++c) CHECK(cell.data()[c] == static_cast<float>(c));

    const auto x = random_tensor<float>({2, 1, 16, 24}, 13);
    const auto s = ops::space_to_depth(x);
    CHECK(s.shape() == Shape{2, 64, 2, 3});
    for (std::size_t c = 0; c < 64; ++c)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          CHECK(s.data()[((64 + c) * 2 + i) * 3 + j] ==
                x.data()[(16 + 8 * i + c / 8) * 24 + 8 * j + c % 8]);
    const auto back = ops::depth_to_space(s);
    CHECK(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
    const auto again = ops::space_to_depth(ops::depth_to_space(s));
    CHECK(std::equal(again.data().begin(), again.data().end(), s.data().begin()));
    CHECK(ops::space_to_depth(Tensor<float>(Shape{1, 1, 16, 16})).shape() == Shape{1, 64, 2, 2});
    CHECK_THROWS_AS(ops::space_to_depth(Tensor<float>(Shape{1, 1, 12, 16})), ShapeError);
  }

  TEST_CASE("pad_edge and crop") {
    const auto x = random_tensor<float>({1, 2, 3, 5}, 14);
    const auto p = ops::pad_edge(x, 4, 8);
    CHECK(p.shape() == Shape{1, 2, 4, 8});
    CHECK(p.data()[(1 * 4 + 3) * 8 + 7] == x.data()[(1 * 3 + 2) * 5 + 4]);
    const auto c = ops::crop(p, 3, 5);
    CHECK(std::equal(c.data().begin(), c.data().end(), x.data().begin()));
    CHECK_THROWS_AS(ops::crop(x, 4, 5), ShapeError);
  }

  TEST_CASE("backward: linear case, detach and non-scalar error") {
    auto x = requires_grad(random_tensor<double>({3, 4}, 15));
    ops::sum(ops::scale(x, 2.0)).backward();
    for (double g : x.grad()) CHECK(g == 2.0);

    auto a = requires_grad(random_tensor<double>({5}, 16));
    auto b = requires_grad(random_tensor<double>({5}, 17));
    const auto loss = ops::add(ops::sum(ops::mul(a, a)), ops::sum(ops::mul(b.detach(), a)));
    loss.backward();
    CHECK((!b.has_grad() || std::all_of(b.grad().begin(), b.grad().end(), [](double g) { return g == 0.0; })));
    for (std::size_t i = 0; i < 5; ++i) CHECK(a.grad()[i] == doctest::Approx(2 * a.data()[i] + b.data()[i]));

    CHECK_THROWS(ops::scale(x, 1.0).backward());
  }

  TEST_CASE("non-finite results are rejected") {
    const Tensor<float> x(Shape{2}, std::vector<float>{1.0f, 2.0f});
    CHECK_THROWS_AS(ops::scale(x, std::numeric_limits<float>::infinity()), NumericError);
    CHECK_THROWS_AS(ops::mul(x, Tensor<float>(Shape{2}, std::numeric_limits<float>::quiet_NaN())), NumericError);
  }

  TEST_CASE("composite conv-bn-relu graph matches finite differences") {
    auto x = requires_grad(random_tensor<double>({2, 2, 6, 6}, 18));
    auto w1 = requires_grad(random_tensor<double>({3, 2, 3, 3}, 19));
    auto gamma = requires_grad(random_tensor<double>({3}, 20, 0.5, 1.5));
    auto beta = requires_grad(random_tensor<double>({3}, 21));
    auto w2 = requires_grad(random_tensor<double>({2, 3, 1, 1}, 22));
    auto b2 = requires_grad(random_tensor<double>({2}, 23));
    Tensor<double> rm(Shape{3}), rv(Shape{3}, 1.0);
    const auto loss = [&] {
      auto h = ops::conv2d(x, w1, Tensor<double>{}, 2, 1);
      h = ops::relu(ops::batchnorm2d(h, gamma, beta, rm, rv, {.training = true}));
      h = ops::conv2d(h, w2, b2, 1, 0);
      return ops::sum(ops::mul(h, h));
    };
    const auto r = test::check_gradients({&x, &w1, &gamma, &beta, &w2, &b2}, loss, 120, 24);
    CHECK(r.max_rel_error <= 1e-4);
  }

  TEST_CASE("every differentiable op matches finite differences") {
    using T = Tensor<double>;
    auto a = requires_grad(random_tensor<double>({4, 5}, 30));
    auto b = requires_grad(random_tensor<double>({4, 5}, 31));
    auto m = requires_grad(random_tensor<double>({5, 3}, 32));
    auto lw = requires_grad(random_tensor<double>({6, 5}, 33));
    auto lb = requires_grad(random_tensor<double>({6}, 34));
    auto img = requires_grad(random_tensor<double>({2, 1, 16, 8}, 35));
    auto fmap = requires_grad(random_tensor<double>({2, 3, 5, 4}, 36));
    const auto weights = random_tensor<double>({4, 5}, 37);
    const auto weigh = [&](const T& t) {
      const auto wt = random_tensor<double>(t.shape(), 99);
      return ops::sum(ops::mul(t, wt));
    };
    struct Case {
      const char* name;
      std::vector<T*> params;
      std::function<T()> loss;
    };
    const std::vector<Case> cases = {
        {"relu", {&a}, [&] { return weigh(ops::relu(a)); }},
        {"sigmoid", {&a}, [&] { return weigh(ops::sigmoid(a)); }},
        {"softmax0", {&a}, [&] { return weigh(ops::softmax(a, 0)); }},
        {"softmax1", {&a}, [&] { return weigh(ops::softmax(a, 1)); }},
        {"log_softmax", {&a}, [&] { return weigh(ops::log_softmax(a, 1)); }},
        {"abs", {&a}, [&] { return weigh(ops::abs(a)); }},
        {"add", {&a, &b}, [&] { return weigh(ops::add(a, b)); }},
        {"sub", {&a, &b}, [&] { return weigh(ops::sub(a, b)); }},
        {"mul", {&a, &b}, [&] { return weigh(ops::mul(a, b)); }},
        {"scale", {&a}, [&] { return weigh(ops::scale(a, 1.7)); }},
        {"mean", {&a}, [&] { return ops::mean(ops::mul(a, weights)); }},
        {"matmul", {&a, &m}, [&] { return weigh(ops::matmul(a, m)); }},
        {"transpose", {&a}, [&] { return weigh(ops::transpose(a)); }},
        {"linear", {&a, &lw, &lb}, [&] { return weigh(ops::linear(a, lw, lb)); }},
        {"concat", {&a, &b}, [&] { return weigh(ops::concat_cols(a, b)); }},
        {"l2_normalize", {&a}, [&] { return weigh(ops::l2_normalize_rows(a)); }},
        {"reshape", {&a}, [&] { return weigh(a.reshape({5, 4})); }},
        {"gather", {&fmap}, [&] {
           return weigh(ops::gather_cells(fmap, {{0, 1, 2}, {1, 4, 3}, {0, 0, 0}, {1, 4, 3}}));
         }},
        {"nll", {&a}, [&] { return ops::nll_rows(ops::log_softmax(a, 1), {0, 4, 2, 2}); }},
        {"bilinear", {&fmap}, [&] { return weigh(ops::bilinear_resize(fmap, 9, 3)); }},
        {"pad_edge", {&fmap}, [&] { return weigh(ops::pad_edge(fmap, 8, 8)); }},
        {"crop", {&fmap}, [&] { return weigh(ops::crop(fmap, 3, 2)); }},
        {"space_to_depth", {&img}, [&] { return weigh(ops::space_to_depth(img)); }},
        {"depth_to_space", {&img}, [&] { return weigh(ops::depth_to_space(ops::space_to_depth(img))); }},
    };
    for (const auto& c : cases) {
      CAPTURE(c.name);
      const auto r = test::check_gradients(c.params, c.loss, 40, 40);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }

  TEST_CASE("forward ops are deterministic") {
    const auto x = random_tensor<float>({1, 3, 9, 9}, 50);
    const auto w = random_tensor<float>({4, 3, 3, 3}, 51);
    const auto y1 = ops::conv2d(x, w, Tensor<float>{}, 2, 1);
    const auto y2 = ops::conv2d(x, w, Tensor<float>{}, 2, 1);
    CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
  }
}
