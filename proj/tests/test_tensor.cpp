#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "constcl/gradcheck.hpp"
#include "constcl/serialize.hpp"
#include "constcl/tensor.hpp"
#include "test_util.hpp"

using namespace constcl;
using testutil::random_tensor;

TEST_CASE("op_apply basics") {
  SUBCASE("matmul identity") {
    Tensor eye = Tensor::from_f64({2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor v = Tensor::from_f64({2, 1}, std::vector<double>{3, 4});
    Tensor out = op_apply(OpKind::MatMul, {eye, v});
    CHECK(out.at(0) == 3);
    CHECK(out.at(1) == 4);
  }
  SUBCASE("relu definition") {
    Tensor x = Tensor::from_f64({3}, std::vector<double>{-1, 0, 2});
    Tensor out = op_apply(OpKind::Relu, {x});
    CHECK(out.at(0) == 0);
    CHECK(out.at(1) == 0);
    CHECK(out.at(2) == 2);
  }
  SUBCASE("sum matches scalar loop") {
    Tensor x = random_tensor({4, 5}, 7);
    double expect = 0;
    for (int64_t i = 0; i < x.numel(); ++i) expect += x.at(i);
    CHECK(sum(x).item() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("shape mismatch names op and dims") {
    Tensor a = Tensor::zeros({2, 3}, DType::F64);
    Tensor b = Tensor::zeros({4}, DType::F64);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::invalid_argument);
    CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
  }
  SUBCASE("slice out of range") {
    Tensor a = Tensor::zeros({2, 3}, DType::F64);
    CHECK_THROWS_AS(slice(a, {0, 1}, {2, 5}), std::invalid_argument);
  }
}

TEST_CASE("leading-axis expansion") {
  Tensor a = random_tensor({2, 3}, 1);
  Tensor b = random_tensor({3}, 2);
  Tensor out = add(a, b);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(out.at(i * 3 + j) == doctest::Approx(a.at(i * 3 + j) + b.at(j)));
  // prefix-shaped operand is rejected
  Tensor c = random_tensor({2}, 3);
  CHECK_THROWS_AS(add(a, c), std::invalid_argument);
}

TEST_CASE("softmax") {
  SUBCASE("symmetry") {
    Tensor x = Tensor::from_f64({2}, std::vector<double>{0, 0});
    Tensor s = softmax(x, 0);
    CHECK(s.at(0) == doctest::Approx(0.5));
    CHECK(s.at(1) == doctest::Approx(0.5));
  }
  SUBCASE("no overflow at large logits") {
    Tensor x = Tensor::from_f64({2}, std::vector<double>{1000, 1000});
    Tensor s = softmax(x, 0);
    CHECK(s.at(0) == doctest::Approx(0.5));
    CHECK(std::isfinite(s.at(0)));
  }
  SUBCASE("matches exp/sum oracle") {
    Tensor x = random_tensor({7}, 11, -3, 3);
    Tensor s = softmax(x, 0);
    double denom = 0;
    for (int64_t i = 0; i < 7; ++i) denom += std::exp(x.at(i));
    for (int64_t i = 0; i < 7; ++i)
      CHECK(s.at(i) == doctest::Approx(std::exp(x.at(i)) / denom).epsilon(1e-12));
  }
  SUBCASE("sums to one along axis for random inputs") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
      Tensor x = random_tensor({3, 4, 2}, 100 + seed, -5, 5);
      for (int64_t axis = 0; axis < 3; ++axis) {
        Tensor s = softmax(x, axis);
        Tensor sums = sum(s, {axis});
        for (int64_t i = 0; i < sums.numel(); ++i)
          CHECK(sums.at(i) == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
  SUBCASE("axis out of range") {
    CHECK_THROWS_AS(softmax(Tensor::zeros({2}, DType::F64), 1), std::invalid_argument);
  }
}

TEST_CASE("l2_normalize") {
  SUBCASE("3-4-5 triangle") {
    Tensor x = Tensor::from_f64({2}, std::vector<double>{3, 4});
    Tensor n = l2_normalize(x, 0);
    CHECK(n.at(0) == doctest::Approx(0.6));
    CHECK(n.at(1) == doctest::Approx(0.8));
  }
  SUBCASE("zero vector eps guard") {
    Tensor x = Tensor::zeros({4}, DType::F64);
    Tensor n = l2_normalize(x, 0, 1e-12);
    for (int64_t i = 0; i < 4; ++i) CHECK(n.at(i) == 0.0);
  }
  SUBCASE("unit norm for random vectors") {
    Tensor x = random_tensor({16}, 3);
    Tensor n = l2_normalize(x, 0);
    double norm = 0;
    for (int64_t i = 0; i < 16; ++i) norm += n.at(i) * n.at(i);
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("backward") {
  SUBCASE("x squared") {
    Tensor x = Tensor::scalar(3.0, DType::F64);
    x.mark_trainable("x");
    Tensor loss = mul(x, x);
    GradMap g = backward(loss, std::vector<Tensor>{x});
    CHECK(g.at(x).at(0) == doctest::Approx(6.0));
  }
  SUBCASE("relu subgradient at negatives") {
    Tensor x = Tensor::from_f64({2}, std::vector<double>{-1, 2});
    x.mark_trainable("x");
    GradMap g = backward(sum(relu(x)), std::vector<Tensor>{x});
    CHECK(g.at(x).at(0) == 0.0);
    CHECK(g.at(x).at(1) == 1.0);
  }
  SUBCASE("non-scalar root rejected") {
    Tensor x = Tensor::zeros({2}, DType::F64);
    x.mark_trainable("x");
    CHECK_THROWS_AS(backward(x, std::vector<Tensor>{x}), std::invalid_argument);
  }
  SUBCASE("unreachable leaves get zero gradients, untouched") {
    Tensor x = Tensor::scalar(2.0, DType::F64);
    Tensor y = Tensor::scalar(5.0, DType::F64);
    x.mark_trainable("x");
    y.mark_trainable("y");
    GradMap g = backward(mul(x, x), std::vector<Tensor>{x, y});
    CHECK(g.touched(x));
    CHECK(!g.touched(y));
    CHECK(g.at(y).at(0) == 0.0);
  }
  SUBCASE("deterministic accumulation is bit-identical") {
    auto run = [] {
      Tensor x = random_tensor({4, 4}, 9);
      x.mark_trainable("x");
      Tensor h = matmul(x, x);
      Tensor loss = sum(mul(h, exp(scale(x, 0.1))));
      return backward(loss, std::vector<Tensor>{x}).at(x).to_f64();
    };
    auto a = run(), b = run();
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("gradcheck over every differentiable op kind") {
  // random shapes <= 6 per dim, 5 seeds per kind
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const uint64_t s = seed * 1000;
    auto weighted_sum = [s](const Tensor& y) {
      // weight with a fixed random projection so every output coordinate matters
      Tensor w = random_tensor(y.shape(), s + 77, 0.5, 1.5);
      return sum(mul(y, w));
    };
    auto check1 = [&](const char* name, auto fn, Shape shape, double lo = -1, double hi = 1) {
      Tensor x = random_tensor(shape, s, lo, hi);
      const double err = gradcheck(
          [&](const std::vector<Tensor>& in) { return weighted_sum(fn(in[0])); }, {x});
      INFO(name << " seed " << seed);
      CHECK(err < 1e-4);
    };
    check1("exp", [](const Tensor& x) { return exp(x); }, {3, 4});
    check1("log", [](const Tensor& x) { return log(x); }, {3, 4}, 0.5, 2.0);
    check1("sqrt", [](const Tensor& x) { return sqrt(x); }, {5}, 0.5, 2.0);
    check1("relu", [](const Tensor& x) { return relu(x); }, {4, 3});
    check1("sum_axes", [](const Tensor& x) { return sum(x, {1}); }, {3, 4, 2});
    check1("mean_axes", [](const Tensor& x) { return mean(x, {0, 2}); }, {3, 4, 2});
    check1("reshape", [](const Tensor& x) { return reshape(x, {6, 2}); }, {3, 4});
    check1("transpose", [](const Tensor& x) { return transpose(x, {2, 0, 1}); }, {2, 3, 4});
    check1("slice", [](const Tensor& x) { return slice(x, {1, 0}, {3, 2}); }, {4, 3});
    check1("softmax", [](const Tensor& x) { return softmax(x, 1); }, {3, 5});
    check1("l2norm", [](const Tensor& x) { return l2_normalize(x, 1); }, {3, 5});
    check1("take_rows", [](const Tensor& x) {
      return take_rows(x, std::vector<int64_t>{2, 0, 2});
    }, {4, 3});
    check1("lincomb", [](const Tensor& x) {
      return lincomb_rows(x, std::vector<int64_t>{0, 2, 2, 3},
                          std::vector<double>{0.5, 1.5, -0.25, 2.0}, 3);
    }, {4, 3});

    {
      Tensor a = random_tensor({3, 4}, s + 1);
      Tensor b = random_tensor({4, 2}, s + 2);
      const double err = gradcheck(
          [&](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1])); },
          {a, b});
      CHECK(err < 1e-4);
    }
    for (auto kind : {OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Div}) {
      Tensor a = random_tensor({2, 3}, s + 3, 0.5, 2.0);
      Tensor b = random_tensor({3}, s + 4, 0.5, 2.0);  // broadcast operand
      const double err = gradcheck(
          [&](const std::vector<Tensor>& in) {
            return weighted_sum(op_apply(kind, {in[0], in[1]}));
          },
          {a, b});
      INFO("binary op " << op_name(kind) << " seed " << seed);
      CHECK(err < 1e-4);
    }
    {
      Tensor a = random_tensor({2, 3}, s + 5);
      Tensor b = random_tensor({4, 3}, s + 6);
      const double err = gradcheck(
          [&](const std::vector<Tensor>& in) {
            return weighted_sum(concat({in[0], in[1]}, 0));
          },
          {a, b});
      CHECK(err < 1e-4);
    }
    {
      Tensor x = random_tensor({1, 3, 4, 4, 2}, s + 7);
      const int64_t kernel[3] = {2, 3, 3}, stride[3] = {1, 1, 1}, pad[3] = {0, 1, 1};
      const double err = gradcheck(
          [&](const std::vector<Tensor>& in) {
            return weighted_sum(im2col(in[0], kernel, stride, pad));
          },
          {x});
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("gradcheck hand cases") {
  Tensor x = random_tensor({5}, 42);
  const double err = gradcheck(
      [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[0])); }, {x});
  CHECK(err < 1e-7);
  CHECK_THROWS_AS(gradcheck([](const std::vector<Tensor>& in) { return in[0]; },
                            {random_tensor({3}, 1)}),
                  std::invalid_argument);
}

TEST_CASE("CSTT serialization") {
  SUBCASE("round trip preserves bytes") {
    Tensor t = random_tensor({2, 3, 4}, 5, -2, 2, DType::F32);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss, "<mem>");
    REQUIRE(back.shape() == t.shape());
    REQUIRE(back.dtype() == DType::F32);
    auto a = t.data_f32(), b = back.data_f32();
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    std::stringstream s2;
    write_tensor(s2, back);
    CHECK(ss.str() == s2.str());
  }
  SUBCASE("scalar f64 round trip") {
    Tensor t = Tensor::scalar(3.25, DType::F64);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss, "<mem>");
    CHECK(back.rank() == 0);
    CHECK(back.item() == 3.25);
  }
  SUBCASE("bad magic names the source") {
    std::stringstream ss("XXXXnope");
    CHECK_THROWS_WITH_AS(read_tensor(ss, "somefile.cstt"), doctest::Contains("somefile.cstt"),
                         std::runtime_error);
  }
  SUBCASE("truncated data") {
    Tensor t = random_tensor({4}, 6);
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();
    bytes.resize(bytes.size() - 5);
    std::stringstream cut(bytes);
    CHECK_THROWS_AS(read_tensor(cut, "<mem>"), std::runtime_error);
  }
}

TEST_CASE("tensor invariants") {
  Tensor t = random_tensor({3, 4}, 8);
  CHECK(t.numel() == 12);
  CHECK(numel_of(t.shape()) == static_cast<int64_t>(t.to_f64().size()));
  CHECK_THROWS_AS(Tensor::from_f64({2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
}
