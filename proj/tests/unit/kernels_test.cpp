// Parallel kernels against their serial reference counterparts.

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "distill_span/kernels.hpp"

namespace distill_span::kernels {
namespace {

template <typename T>
std::vector<T> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
void expect_close(const std::vector<T>& a, const std::vector<T>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

template <typename T>
class KernelParity : public ::testing::Test {
 protected:
  static double tol() { return sizeof(T) == 4 ? 1e-4 : 1e-12; }
};

using Types = ::testing::Types<float, double>;
TYPED_TEST_SUITE(KernelParity, Types);

TYPED_TEST(KernelParity, GemmAllTransposes) {
  using T = TypeParam;
  const std::size_t m = 13, n = 7, k = 29;
  for (Trans ta : {Trans::no, Trans::yes})
    for (Trans tb : {Trans::no, Trans::yes}) {
      auto a = random_values<T>(m * k, 1), b = random_values<T>(k * n, 2);
      auto c1 = random_values<T>(m * n, 3), c2 = c1;
      const std::size_t lda = ta == Trans::no ? k : m, ldb = tb == Trans::no ? n : k;
      gemm<T>(ta, tb, m, n, k, T(0.5), a.data(), lda, b.data(), ldb, T(2), c1.data(), n);
      serial::gemm<T>(ta, tb, m, n, k, T(0.5), a.data(), lda, b.data(), ldb, T(2),
                      c2.data(), n);
      expect_close(c1, c2, this->tol());
    }
}

TYPED_TEST(KernelParity, GemmStridedSubmatrix) {
  using T = TypeParam;
  // 3x4 block with leading dimension 10, as used for attention heads.
  auto a = random_values<T>(3 * 10, 4), b = random_values<T>(5 * 10, 5);
  std::vector<T> c1(3 * 5), c2(3 * 5);
  gemm<T>(Trans::no, Trans::yes, 3, 5, 4, T(1), a.data() + 2, 10, b.data() + 2, 10, T(0),
          c1.data(), 5);
  serial::gemm<T>(Trans::no, Trans::yes, 3, 5, 4, T(1), a.data() + 2, 10, b.data() + 2, 10,
                  T(0), c2.data(), 5);
  expect_close(c1, c2, this->tol());
}

TYPED_TEST(KernelParity, DepthwiseConv) {
  using T = TypeParam;
  for (std::size_t k : {1, 3, 7}) {
    auto x = random_values<T>(3 * 11 * 5, 6), w = random_values<T>(k * 5, 7);
    std::vector<T> y1(x.size()), y2(x.size());
    depthwise_conv1d<T>(3, 11, 5, k, x.data(), w.data(), y1.data());
    serial::depthwise_conv1d<T>(3, 11, 5, k, x.data(), w.data(), y2.data());
    expect_close(y1, y2, this->tol());
  }
}

TYPED_TEST(KernelParity, SoftmaxWithBroadcastMask) {
  using T = TypeParam;
  auto x = random_values<T>(6 * 9, 8);
  std::vector<std::uint8_t> mask(9, 1);
  mask[3] = mask[8] = 0;
  std::vector<T> y1(x.size()), y2(x.size());
  softmax_rows<T>(6, 9, x.data(), mask, y1.data());
  serial::softmax_rows<T>(6, 9, x.data(), mask, y2.data());
  expect_close(y1, y2, this->tol());
  EXPECT_EQ(y1[3], T(0));
}

TYPED_TEST(KernelParity, LayerNormAndGelu) {
  using T = TypeParam;
  auto x = random_values<T>(5 * 8, 9), g = random_values<T>(8, 10), b = random_values<T>(8, 11);
  std::vector<T> y1(x.size()), y2(x.size()), r1(5), r2(5);
  layer_norm_rows<T>(5, 8, x.data(), g.data(), b.data(), T(1e-5), y1.data(), nullptr,
                     r1.data());
  serial::layer_norm_rows<T>(5, 8, x.data(), g.data(), b.data(), T(1e-5), y2.data(), nullptr,
                             r2.data());
  expect_close(y1, y2, this->tol());
  expect_close(r1, r2, this->tol() * 10);
  gelu<T>(x.size(), x.data(), y1.data());
  serial::gelu<T>(x.size(), x.data(), y2.data());
  expect_close(y1, y2, this->tol());
}

TEST(FlopCounter, CountsGemmAndConvOnly) {
  std::vector<double> a(6, 1.0), b(6, 1.0), c(4);
  FlopCounterScope scope;
  gemm<double>(Trans::no, Trans::no, 2, 2, 3, 1.0, a.data(), 3, b.data(), 2, 0.0, c.data(), 2);
  EXPECT_EQ(scope.flops(), 2u * 2 * 2 * 3);
  std::vector<double> x(12), w(6), y(12);
  depthwise_conv1d<double>(1, 6, 2, 3, x.data(), w.data(), y.data());
  EXPECT_EQ(scope.flops(), 24u + 2u * 6 * 2 * 3);
  gelu<double>(12, x.data(), y.data());
  EXPECT_EQ(scope.flops(), 24u + 72u);
}

TEST(Backend, ScopedSelectionRestores) {
  EXPECT_EQ(backend(), Backend::parallel);
  {
    ScopedBackend s(Backend::serial);
    EXPECT_EQ(backend(), Backend::serial);
  }
  EXPECT_EQ(backend(), Backend::parallel);
}

}  // namespace
}  // namespace distill_span::kernels
