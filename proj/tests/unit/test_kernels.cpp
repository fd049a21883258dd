#include <doctest.h>

#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "textcsp/simd/kernels.hpp"

using namespace textcsp;

namespace {

std::vector<float> random_vec(Index n, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

// Tolerance scales with the magnitude of the accumulated products.
void check_close(const std::vector<float>& ref, const std::vector<float>& got, Index k) {
  REQUIRE(ref.size() == got.size());
  const float tol = 2e-6f * static_cast<float>(k + 1);
  for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE(std::abs(ref[i] - got[i]) <= tol);
}

}  // namespace

TEST_CASE("isa selection reports a usable variant") {
  CHECK((simd::active_isa() == simd::Isa::kScalar || simd::avx2_supported()));
  {
    simd::ScopedIsa guard(simd::Isa::kScalar);
    CHECK(simd::active_isa() == simd::Isa::kScalar);
  }
  if (!simd::avx2_supported()) CHECK_THROWS_AS(simd::set_active_isa(simd::Isa::kAvx2), ConfigError);
}

TEST_CASE("gemm variants agree with the scalar reference") {
  if (!simd::avx2_supported()) return;
  Rng rng(3);
  const Index shapes[][3] = {{1, 1, 1}, {4, 16, 8}, {5, 17, 3}, {8, 37, 27}, {3, 100, 130},
                             {13, 33, 0}, {7, 1, 64}, {48, 65, 9}};
  for (const auto& s : shapes) {
    const Index m = s[0], n = s[1], k = s[2];
    for (bool accumulate : {false, true}) {
      auto a = random_vec(m * k, rng);
      auto b = random_vec(k * n, rng);
      auto bt = random_vec(n * k, rng);
      auto c0 = random_vec(m * n, rng);

      auto ref = c0;
      auto got = c0;
      simd::scalar::gemm_nn(m, n, k, a.data(), k, b.data(), n, ref.data(), n, accumulate);
      {
        simd::ScopedIsa guard(simd::Isa::kAvx2);
        simd::gemm_nn(m, n, k, a.data(), k, b.data(), n, got.data(), n, accumulate);
      }
      check_close(ref, got, k);

      ref = c0;
      got = c0;
      simd::scalar::gemm_nt(m, n, k, a.data(), k, bt.data(), k, ref.data(), n, accumulate);
      {
        simd::ScopedIsa guard(simd::Isa::kAvx2);
        simd::gemm_nt(m, n, k, a.data(), k, bt.data(), k, got.data(), n, accumulate);
      }
      check_close(ref, got, k);
    }
  }
}

TEST_CASE("gemm_nt handles reductions longer than one cache chunk") {
  if (!simd::avx2_supported()) return;
  Rng rng(5);
  const Index m = 6, n = 5, k = 5000;
  auto a = random_vec(m * k, rng);
  auto b = random_vec(n * k, rng);
  std::vector<float> ref(m * n), got(m * n);
  simd::scalar::gemm_nt(m, n, k, a.data(), k, b.data(), k, ref.data(), n, false);
  simd::ScopedIsa guard(simd::Isa::kAvx2);
  simd::gemm_nt(m, n, k, a.data(), k, b.data(), k, got.data(), n, false);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-4));
}

TEST_CASE("strided leading dimensions are respected") {
  if (!simd::avx2_supported()) return;
  Rng rng(9);
  const Index m = 5, n = 19, k = 11, lda = 14, ldb = 23, ldc = 21;
  auto a = random_vec(m * lda, rng);
  auto b = random_vec(k * ldb, rng);
  auto c = random_vec(m * ldc, rng);
  auto ref = c;
  simd::scalar::gemm_nn(m, n, k, a.data(), lda, b.data(), ldb, ref.data(), ldc, false);
  simd::ScopedIsa guard(simd::Isa::kAvx2);
  simd::gemm_nn(m, n, k, a.data(), lda, b.data(), ldb, c.data(), ldc, false);
  check_close(ref, c, k);
}

TEST_CASE("dot and axpy variants agree") {
  if (!simd::avx2_supported()) return;
  Rng rng(1);
  for (Index n : {0, 1, 7, 8, 15, 16, 17, 100, 1023}) {
    auto x = random_vec(n, rng);
    auto y = random_vec(n, rng);
    const float ref = simd::scalar::dot(n, x.data(), y.data());
    auto yr = y;
    simd::scalar::axpy(n, 0.37f, x.data(), yr.data());
    simd::ScopedIsa guard(simd::Isa::kAvx2);
    CHECK(std::abs(simd::dot(n, x.data(), y.data()) - ref) <= 1e-5f * static_cast<float>(n + 1));
    auto ya = y;
    simd::axpy(n, 0.37f, x.data(), ya.data());
    check_close(yr, ya, 1);
  }
}

TEST_CASE("double calls use the exact scalar path") {
  Rng rng(2);
  std::vector<double> a(12), b(20), c(15), ref(15);
  for (auto* v : {&a, &b}) for (auto& x : *v) x = rng.uniform(-1, 1);
  simd::gemm_nn(3, 5, 4, a.data(), 4, b.data(), 5, c.data(), 5, false);
  simd::scalar::gemm_nn(3, 5, 4, a.data(), 4, b.data(), 5, ref.data(), 5, false);
  CHECK(c == ref);
}

TEST_CASE("transpose is an involution") {
  std::vector<int> src(35), t(35), back(35);
  for (int i = 0; i < 35; ++i) src[static_cast<std::size_t>(i)] = i;
  simd::transpose<int>(5, 7, src.data(), t.data());
  CHECK(t[1] == 7);
  simd::transpose<int>(7, 5, t.data(), back.data());
  CHECK(back == src);
}
