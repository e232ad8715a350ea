// Serial reference vs OpenMP kernels at training-batch shapes.
// OMP_NUM_THREADS controls the parallel side.

#include <benchmark/benchmark.h>

#include "mvret/numerics.hpp"
#include "mvret/rng.hpp"

namespace {

mvret::Tensor random_tensor(mvret::Shape shape, std::uint64_t seed) {
  mvret::Rng rng(seed);
  mvret::Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

// 16 sequences (8 real + 8 virtual) of 24 views, d = 64.
struct ConvFixture {
  mvret::Tensor x = random_tensor({16, 64, 24}, 1);
  mvret::Tensor w = random_tensor({64, 64, 3}, 2);
  mvret::Tensor b = random_tensor({64}, 3);
  mvret::Tensor gy = random_tensor({16, 64, 8}, 4);
};

void BM_conv_forward_reference(benchmark::State& state) {
  ConvFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::reference::conv1d_chunk(f.x, f.w, f.b, 3));
}
void BM_conv_forward_parallel(benchmark::State& state) {
  ConvFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::conv1d_chunk(f.x, f.w, f.b, 3));
}
void BM_conv_backward_reference(benchmark::State& state) {
  ConvFixture f;
  for (auto _ : state)
    benchmark::DoNotOptimize(mvret::reference::conv1d_chunk_backward(f.gy, f.x, f.w, 3));
}
void BM_conv_backward_parallel(benchmark::State& state) {
  ConvFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::conv1d_chunk_backward(f.gy, f.x, f.w, 3));
}

struct LinearFixture {
  mvret::Tensor x = random_tensor({8, 24, 32}, 5);
  mvret::Tensor w = random_tensor({64, 32}, 6);
  mvret::Tensor b = random_tensor({64}, 7);
  mvret::Tensor gy = random_tensor({8, 24, 64}, 8);
};

void BM_linear_forward_reference(benchmark::State& state) {
  LinearFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::reference::linear(f.x, f.w, f.b));
}
void BM_linear_forward_parallel(benchmark::State& state) {
  LinearFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::linear(f.x, f.w, f.b));
}
void BM_linear_backward_reference(benchmark::State& state) {
  LinearFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::reference::linear_backward(f.gy, f.x, f.w));
}
void BM_linear_backward_parallel(benchmark::State& state) {
  LinearFixture f;
  for (auto _ : state) benchmark::DoNotOptimize(mvret::linear_backward(f.gy, f.x, f.w));
}

void BM_batchnorm_reference(benchmark::State& state) {
  auto x = random_tensor({16, 64, 8}, 9);
  mvret::Tensor ones({64}, 1.0), zeros({64});
  for (auto _ : state)
    benchmark::DoNotOptimize(mvret::reference::batchnorm1d_forward(x, ones, zeros, zeros, ones,
                                                                   mvret::Mode::train));
}
void BM_batchnorm_parallel(benchmark::State& state) {
  auto x = random_tensor({16, 64, 8}, 9);
  mvret::Tensor ones({64}, 1.0), zeros({64});
  for (auto _ : state)
    benchmark::DoNotOptimize(
        mvret::batchnorm1d_forward(x, ones, zeros, zeros, ones, mvret::Mode::train));
}

// Retrieval-sized similarity matrix: 200 queries x 800 targets.
void BM_cosine_reference(benchmark::State& state) {
  auto q = random_tensor({200, 64}, 10), t = random_tensor({800, 64}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(mvret::reference::cosine_similarity_matrix(q, t));
}
void BM_cosine_parallel(benchmark::State& state) {
  auto q = random_tensor({200, 64}, 10), t = random_tensor({800, 64}, 11);
  for (auto _ : state) benchmark::DoNotOptimize(mvret::cosine_similarity_matrix(q, t));
}

}  // namespace

BENCHMARK(BM_conv_forward_reference);
BENCHMARK(BM_conv_forward_parallel);
BENCHMARK(BM_conv_backward_reference);
BENCHMARK(BM_conv_backward_parallel);
BENCHMARK(BM_linear_forward_reference);
BENCHMARK(BM_linear_forward_parallel);
BENCHMARK(BM_linear_backward_reference);
BENCHMARK(BM_linear_backward_parallel);
BENCHMARK(BM_batchnorm_reference);
BENCHMARK(BM_batchnorm_parallel);
BENCHMARK(BM_cosine_reference);
BENCHMARK(BM_cosine_parallel);

BENCHMARK_MAIN();
