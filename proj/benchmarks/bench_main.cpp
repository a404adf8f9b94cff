#include <benchmark/benchmark.h>

#include "splatfix/image.hpp"
#include "splatfix/rng.hpp"

namespace {

void BM_GaussianBlur(benchmark::State& state) {
  splatfix::Image img(96, 96, 3);
  splatfix::Rng rng(1);
  for (auto& v : img.data) v = rng.uniform();
  for (auto _ : state) {
    auto out = splatfix::gaussian_blur(img, 1.5);
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_GaussianBlur);

}  // namespace

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  return 0;
}
