// Times one training step of the default model at a given batch size.

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "mcdiff/model.hpp"

int main(int argc, char** argv) {
  using namespace mcdiff;
  const std::size_t B = argc > 1 ? std::size_t(std::atoi(argv[1])) : 32;
  const int iters = argc > 2 ? std::atoi(argv[2]) : 5;
  ModelConfig cfg;
  Model<float> m(cfg, 1);
  std::printf("params: %zu (denoiser %zu)\n", m.param_count(), m.denoiser_param_count());
  Rng rng(3);
  for (int it = 0; it < iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    Tape<float> tp;
    auto x = tp.constant(gaussian<float>(rng, {B, 3, 16, 16}));
    auto lay = tp.constant(gaussian<float>(rng, {B, 1, 16, 16}));
    std::vector<std::vector<int>> ids(B, m.vocab().encode({"red", "circle"}));
    auto zp = m.encode_prompts(tp, ids);
    auto zx = m.encode_images(tp, lay);
    auto z = m.fuse(tp, zp, zx);
    std::vector<int> t(B, 500);
    auto eps = m.predict_eps(tp, x, t, z);
    auto loss = mse(eps, tp.constant(gaussian<float>(rng, {B, 3, 16, 16})));
    const auto t1 = std::chrono::steady_clock::now();
    tp.backward(loss);
    const auto t2 = std::chrono::steady_clock::now();
    std::printf("fwd %.1f ms  bwd %.1f ms  nodes %zu\n",
                std::chrono::duration<double, std::milli>(t1 - t0).count(),
                std::chrono::duration<double, std::milli>(t2 - t1).count(), tp.size());
  }
}
