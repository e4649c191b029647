#pragma once

// The three fixed images whose encodings are stored under tests/golden.

#include <string>
#include <vector>

#include "mcdiff/tensor.hpp"

namespace mcdiff::testing {

struct GoldenImage {
  std::string file;
  Tensor<double> image;
};

inline std::vector<GoldenImage> golden_images() {
  std::vector<GoldenImage> out;
  out.push_back({"white_1x1.ppm", Tensor<double>(Shape{3, 1, 1}, 1.0)});

  // k/8 - 1 ramp (k = 8 hits the 127.5 tie) plus two clamped entries.
  Tensor<double> ramp(Shape{3, 3, 4});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 4; ++x) ramp.at({c, y, x}) = double((c * 12 + y * 4 + x) % 17) / 8.0 - 1.0;
  ramp.at({0, 0, 0}) = 1.5;
  ramp.at({2, 2, 3}) = -3.0;
  out.push_back({"ramp_4x3.ppm", ramp});

  Tensor<double> checker(Shape{1, 5, 3});
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 3; ++x) checker.at({0, y, x}) = (y + x) % 2 ? 1.0 : -1.0;
  checker.at({0, 2, 1}) = 0.0;
  out.push_back({"checker_3x5.pgm", checker});
  return out;
}

}  // namespace mcdiff::testing
