#pragma once

#include <string>

#include "bevdiff/tensor.hpp"

namespace bevdiff {

// Binary P6 PPM, 8-bit, from a [3,H,W] float canvas in [0,1].
void write_ppm(const std::string& path, const Tensor& canvas);

// Canvas dump filename: <prefix>/ep<episode>_step<step>_<kind>.ppm
std::string canvas_dump_path(const std::string& dir, const std::string& episode, int step,
                             const std::string& kind);

}  // namespace bevdiff
