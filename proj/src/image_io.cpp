#include "bevdiff/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace bevdiff {

void write_ppm(const std::string& path, const Tensor& canvas) {
    if (canvas.rank() != 3 || canvas.dim(0) != 3)
        throw DimensionError("write_ppm expects a [3,H,W] canvas");
    const int h = canvas.dim(1), w = canvas.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P6\n" << w << " " << h << "\n255\n";
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                float v = canvas.data()[static_cast<size_t>(c) * plane +
                                        static_cast<size_t>(y) * w + x];
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<long>(row.size()));
    }
    if (!out) throw IoError("short write to " + path);
}

std::string canvas_dump_path(const std::string& dir, const std::string& episode, int step,
                             const std::string& kind) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "_step%05d_", step);
    return dir + "/ep" + episode + buf + kind + ".ppm";
}

}  // namespace bevdiff
