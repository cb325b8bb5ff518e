#include "disendiff/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace disendiff {

namespace {
uint8_t to_byte(double v) {
    // [-1,1] -> [0,255], round half up
    const double scaled = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    return static_cast<uint8_t>(std::clamp(std::floor(scaled + 0.5), 0.0, 255.0));
}
}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
    const Shape& s = image.shape();
    if (s.size() != 3 || s[0] != 3)
        throw std::invalid_argument("write_ppm: expected (3,H,W) image");
    const int h = s[1], w = s[2];
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c)
                f.put(static_cast<char>(to_byte(image.at((c * h + i) * w + j))));
}

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255)
        throw std::runtime_error("read_ppm: unsupported format in " + path);
    f.get();  // single whitespace after header
    std::vector<double> data(static_cast<size_t>(3) * h * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) {
                const int b = f.get();
                if (b < 0) throw std::runtime_error("read_ppm: truncated file " + path);
                data[static_cast<size_t>((c * h + i) * w + j)] = b / 255.0 * 2.0 - 1.0;
            }
    return Tensor::from_data({3, h, w}, std::move(data));
}

void write_pgm_scaled(const std::string& path, const Tensor& map) {
    const Shape& s = map.shape();
    if (s.size() != 2) throw std::invalid_argument("write_pgm_scaled: expected (H,W) map");
    const int h = s[0], w = s[1];
    double mx = 0;
    for (double v : map.data()) mx = std::max(mx, v);
    const double scale = mx > 0 ? 255.0 / mx : 0.0;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm_scaled: cannot open " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    for (double v : map.data())
        f.put(static_cast<char>(static_cast<uint8_t>(
            std::clamp(std::floor(std::max(v, 0.0) * scale + 0.5), 0.0, 255.0))));
}

void write_pgm_mask(const std::string& path, const std::vector<uint8_t>& mask,
                    int h, int w) {
    if (static_cast<int>(mask.size()) != h * w)
        throw std::invalid_argument("write_pgm_mask: mask size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm_mask: cannot open " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    for (uint8_t v : mask) f.put(static_cast<char>(v ? 255 : 0));
}

}  // namespace disendiff
