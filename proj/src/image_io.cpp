#include "ul/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ul {
namespace {

constexpr int kMaxVal = 65535;

uint16_t quantize(double v) {
    const double clamped = std::min(1.0, std::max(-1.0, v));
    const double scaled = (clamped + 1.0) * 0.5 * kMaxVal;
    const long q = std::lround(scaled);
    return static_cast<uint16_t>(std::min<long>(kMaxVal, std::max<long>(0, q)));
}

int read_pnm_int(std::istream& in, const std::string& path) {
    // Skips whitespace and '#' comments between header tokens.
    int c = in.peek();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            in.get();
        }
        c = in.peek();
    }
    int v = 0;
    if (!(in >> v)) throw std::runtime_error("image: malformed header in '" + path + "'");
    return v;
}

}  // namespace

void write_pnm(const std::string& path, const Tensor& image) {
    if (image.shape.size() != 3 || (image.shape[2] != 1 && image.shape[2] != 3)) {
        throw std::invalid_argument("image: expected [H,W,C] with C in {1,3}, got " +
                                    shape_str(image.shape));
    }
    if (!image.all_finite()) throw std::invalid_argument("image: non-finite pixels");
    const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("image: cannot write '" + path + "'");
    out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n" << kMaxVal << "\n";
    std::vector<unsigned char> row(static_cast<size_t>(w) * c * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w * c; ++x) {
            const uint16_t q = quantize(image.data[static_cast<size_t>(y) * w * c + x]);
            row[static_cast<size_t>(x) * 2] = static_cast<unsigned char>(q >> 8);  // big-endian per format
            row[static_cast<size_t>(x) * 2 + 1] = static_cast<unsigned char>(q & 0xff);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("image: failed writing '" + path + "'");
}

Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("image: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    int c;
    if (magic == "P5") {
        c = 1;
    } else if (magic == "P6") {
        c = 3;
    } else {
        throw std::runtime_error("image: '" + path + "' is not a binary PNM file");
    }
    const int w = read_pnm_int(in, path);
    const int h = read_pnm_int(in, path);
    const int maxval = read_pnm_int(in, path);
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) {
        throw std::runtime_error("image: malformed header in '" + path + "'");
    }
    in.get();  // single whitespace after maxval
    const int bytes_per = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(static_cast<size_t>(h) * w * c * bytes_per);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw std::runtime_error("image: truncated pixel data in '" + path + "'");
    }
    Tensor img = Tensor::zeros({h, w, c});
    for (size_t i = 0; i < img.data.size(); ++i) {
        int q;
        if (bytes_per == 2) {
            q = (static_cast<int>(raw[i * 2]) << 8) | raw[i * 2 + 1];
        } else {
            q = raw[i];
        }
        img.data[i] = static_cast<double>(q) / maxval * 2.0 - 1.0;
    }
    return img;
}

Tensor fit_image(const Tensor& image, int resolution, int channels) {
    if (image.shape.size() != 3) {
        throw std::invalid_argument("image: expected [H,W,C], got " + shape_str(image.shape));
    }
    if (resolution < 1 || (channels != 1 && channels != 3)) {
        throw std::invalid_argument("image: bad target resolution/channels");
    }
    const int h = image.shape[0], w = image.shape[1], c = image.shape[2];
    const int side = std::min(h, w);
    const int y0 = (h - side) / 2, x0 = (w - side) / 2;
    Tensor out = Tensor::zeros({resolution, resolution, channels});
    for (int y = 0; y < resolution; ++y) {
        // Nearest-neighbor sample of the centered square crop.
        const int sy = y0 + std::min(side - 1, y * side / resolution);
        for (int x = 0; x < resolution; ++x) {
            const int sx = x0 + std::min(side - 1, x * side / resolution);
            for (int k = 0; k < channels; ++k) {
                double v;
                if (c == channels) {
                    v = image.data[(static_cast<size_t>(sy) * w + sx) * c + k];
                } else if (channels == 1) {
                    double acc = 0.0;  // rgb -> gray by mean
                    for (int j = 0; j < c; ++j) {
                        acc += image.data[(static_cast<size_t>(sy) * w + sx) * c + j];
                    }
                    v = acc / c;
                } else {
                    v = image.data[(static_cast<size_t>(sy) * w + sx) * c];  // gray -> rgb
                }
                out.data[(static_cast<size_t>(y) * resolution + x) * channels + k] =
                    std::min(1.0, std::max(-1.0, v));
            }
        }
    }
    return out;
}

}  // namespace ul
