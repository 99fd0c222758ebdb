#include "nerfca/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "nerfca/errors.hpp"
#include "nerfca/parallel.hpp"

namespace nerfca {

int default_thread_count() {
    if (const char* env = std::getenv("NERFCA_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

namespace {

struct Header {
    std::string magic;
    int width = 0;
    int height = 0;
    double scale = 0.0;
};

Header read_header(std::istream& is, const std::filesystem::path& path, bool with_scale) {
    Header h;
    is >> h.magic >> h.width >> h.height;
    if (with_scale) is >> h.scale;
    if (!is || h.width < 1 || h.height < 1)
        throw FormatError("malformed raster header in " + path.string());
    is.get();  // single whitespace byte before the payload
    return h;
}

template <typename T>
void write_float_map(const std::filesystem::path& path, const Raster& image, const char* magic) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << magic << "\n" << image.width << " " << image.height << "\n-1.0\n";
    // Bottom-to-top scanlines, as in the PFM convention.
    for (int y = image.height - 1; y >= 0; --y)
        for (int x = 0; x < image.width; ++x) {
            const T v = static_cast<T>(image.at(x, y));
            os.write(reinterpret_cast<const char*>(&v), sizeof(T));
        }
    if (!os) throw IoError("failed writing " + path.string());
}

template <typename T>
Raster read_float_map(const std::filesystem::path& path, const char* magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("missing raster file " + path.string());
    const Header h = read_header(is, path, true);
    if (h.magic != magic) throw FormatError("unexpected raster magic in " + path.string());
    if (!(h.scale < 0.0)) throw FormatError("only little-endian rasters are supported: " + path.string());
    Raster r{h.width, h.height, std::vector<double>(static_cast<std::size_t>(h.width) * h.height)};
    for (int y = h.height - 1; y >= 0; --y)
        for (int x = 0; x < h.width; ++x) {
            T v;
            if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
                throw FormatError("truncated raster " + path.string());
            r.at(x, y) = static_cast<double>(v);
        }
    return r;
}

}  // namespace

void write_pfm(const std::filesystem::path& path, const Raster& image) {
    write_float_map<float>(path, image, "Pf");
}

Raster read_pfm(const std::filesystem::path& path) { return read_float_map<float>(path, "Pf"); }

void write_pdm(const std::filesystem::path& path, const Raster& image) {
    write_float_map<double>(path, image, "Pd");
}

Raster read_pdm(const std::filesystem::path& path) { return read_float_map<double>(path, "Pd"); }

void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& pixels) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width, int& height) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("missing raster file " + path.string());
    Header h = read_header(is, path, true);
    if (h.magic != "P5" || h.scale != 255.0)
        throw FormatError("unsupported graymap " + path.string());
    width = h.width;
    height = h.height;
    std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height);
    if (!is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size())))
        throw FormatError("truncated graymap " + path.string());
    return px;
}

void write_pgm_scaled(const std::filesystem::path& path, const Raster& image, double lo, double hi) {
    std::vector<std::uint8_t> px(image.pixels.size());
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double v = std::clamp((image.pixels[i] - lo) / span, 0.0, 1.0);
        px[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
    write_pgm(path, image.width, image.height, px);
}

}  // namespace nerfca
