#pragma once

#include <avd/error.hpp>
#include <avd/geometry.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

namespace avd {

// Row-major single-channel luminance raster with values in [0, 1].
struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, float fill = 0.0f)
        : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill)
    {
        detail::require(w >= 1 && h >= 1, "image dimensions must be positive");
    }

    float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }

    float at_clamped(int x, int y) const
    {
        return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
    }

    bool valid() const
    {
        if (width < 1 || height < 1 ||
            data.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
            return false;
        return std::all_of(data.begin(), data.end(),
                           [](float v) { return std::isfinite(v) && v >= 0.0f && v <= 1.0f; });
    }

    bool operator==(const ImageBuffer&) const = default;
};

// (x', y') = A (x, y) + (tx, ty), acting on pixel-center coordinates.
struct AffineMap {
    double a11 = 1.0, a12 = 0.0;
    double a21 = 0.0, a22 = 1.0;
    double tx = 0.0, ty = 0.0;

    static AffineMap identity() { return {}; }
    static AffineMap translation(double x, double y) { return {1.0, 0.0, 0.0, 1.0, x, y}; }
    static AffineMap rotation(double radians)
    {
        const double c = std::cos(radians), s = std::sin(radians);
        return {c, -s, s, c, 0.0, 0.0};
    }
    static AffineMap scaling(double sx, double sy) { return {sx, 0.0, 0.0, sy, 0.0, 0.0}; }

    double determinant() const { return a11 * a22 - a12 * a21; }

    Point apply(Point p) const { return {a11 * p.x + a12 * p.y + tx, a21 * p.x + a22 * p.y + ty}; }

    // Same map expressed on pixel-edge coordinates (center = edge - 0.5).
    Point apply_edge(Point p) const
    {
        const Point c = apply({p.x - 0.5, p.y - 0.5});
        return {c.x + 0.5, c.y + 0.5};
    }

    AffineMap inverse() const
    {
        const double det = determinant();
        detail::require(det != 0.0 && std::isfinite(det), "affine map is singular");
        AffineMap inv{a22 / det, -a12 / det, -a21 / det, a11 / det, 0.0, 0.0};
        inv.tx = -(inv.a11 * tx + inv.a12 * ty);
        inv.ty = -(inv.a21 * tx + inv.a22 * ty);
        return inv;
    }

    /// this ∘ first: applies `first`, then this map.
    AffineMap after(const AffineMap& first) const
    {
        return {a11 * first.a11 + a12 * first.a21,
                a11 * first.a12 + a12 * first.a22,
                a21 * first.a11 + a22 * first.a21,
                a21 * first.a12 + a22 * first.a22,
                a11 * first.tx + a12 * first.ty + tx,
                a21 * first.tx + a22 * first.ty + ty};
    }
};

// ---------------------------------------------------------------------------
// Decoding

namespace detail {

class PnmHeaderParser {
public:
    explicit PnmHeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    int next_int()
    {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_]))
            throw Error("malformed PNM header");
        long v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_++] - '0');
            if (v > 1'000'000'000)
                throw Error("PNM header value out of range");
        }
        return static_cast<int>(v);
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_offset()
    {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
            throw Error("malformed PNM header");
        return pos_ + 1;
    }

    std::size_t pos_ = 2;

private:
    void skip_space_and_comments()
    {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n')
                    ++pos_;
            } else {
                break;
            }
        }
    }

    std::span<const std::uint8_t> bytes_;
};

struct PnmInfo {
    int channels = 1;
    int width = 0;
    int height = 0;
    int maxval = 255;
    std::size_t offset = 0;
};

inline PnmInfo parse_pnm_header(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw Error("unsupported image format (expected binary PGM P5 or PPM P6)");
    PnmHeaderParser parser(bytes);
    PnmInfo info;
    info.channels = bytes[1] == '5' ? 1 : 3;
    info.width = parser.next_int();
    info.height = parser.next_int();
    info.maxval = parser.next_int();
    info.offset = parser.raster_offset();
    if (info.width < 1 || info.height < 1)
        throw Error("zero-dimension image");
    if (info.maxval < 1 || info.maxval > 65535)
        throw Error("PNM maxval out of range");
    return info;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad())
        throw Error("cannot read " + path.string());
    return bytes;
}

} // namespace detail

inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

/// Decodes binary PGM (P5) or PPM (P6) bytes into luminance in [0, 1].
inline ImageBuffer decode_pnm(std::span<const std::uint8_t> bytes)
{
    const detail::PnmInfo info = detail::parse_pnm_header(bytes);
    const std::size_t sample_bytes = info.maxval > 255 ? 2 : 1;
    const std::size_t pixels = static_cast<std::size_t>(info.width) * info.height;
    const std::size_t need = pixels * info.channels * sample_bytes;
    if (bytes.size() - info.offset < need)
        throw Error("truncated PNM raster");

    const std::uint8_t* raster = bytes.data() + info.offset;
    const double maxval = info.maxval;
    auto sample = [&](std::size_t index) -> double {
        if (sample_bytes == 1)
            return raster[index];
        return static_cast<double>((raster[2 * index] << 8) | raster[2 * index + 1]);
    };

    ImageBuffer img(info.width, info.height);
    for (std::size_t i = 0; i < pixels; ++i) {
        double v;
        if (info.channels == 1) {
            v = sample(i) / maxval;
        } else {
            v = (kLumaR * sample(3 * i) + kLumaG * sample(3 * i + 1) + kLumaB * sample(3 * i + 2)) /
                maxval;
        }
        img.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return img;
}

inline ImageBuffer load_image(const std::filesystem::path& path)
{
    const auto bytes = detail::read_file_bytes(path);
    try {
        return decode_pnm(bytes);
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

/// Reads only the header; cheap validity and dimension probe.
inline std::pair<int, int> probe_image_size(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    std::vector<std::uint8_t> head(512);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    const auto info = detail::parse_pnm_header(head);
    return {info.width, info.height};
}

inline std::vector<std::uint8_t> encode_pgm(const ImageBuffer& img)
{
    const std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.data.size());
    for (float v : img.data)
        out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    return out;
}

inline void save_pgm(const ImageBuffer& img, const std::filesystem::path& path)
{
    const auto bytes = encode_pgm(img);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Filtering and resampling

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma)
{
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k)
        v /= sum;
    return k;
}

// Bilinear lookup at pixel-center coordinates, clamp-to-edge.
inline double sample_bilinear(const ImageBuffer& img, double x, double y)
{
    x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    return (1.0 - fx) * (1.0 - fy) * img.at(x0, y0) + fx * (1.0 - fy) * img.at(x1, y0) +
           (1.0 - fx) * fy * img.at(x0, y1) + fx * fy * img.at(x1, y1);
}

inline float to_pixel(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

} // namespace detail

inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma_x, double sigma_y)
{
    detail::require(std::isfinite(sigma_x) && std::isfinite(sigma_y) && sigma_x >= 0.0 && sigma_y >= 0.0,
                    "blur sigma must be finite and non-negative");
    ImageBuffer out = img;
    if (sigma_x > 0.0) {
        const auto k = detail::gaussian_kernel(sigma_x);
        const int r = static_cast<int>(k.size() / 2);
        ImageBuffer tmp(img.width, img.height);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[i + r] * out.at_clamped(x + i, y);
                tmp.at(x, y) = detail::to_pixel(acc);
            }
        out = std::move(tmp);
    }
    if (sigma_y > 0.0) {
        const auto k = detail::gaussian_kernel(sigma_y);
        const int r = static_cast<int>(k.size() / 2);
        ImageBuffer tmp(img.width, img.height);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[i + r] * out.at_clamped(x, y + i);
                tmp.at(x, y) = detail::to_pixel(acc);
            }
        out = std::move(tmp);
    }
    return out;
}

/// Bilinear rescale by `scale`; output pixel x samples the source at (x + 0.5) / scale - 0.5.
inline ImageBuffer resample(const ImageBuffer& img, double scale)
{
    detail::require(std::isfinite(scale) && scale > 0.0, "resample scale must be positive");
    const long out_w = std::lround(img.width * scale);
    const long out_h = std::lround(img.height * scale);
    detail::require(out_w >= 1 && out_h >= 1, "resampled image would be empty");
    if (scale == 1.0)
        return img;

    ImageBuffer out(static_cast<int>(out_w), static_cast<int>(out_h));
    for (int y = 0; y < out.height; ++y) {
        const double sy = (y + 0.5) / scale - 0.5;
        for (int x = 0; x < out.width; ++x) {
            const double sx = (x + 0.5) / scale - 0.5;
            out.at(x, y) = detail::to_pixel(detail::sample_bilinear(img, sx, sy));
        }
    }
    return out;
}

/// Resamples the (edge-coordinate) region `src` onto an out_w x out_h raster, clamp-to-edge.
inline ImageBuffer resample_region(const ImageBuffer& img, const Rect& src, int out_w, int out_h)
{
    detail::require(out_w >= 1 && out_h >= 1, "resampled region would be empty");
    detail::require(!src.empty(), "source region is empty");
    const double step_x = src.width() / out_w;
    const double step_y = src.height() / out_h;
    ImageBuffer out(out_w, out_h);
    for (int y = 0; y < out_h; ++y) {
        const double sy = src.y0 + (y + 0.5) * step_y - 0.5;
        for (int x = 0; x < out_w; ++x) {
            const double sx = src.x0 + (x + 0.5) * step_x - 0.5;
            out.at(x, y) = detail::to_pixel(detail::sample_bilinear(img, sx, sy));
        }
    }
    return out;
}

/// Destination-driven warp: each output pixel samples the source at map^-1(p).
/// Source positions outside the pixel footprint [-0.5, dim - 0.5] produce `fill`.
inline ImageBuffer warp_affine(const ImageBuffer& img, const AffineMap& map, int out_w, int out_h,
                               float fill)
{
    detail::require(out_w >= 1 && out_h >= 1, "warp output dimensions must be positive");
    const AffineMap inv = map.inverse();
    const double max_x = img.width - 0.5;
    const double max_y = img.height - 0.5;
    ImageBuffer out(out_w, out_h);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const Point s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            if (s.x < -0.5 || s.y < -0.5 || s.x > max_x || s.y > max_y)
                out.at(x, y) = fill;
            else
                out.at(x, y) = detail::to_pixel(detail::sample_bilinear(img, s.x, s.y));
        }
    return out;
}

} // namespace avd
