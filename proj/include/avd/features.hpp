#pragma once

#include <avd/detail/parallel.hpp>
#include <avd/error.hpp>
#include <avd/imaging.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <utility>
#include <vector>

namespace avd {

inline constexpr int kOrientations = 18;       // signed bins over [0, 2pi)
inline constexpr int kUnsignedOrientations = 9;
inline constexpr int kFeatureChannels = 31;    // 18 signed + 9 unsigned + 4 texture
inline constexpr double kHogTruncation = 0.2;
inline constexpr double kHogTextureWeight = 0.2357;
inline constexpr double kHogEpsilon = 1e-4;

inline constexpr double kOrientationChannelBound = 0.4;
inline constexpr double kTextureChannelBound = kHogTextureWeight * 18.0;

struct FeatureLevel {
    int cells_w = 0;
    int cells_h = 0;
    float scale = 1.0f;
    int cell_size = 8;
    std::vector<float> data; // (y * cells_w + x) * 31 + channel

    FeatureLevel() = default;
    FeatureLevel(int w, int h, float s, int cell)
        : cells_w(w), cells_h(h), scale(s), cell_size(cell),
          data(static_cast<std::size_t>(w) * h * kFeatureChannels, 0.0f)
    {
    }

    const float* cell(int x, int y) const
    {
        return data.data() + (static_cast<std::size_t>(y) * cells_w + x) * kFeatureChannels;
    }
    float* cell(int x, int y)
    {
        return data.data() + (static_cast<std::size_t>(y) * cells_w + x) * kFeatureChannels;
    }

    bool operator==(const FeatureLevel&) const = default;
};

namespace detail {

// Counts pyramids currently holding level data. Moves transfer the count;
// copies add one.
class ResidencyToken {
public:
    ResidencyToken() = default;
    explicit ResidencyToken(bool held) : held_(held) { if (held_) acquire(); }
    ResidencyToken(const ResidencyToken& o) : held_(o.held_) { if (held_) acquire(); }
    ResidencyToken(ResidencyToken&& o) noexcept : held_(std::exchange(o.held_, false)) {}
    ResidencyToken& operator=(const ResidencyToken& o)
    {
        if (this != &o) {
            release();
            held_ = o.held_;
            if (held_)
                acquire();
        }
        return *this;
    }
    ResidencyToken& operator=(ResidencyToken&& o) noexcept
    {
        if (this != &o) {
            release();
            held_ = std::exchange(o.held_, false);
        }
        return *this;
    }
    ~ResidencyToken() { release(); }

    static long live() { return live_.load(); }
    static long peak() { return peak_.load(); }
    static void reset_peak() { peak_.store(live_.load()); }

    bool operator==(const ResidencyToken&) const { return true; }

private:
    static void acquire()
    {
        const long now = ++live_;
        long seen = peak_.load();
        while (now > seen && !peak_.compare_exchange_weak(seen, now)) {
        }
    }
    void release()
    {
        if (std::exchange(held_, false))
            --live_;
    }

    bool held_ = false;
    static inline std::atomic<long> live_{0};
    static inline std::atomic<long> peak_{0};
};

} // namespace detail

struct FeaturePyramid {
    std::vector<FeatureLevel> levels; // finest first
    int lambda = 10;
    int cell_size = 8;
    int min_cells = 5;

    FeaturePyramid() = default;
    FeaturePyramid(std::vector<FeatureLevel> lv, int lam, int cell, int min_c)
        : levels(std::move(lv)), lambda(lam), cell_size(cell), min_cells(min_c), residency_(true)
    {
    }

    bool operator==(const FeaturePyramid& o) const
    {
        return levels == o.levels && lambda == o.lambda && cell_size == o.cell_size;
    }

    /// Number of pyramids alive in the process that hold feature data.
    static long resident_count() { return detail::ResidencyToken::live(); }
    static long resident_peak() { return detail::ResidencyToken::peak(); }
    static void reset_resident_peak() { detail::ResidencyToken::reset_peak(); }

private:
    detail::ResidencyToken residency_;
};

// ---------------------------------------------------------------------------
// Gradients

struct GradientField {
    int width = 0;
    int height = 0;
    std::vector<double> magnitude;
    std::vector<std::uint8_t> bin;
};

/// Nearest of 18 signed orientation sectors centred on k*20 degrees.
/// A purely vertical gradient sits on a sector boundary and takes the lower
/// sector (4 for +y, 13 for -y).
inline int orientation_bin(double dx, double dy)
{
    if (dx == 0.0) {
        if (dy > 0.0)
            return 4;
        if (dy < 0.0)
            return 13;
        return 0;
    }
    double angle = std::atan2(dy, dx);
    if (angle < 0.0)
        angle += 2.0 * std::numbers::pi;
    const long b = std::lround(angle / (2.0 * std::numbers::pi / kOrientations));
    return static_cast<int>(b % kOrientations);
}

inline GradientField compute_gradients(const ImageBuffer& img)
{
    detail::require(img.width >= 3 && img.height >= 3, "gradient input must be at least 3x3");
    GradientField g;
    g.width = img.width;
    g.height = img.height;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    g.magnitude.resize(n);
    g.bin.resize(n);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = static_cast<double>(img.at_clamped(x + 1, y)) - img.at_clamped(x - 1, y);
            const double dy = static_cast<double>(img.at_clamped(x, y + 1)) - img.at_clamped(x, y - 1);
            const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
            g.magnitude[i] = std::sqrt(dx * dx + dy * dy);
            g.bin[i] = static_cast<std::uint8_t>(orientation_bin(dx, dy));
        }
    return g;
}

// ---------------------------------------------------------------------------
// HOG

inline FeatureLevel hog_level(const ImageBuffer& img, int cell_size, float scale = 1.0f)
{
    detail::require(cell_size >= 1, "cell size must be positive");
    detail::require(img.width >= 2 * cell_size && img.height >= 2 * cell_size && img.width >= 3 &&
                        img.height >= 3,
                    "image too small for one HOG level");

    const GradientField g = compute_gradients(img);
    const int cw = img.width / cell_size;
    const int ch = img.height / cell_size;
    const std::size_t cells = static_cast<std::size_t>(cw) * ch;

    // 1. Bilinear spatial voting into 18-bin cell histograms.
    std::vector<double> hist(cells * kOrientations, 0.0);
    for (int y = 0; y < img.height; ++y) {
        const double yp = (y + 0.5) / cell_size - 0.5;
        const int iy = static_cast<int>(std::floor(yp));
        const double fy = yp - iy;
        for (int x = 0; x < img.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
            const double mag = g.magnitude[i];
            if (mag == 0.0)
                continue;
            const int b = g.bin[i];
            const double xp = (x + 0.5) / cell_size - 0.5;
            const int ix = static_cast<int>(std::floor(xp));
            const double fx = xp - ix;
            auto vote = [&](int cx, int cy, double w) {
                if (cx >= 0 && cx < cw && cy >= 0 && cy < ch)
                    hist[(static_cast<std::size_t>(cy) * cw + cx) * kOrientations + b] += w * mag;
            };
            vote(ix, iy, (1.0 - fx) * (1.0 - fy));
            vote(ix + 1, iy, fx * (1.0 - fy));
            vote(ix, iy + 1, (1.0 - fx) * fy);
            vote(ix + 1, iy + 1, fx * fy);
        }
    }

    // 2. Unsigned gradient energy per cell.
    std::vector<double> energy(cells, 0.0);
    for (std::size_t c = 0; c < cells; ++c) {
        const double* h = &hist[c * kOrientations];
        for (int o = 0; o < kUnsignedOrientations; ++o) {
            const double s = h[o] + h[o + kUnsignedOrientations];
            energy[c] += s * s;
        }
    }
    auto e = [&](int x, int y) {
        x = std::clamp(x, 0, cw - 1);
        y = std::clamp(y, 0, ch - 1);
        return energy[static_cast<std::size_t>(y) * cw + x];
    };
    auto block = [&](int x, int y) {
        return 1.0 / std::sqrt(e(x, y) + e(x + 1, y) + e(x, y + 1) + e(x + 1, y + 1) + kHogEpsilon);
    };

    // 3-5. Four block normalizations, truncation, channel projection.
    FeatureLevel level(cw, ch, scale, cell_size);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
            const double n[4] = {block(x, y), block(x, y - 1), block(x - 1, y), block(x - 1, y - 1)};
            const double* h = &hist[(static_cast<std::size_t>(y) * cw + x) * kOrientations];
            float* out = level.cell(x, y);
            double texture[4] = {0.0, 0.0, 0.0, 0.0};

            for (int o = 0; o < kOrientations; ++o) {
                double sum = 0.0;
                for (int k = 0; k < 4; ++k)
                    sum += std::min(h[o] * n[k], kHogTruncation);
                out[o] = static_cast<float>(0.5 * sum);
            }
            for (int o = 0; o < kUnsignedOrientations; ++o) {
                const double u = h[o] + h[o + kUnsignedOrientations];
                double sum = 0.0;
                for (int k = 0; k < 4; ++k) {
                    const double t = std::min(u * n[k], kHogTruncation);
                    sum += t;
                    texture[k] += t;
                }
                out[kOrientations + o] = static_cast<float>(0.5 * sum);
            }
            for (int k = 0; k < 4; ++k)
                out[kOrientations + kUnsignedOrientations + k] =
                    static_cast<float>(kHogTextureWeight * texture[k]);
        }
    return level;
}

// ---------------------------------------------------------------------------
// Pyramid

struct PyramidParams {
    int cell_size = 8;
    int lambda = 10;
    int min_cells = 5;
};

inline double pyramid_scale(int level, int lambda) { return std::exp2(-static_cast<double>(level) / lambda); }

/// Number of levels the stopping rule admits for a width x height image.
inline int pyramid_level_count(int width, int height, const PyramidParams& p)
{
    const int min_cells = std::max(p.min_cells, 2);
    int count = 0;
    for (;; ++count) {
        const double s = pyramid_scale(count, p.lambda);
        const long w = std::lround(width * s);
        const long h = std::lround(height * s);
        if (w < 3 || h < 3 || std::min(w, h) / p.cell_size < min_cells)
            return count;
    }
}

inline FeaturePyramid build_pyramid(const ImageBuffer& img, const PyramidParams& p, std::size_t workers = 1)
{
    detail::require(p.lambda >= 1, "lambda must be at least 1");
    detail::require(p.cell_size >= 1, "cell size must be positive");
    const int count = pyramid_level_count(img.width, img.height, p);
    detail::require(count >= 1, "image too small for even one pyramid level");

    std::vector<FeatureLevel> levels(static_cast<std::size_t>(count));
    detail::parallel_for(levels.size(), workers, [&](std::size_t i) {
        const double s = pyramid_scale(static_cast<int>(i), p.lambda);
        levels[i] = hog_level(resample(img, s), p.cell_size, static_cast<float>(s));
    });
    return FeaturePyramid(std::move(levels), p.lambda, p.cell_size, p.min_cells);
}

/// Debug dump: one row per cell, `x,y,c0,...,c30`.
inline void write_level_csv(const FeatureLevel& level, std::ostream& out)
{
    out << "x,y";
    for (int c = 0; c < kFeatureChannels; ++c)
        out << ",c" << c;
    out << '\n';
    for (int y = 0; y < level.cells_h; ++y)
        for (int x = 0; x < level.cells_w; ++x) {
            out << x << ',' << y;
            const float* f = level.cell(x, y);
            for (int c = 0; c < kFeatureChannels; ++c)
                out << ',' << f[c];
            out << '\n';
        }
}

} // namespace avd
