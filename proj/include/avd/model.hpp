#pragma once

#include <avd/detail/parallel.hpp>
#include <avd/error.hpp>
#include <avd/features.hpp>
#include <avd/geometry.hpp>
#include <avd/viewpoint.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace avd {

// ---------------------------------------------------------------------------
// Model representation

struct Filter {
    int w = 1;
    int h = 1;
    std::vector<float> weights; // (y * w + x) * 31 + channel

    Filter() = default;
    Filter(int width, int height)
        : w(width), h(height), weights(static_cast<std::size_t>(width) * height * kFeatureChannels, 0.0f)
    {
    }

    float at(int x, int y, int c) const
    {
        return weights[(static_cast<std::size_t>(y) * w + x) * kFeatureChannels + c];
    }

    /// Copies the w x h window of `level` whose top-left cell is (x, y).
    static Filter from_window(const FeatureLevel& level, int x, int y, int w, int h)
    {
        detail::require(x >= 0 && y >= 0 && x + w <= level.cells_w && y + h <= level.cells_h,
                        "window outside feature level");
        Filter f(w, h);
        for (int dy = 0; dy < h; ++dy) {
            const float* src = level.cell(x, y + dy);
            std::copy(src, src + static_cast<std::size_t>(w) * kFeatureChannels,
                      f.weights.begin() + static_cast<std::ptrdiff_t>(dy) * w * kFeatureChannels);
        }
        return f;
    }

    bool operator==(const Filter&) const = default;
};

// Deformation cost of displacement u: d_lin * |u| + d_quad * u^2 per axis.
struct Deformation {
    float dx = 0.0f;
    float dy = 0.0f;
    float dxx = 1.0f;
    float dyy = 1.0f;

    bool operator==(const Deformation&) const = default;
};

struct Part {
    Filter filter;
    int ax = 0; // anchor in cells at the part level, relative to 2 * root position
    int ay = 0;
    Deformation deform;

    bool operator==(const Part&) const = default;
};

struct Component {
    Filter root;
    std::vector<Part> parts;
    float bias = 0.0f;

    bool operator==(const Component&) const = default;
};

struct DetectorModel {
    std::string class_name;
    std::vector<Component> components;
    float threshold = 0.0f;
    int cell_size = 8;
    int lambda = 10;

    bool operator==(const DetectorModel&) const = default;
};

inline constexpr float kMinQuadraticDeformation = 1e-6f;

inline void validate(const Filter& f)
{
    detail::require(f.w >= 1 && f.h >= 1, "filter dimensions must be positive");
    detail::require(f.weights.size() == static_cast<std::size_t>(f.w) * f.h * kFeatureChannels,
                    "filter weight count does not match its dimensions");
    detail::require(std::all_of(f.weights.begin(), f.weights.end(), [](float v) { return std::isfinite(v); }),
                    "filter weights must be finite");
}

inline void validate(const DetectorModel& m)
{
    detail::require(!m.components.empty(), "model has no components");
    detail::require(std::isfinite(m.threshold), "model threshold must be finite");
    detail::require(m.cell_size >= 1 && m.lambda >= 1, "model cell size and lambda must be positive");
    for (const Component& c : m.components) {
        validate(c.root);
        detail::require(std::isfinite(c.bias), "component bias must be finite");
        for (const Part& p : c.parts) {
            validate(p.filter);
            detail::require(p.deform.dxx >= kMinQuadraticDeformation && p.deform.dyy >= kMinQuadraticDeformation,
                            "quadratic deformation coefficients must be >= 1e-6");
            detail::require(p.deform.dx >= 0.0f && p.deform.dy >= 0.0f,
                            "linear deformation coefficients must be non-negative");
            detail::require(p.ax >= 0 && p.ay >= 0 && p.ax + p.filter.w <= 2 * c.root.w &&
                                p.ay + p.filter.h <= 2 * c.root.h,
                            "part anchor outside twice the root footprint");
        }
    }
}

// ---------------------------------------------------------------------------
// Filter responses

struct ScoreMap {
    int w = 0;
    int h = 0;
    std::vector<double> data;

    ScoreMap() = default;
    ScoreMap(int width, int height, double fill = 0.0)
        : w(width), h(height), data(static_cast<std::size_t>(width) * height, fill)
    {
    }

    double at(int x, int y) const { return data[static_cast<std::size_t>(y) * w + x]; }
    double& at(int x, int y) { return data[static_cast<std::size_t>(y) * w + x]; }
};

inline bool filter_fits(const FeatureLevel& level, const Filter& filter)
{
    return filter.w <= level.cells_w && filter.h <= level.cells_h;
}

/// Valid-region cross-correlation of a filter with a feature level.
inline ScoreMap correlate(const FeatureLevel& level, const Filter& filter)
{
    detail::require(filter_fits(level, filter), "filter larger than feature level");
    ScoreMap r(level.cells_w - filter.w + 1, level.cells_h - filter.h + 1);
    const std::size_t row_len = static_cast<std::size_t>(filter.w) * kFeatureChannels;
    for (int y = 0; y < r.h; ++y)
        for (int x = 0; x < r.w; ++x) {
            double acc = 0.0;
            for (int fy = 0; fy < filter.h; ++fy) {
                const float* feat = level.cell(x, y + fy);
                const float* wts = filter.weights.data() + static_cast<std::size_t>(fy) * row_len;
                for (std::size_t k = 0; k < row_len; ++k)
                    acc += static_cast<double>(wts[k]) * feat[k];
            }
            r.at(x, y) = acc;
        }
    return r;
}

// ---------------------------------------------------------------------------
// Generalized distance transform

struct DistanceTransform1D {
    std::vector<double> values;
    std::vector<int> argmax;
};

namespace detail {

inline double deformation_cost(double u, double lin, double quad) { return lin * std::abs(u) + quad * u * u; }

inline double displaced_score(std::span<const double> f, int i, int j, double lin, double quad)
{
    return f[j] - deformation_cost(static_cast<double>(i - j), lin, quad);
}

} // namespace detail

/// D[i] = max_j f[j] - d1 |i - j| - d2 (i - j)^2 for output positions
/// i in [out_begin, out_begin + out_count), with the smallest maximizing j.
/// Upper envelope of the translated cost profiles: each profile wins on one
/// interval because their pairwise differences are strictly increasing in i.
/// `ops`, when given, accumulates the number of score comparisons performed.
inline DistanceTransform1D distance_transform_1d(std::span<const double> f, double d1, double d2, int out_begin,
                                                 int out_count, std::size_t* ops = nullptr)
{
    detail::require(!f.empty(), "distance transform needs at least one score");
    detail::require(d1 >= 0.0 && d2 > 0.0, "distance transform needs d1 >= 0 and d2 > 0");
    detail::require(out_count >= 0, "output count must be non-negative");
    const int n = static_cast<int>(f.size());
    const int lo = out_begin;
    const int hi = out_begin + out_count;
    std::size_t count = 0;

    auto beats = [&](int q, int v, int i) {
        ++count;
        return detail::displaced_score(f, i, q, d1, d2) > detail::displaced_score(f, i, v, d1, d2);
    };

    // First integer position in [lo, hi] at which q (> v) strictly beats v.
    auto takeover = [&](int v, int q) {
        const double gap = q - v;
        const double df = f[q] - f[v];
        auto diff = [&](double i) { // piecewise linear, strictly increasing
            if (i <= v)
                return df - d1 * gap + d2 * gap * (2.0 * i - v - q);
            if (i >= q)
                return df + d1 * gap + d2 * gap * (2.0 * i - v - q);
            return df + (d1 + d2 * gap) * (2.0 * i - v - q);
        };
        double root;
        if (diff(v) > 0.0)
            root = ((d1 * gap - df) / (d2 * gap) + v + q) / 2.0;
        else if (diff(q) > 0.0)
            root = (-df / (d1 + d2 * gap) + v + q) / 2.0;
        else
            root = ((-df - d1 * gap) / (d2 * gap) + v + q) / 2.0;
        int s;
        if (std::isnan(root))
            s = lo;
        else
            s = static_cast<int>(std::clamp(std::ceil(root), static_cast<double>(lo), static_cast<double>(hi)));
        while (s > lo && beats(q, v, s - 1))
            --s;
        while (s < hi && !beats(q, v, s))
            ++s;
        return s;
    };

    std::vector<int> owner;  // candidate indices, increasing
    std::vector<int> start;  // first output position owned by owner[k]
    owner.reserve(n);
    start.reserve(n);
    for (int q = 0; q < n; ++q) {
        if (owner.empty()) {
            owner.push_back(q);
            start.push_back(lo);
            continue;
        }
        int s = takeover(owner.back(), q);
        while (s <= start.back()) {
            owner.pop_back();
            start.pop_back();
            if (owner.empty()) {
                s = lo;
                break;
            }
            s = takeover(owner.back(), q);
        }
        if (s < hi || owner.empty()) {
            owner.push_back(q);
            start.push_back(s);
        }
    }

    DistanceTransform1D out;
    out.values.resize(static_cast<std::size_t>(out_count));
    out.argmax.resize(static_cast<std::size_t>(out_count));
    std::size_t k = 0;
    for (int i = lo; i < hi; ++i) {
        while (k + 1 < owner.size() && start[k + 1] <= i)
            ++k;
        out.values[i - lo] = detail::displaced_score(f, i, owner[k], d1, d2);
        out.argmax[i - lo] = owner[k];
    }
    if (ops)
        *ops += count;
    return out;
}

inline DistanceTransform1D distance_transform_1d(std::span<const double> f, double d1, double d2)
{
    return distance_transform_1d(f, d1, d2, 0, static_cast<int>(f.size()));
}

struct Placement {
    int x = 0;
    int y = 0;
};

struct DistanceTransform2D {
    ScoreMap values;            // over the requested output window
    std::vector<Placement> best; // maximizing part position per output cell
    int origin_x = 0;
    int origin_y = 0;
};

/// Separable 2-D transform: rows (x) first, then columns (y).
inline DistanceTransform2D distance_transform_2d(const ScoreMap& response, const Deformation& d, int origin_x,
                                                 int origin_y, int out_w, int out_h)
{
    DistanceTransform2D out;
    out.origin_x = origin_x;
    out.origin_y = origin_y;

    // Row pass: for every response row, optimal x for each output column.
    ScoreMap row_best(out_w, response.h);
    std::vector<int> row_arg(static_cast<std::size_t>(out_w) * response.h);
    std::vector<double> line(static_cast<std::size_t>(response.w));
    for (int y = 0; y < response.h; ++y) {
        for (int x = 0; x < response.w; ++x)
            line[x] = response.at(x, y);
        const auto dt = distance_transform_1d(line, d.dx, d.dxx, origin_x, out_w);
        for (int x = 0; x < out_w; ++x) {
            row_best.at(x, y) = dt.values[x];
            row_arg[static_cast<std::size_t>(y) * out_w + x] = dt.argmax[x];
        }
    }

    // Column pass.
    out.values = ScoreMap(out_w, out_h);
    out.best.resize(static_cast<std::size_t>(out_w) * out_h);
    line.resize(static_cast<std::size_t>(response.h));
    for (int x = 0; x < out_w; ++x) {
        for (int y = 0; y < response.h; ++y)
            line[y] = row_best.at(x, y);
        const auto dt = distance_transform_1d(line, d.dy, d.dyy, origin_y, out_h);
        for (int y = 0; y < out_h; ++y) {
            const int py = dt.argmax[y];
            out.values.at(x, y) = dt.values[y];
            out.best[static_cast<std::size_t>(y) * out_w + x] = {row_arg[static_cast<std::size_t>(py) * out_w + x], py};
        }
    }
    return out;
}

struct PartPlacementResult {
    ScoreMap combined;
    // placements[p][y * combined.w + x]: position of part p in its response map
    std::vector<std::vector<Placement>> placements;
};

/// combined(x, y) = root(x, y) + bias + sum_p DT_p(2x + ax, 2y + ay).
inline PartPlacementResult place_parts(const ScoreMap& root_response, std::span<const ScoreMap> part_responses,
                                       const Component& component)
{
    detail::require(part_responses.size() == component.parts.size(), "one response map per part required");
    PartPlacementResult result;
    result.combined = ScoreMap(root_response.w, root_response.h);
    for (std::size_t i = 0; i < root_response.data.size(); ++i)
        result.combined.data[i] = root_response.data[i] + component.bias;

    const int span_w = 2 * root_response.w - 1;
    const int span_h = 2 * root_response.h - 1;
    for (std::size_t p = 0; p < component.parts.size(); ++p) {
        const Part& part = component.parts[p];
        const ScoreMap& resp = part_responses[p];
        detail::require(resp.w >= 1 && resp.h >= 1, "part response map is empty");
        const auto dt = distance_transform_2d(resp, part.deform, part.ax, part.ay, span_w, span_h);
        std::vector<Placement> placement(result.combined.data.size());
        for (int y = 0; y < root_response.h; ++y)
            for (int x = 0; x < root_response.w; ++x) {
                result.combined.at(x, y) += dt.values.at(2 * x, 2 * y);
                placement[static_cast<std::size_t>(y) * root_response.w + x] =
                    dt.best[static_cast<std::size_t>(2 * y) * span_w + 2 * x];
            }
        result.placements.push_back(std::move(placement));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Detection

struct Detection {
    Rect box;
    double score = 0.0;
    int view_index = 0;
    int component_index = 0;
    int level_index = 0;
    int cell_x = 0; // root position on its level
    int cell_y = 0;
};

struct DetectReport {
    std::size_t skipped_part_levels = 0; // (level, component) pairs lacking the finer octave
};

inline Rect root_footprint(int x, int y, const Filter& root, const FeatureLevel& level)
{
    const double step = static_cast<double>(level.cell_size) / level.scale;
    return {x * step, y * step, (x + root.w) * step, (y + root.h) * step};
}

/// Scores every level and component; emits detections with score >= threshold
/// in the frame of the image the pyramid was built from.
inline std::vector<Detection> detect(const FeaturePyramid& pyramid, const DetectorModel& model, double threshold,
                                     DetectReport* report = nullptr)
{
    detail::require(model.cell_size == pyramid.cell_size && model.lambda == pyramid.lambda,
                    "model cell size / lambda do not match the pyramid");
    std::vector<Detection> out;
    const int levels = static_cast<int>(pyramid.levels.size());
    for (int l = 0; l < levels; ++l) {
        const FeatureLevel& level = pyramid.levels[l];
        for (std::size_t ci = 0; ci < model.components.size(); ++ci) {
            const Component& comp = model.components[ci];
            if (!filter_fits(level, comp.root))
                continue;
            ScoreMap scores;
            if (comp.parts.empty()) {
                scores = correlate(level, comp.root);
                for (double& v : scores.data)
                    v += comp.bias;
            } else {
                const int part_level = l - pyramid.lambda;
                if (part_level < 0) {
                    if (report)
                        ++report->skipped_part_levels;
                    continue;
                }
                const FeatureLevel& fine = pyramid.levels[part_level];
                std::vector<ScoreMap> responses;
                bool fits = true;
                for (const Part& part : comp.parts) {
                    if (!filter_fits(fine, part.filter)) {
                        fits = false;
                        break;
                    }
                    responses.push_back(correlate(fine, part.filter));
                }
                if (!fits)
                    continue;
                scores = place_parts(correlate(level, comp.root), responses, comp).combined;
            }
            for (int y = 0; y < scores.h; ++y)
                for (int x = 0; x < scores.w; ++x) {
                    const double s = scores.at(x, y);
                    if (s >= threshold)
                        out.push_back({root_footprint(x, y, comp.root, level), s, 0, static_cast<int>(ci), l, x, y});
                }
        }
    }
    return out;
}

struct MultiviewConfig {
    int min_cells = 5;
    double threshold = 0.0;
    double antialias_c = 0.8;
    std::size_t workers = 1;
    // Optional pyramid cache hooks, keyed by view index.
    std::function<std::optional<FeaturePyramid>(std::size_t, const ViewParams&)> lookup;
    std::function<void(std::size_t, const ViewParams&, const FeaturePyramid&)> store;
};

/// Simulates every view, scores it, and pools the detections back in the original frame.
inline std::vector<Detection> detect_multiview(const ImageBuffer& img, const DetectorModel& model,
                                               const ViewGrid& grid, const MultiviewConfig& cfg)
{
    detail::require(!grid.views.empty(), "view grid is empty");
    const PyramidParams params{model.cell_size, model.lambda, cfg.min_cells};
    std::vector<std::vector<Detection>> per_view(grid.views.size());

    detail::parallel_for(grid.views.size(), cfg.workers, [&](std::size_t vi) {
        const ViewParams view = make_view(grid.views[vi], img.width, img.height);
        std::optional<FeaturePyramid> pyramid;
        if (cfg.lookup)
            pyramid = cfg.lookup(vi, view);
        if (!pyramid) {
            const ImageBuffer simulated = simulate_view(img, view, cfg.antialias_c);
            if (pyramid_level_count(simulated.width, simulated.height, params) < 1)
                return;
            pyramid = build_pyramid(simulated, params);
            if (cfg.store)
                cfg.store(vi, view, *pyramid);
        }
        for (Detection d : detect(*pyramid, model, cfg.threshold)) {
            const auto box = backproject_box(d.box, view);
            if (!box)
                continue;
            d.box = *box;
            d.view_index = static_cast<int>(vi);
            per_view[vi].push_back(d);
        }
    });

    std::vector<Detection> pooled;
    for (auto& v : per_view)
        pooled.insert(pooled.end(), v.begin(), v.end());
    return pooled;
}

// ---------------------------------------------------------------------------
// Non-maximum suppression

inline bool detection_rank_less(const Detection& a, const Detection& b)
{
    if (a.score != b.score)
        return a.score > b.score;
    if (a.view_index != b.view_index)
        return a.view_index < b.view_index;
    return a.box < b.box;
}

/// Greedy: keep the best remaining detection, drop everything overlapping it by more than iou_threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = 0.5)
{
    std::stable_sort(dets.begin(), dets.end(), detection_rank_less);
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                            [&](const Detection& k) { return iou(k.box, d.box) > iou_threshold; });
        if (!suppressed)
            kept.push_back(d);
    }
    return kept;
}

} // namespace avd
