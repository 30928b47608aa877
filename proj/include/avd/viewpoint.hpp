#pragma once

#include <avd/error.hpp>
#include <avd/geometry.hpp>
#include <avd/imaging.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

namespace avd {

struct ViewConfig {
    double t_max = 2.0;
    double rotation_base_deg = 72.0;
    double antialias_c = 0.8;
};

/// One simulated camera viewpoint: rotation by phi, then compression of x by 1/tilt.
struct ViewSpec {
    double tilt = 1.0;
    double phi = 0.0;

    bool is_identity() const { return tilt == 1.0 && phi == 0.0; }
    bool operator==(const ViewSpec&) const = default;
};

struct ViewGrid {
    std::vector<ViewSpec> views; // views[0] is the identity
    double t_max = 1.0;
    double rotation_base = 0.0;
};

/// Tilts (sqrt 2)^k up to t_max; at tilt t > 1 rotations are j * rotation_base / t on [0, pi).
inline ViewGrid sample_view_grid(double t_max, double rotation_base)
{
    detail::require(std::isfinite(t_max) && t_max >= 1.0, "t_max must be at least 1");
    detail::require(rotation_base > 0.0, "rotation base must be positive");
    constexpr double kSlack = 1e-9;
    ViewGrid grid;
    grid.t_max = t_max;
    grid.rotation_base = rotation_base;
    grid.views.push_back({1.0, 0.0});
    for (int k = 1;; ++k) {
        const double t = std::exp2(k / 2.0);
        if (t > t_max + kSlack)
            break;
        const double step = rotation_base / t;
        for (int j = 0; j * step < std::numbers::pi - kSlack; ++j)
            grid.views.push_back({t, j * step});
    }
    return grid;
}

inline ViewGrid identity_grid() { return sample_view_grid(1.0, std::numbers::pi); }

inline ViewGrid sample_view_grid(const ViewConfig& cfg)
{
    return sample_view_grid(cfg.t_max, cfg.rotation_base_deg * std::numbers::pi / 180.0);
}

// Concrete geometry of a view for one source image size.
struct ViewParams {
    ViewSpec spec;
    int src_w = 0, src_h = 0;
    AffineMap rotate;      // source -> rotated frame
    int rot_w = 0, rot_h = 0;
    AffineMap compress;    // rotated frame -> view frame
    AffineMap forward;     // compress after rotate
    AffineMap inverse;
    int out_w = 0, out_h = 0;

    bool is_identity() const { return spec.is_identity(); }
};

namespace detail {

inline int ceil_extent(double extent) { return static_cast<int>(std::ceil(extent - 1e-9)); }

} // namespace detail

inline ViewParams make_view(const ViewSpec& spec, int src_w, int src_h)
{
    detail::require(spec.tilt >= 1.0, "tilt must be at least 1");
    detail::require(src_w >= 1 && src_h >= 1, "source dimensions must be positive");
    ViewParams v;
    v.spec = spec;
    v.src_w = src_w;
    v.src_h = src_h;

    if (spec.phi == 0.0) {
        v.rot_w = src_w;
        v.rot_h = src_h;
    } else {
        // Rotate the image footprint (edge coordinates) and shift it to the origin.
        const AffineMap r = AffineMap::rotation(spec.phi);
        std::array<Point, 4> corners = Rect{0.0, 0.0, double(src_w), double(src_h)}.corners();
        for (Point& c : corners)
            c = r.apply(c);
        const Rect box = bounding_rect(corners);
        v.rot_w = detail::ceil_extent(box.width());
        v.rot_h = detail::ceil_extent(box.height());
        // In pixel-center coordinates: p' = R (p + 0.5) - min - 0.5.
        const Point half = r.apply({0.5, 0.5});
        v.rotate = r;
        v.rotate.tx = half.x - box.x0 - 0.5;
        v.rotate.ty = half.y - box.y0 - 0.5;
    }

    const double t = spec.tilt;
    v.compress = AffineMap{1.0 / t, 0.0, 0.0, 1.0, 0.5 / t - 0.5, 0.0};
    v.out_w = detail::ceil_extent(v.rot_w / t);
    v.out_h = v.rot_h;
    detail::require(v.out_w >= 1 && v.out_h >= 1, "degenerate view dimensions");

    v.forward = spec.is_identity() ? AffineMap::identity() : v.compress.after(v.rotate);
    v.inverse = v.forward.inverse();
    return v;
}

inline double antialias_sigma(double tilt, double c = 0.8) { return c * std::sqrt(tilt * tilt - 1.0); }

/// Rotate (bilinear), blur along the axis about to be compressed, then compress x by 1/tilt.
inline ImageBuffer simulate_view(const ImageBuffer& img, const ViewParams& view, double antialias_c = 0.8)
{
    detail::require(img.width == view.src_w && img.height == view.src_h,
                    "view was built for a different image size");
    if (view.is_identity())
        return img;
    ImageBuffer rotated =
        view.spec.phi == 0.0 ? img : warp_affine(img, view.rotate, view.rot_w, view.rot_h, 0.0f);
    if (view.spec.tilt == 1.0)
        return rotated;
    const ImageBuffer blurred = gaussian_blur(rotated, antialias_sigma(view.spec.tilt, antialias_c), 0.0);
    return warp_affine(blurred, view.compress, view.out_w, view.out_h, 0.0f);
}

/// Corners of an original-frame rectangle as seen in the view frame.
inline std::array<Point, 4> project_box(const Rect& box, const ViewParams& view)
{
    auto corners = box.corners();
    for (Point& c : corners)
        c = view.forward.apply_edge(c);
    return corners;
}

inline std::optional<Rect> clip_to_source(Rect r, const ViewParams& view)
{
    r = intersect(r, Rect{0.0, 0.0, double(view.src_w), double(view.src_h)});
    if (r.empty())
        return std::nullopt;
    return r;
}

/// Enclosing original-frame rectangle of view-frame points, clipped to the source image.
inline std::optional<Rect> backproject_points(std::array<Point, 4> corners, const ViewParams& view)
{
    if (!view.is_identity())
        for (Point& c : corners)
            c = view.inverse.apply_edge(c);
    return clip_to_source(bounding_rect(corners), view);
}

inline std::optional<Rect> backproject_box(const Rect& box, const ViewParams& view)
{
    detail::require(!box.empty(), "cannot back-project an empty box");
    return backproject_points(box.corners(), view);
}

} // namespace avd
