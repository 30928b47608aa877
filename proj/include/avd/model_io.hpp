#pragma once

#include <avd/detail/binary_io.hpp>
#include <avd/error.hpp>
#include <avd/imaging.hpp>
#include <avd/model.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <vector>

// AVDM: little-endian detector model file.
//   "AVDM" u16 version, u16 name length + UTF-8 name, u16 cell_size, u16 lambda,
//   f32 threshold, u16 component count; per component: f32 bias, u16 w, u16 h,
//   w*h*31 f32 root weights, u16 part count; per part: u16 w, u16 h, weights,
//   i16 ax, i16 ay, 4 x f32 deformation (dx, dy, dxx, dyy).
namespace avd {

inline constexpr std::uint16_t kAvdmVersion = 1;

namespace detail {

inline std::uint16_t checked_u16(long v, const char* what)
{
    require(v >= 0 && v <= std::numeric_limits<std::uint16_t>::max(), std::string(what) + " does not fit in u16");
    return static_cast<std::uint16_t>(v);
}

inline std::int16_t checked_i16(long v, const char* what)
{
    require(v >= std::numeric_limits<std::int16_t>::min() && v <= std::numeric_limits<std::int16_t>::max(),
            std::string(what) + " does not fit in i16");
    return static_cast<std::int16_t>(v);
}

inline void put_filter(ByteWriter& out, const Filter& f)
{
    out.put_u16(checked_u16(f.w, "filter width"));
    out.put_u16(checked_u16(f.h, "filter height"));
    for (float v : f.weights)
        out.put_f32(v);
}

inline Filter get_filter(ByteReader& in)
{
    const int w = in.get_u16();
    const int h = in.get_u16();
    require(w >= 1 && h >= 1, "AVDM filter has zero dimension");
    Filter f(w, h);
    for (float& v : f.weights)
        v = in.get_f32();
    return f;
}

} // namespace detail

inline std::vector<std::uint8_t> serialize_model(const DetectorModel& model)
{
    validate(model);
    detail::ByteWriter out;
    out.put_magic("AVDM");
    out.put_u16(kAvdmVersion);
    out.put_u16(detail::checked_u16(static_cast<long>(model.class_name.size()), "class name length"));
    out.put_bytes(model.class_name);
    out.put_u16(detail::checked_u16(model.cell_size, "cell size"));
    out.put_u16(detail::checked_u16(model.lambda, "lambda"));
    out.put_f32(model.threshold);
    out.put_u16(detail::checked_u16(static_cast<long>(model.components.size()), "component count"));
    for (const Component& c : model.components) {
        out.put_f32(c.bias);
        detail::put_filter(out, c.root);
        out.put_u16(detail::checked_u16(static_cast<long>(c.parts.size()), "part count"));
        for (const Part& p : c.parts) {
            detail::put_filter(out, p.filter);
            out.put_i16(detail::checked_i16(p.ax, "anchor x"));
            out.put_i16(detail::checked_i16(p.ay, "anchor y"));
            out.put_f32(p.deform.dx);
            out.put_f32(p.deform.dy);
            out.put_f32(p.deform.dxx);
            out.put_f32(p.deform.dyy);
        }
    }
    return std::move(out).bytes();
}

inline DetectorModel parse_model(std::span<const std::uint8_t> bytes)
{
    detail::ByteReader in(bytes);
    detail::require(in.expect_magic("AVDM"), "not an AVDM model file");
    const auto version = in.get_u16();
    detail::require(version == kAvdmVersion, "unsupported AVDM version " + std::to_string(version));
    DetectorModel m;
    m.class_name = in.get_string(in.get_u16());
    m.cell_size = in.get_u16();
    m.lambda = in.get_u16();
    m.threshold = in.get_f32();
    const int components = in.get_u16();
    for (int c = 0; c < components; ++c) {
        Component comp;
        comp.bias = in.get_f32();
        comp.root = detail::get_filter(in);
        const int parts = in.get_u16();
        for (int p = 0; p < parts; ++p) {
            Part part;
            part.filter = detail::get_filter(in);
            part.ax = in.get_i16();
            part.ay = in.get_i16();
            part.deform.dx = in.get_f32();
            part.deform.dy = in.get_f32();
            part.deform.dxx = in.get_f32();
            part.deform.dyy = in.get_f32();
            comp.parts.push_back(std::move(part));
        }
        m.components.push_back(std::move(comp));
    }
    detail::require(in.remaining() == 0, "trailing bytes after AVDM model");
    validate(m);
    return m;
}

inline void save_model(const DetectorModel& model, const std::filesystem::path& path)
{
    const auto bytes = serialize_model(model);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error("cannot write model " + path.string());
}

inline DetectorModel load_model(const std::filesystem::path& path)
{
    return parse_model(detail::read_file_bytes(path));
}

} // namespace avd
