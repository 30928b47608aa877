#pragma once

#include <avd/error.hpp>
#include <avd/geometry.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

// TAB-delimited annotation manifest shared by training and evaluation:
//   image_path <TAB> class <TAB> x0,y0,x1,y1 [<TAB> difficult=1]
// Negative images use class "-" and may omit the box.
namespace avd {

inline constexpr std::string_view kNegativeClass = "-";

struct Annotation {
    std::string image;      // path as written, resolved against the manifest directory
    std::string class_name;
    Rect box;
    bool has_box = false;
    bool difficult = false;
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos)
            return out;
        start = pos + 1;
    }
}

inline Rect parse_box(const std::string& text)
{
    const auto parts = split(text, ',');
    require(parts.size() == 4, "box must be x0,y0,x1,y1: '" + text + "'");
    double v[4];
    for (int i = 0; i < 4; ++i) {
        try {
            std::size_t used = 0;
            v[i] = std::stod(parts[i], &used);
            require(used == parts[i].size(), "bad box coordinate '" + parts[i] + "'");
        } catch (const std::logic_error&) {
            throw Error("bad box coordinate '" + parts[i] + "'");
        }
    }
    const Rect r{v[0], v[1], v[2], v[3]};
    require(!r.empty(), "box is empty: '" + text + "'");
    return r;
}

inline std::string format_box(const Rect& r)
{
    std::ostringstream out;
    out.precision(17);
    out << r.x0 << ',' << r.y0 << ',' << r.x1 << ',' << r.y1;
    return out.str();
}

} // namespace detail

inline std::vector<Annotation> parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {})
{
    std::vector<Annotation> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty() || line[0] == '#')
            continue;
        const auto f = detail::split(line, '\t');
        const std::string where = "manifest line " + std::to_string(line_no) + ": ";
        if (f.size() < 2 || f.size() > 4)
            throw Error(where + "expected 2 to 4 TAB-separated fields");
        Annotation a;
        a.image = (base_dir.empty() || std::filesystem::path(f[0]).is_absolute()) ? f[0]
                                                                                   : (base_dir / f[0]).string();
        a.class_name = f[1];
        if (f.size() >= 3 && !f[2].empty()) {
            try {
                a.box = detail::parse_box(f[2]);
            } catch (const Error& e) {
                throw Error(where + e.what());
            }
            a.has_box = true;
        }
        if (f.size() == 4) {
            if (f[3] == "difficult=1")
                a.difficult = true;
            else if (f[3] != "difficult=0")
                throw Error(where + "unknown flag field '" + f[3] + "'");
        }
        if (a.class_name != kNegativeClass && !a.has_box)
            throw Error(where + "positive annotation without a box");
        out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<Annotation> load_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open manifest " + path.string());
    return parse_manifest(in, path.parent_path());
}

} // namespace avd
