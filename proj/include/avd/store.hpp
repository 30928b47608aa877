#pragma once

#include <avd/detail/binary_io.hpp>
#include <avd/error.hpp>
#include <avd/features.hpp>
#include <avd/geometry.hpp>
#include <avd/viewpoint.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <unistd.h>

namespace avd {

inline constexpr std::uint16_t kAvpfVersion = 1;
inline constexpr std::string_view kCacheVersionTag = "avd-pyramid-1";

// ---------------------------------------------------------------------------
// Hashing

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = kFnvOffset)
{
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset)
{
    return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), h);
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct CacheKey {
    std::uint64_t content_hash = 0;
    std::uint64_t params_hash = 0;

    auto operator<=>(const CacheKey&) const = default;
    std::string file_stem() const { return hex64(content_hash) + "-" + hex64(params_hash); }
};

/// Hash of everything besides the image bytes that determines a view's pyramid.
inline std::uint64_t pyramid_params_hash(const PyramidParams& p, const ViewSpec& view, double antialias_c = 0.8)
{
    std::ostringstream s;
    s << kCacheVersionTag << '|' << p.cell_size << '|' << p.lambda << '|' << p.min_cells << '|'
      << hex64(std::bit_cast<std::uint64_t>(view.tilt)) << '|' << hex64(std::bit_cast<std::uint64_t>(view.phi)) << '|'
      << hex64(std::bit_cast<std::uint64_t>(antialias_c));
    return fnv1a64(s.str());
}

inline CacheKey make_cache_key(std::span<const std::uint8_t> image_bytes, const PyramidParams& p, const ViewSpec& view,
                               double antialias_c = 0.8)
{
    return {fnv1a64(image_bytes), pyramid_params_hash(p, view, antialias_c)};
}

// ---------------------------------------------------------------------------
// AVPF

inline std::size_t avpf_size(const FeaturePyramid& pyr)
{
    std::size_t n = 4 + 4 * 2;
    for (const FeatureLevel& lv : pyr.levels)
        n += 2 + 2 + 4 + lv.data.size() * 4;
    return n;
}

inline std::vector<std::uint8_t> serialize_pyramid(const FeaturePyramid& pyr)
{
    auto u16 = [](long v, const char* what) {
        detail::require(v >= 0 && v <= 0xFFFF, std::string(what) + " does not fit the AVPF header");
        return static_cast<std::uint16_t>(v);
    };
    detail::ByteWriter out;
    out.put_magic("AVPF");
    out.put_u16(kAvpfVersion);
    out.put_u16(u16(static_cast<long>(pyr.levels.size()), "level count"));
    out.put_u16(u16(pyr.cell_size, "cell size"));
    out.put_u16(u16(pyr.lambda, "lambda"));
    for (const FeatureLevel& lv : pyr.levels) {
        detail::require(lv.data.size() == static_cast<std::size_t>(lv.cells_w) * lv.cells_h * kFeatureChannels,
                        "feature level size mismatch");
        out.put_u16(u16(lv.cells_w, "level width"));
        out.put_u16(u16(lv.cells_h, "level height"));
        out.put_f32(lv.scale);
        for (float v : lv.data)
            out.put_f32(v);
    }
    return std::move(out).bytes();
}

/// AVPF does not record min_cells; the caller supplies it (it is part of the cache key).
inline FeaturePyramid parse_pyramid(std::span<const std::uint8_t> bytes, int min_cells = 5)
{
    detail::ByteReader in(bytes);
    if (!in.expect_magic("AVPF"))
        throw Error("not an AVPF pyramid");
    if (in.get_u16() != kAvpfVersion)
        throw Error("unsupported AVPF version");
    const int count = in.get_u16();
    const int cell = in.get_u16();
    const int lambda = in.get_u16();
    detail::require(cell > 0 && lambda > 0, "AVPF header has zero cell size or lambda");
    std::vector<FeatureLevel> levels;
    levels.reserve(count);
    for (int i = 0; i < count; ++i) {
        FeatureLevel lv;
        lv.cells_w = in.get_u16();
        lv.cells_h = in.get_u16();
        lv.scale = in.get_f32();
        lv.cell_size = cell;
        const std::size_t n = static_cast<std::size_t>(lv.cells_w) * lv.cells_h * kFeatureChannels;
        detail::require(in.remaining() >= n * 4, "truncated AVPF level");
        lv.data.resize(n);
        for (float& v : lv.data)
            v = in.get_f32();
        levels.push_back(std::move(lv));
    }
    detail::require(in.remaining() == 0, "trailing bytes after AVPF pyramid");
    return FeaturePyramid(std::move(levels), lambda, cell, min_cells);
}

namespace detail {

// Writes to a sibling temp file, syncs it, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    static std::atomic<std::uint64_t> serial{0};
    const std::filesystem::path tmp =
        path.string() + ".tmp" + std::to_string(::getpid()) + "-" + std::to_string(++serial);
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f)
        throw Error("cannot create " + tmp.string() + ": " + std::strerror(errno));
    const bool wrote = bytes.empty() || std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
    const bool flushed = std::fflush(f) == 0 && ::fsync(::fileno(f)) == 0;
    const int saved = errno;
    const bool closed = std::fclose(f) == 0;
    if (!wrote || !flushed || !closed) {
        std::error_code ec;
        std::filesystem::remove(tmp, ec);
        throw Error("cannot write " + path.string() + ": " + std::strerror(saved ? saved : errno));
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error("cannot rename into " + path.string() + ": " + ec.message());
    }
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text)
{
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::optional<CacheKey> parse_cache_stem(const std::string& stem)
{
    if (stem.size() != 33 || stem[16] != '-')
        return std::nullopt;
    try {
        std::size_t a = 0, b = 0;
        const std::uint64_t c = std::stoull(stem.substr(0, 16), &a, 16);
        const std::uint64_t p = std::stoull(stem.substr(17), &b, 16);
        if (a != 16 || b != 16)
            return std::nullopt;
        return CacheKey{c, p};
    } catch (const std::logic_error&) {
        return std::nullopt;
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Pyramid store

struct StoreStats {
    std::size_t hits = 0;
    std::size_t misses = 0;
    std::size_t puts = 0;
    std::size_t corrupt = 0;
    std::size_t evicted = 0;
};

/// On-disk pyramid cache, one immutable `<content>-<params>.avpf` file per key,
/// with least-recently-used eviction against a byte budget.
class PyramidStore {
public:
    explicit PyramidStore(std::filesystem::path dir, std::ostream* log = nullptr) : dir_(std::move(dir)), log_(log)
    {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec)
            throw Error("cannot create cache directory " + dir_.string() + ": " + ec.message());
        scan();
    }

    const std::filesystem::path& directory() const { return dir_; }
    std::filesystem::path path_for(const CacheKey& key) const { return dir_ / (key.file_stem() + ".avpf"); }

    void put(const CacheKey& key, const FeaturePyramid& pyramid)
    {
        const auto bytes = serialize_pyramid(pyramid);
        detail::write_file_atomic(path_for(key), bytes);
        std::lock_guard lock(mu_);
        entries_[key] = {++clock_, bytes.size()};
        ++stats_.puts;
    }

    /// Absent for unknown or corrupt keys. With `expect`, an entry whose header
    /// disagrees with the expected cell size or lambda counts as corrupt.
    std::optional<FeaturePyramid> get(const CacheKey& key, std::optional<PyramidParams> expect = std::nullopt)
    {
        const std::filesystem::path path = path_for(key);
        std::vector<std::uint8_t> bytes;
        {
            std::ifstream in(path, std::ios::binary);
            if (!in) {
                std::lock_guard lock(mu_);
                entries_.erase(key);
                ++stats_.misses;
                return std::nullopt;
            }
            bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        }
        try {
            FeaturePyramid pyr = parse_pyramid(bytes, expect ? expect->min_cells : 5);
            if (expect && (pyr.cell_size != expect->cell_size || pyr.lambda != expect->lambda))
                throw Error("AVPF header does not match the requested parameters");
            std::lock_guard lock(mu_);
            entries_[key] = {++clock_, bytes.size()};
            ++stats_.hits;
            return pyr;
        } catch (const Error& e) {
            std::error_code ec;
            std::filesystem::remove(path, ec);
            if (log_)
                *log_ << "cache: removed corrupt entry " << path.filename().string() << " (" << e.what() << ")\n";
            std::lock_guard lock(mu_);
            entries_.erase(key);
            ++stats_.corrupt;
            ++stats_.misses;
            return std::nullopt;
        }
    }

    bool contains(const CacheKey& key) const
    {
        std::lock_guard lock(mu_);
        return entries_.count(key) != 0;
    }

    /// Removes least recently used entries until the total is within budget.
    std::size_t evict_to_budget(std::uintmax_t budget)
    {
        std::lock_guard lock(mu_);
        std::uintmax_t total = total_locked();
        if (total <= budget)
            return 0;
        std::vector<std::pair<std::uint64_t, CacheKey>> by_age;
        for (const auto& [key, e] : entries_)
            by_age.push_back({e.tick, key});
        std::sort(by_age.begin(), by_age.end());
        std::size_t removed = 0;
        for (const auto& [tick, key] : by_age) {
            if (total <= budget)
                break;
            std::error_code ec;
            std::filesystem::remove(path_for(key), ec);
            if (ec)
                throw Error("cannot evict " + path_for(key).string() + ": " + ec.message());
            total -= entries_[key].bytes;
            entries_.erase(key);
            ++removed;
        }
        stats_.evicted += removed;
        return removed;
    }

    std::uintmax_t total_bytes() const
    {
        std::lock_guard lock(mu_);
        return total_locked();
    }

    std::size_t entry_count() const
    {
        std::lock_guard lock(mu_);
        return entries_.size();
    }

    StoreStats stats() const
    {
        std::lock_guard lock(mu_);
        return stats_;
    }

private:
    struct Entry {
        std::uint64_t tick = 0;
        std::uintmax_t bytes = 0;
    };

    // Existing entries start in modification-time order.
    void scan()
    {
        std::vector<std::tuple<std::filesystem::file_time_type, std::string, CacheKey, std::uintmax_t>> found;
        for (const auto& de : std::filesystem::directory_iterator(dir_)) {
            if (!de.is_regular_file() || de.path().extension() != ".avpf")
                continue;
            const auto key = detail::parse_cache_stem(de.path().stem().string());
            if (!key)
                continue;
            found.emplace_back(de.last_write_time(), de.path().filename().string(), *key, de.file_size());
        }
        std::sort(found.begin(), found.end(),
                  [](const auto& a, const auto& b) { return std::tie(std::get<0>(a), std::get<1>(a)) <
                                                            std::tie(std::get<0>(b), std::get<1>(b)); });
        for (const auto& [time, name, key, size] : found)
            entries_[key] = {++clock_, size};
    }

    std::uintmax_t total_locked() const
    {
        std::uintmax_t t = 0;
        for (const auto& [key, e] : entries_)
            t += e.bytes;
        return t;
    }

    std::filesystem::path dir_;
    std::ostream* log_;
    mutable std::mutex mu_;
    std::map<CacheKey, Entry> entries_;
    std::uint64_t clock_ = 0;
    StoreStats stats_;
};

// ---------------------------------------------------------------------------
// Detection index

inline constexpr std::string_view kIndexHeader = "AVIX 1";

struct IndexDetection {
    std::string class_name;
    double score = 0.0;
    Rect box;
    int view_index = 0;

    bool operator==(const IndexDetection&) const = default;
};

struct IndexRecord {
    std::string media_id;
    int frame_no = 0;
    double frame_time = 0.0;
    std::vector<IndexDetection> detections;
    std::string model; // version tag of the detector that produced the record

    bool operator==(const IndexRecord&) const = default;

    /// Best score among detections of `cls`, if any.
    std::optional<double> best_score(const std::string& cls) const
    {
        std::optional<double> best;
        for (const IndexDetection& d : detections)
            if (d.class_name == cls && (!best || d.score > *best))
                best = d.score;
        return best;
    }
};

inline nlohmann::json to_json(const IndexRecord& r)
{
    nlohmann::json dets = nlohmann::json::array();
    for (const IndexDetection& d : r.detections)
        dets.push_back({{"class", d.class_name},
                        {"score", d.score},
                        {"box", {d.box.x0, d.box.y0, d.box.x1, d.box.y1}},
                        {"view_index", d.view_index}});
    return {{"media_id", r.media_id}, {"frame_no", r.frame_no}, {"frame_time", r.frame_time},
            {"detections", std::move(dets)}, {"model", r.model}};
}

inline IndexRecord index_record_from_json(const nlohmann::json& j)
{
    IndexRecord r;
    r.media_id = j.at("media_id").get<std::string>();
    r.frame_no = j.at("frame_no").get<int>();
    r.frame_time = j.at("frame_time").get<double>();
    r.model = j.value("model", std::string{});
    for (const auto& d : j.at("detections")) {
        const auto& b = d.at("box");
        detail::require(b.is_array() && b.size() == 4, "index box must have four numbers");
        r.detections.push_back({d.at("class").get<std::string>(), d.at("score").get<double>(),
                                Rect{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                                d.value("view_index", 0)});
    }
    detail::require(r.frame_no >= 0 && r.frame_time >= 0.0, "negative frame number or time");
    return r;
}

inline std::string index_line(const IndexRecord& r) { return to_json(r).dump() + "\n"; }

/// Records in canonical order: (media_id, frame_no, model).
inline void sort_index(std::vector<IndexRecord>& records)
{
    std::stable_sort(records.begin(), records.end(), [](const IndexRecord& a, const IndexRecord& b) {
        return std::tie(a.media_id, a.frame_no, a.model) < std::tie(b.media_id, b.frame_no, b.model);
    });
}

inline void save_index(const std::filesystem::path& path, const std::vector<IndexRecord>& records)
{
    std::string text(kIndexHeader);
    text += '\n';
    for (const IndexRecord& r : records)
        text += index_line(r);
    detail::write_file_atomic(path, text);
}

/// Appends records, writing the header first if the file is new or empty.
inline void append_index(const std::filesystem::path& path, const std::vector<IndexRecord>& records)
{
    std::error_code ec;
    const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out)
        throw Error("cannot open index " + path.string());
    if (fresh)
        out << kIndexHeader << '\n';
    for (const IndexRecord& r : records)
        out << index_line(r);
    out.flush();
    if (!out)
        throw Error("cannot append to index " + path.string());
}

/// A missing file is an empty index. Unparseable lines are skipped and counted.
inline std::vector<IndexRecord> load_index(const std::filesystem::path& path, std::size_t* skipped = nullptr)
{
    std::vector<IndexRecord> out;
    std::size_t bad = 0;
    std::ifstream in(path, std::ios::binary);
    if (in) {
        std::string line;
        bool first = true;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r')
                line.pop_back();
            if (first) {
                first = false;
                if (line != kIndexHeader)
                    throw Error("index " + path.string() + " lacks the AVIX header");
                continue;
            }
            if (line.empty())
                continue;
            try {
                out.push_back(index_record_from_json(nlohmann::json::parse(line)));
            } catch (const std::exception&) {
                ++bad;
            }
        }
    }
    if (skipped)
        *skipped = bad;
    return out;
}

struct RankedRecord {
    std::size_t record = 0; // position in the queried vector
    double best_score = 0.0;
};

/// Records holding at least one `cls` detection scoring >= min_score, by best
/// such score descending, ties by (media_id, frame_no).
inline std::vector<RankedRecord> query_index(const std::vector<IndexRecord>& records, const std::string& cls,
                                             double min_score, const std::optional<std::string>& media = std::nullopt)
{
    std::vector<RankedRecord> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const IndexRecord& r = records[i];
        if (media && r.media_id != *media)
            continue;
        std::optional<double> best;
        for (const IndexDetection& d : r.detections)
            if (d.class_name == cls && d.score >= min_score && (!best || d.score > *best))
                best = d.score;
        if (best)
            out.push_back({i, *best});
    }
    std::stable_sort(out.begin(), out.end(), [&](const RankedRecord& a, const RankedRecord& b) {
        if (a.best_score != b.best_score)
            return a.best_score > b.best_score;
        const IndexRecord& ra = records[a.record];
        const IndexRecord& rb = records[b.record];
        return std::tie(ra.media_id, ra.frame_no) < std::tie(rb.media_id, rb.frame_no);
    });
    return out;
}

} // namespace avd
