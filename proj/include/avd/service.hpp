#pragma once

#include <avd/detail/parallel.hpp>
#include <avd/error.hpp>
#include <avd/imaging.hpp>
#include <avd/model.hpp>
#include <avd/model_io.hpp>
#include <avd/store.hpp>
#include <avd/viewpoint.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace avd {

class NotFound : public Error {
public:
    using Error::Error;
};

inline constexpr std::string_view kFramesManifest = "frames.manifest";

// ---------------------------------------------------------------------------
// Media

enum class MediaKind { Image, Video };

struct MediaRecord {
    std::string media_id;
    MediaKind kind = MediaKind::Image;
    std::filesystem::path path;                // image file or frame directory
    std::vector<std::filesystem::path> frames; // videos only, in manifest order
    double fps = 0.0;
    int frame_count = 1;

    bool operator==(const MediaRecord&) const = default;

    std::filesystem::path frame_path(int n) const
    {
        if (n < 0 || n >= frame_count)
            throw NotFound("frame " + std::to_string(n) + " out of range for " + media_id);
        return kind == MediaKind::Image ? path : path / frames[static_cast<std::size_t>(n)];
    }

    double frame_time(int n) const { return kind == MediaKind::Video ? n / fps : 0.0; }
};

inline nlohmann::json to_json(const MediaRecord& m)
{
    nlohmann::json j{{"media_id", m.media_id},
                     {"kind", m.kind == MediaKind::Image ? "image" : "video"},
                     {"path", m.path.string()},
                     {"frame_count", m.frame_count}};
    if (m.kind == MediaKind::Video) {
        j["fps"] = m.fps;
        nlohmann::json frames = nlohmann::json::array();
        for (const auto& f : m.frames)
            frames.push_back(f.string());
        j["frames"] = std::move(frames);
    }
    return j;
}

inline MediaRecord media_record_from_json(const nlohmann::json& j)
{
    MediaRecord m;
    m.media_id = j.at("media_id").get<std::string>();
    const std::string kind = j.at("kind").get<std::string>();
    detail::require(kind == "image" || kind == "video", "unknown media kind '" + kind + "'");
    m.kind = kind == "image" ? MediaKind::Image : MediaKind::Video;
    m.path = j.at("path").get<std::string>();
    m.frame_count = j.at("frame_count").get<int>();
    if (m.kind == MediaKind::Video) {
        m.fps = j.at("fps").get<double>();
        for (const auto& f : j.at("frames"))
            m.frames.emplace_back(f.get<std::string>());
        detail::require(m.fps > 0.0 && static_cast<int>(m.frames.size()) == m.frame_count, "inconsistent video record");
    }
    return m;
}

inline bool is_image_file(const std::filesystem::path& p)
{
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

// Path below the ingest root with '/' replaced by ':' so ids fit in one URL segment.
inline std::string media_id_for(const std::filesystem::path& root, const std::filesystem::path& p)
{
    std::string id = std::filesystem::relative(p, root).generic_string();
    std::replace(id.begin(), id.end(), '/', ':');
    return id;
}

struct IngestResult {
    std::vector<MediaRecord> media;
    std::vector<std::string> diagnostics;
};

namespace detail {

inline std::optional<MediaRecord> read_video_dir(const std::filesystem::path& root, const std::filesystem::path& dir,
                                                 std::vector<std::string>& diag)
{
    const std::string where = dir.string();
    std::ifstream in(dir / kFramesManifest);
    if (!in) {
        diag.push_back(where + ": cannot read " + std::string(kFramesManifest));
        return std::nullopt;
    }
    std::string line;
    if (!std::getline(in, line)) {
        diag.push_back(where + ": empty frame manifest");
        return std::nullopt;
    }
    std::istringstream head(line);
    std::string word;
    double fps = 0.0;
    std::string rest;
    if (!(head >> word >> fps) || word != "fps" || (head >> rest) || !std::isfinite(fps) || fps <= 0.0) {
        diag.push_back(where + ": first manifest line must be 'fps <positive number>'");
        return std::nullopt;
    }
    MediaRecord m;
    m.media_id = media_id_for(root, dir);
    m.kind = MediaKind::Video;
    m.path = dir;
    m.fps = fps;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        try {
            probe_image_size(dir / line);
        } catch (const Error& e) {
            diag.push_back(where + ": frame '" + line + "' unusable (" + e.what() + "); video rejected");
            return std::nullopt;
        }
        m.frames.emplace_back(line);
    }
    if (m.frames.empty()) {
        diag.push_back(where + ": manifest lists no frames; video rejected");
        return std::nullopt;
    }
    m.frame_count = static_cast<int>(m.frames.size());
    return m;
}

inline void ingest_walk(const std::filesystem::path& root, const std::filesystem::path& dir, IngestResult& out)
{
    std::vector<std::filesystem::directory_entry> entries;
    std::error_code ec;
    for (const auto& de : std::filesystem::directory_iterator(dir, ec))
        entries.push_back(de);
    if (ec) {
        out.diagnostics.push_back(dir.string() + ": " + ec.message());
        return;
    }
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.path().filename() < b.path().filename(); });
    for (const auto& de : entries) {
        const auto& p = de.path();
        if (de.is_directory(ec)) {
            if (std::filesystem::exists(p / kFramesManifest)) {
                if (auto v = read_video_dir(root, p, out.diagnostics))
                    out.media.push_back(std::move(*v));
            } else {
                ingest_walk(root, p, out);
            }
        } else if (de.is_regular_file(ec) && is_image_file(p)) {
            try {
                probe_image_size(p);
                out.media.push_back({media_id_for(root, p), MediaKind::Image, p, {}, 0.0, 1});
            } catch (const Error& e) {
                out.diagnostics.push_back(p.string() + ": skipped (" + e.what() + ")");
            }
        }
    }
}

} // namespace detail

/// Registers still images and frame-directory videos below `dir`.
inline IngestResult ingest_directory(const std::filesystem::path& dir)
{
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec))
        throw Error(dir.string() + " is not a readable directory");
    IngestResult out;
    const auto root = std::filesystem::absolute(dir).lexically_normal();
    detail::ingest_walk(root, root, out);
    return out;
}

// ---------------------------------------------------------------------------
// Workspace

struct Workspace {
    std::filesystem::path root;

    std::filesystem::path registry_path() const { return root / "media.json"; }
    std::filesystem::path index_path() const { return root / "index.avix"; }
    std::filesystem::path cache_dir() const { return root / "cache"; }
};

inline std::vector<MediaRecord> load_registry(const Workspace& ws)
{
    std::ifstream in(ws.registry_path());
    if (!in)
        return {};
    std::vector<MediaRecord> out;
    try {
        const auto j = nlohmann::json::parse(in);
        for (const auto& m : j.at("media"))
            out.push_back(media_record_from_json(m));
    } catch (const nlohmann::json::exception& e) {
        throw Error("corrupt media registry " + ws.registry_path().string() + ": " + e.what());
    }
    return out;
}

inline void save_registry(const Workspace& ws, std::vector<MediaRecord> media)
{
    std::sort(media.begin(), media.end(), [](const auto& a, const auto& b) { return a.media_id < b.media_id; });
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : media)
        arr.push_back(to_json(m));
    std::filesystem::create_directories(ws.root);
    detail::write_file_atomic(ws.registry_path(), nlohmann::json{{"media", arr}}.dump(2) + "\n");
}

/// Ingests `dir` and merges the result into the workspace registry (same id replaces).
inline IngestResult ingest(const Workspace& ws, const std::filesystem::path& dir)
{
    IngestResult r = ingest_directory(dir);
    std::map<std::string, MediaRecord> merged;
    for (auto& m : load_registry(ws))
        merged[m.media_id] = std::move(m);
    for (const auto& m : r.media)
        merged[m.media_id] = m;
    std::vector<MediaRecord> all;
    for (auto& [id, m] : merged)
        all.push_back(std::move(m));
    save_registry(ws, std::move(all));
    return r;
}

// ---------------------------------------------------------------------------
// Indexing jobs

inline std::string model_version(const DetectorModel& m) { return hex64(fnv1a64(serialize_model(m))); }

struct JobOptions {
    std::optional<double> floor; // default: model threshold - 1
    ViewConfig views;
    int min_cells = 5;
    std::size_t workers = 1;
    double nms_iou = 0.5;
    std::optional<std::uintmax_t> cache_budget; // bytes
};

struct JobProgress {
    std::atomic<std::size_t> frames_total{0};
    std::atomic<std::size_t> frames_done{0};
    std::atomic<std::size_t> frames_skipped{0};
    std::atomic<std::size_t> frames_computed{0};
    std::atomic<std::size_t> frames_failed{0};
    std::atomic<std::size_t> pyramids_built{0};
    std::atomic<std::size_t> pyramids_loaded{0};
};

struct JobSummary {
    std::size_t frames_total = 0;
    std::size_t frames_skipped = 0;
    std::size_t frames_computed = 0;
    std::size_t frames_failed = 0;
    std::size_t pyramids_built = 0;
    std::size_t pyramids_loaded = 0;
    std::size_t corrupt_index_lines = 0;
    std::string model;
};

/// Detects `model` on every frame of `media` and merges the records into the
/// workspace index. Frames already indexed by the same model are skipped.
inline JobSummary run_job(const Workspace& ws, const std::vector<MediaRecord>& media, const DetectorModel& model,
                          const ViewGrid& grid, const JobOptions& opt, JobProgress* progress = nullptr,
                          std::ostream* log = nullptr)
{
    validate(model);
    JobProgress local;
    JobProgress& prog = progress ? *progress : local;
    JobSummary sum;
    sum.model = model_version(model);
    const double floor = opt.floor.value_or(static_cast<double>(model.threshold) - 1.0);
    const PyramidParams params{model.cell_size, model.lambda, opt.min_cells};

    std::filesystem::create_directories(ws.root);
    std::vector<IndexRecord> existing = load_index(ws.index_path(), &sum.corrupt_index_lines);
    if (log && sum.corrupt_index_lines)
        *log << "index: skipped " << sum.corrupt_index_lines << " corrupt line(s)\n";
    std::set<std::tuple<std::string, int, std::string>> done;
    for (const IndexRecord& r : existing)
        done.insert({r.media_id, r.frame_no, r.model});

    struct Work {
        const MediaRecord* media;
        int frame;
    };
    std::vector<Work> work;
    for (const MediaRecord& m : media)
        for (int f = 0; f < m.frame_count; ++f) {
            ++sum.frames_total;
            if (done.count({m.media_id, f, sum.model}))
                ++sum.frames_skipped;
            else
                work.push_back({&m, f});
        }
    prog.frames_total = sum.frames_total;
    prog.frames_skipped = sum.frames_skipped;
    prog.frames_done = sum.frames_skipped;

    std::vector<std::uint64_t> params_hash(grid.views.size());
    for (std::size_t v = 0; v < grid.views.size(); ++v)
        params_hash[v] = pyramid_params_hash(params, grid.views[v], opt.views.antialias_c);

    PyramidStore store(ws.cache_dir(), log);
    std::mutex out_mu;
    std::vector<IndexRecord> fresh;
    detail::parallel_for(work.size(), opt.workers, [&](std::size_t i) {
        const Work& w = work[i];
        try {
            const auto bytes = detail::read_file_bytes(w.media->frame_path(w.frame));
            const std::uint64_t content = fnv1a64(bytes);
            const ImageBuffer img = decode_pnm(bytes);

            MultiviewConfig mc;
            mc.min_cells = opt.min_cells;
            mc.threshold = floor;
            mc.antialias_c = opt.views.antialias_c;
            mc.workers = 1;
            mc.lookup = [&](std::size_t v, const ViewParams&) {
                auto p = store.get({content, params_hash[v]}, params);
                if (p)
                    ++prog.pyramids_loaded;
                return p;
            };
            mc.store = [&](std::size_t v, const ViewParams&, const FeaturePyramid& p) {
                ++prog.pyramids_built;
                store.put({content, params_hash[v]}, p);
            };
            const auto dets = nms(detect_multiview(img, model, grid, mc), opt.nms_iou);

            IndexRecord rec;
            rec.media_id = w.media->media_id;
            rec.frame_no = w.frame;
            rec.frame_time = w.media->frame_time(w.frame);
            rec.model = sum.model;
            for (const Detection& d : dets)
                rec.detections.push_back({model.class_name, d.score, d.box, d.view_index});

            std::lock_guard lock(out_mu);
            append_index(ws.index_path(), {rec});
            fresh.push_back(std::move(rec));
            ++prog.frames_computed;
        } catch (const std::exception& e) {
            ++prog.frames_failed;
            std::lock_guard lock(out_mu);
            if (log)
                *log << "job: " << w.media->media_id << " frame " << w.frame << " failed: " << e.what() << "\n";
        }
        if (opt.cache_budget)
            store.evict_to_budget(*opt.cache_budget);
        ++prog.frames_done;
    });

    // Canonical rewrite: one record per (media, frame, model), sorted.
    std::map<std::tuple<std::string, int, std::string>, IndexRecord> merged;
    for (auto& r : existing)
        merged[{r.media_id, r.frame_no, r.model}] = std::move(r);
    for (auto& r : fresh)
        merged[{r.media_id, r.frame_no, r.model}] = std::move(r);
    std::vector<IndexRecord> all;
    all.reserve(merged.size());
    for (auto& [k, r] : merged)
        all.push_back(std::move(r));
    save_index(ws.index_path(), all);

    sum.frames_computed = prog.frames_computed;
    sum.frames_failed = prog.frames_failed;
    sum.pyramids_built = prog.pyramids_built;
    sum.pyramids_loaded = prog.pyramids_loaded;
    return sum;
}

// ---------------------------------------------------------------------------
// Segments

struct SegmentOptions {
    double min_score = 0.0;
    int gap_tolerance = 5; // missed frames allowed between two hits of one segment
    int min_length = 3;    // frames, inclusive span
};

struct Segment {
    std::string media_id;
    std::string class_name;
    int start_frame = 0;
    int end_frame = 0;
    double start_time = 0.0;
    double end_time = 0.0;
    double peak_score = 0.0;
    int peak_frame = 0;
    Rect peak_box;
};

/// Groups hit frames of one video into segments. `records` must be ordered by frame_no.
inline std::vector<Segment> group_segments(const std::vector<IndexRecord>& records, const std::string& cls,
                                           const SegmentOptions& opt, double fps)
{
    detail::require(fps > 0.0, "fps must be positive");
    detail::require(opt.gap_tolerance >= 0 && opt.min_length >= 1, "invalid segment options");
    std::vector<Segment> out;
    std::optional<Segment> cur;
    int last = -1;
    auto close = [&]() {
        if (cur && cur->end_frame - cur->start_frame + 1 >= opt.min_length)
            out.push_back(*cur);
        cur.reset();
    };
    for (const IndexRecord& r : records) {
        detail::require(r.frame_no >= last, "records must be sorted by frame number");
        const IndexDetection* best = nullptr;
        for (const IndexDetection& d : r.detections)
            if (d.class_name == cls && d.score >= opt.min_score && (!best || d.score > best->score))
                best = &d;
        if (!best)
            continue;
        if (cur && r.frame_no - cur->end_frame - 1 > opt.gap_tolerance)
            close();
        if (!cur) {
            cur = Segment{r.media_id, cls, r.frame_no, r.frame_no, r.frame_no / fps, r.frame_no / fps,
                          best->score, r.frame_no, best->box};
        } else {
            cur->end_frame = r.frame_no;
            cur->end_time = r.frame_no / fps;
            if (best->score > cur->peak_score) {
                cur->peak_score = best->score;
                cur->peak_frame = r.frame_no;
                cur->peak_box = best->box;
            }
        }
        last = r.frame_no;
    }
    close();
    return out;
}

// ---------------------------------------------------------------------------
// Search

struct ImageHit {
    std::string media_id;
    int frame_no = 0;
    double score = 0.0;
    Rect box;                          // best box
    std::vector<IndexDetection> boxes; // every qualifying detection, best first
};

struct ImagePage {
    std::size_t total = 0;
    std::vector<ImageHit> hits;
};

struct IndexSnapshot {
    std::vector<MediaRecord> media;
    std::vector<IndexRecord> records;
    std::size_t corrupt_lines = 0;

    const MediaRecord* find(const std::string& id) const
    {
        auto it = std::find_if(media.begin(), media.end(), [&](const MediaRecord& m) { return m.media_id == id; });
        return it == media.end() ? nullptr : &*it;
    }
};

inline std::shared_ptr<const IndexSnapshot> load_snapshot(const Workspace& ws)
{
    auto s = std::make_shared<IndexSnapshot>();
    s->media = load_registry(ws);
    s->records = load_index(ws.index_path(), &s->corrupt_lines);
    return s;
}

inline ImagePage search_images(const IndexSnapshot& snap, const std::string& cls, double min_score, std::size_t limit,
                               std::size_t offset)
{
    std::set<std::string> images;
    for (const MediaRecord& m : snap.media)
        if (m.kind == MediaKind::Image)
            images.insert(m.media_id);
    std::vector<RankedRecord> ranked;
    for (const RankedRecord& r : query_index(snap.records, cls, min_score))
        if (images.count(snap.records[r.record].media_id))
            ranked.push_back(r);

    ImagePage page;
    page.total = ranked.size();
    for (std::size_t k = offset; k < ranked.size() && k - offset < limit; ++k) {
        const IndexRecord& rec = snap.records[ranked[k].record];
        ImageHit hit{rec.media_id, rec.frame_no, ranked[k].best_score, {}, {}};
        for (const IndexDetection& d : rec.detections)
            if (d.class_name == cls && d.score >= min_score)
                hit.boxes.push_back(d);
        std::stable_sort(hit.boxes.begin(), hit.boxes.end(),
                         [](const IndexDetection& a, const IndexDetection& b) { return a.score > b.score; });
        hit.box = hit.boxes.front().box;
        page.hits.push_back(std::move(hit));
    }
    return page;
}

inline std::vector<Segment> search_video(const IndexSnapshot& snap, const std::string& media_id, const std::string& cls,
                                         const SegmentOptions& opt)
{
    const MediaRecord* m = snap.find(media_id);
    if (!m)
        throw NotFound("unknown media '" + media_id + "'");
    if (m->kind != MediaKind::Video)
        throw Error("media '" + media_id + "' is not a video");
    std::vector<IndexRecord> recs;
    for (const IndexRecord& r : snap.records)
        if (r.media_id == media_id)
            recs.push_back(r);
    std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.frame_no < b.frame_no; });
    return group_segments(recs, cls, opt, m->fps);
}

inline std::vector<std::string> indexed_classes(const IndexSnapshot& snap)
{
    std::set<std::string> cls;
    for (const IndexRecord& r : snap.records)
        for (const IndexDetection& d : r.detections)
            cls.insert(d.class_name);
    return {cls.begin(), cls.end()};
}

inline nlohmann::json to_json(const Rect& r) { return nlohmann::json::array({r.x0, r.y0, r.x1, r.y1}); }

inline nlohmann::json to_json(const ImagePage& page, std::size_t limit, std::size_t offset)
{
    nlohmann::json hits = nlohmann::json::array();
    for (const ImageHit& h : page.hits) {
        nlohmann::json boxes = nlohmann::json::array();
        for (const IndexDetection& d : h.boxes)
            boxes.push_back({{"score", d.score}, {"box", to_json(d.box)}, {"view_index", d.view_index}});
        hits.push_back({{"media_id", h.media_id}, {"frame_no", h.frame_no}, {"score", h.score},
                        {"box", to_json(h.box)}, {"boxes", std::move(boxes)}});
    }
    return {{"total", page.total}, {"limit", limit}, {"offset", offset}, {"results", std::move(hits)}};
}

inline nlohmann::json to_json(const Segment& s)
{
    return {{"media_id", s.media_id},       {"class", s.class_name},      {"start_frame", s.start_frame},
            {"end_frame", s.end_frame},     {"start_time", s.start_time}, {"end_time", s.end_time},
            {"peak_score", s.peak_score},   {"peak_frame", s.peak_frame}, {"peak_box", to_json(s.peak_box)}};
}

} // namespace avd
