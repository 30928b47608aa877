// avd: command-line front end for training, detection, indexing, search and serving.

#include <avd/dataset.hpp>
#include <avd/evaluation.hpp>
#include <avd/http_api.hpp>
#include <avd/model_io.hpp>
#include <avd/service.hpp>
#include <avd/store.hpp>
#include <avd/training.hpp>
#include <avd/viewpoint.hpp>

#include <CLI11.hpp>
#include <httplib.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string workspace = "avd-workspace";
    std::size_t workers = 1;
    double t_max = 2.0;
    double rotation_base = 72.0;
    double antialias = 0.8;
    int min_cells = 5;
};

avd::ViewConfig view_config(const Globals& g) { return {g.t_max, g.rotation_base, g.antialias}; }

std::string resolve_id(const std::string& id)
{
    std::error_code ec;
    if (fs::is_regular_file(id, ec))
        return fs::weakly_canonical(id, ec).string();
    return id;
}

int cmd_ingest(const Globals& g, const std::string& dir)
{
    const auto r = avd::ingest({g.workspace}, dir);
    for (const auto& d : r.diagnostics)
        std::cerr << "warning: " << d << "\n";
    for (const auto& m : r.media) {
        std::cout << m.media_id << '\t' << (m.kind == avd::MediaKind::Image ? "image" : "video") << '\t'
                  << m.frame_count;
        if (m.kind == avd::MediaKind::Video)
            std::cout << '\t' << m.fps << " fps";
        std::cout << '\n';
    }
    std::cerr << r.media.size() << " media registered\n";
    return 0;
}

int cmd_train(const Globals& g, const std::string& manifest, const std::string& cls, const std::string& out,
              avd::TrainConfig cfg)
{
    cfg.workers = g.workers;
    cfg.pyramid.min_cells = g.min_cells;
    const auto ann = avd::load_manifest(manifest);
    std::map<std::string, std::vector<avd::Rect>> pos_boxes;
    std::vector<std::string> neg_paths;
    for (const auto& a : ann) {
        if (a.class_name == cls && a.has_box)
            pos_boxes[a.image].push_back(a.box);
        else if (a.class_name == avd::kNegativeClass &&
                 std::find(neg_paths.begin(), neg_paths.end(), a.image) == neg_paths.end())
            neg_paths.push_back(a.image);
    }
    if (pos_boxes.empty())
        throw avd::Error("manifest has no boxes of class '" + cls + "'");
    std::vector<avd::PositiveImage> positives;
    for (const auto& [path, boxes] : pos_boxes)
        positives.push_back({path, avd::load_image(path), boxes});
    std::vector<avd::ImageBuffer> negatives;
    for (const auto& p : neg_paths)
        negatives.push_back(avd::load_image(p));

    avd::TrainReport rep;
    const auto model = avd::train_detector(cls, positives, negatives, neg_paths, cfg, &rep);
    avd::save_model(model, out);
    std::cout << "root filter " << rep.dims.w << "x" << rep.dims.h << " cells, " << rep.positives << " positives, "
              << rep.negatives << " negatives\n";
    for (std::size_t i = 0; i < rep.round_objective.size(); ++i)
        std::cout << "round " << i << " objective " << rep.round_objective[i] << "\n";
    std::cout << "threshold " << model.threshold << " (training recall " << rep.training_recall << ")\n";
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_detect(const Globals& g, const std::string& image, const std::string& model_path,
               std::optional<double> threshold, bool single_view, double nms_iou, const std::string& dump,
               int dump_level)
{
    const auto model = avd::load_model(model_path);
    const auto img = avd::load_image(image);
    if (!dump.empty()) {
        const auto pyr = avd::build_pyramid(img, {model.cell_size, model.lambda, g.min_cells}, g.workers);
        if (dump_level < 0 || dump_level >= static_cast<int>(pyr.levels.size()))
            throw avd::Error("pyramid has " + std::to_string(pyr.levels.size()) + " levels");
        std::ofstream out(dump);
        if (!out)
            throw avd::Error("cannot write " + dump);
        avd::write_level_csv(pyr.levels[dump_level], out);
    }
    avd::MultiviewConfig mc;
    mc.min_cells = g.min_cells;
    mc.threshold = threshold.value_or(model.threshold);
    mc.antialias_c = g.antialias;
    mc.workers = g.workers;
    const auto grid = single_view ? avd::identity_grid() : avd::sample_view_grid(view_config(g));
    for (const auto& d : avd::nms(avd::detect_multiview(img, model, grid, mc), nms_iou))
        avd::write_detection_line(std::cout, {image, d.score, d.box});
    return 0;
}

int cmd_index(const Globals& g, const std::string& model_path, const std::string& media_id,
              std::optional<double> floor, std::optional<std::uintmax_t> budget)
{
    const avd::Workspace ws{g.workspace};
    const auto model = avd::load_model(model_path);
    auto media = avd::load_registry(ws);
    if (!media_id.empty()) {
        std::erase_if(media, [&](const avd::MediaRecord& m) { return m.media_id != media_id; });
        if (media.empty())
            throw avd::Error("unknown media '" + media_id + "'");
    }
    avd::JobOptions jo;
    jo.floor = floor;
    jo.views = view_config(g);
    jo.min_cells = g.min_cells;
    jo.workers = g.workers;
    jo.cache_budget = budget;
    const auto s = avd::run_job(ws, media, model, avd::sample_view_grid(jo.views), jo, nullptr, &std::cerr);
    std::cout << "frames " << s.frames_total << ", computed " << s.frames_computed << ", skipped "
              << s.frames_skipped << ", failed " << s.frames_failed << "\n";
    std::cout << "pyramids built " << s.pyramids_built << ", loaded from cache " << s.pyramids_loaded << "\n";
    return s.frames_failed ? 2 : 0;
}

int cmd_search_images(const Globals& g, const std::string& cls, double min_score, std::size_t limit,
                      std::size_t offset)
{
    const auto snap = avd::load_snapshot({g.workspace});
    const auto page = avd::search_images(*snap, cls, min_score, limit, offset);
    std::size_t rank = offset;
    for (const auto& h : page.hits)
        std::cout << ++rank << '\t' << h.media_id << '\t' << h.score << '\t' << avd::detail::format_box(h.box) << '\t'
                  << h.boxes.size() << " box(es)\n";
    std::cerr << page.total << " matching image(s)\n";
    return 0;
}

int cmd_search_video(const Globals& g, const std::string& media, const std::string& cls, avd::SegmentOptions so)
{
    const auto snap = avd::load_snapshot({g.workspace});
    for (const auto& s : avd::search_video(*snap, media, cls, so))
        std::cout << s.start_frame << '-' << s.end_frame << '\t' << std::fixed << std::setprecision(3) << s.start_time
                  << "s-" << s.end_time << "s\tpeak " << std::defaultfloat << s.peak_score << " @" << s.peak_frame
                  << '\t' << avd::detail::format_box(s.peak_box) << '\n';
    return 0;
}

int cmd_eval(const std::string& manifest, const std::string& detections, const std::string& cls, double iou_min)
{
    auto gt_raw = avd::ground_truth_for_class(avd::load_manifest(manifest), cls);
    avd::GroundTruthSet gt;
    for (auto& [id, boxes] : gt_raw)
        gt[resolve_id(id)] = std::move(boxes);
    std::ifstream in(detections);
    if (!in)
        throw avd::Error("cannot open " + detections);
    auto dets = avd::parse_detections(in);
    for (auto& d : dets)
        d.image_id = resolve_id(d.image_id);
    const auto e = avd::evaluate_class(dets, gt, iou_min);
    std::cout << "class " << cls << ": " << e.n_pos << " positives, " << e.detections << " detections\n";
    std::cout << std::setprecision(6) << "AP (11-point):   " << e.ap_eleven_point << "\n"
              << "AP (all points): " << e.ap_all_points << "\n";
    return 0;
}

int cmd_cache_gc(const Globals& g, std::uintmax_t budget)
{
    avd::PyramidStore store(avd::Workspace{g.workspace}.cache_dir(), &std::cerr);
    const auto removed = store.evict_to_budget(budget);
    std::cout << "removed " << removed << " entr" << (removed == 1 ? "y" : "ies") << ", " << store.entry_count()
              << " left, " << store.total_bytes() << " bytes\n";
    return 0;
}

int cmd_serve(const Globals& g, const std::string& host, int port, avd::SegmentOptions so)
{
    avd::ApiOptions opt;
    opt.job.views = view_config(g);
    opt.job.min_cells = g.min_cells;
    opt.job.workers = g.workers;
    opt.segments = so;
    avd::ApiServer api({g.workspace}, opt, &std::cerr);
    httplib::Server srv;
    api.register_routes(srv);
    std::cerr << "listening on http://" << host << ":" << port << "\n";
    if (!srv.listen(host, port))
        throw avd::Error("cannot listen on " + host + ":" + std::to_string(port));
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Viewpoint-invariant object detection and content-based search"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value configuration file supplying option defaults");

    Globals g;
    app.add_option("--workspace,-w", g.workspace, "Directory holding the media registry, index and cache")
        ->capture_default_str();
    app.add_option("--workers", g.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--t-max", g.t_max, "Largest simulated tilt")->capture_default_str()->check(CLI::Range(1.0, 16.0));
    app.add_option("--rotation-base", g.rotation_base, "Rotation step at tilt 1, degrees")->capture_default_str();
    app.add_option("--antialias", g.antialias, "Anti-aliasing constant c in sigma = c sqrt(t^2 - 1)")
        ->capture_default_str();
    app.add_option("--min-cells", g.min_cells, "Smallest pyramid level side, in cells")->capture_default_str();

    std::string dir;
    auto* ingest = app.add_subcommand("ingest", "Register images and frame-directory videos");
    ingest->add_option("directory", dir)->required()->check(CLI::ExistingDirectory);

    std::string manifest, cls, out = "model.avdm";
    avd::TrainConfig tc;
    auto* train = app.add_subcommand("train", "Train a root-filter detector from a manifest");
    train->add_option("--manifest", manifest, "TAB-separated annotation manifest")->required()->check(CLI::ExistingFile);
    train->add_option("--class", cls, "Object class to learn")->required();
    train->add_option("--out,-o", out, "Output model file")->capture_default_str();
    train->add_option("--C", tc.C, "SVM regularization trade-off")->capture_default_str();
    train->add_option("--epochs", tc.epochs, "Solver passes over the samples")->capture_default_str();
    train->add_option("--mining-rounds", tc.mining_rounds, "Hard-negative mining rounds")->capture_default_str();
    train->add_option("--neg-floor", tc.neg_floor, "Score above which background windows are mined")
        ->capture_default_str();
    train->add_option("--max-cache", tc.max_cache, "Negative sample cap")->capture_default_str();
    train->add_option("--seed", tc.seed, "Random seed")->capture_default_str();
    train->add_option("--cell-size", tc.pyramid.cell_size, "HOG cell size, pixels")->capture_default_str();
    train->add_option("--lambda", tc.pyramid.lambda, "Pyramid levels per octave")->capture_default_str();
    train->add_option("--calibration-recall", tc.calibration_recall, "Training recall kept by the threshold")
        ->capture_default_str();

    std::string image, model_path, dump;
    std::optional<double> threshold;
    bool single_view = false;
    double nms_iou = 0.5;
    int dump_level = 0;
    auto* detect = app.add_subcommand("detect", "Detect objects in one image and print the boxes");
    detect->add_option("image", image)->required()->check(CLI::ExistingFile);
    detect->add_option("--model,-m", model_path, "Model file")->required()->check(CLI::ExistingFile);
    detect->add_option("--threshold", threshold, "Score threshold (default: the model's)");
    detect->add_flag("--single-view", single_view, "Skip viewpoint simulation");
    detect->add_option("--nms-iou", nms_iou, "Suppression overlap")->capture_default_str();
    detect->add_option("--dump-features", dump, "Write one pyramid level of the image as CSV");
    detect->add_option("--dump-level", dump_level, "Level for --dump-features")->capture_default_str();

    std::string media_id;
    std::optional<double> floor;
    std::optional<std::uintmax_t> budget;
    auto* index = app.add_subcommand("index", "Run detection over registered media into the index");
    index->add_option("--model,-m", model_path, "Model file")->required()->check(CLI::ExistingFile);
    index->add_option("--media", media_id, "Only this media id");
    index->add_option("--floor", floor, "Lowest stored score (default: model threshold - 1)");
    index->add_option("--cache-budget", budget, "Pyramid cache budget, e.g. 500MB")
        ->transform(CLI::AsSizeValue(false));

    double min_score = -std::numeric_limits<double>::infinity();
    std::size_t limit = 20, offset = 0;
    auto* search_img = app.add_subcommand("search-images", "Rank indexed images containing a class");
    search_img->add_option("--class", cls)->required();
    search_img->add_option("--min-score", min_score, "Lowest score to consider");
    search_img->add_option("--limit", limit)->capture_default_str();
    search_img->add_option("--offset", offset)->capture_default_str();

    avd::SegmentOptions so;
    so.min_score = min_score;
    auto* search_vid = app.add_subcommand("search-video", "List the segments of a video showing a class");
    search_vid->add_option("--media", media_id)->required();
    search_vid->add_option("--class", cls)->required();
    search_vid->add_option("--min-score", so.min_score, "Lowest score to consider");
    search_vid->add_option("--gap", so.gap_tolerance, "Missed frames bridged inside a segment")->capture_default_str();
    search_vid->add_option("--min-len", so.min_length, "Shortest segment, frames")->capture_default_str();

    std::string det_file;
    double iou_min = 0.5;
    auto* eval = app.add_subcommand("eval", "Average precision of a detection file against ground truth");
    eval->add_option("--manifest", manifest, "Ground-truth manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--detections", det_file, "image_id<TAB>score<TAB>x0,y0,x1,y1 lines")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--class", cls)->required();
    eval->add_option("--iou", iou_min, "Match overlap")->capture_default_str();

    std::uintmax_t gc_budget = 0;
    auto* cache = app.add_subcommand("cache", "Pyramid cache maintenance");
    cache->require_subcommand(1);
    auto* gc = cache->add_subcommand("gc", "Evict least recently used pyramids down to a budget");
    gc->add_option("--budget", gc_budget, "Budget, e.g. 200MB")->required()->transform(CLI::AsSizeValue(false));

    std::string host = "127.0.0.1";
    int port = 8080;
    avd::SegmentOptions serve_so;
    auto* serve = app.add_subcommand("serve", "Serve the JSON search API");
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port)->capture_default_str();
    serve->add_option("--gap", serve_so.gap_tolerance, "Default segment gap tolerance")->capture_default_str();
    serve->add_option("--min-len", serve_so.min_length, "Default shortest segment")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest)
            return cmd_ingest(g, dir);
        if (*train)
            return cmd_train(g, manifest, cls, out, tc);
        if (*detect)
            return cmd_detect(g, image, model_path, threshold, single_view, nms_iou, dump, dump_level);
        if (*index)
            return cmd_index(g, model_path, media_id, floor, budget);
        if (*search_img)
            return cmd_search_images(g, cls, min_score, limit, offset);
        if (*search_vid)
            return cmd_search_video(g, media_id, cls, so);
        if (*eval)
            return cmd_eval(manifest, det_file, cls, iou_min);
        if (*gc)
            return cmd_cache_gc(g, gc_budget);
        if (*serve)
            return cmd_serve(g, host, port, serve_so);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
