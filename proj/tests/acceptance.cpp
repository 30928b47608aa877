// Acceptance suite: one PASS/FAIL line per top-level requirement.
// Exit status is nonzero if any line fails.

#include <avd/evaluation.hpp>
#include <avd/model_io.hpp>
#include <avd/service.hpp>

#include "support/oracles.hpp"
#include "support/planted.hpp"
#include "support/temp_dir.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

using namespace avd;
using avd::testing::TempDir;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;
};

// Collects the first few failure messages for one requirement.
class Check {
public:
    void expect(bool cond, const std::string& what)
    {
        if (cond)
            return;
        if (failures_++ < 3)
            msg_ << (msg_.tellp() > 0 ? "; " : "") << what;
    }
    void note(const std::string& s) { notes_ << (notes_.tellp() > 0 ? ", " : "") << s; }
    Outcome outcome() const
    {
        if (failures_ == 0)
            return {true, notes_.str()};
        return {false, std::to_string(failures_) + " failure(s): " + msg_.str()};
    }

private:
    int failures_ = 0;
    std::ostringstream msg_, notes_;
};

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 3)
{
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

// --- features and geometry -------------------------------------------------

Outcome hog_oracle()
{
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> dim(24, 96);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const int w = dim(rng), h = dim(rng), cell = i % 2 ? 8 : 4;
        const ImageBuffer img = oracle::random_image(rng, w, h);
        const FeatureLevel got = hog_level(img, cell);
        const FeatureLevel want = oracle::hog(img, cell);
        if (got.cells_w != want.cells_w || got.cells_h != want.cells_h) {
            c.expect(false, "grid mismatch at " + std::to_string(w) + "x" + std::to_string(h));
            continue;
        }
        double diff = 0.0;
        for (std::size_t k = 0; k < got.data.size(); ++k)
            diff = std::max(diff, std::abs(static_cast<double>(got.data[k]) - want.data[k]));
        worst = std::max(worst, diff);
        c.expect(diff <= 1e-5, "max diff " + fmt(diff) + " at " + std::to_string(w) + "x" + std::to_string(h));
    }
    const double secs = seconds_since(t0);
    c.expect(secs < 30.0, "took " + fmt(secs) + " s");
    c.note("max diff " + fmt(worst));
    c.note(fmt(secs) + " s");
    return c.outcome();
}

Outcome warp_oracle()
{
    Check c;
    std::mt19937_64 rng(102);
    std::uniform_real_distribution<double> ang(0.0, 2.0 * std::numbers::pi), sc(0.6, 1.6), sh(-0.3, 0.3),
        tr(-8.0, 8.0);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const ImageBuffer img = oracle::random_image(rng, 40 + i % 7, 32 + i % 5);
        AffineMap m = AffineMap::rotation(ang(rng)).after(AffineMap{sc(rng), sh(rng), 0.0, sc(rng), 0.0, 0.0});
        m.tx = tr(rng) + 16;
        m.ty = tr(rng) + 16;
        const ImageBuffer got = warp_affine(img, m, 56, 48, 0.25f);
        const ImageBuffer want = oracle::warp(img, m, 56, 48, 0.25f);
        double diff = 0.0;
        for (std::size_t k = 0; k < got.data.size(); ++k)
            diff = std::max(diff, std::abs(static_cast<double>(got.data[k]) - want.data[k]));
        worst = std::max(worst, diff);
        c.expect(diff <= 1e-6, "map " + std::to_string(i) + " diff " + fmt(diff));
        const ImageBuffer same = warp_affine(img, AffineMap{}, img.width, img.height, 0.0f);
        c.expect(same.data == img.data, "identity map not bit-exact");
    }
    c.note("max diff " + fmt(worst));
    return c.outcome();
}

Outcome distance_transform_exact()
{
    Check c;
    std::mt19937_64 rng(103);
    std::uniform_int_distribution<int> len(1, 64), small(-3, 3);
    std::uniform_real_distribution<double> lin(0.0, 2.0), quad(0.01, 2.0);
    std::normal_distribution<double> g(0.0, 5.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = len(rng);
        std::vector<double> f(static_cast<std::size_t>(n));
        // Every fourth input is integer-valued so ties actually occur.
        for (double& v : f)
            v = trial % 4 == 0 ? small(rng) : g(rng);
        const double d1 = trial % 5 == 0 ? 0.0 : lin(rng);
        const double d2 = trial % 4 == 0 ? 1.0 : quad(rng);
        const auto got = distance_transform_1d(f, d1, d2);
        const auto want = oracle::distance_transform(f, d1, d2, 0, n);
        c.expect(got.values == want.values && got.argmax == want.argmax, "1-D trial " + std::to_string(trial));
    }

    std::uniform_int_distribution<int> root_dim(1, 16), parts_n(0, 3);
    std::uniform_real_distribution<float> flin(0.0f, 1.0f), fquad(0.01f, 1.0f);
    std::normal_distribution<double> s(0.0, 2.0);
    auto scores = [&](int w, int h) {
        ScoreMap m(w, h);
        for (double& v : m.data)
            v = s(rng);
        return m;
    };
    for (int trial = 0; trial < 50; ++trial) {
        const ScoreMap root = scores(root_dim(rng), root_dim(rng));
        Component comp;
        comp.bias = 0.5f;
        std::vector<ScoreMap> responses;
        const int n = parts_n(rng);
        for (int p = 0; p < n; ++p) {
            Part part;
            part.filter = Filter(2, 2);
            part.ax = std::uniform_int_distribution<int>(0, 2 * root.w - 1)(rng);
            part.ay = std::uniform_int_distribution<int>(0, 2 * root.h - 1)(rng);
            part.deform = {flin(rng), flin(rng), fquad(rng), fquad(rng)};
            comp.parts.push_back(part);
            responses.push_back(scores(2 * root.w + 1, 2 * root.h + 1));
        }
        const auto got = place_parts(root, responses, comp);
        const auto want = oracle::place_parts(root, responses, comp);
        bool same = got.combined.w == want.combined.w && got.combined.h == want.combined.h;
        for (std::size_t i = 0; same && i < got.combined.data.size(); ++i)
            same = std::abs(got.combined.data[i] - want.combined.data[i]) <= 1e-9;
        for (int p = 0; same && p < n; ++p)
            for (std::size_t i = 0; i < root.data.size(); ++i)
                same = same && got.placements[p][i].x == want.placements[p][i].x &&
                       got.placements[p][i].y == want.placements[p][i].y;
        c.expect(same, "placement trial " + std::to_string(trial));
    }
    c.note("1000 transforms, 50 placements");
    return c.outcome();
}

Outcome view_grid()
{
    Check c;
    const ViewGrid grid = sample_view_grid(2.0, 72.0 * std::numbers::pi / 180.0);
    c.expect(grid.views.size() == 10, "grid has " + std::to_string(grid.views.size()) + " views");
    std::map<double, int> per_tilt;
    for (const ViewSpec& v : grid.views)
        ++per_tilt[v.tilt];
    std::vector<int> counts;
    for (const auto& [t, n] : per_tilt)
        counts.push_back(n);
    c.expect(counts == std::vector<int>{1, 4, 5}, "rotation counts per tilt differ from 1,4,5");

    std::mt19937_64 rng(104);
    const int W = 160, H = 120;
    std::uniform_real_distribution<double> ux(0.0, W - 8.0), uy(0.0, H - 8.0), us(4.0, 60.0);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const double x0 = ux(rng), y0 = uy(rng);
        const Rect box{x0, y0, std::min<double>(W, x0 + us(rng)), std::min<double>(H, y0 + us(rng))};
        for (const ViewSpec& spec : grid.views) {
            const ViewParams view = make_view(spec, W, H);
            const auto back = backproject_points(project_box(box, view), view);
            if (!back) {
                c.expect(false, "box lost in a view");
                continue;
            }
            const double err = std::max({std::abs(back->x0 - box.x0), std::abs(back->y0 - box.y0),
                                         std::abs(back->x1 - box.x1), std::abs(back->y1 - box.y1)});
            worst = std::max(worst, err);
            c.expect(err <= 2.0, "round trip error " + fmt(err) + " px");
        }
    }
    c.note("worst side error " + fmt(worst) + " px");
    return c.outcome();
}

// --- detection quality -----------------------------------------------------

Outcome viewpoint_robustness()
{
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    const DetectorModel model = avd::testing::train_planted_model();
    std::mt19937_64 rng(105);
    const ViewGrid full = sample_view_grid(ViewConfig{});
    const ViewGrid ident = identity_grid();
    const double phis[5] = {0, 36, 72, 108, 144};
    int hit_full = 0, hit_ident = 0;
    const int n = 20;
    for (int i = 0; i < n; ++i) {
        const double phi = phis[i % 5] * std::numbers::pi / 180.0;
        const auto scene =
            avd::testing::distorted_scene(rng, 160, 160, 80, avd::testing::tilted_appearance(2.0, phi));
        MultiviewConfig mc;
        mc.threshold = model.threshold;
        auto found = [&](const ViewGrid& g) {
            for (const Detection& d : nms(detect_multiview(scene.image, model, g, mc)))
                if (iou(d.box, scene.boxes[0]) >= 0.5)
                    return true;
            return false;
        };
        hit_full += found(full);
        hit_ident += found(ident);
    }
    const double recall_full = static_cast<double>(hit_full) / n;
    const double recall_ident = static_cast<double>(hit_ident) / n;
    const double secs = seconds_since(t0);
    c.expect(recall_full >= 0.9, "full-grid recall " + fmt(recall_full));
    c.expect(recall_ident <= 0.2, "identity recall " + fmt(recall_ident));
    c.expect(secs < 300.0, "took " + fmt(secs) + " s");
    c.note("recall full " + fmt(recall_full) + " vs identity " + fmt(recall_ident) + " at threshold " +
           fmt(model.threshold));
    c.note(fmt(secs) + " s");
    return c.outcome();
}

ClassEvaluation held_out_ap(const DetectorModel& model, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<ScoredDetection> dets;
    GroundTruthSet gt;
    for (int i = 0; i < 10; ++i) {
        const auto scene = avd::testing::upright_scene(rng, 96, 96, true);
        const std::string id = "held" + std::to_string(i);
        gt[id] = {{scene.boxes[0], false}};
        const auto pyr = build_pyramid(scene.image, PyramidParams{model.cell_size, model.lambda, 5});
        for (const Detection& d : nms(detect(pyr, model, model.threshold - 1.0)))
            dets.push_back({id, d.score, d.box});
    }
    return evaluate_class(dets, gt);
}

Outcome end_to_end_ap()
{
    Check c;
    const DetectorModel a = avd::testing::train_planted_model(7, 20);
    const DetectorModel b = avd::testing::train_planted_model(7, 20);
    c.expect(serialize_model(a) == serialize_model(b), "training is not deterministic");
    const ClassEvaluation ea = held_out_ap(a, 106);
    const ClassEvaluation eb = held_out_ap(b, 106);
    c.expect(ea.ap_all_points == 1.0, "all-points AP " + fmt(ea.ap_all_points, 17));
    c.expect(ea.ap_eleven_point == 1.0, "11-point AP " + fmt(ea.ap_eleven_point, 17));
    c.expect(ea.ap_all_points == eb.ap_all_points && ea.ap_eleven_point == eb.ap_eleven_point,
             "AP differs between runs");
    c.note("AP " + fmt(ea.ap_all_points) + " / " + fmt(ea.ap_eleven_point) + " over " +
           std::to_string(ea.detections) + " detections");
    return c.outcome();
}

Outcome ap_correctness()
{
    Check c;
    using L = MatchLabel;
    c.expect(average_precision({L::TruePositive}, 1, APMode::AllPoints).ap == 1.0, "[TP] all-points");
    c.expect(average_precision({L::TruePositive}, 1, APMode::ElevenPoint).ap == 1.0, "[TP] 11-point");
    c.expect(average_precision({L::FalsePositive, L::TruePositive}, 1, APMode::AllPoints).ap == 0.5,
             "[FP,TP] all-points");

    std::mt19937_64 rng(107);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::bernoulli_distribution coin(0.5);
    for (int seq = 0; seq < 100; ++seq) {
        GroundTruthSet gt;
        std::vector<ScoredDetection> dets;
        const int n = 1 + seq % 25;
        for (int i = 0; i < n; ++i) {
            const std::string id = "im" + std::to_string(i);
            const Rect truth{10.0, 10.0, 50.0, 50.0};
            gt[id] = {{truth, false}};
            const Rect miss{60.0, 60.0, 90.0, 90.0};
            dets.push_back({id, u(rng), coin(rng) ? truth : miss});
            if (coin(rng))
                dets.push_back({id, u(rng), miss});
        }
        auto rescaled = dets;
        for (auto& d : rescaled)
            d.score = 2.0 * std::exp(d.score) + 1.0;
        const auto a = evaluate_class(dets, gt);
        const auto b = evaluate_class(rescaled, gt);
        c.expect(a.ap_all_points == b.ap_all_points && a.ap_eleven_point == b.ap_eleven_point,
                 "sequence " + std::to_string(seq) + " changed under rescaling");
    }
    c.note("hand cases and 100 rescaled sequences");
    return c.outcome();
}

// --- cache -----------------------------------------------------------------

Outcome cache_behaviour()
{
    Check c;
    std::mt19937_64 rng(108);
    std::uniform_int_distribution<int> dim(40, 120);
    std::vector<FeaturePyramid> pyramids;
    for (int i = 0; i < 50; ++i) {
        const PyramidParams p{i % 3 == 0 ? 4 : 8, 2 + i % 4, 5};
        const int w = std::max(dim(rng), 5 * p.cell_size), h = std::max(dim(rng), 5 * p.cell_size);
        FeaturePyramid pyr = build_pyramid(oracle::random_image(rng, w, h), p);
        const auto bytes = serialize_pyramid(pyr);
        const FeaturePyramid back = parse_pyramid(bytes, p.min_cells);
        bool same = back.levels.size() == pyr.levels.size() && serialize_pyramid(back) == bytes;
        for (std::size_t l = 0; same && l < pyr.levels.size(); ++l)
            same = back.levels[l].data == pyr.levels[l].data && back.levels[l].scale == pyr.levels[l].scale;
        c.expect(same, "AVPF round trip " + std::to_string(i));
        if (i < 12)
            pyramids.push_back(std::move(pyr));
    }

    TempDir dir("accept-cache");
    {
        PyramidStore store(dir / "store");
        std::uniform_int_distribution<std::size_t> pick(0, pyramids.size() - 1);
        std::uniform_int_distribution<std::uintmax_t> budget(0, 400000);
        for (int step = 0; step < 300; ++step) {
            const std::size_t k = pick(rng);
            if (step % 3 == 2) {
                const std::uintmax_t b = budget(rng);
                store.evict_to_budget(b);
                c.expect(store.total_bytes() <= b, "budget exceeded after eviction");
            } else if (step % 3 == 1) {
                store.get({k, 1});
            } else {
                store.put({k, 1}, pyramids[k]);
            }
        }
    }

    pyramids.clear();

    // 200 images through the indexing job with a three-pyramid budget.
    std::filesystem::create_directories(dir / "repo");
    for (int i = 0; i < 200; ++i) {
        const auto scene = avd::testing::upright_scene(rng, 64, 64, i % 4 == 0);
        save_pgm(scene.image, dir / "repo" / ("im" + std::to_string(1000 + i) + ".pgm"));
    }
    const Workspace ws{dir / "ws"};
    ingest(ws, dir / "repo");
    DetectorModel model;
    model.class_name = "L";
    model.components.push_back({Filter(4, 4), {}, -1.0f});
    const ViewGrid grid = sample_view_grid(ViewConfig{});
    const std::uintmax_t one = avpf_size(
        build_pyramid(load_image(dir / "repo" / "im1000.pgm"), PyramidParams{model.cell_size, model.lambda, 5}));
    JobOptions opt;
    opt.workers = 2;
    opt.cache_budget = 3 * one;
    c.expect(FeaturePyramid::resident_count() == 0, "pyramids alive before the job");
    FeaturePyramid::reset_resident_peak();
    const JobSummary sum = run_job(ws, load_registry(ws), model, grid, opt);
    const long peak = FeaturePyramid::resident_peak();
    std::uintmax_t on_disk = 0;
    for (const auto& de : std::filesystem::directory_iterator(ws.cache_dir()))
        on_disk += de.file_size();
    c.expect(sum.frames_computed == 200 && sum.frames_failed == 0, "indexing job did not complete");
    c.expect(peak <= static_cast<long>(opt.workers), "peak resident pyramids " + std::to_string(peak));
    c.expect(on_disk <= *opt.cache_budget, "cache holds " + std::to_string(on_disk) + " bytes");
    c.note("peak resident " + std::to_string(peak) + " with " + std::to_string(opt.workers) + " workers");
    c.note(std::to_string(sum.pyramids_built) + " pyramids built");
    return c.outcome();
}

// --- service ---------------------------------------------------------------

Outcome service_behaviour()
{
    Check c;
    TempDir dir("accept-service");
    std::mt19937_64 rng(109);
    const auto repo = avd::testing::write_repository(dir / "repo", rng, 10, 6);
    const Workspace ws{dir / "ws"};
    ingest(ws, repo.dir);
    const DetectorModel model = avd::testing::train_planted_model();
    const ViewGrid grid = sample_view_grid(ViewConfig{});
    const JobSummary first = run_job(ws, load_registry(ws), model, grid, {});
    c.expect(first.frames_computed == 10, "first job computed " + std::to_string(first.frames_computed));

    const auto snap = load_snapshot(ws);
    const ImagePage page = search_images(*snap, "L", model.threshold, 100, 0);
    c.expect(page.total == 6, "query returned " + std::to_string(page.total) + " images");
    for (std::size_t i = 0; i < page.hits.size(); ++i) {
        const auto& h = page.hits[i];
        const auto it = std::find(repo.with_target.begin(), repo.with_target.end(), h.media_id);
        c.expect(it != repo.with_target.end(), h.media_id + " has no planted target");
        if (it != repo.with_target.end())
            c.expect(iou(h.box, repo.boxes[static_cast<std::size_t>(it - repo.with_target.begin())]) >= 0.5,
                     h.media_id + " box misplaced");
        if (i > 0)
            c.expect(page.hits[i - 1].score >= h.score, "results not in descending score order");
    }

    std::vector<IndexRecord> frames;
    for (int f = 0; f < 40; ++f) {
        IndexRecord r{"video", f, f / 25.0, {}, "m"};
        if ((f >= 10 && f <= 20) || f == 23 || f == 24)
            r.detections.push_back({"L", 1.0, {0, 0, 10, 10}, 0});
        frames.push_back(r);
    }
    const auto segs = group_segments(frames, "L", {0.0, 3, 3}, 25.0);
    c.expect(segs.size() == 1 && segs[0].start_frame == 10 && segs[0].end_frame == 24,
             "segment grouping did not give [10,24]");

    const JobSummary again = run_job(ws, load_registry(ws), model, grid, {});
    c.expect(again.frames_computed == 0, "rerun recomputed " + std::to_string(again.frames_computed) + " frames");
    c.note("6 of 10 images ranked, segment [10,24], rerun computed " + std::to_string(again.frames_computed));
    return c.outcome();
}

} // namespace

int main()
{
    const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
        {"hog-oracle-equivalence", hog_oracle},
        {"warp-oracle-equivalence", warp_oracle},
        {"distance-transform-exactness", distance_transform_exact},
        {"view-grid", view_grid},
        {"viewpoint-robustness", viewpoint_robustness},
        {"end-to-end-synthetic-ap", end_to_end_ap},
        {"ap-correctness", ap_correctness},
        {"pyramid-cache", cache_behaviour},
        {"service", service_behaviour},
    };
    int failed = 0;
    for (const auto& [name, run] : checks) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.ok;
        std::cout << (o.ok ? "PASS " : "FAIL ") << name << " (" << fmt(seconds_since(t0), 2) << " s)";
        if (!o.detail.empty())
            std::cout << ": " << o.detail;
        std::cout << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " requirement(s) failed" : "all requirements passed") << "\n";
    return failed ? 1 : 0;
}
