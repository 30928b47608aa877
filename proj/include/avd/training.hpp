#pragma once

#include <avd/detail/parallel.hpp>
#include <avd/error.hpp>
#include <avd/evaluation.hpp>
#include <avd/features.hpp>
#include <avd/imaging.hpp>
#include <avd/model.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace avd {

struct TrainConfig {
    double C = 0.05;
    int epochs = 200;
    int mining_rounds = 2;
    double neg_floor = -1.0;
    std::size_t max_cache = 4000;
    std::uint64_t seed = 1;
    int random_negatives_per_image = 10;
    double calibration_recall = 0.8;
    PyramidParams pyramid;
    std::size_t workers = 1;
    // Adds an all-zero descriptor as a permanent negative, once per negative
    // image, so uniform regions (flat areas, the fill around simulated views)
    // are pushed below -1 like any other background window.
    bool featureless_negative = true;
};

struct Sample {
    std::vector<float> features;
    int label = 1;
    std::string image;
    Rect box;
};

struct RootDims {
    int w = 1;
    int h = 1;
    bool operator==(const RootDims&) const = default;
};

namespace detail {

inline double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Nearest-rank percentile on the sorted values at index floor(q * (n - 1)).
inline double percentile(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)))];
}

} // namespace detail

/// Root filter size: median aspect of the boxes, area from the 80th percentile
/// box area capped at 80 cells.
inline RootDims init_root_dims(const std::vector<Rect>& boxes, int cell_size)
{
    detail::require(!boxes.empty(), "cannot size a root filter without positive boxes");
    std::vector<double> aspects, areas;
    for (const Rect& b : boxes) {
        detail::require(!b.empty(), "positive box is empty");
        aspects.push_back(b.height() / b.width());
        areas.push_back(b.area());
    }
    const double aspect = detail::median(aspects);
    const double cell_area = static_cast<double>(cell_size) * cell_size;
    const double area = std::min(detail::percentile(areas, 0.8), 80.0 * cell_area);
    const double w = std::sqrt(area / (aspect * cell_area));
    const double h = w * aspect;
    return {std::max(1, static_cast<int>(std::lround(w))), std::max(1, static_cast<int>(std::lround(h)))};
}

/// Features of `box` resampled onto the root grid, with one cell of context on
/// each side so border cells see their true neighbourhood (clamped at the image edge).
inline std::vector<float> extract_window_features(const ImageBuffer& img, const Rect& box, RootDims dims,
                                                  int cell_size)
{
    detail::require(!box.empty(), "degenerate positive box");
    const double sx = box.width() / (dims.w * cell_size);
    const double sy = box.height() / (dims.h * cell_size);
    const Rect padded{box.x0 - cell_size * sx, box.y0 - cell_size * sy, box.x1 + cell_size * sx,
                      box.y1 + cell_size * sy};
    const ImageBuffer canvas = resample_region(img, padded, (dims.w + 2) * cell_size, (dims.h + 2) * cell_size);
    const FeatureLevel level = hog_level(canvas, cell_size);
    return Filter::from_window(level, 1, 1, dims.w, dims.h).weights;
}

inline Sample extract_positive(const ImageBuffer& img, const Rect& box, RootDims dims, int cell_size)
{
    return {extract_window_features(img, box, dims, cell_size), +1, {}, box};
}

// ---------------------------------------------------------------------------
// Linear SVM

struct LinearSvm {
    std::vector<double> w;
    double b = 0.0;
    std::vector<double> epoch_objective; // primal objective after each epoch

    double decision(const std::vector<float>& x) const
    {
        double s = b;
        for (std::size_t i = 0; i < w.size(); ++i)
            s += w[i] * x[i];
        return s;
    }
};

/// (1/2)|w|^2 + C * sum max(0, 1 - y (w.x + b))
inline double svm_objective(const std::vector<Sample>& samples, const std::vector<double>& w, double b, double C)
{
    double reg = 0.0;
    for (double v : w)
        reg += v * v;
    double loss = 0.0;
    for (const Sample& s : samples) {
        double f = b;
        for (std::size_t i = 0; i < w.size(); ++i)
            f += w[i] * s.features[i];
        loss += std::max(0.0, 1.0 - s.label * f);
    }
    return 0.5 * reg + C * loss;
}

struct SvmOptions {
    double C = 0.05;
    int epochs = 200;
    std::uint64_t seed = 1;
    double bias_feature = 10.0; // constant appended to every sample; the bias is regularized as (b / bias_feature)^2 / 2
    double tolerance = 1e-6;    // stop when the projected-gradient spread falls below this
};

/// Dual coordinate descent for the hinge-loss SVM (one closed-form update per
/// sample per epoch, samples visited in a seeded shuffled order). Returns the
/// final iterate with the primal objective recorded after every epoch.
inline LinearSvm train_linear_svm(const std::vector<Sample>& samples, const SvmOptions& opt)
{
    detail::require(!samples.empty(), "no training samples");
    detail::require(opt.C > 0.0 && opt.epochs >= 1 && opt.bias_feature > 0.0, "invalid SVM options");
    const bool has_pos = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.label > 0; });
    const bool has_neg = std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.label < 0; });
    detail::require(has_pos && has_neg, "SVM training needs both positive and negative samples");
    const std::size_t dim = samples.front().features.size();
    for (const Sample& s : samples)
        detail::require(s.features.size() == dim, "sample feature lengths differ");

    const std::size_t n = samples.size();
    const double B = opt.bias_feature;
    std::vector<double> diag(n);
    for (std::size_t i = 0; i < n; ++i) {
        double q = B * B;
        for (float v : samples[i].features)
            q += static_cast<double>(v) * v;
        diag[i] = q;
    }

    std::vector<double> alpha(n, 0.0);
    std::vector<double> w(dim, 0.0);
    double wb = 0.0; // weight of the constant bias feature
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    LinearSvm out;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double pg_max = -std::numeric_limits<double>::infinity();
        double pg_min = std::numeric_limits<double>::infinity();
        for (std::size_t i : order) {
            const Sample& s = samples[i];
            const double y = s.label > 0 ? 1.0 : -1.0;
            double f = wb * B;
            for (std::size_t k = 0; k < dim; ++k)
                f += w[k] * s.features[k];
            const double g = y * f - 1.0;
            double pg = g;
            if (alpha[i] == 0.0)
                pg = std::min(g, 0.0);
            else if (alpha[i] == opt.C)
                pg = std::max(g, 0.0);
            pg_max = std::max(pg_max, pg);
            pg_min = std::min(pg_min, pg);
            if (pg == 0.0)
                continue;
            const double next = std::clamp(alpha[i] - g / diag[i], 0.0, opt.C);
            const double step = (next - alpha[i]) * y;
            alpha[i] = next;
            for (std::size_t k = 0; k < dim; ++k)
                w[k] += step * s.features[k];
            wb += step * B;
        }
        out.epoch_objective.push_back(svm_objective(samples, w, wb * B, opt.C));
        if (pg_max - pg_min < opt.tolerance)
            break;
    }
    out.w = std::move(w);
    out.b = wb * B;
    return out;
}

inline LinearSvm train_linear_svm(const std::vector<Sample>& samples, double C, int epochs, std::uint64_t seed)
{
    SvmOptions opt;
    opt.C = C;
    opt.epochs = epochs;
    opt.seed = seed;
    return train_linear_svm(samples, opt);
}

// ---------------------------------------------------------------------------
// Negatives

struct NegativeImage {
    std::string id;
    FeaturePyramid pyramid;
};

inline DetectorModel make_root_model(const std::string& class_name, RootDims dims, const LinearSvm& svm,
                                     const PyramidParams& p, float threshold)
{
    DetectorModel m;
    m.class_name = class_name;
    m.cell_size = p.cell_size;
    m.lambda = p.lambda;
    m.threshold = threshold;
    Component c;
    c.root = Filter(dims.w, dims.h);
    for (std::size_t i = 0; i < c.root.weights.size(); ++i)
        c.root.weights[i] = static_cast<float>(svm.w[i]);
    c.bias = static_cast<float>(svm.b);
    m.components.push_back(std::move(c));
    return m;
}

inline std::vector<Sample> random_negatives(const std::vector<NegativeImage>& negatives, RootDims dims, int per_image,
                                            std::uint64_t seed)
{
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
    std::vector<Sample> out;
    for (const NegativeImage& neg : negatives) {
        std::vector<int> usable;
        for (int l = 0; l < static_cast<int>(neg.pyramid.levels.size()); ++l)
            if (neg.pyramid.levels[l].cells_w >= dims.w && neg.pyramid.levels[l].cells_h >= dims.h)
                usable.push_back(l);
        if (usable.empty())
            continue;
        for (int k = 0; k < per_image; ++k) {
            const FeatureLevel& lv =
                neg.pyramid.levels[usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)]];
            const int x = std::uniform_int_distribution<int>(0, lv.cells_w - dims.w)(rng);
            const int y = std::uniform_int_distribution<int>(0, lv.cells_h - dims.h)(rng);
            Sample s;
            s.features = Filter::from_window(lv, x, y, dims.w, dims.h).weights;
            s.label = -1;
            s.image = neg.id;
            s.box = root_footprint(x, y, Filter(dims.w, dims.h), lv);
            out.push_back(std::move(s));
        }
    }
    return out;
}

/// Single-view detections scoring >= floor on background images, as negative
/// samples; at most max_cache, highest scores first.
inline std::vector<Sample> mine_hard_negatives(const DetectorModel& model, const std::vector<NegativeImage>& negatives,
                                               double floor, std::size_t max_cache)
{
    struct Hit {
        double score;
        std::size_t image;
        Detection det;
    };
    std::vector<Hit> hits;
    for (std::size_t i = 0; i < negatives.size(); ++i)
        for (const Detection& d : detect(negatives[i].pyramid, model, floor))
            hits.push_back({d.score, i, d});
    std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.score > b.score; });
    if (hits.size() > max_cache)
        hits.resize(max_cache);

    std::vector<Sample> out;
    out.reserve(hits.size());
    for (const Hit& h : hits) {
        const Filter& root = model.components[h.det.component_index].root;
        const FeatureLevel& lv = negatives[h.image].pyramid.levels[h.det.level_index];
        Sample s;
        s.features = Filter::from_window(lv, h.det.cell_x, h.det.cell_y, root.w, root.h).weights;
        s.label = -1;
        s.image = negatives[h.image].id;
        s.box = h.det.box;
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full training loop

struct PositiveImage {
    std::string id;
    ImageBuffer image;
    std::vector<Rect> boxes;
};

struct TrainReport {
    RootDims dims;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::vector<double> round_objective;        // final objective after each (re)training
    std::vector<double> previous_model_objective; // previous model's objective on each round's union set
    double recall_threshold = 0.0;
    double max_negative_score = 0.0;
    double training_recall = 0.0;
};

namespace detail {

inline std::vector<Sample> merge_negatives(std::vector<Sample> cache, const std::vector<Sample>& mined)
{
    using Key = std::tuple<std::string, double, double, double, double>;
    std::map<Key, bool> seen;
    for (const Sample& s : cache)
        seen[{s.image, s.box.x0, s.box.y0, s.box.x1, s.box.y1}] = true;
    for (const Sample& s : mined)
        if (seen.emplace(Key{s.image, s.box.x0, s.box.y0, s.box.x1, s.box.y1}, true).second)
            cache.push_back(s);
    return cache;
}

inline double best_score(const FeaturePyramid& pyramid, const DetectorModel& model)
{
    double best = -std::numeric_limits<double>::infinity();
    for (const Detection& d : detect(pyramid, model, -std::numeric_limits<double>::infinity()))
        best = std::max(best, d.score);
    return best;
}

} // namespace detail

inline DetectorModel train_detector(const std::string& class_name, const std::vector<PositiveImage>& positives,
                                    const std::vector<ImageBuffer>& negative_images,
                                    const std::vector<std::string>& negative_ids, const TrainConfig& cfg,
                                    TrainReport* report = nullptr)
{
    detail::require(!positives.empty(), "training needs at least one positive image");
    detail::require(negative_images.size() == negative_ids.size(), "one id per negative image required");
    detail::require(cfg.mining_rounds >= 0 && cfg.epochs >= 1 && cfg.C > 0.0, "invalid training configuration");
    TrainReport local;
    TrainReport& rep = report ? *report : local;

    std::vector<Rect> boxes;
    for (const PositiveImage& p : positives)
        boxes.insert(boxes.end(), p.boxes.begin(), p.boxes.end());
    detail::require(!boxes.empty(), "training needs at least one positive box");
    const RootDims dims = init_root_dims(boxes, cfg.pyramid.cell_size);
    rep.dims = dims;

    std::vector<Sample> pos;
    for (const PositiveImage& p : positives)
        for (const Rect& b : p.boxes) {
            Sample s = extract_positive(p.image, b, dims, cfg.pyramid.cell_size);
            s.image = p.id;
            pos.push_back(std::move(s));
        }

    std::vector<NegativeImage> negs(negative_images.size());
    detail::parallel_for(negs.size(), cfg.workers, [&](std::size_t i) {
        negs[i].id = negative_ids[i];
        if (pyramid_level_count(negative_images[i].width, negative_images[i].height, cfg.pyramid) >= 1)
            negs[i].pyramid = build_pyramid(negative_images[i], cfg.pyramid);
    });

    std::vector<Sample> neg_cache = random_negatives(negs, dims, cfg.random_negatives_per_image, cfg.seed);
    detail::require(!neg_cache.empty(), "no negative windows available for training");

    Sample featureless{std::vector<float>(pos.front().features.size(), 0.0f), -1, "", {}};
    auto union_set = [&]() {
        std::vector<Sample> all = pos;
        all.insert(all.end(), neg_cache.begin(), neg_cache.end());
        if (cfg.featureless_negative)
            all.insert(all.end(), std::max<std::size_t>(1, negative_images.size()), featureless);
        return all;
    };

    std::vector<Sample> all = union_set();
    LinearSvm svm = train_linear_svm(all, cfg.C, cfg.epochs, cfg.seed);
    rep.round_objective.push_back(svm_objective(all, svm.w, svm.b, cfg.C));
    DetectorModel model = make_root_model(class_name, dims, svm, cfg.pyramid, 0.0f);

    for (int round = 0; round < cfg.mining_rounds; ++round) {
        const auto mined = mine_hard_negatives(model, negs, cfg.neg_floor, cfg.max_cache);
        neg_cache = detail::merge_negatives(std::move(neg_cache), mined);
        if (neg_cache.size() > cfg.max_cache) {
            // Keep the hardest under the current model.
            std::vector<std::pair<double, std::size_t>> ranked;
            for (std::size_t i = 0; i < neg_cache.size(); ++i)
                ranked.push_back({svm.decision(neg_cache[i].features), i});
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            std::vector<Sample> kept;
            for (std::size_t k = 0; k < cfg.max_cache; ++k)
                kept.push_back(std::move(neg_cache[ranked[k].second]));
            neg_cache = std::move(kept);
        }
        all = union_set();
        rep.previous_model_objective.push_back(svm_objective(all, svm.w, svm.b, cfg.C));
        svm = train_linear_svm(all, cfg.C, cfg.epochs, cfg.seed + static_cast<std::uint64_t>(round) + 1);
        rep.round_objective.push_back(svm_objective(all, svm.w, svm.b, cfg.C));
        model = make_root_model(class_name, dims, svm, cfg.pyramid, 0.0f);
    }
    rep.positives = pos.size();
    rep.negatives = neg_cache.size();

    // Threshold: the score at which training recall reaches the target, moved
    // halfway toward the strongest background response when that is lower.
    std::vector<double> pos_scores;
    for (const PositiveImage& p : positives) {
        if (pyramid_level_count(p.image.width, p.image.height, cfg.pyramid) < 1) {
            pos_scores.insert(pos_scores.end(), p.boxes.size(), -std::numeric_limits<double>::infinity());
            continue;
        }
        const FeaturePyramid pyr = build_pyramid(p.image, cfg.pyramid);
        const auto dets = detect(pyr, model, -std::numeric_limits<double>::infinity());
        for (const Rect& b : p.boxes) {
            double best = -std::numeric_limits<double>::infinity();
            for (const Detection& d : dets)
                if (iou(d.box, b) >= 0.5)
                    best = std::max(best, d.score);
            pos_scores.push_back(best);
        }
    }
    std::sort(pos_scores.begin(), pos_scores.end(), std::greater<>());
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(cfg.calibration_recall * static_cast<double>(pos_scores.size()))) - 1;
    double threshold = pos_scores[std::min(k, pos_scores.size() - 1)];
    double max_neg = -std::numeric_limits<double>::infinity();
    for (const NegativeImage& n : negs)
        if (!n.pyramid.levels.empty())
            max_neg = std::max(max_neg, detail::best_score(n.pyramid, model));
    if (cfg.featureless_negative)
        max_neg = std::max(max_neg, static_cast<double>(model.components[0].bias));
    rep.recall_threshold = threshold;
    rep.max_negative_score = max_neg;
    if (std::isfinite(threshold) && std::isfinite(max_neg) && max_neg < threshold)
        threshold = 0.5 * (threshold + max_neg);
    if (!std::isfinite(threshold))
        threshold = cfg.neg_floor;
    float stored = static_cast<float>(threshold);
    if (stored > threshold)
        stored = std::nextafter(stored, -std::numeric_limits<float>::infinity());
    model.threshold = stored;
    const auto recalled = std::count_if(pos_scores.begin(), pos_scores.end(),
                                        [&](double s) { return s >= model.threshold; });
    rep.training_recall = static_cast<double>(recalled) / static_cast<double>(pos_scores.size());
    return model;
}

} // namespace avd
