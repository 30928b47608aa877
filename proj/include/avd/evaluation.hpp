#pragma once

#include <avd/dataset.hpp>
#include <avd/error.hpp>
#include <avd/geometry.hpp>

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace avd {

struct GroundTruthBox {
    Rect box;
    bool difficult = false;
};

// Boxes of one class per image id. Images without instances map to an empty list.
using GroundTruthSet = std::map<std::string, std::vector<GroundTruthBox>>;

struct ScoredDetection {
    std::string image_id;
    double score = 0.0;
    Rect box;
};

enum class MatchLabel { TruePositive, FalsePositive, Ignored };

struct MatchResult {
    std::vector<std::size_t> order; // detection indices, descending score
    std::vector<MatchLabel> labels; // labels[k] belongs to order[k]
    std::size_t n_pos = 0;          // non-difficult ground-truth boxes
};

enum class APMode { ElevenPoint, AllPoints };

struct PRPoint {
    double recall = 0.0;
    double precision = 0.0;
};

struct APResult {
    double ap = 0.0;
    std::vector<PRPoint> curve;
    std::size_t n_pos = 0;
    APMode mode = APMode::AllPoints;
};

inline GroundTruthSet ground_truth_for_class(const std::vector<Annotation>& annotations, const std::string& cls)
{
    GroundTruthSet gt;
    for (const Annotation& a : annotations) {
        auto& boxes = gt[a.image];
        if (a.class_name == cls && a.has_box)
            boxes.push_back({a.box, a.difficult});
    }
    return gt;
}

inline std::size_t count_positives(const GroundTruthSet& gt)
{
    std::size_t n = 0;
    for (const auto& [id, boxes] : gt)
        n += static_cast<std::size_t>(std::count_if(boxes.begin(), boxes.end(),
                                                    [](const GroundTruthBox& b) { return !b.difficult; }));
    return n;
}

/// Greedy matching in descending score order. A detection is a true positive
/// when its best-overlapping still-unmatched non-difficult box reaches iou_min;
/// otherwise it is ignored if it reaches iou_min on a difficult box, else false.
inline MatchResult match_detections(const std::vector<ScoredDetection>& dets, const GroundTruthSet& gt,
                                    double iou_min = 0.5)
{
    MatchResult r;
    r.n_pos = count_positives(gt);
    r.order.resize(dets.size());
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    std::map<std::string, std::vector<bool>> matched;
    for (const auto& [id, boxes] : gt)
        matched[id].assign(boxes.size(), false);

    r.labels.reserve(dets.size());
    for (std::size_t idx : r.order) {
        const ScoredDetection& d = dets[idx];
        const auto it = gt.find(d.image_id);
        if (it == gt.end())
            throw Error("detection refers to unknown image id '" + d.image_id + "'");
        const auto& boxes = it->second;
        auto& used = matched[d.image_id];

        double best = -1.0;
        std::size_t best_k = boxes.size();
        bool hits_difficult = false;
        for (std::size_t k = 0; k < boxes.size(); ++k) {
            const double o = iou(d.box, boxes[k].box);
            if (boxes[k].difficult) {
                hits_difficult = hits_difficult || o >= iou_min;
                continue;
            }
            if (!used[k] && o > best) {
                best = o;
                best_k = k;
            }
        }
        if (best_k < boxes.size() && best >= iou_min) {
            used[best_k] = true;
            r.labels.push_back(MatchLabel::TruePositive);
        } else if (hits_difficult) {
            r.labels.push_back(MatchLabel::Ignored);
        } else {
            r.labels.push_back(MatchLabel::FalsePositive);
        }
    }
    return r;
}

inline APResult average_precision(const std::vector<MatchLabel>& labels, std::size_t n_pos, APMode mode)
{
    detail::require(n_pos >= 1, "average precision needs at least one positive");
    APResult r;
    r.n_pos = n_pos;
    r.mode = mode;

    std::size_t tp = 0, fp = 0;
    for (MatchLabel l : labels) {
        if (l == MatchLabel::Ignored)
            continue;
        (l == MatchLabel::TruePositive ? tp : fp) += 1;
        r.curve.push_back({static_cast<double>(tp) / static_cast<double>(n_pos),
                           static_cast<double>(tp) / static_cast<double>(tp + fp)});
    }

    if (mode == APMode::ElevenPoint) {
        double sum = 0.0;
        for (int k = 0; k <= 10; ++k) {
            const double level = k / 10.0;
            double p = 0.0;
            for (const PRPoint& pt : r.curve)
                if (pt.recall >= level)
                    p = std::max(p, pt.precision);
            sum += p;
        }
        r.ap = sum / 11.0;
        return r;
    }

    // Area under the monotonized precision envelope.
    std::vector<double> rec{0.0}, prec{0.0};
    for (const PRPoint& pt : r.curve) {
        rec.push_back(pt.recall);
        prec.push_back(pt.precision);
    }
    rec.push_back(1.0);
    prec.push_back(0.0);
    for (std::size_t i = prec.size() - 1; i-- > 0;)
        prec[i] = std::max(prec[i], prec[i + 1]);
    double ap = 0.0;
    for (std::size_t i = 1; i < rec.size(); ++i)
        if (rec[i] != rec[i - 1])
            ap += (rec[i] - rec[i - 1]) * prec[i];
    r.ap = ap;
    return r;
}

struct ClassEvaluation {
    std::size_t n_pos = 0;
    std::size_t detections = 0;
    double ap_eleven_point = 0.0;
    double ap_all_points = 0.0;
};

inline ClassEvaluation evaluate_class(const std::vector<ScoredDetection>& dets, const GroundTruthSet& gt,
                                      double iou_min = 0.5)
{
    const MatchResult m = match_detections(dets, gt, iou_min);
    ClassEvaluation e;
    e.n_pos = m.n_pos;
    e.detections = dets.size();
    e.ap_eleven_point = average_precision(m.labels, m.n_pos, APMode::ElevenPoint).ap;
    e.ap_all_points = average_precision(m.labels, m.n_pos, APMode::AllPoints).ap;
    return e;
}

/// Parses `image_id<TAB>score<TAB>x0,y0,x1,y1` lines.
inline std::vector<ScoredDetection> parse_detections(std::istream& in)
{
    std::vector<ScoredDetection> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty() || line[0] == '#')
            continue;
        const auto f = detail::split(line, '\t');
        if (f.size() != 3)
            throw Error("detections line " + std::to_string(line_no) + ": expected 3 TAB-separated fields");
        ScoredDetection d;
        d.image_id = f[0];
        try {
            d.score = std::stod(f[1]);
        } catch (const std::logic_error&) {
            throw Error("detections line " + std::to_string(line_no) + ": bad score");
        }
        d.box = detail::parse_box(f[2]);
        out.push_back(std::move(d));
    }
    return out;
}

inline void write_detection_line(std::ostream& out, const ScoredDetection& d)
{
    std::ostringstream score;
    score.precision(17);
    score << d.score;
    out << d.image_id << '\t' << score.str() << '\t' << detail::format_box(d.box) << '\n';
}

} // namespace avd
