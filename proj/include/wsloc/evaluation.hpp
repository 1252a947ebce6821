#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "wsloc/localization.hpp"

namespace wsloc {

/// Intersection over the predicted box's area, on the integer pixel grid.
/// Asymmetric by construction: iobb(a, b) != iobb(b, a) in general.
inline double iobb(const Box& pred, const Box& gt) {
    if (pred.w < 1 || pred.h < 1 || gt.w < 1 || gt.h < 1)
        throw std::invalid_argument("boxes must have positive extents");
    const int ix = std::max(0, std::min(pred.x + pred.w, gt.x + gt.w) - std::max(pred.x, gt.x));
    const int iy = std::max(0, std::min(pred.y + pred.h, gt.y + gt.h) - std::max(pred.y, gt.y));
    return static_cast<double>(static_cast<long long>(ix) * iy) /
           static_cast<double>(pred.area());
}

/// Mann-Whitney AUC from rank statistics, ties counted half.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("scores and labels length mismatch");
    std::size_t n_pos = 0;
    for (int y : labels) n_pos += (y != 0);
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("AUC undefined");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += mid_rank;
        i = j;
    }
    return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Ground truth: per-image class labels plus per-image, per-class boxes.
struct AnnotationSet {
    std::map<std::string, std::vector<int>> labels;  // image_id -> K binary labels
    std::map<std::string, std::vector<Box>> boxes;   // image_id -> gt boxes (class in Box)

    void add_box(const std::string& image_id, const Box& b) {
        if (labels.find(image_id) == labels.end())
            throw std::invalid_argument("gt box references image absent from label table: " +
                                        image_id);
        boxes[image_id].push_back(b);
    }

    std::size_t num_classes() const {
        return labels.empty() ? 0 : labels.begin()->second.size();
    }
};

struct ClassMetrics {
    std::optional<double> auc;
    std::optional<double> loc_accuracy;
    std::optional<double> avg_false_positives;
    std::size_t images = 0;            // images with labels
    std::size_t annotated_images = 0;  // images with >= 1 gt box of this class
    std::size_t gt_boxes = 0;
};

struct EvalReport {
    double iobb_threshold = 0.5;
    std::vector<ClassMetrics> classes;
};

/// Localization accuracy and average false positives for one class.
/// An annotated image counts as correct when at least one predicted box of
/// the class overlaps some gt box of the class with IoBB strictly above the
/// threshold; predicted boxes below-or-at the threshold against every gt box
/// count as false positives, averaged over the annotated images.
inline std::pair<std::optional<double>, std::optional<double>> localization_metrics_class(
    const std::vector<BoxRecord>& preds, const AnnotationSet& gt, int class_id,
    double iobb_threshold) {
    if (!(iobb_threshold > 0.0 && iobb_threshold < 1.0))
        throw std::invalid_argument("IoBB threshold must lie in (0, 1)");

    std::map<std::string, std::vector<Box>> preds_by_image;
    for (const auto& r : preds)
        if (r.box.class_id == class_id) preds_by_image[r.image_id].push_back(r.box);

    std::size_t annotated = 0, correct = 0, false_positives = 0;
    for (const auto& [image_id, gt_boxes] : gt.boxes) {
        std::vector<const Box*> cls_gt;
        for (const Box& b : gt_boxes)
            if (b.class_id == class_id) cls_gt.push_back(&b);
        if (cls_gt.empty()) continue;
        ++annotated;

        bool hit = false;
        auto it = preds_by_image.find(image_id);
        if (it != preds_by_image.end()) {
            for (const Box& p : it->second) {
                bool matched = false;
                for (const Box* g : cls_gt)
                    if (iobb(p, *g) > iobb_threshold) {
                        matched = true;
                        break;
                    }
                if (matched)
                    hit = true;
                else
                    ++false_positives;
            }
        }
        if (hit) ++correct;
    }
    if (annotated == 0) return {std::nullopt, std::nullopt};
    return {static_cast<double>(correct) / static_cast<double>(annotated),
            static_cast<double>(false_positives) / static_cast<double>(annotated)};
}

/// Full per-class report: AUC over all labelled images plus the localization
/// metrics over the annotated ones. Classes with no positives or no
/// negatives get no AUC; classes with no annotated images get no
/// localization numbers.
inline EvalReport evaluate(const std::vector<BoxRecord>& preds, const AnnotationSet& gt,
                           const std::map<std::string, std::vector<double>>& scores,
                           double iobb_threshold = 0.5) {
    const std::size_t k = gt.num_classes();
    EvalReport report;
    report.iobb_threshold = iobb_threshold;
    report.classes.resize(k);

    for (std::size_t cls = 0; cls < k; ++cls) {
        ClassMetrics& m = report.classes[cls];
        m.images = gt.labels.size();

        std::vector<double> cls_scores;
        std::vector<int> cls_labels;
        for (const auto& [image_id, labels] : gt.labels) {
            if (labels.size() != k)
                throw std::invalid_argument("label vector length mismatch for " + image_id);
            auto it = scores.find(image_id);
            if (it == scores.end()) continue;
            if (it->second.size() != k)
                throw std::invalid_argument("score vector length mismatch for " + image_id);
            cls_scores.push_back(it->second[cls]);
            cls_labels.push_back(labels[cls]);
        }
        const bool has_pos = std::any_of(cls_labels.begin(), cls_labels.end(),
                                         [](int y) { return y != 0; });
        const bool has_neg = std::any_of(cls_labels.begin(), cls_labels.end(),
                                         [](int y) { return y == 0; });
        if (!cls_scores.empty() && has_pos && has_neg)
            m.auc = roc_auc(cls_scores, cls_labels);

        auto [acc, fp] =
            localization_metrics_class(preds, gt, static_cast<int>(cls), iobb_threshold);
        m.loc_accuracy = acc;
        m.avg_false_positives = fp;

        for (const auto& [image_id, boxes] : gt.boxes)
            for (const Box& b : boxes)
                if (b.class_id == static_cast<int>(cls)) ++m.gt_boxes;
        for (const auto& [image_id, boxes] : gt.boxes)
            if (std::any_of(boxes.begin(), boxes.end(), [cls](const Box& b) {
                    return b.class_id == static_cast<int>(cls);
                }))
                ++m.annotated_images;
    }
    return report;
}

// ---------------------------------------------------------------------------
// CSV interfaces. Labels: `image_id,label_0,...,label_{K-1}`. Scores use the
// same layout with real-valued entries.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::vector<int>> read_labels_csv(
    const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    std::getline(is, header);
    auto head = detail::split_csv_line(header);
    if (head.size() < 2 || head[0] != "image_id")
        throw std::runtime_error(path.string() + ": unexpected labels CSV header");

    std::map<std::string, std::vector<int>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != head.size())
            throw std::runtime_error(path.string() + ": malformed labels CSV row");
        std::vector<int> labels;
        for (std::size_t i = 1; i < f.size(); ++i) labels.push_back(std::stoi(f[i]));
        out[f[0]] = std::move(labels);
    }
    return out;
}

inline std::map<std::string, std::vector<double>> read_scores_csv(
    const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    std::getline(is, header);
    auto head = detail::split_csv_line(header);
    if (head.size() < 2 || head[0] != "image_id")
        throw std::runtime_error(path.string() + ": unexpected scores CSV header");

    std::map<std::string, std::vector<double>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != head.size())
            throw std::runtime_error(path.string() + ": malformed scores CSV row");
        std::vector<double> scores;
        for (std::size_t i = 1; i < f.size(); ++i) scores.push_back(std::stod(f[i]));
        out[f[0]] = std::move(scores);
    }
    return out;
}

inline void write_labels_csv(const std::filesystem::path& path,
                             const std::map<std::string, std::vector<int>>& labels,
                             std::size_t num_classes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "image_id";
    for (std::size_t k = 0; k < num_classes; ++k) os << ",label_" << k;
    os << "\n";
    for (const auto& [id, row] : labels) {
        os << id;
        for (int y : row) os << "," << y;
        os << "\n";
    }
}

inline void write_scores_csv(const std::filesystem::path& path,
                             const std::map<std::string, std::vector<double>>& scores,
                             std::size_t num_classes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "image_id";
    for (std::size_t k = 0; k < num_classes; ++k) os << ",score_" << k;
    os << "\n";
    for (const auto& [id, row] : scores) {
        os << id;
        for (double s : row) os << "," << detail::format_double(s);
        os << "\n";
    }
}

inline void print_report_csv(std::ostream& os, const EvalReport& report) {
    os << "class_id,auc,loc_accuracy,avg_false_positives,images,annotated_images,gt_boxes\n";
    auto cell = [](const std::optional<double>& v) {
        return v ? detail::format_double(*v) : std::string();
    };
    for (std::size_t k = 0; k < report.classes.size(); ++k) {
        const ClassMetrics& m = report.classes[k];
        os << k << "," << cell(m.auc) << "," << cell(m.loc_accuracy) << ","
           << cell(m.avg_false_positives) << "," << m.images << "," << m.annotated_images
           << "," << m.gt_boxes << "\n";
    }
}

inline void print_report_table(std::ostream& os, const EvalReport& report) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-8s %10s %10s %10s %12s\n", "class", "auc", "loc_acc",
                  "avg_fp", "annotated");
    os << buf;
    for (std::size_t k = 0; k < report.classes.size(); ++k) {
        const ClassMetrics& m = report.classes[k];
        auto cell = [](const std::optional<double>& v) {
            char c[32];
            if (v)
                std::snprintf(c, sizeof(c), "%10.4f", *v);
            else
                std::snprintf(c, sizeof(c), "%10s", "-");
            return std::string(c);
        };
        std::snprintf(buf, sizeof(buf), "%-8zu %s %s %s %12zu\n", k, cell(m.auc).c_str(),
                      cell(m.loc_accuracy).c_str(), cell(m.avg_false_positives).c_str(),
                      m.annotated_images);
        os << buf;
    }
}

}  // namespace wsloc
