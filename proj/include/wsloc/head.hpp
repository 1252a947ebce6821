#pragma once

#include <vector>

#include "wsloc/pooling.hpp"
#include "wsloc/tensor.hpp"

namespace wsloc {

/// One binary classifier per class, all sharing the backbone feature map.
struct ClassifierHead {
    std::vector<ClassWeights> classes;

    std::size_t num_classes() const { return classes.size(); }
};

inline ClassifierHead make_zero_head(std::size_t num_classes, std::size_t channels) {
    ClassifierHead head;
    head.classes.resize(num_classes);
    for (auto& c : head.classes) c.w.assign(channels, 0.0);
    return head;
}

/// Class activation map: s_ij = w . x_ij + b over every map position.
inline Tensor cam_score_map(const Tensor& x, const ClassWeights& cls) {
    detail::check_feature_map(x);
    detail::check_head(x, cls);
    const std::size_t channels = x.shape[0];
    const std::size_t hw = x.shape[1] * x.shape[2];
    Tensor scores({x.shape[1], x.shape[2]});
    for (std::size_t c = 0; c < channels; ++c) {
        const double* xc = x.data.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) scores.data[i] += cls.w[c] * xc[i];
    }
    for (double& s : scores.data) s += cls.b;
    return scores;
}

inline Tensor probability_map(const Tensor& score_map) {
    Tensor p(score_map.shape);
    for (std::size_t i = 0; i < score_map.numel(); ++i) p.data[i] = sigmoid(score_map.data[i]);
    return p;
}

struct ClassOutput {
    double probability = 0.0;     // image-level
    double logit = 0.0;
    Tensor prob_map;              // (H, W)
    Tensor weight_map;            // (H, W), sums to 1
    std::vector<double> pooled;   // length C
};

/// PCAM forward for every class: the class weights build the spatial weight
/// map, pool the feature map, and then score the pooled embedding. The same
/// (w, b) appear in both places.
inline std::vector<ClassOutput> head_forward(const Tensor& x, const ClassifierHead& head) {
    detail::check_feature_map(x);
    const std::size_t channels = x.shape[0];
    const std::size_t hw = x.shape[1] * x.shape[2];
    std::vector<ClassOutput> out(head.classes.size());
    for (std::size_t k = 0; k < head.classes.size(); ++k) {
        const ClassWeights& cls = head.classes[k];
        detail::check_head(x, cls);
        PcamWeights pw = pcam_weight_map(x, cls.w, cls.b);
        ClassOutput& o = out[k];
        o.weight_map = std::move(pw.weights);
        o.prob_map = std::move(pw.probs);
        o.pooled.assign(channels, 0.0);
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xc = x.data.data() + c * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += o.weight_map.data[i] * xc[i];
            o.pooled[c] = acc;
        }
        double logit = cls.b;
        for (std::size_t c = 0; c < channels; ++c) logit += cls.w[c] * o.pooled[c];
        o.logit = logit;
        o.probability = sigmoid(logit);
    }
    return out;
}

struct BceResult {
    double loss = 0.0;
    std::vector<double> dprobs;  // dLoss/dprobs, already including 1/n
};

/// Binary cross entropy with within-batch positive/negative balancing: each
/// side carries half the loss mass (weight n / (2 n_pos) resp. n / (2 n_neg)).
/// A single-sided batch falls back to unit weights. Probabilities are clamped
/// to [1e-7, 1 - 1e-7] before the log.
inline BceResult balanced_bce(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.empty()) throw std::invalid_argument("empty batch");
    if (probs.size() != labels.size())
        throw std::invalid_argument("probs and labels length mismatch");
    const double lo = 1e-7, hi = 1.0 - 1e-7;
    const std::size_t n = probs.size();

    std::size_t n_pos = 0;
    for (int y : labels) n_pos += (y != 0);
    const std::size_t n_neg = n - n_pos;
    const bool degenerate = (n_pos == 0 || n_neg == 0);
    const double w_pos = degenerate ? 1.0 : static_cast<double>(n) / (2.0 * n_pos);
    const double w_neg = degenerate ? 1.0 : static_cast<double>(n) / (2.0 * n_neg);

    BceResult r;
    r.dprobs.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const bool clamped = probs[i] < lo || probs[i] > hi;
        const double p = std::clamp(probs[i], lo, hi);
        const double wt = labels[i] ? w_pos : w_neg;
        r.loss -= wt * (labels[i] ? std::log(p) : std::log(1.0 - p));
        // The clamp makes the loss locally constant outside [lo, hi].
        if (!clamped)
            r.dprobs[i] = -wt * (labels[i] ? 1.0 / p : -1.0 / (1.0 - p)) / static_cast<double>(n);
    }
    r.loss /= static_cast<double>(n);
    return r;
}

}  // namespace wsloc
