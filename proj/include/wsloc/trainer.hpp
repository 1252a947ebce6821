#pragma once

#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "wsloc/backbone.hpp"
#include "wsloc/evaluation.hpp"
#include "wsloc/head.hpp"
#include "wsloc/localization.hpp"
#include "wsloc/pooling.hpp"
#include "wsloc/synthetic.hpp"
#include "wsloc/tensor.hpp"

namespace wsloc {

struct TrainConfig {
    PoolKind pooling = PcamPool{};
    double learning_rate = 0.01;
    double momentum = 0.9;
    int batch_size = 16;
    int epochs = 20;
    std::uint64_t seed = 0;
    double train_fraction = 0.75;  // remainder is the validation split
    int num_classes = 2;
    int attention_hidden = 8;  // used when an AttentionPool arrives without parameters
};

/// Everything a checkpoint must capture: parameters, momentum buffers, the
/// epoch counter and the seed all future shuffles derive from.
struct TrainState {
    Backbone backbone;
    ClassifierHead head;
    PoolKind pooling;

    std::vector<Tensor> vel_kernels;
    std::vector<std::vector<double>> vel_bias;
    ClassifierHead vel_head;
    Tensor vel_attention_v;
    std::vector<double> vel_attention_w;
    double vel_beta = 0.0;

    int epoch = 0;
    std::uint64_t seed = 0;
    int image_size = 64;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    std::vector<std::optional<double>> valid_auc;  // per class
};

struct TrainResult {
    TrainState state;
    std::vector<EpochLog> log;
};

namespace detail {

// Stream ids for seed-derived generators.
inline constexpr std::uint64_t kStreamBackbone = 1;
inline constexpr std::uint64_t kStreamAttention = 2;
inline constexpr std::uint64_t kStreamSplit = 3;
inline constexpr std::uint64_t kStreamEpochBase = 0x1000;

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Per-sample forward pass through backbone, pooling and head.
struct SampleForward {
    BackboneTrace trace;
    std::vector<double> logits;               // per class
    std::vector<double> probs;                // per class
    std::vector<std::vector<double>> pooled;  // per class for Pcam, single entry otherwise
};

/// Gradients for every trainable parameter group.
struct ModelGrads {
    std::vector<Tensor> d_kernels;
    std::vector<std::vector<double>> d_bias;
    std::vector<ClassWeights> d_head;
    Tensor d_attention_v;
    std::vector<double> d_attention_w;
    double d_beta = 0.0;
};

inline ModelGrads make_zero_grads(const TrainState& state) {
    ModelGrads g;
    for (const ConvLayer& l : state.backbone.layers) {
        g.d_kernels.emplace_back(l.kernels.shape);
        g.d_bias.emplace_back(l.bias.size(), 0.0);
    }
    g.d_head.resize(state.head.num_classes());
    for (std::size_t k = 0; k < state.head.num_classes(); ++k)
        g.d_head[k].w.assign(state.head.classes[k].w.size(), 0.0);
    if (const auto* att = std::get_if<AttentionPool>(&state.pooling)) {
        g.d_attention_v = Tensor(att->v.shape);
        g.d_attention_w.assign(att->w.size(), 0.0);
    }
    return g;
}

inline SampleForward model_forward(const TrainState& state, const Tensor& image) {
    SampleForward f;
    const Tensor& features = backbone_forward(state.backbone, image, &f.trace);
    const std::size_t k = state.head.num_classes();
    f.logits.resize(k);
    f.probs.resize(k);

    if (std::holds_alternative<PcamPool>(state.pooling)) {
        f.pooled.resize(k);
        for (std::size_t c = 0; c < k; ++c) {
            const ClassWeights& cls = state.head.classes[c];
            f.pooled[c] = pool_forward(state.pooling, features, &cls).pooled;
            double logit = cls.b;
            for (std::size_t i = 0; i < cls.w.size(); ++i) logit += cls.w[i] * f.pooled[c][i];
            f.logits[c] = logit;
            f.probs[c] = sigmoid(logit);
        }
    } else {
        f.pooled.resize(1);
        f.pooled[0] = pool_forward(state.pooling, features).pooled;
        for (std::size_t c = 0; c < k; ++c) {
            const ClassWeights& cls = state.head.classes[c];
            double logit = cls.b;
            for (std::size_t i = 0; i < cls.w.size(); ++i) logit += cls.w[i] * f.pooled[0][i];
            f.logits[c] = logit;
            f.probs[c] = sigmoid(logit);
        }
    }
    return f;
}

/// Backward for one sample given dLoss/dlogit per class. For PCAM the head
/// parameters receive both the direct classification term and the coupling
/// term through the pooling weight map.
inline void model_backward(const TrainState& state, const SampleForward& f,
                           const std::vector<double>& d_logits, ModelGrads& grads) {
    const Tensor& features = f.trace.post.back();
    const std::size_t channels = features.shape[0];
    const std::size_t k = state.head.num_classes();
    Tensor d_features(features.shape);

    if (std::holds_alternative<PcamPool>(state.pooling)) {
        for (std::size_t c = 0; c < k; ++c) {
            const ClassWeights& cls = state.head.classes[c];
            const double g = d_logits[c];
            std::vector<double> d_pooled(channels);
            for (std::size_t i = 0; i < channels; ++i) {
                d_pooled[i] = g * cls.w[i];
                grads.d_head[c].w[i] += g * f.pooled[c][i];
            }
            grads.d_head[c].b += g;
            PoolGradients pg = pool_backward(state.pooling, features, &cls, d_pooled);
            for (std::size_t i = 0; i < d_features.numel(); ++i)
                d_features.data[i] += pg.d_input.data[i];
            for (std::size_t i = 0; i < channels; ++i) grads.d_head[c].w[i] += pg.d_head_w[i];
            grads.d_head[c].b += pg.d_head_b;
        }
    } else {
        std::vector<double> d_pooled(channels, 0.0);
        for (std::size_t c = 0; c < k; ++c) {
            const ClassWeights& cls = state.head.classes[c];
            const double g = d_logits[c];
            for (std::size_t i = 0; i < channels; ++i) {
                d_pooled[i] += g * cls.w[i];
                grads.d_head[c].w[i] += g * f.pooled[0][i];
            }
            grads.d_head[c].b += g;
        }
        PoolGradients pg = pool_backward(state.pooling, features, nullptr, d_pooled);
        d_features = std::move(pg.d_input);
        if (std::holds_alternative<AttentionPool>(state.pooling)) {
            for (std::size_t i = 0; i < grads.d_attention_v.numel(); ++i)
                grads.d_attention_v.data[i] += pg.d_attention_v.data[i];
            for (std::size_t i = 0; i < grads.d_attention_w.size(); ++i)
                grads.d_attention_w[i] += pg.d_attention_w[i];
        }
        grads.d_beta += pg.d_beta;
    }

    BackboneGradients bg = backbone_backward(state.backbone, f.trace, d_features);
    for (std::size_t l = 0; l < bg.d_kernels.size(); ++l) {
        for (std::size_t i = 0; i < bg.d_kernels[l].numel(); ++i)
            grads.d_kernels[l].data[i] += bg.d_kernels[l].data[i];
        for (std::size_t i = 0; i < bg.d_bias[l].size(); ++i)
            grads.d_bias[l][i] += bg.d_bias[l][i];
    }
}

/// Loss and parameter gradients for one mini-batch. The per-class balanced
/// BCE terms are summed; their 1/n factor already averages over the batch.
inline std::pair<double, ModelGrads> batch_gradients(
    const TrainState& state, const std::vector<SynthSample>& data,
    const std::vector<std::size_t>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    const std::size_t k = state.head.num_classes();

    std::vector<SampleForward> fwd;
    fwd.reserve(batch.size());
    for (std::size_t idx : batch) fwd.push_back(model_forward(state, data[idx].image));

    double loss = 0.0;
    std::vector<std::vector<double>> d_logits(batch.size(), std::vector<double>(k, 0.0));
    for (std::size_t cls = 0; cls < k; ++cls) {
        std::vector<double> probs(batch.size());
        std::vector<int> labels(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            probs[i] = fwd[i].probs[cls];
            labels[i] = data[batch[i]].labels[cls];
        }
        BceResult bce = balanced_bce(probs, labels);
        loss += bce.loss;
        for (std::size_t i = 0; i < batch.size(); ++i)
            d_logits[i][cls] = bce.dprobs[i] * probs[i] * (1.0 - probs[i]);
    }

    ModelGrads grads = make_zero_grads(state);
    for (std::size_t i = 0; i < batch.size(); ++i)
        model_backward(state, fwd[i], d_logits[i], grads);
    return {loss, grads};
}

namespace detail {

inline void sgd_update(std::span<double> param, std::span<const double> grad,
                       std::span<double> vel, double lr, double momentum) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        vel[i] = momentum * vel[i] + grad[i];
        param[i] -= lr * vel[i];
    }
}

}  // namespace detail

inline void apply_update(TrainState& state, const ModelGrads& grads, double lr,
                         double momentum) {
    for (std::size_t l = 0; l < state.backbone.layers.size(); ++l) {
        detail::sgd_update(state.backbone.layers[l].kernels.data, grads.d_kernels[l].data,
                           state.vel_kernels[l].data, lr, momentum);
        detail::sgd_update(state.backbone.layers[l].bias, grads.d_bias[l],
                           state.vel_bias[l], lr, momentum);
    }
    for (std::size_t c = 0; c < state.head.num_classes(); ++c) {
        detail::sgd_update(state.head.classes[c].w, grads.d_head[c].w,
                           state.vel_head.classes[c].w, lr, momentum);
        double b[1] = {state.head.classes[c].b};
        double gb[1] = {grads.d_head[c].b};
        double vb[1] = {state.vel_head.classes[c].b};
        detail::sgd_update(b, gb, vb, lr, momentum);
        state.head.classes[c].b = b[0];
        state.vel_head.classes[c].b = vb[0];
    }
    if (auto* att = std::get_if<AttentionPool>(&state.pooling)) {
        detail::sgd_update(att->v.data, grads.d_attention_v.data, state.vel_attention_v.data,
                           lr, momentum);
        detail::sgd_update(att->w, grads.d_attention_w, state.vel_attention_w, lr, momentum);
    }
    if (auto* lba = std::get_if<LseLbaPool>(&state.pooling)) {
        state.vel_beta = momentum * state.vel_beta + grads.d_beta;
        lba->beta -= lr * state.vel_beta;
    }
}

inline TrainState make_initial_state(const TrainConfig& cfg, std::size_t channels) {
    TrainState state;
    state.seed = cfg.seed;
    state.backbone = backbone_init(detail::mix_seed(cfg.seed, detail::kStreamBackbone));
    state.head = make_zero_head(static_cast<std::size_t>(cfg.num_classes), channels);
    state.pooling = cfg.pooling;
    if (auto* att = std::get_if<AttentionPool>(&state.pooling)) {
        if (att->v.empty()) {
            Rng rng = Rng::derive(cfg.seed, detail::kStreamAttention);
            *att = make_attention_pool(static_cast<std::size_t>(cfg.attention_hidden),
                                       channels, rng);
        }
    }

    for (const ConvLayer& l : state.backbone.layers) {
        state.vel_kernels.emplace_back(l.kernels.shape);
        state.vel_bias.emplace_back(l.bias.size(), 0.0);
    }
    state.vel_head = make_zero_head(static_cast<std::size_t>(cfg.num_classes), channels);
    if (const auto* att = std::get_if<AttentionPool>(&state.pooling)) {
        state.vel_attention_v = Tensor(att->v.shape);
        state.vel_attention_w.assign(att->w.size(), 0.0);
    }
    return state;
}

/// Deterministic index split: shuffle once with a seed-derived stream, take
/// the first train_fraction as training data.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, std::uint64_t seed, double train_fraction) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng::derive(seed, detail::kStreamSplit);
    rng.shuffle(idx);
    const std::size_t n_train =
        std::min(n, static_cast<std::size_t>(std::llround(train_fraction * n)));
    std::vector<std::size_t> train(idx.begin(), idx.begin() + n_train);
    std::vector<std::size_t> valid(idx.begin() + n_train, idx.end());
    return {std::move(train), std::move(valid)};
}

/// Mini-batch gradient descent with momentum on the multi-class balanced BCE.
/// Fully deterministic given the seed; pass `resume` to continue a checkpoint
/// (the run is bit-identical to one that never stopped).
inline TrainResult train(const TrainConfig& cfg, const std::vector<SynthSample>& data,
                         const TrainState* resume = nullptr) {
    if (data.empty()) throw std::invalid_argument("empty dataset");
    if (cfg.learning_rate <= 0.0) throw std::invalid_argument("learning rate must be positive");
    if (cfg.batch_size < 2) throw std::invalid_argument("batch size must be at least 2");
    if (cfg.num_classes < 1) throw std::invalid_argument("need at least one class");
    for (const SynthSample& s : data)
        if (s.labels.size() != static_cast<std::size_t>(cfg.num_classes))
            throw std::invalid_argument("sample label width does not match num_classes");

    TrainResult result;
    if (resume) {
        result.state = *resume;
    } else {
        const std::size_t channels = backbone_channel_plan().back();
        result.state = make_initial_state(cfg, channels);
        result.state.image_size = static_cast<int>(data.front().image.shape[0]);
    }
    TrainState& state = result.state;

    auto [train_idx, valid_idx] = split_indices(data.size(), cfg.seed, cfg.train_fraction);
    if (train_idx.empty()) throw std::invalid_argument("training split is empty");

    for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        Rng rng = Rng::derive(cfg.seed, detail::kStreamEpochBase +
                                            static_cast<std::uint64_t>(epoch));
        rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> batch(order.begin() + start, order.begin() + end);
            auto [loss, grads] = batch_gradients(state, data, batch);
            if (!std::isfinite(loss)) {
                std::ostringstream msg;
                msg << "training diverged: non-finite loss at epoch " << epoch << " batch "
                    << batches;
                throw std::runtime_error(msg.str());
            }
            apply_update(state, grads, cfg.learning_rate, cfg.momentum);
            epoch_loss += loss;
            ++batches;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
        log.valid_auc.assign(static_cast<std::size_t>(cfg.num_classes), std::nullopt);
        if (!valid_idx.empty()) {
            std::vector<std::vector<double>> scores(valid_idx.size());
            for (std::size_t i = 0; i < valid_idx.size(); ++i)
                scores[i] = model_forward(state, data[valid_idx[i]].image).probs;
            for (int cls = 0; cls < cfg.num_classes; ++cls) {
                std::vector<double> s(valid_idx.size());
                std::vector<int> y(valid_idx.size());
                bool pos = false, neg = false;
                for (std::size_t i = 0; i < valid_idx.size(); ++i) {
                    s[i] = scores[i][static_cast<std::size_t>(cls)];
                    y[i] = data[valid_idx[i]].labels[static_cast<std::size_t>(cls)];
                    (y[i] ? pos : neg) = true;
                }
                if (pos && neg)
                    log.valid_auc[static_cast<std::size_t>(cls)] = roc_auc(s, y);
            }
        }
        result.log.push_back(std::move(log));
        state.epoch = epoch + 1;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct InferenceResult {
    std::vector<double> probabilities;  // per class
    std::vector<Tensor> prob_maps;      // per class, at image resolution
    std::vector<Box> boxes;
};

namespace detail {

inline void check_inference_image(const TrainState& state, const Tensor& image) {
    if (image.rank() != 2 ||
        image.shape[0] != static_cast<std::size_t>(state.image_size) ||
        image.shape[1] != static_cast<std::size_t>(state.image_size))
        throw std::invalid_argument("image resolution does not match training resolution");
}

}  // namespace detail

/// Probability-map inference: per class, sigmoid score maps are upsampled to
/// image resolution, thresholded at tau, and the surviving regions become
/// boxes scored by their peak probability.
inline InferenceResult infer(const TrainState& state, const Tensor& image, double tau = 0.9) {
    detail::check_inference_image(state, image);
    SampleForward f = model_forward(state, image);
    const Tensor& features = f.trace.post.back();

    InferenceResult out;
    out.probabilities = f.probs;
    for (std::size_t cls = 0; cls < state.head.num_classes(); ++cls) {
        Tensor scores = cam_score_map(features, state.head.classes[cls]);
        Tensor probs = probability_map(scores);
        Tensor up = upsample_nearest(probs, image.shape[0], image.shape[1]);
        BinaryMask mask = threshold_probability_map(up, tau);
        for (Box& b : boxes_from_mask(mask, &up, static_cast<int>(cls)))
            out.boxes.push_back(b);
        out.prob_maps.push_back(std::move(up));
    }
    return out;
}

/// Baseline inference path: per-image normalization of the raw score map to
/// [0, 255] and a fixed integer threshold.
inline InferenceResult infer_cam_baseline(const TrainState& state, const Tensor& image,
                                          int cam_threshold = 180) {
    detail::check_inference_image(state, image);
    SampleForward f = model_forward(state, image);
    const Tensor& features = f.trace.post.back();

    InferenceResult out;
    out.probabilities = f.probs;
    for (std::size_t cls = 0; cls < state.head.num_classes(); ++cls) {
        Tensor scores = cam_score_map(features, state.head.classes[cls]);
        Tensor up = upsample_nearest(scores, image.shape[0], image.shape[1]);
        CamNormalization norm = normalize_cam_255(up, cam_threshold);
        Tensor norm_map(up.shape);
        for (std::size_t i = 0; i < norm_map.numel(); ++i)
            norm_map.data[i] = static_cast<double>(norm.values[i]) / 255.0;
        for (Box& b : boxes_from_mask(norm.mask, &norm_map, static_cast<int>(cls)))
            out.boxes.push_back(b);
        out.prob_maps.push_back(std::move(norm_map));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient check against central finite differences.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    std::map<std::string, double> group_max_rel_err;
    double max_rel_err = 0.0;
    int instances = 0;
};

namespace detail {

/// Head-level loss: pooled embeddings scored by the head, per-class BCE
/// against fixed labels. The feature map itself is the leaf variable.
inline double pool_head_loss(const PoolKind& kind, const Tensor& x,
                             const ClassifierHead& head, const std::vector<int>& labels) {
    double loss = 0.0;
    const bool pcam = std::holds_alternative<PcamPool>(kind);
    std::vector<double> shared;
    if (!pcam) shared = pool_forward(kind, x).pooled;
    for (std::size_t cls = 0; cls < head.num_classes(); ++cls) {
        const ClassWeights& cw = head.classes[cls];
        const std::vector<double>& pooled =
            pcam ? pool_forward(kind, x, &cw).pooled : shared;
        double logit = cw.b;
        for (std::size_t i = 0; i < cw.w.size(); ++i) logit += cw.w[i] * pooled[i];
        BceResult bce = balanced_bce({sigmoid(logit)}, {labels[cls]});
        loss += bce.loss;
    }
    return loss;
}

struct PoolHeadGrads {
    Tensor d_x;
    std::vector<ClassWeights> d_head;
    Tensor d_attention_v;
    std::vector<double> d_attention_w;
    double d_beta = 0.0;
};

inline PoolHeadGrads pool_head_gradients(const PoolKind& kind, const Tensor& x,
                                         const ClassifierHead& head,
                                         const std::vector<int>& labels) {
    PoolHeadGrads g;
    g.d_x = Tensor(x.shape);
    g.d_head.resize(head.num_classes());
    for (std::size_t c = 0; c < head.num_classes(); ++c)
        g.d_head[c].w.assign(head.classes[c].w.size(), 0.0);
    if (const auto* att = std::get_if<AttentionPool>(&kind)) {
        g.d_attention_v = Tensor(att->v.shape);
        g.d_attention_w.assign(att->w.size(), 0.0);
    }

    const bool pcam = std::holds_alternative<PcamPool>(kind);
    const std::size_t channels = x.shape[0];
    std::vector<double> shared;
    if (!pcam) shared = pool_forward(kind, x).pooled;

    std::vector<double> d_pooled_shared(channels, 0.0);
    for (std::size_t cls = 0; cls < head.num_classes(); ++cls) {
        const ClassWeights& cw = head.classes[cls];
        const std::vector<double> pooled =
            pcam ? pool_forward(kind, x, &cw).pooled : shared;
        double logit = cw.b;
        for (std::size_t i = 0; i < cw.w.size(); ++i) logit += cw.w[i] * pooled[i];
        const double p = sigmoid(logit);
        BceResult bce = balanced_bce({p}, {labels[cls]});
        const double d_logit = bce.dprobs[0] * p * (1.0 - p);

        for (std::size_t i = 0; i < channels; ++i) g.d_head[cls].w[i] += d_logit * pooled[i];
        g.d_head[cls].b += d_logit;

        if (pcam) {
            std::vector<double> d_pooled(channels);
            for (std::size_t i = 0; i < channels; ++i) d_pooled[i] = d_logit * cw.w[i];
            PoolGradients pg = pool_backward(kind, x, &cw, d_pooled);
            for (std::size_t i = 0; i < g.d_x.numel(); ++i)
                g.d_x.data[i] += pg.d_input.data[i];
            for (std::size_t i = 0; i < channels; ++i) g.d_head[cls].w[i] += pg.d_head_w[i];
            g.d_head[cls].b += pg.d_head_b;
        } else {
            for (std::size_t i = 0; i < channels; ++i) d_pooled_shared[i] += d_logit * cw.w[i];
        }
    }
    if (!pcam) {
        PoolGradients pg = pool_backward(kind, x, nullptr, d_pooled_shared);
        g.d_x = std::move(pg.d_input);
        if (std::holds_alternative<AttentionPool>(kind)) {
            g.d_attention_v = std::move(pg.d_attention_v);
            g.d_attention_w = std::move(pg.d_attention_w);
        }
        g.d_beta = pg.d_beta;
    }
    return g;
}

inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

}  // namespace detail

/// Checks every analytic gradient of the pooling + head loss against central
/// finite differences (step 1e-5) on random 4x6x6 feature maps.
inline GradCheckReport gradcheck(const PoolKind& kind, std::uint64_t seed, int instances = 50) {
    constexpr double kStep = 1e-5;
    const std::size_t channels = 4, height = 6, width = 6;
    const std::vector<int> labels = {1, 0};

    GradCheckReport report;
    report.instances = instances;
    auto note = [&report](const std::string& group, double err) {
        auto& slot = report.group_max_rel_err[group];
        slot = std::max(slot, err);
        report.max_rel_err = std::max(report.max_rel_err, err);
    };

    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(inst) + 1);
        Tensor x({channels, height, width});
        // Linear pooling divides by the channel sum, so its instances use
        // mean-shifted maps (rectified-activation regime) that keep the sum
        // well away from the pole where finite differences lose meaning.
        const double mean = std::holds_alternative<LinearPool>(kind) ? 1.5 : 0.0;
        for (double& v : x.data) v = rng.normal(mean, 1.0);
        ClassifierHead head;
        head.classes.resize(labels.size());
        for (auto& cls : head.classes) {
            cls.w.resize(channels);
            for (double& v : cls.w) v = rng.normal(0.0, 0.5);
            cls.b = rng.normal(0.0, 0.5);
        }
        PoolKind inst_kind = kind;
        if (auto* att = std::get_if<AttentionPool>(&inst_kind)) {
            if (att->v.empty()) *att = make_attention_pool(4, channels, rng);
        }

        detail::PoolHeadGrads grads =
            detail::pool_head_gradients(inst_kind, x, head, labels);

        auto fd = [&](double* p) {
            const double saved = *p;
            *p = saved + kStep;
            const double up = detail::pool_head_loss(inst_kind, x, head, labels);
            *p = saved - kStep;
            const double down = detail::pool_head_loss(inst_kind, x, head, labels);
            *p = saved;
            return (up - down) / (2.0 * kStep);
        };

        for (std::size_t i = 0; i < x.numel(); ++i)
            note("input", detail::rel_err(grads.d_x.data[i], fd(&x.data[i])));
        for (std::size_t c = 0; c < head.classes.size(); ++c) {
            for (std::size_t i = 0; i < channels; ++i)
                note("head.weight",
                     detail::rel_err(grads.d_head[c].w[i], fd(&head.classes[c].w[i])));
            note("head.bias", detail::rel_err(grads.d_head[c].b, fd(&head.classes[c].b)));
        }
        if (auto* att = std::get_if<AttentionPool>(&inst_kind)) {
            for (std::size_t i = 0; i < att->v.numel(); ++i)
                note("attention.v",
                     detail::rel_err(grads.d_attention_v.data[i], fd(&att->v.data[i])));
            for (std::size_t i = 0; i < att->w.size(); ++i)
                note("attention.w",
                     detail::rel_err(grads.d_attention_w[i], fd(&att->w[i])));
        }
        if (auto* lba = std::get_if<LseLbaPool>(&inst_kind)) {
            note("lse_lba.beta", detail::rel_err(grads.d_beta, fd(&lba->beta)));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: a manifest line naming every tensor, then one binary tensor
// record per name.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor vector_tensor(const std::vector<double>& v) {
    return Tensor({v.size()}, v);
}

inline std::vector<std::pair<std::string, Tensor>> checkpoint_tensors(const TrainState& s) {
    std::vector<std::pair<std::string, Tensor>> out;
    const double seed_lo = static_cast<double>(s.seed & 0xffffffffULL);
    const double seed_hi = static_cast<double>(s.seed >> 32);
    out.emplace_back("trainer.meta",
                     Tensor({4}, {static_cast<double>(s.epoch), seed_lo, seed_hi,
                                  static_cast<double>(s.image_size)}));

    Tensor pool_meta({4});
    if (std::holds_alternative<AveragePool>(s.pooling)) pool_meta.data[0] = 0;
    if (std::holds_alternative<LinearPool>(s.pooling)) pool_meta.data[0] = 1;
    if (std::holds_alternative<ExponentialPool>(s.pooling)) pool_meta.data[0] = 2;
    if (const auto* lse = std::get_if<LsePool>(&s.pooling)) {
        pool_meta.data[0] = 3;
        pool_meta.data[1] = lse->gamma;
    }
    if (const auto* lba = std::get_if<LseLbaPool>(&s.pooling)) {
        pool_meta.data[0] = 4;
        pool_meta.data[1] = lba->gamma0;
        pool_meta.data[2] = lba->beta;
    }
    if (std::holds_alternative<AttentionPool>(s.pooling)) pool_meta.data[0] = 5;
    if (std::holds_alternative<PcamPool>(s.pooling)) pool_meta.data[0] = 6;
    out.emplace_back("pool.meta", pool_meta);

    if (const auto* att = std::get_if<AttentionPool>(&s.pooling)) {
        out.emplace_back("pool.attention.v", att->v);
        out.emplace_back("pool.attention.w", vector_tensor(att->w));
    }

    const std::size_t k = s.head.num_classes();
    const std::size_t channels = k ? s.head.classes[0].w.size() : 0;
    Tensor head_w({k, channels});
    Tensor head_b({k});
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t i = 0; i < channels; ++i) head_w(c, i) = s.head.classes[c].w[i];
        head_b.data[c] = s.head.classes[c].b;
    }
    out.emplace_back("head.weight", head_w);
    out.emplace_back("head.bias", head_b);

    for (std::size_t l = 0; l < s.backbone.layers.size(); ++l) {
        const std::string base = "backbone.conv" + std::to_string(l);
        out.emplace_back(base + ".kernels", s.backbone.layers[l].kernels);
        out.emplace_back(base + ".bias", vector_tensor(s.backbone.layers[l].bias));
    }

    Tensor vel_head_w({k, channels});
    Tensor vel_head_b({k});
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t i = 0; i < channels; ++i)
            vel_head_w(c, i) = s.vel_head.classes[c].w[i];
        vel_head_b.data[c] = s.vel_head.classes[c].b;
    }
    out.emplace_back("vel.head.weight", vel_head_w);
    out.emplace_back("vel.head.bias", vel_head_b);
    for (std::size_t l = 0; l < s.vel_kernels.size(); ++l) {
        const std::string base = "vel.backbone.conv" + std::to_string(l);
        out.emplace_back(base + ".kernels", s.vel_kernels[l]);
        out.emplace_back(base + ".bias", vector_tensor(s.vel_bias[l]));
    }
    if (std::holds_alternative<AttentionPool>(s.pooling)) {
        out.emplace_back("vel.pool.attention.v", s.vel_attention_v);
        out.emplace_back("vel.pool.attention.w", vector_tensor(s.vel_attention_w));
    }
    if (std::holds_alternative<LseLbaPool>(s.pooling))
        out.emplace_back("vel.pool.beta", Tensor({1}, {s.vel_beta}));
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    auto tensors = detail::checkpoint_tensors(state);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (std::size_t i = 0; i < tensors.size(); ++i)
        os << (i ? " " : "") << tensors[i].first;
    os << "\n";
    for (const auto& [name, tensor] : tensors) write_tensor(os, tensor);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string manifest;
    if (!std::getline(is, manifest)) throw std::runtime_error("missing checkpoint manifest");
    std::map<std::string, Tensor> tensors;
    std::istringstream names(manifest);
    std::string name;
    while (names >> name) tensors[name] = read_tensor(is);

    auto need = [&tensors, &path](const std::string& key) -> const Tensor& {
        auto it = tensors.find(key);
        if (it == tensors.end())
            throw std::runtime_error(path.string() + ": checkpoint missing " + key);
        return it->second;
    };

    TrainState s;
    {
        const Tensor& meta = need("trainer.meta");
        s.epoch = static_cast<int>(meta.data.at(0));
        s.seed = static_cast<std::uint64_t>(meta.data.at(1)) |
                 (static_cast<std::uint64_t>(meta.data.at(2)) << 32);
        s.image_size = static_cast<int>(meta.data.at(3));
    }
    {
        const Tensor& meta = need("pool.meta");
        const int kind = static_cast<int>(meta.data.at(0));
        switch (kind) {
            case 0: s.pooling = AveragePool{}; break;
            case 1: s.pooling = LinearPool{}; break;
            case 2: s.pooling = ExponentialPool{}; break;
            case 3: s.pooling = LsePool{meta.data.at(1)}; break;
            case 4: s.pooling = LseLbaPool{meta.data.at(1), meta.data.at(2)}; break;
            case 5: {
                AttentionPool att;
                att.v = need("pool.attention.v");
                att.w = need("pool.attention.w").data;
                s.pooling = std::move(att);
                break;
            }
            case 6: s.pooling = PcamPool{}; break;
            default: throw std::runtime_error("unknown pooling kind in checkpoint");
        }
    }
    {
        const Tensor& w = need("head.weight");
        const Tensor& b = need("head.bias");
        if (w.rank() != 2 || b.rank() != 1 || w.shape[0] != b.shape[0])
            throw std::runtime_error("inconsistent head tensors in checkpoint");
        s.head.classes.resize(w.shape[0]);
        for (std::size_t c = 0; c < w.shape[0]; ++c) {
            s.head.classes[c].w.assign(w.data.begin() + c * w.shape[1],
                                       w.data.begin() + (c + 1) * w.shape[1]);
            s.head.classes[c].b = b.data[c];
        }
        const Tensor& vw = need("vel.head.weight");
        const Tensor& vb = need("vel.head.bias");
        s.vel_head.classes.resize(w.shape[0]);
        for (std::size_t c = 0; c < w.shape[0]; ++c) {
            s.vel_head.classes[c].w.assign(vw.data.begin() + c * vw.shape[1],
                                           vw.data.begin() + (c + 1) * vw.shape[1]);
            s.vel_head.classes[c].b = vb.data[c];
        }
    }
    for (std::size_t l = 0;; ++l) {
        const std::string base = "backbone.conv" + std::to_string(l);
        if (tensors.find(base + ".kernels") == tensors.end()) break;
        ConvLayer layer;
        layer.kernels = need(base + ".kernels");
        layer.bias = need(base + ".bias").data;
        s.backbone.layers.push_back(std::move(layer));
        s.vel_kernels.push_back(need("vel." + base + ".kernels"));
        s.vel_bias.push_back(need("vel." + base + ".bias").data);
    }
    if (s.backbone.layers.empty())
        throw std::runtime_error(path.string() + ": checkpoint has no backbone layers");
    if (std::holds_alternative<AttentionPool>(s.pooling)) {
        s.vel_attention_v = need("vel.pool.attention.v");
        s.vel_attention_w = need("vel.pool.attention.w").data;
    }
    if (std::holds_alternative<LseLbaPool>(s.pooling))
        s.vel_beta = need("vel.pool.beta").data.at(0);
    return s;
}

/// Bitwise comparison of every parameter and momentum buffer.
inline bool states_bitwise_equal(const TrainState& a, const TrainState& b) {
    auto eq = [](const std::vector<double>& x, const std::vector<double>& y) {
        return x.size() == y.size() &&
               (x.empty() ||
                std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
    };
    if (a.backbone.layers.size() != b.backbone.layers.size()) return false;
    for (std::size_t l = 0; l < a.backbone.layers.size(); ++l) {
        if (!eq(a.backbone.layers[l].kernels.data, b.backbone.layers[l].kernels.data) ||
            !eq(a.backbone.layers[l].bias, b.backbone.layers[l].bias) ||
            !eq(a.vel_kernels[l].data, b.vel_kernels[l].data) ||
            !eq(a.vel_bias[l], b.vel_bias[l]))
            return false;
    }
    if (a.head.num_classes() != b.head.num_classes()) return false;
    for (std::size_t c = 0; c < a.head.num_classes(); ++c) {
        if (!eq(a.head.classes[c].w, b.head.classes[c].w) ||
            !eq(a.vel_head.classes[c].w, b.vel_head.classes[c].w))
            return false;
        if (std::memcmp(&a.head.classes[c].b, &b.head.classes[c].b, sizeof(double)) != 0)
            return false;
        if (std::memcmp(&a.vel_head.classes[c].b, &b.vel_head.classes[c].b,
                        sizeof(double)) != 0)
            return false;
    }
    if (a.epoch != b.epoch || a.seed != b.seed || a.image_size != b.image_size) return false;
    if (a.pooling.index() != b.pooling.index()) return false;
    if (const auto* att_a = std::get_if<AttentionPool>(&a.pooling)) {
        const auto* att_b = std::get_if<AttentionPool>(&b.pooling);
        if (!eq(att_a->v.data, att_b->v.data) || !eq(att_a->w, att_b->w)) return false;
        if (!eq(a.vel_attention_v.data, b.vel_attention_v.data) ||
            !eq(a.vel_attention_w, b.vel_attention_w))
            return false;
    }
    if (const auto* lba_a = std::get_if<LseLbaPool>(&a.pooling)) {
        const auto* lba_b = std::get_if<LseLbaPool>(&b.pooling);
        if (std::memcmp(&lba_a->beta, &lba_b->beta, sizeof(double)) != 0) return false;
        if (std::memcmp(&a.vel_beta, &b.vel_beta, sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace wsloc
