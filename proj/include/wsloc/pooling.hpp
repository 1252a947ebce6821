#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "wsloc/tensor.hpp"

namespace wsloc {

/// Per-class linear classifier parameters (weight vector over channels plus
/// bias). PCAM pooling reuses these same parameters inside its weight map.
struct ClassWeights {
    std::vector<double> w;
    double b = 0.0;
};

struct AveragePool {};
struct LinearPool {};
struct ExponentialPool {};

struct LsePool {
    double gamma = 1.0;
};

/// LSE with a learned lower-bounded sharpness gamma0 + exp(beta); beta is the
/// trainable part.
struct LseLbaPool {
    double gamma0 = 0.0;
    double beta = 0.0;
};

/// Embedding-level attention: score(i,j) = w . tanh(v x_ij), softmaxed over
/// the map. v is (hidden, channels), w has length hidden.
struct AttentionPool {
    Tensor v;
    std::vector<double> w;
};

/// Weights are sigmoid-bounded classifier scores normalized to sum 1; the
/// classifier parameters come from the head at call time.
struct PcamPool {};

using PoolKind = std::variant<AveragePool, LinearPool, ExponentialPool, LsePool,
                              LseLbaPool, AttentionPool, PcamPool>;

/// Attention parameters drawn uniformly from [-1/sqrt(C), 1/sqrt(C)].
inline AttentionPool make_attention_pool(std::size_t hidden, std::size_t channels, Rng& rng) {
    AttentionPool p;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    p.v = Tensor({hidden, channels});
    for (double& x : p.v.data) x = rng.uniform(-bound, bound);
    p.w.resize(hidden);
    for (double& x : p.w) x = rng.uniform(-bound, bound);
    return p;
}

struct PoolResult {
    std::vector<double> pooled;                 // length C
    std::vector<std::uint8_t> linear_fallback;  // per-channel flags, Linear only
};

struct PoolGradients {
    Tensor d_input;                     // (C, H, W)
    std::vector<double> d_head_w;       // Pcam: gradient through the weight map
    double d_head_b = 0.0;              // Pcam
    Tensor d_attention_v;               // Attention
    std::vector<double> d_attention_w;  // Attention
    double d_beta = 0.0;                // LseLba
};

/// Normalized PCAM weight map plus the raw per-position disease
/// probabilities p_ij = sigmoid(w . x_ij + b) used for localization.
struct PcamWeights {
    Tensor weights;  // (H, W), sums to 1
    Tensor probs;    // (H, W), each in (0, 1)
};

namespace detail {

inline void check_feature_map(const Tensor& x) {
    if (x.rank() != 3)
        throw std::invalid_argument("feature map must have shape (C, H, W)");
}

inline void check_head(const Tensor& x, const ClassWeights& head) {
    if (head.w.size() != x.shape[0])
        throw std::invalid_argument("head weight length does not match channel count");
}

// Softmax over map positions of the raw scores s, scaled by `scale`.
inline Tensor scaled_softmax(const Tensor& x, std::size_t channel, double scale) {
    const std::size_t hw = x.shape[1] * x.shape[2];
    const double* v = x.data.data() + channel * hw;
    double m = v[0] * scale;
    for (std::size_t i = 1; i < hw; ++i) m = std::max(m, v[i] * scale);
    Tensor out({x.shape[1], x.shape[2]});
    double sum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
        out.data[i] = std::exp(v[i] * scale - m);
        sum += out.data[i];
    }
    for (double& e : out.data) e /= sum;
    return out;
}

}  // namespace detail

/// PCAM weight map. The normalization sigmoid(s)/sum(sigmoid(s)) is computed
/// as a softmax of log-sigmoid scores so it stays exact when every score
/// saturates far negative.
inline PcamWeights pcam_weight_map(const Tensor& x, const std::vector<double>& w, double b) {
    detail::check_feature_map(x);
    if (w.size() != x.shape[0])
        throw std::invalid_argument("head weight length does not match channel count");
    const std::size_t channels = x.shape[0];
    const std::size_t hw = x.shape[1] * x.shape[2];

    Tensor scores({x.shape[1], x.shape[2]});
    for (std::size_t c = 0; c < channels; ++c) {
        const double* xc = x.data.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) scores.data[i] += w[c] * xc[i];
    }
    for (double& s : scores.data) s += b;

    PcamWeights out;
    out.probs = Tensor({x.shape[1], x.shape[2]});
    Tensor log_p({x.shape[1], x.shape[2]});
    for (std::size_t i = 0; i < hw; ++i) {
        out.probs.data[i] = sigmoid(scores.data[i]);
        log_p.data[i] = log_sigmoid(scores.data[i]);
    }
    out.weights = spatial_softmax(log_p);
    return out;
}

/// Attention weight map: softmax over positions of w . tanh(v x_ij).
inline Tensor attention_weight_map(const Tensor& x, const AttentionPool& params) {
    detail::check_feature_map(x);
    const std::size_t channels = x.shape[0];
    const std::size_t hidden = params.w.size();
    if (params.v.rank() != 2 || params.v.shape[0] != hidden || params.v.shape[1] != channels)
        throw std::invalid_argument("attention parameter shapes inconsistent");
    const std::size_t hw = x.shape[1] * x.shape[2];

    Tensor scores({x.shape[1], x.shape[2]});
    for (std::size_t i = 0; i < hw; ++i) {
        double score = 0.0;
        for (std::size_t l = 0; l < hidden; ++l) {
            double z = 0.0;
            for (std::size_t c = 0; c < channels; ++c)
                z += params.v(l, c) * x.data[c * hw + i];
            score += params.w[l] * std::tanh(z);
        }
        scores.data[i] = score;
    }
    return spatial_softmax(scores);
}

/// Global pooling of a (C, H, W) feature map into a length-C embedding.
/// `head` must be present exactly when `kind` is Pcam.
inline PoolResult pool_forward(const PoolKind& kind, const Tensor& x,
                               const ClassWeights* head = nullptr) {
    detail::check_feature_map(x);
    const std::size_t channels = x.shape[0];
    const std::size_t hw = x.shape[1] * x.shape[2];
    if (std::holds_alternative<PcamPool>(kind) != (head != nullptr))
        throw std::invalid_argument("head required iff pooling kind is pcam");

    PoolResult out;
    out.pooled.assign(channels, 0.0);

    if (std::holds_alternative<AveragePool>(kind)) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xc = x.data.data() + c * hw;
            double sum = 0.0;
            for (std::size_t i = 0; i < hw; ++i) sum += xc[i];
            out.pooled[c] = sum / static_cast<double>(hw);
        }
    } else if (std::holds_alternative<LinearPool>(kind)) {
        out.linear_fallback.assign(channels, 0);
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xc = x.data.data() + c * hw;
            double sum = 0.0, sumsq = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                sum += xc[i];
                sumsq += xc[i] * xc[i];
            }
            if (std::abs(sum) < 1e-12) {
                // Degenerate denominator: average pooling for this channel.
                out.linear_fallback[c] = 1;
                out.pooled[c] = sum / static_cast<double>(hw);
            } else {
                out.pooled[c] = sumsq / sum;
            }
        }
    } else if (std::holds_alternative<ExponentialPool>(kind)) {
        for (std::size_t c = 0; c < channels; ++c) {
            Tensor wmap = detail::scaled_softmax(x, c, 1.0);
            const double* xc = x.data.data() + c * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += wmap.data[i] * xc[i];
            out.pooled[c] = acc;
        }
    } else if (const auto* lse = std::get_if<LsePool>(&kind)) {
        if (lse->gamma <= 0.0) throw std::invalid_argument("invalid scale");
        for (std::size_t c = 0; c < channels; ++c) {
            std::vector<double> vals(x.data.begin() + c * hw, x.data.begin() + (c + 1) * hw);
            out.pooled[c] =
                (stable_logsumexp(vals, lse->gamma) - std::log(static_cast<double>(hw))) /
                lse->gamma;
        }
    } else if (const auto* lba = std::get_if<LseLbaPool>(&kind)) {
        if (lba->gamma0 < 0.0) throw std::invalid_argument("invalid scale");
        const double scale = lba->gamma0 + std::exp(lba->beta);
        for (std::size_t c = 0; c < channels; ++c) {
            std::vector<double> vals(x.data.begin() + c * hw, x.data.begin() + (c + 1) * hw);
            out.pooled[c] =
                (stable_logsumexp(vals, scale) - std::log(static_cast<double>(hw))) / scale;
        }
    } else if (const auto* att = std::get_if<AttentionPool>(&kind)) {
        Tensor wmap = attention_weight_map(x, *att);
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xc = x.data.data() + c * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += wmap.data[i] * xc[i];
            out.pooled[c] = acc;
        }
    } else {
        detail::check_head(x, *head);
        PcamWeights pw = pcam_weight_map(x, head->w, head->b);
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xc = x.data.data() + c * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += pw.weights.data[i] * xc[i];
            out.pooled[c] = acc;
        }
    }
    return out;
}

/// Exact analytic gradients of pool_forward with respect to the feature map
/// and any pooling parameters. `upstream` is dLoss/dPooled, length C.
inline PoolGradients pool_backward(const PoolKind& kind, const Tensor& x,
                                   const ClassWeights* head,
                                   const std::vector<double>& upstream) {
    detail::check_feature_map(x);
    const std::size_t channels = x.shape[0];
    const std::size_t hw = x.shape[1] * x.shape[2];
    if (upstream.size() != channels)
        throw std::invalid_argument("upstream gradient length does not match channels");
    if (std::holds_alternative<PcamPool>(kind) != (head != nullptr))
        throw std::invalid_argument("head required iff pooling kind is pcam");

    PoolGradients g;
    g.d_input = Tensor(x.shape);

    if (std::holds_alternative<AveragePool>(kind)) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double v = upstream[c] / static_cast<double>(hw);
            double* dst = g.d_input.data.data() + c * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = v;
        }
    } else if (std::holds_alternative<LinearPool>(kind)) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xc = x.data.data() + c * hw;
            double* dst = g.d_input.data.data() + c * hw;
            double sum = 0.0, sumsq = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                sum += xc[i];
                sumsq += xc[i] * xc[i];
            }
            if (std::abs(sum) < 1e-12) {
                const double v = upstream[c] / static_cast<double>(hw);
                for (std::size_t i = 0; i < hw; ++i) dst[i] = v;
            } else {
                const double pooled = sumsq / sum;
                for (std::size_t i = 0; i < hw; ++i)
                    dst[i] = upstream[c] * (2.0 * xc[i] - pooled) / sum;
            }
        }
    } else if (std::holds_alternative<ExponentialPool>(kind)) {
        // d pooled / d x_i = a_i (1 + x_i - pooled) for a = softmax(x).
        for (std::size_t c = 0; c < channels; ++c) {
            Tensor a = detail::scaled_softmax(x, c, 1.0);
            const double* xc = x.data.data() + c * hw;
            double* dst = g.d_input.data.data() + c * hw;
            double pooled = 0.0;
            for (std::size_t i = 0; i < hw; ++i) pooled += a.data[i] * xc[i];
            for (std::size_t i = 0; i < hw; ++i)
                dst[i] = upstream[c] * a.data[i] * (1.0 + xc[i] - pooled);
        }
    } else if (const auto* lse = std::get_if<LsePool>(&kind)) {
        if (lse->gamma <= 0.0) throw std::invalid_argument("invalid scale");
        for (std::size_t c = 0; c < channels; ++c) {
            Tensor a = detail::scaled_softmax(x, c, lse->gamma);
            double* dst = g.d_input.data.data() + c * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = upstream[c] * a.data[i];
        }
    } else if (const auto* lba = std::get_if<LseLbaPool>(&kind)) {
        if (lba->gamma0 < 0.0) throw std::invalid_argument("invalid scale");
        const double scale = lba->gamma0 + std::exp(lba->beta);
        for (std::size_t c = 0; c < channels; ++c) {
            Tensor a = detail::scaled_softmax(x, c, scale);
            const double* xc = x.data.data() + c * hw;
            double* dst = g.d_input.data.data() + c * hw;
            std::vector<double> vals(x.data.begin() + c * hw, x.data.begin() + (c + 1) * hw);
            const double pooled =
                (stable_logsumexp(vals, scale) - std::log(static_cast<double>(hw))) / scale;
            double weighted_mean = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                dst[i] = upstream[c] * a.data[i];
                weighted_mean += a.data[i] * xc[i];
            }
            // d pooled / d scale = (softmax-weighted mean - pooled) / scale;
            // beta enters through scale = gamma0 + exp(beta).
            g.d_beta += upstream[c] * std::exp(lba->beta) * (weighted_mean - pooled) / scale;
        }
    } else if (const auto* att = std::get_if<AttentionPool>(&kind)) {
        const std::size_t hidden = att->w.size();
        Tensor wmap = attention_weight_map(x, *att);
        g.d_attention_v = Tensor({hidden, channels});
        g.d_attention_w.assign(hidden, 0.0);

        // u_i = upstream . x_i; pooled contribution g.x = sum_i wmap_i u_i.
        std::vector<double> u(hw, 0.0);
        double gx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            double dot = 0.0;
            for (std::size_t c = 0; c < channels; ++c) dot += upstream[c] * x.data[c * hw + i];
            u[i] = dot;
        }
        for (std::size_t i = 0; i < hw; ++i) gx += wmap.data[i] * u[i];

        std::vector<double> h(hidden);
        for (std::size_t i = 0; i < hw; ++i) {
            // Value path.
            for (std::size_t c = 0; c < channels; ++c)
                g.d_input.data[c * hw + i] += upstream[c] * wmap.data[i];

            // Weight path through the softmax and the tanh features.
            const double d_score = wmap.data[i] * (u[i] - gx);
            for (std::size_t l = 0; l < hidden; ++l) {
                double z = 0.0;
                for (std::size_t c = 0; c < channels; ++c)
                    z += att->v(l, c) * x.data[c * hw + i];
                h[l] = std::tanh(z);
            }
            for (std::size_t l = 0; l < hidden; ++l) {
                g.d_attention_w[l] += d_score * h[l];
                const double dz = d_score * att->w[l] * (1.0 - h[l] * h[l]);
                for (std::size_t c = 0; c < channels; ++c) {
                    g.d_attention_v(l, c) += dz * x.data[c * hw + i];
                    g.d_input.data[c * hw + i] += dz * att->v(l, c);
                }
            }
        }
    } else {
        detail::check_head(x, *head);
        PcamWeights pw = pcam_weight_map(x, head->w, head->b);
        g.d_head_w.assign(channels, 0.0);

        std::vector<double> u(hw, 0.0);
        double gx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            double dot = 0.0;
            for (std::size_t c = 0; c < channels; ++c) dot += upstream[c] * x.data[c * hw + i];
            u[i] = dot;
            gx += pw.weights.data[i] * dot;
        }

        for (std::size_t i = 0; i < hw; ++i) {
            // d loss / d score_i through the normalized weights. Using
            // weights rather than 1/sum(sigmoid) keeps this finite when all
            // scores saturate negative.
            const double d_score =
                (u[i] - gx) * pw.weights.data[i] * (1.0 - pw.probs.data[i]);
            g.d_head_b += d_score;
            for (std::size_t c = 0; c < channels; ++c) {
                const double xv = x.data[c * hw + i];
                g.d_input.data[c * hw + i] +=
                    upstream[c] * pw.weights.data[i] + d_score * head->w[c];
                g.d_head_w[c] += d_score * xv;
            }
        }
    }
    return g;
}

/// Saliency-map score: pools a (H, W) map into a scalar with the
/// lower-bounded-adaptation LSE scale gamma0 + exp(beta).
inline double lse_lba_score(const Tensor& s, double gamma0, double beta) {
    if (s.empty()) throw std::invalid_argument("empty reduction");
    if (gamma0 < 0.0) throw std::invalid_argument("invalid scale");
    const double scale = gamma0 + std::exp(beta);
    return (stable_logsumexp(s.data, scale) - std::log(static_cast<double>(s.numel()))) / scale;
}

struct LseLbaGradients {
    Tensor d_map;
    double d_beta = 0.0;
};

inline LseLbaGradients lse_lba_backward(const Tensor& s, double gamma0, double beta,
                                        double upstream = 1.0) {
    if (s.empty()) throw std::invalid_argument("empty reduction");
    if (gamma0 < 0.0) throw std::invalid_argument("invalid scale");
    const double scale = gamma0 + std::exp(beta);
    const double score =
        (stable_logsumexp(s.data, scale) - std::log(static_cast<double>(s.numel()))) / scale;

    LseLbaGradients g;
    g.d_map = Tensor(s.shape);
    double m = s.data[0] * scale;
    for (double v : s.data) m = std::max(m, v * scale);
    double sum = 0.0;
    for (std::size_t i = 0; i < s.numel(); ++i) {
        g.d_map.data[i] = std::exp(s.data[i] * scale - m);
        sum += g.d_map.data[i];
    }
    double weighted_mean = 0.0;
    for (std::size_t i = 0; i < s.numel(); ++i) {
        g.d_map.data[i] = g.d_map.data[i] / sum;
        weighted_mean += g.d_map.data[i] * s.data[i];
    }
    for (double& v : g.d_map.data) v *= upstream;
    g.d_beta = upstream * std::exp(beta) * (weighted_mean - score) / scale;
    return g;
}

}  // namespace wsloc
