#pragma once

#include <vector>

#include "wsloc/tensor.hpp"

namespace wsloc {

/// 3x3 convolution, stride 2, zero padding 1. Kernels are (C_out, C_in, 3, 3).
struct ConvLayer {
    Tensor kernels;
    std::vector<double> bias;

    std::size_t out_channels() const { return kernels.shape[0]; }
    std::size_t in_channels() const { return kernels.shape[1]; }
};

inline constexpr int kConvKernel = 3;
inline constexpr int kConvStride = 2;
inline constexpr int kConvPad = 1;

inline std::size_t conv_output_extent(std::size_t in_extent) {
    return (in_extent + 2 * kConvPad - kConvKernel) / kConvStride + 1;
}

/// Cross-correlation with stride 2 and zero padding 1.
inline Tensor conv2d_forward(const Tensor& input, const ConvLayer& layer) {
    if (input.rank() != 3) throw std::invalid_argument("conv input must be (C, H, W)");
    if (layer.kernels.rank() != 4 || layer.kernels.shape[2] != kConvKernel ||
        layer.kernels.shape[3] != kConvKernel)
        throw std::invalid_argument("conv kernels must be (C_out, C_in, 3, 3)");
    if (input.shape[0] != layer.in_channels())
        throw std::invalid_argument("conv input channel mismatch");
    if (layer.bias.size() != layer.out_channels())
        throw std::invalid_argument("conv bias length mismatch");

    const std::size_t in_c = input.shape[0];
    const int in_h = static_cast<int>(input.shape[1]);
    const int in_w = static_cast<int>(input.shape[2]);
    const std::size_t out_c = layer.out_channels();
    const std::size_t out_h = conv_output_extent(input.shape[1]);
    const std::size_t out_w = conv_output_extent(input.shape[2]);

    Tensor out({out_c, out_h, out_w});
    for (std::size_t o = 0; o < out_c; ++o) {
        for (std::size_t i = 0; i < out_h; ++i) {
            for (std::size_t j = 0; j < out_w; ++j) {
                double acc = layer.bias[o];
                for (std::size_t c = 0; c < in_c; ++c) {
                    for (int u = 0; u < kConvKernel; ++u) {
                        const int r = static_cast<int>(i) * kConvStride + u - kConvPad;
                        if (r < 0 || r >= in_h) continue;
                        for (int v = 0; v < kConvKernel; ++v) {
                            const int s = static_cast<int>(j) * kConvStride + v - kConvPad;
                            if (s < 0 || s >= in_w) continue;
                            acc += layer.kernels(o, c, u, v) * input(c, r, s);
                        }
                    }
                }
                out(o, i, j) = acc;
            }
        }
    }
    return out;
}

struct ConvGradients {
    Tensor d_input;
    Tensor d_kernels;
    std::vector<double> d_bias;
};

inline ConvGradients conv2d_backward(const Tensor& input, const ConvLayer& layer,
                                     const Tensor& upstream) {
    const std::size_t out_c = layer.out_channels();
    const std::size_t out_h = conv_output_extent(input.shape[1]);
    const std::size_t out_w = conv_output_extent(input.shape[2]);
    if (upstream.rank() != 3 || upstream.shape[0] != out_c || upstream.shape[1] != out_h ||
        upstream.shape[2] != out_w)
        throw std::invalid_argument("conv upstream shape mismatch");

    const std::size_t in_c = input.shape[0];
    const int in_h = static_cast<int>(input.shape[1]);
    const int in_w = static_cast<int>(input.shape[2]);

    ConvGradients g;
    g.d_input = Tensor(input.shape);
    g.d_kernels = Tensor(layer.kernels.shape);
    g.d_bias.assign(out_c, 0.0);

    for (std::size_t o = 0; o < out_c; ++o) {
        for (std::size_t i = 0; i < out_h; ++i) {
            for (std::size_t j = 0; j < out_w; ++j) {
                const double up = upstream(o, i, j);
                if (up == 0.0) continue;  // every term below is scaled by up
                g.d_bias[o] += up;
                for (std::size_t c = 0; c < in_c; ++c) {
                    for (int u = 0; u < kConvKernel; ++u) {
                        const int r = static_cast<int>(i) * kConvStride + u - kConvPad;
                        if (r < 0 || r >= in_h) continue;
                        for (int v = 0; v < kConvKernel; ++v) {
                            const int s = static_cast<int>(j) * kConvStride + v - kConvPad;
                            if (s < 0 || s >= in_w) continue;
                            g.d_kernels(o, c, u, v) += up * input(c, r, s);
                            g.d_input(c, r, s) += up * layer.kernels(o, c, u, v);
                        }
                    }
                }
            }
        }
    }
    return g;
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = std::max(0.0, x.data[i]);
    return out;
}

/// Subgradient at 0 is 0: gradient passes only where pre-activation > 0.
inline Tensor relu_backward(const Tensor& pre, const Tensor& upstream) {
    Tensor out(pre.shape);
    for (std::size_t i = 0; i < pre.numel(); ++i)
        out.data[i] = pre.data[i] > 0.0 ? upstream.data[i] : 0.0;
    return out;
}

/// Fixed fully convolutional feature extractor: three stride-2 conv layers
/// with channel plan 1 -> 8 -> 16 -> 32, each followed by ReLU. A 1x64x64
/// input yields a 32x8x8 feature map.
struct Backbone {
    std::vector<ConvLayer> layers;
};

inline const std::vector<std::size_t>& backbone_channel_plan() {
    static const std::vector<std::size_t> plan = {1, 8, 16, 32};
    return plan;
}

/// He-style init: kernels ~ N(0, 2 / (C_in * 9)), biases zero.
inline Backbone backbone_init(std::uint64_t seed) {
    Rng rng(seed);
    const auto& plan = backbone_channel_plan();
    Backbone b;
    for (std::size_t l = 0; l + 1 < plan.size(); ++l) {
        ConvLayer layer;
        layer.kernels = Tensor({plan[l + 1], plan[l],
                                static_cast<std::size_t>(kConvKernel),
                                static_cast<std::size_t>(kConvKernel)});
        const double stddev = std::sqrt(2.0 / (static_cast<double>(plan[l]) * 9.0));
        for (double& k : layer.kernels.data) k = rng.normal(0.0, stddev);
        layer.bias.assign(plan[l + 1], 0.0);
        b.layers.push_back(std::move(layer));
    }
    return b;
}

/// Per-layer pre-activations kept for the backward pass.
struct BackboneTrace {
    Tensor input;
    std::vector<Tensor> pre;   // conv outputs before ReLU
    std::vector<Tensor> post;  // after ReLU; back() is the feature map
};

inline Tensor backbone_forward(const Backbone& b, const Tensor& image,
                               BackboneTrace* trace = nullptr) {
    Tensor cur = image;
    if (cur.rank() == 2) cur = Tensor({1, image.shape[0], image.shape[1]}, image.data);
    if (trace) {
        trace->input = cur;
        trace->pre.clear();
        trace->post.clear();
    }
    for (const ConvLayer& layer : b.layers) {
        Tensor pre = conv2d_forward(cur, layer);
        cur = relu(pre);
        if (trace) {
            trace->pre.push_back(std::move(pre));
            trace->post.push_back(cur);
        }
    }
    return cur;
}

struct BackboneGradients {
    std::vector<Tensor> d_kernels;
    std::vector<std::vector<double>> d_bias;
    Tensor d_image;
};

inline BackboneGradients backbone_backward(const Backbone& b, const BackboneTrace& trace,
                                           const Tensor& d_output) {
    BackboneGradients g;
    g.d_kernels.resize(b.layers.size());
    g.d_bias.resize(b.layers.size());
    Tensor delta = d_output;
    for (std::size_t l = b.layers.size(); l-- > 0;) {
        delta = relu_backward(trace.pre[l], delta);
        const Tensor& layer_in = (l == 0) ? trace.input : trace.post[l - 1];
        ConvGradients cg = conv2d_backward(layer_in, b.layers[l], delta);
        g.d_kernels[l] = std::move(cg.d_kernels);
        g.d_bias[l] = std::move(cg.d_bias);
        delta = std::move(cg.d_input);
    }
    g.d_image = std::move(delta);
    return g;
}

}  // namespace wsloc
