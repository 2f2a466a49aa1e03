#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "chemmap/hsidata.hpp"
#include "chemmap/tensor.hpp"

namespace chemmap {

// ---------------------------------------------------------------------------
// Differentiable operators. Activations are C x H x W tensors; every backward
// returns exact gradients of a scalar with respect to the forward inputs given
// the gradient with respect to the forward output.
// ---------------------------------------------------------------------------

/// Valid 3x3 cross-correlation. kernels: K x C x 3 x 3, bias: K.
Tensor conv2d_valid(const Tensor& input, const Tensor& kernels, const Tensor& bias);

struct Conv2dGrads {
    Tensor input;
    Tensor kernels;
    Tensor bias;
};
/// Skips the input gradient when `need_input` is false.
Conv2dGrads conv2d_valid_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_out,
                                  bool need_input = true);

/// Single-filter 3D stem: kernel depth x 2 x 2, stride (1, 2, 2), scalar bias.
/// input D x H x W -> (D - depth + 1) x H/2 x W/2.
Tensor conv3d_stem(const Tensor& input, const Tensor& kernel, const Tensor& bias);

struct StemGrads {
    Tensor kernel;
    Tensor bias;
};
StemGrads conv3d_stem_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out);

struct PoolResult {
    Tensor output;
    std::vector<std::size_t> argmax;  // flat input index per output element
};
/// 2x2 max-pool, stride 2. Ties route to the first element in row-major order.
PoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const std::vector<int>& input_shape, const std::vector<std::size_t>& argmax,
                         const Tensor& grad_out);

/// x2 bilinear upsampling, half-pixel centres, edge clamped: output pixel o
/// samples input coordinate (o + 0.5) / 2 - 0.5.
Tensor upsample_bilinear2(const Tensor& input);
Tensor upsample_bilinear2_backward(const std::vector<int>& input_shape, const Tensor& grad_out);

/// Centre-crops `encoder` to the decoder's spatial size and stacks
/// [encoder, decoder] along channels.
Tensor center_crop_concat(const Tensor& encoder, const Tensor& decoder);
struct ConcatGrads {
    Tensor encoder;
    Tensor decoder;
};
ConcatGrads center_crop_concat_backward(const std::vector<int>& encoder_shape, int decoder_channels,
                                        const Tensor& grad_out);

void relu_inplace(Tensor& t);
/// Multiplies grad by the derivative of ReLU evaluated through its output.
void relu_backward_inplace(const Tensor& relu_output, Tensor& grad);

/// 1x1 linear projection to one channel. weights: 1 x C x 1 x 1, bias: 1.
Tensor conv1x1(const Tensor& input, const Tensor& weights, const Tensor& bias);
Conv2dGrads conv1x1_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out);

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct NetConfig {
    int levels = 2;
    int base_width = 4;
    int stem_depth = 7;
    int bin_factor = 2;
    int bands = 8;  // spectral bands entering the stem, after binning
    Geometry geometry;

    int stem_channels() const { return bands - stem_depth + 1; }
    int width_at(int level) const { return base_width << level; }
    void validate() const;
};

/// Builds a config around compute_geometry.
NetConfig make_net_config(int levels, int base_width, int out_h, int out_w, int bands, int stem_depth = 7,
                          int bin_factor = 2);

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool is_bias = false;
};

/// Ordered parameter set. Gradients use the same type and ordering.
struct NetParams {
    std::vector<NamedTensor> entries;

    Tensor& operator[](const std::string& name);
    const Tensor& operator[](const std::string& name) const;
    std::size_t parameter_count() const;
    /// Zero-valued copy with identical names and shapes.
    NetParams zeros_like() const;
    bool same_layout(const NetParams& other) const;
};

/// Zero-initialised parameters with the layout the network expects.
NetParams make_params(const NetConfig& config);
/// Kernels ~ Normal(0, sqrt(2 / fan_in)); biases zero.
NetParams init_kaiming(const NetConfig& config, std::uint64_t seed);

/// Everything the backward pass needs, plus the spatial trace of the forward.
struct ForwardTrace {
    std::vector<LayerSize> sizes;
    Tensor input;
    Tensor stem_out;
    std::vector<Tensor> enc_conv1, enc_conv2, enc_pool;
    std::vector<std::vector<std::size_t>> pool_argmax;
    Tensor bottleneck_conv1, bottleneck_conv2;
    std::vector<Tensor> dec_concat, dec_conv1, dec_conv2;  // indexed by level
};

class UNet {
public:
    explicit UNet(NetConfig config);

    const NetConfig& config() const { return config_; }

    /// input: bands x padded_h x padded_w -> 1 x out_h x out_w.
    Tensor forward(const NetParams& params, const Tensor& input, ForwardTrace* trace = nullptr) const;
    /// Gradients of a scalar with respect to every parameter given
    /// d(scalar)/d(output).
    NetParams backward(const NetParams& params, const ForwardTrace& trace, const Tensor& grad_out) const;

private:
    NetConfig config_;
};

/// Band-major cube values as a bands x H x W tensor.
Tensor cube_to_tensor(const HsiCube& cube);

/// Objective used by grad_check: returns the loss and, when `grad` is
/// non-null, writes the analytic gradient into it.
using Objective = std::function<double(const NetParams& params, NetParams* grad)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

/// Central finite differences over every parameter. Relative error is
/// |a - n| / max(|a|, |n|, abs_floor).
GradCheckResult grad_check(const Objective& objective, const NetParams& params, double epsilon = 1e-6,
                           double abs_floor = 1e-8);

void write_params(const NetParams& params, const std::filesystem::path& path);
NetParams read_params(const std::filesystem::path& path);

}  // namespace chemmap
