#include "chemmap/diffnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "binary_io.hpp"

namespace chemmap {

namespace {

void require_rank(const Tensor& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape));
}

struct Tap {
    int i0 = 0, i1 = 0;
    double w0 = 1.0, w1 = 0.0;
};

std::vector<Tap> upsample_taps(int n_in) {
    std::vector<Tap> taps(static_cast<std::size_t>(2 * n_in));
    for (int o = 0; o < 2 * n_in; ++o) {
        double src = (o + 0.5) / 2.0 - 0.5;
        if (src < 0.0) src = 0.0;
        Tap t;
        t.i0 = std::min(static_cast<int>(src), n_in - 1);
        t.i1 = std::min(t.i0 + 1, n_in - 1);
        t.w1 = src - t.i0;
        t.w0 = 1.0 - t.w1;
        taps[o] = t;
    }
    return taps;
}

std::string conv_name(const std::string& block, int idx) { return block + ".conv" + std::to_string(idx); }

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// ---- conv2d ----

Tensor conv2d_valid(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
    require_rank(input, 3, "conv2d_valid input");
    require_rank(kernels, 4, "conv2d_valid kernels");
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int K = kernels.dim(0);
    if (kernels.dim(1) != C || kernels.dim(2) != 3 || kernels.dim(3) != 3)
        throw ShapeError("conv2d_valid: kernel shape " + shape_string(kernels.shape) + " incompatible with input " +
                         shape_string(input.shape));
    if (bias.size() != static_cast<std::size_t>(K)) throw ShapeError("conv2d_valid: bias length mismatch");
    if (H < 3 || W < 3) throw ShapeError("conv2d_valid: input " + shape_string(input.shape) + " smaller than 3x3");

    const int Ho = H - 2, Wo = W - 2;
    Tensor out({K, Ho, Wo});
    const double* in = input.data();
    for (int k = 0; k < K; ++k) {
        double* o = out.data() + static_cast<std::size_t>(k) * Ho * Wo;
        const double* wk = kernels.data() + static_cast<std::size_t>(k) * C * 9;
        for (int y = 0; y < Ho; ++y) {
            double* orow = o + static_cast<std::size_t>(y) * Wo;
            std::fill(orow, orow + Wo, bias.values[k]);
            for (int c = 0; c < C; ++c) {
                const double* w = wk + c * 9;
                for (int dy = 0; dy < 3; ++dy) {
                    const double* s = in + (static_cast<std::size_t>(c) * H + y + dy) * W;
                    const double w0 = w[dy * 3], w1 = w[dy * 3 + 1], w2 = w[dy * 3 + 2];
                    for (int x = 0; x < Wo; ++x) orow[x] += w0 * s[x] + w1 * s[x + 1] + w2 * s[x + 2];
                }
            }
        }
    }
    return out;
}

Conv2dGrads conv2d_valid_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_out,
                                  bool need_input) {
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int K = kernels.dim(0);
    const int Ho = H - 2, Wo = W - 2;
    if (grad_out.shape != std::vector<int>{K, Ho, Wo})
        throw ShapeError("conv2d_valid_backward: gradient shape " + shape_string(grad_out.shape) + " mismatch");

    Conv2dGrads g;
    g.kernels = Tensor(kernels.shape);
    g.bias = Tensor({K});
    if (need_input) g.input = Tensor(input.shape);
    const double* in = input.data();
    for (int k = 0; k < K; ++k) {
        const double* go = grad_out.data() + static_cast<std::size_t>(k) * Ho * Wo;
        const double* wk = kernels.data() + static_cast<std::size_t>(k) * C * 9;
        double* gk = g.kernels.data() + static_cast<std::size_t>(k) * C * 9;
        double bsum = 0.0;
        for (int y = 0; y < Ho; ++y) {
            const double* grow = go + static_cast<std::size_t>(y) * Wo;
            for (int x = 0; x < Wo; ++x) bsum += grow[x];
            for (int c = 0; c < C; ++c) {
                for (int dy = 0; dy < 3; ++dy) {
                    const std::size_t row = (static_cast<std::size_t>(c) * H + y + dy) * W;
                    const double* s = in + row;
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                    for (int x = 0; x < Wo; ++x) {
                        a0 += grow[x] * s[x];
                        a1 += grow[x] * s[x + 1];
                        a2 += grow[x] * s[x + 2];
                    }
                    gk[c * 9 + dy * 3] += a0;
                    gk[c * 9 + dy * 3 + 1] += a1;
                    gk[c * 9 + dy * 3 + 2] += a2;
                    if (need_input) {
                        double* gi = g.input.data() + row;
                        const double w0 = wk[c * 9 + dy * 3], w1 = wk[c * 9 + dy * 3 + 1], w2 = wk[c * 9 + dy * 3 + 2];
                        for (int x = 0; x < Wo; ++x) gi[x] += w0 * grow[x];
                        for (int x = 0; x < Wo; ++x) gi[x + 1] += w1 * grow[x];
                        for (int x = 0; x < Wo; ++x) gi[x + 2] += w2 * grow[x];
                    }
                }
            }
        }
        g.bias.values[k] = bsum;
    }
    return g;
}

// ---- 3D stem ----

Tensor conv3d_stem(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    require_rank(input, 3, "conv3d_stem input");
    require_rank(kernel, 3, "conv3d_stem kernel");
    const int D = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int depth = kernel.dim(0);
    if (kernel.dim(1) != 2 || kernel.dim(2) != 2) throw ShapeError("conv3d_stem: kernel must be depth x 2 x 2");
    if (depth > D) throw ShapeError("conv3d_stem: kernel depth exceeds input depth");
    if (H % 2 != 0 || W % 2 != 0) throw ShapeError("conv3d_stem: spatial dimensions must be even");
    if (bias.size() != 1) throw ShapeError("conv3d_stem: bias must be scalar");

    const int Do = D - depth + 1, Ho = H / 2, Wo = W / 2;
    Tensor out({Do, Ho, Wo}, bias.values[0]);
    for (int j = 0; j < Do; ++j) {
        for (int y = 0; y < Ho; ++y) {
            double* orow = out.data() + (static_cast<std::size_t>(j) * Ho + y) * Wo;
            for (int d = 0; d < depth; ++d) {
                const double* k = kernel.data() + d * 4;
                const double* r0 = input.data() + (static_cast<std::size_t>(j + d) * H + 2 * y) * W;
                const double* r1 = r0 + W;
                for (int x = 0; x < Wo; ++x)
                    orow[x] += k[0] * r0[2 * x] + k[1] * r0[2 * x + 1] + k[2] * r1[2 * x] + k[3] * r1[2 * x + 1];
            }
        }
    }
    return out;
}

StemGrads conv3d_stem_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out) {
    const int H = input.dim(1), W = input.dim(2);
    const int depth = kernel.dim(0);
    const int Do = input.dim(0) - depth + 1, Ho = H / 2, Wo = W / 2;
    if (grad_out.shape != std::vector<int>{Do, Ho, Wo}) throw ShapeError("conv3d_stem_backward: gradient shape mismatch");
    StemGrads g{Tensor(kernel.shape), Tensor({1})};
    double bsum = 0.0;
    for (int j = 0; j < Do; ++j) {
        for (int y = 0; y < Ho; ++y) {
            const double* grow = grad_out.data() + (static_cast<std::size_t>(j) * Ho + y) * Wo;
            for (int x = 0; x < Wo; ++x) bsum += grow[x];
            for (int d = 0; d < depth; ++d) {
                const double* r0 = input.data() + (static_cast<std::size_t>(j + d) * H + 2 * y) * W;
                const double* r1 = r0 + W;
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                for (int x = 0; x < Wo; ++x) {
                    a0 += grow[x] * r0[2 * x];
                    a1 += grow[x] * r0[2 * x + 1];
                    a2 += grow[x] * r1[2 * x];
                    a3 += grow[x] * r1[2 * x + 1];
                }
                double* gk = g.kernel.data() + d * 4;
                gk[0] += a0;
                gk[1] += a1;
                gk[2] += a2;
                gk[3] += a3;
            }
        }
    }
    g.bias.values[0] = bsum;
    return g;
}

// ---- max-pool ----

PoolResult maxpool2(const Tensor& input) {
    require_rank(input, 3, "maxpool2 input");
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("maxpool2: odd spatial dimensions " + shape_string(input.shape));
    const int Ho = H / 2, Wo = W / 2;
    PoolResult r{Tensor({C, Ho, Wo}), std::vector<std::size_t>(static_cast<std::size_t>(C) * Ho * Wo)};
    std::size_t o = 0;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y)
            for (int x = 0; x < Wo; ++x, ++o) {
                const std::size_t base = (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * x;
                const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
                std::size_t best = cand[0];
                for (int i = 1; i < 4; ++i)
                    if (input.values[cand[i]] > input.values[best]) best = cand[i];
                r.output.values[o] = input.values[best];
                r.argmax[o] = best;
            }
    return r;
}

Tensor maxpool2_backward(const std::vector<int>& input_shape, const std::vector<std::size_t>& argmax,
                         const Tensor& grad_out) {
    if (argmax.size() != grad_out.size()) throw ShapeError("maxpool2_backward: argmax/gradient size mismatch");
    Tensor g(input_shape);
    for (std::size_t o = 0; o < argmax.size(); ++o) g.values[argmax[o]] += grad_out.values[o];
    return g;
}

// ---- bilinear x2 ----

Tensor upsample_bilinear2(const Tensor& input) {
    require_rank(input, 3, "upsample_bilinear2 input");
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const auto ty = upsample_taps(H);
    const auto tx = upsample_taps(W);
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < 2 * H; ++oy) {
            const Tap& a = ty[oy];
            const double* r0 = input.data() + (static_cast<std::size_t>(c) * H + a.i0) * W;
            const double* r1 = input.data() + (static_cast<std::size_t>(c) * H + a.i1) * W;
            double* orow = out.data() + (static_cast<std::size_t>(c) * 2 * H + oy) * 2 * W;
            for (int ox = 0; ox < 2 * W; ++ox) {
                const Tap& b = tx[ox];
                orow[ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
            }
        }
    return out;
}

Tensor upsample_bilinear2_backward(const std::vector<int>& input_shape, const Tensor& grad_out) {
    const int C = input_shape.at(0), H = input_shape.at(1), W = input_shape.at(2);
    if (grad_out.shape != std::vector<int>{C, 2 * H, 2 * W})
        throw ShapeError("upsample_bilinear2_backward: gradient shape mismatch");
    const auto ty = upsample_taps(H);
    const auto tx = upsample_taps(W);
    Tensor g(input_shape);
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < 2 * H; ++oy) {
            const Tap& a = ty[oy];
            double* r0 = g.data() + (static_cast<std::size_t>(c) * H + a.i0) * W;
            double* r1 = g.data() + (static_cast<std::size_t>(c) * H + a.i1) * W;
            const double* grow = grad_out.data() + (static_cast<std::size_t>(c) * 2 * H + oy) * 2 * W;
            for (int ox = 0; ox < 2 * W; ++ox) {
                const Tap& b = tx[ox];
                const double v = grow[ox];
                r0[b.i0] += a.w0 * b.w0 * v;
                r0[b.i1] += a.w0 * b.w1 * v;
                r1[b.i0] += a.w1 * b.w0 * v;
                r1[b.i1] += a.w1 * b.w1 * v;
            }
        }
    return g;
}

// ---- crop + concat ----

Tensor center_crop_concat(const Tensor& encoder, const Tensor& decoder) {
    require_rank(encoder, 3, "center_crop_concat encoder");
    require_rank(decoder, 3, "center_crop_concat decoder");
    const int C1 = encoder.dim(0), He = encoder.dim(1), We = encoder.dim(2);
    const int C2 = decoder.dim(0), Hd = decoder.dim(1), Wd = decoder.dim(2);
    if (He < Hd || We < Wd) throw ShapeError("center_crop_concat: encoder smaller than decoder");
    if ((He - Hd) % 2 != 0 || (We - Wd) % 2 != 0)
        throw ShapeError("center_crop_concat: odd size difference between " + shape_string(encoder.shape) + " and " +
                         shape_string(decoder.shape));
    const int oy = (He - Hd) / 2, ox = (We - Wd) / 2;
    Tensor out({C1 + C2, Hd, Wd});
    for (int c = 0; c < C1; ++c)
        for (int y = 0; y < Hd; ++y) {
            const double* src = encoder.data() + (static_cast<std::size_t>(c) * He + y + oy) * We + ox;
            std::copy(src, src + Wd, out.data() + (static_cast<std::size_t>(c) * Hd + y) * Wd);
        }
    std::copy(decoder.values.begin(), decoder.values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(C1) * Hd * Wd));
    return out;
}

ConcatGrads center_crop_concat_backward(const std::vector<int>& encoder_shape, int decoder_channels,
                                        const Tensor& grad_out) {
    const int C1 = encoder_shape.at(0), He = encoder_shape.at(1), We = encoder_shape.at(2);
    const int Hd = grad_out.dim(1), Wd = grad_out.dim(2);
    if (grad_out.dim(0) != C1 + decoder_channels) throw ShapeError("center_crop_concat_backward: channel mismatch");
    const int oy = (He - Hd) / 2, ox = (We - Wd) / 2;
    ConcatGrads g{Tensor(encoder_shape), Tensor({decoder_channels, Hd, Wd})};
    for (int c = 0; c < C1; ++c)
        for (int y = 0; y < Hd; ++y) {
            const double* src = grad_out.data() + (static_cast<std::size_t>(c) * Hd + y) * Wd;
            std::copy(src, src + Wd, g.encoder.data() + (static_cast<std::size_t>(c) * He + y + oy) * We + ox);
        }
    std::copy(grad_out.values.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(C1) * Hd * Wd),
              grad_out.values.end(), g.decoder.values.begin());
    return g;
}

// ---- ReLU / 1x1 ----

void relu_inplace(Tensor& t) {
    for (double& v : t.values) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(const Tensor& relu_output, Tensor& grad) {
    if (!relu_output.same_shape(grad)) throw ShapeError("relu_backward: shape mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(relu_output.values[i] > 0.0)) grad.values[i] = 0.0;
}

Tensor conv1x1(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    require_rank(input, 3, "conv1x1 input");
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (weights.size() != static_cast<std::size_t>(C) || bias.size() != 1)
        throw ShapeError("conv1x1: weight/bias shape mismatch");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor out({1, H, W}, bias.values[0]);
    for (int c = 0; c < C; ++c) {
        const double w = weights.values[c];
        const double* s = input.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) out.values[i] += w * s[i];
    }
    return out;
}

Conv2dGrads conv1x1_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out) {
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (grad_out.shape != std::vector<int>{1, H, W}) throw ShapeError("conv1x1_backward: gradient shape mismatch");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Conv2dGrads g{Tensor(input.shape), Tensor(weights.shape), Tensor({1})};
    double bsum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) bsum += grad_out.values[i];
    g.bias.values[0] = bsum;
    for (int c = 0; c < C; ++c) {
        const double w = weights.values[c];
        const double* s = input.data() + c * plane;
        double* gi = g.input.data() + c * plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            acc += grad_out.values[i] * s[i];
            gi[i] = w * grad_out.values[i];
        }
        g.kernels.values[c] = acc;
    }
    return g;
}

// ---- parameters ----

void NetConfig::validate() const {
    require(levels >= 0, "NetConfig: levels must be non-negative");
    require(base_width >= 1, "NetConfig: base width must be positive");
    require(bin_factor >= 1, "NetConfig: bin factor must be positive");
    require(stem_depth >= 1 && bands >= stem_depth, "NetConfig: stem depth must not exceed the band count");
    if (geometry.levels != levels || geometry.stem_depth != stem_depth)
        throw ShapeError("NetConfig: geometry disagrees with levels or stem depth");
}

NetConfig make_net_config(int levels, int base_width, int out_h, int out_w, int bands, int stem_depth,
                          int bin_factor) {
    NetConfig c;
    c.levels = levels;
    c.base_width = base_width;
    c.stem_depth = stem_depth;
    c.bin_factor = bin_factor;
    c.bands = bands;
    c.geometry = compute_geometry(levels, out_h, out_w, stem_depth);
    c.validate();
    return c;
}

Tensor& NetParams::operator[](const std::string& name) {
    for (auto& e : entries)
        if (e.name == name) return e.tensor;
    throw Error("NetParams: no tensor named " + name);
}

const Tensor& NetParams::operator[](const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return e.tensor;
    throw Error("NetParams: no tensor named " + name);
}

std::size_t NetParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.tensor.size();
    return n;
}

NetParams NetParams::zeros_like() const {
    NetParams z;
    z.entries.reserve(entries.size());
    for (const auto& e : entries) z.entries.push_back({e.name, Tensor(e.tensor.shape), e.is_bias});
    return z;
}

bool NetParams::same_layout(const NetParams& other) const {
    if (entries.size() != other.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name != other.entries[i].name || entries[i].tensor.shape != other.entries[i].tensor.shape ||
            entries[i].is_bias != other.entries[i].is_bias)
            return false;
    return true;
}

NetParams make_params(const NetConfig& config) {
    config.validate();
    NetParams p;
    const auto add_conv = [&p](const std::string& name, int out_ch, int in_ch) {
        p.entries.push_back({name + ".weight", Tensor({out_ch, in_ch, 3, 3}), false});
        p.entries.push_back({name + ".bias", Tensor({out_ch}), true});
    };
    p.entries.push_back({"stem.weight", Tensor({config.stem_depth, 2, 2}), false});
    p.entries.push_back({"stem.bias", Tensor({1}), true});
    int in_ch = config.stem_channels();
    for (int s = 0; s < config.levels; ++s) {
        const std::string block = "enc" + std::to_string(s);
        add_conv(conv_name(block, 1), config.width_at(s), in_ch);
        add_conv(conv_name(block, 2), config.width_at(s), config.width_at(s));
        in_ch = config.width_at(s);
    }
    const int bottom = config.width_at(config.levels);
    add_conv("bottleneck.conv1", bottom, in_ch);
    add_conv("bottleneck.conv2", bottom, bottom);
    int below = bottom;
    for (int s = config.levels - 1; s >= 0; --s) {
        const std::string block = "dec" + std::to_string(s);
        add_conv(conv_name(block, 1), config.width_at(s), config.width_at(s) + below);
        add_conv(conv_name(block, 2), config.width_at(s), config.width_at(s));
        below = config.width_at(s);
    }
    p.entries.push_back({"head.weight", Tensor({1, below, 1, 1}), false});
    p.entries.push_back({"head.bias", Tensor({1}), true});
    return p;
}

NetParams init_kaiming(const NetConfig& config, std::uint64_t seed) {
    NetParams p = make_params(config);
    std::mt19937_64 rng(seed);
    for (auto& e : p.entries) {
        if (e.is_bias) continue;
        const auto& s = e.tensor.shape;
        // Fan-in is everything but the output-channel axis; the stem has one filter.
        const std::size_t fan_in = e.name == "stem.weight" ? e.tensor.size() : e.tensor.size() / s[0];
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (double& v : e.tensor.values) v = normal(rng);
    }
    return p;
}

// ---- network ----

UNet::UNet(NetConfig config) : config_(std::move(config)) { config_.validate(); }

Tensor UNet::forward(const NetParams& params, const Tensor& input, ForwardTrace* trace) const {
    const Geometry& g = config_.geometry;
    const std::vector<int> expected{config_.bands, g.padded_h, g.padded_w};
    if (input.shape != expected)
        throw ShapeError("UNet::forward: input " + shape_string(input.shape) + " but geometry needs " +
                         shape_string(expected));
    const int L = config_.levels;
    ForwardTrace local;
    ForwardTrace& t = trace ? *trace : local;
    t = ForwardTrace{};
    t.enc_conv1.resize(L);
    t.enc_conv2.resize(L);
    t.enc_pool.resize(L);
    t.pool_argmax.resize(L);
    t.dec_concat.resize(L);
    t.dec_conv1.resize(L);
    t.dec_conv2.resize(L);
    const auto record = [&t](const std::string& name, const Tensor& x) {
        t.sizes.push_back({name, x.dim(1), x.dim(2)});
    };
    const auto conv_relu = [&params](const std::string& name, const Tensor& x) {
        Tensor y = conv2d_valid(x, params[name + ".weight"], params[name + ".bias"]);
        relu_inplace(y);
        return y;
    };

    if (trace) t.input = input;
    t.stem_out = conv3d_stem(input, params["stem.weight"], params["stem.bias"]);
    record("stem", t.stem_out);

    const Tensor* x = &t.stem_out;
    for (int s = 0; s < L; ++s) {
        const std::string block = "enc" + std::to_string(s);
        t.enc_conv1[s] = conv_relu(conv_name(block, 1), *x);
        record(conv_name(block, 1), t.enc_conv1[s]);
        t.enc_conv2[s] = conv_relu(conv_name(block, 2), t.enc_conv1[s]);
        record(conv_name(block, 2), t.enc_conv2[s]);
        PoolResult pr = maxpool2(t.enc_conv2[s]);
        t.enc_pool[s] = std::move(pr.output);
        t.pool_argmax[s] = std::move(pr.argmax);
        record(block + ".pool", t.enc_pool[s]);
        x = &t.enc_pool[s];
    }
    t.bottleneck_conv1 = conv_relu("bottleneck.conv1", *x);
    record("bottleneck.conv1", t.bottleneck_conv1);
    t.bottleneck_conv2 = conv_relu("bottleneck.conv2", t.bottleneck_conv1);
    record("bottleneck.conv2", t.bottleneck_conv2);
    x = &t.bottleneck_conv2;
    for (int s = L - 1; s >= 0; --s) {
        const std::string block = "dec" + std::to_string(s);
        const Tensor up = upsample_bilinear2(*x);
        record(block + ".up", up);
        t.dec_concat[s] = center_crop_concat(t.enc_conv2[s], up);
        record(block + ".concat", t.dec_concat[s]);
        t.dec_conv1[s] = conv_relu(conv_name(block, 1), t.dec_concat[s]);
        record(conv_name(block, 1), t.dec_conv1[s]);
        t.dec_conv2[s] = conv_relu(conv_name(block, 2), t.dec_conv1[s]);
        record(conv_name(block, 2), t.dec_conv2[s]);
        x = &t.dec_conv2[s];
    }
    Tensor out = conv1x1(*x, params["head.weight"], params["head.bias"]);
    record("head", out);
    if (out.dim(1) != g.out_h || out.dim(2) != g.out_w)
        throw ShapeError("UNet::forward: output " + shape_string(out.shape) + " disagrees with geometry");
    return out;
}

NetParams UNet::backward(const NetParams& params, const ForwardTrace& t, const Tensor& grad_out) const {
    const int L = config_.levels;
    if (t.input.values.empty()) throw Error("UNet::backward: trace was recorded without the input");
    NetParams grads = params.zeros_like();
    const auto store = [&grads](const std::string& name, Conv2dGrads& cg) {
        grads[name + ".weight"] = std::move(cg.kernels);
        grads[name + ".bias"] = std::move(cg.bias);
    };
    // Backward through relu(conv(x)); returns d/dx.
    const auto conv_relu_back = [&](const std::string& name, const Tensor& x, const Tensor& y, Tensor g) {
        relu_backward_inplace(y, g);
        Conv2dGrads cg = conv2d_valid_backward(x, params[name + ".weight"], g);
        Tensor gx = std::move(cg.input);
        store(name, cg);
        return gx;
    };

    const Tensor& last = L > 0 ? t.dec_conv2[0] : t.bottleneck_conv2;
    Conv2dGrads head = conv1x1_backward(last, params["head.weight"], grad_out);
    Tensor g = std::move(head.input);
    store("head", head);

    std::vector<Tensor> skip_grad(L);
    for (int s = 0; s < L; ++s) {
        const std::string block = "dec" + std::to_string(s);
        g = conv_relu_back(conv_name(block, 2), t.dec_conv1[s], t.dec_conv2[s], std::move(g));
        g = conv_relu_back(conv_name(block, 1), t.dec_concat[s], t.dec_conv1[s], std::move(g));
        const Tensor& below = s + 1 < L ? t.dec_conv2[s + 1] : t.bottleneck_conv2;
        ConcatGrads cg = center_crop_concat_backward(t.enc_conv2[s].shape, below.dim(0), g);
        skip_grad[s] = std::move(cg.encoder);
        g = upsample_bilinear2_backward(below.shape, cg.decoder);
    }

    const Tensor& bottleneck_in = L > 0 ? t.enc_pool[L - 1] : t.stem_out;
    g = conv_relu_back("bottleneck.conv2", t.bottleneck_conv1, t.bottleneck_conv2, std::move(g));
    g = conv_relu_back("bottleneck.conv1", bottleneck_in, t.bottleneck_conv1, std::move(g));

    for (int s = L - 1; s >= 0; --s) {
        const std::string block = "enc" + std::to_string(s);
        Tensor gp = maxpool2_backward(t.enc_conv2[s].shape, t.pool_argmax[s], g);
        for (std::size_t i = 0; i < gp.size(); ++i) gp.values[i] += skip_grad[s].values[i];
        g = conv_relu_back(conv_name(block, 2), t.enc_conv1[s], t.enc_conv2[s], std::move(gp));
        const Tensor& in = s > 0 ? t.enc_pool[s - 1] : t.stem_out;
        g = conv_relu_back(conv_name(block, 1), in, t.enc_conv1[s], std::move(g));
    }

    StemGrads sg = conv3d_stem_backward(t.input, params["stem.weight"], g);
    grads["stem.weight"] = std::move(sg.kernel);
    grads["stem.bias"] = std::move(sg.bias);
    return grads;
}

Tensor cube_to_tensor(const HsiCube& cube) {
    Tensor t({cube.bands, cube.height, cube.width});
    t.values = cube.values;
    return t;
}

// ---- gradient check ----

GradCheckResult grad_check(const Objective& objective, const NetParams& params, double epsilon, double abs_floor) {
    NetParams analytic = params.zeros_like();
    const double f0 = objective(params, &analytic);
    if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite loss");

    GradCheckResult result;
    NetParams probe = params;
    for (std::size_t e = 0; e < probe.entries.size(); ++e) {
        auto& values = probe.entries[e].tensor.values;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + epsilon;
            const double fp = objective(probe, nullptr);
            values[i] = saved - epsilon;
            const double fm = objective(probe, nullptr);
            values[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite loss");
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = analytic.entries[e].tensor.values[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++result.checked;
            if (rel > result.max_rel_error || result.checked == 1) {
                result.max_rel_error = rel;
                result.worst_parameter = probe.entries[e].name;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

// ---- parameter files ----

void write_params(const NetParams& params, const std::filesystem::path& path) {
    std::ostringstream hs;
    hs << "UNP1 " << params.entries.size() << '\n';
    for (const auto& e : params.entries) {
        hs << e.name << ' ' << (e.is_bias ? 1 : 0) << ' ' << e.tensor.rank();
        for (int d : e.tensor.shape) hs << ' ' << d;
        hs << '\n';
    }
    std::string bytes = hs.str();
    for (const auto& e : params.entries)
        for (double v : e.tensor.values) {
            if (!std::isfinite(v)) throw NumericError("write_params: non-finite parameter in " + e.name);
            detail::put_f64(bytes, v);
        }
    detail::write_file(path, bytes);
}

NetParams read_params(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    std::size_t pos = 0;
    const auto next_line = [&]() {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw FormatError(path.string() + ": truncated parameter header");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    std::istringstream first(next_line());
    std::string magic;
    std::size_t count = 0;
    first >> magic;
    if (magic.rfind("UNP", 0) != 0) throw FormatError(path.string() + ": not a parameter file");
    if (magic != "UNP1") throw FormatError(path.string() + ": unknown parameter format version " + magic);
    if (!(first >> count) || count > 100000) throw FormatError(path.string() + ": malformed parameter header");

    NetParams params;
    std::size_t total = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream ls(next_line());
        NamedTensor e;
        int is_bias = 0, rank = 0;
        if (!(ls >> e.name >> is_bias >> rank) || rank < 1 || rank > 4)
            throw FormatError(path.string() + ": malformed tensor entry");
        std::vector<int> shape(rank);
        for (int& d : shape)
            if (!(ls >> d) || d <= 0) throw FormatError(path.string() + ": malformed tensor shape");
        e.is_bias = is_bias != 0;
        e.tensor = Tensor(shape);
        total += e.tensor.size();
        params.entries.push_back(std::move(e));
    }
    if (bytes.size() - pos != total * 8) throw FormatError(path.string() + ": parameter payload size mismatch");
    const char* p = bytes.data() + pos;
    for (auto& e : params.entries)
        for (double& v : e.tensor.values) {
            v = detail::get_f64(p);
            p += 8;
            if (!std::isfinite(v)) throw NumericError(path.string() + ": non-finite parameter");
        }
    return params;
}

}  // namespace chemmap
