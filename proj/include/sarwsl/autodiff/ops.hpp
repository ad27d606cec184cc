#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "sarwsl/autodiff/tape.hpp"
#include "sarwsl/random.hpp"

namespace sarwsl::ad {

namespace detail {

inline void require(bool ok, const std::string& what)
{
    if (!ok)
        throw std::invalid_argument(what);
}

// out[n, y, x, :] += sum over taps and input channels of in[n, y+dy, x+dx, ci] * k[tap, ci, :]
// with zero padding. `flip` mirrors the tap offsets, which turns the routine
// into the input-gradient pass when given the transposed kernel.
// Operands are widened to double up front and each output element is
// rounded once.
template <typename T>
void conv_same(const T* in, std::size_t n, std::size_t h, std::size_t w, std::size_t cin, const T* kernel,
               std::size_t kh, std::size_t kw, std::size_t cout, T* out, bool flip)
{
    const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
    const std::vector<double> xin(in, in + n * h * w * cin);
    const std::vector<double> kd(kernel, kernel + kh * kw * cin * cout);
    std::vector<double> acc(w * cout);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y) {
            T* orow = out + (b * h + y) * w * cout;
            std::copy(orow, orow + w * cout, acc.begin());
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const long dy = flip ? ph - static_cast<long>(ky) : static_cast<long>(ky) - ph;
                const long iy = static_cast<long>(y) + dy;
                if (iy < 0 || iy >= static_cast<long>(h))
                    continue;
                const double* irow = xin.data() + (b * h + static_cast<std::size_t>(iy)) * w * cin;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long dx = flip ? pw - static_cast<long>(kx) : static_cast<long>(kx) - pw;
                    if (static_cast<std::size_t>(dx < 0 ? -dx : dx) >= w)
                        continue;
                    const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                    const std::size_t x1 = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
                    const double* kt = kd.data() + (ky * kw + kx) * cin * cout;
                    for (std::size_t x = x0; x < x1; ++x) {
                        const double* xi = irow + static_cast<std::size_t>(static_cast<long>(x) + dx) * cin;
                        double* a = acc.data() + x * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double v = xi[ci];
                            const double* kr = kt + ci * cout;
                            for (std::size_t co = 0; co < cout; ++co)
                                a[co] += v * kr[co];
                        }
                    }
                }
            }
            for (std::size_t i = 0; i < w * cout; ++i)
                orow[i] = static_cast<T>(acc[i]);
        }
}

// dk[tap, ci, co] += sum over pixels of in[pixel + offset(tap), ci] * g[pixel, co]
template <typename T>
void conv_same_kernel_grad(const T* in, const T* g, std::size_t n, std::size_t h, std::size_t w, std::size_t cin,
                           std::size_t kh, std::size_t kw, std::size_t cout, T* dk)
{
    const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
    const std::vector<double> xin(in, in + n * h * w * cin);
    const std::vector<double> gd(g, g + n * h * w * cout);
    std::vector<double> acc(kh * kw * cin * cout, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const long iy = static_cast<long>(y) + static_cast<long>(ky) - ph;
                if (iy < 0 || iy >= static_cast<long>(h))
                    continue;
                const double* irow = xin.data() + (b * h + static_cast<std::size_t>(iy)) * w * cin;
                const double* grow = gd.data() + (b * h + y) * w * cout;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long dx = static_cast<long>(kx) - pw;
                    if (static_cast<std::size_t>(dx < 0 ? -dx : dx) >= w)
                        continue;
                    const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                    const std::size_t x1 = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
                    double* at = acc.data() + (ky * kw + kx) * cin * cout;
                    for (std::size_t x = x0; x < x1; ++x) {
                        const double* xi = irow + static_cast<std::size_t>(static_cast<long>(x) + dx) * cin;
                        const double* gp = grow + x * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double v = xi[ci];
                            double* ar = at + ci * cout;
                            for (std::size_t co = 0; co < cout; ++co)
                                ar[co] += v * gp[co];
                        }
                    }
                }
            }
    for (std::size_t i = 0; i < acc.size(); ++i)
        dk[i] += static_cast<T>(acc[i]);
}

// [taps, a, b] -> [taps, b, a]
template <typename T>
std::vector<T> transpose_taps(const T* k, std::size_t taps, std::size_t a, std::size_t b)
{
    std::vector<T> t(taps * a * b);
    for (std::size_t tap = 0; tap < taps; ++tap)
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < b; ++j)
                t[(tap * b + j) * a + i] = k[(tap * a + i) * b + j];
    return t;
}

} // namespace detail

/// Stride-1 "same" cross-correlation with an odd square kernel (3x3 or 1x1).
/// x: N x H x W x Cin, k: kH x kW x Cin x Cout, bias: Cout (optional).
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var k, Var bias = {})
{
    const Shape& xs = tape.shape(x);
    const Shape& ks = tape.shape(k);
    detail::require(xs.size() == 4 && ks.size() == 4, "conv2d: expected rank-4 input and kernel");
    detail::require(ks[0] == ks[1] && ks[0] % 2 == 1, "conv2d: kernel must be square with odd side");
    detail::require(ks[2] == xs[3], "conv2d: kernel expects " + std::to_string(ks[2]) + " input channels, got " +
                                        std::to_string(xs[3]));
    const std::size_t n = xs[0], h = xs[1], w = xs[2], cin = xs[3], kh = ks[0], kw = ks[1], cout = ks[3];
    if (bias.valid())
        detail::require(tape.shape(bias) == Shape{cout}, "conv2d: bias shape must be [Cout]");

    Tensor<T> out({n, h, w, cout});
    if (bias.valid()) {
        const T* bv = tape.value(bias).data();
        for (std::size_t p = 0; p < n * h * w; ++p)
            std::copy(bv, bv + cout, out.data() + p * cout);
    }
    detail::conv_same(tape.value(x).data(), n, h, w, cin, tape.value(k).data(), kh, kw, cout, out.data(), false);

    return tape.record(std::move(out), {x, k, bias.valid() ? bias : x}, [=](Tape<T>& t, const Tensor<T>& g) {
        const T* gy = g.data();
        if (Tensor<T>* dx = t.grad_sink(x)) {
            const auto kt = detail::transpose_taps(t.value(k).data(), kh * kw, cin, cout);
            detail::conv_same(gy, n, h, w, cout, kt.data(), kh, kw, cin, dx->data(), true);
        }
        if (Tensor<T>* dk = t.grad_sink(k))
            detail::conv_same_kernel_grad(t.value(x).data(), gy, n, h, w, cin, kh, kw, cout, dk->data());
        if (bias.valid())
            if (Tensor<T>* db = t.grad_sink(bias)) {
                std::vector<double> acc(cout, 0.0);
                for (std::size_t p = 0; p < n * h * w; ++p)
                    for (std::size_t co = 0; co < cout; ++co)
                        acc[co] += gy[p * cout + co];
                for (std::size_t co = 0; co < cout; ++co)
                    (*db)[co] += static_cast<T>(acc[co]);
            }
    });
}

/// 2x2 stride-2 transposed convolution (adjoint of a 2x2 stride-2 convolution).
/// x: N x H x W x Cin, k: 2 x 2 x Cin x Cout -> N x 2H x 2W x Cout.
template <typename T>
Var conv2d_transpose(Tape<T>& tape, Var x, Var k)
{
    const Shape& xs = tape.shape(x);
    const Shape& ks = tape.shape(k);
    detail::require(xs.size() == 4 && ks.size() == 4, "conv2d_transpose: expected rank-4 input and kernel");
    detail::require(ks[0] == 2 && ks[1] == 2, "conv2d_transpose: kernel must be 2x2");
    detail::require(ks[2] == xs[3], "conv2d_transpose: kernel expects " + std::to_string(ks[2]) +
                                        " input channels, got " + std::to_string(xs[3]));
    const std::size_t n = xs[0], h = xs[1], w = xs[2], cin = xs[3], cout = ks[3];
    const std::size_t oh = 2 * h, ow = 2 * w;

    Tensor<T> out({n, oh, ow, cout});
    const T* xv = tape.value(x).data();
    const T* kv = tape.value(k).data();
    std::vector<double> acc(cout);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                const T* xi = xv + ((b * h + y) * w + xx) * cin;
                for (std::size_t tap = 0; tap < 4; ++tap) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    const T* kt = kv + tap * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double v = xi[ci];
                        const T* kr = kt + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co)
                            acc[co] += v * kr[co];
                    }
                    T* o = out.data() + ((b * oh + 2 * y + tap / 2) * ow + 2 * xx + tap % 2) * cout;
                    for (std::size_t co = 0; co < cout; ++co)
                        o[co] = static_cast<T>(acc[co]);
                }
            }

    return tape.record(std::move(out), {x, k}, [=](Tape<T>& t, const Tensor<T>& g) {
        const T* gy = g.data();
        const T* xv = t.value(x).data();
        Tensor<T>* dx = t.grad_sink(x);
        Tensor<T>* dk = t.grad_sink(k);
        const auto kt = dx ? detail::transpose_taps(t.value(k).data(), 4, cin, cout) : std::vector<T>{};
        std::vector<double> dk_acc(dk ? 4 * cin * cout : 0, 0.0), dx_acc(cin);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const std::size_t ip = ((b * h + y) * w + xx) * cin;
                    std::fill(dx_acc.begin(), dx_acc.end(), 0.0);
                    for (std::size_t tap = 0; tap < 4; ++tap) {
                        const T* gp = gy + ((b * oh + 2 * y + tap / 2) * ow + 2 * xx + tap % 2) * cout;
                        if (dx) {
                            const T* ktt = kt.data() + tap * cout * cin;
                            for (std::size_t co = 0; co < cout; ++co) {
                                const double gv = gp[co];
                                const T* kr = ktt + co * cin;
                                for (std::size_t ci = 0; ci < cin; ++ci)
                                    dx_acc[ci] += gv * kr[ci];
                            }
                        }
                        if (dk) {
                            double* dkt = dk_acc.data() + tap * cin * cout;
                            for (std::size_t ci = 0; ci < cin; ++ci) {
                                const double v = xv[ip + ci];
                                double* dr = dkt + ci * cout;
                                for (std::size_t co = 0; co < cout; ++co)
                                    dr[co] += v * gp[co];
                            }
                        }
                    }
                    if (dx)
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            (*dx)[ip + ci] += static_cast<T>(dx_acc[ci]);
                }
        if (dk)
            for (std::size_t i = 0; i < dk_acc.size(); ++i)
                (*dk)[i] += static_cast<T>(dk_acc[i]);
    });
}

/// Per-channel running statistics for batch_norm.
template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Batch normalization over N, H, W. Training mode normalizes with batch
/// statistics (biased variance) and updates the running averages; inference
/// mode uses the running averages.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormState<T>& state, bool training)
{
    const Shape& xs = tape.shape(x);
    detail::require(!xs.empty(), "batch_norm: rank-0 input");
    const std::size_t c = xs.back();
    const std::size_t m = tape.value(x).size() / c;
    detail::require(tape.shape(gamma) == Shape{c} && tape.shape(beta) == Shape{c},
                    "batch_norm: gamma/beta must have " + std::to_string(c) + " channels");
    detail::require(state.running_mean.size() == c && state.running_var.size() == c,
                    "batch_norm: running statistics have the wrong channel count");

    const T* xv = tape.value(x).data();
    const T* gv = tape.value(gamma).data();
    const T* bv = tape.value(beta).data();
    std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
    if (training) {
        std::vector<double> var(c, 0.0);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t ch = 0; ch < c; ++ch)
                mean[ch] += xv[p * c + ch];
        for (double& v : mean)
            v /= static_cast<double>(m);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double d = xv[p * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        for (std::size_t ch = 0; ch < c; ++ch) {
            var[ch] /= static_cast<double>(m);
            inv_std[ch] = 1.0 / std::sqrt(var[ch] + state.epsilon);
            state.running_mean[ch] =
                static_cast<T>(state.momentum * state.running_mean[ch] + (1.0 - state.momentum) * mean[ch]);
            state.running_var[ch] =
                static_cast<T>(state.momentum * state.running_var[ch] + (1.0 - state.momentum) * var[ch]);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = state.running_mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) + state.epsilon);
        }
    }

    Tensor<T> out(xs);
    std::vector<T> xhat(training ? m * c : 0);
    for (std::size_t p = 0; p < m; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double nrm = (xv[p * c + ch] - mean[ch]) * inv_std[ch];
            if (training)
                xhat[p * c + ch] = static_cast<T>(nrm);
            out[p * c + ch] = static_cast<T>(gv[ch] * nrm + bv[ch]);
        }

    return tape.record(std::move(out), {x, gamma, beta},
                       [=, xhat = std::move(xhat)](Tape<T>& t, const Tensor<T>& g) {
        const T* gy = g.data();
        const T* gam = t.value(gamma).data();
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        const T* xv = t.value(x).data();
        const auto normalized = [&](std::size_t i, std::size_t ch) -> double {
            return training ? static_cast<double>(xhat[i]) : (xv[i] - mean[ch]) * inv_std[ch];
        };
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t i = p * c + ch;
                sum_g[ch] += gy[i];
                sum_gx[ch] += gy[i] * normalized(i, ch);
            }
        if (Tensor<T>* dgamma = t.grad_sink(gamma))
            for (std::size_t ch = 0; ch < c; ++ch)
                (*dgamma)[ch] += static_cast<T>(sum_gx[ch]);
        if (Tensor<T>* dbeta = t.grad_sink(beta))
            for (std::size_t ch = 0; ch < c; ++ch)
                (*dbeta)[ch] += static_cast<T>(sum_g[ch]);
        if (Tensor<T>* dx = t.grad_sink(x)) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::size_t p = 0; p < m; ++p)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t i = p * c + ch;
                    const double scale = gam[ch] * inv_std[ch];
                    if (training)
                        (*dx)[i] += static_cast<T>(
                            scale * (gy[i] - inv_m * sum_g[ch] - normalized(i, ch) * inv_m * sum_gx[ch]));
                    else
                        (*dx)[i] += static_cast<T>(scale * gy[i]);
                }
        }
    });
}

/// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.
template <typename T>
Var max_pool2(Tape<T>& tape, Var x)
{
    const Shape& xs = tape.shape(x);
    detail::require(xs.size() == 4, "max_pool2: expected rank-4 input");
    detail::require(xs[1] % 2 == 0 && xs[2] % 2 == 0, "max_pool2: spatial dims must be even, got " + to_string(xs));
    const std::size_t n = xs[0], h = xs[1], w = xs[2], c = xs[3], oh = h / 2, ow = w / 2;
    Tensor<T> out({n, oh, ow, c});
    std::vector<std::uint32_t> argmax(out.size());
    const T* xv = tape.value(x).data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((b * h + 2 * y) * w + 2 * xx) * c + ch;
                    for (std::size_t tap = 1; tap < 4; ++tap) {
                        const std::size_t i = ((b * h + 2 * y + tap / 2) * w + 2 * xx + tap % 2) * c + ch;
                        if (xv[i] > xv[best])
                            best = i;
                    }
                    const std::size_t o = ((b * oh + y) * ow + xx) * c + ch;
                    out[o] = xv[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
    return tape.record(std::move(out), {x}, [=, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* dx = t.grad_sink(x))
            for (std::size_t o = 0; o < argmax.size(); ++o)
                (*dx)[argmax[o]] += g[o];
    });
}

template <typename T>
Var relu(Tape<T>& tape, Var x)
{
    Tensor<T> out = tape.value(x);
    for (T& v : out.values)
        v = v > T(0) ? v : T(0);
    return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* dx = t.grad_sink(x)) {
            const T* xv = t.value(x).data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > T(0))
                    (*dx)[i] += g[i];
        }
    });
}

/// Logistic function kept strictly inside (0, 1): saturated results are
/// pinned to the nearest representable values short of the bounds.
template <typename T>
T sigmoid_value(T v)
{
    T s;
    if (v >= T(0)) {
        s = T(1) / (T(1) + std::exp(-v));
    } else {
        const T e = std::exp(v);
        s = e / (T(1) + e);
    }
    return std::clamp(s, std::numeric_limits<T>::min(), std::nextafter(T(1), T(0)));
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x)
{
    Tensor<T> out = tape.value(x);
    for (T& v : out.values)
        v = sigmoid_value(v);
    const Var self{tape.size()};
    return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* dx = t.grad_sink(x)) {
            const T* s = t.value(self).data();
            for (std::size_t i = 0; i < g.size(); ++i)
                (*dx)[i] += g[i] * s[i] * (T(1) - s[i]);
        }
    });
}

/// Inverted dropout: kept values are scaled by 1/(1-rate). Identity when not
/// training or when rate is zero.
template <typename T>
Var dropout(Tape<T>& tape, Var x, double rate, bool training, std::uint64_t seed)
{
    detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0, 1)");
    if (!training || rate == 0.0)
        return x;
    const std::size_t size = tape.value(x).size();
    const T scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> keep(size);
    Rng rng(seed);
    for (T& k : keep)
        k = rng.uniform() >= rate ? scale : T(0);
    Tensor<T> out = tape.value(x);
    for (std::size_t i = 0; i < size; ++i)
        out[i] *= keep[i];
    return tape.record(std::move(out), {x}, [=, keep = std::move(keep)](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* dx = t.grad_sink(x))
            for (std::size_t i = 0; i < g.size(); ++i)
                (*dx)[i] += g[i] * keep[i];
    });
}

/// Concatenates along the last (channel) axis.
template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b)
{
    const Shape& as = tape.shape(a);
    const Shape& bs = tape.shape(b);
    detail::require(as.size() == bs.size() && !as.empty() && std::equal(as.begin(), as.end() - 1, bs.begin()),
                    "concat_channels: shapes " + to_string(as) + " and " + to_string(bs) + " disagree");
    const std::size_t ca = as.back(), cb = bs.back(), m = tape.value(a).size() / ca;
    Shape os = as;
    os.back() = ca + cb;
    Tensor<T> out(os);
    const T* av = tape.value(a).data();
    const T* bv = tape.value(b).data();
    for (std::size_t p = 0; p < m; ++p) {
        std::copy(av + p * ca, av + (p + 1) * ca, out.data() + p * (ca + cb));
        std::copy(bv + p * cb, bv + (p + 1) * cb, out.data() + p * (ca + cb) + ca);
    }
    return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* da = t.grad_sink(a))
            for (std::size_t p = 0; p < m; ++p)
                for (std::size_t i = 0; i < ca; ++i)
                    (*da)[p * ca + i] += g[p * (ca + cb) + i];
        if (Tensor<T>* db = t.grad_sink(b))
            for (std::size_t p = 0; p < m; ++p)
                for (std::size_t i = 0; i < cb; ++i)
                    (*db)[p * cb + i] += g[p * (ca + cb) + ca + i];
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b)
{
    detail::require(tape.shape(a) == tape.shape(b),
                    "add: shapes " + to_string(tape.shape(a)) + " and " + to_string(tape.shape(b)) + " disagree");
    Tensor<T> out = tape.value(a);
    const T* bv = tape.value(b).data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += bv[i];
    return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
        for (Var v : {a, b})
            if (Tensor<T>* d = t.grad_sink(v))
                for (std::size_t i = 0; i < g.size(); ++i)
                    (*d)[i] += g[i];
    });
}

/// Scalar sum of all elements.
template <typename T>
Var sum(Tape<T>& tape, Var x)
{
    double acc = 0.0;
    for (T v : tape.value(x).values)
        acc += v;
    return tape.record(Tensor<T>({1}, static_cast<T>(acc)), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* dx = t.grad_sink(x))
            for (T& d : dx->values)
                d += g[0];
    });
}

/// Scalar sum of x * weights with constant weights; a generic scalar probe
/// for gradient checks.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, Tensor<T> weights)
{
    detail::require(weights.size() == tape.value(x).size(), "weighted_sum: weight count mismatch");
    double acc = 0.0;
    const T* xv = tape.value(x).data();
    for (std::size_t i = 0; i < weights.size(); ++i)
        acc += static_cast<double>(xv[i]) * weights[i];
    return tape.record(Tensor<T>({1}, static_cast<T>(acc)), {x},
                       [=, weights = std::move(weights)](Tape<T>& t, const Tensor<T>& g) {
        if (Tensor<T>* dx = t.grad_sink(x))
            for (std::size_t i = 0; i < weights.size(); ++i)
                (*dx)[i] += g[0] * weights[i];
    });
}

} // namespace sarwsl::ad
