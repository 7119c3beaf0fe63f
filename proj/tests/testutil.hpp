#pragma once

// Shared test helpers: finite-difference gradient checking in double
// precision and naive reference kernels to pit the optimized ops against.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "moedet/rng.hpp"
#include "moedet/tensor.hpp"

namespace testutil {

inline void fill_uniform(moedet::TensorPtr<double>& t, moedet::Rng& rng, double lo, double hi) {
    for (auto& v : t->data) v = rng.uniform(lo, hi);
}

inline void fill_uniform(moedet::TensorPtr<float>& t, moedet::Rng& rng, double lo, double hi) {
    for (auto& v : t->data) v = static_cast<float>(rng.uniform(lo, hi));
}

struct FdReport {
    double max_err = 0.0;
    std::string where;
};

// Central differences against the tape gradient. `build` must construct the
// graph from scratch on each call, reading the parameter tensors as leaves,
// and return a scalar loss. The combined error metric tolerates tiny
// gradients without drowning relative accuracy on large ones.
//
// Piecewise-linear activations make a central difference invalid whenever a
// kink falls inside [x-h, x+h]; that error does not shrink with h, but the
// kink sits at a fixed offset, so retrying with a smaller step moves it out
// of the bracket. A genuinely wrong analytic gradient disagrees at every
// step size and still fails.
template <typename BuildFn>
FdReport fd_check(BuildFn&& build, const std::vector<moedet::TensorPtr<double>>& params) {
    for (const auto& p : params) p->alloc_grad();
    moedet::Tape<double> tape;
    auto loss = build(tape);
    tape.backward(loss);

    auto eval = [&]() {
        moedet::Tape<double> fwd;
        fwd.set_enabled(false);
        return build(fwd)->data[0];
    };

    FdReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (size_t i = 0; i < p->data.size(); ++i) {
            const double x0 = p->data[i];
            const double an = p->grad[i];
            double best_err = std::numeric_limits<double>::infinity();
            double best_fd = 0.0;
            for (const double scale : {1e-3, 1e-3 / 16, 1e-3 / 256, 1e-3 / 4096, 1e-3 / 65536}) {
                const double h = scale * (std::abs(x0) + 1.0);
                p->data[i] = x0 + h;
                const double fp = eval();
                p->data[i] = x0 - h;
                const double fm = eval();
                p->data[i] = x0;
                const double fd = (fp - fm) / (2.0 * h);
                const double err = std::abs(an - fd) / std::max({1e-2, std::abs(an), std::abs(fd)});
                if (err < best_err) {
                    best_err = err;
                    best_fd = fd;
                }
                if (best_err < 1e-6) break;
            }
            if (best_err > rep.max_err) {
                rep.max_err = best_err;
                rep.where = "param " + std::to_string(pi) + " elem " + std::to_string(i) + " analytic " +
                            std::to_string(an) + " fd " + std::to_string(best_fd);
            }
        }
    }
    return rep;
}

// Direct seven-loop convolution, no tricks.
template <typename S>
moedet::TensorPtr<S> conv2d_ref(const moedet::TensorPtr<S>& input, const moedet::TensorPtr<S>& kernel,
                                const moedet::TensorPtr<S>& bias, int stride, int padding) {
    const int B = input->dim(0), Cin = input->dim(1), H = input->dim(2), W = input->dim(3);
    const int Cout = kernel->dim(0), kh = kernel->dim(2), kw = kernel->dim(3);
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;
    auto out = moedet::tensor_zeros<S>({B, Cout, Ho, Wo});
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    S acc = bias ? bias->data[static_cast<size_t>(co)] : S(0);
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int r = 0; r < kh; ++r)
                            for (int c = 0; c < kw; ++c) {
                                const int ih = oh * stride - padding + r;
                                const int iw = ow * stride - padding + c;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += input->at4(b, ci, ih, iw) * kernel->at4(co, ci, r, c);
                            }
                    out->at4(b, co, oh, ow) = acc;
                }
    return out;
}

template <typename S>
double max_abs_diff(const moedet::TensorPtr<S>& a, const moedet::TensorPtr<S>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a->data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a->data[i]) - static_cast<double>(b->data[i])));
    return m;
}

}  // namespace testutil
