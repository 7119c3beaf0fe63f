#pragma once

// Dense row-major tensors with reverse-mode differentiation on an explicit
// tape. The scalar type is a template parameter: models train in float and
// the same graph code instantiates in double for finite-difference
// verification. Kernels are single-threaded and reduce in a fixed order, so
// identical inputs give bitwise-identical outputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "moedet/error.hpp"

namespace moedet {

namespace detail {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw shape_error(msg);
}

}  // namespace detail

template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // same length as data iff requires_grad
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    S& at4(int b, int c, int y, int x) {
        return data[static_cast<size_t>(((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    const S& at4(int b, int c, int y, int x) const {
        return data[static_cast<size_t>(((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    S& at2(int r, int c) { return data[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }
    const S& at2(int r, int c) const { return data[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }

    void alloc_grad() {
        requires_grad = true;
        grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (requires_grad) std::fill(grad.begin(), grad.end(), S(0));
    }
};

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <typename S>
TensorPtr<S> tensor_zeros(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<S>>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(detail::numel_of(t->shape)), S(0));
    if (requires_grad) t->alloc_grad();
    return t;
}

template <typename S>
TensorPtr<S> tensor_full(std::vector<int> shape, S value, bool requires_grad = false) {
    auto t = tensor_zeros<S>(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

template <typename S>
TensorPtr<S> tensor_of(std::vector<int> shape, std::vector<S> values, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<S>>();
    t->shape = std::move(shape);
    detail::require(detail::numel_of(t->shape) == static_cast<int64_t>(values.size()),
                    "tensor_of: value count does not match shape " + detail::shape_str(t->shape));
    t->data = std::move(values);
    if (requires_grad) t->alloc_grad();
    return t;
}

// Records backward closures during the forward pass; backward() replays them
// in reverse, so every recorded operation is visited exactly once and always
// after everything that consumed its output.
template <typename S>
class Tape {
public:
    bool enabled() const { return enabled_; }
    void set_enabled(bool on) { enabled_ = on; }

    void record(const TensorPtr<S>& out, std::function<void()> fn) {
        if (enabled_) ops_.push_back(Op{out, std::move(fn)});
    }

    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards. Intermediate
    // gradients are cleared first so every sweep adds exactly dL/dp to each
    // leaf: repeated calls without a gradient reset accumulate.
    void backward(const TensorPtr<S>& loss) {
        detail::require(loss->numel() == 1, "backward: loss must be a scalar tensor");
        detail::require(loss->requires_grad, "backward: loss does not participate in the tape");
        for (auto& op : ops_) op.out->zero_grad();
        loss->grad[0] += S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->fn();
    }

private:
    struct Op {
        TensorPtr<S> out;
        std::function<void()> fn;
    };
    std::vector<Op> ops_;
    bool enabled_ = true;
};

namespace detail {

template <typename S>
bool any_grad(const Tape<S>& tape, std::initializer_list<TensorPtr<S>> ins) {
    if (!tape.enabled()) return false;
    bool any = false;
    for (const auto& t : ins) {
        if (!t || !t->requires_grad) continue;
        if (t->grad.size() != t->data.size())
            throw numeric_error("tensor marked requires_grad without an allocated gradient; call alloc_grad()");
        any = true;
    }
    return any;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> conv2d(Tape<S>& tape, const TensorPtr<S>& input, const TensorPtr<S>& kernel,
                    const TensorPtr<S>& bias, int stride, int padding) {
    detail::require(input->rank() == 4, "conv2d: input must be [B,Cin,H,W], got " + detail::shape_str(input->shape));
    detail::require(kernel->rank() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw], got " + detail::shape_str(kernel->shape));
    detail::require(stride >= 1, "conv2d: stride must be >= 1");
    detail::require(padding >= 0, "conv2d: padding must be >= 0");
    const int B = input->dim(0), Cin = input->dim(1), H = input->dim(2), W = input->dim(3);
    const int Cout = kernel->dim(0), kh = kernel->dim(2), kw = kernel->dim(3);
    detail::require(kernel->dim(1) == Cin,
                    "conv2d: kernel expects " + std::to_string(kernel->dim(1)) + " input channels, input has " +
                        std::to_string(Cin));
    detail::require(kh <= H + 2 * padding && kw <= W + 2 * padding, "conv2d: kernel larger than padded input");
    if (bias) detail::require(bias->rank() == 1 && bias->dim(0) == Cout, "conv2d: bias must be [Cout]");

    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;

    bool rg = detail::any_grad(tape, {input, kernel, bias});
    auto out = tensor_zeros<S>({B, Cout, Ho, Wo}, rg);

    const S* in = input->data.data();
    const S* k = kernel->data.data();
    S* o = out->data.data();

    // Valid output ranges per kernel tap, so inner loops are branch-free.
    auto out_range = [stride, padding](int koff, int extent, int lo_out, int* lo, int* hi) {
        // need 0 <= ow*stride - padding + koff < extent
        int lo_v = 0;
        while (lo_v * stride - padding + koff < 0) ++lo_v;
        int hi_v = lo_out;
        while (hi_v > lo_v && (hi_v - 1) * stride - padding + koff >= extent) --hi_v;
        *lo = lo_v;
        *hi = hi_v;
    };

    for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Cout; ++co) {
            S* oplane = o + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
            const S bv = bias ? bias->data[static_cast<size_t>(co)] : S(0);
            for (int i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
            for (int ci = 0; ci < Cin; ++ci) {
                const S* iplane = in + (static_cast<int64_t>(b) * Cin + ci) * H * W;
                for (int r = 0; r < kh; ++r) {
                    int oh_lo, oh_hi;
                    out_range(r, H, Ho, &oh_lo, &oh_hi);
                    for (int c = 0; c < kw; ++c) {
                        const S wv = k[((static_cast<int64_t>(co) * Cin + ci) * kh + r) * kw + c];
                        if (wv == S(0)) continue;
                        int ow_lo, ow_hi;
                        out_range(c, W, Wo, &ow_lo, &ow_hi);
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * stride - padding + r;
                            const S* irow = iplane + static_cast<int64_t>(ih) * W - padding + c;
                            S* orow = oplane + static_cast<int64_t>(oh) * Wo;
                            if (stride == 1) {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow];
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    if (rg) {
        tape.record(out, [input, kernel, bias, out, stride, padding, B, Cin, H, W, Cout, kh, kw, Ho, Wo, out_range]() {
            const S* g = out->grad.data();
            if (input->requires_grad) {
                S* gin = input->grad.data();
                const S* k = kernel->data.data();
                for (int b = 0; b < B; ++b) {
                    for (int co = 0; co < Cout; ++co) {
                        const S* gplane = g + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
                        for (int ci = 0; ci < Cin; ++ci) {
                            S* giplane = gin + (static_cast<int64_t>(b) * Cin + ci) * H * W;
                            for (int r = 0; r < kh; ++r) {
                                int oh_lo, oh_hi;
                                out_range(r, H, Ho, &oh_lo, &oh_hi);
                                for (int c = 0; c < kw; ++c) {
                                    const S wv = k[((static_cast<int64_t>(co) * Cin + ci) * kh + r) * kw + c];
                                    if (wv == S(0)) continue;
                                    int ow_lo, ow_hi;
                                    out_range(c, W, Wo, &ow_lo, &ow_hi);
                                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                        const int ih = oh * stride - padding + r;
                                        S* girow = giplane + static_cast<int64_t>(ih) * W - padding + c;
                                        const S* grow = gplane + static_cast<int64_t>(oh) * Wo;
                                        for (int ow = ow_lo; ow < ow_hi; ++ow) girow[ow * stride] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (kernel->requires_grad) {
                S* gk = kernel->grad.data();
                const S* in = input->data.data();
                for (int co = 0; co < Cout; ++co) {
                    for (int ci = 0; ci < Cin; ++ci) {
                        for (int r = 0; r < kh; ++r) {
                            int oh_lo, oh_hi;
                            out_range(r, H, Ho, &oh_lo, &oh_hi);
                            for (int c = 0; c < kw; ++c) {
                                int ow_lo, ow_hi;
                                out_range(c, W, Wo, &ow_lo, &ow_hi);
                                S acc(0);
                                for (int b = 0; b < B; ++b) {
                                    const S* gplane = out->grad.data() + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
                                    const S* iplane = in + (static_cast<int64_t>(b) * Cin + ci) * H * W;
                                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                        const int ih = oh * stride - padding + r;
                                        const S* irow = iplane + static_cast<int64_t>(ih) * W - padding + c;
                                        const S* grow = gplane + static_cast<int64_t>(oh) * Wo;
                                        for (int ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * irow[ow * stride];
                                    }
                                }
                                gk[((static_cast<int64_t>(co) * Cin + ci) * kh + r) * kw + c] += acc;
                            }
                        }
                    }
                }
            }
            if (bias && bias->requires_grad) {
                for (int co = 0; co < Cout; ++co) {
                    S acc(0);
                    for (int b = 0; b < B; ++b) {
                        const S* gplane = out->grad.data() + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
                        for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                    }
                    bias->grad[static_cast<size_t>(co)] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> linear(Tape<S>& tape, const TensorPtr<S>& x, const TensorPtr<S>& weight, const TensorPtr<S>& bias) {
    detail::require(x->rank() == 2, "linear: input must be [B,Din]");
    detail::require(weight->rank() == 2, "linear: weight must be [Dout,Din]");
    const int B = x->dim(0), Din = x->dim(1), Dout = weight->dim(0);
    detail::require(weight->dim(1) == Din,
                    "linear: weight expects " + std::to_string(weight->dim(1)) + " inputs, got " + std::to_string(Din));
    if (bias) detail::require(bias->rank() == 1 && bias->dim(0) == Dout, "linear: bias must be [Dout]");

    bool rg = detail::any_grad(tape, {x, weight, bias});
    auto out = tensor_zeros<S>({B, Dout}, rg);
    for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Dout; ++o) {
            S acc = bias ? bias->data[static_cast<size_t>(o)] : S(0);
            const S* xr = x->data.data() + static_cast<int64_t>(b) * Din;
            const S* wr = weight->data.data() + static_cast<int64_t>(o) * Din;
            for (int d = 0; d < Din; ++d) acc += xr[d] * wr[d];
            out->at2(b, o) = acc;
        }
    }
    if (rg) {
        tape.record(out, [x, weight, bias, out, B, Din, Dout]() {
            for (int b = 0; b < B; ++b) {
                for (int o = 0; o < Dout; ++o) {
                    const S g = out->grad[static_cast<size_t>(static_cast<int64_t>(b) * Dout + o)];
                    if (g == S(0)) continue;
                    if (x->requires_grad) {
                        S* gx = x->grad.data() + static_cast<int64_t>(b) * Din;
                        const S* wr = weight->data.data() + static_cast<int64_t>(o) * Din;
                        for (int d = 0; d < Din; ++d) gx[d] += g * wr[d];
                    }
                    if (weight->requires_grad) {
                        S* gw = weight->grad.data() + static_cast<int64_t>(o) * Din;
                        const S* xr = x->data.data() + static_cast<int64_t>(b) * Din;
                        for (int d = 0; d < Din; ++d) gw[d] += g * xr[d];
                    }
                    if (bias && bias->requires_grad) bias->grad[static_cast<size_t>(o)] += g;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

// Same-shape product, plus the one broadcast the models need: a [C,1,1]
// weight against a [B,C,H,W] activation.
template <typename S>
TensorPtr<S> elementwise_mul(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    const bool same = a->shape == b->shape;
    const bool bcast = !same && a->rank() == 4 && b->rank() == 3 && b->dim(0) == a->dim(1) && b->dim(1) == 1 &&
                       b->dim(2) == 1;
    detail::require(same || bcast, "elementwise_mul: shapes " + detail::shape_str(a->shape) + " and " +
                                       detail::shape_str(b->shape) + " are not compatible");

    bool rg = detail::any_grad(tape, {a, b});
    auto out = tensor_zeros<S>(a->shape, rg);
    const int64_t n = a->numel();
    if (same) {
        for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
        if (rg) {
            tape.record(out, [a, b, out, n]() {
                if (a->requires_grad)
                    for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
                if (b->requires_grad)
                    for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
            });
        }
    } else {
        const int B = a->dim(0), C = a->dim(1);
        const int64_t hw = static_cast<int64_t>(a->dim(2)) * a->dim(3);
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                const S w = b->data[static_cast<size_t>(c)];
                const S* ap = a->data.data() + (static_cast<int64_t>(bi) * C + c) * hw;
                S* op = out->data.data() + (static_cast<int64_t>(bi) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) op[i] = ap[i] * w;
            }
        if (rg) {
            tape.record(out, [a, b, out, B, C, hw]() {
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < C; ++c) {
                        const int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
                        if (a->requires_grad) {
                            const S w = b->data[static_cast<size_t>(c)];
                            for (int64_t i = 0; i < hw; ++i) a->grad[off + i] += out->grad[off + i] * w;
                        }
                        if (b->requires_grad) {
                            S acc(0);
                            for (int64_t i = 0; i < hw; ++i) acc += out->grad[off + i] * a->data[off + i];
                            b->grad[static_cast<size_t>(c)] += acc;
                        }
                    }
            });
        }
    }
    return out;
}

namespace detail {

template <typename S, typename Fwd, typename Bwd>
TensorPtr<S> binary_same_shape(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b, const char* name,
                               Fwd fwd, Bwd bwd) {
    require(a->shape == b->shape, std::string(name) + ": shapes " + shape_str(a->shape) + " and " +
                                      shape_str(b->shape) + " differ");
    bool rg = any_grad(tape, {a, b});
    auto out = tensor_zeros<S>(a->shape, rg);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i], b->data[i]);
    if (rg) {
        tape.record(out, [a, b, out, n, bwd]() {
            for (int64_t i = 0; i < n; ++i) {
                const S g = out->grad[i];
                if (g == S(0)) continue;
                S da, db;
                bwd(a->data[i], b->data[i], g, &da, &db);
                if (a->requires_grad) a->grad[i] += da;
                if (b->requires_grad) b->grad[i] += db;
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
TensorPtr<S> add(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_same_shape(
        tape, a, b, "add", [](S x, S y) { return x + y; },
        [](S, S, S g, S* da, S* db) {
            *da = g;
            *db = g;
        });
}

template <typename S>
TensorPtr<S> sub(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_same_shape(
        tape, a, b, "sub", [](S x, S y) { return x - y; },
        [](S, S, S g, S* da, S* db) {
            *da = g;
            *db = -g;
        });
}

template <typename S>
TensorPtr<S> div(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_same_shape(
        tape, a, b, "div", [](S x, S y) { return x / y; },
        [](S x, S y, S g, S* da, S* db) {
            *da = g / y;
            *db = -g * x / (y * y);
        });
}

// Ties route the gradient to the first argument.
template <typename S>
TensorPtr<S> minimum(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_same_shape(
        tape, a, b, "minimum", [](S x, S y) { return x <= y ? x : y; },
        [](S x, S y, S g, S* da, S* db) {
            *da = x <= y ? g : S(0);
            *db = x <= y ? S(0) : g;
        });
}

template <typename S>
TensorPtr<S> maximum(Tape<S>& tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    return detail::binary_same_shape(
        tape, a, b, "maximum", [](S x, S y) { return x >= y ? x : y; },
        [](S x, S y, S g, S* da, S* db) {
            *da = x >= y ? g : S(0);
            *db = x >= y ? S(0) : g;
        });
}

template <typename S>
TensorPtr<S> add_scalar(Tape<S>& tape, const TensorPtr<S>& x, S c) {
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>(x->shape, rg);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] + c;
    if (rg) {
        tape.record(out, [x, out, n]() {
            for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> mul_scalar(Tape<S>& tape, const TensorPtr<S>& x, S c) {
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>(x->shape, rg);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] * c;
    if (rg) {
        tape.record(out, [x, out, n, c]() {
            for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> leaky_relu(Tape<S>& tape, const TensorPtr<S>& x, S slope) {
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>(x->shape, rg);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) {
        const S v = x->data[i];
        out->data[i] = v >= S(0) ? v : slope * v;
    }
    if (rg) {
        tape.record(out, [x, out, n, slope]() {
            for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i] * (x->data[i] >= S(0) ? S(1) : slope);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Concatenation
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> concat_channels(Tape<S>& tape, const std::vector<TensorPtr<S>>& parts) {
    detail::require(!parts.empty(), "concat_channels: empty part list");
    const auto& first = parts.front();
    detail::require(first->rank() == 4, "concat_channels: parts must be [B,C,H,W]");
    const int B = first->dim(0), H = first->dim(2), W = first->dim(3);
    int Ctot = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::require(p->rank() == 4 && p->dim(0) == B && p->dim(2) == H && p->dim(3) == W,
                        "concat_channels: part shape " + detail::shape_str(p->shape) + " does not match " +
                            detail::shape_str(first->shape));
        Ctot += p->dim(1);
        rg = rg || (tape.enabled() && p->requires_grad);
    }
    auto out = tensor_zeros<S>({B, Ctot, H, W}, rg);
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        int coff = 0;
        for (const auto& p : parts) {
            const int C = p->dim(1);
            std::copy_n(p->data.data() + static_cast<int64_t>(b) * C * hw, static_cast<int64_t>(C) * hw,
                        out->data.data() + (static_cast<int64_t>(b) * Ctot + coff) * hw);
            coff += C;
        }
    }
    if (rg) {
        tape.record(out, [parts, out, B, Ctot, hw]() {
            for (int b = 0; b < B; ++b) {
                int coff = 0;
                for (const auto& p : parts) {
                    const int C = p->dim(1);
                    if (p->requires_grad) {
                        const S* go = out->grad.data() + (static_cast<int64_t>(b) * Ctot + coff) * hw;
                        S* gp = p->grad.data() + static_cast<int64_t>(b) * C * hw;
                        for (int64_t i = 0; i < static_cast<int64_t>(C) * hw; ++i) gp[i] += go[i];
                    }
                    coff += C;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> softmax(Tape<S>& tape, const TensorPtr<S>& x, int axis) {
    detail::require(axis >= 0 && axis < x->rank(), "softmax: axis out of range");
    for (const S v : x->data)
        if (!std::isfinite(static_cast<double>(v))) throw numeric_error("softmax: non-finite input");

    int64_t outer = 1, inner = 1;
    const int n = x->dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x->dim(i);
    for (int i = axis + 1; i < x->rank(); ++i) inner *= x->dim(i);

    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>(x->shape, rg);
    for (int64_t ou = 0; ou < outer; ++ou) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = ou * n * inner + in;
            S mx = x->data[base];
            for (int k = 1; k < n; ++k) mx = std::max(mx, x->data[base + k * inner]);
            S sum(0);
            for (int k = 0; k < n; ++k) {
                const S e = std::exp(x->data[base + k * inner] - mx);
                out->data[base + k * inner] = e;
                sum += e;
            }
            for (int k = 0; k < n; ++k) out->data[base + k * inner] /= sum;
        }
    }
    if (rg) {
        tape.record(out, [x, out, outer, inner, n]() {
            for (int64_t ou = 0; ou < outer; ++ou) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = ou * n * inner + in;
                    S dot(0);
                    for (int k = 0; k < n; ++k) dot += out->grad[base + k * inner] * out->data[base + k * inner];
                    for (int k = 0; k < n; ++k)
                        x->grad[base + k * inner] +=
                            out->data[base + k * inner] * (out->grad[base + k * inner] - dot);
                }
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> global_avg_pool(Tape<S>& tape, const TensorPtr<S>& x) {
    detail::require(x->rank() == 4, "global_avg_pool: input must be [B,C,H,W]");
    const int B = x->dim(0), C = x->dim(1);
    const int64_t hw = static_cast<int64_t>(x->dim(2)) * x->dim(3);
    detail::require(hw >= 1, "global_avg_pool: empty spatial extent");

    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>({B, C}, rg);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const S* p = x->data.data() + (static_cast<int64_t>(b) * C + c) * hw;
            S acc(0);
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            out->at2(b, c) = acc / static_cast<S>(hw);
        }
    if (rg) {
        tape.record(out, [x, out, B, C, hw]() {
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const S g = out->grad[static_cast<size_t>(static_cast<int64_t>(b) * C + c)] / static_cast<S>(hw);
                    S* gp = x->grad.data() + (static_cast<int64_t>(b) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) gp[i] += g;
                }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> sum_all(Tape<S>& tape, const TensorPtr<S>& x) {
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>({1}, rg);
    S acc(0);
    for (const S v : x->data) acc += v;
    out->data[0] = acc;
    if (rg) {
        tape.record(out, [x, out]() {
            const S g = out->grad[0];
            for (auto& gv : x->grad) gv += g;
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> mean_all(Tape<S>& tape, const TensorPtr<S>& x) {
    const S inv = S(1) / static_cast<S>(x->numel());
    return mul_scalar(tape, sum_all(tape, x), inv);
}

// Column means of a [B,E] matrix -> [E].
template <typename S>
TensorPtr<S> mean_rows(Tape<S>& tape, const TensorPtr<S>& x) {
    detail::require(x->rank() == 2, "mean_rows: input must be [B,E]");
    const int B = x->dim(0), E = x->dim(1);
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>({E}, rg);
    for (int e = 0; e < E; ++e) {
        S acc(0);
        for (int b = 0; b < B; ++b) acc += x->at2(b, e);
        out->data[static_cast<size_t>(e)] = acc / static_cast<S>(B);
    }
    if (rg) {
        tape.record(out, [x, out, B, E]() {
            for (int e = 0; e < E; ++e) {
                const S g = out->grad[static_cast<size_t>(e)] / static_cast<S>(B);
                for (int b = 0; b < B; ++b) x->grad[static_cast<size_t>(static_cast<int64_t>(b) * E + e)] += g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Views and gathers
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> reshape(Tape<S>& tape, const TensorPtr<S>& x, std::vector<int> shape) {
    detail::require(detail::numel_of(shape) == x->numel(),
                    "reshape: " + detail::shape_str(x->shape) + " -> " + detail::shape_str(shape) +
                        " changes element count");
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>(std::move(shape), rg);
    out->data = x->data;
    if (rg) {
        tape.record(out, [x, out]() {
            const int64_t n = x->numel();
            for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> select_column(Tape<S>& tape, const TensorPtr<S>& x, int col) {
    detail::require(x->rank() == 2, "select_column: input must be [B,E]");
    detail::require(col >= 0 && col < x->dim(1), "select_column: column out of range");
    const int B = x->dim(0), E = x->dim(1);
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>({B}, rg);
    for (int b = 0; b < B; ++b) out->data[static_cast<size_t>(b)] = x->at2(b, col);
    if (rg) {
        tape.record(out, [x, out, B, E, col]() {
            for (int b = 0; b < B; ++b)
                x->grad[static_cast<size_t>(static_cast<int64_t>(b) * E + col)] += out->grad[static_cast<size_t>(b)];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> select_index(Tape<S>& tape, const TensorPtr<S>& x, int64_t i) {
    detail::require(i >= 0 && i < x->numel(), "select_index: index out of range");
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>({1}, rg);
    out->data[0] = x->data[static_cast<size_t>(i)];
    if (rg) {
        tape.record(out, [x, out, i]() { x->grad[static_cast<size_t>(i)] += out->grad[0]; });
    }
    return out;
}

// Scales each batch slice x[b, ...] by s[b].
template <typename S>
TensorPtr<S> batch_scale(Tape<S>& tape, const TensorPtr<S>& x, const TensorPtr<S>& s) {
    detail::require(x->rank() >= 1 && s->rank() == 1 && s->dim(0) == x->dim(0),
                    "batch_scale: scale must be [B] matching the batch dimension");
    const int B = x->dim(0);
    const int64_t per = x->numel() / B;
    bool rg = detail::any_grad(tape, {x, s});
    auto out = tensor_zeros<S>(x->shape, rg);
    for (int b = 0; b < B; ++b) {
        const S w = s->data[static_cast<size_t>(b)];
        const S* xp = x->data.data() + b * per;
        S* op = out->data.data() + b * per;
        for (int64_t i = 0; i < per; ++i) op[i] = xp[i] * w;
    }
    if (rg) {
        tape.record(out, [x, s, out, B, per]() {
            for (int b = 0; b < B; ++b) {
                const int64_t off = b * per;
                if (x->requires_grad) {
                    const S w = s->data[static_cast<size_t>(b)];
                    for (int64_t i = 0; i < per; ++i) x->grad[off + i] += out->grad[off + i] * w;
                }
                if (s->requires_grad) {
                    S acc(0);
                    for (int64_t i = 0; i < per; ++i) acc += out->grad[off + i] * x->data[off + i];
                    s->grad[static_cast<size_t>(b)] += acc;
                }
            }
        });
    }
    return out;
}

// Stacks rank-1 vectors of equal length into a [R,C] matrix.
template <typename S>
TensorPtr<S> stack_rows(Tape<S>& tape, const std::vector<TensorPtr<S>>& rows) {
    detail::require(!rows.empty(), "stack_rows: empty row list");
    const int C = static_cast<int>(rows.front()->numel());
    bool rg = false;
    for (const auto& r : rows) {
        detail::require(r->rank() == 1 && r->dim(0) == C, "stack_rows: rows must all be [C]");
        rg = rg || (tape.enabled() && r->requires_grad);
    }
    const int R = static_cast<int>(rows.size());
    auto out = tensor_zeros<S>({R, C}, rg);
    for (int r = 0; r < R; ++r)
        std::copy_n(rows[static_cast<size_t>(r)]->data.data(), C, out->data.data() + static_cast<int64_t>(r) * C);
    if (rg) {
        tape.record(out, [rows, out, R, C]() {
            for (int r = 0; r < R; ++r) {
                const auto& row = rows[static_cast<size_t>(r)];
                if (!row->requires_grad) continue;
                const S* go = out->grad.data() + static_cast<int64_t>(r) * C;
                for (int c = 0; c < C; ++c) row->grad[static_cast<size_t>(c)] += go[c];
            }
        });
    }
    return out;
}

// Extracts the channel vector at one spatial cell: [B,C,H,W] -> [C].
template <typename S>
TensorPtr<S> gather_cell(Tape<S>& tape, const TensorPtr<S>& x, int b, int row, int col) {
    detail::require(x->rank() == 4, "gather_cell: input must be [B,C,H,W]");
    detail::require(b >= 0 && b < x->dim(0) && row >= 0 && row < x->dim(2) && col >= 0 && col < x->dim(3),
                    "gather_cell: cell out of range");
    const int C = x->dim(1), H = x->dim(2), W = x->dim(3);
    bool rg = detail::any_grad(tape, {x});
    auto out = tensor_zeros<S>({C}, rg);
    for (int c = 0; c < C; ++c) out->data[static_cast<size_t>(c)] = x->at4(b, c, row, col);
    if (rg) {
        tape.record(out, [x, out, b, row, col, C, H, W]() {
            for (int c = 0; c < C; ++c)
                x->grad[static_cast<size_t>(((static_cast<int64_t>(b) * C + c) * H + row) * W + col)] +=
                    out->grad[static_cast<size_t>(c)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fused loss kernels
// ---------------------------------------------------------------------------

// Expectation over bin indices: [R,N] row-normalized probabilities -> [R],
// out[r] = sum_k k * p[r,k].
template <typename S>
TensorPtr<S> dfl_expect(Tape<S>& tape, const TensorPtr<S>& probs) {
    detail::require(probs->rank() == 2, "dfl_expect: input must be [R,N]");
    const int R = probs->dim(0), N = probs->dim(1);
    bool rg = detail::any_grad(tape, {probs});
    auto out = tensor_zeros<S>({R}, rg);
    for (int r = 0; r < R; ++r) {
        S acc(0);
        for (int k = 0; k < N; ++k) acc += static_cast<S>(k) * probs->at2(r, k);
        out->data[static_cast<size_t>(r)] = acc;
    }
    if (rg) {
        tape.record(out, [probs, out, R, N]() {
            for (int r = 0; r < R; ++r) {
                const S g = out->grad[static_cast<size_t>(r)];
                for (int k = 0; k < N; ++k)
                    probs->grad[static_cast<size_t>(static_cast<int64_t>(r) * N + k)] += static_cast<S>(k) * g;
            }
        });
    }
    return out;
}

// Distribution focal loss at one cell. Logits are the 4*N box channels in
// side order (left, top, bottom, right); targets are continuous bin
// coordinates in [0, N-1]. Each side spreads its target over the two
// enclosing integer bins and the four side losses are averaged.
template <typename S>
TensorPtr<S> dfl_cell_loss(Tape<S>& tape, const TensorPtr<S>& cell_logits, const std::array<S, 4>& targets, int bins) {
    detail::require(cell_logits->numel() == static_cast<int64_t>(4) * bins,
                    "dfl_cell_loss: expected 4*" + std::to_string(bins) + " logits");
    detail::require(bins >= 2, "dfl_cell_loss: need at least two bins");
    for (const S t : targets)
        if (!(t >= S(0) && t <= static_cast<S>(bins - 1)))
            throw shape_error("dfl_cell_loss: target outside [0, N-1]");

    bool rg = detail::any_grad(tape, {cell_logits});
    auto out = tensor_zeros<S>({1}, rg);

    // Row softmax and soft-target cross entropy, stored for the backward rule.
    auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(4) * bins);
    auto q = std::make_shared<std::vector<S>>(static_cast<size_t>(4) * bins, S(0));
    S total(0);
    for (int r = 0; r < 4; ++r) {
        const S* lr = cell_logits->data.data() + static_cast<int64_t>(r) * bins;
        S* pr = probs->data() + static_cast<int64_t>(r) * bins;
        S mx = lr[0];
        for (int k = 1; k < bins; ++k) mx = std::max(mx, lr[k]);
        S sum(0);
        for (int k = 0; k < bins; ++k) {
            pr[k] = std::exp(lr[k] - mx);
            sum += pr[k];
        }
        for (int k = 0; k < bins; ++k) pr[k] /= sum;

        const S t = targets[static_cast<size_t>(r)];
        int lo = std::min(static_cast<int>(std::floor(static_cast<double>(t))), bins - 2);
        const int hi = lo + 1;
        const S wlo = static_cast<S>(hi) - t;
        const S whi = t - static_cast<S>(lo);
        S* qr = q->data() + static_cast<int64_t>(r) * bins;
        qr[lo] = wlo;
        qr[hi] = whi;
        if (wlo > S(0)) total -= wlo * std::log(pr[lo]);
        if (whi > S(0)) total -= whi * std::log(pr[hi]);
    }
    out->data[0] = total / S(4);

    if (rg) {
        tape.record(out, [cell_logits, out, probs, q, bins]() {
            const S g = out->grad[0] / S(4);
            for (int64_t i = 0; i < static_cast<int64_t>(4) * bins; ++i)
                cell_logits->grad[i] += g * ((*probs)[i] - (*q)[i]);
        });
    }
    return out;
}

// Numerically stable sum of binary cross entropies on sigmoid logits against
// constant targets. Targets never receive gradient.
template <typename S>
TensorPtr<S> bce_logits_sum(Tape<S>& tape, const TensorPtr<S>& logits, const TensorPtr<S>& targets) {
    detail::require(logits->shape == targets->shape, "bce_logits_sum: logit/target shapes differ");
    bool rg = detail::any_grad(tape, {logits});
    auto out = tensor_zeros<S>({1}, rg);
    const int64_t n = logits->numel();
    S acc(0);
    for (int64_t i = 0; i < n; ++i) {
        const S x = logits->data[i];
        const S t = targets->data[i];
        acc += std::max(x, S(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    out->data[0] = acc;
    if (rg) {
        tape.record(out, [logits, targets, out, n]() {
            const S g = out->grad[0];
            for (int64_t i = 0; i < n; ++i) {
                const S x = logits->data[i];
                const S sig = S(1) / (S(1) + std::exp(-x));
                logits->grad[i] += g * (sig - targets->data[i]);
            }
        });
    }
    return out;
}

}  // namespace moedet
