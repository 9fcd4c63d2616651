#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pointsplat {

struct Shape {
    std::vector<int> dims;

    Shape() = default;
    Shape(std::initializer_list<int> d) : dims(d) {}
    explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

    int ndim() const { return static_cast<int>(dims.size()); }
    int64_t numel() const {
        int64_t n = 1;
        for (int d : dims) n *= d;
        return n;
    }
    bool operator==(const Shape& o) const = default;
    std::string str() const {
        std::ostringstream os;
        os << '(';
        for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
        os << ')';
        return os.str();
    }
};

namespace detail {
inline void shape_check(bool ok, const std::string& op, const Shape& a, const Shape& b) {
    if (!ok) throw std::invalid_argument(op + ": shape mismatch " + a.str() + " vs " + b.str());
}
inline void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
    if (axis < 0 || axis >= s.ndim()) throw std::invalid_argument("axis out of range for " + s.str());
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= s.dims[i];
    n = s.dims[axis];
    inner = 1;
    for (int i = axis + 1; i < s.ndim(); ++i) inner *= s.dims[i];
}
}  // namespace detail

template <class T>
class Tape;

template <class T>
struct TensorT {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Shape& shape() const { return tape->nodes[id].shape; }
    std::span<const T> val() const { return tape->nodes[id].val; }
    bool defined() const { return tape != nullptr; }
};

/// Reverse-mode tape over dense row-major tensors (up to 4 dims). Nodes are
/// appended in topological order; backward walks them once in reverse.
/// Instantiate with float for training and double for shadow verification.
template <class T>
class Tape {
public:
    struct Node {
        Shape shape;
        std::vector<T> val;
        std::vector<T> grad;  // allocated lazily during backward
        bool requires_grad = false;
        std::function<void()> back;
    };

    TensorT<T> leaf(Shape s, std::vector<T> v) { return make(std::move(s), std::move(v), true, nullptr); }
    TensorT<T> constant(Shape s, std::vector<T> v) { return make(std::move(s), std::move(v), false, nullptr); }

    TensorT<T> make(Shape s, std::vector<T> v, bool rg, std::function<void()> back) {
        if (static_cast<int64_t>(v.size()) != s.numel())
            throw std::invalid_argument("tensor data length does not match shape " + s.str());
        Node n;
        n.shape = std::move(s);
        n.val = std::move(v);
        n.requires_grad = rg;
        n.back = std::move(back);
        nodes.push_back(std::move(n));
        return TensorT<T>{this, static_cast<int>(nodes.size()) - 1};
    }

    std::vector<T>& gbuf(int id) {
        Node& n = nodes[id];
        if (n.grad.empty()) n.grad.assign(n.val.size(), T(0));
        return n.grad;
    }

    void backward(TensorT<T> loss) {
        if (backward_done) throw std::logic_error("backward already ran on this tape");
        if (loss.tape != this) throw std::invalid_argument("loss belongs to another tape");
        if (nodes[loss.id].shape.numel() != 1)
            throw std::invalid_argument("backward requires a scalar loss, got " +
                                        nodes[loss.id].shape.str());
        backward_done = true;
        gbuf(loss.id)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[i];
            if (n.back && !n.grad.empty()) n.back();
        }
    }

    std::span<const T> grad(TensorT<T> t) const {
        const Node& n = nodes[t.id];
        if (n.grad.empty()) throw std::logic_error("no gradient recorded for this tensor");
        return n.grad;
    }

    std::vector<Node> nodes;
    bool backward_done = false;
};

namespace ops {

template <class T>
Tape<T>& same_tape(TensorT<T> a, TensorT<T> b) {
    if (a.tape != b.tape) throw std::invalid_argument("tensors belong to different tapes");
    return *a.tape;
}

template <class T, class Fwd, class Bwd>
TensorT<T> unary(TensorT<T> a, Fwd f, Bwd makeback) {
    Tape<T>& tp = *a.tape;
    std::vector<T> out(a.val().begin(), a.val().end());
    for (T& v : out) v = f(v);
    bool rg = tp.nodes[a.id].requires_grad;
    std::function<void()> back;
    if (rg) back = makeback(&tp, a.id);
    return tp.make(a.shape(), std::move(out), rg, std::move(back));
}

template <class T>
TensorT<T> add(TensorT<T> a, TensorT<T> b) {
    Tape<T>& tp = same_tape<T>(a, b);
    detail::shape_check(a.shape() == b.shape(), "add", a.shape(), b.shape());
    std::vector<T> out(a.val().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] + b.val()[i];
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[b.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = b.id, self, rga, rgb]() {
            const auto& g = tp.nodes[self].grad;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (rgb) {
                auto& gb = tp.gbuf(bi);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    return tp.make(a.shape(), std::move(out), rga || rgb, std::move(back));
}

template <class T>
TensorT<T> sub(TensorT<T> a, TensorT<T> b) {
    Tape<T>& tp = same_tape<T>(a, b);
    detail::shape_check(a.shape() == b.shape(), "sub", a.shape(), b.shape());
    std::vector<T> out(a.val().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] - b.val()[i];
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[b.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = b.id, self, rga, rgb]() {
            const auto& g = tp.nodes[self].grad;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (rgb) {
                auto& gb = tp.gbuf(bi);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    return tp.make(a.shape(), std::move(out), rga || rgb, std::move(back));
}

template <class T>
TensorT<T> mul(TensorT<T> a, TensorT<T> b) {
    Tape<T>& tp = same_tape<T>(a, b);
    detail::shape_check(a.shape() == b.shape(), "mul", a.shape(), b.shape());
    std::vector<T> out(a.val().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * b.val()[i];
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[b.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = b.id, self, rga, rgb]() {
            const auto& g = tp.nodes[self].grad;
            const auto& av = tp.nodes[ai].val;
            const auto& bv = tp.nodes[bi].val;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (rgb) {
                auto& gb = tp.gbuf(bi);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        };
    return tp.make(a.shape(), std::move(out), rga || rgb, std::move(back));
}

template <class T>
TensorT<T> div(TensorT<T> a, TensorT<T> b) {
    Tape<T>& tp = same_tape<T>(a, b);
    detail::shape_check(a.shape() == b.shape(), "div", a.shape(), b.shape());
    std::vector<T> out(a.val().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] / b.val()[i];
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[b.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = b.id, self, rga, rgb]() {
            const auto& g = tp.nodes[self].grad;
            const auto& av = tp.nodes[ai].val;
            const auto& bv = tp.nodes[bi].val;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
            }
            if (rgb) {
                auto& gb = tp.gbuf(bi);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
            }
        };
    return tp.make(a.shape(), std::move(out), rga || rgb, std::move(back));
}

template <class T>
TensorT<T> add_scalar(TensorT<T> a, T c) {
    return unary<T>(
        a, [c](T v) { return v + c; },
        [](Tape<T>* tp, int ai) {
            int self = static_cast<int>(tp->nodes.size());
            return [tp, ai, self]() {
                const auto& g = tp->nodes[self].grad;
                auto& ga = tp->gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            };
        });
}

template <class T>
TensorT<T> mul_scalar(TensorT<T> a, T c) {
    return unary<T>(
        a, [c](T v) { return v * c; },
        [c](Tape<T>* tp, int ai) {
            int self = static_cast<int>(tp->nodes.size());
            return [tp, ai, self, c]() {
                const auto& g = tp->nodes[self].grad;
                auto& ga = tp->gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            };
        });
}

template <class T>
TensorT<T> relu(TensorT<T> a) {
    return unary<T>(
        a, [](T v) { return v > T(0) ? v : T(0); },
        [](Tape<T>* tp, int ai) {
            int self = static_cast<int>(tp->nodes.size());
            return [tp, ai, self]() {
                const auto& g = tp->nodes[self].grad;
                const auto& av = tp->nodes[ai].val;
                auto& ga = tp->gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i)
                    if (av[i] > T(0)) ga[i] += g[i];
            };
        });
}

template <class T>
TensorT<T> sigmoid(TensorT<T> a) {
    return unary<T>(
        a, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](Tape<T>* tp, int ai) {
            int self = static_cast<int>(tp->nodes.size());
            return [tp, ai, self]() {
                const auto& g = tp->nodes[self].grad;
                const auto& ov = tp->nodes[self].val;
                auto& ga = tp->gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i] * (T(1) - ov[i]);
            };
        });
}

template <class T>
TensorT<T> exp(TensorT<T> a) {
    return unary<T>(
        a, [](T v) { return std::exp(v); },
        [](Tape<T>* tp, int ai) {
            int self = static_cast<int>(tp->nodes.size());
            return [tp, ai, self]() {
                const auto& g = tp->nodes[self].grad;
                const auto& ov = tp->nodes[self].val;
                auto& ga = tp->gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
            };
        });
}

template <class T>
TensorT<T> abs(TensorT<T> a) {
    return unary<T>(
        a, [](T v) { return v < T(0) ? -v : v; },
        [](Tape<T>* tp, int ai) {
            int self = static_cast<int>(tp->nodes.size());
            return [tp, ai, self]() {
                const auto& g = tp->nodes[self].grad;
                const auto& av = tp->nodes[ai].val;
                auto& ga = tp->gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i)
                    ga[i] += av[i] > T(0) ? g[i] : (av[i] < T(0) ? -g[i] : T(0));
            };
        });
}

template <class T>
TensorT<T> matmul(TensorT<T> a, TensorT<T> b) {
    Tape<T>& tp = same_tape<T>(a, b);
    if (a.shape().ndim() != 2 || b.shape().ndim() != 2 || a.shape().dims[1] != b.shape().dims[0])
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape().str() + " x " +
                                    b.shape().str());
    int m = a.shape().dims[0], k = a.shape().dims[1], n = b.shape().dims[1];
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    {
        const T* av = a.val().data();
        const T* bv = b.val().data();
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                T aik = av[static_cast<size_t>(i) * k + kk];
                if (aik == T(0)) continue;
                const T* brow = bv + static_cast<size_t>(kk) * n;
                T* orow = out.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
    }
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[b.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = b.id, self, rga, rgb, m, k, n]() {
            const auto& g = tp.nodes[self].grad;
            const auto& av = tp.nodes[ai].val;
            const auto& bv = tp.nodes[bi].val;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        T acc = 0;
                        for (int j = 0; j < n; ++j)
                            acc += g[static_cast<size_t>(i) * n + j] * bv[static_cast<size_t>(kk) * n + j];
                        ga[static_cast<size_t>(i) * k + kk] += acc;
                    }
            }
            if (rgb) {
                auto& gb = tp.gbuf(bi);
                for (int kk = 0; kk < k; ++kk)
                    for (int j = 0; j < n; ++j) {
                        T acc = 0;
                        for (int i = 0; i < m; ++i)
                            acc += av[static_cast<size_t>(i) * k + kk] * g[static_cast<size_t>(i) * n + j];
                        gb[static_cast<size_t>(kk) * n + j] += acc;
                    }
            }
        };
    return tp.make(Shape{m, n}, std::move(out), rga || rgb, std::move(back));
}

/// (..., C) + (C), the one broadcast the engine supports.
template <class T>
TensorT<T> add_bias(TensorT<T> a, TensorT<T> bias) {
    Tape<T>& tp = same_tape<T>(a, bias);
    int c = bias.shape().numel() == 0 ? -1 : bias.shape().dims.back();
    detail::shape_check(bias.shape().ndim() == 1 && a.shape().dims.back() == c, "add_bias",
                        a.shape(), bias.shape());
    std::vector<T> out(a.val().begin(), a.val().end());
    int64_t rows = a.shape().numel() / c;
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(r) * c + j] += bias.val()[j];
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[bias.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = bias.id, self, rga, rgb, rows, c]() {
            const auto& g = tp.nodes[self].grad;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (rgb) {
                auto& gb = tp.gbuf(bi);
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < c; ++j) gb[j] += g[static_cast<size_t>(r) * c + j];
            }
        };
    return tp.make(a.shape(), std::move(out), rga || rgb, std::move(back));
}

/// (M, C) scaled per row by s with shape (M) or (M, 1).
template <class T>
TensorT<T> scale_rows(TensorT<T> a, TensorT<T> s) {
    Tape<T>& tp = same_tape<T>(a, s);
    int m = a.shape().dims[0];
    detail::shape_check(a.shape().ndim() == 2 && s.shape().numel() == m, "scale_rows", a.shape(),
                        s.shape());
    int c = a.shape().dims[1];
    std::vector<T> out(a.val().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = a.val()[static_cast<size_t>(i) * c + j] * s.val()[i];
    bool rga = tp.nodes[a.id].requires_grad, rgs = tp.nodes[s.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgs)
        back = [&tp, ai = a.id, si = s.id, self, rga, rgs, m, c]() {
            const auto& g = tp.nodes[self].grad;
            const auto& av = tp.nodes[ai].val;
            const auto& sv = tp.nodes[si].val;
            if (rga) {
                auto& ga = tp.gbuf(ai);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < c; ++j)
                        ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(i) * c + j] * sv[i];
            }
            if (rgs) {
                auto& gs = tp.gbuf(si);
                for (int i = 0; i < m; ++i) {
                    T acc = 0;
                    for (int j = 0; j < c; ++j)
                        acc += g[static_cast<size_t>(i) * c + j] * av[static_cast<size_t>(i) * c + j];
                    gs[i] += acc;
                }
            }
        };
    return tp.make(a.shape(), std::move(out), rga || rgs, std::move(back));
}

/// (M, H) -> (M, H*d): each column repeated d times, head-major.
template <class T>
TensorT<T> repeat_cols(TensorT<T> a, int d) {
    Tape<T>& tp = *a.tape;
    if (a.shape().ndim() != 2 || d < 1)
        throw std::invalid_argument("repeat_cols: need a 2-d input, got " + a.shape().str());
    int m = a.shape().dims[0], h = a.shape().dims[1];
    std::vector<T> out(static_cast<size_t>(m) * h * d);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < h; ++j) {
            T v = a.val()[static_cast<size_t>(i) * h + j];
            for (int t = 0; t < d; ++t) out[(static_cast<size_t>(i) * h + j) * d + t] = v;
        }
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, m, h, d]() {
            const auto& g = tp.nodes[self].grad;
            auto& ga = tp.gbuf(ai);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < h; ++j) {
                    T acc = 0;
                    for (int t = 0; t < d; ++t) acc += g[(static_cast<size_t>(i) * h + j) * d + t];
                    ga[static_cast<size_t>(i) * h + j] += acc;
                }
        };
    return tp.make(Shape{m, h * d}, std::move(out), rg, std::move(back));
}

template <class T>
TensorT<T> reshape(TensorT<T> a, Shape s) {
    Tape<T>& tp = *a.tape;
    if (s.numel() != a.shape().numel())
        throw std::invalid_argument("reshape: element count mismatch " + a.shape().str() + " -> " +
                                    s.str());
    std::vector<T> out(a.val().begin(), a.val().end());
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self]() {
            const auto& g = tp.nodes[self].grad;
            auto& ga = tp.gbuf(ai);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    return tp.make(std::move(s), std::move(out), rg, std::move(back));
}

template <class T>
TensorT<T> concat(TensorT<T> a, TensorT<T> b, int axis) {
    Tape<T>& tp = same_tape<T>(a, b);
    if (a.shape().ndim() != b.shape().ndim())
        detail::shape_check(false, "concat", a.shape(), b.shape());
    for (int i = 0; i < a.shape().ndim(); ++i)
        if (i != axis)
            detail::shape_check(a.shape().dims[i] == b.shape().dims[i], "concat", a.shape(), b.shape());
    int64_t outer, na, inner;
    detail::axis_split(a.shape(), axis, outer, na, inner);
    int64_t nb = b.shape().dims[axis];
    Shape os = a.shape();
    os.dims[axis] = static_cast<int>(na + nb);
    std::vector<T> out(static_cast<size_t>(os.numel()));
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(a.val().data() + o * na * inner, na * inner,
                    out.data() + o * (na + nb) * inner);
        std::copy_n(b.val().data() + o * nb * inner, nb * inner,
                    out.data() + o * (na + nb) * inner + na * inner);
    }
    bool rga = tp.nodes[a.id].requires_grad, rgb = tp.nodes[b.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rga || rgb)
        back = [&tp, ai = a.id, bi = b.id, self, rga, rgb, outer, na, nb, inner]() {
            const auto& g = tp.nodes[self].grad;
            for (int64_t o = 0; o < outer; ++o) {
                if (rga) {
                    auto& ga = tp.gbuf(ai);
                    for (int64_t i = 0; i < na * inner; ++i)
                        ga[o * na * inner + i] += g[o * (na + nb) * inner + i];
                }
                if (rgb) {
                    auto& gb = tp.gbuf(bi);
                    for (int64_t i = 0; i < nb * inner; ++i)
                        gb[o * nb * inner + i] += g[o * (na + nb) * inner + na * inner + i];
                }
            }
        };
    return tp.make(std::move(os), std::move(out), rga || rgb, std::move(back));
}

template <class T>
TensorT<T> slice(TensorT<T> a, int axis, int start, int len) {
    Tape<T>& tp = *a.tape;
    int64_t outer, n, inner;
    detail::axis_split(a.shape(), axis, outer, n, inner);
    if (start < 0 || len < 1 || start + len > n)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of axis size " +
                                    std::to_string(n));
    Shape os = a.shape();
    os.dims[axis] = len;
    std::vector<T> out(static_cast<size_t>(os.numel()));
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(a.val().data() + (o * n + start) * inner, static_cast<int64_t>(len) * inner,
                    out.data() + o * len * inner);
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, outer, n, inner, start, len]() {
            const auto& g = tp.nodes[self].grad;
            auto& ga = tp.gbuf(ai);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i)
                    ga[(o * n + start) * inner + i] += g[o * len * inner + i];
        };
    return tp.make(std::move(os), std::move(out), rg, std::move(back));
}

/// Rows of a 2-d tensor by index; duplicate indices allowed.
template <class T>
TensorT<T> gather_rows(TensorT<T> a, std::vector<int> idx) {
    Tape<T>& tp = *a.tape;
    if (a.shape().ndim() != 2)
        throw std::invalid_argument("gather_rows: need a 2-d input, got " + a.shape().str());
    int rows = a.shape().dims[0], c = a.shape().dims[1];
    for (int i : idx)
        if (i < 0 || i >= rows) throw std::invalid_argument("gather_rows: index out of range");
    std::vector<T> out(idx.size() * static_cast<size_t>(c));
    for (size_t m = 0; m < idx.size(); ++m)
        std::copy_n(a.val().data() + static_cast<size_t>(idx[m]) * c, c, out.data() + m * c);
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, idx, c]() {
            const auto& g = tp.nodes[self].grad;
            auto& ga = tp.gbuf(ai);
            for (size_t m = 0; m < idx.size(); ++m)
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(idx[m]) * c + j] += g[m * static_cast<size_t>(c) + j];
        };
    return tp.make(Shape{static_cast<int>(idx.size()), c}, std::move(out), rg, std::move(back));
}

/// out[idx[m], :] += a[m, :]; out has out_rows rows.
template <class T>
TensorT<T> scatter_add_rows(TensorT<T> a, std::vector<int> idx, int out_rows) {
    Tape<T>& tp = *a.tape;
    if (a.shape().ndim() != 2 || static_cast<size_t>(a.shape().dims[0]) != idx.size())
        throw std::invalid_argument("scatter_add_rows: rows/index mismatch for " + a.shape().str());
    int c = a.shape().dims[1];
    for (int i : idx)
        if (i < 0 || i >= out_rows) throw std::invalid_argument("scatter_add_rows: index out of range");
    std::vector<T> out(static_cast<size_t>(out_rows) * c, T(0));
    for (size_t m = 0; m < idx.size(); ++m)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(idx[m]) * c + j] += a.val()[m * static_cast<size_t>(c) + j];
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, idx, c]() {
            const auto& g = tp.nodes[self].grad;
            auto& ga = tp.gbuf(ai);
            for (size_t m = 0; m < idx.size(); ++m)
                for (int j = 0; j < c; ++j)
                    ga[m * static_cast<size_t>(c) + j] += g[static_cast<size_t>(idx[m]) * c + j];
        };
    return tp.make(Shape{out_rows, c}, std::move(out), rg, std::move(back));
}

template <class T>
TensorT<T> softmax(TensorT<T> a, int axis) {
    Tape<T>& tp = *a.tape;
    int64_t outer, n, inner;
    detail::axis_split(a.shape(), axis, outer, n, inner);
    std::vector<T> out(a.val().size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const T* src = a.val().data() + o * n * inner + in;
            T* dst = out.data() + o * n * inner + in;
            T mx = src[0];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i * inner]);
            T sum = 0;
            for (int64_t i = 0; i < n; ++i) {
                T e = std::exp(src[i * inner] - mx);
                dst[i * inner] = e;
                sum += e;
            }
            for (int64_t i = 0; i < n; ++i) dst[i * inner] /= sum;
        }
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, outer, n, inner]() {
            const auto& g = tp.nodes[self].grad;
            const auto& y = tp.nodes[self].val;
            auto& ga = tp.gbuf(ai);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * n * inner + in;
                    T dot = 0;
                    for (int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (int64_t i = 0; i < n; ++i)
                        ga[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
                }
        };
    return tp.make(a.shape(), std::move(out), rg, std::move(back));
}

/// Layer normalization over the last axis with affine gain/bias.
template <class T>
TensorT<T> layer_norm(TensorT<T> x, TensorT<T> gain, TensorT<T> bias, T eps = T(1e-5)) {
    Tape<T>& tp = same_tape<T>(x, gain);
    same_tape<T>(x, bias);
    int d = x.shape().dims.back();
    detail::shape_check(gain.shape().ndim() == 1 && gain.shape().dims[0] == d, "layer_norm",
                        x.shape(), gain.shape());
    detail::shape_check(bias.shape().ndim() == 1 && bias.shape().dims[0] == d, "layer_norm",
                        x.shape(), bias.shape());
    int64_t rows = x.shape().numel() / d;
    std::vector<T> out(x.val().size());
    std::vector<T> xhat(x.val().size());
    std::vector<T> inv_sigma(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = x.val().data() + r * d;
        T mean = 0;
        for (int j = 0; j < d; ++j) mean += src[j];
        mean /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
        var /= T(d);
        T is = T(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(r)] = is;
        for (int j = 0; j < d; ++j) {
            T xh = (src[j] - mean) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = gain.val()[j] * xh + bias.val()[j];
        }
    }
    bool rgx = tp.nodes[x.id].requires_grad;
    bool rgg = tp.nodes[gain.id].requires_grad, rgb = tp.nodes[bias.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rgx || rgg || rgb)
        back = [&tp, xi = x.id, gi = gain.id, bi = bias.id, self, rgx, rgg, rgb, rows, d,
                xh = std::move(xhat), is = std::move(inv_sigma)]() {
            const auto& g = tp.nodes[self].grad;
            const auto& gv = tp.nodes[gi].val;
            for (int64_t r = 0; r < rows; ++r) {
                const T* grow = g.data() + r * d;
                const T* xrow = xh.data() + r * d;
                if (rgx) {
                    auto& gx = tp.gbuf(xi);
                    T sum_gy = 0, sum_gyx = 0;
                    for (int j = 0; j < d; ++j) {
                        T gy = grow[j] * gv[j];
                        sum_gy += gy;
                        sum_gyx += gy * xrow[j];
                    }
                    T s = is[static_cast<size_t>(r)];
                    for (int j = 0; j < d; ++j) {
                        T gy = grow[j] * gv[j];
                        gx[r * d + j] += s * (gy - sum_gy / T(d) - xrow[j] * sum_gyx / T(d));
                    }
                }
                if (rgg) {
                    auto& gg = tp.gbuf(gi);
                    for (int j = 0; j < d; ++j) gg[j] += grow[j] * xrow[j];
                }
                if (rgb) {
                    auto& gb = tp.gbuf(bi);
                    for (int j = 0; j < d; ++j) gb[j] += grow[j];
                }
            }
        };
    return tp.make(x.shape(), std::move(out), rgx || rgg || rgb, std::move(back));
}

template <class T>
TensorT<T> sum(TensorT<T> a) {
    Tape<T>& tp = *a.tape;
    T s = 0;
    for (T v : a.val()) s += v;
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self]() {
            T g = tp.nodes[self].grad[0];
            auto& ga = tp.gbuf(ai);
            for (T& v : ga) v += g;
        };
    return tp.make(Shape{1}, {s}, rg, std::move(back));
}

template <class T>
TensorT<T> mean(TensorT<T> a) {
    Tape<T>& tp = *a.tape;
    T s = 0;
    for (T v : a.val()) s += v;
    T inv = T(1) / T(a.val().size());
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, inv]() {
            T g = tp.nodes[self].grad[0] * inv;
            auto& ga = tp.gbuf(ai);
            for (T& v : ga) v += g;
        };
    return tp.make(Shape{1}, {s * inv}, rg, std::move(back));
}

template <class T>
TensorT<T> sum_axis(TensorT<T> a, int axis) {
    Tape<T>& tp = *a.tape;
    int64_t outer, n, inner;
    detail::axis_split(a.shape(), axis, outer, n, inner);
    Shape os;
    for (int i = 0; i < a.shape().ndim(); ++i)
        if (i != axis) os.dims.push_back(a.shape().dims[i]);
    if (os.dims.empty()) os.dims.push_back(1);
    std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t in = 0; in < inner; ++in)
                out[o * inner + in] += a.val()[(o * n + i) * inner + in];
    bool rg = tp.nodes[a.id].requires_grad;
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ai = a.id, self, outer, n, inner]() {
            const auto& g = tp.nodes[self].grad;
            auto& ga = tp.gbuf(ai);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t in = 0; in < inner; ++in)
                        ga[(o * n + i) * inner + in] += g[o * inner + in];
        };
    return tp.make(std::move(os), std::move(out), rg, std::move(back));
}

/// Custom differentiable node: caller supplies the forward map and a backward
/// that fills per-input gradient buffers from the upstream gradient. The
/// rasterizer plugs in through this.
template <class T>
TensorT<T> custom_node(
    Tape<T>& tp, std::vector<TensorT<T>> inputs, Shape out_shape,
    std::function<std::vector<T>(const std::vector<std::span<const T>>&)> forward,
    std::function<void(std::span<const T>, const std::vector<std::span<const T>>&,
                       const std::vector<std::vector<T>*>&)>
        backward) {
    std::vector<std::span<const T>> in_vals;
    bool rg = false;
    for (auto& t : inputs) {
        if (t.tape != &tp) throw std::invalid_argument("custom_node: input from another tape");
        in_vals.push_back(t.val());
        rg = rg || tp.nodes[t.id].requires_grad;
    }
    std::vector<T> out = forward(in_vals);
    std::vector<int> ids;
    for (auto& t : inputs) ids.push_back(t.id);
    int self = static_cast<int>(tp.nodes.size());
    std::function<void()> back;
    if (rg)
        back = [&tp, ids, self, backward]() {
            std::vector<std::span<const T>> vals;
            std::vector<std::vector<T>*> grads;
            for (int id : ids) {
                vals.push_back(std::span<const T>(tp.nodes[id].val));
                grads.push_back(tp.nodes[id].requires_grad ? &tp.gbuf(id) : nullptr);
            }
            backward(std::span<const T>(tp.nodes[self].grad), vals, grads);
        };
    return tp.make(std::move(out_shape), std::move(out), rg, std::move(back));
}

}  // namespace ops
}  // namespace pointsplat
