#include "bevdiff/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace bevdiff {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

thread_local int g_no_grad_depth = 0;
bool g_finite_checks = true;

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("empty shape");
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    }
}

void check_finite(const char* op, const std::vector<float>& data) {
    if (!g_finite_checks) return;
    for (float v : data) {
        if (!std::isfinite(v)) throw NumericalError(std::string(op) + " produced a non-finite value");
    }
}

// Common op plumbing: finite-check the output, wire the tape if any parent
// needs gradients and grad mode is on.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<Tensor> parents, std::function<void(TensorNode&)> bw) {
    check_finite(op, data);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool need = grad_enabled();
    if (need) {
        need = false;
        for (const Tensor& p : parents)
            if (p.defined() && p.requires_grad()) need = true;
    }
    if (need) {
        node->requires_grad = true;
        for (const Tensor& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(bw);
    }
    return Tensor(node);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() : prev_(true) { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

// ---- construction ----

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    validate_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::full(const Shape& shape, float value) {
    validate_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    check_finite("full", node->data);
    return Tensor(node);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data) {
    validate_shape(shape);
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw DimensionError("from_data: " + std::to_string(data.size()) + " values for shape " +
                             shape_str(shape));
    check_finite("from_data", data);
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->data = std::move(data);
    return Tensor(node);
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, float stdev) {
    validate_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->data.resize(static_cast<size_t>(shape_numel(shape)));
    for (float& v : node->data) v = rng.normal() * stdev;
    return Tensor(node);
}

Tensor Tensor::rand_uniform(const Shape& shape, Rng& rng, float lo, float hi) {
    validate_shape(shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->data.resize(static_cast<size_t>(shape_numel(shape)));
    for (float& v : node->data) v = rng.uniform(lo, hi);
    return Tensor(node);
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= rank()) throw DimensionError("dim index out of range");
    return node_->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

const std::vector<float>& Tensor::grad() const {
    if (node_->grad.empty()) throw TrainingError("gradient not allocated; run backward first");
    return node_->grad;
}

Tensor Tensor::detached_copy() const {
    auto node = std::make_shared<TensorNode>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(node);
}

// ---- backward ----

void backward(const Tensor& root) {
    if (root.numel() != 1) throw TrainingError("backward requires a scalar root");
    if (!root.requires_grad()) throw TrainingError("backward on a tensor with no grad path");

    // Iterative post-order DFS over grad-requiring nodes.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0f;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

// ---- elementwise ----

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    require_same_shape(op, a, b);
    const size_t n = a.data().size();
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fwd(a.data()[i], b.data()[i]);
    auto an = a.node(), bn = b.node();
    return make_result(op, a.shape(), std::move(out), {a, b}, [an, bn, bwd](TensorNode& o) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            float da, db;
            bwd(an->data[i], bn->data[i], o.grad[i], da, db);
            if (an->requires_grad) an->grad[i] += da;
            if (bn->requires_grad) bn->grad[i] += db;
        }
    });
}

template <typename Fwd, typename Bwd>
Tensor unary_ew(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
    const size_t n = a.data().size();
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fwd(a.data()[i]);
    auto an = a.node();
    auto on_data = std::make_shared<std::vector<float>>(out);  // some bwds use y
    return make_result(op, a.shape(), std::move(out), {a}, [an, bwd, on_data](TensorNode& o) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            an->grad[i] += o.grad[i] * bwd(an->data[i], (*on_data)[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "add", a, b, [](float x, float y) { return x + y; },
        [](float, float, float g, float& da, float& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "sub", a, b, [](float x, float y) { return x - y; },
        [](float, float, float g, float& da, float& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "mul", a, b, [](float x, float y) { return x * y; },
        [](float x, float y, float g, float& da, float& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor add_scalar(const Tensor& a, float s) {
    return unary_ew(
        "add_scalar", a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& a, float s) {
    return unary_ew(
        "mul_scalar", a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Tensor relu(const Tensor& a) {
    return unary_ew(
        "relu", a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_ew(
        "sigmoid", a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor silu(const Tensor& a) {
    return unary_ew(
        "silu", a,
        [](float x) { return x / (1.0f + std::exp(-x)); },
        [](float x, float) {
            float s = 1.0f / (1.0f + std::exp(-x));
            return s * (1.0f + x * (1.0f - s));
        });
}

Tensor gelu(const Tensor& a) {
    constexpr float kInvSqrt2 = 0.70710678f;
    constexpr float kInvSqrt2Pi = 0.39894228f;
    return unary_ew(
        "gelu", a,
        [](float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); },
        [](float x, float) {
            float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
            float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
            return cdf + x * pdf;
        });
}

Tensor tanh_op(const Tensor& a) {
    return unary_ew(
        "tanh", a, [](float x) { return std::tanh(x); },
        [](float, float y) { return 1.0f - y * y; });
}

Tensor square(const Tensor& a) {
    return unary_ew(
        "square", a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor clamp01(const Tensor& a) {
    return unary_ew(
        "clamp01", a, [](float x) { return x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x); },
        [](float x, float) { return (x >= 0.0f && x <= 1.0f) ? 1.0f : 0.0f; });
}

// ---- reductions ----

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    auto an = a.node();
    return make_result("sum_all", {1}, {static_cast<float>(acc)}, {a}, [an](TensorNode& o) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (float& g : an->grad) g += o.grad[0];
    });
}

Tensor mean_all(const Tensor& a) {
    const float inv_n = 1.0f / static_cast<float>(a.numel());
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    auto an = a.node();
    return make_result("mean_all", {1}, {static_cast<float>(acc * inv_n)}, {a},
                       [an, inv_n](TensorNode& o) {
                           if (!an->requires_grad) return;
                           an->ensure_grad();
                           const float g = o.grad[0] * inv_n;
                           for (float& gi : an->grad) gi += g;
                       });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape("mse", a, b);
    const size_t n = a.data().size();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        acc += d * d;
    }
    const float inv_n = 1.0f / static_cast<float>(n);
    auto an = a.node(), bn = b.node();
    return make_result("mse", {1}, {static_cast<float>(acc / static_cast<double>(n))}, {a, b},
                       [an, bn, inv_n](TensorNode& o) {
                           if (an->requires_grad) an->ensure_grad();
                           if (bn->requires_grad) bn->ensure_grad();
                           const float g = o.grad[0] * 2.0f * inv_n;
                           for (size_t i = 0; i < an->data.size(); ++i) {
                               float d = g * (an->data[i] - bn->data[i]);
                               if (an->requires_grad) an->grad[i] += d;
                               if (bn->requires_grad) bn->grad[i] -= d;
                           }
                       });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
    {
        const float* ap = a.data().data();
        const float* bp = b.data().data();
        float* op = out.data();
        for (int i = 0; i < m; ++i) {
            const float* arow = ap + static_cast<size_t>(i) * k;
            float* orow = op + static_cast<size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                const float av = arow[kk];
                const float* brow = bp + static_cast<size_t>(kk) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    auto an = a.node(), bn = b.node();
    return make_result("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& o) {
        const float* gp = o.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            // dA[i,kk] = sum_j dOut[i,j] * B[kk,j]
            float* dap = an->grad.data();
            const float* bp = bn->data.data();
            for (int i = 0; i < m; ++i) {
                const float* grow = gp + static_cast<size_t>(i) * n;
                float* darow = dap + static_cast<size_t>(i) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const float* brow = bp + static_cast<size_t>(kk) * n;
                    float acc = 0.0f;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    darow[kk] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB[kk,j] = sum_i A[i,kk] * dOut[i,j]
            float* dbp = bn->grad.data();
            const float* ap = an->data.data();
            for (int i = 0; i < m; ++i) {
                const float* arow = ap + static_cast<size_t>(i) * k;
                const float* grow = gp + static_cast<size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const float av = arow[kk];
                    float* dbrow = dbp + static_cast<size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                }
            }
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    const int rows = x.dim(0), d = x.dim(1);
    std::vector<float> out(x.data());
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(r) * d + j] += bias.data()[j];
    auto xn = x.node(), bn = bias.node();
    return make_result("add_bias", x.shape(), std::move(out), {x, bias},
                       [xn, bn, rows, d](TensorNode& o) {
                           if (xn->requires_grad) {
                               xn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
                           }
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (int r = 0; r < rows; ++r)
                                   for (int j = 0; j < d; ++j)
                                       bn->grad[j] += o.grad[static_cast<size_t>(r) * d + j];
                           }
                       });
}

Tensor add_chan_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw DimensionError("add_chan_bias: " + shape_str(x.shape()) + " + " +
                             shape_str(bias.shape()));
    const int B = x.dim(0), c = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    std::vector<float> out(x.data());
    for (int b = 0; b < B; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const float bv = bias.data()[static_cast<size_t>(ch)];
            float* p = out.data() + (static_cast<size_t>(b) * c + ch) * plane;
            for (size_t i = 0; i < plane; ++i) p[i] += bv;
        }
    auto xn = x.node(), bn = bias.node();
    return make_result("add_chan_bias", x.shape(), std::move(out), {x, bias},
                       [xn, bn, B, c, plane](TensorNode& o) {
                           if (xn->requires_grad) {
                               xn->ensure_grad();
                               for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
                           }
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (int b = 0; b < B; ++b)
                                   for (int ch = 0; ch < c; ++ch) {
                                       const float* g =
                                           o.grad.data() + (static_cast<size_t>(b) * c + ch) * plane;
                                       float acc = 0.0f;
                                       for (size_t i = 0; i < plane; ++i) acc += g[i];
                                       bn->grad[static_cast<size_t>(ch)] += acc;
                                   }
                           }
                       });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose expects rank-2");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    auto xn = x.node();
    return make_result("transpose", {n, m}, std::move(out), {x}, [xn, m, n](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                xn->grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(j) * m + i];
    });
}

// ---- shape ----

Tensor reshape(const Tensor& x, const Shape& shape) {
    validate_shape(shape);
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<float> out(x.data());
    auto xn = x.node();
    return make_result("reshape", shape, std::move(out), {x}, [xn](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    });
}

Tensor select_row(const Tensor& table, int row) {
    if (table.rank() != 2) throw DimensionError("select_row expects rank-2 table");
    const int rows = table.dim(0), d = table.dim(1);
    if (row < 0 || row >= rows) throw DimensionError("select_row index out of range");
    std::vector<float> out(table.data().begin() + static_cast<size_t>(row) * d,
                           table.data().begin() + static_cast<size_t>(row + 1) * d);
    auto tn = table.node();
    return make_result("select_row", {1, d}, std::move(out), {table}, [tn, row, d](TensorNode& o) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (int j = 0; j < d; ++j) tn->grad[static_cast<size_t>(row) * d + j] += o.grad[j];
    });
}

Tensor repeat_rows(const Tensor& x, int times) {
    if (x.rank() != 2 || times <= 0) throw DimensionError("repeat_rows expects rank-2, times>0");
    const int rows = x.dim(0), d = x.dim(1);
    std::vector<float> out(static_cast<size_t>(rows) * times * d);
    for (int r = 0; r < rows; ++r)
        for (int t = 0; t < times; ++t)
            std::memcpy(out.data() + (static_cast<size_t>(r) * times + t) * d,
                        x.data().data() + static_cast<size_t>(r) * d, sizeof(float) * d);
    auto xn = x.node();
    return make_result("repeat_rows", {rows * times, d}, std::move(out), {x},
                       [xn, rows, times, d](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (int r = 0; r < rows; ++r)
                               for (int t = 0; t < times; ++t)
                                   for (int j = 0; j < d; ++j)
                                       xn->grad[static_cast<size_t>(r) * d + j] +=
                                           o.grad[(static_cast<size_t>(r) * times + t) * d + j];
                       });
}

Tensor tile_rows(const Tensor& x, int times) {
    if (x.rank() != 2 || times <= 0) throw DimensionError("tile_rows expects rank-2, times>0");
    const int rows = x.dim(0), d = x.dim(1);
    std::vector<float> out(static_cast<size_t>(rows) * times * d);
    for (int t = 0; t < times; ++t)
        std::memcpy(out.data() + static_cast<size_t>(t) * rows * d, x.data().data(),
                    sizeof(float) * static_cast<size_t>(rows) * d);
    auto xn = x.node();
    return make_result("tile_rows", {rows * times, d}, std::move(out), {x},
                       [xn, rows, times, d](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           const size_t block = static_cast<size_t>(rows) * d;
                           for (int t = 0; t < times; ++t)
                               for (size_t i = 0; i < block; ++i)
                                   xn->grad[i] += o.grad[static_cast<size_t>(t) * block + i];
                       });
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_rows on empty list");
    const int d = xs[0].dim(1);
    int rows = 0;
    for (const Tensor& x : xs) {
        if (x.rank() != 2 || x.dim(1) != d) throw DimensionError("concat_rows: column mismatch");
        rows += x.dim(0);
    }
    std::vector<float> out;
    out.reserve(static_cast<size_t>(rows) * d);
    for (const Tensor& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const Tensor& x : xs) nodes.push_back(x.node());
    return make_result("concat_rows", {rows, d}, std::move(out), xs, [nodes](TensorNode& o) {
        size_t off = 0;
        for (auto& n : nodes) {
            const size_t sz = n->data.size();
            if (n->requires_grad) {
                n->ensure_grad();
                for (size_t i = 0; i < sz; ++i) n->grad[i] += o.grad[off + i];
            }
            off += sz;
        }
    });
}

// ---- conv & image ----

namespace {

// Raw [m,k] x [k,n] with accumulation into out (must be zeroed by caller).
void matmul_raw(const float* a, const float* b, float* out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        float* orow = out + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

struct ConvDims {
    int B, ci, h, w, co, k, stride, pad, oh, ow;
    int64_t rows() const { return static_cast<int64_t>(B) * oh * ow; }
    int cols() const { return ci * k * k; }
};

// im2col with rows ordered (b, oy, ox) and columns ordered (ci, ky, kx).
void im2col(const float* x, float* cols, const ConvDims& d) {
    const int ck = d.cols();
    for (int b = 0; b < d.B; ++b)
        for (int oy = 0; oy < d.oh; ++oy)
            for (int ox = 0; ox < d.ow; ++ox) {
                float* crow = cols + ((static_cast<size_t>(b) * d.oh + oy) * d.ow + ox) *
                                         static_cast<size_t>(ck);
                for (int ic = 0; ic < d.ci; ++ic) {
                    const float* xplane =
                        x + ((static_cast<size_t>(b) * d.ci + ic) * d.h) * d.w;
                    for (int ky = 0; ky < d.k; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        float* dst = crow + (static_cast<size_t>(ic) * d.k + ky) * d.k;
                        if (iy < 0 || iy >= d.h) {
                            for (int kx = 0; kx < d.k; ++kx) dst[kx] = 0.0f;
                            continue;
                        }
                        const float* xrow = xplane + static_cast<size_t>(iy) * d.w;
                        for (int kx = 0; kx < d.k; ++kx) {
                            const int ix = ox * d.stride + kx - d.pad;
                            dst[kx] = (ix < 0 || ix >= d.w) ? 0.0f : xrow[ix];
                        }
                    }
                }
            }
}

// scatter-add transpose of im2col
void col2im_add(const float* cols, float* dx, const ConvDims& d) {
    const int ck = d.cols();
    for (int b = 0; b < d.B; ++b)
        for (int oy = 0; oy < d.oh; ++oy)
            for (int ox = 0; ox < d.ow; ++ox) {
                const float* crow = cols + ((static_cast<size_t>(b) * d.oh + oy) * d.ow + ox) *
                                               static_cast<size_t>(ck);
                for (int ic = 0; ic < d.ci; ++ic) {
                    float* xplane = dx + ((static_cast<size_t>(b) * d.ci + ic) * d.h) * d.w;
                    for (int ky = 0; ky < d.k; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        const float* src = crow + (static_cast<size_t>(ic) * d.k + ky) * d.k;
                        float* xrow = xplane + static_cast<size_t>(iy) * d.w;
                        for (int kx = 0; kx < d.k; ++kx) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix >= 0 && ix < d.w) xrow[ix] += src[kx];
                        }
                    }
                }
            }
}

// [rows(b,oy,ox), co] -> [B,co,oh,ow]
void rows_to_planes(const float* mat, float* out, const ConvDims& d) {
    for (int b = 0; b < d.B; ++b)
        for (int oy = 0; oy < d.oh; ++oy)
            for (int ox = 0; ox < d.ow; ++ox) {
                const float* row =
                    mat + ((static_cast<size_t>(b) * d.oh + oy) * d.ow + ox) *
                              static_cast<size_t>(d.co);
                for (int oc = 0; oc < d.co; ++oc)
                    out[((static_cast<size_t>(b) * d.co + oc) * d.oh + oy) * d.ow + ox] = row[oc];
            }
}

void planes_to_rows(const float* planes, float* mat, const ConvDims& d) {
    for (int b = 0; b < d.B; ++b)
        for (int oy = 0; oy < d.oh; ++oy)
            for (int ox = 0; ox < d.ow; ++ox) {
                float* row = mat + ((static_cast<size_t>(b) * d.oh + oy) * d.ow + ox) *
                                       static_cast<size_t>(d.co);
                for (int oc = 0; oc < d.co; ++oc)
                    row[oc] =
                        planes[((static_cast<size_t>(b) * d.co + oc) * d.oh + oy) * d.ow + ox];
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int pad) {
    if (x.rank() != 4 || kernels.rank() != 4)
        throw DimensionError("conv2d expects x[B,ci,h,w], k[co,ci,kh,kw]");
    ConvDims d;
    d.B = x.dim(0);
    d.ci = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.co = kernels.dim(0);
    d.k = kernels.dim(2);
    d.stride = stride;
    d.pad = pad;
    if (kernels.dim(1) != d.ci) throw DimensionError("conv2d channel mismatch");
    if (kernels.dim(3) != d.k || d.k % 2 == 0)
        throw DimensionError("conv2d expects odd square kernels");
    if (stride <= 0 || pad < 0) throw DimensionError("conv2d: bad stride/pad");
    if ((d.h + 2 * pad - d.k) % stride != 0 || (d.w + 2 * pad - d.k) % stride != 0)
        throw DimensionError("conv2d output size not integral");
    d.oh = (d.h + 2 * pad - d.k) / stride + 1;
    d.ow = (d.w + 2 * pad - d.k) / stride + 1;
    if (d.oh <= 0 || d.ow <= 0) throw DimensionError("conv2d output empty");

    // Lowered to matmul: out_rows[rows, co] = cols[rows, ci k^2] . K^T.
    // The column matrix is cached for the backward pass.
    auto cols = std::make_shared<std::vector<float>>(
        static_cast<size_t>(d.rows()) * static_cast<size_t>(d.cols()));
    im2col(x.data().data(), cols->data(), d);
    const int ck = d.cols();
    std::vector<float> out_rows(static_cast<size_t>(d.rows()) * d.co, 0.0f);
    if (d.co <= 16) {
        // few output channels: contiguous dot products beat the kt layout
        for (int64_t r = 0; r < d.rows(); ++r) {
            const float* crow = cols->data() + static_cast<size_t>(r) * ck;
            float* orow = out_rows.data() + static_cast<size_t>(r) * d.co;
            for (int oc = 0; oc < d.co; ++oc) {
                const float* krow = kernels.data().data() + static_cast<size_t>(oc) * ck;
                float acc = 0.0f;
                for (int j = 0; j < ck; ++j) acc += crow[j] * krow[j];
                orow[oc] = acc;
            }
        }
    } else {
        std::vector<float> kt(kernels.data().size());  // [ci k^2, co]
        for (int oc = 0; oc < d.co; ++oc)
            for (int j = 0; j < ck; ++j)
                kt[static_cast<size_t>(j) * d.co + oc] =
                    kernels.data()[static_cast<size_t>(oc) * ck + j];
        matmul_raw(cols->data(), kt.data(), out_rows.data(), static_cast<int>(d.rows()), ck, d.co);
    }
    std::vector<float> out(static_cast<size_t>(d.B) * d.co * d.oh * d.ow);
    rows_to_planes(out_rows.data(), out.data(), d);

    auto xn = x.node(), kn = kernels.node();
    return make_result(
        "conv2d", {d.B, d.co, d.oh, d.ow}, std::move(out), {x, kernels},
        [xn, kn, d, cols](TensorNode& o) {
            const int ck = d.cols();
            const int rows = static_cast<int>(d.rows());
            std::vector<float> grows(static_cast<size_t>(rows) * d.co);
            planes_to_rows(o.grad.data(), grows.data(), d);
            if (kn->requires_grad) {
                kn->ensure_grad();
                // dK[oc, j] += sum_r grows[r, oc] * cols[r, j]
                std::vector<float> dk(kn->data.size(), 0.0f);
                for (int r = 0; r < rows; ++r) {
                    const float* grow = grows.data() + static_cast<size_t>(r) * d.co;
                    const float* crow = cols->data() + static_cast<size_t>(r) * ck;
                    for (int oc = 0; oc < d.co; ++oc) {
                        const float g = grow[oc];
                        if (g == 0.0f) continue;
                        float* dkrow = dk.data() + static_cast<size_t>(oc) * ck;
                        for (int j = 0; j < ck; ++j) dkrow[j] += g * crow[j];
                    }
                }
                for (size_t i = 0; i < dk.size(); ++i) kn->grad[i] += dk[i];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dcols[r, j] = sum_oc grows[r, oc] * K[oc, j], then col2im
                std::vector<float> dcols(static_cast<size_t>(rows) * ck, 0.0f);
                matmul_raw(grows.data(), kn->data.data(), dcols.data(), rows, d.co, ck);
                col2im_add(dcols.data(), xn->grad.data(), d);
            }
        });
}

Tensor conv2d_single(const Tensor& x, const Tensor& kernels, int stride, int pad) {
    if (x.rank() != 3) throw DimensionError("conv2d_single expects x[ci,h,w]");
    Tensor x4 = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    Tensor y = conv2d(x4, kernels, stride, pad);
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
}

Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 4) throw DimensionError("upsample2x expects [B,c,h,w]");
    const int B = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<float> out(static_cast<size_t>(B) * c * 4 * h * w);
    const int oh = 2 * h, ow = 2 * w;
    for (int bc = 0; bc < B * c; ++bc) {
        const float* xplane = x.data().data() + static_cast<size_t>(bc) * h * w;
        float* oplane = out.data() + static_cast<size_t>(bc) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const float* xrow = xplane + static_cast<size_t>(y / 2) * w;
            float* orow = oplane + static_cast<size_t>(y) * ow;
            for (int xcol = 0; xcol < ow; ++xcol) orow[xcol] = xrow[xcol / 2];
        }
    }
    auto xn = x.node();
    return make_result("upsample2x", {B, c, oh, ow}, std::move(out), {x},
                       [xn, B, c, h, w, oh, ow](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (int bc = 0; bc < B * c; ++bc) {
                               float* dxplane = xn->grad.data() + static_cast<size_t>(bc) * h * w;
                               const float* gplane = o.grad.data() + static_cast<size_t>(bc) * oh * ow;
                               for (int y = 0; y < oh; ++y)
                                   for (int xcol = 0; xcol < ow; ++xcol)
                                       dxplane[static_cast<size_t>(y / 2) * w + xcol / 2] +=
                                           gplane[static_cast<size_t>(y) * ow + xcol];
                           }
                       });
}

namespace {

// out[b, c*4 + dy*2 + dx, y, x] = in[b, c, 2y+dy, 2x+dx]; fwd=true applies
// it, fwd=false scatters (the exact inverse on the same index map).
void s2d_map(const std::vector<float>& src, std::vector<float>& dst, int B, int c, int h, int w,
             bool fwd) {
    const int oh = h / 2, ow = w / 2;
    for (int b = 0; b < B; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    for (int y = 0; y < oh; ++y) {
                        const size_t in_row =
                            ((static_cast<size_t>(b) * c + ch) * h + 2 * y + dy) * w + dx;
                        const size_t out_row =
                            ((static_cast<size_t>(b) * c * 4 + ch * 4 + dy * 2 + dx) * oh + y) * ow;
                        for (int x = 0; x < ow; ++x) {
                            if (fwd)
                                dst[out_row + x] = src[in_row + 2 * static_cast<size_t>(x)];
                            else
                                dst[in_row + 2 * static_cast<size_t>(x)] += src[out_row + x];
                        }
                    }
}

}  // namespace

Tensor space_to_depth2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
        throw DimensionError("space_to_depth2 expects [B,c,2h,2w]");
    const int B = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<float> out(x.data().size());
    s2d_map(x.data(), out, B, c, h, w, true);
    auto xn = x.node();
    return make_result("space_to_depth2", {B, 4 * c, h / 2, w / 2}, std::move(out), {x},
                       [xn, B, c, h, w](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           s2d_map(o.grad, xn->grad, B, c, h, w, false);
                       });
}

Tensor depth_to_space2(const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) % 4 != 0)
        throw DimensionError("depth_to_space2 expects [B,4c,h,w]");
    const int B = x.dim(0), c = x.dim(1) / 4, oh = 2 * x.dim(2), ow = 2 * x.dim(3);
    std::vector<float> out(x.data().size(), 0.0f);
    // inverse of the s2d index map: scatter from packed channels to space
    s2d_map(x.data(), out, B, c, oh, ow, false);
    auto xn = x.node();
    return make_result("depth_to_space2", {B, c, oh, ow}, std::move(out), {x},
                       [xn, B, c, oh, ow](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           std::vector<float> tmp(o.grad.size());
                           s2d_map(o.grad, tmp, B, c, oh, ow, true);
                           for (size_t i = 0; i < tmp.size(); ++i) xn->grad[i] += tmp[i];
                       });
}

namespace {

// Accepts [c,h,w] or [B,c,h,w]; returns (B, c, h, w) with B=1 for rank 3.
std::array<int, 4> chan_dims(const Tensor& x, const char* op) {
    if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
    if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
    throw DimensionError(std::string(op) + " expects rank 3 or 4");
}

}  // namespace

Tensor chan_slice(const Tensor& x, int c0, int c1) {
    auto [B, c, h, w] = chan_dims(x, "chan_slice");
    if (c0 < 0 || c1 > c || c0 >= c1) throw DimensionError("chan_slice range invalid");
    const int cs = c1 - c0;
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<float> out(static_cast<size_t>(B) * cs * plane);
    for (int b = 0; b < B; ++b)
        std::memcpy(out.data() + static_cast<size_t>(b) * cs * plane,
                    x.data().data() + (static_cast<size_t>(b) * c + c0) * plane,
                    sizeof(float) * cs * plane);
    Shape oshape = x.rank() == 3 ? Shape{cs, h, w} : Shape{B, cs, h, w};
    auto xn = x.node();
    return make_result("chan_slice", oshape, std::move(out), {x},
                       [xn, B, c, c0, cs, plane](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (int b = 0; b < B; ++b) {
                               float* dst = xn->grad.data() + (static_cast<size_t>(b) * c + c0) * plane;
                               const float* src = o.grad.data() + static_cast<size_t>(b) * cs * plane;
                               for (size_t i = 0; i < static_cast<size_t>(cs) * plane; ++i)
                                   dst[i] += src[i];
                           }
                       });
}

Tensor chan_concat(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("chan_concat on empty list");
    auto [B, c0_, h, w] = chan_dims(xs[0], "chan_concat");
    (void)c0_;
    int ctot = 0;
    for (const Tensor& x : xs) {
        auto [b2, c2, h2, w2] = chan_dims(x, "chan_concat");
        if (b2 != B || h2 != h || w2 != w) throw DimensionError("chan_concat: plane mismatch");
        ctot += c2;
    }
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<float> out(static_cast<size_t>(B) * ctot * plane);
    for (int b = 0; b < B; ++b) {
        size_t coff = 0;
        for (const Tensor& x : xs) {
            const int cx = chan_dims(x, "chan_concat")[1];
            std::memcpy(out.data() + (static_cast<size_t>(b) * ctot) * plane + coff * plane,
                        x.data().data() + static_cast<size_t>(b) * cx * plane,
                        sizeof(float) * cx * plane);
            coff += static_cast<size_t>(cx);
        }
    }
    Shape oshape = xs[0].rank() == 3 ? Shape{ctot, h, w} : Shape{B, ctot, h, w};
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> cxs;
    for (const Tensor& x : xs) {
        nodes.push_back(x.node());
        cxs.push_back(chan_dims(x, "chan_concat")[1]);
    }
    return make_result("chan_concat", oshape, std::move(out), xs,
                       [nodes, cxs, B, ctot, plane](TensorNode& o) {
                           for (int b = 0; b < B; ++b) {
                               size_t coff = 0;
                               for (size_t xi = 0; xi < nodes.size(); ++xi) {
                                   auto& n = nodes[xi];
                                   const size_t block = static_cast<size_t>(cxs[xi]) * plane;
                                   if (n->requires_grad) {
                                       n->ensure_grad();
                                       const float* src = o.grad.data() +
                                                          (static_cast<size_t>(b) * ctot) * plane +
                                                          coff * plane;
                                       float* dst = n->grad.data() + static_cast<size_t>(b) * block;
                                       for (size_t i = 0; i < block; ++i) dst[i] += src[i];
                                   }
                                   coff += static_cast<size_t>(cxs[xi]);
                               }
                           }
                       });
}

// ---- tokens ----

Tensor patchify(const Tensor& x, int p) {
    if (x.rank() != 4) throw DimensionError("patchify expects [B,c,h,w]");
    const int B = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw DimensionError("patchify: patch size must divide spatial dims");
    const int gh = h / p, gw = w / p, n = gh * gw, fd = c * p * p;
    std::vector<float> out(static_cast<size_t>(B) * n * fd);
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                float* tok =
                    out.data() + (static_cast<size_t>(b) * n + static_cast<size_t>(gy) * gw + gx) * fd;
                for (int ic = 0; ic < c; ++ic)
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            tok[(static_cast<size_t>(ic) * p + py) * p + px] =
                                x.data()[((static_cast<size_t>(b) * c + ic) * h + gy * p + py) * w +
                                         gx * p + px];
            }
    auto xn = x.node();
    return make_result("patchify", {B * n, fd}, std::move(out), {x},
                       [xn, B, c, h, w, p, gh, gw, n, fd](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (int b = 0; b < B; ++b)
                               for (int gy = 0; gy < gh; ++gy)
                                   for (int gx = 0; gx < gw; ++gx) {
                                       const float* tok =
                                           o.grad.data() +
                                           (static_cast<size_t>(b) * n + static_cast<size_t>(gy) * gw +
                                            gx) * fd;
                                       for (int ic = 0; ic < c; ++ic)
                                           for (int py = 0; py < p; ++py)
                                               for (int px = 0; px < p; ++px)
                                                   xn->grad[((static_cast<size_t>(b) * c + ic) * h +
                                                             gy * p + py) * w +
                                                            gx * p + px] +=
                                                       tok[(static_cast<size_t>(ic) * p + py) * p + px];
                                   }
                       });
}

Tensor unpatchify(const Tensor& tokens, int batch, int c, int h, int w, int p) {
    if (tokens.rank() != 2) throw DimensionError("unpatchify expects [B*n, c*p*p]");
    const int gh = h / p, gw = w / p, n = gh * gw, fd = c * p * p;
    if (h % p != 0 || w % p != 0 || tokens.dim(0) != batch * n || tokens.dim(1) != fd)
        throw DimensionError("unpatchify: token layout mismatch");
    std::vector<float> out(static_cast<size_t>(batch) * c * h * w);
    for (int b = 0; b < batch; ++b)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const float* tok =
                    tokens.data().data() +
                    (static_cast<size_t>(b) * n + static_cast<size_t>(gy) * gw + gx) * fd;
                for (int ic = 0; ic < c; ++ic)
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            out[((static_cast<size_t>(b) * c + ic) * h + gy * p + py) * w + gx * p +
                                px] = tok[(static_cast<size_t>(ic) * p + py) * p + px];
            }
    auto tn = tokens.node();
    return make_result("unpatchify", {batch, c, h, w}, std::move(out), {tokens},
                       [tn, batch, c, h, w, p, gh, gw, n, fd](TensorNode& o) {
                           if (!tn->requires_grad) return;
                           tn->ensure_grad();
                           for (int b = 0; b < batch; ++b)
                               for (int gy = 0; gy < gh; ++gy)
                                   for (int gx = 0; gx < gw; ++gx) {
                                       float* tok = tn->grad.data() +
                                                    (static_cast<size_t>(b) * n +
                                                     static_cast<size_t>(gy) * gw + gx) * fd;
                                       for (int ic = 0; ic < c; ++ic)
                                           for (int py = 0; py < p; ++py)
                                               for (int px = 0; px < p; ++px)
                                                   tok[(static_cast<size_t>(ic) * p + py) * p + px] +=
                                                       o.grad[((static_cast<size_t>(b) * c + ic) * h +
                                                               gy * p + py) * w +
                                                              gx * p + px];
                                   }
                       });
}

// ---- normalization / attention ----

Tensor layer_norm(const Tensor& x, float eps) {
    if (x.rank() < 1) throw DimensionError("layer_norm on empty tensor");
    const int d = x.dim(x.rank() - 1);
    if (d < 2) throw DimensionError("layer_norm requires last dim >= 2");
    const int rows = static_cast<int>(x.numel() / d);
    std::vector<float> out(x.data().size());
    auto cache = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));  // rstd per row
    for (int r = 0; r < rows; ++r) {
        const float* xrow = x.data().data() + static_cast<size_t>(r) * d;
        float* orow = out.data() + static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xrow[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double dv = xrow[j] - mean;
            var += dv * dv;
        }
        var /= d;
        const float rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*cache)[static_cast<size_t>(r)] = rstd;
        const float m = static_cast<float>(mean);
        for (int j = 0; j < d; ++j) orow[j] = (xrow[j] - m) * rstd;
    }
    auto norm = std::make_shared<std::vector<float>>(out);
    auto xn = x.node();
    return make_result("layer_norm", x.shape(), std::move(out), {x},
                       [xn, cache, norm, rows, d](TensorNode& o) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (int r = 0; r < rows; ++r) {
                               const float* grow = o.grad.data() + static_cast<size_t>(r) * d;
                               const float* yrow = norm->data() + static_cast<size_t>(r) * d;
                               float* dxrow = xn->grad.data() + static_cast<size_t>(r) * d;
                               const float rstd = (*cache)[static_cast<size_t>(r)];
                               double gsum = 0.0, gysum = 0.0;
                               for (int j = 0; j < d; ++j) {
                                   gsum += grow[j];
                                   gysum += static_cast<double>(grow[j]) * yrow[j];
                               }
                               const float gmean = static_cast<float>(gsum / d);
                               const float gymean = static_cast<float>(gysum / d);
                               for (int j = 0; j < d; ++j)
                                   dxrow[j] += rstd * (grow[j] - gmean - yrow[j] * gymean);
                           }
                       });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int batch) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("attention expects rank-2 token matrices");
    const int d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d) throw DimensionError("attention width mismatch");
    if (heads <= 0 || d % heads != 0) throw ConfigError("attention: d must be divisible by heads");
    if (batch <= 0 || q.dim(0) % batch != 0 || k.dim(0) % batch != 0 || k.dim(0) != v.dim(0))
        throw DimensionError("attention: rows not divisible into batch groups");
    const int nq = q.dim(0) / batch, nk = k.dim(0) / batch, dh = d / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    std::vector<float> out(q.data().size(), 0.0f);
    // softmax weights kept for the backward pass: [batch][heads][nq][nk]
    auto probs =
        std::make_shared<std::vector<float>>(static_cast<size_t>(batch) * heads * nq * nk);
    const float* qp = q.data().data();
    const float* kp = k.data().data();
    const float* vp = v.data().data();
    for (int b = 0; b < batch; ++b) {
        for (int hd = 0; hd < heads; ++hd) {
            const int coff = hd * dh;
            float* pmat = probs->data() +
                          ((static_cast<size_t>(b) * heads + hd) * nq) * static_cast<size_t>(nk);
            for (int i = 0; i < nq; ++i) {
                const float* qrow = qp + (static_cast<size_t>(b) * nq + i) * d + coff;
                float* prow = pmat + static_cast<size_t>(i) * nk;
                float maxv = -std::numeric_limits<float>::infinity();
                for (int j = 0; j < nk; ++j) {
                    const float* krow = kp + (static_cast<size_t>(b) * nk + j) * d + coff;
                    float acc = 0.0f;
                    for (int t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
                    prow[j] = acc * scale;
                    maxv = std::max(maxv, prow[j]);
                }
                double denom = 0.0;
                for (int j = 0; j < nk; ++j) {
                    prow[j] = std::exp(prow[j] - maxv);
                    denom += prow[j];
                }
                const float inv = static_cast<float>(1.0 / denom);
                float* orow = out.data() + (static_cast<size_t>(b) * nq + i) * d + coff;
                for (int j = 0; j < nk; ++j) {
                    prow[j] *= inv;
                    const float* vrow = vp + (static_cast<size_t>(b) * nk + j) * d + coff;
                    const float pij = prow[j];
                    for (int t = 0; t < dh; ++t) orow[t] += pij * vrow[t];
                }
            }
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node();
    return make_result(
        "attention", q.shape(), std::move(out), {q, k, v},
        [qn, kn, vn, probs, batch, heads, nq, nk, dh, d, scale](TensorNode& o) {
            if (qn->requires_grad) qn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            std::vector<float> dp(static_cast<size_t>(nk));
            for (int b = 0; b < batch; ++b) {
                for (int hd = 0; hd < heads; ++hd) {
                    const int coff = hd * dh;
                    const float* pmat =
                        probs->data() +
                        ((static_cast<size_t>(b) * heads + hd) * nq) * static_cast<size_t>(nk);
                    for (int i = 0; i < nq; ++i) {
                        const float* prow = pmat + static_cast<size_t>(i) * nk;
                        const float* grow = o.grad.data() + (static_cast<size_t>(b) * nq + i) * d + coff;
                        // dV and dP
                        double dot = 0.0;
                        for (int j = 0; j < nk; ++j) {
                            const float* vrow = vn->data.data() +
                                                (static_cast<size_t>(b) * nk + j) * d + coff;
                            float acc = 0.0f;
                            for (int t = 0; t < dh; ++t) acc += grow[t] * vrow[t];
                            dp[static_cast<size_t>(j)] = acc;
                            dot += static_cast<double>(acc) * prow[j];
                            if (vn->requires_grad) {
                                float* dvrow = vn->grad.data() +
                                               (static_cast<size_t>(b) * nk + j) * d + coff;
                                const float pij = prow[j];
                                for (int t = 0; t < dh; ++t) dvrow[t] += pij * grow[t];
                            }
                        }
                        // dS = P o (dP - rowdot), then into dQ, dK
                        const float* qrow = qn->data.data() +
                                            (static_cast<size_t>(b) * nq + i) * d + coff;
                        float* dqrow = qn->requires_grad
                                           ? qn->grad.data() + (static_cast<size_t>(b) * nq + i) * d +
                                                 coff
                                           : nullptr;
                        for (int j = 0; j < nk; ++j) {
                            const float ds =
                                prow[j] * (dp[static_cast<size_t>(j)] - static_cast<float>(dot)) *
                                scale;
                            if (ds == 0.0f) continue;
                            const float* krow = kn->data.data() +
                                                (static_cast<size_t>(b) * nk + j) * d + coff;
                            if (dqrow)
                                for (int t = 0; t < dh; ++t) dqrow[t] += ds * krow[t];
                            if (kn->requires_grad) {
                                float* dkrow = kn->grad.data() +
                                               (static_cast<size_t>(b) * nk + j) * d + coff;
                                for (int t = 0; t < dh; ++t) dkrow[t] += ds * qrow[t];
                            }
                        }
                    }
                }
            }
        });
}

// ---- ParamStore ----

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter path: " + name);
    t.set_requires_grad(true);
    auto& e = entries_[name];
    e.tensor = std::move(t);
    e.adam.m.assign(e.tensor.data().size(), 0.0f);
    e.adam.v.assign(e.tensor.data().size(), 0.0f);
    return e.tensor;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
}

bool ParamStore::has(const std::string& name) const { return entries_.count(name) != 0; }

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

void ParamStore::zero_grads() {
    for (auto& [_, e] : entries_) e.tensor.zero_grad();
}

AdamState& ParamStore::adam_state(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.adam;
}

void ParamStore::adam_step(float lr, float beta1, float beta2, float eps) {
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_));
    for (auto& [name, e] : entries_) {
        if (!e.tensor.has_grad())
            throw TrainingError("adam_step: missing gradient for parameter " + name);
        const std::vector<float>& g = e.tensor.grad();
        std::vector<float>& w = e.tensor.mutable_data();
        if (e.adam.m.size() != w.size() || e.adam.v.size() != w.size())
            throw TrainingError("adam_step: optimizer state shape mismatch for " + name);
        for (size_t i = 0; i < w.size(); ++i) {
            e.adam.m[i] = beta1 * e.adam.m[i] + (1.0f - beta1) * g[i];
            e.adam.v[i] = beta2 * e.adam.v[i] + (1.0f - beta2) * g[i] * g[i];
            const float mhat = static_cast<float>(e.adam.m[i] / bc1);
            const float vhat = static_cast<float>(e.adam.v[i] / bc2);
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        check_finite("adam_step", w);
    }
}

}  // namespace bevdiff
