#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bevdiff/errors.hpp"
#include "bevdiff/rng.hpp"

namespace bevdiff {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Disable/enable the tape for a scope (inference, burn-in passes).
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// When on (default), every op scans its output and throws NumericalError on
// NaN/Inf instead of propagating it.
bool finite_checks_enabled();
void set_finite_checks(bool on);

struct TensorNode {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same size as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;  // reads this->grad, accumulates into parents

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

// Dense row-major float32 tensor with reverse-mode autodiff. Value semantics
// over a shared node; data is immutable once produced by an op. The tape is
// carried by the nodes themselves (parents + backward closure) and is rebuilt
// on every forward pass.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value);
    static Tensor from_data(const Shape& shape, std::vector<float> data);
    static Tensor scalar(float value);
    // N(0, stdev^2) iid entries.
    static Tensor randn(const Shape& shape, Rng& rng, float stdev = 1.0f);
    static Tensor rand_uniform(const Shape& shape, Rng& rng, float lo, float hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }

    const std::vector<float>& data() const { return node_->data; }
    std::vector<float>& mutable_data() { return node_->data; }
    float item() const;
    float at(int64_t flat_index) const { return node_->data[static_cast<size_t>(flat_index)]; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<float>& grad() const;
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    }

    // Deep copy detached from the tape.
    Tensor detached_copy() const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

// Runs reverse-mode accumulation from a scalar root. Gradients accumulate
// into every reachable node with requires_grad set.
void backward(const Tensor& root);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor square(const Tensor& a);
// clamp to [0,1]; gradient passes through inside the range
Tensor clamp01(const Tensor& a);

// ---- reductions / losses ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// mean((a - b)^2) over all elements
Tensor mse(const Tensor& a, const Tensor& b);

// ---- linear algebra ----
// a: [m,k] x b: [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [rows,d] + bias: [d]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x: [B,c,h,w] + bias: [c]
Tensor add_chan_bias(const Tensor& x, const Tensor& bias);
// x: [m,n] -> [n,m]
Tensor transpose(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, const Shape& shape);
// table: [rows,d]; picks one row -> [1,d]
Tensor select_row(const Tensor& table, int row);
// x: [rows,d] -> [rows*times, d], each row group repeated contiguously
// (row r maps to output rows [r*times, (r+1)*times)).
Tensor repeat_rows(const Tensor& x, int times);
// x: [n,d] -> [times*n, d], whole block tiled `times` times.
Tensor tile_rows(const Tensor& x, int times);
Tensor concat_rows(const std::vector<Tensor>& xs);

// ---- conv & image ----
// x: [B,ci,h,w], k: [co,ci,kh,kw]; cross-correlation, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int pad);
// 3-D convenience: x [ci,h,w] -> [co,h',w']
Tensor conv2d_single(const Tensor& x, const Tensor& kernels, int stride, int pad);
// nearest-neighbour 2x upsample, x: [B,c,h,w] -> [B,c,2h,2w]
Tensor upsample2x(const Tensor& x);
// [B,c,h,w] -> [B,4c,h/2,w/2]; inverse below. Pure permutations, used as an
// exact strided-downsample substitute in conv stacks.
Tensor space_to_depth2(const Tensor& x);
Tensor depth_to_space2(const Tensor& x);
// channel slice/concat along dim 1 of [B,c,h,w]
Tensor chan_slice(const Tensor& x, int c0, int c1);
Tensor chan_concat(const std::vector<Tensor>& xs);

// ---- tokens ----
// x: [B,c,h,w], patch p -> [B*n, c*p*p] with n = (h/p)*(w/p); token order is
// row-major over the patch grid, feature order is (c, py, px).
Tensor patchify(const Tensor& x, int p);
Tensor unpatchify(const Tensor& tokens, int batch, int c, int h, int w, int p);

// ---- normalization / attention ----
// Per-row zero mean unit variance over the last dim; no learned affine.
Tensor layer_norm(const Tensor& x, float eps = 1e-5f);
// Multi-head scaled dot-product attention. q: [B*n_q,d], k,v: [B*n_k,d],
// rows grouped per batch element; batch=1 treats the whole thing as one set.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int batch = 1);

// ---- optimizer ----
struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
};

// Named parameter map with per-parameter Adam moments. Iteration order is the
// lexicographic name order, which keeps updates deterministic.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
    std::vector<std::string> names() const;
    size_t size() const { return entries_.size(); }
    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }

    void zero_grads();
    AdamState& adam_state(const std::string& name);

    // Standard Adam with bias correction over every parameter in the store.
    // Throws TrainingError if a parameter has no gradient buffer.
    void adam_step(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

private:
    struct Entry {
        Tensor tensor;
        AdamState adam;
    };
    std::map<std::string, Entry> entries_;
    int64_t step_ = 0;
};

}  // namespace bevdiff
