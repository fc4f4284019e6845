#include "s6la/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace s6la {

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[i] = st[i + 1] * s[i + 1];
    }
    return st;
}

void apply_dtype(std::vector<double>& vals, DType dt) {
    if (dt == DType::f32) {
        for (double& v : vals) v = static_cast<double>(static_cast<float>(v));
    }
}

Tensor Tensor::zeros(const Shape& s, DType dt) {
    for (int64_t e : s) {
        if (e <= 0) fail("tensor extent must be positive, got shape " + shape_str(s));
    }
    Tensor t;
    t.shape = s;
    t.dtype = dt;
    t.data.assign(static_cast<size_t>(numel(s)), 0.0);
    return t;
}

Tensor Tensor::full(const Shape& s, double v, DType dt) {
    Tensor t = zeros(s, dt);
    std::fill(t.data.begin(), t.data.end(), v);
    apply_dtype(t.data, dt);
    return t;
}

Tensor Tensor::from(const Shape& s, std::vector<double> vals, DType dt) {
    if (numel(s) != static_cast<int64_t>(vals.size())) {
        fail("tensor data size " + std::to_string(vals.size()) + " does not match shape " + shape_str(s));
    }
    Tensor t;
    t.shape = s;
    t.dtype = dt;
    t.data = std::move(vals);
    apply_dtype(t.data, dt);
    return t;
}

Tensor Tensor::scalar(double v, DType dt) { return from({1}, {v}, dt); }

static int64_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx) {
    if (idx.size() != shape.size()) {
        fail("index rank " + std::to_string(idx.size()) + " does not match tensor rank " + std::to_string(shape.size()));
    }
    int64_t off = 0;
    size_t ax = 0;
    auto st = strides_of(shape);
    for (int64_t i : idx) {
        if (i < 0 || i >= shape[ax]) fail("index out of range on axis " + std::to_string(ax));
        off += i * st[ax];
        ++ax;
    }
    return off;
}

double& Tensor::at(std::initializer_list<int64_t> idx) { return data[static_cast<size_t>(flat_index(shape, idx))]; }

double Tensor::at(std::initializer_list<int64_t> idx) const { return data[static_cast<size_t>(flat_index(shape, idx))]; }

double Tensor::item() const {
    if (size() != 1) fail("item() requires a one-element tensor, got shape " + shape_str(shape));
    return data[0];
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Parameter::Parameter(std::string n, Tensor v, bool train)
    : name(std::move(n)), value(std::move(v)), trainable(train) {
    grad = Tensor::zeros(value.shape, value.dtype);
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Recording::Recording(Tape& t) : prev_(g_current_tape) { g_current_tape = &t; }

Recording::~Recording() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

int Tape::watch(Tensor& t) {
    nodes_.push_back(Node{{}, t.shape, nullptr});
    t.node = static_cast<int>(nodes_.size()) - 1;
    return t.node;
}

int Tape::push(std::vector<int> inputs, const Shape& shape, BackwardFn fn) {
    for (int id : inputs) {
        if (id < 0 || id >= static_cast<int>(nodes_.size())) fail("tape node input id out of range");
    }
    nodes_.push_back(Node{std::move(inputs), shape, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const std::vector<double>& g) {
    auto& buf = grads_[static_cast<size_t>(node)];
    if (buf.empty()) buf.assign(static_cast<size_t>(numel(nodes_[static_cast<size_t>(node)].shape)), 0.0);
    for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void Tape::accumulate_at(int node, int64_t flat, double g) {
    auto& buf = grads_[static_cast<size_t>(node)];
    if (buf.empty()) buf.assign(static_cast<size_t>(numel(nodes_[static_cast<size_t>(node)].shape)), 0.0);
    buf[static_cast<size_t>(flat)] += g;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) fail("backward() requires a scalar loss, got shape " + shape_str(loss.shape));
    if (loss.node < 0 || loss.node >= static_cast<int>(nodes_.size())) {
        fail("backward() loss was not recorded on this tape");
    }
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<size_t>(loss.node)] = {1.0};
    for (int i = loss.node; i >= 0; --i) {
        const auto& buf = grads_[static_cast<size_t>(i)];
        const auto& node = nodes_[static_cast<size_t>(i)];
        if (buf.empty() || !node.backward) continue;
        node.backward(buf, *this);
    }
}

void Tape::backward(const Tensor& loss, const std::vector<Parameter*>& params) {
    backward(loss);
    collect(params);
}

void Tape::collect(const std::vector<Parameter*>& params) const {
    for (Parameter* p : params) {
        if (!p) continue;
        const int id = p->value.node;
        p->grad = Tensor::zeros(p->value.shape, p->value.dtype);
        if (id < 0 || id >= static_cast<int>(grads_.size())) continue;
        const auto& buf = grads_[static_cast<size_t>(id)];
        if (buf.empty()) continue;
        p->grad.data = buf;
        apply_dtype(p->grad.data, p->grad.dtype);
    }
}

Tensor Tape::grad_of(const Tensor& t) const {
    Tensor g = Tensor::zeros(t.shape, DType::f64);
    if (t.node >= 0 && t.node < static_cast<int>(grads_.size())) {
        const auto& buf = grads_[static_cast<size_t>(t.node)];
        if (!buf.empty()) g.data = buf;
    }
    return g;
}

void Tape::clear() {
    nodes_.clear();
    grads_.clear();
}

}  // namespace s6la
