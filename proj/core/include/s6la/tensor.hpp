#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace s6la {

enum class DType { f64, f32 };

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
std::vector<int64_t> strides_of(const Shape& s);

// Dense row-major tensor. Values are held as doubles; when dtype is f32 every
// operation rounds its result through float, so f32 runs stay on the f32 grid
// and checkpoints round-trip bit-exactly in either precision.
struct Tensor {
    Shape shape;
    DType dtype = DType::f64;
    std::vector<double> data;
    int node = -1;  // id into the active Tape, -1 when untracked

    Tensor() = default;

    static Tensor zeros(const Shape& s, DType dt = DType::f64);
    static Tensor full(const Shape& s, double v, DType dt = DType::f64);
    static Tensor from(const Shape& s, std::vector<double> vals, DType dt = DType::f64);
    static Tensor scalar(double v, DType dt = DType::f64);

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    double& at(std::initializer_list<int64_t> idx);
    double at(std::initializer_list<int64_t> idx) const;

    // value of a one-element tensor
    double item() const;

    bool all_finite() const;
};

// quantize in place when dt is f32
void apply_dtype(std::vector<double>& vals, DType dt);

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;  // same shape as value, zero until a backward pass
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true);
};

class Tape;

// Scoped recording: primitive ops executed while a Recording is alive are
// appended to its tape. One tape per thread of execution.
class Recording {
public:
    explicit Recording(Tape& t);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

private:
    Tape* prev_;
};

class Tape {
public:
    // Accumulates d(loss)/d(input) into the tape's buffers for each input node.
    using BackwardFn = std::function<void(const std::vector<double>& upstream, Tape& tape)>;

    struct Node {
        std::vector<int> inputs;  // node ids, entries are always valid ids
        Shape shape;
        BackwardFn backward;  // null for leaves
    };

    static Tape* current();

    // Registers t as a leaf and sets t.node. Returns the node id.
    int watch(Tensor& t);
    void watch(Parameter& p) { watch(p.value); }

    int push(std::vector<int> inputs, const Shape& shape, BackwardFn fn);

    void accumulate(int node, const std::vector<double>& g);
    void accumulate_at(int node, int64_t flat_index, double g);

    // Reverse sweep from a scalar loss recorded on this tape. Each node is
    // visited exactly once, in reverse topological (= recording) order.
    void backward(const Tensor& loss);
    void backward(const Tensor& loss, const std::vector<Parameter*>& params);

    // Copies accumulated buffers into Parameter.grad (zeros when untouched).
    void collect(const std::vector<Parameter*>& params) const;

    Tensor grad_of(const Tensor& t) const;

    size_t size() const { return nodes_.size(); }
    void clear();

private:
    friend class Recording;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

[[noreturn]] void fail(const std::string& msg);

}  // namespace s6la
