#include "s6la/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>

namespace s6la {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

DType join_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype != b.dtype) {
        fail(std::string(op) + ": dtype mismatch between operands " + shape_str(a.shape) + " and " + shape_str(b.shape));
    }
    return a.dtype;
}

// Records the result on the active tape when any input is tracked.
Tensor record(Tensor out, std::initializer_list<const Tensor*> ins, const std::function<Tape::BackwardFn()>& make_fn) {
    Tape* tape = Tape::current();
    if (!tape) return out;
    std::vector<int> tracked;
    for (const Tensor* t : ins) {
        if (t->node >= 0) tracked.push_back(t->node);
    }
    if (tracked.empty()) return out;
    out.node = tape->push(std::move(tracked), out.shape, make_fn());
    return out;
}

struct BcPlan {
    Shape out;
    std::vector<int64_t> sa, sb;  // per-out-axis strides, 0 on broadcast axes
};

std::vector<int64_t> padded_strides(const Shape& shape, const Shape& out) {
    const int rank = static_cast<int>(out.size());
    const int off = rank - static_cast<int>(shape.size());
    auto st = strides_of(shape);
    std::vector<int64_t> eff(rank, 0);
    for (int ax = 0; ax < rank; ++ax) {
        if (ax < off) continue;
        const int64_t extent = shape[static_cast<size_t>(ax - off)];
        eff[ax] = (extent == 1 && out[static_cast<size_t>(ax)] > 1) ? 0 : st[static_cast<size_t>(ax - off)];
    }
    return eff;
}

BcPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const int rank = std::max(a.size(), b.size());
    Shape out(static_cast<size_t>(rank), 1);
    for (int ax = 0; ax < rank; ++ax) {
        const int ia = ax - (rank - static_cast<int>(a.size()));
        const int ib = ax - (rank - static_cast<int>(b.size()));
        const int64_t ea = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
        const int64_t eb = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            fail(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        out[static_cast<size_t>(ax)] = std::max(ea, eb);
    }
    BcPlan p;
    p.out = out;
    p.sa = padded_strides(a, out);
    p.sb = padded_strides(b, out);
    return p;
}

// Iterates the index space of `out`, calling f(flat_out, off_a, off_b).
template <class F>
void for_each_offsets(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, F&& f) {
    const int64_t n = numel(out);
    const int rank = static_cast<int>(out.size());
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int ax = rank - 1; ax >= 0; --ax) {
            ++idx[static_cast<size_t>(ax)];
            oa += sa[static_cast<size_t>(ax)];
            ob += sb[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < out[static_cast<size_t>(ax)]) break;
            oa -= sa[static_cast<size_t>(ax)] * out[static_cast<size_t>(ax)];
            ob -= sb[static_cast<size_t>(ax)] * out[static_cast<size_t>(ax)];
            idx[static_cast<size_t>(ax)] = 0;
        }
    }
}

enum class BinKind { add, sub, mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const DType dt = join_dtype(a, b, name);
    BcPlan plan = broadcast_plan(a.shape, b.shape, name);
    std::vector<double> vals(static_cast<size_t>(numel(plan.out)));
    for_each_offsets(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t oa, int64_t ob) {
        const double x = a.data[static_cast<size_t>(oa)];
        const double y = b.data[static_cast<size_t>(ob)];
        switch (kind) {
            case BinKind::add: vals[static_cast<size_t>(i)] = x + y; break;
            case BinKind::sub: vals[static_cast<size_t>(i)] = x - y; break;
            case BinKind::mul: vals[static_cast<size_t>(i)] = x * y; break;
        }
    });
    apply_dtype(vals, dt);
    Tensor out = Tensor::from(plan.out, std::move(vals), dt);
    return record(out, {&a, &b}, [&]() -> Tape::BackwardFn {
        const int ida = a.node, idb = b.node;
        const Shape ashape = a.shape, bshape = b.shape;
        std::vector<double> adata, bdata;
        if (kind == BinKind::mul) {
            adata = a.data;
            bdata = b.data;
        }
        return [ida, idb, ashape, bshape, plan, kind, adata, bdata](const std::vector<double>& g, Tape& tape) {
            std::vector<double> da, db;
            if (ida >= 0) da.assign(static_cast<size_t>(numel(ashape)), 0.0);
            if (idb >= 0) db.assign(static_cast<size_t>(numel(bshape)), 0.0);
            for_each_offsets(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t oa, int64_t ob) {
                const double gi = g[static_cast<size_t>(i)];
                switch (kind) {
                    case BinKind::add:
                        if (ida >= 0) da[static_cast<size_t>(oa)] += gi;
                        if (idb >= 0) db[static_cast<size_t>(ob)] += gi;
                        break;
                    case BinKind::sub:
                        if (ida >= 0) da[static_cast<size_t>(oa)] += gi;
                        if (idb >= 0) db[static_cast<size_t>(ob)] -= gi;
                        break;
                    case BinKind::mul:
                        if (ida >= 0) da[static_cast<size_t>(oa)] += gi * bdata[static_cast<size_t>(ob)];
                        if (idb >= 0) db[static_cast<size_t>(ob)] += gi * adata[static_cast<size_t>(oa)];
                        break;
                }
            });
            if (ida >= 0) tape.accumulate(ida, da);
            if (idb >= 0) tape.accumulate(idb, db);
        };
    });
}

Tensor unary_op(const Tensor& a, const std::function<double(double)>& fwd, const std::function<double(double, double)>& dfn) {
    std::vector<double> vals(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) vals[i] = fwd(a.data[i]);
    apply_dtype(vals, a.dtype);
    Tensor out = Tensor::from(a.shape, std::move(vals), a.dtype);
    return record(out, {&a}, [&]() -> Tape::BackwardFn {
        const int ida = a.node;
        std::vector<double> x = a.data;
        std::vector<double> y = out.data;
        return [ida, x, y, dfn](const std::vector<double>& g, Tape& tape) {
            std::vector<double> da(x.size());
            for (size_t i = 0; i < x.size(); ++i) da[i] = g[i] * dfn(x[i], y[i]);
            tape.accumulate(ida, da);
        };
    });
}

int normalize_axis(int axis, int rank, const char* op) {
    int ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return ax;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::mul, "mul"); }

Tensor neg(const Tensor& a) {
    return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] <= 0.0) fail("log: non-positive input at flat index " + std::to_string(i));
    }
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return stable_sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary_op(a, [](double x) { return stable_softplus(x); }, [](double x, double) { return stable_sigmoid(x); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const DType dt = join_dtype(a, b, "matmul");
    if (a.rank() < 2 || b.rank() < 2) {
        fail("matmul: operands must have rank >= 2, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    }
    const Shape lead_a(a.shape.begin(), a.shape.end() - 2);
    const Shape lead_b(b.shape.begin(), b.shape.end() - 2);
    if (!lead_a.empty() && !lead_b.empty() && lead_a != lead_b) {
        fail("matmul: leading axes mismatch between " + shape_str(a.shape) + " and " + shape_str(b.shape));
    }
    const int64_t m = a.shape[a.shape.size() - 2];
    const int64_t k = a.shape[a.shape.size() - 1];
    const int64_t k2 = b.shape[b.shape.size() - 2];
    const int64_t n = b.shape[b.shape.size() - 1];
    if (k != k2) {
        fail("matmul: inner extents differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    const Shape lead = lead_a.empty() ? lead_b : lead_a;
    const int64_t batches = numel(lead);
    const bool a_batched = !lead_a.empty();
    const bool b_batched = !lead_b.empty();

    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> vals(static_cast<size_t>(numel(out_shape)), 0.0);
    for (int64_t bi = 0; bi < batches; ++bi) {
        const double* A = a.data.data() + (a_batched ? bi * m * k : 0);
        const double* B = b.data.data() + (b_batched ? bi * k * n : 0);
        double* O = vals.data() + bi * m * n;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t kk = 0; kk < k; ++kk) acc += A[i * k + kk] * B[kk * n + j];
                O[i * n + j] = acc;
            }
        }
    }
    apply_dtype(vals, dt);
    Tensor out = Tensor::from(out_shape, std::move(vals), dt);
    return record(out, {&a, &b}, [&]() -> Tape::BackwardFn {
        const int ida = a.node, idb = b.node;
        std::vector<double> adata = a.data, bdata = b.data;
        const Shape ashape = a.shape, bshape = b.shape;
        return [=](const std::vector<double>& g, Tape& tape) {
            std::vector<double> da, db;
            if (ida >= 0) da.assign(adata.size(), 0.0);
            if (idb >= 0) db.assign(bdata.size(), 0.0);
            for (int64_t bi = 0; bi < batches; ++bi) {
                const double* A = adata.data() + (a_batched ? bi * m * k : 0);
                const double* B = bdata.data() + (b_batched ? bi * k * n : 0);
                const double* G = g.data() + bi * m * n;
                double* dA = ida >= 0 ? da.data() + (a_batched ? bi * m * k : 0) : nullptr;
                double* dB = idb >= 0 ? db.data() + (b_batched ? bi * k * n : 0) : nullptr;
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t j = 0; j < n; ++j) {
                        const double gij = G[i * n + j];
                        if (gij == 0.0) continue;
                        for (int64_t kk = 0; kk < k; ++kk) {
                            if (dA) dA[i * k + kk] += gij * B[kk * n + j];
                            if (dB) dB[kk * n + j] += gij * A[i * k + kk];
                        }
                    }
                }
            }
            if (ida >= 0) tape.accumulate(ida, da);
            if (idb >= 0) tape.accumulate(idb, db);
        };
    });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, Padding pad) {
    const DType dt = join_dtype(x, kernel, "conv2d");
    if (x.rank() != 3 && x.rank() != 4) {
        fail("conv2d: input must be [H,W,Cin] or [B,H,W,Cin], got " + shape_str(x.shape));
    }
    if (kernel.rank() != 4) fail("conv2d: kernel must be [kh,kw,Cin,Cout], got " + shape_str(kernel.shape));
    const bool batched = x.rank() == 4;
    const int64_t B = batched ? x.shape[0] : 1;
    const int64_t H = x.shape[batched ? 1 : 0];
    const int64_t W = x.shape[batched ? 2 : 1];
    const int64_t Ci = x.shape[batched ? 3 : 2];
    const int64_t kh = kernel.shape[0], kw = kernel.shape[1];
    if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3)) {
        fail("conv2d: unsupported kernel size " + shape_str(kernel.shape) + ", extents must be 1 or 3");
    }
    if (kernel.shape[2] != Ci) {
        fail("conv2d: kernel input channels " + shape_str(kernel.shape) + " do not match input " + shape_str(x.shape));
    }
    const int64_t Co = kernel.shape[3];
    const int64_t py = pad == Padding::same ? kh / 2 : 0;
    const int64_t px = pad == Padding::same ? kw / 2 : 0;
    const int64_t Ho = pad == Padding::same ? H : H - kh + 1;
    const int64_t Wo = pad == Padding::same ? W : W - kw + 1;
    if (Ho <= 0 || Wo <= 0) fail("conv2d: valid padding leaves no output for input " + shape_str(x.shape));

    Shape out_shape = batched ? Shape{B, Ho, Wo, Co} : Shape{Ho, Wo, Co};
    std::vector<double> vals(static_cast<size_t>(numel(out_shape)), 0.0);
    const double* X = x.data.data();
    const double* K = kernel.data.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                for (int64_t co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        const int64_t iy = oy + ky - py;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t ix = ox + kx - px;
                            if (ix < 0 || ix >= W) continue;
                            const double* xrow = X + ((b * H + iy) * W + ix) * Ci;
                            const double* krow = K + ((ky * kw + kx) * Ci) * Co + co;
                            for (int64_t ci = 0; ci < Ci; ++ci) acc += xrow[ci] * krow[ci * Co];
                        }
                    }
                    vals[static_cast<size_t>(((b * Ho + oy) * Wo + ox) * Co + co)] = acc;
                }
            }
        }
    }
    apply_dtype(vals, dt);
    Tensor out = Tensor::from(out_shape, std::move(vals), dt);
    return record(out, {&x, &kernel}, [&]() -> Tape::BackwardFn {
        const int idx = x.node, idk = kernel.node;
        std::vector<double> xdata = x.data, kdata = kernel.data;
        return [=](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx, dk;
            if (idx >= 0) dx.assign(xdata.size(), 0.0);
            if (idk >= 0) dk.assign(kdata.size(), 0.0);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        for (int64_t co = 0; co < Co; ++co) {
                            const double gv = g[static_cast<size_t>(((b * Ho + oy) * Wo + ox) * Co + co)];
                            if (gv == 0.0) continue;
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                const int64_t iy = oy + ky - py;
                                if (iy < 0 || iy >= H) continue;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t ix = ox + kx - px;
                                    if (ix < 0 || ix >= W) continue;
                                    const int64_t xbase = ((b * H + iy) * W + ix) * Ci;
                                    const int64_t kbase = ((ky * kw + kx) * Ci) * Co + co;
                                    for (int64_t ci = 0; ci < Ci; ++ci) {
                                        if (idx >= 0) dx[static_cast<size_t>(xbase + ci)] += gv * kdata[static_cast<size_t>(kbase + ci * Co)];
                                        if (idk >= 0) dk[static_cast<size_t>(kbase + ci * Co)] += gv * xdata[static_cast<size_t>(xbase + ci)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (idx >= 0) tape.accumulate(idx, dx);
            if (idk >= 0) tape.accumulate(idk, dk);
        };
    });
}

Tensor softmax_rows(const Tensor& x) {
    const int64_t K = x.shape.back();
    const int64_t rows = numel(x.shape) / K;
    std::vector<double> vals(x.data.size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data.data() + r * K;
        double* o = vals.data() + r * K;
        double mx = in[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, in[j]);
        double s = 0.0;
        for (int64_t j = 0; j < K; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (int64_t j = 0; j < K; ++j) o[j] /= s;
    }
    apply_dtype(vals, x.dtype);
    Tensor out = Tensor::from(x.shape, std::move(vals), x.dtype);
    return record(out, {&x}, [&]() -> Tape::BackwardFn {
        const int id = x.node;
        std::vector<double> y = out.data;
        return [id, y, rows, K](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx(y.size());
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * K;
                const double* gr = g.data() + r * K;
                double dot = 0.0;
                for (int64_t j = 0; j < K; ++j) dot += gr[j] * yr[j];
                for (int64_t j = 0; j < K; ++j) dx[static_cast<size_t>(r * K + j)] = yr[j] * (gr[j] - dot);
            }
            tape.accumulate(id, dx);
        };
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int64_t K = x.shape.back();
    if (gamma.shape != Shape{K} || beta.shape != Shape{K}) {
        fail("layer_norm: gamma/beta must have shape [" + std::to_string(K) + "], got " + shape_str(gamma.shape) + " and " + shape_str(beta.shape));
    }
    const DType dt = x.dtype;
    const int64_t rows = numel(x.shape) / K;
    std::vector<double> vals(x.data.size());
    std::vector<double> xhat(x.data.size());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data.data() + r * K;
        double mu = 0.0;
        for (int64_t j = 0; j < K; ++j) mu += in[j];
        mu /= static_cast<double>(K);
        double var = 0.0;
        for (int64_t j = 0; j < K; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(K);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = inv;
        for (int64_t j = 0; j < K; ++j) {
            const double xh = (in[j] - mu) * inv;
            xhat[static_cast<size_t>(r * K + j)] = xh;
            vals[static_cast<size_t>(r * K + j)] = xh * gamma.data[static_cast<size_t>(j)] + beta.data[static_cast<size_t>(j)];
        }
    }
    apply_dtype(vals, dt);
    Tensor out = Tensor::from(x.shape, std::move(vals), dt);
    return record(out, {&x, &gamma, &beta}, [&]() -> Tape::BackwardFn {
        const int idx = x.node, idg = gamma.node, idb = beta.node;
        std::vector<double> gam = gamma.data;
        return [=](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx, dg, db;
            if (idx >= 0) dx.assign(xhat.size(), 0.0);
            if (idg >= 0) dg.assign(static_cast<size_t>(K), 0.0);
            if (idb >= 0) db.assign(static_cast<size_t>(K), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * K;
                const double* xh = xhat.data() + r * K;
                const double inv = inv_std[static_cast<size_t>(r)];
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < K; ++j) {
                    const double gg = gr[j] * gam[static_cast<size_t>(j)];
                    m1 += gg;
                    m2 += gg * xh[j];
                }
                m1 /= static_cast<double>(K);
                m2 /= static_cast<double>(K);
                for (int64_t j = 0; j < K; ++j) {
                    const double gg = gr[j] * gam[static_cast<size_t>(j)];
                    if (idx >= 0) dx[static_cast<size_t>(r * K + j)] = inv * (gg - m1 - xh[j] * m2);
                    if (idg >= 0) dg[static_cast<size_t>(j)] += gr[j] * xh[j];
                    if (idb >= 0) db[static_cast<size_t>(j)] += gr[j];
                }
            }
            if (idx >= 0) tape.accumulate(idx, dx);
            if (idg >= 0) tape.accumulate(idg, dg);
            if (idb >= 0) tape.accumulate(idb, db);
        };
    });
}

namespace {

Tensor reduce_op(const Tensor& x, const std::vector<int>& axes, bool keepdims, bool take_mean, const char* name) {
    const int rank = x.rank();
    std::vector<bool> reduced(static_cast<size_t>(rank), false);
    for (int ax : axes) {
        const int a = normalize_axis(ax, rank, name);
        if (reduced[static_cast<size_t>(a)]) fail(std::string(name) + ": duplicate axis " + std::to_string(ax));
        reduced[static_cast<size_t>(a)] = true;
    }
    Shape kept(static_cast<size_t>(rank));
    int64_t count = 1;
    for (int a = 0; a < rank; ++a) {
        kept[static_cast<size_t>(a)] = reduced[static_cast<size_t>(a)] ? 1 : x.shape[static_cast<size_t>(a)];
        if (reduced[static_cast<size_t>(a)]) count *= x.shape[static_cast<size_t>(a)];
    }
    Shape out_shape;
    for (int a = 0; a < rank; ++a) {
        if (!reduced[static_cast<size_t>(a)]) {
            out_shape.push_back(x.shape[static_cast<size_t>(a)]);
        } else if (keepdims) {
            out_shape.push_back(1);
        }
    }
    if (out_shape.empty()) out_shape = {1};

    auto kst = strides_of(kept);
    std::vector<int64_t> ost(static_cast<size_t>(rank), 0);
    for (int a = 0; a < rank; ++a) ost[static_cast<size_t>(a)] = reduced[static_cast<size_t>(a)] ? 0 : kst[static_cast<size_t>(a)];
    const std::vector<int64_t> zero(static_cast<size_t>(rank), 0);

    std::vector<double> vals(static_cast<size_t>(numel(out_shape)), 0.0);
    auto in_strides = strides_of(x.shape);
    for_each_offsets(x.shape, ost, zero, [&](int64_t i, int64_t oo, int64_t) { vals[static_cast<size_t>(oo)] += x.data[static_cast<size_t>(i)]; });
    if (take_mean) {
        for (double& v : vals) v /= static_cast<double>(count);
    }
    apply_dtype(vals, x.dtype);
    Tensor out = Tensor::from(out_shape, std::move(vals), x.dtype);
    return record(out, {&x}, [&]() -> Tape::BackwardFn {
        const int id = x.node;
        const Shape xshape = x.shape;
        const double scale = take_mean ? 1.0 / static_cast<double>(count) : 1.0;
        return [id, xshape, ost, zero, scale](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx(static_cast<size_t>(numel(xshape)));
            for_each_offsets(xshape, ost, zero, [&](int64_t i, int64_t oo, int64_t) { dx[static_cast<size_t>(i)] = g[static_cast<size_t>(oo)] * scale; });
            tape.accumulate(id, dx);
        };
    });
}

}  // namespace

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) { return reduce_op(x, axes, keepdims, false, "sum"); }
Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) { return reduce_op(x, axes, keepdims, true, "mean"); }

Tensor sum_all(const Tensor& x) {
    std::vector<int> axes(static_cast<size_t>(x.rank()));
    for (int a = 0; a < x.rank(); ++a) axes[static_cast<size_t>(a)] = a;
    return reduce_op(x, axes, false, false, "sum_all");
}

Tensor mean_all(const Tensor& x) {
    std::vector<int> axes(static_cast<size_t>(x.rank()));
    for (int a = 0; a < x.rank(); ++a) axes[static_cast<size_t>(a)] = a;
    return reduce_op(x, axes, false, true, "mean_all");
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) fail("concat: no parts given");
    const int rank = parts[0].rank();
    const int ax = normalize_axis(axis, rank, "concat");
    const DType dt = parts[0].dtype;
    Shape out_shape = parts[0].shape;
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) fail("concat: rank mismatch, " + shape_str(parts[0].shape) + " vs " + shape_str(p.shape));
        if (p.dtype != dt) fail("concat: dtype mismatch between parts");
        for (int a = 0; a < rank; ++a) {
            if (a != ax && p.shape[static_cast<size_t>(a)] != out_shape[static_cast<size_t>(a)]) {
                fail("concat: shapes differ off-axis, " + shape_str(parts[0].shape) + " vs " + shape_str(p.shape));
            }
        }
        total += p.shape[static_cast<size_t>(ax)];
    }
    out_shape[static_cast<size_t>(ax)] = total;

    int64_t outer = 1, inner = 1;
    for (int a = 0; a < ax; ++a) outer *= out_shape[static_cast<size_t>(a)];
    for (int a = ax + 1; a < rank; ++a) inner *= out_shape[static_cast<size_t>(a)];

    std::vector<double> vals(static_cast<size_t>(numel(out_shape)));
    int64_t offset = 0;
    for (const Tensor& p : parts) {
        const int64_t extent = p.shape[static_cast<size_t>(ax)];
        const int64_t chunk = extent * inner;
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(p.data.begin() + o * chunk, p.data.begin() + (o + 1) * chunk,
                      vals.begin() + o * total * inner + offset * inner);
        }
        offset += extent;
    }
    Tensor out = Tensor::from(out_shape, std::move(vals), dt);

    Tape* tape = Tape::current();
    if (!tape) return out;
    std::vector<int> ids;
    std::vector<int64_t> extents;
    bool any = false;
    for (const Tensor& p : parts) {
        ids.push_back(p.node);
        extents.push_back(p.shape[static_cast<size_t>(ax)]);
        any = any || p.node >= 0;
    }
    if (!any) return out;
    std::vector<int> tracked;
    for (int id : ids) {
        if (id >= 0) tracked.push_back(id);
    }
    out.node = tape->push(tracked, out.shape, [ids, extents, outer, inner, total](const std::vector<double>& g, Tape& tp) {
        int64_t off = 0;
        for (size_t pi = 0; pi < ids.size(); ++pi) {
            const int64_t extent = extents[pi];
            if (ids[pi] >= 0) {
                const int64_t chunk = extent * inner;
                std::vector<double> dp(static_cast<size_t>(outer * chunk));
                for (int64_t o = 0; o < outer; ++o) {
                    std::copy(g.begin() + o * total * inner + off * inner,
                              g.begin() + o * total * inner + off * inner + chunk, dp.begin() + o * chunk);
                }
                tp.accumulate(ids[pi], dp);
            }
            off += extent;
        }
    });
    return out;
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int64_t>& sizes) {
    const int rank = x.rank();
    const int ax = normalize_axis(axis, rank, "split");
    int64_t total = 0;
    for (int64_t s : sizes) {
        if (s <= 0) fail("split: sizes must be positive");
        total += s;
    }
    if (total != x.shape[static_cast<size_t>(ax)]) {
        fail("split: sizes sum to " + std::to_string(total) + " but axis extent is " + std::to_string(x.shape[static_cast<size_t>(ax)]));
    }
    int64_t outer = 1, inner = 1;
    for (int a = 0; a < ax; ++a) outer *= x.shape[static_cast<size_t>(a)];
    for (int a = ax + 1; a < rank; ++a) inner *= x.shape[static_cast<size_t>(a)];

    std::vector<Tensor> parts;
    Tape* tape = Tape::current();
    int64_t offset = 0;
    for (int64_t extent : sizes) {
        Shape pshape = x.shape;
        pshape[static_cast<size_t>(ax)] = extent;
        std::vector<double> vals(static_cast<size_t>(numel(pshape)));
        const int64_t chunk = extent * inner;
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(x.data.begin() + o * total * inner + offset * inner,
                      x.data.begin() + o * total * inner + offset * inner + chunk, vals.begin() + o * chunk);
        }
        Tensor part = Tensor::from(pshape, std::move(vals), x.dtype);
        if (tape && x.node >= 0) {
            const int id = x.node;
            const int64_t off = offset;
            const int64_t xnum = numel(x.shape);
            part.node = tape->push({id}, pshape, [id, off, extent, outer, inner, total, xnum](const std::vector<double>& g, Tape& tp) {
                std::vector<double> dx(static_cast<size_t>(xnum), 0.0);
                const int64_t chunk2 = extent * inner;
                for (int64_t o = 0; o < outer; ++o) {
                    std::copy(g.begin() + o * chunk2, g.begin() + (o + 1) * chunk2,
                              dx.begin() + o * total * inner + off * inner);
                }
                tp.accumulate(id, dx);
            });
        }
        parts.push_back(std::move(part));
        offset += extent;
    }
    return parts;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() < 2) fail("transpose: rank must be >= 2, got " + shape_str(x.shape));
    Shape out_shape = x.shape;
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    const int64_t m = x.shape[x.shape.size() - 2];
    const int64_t n = x.shape[x.shape.size() - 1];
    const int64_t batches = numel(x.shape) / (m * n);
    std::vector<double> vals(x.data.size());
    for (int64_t b = 0; b < batches; ++b) {
        const double* in = x.data.data() + b * m * n;
        double* o = vals.data() + b * m * n;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) o[j * m + i] = in[i * n + j];
        }
    }
    Tensor out = Tensor::from(out_shape, std::move(vals), x.dtype);
    return record(out, {&x}, [&]() -> Tape::BackwardFn {
        const int id = x.node;
        return [id, m, n, batches](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx(g.size());
            for (int64_t b = 0; b < batches; ++b) {
                const double* gr = g.data() + b * m * n;
                double* o = dx.data() + b * m * n;
                // upstream is [n,m]; send entry (j,i) back to (i,j)
                for (int64_t j = 0; j < n; ++j) {
                    for (int64_t i = 0; i < m; ++i) o[i * n + j] = gr[j * m + i];
                }
            }
            tape.accumulate(id, dx);
        };
    });
}

Tensor reshape(const Tensor& x, const Shape& s) {
    if (numel(s) != numel(x.shape)) {
        fail("reshape: element count mismatch, " + shape_str(x.shape) + " -> " + shape_str(s));
    }
    Tensor out = Tensor::from(s, x.data, x.dtype);
    return record(out, {&x}, [&]() -> Tape::BackwardFn {
        const int id = x.node;
        return [id](const std::vector<double>& g, Tape& tape) { tape.accumulate(id, g); };
    });
}

Tensor broadcast_to(const Tensor& x, const Shape& s) {
    if (x.rank() > static_cast<int>(s.size())) {
        fail("broadcast_to: cannot reduce rank, " + shape_str(x.shape) + " -> " + shape_str(s));
    }
    const int off = static_cast<int>(s.size()) - x.rank();
    for (int a = 0; a < x.rank(); ++a) {
        const int64_t xi = x.shape[static_cast<size_t>(a)];
        if (xi != s[static_cast<size_t>(a + off)] && xi != 1) {
            fail("broadcast_to: shape " + shape_str(x.shape) + " is incompatible with " + shape_str(s));
        }
    }
    auto sx = padded_strides(x.shape, s);
    const std::vector<int64_t> zero(s.size(), 0);
    std::vector<double> vals(static_cast<size_t>(numel(s)));
    for_each_offsets(s, sx, zero, [&](int64_t i, int64_t ox, int64_t) { vals[static_cast<size_t>(i)] = x.data[static_cast<size_t>(ox)]; });
    Tensor out = Tensor::from(s, std::move(vals), x.dtype);
    return record(out, {&x}, [&]() -> Tape::BackwardFn {
        const int id = x.node;
        const Shape xshape = x.shape;
        const Shape oshape = s;
        return [id, xshape, oshape, sx, zero](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx(static_cast<size_t>(numel(xshape)), 0.0);
            for_each_offsets(oshape, sx, zero, [&](int64_t i, int64_t ox, int64_t) { dx[static_cast<size_t>(ox)] += g[static_cast<size_t>(i)]; });
            tape.accumulate(id, dx);
        };
    });
}

Tensor avg_pool2d(const Tensor& x, int factor) {
    if (factor < 1) fail("avg_pool2d: factor must be >= 1");
    if (x.rank() != 3 && x.rank() != 4) {
        fail("avg_pool2d: input must be [H,W,C] or [B,H,W,C], got " + shape_str(x.shape));
    }
    const bool batched = x.rank() == 4;
    const int64_t B = batched ? x.shape[0] : 1;
    const int64_t H = x.shape[batched ? 1 : 0];
    const int64_t W = x.shape[batched ? 2 : 1];
    const int64_t C = x.shape[batched ? 3 : 2];
    const int64_t f = factor;
    if (H % f != 0 || W % f != 0) {
        fail("avg_pool2d: spatial extents " + shape_str(x.shape) + " not divisible by factor " + std::to_string(factor));
    }
    const int64_t Ho = H / f, Wo = W / f;
    Shape out_shape = batched ? Shape{B, Ho, Wo, C} : Shape{Ho, Wo, C};
    std::vector<double> vals(static_cast<size_t>(numel(out_shape)), 0.0);
    const double inv = 1.0 / static_cast<double>(f * f);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                for (int64_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int64_t dy = 0; dy < f; ++dy) {
                        for (int64_t dx = 0; dx < f; ++dx) {
                            acc += x.data[static_cast<size_t>((((b * H) + oy * f + dy) * W + ox * f + dx) * C + c)];
                        }
                    }
                    vals[static_cast<size_t>(((b * Ho + oy) * Wo + ox) * C + c)] = acc * inv;
                }
            }
        }
    }
    apply_dtype(vals, x.dtype);
    Tensor out = Tensor::from(out_shape, std::move(vals), x.dtype);
    return record(out, {&x}, [&]() -> Tape::BackwardFn {
        const int id = x.node;
        const int64_t total = numel(x.shape);
        return [=](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx(static_cast<size_t>(total), 0.0);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        for (int64_t c = 0; c < C; ++c) {
                            const double gv = g[static_cast<size_t>(((b * Ho + oy) * Wo + ox) * C + c)] * inv;
                            for (int64_t dy = 0; dy < f; ++dy) {
                                for (int64_t ddx = 0; ddx < f; ++ddx) {
                                    dx[static_cast<size_t>((((b * H) + oy * f + dy) * W + ox * f + ddx) * C + c)] += gv;
                                }
                            }
                        }
                    }
                }
            }
            tape.accumulate(id, dx);
        };
    });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) fail("cross_entropy_mean: logits must be [B,K], got " + shape_str(logits.shape));
    const int64_t B = logits.shape[0];
    const int64_t K = logits.shape[1];
    if (static_cast<int64_t>(labels.size()) != B) {
        fail("cross_entropy_mean: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
    }
    for (int64_t b = 0; b < B; ++b) {
        if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= K) {
            fail("cross_entropy_mean: label out of range at row " + std::to_string(b));
        }
    }
    std::vector<double> probs(logits.data.size());
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const double* row = logits.data.data() + b * K;
        double mx = row[0];
        for (int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < K; ++j) {
            probs[static_cast<size_t>(b * K + j)] = std::exp(row[j] - mx);
            s += probs[static_cast<size_t>(b * K + j)];
        }
        for (int64_t j = 0; j < K; ++j) probs[static_cast<size_t>(b * K + j)] /= s;
        loss += (mx + std::log(s)) - row[labels[static_cast<size_t>(b)]];
    }
    loss /= static_cast<double>(B);
    std::vector<double> v{loss};
    apply_dtype(v, logits.dtype);
    Tensor out = Tensor::from({1}, std::move(v), logits.dtype);
    return record(out, {&logits}, [&]() -> Tape::BackwardFn {
        const int id = logits.node;
        std::vector<int> lab = labels;
        return [id, probs, lab, B, K](const std::vector<double>& g, Tape& tape) {
            std::vector<double> dx(probs.size());
            const double scale = g[0] / static_cast<double>(B);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t j = 0; j < K; ++j) {
                    const double onehot = j == lab[static_cast<size_t>(b)] ? 1.0 : 0.0;
                    dx[static_cast<size_t>(b * K + j)] = scale * (probs[static_cast<size_t>(b * K + j)] - onehot);
                }
            }
            tape.accumulate(id, dx);
        };
    });
}

}  // namespace s6la
