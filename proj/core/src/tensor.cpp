#include "disendiff/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace disendiff {

namespace {

Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;
std::atomic<std::int64_t> g_next_id{1};

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
}

std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// In f32 mode every freshly produced value is rounded to float.
void quantize(std::vector<double>& v) {
    if (g_precision == Precision::f32) {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }
}

std::shared_ptr<Node> make_node(Shape shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(numel_of(n->shape)), 0.0);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

void ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
}

// Wires parents/backward only when recording is on and some input needs grad.
Tensor finish(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> bw) {
    quantize(out->data);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) needs = true;
    }
    if (needs) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backward_fn = std::move(bw);
    }
    return Tensor(out);
}

}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

std::int64_t Tensor::numel() const { return numel_of(node_->shape); }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = make_node(shape);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto n = make_node(shape);
    std::fill(n->data.begin(), n->data.end(), value);
    quantize(n->data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data,
                         bool requires_grad) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
        throw std::invalid_argument("from_data: data length " +
                                    std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    auto n = make_node(shape);
    n->data = std::move(data);
    quantize(n->data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item: tensor is not scalar, shape " +
                                    shape_str(node_->shape));
    return node_->data[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
    auto n = make_node(node_->shape);
    n->data = node_->data;
    n->requires_grad = false;
    return Tensor(n);
}

Tensor Tensor::clone() const {
    auto n = make_node(node_->shape);
    n->data = node_->data;
    n->requires_grad = node_->requires_grad;
    return Tensor(n);
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor binary_ew(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    auto out = make_node(an->shape);
    const size_t n = an->data.size();
    for (size_t i = 0; i < n; ++i) out->data[i] = fwd(an->data[i], bn->data[i]);
    return finish(out, {an, bn}, [an, bn, bwd](Node& o) {
        const size_t m = o.data.size();
        if (an->requires_grad) ensure_grad(*an);
        if (bn->requires_grad) ensure_grad(*bn);
        for (size_t i = 0; i < m; ++i) {
            double da = 0, db = 0;
            bwd(an->data[i], bn->data[i], o.grad[i], da, db);
            if (an->requires_grad) an->grad[i] += da;
            if (bn->requires_grad) bn->grad[i] += db;
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_ew("add", a, b, [](double x, double y) { return x + y; },
                     [](double, double, double g, double& da, double& db) {
                         da = g;
                         db = g;
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_ew("sub", a, b, [](double x, double y) { return x - y; },
                     [](double, double, double g, double& da, double& db) {
                         da = g;
                         db = -g;
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_ew("mul", a, b, [](double x, double y) { return x * y; },
                     [](double x, double y, double g, double& da, double& db) {
                         da = g * y;
                         db = g * x;
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_ew("div", a, b, [](double x, double y) { return x / y; },
                     [](double x, double y, double g, double& da, double& db) {
                         da = g / y;
                         db = -g * x / (y * y);
                     });
}

Tensor emin(const Tensor& a, const Tensor& b) {
    return binary_ew("emin", a, b,
                     [](double x, double y) { return x <= y ? x : y; },
                     [](double x, double y, double g, double& da, double& db) {
                         if (x <= y) da = g; else db = g;
                     });
}

Tensor emax(const Tensor& a, const Tensor& b) {
    return binary_ew("emax", a, b,
                     [](double x, double y) { return x >= y ? x : y; },
                     [](double x, double y, double g, double& da, double& db) {
                         if (x >= y) da = g; else db = g;
                     });
}

Tensor add_scalar(const Tensor& a, double s) {
    auto an = a.node();
    auto out = make_node(an->shape);
    for (size_t i = 0; i < an->data.size(); ++i) out->data[i] = an->data[i] + s;
    return finish(out, {an}, [an](Node& o) {
        ensure_grad(*an);
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    auto an = a.node();
    auto out = make_node(an->shape);
    for (size_t i = 0; i < an->data.size(); ++i) out->data[i] = an->data[i] * s;
    return finish(out, {an}, [an, s](Node& o) {
        ensure_grad(*an);
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
    });
}

Tensor relu(const Tensor& a) {
    auto an = a.node();
    auto out = make_node(an->shape);
    for (size_t i = 0; i < an->data.size(); ++i)
        out->data[i] = an->data[i] > 0 ? an->data[i] : 0.0;
    return finish(out, {an}, [an](Node& o) {
        ensure_grad(*an);
        for (size_t i = 0; i < o.grad.size(); ++i)
            if (an->data[i] > 0) an->grad[i] += o.grad[i];
    });
}

Tensor silu(const Tensor& a) {
    auto an = a.node();
    auto out = make_node(an->shape);
    for (size_t i = 0; i < an->data.size(); ++i) {
        double x = an->data[i];
        out->data[i] = x / (1.0 + std::exp(-x));
    }
    return finish(out, {an}, [an](Node& o) {
        ensure_grad(*an);
        for (size_t i = 0; i < o.grad.size(); ++i) {
            double x = an->data[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            an->grad[i] += o.grad[i] * (s + x * s * (1.0 - s));
        }
    });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
    auto an = a.node();
    auto out = make_node({1});
    double acc = 0;
    for (double v : an->data) acc += v;  // fixed index order
    out->data[0] = acc;
    return finish(out, {an}, [an](Node& o) {
        ensure_grad(*an);
        for (double& g : an->grad) g += o.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    auto an = a.node();
    auto out = make_node({1});
    double acc = 0;
    for (double v : an->data) acc += v;
    const double inv = 1.0 / static_cast<double>(an->data.size());
    out->data[0] = acc * inv;
    return finish(out, {an}, [an, inv](Node& o) {
        ensure_grad(*an);
        for (double& g : an->grad) g += o.grad[0] * inv;
    });
}

Tensor softmax_lastdim(const Tensor& a) {
    auto an = a.node();
    const Shape& s = an->shape;
    const int n = s.back();
    const std::int64_t rows = numel_of(s) / n;
    auto out = make_node(s);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = an->data.data() + r * n;
        double* y = out->data.data() + r * n;
        double m = x[0];
        for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
        double z = 0;
        for (int i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        for (int i = 0; i < n; ++i) y[i] /= z;
    }
    return finish(out, {an}, [an, rows, n](Node& o) {
        ensure_grad(*an);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = o.data.data() + r * n;
            const double* g = o.grad.data() + r * n;
            double dot = 0;
            for (int i = 0; i < n; ++i) dot += y[i] * g[i];
            double* gx = an->grad.data() + r * n;
            for (int i = 0; i < n; ++i) gx[i] += y[i] * (g[i] - dot);
        }
    });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 ||
        a.shape()[1] != b.shape()[0])
        shape_error("matmul", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    const int m = an->shape[0], k = an->shape[1], n = bn->shape[1];
    auto out = make_node({m, n});
    const double* A = an->data.data();
    const double* B = bn->data.data();
    double* C = out->data.data();
    for (int i = 0; i < m; ++i) {
        double* crow = C + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = A[static_cast<std::int64_t>(i) * k + p];
            const double* brow = B + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return finish(out, {an, bn}, [an, bn, m, k, n](Node& o) {
        const double* G = o.grad.data();
        if (an->requires_grad) {
            ensure_grad(*an);
            const double* B = bn->data.data();
            double* GA = an->grad.data();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double acc = 0;
                    const double* grow = G + static_cast<std::int64_t>(i) * n;
                    const double* brow = B + static_cast<std::int64_t>(p) * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    GA[static_cast<std::int64_t>(i) * k + p] += acc;
                }
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            const double* A = an->data.data();
            double* GB = bn->grad.data();
            for (int p = 0; p < k; ++p) {
                double* gbrow = GB + static_cast<std::int64_t>(p) * n;
                for (int i = 0; i < m; ++i) {
                    const double av = A[static_cast<std::int64_t>(i) * k + p];
                    const double* grow = G + static_cast<std::int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.shape().size() != 2 || v.shape().size() != 1 ||
        a.shape()[1] != v.shape()[0])
        shape_error("add_rowvec", a.shape(), v.shape());
    auto an = a.node(), vn = v.node();
    const int m = an->shape[0], n = an->shape[1];
    auto out = make_node({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<size_t>(i * n + j)] =
                an->data[static_cast<size_t>(i * n + j)] + vn->data[static_cast<size_t>(j)];
    return finish(out, {an, vn}, [an, vn, m, n](Node& o) {
        if (an->requires_grad) {
            ensure_grad(*an);
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (vn->requires_grad) {
            ensure_grad(*vn);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    vn->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i * n + j)];
        }
    });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (numel_of(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
    auto an = a.node();
    auto out = make_node(shape);
    out->data = an->data;
    return finish(out, {an}, [an](Node& o) {
        ensure_grad(*an);
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    });
}

Tensor transpose2d(const Tensor& a) {
    if (a.shape().size() != 2) shape_error("transpose2d", a.shape(), {});
    auto an = a.node();
    const int m = an->shape[0], n = an->shape[1];
    auto out = make_node({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<size_t>(j * m + i)] = an->data[static_cast<size_t>(i * n + j)];
    return finish(out, {an}, [an, m, n](Node& o) {
        ensure_grad(*an);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                an->grad[static_cast<size_t>(i * n + j)] += o.grad[static_cast<size_t>(j * m + i)];
    });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (a.shape().size() != 2 || c0 < 0 || c1 > a.shape()[1] || c0 >= c1)
        throw std::out_of_range("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for shape " + shape_str(a.shape()));
    auto an = a.node();
    const int m = an->shape[0], n = an->shape[1], w = c1 - c0;
    auto out = make_node({m, w});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            out->data[static_cast<size_t>(i * w + j)] = an->data[static_cast<size_t>(i * n + c0 + j)];
    return finish(out, {an}, [an, m, n, w, c0](Node& o) {
        ensure_grad(*an);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                an->grad[static_cast<size_t>(i * n + c0 + j)] += o.grad[static_cast<size_t>(i * w + j)];
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
        shape_error("concat_cols", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    const int m = an->shape[0], na = an->shape[1], nb = bn->shape[1];
    auto out = make_node({m, na + nb});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < na; ++j)
            out->data[static_cast<size_t>(i * (na + nb) + j)] = an->data[static_cast<size_t>(i * na + j)];
        for (int j = 0; j < nb; ++j)
            out->data[static_cast<size_t>(i * (na + nb) + na + j)] = bn->data[static_cast<size_t>(i * nb + j)];
    }
    return finish(out, {an, bn}, [an, bn, m, na, nb](Node& o) {
        if (an->requires_grad) ensure_grad(*an);
        if (bn->requires_grad) ensure_grad(*bn);
        for (int i = 0; i < m; ++i) {
            if (an->requires_grad)
                for (int j = 0; j < na; ++j)
                    an->grad[static_cast<size_t>(i * na + j)] +=
                        o.grad[static_cast<size_t>(i * (na + nb) + j)];
            if (bn->requires_grad)
                for (int j = 0; j < nb; ++j)
                    bn->grad[static_cast<size_t>(i * nb + j)] +=
                        o.grad[static_cast<size_t>(i * (na + nb) + na + j)];
        }
    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 ||
        a.shape()[1] != b.shape()[1])
        shape_error("concat_rows", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    const int n = an->shape[1];
    auto out = make_node({an->shape[0] + bn->shape[0], n});
    std::copy(an->data.begin(), an->data.end(), out->data.begin());
    std::copy(bn->data.begin(), bn->data.end(),
              out->data.begin() + static_cast<std::ptrdiff_t>(an->data.size()));
    const size_t na = an->data.size();
    return finish(out, {an, bn}, [an, bn, na](Node& o) {
        if (an->requires_grad) {
            ensure_grad(*an);
            for (size_t i = 0; i < na; ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (size_t i = 0; i < bn->data.size(); ++i)
                bn->grad[i] += o.grad[na + i];
        }
    });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) shape_error("gather_rows", table.shape(), {});
    auto tn = table.node();
    const int rows = tn->shape[0], cols = tn->shape[1];
    for (int id : ids)
        if (id < 0 || id >= rows)
            throw std::out_of_range("gather_rows: id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(rows) + ")");
    auto out = make_node({static_cast<int>(ids.size()), cols});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tn->data.begin() + static_cast<std::ptrdiff_t>(ids[i]) * cols,
                  tn->data.begin() + (static_cast<std::ptrdiff_t>(ids[i]) + 1) * cols,
                  out->data.begin() + static_cast<std::ptrdiff_t>(i) * cols);
    return finish(out, {tn}, [tn, ids, cols](Node& o) {
        ensure_grad(*tn);
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < cols; ++j)
                tn->grad[static_cast<size_t>(ids[i] * cols + j)] +=
                    o.grad[i * static_cast<size_t>(cols) + static_cast<size_t>(j)];
    });
}

Tensor slice_lastdim(const Tensor& a, int index) {
    const Shape& s = a.shape();
    const int n = s.back();
    if (index < 0 || index >= n)
        throw std::out_of_range("slice_lastdim: index " + std::to_string(index) +
                                " out of range [0," + std::to_string(n) + ")");
    auto an = a.node();
    Shape os(s.begin(), s.end() - 1);
    if (os.empty()) os = {1};
    const std::int64_t rows = numel_of(s) / n;
    auto out = make_node(os);
    for (std::int64_t r = 0; r < rows; ++r)
        out->data[static_cast<size_t>(r)] = an->data[static_cast<size_t>(r * n + index)];
    return finish(out, {an}, [an, rows, n, index](Node& o) {
        ensure_grad(*an);
        for (std::int64_t r = 0; r < rows; ++r)
            an->grad[static_cast<size_t>(r * n + index)] += o.grad[static_cast<size_t>(r)];
    });
}

Tensor mean_firstdim(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.size() < 2) shape_error("mean_firstdim", s, {});
    const int m = s[0];
    Shape os(s.begin() + 1, s.end());
    const std::int64_t inner = numel_of(os);
    auto an = a.node();
    auto out = make_node(os);
    const double inv = 1.0 / m;
    for (int i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
            out->data[static_cast<size_t>(j)] += an->data[static_cast<size_t>(i * inner + j)];
    for (auto& v : out->data) v *= inv;
    return finish(out, {an}, [an, m, inner, inv](Node& o) {
        ensure_grad(*an);
        for (int i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
                an->grad[static_cast<size_t>(i * inner + j)] += o.grad[static_cast<size_t>(j)] * inv;
    });
}

// ---- conv / spatial -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 3 || ws.size() != 4 || xs[0] != ws[1])
        shape_error("conv2d", xs, ws);
    auto xn = x.node(), wn = w.node();
    const int cin = xs[0], h = xs[1], wd = xs[2];
    const int cout = ws[0], kh = ws[2], kw = ws[3];
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    auto out = make_node({cout, oh, ow});

    const double* X = xn->data.data();
    const double* W = wn->data.data();
    double* Y = out->data.data();
    const bool fast33 = kh == 3 && kw == 3 && stride == 1 && pad == 1 && wd >= 2;
    if (fast33) {
        // fused 3-tap row kernel: one pass per (ki) instead of one per (ki,kj)
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci) {
                const double* xplane = X + static_cast<std::int64_t>(ci) * h * wd;
                const double* wk = W + (static_cast<std::int64_t>(co) * cin + ci) * 9;
                for (int i = 0; i < oh; ++i) {
                    double* yrow = Y + (static_cast<std::int64_t>(co) * oh + i) * ow;
                    for (int ki = 0; ki < 3; ++ki) {
                        const int ih = i + ki - 1;
                        if (ih < 0 || ih >= h) continue;
                        const double* xr = xplane + static_cast<std::int64_t>(ih) * wd;
                        const double w0 = wk[ki * 3], w1 = wk[ki * 3 + 1], w2 = wk[ki * 3 + 2];
                        yrow[0] += w1 * xr[0] + w2 * xr[1];
                        for (int j = 1; j < wd - 1; ++j)
                            yrow[j] += w0 * xr[j - 1] + w1 * xr[j] + w2 * xr[j + 1];
                        yrow[wd - 1] += w0 * xr[wd - 2] + w1 * xr[wd - 1];
                    }
                }
            }
    } else {
        for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
                const double* xplane = X + static_cast<std::int64_t>(ci) * h * wd;
                const double* wk = W + ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
                for (int i = 0; i < oh; ++i) {
                    double* yrow = Y + (static_cast<std::int64_t>(co) * oh + i) * ow;
                    for (int ki = 0; ki < kh; ++ki) {
                        const int ih = i * stride + ki - pad;
                        if (ih < 0 || ih >= h) continue;
                        const double* xrow = xplane + static_cast<std::int64_t>(ih) * wd;
                        const double* wrow = wk + static_cast<std::int64_t>(ki) * kw;
                        for (int kj = 0; kj < kw; ++kj) {
                            const double wv = wrow[kj];
                            const int off = kj - pad;
                            const int j0 = std::max(0, (pad - kj + stride - 1) / stride);
                            const int j1 = std::min(ow, (wd - off + stride - 1) / stride);
                            for (int j = j0; j < j1; ++j)
                                yrow[j] += wv * xrow[j * stride + off];
                        }
                    }
                }
            }
        }
    }
    std::vector<std::shared_ptr<Node>> parents = {xn, wn};
    std::shared_ptr<Node> bn;
    if (b.defined()) {
        bn = b.node();
        if (bn->shape != Shape{cout}) shape_error("conv2d bias", bn->shape, {cout});
        for (int co = 0; co < cout; ++co) {
            double* yp = Y + static_cast<std::int64_t>(co) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) yp[i] += bn->data[static_cast<size_t>(co)];
        }
        parents.push_back(bn);
    }
    return finish(out, parents,
                  [xn, wn, bn, cin, h, wd, cout, kh, kw, oh, ow, stride, pad](Node& o) {
        const double* G = o.grad.data();
        if (bn && bn->requires_grad) {
            ensure_grad(*bn);
            for (int co = 0; co < cout; ++co) {
                double acc = 0;
                const double* gp = G + static_cast<std::int64_t>(co) * oh * ow;
                for (int i = 0; i < oh * ow; ++i) acc += gp[i];
                bn->grad[static_cast<size_t>(co)] += acc;
            }
        }
        const bool fast33 = kh == 3 && kw == 3 && stride == 1 && pad == 1 && wd >= 2;
        if (wn->requires_grad && fast33) {
            ensure_grad(*wn);
            const double* X = xn->data.data();
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci) {
                    double a[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
                    const double* xplane = X + static_cast<std::int64_t>(ci) * h * wd;
                    for (int i = 0; i < oh; ++i) {
                        const double* gr = G + (static_cast<std::int64_t>(co) * oh + i) * ow;
                        for (int ki = 0; ki < 3; ++ki) {
                            const int ih = i + ki - 1;
                            if (ih < 0 || ih >= h) continue;
                            const double* xr = xplane + static_cast<std::int64_t>(ih) * wd;
                            double s0 = 0, s1 = 0, s2 = 0;
                            for (int j = 1; j < wd; ++j) s0 += gr[j] * xr[j - 1];
                            for (int j = 0; j < wd; ++j) s1 += gr[j] * xr[j];
                            for (int j = 0; j < wd - 1; ++j) s2 += gr[j] * xr[j + 1];
                            a[ki * 3] += s0;
                            a[ki * 3 + 1] += s1;
                            a[ki * 3 + 2] += s2;
                        }
                    }
                    double* wg = wn->grad.data() +
                                 (static_cast<std::int64_t>(co) * cin + ci) * 9;
                    for (int k = 0; k < 9; ++k) wg[k] += a[k];
                }
        } else if (wn->requires_grad) {
            ensure_grad(*wn);
            const double* X = xn->data.data();
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci) {
                    double* wg = wn->grad.data() +
                                 (static_cast<std::int64_t>(co) * cin + ci) * kh * kw;
                    const double* xplane = X + static_cast<std::int64_t>(ci) * h * wd;
                    for (int ki = 0; ki < kh; ++ki) {
                        const int i0 = std::max(0, (pad - ki + stride - 1) / stride);
                        const int i1 = std::min(oh, (h - (ki - pad) + stride - 1) / stride);
                        for (int kj = 0; kj < kw; ++kj) {
                            const int off = kj - pad;
                            const int j0 = std::max(0, (pad - kj + stride - 1) / stride);
                            const int j1 = std::min(ow, (wd - off + stride - 1) / stride);
                            double acc = 0;
                            for (int i = i0; i < i1; ++i) {
                                const double* gp =
                                    G + (static_cast<std::int64_t>(co) * oh + i) * ow;
                                const double* xrow =
                                    xplane + static_cast<std::int64_t>(i * stride + ki - pad) * wd;
                                for (int j = j0; j < j1; ++j)
                                    acc += gp[j] * xrow[j * stride + off];
                            }
                            wg[ki * kw + kj] += acc;
                        }
                    }
                }
        }
        if (xn->requires_grad && fast33) {
            ensure_grad(*xn);
            const double* W = wn->data.data();
            double* GX = xn->grad.data();
            // correlation with the flipped kernel, fused over kj like forward
            for (int ci = 0; ci < cin; ++ci)
                for (int co = 0; co < cout; ++co) {
                    const double* gp = G + static_cast<std::int64_t>(co) * oh * ow;
                    const double* wk = W + (static_cast<std::int64_t>(co) * cin + ci) * 9;
                    double* gxp = GX + static_cast<std::int64_t>(ci) * h * wd;
                    for (int i = 0; i < h; ++i) {
                        double* gxrow = gxp + static_cast<std::int64_t>(i) * wd;
                        for (int ki = 0; ki < 3; ++ki) {
                            const int oi = i - ki + 1;
                            if (oi < 0 || oi >= oh) continue;
                            const double* gr = gp + static_cast<std::int64_t>(oi) * ow;
                            const double w0 = wk[ki * 3], w1 = wk[ki * 3 + 1],
                                         w2 = wk[ki * 3 + 2];
                            gxrow[0] += w1 * gr[0] + w0 * gr[1];
                            for (int j = 1; j < wd - 1; ++j)
                                gxrow[j] += w2 * gr[j - 1] + w1 * gr[j] + w0 * gr[j + 1];
                            gxrow[wd - 1] += w2 * gr[wd - 2] + w1 * gr[wd - 1];
                        }
                    }
                }
        } else if (xn->requires_grad) {
            ensure_grad(*xn);
            const double* W = wn->data.data();
            double* GX = xn->grad.data();
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci) {
                    const double* wk = W + ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
                    double* gxp = GX + static_cast<std::int64_t>(ci) * h * wd;
                    for (int ki = 0; ki < kh; ++ki) {
                        const int i0 = std::max(0, (pad - ki + stride - 1) / stride);
                        const int i1 = std::min(oh, (h - (ki - pad) + stride - 1) / stride);
                        const double* wrow = wk + static_cast<std::int64_t>(ki) * kw;
                        for (int i = i0; i < i1; ++i) {
                            const double* gp = G + (static_cast<std::int64_t>(co) * oh + i) * ow;
                            double* gxrow =
                                gxp + static_cast<std::int64_t>(i * stride + ki - pad) * wd;
                            for (int kj = 0; kj < kw; ++kj) {
                                const int off = kj - pad;
                                const int j0 = std::max(0, (pad - kj + stride - 1) / stride);
                                const int j1 = std::min(ow, (wd - off + stride - 1) / stride);
                                const double wv = wrow[kj];
                                for (int j = j0; j < j1; ++j)
                                    gxrow[j * stride + off] += gp[j] * wv;
                            }
                        }
                    }
                }
        }
    });
}

Tensor upsample_nearest2x(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 3) shape_error("upsample_nearest2x", s, {});
    auto xn = x.node();
    const int c = s[0], h = s[1], w = s[2];
    auto out = make_node({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
                out->data[static_cast<size_t>((ci * 2 * h + i) * 2 * w + j)] =
                    xn->data[static_cast<size_t>((ci * h + i / 2) * w + j / 2)];
    return finish(out, {xn}, [xn, c, h, w](Node& o) {
        ensure_grad(*xn);
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < 2 * h; ++i)
                for (int j = 0; j < 2 * w; ++j)
                    xn->grad[static_cast<size_t>((ci * h + i / 2) * w + j / 2)] +=
                        o.grad[static_cast<size_t>((ci * 2 * h + i) * 2 * w + j)];
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& v) {
    const Shape& s = x.shape();
    if (s.size() != 3 || v.shape().size() != 1 || v.shape()[0] != s[0])
        shape_error("add_channel_bias", s, v.shape());
    auto xn = x.node(), vn = v.node();
    const int c = s[0], hw = s[1] * s[2];
    auto out = make_node(s);
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < hw; ++i)
            out->data[static_cast<size_t>(ci * hw + i)] =
                xn->data[static_cast<size_t>(ci * hw + i)] + vn->data[static_cast<size_t>(ci)];
    return finish(out, {xn, vn}, [xn, vn, c, hw](Node& o) {
        if (xn->requires_grad) {
            ensure_grad(*xn);
            for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        }
        if (vn->requires_grad) {
            ensure_grad(*vn);
            for (int ci = 0; ci < c; ++ci) {
                double acc = 0;
                for (int i = 0; i < hw; ++i) acc += o.grad[static_cast<size_t>(ci * hw + i)];
                vn->grad[static_cast<size_t>(ci)] += acc;
            }
        }
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 3 || bs.size() != 3 || as[1] != bs[1] || as[2] != bs[2])
        shape_error("concat_channels", as, bs);
    auto an = a.node(), bn = b.node();
    auto out = make_node({as[0] + bs[0], as[1], as[2]});
    std::copy(an->data.begin(), an->data.end(), out->data.begin());
    std::copy(bn->data.begin(), bn->data.end(),
              out->data.begin() + static_cast<std::ptrdiff_t>(an->data.size()));
    const size_t na = an->data.size();
    return finish(out, {an, bn}, [an, bn, na](Node& o) {
        if (an->requires_grad) {
            ensure_grad(*an);
            for (size_t i = 0; i < na; ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += o.grad[na + i];
        }
    });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[0] % groups != 0) shape_error("group_norm", s, {groups});
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    const int c = s[0], h = s[1], w = s[2];
    const int cg = c / groups;
    const std::int64_t gsz = static_cast<std::int64_t>(cg) * h * w;
    auto out = make_node(s);
    auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
    auto istds = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const double* xp = xn->data.data() + g * gsz;
        double m = 0;
        for (std::int64_t i = 0; i < gsz; ++i) m += xp[i];
        m /= static_cast<double>(gsz);
        double var = 0;
        for (std::int64_t i = 0; i < gsz; ++i) {
            const double d = xp[i] - m;
            var += d * d;
        }
        var /= static_cast<double>(gsz);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*means)[static_cast<size_t>(g)] = m;
        (*istds)[static_cast<size_t>(g)] = istd;
        double* yp = out->data.data() + g * gsz;
        for (int cc = 0; cc < cg; ++cc) {
            const double ga = gn->data[static_cast<size_t>(g * cg + cc)];
            const double be = bn->data[static_cast<size_t>(g * cg + cc)];
            for (int i = 0; i < h * w; ++i) {
                const std::int64_t idx = static_cast<std::int64_t>(cc) * h * w + i;
                yp[idx] = (xp[idx] - m) * istd * ga + be;
            }
        }
    }
    return finish(out, {xn, gn, bn},
                  [xn, gn, bn, groups, cg, h, w, gsz, means, istds](Node& o) {
        const double* G = o.grad.data();
        if (gn->requires_grad) ensure_grad(*gn);
        if (bn->requires_grad) ensure_grad(*bn);
        if (xn->requires_grad) ensure_grad(*xn);
        for (int g = 0; g < groups; ++g) {
            const double m = (*means)[static_cast<size_t>(g)];
            const double istd = (*istds)[static_cast<size_t>(g)];
            const double* xp = xn->data.data() + g * gsz;
            const double* gp = G + g * gsz;
            if (gn->requires_grad || bn->requires_grad) {
                for (int cc = 0; cc < cg; ++cc) {
                    double dg = 0, db = 0;
                    for (int i = 0; i < h * w; ++i) {
                        const std::int64_t idx = static_cast<std::int64_t>(cc) * h * w + i;
                        dg += gp[idx] * (xp[idx] - m) * istd;
                        db += gp[idx];
                    }
                    if (gn->requires_grad) gn->grad[static_cast<size_t>(g * cg + cc)] += dg;
                    if (bn->requires_grad) bn->grad[static_cast<size_t>(g * cg + cc)] += db;
                }
            }
            if (xn->requires_grad) {
                // dL/dxhat, then the usual normalization backward per group
                double sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int cc = 0; cc < cg; ++cc) {
                    const double ga = gn->data[static_cast<size_t>(g * cg + cc)];
                    for (int i = 0; i < h * w; ++i) {
                        const std::int64_t idx = static_cast<std::int64_t>(cc) * h * w + i;
                        const double dxhat = gp[idx] * ga;
                        const double xhat = (xp[idx] - m) * istd;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                const double n = static_cast<double>(gsz);
                double* gx = xn->grad.data() + g * gsz;
                for (int cc = 0; cc < cg; ++cc) {
                    const double ga = gn->data[static_cast<size_t>(g * cg + cc)];
                    for (int i = 0; i < h * w; ++i) {
                        const std::int64_t idx = static_cast<std::int64_t>(cc) * h * w + i;
                        const double dxhat = gp[idx] * ga;
                        const double xhat = (xp[idx] - m) * istd;
                        gx[idx] += istd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        }
    });
}

Tensor conv2d_reflect_fixed(const Tensor& x, const std::vector<double>& kernel, int k) {
    const Shape& s = x.shape();
    if (s.size() != 2) shape_error("conv2d_reflect_fixed", s, {});
    if (k % 2 == 0 || k < 1)
        throw std::invalid_argument("conv2d_reflect_fixed: kernel size must be odd, got " +
                                    std::to_string(k));
    if (static_cast<int>(kernel.size()) != k * k)
        throw std::invalid_argument("conv2d_reflect_fixed: kernel length mismatch");
    auto xn = x.node();
    const int h = s[0], w = s[1];
    const int r = k / 2;
    auto reflect = [](int i, int n) {
        // symmetric padding (edge sample repeated): every input pixel receives
        // exactly unit kernel weight, so a normalized kernel preserves mass
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - i - 1;
        }
        return i;
    };
    auto out = make_node(s);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double acc = 0;
            for (int ki = 0; ki < k; ++ki) {
                const int ii = reflect(i + ki - r, h);
                for (int kj = 0; kj < k; ++kj) {
                    const int jj = reflect(j + kj - r, w);
                    acc += kernel[static_cast<size_t>(ki * k + kj)] *
                           xn->data[static_cast<size_t>(ii * w + jj)];
                }
            }
            out->data[static_cast<size_t>(i * w + j)] = acc;
        }
    return finish(out, {xn}, [xn, kernel, k, h, w, r, reflect](Node& o) {
        ensure_grad(*xn);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double g = o.grad[static_cast<size_t>(i * w + j)];
                if (g == 0) continue;
                for (int ki = 0; ki < k; ++ki) {
                    const int ii = reflect(i + ki - r, h);
                    for (int kj = 0; kj < k; ++kj) {
                        const int jj = reflect(j + kj - r, w);
                        xn->grad[static_cast<size_t>(ii * w + jj)] +=
                            g * kernel[static_cast<size_t>(ki * k + kj)];
                    }
                }
            }
    });
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, shape has " +
                                    std::to_string(loss.numel()) + " elements");
    // iterative post-order DFS; children ordered by parent list for determinism
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    Node* root = loss.node().get();
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx].get();
            ++idx;
            if (!p->parents.empty() || p->requires_grad) {
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    ensure_grad(*root);
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---- gradcheck ---------------------------------------------------------------

double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
    Tensor xc = x.clone();
    xc.set_requires_grad(true);
    Tensor loss = f(xc);
    if (loss.numel() != 1)
        throw std::invalid_argument("gradcheck: f must be scalar-valued");
    backward(loss);
    std::vector<double> analytic(static_cast<size_t>(xc.numel()), 0.0);
    if (xc.has_grad()) analytic = xc.grad();

    double max_err = 0;
    Tensor xp = x.clone();
    xp.set_requires_grad(false);
    for (std::int64_t i = 0; i < xp.numel(); ++i) {
        const double orig = xp.data()[static_cast<size_t>(i)];
        xp.data()[static_cast<size_t>(i)] = orig + h;
        const double fp = f(xp).item();
        xp.data()[static_cast<size_t>(i)] = orig - h;
        const double fm = f(xp).item();
        xp.data()[static_cast<size_t>(i)] = orig;
        const double numeric = (fp - fm) / (2 * h);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[static_cast<size_t>(i)]))
            throw std::runtime_error("gradcheck: non-finite value at element " +
                                     std::to_string(i));
        const double err = std::abs(analytic[static_cast<size_t>(i)] - numeric) /
                           std::max(std::abs(numeric), 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace disendiff
