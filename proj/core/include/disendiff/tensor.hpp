// Dense tensors with tape-based reverse-mode differentiation.
//
// Values are held as doubles; in f32 precision mode every op result is
// rounded through float so training runs see 32-bit arithmetic while
// gradcheck can switch the whole graph to full doubles.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace disendiff {

enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

// Disables tape recording while alive (sampling, evaluation).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
  private:
    bool prev_;
};
bool grad_enabled();

using Shape = std::vector<int>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // pushes this->grad into parents
    std::int64_t id = 0;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const;
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& data() { return node_->data; }
    double item() const;  // scalar tensors only
    double at(std::int64_t i) const { return node_->data[static_cast<size_t>(i)]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad();

    Tensor detach() const;
    Tensor clone() const;

    std::shared_ptr<Node> node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

// ---- ops ------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor div(const Tensor& a, const Tensor& b);          // elementwise
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor emin(const Tensor& a, const Tensor& b);         // ties route grad to a
Tensor emax(const Tensor& a, const Tensor& b);         // ties route grad to a
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);                           // -> scalar
Tensor mean(const Tensor& a);                          // -> scalar
Tensor softmax_lastdim(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);       // (m,k)x(k,n)
Tensor add_rowvec(const Tensor& a, const Tensor& v);   // (m,n)+(n,)
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose2d(const Tensor& a);                   // (m,n) -> (n,m)
Tensor slice_cols(const Tensor& a, int c0, int c1);    // columns [c0,c1)
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);  // along dim 0
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_lastdim(const Tensor& a, int index);      // drop last axis
Tensor mean_firstdim(const Tensor& a);                 // average over dim 0

// x: (Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout) or undefined
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int stride = 1, int pad = 1);
Tensor upsample_nearest2x(const Tensor& x);            // (C,H,W) -> (C,2H,2W)
Tensor add_channel_bias(const Tensor& x, const Tensor& v);  // (C,H,W)+(C,)
Tensor concat_channels(const Tensor& a, const Tensor& b);
// x: (C,H,W); gamma,beta: (C)
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps = 1e-5);
// Single-channel (H,W) convolution with an externally supplied kernel
// (kxk, not differentiated) and reflect padding.
Tensor conv2d_reflect_fixed(const Tensor& x, const std::vector<double>& kernel,
                            int k);

void backward(const Tensor& loss);

// ---- gradcheck ------------------------------------------------------------

// Central finite differences (h = 1e-5) against the tape gradient.
// Returns max over elements of |analytic - numeric| / max(|numeric|, 1e-8).
double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                 double h = 1e-5);

}  // namespace disendiff
