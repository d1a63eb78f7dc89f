#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mlang/errors.hpp"
#include "mlang/motion.hpp"
#include "mlang/rng.hpp"

// Reverse-mode autodiff over flat double tensors. Small tape engine: every
// op computes eagerly and records a backward closure. Double precision
// throughout so gradient checks against central finite differences are
// clean; parameters serialize as float32 (see blob.hpp).
namespace mlang::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Arr = Eigen::ArrayXd;

struct Node {
  std::vector<int> shape;
  Arr value;
  Arr grad;  // empty until touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;
  int64_t seq = 0;

  int64_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad = Arr::Zero(value.size());
  }
};

// Scoped switch that disables taping; values still flow.
bool& grad_enabled();
struct NoGrad {
  NoGrad() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGrad() { grad_enabled() = prev; }
  bool prev;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor leaf(std::vector<int> shape, bool requires_grad = true);
  static Tensor constant(std::vector<int> shape, const double* data);
  static Tensor constant(const Mat& m);          // 2D row-major copy
  static Tensor constant(const std::vector<double>& v);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  Node* node() const { return node_.get(); }
  std::shared_ptr<Node> ptr() const { return node_; }

  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int rows() const { return node_->shape[0]; }
  int cols() const { return node_->shape[1]; }
  int64_t numel() const { return node_->numel(); }

  Arr& value() const { return node_->value; }
  Arr& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  double item() const { return node_->value[0]; }

  Eigen::Map<RowMat> mat() const {
    return Eigen::Map<RowMat>(node_->value.data(), rows(), cols());
  }
  Mat to_mat() const { return mat(); }

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar root.
void backward(const Tensor& root);

// --- elementwise / arithmetic -----------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor square(const Tensor& a);

// Bias adds: per-column vector over rows of a 2D tensor, and per-row
// (channel) vector; conv layout is [channels, time].
Tensor add_rowvec(const Tensor& a, const Tensor& b);   // b: [cols]
Tensor add_per_row(const Tensor& a, const Tensor& b);  // b: [rows]

// --- reductions ----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// --- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);     // [n,k]x[k,m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n,k]x[m,k]^T -> [n,m]
Tensor transpose(const Tensor& a);

// --- shape ops -----------------------------------------------------------
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor slice_rows(const Tensor& a, int r0, int n);
Tensor slice_cols(const Tensor& a, int c0, int n);
Tensor concat_rows(const std::vector<Tensor>& parts);
// Copies x into columns [col0, col0+x.cols) of a constant base.
Tensor overlay_cols(const Mat& base, const Tensor& x, int col0);
Tensor detach(const Tensor& a);

// --- softmax family ---------------------------------------------------------
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

// Root-mean-square norm over each row, scaled by a learned weight vector.
Tensor rmsnorm(const Tensor& x, const Tensor& w, double eps = 1e-6);

// Row gather; table gradient is scatter-added (shared embedding tables).
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// out[i] = a[i, cols[i]]; used to pick target log-probabilities.
Tensor pick_per_row(const Tensor& a, const std::vector<int>& cols);

// --- temporal convolutions (layout [channels, time]) -----------------------
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);  // w: [cout, cin, k]
Tensor conv1d_transpose(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad);  // w: [cin, cout, k]
Tensor cumsum_cols(const Tensor& a);

// --- geometry ops ------------------------------------------------------------
// Rows of 6D rotations -> rows of 3x3 matrices stored column-major.
Tensor rot6d_mats(const Tensor& x);
// Per-row geodesic angle between predicted and constant target matrices;
// the acos derivative is zeroed within 1e-7 of |cos| = 1.
Tensor geodesic_to_const(const Tensor& pred, const Mat& target);
// Kinematic chain + surface markers. rot: [T*52, 9] column-major matrices in
// skeleton joint order; returns [T, 52*marker_count*3].
Tensor fk_markers(const Tensor& rot, const ProxySkeleton& skeleton,
                  const Mat& translation);

// --- parameters -------------------------------------------------------------

struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, std::vector<int> shape);
  Tensor find(const std::string& name) const;
  void zero_grad();
  int64_t total_params() const;
};

// Draws rounded through float32 so freshly initialized parameters are
// exactly representable in checkpoint precision.
void init_uniform(const Tensor& t, Rng& rng, double lo, double hi);
void init_normal(const Tensor& t, Rng& rng, double stddev);
void init_zero(const Tensor& t);
void init_const(const Tensor& t, double v);

// Kaiming-style fan-in bound for conv/linear weights.
double fan_in_bound(int fan_in);

// --- optimizer ----------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;  // <= 0 disables
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Clips the global gradient norm, applies one decoupled-weight-decay
  // step and returns the pre-clip norm.
  double step(ParamStore& params);

  AdamWConfig& config() { return cfg_; }
  int64_t steps_taken() const { return t_; }

  // State round-trips through the float32 blob alongside checkpoints.
  void save_state(const ParamStore& params,
                  std::vector<std::pair<std::string, std::pair<std::vector<int>, std::vector<double>>>>& out) const;
  void load_state(const ParamStore& params,
                  const std::unordered_map<std::string, std::vector<double>>& m,
                  const std::unordered_map<std::string, std::vector<double>>& v,
                  int64_t step_count);

  // Rounds moment estimates to float32, matching what a reload would see.
  void round_state_to_f32();

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::unordered_map<const Node*, std::pair<Arr, Arr>> state_;
};

// Rounds every parameter (and value) to float32 precision in place; called
// when emitting checkpoints so that a reloaded run is bit-identical.
void round_to_f32(ParamStore& params);

}  // namespace mlang::nn
