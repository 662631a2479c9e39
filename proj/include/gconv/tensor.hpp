#pragma once
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace gconv {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  long iteration;
  explicit TrainingError(const std::string& msg, long iter = -1)
      : std::runtime_error(msg), iteration(iter) {}
};

std::string shape_str(const std::vector<int>& shape);
size_t numel(const std::vector<int>& shape);

class Tape;

// Dense row-major value of 64-bit reals. Storage is shared: copies alias the
// same buffer. A tensor recorded on a tape carries (tape, node); constants
// carry tape == nullptr.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);
  Tensor(std::vector<int> s, std::vector<double> values);

  size_t size() const { return data ? data->size() : 0; }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double& operator[](size_t i) { return (*data)[i]; }
  double operator[](size_t i) const { return (*data)[i]; }
  bool on_tape() const { return tape != nullptr && node >= 0; }
};

// Returns a constant view sharing the same storage.
Tensor detach(const Tensor& t);

using BackwardFn = std::function<void(Tape&, const double*)>;

// Append-only record of a forward computation. backward() walks the record in
// reverse with a fixed accumulation order, so replaying a tape is bitwise
// reproducible.
class Tape {
public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When set, every recorded value is scanned; a NaN/Inf raises a ValueError
  // naming the operation. Used by grad_check and available for debugging.
  bool check_finite = false;

  uint64_t id() const { return id_; }
  size_t node_count() const { return ops_.size(); }
  const std::string& op_name(int node) const { return ops_[node]; }

  // Records an existing value as a leaf and returns the on-tape handle.
  Tensor watch(const Tensor& value, const std::string& name = "leaf");

  // Records an operation producing `out` (annotated in place with this tape).
  int record(const std::string& op, Tensor& out, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients in reverse order.
  // Gradients stay readable until the next backward() on this tape.
  void backward(const Tensor& loss);

  // Gradient of an on-tape tensor; nullptr when nothing flowed into it.
  const std::vector<double>* gradient(const Tensor& t) const;

  // For backward functions: zero-initialized gradient buffer of a node.
  double* grad_buffer(int node);

private:
  uint64_t id_;
  std::vector<std::string> ops_;
  std::vector<Tensor> values_;
  std::vector<BackwardFn> backs_;
  std::vector<std::vector<double>> grads_;
};

// Trainable value: a master copy living outside any tape plus the gradient
// from the most recent collect(). on(tape) watches the master copy once per
// tape and reuses the handle, so two uses in one graph share one leaf.
struct Param {
  std::string name;
  Tensor value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  Tensor on(Tape* tape) const;
  void collect(const Tape& tape);  // overwrites grad (zeros when untouched)
  void zero_grad();

private:
  mutable uint64_t seen_tape_ = 0;
  mutable Tensor handle_;
};

enum class Padding { same, valid };
enum class Act { relu, sigmoid, tanh, elu, glu };

// --- operations -------------------------------------------------------------
// Every op computes eagerly, and when an input sits on a tape it records a
// backward rule there. Mixing tensors from two different tapes is an error.

Tensor matmul(const Tensor& A, const Tensor& B);            // [r,c]x[c,k]
Tensor conv2d(const Tensor& X, const Tensor& K, int stride = 1,
              Padding padding = Padding::same);              // X[b,h,w,m], K[kh,kw,m,n]
Tensor gap(const Tensor& X);                                 // [b,h,w,m] -> [b,m], spatial mean
Tensor sum_spatial(const Tensor& X);                         // [b,h,w,m] -> [b,m], spatial sum
Tensor activation(const Tensor& X, Act kind);
Tensor relu(const Tensor& X);
Tensor sigmoid(const Tensor& X);
Tensor tanh_of(const Tensor& X);
Tensor softplus(const Tensor& X);                            // log(1+e^x), overflow-safe
Tensor concat(const Tensor& A, const Tensor& B);             // [b,p],[b,q] -> [b,p+q]
Tensor upsample_nearest(const Tensor& X, int factor = 2);
Tensor avgpool2(const Tensor& X);                            // 2x2 mean, stride 2

Tensor add(const Tensor& A, const Tensor& B);
Tensor sub(const Tensor& A, const Tensor& B);
Tensor mul(const Tensor& A, const Tensor& B);
Tensor scale(const Tensor& A, double s);
Tensor add_scalar(const Tensor& A, double s);
Tensor neg(const Tensor& A);
Tensor mean_all(const Tensor& A);                            // -> [1]
Tensor sum_all(const Tensor& A);                             // -> [1]
Tensor reshape(const Tensor& A, std::vector<int> s);         // shares storage

// Broadcast family (the only broadcasts supported):
Tensor add_channel(const Tensor& X, const Tensor& v);        // [...,m] + [m]
Tensor mul_channel(const Tensor& X, const Tensor& v);        // [...,m] * [m]
Tensor channel_mean(const Tensor& X);                        // [...,m] -> [m]
Tensor add_batch_channel(const Tensor& X, const Tensor& S);  // [b,...,m] + [b,m]
Tensor mul_batch_channel(const Tensor& X, const Tensor& S);  // [b,...,m] * [b,m]

Tensor rsqrt_eps(const Tensor& v, double eps);               // 1/sqrt(v+eps)
Tensor div_scalar(const Tensor& A, const Tensor& s);         // A / s, s of size 1

Tensor slice_batch(const Tensor& X, int i);                  // [b,...] -> [1,...]
Tensor slice_row(const Tensor& A, int i);                    // [b,n] -> [1,n]
Tensor concat_batch(const std::vector<Tensor>& parts);       // stack along dim 0

// Max over all coordinates of |analytic - central difference| /
// max(1e-8, |analytic| + |numeric|). f rebuilds the scalar loss on a fresh
// tape at each call; inputs are perturbed through their master copies.
double grad_check(const std::function<Tensor(Tape&)>& f,
                  const std::vector<Param*>& inputs, double step = 1e-6);

}  // namespace gconv
