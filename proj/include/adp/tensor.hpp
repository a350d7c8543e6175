#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace adp {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense row-major tensor of 64-bit reals with value semantics. While a Tape
// is active on the current thread, operations on watched leaves (and on
// results derived from them) are recorded for the reverse pass.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;

  // Populated in place by Tape::backward for watched leaves.
  std::optional<std::vector<double>> grad;

  // Recording state: node id on the tape identified by tape_id.
  int node = -1;
  uint64_t tape_id = 0;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  int64_t size() const { return static_cast<int64_t>(values.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }

  // Value of a one-element tensor.
  double item() const;

  double at(std::initializer_list<int64_t> index) const;
  double& at(std::initializer_list<int64_t> index);
};

// Recorded computation for one training run. Construction makes the tape
// active on the current thread; destruction restores the previous one.
// Independent tapes on different threads do not interact.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  uint64_t id() const { return id_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  // Registers `t` as a differentiable leaf. The tensor must outlive the
  // reverse pass; backward() fills t.grad in place.
  void watch(Tensor& t);

  // Reverse pass from a one-element tensor recorded on this tape. Each node
  // is visited at most once, in reverse topological order. Populates grad on
  // every watched leaf (zeros where the loss does not depend on it).
  void backward(const Tensor& loss);

  // Recording interface used by the tensor operations.
  int record(int64_t output_size, std::vector<int> inputs, BackwardFn fn);
  std::span<const double> grad(int node) const;
  std::vector<double>& grad_buffer(int node);  // allocates zeros on first use

 private:
  struct NodeRec {
    int64_t size;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  uint64_t id_;
  std::vector<NodeRec> nodes_;
  std::vector<std::vector<double>> grads_;  // empty vector = untouched
  std::vector<std::pair<int, Tensor*>> watched_;
  Tape* previous_ = nullptr;
};

// True when `t` carries a node recorded on the active tape.
bool on_active_tape(const Tensor& t);

// ---- elementwise operations ----
//
// Binary operations accept equal shapes, or a right operand whose shape is a
// trailing suffix of the left one (a channel vector (d) against (N,L,d) or
// (N,d), a position table (L,d) against (N,L,d), or a scalar). Gradients for
// a broadcast operand are summed over the leading axes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double c);  // scale by constant
Tensor div(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, double c);
Tensor maximum(const Tensor& a, const Tensor& b);  // ties propagate to a

Tensor sqrt(const Tensor& a);  // domain: a >= 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // domain: a > 0
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor relu(const Tensor& a);
Tensor neg(const Tensor& a);

// ---- reductions and structure ----

// Per-instance channel statistics over the location axis of (N,L,d).
// Variance is the biased estimator (divide by L).
struct LocationStats {
  Tensor mean;  // (N,d)
  Tensor var;   // (N,d)
};
LocationStats reduce_stats(const Tensor& x);
Tensor mean_locations(const Tensor& x);  // (N,L,d) -> (N,d)

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n) -> (m,n)
Tensor transpose(const Tensor& a);                // (m,n) -> (n,m)
Tensor reshape(const Tensor& a, Shape shape);

// Repeats per-instance channel rows over L locations: (N,d) -> (N,L,d).
Tensor expand_locations(const Tensor& s, int64_t locations);
// Extracts one location: (N,L,d) -> (N,d).
Tensor take_location(const Tensor& x, int64_t location);
// Gathers rows of (N,d) by index; backward scatter-adds.
Tensor index_rows(const Tensor& x, const std::vector<int>& rows);
// Prepends a learned token to every sequence: (N,L,d),(d) -> (N,L+1,d).
Tensor prepend_token(const Tensor& x, const Tensor& token);

Tensor reduce_rows_sum(const Tensor& x);  // sum over the last axis
Tensor reduce_rows_max(const Tensor& x);  // max over the last axis; first index wins ties
Tensor rows_norm(const Tensor& x);        // Euclidean norm over the last axis; subgradient 0 at 0
Tensor reduce_sum_all(const Tensor& x);
Tensor reduce_mean_all(const Tensor& x);

// Mean over the batch of -log softmax(logits)[label], computed with
// max-subtracted log-sum-exp. logits (N,C); labels in [0,C).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace adp
