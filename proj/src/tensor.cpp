#include "adp/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace adp {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<uint64_t> g_tape_counter{1};

[[noreturn]] void fail_shape(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch between " + shape_str(a) + " and " +
                              shape_str(b));
}

bool live_on(const Tape* tape, const Tensor& t) {
  return tape != nullptr && t.node >= 0 && t.tape_id == tape->id();
}

// Recording is demanded when the active tape can reach `t`. A leaf that
// requires grad but was never watched is an error rather than a silent
// constant.
bool wants_record(const Tape* tape, const Tensor& t, const char* op) {
  if (tape == nullptr) return false;
  if (live_on(tape, t)) return true;
  if (t.requires_grad) {
    throw std::logic_error(std::string(op) +
                           ": tensor requires grad but is not watched on the active tape");
  }
  return false;
}

// True when b's shape equals a trailing suffix of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  const size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i) {
    if (a[off + i] != b[i]) return false;
  }
  return true;
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  for (int64_t e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
  Tensor t;
  t.values.assign(static_cast<size_t>(numel(shape)), value);
  t.shape = std::move(shape);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor data of length " + std::to_string(values.size()) +
                                " does not fill shape " + shape_str(shape));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.values = {value};
  return t;
}

double Tensor::item() const {
  if (values.size() != 1) {
    throw std::invalid_argument("item() on a tensor of shape " + shape_str(shape));
  }
  return values[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  return const_cast<Tensor*>(this)->at(index);
}

double& Tensor::at(std::initializer_list<int64_t> index) {
  if (index.size() != shape.size()) {
    throw std::invalid_argument("index rank does not match tensor rank");
  }
  int64_t flat = 0;
  size_t axis = 0;
  for (int64_t i : index) {
    if (i < 0 || i >= shape[axis]) throw std::out_of_range("tensor index out of range");
    flat = flat * shape[axis] + i;
    ++axis;
  }
  return values[static_cast<size_t>(flat)];
}

// ---- Tape ----

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::watch(Tensor& t) {
  if (live_on(this, t)) return;
  t.requires_grad = true;
  t.node = record(t.size(), {}, nullptr);
  t.tape_id = id_;
  watched_.emplace_back(t.node, &t);
}

int Tape::record(int64_t output_size, std::vector<int> inputs, BackwardFn fn) {
  const int id = static_cast<int>(nodes_.size());
  for (int in : inputs) {
    if (in < 0 || in >= id) throw std::logic_error("tape inputs must precede the node");
  }
  nodes_.push_back(NodeRec{output_size, std::move(inputs), std::move(fn)});
  grads_.emplace_back();
  return id;
}

std::span<const double> Tape::grad(int node) const {
  const auto& g = grads_[static_cast<size_t>(node)];
  return {g.data(), g.size()};
}

std::vector<double>& Tape::grad_buffer(int node) {
  auto& g = grads_[static_cast<size_t>(node)];
  if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].size), 0.0);
  return g;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a one-element tensor, got " +
                                shape_str(loss.shape));
  }
  if (!live_on(this, loss)) {
    throw std::logic_error("backward: loss was not recorded on this tape");
  }
  for (auto& g : grads_) g.clear();
  grad_buffer(loss.node)[0] = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[static_cast<size_t>(i)].empty()) continue;
    if (nodes_[static_cast<size_t>(i)].backward) nodes_[static_cast<size_t>(i)].backward(*this, i);
  }
  for (auto& [node, tensor] : watched_) {
    const auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) {
      tensor->grad = std::vector<double>(tensor->values.size(), 0.0);
    } else {
      tensor->grad = g;
    }
  }
}

bool on_active_tape(const Tensor& t) { return live_on(Tape::active(), t); }

// ---- elementwise ----

namespace {

// out[i] = f(a[i], b[i % nb]) where b's shape is a trailing suffix of a's.
template <typename Fwd, typename Back>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Back back) {
  if (!is_suffix(a.shape, b.shape)) fail_shape(name, a.shape, b.shape);
  const int64_t na = a.size();
  const int64_t nb = b.size();
  Tensor out;
  out.shape = a.shape;
  out.values.resize(static_cast<size_t>(na));
  for (int64_t i = 0; i < na; ++i) {
    out.values[static_cast<size_t>(i)] =
        fwd(a.values[static_cast<size_t>(i)], b.values[static_cast<size_t>(i % nb)]);
  }

  Tape* tape = Tape::active();
  const bool rec_a = wants_record(tape, a, name);
  const bool rec_b = wants_record(tape, b, name);
  out.requires_grad = a.requires_grad || b.requires_grad;
  if (rec_a || rec_b) {
    const int an = rec_a ? a.node : -1;
    const int bn = rec_b ? b.node : -1;
    std::vector<int> inputs;
    if (rec_a) inputs.push_back(an);
    if (rec_b) inputs.push_back(bn);
    auto av = a.values;
    auto bv = b.values;
    out.node = tape->record(na, std::move(inputs),
                            [an, bn, na, nb, av = std::move(av), bv = std::move(bv),
                             back](Tape& t, int self) {
                              auto g = t.grad(self);
                              double* da = an >= 0 ? t.grad_buffer(an).data() : nullptr;
                              double* db = bn >= 0 ? t.grad_buffer(bn).data() : nullptr;
                              for (int64_t i = 0; i < na; ++i) {
                                const double ga = g[static_cast<size_t>(i)];
                                if (ga == 0.0) continue;
                                const auto ia = static_cast<size_t>(i);
                                const auto ib = static_cast<size_t>(i % nb);
                                back(ga, av[ia], bv[ib], da ? da + ia : nullptr,
                                     db ? db + ib : nullptr);
                              }
                            });
    out.tape_id = tape->id();
  }
  return out;
}

template <typename Fwd, typename Back>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Back back) {
  const int64_t n = a.size();
  Tensor out;
  out.shape = a.shape;
  out.values.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    out.values[static_cast<size_t>(i)] = fwd(a.values[static_cast<size_t>(i)]);
  }
  Tape* tape = Tape::active();
  out.requires_grad = a.requires_grad;
  if (wants_record(tape, a, name)) {
    const int an = a.node;
    auto av = a.values;
    auto ov = out.values;
    out.node = tape->record(
        n, {an}, [an, n, av = std::move(av), ov = std::move(ov), back](Tape& t, int self) {
          auto g = t.grad(self);
          double* da = t.grad_buffer(an).data();
          for (int64_t i = 0; i < n; ++i) {
            const auto ii = static_cast<size_t>(i);
            if (g[ii] != 0.0) da[ii] += g[ii] * back(av[ii], ov[ii]);
          }
        });
    out.tape_id = tape->id();
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* da, double* db) {
        if (da) *da += g * y;
        if (db) *db += g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values) {
    if (v == 0.0) throw std::domain_error("div: denominator entry is zero");
  }
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double* da, double* db) {
        if (da) *da += g / y;
        if (db) *db -= g * x / (y * y);
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double g, double x, double y, double* da, double* db) {
        if (x >= y) {
          if (da) *da += g;
        } else if (db) {
          *db += g;
        }
      });
}

Tensor add(const Tensor& a, double c) {
  return unary_op(
      "add", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, double c) { return add(a, -c); }

Tensor sub(double c, const Tensor& a) {
  return unary_op(
      "sub", a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, double c) {
  return unary_op(
      "mul", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor div(const Tensor& a, double c) {
  if (c == 0.0) throw std::domain_error("div: scalar denominator is zero");
  return mul(a, 1.0 / c);
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values) {
    if (v < 0.0) throw std::domain_error("sqrt: negative input " + std::to_string(v));
  }
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double out) { return 0.5 / out; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double out) { return out; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values) {
    if (v <= 0.0) throw std::domain_error("log: nonpositive input " + std::to_string(v));
  }
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// ---- reductions and structure ----

namespace {

void require_rank3(const char* name, const Tensor& x) {
  if (x.rank() != 3) {
    throw std::invalid_argument(std::string(name) + ": expected a (N,L,d) tensor, got " +
                                shape_str(x.shape));
  }
}

}  // namespace

Tensor mean_locations(const Tensor& x) {
  require_rank3("mean_locations", x);
  const int64_t n = x.shape[0], l = x.shape[1], d = x.shape[2];
  if (l < 1) throw std::invalid_argument("mean_locations: empty location axis");
  Tensor out = Tensor::zeros({n, d});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < l; ++j) {
      for (int64_t c = 0; c < d; ++c) {
        out.values[static_cast<size_t>(i * d + c)] +=
            x.values[static_cast<size_t>((i * l + j) * d + c)];
      }
    }
  }
  for (auto& v : out.values) v /= static_cast<double>(l);

  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "mean_locations")) {
    const int xn = x.node;
    out.node = tape->record(n * d, {xn}, [xn, n, l, d](Tape& t, int self) {
      auto g = t.grad(self);
      double* dx = t.grad_buffer(xn).data();
      const double inv = 1.0 / static_cast<double>(l);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < l; ++j) {
          for (int64_t c = 0; c < d; ++c) {
            dx[(i * l + j) * d + c] += g[static_cast<size_t>(i * d + c)] * inv;
          }
        }
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

LocationStats reduce_stats(const Tensor& x) {
  require_rank3("reduce_stats", x);
  const int64_t n = x.shape[0], l = x.shape[1], d = x.shape[2];
  if (l < 1) throw std::invalid_argument("reduce_stats: empty location axis");

  Tensor mean = mean_locations(x);

  Tensor var = Tensor::zeros({n, d});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < l; ++j) {
      for (int64_t c = 0; c < d; ++c) {
        const double dev = x.values[static_cast<size_t>((i * l + j) * d + c)] -
                           mean.values[static_cast<size_t>(i * d + c)];
        var.values[static_cast<size_t>(i * d + c)] += dev * dev;
      }
    }
  }
  for (auto& v : var.values) v /= static_cast<double>(l);

  Tape* tape = Tape::active();
  var.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "reduce_stats")) {
    const int xn = x.node;
    auto xv = x.values;
    auto mv = mean.values;
    // d var[i,c] / d x[i,j,c] = 2 (x[i,j,c] - mean[i,c]) / L; the mean term
    // cancels because deviations sum to zero.
    var.node = tape->record(n * d, {xn},
                            [xn, n, l, d, xv = std::move(xv), mv = std::move(mv)](Tape& t,
                                                                                  int self) {
                              auto g = t.grad(self);
                              double* dx = t.grad_buffer(xn).data();
                              const double scale = 2.0 / static_cast<double>(l);
                              for (int64_t i = 0; i < n; ++i) {
                                for (int64_t c = 0; c < d; ++c) {
                                  const double gv = g[static_cast<size_t>(i * d + c)];
                                  if (gv == 0.0) continue;
                                  for (int64_t j = 0; j < l; ++j) {
                                    const auto xi = static_cast<size_t>((i * l + j) * d + c);
                                    dx[xi] += gv * scale *
                                              (xv[xi] - mv[static_cast<size_t>(i * d + c)]);
                                  }
                                }
                              }
                            });
    var.tape_id = tape->id();
  }
  return {std::move(mean), std::move(var)};
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
    fail_shape("matmul", a.shape, b.shape);
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = a.values[static_cast<size_t>(i * k + p)];
      if (av == 0.0) continue;
      for (int64_t j = 0; j < n; ++j) {
        out.values[static_cast<size_t>(i * n + j)] += av * b.values[static_cast<size_t>(p * n + j)];
      }
    }
  }

  Tape* tape = Tape::active();
  const bool rec_a = wants_record(tape, a, "matmul");
  const bool rec_b = wants_record(tape, b, "matmul");
  out.requires_grad = a.requires_grad || b.requires_grad;
  if (rec_a || rec_b) {
    const int an = rec_a ? a.node : -1;
    const int bn = rec_b ? b.node : -1;
    std::vector<int> inputs;
    if (rec_a) inputs.push_back(an);
    if (rec_b) inputs.push_back(bn);
    auto av = a.values;
    auto bv = b.values;
    out.node = tape->record(
        m * n, std::move(inputs),
        [an, bn, m, k, n, av = std::move(av), bv = std::move(bv)](Tape& t, int self) {
          auto g = t.grad(self);
          if (an >= 0) {
            double* da = t.grad_buffer(an).data();
            for (int64_t i = 0; i < m; ++i) {
              for (int64_t j = 0; j < n; ++j) {
                const double gv = g[static_cast<size_t>(i * n + j)];
                if (gv == 0.0) continue;
                for (int64_t p = 0; p < k; ++p) {
                  da[i * k + p] += gv * bv[static_cast<size_t>(p * n + j)];
                }
              }
            }
          }
          if (bn >= 0) {
            double* db = t.grad_buffer(bn).data();
            for (int64_t i = 0; i < m; ++i) {
              for (int64_t j = 0; j < n; ++j) {
                const double gv = g[static_cast<size_t>(i * n + j)];
                if (gv == 0.0) continue;
                for (int64_t p = 0; p < k; ++p) {
                  db[p * n + j] += gv * av[static_cast<size_t>(i * k + p)];
                }
              }
            }
          }
        });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose: expected a matrix, got " + shape_str(a.shape));
  }
  const int64_t m = a.shape[0], n = a.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      out.values[static_cast<size_t>(j * m + i)] = a.values[static_cast<size_t>(i * n + j)];
    }
  }
  Tape* tape = Tape::active();
  out.requires_grad = a.requires_grad;
  if (wants_record(tape, a, "transpose")) {
    const int an = a.node;
    out.node = tape->record(m * n, {an}, [an, m, n](Tape& t, int self) {
      auto g = t.grad(self);
      double* da = t.grad_buffer(an).data();
      for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < m; ++i) {
          da[i * n + j] += g[static_cast<size_t>(j * m + i)];
        }
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) fail_shape("reshape", a.shape, shape);
  Tensor out = a;
  out.shape = std::move(shape);
  out.grad.reset();
  out.node = -1;
  out.tape_id = 0;

  Tape* tape = Tape::active();
  if (wants_record(tape, a, "reshape")) {
    const int an = a.node;
    const int64_t n = a.size();
    out.node = tape->record(n, {an}, [an, n](Tape& t, int self) {
      auto g = t.grad(self);
      double* da = t.grad_buffer(an).data();
      for (int64_t i = 0; i < n; ++i) da[i] += g[static_cast<size_t>(i)];
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor expand_locations(const Tensor& s, int64_t locations) {
  if (s.rank() != 2) {
    throw std::invalid_argument("expand_locations: expected (N,d), got " + shape_str(s.shape));
  }
  if (locations < 1) throw std::invalid_argument("expand_locations: locations must be positive");
  const int64_t n = s.shape[0], d = s.shape[1];
  Tensor out = Tensor::zeros({n, locations, d});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < locations; ++j) {
      for (int64_t c = 0; c < d; ++c) {
        out.values[static_cast<size_t>((i * locations + j) * d + c)] =
            s.values[static_cast<size_t>(i * d + c)];
      }
    }
  }
  Tape* tape = Tape::active();
  out.requires_grad = s.requires_grad;
  if (wants_record(tape, s, "expand_locations")) {
    const int sn = s.node;
    out.node = tape->record(n * locations * d, {sn}, [sn, n, locations, d](Tape& t, int self) {
      auto g = t.grad(self);
      double* ds = t.grad_buffer(sn).data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < locations; ++j) {
          for (int64_t c = 0; c < d; ++c) {
            ds[i * d + c] += g[static_cast<size_t>((i * locations + j) * d + c)];
          }
        }
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor take_location(const Tensor& x, int64_t location) {
  require_rank3("take_location", x);
  const int64_t n = x.shape[0], l = x.shape[1], d = x.shape[2];
  if (location < 0 || location >= l) {
    throw std::out_of_range("take_location: location out of range");
  }
  Tensor out = Tensor::zeros({n, d});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < d; ++c) {
      out.values[static_cast<size_t>(i * d + c)] =
          x.values[static_cast<size_t>((i * l + location) * d + c)];
    }
  }
  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "take_location")) {
    const int xn = x.node;
    out.node = tape->record(n * d, {xn}, [xn, n, l, d, location](Tape& t, int self) {
      auto g = t.grad(self);
      double* dx = t.grad_buffer(xn).data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t c = 0; c < d; ++c) {
          dx[(i * l + location) * d + c] += g[static_cast<size_t>(i * d + c)];
        }
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor index_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.rank() != 2) {
    throw std::invalid_argument("index_rows: expected (N,d), got " + shape_str(x.shape));
  }
  const int64_t n = x.shape[0], d = x.shape[1];
  const int64_t m = static_cast<int64_t>(rows.size());
  for (int r : rows) {
    if (r < 0 || r >= n) throw std::out_of_range("index_rows: row index out of range");
  }
  Tensor out = Tensor::zeros({m, d});
  for (int64_t r = 0; r < m; ++r) {
    const int64_t src = rows[static_cast<size_t>(r)];
    for (int64_t c = 0; c < d; ++c) {
      out.values[static_cast<size_t>(r * d + c)] = x.values[static_cast<size_t>(src * d + c)];
    }
  }
  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "index_rows")) {
    const int xn = x.node;
    auto idx = rows;
    out.node = tape->record(m * d, {xn}, [xn, m, d, idx = std::move(idx)](Tape& t, int self) {
      auto g = t.grad(self);
      double* dx = t.grad_buffer(xn).data();
      for (int64_t r = 0; r < m; ++r) {
        const int64_t dst = idx[static_cast<size_t>(r)];
        for (int64_t c = 0; c < d; ++c) {
          dx[dst * d + c] += g[static_cast<size_t>(r * d + c)];
        }
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
  require_rank3("prepend_token", x);
  if (token.rank() != 1 || token.shape[0] != x.shape[2]) {
    fail_shape("prepend_token", x.shape, token.shape);
  }
  const int64_t n = x.shape[0], l = x.shape[1], d = x.shape[2];
  Tensor out = Tensor::zeros({n, l + 1, d});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < d; ++c) {
      out.values[static_cast<size_t>((i * (l + 1)) * d + c)] = token.values[static_cast<size_t>(c)];
    }
    for (int64_t j = 0; j < l; ++j) {
      for (int64_t c = 0; c < d; ++c) {
        out.values[static_cast<size_t>((i * (l + 1) + j + 1) * d + c)] =
            x.values[static_cast<size_t>((i * l + j) * d + c)];
      }
    }
  }
  Tape* tape = Tape::active();
  const bool rec_x = wants_record(tape, x, "prepend_token");
  const bool rec_t = wants_record(tape, token, "prepend_token");
  out.requires_grad = x.requires_grad || token.requires_grad;
  if (rec_x || rec_t) {
    const int xn = rec_x ? x.node : -1;
    const int tn = rec_t ? token.node : -1;
    std::vector<int> inputs;
    if (rec_x) inputs.push_back(xn);
    if (rec_t) inputs.push_back(tn);
    out.node = tape->record(n * (l + 1) * d, std::move(inputs),
                            [xn, tn, n, l, d](Tape& t, int self) {
                              auto g = t.grad(self);
                              if (tn >= 0) {
                                double* dt = t.grad_buffer(tn).data();
                                for (int64_t i = 0; i < n; ++i) {
                                  for (int64_t c = 0; c < d; ++c) {
                                    dt[c] += g[static_cast<size_t>((i * (l + 1)) * d + c)];
                                  }
                                }
                              }
                              if (xn >= 0) {
                                double* dx = t.grad_buffer(xn).data();
                                for (int64_t i = 0; i < n; ++i) {
                                  for (int64_t j = 0; j < l; ++j) {
                                    for (int64_t c = 0; c < d; ++c) {
                                      dx[(i * l + j) * d + c] +=
                                          g[static_cast<size_t>((i * (l + 1) + j + 1) * d + c)];
                                    }
                                  }
                                }
                              }
                            });
    out.tape_id = tape->id();
  }
  return out;
}

namespace {

// Shared scaffolding for reductions over the last axis.
struct LastAxis {
  Shape out_shape;  // input shape minus the last axis; {} for rank-1 input
  int64_t rows;
  int64_t cols;
};

LastAxis split_last_axis(const char* name, const Tensor& x) {
  if (x.rank() < 1) {
    throw std::invalid_argument(std::string(name) + ": expected rank >= 1, got " +
                                shape_str(x.shape));
  }
  LastAxis r;
  r.out_shape = Shape(x.shape.begin(), x.shape.end() - 1);
  r.cols = x.shape.back();
  r.rows = numel(r.out_shape);
  return r;
}

}  // namespace

Tensor reduce_rows_sum(const Tensor& x) {
  const LastAxis ax = split_last_axis("reduce_rows_sum", x);
  Tensor out = Tensor::zeros(ax.out_shape);
  for (int64_t r = 0; r < ax.rows; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < ax.cols; ++c) s += x.values[static_cast<size_t>(r * ax.cols + c)];
    out.values[static_cast<size_t>(r)] = s;
  }
  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "reduce_rows_sum")) {
    const int xn = x.node;
    const int64_t rows = ax.rows, cols = ax.cols;
    out.node = tape->record(rows, {xn}, [xn, rows, cols](Tape& t, int self) {
      auto g = t.grad(self);
      double* dx = t.grad_buffer(xn).data();
      for (int64_t r = 0; r < rows; ++r) {
        const double gv = g[static_cast<size_t>(r)];
        if (gv == 0.0) continue;
        for (int64_t c = 0; c < cols; ++c) dx[r * cols + c] += gv;
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor reduce_rows_max(const Tensor& x) {
  const LastAxis ax = split_last_axis("reduce_rows_max", x);
  Tensor out = Tensor::zeros(ax.out_shape);
  std::vector<int64_t> arg(static_cast<size_t>(ax.rows), 0);
  for (int64_t r = 0; r < ax.rows; ++r) {
    double best = x.values[static_cast<size_t>(r * ax.cols)];
    int64_t best_c = 0;
    for (int64_t c = 1; c < ax.cols; ++c) {
      const double v = x.values[static_cast<size_t>(r * ax.cols + c)];
      if (v > best) {
        best = v;
        best_c = c;
      }
    }
    out.values[static_cast<size_t>(r)] = best;
    arg[static_cast<size_t>(r)] = best_c;
  }
  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "reduce_rows_max")) {
    const int xn = x.node;
    const int64_t rows = ax.rows, cols = ax.cols;
    // The selected component is a constant of the forward pass.
    out.node = tape->record(rows, {xn}, [xn, rows, cols, arg = std::move(arg)](Tape& t, int self) {
      auto g = t.grad(self);
      double* dx = t.grad_buffer(xn).data();
      for (int64_t r = 0; r < rows; ++r) {
        dx[r * cols + arg[static_cast<size_t>(r)]] += g[static_cast<size_t>(r)];
      }
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor rows_norm(const Tensor& x) {
  const LastAxis ax = split_last_axis("rows_norm", x);
  Tensor out = Tensor::zeros(ax.out_shape);
  for (int64_t r = 0; r < ax.rows; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < ax.cols; ++c) {
      const double v = x.values[static_cast<size_t>(r * ax.cols + c)];
      s += v * v;
    }
    out.values[static_cast<size_t>(r)] = std::sqrt(s);
  }
  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "rows_norm")) {
    const int xn = x.node;
    const int64_t rows = ax.rows, cols = ax.cols;
    auto xv = x.values;
    auto ov = out.values;
    out.node = tape->record(rows, {xn},
                            [xn, rows, cols, xv = std::move(xv), ov = std::move(ov)](Tape& t,
                                                                                     int self) {
                              auto g = t.grad(self);
                              double* dx = t.grad_buffer(xn).data();
                              for (int64_t r = 0; r < rows; ++r) {
                                const double gv = g[static_cast<size_t>(r)];
                                const double nr = ov[static_cast<size_t>(r)];
                                if (gv == 0.0 || nr == 0.0) continue;
                                for (int64_t c = 0; c < cols; ++c) {
                                  dx[r * cols + c] +=
                                      gv * xv[static_cast<size_t>(r * cols + c)] / nr;
                                }
                              }
                            });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor reduce_sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values) s += v;
  Tensor out = Tensor::scalar(s);
  Tape* tape = Tape::active();
  out.requires_grad = x.requires_grad;
  if (wants_record(tape, x, "reduce_sum_all")) {
    const int xn = x.node;
    const int64_t n = x.size();
    out.node = tape->record(1, {xn}, [xn, n](Tape& t, int self) {
      const double gv = t.grad(self)[0];
      if (gv == 0.0) return;
      double* dx = t.grad_buffer(xn).data();
      for (int64_t i = 0; i < n; ++i) dx[i] += gv;
    });
    out.tape_id = tape->id();
  }
  return out;
}

Tensor reduce_mean_all(const Tensor& x) {
  return div(reduce_sum_all(x), static_cast<double>(x.size()));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("softmax_cross_entropy: expected (N,C) logits, got " +
                                shape_str(logits.shape));
  }
  const int64_t n = logits.shape[0], c = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                                " labels for a batch of " + std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || y >= c) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " out of range [0," + std::to_string(c) + ")");
    }
  }

  std::vector<double> probs(static_cast<size_t>(n * c));
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = logits.values[static_cast<size_t>(i * c)];
    for (int64_t j = 1; j < c; ++j) {
      mx = std::max(mx, logits.values[static_cast<size_t>(i * c + j)]);
    }
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double e = std::exp(logits.values[static_cast<size_t>(i * c + j)] - mx);
      probs[static_cast<size_t>(i * c + j)] = e;
      denom += e;
    }
    for (int64_t j = 0; j < c; ++j) probs[static_cast<size_t>(i * c + j)] /= denom;
    loss += (logits.values[static_cast<size_t>(i * c + labels[static_cast<size_t>(i)])] - mx) -
            std::log(denom);
  }
  Tensor out = Tensor::scalar(-loss / static_cast<double>(n));

  Tape* tape = Tape::active();
  out.requires_grad = logits.requires_grad;
  if (wants_record(tape, logits, "softmax_cross_entropy")) {
    const int ln = logits.node;
    auto lab = labels;
    out.node = tape->record(
        1, {ln}, [ln, n, c, probs = std::move(probs), lab = std::move(lab)](Tape& t, int self) {
          const double gv = t.grad(self)[0];
          if (gv == 0.0) return;
          double* dl = t.grad_buffer(ln).data();
          const double scale = gv / static_cast<double>(n);
          for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < c; ++j) {
              const double onehot = (j == lab[static_cast<size_t>(i)]) ? 1.0 : 0.0;
              dl[i * c + j] += scale * (probs[static_cast<size_t>(i * c + j)] - onehot);
            }
          }
        });
    out.tape_id = tape->id();
  }
  return out;
}

}  // namespace adp
