#include "adp/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace adp {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_gradient: step must be positive");
  Tensor probe = x;
  probe.requires_grad = false;
  probe.grad.reset();
  probe.node = -1;
  probe.tape_id = 0;

  Tensor g = Tensor::zeros(x.shape);
  for (size_t i = 0; i < probe.values.size(); ++i) {
    const double saved = probe.values[i];
    probe.values[i] = saved + h;
    const double fp = f(probe);
    probe.values[i] = saved - h;
    const double fm = f(probe);
    probe.values[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_difference_gradient: non-finite evaluation");
    }
    g.values[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double gradcheck_max_rel_error(
    const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn, std::vector<Tensor> leaves,
    double h) {
  // Reverse-mode gradients first; the tape scope ends before the
  // finite-difference evaluations so those run unrecorded.
  std::vector<std::vector<double>> ad_grads;
  {
    Tape tape;
    for (auto& leaf : leaves) tape.watch(leaf);
    Tensor loss = loss_fn(leaves);
    tape.backward(loss);
    for (auto& leaf : leaves) ad_grads.push_back(*leaf.grad);
  }
  for (auto& leaf : leaves) {
    leaf.requires_grad = false;
    leaf.grad.reset();
    leaf.node = -1;
    leaf.tape_id = 0;
  }

  double worst = 0.0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    auto f = [&](const Tensor& v) {
      std::vector<Tensor> probe = leaves;
      probe[i] = v;
      return loss_fn(probe).item();
    };
    const Tensor fd = finite_difference_gradient(f, leaves[i], h);
    double diff2 = 0.0, ad2 = 0.0, fd2 = 0.0;
    for (size_t j = 0; j < fd.values.size(); ++j) {
      const double a = ad_grads[i][j];
      const double b = fd.values[j];
      diff2 += (a - b) * (a - b);
      ad2 += a * a;
      fd2 += b * b;
    }
    const double denom = std::max(std::sqrt(ad2) + std::sqrt(fd2), 1e-12);
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

}  // namespace adp
