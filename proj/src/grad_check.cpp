#include "flowvi/grad_check.hpp"

#include <cmath>

namespace flowvi {

namespace {

double eval_at(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, long coord,
               double v) {
  std::vector<double> d = x.data();
  d[static_cast<std::size_t>(coord)] = v;
  Tensor probe = Tensor::from(x.shape(), std::move(d));
  try {
    return fn(probe).value();
  } catch (const std::exception& e) {
    throw Error("grad_check: function evaluation failed at coordinate " +
                std::to_string(coord) + ": " + e.what());
  }
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                           double h) {
  GradCheckReport rep;
  const long n = x.size();
  rep.analytic.assign(static_cast<std::size_t>(n), 0.0);
  rep.numeric.assign(static_cast<std::size_t>(n), 0.0);
  rep.rel_err.assign(static_cast<std::size_t>(n), 0.0);

  Tensor leaf = Tensor::leaf(x.shape(), x.data());
  {
    Tape tape;
    Tensor loss = fn(leaf);
    if (!loss.shape().empty()) throw ContractError("grad_check: fn must return a scalar");
    tape.backward(loss);
  }
  if (leaf.has_grad()) rep.analytic = leaf.grad();

  for (long i = 0; i < n; ++i) {
    const double v = x.data()[static_cast<std::size_t>(i)];
    const double fp = eval_at(fn, x, i, v + h);
    const double fm = eval_at(fn, x, i, v - h);
    const double num = (fp - fm) / (2.0 * h);
    rep.numeric[static_cast<std::size_t>(i)] = num;
    const double err = std::abs(rep.analytic[static_cast<std::size_t>(i)] - num) /
                       std::max(1.0, std::abs(num));
    rep.rel_err[static_cast<std::size_t>(i)] = err;
    if (err > rep.max_rel_err || rep.worst_coordinate < 0) {
      if (err >= rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_coordinate = i;
      }
    }
  }
  return rep;
}

ParamGradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                       const ParamList& params, double h) {
  ParamGradCheckReport rep;

  // One reverse pass gives every analytic gradient.
  for (const auto& p : params.items()) p.tensor.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    if (!loss.shape().empty())
      throw ContractError("grad_check_params: loss_fn must return a scalar");
    tape.backward(loss);
  }
  for (const auto& p : params.items())
    analytic.push_back(p.tensor.has_grad()
                           ? p.tensor.grad()
                           : std::vector<double>(static_cast<std::size_t>(p.tensor.size()), 0.0));

  for (std::size_t pi = 0; pi < params.items().size(); ++pi) {
    const auto& p = params.items()[pi];
    ParamGradCheckEntry entry;
    entry.name = p.name;
    std::vector<double> base = p.tensor.data();
    for (long i = 0; i < p.tensor.size(); ++i) {
      std::vector<double> d = base;
      d[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] + h;
      p.tensor.set_data(d);
      const double fp = loss_fn().value();
      d[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] - h;
      p.tensor.set_data(d);
      const double fm = loss_fn().value();
      p.tensor.set_data(base);
      const double num = (fp - fm) / (2.0 * h);
      const double err =
          std::abs(analytic[pi][static_cast<std::size_t>(i)] - num) / std::max(1.0, std::abs(num));
      if (err >= entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_coordinate = i;
      }
    }
    if (entry.max_rel_err >= rep.max_rel_err) {
      rep.max_rel_err = entry.max_rel_err;
      rep.worst_param = entry.name;
    }
    rep.entries.push_back(std::move(entry));
  }
  return rep;
}

}  // namespace flowvi
