#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>

#include "podom/autodiff.hpp"
#include "podom/geometry.hpp"

namespace podom::testing {

inline Pose random_pose(std::mt19937_64& rng, double max_angle = std::numbers::pi, double max_t = 10.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> ang(-max_angle, max_angle);
  std::uniform_real_distribution<double> tr(-max_t, max_t);
  Vec3 axis(n(rng), n(rng), n(rng));
  axis.normalize();
  Pose p;
  p.rotation = Eigen::AngleAxisd(ang(rng), axis).toRotationMatrix();
  p.translation = Vec3(tr(rng), tr(rng), tr(rng));
  return p;
}

inline double max_abs_diff(const Mat4& a, const Mat4& b) { return (a - b).cwiseAbs().maxCoeff(); }

/// Fresh temporary directory under the system temp path.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() / ("podom_" + tag + "_" + std::to_string(rng()));
  std::filesystem::create_directories(p);
  return p;
}

/// Relative error used by all finite-difference checks.
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central finite differences of a scalar function of one tensor's entries.
/// `f` must rebuild its graph from the tensor on every call.
inline ad::Tensor numeric_gradient(const std::function<double()>& f, ad::Tensor& t, double eps = 1e-5) {
  ad::Tensor g(t.shape(), 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double keep = t[i];
    t[i] = keep + eps;
    const double fp = f();
    t[i] = keep - eps;
    const double fm = f();
    t[i] = keep;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

}  // namespace podom::testing

namespace podom::testing {

using GraphBuilder = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;

/// Largest relative error between backprop and central differences over
/// every element of every input. `build` must return a 1x1 node.
inline double grad_check(std::vector<ad::Tensor> inputs, const GraphBuilder& build, double eps = 1e-5) {
  auto eval = [&](bool with_grad, std::vector<ad::Tensor>* grads) {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t));
    const ad::Var out = build(g, vars);
    if (with_grad) {
      g.backward(out);
      for (const auto& v : vars) grads->push_back(v.grad());
    }
    return out.value().item();
  };
  std::vector<ad::Tensor> analytic;
  eval(true, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const ad::Tensor num = numeric_gradient([&] { return eval(false, nullptr); }, inputs[k], eps);
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      worst = std::max(worst, rel_error(a, num[i]));
    }
  }
  return worst;
}

inline ad::Tensor random_tensor(std::mt19937_64& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// sum(x .* c) with a fixed random c, so every output element carries a
/// distinct upstream gradient.
inline ad::Var weighted_sum(ad::Var x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  ad::Tensor c = random_tensor(rng, x.value().shape());
  return ad::sum(ad::mul(x, x.graph->constant(std::move(c))));
}

}  // namespace podom::testing

namespace podom::testing {

/// Largest relative error between backprop and central differences over
/// every trainable parameter of `store`. `loss` builds a fresh graph from
/// the current parameter values and returns its 1x1 output.
inline double param_grad_check(ad::ParameterStore& store, const std::function<ad::Var(ad::Graph&)>& loss,
                               double eps = 1e-5, double floor = 1e-6) {
  store.zero_grad();
  {
    ad::Graph g;
    g.backward(loss(g));
  }
  double worst = 0.0;
  for (ad::Parameter* p : store.trainable()) {
    const ad::Tensor analytic = p->grad;
    const ad::Tensor num = numeric_gradient(
        [&] {
          ad::Graph g;
          return loss(g).value().item();
        },
        p->value, eps);
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, std::abs(a - num[i]) / std::max({std::abs(a), std::abs(num[i]), floor}));
    }
  }
  return worst;
}

}  // namespace podom::testing
