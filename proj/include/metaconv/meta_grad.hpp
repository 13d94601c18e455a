#pragma once

// Generic bilevel gradient helpers over flat parameter vectors. The inner
// loop is plain gradient descent on a task's support loss; the outer
// gradient either treats the adapted point as detached (first order) or
// back-propagates through the descent chain with Hessian-vector products
// estimated by central differences of the task gradient.

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "metaconv/common.hpp"

namespace metaconv {

struct FlatTask {
    std::function<double(const Eigen::VectorXd&)> loss;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> grad;
};

struct InnerSgdPath {
    std::vector<Eigen::VectorXd> points;  // points.front() = start, points.back() = adapted
    const Eigen::VectorXd& adapted() const { return points.back(); }
};

inline InnerSgdPath inner_sgd(const FlatTask& task, Eigen::VectorXd start, int steps, double lr) {
    if (steps < 0) throw ConfigError("inner_sgd: negative step count");
    InnerSgdPath path;
    path.points.push_back(std::move(start));
    for (int t = 0; t < steps; ++t) {
        Eigen::VectorXd g = task.grad(path.points.back());
        if (!g.allFinite())
            throw NumericError("inner_sgd: non-finite gradient at step " + std::to_string(t));
        path.points.push_back(path.points.back() - lr * g);
    }
    return path;
}

// H(x) v by central differences of the gradient.
inline Eigen::VectorXd hvp_central(const FlatTask& task, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& v, double eps_base = 1e-5) {
    double vn = v.norm();
    if (vn == 0.0) return Eigen::VectorXd::Zero(x.size());
    double eps = eps_base * (1.0 + x.cwiseAbs().maxCoeff()) / vn;
    Eigen::VectorXd gp = task.grad(x + eps * v);
    Eigen::VectorXd gm = task.grad(x - eps * v);
    return (gp - gm) / (2.0 * eps);
}

// d L_query(x_T) / d x_0 for x_{t+1} = x_t - lr * grad L_support(x_t).
// First order returns the query gradient at the adapted point unchanged;
// otherwise apply the chain g <- (I - lr H(x_t)) g backward along the path.
inline Eigen::VectorXd maml_outer_grad(const FlatTask& support, const InnerSgdPath& path,
                                       const Eigen::VectorXd& query_grad_at_adapted, double lr,
                                       bool first_order) {
    Eigen::VectorXd g = query_grad_at_adapted;
    if (first_order) return g;
    for (int t = static_cast<int>(path.points.size()) - 2; t >= 0; --t)
        g -= lr * hvp_central(support, path.points[static_cast<std::size_t>(t)], g);
    return g;
}

}  // namespace metaconv
