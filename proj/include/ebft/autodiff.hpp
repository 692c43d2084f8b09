#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ebft::ad {

using Eigen::MatrixXd;

// Reverse-mode tape over dense matrices. Nodes are referenced by index;
// each op records a backward closure that scatters the node's gradient
// into its parents. Just the ops a small decoder-only transformer needs.
class Tape {
 public:
  int leaf(MatrixXd v) {
    nodes_.push_back(Node{std::move(v), MatrixXd(), nullptr});
    return last();
  }

  const MatrixXd& val(int i) const { return nodes_[static_cast<size_t>(i)].val; }

  MatrixXd& grad(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() == 0) n.grad = MatrixXd::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  int add(int a, int b) {
    int out = leaf(val(a) + val(b));
    set_back(out, [a, b, out](Tape& t) {
      t.grad(a) += t.grad(out);
      t.grad(b) += t.grad(out);
    });
    return out;
  }

  /// Broadcasts a 1xC bias row over every row of a.
  int add_rowvec(int a, int bias) {
    int out = leaf(val(a).rowwise() + val(bias).row(0));
    set_back(out, [a, bias, out](Tape& t) {
      t.grad(a) += t.grad(out);
      t.grad(bias).row(0) += t.grad(out).colwise().sum();
    });
    return out;
  }

  int matmul(int a, int b) {
    int out = leaf(val(a) * val(b));
    set_back(out, [a, b, out](Tape& t) {
      t.grad(a) += t.grad(out) * t.val(b).transpose();
      t.grad(b) += t.val(a).transpose() * t.grad(out);
    });
    return out;
  }

  /// a * b^T (used for attention scores).
  int matmul_nt(int a, int b) {
    int out = leaf(val(a) * val(b).transpose());
    set_back(out, [a, b, out](Tape& t) {
      t.grad(a) += t.grad(out) * t.val(b);
      t.grad(b) += t.grad(out).transpose() * t.val(a);
    });
    return out;
  }

  int scale(int a, double c) {
    int out = leaf(val(a) * c);
    set_back(out, [a, c, out](Tape& t) { t.grad(a) += c * t.grad(out); });
    return out;
  }

  /// Adds a constant matrix (no gradient flows into it). Entries may be -inf.
  int add_const(int a, const MatrixXd& m) {
    int out = leaf(val(a) + m);
    set_back(out, [a, out](Tape& t) { t.grad(a) += t.grad(out); });
    return out;
  }

  int softmax_rows(int a) {
    MatrixXd y = val(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double m = y.row(r).maxCoeff();
      y.row(r) = (y.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    int out = leaf(std::move(y));
    set_back(out, [a, out](Tape& t) {
      const MatrixXd& y = t.val(out);
      const MatrixXd& dy = t.grad(out);
      MatrixXd dx = (y.array() * dy.array()).matrix();
      Eigen::VectorXd rowdot = dx.rowwise().sum();
      dx -= (y.array().colwise() * rowdot.array()).matrix();
      t.grad(a) += dx;
    });
    return out;
  }

  int log_softmax_rows(int a) {
    MatrixXd y = val(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double m = y.row(r).maxCoeff();
      const double lse = m + std::log((y.row(r).array() - m).exp().sum());
      y.row(r).array() -= lse;
    }
    int out = leaf(std::move(y));
    set_back(out, [a, out](Tape& t) {
      const MatrixXd p = t.val(out).array().exp().matrix();
      const MatrixXd& dy = t.grad(out);
      Eigen::VectorXd rowsum = dy.rowwise().sum();
      t.grad(a) += dy - (p.array().colwise() * rowsum.array()).matrix();
    });
    return out;
  }

  /// Row-wise layer norm with learnable gain/bias (1xC each).
  int layernorm_rows(int x, int gamma, int beta, double eps = 1e-5) {
    const MatrixXd& xv = val(x);
    const Eigen::Index cols = xv.cols();
    MatrixXd xhat(xv.rows(), cols);
    Eigen::VectorXd inv_sigma(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const double mu = xv.row(r).mean();
      const double var = (xv.row(r).array() - mu).square().sum() / static_cast<double>(cols);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[r] = is;
      xhat.row(r) = (xv.row(r).array() - mu) * is;
    }
    MatrixXd y = ((xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
                  val(beta).row(0).array())
                     .matrix();
    int out = leaf(std::move(y));
    set_back(out, [x, gamma, beta, out, xhat, inv_sigma](Tape& t) {
      const MatrixXd& dy = t.grad(out);
      const Eigen::Index cols = dy.cols();
      t.grad(beta).row(0) += dy.colwise().sum();
      t.grad(gamma).row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
      MatrixXd dxhat = (dy.array().rowwise() * t.val(gamma).row(0).array()).matrix();
      MatrixXd& dx = t.grad(x);
      for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_dxhat = dxhat.row(r).mean();
        const double mean_dxhat_xhat =
            (dxhat.row(r).array() * xhat.row(r).array()).sum() / static_cast<double>(cols);
        dx.row(r) += (inv_sigma[r] *
                      (dxhat.row(r).array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat))
                         .matrix();
      }
    });
    return out;
  }

  /// Exact (erf-based) GELU.
  int gelu(int a) {
    MatrixXd y = val(a).unaryExpr(
        [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
    int out = leaf(std::move(y));
    set_back(out, [a, out](Tape& t) {
      const MatrixXd dgelu = t.val(a).unaryExpr([](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        return cdf + v * pdf;
      });
      t.grad(a) += (t.grad(out).array() * dgelu.array()).matrix();
    });
    return out;
  }

  /// Embedding lookup: out.row(i) = table.row(idx[i]). Backward scatter-adds.
  int gather_rows(int table, std::vector<int> idx) {
    const MatrixXd& tbl = val(table);
    MatrixXd y(static_cast<Eigen::Index>(idx.size()), tbl.cols());
    for (size_t i = 0; i < idx.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = tbl.row(idx[i]);
    int out = leaf(std::move(y));
    set_back(out, [table, out, idx = std::move(idx)](Tape& t) {
      MatrixXd& g = t.grad(table);
      const MatrixXd& dy = t.grad(out);
      for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
    });
    return out;
  }

  int slice_cols(int a, int c0, int n) {
    int out = leaf(val(a).middleCols(c0, n));
    set_back(out, [a, c0, n, out](Tape& t) {
      t.grad(a).middleCols(c0, n) += t.grad(out);
    });
    return out;
  }

  int concat_cols(const std::vector<int>& parts) {
    Eigen::Index rows = val(parts.front()).rows();
    Eigen::Index cols = 0;
    for (int p : parts) cols += val(p).cols();
    MatrixXd y(rows, cols);
    Eigen::Index at = 0;
    for (int p : parts) {
      y.middleCols(at, val(p).cols()) = val(p);
      at += val(p).cols();
    }
    int out = leaf(std::move(y));
    set_back(out, [parts, out](Tape& t) {
      Eigen::Index at = 0;
      for (int p : parts) {
        const Eigen::Index w = t.val(p).cols();
        t.grad(p) += t.grad(out).middleCols(at, w);
        at += w;
      }
    });
    return out;
  }

  /// Sum of selected entries, as a 1x1 node. Duplicate cells accumulate.
  int select_sum(int a, std::vector<std::pair<int, int>> cells) {
    double s = 0.0;
    for (const auto& [r, c] : cells) s += val(a)(r, c);
    int out = leaf(MatrixXd::Constant(1, 1, s));
    set_back(out, [a, out, cells = std::move(cells)](Tape& t) {
      const double g = t.grad(out)(0, 0);
      for (const auto& [r, c] : cells) t.grad(a)(r, c) += g;
    });
    return out;
  }

  /// Seeds d(node)/d(node) = 1 and runs the tape backwards.
  void backward(int node) {
    if (val(node).size() != 1) throw std::logic_error("backward: root must be scalar");
    grad(node)(0, 0) = 1.0;
    for (int i = node; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    MatrixXd val;
    MatrixXd grad;
    std::function<void(Tape&)> back;
  };

  int last() const { return static_cast<int>(nodes_.size()) - 1; }
  void set_back(int i, std::function<void(Tape&)> f) {
    nodes_[static_cast<size_t>(i)].back = std::move(f);
  }

  std::vector<Node> nodes_;
};

}  // namespace ebft::ad
