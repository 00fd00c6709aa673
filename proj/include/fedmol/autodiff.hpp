#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "fedmol/error.hpp"

namespace fedmol {

template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
};

/// Reverse-mode tape over dense matrices. Templated on the scalar so the same
/// forward rules run in 32-bit for training and in 64-bit shadow mode for
/// finite-difference verification.
template <typename Real>
class Tape {
  public:
    using M = Mat<Real>;

    Var input(M value) {
        nodes_.push_back(Node{std::move(value), M(), nullptr});
        Node& node = nodes_.back();
        node.grad = M::Zero(node.value.rows(), node.value.cols());
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const M& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    const M& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    Var matmul(Var a, Var b) {
        const M& A = value(a);
        const M& B = value(b);
        if (A.cols() != B.rows()) fail(ErrorKind::ShapeMismatch, "matmul inner dimensions");
        return push(A * B, [this, a, b](const M& g) {
            gradient(a) += g * value(b).transpose();
            gradient(b) += value(a).transpose() * g;
        });
    }

    Var transpose(Var a) {
        return push(value(a).transpose(), [this, a](const M& g) { gradient(a) += g.transpose(); });
    }

    Var add(Var a, Var b) {
        same_shape(a, b, "add");
        return push(value(a) + value(b), [this, a, b](const M& g) {
            gradient(a) += g;
            gradient(b) += g;
        });
    }

    Var sub(Var a, Var b) {
        same_shape(a, b, "sub");
        return push(value(a) - value(b), [this, a, b](const M& g) {
            gradient(a) += g;
            gradient(b) -= g;
        });
    }

    Var mul(Var a, Var b) {
        same_shape(a, b, "mul");
        return push(value(a).cwiseProduct(value(b)), [this, a, b](const M& g) {
            gradient(a) += g.cwiseProduct(value(b));
            gradient(b) += g.cwiseProduct(value(a));
        });
    }

    Var scale(Var a, Real factor) {
        return push(value(a) * factor, [this, a, factor](const M& g) { gradient(a) += g * factor; });
    }

    Var add_scalar(Var a, Real c) {
        return push(value(a).array() + c, [this, a](const M& g) { gradient(a) += g; });
    }

    Var relu(Var a) {
        return push(value(a).cwiseMax(Real(0)), [this, a](const M& g) {
            gradient(a) += (value(a).array() > Real(0)).template cast<Real>().matrix().cwiseProduct(g);
        });
    }

    /// Replicates a 1 x d row vector into rows x d.
    Var row_broadcast(Var a, int rows) {
        if (value(a).rows() != 1) fail(ErrorKind::ShapeMismatch, "row_broadcast expects a row vector");
        return push(value(a).replicate(rows, 1), [this, a](const M& g) { gradient(a) += g.colwise().sum(); });
    }

    /// out row r = a row idx[r]; gradient scatter-adds back.
    Var gather_rows(Var a, std::vector<int> idx) {
        const M& A = value(a);
        M out(static_cast<Eigen::Index>(idx.size()), A.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = A.row(idx[r]);
        return push(std::move(out), [this, a, idx = std::move(idx)](const M& g) {
            M& ga = gradient(a);
            for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
        });
    }

    Var hcat(const std::vector<Var>& parts) {
        Eigen::Index rows = value(parts.front()).rows();
        Eigen::Index cols = 0;
        for (Var p : parts) {
            if (value(p).rows() != rows) fail(ErrorKind::ShapeMismatch, "hcat row counts");
            cols += value(p).cols();
        }
        M out(rows, cols);
        Eigen::Index at = 0;
        for (Var p : parts) {
            out.middleCols(at, value(p).cols()) = value(p);
            at += value(p).cols();
        }
        return push(std::move(out), [this, parts](const M& g) {
            Eigen::Index at2 = 0;
            for (Var p : parts) {
                gradient(p) += g.middleCols(at2, value(p).cols());
                at2 += value(p).cols();
            }
        });
    }

    Var cols(Var a, int start, int count) {
        return push(value(a).middleCols(start, count), [this, a, start, count](const M& g) {
            gradient(a).middleCols(start, count) += g;
        });
    }

    /// Row-major reshape.
    Var reshape(Var a, int rows, int cols_) {
        const M& A = value(a);
        if (A.size() != static_cast<Eigen::Index>(rows) * cols_) fail(ErrorKind::ShapeMismatch, "reshape element count");
        M out = Eigen::Map<const M>(A.data(), rows, cols_);
        return push(std::move(out), [this, a](const M& g) {
            const M& A2 = value(a);
            gradient(a) += Eigen::Map<const M>(g.data(), A2.rows(), A2.cols());
        });
    }

    /// For an n*n x d matrix of edge rows, averages rows (i, j) and (j, i).
    /// Self-adjoint, so the backward pass applies the same averaging.
    Var sym_pair_average(Var a, int n) {
        auto apply = [n](const M& A) {
            M out(A.rows(), A.cols());
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    out.row(i * n + j) = (A.row(i * n + j) + A.row(j * n + i)) * Real(0.5);
            return out;
        };
        return push(apply(value(a)), [this, a, apply](const M& g) { gradient(a) += apply(g); });
    }

    Var mean_rows(Var a) {
        const M& A = value(a);
        Real inv = Real(1) / static_cast<Real>(A.rows());
        return push(M(A.colwise().sum() * inv), [this, a, inv](const M& g) {
            gradient(a) += g.replicate(value(a).rows(), 1) * inv;
        });
    }

    Var row_softmax(Var a) {
        const M& A = value(a);
        M out(A.rows(), A.cols());
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            Real mx = A.row(r).maxCoeff();
            out.row(r) = (A.row(r).array() - mx).exp();
            out.row(r) /= out.row(r).sum();
        }
        Var result = push(std::move(out), nullptr);
        nodes_[static_cast<std::size_t>(result.id)].backward = [this, a, result](const M& g) {
            const M& y = value(result);
            M& ga = gradient(a);
            for (Eigen::Index r = 0; r < y.rows(); ++r) {
                Real dot = g.row(r).dot(y.row(r));
                ga.row(r) += y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
            }
        };
        return result;
    }

    /// Mean over rows of (logsumexp(row) - row[target]); the fused
    /// softmax + cross-entropy keeps the backward numerically stable.
    Var ce_with_logits(Var a, std::vector<int> targets) {
        const M& A = value(a);
        if (static_cast<Eigen::Index>(targets.size()) != A.rows()) fail(ErrorKind::ShapeMismatch, "ce target count");
        Real total = 0;
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            Real mx = A.row(r).maxCoeff();
            Real lse = std::log((A.row(r).array() - mx).exp().sum()) + mx;
            total += lse - A(r, targets[static_cast<std::size_t>(r)]);
        }
        M out(1, 1);
        out(0, 0) = total / static_cast<Real>(A.rows());
        return push(std::move(out), [this, a, targets = std::move(targets)](const M& g) {
            const M& A2 = value(a);
            Real scale_ = g(0, 0) / static_cast<Real>(A2.rows());
            M& ga = gradient(a);
            for (Eigen::Index r = 0; r < A2.rows(); ++r) {
                Real mx = A2.row(r).maxCoeff();
                Eigen::Array<Real, 1, Eigen::Dynamic> p = (A2.row(r).array() - mx).exp();
                p /= p.sum();
                ga.row(r) += (p * scale_).matrix();
                ga(r, targets[static_cast<std::size_t>(r)]) -= scale_;
            }
        });
    }

    /// Mean over all entries of (a - target)^2.
    Var mse_to(Var a, M target) {
        const M& A = value(a);
        if (A.rows() != target.rows() || A.cols() != target.cols()) fail(ErrorKind::ShapeMismatch, "mse target shape");
        M diff = A - target;
        Real inv = Real(1) / static_cast<Real>(A.size());
        M out(1, 1);
        out(0, 0) = diff.squaredNorm() * inv;
        return push(std::move(out), [this, a, target = std::move(target), inv](const M& g) {
            gradient(a) += (value(a) - target) * (Real(2) * inv * g(0, 0));
        });
    }

    /// Sum of all entries of (a - target)^2 (no mean), used by guidance.
    Var squared_error_sum(Var a, M target) {
        const M& A = value(a);
        M diff = A - target;
        M out(1, 1);
        out(0, 0) = diff.squaredNorm();
        return push(std::move(out), [this, a, target = std::move(target)](const M& g) {
            gradient(a) += (value(a) - target) * (Real(2) * g(0, 0));
        });
    }

    void backward(Var loss) {
        Node& top = nodes_[static_cast<std::size_t>(loss.id)];
        if (top.value.size() != 1) fail(ErrorKind::ShapeMismatch, "backward expects a scalar loss");
        top.grad(0, 0) = Real(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& node = nodes_[static_cast<std::size_t>(i)];
            if (node.backward) node.backward(node.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        M value;
        M grad;
        std::function<void(const M&)> backward;
    };

    M& gradient(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    Var push(M value, std::function<void(const M&)> fn) {
        nodes_.push_back(Node{std::move(value), M(), std::move(fn)});
        Node& node = nodes_.back();
        node.grad = M::Zero(node.value.rows(), node.value.cols());
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void same_shape(Var a, Var b, const char* what) {
        if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
            fail(ErrorKind::ShapeMismatch, what);
    }

    std::vector<Node> nodes_;
};

} // namespace fedmol
