// Dense reference computations for the tests. Written against Eigen only so
// they share no code paths with the matrix-free library routines.
#ifndef NCGP_TESTS_ORACLES_HPP
#define NCGP_TESTS_ORACLES_HPP

#include "ncgp/gp_model.hpp"
#include "ncgp/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace oracle {

using ncgp::Index;
using ncgp::Matrix;
using ncgp::Vector;

inline double kernel(const ncgp::KernelSpec &k, const Vector &a,
                     const Vector &b) {
  const double d = (a - b).norm();
  const double l = k.lengthscale;
  if (k.family == ncgp::KernelFamily::RBF) {
    return k.outputscale * std::exp(-d * d / (2.0 * l * l));
  }
  const double s = std::sqrt(3.0) * d / l;
  return k.outputscale * (1.0 + s) * std::exp(-s);
}

// Cross covariance, CN ordered on both sides (index n*C + c).
inline Matrix gram(const std::vector<ncgp::KernelSpec> &kernels,
                   const Matrix &Xa, const Matrix &Xb) {
  const Index C = static_cast<Index>(kernels.size());
  Matrix K = Matrix::Zero(Xa.rows() * C, Xb.rows() * C);
  for (Index i = 0; i < Xa.rows(); ++i) {
    for (Index j = 0; j < Xb.rows(); ++j) {
      for (Index c = 0; c < C; ++c) {
        K(i * C + c, j * C + c) = kernel(kernels[c], Xa.row(i).transpose(),
                                         Xb.row(j).transpose());
      }
    }
  }
  return K;
}

inline Matrix gram(const ncgp::KernelSpec &k, Index C, const Matrix &Xa,
                   const Matrix &Xb) {
  return gram(std::vector<ncgp::KernelSpec>(C, k), Xa, Xb);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class Lik { Poisson, Logistic, Softmax };

inline Vector softmax_block(const Vector &z) {
  Vector p = (z.array() - z.maxCoeff()).exp();
  return p / p.sum();
}

// Gradient and negative Hessian of log p(y | f), written out by hand.
inline Vector grad(Lik lik, const Vector &y, const Vector &f, Index C) {
  Vector g(f.size());
  const Index N = y.size();
  for (Index n = 0; n < N; ++n) {
    switch (lik) {
    case Lik::Poisson:
      g[n] = y[n] - std::exp(f[n]);
      break;
    case Lik::Logistic:
      g[n] = y[n] - sigmoid(f[n]);
      break;
    case Lik::Softmax: {
      const Vector p = softmax_block(f.segment(n * C, C));
      g.segment(n * C, C) = -p;
      g[n * C + static_cast<Index>(y[n])] += 1.0;
      break;
    }
    }
  }
  return g;
}

inline Matrix neg_hessian(Lik lik, const Vector &f, Index C) {
  Matrix W = Matrix::Zero(f.size(), f.size());
  const Index N = f.size() / C;
  for (Index n = 0; n < N; ++n) {
    switch (lik) {
    case Lik::Poisson:
      W(n, n) = std::exp(f[n]);
      break;
    case Lik::Logistic: {
      const double s = sigmoid(f[n]);
      W(n, n) = s * (1.0 - s);
      break;
    }
    case Lik::Softmax: {
      // diagonal as pi_k * sum_{j != k} pi_j: no cancellation when pi_k ~ 1
      const Vector p = softmax_block(f.segment(n * C, C));
      Matrix B = -p * p.transpose();
      for (Index k = 0; k < C; ++k) {
        double others = 0.0;
        for (Index j = 0; j < C; ++j) {
          others += j == k ? 0.0 : p[j];
        }
        B(k, k) = p[k] * others;
      }
      W.block(n * C, n * C, C, C) = B;
      break;
    }
    }
  }
  return W;
}

// f - (grad^2 Psi)^{-1} grad Psi with Psi = log p(y|f) - (f-m)^T K^{-1} (f-m)/2,
// rearranged to m + K (I + W K)^{-1} (W (f - m) + g) so neither K nor W is
// ever inverted.
inline Vector newton_step(const Matrix &K, const Vector &m, const Vector &f,
                          const Matrix &W, const Vector &g) {
  const Matrix A = Matrix::Identity(K.rows(), K.cols()) + W * K;
  return m + K * A.fullPivLu().solve(Vector(W * (f - m) + g));
}

struct Regression {
  Vector mean;
  Vector var;
};

// Exact GP regression at X_test with per-point noise variance `noise`.
inline Regression gp_regression(const ncgp::KernelSpec &k, const Matrix &X,
                                const Vector &y, double noise,
                                const Matrix &X_test, double mean = 0.0) {
  const Matrix K = gram(k, 1, X, X);
  const Matrix Ks = gram(k, 1, X_test, X);
  const Matrix A = K + noise * Matrix::Identity(X.rows(), X.rows());
  Eigen::LLT<Matrix> llt(A);
  Regression out;
  out.mean = (Ks * llt.solve((y.array() - mean).matrix())).array() + mean;
  const Matrix Ainv_Kst = llt.solve(Matrix(Ks.transpose()));
  out.var.resize(X_test.rows());
  for (Index i = 0; i < X_test.rows(); ++i) {
    out.var[i] = k.outputscale - Ks.row(i).dot(Ainv_Kst.col(i));
  }
  return out;
}

inline Matrix pinv(const Matrix &A) {
  Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector s = svd.singularValues();
  const double cut = 1e-12 * s.maxCoeff();
  Vector sinv = Vector::Zero(s.size());
  for (Index i = 0; i < s.size(); ++i) {
    if (s[i] > cut) {
      sinv[i] = 1.0 / s[i];
    }
  }
  return svd.matrixV() * sinv.asDiagonal() * svd.matrixU().transpose();
}

inline Matrix uniform_points(std::uint64_t seed, Index N, Index D, double lo,
                             double hi) {
  ncgp::random::Stream rng(seed, 77);
  Matrix X(N, D);
  for (Index n = 0; n < N; ++n) {
    for (Index d = 0; d < D; ++d) {
      X(n, d) = rng.uniform(lo, hi);
    }
  }
  return X;
}

inline Vector normals(std::uint64_t seed, Index n) {
  ncgp::random::Stream rng(seed, 78);
  Vector v(n);
  for (Index i = 0; i < n; ++i) {
    v[i] = rng.normal();
  }
  return v;
}

inline Matrix random_spd(std::uint64_t seed, Index n, double shift = 0.1) {
  ncgp::random::Stream rng(seed, 79);
  Matrix A(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      A(i, j) = rng.normal();
    }
  }
  return A * A.transpose() / static_cast<double>(n) +
         shift * Matrix::Identity(n, n);
}

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string &tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ncgp_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string path() const { return path_.string(); }
  std::string file(const std::string &name) const {
    return (path_ / name).string();
  }

private:
  std::filesystem::path path_;
};

} // namespace oracle

#endif
