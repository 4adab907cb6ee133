#ifndef NCGP_BELIEF_HPP
#define NCGP_BELIEF_HPP

#include "ncgp/gp_model.hpp"
#include "ncgp/linalg.hpp"

#include <memory>

namespace ncgp {

/// Computation-aware posterior: mean m + K(., X) v and covariance
/// K - K(., X) Q Q^T K(X, .).
struct PosteriorBelief {
  std::shared_ptr<const MultiOutputPrior> prior;
  std::shared_ptr<const Matrix> X;
  Vector v;
  linalg::LowRankRoot Q;
  Index outer_step = 0; // i
  Index inner_iter = 0; // j

  Index num_outputs() const { return prior->num_outputs(); }
  Index num_points() const { return X->rows(); }
  void check() const;

  // Prior belief: v = 0, rank-0 root.
  static PosteriorBelief prior_only(std::shared_ptr<const MultiOutputPrior> prior,
                                    std::shared_ptr<const Matrix> X);
};

} // namespace ncgp

#endif
