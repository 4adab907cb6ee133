#ifndef NCGP_SYNTH_DATA_HPP
#define NCGP_SYNTH_DATA_HPP

#include "ncgp/gp_model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ncgp {

enum class GeneratorKind { GpBinary1D, GpBinary2D, GpPoisson1D, GaussianMixture3D };

std::string to_string(GeneratorKind kind);
GeneratorKind generator_kind_from_string(const std::string &name);

/// `seed` fixes the generative process (latent function, mixture
/// parameters); `repeat` selects an independent redraw of the observations.
struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::GpPoisson1D;
  std::uint64_t seed = 0;
  std::uint64_t repeat = 0;
  Index num_points = 100;      // GP kinds: training points
  Index num_test = 100;        // GP binary: extra test inputs
  Index num_classes = 10;      // mixture
  Index n_per_class = 1000;    // mixture training points per class
  Index n_test_per_class = 100;
  double lengthscale = 0.1;
  double outputscale = 5.0;

  void validate() const;
  // Defaults of the reference setups for each kind.
  static GeneratorSpec defaults(GeneratorKind kind);
};

struct MixtureComponent {
  Vector mean;       // 3
  Matrix covariance; // 3 x 3
  Vector eigenvalues;
};

struct GeneratedData {
  Dataset train;
  Dataset test;
  Vector true_latent_train; // GP kinds: latent f at training inputs
  Vector true_latent_test;
  std::vector<MixtureComponent> components;
};

/// N points on [0, 1], log rate from an RBF GP, counts ~ Poisson(exp f).
/// The test set redraws counts at the same inputs.
GeneratedData gen_gp_poisson_1d(const GeneratorSpec &spec);

/// Means ~ U([-1, 1]^3), covariances U diag(lambda) U^T with U the
/// eigenvectors of A A^T for A with U(0, 1) entries and lambda ~
/// U(0.001, 0.1). Rows are shuffled.
GeneratedData gen_gaussian_mixture_3d(const GeneratorSpec &spec);

/// Inputs uniform in [-3, 5] (x [-4, 1] for two dimensions), latent from an
/// RBF GP, labels ~ Bernoulli(logistic(f)).
GeneratedData gen_gp_binary(const GeneratorSpec &spec, int dims);

GeneratedData generate(const GeneratorSpec &spec);

/// Zero-mean GP draw at X via a jittered dense Cholesky factor.
Vector draw_gp(const KernelSpec &kernel, const Matrix &X, std::uint64_t seed,
               double jitter = 1e-10);

/// Writes `<stem>_train.csv`, `<stem>_test.csv` and `<stem>.json` into dir;
/// returns the written paths.
std::vector<std::string> write_generated(const std::string &dir,
                                         const std::string &stem,
                                         const GeneratorSpec &spec,
                                         const GeneratedData &data);

} // namespace ncgp

#endif
