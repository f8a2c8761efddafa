#pragma once
// Finite-difference gradient checks for DMFA networks, shared by the unit
// tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dmfa/dmfa.hpp"

namespace gradcheck {

using namespace dmfa;

/// Random masked sample on `shape` with a random patch of missing pixels.
inline MaskedSample random_sample(const ImageShape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> pix(0.0f, 1.0f);
  std::vector<float> x(shape.size());
  for (auto& v : x) v = pix(rng);
  std::uniform_int_distribution<int> ph(1, std::max(1, shape.height / 2)), pw(1, std::max(1, shape.width / 2));
  const Mask m = random_patch_mask(shape, {ph(rng), pw(rng)}, rng);
  return apply_mask(x, m);
}

struct Result {
  std::size_t checked = 0;   // entries compared against the tolerance
  std::size_t failed = 0;
  std::size_t kinked = 0;    // entries skipped because +-h crossed a ReLU kink
  std::size_t strict_failed = 0;  // failures without the rounding allowance
  double worst = 0;          // largest (|g - fd| - allowance) / scale seen
  std::string worst_param;

  double kinked_fraction() const {
    const std::size_t total = checked + kinked;
    return total == 0 ? 0.0 : static_cast<double>(kinked) / static_cast<double>(total);
  }
};

/// Central differences of the batch loss with respect to up to `per_tensor`
/// randomly chosen entries of every parameter tensor.
///
/// The network is piecewise smooth: a leaky-ReLU input changing sign between
/// the +h and -h evaluations puts a kink inside the stencil, where a central
/// difference does not estimate the derivative. Such entries are counted in
/// `kinked` and not compared.
///
/// An entry passes when |g - fd| <= tol * max(|g|, |fd|, floor) + allowance.
/// floor is 1e-3 times the largest |g| of the same tensor. When a double
/// replica of the network is supplied, allowance is the exact rounding error
/// of the two f32 loss evaluations, (|L32(+h) - L64(+h)| + |L32(-h) - L64(-h)|)
/// divided by the stencil width; otherwise it is zero.
template <typename S, typename T>
Result check_network(DmfaNetwork<T>& net, const std::vector<const MaskedSample*>& batch, LossMode mode, double h,
                     double tol, std::size_t per_tensor, std::mt19937_64& rng,
                     DmfaNetwork<double>* replica = nullptr) {
  loss_gradients<S>(net, batch, mode);
  const auto base_pattern = net.relu_pattern();
  const auto replica_params = replica ? replica->params() : std::vector<nn::Param<double>*>{};
  Result out;
  const auto params = net.params();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    const Mat<T> grad = p->grad;
    const double scale = grad.cwiseAbs().maxCoeff();
    std::vector<Index> picks(static_cast<std::size_t>(p->value.size()));
    for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = static_cast<Index>(i);
    std::shuffle(picks.begin(), picks.end(), rng);
    picks.resize(std::min(picks.size(), per_tensor));
    for (Index i : picks) {
      T& v = p->value.data()[i];
      const T keep = v;
      double rounding = 0;
      auto evaluate = [&](T value) {
        v = value;
        const double loss = batch_loss<S>(net, batch, mode).mean_loss;
        if (replica) {
          double& rv = replica_params[pi]->value.data()[i];
          const double rkeep = rv;
          rv = static_cast<double>(value);
          rounding += std::abs(loss - batch_loss<double>(*replica, batch, mode).mean_loss);
          rv = rkeep;
        }
        return loss;
      };
      const T plus = static_cast<T>(keep + h), minus = static_cast<T>(keep - h);
      const double up = evaluate(plus);
      const bool same_up = net.relu_pattern() == base_pattern;
      const double down = evaluate(minus);
      const bool same_down = net.relu_pattern() == base_pattern;
      v = keep;
      if (!same_up || !same_down) {
        ++out.kinked;
        continue;
      }
      const double width = static_cast<double>(plus) - static_cast<double>(minus);
      const double fd = (up - down) / width;
      const double allowance = rounding / width;
      const double g = static_cast<double>(grad.data()[i]);
      const double denom = std::max({std::abs(g), std::abs(fd), 1e-3 * scale, 1e-30});
      const double err = std::max(0.0, std::abs(g - fd) - allowance) / denom;
      ++out.checked;
      if (err > tol) ++out.failed;
      if (std::abs(g - fd) / denom > tol) ++out.strict_failed;
      if (err > out.worst) {
        out.worst = err;
        out.worst_param = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

/// Gradient of the loss head alone (double precision) against central
/// differences in every head entry; returns the largest relative error with
/// the same floor convention as check_network.
inline double check_head(const Vec<double>& head, const MaskedSample& s, int latent, LossMode mode, double h) {
  const HeadLoss<double> hl = head_loss<double>(head, s, latent, mode);
  const double scale = hl.d_head.cwiseAbs().maxCoeff();
  double worst = 0;
  Vec<double> probe = head;
  for (Index i = 0; i < head.size(); ++i) {
    const double keep = probe(i);
    probe(i) = keep + h;
    const double up = head_loss<double>(probe, s, latent, mode).loss;
    probe(i) = keep - h;
    const double down = head_loss<double>(probe, s, latent, mode).loss;
    probe(i) = keep;
    const double fd = (up - down) / (2 * h);
    const double err =
        std::abs(hl.d_head(i) - fd) / std::max({std::abs(hl.d_head(i)), std::abs(fd), 1e-3 * scale, 1e-30});
    worst = std::max(worst, err);
  }
  return worst;
}

/// Double-precision copy of a network with identical parameter values.
template <typename T>
DmfaNetwork<double> replicate(DmfaNetwork<T>& net) {
  Container c;
  net.save(c);
  return DmfaNetwork<double>::load(c);
}

/// Small network on a toy image; widths kept tiny so checks stay fast.
inline NetworkSpec toy_spec(Arch arch, int size, std::uint64_t seed) {
  NetworkSpec spec;
  spec.arch = arch;
  spec.shape = {1, size, size};
  spec.latent = 2;
  spec.widths = {3, 4, 4, 5};
  spec.seed = seed;
  spec.head_init_scale = 1.0;
  spec.initial_noise = 0.2;
  return spec;
}

}  // namespace gradcheck
