#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lcanet/random.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-3;
  // Entries per parameter to probe; 0 probes every entry.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
  // Gradient magnitudes below this count as exactly zero.
  double abs_floor = 1e-7;
  // Forward-pass roundoff, in units of machine_eps * max(1, |f|).
  double roundoff_factor = 64.0;
  // Fraction of all probes allowed to sit on a detected kink.
  double max_kink_fraction = 0.1;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // probes excluded because the stencil straddles a non-differentiable point
  double max_rel_error = 0.0;
  bool finite = true;
  std::string failure;  // location of the first non-finite value
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t checked = 0, kinks = 0;
  bool passed = true;
};

/**
 * Compares reverse-mode gradients against central differences.
 *
 * For each named parameter the error is max_i |a_i - n_i| / s, where s is the
 * largest |a_i| or |n_i| among the probed entries, floored at abs_floor and
 * at the roundoff resolution of the difference quotient,
 * roundoff_factor * machine_eps * max(1, |f|) / eps. The
 * function must be deterministic and return a scalar; parameters are perturbed
 * in place and restored.
 *
 * A probe whose stencil [x - eps, x + eps] crosses a ReLU, max-pool or
 * top-k switch has no meaningful central difference. Such a probe is set
 * aside as a kink when the one-sided slopes d+ and d- disagree by more than
 * tol * s and the analytic value lies within |d+ - d-| / 2 of the central
 * value; a wrong gradient at a smooth point fails both tests. More than
 * max_kink_fraction of all probes landing on kinks fails the check.
 */
template <typename T, typename Fn>
GradCheckReport grad_check(Fn&& fn, std::vector<std::pair<std::string, BasicTensor<T>>> params,
                           const GradCheckOptions& options = {}) {
  GradCheckReport report;
  for (auto& [name, p] : params) p.zero_grad();
  BasicTensor<T> loss = fn();
  const double f0 = static_cast<double>(loss.item());
  backward(loss);

  Rng rng(options.seed, 0x9c4a11);
  for (auto& [name, p] : params) {
    GradCheckEntry entry;
    entry.name = name;
    std::vector<T> analytic = p.has_grad() ? std::vector<T>(p.grad().begin(), p.grad().end())
                                           : std::vector<T>(p.numel(), T(0));
    std::vector<std::size_t> indices(p.numel());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (options.max_entries > 0 && indices.size() > options.max_entries) {
      for (std::size_t i = 0; i < options.max_entries; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.next() % (indices.size() - i));
        std::swap(indices[i], indices[j]);
      }
      indices.resize(options.max_entries);
      std::sort(indices.begin(), indices.end());
    }

    const double resolution =
        options.roundoff_factor * std::numeric_limits<T>::epsilon() * std::max(1.0, std::abs(f0)) / options.eps;
    double scale = std::max(options.abs_floor, resolution);
    double worst = 0.0;
    struct Probe {
      double analytic, central, forward, backward;
    };
    std::vector<Probe> probes;
    for (std::size_t idx : indices) {
      const T saved = p[idx];
      double plus, minus;
      {
        NoGradGuard guard;
        p[idx] = static_cast<T>(saved + options.eps);
        plus = static_cast<double>(fn().item());
        p[idx] = static_cast<T>(saved - options.eps);
        minus = static_cast<double>(fn().item());
      }
      p[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = static_cast<double>(analytic[idx]);
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        entry.finite = false;
        if (entry.failure.empty()) entry.failure = name + "[" + std::to_string(idx) + "]";
        continue;
      }
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
      probes.push_back({a, numeric, (plus - f0) / options.eps, (f0 - minus) / options.eps});
    }
    for (const auto& p : probes) {
      const double err = std::abs(p.analytic - p.central);
      const double jump = std::abs(p.forward - p.backward);
      if (err / scale >= options.tol && jump / scale > options.tol && err <= 0.5 * jump + options.tol * scale) {
        ++entry.kinks;
        continue;
      }
      worst = std::max(worst, err / scale);
    }
    entry.checked = indices.size();
    entry.max_rel_error = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
    if (!entry.finite || worst >= options.tol) report.passed = false;
    report.kinks += entry.kinks;
    report.checked += entry.checked;
    report.entries.push_back(std::move(entry));
  }
  if (static_cast<double>(report.kinks) > options.max_kink_fraction * static_cast<double>(report.checked))
    report.passed = false;
  return report;
}

}  // namespace lcanet
