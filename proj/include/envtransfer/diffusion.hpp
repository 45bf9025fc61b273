#pragma once

// DDPM arithmetic over plain grids: schedule, forward noising, posterior
// reverse step, ancestral sampling and the epsilon-regression loss. The
// denoiser is any callable
//   Grid(const Grid& y_t, int t, const Grid& x_c, std::span<const float> z_r)
// so the same code drives analytic toy denoisers and the neural decoders.

#include <cmath>
#include <concepts>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "envtransfer/errors.hpp"
#include "envtransfer/grid.hpp"

namespace envtransfer {

/// Per-step constants for steps t = 1..T. Index 0 of the arrays is the
/// t = 0 sentinel (alpha_bar = 1, beta = 0).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// Builds from an explicit beta_1..beta_T sequence.
  explicit NoiseSchedule(std::vector<double> betas) {
    if (betas.size() < 1) throw InvalidInput("schedule needs at least one step");
    const std::size_t T = betas.size();
    beta_.assign(T + 1, 0.0);
    alpha_.assign(T + 1, 1.0);
    alpha_bar_.assign(T + 1, 1.0);
    posterior_var_.assign(T + 1, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
      const double b = betas[t - 1];
      if (!(b > 0.0 && b < 1.0)) throw InvalidInput("every beta must lie in (0, 1)");
      beta_[t] = b;
      alpha_[t] = 1.0 - b;
      alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
      posterior_var_[t] = (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]) * b;
    }
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()) - 1; }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t)); }
  double alpha(int t) const { return alpha_.at(static_cast<std::size_t>(t)); }
  /// Defined for t = 0..T with alpha_bar(0) = 1.
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }
  double posterior_variance(int t) const { return posterior_var_.at(static_cast<std::size_t>(t)); }

  std::vector<double> betas() const { return {beta_.begin() + 1, beta_.end()}; }

  void check_step(int t) const {
    if (t < 1 || t > steps()) {
      throw InvalidInput("diffusion step " + std::to_string(t) + " outside [1, " +
                         std::to_string(steps()) + "]");
    }
  }

 private:
  std::vector<double> beta_, alpha_, alpha_bar_, posterior_var_;
};

/// Linear beta from beta_start to beta_end inclusive.
inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw InvalidInput("schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw InvalidInput("need 0 < beta_start < beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (T - 1);
  }
  return NoiseSchedule(std::move(betas));
}

struct ScheduleDefaults {
  static constexpr int steps = 100;
  static constexpr double beta_start = 1e-4;
  static constexpr double beta_end = 0.06;
};

inline NoiseSchedule default_schedule() {
  return build_schedule(ScheduleDefaults::steps, ScheduleDefaults::beta_start, ScheduleDefaults::beta_end);
}

/// The three numbers a linear schedule is built from; persisted with checkpoints.
struct ScheduleParams {
  int steps = ScheduleDefaults::steps;
  double beta_start = ScheduleDefaults::beta_start;
  double beta_end = ScheduleDefaults::beta_end;

  NoiseSchedule build() const { return build_schedule(steps, beta_start, beta_end); }
  bool operator==(const ScheduleParams&) const = default;
};

/// Outcome of checking every schedule invariant; `violations` is empty when all hold.
struct ScheduleReport {
  bool beta_in_range = true;
  bool beta_increasing = true;
  bool alpha_bar_decreasing = true;
  bool first_posterior_zero = true;
  bool posterior_bounded = true;
  double terminal_alpha_bar = 0.0;
  bool terminal_near_gaussian = true;
  std::vector<std::string> violations;

  bool ok() const noexcept { return violations.empty(); }
};

inline ScheduleReport check_schedule(const NoiseSchedule& s) {
  ScheduleReport r;
  const int T = s.steps();
  for (int t = 1; t <= T; ++t) {
    if (!(s.beta(t) > 0.0 && s.beta(t) < 1.0)) r.beta_in_range = false;
    if (t > 1 && !(s.beta(t) > s.beta(t - 1))) r.beta_increasing = false;
    if (!(s.alpha_bar(t) < s.alpha_bar(t - 1))) r.alpha_bar_decreasing = false;
    if (!(s.posterior_variance(t) >= 0.0 && s.posterior_variance(t) <= s.beta(t))) r.posterior_bounded = false;
  }
  r.first_posterior_zero = s.posterior_variance(1) == 0.0;
  r.terminal_alpha_bar = s.alpha_bar(T);
  r.terminal_near_gaussian = r.terminal_alpha_bar < 0.05;
  if (!r.beta_in_range) r.violations.emplace_back("beta outside (0, 1)");
  if (!r.beta_increasing) r.violations.emplace_back("beta not strictly increasing");
  if (!r.alpha_bar_decreasing) r.violations.emplace_back("alpha_bar not strictly decreasing");
  if (!r.first_posterior_zero) r.violations.emplace_back("posterior variance at t=1 is not 0");
  if (!r.posterior_bounded) r.violations.emplace_back("posterior variance outside [0, beta_t]");
  if (!r.terminal_near_gaussian) r.violations.emplace_back("alpha_bar_T >= 0.05");
  return r;
}

/// JSON text with T and the beta sequence, for reproducibility audits.
void write_schedule(const std::filesystem::path& path, const NoiseSchedule& s);
NoiseSchedule read_schedule(const std::filesystem::path& path);

template <typename Rng>
Grid gaussian_like(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Grid g(rows, cols);
  for (float& v : g.values()) v = static_cast<float>(gauss(rng));
  return g;
}

/// sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps.
inline Grid forward_marginal(const Grid& y0, int t, const Grid& eps, const NoiseSchedule& s) {
  require_same_shape(y0, eps, "forward_marginal");
  s.check_step(t);
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Grid out(y0.rows(), y0.cols());
  for (std::size_t i = 0; i < y0.size(); ++i) {
    out.values()[i] = static_cast<float>(a * y0.values()[i] + b * eps.values()[i]);
  }
  return out;
}

/// One forward transition: sqrt(1 - beta_t) * y_prev + sqrt(beta_t) * z.
template <typename Rng>
Grid forward_step(const Grid& y_prev, int t, const NoiseSchedule& s, Rng& rng) {
  s.check_step(t);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double a = std::sqrt(1.0 - s.beta(t));
  const double b = std::sqrt(s.beta(t));
  Grid out(y_prev.rows(), y_prev.cols());
  for (std::size_t i = 0; i < y_prev.size(); ++i) {
    out.values()[i] = static_cast<float>(a * y_prev.values()[i] + b * gauss(rng));
  }
  return out;
}

/// Posterior mean from an epsilon estimate:
/// (y_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t).
inline Grid reverse_mean(const Grid& y_t, int t, const Grid& eps_hat, const NoiseSchedule& s) {
  require_same_shape(y_t, eps_hat, "reverse_step");
  s.check_step(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double eps_coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  Grid mu(y_t.rows(), y_t.cols());
  for (std::size_t i = 0; i < y_t.size(); ++i) {
    mu.values()[i] =
        static_cast<float>(inv_sqrt_alpha * (y_t.values()[i] - eps_coef * eps_hat.values()[i]));
  }
  return mu;
}

/// Draw y_{t-1} ~ N(mu, posterior_variance(t) I). At t == 1 the variance is
/// zero and the mean is returned without consuming randomness.
template <typename Rng>
Grid reverse_step(const Grid& y_t, int t, const Grid& eps_hat, const NoiseSchedule& s, Rng& rng) {
  Grid mu = reverse_mean(y_t, t, eps_hat, s);
  if (t == 1) return mu;
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma = std::sqrt(s.posterior_variance(t));
  for (float& v : mu.values()) v = static_cast<float>(v + sigma * gauss(rng));
  return mu;
}

template <typename F>
concept Denoiser = requires(F f, const Grid& y, int t, const Grid& c, std::span<const float> z) {
  { f(y, t, c, z) } -> std::convertible_to<Grid>;
};

/// Ancestral sampling from y_T ~ N(0, I) down to y_0.
template <Denoiser F, typename Rng>
Grid sample(F&& denoiser, const Grid& x_c, std::span<const float> z_r, std::size_t rows,
            std::size_t cols, const NoiseSchedule& s, Rng& rng) {
  if (!x_c.empty() && x_c.cols() != cols) {
    throw InvalidInput("sample shape does not match the conditioning length");
  }
  Grid y = gaussian_like(rows, cols, rng);
  for (int t = s.steps(); t >= 1; --t) {
    Grid eps_hat = denoiser(y, t, x_c, z_r);
    if (!eps_hat.same_shape(y)) throw InvalidInput("denoiser output shape mismatch");
    y = reverse_step(y, t, eps_hat, s, rng);
  }
  return y;
}

/// Everything a caller needs to backpropagate through the loss.
struct LossSample {
  double loss = 0.0;
  int t = 0;
  Grid eps;
  Grid y_t;
  Grid eps_hat;
};

/// t ~ U{1..T}, eps ~ N(0, I); mean over cells of (eps - f(y_t, t, ...))^2.
template <Denoiser F, typename Rng>
LossSample training_loss(F&& denoiser, const Grid& y0, const Grid& x_c, std::span<const float> z_r,
                         const NoiseSchedule& s, Rng& rng) {
  std::uniform_int_distribution<int> pick_t(1, s.steps());
  LossSample out;
  out.t = pick_t(rng);
  out.eps = gaussian_like(y0.rows(), y0.cols(), rng);
  out.y_t = forward_marginal(y0, out.t, out.eps, s);
  out.eps_hat = denoiser(out.y_t, out.t, x_c, z_r);
  if (!out.eps_hat.same_shape(y0)) throw InvalidInput("denoiser output shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < y0.size(); ++i) {
    const double d = out.eps.values()[i] - out.eps_hat.values()[i];
    acc += d * d;
  }
  out.loss = y0.empty() ? 0.0 : acc / static_cast<double>(y0.size());
  return out;
}

}  // namespace envtransfer
