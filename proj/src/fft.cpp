#include "envtransfer/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>

#include "envtransfer/errors.hpp"

namespace envtransfer {
namespace {

struct Plans {
  fftw_plan forward;
  fftw_plan inverse;
};

// Planning in FFTW is not thread-safe; execution with the new-array API is.
Plans plans_for(int n) {
  static std::mutex mutex;
  static std::map<int, Plans> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(n); it != cache.end()) return it->second;
  std::vector<double> real(static_cast<std::size_t>(n));
  std::vector<fftw_complex> cplx(static_cast<std::size_t>(n / 2 + 1));
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  Plans p{fftw_plan_dft_r2c_1d(n, real.data(), cplx.data(), flags),
          fftw_plan_dft_c2r_1d(n, cplx.data(), real.data(), flags | FFTW_DESTROY_INPUT)};
  cache.emplace(n, p);
  return p;
}

}  // namespace

RealFft::RealFft(int n) : n_(n) {
  if (n < 2) throw InvalidInput("FFT size must be at least 2");
  const Plans p = plans_for(n);
  forward_plan_ = p.forward;
  inverse_plan_ = p.inverse;
}

void RealFft::forward(std::span<const double> in, std::span<std::complex<double>> out) const {
  if (in.size() != static_cast<std::size_t>(n_) || out.size() != static_cast<std::size_t>(n_ / 2 + 1)) {
    throw InvalidInput("FFT buffer size mismatch");
  }
  // r2c does not modify its input.
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_), const_cast<double*>(in.data()),
                       reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::span<double> out) const {
  if (out.size() != static_cast<std::size_t>(n_) || in.size() != static_cast<std::size_t>(n_ / 2 + 1)) {
    throw InvalidInput("FFT buffer size mismatch");
  }
  std::vector<std::complex<double>> scratch(in.begin(), in.end());
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(scratch.data()), out.data());
}

std::vector<float> convolve_truncated(std::span<const float> x, std::span<const float> h) {
  if (x.empty() || h.empty()) return std::vector<float>(x.size(), 0.0f);
  const std::size_t full = x.size() + h.size() - 1;
  int n = 2;
  while (static_cast<std::size_t>(n) < full) n *= 2;
  const RealFft fft(n);
  std::vector<double> a(static_cast<std::size_t>(n), 0.0), b(static_cast<std::size_t>(n), 0.0);
  std::copy(x.begin(), x.end(), a.begin());
  std::copy(h.begin(), h.end(), b.begin());
  std::vector<std::complex<double>> fa(static_cast<std::size_t>(n / 2 + 1)), fb(fa.size());
  fft.forward(a, fa);
  fft.forward(b, fb);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  fft.inverse(fa, a);
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<float>(a[i] / n);
  return y;
}

}  // namespace envtransfer
