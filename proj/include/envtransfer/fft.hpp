#pragma once

#include <complex>
#include <span>
#include <vector>

namespace envtransfer {

/// Real-input FFT of a fixed size backed by FFTW. Plans are created once per
/// size behind a lock; execution is reentrant.
class RealFft {
 public:
  explicit RealFft(int n);

  int size() const noexcept { return n_; }
  /// `in` has n samples, `out` has n/2 + 1 bins.
  void forward(std::span<const double> in, std::span<std::complex<double>> out) const;
  /// Unnormalized inverse (result scaled by n, as FFTW does).
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) const;

 private:
  int n_;
  void* forward_plan_;
  void* inverse_plan_;
};

/// Linear convolution of `x` with `h`, truncated to the first x.size() samples.
std::vector<float> convolve_truncated(std::span<const float> x, std::span<const float> h);

}  // namespace envtransfer
