#include "vppo/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace vppo::kernels {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<size_t>(i) * k + p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matvec(const double* x, const double* w, double* out, int k, int n) {
  std::fill(out, out + n, 0.0);
  for (int p = 0; p < k; ++p) {
    const double xv = x[p];
    const double* wrow = w + static_cast<size_t>(p) * n;
    for (int j = 0; j < n; ++j) out[j] += xv * wrow[j];
  }
}

double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void softmax_row(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

void log_softmax_row(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  for (int i = 0; i < n; ++i) x[i] -= lse;
}

void rmsnorm_row(double* x, int n) {
  double ms = 0.0;
  for (int i = 0; i < n; ++i) ms += x[i] * x[i];
  ms = ms / n + 1e-8;
  const double inv = 1.0 / std::sqrt(ms);
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

void add_inplace(double* a, const double* b, int n) {
  for (int i = 0; i < n; ++i) a[i] += b[i];
}

}  // namespace vppo::kernels
