#pragma once

#include <cstddef>

// Dense row-major f64 primitives shared by the tape ops and the incremental
// policy evaluator. The summation order (ascending over the contraction
// index) is part of the contract: both callers must observe bit-identical
// results for the same inputs.
namespace vppo::kernels {

// c = a (m x k) * b (k x n); c is overwritten.
void matmul(const double* a, const double* b, double* c, int m, int k, int n);

// out = x (1 x k) * w (k x n); out is overwritten.
void matvec(const double* x, const double* w, double* out, int k, int n);

double dot(const double* a, const double* b, int n);

// In-place, max-subtracted. Normalizes by multiplying with 1/sum.
void softmax_row(double* x, int n);

// In-place: x[i] -= max + log(sum exp(x - max)).
void log_softmax_row(double* x, int n);

// In-place RMS normalization: x *= 1/sqrt(mean(x^2) + 1e-8).
void rmsnorm_row(double* x, int n);

void add_inplace(double* a, const double* b, int n);

}  // namespace vppo::kernels
