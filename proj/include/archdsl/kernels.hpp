#pragma once

#include <cstddef>

// Dense linear-layer kernels. Every kernel has a serial reference and an OpenMP
// version; both compute each output element with the same summation order, so their
// results are bit-identical. The dispatching entry points pick one per call.
namespace archdsl::kernels {

struct LinearDims {
  int batch;  // rows of X / Y
  int in;     // columns of X, columns of W
  int out;    // rows of W, columns of Y
};

enum class Mode { automatic, serial, parallel };

// Process-wide dispatch mode; `automatic` goes parallel above a work threshold.
void set_mode(Mode mode);
Mode mode();
// Multiply-accumulate count above which `automatic` uses the OpenMP kernels.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

namespace serial {
// Y = X W^T + b   (b may be null)
void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d);
// dX += dY W
void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d);
// dW += dY^T X ; db += sum_rows dY  (db may be null)
void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d);
}  // namespace serial

namespace omp {
void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d);
void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d);
void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d);
}  // namespace omp

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d);
void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d);
void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d);

int max_threads();

}  // namespace archdsl::kernels
