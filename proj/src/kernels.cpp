#include "archdsl/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace archdsl::kernels {

namespace {
std::atomic<Mode> g_mode{Mode::automatic};

bool go_parallel(LinearDims d) {
  switch (g_mode.load(std::memory_order_relaxed)) {
    case Mode::serial: return false;
    case Mode::parallel: return true;
    case Mode::automatic: break;
  }
  const std::size_t work = static_cast<std::size_t>(d.batch) * d.in * d.out;
  return work >= kParallelThreshold && max_threads() > 1;
}
}  // namespace

void set_mode(Mode mode) { g_mode.store(mode, std::memory_order_relaxed); }
Mode mode() { return g_mode.load(std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d) {
  for (int r = 0; r < d.batch; ++r) {
    const double* xr = x + static_cast<std::size_t>(r) * d.in;
    for (int o = 0; o < d.out; ++o) {
      const double* wo = w + static_cast<std::size_t>(o) * d.in;
      double acc = b ? b[o] : 0.0;
      for (int k = 0; k < d.in; ++k) acc += xr[k] * wo[k];
      y[static_cast<std::size_t>(r) * d.out + o] = acc;
    }
  }
}

void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d) {
  for (int r = 0; r < d.batch; ++r) {
    const double* dyr = dy + static_cast<std::size_t>(r) * d.out;
    for (int k = 0; k < d.in; ++k) {
      double acc = 0.0;
      for (int o = 0; o < d.out; ++o) acc += dyr[o] * w[static_cast<std::size_t>(o) * d.in + k];
      dx[static_cast<std::size_t>(r) * d.in + k] += acc;
    }
  }
}

void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d) {
  for (int o = 0; o < d.out; ++o) {
    for (int k = 0; k < d.in; ++k) {
      double acc = 0.0;
      for (int r = 0; r < d.batch; ++r) {
        acc += dy[static_cast<std::size_t>(r) * d.out + o] * x[static_cast<std::size_t>(r) * d.in + k];
      }
      dw[static_cast<std::size_t>(o) * d.in + k] += acc;
    }
    if (db) {
      double acc = 0.0;
      for (int r = 0; r < d.batch; ++r) acc += dy[static_cast<std::size_t>(r) * d.out + o];
      db[o] += acc;
    }
  }
}

}  // namespace serial

namespace omp {

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int r = 0; r < d.batch; ++r) {
    for (int o = 0; o < d.out; ++o) {
      const double* xr = x + static_cast<std::size_t>(r) * d.in;
      const double* wo = w + static_cast<std::size_t>(o) * d.in;
      double acc = b ? b[o] : 0.0;
      for (int k = 0; k < d.in; ++k) acc += xr[k] * wo[k];
      y[static_cast<std::size_t>(r) * d.out + o] = acc;
    }
  }
}

void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int r = 0; r < d.batch; ++r) {
    for (int k = 0; k < d.in; ++k) {
      const double* dyr = dy + static_cast<std::size_t>(r) * d.out;
      double acc = 0.0;
      for (int o = 0; o < d.out; ++o) acc += dyr[o] * w[static_cast<std::size_t>(o) * d.in + k];
      dx[static_cast<std::size_t>(r) * d.in + k] += acc;
    }
  }
}

void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < d.out; ++o) {
    for (int k = 0; k < d.in; ++k) {
      double acc = 0.0;
      for (int r = 0; r < d.batch; ++r) {
        acc += dy[static_cast<std::size_t>(r) * d.out + o] * x[static_cast<std::size_t>(r) * d.in + k];
      }
      dw[static_cast<std::size_t>(o) * d.in + k] += acc;
    }
    if (db) {
      double acc = 0.0;
      for (int r = 0; r < d.batch; ++r) acc += dy[static_cast<std::size_t>(r) * d.out + o];
      db[o] += acc;
    }
  }
}

}  // namespace omp

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d) {
  if (go_parallel(d)) {
    omp::linear_forward(x, w, b, y, d);
  } else {
    serial::linear_forward(x, w, b, y, d);
  }
}

void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d) {
  if (go_parallel(d)) {
    omp::linear_backward_input(dy, w, dx, d);
  } else {
    serial::linear_backward_input(dy, w, dx, d);
  }
}

void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d) {
  if (go_parallel(d)) {
    omp::linear_backward_weight(dy, x, dw, db, d);
  } else {
    serial::linear_backward_weight(dy, x, dw, db, d);
  }
}

}  // namespace archdsl::kernels
