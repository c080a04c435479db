#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <vector>

#include "CLI11.hpp"

#include "archdsl/candidate_random.hpp"
#include "archdsl/kernels.hpp"
#include "archdsl/ranker.hpp"
#include "archdsl/rl_generator.hpp"

using namespace archdsl;

namespace {

template <class F>
double best_seconds(int reps, F&& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void bench_linear(int reps) {
  std::printf("%-28s %10s %10s %8s %s\n", "linear (batch x in x out)", "serial ms", "omp ms", "speedup", "identical");
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  const int shapes[][3] = {{16, 64, 64}, {32, 128, 512}, {64, 256, 1024}, {128, 512, 512}};
  for (const auto& s : shapes) {
    const kernels::LinearDims d{s[0], s[1], s[2]};
    std::vector<double> x(std::size_t(d.batch) * d.in), w(std::size_t(d.out) * d.in), b(d.out);
    for (auto* v : {&x, &w, &b}) for (auto& e : *v) e = n(rng);
    std::vector<double> ys(std::size_t(d.batch) * d.out), yp(ys.size());
    std::vector<double> dws(w.size()), dwp(w.size()), dbs(b.size()), dbp(b.size());
    const double ts = best_seconds(reps, [&] {
      kernels::serial::linear_forward(x.data(), w.data(), b.data(), ys.data(), d);
      kernels::serial::linear_backward_weight(ys.data(), x.data(), dws.data(), dbs.data(), d);
    });
    const double tp = best_seconds(reps, [&] {
      kernels::omp::linear_forward(x.data(), w.data(), b.data(), yp.data(), d);
      kernels::omp::linear_backward_weight(yp.data(), x.data(), dwp.data(), dbp.data(), d);
    });
    const bool same = std::memcmp(ys.data(), yp.data(), ys.size() * sizeof(double)) == 0 &&
                      std::memcmp(dws.data(), dwp.data(), dws.size() * sizeof(double)) == 0;
    char label[64];
    std::snprintf(label, sizeof label, "%d x %d x %d", d.batch, d.in, d.out);
    std::printf("%-28s %10.3f %10.3f %8.2f %s\n", label, ts * 1e3, tp * 1e3, ts / tp, same ? "yes" : "NO");
  }
}

void bench_ranker(int reps, int n) {
  GenConfig g;
  g.seed = 3;
  const auto cands = generate_batch(g, n).candidates;
  RankerConfig rc;
  rc.hidden = 32;
  Ranker ranker(rc);
  std::vector<double> a, b;
  const double ts = best_seconds(reps, [&] { a = ranker.score_all(cands, false); });
  const double tp = best_seconds(reps, [&] { b = ranker.score_all(cands, true); });
  std::printf("ranker score_all (%zu cands)   %10.1f %10.1f %8.2f %s\n", cands.size(), ts * 1e3, tp * 1e3, ts / tp,
              a == b ? "yes" : "NO");
}

void bench_policy(int episodes, int hidden) {
  PolicyConfig pc;
  pc.hidden = hidden;
  Policy pol(pc);
  std::mt19937_64 rng(5);
  long actions = 0;
  const double t = best_seconds(1, [&] {
    for (int i = 0; i < episodes; ++i) actions += static_cast<long>(pol.generate(rng).actions.size());
  });
  std::printf("policy generate hidden %-3d    %8.3f ms/episode, %.1f actions/episode\n", hidden, t * 1e3 / episodes,
              double(actions) / episodes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernels and component throughput"};
  int reps = 5;
  int candidates = 500;
  int episodes = 200;
  app.add_option("--reps", reps)->check(CLI::PositiveNumber);
  app.add_option("--candidates", candidates)->check(CLI::PositiveNumber);
  app.add_option("--episodes", episodes)->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  std::printf("threads %d\n", kernels::max_threads());
  bench_linear(reps);
  bench_ranker(std::max(1, reps / 2), candidates);
  bench_policy(episodes, 16);
  bench_policy(episodes, 64);
  return 0;
}
