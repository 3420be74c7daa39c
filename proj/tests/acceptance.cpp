// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "cprune/cap.hpp"
#include "cprune/cli.hpp"
#include "cprune/compensation.hpp"
#include "cprune/search.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cprune;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double vec_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 1e-300;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - b[i]));
    scale = std::max(scale, std::fabs(b[i]));
  }
  return diff / scale;
}

Tensor64 identity(std::size_t n) {
  Tensor64 m = Tensor64::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Verdict compensation_oracle() {
  double worst_w = 0.0, worst_b = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    fixture::Rng rng(1000 + seed);
    const std::size_t channels = 2 + rng.index(31), outputs = 1 + rng.index(8);
    const auto inst = fixture::random_instance(channels, 1, outputs, 512, rng);
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < channels; ++c)
      if (rng.uniform(0, 1) < 0.5) keep.push_back(c);
    if (keep.empty()) keep.push_back(0);
    const Selection sel(keep, channels, 1);
    const auto r = compensate(inst.w, inst.b, inst.stats, sel);
    const auto fit = oracle::wls_fit(inst.x, inst.weights, inst.w, inst.b, sel.rows());
    worst_w = std::max(worst_w, oracle::rel_error(r.w_hat, fit.w_hat));
    worst_b = std::max(worst_b, vec_rel(r.b_hat, fit.b_hat));
  }
  return {worst_w <= 1e-6 && worst_b <= 1e-6,
          "50 instances, max rel err W " + fmt("%.2e", worst_w) + ", b " + fmt("%.2e", worst_b)};
}

Verdict identity_case() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    fixture::Rng rng(2000 + seed);
    const auto inst = fixture::random_instance(4 + rng.index(12), 1 + rng.index(3), 1 + rng.index(6), 400, rng);
    const auto r = compensate(inst.w, inst.b, inst.stats,
                              Selection::all(inst.stats.channels(), inst.stats.rows_per_channel));
    worst = std::max({worst, oracle::rel_error(r.w_hat, inst.w), vec_rel(r.b_hat, inst.b)});
  }
  // Channel 1 repeats channel 0; keeping {0, 2} loses nothing.
  fixture::Rng rng(2100);
  StatisticsAccumulator acc(3, 1);
  for (int s = 0; s < 400; ++s) {
    const double a = rng.normal();
    acc.add(std::vector<double>{a, a, rng.normal()}, rng.uniform(0.2, 1.5));
  }
  const auto stats = acc.finalize();
  const double loss = reconstruction_loss(fixture::random_matrix(3, 4, rng), stats, Selection({0, 2}, 3, 1));
  return {worst <= 1e-6 && loss <= 1e-10,
          "S = C max rel err " + fmt("%.2e", worst) + ", collinear loss " + fmt("%.2e", loss)};
}

Verdict incremental_inverse() {
  double worst = 0.0;
  fixture::Rng rng(3000);
  auto check = [&](std::size_t channels, std::size_t rpc) {
    const std::size_t n = channels * rpc;
    const Tensor64 sigma = fixture::random_spd(n, rng);
    const auto stats = fixture::stats_from_sigma(sigma, rpc);
    const CapProblem problem(fixture::random_matrix(n, 4, rng), stats);
    CholeskyState state(problem);
    std::vector<std::size_t> order(channels);
    for (std::size_t i = 0; i < channels; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (auto c : order)
      if (!state.try_extend(channel_rows({c}, rpc))) return false;
    const auto rows = channel_rows(order, rpc);
    const Tensor64 direct = tri_inverse(cholesky(oracle::pick(sigma, rows, rows))).to_dense();
    worst = std::max(worst, oracle::frobenius_rel(state.l_inv().to_dense(), direct));
    return true;
  };
  bool ok = true;
  for (std::size_t n = 1; n <= 64; n += 3) ok &= check(n, 1);
  ok &= check(64, 1);
  for (std::size_t c : {1, 3, 5, 7}) ok &= check(c, 9);
  return {ok && worst <= 1e-8, "dims 1..64 and 9-row blocks, max Frobenius rel err " + fmt("%.2e", worst)};
}

Verdict greedy_equivalence() {
  std::size_t mismatched_steps = 0, steps = 0;
  double worst_gain = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    fixture::Rng rng(4000 + seed);
    const std::size_t channels = 2 + rng.index(15), rpc = 1 + rng.index(2);
    const auto inst = fixture::random_instance(channels, rpc, 1 + rng.index(5), 300, rng);
    const auto trace = oracle::explicit_greedy(inst.w, inst.stats.sigma, rpc, channels);
    const auto fast = cap_select(inst.w, inst.stats, 0.0);

    // Replay the fast path step by step and compare every candidate's gain
    // with the drop of the directly evaluated loss.
    const CapProblem problem(inst.w, inst.stats);
    CholeskyState state(problem);
    std::vector<std::size_t> chosen;
    const double scale = problem.total_energy();
    for (std::size_t step = 0; step < fast.order.size(); ++step) {
      const double before = oracle::direct_loss(inst.w, inst.stats.sigma, chosen, rpc);
      for (std::size_t c = 0; c < channels; ++c) {
        if (std::find(chosen.begin(), chosen.end(), c) != chosen.end()) continue;
        const auto gain = greedy_gain(state, c);
        if (!gain) continue;
        const double after = trace.step_losses[step][c];
        worst_gain = std::max(worst_gain, std::fabs(*gain - (before - after)) / scale);
      }
      ++steps;
      if (step >= trace.order.size() || trace.order[step] != fast.order[step]) ++mismatched_steps;
      chosen.push_back(fast.order[step]);
      if (!state.try_extend(channel_rows({fast.order[step]}, rpc))) ++mismatched_steps;
    }
  }
  return {mismatched_steps == 0 && worst_gain <= 1e-8,
          "100 instances, " + std::to_string(steps) + " steps, " + std::to_string(mismatched_steps) +
              " differing choices, max gain err " + fmt("%.2e", worst_gain) + " of total energy"};
}

Verdict magnitude_equivalence() {
  std::size_t mismatches = 0, cases = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    fixture::Rng rng(5000 + seed);
    const std::size_t channels = 4 + rng.index(29);
    const auto stats = fixture::stats_from_sigma(identity(channels), 1);
    const Tensor64 w = fixture::random_matrix(channels, 1 + rng.index(6), rng);
    for (double s : {0.25, 0.5, 0.75}) {
      ++cases;
      if (!(cap_select(w, stats, s).selection == baseline_select(BaselineMethod::L2, w, 1, s))) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(cases) + " cases, " + std::to_string(mismatches) + " mismatches"};
}

Verdict selector_ordering() {
  const std::vector<double> sigmas{0.25, 0.5, 0.75};
  std::vector<std::vector<double>> cap(3), l2(3), rnd(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    fixture::Rng rng(6000 + seed);
    // 24 independent channels plus 8 near copies of channels 0..7.
    StatisticsAccumulator acc(32, 1);
    std::vector<double> x(32);
    for (int s = 0; s < 512; ++s) {
      for (std::size_t c = 0; c < 24; ++c) x[c] = rng.normal();
      for (std::size_t c = 24; c < 32; ++c) x[c] = x[c - 24] + 0.05 * rng.normal();
      acc.add(x, 1.0);
    }
    const auto stats = acc.finalize();
    const Tensor64 w = fixture::random_matrix(32, 8, rng);
    for (std::size_t i = 0; i < 3; ++i) {
      cap[i].push_back(cap_select(w, stats, sigmas[i]).loss);
      l2[i].push_back(reconstruction_loss(w, stats, baseline_select(BaselineMethod::L2, w, 1, sigmas[i])));
      rnd[i].push_back(
          reconstruction_loss(w, stats, baseline_select(BaselineMethod::Random, w, 1, sigmas[i], seed)));
    }
  }
  bool ok = true;
  std::string detail = "median loss cap/l2/random:";
  for (std::size_t i = 0; i < 3; ++i) {
    const double c = median(cap[i]), l = median(l2[i]), r = median(rnd[i]);
    ok &= c <= l && c <= r;
    if (i > 0) ok &= c >= median(cap[i - 1]) && l >= median(l2[i - 1]) && r >= median(rnd[i - 1]);
    detail += " " + fmt("%.3g", sigmas[i]) + "->" + fmt("%.3g", c) + "/" + fmt("%.3g", l) + "/" + fmt("%.3g", r);
  }
  return {ok, detail};
}

// The redundancy fixture with its estimation pool and labeled validation set.
struct EndToEnd {
  Model model = fixture::redundant_cnn();
  Dataset pool = synth_normal(512, 3, 8, 8, 1);
  Dataset val = fixture::self_labeled(model, synth_normal(2000, 3, 8, 8, 2));
  std::vector<std::size_t> layers = default_prune_layers(model);

  StatisticsBundle stats(const Dataset& est) const {
    StatisticsBundle b;
    for (auto l : layers) {
      StatisticsOptions opts;
      opts.seed = derive_seed(derive_seed(0, 3), l);
      b[l] = estimate_statistics(model, est, l, opts);
    }
    return b;
  }
  SearchReport search(const Dataset& est, bool step_constraint) const {
    SearchConfig cfg;
    cfg.prune_layers = layers;
    cfg.step_constraint = step_constraint;
    return structural_search(model, stats(est), val, cfg).report;
  }
};

const EndToEnd& end_to_end() {
  static const EndToEnd e;
  return e;
}

Verdict structural_search_fixture() {
  const auto& e = end_to_end();
  const auto r = e.search(e.pool, true);
  bool ok = r.accuracy_drop() <= 0.01 && r.flops_drop() >= 0.25;
  std::string sig;
  for (const auto& v : r.visits) {
    ok &= v.sigma >= 0.25;
    sig += " " + fmt("%.3g", v.sigma);
  }
  return {ok, "top-1 drop " + fmt("%.4f", r.accuracy_drop()) + ", FLOPs drop " + fmt("%.4f", r.flops_drop()) +
                  ", sigma" + sig};
}

Verdict flops_formulas() {
  Model conv;
  conv.input_shape = {64, 32, 32};
  Conv2d c;
  c.in_channels = c.out_channels = 64;
  c.geom = {3, 1, 1};
  c.weight = Tensor({64, 64, 3, 3});
  conv.layers.push_back(c);
  Model bn;
  bn.input_shape = {64, 32, 32};
  BatchNorm b;
  b.gamma = b.beta = b.running_mean = b.running_var = Tensor({64}, 1.0f);
  bn.layers.push_back(b);
  const auto fc = flops(conv).total, fb = flops(bn).total;
  return {fc == 37748736ULL && fb == 131072ULL,
          "conv " + std::to_string(fc) + ", batch norm " + std::to_string(fb)};
}

Verdict step_constraint() {
  const auto& e = end_to_end();
  const auto with = e.search(e.pool, true);
  const auto without = e.search(e.pool, false);
  const double a = with.visits.front().sigma, b = without.visits.front().sigma;
  const bool ok = b > a && with.accuracy_drop() <= 0.01 && without.accuracy_drop() <= 0.01;
  return {ok, "first-layer sigma " + fmt("%.3g", a) + " constrained vs " + fmt("%.3g", b) + " global, drops " +
                  fmt("%.4f", with.accuracy_drop()) + " / " + fmt("%.4f", without.accuracy_drop())};
}

Verdict limited_data() {
  const auto& e = end_to_end();
  const auto full = e.search(e.pool, true);
  const auto tenth = e.search(split(e.pool, {0.1, 0.9}, derive_seed(0, 1))[0], true);
  const auto free = e.search(synth_normal(512, 3, 8, 8, derive_seed(0, 2)), true);
  const double gap = std::fabs(full.flops_drop() - tenth.flops_drop());
  const bool ok = gap <= 0.05 && free.accuracy_drop() <= 0.01;
  return {ok, "FLOPs drop " + fmt("%.4f", full.flops_drop()) + " full vs " + fmt("%.4f", tenth.flops_drop()) +
                  " at 10%, data-free drop " + fmt("%.4f", free.accuracy_drop()) + " with FLOPs drop " +
                  fmt("%.4f", free.flops_drop())};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism() {
  const auto& e = end_to_end();
  const fs::path dir = fs::temp_directory_path() / "cprune_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_model(e.model, dir / "model.cprn");
  save_raw_tensor(e.pool, dir / "pool.cpds");
  save_raw_tensor(e.val, dir / "val.cpds");
  auto run = [&](const std::string& out, const std::string& workers) {
    const std::vector<std::string> args{"cprune",   "search",  "--model",   (dir / "model.cprn").string(),
                                        "--data",   (dir / "pool.cpds").string(), "--data-format", "raw",
                                        "--val",    (dir / "val.cpds").string(),  "--seed",        "7",
                                        "--workers", workers,  "--out",     (dir / out).string()};
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, err;
    return run_cli(static_cast<int>(argv.size()), argv.data(), o, err);
  };
  const int a = run("one", "1"), b = run("two", "2");
  bool same = a == 0 && b == 0;
  for (const char* f : {"pruned.cprn", "search_report.json", "search_report.csv", "flops.json"}) {
    same &= fs::exists(dir / "one" / f) && slurp(dir / "one" / f) == slurp(dir / "two" / f);
  }
  fs::remove_all(dir);
  return {same, std::string("search with 1 and 2 workers: outputs ") + (same ? "byte-identical" : "differ")};
}

// Greedy selection that inverts Sigma_SS explicitly for every candidate.
std::vector<std::size_t> explicit_inverse_sweep(const Tensor64& w, const Tensor64& sigma) {
  const std::size_t n = sigma.rows(), outputs = w.cols();
  const Tensor64 bw = oracle::multiply(sigma, w);
  std::vector<std::size_t> chosen;
  std::vector<bool> used(n, false);
  std::vector<double> m;
  while (chosen.size() < n) {
    double best_explained = -1.0;
    std::size_t best = n;
    for (std::size_t c = 0; c < n; ++c) {
      if (used[c]) continue;
      auto s = chosen;
      s.push_back(c);
      const std::size_t k = s.size();
      // Gauss-Jordan on [Sigma_SS | B_S].
      m.assign(k * (k + outputs), 0.0);
      const std::size_t width = k + outputs;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) m[i * width + j] = sigma(s[i], s[j]);
        for (std::size_t o = 0; o < outputs; ++o) m[i * width + k + o] = bw(s[i], o);
      }
      bool singular = false;
      for (std::size_t col = 0; col < k && !singular; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < k; ++r)
          if (std::fabs(m[r * width + col]) > std::fabs(m[piv * width + col])) piv = r;
        if (std::fabs(m[piv * width + col]) < 1e-12) {
          singular = true;
          break;
        }
        if (piv != col)
          for (std::size_t j = 0; j < width; ++j) std::swap(m[piv * width + j], m[col * width + j]);
        const double d = m[col * width + col];
        for (std::size_t j = 0; j < width; ++j) m[col * width + j] /= d;
        for (std::size_t r = 0; r < k; ++r) {
          if (r == col) continue;
          const double f = m[r * width + col];
          for (std::size_t j = 0; j < width; ++j) m[r * width + j] -= f * m[col * width + j];
        }
      }
      if (singular) continue;
      double explained = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t o = 0; o < outputs; ++o) explained += bw(s[i], o) * m[i * width + k + o];
      if (explained > best_explained) {
        best_explained = explained;
        best = c;
      }
    }
    if (best == n) break;
    used[best] = true;
    chosen.push_back(best);
  }
  return chosen;
}

Verdict performance() {
  fixture::Rng rng(12000);
  const std::size_t n = 256;
  const Tensor64 sigma = fixture::random_spd(n, rng, 0.5);
  const auto stats = fixture::stats_from_sigma(sigma, 1);
  const Tensor64 w = fixture::random_matrix(n, 8, rng);
  const auto t0 = std::chrono::steady_clock::now();
  const auto fast = cap_select(w, stats, 0.0);
  const double t_fast = seconds_since(t0);
  const auto t1 = std::chrono::steady_clock::now();
  const auto slow = explicit_inverse_sweep(w, sigma);
  const double t_slow = seconds_since(t1);
  const double speedup = t_slow / std::max(t_fast, 1e-9);
  const bool agree = slow == fast.order;
  return {speedup >= 5.0 && agree, "full sweep at 256 channels: fast " + fmt("%.3f", t_fast) + " s, explicit " +
                                       fmt("%.2f", t_slow) + " s, speedup " + fmt("%.1f", speedup) + "x, orders " +
                                       (agree ? "agree" : "differ")};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Verdict()> check;
    double time_limit;  // seconds, 0 for none
  };
  const std::vector<Criterion> criteria{
      {"compensation matches weighted least squares", compensation_oracle, 10},
      {"full retention and collinear channels", identity_case, 0},
      {"incremental inverse factor", incremental_inverse, 5},
      {"greedy fast path equals direct evaluation", greedy_equivalence, 0},
      {"identity covariance reduces to magnitude", magnitude_equivalence, 0},
      {"selector loss ordering", selector_ordering, 60},
      {"structural search on the redundancy fixture", structural_search_fixture, 120},
      {"FLOPs reference values", flops_formulas, 0},
      {"step constraint limits early pruning", step_constraint, 0},
      {"limited and data-free estimation", limited_data, 0},
      {"deterministic search outputs", determinism, 0},
      {"fast path speedup", performance, 0},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v{false, ""};
    try {
      v = criteria[i].check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double t = seconds_since(t0);
    if (criteria[i].time_limit > 0 && t > criteria[i].time_limit) {
      v.pass = false;
      v.detail += ", over the " + fmt("%.0f", criteria[i].time_limit) + " s limit";
    }
    std::printf("%s %2zu %s: %s (%.2f s)\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, v.detail.c_str(), t);
    std::fflush(stdout);
    failures += !v.pass;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
