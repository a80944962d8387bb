// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [config.json]

#include "oracles.hpp"
#include "stabmoe/commands.hpp"
#include "stabmoe/gating.hpp"
#include "stabmoe/io.hpp"
#include "stabmoe/stabilizers.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <unistd.h>

using namespace stabmoe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) { return format_number(v); }

MoeModel tiny_model(std::mt19937_64& rng) {
  ModelShape shape;
  shape.input_dim = 5;
  shape.width = 5;
  shape.n_experts = 3;
  shape.rank = 2;
  shape.layers = 2;
  shape.classes = 3;
  MoeModel m = make_model(shape, rng());
  for (auto& layer : m.layers) {
    layer.router = oracle::random_matrix(layer.router.rows(), layer.router.cols(), rng, 0.7);
    for (auto& e : layer.experts) {
      e.a = oracle::random_matrix(e.a.rows(), e.a.cols(), rng, 0.5);
      e.b = oracle::random_matrix(e.b.rows(), e.b.cols(), rng, 0.5);
    }
  }
  m.readout = oracle::random_matrix(m.readout.rows(), m.readout.cols(), rng, 0.8);
  return m;
}

Outcome gradient_fidelity() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    MoeModel m = tiny_model(rng);
    const Matrix xs = oracle::random_matrix(4, 5, rng);
    const std::vector<Index> labels{0, 2, 1, 1};
    std::vector<LayerTape> tapes;
    for (Index s = 0; s < xs.rows(); ++s) tapes.push_back(model_forward(m, xs.row(s).transpose()).tape);
    const GradientSet g = batch_backward(m, tapes, labels);
    auto loss = [&] { return oracle::reference_loss(m, xs, labels); };
    auto check = [&](const Matrix& analytic, Matrix& param) {
      const Matrix numeric = oracle::numeric_gradient(param, loss, 1e-5);
      worst = std::max(worst, oracle::rel_fro(analytic, numeric));
    };
    check(g.readout, m.readout);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      check(g.layers[l].router, m.layers[l].router);
      for (std::size_t i = 0; i < 3; ++i) {
        check(g.layers[l].a[i], m.layers[l].experts[i].a);
        check(g.layers[l].b[i], m.layers[l].experts[i].b);
      }
    }
  }
  return {worst < 1e-5, "max relative error " + num(worst)};
}

Outcome covariance_oracle() {
  std::mt19937_64 rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = 1 + static_cast<Index>(rng() % 12);
    const Index total = 1 + static_cast<Index>(rng() % 200);
    const Matrix data = oracle::random_matrix(total, d, rng, 1.0 + static_cast<double>(rng() % 5));
    std::vector<Matrix> batches;
    StreamingCovariance cov(d);
    for (Index at = 0; at < total;) {
      const Index m = std::min<Index>(total - at, 1 + static_cast<Index>(rng() % 17));
      batches.push_back(data.middleRows(at, m));
      cov.ingest(batches.back());
      at += m;
    }
    worst = std::max(worst, oracle::rel_fro(cov.moment(), oracle::pooled_moment(batches)));
  }
  return {worst < 1e-12, "max relative Frobenius error " + num(worst)};
}

Outcome energy_bound() {
  bool ok = true;
  double worst_margin = -1e300;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    StreamConfig cfg;
    cfg.seed = seed;
    cfg.train_size = 2000;
    cfg.test_size = 10000;
    const TaskSpec spec = make_stream(cfg)[0];
    StreamingCovariance cov(spec.input_dim);
    cov.ingest(full_split(spec, Split::Train).inputs);
    const SpectralBasis b = decompose(cov, 0.99, 3);
    const Matrix held = full_split(spec, Split::Test).inputs;
    const Vector energy = (held * b.v_perp).rowwise().squaredNorm();
    const double n = static_cast<double>(energy.size());
    const double mean = energy.mean();
    const double sd = std::sqrt((energy.array() - mean).square().sum() / (n - 1.0));
    const double bound = (1.0 - 0.99) * cov.trace() + 3.0 * sd / std::sqrt(n);
    ok = ok && mean <= bound;
    worst_margin = std::max(worst_margin, mean - bound);
  }
  return {ok, "max (mean - bound) " + num(worst_margin)};
}

Outcome projection_identities() {
  std::mt19937_64 rng(104);
  double id_err = 0.0, ortho = 0.0, dense_err = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const Index d = 2 + static_cast<Index>(rng() % 14), n = 1 + static_cast<Index>(rng() % 8);
    const Matrix c = oracle::random_psd(d, rng, 1 + static_cast<Index>(rng() % (d + 2)));
    const Matrix grad = oracle::random_matrix(n, d, rng);

    SpectralBasis full = decompose(c, 1.0, 3);
    full.scale = Vector::Ones(full.k);
    id_err = std::max(id_err, oracle::rel_fro(project_router_gradient(grad, RouterUpdatePlan{full}), grad));

    const double delta = 0.5 + 0.49 * std::uniform_real_distribution<double>(0, 1)(rng);
    const RouterUpdatePlan plan{decompose(c, delta, 3)};
    const RouterComponents parts = split_router_gradient(grad, plan);
    ortho = std::max(ortho, std::abs((parts.parallel.array() * parts.perpendicular.array()).sum()));

    // Dense oracle from an independent eigensolver and the plan's own split.
    const auto [values, vectors] = oracle::jacobi_eigen(c);
    const Index k = plan.basis.k;
    Matrix par = Matrix::Zero(d, d);
    for (Index i = 0; i < k; ++i) {
      double acc = 0.0;
      int cnt = 0;
      for (Index j = std::max<Index>(0, i - 2); j <= i; ++j, ++cnt) acc += values(j);
      par += (values(i) / (acc / cnt)) * vectors.col(i) * vectors.col(i).transpose();
    }
    const Matrix perp = vectors.rightCols(d - k) * vectors.rightCols(d - k).transpose();
    dense_err = std::max(dense_err, oracle::rel_fro(project_router_gradient(grad, plan), grad * par + grad * perp));
  }
  const bool ok = id_err < 1e-10 && ortho < 1e-10 && dense_err < 1e-10;
  return {ok, "identity " + num(id_err) + ", orthogonality " + num(ortho) + ", dense " + num(dense_err)};
}

Outcome damped_inverse_check() {
  std::mt19937_64 rng(105);
  double worst = 0.0;
  for (Index d : {1, 2, 3, 5, 8, 16, 32, 48, 64}) {
    const Matrix c = oracle::random_psd(d, rng);
    const double mu = relative_damping(c, 1e-3);
    const DampedInverse inv = damped_inverse(decompose(c, 1.0, 3), mu);
    const Matrix g = oracle::random_matrix(5, d, rng);
    const Matrix expect = oracle::gauss_solve(c + mu * Matrix::Identity(d, d), g.transpose()).transpose();
    worst = std::max(worst, oracle::rel_fro(apply_right_inverse(g, inv), expect));
  }
  return {worst < 1e-8, "max relative error " + num(worst)};
}

Outcome stationarity_optimality() {
  std::mt19937_64 rng(106);
  double residual = 0.0, gap = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const Index d = 2 + static_cast<Index>(rng() % 5), out = 1 + static_cast<Index>(rng() % 3);
    const Matrix c = oracle::random_psd(d, rng);
    const DampedInverse inv = damped_inverse(decompose(c, 1.0, 3), relative_damping(c, 1e-3));
    const Matrix metric = inv.dense_inverse();
    const Matrix g = oracle::random_matrix(out, d, rng);
    const double eta = 0.01 + std::uniform_real_distribution<double>(0, 1)(rng);
    const Matrix step = precondition_expert_gradient(g, &inv, eta);
    residual = std::max(residual, (g + 2.0 * coupled_lambda(eta) * step * metric).norm());
    const double target = (g.array() * step.array()).sum();
    const Matrix best = oracle::min_degradation_step(g, metric, target);
    const double got = degradation(step, metric), opt = degradation(best, metric);
    gap = std::max(gap, std::abs(got - opt) / opt);
  }
  return {residual < 1e-8 && gap < 1e-6, "stationarity residual " + num(residual) + ", optimality gap " + num(gap)};
}

Outcome agop_oracle() {
  std::mt19937_64 rng(107);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index in = 1 + static_cast<Index>(rng() % 12), out = 1 + static_cast<Index>(rng() % 12);
    const Index r = 1 + static_cast<Index>(rng() % 4);
    const Expert e{oracle::random_matrix(r, in, rng), oracle::random_matrix(out, r, rng)};
    const AgopCheck c = agop_proxy_check(e, oracle::random_matrix(1 + static_cast<Index>(rng() % 20), in, rng, 2.0));
    worst = std::max(worst, std::abs(c.proxy - c.exact) / c.proxy);
  }
  return {worst < 1e-8, "max relative error " + num(worst)};
}

Outcome degradation_exactness() {
  std::mt19937_64 rng(108);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const Index in = 1 + static_cast<Index>(rng() % 10), out = 1 + static_cast<Index>(rng() % 10);
    const Matrix dw = oracle::random_matrix(out, in, rng, 0.3);
    const Matrix xs = oracle::random_matrix(1 + static_cast<Index>(rng() % 100), in, rng);
    double mc = 0.0;
    for (Index j = 0; j < xs.rows(); ++j) mc += (dw * xs.row(j).transpose()).squaredNorm();
    mc /= static_cast<double>(xs.rows());
    worst = std::max(worst, std::abs(degradation(dw, oracle::pooled_moment({xs})) - mc));
  }
  return {worst < 1e-10, "max absolute error " + num(worst)};
}

Outcome gating_arithmetic() {
  std::mt19937_64 rng(109);
  std::exponential_distribution<double> ex(1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 8), total = 1 + static_cast<Index>(rng() % 80);
    Matrix w(total, n);
    for (Index r = 0; r < total; ++r) {
      for (Index c = 0; c < n; ++c) w(r, c) = ex(rng);
      w.row(r) /= w.row(r).sum();
    }
    ExpertStats s(static_cast<std::size_t>(n));
    s.begin_task();
    for (Index at = 0; at < total;) {
      const Index m = std::min<Index>(total - at, 1 + static_cast<Index>(rng() % 9));
      s.ingest(w.middleRows(at, m), Vector::Ones(m));
      at += m;
    }
    for (Index i = 0; i < n; ++i) worst = std::max(worst, std::abs(s.utilization()(i) - w.col(i).mean()));
  }

  ExpertStats worked(3);
  Vector hist(3), now(3);
  hist << 0.2, 0.2, 0.8;
  now << 0.1, 0.5, 0.9;
  worked.begin_task();
  worked.ingest(hist.transpose() / hist.sum(), Vector::Constant(1, hist.sum()));
  worked.end_task();
  worked.begin_task();
  worked.ingest(now.transpose() / now.sum(), Vector::Ones(1));
  const Vector scores = activation_scores(worked);
  const double score_err = std::max({std::abs(scores(0)), std::abs(scores(1) - 0.5), std::abs(scores(2))});
  const bool degenerate = normalize_minmax(Vector::Constant(4, 0.3)) == Vector::Constant(4, 0.5);
  return {worst < 1e-12 && score_err < 1e-12 && degenerate,
          "running-mean error " + num(worst) + ", scores (" + num(scores(0)) + ", " + num(scores(1)) + ", " +
              num(scores(2)) + ")"};
}

double rung_mean(const LadderResult& ladder, std::size_t rung, const std::function<double(const RunMetrics&)>& f) {
  double total = 0.0;
  for (const auto& r : ladder.runs[rung]) total += f(r.metrics);
  return total / static_cast<double>(ladder.runs[rung].size());
}

double final_probe(const RunMetrics& m) { return m.probes.back().value().accuracy; }

}  // namespace

int main(int argc, char** argv) {
  const std::string config_path = argc > 1 ? argv[1] : "configs/default.json";
  int failures = 0;
  auto report = [&](int id, const char* title, double budget_s, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < budget_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2fs of %.0fs", secs, budget_s);
    std::cout << (pass ? "PASS" : "FAIL") << " " << id << " " << title << ": " << o.detail << " [" << timing
              << (in_time ? "" : ", over budget") << "]" << std::endl;
  };

  report(1, "gradient fidelity", 10, gradient_fidelity);
  report(2, "covariance oracle", 5, covariance_oracle);
  report(3, "energy bound on held-out samples", 10, energy_bound);
  report(4, "projection identities", 5, projection_identities);
  report(5, "damped pseudo-inverse", 5, damped_inverse_check);
  report(6, "stationarity and optimality", 10, stationarity_optimality);
  report(7, "input-energy proxy", 10, agop_oracle);
  report(8, "degradation exactness", 5, degradation_exactness);
  report(9, "gating arithmetic", 1, gating_arithmetic);

  RunConfig config;
  try {
    config = load_config(config_path);
  } catch (const std::exception& e) {
    std::cout << "FAIL 10-12: cannot load " << config_path << ": " << e.what() << std::endl;
    return 1;
  }

  std::optional<LadderResult> ladder;
  report(10, "end-to-end directional reproduction", 180, [&]() -> Outcome {
    ladder = run_ladder(config, worker_count(4 * config.seeds.size()));
    const auto acc = [](const RunMetrics& m) { return m.final_average; };
    const auto drift = [](const RunMetrics& m) { return m.final_task1_drift(); };
    double a[4];
    for (std::size_t r = 0; r < 4; ++r) a[r] = rung_mean(*ladder, r, acc);
    const bool ordered = a[0] < a[1] && a[1] < a[2] && a[2] < a[3];
    const double drift_base = rung_mean(*ladder, 0, drift), drift_router = rung_mean(*ladder, 1, drift);
    const double probe_router = rung_mean(*ladder, 1, final_probe), probe_expert = rung_mean(*ladder, 2, final_probe);
    bool frozen_any = false, immutable = true;
    for (const auto& r : ladder->runs[3]) {
      for (const auto& t : r.metrics.tasks) frozen_any = frozen_any || !t.freeze_events.empty();
      immutable = immutable && frozen_tensors_unchanged(r.metrics);
    }
    std::ostringstream d;
    d << "(a) mean final accuracy " << num(a[0]) << " < " << num(a[1]) << " < " << num(a[2]) << " < " << num(a[3])
      << (ordered ? "" : " NOT ORDERED") << "; (b) task-1 drift router " << num(drift_router) << " vs baseline "
      << num(drift_base) << "; (c) probe accuracy router+expert " << num(probe_expert) << " vs router "
      << num(probe_router) << "; (d) frozen " << (frozen_any ? "yes" : "no") << ", immutable "
      << (immutable ? "yes" : "no");
    return {ordered && drift_router < drift_base && probe_expert > probe_router && frozen_any && immutable, d.str()};
  });

  report(11, "determinism of run outputs", 180, [&]() -> Outcome {
    const fs::path root = fs::temp_directory_path() / ("stabmoe-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(root);
    std::ostringstream sink;
    std::vector<fs::path> dirs{root / "first", root / "second"};
    for (const auto& dir : dirs) {
      RunOptions opts;
      opts.config_path = config_path;
      opts.out_dir = dir.string();
      if (cmd_run(opts, sink, sink) != kExitOk) return {false, "run failed: " + sink.str()};
    }
    bool same = true;
    for (auto seed : config.seeds) {
      const fs::path rel = fs::path("seed-" + std::to_string(seed)) / "metrics.csv";
      same = same && read_bytes(dirs[0] / rel) == read_bytes(dirs[1] / rel);
    }
    fs::remove_all(root);
    return {same, std::to_string(config.seeds.size()) + " metrics files " + (same ? "identical" : "DIFFER")};
  });

  report(12, "compute-skip accounting", 1, [&]() -> Outcome {
    if (!ladder) return {false, "no end-to-end runs available"};
    std::uint64_t skipped = 0, expected = 0;
    bool exact = true;
    for (const auto& r : ladder->runs[3])
      for (const auto& t : r.metrics.tasks) {
        std::uint64_t frozen = 0;
        for (std::size_t c : t.frozen_counts) frozen += c;
        const std::uint64_t want = frozen * t.post_freeze_batches;
        exact = exact && t.skipped_expert_grads == want && t.frozen_expert_batches == want;
        skipped += t.skipped_expert_grads;
        expected += want;
      }
    return {exact && skipped > 0, "skipped " + std::to_string(skipped) + ", frozen x post-freeze batches " +
                                      std::to_string(expected)};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
