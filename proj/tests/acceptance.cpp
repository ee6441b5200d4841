// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance            all criteria
//   acceptance 1 3 9      a subset

#include "desk_fixture.hpp"
#include "gradcheck.hpp"
#include "temp_dir.hpp"

#include "purer/errors.hpp"
#include "purer/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace purer;
using namespace purer::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
  std::printf("[%s] criterion %d, %s: %s\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str());
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

std::string num(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Eigen::VectorXd pick(const TensorD& t, const std::vector<Index>& offsets) {
  Eigen::VectorXd out(static_cast<Index>(offsets.size()));
  for (std::size_t i = 0; i < offsets.size(); ++i) out[static_cast<Index>(i)] = t[offsets[i]];
  return out;
}

ArchSpec toy_spec(Index channels, Index side) {
  ArchSpec s;
  s.channels = channels;
  s.height = s.width = side;
  s.width_multiplier = 0.125;
  return s;
}

// ---------------------------------------------------------------------------
// 1. gradients against central differences

Verdict gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  int checks = 0;
  bool ok = true;
  auto note = [&](const Eigen::VectorXd& analytic, const Eigen::VectorXd& fd) {
    ++checks;
    if (std::max(analytic.norm(), fd.norm()) < 1e-8) return;  // conv bias in front of batch-stat BN
    const double e = relative_error(analytic, fd);
    worst = std::max(worst, e);
    ok = ok && e < 1e-3;
  };

  // outer loss on a tiny pseudo episode
  const ArchSpec spec = toy_spec(2, 5);
  const auto zoo = toy_zoo<double>(2, spec, 30);
  const auto dd = init_dynamic_dataset(zoo, 2, 2, {2, 5, 5}, 31);
  const auto theta = build_network<double>(spec, 32);
  Rng rng(4);
  const auto ep = sample_pseudo_episode(dd, VarD::constant(dd.images), 2, 2, 2, rng);
  auto outer_at = [&](const std::vector<TensorD>& values, const TensorD& bank) {
    std::vector<VarD> vars;
    for (const auto& v : values) vars.push_back(VarD::constant(v));
    return outer_loss(theta, vars, rebind_pseudo_episode(ep, VarD::constant(bank)), 0.1, true).loss.item();
  };
  const auto params = param_vars(theta, true);
  const auto g_theta = ad::grad(outer_loss(theta, params, ep, 0.1, true).loss, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto fd = numeric_gradient([&](const std::vector<TensorD>& p) { return outer_at(p, dd.images); },
                                     theta.params.values, i);
    note(g_theta[i].value().data, fd.data);
  }

  auto bank = VarD::parameter(dd.images);
  const auto g_bank =
      ad::grad(outer_loss(theta, param_vars(theta, false), rebind_pseudo_episode(ep, bank), 0.1, true).loss, {bank})[0]
          .value();
  const Index per = 2 * 5 * 5;
  std::vector<Index> offsets;
  std::uniform_int_distribution<Index> pixel(0, per - 1);
  for (Index item : ep.support_items) offsets.push_back(item * per + pixel(rng));
  const auto fd_bank = numeric_gradient_at(
      [&](const std::vector<TensorD>& p) { return outer_at(theta.params.values, p[0]); }, {dd.images}, 0, offsets);
  note(pick(g_bank, offsets), pick(fd_bank, offsets));

  // inversion loss w.r.t. 3x3 images
  {
    const auto z = toy_zoo<double>(2, toy_spec(2, 3), 4);
    const auto d = init_dynamic_dataset(z, 2, 1, {2, 3, 3}, 12);
    const InversionWeights w{1e-2, 1e-2, 1.0};
    auto images = VarD::parameter(d.images);
    const auto g = ad::grad(inversion_loss(z, d, images, w), {images})[0].value();
    const auto fd = numeric_gradient(
        [&](const std::vector<TensorD>& p) { return inversion_loss(z, d, VarD::constant(p[0]), w).item(); },
        {d.images}, 0);
    note(g.data, fd.data);
  }

  // calibration loss w.r.t. the backbone
  {
    const auto net = build_network<double>(toy_spec(2, 6), 5);
    Rng r(6);
    const auto real = random_tensor({2, 2, 6, 6}, r), pseudo = random_tensor({4, 2, 6, 6}, r);
    const std::vector<int> rl{0, 1}, pl{0, 0, 1, 1};
    const auto ps = param_vars(net, true);
    const auto g =
        ad::grad(calibration_loss(net, ps, VarD::constant(real), rl, VarD::constant(pseudo), pl, 0.1, true), ps);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (is_head_param(net.params.names[i])) continue;
      const auto fd = numeric_gradient(
          [&](const std::vector<TensorD>& p) {
            std::vector<VarD> vars;
            for (const auto& v : p) vars.push_back(VarD::constant(v));
            return calibration_loss(net, vars, VarD::constant(real), rl, VarD::constant(pseudo), pl, 0.1, true).item();
          },
          net.params.values, i);
      note(g[i].value().data, fd.data);
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 120;
  return {ok, std::to_string(checks) + " tensors, worst relative error " + num(worst, 3) + " (< 1e-3), " +
                  num(secs, 3) + " s (< 120 s)"};
}

// ---------------------------------------------------------------------------
// 2. losses against brute-force loops

double brute_tv(const TensorD& x) {
  const Index b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  double total = 0;
  for (Index n = 0; n < b; ++n)
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) {
          const double v = x[offset4(x.shape, n, ch, i, j)];
          if (i + 1 < h) total += std::pow(x[offset4(x.shape, n, ch, i + 1, j)] - v, 2);
          if (j + 1 < w) total += std::pow(x[offset4(x.shape, n, ch, i, j + 1)] - v, 2);
        }
  return total / static_cast<double>(b);
}

double brute_l2(const TensorD& x) {
  double total = 0;
  for (Index i = 0; i < x.size(); ++i) total += x[i] * x[i];
  return total / static_cast<double>(x.shape[0]);
}

double brute_contrastive(const TensorD& real, const std::vector<int>& rl, const TensorD& pseudo,
                         const std::vector<int>& pl, double tau) {
  const Index r = real.shape[0], p = pseudo.shape[0], f = real.shape[1];
  auto unit = [&](const TensorD& t, Index i) {
    std::vector<double> v(static_cast<std::size_t>(f));
    double n = 0;
    for (Index k = 0; k < f; ++k) n += t[i * f + k] * t[i * f + k];
    for (Index k = 0; k < f; ++k) v[static_cast<std::size_t>(k)] = t[i * f + k] / std::sqrt(n);
    return v;
  };
  double loss = 0;
  for (Index i = 0; i < r; ++i) {
    const auto a = unit(real, i);
    std::vector<double> s;
    double denom = 0;
    for (Index j = 0; j < p; ++j) {
      const auto b = unit(pseudo, j);
      double d = 0;
      for (std::size_t k = 0; k < a.size(); ++k) d += a[k] * b[k];
      s.push_back(d / tau);
      denom += std::exp(d / tau);
    }
    for (Index j = 0; j < p; ++j)
      if (rl[static_cast<std::size_t>(i)] == pl[static_cast<std::size_t>(j)])
        loss -= std::log(std::exp(s[static_cast<std::size_t>(j)]) / denom);
  }
  return loss;
}

Verdict loss_oracles() {
  Rng rng(2024);
  double tv = 0, l2 = 0, bn = 0, con = 0;
  std::uniform_int_distribution<int> dim(1, 3), lab(0, 1);
  std::uniform_real_distribution<double> taus(0.05, 2.0);
  auto rel = [](double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); };
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor({dim(rng), dim(rng), 4, 4}, rng);
    tv = std::max(tv, rel(tv_prior(VarD::constant(x)).item(), brute_tv(x)));
    l2 = std::max(l2, rel(l2_prior(VarD::constant(x)).item(), brute_l2(x)));

    // BN statistics of four channels against running buffers
    NetworkParams<double> net;
    ForwardTrace<double> tr;
    double want = 0;
    for (int l = 0; l < 1 + trial % 4; ++l) {
      const auto rm = random_tensor({4}, rng), rv = random_tensor({4}, rng), bm = random_tensor({4}, rng),
                 bv = random_tensor({4}, rng);
      net.buffers.add("m" + std::to_string(l), rm);
      net.buffers.add("v" + std::to_string(l), rv);
      tr.bn_means.push_back(VarD::constant(bm));
      tr.bn_variances.push_back(VarD::constant(bv));
      for (Index c = 0; c < 4; ++c) want += std::pow(bm[c] - rm[c], 2) + std::pow(bv[c] - rv[c], 2);
    }
    bn = std::max(bn, rel(bn_feature_loss(net, tr).item(), want));

    const auto real = random_tensor({4, 4}, rng), pseudo = random_tensor({4, 4}, rng);
    std::vector<int> rl(4), pl{0, 1, 0, 1};
    for (auto& l : rl) l = lab(rng);
    std::shuffle(pl.begin(), pl.end(), rng);
    const double tau = taus(rng);
    con = std::max(con, rel(contrastive_loss(VarD::constant(real), rl, VarD::constant(pseudo), pl, tau, true).item(),
                            brute_contrastive(real, rl, pseudo, pl, tau)));
  }
  const bool ok = tv <= 1e-10 && l2 <= 1e-10 && bn <= 1e-6 && con <= 1e-6;
  return {ok, "100 trials each, worst error tv " + num(tv, 2) + ", l2 " + num(l2, 2) + " (<= 1e-10), bn " + num(bn, 2) +
                  ", contrastive " + num(con, 2) + " (<= 1e-6)"};
}

// ---------------------------------------------------------------------------
// 3. curriculum state machine

Verdict curriculum() {
  constexpr Omega P = Omega::kPositive, N = Omega::kNegative;
  std::vector<std::string> broken;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) broken.push_back(what);
  };
  expect(gradient_switch(P, true) == 1 && gradient_switch(N, true) == 0 && gradient_switch(P, false) == 0 &&
             gradient_switch(N, false) == 0,
         "truth table");

  // first value improves on nothing; then five stalls stay negative, the sixth flips
  FeedbackMonitor mon(6);
  std::vector<Omega> got;
  for (double v : {0.5, 0.7, 0.7, 0.6, 0.7, 0.65, 0.7, 0.7, 0.7, 0.71, 0.71})
    got.push_back(mon.update(v));
  const std::vector<Omega> want{N, N, N, N, N, N, N, P, P, N, N};
  expect(got == want, "patience 6 and reset on improvement");

  // plateau from iteration 0: the switch first fires when the gate opens at 4000
  HyperParams hp;
  FeedbackMonitor flat(hp.patience);
  long first = -1;
  for (long it = 0; it < 4010; ++it)
    if (gradient_switch(flat.update(0.5), it >= hp.curriculum_start_iter) == 1 && first < 0) first = it;
  expect(hp.curriculum_start_iter == 4000 && hp.patience == 6 && first == 4000, "warm-up gate");

  std::string detail = "truth table, patience 6, reset, gate at " + std::to_string(first);
  for (const auto& b : broken) detail += "; broken: " + b;
  return {broken.empty(), detail};
}

// ---------------------------------------------------------------------------
// 4. adversarial ascent

double checksum(const NetworkParams<float>& net) {
  double s = 0;
  for (const auto& t : net.params.values) s += t.data.cast<double>().sum() + t.data.cast<double>().squaredNorm();
  return s;
}

Verdict ascent() {
  const auto& d = desk();
  HyperParams hp;
  hp.way = 2;
  hp.shots = 1;
  hp.queries = 5;
  hp.lambda = 10;
  const InversionWeights w;
  int increased = 0;
  for (int t = 0; t < 50; ++t) {
    const auto state = init_meta_state<float>(ArchSpec{}, 100 + static_cast<std::uint64_t>(t));
    auto dd = init_dynamic_dataset(d.zoo, hp.shots, hp.queries, {3, 16, 16}, 200 + static_cast<std::uint64_t>(t));
    Rng rng(300 + static_cast<std::uint64_t>(t));
    const auto r = eci_dataset_update(dd, d.zoo, state, hp, w, 1, rng);
    const auto after = rebind_pseudo_episode(r.task, ad::Var<float>::constant(dd.images));
    const double post =
        outer_loss(state.theta, param_vars(state.theta, false), after, hp.alpha_inner, hp.second_order).loss.item();
    increased += post >= *r.outer_loss;
  }

  const auto state = init_meta_state<float>(ArchSpec{}, 3);
  const double sum0 = checksum(state.theta);
  auto a = init_dynamic_dataset(d.zoo, hp.shots, hp.queries, {3, 16, 16}, 4);
  auto b = a;
  Rng ra(9);
  const auto r = eci_dataset_update(a, d.zoo, state, hp, w, 0, ra);
  const double loss = inversion_step(b, d.zoo, w, hp.beta);
  const bool bitwise = a.images == b.images && a.optimizer_state == b.optimizer_state && r.inv_loss == loss &&
                       checksum(state.theta) == sum0;
  return {increased >= 40 && bitwise, "outer loss rose in " + std::to_string(increased) +
                                          "/50 trials (>= 40); switch 0 " +
                                          (bitwise ? "bitwise equal to" : "DIFFERS from") + " a pure inversion step"};
}

// ---------------------------------------------------------------------------
// 5, 6, 8: desk-scale runs

ExperimentConfig desk_config() {
  return ExperimentConfig::load(std::string(PURER_SOURCE_DIR) + "/configs/desk.cfg");
}

struct SeedResult {
  double ei = 0, eci = 0, ei_icfil = 0, eci_icfil = 0, random = 0;
  double purer_seconds = 0;  // ECI training and its evaluation
};

SeedResult desk_seed(const ExperimentConfig& base_cfg, std::uint64_t seed, const std::string& root) {
  ExperimentConfig base = base_cfg;
  base.seed_zoo = base.seed_train = base.seed_eval = seed;
  base.output_dir = root + "/seed_" + std::to_string(seed);
  SeedResult out;
  const auto t_ws = Clock::now();
  const Workspace ws = prepare_workspace(base);
  const double ws_seconds = seconds_since(t_ws);

  auto variant = [&](bool curriculum, double& plain, double& icfil) {
    ExperimentConfig c = base;
    c.ablation_curriculum = curriculum;
    c.output_dir = base.output_dir + (curriculum ? "/ECI" : "/EI");
    const auto t0 = Clock::now();
    const auto theta = run_meta_training(c, ws).state.theta;
    c.ablation_icfil = false;
    plain = run_evaluation(c, ws, ThetaSource::kPurer, &theta).mean;
    const double t_plain = seconds_since(t0);
    const auto t1 = Clock::now();
    c.ablation_icfil = true;
    icfil = run_evaluation(c, ws, ThetaSource::kPurer, &theta).mean;
    if (curriculum) out.purer_seconds = ws_seconds + t_plain + seconds_since(t1);
  };
  variant(false, out.ei, out.ei_icfil);
  variant(true, out.eci, out.eci_icfil);
  out.random = run_evaluation(base, ws, ThetaSource::kRandom).mean;
  std::printf("  seed %llu: EI %.4f, +Curriculum %.4f, +ICFIL %.4f, Ours %.4f, Random %.4f (%.0f s for Ours)\n",
              static_cast<unsigned long long>(seed), out.ei, out.eci, out.ei_icfil, out.eci_icfil, out.random,
              out.purer_seconds);
  std::fflush(stdout);
  return out;
}

void desk_criteria(bool want5, bool want6) {
  const auto cfg = desk_config();
  TempDir dir("acceptance-desk");
  std::vector<SeedResult> rs;
  for (std::uint64_t seed : {1, 2, 3}) rs.push_back(desk_seed(cfg, seed, dir.str()));
  auto mean = [&](double SeedResult::*m) {
    double s = 0;
    for (const auto& r : rs) s += r.*m;
    return s / static_cast<double>(rs.size());
  };
  double seconds = 0;
  for (const auto& r : rs) seconds += r.purer_seconds;
  const double ours = mean(&SeedResult::eci_icfil), init = mean(&SeedResult::eci), random = mean(&SeedResult::random);
  if (want5) {
    const double gap = ours - random;
    report(5, "end-to-end desk run",
           {gap >= 0.10 && seconds <= 1200,
            "PURER " + num(ours) + " vs Random " + num(random) + ", gap " + num(100 * gap, 3) +
                " points (>= 10) over 3 seeds x 100 tasks; meta-init alone " + num(init) + "; " + num(seconds, 4) +
                " s (<= 1200 s)"});
  }
  if (want6) {
    const double ei = mean(&SeedResult::ei), eci = init;
    const double minus = (ei + eci) / 2, plus = (mean(&SeedResult::ei_icfil) + ours) / 2;
    report(6, "ablation directionality",
           {eci >= ei && plus >= minus, "ECI " + num(eci) + " vs EI " + num(ei) + "; +ICFIL " + num(plus) +
                                            " vs -ICFIL " + num(minus) + " (paired tasks, 3 seeds)"});
  }
}

// ---------------------------------------------------------------------------
// 7. inversion self-consistency

Verdict self_consistency() {
  const auto& d = desk();
  int right = 0, total = 0;
  for (std::size_t e = 0; e < d.zoo.entries.size(); ++e) {
    const auto& net = d.zoo.entries[e].params;
    const auto images = synthesize_from_model(net, {0, 1}, 5, 200, InversionWeights{}, 0.25, 40 + e);
    const double acc = classification_accuracy(net, images, {0, 0, 0, 0, 0, 1, 1, 1, 1, 1});
    right += static_cast<int>(std::lround(acc * 10));
    total += 10;
  }
  const double frac = static_cast<double>(right) / total;
  return {frac >= 0.8, std::to_string(right) + "/" + std::to_string(total) + " synthesized images (" + num(frac) +
                           ", >= 0.8) classified as their label after 200 steps, 4 desk models"};
}

// ---------------------------------------------------------------------------
// 8. reproducibility

Verdict reproducibility() {
  ExperimentConfig cfg = desk_config();
  TempDir dir("acceptance-repro");
  const Workspace ws = prepare_workspace(cfg);
  auto run = [&](const std::string& name, long total, std::optional<std::string> resume = std::nullopt) {
    ExperimentConfig c = cfg;
    c.total_iterations = total;
    c.output_dir = dir.str(name);
    if (resume) {
      // a resumed run continues in a directory that already holds the CSV
      fs::create_directories(dir.str(name + "/checkpoints"));
      fs::copy_file(*resume, checkpoint_path(c, 1000));
      fs::copy_file(dir.str("a/train_metrics.csv"), dir.str(name + "/train_metrics.csv"));
      resume = checkpoint_path(c, 1000);
    }
    return run_meta_training(c, ws, resume);
  };
  const auto a = run("a", cfg.total_iterations);
  const auto b = run("b", cfg.total_iterations);
  const bool same_csv = slurp(a.metrics_csv) == slurp(b.metrics_csv) && !slurp(a.metrics_csv).empty();
  ExperimentConfig ca = cfg;
  ca.output_dir = dir.str("a");
  const auto c = run("c", cfg.total_iterations, checkpoint_path(ca, 1000));
  const bool theta = c.state.theta == a.state.theta;
  const bool bank = c.dataset.images == a.dataset.images;
  const bool csv = slurp(c.metrics_csv) == slurp(a.metrics_csv);
  auto word = [](bool ok) { return ok ? "identical" : "DIFFER"; };
  return {same_csv && theta && bank && csv,
          std::string("two full ") + std::to_string(cfg.total_iterations) + "-iteration runs: metrics CSV " +
              word(same_csv) + "; resume at 1000: theta " + word(theta) + ", bank " + word(bank) + ", CSV " +
              word(csv)};
}

// ---------------------------------------------------------------------------
// 9. report arithmetic

Verdict report_arithmetic() {
  double worst = 0;
  auto check = [&](const std::vector<double>& accs, double mean, double std, double ci) {
    const auto r = EvalReport::from_accuracies(accs);
    worst = std::max({worst, std::abs(r.mean - mean), std::abs(r.std - std), std::abs(r.ci95 - ci)});
  };
  check({1.0, 0.0}, 0.5, std::sqrt(0.5), 0.98);
  // deviations -0.15, -0.05, 0.05, 0.15: sample variance 0.05 / 3
  check({0.6, 0.7, 0.8, 0.9}, 0.75, std::sqrt(1.0 / 60.0), 1.96 * std::sqrt(1.0 / 60.0) / 2.0);
  check({0.8}, 0.8, 0.0, 0.0);
  check({0.5, 0.5, 0.5}, 0.5, 0.0, 0.0);
  // 1, 0, 0, 0, 0: mean 0.2, sample variance (0.64 + 4 * 0.04) / 4 = 0.2
  check({1, 0, 0, 0, 0}, 0.2, std::sqrt(0.2), 1.96 * std::sqrt(0.2) / std::sqrt(5.0));
  return {worst <= 1e-12, "5 fixed lists, worst deviation " + num(worst, 2) + " (<= 1e-12)"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int id) { return wanted.empty() || wanted.count(id) > 0; };
  auto guarded = [&](int id, const std::string& title, const std::function<Verdict()>& f) {
    if (!want(id)) return;
    const auto t0 = Clock::now();
    try {
      auto v = f();
      v.detail += " [" + num(seconds_since(t0), 3) + " s]";
      report(id, title, v);
    } catch (const std::exception& e) {
      report(id, title, {false, std::string("error: ") + e.what()});
    }
  };
  guarded(1, "gradient oracles", gradients);
  guarded(2, "loss oracles", loss_oracles);
  guarded(3, "curriculum state machine", curriculum);
  guarded(4, "adversarial ascent", ascent);
  guarded(7, "inversion self-consistency", self_consistency);
  guarded(9, "evaluator arithmetic", report_arithmetic);
  guarded(8, "reproducibility", reproducibility);
  if (want(5) || want(6)) {
    try {
      desk_criteria(want(5), want(6));
    } catch (const std::exception& e) {
      if (want(5)) report(5, "end-to-end desk run", {false, std::string("error: ") + e.what()});
      if (want(6)) report(6, "ablation directionality", {false, std::string("error: ") + e.what()});
    }
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
