#include "doctest.h"
#include "desk_fixture.hpp"

#include "purer/curriculum.hpp"
#include "purer/errors.hpp"

using namespace purer;
using namespace purer::testing;

namespace {

std::vector<Omega> feed(FeedbackMonitor& mon, const std::vector<double>& values) {
  std::vector<Omega> out;
  for (double v : values) out.push_back(mon.update(v));
  return out;
}

constexpr Omega N = Omega::kNegative;
constexpr Omega P = Omega::kPositive;

HyperParams desk_hp() {
  HyperParams hp;
  hp.way = 2;
  hp.shots = 1;
  hp.queries = 5;
  return hp;
}

ArchSpec desk_spec() { return ArchSpec{}; }

double checksum(const NetworkParams<float>& net) {
  double s = 0;
  for (const auto& t : net.params.values) s += t.data.cast<double>().sum() + t.data.cast<double>().squaredNorm();
  return s;
}

}  // namespace

TEST_CASE("feedback: monotone improvement stays negative") {
  FeedbackMonitor mon;
  CHECK(feed(mon, {0.5, 0.6, 0.7}) == std::vector<Omega>{N, N, N});
  CHECK(mon.stall_count == 0);
  CHECK(*mon.best_metric == 0.7);
}

TEST_CASE("feedback: positive exactly on the sixth non-improving value, then reset") {
  FeedbackMonitor mon;
  CHECK(feed(mon, {0.7, 0.7, 0.5, 0.7, 0.6, 0.2}) == std::vector<Omega>{N, N, N, N, N, N});
  CHECK(mon.stall_count == 5);
  CHECK(mon.update(0.7) == P);
  CHECK(mon.stall_count == 6);
  // Stays positive while the plateau lasts.
  CHECK(feed(mon, {0.1, 0.7}) == std::vector<Omega>{P, P});
  CHECK(mon.last_omega == P);
  CHECK(mon.update(0.71) == N);
  CHECK(mon.stall_count == 0);
  CHECK(*mon.best_metric == 0.71);
  // A full new plateau is needed before firing again.
  CHECK(feed(mon, {0.7, 0.7, 0.7, 0.7, 0.7}) == std::vector<Omega>{N, N, N, N, N});
  CHECK(mon.update(0.7) == P);
}

TEST_CASE("feedback: improvement mid-plateau restarts the count") {
  FeedbackMonitor mon;
  feed(mon, {0.5, 0.4, 0.4, 0.4, 0.4, 0.4});
  CHECK(mon.stall_count == 5);
  CHECK(mon.update(0.55) == N);
  CHECK(feed(mon, {0.5, 0.5, 0.5, 0.5, 0.5}) == std::vector<Omega>{N, N, N, N, N});
  CHECK(mon.update(0.5) == P);
}

TEST_CASE("feedback: invariants hold on random sequences") {
  Rng rng(5);
  std::uniform_int_distribution<int> level(0, 10);
  for (int trial = 0; trial < 20; ++trial) {
    FeedbackMonitor mon(trial % 2 ? 3 : 6);
    std::optional<double> best;
    int stall = 0;
    for (int i = 0; i < 200; ++i) {
      const double v = level(rng) / 10.0;
      const Omega o = mon.update(v);
      if (!best || v > *best) {
        best = v;
        stall = 0;
      } else {
        ++stall;
      }
      CHECK(mon.stall_count == stall);
      CHECK((o == P) == (stall >= mon.patience));
      CHECK(o == mon.last_omega);
    }
  }
}

TEST_CASE("feedback: loss metric treats lower as better") {
  FeedbackMonitor mon(2, FeedbackMetric::kLoss);
  CHECK(feed(mon, {3.0, 2.0, 2.5, 2.0}) == std::vector<Omega>{N, N, N, P});
  CHECK(mon.update(1.9) == N);
  CHECK(parse_feedback_metric("loss") == FeedbackMetric::kLoss);
  CHECK(to_string(parse_feedback_metric("accuracy")) == "accuracy");
  CHECK_THROWS_AS(parse_feedback_metric("acc"), ConfigError);
}

TEST_CASE("gradient switch truth table and warm-up gate") {
  CHECK(gradient_switch(P, true) == 1);
  CHECK(gradient_switch(N, true) == 0);
  CHECK(gradient_switch(P, false) == 0);
  CHECK(gradient_switch(N, false) == 0);

  // Scripted run: plateau from the start, gate opens at iteration 4000.
  HyperParams hp;
  FeedbackMonitor mon(hp.patience);
  long first_on = -1;
  for (long it = 0; it < 4010; ++it) {
    const bool active = it >= hp.curriculum_start_iter;
    const int sw = gradient_switch(mon.update(0.5), active);
    if (sw == 1 && first_on < 0) first_on = it;
    if (it < 4000) CHECK(sw == 0);
  }
  CHECK(first_on == 4000);
}

TEST_CASE("eci: switch 0 is a pure inversion step and leaves theta alone") {
  const auto& d = desk();
  const auto hp = desk_hp();
  const InversionWeights w;
  const auto state = init_meta_state<float>(desk_spec(), 3);
  const double sum0 = checksum(state.theta);

  auto a = init_dynamic_dataset(d.zoo, hp.shots, hp.queries, {3, 16, 16}, 4);
  auto b = a;
  Rng ra(9), rb(9);
  const auto r = eci_dataset_update(a, d.zoo, state, hp, w, 0, ra);
  const double loss = inversion_step(b, d.zoo, w, hp.beta);
  CHECK(a.images == b.images);
  CHECK(a.optimizer_state == b.optimizer_state);
  CHECK(r.inv_loss == loss);
  CHECK_FALSE(r.outer_loss.has_value());
  CHECK(checksum(state.theta) == sum0);

  // lambda = 0 with the switch on lands on the same bank.
  auto hp0 = hp;
  hp0.lambda = 0;
  auto c = init_dynamic_dataset(d.zoo, hp.shots, hp.queries, {3, 16, 16}, 4);
  auto e = c;
  Rng rc(10), re(10);
  const auto rc1 = eci_dataset_update(c, d.zoo, state, hp0, w, 1, rc);
  eci_dataset_update(e, d.zoo, state, hp0, w, 0, re);
  CHECK(c.images == e.images);
  CHECK(rc1.outer_loss.has_value());
  CHECK(rc() == re());
  CHECK(checksum(state.theta) == sum0);

  Rng rx(1);
  CHECK_THROWS_AS(eci_dataset_update(c, d.zoo, state, hp, w, 2, rx), InputError);
}

TEST_CASE("eci: the two sign conventions of the adversarial objective agree") {
  const auto& d = desk();
  const auto hp = desk_hp();
  const InversionWeights w;
  const auto state = init_meta_state<float>(desk_spec(), 5);
  const auto dd = init_dynamic_dataset(d.zoo, hp.shots, hp.queries, {3, 16, 16}, 6);
  const auto lam = static_cast<float>(hp.lambda);

  auto images = ad::Var<float>::parameter(dd.images);
  Rng rng(2);
  const auto task = sample_pseudo_episode(dd, images, hp.way, hp.shots, hp.queries, rng);
  const auto params = param_vars(state.theta, false);
  const auto inv = inversion_loss(d.zoo, dd, images, w);
  const auto outer = outer_loss(state.theta, params, task, hp.alpha_inner, hp.second_order).loss;

  // Minimizing L_inv - lambda L_outer versus ascending -L_inv + lambda L_outer.
  const auto g_min = ad::grad(inv - ad::scale(outer, lam), {images})[0].value();
  const auto g_max = ad::grad(ad::scale(outer, lam) - inv, {images})[0].value();
  CHECK((g_min.data + g_max.data).cwiseAbs().maxCoeff() == 0.0f);
  const auto g_inv = ad::grad(inv, {images})[0].value();
  const auto g_out = ad::grad(outer, {images})[0].value();
  const Eigen::VectorXd split = g_inv.data.cast<double>() - hp.lambda * g_out.data.cast<double>();
  const double scale = split.cwiseAbs().maxCoeff();
  CHECK((g_min.data.cast<double>() - split).cwiseAbs().maxCoeff() <= 1e-5 * scale);
  CHECK(g_out.data.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("eci: switch 1 raises the sampled task's outer loss") {
  const auto& d = desk();
  const auto hp = desk_hp();
  const InversionWeights w;
  int increased = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    const auto state = init_meta_state<float>(desk_spec(), 100 + static_cast<std::uint64_t>(t));
    const double sum0 = checksum(state.theta);
    auto dd = init_dynamic_dataset(d.zoo, hp.shots, hp.queries, {3, 16, 16}, 200 + static_cast<std::uint64_t>(t));
    Rng rng(300 + static_cast<std::uint64_t>(t));
    const auto params = param_vars(state.theta, false);
    const auto r = eci_dataset_update(dd, d.zoo, state, hp, w, 1, rng);
    REQUIRE(r.outer_loss.has_value());
    const auto after = rebind_pseudo_episode(r.task, ad::Var<float>::constant(dd.images));
    const double post = outer_loss(state.theta, params, after, hp.alpha_inner, hp.second_order).loss.item();
    increased += post >= *r.outer_loss;
    CHECK(checksum(state.theta) == sum0);
  }
  MESSAGE("outer loss increased in " << increased << " / " << trials << " trials");
  CHECK(increased >= 40);
}
