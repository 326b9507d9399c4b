#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "vidit/error.hpp"
#include "vidit/eval.hpp"
#include "vidit/rng.hpp"

using namespace vidit;
using namespace vidit::eval;
using world::Action;

namespace {

infer::GenerationResult result_of(Action motion, Action query_label, std::vector<Action> demos) {
  infer::GenerationResult r;
  r.generated_frames = world::gen_clip(motion, 3, 4).frames;
  r.query_label = query_label;
  r.demo_labels = std::move(demos);
  return r;
}

world::Frame filled(float v) {
  world::Frame f;
  std::fill(f.pixels.begin(), f.pixels.end(), v);
  return f;
}

std::vector<Trace> gaussian_traces(int per_class, int dim, double sep, uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<std::vector<double>> centers(world::kNumClasses, std::vector<double>(dim));
  for (auto& c : centers)
    for (auto& v : c) v = sep * normal(rng);
  std::vector<Trace> out;
  for (int c = 0; c < world::kNumClasses; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Trace t;
      t.label = c;
      for (int k = 0; k < dim; ++k) t.feature.push_back(centers[c][k] + normal(rng));
      out.push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("v_acc") {
  std::vector<infer::GenerationResult> rs = {
      result_of(Action::MoveLeft, Action::MoveLeft, {Action::MoveRight}),
      result_of(Action::Grow, Action::MoveUp, {Action::Grow}),
      result_of(Action::MoveDown, Action::MoveDown, {Action::MoveUp, Action::MoveDown}),
  };
  CHECK(v_acc(rs, LabelSource::Query) == doctest::Approx(2.0 / 3));
  CHECK(v_acc(rs, LabelSource::Demonstration) == doctest::Approx(2.0 / 3));
  CHECK(reference_label(rs[2], LabelSource::Demonstration) == Action::MoveDown);

  auto no_demo = result_of(Action::Grow, Action::Grow, {});
  CHECK_THROWS_AS(reference_label(no_demo, LabelSource::Demonstration), InvalidArgument);
  CHECK_THROWS_AS(v_acc(std::span<const infer::GenerationResult>{}, LabelSource::Query), InvalidArgument);

  // Static frames classify as Unknown and count as wrong.
  infer::GenerationResult still;
  still.generated_frames = {filled(0.0f), filled(0.0f)};
  still.query_label = Action::Grow;
  CHECK(v_acc(std::span(&still, 1), LabelSource::Query) == 0.0);

  std::vector<std::optional<Action>> preds = {Action::Grow, std::nullopt, Action::Shrink};
  std::vector<Action> labels = {Action::Grow, Action::Grow, Action::Grow};
  CHECK(v_acc(preds, labels) == doctest::Approx(1.0 / 3));
}

TEST_CASE("psnr") {
  const std::vector<world::Frame> a = {filled(0.2f), filled(0.5f)};
  CHECK(psnr(a, a) == 100.0);
  const std::vector<world::Frame> b = {filled(0.3f), filled(0.6f)};
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(psnr(a, b) == doctest::Approx(psnr(b, a)));

  Rng rng = make_rng(3);
  std::vector<world::Frame> x(3), y(3);
  double expect = 0;
  for (int t = 0; t < 3; ++t) {
    double se = 0;
    for (size_t i = 0; i < x[t].pixels.size(); ++i) {
      x[t].pixels[i] = static_cast<float>(uniform01(rng));
      y[t].pixels[i] = static_cast<float>(uniform01(rng));
      const double d = static_cast<double>(x[t].pixels[i]) - y[t].pixels[i];
      se += d * d;
    }
    expect += 10.0 * std::log10(1.0 / (se / x[t].pixels.size()));
  }
  CHECK(psnr(x, y) == doctest::Approx(expect / 3).epsilon(1e-9));
  CHECK_THROWS_AS(psnr(a, std::span(b).first(1)), InvalidArgument);
}

TEST_CASE("gaussian frechet closed forms") {
  const std::vector<double> mu0 = {0, 0}, mu1 = {3, -4};
  const std::vector<double> s1 = {2, 0.5, 0.5, 1}, s2 = {1, -0.3, -0.3, 3};
  CHECK(gaussian_frechet(mu0, s1, mu0, s1) == doctest::Approx(0.0).scale(1).epsilon(1e-9));
  CHECK(gaussian_frechet(mu0, s1, mu1, s1) == doctest::Approx(25.0).epsilon(1e-9));

  // For 2x2 SPD matrices tr sqrt(S1 S2) = sqrt(tr(S1 S2) + 2 sqrt(det S1 det S2)).
  const double tr12 = s1[0] * s2[0] + s1[1] * s2[2] + s1[2] * s2[1] + s1[3] * s2[3];
  const double det1 = s1[0] * s1[3] - s1[1] * s1[2], det2 = s2[0] * s2[3] - s2[1] * s2[2];
  const double trsqrt = std::sqrt(tr12 + 2 * std::sqrt(det1 * det2));
  const double expect = 25.0 + (s1[0] + s1[3]) + (s2[0] + s2[3]) - 2 * trsqrt;
  CHECK(gaussian_frechet(mu0, s1, mu1, s2) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(gaussian_frechet(mu1, s2, mu0, s1) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("frechet distance from samples") {
  Rng rng = make_rng(8);
  auto draw = [&](int n, double shift, double sd) {
    std::vector<std::vector<double>> v(n, std::vector<double>(3));
    for (auto& row : v)
      for (auto& x : row) x = shift + sd * normal(rng);
    return v;
  };
  const auto a = draw(4000, 0.0, 1.0);
  const auto b = draw(4000, 1.0, 2.0);
  // Isotropic: 3 * 1^2 + 3 * (1 + 4 - 2 * 2) = 6.
  CHECK(frechet_distance(a, b) == doctest::Approx(6.0).epsilon(0.08));
  CHECK(frechet_distance(a, b) == doctest::Approx(frechet_distance(b, a)).epsilon(1e-9));
  CHECK(frechet_distance(a, a) == doctest::Approx(0.0).scale(1).epsilon(1e-6));
  CHECK(frechet_distance(a, a) >= 0.0);
  CHECK_THROWS_AS(frechet_distance(draw(5, 0, 1), a), InvalidArgument);
}

TEST_CASE("probe on separable features") {
  const auto traces = gaussian_traces(30, 8, 6.0, 1);
  ProbeConfig cfg;
  cfg.seed = 2;
  const auto probe = train_probe(traces, world::kNumClasses, cfg);
  CHECK(p_acc(probe, traces) == 1.0);
  CHECK(probe.loss_history.size() == static_cast<size_t>(cfg.steps) + 1);
  for (size_t i = 1; i < probe.loss_history.size(); ++i) REQUIRE(probe.loss_history[i] <= probe.loss_history[i - 1] + 1e-12);
  CHECK(probe.loss_history.back() < probe.loss_history.front());

  const auto again = train_probe(traces, world::kNumClasses, cfg);
  CHECK(again.weights == probe.weights);
}

TEST_CASE("probe with shuffled labels stays at chance") {
  double sum = 0;
  for (uint64_t s = 0; s < 5; ++s) {
    auto train = gaussian_traces(40, 8, 0.0, 100 + s);
    auto test = gaussian_traces(100, 8, 0.0, 200 + s);
    Rng rng = make_rng(300 + s);
    for (auto* set : {&train, &test}) {
      for (size_t i = set->size(); i > 1; --i) std::swap((*set)[i - 1].label, (*set)[uniform_int(rng, 0, i - 1)].label);
    }
    ProbeConfig cfg;
    cfg.seed = s;
    sum += p_acc(train_probe(train, world::kNumClasses, cfg), test);
  }
  CHECK(std::abs(sum / 5 - 1.0 / 6) <= 0.05);
}

TEST_CASE("probe input validation") {
  auto traces = gaussian_traces(25, 4, 3.0, 4);
  std::erase_if(traces, [](const Trace& t) { return t.label == 5; });
  CHECK_THROWS_AS(train_probe(traces, world::kNumClasses, ProbeConfig{}), InvalidArgument);
  auto few = gaussian_traces(10, 4, 3.0, 4);
  CHECK_THROWS_AS(train_probe(few, world::kNumClasses, ProbeConfig{}), InvalidArgument);
  ProbeConfig relaxed;
  relaxed.min_per_class = 10;
  CHECK_NOTHROW(train_probe(few, world::kNumClasses, relaxed));
}

TEST_CASE("condition suite") {
  fixtures::World w("eval_world");
  const auto qpool = w.pool(world::Split::Test);
  const auto ppool = w.pool(world::Split::Val);
  const auto m = model::TransformerModel::init(fixtures::micro_config(w.codebook.vocab_size()), 6);
  SuiteConfig cfg;
  cfg.n_queries = 24;
  cfg.n_probe_queries = 120;
  cfg.probe.min_per_class = 8;
  cfg.seed = 9;
  const auto conds = default_conditions();
  CHECK(conds.size() == 6);

  std::vector<ProbeOutcome> probes;
  const auto rep = run_condition_suite(m, w.codebook, qpool, ppool, conds, cfg, &probes);
  REQUIRE(rep.rows.size() == 6);
  CHECK(probes.size() == 6);
  for (const auto& r : rep.rows) {
    CHECK(r.n == 24);
    CHECK((r.v_acc >= 0 && r.v_acc <= 1));
    CHECK((r.p_acc >= 0 && r.p_acc <= 1));
    CHECK(std::isfinite(r.psnr_db));
    CHECK(r.frechet >= 0);
    CHECK(r.model_hash == model_hash(m));
  }
  CHECK(rep.row("in-class", LabelSource::Query).v_acc == rep.row("in-class", LabelSource::Demonstration).v_acc);
  CHECK(rep.row("random", LabelSource::Query).psnr_db == rep.row("random", LabelSource::Demonstration).psnr_db);

  const auto rep2 = run_condition_suite(m, w.codebook, qpool, ppool, conds, cfg);
  CHECK(rep2.to_csv() == rep.to_csv());
  CHECK(rep.to_csv().rfind("condition,label_source,v_acc,p_acc,psnr_db,frechet,n,seed,model_hash\n", 0) == 0);

  // Planned queries cycle labels and are reproducible.
  const auto plan = plan_queries(qpool, 12, cfg, {infer::DemoKind::InClass, 1, 8, 0}, "query");
  for (int i = 0; i < 12; ++i) {
    CHECK(world::class_id(plan[i].label) == i % world::kNumClasses);
    CHECK(qpool.clips[plan[i].clip_index].label == plan[i].label);
    REQUIRE(plan[i].demos.size() == 1);
    CHECK(qpool.clips[plan[i].demos[0]].label == plan[i].label);
    CHECK(ground_truth(qpool, plan[i], cfg).size() == 4);
  }

  const std::vector<SuiteCondition> bad = {{infer::DemoKind::None, LabelSource::Demonstration}};
  CHECK_THROWS_AS(run_condition_suite(m, w.codebook, qpool, ppool, bad, cfg), InvalidArgument);
}
