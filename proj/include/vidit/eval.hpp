#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vidit/inference.hpp"
#include "vidit/model.hpp"
#include "vidit/tokenizer.hpp"
#include "vidit/worldgen.hpp"

namespace vidit::eval {

enum class LabelSource : uint8_t { Query = 0, Demonstration };
std::string_view label_source_name(LabelSource s);

// The label a result is scored against. For several demonstrations the last
// one (nearest the query) is used. Throws when the source has no label.
world::Action reference_label(const infer::GenerationResult& r, LabelSource src);

// Fraction of results whose oracle class equals the reference label; Unknown
// counts as wrong.
double v_acc(std::span<const infer::GenerationResult> results, LabelSource src);
// Same from precomputed oracle predictions.
double v_acc(std::span<const std::optional<world::Action>> predictions, std::span<const world::Action> labels);

struct Trace {
  std::vector<double> feature;
  int label = 0;
};

// Mean of the last-layer hiddens over the generated span.
std::vector<double> pool_hidden(const infer::GenerationResult& r);

struct ProbeConfig {
  int steps = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  uint64_t seed = 0;
  int min_per_class = 20;
};

// Multinomial logistic regression on standardized features. Features are
// standardized per dimension, then scaled so the covariance has spectral norm
// at most 1, which keeps full-batch descent at lr 0.1 monotone.
struct ProbeModel {
  int n_classes = 0;
  int dim = 0;
  std::vector<double> weights;  // n_classes x dim
  std::vector<double> bias;
  std::vector<double> mean;
  std::vector<double> scale;
  std::vector<double> loss_history;  // objective before each step, then final
  std::string tag;

  std::vector<double> logits(std::span<const double> feature) const;
  int predict(std::span<const double> feature) const;
};

ProbeModel train_probe(std::span<const Trace> traces, int n_classes, const ProbeConfig& cfg);
double p_acc(const ProbeModel& probe, std::span<const Trace> traces);

// 10 log10(1 / MSE) per frame with MAX = 1, averaged over frames; a frame with
// MSE < 1e-10 scores 100 dB.
double psnr(std::span<const world::Frame> gen, std::span<const world::Frame> gt);

// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)). Covariances are row-major.
double gaussian_frechet(std::span<const double> mu1, std::span<const double> cov1, std::span<const double> mu2,
                        std::span<const double> cov2);
// Gaussians fit (unbiased covariance) to two sets of feature vectors; each set
// needs at least 2 * dim samples.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);
double feature_frechet(std::span<const world::FeatureVector> gen, std::span<const world::FeatureVector> ref);

struct SuiteCondition {
  infer::DemoKind kind = infer::DemoKind::None;
  LabelSource source = LabelSource::Query;
};

// None/Random/InClass scored by query labels, then Random/InClass/Contrastive
// scored by demonstration labels.
std::vector<SuiteCondition> default_conditions();

struct SuiteConfig {
  int n_queries = 300;
  int n_probe_queries = 300;
  int query_frames = 4;
  int gen_frames = 4;
  int k = 1;
  int frames_per_demo = 8;
  uint64_t seed = 0;
  // Conditioned models only: pass the query label through the conditioning
  // slot instead of leaving it empty.
  bool condition_on_query_label = false;
  ProbeConfig probe;

  void validate() const;
};

struct ReportRow {
  std::string condition;
  LabelSource source = LabelSource::Query;
  double v_acc = 0;
  double p_acc = 0;
  double psnr_db = 0;
  double frechet = 0;
  int n = 0;
  uint64_t seed = 0;
  std::string model_hash;
};

struct EvalReport {
  std::vector<ReportRow> rows;

  const ReportRow& row(std::string_view condition, LabelSource source) const;
  std::string to_csv() const;
  std::string to_json() const;
};

std::string model_hash(const model::TransformerModel& model);

// One query of a suite: a window of a pool clip plus its demonstrations.
struct Query {
  int clip_index = 0;
  int start = 0;
  world::Action label = world::Action::MoveLeft;
  std::vector<int> demos;  // pool indices
};

// Labels cycle over the classes; clips and window starts are seeded. The plan
// depends only on labels, clip ids and the seed.
std::vector<Query> plan_queries(const infer::ClipPool& pool, int n, const SuiteConfig& cfg,
                                const infer::DemonstrationSpec& demo, std::string_view stream);

// Builds the prompt for one query and greedily generates its continuation.
infer::GenerationResult run_query(const model::TransformerModel& model, const tok::Codebook& cb,
                                  const infer::ClipPool& pool, const Query& q, const SuiteConfig& cfg,
                                  bool capture_attention = false);

// Ground-truth continuation frames of a query.
std::vector<world::Frame> ground_truth(const infer::ClipPool& pool, const Query& q, const SuiteConfig& cfg);

struct ProbeOutcome {
  SuiteCondition condition;
  ProbeModel probe;
  double p_acc = 0;
  int n_train = 0;
  int n_test = 0;
};

// Queries come from `query_pool`; probes are trained on generations for
// queries from `probe_pool` under the same condition.
EvalReport run_condition_suite(const model::TransformerModel& model, const tok::Codebook& cb,
                               const infer::ClipPool& query_pool, const infer::ClipPool& probe_pool,
                               std::span<const SuiteCondition> conditions, const SuiteConfig& cfg,
                               std::vector<ProbeOutcome>* probes = nullptr);

}  // namespace vidit::eval
