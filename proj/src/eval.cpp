#include "vidit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "vidit/error.hpp"
#include "vidit/rng.hpp"

namespace vidit::eval {

using infer::DemoKind;
using infer::GenerationResult;

std::string_view label_source_name(LabelSource s) {
  return s == LabelSource::Query ? "query" : "demonstration";
}

world::Action reference_label(const GenerationResult& r, LabelSource src) {
  if (src == LabelSource::Query) return r.query_label;
  if (r.demo_labels.empty()) throw InvalidArgument("result has no demonstration label");
  return r.demo_labels.back();
}

double v_acc(std::span<const std::optional<world::Action>> predictions, std::span<const world::Action> labels) {
  if (predictions.empty()) throw InvalidArgument("v_acc of an empty result set");
  if (predictions.size() != labels.size()) throw InvalidArgument("v_acc: prediction/label count mismatch");
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += predictions[i] && *predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double v_acc(std::span<const GenerationResult> results, LabelSource src) {
  if (results.empty()) throw InvalidArgument("v_acc of an empty result set");
  std::vector<std::optional<world::Action>> preds;
  std::vector<world::Action> labels;
  for (const auto& r : results) {
    if (r.generated_frames.size() < 2) throw InvalidArgument("v_acc needs at least 2 generated frames");
    preds.push_back(world::oracle_classify(r.generated_frames));
    labels.push_back(reference_label(r, src));
  }
  return v_acc(preds, labels);
}

std::vector<double> pool_hidden(const GenerationResult& r) {
  if (r.d_model <= 0 || r.last_hidden.empty()) throw InvalidArgument("result has no hidden states");
  const size_t rows = r.last_hidden.size() / r.d_model;
  std::vector<double> out(r.d_model, 0.0);
  for (size_t i = 0; i < rows; ++i) {
    for (int k = 0; k < r.d_model; ++k) out[k] += r.last_hidden[i * r.d_model + k];
  }
  for (auto& v : out) v /= static_cast<double>(rows);
  return out;
}

// ---- probe ----

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD standardized(const ProbeModel& p, std::span<const Trace> traces) {
  MatD z(traces.size(), p.dim);
  for (size_t i = 0; i < traces.size(); ++i) {
    if (static_cast<int>(traces[i].feature.size()) != p.dim) throw InvalidArgument("probe feature size mismatch");
    for (int k = 0; k < p.dim; ++k) z(i, k) = (traces[i].feature[k] - p.mean[k]) * p.scale[k];
  }
  return z;
}

// Softmax probabilities in place; returns the mean cross entropy.
double softmax_ce(MatD& logits, std::span<const Trace> traces) {
  double total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
    const double z = logits.row(i).sum();
    logits.row(i) /= z;
    total -= std::log(std::max(logits(i, traces[i].label), 1e-300));
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

std::vector<double> ProbeModel::logits(std::span<const double> feature) const {
  if (static_cast<int>(feature.size()) != dim) throw InvalidArgument("probe feature size mismatch");
  std::vector<double> out(bias);
  for (int c = 0; c < n_classes; ++c) {
    for (int k = 0; k < dim; ++k) out[c] += weights[c * dim + k] * (feature[k] - mean[k]) * scale[k];
  }
  return out;
}

int ProbeModel::predict(std::span<const double> feature) const {
  const auto z = logits(feature);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

ProbeModel train_probe(std::span<const Trace> traces, int n_classes, const ProbeConfig& cfg) {
  if (n_classes < 2) throw InvalidArgument("probe needs at least 2 classes");
  if (traces.empty()) throw InvalidArgument("probe needs training traces");
  const int dim = static_cast<int>(traces[0].feature.size());
  if (dim < 1) throw InvalidArgument("probe features are empty");
  std::vector<int> counts(n_classes, 0);
  for (const auto& t : traces) {
    if (t.label < 0 || t.label >= n_classes) throw InvalidArgument("probe label out of range");
    if (static_cast<int>(t.feature.size()) != dim) throw InvalidArgument("probe feature size mismatch");
    for (double v : t.feature) {
      if (!std::isfinite(v)) throw InvalidArgument("probe feature is not finite");
    }
    ++counts[t.label];
  }
  for (int c = 0; c < n_classes; ++c) {
    if (counts[c] == 0) throw InvalidArgument("class " + std::to_string(c) + " missing from probe training set");
    if (counts[c] < cfg.min_per_class) {
      throw InvalidArgument("class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                            " probe samples, need " + std::to_string(cfg.min_per_class));
    }
  }

  ProbeModel p;
  p.n_classes = n_classes;
  p.dim = dim;
  p.mean.assign(dim, 0.0);
  p.scale.assign(dim, 1.0);
  const double n = static_cast<double>(traces.size());
  for (const auto& t : traces) {
    for (int k = 0; k < dim; ++k) p.mean[k] += t.feature[k] / n;
  }
  for (int k = 0; k < dim; ++k) {
    double var = 0;
    for (const auto& t : traces) var += (t.feature[k] - p.mean[k]) * (t.feature[k] - p.mean[k]);
    var /= n;
    p.scale[k] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
  }
  MatD z = standardized(p, traces);
  // Spectral norm of the covariance by power iteration.
  const MatD cov = z.transpose() * z / n;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(dim).normalized();
  double lambda = 0;
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd w = cov * v;
    lambda = w.norm();
    if (lambda == 0) break;
    v = w / lambda;
  }
  if (lambda > 1) {
    const double s = 1.0 / std::sqrt(lambda);
    for (auto& x : p.scale) x *= s;
    z *= s;
  }

  Rng rng = make_rng(substream(cfg.seed, "probe"));
  MatD w(n_classes, dim);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 1e-3 * normal(rng);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(n_classes);
  MatD y = MatD::Zero(traces.size(), n_classes);
  for (size_t i = 0; i < traces.size(); ++i) y(i, traces[i].label) = 1;

  auto objective = [&](MatD& probs) {
    probs = z * w.transpose();
    probs.rowwise() += b;
    return softmax_ce(probs, traces) + 0.5 * cfg.l2 * w.squaredNorm();
  };
  MatD probs;
  for (int step = 0; step < cfg.steps; ++step) {
    p.loss_history.push_back(objective(probs));
    const MatD diff = (probs - y) / n;
    const MatD gw = diff.transpose() * z + cfg.l2 * w;
    const Eigen::RowVectorXd gb = diff.colwise().sum();
    w -= cfg.lr * gw;
    b -= cfg.lr * gb;
  }
  p.loss_history.push_back(objective(probs));
  p.weights.assign(w.data(), w.data() + w.size());
  p.bias.assign(b.data(), b.data() + b.size());
  for (double x : p.weights) {
    if (!std::isfinite(x)) throw TrainingFailure("probe weights diverged");
  }
  return p;
}

double p_acc(const ProbeModel& probe, std::span<const Trace> traces) {
  if (traces.empty()) throw InvalidArgument("p_acc of an empty trace set");
  size_t hits = 0;
  for (const auto& t : traces) hits += probe.predict(t.feature) == t.label;
  return static_cast<double>(hits) / static_cast<double>(traces.size());
}

// ---- visual metrics ----

double psnr(std::span<const world::Frame> gen, std::span<const world::Frame> gt) {
  if (gen.empty() || gen.size() != gt.size()) throw InvalidArgument("psnr: frame count mismatch");
  double total = 0;
  for (size_t f = 0; f < gen.size(); ++f) {
    if (gen[f].height != gt[f].height || gen[f].width != gt[f].width) throw InvalidArgument("psnr: frame shape mismatch");
    double se = 0;
    for (size_t i = 0; i < gen[f].pixels.size(); ++i) {
      const double e = double(gen[f].pixels[i]) - double(gt[f].pixels[i]);
      se += e * e;
    }
    const double mse = se / static_cast<double>(gen[f].pixels.size());
    total += mse < 1e-10 ? 100.0 : 10.0 * std::log10(1.0 / mse);
  }
  return total / static_cast<double>(gen.size());
}

double gaussian_frechet(std::span<const double> mu1, std::span<const double> cov1, std::span<const double> mu2,
                        std::span<const double> cov2) {
  const Eigen::Index d = static_cast<Eigen::Index>(mu1.size());
  if (mu2.size() != mu1.size() || cov1.size() != mu1.size() * mu1.size() || cov2.size() != cov1.size()) {
    throw InvalidArgument("frechet: dimension mismatch");
  }
  using Map = Eigen::Map<const MatD>;
  const MatD s1 = Map(cov1.data(), d, d);
  const MatD s2 = Map(cov2.data(), d, d);
  Eigen::SelfAdjointEigenSolver<MatD> e1(0.5 * (s1 + s1.transpose()));
  const Eigen::VectorXd r1 = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const MatD sqrt1 = e1.eigenvectors() * r1.asDiagonal() * e1.eigenvectors().transpose();
  const MatD m = sqrt1 * s2 * sqrt1;
  Eigen::SelfAdjointEigenSolver<MatD> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  double dmu = 0;
  for (Eigen::Index i = 0; i < d; ++i) dmu += (mu1[i] - mu2[i]) * (mu1[i] - mu2[i]);
  return std::max(0.0, dmu + s1.trace() + s2.trace() - 2.0 * tr_sqrt);
}

namespace {

void fit_gaussian(const std::vector<std::vector<double>>& x, std::vector<double>& mu, std::vector<double>& cov) {
  const size_t n = x.size();
  const size_t d = x[0].size();
  mu.assign(d, 0.0);
  for (const auto& v : x) {
    if (v.size() != d) throw InvalidArgument("frechet: inconsistent feature size");
    for (size_t k = 0; k < d; ++k) mu[k] += v[k];
  }
  for (auto& m : mu) m /= static_cast<double>(n);
  cov.assign(d * d, 0.0);
  for (const auto& v : x) {
    for (size_t i = 0; i < d; ++i) {
      for (size_t j = 0; j < d; ++j) cov[i * d + j] += (v[i] - mu[i]) * (v[j] - mu[j]);
    }
  }
  for (auto& c : cov) c /= static_cast<double>(n - 1);
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("frechet: empty set");
  const size_t d = a[0].size();
  if (a.size() < 2 * d || b.size() < 2 * d) {
    throw InvalidArgument("frechet: each set needs at least " + std::to_string(2 * d) + " samples");
  }
  std::vector<double> mu1, c1, mu2, c2;
  fit_gaussian(a, mu1, c1);
  fit_gaussian(b, mu2, c2);
  return gaussian_frechet(mu1, c1, mu2, c2);
}

double feature_frechet(std::span<const world::FeatureVector> gen, std::span<const world::FeatureVector> ref) {
  auto conv = [](std::span<const world::FeatureVector> s) {
    std::vector<std::vector<double>> out;
    for (const auto& f : s) out.emplace_back(f.begin(), f.end());
    return out;
  };
  return frechet_distance(conv(gen), conv(ref));
}

// ---- suite ----

std::vector<SuiteCondition> default_conditions() {
  return {{DemoKind::None, LabelSource::Query},         {DemoKind::Random, LabelSource::Query},
          {DemoKind::InClass, LabelSource::Query},      {DemoKind::Random, LabelSource::Demonstration},
          {DemoKind::InClass, LabelSource::Demonstration}, {DemoKind::Contrastive, LabelSource::Demonstration}};
}

void SuiteConfig::validate() const {
  if (n_queries < 2 * world::kFeatureDim) {
    throw ConfigError("n_queries must be >= " + std::to_string(2 * world::kFeatureDim));
  }
  if (n_probe_queries < world::kNumClasses) throw ConfigError("n_probe_queries too small");
  if (query_frames < 1) throw ConfigError("query_frames must be >= 1");
  if (gen_frames < 2) throw ConfigError("gen_frames must be >= 2");
  if (k < 1 || frames_per_demo < 1) throw ConfigError("k and frames_per_demo must be >= 1");
  if (probe.steps < 1 || !(probe.lr > 0) || probe.l2 < 0) throw ConfigError("invalid probe settings");
}

const ReportRow& EvalReport::row(std::string_view condition, LabelSource source) const {
  for (const auto& r : rows) {
    if (r.condition == condition && r.source == source) return r;
  }
  throw NotFound("no report row " + std::string(condition) + "/" + std::string(label_source_name(source)));
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "condition,label_source,v_acc,p_acc,psnr_db,frechet,n,seed,model_hash\n";
  for (const auto& r : rows) {
    os << r.condition << ',' << label_source_name(r.source) << ',' << num(r.v_acc) << ',' << num(r.p_acc) << ','
       << num(r.psnr_db) << ',' << num(r.frechet) << ',' << r.n << ',' << r.seed << ',' << r.model_hash << '\n';
  }
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["condition"] = r.condition;
    j["label_source"] = label_source_name(r.source);
    j["v_acc"] = r.v_acc;
    j["p_acc"] = r.p_acc;
    j["psnr_db"] = r.psnr_db;
    j["frechet"] = r.frechet;
    j["n"] = r.n;
    j["seed"] = r.seed;
    j["model_hash"] = r.model_hash;
    rows_json.push_back(j);
  }
  nlohmann::ordered_json out;
  out["rows"] = rows_json;
  return out.dump(2) + "\n";
}

std::string model_hash(const model::TransformerModel& model) {
  return hash_hex(fnv1a(model::serialize_checkpoint(model)));
}

std::vector<Query> plan_queries(const infer::ClipPool& pool, int n, const SuiteConfig& cfg,
                                const infer::DemonstrationSpec& demo, std::string_view stream) {
  const int span = cfg.query_frames + cfg.gen_frames;
  std::vector<Query> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Query q;
    q.label = world::kAllActions[i % world::kNumClasses];
    std::vector<int> options;
    for (int idx : pool.by_class[world::class_id(q.label)]) {
      if (static_cast<int>(pool.clips[idx].frames.size()) >= span) options.push_back(idx);
    }
    if (options.empty()) {
      throw InvalidArgument("no query clip of class " + std::string(world::action_name(q.label)));
    }
    Rng rng = make_rng(substream(cfg.seed, stream, static_cast<uint64_t>(i)));
    q.clip_index = options[uniform_int(rng, 0, static_cast<int64_t>(options.size()) - 1)];
    q.start = static_cast<int>(uniform_int(rng, 0, static_cast<int64_t>(pool.clips[q.clip_index].frames.size()) - span));
    infer::DemonstrationSpec d = demo;
    d.seed = substream(cfg.seed, std::string(stream) + "/demo", static_cast<uint64_t>(i));
    q.demos = infer::sample_demonstration(d, pool, q.label, pool.clips[q.clip_index].clip_id);
    out.push_back(std::move(q));
  }
  return out;
}

infer::GenerationResult run_query(const model::TransformerModel& model, const tok::Codebook& cb,
                                  const infer::ClipPool& pool, const Query& q, const SuiteConfig& cfg,
                                  bool capture_attention) {
  const int nt = pool.tokens_per_frame;
  std::vector<std::vector<int>> demo_bodies;
  std::vector<world::Action> demo_labels;
  std::vector<int> demo_frames;
  for (int idx : q.demos) {
    const auto& c = pool.clips[idx];
    if (static_cast<int>(c.frames.size()) < cfg.frames_per_demo) throw InvalidArgument("demonstration clip too short");
    demo_bodies.emplace_back(c.tokens.begin(), c.tokens.begin() + static_cast<ptrdiff_t>(cfg.frames_per_demo) * nt);
    demo_labels.push_back(c.label);
    demo_frames.push_back(cfg.frames_per_demo);
  }
  const auto& qc = pool.clips[q.clip_index];
  const auto qb = std::span(qc.tokens).subspan(static_cast<size_t>(q.start) * nt,
                                               static_cast<size_t>(cfg.query_frames) * nt);
  const auto& mcfg = model.config();
  const auto prompt =
      infer::build_prompt_tokens(demo_bodies, qb, nt, cb.bos_id(), mcfg.context_len - (mcfg.conditioning ? 1 : 0));
  std::optional<model::Condition> cond;
  if (mcfg.conditioning) {
    cond = cfg.condition_on_query_label ? model::Condition::of(world::class_id(q.label)) : model::Condition::none();
  }
  auto r = infer::generate(model, prompt, cfg.gen_frames, cb, infer::Sampling::greedy(), capture_attention, cond);
  r.query_label = q.label;
  r.demo_labels = std::move(demo_labels);
  r.demo_frames = std::move(demo_frames);
  r.query_frames = cfg.query_frames;
  return r;
}

std::vector<world::Frame> ground_truth(const infer::ClipPool& pool, const Query& q, const SuiteConfig& cfg) {
  const auto& c = pool.clips[q.clip_index];
  const auto first = c.frames.begin() + q.start + cfg.query_frames;
  return {first, first + cfg.gen_frames};
}

namespace {

struct KindRun {
  std::vector<std::optional<world::Action>> pred;
  std::vector<world::Action> query_label, demo_label;
  std::vector<std::vector<double>> pooled;
  std::vector<double> psnr;
  std::vector<world::FeatureVector> gen_features, gt_features;
};

KindRun run_kind(const model::TransformerModel& model, const tok::Codebook& cb, const infer::ClipPool& pool, int n,
                 const SuiteConfig& cfg, DemoKind kind, std::string_view stream, bool visual) {
  infer::DemonstrationSpec demo;
  demo.kind = kind;
  demo.k = kind == DemoKind::None ? 0 : cfg.k;
  demo.frames_per_demo = cfg.frames_per_demo;
  const int cond = model.config().conditioning ? 1 : 0;
  demo.validate(cfg.query_frames, cfg.gen_frames, (model.config().context_len - 1 - cond) / pool.tokens_per_frame);
  KindRun run;
  for (const auto& q : plan_queries(pool, n, cfg, demo, stream)) {
    const auto r = run_query(model, cb, pool, q, cfg, false);
    run.pred.push_back(world::oracle_classify(r.generated_frames));
    run.query_label.push_back(r.query_label);
    run.demo_label.push_back(r.demo_labels.empty() ? r.query_label : r.demo_labels.back());
    run.pooled.push_back(pool_hidden(r));
    if (visual) {
      const auto gt = ground_truth(pool, q, cfg);
      run.psnr.push_back(psnr(r.generated_frames, gt));
      run.gen_features.push_back(world::oracle_features(r.generated_frames));
      run.gt_features.push_back(world::oracle_features(gt));
    }
  }
  return run;
}

std::vector<Trace> traces_of(const KindRun& run, LabelSource src) {
  std::vector<Trace> out;
  const auto& labels = src == LabelSource::Query ? run.query_label : run.demo_label;
  for (size_t i = 0; i < run.pooled.size(); ++i) out.push_back({run.pooled[i], world::class_id(labels[i])});
  return out;
}

}  // namespace

EvalReport run_condition_suite(const model::TransformerModel& model, const tok::Codebook& cb,
                               const infer::ClipPool& query_pool, const infer::ClipPool& probe_pool,
                               std::span<const SuiteCondition> conditions, const SuiteConfig& cfg,
                               std::vector<ProbeOutcome>* probes) {
  cfg.validate();
  for (const auto& c : conditions) {
    if (c.kind == DemoKind::None && c.source == LabelSource::Demonstration) {
      throw InvalidArgument("kind=none has no demonstration labels");
    }
  }
  const std::string hash = model_hash(model);
  std::map<DemoKind, std::pair<KindRun, KindRun>> runs;
  EvalReport report;
  for (const auto& c : conditions) {
    auto it = runs.find(c.kind);
    if (it == runs.end()) {
      KindRun test = run_kind(model, cb, query_pool, cfg.n_queries, cfg, c.kind, "query", true);
      KindRun probe = run_kind(model, cb, probe_pool, cfg.n_probe_queries, cfg, c.kind, "probe", false);
      it = runs.emplace(c.kind, std::make_pair(std::move(test), std::move(probe))).first;
    }
    const auto& [test, probe_run] = it->second;
    ReportRow row;
    row.condition = std::string(infer::demo_kind_name(c.kind));
    row.source = c.source;
    row.v_acc = v_acc(test.pred, c.source == LabelSource::Query ? test.query_label : test.demo_label);
    ProbeConfig pc = cfg.probe;
    pc.seed = substream(cfg.seed, "probe/" + row.condition + "/" + std::string(label_source_name(c.source)));
    const auto train_traces = traces_of(probe_run, c.source);
    const auto test_traces = traces_of(test, c.source);
    ProbeModel probe = train_probe(train_traces, world::kNumClasses, pc);
    probe.tag = row.condition + "/" + std::string(label_source_name(c.source));
    row.p_acc = p_acc(probe, test_traces);
    if (probes) {
      probes->push_back({c, probe, row.p_acc, static_cast<int>(train_traces.size()),
                         static_cast<int>(test_traces.size())});
    }
    double ps = 0;
    for (double v : test.psnr) ps += v;
    row.psnr_db = ps / static_cast<double>(test.psnr.size());
    row.frechet = feature_frechet(test.gen_features, test.gt_features);
    row.n = cfg.n_queries;
    row.seed = cfg.seed;
    row.model_hash = hash;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace vidit::eval
