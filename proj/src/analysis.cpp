#include "vidit/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "vidit/error.hpp"
#include "vidit/rng.hpp"

namespace vidit::analysis {

std::string_view bucket_kind_name(BucketKind k) {
  switch (k) {
    case BucketKind::Bos: return "bos";
    case BucketKind::Demo: return "demo";
    case BucketKind::Query: return "query";
    case BucketKind::Generated: return "generated";
  }
  return "?";
}

PromptLayout make_layout(std::span<const int> demo_frames, int query_frames, int gen_frames, int tokens_per_frame,
                         bool conditioned) {
  if (tokens_per_frame < 1 || query_frames < 0 || gen_frames < 0) throw InvalidArgument("invalid layout sizes");
  PromptLayout lay;
  lay.tokens_per_frame = tokens_per_frame;
  int row = conditioned ? 2 : 1;
  lay.buckets.push_back({BucketKind::Bos, 0, 0, row});
  int demo_index = 0;
  for (int n : demo_frames) {
    for (int f = 0; f < n; ++f, row += tokens_per_frame) {
      lay.buckets.push_back({BucketKind::Demo, demo_index++, row, row + tokens_per_frame});
    }
  }
  for (int f = 0; f < query_frames; ++f, row += tokens_per_frame) {
    lay.buckets.push_back({BucketKind::Query, f, row, row + tokens_per_frame});
  }
  lay.prompt_rows = row;
  for (int f = 0; f < gen_frames; ++f, row += tokens_per_frame) {
    lay.buckets.push_back({BucketKind::Generated, f, row, row + tokens_per_frame});
  }
  return lay;
}

PromptLayout layout_of(const infer::GenerationResult& r) {
  const int nt = r.prompt.tokens_per_frame;
  if (nt < 1) throw InvalidArgument("result prompt has no frame size");
  const int gen = static_cast<int>(r.generated_ids.size()) / nt;
  auto lay = make_layout(r.demo_frames, r.query_frames, gen, nt, r.conditioned);
  const int expect = static_cast<int>(r.prompt.ids.size()) + (r.conditioned ? 1 : 0);
  if (lay.prompt_rows != expect) throw InvalidArgument("layout does not match the prompt length");
  return lay;
}

FrameAttentionProfile attention_frame_aggregate(const std::vector<std::vector<float>>& rows,
                                                const PromptLayout& layout) {
  if (rows.empty()) throw InvalidArgument("no attention captured");
  FrameAttentionProfile p;
  p.buckets = layout.buckets;
  for (size_t t = 0; t < rows.size(); ++t) {
    const int len = layout.prompt_rows + static_cast<int>(t);
    if (static_cast<int>(rows[t].size()) != len) {
      throw InvalidArgument("attention row " + std::to_string(t) + " has " + std::to_string(rows[t].size()) +
                            " entries, layout expects " + std::to_string(len));
    }
    std::vector<double> m(p.buckets.size(), 0.0);
    for (size_t b = 0; b < p.buckets.size(); ++b) {
      const int end = std::min(p.buckets[b].end, len);
      for (int i = p.buckets[b].begin; i < end; ++i) m[b] += rows[t][i];
    }
    p.mass.push_back(std::move(m));
  }
  return p;
}

FrameAttentionProfile attention_frame_aggregate(const infer::GenerationResult& r) {
  return attention_frame_aggregate(r.attention, layout_of(r));
}

DemoQueryMass demo_query_mass(const FrameAttentionProfile& profile) {
  if (profile.mass.empty()) throw InvalidArgument("empty attention profile");
  DemoQueryMass out;
  for (const auto& m : profile.mass) {
    DemoQueryMass tok;
    for (size_t b = 0; b < profile.buckets.size(); ++b) {
      switch (profile.buckets[b].kind) {
        case BucketKind::Bos: tok.bos += m[b]; break;
        case BucketKind::Demo: tok.demo += m[b]; break;
        case BucketKind::Query: tok.query += m[b]; break;
        case BucketKind::Generated: tok.generated += m[b]; break;
      }
    }
    const double z = tok.bos + tok.demo + tok.query + tok.generated;
    if (!(z > 0)) throw InvalidArgument("attention profile has no mass");
    out.bos += tok.bos / z;
    out.demo += tok.demo / z;
    out.query += tok.query / z;
    out.generated += tok.generated / z;
  }
  const double n = static_cast<double>(profile.mass.size());
  out.bos /= n;
  out.demo /= n;
  out.query /= n;
  out.generated /= n;
  return out;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string AttentionSummary::to_csv() const {
  std::ostringstream os;
  os << "query,query_label,demo_label,prediction,success,demo_mass,query_mass,generated_mass,bos_mass\n";
  for (const auto& r : records) {
    os << r.query << ',' << world::action_name(r.query_label) << ',' << world::action_name(r.demo_label) << ','
       << (r.prediction ? world::action_name(*r.prediction) : "unknown") << ',' << (r.success ? 1 : 0) << ','
       << num(r.mass.demo) << ',' << num(r.mass.query) << ',' << num(r.mass.generated) << ',' << num(r.mass.bos)
       << '\n';
  }
  return os.str();
}

std::string AttentionSummary::summary_json() const {
  nlohmann::ordered_json j;
  j["n_success"] = n_success;
  j["n_failure"] = n_failure;
  auto val = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  j["demo_minus_query_success"] = val(diff_success);
  j["demo_minus_query_failure"] = val(diff_failure);
  return j.dump(2) + "\n";
}

AttentionSummary run_attention_analysis(const model::TransformerModel& model, const tok::Codebook& cb,
                                        const infer::ClipPool& pool, infer::DemoKind kind, int n_queries,
                                        const eval::SuiteConfig& cfg) {
  if (kind == infer::DemoKind::None) throw InvalidArgument("attention analysis needs demonstrations");
  infer::DemonstrationSpec demo;
  demo.kind = kind;
  demo.k = cfg.k;
  demo.frames_per_demo = cfg.frames_per_demo;
  AttentionSummary s;
  double sum_s = 0, sum_f = 0;
  const auto queries = eval::plan_queries(pool, n_queries, cfg, demo, "attn");
  for (size_t i = 0; i < queries.size(); ++i) {
    const auto r = eval::run_query(model, cb, pool, queries[i], cfg, true);
    AttentionRecord rec;
    rec.query = static_cast<int>(i);
    rec.query_label = r.query_label;
    rec.demo_label = r.demo_labels.back();
    rec.prediction = world::oracle_classify(r.generated_frames);
    rec.success = rec.prediction && *rec.prediction == rec.demo_label;
    rec.mass = demo_query_mass(attention_frame_aggregate(r));
    (rec.success ? sum_s : sum_f) += rec.mass.demo - rec.mass.query;
    (rec.success ? s.n_success : s.n_failure) += 1;
    s.records.push_back(rec);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.diff_success = s.n_success ? sum_s / s.n_success : nan;
  s.diff_failure = s.n_failure ? sum_f / s.n_failure : nan;
  return s;
}

std::vector<LadderEntry> default_ladder(int vocab, int context_len) {
  auto make = [&](int layers, int d, int heads, int mlp) {
    model::ModelConfig c;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = heads;
    c.d_mlp = mlp;
    c.vocab = vocab;
    c.context_len = context_len;
    return c;
  };
  return {{"tiny", make(2, 64, 2, 256)}, {"small", make(4, 128, 4, 512)}, {"base", make(6, 256, 8, 1024)}};
}

std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::ostringstream os;
  os << "size,params,seed,val_loss,v_acc_inclass,v_acc_random,p_acc_inclass,p_acc_random,gain\n";
  for (const auto& r : rows) {
    os << r.size << ',' << r.params << ',' << r.seed << ',' << num(r.val_loss) << ',' << num(r.v_acc_inclass) << ','
       << num(r.v_acc_random) << ',' << num(r.p_acc_inclass) << ',' << num(r.p_acc_random) << ',' << num(r.gain)
       << '\n';
  }
  return os.str();
}

std::vector<ScalingRow> scaling_suite(const std::vector<LadderEntry>& ladder, const train::TrainingData& data,
                                      const tok::Codebook& cb, const infer::ClipPool& query_pool,
                                      const infer::ClipPool& probe_pool, const train::TrainConfig& train_cfg,
                                      const eval::SuiteConfig& suite_cfg, std::span<const uint64_t> seeds,
                                      const std::filesystem::path& out_dir) {
  if (ladder.size() < 2) throw InvalidArgument("scaling suite needs at least 2 ladder entries");
  const std::vector<eval::SuiteCondition> conds = {{infer::DemoKind::Random, eval::LabelSource::Query},
                                                   {infer::DemoKind::InClass, eval::LabelSource::Query}};
  std::vector<ScalingRow> rows;
  for (uint64_t seed : seeds) {
    for (const auto& entry : ladder) {
      train::TrainConfig tc = train_cfg;
      tc.seed = seed;
      auto init = model::TransformerModel::init(entry.config, substream(seed, "init"));
      train::TrainOutput out;
      const bool write = !out_dir.empty();
      if (write) out.dir = out_dir / (entry.name + "_seed" + std::to_string(seed));
      const auto res = train::train(std::move(init), data, tc, write ? &out : nullptr);
      eval::SuiteConfig sc = suite_cfg;
      sc.seed = seed;
      const auto report = eval::run_condition_suite(res.model, cb, query_pool, probe_pool, conds, sc);
      ScalingRow row;
      row.size = entry.name;
      row.params = model::parameter_count(entry.config);
      row.seed = seed;
      row.val_loss = res.final_val_loss;
      const auto& in = report.row("in-class", eval::LabelSource::Query);
      const auto& rnd = report.row("random", eval::LabelSource::Query);
      row.v_acc_inclass = in.v_acc;
      row.v_acc_random = rnd.v_acc;
      row.p_acc_inclass = in.p_acc;
      row.p_acc_random = rnd.p_acc;
      row.gain = in.p_acc - rnd.p_acc;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace vidit::analysis
