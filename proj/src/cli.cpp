#include "vidit/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vidit/analysis.hpp"
#include "vidit/binary_io.hpp"
#include "vidit/error.hpp"
#include "vidit/rng.hpp"
#include "vidit/tokenizer.hpp"
#include "vidit/version.hpp"

namespace vidit::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::vector<DemoGridEntry> default_demo_grid() {
  return {{"none", infer::DemoKind::None, 0, 0},
          {"1x4", infer::DemoKind::InClass, 1, 4},
          {"2x4", infer::DemoKind::InClass, 2, 4},
          {"1x8", infer::DemoKind::InClass, 1, 8}};
}

RunConfig::RunConfig() : demo_grid(default_demo_grid()) {}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!keys.count(key)) throw ConfigError("unknown key in " + where + ": " + key);
  }
}

template <typename T>
void opt(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

infer::DemoKind kind_of(const json& j, const char* key, infer::DemoKind fallback) {
  return j.contains(key) ? infer::demo_kind_from_name(j.at(key).get<std::string>()) : fallback;
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    reject_unknown(j, {"out_dir", "seed", "world", "codebook", "model", "train", "eval", "demo_grid", "infer", "attn",
                       "scale"},
                   "run config");
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    opt(j, "seed", c.seed);
    if (j.contains("world")) {
      const auto& w = j.at("world");
      reject_unknown(w, {"n_per_class", "n_frames", "val_fraction", "test_fraction"}, "world");
      opt(w, "n_per_class", c.world.n_per_class);
      opt(w, "n_frames", c.world.n_frames);
      opt(w, "val_fraction", c.world.val_fraction);
      opt(w, "test_fraction", c.world.test_fraction);
    }
    if (j.contains("codebook")) {
      const auto& b = j.at("codebook");
      reject_unknown(b, {"k", "patch", "max_iterations", "tolerance", "max_frames"}, "codebook");
      opt(b, "k", c.codebook.k);
      opt(b, "patch", c.codebook.patch);
      opt(b, "max_iterations", c.codebook.max_iterations);
      opt(b, "tolerance", c.codebook.tolerance);
      opt(b, "max_frames", c.codebook.max_frames);
    }
    c.model.vocab = c.codebook.k + 2;
    if (j.contains("model")) {
      json m = j.at("model");
      if (!m.contains("vocab")) m["vocab"] = c.codebook.k + 2;
      c.model = model::ModelConfig::from_json(m.dump());
    }
    if (j.contains("train")) {
      if (j.at("train").contains("seed")) throw ConfigError("train.seed is derived from the root seed");
      c.train = train::TrainConfig::from_json(j.at("train").dump());
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e,
                     {"n_queries", "n_probe_queries", "query_frames", "gen_frames", "k", "frames_per_demo",
                      "condition_on_query_label", "probe_steps", "probe_lr", "probe_l2", "probe_min_per_class"},
                     "eval");
      opt(e, "n_queries", c.eval.n_queries);
      opt(e, "n_probe_queries", c.eval.n_probe_queries);
      opt(e, "query_frames", c.eval.query_frames);
      opt(e, "gen_frames", c.eval.gen_frames);
      opt(e, "k", c.eval.k);
      opt(e, "frames_per_demo", c.eval.frames_per_demo);
      opt(e, "condition_on_query_label", c.eval.condition_on_query_label);
      opt(e, "probe_steps", c.eval.probe.steps);
      opt(e, "probe_lr", c.eval.probe.lr);
      opt(e, "probe_l2", c.eval.probe.l2);
      opt(e, "probe_min_per_class", c.eval.probe.min_per_class);
    }
    if (j.contains("demo_grid")) {
      const auto& g = j.at("demo_grid");
      if (!g.is_array()) throw ConfigError("demo_grid must be an array");
      c.demo_grid.clear();
      for (const auto& e : g) {
        reject_unknown(e, {"name", "kind", "k", "frames_per_demo"}, "demo_grid entry");
        DemoGridEntry d;
        d.name = e.at("name").get<std::string>();
        d.kind = kind_of(e, "kind", infer::DemoKind::InClass);
        opt(e, "k", d.k);
        opt(e, "frames_per_demo", d.frames_per_demo);
        c.demo_grid.push_back(d);
      }
    }
    if (j.contains("infer")) {
      const auto& i = j.at("infer");
      reject_unknown(i, {"kind", "n", "sampling", "top_k", "temperature"}, "infer");
      c.infer.kind = kind_of(i, "kind", c.infer.kind);
      opt(i, "n", c.infer.n);
      if (i.contains("sampling")) {
        const auto s = i.at("sampling").get<std::string>();
        if (s != "greedy" && s != "top-k") throw ConfigError("infer.sampling must be greedy or top-k");
        c.infer.greedy = s == "greedy";
      }
      opt(i, "top_k", c.infer.top_k);
      opt(i, "temperature", c.infer.temperature);
    }
    if (j.contains("attn")) {
      const auto& a = j.at("attn");
      reject_unknown(a, {"kind", "n_queries"}, "attn");
      c.attn.kind = kind_of(a, "kind", c.attn.kind);
      opt(a, "n_queries", c.attn.n_queries);
    }
    if (j.contains("scale")) {
      const auto& s = j.at("scale");
      reject_unknown(s, {"sizes", "seeds"}, "scale");
      opt(s, "sizes", c.scale.sizes);
      opt(s, "seeds", c.scale.seeds);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.world.seed = c.train.seed = c.eval.seed = c.seed;
  c.validate();
  return c;
}

std::string RunConfig::to_json() const {
  json j;
  j["out_dir"] = out_dir.string();
  j["seed"] = seed;
  j["world"] = {{"n_per_class", world.n_per_class},
                {"n_frames", world.n_frames},
                {"val_fraction", world.val_fraction},
                {"test_fraction", world.test_fraction}};
  j["codebook"] = {{"k", codebook.k},
                   {"patch", codebook.patch},
                   {"max_iterations", codebook.max_iterations},
                   {"tolerance", codebook.tolerance},
                   {"max_frames", codebook.max_frames}};
  j["model"] = json::parse(model.to_json());
  json t = json::parse(train.to_json());
  t.erase("seed");
  j["train"] = t;
  j["eval"] = {{"n_queries", eval.n_queries},
               {"n_probe_queries", eval.n_probe_queries},
               {"query_frames", eval.query_frames},
               {"gen_frames", eval.gen_frames},
               {"k", eval.k},
               {"frames_per_demo", eval.frames_per_demo},
               {"condition_on_query_label", eval.condition_on_query_label},
               {"probe_steps", eval.probe.steps},
               {"probe_lr", eval.probe.lr},
               {"probe_l2", eval.probe.l2},
               {"probe_min_per_class", eval.probe.min_per_class}};
  json grid = json::array();
  for (const auto& g : demo_grid) {
    grid.push_back({{"name", g.name},
                    {"kind", infer::demo_kind_name(g.kind)},
                    {"k", g.k},
                    {"frames_per_demo", g.frames_per_demo}});
  }
  j["demo_grid"] = grid;
  j["infer"] = {{"kind", infer::demo_kind_name(infer.kind)},
                {"n", infer.n},
                {"sampling", infer.greedy ? "greedy" : "top-k"},
                {"top_k", infer.top_k},
                {"temperature", infer.temperature}};
  j["attn"] = {{"kind", infer::demo_kind_name(attn.kind)}, {"n_queries", attn.n_queries}};
  j["scale"] = {{"sizes", scale.sizes}, {"seeds", scale.seeds}};
  return j.dump(2) + "\n";
}

std::string RunConfig::hash() const {
  json j = json::parse(to_json());
  j.erase("out_dir");
  return hash_hex(fnv1a(j.dump()));
}

void RunConfig::validate() const {
  if (world.n_per_class < 10) throw ConfigError("world.n_per_class must be >= 10");
  if (world.n_frames < world::kMinClipFrames || world.n_frames > world::kMaxClipFrames) {
    throw ConfigError("world.n_frames out of range");
  }
  if (codebook.k < 2) throw ConfigError("codebook.k must be >= 2");
  if (codebook.patch < 1 || world::kFrameSize % codebook.patch != 0) {
    throw ConfigError("codebook.patch must divide the frame size");
  }
  if (codebook.max_frames < 0) throw ConfigError("codebook.max_frames must be >= 0");
  try {
    model.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (model.vocab != codebook.k + 2) throw ConfigError("model.vocab must equal codebook.k + 2");
  const int nt = (world::kFrameSize / codebook.patch) * (world::kFrameSize / codebook.patch);
  train.validate(model, nt);
  if (train.frames_per_sequence > world.n_frames) throw ConfigError("train.frames_per_sequence exceeds world.n_frames");
  eval.validate();
  if (eval.query_frames + eval.gen_frames > world.n_frames) throw ConfigError("eval query + generation exceed clip length");
  if (eval.frames_per_demo > world.n_frames) throw ConfigError("eval.frames_per_demo exceeds clip length");
  std::set<std::string> names;
  for (const auto& g : demo_grid) {
    if (!names.insert(g.name).second) throw ConfigError("duplicate demo_grid name: " + g.name);
    if (g.kind == infer::DemoKind::None ? g.k != 0 : (g.k < 1 || g.frames_per_demo < 1)) {
      throw ConfigError("invalid demo_grid entry: " + g.name);
    }
    if (g.frames_per_demo > world.n_frames) throw ConfigError("demo_grid entry longer than a clip: " + g.name);
  }
  if (infer.n < 1 || infer.top_k < 1 || !(infer.temperature >= 0)) throw ConfigError("invalid infer settings");
  if (attn.kind == infer::DemoKind::None || attn.n_queries < 1) throw ConfigError("invalid attn settings");
  if (scale.sizes.size() < 2 || scale.seeds.empty()) throw ConfigError("scale needs >= 2 sizes and >= 1 seed");
  for (const auto& s : scale.sizes) {
    if (s != "tiny" && s != "small" && s != "base") throw ConfigError("unknown ladder size: " + s);
  }
}

namespace {

struct Session {
  RunConfig cfg;
  fs::path out;
  std::string config_hash;
  std::optional<fs::path> checkpoint;
  std::ostream& log;
  std::vector<std::string> outputs;

  fs::path data_dir() const { return out / "data"; }
  fs::path codebook_path() const { return out / "codebook.vicb"; }
  fs::path checkpoint_path() const { return checkpoint ? *checkpoint : out / "train" / "final.vitc"; }

  void wrote(const fs::path& p) { outputs.push_back(fs::relative(p, out).generic_string()); }
  void text(const fs::path& p, const std::string& s) {
    io::write_text(p, s);
    wrote(p);
  }

  json stamp() const {
    json j;
    j["config_hash"] = config_hash;
    j["seed"] = cfg.seed;
    j["tool_version"] = kToolVersion;
    return j;
  }

  world::Manifest manifest() const { return world::load_manifest(data_dir()); }

  tok::Codebook codebook() const {
    const auto p = codebook_path();
    if (!fs::exists(p)) throw NotFound("codebook not found: " + p.string() + " (run fit-codebook)");
    return tok::Codebook::load(p);
  }

  model::Checkpoint load_model(const tok::Codebook& cb) const {
    const auto p = checkpoint_path();
    if (!fs::exists(p)) throw NotFound("checkpoint not found: " + p.string() + " (run train)");
    auto ck = model::load_checkpoint(p);
    const json meta = json::parse(ck.meta_json);
    const std::string want = hash_hex(cb.hash());
    if (!meta.contains("codebook_hash") || meta.at("codebook_hash").get<std::string>() != want) {
      throw InvalidArgument("checkpoint was trained with a different codebook (expected " + want + ")");
    }
    if (ck.model.config().vocab != cb.vocab_size()) throw InvalidArgument("checkpoint vocabulary does not match codebook");
    return ck;
  }
};

void cmd_gen_data(Session& s) {
  world::DatasetSpec spec = s.cfg.world;
  spec.seed = s.cfg.seed;
  const auto m = world::gen_dataset(spec, s.data_dir());
  s.wrote(s.data_dir() / "manifest.json");
  s.log << "gen-data: " << m.clips.size() << " clips -> " << s.data_dir().string() << "\n";
}

void cmd_fit_codebook(Session& s) {
  const auto m = s.manifest();
  std::vector<world::Frame> frames;
  for (const auto* rec : m.split(world::Split::Train)) {
    for (auto& f : world::load_clip(*rec, s.data_dir()).frames) {
      if (s.cfg.codebook.max_frames > 0 && static_cast<int>(frames.size()) >= s.cfg.codebook.max_frames) break;
      frames.push_back(std::move(f));
    }
  }
  tok::FitOptions opts;
  opts.max_iterations = s.cfg.codebook.max_iterations;
  opts.tolerance = s.cfg.codebook.tolerance;
  tok::FitReport rep;
  const auto cb = tok::fit_codebook(frames, s.cfg.codebook.k, s.cfg.codebook.patch, substream(s.cfg.seed, "codebook"),
                                    opts, &rep);
  cb.save(s.codebook_path());
  s.wrote(s.codebook_path());
  json r = s.stamp();
  r["codebook_hash"] = hash_hex(cb.hash());
  r["k"] = cb.size();
  r["patch"] = cb.patch();
  r["frames"] = frames.size();
  r["iterations"] = rep.iterations;
  r["inertia"] = rep.inertia;
  s.text(s.out / "codebook_report.json", r.dump(2) + "\n");
  s.log << "fit-codebook: K=" << cb.size() << " after " << rep.iterations << " iterations\n";
}

void cmd_train(Session& s) {
  const auto m = s.manifest();
  const auto cb = s.codebook();
  if (s.cfg.model.vocab != cb.vocab_size()) throw ConfigError("model.vocab does not match the codebook");
  const auto data = train::encode_dataset(m, s.data_dir(), cb);
  train::TrainConfig tc = s.cfg.train;
  tc.seed = s.cfg.seed;
  json meta = s.stamp();
  meta["codebook_hash"] = hash_hex(cb.hash());
  train::TrainOutput out;
  out.dir = s.out / "train";
  out.meta_json = meta.dump();
  std::ostream& log = s.log;
  out.on_step = [&log](const train::LossPoint& p) {
    if (p.val_loss) log << "step " << p.step << " train_loss " << p.train_loss << " val_loss " << *p.val_loss << "\n";
  };
  const auto init = model::TransformerModel::init(s.cfg.model, substream(s.cfg.seed, "init"));
  const auto res = train::train(init, data, tc, &out);
  s.wrote(out.dir / "final.vitc");
  s.wrote(out.dir / "loss.csv");
  json summary = s.stamp();
  summary["final_val_loss"] = res.final_val_loss;
  summary["unigram_entropy"] = train::unigram_entropy(data);
  summary["parameters"] = res.model.parameter_count();
  s.text(out.dir / "summary.json", summary.dump(2) + "\n");
}

struct Pools {
  infer::ClipPool query, probe;
};

Pools pools(const Session& s, const tok::Codebook& cb) {
  const auto m = s.manifest();
  return {infer::make_pool(m, s.data_dir(), world::Split::Test, cb),
          infer::make_pool(m, s.data_dir(), world::Split::Val, cb)};
}

eval::SuiteConfig suite_config(const Session& s) {
  eval::SuiteConfig sc = s.cfg.eval;
  sc.seed = s.cfg.seed;
  return sc;
}

void write_report(Session& s, const fs::path& dir, const eval::EvalReport& report) {
  s.text(dir / "report.csv", report.to_csv());
  json j = json::parse(report.to_json());
  const json stamp = s.stamp();
  for (const auto& [k, v] : stamp.items()) j[k] = v;
  s.text(dir / "report.json", j.dump(2) + "\n");
}

void cmd_eval(Session& s) {
  const auto cb = s.codebook();
  const auto ck = s.load_model(cb);
  const auto p = pools(s, cb);
  const auto conds = eval::default_conditions();
  const auto report = eval::run_condition_suite(ck.model, cb, p.query, p.probe, conds, suite_config(s));
  write_report(s, s.out / "eval", report);
  s.log << report.to_csv();
}

void cmd_probe(Session& s) {
  const auto cb = s.codebook();
  const auto ck = s.load_model(cb);
  const auto p = pools(s, cb);
  const auto conds = eval::default_conditions();
  std::vector<eval::ProbeOutcome> probes;
  eval::run_condition_suite(ck.model, cb, p.query, p.probe, conds, suite_config(s), &probes);
  std::ostringstream csv;
  csv << "condition,label_source,p_acc,n_train,n_test,loss_first,loss_last\n";
  json arr = json::array();
  for (const auto& o : probes) {
    const std::string cond(infer::demo_kind_name(o.condition.kind));
    const std::string src(eval::label_source_name(o.condition.source));
    csv << cond << ',' << src << ',' << o.p_acc << ',' << o.n_train << ',' << o.n_test << ','
        << o.probe.loss_history.front() << ',' << o.probe.loss_history.back() << '\n';
    arr.push_back({{"condition", cond},
                   {"label_source", src},
                   {"p_acc", o.p_acc},
                   {"weights", o.probe.weights},
                   {"bias", o.probe.bias},
                   {"mean", o.probe.mean},
                   {"scale", o.probe.scale}});
  }
  s.text(s.out / "probe" / "probes.csv", csv.str());
  json j = s.stamp();
  j["probes"] = arr;
  s.text(s.out / "probe" / "probes.json", j.dump() + "\n");
  s.log << csv.str();
}

void cmd_infer(Session& s) {
  const auto cb = s.codebook();
  const auto ck = s.load_model(cb);
  const auto m = s.manifest();
  const auto pool = infer::make_pool(m, s.data_dir(), world::Split::Test, cb);
  eval::SuiteConfig sc = suite_config(s);
  infer::DemonstrationSpec demo;
  demo.kind = s.cfg.infer.kind;
  demo.k = s.cfg.infer.kind == infer::DemoKind::None ? 0 : sc.k;
  demo.frames_per_demo = sc.frames_per_demo;
  const auto queries = eval::plan_queries(pool, s.cfg.infer.n, sc, demo, "infer");
  const auto& mcfg = ck.model.config();
  for (size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    infer::GenerationResult r;
    if (s.cfg.infer.greedy) {
      r = eval::run_query(ck.model, cb, pool, q, sc, false);
    } else {
      std::vector<std::vector<int>> demos;
      for (int idx : q.demos) {
        const auto& c = pool.clips[idx];
        demos.emplace_back(c.tokens.begin(), c.tokens.begin() + static_cast<ptrdiff_t>(sc.frames_per_demo) * pool.tokens_per_frame);
        r.demo_labels.push_back(c.label);
        r.demo_frames.push_back(sc.frames_per_demo);
      }
      const auto& qc = pool.clips[q.clip_index];
      const auto qb = std::span(qc.tokens).subspan(static_cast<size_t>(q.start) * pool.tokens_per_frame,
                                                   static_cast<size_t>(sc.query_frames) * pool.tokens_per_frame);
      const auto prompt = infer::build_prompt_tokens(demos, qb, pool.tokens_per_frame, cb.bos_id(),
                                                     mcfg.context_len - (mcfg.conditioning ? 1 : 0));
      std::optional<model::Condition> cond;
      if (mcfg.conditioning) {
        cond = sc.condition_on_query_label ? model::Condition::of(world::class_id(q.label)) : model::Condition::none();
      }
      const auto sampling =
          infer::Sampling::topk(s.cfg.infer.top_k, s.cfg.infer.temperature, substream(s.cfg.seed, "sampling", i));
      auto labels = r.demo_labels;
      auto frames = r.demo_frames;
      r = infer::generate(ck.model, prompt, sc.gen_frames, cb, sampling, false, cond);
      r.demo_labels = std::move(labels);
      r.demo_frames = std::move(frames);
      r.query_label = q.label;
      r.query_frames = sc.query_frames;
    }
    char name[32];
    std::snprintf(name, sizeof name, "result_%03zu", i);
    const fs::path base = s.out / "infer" / name;
    world::write_viml(fs::path(base.string() + ".viml"), r.generated_frames);
    s.wrote(fs::path(base.string() + ".viml"));
    s.text(fs::path(base.string() + ".json"), infer::result_sidecar_json(r, std::string(infer::demo_kind_name(demo.kind))));
  }
  s.log << "infer: " << queries.size() << " results -> " << (s.out / "infer").string() << "\n";
}

void cmd_attn(Session& s) {
  const auto cb = s.codebook();
  const auto ck = s.load_model(cb);
  const auto m = s.manifest();
  const auto pool = infer::make_pool(m, s.data_dir(), world::Split::Test, cb);
  const auto sum = analysis::run_attention_analysis(ck.model, cb, pool, s.cfg.attn.kind, s.cfg.attn.n_queries,
                                                    suite_config(s));
  s.text(s.out / "attn" / "records.csv", sum.to_csv());
  json j = json::parse(sum.summary_json());
  const json stamp = s.stamp();
  for (const auto& [k, v] : stamp.items()) j[k] = v;
  s.text(s.out / "attn" / "summary.json", j.dump(2) + "\n");
  s.log << j.dump(2) << "\n";
}

void cmd_scale(Session& s) {
  const auto cb = s.codebook();
  const auto m = s.manifest();
  const auto data = train::encode_dataset(m, s.data_dir(), cb);
  const auto p = pools(s, cb);
  std::vector<analysis::LadderEntry> ladder;
  for (const auto& e : analysis::default_ladder(s.cfg.model.vocab, s.cfg.model.context_len)) {
    for (const auto& name : s.cfg.scale.sizes) {
      if (name == e.name) ladder.push_back(e);
    }
  }
  const auto rows =
      analysis::scaling_suite(ladder, data, cb, p.query, p.probe, s.cfg.train, suite_config(s), s.cfg.scale.seeds,
                              s.out / "scale");
  s.text(s.out / "scale" / "scaling.csv", analysis::scaling_csv(rows));
  s.log << analysis::scaling_csv(rows);
}

void cmd_ablate(Session& s) {
  const auto cb = s.codebook();
  const auto ck = s.load_model(cb);
  const auto p = pools(s, cb);
  eval::EvalReport report;
  for (const auto& g : s.cfg.demo_grid) {
    eval::SuiteConfig sc = suite_config(s);
    if (g.kind != infer::DemoKind::None) {
      sc.k = g.k;
      sc.frames_per_demo = g.frames_per_demo;
    }
    const std::vector<eval::SuiteCondition> conds = {{g.kind, eval::LabelSource::Query}};
    auto r = eval::run_condition_suite(ck.model, cb, p.query, p.probe, conds, sc);
    r.rows[0].condition = g.name;
    report.rows.push_back(r.rows[0]);
  }
  write_report(s, s.out / "ablate", report);
  s.log << report.to_csv();
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfigError: return kExitConfig;
    case ErrorKind::kNotFound: return kExitNotFound;
    case ErrorKind::kInvalidArgument: return kExitInvalid;
    case ErrorKind::kIoError: return kExitIo;
    case ErrorKind::kTrainingFailure: return kExitTraining;
  }
  return kExitInternal;
}

fs::path resolve_out(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic-world video in-context imitation toolkit", "vidit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir, checkpoint;
  std::optional<uint64_t> seed;
  app.add_option("--config", config_path, "run configuration (JSON)");
  app.add_option("--seed", seed, "root seed (overrides the config)");
  app.add_option("--out", out_dir, "output directory (overrides the config)");
  app.add_option("--checkpoint", checkpoint, "model checkpoint (default <out>/train/final.vitc)");
  app.set_version_flag("--version", std::string(kToolVersion));

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate the synthetic clip dataset"},
      {"fit-codebook", "fit the patch codebook on training frames"},
      {"train", "train the transformer"},
      {"infer", "generate continuations and dump frames"},
      {"eval", "run the demonstration condition suite"},
      {"probe", "train probing classifiers on generated-span hiddens"},
      {"attn", "aggregate last-layer attention over prompt frames"},
      {"scale-suite", "train and evaluate the model-size ladder"},
      {"ablate-demos", "evaluate the demonstration-format grid"}};
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  fs::path out_path;
  try {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_json(io::read_text(config_path));
    if (seed) cfg.seed = *seed;
    cfg.world.seed = cfg.train.seed = cfg.eval.seed = cfg.seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    out_path = resolve_out(cfg.out_dir);
    Session s{cfg, out_path, cfg.hash(), std::nullopt, out, {}};
    if (!checkpoint.empty()) s.checkpoint = checkpoint;

    static const std::map<std::string, std::function<void(Session&)>> handlers = {
        {"gen-data", cmd_gen_data}, {"fit-codebook", cmd_fit_codebook}, {"train", cmd_train},
        {"infer", cmd_infer},       {"eval", cmd_eval},                 {"probe", cmd_probe},
        {"attn", cmd_attn},         {"scale-suite", cmd_scale},         {"ablate-demos", cmd_ablate}};
    handlers.at(sub)(s);

    json manifest = s.stamp();
    manifest["subcommand"] = sub;
    manifest["config"] = json::parse(cfg.to_json());
    manifest["outputs"] = s.outputs;
    io::write_text(s.out / ("run_" + sub + ".json"), manifest.dump(2) + "\n");
    return kExitOk;
  } catch (const Error& e) {
    json rec;
    rec["error"] = error_kind_name(e.kind());
    rec["message"] = e.what();
    rec["subcommand"] = sub;
    rec["tool_version"] = kToolVersion;
    err << rec.dump() << "\n";
    if (!out_path.empty()) {
      try {
        io::write_text(out_path / ("error_" + sub + ".json"), rec.dump(2) + "\n");
      } catch (const std::exception&) {
      }
    }
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    json rec;
    rec["error"] = "internal";
    rec["message"] = e.what();
    rec["subcommand"] = sub;
    rec["tool_version"] = kToolVersion;
    err << rec.dump() << "\n";
    return kExitInternal;
  }
}

}  // namespace vidit::cli
