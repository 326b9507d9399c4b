// Default acceptance run: criteria that fit a single CPU core in minutes.
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "report.hpp"
#include "vidit/analysis.hpp"
#include "vidit/cli.hpp"
#include "vidit/eval.hpp"
#include "vidit/inference.hpp"
#include "vidit/model.hpp"
#include "vidit/rng.hpp"
#include "vidit/tokenizer.hpp"
#include "vidit/trainer.hpp"
#include "vidit/worldgen.hpp"

using namespace vidit;
namespace fs = std::filesystem;
using acceptance::fmt;
using acceptance::Stopwatch;

namespace {

struct Scratch {
  fs::path path;
  Scratch() : path(fs::temp_directory_path() / "vidit_acceptance") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Scratch() { fs::remove_all(path); }
};

std::vector<int> random_ids(int n, int vocab, uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<int> ids(n);
  for (auto& v : ids) v = static_cast<int>(uniform_int(rng, 0, vocab - 1));
  return ids;
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
  return s;
}

// ---------------------------------------------------------------------------

void numerical_core(acceptance::Ledger& L) {
  Stopwatch sw;
  model::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_mlp = 64;
  c.vocab = 40;
  c.context_len = 128;
  c.init_std = 0.2;  // larger weights keep the probed gradients well above the difference noise
  const auto m = model::TransformerModel::init(c, 1);
  const auto ids = random_ids(48, 40, 2);
  const auto gc = model::grad_check(m, ids, 200, 3);

  // Causality: perturbing token t leaves rows < t bit-identical.
  bool causal = true;
  auto base_ids = random_ids(100, 40, 4);
  const auto ref = model::forward(m, base_ids, {true, true});
  for (int t : {1, 17, 50, 99}) {
    auto ids2 = base_ids;
    ids2[t] = (ids2[t] + 7) % 40;
    const auto tr = model::forward(m, ids2, {true, true});
    for (int i = 0; i < t; ++i) {
      for (int v = 0; v < c.vocab; ++v) causal &= ref.logits_row(i)[v] == tr.logits_row(i)[v];
      for (int k = 0; k < c.d_model; ++k) causal &= ref.hidden_row(i)[k] == tr.hidden_row(i)[k];
    }
  }

  // RoPE: <R_m q, R_n k> depends only on m - n.
  Rng rng = make_rng(5);
  double rope_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> q(16), k(16);
    double nq = 0, nk = 0;
    for (auto& v : q) nq += (v = static_cast<float>(normal(rng))) * v;
    for (auto& v : k) nk += (v = static_cast<float>(normal(rng))) * v;
    for (auto& v : q) v = static_cast<float>(v / std::sqrt(nq));
    for (auto& v : k) v = static_cast<float>(v / std::sqrt(nk));
    const int mpos = static_cast<int>(uniform_int(rng, 0, 500)), npos = static_cast<int>(uniform_int(rng, 0, 500));
    const int shift = static_cast<int>(uniform_int(rng, 1, 500));
    rope_err = std::max(rope_err, std::abs(dot(model::rope(q, mpos), model::rope(k, npos)) -
                                           dot(model::rope(q, mpos + shift), model::rope(k, npos + shift))));
  }

  // RMSNorm: rmsnorm(a x) = rmsnorm(x) for a > 0.
  double norm_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> x(32), g(32);
    for (auto& v : x) v = static_cast<float>(normal(rng));
    for (auto& v : g) v = static_cast<float>(1 + 0.1 * normal(rng));
    const double a = std::exp(uniform01(rng) * 8 - 4);
    std::vector<float> ax(x);
    for (auto& v : ax) v = static_cast<float>(a * v);
    const auto y = model::rmsnorm(x, g, 0.0), ya = model::rmsnorm(ax, g, 0.0);
    for (size_t i = 0; i < y.size(); ++i) norm_err = std::max(norm_err, double(std::abs(y[i] - ya[i])));
  }

  // Attention rows: causal support summing to one.
  double row_err = 0;
  bool masked = true;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      for (int r = 0; r < ref.internal_rows; ++r) {
        double s = 0;
        for (int col = 0; col < ref.internal_rows; ++col) {
          const float a = ref.attn(l, h, r, col);
          if (col > r) masked &= a == 0.0f;
          s += a;
        }
        row_err = std::max(row_err, std::abs(s - 1.0));
      }
    }
  }
  const double secs = sw.seconds();
  const bool pass = gc.max_rel_error < 1e-3 && gc.probes.size() == 200 && causal && rope_err <= 1e-6 &&
                    norm_err <= 1e-6 && row_err <= 1e-5 && masked && secs < 60;
  std::ostringstream d;
  d << "grad max rel err " << fmt("%.3g", gc.max_rel_error) << " (<1e-3, 200 probes); causality "
    << (causal ? "bit-exact" : "BROKEN") << "; rope offset err " << fmt("%.2g", rope_err) << "; rmsnorm scale err "
    << fmt("%.2g", norm_err) << " (<=1e-6); attention row err " << fmt("%.2g", row_err) << " (<=1e-5); "
    << fmt("%.1f s", secs) << " (<60 s)";
  L.record(1, "numerical core", pass, d.str());
}

// ---------------------------------------------------------------------------

struct WorldData {
  world::Manifest manifest;
  fs::path dir;
  tok::Codebook codebook;
};

WorldData tokenizer(acceptance::Ledger& L, const fs::path& root) {
  WorldData w;
  w.dir = root / "data";
  world::DatasetSpec spec;
  spec.seed = 0;
  w.manifest = world::gen_dataset(spec, w.dir);

  Stopwatch sw;
  std::vector<world::Frame> train_frames;
  for (const auto* rec : w.manifest.split(world::Split::Train)) {
    for (auto& f : world::load_clip(*rec, w.dir).frames) train_frames.push_back(std::move(f));
  }
  w.codebook = tok::fit_codebook(train_frames, 512, 4, substream(0, "codebook"));

  // Held-out: the first 200 test-split frames.
  std::vector<world::Frame> held;
  for (const auto* rec : w.manifest.split(world::Split::Test)) {
    for (auto& f : world::load_clip(*rec, w.dir).frames) {
      if (held.size() < 200) held.push_back(std::move(f));
    }
  }
  double se = 0;
  size_t n = 0;
  for (const auto& f : held) {
    const auto r = tok::decode_tokens(tok::encode_frame(f, w.codebook), w.codebook);
    for (size_t i = 0; i < f.pixels.size(); ++i, ++n) {
      const double d = double(f.pixels[i]) - r.pixels[i];
      se += d * d;
    }
  }
  const double mse = se / static_cast<double>(n);

  Rng rng = make_rng(77);
  int agree = 0;
  const int dim = w.codebook.dim();
  for (int t = 0; t < 1000; ++t) {
    std::vector<float> p(dim);
    for (auto& v : p) v = static_cast<float>(uniform01(rng));
    int best = 0;
    double best_d = INFINITY;
    for (int k = 0; k < w.codebook.size(); ++k) {
      double d = 0;
      const auto code = w.codebook.code(k);
      for (int i = 0; i < dim; ++i) d += (double(p[i]) - code[i]) * (double(p[i]) - code[i]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    agree += tok::nearest_code(p, w.codebook) == best;
  }
  const double secs = sw.seconds();
  std::ostringstream d;
  d << "round-trip MSE " << fmt("%.5f", mse) << " on " << held.size() << " held-out frames (<0.01); "
    << "nearest-code agreement " << agree << "/1000 (exact); " << fmt("%.1f s", secs) << " (<120 s)";
  L.record(2, "tokenizer", mse < 0.01 && held.size() == 200 && agree == 1000 && secs < 120, d.str());
  return w;
}

// ---------------------------------------------------------------------------

model::TransformerModel training(acceptance::Ledger& L, const WorldData& w, const fs::path& root) {
  Stopwatch sw;
  const auto data = train::encode_dataset(w.manifest, w.dir, w.codebook);
  const auto tiny = analysis::default_ladder(w.codebook.vocab_size(), 1040).front();
  train::TrainConfig cfg;
  cfg.total_steps = 2000;
  cfg.batch_size = 4;
  cfg.eval_every = 500;
  cfg.seed = 0;
  train::TrainOutput out;
  out.dir = root / "train";
  out.on_step = [](const train::LossPoint& p) {
    if (p.val_loss) std::printf("  step %d train %.4f val %.4f\n", p.step, p.train_loss, *p.val_loss), std::fflush(stdout);
  };
  auto res = train::train(model::TransformerModel::init(tiny.config, substream(0, "init")), data, cfg, &out);
  const double baseline = train::unigram_entropy(data);
  const double secs = sw.seconds();
  std::ostringstream d;
  d << "tiny model, 2000 steps at batch 4: val loss " << fmt("%.4f", res.final_val_loss)
    << " < unigram entropy " << fmt("%.4f", baseline) << " nats; " << fmt("%.0f s", secs) << " (<600 s)";
  L.record(3, "training sanity", res.final_val_loss < baseline && secs < 600, d.str());
  return std::move(res.model);
}

// ---------------------------------------------------------------------------

void metrics(acceptance::Ledger& L) {
  Rng rng = make_rng(8);
  std::ostringstream d;
  bool pass = true;

  std::vector<std::vector<double>> a(200, std::vector<double>(4));
  for (auto& r : a)
    for (auto& v : r) v = normal(rng);
  const double same = eval::frechet_distance(a, a);
  pass &= std::abs(same) <= 1e-8;
  d << "frechet(identical) " << fmt("%.2g", same) << " (|.|<=1e-8); ";

  // Closed form: tr sqrt(S1 S2) for 2x2 SPD = sqrt(tr(S1 S2) + 2 sqrt(det S1 det S2)).
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    auto spd = [&] {
      const double p = normal(rng), q = normal(rng), r = normal(rng), s = normal(rng);
      return std::vector<double>{p * p + q * q + 0.1, p * r + q * s, p * r + q * s, r * r + s * s + 0.1};
    };
    const auto s1 = spd(), s2 = spd();
    const std::vector<double> m1 = {normal(rng), normal(rng)}, m2 = {normal(rng), normal(rng)};
    const double tr12 = s1[0] * s2[0] + s1[1] * s2[2] + s1[2] * s2[1] + s1[3] * s2[3];
    const double det1 = s1[0] * s1[3] - s1[1] * s1[2], det2 = s2[0] * s2[3] - s2[1] * s2[2];
    const double dm = (m1[0] - m2[0]) * (m1[0] - m2[0]) + (m1[1] - m2[1]) * (m1[1] - m2[1]);
    const double expect = dm + s1[0] + s1[3] + s2[0] + s2[3] - 2 * std::sqrt(tr12 + 2 * std::sqrt(det1 * det2));
    const double got = eval::gaussian_frechet(m1, s1, m2, s2);
    worst = std::max(worst, std::abs(got - expect) / std::max(1.0, std::abs(expect)));
  }
  pass &= worst <= 1e-8;
  d << "closed-form rel err " << fmt("%.2g", worst) << "; ";

  world::Frame f0, f1;
  std::fill(f0.pixels.begin(), f0.pixels.end(), 0.25f);
  std::fill(f1.pixels.begin(), f1.pixels.end(), 0.75f);
  const std::vector<world::Frame> g = {f0}, h = {f1};
  const double p_same = eval::psnr(g, g), p_half = eval::psnr(g, h);
  const double expect_half = 10 * std::log10(1 / 0.25);
  pass &= p_same == 100.0 && std::abs(p_half - expect_half) <= 1e-9;
  d << "psnr identical " << p_same << " dB, offset 0.5 " << fmt("%.6f", p_half) << " dB; ";

  // Separable: well-separated class means. Permuted: labels shuffled on pure noise.
  auto traces = [&](int per_class, double sep, uint64_t seed) {
    Rng r = make_rng(seed);
    std::vector<std::vector<double>> centers(6, std::vector<double>(16));
    for (auto& cc : centers)
      for (auto& v : cc) v = sep * normal(r);
    std::vector<eval::Trace> out;
    for (int c = 0; c < 6; ++c) {
      for (int i = 0; i < per_class; ++i) {
        eval::Trace t;
        t.label = c;
        for (int k = 0; k < 16; ++k) t.feature.push_back(centers[c][k] + normal(r));
        out.push_back(std::move(t));
      }
    }
    return out;
  };
  eval::ProbeConfig pc;
  const auto sep_train = traces(50, 8.0, 1), sep_test = traces(50, 8.0, 1);
  const double sep_acc = eval::p_acc(eval::train_probe(sep_train, 6, pc), sep_test);
  double perm = 0;
  for (uint64_t s = 0; s < 5; ++s) {
    auto tr = traces(50, 0.0, 10 + s), te = traces(100, 0.0, 20 + s);
    Rng r = make_rng(30 + s);
    for (auto* set : {&tr, &te}) {
      for (size_t i = set->size(); i > 1; --i) std::swap((*set)[i - 1].label, (*set)[uniform_int(r, 0, i - 1)].label);
    }
    pc.seed = s;
    perm += eval::p_acc(eval::train_probe(tr, 6, pc), te);
  }
  perm /= 5;
  pass &= sep_acc == 1.0 && std::abs(perm - 1.0 / 6) <= 0.05;
  d << "probe separable " << fmt("%.3f", sep_acc) << " (=1), permuted " << fmt("%.3f", perm) << " (1/6+-0.05)";
  L.record(8, "metrics", pass, d.str());
}

// ---------------------------------------------------------------------------

void attention(acceptance::Ledger& L, const model::TransformerModel& m, const WorldData& w) {
  const auto pool = infer::make_pool(w.manifest, w.dir, world::Split::Test, w.codebook);
  eval::SuiteConfig cfg;
  cfg.seed = 0;
  const auto plan = eval::plan_queries(pool, 6, cfg, {infer::DemoKind::InClass, 1, 8, 0}, "attn");
  double worst = 0;
  for (const auto& q : plan) {
    const auto r = eval::run_query(m, w.codebook, pool, q, cfg, true);
    const auto prof = analysis::attention_frame_aggregate(r);
    for (size_t t = 0; t < prof.mass.size(); ++t) {
      const double in = std::accumulate(r.attention[t].begin(), r.attention[t].end(), 0.0);
      const double out = std::accumulate(prof.mass[t].begin(), prof.mass[t].end(), 0.0);
      worst = std::max(worst, std::abs(in - out));
    }
  }
  const auto sum = analysis::run_attention_analysis(m, w.codebook, pool, infer::DemoKind::Random, 60, cfg);
  std::ostringstream d;
  d << "mass preservation err " << fmt("%.2g", worst) << " (<=1e-6); demo-minus-query mass: success "
    << fmt("%.4f", sum.diff_success) << " (n=" << sum.n_success << "), failure " << fmt("%.4f", sum.diff_failure)
    << " (n=" << sum.n_failure << ") [reported only]";
  L.record(9, "attention analysis", worst <= 1e-6 && sum.records.size() == 60, d.str());
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel.rfind("run_", 0) == 0) {
      auto j = nlohmann::json::parse(bytes);
      j["config"].erase("out_dir");
      bytes = j.dump();
    }
    out[rel] = std::move(bytes);
  }
  return out;
}

void reproducibility(acceptance::Ledger& L, const model::TransformerModel& m, const fs::path& root) {
  const std::string cfg_text = R"({
    "seed": 3,
    "world": {"n_per_class": 40, "n_frames": 16},
    "codebook": {"k": 32, "max_frames": 400},
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_mlp": 32},
    "train": {"total_steps": 20, "batch_size": 2, "frames_per_sequence": 4, "eval_every": 10, "val_sequences": 4},
    "eval": {"n_queries": 18, "n_probe_queries": 60, "probe_min_per_class": 2},
    "attn": {"n_queries": 6},
    "infer": {"n": 2},
    "scale": {"sizes": ["tiny", "small"], "seeds": [0]}
  })";
  auto j = nlohmann::json::parse(cfg_text);
  {
    std::ofstream(root / "repro.json") << j.dump();
  }
  const std::vector<std::string> subs = {"gen-data", "fit-codebook", "train", "infer",       "eval",
                                         "probe",    "attn",         "ablate-demos", "scale-suite"};
  bool ok = true;
  std::string failed;
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* name : {"a", "b"}) {
    for (const auto& sub : subs) {
      std::ostringstream o, e;
      std::vector<std::string> args = {"--config", (root / "repro.json").string(), "--out", (root / name).string(), sub};
      if (cli::run(args, o, e) != 0) {
        ok = false;
        failed += sub + " ";
      }
    }
    runs.push_back(tree(root / name));
  }
  int mismatched = 0;
  for (const auto& [k, v] : runs[0]) mismatched += !runs[1].count(k) || runs[1].at(k) != v;
  ok &= runs[0].size() == runs[1].size() && mismatched == 0;

  const auto bytes = model::serialize_checkpoint(m, R"({"note":"acceptance"})");
  const auto back = model::deserialize_checkpoint(bytes);
  const bool ck_mem = model::serialize_checkpoint(back.model, back.meta_json) == bytes;
  model::save_checkpoint(root / "rt.vitc", m, R"({"note":"acceptance"})");
  const auto loaded = model::load_checkpoint(root / "rt.vitc");
  const bool ck_file = loaded.model.params() == m.params() && model::serialize_checkpoint(loaded.model, loaded.meta_json) == bytes;
  std::ostringstream d;
  d << subs.size() << " subcommands x 2 runs: " << runs[0].size() << " files, " << mismatched << " differ"
    << (failed.empty() ? "" : "; failed: " + failed) << "; checkpoint round-trip "
    << (ck_mem && ck_file ? "byte-exact" : "MISMATCH");
  L.record(10, "reproducibility", ok && ck_mem && ck_file, d.str());
}

// Desk-scale look at the trend criteria on the tiny model; not a verdict.
void condition_trend(acceptance::Ledger& L, const model::TransformerModel& m, const WorldData& w) {
  const auto qpool = infer::make_pool(w.manifest, w.dir, world::Split::Test, w.codebook);
  const auto ppool = infer::make_pool(w.manifest, w.dir, world::Split::Val, w.codebook);
  eval::SuiteConfig cfg;
  cfg.seed = 0;
  const auto conds = eval::default_conditions();
  const auto rep = eval::run_condition_suite(m, w.codebook, qpool, ppool, conds, cfg);
  for (const auto& r : rep.rows) {
    std::ostringstream d;
    d << "tiny model " << r.condition << " (" << eval::label_source_name(r.source) << " labels): V-Acc "
      << fmt("%.3f", r.v_acc) << " P-Acc " << fmt("%.3f", r.p_acc) << " PSNR " << fmt("%.2f", r.psnr_db)
      << " Frechet " << fmt("%.3f", r.frechet);
    L.info(d.str());
  }
}

}  // namespace

int main() {
  acceptance::Ledger L;
  Scratch scratch;
  numerical_core(L);
  const auto w = tokenizer(L, scratch.path);
  const auto m = training(L, w, scratch.path);
  metrics(L);
  attention(L, m, w);
  condition_trend(L, m, w);
  reproducibility(L, m, scratch.path);
  L.info("criteria 4-7 run in acceptance_heavy (enable with -DVIDIT_HEAVY_ACCEPTANCE=ON)");
  return L.finish();
}
