#include "vidit/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "vidit/binary_io.hpp"
#include "vidit/error.hpp"
#include "vidit/rng.hpp"

namespace vidit::train {

using model::Condition;
using model::ParamMap;
using model::TransformerModel;

void TrainConfig::validate(const model::ModelConfig& mcfg, int tokens_per_frame) const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (!(peak_lr > 0)) throw ConfigError("peak_lr must be > 0");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  for (double b : adam_betas) {
    if (!(b >= 0 && b < 1)) throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
  if (frames_per_sequence < 1) throw ConfigError("frames_per_sequence must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (val_sequences < 1) throw ConfigError("val_sequences must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(cond_dropout >= 0 && cond_dropout <= 1)) throw ConfigError("cond_dropout must lie in [0, 1]");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  const int rows = frames_per_sequence * tokens_per_frame + 2 + (mcfg.conditioning ? 1 : 0);
  if (rows > mcfg.context_len) {
    throw ConfigError("training sequence of " + std::to_string(rows) + " rows exceeds context_len " +
                      std::to_string(mcfg.context_len));
  }
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["batch_size"] = batch_size;
  j["total_steps"] = total_steps;
  j["peak_lr"] = peak_lr;
  j["warmup_steps"] = warmup_steps;
  j["weight_decay"] = weight_decay;
  j["adam_betas"] = adam_betas;
  j["adam_eps"] = adam_eps;
  j["grad_clip"] = grad_clip;
  j["seed"] = seed;
  j["frames_per_sequence"] = frames_per_sequence;
  j["eval_every"] = eval_every;
  j["val_sequences"] = val_sequences;
  j["checkpoint_every"] = checkpoint_every;
  j["cond_dropout"] = cond_dropout;
  j["threads"] = threads;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  static const std::set<std::string> kKeys = {
      "batch_size", "total_steps",         "peak_lr",    "warmup_steps",  "weight_decay",
      "adam_betas", "adam_eps",            "grad_clip",  "seed",          "frames_per_sequence",
      "eval_every", "val_sequences",       "checkpoint_every", "cond_dropout", "threads"};
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("train config must be an object");
    for (const auto& [key, _] : j.items()) {
      if (!kKeys.count(key)) throw ConfigError("unknown train config key: " + key);
    }
    auto opt = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    opt("batch_size", c.batch_size);
    opt("total_steps", c.total_steps);
    opt("peak_lr", c.peak_lr);
    opt("warmup_steps", c.warmup_steps);
    opt("weight_decay", c.weight_decay);
    opt("adam_betas", c.adam_betas);
    opt("adam_eps", c.adam_eps);
    opt("grad_clip", c.grad_clip);
    opt("seed", c.seed);
    opt("frames_per_sequence", c.frames_per_sequence);
    opt("eval_every", c.eval_every);
    opt("val_sequences", c.val_sequences);
    opt("checkpoint_every", c.checkpoint_every);
    opt("cond_dropout", c.cond_dropout);
    opt("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 1) throw InvalidArgument("lr_at: step must be >= 1");
  const double w = cfg.warmup_steps;
  if (step <= cfg.warmup_steps) return cfg.peak_lr * step / w;
  return cfg.peak_lr * std::sqrt(w / step);
}

int window_start(int clip_frames, int n_frames, uint64_t seed) {
  if (n_frames < 1 || clip_frames < n_frames) {
    throw InvalidArgument("clip of " + std::to_string(clip_frames) + " frames is shorter than the " +
                          std::to_string(n_frames) + "-frame window");
  }
  Rng rng = make_rng(seed);
  return static_cast<int>(uniform_int(rng, 0, clip_frames - n_frames));
}

tok::TokenSequence build_training_sequence(const world::VideoClip& clip, const tok::Codebook& cb, int n_frames,
                                           uint64_t seed) {
  const int start = window_start(static_cast<int>(clip.frames.size()), n_frames, seed);
  return tok::encode_frames(std::span(clip.frames).subspan(start, n_frames), cb, true);
}

TrainingData encode_dataset(const world::Manifest& manifest, const std::filesystem::path& dir,
                            const tok::Codebook& cb) {
  TrainingData data;
  data.tokens_per_frame = cb.tokens_per_frame();
  data.bos = cb.bos_id();
  data.eos = cb.eos_id();
  for (const auto& rec : manifest.clips) {
    if (rec.split == world::Split::Test) continue;
    const world::VideoClip clip = world::load_clip(rec, dir);
    EncodedClip e;
    e.clip_id = rec.clip_id;
    e.label = rec.label;
    e.n_frames = static_cast<int>(clip.frames.size());
    e.body = tok::encode_clip(clip, cb, false).ids;
    (rec.split == world::Split::Train ? data.train : data.val).push_back(std::move(e));
  }
  return data;
}

std::vector<int> sequence_window(const TrainingData& data, const EncodedClip& clip, int start, int n_frames) {
  if (start < 0 || start + n_frames > clip.n_frames) throw InvalidArgument("window outside the clip");
  const int nt = data.tokens_per_frame;
  std::vector<int> ids;
  ids.reserve(static_cast<size_t>(n_frames) * nt + 2);
  ids.push_back(data.bos);
  ids.insert(ids.end(), clip.body.begin() + static_cast<ptrdiff_t>(start) * nt,
             clip.body.begin() + static_cast<ptrdiff_t>(start + n_frames) * nt);
  ids.push_back(data.eos);
  return ids;
}

double unigram_entropy(const TrainingData& data) {
  std::vector<double> counts;
  double total = 0;
  for (const auto& c : data.train) {
    for (int id : c.body) {
      if (id >= static_cast<int>(counts.size())) counts.resize(id + 1, 0.0);
      counts[id] += 1;
      total += 1;
    }
  }
  if (total == 0) throw InvalidArgument("no training tokens");
  double h = 0;
  for (double n : counts) {
    if (n > 0) h -= n / total * std::log(n / total);
  }
  return h;
}

namespace {

struct Sample {
  std::vector<int> ids;
  std::optional<Condition> cond;
};

std::optional<Condition> condition_for(const model::ModelConfig& mcfg, world::Action label, bool drop) {
  if (!mcfg.conditioning) return std::nullopt;
  return drop ? Condition::none() : Condition::of(world::class_id(label));
}

std::vector<Sample> draw_batch(const TrainingData& data, const TrainConfig& cfg, const model::ModelConfig& mcfg,
                               int step) {
  Rng rng = make_rng(substream(cfg.seed, "data", static_cast<uint64_t>(step)));
  std::vector<Sample> batch(cfg.batch_size);
  for (auto& s : batch) {
    const auto& clip = data.train[uniform_int(rng, 0, static_cast<int64_t>(data.train.size()) - 1)];
    const int start = static_cast<int>(uniform_int(rng, 0, clip.n_frames - cfg.frames_per_sequence));
    const bool drop = uniform01(rng) < cfg.cond_dropout;
    s.ids = sequence_window(data, clip, start, cfg.frames_per_sequence);
    s.cond = condition_for(mcfg, clip.label, drop);
  }
  return batch;
}

std::vector<Sample> validation_set(const TrainingData& data, const TrainConfig& cfg, const model::ModelConfig& mcfg) {
  const auto& pool = data.val.empty() ? data.train : data.val;
  Rng rng = make_rng(substream(cfg.seed, "val"));
  std::vector<Sample> out(cfg.val_sequences);
  for (auto& s : out) {
    const auto& clip = pool[uniform_int(rng, 0, static_cast<int64_t>(pool.size()) - 1)];
    const int start = static_cast<int>(uniform_int(rng, 0, clip.n_frames - cfg.frames_per_sequence));
    s.ids = sequence_window(data, clip, start, cfg.frames_per_sequence);
    s.cond = condition_for(mcfg, clip.label, false);
  }
  return out;
}

// Runs fn(i, worker) for i in [0, n) with worker w taking i = w, w + T, ...
template <typename Fn>
void parallel_strided(int n, int threads, Fn fn) {
  const int t = std::min(threads, n);
  if (t <= 1) {
    for (int i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(t);
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += t) fn(i, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void add_into(ParamMap<float>& dst, const ParamMap<float>& src) {
  for (auto& [name, t] : dst) {
    const auto& s = src.at(name).data;
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += s[i];
  }
}

std::string checkpoint_meta(const TrainOutput* out, const TrainConfig& cfg, int step) {
  nlohmann::ordered_json meta = nlohmann::ordered_json::parse(out ? out->meta_json : "{}");
  meta["train_config"] = nlohmann::ordered_json::parse(cfg.to_json());
  meta["step"] = step;
  return meta.dump();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double validation_loss(const TransformerModel& model, const TrainingData& data, const TrainConfig& cfg) {
  const auto set = validation_set(data, cfg, model.config());
  std::vector<double> losses(set.size());
  parallel_strided(static_cast<int>(set.size()), cfg.threads,
                   [&](int i, int) { losses[i] = model::loss(model, set[i].ids, set[i].cond); });
  double total = 0;
  for (double l : losses) total += l;
  return total / static_cast<double>(losses.size());
}

std::string loss_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream os;
  os << "step,train_loss,val_loss,lr\n";
  for (const auto& p : curve) {
    os << p.step << ',' << fmt(p.train_loss) << ',' << (p.val_loss ? fmt(*p.val_loss) : "") << ','
       << fmt(p.lr) << '\n';
  }
  return os.str();
}

TrainResult train(TransformerModel model, const TrainingData& data, const TrainConfig& cfg, const TrainOutput* out) {
  const auto& mcfg = model.config();
  cfg.validate(mcfg, data.tokens_per_frame);
  model.check();
  if (data.train.empty()) throw InvalidArgument("training split is empty");
  for (const auto& c : data.train) {
    if (c.n_frames < cfg.frames_per_sequence) throw InvalidArgument("training clip shorter than frames_per_sequence");
  }
  for (const auto& c : data.val) {
    if (c.n_frames < cfg.frames_per_sequence) throw InvalidArgument("validation clip shorter than frames_per_sequence");
  }

  auto save = [&](const std::string& file, const TransformerModel& m, int step) {
    if (out) model::save_checkpoint(out->dir / file, m, checkpoint_meta(out, cfg, step));
  };

  ParamMap<float>& params = model.params();
  ParamMap<float> m1 = model::zeros_like(params);
  ParamMap<float> m2 = model::zeros_like(params);
  const int workers = std::min(cfg.threads, cfg.batch_size);
  std::vector<ParamMap<float>> worker_grads(workers, model::zeros_like(params));
  const double b1 = cfg.adam_betas[0];
  const double b2 = cfg.adam_betas[1];

  TrainResult result;
  for (int step = 1; step <= cfg.total_steps; ++step) {
    const auto batch = draw_batch(data, cfg, mcfg, step);
    for (auto& g : worker_grads) {
      for (auto& [_, t] : g) std::fill(t.data.begin(), t.data.end(), 0.0f);
    }
    std::vector<double> losses(batch.size());
    const double w = 1.0 / static_cast<double>(batch.size());
    parallel_strided(static_cast<int>(batch.size()), workers, [&](int i, int wk) {
      losses[i] = model::loss_and_grad(model, batch[i].ids, worker_grads[wk], batch[i].cond, w);
    });
    for (int k = 1; k < workers; ++k) add_into(worker_grads[0], worker_grads[k]);
    ParamMap<float>& grads = worker_grads[0];

    double train_loss = 0;
    for (double l : losses) train_loss += l;
    train_loss *= w;
    double sq = 0;
    for (const auto& [_, t] : grads) {
      for (float g : t.data) sq += double(g) * g;
    }
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(train_loss) || !std::isfinite(gnorm)) {
      // Parameters still hold the last good state.
      save("last_good.vitc", model, step - 1);
      throw TrainingFailure("non-finite loss or gradient at step " + std::to_string(step));
    }
    const double clip = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

    const double lr = lr_at(step, cfg);
    const double c1 = 1.0 - std::pow(b1, step);
    const double c2 = 1.0 - std::pow(b2, step);
    for (auto& [name, p] : params) {
      auto& g = grads.at(name).data;
      auto& m = m1.at(name).data;
      auto& v = m2.at(name).data;
      const double decay = model::decays(name) ? lr * cfg.weight_decay : 0.0;
      for (size_t i = 0; i < p.data.size(); ++i) {
        const double gi = g[i] * clip;
        const double mi = b1 * m[i] + (1 - b1) * gi;
        const double vi = b2 * v[i] + (1 - b2) * gi * gi;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        double pi = p.data[i];
        pi -= decay * pi;
        pi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
        p.data[i] = static_cast<float>(pi);
      }
    }

    LossPoint point{step, train_loss, std::nullopt, lr};
    if (step % cfg.eval_every == 0 || step == cfg.total_steps) point.val_loss = validation_loss(model, data, cfg);
    result.curve.push_back(point);
    if (out && out->on_step) out->on_step(point);
    if (out && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_step%06d.vitc", step);
      save(name, model, step);
      io::write_text(out->dir / "loss.csv", loss_csv(result.curve));
    }
  }
  result.final_val_loss = cfg.total_steps > 0 ? *result.curve.back().val_loss : validation_loss(model, data, cfg);
  if (out) {
    save("final.vitc", model, cfg.total_steps);
    io::write_text(out->dir / "loss.csv", loss_csv(result.curve));
  }
  result.model = std::move(model);
  return result;
}

}  // namespace vidit::train
