#include "vidit/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "vidit/error.hpp"

namespace vidit::infer {

std::string_view demo_kind_name(DemoKind k) {
  switch (k) {
    case DemoKind::None: return "none";
    case DemoKind::Random: return "random";
    case DemoKind::InClass: return "in-class";
    case DemoKind::Contrastive: return "contrastive";
  }
  return "?";
}

DemoKind demo_kind_from_name(std::string_view name) {
  for (DemoKind k : {DemoKind::None, DemoKind::Random, DemoKind::InClass, DemoKind::Contrastive}) {
    if (demo_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown demonstration kind: " + std::string(name));
}

void DemonstrationSpec::validate(int query_frames, int gen_frames, int context_frames) const {
  if (kind == DemoKind::None && k != 0) throw InvalidArgument("kind=none requires k=0");
  if (kind != DemoKind::None && k < 1) throw InvalidArgument("demonstrations need k >= 1");
  if (k > 0 && frames_per_demo < 1) throw InvalidArgument("frames_per_demo must be >= 1");
  if (query_frames < 1 || gen_frames < 1) throw InvalidArgument("query and generation need >= 1 frame");
  if (k * frames_per_demo + query_frames + gen_frames > context_frames) {
    throw InvalidArgument("demonstrations, query and generation exceed the context");
  }
}

void ClipPool::add(PoolClip clip) {
  if (tokens_per_frame <= 0 || clip.tokens.size() != clip.frames.size() * static_cast<size_t>(tokens_per_frame)) {
    throw InvalidArgument("pool clip tokens do not match its frames");
  }
  by_class[world::class_id(clip.label)].push_back(static_cast<int>(clips.size()));
  clips.push_back(std::move(clip));
}

std::span<const int> ClipPool::frame_tokens(int clip_index, int frame) const {
  const auto& c = clips.at(clip_index);
  if (frame < 0 || frame >= static_cast<int>(c.frames.size())) throw InvalidArgument("frame index out of range");
  return std::span(c.tokens).subspan(static_cast<size_t>(frame) * tokens_per_frame, tokens_per_frame);
}

ClipPool make_pool(const world::Manifest& manifest, const std::filesystem::path& dir, world::Split split,
                   const tok::Codebook& cb) {
  ClipPool pool;
  pool.tokens_per_frame = cb.tokens_per_frame();
  for (const auto* rec : manifest.split(split)) {
    world::VideoClip clip = world::load_clip(*rec, dir);
    PoolClip p;
    p.clip_id = rec->clip_id;
    p.label = rec->label;
    p.tokens = tok::encode_clip(clip, cb, false).ids;
    p.frames = std::move(clip.frames);
    pool.add(std::move(p));
  }
  return pool;
}

std::vector<int> sample_demonstration(const DemonstrationSpec& spec, const ClipPool& pool, world::Action query_label,
                                      int query_clip_id) {
  std::vector<int> chosen;
  if (spec.kind == DemoKind::None) {
    if (spec.k != 0) throw InvalidArgument("kind=none requires k=0");
    return chosen;
  }
  if (spec.k < 1) throw InvalidArgument("demonstrations need k >= 1");
  Rng rng = make_rng(spec.seed);
  auto eligible = [&](int cls) {
    std::vector<int> out;
    for (int idx : pool.by_class[cls]) {
      if (pool.clips[idx].clip_id == query_clip_id) continue;
      if (std::find(chosen.begin(), chosen.end(), idx) != chosen.end()) continue;
      out.push_back(idx);
    }
    return out;
  };
  for (int i = 0; i < spec.k; ++i) {
    int cls = 0;
    if (spec.kind == DemoKind::Random) {
      std::vector<int> classes;
      for (int c = 0; c < world::kNumClasses; ++c) {
        if (!eligible(c).empty()) classes.push_back(c);
      }
      if (classes.empty()) throw InvalidArgument("no eligible demonstration clip");
      cls = classes[uniform_int(rng, 0, static_cast<int64_t>(classes.size()) - 1)];
    } else {
      const world::Action want = spec.kind == DemoKind::InClass ? query_label : world::contrast(query_label);
      cls = world::class_id(want);
    }
    const auto options = eligible(cls);
    if (options.empty()) {
      throw InvalidArgument("no eligible demonstration clip with label " +
                            std::string(world::action_name(world::action_from_id(cls))));
    }
    chosen.push_back(options[uniform_int(rng, 0, static_cast<int64_t>(options.size()) - 1)]);
  }
  return chosen;
}

tok::TokenSequence build_prompt_tokens(std::span<const std::vector<int>> demo_bodies, std::span<const int> query_body,
                                       int tokens_per_frame, int bos, int context_len) {
  tok::TokenSequence seq;
  seq.tokens_per_frame = tokens_per_frame;
  seq.has_bos = true;
  seq.has_eos = false;
  size_t total = 1 + query_body.size();
  for (const auto& d : demo_bodies) total += d.size();
  if (total > static_cast<size_t>(context_len)) {
    throw InvalidArgument("prompt of " + std::to_string(total) + " tokens exceeds context " +
                          std::to_string(context_len));
  }
  auto check = [&](std::span<const int> body) {
    if (body.size() % tokens_per_frame != 0) throw InvalidArgument("prompt part is not a whole number of frames");
    for (int id : body) {
      if (id < 0 || id >= bos) throw InvalidArgument("special id inside prompt frames");
    }
  };
  seq.ids.reserve(total);
  seq.ids.push_back(bos);
  for (const auto& d : demo_bodies) {
    check(d);
    seq.ids.insert(seq.ids.end(), d.begin(), d.end());
  }
  check(query_body);
  seq.ids.insert(seq.ids.end(), query_body.begin(), query_body.end());
  return seq;
}

tok::TokenSequence build_prompt(std::span<const std::vector<world::Frame>> demos, std::span<const world::Frame> query,
                                const tok::Codebook& cb, int context_len) {
  std::vector<std::vector<int>> bodies;
  for (const auto& d : demos) bodies.push_back(tok::encode_frames(d, cb, false).ids);
  const auto q = tok::encode_frames(query, cb, false).ids;
  return build_prompt_tokens(bodies, q, cb.tokens_per_frame(), cb.bos_id(), context_len);
}

namespace {

int best_regular(std::span<const float> logits, int first_special) {
  const int n = std::min<int>(first_special, static_cast<int>(logits.size()));
  if (n < 1) throw InvalidArgument("no regular ids to sample");
  return static_cast<int>(std::max_element(logits.begin(), logits.begin() + n) - logits.begin());
}

}  // namespace

std::vector<double> topk_distribution(std::span<const float> logits, int k, double temperature) {
  if (k < 1) throw InvalidArgument("top_k must be >= 1");
  if (!(temperature > 0)) throw InvalidArgument("temperature must be > 0");
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  order.resize(std::min<size_t>(k, order.size()));
  std::vector<double> p(logits.size(), 0.0);
  const double top = logits[order[0]];
  double z = 0;
  for (int i : order) z += p[i] = std::exp((double(logits[i]) - top) / temperature);
  for (int i : order) p[i] /= z;
  return p;
}

int sample_token(std::span<const float> logits, const Sampling& s, int first_special, Rng& rng) {
  if (s.mode == Sampling::Mode::Greedy || s.temperature <= 1e-6) return best_regular(logits, first_special);
  const auto p = topk_distribution(logits, s.top_k, s.temperature);
  const double u = uniform01(rng);
  double acc = 0;
  int pick = -1;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0) continue;
    pick = static_cast<int>(i);
    acc += p[i];
    if (u < acc) break;
  }
  if (pick >= first_special) pick = best_regular(logits, first_special);
  return pick;
}

GenerationResult generate(const model::TransformerModel& model, const tok::TokenSequence& prompt, int gen_frames,
                          const tok::Codebook& cb, const Sampling& sampling, bool capture_attention,
                          std::optional<model::Condition> cond) {
  const auto& mcfg = model.config();
  if (gen_frames < 1) throw InvalidArgument("gen_frames must be >= 1");
  if (mcfg.vocab != cb.vocab_size()) throw InvalidArgument("model vocabulary does not match the codebook");
  const int nt = cb.tokens_per_frame();
  const int n_gen = gen_frames * nt;
  const int rows = static_cast<int>(prompt.ids.size()) + (mcfg.conditioning ? 1 : 0) + n_gen;
  if (rows > mcfg.context_len) {
    throw InvalidArgument("prompt plus " + std::to_string(n_gen) + " generated tokens exceeds context " +
                          std::to_string(mcfg.context_len));
  }
  GenerationResult r;
  r.prompt = prompt;
  r.d_model = mcfg.d_model;
  r.conditioned = mcfg.conditioning;
  r.generated_ids.reserve(n_gen);
  r.last_hidden.reserve(static_cast<size_t>(n_gen) * mcfg.d_model);

  Rng rng = make_rng(substream(sampling.seed, "sampling"));
  model::DecodeSession session(model, capture_attention);
  auto step = session.prefill(prompt.ids, cond);
  for (int g = 0; g < n_gen; ++g) {
    const int id = sample_token(step.logits, sampling, cb.size(), rng);
    r.generated_ids.push_back(id);
    if (capture_attention) r.attention.push_back(std::move(step.attention));
    step = session.append(id);
    r.last_hidden.insert(r.last_hidden.end(), step.hidden.begin(), step.hidden.end());
  }
  r.generated_frames = tok::decode_body(r.generated_ids, cb);
  return r;
}

std::string result_sidecar_json(const GenerationResult& r, const std::string& condition) {
  nlohmann::ordered_json j;
  j["query_label"] = world::action_name(r.query_label);
  auto labels = nlohmann::ordered_json::array();
  for (auto a : r.demo_labels) labels.push_back(world::action_name(a));
  j["demo_labels"] = labels;
  j["condition"] = condition;
  const auto pred = r.generated_frames.size() >= 2 ? world::oracle_classify(r.generated_frames) : std::nullopt;
  j["oracle_prediction"] = pred ? std::string(world::action_name(*pred)) : std::string("unknown");
  return j.dump(2) + "\n";
}

}  // namespace vidit::infer
