#include "vidit/model.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

#include "model_engine.hpp"
#include "vidit/binary_io.hpp"
#include "vidit/error.hpp"
#include "vidit/rng.hpp"

namespace vidit::model {

namespace detail {

std::string layer_param(int layer, const char* what) {
  return "layer." + std::to_string(layer) + "." + what;
}

Layout make_layout(const ModelConfig& cfg, std::span<const int> ids, std::optional<Condition> cond) {
  if (ids.empty()) throw InvalidArgument("empty input");
  Layout lay;
  const int n = static_cast<int>(ids.size());
  if (!cfg.conditioning) {
    if (cond && cond->present) {
      throw InvalidArgument("model was built without a conditioning slot");
    }
    lay.token.assign(ids.begin(), ids.end());
    lay.position.resize(n);
    for (int i = 0; i < n; ++i) lay.position[i] = i;
    return lay;
  }
  if (cond && cond->present && (cond->label < 0 || cond->label >= cfg.n_classes)) {
    throw InvalidArgument("condition label out of range: " + std::to_string(cond->label));
  }
  lay.token.reserve(n + 1);
  lay.position.reserve(n + 1);
  lay.token.push_back(ids[0]);
  lay.position.push_back(0);
  lay.token.push_back(ids[0]);
  lay.position.push_back(0);
  for (int i = 1; i < n; ++i) {
    lay.token.push_back(ids[i]);
    lay.position.push_back(i);
  }
  lay.hide_key0 = true;
  lay.slot_row = 1;
  lay.cond_label = (cond && cond->present) ? cond->label : -1;
  return lay;
}

}  // namespace detail

using detail::Acts;
using detail::Layout;
using detail::Mat;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidArgument("model config: " + m); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model < 2 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (d_mlp < 1) fail("d_mlp must be >= 1");
  if (vocab < 2) fail("vocab must be >= 2");
  if (context_len < 2) fail("context_len must be >= 2");
  if (!(rope_base > 0)) fail("rope_base must be positive");
  if (!(norm_eps >= 0)) fail("norm_eps must be non-negative");
  if (!(init_std > 0)) fail("init_std must be positive");
  if (conditioning && n_classes < 1) fail("conditioning needs n_classes >= 1");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_model"] = d_model;
  j["d_mlp"] = d_mlp;
  j["vocab"] = vocab;
  j["context_len"] = context_len;
  j["rope_base"] = rope_base;
  j["norm_eps"] = norm_eps;
  j["init_std"] = init_std;
  j["conditioning"] = conditioning;
  j["n_classes"] = n_classes;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  static const std::set<std::string> kKeys = {"n_layers", "n_heads",   "d_model",   "d_mlp",
                                              "vocab",    "context_len", "rope_base", "norm_eps",
                                              "init_std", "conditioning", "n_classes"};
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("model config must be an object");
    for (const auto& [key, _] : j.items()) {
      if (!kKeys.count(key)) throw ConfigError("unknown model config key: " + key);
    }
    auto opt = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    opt("n_layers", c.n_layers);
    opt("n_heads", c.n_heads);
    opt("d_model", c.d_model);
    opt("d_mlp", c.d_mlp);
    opt("vocab", c.vocab);
    opt("context_len", c.context_len);
    opt("rope_base", c.rope_base);
    opt("norm_eps", c.norm_eps);
    opt("init_std", c.init_std);
    opt("conditioning", c.conditioning);
    opt("n_classes", c.n_classes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

int64_t parameter_count(const ModelConfig& c) {
  const int64_t d = c.d_model, ff = c.d_mlp, V = c.vocab;
  const int64_t per_layer = 2 * d + 4 * d * d + 3 * d * ff;
  int64_t total = V * d + c.n_layers * per_layer + d + d * V;
  if (c.conditioning) total += static_cast<int64_t>(c.n_classes) * d;
  return total;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::vector<std::pair<std::string, std::vector<int>>> expected_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::vector<int>>> s;
  s.push_back({"tok_embedding", {c.vocab, c.d_model}});
  for (int l = 0; l < c.n_layers; ++l) {
    s.push_back({detail::layer_param(l, "attn_norm"), {c.d_model}});
    s.push_back({detail::layer_param(l, "wq"), {c.d_model, c.d_model}});
    s.push_back({detail::layer_param(l, "wk"), {c.d_model, c.d_model}});
    s.push_back({detail::layer_param(l, "wv"), {c.d_model, c.d_model}});
    s.push_back({detail::layer_param(l, "wo"), {c.d_model, c.d_model}});
    s.push_back({detail::layer_param(l, "mlp_norm"), {c.d_model}});
    s.push_back({detail::layer_param(l, "w_gate"), {c.d_model, c.d_mlp}});
    s.push_back({detail::layer_param(l, "w_up"), {c.d_model, c.d_mlp}});
    s.push_back({detail::layer_param(l, "w_down"), {c.d_mlp, c.d_model}});
  }
  s.push_back({"final_norm", {c.d_model}});
  s.push_back({"lm_head", {c.d_model, c.vocab}});
  if (c.conditioning) s.push_back({"cond_embedding", {c.n_classes, c.d_model}});
  return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

bool is_norm_gain(const std::string& name) {
  return ends_with(name, "_norm");
}

bool decays(const std::string& name) {
  return !is_norm_gain(name) && name != "tok_embedding";
}

TransformerModel::TransformerModel(ModelConfig cfg, ParamMap<float> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  check();
}

TransformerModel TransformerModel::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamMap<float> params;
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    Tensor<float> t{shape, std::vector<float>(n)};
    if (is_norm_gain(name)) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else {
      // One substream per tensor so adding a tensor never shifts the others.
      Rng rng = make_rng(substream(seed, name));
      double std = cfg.init_std;
      if (ends_with(name, ".wo") || ends_with(name, ".w_down")) std *= resid_scale;
      for (auto& v : t.data) v = static_cast<float>(normal(rng) * std);
    }
    params.emplace(name, std::move(t));
  }
  return TransformerModel(cfg, std::move(params));
}

int64_t TransformerModel::parameter_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : params_) n += static_cast<int64_t>(t.numel());
  return n;
}

void TransformerModel::check() const {
  cfg_.validate();
  const auto shapes = expected_shapes(cfg_);
  if (shapes.size() != params_.size()) throw InvalidArgument("parameter set does not match config");
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("missing parameter " + name);
    if (it->second.shape != shape) throw InvalidArgument("shape mismatch for " + name);
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    if (it->second.numel() != n) throw InvalidArgument("size mismatch for " + name);
    for (float v : it->second.data) {
      if (!std::isfinite(v)) throw InvalidArgument("non-finite value in " + name);
    }
  }
}

// ---------------------------------------------------------------------------
// Forward / loss / gradient

namespace {

template <typename T>
using CParams = detail::Params<T, const T*>;
template <typename T>
using MParams = detail::Params<T, T*>;

template <typename T>
double loss_impl(const ModelConfig& cfg, const ParamMap<T>& params, std::span<const int> ids,
                 std::optional<Condition> cond, ParamMap<T>* grads, double weight) {
  const auto w = detail::bind<T, const ParamMap<T>, const T*>(cfg, params);
  const Layout lay = detail::make_layout(cfg, ids, cond);
  Acts<T> acts;
  detail::forward_full<T>(cfg, w, lay, acts);
  if (!grads) return detail::cross_entropy<T>(cfg, lay, ids, acts.logits, nullptr, 0.0);
  Mat<T> dlogits;
  const double l = detail::cross_entropy<T>(cfg, lay, ids, acts.logits, &dlogits, weight);
  const auto g = detail::bind<T, ParamMap<T>, T*>(cfg, *grads);
  detail::backward<T>(cfg, w, g, lay, acts, dlogits);
  return l;
}

}  // namespace

ForwardTrace forward(const TransformerModel& model, std::span<const int> ids, CaptureFlags capture,
                     std::optional<Condition> cond) {
  const auto& cfg = model.config();
  const auto w = detail::bind<float, const ParamMap<float>, const float*>(cfg, model.params());
  const Layout lay = detail::make_layout(cfg, ids, cond);
  Acts<float> acts;
  detail::forward_full<float>(cfg, w, lay, acts);

  ForwardTrace tr;
  tr.n = static_cast<int>(ids.size());
  tr.vocab = cfg.vocab;
  tr.d_model = cfg.d_model;
  tr.internal_rows = lay.rows();
  tr.n_layers = cfg.n_layers;
  tr.n_heads = cfg.n_heads;
  tr.logits.resize(static_cast<size_t>(tr.n) * cfg.vocab);
  if (capture.hidden) tr.last_hidden.resize(static_cast<size_t>(tr.n) * cfg.d_model);
  for (int j = 0; j < tr.n; ++j) {
    const int row = lay.row_of_id(j);
    std::copy_n(acts.logits.data() + static_cast<size_t>(row) * cfg.vocab, cfg.vocab,
                tr.logits.data() + static_cast<size_t>(j) * cfg.vocab);
    if (capture.hidden) {
      std::copy_n(acts.f.data() + static_cast<size_t>(row) * cfg.d_model, cfg.d_model,
                  tr.last_hidden.data() + static_cast<size_t>(j) * cfg.d_model);
    }
  }
  if (capture.attention) {
    const size_t r = static_cast<size_t>(lay.rows());
    tr.attention.reserve(static_cast<size_t>(cfg.n_layers) * cfg.n_heads * r * r);
    for (const auto& la : acts.layers) {
      for (const auto& p : la.probs) tr.attention.insert(tr.attention.end(), p.data(), p.data() + r * r);
    }
  }
  return tr;
}

double loss(const TransformerModel& model, std::span<const int> ids, std::optional<Condition> cond) {
  return loss_impl<float>(model.config(), model.params(), ids, cond, nullptr, 0.0);
}

double loss_and_grad(const TransformerModel& model, std::span<const int> ids, ParamMap<float>& grads,
                     std::optional<Condition> cond, double weight) {
  return loss_impl<float>(model.config(), model.params(), ids, cond, &grads, weight);
}

double loss_f64(const ModelConfig& cfg, const ParamMap<double>& params, std::span<const int> ids,
                std::optional<Condition> cond) {
  return loss_impl<double>(cfg, params, ids, cond, nullptr, 0.0);
}

double loss_and_grad_f64(const ModelConfig& cfg, const ParamMap<double>& params,
                         std::span<const int> ids, ParamMap<double>& grads,
                         std::optional<Condition> cond) {
  return loss_impl<double>(cfg, params, ids, cond, &grads, 1.0);
}

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, double eps) {
  if (x.empty()) throw InvalidArgument("rmsnorm of an empty vector");
  if (gain.size() != x.size()) throw InvalidArgument("rmsnorm gain size mismatch");
  Mat<float> in(1, static_cast<int>(x.size()));
  std::copy(x.begin(), x.end(), in.data());
  Mat<float> out;
  detail::rmsnorm_rows<float>(in, gain.data(), eps, out, nullptr);
  return {out.data(), out.data() + out.size()};
}

std::vector<float> rope(std::span<const float> v, int position, double base) {
  if (v.empty() || v.size() % 2 != 0) throw InvalidArgument("rope needs an even, non-empty head dimension");
  if (position < 0) throw InvalidArgument("rope position must be non-negative");
  const int hd = static_cast<int>(v.size());
  std::vector<float> out(v.begin(), v.end());
  for (int i = 0; i < hd / 2; ++i) {
    const double ang = position * std::pow(base, -2.0 * i / hd);
    const float c = static_cast<float>(std::cos(ang));
    const float s = static_cast<float>(std::sin(ang));
    const float a = out[2 * i];
    const float b = out[2 * i + 1];
    out[2 * i] = a * c - b * s;
    out[2 * i + 1] = a * s + b * c;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_rel_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  // Both below the noise floor of central differences: treat as agreement.
  if (scale < 1e-8) return diff < 1e-8 ? 0.0 : diff / 1e-8;
  return diff / scale;
}

GradCheckResult grad_check(const TransformerModel& model, std::span<const int> ids, int n_probes,
                           uint64_t seed, std::optional<Condition> cond) {
  constexpr double kStep = 1e-3;
  const auto& cfg = model.config();
  ParamMap<double> params = cast_params<double>(model.params());
  ParamMap<double> grads = zeros_like(params);
  loss_and_grad_f64(cfg, params, ids, grads, cond);

  // Flat index over all parameter scalars, in sorted-name order.
  std::vector<std::pair<std::string, size_t>> offsets;
  size_t total = 0;
  for (const auto& [name, t] : params) {
    offsets.emplace_back(name, total);
    total += t.numel();
  }

  Rng rng = make_rng(seed);
  GradCheckResult res;
  for (int p = 0; p < n_probes; ++p) {
    const size_t flat = static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(total) - 1));
    size_t which = 0;
    while (which + 1 < offsets.size() && offsets[which + 1].second <= flat) ++which;
    const std::string& name = offsets[which].first;
    const size_t idx = flat - offsets[which].second;

    double& slot = params.at(name).data[idx];
    const double orig = slot;
    slot = orig + kStep;
    const double up = loss_f64(cfg, params, ids, cond);
    slot = orig - kStep;
    const double down = loss_f64(cfg, params, ids, cond);
    slot = orig;

    GradProbe probe;
    probe.name = name;
    probe.index = idx;
    probe.analytic = grads.at(name).data[idx];
    probe.numeric = (up - down) / (2 * kStep);
    probe.rel_error = grad_rel_error(probe.analytic, probe.numeric);
    res.max_rel_error = std::max(res.max_rel_error, probe.rel_error);
    res.probes.push_back(std::move(probe));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Incremental decoding

struct DecodeSession::Impl {
  const TransformerModel* model;
  CParams<float> w;
  detail::Rope<float> rope;
  detail::KVCache<float> cache;
  bool capture_attention;
  bool hide_key0 = false;
  int next_position = 0;

  Impl(const TransformerModel& m, bool capture)
      : model(&m),
        w(detail::bind<float, const ParamMap<float>, const float*>(m.config(), m.params())),
        rope(m.config().head_dim(), m.config().rope_base, m.config().context_len),
        capture_attention(capture) {
    const auto& cfg = m.config();
    cache.k.assign(cfg.n_layers, Mat<float>::Zero(cfg.context_len, cfg.d_model));
    cache.v.assign(cfg.n_layers, Mat<float>::Zero(cfg.context_len, cfg.d_model));
  }

  Step run(const Layout& lay, int base) {
    const auto& cfg = model->config();
    if (base + lay.rows() > cfg.context_len) {
      throw InvalidArgument("decode exceeds context length " + std::to_string(cfg.context_len));
    }
    Mat<float> x;
    detail::embed<float>(cfg, w, lay, x);
    std::vector<float> attn;
    detail::run_layers<float>(cfg, w, rope, x, lay.position, base, hide_key0, &cache, nullptr,
                              capture_attention ? &attn : nullptr);
    Mat<float> last = x.bottomRows(1);
    Mat<float> f;
    detail::rmsnorm_rows<float>(last, w.final_norm, cfg.norm_eps, f, nullptr);
    Mat<float> logits = f * detail::CMap<float>(w.lm_head, cfg.d_model, cfg.vocab);
    Step s;
    s.logits.assign(logits.data(), logits.data() + logits.size());
    s.hidden.assign(f.data(), f.data() + f.size());
    s.attention = std::move(attn);
    return s;
  }
};

DecodeSession::DecodeSession(const TransformerModel& model, bool capture_attention)
    : impl_(std::make_unique<Impl>(model, capture_attention)) {}
DecodeSession::~DecodeSession() = default;
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;
DecodeSession& DecodeSession::operator=(DecodeSession&&) noexcept = default;

DecodeSession::Step DecodeSession::prefill(std::span<const int> ids, std::optional<Condition> cond) {
  if (impl_->cache.len != 0) throw InvalidArgument("prefill on a non-empty session");
  const Layout lay = detail::make_layout(impl_->model->config(), ids, cond);
  impl_->hide_key0 = lay.hide_key0;
  Step s = impl_->run(lay, 0);
  impl_->next_position = lay.position.back() + 1;
  return s;
}

DecodeSession::Step DecodeSession::append(int id) {
  if (impl_->cache.len == 0) throw InvalidArgument("append before prefill");
  Layout lay;
  lay.token = {id};
  lay.position = {impl_->next_position};
  Step s = impl_->run(lay, impl_->cache.len);
  ++impl_->next_position;
  return s;
}

int DecodeSession::length() const { return impl_->cache.len; }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr uint16_t kCheckpointVersion = 1;
}

std::vector<unsigned char> serialize_checkpoint(const TransformerModel& model, const std::string& meta_json) {
  std::string meta;
  try {
    meta = nlohmann::json::parse(meta_json).dump();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("checkpoint meta is not JSON: ") + e.what());
  }
  const std::string blob = "{\"config\":" + model.config().to_json() + ",\"meta\":" + meta + "}";
  io::ByteWriter out;
  out.str("VITC");
  out.u16(kCheckpointVersion);
  out.u32(static_cast<uint32_t>(blob.size()));
  out.str(blob);
  out.u32(static_cast<uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    out.u32(static_cast<uint32_t>(name.size()));
    out.str(name);
    out.u32(static_cast<uint32_t>(t.shape.size()));
    for (int s : t.shape) out.u32(static_cast<uint32_t>(s));
    for (float v : t.data) out.f32(v);
  }
  return std::move(out.buffer());
}

Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  io::ByteReader in(bytes);
  if (in.str(4) != "VITC") throw IoError("not a VITC checkpoint");
  const uint16_t version = in.u16();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::string blob = in.str(in.u32());
  ModelConfig cfg;
  std::string meta;
  try {
    const auto j = nlohmann::json::parse(blob);
    cfg = ModelConfig::from_json(j.at("config").dump());
    meta = j.at("meta").dump();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  ParamMap<float> params;
  const uint32_t n = in.u32();
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = in.str(in.u32());
    Tensor<float> t;
    const uint32_t rank = in.u32();
    size_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<int>(in.u32()));
      numel *= static_cast<size_t>(t.shape.back());
    }
    if (numel * sizeof(float) > in.remaining()) throw IoError("truncated tensor " + name);
    t.data.resize(numel);
    in.bytes(t.data.data(), numel * sizeof(float));
    params.emplace(std::move(name), std::move(t));
  }
  if (in.remaining() != 0) throw IoError("trailing bytes after checkpoint tensors");
  Checkpoint ck;
  try {
    ck.model = TransformerModel(cfg, std::move(params));
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("inconsistent checkpoint: ") + e.what());
  }
  ck.meta_json = meta;
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const std::string& meta_json) {
  io::write_file(path, serialize_checkpoint(model, meta_json));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace vidit::model
