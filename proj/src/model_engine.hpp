#pragma once

// Dense math behind vidit::model. Everything is templated on the scalar type:
// float for training/inference, double for the finite-difference oracle.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vidit/error.hpp"
#include "vidit/model.hpp"

namespace vidit::model::detail {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MMap = Eigen::Map<Mat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Query rows per attention block; only keys up to the block's last row are
// touched, which skips most of the masked upper triangle.
inline constexpr int kAttnBlock = 64;

std::string layer_param(int layer, const char* what);

template <typename P>
struct LayerParams {
  P attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
};

// Raw pointers into a ParamMap, resolved once per call.
template <typename T, typename P>
struct Params {
  P tok_embedding{};
  std::vector<LayerParams<P>> layers;
  P final_norm{};
  P lm_head{};
  P cond_embedding{};
};

template <typename T, typename Map, typename P>
Params<T, P> bind(const ModelConfig& cfg, Map& params) {
  auto get = [&](const std::string& name) -> P {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidArgument("missing parameter " + name);
    return it->second.data.data();
  };
  Params<T, P> p;
  p.tok_embedding = get("tok_embedding");
  p.final_norm = get("final_norm");
  p.lm_head = get("lm_head");
  if (cfg.conditioning) p.cond_embedding = get("cond_embedding");
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams<P> lp;
    lp.attn_norm = get(layer_param(l, "attn_norm"));
    lp.wq = get(layer_param(l, "wq"));
    lp.wk = get(layer_param(l, "wk"));
    lp.wv = get(layer_param(l, "wv"));
    lp.wo = get(layer_param(l, "wo"));
    lp.mlp_norm = get(layer_param(l, "mlp_norm"));
    lp.w_gate = get(layer_param(l, "w_gate"));
    lp.w_up = get(layer_param(l, "w_up"));
    lp.w_down = get(layer_param(l, "w_down"));
    p.layers.push_back(lp);
  }
  return p;
}

// Internal row layout of one input. For conditioned models a slot row is
// inserted after the first id; it shares rotary position 0 with bos, and the
// bos key is hidden from every later row so that the slot takes over its role.
struct Layout {
  std::vector<int> token;     // id feeding each row (the slot repeats ids[0])
  std::vector<int> position;  // rotary position of each row
  bool hide_key0 = false;
  int slot_row = -1;
  int cond_label = -1;  // -1: absent

  int rows() const { return static_cast<int>(token.size()); }
  // Internal row that predicts the id following ids[j].
  int row_of_id(int j) const { return slot_row >= 0 ? j + 1 : j; }
};

Layout make_layout(const ModelConfig& cfg, std::span<const int> ids, std::optional<Condition> cond);

template <typename T>
struct Rope {
  std::vector<T> cos, sin;  // [position][pair]
  int half = 0;

  Rope(int head_dim, double base, int max_pos) : half(head_dim / 2) {
    cos.resize(static_cast<size_t>(max_pos) * half);
    sin.resize(cos.size());
    for (int p = 0; p < max_pos; ++p) {
      for (int i = 0; i < half; ++i) {
        const double inv_freq = std::pow(base, -2.0 * i / head_dim);
        const double ang = p * inv_freq;
        cos[static_cast<size_t>(p) * half + i] = static_cast<T>(std::cos(ang));
        sin[static_cast<size_t>(p) * half + i] = static_cast<T>(std::sin(ang));
      }
    }
  }

  // Rotates every head of row `v` (length d_model) to `pos`; inverse undoes it.
  void apply(T* v, int d_model, int pos, bool inverse) const {
    const T* c = cos.data() + static_cast<size_t>(pos) * half;
    const T* s = sin.data() + static_cast<size_t>(pos) * half;
    const int hd = half * 2;
    for (int h0 = 0; h0 < d_model; h0 += hd) {
      T* x = v + h0;
      for (int i = 0; i < half; ++i) {
        const T a = x[2 * i];
        const T b = x[2 * i + 1];
        const T si = inverse ? -s[i] : s[i];
        x[2 * i] = a * c[i] - b * si;
        x[2 * i + 1] = a * si + b * c[i];
      }
    }
  }
};

// y = x / sqrt(mean(x^2) + eps) * gain, row-wise. Stores 1/rms per row.
template <typename T>
void rmsnorm_rows(const Mat<T>& x, const T* gain, double eps, Mat<T>& y, std::vector<T>* inv_rms) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  y.resize(rows, d);
  if (inv_rms) inv_rms->resize(rows);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x.data() + static_cast<size_t>(r) * d;
    T* yr = y.data() + static_cast<size_t>(r) * d;
    T ss = 0;
    for (int i = 0; i < d; ++i) ss += xr[i] * xr[i];
    const T inv = T(1) / std::sqrt(ss / T(d) + T(eps));
    for (int i = 0; i < d; ++i) yr[i] = xr[i] * inv * gain[i];
    if (inv_rms) (*inv_rms)[r] = inv;
  }
}

// Backward of rmsnorm_rows; returns dx and accumulates the gain gradient.
template <typename T>
void rmsnorm_rows_backward(const Mat<T>& x, const std::vector<T>& inv_rms, const T* gain,
                           const Mat<T>& dy, Mat<T>& dx, T* dgain) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  dx.resize(rows, d);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x.data() + static_cast<size_t>(r) * d;
    const T* gr = dy.data() + static_cast<size_t>(r) * d;
    T* out = dx.data() + static_cast<size_t>(r) * d;
    const T inv = inv_rms[r];
    T dot = 0;
    for (int i = 0; i < d; ++i) {
      const T u = gain[i] * gr[i];
      dot += u * xr[i];
      if (dgain) dgain[i] += xr[i] * inv * gr[i];
    }
    const T coef = inv * inv * inv * dot / T(d);
    for (int i = 0; i < d; ++i) out[i] = inv * gain[i] * gr[i] - xr[i] * coef;
  }
}

template <typename T>
struct LayerActs {
  Mat<T> x_in, a, q, k, v, o, x_mid, m, g, u, act;
  std::vector<T> r_attn, r_mlp;
  std::vector<Mat<T>> probs;  // per head, rows x rows
};

template <typename T>
struct Acts {
  std::vector<LayerActs<T>> layers;
  Mat<T> x_out, f, logits;
  std::vector<T> r_final;
};

template <typename T>
struct KVCache {
  std::vector<Mat<T>> k, v;  // per layer, capacity x d_model
  int len = 0;
};

// Runs all layers over `x` (rows appended after `base` cached rows).
// `x` holds the input embeddings and receives the final residual stream.
// With `acts`, base must be 0 and every intermediate is kept for backward.
template <typename T>
void run_layers(const ModelConfig& cfg, const Params<T, const T*>& w, const Rope<T>& rope,
                Mat<T>& x, std::span<const int> pos, int base, bool hide_key0, KVCache<T>* cache,
                Acts<T>* acts, std::vector<T>* last_row_attn) {
  const int rows = static_cast<int>(x.rows());
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int ff = cfg.d_mlp;
  const int n_heads = cfg.n_heads;
  const T scale = T(1) / std::sqrt(T(hd));
  const int total = base + rows;

  Mat<T> a, q, k, v, o(rows, d), m, g, u, act, tmp;
  Mat<T> scores;
  std::vector<T> rinv;

  if (acts) acts->layers.resize(cfg.n_layers);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    LayerActs<T>* la = acts ? &acts->layers[l] : nullptr;
    if (la) la->x_in = x;

    rmsnorm_rows<T>(x, lw.attn_norm, cfg.norm_eps, a, &rinv);
    q.noalias() = a * CMap<T>(lw.wq, d, d);
    k.noalias() = a * CMap<T>(lw.wk, d, d);
    v.noalias() = a * CMap<T>(lw.wv, d, d);
    for (int r = 0; r < rows; ++r) {
      rope.apply(q.data() + static_cast<size_t>(r) * d, d, pos[r], false);
      rope.apply(k.data() + static_cast<size_t>(r) * d, d, pos[r], false);
    }

    const Mat<T>* kall = &k;
    const Mat<T>* vall = &v;
    if (cache) {
      cache->k[l].middleRows(base, rows) = k;
      cache->v[l].middleRows(base, rows) = v;
      kall = &cache->k[l];
      vall = &cache->v[l];
    }

    if (la) {
      la->probs.resize(n_heads);
      for (auto& p : la->probs) p.setZero(rows, rows);
    }
    const bool want_row = last_row_attn && l == cfg.n_layers - 1;
    if (want_row) last_row_attn->assign(total, T(0));

    for (int h = 0; h < n_heads; ++h) {
      const int c0 = h * hd;
      for (int r0 = 0; r0 < rows; r0 += kAttnBlock) {
        const int nb = std::min(kAttnBlock, rows - r0);
        const int kend = base + r0 + nb;
        scores.noalias() = q.block(r0, c0, nb, hd) * kall->block(0, c0, kend, hd).transpose();
        for (int i = 0; i < nb; ++i) {
          const int abs_row = base + r0 + i;
          T* s = scores.data() + static_cast<size_t>(i) * kend;
          const int lo = (hide_key0 && abs_row >= 1) ? 1 : 0;
          Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> live(s + lo, abs_row + 1 - lo);
          live *= scale;
          const T mx = live.maxCoeff();
          live = (live - mx).exp();
          live *= T(1) / live.sum();
          for (int j = 0; j < lo; ++j) s[j] = T(0);
          for (int j = abs_row + 1; j < kend; ++j) s[j] = T(0);
        }
        o.block(r0, c0, nb, hd).noalias() = scores * vall->block(0, c0, kend, hd);
        if (la) la->probs[h].block(r0, 0, nb, kend) = scores;
        if (want_row && r0 + nb == rows) {
          const T* s = scores.data() + static_cast<size_t>(nb - 1) * kend;
          for (int j = 0; j < kend; ++j) (*last_row_attn)[j] += s[j] / T(n_heads);
        }
      }
    }

    if (la) {
      la->a = a;
      la->q = q;
      la->k = k;
      la->v = v;
      la->o = o;
      la->r_attn = rinv;
    }
    x.noalias() += o * CMap<T>(lw.wo, d, d);
    if (la) la->x_mid = x;

    rmsnorm_rows<T>(x, lw.mlp_norm, cfg.norm_eps, m, &rinv);
    g.noalias() = m * CMap<T>(lw.w_gate, d, ff);
    u.noalias() = m * CMap<T>(lw.w_up, d, ff);
    act.resize(rows, ff);
    act.array() = g.array() / (T(1) + (-g.array()).exp()) * u.array();
    x.noalias() += act * CMap<T>(lw.w_down, ff, d);
    if (la) {
      la->m = m;
      la->g = g;
      la->u = u;
      la->act = act;
      la->r_mlp = rinv;
    }
  }
  if (cache) cache->len = total;
}

template <typename T>
void embed(const ModelConfig& cfg, const Params<T, const T*>& w, const Layout& lay, Mat<T>& x) {
  const int d = cfg.d_model;
  x.resize(lay.rows(), d);
  for (int r = 0; r < lay.rows(); ++r) {
    const int id = lay.token[r];
    if (id < 0 || id >= cfg.vocab) throw InvalidArgument("token id out of range: " + std::to_string(id));
    const T* e = w.tok_embedding + static_cast<size_t>(id) * d;
    T* xr = x.data() + static_cast<size_t>(r) * d;
    std::copy(e, e + d, xr);
    if (r == lay.slot_row && lay.cond_label >= 0) {
      const T* c = w.cond_embedding + static_cast<size_t>(lay.cond_label) * d;
      for (int i = 0; i < d; ++i) xr[i] += c[i];
    }
  }
}

// Full forward over one sequence (no cache). Fills `acts` including the final
// normalized hidden and logits for every internal row.
template <typename T>
void forward_full(const ModelConfig& cfg, const Params<T, const T*>& w, const Layout& lay, Acts<T>& acts) {
  if (lay.rows() > cfg.context_len) {
    throw InvalidArgument("sequence of " + std::to_string(lay.rows()) + " rows exceeds context length " +
                          std::to_string(cfg.context_len));
  }
  const Rope<T> rope(cfg.head_dim(), cfg.rope_base, std::max(1, lay.position.empty() ? 1 : *std::max_element(lay.position.begin(), lay.position.end()) + 1));
  Mat<T> x;
  embed(cfg, w, lay, x);
  run_layers<T>(cfg, w, rope, x, lay.position, 0, lay.hide_key0, nullptr, &acts, nullptr);
  acts.x_out = x;
  rmsnorm_rows<T>(x, w.final_norm, cfg.norm_eps, acts.f, &acts.r_final);
  acts.logits.noalias() = acts.f * CMap<T>(w.lm_head, cfg.d_model, cfg.vocab);
}

// Mean cross-entropy over predicting rows; optionally writes dL/dlogits.
template <typename T>
double cross_entropy(const ModelConfig& cfg, const Layout& lay, std::span<const int> ids,
                     const Mat<T>& logits, Mat<T>* dlogits, double weight) {
  const int n = static_cast<int>(ids.size());
  if (n < 2) throw InvalidArgument("loss needs at least 2 tokens");
  const int V = cfg.vocab;
  const int count = n - 1;
  if (dlogits) dlogits->setZero(logits.rows(), V);
  double total = 0;
  for (int j = 0; j + 1 < n; ++j) {
    const int row = lay.row_of_id(j);
    const int target = ids[j + 1];
    const T* z = logits.data() + static_cast<size_t>(row) * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < V; ++c) mx = std::max(mx, double(z[c]));
    double se = 0;
    for (int c = 0; c < V; ++c) se += std::exp(double(z[c]) - mx);
    const double lse = mx + std::log(se);
    total += lse - double(z[target]);
    if (dlogits) {
      T* dz = dlogits->data() + static_cast<size_t>(row) * V;
      const double s = weight / count;
      for (int c = 0; c < V; ++c) dz[c] = static_cast<T>(std::exp(double(z[c]) - lse) * s);
      dz[target] -= static_cast<T>(s);
    }
  }
  return total / count;
}

// Backward through the whole network given dL/dlogits. Accumulates into `g`.
template <typename T>
void backward(const ModelConfig& cfg, const Params<T, const T*>& w, const Params<T, T*>& g,
              const Layout& lay, const Acts<T>& acts, const Mat<T>& dlogits) {
  const int rows = lay.rows();
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int ff = cfg.d_mlp;
  const T scale = T(1) / std::sqrt(T(hd));
  const Rope<T> rope(hd, cfg.rope_base, *std::max_element(lay.position.begin(), lay.position.end()) + 1);

  MMap<T>(g.lm_head, d, cfg.vocab).noalias() += acts.f.transpose() * dlogits;
  Mat<T> df, dx;
  df.noalias() = dlogits * CMap<T>(w.lm_head, d, cfg.vocab).transpose();
  rmsnorm_rows_backward<T>(acts.x_out, acts.r_final, w.final_norm, df, dx, g.final_norm);

  Mat<T> sig, dact, dg, du, dm, tmp, dmid, dO, dq, dk, dv, da, dp, ds;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lw = w.layers[l];
    const auto& lg = g.layers[l];
    const auto& la = acts.layers[l];

    // MLP branch
    MMap<T>(lg.w_down, ff, d).noalias() += la.act.transpose() * dx;
    dact.noalias() = dx * CMap<T>(lw.w_down, ff, d).transpose();
    {
      const auto ga = la.g.array();
      sig = (T(1) + (-ga).exp()).inverse();
      du.array() = dact.array() * ga * sig.array();
      dg.array() = dact.array() * la.u.array() * sig.array() * (T(1) + ga * (T(1) - sig.array()));
    }
    MMap<T>(lg.w_gate, d, ff).noalias() += la.m.transpose() * dg;
    MMap<T>(lg.w_up, d, ff).noalias() += la.m.transpose() * du;
    dm.noalias() = dg * CMap<T>(lw.w_gate, d, ff).transpose();
    dm.noalias() += du * CMap<T>(lw.w_up, d, ff).transpose();
    rmsnorm_rows_backward<T>(la.x_mid, la.r_mlp, lw.mlp_norm, dm, tmp, lg.mlp_norm);
    dmid = dx + tmp;

    // Attention branch
    MMap<T>(lg.wo, d, d).noalias() += la.o.transpose() * dmid;
    dO.noalias() = dmid * CMap<T>(lw.wo, d, d).transpose();
    dq.setZero(rows, d);
    dk.setZero(rows, d);
    dv.setZero(rows, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int c0 = h * hd;
      const Mat<T>& P = la.probs[h];
      for (int r0 = 0; r0 < rows; r0 += kAttnBlock) {
        const int nb = std::min(kAttnBlock, rows - r0);
        const int kend = r0 + nb;
        const auto Pb = P.block(r0, 0, nb, kend);
        const auto dOb = dO.block(r0, c0, nb, hd);
        dv.block(0, c0, kend, hd).noalias() += Pb.transpose() * dOb;
        dp.noalias() = dOb * la.v.block(0, c0, kend, hd).transpose();
        ds.resize(nb, kend);
        for (int i = 0; i < nb; ++i) {
          T dot = 0;
          for (int j = 0; j < kend; ++j) dot += Pb(i, j) * dp(i, j);
          for (int j = 0; j < kend; ++j) ds(i, j) = Pb(i, j) * (dp(i, j) - dot) * scale;
        }
        dq.block(r0, c0, nb, hd).noalias() = ds * la.k.block(0, c0, kend, hd);
        dk.block(0, c0, kend, hd).noalias() += ds.transpose() * la.q.block(r0, c0, nb, hd);
      }
    }
    for (int r = 0; r < rows; ++r) {
      rope.apply(dq.data() + static_cast<size_t>(r) * d, d, lay.position[r], true);
      rope.apply(dk.data() + static_cast<size_t>(r) * d, d, lay.position[r], true);
    }
    MMap<T>(lg.wq, d, d).noalias() += la.a.transpose() * dq;
    MMap<T>(lg.wk, d, d).noalias() += la.a.transpose() * dk;
    MMap<T>(lg.wv, d, d).noalias() += la.a.transpose() * dv;
    da.noalias() = dq * CMap<T>(lw.wq, d, d).transpose();
    da.noalias() += dk * CMap<T>(lw.wk, d, d).transpose();
    da.noalias() += dv * CMap<T>(lw.wv, d, d).transpose();
    rmsnorm_rows_backward<T>(la.x_in, la.r_attn, lw.attn_norm, da, tmp, lg.attn_norm);
    dx = dmid + tmp;
  }

  for (int r = 0; r < rows; ++r) {
    const T* src = dx.data() + static_cast<size_t>(r) * d;
    T* e = g.tok_embedding + static_cast<size_t>(lay.token[r]) * d;
    for (int i = 0; i < d; ++i) e[i] += src[i];
    if (r == lay.slot_row && lay.cond_label >= 0) {
      T* c = g.cond_embedding + static_cast<size_t>(lay.cond_label) * d;
      for (int i = 0; i < d; ++i) c[i] += src[i];
    }
  }
}

}  // namespace vidit::model::detail
