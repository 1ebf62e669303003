#pragma once

// Straight-line, per-node transcriptions of the layer equations on plain
// vectors. They share nothing with the batched implementation beyond reading
// parameter values out of tensors, and serve as the reference for the
// layer-equation property tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "rgnn/graph.hpp"
#include "rgnn/layers.hpp"
#include "rgnn/tensor.hpp"

namespace rgnn::oracle {

using Vec = std::vector<double>;

inline Vec row(const Tensor& t, std::size_t r) {
  Vec v(t.cols());
  for (std::size_t c = 0; c < t.cols(); ++c) v[c] = t.at(r, c);
  return v;
}

inline Vec matvec(const Tensor& w, const Vec& x) {
  Vec y(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) y[i] += w.at(i, j) * x[j];
  }
  return y;
}

inline Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}
inline Vec plus(Vec a, const Tensor& bias) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += bias[i];
  return a;
}
inline Vec times(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
  return a;
}
inline Vec scaled(Vec a, double s) {
  for (auto& x : a) x *= s;
  return a;
}
inline Vec sigmoid(Vec a) {
  for (auto& x : a) x = 1.0 / (1.0 + std::exp(-x));
  return a;
}
inline Vec tanh(Vec a) {
  for (auto& x : a) x = std::tanh(x);
  return a;
}
inline Vec celu(Vec a) {
  for (auto& x : a) x = std::max(0.0, x) + std::min(0.0, std::exp(x) - 1.0);
  return a;
}
inline Vec relu(Vec a) {
  for (auto& x : a) x = std::max(0.0, x);
  return a;
}
inline Vec cat(Vec a, const Vec& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// W_rel h_u
inline Vec mu_mm(const Vec& h_u, const Tensor& w_rel) { return matvec(w_rel, h_u); }

// W_B W*_rel W_A h_u
inline Vec mu_mm_red(const Vec& h_u, const Tensor& w_a, const Tensor& w_rel, const Tensor& w_b) {
  return matvec(w_b, matvec(w_rel, matvec(w_a, h_u)));
}

inline Vec mu_gcm(const Vec& h_u, const Vec& a_rel, const GcmParams& p) {
  const Vec c = celu(plus(matvec(p.w_a, cat(h_u, a_rel)), p.b_a));
  const Vec m = sigmoid(plus(matvec(p.w_m, c), p.b_m));
  const Vec u = plus(matvec(p.w_b, c), p.b_b);
  Vec out(h_u.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] * h_u[i] + (1 - m[i]) * u[i];
  return out;
}

inline Vec gamma_sum(const std::vector<Vec>& msgs) {
  Vec out(msgs.front().size(), 0.0);
  for (const auto& m : msgs) out = plus(out, m);
  return out;
}

inline Vec gamma_mean(const std::vector<Vec>& msgs) {
  return scaled(gamma_sum(msgs), 1.0 / static_cast<double>(msgs.size()));
}

// Multi-head attention with keys over [μ; a_rel] and sliced messages as values.
inline Vec gamma_rv_gat(const Vec& h_v, const std::vector<Vec>& msgs, const std::vector<Vec>& rel_vecs,
                        const Tensor& q_all, const Tensor& k_all, std::size_t heads,
                        std::vector<Vec>* alphas = nullptr) {
  const std::size_t d = h_v.size(), w = d / heads;
  Vec out(d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    Vec q(w, 0.0);
    for (std::size_t i = 0; i < w; ++i) {
      for (std::size_t j = 0; j < d; ++j) q[i] += q_all.at(h * w + i, j) * h_v[j];
    }
    Vec scores;
    for (std::size_t e = 0; e < msgs.size(); ++e) {
      const Vec key_in = cat(msgs[e], rel_vecs[e]);
      double s = 0;
      for (std::size_t i = 0; i < w; ++i) {
        double k = 0;
        for (std::size_t j = 0; j < 2 * d; ++j) k += k_all.at(h * w + i, j) * key_in[j];
        s += q[i] * k;
      }
      scores.push_back(s / std::sqrt(static_cast<double>(w)));
    }
    double total = 0;
    for (double s : scores) total += std::exp(s);
    Vec alpha;
    for (double s : scores) alpha.push_back(std::exp(s) / total);
    if (alphas) alphas->push_back(alpha);
    for (std::size_t e = 0; e < msgs.size(); ++e) {
      for (std::size_t i = 0; i < w; ++i) out[h * w + i] += alpha[e] * msgs[e][h * w + i];
    }
  }
  return out;
}

// RGAT node update for node i from its incoming (src, rel) list.
inline Vec rgat_node(const std::vector<Vec>& states, std::size_t i, const std::vector<Incoming>& in,
                     const RgatParams& p) {
  const std::size_t d = states[i].size(), w = d / p.heads;
  Vec out(d, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h) {
    std::vector<double> scores;
    std::vector<Vec> vals;
    for (const auto& [j, r] : in) {
      const Vec gi = matvec(p.w[r], states[i]);
      const Vec gj = matvec(p.w[r], states[j]);
      const Vec qi = matvec(p.q[r], gi);
      const Vec kj = matvec(p.k[r], gj);
      const Vec vj = matvec(p.v[r], states[j]);
      double s = 0;
      for (std::size_t c = h * w; c < (h + 1) * w; ++c) s += qi[c] * kj[c];
      scores.push_back(s);
      vals.emplace_back(vj.begin() + static_cast<std::ptrdiff_t>(h * w),
                        vj.begin() + static_cast<std::ptrdiff_t>((h + 1) * w));
    }
    double total = 0;
    for (double s : scores) total += p.normalization == RgatNormalization::softmax ? std::exp(s) : s;
    for (std::size_t e = 0; e < scores.size(); ++e) {
      const double a = (p.normalization == RgatNormalization::softmax ? std::exp(scores[e]) : scores[e]) / total;
      for (std::size_t c = 0; c < w; ++c) out[h * w + c] += a * vals[e][c];
    }
  }
  return p.activation == RgatActivation::relu ? relu(out) : out;
}

inline Vec gru(const Vec& h, const Vec& hbar, const GruParams& p) {
  const Vec r = sigmoid(plus(plus(matvec(p.w_r, hbar), matvec(p.u_r, h)), p.b_r));
  const Vec z = sigmoid(plus(plus(matvec(p.w_z, hbar), matvec(p.u_z, h)), p.b_z));
  const Vec cand = tanh(plus(plus(matvec(p.w, hbar), matvec(p.u, times(h, r))), p.b));
  Vec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = (1 - z[i]) * h[i] + z[i] * cand[i];
  return out;
}

struct SgruTrace {
  Vec out, mix_x, mix_h, mix_u;
};

inline SgruTrace sgru(const Vec& h, const Vec& hbar, const SgruParams& p) {
  auto pre = [&](const Tensor& w, const Tensor& u, const Tensor& b) {
    return plus(plus(matvec(w, hbar), matvec(u, h)), b);
  };
  const Vec r_h = sigmoid(pre(p.w_rh, p.u_rh, p.b_rh));
  const Vec r_x = sigmoid(pre(p.w_rx, p.u_rx, p.b_rx));
  const Vec z_x = pre(p.w_zx, p.u_zx, p.b_zx);
  const Vec z_h = pre(p.w_zh, p.u_zh, p.b_zh);
  const Vec z_u = pre(p.w_zu, p.u_zu, p.b_zu);
  const Vec cand = tanh(plus(plus(matvec(p.w, times(hbar, r_x)), matvec(p.u, times(h, r_h))), p.b));
  SgruTrace t;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double ex = std::exp(z_x[i]), eh = std::exp(z_h[i]), eu = std::exp(z_u[i]);
    const double s = ex + eh + eu;
    t.mix_x.push_back(ex / s);
    t.mix_h.push_back(eh / s);
    t.mix_u.push_back(eu / s);
    t.out.push_back(ex / s * hbar[i] + eh / s * h[i] + eu / s * cand[i]);
  }
  return t;
}

inline Vec rgcn(const Vec& h, const Vec& hbar, const RgcnParams& p) {
  return tanh(plus(plus(matvec(p.self_weight, h), p.bias), hbar));
}

// One synchronous step computed node by node from the RelGraph adjacency.
inline std::vector<Vec> gnn_step(const std::vector<Vec>& states, const RelGraph& g, const LayerSpec& spec,
                                 const LayerWeights& w) {
  std::vector<Vec> next;
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    const auto in = g.incoming(v);
    if (spec.rgat) {
      next.push_back(rgat_node(states, v, in, w.rgat));
      continue;
    }
    std::vector<Vec> msgs, rel_vecs;
    std::vector<std::size_t> per_rel(g.num_relations(), 0);
    for (const auto& [u, r] : in) ++per_rel[r];
    for (const auto& [u, r] : in) {
      Vec m;
      switch (spec.message) {
        case MessageKind::mm: m = mu_mm(states[u], w.relations.matrices[r]); break;
        case MessageKind::mm_reduced:
          m = mu_mm_red(states[u], w.relations.reduce_in, w.relations.reduced[r], w.relations.reduce_out);
          break;
        case MessageKind::gcm: m = mu_gcm(states[u], row(w.relations.vectors, r), w.gcm); break;
      }
      if (spec.aggregation == AggregationKind::relation_mean) m = scaled(m, 1.0 / static_cast<double>(per_rel[r]));
      msgs.push_back(m);
      if (w.relations.vectors.defined()) rel_vecs.push_back(row(w.relations.vectors, r));
    }
    Vec hbar;
    switch (spec.aggregation) {
      case AggregationKind::sum:
      case AggregationKind::relation_mean: hbar = gamma_sum(msgs); break;
      case AggregationKind::mean: hbar = gamma_mean(msgs); break;
      case AggregationKind::rv_gat:
        hbar = gamma_rv_gat(states[v], msgs, rel_vecs, w.attn.query, w.attn.key, w.attn.heads);
        break;
    }
    switch (spec.update) {
      case UpdateKind::gru: next.push_back(gru(states[v], hbar, w.gru)); break;
      case UpdateKind::sgru: next.push_back(sgru(states[v], hbar, w.sgru).out); break;
      case UpdateKind::rgcn: next.push_back(rgcn(states[v], hbar, w.rgcn)); break;
    }
  }
  return next;
}

}  // namespace rgnn::oracle
