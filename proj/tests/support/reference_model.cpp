// SPDX-License-Identifier: Apache-2.0
#include "support/reference_model.hpp"

#include <algorithm>
#include <cmath>

#include "fsq/kernels.hpp"

namespace fsq::testing {
namespace {

constexpr double kEps = 1e-5;

// Storage indices of the canonical parameter order.
enum : std::size_t {
  kEmbW = 0, kEmbB = 1, kScale = 2, kShift = 3,
  kGru0 = 4,  // + 9 * direction + field
  kWs1 = 22, kWs2 = 23, kW1 = 24, kB1 = 25, kW2 = 26, kB2 = 27,
};
enum : std::size_t { fWz, fWr, fWh, fUz, fUr, fUh, fBz, fBr, fBh };

const double* P(const model::Params& p, std::size_t i) { return p.value(i).ptr(); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// tanh through one exp; absolute error near 1e-16, a third of the cost of std::tanh.
double tanh_(double x) { return 1.0 - 2.0 / (1.0 + std::exp(2.0 * x)); }

void softmax_inplace(double* v, std::size_t n) {
  double m = v[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (v[i] = std::exp(v[i] - m));
  for (std::size_t i = 0; i < n; ++i) v[i] /= s;
}

double cross_entropy(const double* z, std::size_t n, int label) {
  double m = z[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, z[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - m);
  return -(z[label] - m - std::log(s));
}

void layer_norm_row(const double* pre, const double* scale, const double* shift, double* out,
                    double* normalized, std::size_t n) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += pre[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (pre[i] - mean) * (pre[i] - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + kEps);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (pre[i] - mean) * inv;
    if (normalized) normalized[i] = v;
    out[i] = v * scale[i] + shift[i];
  }
}

}  // namespace

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), m.v.begin());
  return m;
}

Mat ref_embed(const model::Params& p, const Mat& x) {
  const auto& c = p.config();
  const std::size_t E = c.embed_dim;
  const double *W = P(p, kEmbW), *b = P(p, kEmbB);
  Mat out(x.rows, E);
  std::vector<double> pre(E);
  for (std::size_t t = 0; t < x.rows; ++t) {
    for (std::size_t e = 0; e < E; ++e) {
      double s = b[e];
      for (std::size_t i = 0; i < x.cols; ++i) s += x(t, i) * W[i * E + e];
      pre[e] = s;
    }
    layer_norm_row(pre.data(), P(p, kScale), P(p, kShift), &out(t, 0), nullptr, E);
  }
  return out;
}

Mat ref_bigru(const model::Params& p, const Mat& X) {
  const auto& c = p.config();
  const std::size_t H = c.gru_hidden, E = c.embed_dim, T = X.rows;
  Mat S(T, 2 * H);
  for (std::size_t d = 0; d < 2; ++d) {
    const std::size_t o = kGru0 + 9 * d;
    const double *Wz = P(p, o + fWz), *Wr = P(p, o + fWr), *Wh = P(p, o + fWh);
    const double *Uz = P(p, o + fUz), *Ur = P(p, o + fUr), *Uh = P(p, o + fUh);
    const double *bz = P(p, o + fBz), *br = P(p, o + fBr), *bh = P(p, o + fBh);
    std::vector<double> h(H, 0.0), z(H), r(H), next(H);
    for (std::size_t step = 0; step < T; ++step) {
      const std::size_t t = d == 0 ? step : T - 1 - step;
      for (std::size_t j = 0; j < H; ++j) {
        double sz = bz[j], sr = br[j];
        for (std::size_t i = 0; i < E; ++i) {
          sz += X(t, i) * Wz[i * H + j];
          sr += X(t, i) * Wr[i * H + j];
        }
        for (std::size_t k = 0; k < H; ++k) {
          sz += h[k] * Uz[k * H + j];
          sr += h[k] * Ur[k * H + j];
        }
        z[j] = sigmoid(sz);
        r[j] = sigmoid(sr);
      }
      for (std::size_t j = 0; j < H; ++j) {
        double sc = bh[j];
        for (std::size_t i = 0; i < E; ++i) sc += X(t, i) * Wh[i * H + j];
        for (std::size_t k = 0; k < H; ++k) sc += r[k] * h[k] * Uh[k * H + j];
        const double cand = std::tanh(sc);
        next[j] = h[j] + z[j] * (cand - h[j]);
      }
      h = next;
      for (std::size_t j = 0; j < H; ++j) S(t, d * H + j) = h[j];
    }
  }
  return S;
}

RefAttention ref_attend(const model::Params& p, const Mat& S) {
  const auto& c = p.config();
  const std::size_t T = S.rows, D = S.cols, Ah = c.attention_hidden, heads = c.attention_heads;
  const double *Ws1 = P(p, kWs1), *Ws2 = P(p, kWs2);
  RefAttention out{Mat(heads, T), std::vector<double>(heads * D, 0.0)};
  std::vector<double> hs(Ah);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t a = 0; a < Ah; ++a) {
      double s = 0.0;
      for (std::size_t k = 0; k < D; ++k) s += S(t, k) * Ws1[a * D + k];
      hs[a] = std::tanh(s);
    }
    for (std::size_t j = 0; j < heads; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < Ah; ++a) s += hs[a] * Ws2[j * Ah + a];
      out.A(j, t) = s;
    }
  }
  for (std::size_t j = 0; j < heads; ++j) {
    softmax_inplace(&out.A(j, 0), T);
    for (std::size_t k = 0; k < D; ++k) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += out.A(j, t) * S(t, k);
      out.E[j * D + k] = s;
    }
  }
  return out;
}

std::vector<double> ref_classify(const model::Params& p, const std::vector<double>& E) {
  const auto& c = p.config();
  const std::size_t F = E.size(), h1 = c.head_hidden, C = c.classes;
  const double *W1 = P(p, kW1), *b1 = P(p, kB1), *W2 = P(p, kW2), *b2 = P(p, kB2);
  std::vector<double> q(h1), z(C);
  for (std::size_t k = 0; k < h1; ++k) {
    double s = b1[k];
    for (std::size_t i = 0; i < F; ++i) s += E[i] * W1[i * h1 + k];
    q[k] = std::tanh(s);
  }
  for (std::size_t j = 0; j < C; ++j) {
    double s = b2[j];
    for (std::size_t k = 0; k < h1; ++k) s += q[k] * W2[k * C + j];
    z[j] = s;
  }
  return z;
}

std::vector<double> ref_logits(const model::Params& p, const FeatureSequence& seq) {
  return ref_classify(p, ref_attend(p, ref_bigru(p, ref_embed(p, to_mat(seq.data)))).E);
}

double ref_loss(const std::vector<double>& logits, int label) {
  return cross_entropy(logits.data(), logits.size(), label);
}

std::vector<Tensor> naive_central_differences(const model::Params& p, const FeatureSequence& seq,
                                              double h) {
  std::vector<Tensor> out;
  model::Params probe = p;
  for (std::size_t k = 0; k < p.size(); ++k) {
    std::vector<double> values = p.value(k).to_vector(), d(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      probe.set(k, Tensor(p.value(k).shape(), values));
      const double up = ref_loss(ref_logits(probe, seq), seq.label);
      values[i] = orig - h;
      probe.set(k, Tensor(p.value(k).shape(), values));
      const double down = ref_loss(ref_logits(probe, seq), seq.label);
      values[i] = orig;
      d[i] = (up - down) / (2.0 * h);
    }
    probe.set(k, p.value(k));
    out.emplace_back(p.value(k).shape(), std::move(d));
  }
  return out;
}

namespace {

// One perturbed entry: parameter field, row i, column j, signed step.
struct Variant {
  std::size_t field, i, j;
  double delta;
};

class Staged {
 public:
  Staged(const model::Params& p, const FeatureSequence& seq)
      : p_(p), c_(p.config()), label_(seq.label), x_(to_mat(seq.data)) {
    T_ = x_.rows;
    N_ = c_.input_dim;
    E_ = c_.embed_dim;
    H_ = c_.gru_hidden;
    D_ = 2 * H_;
    A_ = c_.attention_hidden;
    heads_ = c_.attention_heads;
    F_ = c_.feature_dim();
    h1_ = c_.head_hidden;
    C_ = c_.classes;

    pre_.assign(T_ * E_, 0.0);
    kernels::matmul(x_.v.data(), P(p, kEmbW), pre_.data(), T_, E_, N_, false, false);
    for (std::size_t t = 0; t < T_; ++t)
      for (std::size_t e = 0; e < E_; ++e) pre_[t * E_ + e] += P(p, kEmbB)[e];
    X_.assign(T_ * E_, 0.0);
    nrm_.assign(T_ * E_, 0.0);
    for (std::size_t t = 0; t < T_; ++t)
      layer_norm_row(&pre_[t * E_], P(p, kScale), P(p, kShift), &X_[t * E_], &nrm_[t * E_], E_);

    for (std::size_t d = 0; d < 2; ++d) {
      const std::size_t o = kGru0 + 9 * d;
      Wcat_[d].assign(E_ * 3 * H_, 0.0);
      bcat_[d].assign(3 * H_, 0.0);
      Uzr_[d].assign(H_ * 2 * H_, 0.0);
      for (std::size_t g = 0; g < 3; ++g) {
        for (std::size_t i = 0; i < E_; ++i)
          for (std::size_t j = 0; j < H_; ++j)
            Wcat_[d][i * 3 * H_ + g * H_ + j] = P(p, o + fWz + g)[i * H_ + j];
        for (std::size_t j = 0; j < H_; ++j) bcat_[d][g * H_ + j] = P(p, o + fBz + g)[j];
      }
      for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t i = 0; i < H_; ++i)
          for (std::size_t j = 0; j < H_; ++j)
            Uzr_[d][i * 2 * H_ + g * H_ + j] = P(p, o + fUz + g)[i * H_ + j];
      proj_[d] = project(d, X_, 1);
      // W_s1 columns of this direction, transposed to H x A.
      Ws1T_[d].assign(H_ * A_, 0.0);
      for (std::size_t a = 0; a < A_; ++a)
        for (std::size_t j = 0; j < H_; ++j) Ws1T_[d][j * A_ + a] = P(p, kWs1)[a * D_ + d * H_ + j];
    }
    for (std::size_t d = 0; d < 2; ++d) {
      states_[d] = run_direction(d, proj_[d], 0, 1, {});
      hs_part_[d].assign(T_ * A_, 0.0);
      kernels::matmul(states_[d].data(), Ws1T_[d].data(), hs_part_[d].data(), T_, A_, H_, false,
                      false);
    }
    S_ = interleave(states_[0], states_[1], 1, 1);
    hs_.assign(T_ * A_, 0.0);
    for (std::size_t k = 0; k < T_ * A_; ++k) hs_[k] = tanh_(hs_part_[0][k] + hs_part_[1][k]);
    scores_.assign(T_ * heads_, 0.0);
    kernels::matmul(hs_.data(), P(p, kWs2), scores_.data(), T_, heads_, A_, false, true);
    E_base_ = pool(scores_, S_, 1, false);
    u_.assign(h1_, 0.0);
    kernels::matmul(E_base_.data(), P(p, kW1), u_.data(), 1, h1_, F_, false, false);
    for (std::size_t k = 0; k < h1_; ++k) u_[k] += P(p, kB1)[k];
    q_.resize(h1_);
    for (std::size_t k = 0; k < h1_; ++k) q_[k] = tanh_(u_[k]);
    z_.assign(C_, 0.0);
    for (std::size_t j = 0; j < C_; ++j) {
      double s = P(p, kB2)[j];
      for (std::size_t k = 0; k < h1_; ++k) s += q_[k] * P(p, kW2)[k * C_ + j];
      z_[j] = s;
    }
  }

  std::vector<Tensor> central_differences(double h) {
    std::vector<Tensor> out;
    for (std::size_t k = 0; k < p_.size(); ++k) {
      const Shape& shape = p_.value(k).shape();
      const std::size_t rows = shape[0], cols = shape[1];
      std::vector<Variant> variants;
      variants.reserve(2 * rows * cols);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
          variants.push_back({k, i, j, h});
          variants.push_back({k, i, j, -h});
        }
      std::vector<double> losses(variants.size());
      for (std::size_t start = 0; start < variants.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, variants.size() - start);
        std::span<const Variant> chunk(variants.data() + start, n);
        const auto l = evaluate(k, chunk);
        std::copy(l.begin(), l.end(), losses.begin() + static_cast<std::ptrdiff_t>(start));
      }
      std::vector<double> d(rows * cols);
      for (std::size_t e = 0; e < d.size(); ++e) d[e] = (losses[2 * e] - losses[2 * e + 1]) / (2.0 * h);
      out.emplace_back(shape, std::move(d));
    }
    return out;
  }

 private:
  static constexpr std::size_t kChunk = 128;

  std::vector<double> evaluate(std::size_t k, std::span<const Variant> vs) {
    if (k <= kShift) return embedding_losses(vs);
    if (k < kWs1) return gru_losses((k - kGru0) / 9, vs);
    if (k <= kWs2) return attention_losses(vs);
    return head_losses(vs);
  }

  // X (count*T x E) -> count*T x 3H projection for direction d.
  std::vector<double> project(std::size_t d, const std::vector<double>& X, std::size_t count) {
    std::vector<double> out(count * T_ * 3 * H_);
    kernels::matmul(X.data(), Wcat_[d].data(), out.data(), count * T_, 3 * H_, E_, false, false);
    for (std::size_t r = 0; r < count * T_; ++r)
      for (std::size_t j = 0; j < 3 * H_; ++j) out[r * 3 * H_ + j] += bcat_[d][j];
    return out;
  }

  // Batched recurrence of direction d. `proj` holds T x 3H per variant
  // (stride 0 when shared). Returns count x T x H states indexed by time.
  std::vector<double> run_direction(std::size_t d, const std::vector<double>& proj,
                                    std::size_t proj_stride, std::size_t count,
                                    std::span<const Variant> vs) {
    const std::size_t o = kGru0 + 9 * d;
    const double* Uh = P(p_, o + fUh);
    std::vector<double> out(count * T_ * H_);
    std::vector<double> h(count * H_, 0.0), hu(count * 2 * H_), zr(count * 2 * H_),
        rh(count * H_), cu(count * H_);
    for (std::size_t step = 0; step < T_; ++step) {
      const std::size_t t = d == 0 ? step : T_ - 1 - step;
      kernels::matmul(h.data(), Uzr_[d].data(), hu.data(), count, 2 * H_, H_, false, false);
      for (std::size_t v = 0; v < count; ++v) {
        const double* pr = &proj[v * proj_stride + t * 3 * H_];
        double* g = &zr[v * 2 * H_];
        for (std::size_t j = 0; j < 2 * H_; ++j) g[j] = pr[j] + hu[v * 2 * H_ + j];
        if (!vs.empty()) {
          const Variant& var = vs[v];
          const std::size_t f = var.field - o;
          const double* hv = &h[v * H_];
          switch (f) {
            case fWz: g[var.j] += var.delta * X_[t * E_ + var.i]; break;
            case fWr: g[H_ + var.j] += var.delta * X_[t * E_ + var.i]; break;
            case fUz: g[var.j] += var.delta * hv[var.i]; break;
            case fUr: g[H_ + var.j] += var.delta * hv[var.i]; break;
            case fBz: g[var.j] += var.delta; break;
            case fBr: g[H_ + var.j] += var.delta; break;
            default: break;
          }
        }
        for (std::size_t j = 0; j < 2 * H_; ++j) g[j] = sigmoid(g[j]);
        for (std::size_t j = 0; j < H_; ++j) rh[v * H_ + j] = g[H_ + j] * h[v * H_ + j];
      }
      kernels::matmul(rh.data(), Uh, cu.data(), count, H_, H_, false, false);
      for (std::size_t v = 0; v < count; ++v) {
        const double* pr = &proj[v * proj_stride + t * 3 * H_ + 2 * H_];
        double* cv = &cu[v * H_];
        for (std::size_t j = 0; j < H_; ++j) cv[j] += pr[j];
        if (!vs.empty()) {
          const Variant& var = vs[v];
          switch (var.field - o) {
            case fWh: cv[var.j] += var.delta * X_[t * E_ + var.i]; break;
            case fUh: cv[var.j] += var.delta * rh[v * H_ + var.i]; break;
            case fBh: cv[var.j] += var.delta; break;
            default: break;
          }
        }
        const double* z = &zr[v * 2 * H_];
        double* hv = &h[v * H_];
        for (std::size_t j = 0; j < H_; ++j) hv[j] += z[j] * (tanh_(cv[j]) - hv[j]);
        std::copy_n(hv, H_, &out[(v * T_ + t) * H_]);
      }
    }
    return out;
  }

  // Per-variant S (count x T x 2H) from per-direction states; stride 0
  // reuses the base states.
  std::vector<double> interleave(const std::vector<double>& f, const std::vector<double>& b,
                                 std::size_t f_count, std::size_t b_count) const {
    const std::size_t count = std::max(f_count, b_count);
    std::vector<double> S(count * T_ * D_);
    for (std::size_t v = 0; v < count; ++v)
      for (std::size_t t = 0; t < T_; ++t) {
        const double* fs = &f[(f_count == 1 ? 0 : v) * T_ * H_ + t * H_];
        const double* bs = &b[(b_count == 1 ? 0 : v) * T_ * H_ + t * H_];
        std::copy_n(fs, H_, &S[(v * T_ + t) * D_]);
        std::copy_n(bs, H_, &S[(v * T_ + t) * D_ + H_]);
      }
    return S;
  }

  // scores: count x T x heads; S: count x T x 2H, or shared when shared_S.
  std::vector<double> pool(const std::vector<double>& scores, const std::vector<double>& S,
                           std::size_t count, bool shared_S) const {
    std::vector<double> E(count * F_, 0.0), a(T_);
    for (std::size_t v = 0; v < count; ++v) {
      const double* Sv = &S[shared_S ? 0 : v * T_ * D_];
      for (std::size_t j = 0; j < heads_; ++j) {
        for (std::size_t t = 0; t < T_; ++t) a[t] = scores[(v * T_ + t) * heads_ + j];
        softmax_inplace(a.data(), T_);
        double* e = &E[v * F_ + j * D_];
        for (std::size_t t = 0; t < T_; ++t)
          for (std::size_t k = 0; k < D_; ++k) e[k] += a[t] * Sv[t * D_ + k];
      }
    }
    return E;
  }

  std::vector<double> losses_from_E(const std::vector<double>& E, std::size_t count) const {
    std::vector<double> U(count * h1_), Z(count * C_), losses(count);
    kernels::matmul(E.data(), P(p_, kW1), U.data(), count, h1_, F_, false, false);
    for (std::size_t v = 0; v < count; ++v)
      for (std::size_t k = 0; k < h1_; ++k)
        U[v * h1_ + k] = tanh_(U[v * h1_ + k] + P(p_, kB1)[k]);
    kernels::matmul(U.data(), P(p_, kW2), Z.data(), count, C_, h1_, false, false);
    for (std::size_t v = 0; v < count; ++v) {
      for (std::size_t j = 0; j < C_; ++j) Z[v * C_ + j] += P(p_, kB2)[j];
      losses[v] = cross_entropy(&Z[v * C_], C_, label_);
    }
    return losses;
  }

  // Hidden pre-activations (count x T x A) -> losses, with S per variant.
  std::vector<double> losses_from_hidden(std::vector<double>& hidden, const std::vector<double>& S,
                                         std::size_t count, bool shared_S) const {
    for (auto& v : hidden) v = tanh_(v);
    std::vector<double> scores(count * T_ * heads_);
    kernels::matmul(hidden.data(), P(p_, kWs2), scores.data(), count * T_, heads_, A_, false, true);
    return losses_from_E(pool(scores, S, count, shared_S), count);
  }

  std::vector<double> embedding_losses(std::span<const Variant> vs) {
    const std::size_t count = vs.size();
    std::vector<double> X(count * T_ * E_), pre(E_);
    std::vector<double> scale(P(p_, kScale), P(p_, kScale) + E_), shift(P(p_, kShift), P(p_, kShift) + E_);
    for (std::size_t v = 0; v < count; ++v) {
      const Variant& var = vs[v];
      for (std::size_t t = 0; t < T_; ++t) {
        double* out = &X[(v * T_ + t) * E_];
        if (var.field == kScale || var.field == kShift) {
          auto& target = var.field == kScale ? scale : shift;
          const double saved = target[var.j];
          target[var.j] = saved + var.delta;
          for (std::size_t e = 0; e < E_; ++e) out[e] = nrm_[t * E_ + e] * scale[e] + shift[e];
          target[var.j] = saved;
        } else {
          std::copy_n(&pre_[t * E_], E_, pre.begin());
          pre[var.j] += var.field == kEmbW ? var.delta * x_(t, var.i) : var.delta;
          layer_norm_row(pre.data(), scale.data(), shift.data(), out, nullptr, E_);
        }
      }
    }
    std::vector<double> st[2];
    for (std::size_t d = 0; d < 2; ++d)
      st[d] = run_direction(d, project(d, X, count), T_ * 3 * H_, count, {});
    const auto S = interleave(st[0], st[1], count, count);
    std::vector<double> hidden(count * T_ * A_);
    kernels::matmul(S.data(), P(p_, kWs1), hidden.data(), count * T_, A_, D_, false, true);
    return losses_from_hidden(hidden, S, count, false);
  }

  std::vector<double> gru_losses(std::size_t d, std::span<const Variant> vs) {
    const std::size_t count = vs.size();
    const auto states = run_direction(d, proj_[d], 0, count, vs);
    std::vector<double> hidden(count * T_ * A_);
    kernels::matmul(states.data(), Ws1T_[d].data(), hidden.data(), count * T_, A_, H_, false, false);
    const auto& other = hs_part_[1 - d];
    for (std::size_t v = 0; v < count; ++v)
      for (std::size_t k = 0; k < T_ * A_; ++k) hidden[v * T_ * A_ + k] += other[k];
    const auto S = d == 0 ? interleave(states, states_[1], count, 1)
                          : interleave(states_[0], states, 1, count);
    return losses_from_hidden(hidden, S, count, false);
  }

  std::vector<double> attention_losses(std::span<const Variant> vs) {
    const std::size_t count = vs.size();
    std::vector<double> scores(count * T_ * heads_);
    std::vector<double> hs(A_);
    for (std::size_t v = 0; v < count; ++v) {
      const Variant& var = vs[v];
      for (std::size_t t = 0; t < T_; ++t) {
        std::copy_n(&hs_[t * A_], A_, hs.begin());
        if (var.field == kWs1) {
          const double pre = hs_part_[0][t * A_ + var.i] + hs_part_[1][t * A_ + var.i] +
                             var.delta * S_[t * D_ + var.j];
          hs[var.i] = tanh_(pre);
        }
        for (std::size_t j = 0; j < heads_; ++j) {
          double s = 0.0;
          for (std::size_t a = 0; a < A_; ++a) {
            double w = P(p_, kWs2)[j * A_ + a];
            if (var.field == kWs2 && var.i == j && var.j == a) w += var.delta;
            s += hs[a] * w;
          }
          scores[(v * T_ + t) * heads_ + j] = s;
        }
      }
    }
    return losses_from_E(pool(scores, S_, count, true), count);
  }

  std::vector<double> head_losses(std::span<const Variant> vs) {
    std::vector<double> losses(vs.size()), z(C_);
    for (std::size_t v = 0; v < vs.size(); ++v) {
      const Variant& var = vs[v];
      z = z_;
      if (var.field == kW1 || var.field == kB1) {
        const std::size_t k = var.j;
        const double u = u_[k] + (var.field == kW1 ? var.delta * E_base_[var.i] : var.delta);
        const double dq = tanh_(u) - q_[k];
        for (std::size_t j = 0; j < C_; ++j) z[j] += dq * P(p_, kW2)[k * C_ + j];
      } else if (var.field == kW2) {
        z[var.j] += var.delta * q_[var.i];
      } else {
        z[var.j] += var.delta;
      }
      losses[v] = cross_entropy(z.data(), C_, label_);
    }
    return losses;
  }

  const model::Params& p_;
  model::ModelConfig c_;
  int label_;
  Mat x_;
  std::size_t T_, N_, E_, H_, D_, A_, heads_, F_, h1_, C_;
  std::vector<double> pre_, X_, nrm_;
  std::vector<double> Wcat_[2], bcat_[2], Uzr_[2], proj_[2], Ws1T_[2], states_[2], hs_part_[2];
  std::vector<double> S_, hs_, scores_, E_base_, u_, q_, z_;
};

}  // namespace

std::vector<Tensor> central_differences(const model::Params& p, const FeatureSequence& seq,
                                        double h) {
  return Staged(p, seq).central_differences(h);
}

}  // namespace fsq::testing
