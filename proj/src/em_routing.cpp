#include "qcaps/em_routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "qcaps/error.hpp"

namespace qcaps {

namespace {

template <typename Scalar>
Scalar log_sigmoid(Scalar z) {
  return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

template <typename Scalar>
Scalar sigmoid_of(Scalar z) {
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

/// One routing instance with N children, P parents and D pose dimensions.
/// Forward keeps every iteration's intermediates so that backward can walk
/// the unrolled iterations in reverse.
template <typename Scalar, int D>
class RoutingKernel {
 public:
  RoutingKernel(Index children, Index parents, const RoutingConfig& config)
      : n_(children), p_(parents), t_(config.iterations), cfg_(config) {
    votes.resize(static_cast<std::size_t>(n_ * p_ * D));
    child_acts.resize(static_cast<std::size_t>(n_));
    resp_.resize(static_cast<std::size_t>(t_ * n_ * p_));
    mass_.resize(static_cast<std::size_t>(t_ * p_));
    mu_.resize(static_cast<std::size_t>(t_ * p_ * D));
    var_.resize(static_cast<std::size_t>(t_ * p_ * D));
    z_.resize(static_cast<std::size_t>(t_ * p_));
    act_.resize(static_cast<std::size_t>(t_ * p_));
    fallback_.resize(static_cast<std::size_t>(t_ * p_));
  }

  std::vector<Scalar> votes;       // [N, P, D]
  std::vector<Scalar> child_acts;  // [N]

  void forward(const Scalar* beta_a, const Scalar* beta_u) {
    std::fill(resp_.begin(), resp_.begin() + n_ * p_, Scalar(1) / static_cast<Scalar>(p_));
    for (int t = 0; t < t_; ++t) {
      const Scalar lambda = static_cast<Scalar>(cfg_.inverse_temperature(t));
      m_step(R(t), beta_a, beta_u, lambda, mass(t), mu(t), var(t), z(t), act(t), fallback(t));
      if (t + 1 < t_) {
        std::vector<Scalar> log_a(static_cast<std::size_t>(p_));
        for (Index j = 0; j < p_; ++j) log_a[j] = log_sigmoid(z(t)[j]);
        e_step(mu(t), var(t), log_a.data(), R(t + 1));
      }
    }
  }

  const Scalar* final_means() const { return mu_.data() + (t_ - 1) * p_ * D; }
  const Scalar* final_acts() const { return act_.data() + (t_ - 1) * p_; }
  const Scalar* final_variances() const { return var_.data() + (t_ - 1) * p_ * D; }
  const Scalar* final_responsibilities() const { return resp_.data() + (t_ - 1) * n_ * p_; }

  void m_step(const Scalar* resp, const Scalar* beta_a, const Scalar* beta_u, Scalar lambda, Scalar* mass,
              Scalar* mu, Scalar* var, Scalar* z, Scalar* a, unsigned char* fallback) const {
    const Scalar eps_mass = static_cast<Scalar>(cfg_.eps_mass);
    const Scalar eps_var = static_cast<Scalar>(cfg_.eps_var);
    std::vector<Scalar> raw(static_cast<std::size_t>(p_), Scalar(0));
    std::fill(mu, mu + p_ * D, Scalar(0));
    for (Index n = 0; n < n_; ++n) {
      const Scalar an = child_acts[n];
      const Scalar* rn = resp + n * p_;
      const Scalar* vn = votes.data() + n * p_ * D;
      for (Index j = 0; j < p_; ++j) {
        const Scalar r = rn[j] * an;
        raw[j] += r;
        for (int h = 0; h < D; ++h) mu[j * D + h] += r * vn[j * D + h];
      }
    }
    for (Index j = 0; j < p_; ++j) {
      fallback[j] = raw[j] == Scalar(0) ? 1 : 0;
      mass[j] = raw[j] + eps_mass;
      if (fallback[j]) {
        for (int h = 0; h < D; ++h) {
          Scalar s = 0;
          for (Index n = 0; n < n_; ++n) s += votes[(n * p_ + j) * D + h];
          mu[j * D + h] = s / static_cast<Scalar>(n_);
        }
      } else {
        // Raw mass keeps identical votes an exact fixed point.
        for (int h = 0; h < D; ++h) mu[j * D + h] /= raw[j];
      }
    }
    std::fill(var, var + p_ * D, Scalar(0));
    for (Index n = 0; n < n_; ++n) {
      const Scalar an = child_acts[n];
      const Scalar* rn = resp + n * p_;
      const Scalar* vn = votes.data() + n * p_ * D;
      for (Index j = 0; j < p_; ++j) {
        const Scalar r = rn[j] * an;
        for (int h = 0; h < D; ++h) {
          const Scalar d = vn[j * D + h] - mu[j * D + h];
          var[j * D + h] += r * d * d;
        }
      }
    }
    for (Index j = 0; j < p_; ++j) {
      Scalar cost = 0;
      for (int h = 0; h < D; ++h) {
        var[j * D + h] = var[j * D + h] / mass[j] + eps_var;
        cost += (beta_u[j] + Scalar(0.5) * std::log(var[j * D + h])) * raw[j];
      }
      z[j] = lambda * (beta_a[j] - cost);
      a[j] = sigmoid_of(z[j]);
    }
  }

  void e_step(const Scalar* mu, const Scalar* var, const Scalar* log_a, Scalar* resp_out) const {
    const Scalar two_pi = Scalar(2) * std::numbers::pi_v<Scalar>;
    std::vector<Scalar> base(static_cast<std::size_t>(p_));
    std::vector<Scalar> inv2(static_cast<std::size_t>(p_ * D));
    for (Index j = 0; j < p_; ++j) {
      Scalar b = log_a[j];
      for (int h = 0; h < D; ++h) {
        b -= Scalar(0.5) * std::log(two_pi * var[j * D + h]);
        inv2[j * D + h] = Scalar(0.5) / var[j * D + h];
      }
      base[j] = b;
    }
    for (Index n = 0; n < n_; ++n) {
      const Scalar* vn = votes.data() + n * p_ * D;
      Scalar* out = resp_out + n * p_;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < p_; ++j) {
        Scalar l = base[j];
        for (int h = 0; h < D; ++h) {
          const Scalar d = vn[j * D + h] - mu[j * D + h];
          l -= d * d * inv2[j * D + h];
        }
        out[j] = l;
        mx = std::max(mx, l);
      }
      Scalar total = 0;
      for (Index j = 0; j < p_; ++j) {
        out[j] = std::exp(out[j] - mx);
        total += out[j];
      }
      const Scalar inv = Scalar(1) / total;
      for (Index j = 0; j < p_; ++j) out[j] *= inv;
    }
  }

  /// Requires a preceding forward(). Accumulates into the output buffers.
  void backward(const Scalar* beta_u, const Scalar* g_mu_out, const Scalar* g_act_out, Scalar* g_votes,
                Scalar* g_child_acts, Scalar* g_beta_a, Scalar* g_beta_u) const {
    const Scalar eps_var = static_cast<Scalar>(cfg_.eps_var);
    const Scalar eps_mass = static_cast<Scalar>(cfg_.eps_mass);
    std::vector<Scalar> g_resp(static_cast<std::size_t>(n_ * p_), Scalar(0));
    std::vector<Scalar> g_resp_prev(static_cast<std::size_t>(n_ * p_), Scalar(0));
    std::vector<Scalar> gmu(static_cast<std::size_t>(p_ * D));
    std::vector<Scalar> gvar(static_cast<std::size_t>(p_ * D));
    std::vector<Scalar> gz(static_cast<std::size_t>(p_));
    std::vector<Scalar> gm(static_cast<std::size_t>(p_));
    std::vector<Scalar> spread(static_cast<std::size_t>(p_ * D));
    std::vector<Scalar> inv_var(static_cast<std::size_t>(p_ * D));
    std::vector<Scalar> inv_mass(static_cast<std::size_t>(p_));
    std::vector<Scalar> inv_raw(static_cast<std::size_t>(p_));

    for (int t = t_ - 1; t >= 0; --t) {
      const Scalar lambda = static_cast<Scalar>(cfg_.inverse_temperature(t));
      const Scalar* mu_t = mu(t);
      const Scalar* var_t = var(t);
      const Scalar* a_t = act(t);
      const Scalar* m_t = mass(t);
      const unsigned char* fb = fallback(t);
      std::fill(gvar.begin(), gvar.end(), Scalar(0));
      std::fill(gm.begin(), gm.end(), Scalar(0));
      if (t == t_ - 1) {
        std::copy(g_mu_out, g_mu_out + p_ * D, gmu.begin());
        for (Index j = 0; j < p_; ++j) gz[j] = g_act_out[j] * a_t[j] * (Scalar(1) - a_t[j]);
      } else {
        std::fill(gmu.begin(), gmu.end(), Scalar(0));
        std::fill(gz.begin(), gz.end(), Scalar(0));
        // E-step t produced R(t + 1) from (mu_t, var_t, z_t).
        const Scalar* rn_all = R(t + 1);
        for (Index k = 0; k < p_ * D; ++k) inv_var[k] = Scalar(1) / var_t[k];
        for (Index n = 0; n < n_; ++n) {
          const Scalar* rn = rn_all + n * p_;
          const Scalar* gr = g_resp.data() + n * p_;
          const Scalar* vn = votes.data() + n * p_ * D;
          Scalar* gvn = g_votes + n * p_ * D;
          Scalar dot = 0;
          for (Index j = 0; j < p_; ++j) dot += rn[j] * gr[j];
          for (Index j = 0; j < p_; ++j) {
            const Scalar gl = rn[j] * (gr[j] - dot);
            gz[j] += gl * (Scalar(1) - a_t[j]);
            for (int h = 0; h < D; ++h) {
              const Scalar iv = inv_var[j * D + h];
              const Scalar d = vn[j * D + h] - mu_t[j * D + h];
              const Scalar gd = -gl * d * iv;
              gvar[j * D + h] += Scalar(0.5) * gl * iv * (d * d * iv - Scalar(1));
              gvn[j * D + h] += gd;
              gmu[j * D + h] -= gd;
            }
          }
        }
      }

      // a = sigmoid(z), z = lambda (beta_a - sum_h cost_h)
      for (Index j = 0; j < p_; ++j) {
        g_beta_a[j] += lambda * gz[j];
        const Scalar gc = -lambda * gz[j];
        const Scalar raw = m_t[j] - eps_mass;
        for (int h = 0; h < D; ++h) {
          const Scalar v = var_t[j * D + h];
          g_beta_u[j] += gc * raw;
          gvar[j * D + h] += gc * raw / (Scalar(2) * v);
          gm[j] += gc * (beta_u[j] + Scalar(0.5) * std::log(v));
        }
      }

      // var = sum r d^2 / m + eps: the mean's share needs sum_n r d.
      const Scalar* resp_t = R(t);
      std::fill(spread.begin(), spread.end(), Scalar(0));
      for (Index n = 0; n < n_; ++n) {
        const Scalar an = child_acts[n];
        const Scalar* rn = resp_t + n * p_;
        const Scalar* vn = votes.data() + n * p_ * D;
        for (Index j = 0; j < p_; ++j) {
          const Scalar r = rn[j] * an;
          for (int h = 0; h < D; ++h) spread[j * D + h] += r * (vn[j * D + h] - mu_t[j * D + h]);
        }
      }
      for (Index j = 0; j < p_; ++j) {
        for (int h = 0; h < D; ++h) {
          const Index k = j * D + h;
          gm[j] -= gvar[k] * (var_t[k] - eps_var) / m_t[j];
          gmu[k] -= gvar[k] * Scalar(2) * spread[k] / m_t[j];
          if (!fb[j]) gm[j] -= gmu[k] * mu_t[k] / (m_t[j] - eps_mass);
        }
      }

      const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n_);
      for (Index j = 0; j < p_; ++j) {
        inv_mass[j] = Scalar(1) / m_t[j];
        inv_raw[j] = fb[j] ? Scalar(0) : Scalar(1) / (m_t[j] - eps_mass);
      }
      for (Index n = 0; n < n_; ++n) {
        const Scalar an = child_acts[n];
        const Scalar* rn = resp_t + n * p_;
        const Scalar* vn = votes.data() + n * p_ * D;
        Scalar* gvn = g_votes + n * p_ * D;
        Scalar* grp = g_resp_prev.data() + n * p_;
        Scalar g_an = 0;
        for (Index j = 0; j < p_; ++j) {
          const Scalar r = rn[j] * an;
          const Scalar inv_m = inv_mass[j];
          Scalar gr = gm[j];
          for (int h = 0; h < D; ++h) {
            const Index k = j * D + h;
            const Scalar d = vn[k] - mu_t[k];
            gr += gvar[k] * d * d * inv_m;
            gvn[k] += gvar[k] * Scalar(2) * r * d * inv_m;
            if (fb[j]) {
              gvn[k] += gmu[k] * inv_n;
            } else {
              gr += gmu[k] * vn[k] * inv_raw[j];
              gvn[k] += gmu[k] * r * inv_raw[j];
            }
          }
          grp[j] = gr * an;
          g_an += gr * rn[j];
        }
        g_child_acts[n] += g_an;
      }
      std::swap(g_resp, g_resp_prev);
    }
  }

 private:
  Scalar* R(int t) { return resp_.data() + t * n_ * p_; }
  const Scalar* R(int t) const { return resp_.data() + t * n_ * p_; }
  Scalar* mass(int t) { return mass_.data() + t * p_; }
  const Scalar* mass(int t) const { return mass_.data() + t * p_; }
  Scalar* mu(int t) { return mu_.data() + t * p_ * D; }
  const Scalar* mu(int t) const { return mu_.data() + t * p_ * D; }
  Scalar* var(int t) { return var_.data() + t * p_ * D; }
  const Scalar* var(int t) const { return var_.data() + t * p_ * D; }
  Scalar* z(int t) { return z_.data() + t * p_; }
  const Scalar* z(int t) const { return z_.data() + t * p_; }
  Scalar* act(int t) { return act_.data() + t * p_; }
  const Scalar* act(int t) const { return act_.data() + t * p_; }
  unsigned char* fallback(int t) { return fallback_.data() + t * p_; }
  const unsigned char* fallback(int t) const { return fallback_.data() + t * p_; }

  Index n_, p_;
  int t_;
  RoutingConfig cfg_;
  std::vector<Scalar> resp_, mass_, mu_, var_, z_, act_;
  std::vector<unsigned char> fallback_;
};

void check_config(const RoutingConfig& c) {
  if (c.iterations < 1) throw ConfigError("routing iterations must be >= 1");
  if (!(c.eps_var > 0) || !(c.eps_mass > 0)) throw ConfigError("routing epsilon floors must be positive");
}

/// Dispatches on the pose dimensionality.
template <typename Scalar, typename F>
void with_dim(Index d, F&& f) {
  switch (d) {
    case 1: f.template operator()<Scalar, 1>(); break;
    case 2: f.template operator()<Scalar, 2>(); break;
    case 3: f.template operator()<Scalar, 3>(); break;
    case 4: f.template operator()<Scalar, 4>(); break;
    default: throw ShapeMismatch("ShapeMismatch: routing supports pose dimension 1..4, got " + std::to_string(d));
  }
}

template <typename Scalar>
void check_instance_shapes(const Tensor<Scalar>& votes, const Tensor<Scalar>& child_acts,
                           const Tensor<Scalar>& beta_a, const Tensor<Scalar>& beta_u) {
  if (votes.ndim() != 3) throw ShapeMismatch("ShapeMismatch: votes must be [N,P,D], got " + shape_string(votes.shape()));
  const Index n = votes.dim(0), p = votes.dim(1);
  if (child_acts.shape() != Shape{n} || beta_a.shape() != Shape{p} || beta_u.shape() != Shape{p}) {
    throw ShapeMismatch("ShapeMismatch: votes " + shape_string(votes.shape()) + " acts " +
                        shape_string(child_acts.shape()) + " beta_a " + shape_string(beta_a.shape()) + " beta_u " +
                        shape_string(beta_u.shape()));
  }
}

}  // namespace

WindowTable WindowTable::all(Index locations) {
  WindowTable w;
  w.positions = 1;
  w.width = locations;
  w.locations.resize(static_cast<std::size_t>(locations));
  for (Index i = 0; i < locations; ++i) w.locations[i] = i;
  return w;
}

template <typename Scalar>
MStepResult<Scalar> m_step(const Tensor<Scalar>& responsibilities, const Tensor<Scalar>& child_acts,
                           const Tensor<Scalar>& votes, const Tensor<Scalar>& beta_a, const Tensor<Scalar>& beta_u,
                           Scalar inverse_temperature, const RoutingConfig& config) {
  check_instance_shapes(votes, child_acts, beta_a, beta_u);
  const Index n = votes.dim(0), p = votes.dim(1), d = votes.dim(2);
  if (responsibilities.shape() != Shape{n, p}) {
    throw ShapeMismatch("ShapeMismatch: responsibilities " + shape_string(responsibilities.shape()));
  }
  MStepResult<Scalar> out{Tensor<Scalar>(Shape{p, d}), Tensor<Scalar>(Shape{p, d}), Tensor<Scalar>(Shape{p})};
  RoutingConfig one = config;
  one.iterations = 1;
  with_dim<Scalar>(d, [&]<typename S, int D>() {
    RoutingKernel<S, D> k(n, p, one);
    std::copy(votes.data(), votes.data() + votes.size(), k.votes.begin());
    std::copy(child_acts.data(), child_acts.data() + n, k.child_acts.begin());
    std::vector<S> mass(p), z(p);
    std::vector<unsigned char> fb(p);
    k.m_step(responsibilities.data(), beta_a.data(), beta_u.data(), inverse_temperature, mass.data(),
             out.means.data(), out.variances.data(), z.data(), out.activations.data(), fb.data());
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> e_step(const Tensor<Scalar>& means, const Tensor<Scalar>& variances, const Tensor<Scalar>& parent_acts,
                      const Tensor<Scalar>& votes) {
  if (votes.ndim() != 3 || means.shape() != Shape{votes.dim(1), votes.dim(2)} || variances.shape() != means.shape() ||
      parent_acts.shape() != Shape{votes.dim(1)}) {
    throw ShapeMismatch("ShapeMismatch: e_step votes " + shape_string(votes.shape()) + " means " +
                        shape_string(means.shape()));
  }
  const Index n = votes.dim(0), p = votes.dim(1), d = votes.dim(2);
  Tensor<Scalar> out(Shape{n, p});
  std::vector<Scalar> log_a(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) log_a[j] = std::log(parent_acts[j]);
  with_dim<Scalar>(d, [&]<typename S, int D>() {
    RoutingKernel<S, D> k(n, p, RoutingConfig{});
    std::copy(votes.data(), votes.data() + votes.size(), k.votes.begin());
    k.e_step(means.data(), variances.data(), log_a.data(), out.data());
  });
  return out;
}

template <typename Scalar>
RoutingState<Scalar> em_route(const Tensor<Scalar>& votes, const Tensor<Scalar>& child_acts,
                              const Tensor<Scalar>& beta_a, const Tensor<Scalar>& beta_u,
                              const RoutingConfig& config) {
  check_config(config);
  check_instance_shapes(votes, child_acts, beta_a, beta_u);
  const Index n = votes.dim(0), p = votes.dim(1), d = votes.dim(2);
  RoutingState<Scalar> st{Tensor<Scalar>(Shape{n, p}), Tensor<Scalar>(Shape{p, d}), Tensor<Scalar>(Shape{p, d}),
                          Tensor<Scalar>(Shape{p}),
                          static_cast<Scalar>(config.inverse_temperature(config.iterations - 1))};
  with_dim<Scalar>(d, [&]<typename S, int D>() {
    RoutingKernel<S, D> k(n, p, config);
    std::copy(votes.data(), votes.data() + votes.size(), k.votes.begin());
    std::copy(child_acts.data(), child_acts.data() + n, k.child_acts.begin());
    k.forward(beta_a.data(), beta_u.data());
    std::copy(k.final_responsibilities(), k.final_responsibilities() + n * p, st.responsibilities.data());
    std::copy(k.final_means(), k.final_means() + p * d, st.means.data());
    std::copy(k.final_variances(), k.final_variances() + p * d, st.variances.data());
    std::copy(k.final_acts(), k.final_acts() + p, st.activations.data());
  });
  return st;
}

template <typename Scalar>
Var<Scalar> em_routing(const Var<Scalar>& votes, const Var<Scalar>& acts, const Var<Scalar>& beta_a,
                       const Var<Scalar>& beta_u, const WindowTable& windows, const RoutingConfig& config) {
  check_config(config);
  const Shape& vs = votes.shape();
  if (vs.size() != 5) throw ShapeMismatch("ShapeMismatch: votes must be [B,V,Tin,Tout,D], got " + shape_string(vs));
  const Index batch = vs[0], locs = vs[1], tin = vs[2], tout = vs[3], d = vs[4];
  if (acts.shape() != Shape{batch, locs, tin} || beta_a.shape() != Shape{tout} || beta_u.shape() != Shape{tout}) {
    throw ShapeMismatch("ShapeMismatch: votes " + shape_string(vs) + " acts " + shape_string(acts.shape()) +
                        " beta_a " + shape_string(beta_a.shape()) + " beta_u " + shape_string(beta_u.shape()));
  }
  if (windows.width < 1 || windows.positions < 1 ||
      static_cast<Index>(windows.locations.size()) != windows.positions * windows.width) {
    throw EmptyChildren("EmptyChildren: window table is empty or inconsistent");
  }
  for (Index loc : windows.locations) {
    if (loc < 0 || loc >= locs) throw ShapeMismatch("ShapeMismatch: window location " + std::to_string(loc));
  }
  const Index children = windows.width * tin;
  const Index positions = windows.positions;
  const Index block = tout * d;

  auto gather = [=](auto& k, const Scalar* pv, const Scalar* pa, Index b, Index p) {
    for (Index s = 0; s < windows.width; ++s) {
      const Index loc = windows.locations[p * windows.width + s];
      const Scalar* src = pv + ((b * locs + loc) * tin) * block;
      std::copy(src, src + tin * block, k.votes.begin() + s * tin * block);
      const Scalar* asrc = pa + (b * locs + loc) * tin;
      std::copy(asrc, asrc + tin, k.child_acts.begin() + s * tin);
    }
  };

  Tensor<Scalar> out(Shape{batch, positions, tout, d + 1});
  with_dim<Scalar>(d, [&]<typename S, int D>() {
    RoutingKernel<S, D> k(children, tout, config);
    for (Index b = 0; b < batch; ++b) {
      for (Index p = 0; p < positions; ++p) {
        gather(k, votes.value().data(), acts.value().data(), b, p);
        k.forward(beta_a.value().data(), beta_u.value().data());
        S* dst = out.data() + (b * positions + p) * tout * (D + 1);
        for (Index j = 0; j < tout; ++j) {
          for (int h = 0; h < D; ++h) dst[j * (D + 1) + h] = k.final_means()[j * D + h];
          dst[j * (D + 1) + D] = k.final_acts()[j];
        }
      }
    }
  });

  return make_op<Scalar>(
      std::move(out), {votes, acts, beta_a, beta_u},
      [votes, acts, beta_a, beta_u, windows, config, gather, batch, positions, locs, tin, tout, d, children,
       block](Node<Scalar>& self) {
        std::vector<Scalar> g_ba(static_cast<std::size_t>(tout), Scalar(0));
        std::vector<Scalar> g_bu(static_cast<std::size_t>(tout), Scalar(0));
        Scalar* gv = votes.requires_grad() ? votes.node()->grad_ref().data() : nullptr;
        Scalar* ga = acts.requires_grad() ? acts.node()->grad_ref().data() : nullptr;
        with_dim<Scalar>(d, [&]<typename S, int D>() {
          RoutingKernel<S, D> k(children, tout, config);
          std::vector<S> g_mu(static_cast<std::size_t>(tout * D));
          std::vector<S> g_act(static_cast<std::size_t>(tout));
          std::vector<S> g_votes(static_cast<std::size_t>(children * tout * D));
          std::vector<S> g_child(static_cast<std::size_t>(children));
          for (Index b = 0; b < batch; ++b) {
            for (Index p = 0; p < positions; ++p) {
              const S* g = self.grad.data() + (b * positions + p) * tout * (D + 1);
              bool any = false;
              for (Index j = 0; j < tout; ++j) {
                for (int h = 0; h < D; ++h) g_mu[j * D + h] = g[j * (D + 1) + h];
                g_act[j] = g[j * (D + 1) + D];
              }
              for (Index i = 0; i < tout * (D + 1); ++i) any = any || g[i] != S(0);
              if (!any) continue;
              gather(k, votes.value().data(), acts.value().data(), b, p);
              k.forward(beta_a.value().data(), beta_u.value().data());
              std::fill(g_votes.begin(), g_votes.end(), S(0));
              std::fill(g_child.begin(), g_child.end(), S(0));
              k.backward(beta_u.value().data(), g_mu.data(), g_act.data(), g_votes.data(), g_child.data(),
                         g_ba.data(), g_bu.data());
              for (Index s = 0; s < windows.width; ++s) {
                const Index loc = windows.locations[p * windows.width + s];
                if (gv) {
                  S* dst = gv + ((b * locs + loc) * tin) * block;
                  const S* src = g_votes.data() + s * tin * block;
                  for (Index i = 0; i < tin * block; ++i) dst[i] += src[i];
                }
                if (ga) {
                  S* dst = ga + (b * locs + loc) * tin;
                  const S* src = g_child.data() + s * tin;
                  for (Index i = 0; i < tin; ++i) dst[i] += src[i];
                }
              }
            }
          }
        });
        if (beta_a.requires_grad()) {
          Scalar* dst = beta_a.node()->grad_ref().data();
          for (Index j = 0; j < tout; ++j) dst[j] += g_ba[j];
        }
        if (beta_u.requires_grad()) {
          Scalar* dst = beta_u.node()->grad_ref().data();
          for (Index j = 0; j < tout; ++j) dst[j] += g_bu[j];
        }
      });
}

#define QCAPS_INSTANTIATE_ROUTING(S)                                                                            \
  template MStepResult<S> m_step(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,        \
                                 const Tensor<S>&, S, const RoutingConfig&);                                    \
  template Tensor<S> e_step(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);            \
  template RoutingState<S> em_route(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,     \
                                    const RoutingConfig&);                                                      \
  template Var<S> em_routing(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, const WindowTable&,    \
                             const RoutingConfig&);

QCAPS_INSTANTIATE_ROUTING(float)
QCAPS_INSTANTIATE_ROUTING(double)

}  // namespace qcaps
