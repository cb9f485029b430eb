#pragma once

// Chamfer distance with learned per-point weights.
//
// Two shared-weight PointNet-style feature extractors (f1, f2) and a per-point
// scoring MLP (g) turn each cloud into a weight distribution over its matching
// distances:
//
//   F_io = [f1(S_i), f1(S_o)]
//   F_i  = g([S_i, f2(S_i), F_io])          one score per point of S_i
//   F_o  = g([S_o, f2(S_o), F_io])          one score per point of S_o
//   W    = (sigma + exp(-F^2)) / (n*sigma + sum exp(-F^2))
//   L_R  = 1/2 (mean_x W_i(x) d(x, S_o) + mean_y W_o(y) d(y, S_i))
//
// The loss networks are trained to maximise L_R through L_LCD = -ln(L_R + sigma_r)
// while the reconstruction network minimises L_R.

#include "lcd/autodiff.hpp"
#include "lcd/geometry.hpp"
#include "lcd/params.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcd {

struct LcdConfig {
  std::vector<std::size_t> feature_widths{64, 128, 256};  // f1 and f2 per-point layers
  std::vector<std::size_t> score_widths{256, 64};         // hidden layers of g
  bool siacon = true;  // false drops F_io from the scoring input
  // Initial value of every score. exp(-F^2) has zero slope at F = 0, so an
  // all-zero start would be a stationary point the loss networks never leave;
  // 1/sqrt(2) is where the slope peaks. All scores equal keeps the initial
  // weights exactly uniform either way.
  double initial_score = std::numbers::sqrt2 / 2.0;

  std::size_t feature_dim() const { return feature_widths.back(); }
  std::size_t score_input_dim() const { return 3 + feature_dim() + (siacon ? 2 * feature_dim() : 0); }
};

struct LcdParams {
  LcdConfig config;
  ParamSet params;
};

// Glorot-uniform layers with zero biases, except the output layer of g: zero
// weights and a bias of `initial_score`, so every initial score is the same
// and the initial weights are exactly uniform.
inline LcdParams make_lcd_params(const LcdConfig& config, std::uint64_t seed) {
  if (config.feature_widths.empty()) throw std::invalid_argument("lcd: feature widths are empty");
  LcdParams out{config, {}};
  std::mt19937_64 rng(seed);
  if (config.siacon) add_mlp(out.params, "f1", 3, config.feature_widths, rng);
  add_mlp(out.params, "f2", 3, config.feature_widths, rng);
  auto widths = config.score_widths;
  widths.push_back(1);
  add_mlp(out.params, "g", config.score_input_dim(), widths, rng, /*zero_last=*/true);
  for (double& b : out.params.at("g." + std::to_string(config.score_widths.size()) + ".bias").data())
    b = config.initial_score;
  return out;
}

// Per-point MLP followed by max-pooling over points: [n,3] -> [1,d].
inline Var point_feature(const Bound& p, const std::string& prefix, std::size_t layers, Var cloud) {
  return ad::max_rows(mlp(p, prefix, layers, cloud, /*linear_last=*/false));
}

inline Var siacon(const Bound& p, const LcdConfig& cfg, Var s_in, Var s_out) {
  const std::size_t layers = cfg.feature_widths.size();
  return ad::concat(point_feature(p, "f1", layers, s_in), point_feature(p, "f1", layers, s_out));
}

// Scores [n,1] for cloud `s`. The first layer of g acts on the per-point
// concatenation [s, f2(s), F_io]; its weight rows are split so the shared
// global part is multiplied once per cloud instead of once per point.
inline Var siaatt(const Bound& p, const LcdConfig& cfg, Var s, std::optional<Var> f_io) {
  if (cfg.siacon != f_io.has_value())
    throw std::invalid_argument("siaatt: F_io must be given exactly when SiaCon is enabled");
  Var global = point_feature(p, "f2", cfg.feature_widths.size(), s);
  if (f_io) global = ad::concat(global, *f_io);
  Var w0 = p["g.0.weight"];
  const std::size_t in = cfg.score_input_dim();
  if (w0.value().rows() != in)
    throw std::invalid_argument("siaatt: g.0.weight has " + std::to_string(w0.value().rows()) +
                                " rows, expected " + std::to_string(in));
  Var per_point = ad::matmul(s, ad::slice_rows(w0, 0, 3));
  Var shared = ad::matmul(global, ad::slice_rows(w0, 3, in)) + p["g.0.bias"];
  Var x = per_point + shared;
  const std::size_t layers = cfg.score_widths.size() + 1;
  if (layers == 1) return x;
  x = ad::relu(x);
  for (std::size_t k = 1; k < layers; ++k) {
    x = dense(p, "g", k, x);
    if (k + 1 < layers) x = ad::relu(x);
  }
  return x;
}

inline Var normalize_weights(Var scores, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("normalize_weights: sigma must be positive");
  const double n = static_cast<double>(scores.value().size());
  Var e = ad::exp(-ad::square(scores));
  return (e + sigma) / (ad::sum(e) + n * sigma);
}

inline std::vector<double> normalize_weights(std::span<const double> scores, double sigma) {
  if (scores.empty()) throw std::invalid_argument("normalize_weights: no scores");
  Tape tape;
  Var f = tape.constant(Tensor({scores.size()}, {scores.begin(), scores.end()}));
  Var w = normalize_weights(f, sigma);
  const auto d = w.value().data();
  return {d.begin(), d.end()};
}

// ||src_k - dst[match_k]|| as [n,1]; the matching indices are constants.
inline Var matched_distances(Var src, Var dst, const Matching& m) {
  return ad::row_norm(src - ad::gather_rows(dst, m.indices));
}

inline Matching match(Var src, Var dst, NnMethod method) {
  return nn_match(PointCloud::from_tensor(src.value()), PointCloud::from_tensor(dst.value()), method);
}

// Plain Chamfer distance recorded on the tape.
inline Var chamfer_loss(Var a, Var b, NnMethod method = NnMethod::kdtree) {
  Var d_ab = matched_distances(a, b, match(a, b, method));
  Var d_ba = matched_distances(b, a, match(b, a, method));
  return 0.5 * (ad::mean(d_ab) + ad::mean(d_ba));
}

struct LcdForward {
  Var loss;            // L_R, scalar
  Var w_in, w_out;     // weight distributions [n,1]
  Var f_in, f_out;     // raw scores [n,1]
  std::optional<Var> f_io;
  Matching in_to_out;  // nearest S_o point for every S_i point
  Matching out_to_in;
};

inline LcdForward lcd_forward(const Bound& p, const LcdConfig& cfg, Var s_in, Var s_out,
                              double sigma, NnMethod method = NnMethod::kdtree) {
  if (!(sigma > 0.0)) throw std::invalid_argument("lcd_forward: sigma must be positive");
  LcdForward out;
  if (cfg.siacon) out.f_io = siacon(p, cfg, s_in, s_out);
  out.f_in = siaatt(p, cfg, s_in, out.f_io);
  out.f_out = siaatt(p, cfg, s_out, out.f_io);
  out.w_in = normalize_weights(out.f_in, sigma);
  out.w_out = normalize_weights(out.f_out, sigma);
  out.in_to_out = match(s_in, s_out, method);
  out.out_to_in = match(s_out, s_in, method);
  Var d_in = matched_distances(s_in, s_out, out.in_to_out);
  Var d_out = matched_distances(s_out, s_in, out.out_to_in);
  const double n_in = static_cast<double>(d_in.value().size());
  const double n_out = static_cast<double>(d_out.value().size());
  out.loss = 0.5 * ((1.0 / n_in) * ad::sum(out.w_in * d_in) +
                    (1.0 / n_out) * ad::sum(out.w_out * d_out));
  return out;
}

// L_LCD = -ln(L_R + sigma_r), or -L_R when the log is ablated.
inline Var adversarial_loss(Var l_r, double sigma_r, bool use_log = true) {
  if (!(sigma_r > 0.0)) throw std::invalid_argument("adversarial_loss: sigma_r must be positive");
  if (l_r.value().item() < 0.0)
    throw std::domain_error("adversarial_loss: negative L_R " + std::to_string(l_r.value().item()));
  return use_log ? -ad::log(l_r + sigma_r) : -l_r;
}

inline double adversarial_loss(double l_r, double sigma_r, bool use_log = true) {
  Tape tape;
  return adversarial_loss(tape.constant(Tensor::scalar(l_r)), sigma_r, use_log).value().item();
}

struct LcdValues {
  double loss;
  std::vector<double> w_in, w_out, f_in, f_out;
  Matching in_to_out, out_to_in;
};

// Forward pass with all parameters frozen, for inspection and tests.
inline LcdValues evaluate_lcd(const LcdParams& lp, const PointCloud& s_in, const PointCloud& s_out,
                              double sigma, NnMethod method = NnMethod::kdtree) {
  Tape tape;
  Bound p = bind(tape, lp.params, false);
  auto fw = lcd_forward(p, lp.config, tape.constant(s_in.to_tensor()),
                        tape.constant(s_out.to_tensor()), sigma, method);
  auto vec = [](Var v) {
    auto d = v.value().data();
    return std::vector<double>(d.begin(), d.end());
  };
  return {fw.loss.value().item(), vec(fw.w_in), vec(fw.w_out), vec(fw.f_in), vec(fw.f_out),
          fw.in_to_out, fw.out_to_in};
}

}  // namespace lcd
