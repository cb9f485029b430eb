#pragma once

// PointNet encoder + fully connected decoder autoencoder.

#include "lcd/autodiff.hpp"
#include "lcd/geometry.hpp"
#include "lcd/params.hpp"

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace lcd {

struct ReconConfig {
  std::vector<std::size_t> encoder_widths{64, 128, 128};  // last width is the latent size
  std::vector<std::size_t> decoder_widths{256};           // hidden layers
  std::size_t points = 256;                               // decoded cloud size

  std::size_t latent_dim() const { return encoder_widths.back(); }
};

struct ReconParams {
  ReconConfig config;
  ParamSet params;
};

inline ReconParams make_recon_params(const ReconConfig& config, std::uint64_t seed,
                                     bool zero_output_layer = false) {
  if (config.encoder_widths.empty() || config.points == 0)
    throw std::invalid_argument("reconnet: empty encoder or zero output points");
  ReconParams out{config, {}};
  std::mt19937_64 rng(seed);
  add_mlp(out.params, "encoder", 3, config.encoder_widths, rng);
  auto widths = config.decoder_widths;
  widths.push_back(config.points * 3);
  add_mlp(out.params, "decoder", config.latent_dim(), widths, rng, zero_output_layer);
  return out;
}

inline Var encode(const Bound& p, const ReconConfig& cfg, Var cloud) {
  return ad::max_rows(mlp(p, "encoder", cfg.encoder_widths.size(), cloud, /*linear_last=*/false));
}

inline Var decode(const Bound& p, const ReconConfig& cfg, Var latent) {
  if (latent.value().size() != cfg.latent_dim())
    throw std::invalid_argument("decode: latent has " + std::to_string(latent.value().size()) +
                                " entries, expected " + std::to_string(cfg.latent_dim()));
  Var x = ad::reshape(latent, {1, cfg.latent_dim()});
  x = mlp(p, "decoder", cfg.decoder_widths.size() + 1, x, /*linear_last=*/true);
  return ad::reshape(x, {cfg.points, 3});
}

inline Var reconstruct(const Bound& p, const ReconConfig& cfg, Var cloud) {
  return decode(p, cfg, encode(p, cfg, cloud));
}

inline std::vector<double> encode(const ReconParams& rp, const PointCloud& cloud) {
  Tape tape;
  Var z = encode(bind(tape, rp.params, false), rp.config, tape.constant(cloud.to_tensor()));
  auto d = z.value().data();
  return {d.begin(), d.end()};
}

inline PointCloud decode(const ReconParams& rp, std::span<const double> latent) {
  Tape tape;
  Var z = tape.constant(Tensor({latent.size()}, {latent.begin(), latent.end()}));
  return PointCloud::from_tensor(decode(bind(tape, rp.params, false), rp.config, z).value());
}

inline PointCloud reconstruct(const ReconParams& rp, const PointCloud& cloud) {
  Tape tape;
  Var out = reconstruct(bind(tape, rp.params, false), rp.config, tape.constant(cloud.to_tensor()));
  return PointCloud::from_tensor(out.value());
}

}  // namespace lcd
