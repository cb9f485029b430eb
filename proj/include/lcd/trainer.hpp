#pragma once

// Alternating adversarial training: each iteration first updates the loss
// networks on L_LCD with the reconstruction network fixed, then updates the
// reconstruction network on L_R with the loss networks fixed.

#include "lcd/dataio.hpp"
#include "lcd/geometry.hpp"
#include "lcd/lcdloss.hpp"
#include "lcd/params.hpp"
#include "lcd/reconnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcd {

enum class LossMode { cd, lcd };

inline const char* loss_mode_name(LossMode m) { return m == LossMode::cd ? "cd" : "lcd"; }

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch = 8;
  std::size_t points = 256;
  double lr_recon = 1e-4;
  double lr_lcd = 2e-3;
  double sigma = 0.01;
  double sigma_r = 1e-8;
  LossMode loss = LossMode::lcd;
  bool no_siacon = false;
  bool no_log = false;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 50;

  // Synthetic data, used when `data` is empty.
  std::vector<Family> families = all_families();
  std::size_t shapes = 200;
  double noise = 0.0;
  std::filesystem::path data;  // manifest of xyz files

  std::filesystem::path out;   // metrics.csv and checkpoints go here when set
  bool record_timing = false;  // ms_per_step is left blank otherwise so CSVs stay reproducible
  NnMethod nn = NnMethod::kdtree;

  LcdConfig lcd_net{};
  ReconConfig recon_net{};

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
    if (iterations < 1) fail("iterations must be >= 1");
    if (batch < 1) fail("batch must be >= 1");
    if (points < 8) fail("points must be >= 8");
    if (!(lr_recon >= 0.0) || !(lr_lcd >= 0.0)) fail("learning rates must be >= 0");
    if (!(sigma > 0.0)) fail("sigma must be > 0");
    if (!(sigma_r > 0.0)) fail("sigma_r must be > 0");
    if (eval_interval < 1) fail("eval interval must be >= 1");
    if (data.empty() && (families.empty() || shapes < 2)) fail("need >= 2 shapes and a family");
  }

  LcdConfig lcd_config() const {
    LcdConfig c = lcd_net;
    c.siacon = !no_siacon;
    return c;
  }
  ReconConfig recon_config() const {
    ReconConfig c = recon_net;
    c.points = points;
    return c;
  }
};

struct MetricsRecord {
  std::size_t iteration = 0;
  double cd = 0.0, mcd = 0.0, hd = 0.0;
  std::optional<double> l_r, l_lcd, ms_per_step;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(const std::string& what) : std::runtime_error(what) {}
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace detail {

inline std::string param_norms(const ParamSet& ps) {
  std::ostringstream os;
  for (const auto& e : ps.entries()) os << "  " << e.name << " |w|=" << l2_norm(e.value) << '\n';
  return os.str();
}

inline void require_finite(double v, const char* phase, const std::vector<double>& per_sample,
                           const LcdParams* lcd, const ReconParams& recon) {
  if (std::isfinite(v)) return;
  std::ostringstream os;
  os << "non-finite loss in " << phase << " phase (value " << v << ")\nper-sample losses:";
  for (double x : per_sample) os << ' ' << x;
  os << "\nreconstruction parameter norms:\n" << param_norms(recon.params);
  if (lcd) os << "loss-network parameter norms:\n" << param_norms(lcd->params);
  throw NonFiniteLoss(os.str());
}

}  // namespace detail

// Reconstructions of the batch with the current parameters, values only.
inline std::vector<Tensor> reconstruct_batch(const std::vector<PointCloud>& batch,
                                             const ReconParams& recon) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    Tape tape;
    Var so = reconstruct(bind(tape, recon.params, false), recon.config, tape.constant(s.to_tensor()));
    if (!so.value().all_finite())
      throw NonFiniteLoss("non-finite reconstruction\nreconstruction parameter norms:\n" +
                          detail::param_norms(recon.params));
    out.push_back(so.value());
  }
  return out;
}

struct LcdUpdate {
  double l_r;    // batch-mean L_R before the update
  double l_lcd;  // adversarial objective computed from it
};

// Descends L_LCD in the loss-network parameters; reconstructions are constants.
inline LcdUpdate lcd_update(const std::vector<PointCloud>& batch, const std::vector<Tensor>& outputs,
                            LcdParams& lcd, const ReconParams& recon, const TrainConfig& cfg) {
  Tape tape;
  Bound p = bind(tape, lcd.params, true);
  std::optional<Var> total;
  std::vector<double> per_sample;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto fw = lcd_forward(p, lcd.config, tape.constant(batch[b].to_tensor()),
                          tape.constant(outputs[b]), cfg.sigma, cfg.nn);
    per_sample.push_back(fw.loss.value().item());
    total = total ? *total + fw.loss : fw.loss;
  }
  Var l_r = (1.0 / static_cast<double>(batch.size())) * *total;
  detail::require_finite(l_r.value().item(), "loss-network", per_sample, &lcd, recon);
  Var adv = adversarial_loss(l_r, cfg.sigma_r, !cfg.no_log);
  detail::require_finite(adv.value().item(), "loss-network", per_sample, &lcd, recon);
  auto grads = tape.backward(adv);
  adam_update(lcd.params, grads, cfg.lr_lcd);
  return {l_r.value().item(), adv.value().item()};
}

// Descends the reconstruction loss (L_R, or plain Chamfer in cd mode) in the
// reconstruction parameters; the loss networks stay fixed but gradients still
// flow through the weights' dependence on the reconstructed cloud.
inline double recon_update(const std::vector<PointCloud>& batch, const LcdParams* lcd,
                           ReconParams& recon, const TrainConfig& cfg) {
  Tape tape;
  Bound pr = bind(tape, recon.params, true);
  std::optional<Bound> pl;
  if (lcd) pl = bind(tape, lcd->params, false);
  std::optional<Var> total;
  std::vector<double> per_sample;
  for (const auto& s : batch) {
    Var si = tape.constant(s.to_tensor());
    Var so = reconstruct(pr, recon.config, si);
    if (!so.value().all_finite())
      throw NonFiniteLoss("non-finite reconstruction\nreconstruction parameter norms:\n" +
                          detail::param_norms(recon.params));
    Var loss = lcd ? lcd_forward(*pl, lcd->config, si, so, cfg.sigma, cfg.nn).loss
                   : chamfer_loss(si, so, cfg.nn);
    per_sample.push_back(loss.value().item());
    total = total ? *total + loss : loss;
  }
  Var mean = (1.0 / static_cast<double>(batch.size())) * *total;
  detail::require_finite(mean.value().item(), "reconstruction", per_sample, lcd, recon);
  auto grads = tape.backward(mean);
  adam_update(recon.params, grads, cfg.lr_recon);
  return mean.value().item();
}

// One iteration. l_r/l_lcd report the loss-network phase in lcd mode; in cd
// mode l_r is the Chamfer loss the reconstruction step descended.
inline MetricsRecord train_step(const std::vector<PointCloud>& batch, LcdParams& lcd,
                                ReconParams& recon, const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  MetricsRecord rec;
  if (cfg.loss == LossMode::lcd) {
    const auto outputs = reconstruct_batch(batch, recon);
    const auto up = lcd_update(batch, outputs, lcd, recon, cfg);
    rec.l_r = up.l_r;
    rec.l_lcd = up.l_lcd;
    recon_update(batch, &lcd, recon, cfg);
  } else {
    rec.l_r = recon_update(batch, nullptr, recon, cfg);
  }
  rec.ms_per_step =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

struct EvalMetrics {
  double cd = 0.0, mcd = 0.0, hd = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  EvalMetrics overall;
  std::map<std::string, EvalMetrics> per_label;
};

// Metrics between stored predictions and references, paired by position.
inline EvalReport evaluate_pairs(const Dataset& refs, const Dataset& preds) {
  if (refs.size() != preds.size())
    throw std::invalid_argument("evaluate: " + std::to_string(refs.size()) + " references vs " +
                                std::to_string(preds.size()) + " predictions");
  EvalReport rep;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const double c = chamfer(refs.clouds[i], preds.clouds[i]);
    const double m = mcd(refs.clouds[i], preds.clouds[i]);
    const double h = hausdorff(refs.clouds[i], preds.clouds[i]);
    for (EvalMetrics* e : {&rep.overall, &rep.per_label[i < refs.labels.size() ? refs.labels[i] : ""]}) {
      e->cd += c;
      e->mcd += m;
      e->hd += h;
      ++e->count;
    }
  }
  auto finish = [](EvalMetrics& e) {
    const double n = static_cast<double>(std::max<std::size_t>(e.count, 1));
    e.cd /= n;
    e.mcd /= n;
    e.hd /= n;
  };
  finish(rep.overall);
  for (auto& [label, e] : rep.per_label) finish(e);
  return rep;
}

// Mean metrics between each cloud and its reconstruction.
inline EvalReport evaluate(const ReconParams& recon, const Dataset& ds) {
  Dataset outs;
  for (const auto& c : ds.clouds) outs.clouds.push_back(reconstruct(recon, c));
  return evaluate_pairs(ds, outs);
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr const char* kMetricsHeader = "iter,cd,mcd,hd,l_r,l_lcd,ms_per_step";

inline std::string format6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// The value a metric takes once written to and read back from the CSV.
inline double round6(double v) { return std::strtod(format6(v).c_str(), nullptr); }

inline std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string s = std::string(kMetricsHeader) + "\n";
  auto opt = [](const std::optional<double>& v) { return v ? format6(*v) : std::string(); };
  for (const auto& r : records) {
    s += std::to_string(r.iteration) + "," + format6(r.cd) + "," + format6(r.mcd) + "," +
         format6(r.hd) + "," + opt(r.l_r) + "," + opt(r.l_lcd) + "," + opt(r.ms_per_step) + "\n";
  }
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("metrics: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw std::runtime_error("metrics " + path.string() + ": unexpected header");
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    while (f.size() < 7) f.emplace_back();
    auto opt = [](const std::string& c) -> std::optional<double> {
      if (c.empty()) return std::nullopt;
      return std::strtod(c.c_str(), nullptr);
    };
    MetricsRecord r;
    r.iteration = std::stoull(f[0]);
    r.cd = std::strtod(f[1].c_str(), nullptr);
    r.mcd = std::strtod(f[2].c_str(), nullptr);
    r.hd = std::strtod(f[3].c_str(), nullptr);
    r.l_r = opt(f[4]);
    r.l_lcd = opt(f[5]);
    r.ms_per_step = opt(f[6]);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full runs

struct Datasets {
  Dataset train, eval;
};

// Generated data: a held-out tenth drawn from a separate seed stream.
// Manifest data: the last tenth of the entries.
inline Datasets make_datasets(const TrainConfig& cfg) {
  Datasets d;
  if (!cfg.data.empty()) {
    Dataset all = load_dataset(cfg.data);
    if (all.size() < 2) throw std::invalid_argument("dataset needs at least 2 clouds to split");
    const std::size_t n_eval = std::max<std::size_t>(1, all.size() / 10);
    const std::size_t n_train = all.size() - n_eval;
    for (std::size_t i = 0; i < all.size(); ++i) {
      Dataset& dst = i < n_train ? d.train : d.eval;
      dst.clouds.push_back(all.clouds[i]);
      dst.labels.push_back(all.labels[i]);
    }
  } else {
    const std::size_t n_eval = std::max<std::size_t>(1, cfg.shapes / 10);
    d.train = gen_shapes(cfg.families, cfg.shapes - n_eval, cfg.points, cfg.noise,
                         derive_seed(cfg.seed, 1), Split::train);
    d.eval = gen_shapes(cfg.families, n_eval, cfg.points, cfg.noise, derive_seed(cfg.seed, 2),
                        Split::eval);
  }
  d.train.split = Split::train;
  d.eval.split = Split::eval;
  return d;
}

struct RunResult {
  std::vector<MetricsRecord> records;
  ReconParams recon;
  LcdParams lcd;
  double wall_seconds = 0.0;
};

inline RunResult run(const TrainConfig& cfg, const Datasets& data) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  RunResult res{{}, make_recon_params(cfg.recon_config(), derive_seed(cfg.seed, 3)),
                make_lcd_params(cfg.lcd_config(), derive_seed(cfg.seed, 4)), 0.0};
  std::mt19937_64 rng(derive_seed(cfg.seed, 5));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  auto eval_row = [&](std::size_t it) {
    const auto rep = evaluate(res.recon, data.eval);
    MetricsRecord r;
    r.iteration = it;
    r.cd = rep.overall.cd;
    r.mcd = rep.overall.mcd;
    r.hd = rep.overall.hd;
    return r;
  };
  res.records.push_back(eval_row(0));

  double ms_accum = 0.0;
  std::size_t ms_steps = 0;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::vector<PointCloud> batch;
    std::vector<std::size_t> ids;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      ids.push_back(order[cursor]);
      batch.push_back(data.train.clouds[order[cursor++]]);
    }
    MetricsRecord step;
    try {
      step = train_step(batch, res.lcd, res.recon, cfg);
    } catch (const NonFiniteLoss& e) {
      std::ostringstream os;
      os << "iteration " << it << "\nbatch indices:";
      for (auto i : ids) os << ' ' << i;
      os << '\n' << e.what() << '\n';
      if (!cfg.out.empty()) {
        std::filesystem::create_directories(cfg.out);
        write_text(cfg.out / "diagnostic.txt", os.str());
        for (std::size_t b = 0; b < batch.size(); ++b)
          save_xyz(batch[b], cfg.out / ("diagnostic_batch_" + std::to_string(b) + ".xyz"));
      }
      throw NonFiniteLoss(os.str());
    }
    ms_accum += *step.ms_per_step;
    ++ms_steps;
    if (it % cfg.eval_interval == 0 || it == cfg.iterations) {
      MetricsRecord r = eval_row(it);
      r.l_r = step.l_r;
      r.l_lcd = step.l_lcd;
      if (cfg.record_timing) r.ms_per_step = ms_accum / static_cast<double>(ms_steps);
      ms_accum = 0.0;
      ms_steps = 0;
      res.records.push_back(r);
    }
  }
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    write_text(cfg.out / "metrics.csv", metrics_csv(res.records));
    save_checkpoint(res.recon.params, cfg.out / "recon.ckpt");
    if (cfg.loss == LossMode::lcd) save_checkpoint(res.lcd.params, cfg.out / "lcd.ckpt");
  }
  return res;
}

inline RunResult run(const TrainConfig& cfg) { return run(cfg, make_datasets(cfg)); }

// ---------------------------------------------------------------------------
// Ablations and sweeps

enum class Variant { cd, lcd_no_siacon, lcd_no_log, lcd_full };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::cd: return "cd";
    case Variant::lcd_no_siacon: return "lcd_no_siacon";
    case Variant::lcd_no_log: return "lcd_no_log";
    case Variant::lcd_full: return "lcd_full";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::cd, Variant::lcd_no_siacon, Variant::lcd_no_log, Variant::lcd_full})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown ablation variant '" + s + "'");
}

inline TrainConfig apply_variant(TrainConfig cfg, Variant v) {
  cfg.loss = v == Variant::cd ? LossMode::cd : LossMode::lcd;
  cfg.no_siacon = v == Variant::lcd_no_siacon;
  cfg.no_log = v == Variant::lcd_no_log;
  return cfg;
}

struct Sweep {
  std::string param;  // "sigma" or "lr-lcd"
  std::vector<double> values;
};

inline TrainConfig apply_sweep(TrainConfig cfg, const std::string& param, double value) {
  if (param == "sigma") {
    cfg.sigma = value;
  } else if (param == "lr-lcd") {
    cfg.lr_lcd = value;
  } else {
    throw std::invalid_argument("unknown sweep parameter '" + param + "' (expected sigma or lr-lcd)");
  }
  return cfg;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct AblationRow {
  std::string variant;
  std::string sweep_param;            // empty without a sweep
  std::optional<double> sweep_value;
  std::vector<std::string> runs;      // run names, one per seed
  std::vector<MetricsRecord> finals;  // final CSV row per seed, as read back
  double cd = 0.0, mcd = 0.0, hd = 0.0;  // medians over seeds
};

inline std::string run_name(Variant v, const std::string& param, std::optional<double> value,
                            std::uint64_t seed) {
  std::string s = variant_name(v);
  if (value) s += "_" + param + format6(*value);
  return s + "_seed" + std::to_string(seed);
}

inline std::string summary_csv(const std::vector<AblationRow>& rows) {
  std::string s = "variant,sweep,value,seeds,cd,mcd,hd\n";
  for (const auto& r : rows) {
    s += r.variant + "," + r.sweep_param + "," + (r.sweep_value ? format6(*r.sweep_value) : "") +
         "," + std::to_string(r.finals.size()) + "," + format6(r.cd) + "," + format6(r.mcd) + "," +
         format6(r.hd) + "\n";
  }
  return s;
}

// Runs every variant (times every sweep value) for `seeds` consecutive seeds
// from base.seed. Per-run CSVs and checkpoints land in `out` when set, plus
// summary.csv. Medians are taken over the final rows as they appear in the CSVs.
inline std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<Variant>& variants,
                                       std::size_t seeds, const std::optional<Sweep>& sweep,
                                       const std::filesystem::path& out) {
  if (variants.empty()) throw std::invalid_argument("ablate: no variants");
  if (seeds < 1) throw std::invalid_argument("ablate: seeds must be >= 1");
  std::vector<std::optional<double>> values{std::nullopt};
  if (sweep) {
    if (sweep->values.empty()) throw std::invalid_argument("ablate: empty sweep");
    apply_sweep(base, sweep->param, sweep->values.front());
    values.assign(sweep->values.begin(), sweep->values.end());
  }
  if (!out.empty()) std::filesystem::create_directories(out);
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    for (const auto& value : values) {
      AblationRow row;
      row.variant = variant_name(v);
      if (sweep) row.sweep_param = sweep->param;
      row.sweep_value = value;
      for (std::size_t k = 0; k < seeds; ++k) {
        TrainConfig cfg = apply_variant(base, v);
        if (value) cfg = apply_sweep(cfg, sweep->param, *value);
        cfg.seed = base.seed + k;
        cfg.out.clear();
        const std::string name = run_name(v, row.sweep_param, value, cfg.seed);
        auto res = run(cfg);
        const std::string csv = metrics_csv(res.records);
        if (!out.empty()) {
          write_text(out / (name + ".csv"), csv);
          save_checkpoint(res.recon.params, out / (name + ".recon.ckpt"));
          if (cfg.loss == LossMode::lcd) save_checkpoint(res.lcd.params, out / (name + ".lcd.ckpt"));
        }
        MetricsRecord last = res.records.back();
        last.cd = round6(last.cd);
        last.mcd = round6(last.mcd);
        last.hd = round6(last.hd);
        row.runs.push_back(name);
        row.finals.push_back(last);
      }
      auto med = [&](auto field) {
        std::vector<double> xs;
        for (const auto& f : row.finals) xs.push_back(f.*field);
        return median(xs);
      };
      row.cd = med(&MetricsRecord::cd);
      row.mcd = med(&MetricsRecord::mcd);
      row.hd = med(&MetricsRecord::hd);
      rows.push_back(row);
    }
  }
  if (!out.empty()) write_text(out / "summary.csv", summary_csv(rows));
  return rows;
}

}  // namespace lcd
