#pragma once

// Command-line front end: train, eval, ablate, gen-data.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "lcd/lcd.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace lcd::cli {

namespace fs = std::filesystem;

enum Exit : int { ok = 0, usage = 1, runtime = 2 };

// Shortest text that parses back to the same double.
inline std::string exact(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::vector<Family> parse_families(const std::string& s) {
  std::vector<Family> out;
  for (const auto& f : split_list(s)) out.push_back(parse_family(f));
  if (out.empty()) throw std::invalid_argument("no shape families given");
  return out;
}

inline std::string families_text(const std::vector<Family>& fams) {
  std::string s;
  for (auto f : fams) s += (s.empty() ? "" : ",") + std::string(family_name(f));
  return s;
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw std::invalid_argument("malformed number '" + s + "'");
  return v;
}

// "sigma=0.001,0.01" -> Sweep
inline Sweep parse_sweep(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("sweep must look like name=v1,v2,...");
  Sweep sw{s.substr(0, eq), {}};
  if (sw.param != "sigma" && sw.param != "lr-lcd")
    throw std::invalid_argument("unknown sweep parameter '" + sw.param + "' (expected sigma or lr-lcd)");
  for (const auto& v : split_list(s.substr(eq + 1))) sw.values.push_back(parse_double(v));
  if (sw.values.empty()) throw std::invalid_argument("sweep has no values");
  return sw;
}

// Flag values shared by train and ablate.
struct TrainFlags {
  TrainConfig cfg;
  std::string loss = "lcd";
  std::string families = "sphere,cube,cylinder,torus";
  std::string nn = "kdtree";

  void attach(CLI::App& app, bool with_loss) {
    if (with_loss)
      app.add_option("--loss", loss, "reconstruction loss")->check(CLI::IsMember({"cd", "lcd"}))
          ->capture_default_str();
    app.add_option("--sigma", cfg.sigma, "boundary coefficient")->capture_default_str();
    app.add_option("--sigma-r", cfg.sigma_r, "log offset of the adversarial loss")->capture_default_str();
    app.add_option("--lr-recon", cfg.lr_recon, "reconstruction learning rate")->capture_default_str();
    app.add_option("--lr-lcd", cfg.lr_lcd, "loss-network learning rate")->capture_default_str();
    app.add_option("--iters", cfg.iterations, "training iterations")->capture_default_str();
    app.add_option("--batch", cfg.batch, "clouds per step")->capture_default_str();
    app.add_option("--points", cfg.points, "points per cloud")->capture_default_str();
    app.add_option("--seed", cfg.seed, "random seed")->capture_default_str();
    app.add_option("--eval-interval", cfg.eval_interval, "iterations between metric rows")
        ->capture_default_str();
    app.add_option("--data", cfg.data, "manifest of xyz files (default: generated shapes)");
    app.add_option("--shapes", cfg.shapes, "generated shapes, train plus held-out")->capture_default_str();
    app.add_option("--families", families, "generated shape families")->capture_default_str();
    app.add_option("--noise", cfg.noise, "generated point jitter std")->capture_default_str();
    app.add_option("--nn", nn, "nearest-neighbour search")->check(CLI::IsMember({"kdtree", "brute"}))
        ->capture_default_str();
    if (with_loss) {
      app.add_flag("--no-siacon", cfg.no_siacon, "drop the joint feature from the score input");
      app.add_flag("--no-log", cfg.no_log, "use -L_R as the adversarial loss");
    }
    app.add_flag("--timing", cfg.record_timing, "fill ms_per_step (CSV no longer reproducible)");
  }

  TrainConfig resolve() {
    cfg.loss = loss == "cd" ? LossMode::cd : LossMode::lcd;
    cfg.families = parse_families(families);
    cfg.nn = nn == "brute" ? NnMethod::brute : NnMethod::kdtree;
    cfg.validate();
    return cfg;
  }
};

inline std::string config_text(const std::string& command, const TrainConfig& c) {
  std::ostringstream os;
  os << "command = " << command << '\n'
     << "loss = " << loss_mode_name(c.loss) << '\n'
     << "sigma = " << exact(c.sigma) << '\n'
     << "sigma_r = " << exact(c.sigma_r) << '\n'
     << "lr_recon = " << exact(c.lr_recon) << '\n'
     << "lr_lcd = " << exact(c.lr_lcd) << '\n'
     << "iters = " << c.iterations << '\n'
     << "batch = " << c.batch << '\n'
     << "points = " << c.points << '\n'
     << "seed = " << c.seed << '\n'
     << "eval_interval = " << c.eval_interval << '\n'
     << "no_siacon = " << (c.no_siacon ? "true" : "false") << '\n'
     << "no_log = " << (c.no_log ? "true" : "false") << '\n'
     << "data = " << c.data.generic_string() << '\n'
     << "shapes = " << c.shapes << '\n'
     << "families = " << families_text(c.families) << '\n'
     << "noise = " << exact(c.noise) << '\n'
     << "nn = " << (c.nn == NnMethod::brute ? "brute" : "kdtree") << '\n'
     << "timing = " << (c.record_timing ? "true" : "false") << '\n';
  return os.str();
}

inline std::string eval_table(const EvalReport& rep) {
  std::string s = "label,count,cd,mcd,hd\n";
  auto row = [&](const std::string& label, const EvalMetrics& e) {
    s += label + "," + std::to_string(e.count) + "," + format6(e.cd) + "," + format6(e.mcd) + "," +
         format6(e.hd) + "\n";
  };
  row("all", rep.overall);
  for (const auto& [label, e] : rep.per_label) row(label.empty() ? "unlabelled" : label, e);
  return s;
}

inline int cmd_train(TrainFlags& flags, const fs::path& out, std::ostream& os) {
  TrainConfig cfg = flags.cfg;
  cfg.out = out;
  fs::create_directories(out);
  write_text(out / "config.txt", config_text("train", cfg));
  const auto res = run(cfg);
  const auto& first = res.records.front();
  const auto& last = res.records.back();
  os << "train " << loss_mode_name(cfg.loss) << ": " << cfg.iterations << " iterations in "
     << format6(res.wall_seconds) << " s\n"
     << "eval cd " << format6(first.cd) << " -> " << format6(last.cd) << ", mcd " << format6(last.mcd)
     << ", hd " << format6(last.hd) << '\n'
     << "wrote " << (out / "metrics.csv").string() << '\n';
  return ok;
}

struct EvalFlags {
  fs::path ckpt, data, pred, out;
  std::size_t points = 256;
  bool save_recon = false;
  bool no_normalize = false;
};

inline int cmd_eval(const EvalFlags& f, std::ostream& os) {
  if (f.ckpt.empty() == f.pred.empty())
    throw std::invalid_argument("eval needs exactly one of --ckpt-recon and --pred");
  fs::create_directories(f.out);
  Dataset refs = load_dataset(f.data, !f.no_normalize);
  Dataset preds;
  if (!f.pred.empty()) {
    preds = load_dataset(f.pred, false);
  } else {
    ReconConfig rc;
    rc.points = f.points;
    ReconParams recon = make_recon_params(rc, 0);
    recon.params.assign_values(load_checkpoint(f.ckpt));
    for (const auto& c : refs.clouds) preds.clouds.push_back(reconstruct(recon, c));
    if (f.save_recon) {
      const fs::path dir = f.out / "recon";
      fs::create_directories(dir);
      std::vector<fs::path> names;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "recon_%04zu.xyz", i);
        save_xyz(preds.clouds[i], dir / name);
        names.emplace_back(name);
      }
      write_manifest(names, dir / "manifest.txt");
    }
  }
  const auto rep = evaluate_pairs(refs, preds);
  const std::string table = eval_table(rep);
  write_text(f.out / "eval.csv", table);
  os << table;
  return ok;
}

struct AblateFlags {
  std::string variants = "cd,lcd_no_siacon,lcd_no_log,lcd_full";
  std::size_t seeds = 3;
  std::string sweep;
};

inline int cmd_ablate(TrainFlags& flags, const AblateFlags& a, const fs::path& out,
                      std::ostream& os) {
  TrainConfig cfg = flags.cfg;
  std::vector<Variant> variants;
  for (const auto& v : split_list(a.variants)) variants.push_back(parse_variant(v));
  std::optional<Sweep> sweep;
  if (!a.sweep.empty()) sweep = parse_sweep(a.sweep);
  fs::create_directories(out);
  std::string echo = config_text("ablate", cfg);
  echo += "variants = " + a.variants + "\nseeds = " + std::to_string(a.seeds) + "\nsweep = " + a.sweep + "\n";
  write_text(out / "config.txt", echo);
  const auto rows = ablate(cfg, variants, a.seeds, sweep, out);
  os << summary_csv(rows);
  return ok;
}

struct GenFlags {
  std::string families = "sphere,cube,cylinder,torus";
  std::size_t count = 200;
  std::size_t points = 256;
  double noise = 0.0;
  std::uint64_t seed = 0;
  fs::path out;
};

inline int cmd_gendata(const GenFlags& g, std::ostream& os) {
  const auto fams = parse_families(g.families);
  const Dataset ds = gen_shapes(fams, g.count, g.points, g.noise, g.seed);
  fs::create_directories(g.out);
  std::vector<fs::path> names;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%04zu.xyz", ds.labels[i].c_str(), i);
    save_xyz(ds.clouds[i], g.out / name);
    names.emplace_back(name);
  }
  write_manifest(names, g.out / "manifest.txt");
  std::ostringstream echo;
  echo << "command = gen-data\nfamilies = " << families_text(fams) << "\ncount = " << g.count
       << "\npoints = " << g.points << "\nnoise = " << exact(g.noise) << "\nseed = " << g.seed << '\n';
  write_text(g.out / "config.txt", echo.str());
  os << "wrote " << ds.size() << " clouds and " << (g.out / "manifest.txt").string() << '\n';
  return ok;
}

// args excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& os = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"point cloud reconstruction with a learned Chamfer weighting", "lcd"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  fs::path train_out;
  auto* train = app.add_subcommand("train", "train a reconstruction network");
  train_flags.attach(*train, true);
  train->add_option("--out", train_out, "output directory")->required();

  EvalFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "metrics of a checkpoint (or stored predictions) on a dataset");
  eval->add_option("--ckpt-recon", eval_flags.ckpt, "reconstruction checkpoint");
  eval->add_option("--data", eval_flags.data, "manifest of reference clouds")->required();
  eval->add_option("--out", eval_flags.out, "output directory")->required();
  eval->add_option("--points", eval_flags.points, "decoder output points")->capture_default_str();
  eval->add_option("--pred", eval_flags.pred, "manifest of predictions paired with --data");
  eval->add_flag("--save-recon", eval_flags.save_recon, "write reconstructions to <out>/recon");
  eval->add_flag("--no-normalize", eval_flags.no_normalize, "use reference clouds as stored");

  TrainFlags ablate_flags;
  AblateFlags ablate_opts;
  fs::path ablate_out;
  auto* abl = app.add_subcommand("ablate", "variant comparison and hyperparameter sweeps");
  ablate_flags.attach(*abl, false);
  abl->add_option("--variants", ablate_opts.variants, "comma list of cd, lcd_no_siacon, lcd_no_log, lcd_full")
      ->capture_default_str();
  abl->add_option("--seeds", ablate_opts.seeds, "seeds per variant, counted up from --seed")
      ->capture_default_str();
  abl->add_option("--sweep", ablate_opts.sweep, "sigma=v1,v2,... or lr-lcd=v1,v2,...");
  abl->add_option("--out", ablate_out, "output directory")->required();

  GenFlags gen;
  auto* gd = app.add_subcommand("gen-data", "write synthetic shapes as xyz files plus a manifest");
  gd->add_option("--families", gen.families, "comma list of sphere, cube, cylinder, torus")
      ->capture_default_str();
  gd->add_option("--count", gen.count, "number of clouds")->capture_default_str();
  gd->add_option("--points", gen.points, "points per cloud")->capture_default_str();
  gd->add_option("--noise", gen.noise, "Gaussian jitter std")->capture_default_str();
  gd->add_option("--seed", gen.seed, "random seed")->capture_default_str();
  gd->add_option("--out", gen.out, "output directory")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    os << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    os << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "lcd: " << e.what() << '\n';
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front())
      err << sub->help();
    return usage;
  }

  // Flag values that parse but are invalid count as usage errors.
  try {
    if (train->parsed()) train_flags.resolve();
    if (abl->parsed()) {
      ablate_flags.resolve();
      for (const auto& v : split_list(ablate_opts.variants)) parse_variant(v);
      if (split_list(ablate_opts.variants).empty()) throw std::invalid_argument("no variants given");
      if (ablate_opts.seeds < 1) throw std::invalid_argument("--seeds must be >= 1");
      if (!ablate_opts.sweep.empty()) parse_sweep(ablate_opts.sweep);
    }
    if (gd->parsed()) {
      parse_families(gen.families);
      if (gen.count < 1 || gen.points < 8 || !(gen.noise >= 0.0))
        throw std::invalid_argument("gen-data needs --count >= 1, --points >= 8, --noise >= 0");
    }
    if (eval->parsed() && eval_flags.ckpt.empty() == eval_flags.pred.empty())
      throw std::invalid_argument("eval needs exactly one of --ckpt-recon and --pred");
  } catch (const std::exception& e) {
    err << "lcd: " << e.what() << '\n';
    return usage;
  }

  try {
    if (train->parsed()) return cmd_train(train_flags, train_out, os);
    if (eval->parsed()) return cmd_eval(eval_flags, os);
    if (abl->parsed()) return cmd_ablate(ablate_flags, ablate_opts, ablate_out, os);
    if (gd->parsed()) return cmd_gendata(gen, os);
  } catch (const std::exception& e) {
    err << "lcd: " << e.what() << '\n';
    return runtime;
  }
  return usage;
}

}  // namespace lcd::cli
