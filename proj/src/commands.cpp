#include "dynident/cli_io.hpp"
#include "dynident/errors.hpp"
#include "dynident/eval_causal.hpp"
#include "dynident/multiview.hpp"
#include "dynident/parallel.hpp"
#include "dynident/rng.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <optional>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace dynident {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Context {
  RunConfig config;
  bool force = false;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<fs::path> outputs;
};

fs::path sibling(const fs::path& p, const std::string& ext) {
  fs::path out = p;
  out.replace_extension(ext);
  return out;
}

void claim_output(Context& ctx, const fs::path& path, const std::string& key) {
  if (!ctx.force && fs::exists(path))
    throw ConfigError(key, "output '" + path.string() + "' already exists (outputs are write-once; pass --force)");
  if (path.has_parent_path() && !fs::exists(path.parent_path()))
    throw IoError("directory '" + path.parent_path().string() + "' does not exist");
  ctx.outputs.push_back(path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

// ------------------------------------------------------------------ systems

void cmd_systems(Context& ctx) {
  const auto& c = ctx.config;
  std::ostringstream out;
  if (c.get_string("format") == "json") {
    json arr = json::array();
    for (const auto& s : catalog()) {
      json box = json::array();
      for (const auto& b : s.param_box) box.push_back({b.lo, b.hi});
      arr.push_back({{"id", s.id},
                     {"name", s.name},
                     {"state_dim", s.state_dim},
                     {"param_dim", s.param_dim},
                     {"param_box", box},
                     {"linear_in_theta", s.has_basis()},
                     {"chaotic", s.chaotic},
                     {"t_max", s.t_max},
                     {"grid_points", s.grid_points}});
    }
    out << json{{"catalog_version", kCatalogVersion}, {"systems", arr}}.dump(2) << '\n';
  } else {
    out << pad("id", 10) << pad("d", 4) << pad("N", 4) << pad("linear", 8) << pad("chaotic", 9) << "name\n";
    for (const auto& s : catalog())
      out << pad(s.id, 10) << pad(std::to_string(s.state_dim), 4) << pad(std::to_string(s.param_dim), 4)
          << pad(s.has_basis() ? "yes" : "no", 8) << pad(s.chaotic ? "yes" : "no", 9) << s.name << '\n';
  }
  const auto path = c.get_string("out");
  if (path.empty()) {
    std::cout << out.str();
    return;
  }
  claim_output(ctx, path, "out");
  write_text(path, out.str());
}

// ----------------------------------------------------------------- simulate

void cmd_simulate(Context& ctx) {
  const auto& c = ctx.config;
  const auto id = c.get_string("system");
  if (!has_system(id)) throw ConfigError("system", "unknown system '" + id + "'");
  const auto& sys = find_system(id);
  const int n = static_cast<int>(c.get_int("n"));
  const auto seed = static_cast<std::uint64_t>(c.get_int("seed"));
  const auto fixed = c.get_number_list("theta");
  if (!fixed.empty() && static_cast<int>(fixed.size()) != sys.param_dim)
    throw ConfigError("theta", "expected " + std::to_string(sys.param_dim) + " values for " + id);
  const fs::path out = c.get_string("out");
  claim_output(ctx, out, "out");

  std::vector<Vec> thetas;
  if (fixed.empty()) {
    ctx.seeds["simulate.theta"] = derive_seed(seed, "simulate.theta");
    for (const auto& d : sample_parameters(sys, n, ctx.seeds["simulate.theta"])) thetas.push_back(d.theta);
  } else {
    thetas.assign(static_cast<std::size_t>(n), Eigen::Map<const Vec>(fixed.data(), sys.param_dim));
  }
  const double noise = c.get_double("noise");
  const auto deriv = c.get_string("derivatives");
  ctx.seeds["simulate.noise"] = derive_seed(seed, "simulate.noise");
  const auto grid = default_grid(sys);
  std::vector<Trajectory> trajs(thetas.size());
  parallel_for(trajs.size(), static_cast<int>(c.get_int("threads")), [&](std::size_t i) {
    Trajectory t = integrate(sys, thetas[i], sys.x0, grid);
    if (deriv == "exact") {
      Mat d(t.length(), t.dim());
      for (int r = 0; r < t.length(); ++r)
        d.row(r) = eval_vector_field(sys, thetas[i], t.states.row(r).transpose()).transpose();
      t.derivs = d;
    }
    if (noise > 0.0) {
      Rng rng = make_rng(derive_seed(ctx.seeds.at("simulate.noise"), static_cast<std::uint64_t>(i)));
      for (Eigen::Index k = 0; k < t.states.size(); ++k) t.states.data()[k] += noise * standard_normal(rng);
    }
    if (deriv == "estimated") t.derivs = estimate_derivatives(t);
    trajs[i] = std::move(t);
  });
  write_trajectories_jsonl(out, trajs);
}

// -------------------------------------------------------------------- bench

void cmd_bench(Context& ctx) {
  const auto& c = ctx.config;
  const auto systems = c.get_string_list("systems");
  if (systems.empty()) throw ConfigError("systems", "at least one system is required");
  for (const auto& id : systems)
    if (!has_system(id)) throw ConfigError("systems", "unknown system '" + id + "'");
  BenchOptions opt;
  opt.method = fit_method_from_string(c.get_string("method"));
  opt.n_draws = static_cast<int>(c.get_int("draws"));
  opt.noise = c.get_double("noise");
  opt.derivatives = c.get_string("derivatives") == "exact" ? DerivativeSource::exact : DerivativeSource::estimated;
  opt.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  opt.threads = static_cast<int>(c.get_int("threads"));
  if (opt.method == FitMethod::closed_form)
    for (const auto& id : systems)
      if (!find_system(id).has_basis())
        throw ConfigError("method", "closed-form needs a linear-in-theta system; '" + id + "' is not");
  const fs::path csv = c.get_string("out");
  const fs::path md = sibling(csv, ".md");
  claim_output(ctx, csv, "out");
  claim_output(ctx, md, "out");
  ctx.seeds["bench.theta"] = derive_seed(opt.seed, "bench.theta");

  const auto reports = benchmark_rmse(systems, opt);
  write_bench_csv(csv, reports);
  const auto table = bench_markdown(reports);
  write_text(md, table);
  std::cout << table;
}

// ----------------------------------------------------------------- synth-mv

void cmd_synth_mv(Context& ctx) {
  const auto& c = ctx.config;
  const auto id = c.get_string("system");
  if (!has_system(id)) throw ConfigError("system", "unknown system '" + id + "'");
  const auto& sys = find_system(id);
  const int views = static_cast<int>(c.get_int("views"));
  if (views != 2 && views != 3) throw ConfigError("views", "must be 2 or 3");
  MultiviewSynthOptions opt;
  opt.n_views = views;
  opt.third_view_shared = c.get_int_list("third_shared");
  opt.third_view_block = static_cast<int>(c.get_int("third_block"));
  opt.ic_jitter = c.get_double("jitter");
  opt.threads = static_cast<int>(c.get_int("threads"));
  const auto seed = static_cast<std::uint64_t>(c.get_int("seed"));
  const fs::path out = c.get_string("out");
  claim_output(ctx, out, "out");

  MultiviewDataset ds;
  try {
    ds = generate_multiview_dataset(sys, c.get_int_list("shared"), static_cast<int>(c.get_int("pairs")), seed, opt);
  } catch (const InvalidArgument& e) {
    throw ConfigError("shared", e.what());
  }
  ctx.seeds["multiview.pairs"] = derive_seed(seed, "multiview.pairs");
  if (c.get_bool("causal")) {
    CausalDesign design;
    design.n_slices = static_cast<int>(c.get_int("slices"));
    design.base_ate = c.get_double("ate");
    design.growth = c.get_double("growth");
    ctx.seeds["synth.causal"] = derive_seed(seed, "synth.causal");
    attach_causal_labels(ds, sys, design, ctx.seeds["synth.causal"]);
  }
  write_multiview_jsonl(out, ds);
}

// ----------------------------------------------------------------- train-mv

void cmd_train_mv(Context& ctx) {
  const auto& c = ctx.config;
  const auto data = read_multiview_jsonl(c.get_string("data"));
  TrainConfig tc;
  tc.epochs = static_cast<int>(c.get_int("epochs"));
  tc.batch = static_cast<int>(c.get_int("batch"));
  tc.lr = c.get_double("lr");
  tc.reg_align = c.get_double("reg_align");
  tc.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  tc.shared_warmup_epochs = static_cast<int>(c.get_int("warmup"));
  auto& m = tc.model;
  m.latent_dim = static_cast<int>(c.get_int("latent_dim"));
  m.n_blocks = static_cast<int>(c.get_int("blocks"));
  m.shared_block = static_cast<int>(c.get_int("shared_block"));
  m.hidden_dim = static_cast<int>(c.get_int("hidden"));
  m.depth = static_cast<int>(c.get_int("depth"));
  m.activation = nn::activation_from_string(c.get_string("activation"));
  m.keep_fraction = c.get_double("keep_fraction");
  m.n_init = static_cast<int>(c.get_int("n_init"));
  m.decoder = decoder_kind_from_string(c.get_string("decoder"));
  m.vf_substeps = static_cast<int>(c.get_int("vf_substeps"));
  if (m.n_blocks > m.latent_dim) throw ConfigError("blocks", "cannot exceed latent_dim");
  if (m.shared_block >= m.n_blocks) throw ConfigError("shared_block", "must be < blocks");
  if (!(m.keep_fraction > 0.0 && m.keep_fraction <= 1.0)) throw ConfigError("keep_fraction", "must be in (0, 1]");
  const int length = data.pairs.front().views.front().length();
  if (m.n_init > length) throw ConfigError("n_init", "exceeds the trajectory length " + std::to_string(length));
  for (const auto& p : data.pairs)
    for (const auto& l : p.links)
      if (l.block >= m.n_blocks)
        throw ConfigError("blocks", "dataset aligns block " + std::to_string(l.block) + " but only " +
                                        std::to_string(m.n_blocks) + " blocks are configured");

  const fs::path out = c.get_string("out");
  const fs::path curve = sibling(out, ".curve.csv");
  claim_output(ctx, out, "out");
  claim_output(ctx, curve, "out");
  ctx.seeds["identifier.init"] = derive_seed(tc.seed, "identifier.init");
  ctx.seeds["identifier.shuffle"] = derive_seed(tc.seed, "identifier.shuffle");

  const auto result = train_identifier(data, tc);
  write_text(out, identifier_to_json(result.model).dump() + "\n");
  std::ostringstream csv;
  csv << "epoch,total,alignment,sufficiency\n";
  for (std::size_t e = 0; e < result.curve.size(); ++e)
    csv << e << ',' << format_double(result.curve[e].total) << ',' << format_double(result.curve[e].alignment) << ','
        << format_double(result.curve[e].sufficiency) << '\n';
  write_text(curve, csv.str());
  if (!result.curve.empty()) {
    const auto& last = result.curve.back();
    std::cout << "epochs " << result.curve.size() << "  total " << last.total << "  alignment " << last.alignment
              << "  sufficiency " << last.sufficiency << '\n';
  }
}

// --------------------------------------------------------------------- eval

struct LongRow {
  std::string table, row, col;
  double value;
};

void cmd_eval(Context& ctx) {
  const auto& c = ctx.config;
  const auto model = identifier_from_json(load_json_file(c.get_string("model")));
  const auto data = read_multiview_jsonl(c.get_string("data"));
  const auto seed = static_cast<std::uint64_t>(c.get_int("seed"));
  const fs::path csv = c.get_string("report");
  const fs::path md = sibling(csv, ".md");
  claim_output(ctx, csv, "report");
  claim_output(ctx, md, "report");
  ctx.seeds["eval.split"] = seed;

  std::vector<const Trajectory*> first;
  for (const auto& p : data.pairs) first.push_back(&p.views.front());
  const Mat z = encode_all(model, first);
  const int n_params = static_cast<int>(first.front()->theta_truth->size());
  Mat theta(z.rows(), n_params);
  for (Eigen::Index i = 0; i < z.rows(); ++i) theta.row(i) = first[static_cast<std::size_t>(i)]->theta_truth->transpose();
  const auto& shared = data.pairs.front().shared_indices;
  auto is_shared = [&](int k) { return std::find(shared.begin(), shared.end(), k) != shared.end(); };

  std::vector<LongRow> rows;
  std::ostringstream summary;
  summary << "# Identifier evaluation\n\n" << data.pairs.size() << " records, system " << data.system_id
          << ", shared parameters {";
  for (std::size_t k = 0; k < shared.size(); ++k) summary << (k ? ", " : "") << shared[k];
  summary << "}, shared latent block " << model.layout.shared_block << ".\n\n";

  std::vector<std::vector<int>> labels;
  for (int k = 0; k < n_params; ++k) labels.push_back(median_split(theta.col(k)));
  const auto acc = partition_accuracy(z, model.layout, labels, seed);
  const auto nb = model.layout.blocks.size();
  std::vector<R2Result> r2(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& idx = model.layout.blocks[b];
    Mat block(z.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) block.col(static_cast<Eigen::Index>(k)) = z.col(idx[k]);
    r2[b] = latent_r2(block, theta, seed);
  }

  auto header = [&](const std::string& title) {
    summary << "## " << title << "\n\n| block |";
    for (int k = 0; k < n_params; ++k) summary << " theta" << k << (is_shared(k) ? " (S)" : "") << " |";
    summary << "\n|---|";
    for (int k = 0; k < n_params; ++k) summary << "---|";
    summary << '\n';
  };
  header("Held-out accuracy of median-split parameters");
  for (std::size_t b = 0; b < nb; ++b) {
    summary << "| " << b << (static_cast<int>(b) == model.layout.shared_block ? " (shared)" : "") << " |";
    for (int k = 0; k < n_params; ++k) {
      const double v = acc.accuracy(static_cast<Eigen::Index>(b), k);
      rows.push_back({"accuracy", "block" + std::to_string(b), "theta" + std::to_string(k), v});
      summary << ' ' << std::fixed << std::setprecision(3) << v << " |";
    }
    summary << '\n';
  }
  for (const auto& w : acc.warnings) summary << "\nwarning: " << w << '\n';
  summary << '\n';
  header("Held-out R^2 (kernel ridge, block -> parameter)");
  for (std::size_t b = 0; b < nb; ++b) {
    summary << "| " << b << (static_cast<int>(b) == model.layout.shared_block ? " (shared)" : "") << " |";
    for (int k = 0; k < n_params; ++k) {
      const double v = r2[b].per_component[static_cast<std::size_t>(k)];
      rows.push_back({"r2", "block" + std::to_string(b), "theta" + std::to_string(k), v});
      summary << ' ' << std::fixed << std::setprecision(3) << v << " |";
    }
    summary << '\n';
  }

  const auto ratios = alignment_ratios(model, data);
  summary << "\n## Alignment invariance\n\n";
  std::size_t r = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (static_cast<int>(b) == model.layout.shared_block) continue;
    rows.push_back({"alignment_ratio", "block" + std::to_string(b), "median_ratio", ratios[r]});
    summary << "- shared vs block " << b << ": " << std::setprecision(4) << ratios[r] << '\n';
    ++r;
  }

  double recon = 0.0, forecast = 0.0;
  for (const auto* t : first) {
    recon += reconstruction_error(model, *t);
    forecast += forecast_error(model, *t);
  }
  recon /= static_cast<double>(first.size());
  forecast /= static_cast<double>(first.size());
  rows.push_back({"summary", "view0", "reconstruction_error", recon});
  rows.push_back({"summary", "view0", "forecast_mse", forecast});
  summary << "\n## Reconstruction\n\n- mean squared reconstruction error per view (standardized): " << recon
          << "\n- forecast MSE after the first " << model.prep.n_init << " steps: " << forecast << '\n';

  bool causal = false;
  for (const auto& p : data.pairs) causal = causal || p.causal.has_value();
  if (causal) {
    const auto& idx = model.layout.shared();
    Mat cov(z.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) cov.col(static_cast<Eigen::Index>(k)) = z.col(idx[k]);
    const auto slices = causal_slices(data, cov);
    summary << "\n## Treatment effect by slice (AIPW, shared latents as covariates)\n\n";
    std::optional<AteTrend> trend_opt;
    std::string skipped = "fewer than two slices";
    if (slices.size() >= 2) {
      try {
        trend_opt = ate_trend(slices);
      } catch (const InvalidArgument& e) {
        skipped = e.what();
      }
    }
    if (!trend_opt) {
      summary << "skipped: " << skipped << '\n';
    } else {
      const auto& trend = *trend_opt;
      summary << "| slice | ATE | se | n | change ratio |\n|---|---|---|---|---|\n";
      for (std::size_t s = 0; s < slices.size(); ++s) {
        const auto& a = trend.per_slice[s];
        const auto name = "slice" + std::to_string(s);
        rows.push_back({"ate", name, "ate_hat", a.ate_hat});
        rows.push_back({"ate", name, "se_hat", a.se_hat});
        rows.push_back({"ate", name, "n", static_cast<double>(a.n)});
        rows.push_back({"ate", name, "change_ratio", trend.change_ratios[s]});
        summary << "| " << s << " | " << a.ate_hat << " | " << a.se_hat << " | " << a.n << " | "
                << trend.change_ratios[s] << " |\n";
        for (const auto& w : a.warnings) summary << "\nwarning (slice " << s << "): " << w << '\n';
      }
    }
  }

  std::ostringstream out;
  out << "table,row,col,value\n";
  for (const auto& row : rows) out << row.table << ',' << row.row << ',' << row.col << ',' << format_double(row.value) << '\n';
  write_text(csv, out.str());
  write_text(md, summary.str());
  std::cout << summary.str();
}

// ------------------------------------------------------------------- report

void cmd_report(Context& ctx) {
  const auto& c = ctx.config;
  const fs::path in = c.get_string("input");
  fs::path out = c.get_string("out");
  if (out.empty()) out = sibling(in, ".md");
  claim_output(ctx, out, "out");
  write_text(out, bench_markdown(read_bench_csv(in)));
}

using Handler = void (*)(Context&);
const std::map<std::string, Handler>& handlers() {
  static const std::map<std::string, Handler> h{{"systems", cmd_systems},   {"simulate", cmd_simulate},
                                                {"bench", cmd_bench},       {"synth-mv", cmd_synth_mv},
                                                {"train-mv", cmd_train_mv}, {"eval", cmd_eval},
                                                {"report", cmd_report}};
  return h;
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

int fail(int code, const std::string& kind, const std::string& msg) {
  std::cerr << "dynident: error[" << kind << "]: " << one_line(msg) << std::endl;
  return code;
}

std::string dashed(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

}  // namespace

int run_command(const std::vector<std::string>& argv_in) {
  CLI::App app{"dynident: parameter identification for dynamical systems", "dynident"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);

  struct SubState {
    std::map<std::string, std::string> raw;
    std::map<std::string, CLI::Option*> opts;
    std::string config_path;
    bool force = false;
    std::string action;
  };
  std::map<std::string, SubState> state;
  std::map<std::string, CLI::App*> subs;
  for (const auto& schema : command_schemas()) {
    auto* sub = app.add_subcommand(schema.name, schema.help);
    auto& st = state[schema.name];
    sub->add_option("--config", st.config_path, "JSON config or run manifest");
    sub->add_flag("--force", st.force, "overwrite existing outputs");
    if (schema.name == "systems") sub->add_option("action", st.action, "list")->check(CLI::IsMember({"list"}));
    for (const auto& k : schema.keys) {
      std::string names = "--" + dashed(k.name);
      if (dashed(k.name) != k.name) names += ",--" + k.name;
      if (k.type == ValueType::boolean)
        st.opts[k.name] = sub->add_flag(names, k.help);
      else
        st.opts[k.name] = sub->add_option(names, st.raw[k.name], k.help)->allow_extra_args(false);
    }
    subs[schema.name] = sub;
  }

  std::vector<std::string> args(argv_in.begin() + (argv_in.empty() ? 0 : 1), argv_in.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (argv_in.size() < 2 || (argv_in[1].rfind("-", 0) != 0 && !subs.count(argv_in[1]))) {
      std::cerr << app.help() << std::flush;
      return fail(1, "usage", argv_in.size() < 2 ? "a subcommand is required"
                                                 : "unknown subcommand '" + argv_in[1] + "'");
    }
    return fail(1, "usage", std::string(e.what()) + " (see 'dynident " + argv_in[1] + " --help')");
  }

  const std::string command = app.get_subcommands().front()->get_name();
  auto& st = state[command];
  const auto start = std::chrono::steady_clock::now();
  try {
    std::map<std::string, std::string> flags;
    for (const auto& [name, opt] : st.opts) {
      if (opt->count() == 0) continue;
      const ConfigKey* k = command_schema(command).find(name);
      flags[name] = k->type == ValueType::boolean ? "true" : st.raw[name];
    }
    if (const char* env = std::getenv("DYNIDENT_THREADS"); env && !flags.count("threads") &&
                                                          command_schema(command).find("threads"))
      flags["threads"] = env;
    std::optional<json> file;
    if (!st.config_path.empty()) file = load_json_file(st.config_path);

    Context ctx;
    ctx.config = parse_config(command, file, flags);
    ctx.force = st.force;
    if (ctx.config.values.contains("seed")) ctx.seeds["root"] = static_cast<std::uint64_t>(ctx.config.get_int("seed"));
    handlers().at(command)(ctx);

    if (!ctx.outputs.empty()) {
      RunManifest man;
      man.config = ctx.config;
      man.seeds = ctx.seeds;
      man.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      for (const auto& p : ctx.outputs) man.digests[p.string()] = sha256_file(p);
      write_text(manifest_path(ctx.outputs.front()), manifest_to_json(man).dump(2) + "\n");
    }
    return 0;
  } catch (const ConfigError& e) {
    return fail(1, "config", e.what());
  } catch (const DegenerateLabels& e) {
    return fail(2, "degenerate-labels", e.what());
  } catch (const InvalidArgument& e) {
    return fail(1, "invalid-argument", e.what());
  } catch (const UnsupportedOperation& e) {
    return fail(1, "unsupported", e.what());
  } catch (const IoError& e) {
    return fail(2, "io", e.what());
  } catch (const TrainingDiverged& e) {
    return fail(2, "training-diverged", e.what());
  } catch (const std::exception& e) {
    return fail(2, "runtime", e.what());
  }
}

int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_command(args);
}

}  // namespace dynident
