#include "dynident/cli_io.hpp"

#include "dynident/errors.hpp"

#include <openssl/evp.h>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dynident {

namespace {

using nlohmann::json;

ConfigKey key(std::string name, ValueType type, json def, std::string help, std::optional<double> min = {},
              std::vector<std::string> choices = {}, bool is_path = false) {
  return {std::move(name), type, std::move(def), std::move(help), min, std::move(choices), is_path};
}

ConfigKey path_key(std::string name, json def, std::string help) {
  return key(std::move(name), ValueType::string, std::move(def), std::move(help), {}, {}, true);
}

std::vector<CommandSchema> build_schemas() {
  const auto I = ValueType::integer, N = ValueType::number, S = ValueType::string, B = ValueType::boolean,
             IL = ValueType::int_list, SL = ValueType::string_list, NL = ValueType::number_list;
  std::vector<CommandSchema> out;
  out.push_back({"systems", "list the ODE catalog",
                 {key("format", S, "text", "text or json", {}, {"text", "json"}),
                  path_key("out", "", "write the listing to a file instead of stdout")}});
  out.push_back({"simulate", "integrate catalog systems and write trajectories as JSON lines",
                 {key("system", S, nullptr, "catalog id"),
                  key("n", I, 1, "number of trajectories", 1),
                  key("seed", I, 7, "root seed", 0),
                  key("theta", NL, json::array(), "fixed parameters; empty samples from the box"),
                  key("noise", N, 0.0, "std of Gaussian noise added to states", 0.0),
                  key("derivatives", S, "none", "derivative channel", {}, {"none", "exact", "estimated"}),
                  key("threads", I, 1, "worker threads", 1),
                  path_key("out", "simulate.jsonl", "output JSON-lines file")}});
  out.push_back({"bench", "parameter-recovery benchmark over catalog systems",
                 {key("systems", SL, json::array({"ode2", "ode3", "ode5", "ode6", "ode24", "ode25", "ode27", "ode28",
                                                  "ode31", "ode50"}),
                      "catalog ids"),
                  key("draws", I, 100, "parameter draws per system", 1),
                  key("method", S, "deriv", "estimator", {},
                      {"closed", "deriv", "traj", "closed_form", "derivative_matching", "trajectory_matching"}),
                  key("noise", N, 0.0, "std of Gaussian noise added to states", 0.0),
                  key("derivatives", S, "exact", "derivative source", {}, {"exact", "estimated"}),
                  key("seed", I, 7, "root seed", 0),
                  key("threads", I, 1, "worker threads", 1),
                  path_key("out", "bench.csv", "CSV report; a markdown twin is written next to it")}});
  out.push_back({"synth-mv", "synthesize a multiview dataset",
                 {key("system", S, "ode27", "catalog id"),
                  key("shared", IL, json::array({0, 1}), "shared parameter indices", 0),
                  key("pairs", I, 2000, "number of records", 1),
                  key("views", I, 2, "views per record (2 or 3)", 2),
                  key("third_shared", IL, json::array(), "parameters the third view shares with the first", 0),
                  key("third_block", I, 1, "latent block aligned for the third view", 0),
                  key("jitter", N, 0.0, "initial-condition jitter", 0.0),
                  key("causal", B, false, "attach synthetic treatment/outcome labels"),
                  key("slices", I, 5, "causal slices", 1),
                  key("ate", N, 1.0, "effect in slice 0"),
                  key("growth", N, 0.1, "relative effect growth per slice"),
                  key("seed", I, 7, "root seed", 0),
                  key("threads", I, 1, "worker threads", 1),
                  path_key("out", "data.jsonl", "output JSON-lines file")}});
  out.push_back({"train-mv", "train a multiview identifier",
                 {path_key("data", nullptr, "multiview JSON-lines dataset"),
                  key("epochs", I, 300, "training epochs", 0),
                  key("batch", I, 64, "pairs per batch", 1),
                  key("lr", N, 1e-3, "Adam learning rate", 0.0),
                  key("reg_align", N, 10.0, "alignment weight", 0.0),
                  key("seed", I, 0, "root seed", 0),
                  key("latent_dim", I, 8, "latent dimension", 1),
                  key("blocks", I, 2, "number of latent blocks", 1),
                  key("shared_block", I, 0, "block aligned across views", 0),
                  key("hidden", I, 128, "hidden width", 1),
                  key("depth", I, 4, "affine layers per network", 1),
                  key("activation", S, "tanh", "hidden activation", {}, {"tanh", "relu"}),
                  key("keep_fraction", N, 0.5, "DCT coefficients kept", 0.0),
                  key("n_init", I, 10, "initial states given to the decoder", 1),
                  key("decoder", S, "mlp", "decoder family", {}, {"mlp", "vector_field"}),
                  key("vf_substeps", I, 1, "RK4 substeps per grid interval (vector_field)", 1),
                  key("warmup", I, 0, "shared-only warm-up epochs", 0),
                  path_key("out", "model.json", "model checkpoint; the loss curve goes next to it")}});
  out.push_back({"eval", "evaluate a trained identifier on a multiview dataset",
                 {path_key("model", nullptr, "model checkpoint"),
                  path_key("data", nullptr, "multiview JSON-lines dataset"),
                  key("seed", I, 0, "split seed", 0),
                  path_key("report", "eval.csv", "long-format CSV; a markdown summary is written next to it")}});
  out.push_back({"report", "render a markdown table from a bench CSV",
                 {path_key("input", nullptr, "bench CSV"), path_key("out", "", "markdown file (default: input.md)")}});
  return out;
}

std::string type_name(ValueType t) {
  switch (t) {
    case ValueType::integer: return "integer";
    case ValueType::number: return "number";
    case ValueType::string: return "string";
    case ValueType::boolean: return "boolean";
    case ValueType::int_list: return "list of integers";
    case ValueType::string_list: return "list of strings";
    case ValueType::number_list: return "list of numbers";
  }
  return "value";
}

void check_min(const ConfigKey& k, double v) {
  if (k.min && v < *k.min) {
    std::ostringstream msg;
    msg << "must be >= " << *k.min << ", got " << v;
    throw ConfigError(k.name, msg.str());
  }
}

// Type-checks a JSON value against the key and returns its normalized form.
json check_value(const ConfigKey& k, const json& v) {
  auto fail = [&] { throw ConfigError(k.name, "expected " + type_name(k.type) + ", got " + v.dump()); };
  switch (k.type) {
    case ValueType::integer:
      if (!v.is_number_integer()) fail();
      check_min(k, static_cast<double>(v.get<std::int64_t>()));
      return v;
    case ValueType::number:
      if (!v.is_number()) fail();
      if (!std::isfinite(v.get<double>())) throw ConfigError(k.name, "must be finite");
      check_min(k, v.get<double>());
      return json(v.get<double>());
    case ValueType::string:
      if (!v.is_string()) fail();
      if (!k.choices.empty() &&
          std::find(k.choices.begin(), k.choices.end(), v.get<std::string>()) == k.choices.end()) {
        std::string all;
        for (const auto& c : k.choices) all += (all.empty() ? "" : "|") + c;
        throw ConfigError(k.name, "expected one of " + all + ", got '" + v.get<std::string>() + "'");
      }
      return v;
    case ValueType::boolean:
      if (!v.is_boolean()) fail();
      return v;
    case ValueType::int_list:
      if (!v.is_array()) fail();
      for (const auto& e : v) {
        if (!e.is_number_integer()) fail();
        check_min(k, static_cast<double>(e.get<std::int64_t>()));
      }
      return v;
    case ValueType::number_list: {
      if (!v.is_array()) fail();
      json out = json::array();
      for (const auto& e : v) {
        if (!e.is_number() || !std::isfinite(e.get<double>())) fail();
        out.push_back(e.get<double>());
      }
      return out;
    }
    case ValueType::string_list:
      if (!v.is_array()) fail();
      for (const auto& e : v)
        if (!e.is_string()) fail();
      return v;
  }
  return v;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::int64_t parse_int(const ConfigKey& k, const std::string& s) {
  std::size_t pos = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw ConfigError(k.name, "expected an integer, got '" + s + "'");
  return v;
}

double parse_number(const ConfigKey& k, const std::string& s) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw ConfigError(k.name, "expected a number, got '" + s + "'");
  return v;
}

json flag_to_json(const ConfigKey& k, const std::string& s) {
  switch (k.type) {
    case ValueType::integer: return parse_int(k, s);
    case ValueType::number: return parse_number(k, s);
    case ValueType::string: return s;
    case ValueType::boolean:
      if (s == "true" || s == "1" || s.empty()) return true;
      if (s == "false" || s == "0") return false;
      throw ConfigError(k.name, "expected true or false, got '" + s + "'");
    case ValueType::int_list: {
      json a = json::array();
      for (const auto& e : split_commas(s)) a.push_back(parse_int(k, e));
      return a;
    }
    case ValueType::number_list: {
      json a = json::array();
      for (const auto& e : split_commas(s)) a.push_back(parse_number(k, e));
      return a;
    }
    case ValueType::string_list: {
      json a = json::array();
      for (const auto& e : split_commas(s)) a.push_back(e);
      return a;
    }
  }
  return s;
}

}  // namespace

const ConfigKey* CommandSchema::find(const std::string& name) const {
  for (const auto& k : keys)
    if (k.name == name) return &k;
  return nullptr;
}

const std::vector<CommandSchema>& command_schemas() {
  static const std::vector<CommandSchema> schemas = build_schemas();
  return schemas;
}

const CommandSchema& command_schema(const std::string& command) {
  for (const auto& s : command_schemas())
    if (s.name == command) return s;
  throw ConfigError("command", "unknown subcommand '" + command + "'");
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

RunConfig parse_config(const std::string& command, const std::optional<json>& file,
                       const std::map<std::string, std::string>& flags) {
  const auto& schema = command_schema(command);
  RunConfig cfg;
  cfg.command = command;
  cfg.values = json::object();
  for (const auto& k : schema.keys) cfg.values[k.name] = k.default_value;

  if (file) {
    json body = *file;
    if (!body.is_object()) throw ConfigError("config", "expected a JSON object");
    if (body.contains("format") && body["format"] == kManifestFormat) {
      if (!body.contains("command") || body["command"] != command)
        throw ConfigError("command", "manifest was written by a different subcommand");
      body = body.value("config", json::object());
    }
    for (auto it = body.begin(); it != body.end(); ++it) {
      if (it.key() == "schema_version") {
        if (!it.value().is_number_integer() || it.value().get<int>() != kConfigSchemaVersion)
          throw ConfigError("schema_version", "unsupported schema version " + it.value().dump());
        continue;
      }
      const ConfigKey* k = schema.find(it.key());
      if (!k) throw ConfigError(it.key(), "unknown key for '" + command + "'");
      cfg.values[k->name] = check_value(*k, it.value());
    }
  }
  for (const auto& [name, raw] : flags) {
    const ConfigKey* k = schema.find(name);
    if (!k) throw ConfigError(name, "unknown option for '" + command + "'");
    cfg.values[k->name] = check_value(*k, flag_to_json(*k, raw));
  }
  for (const auto& k : schema.keys) {
    if (cfg.values[k.name].is_null()) throw ConfigError(k.name, "required key is missing");
    if (k.is_path && !cfg.values[k.name].get<std::string>().empty())
      cfg.values[k.name] = std::filesystem::absolute(cfg.values[k.name].get<std::string>()).lexically_normal().string();
  }
  return cfg;
}

std::int64_t RunConfig::get_int(const std::string& k) const { return values.at(k).get<std::int64_t>(); }
double RunConfig::get_double(const std::string& k) const { return values.at(k).get<double>(); }
std::string RunConfig::get_string(const std::string& k) const { return values.at(k).get<std::string>(); }
bool RunConfig::get_bool(const std::string& k) const { return values.at(k).get<bool>(); }
std::vector<int> RunConfig::get_int_list(const std::string& k) const { return values.at(k).get<std::vector<int>>(); }
std::vector<double> RunConfig::get_number_list(const std::string& k) const {
  return values.at(k).get<std::vector<double>>();
}
std::vector<std::string> RunConfig::get_string_list(const std::string& k) const {
  return values.at(k).get<std::vector<std::string>>();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256 initialization failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

nlohmann::json manifest_to_json(const RunManifest& m) {
  json j;
  j["format"] = kManifestFormat;
  j["command"] = m.config.command;
  json cfg = m.config.values;
  cfg["schema_version"] = m.config.schema_version;
  j["config"] = cfg;
  j["catalog_version"] = m.catalog_version;
  j["wall_time_s"] = m.wall_time_s;
  j["seeds"] = m.seeds;
  j["outputs"] = json::array();
  for (const auto& [path, digest] : m.digests) j["outputs"].push_back({{"path", path}, {"sha256", digest}});
  return j;
}

std::filesystem::path manifest_path(const std::filesystem::path& primary) {
  return std::filesystem::path(primary.string() + ".manifest.json");
}

std::string format_sig1(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (x == 0.0) return "0";
  int e = static_cast<int>(std::floor(std::log10(std::abs(x))));
  double m = std::round(x / std::pow(10.0, e));
  if (std::abs(m) >= 10.0) {
    m /= 10.0;
    ++e;
  }
  std::ostringstream out;
  out << static_cast<long long>(m) << 'e' << e;
  return out.str();
}

std::string format_mean_std(double mean, double std) { return format_sig1(mean) + " ± " + format_sig1(std); }

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<EstimateReport>& reports) {
  if (reports.empty()) throw InvalidArgument("write_bench_csv: no reports");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "system_id,n_draws,rmse_mean,rmse_std,failures,method\n";
  for (const auto& r : reports)
    out << r.system_id << ',' << r.n_draws << ',' << format_double(r.rmse_mean) << ',' << format_double(r.rmse_std)
        << ',' << r.failures << ',' << to_string(r.method) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string bench_markdown(const std::vector<EstimateReport>& reports) {
  if (reports.empty()) throw InvalidArgument("bench_markdown: no reports");
  std::ostringstream md;
  md << "| system | method | draws | failures | RMSE (m ± std) |\n";
  md << "|---|---|---|---|---|\n";
  for (const auto& r : reports)
    md << "| " << r.system_id << " | " << to_string(r.method) << " | " << r.n_draws << " | " << r.failures << " | "
       << format_mean_std(r.rmse_mean, r.rmse_std) << " |\n";
  return md.str();
}

std::vector<EstimateReport> read_bench_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string line;
  if (!std::getline(in, line) || line != "system_id,n_draws,rmse_mean,rmse_std,failures,method")
    throw InvalidArgument("'" + path.string() + "' is not a bench CSV");
  std::vector<EstimateReport> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 6) throw InvalidArgument("bench CSV line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      EstimateReport r;
      r.system_id = f[0];
      r.n_draws = std::stoi(f[1]);
      r.rmse_mean = f[2] == "nan" ? std::nan("") : std::stod(f[2]);
      r.rmse_std = f[3] == "nan" ? std::nan("") : std::stod(f[3]);
      r.failures = std::stoi(f[4]);
      r.method = fit_method_from_string(f[5]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw InvalidArgument("bench CSV line " + std::to_string(lineno) + ": malformed field");
    }
  }
  if (out.empty()) throw InvalidArgument("'" + path.string() + "' has no rows");
  return out;
}

}  // namespace dynident
