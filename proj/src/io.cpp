#include "opotomo/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace opotomo::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_u64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt_hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double parse_double(const std::string& text, const std::string& what) {
  const char* begin = text.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw std::invalid_argument(what + ": not a number: " + text);
  return v;
}

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
  const char* begin = text.c_str();
  char* end = nullptr;
  const unsigned long long v = std::strtoull(begin, &end, 10);
  if (end == begin || *end != '\0' || text.front() == '-')
    throw std::invalid_argument(what + ": not an unsigned integer: " + text);
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

struct Record {
  std::string tag;
  std::map<std::string, std::string> meta;
  std::vector<std::string> data;  // first line is the column header
};

Record parse_record(const std::string& text) {
  Record rec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string body = line.size() > 1 && line[1] == ' ' ? line.substr(2)
                                                           : line.substr(1);
      const std::size_t eq = body.find(" = ");
      if (rec.tag.empty() && eq == std::string::npos) {
        rec.tag = body;
        continue;
      }
      if (eq == std::string::npos)
        throw std::invalid_argument("record: malformed header line: " + line);
      rec.meta[body.substr(0, eq)] = body.substr(eq + 3);
    } else {
      rec.data.push_back(line);
    }
  }
  return rec;
}

const std::string& meta_value(const Record& rec, const std::string& key) {
  const auto it = rec.meta.find(key);
  if (it == rec.meta.end())
    throw std::invalid_argument("record: missing header field: " + key);
  return it->second;
}

double meta_double(const Record& rec, const std::string& key) {
  return parse_double(meta_value(rec, key), key);
}

void expect_columns(const Record& rec, const std::string& columns,
                    const std::string& what) {
  if (rec.data.empty() || rec.data.front() != columns)
    throw std::invalid_argument(what + ": expected column header " + columns);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("io: cannot read " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp(path + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("io: cannot open " + tmp.string());
    out.write(content.data(),
              static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw std::runtime_error("io: cannot write " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) {
    std::error_code ec2;
    fs::remove(tmp, ec2);
    throw std::runtime_error("io: cannot rename " + tmp.string() + ": " +
                             ec.message());
  }
}

std::string format_curve(const protocol::BiasProbabilityCurve& curve) {
  std::ostringstream out;
  out << "# opotomo curve v1\n";
  out << "# theta = " << fmt_double(curve.theta) << "\n";
  out << "# tau0 = " << fmt_double(curve.tau0) << "\n";
  out << "# lambda = " << fmt_double(curve.lambda) << "\n";
  out << "# saturation_g = " << fmt_double(curve.saturation_g) << "\n";
  out << "# n_per_point = " << fmt_u64(curve.n_per_point) << "\n";
  out << "# seed = " << fmt_u64(curve.seed) << "\n";
  out << "# prep = " << curve.prep_label << "\n";
  out << "b,p_hat,n,ci_low,ci_high\n";
  for (const protocol::CurvePoint& pt : curve.points)
    out << fmt_double(pt.b) << ',' << fmt_double(pt.p_hat) << ','
        << fmt_u64(pt.n) << ',' << fmt_double(pt.ci_low) << ','
        << fmt_double(pt.ci_high) << "\n";
  return out.str();
}

protocol::BiasProbabilityCurve parse_curve(const std::string& text) {
  const Record rec = parse_record(text);
  if (rec.tag != "opotomo curve v1")
    throw std::invalid_argument("curve: unrecognized format tag");
  protocol::BiasProbabilityCurve curve;
  curve.theta = meta_double(rec, "theta");
  curve.tau0 = meta_double(rec, "tau0");
  curve.lambda = meta_double(rec, "lambda");
  curve.saturation_g = meta_double(rec, "saturation_g");
  curve.n_per_point = parse_u64(meta_value(rec, "n_per_point"), "n_per_point");
  curve.seed = parse_u64(meta_value(rec, "seed"), "seed");
  curve.prep_label = meta_value(rec, "prep");
  expect_columns(rec, "b,p_hat,n,ci_low,ci_high", "curve");
  for (std::size_t i = 1; i < rec.data.size(); ++i) {
    const std::vector<std::string> f = split(rec.data[i], ',');
    if (f.size() != 5)
      throw std::invalid_argument("curve: malformed row: " + rec.data[i]);
    protocol::CurvePoint pt;
    pt.b = parse_double(f[0], "b");
    pt.p_hat = parse_double(f[1], "p_hat");
    pt.n = parse_u64(f[2], "n");
    pt.ci_low = parse_double(f[3], "ci_low");
    pt.ci_high = parse_double(f[4], "ci_high");
    curve.points.push_back(pt);
  }
  curve.validate();
  return curve;
}

std::string format_marginal(const reconstruct::MarginalQ& marginal) {
  std::ostringstream out;
  out << "# opotomo marginal v1\n";
  out << "# theta = " << fmt_double(marginal.theta) << "\n";
  out << "# normalized = " << (marginal.normalized ? 1 : 0) << "\n";
  out << "# fitted_center = " << fmt_double(marginal.fitted_center) << "\n";
  out << "# fitted_sigma = " << fmt_double(marginal.fitted_sigma) << "\n";
  out << "# sigma_err = " << fmt_double(marginal.sigma_err) << "\n";
  out << "x,density\n";
  for (std::size_t i = 0; i < marginal.axis.size(); ++i)
    out << fmt_double(marginal.axis[i]) << ',' << fmt_double(marginal.density[i])
        << "\n";
  return out.str();
}

reconstruct::MarginalQ parse_marginal(const std::string& text) {
  const Record rec = parse_record(text);
  if (rec.tag != "opotomo marginal v1")
    throw std::invalid_argument("marginal: unrecognized format tag");
  reconstruct::MarginalQ m;
  m.theta = meta_double(rec, "theta");
  m.normalized = meta_double(rec, "normalized") != 0.0;
  m.fitted_center = meta_double(rec, "fitted_center");
  m.fitted_sigma = meta_double(rec, "fitted_sigma");
  m.sigma_err = meta_double(rec, "sigma_err");
  expect_columns(rec, "x,density", "marginal");
  for (std::size_t i = 1; i < rec.data.size(); ++i) {
    const std::vector<std::string> f = split(rec.data[i], ',');
    if (f.size() != 2)
      throw std::invalid_argument("marginal: malformed row: " + rec.data[i]);
    m.axis.push_back(parse_double(f[0], "x"));
    m.density.push_back(parse_double(f[1], "density"));
  }
  m.validate();
  return m;
}

std::string format_qgrid(const reconstruct::QGrid& grid) {
  std::ostringstream out;
  out << "# opotomo qgrid v1\n";
  out << "# size = " << grid.size << "\n";
  out << "# x0 = " << fmt_double(grid.x0) << "\n";
  out << "# dx = " << fmt_double(grid.dx) << "\n";
  out << "# clipped_mass_fraction = " << fmt_double(grid.clipped_mass_fraction)
      << "\n";
  out << "# provenance = " << grid.provenance << "\n";
  out << "q_row_major\n";
  for (int iy = 0; iy < grid.size; ++iy) {
    for (int ix = 0; ix < grid.size; ++ix) {
      if (ix > 0) out << ',';
      out << fmt_double(grid.at(ix, iy));
    }
    out << "\n";
  }
  return out.str();
}

reconstruct::QGrid parse_qgrid(const std::string& text) {
  const Record rec = parse_record(text);
  if (rec.tag != "opotomo qgrid v1")
    throw std::invalid_argument("qgrid: unrecognized format tag");
  reconstruct::QGrid grid;
  grid.size = static_cast<int>(parse_u64(meta_value(rec, "size"), "size"));
  grid.x0 = meta_double(rec, "x0");
  grid.dx = meta_double(rec, "dx");
  grid.clipped_mass_fraction = meta_double(rec, "clipped_mass_fraction");
  grid.provenance = meta_value(rec, "provenance");
  expect_columns(rec, "q_row_major", "qgrid");
  if (rec.data.size() != static_cast<std::size_t>(grid.size) + 1)
    throw std::invalid_argument("qgrid: row count does not match size");
  grid.values.reserve(static_cast<std::size_t>(grid.size) *
                      static_cast<std::size_t>(grid.size));
  for (std::size_t r = 1; r < rec.data.size(); ++r) {
    const std::vector<std::string> f = split(rec.data[r], ',');
    if (f.size() != static_cast<std::size_t>(grid.size))
      throw std::invalid_argument("qgrid: column count does not match size");
    for (const std::string& v : f) grid.values.push_back(parse_double(v, "q"));
  }
  grid.validate();
  return grid;
}

void ReconstructionSettings::validate() const {
  if (grid_size < 8)
    throw std::invalid_argument("reconstruction.grid_size: must be >= 8");
  if (axis_points < 16)
    throw std::invalid_argument("reconstruction.axis_points: must be >= 16");
  if (!(axis_halfwidth_sigmas > 0.0))
    throw std::invalid_argument(
        "reconstruction.axis_halfwidth_sigmas: must be > 0");
}

void RunConfig::validate() const {
  plan.validate();
  recon.validate();
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw std::invalid_argument(path + ": " + msg);
}

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) fail(path + "." + it.key(), "unknown field");
  }
}

const json& section(const json& obj, const char* key) {
  static const json empty = json::object();
  if (!obj.contains(key)) return empty;
  const json& v = obj.at(key);
  if (!v.is_object()) fail(std::string("config.") + key, "must be an object");
  return v;
}

double get_num(const json& obj, const std::string& path, const char* key,
               double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) fail(path + "." + key, "must be a number");
  return v.get<double>();
}

int get_int(const json& obj, const std::string& path, const char* key,
            int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) fail(path + "." + key, "must be an integer");
  return v.get<int>();
}

bool get_flag(const json& obj, const std::string& path, const char* key,
              bool fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_boolean()) fail(path + "." + key, "must be a boolean");
  return v.get<bool>();
}

std::string get_str(const json& obj, const std::string& path, const char* key,
                    const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) fail(path + "." + key, "must be a string");
  return v.get<std::string>();
}

std::vector<double> get_grid(const json& obj, const std::string& path,
                             const char* key) {
  std::vector<double> out;
  if (!obj.contains(key)) return out;
  const json& v = obj.at(key);
  if (!v.is_array()) fail(path + "." + key, "must be an array of numbers");
  for (const json& e : v) {
    if (!e.is_number()) fail(path + "." + key, "must be an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

}  // namespace

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) fail("config", "must be an object");
  check_keys(j, "config",
             {"seed", "workers", "preparation", "measurement", "sweep",
              "reconstruction"});
  RunConfig cfg;

  if (!j.contains("seed"))
    fail("config.seed", "required (no implicit entropy)");
  {
    const json& v = j.at("seed");
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      fail("config.seed", "must be an unsigned 64-bit integer");
    cfg.plan.seed = v.get<std::uint64_t>();
  }
  cfg.plan.options.workers = get_int(j, "config", "workers", 0);
  if (cfg.plan.options.workers < 0)
    fail("config.workers", "must be >= 0");

  const json& prep = section(j, "preparation");
  check_keys(prep, "preparation",
             {"kind", "lambda_prep", "relax_time", "relax_dt", "mean",
              "var_major", "var_minor", "axis_angle"});
  const std::string kind = get_str(prep, "preparation", "kind", "vacuum_point");
  if (kind == "vacuum_point") {
    cfg.plan.prep.kind = protocol::PreparationSpec::Kind::vacuum_point;
  } else if (kind == "analytic_gaussian") {
    cfg.plan.prep.kind = protocol::PreparationSpec::Kind::analytic_gaussian;
    model::GaussianStateSpec g;
    if (prep.contains("mean")) {
      const json& m = prep.at("mean");
      if (!m.is_array() || m.size() != 2 || !m[0].is_number() ||
          !m[1].is_number())
        fail("preparation.mean", "must be an array of two numbers");
      g.mean = {m[0].get<double>(), m[1].get<double>()};
    }
    g.var_major = get_num(prep, "preparation", "var_major", 0.5);
    g.var_minor = get_num(prep, "preparation", "var_minor", 0.5);
    g.axis_angle = get_num(prep, "preparation", "axis_angle", 0.0);
    cfg.plan.prep.gaussian = g;
  } else if (kind == "sde_relaxation") {
    cfg.plan.prep.kind = protocol::PreparationSpec::Kind::sde_relaxation;
    cfg.plan.prep.lambda_prep = get_num(prep, "preparation", "lambda_prep", 0.8);
    cfg.plan.prep.relax_time = get_num(prep, "preparation", "relax_time", 20.0);
    cfg.plan.prep.relax_dt = get_num(prep, "preparation", "relax_dt", 0.005);
  } else {
    fail("preparation.kind",
         "must be one of vacuum_point, analytic_gaussian, sde_relaxation");
  }

  const json& meas = section(j, "measurement");
  check_keys(meas, "measurement",
             {"lambda", "saturation_g", "rise_time", "lambda_start", "dt",
              "tau_end", "rotate_at_injection", "extinction_floor",
              "bias_phase_offset"});
  cfg.plan.lambda = get_num(meas, "measurement", "lambda", 2.0);
  cfg.plan.options.saturation_g = get_num(meas, "measurement", "saturation_g", 0.0);
  cfg.plan.options.rise_time = get_num(meas, "measurement", "rise_time", 0.0);
  const double lambda_start_default =
      cfg.plan.prep.kind == protocol::PreparationSpec::Kind::sde_relaxation
          ? cfg.plan.prep.lambda_prep
          : 0.0;
  cfg.plan.options.lambda_start =
      get_num(meas, "measurement", "lambda_start", lambda_start_default);
  cfg.plan.options.dt = get_num(meas, "measurement", "dt", 0.005);
  cfg.plan.options.tau_end = get_num(meas, "measurement", "tau_end", 0.0);
  cfg.plan.options.rotate_at_injection =
      get_flag(meas, "measurement", "rotate_at_injection", false);
  cfg.plan.extinction_floor =
      get_num(meas, "measurement", "extinction_floor", 0.0);
  cfg.plan.bias_phase_offset =
      get_num(meas, "measurement", "bias_phase_offset", 0.0);

  const json& sweep = section(j, "sweep");
  check_keys(sweep, "sweep",
             {"theta_grid", "n_angles", "tau0_grid", "b_grid", "b_auto_points",
              "b_auto_span", "n_per_point"});
  if (sweep.contains("theta_grid") && sweep.contains("n_angles"))
    fail("sweep.n_angles", "conflicts with theta_grid");
  if (sweep.contains("n_angles")) {
    const int n = get_int(sweep, "sweep", "n_angles", 0);
    if (n < 1) fail("sweep.n_angles", "must be >= 1");
    cfg.plan.theta_grid.clear();
    for (int k = 0; k < n; ++k)
      cfg.plan.theta_grid.push_back(std::numbers::pi * static_cast<double>(k) /
                                    static_cast<double>(n));
  } else if (sweep.contains("theta_grid")) {
    cfg.plan.theta_grid = get_grid(sweep, "sweep", "theta_grid");
  }
  if (sweep.contains("tau0_grid"))
    cfg.plan.tau0_grid = get_grid(sweep, "sweep", "tau0_grid");
  cfg.plan.b_grid = get_grid(sweep, "sweep", "b_grid");
  cfg.plan.b_auto_points = get_int(sweep, "sweep", "b_auto_points", 21);
  cfg.plan.b_auto_span = get_num(sweep, "sweep", "b_auto_span", 4.0);
  {
    const long long n = get_int(sweep, "sweep", "n_per_point", 1000);
    if (n < 0) fail("sweep.n_per_point", "must be >= 0");
    cfg.plan.n_per_point = static_cast<std::size_t>(n);
  }

  const json& recon = section(j, "reconstruction");
  check_keys(recon, "reconstruction",
             {"grid_size", "axis_points", "axis_halfwidth_sigmas", "mode"});
  cfg.recon.grid_size = get_int(recon, "reconstruction", "grid_size", 128);
  cfg.recon.axis_points = get_int(recon, "reconstruction", "axis_points", 129);
  cfg.recon.axis_halfwidth_sigmas =
      get_num(recon, "reconstruction", "axis_halfwidth_sigmas", 4.0);
  const std::string mode =
      get_str(recon, "reconstruction", "mode", "parametric");
  if (mode == "parametric")
    cfg.recon.mode = reconstruct::SensitivityMode::parametric;
  else if (mode == "nonparametric")
    cfg.recon.mode = reconstruct::SensitivityMode::nonparametric;
  else
    fail("reconstruction.mode", "must be parametric or nonparametric");

  cfg.validate();
  return cfg;
}

json config_to_json(const RunConfig& config) {
  json j;
  j["seed"] = config.plan.seed;
  j["workers"] = config.plan.options.workers;
  json prep;
  switch (config.plan.prep.kind) {
    case protocol::PreparationSpec::Kind::vacuum_point:
      prep["kind"] = "vacuum_point";
      break;
    case protocol::PreparationSpec::Kind::analytic_gaussian:
      prep["kind"] = "analytic_gaussian";
      prep["mean"] = {config.plan.prep.gaussian.mean.re,
                      config.plan.prep.gaussian.mean.im};
      prep["var_major"] = config.plan.prep.gaussian.var_major;
      prep["var_minor"] = config.plan.prep.gaussian.var_minor;
      prep["axis_angle"] = config.plan.prep.gaussian.axis_angle;
      break;
    case protocol::PreparationSpec::Kind::sde_relaxation:
      prep["kind"] = "sde_relaxation";
      prep["lambda_prep"] = config.plan.prep.lambda_prep;
      prep["relax_time"] = config.plan.prep.relax_time;
      prep["relax_dt"] = config.plan.prep.relax_dt;
      break;
  }
  j["preparation"] = prep;
  json meas;
  meas["lambda"] = config.plan.lambda;
  meas["saturation_g"] = config.plan.options.saturation_g;
  meas["rise_time"] = config.plan.options.rise_time;
  meas["lambda_start"] = config.plan.options.lambda_start;
  meas["dt"] = config.plan.options.dt;
  meas["tau_end"] = config.plan.options.tau_end;
  meas["rotate_at_injection"] = config.plan.options.rotate_at_injection;
  meas["extinction_floor"] = config.plan.extinction_floor;
  meas["bias_phase_offset"] = config.plan.bias_phase_offset;
  j["measurement"] = meas;
  json sweep;
  sweep["theta_grid"] = config.plan.theta_grid;
  sweep["tau0_grid"] = config.plan.tau0_grid;
  sweep["b_grid"] = config.plan.b_grid;
  sweep["b_auto_points"] = config.plan.b_auto_points;
  sweep["b_auto_span"] = config.plan.b_auto_span;
  sweep["n_per_point"] = config.plan.n_per_point;
  j["sweep"] = sweep;
  json recon;
  recon["grid_size"] = config.recon.grid_size;
  recon["axis_points"] = config.recon.axis_points;
  recon["axis_halfwidth_sigmas"] = config.recon.axis_halfwidth_sigmas;
  recon["mode"] = config.recon.mode == reconstruct::SensitivityMode::parametric
                      ? "parametric"
                      : "nonparametric";
  j["reconstruction"] = recon;
  return j;
}

json preset_json(const std::string& name) {
  if (name == "fig2") {
    return json{
        {"preparation",
         {{"kind", "sde_relaxation"}, {"lambda_prep", 0.8}, {"relax_time", 20.0}}},
        {"measurement", {{"lambda", 2.0}}},
        {"sweep",
         {{"n_angles", 12}, {"tau0_grid", {0.0}}, {"n_per_point", 1000}}},
        {"reconstruction", {{"grid_size", 128}, {"axis_points", 129}}}};
  }
  if (name == "fig3") {
    return json{
        {"preparation", {{"kind", "vacuum_point"}}},
        {"measurement", {{"lambda", 2.0}}},
        {"sweep",
         {{"theta_grid", {0.0}},
          {"tau0_grid", {0.0, 0.5, 1.0}},
          {"n_per_point", 10000}}}};
  }
  fail("preset", "must be fig2 or fig3");
}

namespace {

std::string now_utc() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Removes everything it wrote unless committed, so failed runs leave no
// partial outputs behind.
class OutputTracker {
 public:
  explicit OutputTracker(std::string dir) : dir_(std::move(dir)) {}
  OutputTracker(const OutputTracker&) = delete;
  OutputTracker& operator=(const OutputTracker&) = delete;
  ~OutputTracker() {
    if (committed_) return;
    for (const auto& [name, sum] : entries_) {
      std::error_code ec;
      fs::remove(fs::path(dir_) / name, ec);
    }
  }

  void write(const std::string& name, const std::string& content) {
    write_file_atomic((fs::path(dir_) / name).string(), content);
    entries_.emplace_back(name, fnv1a64(content));
  }

  json outputs_json() const {
    json arr = json::array();
    for (const auto& [name, sum] : entries_)
      arr.push_back(json{{"file", name}, {"fnv1a64", fmt_hex64(sum)}});
    return arr;
  }

  void commit() { committed_ = true; }

 private:
  std::string dir_;
  std::vector<std::pair<std::string, std::uint64_t>> entries_;
  bool committed_ = false;
};

void write_manifest(OutputTracker& tracker, const std::string& command,
                    const json& config_snapshot) {
  json manifest;
  manifest["tool"] = "opotomo";
  manifest["version"] = kToolVersion;
  manifest["command"] = command;
  manifest["wall_clock"] = now_utc();
  manifest["config"] = config_snapshot;
  manifest["outputs"] = tracker.outputs_json();
  tracker.write("manifest.json", manifest.dump(2) + "\n");
  tracker.commit();
}

std::string curve_file_name(std::size_t theta_index, std::size_t tau0_index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "curve_t%02zu_d%02zu.csv", theta_index,
                tau0_index);
  return buf;
}

std::vector<double> parse_range(const std::string& text, const std::string& what) {
  const std::vector<std::string> f = split(text, ':');
  if (f.size() == 1) return {parse_double(f[0], what)};
  if (f.size() != 3)
    throw std::invalid_argument(what +
                                ": must be <value> or <start>:<stop>:<count>");
  const double start = parse_double(f[0], what);
  const double stop = parse_double(f[1], what);
  const std::uint64_t count = parse_u64(f[2], what);
  if (count < 1 || count > 100000)
    throw std::invalid_argument(what + ": count must be in [1, 100000]");
  if (count == 1) return {start};
  std::vector<double> out(count);
  for (std::uint64_t i = 0; i < count; ++i)
    out[i] = start + (stop - start) * static_cast<double>(i) /
                         static_cast<double>(count - 1);
  return out;
}

struct OracleParams {
  std::string quantity = "erf";
  double lambda = 2.0;
  double tau0 = 0.0;
  std::string b_range = "-2:2:21";
  std::string tau_range = "0:3:31";
  std::string out;
};

void cmd_oracle(const OracleParams& params) {
  std::ostringstream out;
  out << "# opotomo oracle v1\n";
  out << "# quantity = " << params.quantity << "\n";
  if (params.quantity == "erf") {
    out << "b0,tau0,lambda,p\n";
    for (double b : parse_range(params.b_range, "b")) {
      model::BiasSpec bias;
      bias.amplitude = b;
      bias.injection_delay = params.tau0;
      const double p = model::erf_probability(bias, params.lambda);
      out << fmt_double(b) << ',' << fmt_double(params.tau0) << ','
          << fmt_double(params.lambda) << ',' << fmt_double(p) << "\n";
    }
  } else if (params.quantity == "displacement") {
    out << "b0,lambda,displacement\n";
    for (double b : parse_range(params.b_range, "b"))
      out << fmt_double(b) << ',' << fmt_double(params.lambda) << ','
          << fmt_double(model::displacement(b, params.lambda)) << "\n";
  } else {
    out << "tau,lambda,f_variance\n";
    for (double tau : parse_range(params.tau_range, "tau"))
      out << fmt_double(tau) << ',' << fmt_double(params.lambda) << ','
          << fmt_double(model::f_variance(tau, params.lambda).value) << "\n";
  }
  if (params.out.empty())
    std::cout << out.str();
  else
    write_file_atomic((fs::path(params.out) / "oracle.csv").string(), out.str());
}

void cmd_sweep(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  OutputTracker tracker(out_dir);
  for (std::size_t ti = 0; ti < cfg.plan.theta_grid.size(); ++ti)
    for (std::size_t di = 0; di < cfg.plan.tau0_grid.size(); ++di) {
      const protocol::BiasProbabilityCurve curve =
          protocol::sweep_bias(cfg.plan, ti, di);
      tracker.write(curve_file_name(ti, di), format_curve(curve));
    }
  write_manifest(tracker, "sweep", config_to_json(cfg));
}

struct LoadedCurve {
  std::string file;
  protocol::BiasProbabilityCurve curve;
};

std::vector<LoadedCurve> load_curves(const std::string& in_dir) {
  if (!fs::is_directory(in_dir))
    throw std::invalid_argument("input: not a directory: " + in_dir);
  std::vector<std::string> names;
  for (const fs::directory_entry& entry : fs::directory_iterator(in_dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("curve", 0) == 0 &&
        name.size() > 4 && name.substr(name.size() - 4) == ".csv")
      names.push_back(name);
  }
  if (names.empty())
    throw std::invalid_argument("input: no curve files found in " + in_dir);
  std::sort(names.begin(), names.end());
  std::vector<LoadedCurve> out;
  out.reserve(names.size());
  for (const std::string& name : names) {
    try {
      out.push_back(
          {name, parse_curve(read_file((fs::path(in_dir) / name).string()))});
    } catch (const std::exception& e) {
      throw std::invalid_argument("input: " + name + ": " + e.what());
    }
  }
  return out;
}

struct ReconstructParams {
  std::string in_dir;
  std::string out_dir;
  ReconstructionSettings settings{};
};

void cmd_reconstruct(const ReconstructParams& params) {
  params.settings.validate();
  std::vector<LoadedCurve> curves = load_curves(params.in_dir);
  for (std::size_t i = 1; i < curves.size(); ++i) {
    if (std::abs(curves[i].curve.tau0 - curves[0].curve.tau0) > 1e-12)
      throw std::invalid_argument("input: tau0 mismatch between " +
                                  curves[0].file + " and " + curves[i].file);
    if (std::abs(curves[i].curve.lambda - curves[0].curve.lambda) > 1e-12)
      throw std::invalid_argument("input: lambda mismatch between " +
                                  curves[0].file + " and " + curves[i].file);
  }
  std::sort(curves.begin(), curves.end(),
            [](const LoadedCurve& a, const LoadedCurve& b) {
              return a.curve.theta < b.curve.theta;
            });
  for (std::size_t i = 1; i < curves.size(); ++i)
    if (std::abs(curves[i].curve.theta - curves[i - 1].curve.theta) < 1e-12)
      throw std::invalid_argument("input: duplicate angle in " +
                                  curves[i - 1].file + " and " +
                                  curves[i].file);

  const double lambda = curves[0].curve.lambda;
  const double tau0 = curves[0].curve.tau0;
  const double scale = model::bias_to_displacement(1.0, lambda, tau0);

  std::vector<reconstruct::ErfFit> fits;
  fits.reserve(curves.size());
  double max_sigma_x = 0.0;
  double max_center_x = 0.0;
  for (const LoadedCurve& lc : curves) {
    try {
      fits.push_back(reconstruct::fit_erf(lc.curve));
    } catch (const std::exception& e) {
      throw std::invalid_argument("input: " + lc.file + ": " + e.what());
    }
    max_sigma_x = std::max(max_sigma_x, scale * fits.back().sigma_b);
    max_center_x = std::max(max_center_x, std::abs(scale * fits.back().center));
  }

  const double halfwidth =
      params.settings.axis_halfwidth_sigmas * max_sigma_x + max_center_x;
  std::vector<double> axis(static_cast<std::size_t>(params.settings.axis_points));
  for (int i = 0; i < params.settings.axis_points; ++i)
    axis[static_cast<std::size_t>(i)] =
        -halfwidth + 2.0 * halfwidth * static_cast<double>(i) /
                         static_cast<double>(params.settings.axis_points - 1);

  reconstruct::Sinogram sino;
  sino.label = fs::path(params.in_dir).filename().string();
  for (std::size_t i = 0; i < curves.size(); ++i)
    sino.marginals.push_back(reconstruct::sensitivity_to_marginal(
        curves[i].curve, fits[i], lambda, tau0, params.settings.mode, axis));
  const reconstruct::QGrid grid =
      reconstruct::inverse_radon(sino, params.settings.grid_size);

  // Vacuum reference with the same measurement kernel, angles and axis.
  model::GaussianStateSpec vac;
  vac.var_major = vac.var_minor = lambda / (2.0 * (lambda - 1.0));
  const reconstruct::Sinogram vac_sino =
      reconstruct::analytic_sinogram(vac, sino.angles(), axis, "vacuum reference");
  const reconstruct::SqueezingReport squeezing =
      reconstruct::squeezing_db(sino, vac_sino);

  const reconstruct::GridMoments moments = reconstruct::grid_moments(grid);
  const reconstruct::EllipseAxes axes = reconstruct::principal_axes(moments);
  const double r_major = reconstruct::contour_radius_1e(grid, axes.angle_major);
  const double r_minor = reconstruct::contour_radius_1e(grid, axes.angle_minor);

  OutputTracker tracker(params.out_dir);
  for (std::size_t i = 0; i < sino.marginals.size(); ++i) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "marginal_t%02zu.csv", i);
    tracker.write(buf, format_marginal(sino.marginals[i]));
  }
  tracker.write("qgrid.csv", format_qgrid(grid));

  std::ostringstream metrics;
  metrics << "# opotomo metrics v1\n";
  metrics << "# lambda = " << fmt_double(lambda) << "\n";
  metrics << "# tau0 = " << fmt_double(tau0) << "\n";
  metrics << "# clipped_mass_fraction = "
          << fmt_double(grid.clipped_mass_fraction) << "\n";
  metrics << "# ellipse_angle_major_rad = " << fmt_double(axes.angle_major)
          << "\n";
  metrics << "# ellipse_angle_minor_rad = " << fmt_double(axes.angle_minor)
          << "\n";
  metrics << "# ellipse_sigma_major = " << fmt_double(axes.sigma_major) << "\n";
  metrics << "# ellipse_sigma_minor = " << fmt_double(axes.sigma_minor) << "\n";
  metrics << "# contour_r_major = " << fmt_double(r_major) << "\n";
  metrics << "# contour_r_minor = " << fmt_double(r_minor) << "\n";
  metrics << "# db_min = " << fmt_double(squeezing.db_min) << "\n";
  metrics << "# db_min_angle = " << fmt_double(squeezing.angle_min) << "\n";
  metrics << "# db_max = " << fmt_double(squeezing.db_max) << "\n";
  metrics << "# db_max_angle = " << fmt_double(squeezing.angle_max) << "\n";
  metrics << "theta,sigma_b,sigma_b_err,center_b,sigma_x,db,db_err\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const double sigma_x =
        std::sqrt(reconstruct::marginal_effective_variance(sino.marginals[i]));
    metrics << fmt_double(curves[i].curve.theta) << ','
            << fmt_double(fits[i].sigma_b) << ','
            << fmt_double(std::sqrt(std::max(0.0, fits[i].cov[1][1]))) << ','
            << fmt_double(fits[i].center) << ',' << fmt_double(sigma_x) << ','
            << fmt_double(squeezing.db[i]) << ','
            << fmt_double(squeezing.db_err[i]) << "\n";
  }
  tracker.write("metrics.csv", metrics.str());

  json snapshot;
  snapshot["input"] = params.in_dir;
  snapshot["reconstruction"] = {
      {"grid_size", params.settings.grid_size},
      {"axis_points", params.settings.axis_points},
      {"axis_halfwidth_sigmas", params.settings.axis_halfwidth_sigmas},
      {"mode", params.settings.mode == reconstruct::SensitivityMode::parametric
                   ? "parametric"
                   : "nonparametric"}};
  write_manifest(tracker, "reconstruct", snapshot);
}

struct WidthRow {
  double tau0 = 0.0;
  double sigma_b = 0.0;
  double sigma_err = 0.0;
};

std::string format_widths(const std::vector<WidthRow>& rows, double lambda,
                          const std::string& pump_phase) {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double stderr_slope = std::numeric_limits<double>::quiet_NaN();
  if (rows.size() >= 2) {
    double sx = 0.0, sy = 0.0;
    for (const WidthRow& r : rows) {
      sx += r.tau0;
      sy += std::log(r.sigma_b);
    }
    const double n = static_cast<double>(rows.size());
    const double mx = sx / n, my = sy / n;
    double sxx = 0.0, sxy = 0.0, ss_res = 0.0;
    for (const WidthRow& r : rows) {
      sxx += (r.tau0 - mx) * (r.tau0 - mx);
      sxy += (r.tau0 - mx) * (std::log(r.sigma_b) - my);
    }
    slope = sxy / sxx;
    const double intercept = my - slope * mx;
    for (const WidthRow& r : rows) {
      const double res = std::log(r.sigma_b) - (intercept + slope * r.tau0);
      ss_res += res * res;
    }
    if (rows.size() > 2)
      stderr_slope = std::sqrt(ss_res / (n - 2.0) / sxx);
  }
  std::ostringstream out;
  out << "# opotomo dynamics v1\n";
  out << "# lambda = " << fmt_double(lambda) << "\n";
  if (!pump_phase.empty()) out << "# pump_phase = " << pump_phase << "\n";
  out << "# log_width_slope = " << fmt_double(slope) << "\n";
  out << "# log_width_slope_stderr = " << fmt_double(stderr_slope) << "\n";
  out << "tau0,sigma_b,sigma_b_err,ci_low,ci_high\n";
  for (const WidthRow& r : rows) {
    const double half = 1.959963984540054 * r.sigma_err;
    out << fmt_double(r.tau0) << ',' << fmt_double(r.sigma_b) << ','
        << fmt_double(r.sigma_err) << ',' << fmt_double(r.sigma_b - half) << ','
        << fmt_double(r.sigma_b + half) << "\n";
  }
  return out.str();
}

void cmd_dynamics(const RunConfig& cfg, const std::string& out_dir,
                  bool pump_phase_study) {
  cfg.validate();
  if (cfg.plan.options.saturation_g > 0.0) {
    const double onset = protocol::bifurcation_onset_estimate(
        cfg.plan.lambda, cfg.plan.options.saturation_g);
    double worst = 0.0;
    for (double t : cfg.plan.tau0_grid) worst = std::max(worst, t);
    if (worst > onset) {
      std::ostringstream warn;
      warn << "warning: delays beyond the bifurcation onset (tau0 > "
           << fmt_double(onset)
           << ") reach the nonlinear stage; erf model validity is degraded";
      std::cerr << warn.str() << std::endl;
    }
  }

  struct Pass {
    std::string label;  // file-name infix
    double theta;
    bool rotate;
    std::uint64_t seed;
  };
  std::vector<Pass> passes;
  if (pump_phase_study) {
    passes.push_back({"aligned", 0.0, true, rng::counter_mix(cfg.plan.seed, 1)});
    passes.push_back({"orthogonal", std::numbers::pi / 2.0, true,
                      rng::counter_mix(cfg.plan.seed, 2)});
  } else {
    passes.push_back({"", cfg.plan.theta_grid.front(),
                      cfg.plan.options.rotate_at_injection, cfg.plan.seed});
  }

  OutputTracker tracker(out_dir);
  for (const Pass& pass : passes) {
    protocol::SweepPlan plan = cfg.plan;
    plan.theta_grid = {pass.theta};
    plan.options.rotate_at_injection = pass.rotate;
    plan.seed = pass.seed;
    std::vector<WidthRow> rows;
    for (std::size_t di = 0; di < plan.tau0_grid.size(); ++di) {
      const protocol::BiasProbabilityCurve curve =
          protocol::sweep_bias(plan, 0, di);
      char buf[64];
      if (pass.label.empty())
        std::snprintf(buf, sizeof buf, "curve_d%02zu.csv", di);
      else
        std::snprintf(buf, sizeof buf, "curve_%s_d%02zu.csv",
                      pass.label.c_str(), di);
      tracker.write(buf, format_curve(curve));
      const reconstruct::ErfFit fit = reconstruct::fit_erf(curve);
      rows.push_back({plan.tau0_grid[di], fit.sigma_b,
                      std::sqrt(std::max(0.0, fit.cov[1][1]))});
    }
    const std::string widths_name =
        pass.label.empty() ? "widths.csv" : "widths_" + pass.label + ".csv";
    tracker.write(widths_name,
                  format_widths(rows, cfg.plan.lambda, pass.label));
  }
  json snapshot = config_to_json(cfg);
  snapshot["pump_phase_study"] = pump_phase_study;
  write_manifest(tracker, "dynamics", snapshot);
}

RunConfig resolve_config(const std::string& config_path,
                         const std::string& preset, bool has_seed,
                         std::uint64_t seed, bool has_workers, int workers) {
  if (config_path.empty() == preset.empty())
    throw std::invalid_argument(
        "exactly one of --config or --preset is required");
  json j;
  if (!config_path.empty()) {
    j = json::parse(read_file(config_path), nullptr, false);
    if (j.is_discarded())
      throw std::invalid_argument("config: invalid json in " + config_path);
  } else {
    j = preset_json(preset);
  }
  if (has_seed) j["seed"] = seed;
  RunConfig cfg = config_from_json(j);
  if (has_workers) {
    if (workers < 0) throw std::invalid_argument("workers: must be >= 0");
    cfg.plan.options.workers = workers;
  }
  return cfg;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"bistable parametric-oscillator tomography toolkit"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  OracleParams oracle;
  CLI::App* oracle_cmd =
      app.add_subcommand("oracle", "print analytic reference tables");
  oracle_cmd->add_option("--quantity", oracle.quantity, "erf|displacement|fvariance")
      ->check(CLI::IsMember({"erf", "displacement", "fvariance"}));
  oracle_cmd->add_option("--lambda", oracle.lambda, "pump strength");
  oracle_cmd->add_option("--tau0", oracle.tau0, "bias injection delay");
  oracle_cmd->add_option("--b", oracle.b_range, "bias value or start:stop:count");
  oracle_cmd->add_option("--tau", oracle.tau_range, "time value or start:stop:count");
  oracle_cmd->add_option("--out", oracle.out, "output directory (default stdout)");

  std::string sweep_config, sweep_preset, sweep_out;
  std::uint64_t sweep_seed = 0;
  int sweep_workers = 0;
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "run bias-probability sweeps");
  sweep_cmd->add_option("--config", sweep_config, "json config path");
  sweep_cmd->add_option("--preset", sweep_preset, "fig2|fig3")
      ->check(CLI::IsMember({"fig2", "fig3"}));
  CLI::Option* sweep_seed_opt =
      sweep_cmd->add_option("--seed", sweep_seed, "64-bit seed");
  CLI::Option* sweep_workers_opt =
      sweep_cmd->add_option("--workers", sweep_workers, "worker threads");
  sweep_cmd->add_option("--out", sweep_out, "output directory")->required();

  ReconstructParams recon;
  std::string recon_config, recon_preset, recon_mode;
  CLI::App* recon_cmd = app.add_subcommand(
      "reconstruct", "fit curves and reconstruct the 2D distribution");
  recon_cmd->add_option("--in", recon.in_dir, "directory of curve files")
      ->required();
  recon_cmd->add_option("--out", recon.out_dir, "output directory")->required();
  recon_cmd->add_option("--config", recon_config, "json config path");
  recon_cmd->add_option("--preset", recon_preset, "fig2|fig3")
      ->check(CLI::IsMember({"fig2", "fig3"}));
  CLI::Option* grid_size_opt =
      recon_cmd->add_option("--grid-size", recon.settings.grid_size);
  CLI::Option* axis_points_opt =
      recon_cmd->add_option("--axis-points", recon.settings.axis_points);
  CLI::Option* mode_opt = recon_cmd->add_option("--mode", recon_mode)
                              ->check(CLI::IsMember({"parametric",
                                                     "nonparametric"}));
  recon_cmd->add_option("--workers", sweep_workers, "worker threads");

  std::string dyn_config, dyn_preset, dyn_out;
  std::uint64_t dyn_seed = 0;
  int dyn_workers = 0;
  bool dyn_study = false;
  CLI::App* dyn_cmd =
      app.add_subcommand("dynamics", "delay scans of the transition width");
  dyn_cmd->add_option("--config", dyn_config, "json config path");
  dyn_cmd->add_option("--preset", dyn_preset, "fig2|fig3")
      ->check(CLI::IsMember({"fig2", "fig3"}));
  CLI::Option* dyn_seed_opt = dyn_cmd->add_option("--seed", dyn_seed, "64-bit seed");
  CLI::Option* dyn_workers_opt =
      dyn_cmd->add_option("--workers", dyn_workers, "worker threads");
  dyn_cmd->add_option("--out", dyn_out, "output directory")->required();
  dyn_cmd->add_flag("--pump-phase-study", dyn_study,
                    "compare aligned and orthogonal pump phases");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }

  try {
    if (oracle_cmd->parsed()) {
      cmd_oracle(oracle);
    } else if (sweep_cmd->parsed()) {
      const RunConfig cfg =
          resolve_config(sweep_config, sweep_preset, sweep_seed_opt->count() > 0,
                         sweep_seed, sweep_workers_opt->count() > 0,
                         sweep_workers);
      cmd_sweep(cfg, sweep_out);
    } else if (recon_cmd->parsed()) {
      if (!recon_config.empty() || !recon_preset.empty()) {
        json j;
        if (!recon_config.empty()) {
          j = json::parse(read_file(recon_config), nullptr, false);
          if (j.is_discarded())
            throw std::invalid_argument("config: invalid json in " +
                                        recon_config);
        } else {
          j = preset_json(recon_preset);
        }
        j["seed"] = 0;  // reconstruction consumes no randomness
        recon.settings = config_from_json(j).recon;
      }
      if (grid_size_opt->count() > 0)
        recon.settings.grid_size = static_cast<int>(grid_size_opt->as<int>());
      if (axis_points_opt->count() > 0)
        recon.settings.axis_points = static_cast<int>(axis_points_opt->as<int>());
      if (mode_opt->count() > 0)
        recon.settings.mode = recon_mode == "parametric"
                                  ? reconstruct::SensitivityMode::parametric
                                  : reconstruct::SensitivityMode::nonparametric;
      cmd_reconstruct(recon);
    } else if (dyn_cmd->parsed()) {
      const RunConfig cfg =
          resolve_config(dyn_config, dyn_preset, dyn_seed_opt->count() > 0,
                         dyn_seed, dyn_workers_opt->count() > 0, dyn_workers);
      cmd_dynamics(cfg, dyn_out, dyn_study);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace opotomo::io
