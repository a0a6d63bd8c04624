#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "opotomo/protocol.hpp"
#include "opotomo/reconstruct.hpp"

namespace opotomo::io {

inline constexpr const char* kToolVersion = "0.1.0";

struct ReconstructionSettings {
  int grid_size = 128;
  int axis_points = 129;
  double axis_halfwidth_sigmas = 4.0;
  reconstruct::SensitivityMode mode = reconstruct::SensitivityMode::parametric;

  void validate() const;
};

struct RunConfig {
  protocol::SweepPlan plan{};
  ReconstructionSettings recon{};

  void validate() const;
};

// The seed must be present in the json; it is never defaulted.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& config);
nlohmann::json preset_json(const std::string& name);  // "fig2" or "fig3", no seed

// Delimited-text records; parse(format(x)) == x.
std::string format_curve(const protocol::BiasProbabilityCurve& curve);
protocol::BiasProbabilityCurve parse_curve(const std::string& text);
std::string format_marginal(const reconstruct::MarginalQ& marginal);
reconstruct::MarginalQ parse_marginal(const std::string& text);
std::string format_qgrid(const reconstruct::QGrid& grid);
reconstruct::QGrid parse_qgrid(const std::string& text);

std::uint64_t fnv1a64(std::string_view bytes);
std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

int run_cli(int argc, char** argv);

}  // namespace opotomo::io
