#include "xrec/emissions.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>

namespace xrec {

double gpu_profile_power_kw(const std::string& profile) {
  if (profile == "h100") return 0.91;
  if (profile == "a100_mig") return 0.65;
  throw EmissionsError("unknown gpu profile \"" + profile + "\" (expected h100 or a100_mig)");
}

double emissions_estimate(const EmissionsParams& params) {
  if (params.carbon_intensity <= 0.0) throw EmissionsError("carbon intensity must be positive");
  if (params.pue <= 0.0) throw EmissionsError("pue must be positive");
  if (params.power_kw <= 0.0) throw EmissionsError("device power must be positive");
  if (params.hours < 0.0) throw EmissionsError("runtime hours must be non-negative");
  return params.carbon_intensity * params.pue * params.power_kw * params.hours;
}

void append_emissions_csv(const std::string& path, const std::string& command,
                          const std::string& gpu_profile, double seconds, double kg_co2e) {
  bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw EmissionsError("cannot write " + path);
  if (fresh) out << "command,gpu_profile,seconds,kg_co2e\n";
  out << command << "," << gpu_profile << "," << std::setprecision(17) << seconds << ","
      << kg_co2e << "\n";
  if (!out) throw EmissionsError("write failed: " + path);
}

}  // namespace xrec
