#pragma once

#include <stdexcept>
#include <string>

namespace xrec {

class EmissionsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs to the operational-carbon estimate
///   kg CO2e = carbon_intensity * pue * power_kw * hours.
struct EmissionsParams {
  double carbon_intensity = 0.22;  // kg CO2e per kWh
  double pue = 1.2;                // data-center power usage effectiveness
  double power_kw = 0.91;          // device draw in kW
  double hours = 0.0;              // wall-clock runtime
};

/// Named device power profiles selectable from the command line.
///   h100     -> 0.91 kW
///   a100_mig -> 0.65 kW
double gpu_profile_power_kw(const std::string& profile);

/// kg CO2e for the given parameters. Errors on non-positive
/// carbon_intensity, pue, or power, or negative hours.
double emissions_estimate(const EmissionsParams& params);

/// Appends one accounting line (with a header when the file is new) to a CSV
/// with columns command,gpu_profile,seconds,kg_co2e.
void append_emissions_csv(const std::string& path, const std::string& command,
                          const std::string& gpu_profile, double seconds, double kg_co2e);

/// Caveat printed with every rendered report: the formula above does not
/// reproduce previously circulated full-scale totals, and this pipeline
/// sides with the formula.
inline constexpr const char* kEmissionsNote =
    "Emissions accounting note: estimates follow carbon_intensity x PUE x power x time. "
    "Previously reported full-scale figures (6.74 kg CO2e for an 18.24 h run on a 0.91 kW "
    "device at PUE 1.2 and intensity 0.22 kg/kWh) exceed what that formula yields "
    "(about 4.38 kg CO2e); the figures here keep the formula value.";

}  // namespace xrec
