// Step response under a delayed network, sketched in the terminal.

#include <algorithm>
#include <iostream>
#include <string>

#include "nmpc/eval.hpp"

int main() {
  using namespace nmpc;

  ScenarioConfig cfg;
  cfg.duration_s = 5.0;
  cfg.joint_count = 1;
  cfg.references = {StepRef{1.0, 0.5}};
  cfg.fwd.base_delay_s = 0.1;
  cfg.bwd.base_delay_s = 0.1;

  const RunResult run = run_scenario(cfg);

  std::cout << "1 rad step at t=0.5 s, 100 ms each way\n\n";
  const int rows = 20, cols = 72;
  const double y_max = 1.2;
  for (int r = rows; r >= 0; --r) {
    const double level = y_max * r / rows;
    std::string line(cols, ' ');
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = c * (run.trace.size() - 1) / (cols - 1);
      const auto& rec = run.trace[i];
      const double cell = y_max / rows;
      if (std::abs(rec.ref_angle[0] - level) < cell / 2) line[c] = '-';
      if (std::abs(rec.angle[0] - level) < cell / 2) line[c] = '*';
    }
    printf("%5.2f |%s\n", level, line.c_str());
  }
  std::cout << std::string(7, ' ') << std::string(cols, '~') << "\n";
  std::cout << "       0 s" << std::string(cols - 13, ' ') << "5 s\n\n";

  std::cout << "overshoot = " << format_double(peak_overshoot(run.trace, 0, 0.5, 1.0))
            << " rad, 90% rise delay = "
            << format_double(rise90_delay(run.trace, 0, 0.5, 1.0)) << " s\n";
  return 0;
}
