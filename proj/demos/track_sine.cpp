// What does the rollout compensation buy? One joint tracks a 0.5 rad sine
// while the command and measurement legs carry 100 ms each; the run is
// scored against the same loop with a perfect network.

#include <iostream>

#include "nmpc/eval.hpp"

int main() {
  using namespace nmpc;

  ScenarioConfig cfg = sine_base_scenario();
  cfg.duration_s = 30.0;
  cfg.fwd.base_delay_s = 0.1;
  cfg.bwd.base_delay_s = 0.1;

  const RunResult ideal = run_scenario(delay_free(cfg));

  std::cout << "0.5 rad sine at 0.2 Hz, 100 ms each way, 30 s\n\n";
  for (bool predict : {false, true}) {
    cfg.forward_prediction = predict;
    const RunResult run = run_scenario(cfg);
    std::cout << (predict ? "prediction on : " : "prediction off: ")
              << "rss = " << format_double(rss(run.trace, ideal.trace))
              << ", ise = " << format_double(ise(run.trace)) << "\n";
  }
  std::cout << "\nThe compensated loop sits close to the delay-free one; the\n"
               "uncompensated loop acts on commands that are 200 ms stale.\n";
  return 0;
}
