#pragma once

/// Command-line surface. Subcommands map 1:1 onto module operations:
/// synth, tile, train-proposer, train-classifier, infer, evaluate, sweep.
/// Every run with an --out directory writes a run.json capturing the
/// resolved config, seed and argv; `mitodet --from-run run.json` replays it.

#include <string>
#include <vector>

namespace mitodet::cli {

/// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, const char* const* argv);

}  // namespace mitodet::cli
