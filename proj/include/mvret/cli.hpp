#pragma once

// The mvret command line: synth, baseline, train, eval, sweep, bound, report.
//
// Exit codes: 0 success, 2 filesystem errors, 1 everything else (usage,
// config, validation, format, numeric). Failures print one JSON line
// {"error": <kind>, "message": ...} to the error stream; warnings print
// {"warning": ...}.

#include <iosfwd>
#include <string>
#include <vector>

#include "mvret/error.hpp"

namespace mvret {

int exit_code_for(ErrorKind kind);

/// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mvret
