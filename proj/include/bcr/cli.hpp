#pragma once

#include <iosfwd>
#include <string>

namespace bcr {

// Entry point of the `bcrmil` tool. Logs (JSON lines) and the error line go
// to `log`; data goes to files only. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& log);

// File name used for the masks of one m value, e.g. "masks_m20.csv".
std::string mask_file_name(double m_percent);

}  // namespace bcr
