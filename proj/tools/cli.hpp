#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace compass::cli {

// Exit-code contract.
enum ExitCode : int {
    kOk = 0,
    kRuntimeFailure = 1,
    kInputError = 2,        // invalid flags or values, missing input files
    kVersionMismatch = 3,
    kSchemaViolation = 4,   // unparseable or malformed input file
};

// Runs one command line (without the program name). Errors are reported on
// stderr and mapped onto ExitCode.
int run(const std::vector<std::string>& args);

// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const std::string& bytes);

// SHA-256 over "<relative path> <file digest>\n" lines of every regular file
// under `dir` in sorted order, skipping manifest.json.
std::string directory_digest(const std::filesystem::path& dir);

// The default checkpoint grid {0, 8, 32, 128, 512, 2000, 8000} scaled to
// `total_steps` and rounded, duplicates dropped.
std::vector<int> default_checkpoint_grid(int total_steps);

}  // namespace compass::cli
