#pragma once

#include <string>
#include <vector>

namespace dlr {

// Runs the dlr command line; returns the process exit code.
int run_cli(const std::vector<std::string>& args);

// Writes a grayscale P5 image, min-max scaled to 0..255.
void write_pgm(const std::string& path, const std::vector<double>& values, int width, int height);

}  // namespace dlr
