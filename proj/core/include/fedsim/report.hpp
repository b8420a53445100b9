#pragma once

#include <string>
#include <vector>

#include "fedsim/experiment.hpp"

namespace fedsim {

struct ComparisonReport {
  std::string text;                    // aligned table
  std::string csv;                     // same rows, machine-readable
  std::vector<std::string> warnings;  // e.g. differing dataset digests
};

// Side-by-side accuracy / time-to-target / computational-cost table over two
// or more run summaries. Warns (does not fail) when the summaries were
// produced from different datasets.
ComparisonReport compare_report(const std::vector<SummaryReport>& summaries);
ComparisonReport compare_report_files(const std::vector<std::string>& summary_paths);

}  // namespace fedsim
