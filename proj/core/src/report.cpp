#include "fedsim/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fedsim {

namespace {

std::string fmt(double v, const char* spec) {
  if (std::isnan(v)) return "NaN";
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return std::string(buf);
}

}  // namespace

ComparisonReport compare_report(const std::vector<SummaryReport>& summaries) {
  if (summaries.size() < 2)
    throw std::invalid_argument("compare_report: need at least 2 summaries");
  ComparisonReport report;
  for (std::size_t i = 1; i < summaries.size(); ++i)
    if (summaries[i].dataset_digest != summaries[0].dataset_digest) {
      report.warnings.push_back("dataset digests differ between run 0 and run " +
                                std::to_string(i) + "; rows are not directly comparable");
      break;
    }

  std::ostringstream text;
  char line[256];
  std::snprintf(line, sizeof(line), "%-18s %6s %10s %18s %14s\n", "mode", "seed", "accuracy",
                "time_to_target_s", "mflops");
  text << line;
  report.csv = "mode,seed,accuracy,time_to_target_s,mflops\n";
  for (const SummaryReport& s : summaries) {
    std::string acc = fmt(s.final_test_accuracy, "%.4f");
    std::string time = fmt(s.sim_seconds_to_target, "%.4f");
    std::string mflops = fmt(s.mflops_per_sample_final, "%.6f");
    std::snprintf(line, sizeof(line), "%-18s %6llu %10s %18s %14s\n", s.mode.c_str(),
                  static_cast<unsigned long long>(s.seed), acc.c_str(), time.c_str(),
                  mflops.c_str());
    text << line;
    report.csv += s.mode + "," + std::to_string(s.seed) + "," + acc + "," + time + "," + mflops +
                  "\n";
  }
  report.text = text.str();
  return report;
}

ComparisonReport compare_report_files(const std::vector<std::string>& summary_paths) {
  std::vector<SummaryReport> summaries;
  for (const std::string& path : summary_paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::invalid_argument("compare_report: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    summaries.push_back(SummaryReport::from_json(ss.str()));
  }
  return compare_report(summaries);
}

}  // namespace fedsim
