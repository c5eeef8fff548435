#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace bgf {

struct GradSuiteEntry {
  std::string suite;  // ops, blocks, attention, losses
  std::string name;
  std::size_t seeds = 0;
  double worst_rel_err = 0;
  double tolerance = 0;
  std::string worst_detail;  // seed, tensor and coordinate of the worst case

  bool passed() const { return worst_rel_err <= tolerance; }
};

struct GradSuiteOptions {
  std::size_t seeds = 20;
  std::vector<std::string> suites;  // empty -> all
  std::vector<std::string> only;    // case names; empty -> all
};

std::vector<std::string> grad_suite_names();

// Central-difference checks at float64 of every differentiable op, block,
// attention module and loss.
std::vector<GradSuiteEntry> run_grad_suites(const GradSuiteOptions& opt = {});

// Worst offenders first.
std::string grad_suite_table(std::vector<GradSuiteEntry> entries);
nlohmann::json grad_suite_to_json(const std::vector<GradSuiteEntry>& entries);

}  // namespace bgf
